//! Weight-shared SuperTransformer training, standalone training of a single
//! config, validation loss and finite-difference gradient checking.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamGrad, Tape};
use crate::corpus::{batch_iterator, sequential_batches, Batch, Corpus};
use crate::design_space::{sample_with, DesignSpace, SubConfig};
use crate::error::{Error, Result};
use crate::model::{batch_loss, inherit, SubModelView, SuperWeights};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub label_smoothing: f64,
    pub gradient_clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            learning_rate: 5e-4,
            warmup_steps: 400,
            label_smoothing: 0.1,
            gradient_clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.steps == 0 || self.batch_size == 0 || self.warmup_steps == 0 {
            return bad("steps, batch_size and warmup_steps must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} ∉ [0, 1)", self.label_smoothing));
        }
        if !(self.gradient_clip_norm > 0.0) {
            return bad(format!("gradient_clip_norm {} must be positive", self.gradient_clip_norm));
        }
        Ok(())
    }

    /// Linear warm-up, then inverse-square-root decay. `step` starts at 1.
    pub fn lr_at(&self, step: usize) -> f64 {
        let t = step.max(1) as f64;
        let w = self.warmup_steps as f64;
        self.learning_rate * (t / w).min((w / t).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub config_hash: String,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Bank-shaped gradients plus the blocks each tensor was read through.
pub struct GradStore {
    grads: Vec<Option<Matrix>>,
    /// Per tensor: for row `r`, columns `0..bound[r]` were read.
    bounds: Vec<Vec<usize>>,
}

impl GradStore {
    pub fn collect(bank: &SuperWeights, entries: Vec<ParamGrad>) -> Self {
        let n = bank.n_tensors();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        let mut bounds: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in entries {
            let (rows, cols) = e.full;
            let g = grads[e.id].get_or_insert_with(|| Matrix::zeros(rows, cols));
            g.add_leading_block(&e.block);
            let b = &mut bounds[e.id];
            if b.is_empty() {
                b.resize(rows, 0);
            }
            for r in 0..e.block.rows() {
                b[r] = b[r].max(e.block.cols());
            }
        }
        Self { grads, bounds }
    }

    pub fn grad(&self, id: usize) -> Option<&Matrix> {
        self.grads[id].as_ref()
    }

    pub fn touched(&self, id: usize, r: usize, c: usize) -> bool {
        self.bounds[id].get(r).is_some_and(|&b| c < b)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(|g| g.sum_sq()).sum::<f64>().sqrt()
    }

    fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }
}

/// Adam restricted to the elements a step actually read.
struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(bank: &SuperWeights) -> Self {
        let zeros: Vec<Matrix> = bank
            .tensors()
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }

    fn step(&mut self, bank: &mut SuperWeights, grads: &GradStore, lr: f64, t: usize) {
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for id in 0..bank.n_tensors() {
            let Some(g) = grads.grad(id) else { continue };
            let cols = g.cols();
            let bounds = &grads.bounds[id];
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let w = bank.tensor_mut(id);
            for (r, &bound) in bounds.iter().enumerate() {
                let base = r * cols;
                for c in 0..bound {
                    let i = base + c;
                    let gi = g.as_slice()[i];
                    let mi = self.beta1 * m.as_slice()[i] + (1.0 - self.beta1) * gi;
                    let vi = self.beta2 * v.as_slice()[i] + (1.0 - self.beta2) * gi * gi;
                    m.as_mut_slice()[i] = mi;
                    v.as_mut_slice()[i] = vi;
                    let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                    w.as_mut_slice()[i] -= update;
                }
            }
        }
    }
}

/// Loss and bank-shaped gradients of one batch through `view`.
pub fn loss_and_grads(view: &SubModelView<'_>, batch: &Batch, smoothing: f64) -> (f64, GradStore) {
    let mut tape = Tape::new();
    let (loss, _) = batch_loss(&mut tape, view, batch, smoothing, true);
    let value = tape.value(loss).get(0, 0);
    let grads = GradStore::collect(view.bank(), tape.backward(loss));
    (value, grads)
}

struct Trainer {
    adam: Adam,
    step: usize,
}

impl Trainer {
    fn new(bank: &SuperWeights) -> Self {
        Self {
            adam: Adam::new(bank),
            step: 0,
        }
    }

    fn step(
        &mut self,
        bank: &mut SuperWeights,
        cfg: &SubConfig,
        batch: &Batch,
        settings: &TrainSettings,
    ) -> Result<LogRecord> {
        self.step += 1;
        let (loss, mut grads) = {
            let view = inherit(bank, cfg)?;
            loss_and_grads(&view, batch, settings.label_smoothing)
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                config_hash: cfg.config_hash(),
                loss,
            });
        }
        let norm = grads.global_norm();
        if norm > settings.gradient_clip_norm {
            grads.scale(settings.gradient_clip_norm / norm);
        }
        self.adam
            .step(bank, &grads, settings.lr_at(self.step), self.step);
        Ok(LogRecord {
            step: self.step,
            config_hash: cfg.config_hash(),
            loss,
        })
    }
}

fn check_corpus(corpus: &Corpus, bank: &SuperWeights) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("training corpus is empty".into()));
    }
    if corpus.vocab.vocab_size > bank.vocab_size() {
        return Err(Error::InvalidInput(format!(
            "corpus vocabulary {} exceeds bank vocabulary {}",
            corpus.vocab.vocab_size,
            bank.vocab_size()
        )));
    }
    Ok(())
}

/// Uniform weight-shared training: every step samples one config from
/// `space` and updates only the elements its view reads.
pub fn train_super(
    bank: &mut SuperWeights,
    space: &DesignSpace,
    corpus: &Corpus,
    settings: &TrainSettings,
) -> Result<TrainingLog> {
    settings.validate()?;
    space.validate()?;
    check_corpus(corpus, bank)?;
    inherit(bank, &space.max_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let batches = batch_iterator(corpus, settings.batch_size, settings.seed.wrapping_add(1));
    let mut stream = batches.stream();
    let mut trainer = Trainer::new(bank);
    let mut log = TrainingLog::default();
    for _ in 0..settings.steps {
        let cfg = sample_with(space, &mut rng);
        let batch = stream.next().expect("endless batch stream");
        log.records.push(trainer.step(bank, &cfg, &batch, settings)?);
    }
    Ok(log)
}

/// Trains one fixed config on an existing bank.
pub fn train_config(
    bank: &mut SuperWeights,
    cfg: &SubConfig,
    corpus: &Corpus,
    settings: &TrainSettings,
) -> Result<TrainingLog> {
    settings.validate()?;
    check_corpus(corpus, bank)?;
    inherit(bank, cfg)?;
    let batches = batch_iterator(corpus, settings.batch_size, settings.seed.wrapping_add(1));
    let mut stream = batches.stream();
    let mut trainer = Trainer::new(bank);
    let mut log = TrainingLog::default();
    for _ in 0..settings.steps {
        let batch = stream.next().expect("endless batch stream");
        log.records.push(trainer.step(bank, cfg, &batch, settings)?);
    }
    Ok(log)
}

/// Fresh weights sized exactly to `cfg`, trained on `corpus`.
pub fn train_from_scratch(
    cfg: &SubConfig,
    vocab_size: usize,
    corpus: &Corpus,
    settings: &TrainSettings,
) -> Result<(SuperWeights, TrainingLog)> {
    let mut bank = SuperWeights::init_standalone(cfg, vocab_size, settings.seed)?;
    let log = train_config(&mut bank, cfg, corpus, settings)?;
    Ok((bank, log))
}

/// Mean per-token cross-entropy in nats under teacher forcing, pad excluded,
/// no label smoothing.
pub fn validation_loss(view: &SubModelView<'_>, corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("validation corpus is empty".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in sequential_batches(corpus, 64) {
        let mut tape = Tape::new();
        let (loss, n) = batch_loss(&mut tape, view, &batch, 0.0, false);
        total += tape.value(loss).get(0, 0);
        count += n;
    }
    Ok(total / count as f64)
}

/// Denominator floor for the relative error, so that parameters with
/// vanishing gradients are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;
pub const GRAD_CHECK_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub n_checked: usize,
    /// Largest |gradient| among elements the view does not read.
    pub max_outside_gradient: f64,
}

fn probe_loss(view: &SubModelView<'_>, batch: &Batch, smoothing: f64) -> f64 {
    let mut tape = Tape::new();
    let (loss, _) = batch_loss(&mut tape, view, batch, smoothing, true);
    tape.value(loss).get(0, 0)
}

/// Central differences against analytic gradients on `n_probes` randomly
/// chosen elements the view reads.
pub fn gradient_check(
    bank: &SuperWeights,
    cfg: &SubConfig,
    probe_batch: &Batch,
    smoothing: f64,
    n_probes: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let view = inherit(bank, cfg)?;
    let mut tape = Tape::new();
    let (loss, _) = batch_loss(&mut tape, &view, probe_batch, smoothing, true);
    let grads = GradStore::collect(bank, tape.backward(loss));
    drop(tape);

    let mut outside = 0.0f64;
    for id in 0..bank.n_tensors() {
        if let Some(g) = grads.grad(id) {
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    if !view.touches(id, r, c) {
                        outside = outside.max(g.get(r, c).abs());
                    }
                }
            }
        }
    }

    let slices = view.slices();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = std::collections::BTreeSet::new();
    let mut attempts = 0;
    while chosen.len() < n_probes && attempts < n_probes * 50 {
        attempts += 1;
        let s = slices[rng.gen_range(0..slices.len())];
        chosen.insert((s.id, rng.gen_range(0..s.rows), rng.gen_range(0..s.cols)));
    }

    let mut work = bank.clone();
    let mut max_rel = 0.0f64;
    for &(id, r, c) in &chosen {
        let analytic = grads.grad(id).map_or(0.0, |g| g.get(r, c));
        let orig = work.tensor(id).get(r, c);
        work.tensor_mut(id).set(r, c, orig + GRAD_CHECK_STEP);
        let plus = probe_loss(&inherit(&work, cfg)?, probe_batch, smoothing);
        work.tensor_mut(id).set(r, c, orig - GRAD_CHECK_STEP);
        let minus = probe_loss(&inherit(&work, cfg)?, probe_batch, smoothing);
        work.tensor_mut(id).set(r, c, orig);
        let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
        let denom = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        max_rel = max_rel.max((analytic - numeric).abs() / denom);
    }
    Ok(GradCheckReport {
        max_relative_error: max_rel,
        n_checked: chosen.len(),
        max_outside_gradient: outside,
    })
}
