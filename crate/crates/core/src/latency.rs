//! Latency measurement protocol, latency datasets, a linear latency
//! predictor and simulated hardware.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, N_SPECIAL};
use crate::design_space::{attended_layers, encode_features, sample_with, DesignSpace, SubConfig, N_FEATURES};
use crate::error::{Error, Result};
use crate::model::{greedy_translate_with, GreedyOptions, SubModelView};

/// Sort, drop `round(trim_frac · n)` values from each end, average the rest.
pub fn trimmed_mean_latency(samples: &[f64], trim_frac: f64) -> Result<f64> {
    if samples.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "trimmed mean needs at least 3 samples, got {}",
            samples.len()
        )));
    }
    if !(0.0..0.5).contains(&trim_frac) {
        return Err(Error::InvalidInput(format!("trim_frac {trim_frac} ∉ [0, 0.5)")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = (trim_frac * sorted.len() as f64).round() as usize;
    let kept = &sorted[k..sorted.len() - k];
    if kept.is_empty() {
        return Err(Error::InvalidInput("trimming removed every sample".into()));
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Something that translates one fixed-length sentence and reports how long
/// it took.
pub trait Runner {
    fn run_once(&mut self, sentence_len: usize) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureOptions {
    pub sentence_len: usize,
    pub repeats: usize,
    pub trim_frac: f64,
    pub warmup: usize,
}

impl Default for MeasureOptions {
    fn default() -> Self {
        Self {
            sentence_len: 30,
            repeats: 300,
            trim_frac: 0.10,
            warmup: 5,
        }
    }
}

/// Runs `warmup` untimed translations, then `repeats` timed ones, and returns
/// their trimmed mean.
pub fn measure_model_latency(runner: &mut dyn Runner, opts: &MeasureOptions) -> Result<f64> {
    if opts.sentence_len == 0 {
        return Err(Error::InvalidInput("sentence_len must be positive".into()));
    }
    for _ in 0..opts.warmup.max(5) {
        runner.run_once(opts.sentence_len)?;
    }
    let times = (0..opts.repeats)
        .map(|_| runner.run_once(opts.sentence_len))
        .collect::<Result<Vec<_>>>()?;
    trimmed_mean_latency(&times, opts.trim_frac)
}

/// Times greedy translation through a view, forcing exactly `sentence_len`
/// output tokens.
pub struct ModelRunner<'a> {
    view: SubModelView<'a>,
}

impl<'a> ModelRunner<'a> {
    pub fn new(view: SubModelView<'a>) -> Self {
        Self { view }
    }
}

/// A deterministic source sentence of `len` non-special tokens.
pub fn probe_sentence(vocab_size: usize, len: usize) -> Vec<TokenId> {
    let span = vocab_size.saturating_sub(N_SPECIAL).max(1);
    (0..len).map(|i| N_SPECIAL + (i * 7) % span).collect()
}

impl Runner for ModelRunner<'_> {
    fn run_once(&mut self, sentence_len: usize) -> Result<f64> {
        let src = probe_sentence(self.view.bank().vocab_size(), sentence_len);
        let start = Instant::now();
        let out = greedy_translate_with(&self.view, &src, GreedyOptions::exact(sentence_len))?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        if out.len() != sentence_len {
            return Err(Error::Measurement(format!(
                "expected {sentence_len} output tokens, got {}",
                out.len()
            )));
        }
        Ok(ms)
    }
}

/// Linear latency model of simulated hardware.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub base_ms: f64,
    pub per_decoder_layer_ms: f64,
    /// Per hidden unit of every FFN, encoder and decoder.
    pub per_ffn_unit_ms: f64,
    /// Per unit of encoder width plus per unit of width of each decoder layer.
    pub per_embed_unit_ms: f64,
    /// Per encoder layer attended, summed over decoder layers.
    pub per_attended_layer_ms: f64,
    pub noise_sd_ms: f64,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.base_ms,
            self.per_decoder_layer_ms,
            self.per_ffn_unit_ms,
            self.per_embed_unit_ms,
            self.per_attended_layer_ms,
            self.noise_sd_ms,
        ];
        if all.iter().all(|c| c.is_finite() && *c >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("cost model coefficients must be ≥ 0: {self:?}")))
        }
    }

    /// GPU-like: depth costs about 300 ms a layer, width is nearly free.
    pub fn sim_gpu(space: &DesignSpace) -> Self {
        Self {
            base_ms: 50.0,
            per_decoder_layer_ms: 300.0,
            per_ffn_unit_ms: 20.0 / space.max_ffn() as f64,
            per_embed_unit_ms: 20.0 / space.max_decoder_embed().max(space.max_encoder_embed()) as f64,
            per_attended_layer_ms: 10.0,
            noise_sd_ms: 0.0,
        }
    }

    /// CPU-like: depth costs about 1000 ms a layer and width is expensive.
    pub fn sim_cpu(space: &DesignSpace) -> Self {
        Self {
            base_ms: 200.0,
            per_decoder_layer_ms: 1000.0,
            per_ffn_unit_ms: 600.0 / space.max_ffn() as f64,
            per_embed_unit_ms: 600.0 / space.max_decoder_embed().max(space.max_encoder_embed()) as f64,
            per_attended_layer_ms: 50.0,
            noise_sd_ms: 0.0,
        }
    }

    pub fn with_noise(mut self, sd: f64) -> Self {
        self.noise_sd_ms = sd;
        self
    }

    /// Noise-free latency of `cfg`.
    pub fn latency(&self, cfg: &SubConfig) -> f64 {
        let l = cfg.n_decoder_layers as f64;
        let ffn: usize = cfg.encoder_ffn_dims.iter().chain(&cfg.decoder_ffn_dims).sum();
        let embed = cfg.encoder_embed_dim as f64 + l * cfg.decoder_embed_dim as f64;
        let attended: usize = cfg.enc_dec_attn.iter().map(|&a| attended_layers(a)).sum();
        self.base_ms
            + self.per_decoder_layer_ms * l
            + self.per_ffn_unit_ms * ffn as f64
            + self.per_embed_unit_ms * embed
            + self.per_attended_layer_ms * attended as f64
    }

    /// The same latency written as coefficients over `encode_features`.
    pub fn feature_coefficients(&self) -> (f64, [f64; N_FEATURES]) {
        let mut w = [0.0; N_FEATURES];
        w[0] = self.per_embed_unit_ms;
        w[2] = self.per_decoder_layer_ms;
        w[3] = self.per_ffn_unit_ms;
        w[4] = self.per_ffn_unit_ms;
        w[6] = self.per_attended_layer_ms / crate::design_space::FEATURE_SOURCE_POSITIONS;
        w[7] = self.per_embed_unit_ms;
        (self.base_ms, w)
    }
}

/// Cost-model stand-in for a device running one config.
pub struct CostModelRunner {
    model: CostModel,
    latency: f64,
    noise: Option<(Normal<f64>, ChaCha8Rng)>,
}

impl CostModelRunner {
    pub fn new(model: CostModel, cfg: &SubConfig, seed: u64) -> Self {
        let noise = (model.noise_sd_ms > 0.0).then(|| {
            (
                Normal::new(0.0, model.noise_sd_ms).expect("finite sd"),
                ChaCha8Rng::seed_from_u64(seed),
            )
        });
        Self {
            model,
            latency: model.latency(cfg),
            noise,
        }
    }

    pub fn model(&self) -> &CostModel {
        &self.model
    }
}

impl Runner for CostModelRunner {
    fn run_once(&mut self, _sentence_len: usize) -> Result<f64> {
        let noise = match &mut self.noise {
            Some((dist, rng)) => dist.sample(rng),
            None => 0.0,
        };
        Ok((self.latency + noise).max(1e-6))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Hardware {
    Real,
    SimGpu,
    SimCpu,
}

impl Hardware {
    pub fn id(self) -> &'static str {
        match self {
            Hardware::Real => "real",
            Hardware::SimGpu => "sim-gpu",
            Hardware::SimCpu => "sim-cpu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Hardware::Real),
            "sim-gpu" => Ok(Hardware::SimGpu),
            "sim-cpu" => Ok(Hardware::SimCpu),
            other => Err(Error::InvalidInput(format!(
                "unknown hardware {other:?}; expected real, sim-gpu or sim-cpu"
            ))),
        }
    }

    pub fn cost_model(self, space: &DesignSpace) -> Option<CostModel> {
        match self {
            Hardware::Real => None,
            Hardware::SimGpu => Some(CostModel::sim_gpu(space)),
            Hardware::SimCpu => Some(CostModel::sim_cpu(space)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub hardware_id: String,
    pub config: SubConfig,
    pub features: Vec<f64>,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyDataset {
    pub samples: Vec<LatencySample>,
    pub n_failed: usize,
}

/// Measures `n_samples` configs drawn uniformly from `space`. Failed
/// measurements are skipped and counted.
pub fn build_latency_dataset(
    space: &DesignSpace,
    n_samples: usize,
    hardware_id: &str,
    measure_fn: &mut dyn FnMut(&SubConfig) -> Result<f64>,
    seed: u64,
) -> Result<LatencyDataset> {
    if n_samples == 0 {
        return Err(Error::InvalidInput("n_samples must be at least 1".into()));
    }
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_samples);
    let mut n_failed = 0;
    for _ in 0..n_samples {
        let config = sample_with(space, &mut rng);
        match measure_fn(&config) {
            Ok(ms) if ms.is_finite() && ms > 0.0 => samples.push(LatencySample {
                hardware_id: hardware_id.to_string(),
                features: encode_features(&config),
                config,
                latency_ms: ms,
            }),
            _ => n_failed += 1,
        }
    }
    Ok(LatencyDataset { samples, n_failed })
}

pub fn write_samples_jsonl(samples: &[LatencySample], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_samples_jsonl(path: &Path) -> Result<Vec<LatencySample>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Ordinary least squares over standardized `encode_features` with an
/// intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyPredictor {
    pub hardware_id: String,
    pub intercept: f64,
    /// Per-feature slopes in original feature units.
    pub coefficients: Vec<f64>,
    pub heldout_rmse: f64,
    pub n_train: usize,
    pub n_heldout: usize,
    /// Set when the design matrix was rank-deficient and ridge damping was
    /// applied.
    pub rank_deficient: bool,
}

const RIDGE_LAMBDA: f64 = 1e-6;
const RANK_TOL: f64 = 1e-9;

/// Fits on the first 80% of `samples` and reports RMSE on the rest.
pub fn fit_predictor(samples: &[LatencySample]) -> Result<LatencyPredictor> {
    let n = samples.len();
    if n < 2 * N_FEATURES {
        return Err(Error::InvalidInput(format!(
            "predictor needs at least {} samples, got {n}",
            2 * N_FEATURES
        )));
    }
    for s in samples {
        if s.features.len() != N_FEATURES {
            return Err(Error::InvalidInput(format!(
                "sample has {} features, expected {N_FEATURES}",
                s.features.len()
            )));
        }
    }
    let n_heldout = (n / 5).max(1);
    let n_train = n - n_heldout;
    let (train, test) = samples.split_at(n_train);

    let mut mean = [0.0; N_FEATURES];
    for s in train {
        for (m, x) in mean.iter_mut().zip(&s.features) {
            *m += x / n_train as f64;
        }
    }
    let mut scale = [0.0; N_FEATURES];
    for s in train {
        for j in 0..N_FEATURES {
            scale[j] += (s.features[j] - mean[j]).powi(2) / n_train as f64;
        }
    }
    for s in scale.iter_mut() {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    let y_mean = train.iter().map(|s| s.latency_ms).sum::<f64>() / n_train as f64;
    let x = DMatrix::from_fn(n_train, N_FEATURES, |i, j| (train[i].features[j] - mean[j]) / scale[j]);
    let y = DVector::from_fn(n_train, |i, _| train[i].latency_ms - y_mean);

    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let rank_deficient = smax == 0.0 || smin / smax < RANK_TOL;
    let beta = if rank_deficient {
        let xtx = x.transpose() * &x + DMatrix::identity(N_FEATURES, N_FEATURES) * RIDGE_LAMBDA * n_train as f64;
        let xty = x.transpose() * &y;
        xtx.cholesky()
            .ok_or_else(|| Error::InvalidInput("ridge system is not positive definite".into()))?
            .solve(&xty)
    } else {
        svd.solve(&y, 0.0)
            .map_err(|e| Error::InvalidInput(format!("least squares failed: {e}")))?
    };
    let coefficients: Vec<f64> = (0..N_FEATURES).map(|j| beta[j] / scale[j]).collect();
    let intercept = y_mean - (0..N_FEATURES).map(|j| coefficients[j] * mean[j]).sum::<f64>();

    let mut p = LatencyPredictor {
        hardware_id: samples[0].hardware_id.clone(),
        intercept,
        coefficients,
        heldout_rmse: 0.0,
        n_train,
        n_heldout,
        rank_deficient,
    };
    let sse: f64 = test
        .iter()
        .map(|s| (p.predict_features(&s.features) - s.latency_ms).powi(2))
        .sum();
    p.heldout_rmse = (sse / n_heldout as f64).sqrt();
    Ok(p)
}

/// Anything that maps a config to predicted milliseconds.
pub trait LatencyModel {
    fn predict(&self, cfg: &SubConfig) -> f64;
}

impl LatencyPredictor {
    pub fn predict_features(&self, features: &[f64]) -> f64 {
        self.intercept
            + self
                .coefficients
                .iter()
                .zip(features)
                .map(|(w, x)| w * x)
                .sum::<f64>()
    }
}

impl LatencyModel for LatencyPredictor {
    fn predict(&self, cfg: &SubConfig) -> f64 {
        self.predict_features(&encode_features(cfg))
    }
}

impl LatencyModel for CostModel {
    fn predict(&self, cfg: &SubConfig) -> f64 {
        self.latency(cfg)
    }
}

pub fn predict(predictor: &LatencyPredictor, cfg: &SubConfig) -> f64 {
    predictor.predict(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design_space::sample_uniform;

    fn dataset(model: CostModel, n: usize, seed: u64) -> Vec<LatencySample> {
        let space = DesignSpace::desk();
        let mut k = 0u64;
        let mut measure = |cfg: &SubConfig| {
            k += 1;
            CostModelRunner::new(model, cfg, seed ^ (k << 20)).run_once(30)
        };
        build_latency_dataset(&space, n, "sim", &mut measure, seed)
            .unwrap()
            .samples
    }

    #[test]
    fn trimmed_mean_fixtures() {
        let xs: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(trimmed_mean_latency(&xs, 0.1).unwrap(), 5.5);
        assert_eq!(trimmed_mean_latency(&[7.0; 9], 0.2).unwrap(), 7.0);
        let mut rev = xs.clone();
        rev.reverse();
        assert_eq!(trimmed_mean_latency(&rev, 0.1).unwrap(), 5.5);
        assert_eq!(trimmed_mean_latency(&[1.0, 2.0, 6.0], 0.1).unwrap(), 3.0);
    }

    #[test]
    fn trimmed_mean_rejects_bad_input() {
        assert!(trimmed_mean_latency(&[1.0, 2.0], 0.1).is_err());
        assert!(trimmed_mean_latency(&[1.0, 2.0, 3.0], 0.5).is_err());
        assert!(trimmed_mean_latency(&[1.0, 2.0, 3.0], -0.1).is_err());
        assert!(trimmed_mean_latency(&[1.0, 2.0, 3.0, 4.0], 0.49).is_err());
    }

    #[test]
    fn noise_free_runner_is_exact_and_repeatable() {
        let space = DesignSpace::desk();
        let model = CostModel::sim_gpu(&space);
        let cfg = sample_uniform(&space, 4);
        let opts = MeasureOptions::default();
        let a = measure_model_latency(&mut CostModelRunner::new(model, &cfg, 1), &opts).unwrap();
        let b = measure_model_latency(&mut CostModelRunner::new(model, &cfg, 2), &opts).unwrap();
        assert_eq!(a, b);
        assert!((a - model.latency(&cfg)).abs() < 1e-9 * a);
    }

    #[test]
    fn doubling_depth_cost_doubles_depth_portion() {
        let space = DesignSpace::desk();
        let base = CostModel::sim_cpu(&space);
        let doubled = CostModel {
            per_decoder_layer_ms: 2.0 * base.per_decoder_layer_ms,
            ..base
        };
        let cfg = sample_uniform(&space, 8);
        let opts = MeasureOptions { repeats: 20, ..Default::default() };
        let a = measure_model_latency(&mut CostModelRunner::new(base, &cfg, 0), &opts).unwrap();
        let b = measure_model_latency(&mut CostModelRunner::new(doubled, &cfg, 0), &opts).unwrap();
        let depth = base.per_decoder_layer_ms * cfg.n_decoder_layers as f64;
        assert!((b - a - depth).abs() < 1e-9 * b);
    }

    #[test]
    fn warmup_runs_are_discarded() {
        struct Slow(usize);
        impl Runner for Slow {
            fn run_once(&mut self, _: usize) -> Result<f64> {
                self.0 += 1;
                Ok(if self.0 <= 5 { 1e6 } else { 2.0 })
            }
        }
        let opts = MeasureOptions { repeats: 10, warmup: 0, ..Default::default() };
        assert_eq!(measure_model_latency(&mut Slow(0), &opts).unwrap(), 2.0);
    }

    #[test]
    fn dataset_matches_cost_model_and_features() {
        let space = DesignSpace::desk();
        let model = CostModel::sim_gpu(&space);
        let a = dataset(model, 10, 3);
        let b = dataset(model, 10, 3);
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
        for s in &a {
            assert!((s.latency_ms - model.latency(&s.config)).abs() < 1e-9);
            assert_eq!(s.features, encode_features(&s.config));
        }
    }

    #[test]
    fn failed_measurements_are_counted() {
        let mut k = 0;
        let mut measure = |_: &SubConfig| {
            k += 1;
            if k % 2 == 0 {
                Err(Error::Measurement("device busy".into()))
            } else {
                Ok(1.0)
            }
        };
        let ds = build_latency_dataset(&DesignSpace::desk(), 6, "x", &mut measure, 0).unwrap();
        assert_eq!((ds.samples.len(), ds.n_failed), (3, 3));
    }

    #[test]
    fn linear_data_is_recovered() {
        let model = CostModel::sim_gpu(&DesignSpace::desk());
        let p = fit_predictor(&dataset(model, 200, 1)).unwrap();
        assert!(!p.rank_deficient);
        assert!(p.heldout_rmse < 1e-6, "{}", p.heldout_rmse);
        let (b, w) = model.feature_coefficients();
        assert!((p.intercept - b).abs() < 1e-6);
        for (got, want) in p.coefficients.iter().zip(w) {
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn constant_latency_gives_flat_model() {
        let model = CostModel {
            base_ms: 42.0,
            per_decoder_layer_ms: 0.0,
            per_ffn_unit_ms: 0.0,
            per_embed_unit_ms: 0.0,
            per_attended_layer_ms: 0.0,
            noise_sd_ms: 0.0,
        };
        let p = fit_predictor(&dataset(model, 50, 2)).unwrap();
        assert!((p.intercept - 42.0).abs() < 1e-8);
        assert!(p.coefficients.iter().all(|w| w.abs() < 1e-9));
    }

    #[test]
    fn constant_feature_sets_warning_flag() {
        let mut space = DesignSpace::desk();
        space.decoder_layer_choices = vec![2];
        let model = CostModel::sim_gpu(&space);
        let mut measure = |cfg: &SubConfig| Ok(model.latency(cfg));
        let ds = build_latency_dataset(&space, 60, "sim-gpu", &mut measure, 5).unwrap();
        let p = fit_predictor(&ds.samples).unwrap();
        assert!(p.rank_deficient);
        assert!(p.heldout_rmse < 1e-3);
    }

    #[test]
    fn too_few_samples_rejected() {
        let model = CostModel::sim_gpu(&DesignSpace::desk());
        assert!(fit_predictor(&dataset(model, 15, 0)).is_err());
    }

    #[test]
    fn noisy_fit_rmse_close_to_noise() {
        let sigma = 5.0;
        let model = CostModel::sim_gpu(&DesignSpace::desk()).with_noise(sigma);
        let samples = dataset(model, 1000, 9);
        let p = fit_predictor(&samples).unwrap();
        assert!(p.heldout_rmse <= 1.2 * sigma, "{}", p.heldout_rmse);
    }

    #[test]
    fn real_runner_produces_exact_length() {
        let space = DesignSpace::tiny();
        let bank = crate::model::init_super(&space, 16, 0).unwrap();
        let view = crate::model::inherit(&bank, &space.min_config()).unwrap();
        let mut r = ModelRunner::new(view);
        let opts = MeasureOptions { sentence_len: 6, repeats: 5, ..Default::default() };
        assert!(measure_model_latency(&mut r, &opts).unwrap() > 0.0);
    }
}
