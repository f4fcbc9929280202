//! The `emt` command line: one subcommand per pipeline stage, each reading
//! and writing the documented artifact formats.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use elastic_mt::artifacts::{load_versioned, save_versioned, PipelineManifest};
use elastic_mt::corpus::{generate_splits, Corpus, CorpusSplits};
use elastic_mt::design_space::{reduce_space, DesignSpace, SubConfig};
use elastic_mt::latency::{
    build_latency_dataset, fit_predictor, measure_model_latency, read_samples_jsonl, write_samples_jsonl,
    CostModel, CostModelRunner, Hardware, LatencyModel, LatencyPredictor, MeasureOptions, ModelRunner,
};
use elastic_mt::metrics::evaluate;
use elastic_mt::model::{greedy_translate, inherit, init_super, SuperWeights};
use elastic_mt::runtime::{default_max_len, serve, Controller};
use elastic_mt::search::{build_operating_library, surrogate_loss, OperatingLibrary, SearchSettings};
use elastic_mt::training::{train_super, validation_loss, TrainSettings};
use elastic_mt::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "emt", version, about = "Elastic transformer pipeline: train once, search per hardware, switch at run time")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a design-space file from a preset.
    InitSpace(InitSpaceArgs),
    /// Generate the synthetic reversal corpus (train/valid/test).
    GenCorpus(GenCorpusArgs),
    /// Train the SuperTransformer with uniformly sampled SubConfigs.
    TrainSuper(TrainSuperArgs),
    /// Measure latencies of sampled configs on real or simulated hardware.
    CollectLatency(CollectLatencyArgs),
    /// Fit the linear latency predictor to a latency dataset.
    FitPredictor(FitPredictorArgs),
    /// Search one operating point per latency constraint.
    Search(SearchArgs),
    /// Shrink a design space to the choices used by a library's best configs.
    ReduceSpace(ReduceSpaceArgs),
    /// Translate a corpus split and report BLEU and token accuracy.
    Evaluate(EvaluateArgs),
    /// Serve line commands with the run-time controller.
    Run(RunArgs),
    /// Write a pipeline manifest with default sizes.
    InitManifest(InitManifestArgs),
    /// Run every stage named in a manifest.
    Pipeline(PipelineArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Desk,
    Tiny,
    Full,
}

#[derive(Args, Debug)]
pub struct InitSpaceArgs {
    /// Preset to write.
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// Design-space file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    /// Vocabulary size including the four reserved ids.
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    /// Training pairs.
    #[arg(long, default_value_t = 2000)]
    pub train: usize,
    /// Validation pairs.
    #[arg(long, default_value_t = 200)]
    pub valid: usize,
    /// Test pairs.
    #[arg(long, default_value_t = 200)]
    pub test: usize,
    /// Shortest source sentence.
    #[arg(long, default_value_t = 4)]
    pub min_len: usize,
    /// Longest source sentence.
    #[arg(long, default_value_t = 12)]
    pub max_len: usize,
    /// Seed for the token bijection and sentences.
    #[arg(long)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainSuperArgs {
    /// Design-space file.
    #[arg(long)]
    pub space: PathBuf,
    /// Corpus directory written by gen-corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Optimizer steps, one sampled config each.
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Sentence pairs per step.
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Peak learning rate.
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    /// Linear warm-up steps before inverse-square-root decay.
    #[arg(long, default_value_t = 400)]
    pub warmup: usize,
    /// Label smoothing in [0, 1).
    #[arg(long, default_value_t = 0.1)]
    pub label_smoothing: f64,
    /// Global gradient-norm clip.
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    /// Seed for weight initialization.
    #[arg(long)]
    pub init_seed: u64,
    /// Seed for config sampling and batch order.
    #[arg(long)]
    pub seed: u64,
    /// Per-step training log (line-delimited JSON).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MeasureFlags {
    /// real, sim-gpu or sim-cpu.
    #[arg(long, default_value = "sim-gpu")]
    pub hardware: String,
    /// Timed runs per config.
    #[arg(long, default_value_t = 300)]
    pub repeats: usize,
    /// Fraction dropped from each end before averaging.
    #[arg(long, default_value_t = 0.10)]
    pub trim: f64,
    /// Output tokens per timed translation.
    #[arg(long, default_value_t = 30)]
    pub sentence_len: usize,
    /// Measurement noise of simulated hardware.
    #[arg(long, default_value_t = 0.0)]
    pub noise_sd: f64,
    /// Checkpoint to time on `real` hardware.
    #[arg(long)]
    pub bank: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CollectLatencyArgs {
    /// Design-space file to sample from.
    #[arg(long)]
    pub space: PathBuf,
    /// Configs to measure.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Seed for config sampling and simulated noise.
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub measure: MeasureFlags,
    /// Latency dataset to write (line-delimited JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FitPredictorArgs {
    /// Latency dataset written by collect-latency.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Predictor file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    /// Design-space file to search.
    #[arg(long)]
    pub space: PathBuf,
    /// Comma-separated latency constraints in milliseconds.
    #[arg(long, value_delimiter = ',', required = true)]
    pub constraints: Vec<f64>,
    /// Fitted predictor; simulated hardware falls back to its cost model.
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    /// Corpus directory for validation loss; requires --bank. Without a
    /// bank the analytic surrogate loss is used.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Number of validation pairs scored per config.
    #[arg(long, default_value_t = 200)]
    pub valid_limit: usize,
    /// Population size.
    #[arg(long, default_value_t = 50)]
    pub population: usize,
    /// Generations.
    #[arg(long, default_value_t = 15)]
    pub iterations: usize,
    /// Share of the population kept as parents.
    #[arg(long, default_value_t = 0.25)]
    pub parent_fraction: f64,
    /// Per-gene mutation probability.
    #[arg(long, default_value_t = 0.3)]
    pub mutation_prob: f64,
    /// Share of non-parent slots filled by crossover.
    #[arg(long, default_value_t = 0.5)]
    pub crossover_fraction: f64,
    /// Share of non-parent slots filled by mutation.
    #[arg(long, default_value_t = 0.5)]
    pub mutation_fraction: f64,
    /// Search seed; constraint i uses seed + i.
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub measure: MeasureFlags,
    /// Operating library to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReduceSpaceArgs {
    /// Design space the library was searched in.
    #[arg(long)]
    pub space: PathBuf,
    /// Operating library.
    #[arg(long)]
    pub library: PathBuf,
    /// Number of lowest-loss library configs to keep.
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    /// Reduced design-space file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Checkpoint to translate with.
    #[arg(long)]
    pub bank: PathBuf,
    /// Corpus directory written by gen-corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// train, valid or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Config file to evaluate; defaults to the largest config of the bank.
    #[arg(long, conflicts_with = "library")]
    pub config: Option<PathBuf>,
    /// Library whose point `--point` is evaluated.
    #[arg(long, requires = "point")]
    pub library: Option<PathBuf>,
    /// Index into the library points.
    #[arg(long)]
    pub point: Option<usize>,
    /// Evaluate only the first N pairs.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Report file; printed to stdout if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Checkpoint kept resident while serving.
    #[arg(long)]
    pub bank: PathBuf,
    /// Operating library to switch between.
    #[arg(long)]
    pub library: PathBuf,
    /// Event log (line-delimited JSON).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InitManifestArgs {
    /// Directory every artifact will be written under.
    #[arg(long)]
    pub dir: PathBuf,
    /// Manifest file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    /// Manifest written by init-manifest.
    #[arg(long)]
    pub manifest: PathBuf,
}

/// Runs `argv` (including the program name) and returns the exit status.
pub fn run_subcommand<I, T>(argv: I, stdin: &mut dyn BufRead, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                stdout.write_all(text.as_bytes())
            } else {
                stderr.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, stdin, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let line = json!({ "error": e.kind(), "message": e.to_string() });
            let _ = writeln!(stderr, "{line}");
            1
        }
    }
}

fn emit(out: &mut dyn Write, v: Value) -> Result<()> {
    writeln!(out, "{v}")?;
    Ok(())
}

fn dispatch(cmd: Command, stdin: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::InitSpace(a) => {
            let space = match a.preset {
                Preset::Desk => DesignSpace::desk(),
                Preset::Tiny => DesignSpace::tiny(),
                Preset::Full => DesignSpace::full(),
            };
            save_versioned(&space, &a.out)?;
            emit(out, json!({ "space": a.out, "cardinality": space.cardinality().to_string() }))
        }
        Command::GenCorpus(a) => {
            let splits = generate_splits(a.vocab, (a.train, a.valid, a.test), (a.min_len, a.max_len), a.seed)?;
            splits.write_dir(&a.out)?;
            emit(out, json!({ "corpus": a.out, "train": a.train, "valid": a.valid, "test": a.test }))
        }
        Command::TrainSuper(a) => {
            let settings = TrainSettings {
                steps: a.steps,
                batch_size: a.batch_size,
                learning_rate: a.lr,
                warmup_steps: a.warmup,
                label_smoothing: a.label_smoothing,
                gradient_clip_norm: a.clip,
                seed: a.seed,
            };
            let summary = train_stage(&a.space, &a.corpus, &a.out, a.log.as_deref(), a.init_seed, &settings)?;
            emit(out, summary)
        }
        Command::CollectLatency(a) => {
            let space: DesignSpace = load_versioned(&a.space)?;
            let summary = collect_stage(&space, a.samples, a.seed, &a.measure, &a.out)?;
            emit(out, summary)
        }
        Command::FitPredictor(a) => {
            let p = fit_predictor(&read_samples_jsonl(&a.dataset)?)?;
            save_versioned(&p, &a.out)?;
            emit(
                out,
                json!({ "predictor": a.out, "heldout_rmse": p.heldout_rmse, "rank_deficient": p.rank_deficient }),
            )
        }
        Command::Search(a) => {
            let space: DesignSpace = load_versioned(&a.space)?;
            let settings = SearchSettings {
                population_size: a.population,
                n_iterations: a.iterations,
                parent_fraction: a.parent_fraction,
                mutation_prob: a.mutation_prob,
                crossover_fraction: a.crossover_fraction,
                mutation_fraction: a.mutation_fraction,
                seed: a.seed,
            };
            let lib = search_stage(
                &space,
                &a.constraints,
                a.predictor.as_deref(),
                a.corpus.as_deref(),
                a.valid_limit,
                &a.measure,
                &settings,
            )?;
            lib.save(&a.out)?;
            emit(out, json!({ "library": a.out, "points": lib.len(), "gaps": lib.gaps }))
        }
        Command::ReduceSpace(a) => {
            let space: DesignSpace = load_versioned(&a.space)?;
            let lib = OperatingLibrary::load(&a.library)?;
            let reduced = reduce_stage(&space, &lib, a.top_k)?;
            save_versioned(&reduced, &a.out)?;
            emit(
                out,
                json!({
                    "space": a.out,
                    "cardinality_before": space.cardinality().to_string(),
                    "cardinality_after": reduced.cardinality().to_string(),
                }),
            )
        }
        Command::Evaluate(a) => {
            let bank = SuperWeights::load(&a.bank)?;
            let cfg = match (&a.config, &a.library, a.point) {
                (Some(path), _, _) => load_versioned::<SubConfig>(path)?,
                (None, Some(lib), Some(i)) => {
                    let lib = OperatingLibrary::load(lib)?;
                    lib.points
                        .get(i)
                        .ok_or_else(|| Error::InvalidInput(format!("library has no point {i}")))?
                        .config
                        .clone()
                }
                _ => bank.space().max_config(),
            };
            let splits = CorpusSplits::read_dir(&a.corpus)?;
            let corpus = match a.split.as_str() {
                "train" => splits.train,
                "valid" => splits.valid,
                "test" => splits.test,
                other => return Err(Error::InvalidInput(format!("unknown split {other:?}"))),
            };
            let corpus = corpus.truncated(a.limit.unwrap_or(usize::MAX));
            let report = evaluate_corpus(&bank, &cfg, &corpus)?;
            let text = serde_json::to_string(&report)?;
            if let Some(path) = &a.out {
                fs::write(path, format!("{text}\n"))?;
            }
            writeln!(out, "{text}")?;
            Ok(())
        }
        Command::Run(a) => {
            let bank = Arc::new(SuperWeights::load(&a.bank)?);
            let lib = OperatingLibrary::load(&a.library)?;
            let controller = Controller::new(bank, lib)?;
            let mut log_file = match &a.log {
                Some(p) => Some(std::io::BufWriter::new(fs::File::create(p)?)),
                None => None,
            };
            let log: Option<&mut dyn Write> = log_file.as_mut().map(|f| f as &mut dyn Write);
            serve(&controller, stdin, &mut *out, log)?;
            if let Some(mut f) = log_file {
                f.flush()?;
            }
            Ok(())
        }
        Command::InitManifest(a) => {
            PipelineManifest::desk(&a.dir).save(&a.out)?;
            emit(out, json!({ "manifest": a.out }))
        }
        Command::Pipeline(a) => {
            let m = PipelineManifest::load(&a.manifest)?;
            pipeline(&m, out)
        }
    }
}

fn train_stage(
    space_path: &Path,
    corpus_dir: &Path,
    bank_path: &Path,
    log_path: Option<&Path>,
    init_seed: u64,
    settings: &TrainSettings,
) -> Result<Value> {
    let space: DesignSpace = load_versioned(space_path)?;
    let splits = CorpusSplits::read_dir(corpus_dir)?;
    let mut bank = init_super(&space, splits.train.vocab.vocab_size, init_seed)?;
    let log = train_super(&mut bank, &space, &splits.train, settings)?;
    bank.round_to_f32();
    bank.save(bank_path)?;
    if let Some(p) = log_path {
        log.write_jsonl(p)?;
    }
    let tail = log.losses();
    let n = tail.len().min(50);
    let final_loss = tail[tail.len() - n..].iter().sum::<f64>() / n as f64;
    Ok(json!({ "bank": bank_path, "steps": settings.steps, "final_train_loss": final_loss, "checksum": bank.checksum() }))
}

fn measure_options(m: &MeasureFlags) -> MeasureOptions {
    MeasureOptions {
        sentence_len: m.sentence_len,
        repeats: m.repeats,
        trim_frac: m.trim,
        warmup: 5,
    }
}

/// Latency of one config on the selected hardware.
struct Measurer<'b> {
    hardware: Hardware,
    cost: Option<CostModel>,
    bank: Option<&'b SuperWeights>,
    opts: MeasureOptions,
    seed: u64,
    calls: u64,
}

impl<'b> Measurer<'b> {
    fn new(space: &DesignSpace, flags: &MeasureFlags, seed: u64, bank: Option<&'b SuperWeights>) -> Result<Self> {
        let hardware = Hardware::parse(&flags.hardware)?;
        let cost = hardware.cost_model(space).map(|c| c.with_noise(flags.noise_sd));
        if let Some(c) = &cost {
            c.validate()?;
        }
        if hardware == Hardware::Real && bank.is_none() {
            return Err(Error::InvalidInput("hardware real requires --bank".into()));
        }
        Ok(Self {
            hardware,
            cost,
            bank,
            opts: measure_options(flags),
            seed,
            calls: 0,
        })
    }

    fn measure(&mut self, cfg: &SubConfig) -> Result<f64> {
        self.calls += 1;
        match (&self.cost, self.bank) {
            (Some(c), _) => {
                let mut r = CostModelRunner::new(*c, cfg, self.seed ^ self.calls.wrapping_mul(0x9e37_79b9_7f4a_7c15));
                measure_model_latency(&mut r, &self.opts)
            }
            (None, Some(bank)) => {
                let mut r = ModelRunner::new(inherit(bank, cfg)?);
                measure_model_latency(&mut r, &self.opts)
            }
            (None, None) => unreachable!("checked in Measurer::new"),
        }
    }
}

fn load_bank(flags: &MeasureFlags) -> Result<Option<SuperWeights>> {
    flags.bank.as_deref().map(SuperWeights::load).transpose()
}

fn collect_stage(space: &DesignSpace, n: usize, seed: u64, flags: &MeasureFlags, out: &Path) -> Result<Value> {
    let bank = match Hardware::parse(&flags.hardware)? {
        Hardware::Real => load_bank(flags)?,
        _ => None,
    };
    let mut m = Measurer::new(space, flags, seed, bank.as_ref())?;
    let id = m.hardware.id();
    let ds = build_latency_dataset(space, n, id, &mut |c| m.measure(c), seed)?;
    write_samples_jsonl(&ds.samples, out)?;
    Ok(json!({ "dataset": out, "samples": ds.samples.len(), "failed": ds.n_failed, "hardware": id }))
}

fn search_stage(
    space: &DesignSpace,
    constraints: &[f64],
    predictor_path: Option<&Path>,
    corpus_dir: Option<&Path>,
    valid_limit: usize,
    flags: &MeasureFlags,
    settings: &SearchSettings,
) -> Result<OperatingLibrary> {
    let bank = load_bank(flags)?;
    let mut measurer = Measurer::new(space, flags, settings.seed, bank.as_ref())?;
    let predictor: Box<dyn LatencyModel> = match (predictor_path, measurer.cost) {
        (Some(p), _) => Box::new(load_versioned::<LatencyPredictor>(p)?),
        (None, Some(c)) => Box::new(c),
        (None, None) => {
            return Err(Error::InvalidInput("hardware real requires --predictor".into()));
        }
    };
    let scoring = match (&bank, corpus_dir) {
        (Some(bank), Some(dir)) => Some((bank, CorpusSplits::read_dir(dir)?.valid.truncated(valid_limit))),
        (None, Some(_)) => return Err(Error::InvalidInput("--corpus requires --bank".into())),
        _ => None,
    };
    let mut measure = |c: &SubConfig| measurer.measure(c);
    let mut lib = match &scoring {
        Some((bank, valid)) => {
            let mut loss = |c: &SubConfig| validation_loss(&inherit(bank, c)?, valid);
            build_operating_library(space, constraints, predictor.as_ref(), &mut loss, &mut measure, settings)?
        }
        None => {
            let mut loss = |c: &SubConfig| Ok(surrogate_loss(space, c));
            build_operating_library(space, constraints, predictor.as_ref(), &mut loss, &mut measure, settings)?
        }
    };
    if let Some((bank, valid)) = &scoring {
        for p in &mut lib.points {
            p.bleu = Some(evaluate_corpus(bank, &p.config, valid)?.bleu);
        }
    }
    Ok(lib)
}

fn reduce_stage(space: &DesignSpace, lib: &OperatingLibrary, top_k: usize) -> Result<DesignSpace> {
    if top_k == 0 {
        return Err(Error::InvalidInput("top-k must be at least 1".into()));
    }
    let mut ranked: Vec<_> = lib.points.iter().collect();
    ranked.sort_by(|a, b| {
        a.val_loss
            .total_cmp(&b.val_loss)
            .then(a.measured_ms.total_cmp(&b.measured_ms))
    });
    let top: Vec<SubConfig> = ranked.into_iter().take(top_k).map(|p| p.config.clone()).collect();
    reduce_space(space, &top)
}

fn evaluate_corpus(bank: &SuperWeights, cfg: &SubConfig, corpus: &Corpus) -> Result<elastic_mt::metrics::EvalReport> {
    let view = inherit(bank, cfg)?;
    let mut cands = Vec::with_capacity(corpus.len());
    let mut refs = Vec::with_capacity(corpus.len());
    for p in &corpus.pairs {
        cands.push(greedy_translate(&view, &p.src, default_max_len(p.src.len()))?);
        refs.push(p.tgt.clone());
    }
    evaluate(&cands, &refs)
}

/// Corpus, training, latency dataset, predictor and operating library, in
/// that order.
pub fn pipeline(m: &PipelineManifest, out: &mut dyn Write) -> Result<()> {
    fs::create_dir_all(&m.logs_dir)?;
    let space: DesignSpace = load_versioned(&m.space)?;
    let n_eval = (m.train_pairs / 10).max(1);
    let splits = generate_splits(m.vocab_size, (m.train_pairs, n_eval, n_eval), (4, 12), m.seeds.corpus)?;
    splits.write_dir(&m.corpus_dir)?;
    emit(out, json!({ "stage": "gen-corpus", "corpus": m.corpus_dir }))?;

    let settings = TrainSettings {
        steps: m.train_steps,
        batch_size: m.batch_size,
        warmup_steps: (m.train_steps / 5).clamp(1, 400),
        seed: m.seeds.train,
        ..TrainSettings::default()
    };
    let log = m.logs_dir.join("train.jsonl");
    let summary = train_stage(&m.space, &m.corpus_dir, &m.bank, Some(&log), m.seeds.init, &settings)?;
    emit(out, json!({ "stage": "train-super", "summary": summary }))?;

    let flags = MeasureFlags {
        hardware: m.hardware.clone(),
        repeats: 300,
        trim: 0.10,
        sentence_len: 30,
        noise_sd: 0.0,
        bank: Some(m.bank.clone()),
    };
    let summary = collect_stage(&space, m.latency_samples, m.seeds.latency, &flags, &m.latency_dataset)?;
    emit(out, json!({ "stage": "collect-latency", "summary": summary }))?;

    let p = fit_predictor(&read_samples_jsonl(&m.latency_dataset)?)?;
    save_versioned(&p, &m.predictor)?;
    emit(out, json!({ "stage": "fit-predictor", "heldout_rmse": p.heldout_rmse }))?;

    let search = SearchSettings {
        population_size: m.population_size,
        n_iterations: m.n_iterations,
        seed: m.seeds.search,
        ..SearchSettings::default()
    };
    let lib = search_stage(
        &space,
        &m.constraints,
        Some(&m.predictor),
        Some(&m.corpus_dir),
        200,
        &flags,
        &search,
    )?;
    lib.save(&m.library)?;
    emit(out, json!({ "stage": "search", "library": m.library, "points": lib.len(), "gaps": lib.gaps }))
}
