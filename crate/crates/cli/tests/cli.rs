use std::fs;
use std::path::Path;

use elastic_mt::artifacts::{load_versioned, save_versioned, PipelineManifest};
use elastic_mt::design_space::{DesignSpace, SubConfig};
use elastic_mt::search::{OperatingLibrary, OperatingPoint};
use elastic_mt_cli::run_subcommand;

struct Output {
    code: i32,
    stdout: String,
    stderr: String,
}

fn emt(args: &[&str], stdin: &str) -> Output {
    let mut argv = vec!["emt"];
    argv.extend_from_slice(args);
    let mut input = stdin.as_bytes();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_subcommand(argv, &mut input, &mut out, &mut err);
    Output {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_subcommand_prints_usage() {
    let o = emt(&["frobnicate"], "");
    assert_ne!(o.code, 0);
    assert!(o.stderr.contains("Usage"), "{}", o.stderr);
}

#[test]
fn help_lists_every_subcommand() {
    let o = emt(&["--help"], "");
    assert_eq!(o.code, 0);
    for cmd in [
        "init-space",
        "gen-corpus",
        "train-super",
        "collect-latency",
        "fit-predictor",
        "search",
        "reduce-space",
        "evaluate",
        "run",
        "pipeline",
    ] {
        assert!(o.stdout.contains(cmd), "missing {cmd}");
    }
}

#[test]
fn contract_violation_emits_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = emt(&["fit-predictor", "--dataset", p(&missing), "--out", p(&dir.path().join("x"))], "");
    assert_eq!(o.code, 1);
    let line: serde_json::Value = serde_json::from_str(o.stderr.trim()).unwrap();
    assert_eq!(line["error"], "io");
}

fn point(cfg: SubConfig, ms: f64, loss: f64) -> OperatingPoint {
    OperatingPoint {
        constraint_ms: ms,
        config: cfg,
        predicted_ms: ms,
        measured_ms: ms,
        val_loss: loss,
        bleu: None,
    }
}

#[test]
fn reduce_space_drops_unused_embedding_width() {
    let dir = tempfile::tempdir().unwrap();
    let space = DesignSpace::desk();
    let space_path = dir.path().join("space.json");
    save_versioned(&space, &space_path).unwrap();
    let mut points = Vec::new();
    for i in 0..6 {
        let mut cfg = elastic_mt::design_space::sample_uniform(&space, i);
        cfg.encoder_embed_dim = 32;
        cfg.decoder_embed_dim = 32;
        points.push(point(cfg, 100.0 * (i + 1) as f64, 5.0 - i as f64 * 0.1));
    }
    let lib = OperatingLibrary { points, gaps: vec![] };
    let lib_path = dir.path().join("lib.json");
    lib.save(&lib_path).unwrap();
    let out = dir.path().join("reduced.json");
    let o = emt(
        &["reduce-space", "--space", p(&space_path), "--library", p(&lib_path), "--out", p(&out)],
        "",
    );
    assert_eq!(o.code, 0, "{}", o.stderr);
    let reduced: DesignSpace = load_versioned(&out).unwrap();
    assert_eq!(reduced.encoder_embed_choices, vec![32]);
    assert_eq!(reduced.decoder_embed_choices, vec![32]);
    assert!(reduced.cardinality() < space.cardinality());
}

fn run_pipeline(dir: &Path) -> Vec<u8> {
    let space_path = dir.join("space.json");
    let o = emt(&["init-space", "--preset", "tiny", "--out", p(&space_path)], "");
    assert_eq!(o.code, 0, "{}", o.stderr);
    let mut m = PipelineManifest::desk(dir);
    m.vocab_size = 16;
    m.train_pairs = 60;
    m.train_steps = 8;
    m.batch_size = 8;
    m.latency_samples = 40;
    m.constraints = vec![500.0, 650.0, 900.0];
    m.population_size = 6;
    m.n_iterations = 2;
    let manifest = dir.join("manifest.json");
    m.save(&manifest).unwrap();
    let o = emt(&["pipeline", "--manifest", p(&manifest)], "");
    assert_eq!(o.code, 0, "{}", o.stderr);
    fs::read(&m.library).unwrap()
}

#[test]
fn pipeline_is_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let la = run_pipeline(a.path());
    let lb = run_pipeline(b.path());
    assert_eq!(la, lb);
    let lib = OperatingLibrary::from_json(std::str::from_utf8(&la).unwrap()).unwrap();
    assert!(!lib.is_empty());

    // The trained bank and library drive the run-time controller.
    let bank = a.path().join("bank.ckpt");
    let library = a.path().join("library.json");
    let log = a.path().join("events.jsonl");
    let o = emt(
        &["run", "--bank", p(&bank), "--library", p(&library), "--log", p(&log)],
        "set-constraint 10\ntranslate 4 5 6\nstats\nquit\n",
    );
    assert_eq!(o.code, 0, "{}", o.stderr);
    let lines: Vec<serde_json::Value> = o.stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["violation"], true);
    assert!(lines[1]["tokens"].is_array());
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 1);

    let o = emt(
        &["evaluate", "--bank", p(&bank), "--corpus", p(&a.path().join("corpus")), "--library", p(&library), "--point", "0", "--limit", "5"],
        "",
    );
    assert_eq!(o.code, 0, "{}", o.stderr);
    let report: serde_json::Value = serde_json::from_str(o.stdout.trim()).unwrap();
    assert_eq!(report["n_sentences"], 5);
    assert_eq!(report["format_version"], 1);
}

#[test]
fn stages_run_individually() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let space = d.join("space.json");
    let corpus = d.join("corpus");
    let bank = d.join("bank.ckpt");
    let ds = d.join("lat.jsonl");
    let pred = d.join("pred.json");
    let lib = d.join("lib.json");
    let steps: Vec<Vec<&str>> = vec![
        vec!["init-space", "--preset", "tiny", "--out", p(&space)],
        vec!["gen-corpus", "--vocab", "16", "--train", "40", "--valid", "10", "--test", "10", "--seed", "3", "--out", p(&corpus)],
        vec![
            "train-super", "--space", p(&space), "--corpus", p(&corpus), "--out", p(&bank), "--steps", "4",
            "--batch-size", "8", "--warmup", "2", "--init-seed", "1", "--seed", "2",
        ],
        vec!["collect-latency", "--space", p(&space), "--samples", "30", "--seed", "4", "--hardware", "sim-cpu", "--out", p(&ds)],
        vec!["fit-predictor", "--dataset", p(&ds), "--out", p(&pred)],
        vec![
            "search", "--space", p(&space), "--constraints", "3000,5000", "--hardware", "sim-cpu", "--predictor", p(&pred),
            "--population", "6", "--iterations", "2", "--seed", "5", "--out", p(&lib),
        ],
    ];
    for args in steps {
        let o = emt(&args, "");
        assert_eq!(o.code, 0, "{args:?}: {}", o.stderr);
        let _: serde_json::Value = serde_json::from_str(o.stdout.trim()).unwrap();
    }
    assert!(!OperatingLibrary::load(&lib).unwrap().is_empty());
}
