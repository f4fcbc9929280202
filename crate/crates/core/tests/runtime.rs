use std::io::Cursor;
use std::sync::Arc;

use elastic_mt::design_space::{DesignSpace, SubConfig};
use elastic_mt::model::init_super;
use elastic_mt::runtime::{replay_active, select_point, serve, Controller};
use elastic_mt::search::{OperatingLibrary, OperatingPoint};

/// Measured GPU latency, validation loss and decoder depth of six operating points.
const GPU_ROWS: [(f64, f64, usize); 6] = [
    (356.11, 4.8229, 1),
    (608.95, 4.3821, 2),
    (854.85, 4.231, 3),
    (994.96, 4.155, 4),
    (1255.38, 4.1177, 5),
    (1526.54, 4.1048, 6),
];

fn depth_config(base: &SubConfig, depth: usize) -> SubConfig {
    let mut c = base.clone();
    c.n_decoder_layers = depth;
    c.decoder_ffn_dims = vec![base.decoder_ffn_dims[0]; depth];
    c.decoder_heads = vec![base.decoder_heads[0]; depth];
    c.enc_dec_attn = vec![base.enc_dec_attn[0]; depth];
    c
}

fn gpu_points() -> Vec<OperatingPoint> {
    let base = DesignSpace::full().max_config();
    GPU_ROWS
        .iter()
        .map(|&(ms, loss, d)| OperatingPoint {
            constraint_ms: ms,
            config: depth_config(&base, d),
            predicted_ms: ms,
            measured_ms: ms,
            val_loss: loss,
            bleu: None,
        })
        .collect()
}

fn depths(points: &[OperatingPoint], constraints: &[f64]) -> Vec<(usize, bool)> {
    constraints
        .iter()
        .map(|&c| {
            let (i, flag) = select_point(points, c).unwrap();
            (points[i].config.n_decoder_layers, flag)
        })
        .collect()
}

#[test]
fn gpu_rows_select_expected_latencies() {
    let points = gpu_points();
    let picked: Vec<(f64, bool)> = [300.0, 700.0, 1000.0, 1600.0]
        .iter()
        .map(|&c| {
            let (i, flag) = select_point(&points, c).unwrap();
            (points[i].measured_ms, flag)
        })
        .collect();
    assert_eq!(picked, vec![(356.11, true), (608.95, false), (994.96, false), (1526.54, false)]);
}

#[test]
fn constraint_sequence_scales_depth_down_and_back() {
    let points = gpu_points();
    assert_eq!(depths(&points, &[1600.0, 700.0, 1600.0]), vec![(6, false), (2, false), (6, false)]);
    // 600 ms sits below the 608.95 ms two-layer point.
    assert_eq!(depths(&points, &[1600.0, 600.0, 1600.0]), vec![(6, false), (1, false), (6, false)]);
}

#[test]
fn exact_budget_is_feasible() {
    let points = gpu_points();
    assert_eq!(depths(&points, &[854.85]), vec![(3, false)]);
    assert_eq!(depths(&points, &[854.84]), vec![(2, false)]);
}

fn tiny_controller() -> Controller {
    let space = DesignSpace::tiny();
    let base = space.max_config();
    let points = (1..=2)
        .map(|d| OperatingPoint {
            constraint_ms: 100.0 * d as f64,
            config: depth_config(&base, d),
            predicted_ms: 100.0 * d as f64,
            measured_ms: 100.0 * d as f64,
            val_loss: 3.0 - d as f64,
            bleu: None,
        })
        .collect();
    let bank = Arc::new(init_super(&space, 16, 3).unwrap());
    Controller::new(bank, OperatingLibrary { points, gaps: vec![] }).unwrap()
}

#[test]
fn event_log_replays_active_configs() {
    let c = tiny_controller();
    let initial = c.active_point().config.config_hash();
    let mut seen = Vec::new();
    for constraint in [250.0, 150.0, 50.0, 250.0, 250.0, 120.0] {
        c.handle_constraint_event(constraint).unwrap();
        seen.push(c.active_point().config.config_hash());
    }
    let events = c.events();
    assert_eq!(replay_active(&initial, &events), seen);
    assert!(events[2].violation);
    assert!(!events[4].switched);
    assert!(events.iter().all(|e| !e.switched || e.switch_time_ms >= 0.0));
}

#[test]
fn serve_switches_then_translates() {
    let c = tiny_controller();
    let input = Cursor::new("set-constraint 250\ntranslate 4 5 6\nset-constraint nope\nstats\nquit\ntranslate 4\n");
    let mut out = Vec::new();
    let mut log = Vec::new();
    serve(&c, input, &mut out, Some(&mut log)).unwrap();
    let lines: Vec<serde_json::Value> = String::from_utf8(out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[2]["error"], "invalid_command");
    assert_eq!(c.active_point().config.n_decoder_layers, 2);
    let logged = String::from_utf8(log).unwrap();
    assert_eq!(logged.lines().count(), 1);
}
