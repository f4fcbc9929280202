use std::collections::BTreeSet;

use elastic_mt::artifacts::{from_versioned_json, to_versioned_json, PipelineManifest};
use elastic_mt::design_space::{
    reduce_space, sample_uniform, sample_with, validate_config, DesignSpace, SubConfig, ATTN_SPAN_VALUES,
};
use elastic_mt::latency::{
    build_latency_dataset, read_samples_jsonl, trimmed_mean_latency, write_samples_jsonl, CostModel,
};
use elastic_mt::metrics::bleu_corpus;
use elastic_mt::model::param_count;
use elastic_mt::runtime::select_point;
use elastic_mt::search::{exhaustive_search, surrogate_loss, OperatingLibrary, OperatingPoint};
use proptest::prelude::*;
use proptest::sample::subsequence;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn nonempty_subset<T: Clone + std::fmt::Debug + 'static>(values: Vec<T>) -> impl Strategy<Value = Vec<T>> {
    let n = values.len();
    subsequence(values, 1..=n)
}

/// Small spaces whose configurations can be enumerated.
fn small_space() -> impl Strategy<Value = DesignSpace> {
    (
        nonempty_subset(vec![4usize, 8]),
        nonempty_subset(vec![4usize, 8]),
        nonempty_subset(vec![8usize, 16, 32]),
        nonempty_subset(vec![1usize, 2]),
        nonempty_subset(vec![1usize, 2]),
        nonempty_subset(ATTN_SPAN_VALUES.to_vec()),
        1usize..=2,
    )
        .prop_map(|(ee, de, f, h, l, a, n_enc)| DesignSpace {
            encoder_embed_choices: ee,
            decoder_embed_choices: de,
            ffn_dim_choices: f,
            head_choices: h,
            decoder_layer_choices: l,
            enc_dec_attn_choices: a,
            encoder_layers: n_enc,
        })
}

fn point(ms: f64, loss: f64) -> OperatingPoint {
    OperatingPoint {
        constraint_ms: ms,
        config: DesignSpace::tiny().min_config(),
        predicted_ms: ms,
        measured_ms: ms,
        val_loss: loss,
        bleu: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_configs_validate(seed in any::<u64>()) {
        for space in [DesignSpace::desk(), DesignSpace::full(), DesignSpace::tiny()] {
            prop_assert!(validate_config(&space, &sample_uniform(&space, seed)).is_empty());
        }
    }

    #[test]
    fn cardinality_matches_enumeration(space in small_space()) {
        let n: u64 = space.cardinality().to_string().parse().unwrap();
        prop_assume!(n <= 10_000);
        let all = space.enumerate(10_000).unwrap();
        prop_assert_eq!(all.len() as u64, n);
        let distinct: BTreeSet<_> = all.iter().collect();
        prop_assert_eq!(distinct.len(), all.len());
    }

    #[test]
    fn reduce_is_idempotent(seeds in prop::collection::vec(any::<u64>(), 1..6)) {
        let space = DesignSpace::desk();
        let top: Vec<SubConfig> = seeds.iter().map(|&s| sample_uniform(&space, s)).collect();
        let once = reduce_space(&space, &top).unwrap();
        let twice = reduce_space(&once, &top).unwrap();
        prop_assert_eq!(&once, &twice);
        for c in &top {
            prop_assert!(validate_config(&once, c).is_empty());
        }
    }

    #[test]
    fn param_count_monotone_in_width_and_depth(seed in any::<u64>()) {
        let space = DesignSpace::desk();
        let cfg = sample_uniform(&space, seed);
        let base = param_count(&cfg, 64);
        let mut wider = cfg.clone();
        wider.encoder_embed_dim = space.max_encoder_embed();
        wider.decoder_embed_dim = space.max_decoder_embed();
        prop_assert!(param_count(&wider, 64) >= base);
        let mut ffn = cfg.clone();
        for f in ffn.encoder_ffn_dims.iter_mut().chain(ffn.decoder_ffn_dims.iter_mut()) {
            *f = space.max_ffn();
        }
        prop_assert!(param_count(&ffn, 64) >= base);
        if cfg.n_decoder_layers < space.max_decoder_layers() {
            let mut deeper = cfg.clone();
            deeper.n_decoder_layers += 1;
            deeper.decoder_ffn_dims.push(cfg.decoder_ffn_dims[0]);
            deeper.decoder_heads.push(cfg.decoder_heads[0]);
            deeper.enc_dec_attn.push(cfg.enc_dec_attn[0]);
            prop_assert!(param_count(&deeper, 64) > base);
        }
    }

    #[test]
    fn cost_latency_increases_with_depth(
        seed in any::<u64>(),
        layer_ms in 0.1f64..1000.0,
        ffn_ms in 0.0f64..10.0,
        embed_ms in 0.0f64..10.0,
        attn_ms in 0.0f64..100.0,
    ) {
        let space = DesignSpace::desk();
        let model = CostModel {
            base_ms: 10.0,
            per_decoder_layer_ms: layer_ms,
            per_ffn_unit_ms: ffn_ms,
            per_embed_unit_ms: embed_ms,
            per_attended_layer_ms: attn_ms,
            noise_sd_ms: 0.0,
        };
        let mut cfg = sample_uniform(&space, seed);
        cfg.n_decoder_layers = 1;
        cfg.decoder_ffn_dims.truncate(1);
        cfg.decoder_heads.truncate(1);
        cfg.enc_dec_attn.truncate(1);
        let mut prev = model.latency(&cfg);
        while cfg.n_decoder_layers < space.max_decoder_layers() {
            cfg.n_decoder_layers += 1;
            cfg.decoder_ffn_dims.push(cfg.decoder_ffn_dims[0]);
            cfg.decoder_heads.push(cfg.decoder_heads[0]);
            cfg.enc_dec_attn.push(cfg.enc_dec_attn[0]);
            let next = model.latency(&cfg);
            prop_assert!(next > prev);
            prev = next;
        }
    }

    #[test]
    fn trimmed_mean_without_drops_is_plain_mean(samples in prop::collection::vec(0.1f64..1e4, 3..40)) {
        // round(trim·n) = 0 whenever trim·n < 0.5.
        let trim = 0.49 / samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let got = trimmed_mean_latency(&samples, trim).unwrap();
        prop_assert!((got - mean).abs() <= 1e-9 * mean.abs().max(1.0));
    }

    #[test]
    fn trimmed_mean_ignores_order(mut samples in prop::collection::vec(0.1f64..1e4, 3..60), trim in 0.0f64..0.3) {
        let a = trimmed_mean_latency(&samples, trim);
        samples.reverse();
        let b = trimmed_mean_latency(&samples, trim);
        samples.sort_by(f64::total_cmp);
        let c = trimmed_mean_latency(&samples, trim);
        match (a, b, c) {
            (Ok(a), Ok(b), Ok(c)) => {
                prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
                prop_assert!((a - c).abs() < 1e-9 * a.max(1.0));
            }
            (a, b, c) => prop_assert!(a.is_err() && b.is_err() && c.is_err()),
        }
    }

    #[test]
    fn bleu_is_order_invariant_and_bounded(
        pairs in prop::collection::vec(
            (prop::collection::vec(0u8..6, 1..10), prop::collection::vec(0u8..6, 1..10)),
            1..8,
        ),
        rotate in 0usize..8,
    ) {
        let (c, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let b = bleu_corpus(&c, &r, 4).unwrap();
        prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
        let k = rotate % pairs.len();
        let mut c2 = c.clone();
        let mut r2 = r.clone();
        c2.rotate_left(k);
        r2.rotate_left(k);
        prop_assert!((bleu_corpus(&c2, &r2, 4).unwrap() - b).abs() < 1e-9);
        if c != r {
            prop_assert!(b < 100.0);
        }
    }

    #[test]
    fn exact_match_scores_full_bleu(refs in prop::collection::vec(prop::collection::vec(0u8..20, 4..12), 1..6)) {
        prop_assert!((bleu_corpus(&refs, &refs, 4).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn truncation_never_increases_bleu(
        refs in prop::collection::vec(prop::collection::vec(0u8..30, 6..14), 1..6),
        cut in 1usize..4,
    ) {
        let full = bleu_corpus(&refs, &refs, 4).unwrap();
        let short: Vec<Vec<u8>> = refs.iter().map(|r| r[..r.len() - cut].to_vec()).collect();
        let shorter: Vec<Vec<u8>> = refs.iter().map(|r| r[..r.len() - cut - 1].to_vec()).collect();
        let s = bleu_corpus(&short, &refs, 4).unwrap();
        let t = bleu_corpus(&shorter, &refs, 4).unwrap();
        prop_assert!(s <= full + 1e-9);
        prop_assert!(t <= s + 1e-9);
    }

    #[test]
    fn select_point_matches_brute_force(
        raw in prop::collection::vec((1.0f64..2000.0, 0.5f64..5.0), 1..12),
        constraint in 0.0f64..2500.0,
    ) {
        let points: Vec<OperatingPoint> = raw.iter().map(|&(ms, l)| point(ms, l)).collect();
        let (i, violated) = select_point(&points, constraint).unwrap();
        let feasible: Vec<&OperatingPoint> = points.iter().filter(|p| p.measured_ms <= constraint).collect();
        if feasible.is_empty() {
            prop_assert!(violated);
            let fastest = points.iter().map(|p| p.measured_ms).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(points[i].measured_ms, fastest);
        } else {
            prop_assert!(!violated);
            prop_assert!(points[i].measured_ms <= constraint);
            let best = feasible.iter().map(|p| p.val_loss).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(points[i].val_loss, best);
        }
    }

    #[test]
    fn exhaustive_best_loss_monotone_in_budget(c1 in 300.0f64..1000.0, delta in 0.0f64..600.0) {
        let space = DesignSpace::tiny();
        let model = CostModel::sim_gpu(&space);
        let c2 = c1 + delta;
        let mut loss = |cfg: &SubConfig| Ok(surrogate_loss(&space, cfg));
        let a = exhaustive_search(&space, c1, &model, &mut loss);
        let b = exhaustive_search(&space, c2, &model, &mut loss);
        if let Ok(a) = a {
            let b = b.unwrap();
            prop_assert!(a.predicted_ms <= c1);
            prop_assert!(b.predicted_ms <= c2);
            prop_assert!(b.loss <= a.loss);
        }
    }

    #[test]
    fn space_and_config_round_trip(seed in any::<u64>()) {
        let space = DesignSpace::desk();
        let cfg = sample_uniform(&space, seed);
        let text = serde_json::to_string(&cfg).unwrap();
        prop_assert_eq!(serde_json::from_str::<SubConfig>(&text).unwrap(), cfg);
        let text = to_versioned_json(&space).unwrap();
        prop_assert_eq!(from_versioned_json::<DesignSpace>(&text).unwrap(), space);
    }

    #[test]
    fn library_round_trips(
        raw in prop::collection::vec((1.0f64..2000.0, 0.5f64..5.0, any::<u64>(), prop::option::of(0.0f64..100.0)), 0..8),
        gaps in prop::collection::vec(1.0f64..100.0, 0..3),
    ) {
        let space = DesignSpace::desk();
        let points = raw
            .iter()
            .map(|&(ms, loss, seed, bleu)| OperatingPoint {
                constraint_ms: ms * 1.1,
                config: sample_uniform(&space, seed),
                predicted_ms: ms * 0.97,
                measured_ms: ms,
                val_loss: loss,
                bleu,
            })
            .collect();
        let lib = OperatingLibrary { points, gaps };
        let back = OperatingLibrary::from_json(&lib.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, lib);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dataset_round_trips(seed in any::<u64>(), n in 1usize..20) {
        let space = DesignSpace::desk();
        let model = CostModel::sim_cpu(&space).with_noise(5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut measure = |cfg: &SubConfig| {
            let noise: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            Ok(model.latency(cfg) + noise)
        };
        let ds = build_latency_dataset(&space, n, "sim-cpu", &mut measure, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("latency.jsonl");
        write_samples_jsonl(&ds.samples, &path).unwrap();
        prop_assert_eq!(read_samples_jsonl(&path).unwrap(), ds.samples);
    }

    #[test]
    fn manifest_round_trips(steps in 1usize..5000, seed in any::<u64>(), cs in prop::collection::vec(1.0f64..5000.0, 1..6)) {
        let dir = tempfile::tempdir().unwrap();
        let mut m = PipelineManifest::desk(dir.path());
        m.train_steps = steps;
        m.seeds.search = seed;
        m.constraints = cs;
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        prop_assert_eq!(PipelineManifest::load(&path).unwrap(), m);
    }

    #[test]
    fn sampling_with_shared_generator_stays_valid(seed in any::<u64>()) {
        let space = DesignSpace::full();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            prop_assert!(validate_config(&space, &sample_with(&space, &mut rng)).is_empty());
        }
    }
}

/// Ten thousand seeded draws from each preset all validate.
#[test]
fn ten_thousand_samples_validate() {
    for space in [DesignSpace::desk(), DesignSpace::full()] {
        for seed in 0..10_000 {
            assert!(validate_config(&space, &sample_uniform(&space, seed)).is_empty());
        }
    }
}
