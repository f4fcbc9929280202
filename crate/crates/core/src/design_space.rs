//! The elastic architecture space: which widths, head counts, depths and
//! cross-attention spans a SubTransformer may take, plus sampling, counting,
//! enumeration and hardware-family reduction.

use std::collections::BTreeSet;
use std::fmt;

use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Allowed values for the arbitrary encoder-decoder attention gene.
pub const ATTN_SPAN_VALUES: [i32; 3] = [-1, 1, 2];

/// Number of encoder layer outputs a cross-attention span attends to.
/// `-1` is the last layer only, `1` the last two, `2` the last three.
pub fn attended_layers(span: i32) -> usize {
    match span {
        -1 => 1,
        s if s > 0 => s as usize + 1,
        _ => 0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignSpace {
    pub encoder_embed_choices: Vec<usize>,
    pub decoder_embed_choices: Vec<usize>,
    pub ffn_dim_choices: Vec<usize>,
    pub head_choices: Vec<usize>,
    pub decoder_layer_choices: Vec<usize>,
    pub enc_dec_attn_choices: Vec<i32>,
    pub encoder_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubConfig {
    pub encoder_embed_dim: usize,
    pub decoder_embed_dim: usize,
    pub encoder_ffn_dims: Vec<usize>,
    pub encoder_heads: Vec<usize>,
    pub n_decoder_layers: usize,
    pub decoder_ffn_dims: Vec<usize>,
    pub decoder_heads: Vec<usize>,
    pub enc_dec_attn: Vec<i32>,
}

/// One failed membership, length or divisibility check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub dimension: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.dimension, self.message)
    }
}

fn set_str<T: fmt::Display>(xs: &[T]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| x.to_string()).collect();
    format!("{{{}}}", parts.join(","))
}

fn is_sorted_unique<T: Ord>(xs: &[T]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

impl DesignSpace {
    /// The full backbone space: two embedding widths per side, three FFN
    /// widths, two head counts, one to six decoder layers and all three
    /// cross-attention spans over a six-layer encoder.
    pub fn full() -> Self {
        Self {
            encoder_embed_choices: vec![512, 640],
            decoder_embed_choices: vec![512, 640],
            ffn_dim_choices: vec![1024, 2048, 3072],
            head_choices: vec![4, 8],
            decoder_layer_choices: vec![1, 2, 3, 4, 5, 6],
            enc_dec_attn_choices: vec![-1, 1, 2],
            encoder_layers: 6,
        }
    }

    /// A CPU-trainable space with the same structure as the full one.
    pub fn desk() -> Self {
        Self {
            encoder_embed_choices: vec![32, 64],
            decoder_embed_choices: vec![32, 64],
            ffn_dim_choices: vec![64, 128],
            head_choices: vec![2, 4],
            decoder_layer_choices: vec![1, 2, 3, 4],
            enc_dec_attn_choices: vec![-1, 1, 2],
            encoder_layers: 3,
        }
    }

    /// Widths of at most 8, small enough for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            encoder_embed_choices: vec![4, 8],
            decoder_embed_choices: vec![4, 8],
            ffn_dim_choices: vec![8, 16],
            head_choices: vec![1, 2],
            decoder_layer_choices: vec![1, 2],
            enc_dec_attn_choices: vec![-1, 1, 2],
            encoder_layers: 3,
        }
    }

    /// The smallest space containing `cfg`: every choice set is the set of
    /// values `cfg` uses.
    pub fn from_config(cfg: &SubConfig) -> Self {
        let uniq = |it: &mut dyn Iterator<Item = usize>| -> Vec<usize> {
            it.collect::<BTreeSet<_>>().into_iter().collect()
        };
        Self {
            encoder_embed_choices: vec![cfg.encoder_embed_dim],
            decoder_embed_choices: vec![cfg.decoder_embed_dim],
            ffn_dim_choices: uniq(&mut cfg
                .encoder_ffn_dims
                .iter()
                .chain(&cfg.decoder_ffn_dims)
                .copied()),
            head_choices: uniq(&mut cfg
                .encoder_heads
                .iter()
                .chain(&cfg.decoder_heads)
                .copied()),
            decoder_layer_choices: vec![cfg.n_decoder_layers],
            enc_dec_attn_choices: cfg
                .enc_dec_attn
                .iter()
                .copied()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
            encoder_layers: cfg.encoder_ffn_dims.len(),
        }
    }

    /// Checks the space's own invariants.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let usize_sets: [(&str, &Vec<usize>); 5] = [
            ("encoder_embed_choices", &self.encoder_embed_choices),
            ("decoder_embed_choices", &self.decoder_embed_choices),
            ("ffn_dim_choices", &self.ffn_dim_choices),
            ("head_choices", &self.head_choices),
            ("decoder_layer_choices", &self.decoder_layer_choices),
        ];
        for (name, set) in usize_sets {
            if set.is_empty() {
                problems.push(format!("{name} is empty"));
            } else if !is_sorted_unique(set) {
                problems.push(format!("{name} must be sorted ascending without repeats"));
            } else if set[0] == 0 {
                problems.push(format!("{name} contains 0"));
            }
        }
        if self.enc_dec_attn_choices.is_empty() {
            problems.push("enc_dec_attn_choices is empty".into());
        } else if !is_sorted_unique(&self.enc_dec_attn_choices) {
            problems.push("enc_dec_attn_choices must be sorted ascending without repeats".into());
        }
        for &a in &self.enc_dec_attn_choices {
            if !ATTN_SPAN_VALUES.contains(&a) {
                problems.push(format!("enc_dec_attn {a} ∉ {{-1,1,2}}"));
            } else if attended_layers(a) > self.encoder_layers {
                problems.push(format!(
                    "enc_dec_attn {a} attends {} layers but the encoder has {}",
                    attended_layers(a),
                    self.encoder_layers
                ));
            }
        }
        if self.encoder_layers == 0 {
            problems.push("encoder_layers must be positive".into());
        }
        for &h in &self.head_choices {
            for &e in self
                .encoder_embed_choices
                .iter()
                .chain(&self.decoder_embed_choices)
            {
                if h != 0 && e % h != 0 {
                    problems.push(format!("embed {e} not divisible by heads {h}"));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpace(problems.join("; ")))
        }
    }

    pub fn max_encoder_embed(&self) -> usize {
        *self.encoder_embed_choices.last().expect("validated space")
    }

    pub fn max_decoder_embed(&self) -> usize {
        *self.decoder_embed_choices.last().expect("validated space")
    }

    pub fn max_ffn(&self) -> usize {
        *self.ffn_dim_choices.last().expect("validated space")
    }

    pub fn max_decoder_layers(&self) -> usize {
        *self.decoder_layer_choices.last().expect("validated space")
    }

    /// The config taking the largest value in every dimension.
    pub fn max_config(&self) -> SubConfig {
        let l = self.max_decoder_layers();
        let h = *self.head_choices.last().unwrap();
        let a = *self.enc_dec_attn_choices.last().unwrap();
        SubConfig {
            encoder_embed_dim: self.max_encoder_embed(),
            decoder_embed_dim: self.max_decoder_embed(),
            encoder_ffn_dims: vec![self.max_ffn(); self.encoder_layers],
            encoder_heads: vec![h; self.encoder_layers],
            n_decoder_layers: l,
            decoder_ffn_dims: vec![self.max_ffn(); l],
            decoder_heads: vec![h; l],
            enc_dec_attn: vec![a; l],
        }
    }

    /// The config taking the smallest value in every dimension.
    pub fn min_config(&self) -> SubConfig {
        let l = self.decoder_layer_choices[0];
        let h = self.head_choices[0];
        let a = self.enc_dec_attn_choices[0];
        let f = self.ffn_dim_choices[0];
        SubConfig {
            encoder_embed_dim: self.encoder_embed_choices[0],
            decoder_embed_dim: self.decoder_embed_choices[0],
            encoder_ffn_dims: vec![f; self.encoder_layers],
            encoder_heads: vec![h; self.encoder_layers],
            n_decoder_layers: l,
            decoder_ffn_dims: vec![f; l],
            decoder_heads: vec![h; l],
            enc_dec_attn: vec![a; l],
        }
    }

    /// Number of distinct SubConfigs under per-layer elasticity.
    pub fn cardinality(&self) -> BigUint {
        let enc_layer = BigUint::from(self.ffn_dim_choices.len() * self.head_choices.len());
        let dec_layer = BigUint::from(
            self.ffn_dim_choices.len() * self.head_choices.len() * self.enc_dec_attn_choices.len(),
        );
        let mut decoder_total = BigUint::from(0u32);
        for &l in &self.decoder_layer_choices {
            decoder_total += dec_layer.pow(l as u32);
        }
        BigUint::from(self.encoder_embed_choices.len())
            * BigUint::from(self.decoder_embed_choices.len())
            * enc_layer.pow(self.encoder_layers as u32)
            * decoder_total
    }

    /// Enumerates every config, or fails if there are more than `limit`.
    pub fn enumerate(&self, limit: u64) -> Result<Vec<SubConfig>> {
        let card = self.cardinality();
        if card > BigUint::from(limit) {
            return Err(Error::SpaceTooLarge(card.to_string()));
        }
        let mut out = Vec::new();
        let enc_layer_opts: Vec<(usize, usize)> = self
            .ffn_dim_choices
            .iter()
            .flat_map(|&f| self.head_choices.iter().map(move |&h| (f, h)))
            .collect();
        let dec_layer_opts: Vec<(usize, usize, i32)> = enc_layer_opts
            .iter()
            .flat_map(|&(f, h)| self.enc_dec_attn_choices.iter().map(move |&a| (f, h, a)))
            .collect();
        let enc_rows = cartesian(enc_layer_opts.len(), self.encoder_layers);
        for &ee in &self.encoder_embed_choices {
            for &de in &self.decoder_embed_choices {
                for enc in &enc_rows {
                    for &l in &self.decoder_layer_choices {
                        for dec in cartesian(dec_layer_opts.len(), l) {
                            out.push(SubConfig {
                                encoder_embed_dim: ee,
                                decoder_embed_dim: de,
                                encoder_ffn_dims: enc.iter().map(|&i| enc_layer_opts[i].0).collect(),
                                encoder_heads: enc.iter().map(|&i| enc_layer_opts[i].1).collect(),
                                n_decoder_layers: l,
                                decoder_ffn_dims: dec.iter().map(|&i| dec_layer_opts[i].0).collect(),
                                decoder_heads: dec.iter().map(|&i| dec_layer_opts[i].1).collect(),
                                enc_dec_attn: dec.iter().map(|&i| dec_layer_opts[i].2).collect(),
                            });
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// All index tuples of length `len` over `radix`, in odometer order.
fn cartesian(radix: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        let mut next = Vec::with_capacity(out.len() * radix);
        for prefix in &out {
            for i in 0..radix {
                let mut p = prefix.clone();
                p.push(i);
                next.push(p);
            }
        }
        out = next;
    }
    out
}

/// Reports every violated SubConfig invariant. An empty list means valid.
pub fn validate_config(space: &DesignSpace, cfg: &SubConfig) -> Vec<Violation> {
    let mut v = Vec::new();
    let mut push = |dimension: String, message: String| v.push(Violation { dimension, message });

    let member = |value: usize, set: &[usize], label: &str| -> Option<String> {
        (!set.contains(&value)).then(|| format!("{label} {value} ∉ {}", set_str(set)))
    };

    if let Some(m) = member(cfg.encoder_embed_dim, &space.encoder_embed_choices, "encoder_embed_dim") {
        push("encoder_embed_dim".into(), m);
    }
    if let Some(m) = member(cfg.decoder_embed_dim, &space.decoder_embed_choices, "decoder_embed_dim") {
        push("decoder_embed_dim".into(), m);
    }
    if let Some(m) = member(cfg.n_decoder_layers, &space.decoder_layer_choices, "n_decoder_layers") {
        push("n_decoder_layers".into(), m);
    }

    let lengths: [(&str, usize, usize); 5] = [
        ("encoder_ffn_dims", cfg.encoder_ffn_dims.len(), space.encoder_layers),
        ("encoder_heads", cfg.encoder_heads.len(), space.encoder_layers),
        ("decoder_ffn_dims", cfg.decoder_ffn_dims.len(), cfg.n_decoder_layers),
        ("decoder_heads", cfg.decoder_heads.len(), cfg.n_decoder_layers),
        ("enc_dec_attn", cfg.enc_dec_attn.len(), cfg.n_decoder_layers),
    ];
    for (name, got, want) in lengths {
        if got != want {
            push(name.into(), format!("length mismatch: {got} entries, expected {want}"));
        }
    }

    for (i, &f) in cfg.encoder_ffn_dims.iter().enumerate() {
        if let Some(m) = member(f, &space.ffn_dim_choices, "ffn_dim") {
            push(format!("encoder_ffn_dims[{i}]"), m);
        }
    }
    for (i, &f) in cfg.decoder_ffn_dims.iter().enumerate() {
        if let Some(m) = member(f, &space.ffn_dim_choices, "ffn_dim") {
            push(format!("decoder_ffn_dims[{i}]"), m);
        }
    }
    for (i, &h) in cfg.encoder_heads.iter().enumerate() {
        if let Some(m) = member(h, &space.head_choices, "heads") {
            push(format!("encoder_heads[{i}]"), m);
        }
        if h == 0 || !cfg.encoder_embed_dim.is_multiple_of(h) {
            push(
                format!("encoder_heads[{i}]"),
                format!("encoder_embed_dim {} not divisible by {h} heads", cfg.encoder_embed_dim),
            );
        }
    }
    for (i, &h) in cfg.decoder_heads.iter().enumerate() {
        if let Some(m) = member(h, &space.head_choices, "heads") {
            push(format!("decoder_heads[{i}]"), m);
        }
        if h == 0 || !cfg.decoder_embed_dim.is_multiple_of(h) {
            push(
                format!("decoder_heads[{i}]"),
                format!("decoder_embed_dim {} not divisible by {h} heads", cfg.decoder_embed_dim),
            );
        }
    }
    for (i, &a) in cfg.enc_dec_attn.iter().enumerate() {
        if !space.enc_dec_attn_choices.contains(&a) {
            push(
                format!("enc_dec_attn[{i}]"),
                format!("enc_dec_attn {a} ∉ {}", set_str(&space.enc_dec_attn_choices)),
            );
        }
    }
    v
}

/// Draws one config, each field independently uniform over its choice set.
pub fn sample_with<R: Rng + ?Sized>(space: &DesignSpace, rng: &mut R) -> SubConfig {
    let pick = |set: &[usize], rng: &mut R| *set.choose(rng).expect("non-empty choice set");
    let encoder_embed_dim = pick(&space.encoder_embed_choices, rng);
    let decoder_embed_dim = pick(&space.decoder_embed_choices, rng);
    let mut encoder_ffn_dims = Vec::with_capacity(space.encoder_layers);
    let mut encoder_heads = Vec::with_capacity(space.encoder_layers);
    for _ in 0..space.encoder_layers {
        encoder_ffn_dims.push(pick(&space.ffn_dim_choices, rng));
        encoder_heads.push(pick(&space.head_choices, rng));
    }
    let n_decoder_layers = pick(&space.decoder_layer_choices, rng);
    let mut decoder_ffn_dims = Vec::with_capacity(n_decoder_layers);
    let mut decoder_heads = Vec::with_capacity(n_decoder_layers);
    let mut enc_dec_attn = Vec::with_capacity(n_decoder_layers);
    for _ in 0..n_decoder_layers {
        decoder_ffn_dims.push(pick(&space.ffn_dim_choices, rng));
        decoder_heads.push(pick(&space.head_choices, rng));
        enc_dec_attn.push(*space.enc_dec_attn_choices.choose(rng).unwrap());
    }
    SubConfig {
        encoder_embed_dim,
        decoder_embed_dim,
        encoder_ffn_dims,
        encoder_heads,
        n_decoder_layers,
        decoder_ffn_dims,
        decoder_heads,
        enc_dec_attn,
    }
}

pub fn sample_uniform(space: &DesignSpace, seed: u64) -> SubConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with(space, &mut rng)
}

/// Keeps, per dimension, only the values some top config uses. Decoder depth
/// keeps every original choice up to the deepest one used.
pub fn reduce_space(space: &DesignSpace, top_configs: &[SubConfig]) -> Result<DesignSpace> {
    if top_configs.is_empty() {
        return Err(Error::InvalidInput("reduce_space needs at least one top config".into()));
    }
    for (i, cfg) in top_configs.iter().enumerate() {
        let v = validate_config(space, cfg);
        if !v.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "top config {i}: {}",
                v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
            )));
        }
    }
    let collect = |f: &dyn Fn(&SubConfig) -> Vec<usize>| -> Vec<usize> {
        top_configs
            .iter()
            .flat_map(f)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    };
    let deepest = top_configs.iter().map(|c| c.n_decoder_layers).max().unwrap();
    let reduced = DesignSpace {
        encoder_embed_choices: collect(&|c| vec![c.encoder_embed_dim]),
        decoder_embed_choices: collect(&|c| vec![c.decoder_embed_dim]),
        ffn_dim_choices: collect(&|c| {
            c.encoder_ffn_dims
                .iter()
                .chain(&c.decoder_ffn_dims)
                .copied()
                .collect()
        }),
        head_choices: collect(&|c| c.encoder_heads.iter().chain(&c.decoder_heads).copied().collect()),
        decoder_layer_choices: space
            .decoder_layer_choices
            .iter()
            .copied()
            .filter(|&l| l <= deepest)
            .collect(),
        enc_dec_attn_choices: top_configs
            .iter()
            .flat_map(|c| c.enc_dec_attn.iter().copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
        encoder_layers: space.encoder_layers,
    };
    reduced.validate()?;
    Ok(reduced)
}

/// Source length the attended-positions feature is scaled by.
pub const FEATURE_SOURCE_POSITIONS: f64 = 30.0;

pub const FEATURE_NAMES: [&str; 8] = [
    "encoder_embed_dim",
    "decoder_embed_dim",
    "n_decoder_layers",
    "encoder_ffn_sum",
    "decoder_ffn_sum",
    "decoder_heads_sum",
    "attended_positions",
    "decoder_width_depth",
];

pub const N_FEATURES: usize = FEATURE_NAMES.len();

/// Fixed-length numeric encoding consumed by the latency predictor.
pub fn encode_features(cfg: &SubConfig) -> Vec<f64> {
    let attended: usize = cfg.enc_dec_attn.iter().map(|&a| attended_layers(a)).sum();
    vec![
        cfg.encoder_embed_dim as f64,
        cfg.decoder_embed_dim as f64,
        cfg.n_decoder_layers as f64,
        cfg.encoder_ffn_dims.iter().sum::<usize>() as f64,
        cfg.decoder_ffn_dims.iter().sum::<usize>() as f64,
        cfg.decoder_heads.iter().sum::<usize>() as f64,
        attended as f64 * FEATURE_SOURCE_POSITIONS,
        (cfg.n_decoder_layers * cfg.decoder_embed_dim) as f64,
    ]
}

impl SubConfig {
    /// Canonical JSON; used for hashing and for lexicographic tie-breaks.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
