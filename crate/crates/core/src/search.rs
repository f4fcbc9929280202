//! Latency-constrained evolutionary search, its exhaustive oracle, and
//! operating-library construction.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::design_space::{attended_layers, validate_config, DesignSpace, SubConfig};
use crate::error::{Error, Result};
use crate::latency::LatencyModel;

pub const EXHAUSTIVE_LIMIT: u64 = 100_000;
pub const LIBRARY_FORMAT_VERSION: u32 = 1;

/// Fitness callback; lower is better.
pub type LossFn<'a> = dyn FnMut(&SubConfig) -> Result<f64> + 'a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSettings {
    pub population_size: usize,
    pub n_iterations: usize,
    pub parent_fraction: f64,
    pub mutation_prob: f64,
    pub crossover_fraction: f64,
    pub mutation_fraction: f64,
    pub seed: u64,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            population_size: 50,
            n_iterations: 15,
            parent_fraction: 0.25,
            mutation_prob: 0.3,
            crossover_fraction: 0.5,
            mutation_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SearchSettings {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x <= 1.0;
        let mut problems = Vec::new();
        if self.population_size < 4 {
            problems.push(format!("population_size {} < 4", self.population_size));
        }
        if self.n_iterations == 0 {
            problems.push("n_iterations must be positive".to_string());
        }
        if !(self.mutation_prob > 0.0 && self.mutation_prob < 1.0) {
            problems.push(format!("mutation_prob {} ∉ (0, 1)", self.mutation_prob));
        }
        for (name, x) in [
            ("parent_fraction", self.parent_fraction),
            ("crossover_fraction", self.crossover_fraction),
            ("mutation_fraction", self.mutation_fraction),
        ] {
            if !unit(x) {
                problems.push(format!("{name} {x} ∉ (0, 1]"));
            }
        }
        if self.crossover_fraction + self.mutation_fraction > 1.0 + 1e-12 {
            problems.push("crossover_fraction + mutation_fraction > 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub config: SubConfig,
    pub loss: f64,
    pub predicted_ms: f64,
    /// Best loss seen after each generation.
    pub history: Vec<f64>,
    pub n_evaluations: usize,
}

/// Decoder genes are kept for the deepest allowed decoder and truncated to
/// the sampled depth, so depth changes do not destroy per-layer genes.
#[derive(Debug, Clone, PartialEq)]
struct Genome {
    encoder_embed: usize,
    decoder_embed: usize,
    encoder_ffn: Vec<usize>,
    encoder_heads: Vec<usize>,
    n_decoder: usize,
    decoder_ffn: Vec<usize>,
    decoder_heads: Vec<usize>,
    attn: Vec<i32>,
}

fn pick<T: Copy, R: Rng>(set: &[T], rng: &mut R) -> T {
    *set.choose(rng).expect("non-empty choice set")
}

impl Genome {
    fn random<R: Rng>(space: &DesignSpace, rng: &mut R) -> Self {
        let depth = space.max_decoder_layers();
        let enc = space.encoder_layers;
        Self {
            encoder_embed: pick(&space.encoder_embed_choices, rng),
            decoder_embed: pick(&space.decoder_embed_choices, rng),
            encoder_ffn: (0..enc).map(|_| pick(&space.ffn_dim_choices, rng)).collect(),
            encoder_heads: (0..enc).map(|_| pick(&space.head_choices, rng)).collect(),
            n_decoder: pick(&space.decoder_layer_choices, rng),
            decoder_ffn: (0..depth).map(|_| pick(&space.ffn_dim_choices, rng)).collect(),
            decoder_heads: (0..depth).map(|_| pick(&space.head_choices, rng)).collect(),
            attn: (0..depth).map(|_| pick(&space.enc_dec_attn_choices, rng)).collect(),
        }
    }

    fn config(&self) -> SubConfig {
        let l = self.n_decoder;
        SubConfig {
            encoder_embed_dim: self.encoder_embed,
            decoder_embed_dim: self.decoder_embed,
            encoder_ffn_dims: self.encoder_ffn.clone(),
            encoder_heads: self.encoder_heads.clone(),
            n_decoder_layers: l,
            decoder_ffn_dims: self.decoder_ffn[..l].to_vec(),
            decoder_heads: self.decoder_heads[..l].to_vec(),
            enc_dec_attn: self.attn[..l].to_vec(),
        }
    }

    fn crossover<R: Rng>(a: &Self, b: &Self, rng: &mut R) -> Self {
        let mut either = |x, y| if rng.gen_bool(0.5) { x } else { y };
        let mut out = a.clone();
        out.encoder_embed = either(a.encoder_embed, b.encoder_embed);
        out.decoder_embed = either(a.decoder_embed, b.decoder_embed);
        out.n_decoder = either(a.n_decoder, b.n_decoder);
        for i in 0..a.encoder_ffn.len() {
            out.encoder_ffn[i] = either(a.encoder_ffn[i], b.encoder_ffn[i]);
            out.encoder_heads[i] = either(a.encoder_heads[i], b.encoder_heads[i]);
        }
        for i in 0..a.decoder_ffn.len() {
            out.decoder_ffn[i] = either(a.decoder_ffn[i], b.decoder_ffn[i]);
            out.decoder_heads[i] = either(a.decoder_heads[i], b.decoder_heads[i]);
        }
        for i in 0..a.attn.len() {
            out.attn[i] = if rng.gen_bool(0.5) { a.attn[i] } else { b.attn[i] };
        }
        out
    }

    fn mutate<R: Rng>(&self, space: &DesignSpace, p: f64, rng: &mut R) -> Self {
        let mut g = self.clone();
        if rng.gen_bool(p) {
            g.encoder_embed = pick(&space.encoder_embed_choices, rng);
        }
        if rng.gen_bool(p) {
            g.decoder_embed = pick(&space.decoder_embed_choices, rng);
        }
        if rng.gen_bool(p) {
            g.n_decoder = pick(&space.decoder_layer_choices, rng);
        }
        for i in 0..g.encoder_ffn.len() {
            if rng.gen_bool(p) {
                g.encoder_ffn[i] = pick(&space.ffn_dim_choices, rng);
            }
            if rng.gen_bool(p) {
                g.encoder_heads[i] = pick(&space.head_choices, rng);
            }
        }
        for i in 0..g.decoder_ffn.len() {
            if rng.gen_bool(p) {
                g.decoder_ffn[i] = pick(&space.ffn_dim_choices, rng);
            }
            if rng.gen_bool(p) {
                g.decoder_heads[i] = pick(&space.head_choices, rng);
            }
            if rng.gen_bool(p) {
                g.attn[i] = pick(&space.enc_dec_attn_choices, rng);
            }
        }
        g
    }
}

struct Problem<'p, 'f> {
    space: &'p DesignSpace,
    constraint_ms: f64,
    predictor: &'p dyn LatencyModel,
    loss_fn: &'p mut LossFn<'f>,
    cache: HashMap<SubConfig, f64>,
}

impl Problem<'_, '_> {
    fn feasible(&self, cfg: &SubConfig) -> Option<f64> {
        if !validate_config(self.space, cfg).is_empty() {
            return None;
        }
        let ms = self.predictor.predict(cfg);
        (ms <= self.constraint_ms).then_some(ms)
    }

    fn fitness(&mut self, cfg: &SubConfig) -> Result<f64> {
        if let Some(&l) = self.cache.get(cfg) {
            return Ok(l);
        }
        let l = (self.loss_fn)(cfg)?;
        self.cache.insert(cfg.clone(), l);
        Ok(l)
    }
}

const RETRIES: usize = 10;
const SAMPLES_PER_SLOT: usize = 100;

fn better(a: (f64, &str), b: (f64, &str)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Evolutionary search for the lowest-loss config whose predicted latency
/// is within `constraint_ms`.
pub fn evolutionary_search(
    space: &DesignSpace,
    constraint_ms: f64,
    predictor: &dyn LatencyModel,
    loss_fn: &mut LossFn<'_>,
    settings: &SearchSettings,
) -> Result<SearchResult> {
    space.validate()?;
    settings.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut prob = Problem {
        space,
        constraint_ms,
        predictor,
        loss_fn,
        cache: HashMap::new(),
    };
    let pop_size = settings.population_size;

    let sample_feasible = |prob: &Problem, rng: &mut ChaCha8Rng, budget: usize| {
        for _ in 0..budget {
            let g = Genome::random(space, rng);
            if prob.feasible(&g.config()).is_some() {
                return Some(g);
            }
        }
        None
    };

    let mut population = Vec::with_capacity(pop_size);
    for _ in 0..pop_size {
        match sample_feasible(&prob, &mut rng, SAMPLES_PER_SLOT) {
            Some(g) => population.push(g),
            None => break,
        }
    }
    if population.is_empty() {
        return Err(Error::Infeasible { constraint_ms });
    }

    let n_parents = ((settings.parent_fraction * pop_size as f64).round() as usize).clamp(1, pop_size);
    let free = pop_size - n_parents;
    let n_cross = (settings.crossover_fraction * free as f64).round() as usize;
    let n_mut = ((settings.mutation_fraction * free as f64).round() as usize).min(free - n_cross.min(free));

    let mut best: Option<(f64, String, SubConfig)> = None;
    let mut history = Vec::with_capacity(settings.n_iterations);
    for generation in 0..settings.n_iterations {
        let mut scored = Vec::with_capacity(population.len());
        for g in population.drain(..) {
            let cfg = g.config();
            let loss = prob.fitness(&cfg)?;
            let key = cfg.canonical_json();
            scored.push((loss, key, g));
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        let (top_loss, top_key, top) = &scored[0];
        if best
            .as_ref()
            .is_none_or(|(l, k, _)| better((*top_loss, top_key), (*l, k)))
        {
            best = Some((*top_loss, top_key.clone(), top.config()));
        }
        history.push(best.as_ref().unwrap().0);
        if generation + 1 == settings.n_iterations {
            break;
        }

        let parents: Vec<Genome> = scored.into_iter().take(n_parents).map(|s| s.2).collect();
        let mut next = parents.clone();
        let child = |rng: &mut ChaCha8Rng, make: &dyn Fn(&mut ChaCha8Rng) -> Genome| {
            (0..RETRIES)
                .map(|_| make(rng))
                .find(|g| prob.feasible(&g.config()).is_some())
        };
        for _ in 0..n_cross {
            let make = |rng: &mut ChaCha8Rng| {
                let a = parents.choose(rng).unwrap();
                let b = parents.choose(rng).unwrap();
                Genome::crossover(a, b, rng)
            };
            if let Some(g) = child(&mut rng, &make) {
                next.push(g);
            }
        }
        for _ in 0..n_mut {
            let make = |rng: &mut ChaCha8Rng| parents.choose(rng).unwrap().mutate(space, settings.mutation_prob, rng);
            if let Some(g) = child(&mut rng, &make) {
                next.push(g);
            }
        }
        while next.len() < pop_size {
            match sample_feasible(&prob, &mut rng, RETRIES) {
                Some(g) => next.push(g),
                None => next.push(parents.choose(&mut rng).unwrap().clone()),
            }
        }
        population = next;
    }

    let (loss, _, config) = best.expect("at least one generation");
    let predicted_ms = prob.feasible(&config).expect("population is feasible");
    Ok(SearchResult {
        config,
        loss,
        predicted_ms,
        history,
        n_evaluations: prob.cache.len(),
    })
}

/// Scans every config; ties go to the lexicographically smallest canonical
/// JSON.
pub fn exhaustive_search(
    space: &DesignSpace,
    constraint_ms: f64,
    predictor: &dyn LatencyModel,
    loss_fn: &mut LossFn<'_>,
) -> Result<SearchResult> {
    space.validate()?;
    if space.cardinality() > BigUint::from(EXHAUSTIVE_LIMIT) {
        return Err(Error::SpaceTooLarge(space.cardinality().to_string()));
    }
    let mut prob = Problem {
        space,
        constraint_ms,
        predictor,
        loss_fn,
        cache: HashMap::new(),
    };
    let mut best: Option<(f64, String, SubConfig, f64)> = None;
    for cfg in space.enumerate(EXHAUSTIVE_LIMIT)? {
        let Some(ms) = prob.feasible(&cfg) else { continue };
        let loss = prob.fitness(&cfg)?;
        let key = cfg.canonical_json();
        if best.as_ref().is_none_or(|(l, k, _, _)| better((loss, &key), (*l, k))) {
            best = Some((loss, key, cfg, ms));
        }
    }
    let (loss, _, config, predicted_ms) = best.ok_or(Error::Infeasible { constraint_ms })?;
    Ok(SearchResult {
        config,
        loss,
        predicted_ms,
        history: Vec::new(),
        n_evaluations: prob.cache.len(),
    })
}

/// Smooth stand-in for validation loss: decreasing in every capacity
/// dimension with diminishing returns.
pub fn surrogate_loss(space: &DesignSpace, cfg: &SubConfig) -> f64 {
    let mean = |xs: &[usize]| xs.iter().sum::<usize>() as f64 / xs.len().max(1) as f64;
    let max_ffn = space.max_ffn() as f64;
    let max_heads = *space.head_choices.last().unwrap() as f64;
    let enc_e = cfg.encoder_embed_dim as f64 / space.max_encoder_embed() as f64;
    let dec_e = cfg.decoder_embed_dim as f64 / space.max_decoder_embed() as f64;
    let enc_f = mean(&cfg.encoder_ffn_dims) / max_ffn;
    let dec_f = mean(&cfg.decoder_ffn_dims) / max_ffn;
    let heads = (mean(&cfg.encoder_heads) + mean(&cfg.decoder_heads)) / (2.0 * max_heads);
    let spans: Vec<usize> = cfg.enc_dec_attn.iter().map(|&a| attended_layers(a)).collect();
    let attended = mean(&spans) / space.encoder_layers as f64;
    // Earlier decoder layers matter slightly more than later ones.
    let per_layer: f64 = cfg
        .decoder_ffn_dims
        .iter()
        .enumerate()
        .map(|(i, &f)| 0.01 * (max_ffn / f as f64) / (i + 1) as f64)
        .sum();
    1.5 + 1.0 / cfg.n_decoder_layers as f64
        + 0.5 / dec_e
        + 0.25 / enc_e
        + 0.15 / dec_f
        + 0.1 / enc_f
        + 0.05 / heads
        + 0.05 / attended
        + per_layer
}

/// One searched config paired with its latency and quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub constraint_ms: f64,
    pub config: SubConfig,
    pub predicted_ms: f64,
    pub measured_ms: f64,
    pub val_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bleu: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OperatingLibrary {
    /// Sorted by measured latency.
    pub points: Vec<OperatingPoint>,
    /// Constraints for which no feasible config was found.
    pub gaps: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Record {
    Gap {
        format_version: u32,
        constraint_ms: f64,
        infeasible: bool,
    },
    Point {
        format_version: u32,
        #[serde(flatten)]
        point: OperatingPoint,
    },
}

impl OperatingLibrary {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sorts by measured latency and drops exact-duplicate configs, keeping
    /// the first occurrence.
    pub fn normalize(&mut self) {
        let mut seen = std::collections::HashSet::new();
        self.points.retain(|p| seen.insert(p.config.clone()));
        self.points.sort_by(|a, b| {
            a.measured_ms
                .total_cmp(&b.measured_ms)
                .then_with(|| a.config.canonical_json().cmp(&b.config.canonical_json()))
        });
        self.gaps.sort_by(f64::total_cmp);
    }

    pub fn to_json(&self) -> Result<String> {
        let mut records: Vec<Record> = self
            .points
            .iter()
            .map(|p| Record::Point {
                format_version: LIBRARY_FORMAT_VERSION,
                point: p.clone(),
            })
            .collect();
        records.extend(self.gaps.iter().map(|&c| Record::Gap {
            format_version: LIBRARY_FORMAT_VERSION,
            constraint_ms: c,
            infeasible: true,
        }));
        Ok(serde_json::to_string_pretty(&records)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let records: Vec<Record> = serde_json::from_str(text)?;
        let mut lib = OperatingLibrary::default();
        for r in records {
            let version = match &r {
                Record::Gap { format_version, .. } | Record::Point { format_version, .. } => *format_version,
            };
            if version != LIBRARY_FORMAT_VERSION {
                return Err(Error::InvalidInput(format!("unsupported library format_version {version}")));
            }
            match r {
                Record::Gap { constraint_ms, .. } => lib.gaps.push(constraint_ms),
                Record::Point { point, .. } => lib.points.push(point),
            }
        }
        Ok(lib)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Searches each constraint, then measures and scores the winner.
pub fn build_operating_library(
    space: &DesignSpace,
    constraints: &[f64],
    predictor: &dyn LatencyModel,
    loss_fn: &mut LossFn<'_>,
    measure_fn: &mut dyn FnMut(&SubConfig) -> Result<f64>,
    settings: &SearchSettings,
) -> Result<OperatingLibrary> {
    if constraints.is_empty() {
        return Err(Error::InvalidInput("no latency constraints given".into()));
    }
    let mut sorted = constraints.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut cache: HashMap<SubConfig, f64> = HashMap::new();
    let mut cached_loss = |cfg: &SubConfig| -> Result<f64> {
        if let Some(&l) = cache.get(cfg) {
            return Ok(l);
        }
        let l = loss_fn(cfg)?;
        cache.insert(cfg.clone(), l);
        Ok(l)
    };
    let mut lib = OperatingLibrary::default();
    for (i, &c) in sorted.iter().enumerate() {
        let s = SearchSettings {
            seed: settings.seed.wrapping_add(i as u64),
            ..settings.clone()
        };
        match evolutionary_search(space, c, predictor, &mut cached_loss, &s) {
            Ok(found) => {
                if lib.points.iter().any(|p| p.config == found.config) {
                    continue;
                }
                lib.points.push(OperatingPoint {
                    constraint_ms: c,
                    measured_ms: measure_fn(&found.config)?,
                    predicted_ms: found.predicted_ms,
                    val_loss: found.loss,
                    config: found.config,
                    bleu: None,
                });
            }
            Err(Error::Infeasible { .. }) => lib.gaps.push(c),
            Err(e) => return Err(e),
        }
    }
    if lib.points.is_empty() {
        return Err(Error::Infeasible {
            constraint_ms: *sorted.last().unwrap(),
        });
    }
    lib.normalize();
    Ok(lib)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latency::CostModel;

    fn singleton_space() -> DesignSpace {
        DesignSpace {
            encoder_embed_choices: vec![32],
            decoder_embed_choices: vec![32],
            ffn_dim_choices: vec![64],
            head_choices: vec![2],
            decoder_layer_choices: vec![2],
            enc_dec_attn_choices: vec![1],
            encoder_layers: 2,
        }
    }

    /// 2·2·1·(2 + 4) = 24 configs.
    fn small_space() -> DesignSpace {
        DesignSpace {
            encoder_embed_choices: vec![32, 64],
            decoder_embed_choices: vec![32, 64],
            ffn_dim_choices: vec![64],
            head_choices: vec![2],
            decoder_layer_choices: vec![1, 2],
            enc_dec_attn_choices: vec![-1, 1],
            encoder_layers: 2,
        }
    }

    fn surrogate(space: &DesignSpace) -> impl FnMut(&SubConfig) -> Result<f64> + '_ {
        move |c| Ok(surrogate_loss(space, c))
    }

    #[test]
    fn settings_validation() {
        assert!(SearchSettings::default().validate().is_ok());
        let bad = [
            SearchSettings { population_size: 3, ..Default::default() },
            SearchSettings { mutation_prob: 1.0, ..Default::default() },
            SearchSettings { crossover_fraction: 0.7, ..Default::default() },
            SearchSettings { parent_fraction: 0.0, ..Default::default() },
        ];
        for s in bad {
            assert!(s.validate().is_err(), "{s:?}");
        }
    }

    #[test]
    fn singleton_space_returns_its_config() {
        let space = singleton_space();
        let cost = CostModel::sim_gpu(&space);
        let only = space.max_config();
        let c = cost.latency(&only) + 1.0;
        let mut f = surrogate(&space);
        let evo = evolutionary_search(&space, c, &cost, &mut f, &SearchSettings::default()).unwrap();
        assert_eq!(evo.config, only);
        let ex = exhaustive_search(&space, c, &cost, &mut f).unwrap();
        assert_eq!(ex.config, only);
    }

    #[test]
    fn impossible_constraint_is_infeasible() {
        let space = small_space();
        let cost = CostModel::sim_gpu(&space);
        let c = cost.latency(&space.min_config()) - 1.0;
        let mut f = surrogate(&space);
        let e = evolutionary_search(&space, c, &cost, &mut f, &SearchSettings::default());
        assert!(matches!(e, Err(Error::Infeasible { .. })));
        assert!(matches!(exhaustive_search(&space, c, &cost, &mut f), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn equal_losses_break_ties_lexicographically() {
        let space = small_space();
        let cost = CostModel::sim_gpu(&space);
        let mut flat = |_: &SubConfig| Ok(1.0);
        let got = exhaustive_search(&space, 1e9, &cost, &mut flat).unwrap();
        let smallest = space
            .enumerate(1000)
            .unwrap()
            .into_iter()
            .min_by_key(|c| c.canonical_json())
            .unwrap();
        assert_eq!(got.config, smallest);
    }

    #[test]
    fn exhaustive_matches_independent_scan() {
        let space = small_space();
        let cost = CostModel::sim_cpu(&space);
        let c = 0.5 * (cost.latency(&space.min_config()) + cost.latency(&space.max_config()));
        let mut f = surrogate(&space);
        let got = exhaustive_search(&space, c, &cost, &mut f).unwrap();
        let mut best = (f64::INFINITY, String::new());
        for cfg in space.enumerate(1000).unwrap() {
            if cost.latency(&cfg) <= c {
                let key = (surrogate_loss(&space, &cfg), cfg.canonical_json());
                if key.0 < best.0 || (key.0 == best.0 && key.1 < best.1) {
                    best = key;
                }
            }
        }
        assert_eq!(got.config.canonical_json(), best.1);
        assert!(got.predicted_ms <= c);
    }

    #[test]
    fn oversized_space_rejected() {
        let space = DesignSpace::desk();
        let mut f = surrogate(&space);
        let cost = CostModel::sim_gpu(&space);
        assert!(matches!(
            exhaustive_search(&space, 1e9, &cost, &mut f),
            Err(Error::SpaceTooLarge(_))
        ));
    }

    #[test]
    fn history_is_non_increasing_and_deterministic() {
        let space = DesignSpace::desk();
        let cost = CostModel::sim_gpu(&space);
        let c = 900.0;
        let run = |seed| {
            let mut f = surrogate(&space);
            let s = SearchSettings { seed, ..Default::default() };
            evolutionary_search(&space, c, &cost, &mut f, &s).unwrap()
        };
        let a = run(3);
        assert_eq!(a, run(3));
        assert_eq!(a.history.len(), 15);
        for w in a.history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(a.predicted_ms <= c);
    }

    #[test]
    fn library_collapses_duplicates_and_round_trips() {
        let space = singleton_space();
        let cost = CostModel::sim_gpu(&space);
        let lat = cost.latency(&space.max_config());
        let mut f = surrogate(&space);
        let mut measure = |cfg: &SubConfig| Ok(cost.latency(cfg));
        let s = SearchSettings::default();
        let lib = build_operating_library(&space, &[lat + 1.0, lat + 2.0, lat - 5.0], &cost, &mut f, &mut measure, &s)
            .unwrap();
        assert_eq!(lib.len(), 1);
        assert_eq!(lib.gaps, vec![lat - 5.0]);
        let back = OperatingLibrary::from_json(&lib.to_json().unwrap()).unwrap();
        assert_eq!(back, lib);

        let one = build_operating_library(&space, &[lat + 1.0], &cost, &mut f, &mut measure, &s).unwrap();
        assert_eq!(one.len(), 1);
        let none = build_operating_library(&space, &[lat - 1.0], &cost, &mut f, &mut measure, &s);
        assert!(matches!(none, Err(Error::Infeasible { .. })));
    }
}
