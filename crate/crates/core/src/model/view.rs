use crate::design_space::{attended_layers, SubConfig};
use crate::error::{Error, Result};

use super::weights::SuperWeights;

/// A SubTransformer realized on a bank: the leading sub-block of every
/// tensor it reads. Holding a view never copies weights.
#[derive(Debug, Clone)]
pub struct SubModelView<'a> {
    bank: &'a SuperWeights,
    config: SubConfig,
}

/// The leading `rows × cols` block of tensor `id` that a view reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slice {
    pub id: usize,
    pub rows: usize,
    pub cols: usize,
}

pub(crate) fn check_fits(bank: &SuperWeights, cfg: &SubConfig) -> Result<()> {
    let shape = bank.shape();
    let mut problems = Vec::new();
    if cfg.encoder_ffn_dims.len() != shape.encoder_layers() || cfg.encoder_heads.len() != shape.encoder_layers() {
        problems.push(format!(
            "config has {} encoder layers, bank has {}",
            cfg.encoder_ffn_dims.len(),
            shape.encoder_layers()
        ));
    }
    if cfg.n_decoder_layers == 0 || cfg.n_decoder_layers > shape.decoder_layers() {
        problems.push(format!(
            "n_decoder_layers {} outside bank range 1..={}",
            cfg.n_decoder_layers,
            shape.decoder_layers()
        ));
    }
    let l = cfg.n_decoder_layers;
    if cfg.decoder_ffn_dims.len() != l || cfg.decoder_heads.len() != l || cfg.enc_dec_attn.len() != l {
        problems.push("decoder lists do not match n_decoder_layers".into());
    }
    if cfg.encoder_embed_dim == 0 || cfg.encoder_embed_dim > shape.encoder_embed {
        problems.push(format!(
            "encoder_embed_dim {} exceeds bank width {}",
            cfg.encoder_embed_dim, shape.encoder_embed
        ));
    }
    if cfg.decoder_embed_dim == 0 || cfg.decoder_embed_dim > shape.decoder_embed {
        problems.push(format!(
            "decoder_embed_dim {} exceeds bank width {}",
            cfg.decoder_embed_dim, shape.decoder_embed
        ));
    }
    for (i, (&f, &cap)) in cfg.encoder_ffn_dims.iter().zip(&shape.encoder_ffn).enumerate() {
        if f == 0 || f > cap {
            problems.push(format!("encoder_ffn_dims[{i}] {f} exceeds bank width {cap}"));
        }
    }
    for (i, (&f, &cap)) in cfg.decoder_ffn_dims.iter().zip(&shape.decoder_ffn).enumerate() {
        if f == 0 || f > cap {
            problems.push(format!("decoder_ffn_dims[{i}] {f} exceeds bank width {cap}"));
        }
    }
    for &h in &cfg.encoder_heads {
        if h == 0 || !cfg.encoder_embed_dim.is_multiple_of(h) {
            problems.push(format!("encoder width {} not divisible by {h} heads", cfg.encoder_embed_dim));
        }
    }
    for &h in &cfg.decoder_heads {
        if h == 0 || !cfg.decoder_embed_dim.is_multiple_of(h) {
            problems.push(format!("decoder width {} not divisible by {h} heads", cfg.decoder_embed_dim));
        }
    }
    for &a in &cfg.enc_dec_attn {
        let n = attended_layers(a);
        if n == 0 || n > shape.encoder_layers() {
            problems.push(format!("enc_dec_attn {a} not realizable on {} encoder layers", shape.encoder_layers()));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::ExceedsBank(problems.join("; ")))
    }
}

/// Realizes `cfg` on `bank` by front-slicing. Fails if any dimension exceeds
/// the bank's tensors.
pub fn inherit<'a>(bank: &'a SuperWeights, cfg: &SubConfig) -> Result<SubModelView<'a>> {
    check_fits(bank, cfg)?;
    Ok(SubModelView {
        bank,
        config: cfg.clone(),
    })
}

impl<'a> SubModelView<'a> {
    pub fn bank(&self) -> &'a SuperWeights {
        self.bank
    }

    pub fn config(&self) -> &SubConfig {
        &self.config
    }

    /// Every block the view reads, possibly several per tensor.
    pub fn slices(&self) -> Vec<Slice> {
        let cfg = &self.config;
        let layout = self.bank.layout();
        let vocab = self.bank.vocab_size();
        let (e, d) = (cfg.encoder_embed_dim, cfg.decoder_embed_dim);
        let mut out = vec![
            Slice { id: layout.embedding, rows: vocab, cols: e },
            Slice { id: layout.embedding, rows: vocab, cols: d },
        ];
        let mut push = |id, rows, cols| out.push(Slice { id, rows, cols });
        for (l, ids) in layout.encoder.iter().enumerate() {
            let f = cfg.encoder_ffn_dims[l];
            for id in [ids.self_attn.q, ids.self_attn.k, ids.self_attn.v, ids.self_attn.o] {
                push(id, e, e);
            }
            for id in [ids.ln_attn.gain, ids.ln_attn.bias, ids.ln_ffn.gain, ids.ln_ffn.bias] {
                push(id, 1, e);
            }
            push(ids.w1, e, f);
            push(ids.w2, f, e);
        }
        push(layout.encoder_norm.gain, 1, e);
        push(layout.encoder_norm.bias, 1, e);
        for (l, ids) in layout.decoder.iter().take(cfg.n_decoder_layers).enumerate() {
            let f = cfg.decoder_ffn_dims[l];
            for id in [
                ids.self_attn.q,
                ids.self_attn.k,
                ids.self_attn.v,
                ids.self_attn.o,
                ids.cross_attn.q,
                ids.cross_attn.o,
            ] {
                push(id, d, d);
            }
            push(ids.cross_attn.k, e, d);
            push(ids.cross_attn.v, e, d);
            for n in [ids.ln_self, ids.ln_cross, ids.ln_ffn] {
                push(n.gain, 1, d);
                push(n.bias, 1, d);
            }
            push(ids.w1, d, f);
            push(ids.w2, f, d);
        }
        push(layout.decoder_norm.gain, 1, d);
        push(layout.decoder_norm.bias, 1, d);
        out
    }

    /// True iff some slice of tensor `id` covers element `(r, c)`.
    pub fn touches(&self, id: usize, r: usize, c: usize) -> bool {
        self.slices()
            .iter()
            .any(|s| s.id == id && r < s.rows && c < s.cols)
    }
}

/// Distinct scalars a view of `cfg` reads, with the tied embedding counted
/// once.
pub fn param_count(cfg: &SubConfig, vocab_size: usize) -> usize {
    let (e, d) = (cfg.encoder_embed_dim, cfg.decoder_embed_dim);
    let embedding = vocab_size * e.max(d);
    let encoder: usize = cfg
        .encoder_ffn_dims
        .iter()
        .map(|&f| 4 * e * e + 2 * e * f + 4 * e)
        .sum::<usize>()
        + 2 * e;
    let decoder: usize = cfg
        .decoder_ffn_dims
        .iter()
        .map(|&f| 6 * d * d + 2 * e * d + 2 * d * f + 6 * d)
        .sum::<usize>()
        + 2 * d;
    embedding + encoder + decoder
}
