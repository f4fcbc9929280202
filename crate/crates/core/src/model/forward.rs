//! Pre-norm encoder-decoder forward pass recorded on a [`Tape`].
//!
//! Cross-attention of decoder layer `l` reads the final-normalized outputs of
//! the last `attended_layers(enc_dec_attn[l])` encoder layers, concatenated
//! per sentence along the source-position axis.

use crate::autograd::{AttnMask, Tape, Var};
use crate::corpus::{Batch, PaddedBatch, TokenId};
use crate::design_space::attended_layers;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::view::SubModelView;
use super::weights::{AttnIds, NormIds};

/// Sinusoidal position encodings for `batch` sequences of length `len`.
pub fn position_encoding(batch: usize, len: usize, width: usize) -> Matrix {
    let mut m = Matrix::zeros(batch * len, width);
    for b in 0..batch {
        for pos in 0..len {
            let row = m.row_mut(b * len + pos);
            for (i, x) in row.iter_mut().enumerate() {
                let k = (i / 2) as f64;
                let angle = pos as f64 / 10000f64.powf(2.0 * k / width as f64);
                *x = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
    }
    m
}

pub(crate) fn check_tokens(ids: &[TokenId], vocab_size: usize) -> Result<()> {
    match ids.iter().find(|&&t| t >= vocab_size) {
        Some(&id) => Err(Error::OutOfVocab { id, vocab_size }),
        None => Ok(()),
    }
}

struct Ctx<'v, 'a> {
    view: &'v SubModelView<'a>,
}

impl Ctx<'_, '_> {
    fn param(&self, tape: &mut Tape, id: usize, rows: usize, cols: usize) -> Var {
        tape.param(id, self.view.bank().tensor(id), rows, cols)
    }

    fn norm(&self, tape: &mut Tape, x: Var, ids: NormIds, width: usize) -> Var {
        let g = self.param(tape, ids.gain, 1, width);
        let b = self.param(tape, ids.bias, 1, width);
        tape.layer_norm(x, g, b)
    }

    fn embed(&self, tape: &mut Tape, ids: &PaddedBatch, width: usize) -> Var {
        let vocab = self.view.bank().vocab_size();
        let table = self.param(tape, self.view.bank().layout().embedding, vocab, width);
        let rows = tape.gather_rows(table, ids.ids.clone());
        let scaled = tape.scale(rows, (width as f64).sqrt());
        let pe = tape.constant(position_encoding(ids.batch, ids.len, width));
        tape.add(scaled, pe)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        query_in: Var,
        kv_in: Var,
        ids: AttnIds,
        kv_width: usize,
        width: usize,
        heads: usize,
        mask: AttnMask,
    ) -> Var {
        let wq = self.param(tape, ids.q, width, width);
        let wk = self.param(tape, ids.k, kv_width, width);
        let wv = self.param(tape, ids.v, kv_width, width);
        let wo = self.param(tape, ids.o, width, width);
        let q = tape.matmul(query_in, wq);
        let k = tape.matmul(kv_in, wk);
        let v = tape.matmul(kv_in, wv);
        let ctx = tape.attention(q, k, v, heads, mask);
        tape.matmul(ctx, wo)
    }

    fn ffn(&self, tape: &mut Tape, x: Var, w1: usize, w2: usize, width: usize, hidden: usize) -> Var {
        let a = self.param(tape, w1, width, hidden);
        let b = self.param(tape, w2, hidden, width);
        let h = tape.matmul(x, a);
        let h = tape.relu(h);
        tape.matmul(h, b)
    }
}

/// Runs every encoder layer; returns the raw output of each.
pub fn encode(tape: &mut Tape, view: &SubModelView<'_>, src: &PaddedBatch) -> Vec<Var> {
    let ctx = Ctx { view };
    let cfg = view.config();
    let e = cfg.encoder_embed_dim;
    let layout = view.bank().layout();
    let mut x = ctx.embed(tape, src, e);
    let mut outputs = Vec::with_capacity(layout.encoder.len());
    for (l, ids) in layout.encoder.iter().enumerate() {
        let mask = AttnMask {
            batch: src.batch,
            q_len: src.len,
            k_len: src.len,
            causal: false,
            key_valid: src.valid.clone(),
        };
        let h = ctx.norm(tape, x, ids.ln_attn, e);
        let a = ctx.attention(tape, h, h, ids.self_attn, e, e, cfg.encoder_heads[l], mask);
        let x1 = tape.add(x, a);
        let h = ctx.norm(tape, x1, ids.ln_ffn, e);
        let f = ctx.ffn(tape, h, ids.w1, ids.w2, e, cfg.encoder_ffn_dims[l]);
        x = tape.add(x1, f);
        outputs.push(x);
    }
    outputs
}

/// Teacher-forced decoder over `tgt_in`; returns `batch·len × vocab` logits.
///
/// `encoder_outputs` must hold one entry per encoder layer; entries a layer
/// never attends to are not read.
pub fn decode(
    tape: &mut Tape,
    view: &SubModelView<'_>,
    encoder_outputs: &[Var],
    src_valid: &[bool],
    src_len: usize,
    tgt_in: &PaddedBatch,
) -> Var {
    let ctx = Ctx { view };
    let cfg = view.config();
    let bank = view.bank();
    let layout = bank.layout();
    let (e, d) = (cfg.encoder_embed_dim, cfg.decoder_embed_dim);
    let n_enc = encoder_outputs.len();
    let batch = tgt_in.batch;

    let mut normed: Vec<Option<Var>> = vec![None; n_enc];
    let mut x = ctx.embed(tape, tgt_in, d);
    for (l, ids) in layout.decoder.iter().take(cfg.n_decoder_layers).enumerate() {
        let heads = cfg.decoder_heads[l];
        let self_mask = AttnMask {
            batch,
            q_len: tgt_in.len,
            k_len: tgt_in.len,
            causal: true,
            key_valid: tgt_in.valid.clone(),
        };
        let h = ctx.norm(tape, x, ids.ln_self, d);
        let a = ctx.attention(tape, h, h, ids.self_attn, d, d, heads, self_mask);
        x = tape.add(x, a);

        let span = attended_layers(cfg.enc_dec_attn[l]);
        let first = n_enc - span;
        let mut parts = Vec::with_capacity(span);
        for j in first..n_enc {
            let v = match normed[j] {
                Some(v) => v,
                None => {
                    let v = ctx.norm(tape, encoder_outputs[j], layout.encoder_norm, e);
                    normed[j] = Some(v);
                    v
                }
            };
            parts.push(v);
        }
        let (memory, key_valid) = if span == 1 {
            (parts[0], src_valid.to_vec())
        } else {
            // Reorder the stacked [layer][sentence][position] rows into
            // [sentence][layer][position].
            let stacked = tape.concat_rows(parts);
            let per_layer = batch * src_len;
            let mut idx = Vec::with_capacity(span * per_layer);
            let mut valid = Vec::with_capacity(span * per_layer);
            for b in 0..batch {
                for jj in 0..span {
                    for s in 0..src_len {
                        idx.push(jj * per_layer + b * src_len + s);
                        valid.push(src_valid[b * src_len + s]);
                    }
                }
            }
            (tape.gather_rows(stacked, idx), valid)
        };
        let cross_mask = AttnMask {
            batch,
            q_len: tgt_in.len,
            k_len: span * src_len,
            causal: false,
            key_valid,
        };
        let h = ctx.norm(tape, x, ids.ln_cross, d);
        let c = ctx.attention(tape, h, memory, ids.cross_attn, e, d, heads, cross_mask);
        x = tape.add(x, c);

        let h = ctx.norm(tape, x, ids.ln_ffn, d);
        let f = ctx.ffn(tape, h, ids.w1, ids.w2, d, cfg.decoder_ffn_dims[l]);
        x = tape.add(x, f);
    }
    let h = ctx.norm(tape, x, layout.decoder_norm, d);
    let table = ctx.param(tape, layout.embedding, bank.vocab_size(), d);
    tape.matmul_nt(h, table)
}

/// Token-level cross-entropy of a batch. With `mean` the loss is averaged over
/// non-pad target tokens, otherwise summed. Returns `(loss, n_tokens)`.
pub fn batch_loss(
    tape: &mut Tape,
    view: &SubModelView<'_>,
    batch: &Batch,
    smoothing: f64,
    mean: bool,
) -> (Var, usize) {
    let enc = encode(tape, view, &batch.src);
    let logits = decode(tape, view, &enc, &batch.src.valid, batch.src.len, &batch.tgt_in);
    let n = batch.tgt_out.n_valid();
    let w = if mean { 1.0 / n.max(1) as f64 } else { 1.0 };
    let weights = batch
        .tgt_out
        .valid
        .iter()
        .map(|&v| if v { w } else { 0.0 })
        .collect();
    let loss = tape.cross_entropy(logits, batch.tgt_out.ids.clone(), weights, smoothing);
    (loss, n)
}

/// Teacher-forced logits for a whole batch, without gradients.
pub fn forward_logits(view: &SubModelView<'_>, batch: &Batch) -> Result<Matrix> {
    let vocab = view.bank().vocab_size();
    check_tokens(&batch.src.ids, vocab)?;
    check_tokens(&batch.tgt_in.ids, vocab)?;
    let mut tape = Tape::new();
    let enc = encode(&mut tape, view, &batch.src);
    let logits = decode(&mut tape, view, &enc, &batch.src.valid, batch.src.len, &batch.tgt_in);
    Ok(tape.value(logits).clone())
}
