//! The elastic SuperTransformer: a shared weight bank, zero-copy views for
//! any SubConfig, and inference with arbitrary encoder-decoder attention.

pub mod forward;
pub mod view;
pub mod weights;

pub use forward::{batch_loss, forward_logits, position_encoding};
pub use view::{inherit, param_count, Slice, SubModelView};
pub use weights::{init_super, BankShape, Layout, SuperWeights};

use crate::autograd::Tape;
use crate::corpus::{PaddedBatch, TokenId, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

fn single(src: &[TokenId]) -> PaddedBatch {
    PaddedBatch {
        batch: 1,
        len: src.len(),
        ids: src.to_vec(),
        valid: src.iter().map(|&t| t != PAD).collect(),
    }
}

/// Per-layer encoder outputs for one sentence, each `src_len × e_enc`.
/// Positions holding the pad id are masked out as attention keys.
pub fn encode_source(view: &SubModelView<'_>, src_tokens: &[TokenId]) -> Result<Vec<Matrix>> {
    if src_tokens.is_empty() {
        return Err(Error::InvalidInput("empty source sentence".into()));
    }
    forward::check_tokens(src_tokens, view.bank().vocab_size())?;
    let mut tape = Tape::new();
    let outs = forward::encode(&mut tape, view, &single(src_tokens));
    Ok(outs.into_iter().map(|v| tape.value(v).clone()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GreedyOptions {
    pub max_len: usize,
    /// Suppress `eos` until this many tokens have been produced.
    pub min_len: usize,
}

impl GreedyOptions {
    pub fn up_to(max_len: usize) -> Self {
        Self { max_len, min_len: 0 }
    }

    /// Always produce exactly `len` tokens.
    pub fn exact(len: usize) -> Self {
        Self {
            max_len: len,
            min_len: len,
        }
    }
}

/// Greedy decoding from `bos` until `eos` (not included in the output) or
/// `max_len` tokens. `pad` and `bos` are never emitted.
pub fn greedy_translate(view: &SubModelView<'_>, src_tokens: &[TokenId], max_len: usize) -> Result<Vec<TokenId>> {
    greedy_translate_with(view, src_tokens, GreedyOptions::up_to(max_len))
}

pub fn greedy_translate_with(
    view: &SubModelView<'_>,
    src_tokens: &[TokenId],
    opts: GreedyOptions,
) -> Result<Vec<TokenId>> {
    let memory = encode_source(view, src_tokens)?;
    let valid: Vec<bool> = src_tokens.iter().map(|&t| t != PAD).collect();
    greedy_from_memory(view, &memory, &valid, opts)
}

/// Greedy decoding against precomputed encoder layer outputs. Layers outside
/// every decoder layer's attention span are never read.
pub fn greedy_from_memory(
    view: &SubModelView<'_>,
    memory: &[Matrix],
    src_valid: &[bool],
    opts: GreedyOptions,
) -> Result<Vec<TokenId>> {
    if opts.max_len == 0 {
        return Err(Error::InvalidInput("max_len must be at least 1".into()));
    }
    if memory.len() != view.bank().shape().encoder_layers() {
        return Err(Error::InvalidInput(format!(
            "expected {} encoder outputs, got {}",
            view.bank().shape().encoder_layers(),
            memory.len()
        )));
    }
    let src_len = src_valid.len();
    let mut out: Vec<TokenId> = Vec::with_capacity(opts.max_len);
    while out.len() < opts.max_len {
        let mut tape = Tape::new();
        let mem: Vec<_> = memory.iter().map(|m| tape.constant(m.clone())).collect();
        let mut prefix = Vec::with_capacity(out.len() + 1);
        prefix.push(BOS);
        prefix.extend_from_slice(&out);
        let tgt = PaddedBatch {
            batch: 1,
            len: prefix.len(),
            valid: vec![true; prefix.len()],
            ids: prefix,
        };
        let logits = forward::decode(&mut tape, view, &mem, src_valid, src_len, &tgt);
        let lv = tape.value(logits);
        let last = lv.row(lv.rows() - 1);
        let suppress_eos = out.len() < opts.min_len;
        let mut best = None::<(TokenId, f64)>;
        for (tok, &score) in last.iter().enumerate() {
            if tok == PAD || tok == BOS || (suppress_eos && tok == EOS) {
                continue;
            }
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((tok, score));
            }
        }
        let (tok, _) = best.ok_or_else(|| Error::InvalidInput("vocabulary has no emittable token".into()))?;
        if tok == EOS {
            break;
        }
        out.push(tok);
    }
    Ok(out)
}
