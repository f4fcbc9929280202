//! The shared weight bank and its checkpoint format.
//!
//! Checkpoint layout (all integers little-endian `u32`):
//!
//! ```text
//! magic        8 bytes  "EMTBANK\0"
//! version      u32      CHECKPOINT_VERSION
//! header_len   u32
//! header       JSON     {"space": DesignSpace, "shape": BankShape}
//! vocab_size   u32
//! tensors      f32 LE   every tensor in declaration order, row-major
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::N_SPECIAL;
use crate::design_space::{DesignSpace, SubConfig};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EMTBANK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Physical tensor sizes of a bank. A super bank uses the space maxima for
/// every layer; a standalone model uses exactly one config's dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankShape {
    pub vocab_size: usize,
    pub encoder_embed: usize,
    pub decoder_embed: usize,
    pub encoder_ffn: Vec<usize>,
    pub decoder_ffn: Vec<usize>,
}

impl BankShape {
    pub fn for_space(space: &DesignSpace, vocab_size: usize) -> Self {
        Self {
            vocab_size,
            encoder_embed: space.max_encoder_embed(),
            decoder_embed: space.max_decoder_embed(),
            encoder_ffn: vec![space.max_ffn(); space.encoder_layers],
            decoder_ffn: vec![space.max_ffn(); space.max_decoder_layers()],
        }
    }

    pub fn for_config(cfg: &SubConfig, vocab_size: usize) -> Self {
        Self {
            vocab_size,
            encoder_embed: cfg.encoder_embed_dim,
            decoder_embed: cfg.decoder_embed_dim,
            encoder_ffn: cfg.encoder_ffn_dims.clone(),
            decoder_ffn: cfg.decoder_ffn_dims.clone(),
        }
    }

    pub fn encoder_layers(&self) -> usize {
        self.encoder_ffn.len()
    }

    pub fn decoder_layers(&self) -> usize {
        self.decoder_ffn.len()
    }

    pub fn embed_width(&self) -> usize {
        self.encoder_embed.max(self.decoder_embed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnIds {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormIds {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderLayerIds {
    pub self_attn: AttnIds,
    pub ln_attn: NormIds,
    pub w1: usize,
    pub w2: usize,
    pub ln_ffn: NormIds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderLayerIds {
    pub self_attn: AttnIds,
    pub ln_self: NormIds,
    pub cross_attn: AttnIds,
    pub ln_cross: NormIds,
    pub w1: usize,
    pub w2: usize,
    pub ln_ffn: NormIds,
}

/// Tensor ids in declaration order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub embedding: usize,
    pub encoder: Vec<EncoderLayerIds>,
    pub encoder_norm: NormIds,
    pub decoder: Vec<DecoderLayerIds>,
    pub decoder_norm: NormIds,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

struct Declared {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

fn declare(shape: &BankShape) -> (Layout, Vec<Declared>) {
    let mut decl: Vec<Declared> = Vec::new();
    let mut add = |name: String, rows: usize, cols: usize, init: Init| {
        decl.push(Declared { name, rows, cols, init });
        decl.len() - 1
    };
    let (e, d) = (shape.encoder_embed, shape.decoder_embed);
    let embedding = add("embedding".into(), shape.vocab_size, shape.embed_width(), Init::Normal);

    let attn = |add: &mut dyn FnMut(String, usize, usize, Init) -> usize,
                    prefix: &str,
                    kv_in: usize,
                    width: usize| AttnIds {
        q: add(format!("{prefix}.q"), width, width, Init::Normal),
        k: add(format!("{prefix}.k"), kv_in, width, Init::Normal),
        v: add(format!("{prefix}.v"), kv_in, width, Init::Normal),
        o: add(format!("{prefix}.o"), width, width, Init::Normal),
    };
    let norm = |add: &mut dyn FnMut(String, usize, usize, Init) -> usize, prefix: &str, width| NormIds {
        gain: add(format!("{prefix}.gain"), 1, width, Init::Ones),
        bias: add(format!("{prefix}.bias"), 1, width, Init::Zeros),
    };

    let mut encoder = Vec::new();
    for (l, &f) in shape.encoder_ffn.iter().enumerate() {
        let p = format!("encoder.{l}");
        let self_attn = attn(&mut add, &format!("{p}.self_attn"), e, e);
        let ln_attn = norm(&mut add, &format!("{p}.ln_attn"), e);
        let w1 = add(format!("{p}.ffn.w1"), e, f, Init::Normal);
        let w2 = add(format!("{p}.ffn.w2"), f, e, Init::Normal);
        let ln_ffn = norm(&mut add, &format!("{p}.ln_ffn"), e);
        encoder.push(EncoderLayerIds {
            self_attn,
            ln_attn,
            w1,
            w2,
            ln_ffn,
        });
    }
    let encoder_norm = norm(&mut add, "encoder.final_ln", e);

    let mut decoder = Vec::new();
    for (l, &f) in shape.decoder_ffn.iter().enumerate() {
        let p = format!("decoder.{l}");
        let self_attn = attn(&mut add, &format!("{p}.self_attn"), d, d);
        let ln_self = norm(&mut add, &format!("{p}.ln_self"), d);
        let cross_attn = attn(&mut add, &format!("{p}.cross_attn"), e, d);
        let ln_cross = norm(&mut add, &format!("{p}.ln_cross"), d);
        let w1 = add(format!("{p}.ffn.w1"), d, f, Init::Normal);
        let w2 = add(format!("{p}.ffn.w2"), f, d, Init::Normal);
        let ln_ffn = norm(&mut add, &format!("{p}.ln_ffn"), d);
        decoder.push(DecoderLayerIds {
            self_attn,
            ln_self,
            cross_attn,
            ln_cross,
            w1,
            w2,
            ln_ffn,
        });
    }
    let decoder_norm = norm(&mut add, "decoder.final_ln", d);
    (
        Layout {
            embedding,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
        },
        decl,
    )
}

/// Every tensor of an elastic encoder-decoder, sized to the maxima of the
/// space it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperWeights {
    space: DesignSpace,
    shape: BankShape,
    layout: Layout,
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    space: DesignSpace,
    shape: BankShape,
}

impl SuperWeights {
    fn build(space: DesignSpace, shape: BankShape, mut fill: impl FnMut(&str, usize, usize, Init) -> Matrix) -> Self {
        let (layout, decl) = declare(&shape);
        let mut names = Vec::with_capacity(decl.len());
        let mut tensors = Vec::with_capacity(decl.len());
        for d in decl {
            tensors.push(fill(&d.name, d.rows, d.cols, d.init));
            names.push(d.name);
        }
        Self {
            space,
            shape,
            layout,
            names,
            tensors,
        }
    }

    fn seeded(space: DesignSpace, shape: BankShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(space, shape, |name, rows, cols, init| match init {
            Init::Ones => Matrix::filled(rows, cols, 1.0),
            Init::Zeros => Matrix::zeros(rows, cols),
            Init::Normal => {
                // Embedding rows are looked up, so their fan-in is the width.
                let fan_in = if name == "embedding" { cols } else { rows };
                let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("finite sd");
                Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
            }
        })
    }

    pub fn space(&self) -> &DesignSpace {
        &self.space
    }

    pub fn shape(&self) -> &BankShape {
        &self.shape
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn vocab_size(&self) -> usize {
        self.shape.vocab_size
    }

    pub fn n_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn tensor(&self, id: usize) -> &Matrix {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Matrix {
        &mut self.tensors[id]
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensor_name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    /// Every tensor replaced by zeros (gains included).
    pub fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for t in &mut z.tensors {
            t.scale_assign(0.0);
        }
        z
    }

    /// SHA-256 over the little-endian bits of every element.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            for x in t.as_slice() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// A freshly initialized bank sized exactly to `cfg`.
    pub fn init_standalone(cfg: &SubConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        check_vocab(vocab_size)?;
        Ok(Self::seeded(
            DesignSpace::from_config(cfg),
            BankShape::for_config(cfg, vocab_size),
            seed,
        ))
    }

    /// Copies the sub-blocks `cfg` reads into a bank of exactly its size.
    pub fn extract(&self, cfg: &SubConfig) -> Result<Self> {
        super::view::check_fits(self, cfg)?;
        let shape = BankShape::for_config(cfg, self.shape.vocab_size);
        let by_name: std::collections::HashMap<&str, usize> = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        Ok(Self::build(DesignSpace::from_config(cfg), shape, |name, rows, cols, _| {
            self.tensor(by_name[name]).leading_block(rows, cols)
        }))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&CheckpointHeader {
            space: self.space.clone(),
            shape: self.shape.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + self.n_scalars() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.shape.vocab_size as u32).to_le_bytes());
        for t in &self.tensors {
            for &x in t.as_slice() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated checkpoint"))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        let version = u32_at(take(4)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u32_at(take(4)?) as usize;
        let header: CheckpointHeader = serde_json::from_slice(take(hlen)?)?;
        header.space.validate()?;
        let vocab = u32_at(take(4)?) as usize;
        if vocab != header.shape.vocab_size {
            return Err(bad("vocab size disagrees with header"));
        }
        let body_start = 8 + 4 + 4 + hlen + 4;
        let body = &bytes[body_start..];
        let mut offset = 0usize;
        let mut short = false;
        let w = Self::build(header.space, header.shape, |_, rows, cols, _| {
            let n = rows * cols;
            let Some(chunk) = body.get(offset * 4..(offset + n) * 4) else {
                short = true;
                return Matrix::zeros(rows, cols);
            };
            offset += n;
            let data = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            Matrix::from_vec(rows, cols, data)
        });
        if short {
            return Err(bad("truncated tensor data"));
        }
        if offset * 4 != body.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rounds every element through `f32`, matching a checkpoint round trip.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for x in t.as_mut_slice() {
                *x = *x as f32 as f64;
            }
        }
    }
}

fn check_vocab(vocab_size: usize) -> Result<()> {
    if vocab_size < N_SPECIAL {
        return Err(Error::InvalidInput(format!(
            "vocab_size {vocab_size} < {N_SPECIAL} reserved ids"
        )));
    }
    Ok(())
}

/// A deterministic bank for `space`: weights ~ N(0, 1/fan_in), gains 1,
/// biases 0.
pub fn init_super(space: &DesignSpace, vocab_size: usize, seed: u64) -> Result<SuperWeights> {
    space.validate()?;
    check_vocab(vocab_size)?;
    Ok(SuperWeights::seeded(
        space.clone(),
        BankShape::for_space(space, vocab_size),
        seed,
    ))
}
