//! Transformer text recognizer.
//!
//! A cropped text region is cut into square patches, each patch is
//! linearly embedded with an added position row, and a small encoder
//! stack refines the sequence with scaled dot-product attention. The
//! decoder reads a fixed-length window drawn cyclically from the encoder
//! output, runs its own stack, and projects every position onto the
//! character vocabulary in one shot; decoding is a single greedy argmax
//! per position, not an autoregressive loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    add, add_row_bias, concat_cols, matmul, relu_map, slice_cols, softmax_rows, transpose,
    Tensor,
};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
/// PAD, EOS, UNK, 26 letters, 10 digits, space, hyphen.
pub const VOCAB_SIZE: usize = 41;

/// Token id for one character; anything outside the vocabulary is UNK.
pub fn char_to_id(c: char) -> usize {
    match c {
        'a'..='z' => 3 + (c as usize - 'a' as usize),
        '0'..='9' => 29 + (c as usize - '0' as usize),
        ' ' => 39,
        '-' => 40,
        _ => UNK,
    }
}

/// Character for one token id; control tokens and bad ids give `None`.
pub fn id_to_char(id: usize) -> Option<char> {
    match id {
        3..=28 => Some((b'a' + (id - 3) as u8) as char),
        29..=38 => Some((b'0' + (id - 29) as u8) as char),
        39 => Some(' '),
        40 => Some('-'),
        _ => None,
    }
}

pub fn text_to_ids(text: &str) -> Vec<usize> {
    text.chars().map(char_to_id).collect()
}

/// Decode ids to text: stop at the first EOS, drop PAD, UNK, and anything
/// out of range.
pub fn ids_to_text(ids: &[usize]) -> String {
    ids.iter()
        .take_while(|&&id| id != EOS)
        .filter_map(|&id| id_to_char(id))
        .collect()
}

/// Model dimensions; every weight shape below follows from these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecognizerConfig {
    /// Patch side in pixels.
    pub patch: usize,
    /// Embedding width d.
    pub dim: usize,
    /// Attention heads; must divide `dim`.
    pub heads: usize,
    /// Encoder depth; the decoder uses the same depth.
    pub layers: usize,
    /// Output positions (maximum transcript length).
    pub max_len: usize,
    /// Position table rows, the hard cap on patches per crop.
    pub max_patches: usize,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        RecognizerConfig { patch: 4, dim: 32, heads: 4, layers: 2, max_len: 32, max_patches: 256 }
    }
}

impl RecognizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0
            || self.dim == 0
            || self.heads == 0
            || self.layers == 0
            || self.max_len == 0
            || self.max_patches == 0
        {
            return Err(Error::Config("recognizer dimensions must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide dim ({})",
                self.heads, self.dim
            )));
        }
        Ok(())
    }
}

/// Projection matrices for one attention block, each `[dim x dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

/// Two-layer position-wise network with a ReLU between, hidden width = dim.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardWeights {
    pub w1: Tensor,
    pub w2: Tensor,
}

/// One stack layer: attention then feed-forward, residual around each.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn: AttentionWeights,
    pub ffn: FeedForwardWeights,
}

/// Every parameter of the recognizer.
#[derive(Debug, Clone, PartialEq)]
pub struct RecognizerWeights {
    pub config: RecognizerConfig,
    /// `[patch * patch x dim]`; crops are single channel.
    pub patch_embed: Tensor,
    /// `[max_patches x dim]`, one row per patch position.
    pub pos_embed: Tensor,
    pub encoder: Vec<LayerWeights>,
    pub decoder: Vec<LayerWeights>,
    /// `[dim x VOCAB_SIZE]`.
    pub out_proj: Tensor,
    /// `[VOCAB_SIZE]`.
    pub out_bias: Tensor,
}

impl RecognizerWeights {
    /// Uniform(-1/sqrt(dim), 1/sqrt(dim)) initialization everywhere.
    pub fn random<R: rand::Rng>(config: RecognizerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let scale = 1.0 / (d as f32).sqrt();
        let layer = |rng: &mut R| LayerWeights {
            attn: AttentionWeights {
                w_q: Tensor::uniform(vec![d, d], scale, rng),
                w_k: Tensor::uniform(vec![d, d], scale, rng),
                w_v: Tensor::uniform(vec![d, d], scale, rng),
                w_o: Tensor::uniform(vec![d, d], scale, rng),
            },
            ffn: FeedForwardWeights {
                w1: Tensor::uniform(vec![d, d], scale, rng),
                w2: Tensor::uniform(vec![d, d], scale, rng),
            },
        };
        Ok(RecognizerWeights {
            patch_embed: Tensor::uniform(vec![config.patch * config.patch, d], scale, rng),
            pos_embed: Tensor::uniform(vec![config.max_patches, d], scale, rng),
            encoder: (0..config.layers).map(|_| layer(rng)).collect(),
            decoder: (0..config.layers).map(|_| layer(rng)).collect(),
            out_proj: Tensor::uniform(vec![d, VOCAB_SIZE], scale, rng),
            out_bias: Tensor::uniform(vec![VOCAB_SIZE], scale, rng),
            config,
        })
    }

    /// Check every stored shape against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let d = self.config.dim;
        let p2 = self.config.patch * self.config.patch;
        let square = |t: &Tensor, what: &str| -> Result<()> {
            if t.shape() != [d, d] {
                return Err(Error::Config(format!(
                    "{what} must be [{d} x {d}], got {:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        if self.patch_embed.shape() != [p2, d] {
            return Err(Error::Config(format!(
                "patch_embed must be [{p2} x {d}], got {:?}",
                self.patch_embed.shape()
            )));
        }
        if self.pos_embed.shape() != [self.config.max_patches, d] {
            return Err(Error::Config(format!(
                "pos_embed must be [{} x {d}], got {:?}",
                self.config.max_patches,
                self.pos_embed.shape()
            )));
        }
        if self.encoder.len() != self.config.layers || self.decoder.len() != self.config.layers {
            return Err(Error::Config(format!(
                "expected {} encoder and decoder layers, got {} and {}",
                self.config.layers,
                self.encoder.len(),
                self.decoder.len()
            )));
        }
        for (i, l) in self.encoder.iter().chain(&self.decoder).enumerate() {
            square(&l.attn.w_q, &format!("layer {i} w_q"))?;
            square(&l.attn.w_k, &format!("layer {i} w_k"))?;
            square(&l.attn.w_v, &format!("layer {i} w_v"))?;
            square(&l.attn.w_o, &format!("layer {i} w_o"))?;
            square(&l.ffn.w1, &format!("layer {i} ffn w1"))?;
            square(&l.ffn.w2, &format!("layer {i} ffn w2"))?;
        }
        if self.out_proj.shape() != [d, VOCAB_SIZE] {
            return Err(Error::Config(format!(
                "out_proj must be [{d} x {VOCAB_SIZE}], got {:?}",
                self.out_proj.shape()
            )));
        }
        if self.out_bias.shape() != [VOCAB_SIZE] {
            return Err(Error::Config(format!(
                "out_bias must be [{VOCAB_SIZE}], got {:?}",
                self.out_bias.shape()
            )));
        }
        Ok(())
    }
}

/// Softmax row sums and finiteness collected along one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    /// One entry per row of every attention softmax, in evaluation order.
    pub attention_row_sums: Vec<f32>,
    /// One entry per row of the final vocabulary softmax.
    pub output_row_sums: Vec<f32>,
    /// False if any intermediate value was NaN or infinite.
    pub all_finite: bool,
}

impl ForwardTrace {
    fn new() -> Self {
        ForwardTrace { attention_row_sums: Vec::new(), output_row_sums: Vec::new(), all_finite: true }
    }

    fn check(&mut self, t: &Tensor) {
        self.all_finite &= t.is_finite();
    }
}

/// Zero-pad the bottom and right of a rank-2 `[H x W]` or rank-3
/// `[H x W x C]` image so both spatial sides are multiples of `p`.
pub fn pad_to_multiple(img: &Tensor, p: usize) -> Result<Tensor> {
    if p == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    let (h, w, c) = image_dims(img)?;
    let nh = h.div_ceil(p) * p;
    let nw = w.div_ceil(p) * p;
    if nh == h && nw == w {
        return Ok(img.clone());
    }
    let mut data = vec![0.0f32; nh * nw * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(y * nw + x) * c + ch] = img.data()[(y * w + x) * c + ch];
            }
        }
    }
    let shape = if img.rank() == 2 { vec![nh, nw] } else { vec![nh, nw, c] };
    Tensor::new(shape, data)
}

fn image_dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match img.shape() {
        [h, w] => Ok((*h, *w, 1)),
        [h, w, c] => Ok((*h, *w, *c)),
        _ => Err(Error::BadShape {
            op: "extract_patches",
            detail: "image must be [H x W] or [H x W x C]".into(),
            shape: img.shape().to_vec(),
        }),
    }
}

/// Cut the image into non-overlapping `p x p` patches, row-major over the
/// patch grid, each flattened in (row, column, channel) order. Both
/// spatial sides must already be multiples of `p`.
pub fn extract_patches(img: &Tensor, p: usize) -> Result<Tensor> {
    if p == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    let (h, w, c) = image_dims(img)?;
    if h % p != 0 || w % p != 0 {
        return Err(Error::BadShape {
            op: "extract_patches",
            detail: format!("sides must be multiples of {p}"),
            shape: img.shape().to_vec(),
        });
    }
    let (gh, gw) = (h / p, w / p);
    let n = gh * gw;
    let d = p * p * c;
    let mut data = Vec::with_capacity(n * d);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..c {
                        let (y, x) = (gy * p + py, gx * p + px);
                        data.push(img.data()[(y * w + x) * c + ch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, d], data)
}

/// Embed flattened patches and add one position row each:
/// `z_i = x_i W_e + pos[i]`. More patches than position rows is an error.
pub fn embed_patches(patches: &Tensor, w_embed: &Tensor, pos: &Tensor) -> Result<Tensor> {
    let n = patches.shape()[0];
    if n > pos.shape()[0] {
        return Err(Error::PatchCapacity { given: n, max: pos.shape()[0] });
    }
    let projected = matmul(patches, w_embed)?;
    let d = projected.shape()[1];
    if pos.shape()[1] != d {
        return Err(Error::ShapeMismatch {
            op: "embed_patches",
            lhs: projected.shape().to_vec(),
            rhs: pos.shape().to_vec(),
        });
    }
    let mut data = Vec::with_capacity(n * d);
    for r in 0..n {
        for j in 0..d {
            data.push(projected.at2(r, j) + pos.at2(r, j));
        }
    }
    Tensor::new(vec![n, d], data)
}

/// `softmax(Q K^T / sqrt(d_k)) V` with the softmax taken per query row.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut trace = ForwardTrace::new();
    attention_traced(q, k, v, &mut trace)
}

fn attention_traced(q: &Tensor, k: &Tensor, v: &Tensor, trace: &mut ForwardTrace) -> Result<Tensor> {
    if q.rank() != 2 || k.rank() != 2 || q.shape()[1] != k.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if v.rank() != 2 || v.shape()[0] != k.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attention",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let d_k = q.shape()[1] as f32;
    let scores = matmul(q, &transpose(k)?)?;
    let scaled = crate::tensor::scale(&scores, 1.0 / d_k.sqrt());
    let attn = softmax_rows(&scaled)?;
    for r in 0..attn.shape()[0] {
        trace.attention_row_sums.push(attn.row(r).iter().sum());
    }
    trace.check(&attn);
    let out = matmul(&attn, v)?;
    trace.check(&out);
    Ok(out)
}

/// Multi-head attention: project, split columns into `heads` slices,
/// attend per head, concatenate, and project once more.
pub fn multi_head_attention(
    x_q: &Tensor,
    x_kv: &Tensor,
    w: &AttentionWeights,
    heads: usize,
) -> Result<Tensor> {
    let mut trace = ForwardTrace::new();
    multi_head_traced(x_q, x_kv, w, heads, &mut trace)
}

fn multi_head_traced(
    x_q: &Tensor,
    x_kv: &Tensor,
    w: &AttentionWeights,
    heads: usize,
    trace: &mut ForwardTrace,
) -> Result<Tensor> {
    let q = matmul(x_q, &w.w_q)?;
    let k = matmul(x_kv, &w.w_k)?;
    let v = matmul(x_kv, &w.w_v)?;
    let d = q.shape()[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("heads ({heads}) must divide dim ({d})")));
    }
    let dh = d / heads;
    let mut parts = Vec::with_capacity(heads);
    for i in 0..heads {
        let (s, e) = (i * dh, (i + 1) * dh);
        parts.push(attention_traced(
            &slice_cols(&q, s, e)?,
            &slice_cols(&k, s, e)?,
            &slice_cols(&v, s, e)?,
            trace,
        )?);
    }
    matmul(&concat_cols(&parts)?, &w.w_o)
}

/// One stack layer: `h = x + MHA(x, x)` then `h + FFN(h)` with
/// `FFN(h) = ReLU(h W1) W2`.
pub fn encoder_layer(x: &Tensor, w: &LayerWeights, heads: usize) -> Result<Tensor> {
    let mut trace = ForwardTrace::new();
    layer_traced(x, w, heads, &mut trace)
}

fn layer_traced(
    x: &Tensor,
    w: &LayerWeights,
    heads: usize,
    trace: &mut ForwardTrace,
) -> Result<Tensor> {
    let attended = multi_head_traced(x, x, &w.attn, heads, trace)?;
    let h = add(x, &attended)?;
    let ffn = matmul(&relu_map(&matmul(&h, &w.ffn.w1)?), &w.ffn.w2)?;
    let out = add(&h, &ffn)?;
    trace.check(&out);
    Ok(out)
}

/// Apply stack layers in order; an empty slice is the identity.
pub fn encoder_forward(x: &Tensor, layers: &[LayerWeights], heads: usize) -> Result<Tensor> {
    let mut trace = ForwardTrace::new();
    stack_traced(x, layers, heads, &mut trace)
}

fn stack_traced(
    x: &Tensor,
    layers: &[LayerWeights],
    heads: usize,
    trace: &mut ForwardTrace,
) -> Result<Tensor> {
    let mut cur = x.clone();
    for w in layers {
        cur = layer_traced(&cur, w, heads, trace)?;
    }
    Ok(cur)
}

/// Fixed-length decoder input: `max_len` rows drawn cyclically from the
/// encoder output, so position r reads encoder row `r mod n`.
pub fn cyclic_window(enc: &Tensor, max_len: usize) -> Result<Tensor> {
    if enc.rank() != 2 || enc.shape()[0] == 0 {
        return Err(Error::BadShape {
            op: "cyclic_window",
            detail: "encoder output must be a non-empty rank-2 tensor".into(),
            shape: enc.shape().to_vec(),
        });
    }
    let (n, d) = (enc.shape()[0], enc.shape()[1]);
    let mut data = Vec::with_capacity(max_len * d);
    for r in 0..max_len {
        data.extend_from_slice(enc.row(r % n));
    }
    Tensor::new(vec![max_len, d], data)
}

/// Decoder stack over the cyclic window; layers share the encoder layer
/// shape, so with no layers the window passes through unchanged.
pub fn decoder_forward(
    enc: &Tensor,
    layers: &[LayerWeights],
    heads: usize,
    max_len: usize,
) -> Result<Tensor> {
    let mut trace = ForwardTrace::new();
    decoder_traced(enc, layers, heads, max_len, &mut trace)
}

fn decoder_traced(
    enc: &Tensor,
    layers: &[LayerWeights],
    heads: usize,
    max_len: usize,
    trace: &mut ForwardTrace,
) -> Result<Tensor> {
    let window = cyclic_window(enc, max_len)?;
    stack_traced(&window, layers, heads, trace)
}

/// Highest-probability id per row; ties go to the lowest id.
pub fn greedy_decode(probs: &Tensor) -> Vec<usize> {
    let (rows, cols) = (probs.shape()[0], probs.shape()[1]);
    (0..rows)
        .map(|r| {
            let mut best = 0usize;
            for j in 1..cols {
                if probs.at2(r, j) > probs.at2(r, best) {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Full forward pass from a cropped image to text.
pub fn recognize(img: &Tensor, w: &RecognizerWeights) -> Result<String> {
    recognize_traced(img, w).map(|(text, _)| text)
}

/// Forward pass that also reports softmax row sums and finiteness, for
/// checking numeric health without touching the hot path twice.
pub fn recognize_traced(img: &Tensor, w: &RecognizerWeights) -> Result<(String, ForwardTrace)> {
    let cfg = &w.config;
    let mut trace = ForwardTrace::new();
    let padded = pad_to_multiple(img, cfg.patch)?;
    let patches = extract_patches(&padded, cfg.patch)?;
    if patches.shape()[1] != w.patch_embed.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "recognize",
            lhs: patches.shape().to_vec(),
            rhs: w.patch_embed.shape().to_vec(),
        });
    }
    let embedded = embed_patches(&patches, &w.patch_embed, &w.pos_embed)?;
    trace.check(&embedded);
    let enc = stack_traced(&embedded, &w.encoder, cfg.heads, &mut trace)?;
    let dec = decoder_traced(&enc, &w.decoder, cfg.heads, cfg.max_len, &mut trace)?;
    let logits = add_row_bias(&matmul(&dec, &w.out_proj)?, &w.out_bias)?;
    let probs = softmax_rows(&logits)?;
    for r in 0..probs.shape()[0] {
        trace.output_row_sums.push(probs.row(r).iter().sum());
    }
    trace.check(&probs);
    let ids = greedy_decode(&probs);
    Ok((ids_to_text(&ids), trace))
}
