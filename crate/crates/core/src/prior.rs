//! Image-conditioned autoregressive prior over quantized latent grids.
//!
//! A small vision transformer turns the rendered mask/inverse-depth channels
//! into image tokens. The latent grid is generated cell by cell in raster
//! order (x-fastest): each sequence token carries the previous cell's code
//! embedding plus two positional roles (the filled location and the next
//! target location), cross-attends to the image tokens once, and runs through
//! a causally masked transformer whose output at position t is the code
//! distribution for cell t. Merging the filled-cell and next-target roles
//! into one token keeps the plain upper-triangular mask sufficient, so a
//! single parallel teacher-forced pass is bitwise equal to step-by-step
//! decoding over the same prefix.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{decode_index_grid, CodecConfig, CodecError, IndexGrid, CODEC_GROUP};
use crate::render::RenderedImage;
use crate::rng::{derive_seed, step_rng, stream_rng};
use crate::shape::TsdfGrid;
use crate::tensor::{lr_decay_factor, ParamStore, Scalar, Tape, Tensor, Var};

pub const PRIOR_GROUPS: [&str; 4] = ["img", "xattn", "tr", "head"];

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("bad prior config: {0}")]
    BadConfig(String),
    #[error("image {got_w}x{got_h} does not match configured size {expected}")]
    ImageMismatch {
        expected: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("code index {index} out of range for codebook of {codebook}")]
    BadIndex { index: usize, codebook: usize },
    #[error("bad index grid: {0}")]
    BadGrid(String),
    #[error("prior parameters not initialized: {0}")]
    Uninitialized(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: u64, loss: f64 },
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed trace: {0}")]
    Malformed(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub codebook_size: usize,
    /// Width of the frozen codebook rows fed in as filled-cell content.
    pub code_dim: usize,
    /// Latent grid edge; the generated sequence has g³ cells.
    pub latent_g: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Fourier frequency count F per coordinate; feature width is 6F.
    pub fourier_freqs: usize,
    pub img_size: usize,
    pub img_patch: usize,
    pub img_dim: usize,
    pub img_layers: usize,
    pub img_heads: usize,
    pub xattn_dim: usize,
    pub xattn_heads: usize,
    /// Full model concatenates the attended output with the original
    /// embeddings; false swaps in the attended output alone (ablation).
    pub use_concat: bool,
}

impl PriorConfig {
    /// Desk-scale default matched to the toy codec: 4³ latents over a 64-entry
    /// codebook, 4-layer d=128 transformer, 17 image tokens.
    pub fn toy() -> Self {
        Self {
            codebook_size: 64,
            code_dim: 32,
            latent_g: 4,
            model_dim: 128,
            layers: 4,
            heads: 4,
            mlp_ratio: 2,
            fourier_freqs: 6,
            img_size: 64,
            img_patch: 16,
            img_dim: 64,
            img_layers: 2,
            img_heads: 4,
            xattn_dim: 64,
            xattn_heads: 4,
            use_concat: true,
        }
    }

    pub fn validate(&self) -> Result<(), PriorError> {
        let bad = |m: String| Err(PriorError::BadConfig(m));
        if self.codebook_size == 0 || self.codebook_size > usize::from(u16::MAX) {
            return bad(format!("codebook_size {} out of range", self.codebook_size));
        }
        if self.code_dim == 0 || self.latent_g == 0 {
            return bad("zero code_dim or latent_g".into());
        }
        if self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return bad(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            ));
        }
        if self.img_dim == 0 || self.img_dim % self.img_heads != 0 {
            return bad(format!(
                "img_dim {} not divisible by {} heads",
                self.img_dim, self.img_heads
            ));
        }
        if self.xattn_dim == 0 || self.xattn_dim % self.xattn_heads != 0 {
            return bad(format!(
                "xattn_dim {} not divisible by {} heads",
                self.xattn_dim, self.xattn_heads
            ));
        }
        if self.img_patch == 0 || self.img_size % self.img_patch != 0 {
            return bad(format!(
                "img_size {} not tiled by patch {}",
                self.img_size, self.img_patch
            ));
        }
        if self.layers == 0 || self.img_layers == 0 || self.mlp_ratio == 0 {
            return bad("zero depth".into());
        }
        if self.fourier_freqs == 0 {
            return bad("fourier_freqs must be positive".into());
        }
        Ok(())
    }

    /// Sequence cell count n = g³.
    pub fn cells(&self) -> usize {
        self.latent_g.pow(3)
    }

    /// Image token count N' = 1 summary token + tiles.
    pub fn img_tokens(&self) -> usize {
        1 + (self.img_size / self.img_patch).pow(2)
    }
}

/// Raw fourier positional features of a latent cell: the cell index is split
/// into (x, y, z) by the raster order, normalized to [0, 1), and expanded as
/// [sin(2^j π c), cos(2^j π c)] for j = 0..F per coordinate.
pub fn fourier_features(location: usize, g: usize, freqs: usize) -> Vec<f64> {
    assert!(location < g * g * g, "location {location} out of range");
    let coords = [location % g, (location / g) % g, location / (g * g)];
    let mut out = Vec::with_capacity(6 * freqs);
    for c in coords {
        let x = c as f64 / g as f64;
        for j in 0..freqs {
            let arg = (1u64 << j) as f64 * std::f64::consts::PI * x;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    out
}

/// Additive attention mask: 0 on and below the diagonal, −∞ above.
pub fn causal_mask<T: Scalar>(len: usize) -> Tensor<T> {
    assert!(len >= 1, "mask length must be positive");
    Tensor::from_fn(&[len, len], |e| {
        if e % len > e / len {
            T::neg_infinity()
        } else {
            T::zero()
        }
    })
}

fn block_param_specs(prefix: &str, dim: usize, ratio: usize, out: &mut Vec<(String, Vec<usize>)>) {
    let specs: [(&str, Vec<usize>); 16] = [
        ("ln1_g", vec![dim]),
        ("ln1_b", vec![dim]),
        ("wq", vec![dim, dim]),
        ("bq", vec![dim]),
        ("wk", vec![dim, dim]),
        ("bk", vec![dim]),
        ("wv", vec![dim, dim]),
        ("bv", vec![dim]),
        ("wo", vec![dim, dim]),
        ("bo", vec![dim]),
        ("ln2_g", vec![dim]),
        ("ln2_b", vec![dim]),
        ("mlp1_w", vec![dim, ratio * dim]),
        ("mlp1_b", vec![ratio * dim]),
        ("mlp2_w", vec![ratio * dim, dim]),
        ("mlp2_b", vec![dim]),
    ];
    for (name, shape) in specs {
        out.push((format!("{prefix}.{name}"), shape));
    }
}

/// Every prior parameter as (dotted full name, shape) in registration order:
/// image encoder, cross-attention, transformer, head.
pub fn prior_param_specs(cfg: &PriorConfig) -> Vec<(String, Vec<usize>)> {
    let (d, dp, dx) = (cfg.model_dim, cfg.img_dim, cfg.xattn_dim);
    let f6 = 6 * cfg.fourier_freqs;
    let mut v = Vec::new();

    v.push(("img.patch_w".into(), vec![2 * cfg.img_patch.pow(2), dp]));
    v.push(("img.patch_b".into(), vec![dp]));
    v.push(("img.cls".into(), vec![dp]));
    v.push(("img.pos".into(), vec![cfg.img_tokens(), dp]));
    for i in 0..cfg.img_layers {
        block_param_specs(&format!("img.l{i}"), dp, cfg.mlp_ratio, &mut v);
    }
    v.push(("img.lnf_g".into(), vec![dp]));
    v.push(("img.lnf_b".into(), vec![dp]));

    v.push(("xattn.wq".into(), vec![d, dx]));
    v.push(("xattn.bq".into(), vec![dx]));
    v.push(("xattn.wk".into(), vec![dp, dx]));
    v.push(("xattn.bk".into(), vec![dx]));
    v.push(("xattn.wv".into(), vec![dp, dx]));
    v.push(("xattn.bv".into(), vec![dx]));
    v.push(("xattn.wo".into(), vec![dx, d]));
    v.push(("xattn.bo".into(), vec![d]));
    v.push(("xattn.cat_w".into(), vec![2 * d, d]));
    v.push(("xattn.cat_b".into(), vec![d]));

    v.push(("tr.sos".into(), vec![d]));
    v.push(("tr.code_w".into(), vec![cfg.code_dim, d]));
    v.push(("tr.code_b".into(), vec![d]));
    v.push(("tr.fill_w".into(), vec![f6, d]));
    v.push(("tr.fill_b".into(), vec![d]));
    v.push(("tr.tgt_w".into(), vec![f6, d]));
    v.push(("tr.tgt_b".into(), vec![d]));
    for i in 0..cfg.layers {
        block_param_specs(&format!("tr.b{i}"), d, cfg.mlp_ratio, &mut v);
    }
    v.push(("tr.lnf_g".into(), vec![d]));
    v.push(("tr.lnf_b".into(), vec![d]));

    v.push(("head.w".into(), vec![d, cfg.codebook_size]));
    v.push(("head.b".into(), vec![cfg.codebook_size]));
    v
}

/// Registers the four prior groups. Layer-norm gains start at 1, biases at 0,
/// token embeddings (sos, cls, pos) and the head small (±0.02) so an
/// untrained model emits near-uniform code distributions; weight matrices
/// start uniform ±1/√fan_in.
pub fn init_prior_params<T: Scalar>(store: &mut ParamStore<T>, cfg: &PriorConfig, seed: u64) {
    for g in PRIOR_GROUPS {
        store.add_group(g, 1e-3);
    }
    for (full, shape) in prior_param_specs(cfg) {
        let (group, name) = full.split_once('.').expect("dotted name");
        let leaf = name.rsplit('.').next().unwrap();
        let is_ln_gain = leaf.ends_with("_g");
        let is_bias = leaf.ends_with("_b")
            || matches!(leaf, "bq" | "bk" | "bv" | "bo")
            || (group == "head" && leaf == "b");
        let value = if is_ln_gain {
            Tensor::full(&shape, T::one())
        } else if is_bias {
            Tensor::zeros(&shape)
        } else {
            let span = if matches!(leaf, "sos" | "cls" | "pos") || (group == "head" && leaf == "w")
            {
                0.02
            } else {
                1.0 / (shape[0] as f64).sqrt()
            };
            let mut rng = stream_rng(seed, &format!("prior-init/{full}"));
            Tensor::from_fn(&shape, |_| T::from_f64(rng.gen_range(-span..span)))
        };
        store.add_param(group, name, value);
    }
}

type Lookup<'a> = dyn Fn(&str) -> Var + 'a;

fn linear<T: Scalar>(tape: &mut Tape<T>, look: &Lookup, w: &str, b: &str, x: Var) -> Var {
    let h = tape.matmul(x, look(w));
    tape.add_suffix(h, look(b))
}

fn norm<T: Scalar>(tape: &mut Tape<T>, look: &Lookup, base: &str, x: Var) -> Var {
    let g = look(&format!("{base}_g"));
    let b = look(&format!("{base}_b"));
    tape.layer_norm(x, g, b, 1e-5)
}

/// Multi-head attention with queries from `x` and keys/values from `kv`,
/// pre-softmax scaling by 1/√d_head, optional additive mask on the scores.
fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    look: &Lookup,
    prefix: &str,
    x: Var,
    kv: Var,
    heads: usize,
    mask: Option<Var>,
) -> Var {
    let q = linear(tape, look, &format!("{prefix}.wq"), &format!("{prefix}.bq"), x);
    let k = linear(tape, look, &format!("{prefix}.wk"), &format!("{prefix}.bk"), kv);
    let v = linear(tape, look, &format!("{prefix}.wv"), &format!("{prefix}.bv"), kv);
    let dim = tape.value(q).shape()[1];
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice(q, 1, h * dh, dh);
        let kh = tape.slice(k, 1, h * dh, dh);
        let vh = tape.slice(v, 1, h * dh, dh);
        let s = tape.matmul_nt(qh, kh);
        let s = tape.scale(s, scale);
        let s = match mask {
            Some(m) => tape.add(s, m),
            None => s,
        };
        let a = tape.softmax_last(s);
        outs.push(tape.matmul(a, vh));
    }
    let cat = tape.concat(&outs, 1);
    linear(tape, look, &format!("{prefix}.wo"), &format!("{prefix}.bo"), cat)
}

/// Pre-norm residual block: x + attn(ln(x)), then x + mlp(ln(x)).
fn block<T: Scalar>(
    tape: &mut Tape<T>,
    look: &Lookup,
    prefix: &str,
    x: Var,
    heads: usize,
    mask: Option<Var>,
) -> Var {
    let n1 = norm(tape, look, &format!("{prefix}.ln1"), x);
    let a = attention(tape, look, prefix, n1, n1, heads, mask);
    let x = tape.add(x, a);
    let n2 = norm(tape, look, &format!("{prefix}.ln2"), x);
    let h = linear(
        tape,
        look,
        &format!("{prefix}.mlp1_w"),
        &format!("{prefix}.mlp1_b"),
        n2,
    );
    let h = tape.gelu(h);
    let h = linear(
        tape,
        look,
        &format!("{prefix}.mlp2_w"),
        &format!("{prefix}.mlp2_b"),
        h,
    );
    tape.add(x, h)
}

/// Mask and inverse-depth channels cut into non-overlapping tiles, one row
/// per tile in raster order (x-fastest), channels concatenated per row.
pub fn image_patch_matrix<T: Scalar>(
    cfg: &PriorConfig,
    image: &RenderedImage,
) -> Result<Tensor<T>, PriorError> {
    if image.width != cfg.img_size || image.height != cfg.img_size {
        return Err(PriorError::ImageMismatch {
            expected: cfg.img_size,
            got_w: image.width,
            got_h: image.height,
        });
    }
    let p = cfg.img_patch;
    let tiles = cfg.img_size / p;
    let mut data = Vec::with_capacity(tiles * tiles * 2 * p * p);
    for ty in 0..tiles {
        for tx in 0..tiles {
            for ch in [&image.ch_mask, &image.ch_invdepth] {
                for py in 0..p {
                    for px in 0..p {
                        let idx = (tx * p + px) + cfg.img_size * (ty * p + py);
                        data.push(T::from_f64(f64::from(ch[idx])));
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[tiles * tiles, 2 * p * p], data))
}

/// Embeds the image as N' tokens: linearly projected tiles behind a learned
/// summary token, plus learned positions, through the encoder blocks.
pub fn encode_image<T: Scalar>(
    tape: &mut Tape<T>,
    look: &Lookup,
    cfg: &PriorConfig,
    image: &RenderedImage,
) -> Result<Var, PriorError> {
    let patches = image_patch_matrix::<T>(cfg, image)?;
    let pvar = tape.constant(patches);
    let emb = linear(tape, look, "img.patch_w", "img.patch_b", pvar);
    let cls = tape.reshape(look("img.cls"), &[1, cfg.img_dim]);
    let toks = tape.concat(&[cls, emb], 0);
    let mut x = tape.add(toks, look("img.pos"));
    for i in 0..cfg.img_layers {
        x = block(tape, look, &format!("img.l{i}"), x, cfg.img_heads, None);
    }
    Ok(norm(tape, look, "img.lnf", x))
}

/// Conditions every sequence embedding on the image tokens: per-head scaled
/// dot-product attention, output projected back to model width, then either
/// concatenated with the original embedding and mapped down (full model) or
/// substituted directly (no-concatenation ablation).
pub fn cross_attend<T: Scalar>(
    tape: &mut Tape<T>,
    look: &Lookup,
    cfg: &PriorConfig,
    seq: Var,
    tokens: Var,
) -> Var {
    let att = attention(tape, look, "xattn", seq, tokens, cfg.xattn_heads, None);
    if cfg.use_concat {
        let cat = tape.concat(&[seq, att], 1);
        linear(tape, look, "xattn.cat_w", "xattn.cat_b", cat)
    } else {
        att
    }
}

/// Builds the token matrix for a generation prefix. Token 0 is the start
/// embedding plus the first target's positional role; token j carries cell
/// j−1's code row (projected) plus its filled-role position plus the next
/// target's position. With `with_tail` (teacher forcing over all n cells) a
/// final token holding the last filled cell closes the sequence at n+1 rows;
/// its output is never read, and under the causal mask it cannot influence
/// earlier rows.
pub fn prefix_tokens<T: Scalar>(
    tape: &mut Tape<T>,
    look: &Lookup,
    cfg: &PriorConfig,
    book: Var,
    ids: &[usize],
    with_tail: bool,
) -> Result<Var, PriorError> {
    let n = cfg.cells();
    let (g, d) = (cfg.latent_g, cfg.model_dim);
    if with_tail {
        if ids.len() != n {
            return Err(PriorError::BadGrid(format!(
                "teacher forcing needs all {n} cells, got {}",
                ids.len()
            )));
        }
    } else if ids.len() >= n {
        return Err(PriorError::BadGrid(format!(
            "prefix of {} cells leaves nothing to generate",
            ids.len()
        )));
    }
    for &id in ids {
        if id >= cfg.codebook_size {
            return Err(PriorError::BadIndex {
                index: id,
                codebook: cfg.codebook_size,
            });
        }
    }

    let f6 = 6 * cfg.fourier_freqs;
    let four = tape.constant(Tensor::from_fn(&[n, f6], |e| {
        T::from_f64(fourier_features(e / f6, g, cfg.fourier_freqs)[e % f6])
    }));
    let fill_all = linear(tape, look, "tr.fill_w", "tr.fill_b", four);
    let tgt_all = linear(tape, look, "tr.tgt_w", "tr.tgt_b", four);
    let code_table = linear(tape, look, "tr.code_w", "tr.code_b", book);

    let sos = tape.reshape(look("tr.sos"), &[1, d]);
    let tgt0 = tape.slice(tgt_all, 0, 0, 1);
    let row0 = tape.add(sos, tgt0);

    let t = ids.len();
    let mid = if with_tail { t - 1 } else { t };
    let mut parts = vec![row0];
    if mid > 0 {
        let emb = tape.embedding(code_table, &ids[..mid]);
        let fill = tape.slice(fill_all, 0, 0, mid);
        let tgt = tape.slice(tgt_all, 0, 1, mid);
        let s = tape.add(emb, fill);
        parts.push(tape.add(s, tgt));
    }
    if with_tail {
        let emb = tape.embedding(code_table, &ids[t - 1..]);
        let fill = tape.slice(fill_all, 0, t - 1, 1);
        parts.push(tape.add(emb, fill));
    }
    Ok(if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts, 0)
    })
}

/// Causal transformer stack plus final norm.
pub fn transformer_stack<T: Scalar>(tape: &mut Tape<T>, look: &Lookup, cfg: &PriorConfig, seq: Var) -> Var {
    let s = tape.value(seq).shape()[0];
    let mask = tape.constant(causal_mask::<T>(s));
    let mut x = seq;
    for i in 0..cfg.layers {
        x = block(tape, look, &format!("tr.b{i}"), x, cfg.heads, Some(mask));
    }
    norm(tape, look, "tr.lnf", x)
}

pub struct TrainForward {
    /// (n, K): row t is the pre-softmax distribution for cell t.
    pub logits: Var,
    /// Mean cross-entropy over all n cells.
    pub loss: Var,
}

/// One teacher-forced pass: the whole ground-truth sequence in parallel under
/// the causal mask. Row t of the logits equals what step-by-step decoding of
/// the same prefix would produce.
pub fn forward_train<T: Scalar>(
    tape: &mut Tape<T>,
    look: &Lookup,
    cfg: &PriorConfig,
    book: Var,
    image: &RenderedImage,
    gt: &IndexGrid,
) -> Result<TrainForward, PriorError> {
    let n = cfg.cells();
    if gt.g != cfg.latent_g || gt.indices.len() != n {
        return Err(PriorError::BadGrid(format!(
            "index grid g={} len={}, prior expects g={}",
            gt.g,
            gt.indices.len(),
            cfg.latent_g
        )));
    }
    let ids: Vec<usize> = gt.indices.iter().map(|&i| usize::from(i)).collect();
    let tokens = encode_image(tape, look, cfg, image)?;
    let seq = prefix_tokens(tape, look, cfg, book, &ids, true)?;
    let seq = cross_attend(tape, look, cfg, seq, tokens);
    let h = transformer_stack(tape, look, cfg, seq);
    let hn = tape.slice(h, 0, 0, n);
    let logits = linear(tape, look, "head.w", "head.b", hn);
    let loss = tape.cross_entropy_mean(logits, &ids);
    Ok(TrainForward { logits, loss })
}

/// Logits for the next cell given a sampled prefix: (1, K).
pub fn forward_step<T: Scalar>(
    tape: &mut Tape<T>,
    look: &Lookup,
    cfg: &PriorConfig,
    book: Var,
    image_tokens: Var,
    prefix: &[usize],
) -> Result<Var, PriorError> {
    let seq = prefix_tokens(tape, look, cfg, book, prefix, false)?;
    let seq = cross_attend(tape, look, cfg, seq, image_tokens);
    let h = transformer_stack(tape, look, cfg, seq);
    let last = tape.slice(h, 0, prefix.len(), 1);
    Ok(linear(tape, look, "head.w", "head.b", last))
}

/// Autoregressive state: which cells are filled with which codes. The next
/// target location is always `filled.len()` since the order is fixed.
#[derive(Debug, Clone, Default)]
pub struct SequenceState {
    pub filled: Vec<(usize, usize)>,
}

impl SequenceState {
    pub fn target(&self) -> usize {
        self.filled.len()
    }

    pub fn push(&mut self, code: usize) {
        let loc = self.filled.len();
        self.filled.push((loc, code));
    }

    pub fn codes(&self) -> Vec<usize> {
        self.filled.iter().map(|&(_, c)| c).collect()
    }
}

/// Normalized distribution over codebook indices.
#[derive(Debug, Clone)]
pub struct CodeDistribution {
    pub probs: Vec<f64>,
}

impl CodeDistribution {
    /// Softmax of logits/temperature; temperature 0 degenerates to a point
    /// mass on the argmax (ties to the lowest index).
    pub fn from_logits(logits: &[f64], temperature: f64) -> Self {
        assert!(temperature >= 0.0, "temperature must be non-negative");
        assert!(!logits.is_empty());
        let mut probs = vec![0.0; logits.len()];
        if temperature == 0.0 {
            let mut arg = 0;
            for (i, &x) in logits.iter().enumerate() {
                if x > logits[arg] {
                    arg = i;
                }
            }
            probs[arg] = 1.0;
            return Self { probs };
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (p, &x) in probs.iter_mut().zip(logits) {
            *p = ((x - mx) / temperature).exp();
            sum += *p;
        }
        for p in probs.iter_mut() {
            *p /= sum;
        }
        Self { probs }
    }

    pub fn argmax(&self) -> usize {
        let mut arg = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[arg] {
                arg = i;
            }
        }
        arg
    }

    /// Inverse-CDF draw; consumes exactly one uniform variate.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub chosen: u16,
    pub probs: Vec<f32>,
}

/// Per-step sampling record: the chosen index and the full distribution it
/// was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub codebook: usize,
    pub steps: Vec<TraceStep>,
}

fn sample_loop<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &PriorConfig,
    book: &Tensor<T>,
    temperature: f64,
    seed: u64,
    make_tokens: &dyn Fn(&mut Tape<T>, &Lookup) -> Result<Var, PriorError>,
) -> Result<(IndexGrid, SampleTrace), PriorError> {
    cfg.validate()?;
    let n = cfg.cells();
    let mut rng = stream_rng(seed, "prior/sample");
    let mut state = SequenceState::default();
    let mut steps = Vec::with_capacity(n);
    for _ in 0..n {
        let mut tape: Tape<T> = Tape::new();
        let bind = store.bind(&mut tape);
        let look = |name: &str| bind.var(name);
        let bookv = tape.constant(book.clone());
        let tokens = make_tokens(&mut tape, &look)?;
        let codes = state.codes();
        let logits = forward_step(&mut tape, &look, cfg, bookv, tokens, &codes)?;
        let row: Vec<f64> = tape.value(logits).data().iter().map(|x| x.to_f64()).collect();
        let dist = CodeDistribution::from_logits(&row, temperature);
        let choice = dist.sample(&mut rng);
        steps.push(TraceStep {
            chosen: choice as u16,
            probs: dist.probs.iter().map(|&p| p as f32).collect(),
        });
        state.push(choice);
    }
    let ig = IndexGrid {
        g: cfg.latent_g,
        indices: state.codes().iter().map(|&c| c as u16).collect(),
    };
    Ok((
        ig,
        SampleTrace {
            codebook: cfg.codebook_size,
            steps,
        },
    ))
}

/// Draws one latent grid cell by cell. Each step rebuilds the full
/// conditioned sequence from what has been sampled so far; no state is cached
/// across steps, so the logits at step t are exactly the teacher-forced
/// logits of the sampled prefix.
pub fn sample_shape<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &PriorConfig,
    book: &Tensor<T>,
    image: &RenderedImage,
    temperature: f64,
    seed: u64,
) -> Result<(IndexGrid, SampleTrace), PriorError> {
    sample_loop(store, cfg, book, temperature, seed, &|tape, look| {
        encode_image(tape, look, cfg, image)
    })
}

/// Like [`sample_shape`] but with the image-token matrix replaced by zeros:
/// the unconditioned control for measuring how much the observation steers
/// the samples.
pub fn sample_shape_zero_tokens<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &PriorConfig,
    book: &Tensor<T>,
    temperature: f64,
    seed: u64,
) -> Result<(IndexGrid, SampleTrace), PriorError> {
    sample_loop(store, cfg, book, temperature, seed, &|tape, _| {
        Ok(tape.constant(Tensor::zeros(&[cfg.img_tokens(), cfg.img_dim])))
    })
}

/// k independently seeded samples decoded to TSDF grids.
pub fn generate_hypotheses<T: Scalar>(
    prior: &ParamStore<T>,
    cfg: &PriorConfig,
    codec: &ParamStore<T>,
    codec_cfg: &CodecConfig,
    image: &RenderedImage,
    k: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<TsdfGrid>, PriorError> {
    if k == 0 {
        return Err(PriorError::BadConfig("k must be at least 1".into()));
    }
    if cfg.latent_g != codec_cfg.latent_g()
        || cfg.codebook_size != codec_cfg.codebook_size
        || cfg.code_dim != codec_cfg.code_dim
    {
        return Err(PriorError::BadConfig(
            "prior and codec latent layouts disagree".into(),
        ));
    }
    let book = codec.get(CODEC_GROUP, "book");
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let s = derive_seed(seed, &format!("hyp/{i}"));
        let (ig, _) = sample_shape(prior, cfg, book, image, temperature, s)?;
        out.push(decode_index_grid(codec, codec_cfg, &ig)?);
    }
    Ok(out)
}

const TRACE_MAGIC: &[u8; 4] = b"TRCE";

/// Little-endian binary layout: magic "TRCE", u32 step count, u32 codebook
/// size K, then per step a u16 chosen index and K f32 probabilities.
pub fn write_trace(path: &Path, trace: &SampleTrace) -> Result<(), PriorError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TRACE_MAGIC)?;
    w.write_u32::<LittleEndian>(trace.steps.len() as u32)?;
    w.write_u32::<LittleEndian>(trace.codebook as u32)?;
    for s in &trace.steps {
        if s.probs.len() != trace.codebook {
            return Err(PriorError::Malformed(format!(
                "step holds {} probs, codebook is {}",
                s.probs.len(),
                trace.codebook
            )));
        }
        w.write_u16::<LittleEndian>(s.chosen)?;
        for &p in &s.probs {
            w.write_f32::<LittleEndian>(p)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<SampleTrace, PriorError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TRACE_MAGIC {
        return Err(PriorError::Malformed("bad TRCE magic".into()));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let k = r.read_u32::<LittleEndian>()? as usize;
    if k == 0 || k > usize::from(u16::MAX) {
        return Err(PriorError::Malformed(format!("implausible codebook {k}")));
    }
    let mut steps = Vec::with_capacity(n);
    for _ in 0..n {
        let chosen = r.read_u16::<LittleEndian>()?;
        let mut probs = vec![0f32; k];
        for p in probs.iter_mut() {
            *p = r.read_f32::<LittleEndian>()?;
        }
        steps.push(TraceStep { chosen, probs });
    }
    Ok(SampleTrace { codebook: k, steps })
}

/// One rendered view paired with every ground-truth index grid its scene maps
/// to; training samples a view uniformly, then one grid uniformly.
#[derive(Debug, Clone)]
pub struct PriorExample {
    pub image: RenderedImage,
    pub gts: Vec<IndexGrid>,
}

#[derive(Debug, Clone)]
pub struct PriorTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr_tr: f64,
    pub lr_head: f64,
    pub lr_xattn: f64,
    /// Image encoder trains slower than the rest, mirroring the usual
    /// backbone/head split.
    pub lr_img: f64,
    pub decay_every: u64,
    pub seed: u64,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        Self {
            steps: 8000,
            batch: 10,
            lr_tr: 3e-4,
            lr_head: 3e-4,
            lr_xattn: 3e-4,
            lr_img: 1.5e-4,
            decay_every: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CeRecord {
    pub step: u64,
    pub ce: f64,
}

#[derive(Debug, Clone)]
pub struct PriorTrainReport {
    pub curve: Vec<CeRecord>,
}

fn validate_examples(cfg: &PriorConfig, examples: &[PriorExample]) -> Result<(), PriorError> {
    if examples.is_empty() {
        return Err(PriorError::EmptyDataset);
    }
    for ex in examples {
        if ex.gts.is_empty() {
            return Err(PriorError::EmptyDataset);
        }
        for gt in &ex.gts {
            if gt.g != cfg.latent_g || gt.indices.len() != cfg.cells() {
                return Err(PriorError::BadGrid(format!(
                    "example grid g={} len={}",
                    gt.g,
                    gt.indices.len()
                )));
            }
            for &i in &gt.indices {
                if usize::from(i) >= cfg.codebook_size {
                    return Err(PriorError::BadIndex {
                        index: usize::from(i),
                        codebook: cfg.codebook_size,
                    });
                }
            }
        }
    }
    Ok(())
}

fn run_steps<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &PriorConfig,
    book: &Tensor<T>,
    examples: &[PriorExample],
    steps: u64,
    batch: usize,
    decay_every: u64,
    seed: u64,
) -> Result<Vec<CeRecord>, PriorError> {
    // Steps are numbered from the store's optimizer counter, and each draws
    // its batch from a counter-keyed stream: training in chunks (or resuming
    // from a checkpoint) replays the exact trajectory of one long run.
    let start = store.step;
    let mut curve = Vec::with_capacity(steps as usize);
    for step in start..start + steps {
        let mut rng = step_rng(seed, "prior/batch", step);
        let mut tape: Tape<T> = Tape::new();
        let bind = store.bind(&mut tape);
        let look = |name: &str| bind.var(name);
        let bookv = tape.constant(book.clone());
        let mut total: Option<Var> = None;
        for _ in 0..batch {
            let ex = &examples[rng.gen_range(0..examples.len())];
            let gt = &ex.gts[rng.gen_range(0..ex.gts.len())];
            let fwd = forward_train(&mut tape, &look, cfg, bookv, &ex.image, gt)?;
            total = Some(match total {
                None => fwd.loss,
                Some(acc) => tape.add(acc, fwd.loss),
            });
        }
        let mean = tape.scale(total.expect("batch must be positive"), 1.0 / batch as f64);
        let ce = tape.value(mean).item().to_f64();
        if !ce.is_finite() {
            return Err(PriorError::NonFinite { step, loss: ce });
        }
        let grads = tape.backward(mean);
        store.adam_step(&bind, &grads, lr_decay_factor(step, decay_every));
        curve.push(CeRecord { step, ce });
    }
    Ok(curve)
}

/// Teacher-forced training over (view, mapped grid) pairs with per-group
/// learning rates. Runs `tcfg.steps` MORE optimizer steps on top of whatever
/// the store has already taken. Aborts on a non-finite loss, leaving the
/// store at its last finite state.
pub fn train_prior<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &PriorConfig,
    book: &Tensor<T>,
    examples: &[PriorExample],
    tcfg: &PriorTrainConfig,
) -> Result<PriorTrainReport, PriorError> {
    cfg.validate()?;
    validate_examples(cfg, examples)?;
    store.set_lr("img", tcfg.lr_img);
    store.set_lr("xattn", tcfg.lr_xattn);
    store.set_lr("tr", tcfg.lr_tr);
    store.set_lr("head", tcfg.lr_head);
    let curve = run_steps(
        store,
        cfg,
        book,
        examples,
        tcfg.steps,
        tcfg.batch,
        tcfg.decay_every,
        tcfg.seed,
    )?;
    Ok(PriorTrainReport { curve })
}

/// Mean teacher-forced cross-entropy over every (view, grid) pair, in a fixed
/// enumeration order; deterministic, no parameter updates.
pub fn eval_prior_ce<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &PriorConfig,
    book: &Tensor<T>,
    examples: &[PriorExample],
) -> Result<f64, PriorError> {
    validate_examples(cfg, examples)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for ex in examples {
        for gt in &ex.gts {
            let mut tape: Tape<T> = Tape::new();
            let bind = store.bind(&mut tape);
            let look = |name: &str| bind.var(name);
            let bookv = tape.constant(book.clone());
            let fwd = forward_train(&mut tape, &look, cfg, bookv, &ex.image, gt)?;
            sum += tape.value(fwd.loss).item().to_f64();
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr_img: f64,
    pub lr_xattn: f64,
    pub decay_every: u64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 10,
            lr_img: 5e-5,
            lr_xattn: 1e-4,
            decay_every: 1000,
            seed: 0,
        }
    }
}

/// Domain adaptation: freezes the generation backbone (transformer and head)
/// and trains only the image encoder and cross-attention, from fresh
/// optimizer state. The frozen groups stay bit-identical.
pub fn finetune<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &PriorConfig,
    book: &Tensor<T>,
    examples: &[PriorExample],
    fcfg: &FinetuneConfig,
) -> Result<PriorTrainReport, PriorError> {
    cfg.validate()?;
    validate_examples(cfg, examples)?;
    for name in PRIOR_GROUPS {
        let ok = store
            .groups()
            .iter()
            .any(|g| g.name == name && !g.params.is_empty());
        if !ok {
            return Err(PriorError::Uninitialized(format!(
                "parameter group {name:?} is missing or empty"
            )));
        }
    }
    store.set_trainable("tr", false);
    store.set_trainable("head", false);
    store.set_lr("img", fcfg.lr_img);
    store.set_lr("xattn", fcfg.lr_xattn);
    store.reset_adam();
    let curve = run_steps(
        store,
        cfg,
        book,
        examples,
        fcfg.steps,
        fcfg.batch,
        fcfg.decay_every,
        fcfg.seed,
    )?;
    Ok(PriorTrainReport { curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::AdamConfig;

    fn tiny_cfg() -> PriorConfig {
        PriorConfig {
            codebook_size: 10,
            code_dim: 4,
            latent_g: 2,
            model_dim: 16,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            fourier_freqs: 2,
            img_size: 16,
            img_patch: 8,
            img_dim: 8,
            img_layers: 1,
            img_heads: 2,
            xattn_dim: 8,
            xattn_heads: 2,
            use_concat: true,
        }
    }

    fn tiny_book<T: Scalar>(cfg: &PriorConfig, seed: u64) -> Tensor<T> {
        let mut rng = stream_rng(seed, "test-book");
        Tensor::from_fn(&[cfg.codebook_size, cfg.code_dim], |_| {
            T::from_f64(rng.gen_range(-0.5..0.5))
        })
    }

    fn flat_image(cfg: &PriorConfig, seed: u64) -> RenderedImage {
        let n = cfg.img_size * cfg.img_size;
        let mut rng = stream_rng(seed, "test-image");
        RenderedImage {
            width: cfg.img_size,
            height: cfg.img_size,
            ch_mask: (0..n).map(|_| f32::from(rng.gen::<bool>())).collect(),
            ch_invdepth: (0..n).map(|_| rng.gen::<f32>()).collect(),
            part_labels: vec![-1; n],
            depth: vec![f64::INFINITY; n],
        }
    }

    fn random_gt(cfg: &PriorConfig, seed: u64) -> IndexGrid {
        let mut rng = stream_rng(seed, "test-gt");
        IndexGrid {
            g: cfg.latent_g,
            indices: (0..cfg.cells())
                .map(|_| rng.gen_range(0..cfg.codebook_size as u16))
                .collect(),
        }
    }

    fn tiny_store(cfg: &PriorConfig, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new(AdamConfig::default());
        init_prior_params(&mut store, cfg, seed);
        store
    }

    fn parallel_logits(
        store: &ParamStore<f64>,
        cfg: &PriorConfig,
        book: &Tensor<f64>,
        image: &RenderedImage,
        gt: &IndexGrid,
    ) -> Tensor<f64> {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let look = |n: &str| bind.var(n);
        let bookv = tape.constant(book.clone());
        let fwd = forward_train(&mut tape, &look, cfg, bookv, image, gt).unwrap();
        tape.value(fwd.logits).clone()
    }

    #[test]
    fn fourier_features_are_injective_and_anchored_at_zero() {
        let f = fourier_features(0, 4, 6);
        for (i, v) in f.iter().enumerate() {
            if i % 2 == 0 {
                assert_eq!(*v, 0.0, "sin terms at location 0");
            } else {
                assert_eq!(*v, 1.0, "cos terms at location 0");
            }
        }
        let all: Vec<Vec<f64>> = (0..64).map(|l| fourier_features(l, 4, 6)).collect();
        for a in 0..64 {
            for b in a + 1..64 {
                assert_ne!(all[a], all[b], "locations {a} and {b} collide");
            }
        }
        assert_eq!(fourier_features(3, 2, 2).len(), 12);
    }

    #[test]
    fn causal_mask_matches_contract() {
        let m: Tensor<f64> = causal_mask(2);
        assert_eq!(m.data()[0], 0.0);
        assert_eq!(m.data()[1], f64::NEG_INFINITY);
        assert_eq!(m.data()[2], 0.0);
        assert_eq!(m.data()[3], 0.0);
        let one: Tensor<f64> = causal_mask(1);
        assert_eq!(one.data(), &[0.0]);
        let five: Tensor<f64> = causal_mask(5);
        for i in 0..5 {
            let zeros = five.data()[i * 5..(i + 1) * 5]
                .iter()
                .filter(|&&x| x == 0.0)
                .count();
            assert_eq!(zeros, i + 1, "row {i}");
        }
    }

    #[test]
    fn image_encoding_token_count_determinism_and_mismatch() {
        let cfg = tiny_cfg();
        let store = tiny_store(&cfg, 1);
        let image = flat_image(&cfg, 2);

        let run = || -> Tensor<f64> {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let look = |n: &str| bind.var(n);
            let toks = encode_image(&mut tape, &look, &cfg, &image).unwrap();
            tape.value(toks).clone()
        };
        let t = run();
        assert_eq!(t.shape(), &[5, cfg.img_dim], "1 summary + 2x2 tiles");
        assert_eq!(run().data(), t.data());
        assert_eq!(PriorConfig::toy().img_tokens(), 17);

        let mut wrong = flat_image(&cfg, 3);
        wrong.width = 32;
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let look = |n: &str| bind.var(n);
        assert!(matches!(
            encode_image(&mut tape, &look, &cfg, &wrong),
            Err(PriorError::ImageMismatch { .. })
        ));
    }

    /// Swapping two image tiles swaps exactly the two corresponding rows of
    /// the pre-attention patch matrix.
    #[test]
    fn patch_matrix_permutation_probe() {
        let cfg = tiny_cfg();
        let image = flat_image(&cfg, 4);
        let base: Tensor<f64> = image_patch_matrix(&cfg, &image).unwrap();

        let p = cfg.img_patch;
        let mut swapped = image.clone();
        for ch in 0..2 {
            for py in 0..p {
                for px in 0..p {
                    let a = px + cfg.img_size * py;
                    let b = (p + px) + cfg.img_size * py;
                    let chs = if ch == 0 {
                        &mut swapped.ch_mask
                    } else {
                        &mut swapped.ch_invdepth
                    };
                    chs.swap(a, b);
                }
            }
        }
        let perm: Tensor<f64> = image_patch_matrix(&cfg, &swapped).unwrap();
        assert_eq!(perm.row(0), base.row(1));
        assert_eq!(perm.row(1), base.row(0));
        assert_eq!(perm.row(2), base.row(2));
        assert_eq!(perm.row(3), base.row(3));
    }

    #[test]
    fn parallel_teacher_forcing_equals_sequential_decoding() {
        let cfg = tiny_cfg();
        let store = tiny_store(&cfg, 5);
        let book = tiny_book::<f64>(&cfg, 6);
        let image = flat_image(&cfg, 7);
        let gt = random_gt(&cfg, 8);
        let par = parallel_logits(&store, &cfg, &book, &image, &gt);

        let n = cfg.cells();
        let k = cfg.codebook_size;
        let mut worst = 0.0f64;
        for t in 0..n {
            let prefix: Vec<usize> = gt.indices[..t].iter().map(|&i| usize::from(i)).collect();
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let look = |nm: &str| bind.var(nm);
            let bookv = tape.constant(book.clone());
            let tokens = encode_image(&mut tape, &look, &cfg, &image).unwrap();
            let step = forward_step(&mut tape, &look, &cfg, bookv, tokens, &prefix).unwrap();
            let row = tape.value(step);
            for j in 0..k {
                worst = worst.max((row.data()[j] - par.data()[t * k + j]).abs());
            }
        }
        assert!(worst < 1e-5, "parallel vs sequential diverged by {worst}");
    }

    /// Changing the ground truth at cell j must leave logits at cells <= j
    /// bitwise untouched and move something later.
    #[test]
    fn future_perturbation_leaves_past_logits_exact()
    {
        let cfg = tiny_cfg();
        let store = tiny_store(&cfg, 9);
        let book = tiny_book::<f64>(&cfg, 10);
        let image = flat_image(&cfg, 11);
        let gt = random_gt(&cfg, 12);
        let base = parallel_logits(&store, &cfg, &book, &image, &gt);

        let j = 3usize;
        let mut tampered = gt.clone();
        tampered.indices[j] = (u16::from(tampered.indices[j]) + 1) as u16 % cfg.codebook_size as u16;
        let moved = parallel_logits(&store, &cfg, &book, &image, &tampered);

        let k = cfg.codebook_size;
        assert_eq!(
            &base.data()[..(j + 1) * k],
            &moved.data()[..(j + 1) * k],
            "positions <= {j} must be unaffected"
        );
        assert_ne!(
            &base.data()[(j + 1) * k..],
            &moved.data()[(j + 1) * k..],
            "some later position must see the change"
        );
    }

    #[test]
    fn untrained_loss_sits_near_uniform_entropy() {
        let cfg = tiny_cfg();
        let store = tiny_store(&cfg, 13);
        let book = tiny_book::<f64>(&cfg, 14);
        let examples = vec![PriorExample {
            image: flat_image(&cfg, 15),
            gts: vec![random_gt(&cfg, 16)],
        }];
        let ce = eval_prior_ce(&store, &cfg, &book, &examples).unwrap();
        let lnk = (cfg.codebook_size as f64).ln();
        assert!(
            (ce - lnk).abs() / lnk < 0.15,
            "untrained CE {ce} too far from ln K = {lnk}"
        );
    }

    #[test]
    fn identical_image_tokens_collapse_attention_and_concat_halves_wire_up() {
        let cfg = tiny_cfg();
        let store = tiny_store(&cfg, 17);
        let mut rng = stream_rng(18, "xattn-probe");
        let seq_t: Tensor<f64> =
            Tensor::from_fn(&[4, cfg.model_dim], |_| rng.gen_range(-1.0..1.0));
        let row: Vec<f64> = (0..cfg.img_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tokens_t = Tensor::from_fn(&[6, cfg.img_dim], |e| row[e % cfg.img_dim]);

        // All keys/values identical: every query's attended row is the same
        // convex combination, so outputs are equal across queries.
        let mut no_cat = cfg.clone();
        no_cat.use_concat = false;
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let look = |n: &str| bind.var(n);
        let seq = tape.constant(seq_t.clone());
        let toks = tape.constant(tokens_t);
        let out = cross_attend(&mut tape, &look, &no_cat, seq, toks);
        let out = tape.value(out);
        for r in 1..4 {
            assert_eq!(out.row(r), out.row(0), "query {r}");
        }

        // Zeroing the attended half of the concat weights reduces the full
        // model to a linear map of the original embeddings.
        let mut zeroed = tiny_store(&cfg, 17);
        let d = cfg.model_dim;
        {
            let p = zeroed.param_mut("xattn", "cat_w");
            for r in d..2 * d {
                for c in 0..d {
                    p.value.data_mut()[r * d + c] = 0.0;
                }
            }
        }
        let mut tape = Tape::new();
        let bind = zeroed.bind(&mut tape);
        let look = |n: &str| bind.var(n);
        let seq = tape.constant(seq_t.clone());
        let toks = tape.constant(Tensor::from_fn(&[6, cfg.img_dim], |_| {
            rng.gen_range(-1.0..1.0)
        }));
        let conditioned = cross_attend(&mut tape, &look, &cfg, seq, toks);
        let top = tape.value(bind.var("xattn.cat_w")).clone();
        let wtop = tape.constant(Tensor::from_fn(&[d, d], |e| top.data()[e]));
        let direct = tape.matmul(seq, wtop);
        let direct = tape.add_suffix(direct, bind.var("xattn.cat_b"));
        assert_eq!(tape.value(conditioned).data(), tape.value(direct).data());
    }

    #[test]
    fn different_images_move_first_step_logits() {
        let cfg = tiny_cfg();
        let store = tiny_store(&cfg, 19);
        let book = tiny_book::<f64>(&cfg, 20);
        let logits_for = |img: &RenderedImage| -> Vec<f64> {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let look = |n: &str| bind.var(n);
            let bookv = tape.constant(book.clone());
            let toks = encode_image(&mut tape, &look, &cfg, img).unwrap();
            let l = forward_step(&mut tape, &look, &cfg, bookv, toks, &[]).unwrap();
            tape.value(l).data().to_vec()
        };
        let a = logits_for(&flat_image(&cfg, 21));
        let b = logits_for(&flat_image(&cfg, 22));
        assert_ne!(a, b, "conditioning is not wired in");
    }

    #[test]
    fn code_distribution_normalizes_and_temperature_zero_is_argmax() {
        let logits = vec![0.3, -1.0, 2.5, 2.5, 0.0];
        let d = CodeDistribution::from_logits(&logits, 0.7);
        let sum: f64 = d.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(d.probs.iter().all(|&p| p >= 0.0));

        let greedy = CodeDistribution::from_logits(&logits, 0.0);
        assert_eq!(greedy.probs[2], 1.0, "ties break to the lowest index");
        assert_eq!(greedy.argmax(), 2);

        let mut r1 = stream_rng(1, "dist");
        let mut r2 = stream_rng(1, "dist");
        assert_eq!(d.sample(&mut r1), d.sample(&mut r2));
    }

    #[test]
    fn sampling_is_seed_deterministic_and_greedy_at_zero_temperature() {
        let cfg = tiny_cfg();
        let store = tiny_store(&cfg, 23);
        let book = tiny_book::<f64>(&cfg, 24);
        let image = flat_image(&cfg, 25);

        let (a, ta) = sample_shape(&store, &cfg, &book, &image, 0.8, 99).unwrap();
        let (b, tb) = sample_shape(&store, &cfg, &book, &image, 0.8, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(a.indices.len(), cfg.cells());
        for s in &ta.steps {
            let sum: f64 = s.probs.iter().map(|&p| f64::from(p)).sum();
            assert!((sum - 1.0).abs() < 1e-5);
        }

        let (g1, _) = sample_shape(&store, &cfg, &book, &image, 0.0, 1).unwrap();
        let (g2, _) = sample_shape(&store, &cfg, &book, &image, 0.0, 2).unwrap();
        assert_eq!(g1, g2, "temperature 0 must ignore the seed");
    }

    #[test]
    fn trace_file_roundtrip_and_bad_magic() {
        let trace = SampleTrace {
            codebook: 4,
            steps: vec![
                TraceStep {
                    chosen: 2,
                    probs: vec![0.1, 0.2, 0.6, 0.1],
                },
                TraceStep {
                    chosen: 0,
                    probs: vec![0.7, 0.1, 0.1, 0.1],
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.trce");
        write_trace(&path, &trace).unwrap();
        assert_eq!(read_trace(&path).unwrap(), trace);
        std::fs::write(&path, b"XXXXrest").unwrap();
        assert!(matches!(read_trace(&path), Err(PriorError::Malformed(_))));
    }

    #[test]
    fn training_learns_and_validates_inputs() {
        let cfg = tiny_cfg();
        let mut store: ParamStore<f32> = ParamStore::new(AdamConfig::default());
        init_prior_params(&mut store, &cfg, 26);
        let book = tiny_book::<f32>(&cfg, 27);
        let examples = vec![
            PriorExample {
                image: flat_image(&cfg, 28),
                gts: vec![random_gt(&cfg, 29)],
            },
            PriorExample {
                image: flat_image(&cfg, 30),
                gts: vec![random_gt(&cfg, 31), random_gt(&cfg, 32)],
            },
        ];
        let tcfg = PriorTrainConfig {
            steps: 80,
            batch: 2,
            lr_tr: 3e-3,
            lr_head: 3e-3,
            lr_xattn: 3e-3,
            lr_img: 1.5e-3,
            decay_every: 1000,
            seed: 3,
        };
        let before = eval_prior_ce(&store, &cfg, &book, &examples).unwrap();
        let report = train_prior(&mut store, &cfg, &book, &examples, &tcfg).unwrap();
        assert_eq!(report.curve.len(), 80);
        assert!(report.curve.iter().all(|r| r.ce.is_finite()));
        let after = eval_prior_ce(&store, &cfg, &book, &examples).unwrap();
        assert!(after < before, "CE did not improve: {before} -> {after}");

        assert!(matches!(
            train_prior(&mut store, &cfg, &book, &[], &tcfg),
            Err(PriorError::EmptyDataset)
        ));
        let bad = vec![PriorExample {
            image: flat_image(&cfg, 33),
            gts: vec![IndexGrid {
                g: cfg.latent_g,
                indices: vec![cfg.codebook_size as u16; cfg.cells()],
            }],
        }];
        assert!(matches!(
            train_prior(&mut store, &cfg, &book, &bad, &tcfg),
            Err(PriorError::BadIndex { .. })
        ));
    }

    /// Interrupting training at a checkpoint and resuming must replay the
    /// exact trajectory of one uninterrupted run: the step counter keys both
    /// the batch stream and the Adam schedule.
    #[test]
    fn resumed_training_matches_uninterrupted_run_exactly() {
        let cfg = tiny_cfg();
        let book = tiny_book::<f32>(&cfg, 50);
        let examples = vec![
            PriorExample {
                image: flat_image(&cfg, 51),
                gts: vec![random_gt(&cfg, 52)],
            },
            PriorExample {
                image: flat_image(&cfg, 53),
                gts: vec![random_gt(&cfg, 54), random_gt(&cfg, 55)],
            },
        ];
        let tcfg = |steps: u64| PriorTrainConfig {
            steps,
            batch: 2,
            seed: 6,
            ..PriorTrainConfig::default()
        };

        let mut one_run: ParamStore<f32> = ParamStore::new(AdamConfig::default());
        init_prior_params(&mut one_run, &cfg, 56);
        let full = train_prior(&mut one_run, &cfg, &book, &examples, &tcfg(20)).unwrap();

        let mut first: ParamStore<f32> = ParamStore::new(AdamConfig::default());
        init_prior_params(&mut first, &cfg, 56);
        let head = train_prior(&mut first, &cfg, &book, &examples, &tcfg(12)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("prior.ckpt");
        crate::tensor::save_checkpoint(&ckpt, &first, true).unwrap();
        drop(first);

        let mut resumed: ParamStore<f32> = crate::tensor::load_checkpoint(&ckpt).unwrap();
        assert_eq!(resumed.step, 12);
        let tail = train_prior(&mut resumed, &cfg, &book, &examples, &tcfg(8)).unwrap();

        let stitched: Vec<(u64, f64)> = head
            .curve
            .iter()
            .chain(&tail.curve)
            .map(|r| (r.step, r.ce))
            .collect();
        let uninterrupted: Vec<(u64, f64)> =
            full.curve.iter().map(|r| (r.step, r.ce)).collect();
        assert_eq!(stitched, uninterrupted, "loss curves diverged");
        for g in one_run.groups() {
            for p in &g.params {
                let other = resumed.get(&g.name, &p.name);
                assert_eq!(p.value.data(), other.data(), "{}.{}", g.name, p.name);
            }
        }
    }

    #[test]
    fn finetune_freezes_backbone_and_moves_conditioning() {
        let cfg = tiny_cfg();
        let mut store: ParamStore<f32> = ParamStore::new(AdamConfig::default());
        init_prior_params(&mut store, &cfg, 34);
        let book = tiny_book::<f32>(&cfg, 35);
        let examples = vec![PriorExample {
            image: flat_image(&cfg, 36),
            gts: vec![random_gt(&cfg, 37)],
        }];

        let tr_before: Vec<Vec<f32>> = store
            .groups()
            .iter()
            .filter(|g| g.name == "tr" || g.name == "head")
            .flat_map(|g| g.params.iter().map(|p| p.value.data().to_vec()))
            .collect();
        let img_before = store.get("img", "patch_w").data().to_vec();

        let fcfg = FinetuneConfig {
            steps: 5,
            batch: 2,
            lr_img: 1e-3,
            lr_xattn: 2e-3,
            decay_every: 1000,
            seed: 4,
        };
        finetune(&mut store, &cfg, &book, &examples, &fcfg).unwrap();

        let tr_after: Vec<Vec<f32>> = store
            .groups()
            .iter()
            .filter(|g| g.name == "tr" || g.name == "head")
            .flat_map(|g| g.params.iter().map(|p| p.value.data().to_vec()))
            .collect();
        assert_eq!(tr_before, tr_after, "backbone must stay bit-identical");
        assert_ne!(
            img_before,
            store.get("img", "patch_w").data().to_vec(),
            "image encoder must move"
        );

        let mut empty: ParamStore<f32> = ParamStore::new(AdamConfig::default());
        assert!(matches!(
            finetune(&mut empty, &cfg, &book, &examples, &fcfg),
            Err(PriorError::Uninitialized(_))
        ));
    }

    /// Central differences over a representative parameter from every group
    /// on the full conditioned teacher-forced loss.
    #[test]
    fn conditioned_forward_gradient_check_on_group_representatives() {
        let cfg = tiny_cfg();
        let store = tiny_store(&cfg, 38);
        let book = tiny_book::<f64>(&cfg, 39);
        let image = flat_image(&cfg, 40);
        let gt = random_gt(&cfg, 41);

        let picked = [
            "img.patch_w",
            "img.l0.wv",
            "xattn.wq",
            "xattn.cat_w",
            "tr.sos",
            "tr.code_w",
            "tr.b1.wo",
            "tr.b0.mlp1_b",
            "tr.lnf_g",
            "head.w",
        ];
        let inputs: Vec<Tensor<f64>> = picked
            .iter()
            .map(|full| {
                let (g, n) = full.split_once('.').unwrap();
                store.get(g, n).clone()
            })
            .collect();

        let report = crate::tensor::grad_check(
            &inputs,
            |tape, vars| {
                let bind = store.bind(tape);
                let look = |name: &str| -> Var {
                    match picked.iter().position(|p| *p == name) {
                        Some(i) => vars[i],
                        None => bind.var(name),
                    }
                };
                let bookv = tape.constant(book.clone());
                let fwd = forward_train(tape, &look, &cfg, bookv, &image, &gt).unwrap();
                fwd.loss
            },
            1e-4,
        );
        assert!(
            report.max_rel_err < 1e-6,
            "conditioned forward gradient check failed: {report:?}"
        );
    }
}
