//! Patch-wise vector-quantized codec over truncated SDF grids.
//!
//! A grid of resolution R is split into g³ non-overlapping p³ patches
//! (raster order, x-fastest). Each patch is encoded independently to a
//! D-vector, snapped to the nearest codebook entry, and the full g³ grid of
//! quantized codes is decoded jointly back to an R³ grid bounded by τ·tanh.
//! Gradients cross the discrete bottleneck via straight-through: the decoder
//! trains the encoder, while the codebook moves only under its own loss term.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::rc::Rc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{step_rng, stream_rng};
use crate::shape::TsdfGrid;
use crate::tensor::{lr_decay_factor, Binding, ParamStore, Scalar, Tape, Tensor, Var};

pub const CODEC_GROUP: &str = "codec";

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("bad codec config: {0}")]
    BadConfig(String),
    #[error("grid resolution {got} does not match codec resolution {expected}")]
    GridMismatch { expected: usize, got: usize },
    #[error("codec training needs at least 32 grids, got {0}")]
    DatasetTooSmall(usize),
    #[error(
        "non-finite loss at step {step}: recon {recon}, codebook {codebook}, commitment {commitment}"
    )]
    NonFinite {
        step: u64,
        recon: f64,
        codebook: f64,
        commitment: f64,
    },
    #[error("index {index} out of range for codebook of {codebook} entries")]
    UnknownCode { index: usize, codebook: usize },
    #[error("index grid i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed index grid: {0}")]
    Malformed(String),
}

/// Architecture and quantization sizes. `patch * latent_g() == grid_res` by
/// construction; the codebook is `codebook_size × code_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub grid_res: usize,
    /// Patch edge length p; must be even so the encoder's first stride-2
    /// stage tiles it exactly.
    pub patch: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    /// Channels after the first (stride-2) encoder stage.
    pub stage_ch: usize,
    /// Width of the decoder's cross-patch mixing stage.
    pub hidden: usize,
    /// Commitment weight β.
    pub beta: f64,
    /// SDF clamp τ; decoder outputs lie strictly inside (−τ, τ).
    pub truncation: f64,
}

impl CodecConfig {
    /// Desk-scale default: 32³ grids, 8³ patches, 4³ latents, 64×32 codebook.
    pub fn toy() -> Self {
        Self {
            grid_res: 32,
            patch: 8,
            codebook_size: 64,
            code_dim: 32,
            stage_ch: 16,
            hidden: 128,
            beta: 0.25,
            truncation: 2.5 / 32.0,
        }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let bad = |m: String| Err(CodecError::BadConfig(m));
        if self.patch < 2 || self.patch % 2 != 0 {
            return bad(format!("patch {} must be even and >= 2", self.patch));
        }
        if self.grid_res == 0 || self.grid_res % self.patch != 0 {
            return bad(format!(
                "grid_res {} not a multiple of patch {}",
                self.grid_res, self.patch
            ));
        }
        if self.codebook_size == 0 || self.codebook_size > usize::from(u16::MAX) {
            return bad(format!("codebook_size {} out of range", self.codebook_size));
        }
        if self.code_dim == 0 || self.stage_ch == 0 || self.hidden == 0 {
            return bad("zero-width layer".into());
        }
        if !(self.truncation > 0.0) {
            return bad(format!("truncation {} must be positive", self.truncation));
        }
        if !(self.beta >= 0.0) {
            return bad(format!("beta {} must be non-negative", self.beta));
        }
        Ok(())
    }

    /// Latent grid edge g.
    pub fn latent_g(&self) -> usize {
        self.grid_res / self.patch
    }

    /// Number of patches N = g³, one latent per patch.
    pub fn cells(&self) -> usize {
        self.latent_g().pow(3)
    }

    /// Subcubes per patch axis in the stride-2 encoder stage.
    fn sub(&self) -> usize {
        self.patch / 2
    }
}

/// Quantized latent indices on the g³ grid, x-fastest like the voxel grids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexGrid {
    pub g: usize,
    pub indices: Vec<u16>,
}

/// Precomputed gather index vectors for one batch size. The tape's gather op
/// takes flat element indices, so all patch/subcube/neighbor bookkeeping is
/// frozen here once and shared across steps via `Rc`.
pub struct BatchIndices {
    pub batch: usize,
    /// (B·N·s³, 8) rows of stride-2 subcubes, gathered straight from (B, R³).
    enc_gather: Rc<Vec<usize>>,
    /// (B·N, 27·D) rows of 3³ latent neighborhoods; out-of-range neighbors
    /// point at a zero row appended after the B·N code rows.
    neighbor: Rc<Vec<usize>>,
    /// (B, R³) elements gathered back from the decoder's (B·N·s³, 8) output.
    scatter: Rc<Vec<usize>>,
}

impl BatchIndices {
    pub fn new(cfg: &CodecConfig, batch: usize) -> Self {
        let (r, p, g) = (cfg.grid_res, cfg.patch, cfg.latent_g());
        let (n, s, d) = (cfg.cells(), cfg.sub(), cfg.code_dim);
        let r3 = r * r * r;

        // Voxel of batch b, patch (px,py,pz), subcube (cx,cy,cz), corner
        // (ui,uj,uk): axis coordinate = patch*p + subcube*2 + corner.
        let mut enc_gather = Vec::with_capacity(batch * r3);
        for b in 0..batch {
            for pz in 0..g {
                for py in 0..g {
                    for px in 0..g {
                        for cz in 0..s {
                            for cy in 0..s {
                                for cx in 0..s {
                                    for uk in 0..2 {
                                        for uj in 0..2 {
                                            for ui in 0..2 {
                                                let i = px * p + cx * 2 + ui;
                                                let j = py * p + cy * 2 + uj;
                                                let k = pz * p + cz * 2 + uk;
                                                enc_gather.push(b * r3 + i + r * (j + r * k));
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        // Neighbor rows in dx-fastest order; the zero row sits at index B·N.
        let zero_row = batch * n;
        let mut neighbor = Vec::with_capacity(batch * n * 27 * d);
        for b in 0..batch {
            for pz in 0..g as i64 {
                for py in 0..g as i64 {
                    for px in 0..g as i64 {
                        for dz in -1i64..=1 {
                            for dy in -1i64..=1 {
                                for dx in -1i64..=1 {
                                    let (qx, qy, qz) = (px + dx, py + dy, pz + dz);
                                    let inside = (0..g as i64).contains(&qx)
                                        && (0..g as i64).contains(&qy)
                                        && (0..g as i64).contains(&qz);
                                    let row = if inside {
                                        b * n + (qx + g as i64 * (qy + g as i64 * qz)) as usize
                                    } else {
                                        zero_row
                                    };
                                    for e in 0..d {
                                        neighbor.push(row * d + e);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        // Inverse of enc_gather's layout: element for voxel (i,j,k) of batch b
        // lives at row (b·N + patch)·s³ + subcube, column corner.
        let mut scatter = Vec::with_capacity(batch * r3);
        for b in 0..batch {
            for k in 0..r {
                for j in 0..r {
                    for i in 0..r {
                        let (px, py, pz) = (i / p, j / p, k / p);
                        let (oi, oj, ok) = (i % p, j % p, k % p);
                        let (cx, cy, cz) = (oi / 2, oj / 2, ok / 2);
                        let (ui, uj, uk) = (oi % 2, oj % 2, ok % 2);
                        let patch = px + g * (py + g * pz);
                        let cube = cx + s * (cy + s * cz);
                        let corner = ui + 2 * (uj + 2 * uk);
                        scatter.push(((b * n + patch) * s * s * s + cube) * 8 + corner);
                    }
                }
            }
        }

        Self {
            batch,
            enc_gather: Rc::new(enc_gather),
            neighbor: Rc::new(neighbor),
            scatter: Rc::new(scatter),
        }
    }
}

/// Tape handles for the codec's parameters, independent of where they came
/// from so gradient checks can substitute raw leaves for store bindings.
#[derive(Clone, Copy)]
pub struct CodecVars {
    pub enc1_w: Var,
    pub enc1_b: Var,
    pub enc2_w: Var,
    pub enc2_b: Var,
    pub book: Var,
    pub mix_w: Var,
    pub mix_b: Var,
    pub dec2_w: Var,
    pub dec2_b: Var,
    pub dec1_w: Var,
    pub dec1_b: Var,
}

pub const CODEC_PARAM_NAMES: [&str; 11] = [
    "enc1_w", "enc1_b", "enc2_w", "enc2_b", "book", "mix_w", "mix_b", "dec2_w", "dec2_b",
    "dec1_w", "dec1_b",
];

impl CodecVars {
    pub fn from_binding(bind: &Binding) -> Self {
        let v = |n: &str| bind.var(&format!("{CODEC_GROUP}.{n}"));
        Self {
            enc1_w: v("enc1_w"),
            enc1_b: v("enc1_b"),
            enc2_w: v("enc2_w"),
            enc2_b: v("enc2_b"),
            book: v("book"),
            mix_w: v("mix_w"),
            mix_b: v("mix_b"),
            dec2_w: v("dec2_w"),
            dec2_b: v("dec2_b"),
            dec1_w: v("dec1_w"),
            dec1_b: v("dec1_b"),
        }
    }

    pub fn from_slice(vars: &[Var]) -> Self {
        assert_eq!(vars.len(), CODEC_PARAM_NAMES.len());
        Self {
            enc1_w: vars[0],
            enc1_b: vars[1],
            enc2_w: vars[2],
            enc2_b: vars[3],
            book: vars[4],
            mix_w: vars[5],
            mix_b: vars[6],
            dec2_w: vars[7],
            dec2_b: vars[8],
            dec1_w: vars[9],
            dec1_b: vars[10],
        }
    }
}

/// Parameter shapes in `CODEC_PARAM_NAMES` order.
pub fn codec_param_shapes(cfg: &CodecConfig) -> Vec<Vec<usize>> {
    let s3 = cfg.sub().pow(3);
    let (c, d, h, k) = (cfg.stage_ch, cfg.code_dim, cfg.hidden, cfg.codebook_size);
    vec![
        vec![8, c],
        vec![c],
        vec![s3 * c, d],
        vec![d],
        vec![k, d],
        vec![27 * d, h],
        vec![h],
        vec![h, s3 * c],
        vec![s3 * c],
        vec![c, 8],
        vec![8],
    ]
}

/// Registers the codec parameter group. Weights start uniform ±1/√fan_in,
/// biases zero, and the codebook uniform(−1/K, 1/K).
pub fn init_codec_params<T: Scalar>(store: &mut ParamStore<T>, cfg: &CodecConfig, seed: u64) {
    store.add_group(CODEC_GROUP, 1e-3);
    let shapes = codec_param_shapes(cfg);
    for (name, shape) in CODEC_PARAM_NAMES.iter().zip(&shapes) {
        let value = if name.ends_with("_b") {
            Tensor::zeros(shape)
        } else {
            let span = if *name == "book" {
                1.0 / cfg.codebook_size as f64
            } else {
                1.0 / (shape[0] as f64).sqrt()
            };
            let mut rng = stream_rng(seed, &format!("codec-init/{name}"));
            Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-span..span)))
        };
        store.add_param(CODEC_GROUP, name, value);
    }
}

/// Stacks raw TSDF values into a (B, R³) tensor, batch rows in call order.
pub fn batch_tensor<T: Scalar>(
    cfg: &CodecConfig,
    grids: &[&TsdfGrid],
) -> Result<Tensor<T>, CodecError> {
    let r3 = cfg.grid_res.pow(3);
    let mut data = Vec::with_capacity(grids.len() * r3);
    for grid in grids {
        if grid.resolution != cfg.grid_res {
            return Err(CodecError::GridMismatch {
                expected: cfg.grid_res,
                got: grid.resolution,
            });
        }
        data.extend(grid.values.iter().map(|&v| T::from_f64(f64::from(v))));
    }
    Ok(Tensor::new(&[grids.len(), r3], data))
}

/// Encodes every patch independently: (B, R³) raw SDF values → (B·N, D)
/// latent rows in patch raster order. Values are scaled to truncation units
/// so layer activations are O(1) regardless of τ.
pub fn encode_patches<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &CodecVars,
    cfg: &CodecConfig,
    ix: &BatchIndices,
    input: Var,
) -> Var {
    let rows = ix.batch * cfg.cells();
    let s3 = cfg.sub().pow(3);
    let x = tape.scale(input, 1.0 / cfg.truncation);
    let cubes = tape.gather_flat(x, Rc::clone(&ix.enc_gather), &[rows * s3, 8]);
    let h1 = tape.matmul(cubes, vars.enc1_w);
    let h1 = tape.add_suffix(h1, vars.enc1_b);
    let h1 = tape.gelu(h1);
    let h1 = tape.reshape(h1, &[rows, s3 * cfg.stage_ch]);
    let e = tape.matmul(h1, vars.enc2_w);
    tape.add_suffix(e, vars.enc2_b)
}

/// Index of the L2-nearest codebook row, ties to the lowest index. Scans
/// entries in ascending order with running-sum early exit; the partial sums
/// it does compute follow the same accumulation order as an exhaustive scan,
/// so the winning index is bitwise identical to brute force.
pub fn nearest_code<T: Scalar>(book: &Tensor<T>, v: &[T]) -> usize {
    let k = book.shape()[0];
    let d = book.shape()[1];
    assert_eq!(v.len(), d, "latent dimension mismatch");
    assert!(k > 0, "empty codebook");
    let mut best = T::from_f64(f64::INFINITY);
    let mut arg = 0usize;
    for row in 0..k {
        let entry = book.row(row);
        let mut dist = T::zero();
        let mut alive = true;
        for (a, b) in v.iter().zip(entry) {
            let diff = *a - *b;
            dist = dist + diff * diff;
            if !(dist < best) {
                alive = false;
                break;
            }
        }
        if alive && dist < best {
            best = dist;
            arg = row;
        }
    }
    arg
}

/// Nearest codebook index per latent row.
pub fn quantize<T: Scalar>(book: &Tensor<T>, latents: &Tensor<T>) -> Vec<usize> {
    assert_eq!(book.shape()[1], latents.shape()[1], "code_dim mismatch");
    (0..latents.shape()[0])
        .map(|i| nearest_code(book, latents.row(i)))
        .collect()
}

/// Decodes (B·N, D) code rows jointly into a (B, R³) grid. One 3³ latent
/// neighborhood mixing stage makes the decoder genuinely joint; the output
/// passes through τ·tanh so every voxel respects the SDF clamp.
pub fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &CodecVars,
    cfg: &CodecConfig,
    ix: &BatchIndices,
    codes: Var,
) -> Var {
    let rows = ix.batch * cfg.cells();
    let s3 = cfg.sub().pow(3);
    let d = cfg.code_dim;
    let zero = tape.constant(Tensor::zeros(&[1, d]));
    let padded = tape.concat(&[codes, zero], 0);
    let hood = tape.gather_flat(padded, Rc::clone(&ix.neighbor), &[rows, 27 * d]);
    let h = tape.matmul(hood, vars.mix_w);
    let h = tape.add_suffix(h, vars.mix_b);
    let h = tape.gelu(h);
    let h = tape.matmul(h, vars.dec2_w);
    let h = tape.add_suffix(h, vars.dec2_b);
    let h = tape.gelu(h);
    let h = tape.reshape(h, &[rows * s3, cfg.stage_ch]);
    let h = tape.matmul(h, vars.dec1_w);
    let h = tape.add_suffix(h, vars.dec1_b);
    let r3 = cfg.grid_res.pow(3);
    let grid = tape.gather_flat(h, Rc::clone(&ix.scatter), &[ix.batch, r3]);
    let grid = tape.tanh(grid);
    tape.scale(grid, cfg.truncation)
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
}

/// The three training terms and their sum. Stop-gradient wiring follows the
/// usual split: the codebook term moves only the codebook, the commitment
/// term only the encoder, and β scales commitment (β = 0 removes exactly
/// that component).
pub struct CodecLoss {
    pub total: Var,
    pub recon: Var,
    pub codebook: Var,
    pub commitment: Var,
}

impl CodecLoss {
    pub fn parts<T: Scalar>(&self, tape: &Tape<T>) -> LossParts {
        LossParts {
            total: tape.value(self.total).item().to_f64(),
            recon: tape.value(self.recon).item().to_f64(),
            codebook: tape.value(self.codebook).item().to_f64(),
            commitment: tape.value(self.commitment).item().to_f64(),
        }
    }
}

pub fn codec_loss<T: Scalar>(
    tape: &mut Tape<T>,
    input: Var,
    recon: Var,
    latents: Var,
    quantized: Var,
    beta: f64,
) -> CodecLoss {
    let recon_term = tape.mean_sq_diff(recon, input);
    let sg_e = tape.stop_grad(latents);
    let codebook_term = tape.mean_sq_diff(sg_e, quantized);
    let sg_q = tape.stop_grad(quantized);
    let raw_commit = tape.mean_sq_diff(latents, sg_q);
    let commitment_term = tape.scale(raw_commit, beta);
    let partial = tape.add(recon_term, codebook_term);
    let total = tape.add(partial, commitment_term);
    CodecLoss {
        total,
        recon: recon_term,
        codebook: codebook_term,
        commitment: commitment_term,
    }
}

/// One full training-step graph: encode, quantize, straight-through decode,
/// three-part loss.
pub struct CodecForward {
    pub input: Var,
    pub latents: Var,
    pub ids: Vec<usize>,
    pub quantized: Var,
    pub recon: Var,
    pub loss: CodecLoss,
    pub parts: LossParts,
}

pub fn codec_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &CodecVars,
    cfg: &CodecConfig,
    ix: &BatchIndices,
    batch: Tensor<T>,
) -> CodecForward {
    let input = tape.constant(batch);
    let latents = encode_patches(tape, vars, cfg, ix, input);
    let ids = quantize(tape.value(vars.book), tape.value(latents));
    let quantized = tape.embedding(vars.book, &ids);
    // Forward the quantized values, backpropagate into the encoder.
    let st = tape.straight_through(tape.value(quantized).clone(), latents);
    let recon = decode(tape, vars, cfg, ix, st);
    let loss = codec_loss(tape, input, recon, latents, quantized, cfg.beta);
    let parts = loss.parts(tape);
    CodecForward {
        input,
        latents,
        ids,
        quantized,
        recon,
        loss,
        parts,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossRecord {
    pub step: u64,
    pub total: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
}

#[derive(Debug, Clone)]
pub struct CodecTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub decay_every: u64,
    pub seed: u64,
    /// Codebook entries unused for this many steps are re-seeded from random
    /// encoder outputs of the current batch. Zero disables restarts.
    pub restart_after: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 10,
            lr: 1e-3,
            decay_every: 1000,
            seed: 0,
            restart_after: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CodecTrainReport {
    pub curve: Vec<LossRecord>,
    pub restarts: usize,
    /// Fraction of codebook entries selected at least once when encoding the
    /// whole training set with the final parameters.
    pub codebook_usage: f64,
}

/// Minibatch Adam over the three-part objective with step-decayed learning
/// rate. Aborts with component diagnostics the moment any loss term goes
/// non-finite, leaving the parameters at their last finite state.
pub fn train_codec<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &CodecConfig,
    tcfg: &CodecTrainConfig,
    dataset: &[TsdfGrid],
) -> Result<CodecTrainReport, CodecError> {
    cfg.validate()?;
    if dataset.len() < 32 {
        return Err(CodecError::DatasetTooSmall(dataset.len()));
    }
    store.set_lr(CODEC_GROUP, tcfg.lr);
    let ix = BatchIndices::new(cfg, tcfg.batch);
    let k = cfg.codebook_size;
    let mut last_used = vec![0u64; k];
    let mut restarts = 0usize;
    let mut curve = Vec::with_capacity(tcfg.steps as usize);

    for step in 0..tcfg.steps {
        let mut rng = step_rng(tcfg.seed, "codec/batch", step);
        let picks: Vec<&TsdfGrid> = (0..tcfg.batch)
            .map(|_| &dataset[rng.gen_range(0..dataset.len())])
            .collect();
        let batch = batch_tensor(cfg, &picks)?;

        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let vars = CodecVars::from_binding(&bind);
        let fwd = codec_forward(&mut tape, &vars, cfg, &ix, batch);
        if !fwd.parts.total.is_finite() {
            return Err(CodecError::NonFinite {
                step,
                recon: fwd.parts.recon,
                codebook: fwd.parts.codebook,
                commitment: fwd.parts.commitment,
            });
        }
        let grads = tape.backward(fwd.loss.total);
        store.adam_step(&bind, &grads, lr_decay_factor(step, tcfg.decay_every));

        for &id in &fwd.ids {
            last_used[id] = step;
        }
        if tcfg.restart_after > 0 {
            let dead: Vec<usize> = (0..k)
                .filter(|&e| step - last_used[e] >= tcfg.restart_after)
                .collect();
            if !dead.is_empty() {
                let latents = tape.value(fwd.latents).clone();
                let rows = latents.shape()[0];
                let d = cfg.code_dim;
                let mut rrng = step_rng(tcfg.seed, "codec/restart", step);
                let book = store.param_mut(CODEC_GROUP, "book");
                for &e in &dead {
                    let src = rrng.gen_range(0..rows);
                    for c in 0..d {
                        book.value.data_mut()[e * d + c] = latents.row(src)[c];
                        book.m.data_mut()[e * d + c] = T::zero();
                        book.v.data_mut()[e * d + c] = T::zero();
                    }
                    last_used[e] = step;
                    restarts += 1;
                }
            }
        }

        curve.push(LossRecord {
            step,
            total: fwd.parts.total,
            recon: fwd.parts.recon,
            codebook: fwd.parts.codebook,
            commitment: fwd.parts.commitment,
        });
    }

    let hist = codebook_histogram(store, cfg, dataset)?;
    let used = hist.iter().filter(|&&c| c > 0).count();
    Ok(CodecTrainReport {
        curve,
        restarts,
        codebook_usage: used as f64 / k as f64,
    })
}

/// How often each codebook entry is selected when encoding `dataset`.
pub fn codebook_histogram<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &CodecConfig,
    dataset: &[TsdfGrid],
) -> Result<Vec<u32>, CodecError> {
    let mut hist = vec![0u32; cfg.codebook_size];
    for grid in dataset {
        let ig = encode_grid(store, cfg, grid)?;
        for &id in &ig.indices {
            hist[usize::from(id)] += 1;
        }
    }
    Ok(hist)
}

/// Minimum pairwise L2 distance between codebook entries; positive means no
/// two entries have collapsed onto each other.
pub fn min_pairwise_distance<T: Scalar>(book: &Tensor<T>) -> f64 {
    let k = book.shape()[0];
    let mut best = f64::INFINITY;
    for a in 0..k {
        for b in a + 1..k {
            let d: f64 = book
                .row(a)
                .iter()
                .zip(book.row(b))
                .map(|(&x, &y)| (x.to_f64() - y.to_f64()).powi(2))
                .sum();
            best = best.min(d.sqrt());
        }
    }
    best
}

/// Encode one grid to its quantized index grid.
pub fn encode_grid<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &CodecConfig,
    grid: &TsdfGrid,
) -> Result<IndexGrid, CodecError> {
    let batch = batch_tensor::<T>(cfg, &[grid])?;
    let ix = BatchIndices::new(cfg, 1);
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let vars = CodecVars::from_binding(&bind);
    let input = tape.constant(batch);
    let latents = encode_patches(&mut tape, &vars, cfg, &ix, input);
    let ids = quantize(tape.value(vars.book), tape.value(latents));
    Ok(IndexGrid {
        g: cfg.latent_g(),
        indices: ids.into_iter().map(|i| i as u16).collect(),
    })
}

/// Decode a quantized index grid back to a TSDF grid over the canonical cube.
pub fn decode_index_grid<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &CodecConfig,
    ig: &IndexGrid,
) -> Result<TsdfGrid, CodecError> {
    if ig.g != cfg.latent_g() || ig.indices.len() != cfg.cells() {
        return Err(CodecError::Malformed(format!(
            "index grid g={} len={} does not match codec g={}",
            ig.g,
            ig.indices.len(),
            cfg.latent_g()
        )));
    }
    let mut ids = Vec::with_capacity(ig.indices.len());
    for &i in &ig.indices {
        let i = usize::from(i);
        if i >= cfg.codebook_size {
            return Err(CodecError::UnknownCode {
                index: i,
                codebook: cfg.codebook_size,
            });
        }
        ids.push(i);
    }
    let ix = BatchIndices::new(cfg, 1);
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let vars = CodecVars::from_binding(&bind);
    let codes = tape.embedding(vars.book, &ids);
    let out = decode(&mut tape, &vars, cfg, &ix, codes);
    let r = cfg.grid_res;
    let vs = 1.0 / r as f32;
    Ok(TsdfGrid {
        resolution: r,
        truncation: cfg.truncation as f32,
        voxel_size: vs,
        origin: Vector3::repeat(-0.5 + vs * 0.5),
        values: tape.value(out).data().iter().map(|v| v.to_f64() as f32).collect(),
    })
}

/// encode → quantize → decode round trip for reconstruction quality checks.
pub fn reconstruct_grid<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &CodecConfig,
    grid: &TsdfGrid,
) -> Result<TsdfGrid, CodecError> {
    let ig = encode_grid(store, cfg, grid)?;
    decode_index_grid(store, cfg, &ig)
}

const IDXG_MAGIC: &[u8; 4] = b"IDXG";

/// Little-endian binary layout: magic "IDXG", u32 g, then g³ u16 indices
/// x-fastest.
pub fn write_index_grid(path: &Path, ig: &IndexGrid) -> Result<(), CodecError> {
    if ig.indices.len() != ig.g.pow(3) {
        return Err(CodecError::Malformed(format!(
            "index grid claims g={} but holds {} cells",
            ig.g,
            ig.indices.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(IDXG_MAGIC)?;
    w.write_u32::<LittleEndian>(ig.g as u32)?;
    for &i in &ig.indices {
        w.write_u16::<LittleEndian>(i)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_index_grid(path: &Path) -> Result<IndexGrid, CodecError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != IDXG_MAGIC {
        return Err(CodecError::Malformed("bad IDXG magic".into()));
    }
    let g = r.read_u32::<LittleEndian>()? as usize;
    if g == 0 || g > 256 {
        return Err(CodecError::Malformed(format!("implausible g {g}")));
    }
    let mut indices = vec![0u16; g * g * g];
    for v in indices.iter_mut() {
        *v = r.read_u16::<LittleEndian>()?;
    }
    Ok(IndexGrid { g, indices })
}
