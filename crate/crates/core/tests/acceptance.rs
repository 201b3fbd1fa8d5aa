//! Acceptance gate: twelve measurable properties of the whole system, from
//! gradient correctness up to two-run byte-identical pipelines. Each
//! criterion prints one PASS/FAIL line (run with `--nocapture` to watch);
//! the test fails at the end if any criterion failed. Several criteria share
//! one default-scale training run so the suite stays inside its time budgets.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use nalgebra::Vector3;
use rand::Rng;

use ambishape::codec::{nearest_code, quantize, CodecConfig, CodecTrainConfig, IndexGrid};
use ambishape::metrics::{chamfer_bidirectional, chamfer_oneway, fscore, tmd};
use ambishape::pipeline::{
    cmd_dataset, cmd_eval, cmd_finetune, cmd_train_codec, cmd_train_prior, RunConfig,
};
use ambishape::prior::{
    encode_image, forward_step, forward_train, init_prior_params, prior_param_specs, PriorConfig,
};
use ambishape::render::{
    make_occlusion_scene, make_truncation_scene, raycast, RenderProfile, RenderedImage, SceneSpec,
    TruncationMode,
};
use ambishape::rng::{derive_seed, stream_rng};
use ambishape::shape::{generate_corpus, voxelize, ShapeSpec, TsdfGrid};
use ambishape::tensor::{grad_check, AdamConfig, ParamStore, Tape, Tensor, Var};

const SEED: u64 = 20260814;

struct Gate {
    failures: Vec<String>,
    deviations: Vec<String>,
}

impl Gate {
    fn new() -> Self {
        Self {
            failures: Vec::new(),
            deviations: Vec::new(),
        }
    }

    fn check(&mut self, id: u32, ok: bool, detail: String) {
        let verdict = if ok { "PASS" } else { "FAIL" };
        println!("criterion {id:02}: {verdict} {detail}");
        if !ok {
            self.failures.push(format!("criterion {id:02}: {detail}"));
        }
    }

    /// Criterion 10 reports rather than hard-fails when its trend inverts.
    fn report(&mut self, id: u32, ok: bool, detail: String) {
        let verdict = if ok { "PASS" } else { "DEVIATION" };
        println!("criterion {id:02}: {verdict} {detail}");
        if !ok {
            self.deviations.push(format!("criterion {id:02}: {detail}"));
        }
    }
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn random_image(size: usize, seed: u64) -> RenderedImage {
    let mut rng = stream_rng(seed, "acc-image");
    let n = size * size;
    let mut ch_mask = vec![0.0f32; n];
    let mut ch_invdepth = vec![0.0f32; n];
    for i in 0..n {
        if rng.gen::<f64>() < 0.5 {
            ch_mask[i] = 1.0;
            ch_invdepth[i] = rng.gen_range(0.05..1.0) as f32;
        }
    }
    RenderedImage {
        width: size,
        height: size,
        ch_mask,
        ch_invdepth,
        part_labels: vec![-1; n],
        depth: vec![f64::INFINITY; n],
    }
}

fn random_index_grid(g: usize, k: usize, seed: u64) -> IndexGrid {
    let mut rng = stream_rng(seed, "acc-grid");
    IndexGrid {
        g,
        indices: (0..g.pow(3)).map(|_| rng.gen_range(0..k) as u16).collect(),
    }
}

// ---------------------------------------------------------------------------
// Criterion 1: finite-difference gradient checks

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn criterion_1(gate: &mut Gate) {
    let t0 = Instant::now();
    let h = 1e-4;
    let mut rng = stream_rng(SEED, "acc-c1");
    let mut worst: (f64, &'static str) = (0.0, "none");
    let mut ops = 0usize;

    // Each case: input shapes plus a graph builder ending in a scalar.
    type Build = Box<dyn FnMut(&mut Tape<f64>, &[Var]) -> Var>;
    let fixed = rand_tensor(&[2, 5], &mut rng);
    let fixed2 = rand_tensor(&[3, 2], &mut rng);
    let cases: Vec<(&'static str, Vec<Vec<usize>>, Build)> = vec![
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| {
            let s = t.add(v[0], v[1]);
            t.mean_all(s)
        })),
        ("add_suffix", vec![vec![2, 3], vec![3]], Box::new(|t, v| {
            let s = t.add_suffix(v[0], v[1]);
            t.mean_all(s)
        })),
        ("sub", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| {
            let s = t.sub(v[0], v[1]);
            t.mean_all(s)
        })),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| {
            let s = t.mul(v[0], v[1]);
            t.sum_all(s)
        })),
        ("neg", vec![vec![2, 3]], Box::new(|t, v| {
            let s = t.neg(v[0]);
            t.mean_all(s)
        })),
        ("scale", vec![vec![2, 3]], Box::new(|t, v| {
            let s = t.scale(v[0], -1.7);
            t.mean_all(s)
        })),
        ("matmul", vec![vec![2, 3], vec![3, 4]], Box::new(|t, v| {
            let s = t.matmul(v[0], v[1]);
            t.sum_all(s)
        })),
        ("matmul_nt", vec![vec![2, 3], vec![4, 3]], Box::new(|t, v| {
            let s = t.matmul_nt(v[0], v[1]);
            t.sum_all(s)
        })),
        ("reshape", vec![vec![2, 6]], Box::new(move |t, v| {
            let r = t.reshape(v[0], &[3, 4]);
            let g = t.gelu(r);
            t.sum_all(g)
        })),
        ("concat", vec![vec![2, 3], vec![2, 3], vec![1, 3]], Box::new(|t, v| {
            let c = t.concat(&v[..3], 0);
            let g = t.tanh(c);
            t.sum_all(g)
        })),
        ("slice", vec![vec![4, 3]], Box::new(|t, v| {
            let s = t.slice(v[0], 0, 1, 2);
            let s2 = t.slice(s, 1, 0, 2);
            t.sum_all(s2)
        })),
        ("gather_flat", vec![vec![4, 3]], Box::new(|t, v| {
            let g = t.gather_flat(v[0], Rc::new(vec![0, 5, 7, 5]), &[4]);
            let s = t.tanh(g);
            t.sum_all(s)
        })),
        ("embedding", vec![vec![5, 4]], Box::new(|t, v| {
            let e = t.embedding(v[0], &[0, 3, 3, 1]);
            let g = t.gelu(e);
            t.sum_all(g)
        })),
        ("softmax_last", vec![vec![2, 5]], Box::new(move |t, v| {
            let s = t.softmax_last(v[0]);
            let w = t.constant(fixed.clone());
            let m = t.mul(s, w);
            t.sum_all(m)
        })),
        ("layer_norm", vec![vec![2, 6], vec![6], vec![6]], Box::new(|t, v| {
            let n = t.layer_norm(v[0], v[1], v[2], 1e-5);
            let g = t.gelu(n);
            t.sum_all(g)
        })),
        ("gelu", vec![vec![2, 3]], Box::new(|t, v| {
            let g = t.gelu(v[0]);
            t.sum_all(g)
        })),
        ("tanh", vec![vec![2, 3]], Box::new(|t, v| {
            let g = t.tanh(v[0]);
            t.sum_all(g)
        })),
        ("cross_entropy_mean", vec![vec![3, 5]], Box::new(|t, v| {
            t.cross_entropy_mean(v[0], &[1, 4, 0])
        })),
        ("mean_sq_diff", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| {
            t.mean_sq_diff(v[0], v[1])
        })),
        ("sum_all", vec![vec![2, 3]], Box::new(move |t, v| {
            let c = t.constant(fixed2.clone());
            let m = t.matmul(v[0], c);
            t.sum_all(m)
        })),
        ("mean_all", vec![vec![2, 3]], Box::new(|t, v| {
            let g = t.gelu(v[0]);
            t.mean_all(g)
        })),
    ];
    for (name, shapes, mut build) in cases {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(s, &mut rng)).collect();
        let rep = grad_check(&inputs, |t, v| build(t, v), h);
        ops += 1;
        if rep.max_rel_err > worst.0 {
            worst = (rep.max_rel_err, name);
        }
        assert!(
            rep.checked > 0,
            "{name}: gradient check compared nothing"
        );
    }

    // Composed: full conditioned forward (image encoder, cross-attention,
    // transformer block, head) with every parameter as a check input.
    let cfg = PriorConfig {
        codebook_size: 6,
        code_dim: 3,
        latent_g: 2,
        model_dim: 8,
        layers: 1,
        heads: 2,
        mlp_ratio: 2,
        fourier_freqs: 1,
        img_size: 8,
        img_patch: 4,
        img_dim: 4,
        img_layers: 1,
        img_heads: 2,
        xattn_dim: 4,
        xattn_heads: 2,
        use_concat: true,
    };
    cfg.validate().unwrap();
    let mut store: ParamStore<f64> = ParamStore::new(AdamConfig::default());
    init_prior_params(&mut store, &cfg, derive_seed(SEED, "c1-init"));
    let names: Vec<String> = prior_param_specs(&cfg).into_iter().map(|(n, _)| n).collect();
    let by_name: BTreeMap<&str, usize> =
        names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let inputs: Vec<Tensor<f64>> = names
        .iter()
        .map(|full| {
            let (g, p) = full.split_once('.').unwrap();
            store.get(g, p).clone()
        })
        .collect();
    let book = {
        let mut r = stream_rng(SEED, "c1-book");
        rand_tensor(&[cfg.codebook_size, cfg.code_dim], &mut r)
    };
    let image = random_image(cfg.img_size, derive_seed(SEED, "c1-img"));
    let gt = random_index_grid(cfg.latent_g, cfg.codebook_size, derive_seed(SEED, "c1-gt"));
    let composed = grad_check(
        &inputs,
        |tape, vars| {
            let look = |name: &str| vars[by_name[name]];
            let book_var = tape.constant(book.clone());
            forward_train(tape, &look, &cfg, book_var, &image, &gt)
                .unwrap()
                .loss
        },
        h,
    );
    let elapsed = secs(t0);
    let ok = worst.0 < 1e-4 && composed.max_rel_err < 1e-4 && elapsed < 120.0;
    gate.check(
        1,
        ok,
        format!(
            "{ops} ops worst rel err {:.2e} ({}), composed forward over {} params rel err {:.2e} ({elapsed:.1}s, budget 120s)",
            worst.0, worst.1, composed.checked, composed.max_rel_err
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: teacher forcing equals sequential decoding; strict causality

fn criterion_2(gate: &mut Gate) {
    let t0 = Instant::now();
    let cfg = PriorConfig {
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
    };
    let mut store: ParamStore<f64> = ParamStore::new(AdamConfig::default());
    init_prior_params(&mut store, &cfg, derive_seed(SEED, "c2-init"));
    let book = {
        let mut r = stream_rng(SEED, "c2-book");
        rand_tensor(&[cfg.codebook_size, cfg.code_dim], &mut r)
    };
    let n = cfg.cells();

    let mut max_diff = 0.0f64;
    let mut causal_ok = true;
    for pair in 0..20u64 {
        let image = random_image(cfg.img_size, derive_seed(SEED, &format!("c2-img/{pair}")));
        let gt = random_index_grid(
            cfg.latent_g,
            cfg.codebook_size,
            derive_seed(SEED, &format!("c2-gt/{pair}")),
        );

        let mut tape: Tape<f64> = Tape::new();
        let bind = store.bind(&mut tape);
        let look = |name: &str| bind.var(name);
        let book_var = tape.constant(book.clone());
        let out = forward_train(&mut tape, &look, &cfg, book_var, &image, &gt).unwrap();
        let parallel = tape.value(out.logits).clone();

        for t in 0..n {
            let mut tape: Tape<f64> = Tape::new();
            let bind = store.bind(&mut tape);
            let look = |name: &str| bind.var(name);
            let book_var = tape.constant(book.clone());
            let tokens = encode_image(&mut tape, &look, &cfg, &image).unwrap();
            let prefix: Vec<usize> = gt.indices[..t].iter().map(|&i| i as usize).collect();
            let step = forward_step(&mut tape, &look, &cfg, book_var, tokens, &prefix).unwrap();
            let seq = tape.value(step);
            for k in 0..cfg.codebook_size {
                let d = (parallel.data()[t * cfg.codebook_size + k] - seq.data()[k]).abs();
                max_diff = max_diff.max(d);
            }
        }

        // Perturb one future cell; logits at and before it must not move.
        let j = 2 + (pair as usize % (n - 3));
        let mut gt2 = gt.clone();
        gt2.indices[j] = (gt2.indices[j] + 1) % cfg.codebook_size as u16;
        let mut tape: Tape<f64> = Tape::new();
        let bind = store.bind(&mut tape);
        let look = |name: &str| bind.var(name);
        let book_var = tape.constant(book.clone());
        let out2 = forward_train(&mut tape, &look, &cfg, book_var, &image, &gt2).unwrap();
        let perturbed = tape.value(out2.logits);
        // Rows 0..=j predict from cells strictly before j, so they must not
        // move at all; row j+1 sees the perturbed cell and must move.
        let past_exact = (0..(j + 1) * cfg.codebook_size)
            .all(|i| perturbed.data()[i] == parallel.data()[i]);
        let future_moved = (0..cfg.codebook_size)
            .any(|k| perturbed.data()[(j + 1) * cfg.codebook_size + k] != parallel.data()[(j + 1) * cfg.codebook_size + k]);
        causal_ok &= past_exact && future_moved;
    }
    let elapsed = secs(t0);
    let ok = max_diff < 1e-5 && causal_ok && elapsed < 60.0;
    gate.check(
        2,
        ok,
        format!(
            "20 pairs, parallel vs sequential max abs diff {max_diff:.2e}, future perturbation left past rows bit-identical: {causal_ok} ({elapsed:.1}s, budget 60s)"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: quantization oracle

fn criterion_3(gate: &mut Gate) {
    let t0 = Instant::now();
    let (k, d) = (64, 32);
    let mut rng = stream_rng(SEED, "acc-c3");
    let book = rand_tensor(&[k, d], &mut rng);
    let latents = rand_tensor(&[1000, d], &mut rng);

    let fast = quantize(&book, &latents);
    let mut scan_ok = true;
    for (i, &got) in fast.iter().enumerate() {
        let v = latents.row(i);
        // Exhaustive scan with no early exit.
        let mut best = (f64::INFINITY, 0usize);
        for row in 0..k {
            let e = book.row(row);
            let dist: f64 = v.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.0 {
                best = (dist, row);
            }
        }
        scan_ok &= got == best.1;
    }
    let idempotent = (0..k).all(|row| nearest_code(&book, book.row(row)) == row)
        && fast
            .iter()
            .all(|&q| nearest_code(&book, book.row(q)) == q);
    let elapsed = secs(t0);
    let ok = scan_ok && idempotent && elapsed < 10.0;
    gate.check(
        3,
        ok,
        format!(
            "1000 vectors vs exhaustive scan equal: {scan_ok}, idempotent: {idempotent} ({elapsed:.2}s, budget 10s)"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: metric oracles

fn brute_oneway(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    let total: f64 = a
        .iter()
        .map(|p| {
            b.iter()
                .map(|q| {
                    let d = p - q;
                    d.x * d.x + d.y * d.y + d.z * d.z
                })
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / a.len() as f64
}

fn brute_fscore(pred: &[Vector3<f64>], gt: &[Vector3<f64>], tau: f64) -> f64 {
    let within = |src: &[Vector3<f64>], dst: &[Vector3<f64>]| {
        src.iter()
            .filter(|p| {
                dst.iter()
                    .map(|q| {
                        let d = *p - q;
                        d.x * d.x + d.y * d.y + d.z * d.z
                    })
                    .fold(f64::INFINITY, f64::min)
                    <= tau * tau
            })
            .count() as f64
            / src.len() as f64
    };
    let (p, r) = (within(pred, gt), within(gt, pred));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn criterion_4(gate: &mut Gate) {
    let t0 = Instant::now();
    let mut rng = stream_rng(SEED, "acc-c4");
    let cloud = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect()
    };
    let mut exact = true;
    for pair in 0..100 {
        // Small sets exercise the brute path, large ones the grid index.
        let (n, m) = if pair % 10 == 0 {
            (rng.gen_range(1..=32), rng.gen_range(1..=32))
        } else {
            (rng.gen_range(33..=512), rng.gen_range(33..=512))
        };
        let (a, b) = (cloud(n, &mut rng), cloud(m, &mut rng));
        let tau = rng.gen_range(0.05..0.6);
        exact &= chamfer_oneway(&a, &b).unwrap() == brute_oneway(&a, &b);
        exact &= chamfer_oneway(&b, &a).unwrap() == brute_oneway(&b, &a);
        exact &= chamfer_bidirectional(&a, &b).unwrap() == brute_oneway(&a, &b) + brute_oneway(&b, &a);
        exact &= fscore(&a, &b, tau).unwrap() == brute_fscore(&a, &b, tau);
    }

    let same = cloud(64, &mut rng);
    let tmd_zero = tmd(&[&same, &same, &same]).unwrap() == 0.0;

    // Hand cases. Chamfer: unit offset gives 1.0 each way, 2.0 total.
    let a = vec![Vector3::new(0.0, 0.0, 0.0)];
    let b = vec![Vector3::new(1.0, 0.0, 0.0)];
    let chamfer_two = chamfer_bidirectional(&a, &b).unwrap() == 2.0;
    // TMD of two hypotheses offset by (1,1,0): squared distance 2 per
    // direction, bidirectional 4, one pair, mean 4.
    let c = vec![Vector3::new(1.0, 1.0, 0.0)];
    let tmd_four = tmd(&[a.as_slice(), c.as_slice()]).unwrap() == 4.0;
    // F-score: one of two predictions within tau, one of two ground truths
    // within tau, precision = recall = 1/2, harmonic mean 1/2.
    let pred = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(10.0, 0.0, 0.0)];
    let gt = vec![Vector3::new(0.25, 0.0, 0.0), Vector3::new(20.0, 0.0, 0.0)];
    let f_half = fscore(&pred, &gt, 0.5).unwrap() == 0.5;

    let elapsed = secs(t0);
    let ok = exact && tmd_zero && chamfer_two && tmd_four && f_half && elapsed < 60.0;
    gate.check(
        4,
        ok,
        format!(
            "100 pairs exact vs brute: {exact}, tmd(identical)=0: {tmd_zero}, hand cases chamfer 2.0 {chamfer_two} / tmd 4.0 {tmd_four} / F 0.5 {f_half} ({elapsed:.1}s, budget 60s)"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: occlusion and truncation scene contracts

fn occluded_fraction_measured(scene: &SceneSpec) -> f64 {
    let with = raycast(scene).target_pixel_count() as f64;
    let mut bare = scene.clone();
    bare.occluder = None;
    let without = raycast(&bare).target_pixel_count() as f64;
    if without == 0.0 {
        return 1.0;
    }
    1.0 - (with / without).min(1.0)
}

fn min_separation_sampled(scene: &SceneSpec, seed: u64) -> f64 {
    let n = 512;
    let mut r1 = stream_rng(seed, "sep-target");
    let mut r2 = stream_rng(seed, "sep-occluder");
    let target: Vec<Vector3<f64>> = scene
        .target
        .sample_analytic_surface(n, &mut r1)
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let occ_spec = scene.occluder.as_ref().unwrap().world_spec();
    let occ: Vec<Vector3<f64>> = occ_spec
        .sample_analytic_surface(n, &mut r2)
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let mut best = f64::INFINITY;
    for p in &target {
        for q in &occ {
            best = best.min((p - q).norm());
        }
    }
    best
}

/// Silhouette cut fraction measured from scratch: render the same scene into
/// a frame twice as wide and tall (principal point shifted to keep the
/// original view centered) and compare target pixel counts.
fn truncation_fraction_measured(scene: &SceneSpec) -> f64 {
    let mut wide = scene.clone();
    wide.camera.width = scene.camera.width * 2;
    wide.camera.height = scene.camera.height * 2;
    wide.camera.principal = (
        scene.camera.principal.0 + scene.camera.width as f64 * 0.5,
        scene.camera.principal.1 + scene.camera.height as f64 * 0.5,
    );
    let full = raycast(&wide).target_pixel_count() as f64;
    let seen = raycast(scene).target_pixel_count() as f64;
    if full == 0.0 {
        return 1.0;
    }
    1.0 - (seen / full).min(1.0)
}

fn mask_on_border(img: &RenderedImage) -> bool {
    let (w, h) = (img.width, img.height);
    let at = |x: usize, y: usize| img.ch_mask[y * w + x] == 1.0;
    (0..w).any(|x| at(x, 0) || at(x, h - 1)) || (0..h).any(|y| at(0, y) || at(w - 1, y))
}

fn criterion_5(gate: &mut Gate) {
    let t0 = Instant::now();
    let corpus = generate_corpus(derive_seed(SEED, "c5-corpus"), 8);

    let mut occ_ok = 0usize;
    let mut occ_frac_range = (f64::INFINITY, f64::NEG_INFINITY);
    let mut occ_sep_min = f64::INFINITY;
    let mut tries = 0u64;
    let mut built = 0usize;
    while built < 100 {
        let target = &corpus[(tries as usize) % corpus.len()];
        let pool: Vec<ShapeSpec> = corpus
            .iter()
            .filter(|s| s.shape_id != target.shape_id)
            .cloned()
            .collect();
        let seed = derive_seed(SEED, &format!("c5-occ/{tries}"));
        tries += 1;
        let scene = match make_occlusion_scene(seed, target, &pool) {
            Ok(s) => s,
            Err(_) => continue,
        };
        built += 1;
        let frac = occluded_fraction_measured(&scene);
        let sep = min_separation_sampled(&scene, derive_seed(SEED, &format!("c5-sep/{built}")));
        occ_frac_range = (occ_frac_range.0.min(frac), occ_frac_range.1.max(frac));
        occ_sep_min = occ_sep_min.min(sep);
        if (0.2..=0.6).contains(&frac) && sep > 0.02 {
            occ_ok += 1;
        }
    }

    let mut trunc_ok = 0usize;
    let mut trunc_frac_range = (f64::INFINITY, f64::NEG_INFINITY);
    let mut borders = 0usize;
    tries = 0;
    built = 0;
    while built < 100 {
        let target = &corpus[(tries as usize) % corpus.len()];
        let mode = if built % 2 == 0 {
            TruncationMode::Offset
        } else {
            TruncationMode::Closeup
        };
        let seed = derive_seed(SEED, &format!("c5-trunc/{tries}"));
        tries += 1;
        let scene = match make_truncation_scene(seed, target, mode) {
            Ok(s) => s,
            Err(_) => continue,
        };
        built += 1;
        let frac = truncation_fraction_measured(&scene);
        let border = mask_on_border(&raycast(&scene));
        trunc_frac_range = (trunc_frac_range.0.min(frac), trunc_frac_range.1.max(frac));
        borders += usize::from(border);
        if border && (0.2..=0.6).contains(&frac) {
            trunc_ok += 1;
        }
    }

    let elapsed = secs(t0);
    let ok = occ_ok == 100 && trunc_ok == 100 && elapsed < 300.0;
    gate.check(
        5,
        ok,
        format!(
            "occlusion {occ_ok}/100 in band (frac {:.3}..{:.3}, min separation {occ_sep_min:.3}), truncation {trunc_ok}/100 (frac {:.3}..{:.3}, border {borders}/100) ({elapsed:.1}s, budget 300s)",
            occ_frac_range.0, occ_frac_range.1, trunc_frac_range.0, trunc_frac_range.1
        ),
    );
}

// ---------------------------------------------------------------------------
// Criteria 6 through 12 share one default-scale run directory.

fn base_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = SEED;
    cfg.out_dir = root.to_path_buf();
    cfg.eval.max_scenes = 56;
    cfg
}

fn criterion_6(gate: &mut Gate, cfg: &RunConfig, elapsed_dataset: f64) {
    let t0 = Instant::now();
    let mapping = ambishape::hypomap::read_mapping(&cfg.out_dir.join("mapping.ron")).unwrap();
    let mut self_included = true;
    let mut thresholds_ok = true;
    let mut candidates = 0usize;
    for entry in &mapping.entries {
        self_included &= entry.shape_ids.contains(&entry.target_id);
        for id in &entry.shape_ids {
            let report = entry.reports.iter().find(|r| &r.shape_id == id);
            match report {
                Some(r) => {
                    candidates += 1;
                    thresholds_ok &= r.visible_cd <= 0.04 && r.agreement >= 0.8;
                }
                None => thresholds_ok = false,
            }
        }
    }
    let mean_size = mapping.mean_size();
    let elapsed = elapsed_dataset + secs(t0);
    let ok = self_included
        && thresholds_ok
        && (1.5..=3.0).contains(&mean_size)
        && elapsed < 600.0;
    gate.check(
        6,
        ok,
        format!(
            "{} entries, {candidates} accepted candidates all under thresholds: {thresholds_ok}, self-inclusion: {self_included}, mean size {mean_size:.2} in [1.5, 3.0] ({elapsed:.0}s with dataset build, budget 600s)",
            mapping.entries.len()
        ),
    );
}

fn occupancy_iou(a: &TsdfGrid, b: &TsdfGrid) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.values.iter().zip(&b.values) {
        let (ia, ib) = (*x < 0.0, *y < 0.0);
        inter += usize::from(ia && ib);
        union += usize::from(ia || ib);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn criterion_7(gate: &mut Gate) {
    let t0 = Instant::now();
    let cfg = CodecConfig::toy();
    let corpus = generate_corpus(derive_seed(SEED, "c7-corpus"), 13);
    let grids: Vec<TsdfGrid> = corpus
        .iter()
        .take(64)
        .map(|s| voxelize(s, cfg.grid_res, cfg.truncation).unwrap())
        .collect();
    let mut store: ParamStore<f32> = ParamStore::new(AdamConfig::default());
    ambishape::codec::init_codec_params(&mut store, &cfg, derive_seed(SEED, "c7-init"));
    let tcfg = CodecTrainConfig {
        seed: derive_seed(SEED, "c7-train"),
        ..CodecTrainConfig::default()
    };
    let report = ambishape::codec::train_codec(&mut store, &cfg, &tcfg, &grids).unwrap();
    let ratio = report.curve.last().unwrap().total / report.curve.first().unwrap().total;

    let mut iou_sum = 0.0;
    let mut iou_min = f64::INFINITY;
    for g in &grids {
        let recon = ambishape::codec::reconstruct_grid(&store, &cfg, g).unwrap();
        let iou = occupancy_iou(g, &recon);
        iou_sum += iou;
        iou_min = iou_min.min(iou);
    }
    let iou_mean = iou_sum / grids.len() as f64;
    let elapsed = secs(t0);
    let ok = iou_mean > 0.85 && ratio <= 0.2 && elapsed < 1200.0;
    gate.check(
        7,
        ok,
        format!(
            "5000 steps on 64 shapes: occupancy IoU mean {iou_mean:.3} (min {iou_min:.3}), loss ratio {ratio:.3} ({elapsed:.0}s, budget 1200s)"
        ),
    );
}

struct SeedRun {
    visible_conditioned: f64,
    visible_zero: f64,
    final_val_ce: f64,
}

fn criterion_8(gate: &mut Gate, base: &RunConfig, keep_dir: &Path) -> Vec<SeedRun> {
    let t0 = Instant::now();
    let mut runs = Vec::new();
    for s in 0..3u64 {
        let mut cfg = base.clone();
        cfg.seed = SEED + s;
        let out = cmd_train_prior(&cfg, false).unwrap();
        if s == 0 {
            fs::create_dir_all(keep_dir).unwrap();
            for f in ["checkpoint.ckpt", "checkpoint.ckpt.sha256"] {
                fs::copy(cfg.out_dir.join("prior").join(f), keep_dir.join(f)).unwrap();
            }
        }
        let conditioned = cmd_eval(&cfg, false).unwrap();
        let zero = cmd_eval(&cfg, true).unwrap();
        runs.push(SeedRun {
            visible_conditioned: conditioned.overall.visible_oneway_cd,
            visible_zero: zero.overall.visible_oneway_cd,
            final_val_ce: out.final_val_ce,
        });
    }
    let mean_c = runs.iter().map(|r| r.visible_conditioned).sum::<f64>() / 3.0;
    let mean_z = runs.iter().map(|r| r.visible_zero).sum::<f64>() / 3.0;
    let direction = runs.iter().all(|r| r.visible_conditioned < r.visible_zero);
    let margin = mean_c <= 0.8 * mean_z;
    let elapsed = secs(t0);
    let pairs: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.4}/{:.4}", r.visible_conditioned, r.visible_zero))
        .collect();
    let ok = direction && margin && elapsed < 3600.0;
    gate.check(
        8,
        ok,
        format!(
            "visible one-way CD conditioned/zero per seed [{}], means {mean_c:.4} vs {mean_z:.4} ({:.0}% lower), direction all 3 seeds: {direction} ({elapsed:.0}s, budget 3600s)",
            pairs.join(", "),
            (1.0 - mean_c / mean_z) * 100.0
        ),
    );
    runs
}

fn criterion_9(gate: &mut Gate, base: &RunConfig, full_ce: f64) {
    let t0 = Instant::now();
    let mut cfg = base.clone();
    cfg.seed = SEED;
    cfg.prior.arch.use_concat = false;
    let out = cmd_train_prior(&cfg, false).unwrap();
    let elapsed = secs(t0);
    let ok = out.final_val_ce > full_ce;
    gate.check(
        9,
        ok,
        format!(
            "final val CE without concatenation {:.4} vs full model {full_ce:.4} (same data, seed {SEED}) ({elapsed:.0}s)",
            out.final_val_ce
        ),
    );
}

fn criterion_10(gate: &mut Gate, base: &RunConfig) {
    use ambishape::hypomap::MappingMode;
    let t0 = Instant::now();
    let modes = [MappingMode::None, MappingMode::Strict, MappingMode::Coarse];
    let mut means = [0.0f64; 3];
    for (mi, mode) in modes.iter().enumerate() {
        for s in 0..3u64 {
            let mut cfg = base.clone();
            cfg.seed = SEED + 10 + s;
            cfg.prior.mapping = *mode;
            cfg.prior.steps = 2500;
            cfg.eval.max_scenes = 40;
            cmd_train_prior(&cfg, false).unwrap();
            let report = cmd_eval(&cfg, false).unwrap();
            means[mi] += report.overall.tmd / 3.0;
        }
    }
    let [none, strict, coarse] = means;
    let ordered = coarse >= strict * 0.95 && strict >= none * 0.95;
    let elapsed = secs(t0);
    gate.report(
        10,
        ordered,
        format!(
            "TMD over 3 seeds: coarse {coarse:.4} >= strict {strict:.4} >= none {none:.4} (5% tie tolerance) ({elapsed:.0}s)"
        ),
    );
}

fn criterion_11(gate: &mut Gate, base: &RunConfig, keep_dir: &Path, shifted_root: &Path) {
    let t0 = Instant::now();
    // Shifted-domain dataset, modest scale, same grid resolution.
    let mut shifted = RunConfig::default();
    shifted.seed = SEED + 50;
    shifted.out_dir = shifted_root.to_path_buf();
    shifted.dataset.shapes_per_category = 12;
    shifted.dataset.views_per_shape = 2;
    shifted.dataset.profile = RenderProfile::Shifted;
    cmd_dataset(&shifted).unwrap();

    // Restore the pretrained seed-SEED checkpoint clobbered by later runs.
    for f in ["checkpoint.ckpt", "checkpoint.ckpt.sha256"] {
        fs::copy(keep_dir.join(f), base.out_dir.join("prior").join(f)).unwrap();
    }
    let mut cfg = base.clone();
    cfg.seed = SEED;
    cfg.finetune.shifted_dir = shifted_root.to_path_buf();
    let out = cmd_finetune(&cfg).unwrap();
    let elapsed = secs(t0);
    let ok = out.post_ce < out.scratch_ce && out.frozen_bit_identical && elapsed < 1800.0;
    gate.check(
        11,
        ok,
        format!(
            "shifted val CE pretrained {:.4} -> finetuned {:.4}, from-scratch control {:.4}, frozen groups bit-identical: {} ({elapsed:.0}s, budget 1800s)",
            out.pre_ce, out.post_ce, out.scratch_ce, out.frozen_bit_identical
        ),
    );
}

fn run_reduced_pipeline(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = SEED + 90;
    cfg.out_dir = root.to_path_buf();
    cfg.dataset.shapes_per_category = 10;
    cfg.dataset.views_per_shape = 2;
    cfg.codec.steps = 1200;
    cfg.prior.steps = 1500;
    cfg.prior.val_every = 500;
    cfg.eval.k = 4;
    cmd_dataset(&cfg).unwrap();
    cmd_train_codec(&cfg).unwrap();
    cmd_train_prior(&cfg, false).unwrap();
    cmd_eval(&cfg, false).unwrap();
    cfg
}

fn criterion_12(gate: &mut Gate, scratch: &Path) {
    let t0 = Instant::now();
    let root = scratch.join("repro");
    let compare = [
        "config.resolved.toml",
        "manifest.json",
        "codec/checkpoint.ckpt",
        "codec/loss.csv",
        "prior/checkpoint.ckpt",
        "prior/loss.csv",
        "prior/val.csv",
        "eval/report.json",
        "eval/report.txt",
    ];

    run_reduced_pipeline(&root);
    let keep = scratch.join("repro-first");
    fs::create_dir_all(&keep).unwrap();
    for rel in compare {
        let to = keep.join(rel.replace('/', "_"));
        fs::copy(root.join(rel), to).unwrap();
    }
    fs::remove_dir_all(&root).unwrap();
    run_reduced_pipeline(&root);

    let mut identical = true;
    let mut diffs = Vec::new();
    for rel in compare {
        let first = fs::read(keep.join(rel.replace('/', "_"))).unwrap();
        let second = fs::read(root.join(rel)).unwrap();
        if first != second {
            identical = false;
            diffs.push(rel);
        }
    }
    let elapsed = secs(t0);
    let ok = identical && elapsed < 7200.0;
    gate.check(
        12,
        ok,
        format!(
            "two full pipeline runs, {} artifacts byte-identical: {identical}{} ({elapsed:.0}s, budget 7200s)",
            compare.len(),
            if diffs.is_empty() {
                String::new()
            } else {
                format!(" (diffs: {diffs:?})")
            }
        ),
    );
}

#[test]
fn acceptance_criteria() {
    let scratch = tempfile::tempdir().unwrap();
    let mut gate = Gate::new();

    criterion_1(&mut gate);
    criterion_2(&mut gate);
    criterion_3(&mut gate);
    criterion_4(&mut gate);
    criterion_5(&mut gate);

    // Shared default-scale run: dataset feeds criteria 6 and 8 through 11.
    let main_root = scratch.path().join("main");
    let cfg = base_config(&main_root);
    let t_dataset = Instant::now();
    cmd_dataset(&cfg).unwrap();
    let dataset_secs = secs(t_dataset);
    criterion_6(&mut gate, &cfg, dataset_secs);
    criterion_7(&mut gate);
    cmd_train_codec(&cfg).unwrap();

    let keep_dir = scratch.path().join("pretrained");
    let runs = criterion_8(&mut gate, &cfg, &keep_dir);
    criterion_9(&mut gate, &cfg, runs[0].final_val_ce);
    criterion_10(&mut gate, &cfg);
    criterion_11(&mut gate, &cfg, &keep_dir, &scratch.path().join("shifted"));
    criterion_12(&mut gate, scratch.path());

    for d in &gate.deviations {
        println!("flagged deviation: {d}");
    }
    assert!(
        gate.failures.is_empty(),
        "acceptance failures:\n{}",
        gate.failures.join("\n")
    );
}
