//! Point-set distances (chamfer, F-score, mutual difference) and the
//! scene-level evaluation driver that aggregates them into a report.
//!
//! Chamfer terms use squared euclidean distances throughout; the F-score
//! threshold is unsquared. Nearest neighbors run on a uniform-grid index
//! whose results are bitwise identical to brute force.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::Serialize;
use thiserror::Error;

use crate::render::{raycast, visible_points_from, RenderError, SceneSpec, RenderedImage};
use crate::rng::{derive_seed, stream_rng};
use crate::shape::{surface_points, Category, ShapeError, ShapeSpec, SurfaceSamples, TsdfGrid};

/// Surface samples drawn per shape for every metric in a report.
pub const METRIC_SAMPLE_COUNT: usize = 2048;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty point set: {0}")]
    EmptyPointSet(&'static str),
    #[error("mutual difference needs at least 2 hypotheses, got {0}")]
    TooFewHypotheses(usize),
    #[error("f-score threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("no evaluation cases")]
    NoCases,
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialize: {0}")]
    Serialize(#[from] serde_json::Error),
}

#[inline]
fn dist_sq(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z
}

fn nn_sq_brute(queries: &[Vector3<f64>], refs: &[Vector3<f64>]) -> Vec<f64> {
    queries
        .iter()
        .map(|q| refs.iter().map(|r| dist_sq(q, r)).fold(f64::INFINITY, f64::min))
        .collect()
}

/// Uniform-grid spatial index for exact nearest-neighbor queries.
///
/// Cells are scanned in expanding Chebyshev rings around the query; the scan
/// stops once the block already searched is provably closer than any point
/// outside it, so the returned minimum equals the brute-force minimum exactly
/// (same `dist_sq` per pair, true min over a superset of candidates).
struct NnGrid<'a> {
    refs: &'a [Vector3<f64>],
    lo: Vector3<f64>,
    cell: f64,
    dims: [i64; 3],
    starts: Vec<usize>,
    order: Vec<u32>,
}

impl<'a> NnGrid<'a> {
    fn build(refs: &'a [Vector3<f64>]) -> Self {
        assert!(!refs.is_empty());
        let mut lo = refs[0];
        let mut hi = refs[0];
        for p in refs {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = hi - lo;
        let side = (refs.len() as f64).cbrt().ceil().max(1.0);
        let mut cell = extent.max() / side;
        if !(cell > 0.0) {
            cell = 1.0;
        }
        let dims = [
            (extent.x / cell).floor() as i64 + 1,
            (extent.y / cell).floor() as i64 + 1,
            (extent.z / cell).floor() as i64 + 1,
        ];
        let ncells = (dims[0] * dims[1] * dims[2]) as usize;

        let bin = |p: &Vector3<f64>| -> usize {
            let ix = (((p.x - lo.x) / cell).floor() as i64).clamp(0, dims[0] - 1);
            let iy = (((p.y - lo.y) / cell).floor() as i64).clamp(0, dims[1] - 1);
            let iz = (((p.z - lo.z) / cell).floor() as i64).clamp(0, dims[2] - 1);
            ((iz * dims[1] + iy) * dims[0] + ix) as usize
        };

        let mut counts = vec![0usize; ncells + 1];
        for p in refs {
            counts[bin(p) + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut order = vec![0u32; refs.len()];
        for (i, p) in refs.iter().enumerate() {
            let c = bin(p);
            order[fill[c]] = i as u32;
            fill[c] += 1;
        }
        NnGrid { refs, lo, cell, dims, starts, order }
    }

    fn nearest_sq(&self, q: &Vector3<f64>) -> f64 {
        let cq = [
            (((q.x - self.lo.x) / self.cell).floor() as i64).clamp(0, self.dims[0] - 1),
            (((q.y - self.lo.y) / self.cell).floor() as i64).clamp(0, self.dims[1] - 1),
            (((q.z - self.lo.z) / self.cell).floor() as i64).clamp(0, self.dims[2] - 1),
        ];
        let r_max = (0..3)
            .map(|a| cq[a].max(self.dims[a] - 1 - cq[a]))
            .max()
            .unwrap();

        let mut best = f64::INFINITY;
        for r in 0..=r_max {
            for z in (cq[2] - r).max(0)..=(cq[2] + r).min(self.dims[2] - 1) {
                for y in (cq[1] - r).max(0)..=(cq[1] + r).min(self.dims[1] - 1) {
                    for x in (cq[0] - r).max(0)..=(cq[0] + r).min(self.dims[0] - 1) {
                        let rim = (x - cq[0]).abs().max((y - cq[1]).abs()).max((z - cq[2]).abs());
                        if rim != r {
                            continue;
                        }
                        let c = ((z * self.dims[1] + y) * self.dims[0] + x) as usize;
                        for &i in &self.order[self.starts[c]..self.starts[c + 1]] {
                            best = best.min(dist_sq(q, &self.refs[i as usize]));
                        }
                    }
                }
            }
            if best.is_finite() {
                // Margin from q to the faces of the scanned cell block; any
                // unscanned point is at least this far (the tiny slack absorbs
                // float rounding in the binning, only ever widening the scan).
                let q_arr = [q.x, q.y, q.z];
                let lo_arr = [self.lo.x, self.lo.y, self.lo.z];
                let m = (0..3)
                    .map(|a| {
                        let low = lo_arr[a] + (cq[a] - r) as f64 * self.cell;
                        let high = lo_arr[a] + (cq[a] + r + 1) as f64 * self.cell;
                        (q_arr[a] - low).min(high - q_arr[a])
                    })
                    .fold(f64::INFINITY, f64::min);
                let m_safe = m * (1.0 - 1e-12) - 1e-12;
                if m_safe > 0.0 && best <= m_safe * m_safe {
                    break;
                }
            }
        }
        best
    }
}

/// For each query, the squared distance to its nearest reference point.
/// Exact; accelerated for reference sets large enough to be worth indexing.
fn nn_sq_dists(queries: &[Vector3<f64>], refs: &[Vector3<f64>]) -> Vec<f64> {
    if refs.len() <= 32 {
        nn_sq_brute(queries, refs)
    } else {
        let grid = NnGrid::build(refs);
        queries.iter().map(|q| grid.nearest_sq(q)).collect()
    }
}

/// Mean over `a` of the squared distance to the nearest point of `b`.
/// Empty `b` yields the infinite-distance sentinel.
pub fn chamfer_oneway(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64, MetricsError> {
    if a.is_empty() {
        return Err(MetricsError::EmptyPointSet("chamfer query set"));
    }
    if b.is_empty() {
        return Ok(f64::INFINITY);
    }
    let d = nn_sq_dists(a, b);
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Symmetric chamfer distance: `oneway(a, b) + oneway(b, a)`.
pub fn chamfer_bidirectional(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptyPointSet("chamfer operand"));
    }
    Ok(chamfer_oneway(a, b)? + chamfer_oneway(b, a)?)
}

/// Euclidean diagonal of the axis-aligned bounding box of `points`.
pub fn bbox_diagonal(points: &[Vector3<f64>]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (hi - lo).norm()
}

/// Harmonic mean of precision (fraction of `pred` within `tau` of `gt`) and
/// recall (fraction of `gt` within `tau` of `pred`); `tau` is unsquared.
pub fn fscore(pred: &[Vector3<f64>], gt: &[Vector3<f64>], tau: f64) -> Result<f64, MetricsError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(MetricsError::EmptyPointSet("f-score operand"));
    }
    if !(tau > 0.0) {
        return Err(MetricsError::BadThreshold(tau));
    }
    let tau_sq = tau * tau;
    let within = |d: &[f64]| d.iter().filter(|&&x| x <= tau_sq).count() as f64 / d.len() as f64;
    let precision = within(&nn_sq_dists(pred, gt));
    let recall = within(&nn_sq_dists(gt, pred));
    if precision + recall == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

/// Total mutual difference: mean bidirectional chamfer over all unordered
/// hypothesis pairs. Pair terms are accumulated in sorted order, so the
/// result is bitwise invariant under hypothesis reordering.
pub fn tmd(hypotheses: &[&[Vector3<f64>]]) -> Result<f64, MetricsError> {
    if hypotheses.len() < 2 {
        return Err(MetricsError::TooFewHypotheses(hypotheses.len()));
    }
    let mut pair_values = Vec::new();
    for i in 0..hypotheses.len() {
        for j in i + 1..hypotheses.len() {
            pair_values.push(chamfer_bidirectional(hypotheses[i], hypotheses[j])?);
        }
    }
    pair_values.sort_by(f64::total_cmp);
    Ok(pair_values.iter().sum::<f64>() / pair_values.len() as f64)
}

/// One evaluation scene: the observation plus every ground-truth shape the
/// mapping accepts for it (the rendered target itself always included).
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub scene: SceneSpec,
    pub category: Category,
    pub gt_shapes: Vec<ShapeSpec>,
}

/// Source of shape hypotheses for an observed scene. Implementations return
/// `k` canonical-frame TSDF grids; grids without a zero crossing are counted
/// as degenerate by the evaluator rather than failing the run.
pub trait Hypothesizer {
    fn hypothesize(&mut self, scene: &SceneSpec, image: &RenderedImage, k: usize) -> Vec<TsdfGrid>;
}

#[derive(Debug, Clone, Serialize)]
pub struct SceneRow {
    pub scene_id: String,
    pub category: String,
    pub tmd: f64,
    pub min_cd: f64,
    pub max_fscore: f64,
    pub visible_oneway_cd: f64,
    pub degenerate: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CategoryRow {
    pub name: String,
    pub scenes: usize,
    pub tmd: f64,
    pub min_cd: f64,
    pub max_fscore: f64,
    pub visible_oneway_cd: f64,
}

/// Per-scene, per-category, and overall metric aggregates. The overall row is
/// the unweighted mean of the category rows.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub k: usize,
    pub sample_count: usize,
    pub sample_seed: u64,
    pub config_fingerprint: String,
    pub degenerate_hypotheses: usize,
    pub scenes: Vec<SceneRow>,
    pub categories: Vec<CategoryRow>,
    pub overall: CategoryRow,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    sum / n as f64
}

fn aggregate(name: &str, rows: &[&SceneRow]) -> CategoryRow {
    CategoryRow {
        name: name.to_string(),
        scenes: rows.len(),
        tmd: mean(rows.iter().map(|r| r.tmd)),
        min_cd: mean(rows.iter().map(|r| r.min_cd)),
        max_fscore: mean(rows.iter().map(|r| r.max_fscore)),
        visible_oneway_cd: mean(rows.iter().map(|r| r.visible_oneway_cd)),
    }
}

/// Runs `model` over every case and aggregates. Per scene: `k` hypotheses,
/// chamfer of each taken as the min over the mapped ground truths, F-score as
/// the max; the report keeps the best hypothesis by each criterion, the
/// mutual difference across hypotheses, and the mean one-way chamfer from the
/// visible (back-projected, canonical-frame) pixels to each hypothesis.
pub fn evaluate_model(
    model: &mut dyn Hypothesizer,
    cases: &[EvalCase],
    k: usize,
    sample_seed: u64,
    config_fingerprint: &str,
) -> Result<EvalReport, MetricsError> {
    if cases.is_empty() {
        return Err(MetricsError::NoCases);
    }
    let mut ordered: Vec<&EvalCase> = cases.iter().collect();
    ordered.sort_by(|a, b| a.scene.scene_id.cmp(&b.scene.scene_id));

    let mut scenes = Vec::with_capacity(ordered.len());
    let mut degenerate_total = 0usize;
    for case in ordered {
        let scene_id = &case.scene.scene_id;
        let image = raycast(&case.scene);

        // One sample seed for the whole scene so identical hypothesis grids
        // yield identical point sets (zero mutual difference, as they should).
        let hyp_seed = derive_seed(sample_seed, &format!("eval/{scene_id}/hyp"));
        let grids = model.hypothesize(&case.scene, &image, k);
        debug_assert_eq!(grids.len(), k);
        let hyp_samples: Vec<Option<SurfaceSamples>> = grids
            .iter()
            .map(|g| surface_points(g, METRIC_SAMPLE_COUNT, hyp_seed).ok())
            .collect();
        let degenerate = hyp_samples.iter().filter(|s| s.is_none()).count();
        degenerate_total += degenerate;

        let gt_sets: Vec<(Vec<Vector3<f64>>, f64)> = case
            .gt_shapes
            .iter()
            .enumerate()
            .map(|(j, gt)| {
                let mut rng =
                    stream_rng(derive_seed(sample_seed, &format!("eval/{scene_id}/gt{j}")), "gt");
                let pts: Vec<Vector3<f64>> = gt
                    .sample_analytic_surface(METRIC_SAMPLE_COUNT, &mut rng)
                    .into_iter()
                    .map(|(p, _)| p)
                    .collect();
                let (lo, hi) = gt.bounding_box();
                (pts, 0.01 * (hi - lo).norm())
            })
            .collect();

        let visible = visible_points_from(&case.scene, &image)?;
        let to_canonical = case.scene.world_to_canonical();
        let visible_canonical: Vec<Vector3<f64>> =
            visible.points.iter().map(|p| to_canonical * p).collect();

        let mut min_cd = f64::INFINITY;
        let mut max_f = 0.0f64;
        let mut vis_terms = Vec::with_capacity(k);
        for samples in &hyp_samples {
            match samples {
                Some(s) => {
                    let mut cd = f64::INFINITY;
                    let mut f = 0.0f64;
                    for (gt_pts, tau) in &gt_sets {
                        cd = cd.min(chamfer_bidirectional(&s.points, gt_pts)?);
                        f = f.max(fscore(&s.points, gt_pts, *tau)?);
                    }
                    min_cd = min_cd.min(cd);
                    max_f = max_f.max(f);
                    vis_terms.push(chamfer_oneway(&visible_canonical, &s.points)?);
                }
                None => vis_terms.push(f64::INFINITY),
            }
        }
        if hyp_samples.iter().all(|s| s.is_none()) {
            // Every hypothesis degenerate: sentinel row, nothing to compare.
            max_f = 0.0;
        }

        let live: Vec<&[Vector3<f64>]> = hyp_samples
            .iter()
            .flatten()
            .map(|s| s.points.as_slice())
            .collect();
        let row_tmd = if live.len() >= 2 { tmd(&live)? } else { f64::INFINITY };

        scenes.push(SceneRow {
            scene_id: scene_id.clone(),
            category: case.category.to_string(),
            tmd: row_tmd,
            min_cd,
            max_fscore: max_f,
            visible_oneway_cd: mean(vis_terms.iter().copied()),
            degenerate,
        });
    }

    let mut names: Vec<String> = scenes.iter().map(|r| r.category.clone()).collect();
    names.sort();
    names.dedup();
    let categories: Vec<CategoryRow> = names
        .iter()
        .map(|name| {
            let rows: Vec<&SceneRow> = scenes.iter().filter(|r| &r.category == name).collect();
            aggregate(name, &rows)
        })
        .collect();
    let overall = CategoryRow {
        name: "average".to_string(),
        scenes: scenes.len(),
        tmd: mean(categories.iter().map(|c| c.tmd)),
        min_cd: mean(categories.iter().map(|c| c.min_cd)),
        max_fscore: mean(categories.iter().map(|c| c.max_fscore)),
        visible_oneway_cd: mean(categories.iter().map(|c| c.visible_oneway_cd)),
    };

    Ok(EvalReport {
        k,
        sample_count: METRIC_SAMPLE_COUNT,
        sample_seed,
        config_fingerprint: config_fingerprint.to_string(),
        degenerate_hypotheses: degenerate_total,
        scenes,
        categories,
        overall,
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "k={} samples={} seed={} config={}",
            self.k, self.sample_count, self.sample_seed, self.config_fingerprint
        )?;
        writeln!(
            f,
            "{:<10} {:>6} {:>10} {:>10} {:>8} {:>10}",
            "category", "scenes", "TMD", "min-CD", "F@tau", "vis-CD"
        )?;
        for row in self.categories.iter().chain(std::iter::once(&self.overall)) {
            writeln!(
                f,
                "{:<10} {:>6} {:>10.6} {:>10.6} {:>8.4} {:>10.6}",
                row.name, row.scenes, row.tmd, row.min_cd, row.max_fscore, row.visible_oneway_cd
            )?;
        }
        if self.degenerate_hypotheses > 0 {
            writeln!(f, "degenerate hypotheses: {}", self.degenerate_hypotheses)?;
        }
        Ok(())
    }
}

/// Writes the report as pretty JSON next to whatever human-readable copy the
/// caller prints.
pub fn write_report(path: &Path, report: &EvalReport) -> Result<(), MetricsError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, report)?;
    w.write_all(b"\n")?;
    Ok(())
}
