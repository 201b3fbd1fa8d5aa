//! Procedural part-labeled shapes and their analytic signed distance fields.
//!
//! Shapes are unions of labeled box and cylinder primitives, generated per
//! category from hand-designed templates. Structural parameters (part counts,
//! quantized dimension levels) are drawn from a small set of "families" so
//! that a corpus contains near-duplicate shapes; a light multiplicative jitter
//! on top keeps family members distinct without changing their silhouettes
//! much. That near-duplicate structure is what makes multi-hypothesis
//! ground-truth mappings non-trivial downstream.
//!
//! Every generated shape is normalized to the canonical cube `[-0.5, 0.5]^3`
//! (longest extent scaled to [`CANONICAL_EXTENT`], centered at the origin).
//!
//! Semantic part labels are fixed across the corpus:
//! `seat = 0, back = 1, leg = 2, top = 3, panel = 4`.

mod voxel;

pub use voxel::{
    read_points, read_tsdf, surface_points, voxelize, write_points, write_tsdf, SurfaceSamples,
    TsdfGrid,
};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, stream_rng};

pub const LABEL_SEAT: u8 = 0;
pub const LABEL_BACK: u8 = 1;
pub const LABEL_LEG: u8 = 2;
pub const LABEL_TOP: u8 = 3;
pub const LABEL_PANEL: u8 = 4;

/// Longest shape extent after normalization; the margin to the cube wall
/// keeps the truncation band of voxelized grids inside the volume.
pub const CANONICAL_EXTENT: f64 = 0.96;

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("unsupported category {0:?}")]
    UnknownCategory(String),
    #[error("grid resolution {0} below minimum 8")]
    BadResolution(usize),
    #[error("truncation distance must be positive, got {0}")]
    BadTruncation(f64),
    #[error("grid contains no surface crossing")]
    NoSurface,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed shape data: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Chairlike,
    Tablelike,
    Cabinetlike,
    Bedlike,
    Shelflike,
}

pub const ALL_CATEGORIES: [Category; 5] = [
    Category::Chairlike,
    Category::Tablelike,
    Category::Cabinetlike,
    Category::Bedlike,
    Category::Shelflike,
];

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Chairlike => "chairlike",
            Category::Tablelike => "tablelike",
            Category::Cabinetlike => "cabinetlike",
            Category::Bedlike => "bedlike",
            Category::Shelflike => "shelflike",
        };
        f.write_str(s)
    }
}

impl FromStr for Category {
    type Err = ShapeError;
    fn from_str(s: &str) -> Result<Self, ShapeError> {
        match s {
            "chairlike" => Ok(Category::Chairlike),
            "tablelike" => Ok(Category::Tablelike),
            "cabinetlike" => Ok(Category::Cabinetlike),
            "bedlike" => Ok(Category::Bedlike),
            "shelflike" => Ok(Category::Shelflike),
            other => Err(ShapeError::UnknownCategory(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PrimitiveKind {
    /// Axis-aligned (pre-pose) box given by half extents.
    Box { half_extents: Vector3<f64> },
    /// Cylinder along the local Y axis.
    Cylinder { radius: f64, half_height: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartPrimitive {
    pub kind: PrimitiveKind,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub semantic_label: u8,
}

impl PartPrimitive {
    pub fn boxed(half_extents: Vector3<f64>, center: Vector3<f64>, label: u8) -> Self {
        assert!(half_extents.iter().all(|&x| x > 0.0));
        Self {
            kind: PrimitiveKind::Box { half_extents },
            rotation: UnitQuaternion::identity(),
            translation: center,
            semantic_label: label,
        }
    }

    pub fn cylinder(radius: f64, half_height: f64, center: Vector3<f64>, label: u8) -> Self {
        assert!(radius > 0.0 && half_height > 0.0);
        Self {
            kind: PrimitiveKind::Cylinder {
                radius,
                half_height,
            },
            rotation: UnitQuaternion::identity(),
            translation: center,
            semantic_label: label,
        }
    }

    /// Exact signed distance from `point` (world) to this primitive.
    pub fn sdf(&self, point: &Vector3<f64>) -> f64 {
        let local = self
            .rotation
            .inverse_transform_vector(&(point - self.translation));
        match &self.kind {
            PrimitiveKind::Box { half_extents } => {
                let q = local.abs() - half_extents;
                let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0));
                outside.norm() + q.x.max(q.y).max(q.z).min(0.0)
            }
            PrimitiveKind::Cylinder {
                radius,
                half_height,
            } => {
                let dr = (local.x * local.x + local.z * local.z).sqrt() - radius;
                let dy = local.y.abs() - half_height;
                let outside = (dr.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
                dr.max(dy).min(0.0) + outside
            }
        }
    }

    /// Axis-aligned bounding half-extents in the local frame.
    fn local_half_extents(&self) -> Vector3<f64> {
        match &self.kind {
            PrimitiveKind::Box { half_extents } => *half_extents,
            PrimitiveKind::Cylinder {
                radius,
                half_height,
            } => Vector3::new(*radius, *half_height, *radius),
        }
    }

    /// Surface area, used to weight surface sampling per part.
    fn surface_area(&self) -> f64 {
        match &self.kind {
            PrimitiveKind::Box { half_extents } => {
                let d = half_extents * 2.0;
                2.0 * (d.x * d.y + d.y * d.z + d.x * d.z)
            }
            PrimitiveKind::Cylinder {
                radius,
                half_height,
            } => {
                let h = 2.0 * half_height;
                2.0 * std::f64::consts::PI * radius * (radius + h)
            }
        }
    }

    /// Uniform random point on the primitive surface, in world coordinates.
    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> Vector3<f64> {
        let local = match &self.kind {
            PrimitiveKind::Box { half_extents } => {
                let d = half_extents * 2.0;
                let areas = [d.y * d.z, d.y * d.z, d.x * d.z, d.x * d.z, d.x * d.y, d.x * d.y];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.gen::<f64>() * total;
                let mut face = 5;
                for (i, a) in areas.iter().enumerate() {
                    if pick < *a {
                        face = i;
                        break;
                    }
                    pick -= a;
                }
                let u = rng.gen::<f64>() * 2.0 - 1.0;
                let v = rng.gen::<f64>() * 2.0 - 1.0;
                let h = half_extents;
                match face {
                    0 => Vector3::new(h.x, u * h.y, v * h.z),
                    1 => Vector3::new(-h.x, u * h.y, v * h.z),
                    2 => Vector3::new(u * h.x, h.y, v * h.z),
                    3 => Vector3::new(u * h.x, -h.y, v * h.z),
                    4 => Vector3::new(u * h.x, v * h.y, h.z),
                    _ => Vector3::new(u * h.x, v * h.y, -h.z),
                }
            }
            PrimitiveKind::Cylinder {
                radius,
                half_height,
            } => {
                let r = *radius;
                let h = 2.0 * half_height;
                let side = 2.0 * std::f64::consts::PI * r * h;
                let cap = std::f64::consts::PI * r * r;
                let pick = rng.gen::<f64>() * (side + 2.0 * cap);
                let theta = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
                if pick < side {
                    let y = (rng.gen::<f64>() * 2.0 - 1.0) * half_height;
                    Vector3::new(r * theta.cos(), y, r * theta.sin())
                } else {
                    // Uniform over a disc cap via sqrt radius.
                    let rr = r * rng.gen::<f64>().sqrt();
                    let y = if pick < side + cap { *half_height } else { -half_height };
                    Vector3::new(rr * theta.cos(), y, rr * theta.sin())
                }
            }
        };
        self.rotation.transform_vector(&local) + self.translation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub category: Category,
    pub parts: Vec<PartPrimitive>,
    pub shape_id: String,
    pub generator_seed: u64,
}

impl ShapeSpec {
    /// Union signed distance: minimum over the part primitives.
    pub fn eval_sdf(&self, point: &Vector3<f64>) -> f64 {
        self.parts
            .iter()
            .map(|p| p.sdf(point))
            .fold(f64::INFINITY, f64::min)
    }

    /// Label of the part with minimum `|sdf|`, ties to the lowest part index.
    /// `None` when the point is farther than `max_dist` from every part.
    pub fn part_label_at(&self, point: &Vector3<f64>, max_dist: f64) -> Option<u8> {
        let mut best: Option<(f64, u8)> = None;
        for p in &self.parts {
            let d = p.sdf(point).abs();
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, p.semantic_label));
            }
        }
        best.and_then(|(d, l)| (d <= max_dist).then_some(l))
    }

    /// Part counts per semantic label, sorted by label. Two shapes with equal
    /// signatures have matching part multisets.
    pub fn part_signature(&self) -> Vec<(u8, usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for p in &self.parts {
            *counts.entry(p.semantic_label).or_insert(0usize) += 1;
        }
        counts.into_iter().collect()
    }

    /// Tight axis-aligned bounding box as (min, max) corners.
    pub fn bounding_box(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &self.parts {
            let he = p.local_half_extents();
            // Extents of the rotated local box along each world axis.
            let m = p.rotation.to_rotation_matrix();
            let ext = Vector3::new(
                m[(0, 0)].abs() * he.x + m[(0, 1)].abs() * he.y + m[(0, 2)].abs() * he.z,
                m[(1, 0)].abs() * he.x + m[(1, 1)].abs() * he.y + m[(1, 2)].abs() * he.z,
                m[(2, 0)].abs() * he.x + m[(2, 1)].abs() * he.y + m[(2, 2)].abs() * he.z,
            );
            lo = lo.inf(&(p.translation - ext));
            hi = hi.sup(&(p.translation + ext));
        }
        (lo, hi)
    }

    /// Labeled points drawn uniformly per surface area directly from the
    /// analytic primitives (no grid involved). Points on one primitive may
    /// fall inside another; callers that need strict outer-surface samples
    /// should filter by `eval_sdf`.
    pub fn sample_analytic_surface(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<(Vector3<f64>, u8)> {
        let areas: Vec<f64> = self.parts.iter().map(|p| p.surface_area()).collect();
        let total: f64 = areas.iter().sum();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut pick = rng.gen::<f64>() * total;
            let mut idx = self.parts.len() - 1;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    idx = i;
                    break;
                }
                pick -= a;
            }
            out.push((
                self.parts[idx].sample_surface(rng),
                self.parts[idx].semantic_label,
            ));
        }
        out
    }

    /// The same shape uniformly scaled about the origin.
    pub fn scaled(&self, s: f64) -> ShapeSpec {
        assert!(s > 0.0);
        let parts = self
            .parts
            .iter()
            .map(|p| {
                let kind = match &p.kind {
                    PrimitiveKind::Box { half_extents } => PrimitiveKind::Box {
                        half_extents: half_extents * s,
                    },
                    PrimitiveKind::Cylinder {
                        radius,
                        half_height,
                    } => PrimitiveKind::Cylinder {
                        radius: radius * s,
                        half_height: half_height * s,
                    },
                };
                PartPrimitive {
                    kind,
                    rotation: p.rotation,
                    translation: p.translation * s,
                    semantic_label: p.semantic_label,
                }
            })
            .collect();
        ShapeSpec {
            category: self.category,
            parts,
            shape_id: self.shape_id.clone(),
            generator_seed: self.generator_seed,
        }
    }

    /// The same shape rotated by `yaw` radians around the upward (+Y) axis.
    pub fn with_yaw(&self, yaw: f64) -> ShapeSpec {
        let q = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), yaw);
        let parts = self
            .parts
            .iter()
            .map(|p| PartPrimitive {
                kind: p.kind.clone(),
                rotation: q * p.rotation,
                translation: q.transform_vector(&p.translation),
                semantic_label: p.semantic_label,
            })
            .collect();
        ShapeSpec {
            category: self.category,
            parts,
            shape_id: self.shape_id.clone(),
            generator_seed: self.generator_seed,
        }
    }
}

/// Scales and centers `parts` so the longest bounding-box extent equals
/// [`CANONICAL_EXTENT`] and the box is centered at the origin.
fn normalize_parts(parts: &mut [PartPrimitive]) {
    let tmp = ShapeSpec {
        category: Category::Chairlike,
        parts: parts.to_vec(),
        shape_id: String::new(),
        generator_seed: 0,
    };
    let (lo, hi) = tmp.bounding_box();
    let center = (lo + hi) * 0.5;
    let max_extent = (hi - lo).max();
    let s = CANONICAL_EXTENT / max_extent;
    for p in parts.iter_mut() {
        p.translation = (p.translation - center) * s;
        match &mut p.kind {
            PrimitiveKind::Box { half_extents } => *half_extents *= s,
            PrimitiveKind::Cylinder {
                radius,
                half_height,
            } => {
                *radius *= s;
                *half_height *= s;
            }
        }
    }
}

/// Quantized parameter families per structural variant. Per category because
/// categories differ in how many structural variants they have: the product
/// (variants x families) is held near 36-48 so a 40-shape category puts one
/// to two shapes in each cell. Fewer families means more near-duplicates and
/// larger ground-truth mappings; more means smaller ones.
pub fn family_count(category: Category) -> usize {
    match category {
        Category::Chairlike | Category::Tablelike | Category::Cabinetlike => 9,
        Category::Bedlike => 12,
        Category::Shelflike => 8,
    }
}

/// Multiplicative size jitter half-width within a family. Kept small so
/// family members stay silhouette-compatible at 64x64 rendering.
const JITTER: f64 = 0.015;

struct Gen {
    rng: ChaCha8Rng,
}

/// Family id deterministically selects a quantized level; salt decorrelates
/// the picks of different parameters across the family index. Salt must be
/// mixed multiplicatively: an additive salt would only rotate the same
/// family hash, locking all equal-length parameter arrays into lockstep.
fn level(levels: &[f64], family: usize, salt: usize) -> f64 {
    let h = (family as u64 ^ (salt as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_mul(0xD1B5_4A32_D192_ED03);
    levels[((h >> 32) as usize) % levels.len()]
}

impl Gen {
    fn jitter(&mut self, x: f64) -> f64 {
        x * (1.0 + (self.rng.gen::<f64>() * 2.0 - 1.0) * JITTER)
    }

    fn pick(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }
}

/// Deterministically generates a normalized, part-labeled shape.
/// The same `(rng_seed, category)` always yields a bitwise-identical spec.
pub fn sample_shape_spec(rng_seed: u64, category: Category) -> ShapeSpec {
    let mut g = Gen {
        rng: stream_rng(rng_seed, "shape-gen"),
    };
    let family = g.pick(family_count(category));
    let mut parts = match category {
        Category::Chairlike => chairlike(&mut g, family),
        Category::Tablelike => tablelike(&mut g, family),
        Category::Cabinetlike => cabinetlike(&mut g, family),
        Category::Bedlike => bedlike(&mut g, family),
        Category::Shelflike => shelflike(&mut g, family),
    };
    normalize_parts(&mut parts);
    ShapeSpec {
        category,
        parts,
        shape_id: format!("{category}-{rng_seed:016x}"),
        generator_seed: rng_seed,
    }
}

fn chairlike(g: &mut Gen, family: usize) -> Vec<PartPrimitive> {
    let has_back = g.pick(2) == 1;
    let n_legs = 3 + g.pick(2);
    let seat_w = g.jitter(level(&[0.24, 0.32, 0.42], family, 0));
    let seat_d = g.jitter(level(&[0.22, 0.34], family, 1));
    let seat_y = level(&[-0.06, 0.06, 0.16], family, 2);
    let leg_r = g.jitter(level(&[0.025, 0.060], family, 3));
    let round_legs = family % 2 == 0;
    let seat_t = 0.035;

    let mut parts = vec![PartPrimitive::boxed(
        Vector3::new(seat_w, seat_t, seat_d),
        Vector3::new(0.0, seat_y, 0.0),
        LABEL_SEAT,
    )];
    if has_back {
        let back_h = g.jitter(level(&[0.12, 0.24, 0.36], family, 4));
        parts.push(PartPrimitive::boxed(
            Vector3::new(seat_w, back_h, 0.022),
            Vector3::new(0.0, seat_y + seat_t + back_h, -seat_d + 0.022),
            LABEL_BACK,
        ));
    }
    let leg_top = seat_y - seat_t;
    let leg_hh = (leg_top - (-0.5)) * 0.5;
    let leg_cy = leg_top - leg_hh;
    let inset = leg_r + 0.01;
    let leg_xy: Vec<(f64, f64)> = if n_legs == 4 {
        vec![
            (seat_w - inset, seat_d - inset),
            (-(seat_w - inset), seat_d - inset),
            (seat_w - inset, -(seat_d - inset)),
            (-(seat_w - inset), -(seat_d - inset)),
        ]
    } else {
        vec![
            (seat_w - inset, seat_d - inset),
            (-(seat_w - inset), seat_d - inset),
            (0.0, -(seat_d - inset)),
        ]
    };
    for (x, z) in leg_xy {
        let c = Vector3::new(x, leg_cy, z);
        parts.push(if round_legs {
            PartPrimitive::cylinder(leg_r, leg_hh, c, LABEL_LEG)
        } else {
            PartPrimitive::boxed(Vector3::new(leg_r, leg_hh, leg_r), c, LABEL_LEG)
        });
    }
    parts
}

fn tablelike(g: &mut Gen, family: usize) -> Vec<PartPrimitive> {
    let round_top = g.pick(2) == 1;
    let n_legs = 3 + g.pick(2);
    let top_y = level(&[0.02, 0.14, 0.26], family, 0);
    let leg_r = g.jitter(level(&[0.024, 0.055], family, 1));
    let top_t = 0.028;

    let mut parts = Vec::new();
    let leg_positions: Vec<(f64, f64)> = if round_top {
        let top_r = g.jitter(level(&[0.26, 0.36, 0.46], family, 2));
        parts.push(PartPrimitive::cylinder(
            top_r,
            top_t,
            Vector3::new(0.0, top_y, 0.0),
            LABEL_TOP,
        ));
        let ring = top_r - leg_r - 0.02;
        (0..n_legs)
            .map(|i| {
                let a = i as f64 / n_legs as f64 * std::f64::consts::TAU;
                (ring * a.cos(), ring * a.sin())
            })
            .collect()
    } else {
        let top_w = g.jitter(level(&[0.30, 0.46], family, 2));
        let top_d = g.jitter(level(&[0.20, 0.34], family, 3));
        parts.push(PartPrimitive::boxed(
            Vector3::new(top_w, top_t, top_d),
            Vector3::new(0.0, top_y, 0.0),
            LABEL_TOP,
        ));
        let (ix, iz) = (top_w - leg_r - 0.012, top_d - leg_r - 0.012);
        if n_legs == 4 {
            vec![(ix, iz), (-ix, iz), (ix, -iz), (-ix, -iz)]
        } else {
            vec![(ix, iz), (-ix, iz), (0.0, -iz)]
        }
    };
    let leg_top = top_y - top_t;
    let leg_hh = (leg_top + 0.5) * 0.5;
    for (x, z) in leg_positions {
        let c = Vector3::new(x, leg_top - leg_hh, z);
        parts.push(if family % 2 == 0 {
            PartPrimitive::cylinder(leg_r, leg_hh, c, LABEL_LEG)
        } else {
            PartPrimitive::boxed(Vector3::new(leg_r, leg_hh, leg_r), c, LABEL_LEG)
        });
    }
    parts
}

fn cabinetlike(g: &mut Gen, family: usize) -> Vec<PartPrimitive> {
    let has_top = g.pick(2) == 1;
    let has_legs = g.pick(2) == 1;
    // A cabinet is one big box, so its family identity is almost entirely
    // its silhouette aspect. Index width and height directly by family to
    // guarantee six distinct aspect ratios; hashing here occasionally dealt
    // two families nearly the same rectangle.
    let w = g.jitter([0.18, 0.32, 0.48][family % 3]);
    let h = g.jitter([0.22, 0.36, 0.52][(family / 3) % 3]);
    let d = g.jitter(level(&[0.11, 0.18, 0.27], family, 2));
    let leg_h = 0.05;
    let body_cy = if has_legs { -0.5 + 2.0 * leg_h + h } else { -0.5 + h };

    let mut parts = vec![PartPrimitive::boxed(
        Vector3::new(w, h, d),
        Vector3::new(0.0, body_cy, 0.0),
        LABEL_PANEL,
    )];
    if has_top {
        parts.push(PartPrimitive::boxed(
            Vector3::new(w + 0.025, 0.015, d + 0.025),
            Vector3::new(0.0, body_cy + h + 0.015, 0.0),
            LABEL_TOP,
        ));
    }
    if has_legs {
        let r = 0.022;
        let (ix, iz) = (w - r - 0.02, d - r - 0.02);
        for (x, z) in [(ix, iz), (-ix, iz), (ix, -iz), (-ix, -iz)] {
            parts.push(PartPrimitive::boxed(
                Vector3::new(r, leg_h, r),
                Vector3::new(x, -0.5 + leg_h, z),
                LABEL_LEG,
            ));
        }
    }
    parts
}

fn bedlike(g: &mut Gen, family: usize) -> Vec<PartPrimitive> {
    let has_head = g.pick(2) == 1;
    let has_foot = g.pick(2) == 1;
    let len = g.jitter(level(&[0.38, 0.48], family, 0));
    let wid = g.jitter(level(&[0.20, 0.34], family, 1));
    // Deck height and thickness carry most of the family identity: they stay
    // visible from any yaw, unlike width, which foreshortens.
    let deck_t = level(&[0.030, 0.075, 0.120], family, 2);
    let leg_h = level(&[0.030, 0.090, 0.160], family, 3);
    let deck_cy = -0.5 + 2.0 * leg_h + deck_t;

    let mut parts = vec![PartPrimitive::boxed(
        Vector3::new(len, deck_t, wid),
        Vector3::new(0.0, deck_cy, 0.0),
        LABEL_SEAT,
    )];
    if has_head {
        let head_h = g.jitter(level(&[0.08, 0.18, 0.30], family, 4));
        parts.push(PartPrimitive::boxed(
            Vector3::new(0.022, head_h, wid),
            Vector3::new(-len + 0.022, deck_cy + deck_t + head_h, 0.0),
            LABEL_BACK,
        ));
    }
    if has_foot {
        let foot_h = g.jitter(level(&[0.05, 0.12], family, 5));
        parts.push(PartPrimitive::boxed(
            Vector3::new(0.022, foot_h, wid),
            Vector3::new(len - 0.022, deck_cy + deck_t + foot_h, 0.0),
            LABEL_BACK,
        ));
    }
    let r = 0.028;
    let (ix, iz) = (len - r - 0.02, wid - r - 0.02);
    for (x, z) in [(ix, iz), (-ix, iz), (ix, -iz), (-ix, -iz)] {
        parts.push(PartPrimitive::boxed(
            Vector3::new(r, leg_h, r),
            Vector3::new(x, -0.5 + leg_h, z),
            LABEL_LEG,
        ));
    }
    parts
}

fn shelflike(g: &mut Gen, family: usize) -> Vec<PartPrimitive> {
    let n_shelves = 2 + g.pick(3);
    let has_back = g.pick(2) == 1;
    let w = g.jitter(level(&[0.20, 0.30, 0.42], family, 0));
    let h = g.jitter(level(&[0.28, 0.40, 0.50], family, 1));
    let d = g.jitter(level(&[0.09, 0.15, 0.21], family, 2));
    // Vertical shelf layout: spacing exponent < 1 packs shelves toward the
    // top, > 1 toward the bottom. Visible from the front at any aspect.
    let gamma = level(&[0.55, 1.0, 1.8], family, 3);
    let side_t = 0.018;
    let shelf_t = 0.014;

    let mut parts = vec![
        PartPrimitive::boxed(
            Vector3::new(side_t, h, d),
            Vector3::new(-w - side_t, 0.0, 0.0),
            LABEL_PANEL,
        ),
        PartPrimitive::boxed(
            Vector3::new(side_t, h, d),
            Vector3::new(w + side_t, 0.0, 0.0),
            LABEL_PANEL,
        ),
    ];
    if has_back {
        parts.push(PartPrimitive::boxed(
            Vector3::new(w, h, 0.012),
            Vector3::new(0.0, 0.0, -d + 0.012),
            LABEL_PANEL,
        ));
    }
    for i in 0..n_shelves {
        let t = i as f64 / (n_shelves - 1) as f64;
        let y = -h + shelf_t + t.powf(gamma) * 2.0 * (h - shelf_t);
        parts.push(PartPrimitive::boxed(
            Vector3::new(w, shelf_t, d),
            Vector3::new(0.0, y, 0.0),
            LABEL_TOP,
        ));
    }
    parts
}

/// The standard corpus: `per_category` shapes from each category, with all
/// generator seeds derived from `master_seed`. Order (and therefore shape
/// identity) is fixed: categories in declaration order, index-major inside.
pub fn generate_corpus(master_seed: u64, per_category: usize) -> Vec<ShapeSpec> {
    let mut corpus = Vec::with_capacity(per_category * ALL_CATEGORIES.len());
    for cat in ALL_CATEGORIES {
        for i in 0..per_category {
            let seed = derive_seed(master_seed, &format!("corpus/{cat}/{i}"));
            corpus.push(sample_shape_spec(seed, cat));
        }
    }
    corpus
}

/// Writes a spec as a human-readable structured record.
pub fn write_shape_spec(path: &Path, spec: &ShapeSpec) -> Result<(), ShapeError> {
    let text = ron::ser::to_string_pretty(spec, ron::ser::PrettyConfig::default())
        .map_err(|e| ShapeError::Malformed(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_shape_spec(path: &Path) -> Result<ShapeSpec, ShapeError> {
    let text = std::fs::read_to_string(path)?;
    ron::from_str(&text).map_err(|e| ShapeError::Malformed(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn unit_box_sdf_reference_values() {
        let spec = ShapeSpec {
            category: Category::Cabinetlike,
            parts: vec![PartPrimitive::boxed(
                Vector3::new(0.5, 0.5, 0.5),
                Vector3::zeros(),
                LABEL_PANEL,
            )],
            shape_id: "box".into(),
            generator_seed: 0,
        };
        assert_eq!(spec.eval_sdf(&Vector3::new(0.0, 0.0, 0.0)), -0.5);
        assert_eq!(spec.eval_sdf(&Vector3::new(0.5, 0.0, 0.0)), 0.0);
        assert_eq!(spec.eval_sdf(&Vector3::new(1.0, 0.0, 0.0)), 0.5);
    }

    #[test]
    fn cylinder_sdf_axis_and_radial() {
        let c = PartPrimitive::cylinder(0.3, 0.4, Vector3::zeros(), LABEL_LEG);
        assert!((c.sdf(&Vector3::new(0.0, 0.0, 0.0)) - -0.3).abs() < 1e-12);
        assert!((c.sdf(&Vector3::new(0.6, 0.0, 0.0)) - 0.3).abs() < 1e-12);
        assert!((c.sdf(&Vector3::new(0.0, 0.9, 0.0)) - 0.5).abs() < 1e-12);
        // Outside corner: diagonal distance to the rim circle.
        let d = c.sdf(&Vector3::new(0.6, 0.8, 0.0));
        assert!((d - (0.3f64.powi(2) + 0.4f64.powi(2)).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = sample_shape_spec(7, Category::Chairlike);
        let b = sample_shape_spec(7, Category::Chairlike);
        assert_eq!(a, b);
        let c = sample_shape_spec(8, Category::Chairlike);
        assert_ne!(
            ron::to_string(&a).unwrap(),
            ron::to_string(&c).unwrap(),
            "different seeds must differ"
        );
    }

    #[test]
    fn all_generated_shapes_fit_the_canonical_cube() {
        for (i, &cat) in ALL_CATEGORIES.iter().enumerate() {
            for seed in 0..20u64 {
                let spec = sample_shape_spec(seed * 31 + i as u64, cat);
                assert!(!spec.parts.is_empty());
                let mut rng = stream_rng(99, "cube-check");
                for (p, _) in spec.sample_analytic_surface(10_000 / 20, &mut rng) {
                    assert!(
                        p.iter().all(|&x| (-0.5..=0.5).contains(&x)),
                        "{} point {:?} escapes the cube",
                        spec.shape_id,
                        p
                    );
                }
                let (lo, hi) = spec.bounding_box();
                assert!(((hi - lo).max() - CANONICAL_EXTENT).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn union_property_on_random_points() {
        let spec = sample_shape_spec(3, Category::Chairlike);
        let mut rng = stream_rng(1, "union");
        for _ in 0..10_000 {
            let p = Vector3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            );
            let direct = spec.eval_sdf(&p);
            let manual = spec
                .parts
                .iter()
                .map(|part| part.sdf(&p))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(direct, manual);
        }
    }

    #[test]
    fn labels_match_brute_force_argmin_with_index_ties() {
        let spec = sample_shape_spec(11, Category::Tablelike);
        let mut rng = stream_rng(2, "labels");
        let samples = spec.sample_analytic_surface(1000, &mut rng);
        for (p, _) in samples {
            let got = spec.part_label_at(&p, 0.1).expect("near surface");
            let mut best = (f64::INFINITY, 0u8);
            for part in &spec.parts {
                let d = part.sdf(&p).abs();
                if d < best.0 {
                    best = (d, part.semantic_label);
                }
            }
            assert_eq!(got, best.1);
        }
    }

    #[test]
    fn tie_between_equal_parts_takes_lower_index() {
        // Two identical boxes, different labels; every point ties.
        let spec = ShapeSpec {
            category: Category::Shelflike,
            parts: vec![
                PartPrimitive::boxed(Vector3::new(0.2, 0.2, 0.2), Vector3::zeros(), LABEL_TOP),
                PartPrimitive::boxed(Vector3::new(0.2, 0.2, 0.2), Vector3::zeros(), LABEL_PANEL),
            ],
            shape_id: "twins".into(),
            generator_seed: 0,
        };
        assert_eq!(
            spec.part_label_at(&Vector3::new(0.2, 0.0, 0.0), 0.05),
            Some(LABEL_TOP)
        );
    }

    #[test]
    fn far_points_have_no_label() {
        let spec = sample_shape_spec(5, Category::Bedlike);
        assert_eq!(spec.part_label_at(&Vector3::new(9.0, 9.0, 9.0), 0.1), None);
    }

    #[test]
    fn yaw_preserves_sdf_up_to_rotation() {
        let spec = sample_shape_spec(21, Category::Shelflike);
        let yaw = 1.234;
        let rotated = spec.with_yaw(yaw);
        let q = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), yaw);
        let mut rng = stream_rng(3, "yaw");
        for _ in 0..200 {
            let p = Vector3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            );
            let a = spec.eval_sdf(&p);
            let b = rotated.eval_sdf(&q.transform_vector(&p));
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn signature_counts_parts_per_label() {
        let spec = sample_shape_spec(42, Category::Chairlike);
        let sig = spec.part_signature();
        let total: usize = sig.iter().map(|(_, c)| c).sum();
        assert_eq!(total, spec.parts.len());
        assert!(sig.iter().any(|&(l, c)| l == LABEL_SEAT && c == 1));
    }

    #[test]
    fn spec_roundtrips_through_file() {
        let spec = sample_shape_spec(77, Category::Cabinetlike);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.ron");
        write_shape_spec(&path, &spec).unwrap();
        let loaded = read_shape_spec(&path).unwrap();
        assert_eq!(spec, loaded);
    }

    #[test]
    fn unknown_category_string_is_rejected() {
        assert!(matches!(
            "sofalike".parse::<Category>(),
            Err(ShapeError::UnknownCategory(_))
        ));
    }
}
