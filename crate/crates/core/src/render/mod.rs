//! Single-view observations of shapes, rendered by sphere tracing analytic
//! SDFs. A scene is a yawed target, an optional occluder placed between the
//! camera and the target, and a camera; the rendered observation is a 2-channel
//! image (binary target mask, normalized inverse depth) plus per-pixel part
//! labels and raw depth.
//!
//! Pixels are indexed row-major, x-fastest (`idx = y * width + x`). The
//! camera follows the computer-vision convention: x right, y down, +z forward.

mod scenes;

pub use scenes::{
    default_camera, make_clean_scene, make_occlusion_scene, make_truncation_scene,
    truncated_fraction, TruncationMode, IMAGE_SIZE, OCCLUSION_BAND, SEPARATION_MIN,
    TRUNCATION_BAND,
};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream_rng;
use crate::shape::{ShapeSpec, SurfaceSamples};

/// Sphere-trace iteration cap; rays that do not converge are misses.
pub const MAX_TRACE_STEPS: usize = 128;
/// Distance below which a march counts as a surface hit.
pub const HIT_EPS: f64 = 1e-4;
/// Near plane for inverse-depth normalization.
pub const Z_NEAR: f64 = 0.2;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("scene construction failed after {attempts} rejection attempts")]
    ConstructionFailed { attempts: usize },
    #[error("degenerate scene: {0}")]
    DegenerateScene(String),
    #[error("scene has no occluder")]
    MissingOccluder,
    #[error("no visible target pixels")]
    EmptyVisibility,
    #[error("reference render clips the silhouette; fraction estimate invalid")]
    InvalidReference,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed image data: {0}")]
    Malformed(String),
}

/// Pinhole camera; `rotation`/`translation` map camera to world coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal_px: f64,
    pub width: usize,
    pub height: usize,
    /// Principal point in continuous pixel coordinates.
    pub principal: (f64, f64),
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    /// Camera at `eye` looking at `target`, world +Y up, y-down image axes.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        focal_px: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&Vector3::y_axis()).normalize();
        let down = forward.cross(&right);
        let m = nalgebra::Matrix3::from_columns(&[right, down, forward]);
        Camera {
            focal_px,
            width,
            height,
            principal: (width as f64 * 0.5, height as f64 * 0.5),
            rotation: UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(m)),
            translation: eye,
        }
    }

    /// World ray through the center of pixel `(ix, iy)`; direction normalized.
    pub fn ray(&self, ix: usize, iy: usize) -> (Vector3<f64>, Vector3<f64>) {
        let d = Vector3::new(
            (ix as f64 + 0.5 - self.principal.0) / self.focal_px,
            (iy as f64 + 0.5 - self.principal.1) / self.focal_px,
            1.0,
        );
        (
            self.translation,
            self.rotation.transform_vector(&d).normalize(),
        )
    }

    /// Projects a world point to continuous pixel coordinates and camera-space
    /// depth. The center of pixel `(ix, iy)` projects to `(ix+0.5, iy+0.5)`.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64, f64) {
        let q = self.rotation.inverse_transform_vector(&(p - self.translation));
        (
            self.focal_px * q.x / q.z + self.principal.0,
            self.focal_px * q.y / q.z + self.principal.1,
            q.z,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderProfile {
    Clean,
    /// Domain-shifted observations: gamma-warped and noised inverse depth,
    /// randomly eroded mask. Geometry (raw depth) is unchanged.
    Shifted,
}

/// How a scene was made ambiguous; recorded for dataset bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AmbiguityKind {
    Clean,
    Occlusion,
    Offset,
    Closeup,
}

/// An occluder with its rigid placement and uniform scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub spec: ShapeSpec,
    pub yaw: f64,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl PlacedShape {
    /// The occluder baked into world coordinates.
    pub fn world_spec(&self) -> ShapeSpec {
        let mut s = self.spec.scaled(self.scale).with_yaw(self.yaw);
        for p in &mut s.parts {
            p.translation += self.translation;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_id: String,
    /// Target shape with its yaw already applied (world frame).
    pub target: ShapeSpec,
    /// The yaw that was applied, for mapping points back to canonical pose.
    pub yaw: f64,
    pub occluder: Option<PlacedShape>,
    pub camera: Camera,
    pub render_profile: RenderProfile,
    pub ambiguity: AmbiguityKind,
    /// Seed for profile noise; part of the scene so renders are reproducible.
    pub noise_seed: u64,
}

impl SceneSpec {
    /// The same scene with `candidate` (canonical pose) substituted for the
    /// target under identical yaw, camera, occluder, and profile noise.
    pub fn with_target(&self, candidate: &ShapeSpec) -> SceneSpec {
        let mut scene = self.clone();
        scene.target = candidate.with_yaw(self.yaw);
        scene
    }

    /// Rotation taking world-frame target points back to the canonical pose.
    pub fn world_to_canonical(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_axis_angle(&Vector3::y_axis(), -self.yaw)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    /// Channel 0: target visibility mask, exactly 0.0 or 1.0.
    pub ch_mask: Vec<f32>,
    /// Channel 1: normalized inverse depth in [0, 1]; 0 off target.
    pub ch_invdepth: Vec<f32>,
    /// Per-pixel semantic label; -1 on background and occluder pixels.
    pub part_labels: Vec<i16>,
    /// Ray-length depth in world units; +inf where nothing was hit.
    pub depth: Vec<f64>,
}

impl RenderedImage {
    pub fn target_pixel_count(&self) -> usize {
        self.ch_mask.iter().filter(|&&m| m == 1.0).count()
    }

    /// True if any mask pixel lies on the image border.
    pub fn mask_touches_border(&self) -> bool {
        let (w, h) = (self.width, self.height);
        (0..w).any(|x| self.ch_mask[x] == 1.0 || self.ch_mask[(h - 1) * w + x] == 1.0)
            || (0..h).any(|y| self.ch_mask[y * w] == 1.0 || self.ch_mask[y * w + w - 1] == 1.0)
    }
}

/// Renders a scene. Deterministic: the same `SceneSpec` always produces a
/// bitwise-identical image (profile noise is seeded by the scene itself).
pub fn raycast(scene: &SceneSpec) -> RenderedImage {
    let cam = &scene.camera;
    let occluder = scene.occluder.as_ref().map(|o| o.world_spec());
    let (w, h) = (cam.width, cam.height);
    let t_far = cam.translation.norm() + 2.0;

    let mut img = RenderedImage {
        width: w,
        height: h,
        ch_mask: vec![0.0; w * h],
        ch_invdepth: vec![0.0; w * h],
        part_labels: vec![-1; w * h],
        depth: vec![f64::INFINITY; w * h],
    };

    for iy in 0..h {
        for ix in 0..w {
            let (origin, dir) = cam.ray(ix, iy);
            let mut t = 0.0;
            let mut hit = None;
            for _ in 0..MAX_TRACE_STEPS {
                let p = origin + dir * t;
                let d_target = scene.target.eval_sdf(&p);
                let d_occ = occluder.as_ref().map_or(f64::INFINITY, |o| o.eval_sdf(&p));
                let d = d_target.min(d_occ);
                if d < HIT_EPS {
                    hit = Some((p, d_target <= d_occ));
                    break;
                }
                t += d;
                if t > t_far {
                    break;
                }
            }
            let idx = iy * w + ix;
            if let Some((p, is_target)) = hit {
                img.depth[idx] = t;
                if is_target {
                    img.ch_mask[idx] = 1.0;
                    img.ch_invdepth[idx] = ((Z_NEAR / t).min(1.0)) as f32;
                    let label = scene
                        .target
                        .part_label_at(&p, 0.01)
                        .expect("hit point is on the target surface");
                    img.part_labels[idx] = i16::from(label);
                }
            }
        }
    }

    if scene.render_profile == RenderProfile::Shifted {
        apply_shifted_profile(&mut img, scene.noise_seed);
    }
    img
}

/// Domain shift: gamma 0.8 then zero-mean Gaussian noise (sigma 0.05) on the
/// inverse-depth channel of mask pixels, and random one-pixel mask erosion.
/// Raw depth stays untouched so geometric ground truth is preserved.
fn apply_shifted_profile(img: &mut RenderedImage, noise_seed: u64) {
    let mut rng = stream_rng(noise_seed, "shifted-profile");
    let normal = Normal::new(0.0f64, 0.05).expect("valid sigma");
    let (w, h) = (img.width, img.height);

    for idx in 0..w * h {
        if img.ch_mask[idx] == 1.0 {
            let v = f64::from(img.ch_invdepth[idx]).powf(0.8) + normal.sample(&mut rng);
            img.ch_invdepth[idx] = v.clamp(0.01, 1.0) as f32;
        }
    }

    // Boundary pixels of the original mask, each dropped with probability 1/2.
    let boundary: Vec<usize> = (0..w * h)
        .filter(|&idx| {
            if img.ch_mask[idx] != 1.0 {
                return false;
            }
            let (x, y) = (idx % w, idx / w);
            let mut edge = x == 0 || x == w - 1 || y == 0 || y == h - 1;
            if x > 0 {
                edge |= img.ch_mask[idx - 1] == 0.0;
            }
            if x + 1 < w {
                edge |= img.ch_mask[idx + 1] == 0.0;
            }
            if y > 0 {
                edge |= img.ch_mask[idx - w] == 0.0;
            }
            if y + 1 < h {
                edge |= img.ch_mask[idx + w] == 0.0;
            }
            edge
        })
        .collect();
    for idx in boundary {
        if rng.gen::<bool>() {
            img.ch_mask[idx] = 0.0;
            img.ch_invdepth[idx] = 0.0;
            img.part_labels[idx] = -1;
        }
    }
}

/// Fraction of the target's unoccluded silhouette hidden by the occluder,
/// measured by rendering the scene with and without the occluder.
pub fn occluded_fraction(scene: &SceneSpec) -> Result<f64, RenderError> {
    if scene.occluder.is_none() {
        return Err(RenderError::MissingOccluder);
    }
    // Geometry-only measure: compare clean-profile masks.
    let mut with = scene.clone();
    with.render_profile = RenderProfile::Clean;
    let mut without = with.clone();
    without.occluder = None;
    let visible = raycast(&with).target_pixel_count();
    let full = raycast(&without).target_pixel_count();
    if full == 0 {
        return Err(RenderError::DegenerateScene(
            "target invisible even without occluder".into(),
        ));
    }
    Ok(1.0 - visible as f64 / full as f64)
}

/// Back-projects every target pixel of an already rendered image.
pub fn visible_points_from(scene: &SceneSpec, img: &RenderedImage) -> Result<SurfaceSamples, RenderError> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for iy in 0..img.height {
        for ix in 0..img.width {
            let idx = iy * img.width + ix;
            if img.ch_mask[idx] != 1.0 {
                continue;
            }
            let (origin, dir) = scene.camera.ray(ix, iy);
            points.push(origin + dir * img.depth[idx]);
            labels.push(img.part_labels[idx] as u8);
        }
    }
    if points.is_empty() {
        return Err(RenderError::EmptyVisibility);
    }
    Ok(SurfaceSamples { points, labels })
}

/// Renders the scene and back-projects its target pixels to labeled 3D
/// points in the world (yawed) frame; all points lie on the target surface.
pub fn visible_points(scene: &SceneSpec) -> Result<SurfaceSamples, RenderError> {
    let img = raycast(scene);
    visible_points_from(scene, &img)
}

const AMBI_MAGIC: &[u8; 4] = b"AMBI";

/// Layout: magic "AMBI", u32 width, u32 height, then mask and inverse-depth
/// rasters as f32, then part labels as i16; all little-endian, x-fastest.
pub fn write_image(path: &Path, img: &RenderedImage) -> Result<(), RenderError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(AMBI_MAGIC)?;
    w.write_u32::<LittleEndian>(img.width as u32)?;
    w.write_u32::<LittleEndian>(img.height as u32)?;
    for &v in &img.ch_mask {
        w.write_f32::<LittleEndian>(v)?;
    }
    for &v in &img.ch_invdepth {
        w.write_f32::<LittleEndian>(v)?;
    }
    for &l in &img.part_labels {
        w.write_i16::<LittleEndian>(l)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an image written by [`write_image`]. Depth is not stored on disk;
/// the returned raster carries the +inf miss sentinel everywhere.
pub fn read_image(path: &Path) -> Result<RenderedImage, RenderError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != AMBI_MAGIC {
        return Err(RenderError::Malformed("bad AMBI magic".into()));
    }
    let width = r.read_u32::<LittleEndian>()? as usize;
    let height = r.read_u32::<LittleEndian>()? as usize;
    if width == 0 || height == 0 || width > 4096 || height > 4096 {
        return Err(RenderError::Malformed(format!(
            "implausible size {width}x{height}"
        )));
    }
    let n = width * height;
    let mut ch_mask = vec![0f32; n];
    for v in ch_mask.iter_mut() {
        *v = r.read_f32::<LittleEndian>()?;
    }
    let mut ch_invdepth = vec![0f32; n];
    for v in ch_invdepth.iter_mut() {
        *v = r.read_f32::<LittleEndian>()?;
    }
    let mut part_labels = vec![0i16; n];
    for l in part_labels.iter_mut() {
        *l = r.read_i16::<LittleEndian>()?;
    }
    Ok(RenderedImage {
        width,
        height,
        ch_mask,
        ch_invdepth,
        part_labels,
        depth: vec![f64::INFINITY; n],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::{sample_shape_spec, Category, PartPrimitive, ShapeSpec, LABEL_PANEL};
    use nalgebra::Vector3;

    fn box_spec(he: Vector3<f64>) -> ShapeSpec {
        ShapeSpec {
            category: Category::Cabinetlike,
            parts: vec![PartPrimitive::boxed(he, Vector3::zeros(), LABEL_PANEL)],
            shape_id: "box".into(),
            generator_seed: 0,
        }
    }

    fn plain_scene(target: ShapeSpec) -> SceneSpec {
        SceneSpec {
            scene_id: "test".into(),
            target,
            yaw: 0.0,
            occluder: None,
            camera: default_camera(),
            render_profile: RenderProfile::Clean,
            ambiguity: AmbiguityKind::Clean,
            noise_seed: 0,
        }
    }

    /// Slab-method ray/box intersection, the analytic oracle for depth.
    fn ray_box_distance(o: Vector3<f64>, d: Vector3<f64>, he: Vector3<f64>) -> Option<f64> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if d[a].abs() < 1e-12 {
                if o[a].abs() > he[a] {
                    return None;
                }
                continue;
            }
            let (mut lo, mut hi) = ((-he[a] - o[a]) / d[a], (he[a] - o[a]) / d[a]);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        (t0 <= t1 && t1 > 0.0).then_some(t0.max(0.0))
    }

    #[test]
    fn rendered_depth_matches_analytic_ray_box() {
        let he = Vector3::new(0.35, 0.25, 0.3);
        let scene = plain_scene(box_spec(he));
        let img = raycast(&scene);
        assert!(img.target_pixel_count() > 100, "box should be visible");
        let mut checked = 0;
        for iy in 0..img.height {
            for ix in 0..img.width {
                let idx = iy * img.width + ix;
                let (o, d) = scene.camera.ray(ix, iy);
                let analytic = ray_box_distance(o, d, he);
                if img.ch_mask[idx] == 1.0 {
                    let t = analytic.expect("mask pixel must intersect the box");
                    // Skip grazing pixels where the neighbor ray misses.
                    let grazing = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(|(dx, dy)| {
                        let (nx, ny) = (ix as i64 + dx, iy as i64 + dy);
                        nx < 0
                            || ny < 0
                            || nx >= img.width as i64
                            || ny >= img.height as i64
                            || img.ch_mask[ny as usize * img.width + nx as usize] == 0.0
                    });
                    if !grazing {
                        assert!(
                            (img.depth[idx] - t).abs() < 1e-3,
                            "pixel ({ix},{iy}): traced {} vs analytic {t}",
                            img.depth[idx]
                        );
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 50, "oracle compared only {checked} pixels");
    }

    #[test]
    fn mask_label_and_invdepth_are_coherent() {
        let scene = plain_scene(sample_shape_spec(3, Category::Chairlike).with_yaw(0.7));
        let img = raycast(&scene);
        for idx in 0..img.ch_mask.len() {
            let m = img.ch_mask[idx];
            assert!(m == 0.0 || m == 1.0);
            assert_eq!(img.part_labels[idx] >= 0, m == 1.0);
            assert_eq!(img.ch_invdepth[idx] > 0.0, m == 1.0);
            assert!((0.0..=1.0).contains(&img.ch_invdepth[idx]));
        }
    }

    #[test]
    fn double_render_is_bitwise_identical() {
        let mut scene = plain_scene(sample_shape_spec(8, Category::Tablelike));
        scene.render_profile = RenderProfile::Shifted;
        scene.noise_seed = 1234;
        let a = raycast(&scene);
        let b = raycast(&scene);
        assert_eq!(a, b);
    }

    #[test]
    fn full_occlusion_zeroes_the_mask() {
        let mut scene = plain_scene(box_spec(Vector3::new(0.2, 0.2, 0.2)));
        // A wall directly in front of the camera, wider than the frustum.
        scene.occluder = Some(PlacedShape {
            spec: box_spec(Vector3::new(0.5, 0.5, 0.02)),
            yaw: 0.0,
            translation: scene.camera.translation * 0.5,
            scale: 4.0,
        });
        let img = raycast(&scene);
        assert_eq!(img.target_pixel_count(), 0);
        assert!(matches!(occluded_fraction(&scene), Ok(f) if (f - 1.0).abs() < 1e-12));
    }

    #[test]
    fn occluded_fraction_zero_without_occlusion_effect() {
        let mut scene = plain_scene(box_spec(Vector3::new(0.25, 0.25, 0.25)));
        // Tiny occluder far off to the side: present but ineffective.
        scene.occluder = Some(PlacedShape {
            spec: box_spec(Vector3::new(0.05, 0.05, 0.05)),
            yaw: 0.0,
            translation: Vector3::new(5.0, 5.0, 0.0),
            scale: 1.0,
        });
        assert!(matches!(occluded_fraction(&scene), Ok(f) if f == 0.0));
        let mut no_occ = scene.clone();
        no_occ.occluder = None;
        assert!(matches!(
            occluded_fraction(&no_occ),
            Err(RenderError::MissingOccluder)
        ));
    }

    #[test]
    fn half_plane_occluder_covers_about_half() {
        // A vertical wall covering the left half of the image, well in front
        // of a symmetric box.
        let mut scene = plain_scene(box_spec(Vector3::new(0.3, 0.3, 0.3)));
        let cam = &scene.camera;
        let right = cam.rotation.transform_vector(&Vector3::x_axis());
        let eye_mid = cam.translation * 0.45;
        scene.occluder = Some(PlacedShape {
            spec: box_spec(Vector3::new(0.5, 0.5, 0.01)),
            yaw: 0.0,
            // Shift a 2-unit-wide wall so its edge sits on the optical axis.
            translation: eye_mid - right * 1.0,
            scale: 2.0,
        });
        let f = occluded_fraction(&scene).unwrap();
        assert!((f - 0.5).abs() < 0.05, "got {f}");
    }

    #[test]
    fn visible_points_lie_on_surface_and_reproject() {
        let scene = plain_scene(sample_shape_spec(5, Category::Chairlike).with_yaw(1.1));
        let img = raycast(&scene);
        let samples = visible_points_from(&scene, &img).unwrap();
        assert_eq!(samples.points.len(), img.target_pixel_count());
        for p in &samples.points {
            assert!(scene.target.eval_sdf(p).abs() < 1e-3);
        }
        // Round trip: each point projects back into its source pixel.
        let mut i = 0;
        for iy in 0..img.height {
            for ix in 0..img.width {
                if img.ch_mask[iy * img.width + ix] != 1.0 {
                    continue;
                }
                let (u, v, _) = scene.camera.project(&samples.points[i]);
                assert!((u - (ix as f64 + 0.5)).abs() < 0.5);
                assert!((v - (iy as f64 + 0.5)).abs() < 0.5);
                i += 1;
            }
        }
    }

    #[test]
    fn convex_box_shows_only_camera_facing_faces() {
        let he = Vector3::new(0.3, 0.3, 0.3);
        let scene = plain_scene(box_spec(he));
        let samples = visible_points(&scene).unwrap();
        let eye = scene.camera.translation;
        for p in &samples.points {
            // Face normal of the axis-aligned box at p: the axis where |p|
            // reaches its half-extent.
            let mut n = Vector3::zeros();
            let mut best = f64::INFINITY;
            for a in 0..3 {
                let gap = (he[a] - p[a].abs()).abs();
                if gap < best {
                    best = gap;
                    n = Vector3::zeros();
                    n[a] = p[a].signum();
                }
            }
            assert!(
                n.dot(&(eye - p)) > 0.0,
                "visible point {p:?} on a face turned away from the camera"
            );
        }
    }

    #[test]
    fn shifted_profile_keeps_geometry_and_coherence() {
        let mut scene = plain_scene(sample_shape_spec(10, Category::Bedlike));
        scene.render_profile = RenderProfile::Shifted;
        scene.noise_seed = 5;
        let shifted = raycast(&scene);
        let mut clean = scene.clone();
        clean.render_profile = RenderProfile::Clean;
        let clean = raycast(&clean);

        assert_eq!(shifted.depth, clean.depth, "raw depth must be untouched");
        let (mut eroded, mut kept) = (0, 0);
        for idx in 0..shifted.ch_mask.len() {
            assert_eq!(shifted.part_labels[idx] >= 0, shifted.ch_mask[idx] == 1.0);
            assert_eq!(shifted.ch_invdepth[idx] > 0.0, shifted.ch_mask[idx] == 1.0);
            if clean.ch_mask[idx] == 1.0 {
                if shifted.ch_mask[idx] == 1.0 {
                    kept += 1;
                } else {
                    eroded += 1;
                }
            } else {
                assert_eq!(shifted.ch_mask[idx], 0.0, "erosion cannot add pixels");
            }
        }
        assert!(eroded > 0, "some boundary pixels should erode");
        assert!(kept > eroded, "erosion only nibbles the boundary");
    }

    #[test]
    fn image_file_roundtrip() {
        let scene = plain_scene(sample_shape_spec(1, Category::Shelflike));
        let img = raycast(&scene);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("view.ambi");
        write_image(&path, &img).unwrap();
        let loaded = read_image(&path).unwrap();
        assert_eq!(loaded.ch_mask, img.ch_mask);
        assert_eq!(loaded.ch_invdepth, img.ch_invdepth);
        assert_eq!(loaded.part_labels, img.part_labels);
    }
}
