//! Constructors for clean, occluded, and truncated observation scenes.
//!
//! Occlusion and truncation scenes are built by rejection sampling: a
//! candidate placement is drawn, the relevant geometric measure is computed
//! by rendering, and the candidate is kept only if the measure falls inside
//! its acceptance band. Samplers use bands slightly inside the published
//! ones, and a 3D separation margin twice the published minimum, so that
//! independent re-verification (different surface samples, same thresholds)
//! cannot flake.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    occluded_fraction, raycast, AmbiguityKind, Camera, PlacedShape, RenderError, RenderProfile,
    SceneSpec,
};
use crate::rng::stream_rng;
use crate::shape::ShapeSpec;

/// Accepted occluded-fraction range for occlusion scenes.
pub const OCCLUSION_BAND: (f64, f64) = (0.2, 0.6);
/// Accepted truncated-fraction range for truncation scenes.
pub const TRUNCATION_BAND: (f64, f64) = (0.2, 0.6);
/// Minimum 3D surface separation between target and occluder.
pub const SEPARATION_MIN: f64 = 0.02;

/// Sampler-internal margins; see module docs.
const INNER_OCCLUSION_BAND: (f64, f64) = (0.22, 0.58);
const INNER_TRUNCATION_BAND: (f64, f64) = (0.22, 0.58);
const INNER_SEPARATION: f64 = 0.04;
const MAX_ATTEMPTS: usize = 200;

pub const IMAGE_SIZE: usize = 64;
const FOCAL_PX: f64 = 96.0;
/// ~1.4 canonical-cube diagonals.
const CAMERA_DISTANCE: f64 = 2.42;
const CAMERA_ELEVATION: f64 = 0.35; // radians, ~20 degrees

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruncationMode {
    /// Principal point shifted so the silhouette slides over a border.
    Offset,
    /// Camera moved closer until the silhouette outgrows the frame.
    Closeup,
}

/// The clean-profile default view: fixed distance and elevation, object
/// centered. Scene variety comes from target yaw, not camera placement.
pub fn default_camera() -> Camera {
    let eye = Vector3::new(
        0.0,
        CAMERA_DISTANCE * CAMERA_ELEVATION.sin(),
        CAMERA_DISTANCE * CAMERA_ELEVATION.cos(),
    );
    Camera::look_at(eye, Vector3::zeros(), FOCAL_PX, IMAGE_SIZE, IMAGE_SIZE)
}

fn uniform_yaw(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen::<f64>() * std::f64::consts::TAU
}

/// Unambiguous scene: random yaw, default camera, no occlusion or truncation.
pub fn make_clean_scene(rng_seed: u64, target: &ShapeSpec) -> SceneSpec {
    let mut rng = stream_rng(rng_seed, "clean-scene");
    let yaw = uniform_yaw(&mut rng);
    SceneSpec {
        scene_id: format!("clean-{}-{rng_seed:016x}", target.shape_id),
        target: target.with_yaw(yaw),
        yaw,
        occluder: None,
        camera: default_camera(),
        render_profile: RenderProfile::Clean,
        ambiguity: AmbiguityKind::Clean,
        noise_seed: rng.gen(),
    }
}

/// Minimum of `spec`'s SDF over analytically sampled surface points of
/// `other`: the one-way surface separation.
fn min_separation(other: &ShapeSpec, spec: &ShapeSpec, rng: &mut ChaCha8Rng) -> f64 {
    other
        .sample_analytic_surface(512, rng)
        .iter()
        .map(|(p, _)| spec.eval_sdf(p))
        .fold(f64::INFINITY, f64::min)
}

/// Places one occluder from `pool` between the camera and a yawed `target`
/// so that the target and occluder surfaces stay at least
/// [`SEPARATION_MIN`] apart in 3D (with internal margin) and the occluded
/// fraction of the target silhouette lands in [`OCCLUSION_BAND`].
pub fn make_occlusion_scene(
    rng_seed: u64,
    target: &ShapeSpec,
    occluder_pool: &[ShapeSpec],
) -> Result<SceneSpec, RenderError> {
    assert!(!occluder_pool.is_empty(), "occluder pool must be non-empty");
    let mut rng = stream_rng(rng_seed, "occlusion-scene");
    let yaw = uniform_yaw(&mut rng);
    let camera = default_camera();
    let target_yawed = target.with_yaw(yaw);
    let eye = camera.translation;
    let right = camera.rotation.transform_vector(&Vector3::x_axis());
    let down = camera.rotation.transform_vector(&Vector3::y_axis());

    for _attempt in 0..MAX_ATTEMPTS {
        let occ = &occluder_pool[rng.gen_range(0..occluder_pool.len())];
        let occ_yaw = uniform_yaw(&mut rng);
        let scale = rng.gen_range(0.25..0.45);
        // Fraction of the way from camera to the target center.
        let along = rng.gen_range(0.45..0.70);
        let lateral = right * rng.gen_range(-0.30..0.30) + down * rng.gen_range(-0.20..0.20);
        let placed = PlacedShape {
            spec: occ.clone(),
            yaw: occ_yaw,
            translation: eye * (1.0 - along) + lateral,
            scale,
        };

        let occ_world = placed.world_spec();
        if min_separation(&target_yawed, &occ_world, &mut rng) < INNER_SEPARATION
            || min_separation(&occ_world, &target_yawed, &mut rng) < INNER_SEPARATION
        {
            continue;
        }

        let scene = SceneSpec {
            scene_id: format!("occ-{}-{rng_seed:016x}", target.shape_id),
            target: target_yawed.clone(),
            yaw,
            occluder: Some(placed),
            camera: camera.clone(),
            render_profile: RenderProfile::Clean,
            ambiguity: AmbiguityKind::Occlusion,
            noise_seed: rng.gen(),
        };
        let frac = occluded_fraction(&scene)?;
        if (INNER_OCCLUSION_BAND.0..=INNER_OCCLUSION_BAND.1).contains(&frac) {
            return Ok(scene);
        }
    }
    Err(RenderError::ConstructionFailed {
        attempts: MAX_ATTEMPTS,
    })
}

/// Fraction of the full target silhouette cut off by the image frame.
///
/// Measured against a reference render with twice the field of view: same
/// pose and focal length, doubled image size, principal point recentered.
/// Reference pixels align exactly with main-frame pixels, so the fraction is
/// a ratio of exact pixel counts. Errors if even the reference frame clips
/// the silhouette (the estimate would be a lower bound, not a measure), or if
/// the reference sees nothing.
pub fn truncated_fraction(scene: &SceneSpec) -> Result<f64, RenderError> {
    let cam = &scene.camera;
    let mut ref_scene = scene.clone();
    ref_scene.render_profile = RenderProfile::Clean;
    ref_scene.camera.width = cam.width * 2;
    ref_scene.camera.height = cam.height * 2;
    ref_scene.camera.principal = (
        cam.principal.0 + cam.width as f64 * 0.5,
        cam.principal.1 + cam.height as f64 * 0.5,
    );
    let reference = raycast(&ref_scene);
    if reference.mask_touches_border() {
        return Err(RenderError::InvalidReference);
    }
    let full = reference.target_pixel_count();
    if full == 0 {
        return Err(RenderError::DegenerateScene(
            "target invisible in reference render".into(),
        ));
    }
    let mut main_scene = scene.clone();
    main_scene.render_profile = RenderProfile::Clean;
    let visible = raycast(&main_scene).target_pixel_count();
    Ok(1.0 - (visible as f64 / full as f64).min(1.0))
}

/// Builds a scene whose target silhouette is cut by the image border, with
/// the truncated fraction inside [`TRUNCATION_BAND`].
pub fn make_truncation_scene(
    rng_seed: u64,
    target: &ShapeSpec,
    mode: TruncationMode,
) -> Result<SceneSpec, RenderError> {
    let mut rng = stream_rng(rng_seed, "truncation-scene");
    let yaw = uniform_yaw(&mut rng);
    let target_yawed = target.with_yaw(yaw);

    for _attempt in 0..MAX_ATTEMPTS {
        let mut camera = default_camera();
        match mode {
            TruncationMode::Offset => {
                // Slide the principal point so the object drifts off-frame.
                let dx = rng.gen_range(16.0..44.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let dy = rng.gen_range(-14.0..14.0);
                camera.principal.0 += dx;
                camera.principal.1 += dy;
            }
            TruncationMode::Closeup => {
                let factor = rng.gen_range(0.42..0.62);
                let eye = camera.translation * factor;
                camera = Camera::look_at(
                    eye,
                    Vector3::zeros(),
                    camera.focal_px,
                    camera.width,
                    camera.height,
                );
                camera.principal.0 += rng.gen_range(-8.0..8.0);
                camera.principal.1 += rng.gen_range(-8.0..8.0);
            }
        }
        let scene = SceneSpec {
            scene_id: format!(
                "trunc-{}-{}-{rng_seed:016x}",
                match mode {
                    TruncationMode::Offset => "offset",
                    TruncationMode::Closeup => "closeup",
                },
                target.shape_id
            ),
            target: target_yawed.clone(),
            yaw,
            occluder: None,
            camera,
            render_profile: RenderProfile::Clean,
            ambiguity: match mode {
                TruncationMode::Offset => AmbiguityKind::Offset,
                TruncationMode::Closeup => AmbiguityKind::Closeup,
            },
            noise_seed: rng.gen(),
        };
        if !raycast(&scene).mask_touches_border() {
            continue;
        }
        match truncated_fraction(&scene) {
            Ok(frac) if (INNER_TRUNCATION_BAND.0..=INNER_TRUNCATION_BAND.1).contains(&frac) => {
                return Ok(scene)
            }
            Ok(_) | Err(RenderError::InvalidReference) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(RenderError::ConstructionFailed {
        attempts: MAX_ATTEMPTS,
    })
}
