//! Run orchestration: dataset construction, two-stage training, sampling,
//! evaluation, and fine-tuning, with one TOML config and one master seed
//! fixing every byte a run produces.
//!
//! A run directory is laid out as
//!
//! ```text
//! config.resolved.toml      defaults expanded, overrides applied
//! manifest.json             hashed index of every dataset file
//! shapes/{id}.ron           canonical shape specs
//! scenes/{id}.ron           camera, placement, profile per scene
//! images/{id}.img           rendered mask + inverse depth
//! visible/{id}.pts          back-projected visible target points
//! groups.ron  mapping.ron   similarity groups, ground-truth mappings
//! codec/                    checkpoint, loss log, exported index grids
//! prior/                    checkpoint, loss and validation logs
//! samples/  eval/  finetune/
//! ```
//!
//! Training commands verify the manifest hashes before touching anything;
//! checkpoints carry sha256 sidecars checked on load.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{
    decode_index_grid, encode_grid, init_codec_params, read_index_grid, train_codec,
    write_index_grid, CodecConfig, CodecError, CodecTrainConfig, CodecTrainReport, IndexGrid,
    CODEC_GROUP,
};
use crate::hypomap::{
    build_mapping, group_of, mapping_mode, read_mapping, write_mapping, GtMapping, HypomapError,
    MappingMode, SimilarGroup,
};
use crate::metrics::{
    evaluate_model, write_report, EvalCase, EvalReport, Hypothesizer, MetricsError,
    METRIC_SAMPLE_COUNT,
};
use crate::prior::{
    eval_prior_ce, finetune, init_prior_params, sample_shape, sample_shape_zero_tokens,
    train_prior, write_trace, CeRecord, FinetuneConfig, PriorConfig, PriorError, PriorExample,
    PriorTrainConfig,
};
use crate::render::{
    make_clean_scene, make_occlusion_scene, make_truncation_scene, raycast, read_image,
    visible_points_from, write_image, AmbiguityKind, RenderError, RenderProfile, RenderedImage,
    SceneSpec, TruncationMode, IMAGE_SIZE,
};
use crate::rng::derive_seed;
use crate::shape::{
    generate_corpus, read_shape_spec, surface_points, voxelize, write_points, write_shape_spec,
    write_tsdf, Category, ShapeError, ShapeSpec, TsdfGrid, ALL_CATEGORIES,
};
use crate::tensor::{load_checkpoint, save_checkpoint, AdamConfig, ParamStore, TensorError};

/// Training and sampling run in f32; gradient checks elsewhere use f64.
type S = f32;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("{skipped} of {planned} scenes failed construction, over the 10% budget")]
    TooManySkipped { skipped: usize, planned: usize },
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Hypomap(#[from] HypomapError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Checkpoint(#[from] TensorError),
}

impl PipelineError {
    /// Stable machine-readable tag for the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Integrity(_) => "integrity",
            PipelineError::Missing(_) => "missing",
            PipelineError::TooManySkipped { .. } => "dataset",
            PipelineError::Malformed(_) => "malformed",
            PipelineError::Io(_) => "io",
            PipelineError::Shape(_) => "shape",
            PipelineError::Render(_) => "render",
            PipelineError::Hypomap(_) => "mapping",
            PipelineError::Metrics(_) => "metrics",
            PipelineError::Codec(_) => "codec",
            PipelineError::Prior(_) => "prior",
            PipelineError::Checkpoint(_) => "checkpoint",
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration

/// Scene-type fractions; must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmbiguityMix {
    pub occlusion: f64,
    pub offset: f64,
    pub closeup: f64,
    pub clean: f64,
}

impl Default for AmbiguityMix {
    fn default() -> Self {
        Self {
            occlusion: 0.4,
            offset: 0.2,
            closeup: 0.2,
            clean: 0.2,
        }
    }
}

impl AmbiguityMix {
    pub fn fractions(&self) -> [(AmbiguityKind, f64); 4] {
        [
            (AmbiguityKind::Occlusion, self.occlusion),
            (AmbiguityKind::Offset, self.offset),
            (AmbiguityKind::Closeup, self.closeup),
            (AmbiguityKind::Clean, self.clean),
        ]
    }

    fn validate(&self) -> Result<(), PipelineError> {
        let parts = [self.occlusion, self.offset, self.closeup, self.clean];
        if parts.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
            return Err(PipelineError::Config(
                "ambiguity fractions must lie in [0, 1]".into(),
            ));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(PipelineError::Config(format!(
                "ambiguity fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub shapes_per_category: usize,
    pub categories: Vec<Category>,
    pub views_per_shape: usize,
    pub grid_res: usize,
    /// Fraction of shapes (per category) whose scenes form the val split.
    pub val_fraction: f64,
    pub mix: AmbiguityMix,
    /// Surface chamfer below which same-signature shapes group together.
    pub geo_threshold: f64,
    /// Pixel label agreement a mapping candidate must reach.
    pub label_agreement: f64,
    /// Visible-surface chamfer a mapping candidate must stay under.
    pub visible_cd: f64,
    pub profile: RenderProfile,
    /// Extra seeds tried when a scene constructor exhausts its internal
    /// placement attempts before the scene is skipped.
    pub retries_per_scene: u32,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            shapes_per_category: 40,
            categories: ALL_CATEGORIES.to_vec(),
            views_per_shape: 4,
            grid_res: 32,
            val_fraction: 0.2,
            mix: AmbiguityMix::default(),
            geo_threshold: 0.06,
            label_agreement: 0.8,
            visible_cd: 0.04,
            profile: RenderProfile::Clean,
            retries_per_scene: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub arch: CodecConfig,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub decay_every: u64,
    pub restart_after: u64,
}

impl Default for CodecSection {
    fn default() -> Self {
        let t = CodecTrainConfig::default();
        Self {
            arch: CodecConfig::toy(),
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            decay_every: t.decay_every,
            restart_after: t.restart_after,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub arch: PriorConfig,
    pub steps: u64,
    pub batch: usize,
    pub lr_tr: f64,
    pub lr_head: f64,
    pub lr_xattn: f64,
    pub lr_img: f64,
    pub decay_every: u64,
    /// Validation cross-entropy is logged every this many steps.
    pub val_every: u64,
    /// Which ground truths a training view may draw: the measured mapping,
    /// only the rendered target, or the whole similarity group.
    pub mapping: MappingMode,
}

impl Default for PriorSection {
    fn default() -> Self {
        let t = PriorTrainConfig::default();
        Self {
            arch: PriorConfig::toy(),
            steps: t.steps,
            batch: t.batch,
            lr_tr: t.lr_tr,
            lr_head: t.lr_head,
            lr_xattn: t.lr_xattn,
            lr_img: t.lr_img,
            decay_every: t.decay_every,
            val_every: 500,
            mapping: MappingMode::Strict,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k: usize,
    pub temperature: f64,
    pub mapping: MappingMode,
    /// Cap on evaluated val scenes (in scene-id order); 0 means all.
    pub max_scenes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            k: 6,
            temperature: 1.0,
            mapping: MappingMode::Strict,
            max_scenes: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    /// Run directory of the shifted-profile dataset to adapt to.
    pub shifted_dir: PathBuf,
    pub steps: u64,
    pub batch: usize,
    pub lr_img: f64,
    pub lr_xattn: f64,
    pub decay_every: u64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let f = FinetuneConfig::default();
        Self {
            shifted_dir: PathBuf::from("runs/shifted"),
            steps: f.steps,
            batch: f.batch,
            lr_img: f.lr_img,
            lr_xattn: f.lr_xattn,
            decay_every: f.decay_every,
        }
    }
}

/// One file describing a whole run. Every stage derives its randomness from
/// `seed`, so two runs of the same config are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSection,
    pub codec: CodecSection,
    pub prior: PriorSection,
    pub eval: EvalSection,
    pub finetune: FinetuneSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("runs/toy"),
            dataset: DatasetSection::default(),
            codec: CodecSection::default(),
            prior: PriorSection::default(),
            eval: EvalSection::default(),
            finetune: FinetuneSection::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.dataset.mix.validate()?;
        self.codec.arch.validate()?;
        self.prior.arch.validate().map_err(PipelineError::Prior)?;
        let d = &self.dataset;
        if d.shapes_per_category == 0 || d.views_per_shape == 0 {
            return bad("zero corpus or view count".into());
        }
        if d.categories.is_empty() {
            return bad("category list is empty".into());
        }
        let mut seen = BTreeSet::new();
        for c in &d.categories {
            if !seen.insert(*c) {
                return bad(format!("duplicate category {c}"));
            }
        }
        if !(0.0 < d.val_fraction && d.val_fraction < 1.0) {
            return bad(format!("val_fraction {} outside (0, 1)", d.val_fraction));
        }
        if d.grid_res != self.codec.arch.grid_res {
            return bad(format!(
                "dataset grid_res {} does not match codec grid_res {}",
                d.grid_res, self.codec.arch.grid_res
            ));
        }
        if self.prior.arch.img_size != IMAGE_SIZE {
            return bad(format!(
                "prior img_size {} does not match the renderer's {IMAGE_SIZE}",
                self.prior.arch.img_size
            ));
        }
        let (p, c) = (&self.prior.arch, &self.codec.arch);
        if p.latent_g != c.latent_g() || p.codebook_size != c.codebook_size || p.code_dim != c.code_dim
        {
            return bad(format!(
                "prior latent layout (g={}, K={}, D={}) disagrees with codec (g={}, K={}, D={})",
                p.latent_g,
                p.codebook_size,
                p.code_dim,
                c.latent_g(),
                c.codebook_size,
                c.code_dim
            ));
        }
        for (name, v) in [
            ("codec.steps", self.codec.steps),
            ("codec.decay_every", self.codec.decay_every),
            ("prior.steps", self.prior.steps),
            ("prior.decay_every", self.prior.decay_every),
            ("prior.val_every", self.prior.val_every),
            ("finetune.steps", self.finetune.steps),
            ("finetune.decay_every", self.finetune.decay_every),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.codec.batch == 0 || self.prior.batch == 0 || self.finetune.batch == 0 {
            return bad("zero batch size".into());
        }
        if self.eval.k == 0 {
            return bad("eval.k must be at least 1".into());
        }
        if self.eval.temperature < 0.0 {
            return bad("eval.temperature must be non-negative".into());
        }
        Ok(())
    }
}

fn merge_toml(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets one dotted key (`prior.steps=100`) in a fully-populated config tree.
/// The replacement is parsed to the type the key already has, so typos and
/// unknown keys fail here rather than deep in deserialization.
pub fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<(), PipelineError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| {
            PipelineError::Config(format!("{} is not a table", parts[..i].join(".")))
        })?;
        node = table
            .get_mut(*part)
            .ok_or_else(|| PipelineError::Config(format!("unknown config key {key:?}")))?;
    }
    let parsed = match node {
        toml::Value::Integer(_) => raw
            .parse::<i64>()
            .map(toml::Value::Integer)
            .map_err(|_| PipelineError::Config(format!("{key}: {raw:?} is not an integer"))),
        toml::Value::Float(_) => raw
            .parse::<f64>()
            .map(toml::Value::Float)
            .map_err(|_| PipelineError::Config(format!("{key}: {raw:?} is not a number"))),
        toml::Value::Boolean(_) => raw
            .parse::<bool>()
            .map(toml::Value::Boolean)
            .map_err(|_| PipelineError::Config(format!("{key}: {raw:?} is not a bool"))),
        toml::Value::String(_) => Ok(toml::Value::String(raw.to_string())),
        _ => toml::from_str::<toml::Value>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut doc| doc.as_table_mut().and_then(|t| t.remove("v")))
            .ok_or_else(|| PipelineError::Config(format!("{key}: cannot parse {raw:?}"))),
    }?;
    *node = parsed;
    Ok(())
}

/// Loads a config: defaults, overlaid with the TOML file if given, then the
/// `key=value` overrides, then validated.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<RunConfig, PipelineError> {
    let mut tree = toml::Value::try_from(RunConfig::default())
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    if let Some(p) = path {
        let text = fs::read_to_string(p)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", p.display())))?;
        let file: toml::Value = toml::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?;
        merge_toml(&mut tree, file);
    }
    for (k, v) in overrides {
        apply_override(&mut tree, k, v)?;
    }
    let cfg: RunConfig = tree
        .try_into()
        .map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// File layout and integrity

pub fn shape_path(root: &Path, id: &str) -> PathBuf {
    root.join("shapes").join(format!("{id}.ron"))
}

pub fn scene_path(root: &Path, id: &str) -> PathBuf {
    root.join("scenes").join(format!("{id}.ron"))
}

pub fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.img"))
}

pub fn visible_path(root: &Path, id: &str) -> PathBuf {
    root.join("visible").join(format!("{id}.pts"))
}

pub fn index_path(root: &Path, id: &str) -> PathBuf {
    root.join("codec").join("indices").join(format!("{id}.idxg"))
}

pub fn codec_ckpt_path(root: &Path) -> PathBuf {
    root.join("codec").join("checkpoint.ckpt")
}

pub fn prior_ckpt_path(root: &Path) -> PathBuf {
    root.join("prior").join("checkpoint.ckpt")
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.json")
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Writes `path`'s sha256 to a `.sha256` sidecar; [`verify_sidecar`] checks it.
pub fn write_sidecar(path: &Path) -> Result<(), PipelineError> {
    let hash = sha256_file(path)?;
    fs::write(sidecar_of(path), format!("{hash}\n"))?;
    Ok(())
}

fn sidecar_of(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".sha256");
    PathBuf::from(s)
}

pub fn verify_sidecar(path: &Path) -> Result<(), PipelineError> {
    if !path.is_file() {
        return Err(PipelineError::Missing(format!("{}", path.display())));
    }
    let sidecar = sidecar_of(path);
    let expected = fs::read_to_string(&sidecar)
        .map_err(|_| PipelineError::Missing(format!("{}", sidecar.display())))?;
    let expected = expected.trim();
    let actual = sha256_file(path)?;
    if expected != actual {
        return Err(PipelineError::Integrity(format!(
            "{}: expected sha256 {expected}, found {actual}",
            path.display()
        )));
    }
    Ok(())
}

fn save_checkpoint_hashed<T: crate::tensor::Scalar>(
    path: &Path,
    store: &ParamStore<T>,
) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(path, store, true)?;
    write_sidecar(path)
}

fn load_checkpoint_verified<T: crate::tensor::Scalar>(
    path: &Path,
) -> Result<ParamStore<T>, PipelineError> {
    verify_sidecar(path)?;
    Ok(load_checkpoint(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the run directory, forward slashes.
    pub path: String,
    pub sha256: String,
}

impl FileEntry {
    fn new(root: &Path, path: &Path) -> Result<Self, PipelineError> {
        let rel = path
            .strip_prefix(root)
            .map_err(|_| PipelineError::Config(format!("{} outside run dir", path.display())))?;
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        Ok(Self {
            sha256: sha256_file(path)?,
            path: rel,
        })
    }

    fn verify(&self, root: &Path) -> Result<(), PipelineError> {
        let full = root.join(&self.path);
        if !full.is_file() {
            return Err(PipelineError::Missing(self.path.clone()));
        }
        let actual = sha256_file(&full)?;
        if actual != self.sha256 {
            return Err(PipelineError::Integrity(format!(
                "{}: expected sha256 {}, found {actual}",
                self.path, self.sha256
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub shape_id: String,
    pub category: Category,
    pub file: FileEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub target_id: String,
    pub category: Category,
    pub ambiguity: AmbiguityKind,
    pub split: Split,
    pub scene_file: FileEntry,
    pub image_file: FileEntry,
    pub visible_file: FileEntry,
}

/// Hashed index of everything `dataset` wrote. Scenes are sorted by id;
/// the split partitions target shapes, never individual views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub master_seed: u64,
    pub grid_res: usize,
    pub profile: RenderProfile,
    pub shapes: Vec<ShapeRecord>,
    pub scenes: Vec<SceneRecord>,
    pub groups_file: FileEntry,
    pub mapping_file: FileEntry,
    pub mapping_mean_size: f64,
    pub train_shape_ids: Vec<String>,
    pub val_shape_ids: Vec<String>,
    pub skipped_scenes: Vec<String>,
}

impl DatasetManifest {
    pub fn save(&self, root: &Path) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| PipelineError::Malformed(e.to_string()))?;
        fs::write(manifest_path(root), text + "\n")?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self, PipelineError> {
        let path = manifest_path(root);
        let text = fs::read_to_string(&path)
            .map_err(|_| PipelineError::Missing(format!("{}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Malformed(e.to_string()))
    }

    /// Re-hashes every referenced file and checks the split invariants:
    /// train and val shape ids are disjoint, and each scene's target sits in
    /// the split the scene claims.
    pub fn verify(&self, root: &Path) -> Result<(), PipelineError> {
        for s in &self.shapes {
            s.file.verify(root)?;
        }
        for s in &self.scenes {
            s.scene_file.verify(root)?;
            s.image_file.verify(root)?;
            s.visible_file.verify(root)?;
        }
        self.groups_file.verify(root)?;
        self.mapping_file.verify(root)?;

        let train: BTreeSet<&str> = self.train_shape_ids.iter().map(String::as_str).collect();
        let val: BTreeSet<&str> = self.val_shape_ids.iter().map(String::as_str).collect();
        if let Some(both) = train.intersection(&val).next() {
            return Err(PipelineError::Integrity(format!(
                "shape {both} appears in both splits"
            )));
        }
        for s in &self.scenes {
            let expected = if train.contains(s.target_id.as_str()) {
                Split::Train
            } else if val.contains(s.target_id.as_str()) {
                Split::Val
            } else {
                return Err(PipelineError::Integrity(format!(
                    "scene {} targets unsplit shape {}",
                    s.scene_id, s.target_id
                )));
            };
            if s.split != expected {
                return Err(PipelineError::Integrity(format!(
                    "scene {} marked {:?} but its target is in the other split",
                    s.scene_id, s.split
                )));
            }
        }
        Ok(())
    }
}

fn load_manifest_verified(root: &Path) -> Result<DatasetManifest, PipelineError> {
    let m = DatasetManifest::load(root)?;
    m.verify(root)?;
    Ok(m)
}

// ---------------------------------------------------------------------------
// Dataset construction

/// Deterministic scene-type sequence honoring the mix: each position takes
/// the kind with the largest remaining quota, so after any prefix of length
/// s every kind's count is within 1 of s times its fraction.
pub fn mix_schedule(mix: &AmbiguityMix, total: usize) -> Vec<AmbiguityKind> {
    let fractions = mix.fractions();
    let mut counts = [0usize; 4];
    let mut out = Vec::with_capacity(total);
    for s in 0..total {
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for (i, (_, f)) in fractions.iter().enumerate() {
            let deficit = f * (s as f64 + 1.0) - counts[i] as f64;
            if deficit > best_deficit {
                best_deficit = deficit;
                best = i;
            }
        }
        counts[best] += 1;
        out.push(fractions[best].0);
    }
    out
}

/// Splits shape ids per category: within each category's id-sorted list,
/// every shape where `round((i+1)*f) > round(i*f)` goes to val. Deterministic
/// and stratified; no randomness to keep or replay.
pub fn split_by_shape(corpus: &[ShapeSpec], val_fraction: f64) -> (Vec<String>, Vec<String>) {
    let mut by_cat: BTreeMap<Category, Vec<&str>> = BTreeMap::new();
    for s in corpus {
        by_cat.entry(s.category).or_default().push(&s.shape_id);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for ids in by_cat.values_mut() {
        ids.sort_unstable();
        for (i, id) in ids.iter().enumerate() {
            let before = (i as f64 * val_fraction).floor();
            let after = ((i + 1) as f64 * val_fraction).floor();
            if after > before {
                val.push((*id).to_string());
            } else {
                train.push((*id).to_string());
            }
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn write_ron<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = ron::ser::to_string_pretty(value, ron::ser::PrettyConfig::default())
        .map_err(|e| PipelineError::Malformed(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

fn read_ron<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path)
        .map_err(|_| PipelineError::Missing(format!("{}", path.display())))?;
    ron::from_str(&text).map_err(|e| PipelineError::Malformed(format!("{}: {e}", path.display())))
}

/// The fully resolved config as TOML, as echoed and as hashed into eval
/// fingerprints.
pub fn resolved_toml(cfg: &RunConfig) -> Result<String, PipelineError> {
    toml::to_string_pretty(cfg).map_err(|e| PipelineError::Config(e.to_string()))
}

/// Writes the fully resolved config next to the outputs it governs.
fn echo_config(cfg: &RunConfig) -> Result<(), PipelineError> {
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.resolved.toml"), resolved_toml(cfg)?)?;
    Ok(())
}

/// Builds the whole dataset: corpus, similarity groups, scenes per the
/// ambiguity mix, renders, visible points, ground-truth mappings, and the
/// hashed manifest. Fully deterministic in the master seed.
pub fn cmd_dataset(cfg: &RunConfig) -> Result<DatasetManifest, PipelineError> {
    cfg.validate()?;
    let root = &cfg.out_dir;
    echo_config(cfg)?;
    for sub in ["shapes", "scenes", "images", "visible"] {
        fs::create_dir_all(root.join(sub))?;
    }
    let d = &cfg.dataset;
    let master = cfg.seed;

    let mut corpus = generate_corpus(derive_seed(master, "corpus"), d.shapes_per_category);
    corpus.retain(|s| d.categories.contains(&s.category));
    let mut shape_records = Vec::with_capacity(corpus.len());
    for spec in &corpus {
        let path = shape_path(root, &spec.shape_id);
        write_shape_spec(&path, spec)?;
        shape_records.push(ShapeRecord {
            shape_id: spec.shape_id.clone(),
            category: spec.category,
            file: FileEntry::new(root, &path)?,
        });
    }
    shape_records.sort_by(|a, b| a.shape_id.cmp(&b.shape_id));

    let (train_ids, val_ids) = split_by_shape(&corpus, d.val_fraction);
    let val_set: BTreeSet<&str> = val_ids.iter().map(String::as_str).collect();

    let groups = crate::hypomap::group_shapes(
        &corpus,
        d.geo_threshold,
        derive_seed(master, "group-samples"),
    );
    let groups_path = root.join("groups.ron");
    write_ron(&groups_path, &groups)?;

    let planned = corpus.len() * d.views_per_shape;
    let kinds = mix_schedule(&d.mix, planned);
    let mut scenes: Vec<SceneSpec> = Vec::with_capacity(planned);
    let mut skipped = Vec::new();
    for (si, shape) in corpus.iter().enumerate() {
        let pool: Vec<ShapeSpec> = corpus
            .iter()
            .filter(|s| s.shape_id != shape.shape_id)
            .cloned()
            .collect();
        for view in 0..d.views_per_shape {
            let kind = kinds[si * d.views_per_shape + view];
            let scene_id = format!("{}-v{view}", shape.shape_id);
            let mut built = None;
            for retry in 0..=d.retries_per_scene {
                let seed = derive_seed(master, &format!("scene/{scene_id}/r{retry}"));
                let made = match kind {
                    AmbiguityKind::Clean => Ok(make_clean_scene(seed, shape)),
                    AmbiguityKind::Occlusion => make_occlusion_scene(seed, shape, &pool),
                    AmbiguityKind::Offset => {
                        make_truncation_scene(seed, shape, TruncationMode::Offset)
                    }
                    AmbiguityKind::Closeup => {
                        make_truncation_scene(seed, shape, TruncationMode::Closeup)
                    }
                };
                if let Ok(mut scene) = made {
                    scene.scene_id = scene_id.clone();
                    scene.render_profile = d.profile;
                    built = Some(scene);
                    break;
                }
            }
            match built {
                Some(s) => scenes.push(s),
                None => skipped.push(scene_id),
            }
        }
    }
    if skipped.len() * 10 > planned {
        return Err(PipelineError::TooManySkipped {
            skipped: skipped.len(),
            planned,
        });
    }

    let mut scene_records = Vec::with_capacity(scenes.len());
    for scene in &scenes {
        let id = &scene.scene_id;
        let spath = scene_path(root, id);
        write_ron(&spath, scene)?;
        let image = raycast(scene);
        let ipath = image_path(root, id);
        write_image(&ipath, &image)?;
        let visible = visible_points_from(scene, &image)?;
        let vpath = visible_path(root, id);
        write_points(&vpath, &visible)?;
        let target_id = scene.target.shape_id.clone();
        let split = if val_set.contains(target_id.as_str()) {
            Split::Val
        } else {
            Split::Train
        };
        scene_records.push(SceneRecord {
            scene_id: id.clone(),
            category: scene.target.category,
            ambiguity: scene.ambiguity,
            split,
            scene_file: FileEntry::new(root, &spath)?,
            image_file: FileEntry::new(root, &ipath)?,
            visible_file: FileEntry::new(root, &vpath)?,
            target_id,
        });
    }
    scene_records.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));

    let mut entries = Vec::with_capacity(scenes.len());
    for scene in &scenes {
        let group = group_of(&groups, &scene.target.shape_id).ok_or_else(|| {
            PipelineError::Integrity(format!("shape {} missing from groups", scene.target.shape_id))
        })?;
        entries.push(build_mapping(
            scene,
            group,
            &corpus,
            d.label_agreement,
            d.visible_cd,
        )?);
    }
    entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mapping = GtMapping { entries };
    let mapping_path = root.join("mapping.ron");
    write_mapping(&mapping_path, &mapping)?;

    let manifest = DatasetManifest {
        version: 1,
        master_seed: master,
        grid_res: d.grid_res,
        profile: d.profile,
        shapes: shape_records,
        scenes: scene_records,
        groups_file: FileEntry::new(root, &groups_path)?,
        mapping_file: FileEntry::new(root, &mapping_path)?,
        mapping_mean_size: mapping.mean_size(),
        train_shape_ids: train_ids,
        val_shape_ids: val_ids,
        skipped_scenes: skipped,
    };
    manifest.save(root)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Shared artifact loading

fn read_shape(root: &Path, id: &str) -> Result<ShapeSpec, PipelineError> {
    Ok(read_shape_spec(&shape_path(root, id))?)
}

fn load_groups(root: &Path) -> Result<Vec<SimilarGroup>, PipelineError> {
    read_ron(&root.join("groups.ron"))
}

fn load_gt_mapping(root: &Path) -> Result<GtMapping, PipelineError> {
    Ok(read_mapping(&root.join("mapping.ron"))?)
}

/// Shape ids any example under this split and mapping mode can reference.
fn mapped_ids(
    manifest: &DatasetManifest,
    mapping: &GtMapping,
    groups: &[SimilarGroup],
    split: Split,
    mode: MappingMode,
) -> Result<BTreeSet<String>, PipelineError> {
    let mut ids = BTreeSet::new();
    for rec in manifest.scenes.iter().filter(|r| r.split == split) {
        let entry = mapping.entry_for(&rec.scene_id).ok_or_else(|| {
            PipelineError::Missing(format!("mapping entry for scene {}", rec.scene_id))
        })?;
        let group = group_of(groups, &rec.target_id).ok_or_else(|| {
            PipelineError::Missing(format!("similar group of shape {}", rec.target_id))
        })?;
        ids.extend(mapping_mode(entry, mode, group).shape_ids);
    }
    Ok(ids)
}

/// Index grid per shape id: the codec export when `cache_root` has one,
/// else encoded on the fly (voxelize + quantize), which matches the export
/// bit for bit. Fine-tuning passes no cache because its shapes come from a
/// different run whose ids need not denote the same geometry.
fn index_grids_for(
    dataset_root: &Path,
    cache_root: Option<&Path>,
    ids: &BTreeSet<String>,
    codec_store: &ParamStore<S>,
    codec_cfg: &CodecConfig,
) -> Result<BTreeMap<String, IndexGrid>, PipelineError> {
    let mut out = BTreeMap::new();
    for id in ids {
        let cached = cache_root.map(|r| index_path(r, id)).filter(|p| p.is_file());
        let ig = match cached {
            Some(p) => read_index_grid(&p)?,
            None => {
                let spec = read_shape(dataset_root, id)?;
                let grid = voxelize(&spec, codec_cfg.grid_res, codec_cfg.truncation)?;
                encode_grid(codec_store, codec_cfg, &grid)?
            }
        };
        out.insert(id.clone(), ig);
    }
    Ok(out)
}

/// One training/eval example per scene of the split: its image plus the
/// index grids of every ground truth the mapping mode admits.
fn assemble_examples(
    dataset_root: &Path,
    manifest: &DatasetManifest,
    mapping: &GtMapping,
    groups: &[SimilarGroup],
    split: Split,
    mode: MappingMode,
    indices: &BTreeMap<String, IndexGrid>,
) -> Result<Vec<PriorExample>, PipelineError> {
    let mut out = Vec::new();
    for rec in manifest.scenes.iter().filter(|r| r.split == split) {
        let entry = mapping.entry_for(&rec.scene_id).ok_or_else(|| {
            PipelineError::Missing(format!("mapping entry for scene {}", rec.scene_id))
        })?;
        let group = group_of(groups, &rec.target_id).ok_or_else(|| {
            PipelineError::Missing(format!("similar group of shape {}", rec.target_id))
        })?;
        let entry = mapping_mode(entry, mode, group);
        let image = read_image(&dataset_root.join(&rec.image_file.path))?;
        let gts = entry
            .shape_ids
            .iter()
            .map(|id| {
                indices
                    .get(id)
                    .cloned()
                    .ok_or_else(|| PipelineError::Missing(format!("index grid of {id}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push(PriorExample { image, gts });
    }
    Ok(out)
}

fn write_lines(path: &Path, header: &str, lines: &[String], append: bool) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = String::new();
    if !append || !path.is_file() {
        text.push_str(header);
        text.push('\n');
    } else {
        text = fs::read_to_string(path)?;
    }
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Codec training

#[derive(Debug, Clone)]
pub struct CodecOutcome {
    pub report: CodecTrainReport,
    /// Final smoothed loss over initial (first-record) loss.
    pub loss_ratio: f64,
    pub exported: usize,
}

/// Trains the patch codec on the train split's TSDF grids, then exports an
/// index grid for every corpus shape (mapped ground truths can come from
/// either split). On a non-finite loss the last finite parameters are still
/// checkpointed before the error propagates.
pub fn cmd_train_codec(cfg: &RunConfig) -> Result<CodecOutcome, PipelineError> {
    cfg.validate()?;
    let root = &cfg.out_dir;
    let manifest = load_manifest_verified(root)?;
    let arch = &cfg.codec.arch;

    let train_set: BTreeSet<&str> = manifest.train_shape_ids.iter().map(String::as_str).collect();
    let mut grids = Vec::new();
    for rec in &manifest.shapes {
        if train_set.contains(rec.shape_id.as_str()) {
            let spec = read_shape(root, &rec.shape_id)?;
            grids.push(voxelize(&spec, arch.grid_res, arch.truncation)?);
        }
    }

    let mut store: ParamStore<S> = ParamStore::new(AdamConfig::default());
    init_codec_params(&mut store, arch, derive_seed(cfg.seed, "codec-init"));
    let tcfg = CodecTrainConfig {
        steps: cfg.codec.steps,
        batch: cfg.codec.batch,
        lr: cfg.codec.lr,
        decay_every: cfg.codec.decay_every,
        seed: derive_seed(cfg.seed, "codec-train"),
        restart_after: cfg.codec.restart_after,
    };
    let ckpt = codec_ckpt_path(root);
    let report = match train_codec(&mut store, arch, &tcfg, &grids) {
        Ok(r) => r,
        Err(e) => {
            // The store still holds the last finite parameters.
            save_checkpoint_hashed(&ckpt, &store)?;
            return Err(e.into());
        }
    };
    save_checkpoint_hashed(&ckpt, &store)?;

    let lines: Vec<String> = report
        .curve
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{}",
                r.step, r.total, r.recon, r.codebook, r.commitment
            )
        })
        .collect();
    write_lines(
        &root.join("codec").join("loss.csv"),
        "step,total,recon,codebook,commitment",
        &lines,
        false,
    )?;

    fs::create_dir_all(root.join("codec").join("indices"))?;
    let mut exported = 0;
    for rec in &manifest.shapes {
        let spec = read_shape(root, &rec.shape_id)?;
        let grid = voxelize(&spec, arch.grid_res, arch.truncation)?;
        let ig = encode_grid(&store, arch, &grid)?;
        write_index_grid(&index_path(root, &rec.shape_id), &ig)?;
        exported += 1;
    }

    let first = report.curve.first().map(|r| r.total).unwrap_or(f64::NAN);
    let last = report.curve.last().map(|r| r.total).unwrap_or(f64::NAN);
    Ok(CodecOutcome {
        loss_ratio: last / first,
        exported,
        report,
    })
}

// ---------------------------------------------------------------------------
// Prior training

#[derive(Debug, Clone)]
pub struct PriorOutcome {
    pub curve: Vec<CeRecord>,
    pub val_curve: Vec<CeRecord>,
    pub final_val_ce: f64,
}

/// Teacher-forced prior training over (view, mapped ground truth) pairs,
/// validation cross-entropy logged every `val_every` steps. With `resume`
/// an existing checkpoint continues its exact trajectory; training always
/// stops at the configured total step count.
pub fn cmd_train_prior(cfg: &RunConfig, resume: bool) -> Result<PriorOutcome, PipelineError> {
    cfg.validate()?;
    let root = &cfg.out_dir;
    let manifest = load_manifest_verified(root)?;
    let codec: ParamStore<S> = load_checkpoint_verified(&codec_ckpt_path(root))?;
    let groups = load_groups(root)?;
    let mapping = load_gt_mapping(root)?;

    let mode = cfg.prior.mapping;
    let mut ids = mapped_ids(&manifest, &mapping, &groups, Split::Train, mode)?;
    ids.extend(mapped_ids(&manifest, &mapping, &groups, Split::Val, mode)?);
    let indices = index_grids_for(root, Some(root), &ids, &codec, &cfg.codec.arch)?;
    let train = assemble_examples(root, &manifest, &mapping, &groups, Split::Train, mode, &indices)?;
    let val = assemble_examples(root, &manifest, &mapping, &groups, Split::Val, mode, &indices)?;

    let ckpt = prior_ckpt_path(root);
    let mut store: ParamStore<S> = if resume && ckpt.is_file() {
        load_checkpoint_verified(&ckpt)?
    } else {
        let mut s = ParamStore::new(AdamConfig::default());
        init_prior_params(&mut s, &cfg.prior.arch, derive_seed(cfg.seed, "prior-init"));
        s
    };
    let started_at = store.step;
    if started_at >= cfg.prior.steps {
        return Err(PipelineError::Config(format!(
            "checkpoint already has {started_at} steps, config asks for {}",
            cfg.prior.steps
        )));
    }
    let book = codec.get(CODEC_GROUP, "book").clone();

    let mut curve = Vec::new();
    let mut val_curve = Vec::new();
    while store.step < cfg.prior.steps {
        let chunk = cfg.prior.val_every.min(cfg.prior.steps - store.step);
        let tcfg = PriorTrainConfig {
            steps: chunk,
            batch: cfg.prior.batch,
            lr_tr: cfg.prior.lr_tr,
            lr_head: cfg.prior.lr_head,
            lr_xattn: cfg.prior.lr_xattn,
            lr_img: cfg.prior.lr_img,
            decay_every: cfg.prior.decay_every,
            seed: derive_seed(cfg.seed, "prior-train"),
        };
        let report = match train_prior(&mut store, &cfg.prior.arch, &book, &train, &tcfg) {
            Ok(r) => r,
            Err(e) => {
                save_checkpoint_hashed(&ckpt, &store)?;
                flush_prior_logs(root, &curve, &val_curve, started_at > 0)?;
                return Err(e.into());
            }
        };
        curve.extend(report.curve);
        let vce = eval_prior_ce(&store, &cfg.prior.arch, &book, &val)?;
        val_curve.push(CeRecord {
            step: store.step,
            ce: vce,
        });
    }
    save_checkpoint_hashed(&ckpt, &store)?;
    flush_prior_logs(root, &curve, &val_curve, started_at > 0)?;

    let final_val_ce = val_curve.last().map(|r| r.ce).unwrap_or(f64::NAN);
    Ok(PriorOutcome {
        curve,
        val_curve,
        final_val_ce,
    })
}

fn flush_prior_logs(
    root: &Path,
    curve: &[CeRecord],
    val_curve: &[CeRecord],
    append: bool,
) -> Result<(), PipelineError> {
    let lines: Vec<String> = curve.iter().map(|r| format!("{},{}", r.step, r.ce)).collect();
    write_lines(&root.join("prior").join("loss.csv"), "step,ce", &lines, append)?;
    let lines: Vec<String> = val_curve
        .iter()
        .map(|r| format!("{},{}", r.step, r.ce))
        .collect();
    write_lines(
        &root.join("prior").join("val.csv"),
        "step,val_ce",
        &lines,
        append,
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Sampling

/// What to condition sampling on: a dataset scene's rendered view, or an
/// image file in the rendered format.
#[derive(Debug, Clone)]
pub enum SampleSource {
    Scene(String),
    ImageFile(PathBuf),
}

#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub dir: PathBuf,
    pub grids: Vec<PathBuf>,
    /// Hypotheses whose decoded grid had no surface crossing; their point
    /// files are written empty.
    pub degenerate: Vec<usize>,
}

/// Samples k hypotheses for one observation and writes each one's TSDF grid,
/// surface points, and per-step sampling trace under `samples/<tag>/`.
pub fn cmd_sample(
    cfg: &RunConfig,
    source: &SampleSource,
    k: usize,
    temperature: f64,
    seed: u64,
    zero_condition: bool,
) -> Result<SampleOutcome, PipelineError> {
    cfg.validate()?;
    if k == 0 {
        return Err(PipelineError::Config("k must be at least 1".into()));
    }
    let root = &cfg.out_dir;
    let codec: ParamStore<S> = load_checkpoint_verified(&codec_ckpt_path(root))?;
    let prior: ParamStore<S> = load_checkpoint_verified(&prior_ckpt_path(root))?;
    let book = codec.get(CODEC_GROUP, "book").clone();

    let (tag, image) = match source {
        SampleSource::Scene(id) => (sanitize(id), read_image(&image_path(root, id))?),
        SampleSource::ImageFile(path) => {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".to_string());
            (sanitize(&stem), read_image(path)?)
        }
    };
    let dir = root.join("samples").join(&tag);
    fs::create_dir_all(&dir)?;

    let mut grids = Vec::with_capacity(k);
    let mut degenerate = Vec::new();
    for i in 0..k {
        let hyp_seed = derive_seed(seed, &format!("hyp/{i}"));
        let (ig, trace) = if zero_condition {
            sample_shape_zero_tokens(&prior, &cfg.prior.arch, &book, temperature, hyp_seed)?
        } else {
            sample_shape(&prior, &cfg.prior.arch, &book, &image, temperature, hyp_seed)?
        };
        let grid = decode_index_grid(&codec, &cfg.codec.arch, &ig)?;

        let gpath = dir.join(format!("hyp{i}.tsdf"));
        write_tsdf(&gpath, &grid)?;
        write_trace(&dir.join(format!("hyp{i}.trce")), &trace)?;
        let points = match surface_points(&grid, METRIC_SAMPLE_COUNT, derive_seed(hyp_seed, "pts"))
        {
            Ok(p) => p,
            Err(ShapeError::NoSurface) => {
                degenerate.push(i);
                Default::default()
            }
            Err(e) => return Err(e.into()),
        };
        write_points(&dir.join(format!("hyp{i}.pts")), &points)?;
        grids.push(gpath);
    }
    Ok(SampleOutcome {
        dir,
        grids,
        degenerate,
    })
}

fn sanitize(tag: &str) -> String {
    tag.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '-'
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Evaluation

struct PriorHypothesizer<'a> {
    prior: &'a ParamStore<S>,
    arch: &'a PriorConfig,
    codec: &'a ParamStore<S>,
    codec_arch: &'a CodecConfig,
    book: crate::tensor::Tensor<S>,
    temperature: f64,
    seed: u64,
    zero_condition: bool,
}

impl Hypothesizer for PriorHypothesizer<'_> {
    fn hypothesize(&mut self, scene: &SceneSpec, image: &RenderedImage, k: usize) -> Vec<TsdfGrid> {
        (0..k)
            .map(|i| {
                let s = derive_seed(self.seed, &format!("{}/hyp{i}", scene.scene_id));
                let (ig, _) = if self.zero_condition {
                    sample_shape_zero_tokens(self.prior, self.arch, &self.book, self.temperature, s)
                } else {
                    sample_shape(self.prior, self.arch, &self.book, image, self.temperature, s)
                }
                .expect("sampling from a validated checkpoint");
                decode_index_grid(self.codec, self.codec_arch, &ig)
                    .expect("decoding a grid the prior itself produced")
            })
            .collect()
    }
}

/// Evaluates the trained pair over the val split and writes the report in
/// both formats (`report.json`, aligned-table `report.txt`), suffixed
/// `-zero` when the image tokens are zeroed.
pub fn cmd_eval(cfg: &RunConfig, zero_condition: bool) -> Result<EvalReport, PipelineError> {
    cfg.validate()?;
    let root = &cfg.out_dir;
    let manifest = load_manifest_verified(root)?;
    let codec: ParamStore<S> = load_checkpoint_verified(&codec_ckpt_path(root))?;
    let prior: ParamStore<S> = load_checkpoint_verified(&prior_ckpt_path(root))?;
    let groups = load_groups(root)?;
    let mapping = load_gt_mapping(root)?;

    let mut cases = Vec::new();
    for rec in manifest.scenes.iter().filter(|r| r.split == Split::Val) {
        if cfg.eval.max_scenes > 0 && cases.len() >= cfg.eval.max_scenes {
            break;
        }
        let scene: SceneSpec = read_ron(&root.join(&rec.scene_file.path))?;
        let entry = mapping.entry_for(&rec.scene_id).ok_or_else(|| {
            PipelineError::Missing(format!("mapping entry for scene {}", rec.scene_id))
        })?;
        let group = group_of(&groups, &rec.target_id).ok_or_else(|| {
            PipelineError::Missing(format!("similar group of shape {}", rec.target_id))
        })?;
        let entry = mapping_mode(entry, cfg.eval.mapping, group);
        let gt_shapes = entry
            .shape_ids
            .iter()
            .map(|id| read_shape(root, id))
            .collect::<Result<Vec<_>, _>>()?;
        cases.push(EvalCase {
            scene,
            category: rec.category,
            gt_shapes,
        });
    }

    let fingerprint = {
        let cfg_text = resolved_toml(cfg)?;
        let mut h = Sha256::new();
        h.update(cfg_text.as_bytes());
        h.update(sha256_file(&codec_ckpt_path(root))?.as_bytes());
        h.update(sha256_file(&prior_ckpt_path(root))?.as_bytes());
        h.update([u8::from(zero_condition)]);
        hex::encode(h.finalize())[..16].to_string()
    };

    let mut model = PriorHypothesizer {
        prior: &prior,
        arch: &cfg.prior.arch,
        codec: &codec,
        codec_arch: &cfg.codec.arch,
        book: codec.get(CODEC_GROUP, "book").clone(),
        temperature: cfg.eval.temperature,
        seed: derive_seed(cfg.seed, "eval-hyp"),
        zero_condition,
    };
    let report = evaluate_model(
        &mut model,
        &cases,
        cfg.eval.k,
        derive_seed(cfg.seed, "eval-points"),
        &fingerprint,
    )?;

    let stem = if zero_condition { "report-zero" } else { "report" };
    let dir = root.join("eval");
    fs::create_dir_all(&dir)?;
    write_report(&dir.join(format!("{stem}.json")), &report)?;
    fs::write(dir.join(format!("{stem}.txt")), format!("{report}"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Fine-tuning

#[derive(Debug, Clone, Serialize)]
pub struct FinetuneOutcome {
    /// Shifted-domain validation cross-entropy of the pretrained model.
    pub pre_ce: f64,
    /// Same after fine-tuning the conditioning path.
    pub post_ce: f64,
    /// Control trained from scratch on the shifted data, same step budget.
    pub scratch_ce: f64,
    /// Whether the frozen transformer and head came through bit-identical.
    pub frozen_bit_identical: bool,
    pub steps: u64,
}

fn frozen_digest(store: &ParamStore<S>) -> String {
    let mut h = Sha256::new();
    for g in store.groups() {
        if g.name == "tr" || g.name == "head" {
            for p in &g.params {
                h.update(p.name.as_bytes());
                for &x in p.value.data() {
                    h.update(x.to_le_bytes());
                }
            }
        }
    }
    hex::encode(h.finalize())
}

/// Adapts the pretrained prior to a shifted-profile dataset: freezes the
/// transformer and head, trains the image encoder and cross-attention, and
/// trains a from-scratch control with the same step budget for comparison.
/// Ground-truth index grids come from this run's codec, applied to the
/// shifted corpus on the fly.
pub fn cmd_finetune(cfg: &RunConfig) -> Result<FinetuneOutcome, PipelineError> {
    cfg.validate()?;
    let root = &cfg.out_dir;
    let shifted_root = &cfg.finetune.shifted_dir;
    let manifest = load_manifest_verified(shifted_root)?;
    if manifest.profile != RenderProfile::Shifted {
        return Err(PipelineError::Config(format!(
            "{} was built with the {:?} profile, expected Shifted",
            shifted_root.display(),
            manifest.profile
        )));
    }
    if manifest.grid_res != cfg.codec.arch.grid_res {
        return Err(PipelineError::Config(format!(
            "shifted dataset grid_res {} does not match codec grid_res {}",
            manifest.grid_res, cfg.codec.arch.grid_res
        )));
    }
    let codec: ParamStore<S> = load_checkpoint_verified(&codec_ckpt_path(root))?;
    let mut store: ParamStore<S> = load_checkpoint_verified(&prior_ckpt_path(root))?;
    let groups = load_groups(shifted_root)?;
    let mapping = load_gt_mapping(shifted_root)?;
    let book = codec.get(CODEC_GROUP, "book").clone();

    let mode = cfg.prior.mapping;
    let mut ids = mapped_ids(&manifest, &mapping, &groups, Split::Train, mode)?;
    ids.extend(mapped_ids(&manifest, &mapping, &groups, Split::Val, mode)?);
    let indices = index_grids_for(shifted_root, None, &ids, &codec, &cfg.codec.arch)?;
    let train = assemble_examples(
        shifted_root,
        &manifest,
        &mapping,
        &groups,
        Split::Train,
        mode,
        &indices,
    )?;
    let val = assemble_examples(
        shifted_root,
        &manifest,
        &mapping,
        &groups,
        Split::Val,
        mode,
        &indices,
    )?;

    let arch = &cfg.prior.arch;
    let pre_ce = eval_prior_ce(&store, arch, &book, &val)?;
    let before = frozen_digest(&store);
    let fcfg = FinetuneConfig {
        steps: cfg.finetune.steps,
        batch: cfg.finetune.batch,
        lr_img: cfg.finetune.lr_img,
        lr_xattn: cfg.finetune.lr_xattn,
        decay_every: cfg.finetune.decay_every,
        seed: derive_seed(cfg.seed, "finetune"),
    };
    let report = finetune(&mut store, arch, &book, &train, &fcfg)?;
    let post_ce = eval_prior_ce(&store, arch, &book, &val)?;
    let frozen_bit_identical = frozen_digest(&store) == before;

    let mut scratch: ParamStore<S> = ParamStore::new(AdamConfig::default());
    init_prior_params(&mut scratch, arch, derive_seed(cfg.seed, "scratch-init"));
    let tcfg = PriorTrainConfig {
        steps: cfg.finetune.steps,
        batch: cfg.finetune.batch,
        lr_tr: cfg.prior.lr_tr,
        lr_head: cfg.prior.lr_head,
        lr_xattn: cfg.prior.lr_xattn,
        lr_img: cfg.prior.lr_img,
        decay_every: cfg.finetune.decay_every,
        seed: derive_seed(cfg.seed, "scratch-train"),
    };
    train_prior(&mut scratch, arch, &book, &train, &tcfg)?;
    let scratch_ce = eval_prior_ce(&scratch, arch, &book, &val)?;

    let dir = root.join("finetune");
    fs::create_dir_all(&dir)?;
    save_checkpoint_hashed(&dir.join("checkpoint.ckpt"), &store)?;
    save_checkpoint_hashed(&dir.join("scratch.ckpt"), &scratch)?;
    let lines: Vec<String> = report
        .curve
        .iter()
        .map(|r| format!("{},{}", r.step, r.ce))
        .collect();
    write_lines(&dir.join("loss.csv"), "step,ce", &lines, false)?;

    let outcome = FinetuneOutcome {
        pre_ce,
        post_ce,
        scratch_ce,
        frozen_bit_identical,
        steps: cfg.finetune.steps,
    };
    let text = serde_json::to_string_pretty(&outcome)
        .map_err(|e| PipelineError::Malformed(e.to_string()))?;
    fs::write(dir.join("report.json"), text + "\n")?;
    Ok(outcome)
}
