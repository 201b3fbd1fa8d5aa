//! Similarity groups over a shape corpus and per-image multi-hypothesis
//! ground-truth mappings.
//!
//! Two shapes belong to the same group when their part multisets match
//! exactly and their surfaces are close; a mapping then lists, for one
//! rendered scene, every group member whose substituted render explains the
//! observation (per-pixel part-label agreement plus visible-surface chamfer).
//! Chamfer values are in squared-distance units throughout, matching the
//! evaluation metrics.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{chamfer_bidirectional, MetricsError, METRIC_SAMPLE_COUNT};
use crate::render::{raycast, visible_points_from, RenderError, SceneSpec};
use crate::rng::{derive_seed, stream_rng};
use crate::shape::{Category, ShapeSpec};

/// Default single-linkage distance for grouping (bidirectional chamfer,
/// squared units, between 2048-point surface samples).
pub const GEO_THRESHOLD: f64 = 0.06;
/// Default minimum per-pixel part-label agreement for mapping inclusion.
pub const LABEL_THRESHOLD: f64 = 0.8;
/// Default maximum bidirectional chamfer between visible point sets.
pub const VISIBLE_CD_THRESHOLD: f64 = 0.04;

#[derive(Debug, Error)]
pub enum HypomapError {
    #[error("shape {0} not present in the corpus")]
    UnknownShape(String),
    #[error("scene target {target} is not a member of the group")]
    TargetNotInGroup { target: String },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed mapping file: {0}")]
    Malformed(String),
}

/// Shapes with identical part multisets whose surfaces single-link within
/// the grouping threshold. Groups partition the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarGroup {
    /// Sorted ascending.
    pub member_ids: Vec<String>,
    pub category: Category,
    /// Part count per semantic label, sorted by label.
    pub signature: Vec<(u8, usize)>,
}

/// Groups a corpus by single linkage: two shapes link iff their categories
/// and part multisets match exactly and the bidirectional chamfer between
/// their surface samples is below `geo_threshold`. Output is a partition,
/// deterministic for a given corpus.
pub fn group_shapes(
    corpus: &[ShapeSpec],
    geo_threshold: f64,
    sample_seed: u64,
) -> Vec<SimilarGroup> {
    let n = corpus.len();
    let samples: Vec<Vec<Vector3<f64>>> = corpus
        .iter()
        .map(|s| {
            let mut rng = stream_rng(derive_seed(sample_seed, &s.shape_id), "group-samples");
            s.sample_analytic_surface(METRIC_SAMPLE_COUNT, &mut rng)
                .into_iter()
                .map(|(p, _)| p)
                .collect()
        })
        .collect();
    let signatures: Vec<Vec<(u8, usize)>> = corpus.iter().map(|s| s.part_signature()).collect();

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if corpus[i].category != corpus[j].category || signatures[i] != signatures[j] {
                continue;
            }
            if find(&mut parent, i) == find(&mut parent, j) {
                continue;
            }
            let cd = chamfer_bidirectional(&samples[i], &samples[j])
                .expect("surface samples are non-empty");
            if cd < geo_threshold {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri] = rj;
            }
        }
    }

    let mut by_root: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        by_root.entry(r).or_default().push(i);
    }
    let mut groups: Vec<SimilarGroup> = by_root
        .into_values()
        .map(|members| {
            let mut ids: Vec<String> =
                members.iter().map(|&i| corpus[i].shape_id.clone()).collect();
            ids.sort();
            SimilarGroup {
                category: corpus[members[0]].category,
                signature: signatures[members[0]].clone(),
                member_ids: ids,
            }
        })
        .collect();
    groups.sort_by(|a, b| a.member_ids[0].cmp(&b.member_ids[0]));
    groups
}

/// The group containing `shape_id`, if any.
pub fn group_of<'a>(groups: &'a [SimilarGroup], shape_id: &str) -> Option<&'a SimilarGroup> {
    groups
        .iter()
        .find(|g| g.member_ids.iter().any(|m| m == shape_id))
}

/// Measured evidence that one candidate explains one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub shape_id: String,
    /// Fraction of matching part labels over the union of both renders'
    /// target pixels (background and occluder pixels count as label -1).
    pub agreement: f64,
    /// Bidirectional chamfer between the two renders' visible points.
    pub visible_cd: f64,
}

/// Ground-truth mapping for one rendered scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub image_id: String,
    pub target_id: String,
    /// Accepted ground-truth ids: target first, the rest ascending.
    pub shape_ids: Vec<String>,
    /// Evidence for every non-degenerate candidate, accepted or not.
    pub reports: Vec<CandidateReport>,
    /// Candidates whose substituted render had no target pixels.
    pub degenerate_skipped: Vec<String>,
}

/// Renders the scene once per group member (same camera, occluder, yaw, and
/// profile noise) and measures label agreement and visible-surface chamfer
/// against the target's render. Returns reports sorted by shape id plus the
/// ids of candidates whose render was degenerate.
pub fn evaluate_candidates(
    scene: &SceneSpec,
    group: &SimilarGroup,
    corpus: &[ShapeSpec],
) -> Result<(Vec<CandidateReport>, Vec<String>), HypomapError> {
    let target_id = &scene.target.shape_id;
    if !group.member_ids.iter().any(|m| m == target_id) {
        return Err(HypomapError::TargetNotInGroup {
            target: target_id.clone(),
        });
    }
    let by_id: HashMap<&str, &ShapeSpec> =
        corpus.iter().map(|s| (s.shape_id.as_str(), s)).collect();

    let target_img = raycast(scene);
    let target_visible = visible_points_from(scene, &target_img)?;

    let mut reports = Vec::with_capacity(group.member_ids.len());
    let mut degenerate = Vec::new();
    for id in &group.member_ids {
        let candidate = by_id
            .get(id.as_str())
            .ok_or_else(|| HypomapError::UnknownShape(id.clone()))?;
        let cand_scene = scene.with_target(candidate);
        let cand_img = raycast(&cand_scene);
        if cand_img.target_pixel_count() == 0 {
            degenerate.push(id.clone());
            continue;
        }

        let mut union = 0usize;
        let mut matching = 0usize;
        for idx in 0..cand_img.part_labels.len() {
            if target_img.ch_mask[idx] == 1.0 || cand_img.ch_mask[idx] == 1.0 {
                union += 1;
                if target_img.part_labels[idx] == cand_img.part_labels[idx] {
                    matching += 1;
                }
            }
        }
        let agreement = matching as f64 / union as f64;

        let cand_visible = visible_points_from(&cand_scene, &cand_img)?;
        let visible_cd = chamfer_bidirectional(&cand_visible.points, &target_visible.points)?;
        reports.push(CandidateReport {
            shape_id: id.clone(),
            agreement,
            visible_cd,
        });
    }
    reports.sort_by(|a, b| a.shape_id.cmp(&b.shape_id));
    Ok((reports, degenerate))
}

/// Pure inclusion rule: target first, then every other candidate meeting
/// both thresholds, ascending. Monotone: raising `visible_cd_threshold` or
/// lowering `label_threshold` never drops an id.
pub fn included_ids(
    target_id: &str,
    reports: &[CandidateReport],
    label_threshold: f64,
    visible_cd_threshold: f64,
) -> Vec<String> {
    let mut ids = vec![target_id.to_string()];
    ids.extend(
        reports
            .iter()
            .filter(|r| {
                r.shape_id != target_id
                    && r.agreement >= label_threshold
                    && r.visible_cd <= visible_cd_threshold
            })
            .map(|r| r.shape_id.clone()),
    );
    ids
}

/// Builds the mapping entry for one scene from its similarity group.
pub fn build_mapping(
    scene: &SceneSpec,
    group: &SimilarGroup,
    corpus: &[ShapeSpec],
    label_threshold: f64,
    visible_cd_threshold: f64,
) -> Result<MappingEntry, HypomapError> {
    let (reports, degenerate_skipped) = evaluate_candidates(scene, group, corpus)?;
    let target_id = scene.target.shape_id.clone();
    Ok(MappingEntry {
        image_id: scene.scene_id.clone(),
        shape_ids: included_ids(&target_id, &reports, label_threshold, visible_cd_threshold),
        target_id,
        reports,
        degenerate_skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MappingMode {
    /// Only the rendered target counts as ground truth.
    None,
    /// The measured mapping, unchanged.
    Strict,
    /// Every member of the target's similarity group counts.
    Coarse,
}

impl fmt::Display for MappingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MappingMode::None => "none",
            MappingMode::Strict => "strict",
            MappingMode::Coarse => "coarse",
        })
    }
}

impl FromStr for MappingMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(MappingMode::None),
            "strict" => Ok(MappingMode::Strict),
            "coarse" => Ok(MappingMode::Coarse),
            other => Err(format!("unknown mapping mode {other:?}")),
        }
    }
}

/// Reinterprets an entry under a mapping mode, adjusting only the accepted
/// id list; evidence and skip records stay as measured.
pub fn mapping_mode(entry: &MappingEntry, mode: MappingMode, group: &SimilarGroup) -> MappingEntry {
    let mut out = entry.clone();
    out.shape_ids = match mode {
        MappingMode::None => vec![entry.target_id.clone()],
        MappingMode::Strict => entry.shape_ids.clone(),
        MappingMode::Coarse => {
            let mut ids = vec![entry.target_id.clone()];
            ids.extend(
                group
                    .member_ids
                    .iter()
                    .filter(|m| **m != entry.target_id)
                    .cloned(),
            );
            ids
        }
    };
    out
}

/// All mapping entries of a dataset, ordered by image id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GtMapping {
    pub entries: Vec<MappingEntry>,
}

impl GtMapping {
    pub fn entry_for(&self, image_id: &str) -> Option<&MappingEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    /// Mean accepted-candidate count per image.
    pub fn mean_size(&self) -> f64 {
        let total: usize = self.entries.iter().map(|e| e.shape_ids.len()).sum();
        total as f64 / self.entries.len() as f64
    }
}

pub fn write_mapping(path: &Path, mapping: &GtMapping) -> Result<(), HypomapError> {
    let text = ron::ser::to_string_pretty(mapping, ron::ser::PrettyConfig::default())
        .map_err(|e| HypomapError::Malformed(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_mapping(path: &Path) -> Result<GtMapping, HypomapError> {
    let text = std::fs::read_to_string(path)?;
    ron::from_str(&text).map_err(|e| HypomapError::Malformed(e.to_string()))
}
