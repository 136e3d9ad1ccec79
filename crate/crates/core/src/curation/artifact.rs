//! Heuristic artifact detection for composed samples: duplicated layers in
//! conflicting positions and excessive layer overlap.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{Embedder, EmbeddingVector};
use crate::compositor::{bbox_iou, overlap_fraction};
use crate::error::{Error, Result};
use crate::layer::{AlphaRaster, LayerKind, MultiLayerSample, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArtifactThresholds {
    /// Embedding cosine above which two layers count as the same content.
    pub t_dup: f64,
    /// Box IoU above which same-content layers conflict.
    pub t_overlap_dup: f64,
    /// Intersection over the smaller box above which two layers overlap too much.
    pub t_overlap: f64,
    /// External classifier confidence above which a sample is flagged.
    pub t_classifier: f64,
}

impl Default for ArtifactThresholds {
    fn default() -> Self {
        Self {
            t_dup: 0.95,
            t_overlap_dup: 0.3,
            t_overlap: 0.85,
            t_classifier: 0.5,
        }
    }
}

impl ArtifactThresholds {
    pub fn check(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(-1.0..=1.0).contains(&self.t_dup)
            || !unit(self.t_overlap_dup)
            || !unit(self.t_overlap)
            || !unit(self.t_classifier)
        {
            return Err(Error::Config(format!("artifact thresholds out of range: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuplicatePair {
    pub i: usize,
    pub j: usize,
    pub cosine: f64,
    pub bbox_iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapViolation {
    pub i: usize,
    pub j: usize,
    pub overlap_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ArtifactReport {
    pub duplicate_pairs: Vec<DuplicatePair>,
    pub overlap_violations: Vec<OverlapViolation>,
    /// `1 - prod(1 - severity)` over all findings.
    pub artifact_score: f64,
    pub classifier_score: Option<f64>,
}

impl ArtifactReport {
    pub fn is_flagged(&self, th: &ArtifactThresholds) -> bool {
        !self.duplicate_pairs.is_empty()
            || !self.overlap_violations.is_empty()
            || self.classifier_score.is_some_and(|c| c > th.t_classifier)
    }

    /// Largest severity each layer takes part in; layers without findings are absent.
    pub fn layer_severity(&self) -> BTreeMap<usize, f64> {
        let mut out = BTreeMap::new();
        let mut bump = |k: usize, s: f64| {
            let e = out.entry(k).or_insert(0.0f64);
            *e = e.max(s);
        };
        for d in &self.duplicate_pairs {
            bump(d.i, dup_severity(d));
            bump(d.j, dup_severity(d));
        }
        for o in &self.overlap_violations {
            bump(o.i, o.overlap_fraction);
            bump(o.j, o.overlap_fraction);
        }
        out
    }
}

fn dup_severity(d: &DuplicatePair) -> f64 {
    d.cosine.clamp(0.0, 1.0) * d.bbox_iou
}

/// Confidence that a composed image is artifact-prone, from an external model.
pub trait ArtifactClassifier: Send + Sync {
    fn artifact_confidence(&self, merged: &AlphaRaster) -> Result<f64>;
}

/// Embeds every layer image, in layer order.
pub fn layer_embeddings(sample: &MultiLayerSample, embedder: &dyn Embedder) -> Result<Vec<EmbeddingVector>> {
    sample
        .layers
        .par_iter()
        .map(|l| embedder.embed_image(&l.image))
        .collect()
}

/// Finds duplicate pairs and overlap violations. `embeddings` holds one
/// image embedding per layer.
pub fn artifact_heuristics(
    sample: &MultiLayerSample,
    embeddings: &[EmbeddingVector],
    th: &ArtifactThresholds,
) -> Result<ArtifactReport> {
    if sample.state < Stage::C {
        return Err(Error::Precondition(format!(
            "sample `{}` is at stage {}, needs C or later",
            sample.id, sample.state
        )));
    }
    let n = sample.layout.slots.len();
    if embeddings.len() != n {
        return Err(Error::Alignment {
            index: embeddings.len().min(n),
            reason: format!("{} embeddings for {n} layers", embeddings.len()),
        });
    }
    let slots = &sample.layout.slots;
    let mut report = ArtifactReport::default();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&slots[i].bbox, &slots[j].bbox);
            let iou = bbox_iou(a, b);
            if iou > th.t_overlap_dup {
                let cosine = embeddings[i].dot(&embeddings[j]);
                if cosine > th.t_dup {
                    report.duplicate_pairs.push(DuplicatePair {
                        i,
                        j,
                        cosine,
                        bbox_iou: iou,
                    });
                }
            }
            let background = slots[i].kind == LayerKind::Background || slots[j].kind == LayerKind::Background;
            if !background {
                let f = overlap_fraction(a, b);
                if f > th.t_overlap {
                    report.overlap_violations.push(OverlapViolation {
                        i,
                        j,
                        overlap_fraction: f,
                    });
                }
            }
        }
    }
    let keep: f64 = report
        .duplicate_pairs
        .iter()
        .map(dup_severity)
        .chain(report.overlap_violations.iter().map(|o| o.overlap_fraction))
        .map(|s| 1.0 - s.clamp(0.0, 1.0))
        .product();
    report.artifact_score = 1.0 - keep;
    Ok(report)
}

/// [`artifact_heuristics`] with embeddings computed by `embedder` and an
/// optional classifier confidence attached.
pub fn artifact_report(
    sample: &MultiLayerSample,
    embedder: &dyn Embedder,
    classifier: Option<&dyn ArtifactClassifier>,
    th: &ArtifactThresholds,
) -> Result<ArtifactReport> {
    let emb = layer_embeddings(sample, embedder)?;
    let mut report = artifact_heuristics(sample, &emb, th)?;
    if let Some(c) = classifier {
        report.classifier_score = Some(c.artifact_confidence(&sample.merged)?);
    }
    Ok(report)
}
