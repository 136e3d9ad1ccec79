//! Applying human review decisions to a staged manifest.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::compositor::composite;
use crate::error::{Error, Result};
use crate::layer::{ManifestEntry, MultiLayerSample, SampleStore, Scores, Stage};
use crate::review::{latest_decisions, ReviewDecision, Verdict};

/// What a layer-level reject does to its sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRejectPolicy {
    /// Remove the rejected layers and re-composite under a new id.
    #[default]
    DropLayer,
    /// Treat the whole sample as rejected.
    DropSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewOutcome {
    pub manifest: Vec<ManifestEntry>,
    pub tombstoned: Vec<String>,
    /// `(source id, new id)` for samples rebuilt without rejected layers.
    pub rebuilt: Vec<(String, String)>,
}

/// Id of the sample rebuilt from `id` without `layers`.
pub fn rebuilt_id(id: &str, layers: &[usize]) -> String {
    let sorted: BTreeSet<_> = layers.iter().collect();
    let list: Vec<String> = sorted.iter().map(|i| i.to_string()).collect();
    format!("{id}~drop{}", list.join("-"))
}

/// Copy of `sample` without the listed layers, re-composited.
pub fn drop_layers(sample: &MultiLayerSample, layers: &[usize], new_id: &str) -> Result<MultiLayerSample> {
    let drop: HashSet<usize> = layers.iter().copied().collect();
    if let Some(bad) = drop.iter().find(|&&i| i >= sample.layers.len()) {
        return Err(Error::Precondition(format!(
            "sample `{}` has no layer {bad}",
            sample.id
        )));
    }
    let mut layout = sample.layout.clone();
    let keep = |i: &usize| !drop.contains(i);
    layout.slots = sample
        .layout
        .slots
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(i))
        .map(|(_, s)| s.clone())
        .collect();
    let kept_layers: Vec<_> = sample
        .layers
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(i))
        .map(|(_, l)| l.clone())
        .collect();
    let merged = composite(&layout, &kept_layers)?.merged;
    Ok(MultiLayerSample {
        id: new_id.to_string(),
        layout,
        layers: kept_layers,
        merged,
        state: sample.state,
        scores: sample.scores.clone(),
        style: sample.style.clone(),
    })
}

/// Re-indexes `prefix.<i>` score keys after removing `dropped` layers.
fn reindex_scores(scores: &Scores, dropped: &[usize]) -> Scores {
    let mut out = Scores::new();
    for (k, &v) in scores {
        let layer = k
            .rsplit_once('.')
            .and_then(|(p, i)| i.parse::<usize>().ok().map(|i| (p, i)));
        match layer {
            Some((prefix, i)) => {
                if dropped.contains(&i) {
                    continue;
                }
                let shift = dropped.iter().filter(|&&d| d < i).count();
                out.insert(format!("{prefix}.{}", i - shift), v);
            }
            None => {
                out.insert(k.clone(), v);
            }
        }
    }
    out
}

/// Applies the latest decision per sample: accepts advance to stage F,
/// rejects are tombstoned (left out of the manifest), layer-level rejects
/// follow `policy`. Entries without a decision pass through unchanged.
pub fn apply_review_decisions(
    manifest: &[ManifestEntry],
    decisions: &[ReviewDecision],
    store: &SampleStore,
    policy: LayerRejectPolicy,
) -> Result<ReviewOutcome> {
    let known: HashSet<&str> = manifest.iter().map(|e| e.id.as_str()).collect();
    let unknown: BTreeSet<String> = decisions
        .iter()
        .filter(|d| !known.contains(d.sample_id.as_str()))
        .map(|d| d.sample_id.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownSamples(unknown.into_iter().collect()));
    }
    let latest = latest_decisions(decisions);

    let mut out = ReviewOutcome {
        manifest: Vec::with_capacity(manifest.len()),
        tombstoned: Vec::new(),
        rebuilt: Vec::new(),
    };
    for entry in manifest {
        let Some(d) = latest.get(entry.id.as_str()) else {
            out.manifest.push(entry.clone());
            continue;
        };
        d.check_layers(entry.layer_count)?;
        match (&d.verdict, policy) {
            (Verdict::Accept, _) => {
                let mut e = entry.clone();
                e.stage = e.stage.advance(Stage::F)?;
                out.manifest.push(e);
            }
            (Verdict::Reject, _) | (Verdict::AcceptWithLayerRejects { .. }, LayerRejectPolicy::DropSample) => {
                out.tombstoned.push(entry.id.clone());
            }
            (Verdict::AcceptWithLayerRejects { layers }, LayerRejectPolicy::DropLayer) => {
                if layers.len() >= entry.layer_count {
                    out.tombstoned.push(entry.id.clone());
                    continue;
                }
                let source = store.read(&entry.path)?;
                let new_id = rebuilt_id(&entry.id, layers);
                let rebuilt = drop_layers(&source, layers, &new_id)?;
                let mut e = store.write(&rebuilt)?;
                e.stage = entry.stage.advance(Stage::F)?;
                e.scores = reindex_scores(&entry.scores, layers);
                out.manifest.push(e);
                out.tombstoned.push(entry.id.clone());
                out.rebuilt.push((entry.id.clone(), new_id));
            }
        }
    }
    Ok(out)
}
