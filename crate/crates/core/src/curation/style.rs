//! Style-conditioned regeneration of existing samples and the TIPS gate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{Backends, Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::layer::{LayerKind, MultiLayerSample};
use crate::layerflux::{synth_multilayer, LayerSynthConfig};
use crate::prompting::{paste_on_gray, PromptRegistry, GRAY};
use crate::tips::{tips_score, TipsModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegenConfig {
    pub synth: LayerSynthConfig,
    /// Side of the square gray canvas each layer is shown on for recaptioning.
    pub recaption_canvas: u32,
}

impl Default for RegenConfig {
    fn default() -> Self {
        Self {
            synth: LayerSynthConfig::default(),
            recaption_canvas: 512,
        }
    }
}

/// Asks the recaptioner for a style-aware caption of every layer.
pub fn restyle_captions(
    source: &MultiLayerSample,
    style: &str,
    recaption_canvas: u32,
    prompts: &PromptRegistry,
    backends: &Backends,
) -> Result<Vec<String>> {
    if recaption_canvas == 0 {
        return Err(Error::Config("recaption_canvas must be positive".into()));
    }
    let results: Vec<Result<String>> = source
        .layers
        .par_iter()
        .map(|layer| {
            let shown = paste_on_gray(layer, (recaption_canvas, recaption_canvas), GRAY)?;
            let req = prompts.build_style_recaption_request(shown, style)?;
            backends.recaptioner.recaption(&req.image, &req.instruction)
        })
        .collect();
    let mut captions = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(c) if !c.trim().is_empty() => captions.push(c),
            Ok(_) => failures.push((i, "recaptioner returned an empty caption".to_string())),
            Err(e) => failures.push((i, e.to_string())),
        }
    }
    if !failures.is_empty() {
        return Err(Error::SampleFailed {
            sample: source.id.clone(),
            failures,
        });
    }
    Ok(captions)
}

/// Rewrites each layer caption in `style` and synthesizes a new sample on
/// the source's layout geometry. The result is at stage C and carries the
/// style tag on the sample and every layer.
pub fn regenerate_with_style(
    source: &MultiLayerSample,
    style: &str,
    new_id: &str,
    cfg: &RegenConfig,
    prompts: &PromptRegistry,
    backends: &Backends,
    seed: u64,
) -> Result<MultiLayerSample> {
    source.check()?;
    let captions = restyle_captions(source, style, cfg.recaption_canvas, prompts, backends)?;
    let mut layout = source.layout.clone();
    for (slot, caption) in layout.slots.iter_mut().zip(captions) {
        slot.caption = caption;
    }
    let mut sample = synth_multilayer(new_id, &layout, &cfg.synth, prompts, backends, seed)?;
    for layer in &mut sample.layers {
        layer.style = Some(style.to_string());
    }
    sample.style = Some(style.to_string());
    Ok(sample)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub accept: bool,
    pub threshold: f64,
    pub layer_scores: Vec<f64>,
    /// Non-background layers scoring below the threshold.
    pub rejected_layers: Vec<usize>,
}

/// Image and caption embeddings of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerEmbeddings {
    pub image: EmbeddingVector,
    pub text: EmbeddingVector,
}

pub fn embed_layers(sample: &MultiLayerSample, embedder: &dyn Embedder) -> Result<Vec<LayerEmbeddings>> {
    sample
        .layers
        .par_iter()
        .map(|l| {
            Ok(LayerEmbeddings {
                image: embedder.embed_image(&l.image)?,
                text: embedder.embed_text(&l.caption)?,
            })
        })
        .collect()
}

/// Rejects the sample when any non-background layer scores below
/// `threshold`. Background layers are scored but never gate.
pub fn tips_gate(
    sample: &MultiLayerSample,
    embeddings: &[LayerEmbeddings],
    model: &TipsModel,
    threshold: f64,
) -> Result<FilterDecision> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("TIPS threshold {threshold} outside [-1, 1]")));
    }
    let n = sample.layers.len();
    if embeddings.len() < n {
        let missing: Vec<String> = (embeddings.len()..n).map(|i| i.to_string()).collect();
        return Err(Error::MissingInput(format!(
            "embeddings for layers {} of sample `{}`",
            missing.join(", "),
            sample.id
        )));
    }
    let mut layer_scores = Vec::with_capacity(n);
    let mut rejected_layers = Vec::new();
    for (i, (layer, e)) in sample.layers.iter().zip(embeddings).enumerate() {
        let s = tips_score(model, &e.image, &e.text)?;
        if layer.kind != LayerKind::Background && s < threshold {
            rejected_layers.push(i);
        }
        layer_scores.push(s);
    }
    Ok(FilterDecision {
        accept: rejected_layers.is_empty(),
        threshold,
        layer_scores,
        rejected_layers,
    })
}

pub fn tips_gate_with(
    sample: &MultiLayerSample,
    embedder: &dyn Embedder,
    model: &TipsModel,
    threshold: f64,
) -> Result<FilterDecision> {
    let emb = embed_layers(sample, embedder)?;
    tips_gate(sample, &emb, model, threshold)
}

/// Same canvas and, slot for slot, the same box, z and kind.
pub fn same_geometry(a: &MultiLayerSample, b: &MultiLayerSample) -> bool {
    a.layout.canvas == b.layout.canvas
        && a.layout.slots.len() == b.layout.slots.len()
        && a.layout
            .slots
            .iter()
            .zip(&b.layout.slots)
            .all(|(x, y)| x.bbox == y.bbox && x.z == y.z && x.kind == y.kind)
}
