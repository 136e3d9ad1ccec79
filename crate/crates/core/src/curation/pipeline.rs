//! End-to-end curation run from stage-B layouts to a review-staged manifest,
//! checkpointed after every step so an interrupted run can resume.
//!
//! Work directory layout:
//!
//! ```text
//! samples/<id>/...              sample store
//! checkpoints/fingerprint       hash of the config that produced the checkpoints
//! checkpoints/stage_<S>.jsonl   manifest after step S (C, D, E, staged)
//! checkpoints/stage_<S>.json    step report
//! manifest.jsonl                final review-staged manifest
//! report.json                   stage-transition report
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::artifact::{artifact_report, ArtifactThresholds};
use super::select::{aesthetic_rank_select, stratified_style_sample, AESTHETIC_KEY};
use super::style::{embed_layers, regenerate_with_style, tips_gate, RegenConfig};
use crate::backends::{Backends, BackendsConfig};
use crate::error::{Error, Result};
use crate::layer::store::{encode_png_rgb, read_manifest, write_atomic, write_manifest};
use crate::layer::{
    AlphaRaster, BBox, CanvasSize, LayerKind, LayerSlot, ManifestEntry, MultiLayerSample,
    SampleStore, SemanticLayout, Stage,
};
use crate::layerflux::{synth_multilayer, LayerSynthConfig};
use crate::prompting::{PromptRegistry, DEFAULT_STYLES};
use crate::review::{artifact_layer_key, tips_layer_key, ARTIFACT_SCORE_KEY};
use crate::seed::derive_seed;
use crate::tips::{TipsModel, DEFAULT_TAU};

/// Reference production scale: crawled layouts, selected layouts,
/// reference pool, styles, layouts per style and released samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ScalePlan {
    pub crawled: usize,
    pub layouts: usize,
    pub pool: usize,
    pub styles: usize,
    pub per_style: usize,
    pub released: usize,
}

pub const PRODUCTION_SCALE: ScalePlan = ScalePlan {
    crawled: 800_000,
    layouts: 200_000,
    pool: 80_000,
    styles: 20,
    per_style: 2_000,
    released: 20_000,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub artifact_filter: bool,
    pub rank_select: bool,
    pub style_regen: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            artifact_filter: true,
            rank_select: true,
            style_regen: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Stage-B layouts as JSON lines of [`LayoutRecord`]. When absent,
    /// `mock_layouts` random layouts are generated from the seed.
    pub layouts: Option<PathBuf>,
    pub mock_layouts: usize,
    pub stages: StageToggles,
    pub synth: LayerSynthConfig,
    pub artifact: ArtifactThresholds,
    /// Fraction kept per layer-count group at rank-select.
    pub rank_proportion: f64,
    /// JSON object mapping sample id to an external aesthetic score. When
    /// absent, merged-image colourfulness stands in.
    pub aesthetic_scores: Option<PathBuf>,
    pub styles: Vec<String>,
    pub n_per_style: usize,
    pub recaption_canvas: u32,
    pub tips_model: Option<PathBuf>,
    /// -1 disables the gate.
    pub tips_threshold: f64,
    /// Prompt registry overrides (JSON).
    pub prompts: Option<PathBuf>,
    pub backends: BackendsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PipelineConfig {
    /// Small mock-backed run that finishes in seconds.
    pub fn desk() -> Self {
        Self {
            seed: 7,
            layouts: None,
            mock_layouts: 50,
            stages: StageToggles::default(),
            synth: LayerSynthConfig {
                long_side: 256,
                ..Default::default()
            },
            artifact: ArtifactThresholds::default(),
            rank_proportion: 0.4,
            aesthetic_scores: None,
            styles: vec!["ink".into(), "watercolor".into()],
            n_per_style: 5,
            recaption_canvas: 128,
            tips_model: None,
            tips_threshold: -1.0,
            prompts: None,
            backends: BackendsConfig::default(),
        }
    }

    /// Production-scale settings matching [`PRODUCTION_SCALE`]: 200K input
    /// layouts, 20 styles with 2,000 layouts each at 1024 px.
    pub fn production(layouts: PathBuf) -> Self {
        Self {
            layouts: Some(layouts),
            mock_layouts: 0,
            synth: LayerSynthConfig::default(),
            styles: DEFAULT_STYLES[..PRODUCTION_SCALE.styles]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            n_per_style: PRODUCTION_SCALE.per_style,
            recaption_canvas: 512,
            ..Self::desk()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn check(&self) -> Result<()> {
        self.synth.check()?;
        self.artifact.check()?;
        if !(self.rank_proportion > 0.0 && self.rank_proportion <= 1.0) {
            return Err(Error::Config("rank_proportion must be in (0, 1]".into()));
        }
        if !(-1.0..=1.0).contains(&self.tips_threshold) {
            return Err(Error::Config("tips_threshold must be in [-1, 1]".into()));
        }
        if self.stages.style_regen && (self.styles.is_empty() || self.n_per_style == 0) {
            return Err(Error::Config(
                "style regeneration needs at least one style and n_per_style >= 1".into(),
            ));
        }
        if self.recaption_canvas == 0 {
            return Err(Error::Config("recaption_canvas must be positive".into()));
        }
        if self.layouts.is_none() && self.mock_layouts == 0 {
            return Err(Error::Config("no layouts file and mock_layouts is 0".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

/// One stage-B layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutRecord {
    pub id: String,
    pub layout: SemanticLayout,
}

pub fn read_layouts(path: &Path) -> Result<Vec<LayoutRecord>> {
    read_jsonl(path)
}

pub fn write_layouts(path: &Path, layouts: &[LayoutRecord]) -> Result<()> {
    write_jsonl(path, layouts)
}

const OBJECTS: [&str; 12] = [
    "a red apple",
    "a vintage bicycle",
    "a paper lantern",
    "a sleeping cat",
    "a coffee cup with steam",
    "a potted cactus",
    "a hot air balloon",
    "a leather boot",
    "a glass bottle",
    "a sunflower",
    "a desk lamp",
    "a toy robot",
];
const WORDS: [&str; 8] = ["SALE", "OPEN", "Summer Fest", "NEW", "Hello", "Concert", "Menu", "2026"];
const DECOR: [&str; 6] = [
    "a swirl of confetti",
    "a row of small stars",
    "a torn paper edge",
    "a ribbon banner",
    "a cluster of leaves",
    "a halftone dot pattern",
];
const SCENES: [&str; 5] = [
    "a pale blue gradient backdrop",
    "a warm beige paper texture",
    "a dark green felt surface",
    "a soft pink studio wall",
    "a sunny beach at noon",
];

/// Random layouts with a background plus 1..=9 foreground slots on a
/// 512x512 canvas, ids `L00000`, `L00001`, ...
pub fn mock_layouts(n: usize, seed: u64) -> Vec<LayoutRecord> {
    let canvas = CanvasSize::new(512, 512);
    (0..n)
        .map(|i| {
            let id = format!("L{i:05}");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["layout", &id]));
            let fg = rng.random_range(1..=9usize);
            let mut slots = vec![LayerSlot {
                bbox: BBox::new(0, 0, canvas.width, canvas.height),
                z: 0,
                caption: SCENES[rng.random_range(0..SCENES.len())].into(),
                kind: LayerKind::Background,
            }];
            for k in 0..fg {
                let roll = rng.random_range(0..10);
                let (kind, caption) = match roll {
                    0..=5 => (LayerKind::Object, OBJECTS[rng.random_range(0..OBJECTS.len())].to_string()),
                    6..=7 => (
                        LayerKind::Text,
                        format!("Text: \"{}\"", WORDS[rng.random_range(0..WORDS.len())]),
                    ),
                    _ => (LayerKind::Decoration, DECOR[rng.random_range(0..DECOR.len())].to_string()),
                };
                let w = rng.random_range(64..=320u32);
                let h = if kind == LayerKind::Text {
                    (w / rng.random_range(2..=5)).max(24)
                } else {
                    rng.random_range(64..=320u32)
                };
                let x = rng.random_range(0..=(canvas.width - w)) as i32;
                let y = rng.random_range(0..=(canvas.height - h)) as i32;
                slots.push(LayerSlot {
                    bbox: BBox::new(x, y, w, h),
                    z: k as i32 + 1,
                    caption,
                    kind,
                });
            }
            let global_caption = format!(
                "A poster with {} on {}",
                slots[1].caption,
                slots[0].caption
            );
            LayoutRecord {
                id,
                layout: SemanticLayout {
                    canvas,
                    slots,
                    global_caption,
                },
            }
        })
        .collect()
}

/// Hasler and Suesstrunk colourfulness of an image flattened on white.
pub fn colorfulness(image: &AlphaRaster) -> f64 {
    let flat = image.flatten([255, 255, 255]);
    let n = flat.pixels().count().max(1) as f64;
    let (mut s_rg, mut s_yb, mut q_rg, mut q_yb) = (0.0, 0.0, 0.0, 0.0);
    for [r, g, b] in flat.pixels() {
        let (r, g, b) = (r as f64, g as f64, b as f64);
        let rg = r - g;
        let yb = 0.5 * (r + g) - b;
        s_rg += rg;
        s_yb += yb;
        q_rg += rg * rg;
        q_yb += yb * yb;
    }
    let (m_rg, m_yb) = (s_rg / n, s_yb / n);
    let v_rg = (q_rg / n - m_rg * m_rg).max(0.0);
    let v_yb = (q_yb / n - m_yb * m_yb).max(0.0);
    (v_rg + v_yb).sqrt() + 0.3 * (m_rg * m_rg + m_yb * m_yb).sqrt()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SynthStep {
    pub input: usize,
    pub synthesized: usize,
    pub failed: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ArtifactStep {
    pub checked: usize,
    pub passed: usize,
    pub flagged: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankStep {
    pub candidates: usize,
    pub selected: usize,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StyleStep {
    pub assignments: usize,
    pub with_replacement: bool,
    pub regenerated: usize,
    pub failed: Vec<(String, String)>,
    pub artifact_flagged: Vec<String>,
    pub tips_rejected: Vec<(String, Vec<usize>)>,
    pub staged: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageReport {
    pub layouts: usize,
    pub synth: Option<SynthStep>,
    pub artifact: Option<ArtifactStep>,
    pub rank: Option<RankStep>,
    pub style: Option<StyleStep>,
}

impl StageReport {
    /// Sample counts at B, C, D, E and review staging, as far as the run got.
    pub fn counts(&self) -> Vec<(&'static str, usize)> {
        let mut out = vec![("B", self.layouts)];
        if let Some(s) = &self.synth {
            out.push(("C", s.synthesized));
        }
        if let Some(s) = &self.artifact {
            out.push(("D", s.passed));
        }
        if let Some(s) = &self.rank {
            out.push(("E", s.selected));
        }
        if let Some(s) = &self.style {
            out.push(("staged", s.staged));
        }
        out
    }

    pub fn render_table(&self) -> String {
        let mut s = String::from("stage\tsamples\n");
        for (k, v) in self.counts() {
            s.push_str(&format!("{k}\t{v}\n"));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Stop after this stage's checkpoint (C, D or E).
    pub stop_after: Option<Stage>,
    /// Discard existing checkpoints instead of resuming.
    pub fresh: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    pub report: StageReport,
    /// Review-staged entries (empty when the run stopped early).
    pub manifest: Vec<ManifestEntry>,
    pub completed: bool,
    /// Steps loaded from checkpoints rather than recomputed.
    pub resumed: Vec<&'static str>,
}

struct Checkpoints {
    dir: PathBuf,
}

impl Checkpoints {
    fn open(work: &Path, fingerprint: &str, fresh: bool) -> Result<Self> {
        let dir = work.join("checkpoints");
        if fresh && dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let fp = dir.join("fingerprint");
        match fs::read_to_string(&fp) {
            Ok(old) if old.trim() == fingerprint => {}
            Ok(old) => {
                return Err(Error::Checkpoint(format!(
                    "{} was written by a different config ({} vs {fingerprint}); rerun with fresh",
                    dir.display(),
                    old.trim()
                )))
            }
            Err(_) => write_atomic(&fp, fingerprint.as_bytes())?,
        }
        Ok(Self { dir })
    }

    fn paths(&self, step: &str) -> (PathBuf, PathBuf) {
        (
            self.dir.join(format!("stage_{step}.jsonl")),
            self.dir.join(format!("stage_{step}.json")),
        )
    }

    fn load<R: DeserializeOwned>(&self, step: &str) -> Result<Option<(Vec<ManifestEntry>, R)>> {
        let (m, r) = self.paths(step);
        if !m.is_file() || !r.is_file() {
            return Ok(None);
        }
        let raw = fs::read(&r).map_err(|e| Error::io(&r, e))?;
        let report = serde_json::from_slice(&raw)?;
        Ok(Some((read_manifest(&m)?, report)))
    }

    // report first: the manifest's presence marks the step complete
    fn save<R: Serialize>(&self, step: &str, entries: &[ManifestEntry], report: &R) -> Result<()> {
        let (m, r) = self.paths(step);
        write_atomic(&r, &serde_json::to_vec_pretty(report)?)?;
        write_manifest(&m, entries)
    }
}

fn is_sample_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::SampleFailed { .. }
            | Error::QualityReject(_)
            | Error::Backend { .. }
            | Error::Transport { .. }
    )
}

fn style_slug(style: &str) -> String {
    style
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect()
}

fn sorted(mut v: Vec<ManifestEntry>) -> Vec<ManifestEntry> {
    v.sort_by(|a, b| a.id.cmp(&b.id));
    v
}

/// Runs (or resumes) the pipeline in `work_dir`.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    backends: &Backends,
    work_dir: &Path,
    opts: RunOptions,
) -> Result<PipelineRun> {
    cfg.check()?;
    let prompts = match &cfg.prompts {
        Some(p) => PromptRegistry::load(p)?,
        None => PromptRegistry::default(),
    };
    for s in &cfg.styles {
        if !prompts.has_style(s) {
            return Err(Error::Config(format!("style `{s}` is not registered")));
        }
    }
    let store = SampleStore::open(work_dir)?;
    let ckpt = Checkpoints::open(work_dir, &cfg.fingerprint()?, opts.fresh)?;
    let mut report = StageReport::default();
    let mut resumed = Vec::new();

    let layouts = match &cfg.layouts {
        Some(p) => read_layouts(p)?,
        None => mock_layouts(cfg.mock_layouts, cfg.seed),
    };
    report.layouts = layouts.len();
    let stop = |s: Stage| opts.stop_after == Some(s);
    let early = |report: StageReport, resumed| PipelineRun {
        report,
        manifest: Vec::new(),
        completed: false,
        resumed,
    };

    // B -> C
    let c = match ckpt.load::<SynthStep>("C")? {
        Some((m, r)) => {
            resumed.push("C");
            report.synth = Some(r);
            m
        }
        None => {
            let (m, r) = synth_step(cfg, &layouts, &prompts, backends, &store)?;
            ckpt.save("C", &m, &r)?;
            report.synth = Some(r);
            m
        }
    };
    if stop(Stage::C) {
        return Ok(early(report, resumed));
    }

    // C -> D
    let d = match ckpt.load::<ArtifactStep>("D")? {
        Some((m, r)) => {
            resumed.push("D");
            report.artifact = Some(r);
            m
        }
        None => {
            let (m, r) = artifact_step(cfg, &c, backends, &store)?;
            ckpt.save("D", &m, &r)?;
            report.artifact = Some(r);
            m
        }
    };
    if stop(Stage::D) {
        return Ok(early(report, resumed));
    }

    // D -> E
    let e = match ckpt.load::<RankStep>("E")? {
        Some((m, r)) => {
            resumed.push("E");
            report.rank = Some(r);
            m
        }
        None => {
            let (m, r) = rank_step(cfg, &d)?;
            ckpt.save("E", &m, &r)?;
            report.rank = Some(r);
            m
        }
    };
    if stop(Stage::E) {
        return Ok(early(report, resumed));
    }

    // E -> review staging
    let staged = match ckpt.load::<StyleStep>("staged")? {
        Some((m, r)) => {
            resumed.push("staged");
            report.style = Some(r);
            m
        }
        None => {
            let (m, r) = style_step(cfg, &e, &prompts, backends, &store)?;
            ckpt.save("staged", &m, &r)?;
            report.style = Some(r);
            m
        }
    };

    write_manifest(&work_dir.join("manifest.jsonl"), &staged)?;
    write_atomic(
        &work_dir.join("report.json"),
        &serde_json::to_vec_pretty(&report)?,
    )?;
    Ok(PipelineRun {
        report,
        manifest: staged,
        completed: true,
        resumed,
    })
}

fn synth_step(
    cfg: &PipelineConfig,
    layouts: &[LayoutRecord],
    prompts: &PromptRegistry,
    backends: &Backends,
    store: &SampleStore,
) -> Result<(Vec<ManifestEntry>, SynthStep)> {
    let results: Vec<(String, Result<ManifestEntry>)> = layouts
        .par_iter()
        .map(|rec| {
            let seed = derive_seed(cfg.seed, &["synth", &rec.id]);
            let r = synth_multilayer(&rec.id, &rec.layout, &cfg.synth, prompts, backends, seed)
                .and_then(|s| store.write(&s));
            (rec.id.clone(), r)
        })
        .collect();
    let mut entries = Vec::new();
    let mut failed = Vec::new();
    for (id, r) in results {
        match r {
            Ok(e) => entries.push(e),
            Err(e) if is_sample_failure(&e) => failed.push((id, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    failed.sort();
    let report = SynthStep {
        input: layouts.len(),
        synthesized: entries.len(),
        failed,
    };
    Ok((sorted(entries), report))
}

fn load_aesthetics(cfg: &PipelineConfig) -> Result<Option<BTreeMap<String, f64>>> {
    match &cfg.aesthetic_scores {
        None => Ok(None),
        Some(p) => {
            let raw = fs::read(p).map_err(|e| Error::io(p, e))?;
            Ok(Some(serde_json::from_slice(&raw)?))
        }
    }
}

fn artifact_step(
    cfg: &PipelineConfig,
    input: &[ManifestEntry],
    backends: &Backends,
    store: &SampleStore,
) -> Result<(Vec<ManifestEntry>, ArtifactStep)> {
    let external = load_aesthetics(cfg)?;
    let results: Vec<Result<(ManifestEntry, bool)>> = input
        .par_iter()
        .map(|entry| {
            let sample = store.read(&entry.path)?;
            let mut e = entry.clone();
            let aesthetic = match &external {
                Some(map) => map.get(&entry.id).copied(),
                None => Some(colorfulness(&sample.merged)),
            };
            if let Some(a) = aesthetic {
                e.scores.insert(AESTHETIC_KEY.into(), a);
            }
            let flagged = if cfg.stages.artifact_filter {
                let r = artifact_report(&sample, backends.embedder.as_ref(), None, &cfg.artifact)?;
                e.scores.insert(ARTIFACT_SCORE_KEY.into(), r.artifact_score);
                for (i, sev) in r.layer_severity() {
                    e.scores.insert(artifact_layer_key(i), sev);
                }
                r.is_flagged(&cfg.artifact)
            } else {
                false
            };
            e.stage = e.stage.advance(Stage::D)?;
            Ok((e, flagged))
        })
        .collect();
    let mut passed = Vec::new();
    let mut flagged = Vec::new();
    for r in results {
        let (e, bad) = r?;
        if bad {
            let score = e.scores.get(ARTIFACT_SCORE_KEY).copied().unwrap_or(0.0);
            flagged.push((e.id, score));
        } else {
            passed.push(e);
        }
    }
    let report = ArtifactStep {
        checked: input.len(),
        passed: passed.len(),
        flagged,
    };
    Ok((sorted(passed), report))
}

fn rank_step(cfg: &PipelineConfig, input: &[ManifestEntry]) -> Result<(Vec<ManifestEntry>, RankStep)> {
    let proportion = if cfg.stages.rank_select {
        cfg.rank_proportion
    } else {
        1.0
    };
    let out = aesthetic_rank_select(input, proportion)?;
    let report = RankStep {
        candidates: input.len(),
        selected: out.len(),
        proportion,
    };
    Ok((sorted(out), report))
}

fn style_step(
    cfg: &PipelineConfig,
    pool: &[ManifestEntry],
    prompts: &PromptRegistry,
    backends: &Backends,
    store: &SampleStore,
) -> Result<(Vec<ManifestEntry>, StyleStep)> {
    if !cfg.stages.style_regen || pool.is_empty() {
        let report = StyleStep {
            staged: pool.len(),
            ..Default::default()
        };
        return Ok((pool.to_vec(), report));
    }
    let ids: Vec<String> = pool.iter().map(|e| e.id.clone()).collect();
    let by_id: BTreeMap<&str, &ManifestEntry> = pool.iter().map(|e| (e.id.as_str(), e)).collect();
    let draw = stratified_style_sample(&ids, &cfg.styles, cfg.n_per_style, cfg.seed)?;
    let model = cfg.tips_model.as_deref().map(TipsModel::load).transpose()?;
    let regen = RegenConfig {
        synth: cfg.synth.clone(),
        recaption_canvas: cfg.recaption_canvas,
    };

    enum Outcome {
        Staged(ManifestEntry),
        Failed(String),
        Flagged,
        Rejected(Vec<usize>),
    }
    let results: Vec<(String, Result<Outcome>)> = draw
        .assignments
        .par_iter()
        .map(|a| {
            let new_id = format!("{}.{}{}", a.layout_id, style_slug(&a.style), a.draw);
            let run = || -> Result<Outcome> {
                let src_entry = by_id[a.layout_id.as_str()];
                let source = store.read(&src_entry.path)?;
                let seed = derive_seed(cfg.seed, &["regen", &new_id]);
                let sample: MultiLayerSample =
                    match regenerate_with_style(&source, &a.style, &new_id, &regen, prompts, backends, seed) {
                        Ok(s) => s,
                        Err(e) if is_sample_failure(&e) => return Ok(Outcome::Failed(e.to_string())),
                        Err(e) => return Err(e),
                    };
                let emb = embed_layers(&sample, backends.embedder.as_ref())?;
                let images: Vec<_> = emb.iter().map(|e| e.image.clone()).collect();
                let art = super::artifact::artifact_heuristics(&sample, &images, &cfg.artifact)?;
                if cfg.stages.artifact_filter && art.is_flagged(&cfg.artifact) {
                    return Ok(Outcome::Flagged);
                }
                let fallback;
                let m = match &model {
                    Some(m) => m,
                    None => {
                        let dim = emb.first().map(|e| e.image.dim()).unwrap_or(1);
                        fallback = TipsModel::without_projection(dim, DEFAULT_TAU);
                        &fallback
                    }
                };
                let gate = tips_gate(&sample, &emb, m, cfg.tips_threshold)?;
                if !gate.accept {
                    return Ok(Outcome::Rejected(gate.rejected_layers));
                }
                let mut e = store.write(&sample)?;
                e.stage = Stage::E;
                if let Some(&a) = src_entry.scores.get(AESTHETIC_KEY) {
                    e.scores.insert(AESTHETIC_KEY.into(), a);
                }
                e.scores.insert(ARTIFACT_SCORE_KEY.into(), art.artifact_score);
                for (i, sev) in art.layer_severity() {
                    e.scores.insert(artifact_layer_key(i), sev);
                }
                for (i, s) in gate.layer_scores.iter().enumerate() {
                    e.scores.insert(tips_layer_key(i), *s);
                }
                Ok(Outcome::Staged(e))
            };
            (new_id.clone(), run())
        })
        .collect();

    let mut report = StyleStep {
        assignments: draw.assignments.len(),
        with_replacement: draw.with_replacement,
        ..Default::default()
    };
    let mut staged = Vec::new();
    for (id, r) in results {
        match r? {
            Outcome::Staged(e) => {
                report.regenerated += 1;
                staged.push(e);
            }
            Outcome::Failed(why) => report.failed.push((id, why)),
            Outcome::Flagged => {
                report.regenerated += 1;
                report.artifact_flagged.push(id);
            }
            Outcome::Rejected(layers) => {
                report.regenerated += 1;
                report.tips_rejected.push((id, layers));
            }
        }
    }
    report.failed.sort();
    report.artifact_flagged.sort();
    report.tips_rejected.sort();
    report.staged = staged.len();
    Ok((sorted(staged), report))
}

/// Writes each sample's merged render, flattened on white, to
/// `out_dir/<id>.png` for external FID tooling.
pub fn export_merged(manifest: &[ManifestEntry], store: &SampleStore, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    manifest
        .par_iter()
        .map(|entry| {
            let sample = store.read(&entry.path)?;
            let path = out_dir.join(format!("{}.png", entry.id));
            let png = encode_png_rgb(&sample.merged.flatten([255, 255, 255]))?;
            fs::write(&path, png).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::decode(format!("{} line {}", path.display(), n + 1), e.to_string()))?,
        );
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}
