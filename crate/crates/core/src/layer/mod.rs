//! Layers, layouts, samples and curation state.
//!
//! Rasters are stored with straight alpha; compositing converts to
//! premultiplied floats internally (see [`crate::compositor`]).

mod codec;
mod raster;
mod stats;
pub mod store;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use codec::{deserialize_sample, serialize_sample};
pub use raster::{AlphaRaster, Matte, RgbRaster};
pub use stats::{compute_dataset_stats, DatasetStats, StatsAccumulator};
pub use store::{read_manifest, write_manifest, SampleStore};

/// Minimum matte coverage required of a background layer.
pub const BACKGROUND_MIN_COVERAGE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Object,
    Text,
    Background,
    Decoration,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Object => "object",
            LayerKind::Text => "text",
            LayerKind::Background => "background",
            LayerKind::Decoration => "decoration",
        }
    }
}

impl std::str::FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "object" => Ok(LayerKind::Object),
            "text" => Ok(LayerKind::Text),
            "background" => Ok(LayerKind::Background),
            "decoration" => Ok(LayerKind::Decoration),
            other => Err(Error::Config(format!("unknown layer kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerSource {
    Generated,
    Crawled,
    Mock,
}

impl LayerSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerSource::Generated => "generated",
            LayerSource::Crawled => "crawled",
            LayerSource::Mock => "mock",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransparentLayer {
    pub image: AlphaRaster,
    pub caption: String,
    pub style: Option<String>,
    pub kind: LayerKind,
    pub source: LayerSource,
}

impl TransparentLayer {
    pub fn new(
        image: AlphaRaster,
        caption: impl Into<String>,
        style: Option<String>,
        kind: LayerKind,
        source: LayerSource,
    ) -> Result<Self> {
        let layer = Self {
            image,
            caption: caption.into(),
            style,
            kind,
            source,
        };
        layer.check()?;
        Ok(layer)
    }

    pub fn check(&self) -> Result<()> {
        if self.caption.trim().is_empty() {
            return Err(Error::InvalidLayer("caption must not be empty".into()));
        }
        if self.kind == LayerKind::Background {
            let coverage = self.image.coverage();
            if coverage < BACKGROUND_MIN_COVERAGE {
                return Err(Error::InvalidLayer(format!(
                    "background layer covers {coverage:.3} of its raster, needs {BACKGROUND_MIN_COVERAGE}"
                )));
            }
        }
        Ok(())
    }
}

/// Axis-aligned box in canvas pixel coordinates. The origin may be negative;
/// portions outside the canvas are clipped at composition time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x: i32,
    pub y: i32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub const fn new(x: i32, y: i32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn right(&self) -> i64 {
        self.x as i64 + self.w as i64
    }

    pub fn bottom(&self) -> i64 {
        self.y as i64 + self.h as i64
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let w = self.right().min(other.right()) - (self.x as i64).max(other.x as i64);
        let h = self.bottom().min(other.bottom()) - (self.y as i64).max(other.y as i64);
        if w <= 0 || h <= 0 {
            0
        } else {
            (w * h) as u64
        }
    }

    pub fn intersects_canvas(&self, canvas: CanvasSize) -> bool {
        self.w > 0
            && self.h > 0
            && self.right() > 0
            && self.bottom() > 0
            && (self.x as i64) < canvas.width as i64
            && (self.y as i64) < canvas.height as i64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanvasSize {
    pub width: u32,
    pub height: u32,
}

impl CanvasSize {
    pub const fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlot {
    pub bbox: BBox,
    pub z: i32,
    pub caption: String,
    pub kind: LayerKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticLayout {
    pub canvas: CanvasSize,
    /// Ascending by `z`.
    pub slots: Vec<LayerSlot>,
    pub global_caption: String,
}

impl SemanticLayout {
    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayoutViolation {
    NoSlots,
    EmptyCanvas,
    EmptyGlobalCaption,
    ZeroSizeSlot { index: usize },
    OutOfCanvas { index: usize },
    DuplicateZ { z: i32, indices: Vec<usize> },
    NotSortedByZ { index: usize },
    EmptyCaption { index: usize },
}

impl fmt::Display for LayoutViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayoutViolation::NoSlots => write!(f, "layout has no slots"),
            LayoutViolation::EmptyCanvas => write!(f, "canvas has zero area"),
            LayoutViolation::EmptyGlobalCaption => write!(f, "global caption is empty"),
            LayoutViolation::ZeroSizeSlot { index } => write!(f, "slot {index} has zero area"),
            LayoutViolation::OutOfCanvas { index } => {
                write!(f, "slot {index} lies entirely outside the canvas")
            }
            LayoutViolation::DuplicateZ { z, indices } => {
                write!(f, "z={z} shared by slots {indices:?}")
            }
            LayoutViolation::NotSortedByZ { index } => {
                write!(f, "slot {index} breaks ascending z order")
            }
            LayoutViolation::EmptyCaption { index } => write!(f, "slot {index} has no caption"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<LayoutViolation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            return Ok(());
        }
        let msg = self
            .violations
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::Precondition(format!("invalid layout: {msg}")))
    }
}

/// Lists every violated layout invariant. An empty report means the layout is valid.
pub fn validate_layout(layout: &SemanticLayout) -> ValidationReport {
    let mut violations = Vec::new();
    if layout.slots.is_empty() {
        violations.push(LayoutViolation::NoSlots);
    }
    if layout.canvas.area() == 0 {
        violations.push(LayoutViolation::EmptyCanvas);
    }
    if layout.global_caption.trim().is_empty() {
        violations.push(LayoutViolation::EmptyGlobalCaption);
    }

    let mut by_z: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, slot) in layout.slots.iter().enumerate() {
        if slot.bbox.w == 0 || slot.bbox.h == 0 {
            violations.push(LayoutViolation::ZeroSizeSlot { index: i });
        } else if !slot.bbox.intersects_canvas(layout.canvas) {
            violations.push(LayoutViolation::OutOfCanvas { index: i });
        }
        if slot.caption.trim().is_empty() {
            violations.push(LayoutViolation::EmptyCaption { index: i });
        }
        by_z.entry(slot.z).or_default().push(i);
    }
    for (z, indices) in by_z {
        if indices.len() > 1 {
            violations.push(LayoutViolation::DuplicateZ { z, indices });
        }
    }
    for (i, pair) in layout.slots.windows(2).enumerate() {
        if pair[1].z < pair[0].z {
            violations.push(LayoutViolation::NotSortedByZ { index: i + 1 });
        }
    }
    ValidationReport { violations }
}

/// Dataset states A through F; transitions only move forward.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
pub enum Stage {
    #[default]
    A,
    B,
    C,
    D,
    E,
    F,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::A, Stage::B, Stage::C, Stage::D, Stage::E, Stage::F];

    pub fn letter(self) -> char {
        match self {
            Stage::A => 'A',
            Stage::B => 'B',
            Stage::C => 'C',
            Stage::D => 'D',
            Stage::E => 'E',
            Stage::F => 'F',
        }
    }

    pub fn advance(self, to: Stage) -> Result<Stage> {
        if to < self {
            return Err(Error::Precondition(format!(
                "stage cannot move backwards from {self} to {to}"
            )));
        }
        Ok(to)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Stage::A),
            "B" | "b" => Ok(Stage::B),
            "C" | "c" => Ok(Stage::C),
            "D" | "d" => Ok(Stage::D),
            "E" | "e" => Ok(Stage::E),
            "F" | "f" => Ok(Stage::F),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

pub type Scores = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct MultiLayerSample {
    pub id: String,
    pub layout: SemanticLayout,
    /// Index-aligned with `layout.slots`.
    pub layers: Vec<TransparentLayer>,
    pub merged: AlphaRaster,
    pub state: Stage,
    pub scores: Scores,
    pub style: Option<String>,
}

impl MultiLayerSample {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Checks the structural invariants tying layers, layout and merged render together.
    pub fn check(&self) -> Result<()> {
        validate_layout(&self.layout).into_result()?;
        if self.state >= Stage::C && self.layers.len() != self.layout.slots.len() {
            return Err(Error::Alignment {
                index: self.layers.len().min(self.layout.slots.len()),
                reason: format!(
                    "{} layers for {} slots",
                    self.layers.len(),
                    self.layout.slots.len()
                ),
            });
        }
        let canvas = self.layout.canvas;
        if self.merged.dims() != (canvas.width, canvas.height) {
            return Err(Error::DimensionMismatch(format!(
                "merged {:?} vs canvas {}x{}",
                self.merged.dims(),
                canvas.width,
                canvas.height
            )));
        }
        for layer in &self.layers {
            layer.check()?;
        }
        Ok(())
    }
}

/// A manifest line: one sample with its location, stage and scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub stage: Stage,
    pub layer_count: usize,
    #[serde(default)]
    pub scores: Scores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
}

/// Index a manifest by sample id.
pub fn index_manifest(entries: &[ManifestEntry]) -> HashMap<&str, &ManifestEntry> {
    entries.iter().map(|e| (e.id.as_str(), e)).collect()
}
