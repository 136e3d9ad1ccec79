//! Generate-then-matte layer synthesis and layout-driven multi-layer samples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::Backends;
use crate::compositor::{composite, generation_canvas, resize_raster, ResizeFilter, DEFAULT_LONG_SIDE};
use crate::error::{Error, Result};
use crate::layer::{
    validate_layout, LayerKind, LayerSlot, LayerSource, Matte, MultiLayerSample, RgbRaster,
    Scores, SemanticLayout, Stage, TransparentLayer,
};
use crate::prompting::{PromptRegistry, SuffixTemplateId};
use crate::seed::derive_seed;

/// Matte values below this count as background for the uniformity gate.
pub const BACKGROUND_MATTE_MAX: f32 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayerSynthConfig {
    pub suffix_template: SuffixTemplateId,
    pub color: String,
    pub long_side: u32,
    /// Allowed mean matte value for non-background layers.
    pub matte_coverage_bounds: (f64, f64),
    /// Largest per-channel std-dev tolerated in the generated background.
    pub background_uniformity_max: f64,
    /// Padding around the matte's support, as a fraction of each side.
    pub crop_padding: f64,
    /// Generation attempts per slot, each with a fresh seed.
    pub max_attempts: u32,
}

impl Default for LayerSynthConfig {
    fn default() -> Self {
        Self {
            suffix_template: SuffixTemplateId::H,
            color: "gray".into(),
            long_side: DEFAULT_LONG_SIDE,
            matte_coverage_bounds: (0.02, 0.98),
            background_uniformity_max: 12.0,
            crop_padding: 0.02,
            max_attempts: 3,
        }
    }
}

impl LayerSynthConfig {
    pub fn check(&self) -> Result<()> {
        let (lo, hi) = self.matte_coverage_bounds;
        if !(0.0 < lo && lo < hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "matte_coverage_bounds ({lo}, {hi}) must satisfy 0 < min < max <= 1"
            )));
        }
        if !(self.background_uniformity_max >= 0.0) {
            return Err(Error::Config("background_uniformity_max must be non-negative".into()));
        }
        if !(0.0..0.5).contains(&self.crop_padding) {
            return Err(Error::Config("crop_padding must be in [0, 0.5)".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Largest per-channel population std-dev over pixels whose matte is below
/// [`BACKGROUND_MATTE_MAX`].
pub fn background_uniformity(image: &RgbRaster, matte: &Matte) -> Result<f64> {
    if image.dims() != matte.dims() {
        return Err(Error::DimensionMismatch(format!(
            "image {:?} vs matte {:?}",
            image.dims(),
            matte.dims()
        )));
    }
    let mut n = 0u64;
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    for (p, &m) in image.pixels().zip(matte.values()) {
        if m < BACKGROUND_MATTE_MAX {
            n += 1;
            for c in 0..3 {
                let v = p[c] as f64;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
    }
    if n == 0 {
        return Err(Error::UndefinedRegion("background"));
    }
    let n = n as f64;
    Ok((0..3)
        .map(|c| {
            let mean = sum[c] / n;
            (sq[c] / n - mean * mean).max(0.0).sqrt()
        })
        .fold(0.0, f64::max))
}

/// One generate-then-matte attempt for `slot`, returned at the slot's size.
pub fn synth_layer(
    caption: &str,
    slot: &LayerSlot,
    cfg: &LayerSynthConfig,
    prompts: &PromptRegistry,
    backends: &Backends,
    seed: u64,
) -> Result<TransparentLayer> {
    if caption.trim().is_empty() {
        return Err(Error::Precondition("layer caption must not be empty".into()));
    }
    let bbox = slot.bbox;
    let canvas = generation_canvas(bbox.w, bbox.h, cfg.long_side)?;

    if slot.kind == LayerKind::Background {
        let img = backends.generator.generate(caption, canvas, seed)?;
        let image = resize_raster(&img.opaque(), bbox.w, bbox.h, ResizeFilter::Auto)?;
        return TransparentLayer::new(image, caption, None, slot.kind, LayerSource::Generated);
    }

    let prompt = prompts.apply_suffix(caption, cfg.suffix_template, &cfg.color)?;
    let img = backends.generator.generate(&prompt, canvas, seed)?;
    if img.dims() != (canvas.width, canvas.height) {
        return Err(Error::DimensionMismatch(format!(
            "generator returned {:?} for canvas {}x{}",
            img.dims(),
            canvas.width,
            canvas.height
        )));
    }
    let matte = backends.matter.predict_matte(&img)?;
    if matte.dims() != img.dims() {
        return Err(Error::DimensionMismatch(format!(
            "matte {:?} vs image {:?}",
            matte.dims(),
            img.dims()
        )));
    }

    let coverage = matte.values().iter().map(|&v| v as f64).sum::<f64>() / matte.values().len() as f64;
    let (lo, hi) = cfg.matte_coverage_bounds;
    if !(lo..=hi).contains(&coverage) {
        return Err(Error::QualityReject(format!(
            "matte coverage {coverage:.4} outside [{lo}, {hi}]"
        )));
    }
    let spread = background_uniformity(&img, &matte)?;
    if spread > cfg.background_uniformity_max {
        return Err(Error::QualityReject(format!(
            "background std-dev {spread:.2} exceeds {}",
            cfg.background_uniformity_max
        )));
    }

    let rgba = img.with_matte(&matte)?;
    let (x, y, w, h) = matte
        .support_bbox()
        .expect("coverage above zero implies support");
    let pad_x = (w as f64 * cfg.crop_padding).ceil() as u32;
    let pad_y = (h as f64 * cfg.crop_padding).ceil() as u32;
    let x0 = x.saturating_sub(pad_x);
    let y0 = y.saturating_sub(pad_y);
    let x1 = (x + w + pad_x).min(rgba.width());
    let y1 = (y + h + pad_y).min(rgba.height());
    let cropped = rgba.crop(x0, y0, x1 - x0, y1 - y0)?;
    let image = resize_raster(&cropped, bbox.w, bbox.h, ResizeFilter::Auto)?;
    TransparentLayer::new(image, caption, None, slot.kind, LayerSource::Generated)
}

/// [`synth_layer`] with up to `cfg.max_attempts` reseeded tries on
/// retriable errors.
pub fn synth_layer_with_retries(
    caption: &str,
    slot: &LayerSlot,
    cfg: &LayerSynthConfig,
    prompts: &PromptRegistry,
    backends: &Backends,
    seed: u64,
) -> Result<TransparentLayer> {
    let mut attempt = 0;
    loop {
        let s = derive_seed(seed, &["attempt", &attempt.to_string()]);
        match synth_layer(caption, slot, cfg, prompts, backends, s) {
            Err(e) if e.is_retriable() && attempt + 1 < cfg.max_attempts => attempt += 1,
            other => return other,
        }
    }
}

/// Synthesizes every slot (concurrently), then composites in z order.
pub fn synth_multilayer(
    id: &str,
    layout: &SemanticLayout,
    cfg: &LayerSynthConfig,
    prompts: &PromptRegistry,
    backends: &Backends,
    seed: u64,
) -> Result<MultiLayerSample> {
    let captions: Vec<&str> = layout.slots.iter().map(|s| s.caption.as_str()).collect();
    synth_with_captions(id, layout, &captions, cfg, prompts, backends, seed)
}

pub(crate) fn synth_with_captions(
    id: &str,
    layout: &SemanticLayout,
    captions: &[&str],
    cfg: &LayerSynthConfig,
    prompts: &PromptRegistry,
    backends: &Backends,
    seed: u64,
) -> Result<MultiLayerSample> {
    cfg.check()?;
    validate_layout(layout).into_result()?;
    let results: Vec<Result<TransparentLayer>> = layout
        .slots
        .par_iter()
        .zip(captions.par_iter())
        .enumerate()
        .map(|(i, (slot, caption))| {
            let s = derive_seed(seed, &["slot", &i.to_string()]);
            synth_layer_with_retries(caption, slot, cfg, prompts, backends, s)
        })
        .collect();

    let mut layers = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(l) => layers.push(l),
            Err(e) => failures.push((i, e.to_string())),
        }
    }
    if !failures.is_empty() {
        return Err(Error::SampleFailed {
            sample: id.to_string(),
            failures,
        });
    }
    let merged = composite(layout, &layers)?.merged;
    Ok(MultiLayerSample {
        id: id.to_string(),
        layout: layout.clone(),
        layers,
        merged,
        state: Stage::C,
        scores: Scores::new(),
        style: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::FAIL_MARKER;
    use crate::compositor::Premul;
    use crate::layer::{BBox, CanvasSize, Matte};

    fn cfg() -> LayerSynthConfig {
        LayerSynthConfig {
            long_side: 128,
            ..Default::default()
        }
    }

    fn slot(x: i32, y: i32, w: u32, h: u32, z: i32, kind: LayerKind, caption: &str) -> LayerSlot {
        LayerSlot {
            bbox: BBox::new(x, y, w, h),
            z,
            caption: caption.into(),
            kind,
        }
    }

    #[test]
    fn uniformity_closed_forms() {
        let img = RgbRaster::filled(4, 4, [128, 128, 128]).unwrap();
        let m = Matte::new(4, 4, vec![0.0; 16]).unwrap();
        assert_eq!(background_uniformity(&img, &m).unwrap(), 0.0);

        let mut half = img.clone();
        for y in 0..4 {
            for x in 0..2 {
                half.set_pixel(x, y, [255, 255, 255]);
            }
        }
        let sd = background_uniformity(&half, &m).unwrap();
        assert!((sd - 63.5).abs() < 1e-9, "{sd}");

        let full = Matte::new(4, 4, vec![1.0; 16]).unwrap();
        assert!(matches!(
            background_uniformity(&img, &full),
            Err(Error::UndefinedRegion(_))
        ));
    }

    #[test]
    fn disk_layer_fills_square_slot() {
        let b = Backends::mock(1);
        let c = cfg();
        let s = slot(0, 0, 48, 48, 0, LayerKind::Object, "a ball");
        let l = synth_layer("a ball", &s, &c, &PromptRegistry::default(), &b, 3).unwrap();
        assert_eq!(l.image.dims(), (48, 48));
        assert_eq!(l.image.pixel(24, 24)[3], 255);
        assert_eq!(l.image.pixel(0, 0)[3], 0);

        // resampling preserves mean alpha: expect matte mass over the padded crop
        let prompt = PromptRegistry::default().apply_suffix("a ball", c.suffix_template, &c.color).unwrap();
        let img = b.generator.generate(&prompt, crate::compositor::CanvasSpec::new(128, 128).unwrap(), 3).unwrap();
        let m = b.matter.predict_matte(&img).unwrap();
        let (_, _, w, h) = m.support_bbox().unwrap();
        let pw = w + 2 * (w as f64 * c.crop_padding).ceil() as u32;
        let ph = h + 2 * (h as f64 * c.crop_padding).ceil() as u32;
        let mass: f64 = m.values().iter().map(|&v| v as f64).sum();
        let expect = mass / (pw as f64 * ph as f64);
        let got = l.image.alpha_mass();
        assert!((got - expect).abs() / expect < 0.03, "{got} vs {expect}");
        let pi4 = std::f64::consts::FRAC_PI_4;
        assert!(got < pi4 && got > 0.8 * pi4);
    }

    #[test]
    fn background_slot_is_full_bleed() {
        let b = Backends::mock(1);
        let s = slot(0, 0, 40, 20, 0, LayerKind::Background, "paper texture");
        let l = synth_layer("paper texture", &s, &cfg(), &PromptRegistry::default(), &b, 3).unwrap();
        assert_eq!(l.image.dims(), (40, 20));
        assert!(l.image.pixels().all(|p| p[3] == 255));
    }

    #[test]
    fn blank_generation_is_rejected() {
        let b = Backends::mock(1);
        let cap = format!("ghost {FAIL_MARKER}");
        let s = slot(0, 0, 32, 32, 0, LayerKind::Object, &cap);
        let err = synth_layer(&cap, &s, &cfg(), &PromptRegistry::default(), &b, 0).unwrap_err();
        assert!(matches!(err, Error::QualityReject(_)));
        assert!(err.is_retriable());
    }

    fn layout(slots: Vec<LayerSlot>) -> SemanticLayout {
        SemanticLayout {
            canvas: CanvasSize::new(64, 48),
            slots,
            global_caption: "poster".into(),
        }
    }

    #[test]
    fn single_slot_merged_is_the_layer() {
        let l = layout(vec![slot(8, 4, 30, 20, 0, LayerKind::Object, "a cat")]);
        let s = synth_multilayer("s1", &l, &cfg(), &PromptRegistry::default(), &Backends::mock(2), 5)
            .unwrap();
        assert_eq!(s.state, Stage::C);
        for y in 0..48 {
            for x in 0..64 {
                let inside = (8..38).contains(&x) && (4..24).contains(&y);
                let expect = if inside {
                    s.layers[0].image.pixel(x - 8, y - 4)
                } else {
                    [0, 0, 0, 0]
                };
                let got = s.merged.pixel(x, y);
                assert_eq!(got[3], expect[3], "({x},{y})");
                if expect[3] > 0 {
                    for c in 0..3 {
                        assert!(got[c].abs_diff(expect[c]) <= 1);
                    }
                }
            }
        }
    }

    #[test]
    fn three_slots_match_brute_force_over() {
        let l = layout(vec![
            slot(0, 0, 64, 48, 0, LayerKind::Background, "sky"),
            slot(5, 5, 30, 30, 1, LayerKind::Object, "a cat"),
            slot(20, 10, 40, 16, 2, LayerKind::Text, "Text: \"HELLO\""),
        ]);
        let s = synth_multilayer("s3", &l, &cfg(), &PromptRegistry::default(), &Backends::mock(2), 5)
            .unwrap();
        for (layer, slot) in s.layers.iter().zip(&l.slots) {
            assert_eq!(layer.image.dims(), (slot.bbox.w, slot.bbox.h));
        }
        for y in 0..48u32 {
            for x in 0..64u32 {
                let mut acc = Premul::TRANSPARENT;
                for (layer, slot) in s.layers.iter().zip(&l.slots) {
                    let (lx, ly) = (x as i32 - slot.bbox.x, y as i32 - slot.bbox.y);
                    if lx >= 0 && ly >= 0 && (lx as u32) < slot.bbox.w && (ly as u32) < slot.bbox.h {
                        acc = Premul::from_u8(layer.image.pixel(lx as u32, ly as u32)).over(acc);
                    }
                }
                let want = acc.to_u8();
                let got = s.merged.pixel(x, y);
                for c in 0..4 {
                    assert!(got[c].abs_diff(want[c]) <= 1, "({x},{y}) {got:?} vs {want:?}");
                }
            }
        }
    }

    #[test]
    fn failing_slot_is_named() {
        let l = layout(vec![
            slot(0, 0, 20, 20, 0, LayerKind::Object, "a cat"),
            slot(20, 0, 20, 20, 1, LayerKind::Object, &format!("a dog {FAIL_MARKER}")),
        ]);
        match synth_multilayer("sf", &l, &cfg(), &PromptRegistry::default(), &Backends::mock(2), 5) {
            Err(Error::SampleFailed { sample, failures }) => {
                assert_eq!(sample, "sf");
                assert_eq!(failures.len(), 1);
                assert_eq!(failures[0].0, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn deterministic_end_to_end() {
        let l = layout(vec![
            slot(0, 0, 64, 48, 0, LayerKind::Background, "sky"),
            slot(5, 5, 30, 30, 1, LayerKind::Object, "a cat"),
        ]);
        let run = || {
            synth_multilayer("d", &l, &cfg(), &PromptRegistry::default(), &Backends::mock(4), 9).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_bounds_are_validated() {
        let mut c = cfg();
        c.matte_coverage_bounds = (0.5, 0.5);
        assert!(c.check().is_err());
        c.matte_coverage_bounds = (0.0, 0.5);
        assert!(c.check().is_err());
    }
}
