//! Geometry and pixel math for layout-driven composition.
//!
//! Blending happens in 32-bit premultiplied floats and is quantized to 8-bit
//! straight alpha exactly once, after the last layer.

mod resample;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{AlphaRaster, BBox, CanvasSize, RgbRaster, SemanticLayout, TransparentLayer};

pub use resample::{resize_raster, resize_to_bbox, resize_to_bbox_with, ResizeFilter};

/// Generation resolutions are aligned to this grid.
pub const CANVAS_ALIGN: u32 = 16;
pub const DEFAULT_LONG_SIDE: u32 = 1024;

/// Resolution requested from the generator; both sides are multiples of 16.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanvasSpec {
    pub width: u32,
    pub height: u32,
}

impl CanvasSpec {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        let spec = Self { width, height };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        for (name, v) in [("width", self.width), ("height", self.height)] {
            if v < CANVAS_ALIGN || v % CANVAS_ALIGN != 0 {
                return Err(Error::InvalidCanvas(format!(
                    "{name} {v} must be a multiple of {CANVAS_ALIGN} and at least {CANVAS_ALIGN}"
                )));
            }
        }
        Ok(())
    }
}

/// Aspect-preserving generation canvas for a `w x h` box: the longer side is
/// pinned to `long_side` and the shorter side snaps to the nearest multiple
/// of 16 (never below 16).
pub fn generation_canvas(w: u32, h: u32, long_side: u32) -> Result<CanvasSpec> {
    if w == 0 || h == 0 {
        return Err(Error::InvalidBBox((0, 0, w, h)));
    }
    if long_side < CANVAS_ALIGN || long_side % CANVAS_ALIGN != 0 {
        return Err(Error::InvalidCanvas(format!(
            "long side {long_side} must be a positive multiple of {CANVAS_ALIGN}"
        )));
    }
    let (long, short) = if w >= h { (w, h) } else { (h, w) };
    let short_side = snap_short_side(long_side, long, short);
    if w >= h {
        CanvasSpec::new(long_side, short_side)
    } else {
        CanvasSpec::new(short_side, long_side)
    }
}

/// Picks whichever neighbouring multiple of 16 best preserves `short / long`.
fn snap_short_side(long_side: u32, long: u32, short: u32) -> u32 {
    // exact = long_side * short / long; compare |cand/long_side - short/long|
    // in integers as |cand*long - long_side*short|.
    let target = long_side as u64 * short as u64;
    let exact_floor = target / long as u64;
    let lo = (exact_floor / CANVAS_ALIGN as u64) * CANVAS_ALIGN as u64;
    let hi = lo + CANVAS_ALIGN as u64;
    let err = |c: u64| (c * long as u64).abs_diff(target);
    let best = if lo < CANVAS_ALIGN as u64 || err(hi) < err(lo) {
        hi
    } else {
        lo
    };
    best.clamp(CANVAS_ALIGN as u64, long_side as u64) as u32
}

/// Premultiplied RGBA in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Premul {
    pub r: f32,
    pub g: f32,
    pub b: f32,
    pub a: f32,
}

impl Premul {
    pub const TRANSPARENT: Premul = Premul {
        r: 0.0,
        g: 0.0,
        b: 0.0,
        a: 0.0,
    };

    pub fn from_straight(p: Rgba) -> Self {
        Self {
            r: p.r * p.a,
            g: p.g * p.a,
            b: p.b * p.a,
            a: p.a,
        }
    }

    pub fn from_u8(p: [u8; 4]) -> Self {
        let a = p[3] as f32 / 255.0;
        Self {
            r: p[0] as f32 / 255.0 * a,
            g: p[1] as f32 / 255.0 * a,
            b: p[2] as f32 / 255.0 * a,
            a,
        }
    }

    pub fn to_straight(self) -> Rgba {
        if self.a <= 0.0 {
            return Rgba::default();
        }
        Rgba {
            r: self.r / self.a,
            g: self.g / self.a,
            b: self.b / self.a,
            a: self.a,
        }
    }

    /// Source-over: `self` on top of `below`.
    #[inline]
    pub fn over(self, below: Premul) -> Premul {
        let k = 1.0 - self.a;
        Premul {
            r: self.r + below.r * k,
            g: self.g + below.g * k,
            b: self.b + below.b * k,
            a: self.a + below.a * k,
        }
    }

    /// Quantizes to straight-alpha RGBA8. Colour of fully transparent
    /// pixels is zeroed.
    pub fn to_u8(self) -> [u8; 4] {
        let a8 = quantize(self.a);
        if a8 == 0 {
            return [0; 4];
        }
        let s = self.to_straight();
        [quantize(s.r), quantize(s.g), quantize(s.b), a8]
    }
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Straight-alpha RGBA in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Rgba {
    pub r: f32,
    pub g: f32,
    pub b: f32,
    pub a: f32,
}

impl Rgba {
    pub const fn new(r: f32, g: f32, b: f32, a: f32) -> Self {
        Self { r, g, b, a }
    }
}

/// Straight-alpha convenience wrapper around [`Premul::over`].
pub fn alpha_over(top: Rgba, bottom: Rgba) -> Rgba {
    if top.a >= 1.0 {
        return top;
    }
    Premul::from_straight(top)
        .over(Premul::from_straight(bottom))
        .to_straight()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeResult {
    pub merged: AlphaRaster,
    pub flattened: RgbRaster,
}

pub const DEFAULT_BACKDROP: [u8; 3] = [255, 255, 255];

/// Composites `layers` (index-aligned with `layout.slots`, each already sized
/// to its slot box) bottom-to-top in ascending z order.
pub fn composite(layout: &SemanticLayout, layers: &[TransparentLayer]) -> Result<CompositeResult> {
    composite_with_backdrop(layout, layers, DEFAULT_BACKDROP)
}

pub fn composite_with_backdrop(
    layout: &SemanticLayout,
    layers: &[TransparentLayer],
    backdrop: [u8; 3],
) -> Result<CompositeResult> {
    if layers.len() != layout.slots.len() {
        return Err(Error::Alignment {
            index: layers.len().min(layout.slots.len()),
            reason: format!("{} layers for {} slots", layers.len(), layout.slots.len()),
        });
    }
    let mut placements = Vec::with_capacity(layers.len());
    for (i, (slot, layer)) in layout.slots.iter().zip(layers).enumerate() {
        if layer.image.dims() != (slot.bbox.w, slot.bbox.h) {
            return Err(Error::Alignment {
                index: i,
                reason: format!(
                    "layer is {}x{} but slot box is {}x{}",
                    layer.image.width(),
                    layer.image.height(),
                    slot.bbox.w,
                    slot.bbox.h
                ),
            });
        }
        placements.push((slot.z, slot.bbox, &layer.image));
    }
    // stable: equal z keeps list order
    placements.sort_by_key(|(z, _, _)| *z);
    let ordered: Vec<_> = placements.into_iter().map(|(_, b, r)| (b, r)).collect();
    let merged = composite_placements(layout.canvas, &ordered)?;
    let flattened = merged.flatten(backdrop);
    Ok(CompositeResult { merged, flattened })
}

/// Blends rasters placed at box origins, first element at the bottom.
/// Parts outside the canvas are clipped.
pub fn composite_placements(
    canvas: CanvasSize,
    placements: &[(BBox, &AlphaRaster)],
) -> Result<AlphaRaster> {
    let (cw, ch) = (canvas.width, canvas.height);
    if cw == 0 || ch == 0 {
        return Err(Error::InvalidCanvas("canvas has zero area".into()));
    }
    let mut out = vec![0u8; cw as usize * ch as usize * 4];
    out.par_chunks_mut(cw as usize * 4)
        .enumerate()
        .for_each(|(y, row)| {
            let y = y as i64;
            let mut acc = vec![Premul::TRANSPARENT; cw as usize];
            for (bbox, raster) in placements {
                if y < bbox.y as i64 || y >= bbox.bottom() {
                    continue;
                }
                let sy = (y - bbox.y as i64) as u32;
                let x0 = (bbox.x as i64).max(0);
                let x1 = bbox.right().min(cw as i64);
                for x in x0..x1 {
                    let sx = (x - bbox.x as i64) as u32;
                    let top = Premul::from_u8(raster.pixel(sx, sy));
                    let dst = &mut acc[x as usize];
                    *dst = top.over(*dst);
                }
            }
            for (px, p) in row.chunks_exact_mut(4).zip(&acc) {
                px.copy_from_slice(&p.to_u8());
            }
        });
    AlphaRaster::new(cw, ch, out)
}

/// Intersection over union of two boxes; 0 when disjoint.
pub fn bbox_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// Intersection over the area of the smaller box.
pub fn overlap_fraction(a: &BBox, b: &BBox) -> f64 {
    let smaller = a.area().min(b.area());
    if smaller == 0 {
        return 0.0;
    }
    a.intersection_area(b) as f64 / smaller as f64
}
