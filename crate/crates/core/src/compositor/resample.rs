//! Straight-alpha resampling with edge bleed.
//!
//! Colour under zero-alpha pixels is meaningless; before filtering it is
//! replaced by the average of nearby visible pixels so interpolated edges do
//! not pick up dark fringes.

use crate::error::{Error, Result};
use crate::layer::{AlphaRaster, BBox, TransparentLayer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResizeFilter {
    /// Bilinear up to 2x downscale, box averaging beyond that.
    #[default]
    Auto,
    Bilinear,
    Area,
    Nearest,
}

const BLEED_PASSES: usize = 4;

pub fn resize_to_bbox(layer: &TransparentLayer, bbox: BBox) -> Result<TransparentLayer> {
    resize_to_bbox_with(layer, bbox, ResizeFilter::Auto)
}

pub fn resize_to_bbox_with(
    layer: &TransparentLayer,
    bbox: BBox,
    filter: ResizeFilter,
) -> Result<TransparentLayer> {
    if bbox.w == 0 || bbox.h == 0 {
        return Err(Error::InvalidBBox((bbox.x, bbox.y, bbox.w, bbox.h)));
    }
    Ok(TransparentLayer {
        image: resize_raster(&layer.image, bbox.w, bbox.h, filter)?,
        caption: layer.caption.clone(),
        style: layer.style.clone(),
        kind: layer.kind,
        source: layer.source,
    })
}

pub fn resize_raster(src: &AlphaRaster, w: u32, h: u32, filter: ResizeFilter) -> Result<AlphaRaster> {
    if w == 0 || h == 0 {
        return Err(Error::InvalidBBox((0, 0, w, h)));
    }
    if src.dims() == (w, h) {
        return Ok(src.clone());
    }
    let filter = match filter {
        ResizeFilter::Auto => {
            let sx = w as f64 / src.width() as f64;
            let sy = h as f64 / src.height() as f64;
            if sx < 0.5 || sy < 0.5 {
                ResizeFilter::Area
            } else {
                ResizeFilter::Bilinear
            }
        }
        f => f,
    };
    if filter == ResizeFilter::Nearest {
        return Ok(nearest(src, w, h));
    }

    let plane = bleed(src);
    let (sw, sh) = (src.width() as usize, src.height() as usize);
    let xs = axis_weights(sw, w as usize, filter);
    let ys = axis_weights(sh, h as usize, filter);

    // horizontal pass then vertical pass, channels kept in f32
    let mut tmp = vec![0f32; w as usize * sh * 4];
    for y in 0..sh {
        for (x, taps) in xs.iter().enumerate() {
            let mut px = [0f32; 4];
            for &(i, wt) in taps {
                let s = &plane[(y * sw + i) * 4..(y * sw + i) * 4 + 4];
                for c in 0..4 {
                    px[c] += s[c] * wt;
                }
            }
            tmp[(y * w as usize + x) * 4..(y * w as usize + x) * 4 + 4].copy_from_slice(&px);
        }
    }
    let mut out = Vec::with_capacity(w as usize * h as usize * 4);
    for taps in &ys {
        for x in 0..w as usize {
            let mut px = [0f32; 4];
            for &(j, wt) in taps {
                let s = &tmp[(j * w as usize + x) * 4..(j * w as usize + x) * 4 + 4];
                for c in 0..4 {
                    px[c] += s[c] * wt;
                }
            }
            for v in px {
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    AlphaRaster::new(w, h, out)
}

fn nearest(src: &AlphaRaster, w: u32, h: u32) -> AlphaRaster {
    let mut out = Vec::with_capacity(w as usize * h as usize * 4);
    for y in 0..h {
        let sy = ((y as u64 * 2 + 1) * src.height() as u64 / (h as u64 * 2)) as u32;
        for x in 0..w {
            let sx = ((x as u64 * 2 + 1) * src.width() as u64 / (w as u64 * 2)) as u32;
            out.extend_from_slice(&src.pixel(sx, sy));
        }
    }
    AlphaRaster::new(w, h, out).expect("dimensions checked by caller")
}

/// Per destination index, the source taps and normalized weights.
fn axis_weights(src: usize, dst: usize, filter: ResizeFilter) -> Vec<Vec<(usize, f32)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let mut taps: Vec<(usize, f64)> = match filter {
                ResizeFilter::Area => {
                    let lo = d as f64 * scale;
                    let hi = lo + scale;
                    let first = lo.floor() as usize;
                    let last = (hi.ceil() as usize).min(src);
                    (first..last)
                        .map(|i| {
                            let cover = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                            (i, cover)
                        })
                        .filter(|&(_, c)| c > 0.0)
                        .collect()
                }
                _ => {
                    let center = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                    let i0 = center.floor() as usize;
                    let i1 = (i0 + 1).min(src - 1);
                    let t = center - i0 as f64;
                    if i1 == i0 || t == 0.0 {
                        vec![(i0, 1.0)]
                    } else {
                        vec![(i0, 1.0 - t), (i1, t)]
                    }
                }
            };
            let total: f64 = taps.iter().map(|(_, w)| w).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps.into_iter().map(|(i, w)| (i, w as f32)).collect()
        })
        .collect()
}

/// RGBA as f32 with colour bled into transparent pixels.
fn bleed(src: &AlphaRaster) -> Vec<f32> {
    let (w, h) = (src.width() as usize, src.height() as usize);
    let mut plane: Vec<f32> = src.as_bytes().iter().map(|&v| v as f32).collect();
    let mut known: Vec<bool> = src.pixels().map(|p| p[3] > 0).collect();
    if known.iter().all(|&k| k) || !known.iter().any(|&k| k) {
        return plane;
    }
    for _ in 0..BLEED_PASSES {
        let mut updates = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if known[i] {
                    continue;
                }
                let mut sum = [0f32; 3];
                let mut n = 0;
                for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1), (-1, -1), (1, 1), (-1, 1), (1, -1)] {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if known[j] {
                        for c in 0..3 {
                            sum[c] += plane[j * 4 + c];
                        }
                        n += 1;
                    }
                }
                if n > 0 {
                    updates.push((i, sum.map(|s| s / n as f32)));
                }
            }
        }
        if updates.is_empty() {
            break;
        }
        for (i, rgb) in updates {
            plane[i * 4..i * 4 + 3].copy_from_slice(&rgb);
            known[i] = true;
        }
    }
    plane
}
