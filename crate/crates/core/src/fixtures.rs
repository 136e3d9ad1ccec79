//! Deterministic synthetic samples for tests, benchmarks and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compositor::composite;
use crate::layer::{
    AlphaRaster, BBox, CanvasSize, LayerKind, LayerSlot, LayerSource, MultiLayerSample,
    SemanticLayout, Stage, TransparentLayer,
};

pub fn random_raster(rng: &mut impl Rng, w: u32, h: u32, opaque: bool) -> AlphaRaster {
    let mut data = vec![0u8; w as usize * h as usize * 4];
    rng.fill(&mut data[..]);
    if opaque {
        for px in data.chunks_exact_mut(4) {
            px[3] = 255;
        }
    }
    AlphaRaster::new(w, h, data).expect("sized buffer")
}

/// A valid stage-C sample with `n` layers; the first is an opaque
/// background when `n >= 3`.
pub fn sample_with_layers(n: usize, seed: u64) -> MultiLayerSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64) << 32);
    let canvas = CanvasSize::new(32, 24);
    let mut slots = Vec::with_capacity(n);
    let mut layers = Vec::with_capacity(n);
    for i in 0..n {
        let (kind, bbox) = if i == 0 && n >= 3 {
            (LayerKind::Background, BBox::new(0, 0, canvas.width, canvas.height))
        } else {
            let w = rng.random_range(1..=20);
            let h = rng.random_range(1..=16);
            let x = rng.random_range(-4..(canvas.width as i32 - 1));
            let y = rng.random_range(-4..(canvas.height as i32 - 1));
            let kind = if i % 3 == 1 {
                LayerKind::Text
            } else if i % 3 == 2 {
                LayerKind::Decoration
            } else {
                LayerKind::Object
            };
            (kind, BBox::new(x, y, w, h))
        };
        let caption = match kind {
            LayerKind::Text => format!("Text: \"SALE {i}\" bold red"),
            _ => format!("{} layer {i}", kind.as_str()),
        };
        let style = (i % 2 == 0).then(|| "ink".to_string());
        let image = random_raster(&mut rng, bbox.w, bbox.h, kind == LayerKind::Background);
        slots.push(LayerSlot {
            bbox,
            z: i as i32 * 2,
            caption: caption.clone(),
            kind,
        });
        layers.push(TransparentLayer {
            image,
            caption,
            style,
            kind,
            source: LayerSource::Mock,
        });
    }
    let layout = SemanticLayout {
        canvas,
        slots,
        global_caption: format!("synthetic poster {seed}"),
    };
    let merged = composite(&layout, &layers).expect("aligned layers").merged;
    let mut scores = crate::layer::Scores::new();
    scores.insert("aesthetic".into(), rng.random_range(0.0..10.0));
    MultiLayerSample {
        id: format!("fx-{n}-{seed}"),
        layout,
        layers,
        merged,
        state: Stage::C,
        scores,
        style: None,
    }
}

/// `n` preference pairs from the planted mock embedder: each pair has its
/// own prompt, a good image as winner and a bad image as loser.
pub fn planted_pairs(n: usize, dim: usize, seed: u64) -> Vec<crate::tips::PreferencePair> {
    use crate::backends::{Embedder, MockEmbedder, PlantTag};
    let e = MockEmbedder::planted(seed, dim);
    (0..n)
        .map(|i| crate::tips::PreferencePair {
            e_win: e.embed_planted_image(PlantTag::Good, format!("w{i}").as_bytes()),
            e_lose: e.embed_planted_image(PlantTag::Bad, format!("l{i}").as_bytes()),
            e_text: e.embed_text(&format!("prompt {i}")).expect("mock embedder"),
            meta: crate::tips::PairMeta {
                win_id: format!("w{i}"),
                lose_id: format!("l{i}"),
                prompt: Some(format!("prompt {i}")),
            },
        })
        .collect()
}

/// A benchmark sample and whether a defect was planted in it.
#[derive(Debug, Clone)]
pub struct BenchmarkCase {
    pub sample: MultiLayerSample,
    pub planted: bool,
}

fn fits(boxes: &[BBox], b: &BBox, max_overlap: f64) -> bool {
    boxes
        .iter()
        .all(|o| crate::compositor::overlap_fraction(o, b) < max_overlap)
}

fn assemble(id: String, canvas: CanvasSize, parts: Vec<(BBox, LayerKind, AlphaRaster)>) -> MultiLayerSample {
    let mut slots = Vec::with_capacity(parts.len());
    let mut layers = Vec::with_capacity(parts.len());
    for (z, (bbox, kind, image)) in parts.into_iter().enumerate() {
        let caption = format!("{} {z}", kind.as_str());
        slots.push(LayerSlot {
            bbox,
            z: z as i32,
            caption: caption.clone(),
            kind,
        });
        layers.push(TransparentLayer {
            image,
            caption,
            style: None,
            kind,
            source: LayerSource::Mock,
        });
    }
    let layout = SemanticLayout {
        canvas,
        slots,
        global_caption: "benchmark".into(),
    };
    let merged = composite(&layout, &layers).expect("aligned layers").merged;
    MultiLayerSample {
        id,
        layout,
        layers,
        merged,
        state: Stage::C,
        scores: Default::default(),
        style: None,
    }
}

/// Artifact-detection benchmark: `clean` samples whose foreground layers
/// overlap by less than 70% of the smaller box (a quarter of them repeat a
/// motif at a distant position), and `planted` samples that add either a
/// byte-identical copy of a layer at a shifted, overlapping box or a
/// distinct layer covering at least 85% of another.
pub fn artifact_benchmark(clean: usize, planted: usize, seed: u64) -> Vec<BenchmarkCase> {
    let canvas = CanvasSize::new(96, 96);
    let mut out = Vec::with_capacity(clean + planted);
    for n in 0..clean + planted {
        let defect = n >= clean;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive_seed(seed, &["bench", &n.to_string()]));
        let mut parts = vec![(
            BBox::new(0, 0, canvas.width, canvas.height),
            LayerKind::Background,
            random_raster(&mut rng, canvas.width, canvas.height, true),
        )];
        let mut boxes: Vec<BBox> = Vec::new();
        let target = rng.random_range(2..=6);
        for _ in 0..60 {
            if boxes.len() == target {
                break;
            }
            let (w, h) = (rng.random_range(12..=40), rng.random_range(12..=40));
            let b = BBox::new(
                rng.random_range(0..=(canvas.width - w) as i32),
                rng.random_range(0..=(canvas.height - h) as i32),
                w,
                h,
            );
            if fits(&boxes, &b, 0.7) {
                let kind = if rng.random_bool(0.3) { LayerKind::Text } else { LayerKind::Object };
                parts.push((b, kind, random_raster(&mut rng, w, h, false)));
                boxes.push(b);
            }
        }
        if !defect && rng.random_bool(0.25) {
            // repeated motif, far from its twin
            let j = rng.random_range(1..parts.len());
            let (src, kind, image) = parts[j].clone();
            for _ in 0..60 {
                let b = BBox::new(
                    rng.random_range(0..=(canvas.width - src.w) as i32),
                    rng.random_range(0..=(canvas.height - src.h) as i32),
                    src.w,
                    src.h,
                );
                if crate::compositor::bbox_iou(&src, &b) <= 0.2 && fits(&boxes, &b, 0.7) {
                    parts.push((b, kind, image));
                    boxes.push(b);
                    break;
                }
            }
        }
        if defect {
            let j = rng.random_range(1..parts.len());
            let (src, kind, image) = parts[j].clone();
            if rng.random_bool(0.5) {
                loop {
                    let dx = rng.random_range(-(src.w as i32) / 4..=src.w as i32 / 4);
                    let dy = rng.random_range(-(src.h as i32) / 4..=src.h as i32 / 4);
                    let b = BBox::new(src.x + dx, src.y + dy, src.w, src.h);
                    if (dx, dy) != (0, 0) && crate::compositor::bbox_iou(&src, &b) > 0.4 {
                        parts.push((b, kind, image));
                        break;
                    }
                }
            } else {
                loop {
                    let w = rng.random_range(8..=src.w);
                    let h = rng.random_range(8..=src.h);
                    let x = src.x + rng.random_range(-(w as i32) / 6..=(src.w - w) as i32 + w as i32 / 6);
                    let y = src.y + rng.random_range(-(h as i32) / 6..=(src.h - h) as i32 + h as i32 / 6);
                    let b = BBox::new(x, y, w, h);
                    if crate::compositor::overlap_fraction(&src, &b) >= 0.85 {
                        parts.push((b, LayerKind::Decoration, random_raster(&mut rng, w, h, false)));
                        break;
                    }
                }
            }
        }
        out.push(BenchmarkCase {
            sample: assemble(format!("bench-{n:04}"), canvas, parts),
            planted: defect,
        });
    }
    out
}
