//! Deterministic stand-ins for the model roles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Embedder, EmbeddingVector, ImageGenerator, Matter, Recaptioner};
use crate::compositor::CanvasSpec;
use crate::error::{Error, Result};
use crate::layer::{AlphaRaster, Matte, RgbRaster};
use crate::prompting::{style_from_instruction, GRAY};

/// Prompts containing this marker make the mock generator return a blank
/// gray canvas, which the synthesis quality gate then rejects.
pub const FAIL_MARKER: &str = "[mock-fail]";

/// RGB-max distance from the background gray above which a pixel is foreground.
pub const MOCK_MATTE_THRESHOLD: u8 = 32;

fn rng_for(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Draws an axis-aligned ellipse in a hash-derived colour on mid-gray.
#[derive(Debug, Clone)]
pub struct MockGenerator {
    seed: u64,
}

impl MockGenerator {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// Semi-axis scale factor and colour the generator will use.
    fn params(&self, prompt: &str, seed: u64) -> (f64, [u8; 3]) {
        let mut rng = rng_for(&[
            b"generate",
            &self.seed.to_le_bytes(),
            &seed.to_le_bytes(),
            prompt.as_bytes(),
        ]);
        let scale = rng.random_range(0.55..0.85);
        let mut rgb: [u8; 3] = rng.random();
        let c = rng.random_range(0..3);
        rgb[c] = if rng.random::<bool>() {
            rng.random_range(0..=64)
        } else {
            rng.random_range(192..=255)
        };
        (scale, rgb)
    }
}

impl ImageGenerator for MockGenerator {
    fn generate(&self, prompt: &str, canvas: CanvasSpec, seed: u64) -> Result<RgbRaster> {
        canvas.check()?;
        let (w, h) = (canvas.width, canvas.height);
        let mut out = RgbRaster::filled(w, h, GRAY)?;
        if prompt.contains(FAIL_MARKER) {
            return Ok(out);
        }
        let (scale, rgb) = self.params(prompt, seed);
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let (ax, ay) = (cx * scale, cy * scale);
        for y in 0..h {
            let dy = (y as f64 + 0.5 - cy) / ay;
            for x in 0..w {
                let dx = (x as f64 + 0.5 - cx) / ax;
                if dx * dx + dy * dy <= 1.0 {
                    out.set_pixel(x, y, rgb);
                }
            }
        }
        Ok(out)
    }
}

/// Thresholds distance from gray, then feathers the boundary over two pixels.
#[derive(Debug, Clone, Copy)]
pub struct MockMatter {
    pub threshold: u8,
}

impl Default for MockMatter {
    fn default() -> Self {
        Self {
            threshold: MOCK_MATTE_THRESHOLD,
        }
    }
}

impl Matter for MockMatter {
    fn predict_matte(&self, image: &RgbRaster) -> Result<Matte> {
        let (w, h) = image.dims();
        let fg: Vec<bool> = image
            .pixels()
            .map(|p| {
                (0..3)
                    .map(|c| p[c].abs_diff(GRAY[c]))
                    .max()
                    .unwrap_or(0)
                    > self.threshold
            })
            .collect();
        let (wi, hi) = (w as i64, h as i64);
        let mut out = Vec::with_capacity(fg.len());
        for y in 0..hi {
            for x in 0..wi {
                let me = fg[(y * wi + x) as usize];
                // pixels touching the other class form the two-pixel ramp
                let mut edge = false;
                'n: for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx >= 0 && ny >= 0 && nx < wi && ny < hi && fg[(ny * wi + nx) as usize] != me {
                            edge = true;
                            break 'n;
                        }
                    }
                }
                out.push(match (me, edge) {
                    (true, false) => 1.0,
                    (true, true) => 0.75,
                    (false, true) => 0.25,
                    (false, false) => 0.0,
                });
            }
        }
        Matte::new(w, h, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedMode {
    /// Every input maps to an independent pseudo-random direction.
    Hashed,
    /// Tagged inputs get planted structure relative to fixed anchors.
    Planted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlantTag {
    Good,
    Bad,
}

/// Cosine between a planted image embedding and the image anchor.
pub const PLANT_COSINE: f64 = 0.8;
/// Cosine between a planted text embedding and the text anchor.
pub const PLANT_TEXT_COSINE: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct MockEmbedder {
    seed: u64,
    dim: usize,
    mode: EmbedMode,
}

impl MockEmbedder {
    pub fn hashed(seed: u64, dim: usize) -> Self {
        Self {
            seed,
            dim,
            mode: EmbedMode::Hashed,
        }
    }

    /// Planted mode: [`Self::embed_planted_image`] places good/bad images at
    /// cosine ±0.8 from an image anchor; every text sits at cosine 0.5 from a
    /// separate, orthogonal text anchor. Identity scoring is therefore
    /// uninformative and a projection has to learn the anchor mapping.
    pub fn planted(seed: u64, dim: usize) -> Self {
        Self {
            seed,
            dim,
            mode: EmbedMode::Planted,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> EmbedMode {
        self.mode
    }

    fn gaussian(&self, parts: &[&[u8]]) -> Vec<f64> {
        let seed = self.seed.to_le_bytes();
        let mut all: Vec<&[u8]> = vec![b"embed", &seed];
        all.extend_from_slice(parts);
        let mut rng = rng_for(&all);
        (0..self.dim)
            .map(|_| {
                // Box-Muller
                let u1: f64 = 1.0 - rng.random::<f64>();
                let u2: f64 = rng.random();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect()
    }

    fn unit(&self, parts: &[&[u8]]) -> Vec<f64> {
        EmbeddingVector::normalized(self.gaussian(parts))
            .expect("gaussian draw is non-zero")
            .0
    }

    /// Orthonormal image and text anchors.
    pub fn anchors(&self) -> (EmbeddingVector, EmbeddingVector) {
        let a = self.unit(&[b"anchor-image"]);
        let mut b = self.gaussian(&[b"anchor-text"]);
        orthogonalize(&mut b, &[&a]);
        (
            EmbeddingVector(a),
            EmbeddingVector::normalized(b).expect("anchor draw is non-degenerate"),
        )
    }

    fn noise_orthogonal_to_anchors(&self, parts: &[&[u8]]) -> Vec<f64> {
        let (a, b) = self.anchors();
        let mut n = self.gaussian(parts);
        orthogonalize(&mut n, &[a.values(), b.values()]);
        EmbeddingVector::normalized(n).expect("noise draw is non-degenerate").0
    }

    pub fn embed_planted_image(&self, tag: PlantTag, key: &[u8]) -> EmbeddingVector {
        let (a, _) = self.anchors();
        let n = self.noise_orthogonal_to_anchors(&[b"planted-image", key]);
        let sign = match tag {
            PlantTag::Good => 1.0,
            PlantTag::Bad => -1.0,
        };
        let c = PLANT_COSINE;
        let s = (1.0 - c * c).sqrt();
        EmbeddingVector(a.values().iter().zip(&n).map(|(a, n)| sign * c * a + s * n).collect())
    }

    fn embed_planted_text(&self, text: &str) -> EmbeddingVector {
        let (_, b) = self.anchors();
        let m = self.noise_orthogonal_to_anchors(&[b"planted-text", text.as_bytes()]);
        let c = PLANT_TEXT_COSINE;
        let s = (1.0 - c * c).sqrt();
        EmbeddingVector(b.values().iter().zip(&m).map(|(b, m)| c * b + s * m).collect())
    }
}

fn orthogonalize(v: &mut [f64], basis: &[&[f64]]) {
    for u in basis {
        let d: f64 = v.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
        for (x, y) in v.iter_mut().zip(u.iter()) {
            *x -= d * y;
        }
    }
}

impl Embedder for MockEmbedder {
    fn embed_image(&self, image: &AlphaRaster) -> Result<EmbeddingVector> {
        let dims = [image.width().to_le_bytes(), image.height().to_le_bytes()].concat();
        Ok(EmbeddingVector(self.unit(&[b"image", &dims, image.as_bytes()])))
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(match self.mode {
            EmbedMode::Hashed => EmbeddingVector(self.unit(&[b"text", text.as_bytes()])),
            EmbedMode::Planted => self.embed_planted_text(text),
        })
    }
}

/// Echoes the requested style and a colour summary of the image.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockRecaptioner;

impl Recaptioner for MockRecaptioner {
    fn recaption(&self, image: &RgbRaster, instruction: &str) -> Result<String> {
        if instruction.trim().is_empty() {
            return Err(Error::Precondition("recaption instruction is empty".into()));
        }
        let mut sum = [0u64; 3];
        let mut n = 0u64;
        for p in image.pixels().filter(|p| *p != GRAY) {
            for c in 0..3 {
                sum[c] += p[c] as u64;
            }
            n += 1;
        }
        let body = if n == 0 {
            "An empty frame.".to_string()
        } else {
            let m = sum.map(|s| s / n);
            format!(
                "A rounded shape filled with the colour rgb({}, {}, {}).",
                m[0], m[1], m[2]
            )
        };
        Ok(match style_from_instruction(instruction) {
            Some(style) => format!("This is a {style} style image. {body}"),
            None => body,
        })
    }
}
