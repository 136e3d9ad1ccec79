//! On-disk sample store and line-delimited manifests.
//!
//! Each sample lives in its own directory:
//!
//! ```text
//! samples/<id>/meta.json     schema "prismlayers.v1"
//! samples/<id>/merged.png    composed RGBA render
//! samples/<id>/layer_00.png  one lossless RGBA file per layer, bottom to top
//! ```
//!
//! A manifest is UTF-8 JSON lines, one [`ManifestEntry`] per sample, with
//! `path` relative to the store root.

use std::fs;
use std::io::{BufRead, BufReader, Cursor, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    serialize_sample, AlphaRaster, CanvasSize, LayerKind, LayerSlot, LayerSource, ManifestEntry,
    MultiLayerSample, RgbRaster, Scores, SemanticLayout, Stage, TransparentLayer,
};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: &str = "prismlayers.v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMeta {
    pub schema: String,
    pub id: String,
    #[serde(default)]
    pub style: Option<String>,
    pub state: Stage,
    pub global_caption: String,
    pub canvas: CanvasSize,
    pub slots: Vec<LayerSlot>,
    #[serde(default)]
    pub scores: Scores,
    pub merged: String,
    pub layers: Vec<LayerMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerMeta {
    pub file: String,
    pub caption: String,
    #[serde(default)]
    pub style: Option<String>,
    pub kind: LayerKind,
    pub source: LayerSource,
}

/// Directory of samples plus helpers to resolve manifest paths.
#[derive(Debug, Clone)]
pub struct SampleStore {
    root: PathBuf,
}

impl SampleStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("samples")).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn sample_dir(&self, id: &str) -> PathBuf {
        self.root.join("samples").join(id)
    }

    pub fn resolve(&self, entry_path: &str) -> PathBuf {
        self.root.join(entry_path)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.sample_dir(id).join("meta.json").is_file()
    }

    /// Writes the sample directory (replacing any previous one atomically)
    /// and returns its manifest entry.
    pub fn write(&self, sample: &MultiLayerSample) -> Result<ManifestEntry> {
        check_id(&sample.id)?;
        let dir = self.sample_dir(&sample.id);
        let tmp = self.root.join("samples").join(format!(".tmp-{}", sample.id));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

        write_file(&tmp.join("merged.png"), &encode_png(&sample.merged)?)?;
        let mut layers = Vec::with_capacity(sample.layers.len());
        for (i, layer) in sample.layers.iter().enumerate() {
            let file = format!("layer_{i:02}.png");
            write_file(&tmp.join(&file), &encode_png(&layer.image)?)?;
            layers.push(LayerMeta {
                file,
                caption: layer.caption.clone(),
                style: layer.style.clone(),
                kind: layer.kind,
                source: layer.source,
            });
        }
        let meta = SampleMeta {
            schema: SCHEMA_VERSION.into(),
            id: sample.id.clone(),
            style: sample.style.clone(),
            state: sample.state,
            global_caption: sample.layout.global_caption.clone(),
            canvas: sample.layout.canvas,
            slots: sample.layout.slots.clone(),
            scores: sample.scores.clone(),
            merged: "merged.png".into(),
            layers,
        };
        let mut json = serde_json::to_vec_pretty(&meta)?;
        json.push(b'\n');
        write_file(&tmp.join("meta.json"), &json)?;

        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;

        Ok(ManifestEntry {
            id: sample.id.clone(),
            path: format!("samples/{}", sample.id),
            stage: sample.state,
            layer_count: sample.layer_count(),
            scores: sample.scores.clone(),
            digest: Some(sample_digest(sample)),
        })
    }

    pub fn read(&self, entry_path: &str) -> Result<MultiLayerSample> {
        read_sample_dir(&self.resolve(entry_path))
    }

    /// Metadata only, without decoding any image.
    pub fn read_meta(&self, entry_path: &str) -> Result<SampleMeta> {
        let path = self.resolve(entry_path).join("meta.json");
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&raw).map_err(|e| Error::decode("meta.json", e.to_string()))
    }

    pub fn read_id(&self, id: &str) -> Result<MultiLayerSample> {
        check_id(id)?;
        read_sample_dir(&self.sample_dir(id))
    }
}

pub fn read_sample_dir(dir: &Path) -> Result<MultiLayerSample> {
    let meta_path = dir.join("meta.json");
    let raw = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SampleMeta = serde_json::from_slice(&raw)
        .map_err(|e| Error::decode("meta.json", e.to_string()))?;
    if meta.schema != SCHEMA_VERSION {
        return Err(Error::decode(
            "schema",
            format!("expected {SCHEMA_VERSION}, found {}", meta.schema),
        ));
    }
    let merged = read_png(&dir.join(&meta.merged))?;
    let mut layers = Vec::with_capacity(meta.layers.len());
    for lm in &meta.layers {
        layers.push(TransparentLayer {
            image: read_png(&dir.join(&lm.file))?,
            caption: lm.caption.clone(),
            style: lm.style.clone(),
            kind: lm.kind,
            source: lm.source,
        });
    }
    Ok(MultiLayerSample {
        id: meta.id,
        layout: SemanticLayout {
            canvas: meta.canvas,
            slots: meta.slots,
            global_caption: meta.global_caption,
        },
        layers,
        merged,
        state: meta.state,
        scores: meta.scores,
        style: meta.style,
    })
}

/// Content digest (hex SHA-256 of the binary sample encoding).
pub fn sample_digest(sample: &MultiLayerSample) -> String {
    hex::encode(Sha256::digest(serialize_sample(sample)))
}

/// Sample ids double as directory names.
pub fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '~'));
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("invalid sample id `{id}`")))
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line)
            .map_err(|e| Error::decode(format!("manifest line {}", n + 1), e.to_string()))?;
        out.push(entry);
    }
    Ok(out)
}

pub fn manifest_bytes(entries: &[ManifestEntry]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

/// Writes via a temporary file and rename so readers never see a partial manifest.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    write_atomic(path, &manifest_bytes(entries)?)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_png(raster: &AlphaRaster) -> Result<Vec<u8>> {
    encode_png_raw(raster.width(), raster.height(), png::ColorType::Rgba, raster.as_bytes())
}

pub fn encode_png_rgb(raster: &RgbRaster) -> Result<Vec<u8>> {
    encode_png_raw(raster.width(), raster.height(), png::ColorType::Rgb, raster.as_bytes())
}

/// 8-bit grayscale PNG, used for mattes on the wire.
pub fn encode_png_gray(w: u32, h: u32, data: &[u8]) -> Result<Vec<u8>> {
    encode_png_raw(w, h, png::ColorType::Grayscale, data)
}

fn encode_png_raw(w: u32, h: u32, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w, h);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(data)
            .map_err(|e| Error::Png(e.to_string()))?;
        writer.finish().map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes any 8/16-bit PNG into straight-alpha RGBA8.
pub fn decode_png(bytes: &[u8]) -> Result<AlphaRaster> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width, info.height);
    let rgba = match info.color_type {
        png::ColorType::Rgba => buf,
        png::ColorType::Rgb => buf
            .chunks_exact(3)
            .flat_map(|p| [p[0], p[1], p[2], 255])
            .collect(),
        png::ColorType::GrayscaleAlpha => buf
            .chunks_exact(2)
            .flat_map(|p| [p[0], p[0], p[0], p[1]])
            .collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g, 255]).collect(),
        png::ColorType::Indexed => return Err(Error::Png("unexpanded palette image".into())),
    };
    AlphaRaster::new(w, h, rgba)
}

pub fn read_png(path: &Path) -> Result<AlphaRaster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::sample_with_layers;

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = SampleStore::open(dir.path()).unwrap();
        let sample = sample_with_layers(4, 11);
        let entry = store.write(&sample).unwrap();
        assert_eq!(entry.layer_count, 4);
        assert_eq!(entry.path, format!("samples/{}", sample.id));
        let back = store.read(&entry.path).unwrap();
        assert_eq!(back, sample);
        let meta: serde_json::Value = serde_json::from_slice(
            &fs::read(store.sample_dir(&sample.id).join("meta.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(meta["schema"], SCHEMA_VERSION);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = SampleStore::open(dir.path()).unwrap();
        let entries: Vec<_> = (0..3)
            .map(|i| store.write(&sample_with_layers(i + 1, i as u64)).unwrap())
            .collect();
        let path = dir.path().join("m.jsonl");
        write_manifest(&path, &entries).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), entries);
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().all(|l| l.contains("\"layer_count\"")));
    }

    #[test]
    fn ids_are_path_safe() {
        assert!(check_id("abc-01_x.y").is_ok());
        assert!(check_id("../etc").is_err());
        assert!(check_id("a/b").is_err());
        assert!(check_id("").is_err());
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let s = sample_with_layers(2, 5);
        let bytes = encode_png(&s.layers[1].image).unwrap();
        assert_eq!(decode_png(&bytes).unwrap(), s.layers[1].image);
    }
}
