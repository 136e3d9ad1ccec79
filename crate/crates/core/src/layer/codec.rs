//! Single-blob binary encoding of a [`MultiLayerSample`].
//!
//! Little-endian throughout. Strings are a `u32` byte length followed by UTF-8;
//! rasters are `u32` width, `u32` height, then raw straight-alpha RGBA bytes.
//! Decoding reports the dotted path of the field it failed on.

use super::{
    AlphaRaster, BBox, CanvasSize, LayerKind, LayerSlot, LayerSource, MultiLayerSample,
    SemanticLayout, Stage, TransparentLayer,
};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LFSMPL01";

pub fn serialize_sample(sample: &MultiLayerSample) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.str(&sample.id);
    w.opt_str(sample.style.as_deref());
    w.u8(stage_code(sample.state));
    w.str(&sample.layout.global_caption);
    w.u32(sample.layout.canvas.width);
    w.u32(sample.layout.canvas.height);
    w.u32(sample.layout.slots.len() as u32);
    for slot in &sample.layout.slots {
        w.i32(slot.bbox.x);
        w.i32(slot.bbox.y);
        w.u32(slot.bbox.w);
        w.u32(slot.bbox.h);
        w.i32(slot.z);
        w.str(&slot.caption);
        w.u8(kind_code(slot.kind));
    }
    w.u32(sample.scores.len() as u32);
    for (name, value) in &sample.scores {
        w.str(name);
        w.buf.extend_from_slice(&value.to_bits().to_le_bytes());
    }
    w.raster(&sample.merged);
    w.u32(sample.layers.len() as u32);
    for layer in &sample.layers {
        w.str(&layer.caption);
        w.opt_str(layer.style.as_deref());
        w.u8(kind_code(layer.kind));
        w.u8(source_code(layer.source));
        w.raster(&layer.image);
    }
    w.buf
}

pub fn deserialize_sample(bytes: &[u8]) -> Result<MultiLayerSample> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take("magic", MAGIC.len())?;
    if magic != MAGIC {
        return Err(Error::decode("magic", "not a layerforge sample blob"));
    }
    let id = r.str("id")?;
    let style = r.opt_str("style")?;
    let state = stage_from(r.u8("state")?).ok_or_else(|| Error::decode("state", "bad stage code"))?;
    let global_caption = r.str("layout.global_caption")?;
    let canvas = CanvasSize::new(r.u32("layout.canvas.width")?, r.u32("layout.canvas.height")?);

    let n_slots = r.count("layout.slots.len", 25)?;
    let mut slots = Vec::with_capacity(n_slots);
    for i in 0..n_slots {
        let f = |name: &str| format!("layout.slots[{i}].{name}");
        let bbox = BBox::new(
            r.i32(&f("bbox.x"))?,
            r.i32(&f("bbox.y"))?,
            r.u32(&f("bbox.w"))?,
            r.u32(&f("bbox.h"))?,
        );
        let z = r.i32(&f("z"))?;
        let caption = r.str(&f("caption"))?;
        let kind = kind_from(r.u8(&f("kind"))?)
            .ok_or_else(|| Error::decode(f("kind"), "bad layer kind code"))?;
        slots.push(LayerSlot {
            bbox,
            z,
            caption,
            kind,
        });
    }

    let n_scores = r.count("scores.len", 12)?;
    let mut scores = super::Scores::new();
    for i in 0..n_scores {
        let name = r.str(&format!("scores[{i}].name"))?;
        let bits = r.take(&format!("scores[{name}]"), 8)?;
        let value = f64::from_bits(u64::from_le_bytes(bits.try_into().expect("8 bytes")));
        scores.insert(name, value);
    }

    let merged = r.raster("merged")?;
    let n_layers = r.count("layers.len", 22)?;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let f = |name: &str| format!("layers[{i}].{name}");
        let caption = r.str(&f("caption"))?;
        let style = r.opt_str(&f("style"))?;
        let kind = kind_from(r.u8(&f("kind"))?)
            .ok_or_else(|| Error::decode(f("kind"), "bad layer kind code"))?;
        let source = source_from(r.u8(&f("source"))?)
            .ok_or_else(|| Error::decode(f("source"), "bad layer source code"))?;
        let image = r.raster(&f("image"))?;
        layers.push(TransparentLayer {
            image,
            caption,
            style,
            kind,
            source,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::decode(
            "trailer",
            format!("{} unexpected trailing bytes", bytes.len() - r.pos),
        ));
    }

    Ok(MultiLayerSample {
        id,
        layout: SemanticLayout {
            canvas,
            slots,
            global_caption,
        },
        layers,
        merged,
        state,
        scores,
        style,
    })
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn opt_str(&mut self, s: Option<&str>) {
        match s {
            Some(s) => {
                self.u8(1);
                self.str(s);
            }
            None => self.u8(0),
        }
    }

    fn raster(&mut self, r: &AlphaRaster) {
        self.u32(r.width());
        self.u32(r.height());
        self.buf.extend_from_slice(r.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, field: &str, n: usize) -> Result<&'a [u8]> {
        let remaining = self.buf.len() - self.pos;
        if n > remaining {
            return Err(Error::decode(
                field,
                format!("truncated: need {n} bytes, {remaining} remain"),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(field, 1)?[0])
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(field, 4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn i32(&mut self, field: &str) -> Result<i32> {
        let b = self.take(field, 4)?;
        Ok(i32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    /// Element count, sanity-checked against the bytes left so a corrupt
    /// length cannot trigger a huge allocation.
    fn count(&mut self, field: &str, min_elem_size: usize) -> Result<usize> {
        let n = self.u32(field)? as usize;
        let remaining = self.buf.len() - self.pos;
        if n.saturating_mul(min_elem_size) > remaining {
            return Err(Error::decode(
                field,
                format!("claims {n} elements but only {remaining} bytes remain"),
            ));
        }
        Ok(n)
    }

    fn str(&mut self, field: &str) -> Result<String> {
        let len = self.u32(field)? as usize;
        let bytes = self.take(field, len)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| Error::decode(field, e.to_string()))
    }

    fn opt_str(&mut self, field: &str) -> Result<Option<String>> {
        match self.u8(field)? {
            0 => Ok(None),
            1 => self.str(field).map(Some),
            other => Err(Error::decode(field, format!("bad option tag {other}"))),
        }
    }

    fn raster(&mut self, field: &str) -> Result<AlphaRaster> {
        let w = self.u32(&format!("{field}.width"))?;
        let h = self.u32(&format!("{field}.height"))?;
        let n = (w as usize)
            .checked_mul(h as usize)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::decode(field, "raster size overflows"))?;
        let pixels = self.take(&format!("{field}.pixels"), n)?;
        AlphaRaster::new(w, h, pixels.to_vec()).map_err(|e| Error::decode(field, e.to_string()))
    }
}

fn stage_code(s: Stage) -> u8 {
    Stage::ALL.iter().position(|&x| x == s).expect("stage listed") as u8
}

fn stage_from(code: u8) -> Option<Stage> {
    Stage::ALL.get(code as usize).copied()
}

fn kind_code(k: LayerKind) -> u8 {
    match k {
        LayerKind::Object => 0,
        LayerKind::Text => 1,
        LayerKind::Background => 2,
        LayerKind::Decoration => 3,
    }
}

fn kind_from(code: u8) -> Option<LayerKind> {
    Some(match code {
        0 => LayerKind::Object,
        1 => LayerKind::Text,
        2 => LayerKind::Background,
        3 => LayerKind::Decoration,
        _ => return None,
    })
}

fn source_code(s: LayerSource) -> u8 {
    match s {
        LayerSource::Generated => 0,
        LayerSource::Crawled => 1,
        LayerSource::Mock => 2,
    }
}

fn source_from(code: u8) -> Option<LayerSource> {
    Some(match code {
        0 => LayerSource::Generated,
        1 => LayerSource::Crawled,
        2 => LayerSource::Mock,
        _ => return None,
    })
}
