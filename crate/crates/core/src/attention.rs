//! Diagnostics over exported attention maps and matting masks.
//!
//! `A` is a soft attention map in [0, 1], `M` a binary foreground mask and
//! `Ā` the binarized attention. Region metrics compare the background
//! (`1 - M`) against `Ā`, and the foreground `M` against `1 - Ā`.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GRID_MAGIC: &[u8; 7] = b"LFGRID1";

/// Row-major real-valued grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    width: u32,
    height: u32,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} grid given {} values",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, v: f64) -> Self {
        Self {
            width,
            height,
            data: vec![v; width as usize * height as usize],
        }
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn check_unit(&self, what: &str) -> Result<()> {
        match self.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            Some(v) => Err(Error::Precondition(format!("{what} value {v} outside [0, 1]"))),
            None => Ok(()),
        }
    }
}

/// Row-major binary grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32, data: Vec<bool>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} mask given {} values",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Values must be exactly 0 or 1.
    pub fn from_grid(g: &Grid) -> Result<Self> {
        let data = g
            .values()
            .iter()
            .map(|&v| match v {
                v if v == 0.0 => Ok(false),
                v if v == 1.0 => Ok(true),
                v => Err(Error::Precondition(format!("mask value {v} is not 0 or 1"))),
            })
            .collect::<Result<_>>()?;
        Self::new(g.width, g.height, data)
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[bool] {
        &self.data
    }

    pub fn invert(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    pub fn to_grid(&self) -> Grid {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

fn same_dims(a: (u32, u32), b: (u32, u32)) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

pub fn encode_grid(g: &Grid) -> Vec<u8> {
    let mut out = Vec::with_capacity(15 + g.len() * 4);
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&g.width.to_le_bytes());
    out.extend_from_slice(&g.height.to_le_bytes());
    for &v in &g.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Decodes one or more concatenated grids (a trajectory is a stack).
pub fn decode_grids(bytes: &[u8]) -> Result<Vec<Grid>> {
    let mut grids = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let field = |s: &str| format!("grid[{}].{s}", grids.len());
        let header = bytes
            .get(pos..pos + 15)
            .ok_or_else(|| Error::decode(field("header"), "truncated"))?;
        if &header[..7] != GRID_MAGIC {
            return Err(Error::decode(field("magic"), "expected LFGRID1"));
        }
        let w = u32::from_le_bytes(header[7..11].try_into().expect("4 bytes"));
        let h = u32::from_le_bytes(header[11..15].try_into().expect("4 bytes"));
        pos += 15;
        let n = (w as usize)
            .checked_mul(h as usize)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::decode(field("dims"), "size overflows"))?;
        let body = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::decode(field("values"), "truncated"))?;
        pos += n;
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        grids.push(Grid::new(w, h, data)?);
    }
    Ok(grids)
}

pub fn read_grids(path: &Path) -> Result<Vec<Grid>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grids(&bytes)
}

pub fn read_grid(path: &Path) -> Result<Grid> {
    let mut grids = read_grids(path)?;
    match grids.len() {
        1 => Ok(grids.remove(0)),
        n => Err(Error::decode(
            path.display().to_string(),
            format!("expected one grid, found {n}"),
        )),
    }
}

pub fn write_grids(path: &Path, grids: &[Grid]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for g in grids {
        f.write_all(&encode_grid(g)).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "method", content = "threshold", rename_all = "lowercase")]
pub enum Binarize {
    #[default]
    Otsu,
    Mean,
    Fixed(f64),
}

impl std::str::FromStr for Binarize {
    type Err = Error;

    /// `otsu`, `mean`, or `fixed:<t>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "otsu" => Ok(Binarize::Otsu),
            "mean" => Ok(Binarize::Mean),
            other => other
                .strip_prefix("fixed:")
                .and_then(|t| t.parse::<f64>().ok())
                .filter(|t| (0.0..=1.0).contains(t))
                .map(Binarize::Fixed)
                .ok_or_else(|| {
                    Error::Config(format!("binarization `{other}`: expected otsu, mean or fixed:<0..1>"))
                }),
        }
    }
}

const OTSU_BINS: usize = 256;

fn otsu_bin(v: f64) -> usize {
    ((v * OTSU_BINS as f64) as usize).min(OTSU_BINS - 1)
}

/// Otsu threshold as a bin index over 256 equal bins on [0, 1], or `None`
/// when no split separates anything (constant input).
pub fn otsu_threshold_bin(a: &Grid) -> Option<usize> {
    let mut hist = [0u64; OTSU_BINS];
    for &v in a.values() {
        hist[otsu_bin(v)] += 1;
    }
    let total = a.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0f64, 0f64);
    let mut best: Option<(usize, f64)> = None;
    for (t, &c) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if best.is_none_or(|(_, b)| var > b) {
            best = Some((t, var));
        }
    }
    best.filter(|&(_, v)| v > 0.0).map(|(t, _)| t)
}

pub fn binarize_attention(a: &Grid, method: Binarize) -> Result<Mask> {
    a.check_unit("attention")?;
    let mean_cut = || {
        let first = a.values().first().copied().unwrap_or(0.0);
        if a.values().iter().all(|&v| v == first) {
            return vec![false; a.len()];
        }
        let mean = a.values().iter().sum::<f64>() / a.len() as f64;
        a.values().iter().map(|&v| v > mean).collect::<Vec<_>>()
    };
    let data = match method {
        Binarize::Fixed(t) => a.values().iter().map(|&v| v > t).collect(),
        Binarize::Mean => mean_cut(),
        Binarize::Otsu => match otsu_threshold_bin(a) {
            Some(t) => a.values().iter().map(|&v| otsu_bin(v) > t).collect(),
            None => mean_cut(),
        },
    };
    Mask::new(a.width, a.height, data)
}

fn iou(a: impl Iterator<Item = (bool, bool)>) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for (x, y) in a {
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU of the background `1 - M` with `Ā`.
pub fn iou_bg(m: &Mask, a_bin: &Mask) -> Result<f64> {
    same_dims(m.dims(), a_bin.dims())?;
    Ok(iou(m.data.iter().zip(&a_bin.data).map(|(&m, &a)| (!m, a))))
}

/// IoU of the foreground `M` with `1 - Ā`.
pub fn iou_fg(m: &Mask, a_bin: &Mask) -> Result<f64> {
    same_dims(m.dims(), a_bin.dims())?;
    Ok(iou(m.data.iter().zip(&a_bin.data).map(|(&m, &a)| (m, !a))))
}

/// mean(((1 - M) - A)^2)
pub fn mse_bg(m: &Mask, a: &Grid) -> Result<f64> {
    same_dims(m.dims(), a.dims())?;
    let s: f64 = m
        .data
        .iter()
        .zip(&a.data)
        .map(|(&m, &a)| {
            let d = (1.0 - m as u8 as f64) - a;
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

/// mean((M - M * A)^2)
pub fn mse_fgleak(m: &Mask, a: &Grid) -> Result<f64> {
    same_dims(m.dims(), a.dims())?;
    let s: f64 = m
        .data
        .iter()
        .zip(&a.data)
        .map(|(&m, &a)| {
            let m = m as u8 as f64;
            let d = m - m * a;
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

/// `(d_fg, d_bg)`: the per-pixel mean absolute update across steps,
/// averaged over the foreground and background regions of `M`.
pub fn trajectory_magnitudes(trajectory: &[Grid], m: &Mask) -> Result<(f64, f64)> {
    if trajectory.is_empty() {
        return Err(Error::EmptyInput("trajectory"));
    }
    let mut field = vec![0f64; m.data.len()];
    for step in trajectory {
        same_dims(step.dims(), m.dims())?;
        for (f, v) in field.iter_mut().zip(&step.data) {
            *f += v.abs();
        }
    }
    let steps = trajectory.len() as f64;
    let (mut fg, mut nfg, mut bg, mut nbg) = (0f64, 0u64, 0f64, 0u64);
    for (f, &is_fg) in field.iter().zip(&m.data) {
        let v = f / steps;
        if is_fg {
            fg += v;
            nfg += 1;
        } else {
            bg += v;
            nbg += 1;
        }
    }
    if nfg == 0 {
        return Err(Error::UndefinedRegion("foreground"));
    }
    if nbg == 0 {
        return Err(Error::UndefinedRegion("background"));
    }
    Ok((fg / nfg as f64, bg / nbg as f64))
}

#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub a: Grid,
    pub m: Mask,
    pub trajectory: Option<Vec<Grid>>,
}

impl AttentionRecord {
    pub fn new(a: Grid, m: Mask, trajectory: Option<Vec<Grid>>) -> Result<Self> {
        same_dims(a.dims(), m.dims())?;
        a.check_unit("attention")?;
        Ok(Self { a, m, trajectory })
    }
}

/// One report row. Columns without data (no attention map, or no
/// trajectory) are `None` and render as `-`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub suffix_label: String,
    pub iou_bg: Option<f64>,
    pub iou_fg: Option<f64>,
    pub mse_bg: Option<f64>,
    pub mse_fgleak: Option<f64>,
    pub d_fg_minus_d_bg: Option<f64>,
    pub d_bg: Option<f64>,
}

pub fn metrics_row(label: &str, rec: &AttentionRecord, method: Binarize) -> Result<MetricsRow> {
    let a_bin = binarize_attention(&rec.a, method)?;
    let (d_diff, d_bg) = match &rec.trajectory {
        Some(t) => {
            let (fg, bg) = trajectory_magnitudes(t, &rec.m)?;
            (Some(fg - bg), Some(bg))
        }
        None => (None, None),
    };
    Ok(MetricsRow {
        suffix_label: label.to_string(),
        iou_bg: Some(iou_bg(&rec.m, &a_bin)?),
        iou_fg: Some(iou_fg(&rec.m, &a_bin)?),
        mse_bg: Some(mse_bg(&rec.m, &rec.a)?),
        mse_fgleak: Some(mse_fgleak(&rec.m, &rec.a)?),
        d_fg_minus_d_bg: d_diff,
        d_bg,
    })
}

/// Orders rows by `iou_bg`, best first; rows without it go last.
/// The sort is stable, so ties keep input order.
pub fn rank_rows(rows: &mut [MetricsRow]) {
    rows.sort_by(|a, b| match (a.iou_bg, b.iou_bg) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
}

pub fn metrics_report(records: &[(String, AttentionRecord)], method: Binarize) -> Result<Vec<MetricsRow>> {
    if records.is_empty() {
        return Err(Error::EmptyInput("attention records"));
    }
    let mut rows = records
        .par_iter()
        .map(|(label, rec)| metrics_row(label, rec, method))
        .collect::<Result<Vec<_>>>()?;
    rank_rows(&mut rows);
    Ok(rows)
}

pub const TSV_HEADER: [&str; 7] = [
    "suffix_label",
    "iou_bg",
    "iou_fg",
    "mse_bg",
    "mse_fgleak",
    "d_fg_minus_d_bg",
    "d_bg",
];

pub fn render_tsv(rows: &[MetricsRow]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    let mut out = TSV_HEADER.join("\t");
    out.push('\n');
    for r in rows {
        let cells = [
            r.suffix_label.replace(['\t', '\n'], " "),
            cell(r.iou_bg),
            cell(r.iou_fg),
            cell(r.mse_bg),
            cell(r.mse_fgleak),
            cell(r.d_fg_minus_d_bg),
            cell(r.d_bg),
        ];
        out.push_str(&cells.join("\t"));
        out.push('\n');
    }
    out
}

pub fn parse_tsv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or(Error::EmptyInput("metrics table"))?
        .split('\t')
        .collect();
    if header != TSV_HEADER {
        return Err(Error::decode("header", format!("unexpected columns {header:?}")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != TSV_HEADER.len() {
                return Err(Error::decode(
                    format!("row[{i}]"),
                    format!("expected {} cells, got {}", TSV_HEADER.len(), cells.len()),
                ));
            }
            let num = |j: usize| -> Result<Option<f64>> {
                match cells[j].trim() {
                    "-" => Ok(None),
                    s => s
                        .parse()
                        .map(Some)
                        .map_err(|_| Error::decode(format!("row[{i}].{}", TSV_HEADER[j]), s.to_string())),
                }
            };
            Ok(MetricsRow {
                suffix_label: cells[0].to_string(),
                iou_bg: num(1)?,
                iou_fg: num(2)?,
                mse_bg: num(3)?,
                mse_fgleak: num(4)?,
                d_fg_minus_d_bg: num(5)?,
                d_bg: num(6)?,
            })
        })
        .collect()
}

/// Published per-suffix attention statistics measured on a real diffusion
/// model; kept as reference data for report formatting and ranking checks.
pub const REFERENCE_TABLE_TSV: &str = include_str!("../fixtures/suffix_attention_reference.tsv");
