//! Human review decisions, the append-only decision journal and the
//! pending-review queue.
//!
//! A journal is UTF-8 JSON lines, one [`ReviewDecision`] per line. Every
//! append is flushed to disk before it is acknowledged. Records are
//! deduplicated by `(sample_id, reviewer, timestamp)`; when several records
//! exist for one sample the last one in journal order wins.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::compositor::{resize_raster, ResizeFilter};
use crate::error::{Error, Result};
use crate::layer::{AlphaRaster, LayerKind, ManifestEntry, RgbRaster, Stage, SampleStore};

/// Manifest score key holding a sample's aggregate artifact score.
pub const ARTIFACT_SCORE_KEY: &str = "artifact_score";

/// Manifest score key prefix for per-layer TIPS scores (`tips.0`, `tips.1`, ...).
pub fn tips_layer_key(i: usize) -> String {
    format!("tips.{i}")
}

/// Manifest score key prefix for per-layer artifact severities.
pub fn artifact_layer_key(i: usize) -> String {
    format!("artifact.{i}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Verdict {
    Accept,
    Reject,
    AcceptWithLayerRejects { layers: Vec<usize> },
}

impl Verdict {
    pub fn accepts(&self) -> bool {
        !matches!(self, Verdict::Reject)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewDecision {
    pub sample_id: String,
    pub verdict: Verdict,
    pub reviewer: String,
    /// RFC 3339.
    pub timestamp: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Why `ts` is not an acceptable RFC 3339 timestamp, if it is not.
pub fn timestamp_error(ts: &str) -> Option<String> {
    chrono::DateTime::parse_from_rfc3339(ts)
        .err()
        .map(|e| format!("not RFC 3339: {e}"))
}

pub type DecisionKey = (String, String, String);

impl ReviewDecision {
    pub fn key(&self) -> DecisionKey {
        (
            self.sample_id.clone(),
            self.reviewer.clone(),
            self.timestamp.clone(),
        )
    }

    /// Field-level validation; returns every problem found as
    /// `(field, message)`.
    pub fn field_errors(&self) -> Vec<(&'static str, String)> {
        let mut errs = Vec::new();
        if self.sample_id.trim().is_empty() {
            errs.push(("sample_id", "must not be empty".to_string()));
        }
        if self.reviewer.trim().is_empty() {
            errs.push(("reviewer", "must not be empty".to_string()));
        }
        if let Some(e) = timestamp_error(&self.timestamp) {
            errs.push(("timestamp", e));
        }
        if let Verdict::AcceptWithLayerRejects { layers } = &self.verdict {
            if layers.is_empty() {
                errs.push(("verdict.layers", "must list at least one layer".to_string()));
            }
            let unique: BTreeSet<_> = layers.iter().collect();
            if unique.len() != layers.len() {
                errs.push(("verdict.layers", "contains duplicates".to_string()));
            }
        }
        errs
    }

    pub fn check(&self) -> Result<()> {
        let errs = self.field_errors();
        if errs.is_empty() {
            return Ok(());
        }
        let msg = errs
            .iter()
            .map(|(f, m)| format!("{f}: {m}"))
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::Precondition(msg))
    }

    /// Checks layer-reject indices against the sample's layer count.
    pub fn check_layers(&self, layer_count: usize) -> Result<()> {
        if let Verdict::AcceptWithLayerRejects { layers } = &self.verdict {
            if let Some(bad) = layers.iter().find(|&&i| i >= layer_count) {
                return Err(Error::Precondition(format!(
                    "sample `{}` has {layer_count} layers; cannot reject layer {bad}",
                    self.sample_id
                )));
            }
        }
        Ok(())
    }
}

/// Keeps the last decision per sample, in journal order.
pub fn latest_decisions(decisions: &[ReviewDecision]) -> BTreeMap<&str, &ReviewDecision> {
    let mut out = BTreeMap::new();
    for d in decisions {
        out.insert(d.sample_id.as_str(), d);
    }
    out
}

/// Ids from `manifest` whose latest decision accepts them.
pub fn replay(manifest: &[ManifestEntry], decisions: &[ReviewDecision]) -> BTreeSet<String> {
    let ids: HashSet<&str> = manifest.iter().map(|e| e.id.as_str()).collect();
    latest_decisions(decisions)
        .into_iter()
        .filter(|(id, d)| ids.contains(id) && d.verdict.accepts())
        .map(|(id, _)| id.to_string())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AppendOutcome {
    pub deduplicated: bool,
}

#[derive(Debug)]
struct Writer {
    file: File,
    len: u64,
    seen: HashSet<DecisionKey>,
}

/// Single-writer, append-only decision journal.
#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    writer: Mutex<Writer>,
    entries: RwLock<Vec<ReviewDecision>>,
}

impl Journal {
    /// Opens (creating if absent) and loads the journal. A torn final line
    /// left by a crash is cut off; corruption anywhere else is an error.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        // bounded by the on-disk length so character devices cannot stall us
        let len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        let mut raw = Vec::new();
        (&mut file)
            .take(len)
            .read_to_end(&mut raw)
            .map_err(|e| Error::io(&path, e))?;

        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        let mut good = 0usize;
        let mut rest = &raw[..];
        let mut line_no = 0;
        while !rest.is_empty() {
            line_no += 1;
            let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
                break;
            };
            let line = &rest[..nl];
            if !line.iter().all(u8::is_ascii_whitespace) {
                let d: ReviewDecision = serde_json::from_slice(line).map_err(|e| {
                    Error::decode(format!("journal line {line_no}"), e.to_string())
                })?;
                if seen.insert(d.key()) {
                    entries.push(d);
                }
            }
            good += nl + 1;
            rest = &rest[nl + 1..];
        }
        if good < raw.len() {
            file.set_len(good as u64).map_err(|e| Error::io(&path, e))?;
        }
        file.seek(SeekFrom::End(0)).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            writer: Mutex::new(Writer {
                file,
                len: good as u64,
                seen,
            }),
            entries: RwLock::new(entries),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Validates, deduplicates and durably appends one decision. Returns
    /// only after the record is on disk.
    pub fn append(&self, decision: &ReviewDecision) -> Result<AppendOutcome> {
        decision.check()?;
        let mut line = serde_json::to_vec(decision)?;
        line.push(b'\n');

        let mut w = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let key = decision.key();
        if w.seen.contains(&key) {
            return Ok(AppendOutcome { deduplicated: true });
        }
        let written = w
            .file
            .write_all(&line)
            .and_then(|_| w.file.sync_data());
        if let Err(e) = written {
            // keep the file line-aligned for the next writer
            let len = w.len;
            let _ = w.file.set_len(len);
            return Err(Error::io(&self.path, e));
        }
        w.len += line.len() as u64;
        w.seen.insert(key);
        self.entries
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .push(decision.clone());
        Ok(AppendOutcome {
            deduplicated: false,
        })
    }

    /// Snapshot of all records in journal order.
    pub fn entries(&self) -> Vec<ReviewDecision> {
        self.entries.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample ids with at least one decision.
    pub fn decided(&self) -> HashSet<String> {
        self.entries
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .iter()
            .map(|d| d.sample_id.clone())
            .collect()
    }
}

/// Reads a journal file without opening it for writing.
pub fn read_journal(path: &Path) -> Result<Vec<ReviewDecision>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    // anything after the last newline is a torn append
    let complete = match raw.iter().rposition(|&b| b == b'\n') {
        Some(p) => &raw[..=p],
        None => &[][..],
    };
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in complete.split(|&b| b == b'\n').enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let d: ReviewDecision = serde_json::from_slice(line)
            .map_err(|e| Error::decode(format!("journal line {}", n + 1), e.to_string()))?;
        if seen.insert(d.key()) {
            out.push(d);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub index: usize,
    pub kind: LayerKind,
    pub caption: String,
    pub tips_score: Option<f64>,
    pub artifact_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewQueueItem {
    pub sample_id: String,
    pub thumbnail: String,
    pub layers: Vec<LayerSummary>,
    pub state: Stage,
    pub artifact_score: f64,
}

/// Per-layer summaries for a manifest entry, read from the sample's metadata.
pub fn layer_summaries(entry: &ManifestEntry, store: &SampleStore) -> Result<Vec<LayerSummary>> {
    let meta = store.read_meta(&entry.path)?;
    Ok(meta
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| LayerSummary {
            index: i,
            kind: l.kind,
            caption: l.caption.clone(),
            tips_score: entry.scores.get(&tips_layer_key(i)).copied(),
            artifact_flag: entry
                .scores
                .get(&artifact_layer_key(i))
                .is_some_and(|&s| s > 0.0),
        })
        .collect())
}

/// Entries without a decision, ordered by ascending artifact score, then id.
pub fn pending<'a>(manifest: &'a [ManifestEntry], decided: &HashSet<String>) -> Vec<&'a ManifestEntry> {
    let mut out: Vec<_> = manifest
        .iter()
        .filter(|e| !decided.contains(&e.id))
        .collect();
    out.sort_by(|a, b| {
        artifact_score(a)
            .total_cmp(&artifact_score(b))
            .then_with(|| a.id.cmp(&b.id))
    });
    out
}

pub fn artifact_score(entry: &ManifestEntry) -> f64 {
    entry.scores.get(ARTIFACT_SCORE_KEY).copied().unwrap_or(0.0)
}

/// Downscales so the longer side is at most `max_side`, flattened on white.
pub fn thumbnail(merged: &AlphaRaster, max_side: u32) -> Result<RgbRaster> {
    let (w, h) = merged.dims();
    let long = w.max(h);
    let img = if long > max_side {
        let s = max_side as f64 / long as f64;
        let tw = ((w as f64 * s).round() as u32).max(1);
        let th = ((h as f64 * s).round() as u32).max(1);
        resize_raster(merged, tw, th, ResizeFilter::Auto)?
    } else {
        merged.clone()
    };
    Ok(img.flatten([255, 255, 255]))
}
