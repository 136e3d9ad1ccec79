//! Rank-select by aesthetic score and stratified style assignment.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{ManifestEntry, Stage};
use crate::seed::derive_seed;

pub const AESTHETIC_KEY: &str = "aesthetic";

/// Number kept from a group of `n` at `proportion`: `ceil(proportion * n)`.
pub fn keep_count(n: usize, proportion: f64) -> usize {
    // guard against products like 0.1 * 30 = 3.0000000000000004
    let raw = proportion * n as f64;
    let k = if (raw - raw.round()).abs() < 1e-9 {
        raw.round()
    } else {
        raw.ceil()
    };
    (k as usize).min(n)
}

/// Groups entries below stage E by layer count and keeps the top
/// `ceil(proportion * |group|)` of each by aesthetic score (ties broken by
/// ascending id). Kept entries move to stage E; entries already at E or
/// later pass through, which makes repeated application a no-op. Output
/// preserves input order.
pub fn aesthetic_rank_select(entries: &[ManifestEntry], proportion: f64) -> Result<Vec<ManifestEntry>> {
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(Error::Config(format!(
            "rank-select proportion {proportion} must be in (0, 1]"
        )));
    }
    let mut groups: BTreeMap<usize, Vec<(f64, &str)>> = BTreeMap::new();
    for e in entries.iter().filter(|e| e.stage < Stage::E) {
        let score = e
            .scores
            .get(AESTHETIC_KEY)
            .copied()
            .filter(|s| s.is_finite())
            .ok_or_else(|| Error::MissingScore(e.id.clone()))?;
        groups.entry(e.layer_count).or_default().push((score, &e.id));
    }
    let mut kept: HashSet<&str> = HashSet::new();
    for group in groups.values_mut() {
        group.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        let k = keep_count(group.len(), proportion);
        kept.extend(group[..k].iter().map(|&(_, id)| id));
    }
    entries
        .iter()
        .filter(|e| e.stage >= Stage::E || kept.contains(e.id.as_str()))
        .map(|e| {
            let mut e = e.clone();
            e.stage = e.stage.advance(Stage::E.max(e.stage))?;
            Ok(e)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleAssignment {
    pub layout_id: String,
    pub style: String,
    /// Position within this style's draw.
    pub draw: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleSample {
    pub assignments: Vec<StyleAssignment>,
    /// Set when the pool was smaller than `n_per_style` and layouts were
    /// drawn with replacement.
    pub with_replacement: bool,
}

/// For each style, draws `n_per_style` layout ids from `pool` with a seeded
/// RNG (one stream per style), without replacement when the pool is large
/// enough.
pub fn stratified_style_sample(
    pool: &[String],
    styles: &[String],
    n_per_style: usize,
    seed: u64,
) -> Result<StyleSample> {
    if styles.is_empty() {
        return Err(Error::Config("style list is empty".into()));
    }
    if pool.is_empty() {
        return Err(Error::EmptyInput("layout pool"));
    }
    let with_replacement = pool.len() < n_per_style;
    let mut assignments = Vec::with_capacity(styles.len() * n_per_style);
    for style in styles {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["style", style]));
        let picks: Vec<usize> = if with_replacement {
            (0..n_per_style).map(|_| rng.random_range(0..pool.len())).collect()
        } else {
            index::sample(&mut rng, pool.len(), n_per_style).into_vec()
        };
        assignments.extend(picks.into_iter().enumerate().map(|(draw, i)| StyleAssignment {
            layout_id: pool[i].clone(),
            style: style.clone(),
            draw,
        }));
    }
    Ok(StyleSample {
        assignments,
        with_replacement,
    })
}
