//! Text-conditioned preference scoring for transparent images.
//!
//! The score of an image for a prompt is the dot product of the
//! (optionally projected, renormalized) image embedding with the text
//! embedding. A pair's win probability is the two-way softmax of
//! temperature-scaled scores; training minimizes its negative log over
//! ensemble-labelled pairs. Embeddings come frozen from the embed backend;
//! only the temperature and projection are learned.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::EmbeddingVector;
use crate::error::{Error, Result};
use crate::layer::Scores;

pub const SCORERS: [&str; 5] = [
    "aesthetic-v25",
    "image-reward",
    "laion-aesthetic",
    "hpsv2",
    "vqa-score",
];

pub const DEFAULT_TAU: f64 = 10.0;
pub const DEFAULT_MARGIN: f64 = 0.2;
const TAU_FLOOR: f64 = 1e-3;
const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnsembleWeights(pub BTreeMap<String, f64>);

impl Default for EnsembleWeights {
    /// Uniform over the five scorers.
    fn default() -> Self {
        Self(SCORERS.iter().map(|s| (s.to_string(), 0.2)).collect())
    }
}

impl EnsembleWeights {
    pub fn check(&self) -> Result<()> {
        if !self.0.values().any(|&w| w != 0.0) {
            return Err(Error::Config("ensemble needs at least one nonzero weight".into()));
        }
        if let Some((k, w)) = self.0.iter().find(|(_, w)| !w.is_finite()) {
            return Err(Error::Config(format!("weight for `{k}` is {w}")));
        }
        Ok(())
    }

    fn active(&self) -> impl Iterator<Item = (&String, f64)> {
        self.0.iter().filter(|(_, &w)| w != 0.0).map(|(k, &w)| (k, w))
    }
}

/// Per-scorer z-scores over `batch` (population std-dev; a constant scorer
/// maps to 0). Scorers absent from some items are normalized over the items
/// that have them.
pub fn z_normalize(batch: &[Scores]) -> Vec<Scores> {
    let mut stats: BTreeMap<&str, (f64, f64, f64)> = BTreeMap::new();
    for s in batch {
        for (k, &v) in s {
            let e = stats.entry(k.as_str()).or_default();
            e.0 += 1.0;
            e.1 += v;
            e.2 += v * v;
        }
    }
    let moments: BTreeMap<&str, (f64, f64)> = stats
        .into_iter()
        .map(|(k, (n, s, sq))| {
            let mean = s / n;
            (k, (mean, (sq / n - mean * mean).max(0.0).sqrt()))
        })
        .collect();
    batch
        .iter()
        .map(|s| {
            s.iter()
                .map(|(k, &v)| {
                    let (mean, sd) = moments[k.as_str()];
                    let z = if sd > 0.0 { (v - mean) / sd } else { 0.0 };
                    (k.clone(), z)
                })
                .collect()
        })
        .collect()
}

/// Weighted sum of (already z-normalized) scorer outputs.
pub fn ensemble_quality(z_scores: &Scores, w: &EnsembleWeights) -> Result<f64> {
    w.check()?;
    let mut total = 0.0;
    for (k, wk) in w.active() {
        let z = z_scores
            .get(k)
            .ok_or_else(|| Error::MissingInput(format!("score from `{k}`")))?;
        total += wk * z;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub image: EmbeddingVector,
    /// Raw scorer outputs; normalized across the candidate set.
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PairMeta {
    pub win_id: String,
    pub lose_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub e_win: EmbeddingVector,
    pub e_lose: EmbeddingVector,
    pub e_text: EmbeddingVector,
    #[serde(default)]
    pub meta: PairMeta,
}

impl PreferencePair {
    pub fn check(&self) -> Result<()> {
        let d = self.e_text.dim();
        for (name, v) in [("e_win", &self.e_win), ("e_lose", &self.e_lose), ("e_text", &self.e_text)] {
            if v.dim() != d {
                return Err(Error::DimensionMismatch(format!("{name} has dim {}, expected {d}", v.dim())));
            }
            check_unit(name, v)?;
        }
        Ok(())
    }

    pub fn swapped(&self) -> PreferencePair {
        PreferencePair {
            e_win: self.e_lose.clone(),
            e_lose: self.e_win.clone(),
            e_text: self.e_text.clone(),
            meta: PairMeta {
                win_id: self.meta.lose_id.clone(),
                lose_id: self.meta.win_id.clone(),
                prompt: self.meta.prompt.clone(),
            },
        }
    }
}

fn check_unit(name: &str, v: &EmbeddingVector) -> Result<()> {
    let n = v.values().iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::Precondition(format!("{name} has norm {n}, expected 1")));
    }
    Ok(())
}

/// Every candidate pair whose ensemble quality differs by more than
/// `margin`, oriented higher-quality first. Candidates share `text`.
pub fn build_pairs(
    text: &EmbeddingVector,
    prompt: Option<&str>,
    candidates: &[Candidate],
    w: &EnsembleWeights,
    margin: f64,
) -> Result<Vec<PreferencePair>> {
    if candidates.len() < 2 {
        return Err(Error::Precondition("need at least two candidates per prompt".into()));
    }
    let raw: Vec<Scores> = candidates.iter().map(|c| c.scores.clone()).collect();
    let quality = z_normalize(&raw)
        .iter()
        .map(|z| ensemble_quality(z, w))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for i in 0..candidates.len() {
        for j in i + 1..candidates.len() {
            let d = quality[i] - quality[j];
            if d.abs() <= margin {
                continue;
            }
            let (win, lose) = if d > 0.0 { (i, j) } else { (j, i) };
            out.push(PreferencePair {
                e_win: candidates[win].image.clone(),
                e_lose: candidates[lose].image.clone(),
                e_text: text.clone(),
                meta: PairMeta {
                    win_id: candidates[win].id.clone(),
                    lose_id: candidates[lose].id.clone(),
                    prompt: prompt.map(str::to_string),
                },
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingProvenance {
    pub pairs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub l2: f64,
    pub final_train_loss: Option<f64>,
    pub final_heldout_accuracy: Option<f64>,
}

pub const MODEL_FORMAT: &str = "layerforge.tips.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TipsModel {
    pub format: String,
    pub dim: usize,
    pub tau: f64,
    /// Row-major `dim x dim`; `None` means identity.
    pub projection: Option<Vec<f64>>,
    #[serde(default)]
    pub provenance: Option<TrainingProvenance>,
}

impl TipsModel {
    /// Identity projection and the default temperature.
    pub fn init(dim: usize) -> Self {
        let mut p = vec![0.0; dim * dim];
        for i in 0..dim {
            p[i * dim + i] = 1.0;
        }
        Self {
            format: MODEL_FORMAT.into(),
            dim,
            tau: DEFAULT_TAU,
            projection: Some(p),
            provenance: None,
        }
    }

    pub fn without_projection(dim: usize, tau: f64) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            dim,
            tau,
            projection: None,
            provenance: None,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if let Some(p) = &self.projection {
            if p.len() != self.dim * self.dim {
                return Err(Error::DimensionMismatch(format!(
                    "projection has {} entries, dim {} needs {}",
                    p.len(),
                    self.dim,
                    self.dim * self.dim
                )));
            }
            if let Some(r) = p.chunks_exact(self.dim).position(|row| row.iter().all(|&v| v == 0.0)) {
                return Err(Error::Config(format!("projection row {r} is all zero")));
            }
        }
        Ok(())
    }

    fn project(&self, e: &[f64]) -> Vec<f64> {
        match &self.projection {
            None => e.to_vec(),
            Some(p) => p
                .chunks_exact(self.dim)
                .map(|row| row.iter().zip(e).map(|(a, b)| a * b).sum())
                .collect(),
        }
    }

    /// Score plus the pieces needed for its gradient: `(s, u, |v|)` where
    /// `v = P e` and `u = v / |v|`.
    fn score_parts(&self, e_image: &[f64], e_text: &[f64]) -> (f64, Vec<f64>, f64) {
        let v = self.project(e_image);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let u: Vec<f64> = v.iter().map(|x| x / norm).collect();
        let s = u.iter().zip(e_text).map(|(a, b)| a * b).sum();
        (s, u, norm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)?;
        crate::layer::store::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: TipsModel = serde_json::from_slice(&bytes)?;
        if m.format != MODEL_FORMAT {
            return Err(Error::decode("format", format!("unsupported model format `{}`", m.format)));
        }
        m.check()?;
        Ok(m)
    }
}

fn check_dims(model: &TipsModel, vs: &[&EmbeddingVector]) -> Result<()> {
    for v in vs {
        if v.dim() != model.dim {
            return Err(Error::DimensionMismatch(format!(
                "embedding dim {} vs model dim {}",
                v.dim(),
                model.dim
            )));
        }
    }
    Ok(())
}

/// `(P e_image / |P e_image|) . e_text`, in [-1, 1].
pub fn tips_score(model: &TipsModel, e_image: &EmbeddingVector, e_text: &EmbeddingVector) -> Result<f64> {
    check_dims(model, &[e_image, e_text])?;
    Ok(model.score_parts(e_image.values(), e_text.values()).0)
}

/// ln(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn score_gap(model: &TipsModel, pair: &PreferencePair) -> f64 {
    let t = pair.e_text.values();
    model.score_parts(pair.e_win.values(), t).0 - model.score_parts(pair.e_lose.values(), t).0
}

/// `exp(tau s_w) / (exp(tau s_w) + exp(tau s_l))`, evaluated as
/// `exp(-softplus(-tau (s_w - s_l)))`.
pub fn p_win(model: &TipsModel, pair: &PreferencePair) -> Result<f64> {
    check_dims(model, &[&pair.e_win, &pair.e_lose, &pair.e_text])?;
    Ok((-softplus(-model.tau * score_gap(model, pair))).exp())
}

/// `-ln p_win`.
pub fn pref_loss(model: &TipsModel, pair: &PreferencePair) -> Result<f64> {
    check_dims(model, &[&pair.e_win, &pair.e_lose, &pair.e_text])?;
    Ok(softplus(-model.tau * score_gap(model, pair)))
}

/// Gradient of [`pref_loss`]. `projection` is row-major and present iff
/// the model has a projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub tau: f64,
    pub projection: Option<Vec<f64>>,
}

/// Per-pair gradient in factored form: `dP = sum c_k (g_k outer e_k)`.
struct PairGrad {
    loss: f64,
    tau: f64,
    /// (coefficient, dL/dv direction, image embedding) for win and lose.
    terms: [(f64, Vec<f64>, Vec<f64>); 2],
}

fn pair_grad(model: &TipsModel, pair: &PreferencePair) -> PairGrad {
    let t = pair.e_text.values();
    let (sw, uw, nw) = model.score_parts(pair.e_win.values(), t);
    let (sl, ul, nl) = model.score_parts(pair.e_lose.values(), t);
    let gap = sw - sl;
    let loss = softplus(-model.tau * gap);
    // dL/dgap = -tau * (1 - p) with 1 - p = sigmoid(-tau * gap)
    let one_minus_p = (-softplus(model.tau * gap)).exp();
    let d_gap = -model.tau * one_minus_p;
    // ds/dv = (t - s u) / |v|
    let ds_dv = |s: f64, u: &[f64], n: f64| -> Vec<f64> {
        t.iter().zip(u).map(|(ti, ui)| (ti - s * ui) / n).collect()
    };
    PairGrad {
        loss,
        tau: -gap * one_minus_p,
        terms: [
            (d_gap, ds_dv(sw, &uw, nw), pair.e_win.values().to_vec()),
            (-d_gap, ds_dv(sl, &ul, nl), pair.e_lose.values().to_vec()),
        ],
    }
}

pub fn pref_loss_grad(model: &TipsModel, pair: &PreferencePair) -> Result<(f64, LossGrad)> {
    check_dims(model, &[&pair.e_win, &pair.e_lose, &pair.e_text])?;
    let g = pair_grad(model, pair);
    let projection = model.projection.as_ref().map(|_| {
        let d = model.dim;
        let mut out = vec![0.0; d * d];
        accumulate_outer(&mut out, d, &g.terms, 1.0);
        out
    });
    Ok((
        g.loss,
        LossGrad {
            tau: g.tau,
            projection,
        },
    ))
}

fn accumulate_outer(out: &mut [f64], d: usize, terms: &[(f64, Vec<f64>, Vec<f64>); 2], scale: f64) {
    for (c, g, e) in terms {
        let c = c * scale;
        for (i, row) in out.chunks_exact_mut(d).enumerate() {
            let gi = c * g[i];
            if gi == 0.0 {
                continue;
            }
            for (r, ej) in row.iter_mut().zip(e) {
                *r += gi * ej;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Weight of `0.5 * |P - I|^2`.
    pub l2: f64,
    /// Fraction of pairs held out for accuracy reporting.
    pub holdout_fraction: f64,
    pub learn_tau: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 20,
            batch: 16,
            seed: 0,
            l2: 1e-4,
            holdout_fraction: 0.2,
            learn_tau: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub heldout_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TipsModel,
    pub history: Vec<EpochReport>,
    pub train_indices: Vec<usize>,
    pub heldout_indices: Vec<usize>,
}

/// Fraction of pairs whose win image outscores the lose image.
pub fn pairwise_accuracy(model: &TipsModel, pairs: &[&PreferencePair]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let correct = pairs
        .par_iter()
        .map(|p| (score_gap(model, p) > 0.0) as usize)
        .sum::<usize>();
    Some(correct as f64 / pairs.len() as f64)
}

pub fn mean_loss(model: &TipsModel, pairs: &[&PreferencePair]) -> f64 {
    let losses: Vec<f64> = pairs
        .par_iter()
        .map(|p| softplus(-model.tau * score_gap(model, p)))
        .collect();
    losses.iter().sum::<f64>() / losses.len().max(1) as f64
}

/// Deterministic split: a seeded shuffle, the first `ceil(f * n)` held out.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(crate::seed::derive_seed(seed, &["tips-holdout"])));
    let k = ((n as f64 * fraction).ceil() as usize).min(n.saturating_sub(1));
    let (held, train) = idx.split_at(k);
    let (mut held, mut train) = (held.to_vec(), train.to_vec());
    held.sort_unstable();
    train.sort_unstable();
    (train, held)
}

/// Mini-batch gradient descent on mean [`pref_loss`], starting from `init`.
pub fn train(init: &TipsModel, pairs: &[PreferencePair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("preference pairs"));
    }
    init.check()?;
    if cfg.batch == 0 || !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(Error::Config("batch >= 1, lr > 0 and holdout_fraction in [0, 1) required".into()));
    }
    for p in pairs {
        check_dims(init, &[&p.e_win, &p.e_lose, &p.e_text])?;
    }
    let (train_idx, held_idx) = holdout_split(pairs.len(), cfg.holdout_fraction, cfg.seed);
    let train_set: Vec<&PreferencePair> = train_idx.iter().map(|&i| &pairs[i]).collect();
    let held_set: Vec<&PreferencePair> = held_idx.iter().map(|&i| &pairs[i]).collect();

    let mut model = init.clone();
    let d = model.dim;
    let identity_gap = |p: &[f64], i: usize| p[i] - if i / d == i % d { 1.0 } else { 0.0 };
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut grad_p = vec![0.0; if model.projection.is_some() { d * d } else { 0 }];

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(
            crate::seed::derive_seed(cfg.seed, &["tips-epoch", &epoch.to_string()]),
        ));
        for chunk in order.chunks(cfg.batch) {
            let grads: Vec<PairGrad> = chunk
                .par_iter()
                .map(|&i| pair_grad(&model, train_set[i]))
                .collect();
            let scale = 1.0 / chunk.len() as f64;
            let g_tau: f64 = grads.iter().map(|g| g.tau).sum::<f64>() * scale;
            if let Some(p) = model.projection.as_mut() {
                grad_p.iter_mut().for_each(|g| *g = 0.0);
                for g in &grads {
                    accumulate_outer(&mut grad_p, d, &g.terms, scale);
                }
                for i in 0..p.len() {
                    let reg = cfg.l2 * identity_gap(p, i);
                    p[i] -= cfg.lr * (grad_p[i] + reg);
                }
            }
            if cfg.learn_tau {
                model.tau = (model.tau - cfg.lr * g_tau).max(TAU_FLOOR);
            }
        }
        let train_loss = mean_loss(&model, &train_set);
        if !train_loss.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                loss: train_loss,
            });
        }
        history.push(EpochReport {
            epoch,
            train_loss,
            train_accuracy: pairwise_accuracy(&model, &train_set).unwrap_or(0.0),
            heldout_accuracy: pairwise_accuracy(&model, &held_set),
        });
    }

    if cfg.epochs > 0 {
        let last = history.last().expect("at least one epoch");
        model.provenance = Some(TrainingProvenance {
            pairs: pairs.len(),
            epochs: cfg.epochs,
            lr: cfg.lr,
            batch: cfg.batch,
            seed: cfg.seed,
            l2: cfg.l2,
            final_train_loss: Some(last.train_loss),
            final_heldout_accuracy: last.heldout_accuracy,
        });
    }
    Ok(TrainOutcome {
        model,
        history,
        train_indices: train_idx,
        heldout_indices: held_idx,
    })
}

pub fn read_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let p: PreferencePair = serde_json::from_str(l)
                .map_err(|e| Error::decode(format!("{}:{}", path.display(), i + 1), e.to_string()))?;
            p.check()?;
            Ok(p)
        })
        .collect()
}

pub fn write_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let mut out = Vec::new();
    for p in pairs {
        serde_json::to_writer(&mut out, p)?;
        out.push(b'\n');
    }
    crate::layer::store::write_atomic(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn unit(rng: &mut impl Rng, d: usize) -> EmbeddingVector {
        EmbeddingVector::normalized((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn pair(rng: &mut impl Rng, d: usize) -> PreferencePair {
        PreferencePair {
            e_win: unit(rng, d),
            e_lose: unit(rng, d),
            e_text: unit(rng, d),
            meta: PairMeta::default(),
        }
    }

    #[test]
    fn ensemble_examples() {
        let w1 = EnsembleWeights([("hpsv2".to_string(), 1.0)].into());
        let z: Scores = [("hpsv2".to_string(), 0.7)].into();
        assert_eq!(ensemble_quality(&z, &w1).unwrap(), 0.7);

        let w2 = EnsembleWeights([("a".to_string(), 0.5), ("b".to_string(), 0.5)].into());
        let z2: Scores = [("a".to_string(), 1.0), ("b".to_string(), -1.0)].into();
        assert_eq!(ensemble_quality(&z2, &w2).unwrap(), 0.0);

        let missing: Scores = [("a".to_string(), 1.0)].into();
        assert!(matches!(ensemble_quality(&missing, &w2), Err(Error::MissingInput(_))));
        assert!(EnsembleWeights([("a".to_string(), 0.0)].into()).check().is_err());
    }

    #[test]
    fn z_normalization() {
        let batch: Vec<Scores> = [1.0, 2.0, 3.0]
            .iter()
            .map(|&v| [("s".to_string(), v), ("c".to_string(), 5.0)].into())
            .collect();
        let z = z_normalize(&batch);
        let sd = (2.0f64 / 3.0).sqrt();
        assert!((z[0]["s"] + 1.0 / sd).abs() < 1e-12);
        assert_eq!(z[1]["s"], 0.0);
        assert!(z.iter().all(|s| s["c"] == 0.0));
    }

    fn cand(id: &str, rng: &mut impl Rng, q: f64) -> Candidate {
        Candidate {
            id: id.into(),
            image: unit(rng, 4),
            scores: [("hpsv2".to_string(), q)].into(),
        }
    }

    #[test]
    fn pair_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = unit(&mut rng, 4);
        let w = EnsembleWeights([("hpsv2".to_string(), 1.0)].into());
        let two = [cand("a", &mut rng, 1.0), cand("b", &mut rng, 0.0)];
        let p = build_pairs(&t, None, &two, &w, 0.1).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].meta.win_id, "a");

        let tie = [cand("a", &mut rng, 1.0), cand("b", &mut rng, 1.0)];
        assert!(build_pairs(&t, None, &tie, &w, 0.1).unwrap().is_empty());

        let four: Vec<_> = [3.0, 1.0, 4.0, 2.0]
            .iter()
            .enumerate()
            .map(|(i, &q)| cand(&i.to_string(), &mut rng, q))
            .collect();
        let p = build_pairs(&t, None, &four, &w, 0.0).unwrap();
        assert_eq!(p.len(), 6);
        let q = |id: &str| four[id.parse::<usize>().unwrap()].scores["hpsv2"];
        assert!(p.iter().all(|p| q(&p.meta.win_id) > q(&p.meta.lose_id)));
    }

    #[test]
    fn equal_embeddings_are_a_coin_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = unit(&mut rng, 8);
        let p = PreferencePair {
            e_win: e.clone(),
            e_lose: e,
            e_text: unit(&mut rng, 8),
            meta: PairMeta::default(),
        };
        let m = TipsModel::init(8);
        assert_eq!(p_win(&m, &p).unwrap(), 0.5);
        assert!((pref_loss(&m, &p).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn logistic_closed_form() {
        // s_w = 1, s_l = 0 with tau = 1
        let e = |v: Vec<f64>| EmbeddingVector::normalized(v).unwrap();
        let p = PreferencePair {
            e_win: e(vec![1.0, 0.0]),
            e_lose: e(vec![0.0, 1.0]),
            e_text: e(vec![1.0, 0.0]),
            meta: PairMeta::default(),
        };
        let m = TipsModel::without_projection(2, 1.0);
        let expect = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((p_win(&m, &p).unwrap() - expect).abs() < 1e-15);
        assert!((p_win(&m, &p.swapped()).unwrap() - (1.0 - expect)).abs() < 1e-15);
    }

    #[test]
    fn extreme_gap_loss_is_finite() {
        let e = |v: Vec<f64>| EmbeddingVector::normalized(v).unwrap();
        let p = PreferencePair {
            e_win: e(vec![1.0, 0.0]),
            e_lose: e(vec![-1.0, 0.0]),
            e_text: e(vec![1.0, 0.0]),
            meta: PairMeta::default(),
        };
        let m = TipsModel::without_projection(2, 1e4);
        assert!(pref_loss(&m, &p).unwrap() < 1e-300);
        let l = pref_loss(&m, &p.swapped()).unwrap();
        assert!((l - 2e4).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 5;
        for _ in 0..20 {
            let mut m = TipsModel::init(d);
            m.tau = rng.random_range(0.5..20.0);
            for v in m.projection.as_mut().unwrap() {
                *v += rng.random_range(-0.3..0.3);
            }
            let p = pair(&mut rng, d);
            let (_, g) = pref_loss_grad(&m, &p).unwrap();
            let h = 1e-6;
            let fd = |mm: &TipsModel, mp: &TipsModel| {
                (pref_loss(mp, &p).unwrap() - pref_loss(mm, &p).unwrap()) / (2.0 * h)
            };
            let (mut lo, mut hi) = (m.clone(), m.clone());
            lo.tau -= h;
            hi.tau += h;
            let num = fd(&lo, &hi);
            assert!((num - g.tau).abs() <= 1e-4 * num.abs().max(g.tau.abs()).max(1e-8));
            for i in 0..d * d {
                let (mut lo, mut hi) = (m.clone(), m.clone());
                lo.projection.as_mut().unwrap()[i] -= h;
                hi.projection.as_mut().unwrap()[i] += h;
                let num = fd(&lo, &hi);
                let ana = g.projection.as_ref().unwrap()[i];
                assert!(
                    (num - ana).abs() <= 1e-4 * num.abs().max(ana.abs()).max(1e-6),
                    "entry {i}: {num} vs {ana}"
                );
            }
        }
    }

    #[test]
    fn score_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = TipsModel::init(6);
        let e = unit(&mut rng, 6);
        assert!((tips_score(&m, &e, &e).unwrap() - 1.0).abs() < 1e-12);
        let x = EmbeddingVector::normalized(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let y = EmbeddingVector::normalized(vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(tips_score(&m, &x, &y).unwrap(), 0.0);
        let t = unit(&mut rng, 6);
        assert!((tips_score(&m, &e, &t).unwrap() - e.dot(&t)).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_keep_the_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs: Vec<_> = (0..4).map(|_| pair(&mut rng, 4)).collect();
        let init = TipsModel::init(4);
        let out = train(&init, &pairs, &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(out.model, init);
        assert!(out.history.is_empty());
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pairs: Vec<_> = (0..4).map(|_| pair(&mut rng, 4)).collect();
        let cfg = TrainConfig {
            lr: f64::MAX,
            epochs: 3,
            holdout_fraction: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            train(&TipsModel::init(4), &pairs, &cfg),
            Err(Error::TrainingDiverged { epoch: 0, .. })
        ));
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = TipsModel::init(3);
        m.save(&path).unwrap();
        assert_eq!(TipsModel::load(&path).unwrap(), m);
        let mut bad = m.clone();
        bad.projection = Some(vec![0.0; 9]);
        assert!(bad.check().is_err());
    }
}
