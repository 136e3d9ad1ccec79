use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::store::SampleMeta;
use super::{LayerKind, MultiLayerSample};
use crate::error::{Error, Result};

/// Layer-count and text/style statistics over a set of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub sample_count: usize,
    pub layer_count_histogram: BTreeMap<usize, usize>,
    pub mean_layers: f64,
    /// Lower median for even sample counts.
    pub median_layers: usize,
    pub pct_in_range_3_14: f64,
    pub text_layers_per_image: BTreeMap<usize, usize>,
    pub chars_per_text_instance: BTreeMap<usize, usize>,
    /// Keyed by decile of text area over canvas area (0 = [0, 0.1), ..., 9 = [0.9, 1]).
    pub text_area_ratio: BTreeMap<usize, usize>,
    pub style_distribution: BTreeMap<String, usize>,
}

struct LayerFacts<'a> {
    kind: LayerKind,
    caption: &'a str,
    style: Option<&'a str>,
    area: u64,
}

/// Mergeable partial statistics; merge is associative and commutative.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StatsAccumulator {
    layer_counts: BTreeMap<usize, usize>,
    text_layers: BTreeMap<usize, usize>,
    chars: BTreeMap<usize, usize>,
    text_area: BTreeMap<usize, usize>,
    styles: BTreeMap<String, usize>,
}

impl StatsAccumulator {
    pub fn add(&mut self, sample: &MultiLayerSample) {
        let layers = sample.layers.iter().enumerate().map(|(i, l)| LayerFacts {
            kind: l.kind,
            caption: &l.caption,
            style: l.style.as_deref(),
            area: sample.layout.slots.get(i).map_or(0, |s| s.bbox.area()),
        });
        self.add_facts(sample.layout.canvas.area(), sample.style.as_deref(), layers);
    }

    /// Same as [`add`](Self::add) from stored metadata, without decoding images.
    pub fn add_meta(&mut self, meta: &SampleMeta) {
        let layers = meta.layers.iter().enumerate().map(|(i, l)| LayerFacts {
            kind: l.kind,
            caption: &l.caption,
            style: l.style.as_deref(),
            area: meta.slots.get(i).map_or(0, |s| s.bbox.area()),
        });
        self.add_facts(meta.canvas.area(), meta.style.as_deref(), layers);
    }

    fn add_facts<'a>(
        &mut self,
        canvas_area: u64,
        sample_style: Option<&str>,
        layers: impl Iterator<Item = LayerFacts<'a>>,
    ) {
        let canvas_area = canvas_area.max(1) as f64;
        let mut count = 0;
        let mut text_layers = 0;
        let mut text_area = 0u64;
        for layer in layers {
            count += 1;
            if let Some(style) = layer.style.or(sample_style) {
                *self.styles.entry(style.to_string()).or_default() += 1;
            }
            if layer.kind != LayerKind::Text {
                continue;
            }
            text_layers += 1;
            *self.chars.entry(text_char_count(layer.caption)).or_default() += 1;
            text_area += layer.area;
        }
        *self.layer_counts.entry(count).or_default() += 1;
        *self.text_layers.entry(text_layers).or_default() += 1;
        let ratio = (text_area as f64 / canvas_area).min(1.0);
        let decile = ((ratio * 10.0).floor() as usize).min(9);
        *self.text_area.entry(decile).or_default() += 1;
    }

    pub fn merge(mut self, other: StatsAccumulator) -> StatsAccumulator {
        fn fold<K: Ord>(into: &mut BTreeMap<K, usize>, from: BTreeMap<K, usize>) {
            for (k, v) in from {
                *into.entry(k).or_default() += v;
            }
        }
        fold(&mut self.layer_counts, other.layer_counts);
        fold(&mut self.text_layers, other.text_layers);
        fold(&mut self.chars, other.chars);
        fold(&mut self.text_area, other.text_area);
        fold(&mut self.styles, other.styles);
        self
    }

    pub fn finish(self) -> Result<DatasetStats> {
        let n: usize = self.layer_counts.values().sum();
        if n == 0 {
            return Err(Error::EmptyInput("manifest has no samples"));
        }
        let total: usize = self.layer_counts.iter().map(|(k, v)| k * v).sum();
        let in_range: usize = self.layer_counts.range(3..=14).map(|(_, v)| v).sum();
        // lower median: element at rank (n - 1) / 2
        let target = (n - 1) / 2;
        let mut seen = 0;
        let mut median = 0;
        for (&k, &v) in &self.layer_counts {
            seen += v;
            if seen > target {
                median = k;
                break;
            }
        }
        Ok(DatasetStats {
            sample_count: n,
            mean_layers: total as f64 / n as f64,
            median_layers: median,
            pct_in_range_3_14: in_range as f64 / n as f64,
            layer_count_histogram: self.layer_counts,
            text_layers_per_image: self.text_layers,
            chars_per_text_instance: self.chars,
            text_area_ratio: self.text_area,
            style_distribution: self.styles,
        })
    }
}

/// Characters of the rendered text. Captions of the form `Text: "..."` count
/// only the transcription.
fn text_char_count(caption: &str) -> usize {
    let body = caption.trim();
    let body = body.strip_prefix("Text:").map(str::trim).unwrap_or(body);
    let body = body
        .strip_prefix('"')
        .and_then(|b| b.split('"').next())
        .unwrap_or(body);
    body.chars().count()
}

pub fn compute_dataset_stats<'a>(
    samples: impl IntoIterator<Item = &'a MultiLayerSample>,
) -> Result<DatasetStats> {
    let mut acc = StatsAccumulator::default();
    for s in samples {
        acc.add(s);
    }
    acc.finish()
}

impl DatasetStats {
    /// Human-readable table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("samples\t{}\n", self.sample_count));
        out.push_str(&format!("mean_layers\t{:.3}\n", self.mean_layers));
        out.push_str(&format!("median_layers\t{}\n", self.median_layers));
        out.push_str(&format!("pct_in_range_3_14\t{:.4}\n", self.pct_in_range_3_14));
        out.push_str("layer_count\tsamples\n");
        for (k, v) in &self.layer_count_histogram {
            out.push_str(&format!("{k}\t{v}\n"));
        }
        out.push_str("text_layers\tsamples\n");
        for (k, v) in &self.text_layers_per_image {
            out.push_str(&format!("{k}\t{v}\n"));
        }
        if !self.style_distribution.is_empty() {
            out.push_str("style\tlayers\n");
            for (k, v) in &self.style_distribution {
                out.push_str(&format!("{k}\t{v}\n"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::sample_with_layers;

    #[test]
    fn single_sample() {
        let s = sample_with_layers(6, 1);
        let stats = compute_dataset_stats([&s]).unwrap();
        assert_eq!(stats.mean_layers, 6.0);
        assert_eq!(stats.median_layers, 6);
        assert_eq!(stats.pct_in_range_3_14, 1.0);
    }

    #[test]
    fn two_six_ten() {
        let samples: Vec<_> = [2, 6, 10]
            .iter()
            .map(|&n| sample_with_layers(n, n as u64))
            .collect();
        let stats = compute_dataset_stats(&samples).unwrap();
        assert_eq!(stats.mean_layers, 6.0);
        assert_eq!(stats.median_layers, 6);
        assert!((stats.pct_in_range_3_14 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(stats.layer_count_histogram.values().sum::<usize>(), 3);
        assert_eq!(stats.text_area_ratio.values().sum::<usize>(), 3);
    }

    #[test]
    fn lower_median_for_even_counts() {
        let samples: Vec<_> = [2, 4, 6, 8]
            .iter()
            .map(|&n| sample_with_layers(n, 0))
            .collect();
        assert_eq!(compute_dataset_stats(&samples).unwrap().median_layers, 4);
    }

    #[test]
    fn empty_manifest_is_an_error() {
        let none: Vec<MultiLayerSample> = vec![];
        assert!(matches!(
            compute_dataset_stats(&none),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn text_chars() {
        assert_eq!(text_char_count("Text: \"SALE\" bold red"), 4);
        assert_eq!(text_char_count("hello"), 5);
    }

    #[test]
    fn merge_matches_sequential() {
        let samples: Vec<_> = (1..9).map(|n| sample_with_layers(n, n as u64)).collect();
        let seq = compute_dataset_stats(&samples).unwrap();
        let mut a = StatsAccumulator::default();
        let mut b = StatsAccumulator::default();
        for (i, s) in samples.iter().enumerate() {
            if i % 3 == 0 {
                a.add(s)
            } else {
                b.add(s)
            }
        }
        assert_eq!(b.clone().merge(a.clone()).finish().unwrap(), seq);
        assert_eq!(a.merge(b).finish().unwrap(), seq);
    }

    #[test]
    fn metadata_path_matches_full_samples() {
        let dir = tempfile::tempdir().unwrap();
        let store = crate::layer::SampleStore::open(dir.path()).unwrap();
        let samples: Vec<_> = (1..7).map(|n| sample_with_layers(n, 3 * n as u64)).collect();
        let mut acc = StatsAccumulator::default();
        for s in &samples {
            let e = store.write(s).unwrap();
            acc.add_meta(&store.read_meta(&e.path).unwrap());
        }
        assert_eq!(acc.finish().unwrap(), compute_dataset_stats(&samples).unwrap());
    }
}
