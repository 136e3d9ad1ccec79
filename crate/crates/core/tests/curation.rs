use std::fs;

use layerforge::backends::{Backends, MockEmbedder};
use layerforge::curation::*;
use layerforge::fixtures::{artifact_benchmark, sample_with_layers};
use layerforge::layer::store::manifest_bytes;
use layerforge::layer::{read_manifest, MultiLayerSample, SampleStore, Stage};
use layerforge::layerflux::{synth_multilayer, LayerSynthConfig};
use layerforge::prompting::PromptRegistry;
use layerforge::review::{ReviewDecision, Verdict};
use layerforge::Error;

fn run(cfg: &PipelineConfig, dir: &std::path::Path, opts: RunOptions) -> PipelineRun {
    run_pipeline(cfg, &Backends::mock(cfg.seed), dir, opts).unwrap()
}

#[test]
fn fifty_layouts_deterministic_and_monotone() {
    let cfg = PipelineConfig::desk();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run(&cfg, a.path(), RunOptions::default());
    let rb = run(&cfg, b.path(), RunOptions::default());
    assert!(ra.completed && ra.resumed.is_empty());
    let bytes_a = fs::read(a.path().join("manifest.jsonl")).unwrap();
    let bytes_b = fs::read(b.path().join("manifest.jsonl")).unwrap();
    assert_eq!(bytes_a, bytes_b);
    assert_eq!(ra.report, rb.report);
    assert!(!ra.manifest.is_empty());

    let counts: Vec<usize> = ra.report.counts().iter().map(|c| c.1).collect();
    assert_eq!(counts[0], 50);
    assert!(counts[1] <= counts[0] && counts[2] <= counts[1] && counts[3] <= counts[2], "{counts:?}");
    assert!(counts[3] < counts[1], "rank-select should remove samples: {counts:?}");
    let style = ra.report.style.as_ref().unwrap();
    assert_eq!(style.assignments, 10);
    for e in &ra.manifest {
        assert_eq!(e.stage, Stage::E);
        assert!(e.scores.contains_key("tips.0"));
    }
}

#[test]
fn resume_after_stop_at_d_matches_uninterrupted() {
    let cfg = PipelineConfig {
        mock_layouts: 20,
        ..PipelineConfig::desk()
    };
    let full = tempfile::tempdir().unwrap();
    let reference = run(&cfg, full.path(), RunOptions::default());

    let dir = tempfile::tempdir().unwrap();
    let partial = run(
        &cfg,
        dir.path(),
        RunOptions {
            stop_after: Some(Stage::D),
            fresh: false,
        },
    );
    assert!(!partial.completed);
    assert!(!dir.path().join("manifest.jsonl").exists());
    assert!(dir.path().join("checkpoints/stage_D.jsonl").exists());
    assert!(!dir.path().join("checkpoints/stage_E.jsonl").exists());

    let resumed = run(&cfg, dir.path(), RunOptions::default());
    assert_eq!(resumed.resumed, ["C", "D"]);
    assert_eq!(
        fs::read(dir.path().join("manifest.jsonl")).unwrap(),
        fs::read(full.path().join("manifest.jsonl")).unwrap()
    );
    assert_eq!(resumed.report, reference.report);

    // a torn step (report written, manifest missing) is recomputed
    fs::remove_file(dir.path().join("checkpoints/stage_E.jsonl")).unwrap();
    let again = run(&cfg, dir.path(), RunOptions::default());
    assert_eq!(again.resumed, ["C", "D", "staged"]);
    assert_eq!(again.manifest, reference.manifest);
}

#[test]
fn changed_config_refuses_stale_checkpoints() {
    let cfg = PipelineConfig {
        mock_layouts: 4,
        n_per_style: 1,
        ..PipelineConfig::desk()
    };
    let dir = tempfile::tempdir().unwrap();
    run(&cfg, dir.path(), RunOptions::default());
    let other = PipelineConfig { seed: 8, ..cfg };
    match run_pipeline(&other, &Backends::mock(8), dir.path(), RunOptions::default()) {
        Err(Error::Checkpoint(_)) => {}
        r => panic!("{r:?}"),
    }
    let fresh = run(
        &other,
        dir.path(),
        RunOptions {
            stop_after: None,
            fresh: true,
        },
    );
    assert!(fresh.completed && fresh.resumed.is_empty());
}

#[test]
fn gate_and_toggles_only_remove() {
    let base = PipelineConfig {
        mock_layouts: 16,
        ..PipelineConfig::desk()
    };
    let gated = PipelineConfig {
        tips_threshold: 0.0,
        ..base.clone()
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let open = run(&base, d1.path(), RunOptions::default());
    let shut = run(&gated, d2.path(), RunOptions::default());
    let (so, ss) = (open.report.style.unwrap(), shut.report.style.unwrap());
    assert_eq!(so.regenerated, ss.regenerated);
    assert!(so.tips_rejected.is_empty());
    assert!(!ss.tips_rejected.is_empty());
    assert_eq!(ss.staged + ss.tips_rejected.len() + ss.artifact_flagged.len(), ss.regenerated);

    let off = PipelineConfig {
        stages: StageToggles {
            artifact_filter: false,
            rank_select: false,
            style_regen: false,
        },
        ..base
    };
    let d3 = tempfile::tempdir().unwrap();
    let r = run(&off, d3.path(), RunOptions::default());
    let counts: Vec<usize> = r.report.counts().iter().map(|c| c.1).collect();
    assert_eq!(counts[1], counts[2]);
    assert_eq!(counts[2], counts[3]);
    assert_eq!(counts[3], counts[4]);
}

#[test]
fn external_aesthetic_scores_drive_rank_select() {
    let dir = tempfile::tempdir().unwrap();
    let scores_path = dir.path().join("aesthetic.json");
    let layouts = mock_layouts(6, 1);
    // every layout gets a score; a missing one must abort
    let map: serde_json::Map<String, serde_json::Value> = layouts
        .iter()
        .enumerate()
        .map(|(i, l)| (l.id.clone(), serde_json::json!(i as f64)))
        .collect();
    fs::write(&scores_path, serde_json::to_vec(&map).unwrap()).unwrap();
    let cfg = PipelineConfig {
        mock_layouts: 6,
        seed: 1,
        aesthetic_scores: Some(scores_path.clone()),
        stages: StageToggles {
            artifact_filter: false,
            ..Default::default()
        },
        rank_proportion: 1.0,
        n_per_style: 1,
        ..PipelineConfig::desk()
    };
    let work = dir.path().join("work");
    let r = run(&cfg, &work, RunOptions { stop_after: Some(Stage::E), fresh: false });
    assert!(!r.completed);
    let e = read_manifest(&work.join("checkpoints/stage_E.jsonl")).unwrap();
    for entry in &e {
        assert_eq!(entry.scores["aesthetic"], map[&entry.id].as_f64().unwrap());
    }

    let mut partial = map.clone();
    partial.remove(&layouts[0].id);
    fs::write(&scores_path, serde_json::to_vec(&partial).unwrap()).unwrap();
    let work2 = dir.path().join("work2");
    match run_pipeline(&cfg, &Backends::mock(1), &work2, RunOptions::default()) {
        Err(Error::MissingScore(id)) => assert_eq!(id, layouts[0].id),
        r => panic!("{r:?}"),
    }
}

#[test]
fn five_layouts_two_styles_give_ten_stage_c_samples() {
    let prompts = PromptRegistry::default();
    let backends = Backends::mock(2);
    let cfg = RegenConfig {
        synth: LayerSynthConfig {
            long_side: 128,
            ..Default::default()
        },
        recaption_canvas: 96,
    };
    let sources: Vec<MultiLayerSample> = mock_layouts(5, 2)
        .iter()
        .map(|r| synth_multilayer(&r.id, &r.layout, &cfg.synth, &prompts, &backends, 1).unwrap())
        .collect();
    let styles = ["ink".to_string(), "toy".to_string()];
    let mut out = Vec::new();
    for style in &styles {
        for s in &sources {
            let id = format!("{}.{style}", s.id);
            out.push(regenerate_with_style(s, style, &id, &cfg, &prompts, &backends, 3).unwrap());
        }
    }
    assert_eq!(out.len(), 10);
    for (i, s) in out.iter().enumerate() {
        let src = &sources[i % 5];
        assert_eq!(s.state, Stage::C);
        assert!(same_geometry(src, s));
        let style = s.style.as_deref().unwrap();
        let prefix = format!("This is a {style} style image.");
        assert!(s.layers.iter().all(|l| l.caption.starts_with(&prefix)));
    }
}

/// Straight-alpha over in f64, bottom to top, premultiplied result.
fn oracle_pixel(s: &MultiLayerSample, x: u32, y: u32) -> [f64; 4] {
    let mut order: Vec<usize> = (0..s.layers.len()).collect();
    order.sort_by_key(|&i| s.layout.slots[i].z);
    let (mut c, mut a) = ([0.0f64; 3], 0.0f64);
    for i in order {
        let b = s.layout.slots[i].bbox;
        let (lx, ly) = (x as i64 - b.x as i64, y as i64 - b.y as i64);
        if lx < 0 || ly < 0 || lx >= b.w as i64 || ly >= b.h as i64 {
            continue;
        }
        let p = s.layers[i].image.pixel(lx as u32, ly as u32);
        let at = p[3] as f64 / 255.0;
        for k in 0..3 {
            c[k] = p[k] as f64 / 255.0 * at + c[k] * (1.0 - at);
        }
        a = at + a * (1.0 - at);
    }
    [c[0] * 255.0, c[1] * 255.0, c[2] * 255.0, a * 255.0]
}

#[test]
fn review_decisions_accept_reject_and_drop_layer() {
    let dir = tempfile::tempdir().unwrap();
    let store = SampleStore::open(dir.path()).unwrap();
    let samples: Vec<_> = (0..3).map(|i| sample_with_layers(4, 40 + i)).collect();
    let mut manifest: Vec<_> = samples.iter().map(|s| store.write(s).unwrap()).collect();
    for e in &mut manifest {
        e.stage = Stage::E;
        for i in 0..4 {
            e.scores.insert(format!("tips.{i}"), i as f64 / 10.0);
        }
    }
    let d = |id: &str, v: Verdict| ReviewDecision {
        sample_id: id.into(),
        verdict: v,
        reviewer: "alice".into(),
        timestamp: "2026-03-01T10:00:00Z".into(),
        note: None,
    };
    let decisions = vec![
        d(&samples[0].id, Verdict::Accept),
        d(&samples[1].id, Verdict::Reject),
        d(&samples[2].id, Verdict::AcceptWithLayerRejects { layers: vec![2] }),
    ];
    let out = apply_review_decisions(&manifest, &decisions, &store, LayerRejectPolicy::DropLayer).unwrap();
    assert_eq!(out.manifest.len(), 2);
    assert_eq!(out.manifest[0].id, samples[0].id);
    assert_eq!(out.manifest[0].stage, Stage::F);
    assert!(out.manifest.iter().all(|e| e.id != samples[1].id));
    assert_eq!(out.tombstoned, [samples[1].id.clone(), samples[2].id.clone()]);

    let rebuilt_entry = &out.manifest[1];
    assert_eq!(rebuilt_entry.id, rebuilt_id(&samples[2].id, &[2]));
    assert_eq!(rebuilt_entry.stage, Stage::F);
    assert_eq!(rebuilt_entry.layer_count, 3);
    assert_eq!(rebuilt_entry.scores["tips.2"], 0.3);
    assert!(!rebuilt_entry.scores.contains_key("tips.3"));
    let rebuilt = store.read(&rebuilt_entry.path).unwrap();
    assert_eq!(rebuilt.layers.len(), 3);
    assert_eq!(rebuilt.layers[2], samples[2].layers[3]);
    let (w, h) = rebuilt.merged.dims();
    for y in 0..h {
        for x in 0..w {
            let want = oracle_pixel(&rebuilt, x, y);
            let got = rebuilt.merged.pixel(x, y);
            let ga = got[3] as f64;
            for k in 0..3 {
                let premul = got[k] as f64 * ga / 255.0;
                assert!((premul - want[k]).abs() <= 1.0, "({x},{y}) {got:?} vs {want:?}");
            }
            assert!((ga - want[3]).abs() <= 0.5 + 1e-9, "({x},{y}) alpha {got:?} vs {want:?}");
        }
    }
    // source sample untouched in the store
    assert_eq!(store.read(&manifest[2].path).unwrap(), samples[2]);

    let drop_all = apply_review_decisions(&manifest, &decisions[2..], &store, LayerRejectPolicy::DropSample).unwrap();
    assert_eq!(drop_all.manifest.len(), 2);
    assert_eq!(drop_all.tombstoned, [samples[2].id.clone()]);

    let ghost = vec![d("ghost", Verdict::Accept), d("phantom", Verdict::Reject)];
    match apply_review_decisions(&manifest, &ghost, &store, LayerRejectPolicy::DropLayer) {
        Err(Error::UnknownSamples(ids)) => assert_eq!(ids, ["ghost", "phantom"]),
        r => panic!("{r:?}"),
    }
    let bad_layer = vec![d(&samples[0].id, Verdict::AcceptWithLayerRejects { layers: vec![4] })];
    assert!(apply_review_decisions(&manifest, &bad_layer, &store, LayerRejectPolicy::DropLayer).is_err());
}

#[test]
fn export_writes_flattened_merges() {
    let dir = tempfile::tempdir().unwrap();
    let store = SampleStore::open(dir.path()).unwrap();
    let s = sample_with_layers(3, 5);
    let entry = store.write(&s).unwrap();
    let out = dir.path().join("fid");
    let paths = export_merged(&[entry], &store, &out).unwrap();
    assert_eq!(paths.len(), 1);
    let back = layerforge::layer::store::read_png(&paths[0]).unwrap();
    assert_eq!(back.dims(), s.merged.dims());
    assert_eq!(back.pixel(0, 0)[3], 255);
    assert_eq!(manifest_bytes(&[]).unwrap(), Vec::<u8>::new());
}

#[test]
fn artifact_benchmark_recall_and_precision() {
    let cases = artifact_benchmark(400, 100, 11);
    let embedder = MockEmbedder::hashed(11, 64);
    let th = ArtifactThresholds::default();
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for c in &cases {
        let flagged = artifact_report(&c.sample, &embedder, None, &th).unwrap().is_flagged(&th);
        match (flagged, c.planted) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let recall = tp as f64 / (tp + fneg) as f64;
    let precision = tp as f64 / (tp + fp).max(1) as f64;
    assert!(recall >= 0.9, "recall {recall}");
    assert!(precision >= 0.8, "precision {precision}");
}
