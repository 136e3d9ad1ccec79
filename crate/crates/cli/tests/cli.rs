use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use layerforge::attention::{write_grids, Grid};
use layerforge::curation::LayoutRecord;
use layerforge::fixtures::{planted_pairs, sample_with_layers};
use layerforge::layer::{read_manifest, write_manifest, SampleStore, Stage};
use layerforge::review::{ReviewDecision, Verdict};
use layerforge::tips::{write_pairs, TipsModel};
use serde_json::Value;

fn layerforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layerforge"))
        .args(args)
        .env_remove("LAYERFORGE_GENERATE_URL")
        .env_remove("LAYERFORGE_MATTE_URL")
        .env_remove("LAYERFORGE_EMBED_URL")
        .env_remove("LAYERFORGE_RECAPTION_URL")
        .output()
        .expect("spawn layerforge")
}

fn ok(args: &[&str]) -> String {
    let o = layerforge(args);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(layerforge(&[]).status.code(), Some(2));
    assert_eq!(layerforge(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(layerforge(&["stats"]).status.code(), Some(2));
    assert_eq!(layerforge(&["metrics", "--binarize", "fixed:7", "--reference"]).status.code(), Some(2));
    assert_eq!(layerforge(&["--help"]).status.code(), Some(0));
    assert_eq!(layerforge(&["--version"]).status.code(), Some(0));
    let o = layerforge(&["stats", "--manifest", "/nonexistent/manifest.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn stats_of_two_six_ten() {
    let dir = tempfile::tempdir().unwrap();
    let store = SampleStore::open(dir.path()).unwrap();
    let entries: Vec<_> = [2, 6, 10]
        .iter()
        .map(|&n| store.write(&sample_with_layers(n, 1)).unwrap())
        .collect();
    let manifest = dir.path().join("manifest.jsonl");
    write_manifest(&manifest, &entries).unwrap();

    let v: Value = serde_json::from_str(&ok(&["stats", "--manifest", s(&manifest), "--json"])).unwrap();
    assert_eq!(v["sample_count"], 3);
    assert_eq!(v["mean_layers"].as_f64().unwrap(), 6.0);
    assert_eq!(v["median_layers"], 6);
    assert!((v["pct_in_range_3_14"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);

    let table = ok(&["stats", "--manifest", s(&manifest)]);
    assert!(table.contains("median_layers\t6"), "{table}");
}

#[test]
fn synth_multilayer_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let fx = sample_with_layers(4, 3);
    let rec = LayoutRecord {
        id: "poster-1".into(),
        layout: fx.layout.clone(),
    };
    let layout = dir.path().join("layout.json");
    fs::write(&layout, serde_json::to_vec(&rec).unwrap()).unwrap();
    let bare = dir.path().join("bare.json");
    fs::write(&bare, serde_json::to_vec(&fx.layout).unwrap()).unwrap();

    let mut lines = Vec::new();
    for out in ["a", "b"] {
        let root = dir.path().join(out);
        lines.push(ok(&[
            "synth-multilayer", "--layout", s(&layout), "--out", s(&root),
            "--seed", "11", "--long-side", "128", "--mock",
        ]));
    }
    assert_eq!(lines[0], lines[1]);
    let entry: Value = serde_json::from_str(&lines[0]).unwrap();
    assert_eq!(entry["id"], "poster-1");
    assert_eq!(entry["layer_count"], 4);
    for f in ["meta.json", "merged.png", "layer_00.png", "layer_03.png"] {
        let a = fs::read(dir.path().join("a/samples/poster-1").join(f)).unwrap();
        let b = fs::read(dir.path().join("b/samples/poster-1").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }

    // a bare layout takes its id from the file name
    let line = ok(&["synth-multilayer", "--layout", s(&bare), "--out", s(&dir.path().join("c")), "--mock"]);
    assert!(line.contains("\"id\":\"bare\""), "{line}");
}

#[test]
fn synth_layer_writes_requested_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cat.png");
    ok(&[
        "synth-layer", "--caption", "a small cat", "--width", "40", "--height", "24",
        "--out", s(&out), "--long-side", "128", "--template", "B", "--mock",
    ]);
    let img = layerforge::layer::store::read_png(&out).unwrap();
    assert_eq!(img.dims(), (40, 24));
}

#[test]
fn tips_train_zero_epochs_keeps_init() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.jsonl");
    write_pairs(&pairs, &planted_pairs(40, 8, 2)).unwrap();
    let init = dir.path().join("init.json");
    let mut m = TipsModel::init(8);
    m.tau = 3.5;
    m.save(&init).unwrap();
    let out = dir.path().join("out.json");
    ok(&["tips-train", "--pairs", s(&pairs), "--init", s(&init), "--out", s(&out), "--epochs", "0"]);
    let got = TipsModel::load(&out).unwrap();
    assert_eq!(got.tau, m.tau);
    assert_eq!(got.projection, m.projection);

    let trained = dir.path().join("trained.json");
    let log = ok(&["tips-train", "--pairs", s(&pairs), "--out", s(&trained), "--epochs", "5", "--seed", "1"]);
    assert_eq!(log.lines().count(), 6, "{log}");
    assert_ne!(TipsModel::load(&trained).unwrap().projection, m.projection);
}

#[test]
fn metrics_over_record_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let mask: Vec<f64> = (0..16).map(|i| if i % 4 < 2 { 1.0 } else { 0.0 }).collect();
    for (label, attn) in [
        ("perfect", mask.iter().map(|m| 1.0 - m).collect::<Vec<_>>()),
        ("flat", vec![0.5; 16]),
    ] {
        let d = dir.path().join(label);
        fs::create_dir_all(&d).unwrap();
        write_grids(&d.join("attention.grid"), &[Grid::new(4, 4, attn).unwrap()]).unwrap();
        write_grids(&d.join("mask.grid"), &[Grid::new(4, 4, mask.clone()).unwrap()]).unwrap();
    }
    let tsv = ok(&["metrics", "--records", s(dir.path()), "--binarize", "fixed:0.5"]);
    let rows: Vec<&str> = tsv.lines().collect();
    assert_eq!(rows.len(), 3, "{tsv}");
    assert!(rows[1].starts_with("perfect\t"), "{tsv}");

    let reference = ok(&["metrics", "--reference"]);
    assert_eq!(reference, layerforge::attention::REFERENCE_TABLE_TSV);
    assert_eq!(layerforge(&["metrics", "--records", s(&dir.path().join("missing"))]).status.code(), Some(1));
}

#[test]
fn curate_review_apply_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("work");
    let stopped = ok(&["curate", "--work", s(&work), "--mock", "--mock-layouts", "8", "--stop-after", "D"]);
    assert!(stopped.contains("stopped early"), "{stopped}");
    let table = ok(&["curate", "--work", s(&work), "--mock", "--mock-layouts", "8"]);
    assert!(table.contains("resumed\t"), "{table}");
    let manifest = work.join("manifest.jsonl");
    let staged = read_manifest(&manifest).unwrap();
    assert!(!staged.is_empty());
    assert!(staged.iter().all(|e| e.stage == Stage::E));

    // a different seed against the same checkpoints is refused
    let o = layerforge(&["curate", "--work", s(&work), "--mock", "--mock-layouts", "8", "--seed", "8"]);
    assert_eq!(o.status.code(), Some(1));

    let journal = dir.path().join("journal.jsonl");
    let lines: String = staged
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let d = ReviewDecision {
                sample_id: e.id.clone(),
                verdict: if i % 2 == 0 { Verdict::Accept } else { Verdict::Reject },
                reviewer: "r1".into(),
                timestamp: format!("2026-03-01T00:00:{:02}Z", i % 60),
                note: None,
            };
            serde_json::to_string(&d).unwrap() + "\n"
        })
        .collect();
    fs::write(&journal, lines).unwrap();
    let accepted_out = dir.path().join("accepted.jsonl");
    let summary = ok(&[
        "review-apply", "--manifest", s(&manifest), "--journal", s(&journal), "--out", s(&accepted_out),
    ]);
    let accepted = read_manifest(&accepted_out).unwrap();
    let o = layerforge(&["stats", "--manifest", s(&accepted_out)]);
    assert_eq!(o.status.code(), Some(1), "store root defaults to the manifest's directory");
    assert_eq!(accepted.len(), staged.len().div_ceil(2));
    assert!(accepted.iter().all(|e| e.stage == Stage::F));
    assert!(summary.contains(&format!("accepted\t{}", accepted.len())), "{summary}");

    let stats: Value = serde_json::from_str(&ok(&["stats", "--manifest", s(&accepted_out), "--root", s(&work), "--json"])).unwrap();
    assert_eq!(stats["sample_count"].as_u64().unwrap() as usize, accepted.len());

    let fid = dir.path().join("fid");
    ok(&["export-fid", "--manifest", s(&accepted_out), "--root", s(&work), "--out", s(&fid)]);
    assert_eq!(fs::read_dir(&fid).unwrap().count(), accepted.len());

    let scores = ok(&["tips-score", "--manifest", s(&accepted_out), "--root", s(&work), "--mock"]);
    let layers: usize = accepted.iter().map(|e| e.layer_count).sum();
    assert_eq!(scores.lines().count(), layers + 1);
}
