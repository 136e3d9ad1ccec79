//! `layerforge` command-line entry points and the review service.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use layerforge::attention::{self, AttentionRecord, Binarize, Mask};
use layerforge::backends::{Backends, BackendsConfig};
use layerforge::curation::{
    apply_review_decisions, export_merged, run_pipeline, tips_gate_with, LayerRejectPolicy,
    LayoutRecord, PipelineConfig, RunOptions,
};
use layerforge::layer::store::{encode_png, write_atomic};
use layerforge::layer::{
    read_manifest, write_manifest, BBox, LayerKind, LayerSlot, SampleStore, SemanticLayout, Stage,
    StatsAccumulator,
};
use layerforge::layerflux::{synth_layer_with_retries, synth_multilayer, LayerSynthConfig};
use layerforge::prompting::{PromptRegistry, SuffixTemplateId};
use layerforge::review::read_journal;
use layerforge::tips::{self, TipsModel, TrainConfig};
use layerforge::{Error, Result};

pub mod service;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "layerforge", version, about = "Synthesize, curate and review multi-layer transparent images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct BackendArgs {
    /// Serve every model role from the deterministic mocks.
    #[arg(long)]
    pub mock: bool,
    /// Backend endpoints (JSON); LAYERFORGE_<ROLE>_URL variables override it.
    #[arg(long, value_name = "FILE", conflicts_with = "mock")]
    pub backends: Option<PathBuf>,
}

impl BackendArgs {
    fn config(&self, seed: u64) -> Result<BackendsConfig> {
        let mut cfg = match &self.backends {
            Some(p) => {
                let raw = fs::read(p).map_err(|e| io_err(p, e))?;
                serde_json::from_slice(&raw).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => BackendsConfig::default(),
        };
        if !self.mock {
            cfg = cfg.with_env_overrides();
        }
        cfg.seed = seed;
        Ok(cfg)
    }

    fn build(&self, seed: u64) -> Result<Backends> {
        Backends::from_config(&self.config(seed)?)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Object,
    Text,
    Background,
    Decoration,
}

impl From<KindArg> for LayerKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Object => LayerKind::Object,
            KindArg::Text => LayerKind::Text,
            KindArg::Background => LayerKind::Background,
            KindArg::Decoration => LayerKind::Decoration,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    DropLayer,
    DropSample,
}

impl From<PolicyArg> for LayerRejectPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::DropLayer => LayerRejectPolicy::DropLayer,
            PolicyArg::DropSample => LayerRejectPolicy::DropSample,
        }
    }
}

#[derive(Debug, Args, Clone)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1024)]
    pub long_side: u32,
    #[arg(long, default_value = "H")]
    pub template: SuffixTemplateId,
    #[arg(long, default_value = "gray")]
    pub color: String,
    /// Prompt registry overrides (JSON).
    #[arg(long, value_name = "FILE")]
    pub prompts: Option<PathBuf>,
}

impl SynthArgs {
    fn config(&self) -> LayerSynthConfig {
        LayerSynthConfig {
            suffix_template: self.template,
            color: self.color.clone(),
            long_side: self.long_side,
            ..Default::default()
        }
    }

    fn registry(&self) -> Result<PromptRegistry> {
        match &self.prompts {
            Some(p) => PromptRegistry::load(p),
            None => Ok(PromptRegistry::default()),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate one transparent layer from a caption.
    SynthLayer {
        #[arg(long)]
        caption: String,
        #[arg(long)]
        width: u32,
        #[arg(long)]
        height: u32,
        #[arg(long, value_enum, default_value = "object")]
        kind: KindArg,
        /// Output RGBA PNG.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        synth: SynthArgs,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Synthesize a multi-layer sample from a layout file into a sample store.
    SynthMultilayer {
        /// A layout, or an `{"id", "layout"}` record.
        #[arg(long)]
        layout: PathBuf,
        /// Sample store root.
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the record id or the layout file stem.
        #[arg(long)]
        id: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        synth: SynthArgs,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Run the curation pipeline (resumes from checkpoints in the work dir).
    Curate {
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long)]
        work: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Stage-B layouts (JSON lines); overrides the config.
        #[arg(long)]
        layouts: Option<PathBuf>,
        #[arg(long)]
        mock_layouts: Option<usize>,
        #[arg(long)]
        stop_after: Option<Stage>,
        #[arg(long)]
        fresh: bool,
        /// Ignore the config's backend section and use the mocks.
        #[arg(long)]
        mock: bool,
    },
    /// Apply a review journal to a staged manifest.
    ReviewApply {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        journal: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sample store root; defaults to the manifest's directory.
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "drop-layer")]
        policy: PolicyArg,
    },
    /// Layer-count and text statistics of a manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Attention-map metrics over suffix runs, ranked by background IoU.
    Metrics {
        /// Directory with one subdirectory per suffix holding attention.grid,
        /// mask.grid and optionally trajectory.grid.
        #[arg(long, required_unless_present = "reference")]
        records: Option<PathBuf>,
        /// otsu, mean or fixed:<t>.
        #[arg(long, default_value = "otsu")]
        binarize: Binarize,
        /// Print the bundled reference table instead.
        #[arg(long)]
        reference: bool,
    },
    /// Train a TIPS model on preference pairs (JSON lines).
    TipsTrain {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from this model instead of the identity initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        l2: f64,
        #[arg(long, default_value_t = 0.2)]
        holdout: f64,
        #[arg(long)]
        fixed_tau: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-layer TIPS scores for every sample of a manifest.
    TipsScore {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Serve the review API over a staged manifest.
    ReviewServe {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        root: Option<PathBuf>,
        /// Defaults to <root>/journal.jsonl.
        #[arg(long)]
        journal: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8787)]
        port: u16,
    },
    /// Write flattened merged renders for external FID tools.
    ExportFid {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn store_root(manifest: &Path, root: &Option<PathBuf>) -> PathBuf {
    root.clone().unwrap_or_else(|| {
        manifest
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    })
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DOMAIN
        }
    }
}

fn out(s: &str) -> Result<()> {
    let mut o = std::io::stdout().lock();
    o.write_all(s.as_bytes())
        .and_then(|_| o.flush())
        .map_err(|e| io_err(Path::new("<stdout>"), e))
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthLayer {
            caption,
            width,
            height,
            kind,
            out: path,
            seed,
            synth,
            backend,
        } => {
            let slot = LayerSlot {
                bbox: BBox::new(0, 0, width, height),
                z: 0,
                caption: caption.clone(),
                kind: kind.into(),
            };
            let backends = backend.build(seed)?;
            let layer = synth_layer_with_retries(&caption, &slot, &synth.config(), &synth.registry()?, &backends, seed)?;
            write_atomic(&path, &encode_png(&layer.image)?)?;
            out(&format!("{}\t{}x{}\tcoverage {:.4}\n", path.display(), width, height, layer.image.coverage()))
        }
        Command::SynthMultilayer {
            layout,
            out: root,
            id,
            seed,
            synth,
            backend,
        } => {
            let raw = fs::read(&layout).map_err(|e| io_err(&layout, e))?;
            let (rec_id, l) = match serde_json::from_slice::<LayoutRecord>(&raw) {
                Ok(r) => (Some(r.id), r.layout),
                Err(_) => (None, serde_json::from_slice::<SemanticLayout>(&raw)?),
            };
            let id = id.or(rec_id).unwrap_or_else(|| {
                layout
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "sample".into())
            });
            let backends = backend.build(seed)?;
            let sample = synth_multilayer(&id, &l, &synth.config(), &synth.registry()?, &backends, seed)?;
            let entry = SampleStore::open(&root)?.write(&sample)?;
            out(&format!("{}\n", serde_json::to_string(&entry)?))
        }
        Command::Curate {
            config,
            work,
            seed,
            layouts,
            mock_layouts,
            stop_after,
            fresh,
            mock,
        } => {
            let mut cfg = match &config {
                Some(p) => PipelineConfig::load(p)?,
                None => PipelineConfig::desk(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if layouts.is_some() {
                cfg.layouts = layouts;
            }
            if let Some(n) = mock_layouts {
                cfg.mock_layouts = n;
            }
            if mock {
                cfg.backends = BackendsConfig::default();
            }
            cfg.backends.seed = cfg.seed;
            let backends_cfg = if mock {
                cfg.backends.clone()
            } else {
                cfg.backends.clone().with_env_overrides()
            };
            let backends = Backends::from_config(&backends_cfg)?;
            let run = run_pipeline(&cfg, &backends, &work, RunOptions { stop_after, fresh })?;
            let mut text = run.report.render_table();
            if !run.resumed.is_empty() {
                text.push_str(&format!("resumed\t{}\n", run.resumed.join(",")));
            }
            if run.completed {
                text.push_str(&format!("manifest\t{}\n", work.join("manifest.jsonl").display()));
            } else {
                text.push_str("stopped early; rerun to resume\n");
            }
            out(&text)
        }
        Command::ReviewApply {
            manifest,
            journal,
            out: out_path,
            root,
            policy,
        } => {
            let store = SampleStore::open(store_root(&manifest, &root))?;
            let entries = read_manifest(&manifest)?;
            let decisions = read_journal(&journal)?;
            let outcome = apply_review_decisions(&entries, &decisions, &store, policy.into())?;
            write_manifest(&out_path, &outcome.manifest)?;
            let accepted = outcome.manifest.iter().filter(|e| e.stage == Stage::F).count();
            out(&format!(
                "accepted\t{accepted}\ntombstoned\t{}\nrebuilt\t{}\npending\t{}\n",
                outcome.tombstoned.len(),
                outcome.rebuilt.len(),
                outcome.manifest.len() - accepted
            ))
        }
        Command::Stats { manifest, root, json } => {
            let store = SampleStore::open(store_root(&manifest, &root))?;
            let mut acc = StatsAccumulator::default();
            for e in read_manifest(&manifest)? {
                acc.add_meta(&store.read_meta(&e.path)?);
            }
            let stats = acc.finish()?;
            if json {
                out(&format!("{}\n", serde_json::to_string_pretty(&stats)?))
            } else {
                out(&stats.render_table())
            }
        }
        Command::Metrics {
            records,
            binarize,
            reference,
        } => {
            if reference {
                return out(attention::REFERENCE_TABLE_TSV);
            }
            let dir = records.expect("clap enforces --records");
            let recs = read_attention_records(&dir)?;
            let mut rows = attention::metrics_report(&recs, binarize)?;
            attention::rank_rows(&mut rows);
            out(&attention::render_tsv(&rows))
        }
        Command::TipsTrain {
            pairs,
            out: path,
            init,
            epochs,
            lr,
            batch,
            l2,
            holdout,
            fixed_tau,
            seed,
        } => {
            let pairs = tips::read_pairs(&pairs)?;
            let first = pairs.first().ok_or(Error::EmptyInput("no preference pairs"))?;
            let start = match init {
                Some(p) => TipsModel::load(&p)?,
                None => TipsModel::init(first.e_win.dim()),
            };
            let cfg = TrainConfig {
                lr,
                epochs,
                batch,
                seed,
                l2,
                holdout_fraction: holdout,
                learn_tau: !fixed_tau,
            };
            let outcome = tips::train(&start, &pairs, &cfg)?;
            outcome.model.save(&path)?;
            let mut text = String::from("epoch\ttrain_loss\ttrain_acc\theldout_acc\n");
            for r in &outcome.history {
                let held = r.heldout_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
                text.push_str(&format!("{}\t{:.6}\t{:.4}\t{held}\n", r.epoch, r.train_loss, r.train_accuracy));
            }
            out(&text)
        }
        Command::TipsScore {
            model,
            manifest,
            root,
            seed,
            backend,
        } => {
            let store = SampleStore::open(store_root(&manifest, &root))?;
            let backends = backend.build(seed)?;
            let model = model.as_deref().map(TipsModel::load).transpose()?;
            let mut text = String::from("sample_id\tlayer\tkind\ttips_score\n");
            for e in read_manifest(&manifest)? {
                let sample = store.read(&e.path)?;
                let m = match &model {
                    Some(m) => m.clone(),
                    None => {
                        let dim = backends.embedder.embed_text("dimension probe")?.dim();
                        TipsModel::without_projection(dim, tips::DEFAULT_TAU)
                    }
                };
                let d = tips_gate_with(&sample, backends.embedder.as_ref(), &m, -1.0)?;
                for (i, s) in d.layer_scores.iter().enumerate() {
                    text.push_str(&format!("{}\t{i}\t{}\t{s:.6}\n", e.id, sample.layers[i].kind.as_str()));
                }
            }
            out(&text)
        }
        Command::ReviewServe {
            manifest,
            root,
            journal,
            host,
            port,
        } => {
            let root = store_root(&manifest, &root);
            let journal = journal.unwrap_or_else(|| root.join("journal.jsonl"));
            let state = service::AppState::open(&manifest, &root, &journal)?;
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| io_err(Path::new("<runtime>"), e))?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                    .await
                    .map_err(|e| io_err(Path::new(&format!("{host}:{port}")), e))?;
                let addr = listener.local_addr().map_err(|e| io_err(Path::new("<listener>"), e))?;
                eprintln!("review service listening on http://{addr}");
                service::serve(state, listener)
                    .await
                    .map_err(|e| io_err(Path::new("<server>"), e))
            })
        }
        Command::ExportFid { manifest, root, out: dir } => {
            let store = SampleStore::open(store_root(&manifest, &root))?;
            let written = export_merged(&read_manifest(&manifest)?, &store, &dir)?;
            out(&format!("exported\t{}\n", written.len()))
        }
    }
}

fn read_attention_records(dir: &Path) -> Result<Vec<(String, AttentionRecord)>> {
    let mut labels: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    labels.sort();
    let mut out = Vec::with_capacity(labels.len());
    for p in labels {
        let label = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let a = attention::read_grid(&p.join("attention.grid"))?;
        let m = Mask::from_grid(&attention::read_grid(&p.join("mask.grid"))?)?;
        let traj_path = p.join("trajectory.grid");
        let trajectory = if traj_path.is_file() {
            Some(attention::read_grids(&traj_path)?)
        } else {
            None
        };
        out.push((label, AttentionRecord::new(a, m, trajectory)?));
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("no attention records found"));
    }
    Ok(out)
}
