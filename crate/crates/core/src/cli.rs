//! The `reid` command-line tool.
//!
//! Every command that writes files also writes a manifest with the config
//! hash, the seed and a checksum per artifact. Errors go to stderr as one
//! `error kind=... message=...` line with exit code 1; usage errors print
//! the usage text and exit with 2.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cluster::{dbscan, labels_from_clusters, purity, ClusterAssignment};
use crate::config::KeyValues;
use crate::data::{load_dataset, split_query_gallery, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, rank_query, Scorer, SimilarityMode};
use crate::manifest::Manifest;
use crate::matrix::normalized;
use crate::objective::Embedder;
use crate::similarity::{pairwise_joint_rows, pairwise_visual_rows};
use crate::synth::{generate, CameraStyles, GroundTruth, WorldConfig};
use crate::temporal::{estimate_histograms, TemporalModel};
use crate::trainer::{log_csv, train, TrainConfig};

pub const META_FILE: &str = "meta.csv";
pub const FEATURES_FILE: &str = "features.bin";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const EMBEDDER_FILE: &str = "embedder.bin";
pub const BANK_FILE: &str = "bank.bin";
pub const LOG_FILE: &str = "log.csv";
pub const TEMPORAL_FILE: &str = "temporal.txt";
pub const CLUSTERS_FILE: &str = "clusters.csv";
pub const LABELS_FILE: &str = "labels.txt";
pub const REPORT_FILE: &str = "report.csv";
pub const PER_QUERY_FILE: &str = "per_query.csv";

#[derive(Debug, Parser)]
#[command(name = "reid", version, about = "Temporal-consistency pseudo-labelling for cross-camera retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic camera-network dataset with ground truth.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate and smooth camera-pair interval histograms.
    Hist {
        #[arg(long)]
        data: PathBuf,
        /// Cluster assignment CSV; omit with --true-labels.
        #[arg(long, required_unless_present = "true_labels")]
        labels: Option<PathBuf>,
        /// Use the person ids stored in the dataset.
        #[arg(long)]
        true_labels: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster samples into pseudo identities.
    Cluster {
        #[arg(long)]
        data: PathBuf,
        /// Run directory whose embedder produces the features; raw features otherwise.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Temporal model; switches to joint similarity.
        #[arg(long)]
        hist: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an embedder.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Labelled source-domain dataset directory.
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Retrieval evaluation (mAP and CMC).
    Eval {
        #[command(flatten)]
        scoring: ScoringArgs,
        #[arg(long, default_value_t = 0.25)]
        query_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for report.csv, per_query.csv and a manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the top-k gallery items for one query.
    Rank {
        #[command(flatten)]
        scoring: ScoringArgs,
        #[arg(long)]
        query: usize,
        #[arg(long, default_value_t = 5)]
        topk: usize,
    },
}

#[derive(Debug, Args)]
pub struct ScoringArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value = "visual")]
    pub mode: SimilarityMode,
    /// Temporal model overriding the run's own.
    #[arg(long)]
    pub hist: Option<PathBuf>,
}

/// Parse `argv` and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}

pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error kind={} message={msg:?}", e.kind())
}

/// Run one command; returns what it prints on stdout.
pub fn execute(cmd: Command) -> Result<String> {
    match cmd {
        Command::Synth { config, out, seed } => cmd_synth(&config, &out, seed),
        Command::Hist {
            data,
            labels,
            true_labels,
            config,
            out,
        } => cmd_hist(&data, labels.as_deref(), true_labels, config.as_deref(), &out),
        Command::Cluster {
            data,
            run,
            hist,
            config,
            out,
        } => cmd_cluster(&data, run.as_deref(), hist.as_deref(), config.as_deref(), &out),
        Command::Train {
            data,
            config,
            out,
            source,
            seed,
        } => cmd_train(&data, config.as_deref(), &out, source.as_deref(), seed),
        Command::Eval {
            scoring,
            query_fraction,
            seed,
            out,
        } => cmd_eval(&scoring, query_fraction, seed, out.as_deref()),
        Command::Rank { scoring, query, topk } => cmd_rank(&scoring, query, topk),
    }
}

pub fn load_data_dir(dir: &Path) -> Result<Dataset> {
    load_dataset(&dir.join(META_FILE), &dir.join(FEATURES_FILE))
}

fn load_kv(path: Option<&Path>, seed: Option<u64>) -> Result<KeyValues> {
    let mut kv = match path {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    if let Some(s) = seed {
        kv.set("seed", s);
    }
    Ok(kv)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn finish_manifest(mut m: Manifest, dir: &Path, files: &[&str]) -> Result<Manifest> {
    for f in files {
        m.add(dir, f)?;
    }
    m.write(dir)?;
    Ok(m)
}

fn cmd_synth(config: &Path, out: &Path, seed: Option<u64>) -> Result<String> {
    let kv = load_kv(Some(config), seed)?;
    let cfg = WorldConfig::from_kv(&kv)?;
    kv.finish()?;
    let (d, gt) = generate(&cfg)?;
    create_dir(out)?;
    d.save(&out.join(META_FILE), &out.join(FEATURES_FILE))?;
    gt.save(&out.join(GROUND_TRUTH_FILE))?;
    write_text(&out.join(CONFIG_FILE), &kv.canonical())?;
    finish_manifest(
        Manifest::new("synth", kv.hash(), cfg.seed),
        out,
        &[META_FILE, FEATURES_FILE, GROUND_TRUTH_FILE, CONFIG_FILE],
    )?;
    Ok(format!("samples={} persons={} cameras={}\n", d.len(), cfg.num_persons, cfg.num_cameras))
}

fn temporal_from_labels(d: &Dataset, labels: &[Option<usize>], cfg: &TrainConfig) -> Result<TemporalModel> {
    let mut tm = estimate_histograms(&d.metas, labels, d.num_cameras, cfg.binning)?.smooth(cfg.smoothing_sigma)?;
    tm.max_normalize = cfg.max_normalize;
    tm.intra_camera = cfg.intra_camera;
    Ok(tm)
}

fn cmd_hist(data: &Path, labels: Option<&Path>, true_labels: bool, config: Option<&Path>, out: &Path) -> Result<String> {
    let kv = load_kv(config, None)?;
    let cfg = TrainConfig::from_kv(&kv)?;
    kv.finish()?;
    let d = load_data_dir(data)?;
    let labels: Vec<Option<usize>> = if true_labels {
        d.known_person_ids()?.into_iter().map(|p| Some(p as usize)).collect()
    } else {
        let path = labels.ok_or_else(|| Error::Argument("give --labels or --true-labels".into()))?;
        let a = ClusterAssignment::load(path)?;
        if a.len() != d.len() {
            return Err(Error::Dimension(format!("{} labels for {} samples", a.len(), d.len())));
        }
        a.labels
    };
    let tm = temporal_from_labels(&d, &labels, &cfg)?;
    create_dir(out)?;
    tm.save(&out.join(TEMPORAL_FILE))?;
    finish_manifest(Manifest::new("hist", kv.hash(), cfg.seed), out, &[TEMPORAL_FILE])?;
    let empty = tm.empty_pairs();
    Ok(format!("pairs={} empty_pairs={}\n", tm.pairs().count(), empty.len()))
}

fn unit_rows(raw: &crate::matrix::Matrix) -> Result<crate::matrix::Matrix> {
    let rows = (0..raw.rows())
        .map(|i| normalized(raw.row(i)).ok_or_else(|| Error::NonFinite(format!("feature row {i} has zero norm"))))
        .collect::<Result<Vec<_>>>()?;
    crate::matrix::Matrix::from_rows(&rows)
}

fn cmd_cluster(data: &Path, run: Option<&Path>, hist: Option<&Path>, config: Option<&Path>, out: &Path) -> Result<String> {
    let kv = load_kv(config, None)?;
    let cfg = TrainConfig::from_kv(&kv)?;
    kv.finish()?;
    let d = load_data_dir(data)?;
    let feats = match run {
        Some(r) => Embedder::load(&r.join(EMBEDDER_FILE))?.embed_all(&d.features.raw)?,
        None => unit_rows(&d.features.raw)?,
    };
    let (assign, kind) = match hist {
        Some(h) => {
            let tm = TemporalModel::load(h)?;
            let sim = pairwise_joint_rows(&feats, &d.metas, &tm, &cfg.fusion, cfg.max_n)?;
            (dbscan(&sim, cfg.joint_dbscan)?, "joint")
        }
        None => (dbscan(&pairwise_visual_rows(&feats, cfg.max_n)?, cfg.dbscan)?, "visual"),
    };
    create_dir(out)?;
    assign.save(&out.join(CLUSTERS_FILE))?;
    write_text(&out.join(LABELS_FILE), &labels_from_clusters(&assign).to_text())?;
    finish_manifest(Manifest::new("cluster", kv.hash(), cfg.seed), out, &[CLUSTERS_FILE, LABELS_FILE])?;
    let mut s = format!(
        "similarity={kind} clusters={} noise={}",
        assign.num_clusters,
        assign.num_noise()
    );
    if let Ok(ids) = d.known_person_ids() {
        write!(s, " purity={:.6}", purity(&assign, &ids)?.value).unwrap();
    }
    s.push('\n');
    Ok(s)
}

fn cmd_train(data: &Path, config: Option<&Path>, out: &Path, source: Option<&Path>, seed: Option<u64>) -> Result<String> {
    let kv = load_kv(config, seed)?;
    let cfg = TrainConfig::from_kv(&kv)?;
    let style_source = kv.get_or("augment_styles", "estimated".to_string())?;
    kv.finish()?;
    let d = load_data_dir(data)?;
    let styles = match style_source.as_str() {
        "estimated" => CameraStyles::estimate_mean_shift(&d),
        "truth" => GroundTruth::load(&data.join(GROUND_TRUTH_FILE))?.styles,
        other => return Err(Error::Config(format!("augment_styles must be `estimated` or `truth`, got `{other}`"))),
    };
    let src = source.map(load_data_dir).transpose()?;
    let outcome = train(&d, src.as_ref(), &styles, &cfg)?;

    create_dir(out)?;
    outcome.embedder.save(&out.join(EMBEDDER_FILE))?;
    outcome.bank.save(&out.join(BANK_FILE))?;
    write_text(&out.join(LOG_FILE), &log_csv(&outcome.log))?;
    outcome.temporal.save(&out.join(TEMPORAL_FILE))?;
    outcome.clusters.save(&out.join(CLUSTERS_FILE))?;
    write_text(&out.join(LABELS_FILE), &labels_from_clusters(&outcome.clusters).to_text())?;
    write_text(&out.join(CONFIG_FILE), &kv.canonical())?;
    finish_manifest(
        Manifest::new("train", kv.hash(), cfg.seed),
        out,
        &[EMBEDDER_FILE, BANK_FILE, LOG_FILE, TEMPORAL_FILE, CLUSTERS_FILE, LABELS_FILE, CONFIG_FILE],
    )?;
    let last = outcome.log.last().expect("at least one epoch");
    Ok(format!(
        "epochs={} clusters={} purity={}\n",
        outcome.log.len(),
        outcome.clusters.num_clusters,
        last.purity.map_or("NA".to_string(), |p| format!("{p:.6}"))
    ))
}

struct Loaded {
    data: Dataset,
    features: crate::matrix::Matrix,
    temporal: Option<TemporalModel>,
    fusion: crate::similarity::FusionParams,
}

fn load_for_scoring(a: &ScoringArgs) -> Result<Loaded> {
    let data = load_data_dir(&a.data)?;
    let features = Embedder::load(&a.run.join(EMBEDDER_FILE))?.embed_all(&data.features.raw)?;
    let temporal = match (&a.hist, a.mode) {
        (Some(h), _) => Some(TemporalModel::load(h)?),
        (None, SimilarityMode::Joint) => Some(TemporalModel::load(&a.run.join(TEMPORAL_FILE))?),
        (None, SimilarityMode::Visual) => None,
    };
    let cfg_path = a.run.join(CONFIG_FILE);
    let fusion = if cfg_path.exists() {
        TrainConfig::from_kv(&KeyValues::load(&cfg_path)?)?.fusion
    } else {
        Default::default()
    };
    Ok(Loaded {
        data,
        features,
        temporal,
        fusion,
    })
}

fn cmd_eval(a: &ScoringArgs, query_fraction: f64, seed: u64, out: Option<&Path>) -> Result<String> {
    let l = load_for_scoring(a)?;
    let split = split_query_gallery(&l.data, query_fraction, seed)?;
    let scorer = Scorer::new(&l.features, &l.data.metas, l.temporal.as_ref(), l.fusion, a.mode)?;
    let report = evaluate(&scorer, &split.query, &split.gallery)?;
    let csv = report.to_csv();
    if let Some(dir) = out {
        create_dir(dir)?;
        write_text(&dir.join(REPORT_FILE), &csv)?;
        write_text(&dir.join(PER_QUERY_FILE), &report.per_query_csv(&l.data.metas))?;
        let mut kv = KeyValues::default();
        kv.set("mode", a.mode);
        kv.set("query_fraction", query_fraction);
        kv.set("run", Manifest::load(&a.run).map(|m| m.config_hash).unwrap_or_default());
        finish_manifest(Manifest::new("eval", kv.hash(), seed), dir, &[REPORT_FILE, PER_QUERY_FILE])?;
    }
    Ok(csv)
}

/// Gallery for a single query: every other sample except those showing the
/// same person under the same camera.
pub fn rank_gallery(d: &Dataset, query: usize) -> Vec<usize> {
    let q = &d.metas[query];
    d.metas
        .iter()
        .filter(|m| {
            m.sample_id != query
                && !(q.person_id.is_some() && m.person_id == q.person_id && m.camera_id == q.camera_id)
        })
        .map(|m| m.sample_id)
        .collect()
}

fn cmd_rank(a: &ScoringArgs, query: usize, topk: usize) -> Result<String> {
    let l = load_for_scoring(a)?;
    if query >= l.data.len() {
        return Err(Error::Argument(format!("query {query} out of range for {} samples", l.data.len())));
    }
    let scorer = Scorer::new(&l.features, &l.data.metas, l.temporal.as_ref(), l.fusion, a.mode)?;
    let gallery = rank_gallery(&l.data, query);
    let mut s = String::from("rank,sample_id,person_id,camera_id,frame_id,score\n");
    for (r, (g, score)) in rank_query(&scorer, query, &gallery, topk).into_iter().enumerate() {
        let m = &l.data.metas[g];
        let pid = m.person_id.map_or("-1".to_string(), |p| p.to_string());
        writeln!(s, "{},{},{},{},{},{:.6}", r + 1, m.sample_id, pid, m.camera_id, m.frame_id, score).unwrap();
    }
    Ok(s)
}
