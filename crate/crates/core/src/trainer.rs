//! The training loop: periodic pseudo-label refresh (clustering over visual
//! or joint similarity), then per-iteration gradient steps on the active
//! losses with memory-bank updates.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cluster::{dbscan, labels_from_clusters, purity, ClusterAssignment, DbscanParams};
use crate::config::KeyValues;
use crate::data::{Dataset, MultiLabels};
use crate::error::{Error, Result};
use crate::matrix::{normalized, Matrix};
use crate::memory::{alpha_schedule, MemoryBank};
use crate::objective::{
    augment, build_sac_classifier, global_loss, sac_loss, src_loss, Embedder, LossWeights, SacBatch,
};
use crate::similarity::{pairwise_joint, pairwise_visual, FusionParams, DEFAULT_MAX_N};
use crate::synth::CameraStyles;
use crate::temporal::{estimate_histograms, BinSpec, TemporalModel};

/// Which components are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeFlags {
    pub use_sac: bool,
    pub use_mtc: bool,
    pub use_temporal_in_cluster: bool,
    pub use_src: bool,
}

/// Named component configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Memory-bank multi-label loss with visual-only clustering.
    Baseline,
    /// In-batch classification only.
    Sac,
    /// Memory-bank loss with joint-similarity clustering.
    Mtc,
    /// Both losses, joint-similarity clustering.
    Jvtc,
}

impl Ablation {
    pub fn flags(self) -> ModeFlags {
        let (use_sac, use_mtc, use_temporal_in_cluster) = match self {
            Ablation::Baseline => (false, true, false),
            Ablation::Sac => (true, false, false),
            Ablation::Mtc => (false, true, true),
            Ablation::Jvtc => (true, true, true),
        };
        ModeFlags {
            use_sac,
            use_mtc,
            use_temporal_in_cluster,
            use_src: false,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Baseline => "Baseline",
            Ablation::Sac => "SAC",
            Ablation::Mtc => "MTC",
            Ablation::Jvtc => "JVTC",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub lr: f64,
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    /// Originals per target batch.
    pub batch_size: usize,
    /// Augmented copies per original.
    pub k: usize,
    /// Noise norm added to each augmented copy.
    pub augment_strength: f64,
    /// Gradient steps per epoch; `None` means `ceil(N / batch_size)`.
    pub iterations_per_epoch: Option<usize>,
    pub label_refresh_period: usize,
    pub global_loss_start_epoch: usize,
    pub joint_similarity_start_epoch: usize,
    pub weights: LossWeights,
    /// Temperature of the source classifier.
    pub src_beta: f64,
    pub fusion: FusionParams,
    /// DBSCAN over visual similarity.
    pub dbscan: DbscanParams,
    /// DBSCAN over joint similarity.
    pub joint_dbscan: DbscanParams,
    pub binning: BinSpec,
    /// Gaussian smoothing of the interval histograms, in frames.
    pub smoothing_sigma: f64,
    pub max_normalize: bool,
    pub intra_camera: bool,
    pub flags: ModeFlags,
    pub embed_dim: usize,
    pub max_n: usize,
    /// Worker threads; 0 uses the global pool.
    pub workers: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let binning = BinSpec::default();
        TrainConfig {
            total_epochs: 100,
            lr: 0.01,
            lr_decay_epoch: 40,
            lr_decay_factor: 0.1,
            batch_size: 32,
            k: 3,
            augment_strength: 0.1,
            iterations_per_epoch: None,
            label_refresh_period: 5,
            global_loss_start_epoch: 10,
            joint_similarity_start_epoch: 30,
            weights: LossWeights::default(),
            src_beta: 1.0,
            fusion: FusionParams::default(),
            dbscan: DbscanParams::default(),
            joint_dbscan: DbscanParams::default(),
            binning,
            smoothing_sigma: binning.bin_width,
            max_normalize: true,
            intra_camera: true,
            flags: Ablation::Jvtc.flags(),
            embed_dim: 16,
            max_n: DEFAULT_MAX_N,
            workers: 0,
            seed: 0,
        }
    }
}

fn scale_epoch(e: usize, factor: f64) -> usize {
    ((e as f64 * factor).round() as usize).max(1)
}

impl TrainConfig {
    /// Shrink the schedule to `total_epochs`, keeping the phase ratios of the
    /// 100-epoch schedule (every scaled constant rounded, minimum 1).
    pub fn scaled(mut self, total_epochs: usize) -> Self {
        let f = total_epochs as f64 / self.total_epochs as f64;
        self.lr_decay_epoch = scale_epoch(self.lr_decay_epoch, f);
        self.label_refresh_period = scale_epoch(self.label_refresh_period, f);
        self.global_loss_start_epoch = scale_epoch(self.global_loss_start_epoch, f);
        self.joint_similarity_start_epoch = scale_epoch(self.joint_similarity_start_epoch, f);
        self.total_epochs = total_epochs;
        self
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        let use_src = self.flags.use_src;
        self.flags = a.flags();
        self.flags.use_src = use_src;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.total_epochs == 0 || self.label_refresh_period == 0 || self.batch_size == 0 {
            return bad("total_epochs, label_refresh_period and batch_size must be >= 1".into());
        }
        if self.global_loss_start_epoch > self.total_epochs || self.joint_similarity_start_epoch > self.total_epochs {
            return bad("start epochs must not exceed total_epochs".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.src_beta > 0.0) || self.embed_dim == 0 {
            return bad("lr, src_beta and embed_dim must be positive".into());
        }
        if self.iterations_per_epoch == Some(0) {
            return bad("iterations_per_epoch must be >= 1".into());
        }
        if !(self.smoothing_sigma >= 0.0) || !(self.augment_strength >= 0.0) {
            return bad("smoothing_sigma and augment_strength must be >= 0".into());
        }
        self.weights.validate()?;
        self.fusion.validate()?;
        self.binning.validate()
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = TrainConfig::default();
        let base_epochs = kv.get_or("total_epochs", d.total_epochs)?;
        let mut cfg = if kv.get_or("scale_schedule", false)? {
            d.clone().scaled(base_epochs)
        } else {
            TrainConfig { total_epochs: base_epochs, ..d.clone() }
        };
        cfg.lr = kv.get_or("lr", cfg.lr)?;
        cfg.lr_decay_epoch = kv.get_or("lr_decay_epoch", cfg.lr_decay_epoch)?;
        cfg.lr_decay_factor = kv.get_or("lr_decay_factor", cfg.lr_decay_factor)?;
        cfg.batch_size = kv.get_or("batch_size", cfg.batch_size)?;
        cfg.k = kv.get_or("k", cfg.k)?;
        cfg.augment_strength = kv.get_or("augment_strength", cfg.augment_strength)?;
        cfg.iterations_per_epoch = kv.get("iterations_per_epoch")?;
        cfg.label_refresh_period = kv.get_or("label_refresh_period", cfg.label_refresh_period)?;
        cfg.global_loss_start_epoch = kv.get_or("global_loss_start_epoch", cfg.global_loss_start_epoch)?;
        cfg.joint_similarity_start_epoch = kv.get_or("joint_similarity_start_epoch", cfg.joint_similarity_start_epoch)?;
        cfg.weights = LossWeights {
            w1: kv.get_or("w1", d.weights.w1)?,
            w2: kv.get_or("w2", d.weights.w2)?,
            beta1: kv.get_or("beta1", d.weights.beta1)?,
            beta2: kv.get_or("beta2", d.weights.beta2)?,
        };
        cfg.src_beta = kv.get_or("src_beta", d.src_beta)?;
        cfg.fusion = FusionParams {
            lambda0: kv.get_or("lambda0", d.fusion.lambda0)?,
            lambda1: kv.get_or("lambda1", d.fusion.lambda1)?,
            gamma0: kv.get_or("gamma0", d.fusion.gamma0)?,
            gamma1: kv.get_or("gamma1", d.fusion.gamma1)?,
        };
        cfg.dbscan = DbscanParams {
            eps: kv.get_or("eps", d.dbscan.eps)?,
            min_pts: kv.get_or("min_pts", d.dbscan.min_pts)?,
        };
        cfg.joint_dbscan = DbscanParams {
            eps: kv.get_or("joint_eps", cfg.dbscan.eps)?,
            min_pts: kv.get_or("joint_min_pts", cfg.dbscan.min_pts)?,
        };
        cfg.binning = BinSpec::new(
            kv.get_or("bin_width", d.binning.bin_width)?,
            kv.get_or("max_interval", d.binning.max_interval)?,
        )?;
        cfg.smoothing_sigma = kv.get_or("smoothing_sigma", cfg.binning.bin_width)?;
        cfg.max_normalize = kv.get_or("max_normalize", d.max_normalize)?;
        cfg.intra_camera = kv.get_or("intra_camera", d.intra_camera)?;
        if let Some(mode) = kv.raw("mode") {
            cfg = cfg.with_ablation(match mode.to_ascii_lowercase().as_str() {
                "baseline" => Ablation::Baseline,
                "sac" => Ablation::Sac,
                "mtc" => Ablation::Mtc,
                "jvtc" | "jvtc+" => Ablation::Jvtc,
                other => return Err(Error::Config(format!("unknown mode `{other}`"))),
            });
        }
        cfg.flags.use_sac = kv.get_or("use_sac", cfg.flags.use_sac)?;
        cfg.flags.use_mtc = kv.get_or("use_mtc", cfg.flags.use_mtc)?;
        cfg.flags.use_temporal_in_cluster = kv.get_or("use_temporal_in_cluster", cfg.flags.use_temporal_in_cluster)?;
        cfg.flags.use_src = kv.get_or("use_src", cfg.flags.use_src)?;
        cfg.embed_dim = kv.get_or("embed_dim", d.embed_dim)?;
        cfg.max_n = kv.get_or("max_n", d.max_n)?;
        cfg.workers = kv.get_or("workers", d.workers)?;
        cfg.seed = kv.get_or("seed", d.seed)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }

    pub fn is_refresh_epoch(&self, epoch: usize) -> bool {
        epoch.is_multiple_of(self.label_refresh_period)
    }

    pub fn global_active(&self, epoch: usize) -> bool {
        self.flags.use_mtc && epoch >= self.global_loss_start_epoch
    }

    pub fn joint_active(&self, epoch: usize) -> bool {
        self.flags.use_mtc && self.flags.use_temporal_in_cluster && epoch >= self.joint_similarity_start_epoch
    }
}

/// SplitMix64 over a sequence of words; derives independent sub-seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Uniformly sample `batch_size` distinct indices from `0..n`.
/// Deterministic in `(seed, epoch, iteration)`.
pub fn batch_sampler(n: usize, batch_size: usize, seed: u64, epoch: usize, iteration: usize) -> Result<Vec<usize>> {
    if batch_size > n {
        return Err(Error::Argument(format!("batch of {batch_size} from only {n} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch as u64, iteration as u64]));
    Ok(rand::seq::index::sample(&mut rng, n, batch_size).into_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_src: Option<f64>,
    pub l_local: Option<f64>,
    pub l_global: Option<f64>,
    pub purity: Option<f64>,
    pub num_clusters: Option<usize>,
    pub alpha: f64,
    pub lr: f64,
    /// Similarity used by this epoch's clustering, if one ran.
    pub clustered_with: Option<&'static str>,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut s = String::from("epoch,L_src,L_local,L_global,purity,num_clusters,alpha\n");
    for e in log {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            e.epoch,
            opt(e.l_src),
            opt(e.l_local),
            opt(e.l_global),
            opt(e.purity),
            e.num_clusters.map_or(String::new(), |n| n.to_string()),
            e.alpha
        )
        .unwrap();
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub embedder: Embedder,
    pub bank: MemoryBank,
    pub log: Vec<EpochLog>,
    /// Clusters of the final label refresh, or of a closing clustering pass.
    pub clusters: ClusterAssignment,
    /// Temporal model estimated from `clusters`.
    pub temporal: TemporalModel,
}

/// One pseudo-label refresh over the current bank.
#[derive(Debug, Clone)]
pub struct Refresh {
    pub clusters: ClusterAssignment,
    pub temporal: Option<TemporalModel>,
    pub joint: bool,
}

fn estimate_model(target: &Dataset, clusters: &ClusterAssignment, cfg: &TrainConfig) -> Result<TemporalModel> {
    let mut tm = estimate_histograms(&target.metas, &clusters.labels, target.num_cameras, cfg.binning)?
        .smooth(cfg.smoothing_sigma)?;
    tm.max_normalize = cfg.max_normalize;
    tm.intra_camera = cfg.intra_camera;
    Ok(tm)
}

/// Cluster the bank. With `joint`, histograms are first estimated from
/// `previous` (or from a visual clustering when there is none).
pub fn refresh_labels(
    target: &Dataset,
    bank: &MemoryBank,
    previous: Option<&ClusterAssignment>,
    joint: bool,
    cfg: &TrainConfig,
) -> Result<Refresh> {
    if !joint {
        let sim = pairwise_visual(bank, cfg.max_n)?;
        return Ok(Refresh {
            clusters: dbscan(&sim, cfg.dbscan)?,
            temporal: None,
            joint: false,
        });
    }
    let seed_clusters = match previous {
        Some(p) => p.clone(),
        None => dbscan(&pairwise_visual(bank, cfg.max_n)?, cfg.dbscan)?,
    };
    let tm = estimate_model(target, &seed_clusters, cfg)?;
    let sim = pairwise_joint(bank, &target.metas, &tm, &cfg.fusion, cfg.max_n)?;
    Ok(Refresh {
        clusters: dbscan(&sim, cfg.joint_dbscan)?,
        temporal: Some(tm),
        joint: true,
    })
}

/// Source classes: sorted distinct person ids mapped to `0..n_classes`.
fn source_classes(source: &Dataset) -> Result<(Vec<usize>, usize)> {
    let ids = source.known_person_ids()?;
    let index: BTreeMap<u32, usize> = ids
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(k, id)| (id, k))
        .collect();
    Ok((ids.iter().map(|id| index[id]).collect(), index.len()))
}

/// The embedder `train` starts from; the untrained reference point.
pub fn initial_embedder(cfg: &TrainConfig, input_dim: usize) -> Embedder {
    Embedder::random(cfg.embed_dim, input_dim, mix_seed(&[cfg.seed, 0xE3B]))
}

/// Train the embedder on `target` (and optionally a labelled `source`).
///
/// `styles` drives the augmentation; `CameraStyles::estimate_mean_shift`
/// gives a data-driven family when no ground truth is at hand.
pub fn train(
    target: &Dataset,
    source: Option<&Dataset>,
    styles: &CameraStyles,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Argument(e.to_string()))?;
        pool.install(|| train_inner(target, source, styles, cfg))
    } else {
        train_inner(target, source, styles, cfg)
    }
}

fn train_inner(
    target: &Dataset,
    source: Option<&Dataset>,
    styles: &CameraStyles,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let n = target.len();
    if n < 2 {
        return Err(Error::Argument("target needs at least 2 samples".into()));
    }
    if styles.len() != target.num_cameras {
        return Err(Error::Dimension(format!(
            "{} camera styles for {} cameras",
            styles.len(),
            target.num_cameras
        )));
    }
    let source = match (cfg.flags.use_src, source) {
        (true, Some(s)) => Some(s),
        (true, None) => return Err(Error::Argument("use_src is set but no source dataset was given".into())),
        (false, _) => None,
    };
    if let Some(s) = source {
        if s.feature_dim() != target.feature_dim() {
            return Err(Error::Dimension("source and target feature dims differ".into()));
        }
    }
    let batch_size = cfg.batch_size.min(n);
    let true_ids = target.known_person_ids().ok();
    let raw = &target.features.raw;

    let mut emb = initial_embedder(cfg, target.feature_dim());
    let mut bank = MemoryBank::init(&emb.embed_all(raw)?)?;

    let mut src_state = match source {
        Some(s) => {
            let (labels, n_classes) = source_classes(s)?;
            let feats = emb.embed_all(&s.features.raw)?;
            let mut clf = Matrix::zeros(n_classes, cfg.embed_dim);
            for (i, &c) in labels.iter().enumerate() {
                crate::matrix::axpy(1.0, feats.row(i), clf.row_mut(c));
            }
            for c in 0..n_classes {
                let unit = normalized(clf.row(c)).unwrap_or_else(|| {
                    let mut e = vec![0.0; cfg.embed_dim];
                    e[c % cfg.embed_dim] = 1.0;
                    e
                });
                clf.row_mut(c).copy_from_slice(&unit);
            }
            Some((s, labels, clf))
        }
        None => None,
    };

    let iters = cfg.iterations_per_epoch.unwrap_or_else(|| n.div_ceil(batch_size));
    let mut labels: Option<MultiLabels> = None;
    let mut clusters: Option<ClusterAssignment> = None;
    let mut temporal: Option<TemporalModel> = None;
    let mut log = Vec::with_capacity(cfg.total_epochs);

    for epoch in 0..cfg.total_epochs {
        let lr = cfg.lr_at(epoch);
        let alpha = alpha_schedule(epoch, cfg.total_epochs);
        bank.epoch_alpha = alpha;
        let mut entry = EpochLog {
            epoch,
            l_src: None,
            l_local: None,
            l_global: None,
            purity: None,
            num_clusters: None,
            alpha,
            lr,
            clustered_with: None,
        };

        if cfg.flags.use_mtc && cfg.is_refresh_epoch(epoch) {
            // re-embed everything and pass it through the bank at the current rate
            let all = emb.embed_all(raw)?;
            for i in 0..n {
                bank.update(i, all.row(i), alpha)?;
            }
            let joint = cfg.joint_active(epoch);
            let r = refresh_labels(target, &bank, clusters.as_ref(), joint, cfg)?;
            if let Some(ids) = &true_ids {
                entry.purity = Some(purity(&r.clusters, ids)?.value);
            }
            entry.num_clusters = Some(r.clusters.num_clusters);
            entry.clustered_with = Some(if r.joint { "joint" } else { "visual" });
            labels = Some(labels_from_clusters(&r.clusters));
            if r.temporal.is_some() {
                temporal = r.temporal;
            }
            clusters = Some(r.clusters);
        }

        let (mut sum_src, mut sum_local, mut sum_global) = (0.0, 0.0, 0.0);
        let (mut n_src, mut n_local, mut n_global) = (0usize, 0usize, 0usize);
        for it in 0..iters {
            let batch = batch_sampler(n, batch_size, cfg.seed, epoch, it)?;
            let inputs = raw.select_rows(&batch);
            let mut grad = Matrix::zeros(cfg.embed_dim, target.feature_dim());
            let mut stepped = false;
            let fail = |what: &str, loss: f64| {
                Error::NonFinite(format!("{what} = {loss} at epoch {epoch}, iteration {it}"))
            };
            let locate = |e: Error| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {epoch}, iteration {it}")),
                other => other,
            };

            if cfg.flags.use_sac {
                let groups: Vec<Vec<Vec<f64>>> = batch
                    .iter()
                    .map(|&i| {
                        let seed = mix_seed(&[cfg.seed, 0xA06, epoch as u64, it as u64, i as u64]);
                        augment(raw.row(i), target.metas[i].camera_id, cfg.k, cfg.augment_strength, seed, styles)
                    })
                    .collect();
                let originals: Vec<Vec<f64>> = batch.iter().map(|&i| raw.row(i).to_vec()).collect();
                let sac_batch = SacBatch::from_parts(&originals, &groups)?;
                let v = build_sac_classifier(&sac_batch, &emb).map_err(locate)?;
                let out = sac_loss(&sac_batch, &v, &emb, cfg.weights.beta1).map_err(locate)?;
                if !out.loss.is_finite() {
                    return Err(fail("L_local", out.loss));
                }
                add_scaled(&mut grad, &out.grad_weight, cfg.weights.w1);
                sum_local += out.loss;
                n_local += 1;
                stepped = true;
            }

            if let (true, Some(ml)) = (cfg.global_active(epoch), labels.as_ref()) {
                let out = global_loss(&inputs, &batch, &emb, bank.slots(), ml, cfg.weights.beta2).map_err(locate)?;
                if !out.loss.is_finite() {
                    return Err(fail("L_global", out.loss));
                }
                add_scaled(&mut grad, &out.grad_weight, cfg.weights.w2);
                sum_global += out.loss;
                n_global += 1;
                stepped = true;
            }

            if let Some((s, s_labels, clf)) = src_state.as_mut() {
                let sb = batch_sampler(s.len(), cfg.batch_size.min(s.len()), mix_seed(&[cfg.seed, 0x5AC]), epoch, it)?;
                let ys: Vec<usize> = sb.iter().map(|&i| s_labels[i]).collect();
                let out = src_loss(&s.features.raw.select_rows(&sb), &ys, &emb, clf, cfg.src_beta).map_err(locate)?;
                if !out.loss.is_finite() {
                    return Err(fail("L_src", out.loss));
                }
                add_scaled(&mut grad, &out.grad_weight, 1.0);
                add_scaled(clf, &out.grad_classifier, -lr);
                sum_src += out.loss;
                n_src += 1;
                stepped = true;
            }

            // bank slots take the batch features of this forward pass
            let feats = emb.embed_all(&inputs).map_err(locate)?;
            if stepped {
                emb.step(&grad, lr);
                if !emb.weight.is_finite() {
                    return Err(fail("embedder weight", f64::NAN));
                }
            }
            for (r, &i) in batch.iter().enumerate() {
                bank.update(i, feats.row(r), alpha)?;
            }
        }
        let mean = |s: f64, c: usize| (c > 0).then(|| s / c as f64);
        entry.l_src = mean(sum_src, n_src);
        entry.l_local = mean(sum_local, n_local);
        entry.l_global = mean(sum_global, n_global);
        log.push(entry);
    }

    // closing pass so the outcome always carries clusters and a temporal model
    let last = refresh_labels(target, &bank, clusters.as_ref(), cfg.flags.use_temporal_in_cluster, cfg)?;
    let final_clusters = if cfg.flags.use_mtc { clusters.unwrap_or(last.clusters) } else { last.clusters };
    let temporal = match (temporal, cfg.flags.use_mtc) {
        (Some(tm), true) if cfg.flags.use_temporal_in_cluster => estimate_model(target, &final_clusters, cfg).unwrap_or(tm),
        _ => estimate_model(target, &final_clusters, cfg)?,
    };
    Ok(TrainOutcome {
        embedder: emb,
        bank,
        log,
        clusters: final_clusters,
        temporal,
    })
}

fn add_scaled(acc: &mut Matrix, g: &Matrix, scale: f64) {
    for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
        *a += scale * b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_full_batch_is_permutation() {
        let mut b = batch_sampler(10, 10, 3, 0, 0).unwrap();
        b.sort_unstable();
        assert_eq!(b, (0..10).collect::<Vec<_>>());
        assert!(batch_sampler(3, 4, 0, 0, 0).is_err());
    }

    #[test]
    fn sampler_is_deterministic_per_coordinate() {
        assert_eq!(batch_sampler(100, 8, 5, 2, 7).unwrap(), batch_sampler(100, 8, 5, 2, 7).unwrap());
        assert_ne!(batch_sampler(100, 8, 5, 2, 7).unwrap(), batch_sampler(100, 8, 5, 2, 8).unwrap());
    }

    #[test]
    fn sampler_is_uniform() {
        let (n, b, draws) = (50usize, 5usize, 10_000usize);
        let mut counts = vec![0f64; n];
        for it in 0..draws {
            for i in batch_sampler(n, b, 1, 0, it).unwrap() {
                counts[i] += 1.0;
            }
        }
        let p = b as f64 / n as f64;
        let (mean, sd) = (draws as f64 * p, (draws as f64 * p * (1.0 - p)).sqrt());
        // chi-square with 49 dof: mean 49, sd ~9.9
        let chi2: f64 = counts.iter().map(|c| ((c - mean) / sd).powi(2)).sum();
        assert!(chi2 < 95.0, "chi2 {chi2}");
    }

    #[test]
    fn scaled_schedule_keeps_ratios() {
        let c = TrainConfig::default().scaled(20);
        assert_eq!(
            (c.lr_decay_epoch, c.label_refresh_period, c.global_loss_start_epoch, c.joint_similarity_start_epoch),
            (8, 1, 2, 6)
        );
    }

    #[test]
    fn ablation_flags() {
        let sac = Ablation::Sac.flags();
        assert!(sac.use_sac && !sac.use_mtc);
        let base = Ablation::Baseline.flags();
        assert!(!base.use_sac && base.use_mtc && !base.use_temporal_in_cluster);
        let cfg = TrainConfig::default().with_ablation(Ablation::Baseline);
        assert!(!cfg.joint_active(99) && cfg.global_active(10) && !cfg.global_active(9));
    }

    #[test]
    fn config_from_kv() {
        let kv = KeyValues::parse("total_epochs=20\nscale_schedule=true\nmode=mtc\nlr=0.05\njoint_eps=0.5\n").unwrap();
        let c = TrainConfig::from_kv(&kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(c.total_epochs, 20);
        assert_eq!(c.global_loss_start_epoch, 2);
        assert!(c.flags.use_mtc && !c.flags.use_sac);
        assert_eq!(c.joint_dbscan.eps, 0.5);
        assert_eq!(c.lr, 0.05);
    }
}
