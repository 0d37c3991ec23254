//! Synthetic camera networks with known identities, transit times and
//! per-camera appearance styles.
//!
//! Each person gets an appearance prototype. A camera applies its style
//! (a rotation followed by a bias shift) and Gaussian noise is added per
//! image. Visit times are simulated per person: camera `c` is visited at
//! `T0 + o_c` with `o_c ~ Normal(mean[c][0], std[c][0])`, and the images of
//! one visit are `track_spacing` frames apart. The signed interval between
//! cameras `a` and `b` is therefore `Normal(mean[a][0] - mean[b][0],
//! sqrt(std[a][0]² + std[b][0]²))`, which the transit matrices must match.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal as NormalCdf};

use crate::config::{format_matrix, KeyValues};
use crate::data::{Dataset, Domain, SampleMeta};
use crate::error::{Error, Result};
use crate::matrix::{axpy, normalized, Matrix};
use crate::temporal::{BinSpec, CameraPair, TemporalModel};

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub num_persons: usize,
    pub num_cameras: usize,
    pub images_per_person_per_camera: usize,
    pub feature_dim: usize,
    /// Expected L2 norm of the per-image appearance noise.
    pub appearance_spread: f64,
    /// Fraction of persons that belong to a near-identical twin pair.
    pub twin_fraction: f64,
    /// Twin prototype distance as a fraction of `appearance_spread`; must be < 1.
    pub twin_distance: f64,
    /// `transit_mean[a][b]`: expected `fid(at a) - fid(at b)` in frames.
    pub transit_mean: Vec<Vec<f64>>,
    pub transit_std: Vec<Vec<f64>>,
    /// Norm of each camera's bias shift.
    pub camera_style_strength: f64,
    /// Largest Givens angle (radians) in each camera's style rotation.
    pub style_rotation: f64,
    /// Frames between consecutive images of one visit.
    pub track_spacing: u64,
    /// Visit start times are spread uniformly over this many frames.
    pub time_horizon: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig::with_camera_offsets(
            20,
            &[0.0, -500.0, -1200.0],
            &[0.0, 50.0, 80.0],
            4,
            0,
        )
    }
}

impl WorldConfig {
    /// Consistent transit matrices from per-camera visit offsets relative to
    /// camera 0 (`offsets[0]` and `jitter[0]` are ignored and taken as 0).
    pub fn transit_from_offsets(offsets: &[f64], jitter: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let c = offsets.len();
        let off = |k: usize| if k == 0 { 0.0 } else { offsets[k] };
        let jit = |k: usize| if k == 0 { 0.0 } else { jitter[k] };
        let mut mean = vec![vec![0.0; c]; c];
        let mut std = vec![vec![0.0; c]; c];
        for a in 0..c {
            for b in 0..c {
                if a != b {
                    mean[a][b] = off(a) - off(b);
                    std[a][b] = (jit(a).powi(2) + jit(b).powi(2)).sqrt();
                }
            }
        }
        (mean, std)
    }

    pub fn with_camera_offsets(
        num_persons: usize,
        offsets: &[f64],
        jitter: &[f64],
        images_per_person_per_camera: usize,
        seed: u64,
    ) -> Self {
        let (transit_mean, transit_std) = Self::transit_from_offsets(offsets, jitter);
        WorldConfig {
            num_persons,
            num_cameras: offsets.len(),
            images_per_person_per_camera,
            feature_dim: 32,
            appearance_spread: 0.5,
            twin_fraction: 0.0,
            twin_distance: 0.5,
            transit_mean,
            transit_std,
            camera_style_strength: 1.0,
            style_rotation: 0.3,
            track_spacing: 5,
            time_horizon: 200_000.0,
            seed,
        }
    }

    pub fn num_samples(&self) -> usize {
        self.num_persons * self.num_cameras * self.images_per_person_per_camera
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_persons == 0 || self.num_cameras == 0 {
            return Err(Error::Argument("world needs at least one person and one camera".into()));
        }
        if self.images_per_person_per_camera == 0 || self.feature_dim == 0 {
            return Err(Error::Argument("images_per_person_per_camera and feature_dim must be positive".into()));
        }
        let c = self.num_cameras;
        let square = |m: &Vec<Vec<f64>>| m.len() == c && m.iter().all(|r| r.len() == c);
        if !square(&self.transit_mean) || !square(&self.transit_std) {
            return Err(Error::Argument(format!("transit matrices must be {c}x{c}")));
        }
        let nonneg = |x: f64| x >= 0.0 && x.is_finite();
        if !nonneg(self.appearance_spread)
            || !nonneg(self.camera_style_strength)
            || !nonneg(self.style_rotation)
            || !(self.time_horizon > 0.0 && self.time_horizon.is_finite())
        {
            return Err(Error::Argument("spreads, strengths and horizon must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.twin_fraction) {
            return Err(Error::Argument(format!("twin_fraction {} not in [0,1]", self.twin_fraction)));
        }
        if !(0.0..1.0).contains(&self.twin_distance) {
            return Err(Error::Argument(format!("twin_distance {} not in [0,1)", self.twin_distance)));
        }
        let (m, s) = (&self.transit_mean, &self.transit_std);
        for a in 0..c {
            for b in 0..c {
                if !m[a][b].is_finite() || !nonneg(s[a][b]) {
                    return Err(Error::Argument(format!("transit ({a},{b}) must be finite with std >= 0")));
                }
                if a == b {
                    continue;
                }
                let tol = 1e-6 * (1.0 + m[a][b].abs() + s[a][b]);
                let exp_mean = m[a][0] - m[b][0];
                let exp_std = (s[a][0].powi(2) + s[b][0].powi(2)).sqrt();
                if (m[a][b] + m[b][a]).abs() > tol || (s[a][b] - s[b][a]).abs() > tol {
                    return Err(Error::Argument(format!(
                        "transit ({a},{b}) must be antisymmetric in mean and symmetric in std"
                    )));
                }
                if (m[a][b] - exp_mean).abs() > tol || (s[a][b] - exp_std).abs() > tol {
                    return Err(Error::Argument(format!(
                        "transit ({a},{b}) = N({}, {}) is not realisable from camera-0 offsets; expected N({exp_mean}, {exp_std})",
                        m[a][b], s[a][b]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = WorldConfig::default();
        let num_cameras = kv.get_or("num_cameras", d.num_cameras)?;
        let (mut transit_mean, mut transit_std) = (kv.get_matrix("transit_mean")?, kv.get_matrix("transit_std")?);
        if let Some(off) = kv.raw("transit_offsets") {
            let parse = |s: &str| -> Result<Vec<f64>> {
                s.split(',')
                    .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("bad transit entry `{x}`"))))
                    .collect()
            };
            let offsets = parse(off)?;
            let jitter = match kv.raw("transit_jitter") {
                Some(j) => parse(j)?,
                None => vec![0.0; offsets.len()],
            };
            if offsets.len() != num_cameras || jitter.len() != num_cameras {
                return Err(Error::Config("transit_offsets/transit_jitter need one entry per camera".into()));
            }
            let (m, s) = Self::transit_from_offsets(&offsets, &jitter);
            transit_mean.get_or_insert(m);
            transit_std.get_or_insert(s);
        }
        let (transit_mean, transit_std) = match (transit_mean, transit_std) {
            (Some(m), Some(s)) => (m, s),
            (None, None) if num_cameras == d.num_cameras => (d.transit_mean.clone(), d.transit_std.clone()),
            _ => return Err(Error::Config("give transit_mean and transit_std, or transit_offsets".into())),
        };
        let cfg = WorldConfig {
            num_persons: kv.get_or("num_persons", d.num_persons)?,
            num_cameras,
            images_per_person_per_camera: kv.get_or("images_per_person_per_camera", d.images_per_person_per_camera)?,
            feature_dim: kv.get_or("feature_dim", d.feature_dim)?,
            appearance_spread: kv.get_or("appearance_spread", d.appearance_spread)?,
            twin_fraction: kv.get_or("twin_fraction", d.twin_fraction)?,
            twin_distance: kv.get_or("twin_distance", d.twin_distance)?,
            transit_mean,
            transit_std,
            camera_style_strength: kv.get_or("camera_style_strength", d.camera_style_strength)?,
            style_rotation: kv.get_or("style_rotation", d.style_rotation)?,
            track_spacing: kv.get_or("track_spacing", d.track_spacing)?,
            time_horizon: kv.get_or("time_horizon", d.time_horizon)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A camera's appearance transform `x ↦ R·x + b` with orthogonal `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraStyle {
    pub rotation: Matrix,
    pub bias: Vec<f64>,
}

impl CameraStyle {
    pub fn identity(dim: usize) -> Self {
        CameraStyle {
            rotation: Matrix::identity(dim),
            bias: vec![0.0; dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.rotation.mul_vec(x);
        axpy(1.0, &self.bias, &mut y);
        y
    }

    pub fn invert(&self, y: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = y.iter().zip(&self.bias).map(|(a, b)| a - b).collect();
        self.rotation.tr_mul_vec(&centered)
    }

    /// Random style: Givens rotations over two random coordinate pairings
    /// with angles in `[-max_angle, max_angle]`, and a bias of norm `strength`.
    pub fn random(dim: usize, strength: f64, max_angle: f64, rng: &mut impl Rng) -> Self {
        let mut rot = Matrix::identity(dim);
        let mut coords: Vec<usize> = (0..dim).collect();
        for _ in 0..2 {
            coords.shuffle(rng);
            for pair in coords.chunks_exact(2) {
                let theta = rng.random_range(-1.0..=1.0) * max_angle;
                let (c, s) = (theta.cos(), theta.sin());
                for col in 0..dim {
                    let (ri, rj) = (rot[(pair[0], col)], rot[(pair[1], col)]);
                    rot[(pair[0], col)] = c * ri - s * rj;
                    rot[(pair[1], col)] = s * ri + c * rj;
                }
            }
        }
        let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let bias = normalized(&dir)
            .unwrap_or_else(|| vec![0.0; dim])
            .into_iter()
            .map(|v| v * strength)
            .collect();
        CameraStyle { rotation: rot, bias }
    }
}

/// The per-camera style family of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraStyles {
    pub styles: Vec<CameraStyle>,
}

impl CameraStyles {
    pub fn identity(num_cameras: usize, dim: usize) -> Self {
        CameraStyles {
            styles: vec![CameraStyle::identity(dim); num_cameras],
        }
    }

    /// Bias-only styles estimated from the data: camera mean minus global mean.
    pub fn estimate_mean_shift(d: &Dataset) -> Self {
        let dim = d.feature_dim();
        let mut global = vec![0.0; dim];
        let mut sums = vec![vec![0.0; dim]; d.num_cameras];
        let mut counts = vec![0usize; d.num_cameras];
        for (m, row) in d.metas.iter().zip(d.features.raw.iter_rows()) {
            axpy(1.0, row, &mut sums[m.camera_id]);
            axpy(1.0, row, &mut global);
            counts[m.camera_id] += 1;
        }
        let n = d.len().max(1) as f64;
        let styles = sums
            .into_iter()
            .zip(counts)
            .map(|(s, c)| {
                let bias = if c == 0 {
                    vec![0.0; dim]
                } else {
                    s.iter().zip(&global).map(|(a, g)| a / c as f64 - g / n).collect()
                };
                CameraStyle {
                    rotation: Matrix::identity(dim),
                    bias,
                }
            })
            .collect();
        CameraStyles { styles }
    }

    pub fn len(&self) -> usize {
        self.styles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.styles.is_empty()
    }

    /// Re-render `x`, captured at camera `from`, in the style of camera `to`.
    pub fn transfer(&self, x: &[f64], from: usize, to: usize) -> Vec<f64> {
        self.styles[to].apply(&self.styles[from].invert(x))
    }
}

/// Everything the generator knows that the dataset does not reveal.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub prototypes: Matrix,
    pub twins: Vec<(u32, u32)>,
    pub transit_mean: Vec<Vec<f64>>,
    pub transit_std: Vec<Vec<f64>>,
    pub styles: CameraStyles,
    pub images_per_person_per_camera: usize,
    pub track_spacing: u64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generate a dataset and its ground truth. Deterministic in `cfg.seed`.
pub fn generate(cfg: &WorldConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let (p_count, c_count, dim) = (cfg.num_persons, cfg.num_cameras, cfg.feature_dim);

    let mut rng = stream_rng(cfg.seed, 1);
    let proto_scale = 1.0 / (dim as f64).sqrt();
    let mut prototypes = Matrix::zeros(p_count, dim);
    for v in prototypes.as_mut_slice() {
        *v = rng.sample::<f64, _>(StandardNormal) * proto_scale;
    }

    let mut order: Vec<u32> = (0..p_count as u32).collect();
    order.shuffle(&mut rng);
    let n_twin_pairs = ((cfg.twin_fraction * p_count as f64) / 2.0).floor() as usize;
    let twins: Vec<(u32, u32)> = order
        .chunks_exact(2)
        .take(n_twin_pairs)
        .map(|c| (c[0].min(c[1]), c[0].max(c[1])))
        .collect();
    let gap = cfg.twin_distance * cfg.appearance_spread;
    for &(p, q) in &twins {
        let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let dir = normalized(&dir).unwrap_or_else(|| vec![0.0; dim]);
        let base = prototypes.row(p as usize).to_vec();
        let row = prototypes.row_mut(q as usize);
        for ((r, b), u) in row.iter_mut().zip(&base).zip(&dir) {
            *r = b + gap * u;
        }
    }

    let mut style_rng = stream_rng(cfg.seed, 2);
    let styles = CameraStyles {
        styles: (0..c_count)
            .map(|_| CameraStyle::random(dim, cfg.camera_style_strength, cfg.style_rotation, &mut style_rng))
            .collect(),
    };

    let mut time_rng = stream_rng(cfg.seed, 3);
    let offsets: Vec<Normal<f64>> = (0..c_count)
        .map(|c| {
            let (mu, sd) = if c == 0 { (0.0, 0.0) } else { (cfg.transit_mean[c][0], cfg.transit_std[c][0]) };
            Normal::new(mu, sd).expect("validated transit parameters")
        })
        .collect();
    let margin = (0..c_count)
        .map(|c| cfg.transit_mean[c][0].abs() + 6.0 * cfg.transit_std[c][0])
        .fold(0.0, f64::max)
        + 1.0;

    let mut noise_rng = stream_rng(cfg.seed, 4);
    let noise_scale = cfg.appearance_spread / (dim as f64).sqrt();
    let n = cfg.num_samples();
    let mut metas = Vec::with_capacity(n);
    let mut raw = Matrix::zeros(n, dim);
    for p in 0..p_count {
        let start = margin + time_rng.random_range(0.0..cfg.time_horizon);
        for c in 0..c_count {
            let visit = (start + offsets[c].sample(&mut time_rng)).round().max(0.0) as u64;
            let styled = styles.styles[c].apply(prototypes.row(p));
            for k in 0..cfg.images_per_person_per_camera {
                let id = metas.len();
                metas.push(SampleMeta {
                    sample_id: id,
                    person_id: Some(p as u32),
                    camera_id: c,
                    frame_id: visit + k as u64 * cfg.track_spacing,
                });
                for (out, s) in raw.row_mut(id).iter_mut().zip(&styled) {
                    let noisy = s + noise_rng.sample::<f64, _>(StandardNormal) * noise_scale;
                    // keep features exactly representable in the f32 file format
                    *out = f64::from(noisy as f32);
                }
            }
        }
    }

    let dataset = Dataset::new(metas, raw, c_count, Domain::Target)?;
    let gt = GroundTruth {
        prototypes,
        twins,
        transit_mean: cfg.transit_mean.clone(),
        transit_std: cfg.transit_std.clone(),
        styles,
        images_per_person_per_camera: cfg.images_per_person_per_camera,
        track_spacing: cfg.track_spacing,
    };
    Ok((dataset, gt))
}

/// Discretise the true transit distributions onto `binning`.
///
/// Cross-camera pairs get their Normal law clipped to ±3σ and to the
/// support, renormalised to mass 1. Same-camera pairs get the exact
/// distribution of within-visit offsets. Pairs without mass are EMPTY.
pub fn true_temporal_model(gt: &GroundTruth, binning: BinSpec) -> Result<TemporalModel> {
    binning.validate()?;
    let c = gt.transit_mean.len();
    let nb = binning.num_bins();
    let mut hist: BTreeMap<CameraPair, Option<Vec<f64>>> = BTreeMap::new();
    for a in 0..c {
        for b in a..c {
            let mut h = vec![0.0; nb];
            if a == b {
                let m = gt.images_per_person_per_camera as i64;
                for k in 0..m {
                    for l in (0..m).filter(|&l| l != k) {
                        if let Some(bin) = binning.bin_index(((k - l) * gt.track_spacing as i64) as f64) {
                            h[bin] += 1.0;
                        }
                    }
                }
            } else {
                let (mu, sd) = (gt.transit_mean[a][b], gt.transit_std[a][b]);
                if sd == 0.0 {
                    if let Some(bin) = binning.bin_index(mu) {
                        h[bin] = 1.0;
                    }
                } else {
                    let law = NormalCdf::new(mu, sd).map_err(|e| Error::Argument(e.to_string()))?;
                    let (lo_clip, hi_clip) = (mu - 3.0 * sd, mu + 3.0 * sd);
                    for (k, v) in h.iter_mut().enumerate() {
                        let lo = binning.bin_lower(k).max(lo_clip);
                        let hi = binning.bin_upper(k).min(hi_clip);
                        if hi > lo {
                            *v = law.cdf(hi) - law.cdf(lo);
                        }
                    }
                }
            }
            let total: f64 = h.iter().sum();
            let entry = (total > 0.0).then(|| h.iter().map(|v| v / total).collect());
            hist.insert((a, b), entry);
        }
    }
    TemporalModel::from_histograms(binning, c, hist)
}

impl GroundTruth {
    pub fn twin_of(&self, person: u32) -> Option<u32> {
        self.twins.iter().find_map(|&(p, q)| {
            if p == person {
                Some(q)
            } else if q == person {
                Some(p)
            } else {
                None
            }
        })
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        writeln!(s, "num_persons={}", self.prototypes.rows()).unwrap();
        writeln!(s, "num_cameras={}", self.styles.len()).unwrap();
        writeln!(s, "feature_dim={}", self.prototypes.cols()).unwrap();
        writeln!(s, "images_per_person_per_camera={}", self.images_per_person_per_camera).unwrap();
        writeln!(s, "track_spacing={}", self.track_spacing).unwrap();
        writeln!(s, "transit_mean={}", format_matrix(&self.transit_mean)).unwrap();
        writeln!(s, "transit_std={}", format_matrix(&self.transit_std)).unwrap();
        let twins: Vec<String> = self.twins.iter().map(|(p, q)| format!("{p}:{q}")).collect();
        writeln!(s, "twins={}", twins.join(",")).unwrap();
        for (p, row) in self.prototypes.iter_rows().enumerate() {
            writeln!(s, "prototype.{p}={}", join(row)).unwrap();
        }
        for (c, st) in self.styles.styles.iter().enumerate() {
            writeln!(s, "style.{c}.bias={}", join(&st.bias)).unwrap();
            writeln!(s, "style.{c}.rotation={}", join(st.rotation.as_slice())).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let need = |k: &str| kv.raw(k).ok_or_else(|| Error::Config(format!("ground truth missing `{k}`")));
        let floats = |k: &str| -> Result<Vec<f64>> {
            let v = need(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|x| x.parse().map_err(|_| Error::Config(format!("`{k}`: bad value `{x}`"))))
                .collect()
        };
        let count = |k: &str| -> Result<usize> { kv.get(k)?.ok_or_else(|| Error::Config(format!("ground truth missing `{k}`"))) };
        let (p, c, dim) = (count("num_persons")?, count("num_cameras")?, count("feature_dim")?);
        let mut proto = Vec::with_capacity(p * dim);
        for i in 0..p {
            proto.extend(floats(&format!("prototype.{i}"))?);
        }
        let styles = (0..c)
            .map(|i| {
                Ok(CameraStyle {
                    bias: floats(&format!("style.{i}.bias"))?,
                    rotation: Matrix::from_vec(dim, dim, floats(&format!("style.{i}.rotation"))?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let twins = need("twins")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|t| {
                t.split_once(':')
                    .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                    .ok_or_else(|| Error::Config(format!("bad twin entry `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let gt = GroundTruth {
            prototypes: Matrix::from_vec(p, dim, proto)?,
            twins,
            transit_mean: kv.get_matrix("transit_mean")?.ok_or_else(|| Error::Config("missing transit_mean".into()))?,
            transit_std: kv.get_matrix("transit_std")?.ok_or_else(|| Error::Config("missing transit_std".into()))?,
            styles: CameraStyles { styles },
            images_per_person_per_camera: count("images_per_person_per_camera")?,
            track_spacing: kv.get_or("track_spacing", 0)?,
        };
        kv.finish()?;
        Ok(gt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
