//! Camera-pair frame-interval histograms and the temporal consistency score.
//!
//! For every unordered camera pair `(a, b)` with `a <= b` the model stores a
//! histogram over signed intervals `fid_i - fid_j` where `i` is seen at `a`
//! and `j` at `b`. Reading the pair in the other orientation flips the sign
//! of the interval.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{Dataset, SampleMeta};
use crate::error::{Error, Result};

/// Histogram binning over the symmetric support `[-max_interval, max_interval]`.
///
/// Bin `k` covers `[-max_interval + k·bin_width, -max_interval + (k+1)·bin_width)`;
/// the last bin also catches an interval equal to `+max_interval`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinSpec {
    /// Frames per bin.
    pub bin_width: f64,
    /// Half-width of the support, in frames.
    pub max_interval: f64,
}

impl Default for BinSpec {
    fn default() -> Self {
        BinSpec {
            bin_width: 100.0,
            max_interval: 3000.0,
        }
    }
}

impl BinSpec {
    pub fn new(bin_width: f64, max_interval: f64) -> Result<Self> {
        let b = BinSpec {
            bin_width,
            max_interval,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bin_width > 0.0 && self.bin_width.is_finite()) {
            return Err(Error::Argument(format!("bin_width must be > 0, got {}", self.bin_width)));
        }
        if !(self.max_interval > 0.0 && self.max_interval.is_finite()) {
            return Err(Error::Argument(format!(
                "max_interval must be > 0, got {}",
                self.max_interval
            )));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        ((2.0 * self.max_interval / self.bin_width).ceil() as usize).max(1)
    }

    /// Bin holding `interval`, or `None` outside the support.
    pub fn bin_index(&self, interval: f64) -> Option<usize> {
        if !(interval.abs() <= self.max_interval) {
            return None;
        }
        let k = ((interval + self.max_interval) / self.bin_width).floor() as usize;
        Some(k.min(self.num_bins() - 1))
    }

    pub fn bin_lower(&self, k: usize) -> f64 {
        -self.max_interval + k as f64 * self.bin_width
    }

    pub fn bin_upper(&self, k: usize) -> f64 {
        (self.bin_lower(k) + self.bin_width).min(self.max_interval)
    }

    pub fn bin_center(&self, k: usize) -> f64 {
        self.bin_lower(k) + 0.5 * self.bin_width
    }
}

/// Unordered camera pair, stored with `lo <= hi`.
pub type CameraPair = (usize, usize);

/// Result of a temporal-consistency lookup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TsValue {
    Score(f64),
    /// No same-label pairs were observed for this camera pair.
    EmptyPair(CameraPair),
}

/// Neutral score returned for camera pairs without histogram support.
pub const NEUTRAL_TS: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalModel {
    pub binning: BinSpec,
    pub num_cameras: usize,
    /// Frames; 0 for a raw (unsmoothed) model.
    pub smoothing_sigma: f64,
    /// Divide each histogram by its peak bin before use.
    pub max_normalize: bool,
    /// Score same-camera pairs from the `(a, a)` histograms; otherwise they
    /// get [`NEUTRAL_TS`].
    pub intra_camera: bool,
    /// `None` marks an EMPTY pair.
    histograms: BTreeMap<CameraPair, Option<Vec<f64>>>,
    peaks: BTreeMap<CameraPair, f64>,
}

impl TemporalModel {
    /// Build a model from explicit histograms. Pairs absent from the map are EMPTY.
    pub fn from_histograms(
        binning: BinSpec,
        num_cameras: usize,
        histograms: BTreeMap<CameraPair, Option<Vec<f64>>>,
    ) -> Result<Self> {
        binning.validate()?;
        let nb = binning.num_bins();
        let mut full = BTreeMap::new();
        for a in 0..num_cameras {
            for b in a..num_cameras {
                full.insert((a, b), None);
            }
        }
        for (pair, h) in histograms {
            if pair.0 > pair.1 || pair.1 >= num_cameras {
                return Err(Error::Argument(format!("invalid camera pair {pair:?}")));
            }
            if let Some(h) = &h {
                if h.len() != nb {
                    return Err(Error::Dimension(format!(
                        "pair {pair:?} has {} bins, binning has {nb}",
                        h.len()
                    )));
                }
                if h.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::Validation(format!("pair {pair:?} has a negative or non-finite bin")));
                }
            }
            full.insert(pair, h);
        }
        let mut m = TemporalModel {
            binning,
            num_cameras,
            smoothing_sigma: 0.0,
            max_normalize: true,
            intra_camera: true,
            histograms: full,
            peaks: BTreeMap::new(),
        };
        m.refresh_peaks();
        Ok(m)
    }

    fn refresh_peaks(&mut self) {
        self.peaks = self
            .histograms
            .iter()
            .filter_map(|(&p, h)| h.as_ref().map(|h| (p, h.iter().copied().fold(0.0, f64::max))))
            .collect();
    }

    pub fn histogram(&self, a: usize, b: usize) -> Option<&[f64]> {
        self.histograms
            .get(&(a.min(b), a.max(b)))
            .and_then(|h| h.as_deref())
    }

    pub fn pairs(&self) -> impl Iterator<Item = (CameraPair, Option<&[f64]>)> {
        self.histograms.iter().map(|(&p, h)| (p, h.as_deref()))
    }

    pub fn empty_pairs(&self) -> Vec<CameraPair> {
        self.histograms
            .iter()
            .filter(|(_, h)| h.is_none())
            .map(|(&p, _)| p)
            .collect()
    }

    /// Histogram value at a signed interval for the stored orientation `(a, b)`, `a <= b`.
    fn lookup(&self, pair: CameraPair, interval: f64) -> TsValue {
        let Some(h) = self.histograms.get(&pair).and_then(|h| h.as_ref()) else {
            return TsValue::EmptyPair(pair);
        };
        let Some(k) = self.binning.bin_index(interval) else {
            return TsValue::Score(0.0);
        };
        let v = h[k];
        if self.max_normalize {
            let peak = self.peaks[&pair];
            TsValue::Score(if peak > 0.0 { v / peak } else { 0.0 })
        } else {
            TsValue::Score(v)
        }
    }

    /// Temporal consistency with EMPTY pairs reported rather than defaulted.
    pub fn ts_value(&self, mi: &SampleMeta, mj: &SampleMeta) -> TsValue {
        let (a, b) = (mi.camera_id, mj.camera_id);
        let delta = mi.frame_id as f64 - mj.frame_id as f64;
        match a.cmp(&b) {
            std::cmp::Ordering::Less => self.lookup((a, b), delta),
            std::cmp::Ordering::Greater => self.lookup((b, a), -delta),
            // both orientations are counted for same-camera pairs, so read
            // the non-negative side to keep the score exactly symmetric
            std::cmp::Ordering::Equal if self.intra_camera => self.lookup((a, a), delta.abs()),
            std::cmp::Ordering::Equal => TsValue::Score(NEUTRAL_TS),
        }
    }

    /// Temporal consistency in `[0, 1]` (when max-normalised); EMPTY camera
    /// pairs score [`NEUTRAL_TS`].
    pub fn ts(&self, mi: &SampleMeta, mj: &SampleMeta) -> f64 {
        match self.ts_value(mi, mj) {
            TsValue::Score(s) => s,
            TsValue::EmptyPair(_) => NEUTRAL_TS,
        }
    }

    /// Gaussian-smooth every histogram. `sigma` is in frames.
    ///
    /// Each source bin spreads its mass over a kernel truncated at ±3σ and at
    /// the support edges and renormalised over the bins it reaches, so total
    /// mass is conserved. `sigma == 0` returns the input unchanged.
    pub fn smooth(&self, sigma: f64) -> Result<TemporalModel> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Argument(format!("sigma must be >= 0, got {sigma}")));
        }
        let mut out = self.clone();
        out.smoothing_sigma = sigma;
        if sigma == 0.0 {
            return Ok(out);
        }
        let kernel = gaussian_kernel(sigma / self.binning.bin_width);
        for h in out.histograms.values_mut().flatten() {
            *h = convolve_conserving(h, &kernel);
        }
        out.refresh_peaks();
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "bin_width={}", self.binning.bin_width).unwrap();
        writeln!(s, "max_interval={}", self.binning.max_interval).unwrap();
        writeln!(s, "num_cameras={}", self.num_cameras).unwrap();
        writeln!(s, "smoothing_sigma={}", self.smoothing_sigma).unwrap();
        writeln!(s, "max_normalize={}", self.max_normalize).unwrap();
        writeln!(s, "intra_camera={}", self.intra_camera).unwrap();
        for (&(a, b), h) in &self.histograms {
            match h {
                None => writeln!(s, "pair={a},{b} empty").unwrap(),
                Some(h) => {
                    writeln!(s, "pair={a},{b}").unwrap();
                    for (k, v) in h.iter().enumerate() {
                        writeln!(s, "{},{}", self.binning.bin_center(k), v).unwrap();
                    }
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::format("temporal model", format!("line {line}"), msg);
        let mut header: HashMap<&str, &str> = HashMap::new();
        let mut pairs: BTreeMap<CameraPair, Option<Vec<f64>>> = BTreeMap::new();
        let mut current: Option<CameraPair> = None;
        for (n, line) in text.lines().enumerate().map(|(n, l)| (n + 1, l.trim())) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("pair=") {
                let (ids, empty) = match rest.split_once(' ') {
                    Some((ids, "empty")) => (ids, true),
                    Some(_) => return Err(bad(n, format!("bad pair line `{line}`"))),
                    None => (rest, false),
                };
                let (a, b) = ids
                    .split_once(',')
                    .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                    .ok_or_else(|| bad(n, format!("bad camera pair `{ids}`")))?;
                pairs.insert((a, b), if empty { None } else { Some(Vec::new()) });
                current = (!empty).then_some((a, b));
            } else if let Some((k, v)) = line.split_once('=') {
                if current.is_some() {
                    return Err(bad(n, "header key after histogram data".into()));
                }
                header.insert(k, v);
            } else {
                let pair = current.ok_or_else(|| bad(n, "bin row outside a pair".into()))?;
                let value = line
                    .split_once(',')
                    .and_then(|(_, v)| v.parse::<f64>().ok())
                    .ok_or_else(|| bad(n, format!("bad bin row `{line}`")))?;
                pairs.get_mut(&pair).unwrap().as_mut().unwrap().push(value);
            }
        }
        let get = |k: &str| -> Result<&str> {
            header
                .get(k)
                .copied()
                .ok_or_else(|| Error::format("temporal model", "header", format!("missing `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::format("temporal model", "header", format!("bad `{k}`")))
        };
        let flag = |k: &str| -> Result<bool> {
            get(k)?
                .parse()
                .map_err(|_| Error::format("temporal model", "header", format!("bad `{k}`")))
        };
        let binning = BinSpec::new(num("bin_width")?, num("max_interval")?)?;
        let mut m = TemporalModel::from_histograms(binning, num("num_cameras")? as usize, pairs)?;
        m.smoothing_sigma = num("smoothing_sigma")?;
        m.max_normalize = flag("max_normalize")?;
        m.intra_camera = flag("intra_camera")?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Sum of absolute bin differences for one camera pair.
    pub fn l1_distance(&self, other: &TemporalModel, pair: CameraPair) -> Option<f64> {
        let (a, b) = (self.histogram(pair.0, pair.1)?, other.histogram(pair.0, pair.1)?);
        (a.len() == b.len()).then(|| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
    }
}

/// Discrete Gaussian weights for offsets `-r..=r` bins, `r = ceil(3σ)`,
/// normalised to sum 1. `sigma_bins` must be positive.
pub fn gaussian_kernel(sigma_bins: f64) -> Vec<f64> {
    let r = (3.0 * sigma_bins).ceil().max(1.0) as i64;
    let mut w: Vec<f64> = (-r..=r)
        .map(|k| {
            let x = k as f64;
            if x.abs() > 3.0 * sigma_bins && k != 0 {
                0.0
            } else {
                (-0.5 * x * x / (sigma_bins * sigma_bins)).exp()
            }
        })
        .collect();
    let z: f64 = w.iter().sum();
    for x in &mut w {
        *x /= z;
    }
    w
}

fn convolve_conserving(h: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = h.len() as i64;
    let r = (kernel.len() / 2) as i64;
    let mut out = vec![0.0; h.len()];
    for (src, &mass) in h.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        let src = src as i64;
        let lo = (src - r).max(0);
        let hi = (src + r).min(n - 1);
        let reach: f64 = (lo..=hi).map(|t| kernel[(t - src + r) as usize]).sum();
        for t in lo..=hi {
            out[t as usize] += mass * kernel[(t - src + r) as usize] / reach;
        }
    }
    out
}

/// Estimate raw interval histograms from labelled samples.
///
/// For every camera pair `(a, b)`, `a <= b`, all ordered same-label pairs
/// `(i at a, j at b)` with `i != j` contribute their interval `fid_i - fid_j`;
/// the histogram is normalised by the number of such pairs falling inside
/// the support. Samples labelled `None` (noise) contribute nothing.
pub fn estimate_histograms(
    metas: &[SampleMeta],
    labels: &[Option<usize>],
    num_cameras: usize,
    binning: BinSpec,
) -> Result<TemporalModel> {
    binning.validate()?;
    if metas.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} samples but {} labels",
            metas.len(),
            labels.len()
        )));
    }
    if metas.len() < 2 {
        return Err(Error::Argument("histogram estimation needs at least 2 samples".into()));
    }
    if let Some(m) = metas.iter().find(|m| m.camera_id >= num_cameras) {
        return Err(Error::Validation(format!("sample {} has camera {}", m.sample_id, m.camera_id)));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = l {
            groups.entry(*l).or_default().push(i);
        }
    }
    let groups: Vec<Vec<usize>> = groups.into_values().filter(|g| g.len() > 1).collect();
    let nb = binning.num_bins();

    let pairs: Vec<CameraPair> = (0..num_cameras)
        .flat_map(|a| (a..num_cameras).map(move |b| (a, b)))
        .collect();
    let histograms = pairs
        .par_iter()
        .map(|&(a, b)| {
            let mut counts = vec![0u64; nb];
            let mut total = 0u64;
            for g in &groups {
                for &i in g.iter().filter(|&&i| metas[i].camera_id == a) {
                    for &j in g.iter().filter(|&&j| metas[j].camera_id == b && j != i) {
                        let delta = metas[i].frame_id as f64 - metas[j].frame_id as f64;
                        if let Some(k) = binning.bin_index(delta) {
                            counts[k] += 1;
                            total += 1;
                        }
                    }
                }
            }
            let h = (total > 0).then(|| counts.iter().map(|&c| c as f64 / total as f64).collect());
            ((a, b), h)
        })
        .collect();
    TemporalModel::from_histograms(binning, num_cameras, histograms)
}

/// Convenience wrapper over a dataset with labels given per sample.
pub fn estimate_from_dataset(d: &Dataset, labels: &[Option<usize>], binning: BinSpec) -> Result<TemporalModel> {
    estimate_histograms(&d.metas, labels, d.num_cameras, binning)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(id: usize, cam: usize, fid: u64) -> SampleMeta {
        SampleMeta {
            sample_id: id,
            person_id: None,
            camera_id: cam,
            frame_id: fid,
        }
    }

    #[test]
    fn binning_edges() {
        let b = BinSpec::default();
        assert_eq!(b.num_bins(), 60);
        assert_eq!(b.bin_index(0.0), Some(30));
        assert_eq!(b.bin_index(-3000.0), Some(0));
        assert_eq!(b.bin_index(3000.0), Some(59));
        assert_eq!(b.bin_index(3000.5), None);
        let wide = BinSpec::new(10.0, 2.0).unwrap();
        assert_eq!(wide.num_bins(), 1);
        assert!(BinSpec::new(0.0, 1.0).is_err());
    }

    /// Cross-camera intervals {100, 100, 200, 300}, one label per pair.
    fn four_pair_model() -> TemporalModel {
        let metas: Vec<SampleMeta> = [(0, 1100), (1, 1000), (0, 2100), (1, 2000), (0, 3200), (1, 3000), (0, 4300), (1, 4000)]
            .iter()
            .enumerate()
            .map(|(i, &(c, f))| meta(i, c, f))
            .collect();
        let labels: Vec<Option<usize>> = (0..8).map(|i| Some(i / 2)).collect();
        estimate_histograms(&metas, &labels, 2, BinSpec::default()).unwrap()
    }

    #[test]
    fn four_interval_histogram() {
        let m = four_pair_model();
        let h = m.histogram(0, 1).unwrap();
        let b = m.binning;
        assert_eq!(h[b.bin_index(100.0).unwrap()], 0.5);
        assert_eq!(h[b.bin_index(200.0).unwrap()], 0.25);
        assert_eq!(h[b.bin_index(300.0).unwrap()], 0.25);
        assert_eq!(h.iter().sum::<f64>(), 1.0);
        assert_eq!(m.empty_pairs(), vec![(0, 0), (1, 1)]);
        // max-normalised lookup at 200 → 0.25 / 0.5
        assert_eq!(m.ts(&meta(0, 0, 1200), &meta(1, 1, 1000)), 0.5);
        assert_eq!(m.ts(&meta(0, 0, 1100), &meta(1, 1, 1000)), 1.0);
        assert_eq!(m.ts(&meta(1, 1, 1000), &meta(0, 0, 1100)), 1.0);
        assert_eq!(m.ts(&meta(0, 0, 9000), &meta(1, 1, 1000)), 0.0);
        assert_eq!(m.ts(&meta(0, 0, 10), &meta(1, 0, 20)), NEUTRAL_TS);
        assert_eq!(m.ts_value(&meta(0, 0, 10), &meta(1, 0, 20)), TsValue::EmptyPair((0, 0)));
    }

    #[test]
    fn single_pair_at_zero() {
        let metas = vec![meta(0, 0, 500), meta(1, 1, 500), meta(2, 1, 9000)];
        let m = estimate_histograms(&metas, &[Some(0), Some(0), None], 2, BinSpec::default()).unwrap();
        let h = m.histogram(0, 1).unwrap();
        let k = m.binning.bin_index(0.0).unwrap();
        assert_eq!(h[k], 1.0);
        assert_eq!(h.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn out_of_support_pairs_are_dropped_from_denominator() {
        let metas = vec![meta(0, 0, 10_000), meta(1, 1, 0), meta(2, 0, 150), meta(3, 1, 0)];
        let m = estimate_histograms(&metas, &[Some(0), Some(0), Some(1), Some(1)], 2, BinSpec::default()).unwrap();
        assert_eq!(m.histogram(0, 1).unwrap().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn sigma_zero_is_identity() {
        let m = four_pair_model();
        assert_eq!(m.smooth(0.0).unwrap().histogram(0, 1), m.histogram(0, 1));
        assert!(m.smooth(-1.0).is_err());
    }

    #[test]
    fn delta_smooths_to_kernel() {
        let b = BinSpec::default();
        let mut h = vec![0.0; b.num_bins()];
        h[30] = 1.0;
        let m = TemporalModel::from_histograms(b, 2, [((0, 1), Some(h))].into()).unwrap();
        let s = m.smooth(100.0).unwrap();
        let out = s.histogram(0, 1).unwrap();
        // direct evaluation of exp(-k²/2) for k in -3..=3, normalised
        let raw: Vec<f64> = (-3..=3).map(|k: i32| (-0.5 * f64::from(k * k)).exp()).collect();
        let z: f64 = raw.iter().sum();
        for (off, w) in (-3..=3).zip(&raw) {
            assert!((out[(30 + off) as usize] - w / z).abs() < 1e-15);
        }
        assert_eq!(out.iter().filter(|&&v| v > 0.0).count(), 7);
    }

    #[test]
    fn smoothing_conserves_mass_at_edges() {
        let b = BinSpec::default();
        let mut h = vec![0.0; b.num_bins()];
        h[0] = 0.7;
        h[59] = 0.2;
        h[10] = 0.1;
        let m = TemporalModel::from_histograms(b, 2, [((0, 1), Some(h))].into()).unwrap();
        for sigma in [30.0, 100.0, 250.0, 1000.0] {
            let s = m.smooth(sigma).unwrap();
            assert!((s.histogram(0, 1).unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn text_roundtrip() {
        let m = four_pair_model().smooth(100.0).unwrap();
        let back = TemporalModel::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert!(TemporalModel::from_text("bin_width=1\n").is_err());
    }
}
