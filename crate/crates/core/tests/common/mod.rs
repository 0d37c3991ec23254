//! Independent oracles and shared fixtures for the integration tests.
#![allow(dead_code)]

pub mod invariants;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reid_core::data::SampleMeta;
use reid_core::matrix::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn unit_rows(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Matrix {
    let mut m = random_matrix(rows, cols, r);
    for i in 0..rows {
        let n = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        m.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    m
}

/// DBSCAN by another route: connected components of the core graph,
/// numbered by their smallest core index; a border point joins the
/// lowest-numbered cluster among its neighbouring cores.
pub fn reference_dbscan(sim: &Matrix, eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = sim.rows();
    let near = |i: usize, j: usize| 1.0 - sim[(i, j)] <= eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts).collect();

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && near(i, j) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut id_of_root = BTreeMap::new();
    let mut comp = vec![None; n];
    for i in 0..n {
        if core[i] {
            let r = find(&mut parent, i);
            let next = id_of_root.len();
            comp[i] = Some(*id_of_root.entry(r).or_insert(next));
        }
    }
    (0..n)
        .map(|i| {
            if core[i] {
                comp[i]
            } else {
                (0..n).filter(|&j| core[j] && near(i, j)).filter_map(|j| comp[j]).min()
            }
        })
        .collect()
}

/// Interval histograms by enumerating every sample pair.
pub fn brute_histograms(
    metas: &[SampleMeta],
    labels: &[Option<usize>],
    num_cameras: usize,
    bin_width: f64,
    max_interval: f64,
) -> BTreeMap<(usize, usize), Option<Vec<f64>>> {
    let nb = ((2.0 * max_interval / bin_width).ceil() as usize).max(1);
    let mut counts: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for a in 0..num_cameras {
        for b in a..num_cameras {
            counts.insert((a, b), vec![0.0; nb]);
        }
    }
    for (i, mi) in metas.iter().enumerate() {
        for (j, mj) in metas.iter().enumerate() {
            if i == j || labels[i].is_none() || labels[i] != labels[j] || mi.camera_id > mj.camera_id {
                continue;
            }
            let delta = mi.frame_id as f64 - mj.frame_id as f64;
            if delta.abs() > max_interval {
                continue;
            }
            let k = (((delta + max_interval) / bin_width).floor() as usize).min(nb - 1);
            counts.get_mut(&(mi.camera_id, mj.camera_id)).unwrap()[k] += 1.0;
        }
    }
    counts
        .into_iter()
        .map(|(p, c)| {
            let total: f64 = c.iter().sum();
            (p, (total > 0.0).then(|| c.iter().map(|v| v / total).collect()))
        })
        .collect()
}

/// AP from pairwise rank counting, no sorting.
pub fn brute_average_precision(scores: &[(usize, f64)], relevant: impl Fn(usize) -> bool) -> Option<f64> {
    let rank = |g: usize, s: f64| {
        1 + scores
            .iter()
            .filter(|&&(h, t)| t > s || (t == s && h < g))
            .count()
    };
    let rel: Vec<(usize, usize)> = scores
        .iter()
        .filter(|&&(g, _)| relevant(g))
        .map(|&(g, s)| (g, rank(g, s)))
        .collect();
    if rel.is_empty() {
        return None;
    }
    let sum: f64 = rel
        .iter()
        .map(|&(_, r)| rel.iter().filter(|&&(_, r2)| r2 <= r).count() as f64 / r as f64)
        .sum();
    Some(sum / rel.len() as f64)
}

/// Central finite-difference gradient of `f` at `m`.
pub fn numeric_grad(m: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut g = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            let mut p = m.clone();
            p.row_mut(r)[c] += h;
            let up = f(&p);
            p.row_mut(r)[c] -= 2.0 * h;
            let down = f(&p);
            g.row_mut(r)[c] = (up - down) / (2.0 * h);
        }
    }
    g
}

/// Largest elementwise `|a - n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix, floor: f64) -> f64 {
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn meta(id: usize, person: Option<u32>, cam: usize, fid: u64) -> SampleMeta {
    SampleMeta {
        sample_id: id,
        person_id: person,
        camera_id: cam,
        frame_id: fid,
    }
}
