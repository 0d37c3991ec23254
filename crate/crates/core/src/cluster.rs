//! DBSCAN over a precomputed similarity matrix, and the multi-class labels
//! derived from the resulting clusters.
//!
//! Distance is `1 − similarity`. Points are visited in ascending index order
//! and expansion walks neighbour lists in ascending order, so a border point
//! reachable from several clusters always joins the one created first.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::data::MultiLabels;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbscanParams {
    /// Largest distance `1 − sim` at which two points are neighbours.
    pub eps: f64,
    /// Neighbourhood size (including the point itself) that makes a core point.
    pub min_pts: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        DbscanParams { eps: 0.6, min_pts: 4 }
    }
}

/// Cluster id per sample; `None` is noise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub labels: Vec<Option<usize>>,
    pub num_clusters: usize,
}

impl ClusterAssignment {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_noise(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,cluster_id\n");
        for (i, l) in self.labels.iter().enumerate() {
            writeln!(s, "{i},{}", l.map_or(-1, |c| c as i64)).unwrap();
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "sample_id,cluster_id")) => {}
            _ => return Err(Error::format("clusters", "header", "expected `sample_id,cluster_id`")),
        }
        let mut labels = Vec::new();
        for (n, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::format("clusters", format!("line {}", n + 1), format!("bad row `{line}`"));
            let (i, c) = line.split_once(',').ok_or_else(bad)?;
            if i.trim().parse::<usize>().map_err(|_| bad())? != labels.len() {
                return Err(bad());
            }
            let c: i64 = c.trim().parse().map_err(|_| bad())?;
            labels.push(match c {
                -1 => None,
                c if c >= 0 => Some(c as usize),
                _ => return Err(bad()),
            });
        }
        let num_clusters = labels.iter().flatten().map(|c| c + 1).max().unwrap_or(0);
        Ok(ClusterAssignment { labels, num_clusters })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// Sorted ε-neighbourhoods (each includes the point itself).
pub fn neighborhoods(sim: &Matrix, eps: f64) -> Vec<Vec<usize>> {
    (0..sim.rows())
        .into_par_iter()
        .map(|i| {
            sim.row(i)
                .iter()
                .enumerate()
                .filter(|&(j, &s)| j == i || 1.0 - s <= eps)
                .map(|(j, _)| j)
                .collect()
        })
        .collect()
}

pub fn dbscan(sim: &Matrix, params: DbscanParams) -> Result<ClusterAssignment> {
    if sim.rows() != sim.cols() {
        return Err(Error::Dimension(format!("similarity matrix is {}x{}", sim.rows(), sim.cols())));
    }
    if !(params.eps.is_finite() && params.eps > 0.0) || params.min_pts == 0 {
        return Err(Error::Argument(format!("invalid DBSCAN parameters {params:?}")));
    }
    let n = sim.rows();
    let nbrs = neighborhoods(sim, params.eps);
    let is_core: Vec<bool> = nbrs.iter().map(|nb| nb.len() >= params.min_pts).collect();

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for start in 0..n {
        if labels[start].is_some() || !is_core[start] {
            continue;
        }
        let cluster = next;
        next += 1;
        labels[start] = Some(cluster);
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            for &q in &nbrs[p] {
                if labels[q].is_none() {
                    labels[q] = Some(cluster);
                    if is_core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    Ok(ClusterAssignment {
        labels,
        num_clusters: next,
    })
}

/// Indices of core points under `params`.
pub fn core_points(sim: &Matrix, params: DbscanParams) -> Vec<usize> {
    neighborhoods(sim, params.eps)
        .iter()
        .enumerate()
        .filter(|(_, nb)| nb.len() >= params.min_pts)
        .map(|(i, _)| i)
        .collect()
}

/// Positives are the members of a sample's cluster; noise samples are singletons.
pub fn labels_from_clusters(assign: &ClusterAssignment) -> MultiLabels {
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in assign.labels.iter().enumerate() {
        if let Some(c) = l {
            members.entry(*c).or_default().push(i);
        }
    }
    let positives = assign
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| match l {
            Some(c) => members[c].clone(),
            None => vec![i],
        })
        .collect();
    MultiLabels::new(positives).expect("cluster membership is symmetric and reflexive")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Purity {
    pub value: f64,
    /// Set when every point was noise and the value is a placeholder 0.
    pub all_noise: bool,
}

/// Sum over clusters of the majority identity count, over the number of
/// clustered (non-noise) points.
pub fn purity(assign: &ClusterAssignment, true_ids: &[u32]) -> Result<Purity> {
    if assign.len() != true_ids.len() {
        return Err(Error::Dimension(format!(
            "{} assignments but {} identities",
            assign.len(),
            true_ids.len()
        )));
    }
    let mut counts: BTreeMap<usize, BTreeMap<u32, usize>> = BTreeMap::new();
    for (l, &id) in assign.labels.iter().zip(true_ids) {
        if let Some(c) = l {
            *counts.entry(*c).or_default().entry(id).or_default() += 1;
        }
    }
    let clustered: usize = counts.values().flat_map(|m| m.values()).sum();
    if clustered == 0 {
        return Ok(Purity {
            value: 0.0,
            all_noise: true,
        });
    }
    let majority: usize = counts.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    Ok(Purity {
        value: majority as f64 / clustered as f64,
        all_noise: false,
    })
}
