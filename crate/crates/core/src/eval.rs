//! Cross-camera retrieval evaluation: CMC and mAP, ranked by visual or by
//! joint visual-temporal similarity.
//!
//! For each query, gallery items showing the same person under the same
//! camera are dropped before ranking. Ties in score are broken by ascending
//! sample id.

use std::cmp::Ordering;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::SampleMeta;
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::similarity::{joint_sim, FusionParams};
use crate::temporal::TemporalModel;

pub const CMC_RANKS: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityMode {
    Visual,
    Joint,
}

impl fmt::Display for SimilarityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityMode::Visual => "visual",
            SimilarityMode::Joint => "joint",
        })
    }
}

impl FromStr for SimilarityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visual" => Ok(SimilarityMode::Visual),
            "joint" => Ok(SimilarityMode::Joint),
            other => Err(Error::Argument(format!("unknown mode `{other}` (visual|joint)"))),
        }
    }
}

/// Scores gallery items against a query.
#[derive(Clone, Copy)]
pub struct Scorer<'a> {
    pub features: &'a Matrix,
    pub metas: &'a [SampleMeta],
    pub temporal: Option<&'a TemporalModel>,
    pub fusion: FusionParams,
    pub mode: SimilarityMode,
}

impl<'a> Scorer<'a> {
    pub fn new(
        features: &'a Matrix,
        metas: &'a [SampleMeta],
        temporal: Option<&'a TemporalModel>,
        fusion: FusionParams,
        mode: SimilarityMode,
    ) -> Result<Self> {
        if features.rows() != metas.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows but {} metadata entries",
                features.rows(),
                metas.len()
            )));
        }
        if mode == SimilarityMode::Joint && temporal.is_none() {
            return Err(Error::Argument("joint mode requires a temporal model".into()));
        }
        fusion.validate()?;
        Ok(Scorer {
            features,
            metas,
            temporal,
            fusion,
            mode,
        })
    }

    pub fn score(&self, q: usize, g: usize) -> f64 {
        let vs = dot(self.features.row(q), self.features.row(g));
        match (self.mode, self.temporal) {
            (SimilarityMode::Joint, Some(tm)) => {
                joint_sim(vs, tm.ts(&self.metas[q], &self.metas[g]), &self.fusion)
            }
            _ => vs,
        }
    }

    /// Gallery ordered by descending score, ties by ascending sample id.
    pub fn ranking(&self, q: usize, gallery: &[usize]) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = gallery
            .iter()
            .filter(|&&g| g != q)
            .map(|&g| (g, self.score(q, g)))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.metas[a.0].sample_id.cmp(&self.metas[b.0].sample_id))
        });
        scored
    }
}

/// Top-`top_k` gallery items for a query (the full ranking when `top_k`
/// exceeds the gallery).
pub fn rank_query(scorer: &Scorer<'_>, query: usize, gallery: &[usize], top_k: usize) -> Vec<(usize, f64)> {
    let mut r = scorer.ranking(query, gallery);
    r.truncate(top_k);
    r
}

/// Average precision of a ranked relevance list; `None` without relevant items.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: SimilarityMode,
    pub map: f64,
    /// Accuracy at each rank in [`CMC_RANKS`].
    pub cmc: Vec<f64>,
    /// `(query sample index, AP)` for every scored query.
    pub per_query_ap: Vec<(usize, f64)>,
    /// Queries without a cross-camera match in the gallery.
    pub excluded_queries: usize,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc[0]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,mAP,r1,r5,r10,r20,queries,excluded\n");
        write!(s, "{},{}", self.mode, self.map).unwrap();
        for c in &self.cmc {
            write!(s, ",{c}").unwrap();
        }
        writeln!(s, ",{},{}", self.per_query_ap.len(), self.excluded_queries).unwrap();
        s
    }

    pub fn per_query_csv(&self, metas: &[SampleMeta]) -> String {
        let mut s = String::from("query_id,ap\n");
        for &(q, ap) in &self.per_query_ap {
            writeln!(s, "{},{ap}", metas[q].sample_id).unwrap();
        }
        s
    }
}

/// Score every query against the gallery.
pub fn evaluate(scorer: &Scorer<'_>, query: &[usize], gallery: &[usize]) -> Result<EvalReport> {
    let metas = scorer.metas;
    let ids = |i: usize| {
        metas[i]
            .person_id
            .ok_or_else(|| Error::Validation(format!("sample {} has an unknown person_id", metas[i].sample_id)))
    };
    for &i in query.iter().chain(gallery) {
        ids(i)?;
    }

    let outcomes: Vec<Option<(f64, usize)>> = query
        .par_iter()
        .map(|&q| {
            let (pq, cq) = (metas[q].person_id, metas[q].camera_id);
            let kept: Vec<usize> = gallery
                .iter()
                .copied()
                .filter(|&g| !(metas[g].person_id == pq && metas[g].camera_id == cq))
                .collect();
            let relevant: Vec<bool> = scorer
                .ranking(q, &kept)
                .iter()
                .map(|&(g, _)| metas[g].person_id == pq)
                .collect();
            let first_hit = relevant.iter().position(|&r| r)?;
            Some((average_precision(&relevant)?, first_hit))
        })
        .collect();

    let mut per_query_ap = Vec::new();
    let mut first_hits = Vec::new();
    let mut excluded = 0;
    for (&q, o) in query.iter().zip(outcomes) {
        match o {
            Some((ap, hit)) => {
                per_query_ap.push((q, ap));
                first_hits.push(hit);
            }
            None => excluded += 1,
        }
    }
    let n = per_query_ap.len();
    if n == 0 {
        return Err(Error::Validation("no query has a cross-camera match in the gallery".into()));
    }
    let map = per_query_ap.iter().map(|(_, ap)| ap).sum::<f64>() / n as f64;
    let cmc = CMC_RANKS
        .iter()
        .map(|&k| first_hits.iter().filter(|&&h| h < k).count() as f64 / n as f64)
        .collect();
    Ok(EvalReport {
        mode: scorer.mode,
        map,
        cmc,
        per_query_ap,
        excluded_queries: excluded,
    })
}

/// Aligned text table with one row per labelled report.
pub fn ablation_report(rows: &[(String, EvalReport)]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Argument("ablation report needs at least one row".into()));
    }
    if let Some((label, _)) = rows.iter().find(|(_, r)| r.cmc.len() != CMC_RANKS.len()) {
        return Err(Error::Argument(format!(
            "row `{label}` must carry {} CMC values",
            CMC_RANKS.len()
        )));
    }
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("Method".len());
    let mut s = format!("{:<width$} | {:>6} | {:>6} | {:>6} | {:>6} | {:>6}\n", "Method", "mAP", "r1", "r5", "r10", "r20");
    s.push_str(&format!("{}\n", "-".repeat(width + 5 * 9)));
    for (label, r) in rows {
        write!(s, "{label:<width$} | {:>6.1}", 100.0 * r.map).unwrap();
        for c in &r.cmc {
            write!(s, " | {:>6.1}", 100.0 * c).unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}
