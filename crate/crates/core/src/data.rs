//! Sample metadata, feature storage and the on-disk dataset formats.
//!
//! A dataset lives in two files: a metadata CSV with the header
//! `sample_id,person_id,camera_id,frame_id` (optionally preceded by
//! `# key=value` preamble lines carrying `num_cameras` and `domain`), and a
//! binary feature matrix (see [`Matrix::write_bin`]). Feature row `k` belongs
//! to `sample_id == k`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::{norm, Matrix};

pub const META_HEADER: [&str; 4] = ["sample_id", "person_id", "camera_id", "frame_id"];

/// Encoding of an unknown identity in the metadata file.
pub const UNKNOWN_PERSON: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleMeta {
    pub sample_id: usize,
    /// `None` for unlabeled samples.
    pub person_id: Option<u32>,
    pub camera_id: usize,
    /// Frame number of the capture.
    pub frame_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Domain {
    Source,
    #[default]
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Argument(format!("unknown domain `{other}`"))),
        }
    }
}

/// Raw input features plus, once an embedder has run, their unit-norm
/// embedded view.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub raw: Matrix,
    pub embedded: Option<Matrix>,
}

impl FeatureStore {
    pub fn new(raw: Matrix) -> Result<Self> {
        if !raw.is_finite() {
            return Err(Error::NonFinite("raw feature matrix".into()));
        }
        Ok(FeatureStore {
            raw,
            embedded: None,
        })
    }

    /// Attach an embedded view; every row must be finite with unit norm.
    pub fn set_embedded(&mut self, embedded: Matrix) -> Result<()> {
        if embedded.rows() != self.raw.rows() {
            return Err(Error::Dimension(format!(
                "embedded view has {} rows, raw has {}",
                embedded.rows(),
                self.raw.rows()
            )));
        }
        for (i, r) in embedded.iter_rows().enumerate() {
            let n = norm(r);
            if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!(
                    "embedded row {i} has norm {n}, expected 1"
                )));
            }
        }
        self.embedded = Some(embedded);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub metas: Vec<SampleMeta>,
    pub features: FeatureStore,
    pub num_cameras: usize,
    pub domain: Domain,
}

impl Dataset {
    /// Build and validate a dataset. `metas[k].sample_id` must equal `k`.
    pub fn new(
        metas: Vec<SampleMeta>,
        raw: Matrix,
        num_cameras: usize,
        domain: Domain,
    ) -> Result<Self> {
        let d = Dataset {
            metas,
            features: FeatureStore::new(raw)?,
            num_cameras,
            domain,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.metas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metas.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.raw.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_cameras == 0 {
            return Err(Error::Validation("num_cameras must be positive".into()));
        }
        if self.metas.len() != self.features.raw.rows() {
            return Err(Error::Dimension(format!(
                "{} metadata rows but {} feature rows",
                self.metas.len(),
                self.features.raw.rows()
            )));
        }
        for (k, m) in self.metas.iter().enumerate() {
            if m.sample_id != k {
                return Err(Error::Validation(format!(
                    "sample at position {k} has sample_id {}",
                    m.sample_id
                )));
            }
            if m.camera_id >= self.num_cameras {
                return Err(Error::Validation(format!(
                    "sample {k}: camera_id {} >= num_cameras {}",
                    m.camera_id, self.num_cameras
                )));
            }
        }
        if !self.features.raw.is_finite() {
            return Err(Error::NonFinite("raw feature matrix".into()));
        }
        Ok(())
    }

    /// Person ids for every sample, or an error naming the first unknown one.
    pub fn known_person_ids(&self) -> Result<Vec<u32>> {
        self.metas
            .iter()
            .map(|m| {
                m.person_id.ok_or_else(|| {
                    Error::Validation(format!("sample {} has an unknown person_id", m.sample_id))
                })
            })
            .collect()
    }

    /// New dataset holding `indices` in the given order, renumbered from 0.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let metas = indices
            .iter()
            .enumerate()
            .map(|(k, &i)| SampleMeta {
                sample_id: k,
                ..self.metas[i]
            })
            .collect();
        Dataset::new(
            metas,
            self.features.raw.select_rows(indices),
            self.num_cameras,
            self.domain,
        )
    }

    pub fn save(&self, meta_path: &Path, feature_path: &Path) -> Result<()> {
        fs::write(meta_path, self.metadata_csv()).map_err(|e| Error::io(meta_path, e))?;
        self.features.raw.write_bin(feature_path)
    }

    pub fn metadata_csv(&self) -> String {
        let mut out = format!(
            "# num_cameras={}\n# domain={}\n{}\n",
            self.num_cameras,
            self.domain,
            META_HEADER.join(",")
        );
        for m in &self.metas {
            let pid = m.person_id.map_or(UNKNOWN_PERSON, i64::from);
            out.push_str(&format!(
                "{},{},{},{}\n",
                m.sample_id, pid, m.camera_id, m.frame_id
            ));
        }
        out
    }
}

/// Load and validate a dataset from its metadata CSV and feature binary.
pub fn load_dataset(meta_path: &Path, feature_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(meta_path).map_err(|e| Error::io(meta_path, e))?;
    let name = meta_path.display().to_string();
    let (mut metas, preamble) = parse_metadata(&text, &name)?;
    let raw = Matrix::read_bin(feature_path)?;
    if raw.rows() != metas.len() {
        return Err(Error::Dimension(format!(
            "{} has {} metadata rows but {} has {} feature rows",
            name,
            metas.len(),
            feature_path.display(),
            raw.rows()
        )));
    }
    metas.sort_by_key(|m| m.sample_id);
    let max_cam = metas.iter().map(|m| m.camera_id + 1).max().unwrap_or(1);
    let num_cameras = match preamble.get("num_cameras") {
        Some(v) => v.parse::<usize>().map_err(|_| {
            Error::format(&name, "preamble", format!("bad num_cameras `{v}`"))
        })?,
        None => max_cam,
    };
    let domain = match preamble.get("domain") {
        Some(v) => v.parse()?,
        None => Domain::Target,
    };
    Dataset::new(metas, raw, num_cameras, domain)
}

fn parse_metadata(text: &str, name: &str) -> Result<(Vec<SampleMeta>, BTreeMap<String, String>)> {
    let mut preamble = BTreeMap::new();
    for line in text.lines().take_while(|l| l.trim_start().starts_with('#')) {
        for kv in line.trim_start_matches(|c: char| c == '#' || c.is_whitespace()).split_whitespace() {
            if let Some((k, v)) = kv.split_once('=') {
                preamble.insert(k.to_string(), v.to_string());
            }
        }
    }

    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::format(name, "header", e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != META_HEADER {
        return Err(Error::format(
            name,
            "header",
            format!("expected `{}`, found `{}`", META_HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        ));
    }

    let mut metas = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::format(name, format!("line {line}"), e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let loc = format!("line {line}");
        let field = |k: usize| -> Result<i64> {
            rec[k].parse::<i64>().map_err(|_| {
                Error::format(name, &loc, format!("{} `{}` is not an integer", META_HEADER[k], &rec[k]))
            })
        };
        let (sid, pid, cam, fid) = (field(0)?, field(1)?, field(2)?, field(3)?);
        if sid < 0 || cam < 0 || fid < 0 || pid < UNKNOWN_PERSON || pid > i64::from(u32::MAX) {
            return Err(Error::format(name, &loc, "negative or out-of-range field"));
        }
        if !seen.insert(sid) {
            return Err(Error::format(name, &loc, format!("duplicate sample_id {sid}")));
        }
        metas.push(SampleMeta {
            sample_id: sid as usize,
            person_id: (pid != UNKNOWN_PERSON).then_some(pid as u32),
            camera_id: cam as usize,
            frame_id: fid as u64,
        });
    }
    if let Some(m) = metas.iter().find(|m| m.sample_id >= metas.len()) {
        return Err(Error::format(
            name,
            format!("sample_id {}", m.sample_id),
            format!("sample ids must cover 0..{} exactly", metas.len()),
        ));
    }
    Ok((metas, preamble))
}

/// Result of a query/gallery split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySplit {
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
    /// Persons seen under a single camera; they stay in the gallery as distractors.
    pub excluded_persons: Vec<u32>,
}

/// Split samples into query and gallery sets for cross-camera retrieval.
///
/// Each identity with images under at least two cameras contributes about
/// `query_fraction` of its images (at least one) as queries, chosen at random
/// under the constraint that every query keeps a same-person gallery image
/// under a different camera.
pub fn split_query_gallery(d: &Dataset, query_fraction: f64, seed: u64) -> Result<QuerySplit> {
    if !(query_fraction > 0.0 && query_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "query_fraction must lie in (0,1), got {query_fraction}"
        )));
    }
    let pids = d.known_person_ids()?;
    let mut by_person: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &p) in pids.iter().enumerate() {
        by_person.entry(p).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_query = vec![false; d.len()];
    let mut excluded = Vec::new();
    for (&pid, members) in &by_person {
        let cams: HashSet<usize> = members.iter().map(|&i| d.metas[i].camera_id).collect();
        if cams.len() < 2 {
            excluded.push(pid);
            continue;
        }
        let want = ((query_fraction * members.len() as f64).round() as usize).max(1);
        let mut order = members.clone();
        order.shuffle(&mut rng);
        let mut chosen: Vec<usize> = Vec::new();
        for &cand in &order {
            if chosen.len() == want {
                break;
            }
            chosen.push(cand);
            let ok = chosen.iter().all(|&q| {
                members.iter().any(|&g| {
                    !chosen.contains(&g) && d.metas[g].camera_id != d.metas[q].camera_id
                })
            });
            if !ok {
                chosen.pop();
            }
        }
        for q in chosen {
            is_query[q] = true;
        }
    }
    let (query, gallery): (Vec<usize>, Vec<usize>) = (0..d.len()).partition(|&i| is_query[i]);
    Ok(QuerySplit {
        query,
        gallery,
        excluded_persons: excluded,
    })
}


/// Per-sample sets of positive sample indices (the multi-class labels).
///
/// Invariants: every sample is its own positive and the relation is symmetric.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiLabels {
    positives: Vec<Vec<usize>>,
}

impl MultiLabels {
    /// Validate and wrap positive sets; each set is sorted and deduplicated.
    pub fn new(mut positives: Vec<Vec<usize>>) -> Result<Self> {
        let n = positives.len();
        for (i, p) in positives.iter_mut().enumerate() {
            p.sort_unstable();
            p.dedup();
            if p.last().is_some_and(|&j| j >= n) {
                return Err(Error::Validation(format!("sample {i} lists an out-of-range positive")));
            }
            if p.binary_search(&i).is_err() {
                return Err(Error::Validation(format!("sample {i} is not its own positive")));
            }
        }
        for (i, p) in positives.iter().enumerate() {
            if let Some(&j) = p.iter().find(|&&j| positives[j].binary_search(&i).is_err()) {
                return Err(Error::Validation(format!("positives not symmetric: {j} in {i} but not reverse")));
            }
        }
        Ok(MultiLabels { positives })
    }

    /// Every sample alone in its own class.
    pub fn singletons(n: usize) -> Self {
        MultiLabels {
            positives: (0..n).map(|i| vec![i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn positives(&self, i: usize) -> &[usize] {
        &self.positives[i]
    }

    /// Dense 0/1 view, mainly for tests and small dumps.
    pub fn dense(&self) -> Vec<Vec<u8>> {
        let n = self.len();
        self.positives
            .iter()
            .map(|p| {
                let mut row = vec![0u8; n];
                for &j in p {
                    row[j] = 1;
                }
                row
            })
            .collect()
    }

    /// Adjacency-list text: one line `i: j1 j2 ...` per sample.
    pub fn to_text(&self) -> String {
        self.positives
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let js: Vec<String> = p.iter().map(usize::to_string).collect();
                format!("{i}: {}\n", js.join(" "))
            })
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut positives = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::format("multilabels", format!("line {}", n + 1), format!("bad row `{line}`"));
            let (i, rest) = line.split_once(':').ok_or_else(bad)?;
            if i.trim().parse::<usize>().map_err(|_| bad())? != positives.len() {
                return Err(bad());
            }
            let set = rest
                .split_whitespace()
                .map(|j| j.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            positives.push(set);
        }
        Self::new(positives)
    }
}
