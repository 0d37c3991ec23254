//! Randomised invariant checks shared by the property tests and the
//! acceptance suite. Each runs `cases` generated inputs.

use std::collections::BTreeMap;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

use reid_core::cluster::{labels_from_clusters, ClusterAssignment};
use reid_core::data::SampleMeta;
use reid_core::eval::{evaluate, Scorer, SimilarityMode, CMC_RANKS};
use reid_core::matrix::{softmax, Matrix};
use reid_core::memory::MemoryBank;
use reid_core::similarity::{joint_sim, pairwise_joint_rows, pairwise_visual_rows, FusionParams};
use reid_core::temporal::{BinSpec, TemporalModel};

pub fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn report<T: std::fmt::Debug>(r: Result<(), proptest::test_runner::TestError<T>>) -> Result<(), String> {
    r.map_err(|e| e.to_string())
}

pub fn unit_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, cols), rows).prop_filter_map("zero row", |rows| {
        let unit: Option<Vec<Vec<f64>>> = rows
            .into_iter()
            .map(|r| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                (n > 1e-3).then(|| r.iter().map(|v| v / n).collect())
            })
            .collect();
        unit.map(|u| Matrix::from_rows(&u).unwrap())
    })
}

pub fn metas(n: usize, cams: usize) -> impl Strategy<Value = Vec<SampleMeta>> {
    prop::collection::vec((0..cams, 0u64..4000, 0u32..6), n).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (c, f, p))| SampleMeta {
                sample_id: i,
                person_id: Some(p),
                camera_id: c,
                frame_id: f,
            })
            .collect()
    })
}

/// Random temporal model over `cams` cameras; some pairs left EMPTY.
pub fn temporal_model(cams: usize) -> impl Strategy<Value = TemporalModel> {
    let binning = BinSpec::new(250.0, 2000.0).unwrap();
    let nb = binning.num_bins();
    let pairs: Vec<(usize, usize)> = (0..cams).flat_map(|a| (a..cams).map(move |b| (a, b))).collect();
    prop::collection::vec(prop::option::weighted(0.8, prop::collection::vec(0.0f64..1.0, nb)), pairs.len()).prop_map(
        move |hs| {
            let map: BTreeMap<_, _> = pairs.iter().copied().zip(hs).collect();
            TemporalModel::from_histograms(binning, cams, map).unwrap()
        },
    )
}

pub fn softmax_normalised(cases: u32) -> Result<(), String> {
    report(runner(cases).run(&prop::collection::vec(-500.0f64..500.0, 1..40), |s| {
        let p = softmax(&s);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(p.iter().all(|v| *v >= 0.0 && *v <= 1.0));
        Ok(())
    }))
}

pub fn bank_rows_unit(cases: u32) -> Result<(), String> {
    let strat = (unit_matrix(6, 5), prop::collection::vec((0usize..6, unit_matrix(1, 5), 0.0f64..=1.0), 1..30));
    report(runner(cases).run(&strat, |(init, updates)| {
        let mut bank = MemoryBank::init(&init).unwrap();
        for (i, f, a) in updates {
            let before = bank.clone();
            bank.update(i, f.row(0), a).unwrap();
            for r in 0..bank.len() {
                let n = bank.slot(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() <= 1e-6);
                if r != i {
                    prop_assert_eq!(bank.slot(r), before.slot(r));
                }
            }
        }
        Ok(())
    }))
}

pub fn cmc_monotone(cases: u32) -> Result<(), String> {
    let strat = (unit_matrix(24, 4), metas(24, 3));
    report(runner(cases).run(&strat, |(feats, metas)| {
        let scorer = Scorer::new(&feats, &metas, None, FusionParams::default(), SimilarityMode::Visual).unwrap();
        let query: Vec<usize> = (0..6).collect();
        let gallery: Vec<usize> = (6..24).collect();
        if let Ok(r) = evaluate(&scorer, &query, &gallery) {
            prop_assert_eq!(r.cmc.len(), CMC_RANKS.len());
            prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(r.cmc.iter().all(|c| (0.0..=1.0).contains(c)));
            prop_assert!((0.0..=1.0).contains(&r.map));
        }
        Ok(())
    }))
}

pub fn multilabels_consistent(cases: u32) -> Result<(), String> {
    let strat = prop::collection::vec(prop::option::of(0usize..5), 1..40);
    report(runner(cases).run(&strat, |labels| {
        // compact ids so the assignment is well formed
        let mut remap = BTreeMap::new();
        let labels: Vec<Option<usize>> = labels
            .iter()
            .map(|l| {
                l.map(|c| {
                    let next = remap.len();
                    *remap.entry(c).or_insert(next)
                })
            })
            .collect();
        let assign = ClusterAssignment {
            num_clusters: remap.len(),
            labels,
        };
        let ml = labels_from_clusters(&assign);
        for i in 0..ml.len() {
            prop_assert!(ml.positives(i).contains(&i));
            for &j in ml.positives(i) {
                prop_assert!(ml.positives(j).contains(&i));
            }
            if assign.labels[i].is_none() {
                prop_assert_eq!(ml.positives(i), &[i][..]);
            }
        }
        Ok(())
    }))
}

pub fn joint_sim_monotone(cases: u32) -> Result<(), String> {
    let strat = (-1.0f64..=1.0, -1.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0);
    report(runner(cases).run(&strat, |(v1, v2, t1, t2)| {
        let p = FusionParams::default();
        let (vlo, vhi) = (v1.min(v2), v1.max(v2));
        let (tlo, thi) = (t1.min(t2), t1.max(t2));
        let j = joint_sim(vlo, tlo, &p);
        prop_assert!(j > 0.0 && j < 1.0);
        prop_assert!(joint_sim(vhi, tlo, &p) >= j);
        prop_assert!(joint_sim(vlo, thi, &p) >= j);
        prop_assert!(joint_sim(vhi, thi, &p) < 1.0);
        Ok(())
    }))
}

pub fn pairwise_symmetric(cases: u32) -> Result<(), String> {
    let strat = (unit_matrix(12, 4), metas(12, 3), temporal_model(3));
    report(runner(cases).run(&strat, |(feats, metas, tm)| {
        let v = pairwise_visual_rows(&feats, 100).unwrap();
        let j = pairwise_joint_rows(&feats, &metas, &tm, &FusionParams::default(), 100).unwrap();
        for m in [&v, &j] {
            for a in 0..12 {
                for b in 0..12 {
                    prop_assert_eq!(m[(a, b)], m[(b, a)]);
                }
            }
        }
        Ok(())
    }))
}

/// Every criterion-7 invariant, by name.
pub fn all(cases: u32) -> Vec<(&'static str, Result<(), String>)> {
    vec![
        ("softmax normalisation", softmax_normalised(cases)),
        ("bank row norms", bank_rows_unit(cases)),
        ("CMC monotonicity", cmc_monotone(cases)),
        ("MultiLabels symmetry/self-inclusion", multilabels_consistent(cases)),
        ("joint_sim monotonicity and range", joint_sim_monotone(cases)),
        ("similarity matrix symmetry", pairwise_symmetric(cases)),
    ]
}
