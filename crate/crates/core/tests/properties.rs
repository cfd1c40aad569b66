use std::collections::BTreeMap;

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;

use ngfkt_core::calibrate::{build_partial_order, calibrate, log_posterior, log_posterior_gradient, NeighborRanking};
use ngfkt_core::checkpoint::RngState;
use ngfkt_core::embed::{gcn_forward, NodeLayout};
use ngfkt_core::eval::synth::synthetic_benchmark;
use ngfkt_core::eval::{acc, auc, ps};
use ngfkt_core::ingest::{parse_interactions, ParseMode};
use ngfkt_core::model::{forgetting_curve, score_segment, ModelConfig, ModelParameters, Segment};
use ngfkt_core::relation::{asymmetrize, exercise_relation, try_coefficient, ContingencyTable};
use ngfkt_core::tape::{Csr, Tape};
use ngfkt_core::{CalibrationConfig, Checkpoint, CoefficientKind, GcnConfig, GcnGraph, GcnParams, SyntheticConfig};

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    prop::collection::vec((0u8..12, any::<bool>()), 2..120)
        .prop_filter("both classes", |v| v.iter().any(|x| x.1) && v.iter().any(|x| !x.1))
        .prop_map(|v| v.into_iter().map(|(s, l)| (s as f64 / 11.0, l)).unzip())
}

fn pairwise(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

proptest! {
    #[test]
    fn auc_equals_pairwise_count((scores, labels) in scored()) {
        prop_assert!((auc(&scores, &labels).unwrap() - pairwise(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn auc_ignores_monotone_rescaling((scores, labels) in scored()) {
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&warped, &labels).unwrap());
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auc(&flipped, &labels).unwrap() - (1.0 - auc(&scores, &labels).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn acc_at_zero_threshold_is_positive_rate((scores, labels) in scored()) {
        let positives = labels.iter().filter(|l| **l).count() as f64 / labels.len() as f64;
        prop_assert_eq!(acc(&scores, &labels, 0.0).unwrap(), positives);
    }

    #[test]
    fn ps_is_duplication_invariant(ranks in prop::collection::vec(1usize..=6, 1..60), copies in 2usize..5) {
        let base = ps(&ranks, 6).unwrap();
        prop_assert!(base > 0.0 && base <= 1.0);
        prop_assert_eq!(ps(&ranks.repeat(copies), 6).unwrap(), base);
    }

    #[test]
    fn asymmetrize_is_idempotent_on_nonnegative(values in prop::collection::vec(0u8..5, 36)) {
        let w = Array2::from_shape_vec((6, 6), values.into_iter().map(f64::from).collect()).unwrap();
        let once = asymmetrize(&w);
        prop_assert_eq!(asymmetrize(&once), once.clone());
        for i in 0..6 {
            for j in i + 1..6 {
                prop_assert!(once[[i, j]] == 0.0 || once[[j, i]] == 0.0);
                prop_assert_eq!(once[[i, j]] + once[[j, i]], w[[i, j]].max(w[[j, i]]));
            }
        }
    }

    #[test]
    fn relation_entries_are_zero_or_above_threshold(
        simi in -1.0f64..1.0, diff in 0.0f64..1.0, w in -1.0f64..1.0, theta in 0.0f64..1.0,
    ) {
        let r = exercise_relation(simi, diff, w, [0.1, 0.2, 0.7], theta);
        prop_assert!(r == 0.0 || r >= theta);
    }

    #[test]
    fn coefficient_ranges(a in 0u64..=10, b in 0u64..=10, c in 0u64..=10, d in 0u64..=10) {
        let t = ContingencyTable { a, b, c, d };
        let total = (a + b + c + d) as f64;
        for kind in CoefficientKind::ALL {
            if let Some(v) = try_coefficient(&t, kind) {
                match kind {
                    CoefficientKind::Kappa | CoefficientKind::Phi | CoefficientKind::Yule => {
                        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v), "{kind} = {v}")
                    }
                    CoefficientKind::Ochiai | CoefficientKind::Jaccard => prop_assert!((0.0..=1.0 + 1e-12).contains(&v)),
                    CoefficientKind::Sokal => prop_assert!(v >= 0.0 && v <= total.sqrt() + 1e-12),
                    // not bounded by 1; see `adjusted_kappa_can_exceed_one`
                    CoefficientKind::AdjustedKappa => prop_assert!(v.is_finite()),
                }
            }
        }
    }

    #[test]
    fn forgetting_decreases_with_gap(xi1 in 0.01f64..10.0, xi2 in 0.01f64..2.0, near in 0.0f64..100.0, step in 1e-3f64..50.0) {
        let rf = forgetting_curve(&[near, near + step], xi1, xi2).unwrap();
        prop_assert!(rf[1] < rf[0]);
        prop_assert!(rf[1] > 0.0 && rf[0] <= xi1);
    }

    #[test]
    fn masked_softmax_rows_sum_to_one(values in prop::collection::vec(-30.0f64..30.0, 25), seed in 0u32..1000) {
        let mut tape = Tape::new();
        let x = tape.leaf(Array2::from_shape_vec((5, 5), values).unwrap());
        let mask = Array2::from_shape_fn((5, 5), |(i, j)| j <= i || (seed >> ((i * 5 + j) % 31)) & 1 == 1);
        let s = tape.masked_softmax(x, &mask);
        for (row, m) in tape.value(s).rows().into_iter().zip(mask.rows()) {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().zip(m).all(|(v, keep)| *keep || *v == 0.0));
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, 1..40), step in any::<u64>()) {
        let n = values.len();
        let mut tensors = BTreeMap::new();
        tensors.insert("a".to_owned(), Array2::from_shape_vec((1, n), values.clone()).unwrap());
        tensors.insert("b.c".to_owned(), Array2::from_shape_vec((n, 1), values).unwrap());
        let rng = RngState::capture(&rand_chacha::ChaCha8Rng::seed_from_u64(step));
        let ckpt = Checkpoint::new(serde_json::json!({ "k": [1.5, 1e-300] }), tensors, step, Some(rng));
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::read(&bytes[..]).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, ckpt);
    }
}

#[test]
fn adjusted_kappa_can_exceed_one() {
    let t = ContingencyTable { a: 10, b: 0, c: 1, d: 10 };
    assert_eq!(try_coefficient(&t, CoefficientKind::AdjustedKappa), Some(200.0 / 121.0));
}

fn ranking_strategy() -> impl Strategy<Value = (Vec<NeighborRanking>, Vec<f64>)> {
    let row = prop::collection::btree_map(0usize..6, 0u8..4, 0..6);
    (prop::collection::vec(row, 4), prop::collection::vec(-2.0f64..2.0, 24)).prop_map(|(rows, m)| {
        let rankings = rows
            .into_iter()
            .enumerate()
            .map(|(r, ranks)| {
                let mut ranked: Vec<(usize, u8)> = ranks.into_iter().collect();
                ranked.sort_by_key(|&(n, k)| (k, n));
                NeighborRanking { row: r, ranked }
            })
            .collect();
        (rankings, m)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn log_posterior_gradient_matches_differences((rankings, values) in ranking_strategy()) {
        let d = build_partial_order(rankings);
        let m = Array2::from_shape_vec((4, 6), values).unwrap();
        let cfg = CalibrationConfig::default();
        let g = log_posterior_gradient(&m, &d, &cfg);
        let h = 1e-6;
        for ((i, j), gij) in g.indexed_iter() {
            let (mut up, mut down) = (m.clone(), m.clone());
            up[[i, j]] += h;
            down[[i, j]] -= h;
            let fd = (log_posterior(&up, &d, &cfg).unwrap() - log_posterior(&down, &d, &cfg).unwrap()) / (2.0 * h);
            prop_assert!((fd - gij).abs() < 1e-6 * (1.0 + fd.abs()), "({i},{j}) fd {fd} analytic {gij}");
        }
    }

    #[test]
    fn calibration_trace_is_monotone((rankings, values) in ranking_strategy()) {
        let d = build_partial_order(rankings);
        let raw = Array2::from_shape_vec((4, 6), values).unwrap();
        let out = calibrate(&raw, &d, &CalibrationConfig::default()).unwrap();
        prop_assert!(out.trace.windows(2).all(|w| w[1] >= w[0]), "{:?}", out.trace);
    }

    #[test]
    fn gcn_commutes_with_exercise_permutation(edges in prop::collection::vec((0usize..9, 0usize..9, 0.1f64..1.0), 1..30), seed in 0u64..100) {
        // 2 skills, 4 exercises, 3 students
        let layout = NodeLayout { n_skills: 2, n_exercises: 4, n_students: 3 };
        let n = layout.len();
        let perm = [0, 1, 5, 2, 4, 3, 6, 7, 8];
        let mut sym: Vec<(usize, usize, f64)> = Vec::new();
        for (a, b, w) in &edges {
            sym.push((*a, *b, *w));
            sym.push((*b, *a, *w));
        }
        let permuted: Vec<(usize, usize, f64)> = sym.iter().map(|(a, b, w)| (perm[*a], perm[*b], *w)).collect();
        let features = Array2::from_shape_fn((n, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let mut moved = Array2::zeros((n, 3));
        for (i, to) in perm.iter().enumerate() {
            moved.row_mut(*to).assign(&features.row(i));
        }
        let params = GcnParams::init(3, &GcnConfig { layers: 2, dim: 5, seed, normalize: false });
        for normalize in [false, true] {
            let g1 = GcnGraph::from_adjacency(layout, &Csr::from_triplets(n, n, &sym), normalize).unwrap();
            let g2 = GcnGraph::from_adjacency(layout, &Csr::from_triplets(n, n, &permuted), normalize).unwrap();
            let e1 = gcn_forward(&g1, &features, &params).unwrap();
            let e2 = gcn_forward(&g2, &moved, &params).unwrap();
            prop_assert!((&e1.skill - &e2.skill).iter().all(|v| v.abs() < 1e-12));
            for e in 0..4 {
                let to = perm[layout.exercise(e)] - layout.n_skills;
                prop_assert!((&e1.exercise.row(e) - &e2.exercise.row(to)).iter().all(|v| v.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn segment_scores_match_prefix_scores(steps in prop::collection::vec((0usize..5, any::<bool>(), 0i64..50_000), 1..12), seed in 0u64..50) {
        let config = ModelConfig { d_model: 4, ffn_dim: 4, max_seq: 12, clip_k: 2, dropout: 0.0, ..ModelConfig::default() };
        let params = ModelParameters::init(&config, 5, seed);
        let a = Array2::from_shape_fn((5, 5), |(i, j)| if i != j && (i + j + seed as usize).is_multiple_of(3) { 0.8 } else { 0.0 });
        let mut seg = Segment::default();
        let mut t = 0;
        for (e, r, gap) in &steps {
            t += gap;
            seg.push(*e, *r, t);
        }
        let full = score_segment(&seg, &a, &params, &config).unwrap();
        for cut in 1..seg.len() {
            let prefix = Segment {
                exercises: seg.exercises[..cut].to_vec(),
                responses: seg.responses[..cut].to_vec(),
                timestamps: seg.timestamps[..cut].to_vec(),
            };
            let short = score_segment(&prefix, &a, &params, &config).unwrap();
            prop_assert!(short.iter().zip(&full).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn interaction_csv_round_trips(seed in 0u64..1000, n_students in 1usize..6, n_steps in 1usize..8) {
        let bench = synthetic_benchmark(&SyntheticConfig { seed, n_students, n_steps, ..SyntheticConfig::default() }).unwrap();
        let mut first = Vec::new();
        bench.log.write_csv(&mut first).unwrap();
        let parsed = parse_interactions(&first[..], ParseMode::Strict).unwrap();
        prop_assert_eq!(parsed.skipped, 0);
        let mut second = Vec::new();
        parsed.log.write_csv(&mut second).unwrap();
        prop_assert_eq!(first, second);
        prop_assert_eq!(parsed.log.len(), bench.log.len());
    }
}
