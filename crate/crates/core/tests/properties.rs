//! Algebraic invariants of the likelihood, prediction and grouped model.

mod common;

use bugsize::grouped::{
    grouped_log_likelihood, grouped_remaining_size, total_bugs, GroupedData, GroupedDraw, ObservedGroup,
};
use bugsize::model::{
    detection_probability, log_likelihood, log_prior, AugmentedModel, DetectionHistory, DetectionRecord,
    ParameterDraw, PhasePlan, Priors,
};
use bugsize::predictive::{self, PredictionConfig, PredictiveDraw};
use proptest::prelude::*;

fn unit() -> impl Strategy<Value = f64> {
    (1e-6f64..1.0 - 1e-6).prop_filter("open interval", |x| *x > 0.0 && *x < 1.0)
}

proptest! {
    #[test]
    fn detection_probability_is_monotone(r in unit(), dr in 0.0f64..0.5, s in 0u64..10_000, ds in 1u64..100) {
        let p = detection_probability(r, s).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(detection_probability(r, s + ds).unwrap() >= p);
        let r2 = (r + dr).min(1.0 - 1e-9);
        prop_assert!(detection_probability(r2, s).unwrap() >= p);
        prop_assert_eq!(detection_probability(r, 0).unwrap(), 0.0);
    }

    /// A single bug's possible histories (detected at phase j with y
    /// detections, or never) have probabilities summing to one.
    #[test]
    fn history_probabilities_sum_to_one(
        inputs in prop::collection::vec(0u64..=3, 1..=2),
        r in unit(),
        size in 0u64..15,
    ) {
        let plan = PhasePlan::observed(inputs.clone()).unwrap();
        let mut total = 0.0;
        for (j, &t) in inputs.iter().enumerate() {
            for y in 1..=t {
                let h = DetectionHistory::new(plan.clone(), vec![DetectionRecord {
                    bug_id: "a".into(), phase: j + 1, count: y,
                }]).unwrap();
                let m = AugmentedModel::new(h, 2).unwrap();
                total += m.rows()[0].log_likelihood((-r).ln_1p(), size).exp();
            }
        }
        let m = AugmentedModel::new(DetectionHistory::new(plan, vec![]).unwrap(), 1).unwrap();
        total += m.rows()[0].log_likelihood((-r).ln_1p(), size).exp();
        prop_assert!((total - 1.0).abs() < 1e-9, "sum {}", total);
    }

    #[test]
    fn augmented_rows_are_exchangeable(
        r in unit(),
        psi in unit(),
        aug in prop::collection::vec((any::<bool>(), 0u64..40, 0.1f64..30.0), 2..8),
        rotate in 0usize..8,
    ) {
        let m = common::model(vec![20, 30], &[(1, 2), (2, 1)], 2 + aug.len());
        let priors = Priors::new(1.0, 0.1).unwrap();
        let build = |rows: &[(bool, u64, f64)]| ParameterDraw {
            r,
            psi,
            z: [true, true].into_iter().chain(rows.iter().map(|a| a.0)).collect(),
            sizes: [3, 5].into_iter().chain(rows.iter().map(|a| a.1)).collect(),
            lambda: [2.0, 2.0].into_iter().chain(rows.iter().map(|a| a.2)).collect(),
        };
        let mut permuted = aug.clone();
        permuted.rotate_left(rotate % aug.len());
        let (a, b) = (build(&aug), build(&permuted));
        let tol = 1e-9 * (1.0 + log_likelihood(&a, &m).abs());
        prop_assert!((log_likelihood(&a, &m) - log_likelihood(&b, &m)).abs() < tol);
        prop_assert!((log_prior(&a, &priors) - log_prior(&b, &priors)).abs() < 1e-9 * (1.0 + log_prior(&a, &priors).abs()));
    }
}

fn draws_strategy() -> impl Strategy<Value = Vec<PredictiveDraw>> {
    prop::collection::vec(
        (
            1e-4f64..0.2,
            prop::collection::vec(0u64..50, 6),
            prop::option::of(prop::collection::vec(1u64..4, 6)),
        ),
        1..25,
    )
    .prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(k, (r, sizes, multiplicity))| PredictiveDraw {
                chain: k % 3,
                iteration: k + 1,
                r,
                sizes,
                multiplicity,
            })
            .collect()
    })
}

const OBSERVED: [Option<usize>; 6] = [Some(1), Some(2), None, None, None, None];

proptest! {
    #[test]
    fn reliability_monotone_and_sizes_conserved(
        draws in draws_strategy(),
        future in prop::collection::vec(0u64..30, 1..12),
        seed in any::<u64>(),
    ) {
        let plan = PhasePlan::observed(vec![10, 10]).unwrap();
        let cfg = PredictionConfig::new(&plan, future, 20.0, 0.9).unwrap();
        let res = predictive::predict(&draws, &OBSERVED, &cfg, seed).unwrap();
        let eps = [0.5, 5.0, 20.0, 60.0, 1e9, f64::INFINITY];
        let curves: Vec<Vec<f64>> = eps.iter().map(|&e| res.reliability_at(e)).collect();
        for c in &curves {
            prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
        }
        for w in curves.windows(2) {
            prop_assert!(w[0].iter().zip(&w[1]).all(|(a, b)| a <= b));
        }
        prop_assert!(curves.last().unwrap().iter().all(|&g| g == 1.0));
        for (p, d) in res.draws.iter().zip(&draws) {
            let total = d.total_size();
            for j in 0..cfg.plan.horizon() {
                prop_assert_eq!(p.trajectories.detected[j] + p.trajectories.remaining[j], total);
            }
        }
    }

    #[test]
    fn prediction_ignores_draw_order(draws in draws_strategy(), seed in any::<u64>(), rotate in 0usize..25) {
        let plan = PhasePlan::observed(vec![10, 10]).unwrap();
        let cfg = PredictionConfig::uniform(&plan, 12, 15, 30.0, 0.8).unwrap();
        let a = predictive::predict(&draws, &OBSERVED, &cfg, seed).unwrap();
        let mut shuffled = draws.clone();
        shuffled.rotate_left(rotate % draws.len());
        shuffled.reverse();
        let b = predictive::predict(&shuffled, &OBSERVED, &cfg, seed).unwrap();
        prop_assert_eq!(&a.reliability, &b.reliability);
        prop_assert_eq!(a.crossing_phase, b.crossing_phase);
        for p in &a.draws {
            let q = b.draws.iter().find(|q| q.chain == p.chain && q.iteration == p.iteration).unwrap();
            prop_assert_eq!(p, q);
        }
    }

    #[test]
    fn zero_future_inputs_freeze_remaining_size(draws in draws_strategy(), extra in 1usize..8) {
        let plan = PhasePlan::observed(vec![10, 10]).unwrap();
        let cfg = PredictionConfig::new(&plan, vec![0; extra], 5.0, 0.9).unwrap();
        let res = predictive::predict(&draws, &OBSERVED, &cfg, 3).unwrap();
        for p in &res.draws {
            let b_q = p.trajectories.remaining[1];
            prop_assert!(p.trajectories.remaining[2..].iter().all(|&b| b == b_q));
        }
    }

    /// Singleton groups with one bug per undetected group reproduce the
    /// ungrouped likelihood row by row, along with N and B_Q.
    #[test]
    fn singleton_groups_match_ungrouped(
        r in unit(),
        psi in unit(),
        detected in prop::collection::vec((1usize..=3, 1u64..4), 0..5),
        aug in prop::collection::vec((any::<bool>(), 0u64..30), 1..6),
    ) {
        let inputs = vec![4u64, 5, 6];
        let plan = PhasePlan::observed(inputs.clone()).unwrap();
        let m = detected.len() + aug.len();
        let model = common::model(inputs, &detected, m);
        let groups = detected.iter().enumerate().map(|(k, &(phase, count))| ObservedGroup {
            group_id: format!("b{k:04}"), phase, detected: count, size: 1,
        }).collect();
        let gdata = GroupedData::new(plan, groups, m, 0).unwrap();
        let gmodel = gdata.augmented_model().unwrap();
        prop_assert_eq!(gmodel.rows(), model.rows());

        let draw = ParameterDraw {
            r,
            psi,
            z: detected.iter().map(|_| true).chain(aug.iter().map(|a| a.0)).collect(),
            sizes: detected.iter().map(|&(_, c)| c).chain(aug.iter().map(|a| a.1)).collect(),
            lambda: vec![1.0; m],
        };
        let mut gdraw = GroupedDraw::from_parameters(&draw);
        for g in detected.len()..m {
            gdraw.undetected_counts[g] = gdraw.z[g] as u64;
        }
        let log_miss = (-r).ln_1p();
        for (i, row) in model.rows().iter().enumerate() {
            if draw.z[i] {
                prop_assert_eq!(
                    row.log_likelihood(log_miss, draw.sizes[i]),
                    gmodel.rows()[i].log_likelihood(log_miss, gdraw.sizes[i])
                );
            }
        }
        prop_assert_eq!(grouped_log_likelihood(&gdraw, &gdata).unwrap(), log_likelihood(&draw, &model));
        prop_assert_eq!(total_bugs(&gdraw, &gdata), draw.n_included() as u64);
        prop_assert_eq!(grouped_remaining_size(&gdraw, &gdata), draw.remaining_size(&model));
    }
}
