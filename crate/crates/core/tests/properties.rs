//! Property tests for invariants that hold for every input, not just the
//! fixtures in the unit tests.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sharelens::blp::{invert_cell, Acceleration, ChoiceModel, InversionOptions};
use sharelens::diagnostics::{metrics, placebo_test, PlaceboMode};
use sharelens::embed::{angular_distance, panel_isolation, EmbeddingConfig, IsolationScope, ISOL_MEAN, ISOL_STD};
use sharelens::estimate::{fit_iv, fit_model, fit_quantile, AbsorbOptions, Instruments, IvMethod, ModelSpec, QuantileOptions, Vcov};
use sharelens::panel::{compute_shares, lag_and_standardize, Design, DesignSpec, MarketPanel, Transform, ZeroPolicy};
use sharelens::synth::{generate_panel, SimDims, SyntheticTruth};

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn small_panel(seed: u64, nests: usize, markets: usize, alternatives: usize, periods: usize) -> MarketPanel {
    let truth = SyntheticTruth {
        nests,
        reviews_per_period: 0,
        seed,
        ..Default::default()
    };
    generate_panel(&truth, SimDims { markets, alternatives, periods }).unwrap().panel
}

fn unit_vector() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 5).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Inside shares of one market: positive and summing below one.
fn inside_shares(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, 2..=max).prop_flat_map(|w| {
        (Just(w), 0.05f64..0.9).prop_map(|(w, s0)| {
            let total: f64 = w.iter().sum();
            w.iter().map(|x| x / total * (1.0 - s0)).collect()
        })
    })
}

proptest! {
    #![proptest_config(cases(24))]

    #[test]
    fn shares_lie_on_the_simplex(seed in 0u64..10_000, nests in 1usize..4) {
        let panel = small_panel(seed, nests, 3, 6, 3);
        let table = compute_shares(&panel, ZeroPolicy::Drop).unwrap();
        let mut by_cell: HashMap<(String, i64), (f64, f64)> = HashMap::new();
        for r in &table.rows {
            prop_assert!(r.share > 0.0);
            let e = by_cell.entry((r.key.market.clone(), r.key.period)).or_insert((0.0, r.outside_share));
            e.0 += r.share;
            prop_assert_eq!(e.1, r.outside_share);
        }
        for (inside, outside) in by_cell.values() {
            prop_assert!((inside + outside - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn within_nest_shares_sum_to_one(seed in 0u64..10_000, nests in 1usize..4) {
        let panel = small_panel(seed, nests, 3, 6, 3);
        let table = compute_shares(&panel, ZeroPolicy::Drop).unwrap();
        let mut sums: HashMap<(String, i64, String), f64> = HashMap::new();
        for r in &table.rows {
            *sums.entry((r.key.market.clone(), r.key.period, panel.nest[r.obs].clone())).or_default() += r.within_group_share;
        }
        for s in sums.values() {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_delta_reproduces_shares(seed in 0u64..10_000) {
        let panel = small_panel(seed, 2, 3, 6, 3);
        let table = compute_shares(&panel, ZeroPolicy::Drop).unwrap();
        let mut delta = vec![f64::NAN; panel.len()];
        let mut share = vec![f64::NAN; panel.len()];
        for r in &table.rows {
            delta[r.obs] = r.delta;
            share[r.obs] = r.share;
        }
        let logit = ChoiceModel::logit();
        for cell in panel.cells() {
            let rows: Vec<usize> = cell.rows.iter().copied().filter(|&r| delta[r].is_finite()).collect();
            let local: Vec<f64> = rows.iter().map(|&r| delta[r]).collect();
            let (s, _) = logit.cell_shares(&rows, &local).unwrap();
            for (k, &r) in rows.iter().enumerate() {
                prop_assert!((s[k] - share[r]).abs() < 1e-10, "{} vs {} in {:?}", s[k], share[r], panel.keys[r]);
            }
        }
    }

    #[test]
    fn lagged_columns_ignore_period_offsets(seed in 0u64..10_000, shift in -500i64..500) {
        let panel = small_panel(seed, 2, 2, 5, 4);
        let mut moved = panel.clone();
        moved.keys.iter_mut().for_each(|k| k.period += shift);
        for t in [Transform::PctChangeThenZscore, Transform::ZscoreWithinCategory] {
            let a = lag_and_standardize(&panel, "x1", t, None, 1).unwrap();
            let b = lag_and_standardize(&moved, "x1", t, None, 1).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}

proptest! {
    #![proptest_config(cases(2000))]

    #[test]
    fn angular_distance_is_a_metric(u in unit_vector(), v in unit_vector(), w in unit_vector()) {
        let (u, v, w) = (normalized(&u), normalized(&v), normalized(&w));
        let d = |a: &[f64], b: &[f64]| angular_distance(a, b).unwrap();
        prop_assert!(d(&u, &v) >= 0.0 && d(&u, &v) <= 1.0);
        prop_assert_eq!(d(&u, &v), d(&v, &u));
        prop_assert!(d(&u, &u) < 1e-7);
        prop_assert!(d(&u, &w) <= d(&u, &v) + d(&v, &w) + 1e-9);
    }

    #[test]
    fn angular_distance_ignores_positive_scale(u in unit_vector(), v in unit_vector(), c in 1e-3f64..1e3) {
        let scaled: Vec<f64> = u.iter().map(|x| c * x).collect();
        let a = angular_distance(&scaled, &v).unwrap();
        let b = angular_distance(&u, &v).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        let flipped: Vec<f64> = u.iter().map(|x| -c * x).collect();
        prop_assert!((angular_distance(&flipped, &u).unwrap() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn regression_metrics_are_consistent(pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..60)) {
        let (p, a): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let m = metrics(&p, &a);
        prop_assert!((m.mse - m.rmse * m.rmse).abs() <= 1e-9 * m.mse.max(1.0));
        prop_assert!(m.mad <= m.rmse + 1e-12);
    }
}

proptest! {
    #![proptest_config(cases(500))]

    #[test]
    fn logit_contraction_is_nonexpansive(
        s in inside_shares(8),
        seed in any::<u64>(),
    ) {
        let j = s.len();
        let rows: Vec<usize> = (0..j).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |scale: f64| -> Vec<f64> { (0..j).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); scale * z }).collect() };
        let (d1, d2) = (draw(3.0), draw(3.0));
        let model = ChoiceModel::logit();
        let map = |d: &[f64]| -> Vec<f64> {
            let (pred, _) = model.cell_shares(&rows, d).unwrap();
            d.iter().zip(&s).zip(&pred).map(|((d, o), p)| d + o.ln() - p.ln()).collect()
        };
        let (f1, f2) = (map(&d1), map(&d2));
        let sup = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(sup(&f1, &f2) <= sup(&d1, &d2) * (1.0 + 1e-12));
    }

    #[test]
    fn squarem_agrees_with_plain_iteration(
        s in inside_shares(8),
        sigma in 0.0f64..0.8,
        labels in prop::collection::vec(0usize..3, 8),
    ) {
        let j = s.len();
        let rows: Vec<usize> = (0..j).collect();
        let model = ChoiceModel::nested(sigma, labels[..j].to_vec()).unwrap();
        let tol = 1e-11;
        let opts = |accelerate| InversionOptions { tol, max_iter: 200_000, accelerate };
        let plain = invert_cell(&model, &rows, &s, None, &opts(Acceleration::None)).unwrap();
        let fast = invert_cell(&model, &rows, &s, None, &opts(Acceleration::Squarem)).unwrap();
        let s0 = 1.0 - s.iter().sum::<f64>();
        let bound = 10.0 * tol / ((1.0 - sigma) * s0);
        for (a, b) in plain.delta.iter().zip(&fast.delta) {
            prop_assert!((a - b).abs() <= bound, "{a} vs {b}");
        }
    }

    #[test]
    fn nested_shares_satisfy_the_inversion_identity(
        delta in prop::collection::vec(-3.0f64..2.0, 2..9),
        sigma in 0.0f64..0.95,
        labels in prop::collection::vec(0usize..3, 9),
    ) {
        let j = delta.len();
        let rows: Vec<usize> = (0..j).collect();
        let g = labels[..j].to_vec();
        let model = ChoiceModel::nested(sigma, g.clone()).unwrap();
        let (s, s0) = model.cell_shares(&rows, &delta).unwrap();
        for k in 0..j {
            let nest_total: f64 = (0..j).filter(|&m| g[m] == g[k]).map(|m| s[m]).sum();
            let recovered = s[k].ln() - s0.ln() - sigma * (s[k] / nest_total).ln();
            prop_assert!((recovered - delta[k]).abs() < 1e-10, "{recovered} vs {}", delta[k]);
        }
    }
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn exactly_identified_iv_residuals_are_orthogonal_to_instruments(seed in any::<u64>(), n in 30usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
        let (mut x, mut y, mut z) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let zi = draw();
            let e = draw();
            let xi = zi + 0.5 * e + draw();
            x.push(xi);
            y.push(1.0 - 0.7 * xi + e);
            z.push(zi);
        }
        let design = Design {
            y: DVector::from_vec(y),
            x: DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x[i] }),
            labels: vec!["const".into(), "x".into()],
            rows: (0..n).collect(),
            fixed_effects: Vec::new(),
            dropped_missing: 0,
            warnings: Vec::new(),
        };
        let inst = Instruments { labels: vec!["z".into()], values: DMatrix::from_column_slice(n, 1, &z) };
        let r = fit_iv(&design, &["x".into()], &inst, IvMethod::TwoSls, &Vcov::Robust, &AbsorbOptions::default()).unwrap();
        let scale = r.residuals.iter().map(|e| e.abs()).sum::<f64>() / n as f64;
        let zx: f64 = z.iter().zip(&r.residuals).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        let one: f64 = r.residuals.iter().sum::<f64>() / n as f64;
        prop_assert!(zx.abs() < 1e-8 * scale.max(1.0));
        prop_assert!(one.abs() < 1e-8 * scale.max(1.0));
    }

    #[test]
    fn conditional_quantiles_do_not_cross(seed in any::<u64>()) {
        let n = 300;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
        let x: Vec<f64> = (0..n).map(|_| draw()).collect();
        let y: Vec<f64> = x.iter().map(|&xi| 1.0 + 2.0 * xi + (1.0 + 0.3 * xi.abs()) * draw()).collect();
        let design = Design {
            y: DVector::from_vec(y),
            x: DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x[i] }),
            labels: vec!["const".into(), "x".into()],
            rows: (0..n).collect(),
            fixed_effects: Vec::new(),
            dropped_missing: 0,
            warnings: Vec::new(),
        };
        let x_bar = x.iter().sum::<f64>() / n as f64;
        let mut last = f64::NEG_INFINITY;
        for tau in [0.1, 0.25, 0.5, 0.75, 0.9] {
            let r = fit_quantile(&design, tau, &QuantileOptions::default()).unwrap();
            let at_mean = r.coefficients[0].estimate + r.coefficients[1].estimate * x_bar;
            prop_assert!(at_mean >= last, "tau {tau}: {at_mean} below {last}");
            last = at_mean;
        }
    }
}

fn review_truth(seed: u64) -> SyntheticTruth {
    SyntheticTruth {
        nests: 3,
        reviews_per_period: 2,
        words_per_review: 20,
        seed,
        ..Default::default()
    }
}

fn quick_embedding(seed: u64) -> EmbeddingConfig {
    EmbeddingConfig {
        dims: 4,
        epochs: 5,
        seed,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(cases(6))]

    #[test]
    fn isolation_dispersion_is_at_most_one_half(seed in 0u64..1000) {
        let sim = generate_panel(&review_truth(seed), SimDims { markets: 2, alternatives: 6, periods: 3 }).unwrap();
        let (_, set) = panel_isolation(&sim.panel, &quick_embedding(seed), None, IsolationScope::Market).unwrap();
        for (m, s) in set.columns[ISOL_MEAN].iter().zip(&set.columns[ISOL_STD]) {
            if s.is_finite() {
                prop_assert!(*s <= 0.5);
                prop_assert!((0.0..=1.0).contains(m));
            }
        }
    }

    #[test]
    fn editing_one_alternative_moves_its_rivals(seed in 0u64..1000) {
        let sim = generate_panel(&review_truth(seed), SimDims { markets: 2, alternatives: 6, periods: 3 }).unwrap();
        let panel = &sim.panel;
        let target = panel.keys[0].clone();
        let mut edited = panel.clone();
        for r in edited.reviews.iter_mut().filter(|r| r.alt_id == target.alt) {
            r.text = "edited text about something else entirely".into();
        }
        let cfg = quick_embedding(seed);
        let (_, before) = panel_isolation(panel, &cfg, None, IsolationScope::Market).unwrap();
        let (_, after) = panel_isolation(&edited, &cfg, None, IsolationScope::Market).unwrap();
        let moved = (0..panel.len())
            .filter(|&i| panel.keys[i].market == target.market && panel.keys[i].alt != target.alt)
            .any(|i| before.columns[ISOL_MEAN][i] != after.columns[ISOL_MEAN][i]);
        prop_assert!(moved);
    }
}

#[test]
fn placebo_rejection_rates_are_nominal_under_the_null() {
    let reps = 500u64;
    let spec = ModelSpec {
        design: DesignSpec {
            regressors: vec!["x1".into(), "price".into(), "rec_trending".into()],
            fixed_effects: vec!["alt".into(), "market*period".into()],
            ..Default::default()
        },
        ..Default::default()
    };
    let mut baseline = 0;
    let mut shuffled = 0;
    for rep in 0..reps {
        let truth = SyntheticTruth {
            theta_rec: vec![0.0],
            confounding: 0.0,
            reviews_per_period: 0,
            seed: 50_000 + rep,
            ..Default::default()
        };
        let panel = generate_panel(&truth, SimDims { markets: 4, alternatives: 10, periods: 6 }).unwrap().panel;
        let fit = &fit_model(&panel, &spec).unwrap()[0];
        if fit.coefficient("rec_trending").unwrap().t_stat.abs() >= 1.96 {
            baseline += 1;
        }
        let r = placebo_test(&panel, &spec, PlaceboMode::ShuffleAlternatives, &[rep], None).unwrap();
        if r.runs[0].coefficients[0].t_stat.abs() >= 1.96 {
            shuffled += 1;
        }
    }
    let (b, s) = (baseline as f64 / reps as f64, shuffled as f64 / reps as f64);
    println!("null rejection rates over {reps} panels: baseline {b:.3}, shuffled {s:.3}");
    assert!((0.02..=0.10).contains(&b), "baseline rejection {b}");
    assert!((0.02..=0.10).contains(&s), "shuffled rejection {s}");
}
