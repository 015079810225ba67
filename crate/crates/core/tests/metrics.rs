use mdgnn_core::metrics::{
    cumulative_return, daily_ic, information_ratio, precision_at_k, topk_portfolio, BacktestReport, DayScores,
};
use proptest::prelude::*;
use rand::Rng;

fn day(p: Vec<f64>, y: Vec<f64>) -> DayScores {
    let valid = vec![true; p.len()];
    DayScores {
        day: 0,
        predictions: p,
        returns: y,
        valid,
    }
}

/// Rank of each value counting strictly smaller values plus half the ties.
fn brute_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let less = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn brute_ic(p: &[f64], y: &[f64]) -> f64 {
    let (rp, ry) = (brute_ranks(p), brute_ranks(y));
    let n = p.len() as f64;
    let (mp, my) = (rp.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rp.iter().zip(&ry).map(|(a, b)| (a - mp) * (b - my)).sum();
    let vp: f64 = rp.iter().map(|a| (a - mp).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vp * vy).sqrt()
}

fn random_day(rng: &mut impl Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    // coarse grid so ties occur
    let p = (0..n).map(|_| f64::from(rng.random_range(0..4)) / 4.0).collect();
    let y = (0..n).map(|_| rng.random_range(-0.05..0.05)).collect();
    (p, y)
}

#[test]
fn random_five_stock_days_match_brute_force() {
    let mut rng = mdgnn_core::rng::substream(0, "metrics-oracle");
    let k = 2;
    let mut portfolio = Vec::new();
    for _ in 0..50 {
        let (p, y) = random_day(&mut rng, 5);
        let s = day(p.clone(), y.clone());
        match daily_ic(&s) {
            Some(ic) => assert!((ic - brute_ic(&p, &y)).abs() < 1e-12),
            None => assert!(p.iter().all(|v| *v == p[0])),
        }

        let mut order: Vec<usize> = (0..5).collect();
        order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
        let top = &order[..k];
        let (got_top, ret) = topk_portfolio(&s, k).unwrap();
        assert_eq!(got_top, top);
        assert!((ret - (y[top[0]] + y[top[1]]) / 2.0).abs() < 1e-12);
        let hits = top.iter().filter(|&&i| y[i] > 0.0).count();
        assert_eq!(precision_at_k(&s, k).unwrap(), hits as f64 / k as f64);
        portfolio.push(ret);
    }
    let n = portfolio.len() as f64;
    let mean = portfolio.iter().sum::<f64>() / n;
    let sd = (portfolio.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((information_ratio(&portfolio).unwrap() - mean / sd).abs() < 1e-12);
    let compounded = portfolio.iter().fold(1.0, |a, r| a * (1.0 + r)) - 1.0;
    assert!((cumulative_return(&portfolio) - compounded).abs() < 1e-12);
}

#[test]
fn portfolio_degenerate_sizes() {
    let s = day(vec![0.2, 0.9, 0.4], vec![0.01, -0.02, 0.04]);
    assert_eq!(topk_portfolio(&s, 3).unwrap().1, (0.01 - 0.02 + 0.04) / 3.0);
    assert_eq!(topk_portfolio(&s, 1).unwrap(), (vec![1], -0.02));
}

#[test]
fn invalid_stocks_are_excluded_and_degenerate_days_skipped() {
    let scores = DayScores::new(3, vec![0.9, 0.1, 0.5], &[None, Some(0.02), Some(-0.01)]).unwrap();
    assert_eq!(topk_portfolio(&scores, 1).unwrap(), (vec![2], -0.01));
    let lonely = DayScores::new(4, vec![0.9, 0.1, 0.5], &[None, Some(0.02), None]).unwrap();
    let r = BacktestReport::build("h".into(), 2, &[(0, scores.clone()), (0, lonely)]);
    assert_eq!(r.aggregates.ic_days, 1);
    assert_eq!(r.aggregates.portfolio_days, 1);
    assert_eq!(r.skipped.len(), 2);
    assert!(r.skipped.iter().all(|s| s.day == 4));
    let back = BacktestReport::from_json(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);
    let csv = r.series_csv();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(2).unwrap().starts_with("4,0,,,"));
}

proptest! {
    #[test]
    fn ic_ignores_monotone_rescaling(
        raw in prop::collection::vec((-1.0f64..1.0, -0.1f64..0.1), 3..20),
        scale in 0.01f64..100.0,
        shift in -5.0f64..5.0,
    ) {
        let p: Vec<f64> = raw.iter().map(|r| r.0).collect();
        let y: Vec<f64> = raw.iter().map(|r| r.1).collect();
        let base = day(p.clone(), y.clone());
        let moved = day(p.iter().map(|v| (v * scale + shift).exp()).collect(), y);
        prop_assert_eq!(daily_ic(&base), daily_ic(&moved));
        prop_assert_eq!(topk_portfolio(&base, 2).map(|t| t.0), topk_portfolio(&moved, 2).map(|t| t.0));
    }

    #[test]
    fn ic_is_bounded_and_antisymmetric(raw in prop::collection::vec((-1.0f64..1.0, -0.1f64..0.1), 2..20)) {
        let p: Vec<f64> = raw.iter().map(|r| r.0).collect();
        let y: Vec<f64> = raw.iter().map(|r| r.1).collect();
        if let Some(ic) = daily_ic(&day(p.clone(), y.clone())) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ic));
            let flipped = daily_ic(&day(p.iter().map(|v| -v).collect(), y)).unwrap();
            prop_assert!((ic + flipped).abs() < 1e-12);
        }
    }
}
