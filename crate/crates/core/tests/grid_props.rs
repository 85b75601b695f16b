//! Property tests and brute-force oracle checks for the grid metrics.
//!
//! Every oracle here is written directly from the defining formula and never
//! calls the code under test.

use proptest::prelude::*;

use pogrid_core::grid::metrics::{
    banded_pog_error, occupied_cell_sets, pog_error, reconstruction_rmse,
};
use pogrid_core::grid::quant::{quantize_probability, LEVELS};
use pogrid_core::grid::{GridConfig, PredictedOccupancyGrid};

fn pog_from(rows: usize, cols: usize, probs: Vec<f64>) -> PredictedOccupancyGrid {
    let cfg = GridConfig::ego_centered(rows, cols, 1.0, 1);
    PredictedOccupancyGrid::from_probs(cfg, 1.0, probs).unwrap()
}

/// Probability with a fat atom at zero so occupied sets vary.
fn prob_strategy() -> impl Strategy<Value = f64> {
    prop_oneof![3 => Just(0.0), 5 => 0.0f64..=1.0, 1 => Just(1.0)]
}

fn grid_pair_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
    (1usize..8, 1usize..8).prop_flat_map(|(r, c)| {
        let n = r * c;
        (
            Just(r),
            Just(c),
            prop::collection::vec(prob_strategy(), n),
            prop::collection::vec(prob_strategy(), n),
        )
    })
}

/// Literal Eq.-13 oracle: double loop over cells, K from explicit sets.
fn oracle_pog_error(rows: usize, cols: usize, gt: &[f64], est: &[f64]) -> f64 {
    let mut b = std::collections::HashSet::new();
    let mut d = std::collections::HashSet::new();
    let mut ss = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let p = gt[i * cols + j];
            let q = est[i * cols + j];
            if p > 0.0 {
                b.insert((i, j));
            }
            if q > 0.0 {
                d.insert((i, j));
            }
            ss += (q - p) * (q - p);
        }
    }
    let k = b.symmetric_difference(&d).count();
    if k > 0 {
        (ss / k as f64).sqrt()
    } else if ss == 0.0 || b.is_empty() {
        0.0
    } else {
        (ss / b.len() as f64).sqrt()
    }
}

/// Per-band oracle: partition by ground-truth band, drop doubly-zero cells,
/// Eq.-13 restricted to the band.
fn oracle_banded(
    rows: usize,
    cols: usize,
    gt: &[f64],
    est: &[f64],
) -> ([Option<f64>; 3], [usize; 3]) {
    let mut ss = [0.0f64; 3];
    let mut n = [0usize; 3];
    for i in 0..rows {
        for j in 0..cols {
            let p = gt[i * cols + j];
            let q = est[i * cols + j];
            if p == 0.0 && q == 0.0 {
                continue;
            }
            let band = if p <= 0.2 {
                0
            } else if p <= 0.7 {
                1
            } else {
                2
            };
            ss[band] += (q - p) * (q - p);
            n[band] += 1;
        }
    }
    let mut eps = [None; 3];
    for b in 0..3 {
        if n[b] > 0 {
            eps[b] = Some((ss[b] / n[b] as f64).sqrt());
        }
    }
    (eps, n)
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn quantize_idempotent_and_in_level_set(p in 0.0f64..=1.0) {
        let q = quantize_probability(p).unwrap();
        prop_assert!(LEVELS.contains(&q));
        prop_assert_eq!(quantize_probability(q).unwrap(), q);
    }

    #[test]
    fn quantize_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(
            quantize_probability(lo).unwrap() <= quantize_probability(hi).unwrap()
        );
    }

    #[test]
    fn pog_error_matches_oracle((r, c, g, e) in grid_pair_strategy()) {
        let gt = pog_from(r, c, g.clone());
        let est = pog_from(r, c, e.clone());
        let got = pog_error(&gt, &est).unwrap();
        let want = oracle_pog_error(r, c, &g, &e);
        prop_assert!(rel_close(got, want, 1e-12), "got {got}, want {want}");
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn pog_error_identity_and_symmetry((r, c, g, e) in grid_pair_strategy()) {
        let gt = pog_from(r, c, g);
        let est = pog_from(r, c, e);
        prop_assert_eq!(pog_error(&gt, &gt).unwrap(), 0.0);
        let ab = pog_error(&gt, &est).unwrap();
        let ba = pog_error(&est, &gt).unwrap();
        prop_assert!(rel_close(ab, ba, 1e-12), "asymmetric: {ab} vs {ba}");
    }

    #[test]
    fn k_matches_set_arithmetic((r, c, g, e) in grid_pair_strategy()) {
        let gt = pog_from(r, c, g);
        let est = pog_from(r, c, e);
        let (sets, k) = occupied_cell_sets(&gt, &est).unwrap();
        let inter = sets.gt.intersection(&sets.est).count();
        prop_assert_eq!(k, sets.gt.len() + sets.est.len() - 2 * inter);
    }

    #[test]
    fn banded_matches_oracle((r, c, g, e) in grid_pair_strategy()) {
        let gt = pog_from(r, c, g.clone());
        let est = pog_from(r, c, e.clone());
        let got = banded_pog_error(&gt, &est).unwrap();
        let (eps, n) = oracle_banded(r, c, &g, &e);
        prop_assert_eq!([got.low_cells, got.mid_cells, got.high_cells], n);
        for (a, b) in [(got.eps_low, eps[0]), (got.eps_mid, eps[1]), (got.eps_high, eps[2])] {
            match (a, b) {
                (None, None) => {}
                (Some(x), Some(y)) => prop_assert!(rel_close(x, y, 1e-12)),
                _ => prop_assert!(false, "empty-marker mismatch: {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn rmse_symmetry_and_scaling(
        base in prop::collection::vec(-1.0f64..1.0, 1..32),
        delta in prop::collection::vec(-1.0f64..1.0, 1..32),
        c in -4.0f64..4.0,
    ) {
        let n = base.len().min(delta.len());
        let p = &base[..n];
        let r: Vec<f64> = (0..n).map(|k| p[k] + delta[k]).collect();
        let rc: Vec<f64> = (0..n).map(|k| p[k] + c * delta[k]).collect();
        let e = reconstruction_rmse(&r, p).unwrap();
        let e_sym = reconstruction_rmse(p, &r).unwrap();
        prop_assert!(rel_close(e, e_sym, 1e-12));
        let e_scaled = reconstruction_rmse(&rc, p).unwrap();
        prop_assert!(
            (e_scaled - c.abs() * e).abs() <= 1e-9 * (1.0 + e_scaled.abs()),
            "scaling violated: {e_scaled} vs {}", c.abs() * e
        );
    }
}
