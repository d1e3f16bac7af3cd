//! End-to-end checks of the distance-count chain: rasterized sets through
//! the FFT correlation field, the window norms that are supposed to control
//! the counts, and the assembled inequality report.

mod common;

use common::{full, random_set, square_pair_factor, stripes};
use denselab_core::counting::{count_distance, DistanceMethod};
use denselab_core::grid::balanced_part;
use denselab_core::norms::u1_norm;
use denselab_core::vonneumann::{check_gvn_distance, GvnParams, Verdict};

#[test]
fn pair_count_tracks_closed_form_on_fine_grids() {
    let f = full(2, 512);
    for lambda in [0.05, 0.1, 0.2] {
        let r = count_distance(&f, &f, lambda, DistanceMethod::Fft, 64, 3).unwrap();
        let want = square_pair_factor(lambda);
        let rel = (r.value - want).abs() / want;
        assert!(rel < 4e-3, "lambda {lambda}: {} vs {want} (rel {rel:.2e})", r.value);
    }
}

#[test]
fn resonant_stripes_dominate_random_sets_in_count_and_norm() {
    let n = 256;
    let lambda = 0.25;
    // Stripes of full period `lambda`, so some directions realign the sign
    // pattern exactly; a balanced random set has nothing to realign.
    let res = stripes(n, 32, 0.5);
    let rnd_set = random_set(2, n, 0.5, 1.0 / 64.0, 12);
    let (rnd, _) = balanced_part(&rnd_set, None).unwrap();

    let t_res = count_distance(&res, &res, lambda, DistanceMethod::Fft, 64, 1).unwrap();
    let t_rnd = count_distance(&rnd, &rnd, lambda, DistanceMethod::Fft, 64, 1).unwrap();
    assert!(t_res.value.abs() > 0.02, "resonant count {}", t_res.value);
    assert!(t_rnd.value.abs() < 0.01, "random count {}", t_rnd.value);
    assert!(t_res.value.abs() > 3.0 * t_rnd.value.abs());

    let u_res = u1_norm(&res, lambda / 2.0).unwrap();
    let u_rnd = u1_norm(&rnd, lambda / 2.0).unwrap();
    assert!(u_res > 0.15, "stripe window norm {u_res}");
    assert!(u_rnd < 0.1, "random window norm {u_rnd}");
    assert!(u_res > 2.0 * u_rnd);
}

#[test]
fn distance_inequality_chain_holds_on_megacell_grid() {
    let n = 512;
    let a = random_set(2, n, 0.5, 1.0 / 32.0, 5);
    let (f, alpha) = balanced_part(&a, None).unwrap();
    assert!((alpha - 0.5).abs() < 0.05, "density {alpha}");

    let params = GvnParams { budget: 32, seed: 9, ..Default::default() };
    let rep = check_gvn_distance(&f, &f, 0.25, 0.36, 1.0, &params).unwrap();

    assert_ne!(rep.verdict, Verdict::Violated);
    assert!(!rep.exact_step_margins.is_empty());
    for &m in &rep.exact_step_margins {
        assert!(m >= -1e-8 * (1.0 + rep.lhs.abs()), "exact step margin {m}");
    }
    assert!(rep.rhs_main >= 0.0);
    assert!(rep.rhs_error > 0.0);
    assert!(rep.numeric_error.is_finite() && rep.numeric_error < 0.05);
    assert_eq!(rep.envelopes.len(), 1);
    // The balanced set is close to uniform at the window scale, so the norm
    // side should sit well below the trivial bound 1.
    assert!(rep.rhs_main < 0.25, "norm product {}", rep.rhs_main);
}
