mod common;

// Relative errors are norm-wise per parameter tensor. Entry-wise ratios blow
// up on components near zero, where the O(h²) truncation error dominates.

#[test]
fn each_loss_matches_central_differences() {
    for seed in 0..10 {
        for (name, r) in common::loss_checks(seed, common::FD_STEP) {
            assert_eq!(r.kink_crossings, 0);
            assert!(r.max_norm_rel_err < 1e-4, "{name}, seed {seed}: {:.3e}", r.max_norm_rel_err);
        }
    }
}

#[test]
fn loss_errors_shrink_quadratically_with_the_step() {
    for (coarse, fine) in common::loss_checks(2, 1e-3).into_iter().zip(common::loss_checks(2, 1e-4)) {
        let (a, b) = (coarse.1.per_param[0].max_abs_err, fine.1.per_param[0].max_abs_err);
        assert!(b < a / 50.0 || b < 1e-10, "{}: {a:.3e} -> {b:.3e}", coarse.0);
        assert!(fine.1.max_rel_err < 1e-4, "{}: entry-wise {:.3e}", fine.0, fine.1.max_rel_err);
    }
}

#[test]
fn full_objective_matches_central_differences() {
    for seed in 0..10 {
        let r = common::full_objective_check(seed, 1.0);
        assert!(
            r.max_norm_rel_err_smooth < 1e-4,
            "seed {seed}: {:.3e} ({} kink crossings excluded)",
            r.max_norm_rel_err_smooth,
            r.kink_crossings
        );
    }
}

#[test]
fn kink_free_points_agree_entry_wise() {
    for seed in [0, 1] {
        for lambda in [0.1, 1.0] {
            let r = common::full_objective_check(seed, lambda);
            assert_eq!(r.kink_crossings, 0);
            assert!(r.max_rel_err < 1e-4, "seed {seed}, lambda {lambda}: {:.3e}", r.max_rel_err);
        }
    }
}
