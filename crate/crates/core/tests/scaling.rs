use proptest::prelude::*;
use tempoinv::scaling::{
    build_scale_grid, build_scaling_tensor, build_scaling_tensor_budgeted, kappa_n, kappa_s,
    ScalingTensor,
};
use tempoinv::Error;

fn small_grid() -> impl Strategy<Value = (f64, usize, usize, usize, usize)> {
    (0.1f64..0.5, 4usize..=8, 1usize..=6, 1usize..=4, 8usize..=32)
}

#[test]
fn table2_shape_and_factors() {
    let g = build_scale_grid(0.25, 8, 25, 50.0, 4, 64).unwrap();
    assert_eq!(g.n_star, 400);
    assert!((g.taus[8] - 0.5).abs() < 1e-12);
    assert!((g.taus[24] - 2.0).abs() < 1e-12);
    assert!((g.scales[0] - 0.78125).abs() < 1e-12);
    assert!((g.scales[24] - 6.25).abs() < 1e-12);
    let psi = build_scaling_tensor(&g, 1.0, 0.05).unwrap();
    assert_eq!(psi.values.dim(), (400, 64, 25));
    for j in 0..25 {
        assert_eq!(psi.peak_index(0, j), 0);
    }
}

#[test]
fn kernel_function_examples() {
    assert_eq!(kappa_n(0.0), 1.0);
    assert!(kappa_n(2.0).abs() < 1e-15);
    assert!((kappa_n(0.5) - 2.0 / std::f64::consts::PI).abs() < 1e-12);
    assert_eq!(kappa_s(0.0, 1.0).unwrap(), 1.0);
    assert_eq!(kappa_s(1.2, 1.0).unwrap(), 0.0);
    assert_eq!(kappa_s(1.0, 1.0).unwrap(), 0.0);
    assert!((kappa_s(0.5, 1.0).unwrap() - 0.5).abs() < 1e-12);
    assert!(matches!(kappa_s(0.0, 0.0), Err(Error::Parameter(_))));
}

#[test]
fn toy_grid_partition_of_unity_against_dense_oracle() {
    // oracle: the same double integral at a tenth of the step, summed here
    let g = build_scale_grid(0.32, 4, 3, 50.0, 1, 16).unwrap();
    let psi = build_scaling_tensor(&g, 1.0, 0.05).unwrap();
    let step = 0.005;
    let nodes = (2.0 / step) as usize;
    for j in 0..g.n_scales {
        for m in 0..g.pattern_len {
            let mut col = vec![0.0; g.n_star];
            for q in 0..nodes {
                let jt = j as f64 - 1.0 + (q as f64 + 0.5) * step;
                let w = kappa_s(j as f64 - jt, 1.0).unwrap() * step;
                let c = g.scale_at(jt) * m as f64;
                for (n, v) in col.iter_mut().enumerate() {
                    *v += w * kappa_n(n as f64 - c);
                }
            }
            for n in 0..g.n_star {
                assert!((col[n] - psi.values[[n, m, j]]).abs() < 1e-3);
            }
            if psi.is_interior(m, j) {
                let s: f64 = col.iter().sum();
                assert!((0.98..=1.02).contains(&s), "column ({m}, {j}) sums to {s}");
                assert!((0.98..=1.02).contains(&psi.column_sum(m, j)));
            }
        }
    }
}

#[test]
fn capacity_budget_is_enforced() {
    let g = build_scale_grid(0.25, 8, 25, 50.0, 4, 64).unwrap();
    let r = build_scaling_tensor_budgeted(&g, 1.0, 0.05, 400 * 64 * 25 - 1);
    assert!(matches!(r, Err(Error::Capacity(_))));
    assert!(matches!(build_scaling_tensor(&g, 1.0, 0.6), Err(Error::Parameter(_))));
    assert!(matches!(build_scaling_tensor(&g, -1.0, 0.05), Err(Error::Parameter(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kappa_s_integrates_to_one(alpha in 0.2f64..200.0) {
        let n = 20_000;
        let h = 2.0 / alpha / n as f64;
        let total: f64 = (0..n)
            .map(|i| kappa_s(-1.0 / alpha + (i as f64 + 0.5) * h, alpha).unwrap() * h)
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tensor_invariants((tau0, t, s, b, m) in small_grid()) {
        let g = build_scale_grid(tau0, t, s, 50.0, b, m).unwrap();
        let psi = build_scaling_tensor(&g, 1.0, 0.05).unwrap();
        let again = build_scaling_tensor(&g, 1.0, 0.05).unwrap();
        prop_assert!(psi.values.iter().zip(again.values.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let half = build_scaling_tensor(&g, 1.0, 0.025).unwrap();
        let diff = psi.values.iter().zip(half.values.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(diff <= 1e-3, "halving changed values by {diff}");
        for j in 0..s {
            for mm in 0..m {
                if psi.is_interior(mm, j) {
                    prop_assert!((psi.column_sum(mm, j) - 1.0).abs() <= 0.02);
                }
            }
        }
    }

    // coarser grids smooth over a wider, lopsided range of scales and can
    // move the peak past one frame (seen at 1.04 with 4 bins per octave)
    #[test]
    fn peaks_follow_the_scaled_position(tau0 in 0.1f64..0.5, s in 1usize..=8, b in 1usize..=4, m in 8usize..=48) {
        let g = build_scale_grid(tau0, 8, s, 50.0, b, m).unwrap();
        let psi = build_scaling_tensor(&g, 1.0, 0.05).unwrap();
        for j in 0..s {
            for mm in 0..m {
                let err = (psi.peak_index(mm, j) as f64 - g.scales[j] * mm as f64).abs();
                prop_assert!(err <= 1.0, "peak of ({mm}, {j}) off by {err}");
            }
        }
    }

    #[test]
    fn large_alpha_is_plain_sinc((tau0, t, s, b, m) in small_grid()) {
        let g = build_scale_grid(tau0, t, s, 50.0, b, m).unwrap();
        let psi = build_scaling_tensor(&g, 1e4, 0.05).unwrap();
        for j in 0..s {
            for mm in 0..m {
                for n in 0..g.n_star {
                    let want = kappa_n(n as f64 - g.scales[j] * mm as f64);
                    prop_assert!((psi.values[[n, mm, j]] - want).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn file_round_trip((tau0, t, s, b, m) in small_grid(), alpha in 0.5f64..5.0) {
        let g = build_scale_grid(tau0, t, s, 50.0, b, m).unwrap();
        let psi = build_scaling_tensor(&g, alpha, 0.05).unwrap();
        let mut bytes = Vec::new();
        psi.write_to(&mut bytes).unwrap();
        prop_assert_eq!(&bytes[..4], b"TIDB");
        let back = ScalingTensor::read_from(&bytes[..]).unwrap();
        prop_assert_eq!(back.values, psi.values);
        prop_assert_eq!(back.grid, g);
    }
}
