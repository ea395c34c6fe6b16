use heatkernel::fundamental_solution::FundamentalSolution;
use heatkernel::kernel_iteration::GridParams;
use heatkernel::linalg::{Matrix, Vector};
use heatkernel::malliavin::*;
use heatkernel::parametrix::malliavin_z;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn v1(x: f64) -> Vector<f64> {
    Vector::from_slice(&[x])
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn deterministic_linear_ode() {
    let spec = SdeSpec::linear(0.7, 0.0, 1.3);
    let b = simulate_paths(&spec, 3, 1.0, 1000, 1).unwrap();
    for p in 0..3 {
        let end = b.xi[p][1000];
        let disc = 1.3 * (1.0f64 + 0.7e-3).powi(1000);
        assert!((end - disc).abs() < 1e-12 * disc);
        assert!((end - 1.3 * 0.7f64.exp()).abs() < 1.3 * 0.7f64.exp() * 0.7 * 1e-3);
    }
}

#[test]
fn pure_noise_reproduces_increments() {
    let spec = SdeSpec::new(ScalarMap::constant(0.0), ScalarMap::constant(1.0), 0.0);
    let b = simulate_paths(&spec, 4, 1.0, 200, 9).unwrap();
    for p in 0..4 {
        let mut sum = 0.0;
        for k in 0..200 {
            sum += b.increments[p][k];
            assert_eq!(b.xi[p][k + 1], sum);
        }
    }
}

#[test]
fn ornstein_uhlenbeck_stationary_variance() {
    let spec = SdeSpec::ornstein_uhlenbeck(1.0, 1.0, 0.0);
    let b = simulate_paths(&spec, 10_000, 5.0, 1000, 2024).unwrap();
    let sq: Vec<f64> = b.xi.iter().map(|p| p[1000] * p[1000]).collect();
    let (m, se) = mean_se(&sq);
    let want = 0.5 * (1.0 - (-10.0f64).exp());
    assert!((m - want).abs() < 3.0 * se, "{m} vs {want} ± {se}");
}

#[test]
fn streams_do_not_depend_on_batching() {
    let spec = SdeSpec::generic();
    let all = simulate_paths(&spec, 6, 1.0, 100, 5).unwrap();
    let tail = simulate_range(&spec, 4..6, 1.0, 100, 5).unwrap();
    assert_eq!(all.xi[4], tail.xi[0]);
    assert_eq!(all.xi[5], tail.xi[1]);
}

#[test]
fn linear_first_variation_closed_form() {
    let (bb, sigma) = (-0.8, 0.5);
    let b = simulate_paths(&SdeSpec::linear(bb, sigma, 0.2), 2, 1.0, 1000, 3).unwrap();
    for (k, l) in [(0, 1000), (250, 600), (999, 1000), (400, 400)] {
        let d = b.first_variation(1, k, l);
        let want = sigma * (bb * (l - k) as f64 * 1e-3).exp();
        assert!((d - want).abs() < 2e-3 * want, "{d} vs {want}");
    }
    assert_eq!(b.first_variation(1, 600, 250), 0.0);
}

#[test]
fn constant_coefficients_have_flat_variation() {
    let b = simulate_paths(&SdeSpec::new(ScalarMap::constant(0.3), ScalarMap::constant(0.9), 0.0), 2, 1.0, 100, 3).unwrap();
    for k in 0..=100 {
        for l in k..=100 {
            assert_eq!(b.first_variation(0, k, l), 0.9);
        }
    }
    assert!(b.psi(0).iter().all(|&v| v == 0.9));
}

#[test]
fn first_variation_matches_bump_oracle() {
    let spec = SdeSpec::generic();
    let b = simulate_paths(&spec, 8, 1.0, 1000, 17).unwrap();
    for p in 0..8 {
        for k in [0, 137, 500, 900] {
            let fd = bump_derivative(&spec, &b, p, k, 1e-4, |xi| Ok(xi[1000])).unwrap();
            let d = b.first_variation(p, k, 1000);
            assert!((fd - d).abs() <= 1e-6 * d.abs().max(1e-3), "path {p} k {k}: {fd} vs {d}");
        }
    }
}

#[test]
fn ou_psi_is_the_diffusion_constant() {
    let b = simulate_paths(&SdeSpec::ornstein_uhlenbeck(1.0, 0.7, 0.0), 3, 1.0, 500, 3).unwrap();
    let ps = psi(&b);
    for p in &ps.values {
        assert!(p.iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }
}

#[test]
fn psi_grows_under_refinement() {
    // the same Brownian paths sampled at Δ and Δ/2
    let spec = SdeSpec::new(ScalarMap::constant(0.0), ScalarMap::Sine { c0: 0.6, c1: 0.3, omega: 2.0, phase: 0.0 }, 0.0);
    let fine = simulate_paths(&spec, 2000, 1.0, 256, 77).unwrap();
    let coarse_db: Vec<Vec<f64>> = fine.increments.iter().map(|p| p.chunks(2).map(|c| c[0] + c[1]).collect()).collect();
    let coarse = PathBundle::from_increments(&spec, 2.0 / 256.0, coarse_db, 77, 0).unwrap();
    let diff: Vec<f64> = (0..2000).map(|p| fine.psi(p)[0] - coarse.psi(p)[0]).collect();
    let (m, se) = mean_se(&diff);
    assert!(m > -3.0 * se, "{m} ± {se}");
}

#[test]
fn psi_moment_is_stable_in_path_count() {
    let spec = SdeSpec::generic();
    let small = psi(&simulate_paths(&spec, 500, 1.0, 200, 8).unwrap()).moment(4.0, 0.005);
    let large = psi(&simulate_paths(&spec, 4000, 1.0, 200, 8).unwrap()).moment(4.0, 0.005);
    assert!(small.is_finite() && large.is_finite());
    assert!((small / large - 1.0).abs() < 0.1, "{small} vs {large}");
}

#[test]
fn coefficient_chain_rule() {
    let spec = SdeSpec::generic();
    let b = simulate_paths(&spec, 4, 1.0, 400, 21).unwrap();
    let det = RandomCoefficient { terms: vec![RandomTerm { factor: ScalarMap::constant(1.5), profile: Profile::Tanh }], lambda: 2.0 };
    let xind = RandomCoefficient::x_independent();
    let mixed = RandomCoefficient::mixed();
    for p in 0..4 {
        let psi = b.psi(p);
        for (k, l) in [(10, 300), (100, 101), (399, 400)] {
            assert_eq!(det.malliavin_coefficient(&b, p, 0.3, l, k), 0.0);
            let v = b.first_variation(p, k, l);
            assert_eq!(xind.malliavin_coefficient(&b, p, 0.3, l, k), b.xi[p][l].cos() * v);
            for x in [-2.0, 0.0, 0.8] {
                let da = mixed.malliavin_coefficient(&b, p, x, l, k);
                assert!(da.abs() <= mixed.malliavin_bound() * psi[k]);
                let fd = bump_derivative(&spec, &b, p, k, 1e-5, |xi| Ok(mixed.jet(x, xi[l]).a)).unwrap();
                assert!((fd - da).abs() < 1e-8, "{fd} vs {da}");
            }
        }
        assert_eq!(mixed.malliavin_coefficient(&b, p, 0.3, 100, 200), 0.0);
    }
}

#[test]
fn deterministic_coefficient_has_no_malliavin_derivative() {
    let b = simulate_paths(&SdeSpec::generic(), 1, 1.0, 400, 2).unwrap();
    let det = RandomCoefficient {
        terms: vec![
            RandomTerm { factor: ScalarMap::constant(1.5), profile: Profile::One },
            RandomTerm { factor: ScalarMap::constant(0.25), profile: Profile::Tanh },
        ],
        lambda: 2.0,
    };
    let mk = MalliavinKernel::new(&det, &b, 0, 4, 100, GridParams::default()).unwrap();
    let g = mk.gamma(0.5, 1.0, 0.0, 0.0).unwrap();
    assert!(g[0] > 0.0);
    assert_eq!((g[1], g[3]), (0.0, 0.0));
    assert_eq!(mk.phi(0.5, 1.0, 0.0, 0.0).unwrap()[1], 0.0);
}

#[test]
fn x_independent_reduces_to_the_trace_formula() {
    let b = simulate_paths(&SdeSpec::generic(), 1, 1.0, 400, 4).unwrap();
    let coef = RandomCoefficient::x_independent();
    let (pieces, k) = (8, 120);
    let mk = MalliavinKernel::new(&coef, &b, 0, pieces, k, GridParams::default()).unwrap();
    let field = coef.realize(&b, 0, pieces).unwrap();
    let (t, s) = (0.9, 0.1);
    // ∫_s^t D_r a du over the held pieces
    let mut da = 0.0;
    for j in 0..pieces {
        let (lo, hi) = (j as f64 / 8.0, (j + 1) as f64 / 8.0);
        let l = j * 50;
        let overlap = (hi.min(t) - lo.max(s)).max(0.0);
        if l > k {
            da += overlap * b.xi[0][l].cos() * b.first_variation(0, k, l);
        }
    }
    let a = field.integrate_in_time(&v1(0.0), s, t).unwrap().a;
    for x in [-0.7, 0.0, 0.4, 1.5] {
        let g = mk.gamma(x, t, 0.0, s).unwrap();
        let want = malliavin_z(&a, &Matrix::scalar(1, da), &v1(x)).unwrap();
        assert!((g[1] - want).abs() < 1e-14, "{} vs {want}", g[1]);
        // D_r∂_xΓ against a difference quotient of D_rΓ
        let h = 1e-4;
        let fd = (mk.gamma(x + h, t, 0.0, s).unwrap()[1] - mk.gamma(x - h, t, 0.0, s).unwrap()[1]) / (2.0 * h);
        assert!((fd - g[3]).abs() < 1e-6, "{fd} vs {}", g[3]);
    }
}

#[test]
fn malliavin_gamma_matches_bump_oracle() {
    let spec = SdeSpec::generic();
    let b = simulate_paths(&spec, 2, 1.0, 1000, 7).unwrap();
    let coef = RandomCoefficient::mixed();
    let (pieces, k) = (8, 250);
    let mk = MalliavinKernel::new(&coef, &b, 1, pieces, k, GridParams::default()).unwrap();
    let xs = [-0.5, 0.4, 1.2];
    let bumped = |eps: f64| -> Vec<f64> {
        let f = coef.realize_path(&bumped_path(&spec, &b, 1, k, eps), 1.0, pieces).unwrap();
        let fs = FundamentalSolution::new(f, 1.0, GridParams::default()).unwrap();
        xs.iter().map(|&x| fs.gamma(&v1(x), 1.0, &v1(0.0), 0.0).unwrap()).collect()
    };
    let eps = 1e-4;
    let (up, down) = (bumped(eps), bumped(-eps));
    for (i, &x) in xs.iter().enumerate() {
        let fd = (up[i] - down[i]) / (2.0 * eps);
        let d = mk.gamma(x, 1.0, 0.0, 0.0).unwrap()[1];
        assert!((fd - d).abs() <= 5e-2 * d.abs(), "{fd} vs {d}");
        assert!((fd - d).abs() <= 1e-6 * d.abs().max(1e-3), "{fd} vs {d}");
    }
}

#[test]
fn future_increments_do_not_leak() {
    let spec = SdeSpec::generic();
    let b = simulate_paths(&spec, 1, 1.0, 400, 12).unwrap();
    let mut db = b.increments.clone();
    for v in db[0][200..].iter_mut() {
        *v = -3.0 * *v + 0.01;
    }
    let s = PathBundle::from_increments(&spec, b.dt, db, b.seed, 0).unwrap();
    assert_eq!(b.xi[0][..=200], s.xi[0][..=200]);
    for k in 0..=200 {
        for l in k..=200 {
            assert_eq!(b.first_variation(0, k, l).to_bits(), s.first_variation(0, k, l).to_bits());
        }
    }
    // Γ up to t = 1/2 from the held coefficient sees only the first half
    let coef = RandomCoefficient::mixed();
    let g = |bundle: &PathBundle| {
        let f = coef.realize_path(&bundle.xi[0][..=200], 0.5, 4).unwrap();
        FundamentalSolution::new(f, 0.5, GridParams::default()).unwrap().gamma(&v1(0.3), 0.5, &v1(0.0), 0.0).unwrap()
    };
    assert_eq!(g(&b).to_bits(), g(&s).to_bits());
}

#[test]
fn catalog_sde_is_lipschitz() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for spec in [SdeSpec::generic(), SdeSpec::ornstein_uhlenbeck(2.0, 0.5, 0.0)] {
        assert_eq!(spec.check_lipschitz(&mut rng, 10_000), None);
    }
}

#[test]
fn held_coefficient_outside_band_is_rejected() {
    let b = simulate_paths(&SdeSpec::generic(), 1, 1.0, 100, 2).unwrap();
    let mut coef = RandomCoefficient::x_independent();
    coef.lambda = 1.5;
    assert!(matches!(coef.realize(&b, 0, 4), Err(heatkernel::error::Error::Config { ref tag, .. }) if tag == "H1"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn variation_is_causal_and_dominated(seed in 0u64..1000, k in 0usize..100, l in 0usize..100) {
        let b = simulate_paths(&SdeSpec::generic(), 1, 1.0, 100, seed).unwrap();
        let psi = b.psi(0);
        let d = b.first_variation(0, k, l);
        if k > l {
            prop_assert_eq!(d, 0.0);
        } else {
            prop_assert!(d.abs() <= psi[k]);
        }
        prop_assert!(psi[k] >= SdeSpec::generic().diffusion.value(b.xi[0][k]).abs());
    }

    #[test]
    fn scalar_map_derivatives(y in -5.0f64..5.0) {
        let maps = [
            SdeSpec::generic().drift,
            ScalarMap::Tanh { c0: 0.5, c1: -1.2 },
            ScalarMap::Sine { c0: 1.0, c1: 0.4, omega: 2.5, phase: 0.3 },
        ];
        for m in maps {
            let (_, d1, d2) = m.eval(y);
            let h = 1e-5;
            let fd1 = (m.value(y + h) - m.value(y - h)) / (2.0 * h);
            let fd2 = (m.eval(y + h).1 - m.eval(y - h).1) / (2.0 * h);
            let (b1, b2) = m.derivative_bounds();
            prop_assert!((fd1 - d1).abs() < 1e-8 && (fd2 - d2).abs() < 1e-8);
            prop_assert!(d1.abs() <= b1 + 1e-12 && d2.abs() <= b2 + 1e-12);
        }
    }
}
