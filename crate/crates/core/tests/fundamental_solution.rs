use heatkernel::coeff_fields::{catalog, CoefficientField};
use heatkernel::fundamental_solution::FundamentalSolution;
use heatkernel::kernel_iteration::GridParams;
use heatkernel::linalg::Vector;
use heatkernel::parametrix::FitGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn v1(x: f64) -> Vector<f64> {
    Vector::from_slice(&[x])
}

fn tanh_field(pieces: usize, kappa: f64) -> CoefficientField<f64> {
    catalog::modulated_tanh(1, catalog::alternating_profile(pieces, 1.0, 1.0, 1.5), kappa, 2.0).unwrap()
}

#[test]
fn gradient_matches_finite_differences() {
    // the quadrature nodes follow x, so the difference quotient needs a finer spatial rule
    let fs = FundamentalSolution::new(tanh_field(4, 0.25), 1.0, GridParams { n_q: 64, ..GridParams::default() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sources = [(v1(-0.4), 0.0), (v1(0.6), 0.3)];
    let h = 1e-4;
    for i in 0..100 {
        let (y, s) = &sources[i % 2];
        let t: f64 = s + rng.random_range(0.1..(1.0 - s));
        let x = *y + v1(rng.random_range(-2.0..2.0) * (t - s).sqrt());
        let g = fs.grad_gamma(&x, t, y, *s).unwrap()[0];
        let fd = (fs.gamma(&(x + v1(h)), t, y, *s).unwrap() - fs.gamma(&(x - v1(h)), t, y, *s).unwrap()) / (2.0 * h);
        // relative to |∂Γ| plus a quarter of the gradient envelope's peak (≈ 0.2/(t-s)),
        // so points where ∂Γ crosses zero are not held to a meaningless relative error
        let scale = 1e-4 * (g.abs() + 0.05 / (t - s));
        assert!((g - fd).abs() <= scale, "x={} t={t} y={} s={s}: {g} vs {fd}", x[0], y[0]);
    }
}

#[test]
fn semigroup_across_a_breakpoint() {
    let fs = FundamentalSolution::new(tanh_field(4, 0.25), 1.0, GridParams::default()).unwrap();
    let r = fs.chapman_kolmogorov_residual(&v1(0.5), 1.0, &v1(-0.2), 0.0, 0.5, 24).unwrap();
    assert!(r.relative() < 1e-3, "{r:?}");
    let r = fs.chapman_kolmogorov_residual(&v1(-0.8), 0.9, &v1(0.1), 0.1, 0.37, 24).unwrap();
    assert!(r.relative() < 1e-3, "{r:?}");
}

#[test]
fn mass_is_conserved_in_both_variables() {
    let fs = FundamentalSolution::new(tanh_field(3, 0.25), 1.0, GridParams::default()).unwrap();
    assert!(fs.mass_residual_x(1.0, &v1(0.3), 0.0, 64).unwrap().absolute < 1e-3);
    assert!(fs.mass_conservation_residual(&v1(0.3), 1.0, 0.0, 24).unwrap().absolute < 1e-3);
    let coarse = FundamentalSolution::new(tanh_field(3, 0.25), 1.0, GridParams { n_u: 21, n_rho: 6, ..GridParams::default() }).unwrap();
    let e_coarse = coarse.mass_residual_x(1.0, &v1(0.3), 0.0, 64).unwrap().absolute;
    let e_fine = fs.mass_residual_x(1.0, &v1(0.3), 0.0, 64).unwrap().absolute;
    assert!(e_fine * 2.0 <= e_coarse, "{e_coarse} {e_fine}");
}

#[test]
fn gradient_envelope_grows_with_the_lipschitz_constant() {
    let grid = FitGrid::geometric(vec![0.0], 0.02, 1.0, 6, 13, 6.0);
    let ys = [v1(-1.0), v1(0.0), v1(1.0)];
    let mut last = 0.0;
    for kappa in [0.1, 0.25, 0.5] {
        let fs = FundamentalSolution::new(tanh_field(3, kappa), 1.0, GridParams::default()).unwrap();
        let fit = fs.aronson_fit(1, &ys, &grid).unwrap();
        assert!(fit.fit.pass(), "{fit:?}");
        assert!(fit.fit.envelope.c >= last, "{kappa}: {} < {last}", fit.fit.envelope.c);
        last = fit.fit.envelope.c;
    }
}

#[test]
fn identity_envelope_is_the_heat_kernel() {
    for d in [1, 2] {
        let fs = FundamentalSolution::new(CoefficientField::<f64>::constant_scalar(d, 1.0), 1.0, GridParams::default()).unwrap();
        let grid = FitGrid::geometric(vec![0.0, 0.5], 0.01, 1.0, 5, 9, 6.0);
        let fit = fs.aronson_fit(0, &[Vector::zeros(d)], &grid).unwrap();
        let want = (4.0 * std::f64::consts::PI).powf(-0.5 * d as f64);
        assert!((fit.fit.envelope.c / want - 1.0).abs() < 1e-12);
        assert!((fit.fit.envelope.big_c / 0.25 - 1.0).abs() < 0.01);
        assert!(fit.fit.pass());
    }
}

#[test]
fn single_precision_tracks_double() {
    let p = catalog::alternating_profile(3, 1.0, 1.0, 1.5);
    let p32 = heatkernel::coeff_fields::TimeProfile::new(p.breaks().to_vec(), p.values().iter().map(|&v| v as f32).collect()).unwrap();
    let f32_field: heatkernel::Field32 = catalog::modulated_tanh(1, p32, 0.25, 2.0).unwrap();
    let lo = heatkernel::Kernel32::new(f32_field, 1.0, GridParams::default()).unwrap();
    let hi: heatkernel::Kernel = FundamentalSolution::new(tanh_field(3, 0.25), 1.0, GridParams::default()).unwrap();
    for x in [-1.0, 0.2, 1.5] {
        let a = lo.gamma(&v1(x), 1.0, &v1(0.1), 0.0).unwrap() as f64;
        let b = hi.gamma(&v1(x), 1.0, &v1(0.1), 0.0).unwrap();
        assert!((a - b).abs() < 1e-4 * b, "{a} {b}");
    }
}
