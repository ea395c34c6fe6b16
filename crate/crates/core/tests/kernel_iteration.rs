use heatkernel::coeff_fields::{catalog, CoefficientField};
use heatkernel::kernel_iteration::*;
use heatkernel::linalg::Vector;
use heatkernel::quadrature::{adaptive_gk, sin2_rule, Singular};
use proptest::prelude::*;

fn v1(x: f64) -> Vector<f64> {
    Vector::from_slice(&[x])
}

fn tanh_field(pieces: usize, kappa: f64) -> CoefficientField<f64> {
    catalog::modulated_tanh(1, catalog::alternating_profile(pieces, 1.0, 1.0, 1.5), kappa, 2.0).unwrap()
}

fn k2_rule(f: &CoefficientField<f64>, x: f64, t: f64, y: f64, s: f64, p: &GridParams) -> f64 {
    let rule = ConvolutionRule::new(1, f.lambda(), s, t, f.breakpoints(), p, Singular::Both);
    convolve(&rule, &v1(x), t, &v1(y), s, |_, r, eta| Ok(eval_k(f, &v1(x), t, eta, r)? * eval_k(f, eta, r, &v1(y), s)?)).unwrap()
}

#[test]
fn second_iterate_matches_brute_force() {
    // single piece, so the unsplit sin² rule and adaptive spatial quadrature apply
    let f = tanh_field(1, 0.25);
    let (x, t, y, s) = (0.7, 0.8, 0.1, 0.0);
    let got = k2_rule(&f, x, t, y, s, &GridParams::default());
    let want: f64 = sin2_rule(s, t, 96)
        .iter()
        .map(|&(r, w)| {
            // panels of a tenth of the bridge width so the spike near r → t is seen
            let c = y + (x - y) * (r - s) / (t - s);
            let sd = (2.0 * f.lambda() * (t - r) * (r - s) / (t - s)).sqrt();
            let g = |e: f64| eval_k(&f, &v1(x), t, &v1(e), r).unwrap() * eval_k(&f, &v1(e), r, &v1(y), s).unwrap();
            let mut inner = adaptive_gk(g, -12.0, c - 10.0 * sd, 1e-12).unwrap() + adaptive_gk(g, c + 10.0 * sd, 12.0, 1e-12).unwrap();
            for k in 0..200 {
                let a = c - 10.0 * sd + 0.1 * sd * k as f64;
                inner += adaptive_gk(g, a, a + 0.1 * sd, 1e-13).unwrap();
            }
            w * inner
        })
        .sum();
    assert!((got - want).abs() <= 1e-4 * want.abs(), "{got} {want}");
}

#[test]
fn second_iterate_converges_under_refinement() {
    let f = tanh_field(3, 0.25);
    let (x, t, y, s) = (0.4, 0.9, -0.2, 0.05);
    let coarse = GridParams { n_theta: 6, n_q: 10, ..GridParams::default() };
    let fine = GridParams { n_theta: 12, n_q: 20, ..GridParams::default() };
    let reference = k2_rule(&f, x, t, y, s, &GridParams { n_theta: 64, n_q: 96, ..GridParams::default() });
    let e1 = (k2_rule(&f, x, t, y, s, &coarse) - reference).abs();
    let e2 = (k2_rule(&f, x, t, y, s, &fine) - reference).abs();
    assert!(e2 * 2.0 <= e1, "{e1} {e2}");
}

#[test]
fn phi_is_linear_in_the_lipschitz_constant_near_zero() {
    let p = GridParams::default();
    let (x, t, y, s) = (0.9, 1.0, 0.2, 0.0);
    let phi = |k: f64| build_phi(&tanh_field(3, k), &v1(x), t, &v1(y), s, &p).unwrap().0;
    let ratio = phi(0.02) / phi(0.01);
    assert!((ratio - 2.0).abs() < 0.02, "{ratio}");
}

#[test]
fn series_contracts_on_shipped_families() {
    for (pieces, kappa) in [(3, 0.1), (3, 0.25), (3, 0.5), (65, 0.25)] {
        let table = PhiTable::build(&tanh_field(pieces, kappa), &v1(0.3), 0.0, 1.0, &GridParams::default()).unwrap();
        let d = &table.diagnostics;
        assert!(d.converged && d.m_stop <= 8, "{pieces} {kappa} {d:?}");
        assert!(d.eventually_contracting(), "{d:?}");
        assert!(d.empirical_m.is_finite() && d.empirical_m > 0.0);
    }
}

#[test]
fn table_round_trips_through_binary() {
    let table = PhiTable::build(&tanh_field(2, 0.25), &v1(0.0), 0.0, 1.0, &GridParams { n_u: 11, n_rho: 4, ..GridParams::default() }).unwrap();
    let mut buf = Vec::new();
    table.phi.write_binary(&mut buf).unwrap();
    let back = KernelTable::read_binary(TableKind::Phi, table.phi.grid.clone(), &buf[..]).unwrap();
    assert_eq!(back.values, table.phi.values);
    assert!(KernelTable::read_binary(TableKind::Phi, table.phi.grid.clone(), &buf[..30]).is_err());
}

#[test]
fn time_singularity_integrates_to_pi() {
    for (s, t) in [(0.0, 1.0), (0.2, 0.25), (1.0, 9.0)] {
        let rule = ConvolutionRule::new(1, 1.0, s, t, &[], &GridParams::default(), Singular::Both);
        let got: f64 = rule.time.iter().map(|(r, w)| w / ((t - r) * (r - s)).sqrt()).sum();
        assert!((got - std::f64::consts::PI).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn convolve_is_bilinear(a in -2.0f64..2.0, b in -2.0f64..2.0, x in -1.0f64..1.0, y in -1.0f64..1.0) {
        let f = tanh_field(2, 0.25);
        let p = GridParams { n_theta: 6, n_q: 8, ..GridParams::default() };
        let rule = ConvolutionRule::new(1, f.lambda(), 0.0, 1.0, f.breakpoints(), &p, Singular::Both);
        let outer = |r: f64, e: &Vector<f64>| eval_k(&f, &v1(x), 1.0, e, r).unwrap();
        let g1 = |r: f64, e: &Vector<f64>| eval_k(&f, e, r, &v1(y), 0.0).unwrap();
        let g2 = |r: f64, e: &Vector<f64>| (-(e[0] - y).powi(2)).exp() / r.sqrt();
        let conv = |h: &dyn Fn(f64, &Vector<f64>) -> f64| convolve(&rule, &v1(x), 1.0, &v1(y), 0.0, |_, r, e| Ok(outer(r, e) * h(r, e))).unwrap();
        let lhs = conv(&|r, e| a * g1(r, e) + b * g2(r, e));
        let rhs = a * conv(&g1) + b * conv(&g2);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }
}
