use ssheat::branch::{first_feasible, tail_law, PairFamily};
use ssheat::inverted::{solve_and_classify, Mode};
use ssheat::pde::{
    duhamel_residual, evolve_radial, leading_growth_exponent, selfsimilar_evolution_error, truncation_demo, weak_form,
    Bump, EvolveOptions, RadialField,
};
use ssheat::profile::integrate_profile;
use ssheat::{Error, ProblemParams};

fn pp(n: u32, a: f64) -> ProblemParams {
    ProblemParams::new(n, a).unwrap()
}

#[test]
fn branch_profile_solves_the_integral_form() {
    let p = pp(3, 2.0);
    let (_, (lo, hi)) = first_feasible(PairFamily::Even, 1.0, &p, 6, 1e-10).unwrap();
    for a in [lo.shoot, hi.shoot] {
        let f = integrate_profile(a, &p, 80.0, 1e-11).unwrap();
        let r = duhamel_residual(&f, 1.0, &[0.0, 0.5, 1.0, 2.0, 5.0]).unwrap();
        assert!(r <= 1e-2, "a = {a}: {r}");
        // Halved tolerances agree.
        let tight = integrate_profile(a, &p, 80.0, 5e-12).unwrap();
        let r2 = duhamel_residual(&tight, 1.0, &[0.0, 0.5, 1.0, 2.0, 5.0]).unwrap();
        assert!((r - r2).abs() <= 1e-2);
    }
}

#[test]
fn branch_profiles_are_strongly_unstable() {
    let p = pp(3, 2.0);
    let (_, (lo, _)) = first_feasible(PairFamily::Even, 1.0, &p, 6, 1e-10).unwrap();
    let f = integrate_profile(lo.shoot, &p, 80.0, 1e-11).unwrap();
    let lam = leading_growth_exponent(&f, 12.0, 0.002).unwrap();
    assert!(lam > 300.0, "{lam}");
    // A perturbation of relative size 1e−16 reaches order one by t = 1.2.
    match selfsimilar_evolution_error(&f, 1.0, 2.0, 10.0, 0.005, 1e-3) {
        Err(Error::BlowupDetected(t)) => assert!(t < 1.2, "{t}"),
        other => panic!("expected blowup, got {other:?}"),
    }
    // The small-data profile is only mildly unstable and tracks the formula.
    let g = integrate_profile(2.0, &p, 80.0, 1e-11).unwrap();
    assert!(leading_growth_exponent(&g, 12.0, 0.002).unwrap() < 5.0);
    assert!(selfsimilar_evolution_error(&g, 1.0, 2.0, 10.0, 0.01, 2e-3).unwrap() <= 1e-2);
}

#[test]
fn slow_decay_with_negative_beta_carries_a_dirac_mass() {
    let p = pp(3, 1.0);
    let (sol, c) = solve_and_classify(3.0, &p, 1e-10).unwrap();
    assert_eq!(c.mode, Mode::Slow);
    let tail = tail_law(&sol, &c);
    let res: Vec<f64> = [2.0, 0.5, 0.1]
        .iter()
        .map(|r| weak_form(&sol.traj, Bump::new(0.0, *r).unwrap(), Some(tail)).unwrap().residual)
        .collect();
    // Constant as the bump shrinks: −4π L̃ φ(0).
    assert!(res[0].abs() > 1.0);
    for r in &res {
        assert!((r - res[0]).abs() <= 1e-2 * res[0].abs(), "{res:?}");
    }
    let mass = -4.0 * std::f64::consts::PI * c.ltilde.value;
    assert!((res[0] - mass).abs() <= 4.0 * std::f64::consts::PI * (c.ltilde.uncertainty + 0.05 * c.ltilde.value.abs()));
}

#[test]
fn truncated_supercritical_data() {
    // μ well above μ₀ for (3, 1): removing the truncation makes the
    // solution blow up sooner (diagnostic, no threshold claimed).
    let p = pp(3, 1.0);
    let runs = truncation_demo(&p, 8.0, &[2.0, 8.0], 0.5, 0.05);
    assert_eq!(runs.len(), 2);
    if let (Some(a), Some(b)) = (runs[0].blowup_at, runs[1].blowup_at) {
        assert!(b <= a);
    }
}

#[test]
fn solver_rejects_a_grid_without_the_axis() {
    let p = pp(3, 1.0);
    let u0 = RadialField {
        grid: vec![0.1, 0.2, 0.3],
        values: vec![0.0; 3],
        time: 0.0,
        params: p,
        bc: ssheat::pde::AxisCondition::RegularAxis,
        extrapolated: false,
    };
    assert!(matches!(evolve_radial(&u0, 1.0, &EvolveOptions::new(0.1), &|_| 0.0), Err(Error::DomainMismatch(_))));
}
