//! Forward shooting for the radial profile equation
//! `f'' + ((N-1)/r + r/2) f' + f/α + |f|^α f = 0`, its limit
//! `L(a) = lim r^{2/α} f_a(r)` and zero counts, plus the odd problem in one
//! dimension.

use crate::constants::{abs_pow, ProblemParams};
use crate::error::{Error, Result};
use crate::ode::{Dopri5, Flow, Segment, State};
use crate::stiff::Sdirk4;
use crate::trajectory::{extrapolate_to_zero, LimitEstimate, Piece, Trajectory, Variable, ZeroEvent};

/// Radius up to which the regular solution is taken from its Taylor series.
pub const R_SERIES: f64 = 1e-3;

/// Zero refinement tolerance in `r`.
const ZERO_TOL: f64 = 1e-12;

/// `f''` from the profile equation; at `r = 0` the regular continuation.
pub fn profile_rhs(r: f64, f: f64, fp: f64, p: &ProblemParams) -> f64 {
    let reaction = f / p.alpha + abs_pow(f, p.alpha) * f;
    if r == 0.0 {
        return -reaction / p.nf();
    }
    -((p.nf() - 1.0) / r + 0.5 * r) * fp - reaction
}

/// Default integration radius `40·max(1, √α)`.
pub fn default_r_max(p: &ProblemParams) -> f64 {
    40.0 * p.alpha.sqrt().max(1.0)
}

/// Taylor coefficients of the regular solution, `f = a + c1 r² + c2 r⁴ + c3 r⁶`.
fn series_coeffs(a: f64, p: &ProblemParams) -> [f64; 3] {
    let (al, n) = (p.alpha, p.nf());
    let ap = abs_pow(a, al);
    let f0 = a / al + ap * a;
    let f1 = 1.0 / al + (al + 1.0) * ap;
    let f2 = if a == 0.0 { 0.0 } else { (al + 1.0) * al * ap / a };
    let c1 = -f0 / (2.0 * n);
    let c2 = -c1 * (1.0 + f1) / (4.0 * (n + 2.0));
    let c3 = -(c2 * (2.0 + f1) + 0.5 * f2 * c1 * c1) / (6.0 * (n + 4.0));
    [c1, c2, c3]
}

fn series_state(a: f64, c: &[f64; 3], r: f64) -> State {
    let r2 = r * r;
    [
        a + r2 * (c[0] + r2 * (c[1] + r2 * c[2])),
        r * (2.0 * c[0] + r2 * (4.0 * c[1] + 6.0 * r2 * c[2])),
    ]
}

/// Shared forward integration of `f'' = rhs(r, f, f')` from `(r0, y0)`.
fn run(
    p: ProblemParams,
    n_eff: f64,
    r0: f64,
    y0: State,
    r_max: f64,
    tol: f64,
    traj: &mut Trajectory,
) -> Result<()> {
    let q = ProblemParams { n: n_eff as u32, alpha: p.alpha };
    let rhs = |r: f64, y: &State| [y[1], profile_rhs(r, y[0], y[1], &q)];
    // Absolute tolerance follows the data so that small shots keep their
    // relative accuracy (the equation is nearly linear there).
    let scale = y0[0].abs().max(y0[1].abs()).min(1.0);
    let ode = Dopri5::new(tol, 1e-3 * tol * scale).with_split_at_zero(0);
    let mut last_sign = y0[0].signum();
    let mut max_res: f64 = 0.0;
    let mut zeros: Vec<ZeroEvent> = Vec::new();
    let mut pieces: Vec<Segment> = Vec::new();
    let stats = ode.integrate(rhs, r0, y0, r_max, |seg| {
        traj.push(seg.t1, seg.y1[0], seg.y1[1]);
        pieces.push(*seg);
        let s1 = seg.y1[0].signum();
        if s1 != 0.0 {
            if last_sign != 0.0 && s1 != last_sign {
                let z = seg.root(0, ZERO_TOL);
                zeros.push(ZeroEvent { at: z, slope: seg.eval(z)[1] });
            }
            last_sign = s1;
        }
        max_res = max_res.max(seg.defect(rhs, ode.atol, ode.rtol));
        Flow::Continue
    })?;
    for s in pieces {
        traj.push_piece(Piece::Direct(s));
    }
    traj.zeros.extend(zeros);
    traj.meta.steps += stats.steps;
    traj.meta.rejected += stats.rejected;
    traj.meta.max_residual = traj.meta.max_residual.max(max_res);
    traj.finish();
    Ok(())
}

/// Regular solution `f_a` on `[0, r_max]`.
pub fn integrate_profile(a: f64, p: &ProblemParams, r_max: f64, tol: f64) -> Result<Trajectory> {
    if !(r_max > 0.0) {
        return Err(Error::InvalidParams(format!("r_max must be positive, got {r_max}")));
    }
    if a == 0.0 {
        return Ok(Trajectory::zero(Variable::RadiusR, *p, 0.0, r_max));
    }
    let mut traj = Trajectory::new(Variable::RadiusR, *p);
    let c = series_coeffs(a, p);
    let r_ser = R_SERIES.min(0.5 * r_max);
    let y_ser = series_state(a, &c, r_ser);
    traj.push(0.0, a, 0.0);
    traj.push(r_ser, y_ser[0], y_ser[1]);
    traj.push_piece(Piece::Hermite { x0: 0.0, x1: r_ser, y0: a, d0: 0.0, y1: y_ser[0], d1: y_ser[1] });
    run(*p, p.nf(), r_ser, y_ser, r_max, tol, &mut traj)?;
    Ok(traj)
}

/// Odd solution `g_b` of the one-dimensional problem, `g(0) = 0`, `g'(0) = b`.
pub fn integrate_odd_profile(b: f64, p: &ProblemParams, r_max: f64, tol: f64) -> Result<Trajectory> {
    if p.n != 1 {
        return Err(Error::InvalidParams(format!("odd profiles need N = 1, got N = {}", p.n)));
    }
    if b == 0.0 {
        return Ok(Trajectory::zero(Variable::RadiusR, *p, 0.0, r_max));
    }
    let mut traj = Trajectory::new(Variable::RadiusR, *p);
    traj.push(0.0, 0.0, b);
    run(*p, 1.0, 0.0, [0.0, b], r_max, tol, &mut traj)?;
    Ok(traj)
}

/// `sup (1 + r²)^{1/α} (|f| + r|f'|)` over the samples.
pub fn envelope_constant(traj: &Trajectory) -> f64 {
    let inv = 1.0 / traj.params.alpha;
    traj.grid
        .iter()
        .zip(traj.values.iter().zip(&traj.derivs))
        .map(|(r, (f, fp))| (1.0 + r * r).powf(inv) * (f.abs() + r * fp.abs()))
        .fold(0.0, f64::max)
}

/// Plateau of `r^{2/α} f(r)` read at geometric checkpoints on the outer half
/// of the trajectory, each triple Richardson-extrapolated in `r^{-2}`.
#[allow(non_snake_case)]
pub fn estimate_L(traj: &Trajectory, tol: f64) -> Result<LimitEstimate> {
    if traj.variable != Variable::RadiusR {
        return Err(Error::DomainMismatch("limit L needs a trajectory in r".into()));
    }
    if traj.is_trivial() {
        return Ok(LimitEstimate::exact(0.0));
    }
    let r_hi = traj.x_max();
    if r_hi < 8.0 {
        return Err(Error::WindowTooShort(r_hi));
    }
    let k = 2.0 / traj.params.alpha;
    let pts: Vec<(f64, f64)> = (0..=8)
        .rev()
        .map(|j| {
            let r = r_hi * 2f64.powf(-(j as f64) / 8.0);
            let f = traj.eval(r).map(|v| v.0).unwrap_or(f64::NAN);
            (1.0 / (r * r), r.powf(k) * f)
        })
        .collect();
    let ext: Vec<f64> = pts
        .windows(3)
        .map(|w| {
            let xs = [w[0].0, w[1].0, w[2].0];
            let ys = [w[0].1, w[1].1, w[2].1];
            extrapolate_to_zero(&xs, &ys)
        })
        .collect();
    let last = &ext[ext.len() - 3..];
    let value = last[2];
    let spread = last.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v))
        - last.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if !value.is_finite() {
        return Err(Error::WindowTooShort(r_hi));
    }
    Ok(LimitEstimate { value, uncertainty: spread, converged: spread <= tol, window: (r_hi / 2.0, r_hi) })
}

/// Number of zeros on `(0, r_max)`.
pub fn count_zeros_profile(traj: &Trajectory) -> Result<usize> {
    if traj.is_trivial() {
        return Err(Error::InvalidParams("zero count of the trivial profile is undefined".into()));
    }
    Ok(traj.zeros.iter().filter(|z| z.at > 0.0).count())
}

/// Zeros of an odd profile on `(0, r_max)`; the zero at the origin is not
/// counted.
pub fn count_zeros_odd(traj: &Trajectory) -> Result<usize> {
    count_zeros_profile(traj)
}

pub fn estimate_l1_odd(traj: &Trajectory, tol: f64) -> Result<LimitEstimate> {
    estimate_L(traj, tol)
}

/// Right-hand side of the inverted equation as a first-order system in `s`.
pub fn inverted_rhs_s(s: f64, y: &State, alpha: f64, beta: f64, gamma: f64) -> State {
    let g = -beta * y[0] + abs_pow(y[0], alpha) * y[0];
    [y[1], ((1.0 - 4.0 * gamma * s) * y[1] - g) / (4.0 * s * s)]
}

/// `L(a)` by the inverted route: map `(f, f')` at `r_switch` to
/// `w(s) = r^{2/α} f(r)`, `s = r^{-2}`, and integrate the inverted equation
/// back to `s → 0`, where `w(0) = L`.
pub fn limit_via_inverted(traj: &Trajectory, r_switch: f64, tol: f64) -> Result<f64> {
    if traj.is_trivial() {
        return Ok(0.0);
    }
    let (f, fp) = traj
        .eval(r_switch)
        .ok_or_else(|| Error::DomainMismatch(format!("r = {r_switch} outside the trajectory")))?;
    let p = traj.params;
    let c = p.constants();
    let k = 2.0 / p.alpha;
    let r = r_switch;
    let s0 = 1.0 / (r * r);
    let w = r.powf(k) * f;
    let wp = -(r.powf(k + 2.0) / p.alpha) * f - 0.5 * r.powf(k + 3.0) * fp;
    let s_end = 1e-9 * s0;
    let st = Sdirk4::new(tol, 1e-3 * tol).integrate(
        |s, y| inverted_rhs_s(s, y, p.alpha, c.beta, c.gamma),
        s0,
        [w, wp],
        s_end,
        1e-3 * s0,
        |_, _| {},
    )?;
    Ok(st.y_end[0] - s_end * st.y_end[1])
}

/// A shot with its limit and zero count; the radius is doubled (at most
/// four times) until the limit plateau converges.
#[derive(Debug, Clone)]
pub struct Shot {
    pub shoot: f64,
    pub traj: Trajectory,
    pub limit: LimitEstimate,
    pub zeros: usize,
    pub envelope: f64,
}

fn shot_with(
    x: f64,
    p: &ProblemParams,
    tol: f64,
    integrate: impl Fn(f64, &ProblemParams, f64, f64) -> Result<Trajectory>,
) -> Result<Shot> {
    let mut r_max = default_r_max(p);
    let itol = (1e-3 * tol).clamp(1e-12, 1e-8);
    let mut last = None;
    for _ in 0..=4 {
        let traj = integrate(x, p, r_max, itol)?;
        let limit = estimate_L(&traj, tol)?;
        let converged = limit.converged;
        last = Some((traj, limit));
        if converged {
            break;
        }
        r_max *= 2.0;
    }
    let (traj, limit) = last.expect("at least one pass");
    let zeros = if traj.is_trivial() { 0 } else { count_zeros_profile(&traj)? };
    let envelope = envelope_constant(&traj);
    Ok(Shot { shoot: x, traj, limit, zeros, envelope })
}

/// Regular profile `f_a` with `L(a)` to `tol` and `N(a)`.
pub fn shoot(a: f64, p: &ProblemParams, tol: f64) -> Result<Shot> {
    shot_with(a, p, tol, integrate_profile)
}

/// Odd profile `g_b` with `L₁(b)` to `tol` and its zero count.
pub fn shoot_odd(b: f64, p: &ProblemParams, tol: f64) -> Result<Shot> {
    shot_with(b, p, tol, integrate_odd_profile)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::rk4_fixed;
    use proptest::prelude::*;

    fn p(n: u32, a: f64) -> ProblemParams {
        ProblemParams::new(n, a).unwrap()
    }

    #[test]
    fn zero_is_an_equilibrium() {
        assert_eq!(profile_rhs(1.0, 0.0, 0.0, &p(3, 1.0)), 0.0);
    }

    #[test]
    fn axis_value_is_regularized() {
        let q = p(3, 2.0);
        let a = 1.7f64;
        let expect = -(a / 2.0 + a.powi(3)) / 3.0;
        assert!((profile_rhs(0.0, a, 0.0, &q) - expect).abs() < 1e-15);
    }

    #[test]
    fn series_matches_ode_near_axis() {
        // Oracle: substitute the truncated series into the equation.
        let q = p(3, 1.5);
        let a = 2.3;
        let c = series_coeffs(a, &q);
        for r in [1e-3, 5e-3, 2e-2] {
            let y = series_state(a, &c, r);
            let r2 = r * r;
            let fpp = 2.0 * c[0] + 12.0 * c[1] * r2 + 30.0 * c[2] * r2 * r2;
            let res = fpp - profile_rhs(r, y[0], y[1], &q);
            assert!(res.abs() < 50.0 * r.powi(6) * a.powf(4.0), "r = {r}: {res}");
        }
    }

    #[test]
    fn singular_stationary_solution_has_zero_residual() {
        let q = p(3, 3.0);
        let beta = q.constants().beta;
        let k = 2.0 / 3.0;
        for i in 0..=20 {
            let r = 0.1 * 100f64.powf(i as f64 / 20.0);
            let f = beta.powf(1.0 / 3.0) * r.powf(-k);
            let fp = -k * f / r;
            let fpp = k * (k + 1.0) * f / (r * r);
            let res = fpp - profile_rhs(r, f, fp, &q);
            assert!(res.abs() <= 1e-10 * fpp.abs().max(1.0), "r = {r}: {res}");
        }
    }

    #[test]
    fn trivial_shot() {
        let q = p(3, 1.0);
        let t = integrate_profile(0.0, &q, 40.0, 1e-10).unwrap();
        assert!(t.is_trivial());
        assert!(t.zeros.is_empty());
        assert_eq!(estimate_L(&t, 1e-8).unwrap().value, 0.0);
        assert!(count_zeros_profile(&t).is_err());
    }

    #[test]
    fn odd_symmetry_in_a() {
        let q = p(3, 1.0);
        let t1 = integrate_profile(2.5, &q, 30.0, 1e-10).unwrap();
        let t2 = integrate_profile(-2.5, &q, 30.0, 1e-10).unwrap();
        assert_eq!(t1.grid.len(), t2.grid.len());
        for i in 0..t1.grid.len() {
            assert_eq!(t1.grid[i], t2.grid[i]);
            assert_eq!(t1.values[i], -t2.values[i]);
        }
        let l1 = estimate_L(&t1, 1e-8).unwrap();
        let l2 = estimate_L(&t2, 1e-8).unwrap();
        assert!((l1.value + l2.value).abs() < 1e-12);
    }

    #[test]
    fn agrees_with_fixed_step_rk4() {
        let q = p(3, 2.0);
        let t = integrate_profile(1.0, &q, 40.0, 1e-11).unwrap();
        let c = series_coeffs(1.0, &q);
        let mut y = series_state(1.0, &c, R_SERIES);
        let mut r = R_SERIES;
        let mut worst: f64 = 0.0;
        for k in 1..=40 {
            let r1 = k as f64;
            y = rk4_fixed(|r, y| [y[1], profile_rhs(r, y[0], y[1], &q)], r, y, r1, 1e-4);
            r = r1;
            worst = worst.max((t.eval(r).unwrap().0 - y[0]).abs());
        }
        assert!(worst < 1e-6, "sup difference {worst}");
    }

    #[test]
    fn residual_of_dense_output_is_small() {
        let q = p(3, 1.0);
        let tol = 1e-10;
        let t = integrate_profile(5.0, &q, 40.0, tol).unwrap();
        assert!(t.meta.max_residual <= 10.0, "residual {}", t.meta.max_residual);
    }

    #[test]
    fn zeros_are_simple_and_bracketed() {
        let q = p(3, 1.0);
        let tol = 1e-10;
        let t = integrate_profile(300.0, &q, 40.0, tol).unwrap();
        assert!(!t.zeros.is_empty());
        for z in &t.zeros {
            assert!(z.slope.abs() > tol.sqrt());
            let (a, b) = (t.eval(z.at - 1e-6).unwrap().0, t.eval(z.at + 1e-6).unwrap().0);
            assert!(a * b < 0.0);
        }
    }

    #[test]
    fn small_positive_a_has_no_zeros_and_positive_limit() {
        let q = p(3, 1.0);
        for a in [0.1, 0.5, 1.0] {
            let s = shoot(a, &q, 1e-8).unwrap();
            assert_eq!(s.zeros, 0);
            assert!(s.limit.value > 0.0);
        }
    }

    #[test]
    fn zero_count_invariant_under_radius_doubling() {
        let q = p(3, 1.0);
        for a in [20.0, 200.0] {
            let n1 = count_zeros_profile(&integrate_profile(a, &q, 40.0, 1e-10).unwrap()).unwrap();
            let n2 = count_zeros_profile(&integrate_profile(a, &q, 80.0, 1e-10).unwrap()).unwrap();
            assert_eq!(n1, n2);
        }
    }

    #[test]
    fn zero_count_stable_under_tolerance_halving() {
        let q = p(3, 1.0);
        for a in [7.0, 90.0, 700.0] {
            let n1 = count_zeros_profile(&integrate_profile(a, &q, 40.0, 1e-9).unwrap()).unwrap();
            let n2 = count_zeros_profile(&integrate_profile(a, &q, 40.0, 5e-10).unwrap()).unwrap();
            assert_eq!(n1, n2);
        }
    }

    #[test]
    fn plateau_agrees_with_inverted_route() {
        let q = p(3, 1.0);
        for a in [0.7, 3.0, 40.0] {
            let s = shoot(a, &q, 1e-9).unwrap();
            let w0 = limit_via_inverted(&s.traj, 10.0, 1e-11).unwrap();
            assert!((w0 - s.limit.value).abs() < 1e-7, "a = {a}: {w0} vs {}", s.limit.value);
        }
    }

    #[test]
    fn envelope_constant_stable_under_doubling() {
        let q = p(3, 2.0);
        let c1 = envelope_constant(&integrate_profile(3.0, &q, 40.0, 1e-10).unwrap());
        let c2 = envelope_constant(&integrate_profile(3.0, &q, 80.0, 1e-10).unwrap());
        assert!(c1.is_finite() && (c2 / c1 - 1.0).abs() <= 0.1);
    }

    #[test]
    fn odd_profile_symmetry_and_integrator_agreement() {
        let q = p(1, 1.0);
        let g1 = integrate_odd_profile(1.0, &q, 40.0, 1e-11).unwrap();
        let g2 = integrate_odd_profile(-1.0, &q, 40.0, 1e-11).unwrap();
        for i in 0..g1.grid.len() {
            assert_eq!(g1.values[i], -g2.values[i]);
        }
        let l = estimate_l1_odd(&g1, 1e-8).unwrap();
        // Oracle: fixed-step RK4 to r = 40, then the same read-out.
        let mut samples = Vec::new();
        let mut y = [0.0, 1.0];
        let mut r = 0.0;
        let rhs = |r: f64, y: &State| [y[1], profile_rhs(r, y[0], y[1], &ProblemParams { n: 1, alpha: 1.0 })];
        for k in (0..=8).rev() {
            let r1 = 40.0 * 2f64.powf(-(k as f64) / 8.0);
            y = rk4_fixed(rhs, r, y, r1, 5e-4);
            r = r1;
            samples.push((1.0 / (r * r), r * r * y[0]));
        }
        let n = samples.len();
        let xs = [samples[n - 3].0, samples[n - 2].0, samples[n - 1].0];
        let ys = [samples[n - 3].1, samples[n - 2].1, samples[n - 1].1];
        assert!((extrapolate_to_zero(&xs, &ys) - l.value).abs() < 1e-6);
        assert!(count_zeros_odd(&integrate_odd_profile(0.0, &q, 40.0, 1e-10).unwrap()).is_err());
    }

    #[test]
    fn odd_zero_count_stable_under_tolerance_halving() {
        let q = p(1, 1.0);
        for b in [3.0, 30.0] {
            let n1 = count_zeros_odd(&integrate_odd_profile(b, &q, 40.0, 1e-9).unwrap()).unwrap();
            let n2 = count_zeros_odd(&integrate_odd_profile(b, &q, 40.0, 5e-10).unwrap()).unwrap();
            assert_eq!(n1, n2);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn limit_is_odd_in_a(a in 0.2f64..30.0) {
            let q = p(3, 1.0);
            let l1 = shoot(a, &q, 1e-8).unwrap().limit.value;
            let l2 = shoot(-a, &q, 1e-8).unwrap().limit.value;
            prop_assert!((l1 + l2).abs() <= 1e-10 * l1.abs().max(1.0));
        }
    }
}
