//! Independent checks of self-similar solutions against the evolution
//! equation itself: the self-similar field, a radial finite-difference
//! solver, the heat semigroup on homogeneous data, the integral (Duhamel)
//! form and the weak form of the profile equation.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, ln_gamma};

use crate::constants::{abs_pow, ProblemParams};
use crate::error::{Error, Result};
use crate::profile::estimate_L;
use crate::quad;
use crate::trajectory::{Trajectory, Variable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AxisCondition {
    RegularAxis,
    SingularAxisExcluded,
}

/// `u(t, ·)` sampled on radii.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadialField {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub time: f64,
    pub params: ProblemParams,
    pub bc: AxisCondition,
    /// Some values came from the tail law rather than the stored profile.
    pub extrapolated: bool,
}

impl RadialField {
    pub fn sup(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Profile `f(ρ)` on `[0, ∞)` from a stored trajectory, continued by its
/// tail law outside the stored range.
pub struct ProfileView<'a> {
    traj: &'a Trajectory,
    /// `L` for a trajectory in `r` (continuation `L ρ^{−2/α}` past the end);
    /// the limit of `w` for an inverted trajectory (continuation for
    /// `s = ρ^{−2}` past the end).
    tail: f64,
    k: f64,
}

impl<'a> ProfileView<'a> {
    /// For an inverted trajectory, `tail` is the value of `w` used beyond the
    /// stored range; for a trajectory in `r` it defaults to the plateau
    /// estimate of `L`.
    pub fn new(traj: &'a Trajectory, tail: Option<f64>) -> Result<Self> {
        let k = 2.0 / traj.params.alpha;
        let tail = match (traj.variable, tail) {
            (_, Some(t)) => t,
            (Variable::RadiusR, None) if traj.is_trivial() => 0.0,
            (Variable::RadiusR, None) => estimate_L(traj, f64::INFINITY)?.value,
            (Variable::InvertedS, None) => traj.values.last().copied().unwrap_or(0.0),
        };
        Ok(ProfileView { traj, tail, k })
    }

    pub fn params(&self) -> ProblemParams {
        self.traj.params
    }

    /// `(f(ρ), extrapolated)`.
    pub fn eval(&self, rho: f64) -> (f64, bool) {
        match self.traj.variable {
            Variable::RadiusR => match self.traj.eval(rho) {
                Some((f, _)) => (f, false),
                None => (self.tail * rho.powf(-self.k), true),
            },
            Variable::InvertedS => {
                let s = 1.0 / (rho * rho);
                match self.traj.eval(s) {
                    Some((w, _)) => (rho.powf(-self.k) * w, false),
                    None => (rho.powf(-self.k) * self.tail, true),
                }
            }
        }
    }

    /// Largest radius represented by stored data (beyond it the tail law is
    /// used), or the smallest for inverted trajectories.
    fn stored_edge(&self) -> f64 {
        match self.traj.variable {
            Variable::RadiusR => self.traj.x_max(),
            Variable::InvertedS => 1.0 / self.traj.x_max().sqrt(),
        }
    }
}

/// `u(t, r) = t^{−1/α} f(r/√t)`.
pub fn eval_selfsimilar(profile: &Trajectory, t: f64, radii: &[f64]) -> Result<RadialField> {
    let view = ProfileView::new(profile, None)?;
    eval_selfsimilar_view(&view, t, radii)
}

pub fn eval_selfsimilar_view(view: &ProfileView, t: f64, radii: &[f64]) -> Result<RadialField> {
    if !(t > 0.0) {
        return Err(Error::InvalidParams(format!("time must be positive, got {t}")));
    }
    if radii.windows(2).any(|w| !(w[1] > w[0])) || radii.first().is_some_and(|r| *r < 0.0) {
        return Err(Error::InvalidParams("radii must be nonnegative and increasing".into()));
    }
    let p = view.params();
    let singular = view.traj.variable == Variable::InvertedS;
    if singular && radii.first() == Some(&0.0) {
        return Err(Error::DomainMismatch("a singular profile is not defined on the axis".into()));
    }
    let scale = t.powf(-1.0 / p.alpha);
    let sq = t.sqrt();
    let mut extrapolated = false;
    let values = radii
        .iter()
        .map(|r| {
            let (f, ex) = view.eval(r / sq);
            extrapolated |= ex;
            scale * f
        })
        .collect();
    Ok(RadialField {
        grid: radii.to_vec(),
        values,
        time: t,
        params: p,
        bc: if singular { AxisCondition::SingularAxisExcluded } else { AxisCondition::RegularAxis },
        extrapolated,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvolveOptions {
    pub dt_max: f64,
    /// Include `|u|^α u`; off gives the heat equation.
    pub reaction: bool,
    /// Values above this are reported as blowup.
    pub overflow: f64,
}

impl EvolveOptions {
    pub fn new(dt_max: f64) -> Self {
        EvolveOptions { dt_max, reaction: true, overflow: 1e12 }
    }

    pub fn heat(dt_max: f64) -> Self {
        EvolveOptions { reaction: false, ..Self::new(dt_max) }
    }
}

/// Solve `(I − c·A)x = rhs` for the tridiagonal radial Laplacian `A` on a
/// uniform grid with a regular axis; `rhs` already holds the boundary terms.
fn solve_implicit(n_dim: f64, dr: f64, c: f64, rhs: &mut [f64]) {
    let k = rhs.len();
    let h2 = dr * dr;
    let mut cp = vec![0.0; k];
    // Row i: a_i x_{i−1} + b_i x_i + c_i x_{i+1}.
    let row = |i: usize| -> (f64, f64, f64) {
        if i == 0 {
            let d = 2.0 * n_dim / h2;
            (0.0, 1.0 + c * d, -c * d)
        } else {
            let r = i as f64 * dr;
            let adv = (n_dim - 1.0) / (2.0 * r * dr);
            (-c * (1.0 / h2 - adv), 1.0 + 2.0 * c / h2, -c * (1.0 / h2 + adv))
        }
    };
    let (_, b0, c0) = row(0);
    cp[0] = c0 / b0;
    rhs[0] /= b0;
    for i in 1..k {
        let (a, b, cc) = row(i);
        let den = b - a * cp[i - 1];
        cp[i] = cc / den;
        rhs[i] = (rhs[i] - a * rhs[i - 1]) / den;
    }
    for i in (0..k - 1).rev() {
        rhs[i] -= cp[i] * rhs[i + 1];
    }
}

/// `A u` at interior rows `0..K`, with `u[K]` the boundary value.
fn apply_laplacian(n_dim: f64, dr: f64, u: &[f64], out: &mut [f64]) {
    let h2 = dr * dr;
    out[0] = 2.0 * n_dim * (u[1] - u[0]) / h2;
    for i in 1..out.len() {
        let r = i as f64 * dr;
        out[i] = (u[i + 1] - 2.0 * u[i] + u[i - 1]) / h2 + (n_dim - 1.0) / r * (u[i + 1] - u[i - 1]) / (2.0 * dr);
    }
}

/// Radial evolution of `u_t = Δu + |u|^α u` from `u0` to `t1` on the uniform
/// grid of `u0` (which must start at the axis). Diffusion is Crank–Nicolson,
/// the reaction is explicit (Heun) in a Strang splitting; the outer value is
/// `boundary(t)`.
pub fn evolve_radial(
    u0: &RadialField,
    t1: f64,
    opts: &EvolveOptions,
    boundary: &dyn Fn(f64) -> f64,
) -> Result<RadialField> {
    if u0.bc != AxisCondition::RegularAxis || u0.grid.first() != Some(&0.0) {
        return Err(Error::DomainMismatch("the radial solver needs a grid starting at the axis".into()));
    }
    if !(t1 > u0.time) {
        return Err(Error::InvalidParams(format!("end time {t1} must exceed the start time {}", u0.time)));
    }
    let kk = u0.grid.len() - 1;
    if kk < 2 {
        return Err(Error::InvalidParams("grid needs at least three points".into()));
    }
    let dr = u0.grid[1];
    if u0.grid.iter().enumerate().any(|(i, r)| (r - i as f64 * dr).abs() > 1e-9 * dr.max(*r)) {
        return Err(Error::InvalidParams("the radial solver needs a uniform grid".into()));
    }
    let n_dim = u0.params.nf();
    let al = u0.params.alpha;
    let mut u = u0.values.clone();
    let mut t = u0.time;
    let mut lap = vec![0.0; kk];
    let react = |u: &mut [f64], h: f64| {
        for v in u.iter_mut() {
            let k1 = abs_pow(*v, al) * *v;
            let y = *v + h * k1;
            let k2 = abs_pow(y, al) * y;
            *v += 0.5 * h * (k1 + k2);
        }
    };
    while t < t1 {
        let sup = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !sup.is_finite() || sup > opts.overflow {
            return Err(Error::BlowupDetected(t));
        }
        let mut dt = opts.dt_max;
        if opts.reaction {
            dt = dt.min(0.2 * 1f64.min(abs_pow(sup, al).recip()));
        }
        if t + dt > t1 {
            dt = t1 - t;
        }
        if opts.reaction {
            react(&mut u[..kk], 0.5 * dt);
        }
        apply_laplacian(n_dim, dr, &u, &mut lap);
        let b_new = boundary(t + dt);
        let c = 0.5 * dt;
        let mut rhs: Vec<f64> = (0..kk).map(|i| u[i] + c * lap[i]).collect();
        // Boundary coupling of the last interior row at the new time level.
        let r_last = (kk - 1) as f64 * dr;
        let coup = c * (1.0 / (dr * dr) + (n_dim - 1.0) / (2.0 * r_last * dr));
        rhs[kk - 1] += coup * b_new;
        solve_implicit(n_dim, dr, c, &mut rhs);
        u[..kk].copy_from_slice(&rhs);
        u[kk] = b_new;
        if opts.reaction {
            react(&mut u[..kk], 0.5 * dt);
        }
        t += dt;
    }
    Ok(RadialField { values: u, time: t1, ..u0.clone() })
}

/// Uniform grid `0, dr, …, R`.
pub fn uniform_grid(r_out: f64, dr: f64) -> Vec<f64> {
    let k = (r_out / dr).round() as usize;
    (0..=k).map(|i| i as f64 * dr).collect()
}

/// `sup_{r ≤ r_cmp} |u − v| / sup_{r ≤ r_cmp} |v|`.
pub fn relative_sup_error(u: &RadialField, exact: &[f64], r_cmp: f64) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for ((r, a), b) in u.grid.iter().zip(&u.values).zip(exact) {
        if *r <= r_cmp {
            num = num.max((a - b).abs());
            den = den.max(b.abs());
        }
    }
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Heat kernel check: Gaussian data at `t0` evolved to `t1` without the
/// reaction, against `(4πt)^{−N/2} e^{−r²/4t}`; relative sup error.
pub fn gaussian_heat_error(p: &ProblemParams, t0: f64, t1: f64, dr: f64, dt_max: f64) -> Result<f64> {
    let n = p.nf();
    let g = move |t: f64, r: f64| (4.0 * std::f64::consts::PI * t).powf(-n / 2.0) * (-r * r / (4.0 * t)).exp();
    let grid = uniform_grid(20.0 * t1.sqrt(), dr);
    let u0 = RadialField {
        values: grid.iter().map(|r| g(t0, *r)).collect(),
        grid,
        time: t0,
        params: *p,
        bc: AxisCondition::RegularAxis,
        extrapolated: false,
    };
    let r_out = *u0.grid.last().expect("grid");
    let u1 = evolve_radial(&u0, t1, &EvolveOptions::heat(dt_max), &|t| g(t, r_out))?;
    let exact: Vec<f64> = u1.grid.iter().map(|r| g(t1, *r)).collect();
    Ok(relative_sup_error(&u1, &exact, f64::INFINITY))
}

fn evolve_selfsimilar(view: &ProfileView, t0: f64, t1: f64, dr: f64, dt_max: f64) -> Result<(RadialField, Vec<f64>)> {
    let grid = uniform_grid(20.0 * t1.sqrt(), dr);
    let r_out = *grid.last().expect("grid");
    let u0 = eval_selfsimilar_view(view, t0, &grid)?;
    let al = view.params().alpha;
    let far = |t: f64| t.powf(-1.0 / al) * view.eval(r_out / t.sqrt()).0;
    let u1 = evolve_radial(&u0, t1, &EvolveOptions::new(dt_max), &far)?;
    let exact = eval_selfsimilar_view(view, t1, &u1.grid)?.values;
    Ok((u1, exact))
}

/// Start from the self-similar field at `t0`, evolve to `t1` with the exact
/// far-field value on `R = 20√t1`, and compare with the formula at `t1`
/// on `[0, r_cmp]` (relative sup error).
pub fn selfsimilar_evolution_error(
    profile: &Trajectory,
    t0: f64,
    t1: f64,
    r_cmp: f64,
    dr: f64,
    dt_max: f64,
) -> Result<f64> {
    let view = ProfileView::new(profile, None)?;
    let (u1, exact) = evolve_selfsimilar(&view, t0, t1, dr, dt_max)?;
    Ok(relative_sup_error(&u1, &exact, r_cmp))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SelfSimReport {
    /// Finest grid reached.
    pub dr: f64,
    pub dt_max: f64,
    /// `sup|u_h − u_{h/2}| / (3 sup|u|)` on `[0, r_cmp]` at the finest pair.
    pub richardson: Option<f64>,
    /// Relative sup error of the finest solution against the formula.
    pub error: Option<f64>,
    pub blowup_at: Option<f64>,
}

/// Self-similar consistency with grid refinement: halve `dr` and `dt_max`
/// until the Richardson estimate of the discretization error is below
/// `target` (at most `levels` halvings), then report the error against the
/// formula. Blowup of the discrete solution ends the refinement.
pub fn selfsimilar_check(
    profile: &Trajectory,
    (t0, t1): (f64, f64),
    r_cmp: f64,
    target: f64,
    (dr0, dt0): (f64, f64),
    levels: usize,
) -> Result<SelfSimReport> {
    let view = ProfileView::new(profile, None)?;
    let mut report = SelfSimReport { dr: dr0, dt_max: dt0, richardson: None, error: None, blowup_at: None };
    let mut coarse: Option<RadialField> = None;
    let (mut dr, mut dt) = (dr0, dt0);
    for _ in 0..=levels {
        let (u, exact) = match evolve_selfsimilar(&view, t0, t1, dr, dt) {
            Ok(v) => v,
            Err(Error::BlowupDetected(t)) => {
                report.blowup_at = Some(t);
                return Ok(report);
            }
            Err(e) => return Err(e),
        };
        report.dr = dr;
        report.dt_max = dt;
        report.error = Some(relative_sup_error(&u, &exact, r_cmp));
        if let Some(c) = &coarse {
            let (mut num, mut den) = (0.0f64, 0.0f64);
            for (i, r) in c.grid.iter().enumerate() {
                if *r <= r_cmp && 2 * i < u.values.len() {
                    num = num.max((c.values[i] - u.values[2 * i]).abs());
                    den = den.max(u.values[2 * i].abs());
                }
            }
            let est = num / (3.0 * den.max(f64::MIN_POSITIVE));
            report.richardson = Some(est);
            if est <= target {
                break;
            }
        }
        coarse = Some(u);
        dr *= 0.5;
        dt *= 0.5;
    }
    Ok(report)
}

/// Largest eigenvalue of the linearization about a regular profile in
/// similarity variables, `φ'' + ((N−1)/y + y/2)φ' + (1/α + (α+1)|f|^α)φ`,
/// for perturbations with Gaussian decay (Dirichlet at `y_max`). A
/// perturbation of the self-similar solution grows like `t^λ`.
pub fn leading_growth_exponent(profile: &Trajectory, y_max: f64, h: f64) -> Result<f64> {
    if profile.variable != Variable::RadiusR {
        return Err(Error::DomainMismatch("growth exponents are computed for regular profiles".into()));
    }
    if profile.x_max() < y_max {
        return Err(Error::DomainMismatch(format!("profile ends at {} before {y_max}", profile.x_max())));
    }
    let p = profile.params;
    let (n, al) = (p.nf(), p.alpha);
    let k = (y_max / h).round() as usize;
    // Symmetric form of the operator with weight y^{N−1} e^{y²/4}; row 0 is
    // the axis, where the operator reduces to 2N(φ₁ − φ₀)/h².
    let half = |y: f64, s: f64| {
        let z = y + s * 0.5 * h;
        if y == 0.0 {
            1.0
        } else {
            (z / y).powf(n - 1.0) * ((z * z - y * y) / 4.0).exp()
        }
    };
    let mut diag = Vec::with_capacity(k);
    let mut up = Vec::with_capacity(k);
    let mut down = Vec::with_capacity(k);
    for i in 0..k {
        let y = i as f64 * h;
        let f = profile.eval(y).map(|v| v.0).unwrap_or(0.0);
        let pot = 1.0 / al + (al + 1.0) * abs_pow(f, al);
        if i == 0 {
            diag.push(-2.0 * n / (h * h) + pot);
            up.push(2.0 * n / (h * h));
            down.push(0.0);
        } else {
            let (rp, rm) = (half(y, 1.0), half(y, -1.0));
            diag.push(-(rp + rm) / (h * h) + pot);
            up.push(rp / (h * h));
            down.push(rm / (h * h));
        }
    }
    // Products of the off-diagonal pairs give the symmetric equivalent.
    let off2: Vec<f64> = (0..k - 1).map(|i| up[i] * down[i + 1]).collect();
    let below = |x: f64| {
        let mut count = 0;
        let mut q = 1.0;
        for i in 0..k {
            q = diag[i] - x - if i == 0 { 0.0 } else { off2[i - 1] / q };
            if q == 0.0 {
                q = f64::MIN_POSITIVE;
            }
            if q < 0.0 {
                count += 1;
            }
        }
        count
    };
    let radius = (0..k)
        .map(|i| diag[i].abs() + up[i].abs() + down[i].abs())
        .fold(0.0, f64::max);
    let (mut lo, mut hi) = (-radius, radius);
    while hi - lo > 1e-10 * hi.abs().max(1.0) {
        let mid = 0.5 * (lo + hi);
        if below(mid) == k {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Diagnostics of the evolution from `min(μ r^{−2/α}, M)` for a sequence of
/// caps `M`: the time of blowup, or the sup norm at `t_end`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TruncationOutcome {
    pub cap: f64,
    pub blowup_at: Option<f64>,
    pub sup_at_end: Option<f64>,
}

pub fn truncation_demo(p: &ProblemParams, mu: f64, caps: &[f64], t_end: f64, dr: f64) -> Vec<TruncationOutcome> {
    let k = 2.0 / p.alpha;
    caps.iter()
        .map(|&cap| {
            let grid = uniform_grid(20.0 * t_end.sqrt().max(1.0), dr);
            let r_out = *grid.last().expect("grid");
            let u0 = RadialField {
                values: grid.iter().map(|r| if *r == 0.0 { cap } else { (mu * r.powf(-k)).min(cap) }).collect(),
                grid,
                time: 0.0,
                params: *p,
                bc: AxisCondition::RegularAxis,
                extrapolated: false,
            };
            let edge = mu * r_out.powf(-k);
            match evolve_radial(&u0, t_end, &EvolveOptions::new(1e-3), &|_| edge) {
                Ok(u) => TruncationOutcome { cap, blowup_at: None, sup_at_end: Some(u.sup()) },
                Err(Error::BlowupDetected(t)) => TruncationOutcome { cap, blowup_at: Some(t), sup_at_end: None },
                Err(_) => TruncationOutcome { cap, blowup_at: None, sup_at_end: None },
            }
        })
        .collect()
}

fn sphere_area(n: f64) -> f64 {
    2.0 * std::f64::consts::PI.powf(n / 2.0) / gamma(n / 2.0)
}

/// `(αt)^{1/α} (e^{tΔ} μ|·|^{−2/α})(0)` by radial quadrature; equals `μ/μ₀`.
pub fn heat_semigroup_homogeneous(mu: f64, t: f64, p: &ProblemParams) -> Result<f64> {
    let n = p.nf();
    let a = p.alpha;
    let bound = 2.0 / n;
    if a <= bound * (1.0 + 1e-12) {
        return Err(Error::NonIntegrable { alpha: a, bound });
    }
    if !(t > 0.0) {
        return Err(Error::InvalidParams(format!("time must be positive, got {t}")));
    }
    // ∫₀^∞ (4πt)^{−N/2} e^{−r²/4t} r^{N−1−2/α} dr with r = y^k, which makes
    // the integrand bounded at the origin.
    let e = n - 2.0 / a;
    let k = (1.0 / e).ceil().max(2.0);
    let r_end = (4.0 * t * 200.0).sqrt();
    let y_end = r_end.powf(1.0 / k);
    let norm = (4.0 * std::f64::consts::PI * t).powf(-n / 2.0);
    let q = quad::integrate(
        |y: f64| {
            if y == 0.0 {
                return if k * e - 1.0 == 0.0 { k } else { 0.0 };
            }
            let r = y.powf(k);
            k * y.powf(k * e - 1.0) * (-r * r / (4.0 * t)).exp()
        },
        0.0,
        y_end,
        0.0,
        1e-14,
    );
    Ok((a * t).powf(1.0 / a) * mu * norm * sphere_area(n) * q.value)
}

/// `e^{−z} I_ν(z)` for `z ≥ 0`, `ν ≥ −1/2`.
pub fn bessel_i_scaled(nu: f64, z: f64) -> f64 {
    if z == 0.0 {
        return if nu == 0.0 { 1.0 } else if nu > 0.0 { 0.0 } else { f64::INFINITY };
    }
    if z <= 25.0 {
        let h = 0.5 * z;
        let mut term = (nu * h.ln() - ln_gamma(nu + 1.0) - z).exp();
        let mut sum = term;
        for k in 1..500 {
            let kf = k as f64;
            term *= h * h / (kf * (kf + nu));
            sum += term;
            if term <= 1e-17 * sum {
                break;
            }
        }
        return sum;
    }
    let mu4 = 4.0 * nu * nu;
    let mut a = 1.0;
    let mut sum = 1.0;
    for k in 1..60 {
        let kf = k as f64;
        let next = -a * (mu4 - (2.0 * kf - 1.0).powi(2)) / (8.0 * kf * z);
        if next.abs() >= a.abs() || next == 0.0 {
            break;
        }
        a = next;
        sum += a;
        if a.abs() <= 1e-17 * sum.abs() {
            break;
        }
    }
    sum / (2.0 * std::f64::consts::PI * z).sqrt()
}

/// Radial heat kernel: `(e^{τΔ}g)(r) = ∫₀^∞ k_τ(r, ρ) g(ρ) dρ`, sphere measure
/// included.
pub fn radial_heat_kernel(n: f64, tau: f64, r: f64, rho: f64) -> f64 {
    let nu = 0.5 * n - 1.0;
    let z = r * rho / (2.0 * tau);
    let rho_n = if n == 1.0 { 1.0 } else { rho.powf(n - 1.0) };
    if z < 1e-12 {
        // Axis limit of (rρ)^{−ν} I_ν(rρ/2τ).
        let lim = (4.0 * tau).powf(-nu) / gamma(nu + 1.0);
        return rho_n * lim * (-(r * r + rho * rho) / (4.0 * tau)).exp() / (2.0 * tau);
    }
    let d = r - rho;
    rho_n * (r * rho).powf(-nu) * (-d * d / (4.0 * tau)).exp() * bessel_i_scaled(nu, z) / (2.0 * tau)
}

/// Range of `ρ` where the kernel centred at `r` is not negligible.
fn kernel_support(r: f64, tau: f64) -> (f64, f64) {
    let w = 17.0 * tau.sqrt();
    ((r - w).max(0.0), r + w)
}

/// `∫ k_τ(r, ρ) g(ρ) dρ` on the kernel support, split at `breaks`.
fn apply_kernel(n: f64, tau: f64, r: f64, g: &dyn Fn(f64) -> f64, breaks: &[f64], tol: f64) -> f64 {
    let (lo, hi) = kernel_support(r, tau);
    let mut pts = vec![lo];
    pts.extend(breaks.iter().copied().filter(|b| *b > lo && *b < hi));
    if r > lo && r < hi {
        pts.push(r);
    }
    pts.push(hi);
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts.windows(2)
        .map(|w| quad::integrate(|rho| radial_heat_kernel(n, tau, r, rho) * g(rho), w[0], w[1], tol, 1e-10).value)
        .sum()
}

/// `sup_r |u(t) − e^{tΔ}u₀ − ∫₀ᵗ e^{(t−s)Δ}|u|^α u(s) ds|` over `radii` for
/// `u = t^{−1/α} f(r/√t)` and `u₀ = L|x|^{−2/α}`, by nested quadrature.
pub fn duhamel_residual(profile: &Trajectory, t: f64, radii: &[f64]) -> Result<f64> {
    duhamel_residual_with_tail(profile, t, radii, None)
}

/// As [`duhamel_residual`]; for an inverted trajectory `tail` is the value of
/// `w` used past the stored range and `L = w(0)`.
pub fn duhamel_residual_with_tail(profile: &Trajectory, t: f64, radii: &[f64], tail: Option<f64>) -> Result<f64> {
    let p = profile.params;
    let (n, al) = (p.nf(), p.alpha);
    let bound = 2.0 / n;
    if al <= bound * (1.0 + 1e-12) {
        return Err(Error::NonIntegrable { alpha: al, bound });
    }
    if profile.is_trivial() {
        return Ok(0.0);
    }
    let singular = profile.variable == Variable::InvertedS;
    if singular && radii.contains(&0.0) {
        return Err(Error::DomainMismatch("a singular solution is not defined on the axis".into()));
    }
    let view = ProfileView::new(profile, tail)?;
    let l = if singular { profile.values[0] } else { view.tail };
    let edge = view.stored_edge();
    let k = 2.0 / al;
    let scale = if singular {
        l.abs()
    } else {
        t.powf(-1.0 / al) * profile.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    };
    let tol = 1e-9 * scale.max(1.0);
    let mut worst: f64 = 0.0;
    for &r in radii {
        let u = t.powf(-1.0 / al) * view.eval(r / t.sqrt()).0;
        // Linear term; ρ = y^m keeps the integrand bounded at the origin.
        let e = n - k;
        let mpow = (1.0 / e).ceil().max(2.0);
        let (lo, hi) = kernel_support(r, t);
        let lin_g = |y: f64| {
            let rho = y.powf(mpow);
            if rho == 0.0 {
                return 0.0;
            }
            mpow * y.powf(mpow - 1.0) * radial_heat_kernel(n, t, r, rho) * l * rho.powf(-k)
        };
        let mut pts = vec![lo.powf(1.0 / mpow)];
        if r > lo {
            pts.push(r.powf(1.0 / mpow));
        }
        pts.push(hi.powf(1.0 / mpow));
        let lin: f64 = pts.windows(2).map(|w| quad::integrate(lin_g, w[0], w[1], tol, 1e-11).value).sum();
        // Nonlinear term, s = tσ² to absorb the logarithmic singularity at 0.
        let inner = |sigma: f64| -> f64 {
            if sigma == 0.0 || sigma >= 1.0 {
                return 0.0;
            }
            let s = t * sigma * sigma;
            let tau = t - s;
            let sq = s.sqrt();
            let src = |rho: f64| {
                let f = view.eval(rho / sq).0;
                s.powf(-1.0 - 1.0 / al) * abs_pow(f, al) * f
            };
            let breaks = [edge * sq];
            2.0 * t * sigma * apply_kernel(n, tau, r, &src, &breaks, 1e-3 * tol)
        };
        let duh = quad::integrate(inner, 0.0, 1.0, tol, 1e-9).value;
        worst = worst.max((u - lin - duh).abs());
    }
    Ok(worst)
}

/// Radial bump `exp(1 − 1/(1 − ((r−c)/w)²))`, centred at the origin
/// (`c = 0`, a ball) or on a shell away from it (`c ≥ w`).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Bump {
    pub center: f64,
    pub width: f64,
}

impl Bump {
    pub fn new(center: f64, width: f64) -> Result<Self> {
        if !(width > 0.0) || !(center == 0.0 || center >= width) {
            return Err(Error::InvalidParams(format!(
                "bump needs width > 0 and centre 0 or at least the width, got ({center}, {width})"
            )));
        }
        Ok(Bump { center, width })
    }

    pub fn support(&self) -> (f64, f64) {
        ((self.center - self.width).max(0.0), self.center + self.width)
    }

    /// `(φ, rφ', Δφ)` at radius `r` in dimension `n`.
    pub fn eval(&self, r: f64, n: f64) -> (f64, f64, f64) {
        let w = self.width;
        let rho = (r - self.center) / w;
        let u = 1.0 - rho * rho;
        if u <= 0.0 {
            return (0.0, 0.0, 0.0);
        }
        let phi = (1.0 - 1.0 / u).exp();
        let d1 = -2.0 * rho * phi / (u * u) / w;
        let d2 = phi * (4.0 * rho * rho / u.powi(4) - 2.0 / (u * u) - 8.0 * rho * rho / u.powi(3)) / (w * w);
        // φ'/r, finite on the axis for the centred bump.
        let d1_over_r = if self.center == 0.0 { -2.0 * phi / (u * u * w * w) } else { d1 / r };
        (phi, r * d1, d2 + (n - 1.0) * d1_over_r)
    }
}

/// Behaviour of `w` past the end `S` of an inverted trajectory,
/// `w(s) ≈ value·(s/S)^{−decay}·(ln s/ln S)^{−log_decay}`, used for the
/// tail of the weak form.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TailLaw {
    pub value: f64,
    pub decay: f64,
    pub log_decay: f64,
}

impl TailLaw {
    pub fn constant(value: f64) -> Self {
        TailLaw { value, decay: 0.0, log_decay: 0.0 }
    }
}

/// Weak-form residual and the size of the terms that cancel in it.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WeakForm {
    pub residual: f64,
    /// Same integral with both terms taken in absolute value.
    pub magnitude: f64,
}

impl WeakForm {
    pub fn relative(&self) -> f64 {
        if self.magnitude > 0.0 {
            self.residual / self.magnitude
        } else {
            self.residual
        }
    }
}

/// `∫_{ℝ^N} f(Δφ − ½∇·(xφ) + φ/α) + |f|^α f φ` for a radial bump, by
/// quadrature over the stored pieces. For an inverted trajectory
/// (`f(r) = r^{−2/α} w(r^{−2})`) the part beyond the stored range comes
/// from `tail`.
pub fn distributional_residual(profile: &Trajectory, bump: Bump, tail: Option<TailLaw>) -> Result<f64> {
    Ok(weak_form(profile, bump, tail)?.residual)
}

pub fn weak_form(profile: &Trajectory, bump: Bump, tail: Option<TailLaw>) -> Result<WeakForm> {
    let p = profile.params;
    let (n, al) = (p.nf(), p.alpha);
    let area = sphere_area(n);
    let terms = |r: f64, f: f64| {
        let (phi, rdphi, lap) = bump.eval(r, n);
        (f * (lap - 0.5 * (n * phi + rdphi) + phi / al), abs_pow(f, al) * f * phi)
    };
    let (r_lo, r_hi) = bump.support();
    let (gx, gw) = quad::gauss_legendre(8);
    let (mut total, mut mag) = (0.0, 0.0);
    let mut add = |weight: f64, (lin, nl): (f64, f64)| {
        total += weight * (lin + nl);
        mag += weight.abs() * (lin.abs() + nl.abs());
    };
    match profile.variable {
        Variable::RadiusR => {
            if profile.x_max() < r_hi {
                return Err(Error::DomainMismatch(format!("bump reaches {r_hi}, profile ends at {}", profile.x_max())));
            }
            for piece in profile.pieces() {
                let (a, b) = (piece.lo().max(r_lo), piece.hi().min(r_hi));
                if !(b > a) {
                    continue;
                }
                let panels = ((b - a) / (0.02 * bump.width)).ceil().max(1.0) as usize;
                let h = (b - a) / panels as f64;
                for j in 0..panels {
                    let c = a + (j as f64 + 0.5) * h;
                    for (x, wt) in gx.iter().zip(&gw) {
                        let r = c + 0.5 * h * x;
                        let (f, _) = piece.eval(r);
                        add(0.5 * h * wt * r.powf(n - 1.0), terms(r, f));
                    }
                }
            }
        }
        Variable::InvertedS => {
            // r = s^{−1/2}: r^{N−1} dr = ½ s^{−(N+2)/2} ds, integrated in ln s.
            let s_lo = if r_hi.is_finite() { 1.0 / (r_hi * r_hi) } else { 0.0 };
            let s_hi = if r_lo > 0.0 { 1.0 / (r_lo * r_lo) } else { f64::INFINITY };
            let s_end = profile.x_max();
            for piece in profile.pieces() {
                let (a, b) = (piece.lo().max(s_lo), piece.hi().min(s_hi));
                if !(b > a) || a <= 0.0 {
                    continue;
                }
                let (la, lb) = (a.ln(), b.ln());
                let panels = ((lb - la) / 0.05).ceil().max(1.0) as usize;
                let h = (lb - la) / panels as f64;
                for j in 0..panels {
                    let c = la + (j as f64 + 0.5) * h;
                    for (x, wt) in gx.iter().zip(&gw) {
                        let s = (c + 0.5 * h * x).exp();
                        let (w, _) = piece.eval(s);
                        let f = s.powf(1.0 / al) * w;
                        add(0.5 * h * wt * 0.5 * s.powf(-n / 2.0), terms(s.powf(-0.5), f));
                    }
                }
            }
            if s_hi > s_end {
                let tl = tail.ok_or_else(|| {
                    Error::DomainMismatch(format!("bump reaches s = {s_hi:e} past the stored end {s_end:e}"))
                })?;
                if r_lo > 0.0 {
                    return Err(Error::DomainMismatch("shell bump reaches past the stored range".into()));
                }
                // x = ln s = X/y with X = ln S; the integrand decays at
                // least algebraically in x, so y ∈ (0, 1] is a finite range.
                let big_x = s_end.ln();
                let term = |y: f64, which: usize| {
                    if y == 0.0 {
                        return 0.0;
                    }
                    let x = big_x / y;
                    // f = s^{1/α} w; powers of s are combined before exponentiating.
                    let w = tl.value * y.powf(tl.log_decay);
                    let (phi, rdphi, lap) = bump.eval((-0.5 * x).exp(), n);
                    let (k, amp) = if which == 0 {
                        (1.0 / al, w * (lap - 0.5 * (n * phi + rdphi) + phi / al))
                    } else {
                        ((al + 1.0) / al, abs_pow(w, al) * w * phi)
                    };
                    let power = if which == 0 { 1.0 } else { al + 1.0 };
                    let expo = (k - 0.5 * n) * x - tl.decay * power * (x - big_x);
                    0.5 * expo.exp() * amp * big_x / (y * y)
                };
                for which in 0..2 {
                    let q = quad::integrate(|y| term(y, which), 0.0, 1.0, 1e-14, 1e-10);
                    if !q.value.is_finite() {
                        return Err(Error::DomainMismatch("tail of the weak form diverges".into()));
                    }
                    total += q.value;
                    mag += q.value.abs();
                }
            }
        }
    }
    Ok(WeakForm { residual: area * total, magnitude: area * mag })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::integrate_profile;

    fn pp(n: u32, a: f64) -> ProblemParams {
        ProblemParams::new(n, a).unwrap()
    }

    #[test]
    fn zero_profile_gives_zero_field() {
        let p = pp(3, 2.0);
        let z = integrate_profile(0.0, &p, 20.0, 1e-10).unwrap();
        let u = eval_selfsimilar(&z, 1.0, &[0.0, 1.0, 50.0]).unwrap();
        assert!(u.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scaling_identity() {
        let p = pp(3, 2.0);
        let f = integrate_profile(2.0, &p, 60.0, 1e-10).unwrap();
        let lam: f64 = 1.7;
        let radii = [0.0, 0.3, 1.1, 4.0];
        let scaled: Vec<f64> = radii.iter().map(|r| lam * r).collect();
        let u = eval_selfsimilar(&f, 0.8, &radii).unwrap();
        let v = eval_selfsimilar(&f, lam * lam * 0.8, &scaled).unwrap();
        for (a, b) in u.values.iter().zip(&v.values) {
            assert!((a - lam.powf(2.0 / p.alpha) * b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn initial_trace_is_homogeneous() {
        let p = pp(3, 2.0);
        let f = integrate_profile(2.0, &p, 60.0, 1e-10).unwrap();
        let view = ProfileView::new(&f, None).unwrap();
        let radii: Vec<f64> = (0..=40).map(|i| 0.5 + 0.1 * i as f64).collect();
        let mut prev = f64::INFINITY;
        for t in [1e-1, 1e-2, 1e-3] {
            let u = eval_selfsimilar_view(&view, t, &radii).unwrap();
            let err = radii
                .iter()
                .zip(&u.values)
                .map(|(r, v)| (v - view.tail * r.powf(-2.0 / p.alpha)).abs())
                .fold(0.0, f64::max);
            assert!(err < prev, "{err} after {prev}");
            prev = err;
        }
    }

    #[test]
    fn zero_data_stays_zero() {
        let p = pp(3, 1.0);
        let grid = uniform_grid(5.0, 0.1);
        let u0 = RadialField {
            values: vec![0.0; grid.len()],
            grid,
            time: 1.0,
            params: p,
            bc: AxisCondition::RegularAxis,
            extrapolated: false,
        };
        let u = evolve_radial(&u0, 1.5, &EvolveOptions::new(0.01), &|_| 0.0).unwrap();
        assert_eq!(u.sup(), 0.0);
    }

    #[test]
    fn gaussian_follows_heat_kernel() {
        let err = gaussian_heat_error(&pp(3, 1.0), 1.0, 2.0, 0.01, 2e-3).unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn refinement_is_second_order() {
        let p = pp(3, 1.0);
        let e1 = gaussian_heat_error(&p, 1.0, 2.0, 0.08, 0.02).unwrap();
        let e2 = gaussian_heat_error(&p, 1.0, 2.0, 0.04, 0.01).unwrap();
        assert!(e1 / e2 >= 3.0, "{e1} -> {e2}");
    }

    #[test]
    fn semigroup_on_homogeneous_data() {
        let p = pp(3, 1.0);
        let v: Vec<f64> = [0.25, 1.0, 4.0].iter().map(|t| heat_semigroup_homogeneous(2.0, *t, &p).unwrap()).collect();
        for x in &v {
            assert!((x - 1.0).abs() <= 1e-6 && (x - v[0]).abs() <= 1e-6 * v[0]);
        }
        let d = heat_semigroup_homogeneous(4.0, 1.0, &p).unwrap();
        assert!((d - 2.0 * v[1]).abs() <= 1e-12);
        assert!(matches!(heat_semigroup_homogeneous(1.0, 1.0, &pp(3, 0.5)), Err(Error::NonIntegrable { .. })));
    }

    #[test]
    fn scaled_bessel_matches_elementary_forms() {
        for z in [0.01, 0.7, 3.0, 24.0, 26.0, 80.0] {
            let half = (2.0 / (std::f64::consts::PI * z)).sqrt();
            let i_half = half * 0.5 * (1.0 - (-2.0 * z).exp());
            let i_mhalf = half * 0.5 * (1.0 + (-2.0 * z).exp());
            assert!((bessel_i_scaled(0.5, z) - i_half).abs() <= 1e-13 * i_half);
            assert!((bessel_i_scaled(-0.5, z) - i_mhalf).abs() <= 1e-13 * i_mhalf);
        }
        // I₀(1) = 1.2660658777520082.
        assert!((bessel_i_scaled(0.0, 1.0) * 1f64.exp() - 1.2660658777520082).abs() < 1e-14);
    }

    #[test]
    fn kernel_preserves_mass() {
        for n in [1.0, 2.0, 3.0] {
            let m = quad::integrate(|rho| radial_heat_kernel(n, 0.3, 0.8, rho), 0.0, 20.0, 1e-14, 1e-13).value;
            assert!((m - 1.0).abs() < 1e-10, "N = {n}: {m}");
        }
    }

    #[test]
    fn weak_form_of_a_regular_profile() {
        let p = pp(3, 2.0);
        let f = integrate_profile(2.0, &p, 20.0, 1e-11).unwrap();
        let r = distributional_residual(&f, Bump::new(3.0, 1.5).unwrap(), None).unwrap();
        assert!(r.abs() <= 1e-6, "{r}");
        let r0 = distributional_residual(&f, Bump::new(0.0, 2.0).unwrap(), None).unwrap();
        assert!(r0.abs() <= 1e-6, "{r0}");
    }

    #[test]
    fn growth_exponent_of_the_zero_profile() {
        let p = pp(3, 2.0);
        let z = integrate_profile(0.0, &p, 20.0, 1e-10).unwrap();
        let l = leading_growth_exponent(&z, 12.0, 0.01).unwrap();
        assert!((l - (0.5 - 1.5)).abs() < 1e-3, "{l}");
    }

    #[test]
    fn selfsimilar_check_on_a_stable_profile() {
        let p = pp(3, 2.0);
        let f = integrate_profile(2.0, &p, 80.0, 1e-11).unwrap();
        let rep = selfsimilar_check(&f, (1.0, 2.0), 10.0, 1e-3, (0.04, 8e-3), 3).unwrap();
        assert!(rep.blowup_at.is_none());
        assert!(rep.richardson.unwrap() <= 1e-3, "{rep:?}");
        assert!(rep.error.unwrap() <= 1e-2, "{rep:?}");
    }

    #[test]
    fn selfsimilar_error_is_second_order() {
        let p = pp(3, 2.0);
        let f = integrate_profile(2.0, &p, 80.0, 1e-11).unwrap();
        let e1 = selfsimilar_evolution_error(&f, 1.0, 2.0, 10.0, 0.04, 8e-3).unwrap();
        let e2 = selfsimilar_evolution_error(&f, 1.0, 2.0, 10.0, 0.02, 4e-3).unwrap();
        assert!(e1 / e2 >= 3.0, "{e1} -> {e2}");
    }

    #[test]
    fn stationary_singular_solution_solves_the_integral_form() {
        // β > 0: w ≡ β^{1/α} gives u = β^{1/α}|x|^{−2/α} for all t.
        let p = pp(3, 3.0);
        let c = p.constants().beta.powf(1.0 / p.alpha);
        let grid: Vec<f64> = (0..=64).map(|i| if i == 0 { 0.0 } else { 10f64.powf(-8.0 + 0.25 * i as f64) }).collect();
        let n = grid.len();
        let w = Trajectory::from_samples(Variable::InvertedS, p, grid, vec![c; n], vec![0.0; n]);
        let r = duhamel_residual_with_tail(&w, 1.0, &[0.5, 1.0, 2.0, 5.0], Some(c)).unwrap();
        assert!(r <= 1e-8 * c, "{r}");
    }

    #[test]
    fn duhamel_zero_profile() {
        let z = integrate_profile(0.0, &pp(3, 2.0), 20.0, 1e-10).unwrap();
        assert_eq!(duhamel_residual(&z, 1.0, &[0.0, 1.0]).unwrap(), 0.0);
    }
}
