//! Inverted profiles `w(s) = s^{-1/α} f(s^{-1/2})` solving
//! `4s²w'' + (4γs − 1)w' + g(w) = 0` with `w(0) = μ`: the singular start at
//! `s = 0`, energies, zero counts and the slow/fast decay classification.
//!
//! A solution is pinned by its first local maximum: `w(s₁) = ρμ`, `w'(s₁) = 0`
//! with `s₁` the largest point for which the backward solution reaches
//! `w(0) = μ`. From `s₁` the equation is integrated backward to the origin
//! (stiffly, the fast mode there is `e^{-1/(4s)}`) and forward in `ln s`.
//! Near the origin the solution is re-derived as the fixed point of the
//! integral representation, which certifies the backward pass.

use serde::{Deserialize, Serialize};

use crate::constants::{abs_pow, DerivedConstants, ProblemParams, Regime};
use crate::error::{Error, Result};
use crate::ode::{Dopri5, Flow, Segment, State};
use crate::stiff::Sdirk4;
use crate::trajectory::{extrapolate_to_zero, LimitEstimate, Piece, Trajectory, Variable, ZeroEvent};

/// `g(x) = −βx + |x|^α x`.
pub fn g_nonlinearity(x: f64, p: &ProblemParams) -> f64 {
    let beta = p.constants().beta;
    -beta * x + abs_pow(x, p.alpha) * x
}

/// `G(x) = −βx²/2 + |x|^{α+2}/(α+2)`, the primitive of `g` with `G(0) = 0`.
pub fn g_potential(x: f64, p: &ProblemParams) -> f64 {
    let beta = p.constants().beta;
    -0.5 * beta * x * x + abs_pow(x, p.alpha) * x * x / (p.alpha + 2.0)
}

#[derive(Debug, Clone, Copy)]
struct Coeffs {
    alpha: f64,
    beta: f64,
    gamma: f64,
}

impl Coeffs {
    fn of(p: &ProblemParams) -> Self {
        let c = p.constants();
        Coeffs { alpha: p.alpha, beta: c.beta, gamma: c.gamma }
    }

    fn g(&self, x: f64) -> f64 {
        -self.beta * x + abs_pow(x, self.alpha) * x
    }

    /// System in `s` for `(w, w')`.
    fn rhs_s(&self, s: f64, y: &State) -> State {
        [y[1], ((1.0 - 4.0 * self.gamma * s) * y[1] - self.g(y[0])) / (4.0 * s * s)]
    }

    /// System in `t = ln s` for `(w, s·w')`.
    fn rhs_log(&self, t: f64, y: &State) -> State {
        [y[1], y[1] * (1.0 - self.gamma + 0.25 * (-t).exp()) - 0.25 * self.g(y[0])]
    }
}

/// Default end of the forward integration by regime (logarithmic rates need
/// a longer range).
pub fn default_s_max(regime: Regime) -> f64 {
    match regime {
        Regime::BetaZero => 1e6,
        Regime::DimTwo => 1e5,
        _ => 1e4,
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InvertOptions {
    pub s_max: f64,
    pub tol: f64,
    /// Height of the first local maximum in units of `μ`.
    pub pin_ratio: f64,
    /// Stop after this many zeros; the count is then only a lower bound.
    pub zero_cap: usize,
    /// Keep at most this many forward steps of continuous extension at each
    /// end of the range (the middle is dropped for very long runs).
    pub piece_cap: usize,
}

impl InvertOptions {
    pub fn new(s_max: f64, tol: f64) -> Self {
        InvertOptions { s_max, tol, pin_ratio: 3.0, zero_cap: 2_000_000, piece_cap: 150_000 }
    }

    pub fn for_params(p: &ProblemParams) -> Self {
        Self::new(default_s_max(p.constants().regime), 1e-10)
    }
}

/// Zero bookkeeping of the forward pass.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ZeroTally {
    pub count: usize,
    /// False when the run stopped at the zero cap.
    pub complete: bool,
    /// Zeros inside `(0, b)`.
    pub in_window: usize,
    /// Largest distance between consecutive zeros inside `(0, b)`, counting
    /// the stretch from the last resolved zero to the end of the run when
    /// that end lies inside the window.
    pub max_window_gap: f64,
}

/// Certificate of the integral representation near `s = 0`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FixedPoint {
    /// Right end of the interval `[0, σ]`.
    pub sigma: f64,
    /// Largest observed ratio of successive sup-norm increments.
    pub contraction_ratio: f64,
    pub iterations: usize,
    /// `sup |w_fixed − w_integrated| / μ` on `[0, σ]`.
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct InvertedSolution {
    pub traj: Trajectory,
    /// `w(0)`.
    pub mu: f64,
    /// Requested value of `w(0)`.
    pub mu_target: f64,
    /// Position of the first local maximum, `w'(s₁) = 0`.
    pub s1: f64,
    pub peak: f64,
    pub contraction_ratio: f64,
    pub fixed_point: FixedPoint,
    /// `sup_{[0, 2s₁]} |w| / μ`.
    pub sup_ratio: f64,
    pub tally: ZeroTally,
    /// Where the forward pass ended.
    pub s_end: f64,
    /// Stretch without stored continuous extension, if any.
    pub gap: Option<(f64, f64)>,
    pub params: ProblemParams,
    pub tol: f64,
}

impl InvertedSolution {
    pub fn eval(&self, s: f64) -> Option<(f64, f64)> {
        self.traj.eval(s)
    }
}

/// Backward integration from `(s1, c, 0)` towards the origin; returns
/// `w(0)` and optionally the accepted nodes `(s, w, w')`.
fn backward(co: &Coeffs, s1: f64, c: f64, tol: f64, nodes: Option<&mut Vec<(f64, f64, f64)>>) -> Result<f64> {
    let s_e = 1e-7 * s1;
    let mut sink = nodes;
    if let Some(v) = sink.as_deref_mut() {
        v.push((s1, c, 0.0));
    }
    let st = Sdirk4::new(tol, 1e-2 * tol * c.abs().max(1.0)).integrate(
        |s, y| co.rhs_s(s, y),
        s1,
        [c, 0.0],
        s_e,
        1e-3 * s1,
        |s, y| {
            if let Some(v) = sink.as_deref_mut() {
                v.push((s, y[0], y[1]));
            }
        },
    )?;
    let w0 = st.y_end[0] - s_e * st.y_end[1];
    if !w0.is_finite() {
        return Err(Error::RootFindDiverged(format!("backward pass from s1 = {s1} is not finite")));
    }
    Ok(w0)
}

/// Largest `s₁` in the scan for which the backward pass from the pinned
/// maximum lands on `w(0) = μ`.
fn locate_s1(co: &Coeffs, mu: f64, c: f64, tol: f64) -> Result<f64> {
    let scale = mu.powf(-co.alpha);
    let mut s = 2.0 * scale / co.alpha;
    let floor = 1e-4 * scale;
    let mut prev: Option<(f64, f64)> = None;
    while s > floor {
        match backward(co, s, c, tol, None) {
            Ok(v) => {
                if let Some((ps, pv)) = prev {
                    if (pv - mu) * (v - mu) <= 0.0 {
                        return bisect_s1(co, mu, c, tol, s, v - mu, ps);
                    }
                }
                prev = Some((s, v));
            }
            Err(_) => prev = None,
        }
        s /= 1.05;
    }
    Err(Error::RootFindDiverged(format!("no pinned maximum of height {c} reaches w(0) = {mu}")))
}

fn bisect_s1(co: &Coeffs, mu: f64, c: f64, tol: f64, mut lo: f64, mut f_lo: f64, mut hi: f64) -> Result<f64> {
    if f_lo == 0.0 {
        return Ok(lo);
    }
    for _ in 0..200 {
        if hi - lo <= 1e-14 * hi {
            break;
        }
        let m = 0.5 * (lo + hi);
        let fm = backward(co, m, c, tol, None)? - mu;
        if fm == 0.0 {
            return Ok(m);
        }
        if (fm > 0.0) == (f_lo > 0.0) {
            lo = m;
            f_lo = fm;
        } else {
            hi = m;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn e1_lin(d: f64) -> f64 {
    // ∫₀¹ x e^{−D(1−x)} dx
    if d < 1e-3 {
        0.5 - d / 6.0 + d * d / 24.0
    } else {
        (d + (-d).exp_m1()) / (d * d)
    }
}

fn f1_lin(d: f64) -> f64 {
    // ∫₀¹ x e^{−Dx} dx
    if d < 1e-3 {
        0.5 - d / 3.0 + d * d / 8.0
    } else {
        (1.0 - (-d).exp() * (1.0 + d)) / (d * d)
    }
}

fn e0(d: f64) -> f64 {
    // ∫₀¹ e^{−Dx} dx
    if d < 1e-8 {
        1.0 - 0.5 * d
    } else {
        -(-d).exp_m1() / d
    }
}

/// Fixed point of
/// `w(s) = w(σ) − A(s) w'(σ) − ¼∫_s^σ K(t) dt`,
/// `K(t) = ∫_t^σ (r^{γ−2}/t^γ) e^{1/(4r) − 1/(4t)} g(w(r)) dr`,
/// `A(s) = ∫_s^σ (σ/t)^γ e^{1/(4σ) − 1/(4t)} dt`,
/// iterated from `w ≡ μ`. The exponential weights are integrated exactly in
/// `u = 1/(4t)` against linear interpolants.
fn fixed_point_near_origin(
    co: &Coeffs,
    sigma: f64,
    w_sigma: f64,
    wp_sigma: f64,
    mu: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64, usize) {
    let q: f64 = 1.002;
    let n = ((1e8f64).ln() / q.ln()).ceil() as usize;
    // Decreasing nodes t_0 = σ > t_1 > … > t_n, then t = 0.
    let mut t: Vec<f64> = (0..=n).map(|k| sigma * q.powi(-(k as i32))).collect();
    t.push(0.0);
    let m = t.len();
    let u: Vec<f64> = t.iter().map(|x| 0.25 / x).collect();
    let gm = co.gamma;
    // Homogeneous pieces do not depend on w.
    let mut b = vec![0.0; m];
    let mut a = vec![0.0; m];
    b[0] = 1.0;
    for i in 1..n + 1 {
        b[i] = (gm * (sigma / t[i]).ln() - (u[i] - u[0])).exp();
        let d = u[i] - u[i - 1];
        let psi_a = 4.0 * t[i - 1] * t[i - 1] * (sigma / t[i - 1]).powf(gm);
        let psi_b = 4.0 * t[i] * t[i] * (sigma / t[i]).powf(gm);
        let w_a = (-(u[i - 1] - u[0])).exp();
        a[i] = a[i - 1] + w_a * d * (psi_a * e0(d) + (psi_b - psi_a) * f1_lin(d));
    }
    a[m - 1] = a[n];
    let mut w = vec![mu; m];
    let mut wp = vec![0.0; m];
    let mut k = vec![0.0; m];
    let mut prev_inc = f64::NAN;
    let mut ratio: f64 = 0.0;
    let floor = 1e-13 * mu.abs().max(w_sigma.abs());
    let mut iters = 0;
    for it in 0..200 {
        iters = it + 1;
        let g: Vec<f64> = w.iter().map(|x| co.g(*x)).collect();
        k[0] = 0.0;
        for i in 1..n + 1 {
            let d = u[i] - u[i - 1];
            let rr = (t[i - 1] / t[i]).powf(gm);
            let phi_a = 4.0 * rr * g[i - 1];
            let phi_b = 4.0 * g[i];
            k[i] = rr * (-d).exp() * k[i - 1] + d * (phi_a * e0(d) + (phi_b - phi_a) * e1_lin(d));
        }
        k[m - 1] = 4.0 * g[m - 1];
        let mut new = vec![0.0; m];
        let mut ik = 0.0;
        new[0] = w_sigma;
        wp[0] = wp_sigma + 0.25 * k[0];
        for i in 1..m {
            ik += 0.5 * (k[i] + k[i - 1]) * (t[i - 1] - t[i]);
            new[i] = w_sigma - a[i] * wp_sigma - 0.25 * ik;
            wp[i] = b[i] * wp_sigma + 0.25 * k[i];
        }
        let inc = new.iter().zip(&w).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        w = new;
        if prev_inc.is_finite() && prev_inc > 1e3 * floor && inc > 1e3 * floor {
            ratio = ratio.max(inc / prev_inc);
        }
        prev_inc = inc;
        if inc <= floor {
            break;
        }
    }
    t.reverse();
    w.reverse();
    wp.reverse();
    (t, w, wp, ratio, iters)
}

fn certify_origin(co: &Coeffs, traj: &Trajectory, mu: f64, s1: f64) -> Result<FixedPoint> {
    let mut nu = 0.1 / (4.0 * (co.gamma - 1.0));
    let mut last = f64::NAN;
    for _ in 0..=8 {
        let sigma = (2.0 * nu * mu.abs().powf(-co.alpha)).min(0.5 * s1);
        let (ws, wps) = traj.eval(sigma).ok_or_else(|| Error::DomainMismatch(format!("no data at sigma = {sigma}")))?;
        let (t, w, _, ratio, iterations) = fixed_point_near_origin(co, sigma, ws, wps, mu);
        last = ratio;
        if ratio < 0.5 {
            let gap = t
                .iter()
                .zip(&w)
                .filter_map(|(s, v)| traj.eval(*s).map(|r| (r.0 - v).abs()))
                .fold(0.0, f64::max)
                / mu.abs();
            return Ok(FixedPoint { sigma, contraction_ratio: ratio, iterations, gap });
        }
        nu *= 0.5;
    }
    Err(Error::ContractionFailed(last))
}

/// Inverted solution with `w(0) = μ` on `[0, s_max]`.
pub fn solve_inverted(mu: f64, p: &ProblemParams, opts: &InvertOptions) -> Result<InvertedSolution> {
    p.require_subcritical()?;
    if p.n == 1 {
        return Err(Error::RegimeMismatch("one-dimensional inverted solutions come from the duality map".into()));
    }
    if !(mu >= 1.0) || !mu.is_finite() {
        return Err(Error::InvalidParams(format!("mu must be >= 1, got {mu}")));
    }
    if !(opts.pin_ratio > 1.0) {
        return Err(Error::InvalidParams(format!("pin ratio must exceed 1, got {}", opts.pin_ratio)));
    }
    let co = Coeffs::of(p);
    let tol = opts.tol;
    let peak = opts.pin_ratio * mu;
    let s1 = locate_s1(&co, mu, peak, tol)?;
    if !(opts.s_max > s1) {
        return Err(Error::InvalidParams(format!("s_max = {} must exceed s1 = {s1}", opts.s_max)));
    }

    let mut traj = Trajectory::new(Variable::InvertedS, *p);
    let mut nodes = Vec::new();
    let w0 = backward(&co, s1, peak, tol, Some(&mut nodes))?;
    nodes.reverse();
    let s_e = nodes[0].0;
    let origin = (0.0, w0, co.g(w0));
    let mut back = vec![origin];
    back.extend(nodes.iter().copied().filter(|n| n.0 >= s_e));
    for i in 0..back.len() {
        let (s, w, wp) = back[i];
        traj.push(s, w, wp);
        if i > 0 {
            let (s0, w0_, wp0) = back[i - 1];
            traj.push_piece(Piece::Hermite { x0: s0, x1: s, y0: w0_, d0: wp0, y1: w, d1: wp });
        }
    }
    traj.finish();

    let fixed_point = certify_origin(&co, &traj, w0, s1)?;

    // Forward pass in t = ln s.
    let b = 1.0 / (4.0 * co.gamma + 8.0);
    let ode = Dopri5::new(tol, 1e-3 * tol).with_split_at_zero(0).with_max_steps(usize::MAX);
    let mut head: Vec<Segment> = Vec::new();
    let mut tail: std::collections::VecDeque<Segment> = std::collections::VecDeque::new();
    let mut dropped: Option<(f64, f64)> = None;
    let mut zeros: Vec<ZeroEvent> = Vec::new();
    let mut tally = ZeroTally { complete: true, ..Default::default() };
    let mut last_zero_in_window: Option<f64> = None;
    let mut last_sign = 1.0f64;
    let mut max_res: f64 = 0.0;
    let mut sup_near: f64 = back.iter().map(|n| n.1.abs()).fold(0.0, f64::max);
    let rhs = |t: f64, y: &State| co.rhs_log(t, y);
    let stats = ode.integrate(rhs, s1.ln(), [peak, 0.0], opts.s_max.ln(), |seg| {
        if seg.t0.exp() < 2.0 * s1 {
            sup_near = sup_near.max(seg.y1[0].abs());
        }
        max_res = max_res.max(seg.defect(rhs, ode.atol, ode.rtol));
        let sg = seg.y1[0].signum();
        if sg != 0.0 {
            if sg != last_sign {
                let z = seg.root(0, 1e-14 * seg.t1.abs().max(1.0)).exp();
                tally.count += 1;
                if zeros.len() < opts.zero_cap {
                    zeros.push(ZeroEvent { at: z, slope: seg.eval(z.ln())[1] / z });
                }
                if z < b {
                    tally.in_window += 1;
                    if let Some(prev) = last_zero_in_window {
                        tally.max_window_gap = tally.max_window_gap.max(z - prev);
                    }
                    last_zero_in_window = Some(z);
                }
            }
            last_sign = sg;
        }
        if head.len() < opts.piece_cap {
            head.push(*seg);
        } else {
            tail.push_back(*seg);
            if tail.len() > opts.piece_cap {
                let old = tail.pop_front().expect("non-empty");
                dropped = Some(match dropped {
                    None => (old.t0.exp(), old.t1.exp()),
                    Some((lo, _)) => (lo, old.t1.exp()),
                });
            }
        }
        if tally.count >= opts.zero_cap {
            tally.complete = false;
            return Flow::Stop;
        }
        Flow::Continue
    })?;
    let s_end = stats.t_end.exp();
    if let Some(z) = last_zero_in_window {
        let end = s_end.min(b);
        tally.max_window_gap = tally.max_window_gap.max(end - z);
    }
    for seg in head.iter().chain(tail.iter()) {
        let s = seg.t1.exp();
        traj.push(s, seg.y1[0], seg.y1[1] / s);
        traj.push_piece(Piece::Log(*seg));
    }
    traj.zeros.extend(zeros);
    traj.meta.steps = stats.steps;
    traj.meta.rejected = stats.rejected;
    traj.meta.max_residual = max_res;
    traj.finish();

    Ok(InvertedSolution {
        traj,
        mu: w0,
        mu_target: mu,
        s1,
        peak,
        contraction_ratio: fixed_point.contraction_ratio,
        fixed_point,
        sup_ratio: sup_near / w0.abs(),
        tally,
        s_end,
        gap: dropped,
        params: *p,
        tol,
    })
}

/// `H(s) = 2s²w'(s)² + G(w(s))`.
#[allow(non_snake_case)]
pub fn energy_H(sol: &InvertedSolution, s: f64) -> Result<f64> {
    let (w, wp) = sol
        .eval(s)
        .ok_or_else(|| Error::DomainMismatch(format!("s = {s} outside the stored solution")))?;
    Ok(2.0 * s * s * wp * wp + g_potential(w, &sol.params))
}

/// Pointwise check of `H'(s) = w'²(1 − 4(γ−1)s)` with a five-point
/// difference quotient, and of monotonicity past `1/(4(γ−1))`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EnergyCheck {
    /// `max |H'_fd − w'²(1 − 4(γ−1)s)| / max(1, w'²(1 + 4(γ−1)s))`.
    pub max_mismatch: f64,
    /// Largest increase of `H` between consecutive grid points past the
    /// threshold, relative to `max(1, |H|)`.
    pub max_increase: f64,
    pub samples: usize,
}

pub fn energy_check(sol: &InvertedSolution, s_lo: f64, s_hi: f64, samples: usize) -> Result<EnergyCheck> {
    let c = sol.params.constants();
    let k = 4.0 * (c.gamma - 1.0);
    let h_of = |s: f64| energy_H(sol, s);
    let mut mismatch: f64 = 0.0;
    for i in 0..samples {
        let s = s_lo * (s_hi / s_lo).powf(i as f64 / (samples - 1).max(1) as f64);
        let h = 1e-3 * s;
        let d = (-h_of(s + 2.0 * h)? + 8.0 * h_of(s + h)? - 8.0 * h_of(s - h)? + h_of(s - 2.0 * h)?) / (12.0 * h);
        let wp = sol.eval(s).expect("checked above").1;
        let exact = wp * wp * (1.0 - k * s);
        mismatch = mismatch.max((d - exact).abs() / (wp * wp * (1.0 + k * s)).max(1.0));
    }
    let start = 1.0 / k;
    let mut inc: f64 = 0.0;
    let g = &sol.traj.grid;
    let mut prev: Option<f64> = None;
    for (i, s) in g.iter().enumerate() {
        if *s <= start || *s > sol.s_end {
            continue;
        }
        let h = 2.0 * s * s * sol.traj.derivs[i].powi(2) + g_potential(sol.traj.values[i], &sol.params);
        if let Some(hp) = prev {
            inc = inc.max((h - hp) / hp.abs().max(1.0));
        }
        prev = Some(h);
    }
    Ok(EnergyCheck { max_mismatch: mismatch, max_increase: inc, samples })
}

/// Map between `f(r)` and `w(s)`, `s = r^{-2}`, `w = r^{2/α} f`; points at the
/// image singularity (`r = 0` or `s = 0`) are dropped.
pub fn invert_duality(traj: &Trajectory) -> Result<Trajectory> {
    let p = traj.params;
    let k = 2.0 / p.alpha;
    let mut grid = Vec::new();
    let mut values = Vec::new();
    let mut derivs = Vec::new();
    for i in (0..traj.grid.len()).rev() {
        let x = traj.grid[i];
        if !(x > 0.0) {
            continue;
        }
        let (y, dy) = (traj.values[i], traj.derivs[i]);
        let (nx, ny, ndy) = match traj.variable {
            Variable::RadiusR => {
                let rk = x.powf(k);
                (1.0 / (x * x), rk * y, -(rk * x * x / p.alpha) * y - 0.5 * rk * x * x * x * dy)
            }
            Variable::InvertedS => {
                let r = 1.0 / x.sqrt();
                let rk = r.powf(-k);
                (r, rk * y, -k * rk / r * y - 2.0 * rk / (r * r * r) * dy)
            }
        };
        grid.push(nx);
        values.push(ny);
        derivs.push(ndy);
    }
    if grid.len() < 2 {
        return Err(Error::DomainMismatch("fewer than two points away from the singular end".into()));
    }
    let var = match traj.variable {
        Variable::RadiusR => Variable::InvertedS,
        Variable::InvertedS => Variable::RadiusR,
    };
    let mut out = Trajectory::from_samples(var, p, grid, values, derivs);
    out.meta = traj.meta;
    Ok(out)
}

/// `w(0)` of an inverted trajectory that does not reach the origin:
/// integrate the equation from `s_start` back to `s → 0`.
pub fn origin_value(traj: &Trajectory, s_start: f64, tol: f64) -> Result<f64> {
    if traj.variable != Variable::InvertedS {
        return Err(Error::DomainMismatch("expected an inverted trajectory".into()));
    }
    let (w, wp) = traj
        .eval(s_start)
        .ok_or_else(|| Error::DomainMismatch(format!("s = {s_start} outside the trajectory")))?;
    let co = Coeffs::of(&traj.params);
    let s_e = 1e-9 * s_start;
    let st = Sdirk4::new(tol, 1e-3 * tol).integrate(|s, y| co.rhs_s(s, y), s_start, [w, wp], s_e, 1e-3 * s_start, |_, _| {})?;
    Ok(st.y_end[0] - s_e * st.y_end[1])
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ZeroCount {
    pub count: usize,
    /// False if the count is only a lower bound.
    pub complete: bool,
}

/// Zeros of `w` on `(0, s_max)`.
pub fn count_zeros_inverted(sol: &InvertedSolution) -> ZeroCount {
    ZeroCount { count: sol.tally.count, complete: sol.tally.complete }
}

/// `(s, h₁, h₂)` with `h₂ = s w'/w`, `h₁ = h₂ + 1/α`, on the tail past the last
/// sign change of `w` and of `w'`.
pub fn riccati_monitors(sol: &InvertedSolution) -> Result<Vec<(f64, f64, f64)>> {
    let p = sol.params;
    if p.constants().regime != Regime::BetaZero {
        return Err(Error::RegimeMismatch(format!("Riccati monitors need (N-2)·alpha = 2, got {}", (p.nf() - 2.0) * p.alpha)));
    }
    let t = &sol.traj;
    let n = t.grid.len();
    let mut start = 0;
    for i in 1..n {
        if (t.values[i] > 0.0) != (t.values[i - 1] > 0.0) || (t.derivs[i] > 0.0) != (t.derivs[i - 1] > 0.0) {
            start = i;
        }
    }
    Ok((start..n)
        .filter(|i| t.grid[*i] > 0.0 && t.values[*i] != 0.0)
        .map(|i| {
            let h2 = t.grid[i] * t.derivs[i] / t.values[i];
            (t.grid[i], h2 + 1.0 / p.alpha, h2)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Slow,
    Fast,
    Undetermined,
}

/// Tail diagnostics gathered while classifying.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TailReport {
    pub s_max: f64,
    /// `s·w'(s)` at the end.
    pub s_wprime_end: f64,
    /// `H` at `s_max/4`, `s_max/2`, `s_max`.
    pub energy_tail: [f64; 3],
    /// Second, independent estimate of `L̃` (quadrature formulas).
    pub quadrature: Option<LimitEstimate>,
    /// `sup s^{λ₂}(|w| + s|w'|)/ln s` over `s ≥ e` (β < 0), or
    /// `sup (1+s)^λ(|w| + (1+s)|w'|)/ln(2+s)` (N = 2).
    pub growth_bound: Option<f64>,
    /// `max √s·|c_j(s) − c_j(∞)|` over the decades in `[10², s_max]` (N = 2).
    pub coefficient_drift: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Classification {
    pub mode: Mode,
    pub ltilde: LimitEstimate,
    pub ltilde1: Option<LimitEstimate>,
    pub regime: Regime,
    pub report: TailReport,
}

fn at(sol: &InvertedSolution, s: f64) -> Result<(f64, f64)> {
    sol.eval(s).ok_or_else(|| Error::DomainMismatch(format!("s = {s} outside the stored solution")))
}

/// Extrapolate `q(s)` to `s → ∞` from three checkpoints `s_hi, s_hi/2,
/// s_hi/4`, assuming corrections in powers of `s^{-rate}`.
fn richardson(sol: &InvertedSolution, s_hi: f64, rate: f64, q: impl Fn(f64, f64, f64) -> f64) -> Result<LimitEstimate> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for j in 0..3 {
        let s = s_hi / 2f64.powi(j);
        let (w, wp) = at(sol, s)?;
        xs.push(s.powf(-rate));
        ys.push(q(s, w, wp));
    }
    let two = extrapolate_to_zero(&xs[..2], &ys[..2]);
    let three = extrapolate_to_zero(&xs, &ys);
    let unc = (three - two).abs() + 1e-12 * three.abs();
    Ok(LimitEstimate { value: three, uncertainty: unc, converged: unc <= 1e-3 * three.abs().max(1e-12), window: (s_hi / 4.0, s_hi) })
}

/// Least-squares fit `P(s) = L + Σ c_k s^{-e_k} (ln s)^{m_k}` on geometric
/// checkpoints in `[lo, hi]`.
fn power_fit(sol: &InvertedSolution, lo: f64, hi: f64, basis: &[(f64, i32)], q: &impl Fn(f64, f64, f64) -> f64) -> Result<f64> {
    let m = 12;
    let k = basis.len() + 1;
    let mut ata = vec![vec![0.0; k]; k];
    let mut atb = vec![0.0; k];
    for i in 0..m {
        let s = lo * (hi / lo).powf(i as f64 / (m - 1) as f64);
        let (w, wp) = at(sol, s)?;
        let y = q(s, w, wp);
        let mut row = vec![1.0];
        row.extend(basis.iter().map(|(e, l)| s.powf(-e) * s.ln().powi(*l)));
        for a in 0..k {
            atb[a] += row[a] * y;
            for b in 0..k {
                ata[a][b] += row[a] * row[b];
            }
        }
    }
    // Gaussian elimination with partial pivoting.
    for c in 0..k {
        let piv = (c..k).max_by(|a, b| ata[*a][c].abs().total_cmp(&ata[*b][c].abs())).expect("non-empty");
        ata.swap(c, piv);
        atb.swap(c, piv);
        for r in c + 1..k {
            let f = ata[r][c] / ata[c][c];
            for j in c..k {
                ata[r][j] -= f * ata[c][j];
            }
            atb[r] -= f * atb[c];
        }
    }
    let mut x = vec![0.0; k];
    for c in (0..k).rev() {
        let s: f64 = (c + 1..k).map(|j| ata[c][j] * x[j]).sum();
        x[c] = (atb[c] - s) / ata[c][c];
    }
    Ok(x[0])
}

/// Correction basis for two decay exponents; coinciding exponents resonate
/// and bring in a logarithm.
fn correction_basis(e1: f64, e2: f64) -> Vec<(f64, i32)> {
    let lo = e1.min(e2);
    if (e1 - e2).abs() <= 1e-9 * lo.max(1.0) {
        vec![(lo, 0), (lo, 1), (2.0 * lo, 0)]
    } else {
        vec![(e1, 0), (e2, 0), (2.0 * lo, 0)]
    }
}

fn plateau_fit(sol: &InvertedSolution, s_hi: f64, basis: &[(f64, i32)], q: impl Fn(f64, f64, f64) -> f64) -> Result<LimitEstimate> {
    let a = power_fit(sol, s_hi / 100.0, s_hi, basis, &q)?;
    let b = power_fit(sol, s_hi / 1000.0, s_hi / 10.0, basis, &q)?;
    let unc = (a - b).abs() + 1e-12 * a.abs();
    Ok(LimitEstimate { value: a, uncertainty: unc, converged: unc <= 1e-3 * a.abs().max(1e-12), window: (s_hi / 100.0, s_hi) })
}

/// `∫ f(s, w, w') ds` over `[lo, hi]` along the stored continuous extension.
fn integrate_along(sol: &InvertedSolution, lo: f64, hi: f64, f: impl Fn(f64, f64, f64) -> f64) -> f64 {
    const X: [f64; 5] = [-0.906_179_845_938_664, -0.538_469_310_105_683, 0.0, 0.538_469_310_105_683, 0.906_179_845_938_664];
    const W: [f64; 5] = [0.236_926_885_056_189_1, 0.478_628_670_499_366_5, 0.568_888_888_888_888_9, 0.478_628_670_499_366_5, 0.236_926_885_056_189_1];
    let mut total = 0.0;
    for piece in sol.traj.pieces() {
        let (a, b) = (piece.lo().max(lo), piece.hi().min(hi));
        if !(a < b) {
            continue;
        }
        let log = matches!(piece, Piece::Log(_));
        let (ua, ub) = if log { (a.ln(), b.ln()) } else { (a, b) };
        let (c, h) = (0.5 * (ua + ub), 0.5 * (ub - ua));
        for k in 0..5 {
            let u = c + h * X[k];
            let s = if log { u.exp() } else { u };
            let (w, wp) = piece.eval(s);
            let jac = if log { s } else { 1.0 };
            total += W[k] * h * jac * f(s, w, wp);
        }
    }
    total
}

fn tail_report(sol: &InvertedSolution, s_max: f64) -> Result<TailReport> {
    let (_, wp) = at(sol, s_max)?;
    let mut energy_tail = [0.0; 3];
    for (j, f) in [0.25, 0.5, 1.0].iter().enumerate() {
        energy_tail[j] = energy_H(sol, f * s_max)?;
    }
    Ok(TailReport {
        s_max,
        s_wprime_end: s_max * wp,
        energy_tail,
        quadrature: None,
        growth_bound: None,
        coefficient_drift: None,
    })
}

fn slow_or_fast(lt: &LimitEstimate, lt1: &LimitEstimate) -> Mode {
    if lt.value.abs() > lt.uncertainty {
        Mode::Slow
    } else if lt1.value.abs() > lt1.uncertainty {
        Mode::Fast
    } else {
        Mode::Undetermined
    }
}

/// Decide between slow decay `w ~ L̃ φ₂` and fast decay `w ~ L̃₁ φ₁`.
pub fn classify_asymptotics(sol: &InvertedSolution) -> Result<Classification> {
    let p = sol.params;
    let c = p.constants();
    if !sol.tally.complete || sol.gap.is_some() {
        return Err(Error::Undetermined(format!(
            "forward pass stopped at s = {:.6e} after {} zeros",
            sol.s_end, sol.tally.count
        )));
    }
    let s_max = sol.s_end;
    let mut report = tail_report(sol, s_max)?;
    let floor = 1e-6 * sol.mu.abs();
    let (mode, ltilde, ltilde1) = match c.regime {
        Regime::BetaPos => classify_beta_pos(sol, &c, s_max, floor)?,
        Regime::BetaZero => classify_beta_zero(sol, &c, s_max, floor)?,
        Regime::BetaNeg => {
            let (m, lt, lt1, quad, growth) = classify_beta_neg(sol, &c, s_max, floor)?;
            report.quadrature = Some(quad);
            report.growth_bound = Some(growth);
            (m, lt, lt1)
        }
        Regime::DimTwo => {
            let (m, lt, lt1, growth, drift) = classify_dim_two(sol, &c, s_max, floor)?;
            report.growth_bound = Some(growth);
            report.coefficient_drift = Some(drift);
            (m, lt, lt1)
        }
        Regime::DimOne => return Err(Error::RegimeMismatch("no inverted classification in one dimension".into())),
    };
    Ok(Classification { mode, ltilde, ltilde1, regime: c.regime, report })
}

type Verdict = (Mode, LimitEstimate, Option<LimitEstimate>);

fn classify_beta_pos(sol: &InvertedSolution, c: &DerivedConstants, s_max: f64, floor: f64) -> Result<Verdict> {
    let l1 = c.lambda1;
    let w_star = c.beta.powf(1.0 / sol.params.alpha);
    let (w_end, _) = at(sol, s_max)?;
    let (w_mid, _) = at(sol, s_max / 10.0)?;
    let p_end = s_max.powf(l1) * w_end;
    let p_mid = (s_max / 10.0).powf(l1) * w_mid;
    if w_end.abs() < 0.1 * w_star && (p_end - p_mid).abs() <= 0.1 * p_end.abs() {
        // Decaying like s^{-λ₁}: the constant mode is absent.
        let lt = LimitEstimate { value: 0.0, uncertainty: w_end.abs().max(floor), converged: true, window: (s_max / 10.0, s_max) };
        let lt1 = richardson(sol, s_max, 1.0, |s, w, _| s.powf(l1) * w)?;
        return Ok((slow_or_fast(&lt, &lt1), lt, Some(lt1)));
    }
    // Damped oscillation about ±β^{1/α}: centre and half-width over the last decade.
    let t = &sol.traj;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (s, w) in t.grid.iter().zip(&t.values) {
        if *s >= s_max / 10.0 && *s <= s_max {
            lo = lo.min(*w);
            hi = hi.max(*w);
        }
    }
    let lt = LimitEstimate {
        value: 0.5 * (lo + hi),
        uncertainty: 0.5 * (hi - lo) + floor,
        converged: 0.5 * (hi - lo) <= 1e-3 * w_star,
        window: (s_max / 10.0, s_max),
    };
    let mode = if lt.value.abs() > lt.uncertainty { Mode::Slow } else { Mode::Undetermined };
    Ok((mode, lt, None))
}

/// Local estimate of `L̃` from the slow law. With `v = |w|^{−α}` and
/// `t = ln s`, slow solutions satisfy `v_t = A + (α+1)A²/v + O(v^{−2})` with
/// `A = L̃^{−α}`; solving the truncated relation at one point gives `L̃`, the
/// leading-order reading `A = v_t` serves as the error gauge.
fn slow_law_point(sol: &InvertedSolution, s: f64) -> Result<Option<(f64, f64)>> {
    let al = sol.params.alpha;
    let (w, wp) = at(sol, s)?;
    let v = abs_pow(w, al).recip();
    let vt = -al * s * wp / w * v;
    if !(vt > 0.0) || !v.is_finite() {
        return Ok(None);
    }
    let k = al + 1.0;
    let a1 = v * (-1.0 + (1.0 + 4.0 * k * vt / v).sqrt()) / (2.0 * k);
    Ok(Some((w.signum() * a1.powf(-1.0 / al), w.signum() * vt.powf(-1.0 / al))))
}

fn classify_beta_zero(sol: &InvertedSolution, c: &DerivedConstants, s_max: f64, floor: f64) -> Result<Verdict> {
    let al = sol.params.alpha;
    let (w, wp) = at(sol, s_max)?;
    let h2 = s_max * wp / w;
    let h1 = h2 + 1.0 / al;
    if h1.abs() < h2.abs() {
        let lt = LimitEstimate {
            value: 0.0,
            uncertainty: (w * s_max.ln().powf(1.0 / al)).abs().max(floor),
            converged: true,
            window: (s_max / 4.0, s_max),
        };
        let lt1 = richardson(sol, s_max, 0.5, |s, w, _| s.powf(c.lambda1) * w)?;
        return Ok((slow_or_fast(&lt, &lt1), lt, Some(lt1)));
    }
    let raw = w * s_max.ln().powf(1.0 / al);
    let s_prev = s_max / std::f64::consts::E;
    let window = (s_prev, s_max);
    match (slow_law_point(sol, s_max)?, slow_law_point(sol, s_prev)?) {
        (Some((l, l0)), Some((lp, _))) if l.signum() == lp.signum() => {
            let lt = LimitEstimate {
                value: l,
                uncertainty: (l - l0).abs() + (l - lp).abs() + floor,
                converged: (l - lp).abs() <= 1e-3 * l.abs(),
                window,
            };
            let mode = if lt.value.abs() > 2.0 * lt.uncertainty { Mode::Slow } else { Mode::Undetermined };
            Ok((mode, lt, None))
        }
        // Still oscillating or relaxing: only the raw scaled value is known.
        _ => Ok((
            Mode::Undetermined,
            LimitEstimate { value: raw, uncertainty: raw.abs().max(floor), converged: false, window },
            None,
        )),
    }
}

/// Second estimate of `L̃` for β < 0 by variation of parameters, independent
/// of any plateau fit.
pub fn ltilde_quadrature(sol: &InvertedSolution) -> Result<LimitEstimate> {
    let p = sol.params;
    let c = p.constants();
    if c.regime != Regime::BetaNeg {
        return Err(Error::RegimeMismatch(format!("quadrature limit needs beta < 0, got regime {}", c.regime)));
    }
    let s_max = sol.s_end;
    let (l1, l2, al) = (c.lambda1, c.lambda2, p.alpha);
    let e2 = l2 * al;
    // Variation of parameters:
    // L̃ = (λ₁w(1) + w'(1))/(λ₁−λ₂) + 1/(2N−4) ∫₁^∞ τ^{λ₂−1}(w' − |w|^α w) dτ.
    let (w1, wp1) = at(sol, 1.0)?;
    let base = (l1 * w1 + wp1) / (l1 - l2);
    let k = 1.0 / (2.0 * p.nf() - 4.0);
    let body = integrate_along(sol, 1.0, s_max, |s, w, wp| s.powf(l2 - 1.0) * (wp - abs_pow(w, al) * w));
    // Tail past s_max with w ≈ L̃ s^{−λ₂}, iterated to self-consistency.
    let mut q = base + k * body;
    let mut tail = 0.0;
    for _ in 0..50 {
        tail = -l2 * q / s_max - abs_pow(q, al) * q * s_max.powf(-e2) / e2;
        let next = base + k * (body + tail);
        if (next - q).abs() <= 1e-15 * next.abs() {
            q = next;
            break;
        }
        q = next;
    }
    Ok(LimitEstimate {
        value: q,
        uncertainty: (0.1 * k * tail).abs() + 1e-12 * q.abs(),
        converged: true,
        window: (1.0, s_max),
    })
}

fn classify_beta_neg(
    sol: &InvertedSolution,
    c: &DerivedConstants,
    s_max: f64,
    floor: f64,
) -> Result<(Mode, LimitEstimate, Option<LimitEstimate>, LimitEstimate, f64)> {
    let p = sol.params;
    let (l1, l2, al) = (c.lambda1, c.lambda2, p.alpha);
    let (e1, e2) = (l1 - l2, l2 * al);
    let mut lt = plateau_fit(sol, s_max, &correction_basis(e1, e2), |s, w, _| s.powf(l2) * w)?;
    lt.uncertainty = lt.uncertainty.max(floor);

    let quad = ltilde_quadrature(sol)?;
    let agree = (quad.value - lt.value).abs() <= 1e-4f64.max(2.0 * (lt.uncertainty + quad.uncertainty));
    if !agree {
        return Err(Error::Undetermined(format!(
            "plateau {} ± {} and quadrature {} ± {} disagree",
            lt.value, lt.uncertainty, quad.value, quad.uncertainty
        )));
    }
    let growth = sol
        .traj
        .grid
        .iter()
        .zip(sol.traj.values.iter().zip(&sol.traj.derivs))
        .filter(|(s, _)| **s >= std::f64::consts::E && **s <= s_max)
        .map(|(s, (w, wp))| s.powf(l2) * (w.abs() + s * wp.abs()) / s.ln())
        .fold(0.0, f64::max);
    if lt.value.abs() > lt.uncertainty {
        return Ok((Mode::Slow, lt, None, quad, growth));
    }
    let mut lt1 = plateau_fit(sol, s_max, &correction_basis(l1 * al, 1.0), |s, w, _| s.powf(l1) * w)?;
    lt1.uncertainty = lt1.uncertainty.max(1e-12);
    Ok((slow_or_fast(&lt, &lt1), lt, Some(lt1), quad, growth))
}

fn classify_dim_two(
    sol: &InvertedSolution,
    c: &DerivedConstants,
    s_max: f64,
    floor: f64,
) -> Result<(Mode, LimitEstimate, Option<LimitEstimate>, f64, f64)> {
    let al = sol.params.alpha;
    let lam = c.lambda1;
    // With v = s^λ w and x = ln s: v_xx = s^λ Φ/4, Φ = w' − |w|^α w, so
    // c₂(s) = s^λ(λw + s w') → λw(1) + w'(1) + ¼∫₁^∞ τ^{λ−1}Φ,
    // c₁(s) = s^λ w − c₂(s) ln s → w(1) − ¼∫₁^∞ τ^{λ−1} ln τ Φ.
    let (w1, wp1) = at(sol, 1.0)?;
    let phi = |s: f64, w: f64, wp: f64| s.powf(lam - 1.0) * (wp - abs_pow(w, al) * w);
    let i0 = integrate_along(sol, 1.0, s_max, phi);
    let i1 = integrate_along(sol, 1.0, s_max, |s, w, wp| phi(s, w, wp) * s.ln());
    let c2_pt = |s: f64| -> Result<f64> {
        let (w, wp) = at(sol, s)?;
        Ok(s.powf(lam) * (lam * w + s * wp))
    };
    let c1_pt = |s: f64| -> Result<f64> {
        let (w, _) = at(sol, s)?;
        Ok(s.powf(lam) * w - c2_pt(s)? * s.ln())
    };
    // Tail with w ≈ s^{−λ}(c₂ ln s + c₁): the w' part ~ s^{-2} ln s and the
    // cubic-type part ~ s^{-2}(ln s)^{α+1}.
    let mut c2 = lam * w1 + wp1 + 0.25 * i0;
    let mut c1 = w1 - 0.25 * i1;
    let (mut t0, mut t1) = (0.0, 0.0);
    for _ in 0..30 {
        let wf = |s: f64| s.powf(-lam) * (c2 * s.ln() + c1);
        let wpf = |s: f64| s.powf(-lam - 1.0) * (c2 - lam * (c2 * s.ln() + c1));
        let tail = |m: bool| {
            let mut acc = 0.0;
            let mut a = s_max;
            for _ in 0..40 {
                let b = 2.0 * a;
                let q = crate::quad::integrate(
                    |s| {
                        let v = phi(s, wf(s), wpf(s));
                        if m { v * s.ln() } else { v }
                    },
                    a,
                    b,
                    1e-16,
                    1e-10,
                );
                acc += q.value;
                a = b;
            }
            acc
        };
        t0 = tail(false);
        t1 = tail(true);
        let n2 = lam * w1 + wp1 + 0.25 * (i0 + t0);
        let n1 = w1 - 0.25 * (i1 + t1);
        let done = (n2 - c2).abs() <= 1e-14 * n2.abs().max(1e-300) && (n1 - c1).abs() <= 1e-14 * n1.abs().max(1e-300);
        c2 = n2;
        c1 = n1;
        if done {
            break;
        }
    }
    let mut drift: f64 = 0.0;
    let mut s = 100.0;
    while s <= s_max * (1.0 + 1e-12) {
        drift = drift.max(s.sqrt() * (c2_pt(s)? - c2).abs()).max(s.sqrt() * (c1_pt(s)? - c1).abs());
        s *= 10.0;
    }
    let lt = LimitEstimate {
        value: c2,
        uncertainty: (0.25 * t0).abs() * 0.1 + floor,
        converged: true,
        window: (1.0, s_max),
    };
    let lt1 = LimitEstimate {
        value: c1,
        uncertainty: (0.25 * t1).abs() * 0.1 + 1e-12,
        converged: true,
        window: (1.0, s_max),
    };
    let growth = sol
        .traj
        .grid
        .iter()
        .zip(sol.traj.values.iter().zip(&sol.traj.derivs))
        .filter(|(s, _)| **s <= s_max)
        .map(|(s, (w, wp))| (1.0 + s).powf(lam) * (w.abs() + (1.0 + s) * wp.abs()) / (2.0 + s).ln())
        .fold(0.0, f64::max);
    let mode = slow_or_fast(&lt, &lt1);
    Ok((mode, lt, Some(lt1), growth, drift))
}

/// Solve with the regime's default range and classify, doubling the range up
/// to twice while the verdict is undetermined.
pub fn solve_and_classify(mu: f64, p: &ProblemParams, tol: f64) -> Result<(InvertedSolution, Classification)> {
    let mut opts = InvertOptions::for_params(p);
    opts.tol = tol;
    let mut last_err = None;
    for _ in 0..3 {
        let sol = solve_inverted(mu, p, &opts)?;
        match classify_asymptotics(&sol) {
            Ok(c) if c.mode != Mode::Undetermined => return Ok((sol, c)),
            Ok(c) => last_err = Some(Ok((sol, c))),
            Err(e) => last_err = Some(Err(e)),
        }
        opts.s_max *= 2.0;
    }
    last_err.expect("at least one attempt")
}
