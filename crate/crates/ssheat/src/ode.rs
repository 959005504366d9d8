//! Dormand–Prince 5(4) integrator for planar systems, with continuous
//! (dense) output and a per-step observer hook.
//!
//! All ODEs in this crate are scalar second-order equations, so the state is a
//! fixed `[f64; 2]`. Integration may run forward or backward in the independent
//! variable.

use crate::error::{Error, Result};

pub type State = [f64; 2];

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

#[inline]
fn axpy(y: &State, h: f64, terms: &[(f64, &State)]) -> State {
    let mut out = *y;
    for (c, k) in terms {
        out[0] += h * c * k[0];
        out[1] += h * c * k[1];
    }
    out
}

/// One accepted step together with its continuous extension.
#[derive(Debug, Clone, Copy)]
pub struct Segment {
    pub t0: f64,
    pub t1: f64,
    pub y0: State,
    pub y1: State,
    pub dy0: State,
    pub dy1: State,
    rcont: [State; 5],
}

impl Segment {
    /// Dense-output value at `t` (fourth-order accurate within the step).
    pub fn eval(&self, t: f64) -> State {
        let h = self.t1 - self.t0;
        let th = (t - self.t0) / h;
        let th1 = 1.0 - th;
        let r = &self.rcont;
        let mut out = [0.0; 2];
        for i in 0..2 {
            out[i] = r[0][i] + th * (r[1][i] + th1 * (r[2][i] + th * (r[3][i] + th1 * r[4][i])));
        }
        out
    }

    /// Time derivative of the dense interpolant at `t`.
    pub fn eval_deriv(&self, t: f64) -> State {
        let h = self.t1 - self.t0;
        let th = (t - self.t0) / h;
        let th1 = 1.0 - th;
        let r = &self.rcont;
        let mut out = [0.0; 2];
        for i in 0..2 {
            let q = r[3][i] + th1 * r[4][i];
            let rr = r[2][i] + th * q;
            let p = r[1][i] + th1 * rr;
            let dp = -rr + th1 * (q - th * r[4][i]);
            out[i] = (p + th * dp) / h;
        }
        out
    }

    /// Defect of the continuous extension over the step,
    /// `(y₁ − y₀) − ∫ f(t, y(t)) dt` by 3-point Gauss, in units of the local
    /// error tolerance `atol + rtol·size` per component.
    pub fn defect<F: Fn(f64, &State) -> State>(&self, f: F, atol: f64, rtol: f64) -> f64 {
        const X: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
        const W: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
        let (c, h) = (0.5 * (self.t0 + self.t1), 0.5 * (self.t1 - self.t0));
        let mut int = [0.0; 2];
        for k in 0..3 {
            let t = c + h * X[k];
            let d = f(t, &self.eval(t));
            int[0] += W[k] * h * d[0];
            int[1] += W[k] * h * d[1];
        }
        (0..2)
            .map(|i| {
                let size = self.y0[i].abs().max(self.y1[i].abs()).max((self.y1[i] - self.y0[i]).abs());
                (self.y1[i] - self.y0[i] - int[i]).abs() / (atol + rtol * size)
            })
            .fold(0.0, f64::max)
    }

    pub fn contains(&self, t: f64) -> bool {
        let (lo, hi) = if self.t0 <= self.t1 { (self.t0, self.t1) } else { (self.t1, self.t0) };
        t >= lo && t <= hi
    }

    /// Locate a root of component `comp` inside the step by bisection on the
    /// dense output. Requires a sign change between the endpoints.
    pub fn root(&self, comp: usize, tol: f64) -> f64 {
        let (mut a, mut b) = (self.t0, self.t1);
        let mut fa = self.y0[comp];
        if fa == 0.0 {
            return a;
        }
        if self.y1[comp] == 0.0 {
            return b;
        }
        for _ in 0..200 {
            if (b - a).abs() <= tol {
                break;
            }
            let m = 0.5 * (a + b);
            let fm = self.eval(m)[comp];
            if fm == 0.0 {
                return m;
            }
            if (fm > 0.0) == (fa > 0.0) {
                a = m;
                fa = fm;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Stats {
    pub steps: usize,
    pub rejected: usize,
    pub evals: usize,
    /// Where integration ended (differs from the requested end if stopped).
    pub t_end: f64,
    pub y_end: State,
}

#[derive(Debug, Clone, Copy)]
pub struct Dopri5 {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: Option<f64>,
    pub h_max: f64,
    pub max_steps: usize,
    /// End steps exactly where this component changes sign, so no step
    /// straddles the point where a nonlinearity like `|y|^α y` loses
    /// smoothness.
    pub split_at_zero: Option<usize>,
}

impl Default for Dopri5 {
    fn default() -> Self {
        Dopri5 {
            rtol: 1e-10,
            atol: 1e-12,
            h_init: None,
            h_max: f64::INFINITY,
            max_steps: 5_000_000,
            split_at_zero: None,
        }
    }
}

impl Dopri5 {
    pub fn new(rtol: f64, atol: f64) -> Self {
        Dopri5 { rtol, atol, ..Default::default() }
    }

    pub fn with_h_max(mut self, h_max: f64) -> Self {
        self.h_max = h_max;
        self
    }

    pub fn with_max_steps(mut self, n: usize) -> Self {
        self.max_steps = n;
        self
    }

    pub fn with_split_at_zero(mut self, comp: usize) -> Self {
        self.split_at_zero = Some(comp);
        self
    }

    fn err_norm(&self, y0: &State, y1: &State, e: &State) -> f64 {
        let mut s = 0.0;
        for i in 0..2 {
            let sc = self.atol + self.rtol * y0[i].abs().max(y1[i].abs());
            s += (e[i] / sc).powi(2);
        }
        (s / 2.0).sqrt()
    }

    fn initial_step<F>(&self, f: &mut F, t0: f64, y0: &State, f0: &State, dir: f64) -> f64
    where
        F: FnMut(f64, &State) -> State,
    {
        let sc = |i: usize| self.atol + self.rtol * y0[i].abs();
        let d0 = ((y0[0] / sc(0)).powi(2) + (y0[1] / sc(1)).powi(2)).sqrt() / 2f64.sqrt();
        let d1 = ((f0[0] / sc(0)).powi(2) + (f0[1] / sc(1)).powi(2)).sqrt() / 2f64.sqrt();
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(self.h_max);
        let y1 = axpy(y0, dir * h0, &[(1.0, f0)]);
        let f1 = f(t0 + dir * h0, &y1);
        let d2 = (((f1[0] - f0[0]) / sc(0)).powi(2) + ((f1[1] - f0[1]) / sc(1)).powi(2)).sqrt()
            / 2f64.sqrt()
            / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        (100.0 * h0).min(h1).min(self.h_max)
    }

    /// Integrate from `(t0, y0)` towards `t_end`, calling `observe` after every
    /// accepted step. The observer may stop the integration early.
    pub fn integrate<F, O>(&self, mut f: F, t0: f64, y0: State, t_end: f64, mut observe: O) -> Result<Stats>
    where
        F: FnMut(f64, &State) -> State,
        O: FnMut(&Segment) -> Flow,
    {
        let mut stats = Stats { t_end: t0, y_end: y0, ..Default::default() };
        if t_end == t0 {
            return Ok(stats);
        }
        let dir = (t_end - t0).signum();
        let mut t = t0;
        let mut y = y0;
        let mut k1 = f(t, &y);
        stats.evals += 1;
        let mut h = match self.h_init {
            Some(h) => h.min(self.h_max),
            None => {
                stats.evals += 1;
                self.initial_step(&mut f, t0, &y0, &k1, dir)
            }
        };
        let span = (t_end - t0).abs();
        let h_floor = 1e-14 * t0.abs().max(t_end.abs()).max(1e-300);
        let mut last_rejected = false;
        let mut splitting = false;
        let mut h_natural = 0.0;
        loop {
            if stats.steps >= self.max_steps {
                return Err(Error::TooManySteps(self.max_steps));
            }
            let remaining = (t_end - t).abs();
            let mut last = false;
            if h >= remaining {
                h = remaining;
                last = true;
            }
            if h < h_floor && !last {
                return Err(Error::StepSizeUnderflow { at: t });
            }
            let hs = dir * h;
            let k2 = f(t + C2 * hs, &axpy(&y, hs, &[(A21, &k1)]));
            let k3 = f(t + C3 * hs, &axpy(&y, hs, &[(A31, &k1), (A32, &k2)]));
            let k4 = f(t + C4 * hs, &axpy(&y, hs, &[(A41, &k1), (A42, &k2), (A43, &k3)]));
            let k5 = f(t + C5 * hs, &axpy(&y, hs, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]));
            let k6 = f(
                t + hs,
                &axpy(&y, hs, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]),
            );
            let y1 = axpy(&y, hs, &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)]);
            let t1 = if last { t_end } else { t + hs };
            let k7 = f(t1, &y1);
            stats.evals += 6;
            let mut e = [0.0; 2];
            for i in 0..2 {
                e[i] = hs * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            }
            let err = self.err_norm(&y, &y1, &e);
            if !err.is_finite() {
                stats.rejected += 1;
                h *= 0.2;
                last_rejected = true;
                continue;
            }
            if err <= 1.0 {
                let mut rcont = [[0.0; 2]; 5];
                for i in 0..2 {
                    let ydiff = y1[i] - y[i];
                    let bspl = hs * k1[i] - ydiff;
                    rcont[0][i] = y[i];
                    rcont[1][i] = ydiff;
                    rcont[2][i] = bspl;
                    rcont[3][i] = ydiff - hs * k7[i] - bspl;
                    rcont[4][i] = hs
                        * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
                }
                let seg = Segment { t0: t, t1, y0: y, y1, dy0: k1, dy1: k7, rcont };
                if let Some(c) = self.split_at_zero {
                    if !splitting && y[c] != 0.0 && y1[c] != 0.0 && (y[c] > 0.0) != (y1[c] > 0.0) {
                        let tz = seg.root(c, 1e-15 * t.abs().max(h));
                        let hz = (tz - t).abs();
                        if hz > 1e-3 * h && hz < (1.0 - 1e-3) * h {
                            h_natural = h;
                            h = hz;
                            splitting = true;
                            continue;
                        }
                    }
                }
                let split_end = splitting;
                splitting = false;
                stats.steps += 1;
                t = t1;
                y = y1;
                k1 = k7;
                stats.t_end = t;
                stats.y_end = y;
                if observe(&seg) == Flow::Stop || last {
                    return Ok(stats);
                }
                let mut fac = 0.9 * err.max(1e-10).powf(-0.2);
                fac = fac.clamp(0.2, 10.0);
                if last_rejected {
                    fac = fac.min(1.0);
                }
                h = if split_end {
                    // The shortened step says little about the natural size.
                    h_natural
                } else {
                    (h * fac).min(self.h_max).min(span)
                };
                last_rejected = false;
            } else {
                stats.rejected += 1;
                let fac = (0.9 * err.powf(-0.2)).max(0.2);
                h *= fac;
                last_rejected = true;
                splitting = false;
            }
        }
    }
}

/// Classical fixed-step fourth-order Runge–Kutta; used as an independent
/// cross-check of the adaptive integrator.
pub fn rk4_fixed<F>(mut f: F, t0: f64, y0: State, t_end: f64, h: f64) -> State
where
    F: FnMut(f64, &State) -> State,
{
    let n = ((t_end - t0) / h).abs().ceil().max(1.0) as usize;
    let h = (t_end - t0) / n as f64;
    let mut y = y0;
    let mut t = t0;
    for _ in 0..n {
        let k1 = f(t, &y);
        let k2 = f(t + 0.5 * h, &axpy(&y, h, &[(0.5, &k1)]));
        let k3 = f(t + 0.5 * h, &axpy(&y, h, &[(0.5, &k2)]));
        let k4 = f(t + h, &axpy(&y, h, &[(1.0, &k3)]));
        y = axpy(&y, h, &[(1.0 / 6.0, &k1), (1.0 / 3.0, &k2), (1.0 / 3.0, &k3), (1.0 / 6.0, &k4)]);
        t += h;
    }
    y
}
