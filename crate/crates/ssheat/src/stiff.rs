//! L-stable singly diagonally implicit Runge–Kutta method (order 4, embedded
//! order 3, γ = 1/4) for the stiff approach to the singular endpoint.

use crate::error::{Error, Result};
use crate::ode::State;

const G: f64 = 0.25;
const C: [f64; 5] = [0.25, 0.75, 11.0 / 20.0, 0.5, 1.0];
const A: [[f64; 5]; 5] = [
    [0.25, 0.0, 0.0, 0.0, 0.0],
    [0.5, 0.25, 0.0, 0.0, 0.0],
    [17.0 / 50.0, -1.0 / 25.0, 0.25, 0.0, 0.0],
    [371.0 / 1360.0, -137.0 / 2720.0, 15.0 / 544.0, 0.25, 0.0],
    [25.0 / 24.0, -49.0 / 48.0, 125.0 / 16.0, -85.0 / 12.0, 0.25],
];
const B: [f64; 5] = [25.0 / 24.0, -49.0 / 48.0, 125.0 / 16.0, -85.0 / 12.0, 0.25];
const BHAT: [f64; 5] = [59.0 / 48.0, -17.0 / 96.0, 225.0 / 32.0, -85.0 / 12.0, 0.0];

type Mat = [[f64; 2]; 2];

fn solve2(m: &Mat, r: &State) -> Option<State> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    Some([(r[0] * m[1][1] - m[0][1] * r[1]) / det, (m[0][0] * r[1] - m[1][0] * r[0]) / det])
}

#[derive(Debug, Clone, Copy)]
pub struct Sdirk4 {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StiffStats {
    pub steps: usize,
    pub rejected: usize,
    pub t_end: f64,
    pub y_end: State,
}

impl Sdirk4 {
    pub fn new(rtol: f64, atol: f64) -> Self {
        Sdirk4 { rtol, atol, max_steps: 2_000_000 }
    }

    fn jacobian<F: FnMut(f64, &State) -> State>(f: &mut F, t: f64, y: &State, fy: &State) -> Mat {
        let mut j = [[0.0; 2]; 2];
        for c in 0..2 {
            let d = 1e-7 * y[c].abs().max(1e-7);
            let mut yp = *y;
            yp[c] += d;
            let fp = f(t, &yp);
            for r in 0..2 {
                j[r][c] = (fp[r] - fy[r]) / d;
            }
        }
        j
    }

    /// Integrate from `t0` to `t_end` (either direction), calling `observe`
    /// with `(t, y)` after each accepted step.
    pub fn integrate<F, O>(&self, mut f: F, t0: f64, y0: State, t_end: f64, h0: f64, mut observe: O) -> Result<StiffStats>
    where
        F: FnMut(f64, &State) -> State,
        O: FnMut(f64, &State),
    {
        let dir = (t_end - t0).signum();
        let mut t = t0;
        let mut y = y0;
        let mut h = h0.abs().min((t_end - t0).abs());
        let mut st = StiffStats { t_end: t0, y_end: y0, ..Default::default() };
        let scale = |a: f64, b: f64| self.atol + self.rtol * a.abs().max(b.abs());
        while (t_end - t) * dir > 0.0 {
            if st.steps >= self.max_steps {
                return Err(Error::TooManySteps(self.max_steps));
            }
            let remaining = (t_end - t).abs();
            if h > remaining {
                h = remaining;
            }
            if h < 1e-15 * t.abs().max(1e-300) {
                return Err(Error::StepSizeUnderflow { at: t });
            }
            let hs = dir * h;
            let fy = f(t, &y);
            let jac = Self::jacobian(&mut f, t, &y, &fy);
            let m: Mat = [
                [1.0 - hs * G * jac[0][0], -hs * G * jac[0][1]],
                [-hs * G * jac[1][0], 1.0 - hs * G * jac[1][1]],
            ];
            let mut k = [[0.0; 2]; 5];
            let mut ok = true;
            'stages: for i in 0..5 {
                let mut base = y;
                for j in 0..i {
                    base[0] += hs * A[i][j] * k[j][0];
                    base[1] += hs * A[i][j] * k[j][1];
                }
                let ti = t + C[i] * hs;
                // Start from the previous stage slope.
                let mut z = if i == 0 { [base[0] + hs * G * fy[0], base[1] + hs * G * fy[1]] } else {
                    [base[0] + hs * G * k[i - 1][0], base[1] + hs * G * k[i - 1][1]]
                };
                let mut conv = false;
                for _ in 0..12 {
                    let fz = f(ti, &z);
                    let res = [z[0] - base[0] - hs * G * fz[0], z[1] - base[1] - hs * G * fz[1]];
                    let d = match solve2(&m, &[-res[0], -res[1]]) {
                        Some(d) => d,
                        None => break,
                    };
                    z[0] += d[0];
                    z[1] += d[1];
                    let nrm = ((d[0] / scale(z[0], base[0])).powi(2) + (d[1] / scale(z[1], base[1])).powi(2)).sqrt();
                    if !nrm.is_finite() {
                        break;
                    }
                    if nrm < 1e-3 {
                        conv = true;
                        break;
                    }
                }
                if !conv {
                    ok = false;
                    break 'stages;
                }
                // Recover the stage slope from the stage equation rather than a
                // fresh evaluation; this keeps stiff components consistent.
                k[i] = [(z[0] - base[0]) / (hs * G), (z[1] - base[1]) / (hs * G)];
            }
            if !ok {
                st.rejected += 1;
                h *= 0.25;
                continue;
            }
            let mut y1 = y;
            let mut e = [0.0; 2];
            for i in 0..5 {
                y1[0] += hs * B[i] * k[i][0];
                y1[1] += hs * B[i] * k[i][1];
                e[0] += hs * (B[i] - BHAT[i]) * k[i][0];
                e[1] += hs * (B[i] - BHAT[i]) * k[i][1];
            }
            // Filter the estimate through (I − hγJ)^{-1} so stiff components do
            // not inflate it.
            let e = solve2(&m, &e).unwrap_or(e);
            let err = (((e[0] / scale(y[0], y1[0])).powi(2) + (e[1] / scale(y[1], y1[1])).powi(2)) / 2.0).sqrt();
            if err.is_finite() && err <= 1.0 {
                t = if h == remaining { t_end } else { t + hs };
                y = y1;
                st.steps += 1;
                observe(t, &y);
                let fac = (0.9 * err.max(1e-10).powf(-0.25)).clamp(0.2, 5.0);
                h *= fac;
            } else {
                st.rejected += 1;
                let fac = if err.is_finite() { (0.9 * err.powf(-0.25)).clamp(0.1, 0.9) } else { 0.1 };
                h *= fac;
            }
        }
        st.t_end = t;
        st.y_end = y;
        Ok(st)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_conditions() {
        let s = |v: [f64; 5]| v.iter().sum::<f64>();
        let mut bc = [0.0; 5];
        let mut bc2 = [0.0; 5];
        let mut bc3 = [0.0; 5];
        for i in 0..5 {
            bc[i] = B[i] * C[i];
            bc2[i] = B[i] * C[i] * C[i];
            bc3[i] = B[i] * C[i].powi(3);
            let row: f64 = A[i].iter().sum();
            assert!((row - C[i]).abs() < 1e-14, "row sum {i}");
        }
        assert!((s(B) - 1.0).abs() < 1e-14);
        assert!((s(bc) - 0.5).abs() < 1e-14);
        assert!((s(bc2) - 1.0 / 3.0).abs() < 1e-14);
        assert!((s(bc3) - 0.25).abs() < 1e-14);
        let mut bac = 0.0;
        let mut bac2 = 0.0;
        let mut bcac = 0.0;
        let mut baac = 0.0;
        for i in 0..5 {
            let mut ac = 0.0;
            let mut ac2 = 0.0;
            let mut aac = 0.0;
            for j in 0..5 {
                ac += A[i][j] * C[j];
                ac2 += A[i][j] * C[j] * C[j];
                let mut acj = 0.0;
                for l in 0..5 {
                    acj += A[j][l] * C[l];
                }
                aac += A[i][j] * acj;
            }
            bac += B[i] * ac;
            bac2 += B[i] * ac2;
            bcac += B[i] * C[i] * ac;
            baac += B[i] * aac;
        }
        assert!((bac - 1.0 / 6.0).abs() < 1e-13);
        assert!((bac2 - 1.0 / 12.0).abs() < 1e-13);
        assert!((bcac - 1.0 / 8.0).abs() < 1e-13);
        assert!((baac - 1.0 / 24.0).abs() < 1e-13);
        // Embedded method: order 3.
        let mut h1 = 0.0;
        let mut h2 = 0.0;
        let mut h3 = 0.0;
        let mut h4 = 0.0;
        for i in 0..5 {
            h1 += BHAT[i];
            h2 += BHAT[i] * C[i];
            h3 += BHAT[i] * C[i] * C[i];
            let ac: f64 = (0..5).map(|j| A[i][j] * C[j]).sum();
            h4 += BHAT[i] * ac;
        }
        assert!((h1 - 1.0).abs() < 1e-13);
        assert!((h2 - 0.5).abs() < 1e-13);
        assert!((h3 - 1.0 / 3.0).abs() < 1e-13);
        assert!((h4 - 1.0 / 6.0).abs() < 1e-13);
    }

    #[test]
    fn stiff_relaxation_to_slow_manifold() {
        // y' = -1e6 (y - cos t) - sin t has exact solution y = cos t.
        let f = |t: f64, y: &State| [-1e6 * (y[0] - t.cos()) - t.sin(), 0.0];
        let r = Sdirk4::new(1e-9, 1e-12).integrate(f, 0.0, [1.0, 0.0], 3.0, 1e-3, |_, _| {}).unwrap();
        assert!((r.y_end[0] - 3f64.cos()).abs() < 1e-8, "{}", r.y_end[0]);
        assert!(r.steps < 5000, "steps {}", r.steps);
    }

    #[test]
    fn oscillator_accuracy() {
        let f = |_t: f64, y: &State| [y[1], -y[0]];
        let r = Sdirk4::new(1e-10, 1e-12).integrate(f, 0.0, [1.0, 0.0], 5.0, 1e-2, |_, _| {}).unwrap();
        assert!((r.y_end[0] - 5f64.cos()).abs() < 1e-7);
    }
}
