//! Sampled solutions with a continuous extension, zero events and limit
//! estimates.

use serde::{Deserialize, Serialize};

use crate::constants::ProblemParams;
use crate::ode::Segment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variable {
    RadiusR,
    InvertedS,
}

/// A refined simple zero and the derivative there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroEvent {
    pub at: f64,
    pub slope: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverMeta {
    pub steps: usize,
    pub rejected: usize,
    /// Largest defect of the continuous extension over one step (increment
    /// minus the quadrature of the right-hand side), in units of the local
    /// error tolerance.
    pub max_residual: f64,
}

/// Limit of a scaled quantity, with the window it was read from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitEstimate {
    pub value: f64,
    pub uncertainty: f64,
    pub converged: bool,
    pub window: (f64, f64),
}

impl LimitEstimate {
    pub fn exact(value: f64) -> Self {
        LimitEstimate { value, uncertainty: 0.0, converged: true, window: (0.0, 0.0) }
    }
}

/// One piece of the continuous extension.
#[derive(Debug, Clone, Copy)]
pub enum Piece {
    /// Integrator step in the trajectory's own variable, state `(y, y')`.
    Direct(Segment),
    /// Integrator step in `t = ln x`, state `(y, x·y')`.
    Log(Segment),
    /// Cubic Hermite interpolant between two nodes.
    Hermite { x0: f64, x1: f64, y0: f64, d0: f64, y1: f64, d1: f64 },
}

impl Piece {
    pub fn lo(&self) -> f64 {
        match self {
            Piece::Direct(s) => s.t0.min(s.t1),
            Piece::Log(s) => s.t0.min(s.t1).exp(),
            Piece::Hermite { x0, .. } => *x0,
        }
    }

    pub fn hi(&self) -> f64 {
        match self {
            Piece::Direct(s) => s.t0.max(s.t1),
            Piece::Log(s) => s.t0.max(s.t1).exp(),
            Piece::Hermite { x1, .. } => *x1,
        }
    }

    /// `(y(x), y'(x))`.
    pub fn eval(&self, x: f64) -> (f64, f64) {
        match self {
            Piece::Direct(s) => {
                let v = s.eval(x);
                (v[0], v[1])
            }
            Piece::Log(s) => {
                let v = s.eval(x.ln());
                (v[0], v[1] / x)
            }
            Piece::Hermite { x0, x1, y0, d0, y1, d1 } => {
                let h = x1 - x0;
                let t = (x - x0) / h;
                let (t2, t3) = (t * t, t * t * t);
                let y = (2.0 * t3 - 3.0 * t2 + 1.0) * y0
                    + (t3 - 2.0 * t2 + t) * h * d0
                    + (-2.0 * t3 + 3.0 * t2) * y1
                    + (t3 - t2) * h * d1;
                let dy = (6.0 * t2 - 6.0 * t) / h * y0
                    + (3.0 * t2 - 4.0 * t + 1.0) * d0
                    + (-6.0 * t2 + 6.0 * t) / h * y1
                    + (3.0 * t2 - 2.0 * t) * d1;
                (y, dy)
            }
        }
    }
}

/// A solution sampled on an increasing grid, with a continuous extension
/// covering (at least) the stored part of the grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub variable: Variable,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub derivs: Vec<f64>,
    pub zeros: Vec<ZeroEvent>,
    pub params: ProblemParams,
    pub meta: SolverMeta,
    pieces: Vec<Piece>,
}

impl Trajectory {
    pub fn new(variable: Variable, params: ProblemParams) -> Self {
        Trajectory {
            variable,
            grid: Vec::new(),
            values: Vec::new(),
            derivs: Vec::new(),
            zeros: Vec::new(),
            params,
            meta: SolverMeta::default(),
            pieces: Vec::new(),
        }
    }

    /// The identically zero solution sampled on `[lo, hi]`.
    pub fn zero(variable: Variable, params: ProblemParams, lo: f64, hi: f64) -> Self {
        let mut t = Trajectory::new(variable, params);
        let n = 64;
        for i in 0..=n {
            t.push(lo + (hi - lo) * i as f64 / n as f64, 0.0, 0.0);
        }
        t.hermite_fill();
        t
    }

    /// Build from samples; the continuous extension is piecewise Hermite.
    pub fn from_samples(
        variable: Variable,
        params: ProblemParams,
        grid: Vec<f64>,
        values: Vec<f64>,
        derivs: Vec<f64>,
    ) -> Self {
        let mut t = Trajectory::new(variable, params);
        t.grid = grid;
        t.values = values;
        t.derivs = derivs;
        t.hermite_fill();
        t.zeros = t.scan_zeros();
        t
    }

    pub fn push(&mut self, x: f64, y: f64, dy: f64) {
        self.grid.push(x);
        self.values.push(y);
        self.derivs.push(dy);
    }

    pub fn push_piece(&mut self, p: Piece) {
        self.pieces.push(p);
    }

    /// Replace the continuous extension by Hermite pieces on the grid.
    pub fn hermite_fill(&mut self) {
        self.pieces.clear();
        for i in 1..self.grid.len() {
            self.pieces.push(Piece::Hermite {
                x0: self.grid[i - 1],
                x1: self.grid[i],
                y0: self.values[i - 1],
                d0: self.derivs[i - 1],
                y1: self.values[i],
                d1: self.derivs[i],
            });
        }
    }

    /// Sort the continuous extension by position (pieces may have been
    /// produced by integrations running in opposite directions).
    pub fn finish(&mut self) {
        self.pieces.sort_by(|a, b| a.lo().total_cmp(&b.lo()));
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn x_min(&self) -> f64 {
        self.grid.first().copied().unwrap_or(0.0)
    }

    pub fn x_max(&self) -> f64 {
        self.grid.last().copied().unwrap_or(0.0)
    }

    pub fn is_trivial(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    /// Continuous extension at `x`, or `None` outside the covered range.
    pub fn eval(&self, x: f64) -> Option<(f64, f64)> {
        let i = self.pieces.partition_point(|p| p.hi() < x);
        let p = self.pieces.get(i)?;
        if x < p.lo() || x > p.hi() {
            return None;
        }
        Some(p.eval(x))
    }

    /// Sign changes of the stored samples, refined by bisection on the
    /// continuous extension.
    pub fn scan_zeros(&self) -> Vec<ZeroEvent> {
        let mut out = Vec::new();
        let mut prev: Option<usize> = None;
        for i in 0..self.grid.len() {
            if self.values[i] == 0.0 {
                continue;
            }
            let j = match prev.replace(i) {
                Some(j) => j,
                None => continue,
            };
            let a = self.values[j];
            if (a > 0.0) == (self.values[i] > 0.0) {
                continue;
            }
            let (mut lo, mut hi) = (self.grid[j], self.grid[i]);
            let mut flo = a;
            for _ in 0..100 {
                if hi - lo <= 1e-13 * hi.abs().max(1e-300) {
                    break;
                }
                let m = 0.5 * (lo + hi);
                let fm = self.eval(m).map(|v| v.0).unwrap_or(0.0);
                if fm == 0.0 {
                    lo = m;
                    hi = m;
                    break;
                }
                if (fm > 0.0) == (flo > 0.0) {
                    lo = m;
                    flo = fm;
                } else {
                    hi = m;
                }
            }
            let at = 0.5 * (lo + hi);
            let slope = self.eval(at).map(|v| v.1).unwrap_or(self.derivs[i]);
            out.push(ZeroEvent { at, slope });
        }
        out
    }
}

/// Value at 0 of the polynomial interpolating `(xs, ys)` (Neville).
pub fn extrapolate_to_zero(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len();
    let mut p = ys.to_vec();
    for k in 1..n {
        for i in 0..n - k {
            p[i] = (xs[i + k] * p[i] - xs[i] * p[i + 1]) / (xs[i + k] - xs[i]);
        }
    }
    p[0]
}
