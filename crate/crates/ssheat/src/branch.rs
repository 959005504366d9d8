//! Root finding over shooting parameters: the thresholds `a_m` and `μ_m`,
//! pairs of regular profiles with a prescribed limit, singular branches and
//! the one-dimensional even/odd branches.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::{ProblemParams, Regime};
use crate::error::{Error, Result};
use crate::inverted::{
    classify_asymptotics, invert_duality, ltilde_quadrature, origin_value, solve_inverted, Classification, InvertOptions,
    InvertedSolution, Mode,
};
use crate::pde::TailLaw;
use crate::profile::{shoot, shoot_odd, Shot};

/// Geometric bracket expansions before giving up.
const EXPANSIONS: usize = 60;
/// Points of the scan for the peak of `|L|` on one interval.
const SCAN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchKind {
    Am,
    MuM,
    APlus,
    AMinus,
    BPlus,
    BMinus,
    MuBarSingular,
    Dim1CPlus,
    Dim1CMinus,
    Dim1DPlus,
    Dim1DMinus,
}

/// Final bracket of a root; the predicate differs at the two ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    pub lo: f64,
    pub hi: f64,
    pub limit_lo: Option<f64>,
    pub limit_hi: Option<f64>,
    pub count_lo: usize,
    pub count_hi: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// Uncertainty of the limit estimate at the root.
    pub limit_uncertainty: f64,
    /// `|limit − target|`, or `|limit|` for thresholds.
    pub limit_error: f64,
    /// Change of the limit on a fresh integration at a tenth of the tolerance.
    pub revalidation: f64,
    /// Limit read off the inverted image (`w(0)`), when computed.
    pub duality: Option<f64>,
    /// Crossings of the target on the scan grid beyond the bracketed pair.
    pub extra_crossings: usize,
    pub bracket: Option<Bracket>,
}

/// A root in a shooting parameter. For one-dimensional branches
/// `zero_count` is the number of zeros on the whole line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchPoint {
    pub kind: BranchKind,
    pub m: usize,
    pub shoot: f64,
    pub limit: f64,
    pub zero_count: usize,
    pub target_mu: Option<f64>,
    pub residuals: Residuals,
}

/// Shooting family: regular profiles `f(0) = a, f'(0) = 0` or odd
/// one-dimensional profiles `g(0) = 0, g'(0) = b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Regular,
    Odd,
}

impl Family {
    pub fn shot(self, x: f64, p: &ProblemParams, tol: f64) -> Result<Shot> {
        match self {
            Family::Regular => shoot(x, p, tol),
            Family::Odd => shoot_odd(x, p, tol),
        }
    }
}

fn parity(k: usize) -> f64 {
    if k % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Past the `m`-th threshold: more than `m` zeros, or `m` zeros and a limit
/// of the sign that announces the next one.
fn beyond(count: usize, limit: f64, m: usize) -> bool {
    count > m || (count == m && limit * parity(m) < 0.0)
}

fn shot_beyond(s: &Shot, m: usize) -> bool {
    beyond(s.zeros, s.limit.value, m)
}

fn bracket_of(lo: &Shot, hi: &Shot) -> Bracket {
    Bracket {
        lo: lo.shoot,
        hi: hi.shoot,
        limit_lo: Some(lo.limit.value),
        limit_hi: Some(hi.limit.value),
        count_lo: lo.zeros,
        count_hi: hi.zeros,
    }
}

/// `x_m = inf{x > 0 : N(x) ≥ m+1}` with the shot just below it, or `None`
/// when the count exceeds `m` for arbitrarily small `x`.
fn threshold(
    fam: Family,
    m: usize,
    p: &ProblemParams,
    hint: Option<(f64, f64)>,
    tol: f64,
) -> Result<Option<(Shot, Bracket)>> {
    let stol = 0.1 * tol;
    let (lo0, hi0) = hint.unwrap_or((0.5, 1.0));
    if !(lo0 > 0.0 && hi0 > lo0) {
        return Err(Error::InvalidParams(format!("bracket hint must satisfy 0 < lo < hi, got ({lo0}, {hi0})")));
    }
    let mut lo = fam.shot(lo0, p, stol)?;
    let mut hi: Option<Shot> = None;
    let mut n = 0;
    while shot_beyond(&lo, m) {
        if n == EXPANSIONS {
            return Ok(None);
        }
        let x = 0.5 * lo.shoot;
        hi = Some(std::mem::replace(&mut lo, fam.shot(x, p, stol)?));
        n += 1;
    }
    let mut hi = match hi {
        Some(h) => h,
        None => fam.shot(hi0, p, stol)?,
    };
    n = 0;
    while !shot_beyond(&hi, m) {
        if n == EXPANSIONS {
            return Err(Error::BracketNotFound(format!(
                "count stays at most {m} up to {:.3e} after {EXPANSIONS} doublings",
                hi.shoot
            )));
        }
        let x = 2.0 * hi.shoot;
        let next = fam
            .shot(x, p, stol)
            .map_err(|e| Error::BracketNotFound(format!("shot at {x:.3e} failed while expanding: {e}")))?;
        lo = std::mem::replace(&mut hi, next);
        n += 1;
    }
    for _ in 0..200 {
        let width = hi.shoot - lo.shoot;
        if width <= 1e-14 * hi.shoot || width <= 1e-3 * tol * hi.shoot.max(1.0) {
            break;
        }
        let mid = fam.shot(0.5 * (lo.shoot + hi.shoot), p, stol)?;
        if shot_beyond(&mid, m) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let br = bracket_of(&lo, &hi);
    Ok(Some((lo, br)))
}

/// Fresh integration at a tenth of the tolerance; fails if the zero count
/// moves.
fn revalidate(fam: Family, bp: &mut BranchPoint, p: &ProblemParams, tol: f64) -> Result<Shot> {
    let fresh = fam.shot(bp.shoot, p, 0.01 * tol)?;
    bp.residuals.revalidation = (fresh.limit.value - bp.limit).abs();
    let count = if bp.kind_is_dim1() { line_count(bp.kind, fresh.zeros) } else { fresh.zeros };
    if count != bp.zero_count {
        return Err(Error::RootFindDiverged(format!(
            "re-integration at {} gives {count} zeros instead of {}",
            bp.shoot, bp.zero_count
        )));
    }
    Ok(fresh)
}

impl BranchPoint {
    fn kind_is_dim1(&self) -> bool {
        matches!(self.kind, BranchKind::Dim1CPlus | BranchKind::Dim1CMinus | BranchKind::Dim1DPlus | BranchKind::Dim1DMinus)
    }
}

/// Zeros on the whole line of the even or odd extension of a profile with
/// `half` zeros on `(0, ∞)`.
fn line_count(kind: BranchKind, half: usize) -> usize {
    match kind {
        BranchKind::Dim1DPlus | BranchKind::Dim1DMinus => 2 * half + 1,
        _ => 2 * half,
    }
}

/// `a_m`: the regular profile with `m` zeros and vanishing limit.
pub fn find_am(m: usize, p: &ProblemParams, hint: Option<(f64, f64)>, tol: f64) -> Result<BranchPoint> {
    p.require_subcritical()?;
    let (sh, br) = threshold(Family::Regular, m, p, hint, tol)?.ok_or_else(|| {
        Error::BracketNotFound(format!("a_{m} = 0: the count exceeds {m} for arbitrarily small a"))
    })?;
    let mut bp = BranchPoint {
        kind: BranchKind::Am,
        m,
        shoot: sh.shoot,
        limit: sh.limit.value,
        zero_count: sh.zeros,
        target_mu: None,
        residuals: Residuals {
            limit_uncertainty: sh.limit.uncertainty,
            limit_error: sh.limit.value.abs(),
            bracket: Some(br),
            ..Residuals::default()
        },
    };
    revalidate(Family::Regular, &mut bp, p, tol)?;
    if bp.zero_count != m || bp.limit.abs() > tol {
        return Err(Error::RootFindDiverged(format!(
            "a_{m} = {}: N = {}, L = {:e}",
            bp.shoot, bp.zero_count, bp.limit
        )));
    }
    Ok(bp)
}

/// Thresholds `x_0 < x_1 < …` of one family, computed in order with each
/// bracket seeded from the previous threshold.
pub struct Ladder {
    fam: Family,
    p: ProblemParams,
    tol: f64,
    edges: Vec<Option<(Shot, Bracket)>>,
}

impl Ladder {
    pub fn new(fam: Family, p: ProblemParams, tol: f64) -> Self {
        Ladder { fam, p, tol, edges: Vec::new() }
    }

    fn edge(&mut self, k: usize) -> Result<Option<&(Shot, Bracket)>> {
        while self.edges.len() <= k {
            let j = self.edges.len();
            let hint = self.edges.last().and_then(|e| e.as_ref()).map(|(s, _)| (1.001 * s.shoot, 2.0 * s.shoot));
            let e = threshold(self.fam, j, &self.p, hint, self.tol)?;
            self.edges.push(e);
        }
        Ok(self.edges[k].as_ref())
    }

    /// `x_k`, or 0 when the count exceeds `k` for all small shots.
    pub fn value(&mut self, k: usize) -> Result<f64> {
        Ok(self.edge(k)?.map(|(s, _)| s.shoot).unwrap_or(0.0))
    }
}

/// Which family of branch pairs with prescribed limit to look for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairFamily {
    /// `a±` with `2m` zeros (`N ≥ 2`).
    Even,
    /// `b±` with `2m+1` zeros (`N ≥ 2`).
    Odd,
    /// One dimension, even extension with `2m` zeros on the line.
    Dim1Even,
    /// One dimension, odd extension with `2m+1` zeros on the line.
    Dim1Odd,
}

impl PairFamily {
    fn family(self) -> Family {
        match self {
            PairFamily::Dim1Odd => Family::Odd,
            _ => Family::Regular,
        }
    }

    /// Zero count on `(0, ∞)` for index `m`.
    fn interval(self, m: usize) -> usize {
        match self {
            PairFamily::Even => 2 * m,
            PairFamily::Odd => 2 * m + 1,
            PairFamily::Dim1Even | PairFamily::Dim1Odd => m,
        }
    }

    /// Kinds of the smaller and larger `|shoot|`.
    fn kinds(self) -> (BranchKind, BranchKind) {
        match self {
            PairFamily::Even => (BranchKind::AMinus, BranchKind::APlus),
            PairFamily::Odd => (BranchKind::BMinus, BranchKind::BPlus),
            PairFamily::Dim1Even => (BranchKind::Dim1CMinus, BranchKind::Dim1CPlus),
            PairFamily::Dim1Odd => (BranchKind::Dim1DMinus, BranchKind::Dim1DPlus),
        }
    }

    fn check_dimension(self, p: &ProblemParams) -> Result<()> {
        let one = p.n == 1;
        match self {
            PairFamily::Even | PairFamily::Odd if one => {
                Err(Error::RegimeMismatch("one-dimensional branches are built with dim1_branches".into()))
            }
            PairFamily::Dim1Even | PairFamily::Dim1Odd if !one => {
                Err(Error::RegimeMismatch(format!("one-dimensional branches need N = 1, got N = {}", p.n)))
            }
            _ => Ok(()),
        }
    }
}

/// Refine a crossing of `sign·L = target` between a point outside
/// (`sign·L < target`, shot absent at an interval edge where `L = 0`) and one
/// inside.
fn refine_crossing(
    fam: Family,
    p: &ProblemParams,
    stol: f64,
    target: f64,
    sign: f64,
    mut out: (f64, Option<Shot>),
    mut inside: Shot,
    tol: f64,
) -> Result<(Shot, (f64, f64))> {
    for _ in 0..200 {
        let v_in = sign * inside.limit.value;
        let width = (inside.shoot - out.0).abs();
        if (v_in - target).abs() <= 0.1 * tol || width <= 1e-14 * inside.shoot.abs() {
            break;
        }
        let mid = fam.shot(0.5 * (inside.shoot + out.0), p, stol)?;
        if sign * mid.limit.value >= target {
            inside = mid;
        } else {
            out = (mid.shoot, Some(mid));
        }
    }
    let ends = (out.0, inside.shoot);
    let best = match out.1 {
        Some(o) if (sign * o.limit.value - target).abs() < (sign * inside.limit.value - target).abs() => o,
        _ => inside,
    };
    Ok((best, ends))
}

/// Crossings of `|L| = target` on the interval where the count is `k`.
struct PairScan {
    lo: (Shot, (f64, f64)),
    hi: (Shot, (f64, f64)),
    sign: f64,
    extra: usize,
}

fn scan_interval(ladder: &mut Ladder, k: usize, target: f64) -> Result<PairScan> {
    let (fam, p, tol) = (ladder.fam, ladder.p, ladder.tol);
    let stol = 0.1 * tol;
    let x_lo = if k == 0 { 0.0 } else { ladder.value(k - 1)? };
    let x_hi = ladder.value(k)?;
    if !(x_hi > x_lo) {
        return Err(Error::BracketNotFound(format!("no shots with exactly {k} zeros")));
    }
    let sign = parity(k);
    let xs: Vec<f64> = (1..=SCAN).map(|i| x_lo + (x_hi - x_lo) * i as f64 / (SCAN + 1) as f64).collect();
    let shots: Vec<Shot> = xs.par_iter().map(|x| fam.shot(*x, &p, stol)).collect::<Result<_>>()?;
    let v: Vec<f64> = shots.iter().map(|s| sign * s.limit.value).collect();
    let ipk = (0..SCAN).max_by(|a, b| v[*a].total_cmp(&v[*b])).expect("non-empty scan");
    if v[ipk] < target {
        // Golden-section refinement of the peak for the report.
        let (mut a, mut b) = (if ipk == 0 { x_lo } else { xs[ipk - 1] }, if ipk + 1 == SCAN { x_hi } else { xs[ipk + 1] });
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let val = |x: f64| fam.shot(x, &p, stol).map(|s| sign * s.limit.value);
        let mut peak = v[ipk];
        for _ in 0..30 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            let (fc, fd) = (val(c)?, val(d)?);
            peak = peak.max(fc).max(fd);
            if fc > fd {
                b = d;
            } else {
                a = c;
            }
        }
        if peak < target {
            return Err(Error::PeakBelowTarget { peak, target });
        }
    }
    let above: Vec<bool> = v.iter().map(|x| *x >= target).collect();
    let changes = above.windows(2).filter(|w| w[0] != w[1]).count() + above[0] as usize + above[SCAN - 1] as usize;
    let extra = changes.saturating_sub(2);
    let left = above.iter().position(|b| *b).unwrap_or(ipk);
    let right = above.iter().rposition(|b| *b).unwrap_or(ipk);
    let out_l = if left == 0 { (x_lo, None) } else { (xs[left - 1], Some(shots[left - 1].clone())) };
    let out_r = if right + 1 == SCAN { (x_hi, None) } else { (xs[right + 1], Some(shots[right + 1].clone())) };
    let lo = refine_crossing(fam, &p, stol, target, sign, out_l, shots[left].clone(), tol)?;
    let hi = refine_crossing(fam, &p, stol, target, sign, out_r, shots[right].clone(), tol)?;
    Ok(PairScan { lo, hi, sign, extra })
}

fn pair_point(
    kind: BranchKind,
    m: usize,
    fam: Family,
    p: &ProblemParams,
    target: f64,
    sign: f64,
    crossing: &(Shot, (f64, f64)),
    extra: usize,
    tol: f64,
) -> Result<BranchPoint> {
    let (sh, ends) = crossing;
    // The limit is odd in the shooting parameter; flip onto the requested sign.
    let shoot = sign * sh.shoot;
    let limit = sign * sh.limit.value;
    let half = sh.zeros;
    let dim1 = p.n == 1;
    let zero_count = if dim1 { line_count(kind, half) } else { half };
    let (blo, bhi) = (sign * ends.0, sign * ends.1);
    let mut bp = BranchPoint {
        kind,
        m,
        shoot,
        limit,
        zero_count,
        target_mu: Some(target),
        residuals: Residuals {
            limit_uncertainty: sh.limit.uncertainty,
            limit_error: (limit - target).abs(),
            extra_crossings: extra,
            bracket: Some(Bracket {
                lo: blo.min(bhi),
                hi: blo.max(bhi),
                limit_lo: None,
                limit_hi: None,
                count_lo: half,
                count_hi: half,
            }),
            ..Residuals::default()
        },
    };
    let fresh = revalidate(fam, &mut bp, p, tol)?;
    if let Some(b) = bp.residuals.bracket.as_mut() {
        // Limits at the bracket ends, from the shots at the two ends.
        let at = |x: f64| if x == 0.0 { Ok(0.0) } else { fam.shot(x, p, 0.1 * tol).map(|s| s.limit.value) };
        b.limit_lo = Some(at(b.lo)?);
        b.limit_hi = Some(at(b.hi)?);
    }
    if !dim1 {
        let ts = invert_duality(&fresh.traj)?;
        bp.residuals.duality = Some(origin_value(&ts, 1.0 / 64.0, 1e-11)?);
    }
    Ok(bp)
}

fn pair_from_ladder(
    ladder: &mut Ladder,
    fam: PairFamily,
    mu: f64,
    m: usize,
) -> Result<(BranchPoint, BranchPoint)> {
    if !(mu > 0.0) {
        return Err(Error::InvalidParams(format!("target limit must be positive, got {mu}")));
    }
    let k = fam.interval(m);
    let scan = scan_interval(ladder, k, mu)?;
    let (kind_minus, kind_plus) = fam.kinds();
    let (p, tol, f) = (ladder.p, ladder.tol, ladder.fam);
    let minus = pair_point(kind_minus, m, f, &p, mu, scan.sign, &scan.lo, scan.extra, tol)?;
    let plus = pair_point(kind_plus, m, f, &p, mu, scan.sign, &scan.hi, scan.extra, tol)?;
    if minus.shoot == plus.shoot {
        return Err(Error::RootFindDiverged(format!("pair collapsed at {}", minus.shoot)));
    }
    Ok((minus, plus))
}

/// Regular profiles `a⁻ < a⁺` with `L(a±) = μ` and `N(a±) = 2m`.
pub fn theorem1_branches(mu: f64, m: usize, p: &ProblemParams, tol: f64) -> Result<(BranchPoint, BranchPoint)> {
    pair_for(PairFamily::Even, mu, m, p, tol)
}

/// `b⁻, b⁺ < 0` with `L(b±) = μ`, `N(b±) = 2m+1`, returned as
/// `(b⁻, b⁺)` with `b⁺ < b⁻`.
pub fn odd_counterparts(mu: f64, m: usize, p: &ProblemParams, tol: f64) -> Result<(BranchPoint, BranchPoint)> {
    pair_for(PairFamily::Odd, mu, m, p, tol)
}

/// The pair of one family at index `m`; the first element has the smaller
/// `|shoot|`.
pub fn pair_for(fam: PairFamily, mu: f64, m: usize, p: &ProblemParams, tol: f64) -> Result<(BranchPoint, BranchPoint)> {
    p.require_subcritical()?;
    fam.check_dimension(p)?;
    let mut ladder = Ladder::new(fam.family(), *p, tol);
    pair_from_ladder(&mut ladder, fam, mu, m)
}

/// Smallest `m ≤ m_max` for which the peak of `|L|` on the relevant interval
/// reaches `μ`, with its pair.
pub fn first_feasible(
    fam: PairFamily,
    mu: f64,
    p: &ProblemParams,
    m_max: usize,
    tol: f64,
) -> Result<(usize, (BranchPoint, BranchPoint))> {
    p.require_subcritical()?;
    fam.check_dimension(p)?;
    let mut ladder = Ladder::new(fam.family(), *p, tol);
    let mut last = None;
    for m in 0..=m_max {
        match pair_from_ladder(&mut ladder, fam, mu, m) {
            Ok(pair) => return Ok((m, pair)),
            Err(e @ (Error::PeakBelowTarget { .. } | Error::BracketNotFound(_))) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::BracketNotFound(format!("no feasible m up to {m_max}"))))
}

/// One-dimensional branches at index `m`: the even pair (`2m` zeros on the
/// line, `L = μ`) and the odd pair (`2m+1` zeros, `L₁ = μ`), whichever exist.
pub fn dim1_branches(mu: f64, m: usize, p: &ProblemParams, tol: f64) -> Result<Vec<BranchPoint>> {
    if p.n != 1 {
        return Err(Error::RegimeMismatch(format!("one-dimensional branches need N = 1, got N = {}", p.n)));
    }
    let even = pair_for(PairFamily::Dim1Even, mu, m, p, tol);
    let odd = pair_for(PairFamily::Dim1Odd, mu, m, p, tol);
    match (even, odd) {
        (Err(e), Err(_)) => Err(e),
        (even, odd) => Ok(even.into_iter().chain(odd).flat_map(|(a, b)| [a, b]).collect()),
    }
}

/// Inverted solution at `μ` with a complete zero count.
fn inverted_counted(mu: f64, p: &ProblemParams, opts: &InvertOptions) -> Result<InvertedSolution> {
    let sol = solve_inverted(mu, p, opts)?;
    if !sol.tally.complete || sol.gap.is_some() {
        return Err(Error::Undetermined(format!(
            "zero count at mu = {mu} is only a lower bound ({} by s = {:.3e})",
            sol.tally.count, sol.s_end
        )));
    }
    Ok(sol)
}

/// Value whose sign is that of `L̃(μ)`: the quadrature formula when β < 0,
/// the classified limit otherwise. The range is doubled (at most three
/// times) while the sign is undetermined.
fn ltilde_sign(mu: f64, p: &ProblemParams, opts: &InvertOptions) -> Result<(InvertedSolution, f64)> {
    let mut o = *opts;
    let mut last = None;
    for _ in 0..=3 {
        let sol = inverted_counted(mu, p, &o)?;
        let v = if p.constants().regime == Regime::BetaNeg {
            ltilde_quadrature(&sol).map(|q| q.value)
        } else {
            classify_asymptotics(&sol).and_then(|c| match c.mode {
                Mode::Undetermined => Err(Error::Undetermined(format!(
                    "limit {} ± {} at mu = {mu}",
                    c.ltilde.value, c.ltilde.uncertainty
                ))),
                _ => Ok(c.ltilde.value),
            })
        };
        match v {
            Ok(v) => return Ok((sol, v)),
            Err(e @ Error::Undetermined(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
        o.s_max *= 2.0;
    }
    Err(last.expect("at least one round"))
}

/// `μ_m = inf{μ ≥ 2 : Ñ(μ) ≥ m+1}` for `m ≥ Ñ(2) + 1`, with the
/// classification there (fast decay, `L̃ = 0`).
pub fn find_mu_m(m: usize, p: &ProblemParams, tol: f64) -> Result<(BranchPoint, Classification)> {
    find_mu_m_from(m, p, None, tol)
}

/// As [`find_mu_m`], with an upper starting guess for the bracket.
pub fn find_mu_m_from(m: usize, p: &ProblemParams, hint: Option<f64>, tol: f64) -> Result<(BranchPoint, Classification)> {
    p.require_subcritical()?;
    if p.n < 3 {
        return Err(Error::RegimeMismatch(format!("mu_m needs N >= 3, got N = {}", p.n)));
    }
    let mut opts = InvertOptions::for_params(p);
    opts.tol = tol.min(1e-8);
    let (lo_sol, lo_v) = ltilde_sign(2.0, p, &opts)?;
    let m_bar = lo_sol.tally.count + 1;
    if m < m_bar {
        return Err(Error::InvalidParams(format!("m = {m} is below the first index Ñ(2)+1 = {m_bar}")));
    }
    let mut lo = (2.0, lo_sol.tally.count, lo_v);
    let mut x = hint.filter(|h| *h > 2.0).unwrap_or(4.0);
    let mut hi = None;
    for _ in 0..EXPANSIONS {
        let (sol, v) = ltilde_sign(x, p, &opts)?;
        if beyond(sol.tally.count, v, m) {
            hi = Some((x, sol.tally.count, v));
            break;
        }
        lo = (x, sol.tally.count, v);
        x *= 2.0;
    }
    let mut hi = hi.ok_or_else(|| Error::BracketNotFound(format!("Ñ stays at most {m} up to mu = {x:.3e}")))?;
    while hi.0 - lo.0 > 1e-10 * hi.0 {
        let mid = 0.5 * (lo.0 + hi.0);
        let (sol, v) = ltilde_sign(mid, p, &opts)?;
        if beyond(sol.tally.count, v, m) {
            hi = (mid, sol.tally.count, v);
        } else {
            lo = (mid, sol.tally.count, v);
        }
    }
    let sol = inverted_counted(lo.0, p, &opts)?;
    let class = classify_asymptotics(&sol)?;
    let bp = BranchPoint {
        kind: BranchKind::MuM,
        m,
        shoot: lo.0,
        limit: class.ltilde.value,
        zero_count: sol.tally.count,
        target_mu: None,
        residuals: Residuals {
            limit_uncertainty: class.ltilde.uncertainty,
            limit_error: class.ltilde.value.abs(),
            bracket: Some(Bracket {
                lo: lo.0,
                hi: hi.0,
                limit_lo: Some(lo.2),
                limit_hi: Some(hi.2),
                count_lo: lo.1,
                count_hi: hi.1,
            }),
            ..Residuals::default()
        },
    };
    if bp.zero_count != m || class.mode != Mode::Fast {
        return Err(Error::RootFindDiverged(format!(
            "mu_{m} = {}: Ñ = {}, mode {:?}, L̃ = {} ± {}",
            bp.shoot, bp.zero_count, class.mode, class.ltilde.value, class.ltilde.uncertainty
        )));
    }
    Ok((bp, class))
}

/// Range for singular-branch solutions: long enough that the oscillation
/// about the constant states has stopped crossing zero.
pub fn singular_s_max(regime: Regime) -> f64 {
    match regime {
        Regime::BetaZero => 1e40,
        _ => 1e30,
    }
}

/// A singular branch: `μ̄_m`, its inverted solution and classification.
#[derive(Debug, Clone)]
pub struct SingularBranch {
    pub point: BranchPoint,
    pub solution: InvertedSolution,
    pub classification: Classification,
}

/// Forward-pass options used for singular branches.
pub fn singular_opts(p: &ProblemParams, tol: f64) -> InvertOptions {
    InvertOptions::new(singular_s_max(p.constants().regime), tol.min(1e-8))
}

/// `inf{μ ≥ 1 : Ñ(μ) ≥ k}` bracketed to `1e-7` relative; `lo = 1` when
/// already `Ñ(1) ≥ k`.
fn count_threshold(k: usize, p: &ProblemParams, opts: &InvertOptions) -> Result<((f64, usize), (f64, usize))> {
    let n1 = inverted_counted(1.0, p, opts)?.tally.count;
    if n1 >= k {
        return Ok(((1.0, n1), (1.0, n1)));
    }
    let mut lo = (1.0, n1);
    let mut hi = None;
    let mut x = 1.25;
    for _ in 0..EXPANSIONS {
        let n = inverted_counted(x, p, opts)?.tally.count;
        if n >= k {
            hi = Some((x, n));
            break;
        }
        lo = (x, n);
        x = 1.0 + 2.0 * (x - 1.0);
    }
    let mut hi = hi.ok_or_else(|| Error::BracketNotFound(format!("Ñ stays below {k} up to mu = {x:.3e}")))?;
    while hi.0 - lo.0 > 1e-7 * hi.0 {
        let mid = 0.5 * (lo.0 + hi.0);
        let n = inverted_counted(mid, p, opts)?.tally.count;
        if n >= k {
            hi = (mid, n);
        } else {
            lo = (mid, n);
        }
    }
    Ok((lo, hi))
}

/// Smallest `m` with a singular branch among `μ ≥ 1`, i.e. `Ñ(1)`.
pub fn first_singular_m(p: &ProblemParams, tol: f64) -> Result<usize> {
    Ok(inverted_counted(1.0, p, &singular_opts(p, tol))?.tally.count)
}

/// `μ̄_m`: a slow solution with exactly `m` zeros, taken inside the
/// `μ`-interval on which `Ñ = m`.
pub fn singular_branch(m: usize, p: &ProblemParams, tol: f64) -> Result<SingularBranch> {
    p.require_subcritical()?;
    let regime = p.constants().regime;
    if !matches!(regime, Regime::BetaPos | Regime::BetaZero) {
        return Err(Error::RegimeMismatch(format!(
            "singular branches need N >= 3 and 2/(N-2) <= alpha, got regime {regime}"
        )));
    }
    let opts = singular_opts(p, tol);
    let n1 = inverted_counted(1.0, p, &opts)?.tally.count;
    if n1 > m {
        return Err(Error::BracketNotFound(format!("Ñ(1) = {n1} already exceeds m = {m}")));
    }
    let (_, lo) = count_threshold(m, p, &opts)?;
    let (_, hi) = count_threshold(m + 1, p, &opts)?;
    if lo.1 != m || !(hi.0 > lo.0) {
        return Err(Error::BracketNotFound(format!("Ñ skips the value {m} near mu = {}", lo.0)));
    }
    let mut last = None;
    for frac in [0.5, 0.25, 0.75, 0.1, 0.9] {
        let mu = lo.0.powf(1.0 - frac) * hi.0.powf(frac);
        let sol = inverted_counted(mu, p, &opts)?;
        if sol.tally.count != m {
            continue;
        }
        let class = match classify_asymptotics(&sol) {
            Ok(c) => c,
            Err(e) => {
                last = Some(e);
                continue;
            }
        };
        if class.mode != Mode::Slow {
            last = Some(Error::Undetermined(format!("mode {:?} at mu = {mu}", class.mode)));
            continue;
        }
        let point = BranchPoint {
            kind: BranchKind::MuBarSingular,
            m,
            shoot: mu,
            limit: class.ltilde.value,
            zero_count: m,
            target_mu: None,
            residuals: Residuals {
                limit_uncertainty: class.ltilde.uncertainty,
                limit_error: (sol.mu - mu).abs(),
                bracket: Some(Bracket {
                    lo: lo.0,
                    hi: hi.0,
                    limit_lo: None,
                    limit_hi: None,
                    count_lo: lo.1,
                    count_hi: hi.1,
                }),
                ..Residuals::default()
            },
        };
        return Ok(SingularBranch { point, solution: sol, classification: class });
    }
    Err(last.unwrap_or_else(|| Error::BracketNotFound(format!("no slow solution with {m} zeros"))))
}

/// Dual profile `h(r) = r^{−2/α} w(r^{−2})`.
pub fn dual_profile(sol: &InvertedSolution, r: f64) -> Result<f64> {
    let s = 1.0 / (r * r);
    let (w, _) = sol
        .eval(s)
        .ok_or_else(|| Error::DomainMismatch(format!("r = {r} maps outside the stored solution")))?;
    Ok(r.powf(-2.0 / sol.params.alpha) * w)
}

/// `r^{2/α} h(r)`, times `(ln r^{−2})^{1/α}` when β = 0: the quantity whose
/// limit as `r → 0` is the singular coefficient.
pub fn singular_scaled(sol: &InvertedSolution, r: f64) -> Result<f64> {
    let al = sol.params.alpha;
    let v = r.powf(2.0 / al) * dual_profile(sol, r)?;
    Ok(match sol.params.constants().regime {
        Regime::BetaZero => (-2.0 * r.ln()).powf(1.0 / al) * v,
        _ => v,
    })
}

/// Continuation of an inverted solution past its stored end `S` for the
/// weak form: `w → L̃` (β > 0), `w ≈ L̃ (ln s)^{−1/α}` (β = 0) or
/// `w ≈ L̃ s^{−λ₂}` (β < 0, slow decay).
pub fn tail_law(sol: &InvertedSolution, c: &Classification) -> TailLaw {
    let p = sol.params;
    let big_s = sol.traj.x_max();
    match c.regime {
        Regime::BetaZero => TailLaw {
            value: c.ltilde.value * big_s.ln().powf(-1.0 / p.alpha),
            decay: 0.0,
            log_decay: 1.0 / p.alpha,
        },
        Regime::BetaNeg => {
            let l2 = p.constants().lambda2;
            TailLaw { value: c.ltilde.value * big_s.powf(-l2), decay: l2, log_decay: 0.0 }
        }
        _ => TailLaw::constant(c.ltilde.value),
    }
}

/// Expected singular coefficient for a branch with `m` zeros:
/// `(−1)^m β^{1/α}`, or `(−1)^m (2/α)^{2/α}` when β = 0.
pub fn singular_coefficient(p: &ProblemParams, m: usize) -> f64 {
    let c = p.constants();
    let mag = match c.regime {
        Regime::BetaZero => (2.0 / p.alpha).powf(2.0 / p.alpha),
        _ => c.beta.max(0.0).powf(1.0 / p.alpha),
    };
    parity(m) * mag
}

/// One row of the bifurcation table.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TableRow {
    pub a: f64,
    pub limit: f64,
    pub zeros: usize,
}

/// `(a, L(a), N(a))` on a uniform grid of `(0, a_max]`.
pub fn bifurcation_table(fam: Family, p: &ProblemParams, a_max: f64, samples: usize, tol: f64) -> Result<Vec<TableRow>> {
    (1..=samples)
        .into_par_iter()
        .map(|i| {
            let a = a_max * i as f64 / samples as f64;
            let s = fam.shot(a, p, tol)?;
            Ok(TableRow { a, limit: s.limit.value, zeros: s.zeros })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AtlasFailure {
    pub what: String,
    pub m: usize,
    pub error: String,
}

/// Everything found for one `(N, α)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Atlas {
    pub n: u32,
    pub alpha: f64,
    pub tol: f64,
    pub mu_target: f64,
    pub thresholds: Vec<BranchPoint>,
    pub pairs: Vec<BranchPoint>,
    pub mu_thresholds: Vec<BranchPoint>,
    pub singular: Vec<BranchPoint>,
    pub failures: Vec<AtlasFailure>,
}

fn record<T>(failures: &mut Vec<AtlasFailure>, what: &str, m: usize, r: Result<T>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            failures.push(AtlasFailure { what: what.into(), m, error: e.to_string() });
            None
        }
    }
}

/// Sweep of all branch kinds for `m ≤ m_max` (indices relative to the first
/// admissible one for `μ_m` and singular branches). Pair searches for
/// different `m` run in parallel; the result does not depend on scheduling.
pub fn build_atlas(p: &ProblemParams, m_max: usize, mu: f64, tol: f64) -> Result<Atlas> {
    build_atlas_seeded(p, m_max, mu, tol, 0)
}

/// As [`build_atlas`], with `seed` fixing the order in which pair searches
/// are handed to the thread pool. The atlas itself is the same for every
/// seed.
pub fn build_atlas_seeded(p: &ProblemParams, m_max: usize, mu: f64, tol: f64, seed: u64) -> Result<Atlas> {
    p.require_subcritical()?;
    let mut failures = Vec::new();
    let mut thresholds = Vec::new();
    let mut ladder = Ladder::new(Family::Regular, *p, tol);
    for m in 0..=m_max {
        match ladder.edge(m) {
            Ok(Some((sh, br))) => thresholds.push(BranchPoint {
                kind: BranchKind::Am,
                m,
                shoot: sh.shoot,
                limit: sh.limit.value,
                zero_count: sh.zeros,
                target_mu: None,
                residuals: Residuals {
                    limit_uncertainty: sh.limit.uncertainty,
                    limit_error: sh.limit.value.abs(),
                    bracket: Some(*br),
                    ..Residuals::default()
                },
            }),
            Ok(None) => failures.push(AtlasFailure {
                what: "a_m".into(),
                m,
                error: format!("a_{m} = 0"),
            }),
            Err(e) => {
                failures.push(AtlasFailure { what: "a_m".into(), m, error: e.to_string() });
                break;
            }
        }
    }
    let fams: &[PairFamily] = if p.n == 1 {
        &[PairFamily::Dim1Even, PairFamily::Dim1Odd]
    } else {
        &[PairFamily::Even, PairFamily::Odd]
    };
    let mut jobs: Vec<(usize, PairFamily, usize)> = fams
        .iter()
        .flat_map(|f| (0..=m_max).map(move |m| (*f, m)))
        .enumerate()
        .map(|(i, (f, m))| (i, f, m))
        .collect();
    jobs.shuffle(&mut StdRng::seed_from_u64(seed));
    let mut results: Vec<_> = jobs.par_iter().map(|(i, f, m)| (*i, *f, *m, pair_for(*f, mu, *m, p, tol))).collect();
    results.sort_by_key(|r| r.0);
    let mut pairs = Vec::new();
    for (_, f, m, r) in results {
        if let Some((a, b)) = record(&mut failures, &format!("{f:?} pair"), m, r) {
            pairs.push(a);
            pairs.push(b);
        }
    }
    let mut mu_thresholds = Vec::new();
    let mut singular = Vec::new();
    if p.n >= 3 {
        let start = solve_inverted(2.0, p, &InvertOptions::for_params(p))
            .and_then(|s| if s.tally.complete { Ok(s.tally.count + 1) } else { Err(Error::Undetermined("Ñ(2) is only a lower bound".into())) });
        if let Some(m0) = record(&mut failures, "mu_m", 0, start) {
            let mut hint = None;
            for m in m0..=m0 + m_max {
                match record(&mut failures, "mu_m", m, find_mu_m_from(m, p, hint, tol)) {
                    Some((bp, _)) => {
                        hint = Some(2.0 * bp.shoot);
                        mu_thresholds.push(bp);
                    }
                    None => break,
                }
            }
        }
        if matches!(p.constants().regime, Regime::BetaPos | Regime::BetaZero) {
            if let Some(m0) = record(&mut failures, "singular", 0, first_singular_m(p, tol)) {
                let res: Vec<_> = (m0..=m0 + m_max).into_par_iter().map(|m| (m, singular_branch(m, p, tol))).collect();
                for (m, r) in res {
                    if let Some(sb) = record(&mut failures, "singular", m, r) {
                        singular.push(sb.point);
                    }
                }
            }
        }
    }
    Ok(Atlas {
        n: p.n,
        alpha: p.alpha,
        tol,
        mu_target: mu,
        thresholds,
        pairs,
        mu_thresholds,
        singular,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pp(n: u32, a: f64) -> ProblemParams {
        ProblemParams::new(n, a).unwrap()
    }

    #[test]
    fn am_ladder_in_three_dimensions() {
        let p = pp(3, 2.0);
        let tol = 1e-5;
        let mut prev = 0.0;
        for m in 0..3 {
            let bp = find_am(m, &p, None, tol).unwrap();
            assert!(bp.shoot > prev, "a_{m} = {} not above {prev}", bp.shoot);
            assert!(bp.limit.abs() <= tol && bp.zero_count == m);
            let br = bp.residuals.bracket.unwrap();
            assert!(!beyond(br.count_lo, br.limit_lo.unwrap(), m) && beyond(br.count_hi, br.limit_hi.unwrap(), m));
            // Independent evaluation on both sides.
            let l = shoot(bp.shoot * (1.0 - 1e-3), &p, 1e-8).unwrap().limit.value;
            let r = shoot(bp.shoot * (1.0 + 1e-3), &p, 1e-8).unwrap().limit.value;
            assert!(l * r < 0.0, "no sign change at a_{m}: {l} {r}");
            prev = bp.shoot;
        }
    }

    #[test]
    fn am_is_stable_under_tighter_tolerance() {
        let p = pp(3, 2.0);
        let tol = 1e-5;
        let a = find_am(1, &p, None, tol).unwrap().shoot;
        let b = find_am(1, &p, None, tol / 10.0).unwrap().shoot;
        assert!((a - b).abs() <= 10.0 * tol);
    }

    #[test]
    fn am_absent_when_small_data_already_oscillate() {
        // α < 2/N: every small regular profile has a zero.
        let r = find_am(0, &pp(1, 1.0), None, 1e-5);
        assert!(matches!(r, Err(Error::BracketNotFound(_))), "{r:?}");
    }

    #[test]
    fn first_pair_for_unit_limit() {
        let p = pp(3, 2.0);
        let (m, (lo, hi)) = first_feasible(PairFamily::Even, 1.0, &p, 4, 1e-6).unwrap();
        assert_eq!(m, 1);
        assert!(lo.shoot < hi.shoot);
        for bp in [&lo, &hi] {
            assert!((bp.limit - 1.0).abs() <= 1e-6);
            assert_eq!(bp.zero_count, 2 * m);
            assert!(bp.residuals.revalidation <= 1e-6);
            assert!((bp.residuals.duality.unwrap() - 1.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn peak_below_target_is_reported() {
        match theorem1_branches(1.0, 0, &pp(3, 2.0), 1e-6) {
            Err(Error::PeakBelowTarget { peak, target }) => assert!(peak > 0.7 && peak < target),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn odd_counterparts_are_negative_and_ordered() {
        let p = pp(3, 2.0);
        let (bm, bp) = odd_counterparts(1.0, 0, &p, 1e-6).unwrap();
        assert!(bp.shoot < bm.shoot && bm.shoot < 0.0);
        for b in [&bm, &bp] {
            assert!((b.limit - 1.0).abs() <= 1e-6 && b.zero_count == 1);
        }
    }

    #[test]
    fn pairs_drift_outward_with_m() {
        let p = pp(3, 2.0);
        let mut ladder = Ladder::new(Family::Regular, p, 1e-6);
        let mut prev = (0.0, 0.0);
        for m in 1..4 {
            let (a, b) = pair_from_ladder(&mut ladder, PairFamily::Even, 1.0, m).unwrap();
            assert!(a.shoot > prev.0 && b.shoot > prev.1);
            prev = (a.shoot, b.shoot);
        }
    }

    #[test]
    fn dimension_one_pairs() {
        let p = pp(1, 1.0);
        let (m, (c1, c2)) = first_feasible(PairFamily::Dim1Even, 1.0, &p, 4, 1e-6).unwrap();
        assert_eq!(c1.zero_count, 2 * m);
        assert!((c1.limit - 1.0).abs() <= 1e-6 && (c2.limit - 1.0).abs() <= 1e-6);
        let (k, (d1, d2)) = first_feasible(PairFamily::Dim1Odd, 1.0, &p, 4, 1e-6).unwrap();
        assert_eq!(d1.zero_count, 2 * k + 1);
        assert_eq!(d2.zero_count, 2 * k + 1);
        assert!((d1.limit - 1.0).abs() <= 1e-6 && (d2.limit - 1.0).abs() <= 1e-6);
        assert!(d1.shoot.abs() < d2.shoot.abs());
        assert!(matches!(theorem1_branches(1.0, 1, &p, 1e-6), Err(Error::RegimeMismatch(_))));
    }

    #[test]
    fn singular_branch_needs_nonnegative_beta() {
        assert!(matches!(singular_branch(3, &pp(3, 1.0), 1e-8), Err(Error::RegimeMismatch(_))));
    }

    #[test]
    fn singular_coefficient_closed_forms() {
        assert!((singular_coefficient(&pp(3, 3.0), 0) - (2.0f64 / 9.0).cbrt()).abs() < 1e-15);
        assert!((singular_coefficient(&pp(3, 3.0), 1) + (2.0f64 / 9.0).cbrt()).abs() < 1e-15);
        assert!((singular_coefficient(&pp(3, 2.0), 2) - 1.0).abs() < 1e-15);
    }
}
