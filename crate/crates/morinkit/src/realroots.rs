//! Certified real-root counting, isolation, and refinement for univariate
//! polynomials with real coefficients.
//!
//! Counting uses Sturm sequences evaluated at chosen points, so the number of
//! distinct roots in an interval is decided by signs rather than by heuristic
//! clustering. Isolated roots are narrowed by bisection and polished with a
//! short Newton run. Multiple roots are handled (the Sturm chain absorbs
//! repeated factors) and flagged as non-simple by locating the roots of the
//! chain's terminal gcd with a second sign count.

use thiserror::Error;

/// Default residual target for [`real_roots`], relative to max(1, largest |coefficient|).
pub const DEFAULT_ROOT_TOL: f64 = 1e-12;

/// Derivative threshold used by [`is_simple_root`], relative to the largest
/// coefficient of p'. Permissive enough that rounding in a refined root
/// cannot demote a genuinely simple root.
pub const SIMPLE_ROOT_DERIV_TOL: f64 = 1e-8;

/// Isolation stops splitting below this width (scaled by the root bound).
/// Roots that remain together are reported as a cluster representative with
/// `certified_distinct = false` rather than as guessed distinct roots.
pub const DISTINCT_GAP_TOL: f64 = 1e-9;

// Relative cutoff under which a Sturm-chain remainder counts as zero.
const CHAIN_ZERO_TOL: f64 = 1e-13;
// Relative cutoff under which a polynomial evaluation counts as zero in sign logic.
const EVAL_ZERO_TOL: f64 = 1e-12;
// Bisection and endpoint-nudge retry caps.
const MAX_BISECT: usize = 200;
const MAX_NUDGE: usize = 60;
const MAX_NEWTON: usize = 30;

#[derive(Debug, Error, PartialEq)]
pub enum RootError {
    #[error("polynomial is identically zero")]
    IdenticallyZero,
    #[error("endpoint sits on a root and perturbation failed after {0} retries")]
    EndpointRoot(usize),
    #[error("root refinement stalled at residual {residual:.3e} (target {target:.3e})")]
    NonConvergence { residual: f64, target: f64 },
    #[error("x = {0} is not a root at the requested tolerance (|p(x)| = {1:.3e})")]
    NotARoot(f64, f64),
}

/// Univariate real polynomial, coefficients in ascending degree order.
#[derive(Clone, Debug, PartialEq)]
pub struct Polynomial {
    coeffs: Vec<f64>,
}

impl Polynomial {
    /// Builds a polynomial from ascending coefficients, trimming exact
    /// trailing zeros so the leading coefficient is nonzero (unless the
    /// polynomial is identically zero, kept as a single zero coefficient).
    pub fn new(mut coeffs: Vec<f64>) -> Self {
        while coeffs.len() > 1 && coeffs.last() == Some(&0.0) {
            coeffs.pop();
        }
        if coeffs.is_empty() {
            coeffs.push(0.0);
        }
        Polynomial { coeffs }
    }

    /// Monic polynomial with the given roots.
    pub fn from_roots(roots: &[f64]) -> Self {
        let mut p = Polynomial::new(vec![1.0]);
        for &r in roots {
            p = p.mul(&Polynomial::new(vec![-r, 1.0]));
        }
        p
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.len() == 1 && self.coeffs[0] == 0.0
    }

    pub fn eval(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for &c in self.coeffs.iter().rev() {
            acc = acc * x + c;
        }
        acc
    }

    /// Sum of |a_i| |x|^i, the natural magnitude scale of evaluating at x.
    /// Rounding noise in eval is machine epsilon times this, so zero tests
    /// must use it rather than a global coefficient norm: polynomials whose
    /// roots all sit far inside the unit interval are genuinely tiny there.
    pub fn abs_eval(&self, x: f64) -> f64 {
        let ax = x.abs();
        let mut acc = 0.0;
        for &c in self.coeffs.iter().rev() {
            acc = acc * ax + c.abs();
        }
        acc
    }

    pub fn derivative(&self) -> Polynomial {
        if self.degree() == 0 {
            return Polynomial::new(vec![0.0]);
        }
        let d: Vec<f64> = self
            .coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, &c)| i as f64 * c)
            .collect();
        Polynomial::new(d)
    }

    pub fn mul(&self, other: &Polynomial) -> Polynomial {
        let mut out = vec![0.0; self.coeffs.len() + other.coeffs.len() - 1];
        for (i, &a) in self.coeffs.iter().enumerate() {
            for (j, &b) in other.coeffs.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Polynomial::new(out)
    }

    pub fn scale(&self, c: f64) -> Polynomial {
        Polynomial::new(self.coeffs.iter().map(|&a| a * c).collect())
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, &c| m.max(c.abs()))
    }

    /// Cauchy bound: every real root r satisfies |r| < 1 + max |a_i / a_n|.
    pub fn cauchy_root_bound(&self) -> f64 {
        let lead = self.coeffs.last().copied().unwrap_or(0.0).abs();
        if lead == 0.0 {
            return 1.0;
        }
        let m = self.coeffs[..self.coeffs.len() - 1]
            .iter()
            .fold(0.0f64, |m, &c| m.max(c.abs()));
        1.0 + m / lead
    }

    // Normalizes to unit max coefficient; sign counting is scale-invariant,
    // and this keeps remainder arithmetic well ranged along the chain.
    fn normalized(&self) -> Polynomial {
        let m = self.max_abs_coeff();
        if m == 0.0 || m == 1.0 {
            self.clone()
        } else {
            self.scale(1.0 / m)
        }
    }

    // Normalizes the leading coefficient to ±1 without flipping the sign.
    // Division by such a polynomial never amplifies, which keeps the noise
    // floor of Sturm-chain remainders at machine scale; dividing by a max
    // normalized polynomial would grow noise by 1/|lead| per step and can
    // stop the chain from reaching the true gcd.
    fn lead_normalized(&self) -> Polynomial {
        let lead = self.coeffs.last().copied().unwrap_or(0.0).abs();
        if lead == 0.0 || lead == 1.0 {
            self.clone()
        } else {
            self.scale(1.0 / lead)
        }
    }

    // Remainder of self / d, with near-zero leading coefficients of the
    // remainder dropped relative to its own scale.
    fn rem(&self, d: &Polynomial) -> Polynomial {
        let dn = d.degree();
        let lead = *d.coeffs.last().unwrap();
        let mut r = self.coeffs.clone();
        while r.len() > dn.max(1) && r.len() - 1 >= dn.max(1) {
            let rn = r.len() - 1;
            if rn < dn {
                break;
            }
            let q = r[rn] / lead;
            for j in 0..dn {
                r[rn - dn + j] -= q * d.coeffs[j];
            }
            r.pop();
            // drop numerically dead leading terms created by cancellation
            let scale = r.iter().fold(0.0f64, |m, &c| m.max(c.abs()));
            while r.len() > 1 && r.last().unwrap().abs() <= CHAIN_ZERO_TOL * scale {
                r.pop();
            }
        }
        Polynomial::new(r)
    }
}

// Rescales the argument, t = lambda x, so the coefficients of the scaled
// polynomial are balanced (all at most the leading one, by the Fujiwara root
// bound choice of lambda). A lopsided polynomial like t^5 - 1e-15 has its
// entire structure below the chain arithmetic's noise floor; after scaling it
// becomes x^5 - 1 and every root is resolved cleanly. Roots map back as
// t = lambda x. Scales near 1 are skipped so ordinary inputs take the exact
// same arithmetic path as before.
fn equilibrate(p: &Polynomial) -> (Polynomial, f64) {
    let deg = p.degree();
    let lead = p.coeffs.last().copied().unwrap_or(0.0).abs();
    if deg == 0 || lead == 0.0 {
        return (p.clone(), 1.0);
    }
    let mut lambda = 0.0f64;
    for (i, &c) in p.coeffs[..deg].iter().enumerate() {
        if c != 0.0 {
            lambda = lambda.max((c.abs() / lead).powf(1.0 / (deg - i) as f64));
        }
    }
    if !lambda.is_finite() || lambda <= 0.0 || (0.0625..=16.0).contains(&lambda) {
        return (p.clone(), 1.0);
    }
    let mut pow = 1.0;
    let mut coeffs = Vec::with_capacity(p.coeffs.len());
    for &c in &p.coeffs {
        coeffs.push(c * pow);
        pow *= lambda;
    }
    if !coeffs.iter().all(|c| c.is_finite()) {
        return (p.clone(), 1.0);
    }
    (Polynomial::new(coeffs).normalized(), lambda)
}

fn sturm_chain(p: &Polynomial) -> Vec<Polynomial> {
    let p0 = p.lead_normalized();
    let p1 = p0.derivative().lead_normalized();
    let mut chain = vec![p0, p1];
    loop {
        let a = &chain[chain.len() - 2];
        let b = &chain[chain.len() - 1];
        if b.is_zero() || b.degree() == 0 {
            break;
        }
        let r = a.rem(b);
        // noise floor of the division is machine epsilon times roughly the
        // product of the operand scales
        let scale = a.max_abs_coeff() * b.max_abs_coeff().max(1.0);
        if r.max_abs_coeff() <= CHAIN_ZERO_TOL * scale {
            break;
        }
        chain.push(r.scale(-1.0).lead_normalized());
    }
    chain
}

// Sign with a relative dead zone; zeros are skipped in variation counts.
fn sign_at(p: &Polynomial, x: f64) -> i32 {
    let v = p.eval(x);
    let scale = p.abs_eval(x);
    if v.abs() <= EVAL_ZERO_TOL * scale.max(f64::MIN_POSITIVE) {
        0
    } else if v > 0.0 {
        1
    } else {
        -1
    }
}

fn variations(chain: &[Polynomial], x: f64) -> usize {
    let mut count = 0;
    let mut prev = 0;
    for p in chain {
        let s = sign_at(p, x);
        if s != 0 {
            if prev != 0 && s != prev {
                count += 1;
            }
            prev = s;
        }
    }
    count
}

// Moves x upward in growing steps until p(x) is decisively nonzero.
fn nudge_up(p: &Polynomial, mut x: f64, limit: f64) -> Result<f64, RootError> {
    let mut h = f64::EPSILON * x.abs().max(1.0) * 16.0;
    for attempt in 0..MAX_NUDGE {
        if sign_at(p, x) != 0 {
            return Ok(x);
        }
        x += h;
        h *= 2.0;
        if x > limit {
            return Err(RootError::EndpointRoot(attempt));
        }
    }
    Err(RootError::EndpointRoot(MAX_NUDGE))
}

/// Number of distinct real roots of `p` in the half-open interval (a, b].
///
/// Endpoints landing on a root are perturbed upward (a inward, b outward) so
/// that the half-open convention is preserved: a root exactly at `a` stays
/// excluded and a root exactly at `b` stays included.
pub fn sturm_count(p: &Polynomial, a: f64, b: f64) -> Result<usize, RootError> {
    if p.is_zero() {
        return Err(RootError::IdenticallyZero);
    }
    assert!(a < b, "sturm_count needs a < b");
    if p.degree() == 0 {
        return Ok(0);
    }
    let (q, lambda) = equilibrate(&p.normalized());
    let chain = sturm_chain(&q);
    let a = nudge_up(&chain[0], a / lambda, b / lambda)?;
    let b = nudge_up(&chain[0], b / lambda, f64::INFINITY)?;
    let va = variations(&chain, a);
    let vb = variations(&chain, b);
    Ok(va.saturating_sub(vb))
}

fn count_between(chain: &[Polynomial], va: usize, x: f64) -> usize {
    va.saturating_sub(variations(chain, x))
}

/// Distinct real roots of `p`, refined so that every residual |p(root)|
/// stays within tol times the local evaluation scale of p at that root.
#[derive(Clone, Debug)]
pub struct RootSet {
    pub roots: Vec<f64>,
    pub simple_flags: Vec<bool>,
    pub residuals: Vec<f64>,
    pub certified_distinct: bool,
}

impl RootSet {
    fn empty(certified: bool) -> Self {
        RootSet {
            roots: Vec::new(),
            simple_flags: Vec::new(),
            residuals: Vec::new(),
            certified_distinct: certified,
        }
    }
}

// One isolated (or clustered) root interval awaiting refinement.
struct Isolated {
    lo: f64,
    hi: f64,
    clustered: bool,
}

fn isolate(chain: &[Polynomial], lo: f64, hi: f64, gap_tol: f64) -> Vec<Isolated> {
    let p = &chain[0];
    let mut out = Vec::new();
    let v_lo = variations(chain, lo);
    let total = count_between(chain, v_lo, hi);
    let mut stack = vec![(lo, hi, v_lo, total)];
    while let Some((a, b, va, count)) = stack.pop() {
        if count == 0 {
            continue;
        }
        if count == 1 {
            out.push(Isolated {
                lo: a,
                hi: b,
                clustered: false,
            });
            continue;
        }
        if b - a <= gap_tol {
            out.push(Isolated {
                lo: a,
                hi: b,
                clustered: true,
            });
            continue;
        }
        // pick a split point that does not sit on a root
        let mut mid = 0.5 * (a + b);
        let mut step = (b - a) * 1e-3;
        let mut ok = false;
        for _ in 0..MAX_NUDGE {
            if sign_at(p, mid) != 0 {
                ok = true;
                break;
            }
            mid += step;
            step *= 2.0;
            if mid >= b {
                mid = 0.5 * (a + 0.5 * (a + b));
                step = (b - a) * 1e-4;
            }
        }
        if !ok {
            // could not find a clean split; give up on separating this group
            out.push(Isolated {
                lo: a,
                hi: b,
                clustered: true,
            });
            continue;
        }
        let v_mid = variations(chain, mid);
        let left = va.saturating_sub(v_mid);
        stack.push((mid, b, v_mid, count - left));
        stack.push((a, mid, va, left));
    }
    out.sort_by(|x, y| x.lo.partial_cmp(&y.lo).unwrap());
    out
}

// Narrows an isolated interval and polishes with Newton. Bisection steers by
// raw evaluation signs where a sign change exists; even-multiplicity roots
// (no sign change) fall back to Sturm bisection. Newton may roam slightly
// outside the isolation interval because the sign dead zone used by the
// counting logic can shift isolation boundaries off the true root by a small
// fraction of the interval width.
fn refine(chain: &[Polynomial], iso: &Isolated, tol: f64) -> Result<(f64, f64), RootError> {
    let p = &chain[0];
    let dp = &chain[1];
    let (mut lo, mut hi) = (iso.lo, iso.hi);
    let f_lo = p.eval(lo);
    let f_hi = p.eval(hi);
    let has_sign_change = f_lo != 0.0 && f_hi != 0.0 && (f_lo > 0.0) != (f_hi > 0.0);

    let v_lo = if has_sign_change {
        0
    } else {
        variations(chain, lo)
    };
    for _ in 0..MAX_BISECT {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break; // interval at floating resolution
        }
        let keep_left = if has_sign_change {
            let fm = p.eval(mid);
            if fm == 0.0 {
                lo = mid;
                hi = mid;
                break;
            }
            (fm > 0.0) != (f_lo > 0.0)
        } else {
            count_between(chain, v_lo, mid) >= 1
        };
        if keep_left {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= f64::EPSILON * lo.abs().max(hi.abs()).max(1.0) {
            break;
        }
    }

    let pad = 0.05 * (iso.hi - iso.lo) + 64.0 * f64::EPSILON * iso.hi.abs().max(1.0);
    let (roam_lo, roam_hi) = (iso.lo - pad, iso.hi + pad);
    let mut x = 0.5 * (lo + hi);
    let mut best = (x, p.eval(x).abs());
    for _ in 0..MAX_NEWTON {
        let fx = p.eval(x);
        if fx.abs() < best.1 {
            best = (x, fx.abs());
        }
        if fx == 0.0 {
            break;
        }
        let dfx = dp.eval(x);
        if dfx.abs() < f64::MIN_POSITIVE * 1e16 {
            break;
        }
        let next = x - fx / dfx;
        if !next.is_finite() || next < roam_lo || next > roam_hi {
            break;
        }
        if (next - x).abs() <= f64::EPSILON * x.abs().max(1.0) {
            x = next;
            let fx = p.eval(x).abs();
            if fx < best.1 {
                best = (x, fx);
            }
            break;
        }
        x = next;
    }
    let (root, residual) = best;
    let target = tol * eval_scale(p, root);
    if residual > target {
        return Err(RootError::NonConvergence { residual, target });
    }
    Ok((root, residual))
}

// Attainable evaluation accuracy of p near x scales with this quantity, so
// residual targets are measured against it rather than the raw coefficients.
fn eval_scale(p: &Polynomial, x: f64) -> f64 {
    p.max_abs_coeff().max(1.0) * x.abs().max(1.0).powi(p.degree() as i32)
}

/// All distinct real roots of `p`, each refined until |p(root)| is below
/// tol times max(1, max |coeff|) times max(1, |root|)^degree, with
/// simple/multiple flags and Sturm-backed distinctness certification.
pub fn real_roots(p: &Polynomial, tol: f64) -> Result<RootSet, RootError> {
    if p.is_zero() {
        return Err(RootError::IdenticallyZero);
    }
    assert!(tol > 0.0, "real_roots needs tol > 0");
    if p.degree() == 0 {
        return Ok(RootSet::empty(true));
    }
    let (q, lambda) = equilibrate(&p.normalized());
    let bound = q.cauchy_root_bound();
    let chain = sturm_chain(&q);
    let gap_tol = DISTINCT_GAP_TOL * bound.max(1.0);
    let isolated = isolate(&chain, -bound - 1.0, bound + 1.0, gap_tol);

    // The chain terminates at (a multiple of) gcd(p, p'); a nonconstant tail
    // means p has repeated factors and its roots mark the multiple roots. A
    // root of p is repeated exactly when the gcd vanishes inside its isolation
    // interval, which the gcd's own chain decides by sign counting. Interval
    // endpoints are decisively off every root of p (the isolation splits
    // require it), hence off every root of the gcd, so no nudging is needed.
    let gcd = chain.last().unwrap();
    let gcd_chain = if gcd.degree() == 0 {
        None
    } else {
        Some(sturm_chain(gcd))
    };
    let mut set = RootSet::empty(true);
    let mut prev_x: Option<f64> = None;
    for iso in &isolated {
        let (xroot, _residual_norm) = refine(&chain, iso, tol)?;
        let root = lambda * xroot;
        let residual = p.eval(root).abs();
        let target = tol * eval_scale(p, root);
        if residual > target {
            return Err(RootError::NonConvergence { residual, target });
        }
        let repeated = gcd_chain.as_ref().is_some_and(|gc| {
            variations(gc, iso.lo) > variations(gc, iso.hi)
        });
        let simple = !iso.clustered && !repeated;
        // Newton polish may land two adjacent isolation intervals on the same
        // point; collapse such collisions instead of reporting fake pairs.
        if let Some(prev) = prev_x {
            if xroot - prev <= gap_tol {
                set.certified_distinct = false;
                if residual < *set.residuals.last().unwrap() {
                    *set.roots.last_mut().unwrap() = root;
                    *set.residuals.last_mut().unwrap() = residual;
                    *set.simple_flags.last_mut().unwrap() = false;
                    prev_x = Some(xroot);
                }
                continue;
            }
        }
        prev_x = Some(xroot);
        set.roots.push(root);
        set.simple_flags.push(simple);
        set.residuals.push(residual);
        if iso.clustered {
            set.certified_distinct = false;
        }
    }
    Ok(set)
}

/// Whether `x` is a simple root of `p`: |p'(x)| must exceed
/// tol × max(1, max |coeff of p'|). Errors if `x` is not a root at that scale.
pub fn is_simple_root(p: &Polynomial, x: f64, tol: f64) -> Result<bool, RootError> {
    if p.is_zero() {
        return Err(RootError::IdenticallyZero);
    }
    let residual = p.eval(x).abs();
    let bound = tol.max(DEFAULT_ROOT_TOL).sqrt() * p.max_abs_coeff().max(1.0);
    if residual > bound {
        return Err(RootError::NotARoot(x, residual));
    }
    let dp = p.derivative();
    Ok(dp.eval(x).abs() > tol * dp.max_abs_coeff().max(1.0))
}
