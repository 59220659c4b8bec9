//! The generalized Whitney map family and its solving machinery.
//!
//! Order k maps (t, t_1, ..., t_{k-1}) to (t^{k+1} + t_{k-1} t^{k-1} + ... +
//! t_1 t, t_1, ..., t_{k-1}). Solving w_k(t) = s pins the parameter slots to
//! the target's and leaves one univariate polynomial in t, so everything here
//! reduces to certified real-root work: solution counts, regular-point tests,
//! a perturbation constructor producing targets with the full k+1 solution
//! spread, a certified radius bound for solutions of small targets, and
//! region classifiers counting solutions across target boxes.

use crate::realroots::{real_roots, sturm_count, Polynomial, RootError};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

// Retry budgets for the perturbation constructor and the witness search.
const MAX_SHRINK: usize = 200;

#[derive(Debug, Error)]
pub enum WhitneyError {
    #[error("point has {got} parameter(s), a map of order {k} needs {expected}")]
    DimensionMismatch { k: usize, expected: usize, got: usize },
    #[error("perturbation search exhausted its budget at level {level} (eps = {eps:.3e})")]
    BudgetExhausted { level: usize, eps: f64 },
    #[error(transparent)]
    Root(#[from] RootError),
}

/// Point (t, t_1, ..., t_{k-1}) in the domain or target of an order-k map.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PointK {
    pub t: f64,
    pub params: Vec<f64>,
}

impl PointK {
    pub fn new(t: f64, params: Vec<f64>) -> Self {
        PointK { t, params }
    }

    pub fn origin(k: usize) -> Self {
        PointK {
            t: 0.0,
            params: vec![0.0; k - 1],
        }
    }

    pub fn dim(&self) -> usize {
        1 + self.params.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.push(self.t);
        v.extend_from_slice(&self.params);
        v
    }

    pub fn sup_norm(&self) -> f64 {
        self.to_vec().iter().fold(0.0, |m, &c| m.max(c.abs()))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct WhitneyMap {
    pub k: usize,
}

impl WhitneyMap {
    pub fn new(k: usize) -> Self {
        assert!(k >= 1, "map order must be at least 1");
        WhitneyMap { k }
    }

    fn check_dim(&self, p: &PointK) -> Result<(), WhitneyError> {
        if p.params.len() != self.k - 1 {
            return Err(WhitneyError::DimensionMismatch {
                k: self.k,
                expected: self.k - 1,
                got: p.params.len(),
            });
        }
        Ok(())
    }

    /// First coordinate t^{k+1} + t_{k-1} t^{k-1} + ... + t_1 t; the
    /// parameter slots pass through unchanged.
    pub fn eval(&self, p: &PointK) -> Result<PointK, WhitneyError> {
        self.check_dim(p)?;
        let mut first = p.t.powi(self.k as i32 + 1);
        for (j, &tj) in p.params.iter().enumerate() {
            first += tj * p.t.powi(j as i32 + 1);
        }
        Ok(PointK::new(first, p.params.clone()))
    }

    /// Partial derivative of the first coordinate in t:
    /// (k+1) t^k + sum_j j t_j t^{j-1}. The map is regular at p iff this is
    /// nonzero, since the parameter block of the Jacobian is the identity.
    pub fn d_first_dt(&self, p: &PointK) -> Result<f64, WhitneyError> {
        self.check_dim(p)?;
        let mut d = (self.k as f64 + 1.0) * p.t.powi(self.k as i32);
        for (j, &tj) in p.params.iter().enumerate() {
            let j1 = j as f64 + 1.0;
            d += j1 * tj * p.t.powi(j as i32);
        }
        Ok(d)
    }

    /// Univariate polynomial in t whose roots are exactly the t-coordinates
    /// of the solutions of w_k(t, params) = s.
    pub fn reduced_polynomial(&self, s: &PointK) -> Polynomial {
        let mut coeffs = vec![0.0; self.k + 2];
        coeffs[0] = -s.t;
        for (j, &sj) in s.params.iter().enumerate() {
            coeffs[j + 1] = sj;
        }
        coeffs[self.k + 1] = 1.0;
        Polynomial::new(coeffs)
    }

    /// All solutions of w_k(t) = s. Their count never exceeds k+1 because the
    /// reduced polynomial has degree k+1.
    pub fn solve(&self, s: &PointK, tol: f64) -> Result<SolveResult, WhitneyError> {
        self.check_dim(s)?;
        let p = self.reduced_polynomial(s);
        let rs = real_roots(&p, tol)?;
        let solutions: Vec<PointK> = rs
            .roots
            .iter()
            .map(|&r| PointK::new(r, s.params.clone()))
            .collect();
        Ok(SolveResult {
            solutions,
            regular: rs.simple_flags,
            residuals: rs.residuals,
            certified_distinct: rs.certified_distinct,
            target: s.clone(),
        })
    }

    /// Solution count and regular-solution count at one target.
    pub fn classify_region(&self, s: &PointK, tol: f64) -> Result<RegionVerdict, WhitneyError> {
        let res = self.solve(s, tol)?;
        Ok(RegionVerdict {
            s: s.clone(),
            count: res.solutions.len(),
            regular_count: res.regular.iter().filter(|&&r| r).count(),
        })
    }

    /// Solution-count verdicts on a regular grid over an axis-aligned box in
    /// target space, row-major with the first axis slowest. Cells evaluate in
    /// parallel; the merge order is fixed by the index map, so output is
    /// deterministic for fixed inputs.
    pub fn region_grid(
        &self,
        bounds: &AxisBox,
        resolution: usize,
        tol: f64,
    ) -> Result<Vec<RegionVerdict>, WhitneyError> {
        assert!(resolution >= 2, "grid needs at least 2 points per axis");
        assert_eq!(bounds.lo.len(), self.k, "box dimension must equal k");
        let total = resolution.pow(self.k as u32);
        (0..total)
            .into_par_iter()
            .map(|idx| {
                let mut rem = idx;
                let mut coords = vec![0.0; self.k];
                for axis in (0..self.k).rev() {
                    let i = rem % resolution;
                    rem /= resolution;
                    let span = bounds.hi[axis] - bounds.lo[axis];
                    coords[axis] =
                        bounds.lo[axis] + span * i as f64 / (resolution - 1) as f64;
                }
                let s = PointK::new(coords[0], coords[1..].to_vec());
                self.classify_region(&s, tol)
            })
            .collect()
    }
}

/// Solutions of one target, with per-solution regularity and residuals.
#[derive(Clone, Debug, Serialize)]
pub struct SolveResult {
    pub solutions: Vec<PointK>,
    pub regular: Vec<bool>,
    pub residuals: Vec<f64>,
    pub certified_distinct: bool,
    pub target: PointK,
}

/// Target point with its solution count and regular-solution count.
#[derive(Clone, Debug, Serialize)]
pub struct RegionVerdict {
    pub s: PointK,
    pub count: usize,
    pub regular_count: usize,
}

/// CSV serialization of a grid of verdicts: header `s_0,...,s_{k-1},count,regular_count`,
/// one row per cell, shortest round-trip float formatting.
pub fn region_csv(verdicts: &[RegionVerdict], k: usize) -> String {
    let mut out = String::new();
    for i in 0..k {
        out.push_str(&format!("s_{i},"));
    }
    out.push_str("count,regular_count\n");
    for v in verdicts {
        for c in v.s.to_vec() {
            out.push_str(&format!("{c},"));
        }
        out.push_str(&format!("{},{}\n", v.count, v.regular_count));
    }
    out
}

/// Nondegenerate axis-aligned box, one (lo, hi) pair per target coordinate.
#[derive(Clone, Debug)]
pub struct AxisBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl AxisBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        assert!(
            lo.iter().zip(hi.iter()).all(|(a, b)| a < b),
            "box must be nondegenerate"
        );
        AxisBox { lo, hi }
    }

    /// The same interval on every one of `k` axes.
    pub fn cube(k: usize, lo: f64, hi: f64) -> Self {
        AxisBox::new(vec![lo; k], vec![hi; k])
    }
}

/// Coefficients alpha_0..alpha_{k-1} with 0 < |alpha_i| < eps such that
/// x^{k+1} + alpha_{k-1} x^{k-1} + ... + alpha_1 x + alpha_0 has exactly k+1
/// distinct real roots, all nonzero and inside (-k sqrt(eps), k sqrt(eps)).
#[derive(Clone, Debug, Serialize)]
pub struct PerturbationCoeffs {
    pub alphas: Vec<f64>,
    pub eps: f64,
    pub roots: Vec<f64>,
}

fn spread_poly(alphas: &[f64]) -> Polynomial {
    // x^{k+1} + alpha_{k-1} x^{k-1} + ... + alpha_0: no x^k term
    let k = alphas.len();
    let mut coeffs = vec![0.0; k + 2];
    coeffs[..k].copy_from_slice(alphas);
    coeffs[k + 1] = 1.0;
    Polynomial::new(coeffs)
}

// Certifies the level invariants: exactly level+1 distinct real roots, all
// nonzero, all strictly inside (-level sqrt(eps), level sqrt(eps)), and the
// Sturm count over that interval agrees.
fn certify_level(alphas: &[f64], eps: f64, tol: f64) -> Option<Vec<f64>> {
    let level = alphas.len();
    let p = spread_poly(alphas);
    let bound = level as f64 * eps.sqrt();
    let rs = real_roots(&p, tol).ok()?;
    if rs.roots.len() != level + 1 || !rs.certified_distinct {
        return None;
    }
    if !rs.roots.iter().all(|&r| r != 0.0 && r.abs() < bound) {
        return None;
    }
    if sturm_count(&p, -bound, bound).ok()? != level + 1 {
        return None;
    }
    Some(rs.roots)
}

/// Builds coefficients whose polynomial achieves the full k+1 spread of
/// distinct real roots near 0, by induction on the order: the base level uses
/// a small negative constant term, and each step multiplies the polynomial by
/// x (adding the root 0) and then shifts by a constant small enough to keep
/// all roots real, distinct, and nonzero. The shift is shrunk geometrically
/// until root certification passes.
pub fn construct_full_spread(k: usize, eps: f64) -> Result<PerturbationCoeffs, WhitneyError> {
    assert!(k >= 1 && eps > 0.0, "need k >= 1 and eps > 0");
    let tol = 1e-12;
    let mut alphas = vec![-eps / 2.0];
    let mut roots = certify_level(&alphas, eps, tol)
        .ok_or(WhitneyError::BudgetExhausted { level: 1, eps })?;

    for level in 2..=k {
        // Multiplying by x adds the root 0; the constant shift then splits it
        // off into a fresh nonzero root while nudging the others. Rather than
        // guessing the shift directly, pick where the fresh root should land
        // (halfway from 0 to the nearest existing root, on the roomier side)
        // and read the shift off the polynomial: q(x0) + beta = 0 places a
        // root at exactly x0. Halving x0 on certification failure keeps the
        // configuration balanced; a greedy largest-shift search instead
        // parks each fresh root against a neighbour and collapses the
        // admissible shift range doubly fast over the levels.
        let prev = spread_poly(&alphas);
        let d_neg = roots
            .iter()
            .filter(|&&r| r < 0.0)
            .fold(f64::INFINITY, |m, &r| m.min(-r));
        let d_pos = roots
            .iter()
            .filter(|&&r| r > 0.0)
            .fold(f64::INFINITY, |m, &r| m.min(r));
        let mut x0 = if d_pos >= d_neg { d_pos / 2.0 } else { -d_neg / 2.0 };
        let mut placed = false;
        for _ in 0..MAX_SHRINK {
            let beta = -x0 * prev.eval(x0);
            if beta != 0.0 && beta.abs() < eps {
                let mut next = Vec::with_capacity(level);
                next.push(beta);
                next.extend_from_slice(&alphas);
                if let Some(r) = certify_level(&next, eps, tol) {
                    alphas = next;
                    roots = r;
                    placed = true;
                    break;
                }
            }
            x0 *= 0.5;
        }
        if !placed {
            return Err(WhitneyError::BudgetExhausted { level, eps });
        }
    }
    Ok(PerturbationCoeffs { alphas, eps, roots })
}

/// Certified solution radius for small targets: every solution of
/// w_k(t) = s with all |s_i| < eps has |t| below the returned `rho`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RhoBound {
    pub rho: f64,
    pub rough: f64,
}

/// Radius bound for solutions of targets inside the eps sup-ball. The sharp
/// part inverts the increasing function g(t) = t^{k+1} / (t^{k-1} + ... + 1)
/// by bisection; `rough` is the closed form max((k eps)^{1/2}, (k eps)^{1/(k+1)}),
/// and the returned bound is their minimum, so it never exceeds either.
pub fn rho_bound(k: usize, eps: f64) -> RhoBound {
    assert!(k >= 1 && eps > 0.0, "need k >= 1 and eps > 0");
    let ke = k as f64 * eps;
    let rough = ke.sqrt().max(ke.powf(1.0 / (k as f64 + 1.0)));
    let g = |t: f64| {
        let denom: f64 = (0..k).map(|i| t.powi(i as i32)).sum();
        t.powi(k as i32 + 1) / denom
    };
    // g is increasing on t > 0 and g(rough) >= eps, so the bracket is valid
    let (mut lo, mut hi) = (0.0, rough);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) < eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    RhoBound {
        rho: hi.min(rough),
        rough,
    }
}

/// Finds a target s with sup norm below `delta_v` whose solution set has the
/// maximal size k+1, all solutions regular and inside the `delta_u` sup-ball
/// of the origin. The target is assembled from [`construct_full_spread`]
/// coefficients: s = (-alpha_0, alpha_1, ..., alpha_{k-1}), which makes the
/// reduced polynomial equal to the constructed one exactly.
pub fn witness_max_multiplicity(
    k: usize,
    delta_u: f64,
    delta_v: f64,
) -> Result<(PointK, SolveResult), WhitneyError> {
    assert!(delta_u > 0.0 && delta_v > 0.0, "radii must be positive");
    let w = WhitneyMap::new(k);
    // containment: k sqrt(eps) <= delta_u / (2 sqrt(2)) and eps <= delta_v / 2
    let cap = delta_u / (2.0 * k as f64);
    let mut eps = 0.5 * delta_v.min(cap * cap);
    for _ in 0..MAX_SHRINK {
        let pc = construct_full_spread(k, eps)?;
        let s_hat = PointK::new(-pc.alphas[0], pc.alphas[1..].to_vec());
        let res = w.solve(&s_hat, 1e-12)?;
        let ok = res.solutions.len() == k + 1
            && res.certified_distinct
            && res.regular.iter().all(|&r| r)
            && res.solutions.iter().all(|p| p.sup_norm() < delta_u)
            && s_hat.sup_norm() < delta_v;
        if ok {
            return Ok((s_hat, res));
        }
        eps *= 0.5;
    }
    Err(WhitneyError::BudgetExhausted { level: k, eps })
}
