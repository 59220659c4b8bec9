//! Finite-dimensional smooth-map oracle: evaluation, symmetric multilinear
//! derivative queries up to order 5, kernel and cokernel extraction at a
//! simple singular point, range-membership tests against the cokernel
//! functional, and the bordered linear solver that underlies every chain
//! solve in the classification pipeline.
//!
//! Derivatives come either from exact per-order callbacks (polynomial
//! oracles, discretized operators with analytic jets) or from symmetric
//! finite differences. The finite-difference path uses the sign-polarization
//! stencil, which is symmetric in the directions by construction, with one
//! Richardson extrapolation level on top.

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use std::sync::Arc;
use thiserror::Error;

/// Highest supported derivative order.
pub const MAX_JET_ORDER: usize = 5;
/// A point is singular when sigma_min is below this times max(1, sigma_max).
pub const KERNEL_TOL: f64 = 1e-8;
/// One-dimensional kernel requires sigma_second above both of these factors
/// (times sigma_min and sigma_max respectively) and above the kernel
/// tolerance itself.
pub const SIMPLE_SEP_FACTOR: f64 = 1e3;
pub const SIMPLE_ABS_FACTOR: f64 = 1e-6;
/// Default range-membership tolerance on the normalized cokernel margin.
pub const RANGE_IN_TOL: f64 = 1e-8;
/// Margins above this are decisively outside the range; the band between the
/// two tolerances is a gray zone that callers must treat as undecided.
pub const RANGE_OUT_TOL: f64 = 1e-4;
/// Condition-number ceiling for the bordered solver.
pub const BORDERED_COND_LIMIT: f64 = 1e12;

#[derive(Debug, Error)]
pub enum OpError {
    #[error("derivative order {0} unsupported (valid orders are 1..{MAX_JET_ORDER})")]
    OrderUnsupported(usize),
    #[error("finite-difference step underflowed at order {order}")]
    StepUnderflow { order: usize },
    #[error("not singular: smallest singular value {sigma_min:.3e} exceeds {threshold:.3e}")]
    NotSingular { sigma_min: f64, threshold: f64 },
    #[error("kernel not one-dimensional: second singular value {sigma_second:.3e} is under {threshold:.3e}")]
    NotSimple { sigma_second: f64, threshold: f64 },
    #[error("right-hand side is outside the derivative's range (margin {margin:.3e})")]
    NotInRange { margin: f64 },
    #[error("bordered system condition {cond:.3e} exceeds {limit:.3e}")]
    IllConditioned { cond: f64, limit: f64 },
    #[error("vector has dimension {got}, oracle expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown oracle name '{0}' (expected wk:<k>, fn:<k>:<n>, or poly:<file>)")]
    UnknownOracle(String),
    #[error("bad polynomial oracle spec: {0}")]
    BadOracleSpec(String),
}

type EvalFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
type JetFn = Arc<dyn Fn(&[f64], usize, &[Vec<f64>]) -> Option<Vec<f64>> + Send + Sync>;

/// Smooth map from R^n to R^n exposed through evaluation and derivative
/// queries. Immutable and shareable across threads; every query is pure.
#[derive(Clone)]
pub struct MapOracle {
    dim: usize,
    eval: EvalFn,
    exact_jet: Option<JetFn>,
}

impl MapOracle {
    /// Oracle with derivatives approximated by finite differences.
    pub fn from_fn<F>(dim: usize, eval: F) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        MapOracle {
            dim,
            eval: Arc::new(eval),
            exact_jet: None,
        }
    }

    /// Oracle with an exact derivative callback: jet(u, m, dirs) must return
    /// the symmetric m-linear derivative applied to the m directions.
    pub fn with_exact_jets<F, J>(dim: usize, eval: F, jet: J) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        J: Fn(&[f64], usize, &[Vec<f64>]) -> Vec<f64> + Send + Sync + 'static,
    {
        MapOracle {
            dim,
            eval: Arc::new(eval),
            exact_jet: Some(Arc::new(move |u: &[f64], m, dirs: &[Vec<f64>]| {
                Some(jet(u, m, dirs))
            })),
        }
    }

    /// Like [`with_exact_jets`](Self::with_exact_jets), but the callback may
    /// decline a query by returning None, in which case the derivative is
    /// approximated by finite differences of the evaluation. Discretized
    /// operators use this when higher-order data is only available at
    /// specific base points.
    pub fn with_partial_jets<F, J>(dim: usize, eval: F, jet: J) -> Self
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        J: Fn(&[f64], usize, &[Vec<f64>]) -> Option<Vec<f64>> + Send + Sync + 'static,
    {
        MapOracle {
            dim,
            eval: Arc::new(eval),
            exact_jet: Some(Arc::new(jet)),
        }
    }

    /// Polynomial oracle with exact tensor-structured jets.
    pub fn poly(spec: PolySpec) -> Result<Self, OpError> {
        spec.validate()?;
        let dim = spec.dim;
        let eval_spec = spec.clone();
        let jet_spec = spec;
        Ok(MapOracle {
            dim,
            eval: Arc::new(move |u: &[f64]| eval_spec.eval(u)),
            exact_jet: Some(Arc::new(move |u: &[f64], m: usize, dirs: &[Vec<f64>]| {
                Some(jet_spec.jet(u, m, dirs))
            })),
        })
    }

    /// The order-k Whitney map as a polynomial oracle on R^k.
    pub fn whitney(k: usize) -> Self {
        assert!(k >= 1);
        let mut components = Vec::with_capacity(k);
        let mut first = vec![Monomial {
            exps: unit_exps(k, 0, k as u32 + 1),
            coeff: 1.0,
        }];
        for j in 1..k {
            let mut exps = vec![0u32; k];
            exps[0] = j as u32;
            exps[j] = 1;
            first.push(Monomial { exps, coeff: 1.0 });
        }
        components.push(first);
        for j in 1..k {
            components.push(vec![Monomial {
                exps: unit_exps(k, j, 1),
                coeff: 1.0,
            }]);
        }
        MapOracle::poly(PolySpec {
            dim: k,
            components,
        })
        .expect("whitney oracle spec is always valid")
    }

    /// The unfolding family on R^{k+1} whose first coordinate is
    /// t^n + t_k t^k + ... + t_1 t (the t^n term is absent when n = 0) and
    /// whose remaining coordinates pass the parameters through. These are
    /// the standard fixtures for transversality classification: the origin is
    /// k-transverse exactly when n = 0 or n >= k+3.
    pub fn monomial_family(k: usize, n: usize) -> Self {
        assert!(k >= 1);
        let dim = k + 1;
        let mut components = Vec::with_capacity(dim);
        let mut first = Vec::new();
        if n >= 1 {
            first.push(Monomial {
                exps: unit_exps(dim, 0, n as u32),
                coeff: 1.0,
            });
        }
        for j in 1..=k {
            let mut exps = vec![0u32; dim];
            exps[0] = j as u32;
            exps[j] = 1;
            first.push(Monomial { exps, coeff: 1.0 });
        }
        components.push(first);
        for j in 1..=k {
            components.push(vec![Monomial {
                exps: unit_exps(dim, j, 1),
                coeff: 1.0,
            }]);
        }
        MapOracle::poly(PolySpec { dim, components })
            .expect("family oracle spec is always valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_exact_jets(&self) -> bool {
        self.exact_jet.is_some()
    }

    pub fn eval(&self, u: &[f64]) -> Result<Vec<f64>, OpError> {
        if u.len() != self.dim {
            return Err(OpError::DimensionMismatch {
                expected: self.dim,
                got: u.len(),
            });
        }
        Ok((self.eval)(u))
    }
}

fn unit_exps(dim: usize, at: usize, e: u32) -> Vec<u32> {
    let mut exps = vec![0u32; dim];
    exps[at] = e;
    exps
}

/// One term coeff * prod u_i^{exps_i} of a polynomial component.
#[derive(Clone, Debug, Deserialize)]
pub struct Monomial {
    pub exps: Vec<u32>,
    pub coeff: f64,
}

/// Polynomial map specification: one monomial list per output component.
#[derive(Clone, Debug, Deserialize)]
pub struct PolySpec {
    pub dim: usize,
    pub components: Vec<Vec<Monomial>>,
}

impl PolySpec {
    fn validate(&self) -> Result<(), OpError> {
        if self.dim == 0 {
            return Err(OpError::BadOracleSpec("dim must be positive".into()));
        }
        if self.components.len() != self.dim {
            return Err(OpError::BadOracleSpec(format!(
                "{} components for dimension {}",
                self.components.len(),
                self.dim
            )));
        }
        for comp in &self.components {
            for mono in comp {
                if mono.exps.len() != self.dim {
                    return Err(OpError::BadOracleSpec(format!(
                        "monomial exponent vector of length {} in dimension {}",
                        mono.exps.len(),
                        self.dim
                    )));
                }
            }
        }
        Ok(())
    }

    fn eval(&self, u: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|comp| {
                comp.iter()
                    .map(|m| {
                        m.coeff
                            * m.exps
                                .iter()
                                .zip(u)
                                .map(|(&e, &x)| x.powi(e as i32))
                                .product::<f64>()
                    })
                    .sum()
            })
            .collect()
    }

    fn jet(&self, u: &[f64], m: usize, dirs: &[Vec<f64>]) -> Vec<f64> {
        self.components
            .iter()
            .map(|comp| {
                comp.iter()
                    .map(|mono| {
                        let mut exps = mono.exps.clone();
                        mono_jet(mono.coeff, &mut exps, u, &dirs[..m])
                    })
                    .sum()
            })
            .collect()
    }
}

// Exact directional derivative of a single monomial: peel directions one at
// a time, differentiating in every coordinate the exponent allows.
fn mono_jet(coeff: f64, exps: &mut [u32], u: &[f64], dirs: &[Vec<f64>]) -> f64 {
    match dirs.split_last() {
        None => {
            coeff
                * exps
                    .iter()
                    .zip(u)
                    .map(|(&e, &x)| x.powi(e as i32))
                    .product::<f64>()
        }
        Some((d, rest)) => {
            let mut sum = 0.0;
            for j in 0..u.len() {
                if exps[j] > 0 && d[j] != 0.0 {
                    let c = coeff * exps[j] as f64;
                    exps[j] -= 1;
                    sum += d[j] * mono_jet(c, exps, u, rest);
                    exps[j] += 1;
                }
            }
            sum
        }
    }
}

// Step ladder for finite differences: start at a quarter of the point scale
// and halve toward the classical optimum eps^(1/(m+2)), extrapolating in h^2
// and keeping the tableau entry with the smallest error indicator. Large
// steps matter: at order 5 the roundoff floor of any single near-optimal
// step is about 3e-5 relative, while the stencil at h ~ 0.1 is exact for
// polynomial maps and extrapolation recovers smooth maps to near machine
// precision.
const LADDER_TOP_FRACTION: f64 = 0.25;
const MAX_RUNGS: usize = 12;
const STOP_WORSEN_FACTOR: f64 = 2.0;

/// Symmetric m-linear derivative F^{(m)}(u)[dirs]. Exact when the oracle has
/// a jet callback; otherwise a sign-polarization central difference stencil,
/// which is symmetric in the directions by construction, extrapolated over
/// the step ladder. A single step is used within each stencil (a per-level
/// step cascade would divide machine noise by the product of all steps and
/// destroy high orders).
pub fn dirderiv(
    f: &MapOracle,
    u: &[f64],
    m: usize,
    dirs: &[Vec<f64>],
) -> Result<Vec<f64>, OpError> {
    if m == 0 || m > MAX_JET_ORDER {
        return Err(OpError::OrderUnsupported(m));
    }
    if u.len() != f.dim {
        return Err(OpError::DimensionMismatch {
            expected: f.dim,
            got: u.len(),
        });
    }
    if dirs.len() != m {
        return Err(OpError::DimensionMismatch {
            expected: m,
            got: dirs.len(),
        });
    }
    for d in dirs {
        if d.len() != f.dim {
            return Err(OpError::DimensionMismatch {
                expected: f.dim,
                got: d.len(),
            });
        }
    }
    if let Some(jet) = &f.exact_jet {
        if let Some(v) = jet(u, m, dirs) {
            return Ok(v);
        }
    }

    // multilinearity: work with unit directions, scale the result back
    let norms: Vec<f64> = dirs
        .iter()
        .map(|d| d.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    if norms.iter().any(|&n| n == 0.0) {
        return Ok(vec![0.0; f.dim]);
    }
    let units: Vec<Vec<f64>> = dirs
        .iter()
        .zip(&norms)
        .map(|(d, &n)| d.iter().map(|x| x / n).collect())
        .collect();
    let scale_u = u.iter().fold(1.0f64, |s, &x| s.max(x.abs()));
    let h_floor = f64::EPSILON.powf(1.0 / (m as f64 + 2.0)) * scale_u;
    let h_top = LADDER_TOP_FRACTION * scale_u;
    if h_top < f64::MIN_POSITIVE * 1e16 {
        return Err(OpError::StepUnderflow { order: m });
    }

    // Romberg tableau in h^2 over the ladder. tableau[i] holds the best
    // extrapolant of column i so far; the error indicator of an entry is its
    // distance to both parents. Stop once roundoff makes new rows worse.
    let mut tableau: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut best: Vec<f64> = Vec::new();
    let mut best_err = f64::INFINITY;
    let mut h = h_top;
    for rung in 0..MAX_RUNGS {
        let mut row = vec![polarized_diff(f, u, &units, h)];
        let prev = tableau.last();
        if let Some(prev) = prev {
            let mut pow4 = 1.0;
            for i in 0..prev.len() {
                pow4 *= 4.0;
                let upper = &prev[i];
                let lower = &row[i];
                let entry: Vec<f64> = lower
                    .iter()
                    .zip(upper)
                    .map(|(&lo, &up)| (pow4 * lo - up) / (pow4 - 1.0))
                    .collect();
                let err = sup_dist(&entry, lower).max(sup_dist(&entry, upper));
                if err < best_err {
                    best_err = err;
                    best = entry.clone();
                }
                row.push(entry);
            }
            let row_best = row
                .windows(2)
                .map(|w| sup_dist(&w[0], &w[1]))
                .fold(f64::INFINITY, f64::min);
            if rung >= 3 && row_best > STOP_WORSEN_FACTOR * best_err {
                break;
            }
        } else {
            best = row[0].clone();
        }
        tableau.push(row);
        h /= 2.0;
        if h < 0.99 * h_floor {
            break;
        }
    }

    let factor: f64 = norms.iter().product();
    Ok(best.iter().map(|&x| factor * x).collect())
}

fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// Central polarization stencil: sum over all sign patterns of
// (prod eps_i) F(u + (h/2) sum eps_i d_i) / h^m. Symmetric in the directions
// by construction, with error O(h^2).
fn polarized_diff(f: &MapOracle, u: &[f64], dirs: &[Vec<f64>], h: f64) -> Vec<f64> {
    let m = dirs.len();
    let n = f.dim;
    let mut acc = vec![0.0; n];
    let mut point = vec![0.0; n];
    for mask in 0u32..(1 << m) {
        point.copy_from_slice(u);
        let mut neg_count = 0;
        for (i, d) in dirs.iter().enumerate() {
            let eps = if mask & (1 << i) != 0 {
                1.0
            } else {
                neg_count += 1;
                -1.0
            };
            for j in 0..n {
                point[j] += eps * 0.5 * h * d[j];
            }
        }
        let sign = if neg_count % 2 == 0 { 1.0 } else { -1.0 };
        let val = (f.eval)(&point);
        for j in 0..n {
            acc[j] += sign * val[j];
        }
    }
    let hm = h.powi(m as i32);
    acc.iter_mut().for_each(|x| *x /= hm);
    acc
}

/// Kernel and cokernel data of F'(u0) at a simple singular point: unit
/// kernel vector, unit cokernel functional, the separating singular values,
/// and the Jacobian itself for later solves.
#[derive(Clone, Debug)]
pub struct KernelData {
    pub n0: DVector<f64>,
    pub psi0: DVector<f64>,
    pub sigma_min: f64,
    pub sigma_second: f64,
    pub sigma_max: f64,
    pub jacobian: DMatrix<f64>,
}

// One-sided Jacobi: orthogonalize the columns of a by plane rotations,
// accumulating them into v, so that a*v = u*diag(sigma) on exit. Returns the
// singular values in descending order with the columns of v permuted to
// match. Right singular vectors come out of rotations alone, so a zero
// column (exact kernel) costs no accuracy, and unlike bidiagonalization
// iterations the sweep converges unconditionally. Quadratic cost per sweep
// is irrelevant at the dimensions this module serves.
pub(crate) fn jacobi_right_singular(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.ncols();
    let mut w = a.clone();
    let mut v = DMatrix::identity(n, n);
    for _sweep in 0..60 {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let ci = w.column(i);
                let cj = w.column(j);
                let aa = ci.dot(&ci);
                let bb = cj.dot(&cj);
                let g = ci.dot(&cj);
                if g.abs() <= f64::EPSILON * (aa * bb).sqrt() || g == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (bb - aa) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for row in 0..w.nrows() {
                    let wi = w[(row, i)];
                    let wj = w[(row, j)];
                    w[(row, i)] = c * wi - s * wj;
                    w[(row, j)] = s * wi + c * wj;
                }
                for row in 0..n {
                    let vi = v[(row, i)];
                    let vj = v[(row, j)];
                    v[(row, i)] = c * vi - s * vj;
                    v[(row, j)] = s * vi + c * vj;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let sigmas: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    order.sort_by(|&x, &y| sigmas[y].partial_cmp(&sigmas[x]).unwrap());
    let sorted: Vec<f64> = order.iter().map(|&j| sigmas[j]).collect();
    let mut vp = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vp.set_column(dst, &v.column(src));
    }
    (sorted, vp)
}

/// Assembles F'(u0) column by column and extracts the singular pair. Errors
/// when the point is not singular (sigma_min too large) or the kernel is not
/// one-dimensional (sigma_second under its threshold). Signs are fixed by
/// making the largest-magnitude component of n0 and psi0 positive.
pub fn kernel_cokernel(f: &MapOracle, u0: &[f64], tol: f64) -> Result<KernelData, OpError> {
    let n = f.dim;
    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = dirderiv(f, u0, 1, std::slice::from_ref(&e))?;
        for i in 0..n {
            a[(i, j)] = col[i];
        }
    }
    // kernel from the columns of A, cokernel from the columns of A^T; both
    // are right singular vectors of their matrix, which the Jacobi sweep
    // delivers without normalizing any near-zero column
    let (sv, v) = jacobi_right_singular(&a);
    let (_, v_left) = jacobi_right_singular(&a.transpose());
    let sigma_max = sv[0];
    let sigma_min = sv[n - 1];
    let sigma_second = if n >= 2 { sv[n - 2] } else { f64::INFINITY };

    let sing_threshold = tol * sigma_max.max(1.0);
    if sigma_min > sing_threshold {
        return Err(OpError::NotSingular {
            sigma_min,
            threshold: sing_threshold,
        });
    }
    let simple_threshold = (SIMPLE_SEP_FACTOR * sigma_min)
        .max(SIMPLE_ABS_FACTOR * sigma_max)
        .max(sing_threshold);
    if sigma_second <= simple_threshold {
        return Err(OpError::NotSimple {
            sigma_second,
            threshold: simple_threshold,
        });
    }

    let mut n0 = v.column(n - 1).into_owned();
    let mut psi0 = v_left.column(n - 1).into_owned();
    fix_sign(&mut n0);
    fix_sign(&mut psi0);
    Ok(KernelData {
        n0,
        psi0,
        sigma_min,
        sigma_second,
        sigma_max,
        jacobian: a,
    })
}

fn fix_sign(v: &mut DVector<f64>) {
    let mut idx = 0;
    let mut best = 0.0;
    for (i, &x) in v.iter().enumerate() {
        if x.abs() > best {
            best = x.abs();
            idx = i;
        }
    }
    if v[idx] < 0.0 {
        v.neg_mut();
    }
}

/// Range-membership verdict for a vector against the cokernel functional.
#[derive(Clone, Copy, Debug)]
pub struct RangeTest {
    /// |psi0 . w| before normalization; scales linearly with w, which the
    /// normalized margin does not, so scaling checks read this field.
    pub raw: f64,
    /// |psi0 . w| / max(1, ||w||)
    pub margin: f64,
    pub in_range: bool,
}

/// Tests w for membership in R(F'(u0)): the cokernel functional vanishes on
/// the range and nowhere else, so the normalized margin decides.
pub fn range_test(kd: &KernelData, w: &[f64], tol: f64) -> RangeTest {
    let wv = DVector::from_column_slice(w);
    let raw = kd.psi0.dot(&wv).abs();
    let margin = raw / wv.norm().max(1.0);
    RangeTest {
        raw,
        margin,
        in_range: margin <= tol,
    }
}

/// Solves F'(u0) x = b through the bordered system
/// [A psi0; n0^T 0] (x, lambda) = (b, 0), which is nonsingular whenever the
/// kernel is one-dimensional: the psi0 column absorbs the out-of-range part
/// of b, and the n0 row pins the representative with zero kernel component.
/// Requires b to pass the range test; the gray-zone-free variant for
/// arbitrary b is [`bordered_solve_relaxed`].
pub fn bordered_solve(kd: &KernelData, b: &[f64]) -> Result<Vec<f64>, OpError> {
    let rt = range_test(kd, b, RANGE_IN_TOL);
    if !rt.in_range {
        return Err(OpError::NotInRange { margin: rt.margin });
    }
    let (x, _lambda) = bordered_solve_relaxed(kd, b)?;
    Ok(x)
}

/// Solves the bordered system without the range precondition, returning both
/// the representative x (zero n0 component) and the multiplier lambda, which
/// equals the psi0 coefficient removed from b. For b in the range lambda is
/// numerically zero and x solves F'(u0) x = b.
///
/// Convenience wrapper that factors the system for a single right-hand side;
/// callers with many solves at one kernel point should hold a
/// [`BorderedSolver`] instead.
pub fn bordered_solve_relaxed(kd: &KernelData, b: &[f64]) -> Result<(Vec<f64>, f64), OpError> {
    BorderedSolver::new(kd)?.solve(b)
}

/// Factored form of the bordered matrix [A psi0; n0^T 0], reusable across
/// right-hand sides at a fixed kernel point. Construction pays the
/// conditioning check and the LU factorization once; each solve afterwards is
/// just the two triangular sweeps.
pub struct BorderedSolver {
    lu: nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    cond: f64,
    n: usize,
}

impl BorderedSolver {
    pub fn new(kd: &KernelData) -> Result<Self, OpError> {
        let n = kd.jacobian.nrows();
        let mut m = DMatrix::zeros(n + 1, n + 1);
        m.view_mut((0, 0), (n, n)).copy_from(&kd.jacobian);
        for i in 0..n {
            m[(i, n)] = kd.psi0[i];
            m[(n, i)] = kd.n0[i];
        }
        let (sv, _) = jacobi_right_singular(&m);
        let cond = sv[0] / sv[n].max(f64::MIN_POSITIVE);
        if cond > BORDERED_COND_LIMIT {
            return Err(OpError::IllConditioned {
                cond,
                limit: BORDERED_COND_LIMIT,
            });
        }
        Ok(BorderedSolver { lu: m.lu(), cond, n })
    }

    pub fn cond(&self) -> f64 {
        self.cond
    }

    /// See [`bordered_solve_relaxed`]; identical contract per solve.
    pub fn solve(&self, b: &[f64]) -> Result<(Vec<f64>, f64), OpError> {
        if b.len() != self.n {
            return Err(OpError::DimensionMismatch {
                expected: self.n,
                got: b.len(),
            });
        }
        let mut rhs = DVector::zeros(self.n + 1);
        for i in 0..self.n {
            rhs[i] = b[i];
        }
        let sol = self.lu.solve(&rhs).ok_or(OpError::IllConditioned {
            cond: self.cond,
            limit: BORDERED_COND_LIMIT,
        })?;
        let x = sol.rows(0, self.n).iter().copied().collect();
        Ok((x, sol[self.n]))
    }
}

/// Builtin oracle lookup: `wk:<k>` (Whitney maps), `fn:<k>:<n>` (unfolding
/// family), `poly:<file.json>` (polynomial map from a PolySpec file).
pub fn oracle_by_name(name: &str) -> Result<MapOracle, OpError> {
    if let Some(rest) = name.strip_prefix("wk:") {
        let k: usize = rest
            .parse()
            .map_err(|_| OpError::UnknownOracle(name.into()))?;
        if k == 0 {
            return Err(OpError::UnknownOracle(name.into()));
        }
        return Ok(MapOracle::whitney(k));
    }
    if let Some(rest) = name.strip_prefix("fn:") {
        let mut parts = rest.splitn(2, ':');
        let k = parts
            .next()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| OpError::UnknownOracle(name.into()))?;
        let n = parts
            .next()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| OpError::UnknownOracle(name.into()))?;
        if k == 0 {
            return Err(OpError::UnknownOracle(name.into()));
        }
        return Ok(MapOracle::monomial_family(k, n));
    }
    if let Some(path) = name.strip_prefix("poly:") {
        let text = std::fs::read_to_string(path)
            .map_err(|e| OpError::BadOracleSpec(format!("cannot read {path}: {e}")))?;
        let spec: PolySpec = serde_json::from_str(&text)
            .map_err(|e| OpError::BadOracleSpec(format!("{path}: {e}")))?;
        return MapOracle::poly(spec);
    }
    Err(OpError::UnknownOracle(name.into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn linear_oracle(diag: Vec<f64>) -> MapOracle {
        let n = diag.len();
        MapOracle::from_fn(n, move |u: &[f64]| {
            u.iter().zip(&diag).map(|(x, d)| d * x).collect()
        })
    }

    #[test]
    fn second_derivative_of_square() {
        let f = MapOracle::from_fn(1, |u: &[f64]| vec![u[0] * u[0]]);
        let d = dirderiv(&f, &[0.0], 2, &[vec![1.0], vec![1.0]]).unwrap();
        assert_relative_eq!(d[0], 2.0, max_relative = 1e-9);
    }

    #[test]
    fn whitney_mixed_second_derivative() {
        // first coordinate t^3 + t_1 t: cross derivative in (t, t_1) is 1
        let f = MapOracle::whitney(2);
        let d = dirderiv(&f, &[0.0, 0.0], 2, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(d, vec![1.0, 0.0]);
    }

    #[test]
    fn jets_are_symmetric_in_directions() {
        let f = MapOracle::from_fn(2, |u: &[f64]| {
            vec![u[0] * u[0] * u[1] + u[1].powi(3), u[0] * u[1]]
        });
        let dirs = [
            vec![0.3, -0.7],
            vec![1.1, 0.2],
            vec![-0.5, 0.9],
        ];
        let base = dirderiv(&f, &[0.4, -0.2], 3, &dirs.to_vec()).unwrap();
        let perms: [[usize; 3]; 5] = [
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        for p in perms {
            let permuted: Vec<Vec<f64>> = p.iter().map(|&i| dirs[i].clone()).collect();
            let d = dirderiv(&f, &[0.4, -0.2], 3, &permuted).unwrap();
            for (a, b) in base.iter().zip(&d) {
                assert!(
                    (a - b).abs() <= 1e-6 * a.abs().max(1.0),
                    "{a} vs {b} under permutation {p:?}"
                );
            }
        }
    }

    #[test]
    fn order_bounds_are_enforced() {
        let f = MapOracle::from_fn(1, |u: &[f64]| vec![u[0]]);
        assert!(matches!(
            dirderiv(&f, &[0.0], 6, &vec![vec![1.0]; 6]),
            Err(OpError::OrderUnsupported(6))
        ));
        assert!(matches!(
            dirderiv(&f, &[0.0], 0, &[]),
            Err(OpError::OrderUnsupported(0))
        ));
    }

    #[test]
    fn kernel_of_singular_diagonal() {
        let f = linear_oracle(vec![0.0, 1.0, 1.0]);
        let kd = kernel_cokernel(&f, &[0.0; 3], KERNEL_TOL).unwrap();
        assert!(kd.sigma_min.abs() < 1e-10);
        assert_relative_eq!(kd.sigma_second, 1.0, max_relative = 1e-9);
        assert_relative_eq!(kd.n0[0], 1.0, max_relative = 1e-9);
        assert_relative_eq!(kd.psi0[0], 1.0, max_relative = 1e-9);
        assert!(kd.n0.rows(1, 2).norm() < 1e-9);
    }

    #[test]
    fn one_by_one_zero_map_has_trivial_kernel_pair() {
        let f = MapOracle::whitney(1);
        let kd = kernel_cokernel(&f, &[0.0], KERNEL_TOL).unwrap();
        assert_eq!(kd.n0.len(), 1);
        assert_relative_eq!(kd.n0[0], 1.0);
        assert_relative_eq!(kd.psi0[0], 1.0);
        assert_eq!(kd.sigma_second, f64::INFINITY);
    }

    #[test]
    fn wide_kernels_are_rejected() {
        let f = linear_oracle(vec![0.0, 0.0]);
        assert!(matches!(
            kernel_cokernel(&f, &[0.0; 2], KERNEL_TOL),
            Err(OpError::NotSimple { .. })
        ));
    }

    #[test]
    fn regular_points_are_rejected() {
        let f = linear_oracle(vec![1.0, 2.0]);
        assert!(matches!(
            kernel_cokernel(&f, &[0.0; 2], KERNEL_TOL),
            Err(OpError::NotSingular { .. })
        ));
    }

    #[test]
    fn whitney_kernel_is_first_axis() {
        for k in 1..=4 {
            let f = MapOracle::whitney(k);
            let kd = kernel_cokernel(&f, &vec![0.0; k], KERNEL_TOL).unwrap();
            assert!(
                (kd.n0[0].abs() - 1.0).abs() < 1e-9,
                "k={k}: kernel should be the t axis, got {:?}",
                kd.n0
            );
        }
    }

    #[test]
    fn range_test_examples() {
        let f = linear_oracle(vec![0.0, 1.0]);
        let kd = kernel_cokernel(&f, &[0.0; 2], KERNEL_TOL).unwrap();
        assert!(range_test(&kd, &[0.0, 1.0], RANGE_IN_TOL).in_range);
        let out = range_test(&kd, &[1.0, 0.0], RANGE_IN_TOL);
        assert!(!out.in_range);
        assert_relative_eq!(out.margin, 1.0, max_relative = 1e-9);
        let zero = range_test(&kd, &[0.0, 0.0], RANGE_IN_TOL);
        assert!(zero.in_range);
        assert_eq!(zero.margin, 0.0);
    }

    #[test]
    fn bordered_solve_examples() {
        let f = linear_oracle(vec![0.0, 1.0]);
        let kd = kernel_cokernel(&f, &[0.0; 2], KERNEL_TOL).unwrap();
        let x = bordered_solve(&kd, &[0.0, 1.0]).unwrap();
        assert_relative_eq!(x[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(x[1], 1.0, max_relative = 1e-12);
        let x = bordered_solve(&kd, &[0.0, 0.0]).unwrap();
        assert!(x.iter().all(|&v| v.abs() < 1e-14));

        let f = linear_oracle(vec![0.0, 2.0, 4.0]);
        let kd = kernel_cokernel(&f, &[0.0; 3], KERNEL_TOL).unwrap();
        let x = bordered_solve(&kd, &[0.0, 2.0, 8.0]).unwrap();
        assert_relative_eq!(x[1], 1.0, max_relative = 1e-12);
        assert_relative_eq!(x[2], 2.0, max_relative = 1e-12);
        assert!(x[0].abs() < 1e-12);
    }

    #[test]
    fn bordered_solve_rejects_out_of_range() {
        let f = linear_oracle(vec![0.0, 1.0]);
        let kd = kernel_cokernel(&f, &[0.0; 2], KERNEL_TOL).unwrap();
        assert!(matches!(
            bordered_solve(&kd, &[1.0, 0.0]),
            Err(OpError::NotInRange { .. })
        ));
        // the relaxed variant absorbs the out-of-range part into lambda
        let (x, lambda) = bordered_solve_relaxed(&kd, &[1.0, 0.0]).unwrap();
        assert_relative_eq!(lambda, 1.0, max_relative = 1e-12);
        assert!(x.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn bordered_solve_handles_asymmetric_kernel_pair() {
        // Jacobian [[0,1],[0,0]]: kernel e1, cokernel e2, orthogonal pair.
        // The bordered matrix must stay nonsingular in this arrangement.
        let f = MapOracle::from_fn(2, |u: &[f64]| vec![u[1], u[0] * u[0]]);
        let kd = kernel_cokernel(&f, &[0.0; 2], KERNEL_TOL).unwrap();
        assert!(kd.n0.dot(&kd.psi0).abs() < 1e-9);
        let x = bordered_solve(&kd, &[1.0, 0.0]).unwrap();
        // F'(0) x = e1 means x = e2
        assert_relative_eq!(x[1], 1.0, max_relative = 1e-9);
        assert!(x[0].abs() < 1e-9);
    }

    #[test]
    fn registry_parses_builtin_names() {
        assert_eq!(oracle_by_name("wk:3").unwrap().dim(), 3);
        assert_eq!(oracle_by_name("fn:2:5").unwrap().dim(), 3);
        assert!(matches!(
            oracle_by_name("wk:0"),
            Err(OpError::UnknownOracle(_))
        ));
        assert!(matches!(
            oracle_by_name("nope"),
            Err(OpError::UnknownOracle(_))
        ));
    }

    #[test]
    fn monomial_family_matches_formula() {
        // k=2, n=5: first coordinate t^5 + t_2 t^2 + t_1 t
        let f = MapOracle::monomial_family(2, 5);
        let v = f.eval(&[2.0, 3.0, 7.0]).unwrap();
        assert_eq!(v, vec![32.0 + 28.0 + 6.0, 3.0, 7.0]);
        // n=0 drops the leading monomial
        let f = MapOracle::monomial_family(2, 0);
        let v = f.eval(&[2.0, 3.0, 7.0]).unwrap();
        assert_eq!(v, vec![28.0 + 6.0, 3.0, 7.0]);
    }
}
