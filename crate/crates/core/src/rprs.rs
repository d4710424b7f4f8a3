//! Offline stochastic-error-tube synthesis.
//!
//! The error state evolves as `e_{k+1} = Acl(th) e_k + w_k` with `th` unknown
//! inside a polytope. This module computes per-step matrices `Vbar_k` that
//! dominate `var[e_k]` in the Loewner order for every admissible parameter,
//! by minimizing `-log det` of the bound's inverse subject to vertex LMIs:
//!
//! * i.i.d. noise: one max-det program per step, driven by the exact
//!   one-step variance recursion;
//! * correlated noise: the marginal variance is a product of powers of
//!   `Acl(th)` against the full sequence covariance, factorized pairwise into
//!   "inner bound" and "outer bound" subproblems until the nonlinearity is
//!   exhausted.
//!
//! The bounds are then turned into confidence sets (ellipsoids, per-row
//! half-spaces, or Boole-budgeted polytopes) and into the constraint
//! tightening tables consumed by the controller.

use crate::conic::{self, solve_maxdet_with, MaxDetProgram, PsdBlock, SolveStatus, SolverOpts};
use crate::linalg::{self, vech_index};
use crate::model::{FeedbackGain, UncertainLTISystem};
use crate::polytope::Polytope;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RprsError {
    #[error("probability level {0} is outside the valid range")]
    InvalidProbability(f64),
    #[error("correlation bound violated: inner-bound data not positive definite and the fallback is disabled")]
    CorrelationBoundViolated,
    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),
    #[error("variance bound failed its Loewner dominance re-check at a vertex (residual {0:.3e})")]
    DominanceCheckFailed(f64),
    #[error("solver failure: {0}")]
    Solver(#[from] conic::ConicError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Polytope(#[from] crate::polytope::PolytopeError),
}

/// First two moments of the disturbance sequence `W = [w_0; ..; w_{T-1}]`,
/// plus the distribution-family tag that decides which tail bound applies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseModel {
    pub horizon: usize,
    /// Mean of the stacked sequence, length `n * horizon`.
    pub mean: Vec<f64>,
    pub covariance: NoiseCovariance,
    pub family: NoiseFamily,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum NoiseCovariance {
    /// Identical independent blocks `Sigma_w`.
    Iid(#[serde(with = "crate::exp::serde_matrix")] DMatrix<f64>),
    /// Full `nT x nT` covariance of the stacked sequence.
    Full(#[serde(with = "crate::exp::serde_matrix")] DMatrix<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFamily {
    /// Only the first two moments are known; Chebyshev-type levels.
    MomentOnly,
    /// Gaussian; chi-squared quantile levels.
    Gaussian,
}

impl NoiseModel {
    pub fn new(
        horizon: usize,
        mean: Vec<f64>,
        covariance: NoiseCovariance,
        family: NoiseFamily,
    ) -> Result<Self, RprsError> {
        let nm = NoiseModel {
            horizon,
            mean,
            covariance,
            family,
        };
        nm.validate()?;
        Ok(nm)
    }

    pub fn zero_mean_iid(
        horizon: usize,
        sigma_w: DMatrix<f64>,
        family: NoiseFamily,
    ) -> Result<Self, RprsError> {
        let n = sigma_w.nrows();
        Self::new(
            horizon,
            vec![0.0; n * horizon],
            NoiseCovariance::Iid(sigma_w),
            family,
        )
    }

    pub fn validate(&self) -> Result<(), RprsError> {
        if self.horizon == 0 {
            return Err(RprsError::NotSpd("horizon must be positive".into()));
        }
        let n = self.block_dim();
        match &self.covariance {
            NoiseCovariance::Iid(s) => {
                if !linalg::is_spd(s, 1e-9, 0.0) {
                    return Err(RprsError::NotSpd("iid covariance block".into()));
                }
            }
            NoiseCovariance::Full(s) => {
                if s.nrows() != s.ncols() || s.nrows() != n * self.horizon {
                    return Err(RprsError::NotSpd("full covariance shape".into()));
                }
                if !linalg::is_spd(s, 1e-9, 0.0) {
                    return Err(RprsError::NotSpd("full covariance".into()));
                }
            }
        }
        if self.mean.len() != n * self.horizon {
            return Err(RprsError::NotSpd("mean length".into()));
        }
        Ok(())
    }

    /// Per-step disturbance dimension.
    pub fn block_dim(&self) -> usize {
        match &self.covariance {
            NoiseCovariance::Iid(s) => s.nrows(),
            NoiseCovariance::Full(s) => s.nrows() / self.horizon,
        }
    }

    /// Mean of step `k` (0-based), clamped to the last profile entry.
    pub fn mean_at(&self, k: usize) -> DVector<f64> {
        let n = self.block_dim();
        let k = k.min(self.horizon - 1);
        DVector::from_column_slice(&self.mean[k * n..(k + 1) * n])
    }

    pub fn is_zero_mean(&self) -> bool {
        self.mean.iter().all(|&v| v == 0.0)
    }

    /// Covariance of the stacked sequence as one full matrix.
    pub fn full_covariance(&self) -> DMatrix<f64> {
        match &self.covariance {
            NoiseCovariance::Full(s) => s.clone(),
            NoiseCovariance::Iid(s) => {
                let n = s.nrows();
                let mut full = DMatrix::zeros(n * self.horizon, n * self.horizon);
                for k in 0..self.horizon {
                    full.view_mut((k * n, k * n), (n, n)).copy_from(s);
                }
                full
            }
        }
    }
}

/// Serialization shim for one symmetric matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixEntry(#[serde(with = "crate::exp::serde_matrix")] pub DMatrix<f64>);

/// Per-step Loewner bounds on the error variance and the induced input-error
/// variance `K Vbar K'`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceBoundSequence {
    pub bounds: Vec<MatrixEntry>,
    pub input_bounds: Vec<MatrixEntry>,
}

impl VarianceBoundSequence {
    fn from_bounds(bounds: Vec<DMatrix<f64>>, k_gain: &DMatrix<f64>) -> Self {
        let input_bounds = bounds
            .iter()
            .map(|v| MatrixEntry(k_gain * v * k_gain.transpose()))
            .collect();
        VarianceBoundSequence {
            bounds: bounds.into_iter().map(MatrixEntry).collect(),
            input_bounds,
        }
    }

    pub fn len(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_empty()
    }

    /// `Vbar_k` (1-based step index, clamped to the table end).
    pub fn state_bound(&self, k: usize) -> &DMatrix<f64> {
        let idx = k.clamp(1, self.bounds.len()) - 1;
        &self.bounds[idx].0
    }

    pub fn input_bound(&self, k: usize) -> &DMatrix<f64> {
        let idx = k.clamp(1, self.input_bounds.len()) - 1;
        &self.input_bounds[idx].0
    }
}

#[derive(Debug, Clone)]
pub struct RprsOpts {
    /// Apply the positive-definite upper-bound fallback when the inner-bound
    /// data fails its definiteness requirement; disabled, the failure
    /// surfaces as [`RprsError::CorrelationBoundViolated`].
    pub remark4_fallback: bool,
    pub solver: SolverOpts,
    /// Vertex matrices closer than this (relative max-norm) are treated as
    /// identical; the least upper bound of a single matrix is the matrix
    /// itself, so no SDP is solved.
    pub same_tol: f64,
    /// Stop extending the i.i.d. bound table once consecutive bounds differ
    /// by less than this relative tolerance (the table clamps past its end).
    pub converge_tol: Option<f64>,
}

impl Default for RprsOpts {
    fn default() -> Self {
        RprsOpts {
            remark4_fallback: true,
            solver: SolverOpts::default(),
            same_tol: 1e-12,
            converge_tol: None,
        }
    }
}

const DOMINANCE_TOL: f64 = 1e-7;

fn all_same(mats: &[DMatrix<f64>], rel_tol: f64) -> bool {
    let first = &mats[0];
    let scale = 1.0 + first.amax();
    mats.iter().all(|m| (m - first).amax() <= rel_tol * scale)
}

/// Symmetric basis matrix with 1 at `(i, j)` and `(j, i)`.
fn sym_basis(n: usize, i: usize, j: usize) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(n, n);
    e[(i, j)] = 1.0;
    e[(j, i)] = 1.0;
    e
}

/// One vertex block of the convex log-det reformulation: with decision
/// variable `S` (the inverse of the bound being computed) the constraint
/// `X - Z - A Y A' >= 0` becomes
///
/// ```text
/// [ S,    S Z,  S A  ]
/// [ Z S,  Z,    0    ]  >= 0
/// [ A' S, 0,    Y^-1 ]
/// ```
fn lemma3_block(a_vert: &DMatrix<f64>, z: &DMatrix<f64>, y_inv: &DMatrix<f64>) -> PsdBlock {
    let n = a_vert.nrows();
    let frame = 3 * n;
    let mut f0 = DMatrix::zeros(frame, frame);
    f0.view_mut((n, n), (n, n)).copy_from(z);
    f0.view_mut((2 * n, 2 * n), (n, n)).copy_from(y_inv);
    let mut blk = PsdBlock::new(frame, f0);
    for j in 0..n {
        for i in 0..=j {
            let e = sym_basis(n, i, j);
            let ez = &e * z;
            let ea = &e * a_vert;
            let mut c = DMatrix::zeros(frame, frame);
            c.view_mut((0, 0), (n, n)).copy_from(&e);
            c.view_mut((0, n), (n, n)).copy_from(&ez);
            c.view_mut((n, 0), (n, n)).copy_from(&ez.transpose());
            c.view_mut((0, 2 * n), (n, n)).copy_from(&ea);
            c.view_mut((2 * n, 0), (n, n)).copy_from(&ea.transpose());
            blk.add_coeff(vech_index(i, j), c);
        }
    }
    blk
}

/// One vertex block of the outer-bound problem: `S^-1 >= Y_j` via
/// `[S, S Y_j; Y_j S, Y_j] >= eps I` (the strict inequality closed with a
/// small shift).
fn outer_block(y_vert: &DMatrix<f64>) -> PsdBlock {
    let n = y_vert.nrows();
    let frame = 2 * n;
    let mut f0 = -DMatrix::<f64>::identity(frame, frame) * conic::EPS_STRICT;
    f0.view_mut((n, n), (n, n))
        .copy_from(&(y_vert + DMatrix::identity(n, n) * conic::EPS_STRICT));
    let mut blk = PsdBlock::new(frame, f0);
    for j in 0..n {
        for i in 0..=j {
            let e = sym_basis(n, i, j);
            let ey = &e * y_vert;
            let mut c = DMatrix::zeros(frame, frame);
            c.view_mut((0, 0), (n, n)).copy_from(&e);
            c.view_mut((0, n), (n, n)).copy_from(&ey);
            c.view_mut((n, 0), (n, n)).copy_from(&ey.transpose());
            blk.add_coeff(vech_index(i, j), c);
        }
    }
    blk
}

/// Least Loewner upper bound on a family of vertex matrices by max-det on
/// the bound's inverse; `targets[j]` is what the bound must dominate and
/// `make_block(j)` produces the matching vertex LMI.
fn solve_bound(
    targets: &[DMatrix<f64>],
    make_block: impl Fn(usize) -> PsdBlock,
    dim: usize,
    opts: &RprsOpts,
) -> Result<DMatrix<f64>, RprsError> {
    if all_same(targets, opts.same_tol) {
        // a single distinct constraint: the least upper bound is exact
        return Ok(linalg::symmetrize(&targets[0]));
    }
    let mut prog = MaxDetProgram::new(dim);
    for j in 0..targets.len() {
        prog.add_block(make_block(j));
    }
    let sol = solve_maxdet_with(&prog, &opts.solver)?;
    if sol.status != SolveStatus::Optimal {
        return Err(RprsError::Solver(conic::ConicError::NumericalFailure {
            iterations: 0,
            detail: format!("max-det bound returned {:?}", sol.status),
        }));
    }
    let bound = linalg::inv_spd(&sol.s)
        .ok_or_else(|| RprsError::NotSpd("max-det solution inverse".into()))?;
    // dominance re-check against each target, independent of the solver
    let mut worst: f64 = 0.0;
    for t in targets {
        worst = worst.max(-linalg::min_eig_sym(&(&bound - t)));
    }
    if worst > DOMINANCE_TOL {
        return Err(RprsError::DominanceCheckFailed(worst));
    }
    Ok(bound)
}

/// Variance bounds for i.i.d. noise: `Vbar_1 = Sigma_w`, then one vertex
/// max-det program per step driven by the exact one-step recursion.
pub fn iid_variance_bounds(
    sys: &UncertainLTISystem,
    gain: &FeedbackGain,
    sigma_w: &DMatrix<f64>,
    t_len: usize,
) -> Result<VarianceBoundSequence, RprsError> {
    iid_variance_bounds_with(sys, gain, sigma_w, t_len, &RprsOpts::default())
}

pub fn iid_variance_bounds_with(
    sys: &UncertainLTISystem,
    gain: &FeedbackGain,
    sigma_w: &DMatrix<f64>,
    t_len: usize,
    opts: &RprsOpts,
) -> Result<VarianceBoundSequence, RprsError> {
    if !linalg::is_spd(sigma_w, 1e-9, 0.0) {
        return Err(RprsError::NotSpd("Sigma_w".into()));
    }
    assert!(t_len >= 1);
    let n = sys.state_dim();
    let acls = sys.a_cl_vertices(&gain.k)?;
    let mut bounds = Vec::with_capacity(t_len);
    bounds.push(linalg::symmetrize(sigma_w));
    for _ in 1..t_len {
        let prev = bounds.last().unwrap().clone();
        let prev_inv = linalg::inv_spd(&linalg::psd_floor(&prev, 1e-12))
            .ok_or_else(|| RprsError::NotSpd("previous bound".into()))?;
        let targets: Vec<DMatrix<f64>> = acls
            .iter()
            .map(|a| linalg::symmetrize(&(a * &prev * a.transpose() + sigma_w)))
            .collect();
        let next = solve_bound(
            &targets,
            |j| lemma3_block(&acls[j], sigma_w, &prev_inv),
            n,
            opts,
        )?;
        let settled = opts
            .converge_tol
            .map(|tol| (&next - &prev).amax() <= tol * (1.0 + prev.amax()))
            .unwrap_or(false);
        bounds.push(next);
        if settled {
            break;
        }
    }
    Ok(VarianceBoundSequence::from_bounds(bounds, &gain.k))
}

/// Inner-bound subproblem: the least log-det bound `D_1` with
/// `D_1 >= A_I(th) Ybar_head A_I(th)'` at every vertex, `A_I = [Acl, I]`.
pub fn inner_bound(
    acl_vertices: &[DMatrix<f64>],
    ybar_head: &DMatrix<f64>,
    opts: &RprsOpts,
) -> Result<DMatrix<f64>, RprsError> {
    let n = acl_vertices[0].nrows();
    assert_eq!(ybar_head.nrows(), 2 * n);
    assert_eq!(ybar_head.ncols(), 2 * n);
    let y11 = ybar_head.view((0, 0), (n, n)).into_owned();
    let y12 = ybar_head.view((0, n), (n, n)).into_owned();
    let y21 = ybar_head.view((n, 0), (n, n)).into_owned();
    let y22 = ybar_head.view((n, n), (n, n)).into_owned();

    let targets: Vec<DMatrix<f64>> = acl_vertices
        .iter()
        .map(|a| {
            linalg::symmetrize(
                &(a * &y11 * a.transpose() + a * &y12 + &y21 * a.transpose() + &y22),
            )
        })
        .collect();
    if all_same(&targets, opts.same_tol) {
        return Ok(targets[0].clone());
    }

    // definiteness requirement on the theta-dependent constant part
    let mut x_tildes = Vec::with_capacity(acl_vertices.len());
    for a in acl_vertices {
        let xt = linalg::symmetrize(&(a * &y12 + &y21 * a.transpose() + &y22));
        let lam = linalg::min_eig_sym(&xt);
        if lam <= 0.0 {
            if !opts.remark4_fallback {
                return Err(RprsError::CorrelationBoundViolated);
            }
            // a valid positive definite upper bound of the data
            x_tildes.push(&xt + DMatrix::identity(n, n) * (lam.abs() + 1e-6));
        } else {
            x_tildes.push(xt);
        }
    }
    let y11_inv = linalg::inv_spd(&linalg::psd_floor(&y11, 1e-12))
        .ok_or_else(|| RprsError::NotSpd("Ybar leading block".into()))?;
    solve_bound(
        &targets,
        |j| lemma3_block(&acl_vertices[j], &x_tildes[j], &y11_inv),
        n,
        opts,
    )
}

/// Outer-bound subproblem: the least log-det bound dominating every matrix
/// in `y_vertices`.
pub fn outer_bound(
    y_vertices: &[DMatrix<f64>],
    opts: &RprsOpts,
) -> Result<DMatrix<f64>, RprsError> {
    let floored: Vec<DMatrix<f64>> = y_vertices
        .iter()
        .map(|y| linalg::psd_floor(y, 0.0))
        .collect();
    solve_bound(
        &floored,
        |j| outer_block(&floored[j]),
        floored[0].nrows(),
        opts,
    )
}

/// Marginal variance bounds for correlated noise: sequential pairwise
/// factorization of the power-product form of `var[e_k]`, alternating inner
/// and outer bounds until only the base block remains. Steps are mutually
/// independent and solved in parallel.
pub fn correlated_variance_bounds(
    sys: &UncertainLTISystem,
    gain: &FeedbackGain,
    sigma_w_full: &DMatrix<f64>,
    t_len: usize,
) -> Result<VarianceBoundSequence, RprsError> {
    correlated_variance_bounds_with(sys, gain, sigma_w_full, t_len, &RprsOpts::default())
}

pub fn correlated_variance_bounds_with(
    sys: &UncertainLTISystem,
    gain: &FeedbackGain,
    sigma_w_full: &DMatrix<f64>,
    t_len: usize,
    opts: &RprsOpts,
) -> Result<VarianceBoundSequence, RprsError> {
    use rayon::prelude::*;
    let n = sys.state_dim();
    if sigma_w_full.nrows() < n * t_len {
        return Err(RprsError::NotSpd(format!(
            "full covariance must cover {t_len} steps of dimension {n}"
        )));
    }
    if !linalg::is_spd(sigma_w_full, 1e-9, 0.0) {
        return Err(RprsError::NotSpd("Sigma_W".into()));
    }
    let acls = sys.a_cl_vertices(&gain.k)?;

    let mut bounds: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, n); t_len];
    bounds[0] = sigma_w_full.view((0, 0), (n, n)).into_owned();

    let rest: Result<Vec<(usize, DMatrix<f64>)>, RprsError> = (2..=t_len)
        .into_par_iter()
        .map(|k| {
            let mut ybar = sigma_w_full.view((0, 0), (k * n, k * n)).into_owned();
            for i in (2..=k).rev() {
                debug_assert_eq!(ybar.nrows(), i * n);
                let head = ybar.view((0, 0), (2 * n, 2 * n)).into_owned();
                let d1 = inner_bound(&acls, &head, opts)?;
                if i == 2 {
                    ybar = d1;
                    continue;
                }
                // Y(th) = [D1, A_I(th) C; C' A_I(th)', Ylow], C = Ybar[0:2n, 2n:]
                let tail = (i - 2) * n;
                let c = ybar.view((0, 2 * n), (2 * n, tail)).into_owned();
                let ylow = ybar.view((2 * n, 2 * n), (tail, tail)).into_owned();
                let assembled: Vec<DMatrix<f64>> = acls
                    .iter()
                    .map(|a| {
                        let mut a_i = DMatrix::zeros(n, 2 * n);
                        a_i.view_mut((0, 0), (n, n)).copy_from(a);
                        a_i.view_mut((0, n), (n, n))
                            .copy_from(&DMatrix::identity(n, n));
                        let top = &a_i * &c;
                        let dim = n + tail;
                        let mut y = DMatrix::zeros(dim, dim);
                        y.view_mut((0, 0), (n, n)).copy_from(&d1);
                        y.view_mut((0, n), (n, tail)).copy_from(&top);
                        y.view_mut((n, 0), (tail, n)).copy_from(&top.transpose());
                        y.view_mut((n, n), (tail, tail)).copy_from(&ylow);
                        y
                    })
                    .collect();
                // a theta-independent assembly needs no outer bound
                if all_same(&assembled, opts.same_tol) {
                    ybar = assembled.into_iter().next().unwrap();
                } else {
                    ybar = outer_bound(&assembled, opts)?;
                }
            }
            Ok((k, ybar))
        })
        .collect();
    for (k, v) in rest? {
        bounds[k - 1] = v;
    }
    Ok(VarianceBoundSequence::from_bounds(bounds, &gain.k))
}

/// Exact marginal error variance at step `k >= 1` for a fixed closed-loop
/// matrix: `[Acl^{k-1} .. I] SigmaW_{1:kn,1:kn} [..]'`. Used by the check
/// pipeline; tests carry their own oracle copies.
pub fn exact_marginal_variance(
    acl: &DMatrix<f64>,
    sigma_w_full: &DMatrix<f64>,
    k: usize,
) -> DMatrix<f64> {
    let n = acl.nrows();
    let mut stack = DMatrix::zeros(n, k * n);
    let mut power = DMatrix::identity(n, n);
    for block in (0..k).rev() {
        stack.view_mut((0, block * n), (n, n)).copy_from(&power);
        power = acl * &power;
    }
    let lead = sigma_w_full.view((0, 0), (k * n, k * n));
    linalg::symmetrize(&(&stack * lead * stack.transpose()))
}

// ---------------------------------------------------------------------------
// Confidence sets and tightening
// ---------------------------------------------------------------------------

/// Geometry the per-step confidence regions are built with.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RprsShape {
    /// `{e | e' Vbar^-1 e <= p_tilde}`
    Ellipsoid,
    /// One independent half-space per constraint row (the non-conservative
    /// per-row tightening).
    HalfSpaces,
    /// A joint polytope over the given normals with the violation budget
    /// split by Boole's inequality, equally unless per-row budgets are given.
    Polytope {
        normals: Vec<Vec<f64>>,
        budgets: Option<Vec<f64>>,
    },
}

/// One per-step confidence region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RprsSet {
    pub variance: MatrixEntry,
    pub data: RprsSetData,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum RprsSetData {
    Ellipsoid { p_tilde: f64 },
    HalfSpaces { p_tilde: f64 },
    Polytope { normals: Vec<Vec<f64>>, offsets: Vec<f64> },
}

impl RprsSet {
    /// Support value in direction `d`; exactly the tightening a constraint
    /// row `d . x <= 1` receives.
    pub fn support(&self, d: &DVector<f64>) -> Result<f64, RprsError> {
        let v = &self.variance.0;
        match &self.data {
            RprsSetData::Ellipsoid { p_tilde } | RprsSetData::HalfSpaces { p_tilde } => {
                Ok((p_tilde * d.dot(&(v * d))).max(0.0).sqrt())
            }
            RprsSetData::Polytope { normals, offsets } => {
                let p = polytope_from_rows(normals, offsets, d.len());
                Ok(p.support(d)?)
            }
        }
    }

    /// Membership, where the shape defines a set: quadratic form for
    /// ellipsoids, all rows for polytopes. The half-space shape is
    /// per-direction; use [`RprsSet::halfspace_holds`].
    pub fn contains(&self, e: &DVector<f64>, tol: f64) -> Option<bool> {
        let v = &self.variance.0;
        match &self.data {
            RprsSetData::Ellipsoid { p_tilde } => {
                let vi = linalg::inv_spd(v)?;
                Some(e.dot(&(&vi * e)) <= p_tilde + tol)
            }
            RprsSetData::HalfSpaces { .. } => None,
            RprsSetData::Polytope { normals, offsets } => Some(
                normals
                    .iter()
                    .zip(offsets)
                    .all(|(nrow, off)| DVector::from_column_slice(nrow).dot(e) <= off + tol),
            ),
        }
    }

    /// Whether `d . e <= sqrt(p_tilde d' Vbar d)` holds.
    pub fn halfspace_holds(&self, d: &DVector<f64>, e: &DVector<f64>, tol: f64) -> bool {
        let v = &self.variance.0;
        let p_tilde = match &self.data {
            RprsSetData::HalfSpaces { p_tilde } | RprsSetData::Ellipsoid { p_tilde } => *p_tilde,
            RprsSetData::Polytope { .. } => return false,
        };
        d.dot(e) <= (p_tilde * d.dot(&(v * d))).max(0.0).sqrt() + tol
    }
}

fn polytope_from_rows(normals: &[Vec<f64>], offsets: &[f64], dim: usize) -> Polytope {
    let mut h = DMatrix::zeros(normals.len(), dim);
    for (r, nrow) in normals.iter().enumerate() {
        for c in 0..dim {
            h[(r, c)] = nrow[c];
        }
    }
    Polytope::new(h, DVector::from_column_slice(offsets))
}

/// The stochastic error tube: per-step state and input confidence sets, the
/// probability levels, and (once computed) the tightening tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RprsSequence {
    pub shape: RprsShape,
    pub family: NoiseFamily,
    pub p_x: f64,
    pub p_u: f64,
    pub state_sets: Vec<RprsSet>,
    pub input_sets: Vec<RprsSet>,
    pub tightening: Option<Tightening>,
}

/// Per-step tightening vectors (1-based step `k` at index `k - 1`) with
/// emptiness of each tightened stage set flagged, not errored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tightening {
    pub f: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
    pub state_set_empty: Vec<bool>,
    pub input_set_empty: Vec<bool>,
}

impl Tightening {
    /// `f_k`; `k = 0` means no tightening (the state is known exactly) and
    /// indices beyond the table hold at the final entry.
    pub fn f_at(&self, k: usize) -> DVector<f64> {
        let width = self.f.first().map_or(0, Vec::len);
        if k == 0 || self.f.is_empty() {
            return DVector::zeros(width);
        }
        DVector::from_column_slice(&self.f[k.min(self.f.len()) - 1])
    }

    pub fn g_at(&self, k: usize) -> DVector<f64> {
        let width = self.g.first().map_or(0, Vec::len);
        if k == 0 || self.g.is_empty() {
            return DVector::zeros(width);
        }
        DVector::from_column_slice(&self.g[k.min(self.g.len()) - 1])
    }

    /// Elementwise worst tightening over all steps; defines the terminal
    /// stage sets.
    pub fn f_worst(&self) -> DVector<f64> {
        worst_rows(&self.f)
    }

    pub fn g_worst(&self) -> DVector<f64> {
        worst_rows(&self.g)
    }

    pub fn any_state_empty(&self) -> bool {
        self.state_set_empty.iter().any(|&b| b)
    }

    pub fn any_input_empty(&self) -> bool {
        self.input_set_empty.iter().any(|&b| b)
    }
}

fn worst_rows(rows: &[Vec<f64>]) -> DVector<f64> {
    let width = rows.first().map_or(0, Vec::len);
    let mut out = DVector::zeros(width);
    for r in rows {
        for (i, v) in r.iter().enumerate() {
            if *v > out[i] {
                out[i] = *v;
            }
        }
    }
    out
}

/// Chi-squared quantile used for Gaussian-family levels. The library inverse
/// is only ~1e-5 accurate, so it is polished with a few Newton steps on the
/// CDF.
pub fn chi2_quantile(dof: usize, p: f64) -> Result<f64, RprsError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(RprsError::InvalidProbability(p));
    }
    let dist = ChiSquared::new(dof as f64).map_err(|_| RprsError::InvalidProbability(p))?;
    let mut x = dist.inverse_cdf(p);
    for _ in 0..4 {
        let pdf = statrs::distribution::Continuous::pdf(&dist, x);
        if pdf <= 0.0 {
            break;
        }
        let step = (dist.cdf(x) - p) / pdf;
        x -= step;
        if step.abs() < 1e-14 * (1.0 + x.abs()) {
            break;
        }
    }
    Ok(x)
}

/// Confidence-set level for the given geometry, family, probability and
/// dimension.
pub fn set_level(
    ellipsoidal: bool,
    family: NoiseFamily,
    p: f64,
    dim: usize,
) -> Result<f64, RprsError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(RprsError::InvalidProbability(p));
    }
    Ok(match (ellipsoidal, family) {
        (true, NoiseFamily::MomentOnly) => dim as f64 / (1.0 - p),
        (true, NoiseFamily::Gaussian) => chi2_quantile(dim, p)?,
        (false, NoiseFamily::MomentOnly) => 1.0 / (1.0 - p),
        (false, NoiseFamily::Gaussian) => {
            if p <= 0.5 {
                return Err(RprsError::InvalidProbability(p));
            }
            chi2_quantile(1, 2.0 * p - 1.0)?
        }
    })
}

/// Build the stochastic error tube from a variance-bound sequence.
pub fn build_rprs(
    bounds: &VarianceBoundSequence,
    shape: RprsShape,
    p_x: f64,
    p_u: f64,
    family: NoiseFamily,
) -> Result<RprsSequence, RprsError> {
    let make_sets = |entries: &[MatrixEntry], p: f64| -> Result<Vec<RprsSet>, RprsError> {
        entries
            .iter()
            .map(|MatrixEntry(v)| {
                let dim = v.nrows();
                let data = match &shape {
                    RprsShape::Ellipsoid => RprsSetData::Ellipsoid {
                        p_tilde: set_level(true, family, p, dim)?,
                    },
                    RprsShape::HalfSpaces => RprsSetData::HalfSpaces {
                        p_tilde: set_level(false, family, p, dim)?,
                    },
                    RprsShape::Polytope { normals, budgets } => {
                        let nrows = normals.len();
                        let eps_total = 1.0 - p;
                        let budgets = match budgets {
                            Some(b) => {
                                if b.len() != nrows
                                    || b.iter().any(|&x| x <= 0.0)
                                    || (b.iter().sum::<f64>() - eps_total).abs() > 1e-9
                                {
                                    return Err(RprsError::InvalidProbability(p));
                                }
                                b.clone()
                            }
                            None => vec![eps_total / nrows as f64; nrows],
                        };
                        let mut offsets = Vec::with_capacity(nrows);
                        for (nrow, eps) in normals.iter().zip(&budgets) {
                            let pt = set_level(false, family, 1.0 - eps, dim)?;
                            let d = DVector::from_column_slice(nrow);
                            offsets.push((pt * d.dot(&(v * &d))).max(0.0).sqrt());
                        }
                        RprsSetData::Polytope {
                            normals: normals.clone(),
                            offsets,
                        }
                    }
                };
                Ok(RprsSet {
                    variance: MatrixEntry(v.clone()),
                    data,
                })
            })
            .collect()
    };
    // The polytope geometry's normals live in state space; input sets fall
    // back to per-row half-spaces in that case.
    let input_sets = match &shape {
        RprsShape::Polytope { .. } => bounds
            .input_bounds
            .iter()
            .map(|MatrixEntry(v)| {
                Ok(RprsSet {
                    variance: MatrixEntry(v.clone()),
                    data: RprsSetData::HalfSpaces {
                        p_tilde: set_level(false, family, p_u, v.nrows())?,
                    },
                })
            })
            .collect::<Result<_, RprsError>>()?,
        _ => make_sets(&bounds.input_bounds, p_u)?,
    };
    Ok(RprsSequence {
        state_sets: make_sets(&bounds.bounds, p_x)?,
        input_sets,
        shape,
        family,
        p_x,
        p_u,
        tightening: None,
    })
}

/// Constraint-tightening vectors: `f_k` is the rowwise support of the state
/// confidence region under `F`, `g_k` the analogue for the inputs under `G`.
/// Emptiness of a tightened stage set is flagged, never an error.
pub fn tighten(
    x_set: &Polytope,
    u_set: &Polytope,
    rprs: &RprsSequence,
) -> Result<Tightening, RprsError> {
    let mut f = Vec::with_capacity(rprs.state_sets.len());
    let mut g = Vec::with_capacity(rprs.input_sets.len());
    let mut state_set_empty = Vec::new();
    let mut input_set_empty = Vec::new();
    for set in &rprs.state_sets {
        let mut fk = Vec::with_capacity(x_set.num_facets());
        for r in 0..x_set.num_facets() {
            fk.push(set.support(&x_set.row(r))?);
        }
        let tightened = Polytope::new(
            x_set.h().clone(),
            x_set.offsets() - DVector::from_column_slice(&fk),
        );
        state_set_empty.push(x_set.num_facets() > 0 && tightened.is_empty()?);
        f.push(fk);
    }
    for set in &rprs.input_sets {
        let mut gk = Vec::with_capacity(u_set.num_facets());
        for r in 0..u_set.num_facets() {
            gk.push(set.support(&u_set.row(r))?);
        }
        let tightened = Polytope::new(
            u_set.h().clone(),
            u_set.offsets() - DVector::from_column_slice(&gk),
        );
        input_set_empty.push(u_set.num_facets() > 0 && tightened.is_empty()?);
        g.push(gk);
    }
    Ok(Tightening {
        f,
        g,
        state_set_empty,
        input_set_empty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{illustrative_system, synthesize_gain, verify_gain};
    use approx::assert_abs_diff_eq;

    fn sigma_va() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.3, 0.5, 0.5, 1.0])
    }

    fn zero_cl_sys() -> (UncertainLTISystem, FeedbackGain) {
        // Acl(th) = 0 for every th: A = 0, B = 0
        let sys = UncertainLTISystem::new(
            vec![DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)],
            vec![DMatrix::zeros(2, 1), DMatrix::zeros(2, 1)],
            Polytope::interval(-0.5, 0.5),
            Polytope::unit_box(2),
            Polytope::unit_box(1),
            0.9,
            0.9,
        )
        .unwrap();
        let gain = verify_gain(&sys, &DMatrix::zeros(1, 2)).unwrap();
        (sys, gain)
    }

    fn singleton_sys(alpha: f64) -> (UncertainLTISystem, FeedbackGain) {
        let mut sys = illustrative_system(alpha, 0.9);
        sys.theta_set = Polytope::interval(-alpha, -alpha);
        let gain = synthesize_gain(&sys).unwrap();
        (sys, gain)
    }

    #[test]
    fn iid_bounds_collapse_for_zero_dynamics() {
        let (sys, gain) = zero_cl_sys();
        let v = iid_variance_bounds(&sys, &gain, &sigma_va(), 5).unwrap();
        for k in 1..=5 {
            assert!((v.state_bound(k) - sigma_va()).amax() < 1e-12);
        }
    }

    #[test]
    fn iid_bounds_singleton_matches_exact_recursion() {
        let (sys, gain) = singleton_sys(0.2);
        let acl = sys.a_cl_of(&DVector::from_vec(vec![-0.2]), &gain.k);
        let v = iid_variance_bounds(&sys, &gain, &sigma_va(), 4).unwrap();
        let mut exact = sigma_va();
        for k in 2..=4 {
            exact = &acl * exact * acl.transpose() + sigma_va();
            assert!(
                (v.state_bound(k) - &exact).amax() < 1e-5,
                "k = {k}: {:?}",
                (v.state_bound(k) - &exact).amax()
            );
        }
    }

    #[test]
    fn iid_bounds_dominate_vertices_illustrative() {
        let sys = illustrative_system(0.4, 0.9);
        let gain = synthesize_gain(&sys).unwrap();
        let v = iid_variance_bounds(&sys, &gain, &sigma_va(), 3).unwrap();
        for acl in sys.a_cl_vertices(&gain.k).unwrap() {
            let prop = &acl * v.state_bound(1) * acl.transpose() + sigma_va();
            let gap = v.state_bound(2) - prop;
            assert!(linalg::min_eig_sym(&gap) >= -1e-7);
        }
        // input bounds are the K-congruence
        let kv = &gain.k * v.state_bound(2) * gain.k.transpose();
        assert!((v.input_bound(2) - kv).amax() < 1e-12);
    }

    #[test]
    fn inner_bound_zero_dynamics_is_lower_right_block() {
        let acls = vec![DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)];
        let mut head = DMatrix::identity(4, 4);
        head[(2, 2)] = 3.0;
        head[(3, 3)] = 2.0;
        head[(2, 3)] = 0.5;
        head[(3, 2)] = 0.5;
        let d1 = inner_bound(&acls, &head, &RprsOpts::default()).unwrap();
        assert!((d1 - head.view((2, 2), (2, 2)).into_owned()).amax() < 1e-12);
    }

    #[test]
    fn inner_bound_vertex_dominance() {
        let sys = illustrative_system(0.4, 0.9);
        let gain = synthesize_gain(&sys).unwrap();
        let acls = sys.a_cl_vertices(&gain.k).unwrap();
        // a correlated 2-step head
        let mut head = DMatrix::zeros(4, 4);
        head.view_mut((0, 0), (2, 2)).copy_from(&sigma_va());
        head.view_mut((2, 2), (2, 2)).copy_from(&sigma_va());
        head.view_mut((0, 2), (2, 2)).copy_from(&(sigma_va() * 0.5));
        head.view_mut((2, 0), (2, 2)).copy_from(&(sigma_va() * 0.5));
        let d1 = inner_bound(&acls, &head, &RprsOpts::default()).unwrap();
        for a in &acls {
            let mut a_i = DMatrix::zeros(2, 4);
            a_i.view_mut((0, 0), (2, 2)).copy_from(a);
            a_i.view_mut((0, 2), (2, 2)).copy_from(&DMatrix::identity(2, 2));
            let target = &a_i * &head * a_i.transpose();
            assert!(linalg::min_eig_sym(&(&d1 - target)) >= -1e-7);
        }
    }

    #[test]
    fn outer_bound_single_matrix_is_tight() {
        let y = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let b = outer_bound(&[y.clone()], &RprsOpts::default()).unwrap();
        assert!((b - y).amax() < 1e-5);
    }

    #[test]
    fn outer_bound_commuting_diagonals() {
        let y1 = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        let y2 = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        let b = outer_bound(&[y1.clone(), y2.clone()], &RprsOpts::default()).unwrap();
        for y in [&y1, &y2] {
            assert!(linalg::min_eig_sym(&(&b - y)) >= -1e-7);
        }
        // must dominate diag(2,2); log-det optimal is close to it
        let cap = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0]));
        assert!(linalg::min_eig_sym(&(&b - &cap)) >= -1e-5);
        assert!(linalg::log_det_spd(&b).unwrap() < 4.0f64.ln() + 0.03);
    }

    #[test]
    fn correlated_zero_dynamics_telescopes_exactly() {
        let (sys, gain) = zero_cl_sys();
        let t_len = 4;
        // AR(1)-correlated full covariance
        let full = ar1_cov(&sigma_va(), 0.6, t_len);
        let v = correlated_variance_bounds(&sys, &gain, &full, t_len).unwrap();
        for k in 1..=t_len {
            let block = full.view(((k - 1) * 2, (k - 1) * 2), (2, 2)).into_owned();
            assert!(
                (v.state_bound(k) - block).amax() < 1e-12,
                "telescoping failed at k = {k}"
            );
        }
    }

    fn ar1_cov(sigma: &DMatrix<f64>, rho: f64, t_len: usize) -> DMatrix<f64> {
        let n = sigma.nrows();
        let mut full = DMatrix::zeros(n * t_len, n * t_len);
        for a in 0..t_len {
            for b in 0..t_len {
                let scale = rho.powi((a as i32 - b as i32).abs());
                full.view_mut((a * n, b * n), (n, n)).copy_from(&(sigma * scale));
            }
        }
        full
    }

    #[test]
    fn correlated_block_diagonal_singleton_matches_iid() {
        let (sys, gain) = singleton_sys(0.2);
        let t_len = 4;
        let full = ar1_cov(&sigma_va(), 0.0, t_len); // block-diagonal
        let corr = correlated_variance_bounds(&sys, &gain, &full, t_len).unwrap();
        let iid = iid_variance_bounds(&sys, &gain, &sigma_va(), t_len).unwrap();
        for k in 1..=t_len {
            let rel = (corr.state_bound(k) - iid.state_bound(k)).amax()
                / (1.0 + iid.state_bound(k).amax());
            assert!(rel < 1e-4, "k = {k}, rel = {rel}");
        }
    }

    #[test]
    fn correlated_ar1_dominates_exact_product() {
        let sys = illustrative_system(0.4, 0.9);
        let gain = synthesize_gain(&sys).unwrap();
        let t_len = 3;
        let full = ar1_cov(&sigma_va(), 0.5, t_len);
        let v = correlated_variance_bounds(&sys, &gain, &full, t_len).unwrap();
        for th in sys.theta_vertices().unwrap() {
            let acl = sys.a_cl_of(&th, &gain.k);
            for k in 1..=t_len {
                let exact = exact_marginal_variance(&acl, &full, k);
                let gap = v.state_bound(k) - exact;
                assert!(
                    linalg::min_eig_sym(&gap) >= -1e-7,
                    "dominance violated at k = {k}"
                );
            }
        }
    }

    #[test]
    fn set_levels_match_formulas() {
        // moment-only, n = 2, p = 0.9: ellipsoid 20, half-space 10
        assert_abs_diff_eq!(
            set_level(true, NoiseFamily::MomentOnly, 0.9, 2).unwrap(),
            20.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            set_level(false, NoiseFamily::MomentOnly, 0.9, 2).unwrap(),
            10.0,
            epsilon = 1e-12
        );
        // gaussian, n = 2, p = 0.9: chi2_2(0.9) = -2 ln(0.1)
        assert_abs_diff_eq!(
            set_level(true, NoiseFamily::Gaussian, 0.9, 2).unwrap(),
            -2.0 * 0.1f64.ln(),
            epsilon = 1e-9
        );
        assert!(matches!(
            set_level(true, NoiseFamily::MomentOnly, 1.0, 2),
            Err(RprsError::InvalidProbability(_))
        ));
        assert!(matches!(
            set_level(false, NoiseFamily::Gaussian, 0.4, 2),
            Err(RprsError::InvalidProbability(_))
        ));
    }

    #[test]
    fn moment_only_levels_dominate_gaussian() {
        for p in [0.5001, 0.6, 0.8, 0.9, 0.95, 0.99] {
            for n in [1usize, 2, 4] {
                let m = set_level(true, NoiseFamily::MomentOnly, p, n).unwrap();
                let g = set_level(true, NoiseFamily::Gaussian, p, n).unwrap();
                assert!(m >= g, "ellipsoid p = {p} n = {n}");
                let m = set_level(false, NoiseFamily::MomentOnly, p, n).unwrap();
                let g = set_level(false, NoiseFamily::Gaussian, p, n).unwrap();
                assert!(m >= g, "half-space p = {p} n = {n}");
            }
        }
    }

    #[test]
    fn tighten_illustrative_first_step() {
        // F row [0, 1/3], Vbar_1 = Sigma_w, moment-only p = 0.9:
        // f_1 = sqrt(10 * (1/9) * 1) = 1.0541
        let sys = illustrative_system(0.4, 0.9);
        let gain = synthesize_gain(&sys).unwrap();
        let v = iid_variance_bounds(&sys, &gain, &sigma_va(), 1).unwrap();
        let rprs = build_rprs(&v, RprsShape::HalfSpaces, 0.9, 0.9, NoiseFamily::MomentOnly)
            .unwrap();
        let t = tighten(&sys.x_set, &sys.u_set, &rprs).unwrap();
        assert_abs_diff_eq!(t.f_at(1)[0], (10.0f64 / 9.0).sqrt(), epsilon = 1e-9);
        assert_abs_diff_eq!(t.f_at(1)[0], 1.0541, epsilon = 1e-4);
        // f > 1 on a symmetric pair of rows: the tightened set is empty and
        // flagged as such, exactly the over-tightening surface the sweep
        // machinery relies on
        assert!(t.any_state_empty());
    }

    #[test]
    fn tighten_zero_set_and_emptiness_flag() {
        let (sys, gain) = zero_cl_sys();
        // degenerate noise: tiny variance, sets essentially {0}
        let v = iid_variance_bounds(&sys, &gain, &(DMatrix::identity(2, 2) * 1e-18), 2).unwrap();
        let rprs = build_rprs(&v, RprsShape::HalfSpaces, 0.9, 0.9, NoiseFamily::MomentOnly)
            .unwrap();
        let t = tighten(&sys.x_set, &sys.u_set, &rprs).unwrap();
        assert!(t.f_at(1).amax() < 1e-8);
        assert!(!t.any_state_empty());

        // huge variance: tightened offsets go negative on a symmetric box
        let v = iid_variance_bounds(&sys, &gain, &(DMatrix::identity(2, 2) * 100.0), 2).unwrap();
        let rprs = build_rprs(&v, RprsShape::HalfSpaces, 0.9, 0.9, NoiseFamily::MomentOnly)
            .unwrap();
        let t = tighten(&sys.x_set, &sys.u_set, &rprs).unwrap();
        assert!(t.f_at(1)[0] > 1.0);
        assert!(t.any_state_empty());
    }

    #[test]
    fn boole_polytope_matches_pontryagin() {
        let (sys, gain) = zero_cl_sys();
        let v = iid_variance_bounds(&sys, &gain, &sigma_va(), 2).unwrap();
        let normals: Vec<Vec<f64>> = (0..sys.x_set.num_facets())
            .map(|r| sys.x_set.row(r).iter().copied().collect())
            .collect();
        let rprs = build_rprs(
            &v,
            RprsShape::Polytope {
                normals,
                budgets: None,
            },
            0.9,
            0.9,
            NoiseFamily::MomentOnly,
        )
        .unwrap();
        let t = tighten(&sys.x_set, &sys.u_set, &rprs).unwrap();
        // the tightened set {F z <= 1 - f_k} must reproduce pontryagin_diff
        let RprsSetData::Polytope { normals, offsets } = &rprs.state_sets[0].data else {
            panic!("expected polytope set data");
        };
        let e_set = polytope_from_rows(normals, offsets, 2);
        let diff = sys.x_set.pontryagin_diff(&e_set).unwrap();
        let expect = sys.x_set.offsets() - t.f_at(1);
        assert!((diff.offsets() - expect).amax() < 1e-8);
    }

    #[test]
    fn tables_clamp_past_the_end() {
        let (sys, gain) = zero_cl_sys();
        let v = iid_variance_bounds(&sys, &gain, &sigma_va(), 3).unwrap();
        let rprs =
            build_rprs(&v, RprsShape::HalfSpaces, 0.9, 0.9, NoiseFamily::Gaussian).unwrap();
        let t = tighten(&sys.x_set, &sys.u_set, &rprs).unwrap();
        assert_eq!(t.f_at(3), t.f_at(17));
        assert_eq!(t.f_at(0), DVector::zeros(sys.x_set.num_facets()));
        assert_eq!(v.state_bound(3), v.state_bound(99));
    }

    #[test]
    fn noise_model_validation() {
        assert!(NoiseModel::zero_mean_iid(5, sigma_va(), NoiseFamily::Gaussian).is_ok());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]); // indefinite
        assert!(NoiseModel::zero_mean_iid(5, bad, NoiseFamily::Gaussian).is_err());
        let full = ar1_cov(&sigma_va(), 0.5, 3);
        let nm = NoiseModel::new(
            3,
            vec![0.0; 6],
            NoiseCovariance::Full(full.clone()),
            NoiseFamily::Gaussian,
        )
        .unwrap();
        assert_eq!(nm.block_dim(), 2);
        assert_eq!(nm.full_covariance(), full);
    }
}
