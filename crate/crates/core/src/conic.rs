//! Solver facade for the three problem classes the pipeline needs: LP,
//! convex QP, and SDP with a log-det (max-det) objective.
//!
//! Problems are stated declaratively as [`ConicProgram`] / [`MaxDetProgram`]
//! and lowered onto an interior-point conic backend. Every `Optimal` answer
//! is re-substituted into the original constraint blocks by an independent
//! residual checker before it is returned; the solver's own termination
//! report is never trusted on its own.
//!
//! The log-det objective is encoded with the standard triangular-factor
//! reformulation: `log det S >= sum_i log Z_ii` for any lower-triangular `Z`
//! with `[S, Z; Z', diag(Z)] >= 0`, each `log Z_ii` expressed through one
//! exponential cone.

use crate::linalg;
use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Absolute feasibility tolerance required of returned `Optimal` solutions.
pub const RESIDUAL_TOL: f64 = 1e-7;

/// Strict matrix inequalities are implemented as `>= EPS_STRICT * I`.
pub const EPS_STRICT: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ConicError {
    #[error("malformed program: {0}")]
    Malformed(String),
    #[error("numerical failure after {iterations} iterations ({detail})")]
    NumericalFailure { iterations: u32, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

/// Dense rows over a sparse triplet representation: `entries` hold
/// `(local_row, var, coeff)`.
#[derive(Debug, Clone, Default)]
pub struct LinearBlock {
    pub nrows: usize,
    pub entries: Vec<(usize, usize, f64)>,
    pub rhs: Vec<f64>,
}

impl LinearBlock {
    pub fn new(nrows: usize) -> Self {
        LinearBlock {
            nrows,
            entries: Vec::new(),
            rhs: vec![0.0; nrows],
        }
    }

    /// Dense constructor: one row `a . x (cmp) rhs` per row of `a`.
    pub fn from_dense(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Self {
        assert_eq!(a.nrows(), rhs.len());
        let mut blk = LinearBlock::new(a.nrows());
        for r in 0..a.nrows() {
            for c in 0..a.ncols() {
                if a[(r, c)] != 0.0 {
                    blk.entries.push((r, c, a[(r, c)]));
                }
            }
            blk.rhs[r] = rhs[r];
        }
        blk
    }

    pub fn push(&mut self, row: usize, var: usize, coeff: f64) {
        debug_assert!(row < self.nrows);
        if coeff != 0.0 {
            self.entries.push((row, var, coeff));
        }
    }
}

/// Affine symmetric-matrix map `F(x) = f0 + sum_i x_i f_i`.
#[derive(Debug, Clone)]
pub struct PsdBlock {
    pub dim: usize,
    pub f0: DMatrix<f64>,
    /// `(variable index, symmetric coefficient matrix)`
    pub coeffs: Vec<(usize, DMatrix<f64>)>,
}

impl PsdBlock {
    pub fn new(dim: usize, f0: DMatrix<f64>) -> Self {
        assert_eq!(f0.nrows(), dim);
        assert_eq!(f0.ncols(), dim);
        PsdBlock {
            dim,
            f0,
            coeffs: Vec::new(),
        }
    }

    pub fn add_coeff(&mut self, var: usize, m: DMatrix<f64>) {
        assert_eq!(m.nrows(), self.dim);
        assert_eq!(m.ncols(), self.dim);
        self.coeffs.push((var, m));
    }

    /// Evaluate `F(x)`.
    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = self.f0.clone();
        for (var, c) in &self.coeffs {
            m += c * x[*var];
        }
        m
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    /// `a . x = rhs`
    Equality(LinearBlock),
    /// `a . x <= rhs`
    Inequality(LinearBlock),
    /// `s = rhs - a . x` constrained to the second-order cone
    /// (`s[0] >= || s[1..] ||`).
    SecondOrder(LinearBlock),
    /// `F(x) >= 0` in the Loewner order.
    Psd(PsdBlock),
}

/// A declarative conic program: linear (plus optional convex quadratic)
/// objective over tagged constraint blocks.
#[derive(Debug, Clone)]
pub struct ConicProgram {
    pub num_vars: usize,
    /// Upper-triangular entries `(i, j, v)` of the quadratic cost matrix `P`
    /// in `0.5 x' P x`; empty for an LP.
    pub quad: Vec<(usize, usize, f64)>,
    pub linear: Vec<f64>,
    pub blocks: Vec<Block>,
    /// Initial-point hint. The interior-point backend does not use it but it
    /// is part of the facade contract and preserved for other backends.
    pub initial_hint: Option<Vec<f64>>,
}

impl ConicProgram {
    pub fn new(num_vars: usize) -> Self {
        ConicProgram {
            num_vars,
            quad: Vec::new(),
            linear: vec![0.0; num_vars],
            blocks: Vec::new(),
            initial_hint: None,
        }
    }

    pub fn add_block(&mut self, b: Block) -> usize {
        self.blocks.push(b);
        self.blocks.len() - 1
    }

    fn validate(&self) -> Result<(), ConicError> {
        if self.linear.len() != self.num_vars {
            return Err(ConicError::Malformed(format!(
                "linear cost has {} entries for {} variables",
                self.linear.len(),
                self.num_vars
            )));
        }
        for &(i, j, _) in &self.quad {
            if i > j || j >= self.num_vars {
                return Err(ConicError::Malformed(format!(
                    "quadratic entry ({i},{j}) out of range or not upper-triangular"
                )));
            }
        }
        for (bi, b) in self.blocks.iter().enumerate() {
            let check_lin = |lb: &LinearBlock| -> Result<(), ConicError> {
                if lb.rhs.len() != lb.nrows {
                    return Err(ConicError::Malformed(format!("block {bi}: rhs length")));
                }
                for &(r, v, _) in &lb.entries {
                    if r >= lb.nrows || v >= self.num_vars {
                        return Err(ConicError::Malformed(format!(
                            "block {bi}: entry ({r},{v}) out of range"
                        )));
                    }
                }
                Ok(())
            };
            match b {
                Block::Equality(lb) | Block::Inequality(lb) | Block::SecondOrder(lb) => {
                    check_lin(lb)?
                }
                Block::Psd(pb) => {
                    for (v, _) in &pb.coeffs {
                        if *v >= self.num_vars {
                            return Err(ConicError::Malformed(format!(
                                "block {bi}: psd coefficient for variable {v} out of range"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Text dump of objective and blocks for offline debugging.
    pub fn dump_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        writeln!(s, "conic program: {} variables", self.num_vars).unwrap();
        let nq = self.quad.len();
        writeln!(s, "objective: {} quadratic entries, linear {:?}", nq, self.linear).unwrap();
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                Block::Equality(lb) => {
                    writeln!(s, "block {i}: equality, {} rows, rhs {:?}", lb.nrows, lb.rhs)
                        .unwrap()
                }
                Block::Inequality(lb) => {
                    writeln!(s, "block {i}: nonneg, {} rows, rhs {:?}", lb.nrows, lb.rhs).unwrap()
                }
                Block::SecondOrder(lb) => {
                    writeln!(s, "block {i}: second-order, {} rows", lb.nrows).unwrap()
                }
                Block::Psd(pb) => writeln!(
                    s,
                    "block {i}: psd, dim {}, {} variable coefficients",
                    pb.dim,
                    pb.coeffs.len()
                )
                .unwrap(),
            }
        }
        s
    }
}

/// Solver knobs. One program = one solve context; instances are cheap.
#[derive(Debug, Clone)]
pub struct SolverOpts {
    pub max_iter: u32,
    pub tol_feas: f64,
    pub tol_gap_abs: f64,
    pub tol_gap_rel: f64,
    pub verbose: bool,
}

impl Default for SolverOpts {
    fn default() -> Self {
        SolverOpts {
            max_iter: 200,
            tol_feas: 1e-9,
            tol_gap_abs: 1e-9,
            tol_gap_rel: 1e-9,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: u32,
    /// Worst constraint violation found by the independent residual checker
    /// (only meaningful for `Optimal`).
    pub residual: f64,
}

/// A program lowered to backend form. Rebuilding `q`/`b` in place and
/// re-solving avoids re-deriving the sparsity pattern in receding-horizon
/// loops where the constraint matrix is constant.
pub struct LoweredProgram {
    num_vars: usize,
    p_csc: CscMatrix<f64>,
    a_csc: CscMatrix<f64>,
    cones: Vec<SupportedConeT<f64>>,
    pub q: Vec<f64>,
    pub b: Vec<f64>,
    /// Global row offset of each block, in block order.
    pub block_row_offsets: Vec<usize>,
}

fn csc_from_triplets(
    nrows: usize,
    ncols: usize,
    triplets: &[(usize, usize, f64)],
) -> CscMatrix<f64> {
    let mut per_col: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ncols];
    for &(r, c, v) in triplets {
        per_col[c].push((r, v));
    }
    let mut colptr = Vec::with_capacity(ncols + 1);
    let mut rowval = Vec::with_capacity(triplets.len());
    let mut nzval = Vec::with_capacity(triplets.len());
    colptr.push(0);
    for col in &mut per_col {
        col.sort_by_key(|&(r, _)| r);
        let mut last: Option<usize> = None;
        for &(r, v) in col.iter() {
            if last == Some(r) {
                let n = nzval.len();
                nzval[n - 1] += v;
            } else {
                rowval.push(r);
                nzval.push(v);
                last = Some(r);
            }
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(nrows, ncols, colptr, rowval, nzval)
}

impl LoweredProgram {
    pub fn from_program(prog: &ConicProgram) -> Result<Self, ConicError> {
        prog.validate()?;
        let mut a_triplets: Vec<(usize, usize, f64)> = Vec::new();
        let mut b: Vec<f64> = Vec::new();
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
        let mut offsets = Vec::with_capacity(prog.blocks.len());

        for blk in &prog.blocks {
            let row0 = b.len();
            offsets.push(row0);
            match blk {
                Block::Equality(lb) | Block::Inequality(lb) | Block::SecondOrder(lb) => {
                    for &(r, v, coeff) in &lb.entries {
                        a_triplets.push((row0 + r, v, coeff));
                    }
                    b.extend_from_slice(&lb.rhs);
                    cones.push(match blk {
                        Block::Equality(_) => SupportedConeT::ZeroConeT(lb.nrows),
                        Block::Inequality(_) => SupportedConeT::NonnegativeConeT(lb.nrows),
                        _ => SupportedConeT::SecondOrderConeT(lb.nrows),
                    });
                }
                Block::Psd(pb) => {
                    // s = svec(F(x)) = svec(f0) - (-svec(f_i)) x_i
                    let sv0 = linalg::svec(&pb.f0);
                    for (var, c) in &pb.coeffs {
                        let svc = linalg::svec(c);
                        for (k, val) in svc.iter().enumerate() {
                            if *val != 0.0 {
                                a_triplets.push((row0 + k, *var, -*val));
                            }
                        }
                    }
                    b.extend(sv0.iter());
                    cones.push(SupportedConeT::PSDTriangleConeT(pb.dim));
                }
            }
        }

        let nrows = b.len();
        let a_csc = csc_from_triplets(nrows, prog.num_vars, &a_triplets);
        let p_csc = csc_from_triplets(prog.num_vars, prog.num_vars, &prog.quad);
        Ok(LoweredProgram {
            num_vars: prog.num_vars,
            p_csc,
            a_csc,
            cones,
            q: prog.linear.clone(),
            b,
            block_row_offsets: offsets,
        })
    }

    /// Solve with the current `q` / `b` contents.
    pub fn solve(&self, opts: &SolverOpts) -> Result<Solution, ConicError> {
        let settings = DefaultSettingsBuilder::default()
            .verbose(opts.verbose)
            .max_iter(opts.max_iter)
            .tol_feas(opts.tol_feas)
            .tol_gap_abs(opts.tol_gap_abs)
            .tol_gap_rel(opts.tol_gap_rel)
            .build()
            .map_err(|e| ConicError::Malformed(format!("settings: {e}")))?;
        let mut solver =
            DefaultSolver::new(&self.p_csc, &self.q, &self.a_csc, &self.b, &self.cones, settings);
        solver.solve();
        let iterations = solver.solution.iterations;
        let status = match solver.solution.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => SolveStatus::Optimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                SolveStatus::Infeasible
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                SolveStatus::Unbounded
            }
            other => {
                return Err(ConicError::NumericalFailure {
                    iterations,
                    detail: format!("{other:?}"),
                })
            }
        };
        let x = DVector::from_vec(solver.solution.x.clone());
        let mut residual = f64::NAN;
        if status == SolveStatus::Optimal {
            residual = self.max_violation(x.as_slice());
            let scale = 1.0 + self.b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if residual > RESIDUAL_TOL * scale {
                return Err(ConicError::NumericalFailure {
                    iterations,
                    detail: format!(
                        "residual check failed: violation {residual:.3e} over scale {scale:.3e}"
                    ),
                });
            }
        }
        Ok(Solution {
            objective: solver.solution.obj_val,
            x,
            status,
            iterations,
            residual,
        })
    }

    /// All nonzero entries of the constraint matrix as `(row, col, value)`.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.a_csc.nzval.len());
        for col in 0..self.num_vars {
            for idx in self.a_csc.colptr[col]..self.a_csc.colptr[col + 1] {
                out.push((self.a_csc.rowval[idx], col, self.a_csc.nzval[idx]));
            }
        }
        out
    }

    /// Replace the quadratic cost (upper-triangular entries).
    pub fn set_quad(&mut self, quad: &[(usize, usize, f64)]) {
        self.p_csc = csc_from_triplets(self.num_vars, self.num_vars, quad);
    }

    /// Worst violation of `b - Ax` against its cone, recomputed from scratch.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut s = self.b.clone();
        // s = b - A x
        for col in 0..self.num_vars {
            let xv = x[col];
            if xv == 0.0 {
                continue;
            }
            for idx in self.a_csc.colptr[col]..self.a_csc.colptr[col + 1] {
                s[self.a_csc.rowval[idx]] -= self.a_csc.nzval[idx] * xv;
            }
        }
        let mut worst = 0.0f64;
        let mut row = 0usize;
        for cone in &self.cones {
            match cone {
                SupportedConeT::ZeroConeT(n) => {
                    for k in 0..*n {
                        worst = worst.max(s[row + k].abs());
                    }
                    row += n;
                }
                SupportedConeT::NonnegativeConeT(n) => {
                    for k in 0..*n {
                        worst = worst.max(-s[row + k]);
                    }
                    row += n;
                }
                SupportedConeT::SecondOrderConeT(n) => {
                    let head = s[row];
                    let tail: f64 = (1..*n).map(|k| s[row + k] * s[row + k]).sum::<f64>().sqrt();
                    worst = worst.max(tail - head);
                    row += n;
                }
                SupportedConeT::ExponentialConeT() => {
                    // (x, y, z): y exp(x/y) <= z, y > 0
                    let (ex, ey, ez) = (s[row], s[row + 1], s[row + 2]);
                    if ey <= 0.0 {
                        worst = worst.max(-ey + 1e-12);
                    } else {
                        worst = worst.max(ey * (ex / ey).exp() - ez);
                    }
                    row += 3;
                }
                SupportedConeT::PSDTriangleConeT(n) => {
                    let len = linalg::vech_len(*n);
                    let mut m = DMatrix::zeros(*n, *n);
                    let s2 = std::f64::consts::SQRT_2;
                    for j in 0..*n {
                        for i in 0..=j {
                            let v = s[row + linalg::vech_index(i, j)];
                            let v = if i == j { v } else { v / s2 };
                            m[(i, j)] = v;
                            m[(j, i)] = v;
                        }
                    }
                    worst = worst.max(-linalg::min_eig_sym(&m));
                    row += len;
                }
                _ => unreachable!("cone type not emitted by this facade"),
            }
        }
        worst
    }
}

/// Solve a declarative conic program.
pub fn solve_conic(prog: &ConicProgram) -> Result<Solution, ConicError> {
    solve_conic_with(prog, &SolverOpts::default())
}

pub fn solve_conic_with(prog: &ConicProgram, opts: &SolverOpts) -> Result<Solution, ConicError> {
    LoweredProgram::from_program(prog)?.solve(opts)
}

/// Independent residual report for a candidate point of a program.
pub fn check_residuals(prog: &ConicProgram, x: &[f64]) -> Result<f64, ConicError> {
    Ok(LoweredProgram::from_program(prog)?.max_violation(x))
}

// ---------------------------------------------------------------------------
// Max-det programs
// ---------------------------------------------------------------------------

/// `maximize log det S` over symmetric `S` subject to PSD blocks affine in
/// the packed upper triangle of `S` (variable indices `0..n(n+1)/2`,
/// `linalg::vech_index` layout). The semantics of `S` in the synthesis
/// pipeline is the inverse of the variance bound being computed.
#[derive(Debug, Clone)]
pub struct MaxDetProgram {
    pub dim: usize,
    pub blocks: Vec<PsdBlock>,
}

impl MaxDetProgram {
    pub fn new(dim: usize) -> Self {
        MaxDetProgram {
            dim,
            blocks: Vec::new(),
        }
    }

    pub fn add_block(&mut self, b: PsdBlock) {
        self.blocks.push(b);
    }

    pub fn dump_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        writeln!(
            s,
            "max-det program: S is {0}x{0} symmetric, {1} psd blocks",
            self.dim,
            self.blocks.len()
        )
        .unwrap();
        for (i, b) in self.blocks.iter().enumerate() {
            writeln!(s, "block {i}: dim {}, {} coefficients", b.dim, b.coeffs.len()).unwrap();
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct MaxDetSolution {
    pub s: DMatrix<f64>,
    /// `log det S` at the solution.
    pub objective: f64,
    pub status: SolveStatus,
}

/// Solve a max-det program via the triangular-factor + exponential-cone
/// encoding of the log-det objective.
pub fn solve_maxdet(prog: &MaxDetProgram) -> Result<MaxDetSolution, ConicError> {
    solve_maxdet_with(prog, &SolverOpts::default())
}

pub fn solve_maxdet_with(
    prog: &MaxDetProgram,
    opts: &SolverOpts,
) -> Result<MaxDetSolution, ConicError> {
    let n = prog.dim;
    let nv = linalg::vech_len(n);
    for b in &prog.blocks {
        for (v, _) in &b.coeffs {
            if *v >= nv {
                return Err(ConicError::Malformed(format!(
                    "max-det block references variable {v}, but S has {nv} packed entries"
                )));
            }
        }
    }

    // Variable layout: [vech(S) | lower-tri Z (packed by vech_index of (j,i)) | t]
    let z_base = nv;
    let t_base = z_base + nv;
    let total = t_base + n;
    // z entry for (i, j) with i >= j stored at z_base + vech_index(j, i).
    let z_idx = |i: usize, j: usize| z_base + linalg::vech_index(j, i);

    let mut lowered = ConicProgram::new(total);
    for i in 0..n {
        lowered.linear[t_base + i] = -1.0;
    }

    // [S, Z; Z', diag(Z)] >= 0
    let mut big = PsdBlock::new(2 * n, DMatrix::zeros(2 * n, 2 * n));
    for j in 0..n {
        for i in 0..=j {
            let mut c = DMatrix::zeros(2 * n, 2 * n);
            c[(i, j)] = 1.0;
            c[(j, i)] = 1.0;
            big.add_coeff(linalg::vech_index(i, j), c);
        }
    }
    for i in 0..n {
        for j in 0..=i {
            let mut c = DMatrix::zeros(2 * n, 2 * n);
            c[(i, n + j)] = 1.0;
            c[(n + j, i)] = 1.0;
            if i == j {
                c[(n + i, n + i)] = 1.0;
            }
            big.add_coeff(z_idx(i, j), c);
        }
    }
    lowered.add_block(Block::Psd(big));

    // user blocks operate on the same leading vech(S) indices
    for b in &prog.blocks {
        lowered.add_block(Block::Psd(b.clone()));
    }

    // t_i <= log Z_ii as (t_i, 1, Z_ii) in the exponential cone. The facade
    // has no exp tag, so these rows are appended on the lowered form.
    let mut lp = LoweredProgram::from_program(&lowered)?;
    {
        let row0 = lp.b.len();
        let mut extra: Vec<(usize, usize, f64)> = Vec::new();
        for i in 0..n {
            let r = row0 + 3 * i;
            extra.push((r, t_base + i, -1.0));
            extra.push((r + 2, z_idx(i, i), -1.0));
            lp.b.extend_from_slice(&[0.0, 1.0, 0.0]);
            lp.cones.push(SupportedConeT::ExponentialConeT());
        }
        // rebuild A with the exp-cone rows appended
        let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
        for col in 0..lp.num_vars {
            for idx in lp.a_csc.colptr[col]..lp.a_csc.colptr[col + 1] {
                triplets.push((lp.a_csc.rowval[idx], col, lp.a_csc.nzval[idx]));
            }
        }
        triplets.extend(extra);
        lp.a_csc = csc_from_triplets(lp.b.len(), lp.num_vars, &triplets);
    }

    let sol = lp.solve(opts)?;
    if sol.status != SolveStatus::Optimal {
        return Ok(MaxDetSolution {
            s: DMatrix::zeros(n, n),
            objective: f64::NEG_INFINITY,
            status: sol.status,
        });
    }

    let s_mat = linalg::unvech(n, &sol.x.as_slice()[..nv]);
    // mandatory independent re-check of the original blocks
    let mut worst = -linalg::min_eig_sym(&s_mat);
    for b in &prog.blocks {
        worst = worst.max(-linalg::min_eig_sym(&b.eval(&sol.x.as_slice()[..nv])));
    }
    let scale = 1.0 + s_mat.amax();
    if worst > RESIDUAL_TOL * scale {
        return Err(ConicError::NumericalFailure {
            iterations: sol.iterations,
            detail: format!("max-det residual check failed: min-eig violation {worst:.3e}"),
        });
    }
    let objective = linalg::log_det_spd(&s_mat)
        .unwrap_or_else(|| (0..n).map(|i| sol.x[t_base + i]).sum());
    Ok(MaxDetSolution {
        s: s_mat,
        objective,
        status: SolveStatus::Optimal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn lp_min_x_above_three() {
        // min x s.t. x >= 3
        let mut prog = ConicProgram::new(1);
        prog.linear[0] = 1.0;
        let mut blk = LinearBlock::new(1);
        blk.push(0, 0, -1.0);
        blk.rhs[0] = -3.0;
        prog.add_block(Block::Inequality(blk));
        let sol = solve_conic(&prog).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 3.0, epsilon = 1e-7);
        assert_abs_diff_eq!(sol.objective, 3.0, epsilon = 1e-7);
    }

    #[test]
    fn qp_symmetric_split() {
        // min x1^2 + x2^2 s.t. x1 + x2 = 1  ->  (0.5, 0.5)
        let mut prog = ConicProgram::new(2);
        prog.quad = vec![(0, 0, 2.0), (1, 1, 2.0)];
        let mut blk = LinearBlock::new(1);
        blk.push(0, 0, 1.0);
        blk.push(0, 1, 1.0);
        blk.rhs[0] = 1.0;
        prog.add_block(Block::Equality(blk));
        let sol = solve_conic(&prog).unwrap();
        assert_abs_diff_eq!(sol.x[0], 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(sol.x[1], 0.5, epsilon = 1e-7);
    }

    #[test]
    fn lp_unbounded_and_infeasible() {
        // min -x with x >= 0 only: unbounded
        let mut prog = ConicProgram::new(1);
        prog.linear[0] = -1.0;
        let mut blk = LinearBlock::new(1);
        blk.push(0, 0, -1.0);
        prog.add_block(Block::Inequality(blk));
        assert_eq!(solve_conic(&prog).unwrap().status, SolveStatus::Unbounded);

        // x <= -1 and x >= 0: infeasible
        let mut prog = ConicProgram::new(1);
        let mut blk = LinearBlock::new(2);
        blk.push(0, 0, 1.0);
        blk.rhs[0] = -1.0;
        blk.push(1, 0, -1.0);
        prog.add_block(Block::Inequality(blk));
        assert_eq!(solve_conic(&prog).unwrap().status, SolveStatus::Infeasible);
    }

    #[test]
    fn soc_norm_bound() {
        // min t s.t. ||(3, 4)|| <= t
        let mut prog = ConicProgram::new(1);
        prog.linear[0] = 1.0;
        let mut blk = LinearBlock::new(3);
        blk.push(0, 0, -1.0); // s0 = t
        blk.rhs = vec![0.0, -3.0, -4.0]; // s1 = -3 ... sign irrelevant for the norm
        prog.add_block(Block::SecondOrder(blk));
        let sol = solve_conic(&prog).unwrap();
        assert_abs_diff_eq!(sol.x[0], 5.0, epsilon = 1e-6);
    }

    fn dominated_by(limit: DMatrix<f64>) -> PsdBlock {
        // limit - S >= 0
        let n = limit.nrows();
        let mut blk = PsdBlock::new(n, limit);
        for j in 0..n {
            for i in 0..=j {
                let mut c = DMatrix::zeros(n, n);
                c[(i, j)] = -1.0;
                c[(j, i)] = -1.0;
                blk.add_coeff(linalg::vech_index(i, j), c);
            }
        }
        blk
    }

    #[test]
    fn maxdet_identity_cap() {
        let mut prog = MaxDetProgram::new(2);
        prog.add_block(dominated_by(DMatrix::identity(2, 2)));
        let sol = solve_maxdet(&prog).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_abs_diff_eq!(sol.objective, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.s[(0, 0)], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(sol.s[(1, 1)], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(sol.s[(0, 1)], 0.0, epsilon = 1e-5);
    }

    #[test]
    fn maxdet_diagonal_cap() {
        let mut prog = MaxDetProgram::new(2);
        prog.add_block(dominated_by(DMatrix::from_diagonal(
            &DVector::from_vec(vec![2.0, 3.0]),
        )));
        let sol = solve_maxdet(&prog).unwrap();
        assert_abs_diff_eq!(sol.objective, 6.0f64.ln(), epsilon = 1e-5);
        assert_abs_diff_eq!(sol.s[(0, 0)], 2.0, epsilon = 1e-4);
        assert_abs_diff_eq!(sol.s[(1, 1)], 3.0, epsilon = 1e-4);
    }

    #[test]
    fn maxdet_extra_block_never_increases_objective() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let mut rand_spd = || {
                let raw = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
                &raw * raw.transpose() + DMatrix::identity(2, 2) * 0.3
            };
            let cap_a = rand_spd() * 2.0;
            let cap_b = rand_spd() * 2.0;
            let mut base = MaxDetProgram::new(2);
            base.add_block(dominated_by(cap_a.clone()));
            let mut tightened = MaxDetProgram::new(2);
            tightened.add_block(dominated_by(cap_a));
            tightened.add_block(dominated_by(cap_b));
            let o1 = solve_maxdet(&base).unwrap().objective;
            let o2 = solve_maxdet(&tightened).unwrap().objective;
            assert!(o2 <= o1 + 1e-6, "monotonicity violated: {o2} > {o1}");
        }
    }

    #[test]
    fn residual_checker_catches_bad_point() {
        let mut prog = ConicProgram::new(1);
        let mut blk = LinearBlock::new(1);
        blk.push(0, 0, 1.0);
        blk.rhs[0] = 1.0;
        prog.add_block(Block::Inequality(blk));
        let viol = check_residuals(&prog, &[2.0]).unwrap();
        assert_abs_diff_eq!(viol, 1.0, epsilon = 1e-12);
        let ok = check_residuals(&prog, &[0.5]).unwrap();
        assert!(ok <= 0.0);
    }

    #[test]
    fn dump_is_textual() {
        let mut prog = ConicProgram::new(1);
        prog.add_block(Block::Inequality(LinearBlock::new(1)));
        assert!(prog.dump_text().contains("nonneg"));
        let md = MaxDetProgram::new(2);
        assert!(md.dump_text().contains("max-det"));
    }
}
