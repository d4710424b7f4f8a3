//! The receding-horizon problem solved at every step.
//!
//! Decision variables are the input corrections `v`, the tube centers `s`
//! and scalings `alpha`, and the containment dual multipliers `Lambda`. The
//! measured state never appears in a constraint: the predicted trajectory
//! under the current parameter estimate is eliminated into the cost, so the
//! measurement enters only through the linear cost term (and, at `k = 0`,
//! the tube initialization). That is the indirect-feedback structure that
//! keeps the tube rows independent of the realized noise.
//!
//! The constraint matrix is identical at every step of a run; only the
//! right-hand side (tube initialization, time-indexed tightening, noise-mean
//! segment) and the linear cost move. The program is lowered once per
//! controller and patched in place between solves.

use crate::conic::{
    self, Block, ConicProgram, LinearBlock, LoweredProgram, SolveStatus, SolverOpts,
};
use crate::qp::{QpData, QpSettings, QpSolution, QpStatus, QpWorkspace};
use crate::linalg;
use crate::model::{FeedbackGain, UncertainLTISystem};
use crate::polytope::Polytope;
use crate::rprs::Tightening;
use crate::tube::{
    containment_worst_residual, CandidateMap, HomotheticTube, TerminalSet, TubeError,
};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("problem infeasible at step {step}")]
    Infeasible { step: usize },
    #[error("parameter estimate lies outside the uncertainty set and projection is disabled")]
    EstimateOutsideTheta,
    #[error("a previous solution is required for every step after the first")]
    MissingPrevSolution,
    #[error("bad controller configuration: {0}")]
    BadConfig(String),
    #[error("solver failure: {0}")]
    Solver(#[from] conic::ConicError),
    #[error(transparent)]
    Tube(#[from] TubeError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Polytope(#[from] crate::polytope::PolytopeError),
}

/// Everything the controller needs besides the system description.
#[derive(Debug, Clone)]
pub struct MpcConfig {
    pub horizon: usize,
    pub q_cost: DMatrix<f64>,
    pub r_cost: DMatrix<f64>,
    pub p_term: DMatrix<f64>,
    pub tightening: Tightening,
    pub terminal: TerminalSet,
    /// Tube base polytope (unit offsets).
    pub base: Polytope,
    /// Known noise-mean profile by absolute time (empty for zero mean;
    /// indices beyond the end clamp to the last entry).
    pub mean_profile: Vec<DVector<f64>>,
    /// Project out-of-set parameter estimates instead of erroring.
    pub project_estimate: bool,
    /// Tiny linear weight on the tube scalings. The scalings carry no cost
    /// of their own, so without this the solver returns an arbitrary point
    /// of the degenerate optimal face; the tie-break keeps tubes minimal.
    /// Removed from the reported objective.
    pub alpha_tiebreak: f64,
    pub solver: SolverOpts,
}

impl MpcConfig {
    pub fn validate(&self, sys: &UncertainLTISystem) -> Result<(), MpcError> {
        let n = sys.state_dim();
        let m = sys.input_dim();
        if self.horizon == 0 {
            return Err(MpcError::BadConfig("horizon must be at least 1".into()));
        }
        if self.q_cost.nrows() != n || linalg::min_eig_sym(&self.q_cost) < -1e-9 {
            return Err(MpcError::BadConfig("Q must be n x n PSD".into()));
        }
        if self.r_cost.nrows() != m || !linalg::is_spd(&self.r_cost, 1e-9, 0.0) {
            return Err(MpcError::BadConfig("R must be m x m SPD".into()));
        }
        if self.p_term.nrows() != n || !linalg::is_spd(&self.p_term, 1e-7, 0.0) {
            return Err(MpcError::BadConfig("terminal weight must be n x n SPD".into()));
        }
        if !self.base.has_unit_offsets() || self.base.dim() != n {
            return Err(MpcError::BadConfig("tube base must be unit-offset in R^n".into()));
        }
        if self.terminal.state_dim() != n {
            return Err(MpcError::BadConfig("terminal set dimension mismatch".into()));
        }
        for w in &self.mean_profile {
            if w.len() != n {
                return Err(MpcError::BadConfig("mean profile entries must be in R^n".into()));
            }
        }
        Ok(())
    }

    fn mean_at(&self, k: usize) -> DVector<f64> {
        match self.mean_profile.last() {
            None => DVector::zeros(self.q_cost.nrows()),
            Some(last) => self
                .mean_profile
                .get(k)
                .cloned()
                .unwrap_or_else(|| last.clone()),
        }
    }
}

/// One optimal step: inputs, tube, duals, and the predicted trajectory under
/// the parameter estimate used in the cost.
#[derive(Debug, Clone)]
pub struct MpcStepSolution {
    pub v: Vec<DVector<f64>>,
    pub tube: HomotheticTube,
    /// `lambdas[i][j]` is the multiplier block for step `i`, base vertex `j`.
    pub lambdas: Vec<Vec<DMatrix<f64>>>,
    pub x_pred: Vec<DVector<f64>>,
    pub u_pred: Vec<DVector<f64>>,
    /// `K x_true + v_0`, the input actually applied.
    pub applied_u: DVector<f64>,
    pub objective: f64,
    pub iterations: u32,
    pub residual: f64,
}

/// Shift-based warm-start candidate and recursive-feasibility witness.
#[derive(Debug, Clone)]
pub struct ShiftedCandidate {
    pub v: Vec<DVector<f64>>,
    pub s: Vec<DVector<f64>>,
    pub alpha: Vec<f64>,
}

struct CostMaps {
    /// Quadratic cost entries over `v` (upper triangle of `2 H`).
    quad: Vec<(usize, usize, f64)>,
    /// Linear term contribution of the measured state: `q_v = 2 Gx x0 + ...`
    g_x: DMatrix<f64>,
    /// ... and of the stacked noise-mean segment.
    g_w: DMatrix<f64>,
    /// Constant-term quadratic forms for objective reporting.
    c_xx: DMatrix<f64>,
    c_xw: DMatrix<f64>,
    c_ww: DMatrix<f64>,
    /// Prediction maps for reconstructing `x_pred` from `(x0, v, wseg)`.
    sx: DMatrix<f64>,
    sv: DMatrix<f64>,
    sw: DMatrix<f64>,
}

/// A controller instance: the lowered program plus the index maps needed to
/// patch it between steps. One instance per closed-loop run; strictly
/// sequential.
pub struct MpcProblem {
    pub sys: UncertainLTISystem,
    pub gain: FeedbackGain,
    pub cfg: MpcConfig,
    lowered: LoweredProgram,
    // variable layout
    num_vars: usize,
    v0_var: usize,
    s0_var: usize,
    alpha0_var: usize,
    lam0_var: usize,
    // patchable row ranges (global rows)
    ineq_row0: usize,
    state_rows0: usize,
    input_rows0: usize,
    tube_rows0: usize,
    cost: CostMaps,
    cached_theta: Option<DVector<f64>>,
    candidate_map: CandidateMap,
    drift_support: DVector<f64>,
    qp: Option<QpWorkspace>,
    qp_stale: bool,
}

fn sym_quad_upper(h: &DMatrix<f64>) -> Vec<(usize, usize, f64)> {
    // upper triangle of 2H, dropping numerically zero entries
    let n = h.nrows();
    let mut out = Vec::new();
    for j in 0..n {
        for i in 0..=j {
            let v = h[(i, j)] + h[(j, i)]; // = 2 * sym part
            if v.abs() > 1e-14 {
                out.push((i, j, v));
            }
        }
    }
    out
}

impl MpcProblem {
    pub fn new(
        sys: &UncertainLTISystem,
        gain: &FeedbackGain,
        cfg: MpcConfig,
    ) -> Result<Self, MpcError> {
        cfg.validate(sys)?;
        let n = sys.state_dim();
        let m = sys.input_dim();
        let big_n = cfg.horizon;
        let base = &cfg.base;
        let r = base.num_facets();
        let v1 = base.vertices()?.len();
        let q = sys.theta_set.num_facets();
        let p = sys.param_dim();
        let n_x = sys.x_set.num_facets();
        let n_u = sys.u_set.num_facets();

        // variable layout: [v | s | alpha | Lambda]
        let v0_var = 0;
        let s0_var = big_n * m;
        let alpha0_var = s0_var + (big_n + 1) * n;
        let lam0_var = alpha0_var + (big_n + 1);
        let lam_block = r * q;
        let num_vars = lam0_var + big_n * v1 * lam_block;
        let idx_v = |i: usize, l: usize| v0_var + i * m + l;
        let idx_s = |i: usize, c: usize| s0_var + i * n + c;
        let idx_alpha = |i: usize| alpha0_var + i;
        let idx_lam = |i: usize, j: usize, rho: usize, c: usize| {
            lam0_var + (i * v1 + j) * lam_block + rho * q + c
        };

        let a_cl0 = &sys.a_mats[0] + &sys.b_mats[0] * &gain.k;
        let hz = base.h().clone();
        let h_theta = sys.theta_set.h().clone();
        let theta_offs = sys.theta_set.offsets();
        let zverts: Vec<DVector<f64>> = base.vertices()?.to_vec();

        // support of the base under the constraint rows
        let mut f_bar = DVector::zeros(n_x);
        for row in 0..n_x {
            f_bar[row] = base.support(&sys.x_set.row(row))?;
        }
        let mut g_bar = DVector::zeros(n_u);
        for row in 0..n_u {
            g_bar[row] = base.support(&(gain.k.transpose() * sys.u_set.row(row)))?;
        }

        // ---- equality block: tube init, then stationarity ----
        let mut eq = LinearBlock::new(n + 1 + big_n * v1 * r * p);
        for c in 0..n {
            eq.push(c, idx_s(0, c), 1.0);
        }
        eq.push(n, idx_alpha(0), 1.0);
        let mut cursor = n + 1;
        for i in 0..big_n {
            for (j, zv) in zverts.iter().enumerate() {
                // Hz D^j_i = Lambda^j_i H_theta, columns l = 1..p:
                // D column l = A_l p + B_l (K p + v), p = s_i + alpha_i z^j
                for rho in 0..r {
                    for l in 0..p {
                        let row = cursor + rho * p + l;
                        let a_cl_l = &sys.a_mats[l + 1] + &sys.b_mats[l + 1] * &gain.k;
                        let hz_row = hz.row(rho).transpose();
                        let coef_s = a_cl_l.transpose() * &hz_row;
                        for c in 0..n {
                            eq.push(row, idx_s(i, c), coef_s[c]);
                        }
                        eq.push(row, idx_alpha(i), coef_s.dot(zv));
                        let coef_v = sys.b_mats[l + 1].transpose() * &hz_row;
                        for c in 0..m {
                            eq.push(row, idx_v(i, c), coef_v[c]);
                        }
                        for c in 0..q {
                            eq.push(row, idx_lam(i, j, rho, c), -h_theta[(c, l)]);
                        }
                    }
                }
                cursor += r * p;
            }
        }
        // ---- inequality block ----
        let state_rows = (big_n + 1) * n_x;
        let input_rows = big_n * n_u;
        let term_rows = cfg.terminal.num_rows();
        let tube_rows = big_n * v1 * r;
        let alpha_rows = big_n;
        let lam_rows = big_n * v1 * lam_block;
        let mut ineq =
            LinearBlock::new(state_rows + input_rows + term_rows + tube_rows + alpha_rows + lam_rows);
        let state_rows0 = 0usize;
        for i in 0..=big_n {
            for row in 0..n_x {
                let rr = state_rows0 + i * n_x + row;
                for c in 0..n {
                    ineq.push(rr, idx_s(i, c), sys.x_set.h()[(row, c)]);
                }
                ineq.push(rr, idx_alpha(i), f_bar[row]);
                // rhs patched per step
            }
        }
        let input_rows0 = state_rows;
        for i in 0..big_n {
            for row in 0..n_u {
                let rr = input_rows0 + i * n_u + row;
                let gk = gain.k.transpose() * sys.u_set.row(row);
                for c in 0..n {
                    ineq.push(rr, idx_s(i, c), gk[c]);
                }
                for c in 0..m {
                    ineq.push(rr, idx_v(i, c), sys.u_set.h()[(row, c)]);
                }
                ineq.push(rr, idx_alpha(i), g_bar[row]);
            }
        }
        let term_rows0 = input_rows0 + input_rows;
        for row in 0..term_rows {
            let rr = term_rows0 + row;
            for c in 0..n {
                ineq.push(rr, idx_s(big_n, c), cfg.terminal.h_s[(row, c)]);
            }
            ineq.push(rr, idx_alpha(big_n), cfg.terminal.h_alpha[row]);
            ineq.rhs[rr] = cfg.terminal.offsets[row];
        }
        let tube_rows0 = term_rows0 + term_rows;
        for i in 0..big_n {
            for (j, zv) in zverts.iter().enumerate() {
                for rho in 0..r {
                    let rr = tube_rows0 + (i * v1 + j) * r + rho;
                    let hz_row = hz.row(rho).transpose();
                    let coef_s = a_cl0.transpose() * &hz_row;
                    for c in 0..n {
                        ineq.push(rr, idx_s(i, c), coef_s[c]);
                        ineq.push(rr, idx_s(i + 1, c), -hz_row[c]);
                    }
                    ineq.push(rr, idx_alpha(i), coef_s.dot(zv));
                    ineq.push(rr, idx_alpha(i + 1), -base.offset(rho));
                    let coef_v = sys.b_mats[0].transpose() * &hz_row;
                    for c in 0..m {
                        ineq.push(rr, idx_v(i, c), coef_v[c]);
                    }
                    for c in 0..q {
                        ineq.push(rr, idx_lam(i, j, rho, c), theta_offs[c]);
                    }
                    // rhs = -(Hz wbar_{k+i})_rho, patched per step
                }
            }
        }
        let alpha_rows0 = tube_rows0 + tube_rows;
        for i in 1..=big_n {
            ineq.push(alpha_rows0 + i - 1, idx_alpha(i), -1.0);
        }
        let lam_rows0 = alpha_rows0 + alpha_rows;
        for idx in 0..lam_rows {
            ineq.push(lam_rows0 + idx, lam0_var + idx, -1.0);
        }

        let mut prog = ConicProgram::new(num_vars);
        for i in 1..=big_n {
            prog.linear[idx_alpha(i)] = cfg.alpha_tiebreak;
        }
        prog.add_block(Block::Equality(eq));
        prog.add_block(Block::Inequality(ineq));
        let lowered = LoweredProgram::from_program(&prog)?;
        let ineq_row0 = lowered.block_row_offsets[1];

        let drift_support = drift_support(base, &cfg.mean_profile);
        let candidate_map = CandidateMap::new(sys, gain, base, &drift_support)?;
        let cost = build_cost_maps(sys, gain, &cfg, &DVector::zeros(p));

        Ok(MpcProblem {
            sys: sys.clone(),
            gain: gain.clone(),
            cfg,
            lowered,
            qp: None,
            qp_stale: true,
            num_vars,
            v0_var,
            s0_var,
            alpha0_var,
            lam0_var,
            ineq_row0,
            state_rows0,
            input_rows0,
            tube_rows0,
            cost,
            cached_theta: None,
            candidate_map,
            drift_support,
        })
    }

    pub fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    pub fn drift_support(&self) -> &DVector<f64> {
        &self.drift_support
    }

    pub fn candidate_map(&self) -> &CandidateMap {
        &self.candidate_map
    }

    fn refresh_cost(&mut self, theta_bar: &DVector<f64>) {
        if self.cached_theta.as_ref() == Some(theta_bar) {
            return;
        }
        self.cost = build_cost_maps(&self.sys, &self.gain, &self.cfg, theta_bar);
        self.cached_theta = Some(theta_bar.clone());
        // the Hessian changed: the splitting workspace must be rebuilt
        self.qp_stale = true;
    }

    /// Bounds in `l <= row <= u` form from the lowered right-hand side.
    fn qp_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let eq_rows = self.ineq_row0;
        let total = self.lowered.b.len();
        let mut l = vec![-crate::qp::QP_INF; total];
        let mut u = Vec::with_capacity(total);
        u.extend_from_slice(&self.lowered.b);
        for r in 0..eq_rows {
            l[r] = self.lowered.b[r];
        }
        (l, u)
    }

    fn ensure_qp(&mut self) -> Result<(), MpcError> {
        if self.qp.is_some() && !self.qp_stale {
            return Ok(());
        }
        let (l, u) = self.qp_bounds();
        let data = QpData {
            n: self.num_vars,
            m: self.lowered.b.len(),
            p_upper: self.cost.quad.clone(),
            q: self.lowered.q.clone(),
            a: self.lowered.triplets(),
            l,
            u,
        };
        self.qp = Some(QpWorkspace::new(&data, QpSettings::default())?);
        self.qp_stale = false;
        Ok(())
    }

    /// Project an estimate onto the parameter polytope if needed.
    pub fn admissible_estimate(&self, theta_bar: &DVector<f64>) -> Result<DVector<f64>, MpcError> {
        if self.sys.param_dim() == 0 || self.sys.theta_set.contains(theta_bar, 1e-9) {
            return Ok(theta_bar.clone());
        }
        if !self.cfg.project_estimate {
            return Err(MpcError::EstimateOutsideTheta);
        }
        Ok(crate::sim::project_onto_polytope(&self.sys.theta_set, theta_bar)?)
    }

    fn mean_segment(&self, k: usize) -> Vec<DVector<f64>> {
        (0..self.cfg.horizon).map(|i| self.cfg.mean_at(k + i)).collect()
    }

    /// Patch the lowered program in place for step `k` and return the pieces
    /// needed afterwards.
    fn patch(
        &mut self,
        x_true: &DVector<f64>,
        theta_bar: &DVector<f64>,
        prev: Option<&MpcStepSolution>,
        k: usize,
    ) -> Result<(DVector<f64>, f64, Vec<DVector<f64>>), MpcError> {
        let n = self.sys.state_dim();
        let n_x = self.sys.x_set.num_facets();
        let n_u = self.sys.u_set.num_facets();
        let big_n = self.cfg.horizon;
        let base = &self.cfg.base;
        let (s_init, alpha_init) = match prev {
            None if k == 0 => (x_true.clone(), 0.0),
            None => return Err(MpcError::MissingPrevSolution),
            Some(sol) => (sol.tube.center(1), sol.tube.scaling(1)),
        };
        for c in 0..n {
            self.lowered.b[c] = s_init[c];
        }
        self.lowered.b[n] = alpha_init;

        let wseg = self.mean_segment(k);
        let row0 = self.ineq_row0;
        for i in 0..=big_n {
            let f = self.cfg.tightening.f_at(k + i);
            for row in 0..n_x {
                self.lowered.b[row0 + self.state_rows0 + i * n_x + row] =
                    self.sys.x_set.offset(row) - f[row];
            }
        }
        for i in 0..big_n {
            let g = self.cfg.tightening.g_at(k + i);
            for row in 0..n_u {
                self.lowered.b[row0 + self.input_rows0 + i * n_u + row] =
                    self.sys.u_set.offset(row) - g[row];
            }
        }
        if !self.cfg.mean_profile.is_empty() {
            let r = base.num_facets();
            let v1 = base.vertices()?.len();
            for i in 0..big_n {
                let hw = base.h() * &wseg[i];
                for j in 0..v1 {
                    for rho in 0..r {
                        self.lowered.b[row0 + self.tube_rows0 + (i * v1 + j) * r + rho] = -hw[rho];
                    }
                }
            }
        }

        // linear cost over v from (x0, wseg)
        self.refresh_cost(theta_bar);
        let wstack = stack(&wseg);
        let qv = &self.cost.g_x * x_true + &self.cost.g_w * &wstack;
        for (i, val) in qv.iter().enumerate() {
            self.lowered.q[self.v0_var + i] = 2.0 * val;
        }
        Ok((s_init, alpha_init, wseg))
    }

    /// Assemble the step program in declarative form (audit/tests); the hot
    /// path uses the pre-lowered copy instead.
    pub fn assemble(
        &mut self,
        x_true: &DVector<f64>,
        theta_bar: &DVector<f64>,
        prev: Option<&MpcStepSolution>,
        k: usize,
    ) -> Result<ConicProgram, MpcError> {
        let theta_bar = self.admissible_estimate(theta_bar)?;
        self.patch(x_true, &theta_bar, prev, k)?;
        // reconstruct a ConicProgram view of the patched data
        let mut prog = ConicProgram::new(self.num_vars);
        prog.linear = self.lowered.q.clone();
        prog.quad = self.cost.quad.clone();
        let eq_rows = self.ineq_row0;
        let total_rows = self.lowered.b.len();
        let mut eq = LinearBlock::new(eq_rows);
        let mut ineq = LinearBlock::new(total_rows - eq_rows);
        for (row, col, val) in self.lowered.triplets() {
            if row < eq_rows {
                eq.push(row, col, val);
            } else {
                ineq.push(row - eq_rows, col, val);
            }
        }
        eq.rhs.copy_from_slice(&self.lowered.b[..eq_rows]);
        ineq.rhs.copy_from_slice(&self.lowered.b[eq_rows..]);
        prog.add_block(Block::Equality(eq));
        prog.add_block(Block::Inequality(ineq));
        Ok(prog)
    }

    /// Solve one step. `Infeasible` is surfaced, never patched over.
    pub fn solve_step(
        &mut self,
        x_true: &DVector<f64>,
        theta_bar: &DVector<f64>,
        prev: Option<&MpcStepSolution>,
        k: usize,
    ) -> Result<MpcStepSolution, MpcError> {
        let theta_bar = self.admissible_estimate(theta_bar)?;
        let (_s0, _a0, wseg) = self.patch(x_true, &theta_bar, prev, k)?;
        self.ensure_qp()?;

        // fast path: warm-started operator splitting on the fixed KKT
        let qp_sol: Option<QpSolution> = {
            let (l, u) = self.qp_bounds();
            let ws = self.qp.as_mut().expect("workspace ensured above");
            ws.update_linear_cost(&self.lowered.q);
            ws.update_bounds(&l, &u);
            ws.solve().ok()
        };
        if let Some(qs) = &qp_sol {
            if qs.status == QpStatus::Solved {
                let violation = self.lowered.max_violation(&qs.x);
                let scale = 1.0
                    + self
                        .lowered
                        .b
                        .iter()
                        .fold(0.0f64, |m, v| m.max(v.abs()));
                if violation <= conic::RESIDUAL_TOL * scale {
                    let objective = self.raw_objective(&qs.x);
                    let sol = conic::Solution {
                        x: DVector::from_column_slice(&qs.x),
                        objective,
                        status: SolveStatus::Optimal,
                        iterations: qs.iterations as u32,
                        residual: violation,
                    };
                    return self.extract(x_true, &wseg, sol);
                }
            }
        }
        // slow path: interior point; also confirms any infeasibility claim
        if let Some(ws) = self.qp.as_mut() {
            ws.reset_warm_start();
        }
        self.lowered.set_quad(&self.cost.quad);
        let sol = self.lowered.solve(&self.cfg.solver)?;
        match sol.status {
            SolveStatus::Optimal => {}
            SolveStatus::Infeasible => return Err(MpcError::Infeasible { step: k }),
            SolveStatus::Unbounded => {
                return Err(MpcError::Solver(conic::ConicError::NumericalFailure {
                    iterations: sol.iterations,
                    detail: "step program unbounded".into(),
                }))
            }
        }
        self.extract(x_true, &wseg, sol)
    }

    /// `0.5 x' P x + q' x` over the current program data.
    fn raw_objective(&self, x: &[f64]) -> f64 {
        let mut quad = 0.0;
        for &(i, j, v) in &self.cost.quad {
            quad += if i == j {
                0.5 * v * x[i] * x[i]
            } else {
                v * x[i] * x[j]
            };
        }
        quad + self
            .lowered
            .q
            .iter()
            .zip(x)
            .map(|(a, b)| a * b)
            .sum::<f64>()
    }

    fn extract(
        &self,
        x_true: &DVector<f64>,
        wseg: &[DVector<f64>],
        sol: conic::Solution,
    ) -> Result<MpcStepSolution, MpcError> {
        let n = self.sys.state_dim();
        let m = self.sys.input_dim();
        let big_n = self.cfg.horizon;
        let base = &self.cfg.base;
        let r = base.num_facets();
        let q = self.sys.theta_set.num_facets();
        let v1 = base.vertices()?.len();
        let x = &sol.x;

        let v: Vec<DVector<f64>> = (0..big_n)
            .map(|i| DVector::from_fn(m, |l, _| x[self.v0_var + i * m + l]))
            .collect();
        let centers: Vec<DVector<f64>> = (0..=big_n)
            .map(|i| DVector::from_fn(n, |c, _| x[self.s0_var + i * n + c]))
            .collect();
        let scalings: Vec<f64> = (0..=big_n)
            .map(|i| x[self.alpha0_var + i].max(0.0))
            .collect();
        let lam_block = r * q;
        let lambdas: Vec<Vec<DMatrix<f64>>> = (0..big_n)
            .map(|i| {
                (0..v1)
                    .map(|j| {
                        DMatrix::from_fn(r, q, |rho, c| {
                            x[self.lam0_var + (i * v1 + j) * lam_block + rho * q + c]
                        })
                    })
                    .collect()
            })
            .collect();

        // predicted trajectory under theta_bar for the cost (reporting)
        let vstack = stack(&v);
        let wstack = stack(wseg);
        let xstack = &self.cost.sx * x_true + &self.cost.sv * &vstack + &self.cost.sw * &wstack;
        let x_pred: Vec<DVector<f64>> = (0..=big_n)
            .map(|i| DVector::from_fn(n, |c, _| xstack[i * n + c]))
            .collect();
        let u_pred: Vec<DVector<f64>> = (0..big_n)
            .map(|i| &self.gain.k * &x_pred[i] + &v[i])
            .collect();
        let tiebreak: f64 =
            self.cfg.alpha_tiebreak * (1..=big_n).map(|i| scalings[i]).sum::<f64>();
        let objective = sol.objective - tiebreak
            + (x_true.transpose() * &self.cost.c_xx * x_true)[(0, 0)]
            + 2.0 * (x_true.transpose() * &self.cost.c_xw * &wstack)[(0, 0)]
            + (wstack.transpose() * &self.cost.c_ww * &wstack)[(0, 0)];

        let applied_u = &self.gain.k * x_true + &v[0];
        Ok(MpcStepSolution {
            tube: HomotheticTube::new(base.clone(), centers, scalings)?,
            v,
            lambdas,
            x_pred,
            u_pred,
            applied_u,
            objective,
            iterations: sol.iterations,
            residual: sol.residual,
        })
    }

    /// Shift-based candidate: inputs move up one slot with a zero appended;
    /// the tube shifts with the terminal successor appended via the candidate
    /// map. The candidate doubles as the solver initial point and as the
    /// recursive-feasibility witness.
    pub fn shift(&self, prev: &MpcStepSolution) -> ShiftedCandidate {
        let big_n = self.cfg.horizon;
        let m = self.sys.input_dim();
        let mut v: Vec<DVector<f64>> = prev.v[1..].to_vec();
        v.push(DVector::zeros(m));
        let mut s: Vec<DVector<f64>> = (1..=big_n).map(|i| prev.tube.center(i)).collect();
        let mut alpha: Vec<f64> = (1..=big_n).map(|i| prev.tube.scaling(i)).collect();
        let (s_next, a_next) = self
            .candidate_map
            .successor(&prev.tube.center(big_n), prev.tube.scaling(big_n));
        s.push(s_next);
        alpha.push(a_next);
        ShiftedCandidate { v, s, alpha }
    }

    /// Feasibility-only check of a candidate for the step-`k` program: stage
    /// rows, terminal rows, scaling positivity, and exact robust containment
    /// between consecutive cross-sections via the primal LP oracle.
    pub fn candidate_feasible(&self, cand: &ShiftedCandidate, k: usize) -> Result<bool, MpcError> {
        let big_n = self.cfg.horizon;
        let tol = 1e-6;
        for i in 0..=big_n {
            let f = self.cfg.tightening.f_at(k + i);
            for row in 0..self.sys.x_set.num_facets() {
                let f_bar = self.cfg.base.support(&self.sys.x_set.row(row))?;
                let lhs = self.sys.x_set.row(row).dot(&cand.s[i]) + f_bar * cand.alpha[i];
                if lhs > self.sys.x_set.offset(row) - f[row] + tol {
                    return Ok(false);
                }
            }
            if cand.alpha[i] < -tol {
                return Ok(false);
            }
        }
        for i in 0..big_n {
            let g = self.cfg.tightening.g_at(k + i);
            for row in 0..self.sys.u_set.num_facets() {
                let gk = self.gain.k.transpose() * self.sys.u_set.row(row);
                let g_bar = self.cfg.base.support(&gk)?;
                let lhs = gk.dot(&cand.s[i])
                    + self.sys.u_set.row(row).dot(&cand.v[i])
                    + g_bar * cand.alpha[i];
                if lhs > self.sys.u_set.offset(row) - g[row] + tol {
                    return Ok(false);
                }
            }
        }
        if self
            .cfg
            .terminal
            .membership_residual(&cand.s[big_n], cand.alpha[big_n])
            > tol
        {
            return Ok(false);
        }
        for i in 0..big_n {
            let drift = self.cfg.mean_at(k + i);
            let resid = containment_worst_residual(
                &self.sys,
                &self.gain,
                &self.cfg.base,
                (&cand.s[i], cand.alpha[i]),
                &cand.v[i],
                (&cand.s[i + 1], cand.alpha[i + 1]),
                &drift,
                None,
            )?;
            if resid > tol {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

fn stack(vs: &[DVector<f64>]) -> DVector<f64> {
    let total: usize = vs.iter().map(|v| v.len()).sum();
    let mut out = DVector::zeros(total);
    let mut at = 0;
    for v in vs {
        out.rows_mut(at, v.len()).copy_from(v);
        at += v.len();
    }
    out
}

/// Rowwise support of the noise-mean profile under the base normals; the
/// margin the terminal machinery must absorb.
pub fn drift_support(base: &Polytope, mean_profile: &[DVector<f64>]) -> DVector<f64> {
    let r = base.num_facets();
    let mut out: DVector<f64> = DVector::zeros(r);
    for w in mean_profile {
        let hw = base.h() * w;
        for rho in 0..r {
            out[rho] = out[rho].max(hw[rho]);
        }
    }
    out
}

fn build_cost_maps(
    sys: &UncertainLTISystem,
    gain: &FeedbackGain,
    cfg: &MpcConfig,
    theta_bar: &DVector<f64>,
) -> CostMaps {
    let n = sys.state_dim();
    let m = sys.input_dim();
    let big_n = cfg.horizon;
    let a_bar = sys.a_of(theta_bar);
    let b_bar = sys.b_of(theta_bar);
    let a_cl = &a_bar + &b_bar * &gain.k;

    // X = Sx x0 + Sv V + Sw W
    let mut sx = DMatrix::zeros((big_n + 1) * n, n);
    let mut sv = DMatrix::zeros((big_n + 1) * n, big_n * m);
    let mut sw = DMatrix::zeros((big_n + 1) * n, big_n * n);
    let mut power = DMatrix::identity(n, n);
    sx.view_mut((0, 0), (n, n)).copy_from(&power);
    for i in 1..=big_n {
        power = &a_cl * &power;
        sx.view_mut((i * n, 0), (n, n)).copy_from(&power);
    }
    for j in 0..big_n {
        let mut prop = b_bar.clone();
        let mut prop_w = DMatrix::identity(n, n);
        for i in (j + 1)..=big_n {
            sv.view_mut((i * n, j * m), (n, m)).copy_from(&prop);
            sw.view_mut((i * n, j * n), (n, n)).copy_from(&prop_w);
            prop = &a_cl * &prop;
            prop_w = &a_cl * &prop_w;
        }
    }

    // U = Kbig X_head + V
    let mut k_big = DMatrix::zeros(big_n * m, (big_n + 1) * n);
    for i in 0..big_n {
        k_big.view_mut((i * m, i * n), (m, n)).copy_from(&gain.k);
    }
    let mv = &k_big * &sv + DMatrix::identity(big_n * m, big_n * m);
    let mx = &k_big * &sx;
    let mw = &k_big * &sw;

    let mut q_tilde = DMatrix::zeros((big_n + 1) * n, (big_n + 1) * n);
    for i in 0..big_n {
        q_tilde
            .view_mut((i * n, i * n), (n, n))
            .copy_from(&cfg.q_cost);
    }
    q_tilde
        .view_mut((big_n * n, big_n * n), (n, n))
        .copy_from(&cfg.p_term);
    let mut r_tilde = DMatrix::zeros(big_n * m, big_n * m);
    for i in 0..big_n {
        r_tilde
            .view_mut((i * m, i * m), (m, m))
            .copy_from(&cfg.r_cost);
    }

    let h = sv.transpose() * &q_tilde * &sv + mv.transpose() * &r_tilde * &mv;
    let g_x = sv.transpose() * &q_tilde * &sx + mv.transpose() * &r_tilde * &mx;
    let g_w = sv.transpose() * &q_tilde * &sw + mv.transpose() * &r_tilde * &mw;
    let c_xx = sx.transpose() * &q_tilde * &sx + mx.transpose() * &r_tilde * &mx;
    let c_xw = sx.transpose() * &q_tilde * &sw + mx.transpose() * &r_tilde * &mw;
    let c_ww = sw.transpose() * &q_tilde * &sw + mw.transpose() * &r_tilde * &mw;

    CostMaps {
        quad: sym_quad_upper(&h),
        g_x,
        g_w,
        c_xx,
        c_xw,
        c_ww,
        sx,
        sv,
        sw,
    }
}

/// Assemble the step program (declarative form) from scratch; see
/// [`MpcProblem::assemble`] for the reusable path.
pub fn assemble(
    sys: &UncertainLTISystem,
    gain: &FeedbackGain,
    cfg: &MpcConfig,
    x_true: &DVector<f64>,
    theta_bar: &DVector<f64>,
    prev: Option<&MpcStepSolution>,
    k: usize,
) -> Result<ConicProgram, MpcError> {
    MpcProblem::new(sys, gain, cfg.clone())?.assemble(x_true, theta_bar, prev, k)
}

/// Solve one step from scratch; see [`MpcProblem::solve_step`] for the
/// reusable path.
pub fn solve_step(
    sys: &UncertainLTISystem,
    gain: &FeedbackGain,
    cfg: &MpcConfig,
    x_true: &DVector<f64>,
    theta_bar: &DVector<f64>,
    prev: Option<&MpcStepSolution>,
    k: usize,
) -> Result<MpcStepSolution, MpcError> {
    MpcProblem::new(sys, gain, cfg.clone())?.solve_step(x_true, theta_bar, prev, k)
}


#[cfg(test)]
mod bench_probe {
    use super::*;
    use nalgebra::DVector;

    #[test]
    #[ignore]
    fn step_timing() {
        let mut prob = super::tests::va_problem_public(0.4, 0.8, 30);
        let th = DVector::from_vec(vec![-0.4]);
        let t0 = std::time::Instant::now();
        let mut prev = prob.solve_step(&DVector::zeros(2), &th, None, 0).unwrap();
        eprintln!("first solve: {:?}, iters {}", t0.elapsed(), prev.iterations);
        let n_steps = 100;
        let t0 = std::time::Instant::now();
        for k in 1..=n_steps {
            let x = DVector::from_vec(vec![0.1 * (k as f64 * 0.37).sin(), 0.2 * (k as f64 * 0.73).cos()]);
            prev = prob.solve_step(&x, &th, Some(&prev), k).unwrap();
        }
        let dt = t0.elapsed();
        eprintln!(
            "{n_steps} warm steps in {:?} ({:.2} ms/solve, {} iters last)",
            dt,
            dt.as_secs_f64() * 1e3 / n_steps as f64,
            prev.iterations
        );
    }
}
