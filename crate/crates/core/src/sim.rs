//! Closed-loop Monte-Carlo harness: seeded noise realization, true-plant
//! rollout against the controller, parameter-estimate hooks, and the
//! empirical metrics the experiments report.
//!
//! Everything here is deterministic in `(configuration, seed)`: noise comes
//! from a counter-based generator seeded per run, and no shared mutable
//! state leaks between runs.

use crate::conic::{self, Block, ConicProgram, LinearBlock, SolveStatus};
use crate::model::{d_map, FeedbackGain, UncertainLTISystem};
use crate::mpc::{MpcError, MpcProblem, MpcStepSolution};
use crate::polytope::Polytope;
use crate::rprs::{NoiseCovariance, NoiseFamily, NoiseModel, RprsSequence, RprsSetData};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("trace sets are not seed-paired")]
    SeedMismatch,
    #[error("covariance factorization failed")]
    BadCovariance,
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Solver(#[from] conic::ConicError),
}

/// Draw one realization of the disturbance sequence. Deterministic in the
/// seed. The Gaussian family samples the exact distribution; the moment-only
/// family samples a bounded, uniform-based surrogate with exactly matching
/// first and second moments.
pub fn sample_noise(nm: &NoiseModel, seed: u64) -> Result<Vec<DVector<f64>>, SimError> {
    let n = nm.block_dim();
    let t_len = nm.horizon;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng, len: usize| -> DVector<f64> {
        match nm.family {
            NoiseFamily::Gaussian => {
                DVector::from_fn(len, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
            }
            NoiseFamily::MomentOnly => {
                // uniform on [-sqrt(3), sqrt(3)): zero mean, unit variance
                let s3 = 3.0f64.sqrt();
                DVector::from_fn(len, |_, _| rng.gen_range(-s3..s3))
            }
        }
    };
    let mut out = Vec::with_capacity(t_len);
    match &nm.covariance {
        NoiseCovariance::Iid(sigma) => {
            let chol = crate::linalg::symmetrize(sigma)
                .cholesky()
                .ok_or(SimError::BadCovariance)?;
            for k in 0..t_len {
                let z = draw(&mut rng, n);
                out.push(nm.mean_at(k) + chol.l() * z);
            }
        }
        NoiseCovariance::Full(sigma) => {
            let chol = crate::linalg::symmetrize(sigma)
                .cholesky()
                .ok_or(SimError::BadCovariance)?;
            let z = draw(&mut rng, n * t_len);
            let w = chol.l() * z;
            for k in 0..t_len {
                out.push(nm.mean_at(k) + w.rows(k * n, n).into_owned());
            }
        }
    }
    Ok(out)
}

/// Euclidean projection onto a polytope (small QP).
pub fn project_onto_polytope(
    p: &Polytope,
    point: &DVector<f64>,
) -> Result<DVector<f64>, conic::ConicError> {
    let n = p.dim();
    let mut prog = ConicProgram::new(n);
    for i in 0..n {
        prog.quad.push((i, i, 2.0));
        prog.linear[i] = -2.0 * point[i];
    }
    prog.add_block(Block::Inequality(LinearBlock::from_dense(
        p.h(),
        &p.offsets(),
    )));
    let sol = conic::solve_conic(&prog)?;
    match sol.status {
        SolveStatus::Optimal => Ok(sol.x),
        other => Err(conic::ConicError::NumericalFailure {
            iterations: sol.iterations,
            detail: format!("projection returned {other:?}"),
        }),
    }
}

/// Projected recursive least squares on the parametric-sensitivity
/// regression `x+ - A0 x - B0 u = D(x, u) theta + w`.
#[derive(Debug, Clone)]
pub struct RlsEstimator {
    pub theta: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl RlsEstimator {
    pub fn new(prior: DVector<f64>, prior_cov_scale: f64) -> Self {
        let p = prior.len();
        RlsEstimator {
            theta: prior,
            cov: DMatrix::identity(p, p) * prior_cov_scale,
        }
    }

    /// One RLS step followed by projection onto the parameter polytope.
    pub fn update(
        &mut self,
        sys: &UncertainLTISystem,
        x_prev: &DVector<f64>,
        u_prev: &DVector<f64>,
        x_next: &DVector<f64>,
    ) -> Result<(), SimError> {
        let d = d_map(x_prev, u_prev, sys);
        if d.amax() <= 1e-14 {
            return Ok(()); // no information in this transition
        }
        let y = x_next - &sys.a_mats[0] * x_prev - &sys.b_mats[0] * u_prev;
        let n = y.len();
        let s = DMatrix::identity(n, n) + &d * &self.cov * d.transpose();
        let gain = &self.cov
            * d.transpose()
            * s.lu().try_inverse().ok_or(SimError::BadCovariance)?;
        self.theta += &gain * (y - &d * &self.theta);
        self.cov = &self.cov - &gain * &d * &self.cov;
        if sys.param_dim() > 0 && !sys.theta_set.contains(&self.theta, 1e-12) {
            self.theta = project_onto_polytope(&sys.theta_set, &self.theta)?;
        }
        Ok(())
    }
}

/// Parameter-estimate hook called once per step before the controller runs.
#[derive(Debug, Clone)]
pub enum EstimatorHook {
    /// The fixed point estimate used by the headline experiments.
    Constant(DVector<f64>),
    /// Projected recursive least squares on observed transitions.
    ProjectedRls(RlsEstimator),
}

impl EstimatorHook {
    pub fn current(&self) -> DVector<f64> {
        match self {
            EstimatorHook::Constant(th) => th.clone(),
            EstimatorHook::ProjectedRls(rls) => rls.theta.clone(),
        }
    }

    fn observe(
        &mut self,
        sys: &UncertainLTISystem,
        x_prev: &DVector<f64>,
        u_prev: &DVector<f64>,
        x_next: &DVector<f64>,
    ) -> Result<(), SimError> {
        if let EstimatorHook::ProjectedRls(rls) = self {
            rls.update(sys, x_prev, u_prev, x_next)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepStatus {
    Optimal,
    Infeasible,
    SolverFailure,
}

/// Everything one closed-loop run produced. Constraint flags are recomputed
/// from the true trajectory, never copied from the controller.
#[derive(Debug, Clone)]
pub struct ClosedLoopTrace {
    pub seed: u64,
    pub theta_true: DVector<f64>,
    pub x_true: Vec<DVector<f64>>,
    pub u_true: Vec<DVector<f64>>,
    pub v0: Vec<DVector<f64>>,
    pub s0: Vec<DVector<f64>>,
    pub alpha0: Vec<f64>,
    pub objective: Vec<f64>,
    pub status: Vec<StepStatus>,
    /// Whether each original state-constraint row holds at each step.
    pub state_flags: Vec<Vec<bool>>,
    pub input_flags: Vec<Vec<bool>>,
    pub theta_bar: Vec<DVector<f64>>,
    /// True nominal component and error component (diagnostics).
    pub z_true: Vec<DVector<f64>>,
    pub e_true: Vec<DVector<f64>>,
    /// Shifted-candidate feasibility checks, when enabled.
    pub candidate_ok: Vec<bool>,
    pub halted_at: Option<usize>,
    pub stage_cost: Vec<f64>,
}

impl ClosedLoopTrace {
    pub fn completed(&self) -> bool {
        self.halted_at.is_none()
    }

    pub fn total_cost(&self) -> f64 {
        self.stage_cost.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Run the feasibility-only check of the shifted candidate each step
    /// (the recursive-feasibility witness).
    pub check_candidates: bool,
    pub x0: DVector<f64>,
}

impl RunOptions {
    pub fn from_origin(n: usize) -> Self {
        RunOptions {
            check_candidates: false,
            x0: DVector::zeros(n),
        }
    }
}

/// Roll the true plant against the controller for `t_len` steps. The trace
/// is complete even when a step goes infeasible: the failure is recorded and
/// the run halts there.
pub fn run_closed_loop(
    controller: &mut MpcProblem,
    theta_true: &DVector<f64>,
    estimator: &mut EstimatorHook,
    noise: &[DVector<f64>],
    t_len: usize,
    seed: u64,
    opts: &RunOptions,
) -> Result<ClosedLoopTrace, SimError> {
    assert!(noise.len() >= t_len, "noise realization shorter than the task");
    let sys = controller.sys.clone();
    let gain_k = controller.gain.k.clone();
    let n = sys.state_dim();
    let a_true = sys.a_of(theta_true);
    let b_true = sys.b_of(theta_true);
    let a_cl_true = &a_true + &b_true * &gain_k;

    let mut trace = ClosedLoopTrace {
        seed,
        theta_true: theta_true.clone(),
        x_true: vec![opts.x0.clone()],
        u_true: Vec::new(),
        v0: Vec::new(),
        s0: Vec::new(),
        alpha0: Vec::new(),
        objective: Vec::new(),
        status: Vec::new(),
        state_flags: Vec::new(),
        input_flags: Vec::new(),
        theta_bar: Vec::new(),
        z_true: vec![opts.x0.clone()],
        e_true: vec![DVector::zeros(n)],
        candidate_ok: Vec::new(),
        halted_at: None,
        stage_cost: Vec::new(),
    };

    let mut prev: Option<MpcStepSolution> = None;
    for k in 0..t_len {
        let theta_bar = estimator.current();
        trace.theta_bar.push(theta_bar.clone());
        let x_k = trace.x_true[k].clone();

        if opts.check_candidates {
            if let Some(p) = &prev {
                let cand = controller.shift(p);
                trace.candidate_ok.push(controller.candidate_feasible(&cand, k)?);
            }
        }

        let sol = match controller.solve_step(&x_k, &theta_bar, prev.as_ref(), k) {
            Ok(s) => s,
            Err(MpcError::Infeasible { .. }) => {
                trace.status.push(StepStatus::Infeasible);
                trace.halted_at = Some(k);
                break;
            }
            Err(MpcError::Solver(_)) => {
                trace.status.push(StepStatus::SolverFailure);
                trace.halted_at = Some(k);
                break;
            }
            Err(e) => return Err(e.into()),
        };
        trace.status.push(StepStatus::Optimal);
        let u_k = sol.applied_u.clone();
        trace.v0.push(sol.v[0].clone());
        trace.s0.push(sol.tube.center(0));
        trace.alpha0.push(sol.tube.scaling(0));
        trace.objective.push(sol.objective);
        trace.stage_cost.push(
            (x_k.transpose() * &controller.cfg.q_cost * &x_k)[(0, 0)]
                + (u_k.transpose() * &controller.cfg.r_cost * &u_k)[(0, 0)],
        );

        // true plant and the nominal/error split diagnostics
        let w_k = &noise[k];
        let x_next = &a_true * &x_k + &b_true * &u_k + w_k;
        let w_mean = controller.cfg.mean_profile.is_empty().then(|| DVector::zeros(n));
        let w_mean = w_mean.unwrap_or_else(|| {
            controller
                .cfg
                .mean_profile
                .get(k)
                .cloned()
                .unwrap_or_else(|| controller.cfg.mean_profile.last().unwrap().clone())
        });
        let z_next = &a_cl_true * &trace.z_true[k] + &b_true * &sol.v[0] + &w_mean;
        trace.e_true.push(&x_next - &z_next);
        trace.z_true.push(z_next);
        trace.u_true.push(u_k.clone());
        trace.x_true.push(x_next.clone());

        estimator.observe(&sys, &x_k, &u_k, &x_next)?;
        prev = Some(sol);
    }

    // recompute constraint flags from the realized trajectory
    for x in &trace.x_true {
        trace
            .state_flags
            .push((0..sys.x_set.num_facets())
                .map(|r| sys.x_set.row(r).dot(x) <= sys.x_set.offset(r) + 1e-12)
                .collect());
    }
    for u in &trace.u_true {
        trace
            .input_flags
            .push((0..sys.u_set.num_facets())
                .map(|r| sys.u_set.row(r).dot(u) <= sys.u_set.offset(r) + 1e-12)
                .collect());
    }
    Ok(trace)
}

/// Empirical per-step satisfaction of a set of state-constraint rows
/// (jointly), as a percentage, plus the minimum over steps. Halted runs are
/// excluded and counted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SatisfactionReport {
    pub per_step: Vec<f64>,
    pub minimum: f64,
    pub excluded_runs: usize,
}

pub fn empirical_satisfaction(traces: &[ClosedLoopTrace], rows: &[usize]) -> SatisfactionReport {
    let complete: Vec<&ClosedLoopTrace> = traces.iter().filter(|t| t.completed()).collect();
    let excluded = traces.len() - complete.len();
    let t_len = complete.iter().map(|t| t.x_true.len()).min().unwrap_or(0);
    let mut per_step = Vec::with_capacity(t_len);
    for k in 0..t_len {
        let sat = complete
            .iter()
            .filter(|t| rows.iter().all(|&r| t.state_flags[k][r]))
            .count();
        per_step.push(100.0 * sat as f64 / complete.len().max(1) as f64);
    }
    let minimum = per_step.iter().copied().fold(f64::INFINITY, f64::min);
    SatisfactionReport {
        per_step,
        minimum: if minimum.is_finite() { minimum } else { 0.0 },
        excluded_runs: excluded,
    }
}

/// Same as [`empirical_satisfaction`] but for input-constraint rows.
pub fn empirical_input_satisfaction(
    traces: &[ClosedLoopTrace],
    rows: &[usize],
) -> SatisfactionReport {
    let complete: Vec<&ClosedLoopTrace> = traces.iter().filter(|t| t.completed()).collect();
    let excluded = traces.len() - complete.len();
    let t_len = complete.iter().map(|t| t.u_true.len()).min().unwrap_or(0);
    let mut per_step = Vec::with_capacity(t_len);
    for k in 0..t_len {
        let sat = complete
            .iter()
            .filter(|t| rows.iter().all(|&r| t.input_flags[k][r]))
            .count();
        per_step.push(100.0 * sat as f64 / complete.len().max(1) as f64);
    }
    let minimum = per_step.iter().copied().fold(f64::INFINITY, f64::min);
    SatisfactionReport {
        per_step,
        minimum: if minimum.is_finite() { minimum } else { 0.0 },
        excluded_runs: excluded,
    }
}

/// Per-seed percentage increase of accumulated closed-loop cost against a
/// seed-paired baseline, reported as mean and two standard deviations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostIncreaseStats {
    pub per_seed_percent: Vec<f64>,
    pub mean_percent: f64,
    pub two_std_percent: f64,
}

pub fn cost_increase_stats(
    traces: &[ClosedLoopTrace],
    baseline: &[ClosedLoopTrace],
) -> Result<CostIncreaseStats, SimError> {
    if traces.len() != baseline.len() {
        return Err(SimError::SeedMismatch);
    }
    let mut per_seed = Vec::with_capacity(traces.len());
    for (t, b) in traces.iter().zip(baseline) {
        if t.seed != b.seed {
            return Err(SimError::SeedMismatch);
        }
        if !t.completed() || !b.completed() {
            continue;
        }
        let cb = b.total_cost();
        if cb <= 0.0 {
            continue;
        }
        per_seed.push(100.0 * (t.total_cost() - cb) / cb);
    }
    let mean = per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64;
    let var = per_seed
        .iter()
        .map(|x| (x - mean) * (x - mean))
        .sum::<f64>()
        / per_seed.len().max(1) as f64;
    Ok(CostIncreaseStats {
        per_seed_percent: per_seed,
        mean_percent: mean,
        two_std_percent: 2.0 * var.sqrt(),
    })
}

/// Running average of the squared state norm, one value per prefix length.
pub fn running_l2_average(trace: &ClosedLoopTrace) -> Vec<f64> {
    let mut out = Vec::with_capacity(trace.x_true.len());
    let mut acc = 0.0;
    for (k, x) in trace.x_true.iter().enumerate() {
        acc += x.norm_squared();
        out.push(acc / (k + 1) as f64);
    }
    out
}

/// Empirical per-step frequency of the error state lying in its confidence
/// region, for a fixed parameter: simulates `e+ = Acl e + w` from zero for
/// `n_samples` noise realizations. Ellipsoidal sets use exact membership;
/// the half-space shape checks every constraint-aligned direction.
pub fn error_coverage(
    sys: &UncertainLTISystem,
    gain: &FeedbackGain,
    nm: &NoiseModel,
    rprs: &RprsSequence,
    theta: &DVector<f64>,
    k_max: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>, SimError> {
    let acl = sys.a_cl_of(theta, &gain.k);
    let n = sys.state_dim();
    let k_max = k_max.min(rprs.state_sets.len()).min(nm.horizon);
    let mut hits = vec![0usize; k_max];
    let directions: Vec<DVector<f64>> = (0..sys.x_set.num_facets())
        .map(|r| sys.x_set.row(r))
        .collect();
    for sample in 0..n_samples {
        let noise = sample_noise(nm, seed.wrapping_add(sample as u64))?;
        let mut e = DVector::zeros(n);
        for (k, hit) in hits.iter_mut().enumerate() {
            let w_tilde = &noise[k] - nm.mean_at(k);
            e = &acl * &e + w_tilde;
            let set = &rprs.state_sets[k];
            let inside = match &set.data {
                RprsSetData::HalfSpaces { .. } => directions
                    .iter()
                    .all(|d| set.halfspace_holds(d, &e, 1e-9)),
                _ => set.contains(&e, 1e-9).unwrap_or(false),
            };
            if inside {
                *hit += 1;
            }
        }
    }
    Ok(hits
        .into_iter()
        .map(|h| h as f64 / n_samples as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::illustrative_system;
    use approx::assert_abs_diff_eq;

    fn sigma_va() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.3, 0.5, 0.5, 1.0])
    }

    #[test]
    fn noise_is_deterministic_in_seed() {
        let nm = NoiseModel::zero_mean_iid(20, sigma_va(), NoiseFamily::Gaussian).unwrap();
        let a = sample_noise(&nm, 7).unwrap();
        let b = sample_noise(&nm, 7).unwrap();
        let c = sample_noise(&nm, 8).unwrap();
        assert_eq!(a.len(), 20);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
        assert!(a.iter().zip(&c).any(|(x, y)| x != y));
    }

    #[test]
    fn noise_matches_moments() {
        // sample covariance within 5% Frobenius of Sigma_w over 1e5 draws
        for family in [NoiseFamily::Gaussian, NoiseFamily::MomentOnly] {
            let nm = NoiseModel::zero_mean_iid(1, sigma_va(), family).unwrap();
            let n_draws = 100_000;
            let mut acc = DMatrix::zeros(2, 2);
            let mut mean = DVector::zeros(2);
            for s in 0..n_draws {
                let w = &sample_noise(&nm, s as u64).unwrap()[0];
                acc += w * w.transpose();
                mean += w;
            }
            let cov = acc / n_draws as f64;
            let rel = (&cov - sigma_va()).norm() / sigma_va().norm();
            assert!(rel < 0.05, "{family:?}: covariance off by {rel}");
            assert!((mean / n_draws as f64).norm() < 0.02);
        }
    }

    #[test]
    fn noise_degenerate_variance_is_mean() {
        let nm = NoiseModel::new(
            3,
            vec![1.0, -2.0, 1.0, -2.0, 1.0, -2.0],
            NoiseCovariance::Iid(DMatrix::identity(2, 2) * 1e-20),
            NoiseFamily::Gaussian,
        )
        .unwrap();
        for w in sample_noise(&nm, 3).unwrap() {
            assert_abs_diff_eq!(w[0], 1.0, epsilon = 1e-8);
            assert_abs_diff_eq!(w[1], -2.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn correlated_noise_uses_full_covariance() {
        // strong AR(1) correlation shows up in adjacent-sample covariance
        let t_len = 400;
        let rho: f64 = 0.9;
        let mut full = DMatrix::zeros(t_len, t_len);
        for a in 0..t_len {
            for b in 0..t_len {
                full[(a, b)] = rho.powi((a as i32 - b as i32).abs());
            }
        }
        let nm = NoiseModel::new(
            t_len,
            vec![0.0; t_len],
            NoiseCovariance::Full(full),
            NoiseFamily::Gaussian,
        )
        .unwrap();
        let w = sample_noise(&nm, 12).unwrap();
        let mut corr = 0.0;
        let mut var = 0.0;
        for k in 0..t_len - 1 {
            corr += w[k][0] * w[k + 1][0];
            var += w[k][0] * w[k][0];
        }
        let r = corr / var;
        assert!((r - rho).abs() < 0.1, "lag-1 correlation {r}");
    }

    #[test]
    fn projection_onto_interval() {
        let p = Polytope::interval(-0.4, 0.0);
        let inside = project_onto_polytope(&p, &DVector::from_vec(vec![-0.2])).unwrap();
        assert_abs_diff_eq!(inside[0], -0.2, epsilon = 1e-7);
        let clipped = project_onto_polytope(&p, &DVector::from_vec(vec![0.7])).unwrap();
        assert_abs_diff_eq!(clipped[0], 0.0, epsilon = 1e-7);
    }

    #[test]
    fn rls_recovers_true_parameter_noiselessly() {
        let sys = illustrative_system(0.4, 0.9);
        let theta_true = DVector::from_vec(vec![-0.3]);
        let a = sys.a_of(&theta_true);
        let b = sys.b_of(&theta_true);
        let mut rls = RlsEstimator::new(DVector::from_vec(vec![-0.1]), 1e8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = DVector::from_vec(vec![0.5, -0.5]);
        for _ in 0..6 {
            let u = DVector::from_vec(vec![rng.gen_range(-1.0..1.0)]);
            let x_next = &a * &x + &b * &u;
            rls.update(&sys, &x, &u, &x_next).unwrap();
            x = x_next;
            if x.norm() > 10.0 {
                x /= x.norm();
            }
        }
        assert_abs_diff_eq!(rls.theta[0], -0.3, epsilon = 1e-6);
    }

    #[test]
    fn rls_projects_onto_theta_and_ignores_zero_regressors() {
        let sys = illustrative_system(0.4, 0.9);
        // true parameter outside the set: estimate must end on the boundary
        let theta_out = DVector::from_vec(vec![0.5]);
        let a = sys.a_of(&theta_out);
        let b = sys.b_of(&theta_out);
        let mut rls = RlsEstimator::new(DVector::from_vec(vec![-0.2]), 100.0);
        let mut x = DVector::from_vec(vec![1.0, 1.0]);
        for i in 0..5 {
            let u = DVector::from_vec(vec![if i % 2 == 0 { 1.0 } else { -0.7 }]);
            let x_next = &a * &x + &b * &u;
            rls.update(&sys, &x, &u, &x_next).unwrap();
            x = x_next.normalize();
        }
        assert!(sys.theta_set.contains(&rls.theta, 1e-7));
        assert_abs_diff_eq!(rls.theta[0], 0.0, epsilon = 1e-6); // boundary point

        // zero regressor: x = 0, u = 0 carries no information
        let before = rls.theta.clone();
        rls.update(&sys, &DVector::zeros(2), &DVector::zeros(1), &DVector::zeros(2))
            .unwrap();
        assert_eq!(rls.theta, before);
    }

    #[test]
    fn satisfaction_counts_joint_rows() {
        let mk = |flags: Vec<Vec<bool>>| ClosedLoopTrace {
            seed: 0,
            theta_true: DVector::zeros(1),
            x_true: vec![DVector::zeros(2); flags.len()],
            u_true: vec![],
            v0: vec![],
            s0: vec![],
            alpha0: vec![],
            objective: vec![],
            status: vec![],
            state_flags: flags,
            input_flags: vec![],
            theta_bar: vec![],
            z_true: vec![],
            e_true: vec![],
            candidate_ok: vec![],
            halted_at: None,
            stage_cost: vec![],
        };
        let all_good = mk(vec![vec![true, true]; 3]);
        let one_bad = mk(vec![
            vec![true, true],
            vec![true, false],
            vec![true, true],
        ]);
        let rep = empirical_satisfaction(&[all_good.clone(), all_good.clone()], &[0, 1]);
        assert_abs_diff_eq!(rep.minimum, 100.0, epsilon = 1e-12);
        let rep = empirical_satisfaction(&[all_good, one_bad], &[0, 1]);
        assert_abs_diff_eq!(rep.minimum, 50.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.per_step[0], 100.0, epsilon = 1e-12);
    }

    #[test]
    fn cost_increase_simple_cases() {
        let mk = |seed: u64, cost: f64| ClosedLoopTrace {
            seed,
            theta_true: DVector::zeros(1),
            x_true: vec![],
            u_true: vec![],
            v0: vec![],
            s0: vec![],
            alpha0: vec![],
            objective: vec![],
            status: vec![],
            state_flags: vec![],
            input_flags: vec![],
            theta_bar: vec![],
            z_true: vec![],
            e_true: vec![],
            candidate_ok: vec![],
            halted_at: None,
            stage_cost: vec![cost],
        };
        let base = vec![mk(1, 100.0)];
        let test = vec![mk(1, 101.0)];
        let stats = cost_increase_stats(&test, &base).unwrap();
        assert_abs_diff_eq!(stats.mean_percent, 1.0, epsilon = 1e-12);
        let stats = cost_increase_stats(&base, &base).unwrap();
        assert_abs_diff_eq!(stats.mean_percent, 0.0, epsilon = 1e-12);
        assert!(matches!(
            cost_increase_stats(&test, &[mk(2, 100.0)]),
            Err(SimError::SeedMismatch)
        ));
    }

    #[test]
    fn running_average_accumulates() {
        let tr = ClosedLoopTrace {
            seed: 0,
            theta_true: DVector::zeros(1),
            x_true: vec![
                DVector::from_vec(vec![1.0, 0.0]),
                DVector::from_vec(vec![0.0, 2.0]),
            ],
            u_true: vec![],
            v0: vec![],
            s0: vec![],
            alpha0: vec![],
            objective: vec![],
            status: vec![],
            state_flags: vec![],
            input_flags: vec![],
            theta_bar: vec![],
            z_true: vec![],
            e_true: vec![],
            candidate_ok: vec![],
            halted_at: None,
            stage_cost: vec![],
        };
        let avg = running_l2_average(&tr);
        assert_abs_diff_eq!(avg[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(avg[1], 2.5, epsilon = 1e-12);
    }
}
