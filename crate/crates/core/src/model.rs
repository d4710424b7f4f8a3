//! Uncertain system description and the offline LMI certificates attached to
//! it: quadratic-stability verification of a feedback gain, gain synthesis
//! when none is supplied, the terminal cost weight, and the parametric
//! sensitivity map `D(a, b)`.
//!
//! All matrix inequalities are written in Schur-complement form so they are
//! affine in the parameter and vertex checking over the parameter polytope is
//! exact; the raw quadratic stability condition is not affine and would not
//! reduce to vertices.

use crate::conic::{self, solve_conic, Block, ConicProgram, PsdBlock, SolveStatus, EPS_STRICT};
use crate::linalg::{self, vech_index, vech_len};
use crate::polytope::Polytope;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("parameter set must be a nonempty bounded polytope")]
    BadParameterSet,
    #[error("no common quadratic Lyapunov certificate exists for this gain")]
    NotQuadraticallyStable,
    #[error("gain synthesis LMI is infeasible")]
    SynthesisInfeasible,
    #[error("terminal weight LMI is infeasible")]
    TerminalWeightInfeasible,
    #[error(transparent)]
    Polytope(#[from] crate::polytope::PolytopeError),
    #[error(transparent)]
    Solver(#[from] conic::ConicError),
}

/// Linear system with matrices affine in an unknown parameter vector:
/// `A(th) = A_0 + sum_i A_i th_i`, `B(th)` likewise, `th` in a bounded
/// polytope. Carries the constraint sets and probability levels of the
/// control problem.
#[derive(Debug, Clone)]
pub struct UncertainLTISystem {
    /// `[A_0, A_1, .., A_p]`
    pub a_mats: Vec<DMatrix<f64>>,
    /// `[B_0, B_1, .., B_p]`
    pub b_mats: Vec<DMatrix<f64>>,
    /// Parameter polytope in `R^p`.
    pub theta_set: Polytope,
    /// State constraints `{x | F x <= 1}` (unit offsets).
    pub x_set: Polytope,
    /// Input constraints `{u | G u <= 1}` (unit offsets).
    pub u_set: Polytope,
    pub p_x: f64,
    pub p_u: f64,
}

impl UncertainLTISystem {
    pub fn new(
        a_mats: Vec<DMatrix<f64>>,
        b_mats: Vec<DMatrix<f64>>,
        theta_set: Polytope,
        x_set: Polytope,
        u_set: Polytope,
        p_x: f64,
        p_u: f64,
    ) -> Result<Self, ModelError> {
        if a_mats.is_empty() || a_mats.len() != b_mats.len() {
            return Err(ModelError::Dimension(
                "need p+1 A matrices and p+1 B matrices".into(),
            ));
        }
        let n = a_mats[0].nrows();
        let m = b_mats[0].ncols();
        for a in &a_mats {
            if a.nrows() != n || a.ncols() != n {
                return Err(ModelError::Dimension("A_i must all be n x n".into()));
            }
        }
        for b in &b_mats {
            if b.nrows() != n || b.ncols() != m {
                return Err(ModelError::Dimension("B_i must all be n x m".into()));
            }
        }
        let p = a_mats.len() - 1;
        if theta_set.dim() != p {
            return Err(ModelError::Dimension(format!(
                "theta polytope lives in R^{}, expected R^{p}",
                theta_set.dim()
            )));
        }
        if p > 0 && (theta_set.is_empty()? || !theta_set.is_bounded()?) {
            return Err(ModelError::BadParameterSet);
        }
        // empty constraint sets are allowed and adopt the right dimension
        let x_set = if x_set.num_facets() == 0 {
            Polytope::new(DMatrix::zeros(0, n), DVector::zeros(0))
        } else {
            x_set
        };
        let u_set = if u_set.num_facets() == 0 {
            Polytope::new(DMatrix::zeros(0, m), DVector::zeros(0))
        } else {
            u_set
        };
        if x_set.dim() != n || u_set.dim() != m {
            return Err(ModelError::Dimension(
                "constraint polytopes do not match state/input dimensions".into(),
            ));
        }
        // The tightening formulas assume the paper's "<= 1" scaling.
        let x_set = normalize_constraints(x_set, "state");
        let u_set = normalize_constraints(u_set, "input");
        Ok(UncertainLTISystem {
            a_mats,
            b_mats,
            theta_set,
            x_set,
            u_set,
            p_x,
            p_u,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a_mats[0].nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b_mats[0].ncols()
    }

    pub fn param_dim(&self) -> usize {
        self.a_mats.len() - 1
    }

    pub fn a_of(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut a = self.a_mats[0].clone();
        for i in 0..self.param_dim() {
            a += &self.a_mats[i + 1] * theta[i];
        }
        a
    }

    pub fn b_of(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let mut b = self.b_mats[0].clone();
        for i in 0..self.param_dim() {
            b += &self.b_mats[i + 1] * theta[i];
        }
        b
    }

    /// Closed loop `A(th) + B(th) K`.
    pub fn a_cl_of(&self, theta: &DVector<f64>, k_gain: &DMatrix<f64>) -> DMatrix<f64> {
        self.a_of(theta) + self.b_of(theta) * k_gain
    }

    /// Closed-loop matrices at every vertex of the parameter polytope.
    pub fn a_cl_vertices(&self, k_gain: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>, ModelError> {
        Ok(self
            .theta_vertices()?
            .iter()
            .map(|th| self.a_cl_of(th, k_gain))
            .collect())
    }

    pub fn theta_vertices(&self) -> Result<Vec<DVector<f64>>, ModelError> {
        if self.param_dim() == 0 {
            return Ok(vec![DVector::zeros(0)]);
        }
        Ok(self.theta_set.vertices()?.to_vec())
    }
}

fn normalize_constraints(set: Polytope, which: &str) -> Polytope {
    if set.num_facets() == 0 || set.has_unit_offsets() {
        return set;
    }
    match set.normalized_to_unit_offsets() {
        Some(p) => {
            log::warn!("{which} constraint offsets rescaled to the unit convention");
            p
        }
        None => {
            // offsets <= 0 cannot be scaled to 1; keep as configured
            log::warn!("{which} constraint offsets are not positive; kept unnormalized");
            set
        }
    }
}

/// A feedback gain together with its common quadratic Lyapunov certificate.
#[derive(Debug, Clone)]
pub struct FeedbackGain {
    pub k: DMatrix<f64>,
    pub p_lyap: DMatrix<f64>,
}

/// Schur-form stability block `[P, Acl' P; P Acl, P]` for a fixed vertex.
fn stability_block_coeffs(acl: &DMatrix<f64>, n: usize) -> Vec<DMatrix<f64>> {
    // coefficient of vech(P)_(i,j) in the 2n x 2n block
    let mut coeffs = Vec::with_capacity(vech_len(n));
    for j in 0..n {
        for i in 0..=j {
            let mut e = DMatrix::zeros(n, n);
            e[(i, j)] = 1.0;
            e[(j, i)] = 1.0;
            let mut blk = DMatrix::zeros(2 * n, 2 * n);
            blk.view_mut((0, 0), (n, n)).copy_from(&e);
            blk.view_mut((n, n), (n, n)).copy_from(&e);
            let pa = &e * acl;
            blk.view_mut((n, 0), (n, n)).copy_from(&pa);
            blk.view_mut((0, n), (n, n)).copy_from(&pa.transpose());
            coeffs.push(blk);
        }
    }
    coeffs
}

/// Certify quadratic stability of `K` over the whole parameter polytope by
/// solving the vertex-LMI feasibility problem for a common `P`.
pub fn verify_gain(sys: &UncertainLTISystem, k_gain: &DMatrix<f64>) -> Result<FeedbackGain, ModelError> {
    let n = sys.state_dim();
    if k_gain.nrows() != sys.input_dim() || k_gain.ncols() != n {
        return Err(ModelError::Dimension("gain must be m x n".into()));
    }
    let acls = sys.a_cl_vertices(k_gain)?;
    let nv = vech_len(n);
    let mut prog = ConicProgram::new(nv);
    // scale is fixed by P >= I; strictness of the stability blocks by eps*I
    let mut p_floor = PsdBlock::new(n, -DMatrix::<f64>::identity(n, n));
    for j in 0..n {
        for i in 0..=j {
            let mut e = DMatrix::zeros(n, n);
            e[(i, j)] = 1.0;
            e[(j, i)] = 1.0;
            p_floor.add_coeff(vech_index(i, j), e);
        }
    }
    prog.add_block(Block::Psd(p_floor));
    for acl in &acls {
        let mut blk = PsdBlock::new(
            2 * n,
            -DMatrix::<f64>::identity(2 * n, 2 * n) * (EPS_STRICT * 100.0),
        );
        for (idx, c) in stability_block_coeffs(acl, n).into_iter().enumerate() {
            blk.add_coeff(idx, c);
        }
        prog.add_block(Block::Psd(blk));
    }
    // minimize trace(P) as a well-posed tie-break
    for i in 0..n {
        prog.linear[vech_index(i, i)] = 1.0;
    }
    let sol = solve_conic(&prog)?;
    match sol.status {
        SolveStatus::Optimal => {
            let p = linalg::unvech(n, sol.x.as_slice());
            let gain = FeedbackGain {
                k: k_gain.clone(),
                p_lyap: p,
            };
            debug_assert!(certificate_margin(sys, &gain)? >= 1e-9);
            Ok(gain)
        }
        _ => Err(ModelError::NotQuadraticallyStable),
    }
}

/// Minimum eigenvalue over the vertex stability blocks of an existing
/// certificate; positive means quadratically stable.
pub fn certificate_margin(
    sys: &UncertainLTISystem,
    gain: &FeedbackGain,
) -> Result<f64, ModelError> {
    let n = sys.state_dim();
    let mut worst = f64::INFINITY;
    for acl in sys.a_cl_vertices(&gain.k)? {
        let mut blk = DMatrix::zeros(2 * n, 2 * n);
        blk.view_mut((0, 0), (n, n)).copy_from(&gain.p_lyap);
        blk.view_mut((n, n), (n, n)).copy_from(&gain.p_lyap);
        let pa = &gain.p_lyap * &acl;
        blk.view_mut((n, 0), (n, n)).copy_from(&pa);
        blk.view_mut((0, n), (n, n)).copy_from(&pa.transpose());
        worst = worst.min(linalg::min_eig_sym(&blk));
    }
    Ok(worst)
}

/// Synthesize a robustly stabilizing gain via the change of variables
/// `Y = P^-1`, `L = K Y`; the block `[Y, (A_j Y + B_j L)'; ., Y]` is affine
/// in `(Y, L)` and in the parameter, so vertex checking applies.
pub fn synthesize_gain(sys: &UncertainLTISystem) -> Result<FeedbackGain, ModelError> {
    let n = sys.state_dim();
    let m = sys.input_dim();
    let nv = vech_len(n);
    let num_vars = nv + m * n;
    let l_idx = |r: usize, c: usize| nv + r * n + c;

    let mut prog = ConicProgram::new(num_vars);
    // Y >= I fixes the scale
    let mut y_floor = PsdBlock::new(n, -DMatrix::<f64>::identity(n, n));
    for j in 0..n {
        for i in 0..=j {
            let mut e = DMatrix::zeros(n, n);
            e[(i, j)] = 1.0;
            e[(j, i)] = 1.0;
            y_floor.add_coeff(vech_index(i, j), e);
        }
    }
    prog.add_block(Block::Psd(y_floor));

    for th in sys.theta_vertices()? {
        let a = sys.a_of(&th);
        let b = sys.b_of(&th);
        let mut blk = PsdBlock::new(
            2 * n,
            -DMatrix::<f64>::identity(2 * n, 2 * n) * (EPS_STRICT * 100.0),
        );
        // Y coefficients: diagonal blocks plus A Y in the off-diagonal
        for j in 0..n {
            for i in 0..=j {
                let mut e = DMatrix::zeros(n, n);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                let mut c = DMatrix::zeros(2 * n, 2 * n);
                c.view_mut((0, 0), (n, n)).copy_from(&e);
                c.view_mut((n, n), (n, n)).copy_from(&e);
                let ae = &a * &e;
                c.view_mut((n, 0), (n, n)).copy_from(&ae);
                c.view_mut((0, n), (n, n)).copy_from(&ae.transpose());
                blk.add_coeff(vech_index(i, j), c);
            }
        }
        // L coefficients: B L in the off-diagonal
        for r in 0..m {
            for cc in 0..n {
                let mut e = DMatrix::zeros(m, n);
                e[(r, cc)] = 1.0;
                let be = &b * &e;
                let mut c = DMatrix::zeros(2 * n, 2 * n);
                c.view_mut((n, 0), (n, n)).copy_from(&be);
                c.view_mut((0, n), (n, n)).copy_from(&be.transpose());
                blk.add_coeff(l_idx(r, cc), c);
            }
        }
        prog.add_block(Block::Psd(blk));
    }
    for i in 0..n {
        prog.linear[vech_index(i, i)] = 1.0;
    }
    let sol = solve_conic(&prog)?;
    if sol.status != SolveStatus::Optimal {
        return Err(ModelError::SynthesisInfeasible);
    }
    let y = linalg::unvech(n, &sol.x.as_slice()[..nv]);
    let mut l = DMatrix::zeros(m, n);
    for r in 0..m {
        for c in 0..n {
            l[(r, c)] = sol.x[l_idx(r, c)];
        }
    }
    let y_inv = linalg::inv_spd(&y).ok_or(ModelError::SynthesisInfeasible)?;
    let k_gain = &l * &y_inv;
    // the synthesized gain must pass the independent verification path
    verify_gain(sys, &k_gain)
}

/// Terminal weight: symmetric `P > 0` with
/// `Acl(th)' P Acl(th) - P <= -(Q + K' R K)` at every parameter vertex,
/// with minimum trace as the tie-break.
pub fn terminal_weight(
    sys: &UncertainLTISystem,
    gain: &FeedbackGain,
    q_cost: &DMatrix<f64>,
    r_cost: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ModelError> {
    let n = sys.state_dim();
    if !linalg::is_spd(r_cost, 1e-9, 0.0) {
        return Err(ModelError::Dimension("R must be symmetric positive definite".into()));
    }
    if linalg::min_eig_sym(q_cost) < -1e-9 {
        return Err(ModelError::Dimension("Q must be positive semidefinite".into()));
    }
    let q_bar = q_cost + gain.k.transpose() * r_cost * &gain.k;
    let nv = vech_len(n);
    let mut prog = ConicProgram::new(nv);

    for acl in sys.a_cl_vertices(&gain.k)? {
        // [P - Qbar, Acl' P; P Acl, P] >= 0
        let mut f0 = DMatrix::zeros(2 * n, 2 * n);
        f0.view_mut((0, 0), (n, n)).copy_from(&(-&q_bar));
        let mut blk = PsdBlock::new(2 * n, f0);
        for (idx, c) in stability_block_coeffs(&acl, n).into_iter().enumerate() {
            blk.add_coeff(idx, c);
        }
        prog.add_block(Block::Psd(blk));
    }
    // P >= eps I keeps it positive definite even when Qbar is semidefinite
    let mut p_floor = PsdBlock::new(n, -DMatrix::<f64>::identity(n, n) * EPS_STRICT);
    for j in 0..n {
        for i in 0..=j {
            let mut e = DMatrix::zeros(n, n);
            e[(i, j)] = 1.0;
            e[(j, i)] = 1.0;
            p_floor.add_coeff(vech_index(i, j), e);
        }
    }
    prog.add_block(Block::Psd(p_floor));
    for i in 0..n {
        prog.linear[vech_index(i, i)] = 1.0;
    }
    let sol = solve_conic(&prog)?;
    if sol.status != SolveStatus::Optimal {
        return Err(ModelError::TerminalWeightInfeasible);
    }
    Ok(linalg::unvech(n, sol.x.as_slice()))
}

/// Discrete-time LQR gain (convention `u = K x`, closed loop `A + B K`) by
/// Riccati fixed-point iteration. Returns `None` if the iteration fails to
/// settle, e.g. for unstabilizable pairs.
pub fn dlqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q_cost: &DMatrix<f64>,
    r_cost: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let mut p = q_cost.clone();
    for _ in 0..10_000 {
        let rb = r_cost + b.transpose() * &p * b;
        let gain = rb.clone().lu().solve(&(b.transpose() * &p * a))?;
        let next = q_cost + a.transpose() * &p * a - a.transpose() * &p * b * &gain;
        let delta = (&next - &p).amax();
        p = next;
        if delta < 1e-12 * (1.0 + p.amax()) {
            let rb = r_cost + b.transpose() * &p * b;
            let gain = rb.lu().solve(&(b.transpose() * &p * a))?;
            return Some(-gain);
        }
    }
    None
}

/// LQR gain at the Chebyshev center of the parameter set, certified against
/// the whole set; the go-to gain for the experiment configs.
pub fn center_lqr_gain(
    sys: &UncertainLTISystem,
    q_cost: &DMatrix<f64>,
    r_cost: &DMatrix<f64>,
) -> Result<FeedbackGain, ModelError> {
    let theta_c = if sys.param_dim() == 0 {
        DVector::zeros(0)
    } else {
        sys.theta_set.chebyshev_center()?
    };
    let a = sys.a_of(&theta_c);
    let b = sys.b_of(&theta_c);
    let k = dlqr(&a, &b, q_cost, r_cost).ok_or(ModelError::SynthesisInfeasible)?;
    verify_gain(sys, &k)
}

/// Parametric sensitivity map: columns `A_i a + B_i b`, `i = 1..p`.
pub fn d_map(a: &DVector<f64>, b: &DVector<f64>, sys: &UncertainLTISystem) -> DMatrix<f64> {
    let n = sys.state_dim();
    let p = sys.param_dim();
    let mut d = DMatrix::zeros(n, p);
    for i in 0..p {
        let col = &sys.a_mats[i + 1] * a + &sys.b_mats[i + 1] * b;
        d.set_column(i, &col);
    }
    d
}

/// The illustrative double-integrator system with uncertain input gain:
/// `A = [[1,1],[0,1]]`, `B(th) = (1 + th) [0.5; 1]`, `th in [-alpha, 0]`,
/// state chance constraint `|x_2| <= 3`.
pub fn illustrative_system(alpha: f64, p_x: f64) -> UncertainLTISystem {
    let a0 = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
    let a1 = DMatrix::zeros(2, 2);
    let b0 = DMatrix::from_column_slice(2, 1, &[0.5, 1.0]);
    let b1 = b0.clone();
    let theta = Polytope::interval(-alpha, 0.0);
    let f = DMatrix::from_row_slice(2, 2, &[0.0, 1.0 / 3.0, 0.0, -1.0 / 3.0]);
    let x_set = Polytope::new(f, DVector::from_vec(vec![1.0, 1.0]));
    let u_set = Polytope::new(DMatrix::zeros(0, 1), DVector::zeros(0));
    UncertainLTISystem::new(vec![a0, a1], vec![b0, b1], theta, x_set, u_set, p_x, 1.0)
        .expect("illustrative system is well-formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;

    fn scalar_sys(a: f64, b: f64) -> UncertainLTISystem {
        UncertainLTISystem::new(
            vec![DMatrix::from_element(1, 1, a)],
            vec![DMatrix::from_element(1, 1, b)],
            Polytope::new(DMatrix::zeros(0, 0), DVector::zeros(0)),
            Polytope::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 1.0)),
            Polytope::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 1.0)),
            0.9,
            0.9,
        )
        .unwrap()
    }

    #[test]
    fn verify_trivial_contraction() {
        // A = 0.5 I, B = 0, K = 0: P = I certifies; solver finds some P
        let sys = UncertainLTISystem::new(
            vec![DMatrix::identity(2, 2) * 0.5],
            vec![DMatrix::zeros(2, 1)],
            Polytope::new(DMatrix::zeros(0, 0), DVector::zeros(0)),
            Polytope::unit_box(2),
            Polytope::unit_box(1),
            0.9,
            0.9,
        )
        .unwrap();
        let gain = verify_gain(&sys, &DMatrix::zeros(1, 2)).unwrap();
        assert!(certificate_margin(&sys, &gain).unwrap() > 0.0);
        // the hand certificate P = I works too
        let hand = FeedbackGain {
            k: DMatrix::zeros(1, 2),
            p_lyap: DMatrix::identity(2, 2),
        };
        assert!(certificate_margin(&sys, &hand).unwrap() > 0.0);
    }

    #[test]
    fn verify_rejects_unstable_scalar() {
        let sys = scalar_sys(2.0, 0.0);
        let err = verify_gain(&sys, &DMatrix::from_element(1, 1, 0.7));
        assert!(matches!(err, Err(ModelError::NotQuadraticallyStable)));
    }

    #[test]
    fn illustrative_gain_certificate_and_spectral_radius() {
        let sys = illustrative_system(0.4, 0.8);
        let gain = synthesize_gain(&sys).unwrap();
        assert!(certificate_margin(&sys, &gain).unwrap() >= 1e-9);
        for acl in sys.a_cl_vertices(&gain.k).unwrap() {
            let rho = acl
                .complex_eigenvalues()
                .iter()
                .map(|e| e.norm())
                .fold(0.0f64, f64::max);
            assert!(rho < 1.0, "vertex spectral radius {rho} not < 1");
        }
    }

    #[test]
    fn quadratic_stability_implies_edge_stability() {
        // sampled points on the segment Theta also have rho < 1
        let sys = illustrative_system(0.4, 0.8);
        let gain = synthesize_gain(&sys).unwrap();
        for t in 0..=10 {
            let th = DVector::from_vec(vec![-0.4 * t as f64 / 10.0]);
            let rho = sys
                .a_cl_of(&th, &gain.k)
                .complex_eigenvalues()
                .iter()
                .map(|e| e.norm())
                .fold(0.0f64, f64::max);
            assert!(rho < 1.0);
        }
    }

    #[test]
    fn synthesize_scalar_no_uncertainty() {
        let sys = scalar_sys(0.9, 1.0);
        let gain = synthesize_gain(&sys).unwrap();
        assert!((0.9 + gain.k[(0, 0)]).abs() < 1.0);
    }

    #[test]
    fn synthesize_uncontrollable_unstable_fails() {
        let sys = scalar_sys(2.0, 0.0);
        assert!(matches!(
            synthesize_gain(&sys),
            Err(ModelError::SynthesisInfeasible)
        ));
    }

    #[test]
    fn terminal_weight_identity_case() {
        // Acl = 0 (A = 0, B = 0, K = 0), Q = I, R K'K = 0: P = I is feasible;
        // minimum-trace solution stays at Q within strictness slack.
        let sys = scalar_sys(0.0, 0.0);
        let gain = verify_gain(&sys, &DMatrix::zeros(1, 1)).unwrap();
        let p = terminal_weight(
            &sys,
            &gain,
            &DMatrix::identity(1, 1),
            &DMatrix::identity(1, 1),
        )
        .unwrap();
        assert!(p[(0, 0)] >= 1.0 - 1e-6);
        assert!(p[(0, 0)] <= 1.0 + 1e-4);
    }

    #[test]
    fn terminal_weight_scalar_lyapunov() {
        // a_cl = 0.5, Qbar = 1 (Q = 1, K = 0): any P >= 1/(1 - 0.25) = 4/3
        let sys = scalar_sys(0.5, 0.0);
        let gain = verify_gain(&sys, &DMatrix::zeros(1, 1)).unwrap();
        let p = terminal_weight(
            &sys,
            &gain,
            &DMatrix::identity(1, 1),
            &DMatrix::identity(1, 1),
        )
        .unwrap();
        assert!(p[(0, 0)] >= 4.0 / 3.0 - 1e-6, "P = {}", p[(0, 0)]);
        assert!(p[(0, 0)] <= 4.0 / 3.0 + 1e-3);
    }

    #[test]
    fn terminal_weight_vertex_residual() {
        let sys = illustrative_system(0.4, 0.8);
        let gain = synthesize_gain(&sys).unwrap();
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        let p = terminal_weight(&sys, &gain, &q, &r).unwrap();
        let q_bar = &q + gain.k.transpose() * &r * &gain.k;
        for acl in sys.a_cl_vertices(&gain.k).unwrap() {
            let resid = acl.transpose() * &p * &acl - &p + &q_bar;
            assert!(
                linalg::min_eig_sym(&(-resid)) >= -1e-8,
                "Lyapunov residual not <= 0 at a vertex"
            );
        }
    }

    #[test]
    fn d_map_zero_inputs() {
        let sys = illustrative_system(0.4, 0.8);
        let d = d_map(&DVector::zeros(2), &DVector::zeros(1), &sys);
        assert_eq!(d, DMatrix::zeros(2, 1));
    }

    #[test]
    fn d_map_illustrative_column() {
        // p = 1, A_1 = 0, B_1 = [0.5; 1], b = 2 -> column [1; 2]
        let sys = illustrative_system(0.4, 0.8);
        let d = d_map(
            &DVector::from_vec(vec![3.0, -7.0]),
            &DVector::from_vec(vec![2.0]),
            &sys,
        );
        assert_abs_diff_eq!(d[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d[(1, 0)], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn d_map_building_shape() {
        // p = 2 with B_1 = B_2 = 0 -> columns [A_1 a, A_2 a]
        let a0 = DMatrix::identity(2, 2);
        let a1 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let a2 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let sys = UncertainLTISystem::new(
            vec![a0, a1.clone(), a2.clone()],
            vec![DMatrix::zeros(2, 1), DMatrix::zeros(2, 1), DMatrix::zeros(2, 1)],
            Polytope::unit_box(2),
            Polytope::unit_box(2),
            Polytope::unit_box(1),
            0.9,
            0.9,
        )
        .unwrap();
        let a = DVector::from_vec(vec![2.0, -1.0]);
        let d = d_map(&a, &DVector::zeros(1), &sys);
        assert_eq!(d.column(0), (&a1 * &a).column(0));
        assert_eq!(d.column(1), (&a2 * &a).column(0));
    }

    #[test]
    fn d_map_is_linear_and_matches_difference_identity() {
        let sys = illustrative_system(0.3, 0.8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x = DVector::from_fn(2, |_, _| rng.gen_range(-3.0..3.0));
            let u = DVector::from_fn(1, |_, _| rng.gen_range(-3.0..3.0));
            let x2 = DVector::from_fn(2, |_, _| rng.gen_range(-3.0..3.0));
            let u2 = DVector::from_fn(1, |_, _| rng.gen_range(-3.0..3.0));
            let lhs = d_map(&(&x + &x2), &(&u + &u2), &sys);
            let rhs = d_map(&x, &u, &sys) + d_map(&x2, &u2, &sys);
            assert!((lhs - rhs).amax() < 1e-12);

            // A(th)x + B(th)u - A(th')x - B(th')u = D(x,u)(th - th')
            let th = DVector::from_vec(vec![rng.gen_range(-0.3..0.0)]);
            let th2 = DVector::from_vec(vec![rng.gen_range(-0.3..0.0)]);
            let lhs = sys.a_of(&th) * &x + sys.b_of(&th) * &u
                - sys.a_of(&th2) * &x
                - sys.b_of(&th2) * &u;
            let rhs = d_map(&x, &u, &sys) * (&th - &th2);
            assert!((lhs - rhs).amax() < 1e-12);
        }
    }

    #[test]
    fn constraint_normalization_warns_and_rescales() {
        let f = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, -1.0]);
        let x_set = Polytope::new(f, DVector::from_vec(vec![3.0, 3.0]));
        let sys = UncertainLTISystem::new(
            vec![DMatrix::identity(2, 2) * 0.5],
            vec![DMatrix::zeros(2, 1)],
            Polytope::new(DMatrix::zeros(0, 0), DVector::zeros(0)),
            x_set,
            Polytope::unit_box(1),
            0.9,
            0.9,
        )
        .unwrap();
        assert!(sys.x_set.has_unit_offsets());
        assert_abs_diff_eq!(sys.x_set.h()[(0, 1)], 1.0 / 3.0, epsilon = 1e-12);
    }
}
