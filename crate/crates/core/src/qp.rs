//! Operator-splitting QP engine for the receding-horizon hot path:
//!
//! ```text
//! minimize   0.5 x' P x + q' x
//! subject to l <= A x <= u
//! ```
//!
//! The constraint matrix of the step program never changes within a run, so
//! the quasidefinite KKT system is factorized once per controller and every
//! subsequent solve costs only triangular solves, warm-started from the
//! previous step. Accuracy is recovered by an active-set polish solve; the
//! caller re-checks residuals independently and falls back to the
//! interior-point path when anything looks off, so this engine never has the
//! last word on feasibility.

use crate::conic::ConicError;
use clarabel::algebra::CscMatrix;
use clarabel::qdldl::{QDLDLFactorisation, QDLDLSettingsBuilder};

/// Values at or beyond this magnitude are treated as infinite bounds.
pub const QP_INF: f64 = 1e30;
const INF: f64 = QP_INF;

#[derive(Debug, Clone)]
pub struct QpData {
    pub n: usize,
    pub m: usize,
    /// Upper-triangular entries of `P`.
    pub p_upper: Vec<(usize, usize, f64)>,
    pub q: Vec<f64>,
    pub a: Vec<(usize, usize, f64)>,
    pub l: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSettings {
    pub sigma: f64,
    pub rho: f64,
    pub alpha: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_inf: f64,
    pub max_iter: usize,
    pub check_every: usize,
    pub adaptive_rho: bool,
    pub polish: bool,
    pub scaling_iters: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            sigma: 1e-6,
            rho: 0.1,
            alpha: 1.6,
            eps_abs: 1e-7,
            eps_rel: 1e-7,
            eps_inf: 1e-9,
            max_iter: 20_000,
            check_every: 25,
            adaptive_rho: true,
            polish: true,
            scaling_iters: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIterations,
    PrimalInfeasible,
    DualInfeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub status: QpStatus,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub iterations: usize,
    pub prim_res: f64,
    pub dual_res: f64,
    pub polished: bool,
}

struct Csc {
    nrows: usize,
    ncols: usize,
    colptr: Vec<usize>,
    rowval: Vec<usize>,
    nzval: Vec<f64>,
}

impl Csc {
    fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Csc {
        let mut per_col: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ncols];
        for &(r, c, v) in triplets {
            per_col[c].push((r, v));
        }
        let mut colptr = Vec::with_capacity(ncols + 1);
        let mut rowval = Vec::new();
        let mut nzval = Vec::new();
        colptr.push(0);
        for col in &mut per_col {
            col.sort_by_key(|&(r, _)| r);
            let mut last = usize::MAX;
            for &(r, v) in col.iter() {
                if r == last {
                    let k = nzval.len();
                    nzval[k - 1] += v;
                } else {
                    rowval.push(r);
                    nzval.push(v);
                    last = r;
                }
            }
            colptr.push(rowval.len());
        }
        Csc {
            nrows,
            ncols,
            colptr,
            rowval,
            nzval,
        }
    }

    /// y += A x
    fn gemv(&self, x: &[f64], y: &mut [f64]) {
        for col in 0..self.ncols {
            let xv = x[col];
            if xv == 0.0 {
                continue;
            }
            for k in self.colptr[col]..self.colptr[col + 1] {
                y[self.rowval[k]] += self.nzval[k] * xv;
            }
        }
    }

    /// y += A' x
    fn gemv_t(&self, x: &[f64], y: &mut [f64]) {
        for col in 0..self.ncols {
            let mut acc = 0.0;
            for k in self.colptr[col]..self.colptr[col + 1] {
                acc += self.nzval[k] * x[self.rowval[k]];
            }
            y[col] += acc;
        }
    }
}

/// Symmetric (upper-stored) matrix-vector product `y += P x`.
fn sym_gemv(p: &Csc, x: &[f64], y: &mut [f64]) {
    for col in 0..p.ncols {
        let xc = x[col];
        for k in p.colptr[col]..p.colptr[col + 1] {
            let r = p.rowval[k];
            let v = p.nzval[k];
            y[r] += v * xc;
            if r != col {
                y[col] += v * x[r];
            }
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub struct QpWorkspace {
    n: usize,
    m: usize,
    settings: QpSettings,
    // scaled data
    p_scaled: Csc,
    a_scaled: Csc,
    q_scaled: Vec<f64>,
    l_scaled: Vec<f64>,
    u_scaled: Vec<f64>,
    // Ruiz scaling: D over variables, E over rows, c over the cost
    d_scale: Vec<f64>,
    e_scale: Vec<f64>,
    c_scale: f64,
    // per-row penalty and the KKT machinery
    rho: Vec<f64>,
    kkt: QDLDLFactorisation<f64>,
    /// nzval positions of the `-1/rho_i` diagonal entries in the KKT input.
    rho_positions: Vec<usize>,
    // iterates (scaled space)
    x: Vec<f64>,
    z: Vec<f64>,
    y: Vec<f64>,
    have_warm_start: bool,
    // scratch
    rhs: Vec<f64>,
}

impl QpWorkspace {
    pub fn new(data: &QpData, settings: QpSettings) -> Result<Self, ConicError> {
        let n = data.n;
        let m = data.m;
        if data.q.len() != n || data.l.len() != m || data.u.len() != m {
            return Err(ConicError::Malformed("qp dimension mismatch".into()));
        }

        // modified Ruiz equilibration on [P A'; A 0]
        let mut d = vec![1.0; n];
        let mut e = vec![1.0; m];
        let mut p_tr: Vec<(usize, usize, f64)> = data.p_upper.clone();
        let mut a_tr: Vec<(usize, usize, f64)> = data.a.clone();
        for _ in 0..settings.scaling_iters {
            let mut col_max = vec![0.0f64; n];
            let mut row_max = vec![0.0f64; m];
            for &(r, c, v) in &p_tr {
                col_max[c] = col_max[c].max(v.abs());
                col_max[r] = col_max[r].max(v.abs());
            }
            for &(r, c, v) in &a_tr {
                col_max[c] = col_max[c].max(v.abs());
                row_max[r] = row_max[r].max(v.abs());
            }
            let mut delta = vec![1.0f64; n];
            let mut eps_r = vec![1.0f64; m];
            for j in 0..n {
                if col_max[j] > 1e-12 {
                    delta[j] = 1.0 / col_max[j].sqrt();
                }
            }
            for i in 0..m {
                if row_max[i] > 1e-12 {
                    eps_r[i] = 1.0 / row_max[i].sqrt();
                }
            }
            for t in p_tr.iter_mut() {
                t.2 *= delta[t.0] * delta[t.1];
            }
            for t in a_tr.iter_mut() {
                t.2 *= eps_r[t.0] * delta[t.1];
            }
            for j in 0..n {
                d[j] *= delta[j];
            }
            for i in 0..m {
                e[i] *= eps_r[i];
            }
        }
        let mut q_scaled: Vec<f64> = (0..n).map(|j| data.q[j] * d[j]).collect();
        // cost normalization
        let mut p_colmax = vec![0.0f64; n];
        for &(r, c, v) in &p_tr {
            p_colmax[c] = p_colmax[c].max(v.abs());
            p_colmax[r] = p_colmax[r].max(v.abs());
        }
        let mean_p = if n > 0 {
            p_colmax.iter().sum::<f64>() / n as f64
        } else {
            0.0
        };
        let c_scale = 1.0 / mean_p.max(inf_norm(&q_scaled)).max(1e-6);
        for t in p_tr.iter_mut() {
            t.2 *= c_scale;
        }
        for qv in q_scaled.iter_mut() {
            *qv *= c_scale;
        }
        let l_scaled: Vec<f64> = (0..m)
            .map(|i| {
                if data.l[i] <= -INF {
                    -INF
                } else {
                    data.l[i] * e[i]
                }
            })
            .collect();
        let u_scaled: Vec<f64> = (0..m)
            .map(|i| if data.u[i] >= INF { INF } else { data.u[i] * e[i] })
            .collect();

        // per-row penalties: stiff on equality rows
        let rho: Vec<f64> = (0..m)
            .map(|i| {
                if (u_scaled[i] - l_scaled[i]).abs() <= 1e-12 {
                    settings.rho * 1e3
                } else {
                    settings.rho
                }
            })
            .collect();

        let p_scaled = Csc::from_triplets(n, n, &p_tr);
        let a_scaled = Csc::from_triplets(m, n, &a_tr);

        // KKT = [P + sigma I, A'; A, -diag(1/rho)], upper triangle
        let (kkt, rho_positions) = build_kkt(&p_scaled, &a_scaled, &rho, settings.sigma)?;

        Ok(QpWorkspace {
            n,
            m,
            settings,
            p_scaled,
            a_scaled,
            q_scaled,
            l_scaled,
            u_scaled,
            d_scale: d,
            e_scale: e,
            c_scale,
            rho,
            kkt,
            rho_positions,
            x: vec![0.0; n],
            z: vec![0.0; m],
            y: vec![0.0; m],
            have_warm_start: false,
            rhs: vec![0.0; n + m],
        })
    }

    /// Replace the linear cost (unscaled).
    pub fn update_linear_cost(&mut self, q: &[f64]) {
        assert_eq!(q.len(), self.n);
        for j in 0..self.n {
            self.q_scaled[j] = q[j] * self.d_scale[j] * self.c_scale;
        }
    }

    /// Replace the bounds (unscaled).
    pub fn update_bounds(&mut self, l: &[f64], u: &[f64]) {
        assert_eq!(l.len(), self.m);
        for i in 0..self.m {
            self.l_scaled[i] = if l[i] <= -INF { -INF } else { l[i] * self.e_scale[i] };
            self.u_scaled[i] = if u[i] >= INF { INF } else { u[i] * self.e_scale[i] };
        }
    }

    pub fn reset_warm_start(&mut self) {
        self.x.iter_mut().for_each(|v| *v = 0.0);
        self.z.iter_mut().for_each(|v| *v = 0.0);
        self.y.iter_mut().for_each(|v| *v = 0.0);
        self.have_warm_start = false;
    }

    /// Unscale the current primal iterate.
    fn unscaled_x(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|j| x[j] * self.d_scale[j]).collect()
    }

    fn unscaled_y(&self, y: &[f64]) -> Vec<f64> {
        (0..self.m)
            .map(|i| y[i] * self.e_scale[i] / self.c_scale)
            .collect()
    }

    /// Unscaled residuals at `(x, z, y)` (scaled iterates).
    fn residuals(&self, x: &[f64], z: &[f64], y: &[f64]) -> (f64, f64, f64, f64) {
        let n = self.n;
        let m = self.m;
        let mut ax = vec![0.0; m];
        self.a_scaled.gemv(x, &mut ax);
        let mut px = vec![0.0; n];
        sym_gemv(&self.p_scaled, x, &mut px);
        let mut aty = vec![0.0; n];
        self.a_scaled.gemv_t(y, &mut aty);

        let mut rp: f64 = 0.0;
        let mut sp: f64 = 0.0;
        for i in 0..m {
            let einv = 1.0 / self.e_scale[i];
            rp = rp.max(((ax[i] - z[i]) * einv).abs());
            sp = sp.max((ax[i] * einv).abs()).max((z[i] * einv).abs());
        }
        let mut rd: f64 = 0.0;
        let mut sd: f64 = 0.0;
        let cinv = 1.0 / self.c_scale;
        for j in 0..n {
            let dinv = 1.0 / self.d_scale[j];
            rd = rd.max(((px[j] + self.q_scaled[j] + aty[j]) * dinv * cinv).abs());
            sd = sd
                .max((px[j] * dinv * cinv).abs())
                .max((aty[j] * dinv * cinv).abs())
                .max((self.q_scaled[j] * dinv * cinv).abs());
        }
        (rp, sp, rd, sd)
    }

    fn kkt_solve(&mut self, rhs_x: &[f64], rhs_z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let m = self.m;
        self.rhs[..n].copy_from_slice(rhs_x);
        self.rhs[n..].copy_from_slice(rhs_z);
        self.kkt.solve(&mut self.rhs);
        (self.rhs[..n].to_vec(), self.rhs[n..].to_vec())
    }

    pub fn solve(&mut self) -> Result<QpSolution, ConicError> {
        let n = self.n;
        let m = self.m;
        let (alpha, sigma) = (self.settings.alpha, self.settings.sigma);
        if !self.have_warm_start {
            // start from the projection of the bounds midpoint
            for i in 0..m {
                let lo = self.l_scaled[i].max(-1.0);
                let hi = self.u_scaled[i].min(1.0);
                self.z[i] = 0.5 * (lo + hi);
            }
        }
        let mut iterations = 0;
        let mut status = QpStatus::MaxIterations;
        let (mut rp, mut rd) = (f64::INFINITY, f64::INFINITY);
        let mut rho_bar = self.settings.rho;

        while iterations < self.settings.max_iter {
            let y_prev = self.y.clone();
            let x_prev = self.x.clone();
            for _ in 0..self.settings.check_every {
                iterations += 1;
                // x-update
                let rhs_x: Vec<f64> = (0..n)
                    .map(|j| sigma * self.x[j] - self.q_scaled[j])
                    .collect();
                let rhs_z: Vec<f64> = (0..m)
                    .map(|i| self.z[i] - self.y[i] / self.rho[i])
                    .collect();
                let (x_tilde, nu) = self.kkt_solve(&rhs_x, &rhs_z);
                // z-tilde and relaxed updates
                for j in 0..n {
                    self.x[j] = alpha * x_tilde[j] + (1.0 - alpha) * self.x[j];
                }
                for i in 0..m {
                    let z_tilde = self.z[i] + (nu[i] - self.y[i]) / self.rho[i];
                    let z_relaxed = alpha * z_tilde + (1.0 - alpha) * self.z[i];
                    let z_new = (z_relaxed + self.y[i] / self.rho[i])
                        .clamp(self.l_scaled[i].max(-INF), self.u_scaled[i].min(INF));
                    self.y[i] += self.rho[i] * (z_relaxed - z_new);
                    self.z[i] = z_new;
                }
            }

            let (rp_now, sp, rd_now, sd) = self.residuals(&self.x, &self.z, &self.y);
            rp = rp_now;
            rd = rd_now;
            let eps_p = self.settings.eps_abs + self.settings.eps_rel * sp;
            let eps_d = self.settings.eps_abs + self.settings.eps_rel * sd;
            if rp <= eps_p && rd <= eps_d {
                status = QpStatus::Solved;
                break;
            }

            // infeasibility certificates (scaled-space tests; the caller
            // confirms through an independent path before acting on them)
            let dy: Vec<f64> = (0..m).map(|i| self.y[i] - y_prev[i]).collect();
            let dy_norm = inf_norm(&dy);
            if dy_norm > self.settings.eps_inf {
                let mut at_dy = vec![0.0; n];
                self.a_scaled.gemv_t(&dy, &mut at_dy);
                let mut support = 0.0;
                for i in 0..m {
                    if dy[i] > 0.0 {
                        if self.u_scaled[i] >= INF {
                            support = f64::INFINITY;
                            break;
                        }
                        support += self.u_scaled[i] * dy[i];
                    } else if dy[i] < 0.0 {
                        if self.l_scaled[i] <= -INF {
                            support = f64::INFINITY;
                            break;
                        }
                        support += self.l_scaled[i] * dy[i];
                    }
                }
                if inf_norm(&at_dy) <= 1e-6 * dy_norm && support < -1e-6 * dy_norm {
                    status = QpStatus::PrimalInfeasible;
                    break;
                }
            }
            let dx: Vec<f64> = (0..n).map(|j| self.x[j] - x_prev[j]).collect();
            let dx_norm = inf_norm(&dx);
            if dx_norm > self.settings.eps_inf {
                let mut pdx = vec![0.0; n];
                sym_gemv(&self.p_scaled, &dx, &mut pdx);
                let mut adx = vec![0.0; m];
                self.a_scaled.gemv(&dx, &mut adx);
                let qdx: f64 = (0..n).map(|j| self.q_scaled[j] * dx[j]).sum();
                let bounded_dir = (0..m).all(|i| {
                    (adx[i] <= 1e-6 * dx_norm || self.u_scaled[i] >= INF)
                        && (adx[i] >= -1e-6 * dx_norm || self.l_scaled[i] <= -INF)
                });
                if inf_norm(&pdx) <= 1e-6 * dx_norm && qdx < -1e-6 * dx_norm && bounded_dir {
                    status = QpStatus::DualInfeasible;
                    break;
                }
            }

            // adaptive penalty: rebalance primal vs dual progress
            if self.settings.adaptive_rho {
                let ratio = ((rp / sp.max(1e-12)) / (rd / sd.max(1e-12)).max(1e-12)).sqrt();
                if ratio > 5.0 || ratio < 0.2 {
                    rho_bar = (rho_bar * ratio).clamp(1e-6, 1e6);
                    let mut vals = Vec::with_capacity(m);
                    for i in 0..m {
                        let stiff =
                            if (self.u_scaled[i] - self.l_scaled[i]).abs() <= 1e-12 {
                                1e3
                            } else {
                                1.0
                            };
                        self.rho[i] = rho_bar * stiff;
                        vals.push(-1.0 / self.rho[i]);
                    }
                    self.kkt.update_values(&self.rho_positions, &vals);
                    self.kkt
                        .refactor()
                        .map_err(|e| ConicError::NumericalFailure {
                            iterations: iterations as u32,
                            detail: format!("kkt refactor: {e:?}"),
                        })?;
                }
            }
        }

        self.have_warm_start = true;
        let mut polished = false;
        let mut x_best = self.x.clone();
        let mut y_best = self.y.clone();
        if status == QpStatus::Solved && self.settings.polish {
            if let Some((xp, yp)) = self.polish() {
                let mut zp = vec![0.0; m];
                self.a_scaled.gemv(&xp, &mut zp);
                for i in 0..m {
                    zp[i] = zp[i].clamp(self.l_scaled[i], self.u_scaled[i]);
                }
                let (rp2, sp2, rd2, sd2) = self.residuals(&xp, &zp, &yp);
                let (rp1, sp1, rd1, sd1) = self.residuals(&self.x, &self.z, &self.y);
                let score = |r: f64, s: f64| r / (1.0 + s);
                if score(rp2, sp2).max(score(rd2, sd2))
                    < score(rp1, sp1).max(score(rd1, sd1))
                {
                    x_best = xp;
                    y_best = yp;
                    rp = rp2;
                    rd = rd2;
                    polished = true;
                }
            }
        }

        Ok(QpSolution {
            status,
            x: self.unscaled_x(&x_best),
            y: self.unscaled_y(&y_best),
            iterations,
            prim_res: rp,
            dual_res: rd,
            polished,
        })
    }

    /// Active-set polish: solve the equality-constrained KKT on the rows the
    /// multipliers mark as active, with a little iterative refinement.
    fn polish(&mut self) -> Option<(Vec<f64>, Vec<f64>)> {
        let n = self.n;
        let m = self.m;
        let tol = 1e-9;
        let mut active: Vec<(usize, f64)> = Vec::new(); // (row, bound value)
        for i in 0..m {
            let eq = (self.u_scaled[i] - self.l_scaled[i]).abs() <= 1e-12;
            if eq || self.y[i] < -tol {
                active.push((i, if eq { self.u_scaled[i] } else { self.l_scaled[i] }));
            } else if self.y[i] > tol {
                active.push((i, self.u_scaled[i]));
            }
        }
        let na = active.len();
        let delta = 1e-9;
        let mut kkt_tr: Vec<(usize, usize, f64)> = Vec::new();
        for c in 0..self.p_scaled.ncols {
            for k in self.p_scaled.colptr[c]..self.p_scaled.colptr[c + 1] {
                kkt_tr.push((self.p_scaled.rowval[k], c, self.p_scaled.nzval[k]));
            }
        }
        for j in 0..n {
            kkt_tr.push((j, j, delta));
        }
        for (ai, &(row, _)) in active.iter().enumerate() {
            for c in 0..self.a_scaled.ncols {
                for k in self.a_scaled.colptr[c]..self.a_scaled.colptr[c + 1] {
                    if self.a_scaled.rowval[k] == row {
                        kkt_tr.push((c, n + ai, self.a_scaled.nzval[k]));
                    }
                }
            }
            kkt_tr.push((n + ai, n + ai, -delta));
        }
        let dim = n + na;
        let csc = Csc::from_triplets(dim, dim, &kkt_tr);
        let kkt_in = CscMatrix::new(dim, dim, csc.colptr.clone(), csc.rowval.clone(), csc.nzval.clone());
        let mut signs = vec![1i8; n];
        signs.extend(std::iter::repeat(-1i8).take(na));
        let settings = QDLDLSettingsBuilder::default()
            .Dsigns(signs)
            .build()
            .ok()?;
        let mut fact = QDLDLFactorisation::new(&kkt_in, Some(settings)).ok()?;

        let mut rhs = vec![0.0; dim];
        for j in 0..n {
            rhs[j] = -self.q_scaled[j];
        }
        for (ai, &(_, bound)) in active.iter().enumerate() {
            rhs[n + ai] = bound;
        }
        let mut sol = rhs.clone();
        fact.solve(&mut sol);
        // refinement against the unregularized system
        for _ in 0..3 {
            let mut resid = rhs.clone();
            // resid -= K0 sol, K0 without the delta regularization
            let mut px = vec![0.0; n];
            sym_gemv(&self.p_scaled, &sol[..n], &mut px);
            let mut at_nu = vec![0.0; n];
            let mut nu_full = vec![0.0; m];
            for (ai, &(row, _)) in active.iter().enumerate() {
                nu_full[row] = sol[n + ai];
            }
            self.a_scaled.gemv_t(&nu_full, &mut at_nu);
            for j in 0..n {
                resid[j] -= px[j] + at_nu[j];
            }
            let mut ax = vec![0.0; m];
            self.a_scaled.gemv(&sol[..n], &mut ax);
            for (ai, &(row, _)) in active.iter().enumerate() {
                resid[n + ai] -= ax[row];
            }
            let mut corr = resid.clone();
            fact.solve(&mut corr);
            for k in 0..dim {
                sol[k] += corr[k];
            }
        }
        let mut y = vec![0.0; m];
        for (ai, &(row, _)) in active.iter().enumerate() {
            y[row] = sol[n + ai];
        }
        Some((sol[..n].to_vec(), y))
    }
}

fn build_kkt(
    p: &Csc,
    a: &Csc,
    rho: &[f64],
    sigma: f64,
) -> Result<(QDLDLFactorisation<f64>, Vec<usize>), ConicError> {
    let n = p.ncols;
    let m = a.nrows;
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut have_diag = vec![false; n];
    for c in 0..n {
        for k in p.colptr[c]..p.colptr[c + 1] {
            let r = p.rowval[k];
            let mut v = p.nzval[k];
            if r == c {
                v += sigma;
                have_diag[c] = true;
            }
            triplets.push((r, c, v));
        }
    }
    for j in 0..n {
        if !have_diag[j] {
            triplets.push((j, j, sigma));
        }
    }
    for c in 0..a.ncols {
        for k in a.colptr[c]..a.colptr[c + 1] {
            triplets.push((c, n + a.rowval[k], a.nzval[k]));
        }
    }
    for i in 0..m {
        triplets.push((n + i, n + i, -1.0 / rho[i]));
    }
    let csc = Csc::from_triplets(n + m, n + m, &triplets);
    // positions of the rho diagonal in nzval order: the last entry of each
    // slack column is its diagonal (rows are sorted per column)
    let mut rho_positions = Vec::with_capacity(m);
    for i in 0..m {
        let col = n + i;
        let end = csc.colptr[col + 1];
        debug_assert!(end > csc.colptr[col]);
        debug_assert_eq!(csc.rowval[end - 1], col);
        rho_positions.push(end - 1);
    }
    let kkt_in = CscMatrix::new(
        n + m,
        n + m,
        csc.colptr.clone(),
        csc.rowval.clone(),
        csc.nzval.clone(),
    );
    let mut signs = vec![1i8; n];
    signs.extend(std::iter::repeat(-1i8).take(m));
    let settings = QDLDLSettingsBuilder::default()
        .Dsigns(signs)
        .build()
        .map_err(|e| ConicError::Malformed(format!("qdldl settings: {e}")))?;
    let fact = QDLDLFactorisation::new(&kkt_in, Some(settings)).map_err(|e| {
        ConicError::NumericalFailure {
            iterations: 0,
            detail: format!("kkt factorization: {e:?}"),
        }
    })?;
    Ok((fact, rho_positions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_qp() -> QpData {
        // min 0.5 (x1^2 + x2^2) + x1  s.t. x1 + x2 = 1, 0 <= x1 <= 0.7
        QpData {
            n: 2,
            m: 2,
            p_upper: vec![(0, 0, 1.0), (1, 1, 1.0)],
            q: vec![1.0, 0.0],
            a: vec![(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0)],
            l: vec![1.0, 0.0],
            u: vec![1.0, 0.7],
        }
    }

    #[test]
    fn solves_small_qp() {
        // analytic: unconstrained-in-the-line optimum x1 = (1-1)/2 - ... do
        // it by KKT: min over x1 of 0.5 x1^2 + 0.5 (1-x1)^2 + x1, d/dx1 =
        // x1 - (1 - x1) + 1 = 2 x1, so x1 = 0 (boundary inactive), x2 = 1
        let data = small_qp();
        let mut ws = QpWorkspace::new(&data, QpSettings::default()).unwrap();
        let sol = ws.solve().unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert_abs_diff_eq!(sol.x[0], 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.x[1], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn matches_interior_point_on_random_qps() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for trial in 0..20 {
            let n = 6;
            let m = 8;
            // SPD P
            let raw = nalgebra::DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let p_mat = &raw * raw.transpose() + nalgebra::DMatrix::identity(n, n) * 0.5;
            let mut p_upper = Vec::new();
            for j in 0..n {
                for i in 0..=j {
                    p_upper.push((i, j, p_mat[(i, j)]));
                }
            }
            let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut a = Vec::new();
            let mut l = Vec::new();
            let mut u = Vec::new();
            for r in 0..m {
                for c in 0..n {
                    a.push((r, c, rng.gen_range(-1.0..1.0)));
                }
                if r == 0 {
                    let b = rng.gen_range(-0.5..0.5);
                    l.push(b);
                    u.push(b); // one equality row
                } else {
                    l.push(-INF);
                    u.push(rng.gen_range(0.2..1.5));
                }
            }
            let data = QpData {
                n,
                m,
                p_upper: p_upper.clone(),
                q: q.clone(),
                a: a.clone(),
                l: l.clone(),
                u: u.clone(),
            };
            let mut ws = QpWorkspace::new(&data, QpSettings::default()).unwrap();
            let sol = ws.solve().unwrap();
            assert_eq!(sol.status, QpStatus::Solved, "trial {trial}");

            // interior-point reference through the conic facade
            use crate::conic::{solve_conic, Block, ConicProgram, LinearBlock};
            let mut prog = ConicProgram::new(n);
            prog.quad = p_upper.clone();
            prog.linear = q.clone();
            let mut eq = LinearBlock::new(1);
            for c in 0..n {
                eq.push(0, c, a[c].2);
            }
            eq.rhs[0] = u[0];
            prog.add_block(Block::Equality(eq));
            let mut ineq = LinearBlock::new(m - 1);
            for &(r, c, v) in &a {
                if r > 0 {
                    ineq.push(r - 1, c, v);
                }
            }
            for r in 1..m {
                ineq.rhs[r - 1] = u[r];
            }
            prog.add_block(Block::Inequality(ineq));
            let reference = solve_conic(&prog).unwrap();
            let obj_admm: f64 = {
                let xv = nalgebra::DVector::from_vec(sol.x.clone());
                0.5 * (xv.transpose() * &p_mat * &xv)[(0, 0)]
                    + q.iter().zip(sol.x.iter()).map(|(a, b)| a * b).sum::<f64>()
            };
            assert_abs_diff_eq!(obj_admm, reference.objective, epsilon = 1e-5);
        }
    }

    #[test]
    fn warm_start_reduces_iterations() {
        let data = small_qp();
        let mut ws = QpWorkspace::new(&data, QpSettings::default()).unwrap();
        let cold = ws.solve().unwrap();
        // nudge the cost and re-solve warm
        ws.update_linear_cost(&[1.01, 0.0]);
        let warm = ws.solve().unwrap();
        assert_eq!(warm.status, QpStatus::Solved);
        assert!(warm.iterations <= cold.iterations);
    }

    #[test]
    fn detects_primal_infeasibility() {
        // x >= 1 and x <= 0
        let data = QpData {
            n: 1,
            m: 2,
            p_upper: vec![(0, 0, 1.0)],
            q: vec![0.0],
            a: vec![(0, 0, 1.0), (1, 0, 1.0)],
            l: vec![1.0, -INF],
            u: vec![INF, 0.0],
        };
        let mut ws = QpWorkspace::new(&data, QpSettings::default()).unwrap();
        let sol = ws.solve().unwrap();
        assert_eq!(sol.status, QpStatus::PrimalInfeasible);
    }

    #[test]
    fn bounds_update_is_respected() {
        let data = small_qp();
        let mut ws = QpWorkspace::new(&data, QpSettings::default()).unwrap();
        let _ = ws.solve().unwrap();
        // force x1 >= 0.2 via the box row
        ws.update_bounds(&[1.0, 0.2], &[1.0, 0.7]);
        let sol = ws.solve().unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert_abs_diff_eq!(sol.x[0], 0.2, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.x[1], 0.8, epsilon = 1e-6);
    }
}
