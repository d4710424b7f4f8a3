//! Config-driven experiment pipelines: offline synthesis with disk caching,
//! single closed-loop runs, and sweep grids over mismatch size and
//! probability level, plus the JSON/TOML schemas shared with the
//! command-line front end.
//!
//! Reproducibility contract: every output file is a pure function of
//! `(config, seed)`. Run artifacts embed a content hash of the synthesis
//! inputs in their file names, and cached synthesis products are keyed by
//! the same hash so online runs never re-solve SDPs unless asked to.

use crate::conic::SolverOpts;
use crate::linalg;
use crate::model::{
    self, center_lqr_gain, terminal_weight, verify_gain, FeedbackGain, UncertainLTISystem,
};
use crate::mpc::{self, MpcConfig, MpcProblem};
use crate::polytope::Polytope;
use crate::rprs::{
    self, build_rprs, correlated_variance_bounds_with, iid_variance_bounds_with, tighten,
    NoiseCovariance, NoiseFamily, NoiseModel, RprsOpts, RprsSequence, RprsShape,
    VarianceBoundSequence,
};
use crate::sim::{
    self, empirical_satisfaction, ClosedLoopTrace, EstimatorHook, RlsEstimator, RunOptions,
    SatisfactionReport,
};
use crate::tube::{self, contractive_base, terminal_set, TerminalSet};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Row-major matrix serialization shared by every config and cache schema.
pub mod serde_matrix {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, ser: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
            .collect();
        rows.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(de)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        for r in &rows {
            if r.len() != ncols {
                return Err(serde::de::Error::custom("ragged matrix rows"));
            }
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
    }
}

/// Plain row-major matrix value for config files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MatrixData(#[serde(with = "serde_matrix")] pub DMatrix<f64>);

#[derive(Debug, Error)]
pub enum ExpError {
    #[error("config error: {0}")]
    Config(String),
    #[error("infeasible scenario: {0}")]
    Infeasible(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<crate::model::ModelError> for ExpError {
    fn from(e: crate::model::ModelError) -> Self {
        ExpError::Solver(e.to_string())
    }
}
impl From<rprs::RprsError> for ExpError {
    fn from(e: rprs::RprsError) -> Self {
        ExpError::Solver(e.to_string())
    }
}
impl From<tube::TubeError> for ExpError {
    fn from(e: tube::TubeError) -> Self {
        match e {
            tube::TubeError::TerminalSetEmpty => {
                ExpError::Infeasible("terminal set empty (over-tightening)".into())
            }
            other => ExpError::Solver(other.to_string()),
        }
    }
}
impl From<mpc::MpcError> for ExpError {
    fn from(e: mpc::MpcError) -> Self {
        match e {
            mpc::MpcError::Infeasible { step } => {
                ExpError::Infeasible(format!("step {step} infeasible"))
            }
            mpc::MpcError::BadConfig(msg) => ExpError::Config(msg),
            other => ExpError::Solver(other.to_string()),
        }
    }
}
impl From<sim::SimError> for ExpError {
    fn from(e: sim::SimError) -> Self {
        ExpError::Solver(e.to_string())
    }
}
impl From<crate::polytope::PolytopeError> for ExpError {
    fn from(e: crate::polytope::PolytopeError) -> Self {
        ExpError::Solver(e.to_string())
    }
}
impl From<serde_json::Error> for ExpError {
    fn from(e: serde_json::Error) -> Self {
        ExpError::Config(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Config schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub system: SystemConfig,
    pub gain: GainConfig,
    pub cost: CostConfig,
    pub noise: NoiseConfig,
    pub rprs: RprsConfig,
    pub tube: TubeConfig,
    /// Prediction horizon `N`.
    pub horizon: usize,
    /// Task length `T`.
    pub task_len: usize,
    pub sweep: SweepConfig,
    pub seeds: SeedConfig,
    pub estimator: EstimatorConfig,
    pub theta_true: ThetaTrueConfig,
    /// State rows whose joint satisfaction defines the headline metric.
    pub metric_rows: Vec<usize>,
    /// Also run the nominal baseline (singleton parameter set at the
    /// estimate) for comparison.
    #[serde(default)]
    pub with_baseline: bool,
    #[serde(default)]
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SystemConfig {
    /// `[A_0, A_1, .., A_p]`
    pub a_mats: Vec<MatrixData>,
    pub b_mats: Vec<MatrixData>,
    /// Mismatch template: the sweep scales this polytope's offsets by alpha.
    pub theta_template: TemplatePolytope,
    pub state_h: MatrixData,
    pub state_offsets: Vec<f64>,
    pub input_h: MatrixData,
    pub input_offsets: Vec<f64>,
    /// Input probability level (state level comes from the sweep);
    /// `"px"` ties it to the state level.
    pub p_u: PuConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case", untagged)]
pub enum PuConfig {
    Fixed(f64),
    Tied(String), // the literal "px"
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TemplatePolytope {
    pub h: MatrixData,
    pub offsets: Vec<f64>,
}

impl TemplatePolytope {
    pub fn scaled(&self, alpha: f64) -> Polytope {
        let off = DVector::from_column_slice(&self.offsets) * alpha;
        Polytope::new(self.h.0.clone(), off)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum GainConfig {
    /// LQR at the parameter set's Chebyshev center with the given weights,
    /// certified over the whole set.
    CenterLqr { q: MatrixData, r: MatrixData },
    /// A fixed gain, certified over the whole set.
    Given { k: MatrixData },
    /// LMI synthesis (change of variables), when no better gain is known.
    Synthesize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CostConfig {
    pub q: MatrixData,
    pub r: MatrixData,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NoiseConfig {
    pub family: NoiseFamily,
    pub kind: NoiseKind,
    #[serde(default)]
    pub mean: MeanConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum NoiseKind {
    Iid {
        sigma_w: MatrixData,
    },
    /// Stationary AR(1)-kernel covariance: block `(a, b)` equals
    /// `rho^|a-b| * sigma_w`.
    Ar1 {
        sigma_w: MatrixData,
        rho: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum MeanConfig {
    #[default]
    Zero,
    /// `offset + amplitude * sin(2 pi k / period + phase)`, elementwise.
    Sinusoid {
        offset: Vec<f64>,
        amplitude: Vec<f64>,
        period: f64,
        #[serde(default)]
        phase: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RprsConfig {
    pub shape: ShapeConfig,
    /// Bound-table length; zero means "task length, or until convergence
    /// for i.i.d. noise".
    #[serde(default)]
    pub table_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ShapeConfig {
    Ellipsoid,
    HalfSpaces,
    /// Boole-budgeted polytope over the state-constraint normals.
    ConstraintPolytope {
        #[serde(default)]
        budgets: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TubeConfig {
    /// Compute a robustly contractive base from a seed shape.
    Contractive {
        lambda: f64,
        #[serde(default)]
        seed: SeedShape,
    },
    /// Explicit unit-offset base polytope.
    Explicit { h: MatrixData },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SeedShape {
    /// Fewest facets and vertices; the cheapest controller.
    #[default]
    Simplex,
    Box,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub p_levels: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SeedConfig {
    pub master_seed: u64,
    pub num_runs: usize,
}

impl SeedConfig {
    /// Per-run seeds: decorrelated from the master seed by splitmix steps.
    pub fn run_seeds(&self) -> Vec<u64> {
        let mut state = self.master_seed;
        (0..self.num_runs)
            .map(|_| {
                state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
                let mut z = state;
                z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
                z ^ (z >> 31)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum EstimatorConfig {
    /// Fixed estimate `alpha * template`.
    Constant { template: Vec<f64> },
    /// Projected recursive least squares from the given prior template.
    Rls {
        prior_template: Vec<f64>,
        prior_cov: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ThetaTrueConfig {
    /// Fixed true parameter (not scaled by alpha).
    Fixed { value: Vec<f64> },
    /// Scaled template `alpha * value`.
    Scaled { value: Vec<f64> },
    /// Uniform over the scaled parameter polytope, redrawn per seed.
    Uniform,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExpError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ExpError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self, ExpError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExpError> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text),
            _ => Self::from_toml(&text),
        }
    }

    pub fn validate(&self) -> Result<(), ExpError> {
        if self.sweep.alphas.is_empty() || self.sweep.p_levels.is_empty() {
            return Err(ExpError::Config("sweep grids must be nonempty".into()));
        }
        if self.horizon == 0 || self.task_len == 0 {
            return Err(ExpError::Config("horizon and task length must be positive".into()));
        }
        if self.seeds.num_runs == 0 {
            return Err(ExpError::Config("need at least one run".into()));
        }
        let n = self.system.a_mats[0].0.nrows();
        if !self.x0.is_empty() && self.x0.len() != n {
            return Err(ExpError::Config("x0 dimension mismatch".into()));
        }
        for &row in &self.metric_rows {
            if row >= self.system.state_h.0.nrows() {
                return Err(ExpError::Config(format!("metric row {row} out of range")));
            }
        }
        Ok(())
    }

    pub fn p_u_for(&self, p_x: f64) -> f64 {
        match &self.system.p_u {
            PuConfig::Fixed(v) => *v,
            PuConfig::Tied(_) => p_x,
        }
    }

    /// Content hash over everything the offline synthesis depends on.
    pub fn synth_hash(&self, cell: &CellSpec, variant: Variant) -> String {
        #[derive(Serialize)]
        struct HashInput<'a> {
            system: &'a SystemConfig,
            gain: &'a GainConfig,
            cost: &'a CostConfig,
            noise: &'a NoiseConfig,
            rprs: &'a RprsConfig,
            tube: &'a TubeConfig,
            horizon: usize,
            task_len: usize,
            estimator: &'a EstimatorConfig,
            cell: &'a CellSpec,
            variant: Variant,
        }
        let blob = serde_json::to_vec(&HashInput {
            system: &self.system,
            gain: &self.gain,
            cost: &self.cost,
            noise: &self.noise,
            rprs: &self.rprs,
            tube: &self.tube,
            horizon: self.horizon,
            task_len: self.task_len,
            estimator: &self.estimator,
            cell,
            variant,
        })
        .expect("hash input serializes");
        let mut hasher = Sha256::new();
        hasher.update(&blob);
        hex_string(&hasher.finalize()[..8])
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One sweep cell: mismatch scale and state probability level.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CellSpec {
    pub alpha: f64,
    pub p_x: f64,
}

/// Which controller to synthesize.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// The robustified scheme over the full parameter polytope.
    Robust,
    /// The nominal indirect-feedback baseline: parameter set collapsed to
    /// the (fixed) estimate, no robustification.
    NominalBaseline,
}

// ---------------------------------------------------------------------------
// Offline synthesis
// ---------------------------------------------------------------------------

/// Everything `synth` produces for one cell, cacheable on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthArtifacts {
    pub version: u32,
    pub hash: String,
    pub k_gain: MatrixData,
    pub p_lyap: MatrixData,
    pub p_term: MatrixData,
    pub base_h: MatrixData,
    pub bounds: VarianceBoundSequence,
    pub rprs: RprsSequence,
    pub terminal: TerminalSet,
    /// Per-step `log det Vbar_k`, the synthesis summary.
    pub log_dets: Vec<f64>,
    /// Whether any tightened stage set came out empty (the cell is then an
    /// infeasible scenario).
    pub state_tightening_empty: bool,
    pub input_tightening_empty: bool,
}

pub const SYNTH_VERSION: u32 = 1;

/// The per-cell working set assembled from config plus synthesis artifacts.
pub struct CellContext {
    pub sys: UncertainLTISystem,
    pub gain: FeedbackGain,
    pub noise_model: NoiseModel,
    pub mean_profile: Vec<DVector<f64>>,
    pub mpc_cfg: MpcConfig,
    pub artifacts: SynthArtifacts,
    pub theta_bar: DVector<f64>,
}

/// Build the uncertain system for a cell and variant.
pub fn build_system(
    cfg: &ExperimentConfig,
    cell: &CellSpec,
    variant: Variant,
) -> Result<UncertainLTISystem, ExpError> {
    let theta_bar = constant_estimate(cfg, cell);
    let theta_set = match variant {
        Variant::Robust => cfg.system.theta_template.scaled(cell.alpha),
        Variant::NominalBaseline => Polytope::singleton(&theta_bar),
    };
    let x_set = Polytope::new(
        cfg.system.state_h.0.clone(),
        DVector::from_column_slice(&cfg.system.state_offsets),
    );
    let u_set = Polytope::new(
        cfg.system.input_h.0.clone(),
        DVector::from_column_slice(&cfg.system.input_offsets),
    );
    UncertainLTISystem::new(
        cfg.system.a_mats.iter().map(|m| m.0.clone()).collect(),
        cfg.system.b_mats.iter().map(|m| m.0.clone()).collect(),
        theta_set,
        x_set,
        u_set,
        cell.p_x,
        cfg.p_u_for(cell.p_x),
    )
    .map_err(|e| ExpError::Config(e.to_string()))
}

/// The constant parameter estimate for a cell (`alpha`-scaled template; the
/// RLS variant uses its prior here).
pub fn constant_estimate(cfg: &ExperimentConfig, cell: &CellSpec) -> DVector<f64> {
    let template = match &cfg.estimator {
        EstimatorConfig::Constant { template } => template,
        EstimatorConfig::Rls { prior_template, .. } => prior_template,
    };
    DVector::from_column_slice(template) * cell.alpha
}

pub fn build_noise_model(cfg: &ExperimentConfig) -> Result<NoiseModel, ExpError> {
    let t_len = cfg.task_len;
    let n = cfg.system.a_mats[0].0.nrows();
    let mean = match &cfg.noise.mean {
        MeanConfig::Zero => vec![0.0; n * t_len],
        MeanConfig::Sinusoid {
            offset,
            amplitude,
            period,
            phase,
        } => {
            if offset.len() != n || amplitude.len() != n {
                return Err(ExpError::Config("mean profile dimension mismatch".into()));
            }
            let mut mean = Vec::with_capacity(n * t_len);
            for k in 0..t_len {
                let s = (2.0 * std::f64::consts::PI * k as f64 / period + phase).sin();
                for i in 0..n {
                    mean.push(offset[i] + amplitude[i] * s);
                }
            }
            mean
        }
    };
    let covariance = match &cfg.noise.kind {
        NoiseKind::Iid { sigma_w } => NoiseCovariance::Iid(sigma_w.0.clone()),
        NoiseKind::Ar1 { sigma_w, rho } => {
            let nb = sigma_w.0.nrows();
            let mut full = DMatrix::zeros(nb * t_len, nb * t_len);
            for a in 0..t_len {
                for b in 0..t_len {
                    let scale = rho.powi((a as i32 - b as i32).abs());
                    full.view_mut((a * nb, b * nb), (nb, nb))
                        .copy_from(&(&sigma_w.0 * scale));
                }
            }
            NoiseCovariance::Full(full)
        }
    };
    NoiseModel::new(t_len, mean, covariance, cfg.noise.family)
        .map_err(|e| ExpError::Config(e.to_string()))
}

fn mean_profile_vectors(nm: &NoiseModel) -> Vec<DVector<f64>> {
    if nm.is_zero_mean() {
        return Vec::new();
    }
    (0..nm.horizon).map(|k| nm.mean_at(k)).collect()
}

/// Offline synthesis for one cell: gain, base, variance bounds, confidence
/// sets, tightening, terminal weight and terminal set.
pub fn synthesize_cell(
    cfg: &ExperimentConfig,
    cell: &CellSpec,
    variant: Variant,
) -> Result<SynthArtifacts, ExpError> {
    let sys = build_system(cfg, cell, variant)?;
    let gain = match &cfg.gain {
        GainConfig::CenterLqr { q, r } => center_lqr_gain(&sys, &q.0, &r.0)?,
        GainConfig::Given { k } => verify_gain(&sys, &k.0)?,
        GainConfig::Synthesize => model::synthesize_gain(&sys)?,
    };
    let acls = sys.a_cl_vertices(&gain.k)?;
    let base = match &cfg.tube {
        TubeConfig::Contractive { lambda, seed } => {
            let seed = match seed {
                SeedShape::Simplex => Polytope::regular_simplex(sys.state_dim()),
                SeedShape::Box => Polytope::unit_box(sys.state_dim()),
            };
            contractive_base(&acls, *lambda, &seed)?
        }
        TubeConfig::Explicit { h } => {
            let b = Polytope::new(
                h.0.clone(),
                DVector::from_element(h.0.nrows(), 1.0),
            );
            let lam = tube::base_contraction_factor(&acls, &b)?;
            if lam >= 1.0 {
                return Err(ExpError::Config(format!(
                    "explicit tube base is not contractive (lambda = {lam:.3})"
                )));
            }
            b
        }
    };

    let nm = build_noise_model(cfg)?;
    let mut opts = RprsOpts::default();
    let table_len = if cfg.rprs.table_len > 0 {
        cfg.rprs.table_len
    } else {
        cfg.task_len
    };
    let bounds = match &nm.covariance {
        NoiseCovariance::Iid(sigma) => {
            if cfg.rprs.table_len == 0 {
                opts.converge_tol = Some(1e-9);
            }
            iid_variance_bounds_with(&sys, &gain, sigma, table_len, &opts)?
        }
        NoiseCovariance::Full(full) => {
            correlated_variance_bounds_with(&sys, &gain, full, table_len.min(nm.horizon), &opts)?
        }
    };
    let log_dets = bounds
        .bounds
        .iter()
        .map(|m| linalg::log_det_spd(&m.0).unwrap_or(f64::NEG_INFINITY))
        .collect();

    let shape = match &cfg.rprs.shape {
        ShapeConfig::Ellipsoid => RprsShape::Ellipsoid,
        ShapeConfig::HalfSpaces => RprsShape::HalfSpaces,
        ShapeConfig::ConstraintPolytope { budgets } => RprsShape::Polytope {
            normals: (0..sys.x_set.num_facets())
                .map(|r| sys.x_set.row(r).iter().copied().collect())
                .collect(),
            budgets: budgets.clone(),
        },
    };
    let mut rprs_seq = build_rprs(&bounds, shape, cell.p_x, cfg.p_u_for(cell.p_x), nm.family)?;
    let tightening = tighten(&sys.x_set, &sys.u_set, &rprs_seq)?;
    let state_empty = tightening.any_state_empty();
    let input_empty = tightening.any_input_empty();

    let p_term = terminal_weight(&sys, &gain, &cfg.cost.q.0, &cfg.cost.r.0)?;

    let mean_profile = mean_profile_vectors(&nm);
    let drift = mpc::drift_support(&base, &mean_profile);
    let z_inf = Polytope::new(sys.x_set.h().clone(), sys.x_set.offsets() - tightening.f_worst());
    let v_inf = Polytope::new(sys.u_set.h().clone(), sys.u_set.offsets() - tightening.g_worst());
    if state_empty || input_empty {
        return Err(ExpError::Infeasible(
            "tightened stage constraints are empty for this cell".into(),
        ));
    }
    let terminal = terminal_set(&sys, &gain, &base, &z_inf, &v_inf, &drift)?;

    let mut rprs_with_tightening = rprs_seq.clone();
    rprs_with_tightening.tightening = Some(tightening);
    rprs_seq = rprs_with_tightening;

    Ok(SynthArtifacts {
        version: SYNTH_VERSION,
        hash: cfg.synth_hash(cell, variant),
        k_gain: MatrixData(gain.k),
        p_lyap: MatrixData(gain.p_lyap),
        p_term: MatrixData(p_term),
        base_h: MatrixData(base.h().clone()),
        bounds,
        rprs: rprs_seq,
        terminal,
        log_dets,
        state_tightening_empty: state_empty,
        input_tightening_empty: input_empty,
    })
}

/// Cached synthesis: load by hash or synthesize and store.
pub fn synthesize_cell_cached(
    cfg: &ExperimentConfig,
    cell: &CellSpec,
    variant: Variant,
    cache_dir: Option<&Path>,
    no_cache: bool,
) -> Result<(SynthArtifacts, bool), ExpError> {
    let hash = cfg.synth_hash(cell, variant);
    if let (Some(dir), false) = (cache_dir, no_cache) {
        let path = dir.join(format!("synth-{hash}.json"));
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            if let Ok(art) = serde_json::from_str::<SynthArtifacts>(&text) {
                if art.version == SYNTH_VERSION && art.hash == hash {
                    return Ok((art, true));
                }
            }
        }
    }
    let art = synthesize_cell(cfg, cell, variant)?;
    if let Some(dir) = cache_dir {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("synth-{hash}.json"));
        let mut f = std::fs::File::create(path)?;
        f.write_all(serde_json::to_string(&art)?.as_bytes())?;
    }
    Ok((art, false))
}

/// Assemble the runtime context (controller config and noise model) from
/// cached artifacts.
pub fn build_context(
    cfg: &ExperimentConfig,
    cell: &CellSpec,
    variant: Variant,
    artifacts: SynthArtifacts,
) -> Result<CellContext, ExpError> {
    let sys = build_system(cfg, cell, variant)?;
    let gain = FeedbackGain {
        k: artifacts.k_gain.0.clone(),
        p_lyap: artifacts.p_lyap.0.clone(),
    };
    let nm = build_noise_model(cfg)?;
    let mean_profile = mean_profile_vectors(&nm);
    let base = Polytope::new(
        artifacts.base_h.0.clone(),
        DVector::from_element(artifacts.base_h.0.nrows(), 1.0),
    );
    let tightening = artifacts
        .rprs
        .tightening
        .clone()
        .ok_or_else(|| ExpError::Config("artifacts missing tightening tables".into()))?;
    let mpc_cfg = MpcConfig {
        horizon: cfg.horizon,
        q_cost: cfg.cost.q.0.clone(),
        r_cost: cfg.cost.r.0.clone(),
        p_term: artifacts.p_term.0.clone(),
        tightening,
        terminal: artifacts.terminal.clone(),
        base,
        mean_profile: mean_profile.clone(),
        project_estimate: true,
        alpha_tiebreak: 1e-6,
        solver: SolverOpts {
            max_iter: 100,
            tol_feas: 1e-8,
            tol_gap_abs: 1e-8,
            tol_gap_rel: 1e-8,
            verbose: false,
        },
    };
    Ok(CellContext {
        theta_bar: constant_estimate(cfg, cell),
        sys,
        gain,
        noise_model: nm,
        mean_profile,
        mpc_cfg,
        artifacts,
    })
}

// ---------------------------------------------------------------------------
// Online runs
// ---------------------------------------------------------------------------

fn theta_true_for(
    cfg: &ExperimentConfig,
    cell: &CellSpec,
    seed: u64,
    theta_set: &Polytope,
) -> Result<DVector<f64>, ExpError> {
    use rand::prelude::*;
    Ok(match &cfg.theta_true {
        ThetaTrueConfig::Fixed { value } => DVector::from_column_slice(value),
        ThetaTrueConfig::Scaled { value } => DVector::from_column_slice(value) * cell.alpha,
        ThetaTrueConfig::Uniform => {
            // rejection sampling inside the bounding box of the scaled set
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x7473_7572_745f_7468);
            let p = theta_set.dim();
            let mut lo = DVector::zeros(p);
            let mut hi = DVector::zeros(p);
            for i in 0..p {
                let mut d = DVector::zeros(p);
                d[i] = 1.0;
                hi[i] = theta_set.support(&d)?;
                d[i] = -1.0;
                lo[i] = -theta_set.support(&d)?;
            }
            loop {
                let cand = DVector::from_fn(p, |i, _| rng.gen_range(lo[i]..=hi[i]));
                if theta_set.contains(&cand, 0.0) {
                    break cand;
                }
            }
        }
    })
}

fn estimator_for(cfg: &ExperimentConfig, cell: &CellSpec) -> EstimatorHook {
    match &cfg.estimator {
        EstimatorConfig::Constant { .. } => EstimatorHook::Constant(constant_estimate(cfg, cell)),
        EstimatorConfig::Rls { prior_cov, .. } => EstimatorHook::ProjectedRls(RlsEstimator::new(
            constant_estimate(cfg, cell),
            *prior_cov,
        )),
    }
}

/// Run one seeded closed loop in a cell.
pub fn run_cell_once(
    cfg: &ExperimentConfig,
    ctx: &CellContext,
    cell: &CellSpec,
    seed: u64,
    check_candidates: bool,
) -> Result<ClosedLoopTrace, ExpError> {
    let mut controller = MpcProblem::new(&ctx.sys, &ctx.gain, ctx.mpc_cfg.clone())?;
    let theta_true = theta_true_for(cfg, cell, seed, &ctx.sys.theta_set)?;
    let mut estimator = estimator_for(cfg, cell);
    let noise = sim::sample_noise(&ctx.noise_model, seed)?;
    let n = ctx.sys.state_dim();
    let opts = RunOptions {
        check_candidates,
        x0: if cfg.x0.is_empty() {
            DVector::zeros(n)
        } else {
            DVector::from_column_slice(&cfg.x0)
        },
    };
    Ok(sim::run_closed_loop(
        &mut controller,
        &theta_true,
        &mut estimator,
        &noise,
        cfg.task_len,
        seed,
        &opts,
    )?)
}

/// Run every seed of a cell in parallel, in deterministic seed order.
pub fn run_cell(
    cfg: &ExperimentConfig,
    ctx: &CellContext,
    cell: &CellSpec,
    check_candidates: bool,
) -> Result<Vec<ClosedLoopTrace>, ExpError> {
    let seeds = cfg.seeds.run_seeds();
    let results: Result<Vec<ClosedLoopTrace>, ExpError> = seeds
        .par_iter()
        .map(|&seed| run_cell_once(cfg, ctx, cell, seed, check_candidates))
        .collect();
    results
}

// ---------------------------------------------------------------------------
// Aggregates and file outputs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    pub alpha: f64,
    pub p_x: f64,
    pub variant: Variant,
    pub n_c: f64,
    pub per_step_min_rows: Vec<f64>,
    pub excluded_runs: usize,
    pub mean_cost: f64,
    pub runs: usize,
    pub hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub name: String,
    pub cells: Vec<CellSummary>,
    /// Percent cost increase of the robust scheme against the baseline,
    /// per cell, when the baseline is enabled.
    pub cost_increase: Vec<CostIncreaseCell>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostIncreaseCell {
    pub alpha: f64,
    pub p_x: f64,
    pub mean_percent: f64,
    pub two_std_percent: f64,
}

pub fn summarize_cell(
    cfg: &ExperimentConfig,
    cell: &CellSpec,
    variant: Variant,
    traces: &[ClosedLoopTrace],
    hash: &str,
) -> CellSummary {
    let report = empirical_satisfaction(traces, &cfg.metric_rows);
    let completed: Vec<&ClosedLoopTrace> = traces.iter().filter(|t| t.completed()).collect();
    let mean_cost = completed.iter().map(|t| t.total_cost()).sum::<f64>()
        / completed.len().max(1) as f64;
    CellSummary {
        alpha: cell.alpha,
        p_x: cell.p_x,
        variant,
        n_c: report.minimum,
        per_step_min_rows: report.per_step,
        excluded_runs: report.excluded_runs,
        mean_cost,
        runs: traces.len(),
        hash: hash.to_string(),
    }
}

/// Trace CSV: one row per step with the documented columns.
pub fn write_trace_csv(path: &Path, trace: &ClosedLoopTrace) -> Result<(), ExpError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| ExpError::Io(e.into()))?;
    let n = trace.x_true.first().map_or(0, |x| x.len());
    let m = trace.u_true.first().map_or(0, |u| u.len());
    let nf = trace.state_flags.first().map_or(0, |f| f.len());
    let mut header = vec!["k".to_string()];
    header.extend((0..n).map(|i| format!("x{}", i + 1)));
    header.extend((0..m).map(|i| format!("u{}", i + 1)));
    header.extend((0..m).map(|i| format!("v{}", i + 1)));
    header.extend((0..n).map(|i| format!("s{}", i + 1)));
    header.push("alpha".into());
    header.push("status".into());
    header.extend((0..nf).map(|i| format!("flag_x{}", i + 1)));
    w.write_record(&header).map_err(|e| ExpError::Config(e.to_string()))?;
    for k in 0..trace.x_true.len() {
        let mut rec = vec![k.to_string()];
        rec.extend(trace.x_true[k].iter().map(|v| v.to_string()));
        for vecs in [&trace.u_true, &trace.v0] {
            if k < vecs.len() {
                rec.extend(vecs[k].iter().map(|v| v.to_string()));
            } else {
                rec.extend((0..m).map(|_| String::new()));
            }
        }
        if k < trace.s0.len() {
            rec.extend(trace.s0[k].iter().map(|v| v.to_string()));
            rec.push(trace.alpha0[k].to_string());
        } else {
            rec.extend((0..n).map(|_| String::new()));
            rec.push(String::new());
        }
        rec.push(
            trace
                .status
                .get(k)
                .map(|s| format!("{s:?}"))
                .unwrap_or_default(),
        );
        rec.extend(trace.state_flags[k].iter().map(|b| (*b as u8).to_string()));
        w.write_record(&rec).map_err(|e| ExpError::Config(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct RunSummary<'a> {
    pub name: &'a str,
    pub hash: &'a str,
    pub seed: u64,
    pub completed: bool,
    pub halted_at: Option<usize>,
    pub total_cost: f64,
    pub min_joint_satisfaction: f64,
    pub log_dets: &'a [f64],
}

/// Run one seed of the robust controller in the first sweep cell and write
/// the CSV trace plus a JSON summary. Returns the file paths.
pub fn cmd_run(
    cfg: &ExperimentConfig,
    seed: u64,
    out_dir: &Path,
    cache_dir: Option<&Path>,
    no_cache: bool,
) -> Result<(PathBuf, PathBuf), ExpError> {
    let cell = CellSpec {
        alpha: cfg.sweep.alphas[0],
        p_x: cfg.sweep.p_levels[0],
    };
    let (art, _hit) = synthesize_cell_cached(cfg, &cell, Variant::Robust, cache_dir, no_cache)?;
    let hash = art.hash.clone();
    let ctx = build_context(cfg, &cell, Variant::Robust, art)?;
    let trace = run_cell_once(cfg, &ctx, &cell, seed, false)?;
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join(format!("{}-{hash}-seed{seed}.csv", cfg.name));
    write_trace_csv(&csv_path, &trace)?;
    let report = empirical_satisfaction(std::slice::from_ref(&trace), &cfg.metric_rows);
    let summary = RunSummary {
        name: &cfg.name,
        hash: &hash,
        seed,
        completed: trace.completed(),
        halted_at: trace.halted_at,
        total_cost: trace.total_cost(),
        min_joint_satisfaction: report.minimum,
        log_dets: &ctx.artifacts.log_dets,
    };
    let json_path = out_dir.join(format!("{}-{hash}-seed{seed}.json", cfg.name));
    std::fs::write(&json_path, serde_json::to_string_pretty(&summary)?)?;
    if !trace.completed() {
        return Err(ExpError::Infeasible(format!(
            "run halted at step {}",
            trace.halted_at.unwrap()
        )));
    }
    Ok((csv_path, json_path))
}

/// Full sweep over the config grids; one summary table (CSV + JSON).
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    cache_dir: Option<&Path>,
    no_cache: bool,
) -> Result<SweepSummary, ExpError> {
    let mut cells = Vec::new();
    let mut cost_increase = Vec::new();
    for &alpha in &cfg.sweep.alphas {
        for &p_x in &cfg.sweep.p_levels {
            let cell = CellSpec { alpha, p_x };
            let (art, _) =
                synthesize_cell_cached(cfg, &cell, Variant::Robust, cache_dir, no_cache)?;
            let hash = art.hash.clone();
            let ctx = build_context(cfg, &cell, Variant::Robust, art)?;
            let traces = run_cell(cfg, &ctx, &cell, false)?;
            cells.push(summarize_cell(cfg, &cell, Variant::Robust, &traces, &hash));
            if cfg.with_baseline {
                let (bart, _) = synthesize_cell_cached(
                    cfg,
                    &cell,
                    Variant::NominalBaseline,
                    cache_dir,
                    no_cache,
                )?;
                let bhash = bart.hash.clone();
                let bctx = build_context(cfg, &cell, Variant::NominalBaseline, bart)?;
                let btraces = run_cell(cfg, &bctx, &cell, false)?;
                cells.push(summarize_cell(
                    cfg,
                    &cell,
                    Variant::NominalBaseline,
                    &btraces,
                    &bhash,
                ));
                if let Ok(stats) = sim::cost_increase_stats(&traces, &btraces) {
                    cost_increase.push(CostIncreaseCell {
                        alpha,
                        p_x,
                        mean_percent: stats.mean_percent,
                        two_std_percent: stats.two_std_percent,
                    });
                }
            }
        }
    }
    let summary = SweepSummary {
        name: cfg.name.clone(),
        cells,
        cost_increase,
    };
    std::fs::create_dir_all(out_dir)?;
    let base_hash = cfg.synth_hash(
        &CellSpec {
            alpha: cfg.sweep.alphas[0],
            p_x: cfg.sweep.p_levels[0],
        },
        Variant::Robust,
    );
    std::fs::write(
        out_dir.join(format!("sweep-{}-{base_hash}.json", cfg.name)),
        serde_json::to_string_pretty(&summary)?,
    )?;
    let mut w = csv::Writer::from_path(out_dir.join(format!("sweep-{}-{base_hash}.csv", cfg.name)))
        .map_err(|e| ExpError::Io(e.into()))?;
    w.write_record(["alpha", "p_x", "variant", "n_c", "excluded", "mean_cost", "runs"])
        .map_err(|e| ExpError::Config(e.to_string()))?;
    for c in &summary.cells {
        w.write_record(&[
            c.alpha.to_string(),
            c.p_x.to_string(),
            format!("{:?}", c.variant),
            c.n_c.to_string(),
            c.excluded_runs.to_string(),
            c.mean_cost.to_string(),
            c.runs.to_string(),
        ])
        .map_err(|e| ExpError::Config(e.to_string()))?;
    }
    w.flush()?;
    Ok(summary)
}

/// Offline synthesis for the whole grid (both variants when the baseline is
/// enabled); returns per-cell hashes and cache hits.
pub fn cmd_synth(
    cfg: &ExperimentConfig,
    cache_dir: Option<&Path>,
    no_cache: bool,
) -> Result<Vec<(CellSpec, Variant, String, bool)>, ExpError> {
    let mut out = Vec::new();
    for &alpha in &cfg.sweep.alphas {
        for &p_x in &cfg.sweep.p_levels {
            let cell = CellSpec { alpha, p_x };
            let mut variants = vec![Variant::Robust];
            if cfg.with_baseline {
                variants.push(Variant::NominalBaseline);
            }
            for variant in variants {
                let (art, hit) =
                    synthesize_cell_cached(cfg, &cell, variant, cache_dir, no_cache)?;
                log::info!(
                    "cell alpha={alpha} p_x={p_x} {variant:?}: log det V = {:?}",
                    art.log_dets
                        .iter()
                        .map(|v| (v * 1e4).round() / 1e4)
                        .collect::<Vec<_>>()
                );
                out.push((cell, variant, art.hash.clone(), hit));
            }
        }
    }
    Ok(out)
}

/// Empirical satisfaction of every metric row plus the spec-level invariant
/// checks that `cmd check` runs; see the CLI.
pub fn check_report(
    cfg: &ExperimentConfig,
    cache_dir: Option<&Path>,
) -> Result<Vec<(String, bool, String)>, ExpError> {
    let mut results = Vec::new();
    let cell = CellSpec {
        alpha: cfg.sweep.alphas[0],
        p_x: cfg.sweep.p_levels[0],
    };
    let (art, _) = synthesize_cell_cached(cfg, &cell, Variant::Robust, cache_dir, false)?;
    let ctx = build_context(cfg, &cell, Variant::Robust, art)?;

    // Loewner dominance of the bounds at every vertex and step
    let acl_verts = ctx.sys.a_cl_vertices(&ctx.gain.k).map_err(ExpError::from)?;
    let full_cov = ctx.noise_model.full_covariance();
    let mut worst: f64 = 0.0;
    for acl in &acl_verts {
        for k in 1..=ctx.artifacts.bounds.len().min(20) {
            let exact = rprs::exact_marginal_variance(acl, &full_cov, k);
            let gap = ctx.artifacts.bounds.state_bound(k) - exact;
            worst = worst.max(-linalg::min_eig_sym(&gap));
        }
    }
    results.push((
        "loewner-dominance".into(),
        worst <= 1e-7,
        format!("worst vertex residual {worst:.3e}"),
    ));

    // terminal invariance
    let base = Polytope::new(
        ctx.artifacts.base_h.0.clone(),
        DVector::from_element(ctx.artifacts.base_h.0.nrows(), 1.0),
    );
    let drift = mpc::drift_support(&base, &ctx.mean_profile);
    let report = tube::terminal_invariance_check(
        &ctx.artifacts.terminal,
        &ctx.sys,
        &ctx.gain,
        &base,
        &drift,
    )?;
    results.push((
        "terminal-invariance".into(),
        report.passed,
        format!(
            "membership {:.3e}, containment {:.3e} over {} vertices",
            report.worst_membership_residual,
            report.worst_containment_residual,
            report.vertices_checked
        ),
    ));

    // error-tube coverage at the parameter vertices (gaussian family only)
    if ctx.noise_model.family == NoiseFamily::Gaussian {
        let thetas = ctx.sys.theta_vertices().map_err(ExpError::from)?;
        let mut worst_gap: f64 = f64::INFINITY;
        for th in &thetas {
            let cov = sim::error_coverage(
                &ctx.sys,
                &ctx.gain,
                &ctx.noise_model,
                &ctx.artifacts.rprs,
                th,
                20,
                2000,
                cfg.seeds.master_seed,
            )?;
            for c in cov {
                worst_gap = worst_gap.min(c - cell.p_x);
            }
        }
        let margin = 1.5 * (cell.p_x * (1.0 - cell.p_x) / 2000.0).sqrt();
        results.push((
            "rprs-coverage".into(),
            worst_gap >= -margin,
            format!("worst coverage gap {worst_gap:.4} (allowed -{margin:.4})"),
        ));
    }
    Ok(results)
}

/// Convenience summary of a satisfaction report for logs.
pub fn format_satisfaction(rep: &SatisfactionReport) -> String {
    format!(
        "min {:.1}% over {} steps ({} runs excluded)",
        rep.minimum,
        rep.per_step.len(),
        rep.excluded_runs
    )
}
