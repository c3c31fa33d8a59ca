//! Scenario files, the staged end-to-end pipeline, its report, batch runs
//! over perturbation seeds and the per-stage artifacts on disk.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use nalgebra::{Complex, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::control::{
    centralized_gain, check_controllability, check_observability, closed_loop_weight,
    compare_performance, cost_matrix, decay_margin, distributed_gains, evaluate_cost,
    exp_bound_factor, performance_bound, CentralizedGain, DistributedGains, LqrWeights,
    BOUND_SLACK,
};
use crate::dynamics::{
    build_linearized, isolated_block, simulate, trace_deviations, Feedback, FeedbackMode,
    IntegrateOptions, Model, ReferenceOutput, SimulateOptions, SystemMatrices, Trace,
};
use crate::error::{GridError, Result};
use crate::exec::Exec;
use crate::linalg::spectrum;
use crate::network::{
    build_multilevel, validate_static, MultilevelConfig, NetworkGraph, ValidationReport,
};
use crate::stability::{
    build_hessian_blocks, check_certificate, sample_ball, CertificateOptions, LipschitzOptions,
    StabilityCertificate, Verdict,
};
use crate::steady_state::{
    solve_synchronous_state, steady_residual, DeviationVector, NewtonOptions, StateLayout,
    SynchronousState,
};

/// Pipeline stages in execution order.
pub const STAGES: [&str; 8] = [
    "build",
    "validate",
    "steady_state",
    "certificate",
    "matrices",
    "gains",
    "simulate",
    "costs",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    #[serde(alias = "open-loop")]
    Open,
    #[default]
    Distributed,
    #[serde(alias = "centralized")]
    Central,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Open => "open",
            ControllerKind::Distributed => "distributed",
            ControllerKind::Central => "central",
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerKind {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open" | "open-loop" => Ok(ControllerKind::Open),
            "distributed" => Ok(ControllerKind::Distributed),
            "central" | "centralized" => Ok(ControllerKind::Central),
            other => Err(GridError::Config(format!("unknown controller {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSource {
    /// explicit graph file; takes precedence over `multilevel`
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph: Option<PathBuf>,
    pub multilevel: MultilevelConfig,
}

/// Offset of one node from the synchronous state.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeOffset {
    pub node: usize,
    pub theta: f64,
    pub omega: f64,
    pub v: f64,
}

/// Initial deviation: explicit per-node offsets when `nodes` is non-empty,
/// otherwise a uniform draw from the ball of `radius`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Perturbation {
    pub radius: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub nodes: Vec<NodeOffset>,
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation {
            radius: 1e-3,
            seed: 0,
            nodes: Vec::new(),
        }
    }
}

impl Perturbation {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            return Err(GridError::Config(format!(
                "perturbation radius {} must be >= 0",
                self.radius
            )));
        }
        Ok(())
    }

    /// Deviation for seed `seed` (ignored for explicit offsets).
    pub fn deviation(&self, graph: &NetworkGraph, seed: u64) -> Result<DeviationVector> {
        let layout = StateLayout::of(graph);
        if self.nodes.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            return DeviationVector::from_values(
                layout,
                sample_ball(&mut rng, layout.dim(), self.radius),
            );
        }
        let mut values = vec![0.0; layout.dim()];
        for off in &self.nodes {
            if off.node >= graph.n() {
                return Err(GridError::Config(format!(
                    "perturbed node {} out of range",
                    off.node
                )));
            }
            match layout.theta(off.node) {
                Some(k) => values[k] += off.theta,
                None if off.theta != 0.0 => {
                    return Err(GridError::Config(format!(
                        "node {} is the angle reference",
                        off.node
                    )));
                }
                None => {}
            }
            values[layout.omega(off.node)] += off.omega;
            values[layout.v(off.node)] += off.v;
        }
        DeviationVector::from_values(layout, values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub t_end: f64,
    pub controller: ControllerKind,
    pub mode: FeedbackMode,
    pub model: Model,
    /// trace thinning; the variance metrics average over the kept samples
    pub record_every: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        let i = IntegrateOptions::default();
        SimConfig {
            dt: i.dt,
            t_end: i.t_end,
            controller: ControllerKind::default(),
            mode: i.mode,
            model: Model::default(),
            record_every: 10,
        }
    }
}

impl SimConfig {
    pub fn options(&self, record_every: usize) -> SimulateOptions {
        SimulateOptions {
            integrate: IntegrateOptions {
                dt: self.dt,
                t_end: self.t_end,
                mode: self.mode,
                record_every,
            },
            model: self.model,
            with_lyapunov: self.controller == ControllerKind::Open && self.model == Model::Free,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertificateConfig {
    pub region: bool,
    pub lipschitz_samples: usize,
    pub lipschitz_seed: u64,
    pub safety: f64,
    pub r_fraction: f64,
}

impl Default for CertificateConfig {
    fn default() -> Self {
        let c = CertificateOptions::default();
        CertificateConfig {
            region: c.region,
            lipschitz_samples: c.lipschitz.n_samples,
            lipschitz_seed: c.lipschitz.seed,
            safety: c.lipschitz.safety,
            r_fraction: c.r_fraction,
        }
    }
}

impl CertificateConfig {
    pub fn options(&self, exec: Exec) -> CertificateOptions {
        CertificateOptions {
            lipschitz: LipschitzOptions {
                n_samples: self.lipschitz_samples,
                seed: self.lipschitz_seed,
                safety: self.safety,
                exec,
            },
            r_fraction: self.r_fraction,
            region: self.region,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    pub seeds: usize,
    /// worker threads for the seed loop (0 = all cores)
    pub workers: usize,
    /// write `seed_<k>/trace.csv` for every seed
    pub write_traces: bool,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            seeds: 10,
            workers: 0,
            write_traces: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Outputs {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub write_trace: bool,
}

impl Default for Outputs {
    fn default() -> Self {
        Outputs {
            dir: None,
            write_trace: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub network: NetworkSource,
    pub weights: LqrWeights,
    pub perturbation: Perturbation,
    pub sim: SimConfig,
    pub certificate: CertificateConfig,
    pub batch: BatchConfig,
    pub outputs: Outputs,
}

impl Scenario {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| GridError::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Read a scenario file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| GridError::Config(format!("{}: {e}", path.display())))?;
        let mut s = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(g) = &s.network.graph {
            if g.is_relative() {
                s.network.graph = Some(base.join(g));
            }
        }
        if let Some(d) = &s.outputs.dir {
            if d.is_relative() {
                s.outputs.dir = Some(base.join(d));
            }
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.network.graph.is_none() {
            self.network.multilevel.validate()?;
        }
        self.weights.validate()?;
        self.perturbation.validate()?;
        if !(self.sim.dt > 0.0 && self.sim.t_end > 0.0) {
            return Err(GridError::Config(format!(
                "need dt > 0 and T > 0 (dt {}, T {})",
                self.sim.dt, self.sim.t_end
            )));
        }
        self.sim
            .options(self.sim.record_every)
            .integrate
            .validate()?;
        Ok(())
    }
}

/// Row-major dense matrix as stored in artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRows {
    pub rows: Vec<Vec<f64>>,
}

impl MatrixRows {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        MatrixRows {
            rows: m.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        let nr = self.rows.len();
        let nc = self.rows.first().map_or(0, |r| r.len());
        if let Some(bad) = self.rows.iter().find(|r| r.len() != nc) {
            return Err(GridError::Dimension {
                expected: nc,
                actual: bad.len(),
            });
        }
        Ok(DMatrix::from_fn(nr, nc, |i, j| self.rows[i][j]))
    }
}

fn pairs(eigs: &[Complex<f64>]) -> Vec<[f64; 2]> {
    eigs.iter().map(|z| [z.re, z.im]).collect()
}

/// Both gains of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSet {
    pub distributed: DistributedGains,
    pub central: CentralizedGain,
}

impl GainSet {
    pub fn feedback(&self, kind: ControllerKind) -> Feedback {
        match kind {
            ControllerKind::Open => Feedback::Open,
            ControllerKind::Distributed => self.distributed.feedback(),
            ControllerKind::Central => Feedback::Dense(self.central.f.clone()),
        }
    }
}

/// Serialized gains: per-node distributed blocks and the dense central gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainsArtifact {
    pub distributed: Vec<MatrixRows>,
    pub central: MatrixRows,
}

impl GainsArtifact {
    pub fn from_gains(g: &GainSet) -> Self {
        GainsArtifact {
            distributed: g
                .distributed
                .blocks
                .iter()
                .map(MatrixRows::from_matrix)
                .collect(),
            central: MatrixRows::from_matrix(&g.central.f),
        }
    }

    pub fn feedback(&self, kind: ControllerKind, layout: StateLayout) -> Result<Feedback> {
        match kind {
            ControllerKind::Open => Ok(Feedback::Open),
            ControllerKind::Distributed => {
                if self.distributed.len() != layout.n {
                    return Err(GridError::Dimension {
                        expected: layout.n,
                        actual: self.distributed.len(),
                    });
                }
                let blocks = self
                    .distributed
                    .iter()
                    .map(MatrixRows::to_matrix)
                    .collect::<Result<Vec<_>>>()?;
                Ok(Feedback::BlockDiagonal { layout, blocks })
            }
            ControllerKind::Central => {
                let f = self.central.to_matrix()?;
                if f.shape() != (2 * layout.n, layout.dim()) {
                    return Err(GridError::Dimension {
                        expected: layout.dim(),
                        actual: f.ncols(),
                    });
                }
                Ok(Feedback::Dense(f))
            }
        }
    }
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).map_err(|e| GridError::Io(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| GridError::Parse(format!("{}: {e}", path.display())))
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, toml::to_string(value)?)?;
    Ok(())
}

/// Output directory holding the per-stage files.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Artifacts { dir: dir.into() }
    }

    pub fn graph_path(&self) -> PathBuf {
        self.dir.join("graph.toml")
    }

    pub fn steady_path(&self) -> PathBuf {
        self.dir.join("steady.toml")
    }

    pub fn certificate_path(&self) -> PathBuf {
        self.dir.join("certificate.toml")
    }

    pub fn gains_path(&self) -> PathBuf {
        self.dir.join("gains.toml")
    }

    pub fn compare_path(&self) -> PathBuf {
        self.dir.join("compare.toml")
    }

    pub fn report_path(&self) -> PathBuf {
        self.dir.join("report.toml")
    }

    pub fn batch_path(&self) -> PathBuf {
        self.dir.join("batch.toml")
    }

    pub fn trace_path(&self, kind: ControllerKind) -> PathBuf {
        self.dir.join(format!("trace_{kind}.csv"))
    }

    pub fn write<T: Serialize>(&self, path: &Path, value: &T) -> Result<()> {
        write_toml(path, value)
    }

    pub fn write_trace(&self, path: &Path, trace: &Trace) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        trace.write_csv(fs::File::create(path)?)
    }

    pub fn load_steady(&self) -> Result<Option<SynchronousState>> {
        let p = self.steady_path();
        if p.exists() {
            read_toml(&p).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn load_gains(&self) -> Result<Option<GainsArtifact>> {
        let p = self.gains_path();
        if p.exists() {
            read_toml(&p).map(Some)
        } else {
            Ok(None)
        }
    }
}

/// Graph from the explicit path, else `graph.toml` in the artifacts, else
/// built from the multilevel settings.
pub fn scenario_graph(scenario: &Scenario, artifacts: Option<&Artifacts>) -> Result<NetworkGraph> {
    scenario.validate()?;
    if let Some(p) = &scenario.network.graph {
        return NetworkGraph::load(p);
    }
    if let Some(a) = artifacts {
        let p = a.graph_path();
        if p.exists() {
            info!("using graph from {}", p.display());
            return NetworkGraph::load(p);
        }
    }
    build_multilevel(&scenario.network.multilevel)
}

/// Synchronous state from the artifacts when it matches `graph`, else solved.
pub fn scenario_steady(
    graph: &NetworkGraph,
    artifacts: Option<&Artifacts>,
) -> Result<SynchronousState> {
    if let Some(s) = artifacts.map(Artifacts::load_steady).transpose()?.flatten() {
        if s.n() == graph.n() {
            let res = steady_residual(graph, &s.theta_star, &s.v_star);
            if res.iter().all(|r| r.abs() < 1e-8) {
                info!(
                    "using synchronous state from {}",
                    artifacts.unwrap().steady_path().display()
                );
                return Ok(s);
            }
        }
        warn!("stored synchronous state does not match the graph; solving again");
    }
    solve_synchronous_state(graph, None, &NewtonOptions::default())
}

/// Distributed gains, then the central CARE seeded with them.
pub fn scenario_gains(
    sys: &SystemMatrices,
    graph: &NetworkGraph,
    weights: &LqrWeights,
    exec: Exec,
) -> Result<GainSet> {
    let distributed = distributed_gains(graph, weights, exec)?;
    let seed = distributed.dense();
    let central = centralized_gain(sys.a_tilde()?, sys, weights, Some(&seed))?;
    Ok(GainSet {
        distributed,
        central,
    })
}

/// Time-averaged sample variance across nodes of `ω` and of `ṽ`.
pub fn trace_variances(
    graph: &NetworkGraph,
    x_star: &SynchronousState,
    trace: &Trace,
) -> Result<(f64, f64)> {
    let n = graph.n();
    if n < 2 || trace.is_empty() {
        return Err(GridError::Range(
            "variance needs at least two nodes and one sample".into(),
        ));
    }
    let var = |xs: &[f64]| {
        let mean = xs.iter().sum::<f64>() / n as f64;
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
    };
    let (mut fw, mut fv) = (0.0, 0.0);
    for s in &trace.states {
        let omega: Vec<f64> = (0..n).map(|i| s[3 * i + 1]).collect();
        let dv: Vec<f64> = (0..n).map(|i| s[3 * i + 2] - x_star.v_star[i]).collect();
        fw += var(&omega);
        fv += var(&dv);
    }
    let k = trace.len() as f64;
    Ok((fw / k, fv / k))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    pub kind: String,
    pub message: String,
    pub exit_code: i32,
}

impl StageError {
    pub fn new(stage: &str, e: &GridError) -> Self {
        StageError {
            stage: stage.into(),
            kind: e.kind().into(),
            message: e.to_string(),
            exit_code: e.exit_code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadySummary {
    pub residual_norm: f64,
    pub iterations: usize,
    pub max_angle_difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureSummary {
    pub reference_output: ReferenceOutput,
    pub controllable: Verdict,
    pub observable: Verdict,
    /// `(node, re, im)` of every rank drop
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub uncontrollable_modes: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unobservable_modes: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSummary {
    pub beta_d: f64,
    pub beta_c: f64,
    pub central_iterations: usize,
    pub central_residual: f64,
    pub max_block_residual: f64,
    /// per-node `F_{d,i}` rows
    pub distributed_blocks: Vec<MatrixRows>,
    /// `(re, im)` of `Ã + B F_d`
    pub spectrum_distributed: Vec<[f64; 2]>,
    pub spectrum_central: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    /// `J_d` on the coupled system under the block-diagonal gain
    pub j_d_coupled: f64,
    pub j_d_isolated_sum: f64,
    pub j_c: f64,
    pub gap: f64,
    pub bound: f64,
    pub holds: Verdict,
    /// `max_t ‖exp(A_cl t)‖² e^{βt}`, which is 1 for a normal closed loop
    pub transient_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub controller: ControllerKind,
    pub model: Model,
    pub dt: f64,
    pub t_end: f64,
    pub initial_norm: f64,
    pub final_norm: f64,
    pub frequency_variance: f64,
    pub voltage_variance: f64,
    pub lyapunov_nonincreasing: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub controller: ControllerKind,
    pub stages: Vec<StageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<StageError>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steady_state: Option<SteadySummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<StabilityCertificate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structure: Option<StructureSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<GainSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub costs: Option<CostSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSummary>,
}

impl Report {
    fn new(controller: ControllerKind) -> Self {
        Report {
            controller,
            stages: Vec::new(),
            error: None,
            notes: Vec::new(),
            validation: None,
            steady_state: None,
            certificate: None,
            structure: None,
            gains: None,
            costs: None,
            simulation: None,
        }
    }

    pub fn stage(&self, name: &str) -> Option<Verdict> {
        self.stages
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.verdict)
    }

    pub fn exit_code(&self) -> i32 {
        self.error.as_ref().map_or(0, |e| e.exit_code)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    fn record<T>(&mut self, name: &str, res: Result<T>) -> std::result::Result<T, ()> {
        let v = self.guard(name, res)?;
        self.mark(name, Verdict::Pass);
        Ok(v)
    }

    /// Like `record` but leaves the stage unmarked on success.
    fn guard<T>(&mut self, name: &str, res: Result<T>) -> std::result::Result<T, ()> {
        res.map_err(|e| {
            warn!("stage {name} failed: {e}");
            self.mark(name, Verdict::Fail);
            self.error = Some(StageError::new(name, &e));
        })
    }

    fn mark(&mut self, name: &str, verdict: Verdict) {
        self.stages.push(StageRecord {
            name: name.into(),
            verdict,
        });
    }

    fn fill_skipped(&mut self) {
        for name in STAGES {
            if self.stage(name).is_none() {
                self.mark(name, Verdict::Skipped);
            }
        }
        self.stages
            .sort_by_key(|s| STAGES.iter().position(|n| *n == s.name));
    }
}

struct Prepared {
    graph: NetworkGraph,
    x_star: SynchronousState,
    sys: SystemMatrices,
}

fn structure_summary(graph: &NetworkGraph, weights: &LqrWeights) -> StructureSummary {
    let blocks: Vec<_> = (0..graph.n())
        .map(|i| isolated_block(graph, i, &weights.output))
        .collect();
    let a: Vec<_> = blocks.iter().map(|b| b.0.clone()).collect();
    let b: Vec<_> = blocks.iter().map(|b| b.1.clone()).collect();
    let c: Vec<_> = blocks.iter().map(|b| b.2.clone()).collect();
    let modes = |v: Vec<crate::control::BlockVerdict>| -> Vec<[f64; 3]> {
        v.iter()
            .flat_map(|bv| {
                bv.failing
                    .iter()
                    .map(move |(re, im)| [bv.block as f64, *re, *im])
            })
            .collect()
    };
    let ctrl = check_controllability(&a, &b);
    let obs = check_observability(&a, &c);
    StructureSummary {
        reference_output: weights.output.reference_output,
        controllable: Verdict::from_bool(ctrl.iter().all(|v| v.passed)),
        observable: Verdict::from_bool(obs.iter().all(|v| v.passed)),
        uncontrollable_modes: modes(ctrl),
        unobservable_modes: modes(obs),
    }
}

/// Stages up to the linear matrices, shared by scenario and batch runs.
fn prepare(
    report: &mut Report,
    scenario: &Scenario,
    exec: Exec,
) -> std::result::Result<Prepared, ()> {
    let graph = report.record("build", scenario_graph(scenario, None))?;
    let validation = validate_static(&graph);
    report.mark("validate", Verdict::from_bool(validation.passed));
    report.validation = Some(validation);

    let x_star = report.record(
        "steady_state",
        solve_synchronous_state(&graph, None, &NewtonOptions::default()),
    )?;
    report.steady_state = Some(SteadySummary {
        residual_norm: x_star.residual_norm,
        iterations: x_star.iterations,
        max_angle_difference: x_star.max_angle_difference,
    });

    let blocks = build_hessian_blocks(&graph, &x_star);
    let cert = check_certificate(
        &blocks,
        &graph,
        &x_star,
        &scenario.certificate.options(exec),
    );
    let verdict = cert.direct;
    report.certificate = Some(cert);
    report.mark("certificate", verdict);

    let sys = report.record(
        "matrices",
        build_linearized(&graph, &x_star, &scenario.weights.output),
    )?;
    report.structure = Some(structure_summary(&graph, &scenario.weights));
    if scenario.weights.output.reference_output == ReferenceOutput::Frequency {
        report.notes.push(
            "reference node output measures frequency and voltage; the angle-style pattern leaves its \
             frequency mode unobserved"
                .into(),
        );
    }
    Ok(Prepared { graph, x_star, sys })
}

fn run_costs(
    p: &Prepared,
    weights: &LqrWeights,
    gains: &GainSet,
    x0: &DVector<f64>,
) -> Result<CostSummary> {
    let q_xx = weights.q_xx(&p.sys);
    let q_uu = weights.q_uu(p.graph.n());
    let f_d = gains.distributed.dense();
    let a_tilde = p.sys.a_tilde()?;
    let cmp = compare_performance(a_tilde, &p.sys.b, &q_xx, &q_uu, &f_d, &gains.central, x0)?;
    let a_cl = a_tilde + &p.sys.b * &f_d;
    Ok(CostSummary {
        j_d_coupled: cmp.j_d,
        j_d_isolated_sum: gains.distributed.isolated_cost(x0),
        j_c: cmp.j_c,
        gap: cmp.gap,
        bound: cmp.bound,
        holds: Verdict::from_bool(cmp.holds),
        transient_factor: exp_bound_factor(&a_cl, cmp.beta_d, 0.5, 40),
    })
}

fn gain_summary(p: &Prepared, gains: &GainSet) -> Result<GainSummary> {
    let a_tilde = p.sys.a_tilde()?;
    let spec_d = spectrum(&(a_tilde + &p.sys.b * gains.distributed.dense()));
    let spec_c = spectrum(&(a_tilde + &p.sys.b * &gains.central.f));
    let beta = |s: &[Complex<f64>]| -2.0 * s.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    Ok(GainSummary {
        beta_d: beta(&spec_d),
        beta_c: beta(&spec_c),
        central_iterations: gains.central.riccati.iterations,
        central_residual: gains.central.riccati.residual_norm,
        max_block_residual: gains
            .distributed
            .riccati
            .iter()
            .map(|r| r.residual_norm)
            .fold(0.0, f64::max),
        distributed_blocks: gains
            .distributed
            .blocks
            .iter()
            .map(MatrixRows::from_matrix)
            .collect(),
        spectrum_distributed: pairs(&spec_d),
        spectrum_central: pairs(&spec_c),
    })
}

/// Costs and bound from stored gain matrices; every cost is a Lyapunov
/// solve, including the isolated per-node costs.
pub fn costs_from_gains(
    graph: &NetworkGraph,
    sys: &SystemMatrices,
    weights: &LqrWeights,
    gains: &GainsArtifact,
    x0: &DVector<f64>,
) -> Result<CostSummary> {
    let layout = sys.layout;
    let f_d = gains
        .feedback(ControllerKind::Distributed, layout)?
        .to_dense(2 * layout.n, layout.dim());
    let f_c = gains.central.to_matrix()?;
    let q_xx = weights.q_xx(sys);
    let q_uu = weights.q_uu(layout.n);
    let a_tilde = sys.a_tilde()?;
    let a_d = a_tilde + &sys.b * &f_d;
    let beta_d = decay_margin(&a_d);
    let j_d = evaluate_cost(&a_d, &closed_loop_weight(&q_xx, &q_uu, &f_d), x0)?;
    let j_c = evaluate_cost(
        &(a_tilde + &sys.b * &f_c),
        &closed_loop_weight(&q_xx, &q_uu, &f_c),
        x0,
    )?;
    let bound = performance_bound(&f_d, &f_c, &q_uu, beta_d, x0)?;
    let r = weights.q_uu_block();
    let mut isolated = 0.0;
    for i in 0..layout.n {
        let (a, b, c) = isolated_block(graph, i, &weights.output);
        let fi = gains.distributed[i].to_matrix()?;
        let p = cost_matrix(
            &(&a + &b * &fi),
            &(c.transpose() * &c + fi.transpose() * &r * &fi),
        )?;
        let xi = x0.rows(layout.offset(i), layout.block_len(i)).clone_owned();
        isolated += (xi.transpose() * p * xi)[(0, 0)];
    }
    let gap = j_d - j_c;
    Ok(CostSummary {
        j_d_coupled: j_d,
        j_d_isolated_sum: isolated,
        j_c,
        gap,
        bound,
        holds: Verdict::from_bool(gap >= -BOUND_SLACK && gap <= bound + BOUND_SLACK),
        transient_factor: exp_bound_factor(&a_d, beta_d, 0.5, 40),
    })
}

/// Simulate one controller and summarise the trace.
pub fn simulate_summary(
    graph: &NetworkGraph,
    x_star: &SynchronousState,
    sim: &SimConfig,
    feedback: &Feedback,
    dev0: &DeviationVector,
) -> Result<(SimulationSummary, Trace)> {
    let o = run_simulation(graph, x_star, sim, feedback, dev0, sim.record_every)?;
    Ok((o.summary, o.trace))
}

struct SimOutcome {
    summary: SimulationSummary,
    trace: Trace,
}

fn run_simulation(
    graph: &NetworkGraph,
    x_star: &SynchronousState,
    sim: &SimConfig,
    feedback: &Feedback,
    dev0: &DeviationVector,
    record_every: usize,
) -> Result<SimOutcome> {
    let trace = simulate(graph, x_star, dev0, feedback, &sim.options(record_every))?;
    let devs = trace_deviations(graph, x_star, &trace)?;
    let (fw, fv) = trace_variances(graph, x_star, &trace)?;
    let monotone = match &trace.lyapunov {
        Some(v) => Verdict::from_bool(v.windows(2).all(|w| w[1] <= w[0] + 1e-10)),
        None => Verdict::Skipped,
    };
    Ok(SimOutcome {
        summary: SimulationSummary {
            controller: sim.controller,
            model: sim.model,
            dt: sim.dt,
            t_end: sim.t_end,
            initial_norm: dev0.norm(),
            final_norm: devs.last().map_or(0.0, |d| d.norm()),
            frequency_variance: fw,
            voltage_variance: fv,
            lyapunov_nonincreasing: monotone,
            trace: None,
        },
        trace,
    })
}

/// Run every stage of `scenario`. Stage failures end the run and are
/// recorded in the report; when `out` is given the trace and `report.toml`
/// are written there.
pub fn run_scenario(scenario: &Scenario, out: Option<&Path>, exec: Exec) -> Report {
    let mut report = Report::new(scenario.sim.controller);
    let artifacts = out.map(Artifacts::new);
    let _ = run_stages(&mut report, scenario, artifacts.as_ref(), exec);
    report.fill_skipped();
    if let Some(a) = &artifacts {
        if let Err(e) = a.write(&a.report_path(), &report) {
            warn!("could not write report: {e}");
            if report.error.is_none() {
                report.error = Some(StageError::new("report", &e));
            }
        }
    }
    report
}

fn run_stages(
    report: &mut Report,
    scenario: &Scenario,
    artifacts: Option<&Artifacts>,
    exec: Exec,
) -> std::result::Result<(), ()> {
    let p = prepare(report, scenario, exec)?;
    let kind = scenario.sim.controller;
    let dev0 = report.guard(
        "simulate",
        scenario
            .perturbation
            .deviation(&p.graph, scenario.perturbation.seed),
    )?;

    let gains = if kind == ControllerKind::Open {
        None
    } else {
        let g = report.guard(
            "gains",
            scenario_gains(&p.sys, &p.graph, &scenario.weights, exec),
        )?;
        report.gains = Some(report.record("gains", gain_summary(&p, &g))?);
        Some(g)
    };
    let feedback = gains.as_ref().map_or(Feedback::Open, |g| g.feedback(kind));

    let mut outcome = report.guard(
        "simulate",
        run_simulation(
            &p.graph,
            &p.x_star,
            &scenario.sim,
            &feedback,
            &dev0,
            scenario.sim.record_every,
        ),
    )?;
    if let (Some(a), true) = (artifacts, scenario.outputs.write_trace) {
        let path = a.trace_path(kind);
        report.guard("simulate", a.write_trace(&path, &outcome.trace))?;
        outcome.summary.trace = Some(path);
    }
    report.mark("simulate", Verdict::Pass);
    report.simulation = Some(outcome.summary);

    if let Some(g) = &gains {
        report.costs = Some(report.record(
            "costs",
            run_costs(&p, &scenario.weights, g, &dev0.as_dvector()),
        )?);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub seed: u64,
    pub initial_norm: f64,
    pub final_norm: f64,
    pub frequency_variance: f64,
    pub voltage_variance: f64,
    pub j_d: f64,
    pub j_c: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<StageError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMeans {
    pub completed: usize,
    pub final_norm: f64,
    pub frequency_variance: f64,
    pub voltage_variance: f64,
    pub j_d: f64,
    pub j_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub controller: ControllerKind,
    pub master_seed: u64,
    pub mean: BatchMeans,
    pub rows: Vec<BatchRow>,
}

impl BatchSummary {
    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

fn means(rows: &[BatchRow]) -> BatchMeans {
    let ok: Vec<&BatchRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    let k = ok.len() as f64;
    let avg = |f: fn(&BatchRow) -> f64| {
        if ok.is_empty() {
            0.0
        } else {
            ok.iter().map(|r| f(r)).sum::<f64>() / k
        }
    };
    BatchMeans {
        completed: ok.len(),
        final_norm: avg(|r| r.final_norm),
        frequency_variance: avg(|r| r.frequency_variance),
        voltage_variance: avg(|r| r.voltage_variance),
        j_d: avg(|r| r.j_d),
        j_c: avg(|r| r.j_c),
    }
}

/// Seed `k` of a batch perturbs with `master_seed + k`, so a one-seed batch
/// repeats the single scenario run.
pub fn batch_seed(master: u64, k: usize) -> u64 {
    master.wrapping_add(k as u64)
}

/// Run the scenario for `n_seeds` initial perturbations with the network,
/// steady state and gains shared. Both gains are always synthesized so every
/// row carries `J_d` and `J_c` whatever controller is simulated. Shared
/// stages failing is an error; a failing seed is recorded in its row.
pub fn run_batch(
    scenario: &Scenario,
    n_seeds: usize,
    workers: usize,
    out: Option<&Path>,
    exec: Exec,
) -> std::result::Result<BatchSummary, StageError> {
    let mut report = Report::new(scenario.sim.controller);
    let shared = prepare(&mut report, scenario, exec).and_then(|p| {
        let g = report.record(
            "gains",
            scenario_gains(&p.sys, &p.graph, &scenario.weights, exec),
        )?;
        let q_xx = scenario.weights.q_xx(&p.sys);
        let q_uu = scenario.weights.q_uu(p.graph.n());
        let a_tilde = p.sys.a_tilde().map_err(|_| ())?;
        let f_d = g.distributed.dense();
        let p_d = report.record(
            "costs",
            cost_matrix(
                &(a_tilde + &p.sys.b * &f_d),
                &closed_loop_weight(&q_xx, &q_uu, &f_d),
            ),
        )?;
        Ok((p, g, p_d))
    });
    let (p, gains, p_d) = match shared {
        Ok(v) => v,
        Err(()) => {
            return Err(report.error.unwrap_or_else(|| {
                StageError::new(
                    "batch",
                    &GridError::Config("batch preparation failed".into()),
                )
            }))
        }
    };
    let artifacts = out.map(Artifacts::new);
    let kind = scenario.sim.controller;
    let feedback = gains.feedback(kind);
    let master = scenario.perturbation.seed;
    let record_every = scenario.sim.record_every;

    let run_one = |k: usize| -> BatchRow {
        let seed = batch_seed(master, k);
        let res = (|| -> std::result::Result<BatchRow, StageError> {
            let dev0 = scenario
                .perturbation
                .deviation(&p.graph, seed)
                .map_err(|e| StageError::new("simulate", &e))?;
            let x0 = dev0.as_dvector();
            let o = run_simulation(
                &p.graph,
                &p.x_star,
                &scenario.sim,
                &feedback,
                &dev0,
                record_every,
            )
            .map_err(|e| StageError::new("simulate", &e))?;
            if let (Some(a), true) = (&artifacts, scenario.batch.write_traces) {
                let path = a.dir.join(format!("seed_{seed}")).join("trace.csv");
                a.write_trace(&path, &o.trace)
                    .map_err(|e| StageError::new("simulate", &e))?;
            }
            Ok(BatchRow {
                seed,
                initial_norm: o.summary.initial_norm,
                final_norm: o.summary.final_norm,
                frequency_variance: o.summary.frequency_variance,
                voltage_variance: o.summary.voltage_variance,
                j_d: (x0.transpose() * &p_d * &x0)[(0, 0)],
                j_c: (x0.transpose() * &gains.central.riccati.p * &x0)[(0, 0)],
                error: None,
            })
        })();
        res.unwrap_or_else(|e| {
            warn!("seed {seed}: {}", e.message);
            BatchRow {
                seed,
                initial_norm: 0.0,
                final_norm: 0.0,
                frequency_variance: 0.0,
                voltage_variance: 0.0,
                j_d: 0.0,
                j_c: 0.0,
                error: Some(e),
            }
        })
    };
    let rows = exec.with_workers(workers, || exec.map(n_seeds, run_one));
    let summary = BatchSummary {
        controller: kind,
        master_seed: master,
        mean: means(&rows),
        rows,
    };
    if let Some(a) = &artifacts {
        a.write(&a.batch_path(), &summary)
            .map_err(|e| StageError::new("batch", &e))?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Scenario {
        let mut s = Scenario::default();
        s.network.multilevel = MultilevelConfig::with_counts(2, 4, 3);
        s.sim.t_end = 0.5;
        s.sim.dt = 1e-2;
        s.certificate.region = false;
        s
    }

    #[test]
    fn default_scenario_parses_from_empty_file() {
        let s = Scenario::from_toml_str("").unwrap();
        assert_eq!(s, Scenario::default());
        let back = Scenario::from_toml_str(&s.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let e = Scenario::from_toml_str("[sim]\ndtt = 1.0\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let mut s = Scenario::default();
        s.perturbation.radius = -1.0;
        assert!(matches!(s.validate(), Err(GridError::Config(_))));
        let mut s = Scenario::default();
        s.sim.dt = 0.0;
        assert!(matches!(s.validate(), Err(GridError::Config(_))));
    }

    #[test]
    fn controller_names() {
        assert_eq!(
            "open-loop".parse::<ControllerKind>().unwrap(),
            ControllerKind::Open
        );
        assert_eq!(
            "central".parse::<ControllerKind>().unwrap(),
            ControllerKind::Central
        );
        assert!("pid".parse::<ControllerKind>().is_err());
        let s = Scenario::from_toml_str("[sim]\ncontroller = \"open-loop\"\n").unwrap();
        assert_eq!(s.sim.controller, ControllerKind::Open);
    }

    #[test]
    fn per_node_perturbation() {
        let g = build_multilevel(&MultilevelConfig::with_counts(1, 2, 0)).unwrap();
        let node = (g.reference() + 1) % g.n();
        let mut p = Perturbation::default();
        p.nodes.push(NodeOffset {
            node,
            theta: 0.1,
            omega: 0.2,
            v: 0.3,
        });
        let d = p.deviation(&g, 0).unwrap();
        assert_eq!((d.theta(node), d.omega(node), d.v(node)), (0.1, 0.2, 0.3));
        assert!((d.norm() - (0.14f64).sqrt()).abs() < 1e-15);
        p.nodes = vec![NodeOffset {
            node: g.reference(),
            theta: 0.1,
            ..Default::default()
        }];
        assert!(p.deviation(&g, 0).is_err());
    }

    #[test]
    fn ball_perturbation_is_inside_radius_and_seeded() {
        let g = build_multilevel(&MultilevelConfig::with_counts(2, 5, 0)).unwrap();
        let p = Perturbation {
            radius: 0.01,
            ..Default::default()
        };
        let a = p.deviation(&g, 4).unwrap();
        assert!(a.norm() <= 0.01);
        assert_eq!(a, p.deviation(&g, 4).unwrap());
        assert_ne!(a, p.deviation(&g, 5).unwrap());
    }

    #[test]
    fn variance_of_a_hand_built_trace() {
        let g = build_multilevel(&MultilevelConfig::with_counts(1, 1, 0)).unwrap();
        let x = solve_synchronous_state(&g, None, &NewtonOptions::default()).unwrap();
        let mut s = x.full_state();
        s.omega = vec![1.0, 2.0, 3.0];
        s.v = x.v_star.iter().map(|v| v + 0.5).collect();
        let t = Trace {
            times: vec![0.0, 1.0],
            states: vec![x.full_state().to_flat(), s.to_flat()],
            ..Default::default()
        };
        let (fw, fv) = trace_variances(&g, &x, &t).unwrap();
        assert!((fw - 0.5).abs() < 1e-15);
        assert!(fv.abs() < 1e-15);
    }

    #[test]
    fn report_roundtrips_and_every_stage_has_a_verdict() {
        let s = small();
        let r = run_scenario(&s, None, Exec::Sequential);
        assert_eq!(r.exit_code(), 0, "{:?}", r.error);
        assert_eq!(r.stages.len(), STAGES.len());
        assert!(
            r.stages.iter().all(|st| st.verdict == Verdict::Pass),
            "{:?}",
            r.stages
        );
        let text = r.to_toml_string().unwrap();
        assert_eq!(Report::from_toml_str(&text).unwrap(), r);
        assert!(r.costs.unwrap().j_d_coupled.is_finite());
    }

    #[test]
    fn open_loop_skips_gains_and_costs() {
        let mut s = small();
        s.sim.controller = ControllerKind::Open;
        let r = run_scenario(&s, None, Exec::Sequential);
        assert_eq!(r.exit_code(), 0);
        assert_eq!(r.stage("gains"), Some(Verdict::Skipped));
        assert_eq!(r.stage("costs"), Some(Verdict::Skipped));
        assert!(r.gains.is_none() && r.costs.is_none());
        assert!(!r.to_toml_string().unwrap().contains("j_d"));
    }

    #[test]
    fn infeasible_injection_fails_at_steady_state() {
        let mut s = small();
        s.network.multilevel.p_load = crate::network::ParamRange::new(50.0, 60.0);
        let r = run_scenario(&s, None, Exec::Sequential);
        let e = r.error.clone().unwrap();
        assert_eq!(e.stage, "steady_state");
        assert_eq!(e.kind, "ConvergenceError");
        assert_eq!(r.exit_code(), 3);
        assert_eq!(r.stage("simulate"), Some(Verdict::Skipped));
    }

    #[test]
    fn batch_of_one_matches_the_scenario_and_is_deterministic() {
        let s = small();
        let r = run_scenario(&s, None, Exec::Sequential);
        let b = run_batch(&s, 1, 0, None, Exec::Sequential).unwrap();
        let row = &b.rows[0];
        let sim = r.simulation.unwrap();
        let costs = r.costs.unwrap();
        assert_eq!(row.final_norm, sim.final_norm);
        assert_eq!(row.initial_norm, sim.initial_norm);
        assert!((row.j_d - costs.j_d_coupled).abs() <= 1e-12 * costs.j_d_coupled);
        assert!((row.j_c - costs.j_c).abs() <= 1e-12 * costs.j_c);
        assert!(
            (row.frequency_variance - sim.frequency_variance).abs()
                <= 1e-12 * sim.frequency_variance.abs()
        );

        let mut s3 = small();
        s3.sim.record_every = 1;
        let a = run_batch(&s3, 3, 2, None, Exec::Parallel).unwrap();
        let c = run_batch(&s3, 3, 0, None, Exec::Sequential).unwrap();
        assert_eq!(a, c);
        let m = a.rows.iter().map(|r| r.frequency_variance).sum::<f64>() / 3.0;
        assert!((a.mean.frequency_variance - m).abs() <= 1e-12 * m);
    }

    #[test]
    fn artifacts_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let s = small();
        let r = run_scenario(&s, Some(dir.path()), Exec::Sequential);
        assert_eq!(r.exit_code(), 0);
        let a = Artifacts::new(dir.path());
        let back: Report = read_toml(&a.report_path()).unwrap();
        assert_eq!(back, r);
        let t = Trace::read_csv(fs::File::open(a.trace_path(ControllerKind::Distributed)).unwrap())
            .unwrap();
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn stored_gains_reproduce_the_pipeline_costs() {
        let s = small();
        let r = run_scenario(&s, None, Exec::Sequential);
        let g = build_multilevel(&s.network.multilevel).unwrap();
        let x = solve_synchronous_state(&g, None, &NewtonOptions::default()).unwrap();
        let sys = build_linearized(&g, &x, &s.weights.output).unwrap();
        let gains = scenario_gains(&sys, &g, &s.weights, Exec::Sequential).unwrap();
        let x0 = s
            .perturbation
            .deviation(&g, s.perturbation.seed)
            .unwrap()
            .as_dvector();
        let c = costs_from_gains(
            &g,
            &sys,
            &s.weights,
            &GainsArtifact::from_gains(&gains),
            &x0,
        )
        .unwrap();
        let want = r.costs.unwrap();
        for (a, b) in [
            (c.j_d_coupled, want.j_d_coupled),
            (c.j_c, want.j_c),
            (c.j_d_isolated_sum, want.j_d_isolated_sum),
            (c.bound, want.bound),
        ] {
            assert!((a - b).abs() <= 1e-8 * b.abs(), "{a} vs {b}");
        }
        assert_eq!(c.holds, want.holds);
    }

    #[test]
    fn gains_artifact_roundtrip() {
        let s = small();
        let g = build_multilevel(&s.network.multilevel).unwrap();
        let x = solve_synchronous_state(&g, None, &NewtonOptions::default()).unwrap();
        let sys = build_linearized(&g, &x, &s.weights.output).unwrap();
        let gains = scenario_gains(&sys, &g, &s.weights, Exec::Sequential).unwrap();
        let art = GainsArtifact::from_gains(&gains);
        let back: GainsArtifact = toml::from_str(&toml::to_string(&art).unwrap()).unwrap();
        assert_eq!(back, art);
        let layout = StateLayout::of(&g);
        for kind in [ControllerKind::Distributed, ControllerKind::Central] {
            assert_eq!(back.feedback(kind, layout).unwrap(), gains.feedback(kind));
        }
    }
}
