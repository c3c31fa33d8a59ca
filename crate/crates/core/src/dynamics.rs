//! Nonlinear swing/voltage dynamics, the isolated linear model, the
//! linearization at a synchronous state, and a fixed-step RK4 integrator.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GridError, Result};
use crate::network::NetworkGraph;
use crate::stability::lyapunov_value;
use crate::steady_state::{
    aligned_deviation, flow_sums, from_deviation, DeviationVector, FullState, StateLayout,
    SynchronousState,
};

/// Inputs `(u_ω, u_v)` per node, in node id order.
pub fn input_dim(n: usize) -> usize {
    2 * n
}

fn check_inputs(n: usize, u: &[f64]) -> Result<()> {
    if u.len() != input_dim(n) {
        return Err(GridError::Dimension {
            expected: input_dim(n),
            actual: u.len(),
        });
    }
    Ok(())
}

/// Right-hand side of the combined nonlinear model in absolute coordinates.
pub fn rhs_combined(graph: &NetworkGraph, x: &FullState, u: &[f64]) -> Result<FullState> {
    let n = graph.n();
    if x.n() != n || x.omega.len() != n || x.v.len() != n {
        return Err(GridError::Dimension {
            expected: n,
            actual: x.n(),
        });
    }
    check_inputs(n, u)?;
    if let Some(i) = x.v.iter().position(|v| !(*v > 0.0)) {
        return Err(GridError::Domain(format!(
            "non-positive voltage {} at node {i}",
            x.v[i]
        )));
    }
    let (pf, qf) = flow_sums(graph, &x.theta, &x.v);
    let mut dx = FullState::zeros(n);
    for (i, node) in graph.nodes().iter().enumerate() {
        dx.theta[i] = x.omega[i];
        dx.omega[i] = (-node.d * x.omega[i] + node.p_inj() - pf[i] + u[2 * i]) / node.m;
        dx.v[i] = (-node.k * x.v[i] + node.q_inj() - qf[i] + u[2 * i + 1]) / node.tau;
    }
    Ok(dx)
}

/// Nonlinear model in reduced deviation coordinates with the reference
/// angle held at its synchronous value.
pub fn rhs_reduced(
    graph: &NetworkGraph,
    x_star: &SynchronousState,
    dev: &[f64],
    u: &[f64],
) -> Result<Vec<f64>> {
    let layout = StateLayout::of(graph);
    let dev = DeviationVector::from_values(layout, dev.to_vec())?;
    let x = from_deviation(&dev, x_star)?;
    let dx = rhs_combined(graph, &x, u)?;
    let mut out = vec![0.0; layout.dim()];
    for i in 0..graph.n() {
        if let Some(k) = layout.theta(i) {
            out[k] = dx.theta[i];
        }
        out[layout.omega(i)] = dx.omega[i];
        out[layout.v(i)] = dx.v[i];
    }
    Ok(out)
}

/// Line-flow sums `(Σ_j P_ij, Σ_j Q_ij)` per node at the synchronous state.
pub fn synchronous_flows(graph: &NetworkGraph, x_star: &SynchronousState) -> Vec<(f64, f64)> {
    let (p, q) = flow_sums(graph, &x_star.theta_star, &x_star.v_star);
    p.into_iter().zip(q).collect()
}

/// Isolated model with the incident line flows frozen at `fixed_flows`,
/// in deviation coordinates around `x_star`.
pub fn rhs_isolated(
    graph: &NetworkGraph,
    x_star: &SynchronousState,
    dev: &[f64],
    u: &[f64],
    fixed_flows: &[(f64, f64)],
) -> Result<Vec<f64>> {
    let n = graph.n();
    let layout = StateLayout::of(graph);
    if dev.len() != layout.dim() {
        return Err(GridError::Dimension {
            expected: layout.dim(),
            actual: dev.len(),
        });
    }
    check_inputs(n, u)?;
    if fixed_flows.len() != n {
        return Err(GridError::Dimension {
            expected: n,
            actual: fixed_flows.len(),
        });
    }
    let mut out = vec![0.0; layout.dim()];
    for (i, node) in graph.nodes().iter().enumerate() {
        let w = dev[layout.omega(i)];
        let dv = dev[layout.v(i)];
        if let Some(k) = layout.theta(i) {
            out[k] = w;
        }
        let (pf, qf) = fixed_flows[i];
        out[layout.omega(i)] = (-node.d * w + node.p_inj() - pf + u[2 * i]) / node.m;
        out[layout.v(i)] =
            (-node.k * (x_star.v_star[i] + dv) + node.q_inj() - qf + u[2 * i + 1]) / node.tau;
    }
    Ok(out)
}

/// Which signals the reference node's output block measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceOutput {
    /// `diag(C^ω_g, C^v_g)`, observable
    #[default]
    Frequency,
    /// the generic `diag(C^θ, 0, C^v)` pattern with the angle row dropped,
    /// which leaves the reference frequency unobserved
    VoltageOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputWeights {
    pub c_theta: f64,
    pub c_v: f64,
    pub c_omega_ref: f64,
    pub reference_output: ReferenceOutput,
}

impl Default for OutputWeights {
    fn default() -> Self {
        OutputWeights {
            c_theta: 1.0,
            c_v: 1.0,
            c_omega_ref: 1.0,
            reference_output: ReferenceOutput::Frequency,
        }
    }
}

impl OutputWeights {
    pub fn validate(&self) -> Result<()> {
        let omega_ok =
            self.reference_output == ReferenceOutput::VoltageOnly || self.c_omega_ref > 0.0;
        if !(self.c_theta > 0.0 && self.c_v > 0.0 && omega_ok) {
            return Err(GridError::Config(format!(
                "output gains must be positive (c_theta {}, c_v {}, c_omega_ref {})",
                self.c_theta, self.c_v, self.c_omega_ref
            )));
        }
        Ok(())
    }
}

/// Isolated `(A_i, B_i, C_i)` of one node; the reference node gets the 2×2
/// reduction without its angle.
pub fn isolated_block(
    graph: &NetworkGraph,
    i: usize,
    weights: &OutputWeights,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let nd = graph.node(i);
    if i == graph.reference() {
        let a = DMatrix::from_row_slice(2, 2, &[-nd.d / nd.m, 0.0, 0.0, -nd.k / nd.tau]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0 / nd.m, 0.0, 0.0, 1.0 / nd.tau]);
        let c_omega = match weights.reference_output {
            ReferenceOutput::Frequency => weights.c_omega_ref,
            ReferenceOutput::VoltageOnly => 0.0,
        };
        let c = DMatrix::from_diagonal(&DVector::from_vec(vec![c_omega, weights.c_v]));
        (a, b, c)
    } else {
        #[rustfmt::skip]
        let a = DMatrix::from_row_slice(3, 3, &[
            0.0, 1.0, 0.0,
            0.0, -nd.d / nd.m, 0.0,
            0.0, 0.0, -nd.k / nd.tau,
        ]);
        let b = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0 / nd.m, 0.0, 0.0, 1.0 / nd.tau]);
        let c = DMatrix::from_diagonal(&DVector::from_vec(vec![weights.c_theta, 0.0, weights.c_v]));
        (a, b, c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemMatrices {
    pub layout: StateLayout,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c_out: DMatrix<f64>,
    /// same-node coupling correction (block diagonal)
    pub a_x: Option<DMatrix<f64>>,
    /// neighbour coupling (off-diagonal blocks)
    pub a_hat: Option<DMatrix<f64>>,
    pub a_tilde: Option<DMatrix<f64>>,
}

impl SystemMatrices {
    /// `A + s (A_x + Â)`; `s = 1` gives `Ã`.
    pub fn scaled_coupling(&self, s: f64) -> Result<DMatrix<f64>> {
        match (&self.a_x, &self.a_hat) {
            (Some(ax), Some(ah)) => Ok(&self.a + (ax + ah) * s),
            _ => Err(GridError::Config(
                "system matrices carry no linearization".into(),
            )),
        }
    }

    pub fn a_tilde(&self) -> Result<&DMatrix<f64>> {
        self.a_tilde
            .as_ref()
            .ok_or_else(|| GridError::Config("system matrices carry no linearization".into()))
    }
}

pub fn build_isolated_matrices(
    graph: &NetworkGraph,
    weights: &OutputWeights,
) -> Result<SystemMatrices> {
    weights.validate()?;
    let layout = StateLayout::of(graph);
    let n = graph.n();
    let dim = layout.dim();
    let mut a = DMatrix::zeros(dim, dim);
    let mut b = DMatrix::zeros(dim, input_dim(n));
    let mut c_out = DMatrix::zeros(dim, dim);
    for i in 0..n {
        let (ai, bi, ci) = isolated_block(graph, i, weights);
        let off = layout.offset(i);
        let len = layout.block_len(i);
        a.view_mut((off, off), (len, len)).copy_from(&ai);
        b.view_mut((off, 2 * i), (len, 2)).copy_from(&bi);
        c_out.view_mut((off, off), (len, len)).copy_from(&ci);
    }
    Ok(SystemMatrices {
        layout,
        a,
        b,
        c_out,
        a_x: None,
        a_hat: None,
        a_tilde: None,
    })
}

/// Linearization `Ã = A + A_x + Â` of the pinned-reference model at `x_star`.
pub fn build_linearized(
    graph: &NetworkGraph,
    x_star: &SynchronousState,
    weights: &OutputWeights,
) -> Result<SystemMatrices> {
    let mut sys = build_isolated_matrices(graph, weights)?;
    let layout = sys.layout;
    let dim = layout.dim();
    let mut a_x = DMatrix::zeros(dim, dim);
    let mut a_hat = DMatrix::zeros(dim, dim);
    let (th, v) = (&x_star.theta_star, &x_star.v_star);
    for i in 0..graph.n() {
        let nd = graph.node(i);
        let (wi, vi_row) = (layout.omega(i), layout.v(i));
        for nb in graph.neighbors(i) {
            let j = nb.node;
            let line = &graph.lines()[nb.line];
            let (s, c) = (th[i] - th[j]).sin_cos();
            let (gl, bl) = (line.g, line.b);
            let vv = v[i] * v[j];
            let dp_dth = vv * (-gl * s + bl * c);
            let dp_dvi = v[j] * (gl * c + bl * s);
            let dp_dvj = v[i] * (gl * c + bl * s);
            let dq_dth = vv * (gl * c + bl * s);
            let dq_dvi = v[j] * (gl * s - bl * c);
            let dq_dvj = v[i] * (gl * s - bl * c);
            // flows enter with a minus sign
            if let Some(ti) = layout.theta(i) {
                a_x[(wi, ti)] -= dp_dth / nd.m;
                a_x[(vi_row, ti)] -= dq_dth / nd.tau;
            }
            a_x[(wi, layout.v(i))] -= dp_dvi / nd.m;
            a_x[(vi_row, layout.v(i))] -= dq_dvi / nd.tau;
            if let Some(tj) = layout.theta(j) {
                a_hat[(wi, tj)] += dp_dth / nd.m;
                a_hat[(vi_row, tj)] += dq_dth / nd.tau;
            }
            a_hat[(wi, layout.v(j))] -= dp_dvj / nd.m;
            a_hat[(vi_row, layout.v(j))] -= dq_dvj / nd.tau;
        }
    }
    let a_tilde = &sys.a + &a_x + &a_hat;
    sys.a_x = Some(a_x);
    sys.a_hat = Some(a_hat);
    sys.a_tilde = Some(a_tilde);
    Ok(sys)
}

/// Static state feedback `u = F x̃` on the reduced deviation.
#[derive(Debug, Clone, PartialEq)]
pub enum Feedback {
    Open,
    Dense(DMatrix<f64>),
    /// one `2 × len_i` gain per node acting on that node's own states
    BlockDiagonal {
        layout: StateLayout,
        blocks: Vec<DMatrix<f64>>,
    },
}

impl Feedback {
    pub fn apply(&self, x: &[f64], n_inputs: usize) -> Vec<f64> {
        match self {
            Feedback::Open => vec![0.0; n_inputs],
            Feedback::Dense(f) => (f * DVector::from_column_slice(x)).as_slice().to_vec(),
            Feedback::BlockDiagonal { layout, blocks } => {
                let mut u = vec![0.0; n_inputs];
                for (i, blk) in blocks.iter().enumerate() {
                    let off = layout.offset(i);
                    for r in 0..blk.nrows() {
                        u[2 * i + r] = (0..blk.ncols()).map(|c| blk[(r, c)] * x[off + c]).sum();
                    }
                }
                u
            }
        }
    }

    pub fn to_dense(&self, n_inputs: usize, dim: usize) -> DMatrix<f64> {
        match self {
            Feedback::Open => DMatrix::zeros(n_inputs, dim),
            Feedback::Dense(f) => f.clone(),
            Feedback::BlockDiagonal { layout, blocks } => {
                let mut f = DMatrix::zeros(n_inputs, dim);
                for (i, blk) in blocks.iter().enumerate() {
                    f.view_mut((2 * i, layout.offset(i)), (blk.nrows(), blk.ncols()))
                        .copy_from(blk);
                }
                f
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    /// controller evaluated at every RK stage
    #[default]
    Continuous,
    /// input held over the step
    ZeroOrderHold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegrateOptions {
    pub dt: f64,
    pub t_end: f64,
    pub mode: FeedbackMode,
    /// keep every k-th step in the trace (the final step is always kept)
    pub record_every: usize,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        IntegrateOptions {
            dt: 1e-3,
            t_end: 20.0,
            mode: FeedbackMode::Continuous,
            record_every: 1,
        }
    }
}

impl IntegrateOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.t_end >= self.dt && self.record_every >= 1) {
            return Err(GridError::Config(format!(
                "integration needs dt > 0, T >= dt and record_every >= 1 (dt {}, T {})",
                self.dt, self.t_end
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub lyapunov: Option<Vec<f64>>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_state(&self) -> Option<&[f64]> {
        self.states.last().map(|s| s.as_slice())
    }

    /// CSV with one row per sample; states must be full `(θ, ω, v)` per node.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let n = self.states.first().map_or(0, |s| s.len() / 3);
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        for i in 0..n {
            header.extend([
                format!("node{i}_theta"),
                format!("node{i}_omega"),
                format!("node{i}_v"),
            ]);
        }
        for i in 0..n {
            header.extend([format!("node{i}_u_omega"), format!("node{i}_u_v")]);
        }
        w.write_record(&header)?;
        for k in 0..self.len() {
            if self.states[k].len() != 3 * n || self.inputs[k].len() != 2 * n {
                return Err(GridError::Dimension {
                    expected: 3 * n,
                    actual: self.states[k].len(),
                });
            }
            let row = std::iter::once(self.times[k])
                .chain(self.states[k].iter().copied())
                .chain(self.inputs[k].iter().copied())
                .map(|x| format!("{x:.16e}"));
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let cols = rd.headers()?.len();
        if cols == 0 || (cols - 1) % 5 != 0 {
            return Err(GridError::Parse(format!("trace header has {cols} columns")));
        }
        let n = (cols - 1) / 5;
        let mut trace = Trace::default();
        for rec in rd.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| GridError::Parse(format!("{s}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            trace.times.push(vals[0]);
            trace.states.push(vals[1..1 + 3 * n].to_vec());
            trace.inputs.push(vals[1 + 3 * n..].to_vec());
        }
        Ok(trace)
    }
}

fn axpy(x: &[f64], h: f64, k: &[f64]) -> Vec<f64> {
    x.iter().zip(k).map(|(a, b)| a + h * b).collect()
}

/// Classical fixed-step RK4 for `ẋ = rhs(x, u)` with `u = controller(x)`.
pub fn integrate<R, C>(rhs: R, x0: &[f64], controller: C, opts: &IntegrateOptions) -> Result<Trace>
where
    R: Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
    C: Fn(&[f64]) -> Result<Vec<f64>>,
{
    opts.validate()?;
    let steps = opts.steps();
    let dt = opts.dt;
    let mut trace = Trace::default();
    let mut x = x0.to_vec();
    let eval = |x: &[f64], held: &Option<Vec<f64>>| -> Result<Vec<f64>> {
        match held {
            Some(u) => rhs(x, u),
            None => rhs(x, &controller(x)?),
        }
    };
    for step in 0..=steps {
        let u0 = controller(&x)?;
        if step % opts.record_every == 0 || step == steps {
            trace.times.push(step as f64 * dt);
            trace.states.push(x.clone());
            trace.inputs.push(u0.clone());
        }
        if step == steps {
            break;
        }
        let held = match opts.mode {
            FeedbackMode::ZeroOrderHold => Some(u0.clone()),
            FeedbackMode::Continuous => None,
        };
        let k1 = match &held {
            Some(u) => rhs(&x, u)?,
            None => rhs(&x, &u0)?,
        };
        let k2 = eval(&axpy(&x, 0.5 * dt, &k1), &held)?;
        let k3 = eval(&axpy(&x, 0.5 * dt, &k2), &held)?;
        let k4 = eval(&axpy(&x, dt, &k3), &held)?;
        for i in 0..x.len() {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GridError::Numerical { step: step + 1 });
        }
    }
    Ok(trace)
}

/// Which nonlinear model a simulation integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    /// reference angle held at its synchronous value; the model behind `Ã`
    #[default]
    Pinned,
    /// every angle free; deviations are taken after shifting all angles so
    /// the reference angle matches its synchronous value
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateOptions {
    #[serde(flatten)]
    pub integrate: IntegrateOptions,
    pub model: Model,
    pub with_lyapunov: bool,
}

impl From<IntegrateOptions> for SimulateOptions {
    fn from(integrate: IntegrateOptions) -> Self {
        SimulateOptions {
            integrate,
            ..Default::default()
        }
    }
}

/// Simulate the nonlinear model from `x_star + dev0` under feedback on the
/// reduced deviation. Trace states are absolute `(θ, ω, v)` per node.
pub fn simulate(
    graph: &NetworkGraph,
    x_star: &SynchronousState,
    dev0: &DeviationVector,
    feedback: &Feedback,
    opts: &SimulateOptions,
) -> Result<Trace> {
    let n = graph.n();
    let n_in = input_dim(n);
    let g = graph.reference();
    let x0 = from_deviation(dev0, x_star)?.to_flat();
    let rhs = |x: &[f64], u: &[f64]| -> Result<Vec<f64>> {
        let mut dx = rhs_combined(graph, &FullState::from_flat(x)?, u)?.to_flat();
        if opts.model == Model::Pinned {
            dx[3 * g] = 0.0;
        }
        Ok(dx)
    };
    let controller = |x: &[f64]| -> Result<Vec<f64>> {
        if matches!(feedback, Feedback::Open) {
            return Ok(vec![0.0; n_in]);
        }
        let dev = aligned_deviation(graph, &FullState::from_flat(x)?, x_star)?;
        Ok(feedback.apply(&dev.values, n_in))
    };
    let mut trace = integrate(rhs, &x0, controller, &opts.integrate)?;
    if opts.with_lyapunov {
        let mut vals = Vec::with_capacity(trace.len());
        for s in &trace.states {
            let dev = aligned_deviation(graph, &FullState::from_flat(s)?, x_star)?;
            vals.push(lyapunov_value(graph, x_star, &dev)?);
        }
        trace.lyapunov = Some(vals);
    }
    Ok(trace)
}

/// Reference-aligned deviations of every trace sample.
pub fn trace_deviations(
    graph: &NetworkGraph,
    x_star: &SynchronousState,
    trace: &Trace,
) -> Result<Vec<DeviationVector>> {
    trace
        .states
        .iter()
        .map(|s| aligned_deviation(graph, &FullState::from_flat(s)?, x_star))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::spectral_abscissa;
    use crate::network::{build_multilevel, LineParams, MultilevelConfig, NodeParams};
    use crate::steady_state::{solve_synchronous_state, NewtonOptions};

    fn grid(seed: u64) -> (NetworkGraph, SynchronousState) {
        let g = build_multilevel(&MultilevelConfig::with_counts(2, 6, seed)).unwrap();
        let s = solve_synchronous_state(&g, None, &NewtonOptions::default()).unwrap();
        (g, s)
    }

    fn max_abs(x: &[f64]) -> f64 {
        x.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    #[test]
    fn equilibrium_is_stationary() {
        let (g, s) = grid(1);
        let dx = rhs_combined(&g, &s.full_state(), &vec![0.0; 2 * g.n()]).unwrap();
        let scale = 10.0 * NewtonOptions::default().tol;
        assert!(
            max_abs(&dx.to_flat()) <= scale,
            "{}",
            max_abs(&dx.to_flat())
        );
    }

    #[test]
    fn isolated_node_substitution() {
        let g = NetworkGraph::new(vec![NodeParams::toy(0, 3, 0.0, 0.0)], vec![], 0).unwrap();
        let x = FullState {
            theta: vec![0.0],
            omega: vec![1.0],
            v: vec![1.0],
        };
        let dx = rhs_combined(&g, &x, &[0.0, 0.0]).unwrap();
        assert_eq!((dx.theta[0], dx.omega[0], dx.v[0]), (1.0, -1.0, -1.0));
    }

    #[test]
    fn two_node_flows_match_hand_formula() {
        let mut a = NodeParams::toy(0, 4, 0.3, 0.2);
        a.m = 2.0;
        a.tau = 0.5;
        let b = NodeParams::toy(1, 3, -0.3, 0.1);
        let (bl, gl) = (1.3, 0.2);
        let g = NetworkGraph::new(
            vec![a.clone(), b.clone()],
            vec![LineParams {
                from: 0,
                to: 1,
                b: bl,
                g: gl,
            }],
            1,
        )
        .unwrap();
        let x = FullState {
            theta: vec![0.4, -0.1],
            omega: vec![0.2, -0.3],
            v: vec![1.1, 0.9],
        };
        let u = [0.05, -0.02, 0.01, 0.03];
        let dx = rhs_combined(&g, &x, &u).unwrap();
        let th: f64 = 0.4 - -0.1;
        let p01 = 1.1 * 0.9 * (gl * th.cos() + bl * th.sin());
        let q01 = 1.1 * 0.9 * (gl * th.sin() - bl * th.cos());
        let p10 = 0.9 * 1.1 * (gl * th.cos() - bl * th.sin());
        let q10 = 0.9 * 1.1 * (-gl * th.sin() - bl * th.cos());
        assert!((dx.omega[0] - (-0.2 + 0.3 - p01 + 0.05) / 2.0).abs() < 1e-15);
        assert!((dx.v[0] - (-1.1 + 0.2 - q01 - 0.02) / 0.5).abs() < 1e-15);
        assert!((dx.omega[1] - (0.3 - 0.3 - p10 + 0.01)).abs() < 1e-15);
        assert!((dx.v[1] - (-0.9 + 0.1 - q10 + 0.03)).abs() < 1e-15);
        assert_eq!(dx.theta, vec![0.2, -0.3]);
    }

    #[test]
    fn nonpositive_voltage_rejected() {
        let (g, s) = grid(2);
        let mut x = s.full_state();
        x.v[4] = 0.0;
        assert!(matches!(
            rhs_combined(&g, &x, &vec![0.0; 2 * g.n()]),
            Err(GridError::Domain(_))
        ));
    }

    #[test]
    fn isolated_model_is_affine_in_deviation() {
        let (g, s) = grid(3);
        let sys = build_isolated_matrices(&g, &OutputWeights::default()).unwrap();
        let flows = synchronous_flows(&g, &s);
        let dim = sys.layout.dim();
        let zero = rhs_isolated(&g, &s, &vec![0.0; dim], &vec![0.0; 2 * g.n()], &flows).unwrap();
        assert!(max_abs(&zero) < 1e-9);
        let x: Vec<f64> = (0..dim).map(|k| 0.01 * (k as f64 * 0.7).sin()).collect();
        let u: Vec<f64> = (0..2 * g.n())
            .map(|k| 0.02 * (k as f64 * 1.3).cos())
            .collect();
        let got = rhs_isolated(&g, &s, &x, &u, &flows).unwrap();
        let lin = &sys.a * DVector::from_vec(x) + &sys.b * DVector::from_vec(u);
        for k in 0..dim {
            assert!((got[k] - lin[k]).abs() < 1e-9, "row {k}");
        }
    }

    #[test]
    fn unit_input_step_raises_frequency_rate() {
        let (g, s) = grid(4);
        let flows = synchronous_flows(&g, &s);
        let layout = StateLayout::of(&g);
        let x = vec![0.0; layout.dim()];
        let i = 5;
        let mut u = vec![0.0; 2 * g.n()];
        let base = rhs_isolated(&g, &s, &x, &u, &flows).unwrap();
        u[2 * i] = g.node(i).m;
        let bumped = rhs_isolated(&g, &s, &x, &u, &flows).unwrap();
        assert!((bumped[layout.omega(i)] - base[layout.omega(i)] - 1.0).abs() < 1e-12);
        assert!(matches!(
            rhs_isolated(&g, &s, &x[1..], &u, &flows),
            Err(GridError::Dimension { .. })
        ));
    }

    #[test]
    fn isolated_block_formulas() {
        let mut nd = NodeParams::toy(1, 3, 0.0, 0.0);
        (nd.m, nd.d, nd.tau, nd.k) = (2.0, 4.0, 1.0, 3.0);
        let g = NetworkGraph::new(
            vec![NodeParams::toy(0, 4, 0.0, 0.0), nd],
            vec![LineParams::lossless(0, 1, 1.0)],
            0,
        )
        .unwrap();
        let (a, b, c) = isolated_block(&g, 1, &OutputWeights::default());
        assert_eq!(
            a,
            DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, -2.0, 0.0, 0.0, 0.0, -3.0])
        );
        assert_eq!(
            b,
            DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 0.5, 0.0, 0.0, 1.0])
        );
        assert_eq!(
            c,
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0, 1.0]))
        );
        let (ag, bg, cg) = isolated_block(&g, 0, &OutputWeights::default());
        assert_eq!(ag, -DMatrix::identity(2, 2));
        assert_eq!(bg, DMatrix::identity(2, 2));
        assert_eq!(cg, DMatrix::identity(2, 2));
        let voltage_only = OutputWeights {
            reference_output: ReferenceOutput::VoltageOnly,
            ..Default::default()
        };
        assert_eq!(isolated_block(&g, 0, &voltage_only).2[(0, 0)], 0.0);
        let bad = OutputWeights {
            c_v: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            build_isolated_matrices(&g, &bad),
            Err(GridError::Config(_))
        ));
    }

    #[test]
    fn default_graph_dimensions() {
        let g = build_multilevel(&MultilevelConfig::default()).unwrap();
        let sys = build_isolated_matrices(&g, &OutputWeights::default()).unwrap();
        assert_eq!(sys.a.shape(), (332, 332));
        assert_eq!(sys.b.shape(), (332, 222));
        assert_eq!(sys.c_out.shape(), (332, 332));
    }

    #[test]
    fn linearization_matches_finite_differences() {
        let (g, s) = grid(5);
        let mut lossy = g.lines()[2];
        lossy.g = 0.1;
        let g = g.with_line(2, lossy).unwrap();
        let s =
            solve_synchronous_state(&g, Some(&s.full_state()), &NewtonOptions::default()).unwrap();
        let sys = build_linearized(&g, &s, &OutputWeights::default()).unwrap();
        let at = sys.a_tilde().unwrap();
        let dim = sys.layout.dim();
        let u = vec![0.0; 2 * g.n()];
        let h = 1e-6;
        for col in 0..dim {
            let mut p = vec![0.0; dim];
            let mut m = vec![0.0; dim];
            p[col] = h;
            m[col] = -h;
            let fp = rhs_reduced(&g, &s, &p, &u).unwrap();
            let fm = rhs_reduced(&g, &s, &m, &u).unwrap();
            for row in 0..dim {
                let fd = (fp[row] - fm[row]) / (2.0 * h);
                assert!(
                    (fd - at[(row, col)]).abs() <= 1e-5,
                    "({row},{col}): {fd} vs {}",
                    at[(row, col)]
                );
            }
        }
    }

    #[test]
    fn coupling_blocks_vanish_off_the_tree() {
        let (g, s) = grid(6);
        let sys = build_linearized(&g, &s, &OutputWeights::default()).unwrap();
        let ah = sys.a_hat.as_ref().unwrap();
        let l = sys.layout;
        for i in 0..g.n() {
            for j in 0..g.n() {
                let adjacent = g.neighbors(i).iter().any(|nb| nb.node == j);
                if i == j || adjacent {
                    continue;
                }
                let blk = ah.view((l.offset(i), l.offset(j)), (l.block_len(i), l.block_len(j)));
                assert_eq!(blk.amax(), 0.0, "({i},{j})");
            }
        }
        assert_eq!(sys.scaled_coupling(1.0).unwrap(), *sys.a_tilde().unwrap());
        assert_eq!(sys.scaled_coupling(0.0).unwrap(), sys.a);
    }

    #[test]
    fn flat_profile_has_no_sine_terms() {
        let (g, _) = grid(7);
        let n = g.n();
        let s = SynchronousState {
            theta_star: vec![0.0; n],
            v_star: vec![1.0; n],
            omega_star: vec![0.0; n],
            p_inj: g.p_inj(),
            q_inj: g.q_inj(),
            residual_norm: 0.0,
            iterations: 0,
            max_angle_difference: 0.0,
        };
        let sys = build_linearized(&g, &s, &OutputWeights::default()).unwrap();
        let (ax, ah) = (sys.a_x.unwrap(), sys.a_hat.unwrap());
        let l = sys.layout;
        for i in 0..n {
            assert_eq!(ax[(l.omega(i), l.v(i))], 0.0);
            for nb in g.neighbors(i) {
                if let Some(tj) = l.theta(nb.node) {
                    assert_eq!(ah[(l.v(i), tj)], 0.0);
                }
            }
        }
    }

    #[test]
    fn rk4_scalar_decay() {
        let opts = IntegrateOptions {
            dt: 0.01,
            t_end: 1.0,
            ..Default::default()
        };
        let tr = integrate(|x, _| Ok(vec![-x[0]]), &[1.0], |_| Ok(vec![]), &opts).unwrap();
        assert_eq!(tr.len(), 101);
        assert!((tr.last_state().unwrap()[0] - (-1.0f64).exp()).abs() < 1e-8);
        assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn zero_dynamics_keep_state() {
        let opts = IntegrateOptions {
            dt: 0.1,
            t_end: 1.0,
            ..Default::default()
        };
        let tr = integrate(
            |x, _| Ok(vec![0.0; x.len()]),
            &[1.0, -2.0],
            |_| Ok(vec![]),
            &opts,
        )
        .unwrap();
        assert!(tr.states.iter().all(|s| s == &vec![1.0, -2.0]));
    }

    #[test]
    fn blow_up_reports_step() {
        let opts = IntegrateOptions {
            dt: 0.1,
            t_end: 100.0,
            ..Default::default()
        };
        let err =
            integrate(|x, _| Ok(vec![x[0] * x[0]]), &[1.0], |_| Ok(vec![]), &opts).unwrap_err();
        assert!(
            matches!(err, GridError::Numerical { step } if step > 1),
            "{err:?}"
        );
    }

    fn closed_loop() -> (NetworkGraph, SynchronousState, SystemMatrices, DMatrix<f64>) {
        let (g, s) = grid(8);
        let sys = build_linearized(&g, &s, &OutputWeights::default()).unwrap();
        // simple stabilizing damping feedback on frequencies and voltages
        let mut f = DMatrix::zeros(2 * g.n(), sys.layout.dim());
        for i in 0..g.n() {
            f[(2 * i, sys.layout.omega(i))] = -g.node(i).m;
            f[(2 * i + 1, sys.layout.v(i))] = -g.node(i).tau;
        }
        (g, s, sys, f)
    }

    fn linear_run(acl: &DMatrix<f64>, x0: &DVector<f64>, dt: f64, t: f64) -> DVector<f64> {
        let opts = IntegrateOptions {
            dt,
            t_end: t,
            ..Default::default()
        };
        let tr = integrate(
            |x, _| Ok((acl * DVector::from_column_slice(x)).as_slice().to_vec()),
            x0.as_slice(),
            |_| Ok(vec![]),
            &opts,
        )
        .unwrap();
        DVector::from_column_slice(tr.last_state().unwrap())
    }

    #[test]
    fn linear_closed_loop_matches_matrix_exponential() {
        let (_, _, sys, f) = closed_loop();
        let acl = sys.a_tilde().unwrap() + &sys.b * &f;
        assert!(spectral_abscissa(&acl) < 0.0);
        let x0 = DVector::from_fn(acl.nrows(), |k, _| 0.01 * ((k + 1) as f64).sin());
        let exact = (&acl * 1.0).exp() * &x0;
        let got = linear_run(&acl, &x0, 1e-3, 1.0);
        assert!((&got - &exact).norm() <= 1e-6 * exact.norm());
        // fourth-order convergence
        let e1 = (linear_run(&acl, &x0, 0.01, 1.0) - &exact).norm();
        let e2 = (linear_run(&acl, &x0, 0.005, 1.0) - &exact).norm();
        let ratio = e1 / e2;
        assert!((8.0..=32.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn nonlinear_tracks_linearization_for_small_deviations() {
        let (g, s, sys, f) = closed_loop();
        let layout = sys.layout;
        let mut dir: Vec<f64> = (0..layout.dim())
            .map(|k| ((k * 7 + 3) as f64).cos())
            .collect();
        let nrm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|x| *x *= 1e-4 / nrm);
        let dev0 = DeviationVector::from_values(layout, dir.clone()).unwrap();
        let opts = IntegrateOptions {
            dt: 1e-3,
            t_end: 1.0,
            ..Default::default()
        };
        let fb = Feedback::Dense(f.clone());
        let tr = simulate(&g, &s, &dev0, &fb, &opts.into()).unwrap();
        let devs = trace_deviations(&g, &s, &tr).unwrap();
        let acl = sys.a_tilde().unwrap() + &sys.b * &f;
        let x0 = DVector::from_vec(dir);
        for (k, t) in tr.times.iter().enumerate().step_by(100) {
            let lin = (&acl * *t).exp() * &x0;
            let gap = (devs[k].as_dvector() - lin).norm();
            assert!(gap <= 1e-6, "t = {t}: {gap:e}");
        }
    }

    #[test]
    fn block_feedback_matches_dense() {
        let (g, _, sys, f) = closed_loop();
        let layout = sys.layout;
        let blocks: Vec<DMatrix<f64>> = (0..g.n())
            .map(|i| {
                f.view((2 * i, layout.offset(i)), (2, layout.block_len(i)))
                    .clone_owned()
            })
            .collect();
        let fb = Feedback::BlockDiagonal { layout, blocks };
        assert_eq!(fb.to_dense(2 * g.n(), layout.dim()), f);
        let x: Vec<f64> = (0..layout.dim()).map(|k| (k as f64).sin()).collect();
        let dense = Feedback::Dense(f).apply(&x, 2 * g.n());
        let blk = fb.apply(&x, 2 * g.n());
        assert!(dense.iter().zip(&blk).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn zoh_and_continuous_agree_to_first_order() {
        let (g, s, sys, f) = closed_loop();
        let dev0 = DeviationVector::from_values(sys.layout, vec![1e-3; sys.layout.dim()]).unwrap();
        let fb = Feedback::Dense(f);
        let base = IntegrateOptions {
            dt: 1e-3,
            t_end: 0.5,
            ..Default::default()
        };
        let zoh = IntegrateOptions {
            mode: FeedbackMode::ZeroOrderHold,
            ..base
        };
        let a = simulate(&g, &s, &dev0, &fb, &base.into()).unwrap();
        let b = simulate(&g, &s, &dev0, &fb, &zoh.into()).unwrap();
        let gap = max_abs(
            &a.last_state()
                .unwrap()
                .iter()
                .zip(b.last_state().unwrap())
                .map(|(x, y)| x - y)
                .collect::<Vec<_>>(),
        );
        assert!(gap > 0.0 && gap < 1e-5, "{gap:e}");
    }

    #[test]
    fn csv_round_trip() {
        let (g, s) = grid(9);
        let layout = StateLayout::of(&g);
        let dev0 = DeviationVector::from_values(layout, vec![1e-3; layout.dim()]).unwrap();
        let opts = IntegrateOptions {
            dt: 1e-2,
            t_end: 0.1,
            ..Default::default()
        };
        let tr = simulate(&g, &s, &dev0, &Feedback::Open, &opts.into()).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.starts_with("t,node0_theta,node0_omega,node0_v,node1_theta"));
        assert!(header.ends_with(&format!("node{}_u_omega,node{}_u_v", g.n() - 1, g.n() - 1)));
        let back = Trace::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.times, tr.times);
        assert_eq!(back.states, tr.states);
        assert_eq!(back.inputs, tr.inputs);
    }
}
