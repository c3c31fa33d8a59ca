//! Synchronous-state solver and the reduced deviation coordinates.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GridError, Result};
use crate::network::NetworkGraph;

/// Absolute state `(θ, ω, v)` for every node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullState {
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
    pub v: Vec<f64>,
}

impl FullState {
    pub fn zeros(n: usize) -> Self {
        FullState {
            theta: vec![0.0; n],
            omega: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn flat(n: usize) -> Self {
        FullState {
            theta: vec![0.0; n],
            omega: vec![0.0; n],
            v: vec![1.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.theta.len()
    }

    /// Interleaved `[θ0, ω0, v0, θ1, …]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.n());
        for i in 0..self.n() {
            out.extend_from_slice(&[self.theta[i], self.omega[i], self.v[i]]);
        }
        out
    }

    pub fn from_flat(x: &[f64]) -> Result<Self> {
        if !x.len().is_multiple_of(3) {
            return Err(GridError::Dimension {
                expected: 3 * (x.len() / 3 + 1),
                actual: x.len(),
            });
        }
        let n = x.len() / 3;
        let mut s = FullState::zeros(n);
        for i in 0..n {
            s.theta[i] = x[3 * i];
            s.omega[i] = x[3 * i + 1];
            s.v[i] = x[3 * i + 2];
        }
        Ok(s)
    }

    /// Shift every angle so that the reference angle equals `theta_ref`.
    /// The network flows depend only on angle differences, so this is a
    /// symmetry of the dynamics.
    pub fn aligned(&self, reference: usize, theta_ref: f64) -> Self {
        let shift = self.theta[reference] - theta_ref;
        let mut s = self.clone();
        for th in &mut s.theta {
            *th -= shift;
        }
        s
    }
}

/// Index map of the reduced state: `(θ̃, ω̃, ṽ)` per node in id order, with
/// the reference node contributing only `(ω̃, ṽ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    pub n: usize,
    pub reference: usize,
}

impl StateLayout {
    pub fn new(n: usize, reference: usize) -> Self {
        StateLayout { n, reference }
    }

    pub fn of(graph: &NetworkGraph) -> Self {
        StateLayout::new(graph.n(), graph.reference())
    }

    pub fn dim(&self) -> usize {
        3 * self.n - 1
    }

    /// First slot of node `i`.
    pub fn offset(&self, i: usize) -> usize {
        if i > self.reference {
            3 * i - 1
        } else {
            3 * i
        }
    }

    pub fn block_len(&self, i: usize) -> usize {
        if i == self.reference {
            2
        } else {
            3
        }
    }

    pub fn theta(&self, i: usize) -> Option<usize> {
        (i != self.reference).then(|| self.offset(i))
    }

    pub fn omega(&self, i: usize) -> usize {
        self.offset(i) + usize::from(i != self.reference)
    }

    pub fn v(&self, i: usize) -> usize {
        self.omega(i) + 1
    }

    /// Node ids other than the reference, in id order (row order of angle blocks).
    pub fn angle_nodes(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| i != self.reference).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationVector {
    pub values: Vec<f64>,
    pub layout: StateLayout,
}

impl DeviationVector {
    pub fn zeros(layout: StateLayout) -> Self {
        DeviationVector {
            values: vec![0.0; layout.dim()],
            layout,
        }
    }

    pub fn from_values(layout: StateLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(GridError::Dimension {
                expected: layout.dim(),
                actual: values.len(),
            });
        }
        Ok(DeviationVector { values, layout })
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn theta(&self, i: usize) -> f64 {
        self.layout.theta(i).map_or(0.0, |k| self.values[k])
    }

    pub fn omega(&self, i: usize) -> f64 {
        self.values[self.layout.omega(i)]
    }

    pub fn v(&self, i: usize) -> f64 {
        self.values[self.layout.v(i)]
    }

    pub fn as_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }
}

/// Equilibrium of the combined dynamics with all frequencies zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynchronousState {
    pub theta_star: Vec<f64>,
    pub v_star: Vec<f64>,
    pub omega_star: Vec<f64>,
    /// Net injections the state balances.
    pub p_inj: Vec<f64>,
    pub q_inj: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub max_angle_difference: f64,
}

impl SynchronousState {
    pub fn full_state(&self) -> FullState {
        FullState {
            theta: self.theta_star.clone(),
            omega: self.omega_star.clone(),
            v: self.v_star.clone(),
        }
    }

    pub fn n(&self) -> usize {
        self.theta_star.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol: 1e-10,
            max_iter: 50,
            max_halvings: 10,
        }
    }
}

fn flow_terms(g: f64, b: f64, vi: f64, vj: f64, dth: f64) -> (f64, f64) {
    let (s, c) = dth.sin_cos();
    let p = vi * vj * (g * c + b * s);
    let q = vi * vj * (g * s - b * c);
    (p, q)
}

/// Per-node sums of the line flows `Σ_j P_ij`, `Σ_j Q_ij`.
pub fn flow_sums(graph: &NetworkGraph, theta: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = graph.n();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for line in graph.lines() {
        let (i, j) = (line.from, line.to);
        let (pij, qij) = flow_terms(line.g, line.b, v[i], v[j], theta[i] - theta[j]);
        let (pji, qji) = flow_terms(line.g, line.b, v[j], v[i], theta[j] - theta[i]);
        p[i] += pij;
        q[i] += qij;
        p[j] += pji;
        q[j] += qji;
    }
    (p, q)
}

/// Steady-state residual: active balance for every non-reference node
/// followed by reactive balance for every node.
pub fn steady_residual(graph: &NetworkGraph, theta: &[f64], v: &[f64]) -> Vec<f64> {
    let n = graph.n();
    let g = graph.reference();
    let (pf, qf) = flow_sums(graph, theta, v);
    let mut r = Vec::with_capacity(2 * n - 1);
    for i in (0..n).filter(|&i| i != g) {
        r.push(pf[i] - graph.node(i).p_inj());
    }
    for i in 0..n {
        let node = graph.node(i);
        r.push(qf[i] - node.q_inj() + node.k * v[i]);
    }
    r
}

fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |acc, v| {
        if v.is_nan() {
            f64::NAN
        } else {
            acc.max(v.abs())
        }
    })
}

/// Jacobian of [`steady_residual`] with respect to `(θ_{i≠g}, v)`.
fn steady_jacobian(graph: &NetworkGraph, theta: &[f64], v: &[f64]) -> DMatrix<f64> {
    let n = graph.n();
    let gref = graph.reference();
    let th_col =
        |i: usize| -> Option<usize> { (i != gref).then(|| if i > gref { i - 1 } else { i }) };
    let p_row = th_col;
    let q_row = |i: usize| n - 1 + i;
    let v_col = |i: usize| n - 1 + i;
    let mut jac = DMatrix::zeros(2 * n - 1, 2 * n - 1);
    for i in 0..n {
        jac[(q_row(i), v_col(i))] += graph.node(i).k;
        for nb in graph.neighbors(i) {
            let j = nb.node;
            let line = &graph.lines()[nb.line];
            let (s, c) = (theta[i] - theta[j]).sin_cos();
            let (gl, bl) = (line.g, line.b);
            let vv = v[i] * v[j];
            // active flow P_ij and its partials
            let dp_dth = vv * (-gl * s + bl * c);
            let dp_dvi = v[j] * (gl * c + bl * s);
            let dp_dvj = v[i] * (gl * c + bl * s);
            // reactive flow Q_ij and its partials
            let dq_dth = vv * (gl * c + bl * s);
            let dq_dvi = v[j] * (gl * s - bl * c);
            let dq_dvj = v[i] * (gl * s - bl * c);
            if let Some(r) = p_row(i) {
                if let Some(ci) = th_col(i) {
                    jac[(r, ci)] += dp_dth;
                }
                if let Some(cj) = th_col(j) {
                    jac[(r, cj)] -= dp_dth;
                }
                jac[(r, v_col(i))] += dp_dvi;
                jac[(r, v_col(j))] += dp_dvj;
            }
            let r = q_row(i);
            if let Some(ci) = th_col(i) {
                jac[(r, ci)] += dq_dth;
            }
            if let Some(cj) = th_col(j) {
                jac[(r, cj)] -= dq_dth;
            }
            jac[(r, v_col(i))] += dq_dvi;
            jac[(r, v_col(j))] += dq_dvj;
        }
    }
    jac
}

fn max_line_angle(graph: &NetworkGraph, theta: &[f64]) -> f64 {
    graph
        .lines()
        .iter()
        .map(|l| (theta[l.from] - theta[l.to]).abs())
        .fold(0.0, f64::max)
}

/// Solve the steady equations by Newton iteration with the reference angle
/// pinned (at the start value, default 0). Flat start by default; a step is
/// halved while it fails to reduce the residual.
pub fn solve_synchronous_state(
    graph: &NetworkGraph,
    start: Option<&FullState>,
    opts: &NewtonOptions,
) -> Result<SynchronousState> {
    let n = graph.n();
    let gref = graph.reference();
    let (mut theta, mut v) = match start {
        Some(s) => {
            if s.n() != n {
                return Err(GridError::Dimension {
                    expected: n,
                    actual: s.n(),
                });
            }
            (s.theta.clone(), s.v.clone())
        }
        None => (vec![0.0; n], vec![1.0; n]),
    };
    let angle_nodes: Vec<usize> = (0..n).filter(|&i| i != gref).collect();

    let apply = |theta: &[f64], v: &[f64], dz: &DVector<f64>, alpha: f64| -> (Vec<f64>, Vec<f64>) {
        let mut th = theta.to_vec();
        let mut vv = v.to_vec();
        for (k, &i) in angle_nodes.iter().enumerate() {
            th[i] += alpha * dz[k];
        }
        for i in 0..n {
            vv[i] += alpha * dz[n - 1 + i];
        }
        (th, vv)
    };
    let newton_step = |theta: &[f64], v: &[f64], r: &[f64]| -> Option<DVector<f64>> {
        let jac = steady_jacobian(graph, theta, v);
        let rhs = -DVector::from_column_slice(r);
        jac.lu()
            .solve(&rhs)
            .filter(|dz| dz.iter().all(|x| x.is_finite()))
    };

    let mut r = steady_residual(graph, &theta, &v);
    let mut rnorm = inf_norm(&r);
    let mut history = vec![rnorm];
    let mut iterations = 0;
    while !(rnorm < opts.tol) {
        if iterations >= opts.max_iter || !rnorm.is_finite() {
            return Err(GridError::Convergence {
                iterations,
                residual: rnorm,
            });
        }
        let dz = newton_step(&theta, &v, &r).ok_or(GridError::Convergence {
            iterations,
            residual: rnorm,
        })?;
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let (th, vv) = apply(&theta, &v, &dz, alpha);
            if vv.iter().all(|x| *x > 0.0) {
                let rr = steady_residual(graph, &th, &vv);
                let nn = inf_norm(&rr);
                if nn < rnorm {
                    accepted = Some((th, vv, rr, nn));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let (th, vv, rr, nn) = accepted.ok_or(GridError::Convergence {
            iterations: iterations + 1,
            residual: rnorm,
        })?;
        theta = th;
        v = vv;
        r = rr;
        rnorm = nn;
        iterations += 1;
        history.push(rnorm);
    }
    if iterations > 0 {
        // a few extra full steps drive the residual to rounding level
        for _ in 0..3 {
            let Some(dz) = newton_step(&theta, &v, &r) else {
                break;
            };
            let (th, vv) = apply(&theta, &v, &dz, 1.0);
            let rr = steady_residual(graph, &th, &vv);
            let nn = inf_norm(&rr);
            if !(nn < 0.5 * rnorm) {
                break;
            }
            theta = th;
            v = vv;
            r = rr;
            rnorm = nn;
        }
    }
    for w in history.windows(2) {
        if w[0] > 0.0 && w[0] < 1.0 {
            log::debug!(
                "newton residual {:.3e} -> {:.3e} (ratio to square {:.3e})",
                w[0],
                w[1],
                w[1] / (w[0] * w[0])
            );
        }
    }

    if let Some(i) = v.iter().position(|x| !(*x > 0.0)) {
        return Err(GridError::AssumptionViolation(format!(
            "non-positive synchronous voltage at node {i}"
        )));
    }
    let max_angle = max_line_angle(graph, &theta);
    if !(max_angle < FRAC_PI_2) {
        return Err(GridError::AssumptionViolation(format!(
            "synchronous angle difference {max_angle:.6} rad reaches pi/2"
        )));
    }
    Ok(SynchronousState {
        theta_star: theta,
        v_star: v,
        omega_star: vec![0.0; n],
        p_inj: graph.p_inj(),
        q_inj: graph.q_inj(),
        residual_norm: rnorm,
        iterations,
        max_angle_difference: max_angle,
    })
}

/// Reduced deviation `x − x*`, dropping the reference angle slot.
pub fn to_deviation(
    graph: &NetworkGraph,
    x_abs: &FullState,
    x_star: &SynchronousState,
) -> Result<DeviationVector> {
    let n = graph.n();
    for len in [x_abs.n(), x_abs.omega.len(), x_abs.v.len(), x_star.n()] {
        if len != n {
            return Err(GridError::Dimension {
                expected: n,
                actual: len,
            });
        }
    }
    let layout = StateLayout::of(graph);
    let mut dev = DeviationVector::zeros(layout);
    for i in 0..n {
        if let Some(k) = layout.theta(i) {
            dev.values[k] = x_abs.theta[i] - x_star.theta_star[i];
        }
        dev.values[layout.omega(i)] = x_abs.omega[i] - x_star.omega_star[i];
        dev.values[layout.v(i)] = x_abs.v[i] - x_star.v_star[i];
    }
    Ok(dev)
}

/// Inverse of [`to_deviation`]; the reference angle is restored to its
/// synchronous value.
pub fn from_deviation(dev: &DeviationVector, x_star: &SynchronousState) -> Result<FullState> {
    let layout = dev.layout;
    if x_star.n() != layout.n {
        return Err(GridError::Dimension {
            expected: layout.n,
            actual: x_star.n(),
        });
    }
    let mut s = x_star.full_state();
    for i in 0..layout.n {
        s.theta[i] = x_star.theta_star[i] + dev.theta(i);
        s.omega[i] = x_star.omega_star[i] + dev.omega(i);
        s.v[i] = x_star.v_star[i] + dev.v(i);
    }
    Ok(s)
}

/// Deviation of an absolute state after aligning its reference angle with
/// the synchronous one (removes the uniform angle drift of the free model).
pub fn aligned_deviation(
    graph: &NetworkGraph,
    x_abs: &FullState,
    x_star: &SynchronousState,
) -> Result<DeviationVector> {
    let g = graph.reference();
    to_deviation(graph, &x_abs.aligned(g, x_star.theta_star[g]), x_star)
}
