//! Energy-function stability certificate for the open-loop synchronous state.
//!
//! The candidate Lyapunov function is kinetic energy plus the potential
//! `U(θ, v) = Σ_i (−P_i θ_i + k_i v_i − Q_i ln v_i) − Σ_lines b_ij v_i v_j cos θ_ij`
//! measured relative to the synchronous state. Each line enters `U` once.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GridError, Result};
use crate::exec::Exec;
use crate::linalg::{lambda_max, lambda_min, sym_eigenvalues, sym_spectral_norm};
use crate::network::{validate_static, NetworkGraph};
use crate::steady_state::{DeviationVector, FullState, StateLayout, SynchronousState};

/// Strict positive-definiteness floor for eigenvalue checks.
pub const PD_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Skipped,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn passed(self) -> bool {
        self == Verdict::Pass
    }
}

/// Second derivatives of `V` at the synchronous state, split by variable group.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianBlocks {
    /// angle block over the non-reference nodes
    pub v_tt: DMatrix<f64>,
    pub v_vv: DMatrix<f64>,
    /// angle rows (non-reference nodes) against voltage columns
    pub v_tv: DMatrix<f64>,
    pub v_ww: DMatrix<f64>,
    /// `[V_tt, V_tv; V_tvᵀ, V_vv]`
    pub g: DMatrix<f64>,
}

struct Point {
    theta: Vec<f64>,
    omega: Vec<f64>,
    v: Vec<f64>,
}

fn point_at(
    graph: &NetworkGraph,
    x_star: &SynchronousState,
    dev: &DeviationVector,
) -> Result<Point> {
    let n = graph.n();
    if dev.layout.n != n || dev.values.len() != 3 * n - 1 || x_star.n() != n {
        return Err(GridError::Dimension {
            expected: 3 * n - 1,
            actual: dev.values.len(),
        });
    }
    let mut p = Point {
        theta: vec![0.0; n],
        omega: vec![0.0; n],
        v: vec![0.0; n],
    };
    for i in 0..n {
        p.theta[i] = x_star.theta_star[i] + dev.theta(i);
        p.omega[i] = dev.omega(i);
        p.v[i] = x_star.v_star[i] + dev.v(i);
        if !(p.v[i] > 0.0) {
            return Err(GridError::Domain(format!(
                "non-positive voltage {} at node {i}",
                p.v[i]
            )));
        }
    }
    Ok(p)
}

/// `∇²V` at an arbitrary deviation, in the reduced state layout.
pub fn lyapunov_hessian(
    graph: &NetworkGraph,
    x_star: &SynchronousState,
    dev: &DeviationVector,
) -> Result<DMatrix<f64>> {
    let pt = point_at(graph, x_star, dev)?;
    let layout = dev.layout;
    let mut h = DMatrix::zeros(layout.dim(), layout.dim());
    for i in 0..graph.n() {
        let node = graph.node(i);
        h[(layout.omega(i), layout.omega(i))] = node.m;
        h[(layout.v(i), layout.v(i))] += node.q_inj() / (pt.v[i] * pt.v[i]);
    }
    for line in graph.lines() {
        let (i, j) = (line.from, line.to);
        let b = line.b;
        let (s, c) = (pt.theta[i] - pt.theta[j]).sin_cos();
        let (vi, vj) = (pt.v[i], pt.v[j]);
        let (ti, tj) = (layout.theta(i), layout.theta(j));
        let (ui, uj) = (layout.v(i), layout.v(j));
        let ctt = b * vi * vj * c;
        if let Some(ti) = ti {
            h[(ti, ti)] += ctt;
        }
        if let Some(tj) = tj {
            h[(tj, tj)] += ctt;
        }
        if let (Some(ti), Some(tj)) = (ti, tj) {
            h[(ti, tj)] -= ctt;
            h[(tj, ti)] -= ctt;
        }
        h[(ui, uj)] -= b * c;
        h[(uj, ui)] -= b * c;
        // ∂²/∂θ_i∂v_i = Σ b v_j sin θ_ij ; ∂²/∂θ_i∂v_j = b v_i sin θ_ij (θ_ji = −θ_ij)
        if let Some(ti) = ti {
            h[(ti, ui)] += b * vj * s;
            h[(ui, ti)] += b * vj * s;
            h[(ti, uj)] += b * vi * s;
            h[(uj, ti)] += b * vi * s;
        }
        if let Some(tj) = tj {
            h[(tj, uj)] -= b * vi * s;
            h[(uj, tj)] -= b * vi * s;
            h[(tj, ui)] -= b * vj * s;
            h[(ui, tj)] -= b * vj * s;
        }
    }
    Ok(h)
}

/// Hessian blocks at the synchronous state.
pub fn build_hessian_blocks(graph: &NetworkGraph, x_star: &SynchronousState) -> HessianBlocks {
    let layout = StateLayout::of(graph);
    let h = lyapunov_hessian(graph, x_star, &DeviationVector::zeros(layout))
        .expect("synchronous voltages are positive");
    let angle_nodes = layout.angle_nodes();
    let n = graph.n();
    let t_idx: Vec<usize> = angle_nodes
        .iter()
        .map(|&i| layout.theta(i).unwrap())
        .collect();
    let v_idx: Vec<usize> = (0..n).map(|i| layout.v(i)).collect();
    let w_idx: Vec<usize> = (0..n).map(|i| layout.omega(i)).collect();
    let pick = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |r, c| h[(rows[r], cols[c])])
    };
    let v_tt = pick(&t_idx, &t_idx);
    let v_vv = pick(&v_idx, &v_idx);
    let v_tv = pick(&t_idx, &v_idx);
    let v_ww = pick(&w_idx, &w_idx);
    let nt = t_idx.len();
    let mut g = DMatrix::zeros(nt + n, nt + n);
    g.view_mut((0, 0), (nt, nt)).copy_from(&v_tt);
    g.view_mut((0, nt), (nt, n)).copy_from(&v_tv);
    g.view_mut((nt, 0), (n, nt)).copy_from(&v_tv.transpose());
    g.view_mut((nt, nt), (n, n)).copy_from(&v_vv);
    HessianBlocks {
        v_tt,
        v_vv,
        v_tv,
        v_ww,
        g,
    }
}

/// Place the blocks into the reduced state ordering.
pub fn assemble_hessian(blocks: &HessianBlocks, layout: StateLayout) -> DMatrix<f64> {
    let n = layout.n;
    let angle_nodes = layout.angle_nodes();
    let mut h = DMatrix::zeros(layout.dim(), layout.dim());
    for (a, &i) in angle_nodes.iter().enumerate() {
        let ti = layout.theta(i).unwrap();
        for (b, &j) in angle_nodes.iter().enumerate() {
            h[(ti, layout.theta(j).unwrap())] = blocks.v_tt[(a, b)];
        }
        for j in 0..n {
            h[(ti, layout.v(j))] = blocks.v_tv[(a, j)];
            h[(layout.v(j), ti)] = blocks.v_tv[(a, j)];
        }
    }
    for i in 0..n {
        for j in 0..n {
            h[(layout.v(i), layout.v(j))] = blocks.v_vv[(i, j)];
            h[(layout.omega(i), layout.omega(j))] = blocks.v_ww[(i, j)];
        }
    }
    h
}

/// Analytic gradient of `V` at a deviation.
pub fn lyapunov_gradient(
    graph: &NetworkGraph,
    x_star: &SynchronousState,
    dev: &DeviationVector,
) -> Result<DVector<f64>> {
    let pt = point_at(graph, x_star, dev)?;
    let layout = dev.layout;
    let mut grad = DVector::zeros(layout.dim());
    for i in 0..graph.n() {
        let node = graph.node(i);
        if let Some(t) = layout.theta(i) {
            grad[t] -= node.p_inj();
        }
        grad[layout.omega(i)] = node.m * pt.omega[i];
        grad[layout.v(i)] += node.k - node.q_inj() / pt.v[i];
    }
    for line in graph.lines() {
        let (i, j) = (line.from, line.to);
        let (s, c) = (pt.theta[i] - pt.theta[j]).sin_cos();
        let b = line.b;
        if let Some(t) = layout.theta(i) {
            grad[t] += b * pt.v[i] * pt.v[j] * s;
        }
        if let Some(t) = layout.theta(j) {
            grad[t] -= b * pt.v[i] * pt.v[j] * s;
        }
        grad[layout.v(i)] -= b * pt.v[j] * c;
        grad[layout.v(j)] -= b * pt.v[i] * c;
    }
    Ok(grad)
}

/// Lyapunov function value at a deviation; exactly zero at the origin.
pub fn lyapunov_value(
    graph: &NetworkGraph,
    x_star: &SynchronousState,
    dev: &DeviationVector,
) -> Result<f64> {
    let pt = point_at(graph, x_star, dev)?;
    let mut v = 0.0;
    for i in 0..graph.n() {
        let node = graph.node(i);
        let dv = dev.v(i);
        v += 0.5 * node.m * pt.omega[i] * pt.omega[i];
        v += node.k * dv
            - node.q_inj() * (dv / x_star.v_star[i]).ln_1p()
            - node.p_inj() * dev.theta(i);
    }
    for line in graph.lines() {
        let (i, j) = (line.from, line.to);
        let th_star = x_star.theta_star[i] - x_star.theta_star[j];
        let th = pt.theta[i] - pt.theta[j];
        let dcos = -2.0 * (0.5 * (th + th_star)).sin() * (0.5 * (th - th_star)).sin();
        let (vi_s, vj_s) = (x_star.v_star[i], x_star.v_star[j]);
        let (dvi, dvj) = (dev.v(i), dev.v(j));
        let dprod = dvi * vj_s + vi_s * dvj + dvi * dvj;
        v -= line.b * (pt.v[i] * pt.v[j] * dcos + dprod * th_star.cos());
    }
    Ok(v)
}

/// Closed-form time derivative `−Σ (d_i ω_i² + (τ_i / v_i) v̇_i²)` along the
/// uncontrolled dynamics.
pub fn lyapunov_derivative(graph: &NetworkGraph, x: &FullState, xdot: &FullState) -> Result<f64> {
    let n = graph.n();
    if x.n() != n || xdot.n() != n {
        return Err(GridError::Dimension {
            expected: n,
            actual: x.n().min(xdot.n()),
        });
    }
    let mut acc = 0.0;
    for i in 0..n {
        if !(x.v[i] > 0.0) {
            return Err(GridError::Domain(format!(
                "non-positive voltage {} at node {i}",
                x.v[i]
            )));
        }
        let node = graph.node(i);
        acc += node.d * x.omega[i] * x.omega[i] + node.tau / x.v[i] * xdot.v[i] * xdot.v[i];
    }
    Ok(-acc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzOptions {
    pub n_samples: usize,
    pub seed: u64,
    pub safety: f64,
    pub exec: Exec,
}

impl Default for LipschitzOptions {
    fn default() -> Self {
        LipschitzOptions {
            n_samples: 48,
            seed: 0,
            safety: 1.5,
            exec: Exec::default(),
        }
    }
}

/// Uniform sample from the ball of radius `r` in dimension `dim`.
pub fn sample_ball(rng: &mut impl Rng, dim: usize, r: f64) -> Vec<f64> {
    let dir: Vec<f64> = (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    let radius = r * rng.random::<f64>().powf(1.0 / dim as f64);
    dir.into_iter().map(|x| x * radius / norm).collect()
}

/// Sampled Lipschitz constant of `∇²V` over the `r`-ball (spectral norm),
/// scaled by the safety factor. This is an estimate, not a bound.
pub fn estimate_lipschitz(
    graph: &NetworkGraph,
    x_star: &SynchronousState,
    r: f64,
    opts: &LipschitzOptions,
) -> Result<f64> {
    if !(r > 0.0) {
        return Err(GridError::Range(format!("radius {r} must be positive")));
    }
    let layout = StateLayout::of(graph);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..opts.n_samples)
        .map(|_| {
            (
                sample_ball(&mut rng, layout.dim(), r),
                sample_ball(&mut rng, layout.dim(), r),
            )
        })
        .collect();
    let ratios = opts.exec.map(pairs.len(), |k| -> Result<f64> {
        let (x, y) = &pairs[k];
        let hx = lyapunov_hessian(
            graph,
            x_star,
            &DeviationVector::from_values(layout, x.clone())?,
        )?;
        let hy = lyapunov_hessian(
            graph,
            x_star,
            &DeviationVector::from_values(layout, y.clone())?,
        )?;
        let dist = x
            .iter()
            .zip(y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        Ok(if dist > 0.0 {
            sym_spectral_norm(&(hx - hy)) / dist
        } else {
            0.0
        })
    });
    let mut best = 0.0_f64;
    for r in ratios {
        best = best.max(r?);
    }
    Ok(opts.safety * best)
}

/// Quadratic-bound constants of the local stability region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionConstants {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lipschitz: f64,
    pub r: f64,
    pub c1: f64,
    pub c2: f64,
}

impl RegionConstants {
    /// Initial-deviation radius that keeps trajectories inside the `eps`-ball.
    pub fn delta(&self, eps: f64) -> f64 {
        (self.c1 / self.c2).sqrt() * eps.min(self.r)
    }
}

pub fn region_constants(
    lambda_min: f64,
    lambda_max: f64,
    lipschitz: f64,
    r: f64,
) -> Result<RegionConstants> {
    let limit = if lipschitz > 0.0 {
        3.0 * lambda_min / lipschitz
    } else {
        f64::INFINITY
    };
    if !(r > 0.0 && r < limit) {
        return Err(GridError::Range(format!("radius {r} outside (0, {limit})")));
    }
    let c1 = 0.5 * lambda_min - lipschitz * r / 6.0;
    let c2 = 0.5 * lambda_max + lipschitz * r / 6.0;
    Ok(RegionConstants {
        lambda_min,
        lambda_max,
        lipschitz,
        r,
        c1,
        c2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateClause {
    pub name: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    /// squared Frobenius norm of the angle-voltage cross block
    #[serde(rename = "C1")]
    pub cross_term: f64,
    /// Gershgorin voltage margin times the smallest angle eigenvalue
    #[serde(rename = "C")]
    pub margin: f64,
    /// `min_i (Q_i / v_i² − Σ_j b_ij cos θ_ij)`
    pub gershgorin_vvv: f64,
    pub lambda_min_vtt: f64,
    pub lambda_min_vvv: f64,
    pub lambda_min_g: f64,
    pub lambda_min_hessian: f64,
    pub lambda_max_hessian: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<RegionConstants>,
    pub lipschitz_is_estimate: bool,
    pub clauses: Vec<CertificateClause>,
    pub sufficient: Verdict,
    pub direct: Verdict,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertificateOptions {
    pub lipschitz: LipschitzOptions,
    /// `r` as a fraction of its admissible upper limit `3 λ_min / L`.
    pub r_fraction: f64,
    /// estimate `L` and the region constants (the costly part)
    pub region: bool,
}

impl Default for CertificateOptions {
    fn default() -> Self {
        CertificateOptions {
            lipschitz: LipschitzOptions::default(),
            r_fraction: 0.5,
            region: true,
        }
    }
}

/// Evaluate the sufficient stability conditions and the direct eigenvalue
/// check, and when the Hessian is positive definite derive the local
/// region constants.
pub fn check_certificate(
    blocks: &HessianBlocks,
    graph: &NetworkGraph,
    x_star: &SynchronousState,
    opts: &CertificateOptions,
) -> StabilityCertificate {
    let n = graph.n();
    let mut clauses = Vec::new();
    let mut push = |name: &str, ok: bool, detail: String| {
        clauses.push(CertificateClause {
            name: name.into(),
            verdict: Verdict::from_bool(ok),
            detail,
        });
    };

    let stat = validate_static(graph);
    for name in ["radial_tree", "lossless", "susceptance_positive"] {
        if let Some(c) = stat.clause(name) {
            push(name, c.passed, c.offenders.join("; "));
        }
    }
    let angle_ok = x_star.max_angle_difference < std::f64::consts::FRAC_PI_2;
    push(
        "angle_differences_below_pi_over_2",
        angle_ok,
        format!("max {:.6}", x_star.max_angle_difference),
    );
    let params_ok = stat.clause("parameters_positive").is_some_and(|c| c.passed)
        && x_star.v_star.iter().all(|v| *v > 0.0);
    push("parameters_and_voltages_positive", params_ok, String::new());
    let inertia_ok = stat.clause("inertia_ordering").is_some_and(|c| c.passed);
    push("inertia_ordering", inertia_ok, String::new());

    let lambda_min_vtt = lambda_min(&blocks.v_tt);
    let lambda_min_vvv = lambda_min(&blocks.v_vv);
    let lambda_min_g = lambda_min(&blocks.g);
    push(
        "angle_block_positive_definite",
        lambda_min_vtt > PD_FLOOR,
        format!("lambda_min {lambda_min_vtt:.6e}"),
    );
    push(
        "voltage_block_positive_definite",
        lambda_min_vvv > PD_FLOOR,
        format!("lambda_min {lambda_min_vvv:.6e}"),
    );

    let cross_term = blocks.v_tv.iter().map(|x| x * x).sum::<f64>();
    let mut gershgorin_vvv = f64::INFINITY;
    for i in 0..n {
        let row_off: f64 = graph
            .neighbors(i)
            .iter()
            .map(|nb| {
                graph.lines()[nb.line].b * (x_star.theta_star[i] - x_star.theta_star[nb.node]).cos()
            })
            .sum();
        gershgorin_vvv = gershgorin_vvv.min(blocks.v_vv[(i, i)] - row_off);
    }
    let margin = gershgorin_vvv * lambda_min_vtt;
    push(
        "margin_exceeds_cross_term",
        margin > cross_term && cross_term > 0.0,
        format!("C = {margin:.6e}, C1 = {cross_term:.6e}"),
    );
    let sufficient = Verdict::from_bool(clauses.iter().all(|c| c.verdict.passed()));
    let direct = Verdict::from_bool(lambda_min_g > PD_FLOOR);

    let m_min = graph
        .nodes()
        .iter()
        .map(|nd| nd.m)
        .fold(f64::INFINITY, f64::min);
    let m_max = graph
        .nodes()
        .iter()
        .map(|nd| nd.m)
        .fold(f64::NEG_INFINITY, f64::max);
    let g_max = lambda_max(&blocks.g);
    let lambda_min_hessian = lambda_min_g.min(m_min);
    let lambda_max_hessian = g_max.max(m_max);

    let region = if opts.region && direct.passed() && lambda_min_hessian > PD_FLOOR {
        region_for(graph, x_star, lambda_min_hessian, lambda_max_hessian, opts)
    } else {
        None
    };

    StabilityCertificate {
        cross_term,
        margin,
        gershgorin_vvv,
        lambda_min_vtt,
        lambda_min_vvv,
        lambda_min_g,
        lambda_min_hessian,
        lambda_max_hessian,
        region,
        lipschitz_is_estimate: true,
        clauses,
        sufficient,
        direct,
    }
}

fn region_for(
    graph: &NetworkGraph,
    x_star: &SynchronousState,
    lmin: f64,
    lmax: f64,
    opts: &CertificateOptions,
) -> Option<RegionConstants> {
    let vmin = x_star.v_star.iter().copied().fold(f64::INFINITY, f64::min);
    let mut radius = 0.05 * vmin;
    let mut lip = 0.0;
    let mut r = radius;
    // the sampled constant over a ball also bounds every smaller ball
    for _ in 0..6 {
        lip = estimate_lipschitz(graph, x_star, radius, &opts.lipschitz).ok()?;
        r = if lip > 0.0 {
            opts.r_fraction * 3.0 * lmin / lip
        } else {
            radius
        };
        if r <= radius {
            break;
        }
        radius = r;
    }
    region_constants(lmin, lmax, lip, r.min(radius)).ok()
}

/// Eigenvalues of `G`, exposed for reports and tests.
pub fn g_spectrum(blocks: &HessianBlocks) -> Vec<f64> {
    sym_eigenvalues(&blocks.g)
}
