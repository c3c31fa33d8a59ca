//! Distributed (block-local) and centralized LQR synthesis, quadratic costs
//! and the distributed-versus-centralized performance bound.

use log::{debug, warn};
use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{isolated_block, Feedback, OutputWeights, SystemMatrices};
use crate::error::{GridError, Result};
use crate::exec::Exec;
use crate::linalg::{
    block_diag, is_hurwitz, pbh_controllability_failures, pbh_detectability_failures,
    pbh_observability_failures, pbh_stabilizability_failures, solve_lyapunov, spectral_abscissa,
    spectral_norm, spectrum, symmetrize,
};
use crate::network::NetworkGraph;
use crate::steady_state::StateLayout;

/// Eigenvalues closer than this to the imaginary axis count as not stable in
/// the stabilizability and detectability checks.
const MARGINAL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LqrWeights {
    pub output: OutputWeights,
    pub q_u_omega: f64,
    pub q_u_v: f64,
}

impl Default for LqrWeights {
    fn default() -> Self {
        LqrWeights {
            output: OutputWeights::default(),
            q_u_omega: 1.0,
            q_u_v: 1.0,
        }
    }
}

impl LqrWeights {
    pub fn validate(&self) -> Result<()> {
        self.output.validate()?;
        if !(self.q_u_omega > 0.0 && self.q_u_v > 0.0) {
            return Err(GridError::Config(format!(
                "input weights must be positive (q_u_omega {}, q_u_v {})",
                self.q_u_omega, self.q_u_v
            )));
        }
        Ok(())
    }

    pub fn q_uu_block(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(vec![self.q_u_omega, self.q_u_v]))
    }

    pub fn q_uu(&self, n: usize) -> DMatrix<f64> {
        block_diag(&vec![self.q_uu_block(); n])
    }

    /// `C_outᵀ C_out`.
    pub fn q_xx(&self, sys: &SystemMatrices) -> DMatrix<f64> {
        sys.c_out.transpose() * &sys.c_out
    }

    /// Scale both input weights by `factor`.
    pub fn scaled_inputs(&self, factor: f64) -> Self {
        LqrWeights {
            q_u_omega: self.q_u_omega * factor,
            q_u_v: self.q_u_v * factor,
            ..*self
        }
    }
}

/// Result of a PBH test on one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockVerdict {
    pub block: usize,
    pub passed: bool,
    /// eigenvalues `(re, im)` at which the rank drops
    pub failing: Vec<(f64, f64)>,
}

fn verdicts(fails: impl Iterator<Item = Vec<Complex<f64>>>) -> Vec<BlockVerdict> {
    fails
        .enumerate()
        .map(|(block, f)| BlockVerdict {
            block,
            passed: f.is_empty(),
            failing: f.iter().map(|z| (z.re, z.im)).collect(),
        })
        .collect()
}

pub fn check_controllability(
    a_blocks: &[DMatrix<f64>],
    b_blocks: &[DMatrix<f64>],
) -> Vec<BlockVerdict> {
    verdicts(
        a_blocks
            .iter()
            .zip(b_blocks)
            .map(|(a, b)| pbh_controllability_failures(a, b)),
    )
}

pub fn check_observability(
    a_blocks: &[DMatrix<f64>],
    c_blocks: &[DMatrix<f64>],
) -> Vec<BlockVerdict> {
    verdicts(
        a_blocks
            .iter()
            .zip(c_blocks)
            .map(|(a, c)| pbh_observability_failures(a, c)),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub p: DMatrix<f64>,
    /// Frobenius norm of the CARE residual
    pub residual_norm: f64,
    pub stabilizing: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CareOptions {
    pub max_iter: usize,
    /// converged when the residual is below `tol · (1 + ‖P‖_F)`
    pub tol: f64,
}

impl Default for CareOptions {
    fn default() -> Self {
        CareOptions {
            max_iter: 100,
            tol: 1e-10,
        }
    }
}

/// `‖PA + AᵀP + Q − P B R⁻¹ Bᵀ P‖_F`.
pub fn care_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<f64> {
    let r_inv = spd_inverse(r)?;
    let pb = p * b;
    Ok((p * a + a.transpose() * p + q - &pb * r_inv * pb.transpose()).norm())
}

fn spd_inverse(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    r.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| GridError::Structure("input weight is not positive definite".into()))
}

/// Stabilizing gain `F` (for `u = F x`) by the Bass eigenvalue-shift
/// construction; requires `(A, B)` controllable. The closed loop has every
/// eigenvalue on `Re λ = −α`.
pub fn bass_gain(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    // −(A + αI) must be Hurwitz
    let alpha = spectrum(a).iter().map(|z| -z.re).fold(0.0, f64::max) + 1.0;
    let shifted = a + DMatrix::identity(n, n) * alpha;
    // (A + αI) Z + Z (A + αI)ᵀ = 2 B Bᵀ
    let z = solve_lyapunov(&shifted.transpose(), &(b * b.transpose() * -2.0))?;
    let z_inv = z.cholesky().map(|c| c.inverse()).ok_or_else(|| {
        GridError::Structure("shifted controllability Gramian is singular".into())
    })?;
    Ok(-(b.transpose() * z_inv))
}

/// Stabilizing solution of `PA + AᵀP + Q − P B R⁻¹ Bᵀ P = 0` by
/// Newton–Kleinman iteration. `seed` is a gain `F` with `A + BF` Hurwitz;
/// when absent or not stabilizing, `F = 0` is used for Hurwitz `A` and the
/// Bass gain otherwise.
pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    seed: Option<&DMatrix<f64>>,
    opts: &CareOptions,
) -> Result<RiccatiSolution> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) {
        return Err(GridError::Dimension {
            expected: n,
            actual: b.nrows(),
        });
    }
    if r.shape() != (b.ncols(), b.ncols()) {
        return Err(GridError::Dimension {
            expected: b.ncols(),
            actual: r.nrows(),
        });
    }
    let r_inv = spd_inverse(r)?;
    let stab_fail = pbh_stabilizability_failures(a, b, MARGINAL);
    if !stab_fail.is_empty() {
        return Err(GridError::Structure(format!(
            "(A, B) not stabilizable at {:?}",
            stab_fail
        )));
    }
    let det_fail = pbh_detectability_failures(a, q, MARGINAL);
    if !det_fail.is_empty() {
        return Err(GridError::Structure(format!(
            "(A, Q) not detectable at {:?}",
            det_fail
        )));
    }
    let mut f = match seed {
        Some(f0) if f0.shape() == (b.ncols(), n) && is_hurwitz(&(a + b * f0)) => f0.clone(),
        _ if is_hurwitz(a) => DMatrix::zeros(b.ncols(), n),
        _ => bass_gain(a, b)?,
    };
    let mut residual = f64::INFINITY;
    let mut best: Option<(DMatrix<f64>, f64, usize)> = None;
    for it in 1..=opts.max_iter {
        let acl = a + b * &f;
        let qk = q + f.transpose() * r * &f;
        let p = symmetrize(&solve_lyapunov(&acl, &qk)?);
        f = -(&r_inv * b.transpose() * &p);
        residual = care_residual(a, b, q, r, &p)?;
        debug!("newton-kleinman step {it}: residual {residual:e}");
        if let Some((_, prev, first)) = &best {
            // polishing: stop once the quadratic phase has reached roundoff
            if residual > 0.5 * prev || it >= first + POLISH_STEPS {
                let (p, residual, it) = if residual < *prev {
                    (p, residual, it)
                } else {
                    best.unwrap()
                };
                return Ok(finish(a, b, &r_inv, p, residual, it));
            }
            best = Some((p, residual, *first));
        } else if residual <= opts.tol * (1.0 + p.norm()) {
            best = Some((p, residual, it));
        }
    }
    if let Some((p, residual, it)) = best {
        return Ok(finish(a, b, &r_inv, p, residual, it));
    }
    Err(GridError::Iteration {
        iterations: opts.max_iter,
        residual,
    })
}

/// Extra Newton steps taken after the tolerance is met.
const POLISH_STEPS: usize = 3;

fn finish(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r_inv: &DMatrix<f64>,
    p: DMatrix<f64>,
    residual: f64,
    it: usize,
) -> RiccatiSolution {
    let stabilizing = is_hurwitz(&(a - b * r_inv * b.transpose() * &p));
    RiccatiSolution {
        p,
        residual_norm: residual,
        stabilizing,
        iterations: it,
    }
}

/// LQR gain `F = −R⁻¹ Bᵀ P`.
pub fn lqr_gain(b: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(-(spd_inverse(r)? * b.transpose() * p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributedGains {
    pub layout: StateLayout,
    /// `F_{d,i}` per node
    pub blocks: Vec<DMatrix<f64>>,
    pub riccati: Vec<RiccatiSolution>,
    /// closed-loop spectra of the isolated blocks
    pub block_spectra: Vec<Vec<Complex<f64>>>,
}

impl DistributedGains {
    pub fn feedback(&self) -> Feedback {
        Feedback::BlockDiagonal {
            layout: self.layout,
            blocks: self.blocks.clone(),
        }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        self.feedback()
            .to_dense(2 * self.layout.n, self.layout.dim())
    }

    /// `Σ_i x̃_iᵀ P_i x̃_i`, the sum of the isolated block costs.
    pub fn isolated_cost(&self, x0: &DVector<f64>) -> f64 {
        (0..self.layout.n)
            .map(|i| {
                let xi = x0
                    .rows(self.layout.offset(i), self.layout.block_len(i))
                    .clone_owned();
                (xi.transpose() * &self.riccati[i].p * &xi)[(0, 0)]
            })
            .sum()
    }
}

/// Per-node CARE solves on the isolated blocks.
pub fn distributed_gains(
    graph: &NetworkGraph,
    weights: &LqrWeights,
    exec: Exec,
) -> Result<DistributedGains> {
    weights.validate()?;
    let layout = StateLayout::of(graph);
    let r = weights.q_uu_block();
    let results = exec.map(
        graph.n(),
        |i| -> Result<(DMatrix<f64>, RiccatiSolution, Vec<Complex<f64>>)> {
            let at_node = |e: GridError| GridError::AtNode {
                node: i,
                source: Box::new(e),
            };
            let (a, b, c) = isolated_block(graph, i, &weights.output);
            let ctrl = pbh_controllability_failures(&a, &b);
            if !ctrl.is_empty() {
                return Err(at_node(GridError::Structure(format!(
                    "block not controllable at {ctrl:?}"
                ))));
            }
            let obs = pbh_observability_failures(&a, &c);
            if !obs.is_empty() {
                warn!("node {i}: block not observable at {obs:?}");
            }
            let q = c.transpose() * &c;
            let sol = solve_care(&a, &b, &q, &r, None, &CareOptions::default()).map_err(at_node)?;
            let f = lqr_gain(&b, &r, &sol.p).map_err(at_node)?;
            let spec = spectrum(&(&a + &b * &f));
            Ok((f, sol, spec))
        },
    );
    let mut out = DistributedGains {
        layout,
        blocks: Vec::new(),
        riccati: Vec::new(),
        block_spectra: Vec::new(),
    };
    for res in results {
        let (f, sol, spec) = res?;
        out.blocks.push(f);
        out.riccati.push(sol);
        out.block_spectra.push(spec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralizedGain {
    pub f: DMatrix<f64>,
    /// `Q̃`, the stabilizing CARE solution of the coupled system
    pub riccati: RiccatiSolution,
}

/// Full-size CARE on `(A_sys, B)`; `seed` is tried first as the initial gain.
pub fn centralized_gain(
    a_sys: &DMatrix<f64>,
    sys: &SystemMatrices,
    weights: &LqrWeights,
    seed: Option<&DMatrix<f64>>,
) -> Result<CentralizedGain> {
    weights.validate()?;
    let q = weights.q_xx(sys);
    let r = weights.q_uu(sys.layout.n);
    let riccati = solve_care(a_sys, &sys.b, &q, &r, seed, &CareOptions::default())?;
    let f = lqr_gain(&sys.b, &r, &riccati.p)?;
    Ok(CentralizedGain { f, riccati })
}

/// `β = −2 max Re λ(A_cl)`; positive iff `A_cl` is Hurwitz.
pub fn decay_margin(a_cl: &DMatrix<f64>) -> f64 {
    -2.0 * spectral_abscissa(a_cl)
}

/// Infinite-horizon cost `x0ᵀ P x0` with `A_clᵀ P + P A_cl + Q_eff = 0`.
pub fn evaluate_cost(a_cl: &DMatrix<f64>, q_eff: &DMatrix<f64>, x0: &DVector<f64>) -> Result<f64> {
    let p = cost_matrix(a_cl, q_eff)?;
    Ok((x0.transpose() * p * x0)[(0, 0)])
}

pub fn cost_matrix(a_cl: &DMatrix<f64>, q_eff: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let abscissa = spectral_abscissa(a_cl);
    if !(abscissa < 0.0) {
        return Err(GridError::Stability(format!(
            "closed loop has spectral abscissa {abscissa:e}"
        )));
    }
    solve_lyapunov(a_cl, q_eff)
}

/// `Q_xx + Fᵀ Q_uu F`.
pub fn closed_loop_weight(
    q_xx: &DMatrix<f64>,
    q_uu: &DMatrix<f64>,
    f: &DMatrix<f64>,
) -> DMatrix<f64> {
    q_xx + f.transpose() * q_uu * f
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceComparison {
    /// cost of the coupled linear system under the distributed gain
    pub j_d: f64,
    pub j_c: f64,
    pub gap: f64,
    pub bound: f64,
    pub beta_d: f64,
    pub holds: bool,
}

/// Absolute slack on the bound comparison.
pub const BOUND_SLACK: f64 = 1e-9;

/// `‖(F_d − F_c)ᵀ Q_uu (F_d − F_c)‖₂ / β · ‖x0‖²`.
pub fn performance_bound(
    f_d: &DMatrix<f64>,
    f_c: &DMatrix<f64>,
    q_uu: &DMatrix<f64>,
    beta: f64,
    x0: &DVector<f64>,
) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(GridError::Stability(format!(
            "decay margin {beta:e} is not positive"
        )));
    }
    let delta = f_d - f_c;
    let rp = delta.transpose() * q_uu * &delta;
    Ok(spectral_norm(&rp) / beta * x0.norm_squared())
}

/// Both costs on `Ã`, the gap and the bound for one initial deviation.
pub fn compare_performance(
    a_tilde: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q_xx: &DMatrix<f64>,
    q_uu: &DMatrix<f64>,
    f_d: &DMatrix<f64>,
    central: &CentralizedGain,
    x0: &DVector<f64>,
) -> Result<PerformanceComparison> {
    let a_cl = a_tilde + b * f_d;
    let beta_d = decay_margin(&a_cl);
    let bound = performance_bound(f_d, &central.f, q_uu, beta_d, x0)?;
    let j_d = evaluate_cost(&a_cl, &closed_loop_weight(q_xx, q_uu, f_d), x0)?;
    let j_c = (x0.transpose() * &central.riccati.p * x0)[(0, 0)];
    let gap = j_d - j_c;
    let holds = gap >= -BOUND_SLACK && gap <= bound + BOUND_SLACK;
    Ok(PerformanceComparison {
        j_d,
        j_c,
        gap,
        bound,
        beta_d,
        holds,
    })
}

/// Largest `‖exp(A t)‖₂² e^{βt}` over `t = k·dt`, `k = 0..=steps`; equals 1
/// for normal `A`.
pub fn exp_bound_factor(a_cl: &DMatrix<f64>, beta: f64, dt: f64, steps: usize) -> f64 {
    let step = (a_cl * dt).exp();
    let mut e = DMatrix::identity(a_cl.nrows(), a_cl.ncols());
    let mut kappa = 1.0_f64;
    for k in 1..=steps {
        e = &step * e;
        let t = k as f64 * dt;
        kappa = kappa.max(spectral_norm(&e).powi(2) * (beta * t).exp());
    }
    kappa
}
