//! `gridlevels` command-line runner.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use gridlevels::dynamics::build_linearized;
use gridlevels::network::{validate_static, NetworkGraph};
use gridlevels::scenario::{
    costs_from_gains, run_batch, run_scenario, scenario_gains, scenario_graph, scenario_steady,
    simulate_summary, Artifacts, ControllerKind, GainsArtifact, Scenario, StageError,
};
use gridlevels::stability::{build_hessian_blocks, check_certificate, Verdict};
use gridlevels::steady_state::{StateLayout, SynchronousState};
use gridlevels::{Exec, GridError};

const DEFAULT_SCENARIO: &str = include_str!("../scenarios/default.toml");

#[derive(Parser, Debug)]
#[command(
    name = "gridlevels",
    version,
    about = "Multi-level grid stability and LQR scenario runner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// scenario file (defaults to the bundled scenario)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// output directory for artifacts
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// number of batch seeds
    #[arg(long, global = true)]
    seeds: Option<usize>,
    /// worker threads (0 = all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// controller to simulate: open, distributed or central
    #[arg(long, global = true, value_parser = parse_controller)]
    controller: Option<ControllerKind>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// build or load the network and write graph.toml
    Build,
    /// solve the synchronous state and write steady.toml
    Steady,
    /// evaluate the stability certificate and write certificate.toml
    Certify,
    /// synthesize distributed and central gains and write gains.toml
    Gains,
    /// simulate the nonlinear model and write the trace CSV
    Simulate,
    /// evaluate costs and the performance bound and write compare.toml
    Compare,
    /// run the simulation over many perturbation seeds and write batch.toml
    Batch,
    /// run every stage and write report.toml
    Run,
    /// print the bundled default scenario
    DefaultConfig,
}

fn parse_controller(s: &str) -> Result<ControllerKind, String> {
    s.parse().map_err(|e: GridError| e.to_string())
}

/// Failure with the stage it happened in.
struct Failure {
    stage: String,
    message: String,
    code: i32,
}

impl Failure {
    fn at(stage: &str) -> impl Fn(GridError) -> Failure + '_ {
        move |e| Failure {
            stage: stage.into(),
            message: e.to_string(),
            code: e.exit_code(),
        }
    }
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        Failure {
            stage: e.stage,
            message: format!("{}: {}", e.kind, e.message),
            code: e.exit_code,
        }
    }
}

type Outcome = Result<(), Failure>;

fn load_scenario(cli: &Cli) -> Result<Scenario, GridError> {
    let mut s = match &cli.config {
        Some(p) => Scenario::load(p)?,
        None => Scenario::from_toml_str(DEFAULT_SCENARIO)?,
    };
    if let Some(c) = cli.controller {
        s.sim.controller = c;
    }
    if let Some(n) = cli.seeds {
        s.batch.seeds = n;
    }
    if let Some(w) = cli.workers {
        s.batch.workers = w;
    }
    if let Some(o) = &cli.out {
        s.outputs.dir = Some(o.clone());
    }
    s.validate()?;
    Ok(s)
}

struct Context {
    scenario: Scenario,
    artifacts: Artifacts,
    exec: Exec,
}

impl Context {
    fn graph(&self) -> Result<NetworkGraph, Failure> {
        scenario_graph(&self.scenario, Some(&self.artifacts)).map_err(Failure::at("build"))
    }

    fn steady(&self, graph: &NetworkGraph) -> Result<SynchronousState, Failure> {
        scenario_steady(graph, Some(&self.artifacts)).map_err(Failure::at("steady_state"))
    }

    fn gains(
        &self,
        graph: &NetworkGraph,
        x_star: &SynchronousState,
    ) -> Result<GainsArtifact, Failure> {
        if let Some(g) = self.artifacts.load_gains().map_err(Failure::at("gains"))? {
            if g.distributed.len() == graph.n() {
                info!("using gains from {}", self.artifacts.gains_path().display());
                return Ok(g);
            }
        }
        let sys = build_linearized(graph, x_star, &self.scenario.weights.output)
            .map_err(Failure::at("matrices"))?;
        let g = scenario_gains(&sys, graph, &self.scenario.weights, self.exec)
            .map_err(Failure::at("gains"))?;
        Ok(GainsArtifact::from_gains(&g))
    }

    fn write<T: serde::Serialize>(&self, stage: &str, path: &Path, value: &T) -> Outcome {
        self.artifacts
            .write(path, value)
            .map_err(Failure::at(stage))?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

fn verdict(v: Verdict) -> &'static str {
    match v {
        Verdict::Pass => "pass",
        Verdict::Fail => "fail",
        Verdict::Skipped => "skipped",
    }
}

fn execute(cli: &Cli) -> Outcome {
    let scenario = load_scenario(cli).map_err(Failure::at("config"))?;
    if cli.command == Command::DefaultConfig {
        print!("{DEFAULT_SCENARIO}");
        return Ok(());
    }
    let dir = scenario
        .outputs
        .dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("gridlevels-out"));
    let ctx = Context {
        scenario,
        artifacts: Artifacts::new(dir),
        exec: Exec::Parallel,
    };
    let sc = &ctx.scenario;

    match cli.command {
        Command::Build => {
            let g = ctx.graph()?;
            let v = validate_static(&g);
            println!(
                "nodes {}  lines {}  reference {}",
                g.n(),
                g.lines().len(),
                g.reference()
            );
            for c in &v.clauses {
                println!(
                    "  {:<40} {}",
                    c.name,
                    if c.passed { "pass" } else { "fail" }
                );
            }
            ctx.write("build", &ctx.artifacts.graph_path(), &g)?;
        }
        Command::Steady => {
            let g = ctx.graph()?;
            let s = ctx.steady(&g)?;
            println!(
                "residual {:.3e}  iterations {}  max |theta_ij| {:.6}",
                s.residual_norm, s.iterations, s.max_angle_difference
            );
            ctx.write("steady_state", &ctx.artifacts.steady_path(), &s)?;
        }
        Command::Certify => {
            let g = ctx.graph()?;
            let s = ctx.steady(&g)?;
            let cert = check_certificate(
                &build_hessian_blocks(&g, &s),
                &g,
                &s,
                &sc.certificate.options(ctx.exec),
            );
            for c in &cert.clauses {
                println!("  {:<40} {}", c.name, verdict(c.verdict));
            }
            println!(
                "C1 {:.6e}  C {:.6e}  lambda_min(G) {:.6e}",
                cert.cross_term, cert.margin, cert.lambda_min_g
            );
            if let Some(r) = &cert.region {
                println!(
                    "r {:.6e}  c1 {:.6e}  c2 {:.6e}  L {:.6e} (estimate)",
                    r.r, r.c1, r.c2, r.lipschitz
                );
            }
            println!(
                "sufficient {}  direct {}",
                verdict(cert.sufficient),
                verdict(cert.direct)
            );
            ctx.write("certificate", &ctx.artifacts.certificate_path(), &cert)?;
            if cert.direct != Verdict::Pass {
                return Err(Failure::at("certificate")(GridError::Stability(
                    "energy Hessian is not positive definite at the synchronous state".into(),
                )));
            }
        }
        Command::Gains => {
            let g = ctx.graph()?;
            let s = ctx.steady(&g)?;
            let sys =
                build_linearized(&g, &s, &sc.weights.output).map_err(Failure::at("matrices"))?;
            let gains =
                scenario_gains(&sys, &g, &sc.weights, ctx.exec).map_err(Failure::at("gains"))?;
            println!(
                "central CARE: {} iterations, residual {:.3e}",
                gains.central.riccati.iterations, gains.central.riccati.residual_norm
            );
            ctx.write(
                "gains",
                &ctx.artifacts.gains_path(),
                &GainsArtifact::from_gains(&gains),
            )?;
        }
        Command::Simulate => {
            let g = ctx.graph()?;
            let s = ctx.steady(&g)?;
            let kind = sc.sim.controller;
            let feedback = match kind {
                ControllerKind::Open => gridlevels::dynamics::Feedback::Open,
                _ => ctx
                    .gains(&g, &s)?
                    .feedback(kind, StateLayout::of(&g))
                    .map_err(Failure::at("gains"))?,
            };
            let dev0 = sc
                .perturbation
                .deviation(&g, sc.perturbation.seed)
                .map_err(Failure::at("simulate"))?;
            let (summary, trace) = simulate_summary(&g, &s, &sc.sim, &feedback, &dev0)
                .map_err(Failure::at("simulate"))?;
            println!(
                "{kind}: |x(0)| {:.6e}  |x(T)| {:.6e}  var(omega) {:.6e}  var(v) {:.6e}",
                summary.initial_norm,
                summary.final_norm,
                summary.frequency_variance,
                summary.voltage_variance
            );
            let path = ctx.artifacts.trace_path(kind);
            ctx.artifacts
                .write_trace(&path, &trace)
                .map_err(Failure::at("simulate"))?;
            println!("wrote {}", path.display());
        }
        Command::Compare => {
            let g = ctx.graph()?;
            let s = ctx.steady(&g)?;
            let gains = ctx.gains(&g, &s)?;
            let sys =
                build_linearized(&g, &s, &sc.weights.output).map_err(Failure::at("matrices"))?;
            let x0 = sc
                .perturbation
                .deviation(&g, sc.perturbation.seed)
                .map_err(Failure::at("costs"))?
                .as_dvector();
            let c = costs_from_gains(&g, &sys, &sc.weights, &gains, &x0)
                .map_err(Failure::at("costs"))?;
            println!(
                "J_d {:.9e}  J_c {:.9e}  gap {:.3e}  bound {:.3e}  holds {}",
                c.j_d_coupled,
                c.j_c,
                c.gap,
                c.bound,
                verdict(c.holds)
            );
            println!("sum of isolated J_d,i {:.9e}", c.j_d_isolated_sum);
            ctx.write("costs", &ctx.artifacts.compare_path(), &c)?;
        }
        Command::Batch => {
            let summary = run_batch(
                sc,
                sc.batch.seeds,
                sc.batch.workers,
                Some(&ctx.artifacts.dir),
                ctx.exec,
            )?;
            let m = &summary.mean;
            println!(
                "{} seeds ({} completed), {}: mean |x(T)| {:.6e}  var(omega) {:.6e}  var(v) {:.6e}  J_d {:.6e}  J_c {:.6e}",
                summary.rows.len(),
                m.completed,
                summary.controller,
                m.final_norm,
                m.frequency_variance,
                m.voltage_variance,
                m.j_d,
                m.j_c
            );
            println!("wrote {}", ctx.artifacts.batch_path().display());
        }
        Command::Run => {
            let report = run_scenario(sc, Some(&ctx.artifacts.dir), ctx.exec);
            for st in &report.stages {
                println!("  {:<14} {}", st.name, verdict(st.verdict));
            }
            println!("wrote {}", ctx.artifacts.report_path().display());
            if let Some(e) = report.error {
                return Err(e.into());
            }
        }
        Command::DefaultConfig => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRIDLEVELS_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error in stage {}: {}", f.stage, f.message);
            ExitCode::from(u8::try_from(f.code).unwrap_or(1))
        }
    }
}
