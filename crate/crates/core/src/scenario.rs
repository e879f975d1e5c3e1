//! Scenario files, event scheduling, run execution, batch driving, and
//! reporting.
//!
//! A scenario (`schema: "linepack-scn/1"`) holds the horizon, the anchor
//! density for the steady-state initialization, the event list (load
//! ramps through piecewise-constant injection rates, smooth compressor
//! transitions, balancing-node reassignment), per-technique parameters,
//! and integrator settings. Execution pipelines: steady state -> event
//! schedule -> stiff integration -> CSV trajectory + run report.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::balancing::{build_balancing_system, BalancingSystem};
use crate::dynamics::{mass_matrix, rank_report, MassVariant, StateVector};
use crate::error::{Error, Result};
use crate::inputs::Inputs;
use crate::integrator::{
    simulate, IntegratorConfig, Method, OdeSystem, StepStats, Termination, Trajectory,
};
use crate::network::{
    build_matrices, build_network, discretize, DiscretizedNetwork, NetworkSpec,
};
use crate::sigmoid::{build_sigmoid_system, SigmoidSource, SigmoidSystem};
use crate::slack::{build_slack_system, DensityProfile, SlackSystem};
use crate::steady::solve_steady;

pub const SCENARIO_SCHEMA: &str = "linepack-scn/1";
pub const BATCH_SCHEMA: &str = "linepack-batch/1";

/// Default spatial discretization target (m).
pub const DEFAULT_SEGMENT_LENGTH_M: f64 = 5000.0;

// --- scenario file ---------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub schema: String,
    pub t_end_s: f64,
    pub anchor: AnchorSpec,
    #[serde(default)]
    pub rho_min: Option<f64>,
    #[serde(default)]
    pub stop_at_rho_min: bool,
    #[serde(default)]
    pub segment_length_m: Option<f64>,
    #[serde(default)]
    pub events: Vec<EventSpec>,
    #[serde(default)]
    pub integrator: IntegratorSpec,
    #[serde(default)]
    pub slack: Option<SlackParams>,
    #[serde(default)]
    pub sigmoid: Option<SigmoidParams>,
    #[serde(default)]
    pub balancing: Option<BalancingParams>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub node: String,
    pub density: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventSpec {
    /// Injection-rate step: `d_dot[node] = rate` on `[t_start, t_end)`.
    LoadRamp {
        node: String,
        rate_kg_s2: f64,
        t_start_s: f64,
        t_end_s: f64,
    },
    /// Smooth (normalized-logistic) ratio change reaching exactly
    /// `alpha_end` at `t_end`.
    CompressorTransition {
        node: String,
        alpha_start: f64,
        alpha_end: f64,
        t_start_s: f64,
        t_end_s: f64,
    },
    /// Balancing technique only; ignored by the others.
    ReassignBalancingNode { node: String, t_s: f64 },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IntegratorSpec {
    #[serde(default)]
    pub rel_tol: Option<f64>,
    #[serde(default)]
    pub abs_tol: Option<f64>,
    #[serde(default)]
    pub dt_out_s: Option<f64>,
    /// "adaptive" (default) or "backward_euler".
    #[serde(default)]
    pub method: Option<String>,
    /// Fixed step for backward_euler.
    #[serde(default)]
    pub dt_s: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlackParams {
    pub node: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SigmoidParams {
    pub node: String,
    /// Saturation flux of the attached segment, kg/(m^2 s).
    pub phi_max: f64,
    /// Droop midpoint flux.
    pub phi_mid: f64,
    /// Droop steepness.
    pub gamma: f64,
    /// No-load density scale; calibrated through the steady state when
    /// omitted.
    #[serde(default)]
    pub rho_n: Option<f64>,
    #[serde(default)]
    pub band_radius: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalancingParams {
    pub node: String,
}

impl ScenarioSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ScenarioSpec = serde_json::from_str(text)?;
        if spec.schema != SCENARIO_SCHEMA {
            return Err(Error::Schema(format!(
                "expected schema `{SCENARIO_SCHEMA}`, found `{}`",
                spec.schema
            )));
        }
        if !(spec.t_end_s > 0.0) {
            return Err(Error::Scenario("t_end_s must be positive".into()));
        }
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Technique {
    Slack,
    Sigmoid,
    Balancing,
}

impl Technique {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "slack" => Ok(Self::Slack),
            "sigmoid" => Ok(Self::Sigmoid),
            "balancing" => Ok(Self::Balancing),
            other => Err(Error::Scenario(format!("unknown technique `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Slack => "slack",
            Self::Sigmoid => "sigmoid",
            Self::Balancing => "balancing",
        }
    }
}

// --- event schedule --------------------------------------------------------

struct Ramp {
    node: usize,
    rate: f64,
    t0: f64,
    t1: f64,
}

struct Transition {
    node: usize,
    a0: f64,
    a1: f64,
    t0: f64,
    t1: f64,
}

/// Resolved, time-indexed inputs. Ramps are piecewise-constant injection
/// rates; transitions follow a logistic normalized to hit `alpha_end`
/// exactly at `t_end`.
pub struct Schedule {
    base_alpha: DVector<f64>,
    ramps: Vec<Ramp>,
    transitions: Vec<Transition>,
    /// Times where the inputs are non-smooth.
    pub breakpoints: Vec<f64>,
}

/// Logistic steepness of compressor transitions over the unit interval.
const TRANSITION_STEEPNESS: f64 = 10.0;

fn normalized_logistic(tau: f64) -> f64 {
    let k = TRANSITION_STEEPNESS;
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let lo = sig(-k / 2.0);
    let hi = sig(k / 2.0);
    (sig(k * (tau - 0.5)) - lo) / (hi - lo)
}

impl Inputs<f64> for Schedule {
    fn d_dot(&self, t: f64, out: &mut DVector<f64>) {
        out.fill(0.0);
        for r in &self.ramps {
            if t >= r.t0 && t < r.t1 {
                out[r.node] += r.rate;
            }
        }
    }

    fn alpha(&self, t: f64, out: &mut DVector<f64>) {
        out.copy_from(&self.base_alpha);
        for tr in &self.transitions {
            out[tr.node] = if t <= tr.t0 {
                tr.a0
            } else if t >= tr.t1 {
                tr.a1
            } else {
                let tau = (t - tr.t0) / (tr.t1 - tr.t0);
                tr.a0 + (tr.a1 - tr.a0) * normalized_logistic(tau)
            };
        }
    }

    fn varying_alpha_nodes(&self) -> Vec<usize> {
        self.transitions.iter().map(|tr| tr.node).collect()
    }
}

/// Resolve the event list against the refined network.
pub fn build_schedule(
    dnet: &DiscretizedNetwork<f64>,
    events: &[EventSpec],
) -> Result<(Schedule, Vec<(f64, usize)>)> {
    let mut ramps = Vec::new();
    let mut transitions = Vec::new();
    let mut reassignments = Vec::new();
    let mut breakpoints = Vec::new();
    for ev in events {
        match ev {
            EventSpec::LoadRamp {
                node,
                rate_kg_s2,
                t_start_s,
                t_end_s,
            } => {
                if t_start_s >= t_end_s {
                    return Err(Error::Scenario("ramp needs t_start < t_end".into()));
                }
                ramps.push(Ramp {
                    node: dnet.node_by_id(node)?,
                    rate: *rate_kg_s2,
                    t0: *t_start_s,
                    t1: *t_end_s,
                });
                breakpoints.push(*t_start_s);
                breakpoints.push(*t_end_s);
            }
            EventSpec::CompressorTransition {
                node,
                alpha_start,
                alpha_end,
                t_start_s,
                t_end_s,
            } => {
                if t_start_s >= t_end_s {
                    return Err(Error::Scenario("transition needs t_start < t_end".into()));
                }
                transitions.push(Transition {
                    node: dnet.node_by_id(node)?,
                    a0: *alpha_start,
                    a1: *alpha_end,
                    t0: *t_start_s,
                    t1: *t_end_s,
                });
                breakpoints.push(*t_start_s);
                breakpoints.push(*t_end_s);
            }
            EventSpec::ReassignBalancingNode { node, t_s } => {
                reassignments.push((*t_s, dnet.node_by_id(node)?));
                breakpoints.push(*t_s);
            }
        }
    }
    reassignments.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok((
        Schedule {
            base_alpha: dnet.alpha.clone(),
            ramps,
            transitions,
            breakpoints,
        },
        reassignments,
    ))
}

// --- execution -------------------------------------------------------------

/// One technique system behind a single dispatch point so the runner and
/// the CSV writer share a code path.
pub enum SystemBox {
    Slack(SlackSystem<f64>),
    Sigmoid(Box<SigmoidSystem<f64>>),
    Balancing(Box<BalancingSystem<f64>>),
}

impl SystemBox {
    fn full_state(&mut self, t: f64, y: &DVector<f64>) -> Result<StateVector<f64>> {
        match self {
            SystemBox::Slack(sys) => Ok(sys.full_state(t, y)),
            SystemBox::Sigmoid(sys) => Ok(sys.full_state(y)),
            SystemBox::Balancing(sys) => sys.full_state(t, y),
        }
    }
}

impl OdeSystem<f64> for SystemBox {
    fn dim(&self) -> usize {
        match self {
            SystemBox::Slack(s) => OdeSystem::dim(s),
            SystemBox::Sigmoid(s) => OdeSystem::dim(&**s),
            SystemBox::Balancing(s) => OdeSystem::dim(&**s),
        }
    }

    fn rhs(&mut self, t: f64, y: &DVector<f64>, out: &mut DVector<f64>) -> Result<()> {
        match self {
            SystemBox::Slack(s) => OdeSystem::rhs(s, t, y, out),
            SystemBox::Sigmoid(s) => OdeSystem::rhs(&mut **s, t, y, out),
            SystemBox::Balancing(s) => OdeSystem::rhs(&mut **s, t, y, out),
        }
    }

    fn node_densities(&mut self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            SystemBox::Slack(s) => s.node_densities(t, y),
            SystemBox::Sigmoid(s) => s.node_densities(t, y),
            SystemBox::Balancing(s) => s.node_densities(t, y),
        }
    }

    fn n_physical(&self) -> usize {
        match self {
            SystemBox::Slack(s) => s.n_physical(),
            SystemBox::Sigmoid(s) => s.n_physical(),
            SystemBox::Balancing(s) => s.n_physical(),
        }
    }

    fn stored_mass(&mut self, t: f64, y: &DVector<f64>) -> Result<f64> {
        match self {
            SystemBox::Slack(s) => s.stored_mass(t, y),
            SystemBox::Sigmoid(s) => s.stored_mass(t, y),
            SystemBox::Balancing(s) => s.stored_mass(t, y),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub technique: String,
    pub termination: String,
    /// Depletion time, if the run ended by depletion.
    pub survival_time_s: Option<f64>,
    pub rho_min_violation_s: Option<f64>,
    pub rho_min_violation_node: Option<String>,
    pub min_density_kg_m3: f64,
    pub min_density_node: String,
    pub final_linepack_kg: f64,
    pub wall_clock_s: f64,
    pub steps: usize,
    pub csv: Option<String>,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        if self.survival_time_s.is_some() {
            2
        } else if self.rho_min_violation_s.is_some() {
            3
        } else {
            0
        }
    }
}

/// CLI-level overrides of the scenario's integrator block.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub rel_tol: Option<f64>,
    pub abs_tol: Option<f64>,
    pub dt_out: Option<f64>,
}

fn integrator_config(
    spec: &IntegratorSpec,
    scn: &ScenarioSpec,
    ovr: &Overrides,
) -> Result<IntegratorConfig<f64>> {
    let mut cfg = IntegratorConfig::default();
    if let Some(v) = spec.rel_tol {
        cfg.rel_tol = v;
    }
    if let Some(v) = spec.abs_tol {
        cfg.abs_tol = v;
    }
    if let Some(v) = spec.dt_out_s {
        cfg.dt_out = v;
    }
    match spec.method.as_deref() {
        None | Some("adaptive") => {}
        Some("backward_euler") => {
            cfg.method = Method::BackwardEulerFixed {
                dt: spec.dt_s.unwrap_or(0.05),
            };
        }
        Some(other) => {
            return Err(Error::Scenario(format!("unknown method `{other}`")));
        }
    }
    if let Some(v) = ovr.rel_tol {
        cfg.rel_tol = v;
    }
    if let Some(v) = ovr.abs_tol {
        cfg.abs_tol = v;
    }
    if let Some(v) = ovr.dt_out {
        cfg.dt_out = v;
    }
    cfg.rho_min = scn.rho_min;
    cfg.stop_at_rho_min = scn.stop_at_rho_min;
    if !(cfg.rel_tol > 0.0 && cfg.abs_tol > 0.0 && cfg.dt_out > 0.0) {
        return Err(Error::Scenario("tolerances and dt_out must be positive".into()));
    }
    Ok(cfg)
}

fn build_system(
    technique: Technique,
    dnet: &Arc<DiscretizedNetwork<f64>>,
    inputs: &Arc<Schedule>,
    scn: &ScenarioSpec,
    xs: &StateVector<f64>,
) -> Result<(SystemBox, DVector<f64>)> {
    match technique {
        Technique::Slack => {
            let p = scn
                .slack
                .as_ref()
                .ok_or_else(|| Error::Scenario("scenario has no `slack` block".into()))?;
            let node = dnet.node_by_id(&p.node)?;
            let sys = build_slack_system(
                dnet.clone(),
                inputs.clone() as Arc<dyn Inputs<f64>>,
                node,
                DensityProfile::Constant(xs.rho[node]),
            )?;
            let y0 = sys.reduce(xs);
            Ok((SystemBox::Slack(sys), y0))
        }
        Technique::Sigmoid => {
            let p = scn
                .sigmoid
                .as_ref()
                .ok_or_else(|| Error::Scenario("scenario has no `sigmoid` block".into()))?;
            let node = dnet.node_by_id(&p.node)?;
            let mut source = SigmoidSource {
                node,
                phi_m: p.phi_max,
                phi_mid: p.phi_mid,
                gamma: p.gamma,
                rho_n: p.rho_n.unwrap_or(1.0),
                band_radius: p.band_radius.unwrap_or(10.0),
            };
            // outflow at the steady state
            let adj = dnet.adjacent_segments(node);
            if adj.len() != 1 {
                return Err(Error::SigmoidSource(
                    "reservoir node must be a leaf of the refined network".into(),
                ));
            }
            let (seg, leaves) = adj[0];
            let w0 = if leaves { xs.phi0[seg] } else { -xs.phil[seg] };
            if p.rho_n.is_none() {
                source.calibrate_rho_n(w0, xs.rho[node]);
            }
            let sys = build_sigmoid_system(
                dnet.clone(),
                inputs.clone() as Arc<dyn Inputs<f64>>,
                source,
            )?;
            let y0 = sys.reduce(xs)?;
            Ok((SystemBox::Sigmoid(Box::new(sys)), y0))
        }
        Technique::Balancing => {
            let p = scn
                .balancing
                .as_ref()
                .ok_or_else(|| Error::Scenario("scenario has no `balancing` block".into()))?;
            let node = dnet.node_by_id(&p.node)?;
            let sys = build_balancing_system(
                dnet.clone(),
                inputs.clone() as Arc<dyn Inputs<f64>>,
                node,
                xs.rho[node],
            )?;
            let y0 = sys.reduce(xs);
            Ok((SystemBox::Balancing(Box::new(sys)), y0))
        }
    }
}

fn merge_trajectories(mut parts: Vec<Trajectory<f64>>) -> Trajectory<f64> {
    let mut it = parts.drain(..);
    let mut acc = it.next().expect("at least one trajectory piece");
    for t in it {
        let skip = usize::from(
            t.times
                .first()
                .zip(acc.times.last())
                .map(|(&a, &b)| (a - b).abs() < 1e-9)
                .unwrap_or(false),
        );
        acc.times.extend_from_slice(&t.times[skip..]);
        acc.states.extend_from_slice(&t.states[skip..]);
        acc.densities.extend_from_slice(&t.densities[skip..]);
        acc.linepack.extend_from_slice(&t.linepack[skip..]);
        acc.termination = t.termination;
        if acc.rho_min_crossing.is_none() {
            acc.rho_min_crossing = t.rho_min_crossing;
        }
        acc.stats = StepStats {
            steps: acc.stats.steps + t.stats.steps,
            rejected: acc.stats.rejected + t.stats.rejected,
            rhs_evals: acc.stats.rhs_evals + t.stats.rhs_evals,
            jacobians: acc.stats.jacobians + t.stats.jacobians,
        };
    }
    acc
}

/// Run one scenario from parsed specs; the caller owns file IO policy.
pub fn run_spec(
    net_spec: NetworkSpec,
    scn: &ScenarioSpec,
    technique: Technique,
    csv_path: Option<&Path>,
    ovr: &Overrides,
) -> Result<RunReport> {
    let started = Instant::now();
    let vnet = build_network(net_spec)?;
    let target_l = scn.segment_length_m.unwrap_or(DEFAULT_SEGMENT_LENGTH_M);
    let dnet: Arc<DiscretizedNetwork<f64>> = Arc::new(discretize(&vnet, target_l)?);
    let anchor = dnet.node_by_id(&scn.anchor.node)?;
    let xs = solve_steady(&dnet, &dnet.injection, &dnet.alpha, anchor, scn.anchor.density)?;
    let (schedule, reassignments) = build_schedule(&dnet, &scn.events)?;
    let mut breakpoints = schedule.breakpoints.clone();
    breakpoints.retain(|&b| b > 0.0 && b < scn.t_end_s);
    let inputs = Arc::new(schedule);
    let cfg = integrator_config(&scn.integrator, scn, ovr)?;

    let (mut sys, mut y) = build_system(technique, &dnet, &inputs, scn, &xs)?;

    // balancing-node reassignment splits the horizon
    let mut splits: Vec<(f64, usize)> = if technique == Technique::Balancing {
        reassignments
            .into_iter()
            .filter(|&(t, _)| t > 0.0 && t < scn.t_end_s)
            .collect()
    } else {
        Vec::new()
    };
    splits.push((scn.t_end_s, usize::MAX));

    let mut pieces = Vec::new();
    let mut t = 0.0;
    for (te, new_node) in splits {
        let traj = simulate(&mut sys, y.clone(), t, te, &breakpoints, &cfg)?;
        let done = !matches!(traj.termination, Termination::Completed);
        let t_last = *traj.times.last().unwrap();
        let y_last = traj.states.last().unwrap().clone();
        pieces.push(traj);
        if done || te >= scn.t_end_s {
            break;
        }
        // rebuild around the new balancing node at the switch time
        let x_switch = sys.full_state(t_last, &y_last)?;
        if let SystemBox::Balancing(old) = &sys {
            let _ = old; // the previous factorizations drop here
        }
        let new_sys = build_balancing_system(
            dnet.clone(),
            inputs.clone() as Arc<dyn Inputs<f64>>,
            new_node,
            x_switch.rho[new_node],
        )?;
        y = new_sys.reduce(&x_switch);
        sys = SystemBox::Balancing(Box::new(new_sys));
        t = te;
    }
    let traj = merge_trajectories(pieces);

    if let Some(path) = csv_path {
        write_csv(path, &dnet, &mut sys, &traj)?;
    }

    let mut min_density = f64::INFINITY;
    let mut min_node = 0usize;
    for d in &traj.densities {
        for (i, &v) in d.iter().enumerate() {
            if v < min_density {
                min_density = v;
                min_node = i;
            }
        }
    }
    let (termination, survival) = match &traj.termination {
        Termination::Completed => ("completed".to_string(), None),
        Termination::Depletion { node, t } => (
            format!("depletion at node {}", dnet.node_ids[*node]),
            Some(*t),
        ),
        Termination::RhoMin { node, t } => {
            (format!("rho_min at node {}", dnet.node_ids[*node]), Some(*t))
        }
        Termination::Infeasible(msg) => (format!("infeasible: {msg}"), None),
    };
    let survival = match &traj.termination {
        Termination::Depletion { .. } => survival,
        _ => None,
    };
    Ok(RunReport {
        technique: technique.name().into(),
        termination,
        survival_time_s: survival,
        rho_min_violation_s: traj.rho_min_crossing.map(|(_, t)| t),
        rho_min_violation_node: traj
            .rho_min_crossing
            .map(|(nd, _)| dnet.node_ids[nd].clone()),
        min_density_kg_m3: min_density,
        min_density_node: dnet.node_ids[min_node].clone(),
        final_linepack_kg: *traj.linepack.last().unwrap(),
        wall_clock_s: started.elapsed().as_secs_f64(),
        steps: traj.stats.steps,
        csv: csv_path.map(|p| p.display().to_string()),
    })
}

/// Run one scenario from files.
pub fn run_scenario(
    network_path: &Path,
    scenario_path: &Path,
    technique: Technique,
    csv_path: Option<&Path>,
    ovr: &Overrides,
) -> Result<RunReport> {
    let net = NetworkSpec::from_file(network_path)?;
    let scn = ScenarioSpec::from_file(scenario_path)?;
    run_spec(net, &scn, technique, csv_path, ovr)
}

/// Deterministic CSV: header row, `.` decimal separator, LF endings.
/// Columns: time_s, rho per physical node, phi0/phil per physical pipe,
/// linepack_kg.
fn write_csv(
    path: &Path,
    dnet: &DiscretizedNetwork<f64>,
    sys: &mut SystemBox,
    traj: &Trajectory<f64>,
) -> Result<()> {
    use std::io::Write;
    let mut out = String::new();
    out.push_str("time_s");
    for i in 0..dnet.n_physical {
        out.push_str(&format!(",rho_{}", dnet.node_ids[i]));
    }
    for segs in &dnet.pipe_segments {
        let first = segs[0];
        let last = *segs.last().unwrap();
        let from = &dnet.node_ids[dnet.seg_start[first]];
        let to = &dnet.node_ids[dnet.seg_end[last]];
        out.push_str(&format!(",phi0_{from}_{to},phil_{from}_{to}"));
    }
    out.push_str(",linepack_kg\n");
    for k in 0..traj.times.len() {
        let t = traj.times[k];
        let x = sys.full_state(t, &traj.states[k])?;
        out.push_str(&format!("{t}"));
        for i in 0..dnet.n_physical {
            out.push_str(&format!(",{}", x.rho[i]));
        }
        for segs in &dnet.pipe_segments {
            let first = segs[0];
            let last = *segs.last().unwrap();
            out.push_str(&format!(",{},{}", x.phi0[first], x.phil[last]));
        }
        out.push_str(&format!(",{}\n", traj.linepack[k]));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

// --- batch -----------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
pub struct BatchManifest {
    pub schema: String,
    #[serde(default)]
    pub runs: Vec<BatchRun>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct BatchRun {
    pub network: String,
    pub scenario: String,
    pub technique: String,
    #[serde(default)]
    pub csv: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchEntry {
    pub network: String,
    pub scenario: String,
    pub technique: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<RunReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Environment variable capping batch parallelism.
pub const THREADS_ENV: &str = "LINEPACK_SIM_THREADS";

/// Run every entry of a batch manifest in parallel; per-run failures are
/// isolated into their entry and the batch continues. Paths are resolved
/// relative to the manifest file.
pub fn run_batch(manifest_path: &Path, ovr: &Overrides) -> Result<Vec<BatchEntry>> {
    let manifest: BatchManifest =
        serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    if manifest.schema != BATCH_SCHEMA {
        return Err(Error::Schema(format!(
            "expected schema `{BATCH_SCHEMA}`, found `{}`",
            manifest.schema
        )));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &str| -> PathBuf {
        let pb = PathBuf::from(p);
        if pb.is_absolute() {
            pb
        } else {
            base.join(pb)
        }
    };
    let jobs: Vec<_> = manifest.runs.iter().collect();
    let run_one = |r: &BatchRun| -> BatchEntry {
        let outcome = Technique::parse(&r.technique).and_then(|tech| {
            run_scenario(
                &resolve(&r.network),
                &resolve(&r.scenario),
                tech,
                r.csv.as_deref().map(resolve).as_deref(),
                ovr,
            )
        });
        match outcome {
            Ok(report) => BatchEntry {
                network: r.network.clone(),
                scenario: r.scenario.clone(),
                technique: r.technique.clone(),
                status: "ok".into(),
                report: Some(report),
                error: None,
            },
            Err(e) => BatchEntry {
                network: r.network.clone(),
                scenario: r.scenario.clone(),
                technique: r.technique.clone(),
                status: "error".into(),
                report: None,
                error: Some(e.to_string()),
            },
        }
    };
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&k| k > 0);
    let entries: Vec<BatchEntry> = match threads {
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::Scenario(format!("thread pool: {e}")))?;
            pool.install(|| {
                use rayon::prelude::*;
                jobs.par_iter().map(|r| run_one(r)).collect()
            })
        }
        None => {
            use rayon::prelude::*;
            jobs.par_iter().map(|r| run_one(r)).collect()
        }
    };
    Ok(entries)
}

// --- rank reporting --------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct RankLine {
    pub dim: usize,
    pub rank: usize,
    pub deficiency: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RankSummary {
    pub is_tree: bool,
    pub state_dim: usize,
    pub full: RankLine,
    pub slack: RankLine,
    pub balancing: RankLine,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Numerical ranks of the full and reduced mass matrices at the given
/// deletion nodes (defaults: first node for the slack variant, first leaf
/// for the balancing variant).
pub fn rank_summary(
    net_spec: NetworkSpec,
    slack_node: Option<&str>,
    balancing_node: Option<&str>,
    segment_length_m: f64,
) -> Result<RankSummary> {
    let vnet = build_network(net_spec)?;
    let dnet: DiscretizedNetwork<f64> = discretize(&vnet, segment_length_m)?;
    let ms = build_matrices(&dnet);
    let line = |variant: MassVariant| -> Result<RankLine> {
        let mm = mass_matrix(&dnet, &ms, variant)?;
        let r = rank_report(&mm.matrix);
        Ok(RankLine {
            dim: r.dim,
            rank: r.numerical_rank,
            deficiency: r.deficiency,
        })
    };
    let s_node = match slack_node {
        Some(id) => dnet.node_by_id(id)?,
        None => 0,
    };
    let b_node = match balancing_node {
        Some(id) => dnet.node_by_id(id)?,
        None => (0..dnet.n)
            .find(|&i| dnet.degree(i) == 1)
            .ok_or_else(|| Error::Scenario("network has no leaf node".into()))?,
    };
    let b_seg = dnet
        .adjacent_segments(b_node)
        .first()
        .map(|&(j, _)| j)
        .ok_or_else(|| Error::Scenario("balancing node has no attached segment".into()))?;
    Ok(RankSummary {
        is_tree: dnet.is_tree,
        state_dim: dnet.state_dim(),
        full: line(MassVariant::Full)?,
        slack: line(MassVariant::Slack { node: s_node })?,
        balancing: line(MassVariant::Balancing {
            node: b_node,
            segment: b_seg,
        })?,
        warning: (!dnet.is_tree)
            .then(|| "non-tree network: the rank theorems are not applicable".into()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil;

    fn write_net(dir: &Path) -> PathBuf {
        let spec = testutil::path_spec(&[30.0, 0.0, -30.0], 10_000.0);
        let p = dir.join("net.json");
        std::fs::write(&p, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
        p
    }

    fn scenario_json() -> serde_json::Value {
        serde_json::json!({
            "schema": SCENARIO_SCHEMA,
            "t_end_s": 600.0,
            "anchor": {"node": "n0", "density": 60.0},
            "rho_min": 20.0,
            "segment_length_m": 5000.0,
            "integrator": {"dt_out_s": 60.0},
            "events": [
                {"kind": "load_ramp", "node": "n2", "rate_kg_s2": -0.01,
                 "t_start_s": 0.0, "t_end_s": 100.0}
            ],
            "slack": {"node": "n0"},
            "balancing": {"node": "n0"},
            "sigmoid": {"node": "n0", "phi_max": 400.0, "phi_mid": 300.0, "gamma": 0.02}
        })
    }

    #[test]
    fn schema_checked_on_load() {
        let mut v = scenario_json();
        v["schema"] = "bogus/9".into();
        assert!(matches!(
            ScenarioSpec::from_json(&v.to_string()),
            Err(Error::Schema(_))
        ));
        assert!(ScenarioSpec::from_json(&scenario_json().to_string()).is_ok());
    }

    #[test]
    fn transition_hits_endpoints_exactly() {
        let dnet = testutil::path(&[0.0, 0.0], 5000.0, 5000.0);
        let (schedule, _) = build_schedule(
            &dnet,
            &[EventSpec::CompressorTransition {
                node: "n0".into(),
                alpha_start: 1.3028,
                alpha_end: 1.2271,
                t_start_s: 100.0,
                t_end_s: 7300.0,
            }],
        )
        .unwrap();
        let mut a = dnet.alpha.clone();
        schedule.alpha(100.0, &mut a);
        assert_eq!(a[0], 1.3028);
        schedule.alpha(7300.0, &mut a);
        assert_eq!(a[0], 1.2271);
        schedule.alpha(1e9, &mut a);
        assert_eq!(a[0], 1.2271);
        // monotone decrease in between
        let mut prev = 1.3028;
        for k in 1..=20 {
            schedule.alpha(100.0 + 7200.0 * k as f64 / 20.0, &mut a);
            assert!(a[0] <= prev + 1e-12);
            prev = a[0];
        }
    }

    #[test]
    fn ramp_is_piecewise_constant_with_exact_total() {
        let dnet = testutil::path(&[0.0, 0.0], 5000.0, 5000.0);
        let (schedule, _) = build_schedule(
            &dnet,
            &[EventSpec::LoadRamp {
                node: "n1".into(),
                rate_kg_s2: -0.09,
                t_start_s: 0.0,
                t_end_s: 1000.0,
            }],
        )
        .unwrap();
        let mut d = DVector::zeros(dnet.n);
        schedule.d_dot(500.0, &mut d);
        assert_eq!(d[1], -0.09);
        schedule.d_dot(1000.0, &mut d);
        assert_eq!(d[1], 0.0);
        // rate * duration is exact in f64 for these values
        assert_eq!(-0.09 * 1000.0, -90.0);
    }

    #[test]
    fn end_to_end_slack_run_with_deterministic_csv() {
        let dir = tempfile::tempdir().unwrap();
        let net = write_net(dir.path());
        let scn_path = dir.path().join("scn.json");
        std::fs::write(&scn_path, scenario_json().to_string()).unwrap();
        let csv1 = dir.path().join("out1.csv");
        let csv2 = dir.path().join("out2.csv");
        let r1 = run_scenario(&net, &scn_path, Technique::Slack, Some(&csv1), &Overrides::default())
            .unwrap();
        let r2 = run_scenario(&net, &scn_path, Technique::Slack, Some(&csv2), &Overrides::default())
            .unwrap();
        assert_eq!(r1.exit_code(), 0);
        assert_eq!(r1.termination, "completed");
        let b1 = std::fs::read(&csv1).unwrap();
        let b2 = std::fs::read(&csv2).unwrap();
        assert_eq!(b1, b2, "CSV output must be byte-identical across runs");
        let text = String::from_utf8(b1).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.starts_with("time_s,rho_n0,rho_n1,rho_n2"));
        assert!(header.ends_with("linepack_kg"));
        assert!(!text.contains('\r'));
        let _ = r2;
    }

    #[test]
    fn all_three_techniques_run_the_same_scenario() {
        let dir = tempfile::tempdir().unwrap();
        let net = write_net(dir.path());
        let scn_path = dir.path().join("scn.json");
        std::fs::write(&scn_path, scenario_json().to_string()).unwrap();
        for tech in [Technique::Slack, Technique::Sigmoid, Technique::Balancing] {
            let r = run_scenario(&net, &scn_path, tech, None, &Overrides::default())
                .unwrap_or_else(|e| panic!("{} failed: {e}", tech.name()));
            assert!(r.min_density_kg_m3 > 0.0, "{}", tech.name());
        }
    }

    #[test]
    fn batch_isolates_failures_and_handles_empty() {
        let dir = tempfile::tempdir().unwrap();
        let net = write_net(dir.path());
        let scn_path = dir.path().join("scn.json");
        std::fs::write(&scn_path, scenario_json().to_string()).unwrap();
        let empty = dir.path().join("empty.json");
        std::fs::write(
            &empty,
            serde_json::json!({"schema": BATCH_SCHEMA, "runs": []}).to_string(),
        )
        .unwrap();
        assert!(run_batch(&empty, &Overrides::default()).unwrap().is_empty());

        let manifest = dir.path().join("batch.json");
        std::fs::write(
            &manifest,
            serde_json::json!({
                "schema": BATCH_SCHEMA,
                "runs": [
                    {"network": net.file_name().unwrap().to_str().unwrap(),
                     "scenario": "scn.json", "technique": "slack"},
                    {"network": "missing.json", "scenario": "scn.json",
                     "technique": "slack"},
                    {"network": net.file_name().unwrap().to_str().unwrap(),
                     "scenario": "scn.json", "technique": "warp"}
                ]
            })
            .to_string(),
        )
        .unwrap();
        let entries = run_batch(&manifest, &Overrides::default()).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[0].status, "ok");
        assert_eq!(entries[1].status, "error");
        assert_eq!(entries[2].status, "error");
    }

    #[test]
    fn rank_summary_reports_the_theorem_pattern() {
        let spec = testutil::path_spec(&[0.0, 0.0], 5000.0);
        let r = rank_summary(spec, None, None, 5000.0).unwrap();
        assert!(r.is_tree);
        assert!(r.warning.is_none());
        assert_eq!(r.full.deficiency, 1);
        assert_eq!(r.slack.deficiency, 0);
        assert_eq!(r.balancing.deficiency, 0);
    }
}
