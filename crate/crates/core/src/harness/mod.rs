//! Scenario files and the batch commands behind the command-line tool.
//!
//! Every command writes into an [`OutDir`] and finishes with a
//! `manifest.json` holding the scenario and the content hash of each output.

mod output;
mod repro;
mod scenario;
mod verify;

use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

pub use output::{blob_hash, OutDir, MANIFEST};
pub use repro::{cmd_repro, Criterion, Figure, ReproReport};
pub use scenario::{ControlChoice, DelayChoice, Scenario};
pub use verify::{cmd_verify, method_of_steps, Check, DelayedDecay, VerifyReport, VerifySuite, RESIDUAL_REFERENCE};

use crate::analysis::{classify_stability, lk_condition, LkVerdict, StabilityVerdict};
use crate::dde_sim::{simulate, Controller, SimOptions, Trajectory, ZeroControl};
use crate::error::{Error, Result};
use crate::hji::{extract_safe_set, solve_hji, solve_hjb_closed_loop, CostSpec, DelayGame, ValueFunction, ValueSeries};
use crate::models::CoupledTdsModel;
use crate::policy::{ControlPolicy, ControlSource, DdeController};

/// Grids beyond this many nodes get a memory warning.
pub const NODE_BUDGET: usize = 10_000_000;

/// Every `stride`-th row plus the last one.
pub fn decimate(traj: &Trajectory, stride: usize) -> Trajectory {
    let n = traj.len();
    let keep: Vec<usize> = (0..n).filter(|i| i % stride == 0 || i + 1 == n).collect();
    Trajectory {
        times: keep.iter().map(|&i| traj.times[i]).collect(),
        states: keep.iter().map(|&i| traj.states[i].clone()).collect(),
        inputs: keep.iter().map(|&i| traj.inputs[i].clone()).collect(),
        delays: keep.iter().map(|&i| traj.delays[i]).collect(),
    }
}

/// Reads a value dump, reporting a missing or unreadable file as a
/// configuration problem.
pub fn load_value_file(path: &Path) -> Result<ValueFunction> {
    let f = File::open(path).map_err(|e| Error::config(format!("cannot open value file {}: {e}", path.display())))?;
    let v = ValueFunction::read_dump(BufReader::new(f))?;
    if v.grid.dim() != 3 {
        return Err(Error::Format(format!("expected a 3-axis value function, found {} axes", v.grid.dim())));
    }
    Ok(v)
}

fn scenario_value(sc: &Scenario) -> Result<Arc<ValueFunction>> {
    let path = sc
        .value_file
        .as_ref()
        .ok_or_else(|| Error::config("this command needs `value_file`, the step-1 value dump written by `solve`"))?;
    load_value_file(Path::new(path)).map(Arc::new)
}

/// The game used for feedback extraction, with the delay box taken from `v`.
fn stabilization_game(sc: &Scenario, v: &ValueFunction) -> Result<DelayGame> {
    let d_max = v.grid.axis(2).max;
    DelayGame::new(sc.params()?, sc.spec_with_delay(d_max, sc.w_role), CostSpec::stabilization())
}

pub(crate) fn feedback_policy(sc: &Scenario, v: Arc<ValueFunction>) -> Result<ControlPolicy> {
    let game = stabilization_game(sc, &v)?;
    Ok(ControlPolicy::new(ControlSource::ValueFunction(v), game).with_hold(sc.dt_ctrl))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseSummary {
    pub label: String,
    pub start: f64,
    pub end: f64,
    pub verdict: StabilityVerdict,
    pub max_abs_ep: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateSummary {
    pub phases: Vec<PhaseSummary>,
    pub overall: StabilityVerdict,
    pub max_abs_u: f64,
    pub final_abs_ep: f64,
    /// Delay-independent certificate for the scenario's gains and bound.
    pub lk: LkVerdict,
}

/// Phase boundaries: start, delay onset, feedback switch-on, end.
fn phase_bounds(sc: &Scenario, end: f64) -> Vec<f64> {
    let mut cuts = vec![0.0];
    if sc.delay == DelayChoice::Onset && sc.delay_onset > 0.0 && sc.delay_onset < end {
        cuts.push(sc.delay_onset);
    }
    if sc.control == ControlChoice::Value && sc.control_start > 0.0 && sc.control_start < end {
        cuts.push(sc.control_start);
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts.push(end);
    cuts
}

fn phase_label(i: usize) -> String {
    char::from(b'A' + i.min(25) as u8).to_string()
}

pub(crate) fn max_abs_ep_between(traj: &Trajectory, from: f64, to: f64) -> f64 {
    traj.times
        .iter()
        .zip(traj.position_errors())
        .filter(|(t, _)| **t >= from && **t <= to)
        .map(|(_, e)| e.abs())
        .fold(0.0, f64::max)
}

fn summarize(sc: &Scenario, traj: &Trajectory) -> Result<SimulateSummary> {
    let end = traj.times.last().copied().unwrap_or(0.0);
    let cuts = phase_bounds(sc, end);
    let phases = cuts
        .windows(2)
        .enumerate()
        .map(|(i, w)| PhaseSummary {
            label: phase_label(i),
            start: w[0],
            end: w[1],
            verdict: classify_stability(traj, (w[0], w[1])),
            max_abs_ep: max_abs_ep_between(traj, w[0], w[1]),
        })
        .collect();
    let max_abs_u = traj
        .inputs
        .iter()
        .map(|u| if u.len() >= 2 { (u[0] - u[1]).abs() } else { 0.0 })
        .fold(0.0, f64::max);
    Ok(SimulateSummary {
        phases,
        overall: classify_stability(traj, (0.0, end)),
        max_abs_u,
        final_abs_ep: traj.position_errors().last().map_or(0.0, |e| e.abs()),
        lk: lk_condition(sc.k, sc.k, sc.b, sc.b, sc.tstar, sc.tstar)?,
    })
}

fn write_trajectory(out: &mut OutDir, sc: &Scenario, name: &str, traj: &Trajectory) -> Result<()> {
    let cuts = phase_bounds(sc, traj.times.last().copied().unwrap_or(0.0));
    let thin = decimate(traj, sc.csv_stride);
    let labels: Vec<String> = thin
        .times
        .iter()
        .map(|&t| {
            let i = cuts[1..cuts.len() - 1].iter().filter(|&&c| t >= c).count();
            phase_label(i)
        })
        .collect();
    thin.write_csv(out.file(name)?, Some(("phase", &labels)))
}

/// Closed-loop rollout of the true delayed system. On divergence the
/// partial trajectory is written before the error is returned.
pub(crate) fn simulate_into(sc: &Scenario, value: Option<Arc<ValueFunction>>, out: &mut OutDir) -> Result<(Trajectory, SimulateSummary)> {
    sc.validate()?;
    let model = CoupledTdsModel::new(sc.params()?)?;
    let sig = sc.delay_signal();
    let delays = [sig.clone(), sig];
    let mut zero = ZeroControl { dim: 2 };
    let mut feedback = match (sc.control, value) {
        (ControlChoice::Value, Some(v)) => Some(DdeController::starting_at(feedback_policy(sc, v)?, sc.control_start)),
        (ControlChoice::Value, None) => return Err(Error::config("control = \"value\" needs a value function")),
        (ControlChoice::None, _) => None,
    };
    let ctrl: &mut dyn Controller = match feedback.as_mut() {
        Some(c) => c,
        None => &mut zero,
    };
    let opts = SimOptions::new(sc.sim_horizon, sc.dt);
    match simulate(&model, &sc.initial_state(), &delays, ctrl, opts) {
        Ok(traj) => {
            write_trajectory(out, sc, "trajectory.csv", &traj)?;
            out.text("trajectory.gp", &output::trajectory_plot("trajectory.csv", &sc.name))?;
            let summary = summarize(sc, &traj)?;
            out.json("summary.json", &summary)?;
            Ok((traj, summary))
        }
        Err(Error::Divergence { time, partial }) => {
            if let Some(p) = &partial {
                write_trajectory(out, sc, "trajectory.csv", p)?;
                out.finish("simulate", sc)?;
            }
            Err(Error::Divergence { time, partial })
        }
        Err(e) => Err(e),
    }
}

/// `simulate`: rolls the scenario and writes the trajectory and a summary.
pub fn cmd_simulate(sc: &Scenario, out: &Path) -> Result<SimulateSummary> {
    let value = match sc.control {
        ControlChoice::Value => Some(scenario_value(sc)?),
        ControlChoice::None => None,
    };
    let mut dir = OutDir::create(out)?;
    let (_, summary) = simulate_into(sc, value, &mut dir)?;
    dir.finish("simulate", sc)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveSummary {
    pub axes: Vec<String>,
    pub counts: Vec<usize>,
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
    pub nodes: usize,
    pub cost: CostSpec,
    pub spec: crate::hji::HamiltonianSpec,
    pub horizon: f64,
    pub cfl: f64,
    pub steps: usize,
    pub value_min: f64,
    pub value_max: f64,
    pub warnings: Vec<String>,
}

pub(crate) fn solve_into(sc: &Scenario, out: &mut OutDir) -> Result<(ValueSeries, SolveSummary)> {
    sc.validate()?;
    let grid = sc.grid()?;
    let mut warnings = Vec::new();
    if grid.len() > NODE_BUDGET {
        warnings.push(format!("grid has {} nodes, above the {} node budget", grid.len(), NODE_BUDGET));
    }
    let cost = CostSpec::stabilization();
    let series = solve_hji(&grid, sc.params()?, cost, sc.spec(), sc.solve_options())?;
    let v = series.initial();

    v.write_dump(out.file("value.bin")?)?;
    v.write_slice_csv(out.file("value_d0.csv")?, 0)?;
    let last = grid.axis(2).count - 1;
    v.write_slice_csv(out.file("value_dmax.csv")?, last)?;
    {
        let mut w = csv::Writer::from_writer(out.file("cfl_history.csv")?);
        w.write_record(["step", "t", "dt"])?;
        let mut t = sc.horizon;
        for (i, dt) in series.dt_history.iter().enumerate() {
            t -= dt;
            w.write_record([(i + 1).to_string(), t.max(0.0).to_string(), dt.to_string()])?;
        }
        w.flush()?;
    }
    out.text("value.gp", &output::slice_plot("value_d0.csv", "e_p", "e_v", "V(e_p, e_v, d = 0)"))?;
    let summary = SolveSummary {
        axes: grid.names().to_vec(),
        counts: grid.axes().iter().map(|a| a.count).collect(),
        mins: grid.axes().iter().map(|a| a.min).collect(),
        maxs: grid.axes().iter().map(|a| a.max).collect(),
        nodes: grid.len(),
        cost,
        spec: sc.spec(),
        horizon: sc.horizon,
        cfl: sc.cfl,
        steps: series.steps,
        value_min: v.min(),
        value_max: v.max(),
        warnings,
    };
    out.json("solve.json", &summary)?;
    Ok((series, summary))
}

/// `solve`: stabilization game on the scenario grid; writes the `t = 0` dump.
pub fn cmd_solve(sc: &Scenario, out: &Path) -> Result<SolveSummary> {
    let mut dir = OutDir::create(out)?;
    let (_, summary) = solve_into(sc, &mut dir)?;
    dir.finish("solve", sc)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CornerValue {
    pub e_p: f64,
    pub e_v: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReachSummary {
    pub threshold: f64,
    pub steps: usize,
    pub safe_nodes: usize,
    pub total_nodes: usize,
    /// `(d, area)` of the safe set per delay slice.
    pub slice_areas: Vec<(f64, f64)>,
    /// Step-2 value at the four `(e_p, e_v)` corners of the largest-delay slice.
    pub corners: Vec<CornerValue>,
}

/// Step 2: worst case of the terminal position error for the closed loop
/// under the stationary step-1 feedback, then its safe set.
pub(crate) fn reach_into(sc: &Scenario, step1: ValueFunction, out: &mut OutDir) -> Result<(ValueFunction, ReachSummary)> {
    sc.validate()?;
    let grid = step1.grid.clone();
    let game = stabilization_game(sc, &step1)?;
    let policy = ValueSeries {
        slices: vec![step1],
        steps: 0,
        dt_history: Vec::new(),
    };
    let series = solve_hjb_closed_loop(&grid, game.params, game.spec, &policy, sc.solve_options())?;
    let v = series.initial().clone();
    let safe = extract_safe_set(&v, sc.threshold);

    v.write_dump(out.file("reach_value.bin")?)?;
    {
        let mut w = csv::Writer::from_writer(out.file("safe_set.csv")?);
        w.write_record(["e_p", "e_v", "d", "V", "safe"])?;
        for node in 0..grid.len() {
            let x = grid.point(node);
            w.write_record([
                x[0].to_string(),
                x[1].to_string(),
                x[2].to_string(),
                v.values[node].to_string(),
                u8::from(safe.mask[node]).to_string(),
            ])?;
        }
        w.flush()?;
    }
    {
        let mut w = csv::Writer::from_writer(out.file("safe_areas.csv")?);
        w.write_record(["d", "area"])?;
        for (d, a) in &safe.slice_areas {
            w.write_record([d.to_string(), a.to_string()])?;
        }
        w.flush()?;
    }
    let nd = grid.axis(2).count;
    let mut picks = vec![0, nd / 2, nd - 1];
    picks.dedup();
    let mut plot = String::new();
    for k in picks {
        let name = format!("reach_slice_k{k}.csv");
        v.write_slice_csv(out.file(&name)?, k)?;
        let title = format!("V at d = {}, safe below {}", grid.coords(2)[k], sc.threshold);
        plot.push_str(&output::slice_plot(&name, "e_p", "e_v", &title));
        plot.push_str("pause -1\n");
    }
    out.text("safe_set.gp", &plot)?;

    let (np, nv) = (grid.axis(0).count, grid.axis(1).count);
    let corners = [(0, 0), (np - 1, nv - 1), (0, nv - 1), (np - 1, 0)]
        .iter()
        .map(|&(i, j)| CornerValue {
            e_p: grid.coords(0)[i],
            e_v: grid.coords(1)[j],
            value: v.values[grid.index(&[i, j, nd - 1])],
        })
        .collect();
    let summary = ReachSummary {
        threshold: sc.threshold,
        steps: series.steps,
        safe_nodes: safe.count(),
        total_nodes: grid.len(),
        slice_areas: safe.slice_areas.clone(),
        corners,
    };
    out.json("reach.json", &summary)?;
    Ok((v, summary))
}

/// `reach`: needs the step-1 dump named by `value_file`.
pub fn cmd_reach(sc: &Scenario, out: &Path) -> Result<ReachSummary> {
    let step1 = scenario_value(sc)?;
    let mut dir = OutDir::create(out)?;
    let (_, summary) = reach_into(sc, Arc::unwrap_or_clone(step1), &mut dir)?;
    dir.finish("reach", sc)?;
    Ok(summary)
}
