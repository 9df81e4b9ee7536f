use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::Serialize;

use super::verify::{gap_scaling, lemma1_exponent, lemma1_exponent_scenario, sandwich};
use super::{feedback_policy, max_abs_ep_between, reach_into, simulate_into, solve_into, DelayChoice, OutDir, Scenario};
use crate::affine_approx::residual_w;
use crate::analysis::{sweep_conservativeness, write_sweep_csv, StabilityClass, StabilityThresholds, SweepOptions};
use crate::dde_sim::{simulate, SimOptions, Trajectory};
use crate::error::{Error, Result};
use crate::hji::ValueFunction;
use crate::models::{CoupledTdsModel, ErrorState};
use crate::policy::DdeController;

/// Position error must stay inside this after `FIG3_SETTLE_BY`.
const FIG3_TOL: f64 = 0.05;
const FIG3_SETTLE_BY: f64 = 90.0;
/// Box both error coordinates must enter in the closed-loop fan.
const FAN_BOX: f64 = 0.1;
const SETTLING_RATIO: f64 = 1.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Figure {
    Fig2,
    Fig3,
    Fig4,
    Fig5,
}

impl Figure {
    pub const ALL: [Figure; 4] = [Figure::Fig2, Figure::Fig3, Figure::Fig4, Figure::Fig5];

    pub fn name(self) -> &'static str {
        match self {
            Figure::Fig2 => "fig2",
            Figure::Fig3 => "fig3",
            Figure::Fig4 => "fig4",
            Figure::Fig5 => "fig5",
        }
    }
}

impl FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Figure::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::config(format!("unknown figure {s:?}")))
    }
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Criterion {
    pub id: String,
    pub pass: bool,
    pub detail: String,
}

impl Criterion {
    fn new(id: &str, pass: bool, detail: impl Into<String>) -> Self {
        Criterion {
            id: id.to_string(),
            pass,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}] {}", if self.pass { "PASS" } else { "FAIL" }, self.id, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReproReport {
    pub figure: Figure,
    pub criteria: Vec<Criterion>,
}

impl ReproReport {
    pub fn passed(&self) -> bool {
        self.criteria.iter().all(|c| c.pass)
    }

    pub fn get(&self, id: &str) -> Option<&Criterion> {
        self.criteria.iter().find(|c| c.id == id)
    }
}

/// `repro`: the full pipeline behind one figure, with a PASS/FAIL line per
/// checked property in `criteria.txt`.
pub fn cmd_repro(sc: &Scenario, figure: Figure, out: &Path) -> Result<ReproReport> {
    sc.validate()?;
    let mut dir = OutDir::create(out)?;
    let criteria = match figure {
        Figure::Fig2 => repro_fig2(sc, &mut dir)?,
        Figure::Fig3 => repro_fig3(sc, &mut dir)?,
        Figure::Fig4 => repro_fig4(sc, &mut dir)?,
        Figure::Fig5 => repro_fig5(sc, &mut dir)?,
    };
    let report = ReproReport { figure, criteria };
    let text: String = report.criteria.iter().map(|c| format!("{c}\n")).collect();
    dir.text("criteria.txt", &text)?;
    dir.json("repro.json", &report)?;
    dir.finish(&format!("repro {figure}"), sc)?;
    Ok(report)
}

fn solve_step(sc: &Scenario, dir: &mut OutDir) -> Result<ValueFunction> {
    let mut sub = dir.child("solve")?;
    let (series, _) = solve_into(sc, &mut sub)?;
    sub.finish("solve", sc)?;
    dir.adopt("solve", &sub);
    Ok(series.initial().clone())
}

fn repro_fig2(sc: &Scenario, dir: &mut OutDir) -> Result<Vec<Criterion>> {
    let opts = SweepOptions {
        horizon: sc.sweep_horizon,
        dt: sc.dt,
        omega: sc.omega,
        phase: sc.phase,
        initial_error: (sc.e0[0], sc.e0[1]),
        thresholds: StabilityThresholds::default(),
    };
    let rows = sweep_conservativeness(&sc.sweep_k, &sc.sweep_b, &sc.sweep_tstar, &opts)?;
    write_sweep_csv(&rows, dir.file("sweep.csv")?)?;
    dir.text(
        "sweep.gp",
        "set datafile separator ','\n\
         set xlabel 'k'\nset ylabel 'b'\nset zlabel 'T*'\n\
         splot 'sweep.csv' every ::1 using 1:2:(strcol(6) eq 'true' ? $3 : 1/0) title 'certified', \\\n\
         \x20     'sweep.csv' every ::1 using 1:2:(strcol(7) eq 'converged' ? $3 : 1/0) title 'converged'\n",
    )?;
    let certified = rows.iter().filter(|r| r.lk.satisfied).count();
    let bad = rows.iter().filter(|r| r.lk.satisfied && r.stability.class == StabilityClass::Growing).count();
    let witnesses: Vec<String> = rows
        .iter()
        .filter(|r| r.is_conservative_witness())
        .map(|r| format!("({}, {}, {})", r.k, r.b, r.tstar))
        .collect();
    Ok(vec![
        Criterion::new("7a", bad == 0, format!("{bad} of {certified} certified points classify growing ({} points swept)", rows.len())),
        Criterion::new(
            "7b",
            !witnesses.is_empty(),
            format!("{} uncertified points converge under the sinusoidal delay: {}", witnesses.len(), witnesses.join(" ")),
        ),
    ])
}

fn repro_fig3(sc: &Scenario, dir: &mut OutDir) -> Result<Vec<Criterion>> {
    let v = Arc::new(solve_step(sc, dir)?);
    let mut sub = dir.child("simulate")?;
    let (traj, summary) = simulate_into(sc, Some(v), &mut sub)?;
    sub.finish("simulate", sc)?;
    dir.adopt("simulate", &sub);

    let phase = |label: &str| summary.phases.iter().find(|p| p.label == label);
    let mut out = Vec::new();
    match phase("A") {
        Some(a) => out.push(Criterion::new(
            "2A",
            a.verdict.envelope_ratio < 1.0,
            format!("no delay on [{}, {}]: envelope ratio {:.4} < 1", a.start, a.end, a.verdict.envelope_ratio),
        )),
        None => out.push(Criterion::new("2A", false, "no delay-free phase")),
    }
    match phase("B") {
        Some(b) => out.push(Criterion::new(
            "2B",
            b.verdict.envelope_ratio > 1.02,
            format!("delay {} on [{}, {}]: envelope ratio {:.4} > 1.02", sc.tstar, b.start, b.end, b.verdict.envelope_ratio),
        )),
        None => out.push(Criterion::new("2B", false, "no uncontrolled delayed phase")),
    }
    let end = traj.times.last().copied().unwrap_or(0.0);
    let tail = max_abs_ep_between(&traj, FIG3_SETTLE_BY, end);
    out.push(Criterion::new(
        "2C",
        end >= FIG3_SETTLE_BY && tail < FIG3_TOL,
        format!("feedback from t = {}: max |e_p| on [{FIG3_SETTLE_BY}, {end}] = {tail:.4} < {FIG3_TOL}", sc.control_start),
    ));
    Ok(out)
}

fn repro_fig4(sc: &Scenario, dir: &mut OutDir) -> Result<Vec<Criterion>> {
    let step1 = solve_step(sc, dir)?;
    let mut sub = dir.child("reach")?;
    let (v, summary) = reach_into(sc, step1, &mut sub)?;
    sub.finish("reach", sc)?;
    dir.adopt("reach", &sub);

    let grid = &v.grid;
    let d_max = grid.axis(2).max;
    let picks: Vec<(f64, f64)> = [0.0, 0.5 * d_max, d_max]
        .iter()
        .map(|&d| summary.slice_areas[grid.nearest(2, d)])
        .collect();
    let shrinking = picks.windows(2).all(|w| w[1].1 <= w[0].1);
    let listing: Vec<String> = picks.iter().map(|(d, a)| format!("d = {d}: {a:.4}")).collect();

    let c = &summary.corners;
    // corners are (min, min), (max, max), (min, max), (max, min)
    let peaks_on_diagonal = c[0].value.min(c[1].value) > c[2].value.max(c[3].value);
    let corner_text: Vec<String> = c.iter().map(|c| format!("({}, {}) {:.4}", c.e_p, c.e_v, c.value)).collect();
    Ok(vec![
        Criterion::new("3a", shrinking, format!("safe-set area at threshold {} non-increasing: {}", sc.threshold, listing.join(", "))),
        Criterion::new(
            "3b",
            peaks_on_diagonal,
            format!("step-2 corner values at d = {d_max}: {}", corner_text.join(", ")),
        ),
    ])
}

/// First time after which both error coordinates stay inside `tol`.
pub(crate) fn settling_time(traj: &Trajectory, tol: f64) -> f64 {
    let es = traj.error_states();
    match es.iter().rposition(|e| e.e_p.abs() >= tol || e.e_v.abs() >= tol) {
        Some(i) if i + 1 < traj.len() => traj.times[i + 1],
        Some(i) => traj.times[i],
        None => traj.times.first().copied().unwrap_or(0.0),
    }
}

#[derive(Debug, Clone)]
struct FanRun {
    e0: (f64, f64),
    settle: f64,
    settled: bool,
    traj: Trajectory,
}

fn fan(sc: &Scenario, v: &Arc<ValueFunction>, kind: DelayChoice) -> Result<Vec<FanRun>> {
    let model = CoupledTdsModel::new(sc.params()?)?;
    let sig = sc.delay_signal_of(kind);
    let delays = [sig.clone(), sig];
    let mut runs = Vec::with_capacity(9);
    for ep in [-1.0, 0.0, 1.0] {
        for ev in [-1.0, 0.0, 1.0] {
            let mut ctrl = DdeController::starting_at(feedback_policy(sc, v.clone())?, sc.control_start);
            let x0 = ErrorState::new(ep, ev).to_full_state();
            let traj = simulate(&model, &x0, &delays, &mut ctrl, SimOptions::new(sc.sim_horizon, sc.dt))?;
            let settle = settling_time(&traj, FAN_BOX);
            // must stay inside over at least the trailing tenth of the run
            let settled = settle <= 0.9 * sc.sim_horizon;
            runs.push(FanRun {
                e0: (ep, ev),
                settle,
                settled,
                traj,
            });
        }
    }
    Ok(runs)
}

fn write_fan(dir: &mut OutDir, name: &str, runs: &[FanRun], stride: usize) -> Result<()> {
    let mut all = Trajectory::default();
    let mut labels = Vec::new();
    for (i, r) in runs.iter().enumerate() {
        let thin = super::decimate(&r.traj, stride);
        labels.extend(std::iter::repeat_n(i.to_string(), thin.len()));
        all.times.extend(thin.times);
        all.states.extend(thin.states);
        all.inputs.extend(thin.inputs);
        all.delays.extend(thin.delays);
    }
    all.write_csv(dir.file(name)?, Some(("ic", &labels)))
}

fn repro_fig5(sc: &Scenario, dir: &mut OutDir) -> Result<Vec<Criterion>> {
    let v = Arc::new(solve_step(sc, dir)?);
    let sin = fan(sc, &v, DelayChoice::Sinusoidal)?;
    let con = fan(sc, &v, DelayChoice::Constant)?;
    write_fan(dir, "fan_sinusoidal.csv", &sin, sc.csv_stride)?;
    write_fan(dir, "fan_constant.csv", &con, sc.csv_stride)?;
    {
        let mut w = csv::Writer::from_writer(dir.file("settling.csv")?);
        w.write_record(["delay", "e_p0", "e_v0", "settling_time", "settled"])?;
        for (kind, runs) in [("sinusoidal", &sin), ("constant", &con)] {
            for r in runs.iter() {
                w.write_record([kind.to_string(), r.e0.0.to_string(), r.e0.1.to_string(), r.settle.to_string(), r.settled.to_string()])?;
            }
        }
        w.flush()?;
    }
    dir.text(
        "fan.gp",
        "set datafile separator ','\n\
         set xlabel 'e_p'\nset ylabel 'e_v'\n\
         plot 'fan_sinusoidal.csv' every ::1 using 2:3 with lines title 'sinusoidal', \\\n\
         \x20    'fan_constant.csv' every ::1 using 2:3 with lines title 'constant'\n",
    )?;

    let count = |runs: &[FanRun]| runs.iter().filter(|r| r.settled).count();
    let mean = |runs: &[FanRun]| runs.iter().map(|r| r.settle).sum::<f64>() / runs.len() as f64;
    let (n_sin, n_con) = (count(&sin), count(&con));
    let (m_sin, m_con) = (mean(&sin), mean(&con));
    let ratio = m_con / m_sin;
    let all_settled = n_sin == sin.len() && n_con == con.len();
    let mut out = vec![
        Criterion::new(
            "4a",
            all_settled,
            format!("initial conditions reaching |e_p|, |e_v| < {FAN_BOX}: {n_sin}/9 sinusoidal, {n_con}/9 constant"),
        ),
        Criterion::new(
            "4b",
            all_settled && ratio >= SETTLING_RATIO,
            format!("mean settling time constant {m_con:.3} s vs sinusoidal {m_sin:.3} s, ratio {ratio:.3} (needs >= {SETTLING_RATIO})"),
        ),
    ];

    let lemma = lemma1_exponent()?;
    let diag = lemma1_exponent_scenario(sc)?;
    out.push(Criterion::new("5a", lemma.pass, format!("{}; {}", lemma.detail, diag.detail)));
    let model = CoupledTdsModel::new(sc.params()?)?;
    let mut worst: f64 = 0.0;
    for (kind, runs) in [(DelayChoice::Sinusoidal, &sin), (DelayChoice::Constant, &con)] {
        let sig = sc.delay_signal_of(kind);
        let delays = [sig.clone(), sig];
        for (i, r) in runs.iter().enumerate() {
            let rec = residual_w(&model, &r.traj, &delays)?;
            if kind == DelayChoice::Sinusoidal && i == 0 {
                rec.write_csv(dir.file("residuals.csv")?)?;
            }
            worst = worst.max(rec.max_ratio_to_delay());
        }
    }
    out.push(Criterion::new(
        "5b",
        worst <= sc.l_w,
        format!("max |w| / d over the 18 closed-loop runs = {worst:.4} (L_w = {})", sc.l_w),
    ));

    let (sw, _) = sandwich(sc, v, dir)?;
    out.push(Criterion::new("6a", sw.pass, sw.detail));
    let (gap, _) = gap_scaling(sc, dir)?;
    out.push(Criterion::new("6b", gap.pass, gap.detail));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn figures_parse() {
        for f in Figure::ALL {
            assert_eq!(f.name().parse::<Figure>().unwrap(), f);
        }
        assert!("fig1".parse::<Figure>().is_err());
    }

    #[test]
    fn settling_time_of_a_decaying_signal() {
        let times: Vec<f64> = (0..=100).map(|i| i as f64 * 0.1).collect();
        let states = times.iter().map(|t| ErrorState::new((-t).exp(), 0.0).to_full_state()).collect();
        let traj = Trajectory {
            states,
            inputs: vec![vec![0.0; 2]; times.len()],
            delays: vec![[0.0; 2]; times.len()],
            times,
        };
        // e^-t < 0.1 from t = ln 10 = 2.303
        assert!((settling_time(&traj, 0.1) - 2.4).abs() < 1e-12);
    }

    #[test]
    fn smoke_repro_runs_every_figure() {
        let sc = Scenario {
            sim_horizon: 3.0,
            sweep_horizon: 20.0,
            gap_grid: [7, 7, 5],
            ..Scenario::preset("smoke").unwrap()
        };
        for f in Figure::ALL {
            let tmp = tempfile::tempdir().unwrap();
            let r = cmd_repro(&sc, f, tmp.path()).unwrap();
            assert!(!r.criteria.is_empty());
            assert!(tmp.path().join("criteria.txt").exists());
        }
    }
}
