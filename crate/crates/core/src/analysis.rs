//! Stability certification and empirical checks: the Lyapunov-Krasovskii
//! delay bound, a finite-horizon oscillation classifier, the
//! conservativeness sweep, and the upper-value sandwich for the true system.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dde_sim::{simulate, DelaySignal, SimOptions, Trajectory, ZeroControl};
use crate::error::{Error, Result};
use crate::hji::ValueFunction;
use crate::models::{CoupledTdsModel, ErrorState, ModelParams};
use crate::policy::{make_dde_controller, ControlPolicy};

/// Outcome of `4 b1 b2 >= (T1*^2 + T2*^2) k1 k2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LkVerdict {
    pub satisfied: bool,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
}

pub fn lk_condition(k1: f64, k2: f64, b1: f64, b2: f64, t1: f64, t2: f64) -> Result<LkVerdict> {
    if [k1, k2, b1, b2, t1, t2].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::precondition("delay-bound parameters must be finite and nonnegative"));
    }
    let lhs = 4.0 * b1 * b2;
    let rhs = (t1 * t1 + t2 * t2) * (k1 * k2);
    let margin = lhs - rhs;
    Ok(LkVerdict {
        satisfied: margin >= 0.0,
        lhs,
        rhs,
        margin,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityClass {
    Converged,
    BoundedOscillation,
    Growing,
    /// Too few oscillation peaks to judge and not converged.
    Indeterminate,
}

impl fmt::Display for StabilityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StabilityClass::Converged => "converged",
            StabilityClass::BoundedOscillation => "bounded_oscillation",
            StabilityClass::Growing => "growing",
            StabilityClass::Indeterminate => "indeterminate",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityThresholds {
    pub eps_grow: f64,
    pub eps_conv: f64,
}

impl Default for StabilityThresholds {
    fn default() -> Self {
        StabilityThresholds {
            eps_grow: 0.02,
            eps_conv: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityVerdict {
    pub class: StabilityClass,
    /// Geometric mean of the ratios between peaks one oscillation period
    /// apart; zero when there are no peaks.
    pub envelope_ratio: f64,
    /// Largest `|e_p|` over the trailing tenth of the window.
    pub final_error: f64,
    pub peak_count: usize,
}

/// Fraction of the window used to measure the final error.
const TAIL_FRACTION: f64 = 0.1;
/// Peaks below this magnitude are treated as numerical noise.
const PEAK_FLOOR: f64 = 1e-9;

/// Classifies the position-error signal `values(times)` restricted to `window`.
pub fn classify_signal(times: &[f64], values: &[f64], window: (f64, f64), th: StabilityThresholds) -> StabilityVerdict {
    let idx: Vec<usize> = (0..times.len()).filter(|&i| times[i] >= window.0 && times[i] <= window.1).collect();
    if idx.is_empty() {
        return StabilityVerdict {
            class: StabilityClass::Indeterminate,
            envelope_ratio: f64::NAN,
            final_error: f64::NAN,
            peak_count: 0,
        };
    }
    let a: Vec<f64> = idx.iter().map(|&i| values[i].abs()).collect();
    let non_finite = a.iter().any(|v| !v.is_finite());
    let mut peaks = Vec::new();
    for i in 1..a.len().saturating_sub(1) {
        if a[i] > a[i - 1] && a[i] >= a[i + 1] && a[i] > PEAK_FLOOR {
            peaks.push(a[i]);
        }
    }
    let t_end = times[*idx.last().unwrap()];
    let tail_start = t_end - TAIL_FRACTION * (t_end - times[idx[0]]);
    let final_error = idx
        .iter()
        .zip(&a)
        .filter(|(&i, _)| times[i] >= tail_start)
        .map(|(_, v)| *v)
        .fold(0.0, f64::max);

    // peaks of |e_p| alternate in sign, so i and i + 2 are one period apart
    let envelope_ratio = if peaks.len() >= 3 {
        let logs: Vec<f64> = peaks.windows(3).map(|w| (w[2] / w[0]).ln()).collect();
        (logs.iter().sum::<f64>() / logs.len() as f64).exp()
    } else if peaks.len() == 2 {
        (peaks[1] / peaks[0]).powi(2)
    } else {
        0.0
    };

    let class = if non_finite || envelope_ratio > 1.0 + th.eps_grow {
        StabilityClass::Growing
    } else if final_error < th.eps_conv && envelope_ratio < 1.0 {
        StabilityClass::Converged
    } else if peaks.len() < 3 {
        StabilityClass::Indeterminate
    } else {
        StabilityClass::BoundedOscillation
    };
    StabilityVerdict {
        class,
        envelope_ratio: if non_finite { f64::INFINITY } else { envelope_ratio },
        final_error: if non_finite { f64::INFINITY } else { final_error },
        peak_count: peaks.len(),
    }
}

/// Classifies the position error `p1 - p2` of a double-integrator run.
pub fn classify_stability(traj: &Trajectory, window: (f64, f64)) -> StabilityVerdict {
    classify_signal(&traj.times, &traj.position_errors(), window, StabilityThresholds::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub horizon: f64,
    pub dt: f64,
    pub omega: f64,
    pub phase: f64,
    /// Initial error `(e_p, e_v)`, split symmetrically between the agents.
    pub initial_error: (f64, f64),
    pub thresholds: StabilityThresholds,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            horizon: 400.0,
            dt: 0.01,
            omega: crate::dde_sim::DEFAULT_DELAY_OMEGA,
            phase: 0.0,
            initial_error: (1.0, 0.0),
            thresholds: StabilityThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: f64,
    pub b: f64,
    pub tstar: f64,
    pub lk: LkVerdict,
    pub stability: StabilityVerdict,
}

impl SweepRow {
    /// Stable in simulation although the delay bound is not certified.
    pub fn is_conservative_witness(&self) -> bool {
        !self.lk.satisfied && self.stability.class == StabilityClass::Converged
    }
}

fn sweep_point(k: f64, b: f64, tstar: f64, opts: &SweepOptions) -> Result<SweepRow> {
    let lk = lk_condition(k, k, b, b, tstar, tstar)?;
    let model = CoupledTdsModel::new(ModelParams::new(k, b, 0.0)?)?;
    let delay = DelaySignal::sinusoidal(tstar, opts.omega, opts.phase);
    let delays = [delay.clone(), delay];
    let x0 = ErrorState::new(opts.initial_error.0, opts.initial_error.1).to_full_state();
    let window = (0.0, opts.horizon);
    let stability = match simulate(&model, &x0, &delays, &mut ZeroControl { dim: 2 }, SimOptions::new(opts.horizon, opts.dt)) {
        Ok(traj) => classify_signal(&traj.times, &traj.position_errors(), window, opts.thresholds),
        Err(Error::Divergence { .. }) => StabilityVerdict {
            class: StabilityClass::Growing,
            envelope_ratio: f64::INFINITY,
            final_error: f64::INFINITY,
            peak_count: 0,
        },
        Err(e) => return Err(e),
    };
    Ok(SweepRow { k, b, tstar, lk, stability })
}

/// Simulates the uncontrolled system under a sinusoidal delay for every
/// `(k, b, T*)` combination and pairs the certificate with the observed
/// behavior. Rows come out in nested `k`, `b`, `T*` order.
pub fn sweep_conservativeness(k_range: &[f64], b_range: &[f64], tstar_range: &[f64], opts: &SweepOptions) -> Result<Vec<SweepRow>> {
    if k_range.is_empty() || b_range.is_empty() || tstar_range.is_empty() {
        return Err(Error::precondition("sweep ranges must be nonempty"));
    }
    let points: Vec<(f64, f64, f64)> = k_range
        .iter()
        .flat_map(|&k| b_range.iter().flat_map(move |&b| tstar_range.iter().map(move |&t| (k, b, t))))
        .collect();
    #[cfg(feature = "parallel")]
    let rows = {
        use rayon::prelude::*;
        points.par_iter().map(|&(k, b, t)| sweep_point(k, b, t, opts)).collect::<Vec<_>>()
    };
    #[cfg(not(feature = "parallel"))]
    let rows = points.iter().map(|&(k, b, t)| sweep_point(k, b, t, opts)).collect::<Vec<_>>();
    rows.into_iter().collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["k", "b", "Tstar", "lk_lhs", "lk_rhs", "lk_ok", "class", "envelope_ratio"])?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            r.b.to_string(),
            r.tstar.to_string(),
            r.lk.lhs.to_string(),
            r.lk.rhs.to_string(),
            r.lk.satisfied.to_string(),
            r.stability.class.to_string(),
            r.stability.envelope_ratio.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `C = T e^{L T} - (e^{L T} - 1) / L`, the constant of the approximation
/// error bound `|J_b - J_a| <= C d_max`.
pub fn theorem2_constant(l_f: f64, horizon: f64) -> Result<f64> {
    if !(horizon > 0.0) {
        return Err(Error::precondition("horizon must be positive"));
    }
    if !(l_f >= 1e-12) {
        return Ok(0.0);
    }
    let x = l_f * horizon;
    if x < 0.1 {
        // T sum_{n>=1} n x^n / (n+1)!, cancellation-free
        let mut term = 1.0;
        let mut sum = 0.0;
        for n in 1..=16 {
            term *= x / (n + 1) as f64;
            sum += n as f64 * term;
        }
        return Ok(horizon * sum);
    }
    Ok(horizon * x.exp() - x.exp_m1() / l_f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayFamily {
    Constant,
    Sinusoidal,
    Piecewise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichOptions {
    pub n_samples: usize,
    pub d_max: f64,
    pub horizon: f64,
    pub dt: f64,
    pub seed: u64,
    /// Tolerance as a fraction of the value range.
    pub tol_fraction: f64,
    /// Initial errors are drawn uniformly from `[-box, box]^2`.
    pub initial_box: f64,
    /// Delay families to draw from, uniformly.
    pub families: Vec<DelayFamily>,
}

impl SandwichOptions {
    pub fn new(n_samples: usize, d_max: f64, horizon: f64, seed: u64) -> Self {
        SandwichOptions {
            n_samples,
            d_max,
            horizon,
            dt: 1e-3,
            seed,
            tol_fraction: 0.1,
            initial_box: 1.0,
            families: vec![DelayFamily::Constant, DelayFamily::Sinusoidal, DelayFamily::Piecewise],
        }
    }
}

/// Draws one delay signal of the given family, bounded by `d_max`.
pub fn random_delay<R: Rng>(rng: &mut R, family: DelayFamily, d_max: f64, horizon: f64) -> DelaySignal {
    match family {
        DelayFamily::Constant => {
            let c = rng.random_range(0.0..=d_max);
            DelaySignal::piecewise(d_max, vec![(0.0, c)])
        }
        DelayFamily::Sinusoidal => {
            let omega = rng.random_range(0.1..=2.0);
            let phase = rng.random_range(0.0..=std::f64::consts::TAU);
            DelaySignal::sinusoidal(d_max, omega, phase)
        }
        DelayFamily::Piecewise => {
            let segments = (0..5).map(|i| (i as f64 * horizon / 5.0, rng.random_range(0.0..=d_max))).collect();
            DelaySignal::piecewise(d_max, segments)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichRow {
    pub sample: usize,
    pub family: DelayFamily,
    pub initial_error: (f64, f64),
    pub d0: f64,
    pub j_true: f64,
    pub v_upper: f64,
    /// `V_upper + tol - J_true`; negative means a violation.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub rows: Vec<SandwichRow>,
    pub tolerance: f64,
    pub violations: usize,
    pub worst_margin: f64,
}

/// Running plus terminal cost of a true-system rollout, trapezoidal in time.
pub fn trajectory_cost(traj: &Trajectory, cost: &crate::hji::CostSpec) -> f64 {
    let es = traj.error_states();
    let x = |i: usize| [es[i].e_p, es[i].e_v, traj.delays[i][1]];
    let mut j = 0.0;
    for i in 1..traj.len() {
        let h = traj.times[i] - traj.times[i - 1];
        j += 0.5 * h * (cost.stage_cost(&x(i - 1)) + cost.stage_cost(&x(i)));
    }
    j + traj.len().checked_sub(1).map_or(0.0, |last| cost.terminal_cost(&x(last)))
}

/// Rolls the true delayed system under `policy` for random delay signals
/// and initial errors, and compares the realized cost with the upper value
/// `V_upper(x0, d(0))`.
pub fn verify_value_sandwich(v_upper: &ValueFunction, model: &CoupledTdsModel, policy: &ControlPolicy, opts: &SandwichOptions) -> Result<SandwichReport> {
    if opts.n_samples == 0 || opts.families.is_empty() {
        return Err(Error::precondition("sandwich check needs samples and delay families"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let draws: Vec<(DelayFamily, (f64, f64), DelaySignal)> = (0..opts.n_samples)
        .map(|_| {
            let family = opts.families[rng.random_range(0..opts.families.len())];
            let e0 = (
                rng.random_range(-opts.initial_box..=opts.initial_box),
                rng.random_range(-opts.initial_box..=opts.initial_box),
            );
            let delay = random_delay(&mut rng, family, opts.d_max, opts.horizon);
            (family, e0, delay)
        })
        .collect();

    let tolerance = opts.tol_fraction * v_upper.range();
    let cost = policy.game.cost;
    let run = |(sample, (family, e0, delay)): (usize, &(DelayFamily, (f64, f64), DelaySignal))| -> Result<SandwichRow> {
        let delays = [delay.clone(), delay.clone()];
        let x0 = ErrorState::new(e0.0, e0.1).to_full_state();
        let mut ctrl = make_dde_controller(policy.clone());
        let traj = simulate(model, &x0, &delays, &mut ctrl, SimOptions::new(opts.horizon, opts.dt))?;
        let j_true = trajectory_cost(&traj, &cost);
        let d0 = delay.eval(0.0);
        let v = v_upper.interpolate(&[e0.0, e0.1, d0]);
        Ok(SandwichRow {
            sample,
            family: *family,
            initial_error: *e0,
            d0,
            j_true,
            v_upper: v,
            margin: v + tolerance - j_true,
        })
    };
    #[cfg(feature = "parallel")]
    let rows = {
        use rayon::prelude::*;
        draws.par_iter().enumerate().map(run).collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let rows = draws.iter().enumerate().map(run).collect::<Result<Vec<_>>>()?;

    let violations = rows.iter().filter(|r| r.margin < 0.0).count();
    let worst_margin = rows.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);
    Ok(SandwichReport {
        rows,
        tolerance,
        violations,
        worst_margin,
    })
}

pub fn write_sandwich_csv<W: Write>(report: &SandwichReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["sample", "J_true", "V_upper", "margin"])?;
    for r in &report.rows {
        w.write_record([r.sample.to_string(), r.j_true.to_string(), r.v_upper.to_string(), r.margin.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Largest `upper - lower` over the grid nodes.
pub fn worst_case_gap(upper: &ValueFunction, lower: &ValueFunction) -> Result<f64> {
    if upper.grid != lower.grid {
        return Err(Error::precondition("value functions live on different grids"));
    }
    Ok(upper.values.iter().zip(&lower.values).map(|(u, l)| u - l).fold(f64::NEG_INFINITY, f64::max))
}

/// Least-squares fit `gap ~ C d_max` through the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapFit {
    pub slope: f64,
    /// `|gap - C d| / |gap|` in the Euclidean norm.
    pub relative_residual: f64,
}

pub fn fit_linear_gap(d_max: &[f64], gaps: &[f64]) -> Result<GapFit> {
    if d_max.len() != gaps.len() || d_max.len() < 2 {
        return Err(Error::precondition("gap fit needs at least two (d_max, gap) pairs"));
    }
    let sdd: f64 = d_max.iter().map(|d| d * d).sum();
    let sgg: f64 = gaps.iter().map(|g| g * g).sum();
    if sdd == 0.0 || sgg == 0.0 {
        return Err(Error::precondition("gap fit is degenerate"));
    }
    let slope = d_max.iter().zip(gaps).map(|(d, g)| d * g).sum::<f64>() / sdd;
    let res: f64 = d_max.iter().zip(gaps).map(|(d, g)| (g - slope * d).powi(2)).sum();
    Ok(GapFit {
        slope,
        relative_residual: (res / sgg).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hji::{CostSpec, DelayGame, Grid, HamiltonianSpec};
    use crate::policy::ControlSource;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn lk_examples() {
        let v = lk_condition(1.0, 1.0, 0.15, 0.15, 0.25, 0.25).unwrap();
        assert_abs_diff_eq!(v.lhs, 0.09, epsilon = 1e-15);
        assert_abs_diff_eq!(v.rhs, 0.125, epsilon = 1e-15);
        assert!(!v.satisfied);
        assert!(lk_condition(7.0, 3.0, 0.1, 0.2, 0.0, 0.0).unwrap().satisfied);
        let v = lk_condition(1.0, 1.0, 0.5, 0.5, 0.5, 0.5).unwrap();
        assert_eq!((v.lhs, v.rhs, v.satisfied), (1.0, 0.5, true));
        assert!(lk_condition(-1.0, 1.0, 0.1, 0.1, 0.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn lk_symmetric_under_agent_swap(k1 in 0.0..5.0f64, k2 in 0.0..5.0f64, b1 in 0.0..2.0f64, b2 in 0.0..2.0f64, t1 in 0.0..2.0f64, t2 in 0.0..2.0f64) {
            let a = lk_condition(k1, k2, b1, b2, t1, t2).unwrap();
            let b = lk_condition(k2, k1, b2, b1, t2, t1).unwrap();
            prop_assert_eq!(a, b);
            prop_assert_eq!(a.satisfied, a.margin >= 0.0);
        }
    }

    fn sampled(f: impl Fn(f64) -> f64, horizon: f64) -> (Vec<f64>, Vec<f64>) {
        let t: Vec<f64> = (0..=(horizon * 100.0) as usize).map(|i| i as f64 * 0.01).collect();
        let v = t.iter().map(|&t| f(t)).collect();
        (t, v)
    }

    #[test]
    fn decaying_oscillation_converges() {
        let (t, v) = sampled(|t| (-0.1 * t).exp() * t.cos(), 60.0);
        let s = classify_signal(&t, &v, (0.0, 60.0), StabilityThresholds::default());
        assert_eq!(s.class, StabilityClass::Converged);
        assert!((s.envelope_ratio - (-0.2 * std::f64::consts::PI).exp()).abs() < 0.01, "{}", s.envelope_ratio);
    }

    #[test]
    fn growing_oscillation_is_growing() {
        let (t, v) = sampled(|t| (0.05 * t).exp() * t.cos(), 60.0);
        let s = classify_signal(&t, &v, (0.0, 60.0), StabilityThresholds::default());
        assert_eq!(s.class, StabilityClass::Growing);
        assert!(s.envelope_ratio > 1.02);
    }

    #[test]
    fn zero_signal_converges() {
        let (t, v) = sampled(|_| 0.0, 10.0);
        let s = classify_signal(&t, &v, (0.0, 10.0), StabilityThresholds::default());
        assert_eq!(s.class, StabilityClass::Converged);
        assert_eq!(s.final_error, 0.0);
    }

    #[test]
    fn sustained_oscillation_is_bounded() {
        let (t, v) = sampled(|t| 0.5 * t.cos(), 60.0);
        let s = classify_signal(&t, &v, (0.0, 60.0), StabilityThresholds::default());
        assert_eq!(s.class, StabilityClass::BoundedOscillation);
        let (t, v) = sampled(|t| 0.5 + 0.0 * t, 60.0);
        let s = classify_signal(&t, &v, (0.0, 60.0), StabilityThresholds::default());
        assert_eq!(s.class, StabilityClass::Indeterminate);
    }

    #[test]
    fn sweep_delay_free_row_is_stable_and_certified() {
        let opts = SweepOptions {
            horizon: 200.0,
            ..SweepOptions::default()
        };
        let rows = sweep_conservativeness(&[0.05, 0.1], &[0.1], &[0.0], &opts).unwrap();
        assert_eq!(rows.len(), 2);
        for r in rows {
            assert!(r.lk.satisfied);
            assert_eq!(r.stability.class, StabilityClass::Converged);
        }
        assert!(sweep_conservativeness(&[], &[0.1], &[0.0], &opts).is_err());
    }

    #[test]
    fn sweep_csv_header() {
        let rows = sweep_conservativeness(&[0.1], &[0.1], &[0.0], &SweepOptions::default()).unwrap();
        let mut out = Vec::new();
        write_sweep_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("k,b,Tstar,lk_lhs,lk_rhs,lk_ok,class,envelope_ratio\n0.1,0.1,0,"));
    }

    #[test]
    fn theorem2_examples() {
        assert_abs_diff_eq!(theorem2_constant(1.0, 1.0).unwrap(), 1.0, epsilon = 1e-12);
        let e2 = 2f64.exp();
        assert_abs_diff_eq!(theorem2_constant(2.0, 1.0).unwrap(), (e2 + 1.0) / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(theorem2_constant(2.0, 1.0).unwrap(), 4.1945, epsilon = 1e-4);
        assert_eq!(theorem2_constant(0.0, 1.0).unwrap(), 0.0);
        assert_eq!(theorem2_constant(-1.0, 1.0).unwrap(), 0.0);
        let tiny = theorem2_constant(1e-9, 2.0).unwrap();
        assert_abs_diff_eq!(tiny, 1e-9 * 4.0 / 2.0, epsilon = 1e-17);
        assert!(theorem2_constant(1.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn theorem2_series_agrees_near_switch(l in 0.01..0.2f64, t in 0.5..1.0f64) {
            let x: f64 = l * t;
            let closed = t * x.exp() - x.exp_m1() / l;
            prop_assert!((theorem2_constant(l, t).unwrap() - closed).abs() <= 1e-12 * closed.abs().max(1e-6));
        }
    }

    #[test]
    fn gap_fit_examples() {
        let lin = fit_linear_gap(&[0.1, 0.2, 0.4], &[0.3, 0.6, 1.2]).unwrap();
        assert_abs_diff_eq!(lin.slope, 3.0, epsilon = 1e-12);
        assert!(lin.relative_residual < 1e-12);
        let quad = fit_linear_gap(&[0.1, 0.2, 0.4], &[0.01, 0.04, 0.16]).unwrap();
        assert!((quad.relative_residual - 0.265).abs() < 0.001, "{}", quad.relative_residual);
    }

    #[test]
    fn idle_adversary_leaves_large_margin() {
        let params = ModelParams::new(1.0, 0.0, 0.4).unwrap();
        let grid = Grid::default_delay_game([21, 21, 5], 0.24).unwrap();
        let game = DelayGame::new(params, HamiltonianSpec::new(0.4, 0.24), CostSpec::stabilization()).unwrap();
        let series = crate::hji::solve_hji(&grid, params, game.cost, game.spec, crate::hji::SolveOptions::new(2.0)).unwrap();
        let v = series.initial();
        let policy = ControlPolicy::new(ControlSource::ValueFunction(std::sync::Arc::new(v.clone())), game);
        let model = CoupledTdsModel::new(params).unwrap();
        let mut opts = SandwichOptions::new(6, 0.0, 2.0, 7);
        opts.dt = 1e-2;
        let report = verify_value_sandwich(v, &model, &policy, &opts).unwrap();
        assert_eq!(report.violations, 0);
        assert!(report.rows.iter().all(|r| r.d0 == 0.0 && r.margin >= report.tolerance));
        let again = verify_value_sandwich(v, &model, &policy, &opts).unwrap();
        assert_eq!(report, again);

        let mut out = Vec::new();
        write_sandwich_csv(&report, &mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().starts_with("sample,J_true,V_upper,margin\n0,"));
    }
}
