//! Fixed-step simulation of the coupled time-delay system.
//!
//! The integrator is classical RK4. Every delayed argument `x_j(s - d_j(s))`
//! at a stage time `s` is read from the recorded history; inside the
//! recorded range the history is a cubic Hermite spline over the stored
//! step endpoints, and queries that land inside the step being taken are
//! interpolated between the last sample and the current stage state.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Agent, CoupledDynamics, ErrorState};

/// Time-stamped record of past states with a constant pre-history.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    dim: usize,
    t0: f64,
    initial: Vec<f64>,
    times: Vec<f64>,
    states: Vec<f64>,
    /// Per interval `[t_i, t_{i+1}]`: derivative at both ends under the
    /// input held over that step. Empty when samples were pushed without
    /// derivative information.
    derivs: Vec<(Vec<f64>, Vec<f64>)>,
}

impl HistoryBuffer {
    /// Empty buffer whose pre-history is the constant `initial`.
    pub fn new(t0: f64, initial: Vec<f64>) -> Self {
        HistoryBuffer {
            dim: initial.len(),
            t0,
            initial,
            times: Vec::new(),
            states: Vec::new(),
            derivs: Vec::new(),
        }
    }

    /// Buffer holding `x0` at `t0` and the constant pre-history `x(t) = x0`.
    pub fn starting_at(t0: f64, x0: &[f64]) -> Self {
        let mut buf = HistoryBuffer::new(t0, x0.to_vec());
        buf.times.push(t0);
        buf.states.extend_from_slice(x0);
        buf
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn initial_value(&self) -> &[f64] {
        &self.initial
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_time(&self) -> Option<f64> {
        self.times.last().copied()
    }

    pub fn last_state(&self) -> Option<&[f64]> {
        self.len().checked_sub(1).map(|i| self.state(i))
    }

    pub fn sample(&self, i: usize) -> (f64, &[f64]) {
        (self.times[i], self.state(i))
    }

    fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    /// Appends a sample. Times must be strictly increasing.
    pub fn push(&mut self, t: f64, state: &[f64]) -> Result<()> {
        if state.len() != self.dim {
            return Err(Error::config(format!(
                "history sample has dimension {}, expected {}",
                state.len(),
                self.dim
            )));
        }
        if let Some(last) = self.last_time() {
            if t <= last {
                return Err(Error::config(format!("history time {t} does not follow {last}")));
            }
        }
        self.times.push(t);
        self.states.extend_from_slice(state);
        Ok(())
    }

    /// Appends a sample together with the derivatives at both ends of the
    /// interval it closes, enabling Hermite lookups on that interval.
    pub fn push_step(&mut self, t: f64, state: &[f64], deriv_start: Vec<f64>, deriv_end: Vec<f64>) -> Result<()> {
        if self.derivs.len() + 1 != self.len() {
            return Err(Error::config("step derivatives require a derivative record for every earlier interval"));
        }
        self.push(t, state)?;
        self.derivs.push((deriv_start, deriv_end));
        Ok(())
    }

    /// Piecewise-linear lookup.
    ///
    /// Returns `initial_value` for `t <= t0`, interpolates between
    /// bracketing samples and extrapolates linearly from the last two
    /// samples past the end of the record.
    pub fn lookup(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.lookup_into(t, &mut out, false)?;
        Ok(out)
    }

    /// Like [`lookup`](Self::lookup) but uses cubic Hermite interpolation on
    /// intervals that carry derivative records.
    pub fn lookup_dense(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.lookup_into(t, &mut out, true)?;
        Ok(out)
    }

    pub(crate) fn lookup_into(&self, t: f64, out: &mut [f64], dense: bool) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::config("history lookup on an empty buffer"));
        }
        if t <= self.t0 {
            out.copy_from_slice(&self.initial);
            return Ok(());
        }
        let idx = self.times.partition_point(|&s| s <= t);
        if idx == 0 {
            // between t0 and the first recorded sample
            let (t1, x1) = (self.times[0], self.state(0));
            lerp_into(out, &self.initial, x1, (t - self.t0) / (t1 - self.t0));
            return Ok(());
        }
        let lo = idx - 1;
        if self.times[lo] == t {
            out.copy_from_slice(self.state(lo));
            return Ok(());
        }
        if idx == n {
            if n == 1 {
                out.copy_from_slice(self.state(0));
            } else {
                let (ta, tb) = (self.times[n - 2], self.times[n - 1]);
                lerp_into(out, self.state(n - 2), self.state(n - 1), (t - ta) / (tb - ta));
            }
            return Ok(());
        }
        let (ta, tb) = (self.times[lo], self.times[idx]);
        let s = (t - ta) / (tb - ta);
        match self.derivs.get(lo) {
            Some((da, db)) if dense => {
                let h = tb - ta;
                let s2 = s * s;
                let s3 = s2 * s;
                let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
                let h10 = s3 - 2.0 * s2 + s;
                let h01 = -2.0 * s3 + 3.0 * s2;
                let h11 = s3 - s2;
                let (xa, xb) = (self.state(lo), self.state(idx));
                for i in 0..self.dim {
                    out[i] = h00 * xa[i] + h10 * h * da[i] + h01 * xb[i] + h11 * h * db[i];
                }
            }
            _ => lerp_into(out, self.state(lo), self.state(idx), s),
        }
        Ok(())
    }
}

fn lerp_into(out: &mut [f64], a: &[f64], b: &[f64], s: f64) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = x + (y - x) * s;
    }
}

/// Piecewise-linear lookup of `x(t_query)`.
pub fn history_lookup(buf: &HistoryBuffer, t_query: f64) -> Result<Vec<f64>> {
    buf.lookup(t_query)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelayKind {
    /// `d(t) = d_max`.
    Constant,
    /// `d(t) = (d_max / 2)(1 + sin(omega t + phase))`.
    Sinusoidal { omega: f64, phase: f64 },
    /// `(start_time, value)` pairs sorted by start time; value holds until
    /// the next start. Before the first start the first value applies.
    PiecewiseConstant { segments: Vec<(f64, f64)> },
    /// Delay trace produced by an adversary rollout, linearly interpolated.
    PolicyDriven { times: Vec<f64>, values: Vec<f64> },
}

/// A delay profile `d(t)` bounded by `d_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelaySignal {
    pub kind: DelayKind,
    pub d_max: f64,
}

pub const DEFAULT_DELAY_OMEGA: f64 = 0.5;

impl DelaySignal {
    pub fn zero() -> Self {
        DelaySignal::constant(0.0)
    }

    pub fn constant(d_max: f64) -> Self {
        DelaySignal { kind: DelayKind::Constant, d_max }
    }

    pub fn sinusoidal(d_max: f64, omega: f64, phase: f64) -> Self {
        DelaySignal {
            kind: DelayKind::Sinusoidal { omega, phase },
            d_max,
        }
    }

    pub fn piecewise(d_max: f64, segments: Vec<(f64, f64)>) -> Self {
        DelaySignal {
            kind: DelayKind::PiecewiseConstant { segments },
            d_max,
        }
    }

    pub fn policy_driven(d_max: f64, times: Vec<f64>, values: Vec<f64>) -> Self {
        DelaySignal {
            kind: DelayKind::PolicyDriven { times, values },
            d_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_max >= 0.0 && self.d_max.is_finite()) {
            return Err(Error::config(format!("delay bound must be finite and nonnegative, got {}", self.d_max)));
        }
        match &self.kind {
            DelayKind::PiecewiseConstant { segments } if segments.is_empty() => {
                Err(Error::config("piecewise delay needs at least one segment"))
            }
            DelayKind::PolicyDriven { times, values } if times.is_empty() || times.len() != values.len() => {
                Err(Error::config("policy-driven delay trace must be nonempty with matching lengths"))
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        eval_delay(self, t)
    }
}

/// Evaluates `d(t)`, always clamped to `[0, d_max]`.
pub fn eval_delay(sig: &DelaySignal, t: f64) -> f64 {
    let raw = match &sig.kind {
        DelayKind::Constant => sig.d_max,
        DelayKind::Sinusoidal { omega, phase } => 0.5 * sig.d_max * (1.0 + (omega * t + phase).sin()),
        DelayKind::PiecewiseConstant { segments } => {
            let idx = segments.partition_point(|&(start, _)| start <= t);
            segments[idx.saturating_sub(1)].1
        }
        DelayKind::PolicyDriven { times, values } => {
            let idx = times.partition_point(|&s| s <= t);
            if idx == 0 {
                values[0]
            } else if idx == times.len() {
                values[times.len() - 1]
            } else {
                let s = (t - times[idx - 1]) / (times[idx] - times[idx - 1]);
                values[idx - 1] + (values[idx] - values[idx - 1]) * s
            }
        }
    };
    raw.clamp(0.0, sig.d_max)
}

/// Feedback evaluated by the simulator at the start of every step.
pub trait Controller {
    /// Stacked input `[u1, u2]` given the current stacked state and the
    /// current delays `[d1, d2]`.
    fn control(&mut self, t: f64, state: &[f64], delays: [f64; 2]) -> Vec<f64>;
}

impl<F> Controller for F
where
    F: FnMut(f64, &[f64], [f64; 2]) -> Vec<f64>,
{
    fn control(&mut self, t: f64, state: &[f64], delays: [f64; 2]) -> Vec<f64> {
        self(t, state, delays)
    }
}

/// Always returns zeros.
#[derive(Debug, Clone, Copy)]
pub struct ZeroControl {
    pub dim: usize,
}

impl Controller for ZeroControl {
    fn control(&mut self, _t: f64, _state: &[f64], _delays: [f64; 2]) -> Vec<f64> {
        vec![0.0; self.dim]
    }
}

/// Sampled closed-loop solution. Row `i` holds the state at `times[i]`, the
/// input held over `[times[i], times[i] + dt)` and the delays at `times[i]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub delays: Vec<[f64; 2]>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn push(&mut self, t: f64, state: Vec<f64>, input: Vec<f64>, delays: [f64; 2]) {
        self.times.push(t);
        self.states.push(state);
        self.inputs.push(input);
        self.delays.push(delays);
    }

    /// Error coordinates, assuming the double-integrator layout `[v1, p1, v2, p2]`.
    pub fn error_states(&self) -> Vec<ErrorState> {
        self.states.iter().map(|x| ErrorState::from_full_state(x)).collect()
    }

    pub fn position_errors(&self) -> Vec<f64> {
        self.states.iter().map(|x| x[1] - x[3]).collect()
    }

    /// Appends another trajectory whose first row repeats this one's last row.
    pub fn extend_from(&mut self, other: &Trajectory) {
        let skip = usize::from(!self.is_empty() && !other.is_empty() && self.times.last() == other.times.first());
        if skip == 1 {
            // the continuation's held input replaces the closing row's
            let last = self.len() - 1;
            self.inputs[last] = other.inputs[0].clone();
        }
        for i in skip..other.len() {
            self.push(other.times[i], other.states[i].clone(), other.inputs[i].clone(), other.delays[i]);
        }
    }

    /// Writes `t,e_p,e_v,d,u,<raw states>` plus an optional label column.
    /// `u` is the error-coordinate input `u1 - u2`; `d` is `d2`, the delay
    /// seen by the first agent.
    pub fn write_csv<W: Write>(&self, writer: W, labels: Option<(&str, &[String])>) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let n = self.states.first().map_or(0, Vec::len);
        let mut header: Vec<String> = ["t", "e_p", "e_v", "d", "u"].iter().map(|s| s.to_string()).collect();
        let raw_names = ["v1", "p1", "v2", "p2"];
        for i in 0..n {
            header.push(raw_names.get(i).map_or_else(|| format!("x{i}"), |s| s.to_string()));
        }
        if let Some((name, _)) = labels {
            header.push(name.to_string());
        }
        w.write_record(&header)?;
        for i in 0..self.len() {
            let x = &self.states[i];
            let e = ErrorState::from_full_state(x);
            let u = &self.inputs[i];
            let half = u.len() / 2;
            let u_e = if u.len() >= 2 { u[0] - u[half] } else { u.first().copied().unwrap_or(0.0) };
            let mut row = vec![
                self.times[i].to_string(),
                e.e_p.to_string(),
                e.e_v.to_string(),
                self.delays[i][1].to_string(),
                u_e.to_string(),
            ];
            row.extend(x.iter().map(f64::to_string));
            if let Some((_, values)) = labels {
                row.push(values.get(i).cloned().unwrap_or_default());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn agent_derivatives<M: CoupledDynamics + ?Sized>(
    model: &M,
    state: &[f64],
    delayed1: &[f64],
    delayed2: &[f64],
    u: &[f64],
    out: &mut [f64],
) {
    let n = model.agent_dim();
    let m = model.control_dim();
    let (out1, out2) = out.split_at_mut(n);
    // agent 1 sees agent 2's delayed state and vice versa
    model.agent_rhs(Agent::First, &state[..n], &delayed2[n..], &u[..m], out1);
    model.agent_rhs(Agent::Second, &state[n..], &delayed1[..n], &u[m..], out2);
}

/// Evaluates the stacked right-hand side at stage time `s` with stage
/// state `stage`, reading delayed partner states from the history.
fn stage_rhs<M: CoupledDynamics + ?Sized>(
    model: &M,
    buf: &HistoryBuffer,
    t: f64,
    s: f64,
    stage: &[f64],
    u: &[f64],
    delays: &[DelaySignal; 2],
    scratch: &mut [Vec<f64>; 2],
    out: &mut [f64],
) -> Result<()> {
    let x_t = buf.last_state().ok_or_else(|| Error::config("empty history"))?;
    for (agent, sig) in delays.iter().enumerate() {
        let q = s - eval_delay(sig, s);
        let dst = &mut scratch[agent];
        if q >= s {
            dst.copy_from_slice(stage);
        } else if q > t {
            lerp_into(dst, x_t, stage, (q - t) / (s - t));
        } else {
            buf.lookup_into(q, dst, true)?;
        }
    }
    // scratch[0] holds x(s - d1) (read by agent 2), scratch[1] holds x(s - d2)
    let [delayed1, delayed2] = &*scratch;
    agent_derivatives(model, stage, delayed1, delayed2, u, out);
    Ok(())
}

/// One RK4 step from `t` with the held input `u`. Appends the new state
/// (with Hermite derivative records) to `buf` and returns it.
pub fn rk4_step<M: CoupledDynamics + ?Sized>(
    model: &M,
    buf: &mut HistoryBuffer,
    t: f64,
    dt: f64,
    u: &[f64],
    delays: &[DelaySignal; 2],
) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::config(format!("step size must be positive, got {dt}")));
    }
    let dim = buf.dim();
    let x: Vec<f64> = buf.last_state().ok_or_else(|| Error::config("empty history"))?.to_vec();
    let mut scratch = [vec![0.0; dim], vec![0.0; dim]];
    let mut k = [vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]];
    let mut stage = x.clone();

    stage_rhs(model, buf, t, t, &stage, u, delays, &mut scratch, &mut k[0])?;
    for i in 0..dim {
        stage[i] = x[i] + 0.5 * dt * k[0][i];
    }
    stage_rhs(model, buf, t, t + 0.5 * dt, &stage, u, delays, &mut scratch, &mut k[1])?;
    for i in 0..dim {
        stage[i] = x[i] + 0.5 * dt * k[1][i];
    }
    stage_rhs(model, buf, t, t + 0.5 * dt, &stage, u, delays, &mut scratch, &mut k[2])?;
    for i in 0..dim {
        stage[i] = x[i] + dt * k[2][i];
    }
    stage_rhs(model, buf, t, t + dt, &stage, u, delays, &mut scratch, &mut k[3])?;

    let next: Vec<f64> = (0..dim)
        .map(|i| x[i] + dt / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]))
        .collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { time: t + dt, partial: None });
    }
    let mut end_deriv = vec![0.0; dim];
    stage_rhs(model, buf, t, t + dt, &next, u, delays, &mut scratch, &mut end_deriv)?;
    let [k0, ..] = k;
    buf.push_step(t + dt, &next, k0, end_deriv)?;
    Ok(next)
}

/// Evaluates the controller at `t`, advances one RK4 step and returns the
/// new state together with the input that was applied.
pub fn step_dde<M: CoupledDynamics + ?Sized>(
    model: &M,
    buf: &mut HistoryBuffer,
    t: f64,
    dt: f64,
    controller: &mut dyn Controller,
    delays: &[DelaySignal; 2],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let x = buf.last_state().ok_or_else(|| Error::config("empty history"))?.to_vec();
    let u = controller.control(t, &x, [eval_delay(&delays[0], t), eval_delay(&delays[1], t)]);
    let next = rk4_step(model, buf, t, dt, &u, delays)?;
    Ok((next, u))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub horizon: f64,
    pub dt: f64,
    /// Zero-order hold interval for the controller; `None` means every step.
    pub dt_ctrl: Option<f64>,
    pub t0: f64,
}

impl SimOptions {
    pub fn new(horizon: f64, dt: f64) -> Self {
        SimOptions {
            horizon,
            dt,
            dt_ctrl: None,
            t0: 0.0,
        }
    }

    pub fn with_hold(mut self, dt_ctrl: f64) -> Self {
        self.dt_ctrl = Some(dt_ctrl);
        self
    }

    pub fn starting_at(mut self, t0: f64) -> Self {
        self.t0 = t0;
        self
    }
}

/// Closed-loop rollout from `x0` with constant pre-history `x0`.
pub fn simulate<M: CoupledDynamics + ?Sized>(
    model: &M,
    x0: &[f64],
    delays: &[DelaySignal; 2],
    controller: &mut dyn Controller,
    opts: SimOptions,
) -> Result<Trajectory> {
    let buf = HistoryBuffer::starting_at(opts.t0, x0);
    simulate_from(model, buf, delays, controller, opts)
}

/// Continues a rollout from the last sample of an existing history.
pub fn simulate_from<M: CoupledDynamics + ?Sized>(
    model: &M,
    mut buf: HistoryBuffer,
    delays: &[DelaySignal; 2],
    controller: &mut dyn Controller,
    opts: SimOptions,
) -> Result<Trajectory> {
    if !(opts.horizon > 0.0) {
        return Err(Error::config(format!("horizon must be positive, got {}", opts.horizon)));
    }
    if !(opts.dt > 0.0) {
        return Err(Error::config(format!("dt must be positive, got {}", opts.dt)));
    }
    if buf.dim() != 2 * model.agent_dim() {
        return Err(Error::config(format!(
            "initial state has dimension {}, model expects {}",
            buf.dim(),
            2 * model.agent_dim()
        )));
    }
    for sig in delays {
        sig.validate()?;
    }
    let steps = (opts.horizon / opts.dt).round() as usize;
    let hold = opts.dt_ctrl.map_or(1, |h| ((h / opts.dt).round() as usize).max(1));
    let t_start = buf.last_time().ok_or_else(|| Error::config("empty history"))?;

    let mut traj = Trajectory::default();
    let mut x = buf.last_state().unwrap_or_default().to_vec();
    let mut u = Vec::new();
    for i in 0..=steps {
        let t = t_start + i as f64 * opts.dt;
        let d = [eval_delay(&delays[0], t), eval_delay(&delays[1], t)];
        debug_assert!(d.iter().zip(delays).all(|(v, s)| (0.0..=s.d_max).contains(v)));
        if i % hold == 0 {
            u = controller.control(t, &x, d);
        }
        traj.push(t, x.clone(), u.clone(), d);
        if i == steps {
            break;
        }
        match rk4_step(model, &mut buf, t, opts.dt, &u, delays) {
            Ok(next) => x = next,
            Err(Error::Divergence { time, .. }) => {
                return Err(Error::Divergence {
                    time,
                    partial: Some(Box::new(traj)),
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{CoupledTdsModel, ModelParams};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Two copies of `x' = -x(t - 1)` cross-coupled through the delay.
    struct NegativeFeedback;

    impl CoupledDynamics for NegativeFeedback {
        fn agent_dim(&self) -> usize {
            1
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn agent_rhs(&self, _a: Agent, _own: &[f64], partner: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = -partner[0];
        }
    }

    /// Undelayed harmonic oscillator on agent 1, agent 2 idle.
    struct Oscillator;

    impl CoupledDynamics for Oscillator {
        fn agent_dim(&self) -> usize {
            2
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn agent_rhs(&self, _a: Agent, own: &[f64], _partner: &[f64], _u: &[f64], out: &mut [f64]) {
            out[0] = -own[1];
            out[1] = own[0];
        }
    }

    #[test]
    fn lookup_examples() {
        let mut buf = HistoryBuffer::new(0.0, vec![7.0]);
        buf.push(0.0, &[1.0]).unwrap();
        buf.push(1.0, &[3.0]).unwrap();
        assert_eq!(history_lookup(&buf, 0.5).unwrap(), vec![2.0]);
        assert_eq!(history_lookup(&buf, -5.0).unwrap(), vec![7.0]);

        let mut buf = HistoryBuffer::new(0.0, vec![0.0]);
        buf.push(0.0, &[0.0]).unwrap();
        buf.push(1.0, &[2.0]).unwrap();
        assert_eq!(history_lookup(&buf, 1.5).unwrap(), vec![3.0]);
    }

    #[test]
    fn lookup_empty_buffer_is_config_error() {
        let buf = HistoryBuffer::new(0.0, vec![1.0]);
        assert!(matches!(history_lookup(&buf, 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn push_rejects_non_increasing_times() {
        let mut buf = HistoryBuffer::starting_at(0.0, &[1.0]);
        assert!(buf.push(0.0, &[2.0]).is_err());
        assert!(buf.push(-1.0, &[2.0]).is_err());
        assert!(buf.push(0.5, &[2.0, 3.0]).is_err());
    }

    proptest! {
        #[test]
        fn lookup_exact_at_samples_and_affine_histories(
            slope in -3.0..3.0f64,
            offset in -2.0..2.0f64,
            steps in proptest::collection::vec(0.01..0.5f64, 2..20),
            frac in 0.0..1.0f64,
        ) {
            let f = |t: f64| offset + slope * t;
            let mut buf = HistoryBuffer::new(0.0, vec![f(0.0)]);
            let mut t = 0.0;
            let mut times = vec![];
            for h in &steps {
                buf.push(t, &[f(t)]).unwrap();
                times.push(t);
                t += h;
            }
            for (i, &ti) in times.iter().enumerate() {
                prop_assert_eq!(buf.lookup(ti).unwrap()[0], buf.sample(i).1[0]);
            }
            let q = frac * t;
            prop_assert!((buf.lookup(q).unwrap()[0] - f(q)).abs() < 1e-12);
        }

        #[test]
        fn emitted_delays_stay_within_bound(
            d_max in 0.0..1.0f64,
            omega in 0.05..3.0f64,
            phase in 0.0..6.3f64,
            t in 0.0..100.0f64,
        ) {
            for sig in [
                DelaySignal::constant(d_max),
                DelaySignal::sinusoidal(d_max, omega, phase),
                DelaySignal::piecewise(d_max, vec![(0.0, 2.0 * d_max), (t / 2.0, -1.0)]),
            ] {
                let d = eval_delay(&sig, t);
                prop_assert!((0.0..=d_max).contains(&d));
            }
        }
    }

    #[test]
    fn delay_examples() {
        assert_eq!(eval_delay(&DelaySignal::constant(0.25), 17.0), 0.25);
        let sig = DelaySignal::sinusoidal(0.5, 0.5, 0.0);
        assert_eq!(eval_delay(&sig, 0.0), 0.25);
        assert_abs_diff_eq!(eval_delay(&sig, std::f64::consts::PI), 0.5, epsilon = 1e-15);
        let pw = DelaySignal::piecewise(0.25, vec![(0.0, 0.0), (25.0, 0.25)]);
        assert_eq!(eval_delay(&pw, 24.9), 0.0);
        assert_eq!(eval_delay(&pw, 25.0), 0.25);
    }

    #[test]
    fn oscillator_period_matches_analytic() {
        let x0 = [1.0, 0.0, 0.0, 0.0];
        let delays = [DelaySignal::zero(), DelaySignal::zero()];
        let period = 2.0 * std::f64::consts::PI;
        let traj = simulate(&Oscillator, &x0, &delays, &mut ZeroControl { dim: 2 }, SimOptions::new(period, 1e-3)).unwrap();
        for (t, x) in traj.times.iter().zip(&traj.states) {
            assert_abs_diff_eq!(x[0], t.cos(), epsilon = 1e-6);
            assert_abs_diff_eq!(x[1], t.sin(), epsilon = 1e-6);
        }
    }

    fn plain_rk4<M: CoupledDynamics>(model: &M, x0: &[f64], dt: f64, steps: usize) -> Vec<Vec<f64>> {
        let n = model.agent_dim();
        let f = |x: &[f64]| {
            let mut out = vec![0.0; 2 * n];
            let (a, b) = out.split_at_mut(n);
            model.agent_rhs(Agent::First, &x[..n], &x[n..], &[0.0], a);
            model.agent_rhs(Agent::Second, &x[n..], &x[..n], &[0.0], b);
            out
        };
        let mut xs = vec![x0.to_vec()];
        for _ in 0..steps {
            let x = xs.last().unwrap();
            let k1 = f(x);
            let s: Vec<f64> = x.iter().zip(&k1).map(|(a, k)| a + 0.5 * dt * k).collect();
            let k2 = f(&s);
            let s: Vec<f64> = x.iter().zip(&k2).map(|(a, k)| a + 0.5 * dt * k).collect();
            let k3 = f(&s);
            let s: Vec<f64> = x.iter().zip(&k3).map(|(a, k)| a + dt * k).collect();
            let k4 = f(&s);
            xs.push((0..x.len()).map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect());
        }
        xs
    }

    #[test]
    fn zero_delay_matches_plain_rk4() {
        let model = CoupledTdsModel::new(ModelParams::new(1.0, 0.15, 0.4).unwrap()).unwrap();
        let x0 = [0.3, 0.5, -0.1, -0.5];
        let delays = [DelaySignal::zero(), DelaySignal::zero()];
        let traj = simulate(&model, &x0, &delays, &mut ZeroControl { dim: 2 }, SimOptions::new(5.0, 0.01)).unwrap();
        let reference = plain_rk4(&model, &x0, 0.01, 500);
        for (a, b) in traj.states.iter().zip(&reference) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn method_of_steps_points() {
        let delays = [DelaySignal::constant(1.0), DelaySignal::constant(1.0)];
        let traj = simulate(&NegativeFeedback, &[1.0, 1.0], &delays, &mut ZeroControl { dim: 2 }, SimOptions::new(2.0, 1e-3)).unwrap();
        let at = |t: f64| {
            let i = (t / 1e-3).round() as usize;
            traj.states[i][0]
        };
        assert_abs_diff_eq!(at(1.0), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(at(2.0), -0.5, epsilon = 1e-12);
    }

    #[test]
    fn equilibrium_is_fixed() {
        let model = CoupledTdsModel::new(ModelParams::new(1.0, 0.15, 0.4).unwrap()).unwrap();
        let x0 = [0.0, 0.2, 0.0, 0.2];
        let delays = [DelaySignal::constant(0.25), DelaySignal::constant(0.25)];
        let traj = simulate(&model, &x0, &delays, &mut ZeroControl { dim: 2 }, SimOptions::new(10.0, 0.01)).unwrap();
        for x in &traj.states {
            assert_eq!(x, &x0.to_vec());
        }
    }

    #[test]
    fn hold_interval_keeps_input_piecewise_constant() {
        let model = CoupledTdsModel::new(ModelParams::new(1.0, 0.15, 0.4).unwrap()).unwrap();
        let delays = [DelaySignal::zero(), DelaySignal::zero()];
        let mut ctrl = |t: f64, _x: &[f64], _d: [f64; 2]| vec![t, -t];
        let traj = simulate(&model, &[0.0, 1.0, 0.0, 0.0], &delays, &mut ctrl, SimOptions::new(1.0, 0.01).with_hold(0.05)).unwrap();
        for (i, u) in traj.inputs.iter().enumerate() {
            let sample = (i / 5) as f64 * 0.05;
            assert_abs_diff_eq!(u[0], sample, epsilon = 1e-12);
        }
    }

    #[test]
    fn divergence_carries_partial_trajectory() {
        struct Blowup;
        impl CoupledDynamics for Blowup {
            fn agent_dim(&self) -> usize {
                1
            }
            fn control_dim(&self) -> usize {
                1
            }
            fn agent_rhs(&self, _a: Agent, own: &[f64], _p: &[f64], _u: &[f64], out: &mut [f64]) {
                out[0] = own[0] * own[0];
            }
        }
        let delays = [DelaySignal::zero(), DelaySignal::zero()];
        let err = simulate(&Blowup, &[1.0, 1.0], &delays, &mut ZeroControl { dim: 2 }, SimOptions::new(3.0, 0.01)).unwrap_err();
        match err {
            Error::Divergence { time, partial } => {
                assert!(time > 0.9 && time < 1.1, "blow-up near t = 1, got {time}");
                assert!(!partial.unwrap().is_empty());
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn csv_header_and_rows() {
        let model = CoupledTdsModel::new(ModelParams::new(1.0, 0.15, 0.4).unwrap()).unwrap();
        let delays = [DelaySignal::constant(0.1), DelaySignal::constant(0.1)];
        let traj = simulate(&model, &[0.0, 0.5, 0.0, -0.5], &delays, &mut ZeroControl { dim: 2 }, SimOptions::new(0.02, 0.01)).unwrap();
        let mut out = Vec::new();
        traj.write_csv(&mut out, None).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,e_p,e_v,d,u,v1,p1,v2,p2");
        assert!(lines.next().unwrap().starts_with("0,1,0,0.1,0,"));
        assert_eq!(text.lines().count(), 4);
    }
}
