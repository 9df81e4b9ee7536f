//! Feedback extraction from a solved value function, and adapters that drive
//! either the approximate game dynamics or the true delayed system with it.

use std::sync::Arc;

use crate::dde_sim::{eval_delay, Controller, DelaySignal};
use crate::error::{Error, Result};
use crate::hji::{cell_of, DelayGame, GameInputs, ValueFunction, MAX_DIM};
use crate::models::ErrorState;

/// Default zero-order hold interval of extracted controllers, seconds.
pub const DEFAULT_DT_CTRL: f64 = 0.05;

/// Costate estimate at an arbitrary point.
#[derive(Debug, Clone, PartialEq)]
pub struct Costate {
    pub p: Vec<f64>,
    /// Set when the query point was outside the grid and got projected.
    pub clamped: bool,
}

/// Gradient of `v` at `x`: node gradients (central differences, one-sided
/// on the boundary) blended multilinearly across the enclosing cell.
pub fn grad_value(v: &ValueFunction, x: &[f64]) -> Costate {
    let grid = &v.grid;
    let dim = grid.dim();
    let clamped = !grid.contains(x);
    let mut base = [0usize; MAX_DIM];
    let mut frac = [0.0; MAX_DIM];
    for a in 0..dim {
        let (i, f) = cell_of(grid.axis(a), x[a]);
        base[a] = i;
        frac[a] = f;
    }
    let mut p = vec![0.0; dim];
    let mut g = [0.0; MAX_DIM];
    for corner in 0..(1usize << dim) {
        let mut weight = 1.0;
        let mut node = 0;
        for a in 0..dim {
            let hi = (corner >> a) & 1 == 1;
            weight *= if hi { frac[a] } else { 1.0 - frac[a] };
            node += (base[a] + usize::from(hi)) * grid.stride(a);
        }
        if weight == 0.0 {
            continue;
        }
        v.node_gradient(node, &mut g[..dim]);
        for a in 0..dim {
            p[a] += weight * g[a];
        }
    }
    Costate { p, clamped }
}

/// `u* = -u_max sign(dV/de_v)` at `(e, d)`; zero on a tie.
pub fn optimal_control(v: &ValueFunction, game: &DelayGame, e: ErrorState, d: f64) -> f64 {
    let p = grad_value(v, &[e.e_p, e.e_v, d]).p;
    game.optimal_u(p[1])
}

/// Maximizing `(w_d, w)` at `x = (e_p, e_v, d)`.
pub fn optimal_adversary(v: &ValueFunction, game: &DelayGame, x: &[f64; 3]) -> (f64, f64) {
    let p = grad_value(v, x).p;
    let (inp, _) = game.saddle(x, &p);
    (inp.w_d, inp.w)
}

#[derive(Debug, Clone)]
pub enum ControlSource {
    /// Stationary feedback from one value slice.
    ValueFunction(Arc<ValueFunction>),
    Zero,
    Constant(f64),
    /// Piecewise-constant schedule of `(start_time, u)` pairs.
    Scripted(Vec<(f64, f64)>),
}

/// Feedback for the error input `u_e`, saturated at `u_max` and sampled
/// every `dt_ctrl` seconds.
#[derive(Debug, Clone)]
pub struct ControlPolicy {
    pub source: ControlSource,
    pub game: DelayGame,
    pub dt_ctrl: f64,
}

impl ControlPolicy {
    pub fn new(source: ControlSource, game: DelayGame) -> Self {
        ControlPolicy {
            source,
            game,
            dt_ctrl: DEFAULT_DT_CTRL,
        }
    }

    pub fn with_hold(mut self, dt_ctrl: f64) -> Self {
        self.dt_ctrl = dt_ctrl;
        self
    }

    pub fn u_max(&self) -> f64 {
        self.game.spec.u_max
    }

    /// Unheld evaluation of the policy.
    pub fn evaluate(&self, t: f64, e: ErrorState, d: f64) -> f64 {
        let u = match &self.source {
            ControlSource::ValueFunction(v) => optimal_control(v, &self.game, e, d),
            ControlSource::Zero => 0.0,
            ControlSource::Constant(u) => *u,
            ControlSource::Scripted(schedule) => {
                let idx = schedule.partition_point(|&(s, _)| s <= t);
                schedule.get(idx.wrapping_sub(1)).map_or(0.0, |&(_, u)| u)
            }
        };
        u.clamp(-self.u_max(), self.u_max())
    }
}

/// Adapter from a [`ControlPolicy`] to the simulator's controller interface.
///
/// Reads `(e_p, e_v)` from the stacked state, `d` from the second agent's
/// delay, and applies `u_e` as `u1 = u_e / 2`, `u2 = -u_e / 2`. Before
/// `start` the output is zero.
#[derive(Debug, Clone)]
pub struct DdeController {
    pub policy: ControlPolicy,
    pub start: f64,
    next_sample: f64,
    held: f64,
    /// Every emitted `u_e`, for auditing saturation.
    pub emitted: Vec<(f64, f64)>,
}

pub fn make_dde_controller(policy: ControlPolicy) -> DdeController {
    DdeController::starting_at(policy, f64::NEG_INFINITY)
}

impl DdeController {
    pub fn starting_at(policy: ControlPolicy, start: f64) -> Self {
        DdeController {
            policy,
            start,
            next_sample: f64::NEG_INFINITY,
            held: 0.0,
            emitted: Vec::new(),
        }
    }

    pub fn max_abs_emitted(&self) -> f64 {
        self.emitted.iter().map(|(_, u)| u.abs()).fold(0.0, f64::max)
    }
}

impl Controller for DdeController {
    fn control(&mut self, t: f64, state: &[f64], delays: [f64; 2]) -> Vec<f64> {
        if t < self.start {
            return vec![0.0, 0.0];
        }
        // small slack so that accumulated step times still hit the sample grid
        if t >= self.next_sample - 1e-6 * self.policy.dt_ctrl {
            self.held = self.policy.evaluate(t, ErrorState::from_full_state(state), delays[1]);
            let origin = if self.start.is_finite() { self.start } else { t };
            let k = ((t - origin) / self.policy.dt_ctrl + 1e-6).floor() + 1.0;
            self.next_sample = origin + k * self.policy.dt_ctrl;
            self.emitted.push((t, self.held));
        }
        vec![0.5 * self.held, -0.5 * self.held]
    }
}

#[derive(Debug, Clone)]
pub enum AdversarySource {
    /// Worst case read from the value gradient; `d` follows `d' = 1 - d w_d`.
    ValueFunction(Arc<ValueFunction>),
    /// Prescribed delay signal (constant, sinusoidal or scripted); the
    /// error input is `w = w_fraction * L_w * d`.
    Signal { delay: DelaySignal, w_fraction: f64 },
}

#[derive(Debug, Clone)]
pub struct AdversaryPolicy {
    pub source: AdversarySource,
}

impl AdversaryPolicy {
    pub fn value_function(v: Arc<ValueFunction>) -> Self {
        AdversaryPolicy {
            source: AdversarySource::ValueFunction(v),
        }
    }

    pub fn signal(delay: DelaySignal, w_fraction: f64) -> Self {
        AdversaryPolicy {
            source: AdversarySource::Signal {
                delay,
                w_fraction: w_fraction.clamp(-1.0, 1.0),
            },
        }
    }
}

/// Rollout of the approximate game dynamics.
#[derive(Debug, Clone, Default)]
pub struct GameRollout {
    pub times: Vec<f64>,
    /// `(e_p, e_v, d)` at every sample.
    pub states: Vec<[f64; 3]>,
    /// Inputs held over the step that starts at the sample.
    pub inputs: Vec<GameInputs>,
    /// `int l_t dt + l_T(x(T))`.
    pub cost: f64,
}

impl GameRollout {
    pub fn delays(&self) -> Vec<f64> {
        self.states.iter().map(|s| s[2]).collect()
    }
}

/// Integrates the approximate dynamics from `x0` with RK4, inputs held over
/// each step: `u` from `control`, `(w, w_d)` or `d(t)` from `adversary`.
pub fn rollout_game(game: &DelayGame, control: &ControlPolicy, adversary: &AdversaryPolicy, x0: [f64; 3], horizon: f64, dt: f64) -> Result<GameRollout> {
    if !(horizon > 0.0 && dt > 0.0) {
        return Err(Error::config("rollout horizon and step must be positive"));
    }
    let d_max = game.spec.d_max;
    let steps = (horizon / dt).round() as usize;
    let mut out = GameRollout::default();
    let mut x = x0;
    x[2] = x[2].clamp(0.0, d_max);
    let forced = matches!(adversary.source, AdversarySource::Signal { .. });
    let mut cost = 0.0;
    for i in 0..=steps {
        let t = i as f64 * dt;
        if let AdversarySource::Signal { delay, .. } = &adversary.source {
            x[2] = eval_delay(delay, t).min(d_max);
        }
        let u = control.evaluate(t, ErrorState::new(x[0], x[1]), x[2]);
        let (w, w_d) = match &adversary.source {
            AdversarySource::ValueFunction(v) => {
                let (w_d, w) = optimal_adversary(v, game, &x);
                (w, w_d)
            }
            AdversarySource::Signal { w_fraction, .. } => (w_fraction * game.spec.w_bound(x[2]), game.spec.hold_rate(x[2])),
        };
        let inp = GameInputs { u, w, w_d };
        out.times.push(t);
        out.states.push(x);
        out.inputs.push(inp);
        if i == steps {
            break;
        }
        // cost rides along as a fourth state so it gets the same RK4 weights
        let rhs = |s: &[f64; 4]| {
            let y = [s[0], s[1], s[2]];
            let f = game.dynamics(&y, inp);
            let dd = if forced { 0.0 } else { f[2] };
            [f[0], f[1], dd, game.cost.stage_cost(&y)]
        };
        let s0 = [x[0], x[1], x[2], 0.0];
        let add = |s: &[f64; 4], k: &[f64; 4], h: f64| [s[0] + h * k[0], s[1] + h * k[1], s[2] + h * k[2], s[3] + h * k[3]];
        let k1 = rhs(&s0);
        let k2 = rhs(&add(&s0, &k1, 0.5 * dt));
        let k3 = rhs(&add(&s0, &k2, 0.5 * dt));
        let k4 = rhs(&add(&s0, &k3, dt));
        let mut s1 = [0.0; 4];
        for j in 0..4 {
            s1[j] = s0[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if s1.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { time: t + dt, partial: None });
        }
        cost += s1[3];
        x = [s1[0], s1[1], s1[2].clamp(0.0, d_max)];
    }
    out.cost = cost + game.cost.terminal_cost(&x);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dde_sim::{simulate, SimOptions, ZeroControl};
    use crate::hji::{CostSpec, ErrorRole, Grid, HamiltonianSpec};
    use crate::models::{CoupledTdsModel, ModelParams};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn game() -> DelayGame {
        let params = ModelParams::new(1.0, 0.15, 0.4).unwrap();
        DelayGame::new(params, HamiltonianSpec::new(0.4, 0.5), CostSpec::stabilization()).unwrap()
    }

    fn grid() -> Grid {
        Grid::default_delay_game([25, 21, 6], 0.5).unwrap()
    }

    #[test]
    fn linear_field_gradient() {
        let v = ValueFunction::from_fn(grid(), 0.0, |x| x[0]);
        for x in [[0.3, 1.1, 0.2], [-2.0, -4.9, 0.45], [1.234, 0.0, 0.01]] {
            let c = grad_value(&v, &x);
            assert!(!c.clamped);
            assert_abs_diff_eq!(c.p[0], 1.0, epsilon = 1e-10);
            assert_abs_diff_eq!(c.p[1], 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(c.p[2], 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn quadratic_field_gradient() {
        let g = grid();
        let h = g.axis(0).spacing();
        let v = ValueFunction::from_fn(g, 0.0, |x| x[0] * x[0]);
        let p = grad_value(&v, &[1.0, 0.3, 0.1]).p;
        assert!((p[0] - 2.0).abs() <= 2.0 * h * h, "{}", p[0]);
    }

    #[test]
    fn outside_hull_is_clamped_and_flagged() {
        let v = ValueFunction::from_fn(grid(), 0.0, |x| x[0] * x[0] + x[1]);
        let out = grad_value(&v, &[3.0, 1.0, 0.2]);
        let edge = grad_value(&v, &[2.4, 1.0, 0.2]);
        assert!(out.clamped && !edge.clamped);
        assert_eq!(out.p, edge.p);
    }

    #[test]
    fn control_sign_rule_and_tie() {
        let g = game();
        let up = ValueFunction::from_fn(grid(), 0.0, |x| x[1]);
        assert_eq!(optimal_control(&up, &g, ErrorState::new(0.1, 0.2), 0.1), -0.4);
        let flat = ValueFunction::from_fn(grid(), 0.0, |x| x[0]);
        assert_eq!(optimal_control(&flat, &g, ErrorState::new(0.1, 0.2), 0.1), 0.0);
    }

    #[test]
    fn adversary_holds_delay_on_flat_d_direction() {
        let g = game();
        let v = ValueFunction::from_fn(grid(), 0.0, |x| x[0] + x[1]);
        let (w_d, w) = optimal_adversary(&v, &g, &[0.2, 0.3, 0.25]);
        assert_abs_diff_eq!(w_d, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w, 5.0 * 0.25, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn adversary_matches_corner_enumeration(
            ep in -2.4..2.4f64, ev in -5.0..5.0f64, d in 0.0..0.5f64,
            a in -3.0..3.0f64, b in -3.0..3.0f64, c in -3.0..3.0f64,
        ) {
            let g = game();
            let v = ValueFunction::from_fn(grid(), 0.0, |x| a * x[0] * x[1] + b * x[1] + c * x[2] * x[2]);
            let x = [ep, ev, d];
            let p = grad_value(&v, &x).p;
            let (w_d, w) = optimal_adversary(&v, &g, &x);
            let u = g.optimal_u(p[1]);
            let chosen = g.evaluate(&x, &p, GameInputs { u, w, w_d });
            let wb = g.spec.w_bound(d);
            for wc in [-wb, 0.0, wb] {
                for wdc in [0.0, 10.0, 20.0] {
                    let alt = g.evaluate(&x, &p, GameInputs { u, w: wc, w_d: wdc });
                    prop_assert!(alt <= chosen + 1e-12);
                }
            }
        }

        #[test]
        fn control_is_odd_on_symmetric_values(ep in -2.0..2.0f64, ev in -4.0..4.0f64, d in 0.0..0.5f64) {
            let g = game();
            let v = ValueFunction::from_fn(grid(), 0.0, |x| x[0] * x[0] + x[0] * x[1] + 2.0 * x[1] * x[1] * (1.0 + x[2]));
            let plus = optimal_control(&v, &g, ErrorState::new(ep, ev), d);
            let minus = optimal_control(&v, &g, ErrorState::new(-ep, -ev), d);
            prop_assert_eq!(plus, -minus);
        }

        #[test]
        fn scaling_value_keeps_control(ep in -2.0..2.0f64, ev in -4.0..4.0f64, d in 0.0..0.5f64, s in 0.01..100.0f64) {
            let g = game();
            let f = |x: &[f64]| (x[0] + 0.3 * x[1]).powi(2) + x[2] * x[1];
            let v = ValueFunction::from_fn(grid(), 0.0, f);
            let vs = ValueFunction::from_fn(grid(), 0.0, |x| s * f(x));
            let e = ErrorState::new(ep, ev);
            prop_assert_eq!(optimal_control(&v, &g, e, d), optimal_control(&vs, &g, e, d));
        }

        #[test]
        fn emitted_control_is_saturated(u in -10.0..10.0f64, t in 0.0..5.0f64) {
            let p = ControlPolicy::new(ControlSource::Constant(u), game());
            prop_assert!(p.evaluate(t, ErrorState::new(0.0, 0.0), 0.0).abs() <= 0.4);
        }
    }

    fn model() -> CoupledTdsModel {
        CoupledTdsModel::new(ModelParams::new(1.0, 0.15, 0.4).unwrap()).unwrap()
    }

    #[test]
    fn zero_policy_matches_uncontrolled_run() {
        let delays = [DelaySignal::constant(0.2), DelaySignal::constant(0.2)];
        let x0 = [0.0, 0.5, 0.0, -0.5];
        let opts = SimOptions::new(5.0, 1e-2);
        let free = simulate(&model(), &x0, &delays, &mut ZeroControl { dim: 2 }, opts).unwrap();
        let mut ctrl = make_dde_controller(ControlPolicy::new(ControlSource::Zero, game()));
        let held = simulate(&model(), &x0, &delays, &mut ctrl, opts).unwrap();
        assert_eq!(free.states, held.states);
    }

    #[test]
    fn constant_policy_gives_constant_input() {
        let delays = [DelaySignal::zero(), DelaySignal::zero()];
        let mut ctrl = make_dde_controller(ControlPolicy::new(ControlSource::Constant(0.4), game()));
        let traj = simulate(&model(), &[0.0, 0.5, 0.0, -0.5], &delays, &mut ctrl, SimOptions::new(2.0, 1e-2)).unwrap();
        assert!(traj.inputs.iter().all(|u| u == &vec![0.2, -0.2]));
    }

    #[test]
    fn hold_with_step_interval_matches_per_step_evaluation() {
        let v = Arc::new(ValueFunction::from_fn(grid(), 0.0, |x| x[0] * x[1] + x[1] * x[1]));
        let policy = ControlPolicy::new(ControlSource::ValueFunction(v), game()).with_hold(1e-2);
        let delays = [DelaySignal::constant(0.1), DelaySignal::constant(0.1)];
        let x0 = [0.3, 0.5, -0.2, -0.5];
        let mut held = make_dde_controller(policy.clone());
        let a = simulate(&model(), &x0, &delays, &mut held, SimOptions::new(3.0, 1e-2)).unwrap();
        let mut direct = |t: f64, s: &[f64], d: [f64; 2]| {
            let u = policy.evaluate(t, ErrorState::from_full_state(s), d[1]);
            vec![0.5 * u, -0.5 * u]
        };
        let b = simulate(&model(), &x0, &delays, &mut direct, SimOptions::new(3.0, 1e-2)).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(held.emitted.len(), a.len());
    }

    #[test]
    fn hold_samples_every_interval() {
        let policy = ControlPolicy::new(ControlSource::Scripted(vec![(0.0, 0.1), (0.5, -0.3)]), game()).with_hold(0.05);
        let mut ctrl = DdeController::starting_at(policy, 0.2);
        let delays = [DelaySignal::zero(), DelaySignal::zero()];
        let traj = simulate(&model(), &[0.0; 4], &delays, &mut ctrl, SimOptions::new(1.0, 1e-3)).unwrap();
        assert_eq!(ctrl.emitted.len(), 17);
        assert_eq!(traj.inputs[100], vec![0.0, 0.0]);
        assert_eq!(traj.inputs[300], vec![0.05, -0.05]);
        assert_eq!(traj.inputs[900], vec![-0.15, 0.15]);
    }

    #[test]
    fn rollout_with_still_adversary_follows_flow() {
        let mut spec = HamiltonianSpec::new(0.4, 0.5);
        spec.error_role = ErrorRole::Disabled;
        let g = DelayGame::new(ModelParams::new(1.0, 0.15, 0.4).unwrap(), spec, CostSpec::stabilization()).unwrap();
        let ctrl = ControlPolicy::new(ControlSource::Zero, g);
        let adv = AdversaryPolicy::signal(DelaySignal::zero(), 0.0);
        let r = rollout_game(&g, &ctrl, &adv, [1.0, 0.0, 0.0], 2.0, 1e-3).unwrap();
        // e'' = -2 e - 0.15 e'
        let wd = (2.0f64 - 0.15 * 0.15 / 4.0).sqrt();
        let t: f64 = 2.0;
        let exact = (-0.075 * t).exp() * ((wd * t).cos() + 0.075 / wd * (wd * t).sin());
        assert_abs_diff_eq!(r.states.last().unwrap()[0], exact, epsilon = 1e-9);
        assert!(r.cost > 0.0);
    }
}
