//! Browser bindings: an uncontrolled delayed rollout, a small value-slice
//! solve and the delay-independent stability check.
//!
//! The plain functions return `delaygame::Result` so they can be tested
//! natively; the `#[wasm_bindgen]` wrappers turn errors into JS exceptions.

use delaygame::analysis::lk_condition;
use delaygame::dde_sim::{simulate, DelaySignal, SimOptions, ZeroControl};
use delaygame::hji::{solve_hji, CostSpec, ErrorRole, Grid, HamiltonianSpec, SolveOptions};
use delaygame::models::{CoupledTdsModel, ErrorState, ModelParams};
use delaygame::{Error, Result};
use wasm_bindgen::prelude::*;

/// Largest grid the page may request per axis; keeps a solve interactive.
pub const MAX_AXIS_NODES: usize = 61;
/// Longest rollout in samples.
pub const MAX_SAMPLES: usize = 200_000;

/// Sampled rollout in error coordinates.
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct Series {
    times: Vec<f64>,
    e_p: Vec<f64>,
    e_v: Vec<f64>,
    d: Vec<f64>,
}

#[wasm_bindgen]
impl Series {
    #[wasm_bindgen(getter)]
    pub fn times(&self) -> Vec<f64> {
        self.times.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn e_p(&self) -> Vec<f64> {
        self.e_p.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn e_v(&self) -> Vec<f64> {
        self.e_v.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn d(&self) -> Vec<f64> {
        self.d.clone()
    }
}

/// One `(e_p, e_v)` slice of a value function, row-major with `e_v` fastest.
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct ValueSlice {
    n_p: usize,
    n_v: usize,
    ep_range: [f64; 2],
    ev_range: [f64; 2],
    d: f64,
    values: Vec<f64>,
}

#[wasm_bindgen]
impl ValueSlice {
    #[wasm_bindgen(getter)]
    pub fn n_p(&self) -> usize {
        self.n_p
    }

    #[wasm_bindgen(getter)]
    pub fn n_v(&self) -> usize {
        self.n_v
    }

    #[wasm_bindgen(getter)]
    pub fn ep_min(&self) -> f64 {
        self.ep_range[0]
    }

    #[wasm_bindgen(getter)]
    pub fn ep_max(&self) -> f64 {
        self.ep_range[1]
    }

    #[wasm_bindgen(getter)]
    pub fn ev_min(&self) -> f64 {
        self.ev_range[0]
    }

    #[wasm_bindgen(getter)]
    pub fn ev_max(&self) -> f64 {
        self.ev_range[1]
    }

    /// Delay coordinate of the slice.
    #[wasm_bindgen(getter)]
    pub fn d(&self) -> f64 {
        self.d
    }

    #[wasm_bindgen(getter)]
    pub fn values(&self) -> Vec<f64> {
        self.values.clone()
    }
}

#[wasm_bindgen]
#[derive(Debug, Clone, Copy)]
pub struct LkResult {
    pub satisfied: bool,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
}

fn delay_signal(kind: &str, tstar: f64, omega: f64) -> Result<DelaySignal> {
    match kind {
        "none" => Ok(DelaySignal::zero()),
        "constant" => Ok(DelaySignal::constant(tstar)),
        "sinusoidal" => Ok(DelaySignal::sinusoidal(tstar, omega, 0.0)),
        other => Err(Error::Config(format!("unknown delay kind {other:?}"))),
    }
}

fn error_role(role: &str) -> Result<ErrorRole> {
    match role {
        "adversarial" => Ok(ErrorRole::Adversarial),
        "cooperative" => Ok(ErrorRole::Cooperative),
        "disabled" => Ok(ErrorRole::Disabled),
        other => Err(Error::Config(format!("unknown error role {other:?}"))),
    }
}

/// Uncontrolled pair under a delay of the given kind, from `(e_p0, e_v0)`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_series(k: f64, b: f64, delay: &str, tstar: f64, omega: f64, e_p0: f64, e_v0: f64, horizon: f64, dt: f64) -> Result<Series> {
    if horizon / dt > MAX_SAMPLES as f64 {
        return Err(Error::Config(format!("at most {MAX_SAMPLES} samples per rollout")));
    }
    let model = CoupledTdsModel::new(ModelParams::new(k, b, 0.0)?)?;
    let sig = delay_signal(delay, tstar, omega)?;
    let x0 = ErrorState::new(e_p0, e_v0).to_full_state();
    let traj = simulate(&model, &x0, &[sig.clone(), sig], &mut ZeroControl { dim: 2 }, SimOptions::new(horizon, dt))?;
    let es = traj.error_states();
    Ok(Series {
        e_p: es.iter().map(|e| e.e_p).collect(),
        e_v: es.iter().map(|e| e.e_v).collect(),
        d: traj.delays.iter().map(|d| d[1]).collect(),
        times: traj.times,
    })
}

/// Stabilization value at `t = 0` on an `n x n x n_d` grid, sliced at the
/// delay node nearest `d`.
#[allow(clippy::too_many_arguments)]
pub fn solve_value_slice(k: f64, b: f64, u_max: f64, tstar: f64, role: &str, n: usize, n_d: usize, horizon: f64, d: f64) -> Result<ValueSlice> {
    if n > MAX_AXIS_NODES || n_d > MAX_AXIS_NODES {
        return Err(Error::Config(format!("at most {MAX_AXIS_NODES} nodes per axis")));
    }
    let params = ModelParams::new(k, b, u_max)?;
    let mut spec = HamiltonianSpec::new(u_max, tstar);
    spec.error_role = error_role(role)?;
    let grid = Grid::default_delay_game([n, n, n_d], tstar)?;
    let series = solve_hji(&grid, params, CostSpec::stabilization(), spec, SolveOptions::new(horizon))?;
    let v = series.initial();
    let kd = grid.nearest(2, d);
    let (p, q) = (grid.axis(0), grid.axis(1));
    Ok(ValueSlice {
        n_p: p.count,
        n_v: q.count,
        ep_range: [p.min, p.max],
        ev_range: [q.min, q.max],
        d: grid.coords(2)[kd],
        values: v.slice_last(kd),
    })
}

pub fn lk(k1: f64, k2: f64, b1: f64, b2: f64, t1: f64, t2: f64) -> Result<LkResult> {
    let v = lk_condition(k1, k2, b1, b2, t1, t2)?;
    Ok(LkResult {
        satisfied: v.satisfied,
        lhs: v.lhs,
        rhs: v.rhs,
        margin: v.margin,
    })
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = simulate)]
#[allow(clippy::too_many_arguments)]
pub fn simulate_js(k: f64, b: f64, delay: &str, tstar: f64, omega: f64, e_p0: f64, e_v0: f64, horizon: f64, dt: f64) -> std::result::Result<Series, JsError> {
    simulate_series(k, b, delay, tstar, omega, e_p0, e_v0, horizon, dt).map_err(js)
}

#[wasm_bindgen(js_name = solveSlice)]
#[allow(clippy::too_many_arguments)]
pub fn solve_slice_js(k: f64, b: f64, u_max: f64, tstar: f64, role: &str, n: usize, n_d: usize, horizon: f64, d: f64) -> std::result::Result<ValueSlice, JsError> {
    solve_value_slice(k, b, u_max, tstar, role, n, n_d, horizon, d).map_err(js)
}

#[wasm_bindgen(js_name = lkCheck)]
pub fn lk_js(k1: f64, k2: f64, b1: f64, b2: f64, t1: f64, t2: f64) -> std::result::Result<LkResult, JsError> {
    lk(k1, k2, b1, b2, t1, t2).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rollout_starts_at_initial_error() {
        let s = simulate_series(1.0, 0.15, "constant", 0.25, 0.5, 1.0, 0.0, 5.0, 0.01).unwrap();
        assert_eq!(s.times.len(), 501);
        assert!((s.e_p[0] - 1.0).abs() < 1e-15);
        assert!(s.d.iter().all(|&d| d == 0.25));
    }

    #[test]
    fn rejects_unknown_inputs() {
        assert!(simulate_series(1.0, 0.15, "square", 0.25, 0.5, 1.0, 0.0, 5.0, 0.01).is_err());
        assert!(simulate_series(1.0, 0.15, "none", 0.25, 0.5, 1.0, 0.0, 1e4, 1e-3).is_err());
        assert!(solve_value_slice(1.0, 0.15, 0.4, 0.25, "friendly", 11, 5, 1.0, 0.0).is_err());
        assert!(solve_value_slice(1.0, 0.15, 0.4, 0.25, "disabled", 101, 5, 1.0, 0.0).is_err());
    }

    #[test]
    fn small_slice_is_nonnegative_and_zero_at_rest() {
        let s = solve_value_slice(1.0, 0.15, 0.4, 0.25, "disabled", 11, 5, 1.0, 0.25).unwrap();
        assert_eq!(s.values.len(), 121);
        assert_eq!(s.d, 0.25);
        assert!(s.values.iter().all(|&v| v >= 0.0));
        // rest is the cheapest place to start from
        let centre = s.values[5 * 11 + 5];
        assert!(s.values.iter().all(|&v| v >= centre - 1e-12));
    }

    #[test]
    fn lk_matches_hand_arithmetic() {
        let r = lk(1.0, 1.0, 0.15, 0.15, 0.25, 0.25).unwrap();
        assert!(!r.satisfied);
        assert!((r.lhs - 0.09).abs() < 1e-12 && (r.rhs - 0.125).abs() < 1e-12);
    }
}
