//! Delay-free approximation of the coupled system through algebraic
//! constraints on the state derivatives,
//!
//! ```text
//! y1 = f1(x1, est(x2, y2, d2), u1) + w1
//! y2 = f2(x2, est(x1, y1, d1), u2) + w2
//! ```
//!
//! and empirical measurement of the approximation error `w` along true
//! delayed trajectories.

use std::io::Write;

use crate::dde_sim::{simulate, DelaySignal, HistoryBuffer, SimOptions, Trajectory, ZeroControl};
use crate::error::{Error, Result};
use crate::models::{Agent, CoupledDynamics};

pub const CONSTRAINT_TOL: f64 = 1e-10;
pub const MAX_FIXED_POINT_ITERS: usize = 100;
const DAMPING: f64 = 0.5;

/// Arguments of the constraint system at one instant.
#[derive(Debug, Clone, Copy)]
pub struct ConstraintInputs<'a> {
    pub x1: &'a [f64],
    pub x2: &'a [f64],
    pub d1: f64,
    pub d2: f64,
    pub u1: &'a [f64],
    pub u2: &'a [f64],
    pub w1: &'a [f64],
    pub w2: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSolution {
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
}

/// Right-hand side of the constraints evaluated at a guess `(y1, y2)`.
fn constraint_map<M: CoupledDynamics + ?Sized>(model: &M, inp: &ConstraintInputs, y1: &[f64], y2: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = model.agent_dim();
    let mut est1 = vec![0.0; n];
    let mut est2 = vec![0.0; n];
    model.delayed_estimate(inp.x1, y1, inp.d1, &mut est1);
    model.delayed_estimate(inp.x2, y2, inp.d2, &mut est2);
    let mut g1 = vec![0.0; n];
    let mut g2 = vec![0.0; n];
    model.agent_rhs(Agent::First, inp.x1, &est2, inp.u1, &mut g1);
    model.agent_rhs(Agent::Second, inp.x2, &est1, inp.u2, &mut g2);
    for i in 0..n {
        g1[i] += inp.w1[i];
        g2[i] += inp.w2[i];
    }
    (g1, g2)
}

/// `y - g(y)` stacked over both agents.
pub fn constraint_residual<M: CoupledDynamics + ?Sized>(model: &M, inp: &ConstraintInputs, y1: &[f64], y2: &[f64]) -> Vec<f64> {
    let (g1, g2) = constraint_map(model, inp, y1, y2);
    y1.iter()
        .zip(&g1)
        .chain(y2.iter().zip(&g2))
        .map(|(y, g)| y - g)
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Solves the constraints for `(y1, y2)`.
///
/// Affine models take one dense linear solve. Other models use the
/// fixed-point iteration `y <- g(y)`, switching to `y <- (y + g(y)) / 2`
/// once the plain iteration stops contracting.
pub fn solve_constraints<M: CoupledDynamics + ?Sized>(model: &M, inp: &ConstraintInputs) -> Result<ConstraintSolution> {
    let n = model.agent_dim();
    for (name, v) in [("x1", inp.x1), ("x2", inp.x2), ("w1", inp.w1), ("w2", inp.w2)] {
        if v.len() != n {
            return Err(Error::precondition(format!("{name} has length {}, expected {n}", v.len())));
        }
    }
    if inp.d1 < 0.0 || inp.d2 < 0.0 {
        return Err(Error::precondition("delays must be nonnegative"));
    }
    if inp.d1 == 0.0 && inp.d2 == 0.0 {
        let zeros = vec![0.0; n];
        let (y1, y2) = constraint_map(model, inp, &zeros, &zeros);
        let residual_norm = norm(&constraint_residual(model, inp, &y1, &y2));
        return Ok(ConstraintSolution { y1, y2, residual_norm, iterations: 1 });
    }
    if model.is_affine() {
        solve_affine(model, inp)
    } else {
        solve_fixed_point(model, inp)
    }
}

fn solve_affine<M: CoupledDynamics + ?Sized>(model: &M, inp: &ConstraintInputs) -> Result<ConstraintSolution> {
    let n = model.agent_dim();
    let split = |y: &nalgebra::DVector<f64>| (y.as_slice()[..n].to_vec(), y.as_slice()[n..].to_vec());
    let zero = nalgebra::DVector::zeros(2 * n);
    let (z1, z2) = split(&zero);
    let r0 = nalgebra::DVector::from_vec(constraint_residual(model, inp, &z1, &z2));
    let mut jac = nalgebra::DMatrix::zeros(2 * n, 2 * n);
    for j in 0..2 * n {
        let mut e = nalgebra::DVector::zeros(2 * n);
        e[j] = 1.0;
        let (e1, e2) = split(&e);
        let rj = nalgebra::DVector::from_vec(constraint_residual(model, inp, &e1, &e2));
        jac.set_column(j, &(rj - &r0));
    }
    let y = jac
        .lu()
        .solve(&(-r0))
        .ok_or(Error::ConstraintSolve { iterations: 1, contraction: f64::INFINITY })?;
    let (y1, y2) = split(&y);
    let residual_norm = norm(&constraint_residual(model, inp, &y1, &y2));
    Ok(ConstraintSolution { y1, y2, residual_norm, iterations: 1 })
}

fn solve_fixed_point<M: CoupledDynamics + ?Sized>(model: &M, inp: &ConstraintInputs) -> Result<ConstraintSolution> {
    let n = model.agent_dim();
    let mut y1 = vec![0.0; n];
    let mut y2 = vec![0.0; n];
    let mut damping = 1.0;
    let mut prev_step = f64::INFINITY;
    let mut contraction = f64::NAN;
    for iter in 1..=MAX_FIXED_POINT_ITERS {
        let (g1, g2) = constraint_map(model, inp, &y1, &y2);
        let step: Vec<f64> = g1.iter().zip(&y1).chain(g2.iter().zip(&y2)).map(|(g, y)| g - y).collect();
        let step_norm = norm(&step);
        if !step_norm.is_finite() {
            break;
        }
        contraction = step_norm / prev_step;
        if contraction >= 1.0 && damping == 1.0 {
            damping = DAMPING;
        }
        for i in 0..n {
            y1[i] += damping * step[i];
            y2[i] += damping * step[n + i];
        }
        let residual_norm = norm(&constraint_residual(model, inp, &y1, &y2));
        if residual_norm <= CONSTRAINT_TOL {
            return Ok(ConstraintSolution { y1, y2, residual_norm, iterations: iter });
        }
        prev_step = step_norm;
    }
    Err(Error::ConstraintSolve {
        iterations: MAX_FIXED_POINT_ITERS,
        contraction,
    })
}

/// Approximation error measured along a trajectory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResidualRecord {
    pub times: Vec<f64>,
    /// Euclidean norm of the stacked `(w1, w2)`.
    pub w_norms: Vec<f64>,
    /// Larger of the two delays at each sample.
    pub d_values: Vec<f64>,
}

impl ResidualRecord {
    pub fn max_norm(&self) -> f64 {
        self.w_norms.iter().copied().fold(0.0, f64::max)
    }

    /// Largest `|w| / d` over samples with `d > 0`; samples with zero
    /// delay must have zero residual and report infinity otherwise.
    pub fn max_ratio_to_delay(&self) -> f64 {
        self.w_norms
            .iter()
            .zip(&self.d_values)
            .map(|(&w, &d)| if d > 0.0 { w / d } else if w > 1e-12 { f64::INFINITY } else { 0.0 })
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "d", "w_norm"])?;
        for i in 0..self.times.len() {
            w.write_record([self.times[i].to_string(), self.d_values[i].to_string(), self.w_norms[i].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Residual between the true delayed right-hand side and the first-order
/// substituted one,
///
/// `w1 = f1(x1, x2(t - d2), u1) - f1(x1, x2 - y2 d2, u1)`,
///
/// with `y` from [`solve_constraints`] (at `w = 0`) at each sample and the
/// delayed states read back from the trajectory itself.
pub fn residual_w<M: CoupledDynamics + ?Sized>(model: &M, traj: &Trajectory, delays: &[DelaySignal; 2]) -> Result<ResidualRecord> {
    let n = model.agent_dim();
    let m = model.control_dim();
    if traj.is_empty() {
        return Ok(ResidualRecord::default());
    }
    let mut hist = HistoryBuffer::new(traj.times[0], traj.states[0].clone());
    for (t, x) in traj.times.iter().zip(&traj.states) {
        hist.push(*t, x)?;
    }
    let zeros = vec![0.0; n];
    let mut rec = ResidualRecord::default();
    let mut true_rhs = vec![0.0; n];
    let mut approx_rhs = vec![0.0; n];
    let mut est = vec![0.0; n];
    for (i, &t) in traj.times.iter().enumerate() {
        let x = &traj.states[i];
        let u = &traj.inputs[i];
        let d = [delays[0].eval(t), delays[1].eval(t)];
        let inp = ConstraintInputs {
            x1: &x[..n],
            x2: &x[n..],
            d1: d[0],
            d2: d[1],
            u1: &u[..m],
            u2: &u[m..],
            w1: &zeros,
            w2: &zeros,
        };
        let sol = solve_constraints(model, &inp)?;
        let mut sq = 0.0;
        for (agent, own, partner_y, partner_x, d_partner, u_own, partner_range) in [
            (Agent::First, &x[..n], &sol.y2, &x[n..], d[1], &u[..m], n..2 * n),
            (Agent::Second, &x[n..], &sol.y1, &x[..n], d[0], &u[m..], 0..n),
        ] {
            let delayed = hist.lookup(t - d_partner)?;
            model.agent_rhs(agent, own, &delayed[partner_range], u_own, &mut true_rhs);
            for j in 0..n {
                est[j] = partner_x[j] - partner_y[j] * d_partner;
            }
            model.agent_rhs(agent, own, &est, u_own, &mut approx_rhs);
            sq += true_rhs.iter().zip(&approx_rhs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        rec.times.push(t);
        rec.w_norms.push(sq.sqrt());
        rec.d_values.push(d[0].max(d[1]));
    }
    Ok(rec)
}

/// Outcome of fitting `max |w| ~ C d^p`.
#[derive(Debug, Clone, PartialEq)]
pub enum ResidualFit {
    Scaling {
        constant: f64,
        exponent: f64,
        /// `log(w_i / w_j) / log(d_i / d_j)` for consecutive delay pairs.
        pair_exponents: Vec<f64>,
        max_residuals: Vec<f64>,
    },
    /// Every residual vanished; the first-order substitution is exact.
    ExactApproximation,
}

/// Setup for the residual scaling experiment.
#[derive(Debug, Clone)]
pub struct ResidualExperiment {
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub dt: f64,
}

impl Default for ResidualExperiment {
    fn default() -> Self {
        ResidualExperiment {
            x0: vec![0.0, 0.5, 0.0, -0.5],
            horizon: 5.0,
            dt: 1e-3,
        }
    }
}

/// Simulates the uncontrolled system under each constant delay in
/// `d_list`, records the maximum residual and fits `C d^p` in log-log space.
pub fn estimate_residual_constant<M: CoupledDynamics + ?Sized>(model: &M, d_list: &[f64], exp: &ResidualExperiment) -> Result<ResidualFit> {
    if d_list.len() < 2 {
        return Err(Error::precondition("residual scaling needs at least two delay magnitudes"));
    }
    if d_list.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::precondition("delay magnitudes must be positive"));
    }
    let mut maxima = Vec::with_capacity(d_list.len());
    for &d in d_list {
        let delays = [DelaySignal::constant(d), DelaySignal::constant(d)];
        let mut ctrl = ZeroControl { dim: 2 * model.control_dim() };
        let traj = simulate(model, &exp.x0, &delays, &mut ctrl, SimOptions::new(exp.horizon, exp.dt))?;
        maxima.push(residual_w(model, &traj, &delays)?.max_norm());
    }
    if maxima.iter().all(|&w| w < 1e-12) {
        return Ok(ResidualFit::ExactApproximation);
    }
    let xs: Vec<f64> = d_list.iter().map(|d| d.ln()).collect();
    let ys: Vec<f64> = maxima.iter().map(|w| w.max(1e-300).ln()).collect();
    let nf = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::precondition("delay magnitudes must be distinct"));
    }
    let exponent = sxy / sxx;
    let constant = (my - exponent * mx).exp();
    let pair_exponents = xs.windows(2).zip(ys.windows(2)).map(|(x, y)| (y[1] - y[0]) / (x[1] - x[0])).collect();
    Ok(ResidualFit::Scaling {
        constant,
        exponent,
        pair_exponents,
        max_residuals: maxima,
    })
}
