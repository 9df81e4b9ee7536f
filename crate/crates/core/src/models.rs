//! System definitions: the coupled two-agent delay system, the double
//! integrator pair, its symmetric error-coordinate reduction and the
//! augmented affine form with explicit delay states.

use nalgebra::{Matrix4, Matrix4x2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which side of the coupled pair a right-hand side belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Agent {
    First,
    Second,
}

impl Agent {
    pub fn partner(self) -> Agent {
        match self {
            Agent::First => Agent::Second,
            Agent::Second => Agent::First,
        }
    }
}

/// Right-hand sides `f1, f2` of a coupled delay system
///
/// ```text
/// x1' = f1(x1(t), x2(t - d2(t)), u1(t))
/// x2' = f2(x2(t), x1(t - d1(t)), u2(t))
/// ```
///
/// The stacked state is `[x1, x2]` with `agent_dim()` entries per agent.
pub trait CoupledDynamics: Sync {
    fn agent_dim(&self) -> usize;

    fn control_dim(&self) -> usize;

    /// Writes `f_i(own, partner, u)` into `out`.
    fn agent_rhs(&self, agent: Agent, own: &[f64], partner: &[f64], u: &[f64], out: &mut [f64]);

    /// Taylor estimate of `x(t - d)` from `x(t)` and `x'(t)` used inside the
    /// algebraic constraints. The default is the first-order substitution
    /// `x - x' d`.
    fn delayed_estimate(&self, state: &[f64], deriv: &[f64], d: f64, out: &mut [f64]) {
        for ((o, x), y) in out.iter_mut().zip(state).zip(deriv) {
            *o = x - y * d;
        }
    }

    /// True when `f_i` composed with `delayed_estimate` is affine in the
    /// partner derivative, so the constraints reduce to one linear solve.
    fn is_affine(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Coupling spring gain.
    pub k: f64,
    /// Damping gain; positive values dissipate.
    pub b: f64,
    /// Bound on the error-coordinate control input.
    pub u_max: f64,
}

impl ModelParams {
    pub fn new(k: f64, b: f64, u_max: f64) -> Result<Self> {
        let params = ModelParams { k, b, u_max };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::config(format!("spring gain k must be positive, got {}", self.k)));
        }
        if !(self.b >= 0.0 && self.b.is_finite()) {
            return Err(Error::config(format!("damping b must be nonnegative, got {}", self.b)));
        }
        if !(self.u_max >= 0.0 && self.u_max.is_finite()) {
            return Err(Error::config(format!("u_max must be nonnegative, got {}", self.u_max)));
        }
        Ok(())
    }
}

/// Pair of point masses coupled by a delayed spring. Each agent state is
/// `[v, p]` and the control is a scalar force.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoupledTdsModel {
    pub params: ModelParams,
}

impl CoupledTdsModel {
    pub fn new(params: ModelParams) -> Result<Self> {
        params.validate()?;
        Ok(CoupledTdsModel { params })
    }
}

impl CoupledDynamics for CoupledTdsModel {
    fn agent_dim(&self) -> usize {
        2
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn agent_rhs(&self, _agent: Agent, own: &[f64], partner: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = double_integrator_rhs([own[0], own[1]], [partner[0], partner[1]], u[0], &self.params);
        out[1] = own[0];
    }

    /// Second-order expansion on the position channel,
    /// `p(t-d) ~ p - v d + a d^2 / 2`, which gives the quadratic delay
    /// coupling of the closed-form model.
    fn delayed_estimate(&self, state: &[f64], deriv: &[f64], d: f64, out: &mut [f64]) {
        out[0] = state[0] - deriv[0] * d;
        out[1] = state[1] - deriv[1] * d + 0.5 * deriv[0] * d * d;
    }

    fn is_affine(&self) -> bool {
        true
    }
}

/// Acceleration of one agent: `-k (p1 - p2d) - b v1 + u1`.
///
/// `own = [v1, p1]`, `partner_delayed = [v2(t - d2), p2(t - d2)]`.
pub fn double_integrator_rhs(own: [f64; 2], partner_delayed: [f64; 2], u: f64, params: &ModelParams) -> f64 {
    -params.k * (own[1] - partner_delayed[1]) - params.b * own[0] + u
}

/// Relative position and velocity of the two agents.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorState {
    pub e_p: f64,
    pub e_v: f64,
}

impl ErrorState {
    pub fn new(e_p: f64, e_v: f64) -> Self {
        ErrorState { e_p, e_v }
    }

    /// Reads `[v1, p1, v2, p2]`.
    pub fn from_full_state(x: &[f64]) -> Self {
        ErrorState {
            e_p: x[1] - x[3],
            e_v: x[0] - x[2],
        }
    }

    /// Symmetric split around the origin: `p1 = -p2 = e_p / 2`, same for velocity.
    pub fn to_full_state(&self) -> Vec<f64> {
        vec![0.5 * self.e_v, 0.5 * self.e_p, -0.5 * self.e_v, -0.5 * self.e_p]
    }

    pub fn is_finite(&self) -> bool {
        self.e_p.is_finite() && self.e_v.is_finite()
    }
}

/// Effective inertia `1 + k d^2 / 2` picked up by the error acceleration
/// once the delayed position is expanded to second order.
#[inline]
pub fn delay_inertia(k: f64, d: f64) -> f64 {
    1.0 + 0.5 * k * d * d
}

/// Symmetric-delay error dynamics `(e_p', e_v')` of the approximate model.
///
/// `u_e = u1 - u2` is the error-coordinate input and `w` the lumped
/// approximation error.
pub fn error_dynamics_rhs(e: ErrorState, d: f64, u_e: f64, w: f64, params: &ModelParams) -> (f64, f64) {
    let k = params.k;
    let accel = (-2.0 * k * e.e_p + (k * d - params.b) * e.e_v + u_e + w) / delay_inertia(k, d);
    (e.e_v, accel)
}

/// Closed-form solution of the two simultaneous torque equations.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialDelayModel {
    /// `x' = A_p x + B_p u` with `x = [v1, p1, v2, p2]`, `u = [u1, u2]`.
    pub a_p: Matrix4<f64>,
    pub b_p: Matrix4x2<f64>,
    /// `1 - (k d1^2 / 2)(k d2^2 / 2)`.
    pub det: f64,
    /// `det * A_p`; entries are polynomials in `(d1, d2)`.
    pub a_numer: Matrix4<f64>,
    /// `det * B_p`.
    pub b_numer: Matrix4x2<f64>,
}

/// Builds `A_p(d), B_p(d)` by solving
///
/// ```text
/// tau1 - (k d2^2/2) tau2 = -k (p1 - p2 + v2 d2) - b v1 + u1
/// tau2 - (k d1^2/2) tau1 = -k (p2 - p1 + v1 d1) - b v2 + u2
/// ```
pub fn polynomial_delay_matrices(k: f64, b: f64, d1: f64, d2: f64) -> Result<PolynomialDelayModel> {
    let a = 0.5 * k * d2 * d2;
    let c = 0.5 * k * d1 * d1;
    let det = 1.0 - a * c;
    if det.abs() < 1e-9 {
        return Err(Error::SingularCoupling { det });
    }
    // right-hand sides of the two equations as rows over [v1, p1, v2, p2]
    let r1 = [-b, -k, -k * d2, k];
    let r2 = [-k * d1, k, -b, -k];

    let mut a_numer = Matrix4::zeros();
    for j in 0..4 {
        a_numer[(0, j)] = r1[j] + a * r2[j];
        a_numer[(2, j)] = r2[j] + c * r1[j];
    }
    // velocity rows of the kinematic equations
    a_numer[(1, 0)] = det;
    a_numer[(3, 2)] = det;

    let mut b_numer = Matrix4x2::zeros();
    b_numer[(0, 0)] = 1.0;
    b_numer[(0, 1)] = a;
    b_numer[(2, 0)] = c;
    b_numer[(2, 1)] = 1.0;

    Ok(PolynomialDelayModel {
        a_p: a_numer / det,
        b_p: b_numer / det,
        det,
        a_numer,
        b_numer,
    })
}

/// State and inputs of the augmented model where delayed partner states
/// are carried as auxiliary states `x1_hat, x2_hat` and the delays evolve
/// under the rate inputs `w1, w2`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedAffineState {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub x1_hat: Vec<f64>,
    pub x2_hat: Vec<f64>,
    pub d1: f64,
    pub d2: f64,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub w1: f64,
    pub w2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDerivative {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub x1_hat: Vec<f64>,
    pub x2_hat: Vec<f64>,
    pub d1: f64,
    pub d2: f64,
}

/// `[f1(x1, x2_hat, u1), f2(x2, x1_hat, u2), (x1 - x1_hat) w1, (x2 - x2_hat) w2, 1 - d1 w1, 1 - d2 w2]`
pub fn augmented_affine_rhs<F1, F2>(s: &AugmentedAffineState, f1: F1, f2: F2) -> Result<AugmentedDerivative>
where
    F1: Fn(&[f64], &[f64], &[f64]) -> Vec<f64>,
    F2: Fn(&[f64], &[f64], &[f64]) -> Vec<f64>,
{
    if s.w1 < 0.0 || s.w2 < 0.0 {
        return Err(Error::precondition("delay rate inputs must be nonnegative"));
    }
    let relax = |x: &[f64], x_hat: &[f64], w: f64| -> Vec<f64> {
        x.iter().zip(x_hat).map(|(a, b)| (a - b) * w).collect()
    };
    Ok(AugmentedDerivative {
        x1: f1(&s.x1, &s.x2_hat, &s.u1),
        x2: f2(&s.x2, &s.x1_hat, &s.u2),
        x1_hat: relax(&s.x1, &s.x1_hat, s.w1),
        x2_hat: relax(&s.x2, &s.x2_hat, s.w2),
        d1: 1.0 - s.d1 * s.w1,
        d2: 1.0 - s.d2 * s.w2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params(k: f64, b: f64) -> ModelParams {
        ModelParams::new(k, b, 1.0).unwrap()
    }

    #[test]
    fn double_integrator_examples() {
        let p = params(1.0, 0.15);
        assert_eq!(double_integrator_rhs([0.0, 0.3], [0.0, 0.3], 0.0, &p), 0.0);
        assert_eq!(double_integrator_rhs([0.0, 1.0], [0.0, 0.0], 0.0, &params(1.0, 0.0)), -1.0);
        assert_abs_diff_eq!(double_integrator_rhs([2.0, 0.0], [0.0, 0.0], 0.4, &p), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(ModelParams::new(0.0, 0.1, 0.4).is_err());
        assert!(ModelParams::new(1.0, -0.1, 0.4).is_err());
        assert!(ModelParams::new(1.0, 0.1, -1.0).is_err());
    }

    #[test]
    fn error_dynamics_examples() {
        let p = params(1.0, 0.15);
        let (dp, dv) = error_dynamics_rhs(ErrorState::new(0.7, -0.3), 0.0, 0.2, 0.0, &p);
        assert_eq!(dp, -0.3);
        assert_abs_diff_eq!(dv, -2.0 * 0.7 - 0.15 * -0.3 + 0.2, epsilon = 1e-15);

        let (_, dv) = error_dynamics_rhs(ErrorState::new(1.0, 0.0), 0.5, 0.0, 0.0, &params(1.0, 0.0));
        // 2x2 solve of the torque equations with d1 = d2 = 0.5, p1 = 0.5, p2 = -0.5
        let m = nalgebra::Matrix2::new(1.0, -0.125, -0.125, 1.0);
        let rhs = nalgebra::Vector2::new(-1.0, 1.0);
        let tau = m.lu().solve(&rhs).unwrap();
        assert_abs_diff_eq!(dv, tau[0] - tau[1], epsilon = 1e-14);
        assert_abs_diff_eq!(dv, -2.0 / 1.125, epsilon = 1e-14);

        let (_, dv) = error_dynamics_rhs(ErrorState::new(0.0, 1.0), 0.24, 0.0, 0.0, &p);
        assert_abs_diff_eq!(dv, (0.24 - 0.15) / 1.0288, epsilon = 1e-14);
    }

    #[test]
    fn error_dynamics_matches_agent_difference_without_delay() {
        let p = params(1.3, 0.2);
        let x = [0.4, -0.2, -0.1, 0.5];
        let (u1, u2) = (0.3, -0.1);
        let a1 = double_integrator_rhs([x[0], x[1]], [x[2], x[3]], u1, &p);
        let a2 = double_integrator_rhs([x[2], x[3]], [x[0], x[1]], u2, &p);
        let (_, dv) = error_dynamics_rhs(ErrorState::from_full_state(&x), 0.0, u1 - u2, 0.0, &p);
        assert_eq!(dv, a1 - a2);
    }

    #[test]
    fn polynomial_matrices_zero_delay() {
        let m = polynomial_delay_matrices(1.0, 0.15, 0.0, 0.0).unwrap();
        assert_eq!(m.det, 1.0);
        let expected = Matrix4::new(
            -0.15, -1.0, 0.0, 1.0, //
            1.0, 0.0, 0.0, 0.0, //
            0.0, 1.0, -0.15, -1.0, //
            0.0, 0.0, 1.0, 0.0,
        );
        assert_eq!(m.a_p, expected);
        assert_eq!(m.b_p, Matrix4x2::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0));
    }

    #[test]
    fn polynomial_matrices_determinant() {
        let m = polynomial_delay_matrices(1.0, 0.0, 0.2, 0.2).unwrap();
        assert_abs_diff_eq!(m.det, 0.9996, epsilon = 1e-15);
    }

    #[test]
    fn polynomial_matrices_singular() {
        // (k d^2 / 2)^2 = 1 at k = 2, d = 1
        let err = polynomial_delay_matrices(2.0, 0.0, 1.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::SingularCoupling { .. }));
    }

    #[test]
    fn zero_delay_closed_loop_is_stable() {
        let m = polynomial_delay_matrices(1.0, 0.15, 0.0, 0.0).unwrap();
        let eig = m.a_p.complex_eigenvalues();
        for z in eig.iter() {
            assert!(z.re <= 1e-12, "eigenvalue {z} in right half plane");
        }
    }

    #[test]
    fn polynomial_matrices_match_error_dynamics_on_symmetric_split() {
        let p = params(1.0, 0.15);
        for &d in &[0.0, 0.1, 0.24, 0.5] {
            let m = polynomial_delay_matrices(p.k, p.b, d, d).unwrap();
            let e = ErrorState::new(0.8, -0.4);
            let x = nalgebra::Vector4::from_column_slice(&e.to_full_state());
            let u = nalgebra::Vector2::new(0.2, -0.2);
            let xdot = m.a_p * x + m.b_p * u;
            let (_, dv) = error_dynamics_rhs(e, d, 0.4, 0.0, &p);
            assert_abs_diff_eq!(xdot[0] - xdot[2], dv, epsilon = 1e-14);
        }
    }

    #[test]
    fn numerators_are_polynomial_in_delay() {
        // degree-4 interpolation through 5 samples reproduces a 6th sample
        let k = 1.0;
        let b = 0.15;
        let nodes = [0.0, 0.1, 0.2, 0.3, 0.4];
        let probe = 0.27;
        let eval = |d: f64| {
            let m = polynomial_delay_matrices(k, b, d, 0.7 * d).unwrap();
            let mut v: Vec<f64> = m.a_numer.iter().copied().collect();
            v.extend(m.b_numer.iter().copied());
            v.push(m.det);
            v
        };
        let samples: Vec<Vec<f64>> = nodes.iter().map(|&d| eval(d)).collect();
        let truth = eval(probe);
        for (idx, want) in truth.iter().enumerate() {
            let mut got = 0.0;
            for i in 0..nodes.len() {
                let mut basis = 1.0;
                for j in 0..nodes.len() {
                    if i != j {
                        basis *= (probe - nodes[j]) / (nodes[i] - nodes[j]);
                    }
                }
                got += basis * samples[i][idx];
            }
            assert_abs_diff_eq!(got, *want, epsilon = 1e-10);
        }
    }

    #[test]
    fn augmented_examples() {
        let f = |x: &[f64], xh: &[f64], u: &[f64]| vec![-x[0] + xh[0] + u[0]];
        let mut s = AugmentedAffineState {
            x1: vec![1.0],
            x2: vec![-1.0],
            x1_hat: vec![1.0],
            x2_hat: vec![-1.0],
            d1: 0.25,
            d2: 0.5,
            u1: vec![0.0],
            u2: vec![0.0],
            w1: 2.0,
            w2: 2.0,
        };
        let der = augmented_affine_rhs(&s, f, f).unwrap();
        assert_eq!(der.x1_hat, vec![0.0]);
        assert_eq!(der.x2_hat, vec![0.0]);
        assert_eq!(der.d1, 0.5);
        assert_eq!(der.d2, 0.0);
        assert_eq!(der.x1, vec![-2.0]);

        s.w1 = -1.0;
        assert!(augmented_affine_rhs(&s, f, f).is_err());
    }
}
