use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dde_sim::DelaySignal;
use crate::error::{Error, Result};
use crate::hji::{ErrorRole, Grid, HamiltonianSpec, SolveOptions, DEFAULT_EP_RANGE, DEFAULT_EV_RANGE, DEFAULT_L_W, DEFAULT_W_RATE_MAX};
use crate::models::{ErrorState, ModelParams};
use crate::policy::DEFAULT_DT_CTRL;

/// Delay profile applied to both agents during rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayChoice {
    None,
    /// `d = tstar` throughout.
    Constant,
    /// `d = (tstar / 2)(1 + sin(omega t + phase))`.
    Sinusoidal,
    /// Zero until `delay_onset`, then `tstar`.
    Onset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlChoice {
    None,
    /// Feedback extracted from a stabilization value function.
    Value,
}

/// Flat experiment description read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub k: f64,
    pub b: f64,
    pub u_max: f64,
    pub l_w: f64,
    pub w_rate_max: f64,
    pub w_role: ErrorRole,

    pub delay: DelayChoice,
    pub tstar: f64,
    pub omega: f64,
    pub phase: f64,
    pub delay_onset: f64,

    pub control: ControlChoice,
    pub control_start: f64,
    pub e0: [f64; 2],
    pub sim_horizon: f64,
    pub dt: f64,
    pub dt_ctrl: f64,
    /// Every n-th sample is written to trajectory CSVs.
    pub csv_stride: usize,

    pub grid: [usize; 3],
    pub ep_range: [f64; 2],
    pub ev_range: [f64; 2],
    pub horizon: f64,
    pub cfl: f64,
    pub slice_stride: usize,

    pub threshold: f64,

    pub samples: usize,
    pub gap_delays: Vec<f64>,
    pub gap_grid: [usize; 3],

    pub sweep_k: Vec<f64>,
    pub sweep_b: Vec<f64>,
    pub sweep_tstar: Vec<f64>,
    pub sweep_horizon: f64,

    pub seed: u64,
    /// Step-1 value dump used by `simulate` with value control and by `reach`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value_file: Option<String>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "custom".into(),
            k: 1.0,
            b: 0.15,
            u_max: 0.4,
            l_w: DEFAULT_L_W,
            w_rate_max: DEFAULT_W_RATE_MAX,
            w_role: ErrorRole::Adversarial,
            delay: DelayChoice::Constant,
            tstar: 0.25,
            omega: 0.5,
            phase: 0.0,
            delay_onset: 0.0,
            control: ControlChoice::None,
            control_start: 0.0,
            e0: [1.0, 0.0],
            sim_horizon: 60.0,
            dt: 1e-3,
            dt_ctrl: DEFAULT_DT_CTRL,
            csv_stride: 10,
            grid: [51, 51, 11],
            ep_range: [DEFAULT_EP_RANGE.0, DEFAULT_EP_RANGE.1],
            ev_range: [DEFAULT_EV_RANGE.0, DEFAULT_EV_RANGE.1],
            horizon: 10.0,
            cfl: 0.5,
            slice_stride: 10,
            threshold: 1.5,
            samples: 100,
            gap_delays: vec![0.1, 0.2, 0.4],
            gap_grid: [31, 31, 7],
            sweep_k: vec![0.02, 0.04, 0.06, 0.08, 0.1],
            sweep_b: vec![0.02, 0.04, 0.06, 0.08, 0.1],
            sweep_tstar: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            sweep_horizon: 400.0,
            seed: 0,
            value_file: None,
        }
    }
}

const PRESETS: [(&str, &str); 5] = [
    ("fig2", include_str!("../../presets/fig2.toml")),
    ("fig3", include_str!("../../presets/fig3.toml")),
    ("fig4", include_str!("../../presets/fig4.toml")),
    ("fig5", include_str!("../../presets/fig5.toml")),
    ("smoke", include_str!("../../presets/smoke.toml")),
];

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let sc: Scenario = toml::from_str(text).map_err(|e| Error::config(format!("bad scenario: {e}")))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read scenario {}: {e}", path.display())))?;
        Scenario::from_toml(&text)
    }

    pub fn preset_names() -> Vec<&'static str> {
        PRESETS.iter().map(|(n, _)| *n).collect()
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::config(format!("unknown preset {name:?}; known: {}", Scenario::preset_names().join(", "))))?;
        Scenario::from_toml(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario fields are all representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("sim_horizon", self.sim_horizon),
            ("dt", self.dt),
            ("dt_ctrl", self.dt_ctrl),
            ("horizon", self.horizon),
            ("sweep_horizon", self.sweep_horizon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        let nonneg = [
            ("b", self.b),
            ("u_max", self.u_max),
            ("l_w", self.l_w),
            ("w_rate_max", self.w_rate_max),
            ("tstar", self.tstar),
            ("omega", self.omega),
            ("delay_onset", self.delay_onset),
            ("control_start", self.control_start),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be nonnegative and finite, got {v}")));
            }
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::config(format!("cfl must lie in (0, 1], got {}", self.cfl)));
        }
        if self.threshold.is_nan() || self.threshold < 0.0 {
            return Err(Error::config(format!("threshold must be nonnegative, got {}", self.threshold)));
        }
        if self.csv_stride == 0 || self.slice_stride == 0 {
            return Err(Error::config("csv_stride and slice_stride must be at least 1"));
        }
        if self.grid.iter().chain(&self.gap_grid).any(|&n| n < 3) {
            return Err(Error::config("every grid axis needs at least 3 nodes"));
        }
        for (name, r) in [("ep_range", self.ep_range), ("ev_range", self.ev_range)] {
            if !(r[0] < r[1]) || !r.iter().all(|x| x.is_finite()) {
                return Err(Error::config(format!("{name} must be an increasing finite pair, got {r:?}")));
            }
        }
        if !self.e0.iter().all(|x| x.is_finite()) {
            return Err(Error::config("e0 must be finite"));
        }
        Ok(())
    }

    pub fn params(&self) -> Result<ModelParams> {
        ModelParams::new(self.k, self.b, self.u_max)
    }

    /// Game bounds with the delay box `[0, tstar]`.
    pub fn spec(&self) -> HamiltonianSpec {
        self.spec_with_delay(self.tstar, self.w_role)
    }

    pub fn spec_with_delay(&self, d_max: f64, role: ErrorRole) -> HamiltonianSpec {
        HamiltonianSpec {
            u_max: self.u_max,
            l_w: self.l_w,
            w_rate_max: self.w_rate_max,
            d_max,
            error_role: role,
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        self.grid_with(self.grid, self.tstar)
    }

    pub fn grid_with(&self, counts: [usize; 3], d_max: f64) -> Result<Grid> {
        if !(d_max > 0.0) {
            return Err(Error::config(format!("value-function grids need tstar > 0, got {d_max}")));
        }
        Grid::delay_game(counts, (self.ep_range[0], self.ep_range[1]), (self.ev_range[0], self.ev_range[1]), d_max)
    }

    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            horizon: self.horizon,
            cfl: self.cfl,
            slice_stride: self.slice_stride,
        }
    }

    pub fn delay_signal(&self) -> DelaySignal {
        self.delay_signal_of(self.delay)
    }

    pub fn delay_signal_of(&self, kind: DelayChoice) -> DelaySignal {
        match kind {
            DelayChoice::None => DelaySignal::zero(),
            DelayChoice::Constant => DelaySignal::constant(self.tstar),
            DelayChoice::Sinusoidal => DelaySignal::sinusoidal(self.tstar, self.omega, self.phase),
            DelayChoice::Onset => DelaySignal::piecewise(self.tstar, vec![(0.0, 0.0), (self.delay_onset, self.tstar)]),
        }
    }

    pub fn initial_state(&self) -> Vec<f64> {
        ErrorState::new(self.e0[0], self.e0[1]).to_full_state()
    }
}
