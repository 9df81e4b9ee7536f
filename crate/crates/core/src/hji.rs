//! Grid-based backward solver for Hamilton-Jacobi-Isaacs equations
//!
//! ```text
//! 0 = dV/dt + min_u max_{w, w_d} { l(x) + dV/dx . f(x, u, w, w_d) },   V(x, T) = l_T(x)
//! ```
//!
//! on rectangular grids, using a local Lax-Friedrichs numerical Hamiltonian
//! and two-stage TVD Runge-Kutta in backward time. The delay game lives on
//! `(e_p, e_v, d)`: the controller picks `u`, the adversary picks the
//! approximation error `w` and the delay rate `w_d` in `d' = 1 - d w_d`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{delay_inertia, ModelParams};

/// Largest grid dimension the stencil code supports.
pub const MAX_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, count: usize) -> Result<Self> {
        if count < 3 {
            return Err(Error::config(format!("grid axes need at least 3 nodes, got {count}")));
        }
        if !(max > min) || !min.is_finite() || !max.is_finite() {
            return Err(Error::config(format!("grid axis [{min}, {max}] is empty")));
        }
        Ok(Axis { min, max, count })
    }

    #[inline]
    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.count - 1) as f64
    }

    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        if i + 1 == self.count {
            self.max
        } else {
            self.min + i as f64 * self.spacing()
        }
    }
}

/// Rectangular grid, row-major with the last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    axes: Vec<Axis>,
    names: Vec<String>,
    strides: Vec<usize>,
    coords: Vec<Vec<f64>>,
}

pub const DEFAULT_EP_RANGE: (f64, f64) = (-2.4, 2.4);
pub const DEFAULT_EV_RANGE: (f64, f64) = (-5.0, 5.0);

impl Grid {
    pub fn new(axes: Vec<Axis>, names: Vec<String>) -> Result<Self> {
        if axes.is_empty() || axes.len() > MAX_DIM {
            return Err(Error::config(format!("grid dimension must be in 1..={MAX_DIM}")));
        }
        if names.len() != axes.len() {
            return Err(Error::config("one name per grid axis required"));
        }
        for a in &axes {
            Axis::new(a.min, a.max, a.count)?;
        }
        let mut strides = vec![1; axes.len()];
        for i in (0..axes.len() - 1).rev() {
            strides[i] = strides[i + 1] * axes[i + 1].count;
        }
        let coords = axes.iter().map(|a| (0..a.count).map(|i| a.coord(i)).collect()).collect();
        Ok(Grid { axes, names, strides, coords })
    }

    /// `(e_p, e_v, d)` grid with `d` spanning `[0, d_max]`.
    pub fn delay_game(counts: [usize; 3], ep: (f64, f64), ev: (f64, f64), d_max: f64) -> Result<Self> {
        Grid::new(
            vec![
                Axis::new(ep.0, ep.1, counts[0])?,
                Axis::new(ev.0, ev.1, counts[1])?,
                Axis::new(0.0, d_max, counts[2])?,
            ],
            vec!["e_p".into(), "e_v".into(), "d".into()],
        )
    }

    pub fn default_delay_game(counts: [usize; 3], d_max: f64) -> Result<Self> {
        Grid::delay_game(counts, DEFAULT_EP_RANGE, DEFAULT_EV_RANGE, d_max)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn axis(&self, i: usize) -> &Axis {
        &self.axes[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    pub fn coords(&self, axis: usize) -> &[f64] {
        &self.coords[axis]
    }

    pub fn index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn multi_index(&self, mut node: usize, out: &mut [usize]) {
        for (o, s) in out.iter_mut().zip(&self.strides) {
            *o = node / s;
            node %= s;
        }
    }

    pub fn point(&self, node: usize) -> Vec<f64> {
        let mut idx = [0usize; MAX_DIM];
        self.multi_index(node, &mut idx[..self.dim()]);
        (0..self.dim()).map(|a| self.coords[a][idx[a]]).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.axes).all(|(v, a)| *v >= a.min && *v <= a.max)
    }

    /// Index of the node nearest to `value` along `axis`.
    pub fn nearest(&self, axis: usize, value: f64) -> usize {
        let a = &self.axes[axis];
        (((value - a.min) / a.spacing()).round().max(0.0) as usize).min(a.count - 1)
    }
}

/// Scalar field over the grid nodes at one backward time.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub time: f64,
}

impl ValueFunction {
    pub fn from_fn(grid: Grid, time: f64, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.len()).map(|n| f(&grid.point(n))).collect();
        ValueFunction { grid, values, time }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn range(&self) -> f64 {
        self.max() - self.min()
    }

    /// Multilinear interpolation; points outside the hull are clamped.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        let dim = self.grid.dim();
        let mut base = [0usize; MAX_DIM];
        let mut frac = [0.0; MAX_DIM];
        for a in 0..dim {
            let (i, f) = cell_of(self.grid.axis(a), x[a]);
            base[a] = i;
            frac[a] = f;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << dim) {
            let mut weight = 1.0;
            let mut node = 0;
            for a in 0..dim {
                let hi = (corner >> a) & 1 == 1;
                weight *= if hi { frac[a] } else { 1.0 - frac[a] };
                node += (base[a] + usize::from(hi)) * self.grid.stride(a);
            }
            if weight != 0.0 {
                acc += weight * self.values[node];
            }
        }
        acc
    }

    /// Finite-difference gradient at a node: central in the interior,
    /// one-sided on the boundary.
    pub fn node_gradient(&self, node: usize, out: &mut [f64]) {
        let mut idx = [0usize; MAX_DIM];
        self.grid.multi_index(node, &mut idx[..self.grid.dim()]);
        for a in 0..self.grid.dim() {
            let axis = self.grid.axis(a);
            let s = self.grid.stride(a);
            let h = axis.spacing();
            let i = idx[a];
            out[a] = if i == 0 {
                (self.values[node + s] - self.values[node]) / h
            } else if i + 1 == axis.count {
                (self.values[node] - self.values[node - s]) / h
            } else {
                (self.values[node + s] - self.values[node - s]) / (2.0 * h)
            };
        }
    }

    /// Values on the 2-D slice at index `k` of the last axis of a 3-D grid.
    pub fn slice_last(&self, k: usize) -> Vec<f64> {
        let n2 = self.grid.axis(2).count;
        self.values.iter().skip(k).step_by(n2).copied().collect()
    }

    /// Writes `<name0>,<name1>,V` for every node of the 2-D slice at index
    /// `k` of the last axis.
    pub fn write_slice_csv<W: Write>(&self, writer: W, k: usize) -> Result<()> {
        if self.grid.dim() != 3 {
            return Err(Error::config("slice export needs a 3-D grid"));
        }
        let names = self.grid.names();
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([names[0].as_str(), names[1].as_str(), "V"])?;
        let (c0, c1) = (self.grid.coords(0), self.grid.coords(1));
        for (i, x0) in c0.iter().enumerate() {
            for (j, x1) in c1.iter().enumerate() {
                let v = self.values[self.grid.index(&[i, j, k])];
                w.write_record([x0.to_string(), x1.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Flat binary dump: one text header line
    /// `axes: a,b,c; counts: ..; mins: ..; maxs: ..; time: t` followed by
    /// the row-major values as little-endian `f64`.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        let join = |it: Vec<String>| it.join(",");
        let axes = self.grid.axes();
        writeln!(
            w,
            "axes: {}; counts: {}; mins: {}; maxs: {}; time: {}",
            self.grid.names().join(","),
            join(axes.iter().map(|a| a.count.to_string()).collect()),
            join(axes.iter().map(|a| a.min.to_string()).collect()),
            join(axes.iter().map(|a| a.max.to_string()).collect()),
            self.time
        )?;
        let mut bytes = Vec::with_capacity(8 * self.values.len());
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_dump<R: BufRead>(mut r: R) -> Result<Self> {
        let mut header = String::new();
        r.read_line(&mut header)?;
        let mut fields = std::collections::HashMap::new();
        for part in header.trim_end().split(';') {
            let (key, value) = part
                .split_once(':')
                .ok_or_else(|| Error::Format(format!("header field without ':' in {part:?}")))?;
            fields.insert(key.trim().to_string(), value.trim().to_string());
        }
        let get = |key: &str| fields.get(key).ok_or_else(|| Error::Format(format!("missing header field {key}")));
        let list = |key: &str| -> Result<Vec<String>> { Ok(get(key)?.split(',').map(|s| s.trim().to_string()).collect()) };
        let parse_f = |s: &String| s.parse::<f64>().map_err(|e| Error::Format(format!("{s}: {e}")));
        let names = list("axes")?;
        let counts = list("counts")?
            .iter()
            .map(|s| s.parse::<usize>().map_err(|e| Error::Format(format!("{s}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let mins = list("mins")?.iter().map(parse_f).collect::<Result<Vec<_>>>()?;
        let maxs = list("maxs")?.iter().map(parse_f).collect::<Result<Vec<_>>>()?;
        let time = parse_f(get("time")?)?;
        if counts.len() != names.len() || mins.len() != names.len() || maxs.len() != names.len() {
            return Err(Error::Format("header lists differ in length".into()));
        }
        let axes = (0..names.len())
            .map(|i| Axis::new(mins[i], maxs[i], counts[i]))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Format(e.to_string()))?;
        let grid = Grid::new(axes, names).map_err(|e| Error::Format(e.to_string()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != 8 * grid.len() {
            return Err(Error::Format(format!("expected {} values, found {} bytes", grid.len(), bytes.len())));
        }
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(ValueFunction { grid, values, time })
    }
}

/// Lower cell index and fractional offset of `x` along `axis`, clamped to the hull.
pub(crate) fn cell_of(axis: &Axis, x: f64) -> (usize, f64) {
    let h = axis.spacing();
    let s = ((x - axis.min) / h).clamp(0.0, (axis.count - 1) as f64);
    let i = (s.floor() as usize).min(axis.count - 2);
    (i, s - i as f64)
}

/// Hamiltonian of a backward HJ problem `dV/dt + H(x, dV/dx, t) = 0`.
pub trait HamiltonianField: Sync {
    /// `H(x, p, t)` including the stage cost.
    fn hamiltonian(&self, node: usize, x: &[f64], p: &[f64], t: f64) -> f64;

    /// Writes `alpha_i(x) >= max |dH/dp_i|` over the input sets.
    fn dissipation(&self, node: usize, x: &[f64], t: f64, alpha: &mut [f64]);
}

/// `L(V)` of the semi-discrete backward equation `dV/d(T - t) = L(V)`,
/// `L = H(x, (p+ + p-)/2) + sum_i alpha_i (p+_i - p-_i) / 2`. Also returns
/// the largest `alpha_i` per axis.
fn lf_rate<H: HamiltonianField + ?Sized>(v: &ValueFunction, h: &H, t: f64, out: &mut [f64]) -> [f64; MAX_DIM] {
    let grid = &v.grid;
    let dim = grid.dim();
    let slab = grid.stride(0);
    let values = &v.values;

    let work = |chunk_start: usize, chunk: &mut [f64]| -> [f64; MAX_DIM] {
        let mut idx = [0usize; MAX_DIM];
        let mut x = [0.0; MAX_DIM];
        let mut p = [0.0; MAX_DIM];
        let mut jump = [0.0; MAX_DIM];
        let mut alpha = [0.0; MAX_DIM];
        let mut alpha_max = [0.0f64; MAX_DIM];
        for (offset, slot) in chunk.iter_mut().enumerate() {
            let node = chunk_start + offset;
            grid.multi_index(node, &mut idx[..dim]);
            let vn = values[node];
            for a in 0..dim {
                let axis = grid.axis(a);
                let s = grid.stride(a);
                let hx = axis.spacing();
                x[a] = grid.coords(a)[idx[a]];
                let i = idx[a];
                let (pm, pp) = if i == 0 {
                    let pp = (values[node + s] - vn) / hx;
                    (pp, pp)
                } else if i + 1 == axis.count {
                    let pm = (vn - values[node - s]) / hx;
                    (pm, pm)
                } else {
                    ((vn - values[node - s]) / hx, (values[node + s] - vn) / hx)
                };
                p[a] = 0.5 * (pm + pp);
                jump[a] = pp - pm;
            }
            h.dissipation(node, &x[..dim], t, &mut alpha[..dim]);
            let mut rate = h.hamiltonian(node, &x[..dim], &p[..dim], t);
            for a in 0..dim {
                rate += 0.5 * alpha[a] * jump[a];
                alpha_max[a] = alpha_max[a].max(alpha[a]);
            }
            *slot = rate;
        }
        alpha_max
    };

    let merge = |mut a: [f64; MAX_DIM], b: [f64; MAX_DIM]| {
        for i in 0..MAX_DIM {
            a[i] = a[i].max(b[i]);
        }
        a
    };

    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(slab)
            .enumerate()
            .map(|(c, chunk)| work(c * slab, chunk))
            .reduce(|| [0.0; MAX_DIM], merge)
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(slab)
            .enumerate()
            .map(|(c, chunk)| work(c * slab, chunk))
            .fold([0.0; MAX_DIM], merge)
    }
}

fn cfl_rate(grid: &Grid, alpha_max: &[f64; MAX_DIM]) -> f64 {
    (0..grid.dim()).map(|a| alpha_max[a] / grid.axis(a).spacing()).sum()
}

fn check_finite(values: &[f64], step: usize, cfl: f64) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Instability { step, cfl })
    }
}

/// One forward-Euler Lax-Friedrichs step of size `dt` backward in time,
/// from `v.time` to `v.time - dt`.
pub fn lax_friedrichs_step<H: HamiltonianField + ?Sized>(v: &ValueFunction, h: &H, dt: f64) -> Result<ValueFunction> {
    let mut rate = vec![0.0; v.values.len()];
    let alpha = lf_rate(v, h, v.time, &mut rate);
    let values: Vec<f64> = v.values.iter().zip(&rate).map(|(a, r)| a + dt * r).collect();
    let cfl = dt * cfl_rate(&v.grid, &alpha);
    check_finite(&values, 0, cfl)?;
    Ok(ValueFunction {
        grid: v.grid.clone(),
        values,
        time: v.time - dt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub horizon: f64,
    pub cfl: f64,
    /// Keep every `slice_stride`-th backward step (plus both ends).
    pub slice_stride: usize,
}

impl SolveOptions {
    pub fn new(horizon: f64) -> Self {
        SolveOptions {
            horizon,
            cfl: 0.5,
            slice_stride: 10,
        }
    }
}

/// Stored backward-time slices, ordered from `t = T` down to `t = 0`.
#[derive(Debug, Clone)]
pub struct ValueSeries {
    pub slices: Vec<ValueFunction>,
    pub steps: usize,
    /// Time step taken at every backward step.
    pub dt_history: Vec<f64>,
}

impl ValueSeries {
    /// Value at the initial time `t = 0`.
    pub fn initial(&self) -> &ValueFunction {
        self.slices.last().expect("value series is never empty")
    }

    pub fn terminal(&self) -> &ValueFunction {
        &self.slices[0]
    }

    /// Stored slice closest in time to `t`.
    pub fn slice_at(&self, t: f64) -> &ValueFunction {
        // times are descending
        let idx = self.slices.partition_point(|s| s.time > t);
        if idx == 0 {
            return &self.slices[0];
        }
        if idx == self.slices.len() {
            return self.initial();
        }
        let (a, b) = (&self.slices[idx - 1], &self.slices[idx]);
        if (a.time - t).abs() <= (t - b.time).abs() {
            a
        } else {
            b
        }
    }
}

/// Backward integration from `terminal` (at `t = horizon`) to `t = 0`
/// with TVD-RK2 and `dt = cfl / sum_i(alpha_i / dx_i)`.
pub fn solve_backward<H: HamiltonianField + ?Sized>(terminal: ValueFunction, h: &H, opts: SolveOptions) -> Result<ValueSeries> {
    if !(opts.horizon > 0.0) {
        return Err(Error::config(format!("horizon must be positive, got {}", opts.horizon)));
    }
    if !(opts.cfl > 0.0 && opts.cfl <= 1.0) {
        return Err(Error::config(format!("CFL number must be in (0, 1], got {}", opts.cfl)));
    }
    let stride = opts.slice_stride.max(1);
    let grid = terminal.grid.clone();
    let mut current = ValueFunction {
        time: opts.horizon,
        ..terminal
    };
    check_finite(&current.values, 0, 0.0)?;
    let mut slices = vec![current.clone()];
    let mut dt_history = Vec::new();
    let n = current.values.len();
    let mut rate = vec![0.0; n];
    let mut stage = vec![0.0; n];
    let mut step = 0;
    while current.time > 0.0 {
        step += 1;
        let t = current.time;
        let alpha = lf_rate(&current, h, t, &mut rate);
        let speed = cfl_rate(&grid, &alpha);
        let mut dt = if speed > 0.0 { opts.cfl / speed } else { t };
        if dt >= t - 1e-9 * opts.horizon {
            dt = t;
        }
        let cfl = dt * speed;
        for i in 0..n {
            stage[i] = current.values[i] + dt * rate[i];
        }
        check_finite(&stage, step, cfl)?;
        let stage_fn = ValueFunction {
            grid: grid.clone(),
            values: std::mem::take(&mut stage),
            time: t - dt,
        };
        lf_rate(&stage_fn, h, t - dt, &mut rate);
        stage = stage_fn.values;
        for i in 0..n {
            current.values[i] = 0.5 * (current.values[i] + stage[i] + dt * rate[i]);
        }
        check_finite(&current.values, step, cfl)?;
        current.time = if dt == t { 0.0 } else { t - dt };
        dt_history.push(dt);
        if step % stride == 0 || current.time == 0.0 {
            slices.push(current.clone());
        }
    }
    if slices.len() == 1 {
        slices.push(current);
    }
    Ok(ValueSeries {
        slices,
        steps: step,
        dt_history,
    })
}

/// Role of the approximation error `w` in the game.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorRole {
    /// `w` maximizes alongside the delay.
    Adversarial,
    /// `w` minimizes alongside the controller.
    Cooperative,
    /// `w = 0`.
    Disabled,
}

/// Input sets of the delay game.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianSpec {
    /// `u in [-u_max, u_max]`.
    pub u_max: f64,
    /// `w in [-l_w d, l_w d]`.
    pub l_w: f64,
    /// `w_d in [0, w_rate_max]`.
    pub w_rate_max: f64,
    /// Upper end of the delay axis; `d' <= 0` is enforced there.
    pub d_max: f64,
    pub error_role: ErrorRole,
}

pub const DEFAULT_W_RATE_MAX: f64 = 20.0;
pub const DEFAULT_L_W: f64 = 5.0;

impl HamiltonianSpec {
    pub fn new(u_max: f64, d_max: f64) -> Self {
        HamiltonianSpec {
            u_max,
            l_w: DEFAULT_L_W,
            w_rate_max: DEFAULT_W_RATE_MAX,
            d_max,
            error_role: ErrorRole::Adversarial,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.u_max >= 0.0 && self.l_w >= 0.0 && self.w_rate_max >= 0.0 && self.d_max > 0.0;
        if !ok || ![self.u_max, self.l_w, self.w_rate_max, self.d_max].iter().all(|v| v.is_finite()) {
            return Err(Error::config(format!("invalid Hamiltonian input sets: {self:?}")));
        }
        Ok(())
    }

    /// Half-width of the `w` box at delay `d`.
    #[inline]
    pub fn w_bound(&self, d: f64) -> f64 {
        match self.error_role {
            ErrorRole::Disabled => 0.0,
            _ => self.l_w * d.max(0.0),
        }
    }

    /// `d' = 1 - d w_d`, reflected so `d` cannot leave `[0, d_max]`.
    #[inline]
    pub fn delay_rate(&self, d: f64, w_d: f64) -> f64 {
        let r = 1.0 - d * w_d;
        if d >= self.d_max {
            r.min(0.0)
        } else if d <= 0.0 {
            r.max(0.0)
        } else {
            r
        }
    }

    /// Rate input that holds the delay constant (`w_d = 1/d`), clipped to its box.
    #[inline]
    pub fn hold_rate(&self, d: f64) -> f64 {
        if d > 0.0 {
            (1.0 / d).min(self.w_rate_max)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageCost {
    Zero,
    /// `l_t = e_v^2`.
    VelocityErrorSquared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalCost {
    Zero,
    /// `l_T = |e_p|`.
    AbsPositionError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostSpec {
    pub stage: StageCost,
    pub terminal: TerminalCost,
}

impl CostSpec {
    /// Velocity-error stabilization: `l_t = e_v^2`, `l_T = 0`.
    pub fn stabilization() -> Self {
        CostSpec {
            stage: StageCost::VelocityErrorSquared,
            terminal: TerminalCost::Zero,
        }
    }

    /// Terminal position error only: `l_t = 0`, `l_T = |e_p|`.
    pub fn terminal_position() -> Self {
        CostSpec {
            stage: StageCost::Zero,
            terminal: TerminalCost::AbsPositionError,
        }
    }

    #[inline]
    pub fn stage_cost(&self, x: &[f64]) -> f64 {
        match self.stage {
            StageCost::Zero => 0.0,
            StageCost::VelocityErrorSquared => x[1] * x[1],
        }
    }

    pub fn terminal_cost(&self, x: &[f64]) -> f64 {
        match self.terminal {
            TerminalCost::Zero => 0.0,
            TerminalCost::AbsPositionError => x[0].abs(),
        }
    }
}

/// Inputs of the delay game at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GameInputs {
    pub u: f64,
    pub w: f64,
    pub w_d: f64,
}

#[inline]
fn sign_or_zero(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The symmetric-delay game on `(e_p, e_v, d)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayGame {
    pub params: ModelParams,
    pub spec: HamiltonianSpec,
    pub cost: CostSpec,
}

impl DelayGame {
    pub fn new(params: ModelParams, spec: HamiltonianSpec, cost: CostSpec) -> Result<Self> {
        params.validate()?;
        spec.validate()?;
        Ok(DelayGame { params, spec, cost })
    }

    /// Drift part of the error acceleration numerator, `-2k e_p + (k d - b) e_v`.
    #[inline]
    fn drift(&self, x: &[f64]) -> f64 {
        let k = self.params.k;
        -2.0 * k * x[0] + (k * x[2] - self.params.b) * x[1]
    }

    /// `f(x, u, w, w_d)`.
    #[inline]
    pub fn dynamics(&self, x: &[f64], inp: GameInputs) -> [f64; 3] {
        let m = delay_inertia(self.params.k, x[2]);
        [x[1], (self.drift(x) + inp.u + inp.w) / m, self.spec.delay_rate(x[2], inp.w_d)]
    }

    /// `l(x) + p . f(x, u, w, w_d)`.
    #[inline]
    pub fn evaluate(&self, x: &[f64], p: &[f64], inp: GameInputs) -> f64 {
        let f = self.dynamics(x, inp);
        self.cost.stage_cost(x) + p[0] * f[0] + p[1] * f[1] + p[2] * f[2]
    }

    /// Minimizing input: `u = -u_max sign(p_ev)`, zero on a tie.
    #[inline]
    pub fn optimal_u(&self, p_ev: f64) -> f64 {
        -self.spec.u_max * sign_or_zero(p_ev)
    }

    /// Delay-rate input maximizing `p_d d'`; holds the delay on a tie.
    #[inline]
    pub fn optimal_rate(&self, d: f64, p_d: f64) -> f64 {
        if p_d > 0.0 {
            0.0
        } else if p_d < 0.0 {
            self.spec.w_rate_max
        } else {
            self.spec.hold_rate(d)
        }
    }

    /// Error input according to its role.
    #[inline]
    pub fn optimal_w(&self, d: f64, p_ev: f64) -> f64 {
        let bound = self.spec.w_bound(d);
        match self.spec.error_role {
            ErrorRole::Adversarial => bound * sign_or_zero(p_ev),
            ErrorRole::Cooperative => -bound * sign_or_zero(p_ev),
            ErrorRole::Disabled => 0.0,
        }
    }

    /// Closed-form saddle point and value. The dynamics are affine in every
    /// input and the boxes are decoupled, so each player sits on a face
    /// chosen by the sign of its switching function.
    pub fn saddle(&self, x: &[f64], p: &[f64]) -> (GameInputs, f64) {
        let inp = GameInputs {
            u: self.optimal_u(p[1]),
            w: self.optimal_w(x[2], p[1]),
            w_d: self.optimal_rate(x[2], p[2]),
        };
        (inp, self.evaluate(x, p, inp))
    }

    /// `alpha_i = max |f_i|` over the input boxes, with `u` free or fixed.
    #[inline]
    fn alpha(&self, x: &[f64], u_fixed: Option<f64>, alpha: &mut [f64]) {
        let m = delay_inertia(self.params.k, x[2]);
        let w = self.spec.w_bound(x[2]);
        alpha[0] = x[1].abs();
        alpha[1] = match u_fixed {
            Some(u) => ((self.drift(x) + u).abs() + w) / m,
            None => (self.drift(x).abs() + self.spec.u_max + w) / m,
        };
        let d = x[2];
        alpha[2] = self.spec.delay_rate(d, 0.0).abs().max(self.spec.delay_rate(d, self.spec.w_rate_max).abs());
    }
}

/// `min_u max_{w, w_d} { l + p . f }` at a grid point.
pub fn hamiltonian(game: &DelayGame, x: &[f64], p: &[f64]) -> f64 {
    game.saddle(x, p).1
}

impl HamiltonianField for DelayGame {
    fn hamiltonian(&self, _node: usize, x: &[f64], p: &[f64], _t: f64) -> f64 {
        self.saddle(x, p).1
    }

    fn dissipation(&self, _node: usize, x: &[f64], _t: f64, alpha: &mut [f64]) {
        self.alpha(x, None, alpha);
    }
}

/// Adversary-only game with the controller replaced by a tabulated
/// feedback `u*(t, node)`.
pub struct ClosedLoopGame {
    pub game: DelayGame,
    /// `(time, u* at every node)`, descending in time.
    controls: Vec<(f64, Vec<f64>)>,
}

impl ClosedLoopGame {
    /// Tabulates `u* = -u_max sign(dV/de_v)` on every stored slice of a
    /// solved stabilization game.
    pub fn from_policy(game: DelayGame, policy: &ValueSeries) -> Self {
        let controls = policy
            .slices
            .iter()
            .map(|slice| {
                let mut grad = [0.0; MAX_DIM];
                let dim = slice.grid.dim();
                let u = (0..slice.values.len())
                    .map(|node| {
                        slice.node_gradient(node, &mut grad[..dim]);
                        game.optimal_u(grad[1])
                    })
                    .collect();
                (slice.time, u)
            })
            .collect();
        ClosedLoopGame { game, controls }
    }

    fn control(&self, node: usize, t: f64) -> f64 {
        let idx = self.controls.partition_point(|(s, _)| *s > t);
        let pick = if idx == 0 {
            0
        } else if idx == self.controls.len() {
            idx - 1
        } else if (self.controls[idx - 1].0 - t).abs() <= (t - self.controls[idx].0).abs() {
            idx - 1
        } else {
            idx
        };
        self.controls[pick].1[node]
    }
}

impl HamiltonianField for ClosedLoopGame {
    fn hamiltonian(&self, node: usize, x: &[f64], p: &[f64], t: f64) -> f64 {
        let bound = self.game.spec.w_bound(x[2]);
        let inp = GameInputs {
            u: self.control(node, t),
            w: bound * sign_or_zero(p[1]),
            w_d: self.game.optimal_rate(x[2], p[2]),
        };
        self.game.evaluate(x, p, inp)
    }

    fn dissipation(&self, node: usize, x: &[f64], t: f64, alpha: &mut [f64]) {
        self.game.alpha(x, Some(self.control(node, t)), alpha);
    }
}

fn terminal_values(grid: &Grid, cost: &CostSpec, horizon: f64) -> ValueFunction {
    ValueFunction::from_fn(grid.clone(), horizon, |x| cost.terminal_cost(x))
}

/// Solves the delay game on `grid` backward from `V(x, T) = l_T(x)`.
pub fn solve_hji(grid: &Grid, params: ModelParams, cost: CostSpec, spec: HamiltonianSpec, opts: SolveOptions) -> Result<ValueSeries> {
    if grid.dim() != 3 {
        return Err(Error::config("the delay game needs an (e_p, e_v, d) grid"));
    }
    let game = DelayGame::new(params, spec, cost)?;
    solve_backward(terminal_values(grid, &cost, opts.horizon), &game, opts)
}

/// Second stage: plugs the feedback from a solved stabilization game into
/// the dynamics and solves the adversary-only problem with
/// `l_t = 0, l_T = |e_p|`. The result bounds the worst-case terminal
/// position error.
pub fn solve_hjb_closed_loop(grid: &Grid, params: ModelParams, spec: HamiltonianSpec, policy: &ValueSeries, opts: SolveOptions) -> Result<ValueSeries> {
    if grid.dim() != 3 || policy.initial().grid != *grid {
        return Err(Error::config("closed-loop solve needs the policy's (e_p, e_v, d) grid"));
    }
    let cost = CostSpec::terminal_position();
    let game = DelayGame::new(params, spec, cost)?;
    let field = ClosedLoopGame::from_policy(game, policy);
    solve_backward(terminal_values(grid, &cost, opts.horizon), &field, opts)
}

/// Sublevel set `{V <= threshold}` with per-slice areas along the last axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SafeSet {
    pub mask: Vec<bool>,
    pub threshold: f64,
    /// `(last-axis coordinate, node count x cell measure)`.
    pub slice_areas: Vec<(f64, f64)>,
}

impl SafeSet {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

pub fn extract_safe_set(v: &ValueFunction, threshold: f64) -> SafeSet {
    let mask: Vec<bool> = v.values.iter().map(|&x| x <= threshold).collect();
    let grid = &v.grid;
    let last = grid.dim() - 1;
    let cell: f64 = (0..last).map(|a| grid.axis(a).spacing()).product();
    let n_last = grid.axis(last).count;
    let mut counts = vec![0usize; n_last];
    for (node, &m) in mask.iter().enumerate() {
        if m {
            counts[node % n_last] += 1;
        }
    }
    let slice_areas = counts
        .iter()
        .enumerate()
        .map(|(k, &c)| (grid.coords(last)[k], c as f64 * cell))
        .collect();
    SafeSet { mask, threshold, slice_areas }
}
