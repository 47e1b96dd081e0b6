//! Deterministic fixed-step method-of-steps integration of constant-delay
//! and neutral delay systems, with dense cubic-Hermite output.
//!
//! The step size is snapped to `tau/m` for an integer `m`, so every delayed
//! lookup lands on a completed interval: the delayed argument of any
//! Runge-Kutta stage falls on a stored node or the midpoint of a stored
//! interval, never inside the step being computed. Derivative
//! discontinuities propagate from the initial time at multiples of `tau`
//! and therefore sit on step boundaries; nodes carry separate left and
//! right derivatives so the interpolant stays one-sided across them, which
//! keeps the classical 4th-order behavior of the scheme.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Abort integration when any state component exceeds this magnitude.
/// The cubic nonlinearity blows up in finite time outside the
/// dissipativity region.
pub const DIVERGENCE_GUARD: f64 = 1e6;

/// Right-hand side of a delay system `x'(t) = f(t, x(t), x(t - tau))`.
///
/// Implementations must be deterministic and side-effect free.
pub trait DelayRhs {
    fn dim(&self) -> usize;

    /// Writes `f(t, x, x_delayed)` into `out`. All slices have length `dim`.
    fn eval(&self, t: f64, x: &[f64], x_delayed: &[f64], out: &mut [f64]);

    /// Whether the right-hand side depends explicitly on `t`.
    fn time_dependent(&self) -> bool {
        false
    }
}

/// Closure adapter for [`DelayRhs`].
pub struct FnRhs<F> {
    dim: usize,
    time_dependent: bool,
    f: F,
}

impl<F: Fn(f64, &[f64], &[f64], &mut [f64])> FnRhs<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self {
            dim,
            time_dependent: false,
            f,
        }
    }

    pub fn time_dependent(dim: usize, f: F) -> Self {
        Self {
            dim,
            time_dependent: true,
            f,
        }
    }
}

impl<F: Fn(f64, &[f64], &[f64], &mut [f64])> DelayRhs for FnRhs<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, t: f64, x: &[f64], x_delayed: &[f64], out: &mut [f64]) {
        (self.f)(t, x, x_delayed, out)
    }

    fn time_dependent(&self) -> bool {
        self.time_dependent
    }
}

#[inline]
fn hermite(y0: f64, d0: f64, y1: f64, d1: f64, h: f64, u: f64) -> f64 {
    let u2 = u * u;
    let um = 1.0 - u;
    let um2 = um * um;
    (1.0 + 2.0 * u) * um2 * y0
        + u * um2 * h * d0
        + u2 * (3.0 - 2.0 * u) * y1
        + u2 * (u - 1.0) * h * d1
}

#[inline]
fn hermite_deriv(y0: f64, d0: f64, y1: f64, d1: f64, h: f64, u: f64) -> f64 {
    let u2 = u * u;
    (6.0 * u2 - 6.0 * u) * (y0 - y1) / h
        + (3.0 * u2 - 4.0 * u + 1.0) * d0
        + (3.0 * u2 - 2.0 * u) * d1
}

/// A function on `[-tau, 0]`: initial data or the sliding state of a delay
/// system, stored as values and derivatives on a uniform grid and evaluated
/// by cubic Hermite interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct HistorySegment {
    delay: f64,
    dim: usize,
    /// node-major: values[node * dim + c], node 0 at theta = -delay
    values: Vec<f64>,
    derivs: Vec<f64>,
}

impl HistorySegment {
    pub fn new(delay: f64, dim: usize, values: Vec<f64>, derivs: Vec<f64>) -> Result<Self> {
        if !(delay > 0.0) || !delay.is_finite() {
            return Err(Error::Config(format!("delay must be positive, got {delay}")));
        }
        if dim == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        if values.len() != derivs.len() || values.len() % dim != 0 || values.len() / dim < 2 {
            return Err(Error::Config(format!(
                "segment storage must hold >= 2 nodes of dimension {dim}; got {} values, {} derivatives",
                values.len(),
                derivs.len()
            )));
        }
        Ok(Self {
            delay,
            dim,
            values,
            derivs,
        })
    }

    /// Constant segment with the given number of grid intervals.
    pub fn constant(delay: f64, intervals: usize, value: &[f64]) -> Result<Self> {
        let dim = value.len();
        let nodes = intervals + 1;
        if intervals == 0 {
            return Err(Error::Config("need at least one grid interval".into()));
        }
        let mut values = Vec::with_capacity(nodes * dim);
        for _ in 0..nodes {
            values.extend_from_slice(value);
        }
        let derivs = vec![0.0; nodes * dim];
        Self::new(delay, dim, values, derivs)
    }

    /// Scalar segment sampled from a closed-form function and its derivative.
    pub fn sample_scalar_with_deriv(
        delay: f64,
        intervals: usize,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        if intervals == 0 {
            return Err(Error::Config("need at least one grid interval".into()));
        }
        let h = delay / intervals as f64;
        let mut values = Vec::with_capacity(intervals + 1);
        let mut derivs = Vec::with_capacity(intervals + 1);
        for i in 0..=intervals {
            let theta = if i == intervals { 0.0 } else { -delay + i as f64 * h };
            values.push(f(theta));
            derivs.push(df(theta));
        }
        Self::new(delay, 1, values, derivs)
    }

    /// Scalar segment sampled from a function, derivatives by central
    /// finite differences (one-sided at the ends).
    pub fn sample_scalar(delay: f64, intervals: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        if intervals == 0 {
            return Err(Error::Config("need at least one grid interval".into()));
        }
        let h = delay / intervals as f64;
        let fd = 1e-6 * delay.min(1.0);
        let df = |theta: f64| {
            if theta - fd < -delay {
                (f(theta + fd) - f(theta)) / fd
            } else if theta + fd > 0.0 {
                (f(theta) - f(theta - fd)) / fd
            } else {
                (f(theta + fd) - f(theta - fd)) / (2.0 * fd)
            }
        };
        let mut values = Vec::with_capacity(intervals + 1);
        let mut derivs = Vec::with_capacity(intervals + 1);
        for i in 0..=intervals {
            let theta = if i == intervals { 0.0 } else { -delay + i as f64 * h };
            values.push(f(theta));
            derivs.push(df(theta));
        }
        Self::new(delay, 1, values, derivs)
    }

    /// Linear scalar segment from `at_minus_tau` at `theta = -tau` to
    /// `at_zero` at `theta = 0`.
    pub fn linear_scalar(
        delay: f64,
        intervals: usize,
        at_minus_tau: f64,
        at_zero: f64,
    ) -> Result<Self> {
        let slope = (at_zero - at_minus_tau) / delay;
        Self::sample_scalar_with_deriv(
            delay,
            intervals,
            |theta| at_zero + slope * theta,
            |_| slope,
        )
    }

    /// Vector segment sampled component-wise.
    pub fn sample(
        delay: f64,
        intervals: usize,
        dim: usize,
        f: impl Fn(f64, &mut [f64]),
        df: impl Fn(f64, &mut [f64]),
    ) -> Result<Self> {
        if intervals == 0 {
            return Err(Error::Config("need at least one grid interval".into()));
        }
        let h = delay / intervals as f64;
        let nodes = intervals + 1;
        let mut values = vec![0.0; nodes * dim];
        let mut derivs = vec![0.0; nodes * dim];
        for i in 0..nodes {
            let theta = if i == intervals { 0.0 } else { -delay + i as f64 * h };
            f(theta, &mut values[i * dim..(i + 1) * dim]);
            df(theta, &mut derivs[i * dim..(i + 1) * dim]);
        }
        Self::new(delay, dim, values, derivs)
    }

    /// Builds an N-component segment from N scalar segments sharing a grid.
    pub fn from_components(components: &[HistorySegment]) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::Config("no components".into()))?;
        let (delay, nodes) = (first.delay, first.nodes());
        for c in components {
            if c.dim != 1 || c.nodes() != nodes || (c.delay - delay).abs() > 1e-12 * delay {
                return Err(Error::Config(
                    "components must be scalar segments on a common grid".into(),
                ));
            }
        }
        let dim = components.len();
        let mut values = vec![0.0; nodes * dim];
        let mut derivs = vec![0.0; nodes * dim];
        for (c, comp) in components.iter().enumerate() {
            for i in 0..nodes {
                values[i * dim + c] = comp.values[i];
                derivs[i * dim + c] = comp.derivs[i];
            }
        }
        Self::new(delay, dim, values, derivs)
    }

    pub fn delay(&self) -> f64 {
        self.delay
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn intervals(&self) -> usize {
        self.nodes() - 1
    }

    pub fn grid_spacing(&self) -> f64 {
        self.delay / self.intervals() as f64
    }

    pub fn node_theta(&self, i: usize) -> f64 {
        if i == self.intervals() {
            0.0
        } else {
            -self.delay + i as f64 * self.grid_spacing()
        }
    }

    pub fn node_values(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn node_derivs(&self, i: usize) -> &[f64] {
        &self.derivs[i * self.dim..(i + 1) * self.dim]
    }

    /// Locates `theta`, snapping to the nearest node when the offset is at
    /// roundoff level so that node evaluations reproduce stored values
    /// exactly.
    fn locate(&self, theta: f64) -> Result<(usize, f64)> {
        let n = self.intervals();
        let u = (theta + self.delay) / self.grid_spacing();
        if !((-1e-9..=n as f64 + 1e-9).contains(&u)) {
            return Err(Error::Range {
                t: theta,
                lo: -self.delay,
                hi: 0.0,
            });
        }
        let nearest = u.round();
        if (u - nearest).abs() < 1e-9 {
            let i = (nearest as usize).min(n);
            if i == n {
                return Ok((n - 1, 1.0));
            }
            return Ok((i, 0.0));
        }
        let i = (u.floor() as usize).min(n - 1);
        Ok((i, u - i as f64))
    }

    pub fn eval_into(&self, theta: f64, out: &mut [f64]) -> Result<()> {
        let (i, u) = self.locate(theta)?;
        if u == 0.0 {
            out.copy_from_slice(self.node_values(i));
            return Ok(());
        }
        if u == 1.0 {
            out.copy_from_slice(self.node_values(i + 1));
            return Ok(());
        }
        let h = self.grid_spacing();
        let (v0, v1) = (self.node_values(i), self.node_values(i + 1));
        let (d0, d1) = (self.node_derivs(i), self.node_derivs(i + 1));
        for c in 0..self.dim {
            out[c] = hermite(v0[c], d0[c], v1[c], d1[c], h, u);
        }
        Ok(())
    }

    pub fn eval(&self, theta: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(theta, &mut out)?;
        Ok(out)
    }

    pub fn eval_scalar(&self, theta: f64) -> Result<f64> {
        let mut out = [0.0];
        self.eval_into(theta, &mut out)?;
        Ok(out[0])
    }

    pub fn eval_deriv_into(&self, theta: f64, out: &mut [f64]) -> Result<()> {
        let (i, u) = self.locate(theta)?;
        if u == 0.0 || u == 1.0 {
            out.copy_from_slice(self.node_derivs(if u == 1.0 { i + 1 } else { i }));
            return Ok(());
        }
        let h = self.grid_spacing();
        let (v0, v1) = (self.node_values(i), self.node_values(i + 1));
        let (d0, d1) = (self.node_derivs(i), self.node_derivs(i + 1));
        for c in 0..self.dim {
            out[c] = hermite_deriv(v0[c], d0[c], v1[c], d1[c], h, u);
        }
        Ok(())
    }

    /// Maximum absolute node value over all components.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn value_at_zero(&self) -> &[f64] {
        self.node_values(self.intervals())
    }

    /// Segment scaled by a constant factor (sign flips use `-1`).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            delay: self.delay,
            dim: self.dim,
            values: self.values.iter().map(|v| v * factor).collect(),
            derivs: self.derivs.iter().map(|v| v * factor).collect(),
        }
    }

    /// Extracts one component as a scalar segment.
    pub fn component(&self, c: usize) -> Result<Self> {
        if c >= self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: c,
            });
        }
        let nodes = self.nodes();
        let mut values = Vec::with_capacity(nodes);
        let mut derivs = Vec::with_capacity(nodes);
        for i in 0..nodes {
            values.push(self.values[i * self.dim + c]);
            derivs.push(self.derivs[i * self.dim + c]);
        }
        Self::new(self.delay, 1, values, derivs)
    }

    /// Resamples onto a grid with the given number of intervals.
    pub fn resampled(&self, intervals: usize) -> Result<Self> {
        if intervals == self.intervals() {
            return Ok(self.clone());
        }
        if intervals == 0 {
            return Err(Error::Config("need at least one grid interval".into()));
        }
        let h = self.delay / intervals as f64;
        let nodes = intervals + 1;
        let mut values = vec![0.0; nodes * self.dim];
        let mut derivs = vec![0.0; nodes * self.dim];
        for i in 0..nodes {
            let theta = if i == intervals { 0.0 } else { -self.delay + i as f64 * h };
            self.eval_into(theta, &mut values[i * self.dim..(i + 1) * self.dim])?;
            self.eval_deriv_into(theta, &mut derivs[i * self.dim..(i + 1) * self.dim])?;
        }
        Self::new(self.delay, self.dim, values, derivs)
    }
}

/// Fixed-step integrator settings. The step is snapped down to `tau/m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepperConfig {
    pub step_size: f64,
    pub max_time: f64,
}

impl Default for StepperConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            max_time: 1e6,
        }
    }
}

impl StepperConfig {
    pub fn new(step_size: f64) -> Result<Self> {
        let cfg = Self {
            step_size,
            max_time: 1e6,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_max_time(mut self, max_time: f64) -> Self {
        self.max_time = max_time;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::Config(format!(
                "step size must be positive and finite, got {}",
                self.step_size
            )));
        }
        if !(self.max_time > 0.0) {
            return Err(Error::Config(format!(
                "max time must be positive, got {}",
                self.max_time
            )));
        }
        Ok(())
    }

    /// Number of substeps `m` so that `tau/m <= step_size` (with a relative
    /// rounding guard when `tau/step_size` is an integer in exact
    /// arithmetic).
    pub fn substeps(&self, delay: f64) -> Result<usize> {
        self.validate()?;
        if !(delay > 0.0) {
            return Err(Error::Config(format!("delay must be positive, got {delay}")));
        }
        let ratio = delay / self.step_size;
        if ratio > 1e9 {
            return Err(Error::Config(format!(
                "step size {} is too small relative to the delay {delay}",
                self.step_size
            )));
        }
        let m = if (ratio - ratio.round()).abs() < 1e-6 * ratio.max(1.0) {
            ratio.round() as usize
        } else {
            ratio.ceil() as usize
        };
        Ok(m.max(1))
    }

    pub fn snapped_step(&self, delay: f64) -> Result<f64> {
        Ok(delay / self.substeps(delay)? as f64)
    }
}

fn count_steps(span: f64, h: f64) -> usize {
    let ratio = span / h;
    let n = if (ratio - ratio.round()).abs() < 1e-6 * ratio.max(1.0) {
        ratio.round() as usize
    } else {
        ratio.ceil() as usize
    };
    n.max(1)
}

/// Dense piecewise-cubic record of a solution on `[t_start - tau, t_end]`.
///
/// Nodes carry right-hand derivatives; where the left-hand derivative
/// differs (kink nodes of a neutral record) it is kept separately, so
/// evaluation is one-sided across propagated discontinuities.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    t_start: f64,
    step: f64,
    delay: f64,
    substeps: usize,
    dim: usize,
    /// initial history resampled on the integration grid
    pre: HistorySegment,
    /// node-major; node i at `t_start + i * step`; node 0 duplicates the
    /// history value at theta = 0
    values: Vec<f64>,
    derivs: Vec<f64>,
    /// left derivatives where they differ from `derivs` (neutral records)
    derivs_left: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.node_time(self.steps())
    }

    pub fn delay(&self) -> f64 {
        self.delay
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Number of integration steps (nodes minus one).
    pub fn steps(&self) -> usize {
        self.values.len() / self.dim - 1
    }

    pub fn node_time(&self, i: usize) -> f64 {
        self.t_start + i as f64 * self.step
    }

    pub fn node_values(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Right-hand derivative at node `i`.
    pub fn node_derivs(&self, i: usize) -> &[f64] {
        &self.derivs[i * self.dim..(i + 1) * self.dim]
    }

    fn node_derivs_left(&self, i: usize) -> &[f64] {
        match &self.derivs_left {
            Some(d) => &d[i * self.dim..(i + 1) * self.dim],
            None => self.node_derivs(i),
        }
    }

    pub fn initial_history(&self) -> &HistorySegment {
        &self.pre
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let n = self.steps();
        let u = (t - self.t_start) / self.step;
        if u > n as f64 + 1e-9 {
            return Err(Error::Range {
                t,
                lo: self.t_start - self.delay,
                hi: self.t_end(),
            });
        }
        let nearest = u.round();
        if (u - nearest).abs() < 1e-9 && nearest >= 0.0 {
            let i = (nearest as usize).min(n);
            if i == n {
                return Ok((n - 1, 1.0));
            }
            return Ok((i, 0.0));
        }
        if u < 0.0 {
            return Err(Error::Range {
                t,
                lo: self.t_start - self.delay,
                hi: self.t_end(),
            });
        }
        let i = (u.floor() as usize).min(n - 1);
        Ok((i, u - i as f64))
    }

    pub fn evaluate_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        if t < self.t_start {
            return self.pre.eval_into(t - self.t_start, out).map_err(|_| {
                Error::Range {
                    t,
                    lo: self.t_start - self.delay,
                    hi: self.t_end(),
                }
            });
        }
        let (i, u) = self.locate(t)?;
        if u == 0.0 || u == 1.0 {
            let i = if u == 1.0 { i + 1 } else { i };
            out.copy_from_slice(self.node_values(i));
            return Ok(());
        }
        let (v0, v1) = (self.node_values(i), self.node_values(i + 1));
        let (d0, d1) = (self.node_derivs(i), self.node_derivs_left(i + 1));
        for c in 0..self.dim {
            out[c] = hermite(v0[c], d0[c], v1[c], d1[c], self.step, u);
        }
        Ok(())
    }

    pub fn evaluate(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.evaluate_into(t, &mut out)?;
        Ok(out)
    }

    pub fn evaluate_scalar(&self, t: f64) -> Result<f64> {
        if self.dim != 1 {
            return Err(Error::Dimension {
                expected: 1,
                got: self.dim,
            });
        }
        let mut out = [0.0];
        self.evaluate_into(t, &mut out)?;
        Ok(out[0])
    }

    pub fn evaluate_deriv_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        if t < self.t_start {
            return self.pre.eval_deriv_into(t - self.t_start, out);
        }
        let (i, u) = self.locate(t)?;
        if u == 0.0 || u == 1.0 {
            let i = if u == 1.0 { i + 1 } else { i };
            out.copy_from_slice(self.node_derivs(i));
            return Ok(());
        }
        let (v0, v1) = (self.node_values(i), self.node_values(i + 1));
        let (d0, d1) = (self.node_derivs(i), self.node_derivs_left(i + 1));
        for c in 0..self.dim {
            out[c] = hermite_deriv(v0[c], d0[c], v1[c], d1[c], self.step, u);
        }
        Ok(())
    }

    /// The sliding state at time `t`: a segment on `[-tau, 0]` whose value
    /// at `theta` is the solution at `t + theta`, on the integration grid.
    pub fn segment_at(&self, t: f64) -> Result<HistorySegment> {
        if t < self.t_start - 1e-9 * self.step || t > self.t_end() + 1e-9 * self.step {
            return Err(Error::Range {
                t,
                lo: self.t_start,
                hi: self.t_end(),
            });
        }
        let nodes = self.substeps + 1;
        let mut values = vec![0.0; nodes * self.dim];
        let mut derivs = vec![0.0; nodes * self.dim];
        for j in 0..nodes {
            let theta = -self.delay + j as f64 * self.step;
            let tj = if j + 1 == nodes { t } else { t + theta };
            self.evaluate_into(tj, &mut values[j * self.dim..(j + 1) * self.dim])?;
            self.evaluate_deriv_into(tj, &mut derivs[j * self.dim..(j + 1) * self.dim])?;
        }
        HistorySegment::new(self.delay, self.dim, values, derivs)
    }

    pub fn end_segment(&self) -> HistorySegment {
        self.segment_at(self.t_end())
            .expect("end segment is always in range")
    }

    /// Writes `t,x1[,x2,...]` rows sampled every `stride` nodes.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W, stride: usize) -> std::io::Result<()> {
        let stride = stride.max(1);
        write!(w, "t")?;
        for c in 0..self.dim {
            write!(w, ",x{}", c + 1)?;
        }
        writeln!(w)?;
        let n = self.steps();
        let mut i = 0;
        loop {
            write!(w, "{:.6}", self.node_time(i))?;
            for v in self.node_values(i) {
                write!(w, ",{:.12e}", v)?;
            }
            writeln!(w)?;
            if i == n {
                break;
            }
            i = (i + stride).min(n);
        }
        Ok(())
    }
}

/// Per-node storage limit for dense trajectories (values + derivatives);
/// long runs should use [`Stepper`] and record only what they need.
const MAX_TRAJECTORY_VALUES: usize = 50_000_000;

/// Sliding window of nodes with separate left/right derivatives.
struct NodeRing {
    dim: usize,
    cap: usize,
    values: Vec<f64>,
    derivs_l: Vec<f64>,
    derivs_r: Vec<f64>,
}

impl NodeRing {
    fn new(dim: usize, cap: usize) -> Self {
        Self {
            dim,
            cap,
            values: vec![0.0; cap * dim],
            derivs_l: vec![0.0; cap * dim],
            derivs_r: vec![0.0; cap * dim],
        }
    }

    #[inline]
    fn slot(&self, global: usize) -> usize {
        global % self.cap
    }

    #[inline]
    fn values_at(&self, global: usize) -> &[f64] {
        let s = self.slot(global);
        &self.values[s * self.dim..(s + 1) * self.dim]
    }

    #[inline]
    fn derivs_l_at(&self, global: usize) -> &[f64] {
        let s = self.slot(global);
        &self.derivs_l[s * self.dim..(s + 1) * self.dim]
    }

    #[inline]
    fn derivs_r_at(&self, global: usize) -> &[f64] {
        let s = self.slot(global);
        &self.derivs_r[s * self.dim..(s + 1) * self.dim]
    }

    fn write(&mut self, global: usize, values: &[f64], dl: &[f64], dr: &[f64]) {
        let s = self.slot(global);
        self.values[s * self.dim..(s + 1) * self.dim].copy_from_slice(values);
        self.derivs_l[s * self.dim..(s + 1) * self.dim].copy_from_slice(dl);
        self.derivs_r[s * self.dim..(s + 1) * self.dim].copy_from_slice(dr);
    }

    /// Delayed value at a stage offset of the step whose delayed interval
    /// is `[base, base + 1]` in global node indices. The interval is
    /// interpolated with the right derivative at its left end and the left
    /// derivative at its right end.
    fn delayed_into(&self, base: usize, h: f64, c: StageOffset, out: &mut [f64]) {
        match c {
            StageOffset::Start => out.copy_from_slice(self.values_at(base)),
            StageOffset::End => out.copy_from_slice(self.values_at(base + 1)),
            StageOffset::Mid => {
                let (v0, d0) = (self.values_at(base), self.derivs_r_at(base));
                let (v1, d1) = (self.values_at(base + 1), self.derivs_l_at(base + 1));
                for i in 0..self.dim {
                    // cubic Hermite at the interval midpoint
                    out[i] = 0.5 * (v0[i] + v1[i]) + 0.125 * h * (d0[i] - d1[i]);
                }
            }
        }
    }

    /// Exports the window `[newest - m, newest]` as a segment. Interior
    /// nodes carry their right derivative, the newest node its left one.
    fn window_segment(&self, newest: usize, m: usize, h: f64) -> HistorySegment {
        let nodes = m + 1;
        let mut values = Vec::with_capacity(nodes * self.dim);
        let mut derivs = Vec::with_capacity(nodes * self.dim);
        for g in (newest - m)..=newest {
            values.extend_from_slice(self.values_at(g));
            derivs.extend_from_slice(if g == newest {
                self.derivs_l_at(g)
            } else {
                self.derivs_r_at(g)
            });
        }
        HistorySegment::new(m as f64 * h, self.dim, values, derivs)
            .expect("window segment is well-formed")
    }
}

#[derive(Clone, Copy)]
enum StageOffset {
    Start,
    Mid,
    End,
}

/// Streaming method-of-steps driver.
///
/// Holds a sliding window of the most recent `tau + h` of the solution;
/// analysis code steps it forward and observes states, window segments or
/// segments at off-grid times as they pass.
pub struct Stepper<'r, R: DelayRhs + ?Sized> {
    rhs: &'r R,
    dim: usize,
    h: f64,
    m: usize,
    t0: f64,
    steps: u64,
    ring: NodeRing,
    guard: f64,
    // scratch buffers
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    y_buf: Vec<f64>,
    stage_x: Vec<f64>,
    stage_xd: Vec<f64>,
    next_values: Vec<f64>,
    next_derivs: Vec<f64>,
}

impl<'r, R: DelayRhs + ?Sized> Stepper<'r, R> {
    pub fn new(
        rhs: &'r R,
        history: &HistorySegment,
        t0: f64,
        config: &StepperConfig,
    ) -> Result<Self> {
        let dim = rhs.dim();
        if history.dim() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: history.dim(),
            });
        }
        let tau = history.delay();
        let m = config.substeps(tau)?;
        let h = tau / m as f64;
        let mut ring = NodeRing::new(dim, m + 2);
        let resampled;
        let hist = if history.intervals() == m {
            history
        } else {
            resampled = history.resampled(m)?;
            &resampled
        };
        for i in 0..=m {
            ring.write(i, hist.node_values(i), hist.node_derivs(i), hist.node_derivs(i));
        }
        // the junction node keeps the history slope on its left and takes
        // the equation's derivative on its right
        let mut d0 = vec![0.0; dim];
        rhs.eval(t0, hist.node_values(m), hist.node_values(0), &mut d0);
        {
            let s = ring.slot(m);
            ring.derivs_r[s * dim..(s + 1) * dim].copy_from_slice(&d0);
        }
        Ok(Self {
            rhs,
            dim,
            h,
            m,
            t0,
            steps: 0,
            ring,
            guard: DIVERGENCE_GUARD,
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            y_buf: vec![0.0; dim],
            stage_x: vec![0.0; dim],
            stage_xd: vec![0.0; dim],
            next_values: vec![0.0; dim],
            next_derivs: vec![0.0; dim],
        })
    }

    pub fn time(&self) -> f64 {
        self.t0 + self.steps as f64 * self.h
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    pub fn substeps(&self) -> usize {
        self.m
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    pub fn state(&self) -> &[f64] {
        self.ring.values_at(self.newest_node())
    }

    /// Right-hand derivative of the newest node.
    pub fn state_deriv(&self) -> &[f64] {
        self.ring.derivs_r_at(self.newest_node())
    }

    #[inline]
    fn newest_node(&self) -> usize {
        self.m + self.steps as usize
    }

    /// Advances one step of size `h`.
    pub fn step(&mut self) -> Result<()> {
        let t = self.time();
        let h = self.h;
        let base = self.steps as usize; // delayed interval [base, base+1]
        let newest = self.newest_node();
        self.y_buf.copy_from_slice(self.ring.values_at(newest));

        self.ring
            .delayed_into(base, h, StageOffset::Start, &mut self.stage_xd);
        self.rhs.eval(t, &self.y_buf, &self.stage_xd, &mut self.k1);

        self.ring
            .delayed_into(base, h, StageOffset::Mid, &mut self.stage_xd);
        for i in 0..self.dim {
            self.stage_x[i] = self.y_buf[i] + 0.5 * h * self.k1[i];
        }
        self.rhs
            .eval(t + 0.5 * h, &self.stage_x, &self.stage_xd, &mut self.k2);

        for i in 0..self.dim {
            self.stage_x[i] = self.y_buf[i] + 0.5 * h * self.k2[i];
        }
        self.rhs
            .eval(t + 0.5 * h, &self.stage_x, &self.stage_xd, &mut self.k3);

        self.ring
            .delayed_into(base, h, StageOffset::End, &mut self.stage_xd);
        for i in 0..self.dim {
            self.stage_x[i] = self.y_buf[i] + h * self.k3[i];
        }
        self.rhs
            .eval(t + h, &self.stage_x, &self.stage_xd, &mut self.k4);

        let t_next = self.t0 + (self.steps + 1) as f64 * self.h;
        for i in 0..self.dim {
            self.next_values[i] = self.y_buf[i]
                + h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
        for (c, v) in self.next_values.iter().enumerate() {
            if !v.is_finite() || v.abs() > self.guard {
                return Err(Error::Divergence {
                    time: t_next,
                    component: c,
                    value: *v,
                });
            }
        }
        // retarded solutions are C1 away from the initial time, so the new
        // node's derivative is two-sided
        self.rhs
            .eval(t_next, &self.next_values, &self.stage_xd, &mut self.next_derivs);

        self.ring
            .write(newest + 1, &self.next_values, &self.next_derivs, &self.next_derivs);
        self.steps += 1;
        Ok(())
    }

    pub fn advance_steps(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            self.step()?;
        }
        Ok(())
    }

    /// The sliding state over the last `tau`: nodes at
    /// `time() - tau, ..., time()`.
    pub fn window_segment(&self) -> HistorySegment {
        self.ring.window_segment(self.newest_node(), self.m, self.h)
    }

    /// Segment ending at an off-grid time `t` within the newest step,
    /// i.e. `time() - h <= t <= time()`, built by Hermite evaluation of the
    /// stored window.
    pub fn segment_at_time(&self, t: f64) -> Result<HistorySegment> {
        let newest = self.newest_node();
        let t_new = self.time();
        let offset = (t_new - t) / self.h;
        if !(-1e-9..=1.0 + 1e-9).contains(&offset) {
            return Err(Error::Range {
                t,
                lo: t_new - self.h,
                hi: t_new,
            });
        }
        if offset.abs() < 1e-9 {
            return Ok(self.window_segment());
        }
        let u = (1.0 - offset).clamp(0.0, 1.0); // position inside each interval
        let nodes = self.m + 1;
        let mut values = vec![0.0; nodes * self.dim];
        let mut derivs = vec![0.0; nodes * self.dim];
        for j in 0..nodes {
            let g0 = newest - self.m + j - 1;
            let (v0, d0) = (self.ring.values_at(g0), self.ring.derivs_r_at(g0));
            let (v1, d1) = (self.ring.values_at(g0 + 1), self.ring.derivs_l_at(g0 + 1));
            for c in 0..self.dim {
                values[j * self.dim + c] = hermite(v0[c], d0[c], v1[c], d1[c], self.h, u);
                derivs[j * self.dim + c] = hermite_deriv(v0[c], d0[c], v1[c], d1[c], self.h, u);
            }
        }
        HistorySegment::new(self.m as f64 * self.h, self.dim, values, derivs)
    }

    /// Applies a linear recombination to the listed state components over
    /// the whole stored window (values and derivatives).
    ///
    /// `coef` is a `k x k` matrix, row-major: the new component
    /// `comps[i]` becomes `sum_j coef[i*k + j] * old comps[j]`. Valid for
    /// components governed by equations linear in those components, such as
    /// variational states.
    pub fn transform_components(&mut self, comps: &[usize], coef: &[f64]) {
        let k = comps.len();
        assert_eq!(coef.len(), k * k);
        let newest = self.newest_node();
        let oldest = newest.saturating_sub(self.ring.cap - 1);
        let mut old = vec![0.0; k];
        for g in oldest..=newest {
            let s = self.ring.slot(g);
            for arr in [
                &mut self.ring.values,
                &mut self.ring.derivs_l,
                &mut self.ring.derivs_r,
            ] {
                let node = &mut arr[s * self.dim..(s + 1) * self.dim];
                for (i, &c) in comps.iter().enumerate() {
                    old[i] = node[c];
                }
                for (i, &c) in comps.iter().enumerate() {
                    let mut acc = 0.0;
                    for (j, &o) in old.iter().enumerate() {
                        acc += coef[i * k + j] * o;
                    }
                    node[c] = acc;
                }
            }
        }
    }

    /// Euclidean inner product of two components over the sliding window
    /// grid (`m + 1` most recent nodes).
    pub fn window_dot(&self, comp_a: usize, comp_b: usize) -> f64 {
        let newest = self.newest_node();
        let mut acc = 0.0;
        for g in (newest - self.m)..=newest {
            let v = self.ring.values_at(g);
            acc += v[comp_a] * v[comp_b];
        }
        acc
    }
}

/// Integrates `x'(t) = f(t, x(t), x(t - tau))` over `t_span` and records a
/// dense trajectory.
pub fn integrate<R: DelayRhs + ?Sized>(
    rhs: &R,
    history: &HistorySegment,
    t_span: (f64, f64),
    config: &StepperConfig,
) -> Result<Trajectory> {
    let (t0, t1) = t_span;
    if !(t1 > t0) {
        return Err(Error::Config(format!(
            "t span must be increasing, got [{t0}, {t1}]"
        )));
    }
    if t1 - t0 > config.max_time {
        return Err(Error::Config(format!(
            "t span length {} exceeds max_time {}",
            t1 - t0,
            config.max_time
        )));
    }
    let mut stepper = Stepper::new(rhs, history, t0, config)?;
    let h = stepper.step_size();
    let n_steps = count_steps(t1 - t0, h);
    let dim = rhs.dim();
    if (n_steps + 1) * dim > MAX_TRAJECTORY_VALUES {
        return Err(Error::Config(format!(
            "dense trajectory would need {} nodes x {} components; increase the step or \
             shorten the span, or drive a Stepper directly",
            n_steps + 1,
            dim
        )));
    }

    let pre = stepper.window_segment();
    let mut values = Vec::with_capacity((n_steps + 1) * dim);
    let mut derivs = Vec::with_capacity((n_steps + 1) * dim);
    values.extend_from_slice(stepper.state());
    derivs.extend_from_slice(stepper.state_deriv());
    for _ in 0..n_steps {
        stepper.step()?;
        values.extend_from_slice(stepper.state());
        derivs.extend_from_slice(stepper.state_deriv());
    }
    Ok(Trajectory {
        t_start: t0,
        step: h,
        delay: history.delay(),
        substeps: stepper.substeps(),
        dim,
        pre,
        values,
        derivs,
        derivs_left: None,
    })
}

/// Streaming method-of-steps driver for neutral systems.
///
/// Integrates the substituted variable `z(t) = x(t) - q x(t - tau)` with
/// `z'(t) = f(t, x(t), x(t - tau))` and recovers
/// `x(t) = z(t) + q x(t - tau)` by dense lookup into the already computed
/// part of `x`. Derivative jumps propagate without smoothing in neutral
/// systems, so every node keeps distinct left and right derivatives.
pub struct NeutralStepper<'r, R: DelayRhs + ?Sized> {
    rhs: &'r R,
    q: f64,
    dim: usize,
    h: f64,
    m: usize,
    t0: f64,
    steps: u64,
    ring: NodeRing, // stores x
    z: Vec<f64>,
    guard: f64,
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    stage_x: Vec<f64>,
    stage_xd: Vec<f64>,
    stage_z: Vec<f64>,
    next_values: Vec<f64>,
    next_derivs_l: Vec<f64>,
    next_derivs_r: Vec<f64>,
}

impl<'r, R: DelayRhs + ?Sized> NeutralStepper<'r, R> {
    pub fn new(
        rhs: &'r R,
        q: f64,
        history: &HistorySegment,
        t0: f64,
        config: &StepperConfig,
    ) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Config(format!("q must lie in (0,1), got {q}")));
        }
        let dim = rhs.dim();
        if history.dim() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: history.dim(),
            });
        }
        let tau = history.delay();
        let m = config.substeps(tau)?;
        let h = tau / m as f64;
        let mut ring = NodeRing::new(dim, m + 2);
        let resampled;
        let hist = if history.intervals() == m {
            history
        } else {
            resampled = history.resampled(m)?;
            &resampled
        };
        for i in 0..=m {
            ring.write(i, hist.node_values(i), hist.node_derivs(i), hist.node_derivs(i));
        }
        // z(t0) = x(t0) - q x(t0 - tau)
        let mut z = vec![0.0; dim];
        for i in 0..dim {
            z[i] = hist.node_values(m)[i] - q * hist.node_values(0)[i];
        }
        // right derivative at the junction: x'(t0+) = z'(t0+) + q x'(t0 - tau)
        let mut zdot = vec![0.0; dim];
        rhs.eval(t0, hist.node_values(m), hist.node_values(0), &mut zdot);
        {
            let s = ring.slot(m);
            for i in 0..dim {
                ring.derivs_r[s * dim + i] = zdot[i] + q * hist.node_derivs(0)[i];
            }
        }
        Ok(Self {
            rhs,
            q,
            dim,
            h,
            m,
            t0,
            steps: 0,
            ring,
            z,
            guard: DIVERGENCE_GUARD,
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            stage_x: vec![0.0; dim],
            stage_xd: vec![0.0; dim],
            stage_z: vec![0.0; dim],
            next_values: vec![0.0; dim],
            next_derivs_l: vec![0.0; dim],
            next_derivs_r: vec![0.0; dim],
        })
    }

    pub fn time(&self) -> f64 {
        self.t0 + self.steps as f64 * self.h
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    pub fn substeps(&self) -> usize {
        self.m
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    pub fn state(&self) -> &[f64] {
        self.ring.values_at(self.m + self.steps as usize)
    }

    pub fn state_deriv(&self) -> &[f64] {
        self.ring.derivs_r_at(self.m + self.steps as usize)
    }

    fn state_deriv_left(&self) -> &[f64] {
        self.ring.derivs_l_at(self.m + self.steps as usize)
    }

    pub fn z_state(&self) -> &[f64] {
        &self.z
    }

    pub fn step(&mut self) -> Result<()> {
        let t = self.time();
        let h = self.h;
        let q = self.q;
        let base = self.steps as usize;

        // stage 1: x(t) is the stored endpoint
        self.ring
            .delayed_into(base, h, StageOffset::Start, &mut self.stage_xd);
        {
            let y = self.ring.values_at(self.m + base);
            self.rhs.eval(t, y, &self.stage_xd, &mut self.k1);
        }

        // stages 2 and 3 at t + h/2: x = z_stage + q x(t + h/2 - tau)
        self.ring
            .delayed_into(base, h, StageOffset::Mid, &mut self.stage_xd);
        for i in 0..self.dim {
            self.stage_z[i] = self.z[i] + 0.5 * h * self.k1[i];
            self.stage_x[i] = self.stage_z[i] + q * self.stage_xd[i];
        }
        self.rhs
            .eval(t + 0.5 * h, &self.stage_x, &self.stage_xd, &mut self.k2);

        for i in 0..self.dim {
            self.stage_z[i] = self.z[i] + 0.5 * h * self.k2[i];
            self.stage_x[i] = self.stage_z[i] + q * self.stage_xd[i];
        }
        self.rhs
            .eval(t + 0.5 * h, &self.stage_x, &self.stage_xd, &mut self.k3);

        // stage 4 at t + h
        self.ring
            .delayed_into(base, h, StageOffset::End, &mut self.stage_xd);
        for i in 0..self.dim {
            self.stage_z[i] = self.z[i] + h * self.k3[i];
            self.stage_x[i] = self.stage_z[i] + q * self.stage_xd[i];
        }
        self.rhs
            .eval(t + h, &self.stage_x, &self.stage_xd, &mut self.k4);

        let t_next = self.t0 + (self.steps + 1) as f64 * self.h;
        for i in 0..self.dim {
            self.z[i] +=
                h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
            // recover x(t+h) = z(t+h) + q x(t+h-tau); the delayed endpoint
            // is a stored node, so this is exact method-of-steps causality
            self.next_values[i] = self.z[i] + q * self.stage_xd[i];
        }
        for (c, v) in self.next_values.iter().enumerate() {
            if !v.is_finite() || v.abs() > self.guard {
                return Err(Error::Divergence {
                    time: t_next,
                    component: c,
                    value: *v,
                });
            }
        }
        // x'(t+h; either side) = z'(t+h) + q x'(t+h-tau; same side);
        // z is C1, so the sides differ only through the delayed derivative
        self.rhs
            .eval(t_next, &self.next_values, &self.stage_xd, &mut self.stage_z);
        {
            let dl = self.ring.derivs_l_at(base + 1);
            for i in 0..self.dim {
                self.next_derivs_l[i] = self.stage_z[i] + q * dl[i];
            }
        }
        {
            let dr = self.ring.derivs_r_at(base + 1);
            for i in 0..self.dim {
                self.next_derivs_r[i] = self.stage_z[i] + q * dr[i];
            }
        }

        let node = self.m + base + 1;
        self.ring
            .write(node, &self.next_values, &self.next_derivs_l, &self.next_derivs_r);
        self.steps += 1;
        Ok(())
    }

    pub fn window_segment(&self) -> HistorySegment {
        self.ring
            .window_segment(self.m + self.steps as usize, self.m, self.h)
    }
}

/// Integrates the neutral system `d/dt [x(t) - q x(t - tau)] = f(t, x(t),
/// x(t - tau))` and returns the dense `x` trajectory.
pub fn integrate_neutral<R: DelayRhs + ?Sized>(
    rhs: &R,
    q: f64,
    history: &HistorySegment,
    t_span: (f64, f64),
    config: &StepperConfig,
) -> Result<Trajectory> {
    let (t0, t1) = t_span;
    if !(t1 > t0) {
        return Err(Error::Config(format!(
            "t span must be increasing, got [{t0}, {t1}]"
        )));
    }
    if t1 - t0 > config.max_time {
        return Err(Error::Config(format!(
            "t span length {} exceeds max_time {}",
            t1 - t0,
            config.max_time
        )));
    }
    let mut stepper = NeutralStepper::new(rhs, q, history, t0, config)?;
    let h = stepper.step_size();
    let n_steps = count_steps(t1 - t0, h);
    let dim = rhs.dim();
    if (n_steps + 1) * dim > MAX_TRAJECTORY_VALUES {
        return Err(Error::Config(format!(
            "dense trajectory would need {} nodes x {} components; increase the step or \
             shorten the span, or drive a NeutralStepper directly",
            n_steps + 1,
            dim
        )));
    }

    let pre = stepper.window_segment();
    let mut values = Vec::with_capacity((n_steps + 1) * dim);
    let mut derivs_r = Vec::with_capacity((n_steps + 1) * dim);
    let mut derivs_l = Vec::with_capacity((n_steps + 1) * dim);
    values.extend_from_slice(stepper.state());
    derivs_r.extend_from_slice(stepper.state_deriv());
    derivs_l.extend_from_slice(stepper.state_deriv_left());
    for _ in 0..n_steps {
        stepper.step()?;
        values.extend_from_slice(stepper.state());
        derivs_r.extend_from_slice(stepper.state_deriv());
        derivs_l.extend_from_slice(stepper.state_deriv_left());
    }
    Ok(Trajectory {
        t_start: t0,
        step: h,
        delay: history.delay(),
        substeps: stepper.substeps(),
        dim,
        pre,
        values,
        derivs: derivs_r,
        derivs_left: Some(derivs_l),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_rhs(
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> FnRhs<impl Fn(f64, &[f64], &[f64], &mut [f64])> {
        FnRhs::new(1, move |t, x: &[f64], xd: &[f64], out: &mut [f64]| {
            out[0] = f(t, x[0], xd[0])
        })
    }

    /// Exact piecewise-polynomial solution of x'(t) = -x(t-1), phi = 1,
    /// by symbolic stepping: piece k lives on [k-1, k] in the local
    /// variable u = t - (k-1), and d p_k/du = -p_{k-1}(u).
    struct ExactDelayed {
        pieces: Vec<Vec<f64>>,
    }

    impl ExactDelayed {
        fn up_to(n: usize) -> Self {
            let mut pieces = vec![vec![1.0]]; // history piece on [-1, 0]
            for _ in 0..n {
                let prev = pieces.last().unwrap();
                let mut next = vec![0.0; prev.len() + 1];
                // integrate -prev
                for (j, &c) in prev.iter().enumerate() {
                    next[j + 1] = -c / (j + 1) as f64;
                }
                // constant term: continuity with prev at u = 1
                next[0] = prev.iter().sum::<f64>();
                pieces.push(next);
            }
            Self { pieces }
        }

        fn eval(&self, t: f64) -> f64 {
            if t <= 0.0 {
                return 1.0;
            }
            let k = (t.ceil() as usize).min(self.pieces.len() - 1);
            let u = t - (k - 1) as f64;
            let piece = &self.pieces[k];
            let mut acc = 0.0;
            for &c in piece.iter().rev() {
                acc = acc * u + c;
            }
            acc
        }
    }

    #[test]
    fn exact_oracle_matches_hand_values() {
        let ex = ExactDelayed::up_to(5);
        assert!((ex.eval(1.0) - 0.0).abs() < 1e-15);
        assert!((ex.eval(2.0) + 0.5).abs() < 1e-15);
        assert!((ex.eval(3.0) + 1.0 / 6.0).abs() < 1e-15);
        assert!((ex.eval(5.0) - 19.0 / 120.0).abs() < 1e-15);
        assert!((ex.eval(0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_solution_is_exact() {
        let rhs = scalar_rhs(|_, _, _| 0.0);
        let hist = HistorySegment::constant(1.0, 8, &[1.0]).unwrap();
        let cfg = StepperConfig::new(0.125).unwrap();
        let traj = integrate(&rhs, &hist, (0.0, 10.0), &cfg).unwrap();
        for i in 0..=traj.steps() {
            assert_eq!(traj.node_values(i)[0], 1.0);
        }
        assert_eq!(traj.evaluate_scalar(3.7).unwrap(), 1.0);
        let seg = traj.segment_at(5.0).unwrap();
        assert_eq!(seg.eval_scalar(-0.3).unwrap(), 1.0);
    }

    #[test]
    fn linear_delay_equation_first_interval() {
        // x'(t) = -x(t-1), phi = 1: x(t) = 1 - t on [0,1]
        let rhs = scalar_rhs(|_, _, xd| -xd);
        let hist = HistorySegment::constant(1.0, 100, &[1.0]).unwrap();
        let cfg = StepperConfig::new(0.01).unwrap();
        let traj = integrate(&rhs, &hist, (0.0, 3.0), &cfg).unwrap();
        assert!((traj.evaluate_scalar(1.0).unwrap()).abs() < 1e-12);
        assert!((traj.evaluate_scalar(0.5).unwrap() - 0.5).abs() < 1e-12);
        // segment at t=1 holds 1 - (1 + theta)
        let seg = traj.segment_at(1.0).unwrap();
        for j in 0..=seg.intervals() {
            let theta = seg.node_theta(j);
            assert!(
                (seg.node_values(j)[0] - (1.0 - (1.0 + theta))).abs() < 1e-12,
                "node {j}"
            );
        }
    }

    #[test]
    fn piecewise_polynomial_is_tracked_exactly_through_degree_three() {
        // Through t = 3 the solution has degree <= 3 per interval, the
        // Hermite record stores it exactly and the Runge-Kutta quadrature
        // of polynomial integrands of degree <= 3 is exact, so the error at
        // t = 3 is pure roundoff regardless of step size.
        let rhs = scalar_rhs(|_, _, xd| -xd);
        let ex = ExactDelayed::up_to(3);
        for step in [0.25, 0.1, 0.025] {
            let hist = HistorySegment::constant(1.0, (1.0 / step) as usize, &[1.0]).unwrap();
            let cfg = StepperConfig::new(step).unwrap();
            let traj = integrate(&rhs, &hist, (0.0, 3.0), &cfg).unwrap();
            let err = (traj.evaluate_scalar(3.0).unwrap() - ex.eval(3.0)).abs();
            assert!(err < 1e-9, "step {step}: error {err:e}");
        }
    }

    #[test]
    fn fourth_order_convergence_past_the_polynomial_regime() {
        // At t = 5 the solution has degree 5; interpolation and quadrature
        // errors are genuine and the scheme must show 4th-order decay
        // (ratio >= 12 per halving over 3 halvings).
        let rhs = scalar_rhs(|_, _, xd| -xd);
        let ex = ExactDelayed::up_to(5);
        let exact = ex.eval(5.0);
        let mut errors = Vec::new();
        for k in 0..4 {
            let m = 10usize << k;
            let step = 1.0 / m as f64;
            let hist = HistorySegment::constant(1.0, m, &[1.0]).unwrap();
            let cfg = StepperConfig::new(step).unwrap();
            let traj = integrate(&rhs, &hist, (0.0, 5.0), &cfg).unwrap();
            errors.push((traj.evaluate_scalar(5.0).unwrap() - exact).abs());
        }
        for i in 0..3 {
            let ratio = errors[i] / errors[i + 1];
            assert!(
                ratio >= 12.0,
                "halving {i}: ratio {ratio} (errors {errors:?})"
            );
        }
    }

    #[test]
    fn determinism_bitwise() {
        let rhs = scalar_rhs(|t, x, xd| x - 0.75 * xd - x * x * x + 0.01 * t.sin());
        let hist = HistorySegment::linear_scalar(1.58, 1580, -0.036, 0.036).unwrap();
        let cfg = StepperConfig::new(1e-3).unwrap();
        let a = integrate(&rhs, &hist, (0.0, 5.0), &cfg).unwrap();
        let b = integrate(&rhs, &hist, (0.0, 5.0), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn history_consistency_at_start() {
        let rhs = scalar_rhs(|_, x, xd| x - 0.75 * xd - x * x * x);
        let hist = HistorySegment::sample_scalar_with_deriv(
            1.58,
            1580,
            |th| 0.02 * (th * 2.0).cos(),
            |th| -0.04 * (th * 2.0).sin(),
        )
        .unwrap();
        let cfg = StepperConfig::new(1e-3).unwrap();
        let traj = integrate(&rhs, &hist, (0.0, 2.0), &cfg).unwrap();
        let seg = traj.segment_at(0.0).unwrap();
        for j in 0..=hist.intervals() {
            let diff = (seg.node_values(j)[0] - hist.node_values(j)[0]).abs();
            assert!(diff < 1e-12, "node {j}: {diff:e}");
        }
    }

    #[test]
    fn divergence_is_reported() {
        let rhs = scalar_rhs(|_, x, _| x * x);
        let hist = HistorySegment::constant(1.0, 10, &[3.0]).unwrap();
        let cfg = StepperConfig::new(0.01).unwrap();
        let err = integrate(&rhs, &hist, (0.0, 2.0), &cfg).unwrap_err();
        match err {
            Error::Divergence { time, .. } => assert!(time > 0.0 && time < 2.0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn bad_step_size_is_a_config_error() {
        let rhs = scalar_rhs(|_, _, _| 0.0);
        let hist = HistorySegment::constant(1.0, 4, &[0.0]).unwrap();
        for bad in [0.0, -1.0, f64::NAN] {
            let cfg = StepperConfig {
                step_size: bad,
                max_time: 1e6,
            };
            assert!(matches!(
                integrate(&rhs, &hist, (0.0, 1.0), &cfg),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn step_snapping() {
        let cfg = StepperConfig::new(1e-3).unwrap();
        assert_eq!(cfg.substeps(1.58).unwrap(), 1580);
        assert_eq!(cfg.substeps(1.0).unwrap(), 1000);
        // non-divisible delay rounds the step down (more substeps)
        let cfg2 = StepperConfig::new(0.3).unwrap();
        assert_eq!(cfg2.substeps(1.0).unwrap(), 4);
        // step larger than the delay collapses to one substep
        let cfg3 = StepperConfig::new(5.0).unwrap();
        assert_eq!(cfg3.substeps(1.0).unwrap(), 1);
    }

    #[test]
    fn out_of_range_evaluation() {
        let rhs = scalar_rhs(|_, _, _| 0.0);
        let hist = HistorySegment::constant(1.0, 4, &[1.0]).unwrap();
        let cfg = StepperConfig::new(0.25).unwrap();
        let traj = integrate(&rhs, &hist, (0.0, 1.0), &cfg).unwrap();
        assert!(matches!(
            traj.evaluate_scalar(-1.5),
            Err(Error::Range { .. })
        ));
        assert!(matches!(traj.evaluate_scalar(1.7), Err(Error::Range { .. })));
        assert!(matches!(traj.segment_at(-0.5), Err(Error::Range { .. })));
        // boundary points are fine
        assert_eq!(traj.evaluate_scalar(-1.0).unwrap(), 1.0);
        assert_eq!(traj.evaluate_scalar(1.0).unwrap(), 1.0);
    }

    #[test]
    fn neutral_constant_is_consistent() {
        let rhs = scalar_rhs(|_, _, _| 0.0);
        let hist = HistorySegment::constant(2.0, 20, &[0.7]).unwrap();
        let cfg = StepperConfig::new(0.1).unwrap();
        let traj = integrate_neutral(&rhs, 0.3, &hist, (0.0, 8.0), &cfg).unwrap();
        for i in 0..=traj.steps() {
            assert!((traj.node_values(i)[0] - 0.7).abs() < 1e-14);
        }
    }

    #[test]
    fn neutral_small_q_approaches_retarded_limit() {
        let f = |_t: f64, x: f64, xd: f64| -0.5 * x - 0.3 * xd + 0.1;
        let rhs = scalar_rhs(f);
        let hist = HistorySegment::sample_scalar_with_deriv(
            1.0,
            200,
            |th| 0.5 * (1.0 + th),
            |_| 0.5,
        )
        .unwrap();
        let cfg = StepperConfig::new(5e-3).unwrap();
        let plain = integrate(&rhs, &hist, (0.0, 6.0), &cfg).unwrap();
        let neutral = integrate_neutral(&rhs, 1e-8, &hist, (0.0, 6.0), &cfg).unwrap();
        for t in [0.5, 1.7, 3.0, 6.0] {
            let a = plain.evaluate_scalar(t).unwrap();
            let b = neutral.evaluate_scalar(t).unwrap();
            assert!((a - b).abs() < 1e-6, "t={t}: {a} vs {b}");
        }
    }

    #[test]
    fn neutral_substitution_consistency() {
        // Re-run the substituted stepping independently from the dense x
        // record and check that z(t) = x(t) - q x(t - tau) holds at step
        // endpoints.
        let q = 0.25;
        let f = |_t: f64, x: f64, xd: f64| -x - 0.6 * xd - x * x * x + 0.2;
        let rhs = scalar_rhs(f);
        let hist = HistorySegment::sample_scalar_with_deriv(
            1.0,
            100,
            |th| 0.3 * (2.0 * th).cos(),
            |th| -0.6 * (2.0 * th).sin(),
        )
        .unwrap();
        let cfg = StepperConfig::new(0.01).unwrap();
        let traj = integrate_neutral(&rhs, q, &hist, (0.0, 5.0), &cfg).unwrap();
        let h = traj.step();
        let mut z = traj.evaluate_scalar(0.0).unwrap() - q * traj.evaluate_scalar(-1.0).unwrap();
        let n = traj.steps();
        let mut worst = 0.0f64;
        for i in 0..n {
            let t = traj.node_time(i);
            // one RK4 step of z' = f(t, x(t), x(t-tau)) using dense x
            let xd0 = traj.evaluate_scalar(t - 1.0).unwrap();
            let xdm = traj.evaluate_scalar(t + 0.5 * h - 1.0).unwrap();
            let xd1 = traj.evaluate_scalar(t + h - 1.0).unwrap();
            let k1 = f(t, z + q * xd0, xd0);
            let k2 = f(t + 0.5 * h, z + 0.5 * h * k1 + q * xdm, xdm);
            let k3 = f(t + 0.5 * h, z + 0.5 * h * k2 + q * xdm, xdm);
            let k4 = f(t + h, z + h * k3 + q * xd1, xd1);
            z += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            let recovered = traj.node_values(i + 1)[0] - q * xd1;
            worst = worst.max((z - recovered).abs());
        }
        assert!(worst < 1e-10, "max |z - (x - q x_delayed)| = {worst:e}");
    }

    #[test]
    fn neutral_rejects_bad_q() {
        let rhs = scalar_rhs(|_, _, _| 0.0);
        let hist = HistorySegment::constant(1.0, 4, &[0.0]).unwrap();
        let cfg = StepperConfig::new(0.25).unwrap();
        for q in [0.0, 1.0, -0.5, 1.5] {
            assert!(matches!(
                integrate_neutral(&rhs, q, &hist, (0.0, 1.0), &cfg),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn segment_eval_reproduces_nodes_exactly() {
        let seg = HistorySegment::sample_scalar_with_deriv(
            1.3,
            13,
            |th| th * th - 0.5 * th,
            |th| 2.0 * th - 0.5,
        )
        .unwrap();
        for j in 0..=13 {
            let theta = seg.node_theta(j);
            assert_eq!(seg.eval_scalar(theta).unwrap(), seg.node_values(j)[0]);
        }
        assert!(matches!(seg.eval_scalar(0.1), Err(Error::Range { .. })));
        assert!(matches!(seg.eval_scalar(-1.4), Err(Error::Range { .. })));
    }

    #[test]
    fn segment_linear_and_scaled() {
        let seg = HistorySegment::linear_scalar(2.0, 10, -0.036, 0.036).unwrap();
        assert!((seg.eval_scalar(-2.0).unwrap() + 0.036).abs() < 1e-15);
        assert!((seg.eval_scalar(0.0).unwrap() - 0.036).abs() < 1e-15);
        assert!((seg.eval_scalar(-1.0).unwrap()).abs() < 1e-15);
        assert!((seg.sup_norm() - 0.036).abs() < 1e-15);
        let neg = seg.scaled(-1.0);
        assert!((neg.eval_scalar(0.0).unwrap() + 0.036).abs() < 1e-15);
    }

    #[test]
    fn stepper_segment_at_off_grid_time() {
        let rhs = scalar_rhs(|t, _, _| t.cos());
        let hist = HistorySegment::sample_scalar_with_deriv(1.0, 50, |th| th.sin(), |th| th.cos())
            .unwrap();
        let cfg = StepperConfig::new(0.02).unwrap();
        let mut st = Stepper::new(&rhs, &hist, 0.0, &cfg).unwrap();
        // x(t) = sin(t); step past t = 2.5
        while st.time() < 2.51 {
            st.step().unwrap();
        }
        let t = 2.5031; // off-grid, within the newest step
        let seg = st.segment_at_time(t).unwrap();
        for &theta in &[-1.0, -0.62, -0.25, 0.0] {
            let got = seg.eval_scalar(theta).unwrap();
            let want = (t + theta).sin();
            assert!((got - want).abs() < 1e-8, "theta {theta}: {got} vs {want}");
        }
    }

    #[test]
    fn from_components_interleaves() {
        let a = HistorySegment::linear_scalar(1.0, 4, 0.0, 1.0).unwrap();
        let b = HistorySegment::linear_scalar(1.0, 4, 1.0, 0.0).unwrap();
        let both = HistorySegment::from_components(&[a, b]).unwrap();
        assert_eq!(both.dim(), 2);
        let v = both.eval(-0.5).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-15);
        assert!((v[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn transform_components_recombines_window() {
        // system: x' = 0 for all three components, distinct constants
        let rhs = FnRhs::new(3, |_t, _x: &[f64], _xd: &[f64], out: &mut [f64]| {
            out.fill(0.0);
        });
        let hist = HistorySegment::sample(
            1.0,
            10,
            3,
            |th, out| {
                out[0] = 1.0;
                out[1] = th;
                out[2] = th * th;
            },
            |_, out| {
                out[0] = 0.0;
                out[1] = 1.0;
                out[2] = 0.0;
            },
        )
        .unwrap();
        let cfg = StepperConfig::new(0.1).unwrap();
        let mut st = Stepper::new(&rhs, &hist, 0.0, &cfg).unwrap();
        st.advance_steps(3).unwrap();
        // swap components 1 and 2 via the transform
        st.transform_components(&[1, 2], &[0.0, 1.0, 1.0, 0.0]);
        let seg = st.window_segment();
        // window at t = 0.3: theta = -0.7 is absolute time -0.4, a node of
        // the original history
        let v = seg.eval(-0.7).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12);
        let before = hist.eval(-0.4).unwrap();
        assert!((v[1] - before[2]).abs() < 1e-12);
        assert!((v[2] - before[1]).abs() < 1e-12);
    }
}
