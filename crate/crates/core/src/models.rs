//! Model definitions: right-hand sides, parameter bundles, equilibria,
//! dissipativity sets, the cubic truncation and the feedback-gain family.
//!
//! The base model is the scalar delay equation
//! `x'(t) = x(t) - alpha * x(t - tau) - x(t)^3` with `alpha` in (0,1) and
//! `tau > 0`. Everything else here is a controlled variation of it: an
//! additive periodic forcing, a globally Lipschitz truncation of the cubic,
//! a feedback-gain homotopy used for hidden-orbit localization, and a ring
//! of neutral equations coupled through a discrete Laplacian.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dde::HistorySegment;
use crate::error::{Error, Result};

/// Parameters of the delayed oscillator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuarezSchopfParams {
    pub alpha: f64,
    pub tau: f64,
}

impl SuarezSchopfParams {
    pub fn new(alpha: f64, tau: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0,1), got {alpha}"
            )));
        }
        if !(tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {tau}")));
        }
        Ok(Self { alpha, tau })
    }
}

/// Additive periodic forcing `A * sin(omega * t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForcingSpec {
    pub amplitude: f64,
    pub omega: f64,
}

impl ForcingSpec {
    pub fn new(amplitude: f64, omega: f64) -> Result<Self> {
        if !(amplitude >= 0.0) {
            return Err(Error::Config(format!(
                "forcing amplitude must be >= 0, got {amplitude}"
            )));
        }
        if !(omega > 0.0) {
            return Err(Error::Config(format!(
                "forcing frequency must be positive, got {omega}"
            )));
        }
        Ok(Self { amplitude, omega })
    }

    /// Unit-frequency forcing `A * sin(t)`, period `2*pi`.
    pub fn with_unit_frequency(amplitude: f64) -> Result<Self> {
        Self::new(amplitude, 1.0)
    }

    pub fn none() -> Self {
        Self {
            amplitude: 0.0,
            omega: 1.0,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        if self.amplitude == 0.0 {
            0.0
        } else {
            self.amplitude * (self.omega * t).sin()
        }
    }
}

/// C1 truncation of the cubic: identity on `[-R, R]`, linear with slope
/// `3R^2` outside, so that `0 <= g_R'(y) <= 3R^2` everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationSpec {
    pub radius: f64,
}

impl TruncationSpec {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::Config(format!(
                "truncation radius must be positive, got {radius}"
            )));
        }
        Ok(Self { radius })
    }

    /// Lipschitz constant of the cubic on `[-R, R]`.
    pub fn lipschitz(&self) -> f64 {
        3.0 * self.radius * self.radius
    }

    /// The truncated cubic `g_R`.
    pub fn g(&self, y: f64) -> f64 {
        let r = self.radius;
        if y.abs() <= r {
            y * y * y
        } else {
            let s = y.signum();
            s * r * r * r + 3.0 * r * r * (y - s * r)
        }
    }
}

/// Parameters of the feedback-gain homotopy.
///
/// At `epsilon = 0` the nonlinearity is the saturated linear gain `g`; at
/// `epsilon = 1` it is the cubic branch `f(y) = -y^3 + 3(1-alpha) y`, which
/// turns the rewritten linear part back into the original oscillator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainFamilyParams {
    pub base: SuarezSchopfParams,
    pub mu: f64,
    pub mu_inf: f64,
    pub epsilon: f64,
}

impl GainFamilyParams {
    pub fn new(base: SuarezSchopfParams, mu: f64, mu_inf: f64, epsilon: f64) -> Result<Self> {
        if !(mu_inf > 0.0 && mu_inf < mu) {
            return Err(Error::Config(format!(
                "gain slopes must satisfy 0 < mu_inf < mu, got mu={mu}, mu_inf={mu_inf}"
            )));
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Config(format!(
                "epsilon must lie in [0,1], got {epsilon}"
            )));
        }
        Ok(Self {
            base,
            mu,
            mu_inf,
            epsilon,
        })
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::new(self.base, self.mu, self.mu_inf, epsilon)
    }
}

/// Parameters of the ring of coupled neutral delay equations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RingParams {
    pub n: usize,
    pub a: f64,
    pub b: f64,
    pub d: f64,
    pub tau: f64,
    pub q: f64,
}

impl RingParams {
    pub fn new(n: usize, a: f64, b: f64, d: f64, tau: f64, q: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("ring size must be >= 2, got {n}")));
        }
        if !(b > 0.0 && d > 0.0 && tau > 0.0) {
            return Err(Error::Config(format!(
                "b, d, tau must be positive, got b={b}, d={d}, tau={tau}"
            )));
        }
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Config(format!("q must lie in (0,1), got {q}")));
        }
        Ok(Self { n, a, b, d, tau, q })
    }

    /// Effective delayed-feedback coefficient `alpha = b*q` of the scalar
    /// oscillator that each ring component approaches when the coupling and
    /// the neutral correction are small.
    pub fn alpha_equivalent(&self) -> f64 {
        self.b * self.q
    }
}

/// `x'(t)` of the unforced oscillator.
#[inline]
pub fn ss_rhs(x: f64, x_delayed: f64, p: &SuarezSchopfParams) -> f64 {
    x - p.alpha * x_delayed - x * x * x
}

/// `x'(t)` of the periodically forced oscillator.
#[inline]
pub fn forced_rhs(t: f64, x: f64, x_delayed: f64, p: &SuarezSchopfParams, f: &ForcingSpec) -> f64 {
    ss_rhs(x, x_delayed, p) + f.eval(t)
}

/// `x'(t)` of the truncated forced model, with `g_R` in place of the cubic.
#[inline]
pub fn truncated_rhs(
    t: f64,
    x: f64,
    x_delayed: f64,
    p: &SuarezSchopfParams,
    trunc: &TruncationSpec,
    f: &ForcingSpec,
) -> f64 {
    x - p.alpha * x_delayed - trunc.g(x) + f.eval(t)
}

/// The three stationary states: `0`, `+sqrt(1-alpha)`, `-sqrt(1-alpha)`.
pub fn equilibria(p: &SuarezSchopfParams) -> [f64; 3] {
    let e = (1.0 - p.alpha).sqrt();
    [0.0, e, -e]
}

/// Radius `gamma = sqrt(1+alpha)` of the absorbing sup-norm ball.
pub fn dissipativity_radius(p: &SuarezSchopfParams) -> f64 {
    (1.0 + p.alpha).sqrt()
}

/// Whether the history lies in the positively invariant set `S_R`
/// (sup-norm over the segment grid at most `gamma + r_margin`).
pub fn in_s(phi: &HistorySegment, p: &SuarezSchopfParams, r_margin: f64) -> bool {
    phi.sup_norm() <= dissipativity_radius(p) + r_margin
}

/// Saturated linear feedback gain: slope `mu` on `[-1,1]`, slope `mu_inf`
/// outside, continuous at the knees.
#[inline]
pub fn gain_g(y: f64, mu: f64, mu_inf: f64) -> f64 {
    if y > 1.0 {
        mu_inf * (y - 1.0) + mu
    } else if y < -1.0 {
        mu_inf * (y + 1.0) - mu
    } else {
        mu * y
    }
}

/// Cubic nonlinearity of the rewritten oscillator: `f(y) = -y^3 + 3(1-alpha)y`.
#[inline]
pub fn f_cubic(y: f64, alpha: f64) -> f64 {
    -y * y * y + 3.0 * (1.0 - alpha) * y
}

/// Homotopy nonlinearity `F_eps = eps*f + (1-eps)*g`.
#[inline]
pub fn f_eps(y: f64, g: &GainFamilyParams) -> f64 {
    g.epsilon * f_cubic(y, g.base.alpha) + (1.0 - g.epsilon) * gain_g(y, g.mu, g.mu_inf)
}

/// `x'(t)` of the gain-family equation
/// `(3a-2) x - a x_delayed + F_eps(x)`.
///
/// At `epsilon = 1` this is algebraically identical to [`ss_rhs`].
#[inline]
pub fn family_rhs(x: f64, x_delayed: f64, g: &GainFamilyParams) -> f64 {
    let alpha = g.base.alpha;
    (3.0 * alpha - 2.0) * x - alpha * x_delayed + f_eps(x, g)
}

/// Derivatives of the substituted variables `z_k = x_k(t) - q x_k(t-tau)`
/// for the ring array. `states` and `delayed` hold `x(t)` and `x(t-tau)`.
pub fn ring_rhs(states: &[f64], delayed: &[f64], rp: &RingParams, out: &mut [f64]) -> Result<()> {
    let n = rp.n;
    if states.len() != n || delayed.len() != n || out.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: states.len().min(delayed.len()).min(out.len()),
        });
    }
    for k in 0..n {
        let prev = (k + n - 1) % n;
        let next = (k + 1) % n;
        let x = states[k];
        let xd = delayed[k];
        let lap_now = states[next] - 2.0 * x + states[prev];
        let lap_del = delayed[next] - 2.0 * xd + delayed[prev];
        out[k] = -rp.a * x - rp.b * rp.q * xd - x * x * x + rp.q * xd * xd * xd
            + rp.d * (lap_now - rp.q * lap_del);
    }
    Ok(())
}

const CONFIG_KEYS: [&str; 13] = [
    "alpha", "tau", "amplitude", "omega", "R", "mu", "mu_inf", "epsilon", "N", "a", "b", "d", "q",
];

/// Plain-text key-value parameter file.
///
/// One `key = value` pair per line; `#` starts a comment. Only the keys of
/// the model bundles are accepted; anything else is an error.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValueConfig {
    entries: BTreeMap<String, f64>,
}

impl KeyValueConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = match line.split_once('=') {
                Some((k, v)) => (k.trim(), v.trim()),
                None => {
                    let mut it = line.split_whitespace();
                    match (it.next(), it.next(), it.next()) {
                        (Some(k), Some(v), None) => (k, v),
                        _ => {
                            return Err(Error::Config(format!(
                                "line {}: expected `key = value`, got {raw:?}",
                                lineno + 1
                            )))
                        }
                    }
                }
            };
            if !CONFIG_KEYS.contains(&key) {
                return Err(Error::Config(format!(
                    "line {}: unknown key {key:?}",
                    lineno + 1
                )));
            }
            let parsed: f64 = value.parse().map_err(|_| {
                Error::Config(format!("line {}: cannot parse value {value:?}", lineno + 1))
            })?;
            if entries.insert(key.to_string(), parsed).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key:?}",
                    lineno + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        if !CONFIG_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        self.entries.insert(key.to_string(), value);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.get(key).copied()
    }

    fn require(&self, key: &str) -> Result<f64> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing key {key:?}")))
    }

    pub fn suarez_schopf(&self) -> Result<SuarezSchopfParams> {
        SuarezSchopfParams::new(self.require("alpha")?, self.require("tau")?)
    }

    pub fn forcing(&self) -> Result<ForcingSpec> {
        ForcingSpec::new(
            self.get("amplitude").unwrap_or(0.0),
            self.get("omega").unwrap_or(1.0),
        )
    }

    pub fn truncation(&self) -> Result<TruncationSpec> {
        TruncationSpec::new(self.require("R")?)
    }

    pub fn gain_family(&self) -> Result<GainFamilyParams> {
        GainFamilyParams::new(
            self.suarez_schopf()?,
            self.require("mu")?,
            self.require("mu_inf")?,
            self.get("epsilon").unwrap_or(1.0),
        )
    }

    pub fn ring(&self) -> Result<RingParams> {
        let n = self.require("N")?;
        if n.fract() != 0.0 || n < 0.0 {
            return Err(Error::Config(format!("N must be a positive integer, got {n}")));
        }
        RingParams::new(
            n as usize,
            self.require("a")?,
            self.require("b")?,
            self.require("d")?,
            self.require("tau")?,
            self.require("q")?,
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        // Emit in the canonical key order, not BTreeMap order.
        for key in CONFIG_KEYS {
            if let Some(v) = self.entries.get(key) {
                writeln!(out, "{key} = {v}").unwrap();
            }
        }
        out
    }
}

impl From<SuarezSchopfParams> for KeyValueConfig {
    fn from(p: SuarezSchopfParams) -> Self {
        let mut c = Self::default();
        c.set("alpha", p.alpha).unwrap();
        c.set("tau", p.tau).unwrap();
        c
    }
}
