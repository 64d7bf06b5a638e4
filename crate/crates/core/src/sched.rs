//! Temperature schedules, per-band pre-scaling factors and the
//! flow-matching time-shift.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::FrequencyTable;
use crate::scalar::{cast, Scalar};

/// YaRN's attention temperature `τ = 1/(0.1·ln s + 1)²`.
pub fn yarn_temperature<T: Scalar>(scale_s: T) -> Result<T> {
    if !(scale_s >= T::one()) || !scale_s.is_finite() {
        return Err(Error::invalid(
            "scale_s",
            format!("must be finite and >= 1, got {scale_s}"),
        ));
    }
    let root = T::of(0.1) * scale_s.ln() + T::one();
    Ok(T::one() / (root * root))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    Off,
    StaticYarn,
    DynamicGlobal,
    DynamicPerFrequency,
}

impl TemperatureMode {
    pub fn is_dynamic(self) -> bool {
        matches!(
            self,
            TemperatureMode::DynamicGlobal | TemperatureMode::DynamicPerFrequency
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            TemperatureMode::Off => "off",
            TemperatureMode::StaticYarn => "static_yarn",
            TemperatureMode::DynamicGlobal => "dynamic_global",
            TemperatureMode::DynamicPerFrequency => "dynamic_per_frequency",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperaturePolicy<T> {
    pub mode: TemperatureMode,
    pub tau_min: T,
    pub tau_max: T,
    pub alpha_low: T,
    pub alpha_high: T,
}

impl<T: Scalar> TemperaturePolicy<T> {
    /// Defaults at extrapolation scale `s`: `τ_min = yarn_temperature(s)`,
    /// `τ_max = 1`, `α_low = 0.6`, `α_high = 0.2`.
    pub fn for_scale(mode: TemperatureMode, scale_s: T) -> Result<Self> {
        let p = Self {
            mode,
            tau_min: yarn_temperature(scale_s)?,
            tau_max: T::one(),
            alpha_low: T::of(0.6),
            alpha_high: T::of(0.2),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn off() -> Self {
        Self {
            mode: TemperatureMode::Off,
            tau_min: T::one(),
            tau_max: T::one(),
            alpha_low: T::of(0.6),
            alpha_high: T::of(0.2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > T::zero())
            || !(self.tau_min <= self.tau_max)
            || !self.tau_max.is_finite()
        {
            return Err(Error::invalid(
                "tau_min",
                format!(
                    "need 0 < tau_min <= tau_max, got {} and {}",
                    self.tau_min, self.tau_max
                ),
            ));
        }
        if self.mode == TemperatureMode::DynamicPerFrequency
            && !(self.alpha_low >= self.alpha_high && self.alpha_high >= T::zero())
        {
            return Err(Error::invalid(
                "alpha_low",
                format!(
                    "need alpha_low >= alpha_high >= 0, got {} and {}",
                    self.alpha_low, self.alpha_high
                ),
            ));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> TemperaturePolicy<U> {
        TemperaturePolicy {
            mode: self.mode,
            tau_min: cast(self.tau_min),
            tau_max: cast(self.tau_max),
            alpha_low: cast(self.alpha_low),
            alpha_high: cast(self.alpha_high),
        }
    }
}

fn unit_interval<T: Scalar>(name: &'static str, v: T) -> Result<()> {
    if v >= T::zero() && v <= T::one() {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must lie in [0, 1], got {v}")))
    }
}

/// Convexity exponent `α(f) = α_low + (α_high − α_low)·f`.
pub fn alpha_of_frequency<T: Scalar>(f: T, policy: &TemperaturePolicy<T>) -> Result<T> {
    unit_interval("f", f)?;
    Ok(policy.alpha_low + (policy.alpha_high - policy.alpha_low) * f)
}

/// τ at normalized time `t` (1 = pure noise) for a band of normalized
/// frequency `f`.
pub fn dynamic_temperature<T: Scalar>(t: T, f: T, policy: &TemperaturePolicy<T>) -> Result<T> {
    unit_interval("t", t)?;
    unit_interval("f", f)?;
    let span = policy.tau_max - policy.tau_min;
    Ok(match policy.mode {
        TemperatureMode::Off => T::one(),
        TemperatureMode::StaticYarn => policy.tau_min,
        TemperatureMode::DynamicGlobal => policy.tau_max - span * t,
        TemperatureMode::DynamicPerFrequency => {
            policy.tau_max - span * t.powf(alpha_of_frequency(f, policy)?)
        }
    })
}

/// Global softmax temperature for the mode; per-frequency mode returns 1
/// because its sharpening lives in [`band_scale_factors`].
pub fn global_temperature<T: Scalar>(t: T, policy: &TemperaturePolicy<T>) -> Result<T> {
    match policy.mode {
        TemperatureMode::DynamicPerFrequency => {
            unit_interval("t", t)?;
            Ok(T::one())
        }
        _ => dynamic_temperature(t, T::zero(), policy),
    }
}

/// `τ(t, f_j)^(−1/2)` per rotary pair, height pairs then width pairs.
///
/// Applied to both Q and K, each band's logit contribution is divided by
/// its own τ.
pub fn band_scale_factors<T: Scalar>(
    tables: &[FrequencyTable<T>; 2],
    t: T,
    policy: &TemperaturePolicy<T>,
) -> Result<Vec<T>> {
    if policy.mode != TemperatureMode::DynamicPerFrequency {
        return Err(Error::invalid(
            "mode",
            format!(
                "band scaling needs dynamic_per_frequency, got {}",
                policy.mode.name()
            ),
        ));
    }
    tables
        .iter()
        .flat_map(|tb| tb.norm_freq.iter())
        .map(|&f| Ok(T::one() / dynamic_temperature(t, f, policy)?.sqrt()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    LinearDefault,
    Logarithmic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftAnchor {
    pub tokens: usize,
    pub mu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeShiftSpec {
    pub mode: ShiftMode,
    pub anchor_lo: ShiftAnchor,
    pub anchor_hi: ShiftAnchor,
    pub steps: usize,
}

impl Default for TimeShiftSpec {
    fn default() -> Self {
        Self {
            mode: ShiftMode::Logarithmic,
            anchor_lo: ShiftAnchor {
                tokens: 256,
                mu: 0.5,
            },
            anchor_hi: ShiftAnchor {
                tokens: 4096,
                mu: 1.15,
            },
            steps: 28,
        }
    }
}

impl TimeShiftSpec {
    pub fn with_mode(mut self, mode: ShiftMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps", "must be >= 1"));
        }
        if self.anchor_lo.tokens == 0 || self.anchor_lo.tokens >= self.anchor_hi.tokens {
            return Err(Error::invalid(
                "anchor_lo",
                format!(
                    "need 0 < anchor_lo.tokens < anchor_hi.tokens, got {} and {}",
                    self.anchor_lo.tokens, self.anchor_hi.tokens
                ),
            ));
        }
        if !self.anchor_lo.mu.is_finite() || !self.anchor_hi.mu.is_finite() {
            return Err(Error::invalid("anchor_lo", "anchor mu must be finite"));
        }
        Ok(())
    }
}

/// Shift parameter μ for `image_tokens`, interpolated between the anchors
/// linearly in `L_I` or in `ln L_I`. Both forms hit the anchors exactly.
pub fn shift_mu<T: Scalar>(image_tokens: usize, spec: &TimeShiftSpec) -> Result<T> {
    if image_tokens == 0 {
        return Err(Error::invalid("image_tokens", "must be >= 1"));
    }
    spec.validate()?;
    let (lo, hi) = (spec.anchor_lo, spec.anchor_hi);
    let x = T::of_usize(image_tokens);
    let (x0, x1) = (T::of_usize(lo.tokens), T::of_usize(hi.tokens));
    let w = match spec.mode {
        ShiftMode::LinearDefault => (x - x0) / (x1 - x0),
        ShiftMode::Logarithmic => (x.ln() - x0.ln()) / (x1.ln() - x0.ln()),
    };
    Ok(T::of(lo.mu) * (T::one() - w) + T::of(hi.mu) * w)
}

/// Descending grid `t_0 = 1 … t_steps = 0` from the uniform grid
/// `u_i = 1 − i/steps` through `t = e^μ u / (e^μ u + 1 − u)`.
pub fn shifted_timesteps<T: Scalar>(spec: &TimeShiftSpec, mu: T) -> Result<Vec<T>> {
    if spec.steps == 0 {
        return Err(Error::invalid("steps", "must be >= 1"));
    }
    if !mu.is_finite() {
        return Err(Error::NonFinite("shift mu".into()));
    }
    let n = T::of_usize(spec.steps);
    let e = mu.exp();
    Ok((0..=spec.steps)
        .map(|i| {
            let u = T::of_usize(spec.steps - i) / n;
            shift_time(u, e)
        })
        .collect())
}

#[inline]
fn shift_time<T: Scalar>(u: T, exp_mu: T) -> T {
    let a = exp_mu * u;
    a / (a + (T::one() - u))
}
