//! 2D axial rotary embeddings and the positional-interpolation family
//! (direct, position interpolation, NTK-aware, NTK-by-parts).
//!
//! A head of width `head_dim` is split into a height block followed by a
//! width block. Inside each block, consecutive feature pairs `(x_2j, x_2j+1)`
//! rotate by `(position / pos_scale) · θ_j` with `θ_j = base^(−2j/d_axis)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::RowMatrix;
use crate::scalar::{cast, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    Height,
    Width,
}

impl Axis {
    pub const BOTH: [Axis; 2] = [Axis::Height, Axis::Width];

    #[inline]
    pub fn index(self) -> usize {
        match self {
            Axis::Height => 0,
            Axis::Width => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpolationMode {
    Direct,
    #[serde(rename = "pi")]
    PositionInterpolation,
    NtkAware,
    NtkByParts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RopeSpec<T> {
    pub head_dim: usize,
    /// Dimensions given to the height and width axes, in that order.
    pub axis_split: [usize; 2],
    pub base: T,
    pub mode: InterpolationMode,
    pub scale_s: T,
    /// Ramp bounds in rotations-per-trained-context; pairs below `ramp_low`
    /// are fully interpolated, pairs above `ramp_high` are left alone.
    pub ramp_low: T,
    pub ramp_high: T,
    /// Trained extent of one axis, in tokens.
    pub trained_len: usize,
}

impl<T: Scalar> Default for RopeSpec<T> {
    fn default() -> Self {
        Self {
            head_dim: 16,
            axis_split: [8, 8],
            base: T::of(10_000.0),
            mode: InterpolationMode::Direct,
            scale_s: T::one(),
            ramp_low: T::one(),
            ramp_high: T::of(32.0),
            trained_len: 16,
        }
    }
}

impl<T: Scalar> RopeSpec<T> {
    /// Even split of `head_dim` between the two axes.
    pub fn even(head_dim: usize) -> Self {
        Self {
            head_dim,
            axis_split: [head_dim / 2, head_dim - head_dim / 2],
            ..Self::default()
        }
    }

    pub fn with_mode(mut self, mode: InterpolationMode, scale_s: T) -> Self {
        self.mode = mode;
        self.scale_s = scale_s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(Error::invalid(
                "head_dim",
                format!("must be even and > 0, got {}", self.head_dim),
            ));
        }
        if self.axis_split[0] + self.axis_split[1] != self.head_dim {
            return Err(Error::invalid(
                "axis_split",
                format!(
                    "{:?} does not sum to head_dim {}",
                    self.axis_split, self.head_dim
                ),
            ));
        }
        if self.axis_split.iter().any(|d| d % 2 != 0) {
            return Err(Error::invalid(
                "axis_split",
                format!("{:?} has an odd axis", self.axis_split),
            ));
        }
        if !(self.base > T::one()) {
            return Err(Error::invalid(
                "base",
                format!("must be > 1, got {}", self.base),
            ));
        }
        if !(self.scale_s >= T::one()) {
            return Err(Error::invalid(
                "scale_s",
                format!("must be >= 1, got {}", self.scale_s),
            ));
        }
        if !(self.ramp_low < self.ramp_high) {
            return Err(Error::invalid(
                "ramp_low",
                format!(
                    "ramp_low {} must be < ramp_high {}",
                    self.ramp_low, self.ramp_high
                ),
            ));
        }
        if self.trained_len == 0 {
            return Err(Error::invalid("trained_len", "must be >= 1"));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> RopeSpec<U> {
        RopeSpec {
            head_dim: self.head_dim,
            axis_split: self.axis_split,
            base: cast(self.base),
            mode: self.mode,
            scale_s: cast(self.scale_s),
            ramp_low: cast(self.ramp_low),
            ramp_high: cast(self.ramp_high),
            trained_len: self.trained_len,
        }
    }
}

/// Rotation rates for one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable<T> {
    /// Radians per position for each rotary pair, strictly decreasing.
    pub thetas: Vec<T>,
    /// 1 at the fastest pair, 0 at the slowest, linear in pair rank.
    pub norm_freq: Vec<T>,
    /// Divisor applied to position indices.
    pub pos_scale: T,
}

impl<T: Scalar> FrequencyTable<T> {
    pub fn pairs(&self) -> usize {
        self.thetas.len()
    }

    /// Angle advanced per unit position for each pair, `θ_j / pos_scale`.
    pub fn effective_rates(&self) -> Vec<T> {
        self.thetas.iter().map(|&t| t / self.pos_scale).collect()
    }
}

fn rank_linear(pairs: usize) -> Vec<f64> {
    match pairs {
        0 => Vec::new(),
        1 => vec![1.0],
        p => (0..p)
            .map(|j| (p - 1 - j) as f64 / (p - 1) as f64)
            .collect(),
    }
}

fn thetas_for<T: Scalar>(base: T, d_axis: usize) -> Vec<T> {
    let d = T::of_usize(d_axis);
    (0..d_axis / 2)
        .map(|j| base.powf(-T::of_usize(2 * j) / d))
        .collect()
}

/// Uninterpolated table for `axis`.
pub fn base_frequencies<T: Scalar>(spec: &RopeSpec<T>, axis: Axis) -> Result<FrequencyTable<T>> {
    let d_axis = spec.axis_split[axis.index()];
    if !d_axis.is_multiple_of(2) {
        return Err(Error::invalid(
            "axis_split",
            format!("{axis:?} axis has odd width {d_axis}"),
        ));
    }
    spec.validate()?;
    Ok(FrequencyTable {
        thetas: thetas_for(spec.base, d_axis),
        norm_freq: rank_linear(d_axis / 2).into_iter().map(T::of).collect(),
        pos_scale: T::one(),
    })
}

/// Applies `spec.mode` at `spec.scale_s` to a table from [`base_frequencies`].
pub fn interpolate<T: Scalar>(
    spec: &RopeSpec<T>,
    table: &FrequencyTable<T>,
) -> Result<FrequencyTable<T>> {
    interpolate_with_scale(spec, table, spec.scale_s)
}

fn interpolate_with_scale<T: Scalar>(
    spec: &RopeSpec<T>,
    table: &FrequencyTable<T>,
    s: T,
) -> Result<FrequencyTable<T>> {
    if !(s >= T::one()) {
        return Err(Error::invalid("scale_s", format!("must be >= 1, got {s}")));
    }
    if s == T::one() {
        return Ok(table.clone());
    }
    let mut out = table.clone();
    match spec.mode {
        InterpolationMode::Direct => {}
        InterpolationMode::PositionInterpolation => out.pos_scale = table.pos_scale * s,
        InterpolationMode::NtkAware => {
            let d = 2 * table.pairs();
            if d <= 2 {
                return Err(Error::invalid(
                    "axis_split",
                    "NTK-aware rescaling needs at least two rotary pairs per axis",
                ));
            }
            let df = T::of_usize(d);
            let base = spec.base * s.powf(df / (df - T::of(2.0)));
            out.thetas = thetas_for(base, d);
        }
        InterpolationMode::NtkByParts => {
            let context = T::of_usize(spec.trained_len);
            let span = spec.ramp_high - spec.ramp_low;
            for theta in out.thetas.iter_mut() {
                // rotations completed over the trained context
                let r = context * *theta / T::TAU();
                let keep = ((r - spec.ramp_low) / span).max(T::zero()).min(T::one());
                *theta *= keep + (T::one() - keep) / s;
            }
        }
    }
    Ok(out)
}

/// Maps the nominal extrapolation scale to the scale in force at time `t`.
///
/// This is the hook for time-dependent interpolation schemes; the crate
/// ships only [`FixedScale`].
pub trait ScaleSchedule<T> {
    fn scale_at(&self, nominal: T, t: T) -> T;
}

/// Uses the nominal scale at every time.
#[derive(Debug, Clone, Copy, Default)]
pub struct FixedScale;

impl<T: Copy> ScaleSchedule<T> for FixedScale {
    fn scale_at(&self, nominal: T, _t: T) -> T {
        nominal
    }
}

impl<T, F: Fn(T, T) -> T> ScaleSchedule<T> for F {
    fn scale_at(&self, nominal: T, t: T) -> T {
        self(nominal, t)
    }
}

/// [`interpolate`] with the scale supplied by `schedule` at time `t`.
pub fn interpolate_at<T: Scalar>(
    spec: &RopeSpec<T>,
    table: &FrequencyTable<T>,
    t: T,
    schedule: &dyn ScaleSchedule<T>,
) -> Result<FrequencyTable<T>> {
    if !(t >= T::zero() && t <= T::one()) {
        return Err(Error::invalid("t", format!("must lie in [0, 1], got {t}")));
    }
    interpolate_with_scale(spec, table, schedule.scale_at(spec.scale_s, t))
}

/// Both axis tables for `spec`, interpolated.
pub fn axis_tables<T: Scalar>(spec: &RopeSpec<T>) -> Result<[FrequencyTable<T>; 2]> {
    let h = interpolate(spec, &base_frequencies(spec, Axis::Height)?)?;
    let w = interpolate(spec, &base_frequencies(spec, Axis::Width)?)?;
    Ok([h, w])
}

/// Row-major `(row, col)` per image token.
pub fn axial_positions(height: usize, width: usize) -> Vec<(usize, usize)> {
    (0..height * width)
        .map(|k| (k / width, k % width))
        .collect()
}

/// Text tokens at `(0, 0)` followed by the image grid in row-major order.
pub fn joint_positions(text_len: usize, height: usize, width: usize) -> Vec<(usize, usize)> {
    let mut p = vec![(0, 0); text_len];
    p.extend(axial_positions(height, width));
    p
}

/// Rotates every row of `features` by its position.
///
/// `band_scale`, when given, has one entry per rotary pair (height pairs
/// then width pairs) and multiplies the rotated pair.
pub fn rotate<T: Scalar>(
    features: &RowMatrix<T>,
    positions: &[(usize, usize)],
    tables: &[FrequencyTable<T>; 2],
    band_scale: Option<&[T]>,
) -> Result<RowMatrix<T>> {
    let head_dim = 2 * (tables[0].pairs() + tables[1].pairs());
    if features.cols() != head_dim {
        return Err(Error::shape("rotate features", head_dim, features.cols()));
    }
    if positions.len() != features.rows() {
        return Err(Error::shape(
            "rotate positions",
            features.rows(),
            positions.len(),
        ));
    }
    if let Some(b) = band_scale {
        if b.len() != head_dim / 2 {
            return Err(Error::shape("rotate band_scale", head_dim / 2, b.len()));
        }
    }
    let rates = [tables[0].effective_rates(), tables[1].effective_rates()];
    let mut out = features.clone();
    for (r, &(ph, pw)) in positions.iter().enumerate() {
        rotate_row(out.row_mut(r), [ph, pw], &rates, band_scale);
    }
    Ok(out)
}

/// Rotates one row in place; `rates` are per-axis effective rates.
pub(crate) fn rotate_row<T: Scalar>(
    row: &mut [T],
    pos: [usize; 2],
    rates: &[Vec<T>; 2],
    band_scale: Option<&[T]>,
) {
    let mut pair = 0;
    for axis in 0..2 {
        let p = T::of_usize(pos[axis]);
        for &rate in &rates[axis] {
            let (x, y) = (row[2 * pair], row[2 * pair + 1]);
            let (mut a, mut b) = if pos[axis] == 0 {
                (x, y)
            } else {
                let (sin, cos) = (p * rate).sin_cos();
                (x * cos - y * sin, x * sin + y * cos)
            };
            if let Some(scale) = band_scale {
                a *= scale[pair];
                b *= scale[pair];
            }
            row[2 * pair] = a;
            row[2 * pair + 1] = b;
            pair += 1;
        }
    }
}
