//! Cross attention, joint (text ++ image) attention, and text anchoring.
//!
//! Joint sequences always place the `L_T` text tokens first and the
//! `L_I = grid_h · grid_w` image tokens after them, so the columns of a
//! score matrix split into a text block `S_T` and an image block `S_I`.
//!
//! The anchoring bias β is expressed in softmax-input units: a row is
//! `softmax((S/√d + β·1_text) / τ)`, which is `softmax(Concat(S_T + β√d, S_I) / (τ√d))`.
//! With τ = 1 the text block's total exponential weight grows by exactly `e^β`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, softmax_row_into, RowMatrix};
use crate::scalar::{cast, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub text_len: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl TokenLayout {
    pub fn new(text_len: usize, grid_h: usize, grid_w: usize) -> Result<Self> {
        if text_len == 0 {
            return Err(Error::invalid("text_len", "need at least one text token"));
        }
        if grid_h == 0 || grid_w == 0 {
            return Err(Error::invalid(
                "grid",
                format!("{grid_h}x{grid_w} has no cells"),
            ));
        }
        Ok(Self {
            text_len,
            grid_h,
            grid_w,
        })
    }

    #[inline]
    pub fn image_len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    #[inline]
    pub fn total(&self) -> usize {
        self.text_len + self.image_len()
    }

    /// Pixel-count ratio λ of `self` over `trained`.
    pub fn pixel_ratio(&self, trained: &TokenLayout) -> f64 {
        self.image_len() as f64 / trained.image_len() as f64
    }

    /// Per-axis extrapolation scales `(s_h, s_w)`, never below 1.
    pub fn axis_scales(&self, trained: &TokenLayout) -> [f64; 2] {
        [
            (self.grid_h as f64 / trained.grid_h as f64).max(1.0),
            (self.grid_w as f64 / trained.grid_w as f64).max(1.0),
        ]
    }

    pub fn label(&self) -> String {
        format!("{}x{}", self.grid_h, self.grid_w)
    }
}

/// Pre-softmax scores split into text and image column blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLogits<T> {
    text: RowMatrix<T>,
    image: RowMatrix<T>,
}

impl<T: Scalar> JointLogits<T> {
    pub fn new(text: RowMatrix<T>, image: RowMatrix<T>) -> Result<Self> {
        if text.rows() != image.rows() {
            return Err(Error::shape("JointLogits rows", text.rows(), image.rows()));
        }
        if text.cols() == 0 {
            return Err(Error::invalid(
                "score_text",
                "need at least one text column",
            ));
        }
        Ok(Self { text, image })
    }

    /// Splits a dense `L × L` score matrix after `layout.text_len` columns.
    pub fn from_dense(scores: &RowMatrix<T>, layout: &TokenLayout) -> Result<Self> {
        if scores.rows() != layout.total() || scores.cols() != layout.total() {
            return Err(Error::shape(
                "JointLogits::from_dense",
                format!("{0}x{0}", layout.total()),
                format!("{}x{}", scores.rows(), scores.cols()),
            ));
        }
        Self::new(
            scores.column_range(0, layout.text_len)?,
            scores.column_range(layout.text_len, layout.total())?,
        )
    }

    pub fn score_text(&self) -> &RowMatrix<T> {
        &self.text
    }

    pub fn score_image(&self) -> &RowMatrix<T> {
        &self.image
    }

    pub fn rows(&self) -> usize {
        self.text.rows()
    }

    pub fn text_len(&self) -> usize {
        self.text.cols()
    }

    pub fn image_len(&self) -> usize {
        self.image.cols()
    }

    /// Row `r` with text columns first.
    pub fn dense_row(&self, r: usize) -> Vec<T> {
        let mut row = self.text.row(r).to_vec();
        row.extend_from_slice(self.image.row(r));
        row
    }

    pub fn to_dense(&self) -> RowMatrix<T> {
        RowMatrix::hconcat(&self.text, &self.image).expect("blocks share row count")
    }

    /// Adds `c` to every entry of both blocks.
    pub fn shifted(&self, c: T) -> Self {
        Self {
            text: self.text.map(|v| v + c),
            image: self.image.map(|v| v + c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    Fixed,
    Adaptive,
}

/// Which query rows receive the text bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasRows {
    /// Every row of `S_T`, text queries included.
    All,
    /// Image-query rows only.
    ImageQueries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorPolicy<T> {
    pub enabled: bool,
    pub beta_mode: BetaMode,
    pub beta_fixed: T,
    /// Pixel-count ratio; derived from the layouts when absent.
    pub lambda: Option<T>,
    pub rows: BiasRows,
    /// Multiply β by a global τ before the softmax divides by it, so the
    /// applied bias is exactly β.
    pub compensate_temperature: bool,
}

impl<T: Scalar> Default for AnchorPolicy<T> {
    fn default() -> Self {
        Self {
            enabled: true,
            beta_mode: BetaMode::Adaptive,
            beta_fixed: T::one(),
            lambda: None,
            rows: BiasRows::All,
            compensate_temperature: false,
        }
    }
}

impl<T: Scalar> AnchorPolicy<T> {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn fixed(beta: T) -> Self {
        Self {
            beta_mode: BetaMode::Fixed,
            beta_fixed: beta,
            ..Self::default()
        }
    }

    pub fn adaptive(lambda: Option<T>) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn cast<U: Scalar>(&self) -> AnchorPolicy<U> {
        AnchorPolicy {
            enabled: self.enabled,
            beta_mode: self.beta_mode,
            beta_fixed: cast(self.beta_fixed),
            lambda: self.lambda.map(cast),
            rows: self.rows,
            compensate_temperature: self.compensate_temperature,
        }
    }
}

/// β for `policy`: the fixed value, or `ln λ` with `λ` from the policy or
/// `scale_s²`.
pub fn anchoring_bias<T: Scalar>(policy: &AnchorPolicy<T>, scale_s: Option<T>) -> Result<T> {
    if !policy.enabled {
        return Ok(T::zero());
    }
    match policy.beta_mode {
        BetaMode::Fixed => Ok(policy.beta_fixed),
        BetaMode::Adaptive => {
            let lambda = match (policy.lambda, scale_s) {
                (Some(l), _) => l,
                (None, Some(s)) => s * s,
                (None, None) => {
                    return Err(Error::invalid(
                        "lambda",
                        "adaptive bias needs lambda or scale_s",
                    ))
                }
            };
            if !(lambda >= T::one()) {
                return Err(Error::invalid(
                    "lambda",
                    format!("must be >= 1, got {lambda}"),
                ));
            }
            Ok(lambda.ln())
        }
    }
}

/// Bias handed to the softmax under a global temperature `tau`. With
/// `compensate` the softmax's division by `tau` is undone, so the applied
/// shift is exactly `beta`.
pub fn applied_bias<T: Scalar>(beta: T, tau: T, compensate: bool) -> T {
    if compensate {
        beta * tau
    } else {
        beta
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionParams<T> {
    pub beta: T,
    pub tau: T,
    pub d: usize,
    pub rows: BiasRows,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn new(beta: T, tau: T, d: usize) -> Self {
        Self {
            beta,
            tau,
            d,
            rows: BiasRows::All,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > T::zero()) || !self.tau.is_finite() {
            return Err(Error::invalid(
                "tau",
                format!("must be finite and > 0, got {}", self.tau),
            ));
        }
        if self.d == 0 {
            return Err(Error::invalid("d", "must be >= 1"));
        }
        if !(self.beta >= T::zero()) || !self.beta.is_finite() {
            return Err(Error::invalid(
                "beta",
                format!("must be finite and >= 0, got {}", self.beta),
            ));
        }
        Ok(())
    }

    /// `1/(τ√d)`.
    #[inline]
    pub fn inv_scale(&self) -> T {
        T::one() / (self.tau * T::of_usize(self.d).sqrt())
    }

    /// Column mask for a row; `None` when the row carries no bias.
    pub(crate) fn column_bias(&self, text_len: usize, total: usize) -> Option<Vec<T>> {
        if self.beta == T::zero() {
            return None;
        }
        let b = self.beta * T::of_usize(self.d).sqrt();
        let mut mask = vec![T::zero(); total];
        mask[..text_len].iter_mut().for_each(|v| *v = b);
        Some(mask)
    }

    #[inline]
    pub(crate) fn row_biased(&self, row: usize, text_len: usize) -> bool {
        match self.rows {
            BiasRows::All => true,
            BiasRows::ImageQueries => row >= text_len,
        }
    }
}

/// `P = softmax(Concat(S_T + β, S_I) / (τ√d))`, bias applied to every row.
pub fn anchored_attention<T: Scalar>(
    logits: &JointLogits<T>,
    beta: T,
    tau: T,
    d: usize,
) -> Result<RowMatrix<T>> {
    anchored_attention_with(logits, &AttentionParams::new(beta, tau, d))
}

pub fn anchored_attention_with<T: Scalar>(
    logits: &JointLogits<T>,
    params: &AttentionParams<T>,
) -> Result<RowMatrix<T>> {
    params.validate()?;
    let lt = logits.text_len();
    let total = lt + logits.image_len();
    let mask = params.column_bias(lt, total);
    let inv = params.inv_scale();
    let mut out = RowMatrix::zeros(logits.rows(), total);
    for r in 0..logits.rows() {
        let row = logits.dense_row(r);
        let bias = mask.as_deref().filter(|_| params.row_biased(r, lt));
        softmax_row_into(&row, inv, bias, out.row_mut(r))?;
    }
    Ok(out)
}

/// `S = Q Kᵀ`, split after the text columns.
pub fn joint_logits<T: Scalar>(
    q: &RowMatrix<T>,
    k: &RowMatrix<T>,
    layout: &TokenLayout,
) -> Result<JointLogits<T>> {
    if q.rows() != layout.total() {
        return Err(Error::shape(
            "joint_logits Q rows",
            layout.total(),
            q.rows(),
        ));
    }
    if k.rows() != layout.total() {
        return Err(Error::shape(
            "joint_logits K rows",
            layout.total(),
            k.rows(),
        ));
    }
    let s = q.matmul_transposed(k)?;
    JointLogits::from_dense(&s, layout)
}

/// `O = P V`.
pub fn attention_output<T: Scalar>(p: &RowMatrix<T>, v: &RowMatrix<T>) -> Result<RowMatrix<T>> {
    if p.cols() != v.rows() {
        return Err(Error::shape(
            "attention_output",
            format!("V with {} rows", p.cols()),
            v.rows(),
        ));
    }
    p.matmul(v)
}

/// Query/key/value projections, each `c × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projections<T> {
    pub wq: RowMatrix<T>,
    pub wk: RowMatrix<T>,
    pub wv: RowMatrix<T>,
}

/// Image queries attending over text keys and values only.
pub fn cross_attention<T: Scalar>(
    x_image: &RowMatrix<T>,
    x_text: &RowMatrix<T>,
    weights: &Projections<T>,
    d: usize,
) -> Result<RowMatrix<T>> {
    for (name, w) in [
        ("W_Q", &weights.wq),
        ("W_K", &weights.wk),
        ("W_V", &weights.wv),
    ] {
        if w.rows() != x_image.cols() || w.rows() != x_text.cols() {
            return Err(Error::shape(
                "cross_attention",
                format!("{name} with {} rows", x_image.cols()),
                w.rows(),
            ));
        }
    }
    if weights.wq.cols() != d || weights.wk.cols() != d {
        return Err(Error::shape(
            "cross_attention head dim",
            d,
            weights.wq.cols(),
        ));
    }
    let q = x_image.matmul(&weights.wq)?;
    let k = x_text.matmul(&weights.wk)?;
    let v = x_text.matmul(&weights.wv)?;
    let s = q.matmul_transposed(&k)?;
    let inv = T::one() / T::of_usize(d).sqrt();
    let mut p = RowMatrix::zeros(s.rows(), s.cols());
    for r in 0..s.rows() {
        softmax_row_into(s.row(r), inv, None, p.row_mut(r))?;
    }
    p.matmul(&v)
}

/// Sum of the text columns of one probability row.
#[inline]
pub fn text_mass<T: Scalar>(p_row: &[T], text_len: usize) -> T {
    p_row[..text_len].iter().copied().sum()
}

/// Per-row summaries produced by [`attend_row`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowSummary<T> {
    pub entropy: T,
    pub logit_variance: T,
    pub text_mass: T,
}

/// One query row of joint attention without materializing `P`.
///
/// Computes the logits `q·k_j` into `logits`, the anchored softmax into
/// `probs`, and writes `Σ_j p_j v_j` into `out`. The logit variance is
/// taken over the raw scores, before bias and scaling.
#[allow(clippy::too_many_arguments)]
pub fn attend_row<T: Scalar>(
    q: &[T],
    keys: &RowMatrix<T>,
    values: &RowMatrix<T>,
    text_len: usize,
    inv_scale: T,
    bias: Option<&[T]>,
    logits: &mut [T],
    probs: &mut [T],
    out: &mut [T],
) -> Result<RowSummary<T>> {
    let n = keys.rows();
    if logits.len() != n || probs.len() != n || values.rows() != n {
        return Err(Error::shape("attend_row", n, probs.len()));
    }
    for (j, s) in logits.iter_mut().enumerate() {
        *s = dot(q, keys.row(j));
    }
    let nf = T::of_usize(n);
    let mean = logits.iter().copied().sum::<T>() / nf;
    let logit_variance = logits.iter().map(|&s| (s - mean) * (s - mean)).sum::<T>() / nf;
    softmax_row_into(logits, inv_scale, bias, probs)?;
    out.iter_mut().for_each(|o| *o = T::zero());
    let mut entropy = T::zero();
    for (j, &p) in probs.iter().enumerate() {
        if p > T::zero() {
            entropy -= p * p.ln();
        }
        for (o, &v) in out.iter_mut().zip(values.row(j)) {
            *o += p * v;
        }
    }
    Ok(RowSummary {
        entropy,
        logit_variance,
        text_mass: text_mass(probs, text_len),
    })
}
