//! A desk-scale MM-DiT: patchify, joint-attention blocks with 2D RoPE and
//! sinusoidal time conditioning, and an Euler flow-matching sampler.
//!
//! Weights are random-initialized from a seed; nothing here is trained.
//! The model exists to exercise anchoring, temperature and RoPE
//! interpolation on realistic attention statistics.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attn::{
    anchoring_bias, applied_bias, attend_row, AnchorPolicy, AttentionParams, RowSummary,
    TokenLayout,
};
use crate::diag::AttentionStats;
use crate::error::{Error, Result};
use crate::numeric::{Rng, RowMatrix};
use crate::rope::{
    base_frequencies, interpolate_at, joint_positions, rotate, Axis, FixedScale, FrequencyTable,
    InterpolationMode, RopeSpec, ScaleSchedule,
};
use crate::scalar::{cast, Scalar};
use crate::sched::{
    band_scale_factors, dynamic_temperature, global_temperature, shift_mu, shifted_timesteps,
    yarn_temperature, TemperatureMode, TemperaturePolicy, TimeShiftSpec,
};

/// Temperature settings as written in a config file. `tau_min` defaults to
/// YaRN's temperature at the run's extrapolation scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemperatureConfig {
    pub mode: TemperatureMode,
    pub tau_min: Option<f64>,
    pub tau_max: f64,
    pub alpha_low: f64,
    pub alpha_high: f64,
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        Self {
            mode: TemperatureMode::DynamicPerFrequency,
            tau_min: None,
            tau_max: 1.0,
            alpha_low: 0.6,
            alpha_high: 0.2,
        }
    }
}

impl TemperatureConfig {
    pub fn resolve<T: Scalar>(&self, scale_s: f64) -> Result<TemperaturePolicy<T>> {
        let tau_min = match self.tau_min {
            Some(t) => t,
            None => yarn_temperature(scale_s.max(1.0))?,
        };
        let p = TemperaturePolicy {
            mode: self.mode,
            tau_min: T::of(tau_min),
            tau_max: T::of(self.tau_max),
            alpha_low: T::of(self.alpha_low),
            alpha_high: T::of(self.alpha_high),
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDitConfig {
    pub token_dim: usize,
    pub head_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    /// Latent channels per grid cell.
    pub channels: usize,
    pub trained_grid: [usize; 2],
    pub text_len: usize,
    /// Rotary position shared by every text token.
    pub text_position: [usize; 2],
    /// Interpolation mode, base and ramp; the scale is set per run.
    pub rope: RopeSpec<f64>,
    pub anchor: AnchorPolicy<f64>,
    pub temperature: TemperatureConfig,
    pub timeshift: TimeShiftSpec,
    pub seed: u64,
}

impl Default for ToyDitConfig {
    fn default() -> Self {
        Self {
            token_dim: 64,
            head_dim: 16,
            heads: 4,
            blocks: 2,
            mlp_ratio: 2,
            channels: 3,
            trained_grid: [16, 16],
            text_len: 8,
            text_position: [0, 0],
            rope: RopeSpec {
                mode: InterpolationMode::NtkByParts,
                ..RopeSpec::even(16)
            },
            anchor: AnchorPolicy::default(),
            temperature: TemperatureConfig::default(),
            timeshift: TimeShiftSpec::default(),
            seed: 0,
        }
    }
}

impl ToyDitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 || self.token_dim != self.heads * self.head_dim {
            return Err(Error::invalid(
                "token_dim",
                format!(
                    "token_dim {} must equal heads {} x head_dim {}",
                    self.token_dim, self.heads, self.head_dim
                ),
            ));
        }
        if self.rope.head_dim != self.head_dim {
            return Err(Error::invalid(
                "rope.head_dim",
                format!(
                    "{} differs from head_dim {}",
                    self.rope.head_dim, self.head_dim
                ),
            ));
        }
        self.rope.validate()?;
        if self.blocks == 0 || self.mlp_ratio == 0 || self.channels == 0 {
            return Err(Error::invalid(
                "blocks",
                "blocks, mlp_ratio and channels must be >= 1",
            ));
        }
        TokenLayout::new(self.text_len, self.trained_grid[0], self.trained_grid[1])?;
        self.timeshift.validate()?;
        Ok(())
    }

    pub fn trained_layout(&self) -> TokenLayout {
        TokenLayout {
            text_len: self.text_len,
            grid_h: self.trained_grid[0],
            grid_w: self.trained_grid[1],
        }
    }

    pub fn layout(&self, grid_h: usize, grid_w: usize) -> Result<TokenLayout> {
        TokenLayout::new(self.text_len, grid_h, grid_w)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn with_preset(&self, preset: MethodPreset) -> Self {
        let mut c = self.clone();
        let (rope, temp, anchor) = match preset {
            MethodPreset::Direct => (InterpolationMode::Direct, TemperatureMode::Off, false),
            MethodPreset::Yarn | MethodPreset::DyYarnHook => (
                InterpolationMode::NtkByParts,
                TemperatureMode::StaticYarn,
                false,
            ),
            MethodPreset::DynamicGlobal => (
                InterpolationMode::NtkByParts,
                TemperatureMode::DynamicGlobal,
                false,
            ),
            MethodPreset::Tide => (
                InterpolationMode::NtkByParts,
                TemperatureMode::DynamicPerFrequency,
                true,
            ),
        };
        c.rope.mode = rope;
        c.temperature.mode = temp;
        c.anchor.enabled = anchor;
        c
    }
}

/// Extrapolation methods compared by the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MethodPreset {
    #[serde(rename = "direct")]
    Direct,
    #[serde(rename = "yarn")]
    Yarn,
    #[serde(rename = "dynamic-global")]
    DynamicGlobal,
    /// YaRN routed through the time-dependent interpolation hook.
    #[serde(rename = "dyyarn-hook")]
    DyYarnHook,
    #[serde(rename = "tide")]
    Tide,
}

impl MethodPreset {
    pub const ALL: [MethodPreset; 5] = [
        MethodPreset::Direct,
        MethodPreset::Yarn,
        MethodPreset::DynamicGlobal,
        MethodPreset::DyYarnHook,
        MethodPreset::Tide,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodPreset::Direct => "direct",
            MethodPreset::Yarn => "yarn",
            MethodPreset::DynamicGlobal => "dynamic-global",
            MethodPreset::DyYarnHook => "dyyarn-hook",
            MethodPreset::Tide => "tide",
        }
    }
}

impl fmt::Display for MethodPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid("preset", format!("unknown preset `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub wq_text: RowMatrix<T>,
    pub wk_text: RowMatrix<T>,
    pub wv_text: RowMatrix<T>,
    pub wo_text: RowMatrix<T>,
    pub wq_image: RowMatrix<T>,
    pub wk_image: RowMatrix<T>,
    pub wv_image: RowMatrix<T>,
    pub wo_image: RowMatrix<T>,
    pub mlp_up_text: RowMatrix<T>,
    pub mlp_down_text: RowMatrix<T>,
    pub mlp_up_image: RowMatrix<T>,
    pub mlp_down_image: RowMatrix<T>,
}

const BLOCK_TENSORS: [&str; 12] = [
    "wq_text",
    "wk_text",
    "wv_text",
    "wo_text",
    "wq_image",
    "wk_image",
    "wv_image",
    "wo_image",
    "mlp_up_text",
    "mlp_down_text",
    "mlp_up_image",
    "mlp_down_image",
];

impl<T: Scalar> BlockWeights<T> {
    fn tensors(&self) -> [&RowMatrix<T>; 12] {
        [
            &self.wq_text,
            &self.wk_text,
            &self.wv_text,
            &self.wo_text,
            &self.wq_image,
            &self.wk_image,
            &self.wv_image,
            &self.wo_image,
            &self.mlp_up_text,
            &self.mlp_down_text,
            &self.mlp_up_image,
            &self.mlp_down_image,
        ]
    }

    fn from_tensors(mut it: impl Iterator<Item = RowMatrix<T>>) -> Option<Self> {
        Some(Self {
            wq_text: it.next()?,
            wk_text: it.next()?,
            wv_text: it.next()?,
            wo_text: it.next()?,
            wq_image: it.next()?,
            wk_image: it.next()?,
            wv_image: it.next()?,
            wo_image: it.next()?,
            mlp_up_text: it.next()?,
            mlp_down_text: it.next()?,
            mlp_up_image: it.next()?,
            mlp_down_image: it.next()?,
        })
    }
}

/// All parameters of the toy model. Stored and serialized as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDitWeights<T = f32> {
    /// `channels × c` patch embedding.
    pub input: RowMatrix<T>,
    /// `c × c` projection of the sinusoidal time embedding.
    pub time: RowMatrix<T>,
    pub blocks: Vec<BlockWeights<T>>,
    /// `c × channels` velocity head.
    pub output: RowMatrix<T>,
    /// `1 × channels`.
    pub output_bias: RowMatrix<T>,
}

impl<T: Scalar> ToyDitWeights<T> {
    /// `(name, tensor)` in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &RowMatrix<T>)> {
        let mut out = vec![
            ("input".to_string(), &self.input),
            ("time".to_string(), &self.time),
        ];
        for (b, block) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_TENSORS.iter().zip(block.tensors()) {
                out.push((format!("blocks.{b}.{name}"), t));
            }
        }
        out.push(("output".to_string(), &self.output));
        out.push(("output_bias".to_string(), &self.output_bias));
        out
    }

    /// Inverse of [`Self::named_tensors`] given tensors in the same order.
    pub fn from_ordered(tensors: Vec<RowMatrix<T>>, blocks: usize) -> Result<Self> {
        let expected = 4 + 12 * blocks;
        if tensors.len() != expected {
            return Err(Error::WeightFormat(format!(
                "expected {expected} tensors for {blocks} blocks, found {}",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let input = it.next().unwrap();
        let time = it.next().unwrap();
        let blocks = (0..blocks)
            .map(|_| BlockWeights::from_tensors(&mut it).unwrap())
            .collect();
        let output = it.next().unwrap();
        let output_bias = it.next().unwrap();
        Ok(Self {
            input,
            time,
            blocks,
            output,
            output_bias,
        })
    }

    /// Seeded Gaussian init with standard deviation `1/√fan_in`.
    pub fn random(config: &ToyDitConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::stream(config.seed, 0x7EED);
        let shapes = expected_shapes(config);
        let tensors = shapes
            .iter()
            .map(|(name, [r, c])| {
                if name == "output_bias" {
                    return RowMatrix::zeros(*r, *c);
                }
                let std = 1.0 / (*r as f64).sqrt();
                RowMatrix::from_fn(*r, *c, |_, _| T::of(std * rng.normal()))
            })
            .collect();
        Self::from_ordered(tensors, config.blocks)
    }

    pub fn check_shapes(&self, config: &ToyDitConfig) -> Result<()> {
        let want = expected_shapes(config);
        let have = self.named_tensors();
        if want.len() != have.len() {
            return Err(Error::WeightFormat(format!(
                "{} tensors for a {}-block config, found {}",
                want.len(),
                config.blocks,
                have.len()
            )));
        }
        for ((wn, ws), (hn, ht)) in want.iter().zip(&have) {
            if wn != hn || ws[0] != ht.rows() || ws[1] != ht.cols() {
                return Err(Error::WeightFormat(format!(
                    "tensor {hn} is {}x{}, expected {wn} {}x{}",
                    ht.rows(),
                    ht.cols(),
                    ws[0],
                    ws[1]
                )));
            }
            ht.ensure_finite(hn)?;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ToyDitWeights<U> {
        ToyDitWeights {
            input: self.input.cast(),
            time: self.time.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    let t: Vec<RowMatrix<U>> = b.tensors().iter().map(|m| m.cast()).collect();
                    BlockWeights::from_tensors(t.into_iter()).unwrap()
                })
                .collect(),
            output: self.output.cast(),
            output_bias: self.output_bias.cast(),
        }
    }
}

/// Tensor names and shapes implied by `config`, in serialization order.
pub fn expected_shapes(config: &ToyDitConfig) -> Vec<(String, [usize; 2])> {
    let c = config.token_dim;
    let hidden = c * config.mlp_ratio;
    let mut out = vec![
        ("input".to_string(), [config.channels, c]),
        ("time".to_string(), [c, c]),
    ];
    for b in 0..config.blocks {
        for name in BLOCK_TENSORS {
            let shape = match name {
                "mlp_up_text" | "mlp_up_image" => [c, hidden],
                "mlp_down_text" | "mlp_down_image" => [hidden, c],
                _ => [c, c],
            };
            out.push((format!("blocks.{b}.{name}"), shape));
        }
    }
    out.push(("output".to_string(), [c, config.channels]));
    out.push(("output_bias".to_string(), [1, config.channels]));
    out
}

/// Latent image: `height × width` cells of `channels` values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> LatentGrid<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "LatentGrid",
                height * width * channels,
                data.len(),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Standard normal noise from stream `stream` of `seed`.
    pub fn noise(height: usize, width: usize, channels: usize, seed: u64, stream: u64) -> Self {
        let mut rng = Rng::stream(seed, stream);
        Self {
            height,
            width,
            channels,
            data: rng.normal_vec(height * width * channels, 1.0),
        }
    }

    pub fn cell(&self, row: usize, col: usize) -> &[T] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// One token per grid cell, row-major, matching `rope::axial_positions`.
pub fn patchify<T: Scalar>(
    latent: &LatentGrid<T>,
    config: &ToyDitConfig,
) -> Result<(RowMatrix<T>, TokenLayout)> {
    if latent.channels != config.channels {
        return Err(Error::shape(
            "patchify channels",
            config.channels,
            latent.channels,
        ));
    }
    let layout = config.layout(latent.height, latent.width)?;
    let tokens = RowMatrix::new(layout.image_len(), latent.channels, latent.data.clone())?;
    Ok((tokens, layout))
}

pub fn unpatchify<T: Scalar>(tokens: &RowMatrix<T>, layout: &TokenLayout) -> Result<LatentGrid<T>> {
    if tokens.rows() != layout.image_len() {
        return Err(Error::shape(
            "unpatchify rows",
            layout.image_len(),
            tokens.rows(),
        ));
    }
    LatentGrid::new(
        layout.grid_h,
        layout.grid_w,
        tokens.cols(),
        tokens.data().to_vec(),
    )
}

/// Seeded stand-in for text-encoder outputs, `text_len × token_dim`.
pub fn text_tokens<T: Scalar>(config: &ToyDitConfig, seed: u64) -> RowMatrix<T> {
    let mut rng = Rng::stream(seed, 0x7E47);
    RowMatrix::from_fn(config.text_len, config.token_dim, |_, _| {
        T::of(rng.normal())
    })
}

/// Everything about a run that depends on the target resolution but not
/// on the time step.
#[derive(Debug, Clone)]
pub struct ExtrapolationPlan<T> {
    pub layout: TokenLayout,
    /// Per-axis scales `(s_h, s_w)`.
    pub axis_scales: [f64; 2],
    /// Pixel-count ratio to the trained grid.
    pub lambda: f64,
    /// `√λ`, the scale used for the YaRN temperature.
    pub scale_s: f64,
    pub beta: T,
    pub temperature: TemperaturePolicy<T>,
    axis_specs: [RopeSpec<T>; 2],
    base_tables: [FrequencyTable<T>; 2],
    positions: Vec<(usize, usize)>,
}

impl<T: Scalar> ExtrapolationPlan<T> {
    /// RoPE tables at time `t` through `schedule`.
    pub fn tables_at(
        &self,
        t: T,
        schedule: &dyn ScaleSchedule<T>,
    ) -> Result<[FrequencyTable<T>; 2]> {
        Ok([
            interpolate_at(&self.axis_specs[0], &self.base_tables[0], t, schedule)?,
            interpolate_at(&self.axis_specs[1], &self.base_tables[1], t, schedule)?,
        ])
    }
}

/// Attention settings in force at one time step.
#[derive(Debug, Clone)]
pub struct StepSettings<T> {
    pub t: T,
    pub params: AttentionParams<T>,
    pub band_scale: Option<Vec<T>>,
    pub tables: [FrequencyTable<T>; 2],
}

#[derive(Debug, Clone)]
pub struct HeadStats<T> {
    pub block: usize,
    pub head: usize,
    pub stats: AttentionStats<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `L_I × channels` velocity.
    pub velocity: RowMatrix<T>,
    /// Per block and head, when recording.
    pub trace: Vec<HeadStats<T>>,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn mean_text_mass(&self) -> Option<T> {
        mean_of(self.trace.iter().map(|h| h.stats.mean_text_mass))
    }

    pub fn mean_entropy(&self) -> Option<T> {
        mean_of(self.trace.iter().map(|h| h.stats.mean_entropy()))
    }
}

fn mean_of<T: Scalar>(it: impl Iterator<Item = T>) -> Option<T> {
    let v: Vec<T> = it.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().copied().sum::<T>() / T::of_usize(v.len()))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub t_next: f64,
    pub tau_f0: f64,
    pub tau_f1: f64,
    pub beta: f64,
    pub mu: f64,
    pub mean_text_mass: Option<f64>,
    pub mean_entropy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SampleOutput<T> {
    pub latent: LatentGrid<T>,
    pub mu: f64,
    pub timesteps: Vec<T>,
    pub steps: Vec<StepRecord>,
}

/// Toy MM-DiT with weights held in scalar type `T`.
#[derive(Clone)]
pub struct ToyDit<T> {
    config: ToyDitConfig,
    weights: ToyDitWeights<T>,
    schedule: Arc<dyn ScaleSchedule<T> + Send + Sync>,
}

impl<T: Scalar> fmt::Debug for ToyDit<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ToyDit")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl<T: Scalar> ToyDit<T> {
    pub fn new(config: ToyDitConfig, weights: &ToyDitWeights<f32>) -> Result<Self> {
        config.validate()?;
        weights.check_shapes(&config)?;
        Ok(Self {
            weights: weights.cast(),
            config,
            schedule: Arc::new(FixedScale),
        })
    }

    /// Random-init model from `config.seed`.
    pub fn random(config: ToyDitConfig) -> Result<Self> {
        let w = ToyDitWeights::<f32>::random(&config)?;
        Self::new(config, &w)
    }

    /// Same weights under a different method preset.
    pub fn with_preset(&self, preset: MethodPreset) -> Self {
        Self {
            config: self.config.with_preset(preset),
            weights: self.weights.clone(),
            schedule: self.schedule.clone(),
        }
    }

    /// Same weights under an edited config.
    pub fn with_config(&self, config: ToyDitConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            weights: self.weights.clone(),
            schedule: self.schedule.clone(),
        })
    }

    /// Installs a time-dependent RoPE scale schedule.
    pub fn with_scale_schedule(
        mut self,
        schedule: Arc<dyn ScaleSchedule<T> + Send + Sync>,
    ) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn config(&self) -> &ToyDitConfig {
        &self.config
    }

    pub fn weights(&self) -> &ToyDitWeights<T> {
        &self.weights
    }

    pub fn plan(&self, layout: &TokenLayout) -> Result<ExtrapolationPlan<T>> {
        let cfg = &self.config;
        if layout.text_len != cfg.text_len {
            return Err(Error::shape(
                "layout text_len",
                cfg.text_len,
                layout.text_len,
            ));
        }
        let trained = cfg.trained_layout();
        let axis_scales = layout.axis_scales(&trained);
        let lambda = layout.pixel_ratio(&trained).max(1.0);
        let scale_s = lambda.sqrt();
        let anchor: AnchorPolicy<T> = cfg.anchor.cast();
        let anchor = AnchorPolicy {
            lambda: anchor.lambda.or(Some(T::of(lambda))),
            ..anchor
        };
        let beta = anchoring_bias(&anchor, None)?;
        let temperature = cfg.temperature.resolve::<T>(scale_s)?;
        let spec: RopeSpec<T> = cfg.rope.cast();
        let axis_specs = [
            RopeSpec {
                scale_s: T::of(axis_scales[0]),
                trained_len: trained.grid_h,
                ..spec.clone()
            },
            RopeSpec {
                scale_s: T::of(axis_scales[1]),
                trained_len: trained.grid_w,
                ..spec
            },
        ];
        let base_tables = [
            base_frequencies(&axis_specs[0], Axis::Height)?,
            base_frequencies(&axis_specs[1], Axis::Width)?,
        ];
        let mut positions = joint_positions(layout.text_len, layout.grid_h, layout.grid_w);
        let tp = (cfg.text_position[0], cfg.text_position[1]);
        positions[..layout.text_len]
            .iter_mut()
            .for_each(|p| *p = tp);
        Ok(ExtrapolationPlan {
            layout: *layout,
            axis_scales,
            lambda,
            scale_s,
            beta,
            temperature,
            axis_specs,
            base_tables,
            positions,
        })
    }

    pub fn step_settings(&self, plan: &ExtrapolationPlan<T>, t: T) -> Result<StepSettings<T>> {
        let policy = &plan.temperature;
        let tau = global_temperature(t, policy)?;
        let tables = plan.tables_at(t, self.schedule.as_ref())?;
        let band_scale = match policy.mode {
            TemperatureMode::DynamicPerFrequency => Some(band_scale_factors(&tables, t, policy)?),
            _ => None,
        };
        let beta = applied_bias(plan.beta, tau, self.config.anchor.compensate_temperature);
        Ok(StepSettings {
            t,
            params: AttentionParams {
                beta,
                tau,
                d: self.config.head_dim,
                rows: self.config.anchor.rows,
            },
            band_scale,
            tables,
        })
    }

    /// Velocity for `image_tokens` (`L_I × channels`) at time `t`.
    pub fn forward(
        &self,
        image_tokens: &RowMatrix<T>,
        text: &RowMatrix<T>,
        layout: &TokenLayout,
        t: T,
        record: bool,
    ) -> Result<ForwardOutput<T>> {
        let plan = self.plan(layout)?;
        let settings = self.step_settings(&plan, t)?;
        self.forward_with(image_tokens, text, &plan, &settings, record)
    }

    pub fn forward_with(
        &self,
        image_tokens: &RowMatrix<T>,
        text: &RowMatrix<T>,
        plan: &ExtrapolationPlan<T>,
        settings: &StepSettings<T>,
        record: bool,
    ) -> Result<ForwardOutput<T>> {
        let (xi, trace) = self.run_blocks(
            image_tokens,
            text,
            plan,
            settings,
            record,
            self.config.blocks,
        )?;
        let w = &self.weights;
        let mut velocity = layer_norm(&xi).matmul(&w.output)?;
        add_row(&mut velocity, w.output_bias.row(0));
        velocity.ensure_finite("velocity head")?;
        Ok(ForwardOutput { velocity, trace })
    }

    /// Attention statistics of blocks `0..blocks` without computing the
    /// later blocks or the velocity head.
    pub fn probe(
        &self,
        image_tokens: &RowMatrix<T>,
        text: &RowMatrix<T>,
        plan: &ExtrapolationPlan<T>,
        settings: &StepSettings<T>,
        blocks: usize,
    ) -> Result<Vec<HeadStats<T>>> {
        if blocks > self.config.blocks {
            return Err(Error::invalid(
                "blocks",
                format!(
                    "model has {} blocks, asked for {blocks}",
                    self.config.blocks
                ),
            ));
        }
        Ok(self
            .run_blocks(image_tokens, text, plan, settings, true, blocks)?
            .1)
    }

    fn run_blocks(
        &self,
        image_tokens: &RowMatrix<T>,
        text: &RowMatrix<T>,
        plan: &ExtrapolationPlan<T>,
        settings: &StepSettings<T>,
        record: bool,
        blocks: usize,
    ) -> Result<(RowMatrix<T>, Vec<HeadStats<T>>)> {
        let cfg = &self.config;
        let layout = &plan.layout;
        let c = cfg.token_dim;
        if image_tokens.rows() != layout.image_len() || image_tokens.cols() != cfg.channels {
            return Err(Error::shape(
                "forward image tokens",
                format!("{}x{}", layout.image_len(), cfg.channels),
                format!("{}x{}", image_tokens.rows(), image_tokens.cols()),
            ));
        }
        if text.rows() != layout.text_len || text.cols() != c {
            return Err(Error::shape(
                "forward text tokens",
                format!("{}x{c}", layout.text_len),
                format!("{}x{}", text.rows(), text.cols()),
            ));
        }
        let t = settings.t;
        if !(t >= T::zero() && t <= T::one()) {
            return Err(Error::invalid("t", format!("must lie in [0, 1], got {t}")));
        }
        let w = &self.weights;
        let temb = time_embedding(t, c).matmul(&w.time)?;
        let mut xi = image_tokens.matmul(&w.input)?;
        let mut xt = text.clone();
        add_row(&mut xi, temb.row(0));
        add_row(&mut xt, temb.row(0));

        let mut trace = Vec::new();
        for (b, bw) in w.blocks.iter().take(blocks).enumerate() {
            let ht = layer_norm(&xt);
            let hi = layer_norm(&xi);
            let q = RowMatrix::vconcat(&ht.matmul(&bw.wq_text)?, &hi.matmul(&bw.wq_image)?)?;
            let k = RowMatrix::vconcat(&ht.matmul(&bw.wk_text)?, &hi.matmul(&bw.wk_image)?)?;
            let v = RowMatrix::vconcat(&ht.matmul(&bw.wv_text)?, &hi.matmul(&bw.wv_image)?)?;
            let (o, stats) = self.joint_attention(&q, &k, &v, plan, settings, record, b)?;
            trace.extend(stats);
            let ot = o.row_range(0, layout.text_len)?;
            let oi = o.row_range(layout.text_len, layout.total())?;
            add_assign(&mut xt, &ot.matmul(&bw.wo_text)?);
            add_assign(&mut xi, &oi.matmul(&bw.wo_image)?);
            let mt = mlp(&layer_norm(&xt), &bw.mlp_up_text, &bw.mlp_down_text)?;
            let mi = mlp(&layer_norm(&xi), &bw.mlp_up_image, &bw.mlp_down_image)?;
            add_assign(&mut xt, &mt);
            add_assign(&mut xi, &mi);
            xi.ensure_finite(&format!("block {b} image stream"))?;
            xt.ensure_finite(&format!("block {b} text stream"))?;
        }
        Ok((xi, trace))
    }

    #[allow(clippy::too_many_arguments)]
    fn joint_attention(
        &self,
        q: &RowMatrix<T>,
        k: &RowMatrix<T>,
        v: &RowMatrix<T>,
        plan: &ExtrapolationPlan<T>,
        settings: &StepSettings<T>,
        record: bool,
        block: usize,
    ) -> Result<(RowMatrix<T>, Vec<HeadStats<T>>)> {
        let d = self.config.head_dim;
        let heads = self.config.heads;
        let layout = &plan.layout;
        let total = layout.total();
        let params = &settings.params;
        let band = settings.band_scale.as_deref();
        let inv = params.inv_scale();
        let mask = params.column_bias(layout.text_len, total);

        let mut qs = Vec::with_capacity(heads);
        let mut ks = Vec::with_capacity(heads);
        let mut vs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = (h * d, (h + 1) * d);
            qs.push(rotate(
                &q.column_range(cols.0, cols.1)?,
                &plan.positions,
                &settings.tables,
                band,
            )?);
            ks.push(rotate(
                &k.column_range(cols.0, cols.1)?,
                &plan.positions,
                &settings.tables,
                band,
            )?);
            vs.push(v.column_range(cols.0, cols.1)?);
        }

        let c = self.config.token_dim;
        let mut out = RowMatrix::zeros(total, c);
        let summaries: Vec<Result<Vec<RowSummary<T>>>> = out
            .data_mut()
            .par_chunks_mut(c)
            .enumerate()
            .map_init(
                || (vec![T::zero(); total], vec![T::zero(); total]),
                |(logits, probs), (r, orow)| {
                    let bias = mask
                        .as_deref()
                        .filter(|_| params.row_biased(r, layout.text_len));
                    (0..heads)
                        .map(|h| {
                            attend_row(
                                qs[h].row(r),
                                &ks[h],
                                &vs[h],
                                layout.text_len,
                                inv,
                                bias,
                                logits,
                                probs,
                                &mut orow[h * d..(h + 1) * d],
                            )
                            .map_err(|e| {
                                Error::NonFinite(format!("block {block}, head {h}, row {r}: {e}"))
                            })
                        })
                        .collect()
                },
            )
            .collect();
        let rows: Vec<Vec<RowSummary<T>>> = summaries.into_iter().collect::<Result<_>>()?;
        out.ensure_finite(&format!("block {block} attention output"))?;

        let stats = if record {
            (0..heads)
                .map(|h| HeadStats {
                    block,
                    head: h,
                    stats: AttentionStats::from_summaries(rows.iter().map(|r| r[h]), layout),
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok((out, stats))
    }

    /// Euler integration of the velocity field from `t = 1` to `t = 0` on
    /// the shifted grid for the noise's resolution.
    pub fn euler_sample(
        &self,
        noise: &LatentGrid<T>,
        text: &RowMatrix<T>,
        record: bool,
    ) -> Result<SampleOutput<T>> {
        let (mut x, layout) = patchify(noise, &self.config)?;
        let plan = self.plan(&layout)?;
        let mu: f64 = shift_mu(layout.image_len(), &self.config.timeshift)?;
        let ts: Vec<T> = shifted_timesteps(&self.config.timeshift, T::of(mu))?;
        let mut steps = Vec::with_capacity(ts.len() - 1);
        for i in 0..ts.len() - 1 {
            let settings = self.step_settings(&plan, ts[i])?;
            let out = self.forward_with(&x, text, &plan, &settings, record)?;
            let dt = ts[i + 1] - ts[i];
            for (xv, &vv) in x.data_mut().iter_mut().zip(out.velocity.data()) {
                *xv += dt * vv;
            }
            steps.push(StepRecord {
                step: i,
                t: ts[i].as_f64(),
                t_next: ts[i + 1].as_f64(),
                tau_f0: dynamic_temperature(ts[i], T::zero(), &plan.temperature)?.as_f64(),
                tau_f1: dynamic_temperature(ts[i], T::one(), &plan.temperature)?.as_f64(),
                beta: settings.params.beta.as_f64(),
                mu,
                mean_text_mass: out.mean_text_mass().map(cast::<T, f64>),
                mean_entropy: out.mean_entropy().map(cast::<T, f64>),
            });
        }
        Ok(SampleOutput {
            latent: unpatchify(&x, &layout)?,
            mu,
            timesteps: ts,
            steps,
        })
    }
}

/// `[cos(1000 t ω_k), sin(1000 t ω_k)]` with `ω_k = 10000^(−k/(c/2))`.
pub fn time_embedding<T: Scalar>(t: T, dim: usize) -> RowMatrix<T> {
    let half = dim / 2;
    let scaled = t * T::of(1000.0);
    RowMatrix::from_fn(1, dim, |_, j| {
        if j >= 2 * half {
            return T::zero();
        }
        let k = j % half.max(1);
        let omega = T::of(10_000.0).powf(-T::of_usize(k) / T::of_usize(half.max(1)));
        if j < half {
            (scaled * omega).cos()
        } else {
            (scaled * omega).sin()
        }
    })
}

/// Per-row standardization without learned affine terms.
pub fn layer_norm<T: Scalar>(x: &RowMatrix<T>) -> RowMatrix<T> {
    let mut out = x.clone();
    let n = T::of_usize(x.cols());
    let eps = T::of(1e-6);
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    out
}

/// tanh approximation of GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    T::of(0.5) * x * (T::one() + (k * (x + T::of(0.044715) * x * x * x)).tanh())
}

fn mlp<T: Scalar>(
    x: &RowMatrix<T>,
    up: &RowMatrix<T>,
    down: &RowMatrix<T>,
) -> Result<RowMatrix<T>> {
    x.matmul(up)?.map(gelu).matmul(down)
}

fn add_row<T: Scalar>(m: &mut RowMatrix<T>, row: &[T]) {
    for r in 0..m.rows() {
        for (a, &b) in m.row_mut(r).iter_mut().zip(row) {
            *a += b;
        }
    }
}

fn add_assign<T: Scalar>(m: &mut RowMatrix<T>, other: &RowMatrix<T>) {
    for (a, &b) in m.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
}

/// Identifies this crate's weight files.
pub const WEIGHTS_FORMAT: &str = "tide-toydit-weights";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

/// JSON header of a weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub blocks: usize,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
}

/// Manifest JSON, one NUL byte, then every tensor as little-endian `f32`
/// in manifest order.
pub fn encode_weights(weights: &ToyDitWeights<f32>, config: &ToyDitConfig) -> Result<Vec<u8>> {
    let named = weights.named_tensors();
    let manifest = WeightManifest {
        format: WEIGHTS_FORMAT.to_string(),
        version: 1,
        dtype: "f32le".to_string(),
        blocks: weights.blocks.len(),
        config_hash: config.hash(),
        tensors: named
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: [t.rows(), t.cols()],
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec(&manifest)?;
    bytes.push(0);
    for (_, t) in &named {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn decode_weights(bytes: &[u8]) -> Result<(ToyDitWeights<f32>, WeightManifest)> {
    let split = bytes
        .iter()
        .position(|&b| b == 0)
        .ok_or_else(|| Error::WeightFormat("missing NUL separator after manifest".into()))?;
    let manifest: WeightManifest = serde_json::from_slice(&bytes[..split])?;
    if manifest.format != WEIGHTS_FORMAT || manifest.dtype != "f32le" {
        return Err(Error::WeightFormat(format!(
            "unsupported format {} / dtype {}",
            manifest.format, manifest.dtype
        )));
    }
    let blob = &bytes[split + 1..];
    let need: usize = manifest
        .tensors
        .iter()
        .map(|t| t.shape[0] * t.shape[1] * 4)
        .sum();
    if blob.len() != need {
        return Err(Error::WeightFormat(format!(
            "blob holds {} bytes, manifest needs {need}",
            blob.len()
        )));
    }
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let n = entry.shape[0] * entry.shape[1];
        let data: Vec<f32> = blob[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        offset += 4 * n;
        tensors.push(
            RowMatrix::new(entry.shape[0], entry.shape[1], data)
                .map_err(|e| Error::WeightFormat(format!("tensor {}: {e}", entry.name)))?,
        );
    }
    let weights = ToyDitWeights::from_ordered(tensors, manifest.blocks)?;
    Ok((weights, manifest))
}

pub fn save_weights(
    weights: &ToyDitWeights<f32>,
    config: &ToyDitConfig,
    path: &std::path::Path,
) -> Result<()> {
    crate::artifact::write_atomic(path, &encode_weights(weights, config)?)
}

#[derive(Debug, Clone)]
pub struct LoadedWeights {
    pub weights: ToyDitWeights<f32>,
    pub manifest: WeightManifest,
    /// False when the file was written under a different config.
    pub config_matches: bool,
}

/// Reads a weight file; a config-hash mismatch is logged, not fatal.
pub fn load_weights(path: &std::path::Path, config: &ToyDitConfig) -> Result<LoadedWeights> {
    let bytes = std::fs::read(path)?;
    let (weights, manifest) = decode_weights(&bytes)?;
    let config_matches = manifest.config_hash == config.hash();
    if !config_matches {
        log::warn!(
            "{}: written for config {}, loading under {}",
            path.display(),
            manifest.config_hash,
            config.hash()
        );
    }
    weights.check_shapes(config)?;
    Ok(LoadedWeights {
        weights,
        manifest,
        config_matches,
    })
}
