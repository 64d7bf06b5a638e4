//! Attention diagnostics: row entropy, the small-variance entropy law,
//! text mass, spatial influence maps and resolution sweeps.
//!
//! Entropies are in nats.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attn::{text_mass, AnchorPolicy, JointLogits, RowSummary, TokenLayout};
use crate::error::{Error, Result};
use crate::numeric::{softmax_row_into, Rng, RowMatrix};
use crate::scalar::Scalar;
use crate::sched::{global_temperature, shift_mu, shifted_timesteps};
use crate::toydit::{patchify, text_tokens, HeadStats, LatentGrid, ToyDit, ToyDitConfig};

const NORM_TOL: f64 = 1e-9;

/// Per-row statistics of one attention matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStats<T> {
    pub text_len: usize,
    /// Entropy of every query row, text rows first.
    pub entropy_per_query: Vec<T>,
    /// Population variance of every row's raw scores.
    pub logit_variance: Vec<T>,
    /// Text mass of every query row, text rows first.
    pub text_mass: Vec<T>,
    /// Mean text mass over image-query rows.
    pub mean_text_mass: T,
}

impl<T: Scalar> AttentionStats<T> {
    pub fn from_summaries(rows: impl Iterator<Item = RowSummary<T>>, layout: &TokenLayout) -> Self {
        let mut entropy_per_query = Vec::with_capacity(layout.total());
        let mut logit_variance = Vec::with_capacity(layout.total());
        let mut text_mass = Vec::with_capacity(layout.total());
        for r in rows {
            entropy_per_query.push(r.entropy);
            logit_variance.push(r.logit_variance);
            text_mass.push(r.text_mass);
        }
        let mean_text_mass = mean_tail(&text_mass, layout.text_len);
        Self {
            text_len: layout.text_len,
            entropy_per_query,
            logit_variance,
            text_mass,
            mean_text_mass,
        }
    }

    /// Text mass of the image-query rows.
    pub fn image_text_mass(&self) -> &[T] {
        &self.text_mass[self.text_len.min(self.text_mass.len())..]
    }

    /// Mean entropy over image-query rows.
    pub fn mean_entropy(&self) -> T {
        mean_tail(&self.entropy_per_query, self.text_len)
    }
}

fn mean_tail<T: Scalar>(v: &[T], skip: usize) -> T {
    let tail = &v[skip.min(v.len())..];
    if tail.is_empty() {
        T::zero()
    } else {
        tail.iter().copied().sum::<T>() / T::of_usize(tail.len())
    }
}

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn attention_entropy<T: Scalar>(p_row: &[T]) -> Result<T> {
    if p_row.is_empty() {
        return Err(Error::EmptyInput);
    }
    if p_row.iter().any(|&p| !(p >= T::zero()) || !p.is_finite()) {
        return Err(Error::invalid("p_row", "entries must be finite and >= 0"));
    }
    let total: T = p_row.iter().copied().sum();
    if (total - T::one()).abs() > T::of(NORM_TOL) {
        return Err(Error::invalid("p_row", format!("sums to {total}, not 1")));
    }
    Ok(p_row
        .iter()
        .filter(|&&p| p > T::zero())
        .map(|&p| -p * p.ln())
        .sum())
}

/// `ln L − σ²/2`.
pub fn entropy_prediction<T: Scalar>(len: usize, sigma_sq: T) -> Result<T> {
    if len < 2 {
        return Err(Error::invalid("len", format!("must be >= 2, got {len}")));
    }
    if !(sigma_sq >= T::zero()) {
        return Err(Error::invalid(
            "sigma_sq",
            format!("must be >= 0, got {sigma_sq}"),
        ));
    }
    Ok(T::of_usize(len).ln() - sigma_sq / T::of(2.0))
}

/// Statistics of a materialized attention matrix `p` with scores `s`.
pub fn measure_stats<T: Scalar>(
    p: &RowMatrix<T>,
    s: &JointLogits<T>,
    layout: &TokenLayout,
) -> Result<AttentionStats<T>> {
    let total = layout.total();
    if p.rows() != total || p.cols() != total {
        return Err(Error::shape(
            "measure_stats P",
            format!("{total}x{total}"),
            format!("{}x{}", p.rows(), p.cols()),
        ));
    }
    if s.rows() != total || s.text_len() != layout.text_len || s.image_len() != layout.image_len() {
        return Err(Error::shape(
            "measure_stats S",
            format!(
                "{total} rows, {} + {} columns",
                layout.text_len,
                layout.image_len()
            ),
            format!(
                "{} rows, {} + {} columns",
                s.rows(),
                s.text_len(),
                s.image_len()
            ),
        ));
    }
    let rows = (0..total)
        .map(|r| {
            let pr = p.row(r);
            let sr = s.dense_row(r);
            let n = T::of_usize(sr.len());
            let mean = sr.iter().copied().sum::<T>() / n;
            Ok(RowSummary {
                entropy: attention_entropy(pr)?,
                logit_variance: sr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n,
                text_mass: text_mass(pr, layout.text_len),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionStats::from_summaries(rows.into_iter(), layout))
}

/// Per-cell text mass averaged over an accumulation set.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMap {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Row-major, `grid_h · grid_w` values.
    pub values: Vec<f64>,
    /// Whether `values` were min-max normalized to `[0, 1]`.
    pub normalized: bool,
    /// Number of stats averaged.
    pub accumulated: usize,
}

impl InfluenceMap {
    /// Min-max scaled copy; a constant map becomes all zeros.
    pub fn normalized(&self) -> InfluenceMap {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self
            .values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        InfluenceMap {
            values: self
                .values
                .iter()
                .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
                .collect(),
            normalized: true,
            ..self.clone()
        }
    }

    /// 8-bit grayscale; absolute maps are clamped to `[0, 1]` first.
    pub fn to_gray(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// Averages the image-row text mass of every entry in `set` and reshapes
/// it to the grid. With `normalize`, the map is min-max scaled and a
/// constant map becomes all zeros.
pub fn influence_map<T: Scalar>(
    set: &[&AttentionStats<T>],
    layout: &TokenLayout,
    normalize: bool,
) -> Result<InfluenceMap> {
    if set.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = layout.image_len();
    let mut acc = vec![0.0f64; n];
    for stats in set {
        if stats.text_len != layout.text_len || stats.image_text_mass().len() != n {
            return Err(Error::shape(
                "influence_map stats",
                format!("{} text + {n} image rows", layout.text_len),
                format!(
                    "{} text + {} image rows",
                    stats.text_len,
                    stats.image_text_mass().len()
                ),
            ));
        }
        for (a, m) in acc.iter_mut().zip(stats.image_text_mass()) {
            *a += m.as_f64();
        }
    }
    let k = set.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    let map = InfluenceMap {
        grid_h: layout.grid_h,
        grid_w: layout.grid_w,
        values: acc,
        normalized: false,
        accumulated: set.len(),
    };
    Ok(if normalize { map.normalized() } else { map })
}

/// Mean text mass and entropy of query rows whose `L` scores are drawn
/// i.i.d. `N(0, σ²)` in softmax-input units, with bias `beta` on the text
/// columns and temperature `tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IidMass {
    pub mean_text_mass: f64,
    pub mean_entropy: f64,
}

pub fn iid_text_mass(
    layout: &TokenLayout,
    sigma: f64,
    beta: f64,
    tau: f64,
    trials: usize,
    rng: &mut Rng,
) -> Result<IidMass> {
    if trials == 0 {
        return Err(Error::invalid("trials", "must be >= 1"));
    }
    if !(sigma >= 0.0) || !(tau > 0.0) || !beta.is_finite() {
        return Err(Error::invalid(
            "sigma",
            "need sigma >= 0, tau > 0 and finite beta",
        ));
    }
    let total = layout.total();
    let mut bias = vec![0.0; total];
    bias[..layout.text_len].iter_mut().for_each(|b| *b = beta);
    let mut logits = vec![0.0; total];
    let mut probs = vec![0.0; total];
    let (mut mass, mut entropy) = (0.0, 0.0);
    for _ in 0..trials {
        logits.iter_mut().for_each(|v| *v = sigma * rng.normal());
        softmax_row_into(&logits, 1.0 / tau, Some(&bias), &mut probs)?;
        mass += text_mass(&probs, layout.text_len);
        entropy += probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum::<f64>();
    }
    Ok(IidMass {
        mean_text_mass: mass / trials as f64,
        mean_entropy: entropy / trials as f64,
    })
}

/// Where sweep attention rows come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MassSource {
    /// The toy model's joint attention.
    Toy,
    /// Synthetic i.i.d. Gaussian scores.
    IidLogits { sigma: f64, trials: usize },
}

/// Which attention maps a sweep averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Accumulation {
    /// Block indices; every head of each block is included.
    pub blocks: Vec<usize>,
    /// Sampling steps from the start of the schedule.
    pub steps: usize,
}

impl Default for Accumulation {
    fn default() -> Self {
        Self {
            blocks: vec![0],
            steps: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub model: ToyDitConfig,
    pub source: MassSource,
    pub accumulate: Accumulation,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub layout: TokenLayout,
    pub beta: f64,
    pub tau_mode: &'static str,
    pub mean_text_mass: f64,
    pub mean_entropy: f64,
    /// Absolute influence map; toy source only.
    pub map: Option<InfluenceMap>,
}

pub const SWEEP_HEADER: &str = "resolution,L_T,L_I,beta,tau_mode,mean_text_mass,mean_entropy";

/// CSV with [`SWEEP_HEADER`]; reals use Rust's shortest round-trip form.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.layout.label(),
            r.layout.text_len,
            r.layout.image_len(),
            r.beta,
            r.tau_mode,
            r.mean_text_mass,
            r.mean_entropy
        ));
    }
    out
}

/// Mean text mass and entropy per layout at the start of sampling, with
/// anchoring forced on or off. Layouts run in parallel, each on RNG
/// stream `(seed, index)`.
pub fn sweep_text_mass(
    config: &SweepConfig,
    resolutions: &[TokenLayout],
    anchor_on: bool,
) -> Result<Vec<SweepRow>> {
    if resolutions.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut model_cfg = config.model.clone();
    model_cfg.anchor.enabled = anchor_on;
    model_cfg.validate()?;
    let model = match config.source {
        MassSource::Toy => Some(ToyDit::<f64>::random(model_cfg.clone())?),
        MassSource::IidLogits { .. } => None,
    };
    resolutions
        .par_iter()
        .enumerate()
        .map(|(i, layout)| {
            let mut rng = Rng::stream(config.seed, i as u64);
            match (&model, config.source) {
                (Some(m), _) => toy_row(m, layout, &config.accumulate, config.seed, i as u64),
                (None, MassSource::IidLogits { sigma, trials }) => {
                    iid_row(&model_cfg, layout, sigma, trials, &mut rng)
                }
                (None, MassSource::Toy) => unreachable!(),
            }
        })
        .collect()
}

fn iid_row(
    cfg: &ToyDitConfig,
    layout: &TokenLayout,
    sigma: f64,
    trials: usize,
    rng: &mut Rng,
) -> Result<SweepRow> {
    let trained = cfg.trained_layout();
    let lambda = layout.pixel_ratio(&trained).max(1.0);
    let anchor = AnchorPolicy {
        lambda: cfg.anchor.lambda.or(Some(lambda)),
        ..cfg.anchor.clone()
    };
    let beta = crate::attn::anchoring_bias(&anchor, None)?;
    let policy = cfg.temperature.resolve::<f64>(lambda.sqrt())?;
    let mu: f64 = shift_mu(layout.image_len(), &cfg.timeshift)?;
    let t0 = shifted_timesteps(&cfg.timeshift, mu)?[0];
    let tau = global_temperature(t0, &policy)?;
    let m = iid_text_mass(layout, sigma, beta, tau, trials, rng)?;
    Ok(SweepRow {
        layout: *layout,
        beta,
        tau_mode: cfg.temperature.mode.name(),
        mean_text_mass: m.mean_text_mass,
        mean_entropy: m.mean_entropy,
        map: None,
    })
}

/// Noise for sweep layout `index` of `seed`.
pub fn sweep_noise(
    cfg: &ToyDitConfig,
    layout: &TokenLayout,
    seed: u64,
    index: u64,
) -> LatentGrid<f64> {
    LatentGrid::noise(layout.grid_h, layout.grid_w, cfg.channels, seed, index)
}

/// Attention stats the accumulation set asks for, sampling forward through
/// the first `acc.steps` steps.
pub fn accumulate_stats(
    model: &ToyDit<f64>,
    noise: &LatentGrid<f64>,
    text: &RowMatrix<f64>,
    acc: &Accumulation,
) -> Result<Vec<HeadStats<f64>>> {
    let cfg = model.config();
    if acc.steps == 0 {
        return Err(Error::invalid("accumulate.steps", "must be >= 1"));
    }
    if acc.steps > cfg.timeshift.steps {
        return Err(Error::invalid(
            "accumulate.steps",
            format!(
                "{} exceeds the {} sampling steps",
                acc.steps, cfg.timeshift.steps
            ),
        ));
    }
    if acc.blocks.is_empty() {
        return Err(Error::invalid(
            "accumulate.blocks",
            "must name at least one block",
        ));
    }
    if let Some(&b) = acc.blocks.iter().find(|&&b| b >= cfg.blocks) {
        return Err(Error::invalid(
            "accumulate.blocks",
            format!("block {b} out of range"),
        ));
    }
    let (mut x, layout) = patchify(noise, cfg)?;
    let plan = model.plan(&layout)?;
    let mu: f64 = shift_mu(layout.image_len(), &cfg.timeshift)?;
    let ts = shifted_timesteps(&cfg.timeshift, mu)?;
    let depth = acc.blocks.iter().max().unwrap() + 1;
    let mut out = Vec::new();
    for i in 0..acc.steps {
        let settings = model.step_settings(&plan, ts[i])?;
        let trace = if i + 1 == acc.steps {
            model.probe(&x, text, &plan, &settings, depth)?
        } else {
            let f = model.forward_with(&x, text, &plan, &settings, true)?;
            let dt = ts[i + 1] - ts[i];
            for (xv, &vv) in x.data_mut().iter_mut().zip(f.velocity.data()) {
                *xv += dt * vv;
            }
            f.trace
        };
        out.extend(trace.into_iter().filter(|h| acc.blocks.contains(&h.block)));
    }
    Ok(out)
}

fn toy_row(
    model: &ToyDit<f64>,
    layout: &TokenLayout,
    acc: &Accumulation,
    seed: u64,
    index: u64,
) -> Result<SweepRow> {
    let cfg = model.config();
    let noise = sweep_noise(cfg, layout, seed, index);
    let text = text_tokens(cfg, seed);
    let stats = accumulate_stats(model, &noise, &text, acc)?;
    let refs: Vec<&AttentionStats<f64>> = stats.iter().map(|h| &h.stats).collect();
    let k = refs.len() as f64;
    let plan = model.plan(layout)?;
    Ok(SweepRow {
        layout: *layout,
        beta: plan.beta,
        tau_mode: cfg.temperature.mode.name(),
        mean_text_mass: refs.iter().map(|s| s.mean_text_mass).sum::<f64>() / k,
        mean_entropy: refs.iter().map(|s| s.mean_entropy()).sum::<f64>() / k,
        map: Some(influence_map(&refs, layout, false)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attn::anchored_attention;
    use approx::assert_abs_diff_eq;

    #[test]
    fn entropy_examples() {
        let u = vec![1.0 / 4096.0; 4096];
        assert_abs_diff_eq!(attention_entropy(&u).unwrap(), 4096f64.ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(attention_entropy(&u).unwrap(), 8.317766, epsilon = 1e-6);
        assert_eq!(attention_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            attention_entropy(&[0.25, 0.75]).unwrap(),
            0.562335,
            epsilon = 1e-6
        );
        assert!(attention_entropy(&[0.5, 0.6]).is_err());
        assert!(attention_entropy::<f64>(&[]).is_err());
    }

    #[test]
    fn prediction_examples() {
        assert_eq!(entropy_prediction(256, 0.0).unwrap(), 256f64.ln());
        assert_abs_diff_eq!(
            entropy_prediction(4096, 0.25).unwrap(),
            8.192766,
            epsilon = 1e-6
        );
        let gap = entropy_prediction(4096, 0.3).unwrap() - entropy_prediction(1024, 0.3).unwrap();
        assert_abs_diff_eq!(gap, 4f64.ln(), epsilon = 1e-12);
        assert!(entropy_prediction(1, 0.0).is_err());
        assert!(entropy_prediction(8, -0.1).is_err());
    }

    fn zero_stats(text_len: usize, h: usize, w: usize) -> AttentionStats<f64> {
        let layout = TokenLayout::new(text_len, h, w).unwrap();
        let n = layout.total();
        let s = JointLogits::from_dense(&RowMatrix::<f64>::zeros(n, n), &layout).unwrap();
        let p = anchored_attention(&s, 0.0, 1.0, 16).unwrap();
        measure_stats(&p, &s, &layout).unwrap()
    }

    #[test]
    fn constant_logit_mass() {
        let st = zero_stats(512, 64, 64);
        assert!(st
            .text_mass
            .iter()
            .all(|&m| (m - 512.0 / 4608.0).abs() < 1e-12));
        assert_abs_diff_eq!(st.mean_text_mass, 0.111111, epsilon = 1e-6);
        let big = zero_stats(512, 128, 128);
        assert_abs_diff_eq!(big.mean_text_mass, 512.0 / 16896.0, epsilon = 1e-12);
        assert_abs_diff_eq!(big.mean_text_mass, 0.030303, epsilon = 1e-6);
    }

    #[test]
    fn identity_attention_stats() {
        let layout = TokenLayout::new(2, 2, 2).unwrap();
        let s = JointLogits::from_dense(&RowMatrix::<f64>::zeros(6, 6), &layout).unwrap();
        let st = measure_stats(&RowMatrix::identity(6), &s, &layout).unwrap();
        assert!(st.entropy_per_query.iter().all(|&h| h == 0.0));
        assert_eq!(st.text_mass, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(st.mean_text_mass, 0.0);
        let wrong = TokenLayout::new(3, 2, 2).unwrap();
        assert!(measure_stats(&RowMatrix::identity(6), &s, &wrong).is_err());
    }

    fn with_mass(masses: &[f64]) -> AttentionStats<f64> {
        let mut text_mass = vec![1.0];
        text_mass.extend_from_slice(masses);
        AttentionStats {
            text_len: 1,
            entropy_per_query: vec![0.0; text_mass.len()],
            logit_variance: vec![0.0; text_mass.len()],
            mean_text_mass: masses.iter().sum::<f64>() / masses.len() as f64,
            text_mass,
        }
    }

    #[test]
    fn influence_map_examples() {
        let layout = TokenLayout::new(1, 2, 2).unwrap();
        let s = with_mass(&[0.1, 0.2, 0.3, 0.4]);
        let m = influence_map(&[&s], &layout, true).unwrap();
        for (a, b) in m.values.iter().zip([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        assert_eq!(
            influence_map(&[&s, &s], &layout, true).unwrap().values,
            m.values
        );
        let flat = with_mass(&[0.2; 4]);
        assert_eq!(
            influence_map(&[&flat], &layout, true).unwrap().values,
            vec![0.0; 4]
        );
        assert_eq!(
            influence_map(&[&flat], &layout, false).unwrap().values,
            vec![0.2; 4]
        );
        assert!(influence_map::<f64>(&[], &layout, true).is_err());
        let other = TokenLayout::new(1, 3, 2).unwrap();
        assert!(influence_map(&[&s], &other, true).is_err());
        assert_eq!(m.to_gray(), vec![0, 85, 170, 255]);
    }

    #[test]
    fn iid_mass_is_deterministic() {
        let layout = TokenLayout::new(8, 16, 16).unwrap();
        let a = iid_text_mass(&layout, 0.5, 0.0, 1.0, 20, &mut Rng::stream(3, 0)).unwrap();
        let b = iid_text_mass(&layout, 0.5, 0.0, 1.0, 20, &mut Rng::stream(3, 0)).unwrap();
        assert_eq!(a, b);
        assert!((a.mean_text_mass - 8.0 / 264.0).abs() < 0.01);
    }

    #[test]
    fn sweep_rejects_empty_and_is_deterministic() {
        let cfg = SweepConfig {
            model: ToyDitConfig::default(),
            source: MassSource::IidLogits {
                sigma: 0.5,
                trials: 50,
            },
            accumulate: Accumulation::default(),
            seed: 7,
        };
        assert!(sweep_text_mass(&cfg, &[], true).is_err());
        let layouts = [
            TokenLayout::new(8, 16, 16).unwrap(),
            TokenLayout::new(8, 32, 32).unwrap(),
        ];
        let a = sweep_csv(&sweep_text_mass(&cfg, &layouts, true).unwrap());
        let b = sweep_csv(&sweep_text_mass(&cfg, &layouts, true).unwrap());
        assert_eq!(a, b);
        assert!(a.starts_with(SWEEP_HEADER));
        assert_eq!(a.lines().count(), 3);
    }
}
