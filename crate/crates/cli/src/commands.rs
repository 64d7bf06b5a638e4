use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use tide_core::artifact::{influence_pgm, latent_ppm, write_atomic};
use tide_core::attn::{anchoring_bias, attend_row, AnchorPolicy, AttentionParams};
use tide_core::diag::{sweep_csv, sweep_text_mass, SweepConfig, SweepRow};
use tide_core::numeric::{Rng, RowMatrix};
use tide_core::sched::{
    dynamic_temperature, shift_mu, shifted_timesteps, yarn_temperature, ShiftMode,
};
use tide_core::toydit::{
    load_weights, save_weights, text_tokens, LatentGrid, StepRecord, ToyDit, ToyDitConfig,
    ToyDitWeights,
};

use crate::config::RunConfig;
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn write(out: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    write_atomic(&out.join(name), bytes)?;
    log::info!("wrote {}", out.join(name).display());
    Ok(())
}

fn model(cfg: &RunConfig, out: &Path) -> Result<ToyDit<f64>> {
    let model_cfg = cfg.model();
    let weights = match &cfg.weights {
        Some(path) => load_weights(path, &model_cfg)?.weights,
        None => ToyDitWeights::<f32>::random(&model_cfg)?,
    };
    if cfg.weights.is_none() {
        save_weights(&weights, &model_cfg, &out.join("weights.bin"))?;
    }
    Ok(ToyDit::new(model_cfg, &weights)?)
}

/// `schedule.csv`, `bias.csv` and `mu.csv`.
pub fn schedule(cfg: &RunConfig, out: &Path) -> Result<()> {
    let m = cfg.model();
    m.validate()?;
    let layout = m.layout(cfg.schedule.grid[0], cfg.schedule.grid[1])?;
    let lambda = layout.pixel_ratio(&m.trained_layout()).max(1.0);
    let policy = m.temperature.resolve::<f64>(lambda.sqrt())?;
    let mu: f64 = shift_mu(layout.image_len(), &m.timeshift)?;
    let ts = shifted_timesteps(&m.timeshift, mu)?;
    let steps = m.timeshift.steps;

    let mut csv = String::from("step,u,t,mu,tau_f0,tau_f1\n");
    for (i, &t) in ts.iter().enumerate() {
        let u = (steps - i) as f64 / steps as f64;
        let f0 = dynamic_temperature(t, 0.0, &policy)?;
        let f1 = dynamic_temperature(t, 1.0, &policy)?;
        writeln!(csv, "{i},{u},{t},{mu},{f0},{f1}").unwrap();
    }
    write(out, "schedule.csv", csv.as_bytes())?;

    let mut csv = String::from("s,lambda,beta,tau_min\n");
    for &s in &cfg.schedule.scales {
        let policy = AnchorPolicy::<f64> {
            lambda: None,
            ..m.anchor.clone()
        };
        let beta = anchoring_bias(&policy, Some(s))?;
        let tau_min = yarn_temperature(s)?;
        writeln!(csv, "{s},{},{beta},{tau_min}", s * s).unwrap();
    }
    write(out, "bias.csv", csv.as_bytes())?;

    let mut csv = String::from("L_I,mu_log,mu_linear\n");
    for &n in &cfg.schedule.tokens {
        let log: f64 = shift_mu(n, &m.timeshift.with_mode(ShiftMode::Logarithmic))?;
        let lin: f64 = shift_mu(n, &m.timeshift.with_mode(ShiftMode::LinearDefault))?;
        writeln!(csv, "{n},{log},{lin}").unwrap();
    }
    write(out, "mu.csv", csv.as_bytes())
}

/// `text_mass.csv` with a baseline and an anchored row per resolution,
/// plus one influence map per row.
pub fn analyze(cfg: &RunConfig, out: &Path) -> Result<()> {
    let a = &cfg.analyze;
    if a.resolutions.is_empty() {
        return Err(CliError::Config("analyze.resolutions is empty".into()));
    }
    let m = cfg.model();
    let layouts = a
        .resolutions
        .iter()
        .map(|&[h, w]| m.layout(h, w))
        .collect::<tide_core::Result<Vec<_>>>()?;
    let sweep = SweepConfig {
        model: m,
        source: a.source,
        accumulate: a.accumulate.clone(),
        seed: cfg.seed(),
    };
    let base = sweep_text_mass(&sweep, &layouts, false)?;
    let anchored = sweep_text_mass(&sweep, &layouts, true)?;
    let mut rows: Vec<(SweepRow, &str)> = Vec::with_capacity(2 * layouts.len());
    for (b, an) in base.into_iter().zip(anchored) {
        rows.push((b, "baseline"));
        rows.push((an, "anchored"));
    }
    for (row, tag) in &rows {
        if let Some(map) = &row.map {
            let label = row.layout.label();
            write(
                out,
                &format!("influence_{label}_{tag}.pgm"),
                &influence_pgm(&map.normalized())?,
            )?;
            if a.absolute_maps {
                write(
                    out,
                    &format!("influence_{label}_{tag}_abs.pgm"),
                    &influence_pgm(map)?,
                )?;
            }
        }
    }
    let table: Vec<SweepRow> = rows.into_iter().map(|(r, _)| r).collect();
    write(out, "text_mass.csv", sweep_csv(&table).as_bytes())
}

#[derive(Serialize)]
struct Sidecar<'a> {
    preset: &'a str,
    seed: u64,
    grid: [usize; 2],
    mu: f64,
    config: &'a ToyDitConfig,
    steps: &'a [StepRecord],
}

/// One PPM and JSON sidecar per preset, all from the same noise and text.
pub fn sample(cfg: &RunConfig, out: &Path) -> Result<()> {
    let s = &cfg.sample;
    if s.presets.is_empty() {
        return Err(CliError::Config("sample.presets is empty".into()));
    }
    let base = model(cfg, out)?;
    let seed = cfg.seed();
    let [h, w] = s.grid;
    base.config().layout(h, w)?;
    let noise = LatentGrid::<f64>::noise(h, w, base.config().channels, seed, 1);
    let text = text_tokens(base.config(), seed);
    for &preset in &s.presets {
        let m = base.with_preset(preset);
        let result = m.euler_sample(&noise, &text, true)?;
        write(
            out,
            &format!("sample_{preset}.ppm"),
            &latent_ppm(&result.latent)?,
        )?;
        let sidecar = Sidecar {
            preset: preset.name(),
            seed,
            grid: s.grid,
            mu: result.mu,
            config: m.config(),
            steps: &result.steps,
        };
        let mut json = serde_json::to_vec_pretty(&sidecar).map_err(tide_core::Error::from)?;
        json.push(b'\n');
        write(out, &format!("sample_{preset}.json"), &json)?;
    }
    Ok(())
}

/// ns per query row of the fused anchored-attention kernel.
pub fn bench(cfg: &RunConfig, out: &Path) -> Result<()> {
    let b = &cfg.bench;
    if b.lengths.is_empty() || b.rows == 0 || b.repeats == 0 {
        return Err(CliError::Config(
            "bench needs lengths, rows >= 1 and repeats >= 1".into(),
        ));
    }
    let m = cfg.model();
    let d = m.head_dim;
    let mut csv = String::from("L,rows,ns_per_row,checksum\n");
    for (i, &len) in b.lengths.iter().enumerate() {
        let text_len = m.text_len.min(len.saturating_sub(1)).max(1);
        if len <= text_len {
            return Err(CliError::Config(format!("bench length {len} too short")));
        }
        let mut rng = Rng::stream(cfg.seed(), i as u64);
        let mut mat = || RowMatrix::new(len, d, rng.normal_vec(len * d, 1.0));
        let (q, k, v) = (mat()?, mat()?, mat()?);
        let params = AttentionParams::new((len as f64 / 256.0).max(1.0).ln(), 1.0, d);
        let bias = {
            let mut b = vec![0.0; len];
            b[..text_len]
                .iter_mut()
                .for_each(|x| *x = params.beta * (d as f64).sqrt());
            b
        };
        let rows = b.rows.min(len);
        let (mut logits, mut probs, mut o) = (vec![0.0; len], vec![0.0; len], vec![0.0; d]);
        let mut best = f64::INFINITY;
        let mut checksum = 0.0;
        for _ in 0..b.repeats {
            checksum = 0.0;
            let start = Instant::now();
            for r in 0..rows {
                attend_row(
                    q.row(r),
                    &k,
                    &v,
                    text_len,
                    params.inv_scale(),
                    Some(&bias),
                    &mut logits,
                    &mut probs,
                    &mut o,
                )?;
                checksum += o.iter().sum::<f64>();
            }
            best = best.min(start.elapsed().as_nanos() as f64 / rows as f64);
        }
        writeln!(csv, "{len},{rows},{best:.0},{checksum}").unwrap();
    }
    write(out, "bench.csv", csv.as_bytes())
}
