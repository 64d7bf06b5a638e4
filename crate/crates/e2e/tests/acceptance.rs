//! Acceptance suite. One PASS/FAIL line per criterion; exits non-zero if any
//! criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use tide_core::attn::{
    anchored_attention, anchoring_bias, joint_logits, AnchorPolicy, JointLogits, TokenLayout,
};
use tide_core::diag::{
    accumulate_stats, attention_entropy, entropy_prediction, iid_text_mass, Accumulation,
};
use tide_core::numeric::{regression_slope, softmax_row, Rng, RowMatrix};
use tide_core::rope::{axis_tables, joint_positions, rotate, RopeSpec};
use tide_core::sched::{
    alpha_of_frequency, band_scale_factors, dynamic_temperature, shift_mu, shifted_timesteps,
    yarn_temperature, ShiftMode, TemperatureMode, TemperaturePolicy, TimeShiftSpec,
};
use tide_core::toydit::{text_tokens, LatentGrid, MethodPreset, ToyDit, ToyDitConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn yarn_golden() -> Outcome {
    let t1 = yarn_temperature(1.0f64).unwrap();
    let t2 = yarn_temperature(2.0f64).unwrap();
    let t4 = yarn_temperature(4.0f64).unwrap();
    check(
        t1 == 1.0 && (t2 - 0.874580).abs() <= 1e-6 && (t4 - 0.771347).abs() <= 1e-6,
        format!(
            "tau(1)={t1} tau(2)={t2:.6} (want 0.874580, diff {:.1e}) tau(4)={t4:.6} (want 0.771347, diff {:.1e})",
            (t2 - 0.874580).abs(),
            (t4 - 0.771347).abs()
        ),
    )
}

fn bias_curve() -> Outcome {
    let beta = |s: f64| anchoring_bias(&AnchorPolicy::adaptive(None), Some(s)).unwrap();
    let (b1, b2, b4) = (beta(1.0), beta(2.0), beta(4.0));
    let closed = b1 == 0.0 && (b2 - 4f64.ln()).abs() <= 1e-9 && (b4 - 16f64.ln()).abs() <= 1e-9;
    let printed = (b2 - 1.386294).abs() <= 5e-7 && (b4 - 2.772589).abs() <= 5e-7;
    let fixed = [1.0, 2.0, 3.0]
        .iter()
        .all(|&b| anchoring_bias(&AnchorPolicy::fixed(b), Some(4.0)).unwrap() == b);
    check(
        closed && printed && fixed,
        format!("beta(1)={b1} beta(2)={b2:.9} beta(4)={b4:.9} fixed passthrough {fixed}"),
    )
}

fn mean_entropy(len: usize, sigma: f64, rows: usize, rng: &mut Rng) -> f64 {
    (0..rows)
        .map(|_| {
            let v: Vec<f64> = rng.normal_vec(len, sigma);
            attention_entropy(&softmax_row(&v, 1.0, None).unwrap()).unwrap()
        })
        .sum::<f64>()
        / rows as f64
}

fn entropy_law() -> Outcome {
    let mut worst_uniform = 0f64;
    for len in [256usize, 4096] {
        let h = attention_entropy(&softmax_row(&vec![0.0; len], 1.0, None).unwrap()).unwrap();
        worst_uniform = worst_uniform.max((h - (len as f64).ln()).abs());
    }
    let mut rng = Rng::new(101);
    let mut worst_iid = 0f64;
    for sigma in [0.1, 0.25, 0.5] {
        for len in [256usize, 1024, 4096] {
            let h = mean_entropy(len, sigma, 100, &mut rng);
            worst_iid = worst_iid.max((h - entropy_prediction(len, sigma * sigma).unwrap()).abs());
        }
    }
    let lens = [256usize, 1024, 4096, 16384];
    let x: Vec<f64> = lens.iter().map(|&l| (l as f64).ln()).collect();
    let y: Vec<f64> = lens
        .iter()
        .map(|&l| mean_entropy(l, 0.5, 100, &mut rng))
        .collect();
    let slope = regression_slope(&x, &y).unwrap();
    check(
        worst_uniform <= 1e-9 && worst_iid <= 0.02 && (slope - 1.0).abs() <= 0.02,
        format!("uniform err {worst_uniform:.1e}, iid err {worst_iid:.4} nats, slope {slope:.4}"),
    )
}

fn mass_restoration() -> Outcome {
    let trials = 400;
    let base = TokenLayout::new(8, 16, 16).unwrap();
    let reference = iid_text_mass(&base, 0.5, 0.0, 1.0, trials, &mut Rng::new(201))
        .unwrap()
        .mean_text_mass;
    let mut ok = true;
    let mut detail = Vec::new();
    for (i, side) in [32usize, 64].into_iter().enumerate() {
        let l = TokenLayout::new(8, side, side).unwrap();
        let lambda = l.pixel_ratio(&base);
        let off = iid_text_mass(&l, 0.5, 0.0, 1.0, trials, &mut Rng::stream(202, i as u64))
            .unwrap()
            .mean_text_mass;
        let on = iid_text_mass(
            &l,
            0.5,
            lambda.ln(),
            1.0,
            trials,
            &mut Rng::stream(203, i as u64),
        )
        .unwrap()
        .mean_text_mass;
        let (r_off, r_on) = (off / reference, on / reference);
        ok &= (r_off * lambda - 1.0).abs() <= 0.1 && (r_on - 1.0).abs() <= 0.1;
        detail.push(format!(
            "lambda {lambda}: off ratio {r_off:.4} (1/lambda {:.4}), on ratio {r_on:.4}",
            1.0 / lambda
        ));
    }
    check(ok, detail.join("; "))
}

fn random_logits(rng: &mut Rng, rows: usize, text: usize, image: usize) -> JointLogits<f64> {
    JointLogits::new(
        RowMatrix::new(rows, text, rng.normal_vec(rows * text, 3.0)).unwrap(),
        RowMatrix::new(rows, image, rng.normal_vec(rows * image, 3.0)).unwrap(),
    )
    .unwrap()
}

fn structure() -> Outcome {
    let mut rng = Rng::new(301);
    let (lt, li, d) = (7, 57, 16);
    let mut stochastic = 0f64;
    let mut shift = 0f64;
    let mut order = true;
    let mut plain = 0f64;
    for _ in 0..20 {
        let s = random_logits(&mut rng, lt + li, lt, li);
        for (beta, tau) in [(0.0, 1.0), (1.5, 0.8), (2.7, 1.0)] {
            let p = anchored_attention(&s, beta, tau, d).unwrap();
            for r in 0..p.rows() {
                stochastic = stochastic.max((p.row(r).iter().sum::<f64>() - 1.0).abs());
            }
            let q = anchored_attention(&s.shifted(11.0), beta, tau, d).unwrap();
            shift = shift.max(p.max_abs_diff(&q));
            let p0 = anchored_attention(&s, 0.0, tau, d).unwrap();
            for r in 0..p.rows() {
                let rank = |row: &[f64]| {
                    let mut idx: Vec<usize> = (0..lt).collect();
                    idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
                    idx
                };
                order &= rank(p.row(r)) == rank(p0.row(r));
            }
        }
        let p = anchored_attention(&s, 0.0, 1.0, d).unwrap();
        for r in 0..p.rows() {
            let reference = softmax_row(&s.dense_row(r), 1.0 / (d as f64).sqrt(), None).unwrap();
            for (a, b) in p.row(r).iter().zip(&reference) {
                plain = plain.max((a - b).abs());
            }
        }
    }
    check(
        stochastic <= 1e-12 && shift <= 1e-12 && order && plain <= 1e-12,
        format!("row sum err {stochastic:.1e}, shift err {shift:.1e}, text order kept {order}, plain softmax err {plain:.1e}"),
    )
}

fn dynamic_schedule() -> Outcome {
    let p = TemperaturePolicy::<f64>::for_scale(TemperatureMode::DynamicPerFrequency, 4.0).unwrap();
    let mut ends = true;
    let mut monotone = true;
    for i in 0..=10 {
        let f = i as f64 / 10.0;
        ends &= dynamic_temperature(0.0, f, &p).unwrap() == p.tau_max
            && dynamic_temperature(1.0, f, &p).unwrap() == p.tau_min;
        let mut prev = f64::INFINITY;
        for k in 0..=200 {
            let tau = dynamic_temperature(k as f64 / 200.0, f, &p).unwrap();
            monotone &= tau <= prev;
            prev = tau;
        }
    }
    let a = (
        alpha_of_frequency(0.0, &p).unwrap(),
        alpha_of_frequency(1.0, &p).unwrap(),
    );
    let m0 = dynamic_temperature(0.5, 0.0, &p).unwrap();
    let m1 = dynamic_temperature(0.5, 1.0, &p).unwrap();
    check(
        ends && monotone
            && a == (0.6, 0.2)
            && (m0 - 0.849132).abs() <= 1e-5
            && (m1 - 0.800937).abs() <= 1e-5,
        format!(
            "endpoints {ends}, monotone {monotone}, alpha {a:?}, tau(0.5,0)={m0:.6} (want 0.849132, diff {:.1e}), tau(0.5,1)={m1:.6} (want 0.800937, diff {:.1e})",
            (m0 - 0.849132).abs(),
            (m1 - 0.800937).abs()
        ),
    )
}

fn time_shift() -> Outcome {
    let spec = TimeShiftSpec::default();
    let log = spec.with_mode(ShiftMode::Logarithmic);
    let lin = spec.with_mode(ShiftMode::LinearDefault);
    let m256: f64 = shift_mu(256, &log).unwrap();
    let m4096: f64 = shift_mu(4096, &log).unwrap();
    let m65536: f64 = shift_mu(65536, &log).unwrap();
    let l65536: f64 = shift_mu(65536, &lin).unwrap();
    let spec28 = TimeShiftSpec { steps: 28, ..spec };
    let grids: Vec<Vec<f64>> = [0.5, 1.15, 1.8]
        .iter()
        .map(|&mu| shifted_timesteps(&spec28, mu).unwrap())
        .collect();
    let ends = grids.iter().all(|g| g[0] == 1.0 && g[28] == 0.0);
    let dense = grids
        .windows(2)
        .all(|w| w[0].iter().zip(&w[1]).all(|(a, b)| b >= a));
    check(
        m256 == 0.5
            && m4096 == 1.15
            && (m65536 - 1.8).abs() <= 1e-9
            && (11.0..=12.0).contains(&l65536)
            && ends
            && dense,
        format!("mu_log 256/4096/65536 = {m256}/{m4096}/{m65536}, mu_linear(65536) = {l65536:.4}, endpoints {ends}, mu-monotone {dense}"),
    )
}

fn band_equivalence() -> Outcome {
    let spec = RopeSpec::<f64> {
        head_dim: 2,
        axis_split: [2, 0],
        ..RopeSpec::default()
    };
    let tables = axis_tables(&spec).unwrap();
    let layout = TokenLayout::new(5, 6, 7).unwrap();
    let pos = joint_positions(5, 6, 7);
    let policy = TemperaturePolicy::for_scale(TemperatureMode::DynamicPerFrequency, 4.0).unwrap();
    let mut rng = Rng::new(801);
    let mut worst = 0f64;
    for _ in 0..10 {
        let q = RowMatrix::new(47, 2, rng.normal_vec(94, 2.0)).unwrap();
        let k = RowMatrix::new(47, 2, rng.normal_vec(94, 2.0)).unwrap();
        for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let band = band_scale_factors(&tables, t, &policy).unwrap();
            let tau = dynamic_temperature(t, 1.0, &policy).unwrap();
            let banded = joint_logits(
                &rotate(&q, &pos, &tables, Some(&band)).unwrap(),
                &rotate(&k, &pos, &tables, Some(&band)).unwrap(),
                &layout,
            )
            .unwrap();
            let plain = joint_logits(
                &rotate(&q, &pos, &tables, None).unwrap(),
                &rotate(&k, &pos, &tables, None).unwrap(),
                &layout,
            )
            .unwrap();
            let a = anchored_attention(&banded, 0.0, 1.0, 2).unwrap();
            let b = anchored_attention(&plain, 0.0, tau, 2).unwrap();
            worst = worst.max(a.max_abs_diff(&b));
        }
    }
    check(
        worst <= 1e-12,
        format!("max |P_band - P_global| = {worst:.1e}"),
    )
}

fn toy_harness() -> Outcome {
    let start = Instant::now();
    let seeds = 10u64;
    let acc = Accumulation::default();
    let ln16 = 16f64.ln();
    let (mut gaps, mut trained, mut off, mut on) = (vec![], vec![], vec![], vec![]);
    let mut neutral = 0f64;
    for seed in 0..seeds {
        let cfg = ToyDitConfig {
            seed,
            ..ToyDitConfig::default()
        };
        let base = ToyDit::<f64>::random(cfg).unwrap();
        let text = text_tokens(base.config(), seed);
        let small = LatentGrid::<f64>::noise(16, 16, 3, seed, 1);
        let large = LatentGrid::<f64>::noise(64, 64, 3, seed, 1);
        let direct = base.with_preset(MethodPreset::Direct);
        let tide = base.with_preset(MethodPreset::Tide);
        let summary = |m: &ToyDit<f64>, x: &LatentGrid<f64>| {
            let stats = accumulate_stats(m, x, &text, &acc).unwrap();
            let n = stats.len() as f64;
            (
                stats.iter().map(|s| s.stats.mean_text_mass).sum::<f64>() / n,
                stats.iter().map(|s| s.stats.mean_entropy()).sum::<f64>() / n,
            )
        };
        let (m16, h16) = summary(&direct, &small);
        let (m64, h64) = summary(&direct, &large);
        let (t64, _) = summary(&tide, &large);
        gaps.push(h64 - h16);
        trained.push(m16);
        off.push(m64);
        on.push(t64);

        let a = tide.euler_sample(&small, &text, false).unwrap();
        let b = direct.euler_sample(&small, &text, false).unwrap();
        for (x, y) in a.latent.data.iter().zip(&b.latent.data) {
            neutral = neutral.max((x - y).abs());
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gap = mean(&gaps);
    let deficit = mean(&trained) / mean(&off);
    let restored = mean(&on) / mean(&trained);
    let secs = start.elapsed().as_secs_f64();
    check(
        (gap - ln16).abs() <= 0.15
            && deficit >= 5.0
            && (0.5..=2.0).contains(&restored)
            && neutral <= 1e-6
            && secs < 300.0,
        format!(
            "{seeds} seeds: entropy gap {gap:.4} (ln 16 = {ln16:.4}), off deficit {deficit:.2}x, on/trained mass {restored:.3}, s=1 max diff {neutral:.1e}, {secs:.0} s"
        ),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            let mut bytes = std::fs::read(e.path()).unwrap();
            if e.file_name() == "bench.csv" {
                // Wall-clock timings are the only non-deterministic column.
                let text = String::from_utf8(bytes).unwrap();
                bytes = text
                    .lines()
                    .map(|l| {
                        let mut c: Vec<&str> = l.split(',').collect();
                        c.remove(2);
                        c.join(",") + "\n"
                    })
                    .collect::<String>()
                    .into_bytes();
            }
            (e.file_name().to_string_lossy().into_owned(), bytes)
        })
        .collect()
}

fn reproducible() -> Outcome {
    let runs: [(&str, &[&str]); 4] = [
        ("schedule", &[]),
        ("analyze", &[]),
        ("sample", &["--set", "model.timeshift.steps=8"]),
        (
            "bench",
            &[
                "--set",
                "bench.lengths=[512,2048]",
                "--set",
                "bench.rows=64",
            ],
        ),
    ];
    let mut ok = true;
    let mut detail = Vec::new();
    for (cmd, extra) in runs {
        let outs: Vec<_> = (0..2)
            .map(|_| {
                let dir = tempfile::tempdir().unwrap();
                let mut args = vec!["tide", cmd];
                args.extend_from_slice(extra);
                args.extend(["--seed", "7", "--out", dir.path().to_str().unwrap()]);
                if let Err(e) = tide_cli::run(args) {
                    panic!("tide {cmd} failed: {e}");
                }
                snapshot(dir.path())
            })
            .collect();
        let same = outs[0] == outs[1];
        ok &= same;
        detail.push(format!(
            "{cmd} {} files {}",
            outs[0].len(),
            if same { "identical" } else { "DIFFER" }
        ));
    }
    check(ok, detail.join(", "))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("yarn temperature golden values", yarn_golden),
        ("text bias curve", bias_curve),
        ("entropy law", entropy_law),
        ("text mass restoration", mass_restoration),
        ("anchored attention structure", structure),
        ("dynamic temperature schedule", dynamic_schedule),
        ("time shift schedule", time_shift),
        ("per-frequency equivalence", band_equivalence),
        ("toy model end to end", toy_harness),
        ("cli reproducibility", reproducible),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS criterion {} {name}: {d} [{secs:.1} s]", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {} {name}: {d} [{secs:.1} s]", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
