//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints its own PASS/FAIL line; exits non-zero if any fails.

use std::path::Path;
use std::time::{Duration, Instant};

use mh2f::datapipe::{augment, index_dataset, load_pairs, make_batches, sample_patch, ImagePair, NamingScheme};
use mh2f::losses::{hybrid_graph, l1_loss, ssim_loss, ssim_reference, SsimParams};
use mh2f::ops::{Ops, Tape};
use mh2f::params::ParamStore;
use mh2f::rainsim::{apply_rain, generate_dataset, RainParams};
use mh2f::trainer::{
    evaluate_model, load_checkpoint, run_ablation, run_verification, save_checkpoint, ssim_oracle_check,
    AblationGrid, GradCheckOptions, TrainConfig, Trainer,
};
use mh2f::{ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn synthetic_clean(i: usize, size: usize) -> Tensor<f32> {
    let f = 1.0 + i as f32 * 0.37;
    let n = size as f32;
    Tensor::from_fn([1, 3, size, size], |[_, c, y, x]| {
        let (yf, xf) = (y as f32 / n, x as f32 / n);
        let v = 0.45
            + 0.25 * ((f * 3.0 * xf + c as f32).sin() * (2.0 * f * yf).cos())
            + 0.15 * (xf - yf) * (c as f32 - 1.0);
        v.clamp(0.05, 0.95)
    })
}

fn rained_pairs(n: usize, size: usize, rain: &RainParams) -> Result<Vec<ImagePair>, String> {
    (0..n)
        .map(|i| {
            let clean = synthetic_clean(i, size);
            let (rainy, _) = apply_rain(
                &clean,
                &RainParams {
                    seed: i as u64,
                    ..rain.clone()
                },
            )
            .map_err(err)?;
            Ok(ImagePair {
                name: format!("{i}"),
                rainy,
                clean,
            })
        })
        .collect()
}

fn param_bits(store: &ParamStore<f32>) -> Vec<u32> {
    store.iter().flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits())).collect()
}

fn gradient_verification() -> Outcome {
    let budget = Duration::from_secs(120);
    let report = run_verification(&GradCheckOptions::default()).map_err(err)?;
    let worst = report.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max);
    for b in &report.blocks {
        ensure(b.passed, || b.summary())?;
        // The loss needs an 11x11 SSIM window, so only network blocks are bounded.
        if b.block != "hybrid_loss" {
            ensure(b.input_shape.iter().product::<usize>() <= 8 * 8 * 8, || {
                format!("{} checked at {:?}, larger than 1x8x8x8", b.block, b.input_shape)
            })?;
        }
    }
    ensure(report.ssim.passed, || report.ssim.summary())?;
    ensure(report.elapsed < budget, || format!("took {:.1?}", report.elapsed))?;
    Ok(format!(
        "{} blocks, max rel err {worst:.2e} < 1e-3, {:.1?}",
        report.blocks.len(),
        report.elapsed
    ))
}

fn ssim_oracle() -> Outcome {
    let r = ssim_oracle_check(20, 32, 2024).map_err(err)?;
    ensure(r.images == 20, || format!("{} images", r.images))?;
    ensure(r.max_abs_diff < 1e-6, || format!("max |fast - reference| {:e}", r.max_abs_diff))?;
    ensure(r.max_self_dev < 1e-12, || format!("max |SSIM(a,a) - 1| {:e}", r.max_self_dev))?;
    ensure(r.symmetric, || "SSIM(a,b) != SSIM(b,a)".into())?;
    Ok(format!(
        "max diff {:.1e}, self dev {:.1e}, symmetric",
        r.max_abs_diff, r.max_self_dev
    ))
}

fn loss_identity() -> Outcome {
    let lambda = TrainConfig::default().lambda;
    ensure(lambda == 0.2, || format!("default lambda {lambda}"))?;
    let p = SsimParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let shape = [rng.gen_range(1..3), 3, rng.gen_range(11..17), rng.gen_range(11..17)];
        let a = Tensor::<f64>::from_fn(shape, |_| rng.gen_range(0.0..1.0));
        let b = Tensor::<f64>::from_fn(shape, |_| rng.gen_range(0.0..1.0));
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let (total, reported) = hybrid_graph(&mut tape, &va, &vb, lambda, &p).map_err(err)?;
        let graph_total = tape.scalar(&total);
        // Independent components: a plain loop and the per-window SSIM.
        let l1 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        let sl = 1.0 - ssim_reference(&a, &b, &p).map_err(err)?;
        let expected = l1 + 0.2 * sl;
        for (what, v) in [("graph total", graph_total), ("reported total", reported.total)] {
            let d = (v - expected).abs();
            worst = worst.max(d);
            ensure(d < 1e-9, || format!("{what} {v} vs l1 + 0.2 ssim_loss {expected}"))?;
        }
        ensure((reported.l1 - l1_loss(&a, &b).map_err(err)?).abs() < 1e-12, || "l1 component".into())?;
        ensure((reported.ssim_loss - ssim_loss(&a, &b, &p).map_err(err)?).abs() < 1e-12, || "ssim component".into())?;
    }
    Ok(format!("100 pairs, max |total - (l1 + 0.2 ssim_loss)| {worst:.1e}"))
}

fn overfit() -> Outcome {
    let rain = RainParams {
        density: 0.04,
        intensity: 0.9,
        length_px: 11,
        ..RainParams::default()
    };
    let pairs = rained_pairs(8, 64, &rain)?;
    let config = TrainConfig {
        batch_size: 2,
        patch_size: 64,
        epochs: usize::MAX / 4,
        max_iters: Some(2000),
        model: ModelConfig::micro(2, 16),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config).map_err(err)?;
    let start = Instant::now();
    let budget = Duration::from_secs(15 * 60);
    let mut best = 0.0f64;
    while trainer.progress.iteration < 2000 {
        trainer.run_steps(&pairs, 100).map_err(err)?;
        let psnr = evaluate_model(&trainer.model, &pairs).map_err(err)?.mean_psnr;
        best = best.max(psnr);
        ensure(start.elapsed() < budget, || format!("over 15 minutes at iteration {}", trainer.progress.iteration))?;
        if psnr >= 30.0 {
            return Ok(format!(
                "{psnr:.2} dB at iteration {} ({:.1?})",
                trainer.progress.iteration,
                start.elapsed()
            ));
        }
    }
    Err(format!("best {best:.2} dB after 2000 iterations"))
}

fn ablation_structure() -> Outcome {
    let base = TrainConfig {
        batch_size: 1,
        patch_size: 16,
        epochs: 1,
        max_iters: Some(2),
        model: ModelConfig {
            dcr_units_per_stream: 1,
            ..ModelConfig::micro(2, 8)
        },
        ..TrainConfig::default()
    };
    let train = rained_pairs(2, 16, &RainParams::default())?;
    let mut notes = Vec::new();
    for (grid, rows) in [
        (AblationGrid::depths(&[4, 6, 8, 10]), 4),
        (AblationGrid::distillation_and_fusion(), 4),
        (AblationGrid::fusion(), 3),
    ] {
        let table = run_ablation(&base, &grid, &train, None).map_err(err)?;
        ensure(table.rows.len() == rows, || format!("{} rows", table.rows.len()))?;
        for r in &table.rows {
            ensure(r.error.is_none() && r.psnr_db.is_some() && r.ssim.is_some() && r.param_count.is_some(), || {
                format!("incomplete row {}: {:?}", r.variant, r.error)
            })?;
        }
        ensure(table.to_csv().lines().count() == rows + 1, || "csv rows".into())?;
        for c in table.structure_checks() {
            ensure(c.passed, || c.description.clone())?;
            notes.push(c.description);
        }
    }
    ensure(notes.iter().any(|n| n.contains("increases with N")), || "no depth check ran".into())?;
    ensure(notes.iter().any(|n| n.contains("with HADB")), || "no distillation check ran".into())?;
    let full = |use_hadb| {
        mh2f::blocks::param_count(&ModelConfig {
            use_hadb,
            fusion_mode: mh2f::FusionMode::Concat,
            ..ModelConfig::default()
        })
    };
    let (with, without) = (full(true).map_err(err)?, full(false).map_err(err)?);
    ensure(with < without, || format!("full-size HADB {with} >= {without}"))?;
    Ok(format!(
        "{}; full size N=8 concat: {with} vs {without} params (ratio {:.3})",
        notes.join("; "),
        with as f64 / without as f64
    ))
}

fn determinism_and_resume() -> Outcome {
    let pairs = rained_pairs(4, 24, &RainParams::default())?;
    let config = TrainConfig {
        batch_size: 2,
        patch_size: 16,
        epochs: 100,
        seed: 5,
        model: ModelConfig {
            dcr_units_per_stream: 1,
            ..ModelConfig::micro(2, 8)
        },
        ..TrainConfig::default()
    };
    // 2 batches per epoch, so 5 steps stop mid-epoch.
    let run = |n| -> Result<Trainer, String> {
        let mut t = Trainer::new(config.clone()).map_err(err)?;
        t.run_steps(&pairs, n).map_err(err)?;
        Ok(t)
    };
    let a = run(10)?;
    let b = run(10)?;
    ensure(a.log.iterations_csv() == b.log.iterations_csv() && a.log == b.log, || "logs differ".into())?;
    ensure(param_bits(&a.model.params) == param_bits(&b.model.params), || "weights differ".into())?;

    let dir = TempDir::new().map_err(err)?;
    let path = dir.path().join("half.ckpt");
    let first = run(5)?;
    save_checkpoint(&first.checkpoint(), &path).map_err(err)?;
    let mut resumed = Trainer::from_checkpoint(load_checkpoint(&path).map_err(err)?).map_err(err)?;
    resumed.run_steps(&pairs, 5).map_err(err)?;
    ensure(resumed.progress == a.progress, || format!("{:?} vs {:?}", resumed.progress, a.progress))?;
    let mut joined = first.log.iterations.clone();
    joined.extend(resumed.log.iterations.iter().cloned());
    ensure(joined == a.log.iterations, || "resumed losses differ from the straight run".into())?;
    ensure(param_bits(&resumed.model.params) == param_bits(&a.model.params), || "resumed weights differ".into())?;
    ensure(resumed.optimizer == a.optimizer, || "optimizer state differs".into())?;
    Ok("10 = 10 bit-exact; 5 + save/load + 5 = 10 bit-exact".into())
}

fn pipeline_alignment() -> Outcome {
    let dry = RainParams {
        density: 0.0,
        ..RainParams::default()
    };
    let pairs = rained_pairs(6, 40, &dry)?;
    for p in &pairs {
        ensure(p.rainy == p.clean, || format!("density 0 changed pair {}", p.name))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut flips, draws) = (0usize, 10_000usize);
    for i in 0..draws {
        let (mut r, mut c) = sample_patch(&pairs[i % pairs.len()], 16, &mut rng).map_err(err)?;
        flips += augment(&mut r, &mut c, &mut rng) as usize;
        ensure(r == c, || format!("draw {i} misaligned"))?;
    }
    let freq = flips as f64 / draws as f64;
    ensure((0.45..=0.55).contains(&freq), || format!("flip frequency {freq}"))?;
    // The batch path used by training.
    let mut patches = 0;
    let mut epoch = 0;
    while patches < draws {
        for batch in make_batches(&pairs, 5, 16, 3, epoch).map_err(err)? {
            let batch = batch.map_err(err)?;
            ensure(batch.rainy == batch.clean, || format!("batch misaligned in epoch {epoch}"))?;
            patches += batch.rainy.shape()[0];
        }
        epoch += 1;
    }
    Ok(format!("{draws} patches + {patches} batched patches equal; flip frequency {freq:.4}"))
}

fn write_clean_dir(dir: &Path, n: usize) -> Result<(), String> {
    std::fs::create_dir_all(dir).map_err(err)?;
    for i in 0..n {
        mh2f::imageio::save_png(&dir.join(format!("c{i}.png")), &synthetic_clean(i, 32)).map_err(err)?;
    }
    Ok(())
}

fn rain_properties() -> Outcome {
    let mut checked = 0usize;
    for s in 0..20u64 {
        let clean = synthetic_clean(s as usize, 32);
        let zero = RainParams {
            density: 0.0,
            seed: s,
            ..RainParams::default()
        };
        let (rainy, rain) = apply_rain(&clean, &zero).map_err(err)?;
        ensure(rainy == clean && rain.data().iter().all(|&v| v == 0.0), || format!("density 0, seed {s}"))?;
        let p = RainParams {
            density: 0.02 + 0.01 * (s % 5) as f64,
            angle_deg: -30.0 + 3.0 * s as f64,
            seed: s,
            ..RainParams::default()
        };
        let (rainy, rain) = apply_rain(&clean, &p).map_err(err)?;
        ensure(rain.data().iter().all(|v| (0.0..=1.0).contains(v)), || "rain layer outside [0, 1]".into())?;
        let [_, _, h, w] = clean.shape();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let pre = clean.at([0, c, y, x]) + rain.at([0, 0, y, x]);
                    let (b, o) = (clean.at([0, c, y, x]), rainy.at([0, c, y, x]));
                    ensure(pre >= b && o >= b && o == pre.min(1.0), || format!("seed {s} at {c},{y},{x}"))?;
                    checked += 1;
                }
            }
        }
    }
    let dir = TempDir::new().map_err(err)?;
    let clean_dir = dir.path().join("clean");
    write_clean_dir(&clean_dir, 3)?;
    let grid = [
        RainParams {
            seed: 11,
            ..RainParams::default()
        },
        RainParams {
            seed: 12,
            angle_deg: -20.0,
            density: 0.05,
            ..RainParams::default()
        },
    ];
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    generate_dataset(&clean_dir, &grid, &a).map_err(err)?;
    let manifest = generate_dataset(&clean_dir, &grid, &b).map_err(err)?;
    ensure(manifest.rows.len() == 6, || format!("{} manifest rows", manifest.rows.len()))?;
    let mut files = 0;
    for entry in std::fs::read_dir(&a).map_err(err)? {
        let name = entry.map_err(err)?.file_name();
        let same = std::fs::read(a.join(&name)).map_err(err)? == std::fs::read(b.join(&name)).map_err(err)?;
        ensure(same, || format!("{name:?} differs between regenerations"))?;
        files += 1;
    }
    ensure(files == 13, || format!("{files} files"))?;
    let index = index_dataset(&a, NamingScheme::Manifest).map_err(err)?;
    for pair in load_pairs(&index).map_err(err)? {
        ensure(
            pair.rainy.data().iter().zip(pair.clean.data()).all(|(r, c)| r >= c),
            || format!("{} has rainy < clean on disk", pair.name),
        )?;
    }
    Ok(format!("{checked} pixels rainy >= clean; {files} files regenerate byte-identical"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient verification", gradient_verification),
        ("ssim oracle equivalence", ssim_oracle),
        ("loss identity", loss_identity),
        ("overfit sanity", overfit),
        ("ablation structure", ablation_structure),
        ("determinism and resumption", determinism_and_resume),
        ("data pipeline alignment", pipeline_alignment),
        ("rain model properties", rain_properties),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail} [{took:.1?}]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail} [{took:.1?}]", i + 1)
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
