mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mh2f::datapipe::{index_dataset, load_pairs, NamingScheme};
use mh2f::imageio::{load_rgb, save_png};
use mh2f::metrics::{evaluate_pairs, EvalReport};
use mh2f::rainsim::{generate_dataset, list_images, RainParams};
use mh2f::trainer::{
    load_checkpoint, run_ablation, run_verification, AblationGrid, GradCheckOptions, Trainer, BEST_CHECKPOINT,
    LAST_CHECKPOINT,
};

use config::{render_train_config, CliConfigFile, RainOverrides, TrainOverrides};

pub const EVAL_REPORT_FILE: &str = "eval_report.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TEXT: &str = "ablation.txt";

/// Failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<mh2f::Error> for CliError {
    fn from(e: mh2f::Error) -> Self {
        use mh2f::Error::*;
        match e {
            Config(_) | Parse(_) | UnknownBlock { .. } => Self::usage(e.to_string()),
            _ => Self::runtime(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "mh2f", version, about = "Single-image deraining: train, derain, evaluate, synthesize, ablate, verify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a paired dataset.
    Train {
        /// Directory of rain-N/norain-N pairs (or a manifest, see --scheme).
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset scored after every epoch; keeps best.ckpt.
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = NamingScheme::RainNorain)]
        scheme: NamingScheme,
        /// Continue from a checkpoint; only --epochs and --max-iters may
        /// change the saved configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print the effective configuration and stop.
        #[arg(long)]
        dry_run: bool,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Derain one image or every image in a directory.
    Derain {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score derained images against ground truth.
    Eval {
        #[arg(long)]
        derained: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// CSV report path [default: <derained>/eval_report.csv]
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Render synthetic rain over clean images.
    Synth {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// File with one [rain] table or several [[rain]] tables.
        #[arg(long)]
        params: Option<PathBuf>,
        #[command(flatten)]
        rain: RainOverrides,
    },
    /// Train and compare model variants from a grid file.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = NamingScheme::RainNorain)]
        scheme: NamingScheme,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Gradient-check every block and compare SSIM against its reference.
    Verify {
        /// Perturb one analytic gradient; verification must then fail.
        #[arg(long)]
        corrupt_gradient: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::Train {
            data,
            eval,
            config,
            out,
            scheme,
            resume,
            dry_run,
            overrides,
        } => cmd_train(&data, eval.as_deref(), config.as_deref(), &out, scheme, resume.as_deref(), dry_run, &overrides),
        Command::Derain { input, checkpoint, out } => cmd_derain(&input, &checkpoint, &out),
        Command::Eval { derained, gt, report } => cmd_eval(&derained, &gt, report.as_deref()),
        Command::Synth { clean, out, params, rain } => cmd_synth(&clean, &out, params.as_deref(), &rain),
        Command::Ablate {
            data,
            grid,
            out,
            eval,
            config,
            scheme,
            overrides,
        } => cmd_ablate(&data, &grid, &out, eval.as_deref(), config.as_deref(), scheme, &overrides),
        Command::Verify { corrupt_gradient, seed } => cmd_verify(corrupt_gradient, seed),
    }
}

fn effective_config(path: Option<&Path>, overrides: &TrainOverrides) -> CliResult<mh2f::trainer::TrainConfig> {
    let mut cfg = CliConfigFile::load(path)?.train;
    overrides.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    eval: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
    scheme: NamingScheme,
    resume: Option<&Path>,
    dry_run: bool,
    overrides: &TrainOverrides,
) -> CliResult {
    let mut trainer = match resume {
        None => {
            let cfg = effective_config(config, overrides)?;
            print!("{}", render_train_config(&cfg));
            if dry_run {
                return Ok(());
            }
            Trainer::new(cfg)?
        }
        Some(ckpt) => {
            if config.is_some() {
                return Err(CliError::usage("--config cannot be combined with --resume"));
            }
            let ckpt = load_checkpoint(ckpt)?;
            let mut t = Trainer::from_checkpoint(ckpt)?;
            t.config.epochs = overrides.epochs.unwrap_or(t.config.epochs);
            t.config.max_iters = overrides.max_iters.or(t.config.max_iters);
            t.config.validate()?;
            print!("{}", render_train_config(&t.config));
            println!(
                "# resuming at epoch {}, batch {}, iteration {}",
                t.progress.epoch, t.progress.batch, t.progress.iteration
            );
            if dry_run {
                return Ok(());
            }
            t
        }
    };
    let train_index = index_dataset(data, scheme)?;
    let pairs = load_pairs(&train_index)?;
    let eval_pairs = match eval {
        Some(dir) => Some(load_pairs(&index_dataset(dir, scheme)?)?),
        None => None,
    };
    log::info!("training on {} pairs", pairs.len());
    trainer.run(&pairs, eval_pairs.as_deref(), Some(out))?;
    println!(
        "finished after {} iterations; wrote {}{}",
        trainer.progress.iteration,
        out.join(LAST_CHECKPOINT).display(),
        match trainer.best_psnr {
            Some(p) => format!(" and {} ({p:.3} dB)", out.join(BEST_CHECKPOINT).display()),
            None => String::new(),
        }
    );
    Ok(())
}

fn cmd_derain(input: &Path, checkpoint: &Path, out: &Path) -> CliResult {
    let files = if input.is_dir() {
        rainy_side(list_images(input)?)
    } else if input.is_file() {
        vec![input.to_path_buf()]
    } else {
        return Err(CliError::usage(format!("{}: no such file or directory", input.display())));
    };
    if files.is_empty() {
        return Err(CliError::runtime(format!("{}: no images found", input.display())));
    }
    let model = load_checkpoint(checkpoint)?.model()?;
    std::fs::create_dir_all(out).map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
    let mut failed = 0;
    for f in &files {
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let dst = out.join(format!("{stem}.png"));
        let result = load_rgb(f).and_then(|img| model.derain(&img)).and_then(|y| save_png(&dst, &y));
        match result {
            Ok(()) => println!("{} -> {}", f.display(), dst.display()),
            Err(e) => {
                failed += 1;
                eprintln!("error: {}: {e}", f.display());
            }
        }
    }
    if failed > 0 {
        return Err(CliError::runtime(format!("{failed} of {} images failed", files.len())));
    }
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Ground-truth stem candidates for a derained file: `rain-K` pairs with
/// `norain-K` first, then anything pairs with its own stem.
fn gt_candidates(derained_stem: &str) -> Vec<String> {
    let mut c = Vec::new();
    if let Some(rest) = derained_stem.strip_prefix("rain-") {
        c.push(format!("norain-{rest}"));
    }
    c.push(derained_stem.to_string());
    c
}

/// Drops `norain-K` files that sit next to a `rain-K`, so a paired
/// dataset directory is derained on its rainy side only.
fn rainy_side(files: Vec<PathBuf>) -> Vec<PathBuf> {
    let stems: std::collections::BTreeSet<String> = files.iter().map(|p| stem(p)).collect();
    files
        .into_iter()
        .filter(|p| match stem(p).strip_prefix("norain-") {
            Some(k) => !stems.contains(&format!("rain-{k}")),
            None => true,
        })
        .collect()
}

fn cmd_eval(derained: &Path, gt: &Path, report: Option<&Path>) -> CliResult {
    for d in [derained, gt] {
        if !d.is_dir() {
            return Err(CliError::usage(format!("{}: not a directory", d.display())));
        }
    }
    let gt_files: BTreeMap<String, PathBuf> = list_images(gt)?.into_iter().map(|p| (stem(&p), p)).collect();
    let report_path = report.map(Path::to_path_buf).unwrap_or_else(|| derained.join(EVAL_REPORT_FILE));
    let mut matched = Vec::new();
    let mut unmatched = Vec::new();
    for f in list_images(derained)? {
        match gt_candidates(&stem(&f)).iter().find_map(|s| gt_files.get(s)) {
            Some(g) => matched.push((f, g.clone())),
            None => unmatched.push(f),
        }
    }
    if !unmatched.is_empty() {
        for f in &unmatched {
            eprintln!("no ground truth for {}", f.display());
        }
        return Err(CliError::runtime(format!(
            "{} derained files have no ground truth in {}",
            unmatched.len(),
            gt.display()
        )));
    }
    if matched.is_empty() {
        return Err(CliError::runtime(format!("{}: no images found", derained.display())));
    }
    let mut triples = Vec::with_capacity(matched.len());
    for (d, g) in &matched {
        let name = d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        triples.push((name, load_rgb(d)?.cast::<f64>(), load_rgb(g)?.cast::<f64>()));
    }
    let report: EvalReport = evaluate_pairs(&triples)?;
    print!("{}", report.to_text());
    std::fs::write(&report_path, report.to_csv())
        .map_err(|e| CliError::runtime(format!("{}: {e}", report_path.display())))?;
    println!("wrote {}", report_path.display());
    Ok(())
}

fn cmd_synth(clean: &Path, out: &Path, params: Option<&Path>, rain: &RainOverrides) -> CliResult {
    let mut grid = CliConfigFile::load(params)?.rain;
    if grid.is_empty() {
        grid.push(RainParams::default());
    }
    for p in &mut grid {
        rain.apply(p);
        p.validate()?;
    }
    if !clean.is_dir() {
        return Err(CliError::usage(format!("{}: not a directory", clean.display())));
    }
    let manifest = generate_dataset(clean, &grid, out)?;
    println!(
        "wrote {} pairs ({} parameter sets) to {}",
        manifest.rows.len(),
        grid.len(),
        out.display()
    );
    Ok(())
}

fn cmd_ablate(
    data: &Path,
    grid_path: &Path,
    out: &Path,
    eval: Option<&Path>,
    config: Option<&Path>,
    scheme: NamingScheme,
    overrides: &TrainOverrides,
) -> CliResult {
    let base = effective_config(config, overrides)?;
    let text = std::fs::read_to_string(grid_path).map_err(|e| CliError::usage(format!("{}: {e}", grid_path.display())))?;
    let grid = AblationGrid::from_toml(&text).map_err(|e| CliError::usage(format!("{}: {e}", grid_path.display())))?;
    if grid.variants.is_empty() {
        return Err(CliError::usage(format!("{}: grid has no [[variant]] entries", grid_path.display())));
    }
    print!("{}", render_train_config(&base));
    let train = load_pairs(&index_dataset(data, scheme)?)?;
    let eval_pairs = match eval {
        Some(dir) => Some(load_pairs(&index_dataset(dir, scheme)?)?),
        None => None,
    };
    let table = run_ablation(&base, &grid, &train, eval_pairs.as_deref())?;
    std::fs::create_dir_all(out).map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
    let text = table.to_text();
    print!("{text}");
    let checks = table.structure_checks();
    let mut check_text = String::new();
    for c in &checks {
        check_text.push_str(&format!("{} {}\n", if c.passed { "PASS" } else { "FAIL" }, c.description));
    }
    print!("{check_text}");
    for (file, body) in [(ABLATION_CSV, table.to_csv()), (ABLATION_TEXT, text + &check_text)] {
        let p = out.join(file);
        std::fs::write(&p, body).map_err(|e| CliError::runtime(format!("{}: {e}", p.display())))?;
    }
    let failed_checks = checks.iter().filter(|c| !c.passed).count();
    if table.failures() > 0 || failed_checks > 0 {
        return Err(CliError::runtime(format!(
            "{} variants failed, {failed_checks} structure checks failed",
            table.failures()
        )));
    }
    Ok(())
}

fn cmd_verify(corrupt: bool, seed: u64) -> CliResult {
    let report = run_verification(&GradCheckOptions { corrupt, seed })?;
    for b in &report.blocks {
        println!("{}", b.summary());
        if !b.passed {
            print!("{}", b.table());
        }
    }
    println!("{}", report.ssim.summary());
    println!("elapsed {:.2?}", report.elapsed);
    if !report.passed() {
        return Err(CliError::runtime("verification failed"));
    }
    Ok(())
}
