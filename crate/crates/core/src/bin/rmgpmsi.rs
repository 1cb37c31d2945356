use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rmgpmsi::ablation::{ablation_csv, ablation_table, run_ablation, Toggles};
use rmgpmsi::checkpoint::load_checkpoint;
use rmgpmsi::config::{LoadedData, RunConfig, OUT_ENV};
use rmgpmsi::data::{apply_transform, scan_dataset, Split, TransformMode};
use rmgpmsi::evalkit::{cam_file_name, evaluate, gradcam, robustness_eval, EvalReport};
use rmgpmsi::image::ImageTensor;
use rmgpmsi::rmg::{self, MosaicTrace, RmgConfig};
use rmgpmsi::trainer::{fit, FitOptions};
use rmgpmsi::{Error, Result};

/// Recursive mosaic generation and progressive multi-stage interactive
/// training for fine-grained classification.
#[derive(Debug, Parser)]
#[command(name = "rmgpmsi", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed (`train.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to $RMGPMSI_OUT, then `runs`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of epochs (`train.epochs`).
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// More logging (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, checkpoint.bin and config.txt.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many epochs are complete.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint; writes eval.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and compare component variants; writes ablation.csv/.txt.
    Ablate {
        /// Components to ablate over, e.g. `P,M,R`; every valid subset runs.
        #[arg(long, default_value = "P,M,R")]
        toggles: String,
    },
    /// Clean vs corrupted evaluation; writes robustness.csv/.txt.
    CorruptEval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Only the clean row.
        #[arg(long)]
        clean_only: bool,
    },
    /// Per-stage Grad-CAM heatmaps; writes `cams/<stem>_stage<n>_cam.<fmt>`.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input images; defaults to the first `--limit` evaluation samples.
        #[arg(long = "image")]
        images: Vec<PathBuf>,
        #[arg(long, default_value_t = 4)]
        limit: usize,
        /// Target class; the predicted class when omitted.
        #[arg(long)]
        target: Option<usize>,
    },
    /// Generate one mosaic image and its trace.
    Mosaic {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(short, long, default_value_t = 2)]
        r: u32,
        /// Replay this trace instead of sampling.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Permit depths above 3.
        #[arg(long)]
        allow_deep: bool,
    },
    /// Print the resolved configuration.
    Config,
    /// Scan `root/<split>/<class>/` and write the manifest.
    Scan {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
    },
}

fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(out) = std::env::var_os(OUT_ENV) {
        cfg.out = PathBuf::from(out);
    }
    if let Some(path) = &g.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = g.seed {
        cfg.set("train.seed", &seed.to_string())?;
    }
    if let Some(epochs) = g.epochs {
        cfg.set("train.epochs", &epochs.to_string())?;
    }
    if let Some(out) = &g.out {
        cfg.out = out.clone();
    }
    cfg.apply_overrides(&g.overrides)?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn report_csv(r: &EvalReport) -> String {
    let stages: Vec<String> = r.per_stage_acc.keys().map(|n| format!("acc_stage{n}")).collect();
    let values: Vec<String> = r.per_stage_acc.values().map(|v| format!("{v:.6}")).collect();
    let mut head = vec!["n_samples".to_string(), "acc_concat".into(), "acc_mix".into()];
    head.extend(stages);
    let mut row = vec![r.n_samples.to_string(), format!("{:.6}", r.acc_concat), format!("{:.6}", r.acc_mix)];
    row.extend(values);
    format!("{}\n{}\n", head.join(","), row.join(","))
}

fn load_data(cfg: &RunConfig) -> Result<LoadedData> {
    let data = cfg.data.load()?;
    if data.train.is_empty() {
        return Err(Error::DatasetEmpty);
    }
    Ok(data)
}

fn cmd_train(cfg: &mut RunConfig, resume: Option<&Path>, stop_after: Option<usize>) -> Result<()> {
    let data = load_data(cfg)?;
    cfg.model.classes = data.train.num_classes();
    cfg.model.stage_num = cfg.train.stage_num;
    fs::create_dir_all(&cfg.out)?;
    write(&cfg.out.join("config.txt"), &cfg.to_text())?;
    for m in &data.manifests {
        write(&cfg.out.join(format!("manifest_{}.tsv", m.split)), &m.to_text())?;
    }
    let resume = resume.map(load_checkpoint).transpose()?;
    let result = fit(
        &data.train,
        &cfg.model,
        &cfg.train,
        FitOptions {
            eval: data.test.as_ref(),
            resume,
            stop_after,
            checkpoint_path: Some(cfg.out.join("checkpoint.bin")),
            metrics_path: Some(cfg.out.join("metrics.csv")),
            early_stop: None,
        },
    )?;
    if let Some(r) = &result.last_eval {
        println!(
            "epoch {}: acc_concat {:.4} acc_mix {:.4}",
            result.epochs_completed, r.acc_concat, r.acc_mix
        );
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let mut ckpt = load_checkpoint(checkpoint)?;
    let data = load_data(cfg)?;
    let spec = ckpt.train.transform.with_mode(TransformMode::Eval);
    let report = evaluate(&mut ckpt.model, data.eval_set(), &spec)?;
    fs::create_dir_all(&cfg.out)?;
    let csv = report_csv(&report);
    write(&cfg.out.join("eval.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_ablate(cfg: &mut RunConfig, toggles: &str) -> Result<()> {
    let toggles: Toggles = toggles.parse()?;
    let data = load_data(cfg)?;
    cfg.model.classes = data.train.num_classes();
    let rows = run_ablation(&data.train, data.eval_set(), &cfg.model, &cfg.train, toggles)?;
    fs::create_dir_all(&cfg.out)?;
    write(&cfg.out.join("ablation.csv"), &ablation_csv(&rows))?;
    let table = ablation_table(&rows);
    write(&cfg.out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_corrupt(cfg: &RunConfig, checkpoint: &Path, clean_only: bool) -> Result<()> {
    let mut ckpt = load_checkpoint(checkpoint)?;
    let data = load_data(cfg)?;
    let spec = ckpt.train.transform.with_mode(TransformMode::Eval);
    let specs = if clean_only { Vec::new() } else { cfg.eval.corruptions() };
    let report = robustness_eval(&mut ckpt.model, data.eval_set(), &spec, &specs)?;
    fs::create_dir_all(&cfg.out)?;
    write(&cfg.out.join("robustness.csv"), &report.to_csv())?;
    let table = report.to_table();
    write(&cfg.out.join("robustness.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_viz(cfg: &RunConfig, checkpoint: &Path, paths: &[PathBuf], limit: usize, target: Option<usize>) -> Result<()> {
    let mut ckpt = load_checkpoint(checkpoint)?;
    let spec = ckpt.train.transform.with_mode(TransformMode::Eval);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let inputs: Vec<(String, ImageTensor)> = if paths.is_empty() {
        let data = load_data(cfg)?;
        data.eval_set()
            .samples
            .iter()
            .take(limit)
            .enumerate()
            .map(|(i, s)| Ok((s.name(i), s.load()?)))
            .collect::<Result<_>>()?
    } else {
        paths
            .iter()
            .map(|p| {
                let stem = p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
                Ok((stem, ImageTensor::open(p)?))
            })
            .collect::<Result<_>>()?
    };
    let dir = cfg.out.join("cams");
    fs::create_dir_all(&dir)?;
    let target = target.or(cfg.eval.target_class);
    for (stem, img) in inputs {
        let img = apply_transform(&img, &spec, &mut rng)?;
        for stage in ckpt.model.interacting_stages() {
            let cam = gradcam(&mut ckpt.model, &img, stage, target)?;
            let path = dir.join(cam_file_name(&stem, stage, &cfg.eval.cam_format));
            cam.save(&path)?;
            println!("{} (class {})", path.display(), cam.target_class);
        }
    }
    Ok(())
}

fn cmd_mosaic(cfg: &RunConfig, input: &Path, output: &Path, r: u32, trace: Option<&Path>, allow_deep: bool) -> Result<()> {
    let img = ImageTensor::open(input)?;
    let (out, trace) = match trace {
        Some(path) => {
            let trace = MosaicTrace::from_text(&fs::read_to_string(path)?)?;
            (rmg::replay(&img, &trace)?, trace)
        }
        None => {
            let config = RmgConfig {
                allow_deep,
                ..RmgConfig::new(r, cfg.train.seed)
            };
            rmg::generate(&img, &config)?
        }
    };
    out.save(output)?;
    print!("{}", trace.to_text());
    Ok(())
}

fn cmd_scan(cfg: &RunConfig, root: &Path, split: Split) -> Result<()> {
    let manifest = scan_dataset(root, split)?;
    fs::create_dir_all(&cfg.out)?;
    write(&cfg.out.join(format!("manifest_{split}.tsv")), &manifest.to_text())?;
    println!("{} classes, {} samples", manifest.classes.len(), manifest.samples.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve_config(&cli.global)?;
    match cli.command {
        Command::Train { resume, stop_after } => cmd_train(&mut cfg, resume.as_deref(), stop_after),
        Command::Eval { checkpoint } => cmd_eval(&cfg, &checkpoint),
        Command::Ablate { toggles } => cmd_ablate(&mut cfg, &toggles),
        Command::CorruptEval { checkpoint, clean_only } => cmd_corrupt(&cfg, &checkpoint, clean_only),
        Command::Viz {
            checkpoint,
            images,
            limit,
            target,
        } => cmd_viz(&cfg, &checkpoint, &images, limit, target),
        Command::Mosaic {
            input,
            output,
            r,
            trace,
            allow_deep,
        } => cmd_mosaic(&cfg, &input, &output, r, trace.as_deref(), allow_deep),
        Command::Scan { root, split } => cmd_scan(&cfg, &root, split),
        Command::Config => {
            print!("{}", cfg.to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
