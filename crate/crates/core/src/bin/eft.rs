use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use eft::config::RunConfig;
use eft::cost::growth_report;
use eft::data::{noise_batch, two_mode_images};
use eft::gan::{sample, train_gan_task, write_grid, GanConfig, GanPair};
use eft::plot::plot_curves;
use eft::run::{eval_run, read_curves, train_run, EvalMode};
use eft::{build_arch, CompositionMode, EftConvSpec, EftError};

/// Exit codes, one per failure class.
mod code {
    pub const OTHER: u8 = 1;
    pub const SCHEMA: u8 = 2;
    pub const MISSING_CHECKPOINT: u8 = 3;
    pub const UNWRITABLE: u8 = 4;
    pub const ASSERTION: u8 = 5;
}

#[derive(Parser)]
#[command(name = "eft", version, about = "Efficient feature transformations for continual learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a task sequence and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Recompute an accuracy matrix from a run's checkpoint.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "til")]
        mode: String,
        #[arg(long)]
        json: bool,
    },
    /// Parameter and FLOP accounting.
    Cost {
        #[arg(long)]
        arch: String,
        #[arg(long)]
        a: usize,
        #[arg(long)]
        b: usize,
        #[arg(long, default_value = "serial")]
        mode: String,
        #[arg(long, default_value_t = 1)]
        tasks: usize,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
        /// Also write the JSON report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot average accuracy against tasks seen.
    Plot {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy continual GAN on 2-mode synthetic image tasks.
    GanTrain {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        tasks: usize,
        #[arg(long, default_value_t = 4)]
        a: usize,
        #[arg(long, default_value_t = 8)]
        b: usize,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        samples: usize,
    },
    /// Sample a trained GAN task to a PNG grid.
    GanSample {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        task: usize,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<EftError>()) else {
        return code::OTHER;
    };
    match e {
        EftError::Config(_)
        | EftError::UnknownArchitecture(_)
        | EftError::UnknownDataset(_)
        | EftError::InvalidSpec(_)
        | EftError::InvalidSplit(_) => code::SCHEMA,
        EftError::MissingCheckpoint(_) => code::MISSING_CHECKPOINT,
        EftError::OutputNotWritable { .. } => code::UNWRITABLE,
        EftError::Assertion(_) | EftError::DigestMismatch { .. } => code::ASSERTION,
        _ => code::OTHER,
    }
}

fn parse_mode(s: &str) -> Result<CompositionMode> {
    match s {
        "serial" => Ok(CompositionMode::Serial),
        "parallel" => Ok(CompositionMode::Parallel),
        other => Err(EftError::Config(format!("unknown mode `{other}` (serial, parallel)")).into()),
    }
}

fn assertion(msg: String) -> anyhow::Error {
    EftError::Assertion(msg).into()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let (cfg, text) = RunConfig::from_path(&config)?;
            let (manifest, result) = train_run(&cfg, &text)?;
            for (t, s) in manifest.summaries.iter().enumerate() {
                println!(
                    "task {}: {} steps, train acc {:.3}, TIL avg {:.4}, CIL avg {:.4}",
                    s.task_id, s.steps, s.final_train_acc, manifest.til_averages[t], manifest.cil_averages[t]
                );
            }
            if !result.til.rows_constant() {
                return Err(assertion("TIL accuracy changed after a task was finalized".into()));
            }
            if !result.probes_replay_exactly()? {
                return Err(assertion("probe logits do not replay bit-identically".into()));
            }
            println!("wrote {}", cfg.out_dir.display());
        }
        Command::Eval { run, mode, json } => {
            let mode: EvalMode = mode.parse()?;
            let report = eval_run(&run, mode)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report.recomputed)?);
            } else {
                let n = report.recomputed.num_tasks();
                for i in 1..=n {
                    let row: Vec<String> = (1..=n)
                        .map(|t| report.recomputed.get(i, t).map_or("      -".into(), |v| format!("{:7.4}", v)))
                        .collect();
                    println!("task {i:>3}: {}", row.join(" "));
                }
                println!("average: {:?}", report.recomputed.averages());
            }
            if report.stored.is_some() && !report.matches_training() {
                return Err(assertion(format!("recomputed {mode:?} matrix differs from the training-time matrix")));
            }
            if !report.probes_replay {
                return Err(assertion("probe logits do not replay bit-identically".into()));
            }
            eprintln!("matches training-time matrix; probes replay exactly");
        }
        Command::Cost { arch, a, b, mode, tasks, json, out } => {
            let spec = EftConvSpec::new(a, b, parse_mode(&mode)?)?;
            let report = growth_report(&build_arch(&arch)?, &spec, tasks)?;
            let text = serde_json::to_string_pretty(&report)?;
            if json {
                println!("{text}");
            } else {
                print!("{}", report.render());
            }
            if let Some(path) = out {
                std::fs::write(&path, &text)
                    .map_err(|source| EftError::OutputNotWritable { path: path.clone(), source })?;
            }
        }
        Command::Plot { run, out } => {
            let curves = read_curves(&run)?;
            let title = format!("{} tasks", curves.til.len());
            plot_curves(&curves, &out, &title)?;
            println!("TIL {:?}\nCIL {:?}\nwrote {}", curves.til, curves.cil, out.display());
        }
        Command::GanTrain { out, tasks, a, b, epochs, seed, samples } => {
            let cfg = GanConfig { epochs, seed, ..GanConfig::default() };
            let mut pair = GanPair::new(EftConvSpec::serial(a, b)?, seed, cfg.probe_size)?;
            std::fs::create_dir_all(&out).map_err(|source| EftError::OutputNotWritable { path: out.clone(), source })?;
            for t in 1..=tasks {
                let data = two_mode_images(samples, pair.image_shape(), 0.05, seed, t);
                pair.add_task(cfg.init_policy)?;
                let s = train_gan_task(&mut pair, &data, &cfg)?;
                println!("gan task {t}: {} steps, D loss {:.4}, G loss {:.4}", s.steps, s.d_loss, s.g_loss);
                let grid = out.join(format!("task{t}.png"));
                write_grid(&grid, pair.samples.last().context("no samples recorded")?, 4, 4)
                    .map_err(|e| match e {
                        EftError::Render(m) => EftError::OutputNotWritable { path: grid.clone(), source: std::io::Error::other(m) },
                        other => other,
                    })?;
            }
            if !pair.probes_replay_exactly()? {
                return Err(assertion("GAN probe samples changed after finalization".into()));
            }
            pair.save(&out).map_err(|e| match e {
                EftError::Io { path, source } => EftError::OutputNotWritable { path, source },
                other => other,
            })?;
            println!("wrote {}", out.display());
        }
        Command::GanSample { run, task, n, seed, out } => {
            if !run.join("generator").join("manifest.json").exists() {
                return Err(EftError::MissingCheckpoint(run).into());
            }
            let pair = GanPair::load(&run)?;
            let noise = noise_batch(n, eft::backbones::GAN_NOISE_DIM, seed, 1 << 40);
            let images = sample(&pair, task, &noise)?;
            write_grid(&out, &images, 4.min(n.max(1)), 4)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
