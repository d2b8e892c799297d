use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use mstgnn::checkpoint::Checkpoint;
use mstgnn::data::{windows, DatasetSplit, MotionSequence, Synth, Window};
use mstgnn::gradcheck::GradCheckConfig;
use mstgnn::gradsuite::run_suite;
use mstgnn::metrics::{fmt6, mae};
use mstgnn::train::Trainer;
use mstgnn::{MstGnn, RunConfig, Tape, Tensor};

#[derive(Parser)]
#[command(
    name = "mstgnn",
    version,
    about = "Multiscale spatio-temporal graph network for skeleton motion prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic sinusoidal motion sequence as CSV.
    Synth {
        #[arg(long, default_value_t = 6)]
        joints: usize,
        #[arg(long, default_value_t = 40)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on every `.csv` sequence in a directory.
    Train {
        /// `key = value` run configuration; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-epoch metrics CSV.
        #[arg(long)]
        log: PathBuf,
        /// Fraction of each sequence's frames used for training.
        #[arg(long, default_value_t = 1.0)]
        train_frac: f64,
    },
    /// Predict the frames following the last observed window of a sequence.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-horizon MAE table as CSV on stdout.
    ///
    /// Either scores a checkpoint on every window of `--data` or compares
    /// two sequences given by `--pred` and `--truth`.
    Eval {
        #[arg(long, requires = "data", conflicts_with_all = ["pred", "truth"])]
        checkpoint: Option<PathBuf>,
        /// A CSV file or a directory of them.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, requires = "truth")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        truth: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite on a toy configuration.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Dump learned graphs and pooling operators of every encoder unit.
    ExportGraphs {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Observed sequence used to evaluate the input-dependent operators;
        /// its last `obs_len` frames are used. Synthetic data when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let mut cmd = Cli::command();
            cmd.build();
            let usage = match matches
                .subcommand_name()
                .and_then(|n| cmd.find_subcommand_mut(n))
            {
                Some(sub) => sub.render_usage(),
                None => cmd.render_usage(),
            };
            eprintln!("\n{usage}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth {
            joints,
            frames,
            seed,
            out,
        } => {
            let seq = Synth::new(joints, frames, seed).generate()?;
            emit(out.as_deref(), &seq.to_csv())?;
        }
        Command::Train {
            config,
            data,
            checkpoint,
            log,
            train_frac,
        } => train(config.as_deref(), &data, &checkpoint, &log, train_frac)?,
        Command::Predict {
            checkpoint,
            input,
            out,
        } => {
            let model = load_model(&checkpoint)?;
            let seq = MotionSequence::load(&input)?;
            let observed = last_frames(&seq, model.config().obs_len)?;
            let pred = model.predict(&observed)?;
            emit(
                out.as_deref(),
                &MotionSequence::new(seq.unit, pred)?.to_csv(),
            )?;
        }
        Command::Eval {
            checkpoint,
            data,
            stride,
            pred,
            truth,
        } => {
            let rows = match (checkpoint, data, pred, truth) {
                (Some(ck), Some(data), None, None) => eval_checkpoint(&ck, &data, stride)?,
                (None, None, Some(p), Some(t)) => {
                    let (p, t) = (MotionSequence::load(&p)?, MotionSequence::load(&t)?);
                    mae(&p.frames, &t.frames)
                        .context("comparing --pred with --truth")?
                        .per_horizon
                }
                _ => bail!("eval needs either --checkpoint with --data, or --pred with --truth"),
            };
            print!("{}", mae_table(&rows));
        }
        Command::Gradcheck { seed } => {
            let entries = run_suite(GradCheckConfig::default(), seed)?;
            println!("check,entries,max_rel_err,status");
            let mut failed = 0;
            for e in &entries {
                let ok = e.report.passed();
                failed += usize::from(!ok);
                println!(
                    "{},{},{:.3e},{}",
                    e.name,
                    e.report.entries_checked,
                    e.report.max_rel_err,
                    if ok { "ok" } else { "FAIL" }
                );
            }
            if failed > 0 {
                eprintln!("{failed} of {} gradient checks failed", entries.len());
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::ExportGraphs {
            checkpoint,
            input,
            out,
        } => export_graphs(&checkpoint, input.as_deref(), &out)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => Ok(io::stdout().write_all(text.as_bytes())?),
    }
}

fn load_model(path: &Path) -> Result<MstGnn> {
    Ok(Checkpoint::load(path)?.to_model()?)
}

fn last_frames(seq: &MotionSequence, n: usize) -> Result<Tensor> {
    if seq.len() < n {
        bail!("sequence has {} frames, the model observes {n}", seq.len());
    }
    Ok(seq.slice(seq.len() - n, seq.len())?.frames)
}

/// Sorted `.csv` files of a directory, or the path itself when it is a file.
fn load_sequences(path: &Path) -> Result<Vec<MotionSequence>> {
    if path.is_file() {
        return Ok(vec![MotionSequence::load(path)?]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .csv files in {}", path.display());
    }
    files.iter().map(|f| Ok(MotionSequence::load(f)?)).collect()
}

fn train(
    config: Option<&Path>,
    data: &Path,
    checkpoint: &Path,
    log: &Path,
    train_frac: f64,
) -> Result<()> {
    let run = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seqs = load_sequences(data)?;
    let m = &run.model;
    let split = DatasetSplit::from_sequences(
        &seqs,
        m.obs_len,
        m.pred_len,
        run.train.stride,
        train_frac,
        0.0,
    )?;
    if split.train.is_empty() {
        bail!(
            "no training windows: sequences need at least {} frames",
            m.obs_len + m.pred_len
        );
    }
    let mut trainer = Trainer::from_config(run.model.clone(), run.train.clone())?;
    let file = fs::File::create(log).with_context(|| format!("creating {}", log.display()))?;
    let mut out = BufWriter::new(file);
    let history = trainer.fit(&split.train, &mut out)?;
    out.flush()?;
    Checkpoint::from_trainer(&trainer).save(checkpoint)?;
    if let Some(last) = history.last() {
        eprintln!(
            "trained {} steps on {} windows, final loss {} mae {}",
            trainer.step_count(),
            split.train.len(),
            fmt6(last.total),
            fmt6(last.mae)
        );
    }
    Ok(())
}

fn eval_checkpoint(checkpoint: &Path, data: &Path, stride: usize) -> Result<Vec<f64>> {
    let model = load_model(checkpoint)?;
    let c = model.config();
    let mut all: Vec<Window> = Vec::new();
    for seq in load_sequences(data)? {
        all.extend(windows(&seq, c.obs_len, c.pred_len, stride)?);
    }
    if all.is_empty() {
        bail!("no evaluation windows of {} frames", c.obs_len + c.pred_len);
    }
    let mut sums = vec![0.0; c.pred_len];
    for w in &all {
        let report = mae(&model.predict(&w.observed)?, &w.future)?;
        for (s, v) in sums.iter_mut().zip(report.per_horizon) {
            *s += v;
        }
    }
    Ok(sums.into_iter().map(|s| s / all.len() as f64).collect())
}

fn mae_table(per_horizon: &[f64]) -> String {
    let mut s = String::from("horizon,mae\n");
    for (i, v) in per_horizon.iter().enumerate() {
        s.push_str(&format!("{},{}\n", i + 1, fmt6(*v)));
    }
    let mean = per_horizon.iter().sum::<f64>() / per_horizon.len() as f64;
    s.push_str(&format!("mean,{}\n", fmt6(mean)));
    s
}

fn matrix_csv(t: &Tensor) -> String {
    let mut s = String::new();
    for row in t.data().chunks(t.cols()) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

fn export_graphs(checkpoint: &Path, input: Option<&Path>, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let c = model.config();
    let observed = match input {
        Some(p) => last_frames(&MotionSequence::load(p)?, c.obs_len)?,
        None => {
            Synth {
                channels: c.channels,
                ..Synth::new(c.joints, c.obs_len, 0)
            }
            .generate()?
            .frames
        }
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let write = |name: String, t: &Tensor| {
        let path = out.join(name);
        fs::write(&path, matrix_csv(t)).with_context(|| format!("writing {}", path.display()))
    };
    let mut tape = Tape::new();
    let p = model.store().bind(&mut tape);
    let fwd = model.forward(&mut tape, &p, &observed, None)?;
    for (i, (unit, trace)) in model.encoder().units.iter().zip(&fwd.traces).enumerate() {
        write(
            format!("unit{i}_s0.csv"),
            model.store().get(unit.spatial_graph),
        )?;
        write(
            format!("unit{i}_t0.csv"),
            model.store().get(unit.temporal_graph),
        )?;
        for (r, ((&pool, &unpool), &graph)) in trace
            .pool
            .iter()
            .zip(&trace.unpool)
            .zip(&trace.coarse_graphs)
            .enumerate()
        {
            let r = r + 1;
            write(format!("unit{i}_psi_down{r}.csv"), tape.value(pool))?;
            write(format!("unit{i}_psi_up{r}.csv"), tape.value(unpool))?;
            write(format!("unit{i}_s{r}.csv"), tape.value(graph))?;
        }
    }
    Ok(())
}
