//! Command-line driver: one subcommand per pipeline capability.
//!
//! Every command resolves its configuration (defaults, or a checkpoint's
//! stored configuration, then `--config`, then `--set`, then `--seed`),
//! writes the resolved keys to `<out>/config.txt` and only then starts work.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{Config, KeyValues};
use crate::data::{build_sequences, gen_synthetic, load_dataset, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_baseline, few_shot_curve, grad_check, sweep, GradTarget, SweepAxis};
use crate::mbae::{attention_legend, write_attention_dump};
use crate::pipeline::{
    infer_next_item, stage1_pretrain, stage2_train_ldm, stage3_finetune, Checkpoint, PreparedData, TrainLog,
};
use crate::stats::{entropy_report, joint_counts};

#[derive(Debug, Parser)]
#[command(name = "mbdiff", version, about = "Multi-behavior sequential recommendation by latent diffusion")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides train.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for every artifact of the run.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Extra configuration override, repeatable: --set model.d=32.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct DataArg {
    /// Interaction file (default: <out>/synthetic.tsv).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CheckpointArg {
    /// Checkpoint directory (default: the previous stage under <out>).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a planted synthetic dataset into <out>/synthetic.tsv.
    GenData {
        #[arg(long, default_value_t = 500)]
        users: usize,
        #[arg(long, default_value_t = 200)]
        items: usize,
        #[arg(long, default_value_t = 4)]
        behaviors: usize,
        #[arg(long, default_value_t = 5)]
        archetypes: usize,
        #[arg(long, default_value_t = 10)]
        cluster_size: usize,
        #[arg(long, default_value_t = 10)]
        min_len: usize,
        #[arg(long, default_value_t = 30)]
        max_len: usize,
        /// Comma-separated behavior frequencies (default: 0.4,0.2,0.2,0.2 for 4 behaviors, else uniform).
        #[arg(long, value_delimiter = ',')]
        freqs: Option<Vec<f64>>,
    },
    /// Behavior/item entropy and mutual information of a dataset.
    Entropy(DataArg),
    /// Stage 1: masked autoencoder pretraining.
    Pretrain(DataArg),
    /// Stage 2: latent diffusion training on a stage-1 checkpoint.
    TrainDiffusion {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        ckpt: CheckpointArg,
    },
    /// Stage 3: decoder fine-tuning on a stage-2 checkpoint.
    Finetune {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        ckpt: CheckpointArg,
    },
    /// Top-K next items for one user under one behavior.
    Infer {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// User id whose full history is the prefix.
        #[arg(long)]
        user: u32,
        /// Target behavior id.
        #[arg(long)]
        behavior: u32,
        /// Number of items; clipped to the catalog size.
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Leave-one-out evaluation of a fully trained checkpoint.
    Evaluate {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        ckpt: CheckpointArg,
    },
    /// Retrain with a fraction of one behavior's training interactions removed.
    FewShot {
        #[command(flatten)]
        data: DataArg,
        /// Target behavior (default: the last one).
        #[arg(long)]
        behavior: Option<u32>,
        /// Comma-separated fractions of that behavior to drop.
        #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.5,1")]
        ratios: Vec<f64>,
    },
    /// Train and evaluate once per value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        data: DataArg,
        /// rho, sigma, T, stride or omega.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Mean attention map of one user's sequence.
    AttnDump {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long)]
        user: u32,
    },
    /// Finite-difference gradient verification.
    GradCheck {
        /// linear, barope-attention, decoder-ce, mcgln-block, mbae, denoiser or all.
        #[arg(long, default_value = "all")]
        target: String,
        /// Maximum relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn resolve(mut cfg: Config, common: &Common) -> Result<Config> {
    if let Some(path) = &common.config {
        cfg.apply(&KeyValues::load(path)?)?;
    }
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates the output directory and writes the resolved configuration plus
/// the command's own arguments.
fn echo(out: &Path, cfg: &Config, command: &str, extra: &[(&str, String)]) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut kv = cfg.to_kv();
    kv.set("cli.command", command);
    for (k, v) in extra {
        kv.set(format!("cli.{k}"), v);
    }
    write(&out.join("config.txt"), kv.to_text())
}

fn data_path(arg: &DataArg, out: &Path) -> PathBuf {
    arg.data.clone().unwrap_or_else(|| out.join("synthetic.tsv"))
}

fn ckpt_path(arg: &CheckpointArg, out: &Path, stage: u8) -> PathBuf {
    arg.checkpoint.clone().unwrap_or_else(|| out.join(format!("stage{stage}")))
}

fn prepare(ds: &Dataset, cfg: &Config) -> Result<PreparedData> {
    PreparedData::new(&ds.header, &ds.users, &cfg.data)
}

fn save_stage(out: &Path, stage: u8, ckpt: &Checkpoint, log: &TrainLog) -> Result<()> {
    let dir = out.join(format!("stage{stage}"));
    ckpt.save(&dir)?;
    write(&out.join(format!("stage{stage}.log")), log.to_text())?;
    if let Some(last) = log.rows.last() {
        println!("stage {stage}: {} epochs, final loss {:.6}, saved to {}", log.rows.len(), last[1], dir.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let out = common.out.as_path();
    match &cli.command {
        Command::GenData {
            users,
            items,
            behaviors,
            archetypes,
            cluster_size,
            min_len,
            max_len,
            freqs,
        } => {
            let cfg = resolve(Config::default(), common)?;
            let frequencies = freqs.clone().unwrap_or_else(|| {
                if *behaviors == 4 {
                    vec![0.4, 0.2, 0.2, 0.2]
                } else {
                    vec![1.0 / *behaviors as f64; *behaviors]
                }
            });
            let spec = SyntheticSpec {
                num_users: *users,
                num_items: *items,
                num_behaviors: *behaviors,
                archetypes: *archetypes,
                seq_len_range: (*min_len, *max_len),
                behavior_frequencies: frequencies.clone(),
                cluster_size: *cluster_size,
                seed: cfg.train.seed,
                behavior_names: crate::data::default_behavior_names(*behaviors),
            };
            let fs: Vec<String> = frequencies.iter().map(f64::to_string).collect();
            echo(
                out,
                &cfg,
                "gen-data",
                &[
                    ("users", users.to_string()),
                    ("items", items.to_string()),
                    ("behaviors", behaviors.to_string()),
                    ("archetypes", archetypes.to_string()),
                    ("cluster_size", cluster_size.to_string()),
                    ("min_len", min_len.to_string()),
                    ("max_len", max_len.to_string()),
                    ("freqs", fs.join(",")),
                ],
            )?;
            let synth = gen_synthetic(&spec)?;
            let path = out.join("synthetic.tsv");
            synth.write(&path)?;
            let n: usize = synth.users.iter().map(|u| u.len()).sum();
            println!("wrote {n} interactions for {} users to {}", synth.users.len(), path.display());
        }
        Command::Entropy(d) => {
            let cfg = resolve(Config::default(), common)?;
            let path = data_path(d, out);
            echo(out, &cfg, "entropy", &[("data", path.display().to_string())])?;
            let ds = load_dataset(&path)?;
            let report = entropy_report(&joint_counts(ds.interactions())?);
            let kv = report.to_kv();
            print!("{}", kv.to_text());
            write(&out.join("entropy.txt"), format!("{}# {}\n", kv.to_text(), report.record()))?;
        }
        Command::Pretrain(d) => {
            let cfg = resolve(Config::default(), common)?;
            let path = data_path(d, out);
            echo(out, &cfg, "pretrain", &[("data", path.display().to_string())])?;
            let data = prepare(&load_dataset(&path)?, &cfg)?;
            let (ckpt, log) = stage1_pretrain(&data, &cfg)?;
            save_stage(out, 1, &ckpt, &log)?;
        }
        Command::TrainDiffusion { data: d, ckpt } => {
            let cp = ckpt_path(ckpt, out, 1);
            let prev = Checkpoint::load(&cp)?;
            let cfg = resolve(prev.config.clone(), common)?;
            let path = data_path(d, out);
            echo(
                out,
                &cfg,
                "train-diffusion",
                &[("data", path.display().to_string()), ("checkpoint", cp.display().to_string())],
            )?;
            let data = prepare(&load_dataset(&path)?, &cfg)?;
            let (next, log) = stage2_train_ldm(&data, &prev, &cfg)?;
            save_stage(out, 2, &next, &log)?;
        }
        Command::Finetune { data: d, ckpt } => {
            let cp = ckpt_path(ckpt, out, 2);
            let prev = Checkpoint::load(&cp)?;
            let cfg = resolve(prev.config.clone(), common)?;
            let path = data_path(d, out);
            echo(
                out,
                &cfg,
                "finetune",
                &[("data", path.display().to_string()), ("checkpoint", cp.display().to_string())],
            )?;
            let data = prepare(&load_dataset(&path)?, &cfg)?;
            let (next, log) = stage3_finetune(&data, &prev, &cfg)?;
            save_stage(out, 3, &next, &log)?;
        }
        Command::Infer {
            data: d,
            ckpt,
            user,
            behavior,
            k,
        } => {
            let cp = ckpt_path(ckpt, out, 3);
            let model = Checkpoint::load(&cp)?;
            let cfg = resolve(model.config.clone(), common)?;
            let path = data_path(d, out);
            echo(
                out,
                &cfg,
                "infer",
                &[
                    ("data", path.display().to_string()),
                    ("checkpoint", cp.display().to_string()),
                    ("user", user.to_string()),
                    ("behavior", behavior.to_string()),
                    ("k", k.to_string()),
                ],
            )?;
            let ds = load_dataset(&path)?;
            let history = ds
                .users
                .iter()
                .find(|u| u.user_id == *user)
                .ok_or_else(|| Error::Usage(format!("user {user} has no interactions in {}", path.display())))?;
            let vocab = ds.header.vocab();
            let seq = build_sequences(std::slice::from_ref(history), model.mbae.seq_len, &vocab)?.remove(0);
            let prefix = seq.push_slot(vocab.mask_token(), vocab.mask_token(), &vocab);
            let inf = infer_next_item(&model, &prefix, *behavior, *k, &cfg.guidance, cfg.train.seed)?;
            if inf.clipped {
                eprintln!("warning: k = {k} exceeds the catalog; returning {} items", inf.items.len());
            }
            let mut text = format!(
                "# user={user} behavior={} k={} clipped={}\n# rank item score\n",
                ds.header.behavior_name(*behavior as usize),
                inf.items.len(),
                inf.clipped
            );
            for (r, (item, score)) in inf.items.iter().zip(&inf.scores).enumerate() {
                text.push_str(&format!("{} {item} {score:.9}\n", r + 1));
            }
            print!("{text}");
            write(&out.join("infer.txt"), text)?;
        }
        Command::Evaluate { data: d, ckpt } => {
            let cp = ckpt_path(ckpt, out, 3);
            let model = Checkpoint::load(&cp)?;
            let cfg = resolve(model.config.clone(), common)?;
            let path = data_path(d, out);
            echo(
                out,
                &cfg,
                "evaluate",
                &[("data", path.display().to_string()), ("checkpoint", cp.display().to_string())],
            )?;
            let data = prepare(&load_dataset(&path)?, &cfg)?;
            let report = evaluate(&model, &data.tests, &cfg.eval.ks, &cfg.guidance, cfg.train.seed)?;
            let base = evaluate_baseline(&model.mbae, &data.header, &data.tests, &cfg.eval.ks)?;
            let mut kv = report.to_kv();
            for (k, v) in base.to_kv().iter() {
                kv.set(format!("baseline.{k}"), v);
            }
            let text = format!(
                "# guided diffusion\n{}\n# agnostic decode baseline\n{}",
                report.to_table(),
                base.to_table()
            );
            print!("{text}");
            write(&out.join("eval.txt"), &text)?;
            write(&out.join("eval.kv"), kv.to_text())?;
            write(&out.join("rankings.txt"), report.rankings_text())?;
        }
        Command::FewShot { data: d, behavior, ratios } => {
            let cfg = resolve(Config::default(), common)?;
            let path = data_path(d, out);
            let ds = load_dataset(&path)?;
            let b = behavior.unwrap_or(ds.header.num_behaviors.saturating_sub(1) as u32);
            if b as usize >= ds.header.num_behaviors {
                return Err(Error::Usage(format!("behavior {b} is not below |B| = {}", ds.header.num_behaviors)));
            }
            let rs: Vec<String> = ratios.iter().map(f64::to_string).collect();
            echo(
                out,
                &cfg,
                "few-shot",
                &[
                    ("data", path.display().to_string()),
                    ("behavior", b.to_string()),
                    ("ratios", rs.join(",")),
                ],
            )?;
            let points = few_shot_curve(&ds.header, &ds.users, b, ratios, &cfg)?;
            let mut text = format!("# behavior={}\n{:>6} {:>9}", ds.header.behavior_name(b as usize), "ratio", "remaining");
            for k in &cfg.eval.ks {
                text.push_str(&format!(" {:>9} {:>9}", format!("R@{k}"), format!("N@{k}")));
            }
            text.push('\n');
            for p in &points {
                text.push_str(&format!("{:>6} {:>9}", p.ratio, p.remaining));
                for (r, n) in p.report.overall.recall.iter().zip(&p.report.overall.ndcg) {
                    text.push_str(&format!(" {r:>9.4} {n:>9.4}"));
                }
                text.push('\n');
            }
            print!("{text}");
            write(&out.join("few_shot.txt"), text)?;
        }
        Command::Sweep { data: d, axis, values } => {
            let axis = SweepAxis::parse(axis)?;
            let cfg = resolve(Config::default(), common)?;
            let path = data_path(d, out);
            let vs: Vec<String> = values.iter().map(f64::to_string).collect();
            echo(
                out,
                &cfg,
                "sweep",
                &[
                    ("data", path.display().to_string()),
                    ("axis", axis.name().to_string()),
                    ("values", vs.join(",")),
                ],
            )?;
            let data = prepare(&load_dataset(&path)?, &cfg)?;
            let result = sweep(&data, &cfg, axis, values)?;
            for (v, why) in &result.skipped {
                eprintln!("warning: skipped {} = {v}: {why}", axis.name());
            }
            let table = result.to_table();
            print!("{table}");
            write(&out.join(format!("sweep_{}.txt", axis.name())), table)?;
            write(&out.join(format!("sweep_{}.svg", axis.name())), result.to_svg())?;
        }
        Command::AttnDump { data: d, ckpt, user } => {
            let cp = ckpt_path(ckpt, out, 3);
            let model = Checkpoint::load(&cp)?;
            let cfg = resolve(model.config.clone(), common)?;
            let path = data_path(d, out);
            echo(
                out,
                &cfg,
                "attn-dump",
                &[
                    ("data", path.display().to_string()),
                    ("checkpoint", cp.display().to_string()),
                    ("user", user.to_string()),
                ],
            )?;
            let ds = load_dataset(&path)?;
            let history = ds
                .users
                .iter()
                .find(|u| u.user_id == *user)
                .ok_or_else(|| Error::Usage(format!("user {user} has no interactions in {}", path.display())))?;
            let seq = build_sequences(std::slice::from_ref(history), model.mbae.seq_len, &ds.header.vocab())?.remove(0);
            let grid = model.mbae.attention_maps(&seq)?;
            let file = out.join(format!("attention_user{user}.txt"));
            write_attention_dump(&file, &grid, &attention_legend(&seq, &ds.header))?;
            println!("wrote {}", file.display());
        }
        Command::GradCheck { target, tolerance } => {
            let cfg = resolve(Config::default(), common)?;
            let targets = if target == "all" {
                GradTarget::ALL.to_vec()
            } else {
                vec![GradTarget::parse(target)?]
            };
            echo(
                out,
                &cfg,
                "grad-check",
                &[("target", target.clone()), ("tolerance", tolerance.to_string())],
            )?;
            let mut text = String::new();
            let mut failed = Vec::new();
            for t in targets {
                let report = grad_check(t, *tolerance, cfg.train.seed)?;
                text.push_str(&report.to_text());
                if !report.passed() {
                    failed.push(format!("{} ({:.3e})", t.name(), report.max_rel()));
                }
            }
            print!("{text}");
            write(&out.join("grad_check.txt"), text)?;
            if !failed.is_empty() {
                return Err(Error::Internal(format!(
                    "gradient error above {tolerance}: {}",
                    failed.join(", ")
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_file_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.txt");
        fs::write(&file, "model.d=32\ntrain.seed=3\nstage1.epochs=9\n").unwrap();
        let cli = Cli::try_parse_from([
            "mbdiff",
            "--config",
            file.to_str().unwrap(),
            "--seed",
            "5",
            "--set",
            "stage1.epochs=4",
            "grad-check",
        ])
        .unwrap();
        let cfg = resolve(Config::default(), &cli.common).unwrap();
        assert_eq!(cfg.model.d, 32);
        assert_eq!(cfg.train.seed, 5);
        assert_eq!(cfg.train.stage1.epochs, 4);
        assert_eq!(cfg.train.stage2.epochs, Config::default().train.stage2.epochs);
    }

    #[test]
    fn malformed_override_is_a_usage_error() {
        let cli = Cli::try_parse_from(["mbdiff", "--set", "nonsense", "grad-check"]).unwrap();
        assert!(matches!(resolve(Config::default(), &cli.common), Err(Error::Usage(_))));
    }

    #[test]
    fn unknown_subcommand_exits_nonzero() {
        assert_ne!(run(["mbdiff", "frobnicate"]), 0);
        assert_ne!(run(["mbdiff"]), 0);
    }
}
