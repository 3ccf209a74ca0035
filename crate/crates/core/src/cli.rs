//! Command-line front end. `run` drives the staged pipeline; the other
//! subcommands expose single stages over explicit files.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::aggregate::{label_dataset, AggregationMode, AggregationPolicy, TiePolicy};
use crate::config::ExperimentConfig;
use crate::diffusion::{sample, Checkpoint};
use crate::dpo::LossMode;
use crate::error::{Error, Result};
use crate::evalkit::{report, win_rate};
use crate::fsio::write_atomic;
use crate::pipeline::{
    check_checkpoint, evaluate_model, generate_pairs, pretrain_base, Pipeline, Stage,
};
use crate::prefcore::dataset::{read_dataset_with_header, write_dataset_with_header};
use crate::prefcore::{seeded_rng, Condition};
use crate::trainer::train;

#[derive(Debug, Parser)]
#[command(name = "balanced-dpo", version, about = "Multi-metric preference optimization for a toy diffusion model")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory for `run` and `report`.
    #[arg(long, global = true, default_value = "run")]
    pub out_dir: PathBuf,
    /// Recompute stages and overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the base denoiser on the configured mixture.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        /// Optional per-step loss CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Sample and score candidate pairs from a base checkpoint.
    GenPairs {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach votes and consensus labels to a dataset.
    Label {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// majority, vanilla_sum, normalized_sum, random_metric or single_metric.
        #[arg(long, default_value = "majority")]
        mode: String,
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        tie_policy: Option<String>,
    },
    /// Preference-optimize a checkpoint on a labeled dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        /// Loss mode; the first configured mode when omitted.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Draw samples from a checkpoint as CSV.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        condition: u32,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Best-of-N win rates of one checkpoint against another.
    Evaluate {
        #[arg(long)]
        ckpt_a: PathBuf,
        #[arg(long)]
        ckpt_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "a")]
        name_a: String,
        #[arg(long, default_value = "b")]
        name_b: String,
    },
    /// Summarize an evaluated run directory.
    Report,
    /// Run pipeline stages in a run directory.
    Run {
        /// Comma-separated stages; all when omitted.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
        /// Comma-separated training modes, overriding the configuration.
        #[arg(long, value_delimiter = ',')]
        mode: Option<Vec<String>>,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(g: &GlobalArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let mut c = ExperimentConfig::default();
            c.fill_defaults();
            c
        }
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn check_output(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::validation(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn load_checkpoint(cfg: &ExperimentConfig, path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    check_checkpoint(cfg, &ck)?;
    Ok(ck)
}

fn save_checkpoint(cfg: &ExperimentConfig, ck: Checkpoint, path: &Path) -> Result<()> {
    ck.with_extra("config", cfg.hash())
        .with_extra("seed", cfg.seed)
        .save(path)
}

fn execute(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let mut cfg = if matches!(cli.command, Command::Report) {
        ExperimentConfig::default()
    } else {
        load_config(g)?
    };
    let prov = cfg.provenance();
    match &cli.command {
        Command::Pretrain { out, metrics } => {
            check_output(out, g.force)?;
            let (params, losses) = pretrain_base(&cfg)?;
            save_checkpoint(&cfg, Checkpoint::new(params, cfg.diffusion.steps), out)?;
            if let Some(m) = metrics {
                write_atomic(m, |w: &mut dyn Write| {
                    writeln!(w, "# {prov}")?;
                    writeln!(w, "step,loss")?;
                    for (i, l) in losses.iter().enumerate() {
                        writeln!(w, "{},{l:?}", i + 1)?;
                    }
                    Ok(())
                })?;
            }
        }
        Command::GenPairs { ckpt, out } => {
            check_output(out, g.force)?;
            let base = load_checkpoint(&cfg, ckpt)?;
            let pairs = generate_pairs(&cfg, &base.params)?;
            let header = crate::prefcore::dataset::DatasetHeader::new(
                cfg.data.d,
                cfg.registry()?.metric_ids().clone(),
            )
            .with_extra("config", cfg.hash())
            .with_extra("seed", cfg.seed);
            write_dataset_with_header(&header, &pairs, out)?;
        }
        Command::Label {
            input,
            out,
            mode,
            weights,
            metric,
            tie_policy,
        } => {
            check_output(out, g.force)?;
            let base = cfg.labeling_policy();
            let mut policy = AggregationPolicy {
                mode: mode.parse::<AggregationMode>()?,
                chosen_metric: metric.clone(),
                ..base
            };
            if weights.is_some() {
                policy.weights = weights.clone();
            }
            if let Some(t) = tie_policy {
                policy.tie_policy = t.parse::<TiePolicy>()?;
            }
            let (mut header, pairs) = read_dataset_with_header(input)?;
            let stream = seeded_rng(cfg.seed).split("label").split(mode);
            let labeled = label_dataset(&pairs, &policy, &stream)?;
            if !g.quiet {
                eprintln!(
                    "labeled {} of {} pairs ({} skipped)",
                    labeled.pairs.len(),
                    pairs.len(),
                    labeled.skipped
                );
            }
            header = header.with_extra("config", cfg.hash()).with_extra("seed", cfg.seed);
            write_dataset_with_header(&header, &labeled.pairs, out)?;
        }
        Command::Train {
            data,
            init,
            out,
            metrics,
            mode,
        } => {
            check_output(out, g.force)?;
            let mode = match mode {
                Some(m) => m.parse::<LossMode>()?,
                None => cfg.train.modes[0].clone(),
            };
            let tc = cfg.train_config(mode.clone());
            let init = load_checkpoint(&cfg, init)?;
            let (_, pairs) = read_dataset_with_header(data)?;
            let stream = seeded_rng(cfg.seed).split("train").split(&mode.to_string());
            let (params, record) = train(&pairs, init.params, &cfg.schedule()?, &tc, &stream)?;
            save_checkpoint(&cfg, Checkpoint::new(params, cfg.diffusion.steps), out)?;
            record.write_csv(metrics, Some(&prov))?;
        }
        Command::Sample {
            ckpt,
            condition,
            n,
            out,
        } => {
            check_output(out, g.force)?;
            let c = Condition(*condition);
            c.check(cfg.data.num_conditions)?;
            let ck = load_checkpoint(&cfg, ckpt)?;
            let schedule = cfg.schedule()?;
            let stream = seeded_rng(cfg.seed).split("sample").split_index("condition", c.0 as u64);
            let xs = (0..*n)
                .map(|i| sample(&ck.params, &schedule, c, &stream.split_index("draw", i as u64)))
                .collect::<Result<Vec<_>>>()?;
            write_atomic(out, |w: &mut dyn Write| {
                writeln!(w, "# {prov}")?;
                let cols: Vec<String> = (0..cfg.data.d).map(|j| format!("x{j}")).collect();
                writeln!(w, "{}", cols.join(","))?;
                for x in &xs {
                    let vals: Vec<String> = x.0.iter().map(|v| format!("{v:?}")).collect();
                    writeln!(w, "{}", vals.join(","))?;
                }
                Ok(())
            })?;
        }
        Command::Evaluate {
            ckpt_a,
            ckpt_b,
            out,
            name_a,
            name_b,
        } => {
            check_output(out, g.force)?;
            let a = evaluate_model(&cfg, &load_checkpoint(&cfg, ckpt_a)?.params)?;
            let b = evaluate_model(&cfg, &load_checkpoint(&cfg, ckpt_b)?.params)?;
            let r = win_rate(name_a, &a, name_b, &b, cfg.eval.tie_value)?;
            report(&[r], out, Some(&prov))?;
        }
        Command::Report => {
            let saved = ExperimentConfig::load(&g.out_dir.join("config.toml"))?;
            let p = Pipeline::new(saved, &g.out_dir, true, g.quiet)?;
            p.report()?;
        }
        Command::Run { stages, mode } => {
            if let Some(modes) = mode {
                cfg.train.modes = modes
                    .iter()
                    .map(|m| m.parse::<LossMode>())
                    .collect::<Result<_>>()?;
            }
            let stages = match stages {
                Some(s) => s.iter().map(|s| s.parse::<Stage>()).collect::<Result<Vec<_>>>()?,
                None => Stage::ALL.to_vec(),
            };
            let p = Pipeline::new(cfg, &g.out_dir, g.force, g.quiet)?;
            p.run(&stages)?;
        }
    }
    Ok(())
}
