//! End-to-end experiment: pretrain, gen-pairs, label, train, evaluate,
//! report. Each stage reads the artifacts of earlier stages from the run
//! directory and is skipped when its outputs already exist (unless forced).

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::aggregate::label_dataset;
use crate::config::ExperimentConfig;
use crate::diffusion::{pretrain, sample, Checkpoint, DenoiserParams};
use crate::dpo::LossMode;
use crate::error::{Error, Result};
use crate::evalkit::{
    best_scores_for_model, read_best_scores, report, win_rate, write_ablation, write_best_scores,
    AblationRow, BestScores, WinRateReport,
};
use crate::fsio::write_atomic;
use crate::prefcore::dataset::{read_dataset_with_header, write_dataset_with_header, DatasetHeader};
use crate::prefcore::{seeded_rng, Condition, PreferencePair, SeedStream};
use crate::trainer::{train, RunRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Pretrain,
    GenPairs,
    Label,
    Train,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Pretrain,
        Stage::GenPairs,
        Stage::Label,
        Stage::Train,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::GenPairs => "gen-pairs",
            Stage::Label => "label",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown stage `{s}`")))
    }
}

/// A trained model: its loss mode and whether the reference was refreshed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Variant {
    pub mode: LossMode,
    pub refresh: bool,
}

impl Variant {
    pub fn name(&self) -> String {
        if self.refresh {
            self.mode.slug()
        } else {
            format!("{}-noref", self.mode.slug())
        }
    }
}

pub const BASE_MODEL: &str = "base";
/// Steps averaged for the "final training loss" of a run.
pub const FINAL_LOSS_WINDOW: usize = 100;

/// Pretrains the base model described by `cfg`.
pub fn pretrain_base(cfg: &ExperimentConfig) -> Result<(DenoiserParams, Vec<f64>)> {
    let root = seeded_rng(cfg.seed);
    let init = DenoiserParams::init(cfg.arch(), &root.split("init"));
    let out = pretrain(
        init,
        &cfg.source(),
        &cfg.schedule()?,
        &cfg.pretrain,
        &root.split("pretrain"),
    )?;
    Ok((out.params, out.losses))
}

/// Two base-model samples per pair, `pairs_per_condition` pairs for every
/// condition, scored with the registry. Pair ids are condition-major.
pub fn generate_pairs(cfg: &ExperimentConfig, base: &DenoiserParams) -> Result<Vec<PreferencePair>> {
    let schedule = cfg.schedule()?;
    let registry = cfg.registry()?;
    let stream = seeded_rng(cfg.seed).split("gen-pairs");
    let per = cfg.data.pairs_per_condition;
    let mut pairs = Vec::with_capacity(per * cfg.data.num_conditions);
    for c in 0..cfg.data.num_conditions {
        let cond = Condition(c as u32);
        for j in 0..per {
            let id = (c * per + j) as u64;
            let s = stream.split_index("pair", id);
            let a = sample(base, &schedule, cond, &s.split("a"))?;
            let b = sample(base, &schedule, cond, &s.split("b"))?;
            let sa = registry.score_all(cond, &a)?;
            let sb = registry.score_all(cond, &b)?;
            pairs.push(PreferencePair::unlabeled(id, cond, a, b, sa, sb)?);
        }
    }
    Ok(pairs)
}

pub fn label_for_mode(
    cfg: &ExperimentConfig,
    pairs: &[PreferencePair],
    mode: &LossMode,
) -> Result<Vec<PreferencePair>> {
    let policy = mode.labeling_policy(&cfg.labeling_policy());
    let stream = seeded_rng(cfg.seed).split("label").split(&mode.to_string());
    Ok(label_dataset(pairs, &policy, &stream)?.pairs)
}

pub fn train_variant(
    cfg: &ExperimentConfig,
    labeled: &[PreferencePair],
    base: &DenoiserParams,
    variant: &Variant,
) -> Result<(DenoiserParams, RunRecord)> {
    let mut tc = cfg.train_config(variant.mode.clone());
    if !variant.refresh {
        tc.ref_update_interval = None;
    } else if tc.ref_update_interval.is_none() {
        return Err(Error::config(
            "train.ref_update_interval",
            "refresh variants need an interval >= 1",
        ));
    }
    // Refresh and no-refresh variants of a mode share their batch stream.
    let stream = seeded_rng(cfg.seed).split("train").split(&variant.mode.to_string());
    train(labeled, base.clone(), &cfg.schedule()?, &tc, &stream)
}

pub fn evaluate_model(cfg: &ExperimentConfig, params: &DenoiserParams) -> Result<BestScores> {
    best_scores_for_model(
        params,
        &cfg.schedule()?,
        &cfg.registry()?,
        &cfg.eval_config(),
        &eval_stream(cfg),
    )
}

fn eval_stream(cfg: &ExperimentConfig) -> SeedStream {
    seeded_rng(cfg.seed).split("eval")
}

/// Checks that a checkpoint fits the configured model and schedule.
pub fn check_checkpoint(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<()> {
    if ck.params.arch != cfg.arch() {
        return Err(Error::validation(format!(
            "checkpoint architecture {:?} does not match configuration {:?}",
            ck.params.arch,
            cfg.arch()
        )));
    }
    if ck.steps != cfg.diffusion.steps {
        return Err(Error::validation(format!(
            "checkpoint was trained with {} diffusion steps, configuration has {}",
            ck.steps, cfg.diffusion.steps
        )));
    }
    Ok(())
}

/// Stage runner over one run directory.
pub struct Pipeline {
    cfg: ExperimentConfig,
    dir: PathBuf,
    force: bool,
    quiet: bool,
}

impl Pipeline {
    /// Creates the run directory and writes the effective configuration.
    pub fn new(cfg: ExperimentConfig, dir: &Path, force: bool, quiet: bool) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let existing = dir.join("config.toml");
        if !force && existing.exists() {
            let mut prev = ExperimentConfig::load(&existing)?;
            // Mode lists may grow between invocations; everything else
            // must match the artifacts already on disk.
            prev.train.modes = cfg.train.modes.clone();
            prev.eval.ablation = cfg.eval.ablation;
            prev.eval.ablation_metric = cfg.eval.ablation_metric.clone();
            if prev != cfg {
                return Err(Error::validation(format!(
                    "{} holds a run with a different configuration; pass --force to overwrite",
                    dir.display()
                )));
            }
        }
        let p = Pipeline {
            cfg,
            dir: dir.to_path_buf(),
            force,
            quiet,
        };
        let cfg_text = p.cfg.to_toml();
        write_atomic(&p.path("config.toml"), |out: &mut dyn Write| {
            out.write_all(cfg_text.as_bytes())
        })?;
        Ok(p)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn log(&self, msg: &str) {
        if !self.quiet {
            eprintln!("[{}] {msg}", self.dir.display());
        }
    }

    fn provenance(&self) -> String {
        self.cfg.provenance()
    }

    /// Every model trained by the `train` stage.
    pub fn variants(&self) -> Vec<Variant> {
        let refresh = self.cfg.train.ref_update_interval > 0;
        let mut out: Vec<Variant> = self
            .cfg
            .train
            .modes
            .iter()
            .map(|m| Variant {
                mode: m.clone(),
                refresh,
            })
            .collect();
        if self.cfg.eval.ablation {
            for v in self.ablation_variants() {
                if !out.contains(&v) {
                    out.push(v);
                }
            }
        }
        out
    }

    fn ablation_metric(&self) -> String {
        self.cfg
            .eval
            .ablation_metric
            .clone()
            .unwrap_or_else(|| self.cfg.rewards[0].metric_id.clone())
    }

    /// (refresh, multi-metric) cells in the order (yes,yes), (no,yes),
    /// (yes,no), (no,no).
    fn ablation_variants(&self) -> Vec<Variant> {
        let single = LossMode::Single(self.ablation_metric());
        [
            (LossMode::Balanced, true),
            (LossMode::Balanced, false),
            (single.clone(), true),
            (single, false),
        ]
        .into_iter()
        .map(|(mode, refresh)| Variant { mode, refresh })
        .collect()
    }

    fn labeled_path(&self, mode: &LossMode) -> PathBuf {
        self.path(&format!("labeled_{}.pref", mode.slug()))
    }

    fn model_path(&self, name: &str) -> PathBuf {
        if name == BASE_MODEL {
            self.path("base.ckpt")
        } else {
            self.path(&format!("model_{name}.ckpt"))
        }
    }

    fn require(&self, stage: Stage, path: &Path) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::MissingStage {
                stage: stage.name().to_string(),
                path: path.to_path_buf(),
            })
        }
    }

    fn done(&self, outputs: &[PathBuf]) -> bool {
        !self.force && outputs.iter().all(|p| p.exists())
    }

    fn load_model(&self, name: &str, stage: Stage) -> Result<DenoiserParams> {
        let path = self.model_path(name);
        self.require(stage, &path)?;
        let ck = Checkpoint::load(&path)?;
        check_checkpoint(&self.cfg, &ck)?;
        Ok(ck.params)
    }

    fn save_model(&self, name: &str, params: &DenoiserParams) -> Result<()> {
        Checkpoint::new(params.clone(), self.cfg.diffusion.steps)
            .with_extra("config", self.cfg.hash())
            .with_extra("seed", self.cfg.seed)
            .save(&self.model_path(name))
    }

    fn dataset_header(&self) -> Result<DatasetHeader> {
        Ok(DatasetHeader::new(self.cfg.data.d, self.cfg.registry()?.metric_ids().clone())
            .with_extra("config", self.cfg.hash())
            .with_extra("seed", self.cfg.seed))
    }

    /// Runs `stages` in pipeline order.
    pub fn run(&self, stages: &[Stage]) -> Result<()> {
        let mut ordered = stages.to_vec();
        ordered.sort();
        ordered.dedup();
        for stage in ordered {
            match stage {
                Stage::Pretrain => self.pretrain()?,
                Stage::GenPairs => self.gen_pairs()?,
                Stage::Label => self.label()?,
                Stage::Train => self.train()?,
                Stage::Evaluate => self.evaluate()?,
                Stage::Report => self.report()?,
            }
        }
        Ok(())
    }

    pub fn pretrain(&self) -> Result<()> {
        let ckpt = self.model_path(BASE_MODEL);
        let metrics = self.path("pretrain_metrics.csv");
        if self.done(&[ckpt, metrics.clone()]) {
            self.log("pretrain: outputs exist, skipping");
            return Ok(());
        }
        self.log("pretrain: fitting base model");
        let (params, losses) = pretrain_base(&self.cfg)?;
        self.save_model(BASE_MODEL, &params)?;
        let prov = self.provenance();
        write_atomic(&metrics, |out: &mut dyn Write| {
            writeln!(out, "# {prov}")?;
            writeln!(out, "step,loss")?;
            for (i, l) in losses.iter().enumerate() {
                writeln!(out, "{},{l:?}", i + 1)?;
            }
            Ok(())
        })
    }

    pub fn gen_pairs(&self) -> Result<()> {
        let out = self.path("pairs.pref");
        if self.done(std::slice::from_ref(&out)) {
            self.log("gen-pairs: outputs exist, skipping");
            return Ok(());
        }
        let base = self.load_model(BASE_MODEL, Stage::Pretrain)?;
        self.log("gen-pairs: sampling candidate pairs");
        let pairs = generate_pairs(&self.cfg, &base)?;
        write_dataset_with_header(&self.dataset_header()?, &pairs, &out)
    }

    fn training_modes(&self) -> Vec<LossMode> {
        let mut modes: Vec<LossMode> = Vec::new();
        for v in self.variants() {
            if !modes.contains(&v.mode) {
                modes.push(v.mode);
            }
        }
        modes
    }

    pub fn label(&self) -> Result<()> {
        let input = self.path("pairs.pref");
        let modes = self.training_modes();
        let outputs: Vec<PathBuf> = modes.iter().map(|m| self.labeled_path(m)).collect();
        if self.done(&outputs) {
            self.log("label: outputs exist, skipping");
            return Ok(());
        }
        self.require(Stage::GenPairs, &input)?;
        let (_, pairs) = read_dataset_with_header(&input)?;
        for (mode, out) in modes.iter().zip(&outputs) {
            let labeled = label_for_mode(&self.cfg, &pairs, mode)?;
            self.log(&format!(
                "label: {mode}: {} of {} pairs kept",
                labeled.len(),
                pairs.len()
            ));
            write_dataset_with_header(&self.dataset_header()?, &labeled, out)?;
        }
        Ok(())
    }

    pub fn train(&self) -> Result<()> {
        let base = self.load_model(BASE_MODEL, Stage::Pretrain)?;
        for v in self.variants() {
            let name = v.name();
            let ckpt = self.model_path(&name);
            let metrics = self.path(&format!("metrics_{name}.csv"));
            if self.done(&[ckpt, metrics.clone()]) {
                self.log(&format!("train: {name}: outputs exist, skipping"));
                continue;
            }
            let data_path = self.labeled_path(&v.mode);
            self.require(Stage::Label, &data_path)?;
            let (_, labeled) = read_dataset_with_header(&data_path)?;
            self.log(&format!("train: {name} on {} pairs", labeled.len()));
            let (params, record) = train_variant(&self.cfg, &labeled, &base, &v)?;
            self.save_model(&name, &params)?;
            record.write_csv(&metrics, Some(&self.provenance()))?;
        }
        Ok(())
    }

    /// Comparisons: every variant against the base model, then every pair
    /// of variants in configuration order.
    pub fn comparisons(&self) -> Vec<(String, String)> {
        let names: Vec<String> = self.variants().iter().map(Variant::name).collect();
        let mut out: Vec<(String, String)> = names
            .iter()
            .map(|n| (n.clone(), BASE_MODEL.to_string()))
            .collect();
        for i in 0..names.len() {
            for j in i + 1..names.len() {
                out.push((names[i].clone(), names[j].clone()));
            }
        }
        out
    }

    fn best_path(&self, name: &str) -> PathBuf {
        self.path(&format!("best_{name}.csv"))
    }

    fn best_scores(&self, name: &str) -> Result<BestScores> {
        let path = self.best_path(name);
        if !self.force && path.exists() {
            return read_best_scores(&path);
        }
        let params = self.load_model(
            name,
            if name == BASE_MODEL { Stage::Pretrain } else { Stage::Train },
        )?;
        self.log(&format!("evaluate: best-of-{} sampling for {name}", self.cfg.eval.n_seeds));
        let best = evaluate_model(&self.cfg, &params)?;
        write_best_scores(&best, &path, Some(&self.provenance()))?;
        Ok(best)
    }

    pub fn win_rates(&self) -> Result<Vec<WinRateReport>> {
        let mut cache: Vec<(String, BestScores)> = Vec::new();
        let mut get = |name: &str| -> Result<BestScores> {
            if let Some((_, b)) = cache.iter().find(|(n, _)| n == name) {
                return Ok(b.clone());
            }
            let b = self.best_scores(name)?;
            cache.push((name.to_string(), b.clone()));
            Ok(b)
        };
        let tie = self.cfg.eval.tie_value;
        self.comparisons()
            .iter()
            .map(|(a, b)| {
                let (sa, sb) = (get(a)?, get(b)?);
                win_rate(a, &sa, b, &sb, tie)
            })
            .collect()
    }

    pub fn evaluate(&self) -> Result<()> {
        let out = self.path("winrates.csv");
        let mut outputs = vec![out.clone()];
        if self.cfg.eval.ablation {
            outputs.push(self.path("ablation.csv"));
        }
        if self.done(&outputs) {
            self.log("evaluate: outputs exist, skipping");
            return Ok(());
        }
        let reports = self.win_rates()?;
        report(&reports, &out, Some(&self.provenance()))?;
        if self.cfg.eval.ablation {
            let rows = self.ablation_rows(&reports)?;
            write_ablation(&rows, &self.path("ablation.csv"), Some(&self.provenance()))?;
        }
        Ok(())
    }

    pub fn final_loss(&self, name: &str) -> Result<f64> {
        let path = self.path(&format!("metrics_{name}.csv"));
        self.require(Stage::Train, &path)?;
        let losses = read_metric_losses(&path)?;
        let n = losses.len().min(FINAL_LOSS_WINDOW);
        if n == 0 {
            return Err(Error::validation(format!("{} has no rows", path.display())));
        }
        Ok(losses[losses.len() - n..].iter().sum::<f64>() / n as f64)
    }

    fn ablation_rows(&self, reports: &[WinRateReport]) -> Result<Vec<AblationRow>> {
        self.ablation_variants()
            .into_iter()
            .map(|v| {
                let name = v.name();
                let vs_base = reports
                    .iter()
                    .find(|r| r.model_a == name && r.model_b == BASE_MODEL)
                    .cloned()
                    .ok_or_else(|| Error::validation(format!("no evaluation of {name}")))?;
                Ok(AblationRow {
                    ref_update: v.refresh,
                    multi_metric: v.mode == LossMode::Balanced,
                    model: name.clone(),
                    final_loss: self.final_loss(&name)?,
                    vs_base,
                })
            })
            .collect()
    }

    /// Summary text: win-rate table, final training losses and, when
    /// present, the ablation grid.
    pub fn report(&self) -> Result<()> {
        let winrates = self.path("winrates.csv");
        self.require(Stage::Evaluate, &winrates)?;
        let out = self.path("report.txt");
        if self.done(std::slice::from_ref(&out)) {
            self.log("report: outputs exist, skipping");
            return Ok(());
        }
        let table = fs::read_to_string(winrates.with_extension("txt"))
            .map_err(|e| Error::io(winrates.with_extension("txt"), e))?;
        let mut losses = Vec::new();
        for v in self.variants() {
            losses.push((v.name(), self.final_loss(&v.name())?));
        }
        let ablation = if self.cfg.eval.ablation {
            let p = self.path("ablation.csv");
            Some(fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)
        } else {
            None
        };
        let prov = self.provenance();
        write_atomic(&out, |w: &mut dyn Write| {
            writeln!(w, "# {prov}")?;
            writeln!(w, "Win rates (%), best of {} seeds", self.cfg.eval.n_seeds)?;
            for line in table.lines().filter(|l| !l.starts_with('#')) {
                writeln!(w, "{line}")?;
            }
            writeln!(w)?;
            writeln!(w, "Final training loss (mean of last {FINAL_LOSS_WINDOW} steps)")?;
            for (name, l) in &losses {
                writeln!(w, "{name:<24} {l:.6}")?;
            }
            if let Some(a) = &ablation {
                writeln!(w)?;
                writeln!(w, "Ablation: reference refresh x multi-metric")?;
                for line in a.lines().filter(|l| !l.starts_with('#')) {
                    writeln!(w, "{line}")?;
                }
            }
            Ok(())
        })
    }
}

/// Loss column of a training metrics CSV.
pub fn read_metric_losses(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.starts_with('#') && !l.starts_with("step"))
        .map(|(i, l)| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::Parse {
                    file: path.display().to_string(),
                    line: i + 1,
                    msg: "missing loss column".into(),
                })
        })
        .collect()
}
