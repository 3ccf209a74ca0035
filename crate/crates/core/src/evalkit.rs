//! Best-of-N win-rate evaluation.
//!
//! For every evaluation prompt (a condition), each model draws `n_seeds`
//! samples, every sample is scored with all K metrics, and the per-metric
//! maximum is kept. Model A wins a (prompt, metric) cell when its best score
//! is strictly higher; exact ties count `tie_value`.
//!
//! Both models use the same substream for a given (prompt, seed), so the
//! comparison is paired.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{sample, DenoiserParams, NoiseSchedule};
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::prefcore::{Condition, MetricIds, Sample, SeedStream};
use crate::rewards::RewardRegistry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    /// Evaluation prompts; each entry is a condition id and may repeat.
    #[serde(default)]
    pub prompts: Vec<u32>,
    #[serde(default = "default_tie_value")]
    pub tie_value: f64,
}

fn default_n_seeds() -> usize {
    5
}
fn default_tie_value() -> f64 {
    0.5
}

impl EvalConfig {
    /// Every condition repeated `per_condition` times, condition-major.
    pub fn with_repeated_conditions(num_conditions: usize, per_condition: usize) -> Self {
        EvalConfig {
            n_seeds: default_n_seeds(),
            prompts: (0..num_conditions as u32)
                .flat_map(|c| std::iter::repeat_n(c, per_condition))
                .collect(),
            tie_value: default_tie_value(),
        }
    }

    pub fn validate(&self, num_conditions: usize) -> Result<()> {
        if self.n_seeds == 0 {
            return Err(Error::config("eval.n_seeds", "must be at least 1"));
        }
        if self.prompts.is_empty() {
            return Err(Error::config("eval.prompts", "no evaluation prompts"));
        }
        if let Some(c) = self.prompts.iter().find(|&&c| c as usize >= num_conditions) {
            return Err(Error::config("eval.prompts", format!("condition {c} out of range")));
        }
        if !(0.0..=1.0).contains(&self.tie_value) {
            return Err(Error::config("eval.tie_value", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Per-prompt, per-metric best scores of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct BestScores {
    pub metric_ids: MetricIds,
    pub prompts: Vec<Condition>,
    /// `best[p][k]`
    pub best: Vec<Vec<f64>>,
}

/// Best-of-`n_seeds` scores using `sampler` for generation. The sampler is
/// called exactly `n_seeds` times per prompt with the substream of that
/// (prompt, seed).
pub fn best_scores<F>(
    mut sampler: F,
    registry: &RewardRegistry,
    cfg: &EvalConfig,
    stream: &SeedStream,
) -> Result<BestScores>
where
    F: FnMut(Condition, &SeedStream) -> Result<Sample>,
{
    if cfg.n_seeds == 0 {
        return Err(Error::config("eval.n_seeds", "must be at least 1"));
    }
    let prompts: Vec<Condition> = cfg.prompts.iter().map(|&c| Condition(c)).collect();
    let mut best = Vec::with_capacity(prompts.len());
    for (p, &c) in prompts.iter().enumerate() {
        let prompt_stream = stream.split_index("prompt", p as u64);
        let mut row = vec![f64::NEG_INFINITY; registry.k()];
        for s in 0..cfg.n_seeds {
            let x = sampler(c, &prompt_stream.split_index("seed", s as u64))?;
            let scores = registry.score_all(c, &x)?;
            for (b, v) in row.iter_mut().zip(&scores.values) {
                *b = b.max(*v);
            }
        }
        best.push(row);
    }
    Ok(BestScores {
        metric_ids: registry.metric_ids().clone(),
        prompts,
        best,
    })
}

/// [`best_scores`] with the ancestral sampler of `params`.
pub fn best_scores_for_model(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    registry: &RewardRegistry,
    cfg: &EvalConfig,
    stream: &SeedStream,
) -> Result<BestScores> {
    best_scores(|c, s| sample(params, schedule, c, s), registry, cfg, stream)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WinRateReport {
    pub model_a: String,
    pub model_b: String,
    pub metric_ids: MetricIds,
    pub win_rate: Vec<f64>,
    pub ties: Vec<usize>,
    pub n_conditions: usize,
}

/// `(#[a > b] + tie_value * #[a == b]) / n` per metric.
pub fn win_rate(
    model_a: &str,
    a: &BestScores,
    model_b: &str,
    b: &BestScores,
    tie_value: f64,
) -> Result<WinRateReport> {
    if a.prompts != b.prompts {
        return Err(Error::validation("score tables cover different prompts"));
    }
    if a.metric_ids != b.metric_ids {
        return Err(Error::validation("score tables cover different metrics"));
    }
    let n = a.prompts.len();
    if n == 0 {
        return Err(Error::validation("no prompts to compare"));
    }
    let k = a.metric_ids.len();
    let mut wins = vec![0usize; k];
    let mut ties = vec![0usize; k];
    for (ra, rb) in a.best.iter().zip(&b.best) {
        for j in 0..k {
            if ra[j] > rb[j] {
                wins[j] += 1;
            } else if ra[j] == rb[j] {
                ties[j] += 1;
            }
        }
    }
    let win_rate = (0..k)
        .map(|j| (wins[j] as f64 + tie_value * ties[j] as f64) / n as f64)
        .collect();
    Ok(WinRateReport {
        model_a: model_a.to_string(),
        model_b: model_b.to_string(),
        metric_ids: a.metric_ids.clone(),
        win_rate,
        ties,
        n_conditions: n,
    })
}

impl WinRateReport {
    pub fn comparison(&self) -> String {
        format!("{}_vs_{}", self.model_a, self.model_b)
    }
}

fn percent(w: f64) -> String {
    format!("{:.2}", 100.0 * w)
}

/// Writes the win-rate CSV (`comparison,metric,win_rate_percent,ties,n`),
/// an aligned text table next to it (`.txt`), and one gnuplot data file per
/// comparison (`<stem>_<comparison>.dat`). Returns every path written.
pub fn report(reports: &[WinRateReport], path: &Path, provenance: Option<&str>) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::validation("nothing to report"));
    }
    let mut written = Vec::new();
    write_atomic(path, |out: &mut dyn Write| {
        if let Some(p) = provenance {
            writeln!(out, "# {p}")?;
        }
        writeln!(out, "comparison,metric,win_rate_percent,ties,n")?;
        for r in reports {
            for (j, m) in r.metric_ids.iter().enumerate() {
                writeln!(
                    out,
                    "{},{m},{},{},{}",
                    r.comparison(),
                    percent(r.win_rate[j]),
                    r.ties[j],
                    r.n_conditions
                )?;
            }
        }
        Ok(())
    })?;
    written.push(path.to_path_buf());

    let table = path.with_extension("txt");
    write_atomic(&table, |out: &mut dyn Write| {
        write_text_table(out, reports, provenance)
    })?;
    written.push(table);

    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("winrates");
    for r in reports {
        let dat = path.with_file_name(format!("{stem}_{}.dat", r.comparison()));
        write_atomic(&dat, |out: &mut dyn Write| {
            if let Some(p) = provenance {
                writeln!(out, "# {p}")?;
            }
            writeln!(out, "# {} (win rate %, best of N)", r.comparison())?;
            writeln!(out, "# index metric win_rate_percent")?;
            for (j, m) in r.metric_ids.iter().enumerate() {
                writeln!(out, "{j} {m} {}", percent(r.win_rate[j]))?;
            }
            Ok(())
        })?;
        written.push(dat);
    }
    Ok(written)
}

fn write_text_table(
    out: &mut dyn Write,
    reports: &[WinRateReport],
    provenance: Option<&str>,
) -> std::io::Result<()> {
    if let Some(p) = provenance {
        writeln!(out, "# {p}")?;
    }
    let metrics = &reports[0].metric_ids;
    let name_w = reports
        .iter()
        .map(|r| r.comparison().len())
        .max()
        .unwrap_or(0)
        .max("comparison".len());
    let col_w = metrics.iter().map(|m| m.len()).max().unwrap_or(0).max(6);
    write!(out, "{:<name_w$}", "comparison")?;
    for m in metrics.iter() {
        write!(out, "  {m:>col_w$}")?;
    }
    writeln!(out)?;
    for r in reports {
        write!(out, "{:<name_w$}", r.comparison())?;
        for w in &r.win_rate {
            write!(out, "  {:>col_w$}", percent(*w))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// One cell row of the reference-refresh x multi-metric ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub ref_update: bool,
    pub multi_metric: bool,
    pub model: String,
    pub final_loss: f64,
    pub vs_base: WinRateReport,
}

/// CSV: `ref_update,multi_metric,model,final_loss,<metric>...` with win
/// rates (percent) against the base model.
pub fn write_ablation(rows: &[AblationRow], path: &Path, provenance: Option<&str>) -> Result<()> {
    let Some(first) = rows.first() else {
        return Err(Error::validation("empty ablation table"));
    };
    let metrics = first.vs_base.metric_ids.clone();
    write_atomic(path, |out: &mut dyn Write| {
        if let Some(p) = provenance {
            writeln!(out, "# {p}")?;
        }
        write!(out, "ref_update,multi_metric,model,final_loss")?;
        for m in metrics.iter() {
            write!(out, ",{m}")?;
        }
        writeln!(out)?;
        let mark = |b: bool| if b { "yes" } else { "no" };
        for r in rows {
            write!(
                out,
                "{},{},{},{:.6}",
                mark(r.ref_update),
                mark(r.multi_metric),
                r.model,
                r.final_loss
            )?;
            for w in &r.vs_base.win_rate {
                write!(out, ",{}", percent(*w))?;
            }
            writeln!(out)?;
        }
        Ok(())
    })
}

/// Per-prompt best scores as CSV (`prompt,condition,<metric>...`).
pub fn write_best_scores(scores: &BestScores, path: &Path, provenance: Option<&str>) -> Result<()> {
    write_atomic(path, |out: &mut dyn Write| {
        if let Some(p) = provenance {
            writeln!(out, "# {p}")?;
        }
        write!(out, "prompt,condition")?;
        for m in scores.metric_ids.iter() {
            write!(out, ",{m}")?;
        }
        writeln!(out)?;
        for (i, (c, row)) in scores.prompts.iter().zip(&scores.best).enumerate() {
            write!(out, "{i},{c}")?;
            for v in row {
                write!(out, ",{v:?}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    })
}

pub fn read_best_scores(path: &Path) -> Result<BestScores> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file = path.display().to_string();
    let err = |line: usize, msg: String| Error::Parse {
        file: file.clone(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#'));
    let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "prompt" || cols[1] != "condition" {
        return Err(err(1, "expected `prompt,condition,<metrics>` header".into()));
    }
    let metric_ids = crate::prefcore::metric_ids(&cols[2..]);
    let mut prompts = Vec::new();
    let mut best = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(err(i + 1, format!("expected {} fields", cols.len())));
        }
        let c = f[1].parse::<u32>().map_err(|e| err(i + 1, e.to_string()))?;
        let row = f[2..]
            .iter()
            .map(|v| v.parse::<f64>().map_err(|e| err(i + 1, format!("`{v}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        prompts.push(Condition(c));
        best.push(row);
    }
    Ok(BestScores {
        metric_ids,
        prompts,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prefcore::{metric_ids, seeded_rng};
    use crate::rewards::{RewardKind, RewardParams, RewardSpec};

    fn table(rows: Vec<Vec<f64>>) -> BestScores {
        let k = rows[0].len();
        let ids: Vec<String> = (1..=k).map(|i| format!("m{i}")).collect();
        BestScores {
            metric_ids: metric_ids(&ids),
            prompts: (0..rows.len() as u32).map(Condition).collect(),
            best: rows,
        }
    }

    #[test]
    fn win_rate_examples() {
        let a = table(vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let same = win_rate("a", &a, "b", &a, 0.5).unwrap();
        assert_eq!(same.win_rate, vec![0.5, 0.5]);
        assert_eq!(same.ties, vec![3, 3]);

        let higher = table(vec![vec![2.0, 3.0], vec![4.0, 5.0], vec![6.0, 7.0]]);
        assert_eq!(win_rate("h", &higher, "a", &a, 0.5).unwrap().win_rate, vec![1.0, 1.0]);

        let mixed = table(vec![vec![2.0, 0.0], vec![4.0, 0.0], vec![0.0, 0.0]]);
        let r = win_rate("m", &mixed, "a", &a, 0.5).unwrap();
        assert_eq!(r.win_rate[0], 2.0 / 3.0);
        // strict mode counts ties as losses for model a
        assert_eq!(win_rate("a", &a, "b", &a, 0.0).unwrap().win_rate, vec![0.0, 0.0]);
    }

    #[test]
    fn mismatched_tables_rejected() {
        let a = table(vec![vec![1.0], vec![2.0]]);
        let b = table(vec![vec![1.0]]);
        assert!(win_rate("a", &a, "b", &b, 0.5).is_err());
    }

    #[test]
    fn best_of_n_takes_per_metric_max() {
        // One metric equal to x[0]; the sampler returns 3,5,4,1,2 in turn.
        let reg = RewardRegistry::new(vec![RewardSpec::new(
            "axis",
            RewardKind::AxisPreference,
            1.0,
            RewardParams::default(),
        )])
        .unwrap();
        let seq = [3.0, 5.0, 4.0, 1.0, 2.0];
        let mut i = 0;
        let cfg = EvalConfig {
            n_seeds: 5,
            prompts: vec![0],
            tie_value: 0.5,
        };
        let b = best_scores(
            |_, _| {
                let x = Sample(vec![seq[i], 0.0]);
                i += 1;
                Ok(x)
            },
            &reg,
            &cfg,
            &seeded_rng(0),
        )
        .unwrap();
        assert_eq!(b.best, vec![vec![5.0]]);

        let one = EvalConfig { n_seeds: 1, ..cfg };
        let b = best_scores(|_, _| Ok(Sample(vec![-7.5, 1.0])), &reg, &one, &seeded_rng(0)).unwrap();
        assert_eq!(b.best, vec![vec![-7.5]]);
    }

    #[test]
    fn report_layout() {
        let a = table(vec![vec![1.0, 2.0, 3.0, 4.0]]);
        let b = table(vec![vec![0.0, 2.0, 9.0, 4.0]]);
        let mut r = win_rate("x", &a, "y", &b, 0.5).unwrap();
        r.win_rate[0] = 0.85185;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wr.csv");
        let files = report(std::slice::from_ref(&r), &path, None).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0], "x_vs_y,m1,85.19,0,1");
        assert_eq!(rows[1], "x_vs_y,m2,50.00,1,1");
        assert_eq!(files.len(), 3);
        let first = fs::read(&files[2]).unwrap();
        report(std::slice::from_ref(&r), &path, None).unwrap();
        assert_eq!(fs::read(&files[2]).unwrap(), first);
    }

    #[test]
    fn best_scores_csv_round_trip() {
        let a = table(vec![vec![1.0 / 3.0, -2.0], vec![1e-300, 4.0]]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.csv");
        write_best_scores(&a, &path, Some("seed=1")).unwrap();
        assert_eq!(read_best_scores(&path).unwrap(), a);
    }
}
