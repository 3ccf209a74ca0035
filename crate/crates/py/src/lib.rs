//! Python bindings for the balanced-dpo core: vote aggregation, the toy
//! diffusion model, rewards, dataset labeling, evaluation and the pipeline.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

use balanced_dpo as core;
use core::aggregate::{AggregationMode, AggregationPolicy, TiePolicy};
use core::diffusion::{Arch, Checkpoint, DenoiserParams};
use core::evalkit::BestScores;
use core::prefcore::{metric_ids, seeded_rng, Condition, Sample, VoteVector};

fn py_err(e: core::Error) -> PyErr {
    match e.exit_code() {
        2 => PyOSError::new_err(e.to_string()),
        3 => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Per-metric vote in {-1, 0, +1}.
#[pyfunction]
#[pyo3(signature = (r_a, r_b, margin = 0.0, inclusive = false))]
fn vote_metric(r_a: f64, r_b: f64, margin: f64, inclusive: bool) -> i8 {
    core::aggregate::vote_metric(r_a, r_b, margin, inclusive)
}

/// Majority label `(s, tie_broken)`, or `None` when the tie policy skips.
#[pyfunction]
#[pyo3(signature = (votes, tie_policy = "first_metric"))]
fn majority_consensus(votes: Vec<i8>, tie_policy: &str) -> PyResult<Option<(i8, bool)>> {
    let votes = VoteVector::new(votes).py()?;
    let policy = tie_policy.parse::<TiePolicy>().py()?;
    Ok(core::aggregate::majority_consensus(&votes, policy)
        .py()?
        .map(|l| (l.s(), l.tie_broken)))
}

#[pyfunction]
fn bt_probability(r_w: f64, r_l: f64) -> f64 {
    core::dpo::bt_probability(r_w, r_l)
}

#[pyfunction]
fn bt_loss(pairs: Vec<(f64, f64)>) -> PyResult<f64> {
    core::dpo::bt_loss(&pairs).py()
}

#[pyclass(name = "NoiseSchedule", frozen)]
struct PySchedule(core::diffusion::NoiseSchedule);

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps = 50, beta_start = 0.002, beta_end = 0.3))]
    fn new(steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        Ok(PySchedule(
            core::diffusion::NoiseSchedule::linear(steps, beta_start, beta_end).py()?,
        ))
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.steps()
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.0.check_step(t).py()?;
        Ok(self.0.alpha_bar(t))
    }

    fn sigma(&self, t: usize) -> PyResult<f64> {
        self.0.check_step(t).py()?;
        Ok(self.0.sigma(t))
    }

    fn snr(&self, t: usize) -> PyResult<f64> {
        self.0.check_step(t).py()?;
        Ok(self.0.snr(t))
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        self.0.check_step(t).py()?;
        Ok(self.0.beta(t))
    }
}

#[pyclass(name = "Denoiser", frozen)]
struct PyDenoiser(DenoiserParams);

#[pymethods]
impl PyDenoiser {
    /// Fresh parameters for dimensions `d`, time features `m`, conditions
    /// `c` and hidden width `h`.
    #[staticmethod]
    #[pyo3(signature = (d, m, c, h, seed = 0))]
    fn init(d: usize, m: usize, c: usize, h: usize, seed: u64) -> Self {
        PyDenoiser(DenoiserParams::init(Arch { d, m, c, h }, &seeded_rng(seed)))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDenoiser(Checkpoint::load(&path).py()?.params))
    }

    #[pyo3(signature = (path, steps = 50))]
    fn save(&self, path: PathBuf, steps: usize) -> PyResult<()> {
        Checkpoint::new(self.0.clone(), steps).save(&path).py()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.0.len()
    }

    fn values(&self) -> Vec<f64> {
        self.0.values.clone()
    }

    /// Predicted noise for `x_t` at step `t` under condition `c`.
    fn denoise(&self, x_t: Vec<f64>, t: usize, c: u32) -> PyResult<Vec<f64>> {
        Condition(c).check(self.0.arch.c).py()?;
        self.0.denoise(&x_t, t, Condition(c)).py()
    }

    /// `n` ancestral samples for condition `c`.
    #[pyo3(signature = (schedule, c, n = 1, seed = 0))]
    fn sample(&self, schedule: &PySchedule, c: u32, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let c = Condition(c).check(self.0.arch.c).py()?;
        let stream = seeded_rng(seed).split("sample").split_index("condition", c.0 as u64);
        (0..n)
            .map(|i| {
                core::diffusion::sample(&self.0, &schedule.0, c, &stream.split_index("draw", i as u64))
                    .map(|s| s.0)
            })
            .collect::<core::Result<_>>()
            .py()
    }
}

#[pyclass(name = "RewardRegistry", frozen)]
struct PyRegistry(core::rewards::RewardRegistry);

#[pymethods]
impl PyRegistry {
    #[new]
    #[pyo3(signature = (num_conditions = 4, d = 2, target_radius = 1.5, ring_radius = 1.5))]
    fn new(num_conditions: usize, d: usize, target_radius: f64, ring_radius: f64) -> Self {
        PyRegistry(core::rewards::RewardRegistry::default_for(
            num_conditions,
            d,
            target_radius,
            ring_radius,
        ))
    }

    #[getter]
    fn metric_ids(&self) -> Vec<String> {
        self.0.metric_ids().iter().map(|s| s.to_string()).collect()
    }

    /// All K scores of `x` under condition `c`.
    fn score(&self, c: u32, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = Sample::new(x).py()?;
        Ok(self.0.score_all(Condition(c), &x).py()?.values)
    }
}

/// Number of pairs in a dataset file and its metric ids.
#[pyfunction]
fn dataset_info(path: PathBuf) -> PyResult<(usize, Vec<String>)> {
    let (header, pairs) = core::prefcore::dataset::read_dataset_with_header(&path).py()?;
    Ok((
        pairs.len(),
        header.metric_ids.iter().map(|s| s.to_string()).collect(),
    ))
}

/// Pairs of a dataset as dicts.
#[pyfunction]
fn read_pairs<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Vec<Bound<'py, pyo3::types::PyDict>>> {
    let pairs = core::prefcore::read_dataset(&path).py()?;
    pairs
        .iter()
        .map(|p| {
            let d = pyo3::types::PyDict::new(py);
            d.set_item("pair_id", p.pair_id)?;
            d.set_item("condition", p.condition.0)?;
            d.set_item("sample_a", &p.sample_a.0)?;
            d.set_item("sample_b", &p.sample_b.0)?;
            d.set_item("scores_a", &p.scores_a.values)?;
            d.set_item("scores_b", &p.scores_b.values)?;
            d.set_item("votes", p.votes.as_ref().map(|v| v.0.clone()))?;
            d.set_item("label", p.consensus.map(|l| l.s()))?;
            Ok(d)
        })
        .collect()
}

/// Labels `input` into `output`; returns `(kept, skipped, comparisons)`.
#[pyfunction]
#[pyo3(signature = (input, output, mode = "majority", seed = 0, metric = None, tie_policy = "first_metric", weights = None))]
#[allow(clippy::too_many_arguments)]
fn label_dataset(
    input: PathBuf,
    output: PathBuf,
    mode: &str,
    seed: u64,
    metric: Option<String>,
    tie_policy: &str,
    weights: Option<Vec<f64>>,
) -> PyResult<(usize, usize, usize)> {
    let policy = AggregationPolicy {
        chosen_metric: metric,
        tie_policy: tie_policy.parse::<TiePolicy>().py()?,
        weights,
        ..AggregationPolicy::new(mode.parse::<AggregationMode>().py()?)
    };
    let (header, pairs) = core::prefcore::dataset::read_dataset_with_header(&input).py()?;
    let stream = seeded_rng(seed).split("label").split(mode);
    let labeled = core::aggregate::label_dataset(&pairs, &policy, &stream).py()?;
    core::prefcore::dataset::write_dataset_with_header(&header, &labeled.pairs, &output).py()?;
    Ok((labeled.pairs.len(), labeled.skipped, labeled.comparisons))
}

/// Per-metric win rate of `best_a` over `best_b` (rows are prompts).
#[pyfunction]
#[pyo3(signature = (best_a, best_b, tie_value = 0.5))]
fn win_rate(best_a: Vec<Vec<f64>>, best_b: Vec<Vec<f64>>, tie_value: f64) -> PyResult<Vec<f64>> {
    let k = best_a.first().map_or(0, |r| r.len());
    if best_a.iter().chain(&best_b).any(|r| r.len() != k) {
        return Err(PyValueError::new_err("score rows must all have the same length"));
    }
    let ids: Vec<String> = (1..=k).map(|i| format!("metric_{i}")).collect();
    let table = |best: Vec<Vec<f64>>| BestScores {
        metric_ids: metric_ids(&ids),
        prompts: vec![Condition(0); best.len()],
        best,
    };
    let r = core::evalkit::win_rate("a", &table(best_a), "b", &table(best_b), tie_value).py()?;
    Ok(r.win_rate)
}

/// Runs pipeline stages in `out_dir`; built-in defaults when `config` is
/// omitted.
#[pyfunction]
#[pyo3(signature = (out_dir, config = None, seed = None, stages = None, force = false))]
fn run_pipeline(
    out_dir: PathBuf,
    config: Option<PathBuf>,
    seed: Option<u64>,
    stages: Option<Vec<String>>,
    force: bool,
) -> PyResult<()> {
    let mut cfg = match config {
        Some(p) => core::config::ExperimentConfig::load(&p).py()?,
        None => {
            let mut c = core::config::ExperimentConfig::default();
            c.fill_defaults();
            c
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().py()?;
    let stages = match stages {
        Some(s) => s
            .iter()
            .map(|s| s.parse::<core::pipeline::Stage>())
            .collect::<core::Result<Vec<_>>>()
            .py()?,
        None => core::pipeline::Stage::ALL.to_vec(),
    };
    let p = core::pipeline::Pipeline::new(cfg, &out_dir, force, true).py()?;
    p.run(&stages).py()
}

#[pymodule]
fn balanced_dpo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(vote_metric, m)?)?;
    m.add_function(wrap_pyfunction!(majority_consensus, m)?)?;
    m.add_function(wrap_pyfunction!(bt_probability, m)?)?;
    m.add_function(wrap_pyfunction!(bt_loss, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_info, m)?)?;
    m.add_function(wrap_pyfunction!(read_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(label_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(win_rate, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyDenoiser>()?;
    m.add_class::<PyRegistry>()?;
    Ok(())
}
