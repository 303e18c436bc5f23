//! Experiment orchestration: specs, config files, seeded multi-run
//! execution, CSV output and plot data.
//!
//! A config file is flat `key = value` text, `#` starts a comment. Keys:
//!
//! | key | meaning |
//! |-----|---------|
//! | `methods` | comma list of `pdg`, `er` |
//! | `holdouts` | comma list of held-out degrees |
//! | `seeds` | comma list of run seeds |
//! | `sweep` | `none`, `alpha` or `memory` |
//! | `sweep_values` | comma list of values for the sweep axis |
//! | `alpha`, `rho`, `lr` | objective and step size |
//! | `batch_size`, `memory_batch`, `risk_batch`, `n_risk_batches` | batch sizes |
//! | `memory_capacity` | reservoir capacity |
//! | `include_current_risk` | `true` / `false` |
//! | `scale_mode` | `paper` (variance) or `std` |
//! | `hidden` | comma list of hidden widths |
//! | `steps_per_env`, `eval_every` | stream length and evaluation cadence |
//! | `env_order` | `ascending` or `shuffled` |
//! | `train_images`, `test_images` | caps on the base sets (0 = all) |
//! | `data_dir`, `out_dir` | paths |
//! | `jobs` | worker threads (0 = all cores) |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::data::{self, Batch, Dataset, EnvOrder, IMAGE_LEN, NUM_CLASSES, ROTATION_GRID};
use crate::error::{Error, Result};
use crate::train::{self, Method, MetricsRecord, TrainConfig, DEFAULT_EVAL_EVERY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SweepAxis {
    #[default]
    None,
    Alpha,
    Memory,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SweepAxis::None),
            "alpha" => Ok(SweepAxis::Alpha),
            "memory" | "memory_capacity" => Ok(SweepAxis::Memory),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::None => "none",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Memory => "memory",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub methods: Vec<Method>,
    pub holdouts: Vec<i32>,
    pub seeds: Vec<u64>,
    /// Template for every run; method, seed and the sweep value are filled
    /// in per tuple.
    pub train: TrainConfig,
    pub sweep: SweepAxis,
    pub sweep_values: Vec<f64>,
    pub steps_per_env: usize,
    pub eval_every: usize,
    pub env_order: EnvOrder,
    pub train_images: usize,
    pub test_images: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub jobs: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            methods: vec![Method::Pdg, Method::Er],
            holdouts: vec![150],
            seeds: vec![1, 2, 3, 4, 5],
            train: TrainConfig::default(),
            sweep: SweepAxis::None,
            sweep_values: Vec::new(),
            steps_per_env: 100,
            eval_every: DEFAULT_EVAL_EVERY,
            env_order: EnvOrder::Shuffled,
            train_images: 10_000,
            test_images: 0,
            data_dir: PathBuf::from("data/mnist"),
            out_dir: PathBuf::from("results"),
            jobs: 0,
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {s:?}")))
        })
        .collect()
}

fn parse_one<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl ExperimentSpec {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key.trim() {
            "methods" | "method" => self.methods = parse_list(key, v)?,
            "holdouts" | "holdout" => self.holdouts = parse_list(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "sweep" => self.sweep = v.parse()?,
            "sweep_values" => self.sweep_values = parse_list(key, v)?,
            "alpha" => t.alpha = parse_one(key, v)?,
            "rho" => t.rho = parse_one(key, v)?,
            "lr" => t.lr = parse_one(key, v)?,
            "batch_size" => t.batch_size = parse_one(key, v)?,
            "memory_batch" => t.memory_batch = parse_one(key, v)?,
            "risk_batch" => t.risk_batch = parse_one(key, v)?,
            "n_risk_batches" => t.n_risk_batches = parse_one(key, v)?,
            "memory_capacity" | "memory" => t.memory_capacity = parse_one(key, v)?,
            "include_current_risk" => t.include_current_risk = parse_one(key, v)?,
            "scale_mode" => t.scale_mode = v.parse()?,
            "hidden" => {
                let hidden: Vec<usize> = parse_list(key, v)?;
                let mut dims = vec![IMAGE_LEN];
                dims.extend(hidden);
                dims.push(NUM_CLASSES);
                t.layer_dims = dims;
            }
            "steps_per_env" => self.steps_per_env = parse_one(key, v)?,
            "eval_every" => self.eval_every = parse_one(key, v)?,
            "env_order" => self.env_order = v.parse()?,
            "train_images" => self.train_images = parse_one(key, v)?,
            "test_images" => self.test_images = parse_one(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "jobs" => self.jobs = parse_one(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Apply every setting of a config file's text.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", n + 1))
            })?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = ExperimentSpec::default();
        spec.apply_text(&text)?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.holdouts.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(
                "need at least one method, one holdout and one seed".into(),
            ));
        }
        if let Some(h) = self.holdouts.iter().find(|h| !ROTATION_GRID.contains(h)) {
            return Err(Error::Config(format!("holdout {h} is not on the rotation grid")));
        }
        match self.sweep {
            SweepAxis::None if !self.sweep_values.is_empty() => {
                return Err(Error::Config("sweep_values given without a sweep axis".into()))
            }
            SweepAxis::Alpha | SweepAxis::Memory if self.sweep_values.is_empty() => {
                return Err(Error::Config("sweep axis given without values".into()))
            }
            SweepAxis::Memory => {
                if let Some(v) = self.sweep_values.iter().find(|v| **v < 0.0 || v.fract() != 0.0) {
                    return Err(Error::Config(format!("memory size {v} is not a count")));
                }
            }
            _ => {}
        }
        if self.steps_per_env == 0 {
            return Err(Error::Config("steps_per_env must be positive".into()));
        }
        for t in self.tuples() {
            self.config_for(&t).validate()?;
        }
        Ok(())
    }

    /// Every (method, holdout, sweep value, seed) combination, in file order.
    pub fn tuples(&self) -> Vec<RunTuple> {
        let values: Vec<Option<f64>> = if self.sweep == SweepAxis::None {
            vec![None]
        } else {
            self.sweep_values.iter().copied().map(Some).collect()
        };
        let mut out = Vec::new();
        for &method in &self.methods {
            for &holdout in &self.holdouts {
                for &sweep_value in &values {
                    for &seed in &self.seeds {
                        out.push(RunTuple {
                            method,
                            holdout,
                            sweep: self.sweep,
                            sweep_value,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn config_for(&self, tuple: &RunTuple) -> TrainConfig {
        let mut c = self.train.clone();
        c.method = tuple.method;
        c.seed = tuple.seed;
        if let Some(v) = tuple.sweep_value {
            match tuple.sweep {
                SweepAxis::Alpha => c.alpha = v,
                SweepAxis::Memory => c.memory_capacity = v as usize,
                SweepAxis::None => {}
            }
        }
        c
    }

    /// The config file text that reproduces this spec.
    pub fn to_config_text(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        let t = &self.train;
        let hidden = &t.layer_dims[1..t.layer_dims.len() - 1];
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("methods", join(self.methods.iter().map(|m| m.to_string()).collect()));
        kv("holdouts", join(self.holdouts.iter().map(|h| h.to_string()).collect()));
        kv("seeds", join(self.seeds.iter().map(|x| x.to_string()).collect()));
        kv("sweep", self.sweep.to_string());
        if !self.sweep_values.is_empty() {
            kv("sweep_values", join(self.sweep_values.iter().map(|x| x.to_string()).collect()));
        }
        kv("alpha", t.alpha.to_string());
        kv("rho", t.rho.to_string());
        kv("lr", t.lr.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("memory_batch", t.memory_batch.to_string());
        kv("risk_batch", t.risk_batch.to_string());
        kv("n_risk_batches", t.n_risk_batches.to_string());
        kv("memory_capacity", t.memory_capacity.to_string());
        kv("include_current_risk", t.include_current_risk.to_string());
        kv("scale_mode", t.scale_mode.to_string());
        kv("hidden", join(hidden.iter().map(|x| x.to_string()).collect()));
        kv("steps_per_env", self.steps_per_env.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("env_order", self.env_order.to_string());
        kv("train_images", self.train_images.to_string());
        kv("test_images", self.test_images.to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("jobs", self.jobs.to_string());
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunTuple {
    pub method: Method,
    pub holdout: i32,
    pub sweep: SweepAxis,
    pub sweep_value: Option<f64>,
    pub seed: u64,
}

impl RunTuple {
    /// File stem, e.g. `pdg_h150_alpha0.3_s2`.
    pub fn name(&self) -> String {
        let mut s = format!("{}_h{}", self.method, self.holdout);
        if let Some(v) = self.sweep_value {
            let _ = write!(s, "_{}{}", self.sweep, v);
        }
        let _ = write!(s, "_s{}", self.seed);
        s
    }
}

/// Final numbers of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub tuple: RunTuple,
    pub csv_path: PathBuf,
    pub final_avg: f64,
    pub final_target: f64,
    pub final_memorization: f64,
    /// `(step, memorization accuracy)` at each evaluation.
    pub memorization_curve: Vec<(usize, f64)>,
}

/// Mean and sample standard deviation; `std` is `None` below two values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: Option<f64>,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    MeanStd { mean, std }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: Method,
    pub holdout: i32,
    pub sweep_value: Option<f64>,
    pub seeds: Vec<u64>,
    pub avg: MeanStd,
    pub target: MeanStd,
    pub memorization: MeanStd,
    /// Per-seed final target accuracies, in seed order.
    pub target_by_seed: Vec<f64>,
    /// Seed-mean memorization accuracy at each evaluation step.
    pub memorization_curve: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub sweep: SweepAxis,
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn from_outcomes(sweep: SweepAxis, outcomes: &[RunOutcome]) -> Self {
        type Key = (Method, i32, Option<u64>);
        let key = |o: &RunOutcome| -> Key {
            (o.tuple.method, o.tuple.holdout, o.tuple.sweep_value.map(f64::to_bits))
        };
        let mut order: Vec<Key> = Vec::new();
        let mut groups: BTreeMap<Key, Vec<&RunOutcome>> = BTreeMap::new();
        for o in outcomes {
            let k = key(o);
            if !groups.contains_key(&k) {
                order.push(k);
            }
            groups.entry(k).or_default().push(o);
        }
        let rows = order
            .into_iter()
            .map(|k| {
                let g = &groups[&k];
                let pick = |f: fn(&RunOutcome) -> f64| -> Vec<f64> { g.iter().map(|o| f(o)).collect() };
                let steps: Vec<usize> = g[0].memorization_curve.iter().map(|p| p.0).collect();
                let memorization_curve = steps
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| {
                        let vals: Vec<f64> = g.iter().map(|o| o.memorization_curve[i].1).collect();
                        (s, mean_std(&vals).mean)
                    })
                    .collect();
                let target_by_seed = pick(|o| o.final_target);
                ResultRow {
                    method: k.0,
                    holdout: k.1,
                    sweep_value: k.2.map(f64::from_bits),
                    seeds: g.iter().map(|o| o.tuple.seed).collect(),
                    avg: mean_std(&pick(|o| o.final_avg)),
                    target: mean_std(&target_by_seed),
                    memorization: mean_std(&pick(|o| o.final_memorization)),
                    target_by_seed,
                    memorization_curve,
                }
            })
            .collect();
        ResultTable { sweep, rows }
    }

    pub fn find(&self, method: Method, holdout: i32, sweep_value: Option<f64>) -> Option<&ResultRow> {
        self.rows.iter().find(|r| {
            r.method == method
                && r.holdout == holdout
                && r.sweep_value.map(f64::to_bits) == sweep_value.map(f64::to_bits)
        })
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from(
            "method,holdout,sweep,sweep_value,n_seeds,avg_mean,avg_std,target_mean,target_std,memorization_mean,memorization_std\n",
        );
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.method,
                r.holdout,
                self.sweep,
                opt(r.sweep_value),
                r.seeds.len(),
                r.avg.mean,
                opt(r.avg.std),
                r.target.mean,
                opt(r.target.std),
                r.memorization.mean,
                opt(r.memorization.std),
            );
        }
        s
    }
}

/// Header of a per-run CSV.
pub fn run_csv_header() -> String {
    let mut cols = vec!["step".to_string()];
    cols.extend(ROTATION_GRID.iter().map(|d| format!("acc_{d}")));
    cols.extend(
        ["avg", "target", "memorization", "mu", "sigma_sq", "l_g", "l_m"]
            .iter()
            .map(|s| s.to_string()),
    );
    cols.join(",")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// One CSV row. Accuracy fields are empty on steps without evaluation.
pub fn run_csv_row(r: &MetricsRecord) -> String {
    let mut fields = vec![r.step.to_string()];
    match &r.eval {
        Some(e) => {
            fields.extend(ROTATION_GRID.iter().map(|d| e.per_rotation[d].to_string()));
            fields.push(e.avg_accuracy.to_string());
            fields.push(e.target_accuracy.to_string());
            fields.push(e.memorization_accuracy.to_string());
        }
        None => fields.extend(std::iter::repeat_n(String::new(), ROTATION_GRID.len() + 3)),
    }
    let m = &r.step_metrics;
    fields.push(fmt_opt(m.mu));
    fields.push(fmt_opt(m.sigma_sq));
    fields.push(fmt_opt(m.l_g));
    fields.push(m.l_m.to_string());
    fields.join(",")
}

/// Write via a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Data shared by every run of an experiment.
pub struct Prepared {
    pub train: Dataset,
    pub test_sets: BTreeMap<i32, Batch>,
}

pub fn prepare_data(spec: &ExperimentSpec) -> Result<Prepared> {
    let mnist = data::load_mnist(&spec.data_dir)?;
    let cap = |n: usize| if n == 0 { usize::MAX } else { n };
    let train = mnist.train.truncated(cap(spec.train_images));
    let test = mnist.test.truncated(cap(spec.test_images));
    if spec.train.batch_size > train.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} training images",
            spec.train.batch_size,
            train.len()
        )));
    }
    Ok(Prepared {
        train,
        test_sets: data::test_sets(&ROTATION_GRID, &test),
    })
}

/// Run one tuple and return its CSV text and outcome numbers.
pub fn run_tuple(spec: &ExperimentSpec, data: &Prepared, tuple: &RunTuple) -> Result<(String, RunOutcome)> {
    let config = spec.config_for(tuple);
    let seeds = train::RunSeeds::derive(tuple.seed);
    let schedule = data::build_schedule(
        &ROTATION_GRID,
        tuple.holdout,
        spec.steps_per_env,
        seeds.schedule,
        spec.env_order,
    )?;
    let mut csv = run_csv_header();
    csv.push('\n');
    let mut last = None;
    let mut memorization_curve = Vec::new();
    train::run_stream(
        &config,
        &schedule,
        &data.train,
        &data.test_sets,
        spec.eval_every,
        |r| {
            csv.push_str(&run_csv_row(r));
            csv.push('\n');
            if let Some(e) = &r.eval {
                memorization_curve.push((r.step, e.memorization_accuracy));
                last = Some(e.clone());
            }
            Ok(())
        },
    )?;
    let last = last.ok_or_else(|| Error::Invalid("run finished without an evaluation".into()))?;
    Ok((
        csv,
        RunOutcome {
            tuple: *tuple,
            csv_path: spec.out_dir.join(format!("{}.csv", tuple.name())),
            final_avg: last.avg_accuracy,
            final_target: last.target_accuracy,
            final_memorization: last.memorization_accuracy,
            memorization_curve,
        },
    ))
}

fn worker_count(spec: &ExperimentSpec, tuples: usize) -> usize {
    let jobs = if spec.jobs == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        spec.jobs
    };
    jobs.clamp(1, tuples.max(1))
}

/// Run every tuple, write `<out_dir>/<tuple>.csv` and `summary.csv`.
///
/// The spec and data are checked before anything is written.
pub fn run(spec: &ExperimentSpec) -> Result<ResultTable> {
    spec.validate()?;
    let data = prepare_data(spec)?;
    run_prepared(spec, &data)
}

pub fn run_prepared(spec: &ExperimentSpec, data: &Prepared) -> Result<ResultTable> {
    spec.validate()?;
    let tuples = spec.tuples();
    fs::create_dir_all(&spec.out_dir).map_err(|e| Error::io(&spec.out_dir, e))?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunOutcome>>>> =
        Mutex::new((0..tuples.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..worker_count(spec, tuples.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= tuples.len() {
                    break;
                }
                let res = run_tuple(spec, data, &tuples[i]).and_then(|(csv, outcome)| {
                    write_atomic(&outcome.csv_path, csv.as_bytes())?;
                    Ok(outcome)
                });
                results.lock().unwrap()[i] = Some(res);
            });
        }
    });
    let outcomes = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every tuple ran"))
        .collect::<Result<Vec<_>>>()?;

    let table = ResultTable::from_outcomes(spec.sweep, &outcomes);
    write_atomic(&spec.out_dir.join("summary.csv"), table.summary_csv().as_bytes())?;
    Ok(table)
}

/// Final `(avg, target, memorization)` read back from a per-run CSV.
pub fn final_metrics_from_csv(text: &str) -> Result<(f64, f64, f64)> {
    let header: Vec<&str> = text
        .lines()
        .next()
        .ok_or_else(|| Error::Invalid("empty run CSV".into()))?
        .split(',')
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Invalid(format!("run CSV lacks column {name}")))
    };
    let (a, t, m) = (col("avg")?, col("target")?, col("memorization")?);
    let row = text
        .lines()
        .skip(1)
        .filter(|l| !l.split(',').nth(a).unwrap_or("").is_empty())
        .last()
        .ok_or_else(|| Error::Invalid("run CSV has no evaluation rows".into()))?;
    let f: Vec<&str> = row.split(',').collect();
    let num = |i: usize| -> Result<f64> {
        f[i].parse().map_err(|_| Error::Invalid(format!("bad number {:?}", f[i])))
    };
    Ok((num(a)?, num(t)?, num(m)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Avg,
    Target,
    Memorization,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Avg, Metric::Target, Metric::Memorization];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Avg => "avg",
            Metric::Target => "target",
            Metric::Memorization => "memorization",
        }
    }

    fn of(self, r: &ResultRow) -> MeanStd {
        match self {
            Metric::Avg => r.avg,
            Metric::Target => r.target,
            Metric::Memorization => r.memorization,
        }
    }
}

/// One plotted line: sorted, unique x with mean and std.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub metric: Metric,
    pub method: Method,
    pub holdout: i32,
    pub points: Vec<(f64, MeanStd)>,
}

impl Series {
    pub fn file_stem(&self) -> String {
        format!("series_{}_{}_h{}", self.metric.name(), self.method, self.holdout)
    }

    pub fn csv(&self, axis: SweepAxis) -> String {
        let mut s = format!("{axis},{},std\n", self.metric.name());
        for (x, v) in &self.points {
            let _ = writeln!(s, "{x},{},{}", v.mean, fmt_opt(v.std));
        }
        s
    }
}

pub fn series(table: &ResultTable, axis: SweepAxis) -> Result<Vec<Series>> {
    if axis == SweepAxis::None || table.sweep != axis {
        return Err(Error::Config(format!(
            "table has sweep axis {}, not {axis}",
            table.sweep
        )));
    }
    let mut groups: Vec<(Method, i32)> = Vec::new();
    for r in &table.rows {
        if !groups.contains(&(r.method, r.holdout)) {
            groups.push((r.method, r.holdout));
        }
    }
    let mut out = Vec::new();
    for metric in Metric::ALL {
        for &(method, holdout) in &groups {
            let mut points: Vec<(f64, MeanStd)> = table
                .rows
                .iter()
                .filter(|r| r.method == method && r.holdout == holdout)
                .filter_map(|r| r.sweep_value.map(|x| (x, metric.of(r))))
                .collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            points.dedup_by(|a, b| a.0 == b.0);
            out.push(Series {
                metric,
                method,
                holdout,
                points,
            });
        }
    }
    Ok(out)
}

/// Minimal line chart with one polyline per series, log-scaled x when
/// every x is positive and the range spans more than a decade.
pub fn svg_chart(title: &str, lines: &[&Series]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 48.0;
    let xs: Vec<f64> = lines.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let (xmin, xmax) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let log = xmin > 0.0 && xmax / xmin > 10.0;
    let tx = |x: f64| if log { x.ln() } else { x };
    let (x0, x1) = (tx(xmin), tx(xmax));
    let sx = |x: f64| {
        if x1 > x0 {
            PAD + (tx(x) - x0) / (x1 - x0) * (W - 2.0 * PAD)
        } else {
            W / 2.0
        }
    };
    let sy = |y: f64| H - PAD - y.clamp(0.0, 1.0) * (H - 2.0 * PAD);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{title}</text>", W / 2.0);
    let _ = writeln!(
        s,
        "<line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        H - PAD,
        W - PAD,
        H - PAD
    );
    let _ = writeln!(s, "<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>", H - PAD);
    for y in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y}</text>", PAD - 4.0, sy(y) + 4.0);
    }
    let mut ticks: Vec<f64> = xs.clone();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for x in ticks {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x}</text>", sx(x), H - PAD + 14.0);
    }
    for (i, line) in lines.iter().enumerate() {
        let color = colors[i % colors.len()];
        let pts: Vec<String> = line
            .points
            .iter()
            .map(|(x, v)| format!("{:.2},{:.2}", sx(*x), sy(v.mean)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{} h{}</text>",
            W - PAD - 70.0,
            PAD + 14.0 * i as f64,
            line.method,
            line.holdout
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Write one series CSV per (metric, method, holdout) and one SVG per
/// metric into `dir`. Returns the written paths.
pub fn emit_plot_data(table: &ResultTable, axis: SweepAxis, dir: &Path, svg: bool) -> Result<Vec<PathBuf>> {
    let all = series(table, axis)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for s in &all {
        let path = dir.join(format!("{}.csv", s.file_stem()));
        write_atomic(&path, s.csv(axis).as_bytes())?;
        written.push(path);
    }
    if svg {
        for metric in Metric::ALL {
            let lines: Vec<&Series> = all.iter().filter(|s| s.metric == metric).collect();
            let path = dir.join(format!("plot_{}.svg", metric.name()));
            let title = format!("{} accuracy vs {axis}", metric.name());
            write_atomic(&path, svg_chart(&title, &lines).as_bytes())?;
            written.push(path);
        }
    }
    Ok(written)
}
