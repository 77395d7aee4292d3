//! Continual-learning runs over a task sequence, their reports and CSV
//! output, plus the Monte Carlo sketch-quality batteries and the importance
//! approximation study.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::hashing::{splitmix64, task_seed, HashPair, TableHash};
use crate::importance::{
    approx_error_from_rows, bucketed_row_sums, build_block_diagonal, build_diagonal, build_full, build_low_rank,
    ImportanceRep, Regime, RowProducer,
};
use crate::linalg::{dot, norm_sq, Matrix};
use crate::nn::{AdamState, Mlp, MlpSpec};
use crate::regularizer::{sketched_rep, Anchor, Regularizer};
use crate::sketch::{online_merge, sketch_from_rows, AggregatedSketch, SketchState};
use crate::tasks::{Example, TaskSequence};

/// Separates the minibatch-order stream from the init stream.
const ORDER_SALT: u64 = 0x05ee_d0f0_da7a;

/// How the importance matrix is represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    None,
    Diagonal,
    Block,
    Sketched,
    LowRank,
    Full,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::None,
        Method::Diagonal,
        Method::Block,
        Method::Sketched,
        Method::LowRank,
        Method::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Diagonal => "diagonal",
            Method::Block => "block",
            Method::Sketched => "sketched",
            Method::LowRank => "lowrank",
            Method::Full => "full",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ewc" => Ok(Regime::Ewc),
            "mas" => Ok(Regime::Mas),
            _ => Err(Error::InvalidArgument(format!("unknown regime {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    pub regime: Regime,
    pub lambda: f64,
    pub alpha: f64,
    pub sketch_size: usize,
    pub block_size: usize,
    pub rank: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn synthetic(method: Method, regime: Regime, seed: u64) -> Self {
        RunConfig {
            method,
            regime,
            lambda: 1e3,
            alpha: 0.5,
            sketch_size: 50,
            block_size: 50,
            rank: 50,
            lr: 1e-3,
            epochs: 10,
            batch: 100,
            seed,
        }
    }

    pub fn pmnist(method: Method, regime: Regime, lambda: f64, seed: u64) -> Self {
        RunConfig {
            lambda,
            alpha: 0.25,
            lr: 1e-4,
            epochs: 5,
            ..RunConfig::synthetic(method, regime, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be finite and ≥ 0", self.lambda));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha {} outside (0, 1]", self.alpha));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.epochs == 0 || self.batch == 0 {
            return bad("epochs and batch size must be ≥ 1".into());
        }
        let needed = match self.method {
            Method::Sketched => ("sketch size", self.sketch_size),
            Method::Block => ("block size", self.block_size),
            Method::LowRank => ("rank", self.rank),
            _ => ("", 1),
        };
        if needed.1 == 0 {
            return bad(format!("{} must be ≥ 1", needed.0));
        }
        Ok(())
    }

    /// `key=value` pairs joined by `;`, echoed into the CSV.
    pub fn describe(&self) -> String {
        format!(
            "method={};regime={};lambda={};alpha={};sketch_size={};block_size={};rank={};lr={};epochs={};batch={};seed={};adam=0.9/0.999/1e-8;init=he-uniform",
            self.method,
            self.regime.name(),
            self.lambda,
            self.alpha,
            self.sketch_size,
            self.block_size,
            self.rank,
            self.lr,
            self.epochs,
            self.batch,
            self.seed
        )
    }
}

/// Test accuracies on every task seen so far, taken after one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// Task being trained.
    pub task: usize,
    /// Epoch within that task, from 1.
    pub epoch: usize,
    /// Epoch counted across the whole sequence, from 1.
    pub global_epoch: usize,
    pub train_loss: f64,
    /// Indexed by task, covering tasks `0..=task`.
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub run_id: String,
    pub config: RunConfig,
    pub records: Vec<EpochRecord>,
    /// Per-task accuracies after the final task.
    pub final_accuracies: Vec<f64>,
    /// Values held by the importance representation after each task.
    pub storage: Vec<usize>,
    pub final_params: Vec<f64>,
    /// Wall-clock seconds as `(phase, seconds)`; never written to the CSV.
    pub timings: Vec<(String, f64)>,
}

impl RunReport {
    pub fn final_average(&self) -> f64 {
        mean(&self.final_accuracies)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean accuracy over tasks `0..=through_task`, measured at the end of
/// training on `through_task`.
pub fn average_accuracy(report: &RunReport, through_task: usize) -> Result<f64> {
    let rec = report
        .records
        .iter()
        .rev()
        .find(|r| r.task == through_task)
        .ok_or(Error::OutOfRange {
            index: through_task,
            len: report.records.last().map_or(0, |r| r.task + 1),
        })?;
    Ok(mean(&rec.accuracies))
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax_predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = i;
        }
    }
    best
}

fn stack(examples: &[Example], dim: usize) -> Result<(Matrix, Vec<usize>)> {
    let mut xs = Matrix::zeros(examples.len(), dim);
    for (i, ex) in examples.iter().enumerate() {
        crate::error::check_len("example features", dim, ex.x.len())?;
        xs.row_mut(i).copy_from_slice(&ex.x);
    }
    Ok((xs, examples.iter().map(|e| e.y).collect()))
}

/// Predicted classes for `examples`, in order.
pub fn predict(net: &Mlp, theta: &[f64], examples: &[Example]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(1000) {
        let (xs, _) = stack(chunk, net.spec().input_dim())?;
        let logits = net.forward_batch(theta, &xs)?;
        out.extend(logits.row_iter().map(argmax_predict));
    }
    Ok(out)
}

pub fn accuracy(net: &Mlp, theta: &[f64], examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyStream);
    }
    let preds = predict(net, theta, examples)?;
    let hits = preds.iter().zip(examples).filter(|(p, e)| **p == e.y).count();
    Ok(hits as f64 / examples.len() as f64)
}

/// Importance history carried between tasks.
enum History {
    Matrix(Option<ImportanceRep>),
    Sketch(Option<AggregatedSketch>),
}

/// Collects rows from a fallible stream, stopping at the first error.
fn stream_rows<T>(
    rows: impl Iterator<Item = Result<Vec<f64>>>,
    build: impl FnOnce(&mut dyn Iterator<Item = Vec<f64>>) -> Result<T>,
) -> Result<T> {
    let mut err = None;
    let mut it = rows.map_while(|r| r.map_err(|e| err = Some(e)).ok());
    let out = build(&mut it);
    drop(it);
    match err {
        Some(e) => Err(e),
        None => out,
    }
}

/// The importance representation of one task's data at `anchor`, before
/// any aggregation. Sketched methods return `None` here; they aggregate on
/// the sketch side.
fn task_importance(cfg: &RunConfig, producer: &RowProducer<'_>, data: &[Example]) -> Result<ImportanceRep> {
    let n = data.len();
    match cfg.method {
        Method::Diagonal => stream_rows(producer.rows(data), |it| build_diagonal(it, n)),
        Method::Block => stream_rows(producer.rows(data), |it| build_block_diagonal(it, n, cfg.block_size)),
        Method::LowRank => build_low_rank(&producer.matrix(data)?, n, cfg.rank.min(n)),
        Method::Full => build_full(&producer.matrix(data)?, n),
        Method::None | Method::Sketched => unreachable!("no matrix-side importance for {}", cfg.method),
    }
}

/// Trains `spec` through every task of `seq` under `cfg`.
pub fn train_sequence(cfg: &RunConfig, spec: &MlpSpec, seq: &TaskSequence, run_id: &str) -> Result<RunReport> {
    cfg.validate()?;
    if seq.is_empty() {
        return Err(Error::InvalidArgument("empty task sequence".into()));
    }
    crate::error::check_len("network input width", spec.input_dim(), seq.input_dim)?;
    crate::error::check_len("network output width", spec.output_dim(), seq.classes)?;

    let net = Mlp::new(spec.clone())?;
    let mut theta = net.init_params(splitmix64(cfg.seed));
    let mut order_rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ ORDER_SALT));
    let mut history = match cfg.method {
        Method::Sketched => History::Sketch(None),
        _ => History::Matrix(None),
    };
    let mut reg: Option<Regularizer> = None;
    let mut records = Vec::new();
    let mut storage = Vec::new();
    let mut timings = Vec::new();
    let mut global_epoch = 0;

    for (k, task) in seq.tasks.iter().enumerate() {
        let start = Instant::now();
        let mut adam = AdamState::new(theta.len(), cfg.lr);
        let mut order: Vec<usize> = (0..task.n()).collect();
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut order_rng);
            let mut loss_sum = 0.0;
            for idx in order.chunks(cfg.batch) {
                let batch: Vec<Example> = idx.iter().map(|&i| task.train[i].clone()).collect();
                let (xs, ys) = stack(&batch, seq.input_dim)?;
                let (loss, mut grad) = net.backward(&theta, &xs, &ys)?;
                let mut total = loss;
                if let Some(r) = reg.as_ref().filter(|_| cfg.lambda > 0.0) {
                    total += cfg.lambda * r.eval(&theta)?;
                    crate::linalg::axpy(cfg.lambda, &r.grad(&theta)?, &mut grad);
                }
                if !total.is_finite() {
                    return Err(Error::NonFinite("training loss"));
                }
                loss_sum += total * idx.len() as f64;
                adam.step(&mut theta, &grad)?;
            }
            global_epoch += 1;
            let accuracies = seq.tasks[..=k]
                .iter()
                .map(|t| accuracy(&net, &theta, &t.test))
                .collect::<Result<Vec<_>>>()?;
            records.push(EpochRecord {
                task: k,
                epoch,
                global_epoch,
                train_loss: loss_sum / task.n() as f64,
                accuracies,
            });
        }
        timings.push((format!("train_task{k}"), start.elapsed().as_secs_f64()));

        // The last task's importance would never be used.
        if cfg.method == Method::None || k + 1 == seq.len() {
            continue;
        }
        let start = Instant::now();
        let producer = RowProducer::new(cfg.regime, &net, &theta)?;
        let rep = match &mut history {
            History::Sketch(agg) => {
                let hash = HashPair::new(cfg.sketch_size, task_seed(cfg.seed, k))?;
                let sketch = bucketed_row_sums(&task.train, &producer, hash)?;
                let merged = online_merge(agg.take(), &sketch, cfg.alpha)?;
                let rep = sketched_rep(&merged, task.n());
                *agg = Some(merged);
                rep
            }
            History::Matrix(prev) => {
                let new = task_importance(cfg, &producer, &task.train)?;
                let rep = ImportanceRep::moving_average(new, prev.take(), cfg.alpha)?;
                *prev = Some(rep.clone());
                rep
            }
        };
        storage.push(rep.storage_len());
        reg = Some(Regularizer::new(rep, Anchor::new(theta.clone(), k)?)?);
        timings.push((format!("importance_task{k}"), start.elapsed().as_secs_f64()));
    }

    let final_accuracies = records.last().expect("at least one epoch").accuracies.clone();
    Ok(RunReport {
        run_id: run_id.to_string(),
        config: cfg.clone(),
        records,
        final_accuracies,
        storage,
        final_params: theta,
        timings,
    })
}

pub const CSV_HEADER: &str = "run_id,method,regime,task,epoch,metric,value";

/// Writes the CSV header.
pub fn write_csv_header<W: Write>(out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")
}

/// Writes one run: a `config` metadata row, per-epoch rows and final rows.
/// Only deterministic quantities are written.
pub fn write_report_csv<W: Write>(out: &mut W, report: &RunReport) -> std::io::Result<()> {
    let c = &report.config;
    let prefix = format!("{},{},{}", report.run_id, c.method, c.regime.name());
    writeln!(out, "{prefix},,,config,{}", c.describe())?;
    for r in &report.records {
        let e = r.global_epoch;
        writeln!(out, "{prefix},{},{e},train_loss,{}", r.task, r.train_loss)?;
        for (j, a) in r.accuracies.iter().enumerate() {
            writeln!(out, "{prefix},{j},{e},accuracy,{a}")?;
        }
        writeln!(out, "{prefix},{},{e},average_accuracy,{}", r.task, mean(&r.accuracies))?;
    }
    let last = report.records.last().map_or(0, |r| r.global_epoch);
    for (j, a) in report.final_accuracies.iter().enumerate() {
        writeln!(out, "{prefix},{j},{last},final_accuracy,{a}")?;
    }
    for (j, s) in report.storage.iter().enumerate() {
        writeln!(out, "{prefix},{j},,importance_values,{s}")?;
    }
    writeln!(
        out,
        "{prefix},,{last},final_average_accuracy,{}",
        report.final_average()
    )
}

/// Outcome of a λ grid search: all runs and the index of the best one by
/// final average accuracy (first wins on ties).
#[derive(Debug, Clone)]
pub struct GridResult {
    pub runs: Vec<RunReport>,
    pub best: usize,
}

impl GridResult {
    pub fn best_run(&self) -> &RunReport {
        &self.runs[self.best]
    }
}

pub fn grid_search(
    base: &RunConfig,
    lambdas: &[f64],
    spec: &MlpSpec,
    seq: &TaskSequence,
    run_prefix: &str,
) -> Result<GridResult> {
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    let runs = lambdas
        .iter()
        .map(|&lambda| {
            let cfg = RunConfig { lambda, ..base.clone() };
            train_sequence(&cfg, spec, seq, &format!("{run_prefix}-l{lambda}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.final_average() > runs[best].final_average() {
            best = i;
        }
    }
    Ok(GridResult { runs, best })
}

// Sketch quality batteries.

/// Random `rows × cols` matrix `U diag(σ) Vᵀ` with orthonormal `U`, `V` and
/// `σᵢ = decay^i`, so `‖W‖₂ = 1`.
pub fn geometric_spectrum_matrix(rows: usize, cols: usize, decay: f64, seed: u64) -> Result<Matrix> {
    if cols > rows || cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "need 0 < cols ≤ rows, got {rows}×{cols}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = orthonormal_columns(rows, cols, &mut rng)?;
    let v = orthonormal_columns(cols, cols, &mut rng)?;
    let mut w = Matrix::zeros(rows, cols);
    for i in 0..cols {
        let s = decay.powi(i as i32);
        for r in 0..rows {
            let ur = u[(r, i)] * s;
            for c in 0..cols {
                w.as_mut_slice()[r * cols + c] += ur * v[(c, i)];
            }
        }
    }
    Ok(w)
}

/// Gram–Schmidt (twice) on Gaussian columns.
fn orthonormal_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while q.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for b in &q {
                let p = dot(&v, b);
                crate::linalg::axpy(-p, b, &mut v);
            }
        }
        let norm = norm_sq(&v).sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            q.push(v);
        }
    }
    Ok(Matrix::from_rows(&q)?.transpose())
}

fn gaussian_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = norm_sq(&v).sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Mean and standard error of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moment {
    pub mean: f64,
    pub se: f64,
}

impl Moment {
    fn of(samples: &[f64]) -> Moment {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Moment {
            mean,
            se: (var / n).sqrt(),
        }
    }

    /// `|mean − target|` in standard errors.
    pub fn z(&self, target: f64) -> f64 {
        (self.mean - target).abs() / self.se.max(f64::MIN_POSITIVE)
    }
}

/// Empirical moments of `S y` over fresh sketches.
#[derive(Debug, Clone)]
pub struct MomentBattery {
    pub norm_sq_over_t: f64,
    /// `E[(Sy)ᵢ]` for each coordinate.
    pub first: Vec<Moment>,
    /// `E[(Sy)ᵢ(Sy)ⱼ]` for `i < j`.
    pub cross: Vec<Moment>,
    /// `E[(Sy)ᵢ²]` for each coordinate.
    pub second: Vec<Moment>,
}

impl MomentBattery {
    /// Largest deviation, in standard errors, over every checked moment.
    pub fn max_z(&self) -> f64 {
        let f = self.first.iter().chain(&self.cross).map(|m| m.z(0.0));
        let s = self.second.iter().map(|m| m.z(self.norm_sq_over_t));
        f.chain(s).fold(0.0, f64::max)
    }
}

pub fn moment_battery(n: usize, t: usize, trials: usize, seed: u64) -> Result<MomentBattery> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut sy_all = Vec::with_capacity(trials);
    for trial in 0..trials {
        let h = HashPair::new(t, splitmix64(seed.wrapping_add(1 + trial as u64)))?;
        let mut sy = vec![0.0; t];
        for (i, &v) in y.iter().enumerate() {
            let (b, s) = h.eval(i);
            sy[b] += s * v;
        }
        sy_all.push(sy);
    }
    let col = |f: &dyn Fn(&[f64]) -> f64| Moment::of(&sy_all.iter().map(|s| f(s)).collect::<Vec<_>>());
    let first = (0..t).map(|i| col(&|s| s[i])).collect();
    let second = (0..t).map(|i| col(&|s| s[i] * s[i])).collect();
    let mut cross = Vec::new();
    for i in 0..t {
        for j in i + 1..t {
            cross.push(col(&|s| s[i] * s[j]));
        }
    }
    Ok(MomentBattery {
        norm_sq_over_t: norm_sq(&y) / t as f64,
        first,
        cross,
        second,
    })
}

/// Absolute errors `|‖S W θ‖² − ‖W θ‖²|` over fresh sketches and fresh unit
/// `θ`, one per trial.
pub fn embedding_errors(w: &Matrix, t: usize, trials: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|trial| {
            let theta = gaussian_unit(w.cols(), &mut rng);
            let s = sketch_from_rows(w.row_iter(), w.cols(), t, splitmix64(seed ^ (trial as u64 + 1)))?;
            let exact = norm_sq(&w.matvec(&theta)?);
            Ok((s.quad_norm(&theta)? - exact).abs())
        })
        .collect()
}

/// Deviations `|‖W̃_τ θ‖² − Σ αᵢ ‖Wᵢ θ‖²|` of the online aggregate built
/// with equal weights `αᵢ = 1/τ` over fresh sketches, at a fixed `θ`.
pub fn aggregate_deviations(ws: &[Matrix], theta: &[f64], t: usize, trials: usize, seed: u64) -> Result<Vec<f64>> {
    let tau = ws.len();
    if tau == 0 {
        return Err(Error::EmptyStream);
    }
    let mut target = 0.0;
    for w in ws {
        target += norm_sq(&w.matvec(theta)?) / tau as f64;
    }
    (0..trials)
        .map(|trial| {
            let mut agg = None;
            for (i, w) in ws.iter().enumerate() {
                let s = sketch_from_rows(w.row_iter(), w.cols(), t, task_seed(seed ^ trial as u64, i))?;
                // merging with 1/(i+1) leaves every task at weight 1/τ
                agg = Some(online_merge(agg, &s, 1.0 / (i + 1) as f64)?);
            }
            let agg = agg.expect("nonempty");
            Ok((norm_sq(&agg.matrix().matvec(theta)?) - target).abs())
        })
        .collect()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Largest `|R̃ − R|` over random `θ` with a signed-permutation sketch
/// (`t = n`), which reproduces `Ω` exactly.
pub fn signed_permutation_error(n: usize, m: usize, thetas: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..m).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let w = Matrix::from_rows(&rows)?;
    let mut state = SketchState::new(TableHash::signed_permutation(n, seed)?, m);
    for (i, r) in rows.iter().enumerate() {
        state.ingest_row(i, r)?;
    }
    let anchor = Anchor::new(vec![0.0; m], 0)?;
    let sk = Regularizer::new(crate::regularizer::sketched(state.into_matrix(), n), anchor.clone())?;
    let full = Regularizer::new(build_full(&w, n)?, anchor)?;
    let mut worst: f64 = 0.0;
    for _ in 0..thetas {
        let theta: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
        worst = worst.max((sk.eval(&theta)? - full.eval(&theta)?).abs());
    }
    Ok(worst)
}

/// One line of the sketch-quality report.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: String,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityConfig {
    pub seed: u64,
    pub moment_trials: usize,
    pub embedding_trials: usize,
    pub scaling_trials: usize,
}

impl Default for QualityConfig {
    fn default() -> Self {
        QualityConfig {
            seed: 0,
            moment_trials: 20_000,
            embedding_trials: 1_000,
            scaling_trials: 500,
        }
    }
}

pub const EMBED_SIZES: [usize; 3] = [16, 64, 256];

/// Runs every sketch battery on controlled inputs.
pub fn sketch_quality_suite(cfg: &QualityConfig) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let mut push = |name: String, value: f64, bound: &str, pass: bool| {
        checks.push(Check {
            name,
            value,
            bound: bound.to_string(),
            pass,
        })
    };

    let mb = moment_battery(64, 8, cfg.moment_trials, cfg.seed)?;
    let z = mb.max_z();
    push("moments_max_z".into(), z, "<= 4", z <= 4.0);

    // σᵢ = 0.7^i gives stable rank 1/(1 − 0.49) ≈ 1.96
    let w = geometric_spectrum_matrix(512, 64, 0.7, cfg.seed)?;
    let sr = crate::linalg::stable_rank(&w)?;
    push("embedding_stable_rank".into(), sr, "<= 2", sr <= 2.0);
    let spec_sq = crate::linalg::spectral_norm(&w)?.powi(2);
    let mut medians = Vec::new();
    for &t in &EMBED_SIZES {
        let errs = embedding_errors(&w, t, cfg.embedding_trials, cfg.seed ^ t as u64)?;
        if t == 64 {
            let ok = errs.iter().filter(|&&e| e <= spec_sq).count() as f64 / errs.len() as f64;
            push("embedding_within_eps_t64".into(), ok, ">= 0.97", ok >= 0.97);
        }
        let med = median(&errs);
        push(format!("embedding_median_t{t}"), med, "", true);
        medians.push(med);
    }
    let dec = medians.windows(2).all(|p| p[1] < p[0]);
    push("embedding_median_decreasing".into(), dec as u8 as f64, "== 1", dec);

    let ws = (0..3)
        .map(|i| geometric_spectrum_matrix(512, 64, 0.7, splitmix64(cfg.seed + 100 + i)))
        .collect::<Result<Vec<_>>>()?;
    let theta = gaussian_unit(64, &mut ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0xface)));
    let med = |t: usize| -> Result<f64> {
        Ok(median(&aggregate_deviations(
            &ws,
            &theta,
            t,
            cfg.scaling_trials,
            cfg.seed ^ (t as u64) << 8,
        )?))
    };
    for t in [16, 64] {
        let ratio = med(t)? / med(4 * t)?;
        push(
            format!("aggregate_ratio_t{t}_t{}", 4 * t),
            ratio,
            "in [1.4, 2.8]",
            (1.4..=2.8).contains(&ratio),
        );
    }

    let err = signed_permutation_error(32, 10, 100, cfg.seed)?;
    push("signed_permutation_max_abs".into(), err, "<= 1e-10", err <= 1e-10);
    Ok(checks)
}

pub fn write_checks_csv<W: Write>(out: &mut W, checks: &[Check]) -> std::io::Result<()> {
    writeln!(out, "check,value,bound,pass")?;
    for c in checks {
        writeln!(out, "{},{},{},{}", c.name, c.value, c.bound, c.pass)?;
    }
    Ok(())
}

// Importance approximation study.

/// Relative Frobenius errors of each representation against the exact
/// importance matrix of one trained task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApproxErrors {
    pub lowrank: f64,
    pub sketched: f64,
    pub block: f64,
    pub diagonal: f64,
}

/// Trains `spec` on the first task of `seq` and compares every
/// representation of its importance matrix with the exact one.
pub fn approx_error_study(cfg: &RunConfig, spec: &MlpSpec, seq: &TaskSequence) -> Result<ApproxErrors> {
    let first = TaskSequence::new(vec![seq.tasks[0].clone()], seq.input_dim, seq.classes)?;
    let plain = RunConfig {
        method: Method::None,
        ..cfg.clone()
    };
    let net = Mlp::new(spec.clone())?;
    let theta = train_sequence(&plain, spec, &first, "approx")?.final_params;
    let producer = RowProducer::new(cfg.regime, &net, &theta)?;
    let data = &first.tasks[0].train;
    let n = data.len();
    let w = producer.matrix(data)?;
    let hash = HashPair::new(cfg.sketch_size, task_seed(cfg.seed, 0))?;
    let sketched = crate::regularizer::sketched(bucketed_row_sums(data, &producer, hash)?.into_matrix(), n);
    Ok(ApproxErrors {
        lowrank: approx_error_from_rows(&build_low_rank(&w, n, cfg.rank.min(n))?, &w, n)?,
        sketched: approx_error_from_rows(&sketched, &w, n)?,
        block: approx_error_from_rows(&build_block_diagonal(w.row_iter(), n, cfg.block_size)?, &w, n)?,
        diagonal: approx_error_from_rows(&build_diagonal(w.row_iter(), n)?, &w, n)?,
    })
}
