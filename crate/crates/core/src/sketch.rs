//! Streaming CountSketch of gradient rows and the online `√α` aggregation
//! of sketches across tasks.

use crate::error::{check_len, Error, Result};
use crate::hashing::{HashPair, SketchHash};
use crate::linalg::{axpy, Matrix};

/// A `t × m` CountSketch `S W` accumulated one row of `W` at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchState {
    w_tilde: Matrix,
    hash: SketchHash,
    n_rows_ingested: usize,
}

impl SketchState {
    pub fn new(hash: impl Into<SketchHash>, m: usize) -> Self {
        let hash = hash.into();
        SketchState {
            w_tilde: Matrix::zeros(hash.t(), m),
            hash,
            n_rows_ingested: 0,
        }
    }

    /// Restores a checkpointed sketch.
    pub fn from_parts(hash: impl Into<SketchHash>, w_tilde: Matrix, n_rows_ingested: usize) -> Result<Self> {
        let hash = hash.into();
        check_len("SketchState::from_parts", hash.t(), w_tilde.rows())?;
        Ok(SketchState {
            w_tilde,
            hash,
            n_rows_ingested,
        })
    }

    pub fn t(&self) -> usize {
        self.w_tilde.rows()
    }

    pub fn m(&self) -> usize {
        self.w_tilde.cols()
    }

    pub fn hash(&self) -> &SketchHash {
        &self.hash
    }

    pub fn n_rows_ingested(&self) -> usize {
        self.n_rows_ingested
    }

    /// True when no rows have been ingested; the sketch is then all zeros.
    pub fn is_empty(&self) -> bool {
        self.n_rows_ingested == 0
    }

    pub fn matrix(&self) -> &Matrix {
        &self.w_tilde
    }

    pub fn into_matrix(self) -> Matrix {
        self.w_tilde
    }

    /// `W̃[h(i)] += σ(i) · row`.
    pub fn ingest_row(&mut self, row_index: usize, row: &[f64]) -> Result<()> {
        check_len("SketchState::ingest_row", self.m(), row.len())?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sketch row"));
        }
        let (bucket, sign) = self.hash.eval(row_index)?;
        axpy(sign, row, self.w_tilde.row_mut(bucket));
        self.n_rows_ingested += 1;
        Ok(())
    }

    /// Adds an already signed bucket sum `Σ_{i∈G_k} σ(i) rowᵢ` covering
    /// `rows` examples.
    pub fn add_bucket_sum(&mut self, bucket: usize, signed_sum: &[f64], rows: usize) -> Result<()> {
        check_len("SketchState::add_bucket_sum", self.m(), signed_sum.len())?;
        if bucket >= self.t() {
            return Err(Error::OutOfRange {
                index: bucket,
                len: self.t(),
            });
        }
        if signed_sum.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sketch bucket sum"));
        }
        axpy(1.0, signed_sum, self.w_tilde.row_mut(bucket));
        self.n_rows_ingested += rows;
        Ok(())
    }

    /// Folds a partial sketch built with the same hash over a disjoint set of
    /// rows into this one.
    pub fn absorb(&mut self, other: &SketchState) -> Result<()> {
        if self.hash != other.hash {
            return Err(Error::InvalidArgument("partial sketches must share a hash".into()));
        }
        self.w_tilde.add_scaled(&other.w_tilde, 1.0)?;
        self.n_rows_ingested += other.n_rows_ingested;
        Ok(())
    }

    /// `‖W̃ θ‖²`.
    pub fn quad_norm(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.w_tilde.matvec(theta)?.iter().map(|v| v * v).sum())
    }
}

/// One-pass sketch of a row stream of width `m`. Row `i` of the stream is
/// keyed by its position. An empty stream yields a zero sketch whose
/// [`SketchState::is_empty`] flag is set.
pub fn sketch_from_rows<I, R>(rows: I, m: usize, t: usize, seed: u64) -> Result<SketchState>
where
    I: IntoIterator<Item = R>,
    R: AsRef<[f64]>,
{
    let mut state = SketchState::new(HashPair::new(t, seed)?, m);
    for (i, row) in rows.into_iter().enumerate() {
        state.ingest_row(i, row.as_ref())?;
    }
    Ok(state)
}

/// `√α`-weighted running sum of per-task sketches.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedSketch {
    w_tau: Matrix,
    task_count: usize,
}

impl AggregatedSketch {
    /// The first task's sketch is taken as-is.
    pub fn first(sketch: &SketchState) -> Self {
        AggregatedSketch {
            w_tau: sketch.w_tilde.clone(),
            task_count: 1,
        }
    }

    pub fn from_parts(w_tau: Matrix, task_count: usize) -> Result<Self> {
        if task_count == 0 {
            return Err(Error::InvalidArgument("task_count must be ≥ 1".into()));
        }
        Ok(AggregatedSketch { w_tau, task_count })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.w_tau
    }

    pub fn task_count(&self) -> usize {
        self.task_count
    }

    /// `W̃_τ ← √α W̃ + √(1−α) W̃_{τ−1}`.
    pub fn merge(&mut self, new: &SketchState, alpha: f64) -> Result<()> {
        check_alpha(alpha)?;
        check_len("AggregatedSketch::merge rows", self.w_tau.rows(), new.t())?;
        check_len("AggregatedSketch::merge cols", self.w_tau.cols(), new.m())?;
        self.w_tau.scale((1.0 - alpha).sqrt());
        self.w_tau.add_scaled(&new.w_tilde, alpha.sqrt())?;
        self.task_count += 1;
        Ok(())
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1]")))
    }
}

/// Aggregation step with the first-task convention: with no history the new
/// sketch becomes the aggregate unchanged.
pub fn online_merge(prev: Option<AggregatedSketch>, new: &SketchState, alpha: f64) -> Result<AggregatedSketch> {
    check_alpha(alpha)?;
    match prev {
        None => Ok(AggregatedSketch::first(new)),
        Some(mut agg) => {
            agg.merge(new, alpha)?;
            Ok(agg)
        }
    }
}
