//! Per-example gradient rows for EWC and MAS and the five importance-matrix
//! representations built from them.
//!
//! Every representation stands for a PSD matrix `Ω̃ ≈ Ω = WᵀW / n` where the
//! rows of `W` are per-example gradients evaluated at the anchor weights.

use crate::error::{check_len, Error, Result};
use crate::hashing::SketchHash;
use crate::linalg::{axpy, dot, svd, Matrix};
use crate::nn::{Mlp, Objective};
use crate::sketch::{check_alpha, SketchState};
use crate::tasks::Example;

/// Largest `m` for which `m × m` matrices are materialized.
pub const DENSE_LIMIT: usize = 20_000;

/// Caps the activations held by one bucket's backward pass.
const BUCKET_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    Ewc,
    Mas,
}

impl Regime {
    pub fn objective(self) -> Objective {
        match self {
            Regime::Ewc => Objective::CrossEntropy,
            Regime::Mas => Objective::SquaredOutputNorm,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Ewc => "ewc",
            Regime::Mas => "mas",
        }
    }
}

/// `∇_θ ℓ(x, y; θ)` for the cross-entropy loss.
pub fn ewc_row(net: &Mlp, x: &[f64], y: usize, theta: &[f64]) -> Result<Vec<f64>> {
    single_row(net, x, y, theta, Objective::CrossEntropy)
}

/// `∇_θ ‖φ(x; θ)‖²` on the logits.
pub fn mas_row(net: &Mlp, x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    single_row(net, x, 0, theta, Objective::SquaredOutputNorm)
}

fn single_row(net: &Mlp, x: &[f64], y: usize, theta: &[f64], obj: Objective) -> Result<Vec<f64>> {
    check_len("row features", net.spec().input_dim(), x.len())?;
    let xs = Matrix::from_vec(1, x.len(), x.to_vec())?;
    Ok(net.weighted_gradient(theta, &xs, &[y], &[1.0], obj)?.1)
}

/// Produces rows of `W` for one regime at fixed anchor weights.
#[derive(Debug, Clone)]
pub struct RowProducer<'a> {
    pub regime: Regime,
    pub net: &'a Mlp,
    pub anchor: &'a [f64],
}

impl<'a> RowProducer<'a> {
    pub fn new(regime: Regime, net: &'a Mlp, anchor: &'a [f64]) -> Result<Self> {
        check_len("anchor", net.param_count(), anchor.len())?;
        Ok(RowProducer { regime, net, anchor })
    }

    pub fn m(&self) -> usize {
        self.net.param_count()
    }

    pub fn row(&self, ex: &Example) -> Result<Vec<f64>> {
        single_row(self.net, &ex.x, ex.y, self.anchor, self.regime.objective())
    }

    /// Streams one row per example, in dataset order.
    pub fn rows<'b>(&'b self, data: &'b [Example]) -> impl Iterator<Item = Result<Vec<f64>>> + 'b {
        data.iter().map(move |ex| self.row(ex))
    }

    /// All rows stacked into an `n × m` matrix.
    pub fn matrix(&self, data: &[Example]) -> Result<Matrix> {
        let rows = self.rows(data).collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Err(Error::EmptyStream);
        }
        Matrix::from_rows(&rows)
    }

    /// `Σᵢ wᵢ rowᵢ` as the gradient of the weighted objective sum.
    pub fn weighted_sum(&self, data: &[&Example], weights: &[f64]) -> Result<Vec<f64>> {
        check_len("weighted_sum", data.len(), weights.len())?;
        let mut total = vec![0.0; self.m()];
        for (chunk, w) in data.chunks(BUCKET_CHUNK).zip(weights.chunks(BUCKET_CHUNK)) {
            let d = self.net.spec().input_dim();
            let mut xs = Matrix::zeros(chunk.len(), d);
            for (i, ex) in chunk.iter().enumerate() {
                check_len("row features", d, ex.x.len())?;
                xs.row_mut(i).copy_from_slice(&ex.x);
            }
            let labels: Vec<usize> = chunk.iter().map(|e| e.y).collect();
            let (_, g) = self
                .net
                .weighted_gradient(self.anchor, &xs, &labels, w, self.regime.objective())?;
            axpy(1.0, &g, &mut total);
        }
        Ok(total)
    }
}

/// Builds `S W` with one backward pass per bucket: the signed sum of rows in
/// bucket `k` is the gradient of the signed sum of per-example objectives.
pub fn bucketed_row_sums(
    data: &[Example],
    producer: &RowProducer<'_>,
    hash: impl Into<SketchHash>,
) -> Result<SketchState> {
    let mut state = SketchState::new(hash, producer.m());
    let t = state.t();
    let mut groups: Vec<(Vec<&Example>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); t];
    for (i, ex) in data.iter().enumerate() {
        let (b, s) = state.hash().eval(i)?;
        groups[b].0.push(ex);
        groups[b].1.push(s);
    }
    for (k, (members, signs)) in groups.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let sum = producer.weighted_sum(members, signs)?;
        state.add_bucket_sum(k, &sum, members.len())?;
    }
    Ok(state)
}

/// An importance matrix `Ω̃` in one of five storage forms.
#[derive(Debug, Clone, PartialEq)]
pub enum ImportanceRep {
    /// `diag(Ω̃)`.
    Diagonal(Vec<f64>),
    /// Contiguous `b × b` diagonal blocks; the last may be smaller.
    BlockDiagonal {
        block_size: usize,
        blocks: Vec<Matrix>,
    },
    /// `Ω̃ = W̃ᵀW̃ / n`.
    Sketched {
        w_tilde: Matrix,
        n: usize,
    },
    /// `Ω̃ = FᵀF` with `F` of shape `k × m`.
    LowRank {
        factors: Matrix,
    },
    Full(Matrix),
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::InvalidArgument("n must be ≥ 1".into()))
    } else {
        Ok(())
    }
}

fn check_dense(m: usize) -> Result<()> {
    if m > DENSE_LIMIT {
        Err(Error::TooLarge { m, limit: DENSE_LIMIT })
    } else {
        Ok(())
    }
}

/// `dⱼ = (1/n) Σ rowⱼ²`. Rows are consumed as a stream.
pub fn build_diagonal<I, R>(rows: I, n: usize) -> Result<ImportanceRep>
where
    I: IntoIterator<Item = R>,
    R: AsRef<[f64]>,
{
    check_n(n)?;
    let mut d: Option<Vec<f64>> = None;
    for r in rows {
        let r = r.as_ref();
        let d = d.get_or_insert_with(|| vec![0.0; r.len()]);
        check_len("build_diagonal", d.len(), r.len())?;
        for (dj, v) in d.iter_mut().zip(r) {
            *dj += v * v;
        }
    }
    let mut d = d.ok_or(Error::EmptyStream)?;
    d.iter_mut().for_each(|v| *v /= n as f64);
    Ok(ImportanceRep::Diagonal(d))
}

pub fn build_block_diagonal<I, R>(rows: I, n: usize, block_size: usize) -> Result<ImportanceRep>
where
    I: IntoIterator<Item = R>,
    R: AsRef<[f64]>,
{
    check_n(n)?;
    if block_size == 0 {
        return Err(Error::InvalidArgument("block size must be ≥ 1".into()));
    }
    let mut acc: Option<(usize, Vec<Matrix>)> = None;
    for r in rows {
        let r = r.as_ref();
        let (m, blocks) = acc.get_or_insert_with(|| {
            let m = r.len();
            let blocks = (0..m)
                .step_by(block_size)
                .map(|s| {
                    let len = block_size.min(m - s);
                    Matrix::zeros(len, len)
                })
                .collect();
            (m, blocks)
        });
        check_len("build_block_diagonal", *m, r.len())?;
        for (bi, blk) in blocks.iter_mut().enumerate() {
            let s = bi * block_size;
            let seg = &r[s..s + blk.rows()];
            for (i, &a) in seg.iter().enumerate() {
                if a != 0.0 {
                    axpy(a, seg, blk.row_mut(i));
                }
            }
        }
    }
    let (_, mut blocks) = acc.ok_or(Error::EmptyStream)?;
    let inv = 1.0 / n as f64;
    blocks.iter_mut().for_each(|b| b.scale(inv));
    Ok(ImportanceRep::BlockDiagonal { block_size, blocks })
}

/// Best rank-`k` PSD approximation of `WᵀW / n`.
pub fn build_low_rank(w: &Matrix, n: usize, k: usize) -> Result<ImportanceRep> {
    check_n(n)?;
    if w.rows() == 0 {
        return Err(Error::EmptyStream);
    }
    check_dense(w.cols())?;
    let s = svd(w, k)?;
    let scale = 1.0 / (n as f64).sqrt();
    let mut factors = Matrix::zeros(k, w.cols());
    for i in 0..k {
        let sigma = s.spectrum.singular_values[i] * scale;
        for j in 0..w.cols() {
            factors[(i, j)] = sigma * s.v[(j, i)];
        }
    }
    Ok(ImportanceRep::LowRank { factors })
}

pub fn build_full(w: &Matrix, n: usize) -> Result<ImportanceRep> {
    check_n(n)?;
    if w.rows() == 0 {
        return Err(Error::EmptyStream);
    }
    check_dense(w.cols())?;
    let mut omega = w.gram();
    omega.scale(1.0 / n as f64);
    Ok(ImportanceRep::Full(omega))
}

impl ImportanceRep {
    pub fn m(&self) -> usize {
        match self {
            ImportanceRep::Diagonal(d) => d.len(),
            ImportanceRep::BlockDiagonal { blocks, .. } => blocks.iter().map(|b| b.rows()).sum(),
            ImportanceRep::Sketched { w_tilde, .. } => w_tilde.cols(),
            ImportanceRep::LowRank { factors } => factors.cols(),
            ImportanceRep::Full(o) => o.cols(),
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            ImportanceRep::Diagonal(_) => "diagonal",
            ImportanceRep::BlockDiagonal { .. } => "block",
            ImportanceRep::Sketched { .. } => "sketched",
            ImportanceRep::LowRank { .. } => "lowrank",
            ImportanceRep::Full(_) => "full",
        }
    }

    /// Number of stored reals.
    pub fn storage_len(&self) -> usize {
        match self {
            ImportanceRep::Diagonal(d) => d.len(),
            ImportanceRep::BlockDiagonal { blocks, .. } => blocks.iter().map(|b| b.as_slice().len()).sum(),
            ImportanceRep::Sketched { w_tilde, .. } => w_tilde.as_slice().len(),
            ImportanceRep::LowRank { factors } => factors.as_slice().len(),
            ImportanceRep::Full(o) => o.as_slice().len(),
        }
    }

    /// `Ω̃ v`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("ImportanceRep::apply", self.m(), v.len())?;
        Ok(match self {
            ImportanceRep::Diagonal(d) => d.iter().zip(v).map(|(a, b)| a * b).collect(),
            ImportanceRep::BlockDiagonal { blocks, .. } => {
                let mut out = Vec::with_capacity(v.len());
                let mut s = 0;
                for b in blocks {
                    out.extend(b.matvec(&v[s..s + b.rows()])?);
                    s += b.rows();
                }
                out
            }
            ImportanceRep::Sketched { w_tilde, n } => {
                let mut out = w_tilde.matvec_t(&w_tilde.matvec(v)?)?;
                out.iter_mut().for_each(|x| *x /= *n as f64);
                out
            }
            ImportanceRep::LowRank { factors } => factors.matvec_t(&factors.matvec(v)?)?,
            ImportanceRep::Full(o) => o.matvec(v)?,
        })
    }

    /// `vᵀ Ω̃ v`.
    pub fn quad_form(&self, v: &[f64]) -> Result<f64> {
        check_len("ImportanceRep::quad_form", self.m(), v.len())?;
        Ok(match self {
            ImportanceRep::Diagonal(d) => d.iter().zip(v).map(|(a, b)| a * b * b).sum(),
            ImportanceRep::Sketched { w_tilde, n } => w_tilde.matvec(v)?.iter().map(|x| x * x).sum::<f64>() / *n as f64,
            ImportanceRep::LowRank { factors } => factors.matvec(v)?.iter().map(|x| x * x).sum(),
            _ => dot(v, &self.apply(v)?),
        })
    }

    /// `m × m` dense form. Refused above [`DENSE_LIMIT`].
    pub fn densify(&self) -> Result<Matrix> {
        let m = self.m();
        check_dense(m)?;
        Ok(match self {
            ImportanceRep::Diagonal(d) => Matrix::from_diag(d),
            ImportanceRep::BlockDiagonal { blocks, .. } => {
                let mut out = Matrix::zeros(m, m);
                let mut s = 0;
                for b in blocks {
                    for i in 0..b.rows() {
                        out.row_mut(s + i)[s..s + b.cols()].copy_from_slice(b.row(i));
                    }
                    s += b.rows();
                }
                out
            }
            ImportanceRep::Sketched { w_tilde, n } => w_tilde.gram().scaled(1.0 / *n as f64),
            ImportanceRep::LowRank { factors } => factors.gram(),
            ImportanceRep::Full(o) => o.clone(),
        })
    }

    /// `‖Ω̃‖_F²` without forming `Ω̃` for the factored variants.
    pub fn frobenius_sq(&self) -> f64 {
        match self {
            ImportanceRep::Diagonal(d) => d.iter().map(|v| v * v).sum(),
            ImportanceRep::BlockDiagonal { blocks, .. } => blocks.iter().map(|b| b.frobenius_sq()).sum(),
            ImportanceRep::Sketched { w_tilde, n } => w_tilde.outer_gram().frobenius_sq() / (*n as f64).powi(2),
            ImportanceRep::LowRank { factors } => factors.outer_gram().frobenius_sq(),
            ImportanceRep::Full(o) => o.frobenius_sq(),
        }
    }

    /// Matrix moving average `α Ω̃_new + (1−α) Ω̃_prev`, with the first task
    /// taken as-is. Low-rank factors are stacked, which is exact. A sketched
    /// representation cannot be averaged on the matrix side; its history
    /// lives in an [`AggregatedSketch`](crate::sketch::AggregatedSketch).
    pub fn moving_average(new: ImportanceRep, prev: Option<ImportanceRep>, alpha: f64) -> Result<ImportanceRep> {
        check_alpha(alpha)?;
        let Some(prev) = prev else {
            return Ok(new);
        };
        check_len("moving_average", prev.m(), new.m())?;
        let (a, b) = (alpha, 1.0 - alpha);
        match (new, prev) {
            (ImportanceRep::Diagonal(mut d), ImportanceRep::Diagonal(p)) => {
                for (x, y) in d.iter_mut().zip(&p) {
                    *x = a * *x + b * y;
                }
                Ok(ImportanceRep::Diagonal(d))
            }
            (
                ImportanceRep::BlockDiagonal { block_size, mut blocks },
                ImportanceRep::BlockDiagonal {
                    block_size: pb,
                    blocks: prev_blocks,
                },
            ) if block_size == pb => {
                for (x, y) in blocks.iter_mut().zip(&prev_blocks) {
                    x.scale(a);
                    x.add_scaled(y, b)?;
                }
                Ok(ImportanceRep::BlockDiagonal { block_size, blocks })
            }
            (ImportanceRep::LowRank { factors: f }, ImportanceRep::LowRank { factors: p }) => {
                let m = f.cols();
                let mut data = Vec::with_capacity((f.rows() + p.rows()) * m);
                data.extend(f.as_slice().iter().map(|v| v * a.sqrt()));
                if b > 0.0 {
                    data.extend(p.as_slice().iter().map(|v| v * b.sqrt()));
                }
                let rows = data.len() / m.max(1);
                Ok(ImportanceRep::LowRank {
                    factors: Matrix::from_vec(rows, m, data)?,
                })
            }
            (ImportanceRep::Full(mut o), ImportanceRep::Full(p)) => {
                o.scale(a);
                o.add_scaled(&p, b)?;
                Ok(ImportanceRep::Full(o))
            }
            (new, prev) => Err(Error::InvalidArgument(format!(
                "cannot average {} with {}",
                new.variant_name(),
                prev.variant_name()
            ))),
        }
    }
}

/// `‖Ω̃ − Ω‖_F² / ‖Ω‖_F²` against a materialized `Ω`.
pub fn approx_error(rep: &ImportanceRep, full: &Matrix) -> Result<f64> {
    check_len("approx_error", full.cols(), rep.m())?;
    crate::linalg::frobenius_rel_error(&rep.densify()?, full)
}

/// Same quantity as [`approx_error`] with `Ω = WᵀW / n` given by its rows,
/// expanded as `‖Ω̃‖² − 2⟨Ω̃, Ω⟩ + ‖Ω‖²` so nothing `m × m` is formed.
pub fn approx_error_from_rows(rep: &ImportanceRep, w: &Matrix, n: usize) -> Result<f64> {
    check_n(n)?;
    check_len("approx_error_from_rows", rep.m(), w.cols())?;
    let nf = n as f64;
    let target = w.outer_gram().frobenius_sq() / (nf * nf);
    if target == 0.0 {
        return Err(Error::ZeroMatrix("relative Frobenius error"));
    }
    let mut inner = 0.0;
    for r in w.row_iter() {
        inner += rep.quad_form(r)?;
    }
    inner /= nf;
    let err = rep.frobenius_sq() - 2.0 * inner + target;
    Ok(err.max(0.0) / target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashing::{HashPair, TableHash};
    use crate::linalg::{frobenius_rel_error, symmetric_eigen};
    use crate::nn::MlpSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_w(n: usize, m: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(n, m, (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rows_of(w: &Matrix) -> Vec<Vec<f64>> {
        w.row_iter().map(|r| r.to_vec()).collect()
    }

    /// Ω = WᵀW / n by explicit triple loop.
    fn gram_oracle(w: &Matrix, n: usize) -> Matrix {
        let m = w.cols();
        let mut o = Matrix::zeros(m, m);
        for r in w.row_iter() {
            for i in 0..m {
                for j in 0..m {
                    o[(i, j)] += r[i] * r[j];
                }
            }
        }
        o.scale(1.0 / n as f64);
        o
    }

    fn examples(n: usize, d: usize, k: usize, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| Example {
                x: (0..d).map(|_| rng.random_range(-1.5..1.5)).collect(),
                y: i % k,
            })
            .collect()
    }

    #[test]
    fn ewc_row_logistic_scalar() {
        // two-logit net with logits (θx, 0) is logistic regression on θx
        let net = Mlp::new(MlpSpec::new(vec![1, 2], false).unwrap()).unwrap();
        let g = ewc_row(&net, &[1.0], 0, &[0.0, 0.0]).unwrap();
        assert!((g[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn mas_row_scalar() {
        let net = Mlp::new(MlpSpec::new(vec![1, 1], false).unwrap()).unwrap();
        assert!((mas_row(&net, &[3.0], &[2.0]).unwrap()[0] - 36.0).abs() < 1e-12);
        assert_eq!(mas_row(&net, &[0.0], &[2.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn rows_vanish_for_zero_input_no_bias() {
        let net = Mlp::new(MlpSpec::new(vec![3, 4, 2], false).unwrap()).unwrap();
        let theta = net.init_params(1);
        assert!(ewc_row(&net, &[0.0; 3], 1, &theta).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rows_match_finite_differences() {
        let net = Mlp::new(MlpSpec::new(vec![2, 6, 3], true).unwrap()).unwrap();
        let theta = net.init_params(4);
        let x = [0.7, -1.1];
        let ewc = ewc_row(&net, &x, 2, &theta).unwrap();
        let mas = mas_row(&net, &x, &theta).unwrap();
        let h = 1e-5;
        let mut tp = theta.clone();
        for j in 0..theta.len() {
            let eval = |t: &[f64]| {
                let z = net.forward(t, &x).unwrap();
                (
                    crate::nn::xent_loss(&z, 2).unwrap(),
                    z.iter().map(|v| v * v).sum::<f64>(),
                )
            };
            tp[j] = theta[j] + h;
            let (lp, np) = eval(&tp);
            tp[j] = theta[j] - h;
            let (lm, nm) = eval(&tp);
            tp[j] = theta[j];
            for (an, fd) in [(ewc[j], (lp - lm) / (2.0 * h)), (mas[j], (np - nm) / (2.0 * h))] {
                let scale = an.abs().max(fd.abs()).max(1e-4);
                assert!((an - fd).abs() / scale <= 1e-6);
            }
        }
    }

    #[test]
    fn diagonal_examples() {
        let w = [1.0, -2.0, 3.0];
        assert_eq!(
            build_diagonal([w], 1).unwrap(),
            ImportanceRep::Diagonal(vec![1.0, 4.0, 9.0])
        );
        assert_eq!(
            build_diagonal([[0.0; 4]; 3], 3).unwrap(),
            ImportanceRep::Diagonal(vec![0.0; 4])
        );
        assert!(matches!(
            build_diagonal(Vec::<Vec<f64>>::new(), 1),
            Err(Error::EmptyStream)
        ));
        let wm = rand_w(20, 10, 1);
        let ImportanceRep::Diagonal(d) = build_diagonal(rows_of(&wm), 20).unwrap() else {
            panic!()
        };
        let oracle = gram_oracle(&wm, 20);
        for j in 0..10 {
            assert!((d[j] - oracle[(j, j)]).abs() <= 1e-12);
        }
        let ImportanceRep::Full(full) = build_full(&wm, 20).unwrap() else {
            panic!()
        };
        for (a, b) in d.iter().zip(full.diag()) {
            assert!((a - b).abs() <= 1e-14);
        }
    }

    #[test]
    fn block_examples() {
        let w = rand_w(9, 7, 2);
        let rows = rows_of(&w);
        let oracle = gram_oracle(&w, 9);
        let blk = build_block_diagonal(&rows, 9, 3).unwrap();
        let ImportanceRep::BlockDiagonal { blocks, .. } = &blk else {
            panic!()
        };
        assert_eq!(blocks.iter().map(|b| b.rows()).collect::<Vec<_>>(), vec![3, 3, 1]);
        for (bi, s) in [0usize, 3, 6].iter().enumerate() {
            let b = &blocks[bi];
            for i in 0..b.rows() {
                for j in 0..b.cols() {
                    assert!((b[(i, j)] - oracle[(s + i, s + j)]).abs() <= 1e-12);
                }
            }
        }
        let dense_full = build_block_diagonal(&rows, 9, 7).unwrap().densify().unwrap();
        assert!(frobenius_rel_error(&dense_full, &oracle).unwrap() < 1e-28);
        let as_diag = build_block_diagonal(&rows, 9, 1).unwrap().densify().unwrap();
        let diag = build_diagonal(&rows, 9).unwrap().densify().unwrap();
        assert!(frobenius_rel_error(&as_diag, &diag).unwrap() < 1e-28);
    }

    #[test]
    fn full_examples() {
        let w = [1.0, 2.0, -1.0];
        let ImportanceRep::Full(o) = build_full(&Matrix::from_rows(&[w]).unwrap(), 1).unwrap() else {
            panic!()
        };
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(o[(i, j)], w[i] * w[j]);
            }
        }
        let wm = rand_w(15, 8, 3);
        let ImportanceRep::Full(o) = build_full(&wm, 15).unwrap() else {
            panic!()
        };
        let oracle = gram_oracle(&wm, 15);
        for (a, b) in o.as_slice().iter().zip(oracle.as_slice()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!(matches!(
            build_full(&Matrix::zeros(1, DENSE_LIMIT + 1), 1),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn low_rank_examples() {
        // rank-1 W
        let u = [1.0, -1.0, 2.0, 0.5];
        let v = [0.3, 0.1, -0.7, 1.2, 0.0];
        let mut w = Matrix::zeros(4, 5);
        for i in 0..4 {
            for j in 0..5 {
                w[(i, j)] = u[i] * v[j];
            }
        }
        let full = build_full(&w, 4).unwrap().densify().unwrap();
        let r1 = build_low_rank(&w, 4, 1).unwrap();
        assert!(approx_error(&r1, &full).unwrap() <= 1e-10);

        let w = rand_w(12, 6, 4);
        let full = build_full(&w, 12).unwrap().densify().unwrap();
        assert!(approx_error(&build_low_rank(&w, 12, 6).unwrap(), &full).unwrap() <= 1e-10);

        // spectral identity through an independent eigendecomposition of Ω
        let lam = symmetric_eigen(&full).unwrap().values;
        let total: f64 = lam.iter().map(|l| l * l).sum();
        let expected = 1.0 - (lam[0] * lam[0] + lam[1] * lam[1]) / total;
        let got = approx_error(&build_low_rank(&w, 12, 2).unwrap(), &full).unwrap();
        assert!((got - expected).abs() <= 1e-8);
        assert!(build_low_rank(&w, 12, 7).is_err());
    }

    #[test]
    fn approx_error_examples() {
        let w = rand_w(10, 6, 5);
        let full = build_full(&w, 10).unwrap();
        let dense = full.densify().unwrap();
        assert_eq!(approx_error(&full, &dense).unwrap(), 0.0);
        let diag_omega = Matrix::from_diag(&[1.0, 2.0, 3.0]);
        let d = ImportanceRep::Diagonal(diag_omega.diag());
        assert_eq!(approx_error(&d, &diag_omega).unwrap(), 0.0);
        assert!(approx_error(&d, &dense).is_err());
    }

    #[test]
    fn factored_error_matches_dense() {
        let (n, m) = (30, 12);
        let w = rand_w(n, m, 6);
        let rows = rows_of(&w);
        let dense = build_full(&w, n).unwrap().densify().unwrap();
        let sk = crate::sketch::sketch_from_rows(&rows, m, 5, 9).unwrap();
        let reps = vec![
            build_diagonal(&rows, n).unwrap(),
            build_block_diagonal(&rows, n, 5).unwrap(),
            ImportanceRep::Sketched {
                w_tilde: sk.into_matrix(),
                n,
            },
            build_low_rank(&w, n, 3).unwrap(),
            build_full(&w, n).unwrap(),
        ];
        for rep in &reps {
            let a = approx_error(rep, &dense).unwrap();
            let b = approx_error_from_rows(rep, &w, n).unwrap();
            assert!((a - b).abs() <= 1e-10, "{}: {a} vs {b}", rep.variant_name());
        }
    }

    #[test]
    fn every_rep_is_psd_and_symmetric() {
        let (n, m) = (25, 9);
        let w = rand_w(n, m, 7);
        let rows = rows_of(&w);
        let sk = crate::sketch::sketch_from_rows(&rows, m, 4, 3).unwrap();
        let reps = vec![
            build_diagonal(&rows, n).unwrap(),
            build_block_diagonal(&rows, n, 4).unwrap(),
            ImportanceRep::Sketched {
                w_tilde: sk.into_matrix(),
                n,
            },
            build_low_rank(&w, n, 2).unwrap(),
            build_full(&w, n).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for rep in &reps {
            let dense = rep.densify().unwrap();
            assert!(frobenius_rel_error(&dense.transpose(), &dense).unwrap() < 1e-28);
            let mut min_q = f64::INFINITY;
            for _ in 0..100 {
                let v: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
                let q = rep.quad_form(&v).unwrap();
                let qd = dot(&v, &dense.matvec(&v).unwrap());
                assert!((q - qd).abs() <= 1e-10 * (1.0 + qd.abs()));
                min_q = min_q.min(q);
            }
            assert!(min_q >= -1e-9);
        }
    }

    #[test]
    fn moving_average_matches_dense() {
        let (n, m) = (10, 6);
        let w1 = rand_w(n, m, 10);
        let w2 = rand_w(n, m, 11);
        let alpha = 0.3;
        let want = {
            let mut d = build_full(&w2, n).unwrap().densify().unwrap().scaled(alpha);
            d.add_scaled(&build_full(&w1, n).unwrap().densify().unwrap(), 1.0 - alpha)
                .unwrap();
            d
        };
        let lr = ImportanceRep::moving_average(
            build_low_rank(&w2, n, 6).unwrap(),
            Some(build_low_rank(&w1, n, 6).unwrap()),
            alpha,
        )
        .unwrap();
        assert!(frobenius_rel_error(&lr.densify().unwrap(), &want).unwrap() < 1e-20);
        let full = ImportanceRep::moving_average(build_full(&w2, n).unwrap(), Some(build_full(&w1, n).unwrap()), alpha)
            .unwrap();
        assert!(frobenius_rel_error(&full.densify().unwrap(), &want).unwrap() < 1e-28);
        let first = build_diagonal(rows_of(&w1), n).unwrap();
        assert_eq!(
            ImportanceRep::moving_average(first.clone(), None, alpha).unwrap(),
            first
        );
        assert!(ImportanceRep::moving_average(first.clone(), Some(full), alpha).is_err());
    }

    #[test]
    fn bucketed_matches_per_example_ingestion() {
        let net = Mlp::new(MlpSpec::new(vec![3, 7, 4], true).unwrap()).unwrap();
        let theta = net.init_params(12);
        let data = examples(50, 3, 4, 13);
        for regime in [Regime::Ewc, Regime::Mas] {
            let prod = RowProducer::new(regime, &net, &theta).unwrap();
            let hash = HashPair::new(6, 14).unwrap();
            let fast = bucketed_row_sums(&data, &prod, hash.clone()).unwrap();
            let mut slow = SketchState::new(hash, net.param_count());
            for (i, ex) in data.iter().enumerate() {
                slow.ingest_row(i, &prod.row(ex).unwrap()).unwrap();
            }
            for (a, b) in fast.matrix().as_slice().iter().zip(slow.matrix().as_slice()) {
                assert!((a - b).abs() <= 1e-10);
            }
            assert_eq!(fast.n_rows_ingested(), 50);
        }
    }

    #[test]
    fn single_bucket_all_plus_is_dataset_gradient() {
        let net = Mlp::new(MlpSpec::new(vec![2, 5, 3], true).unwrap()).unwrap();
        let theta = net.init_params(15);
        let data = examples(20, 2, 3, 16);
        let prod = RowProducer::new(Regime::Ewc, &net, &theta).unwrap();
        let hash = TableHash::new(1, vec![0; 20], vec![1.0; 20]).unwrap();
        let sk = bucketed_row_sums(&data, &prod, hash).unwrap();
        let xs = Matrix::from_rows(&data.iter().map(|e| e.x.clone()).collect::<Vec<_>>()).unwrap();
        let ys: Vec<usize> = data.iter().map(|e| e.y).collect();
        let (_, mean_grad) = net.backward(&theta, &xs, &ys).unwrap();
        for (a, b) in sk.matrix().row(0).iter().zip(&mean_grad) {
            assert!((a - 20.0 * b).abs() <= 1e-10);
        }
        // a single example lands as ±row
        let one = &data[..1];
        let sk1 = bucketed_row_sums(one, &prod, HashPair::new(3, 1).unwrap()).unwrap();
        let row = prod.row(&one[0]).unwrap();
        let hit: Vec<_> = sk1
            .matrix()
            .row_iter()
            .filter(|r| r.iter().any(|&v| v != 0.0))
            .collect();
        assert_eq!(hit.len(), 1);
        assert!(hit[0].iter().zip(&row).all(|(a, b)| (a.abs() - b.abs()).abs() < 1e-14));
    }
}
