//! The quadratic structural penalty `R(θ) = ½ (θ−θ*)ᵀ Ω̃ (θ−θ*)` and its
//! gradient for every importance representation.

use crate::error::{check_len, Error, Result};
use crate::importance::ImportanceRep;
use crate::linalg::{norm_sq, Matrix};
use crate::sketch::AggregatedSketch;

#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub theta_star: Vec<f64>,
    pub task_id: usize,
}

impl Anchor {
    pub fn new(theta_star: Vec<f64>, task_id: usize) -> Result<Self> {
        if theta_star.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("anchor"));
        }
        Ok(Anchor { theta_star, task_id })
    }

    fn delta(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_len("regularizer theta", self.theta_star.len(), theta.len())?;
        Ok(theta.iter().zip(&self.theta_star).map(|(a, b)| a - b).collect())
    }
}

#[derive(Debug, Clone)]
pub struct Regularizer {
    rep: ImportanceRep,
    anchor: Anchor,
}

impl Regularizer {
    pub fn new(rep: ImportanceRep, anchor: Anchor) -> Result<Self> {
        check_len("regularizer anchor", rep.m(), anchor.theta_star.len())?;
        Ok(Regularizer { rep, anchor })
    }

    pub fn rep(&self) -> &ImportanceRep {
        &self.rep
    }

    pub fn anchor(&self) -> &Anchor {
        &self.anchor
    }

    pub fn eval(&self, theta: &[f64]) -> Result<f64> {
        let delta = self.anchor.delta(theta)?;
        Ok(0.5 * self.rep.quad_form(&delta)?.max(0.0))
    }

    pub fn grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let delta = self.anchor.delta(theta)?;
        self.rep.apply(&delta)
    }
}

/// `(1/2n) ‖W̃_τ (θ − θ*)‖²` on an aggregated sketch.
pub fn online_eval(aggregate: &AggregatedSketch, anchor: &Anchor, n: usize, theta: &[f64]) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be ≥ 1".into()));
    }
    check_len("online_eval", aggregate.matrix().cols(), theta.len())?;
    let delta = anchor.delta(theta)?;
    Ok(norm_sq(&aggregate.matrix().matvec(&delta)?) / (2.0 * n as f64))
}

/// Wraps an aggregated sketch as a sketched importance representation.
pub fn sketched_rep(aggregate: &AggregatedSketch, n: usize) -> ImportanceRep {
    ImportanceRep::Sketched {
        w_tilde: aggregate.matrix().clone(),
        n,
    }
}

/// Convenience for the sketched handle built straight from a matrix.
pub fn sketched(w_tilde: Matrix, n: usize) -> ImportanceRep {
    ImportanceRep::Sketched { w_tilde, n }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::{build_block_diagonal, build_diagonal, build_full, build_low_rank};
    use crate::linalg::dot;
    use crate::sketch::{online_merge, sketch_from_rows};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(m: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn all_reps(n: usize, m: usize, seed: u64) -> Vec<ImportanceRep> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(m, &mut rng)).collect();
        let w = Matrix::from_rows(&rows).unwrap();
        vec![
            build_diagonal(&rows, n).unwrap(),
            build_block_diagonal(&rows, n, 3).unwrap(),
            sketched(sketch_from_rows(&rows, m, 4, seed).unwrap().into_matrix(), n),
            build_low_rank(&w, n, 2).unwrap(),
            build_full(&w, n).unwrap(),
        ]
    }

    #[test]
    fn zero_at_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let star = rand_vec(7, &mut rng);
        for rep in all_reps(12, 7, 2) {
            let r = Regularizer::new(rep, Anchor::new(star.clone(), 0).unwrap()).unwrap();
            assert_eq!(r.eval(&star).unwrap(), 0.0);
            assert!(r.grad(&star).unwrap().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn identity_sketch_unit_delta() {
        let r = Regularizer::new(sketched(Matrix::identity(4), 1), Anchor::new(vec![0.0; 4], 0).unwrap()).unwrap();
        assert_eq!(r.eval(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.5);
    }

    #[test]
    fn sketched_matches_quadratic_form_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let wt = Matrix::from_vec(3, 5, (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let n = 7;
        let star = rand_vec(5, &mut rng);
        let theta = rand_vec(5, &mut rng);
        let omega = wt.gram().scaled(1.0 / n as f64);
        let d: Vec<f64> = theta.iter().zip(&star).map(|(a, b)| a - b).collect();
        let want = 0.5 * dot(&d, &omega.matvec(&d).unwrap());
        let r = Regularizer::new(sketched(wt, n), Anchor::new(star, 0).unwrap()).unwrap();
        assert!((r.eval(&theta).unwrap() - want).abs() <= 1e-12);
    }

    #[test]
    fn diagonal_grad_exact() {
        let d = vec![0.5, 2.0, 0.0];
        let r = Regularizer::new(
            ImportanceRep::Diagonal(d.clone()),
            Anchor::new(vec![1.0, 1.0, 1.0], 0).unwrap(),
        )
        .unwrap();
        let theta = [2.0, -1.0, 4.0];
        assert_eq!(r.grad(&theta).unwrap(), vec![0.5, -4.0, 0.0]);
    }

    #[test]
    fn grad_matches_finite_differences_every_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = 8;
        let star = rand_vec(m, &mut rng);
        let theta = rand_vec(m, &mut rng);
        for rep in all_reps(15, m, 5) {
            let name = rep.variant_name();
            let r = Regularizer::new(rep, Anchor::new(star.clone(), 0).unwrap()).unwrap();
            let g = r.grad(&theta).unwrap();
            let h = 1e-5;
            let mut tp = theta.clone();
            for j in 0..m {
                tp[j] = theta[j] + h;
                let fp = r.eval(&tp).unwrap();
                tp[j] = theta[j] - h;
                let fm = r.eval(&tp).unwrap();
                tp[j] = theta[j];
                let fd = (fp - fm) / (2.0 * h);
                let scale = g[j].abs().max(fd.abs()).max(1e-4);
                assert!((g[j] - fd).abs() / scale <= 1e-6, "{name} coord {j}");
            }
        }
    }

    #[test]
    fn length_mismatch() {
        let r = Regularizer::new(
            ImportanceRep::Diagonal(vec![1.0; 3]),
            Anchor::new(vec![0.0; 3], 0).unwrap(),
        )
        .unwrap();
        assert!(r.eval(&[0.0; 2]).is_err());
        assert!(r.grad(&[0.0; 4]).is_err());
        assert!(Regularizer::new(
            ImportanceRep::Diagonal(vec![1.0; 3]),
            Anchor::new(vec![0.0; 2], 0).unwrap()
        )
        .is_err());
    }

    #[test]
    fn online_eval_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = 5;
        let n = 20;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(m, &mut rng)).collect();
        let star = Anchor::new(rand_vec(m, &mut rng), 1).unwrap();
        let theta = rand_vec(m, &mut rng);
        let s1 = sketch_from_rows(&rows, m, 4, 1).unwrap();
        let s2 = sketch_from_rows(&rows, m, 4, 2).unwrap();

        let single = Regularizer::new(sketched(s1.matrix().clone(), n), star.clone()).unwrap();
        let agg = online_merge(None, &s1, 0.5).unwrap();
        assert!((online_eval(&agg, &star, n, &theta).unwrap() - single.eval(&theta).unwrap()).abs() < 1e-14);

        let agg = online_merge(Some(agg), &s2, 1.0).unwrap();
        let latest = Regularizer::new(sketched(s2.matrix().clone(), n), star.clone()).unwrap();
        assert!((online_eval(&agg, &star, n, &theta).unwrap() - latest.eval(&theta).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn online_eval_unbiased_for_moving_average() {
        // E over independent seed pairs of R̃₂ equals ½ δᵀ(α W₂ᵀW₂ + (1−α) W₁ᵀW₁)δ / n
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, m, t, alpha) = (40, 6, 5, 0.5);
        let w1: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(m, &mut rng)).collect();
        let w2: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(m, &mut rng)).collect();
        let star = Anchor::new(vec![0.0; m], 1).unwrap();
        let theta = rand_vec(m, &mut rng);

        let dense = |rows: &[Vec<f64>]| Matrix::from_rows(rows).unwrap().gram();
        let mut avg = dense(&w2).scaled(alpha);
        avg.add_scaled(&dense(&w1), 1.0 - alpha).unwrap();
        let want = 0.5 * dot(&theta, &avg.matvec(&theta).unwrap()) / n as f64;

        let trials = 10_000u64;
        let samples: Vec<f64> = (0..trials)
            .map(|s| {
                let a = sketch_from_rows(&w1, m, t, 2 * s).unwrap();
                let b = sketch_from_rows(&w2, m, t, 2 * s + 1).unwrap();
                let agg = online_merge(Some(online_merge(None, &a, alpha).unwrap()), &b, alpha).unwrap();
                online_eval(&agg, &star, n, &theta).unwrap()
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / trials as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        let se = (var / trials as f64).sqrt();
        assert!((mean - want).abs() <= 3.0 * se, "mean {mean} want {want} se {se}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn nonnegative_and_quadratic(seed in any::<u64>(), c in -20.0f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = 6;
            let star = rand_vec(m, &mut rng);
            let v = rand_vec(m, &mut rng);
            for rep in all_reps(9, m, seed) {
                let r = Regularizer::new(rep, Anchor::new(star.clone(), 0).unwrap()).unwrap();
                let at = |s: f64| {
                    let th: Vec<f64> = star.iter().zip(&v).map(|(a, b)| a + s * b).collect();
                    r.eval(&th).unwrap()
                };
                let base = at(1.0);
                prop_assert!(base >= 0.0);
                prop_assert!((at(c) - c * c * base).abs() <= 1e-9 * (1.0 + c * c * base));
            }
        }
    }
}
