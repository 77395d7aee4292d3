//! Seedable k-wise independent hash families over the Mersenne prime field
//! `p = 2^61 - 1`.
//!
//! Bucket hashing uses a random degree-1 polynomial (2-wise independent);
//! signs use a random degree-3 polynomial (4-wise independent) whose low bit
//! picks `±1`. Keys are example indices within a task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MERSENNE_61: u64 = (1 << 61) - 1;

#[inline]
fn reduce(x: u128) -> u64 {
    // x mod 2^61-1 for x < 2^122
    let lo = (x as u64) & MERSENNE_61;
    let hi = (x >> 61) as u64;
    let mut r = lo + hi;
    while r >= MERSENNE_61 {
        r -= MERSENNE_61;
    }
    r
}

#[inline]
fn mul_add(acc: u64, x: u64, c: u64) -> u64 {
    let r = reduce(acc as u128 * x as u128) + c;
    if r >= MERSENNE_61 {
        r - MERSENNE_61
    } else {
        r
    }
}

/// Horner evaluation of `coeffs[0] x^d + ... + coeffs[d]` over the field.
#[inline]
fn poly_eval(coeffs: &[u64], key: u64) -> u64 {
    let x = key % MERSENNE_61;
    coeffs.iter().fold(0u64, |acc, &c| mul_add(acc, x, c))
}

/// A bucket hash `h: index → [0, t)` paired with a sign hash
/// `σ: index → {−1, +1}`, both derived from one seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashPair {
    t: usize,
    seed: u64,
    bucket_coeffs: [u64; 2],
    sign_coeffs: [u64; 4],
}

impl HashPair {
    pub fn new(t: usize, seed: u64) -> Result<Self> {
        if t == 0 {
            return Err(Error::InvalidArgument("bucket count t must be ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bucket_coeffs = [rng.random_range(1..MERSENNE_61), rng.random_range(0..MERSENNE_61)];
        let sign_coeffs = [
            rng.random_range(0..MERSENNE_61),
            rng.random_range(0..MERSENNE_61),
            rng.random_range(0..MERSENNE_61),
            rng.random_range(0..MERSENNE_61),
        ];
        Ok(HashPair {
            t,
            seed,
            bucket_coeffs,
            sign_coeffs,
        })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn bucket(&self, index: usize) -> usize {
        (poly_eval(&self.bucket_coeffs, index as u64) % self.t as u64) as usize
    }

    #[inline]
    pub fn sign(&self, index: usize) -> f64 {
        if poly_eval(&self.sign_coeffs, index as u64) & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    #[inline]
    pub fn eval(&self, index: usize) -> (usize, f64) {
        (self.bucket(index), self.sign(index))
    }
}

/// Explicit bucket/sign tables. Used for pinned test hashes and for the
/// signed-permutation mode where `t = n` and buckets are a bijection.
#[derive(Debug, Clone, PartialEq)]
pub struct TableHash {
    t: usize,
    buckets: Vec<usize>,
    signs: Vec<f64>,
}

impl TableHash {
    pub fn new(t: usize, buckets: Vec<usize>, signs: Vec<f64>) -> Result<Self> {
        if t == 0 {
            return Err(Error::InvalidArgument("bucket count t must be ≥ 1".into()));
        }
        if buckets.len() != signs.len() {
            return Err(Error::DimensionMismatch {
                context: "TableHash::new",
                expected: buckets.len(),
                found: signs.len(),
            });
        }
        if let Some(&b) = buckets.iter().find(|&&b| b >= t) {
            return Err(Error::OutOfRange { index: b, len: t });
        }
        if signs.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(Error::InvalidArgument("signs must be ±1".into()));
        }
        Ok(TableHash { t, buckets, signs })
    }

    /// Random signed permutation of `n` indices into `n` buckets.
    pub fn signed_permutation(n: usize, seed: u64) -> Result<Self> {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buckets: Vec<usize> = (0..n).collect();
        buckets.shuffle(&mut rng);
        let signs = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        TableHash::new(n, buckets, signs)
    }

    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }
}

/// The hash that routes rows of `W` into sketch buckets.
#[derive(Debug, Clone, PartialEq)]
pub enum SketchHash {
    Polynomial(HashPair),
    Table(TableHash),
}

impl SketchHash {
    pub fn t(&self) -> usize {
        match self {
            SketchHash::Polynomial(h) => h.t,
            SketchHash::Table(h) => h.t,
        }
    }

    /// Seed for polynomial hashes; table hashes report 0.
    pub fn seed(&self) -> u64 {
        match self {
            SketchHash::Polynomial(h) => h.seed,
            SketchHash::Table(_) => 0,
        }
    }

    pub fn eval(&self, index: usize) -> Result<(usize, f64)> {
        match self {
            SketchHash::Polynomial(h) => Ok(h.eval(index)),
            SketchHash::Table(h) => match (h.buckets.get(index), h.signs.get(index)) {
                (Some(&b), Some(&s)) => Ok((b, s)),
                _ => Err(Error::OutOfRange {
                    index,
                    len: h.buckets.len(),
                }),
            },
        }
    }
}

impl From<HashPair> for SketchHash {
    fn from(h: HashPair) -> Self {
        SketchHash::Polynomial(h)
    }
}

impl From<TableHash> for SketchHash {
    fn from(h: TableHash) -> Self {
        SketchHash::Table(h)
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Per-task hash seed, independent across task indices.
pub fn task_seed(master_seed: u64, task_index: usize) -> u64 {
    splitmix64(master_seed ^ task_index as u64)
}
