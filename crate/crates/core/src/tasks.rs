//! Task sequences: the synthetic 2D benchmark, MNIST IDX loading, and
//! permuted-MNIST construction.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::hashing::splitmix64;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_PIXELS: usize = 784;

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: usize,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskDataset {
    /// Training-set size, the `n` of the importance normalization.
    pub fn n(&self) -> usize {
        self.train.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<TaskDataset>,
    pub input_dim: usize,
    pub classes: usize,
}

impl TaskSequence {
    pub fn new(tasks: Vec<TaskDataset>, input_dim: usize, classes: usize) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::InvalidArgument("empty task sequence".into()));
        }
        if tasks.windows(2).any(|w| w[0].task_id >= w[1].task_id) {
            return Err(Error::InvalidArgument("task ids must strictly increase".into()));
        }
        for ex in tasks.iter().flat_map(|t| t.train.iter().chain(&t.test)) {
            if ex.x.len() != input_dim {
                return Err(Error::DimensionMismatch {
                    context: "task example width",
                    expected: input_dim,
                    found: ex.x.len(),
                });
            }
            if ex.y >= classes {
                return Err(Error::InvalidLabel { label: ex.y, classes });
            }
        }
        Ok(TaskSequence {
            tasks,
            input_dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Keeps the first `k` tasks.
    pub fn truncate(mut self, k: usize) -> Self {
        self.tasks.truncate(k.max(1));
        self
    }

    /// One row per example: `task_id,label,x0,x1,...`.
    pub fn write_csv<W: Write>(&self, mut out: W, test_split: bool) -> std::io::Result<()> {
        write!(out, "task_id,label")?;
        for j in 0..self.input_dim {
            write!(out, ",x{j}")?;
        }
        writeln!(out)?;
        for t in &self.tasks {
            let split = if test_split { &t.test } else { &t.train };
            for ex in split {
                write!(out, "{},{}", t.task_id, ex.y)?;
                for v in &ex.x {
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

pub const SYNTHETIC_TASKS: usize = 5;
pub const SYNTHETIC_PER_CLASS: usize = 100;
const SYNTHETIC_OUTER_RADIUS: f64 = 2.0;
const SYNTHETIC_INNER_RADIUS: f64 = 0.8;
const SYNTHETIC_STD: f64 = 0.35;

/// Five binary tasks in the plane. Task `k` puts class 0 around angle
/// `2πk/5` on the radius-2 circle and class 1 diametrically opposite on the
/// radius-0.8 circle, isotropic std 0.35, 100 points per class in each of
/// train and test.
pub fn synthetic2d(seed: u64) -> TaskSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x5157_2d64));
    let noise = Normal::new(0.0, SYNTHETIC_STD).expect("positive std");
    let draw = |cx: f64, cy: f64, y: usize, rng: &mut ChaCha8Rng| Example {
        x: vec![cx + noise.sample(rng), cy + noise.sample(rng)],
        y,
    };
    let tasks = (0..SYNTHETIC_TASKS)
        .map(|k| {
            let angle = 2.0 * PI * k as f64 / SYNTHETIC_TASKS as f64;
            let c0 = (
                SYNTHETIC_OUTER_RADIUS * angle.cos(),
                SYNTHETIC_OUTER_RADIUS * angle.sin(),
            );
            let c1 = (
                -SYNTHETIC_INNER_RADIUS * angle.cos(),
                -SYNTHETIC_INNER_RADIUS * angle.sin(),
            );
            let split = |rng: &mut ChaCha8Rng| {
                let mut out = Vec::with_capacity(2 * SYNTHETIC_PER_CLASS);
                for _ in 0..SYNTHETIC_PER_CLASS {
                    out.push(draw(c0.0, c0.1, 0, rng));
                    out.push(draw(c1.0, c1.1, 1, rng));
                }
                out
            };
            let train = split(&mut rng);
            let test = split(&mut rng);
            TaskDataset {
                task_id: k,
                train,
                test,
            }
        })
        .collect();
    TaskSequence::new(tasks, 2, 2).expect("generator respects invariants")
}

/// Parsed IDX container.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    /// Pixels scaled to `[0, 1]`, shape `(count, rows, cols)`.
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        pixels: Vec<f64>,
    },
    Labels(Vec<u8>),
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Decodes an unsigned-byte IDX image (`0x00000803`) or label
/// (`0x00000801`) file.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = be_u32(bytes, 0)?;
    let ndims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        found => {
            return Err(Error::BadMagic {
                expected: IDX_IMAGES_MAGIC,
                found,
            })
        }
    };
    let dims: Vec<u32> = (0..ndims).map(|d| be_u32(bytes, 4 + 4 * d)).collect::<Result<_>>()?;
    let header = 4 + 4 * ndims;
    let body = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .and_then(|b| b.checked_add(header).map(|_| b))
        .ok_or_else(|| Error::DimensionOverflow(dims.clone()))?;
    if bytes.len() < header + body {
        return Err(Error::Truncated {
            expected: header + body,
            found: bytes.len(),
        });
    }
    let payload = &bytes[header..header + body];
    Ok(match magic {
        IDX_IMAGES_MAGIC => IdxData::Images {
            count: dims[0] as usize,
            rows: dims[1] as usize,
            cols: dims[2] as usize,
            pixels: payload.iter().map(|&b| b as f64 / 255.0).collect(),
        },
        _ => IdxData::Labels(payload.to_vec()),
    })
}

pub fn read_idx(path: &Path) -> Result<IdxData> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

fn expect_magic(data: IdxData, want: u32) -> Result<IdxData> {
    let found = match &data {
        IdxData::Images { .. } => IDX_IMAGES_MAGIC,
        IdxData::Labels(_) => IDX_LABELS_MAGIC,
    };
    if found == want {
        Ok(data)
    } else {
        Err(Error::BadMagic { expected: want, found })
    }
}

/// Labelled images from an IDX image/label file pair.
pub fn read_idx_examples(images: &Path, labels: &Path) -> Result<Vec<Example>> {
    let IdxData::Images {
        count,
        rows,
        cols,
        pixels,
    } = expect_magic(read_idx(images)?, IDX_IMAGES_MAGIC)?
    else {
        unreachable!("magic checked")
    };
    let IdxData::Labels(ys) = expect_magic(read_idx(labels)?, IDX_LABELS_MAGIC)? else {
        unreachable!("magic checked")
    };
    if ys.len() != count {
        return Err(Error::DimensionMismatch {
            context: "IDX label count",
            expected: count,
            found: ys.len(),
        });
    }
    let px = rows * cols;
    Ok(pixels
        .chunks_exact(px.max(1))
        .zip(ys)
        .map(|(x, y)| Example {
            x: x.to_vec(),
            y: y as usize,
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct Mnist {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// True when all four uncompressed MNIST files are present in `dir`.
pub fn mnist_available(dir: &Path) -> bool {
    MNIST_FILES.iter().all(|f| dir.join(f).is_file())
}

pub fn load_mnist(dir: &Path) -> Result<Mnist> {
    let f = |i: usize| dir.join(MNIST_FILES[i]);
    Ok(Mnist {
        train: read_idx_examples(&f(0), &f(1))?,
        test: read_idx_examples(&f(2), &f(3))?,
    })
}

/// A fixed reordering of pixel positions: `out[i] = img[perm[i]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelPermutation {
    pub perm: Vec<usize>,
    pub seed: Option<u64>,
}

impl PixelPermutation {
    pub fn identity(len: usize) -> Self {
        PixelPermutation {
            perm: (0..len).collect(),
            seed: None,
        }
    }

    pub fn random(len: usize, seed: u64) -> Self {
        let mut perm: Vec<usize> = (0..len).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        PixelPermutation { perm, seed: Some(seed) }
    }

    pub fn apply(&self, img: &[f64]) -> Vec<f64> {
        self.perm.iter().map(|&p| img[p]).collect()
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        PixelPermutation {
            perm: inv,
            seed: self.seed,
        }
    }
}

/// Permuted-MNIST tasks over a seeded subsample of the base data. Task 0
/// keeps the original pixel order; later tasks get fresh permutations. The
/// same subsample indices serve every task.
pub fn permuted_mnist(
    base: &Mnist,
    num_tasks: usize,
    subsample: usize,
    test_subsample: usize,
    seed: u64,
) -> Result<TaskSequence> {
    if num_tasks == 0 {
        return Err(Error::InvalidArgument("num_tasks must be ≥ 1".into()));
    }
    if subsample > base.train.len() || test_subsample > base.test.len() {
        return Err(Error::InvalidArgument(format!(
            "subsample {subsample}/{test_subsample} exceeds base size {}/{}",
            base.train.len(),
            base.test.len()
        )));
    }
    let width = base.train.first().map_or(MNIST_PIXELS, |e| e.x.len());
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    let mut train_idx: Vec<usize> = (0..base.train.len()).collect();
    train_idx.shuffle(&mut rng);
    train_idx.truncate(subsample);
    let mut test_idx: Vec<usize> = (0..base.test.len()).collect();
    test_idx.shuffle(&mut rng);
    test_idx.truncate(test_subsample);

    let tasks = (0..num_tasks)
        .map(|k| {
            let perm = if k == 0 {
                PixelPermutation::identity(width)
            } else {
                PixelPermutation::random(width, splitmix64(seed.wrapping_add(k as u64)))
            };
            let pick = |src: &[Example], idx: &[usize]| {
                idx.iter()
                    .map(|&i| Example {
                        x: perm.apply(&src[i].x),
                        y: src[i].y,
                    })
                    .collect()
            };
            TaskDataset {
                task_id: k,
                train: pick(&base.train, &train_idx),
                test: pick(&base.test, &test_idx),
            }
        })
        .collect();
    TaskSequence::new(tasks, width, 10)
}
