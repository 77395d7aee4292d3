//! Flat binary checkpoints for sketches, importance representations and
//! parameter vectors.
//!
//! Layout (little endian): magic `SKRG`, `u32` version, `u8` variant tag,
//! `u32` header length `h`, `h × u64` header fields, `u64` value count, then
//! the row-major `f64` values.
//!
//! | tag | variant    | header                          |
//! |-----|------------|---------------------------------|
//! | 1   | sketch     | t, m, seed, rows ingested       |
//! | 2   | aggregate  | t, m, seed, n, task count       |
//! | 3   | diagonal   | m                               |
//! | 4   | block      | m, block size                   |
//! | 5   | sketched   | t, m, n                         |
//! | 6   | low-rank   | k, m                            |
//! | 7   | full       | m                               |
//! | 8   | parameters | bias flag, layer widths...      |

use std::path::Path;

use crate::error::{Error, Result};
use crate::hashing::{HashPair, SketchHash};
use crate::importance::ImportanceRep;
use crate::linalg::Matrix;
use crate::nn::MlpSpec;
use crate::sketch::{AggregatedSketch, SketchState};

const MAGIC: &[u8; 4] = b"SKRG";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Tag {
    Sketch = 1,
    Aggregate = 2,
    Diagonal = 3,
    Block = 4,
    Sketched = 5,
    LowRank = 6,
    Full = 7,
    Params = 8,
}

impl Tag {
    fn from_u8(b: u8) -> Result<Tag> {
        Ok(match b {
            1 => Tag::Sketch,
            2 => Tag::Aggregate,
            3 => Tag::Diagonal,
            4 => Tag::Block,
            5 => Tag::Sketched,
            6 => Tag::LowRank,
            7 => Tag::Full,
            8 => Tag::Params,
            other => return Err(Error::BadDump(format!("unknown variant tag {other}"))),
        })
    }
}

/// A decoded dump before interpretation.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub tag: Tag,
    pub header: Vec<u64>,
    pub values: Vec<f64>,
}

impl Record {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 + 1 + 4 + 8 * (self.header.len() + 1 + self.values.len()));
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.push(self.tag as u8);
        out.extend((self.header.len() as u32).to_le_bytes());
        for h in &self.header {
            out.extend(h.to_le_bytes());
        }
        out.extend((self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend(v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Record> {
        let mut cur = Cursor { bytes, at: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::BadDump("missing SKRG magic".into()));
        }
        let version = u32::from_le_bytes(cur.array()?);
        if version != VERSION {
            return Err(Error::BadDump(format!("unsupported version {version}")));
        }
        let tag = Tag::from_u8(cur.take(1)?[0])?;
        let h = u32::from_le_bytes(cur.array()?) as usize;
        let header = (0..h)
            .map(|_| cur.array().map(u64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        let count = u64::from_le_bytes(cur.array()?) as usize;
        if bytes.len() - cur.at != count.saturating_mul(8) {
            return Err(Error::Truncated {
                expected: cur.at + count.saturating_mul(8),
                found: bytes.len(),
            });
        }
        let values = (0..count)
            .map(|_| cur.array().map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        Ok(Record { tag, header, values })
    }

    fn expect(&self, tag: Tag, header_len: usize) -> Result<()> {
        if self.tag != tag {
            return Err(Error::BadDump(format!("expected {tag:?}, found {:?}", self.tag)));
        }
        if self.header.len() != header_len {
            return Err(Error::BadDump(format!(
                "{tag:?} header has {} fields, expected {header_len}",
                self.header.len()
            )));
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.at..self.at + k).ok_or(Error::Truncated {
            expected: self.at + k,
            found: self.bytes.len(),
        })?;
        self.at += k;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
}

fn matrix(rows: u64, cols: u64, values: Vec<f64>) -> Result<Matrix> {
    Matrix::from_vec(rows as usize, cols as usize, values)
}

pub fn sketch_record(s: &SketchState) -> Result<Record> {
    let SketchHash::Polynomial(h) = s.hash() else {
        return Err(Error::InvalidArgument("only seeded hashes can be checkpointed".into()));
    };
    Ok(Record {
        tag: Tag::Sketch,
        header: vec![s.t() as u64, s.m() as u64, h.seed(), s.n_rows_ingested() as u64],
        values: s.matrix().as_slice().to_vec(),
    })
}

pub fn sketch_from_record(r: Record) -> Result<SketchState> {
    r.expect(Tag::Sketch, 4)?;
    let (t, m, seed, rows) = (r.header[0], r.header[1], r.header[2], r.header[3]);
    let w = matrix(t, m, r.values)?;
    SketchState::from_parts(HashPair::new(t as usize, seed)?, w, rows as usize)
}

pub fn aggregate_record(a: &AggregatedSketch, master_seed: u64, n: usize) -> Record {
    let w = a.matrix();
    Record {
        tag: Tag::Aggregate,
        header: vec![
            w.rows() as u64,
            w.cols() as u64,
            master_seed,
            n as u64,
            a.task_count() as u64,
        ],
        values: w.as_slice().to_vec(),
    }
}

/// Returns the aggregate with its master seed and `n`.
pub fn aggregate_from_record(r: Record) -> Result<(AggregatedSketch, u64, usize)> {
    r.expect(Tag::Aggregate, 5)?;
    let h = &r.header;
    let (seed, n, tasks) = (h[2], h[3] as usize, h[4] as usize);
    let w = matrix(h[0], h[1], r.values)?;
    Ok((AggregatedSketch::from_parts(w, tasks)?, seed, n))
}

pub fn importance_record(rep: &ImportanceRep) -> Record {
    let m = rep.m() as u64;
    match rep {
        ImportanceRep::Diagonal(d) => Record {
            tag: Tag::Diagonal,
            header: vec![m],
            values: d.clone(),
        },
        ImportanceRep::BlockDiagonal { block_size, blocks } => Record {
            tag: Tag::Block,
            header: vec![m, *block_size as u64],
            values: blocks.iter().flat_map(|b| b.as_slice().iter().copied()).collect(),
        },
        ImportanceRep::Sketched { w_tilde, n } => Record {
            tag: Tag::Sketched,
            header: vec![w_tilde.rows() as u64, m, *n as u64],
            values: w_tilde.as_slice().to_vec(),
        },
        ImportanceRep::LowRank { factors } => Record {
            tag: Tag::LowRank,
            header: vec![factors.rows() as u64, m],
            values: factors.as_slice().to_vec(),
        },
        ImportanceRep::Full(o) => Record {
            tag: Tag::Full,
            header: vec![m],
            values: o.as_slice().to_vec(),
        },
    }
}

pub fn importance_from_record(r: Record) -> Result<ImportanceRep> {
    Ok(match r.tag {
        Tag::Diagonal => {
            r.expect(Tag::Diagonal, 1)?;
            if r.values.len() as u64 != r.header[0] {
                return Err(Error::BadDump("diagonal length mismatch".into()));
            }
            ImportanceRep::Diagonal(r.values)
        }
        Tag::Block => {
            r.expect(Tag::Block, 2)?;
            let (m, b) = (r.header[0] as usize, r.header[1] as usize);
            if b == 0 {
                return Err(Error::BadDump("zero block size".into()));
            }
            let mut blocks = Vec::new();
            let mut at = 0;
            for s in (0..m).step_by(b) {
                let len = b.min(m - s);
                let chunk = r
                    .values
                    .get(at..at + len * len)
                    .ok_or_else(|| Error::BadDump("block payload too short".into()))?;
                blocks.push(Matrix::from_vec(len, len, chunk.to_vec())?);
                at += len * len;
            }
            if at != r.values.len() {
                return Err(Error::BadDump("block payload too long".into()));
            }
            ImportanceRep::BlockDiagonal { block_size: b, blocks }
        }
        Tag::Sketched => {
            r.expect(Tag::Sketched, 3)?;
            let n = r.header[2] as usize;
            ImportanceRep::Sketched {
                w_tilde: matrix(r.header[0], r.header[1], r.values)?,
                n,
            }
        }
        Tag::LowRank => {
            r.expect(Tag::LowRank, 2)?;
            ImportanceRep::LowRank {
                factors: matrix(r.header[0], r.header[1], r.values)?,
            }
        }
        Tag::Full => {
            r.expect(Tag::Full, 1)?;
            ImportanceRep::Full(matrix(r.header[0], r.header[0], r.values)?)
        }
        other => return Err(Error::BadDump(format!("{other:?} is not an importance representation"))),
    })
}

pub fn params_record(spec: &MlpSpec, theta: &[f64]) -> Result<Record> {
    crate::error::check_len("params_record", spec.param_count(), theta.len())?;
    let mut header = vec![spec.bias as u64];
    header.extend(spec.widths.iter().map(|&w| w as u64));
    Ok(Record {
        tag: Tag::Params,
        header,
        values: theta.to_vec(),
    })
}

pub fn params_from_record(r: Record) -> Result<(MlpSpec, Vec<f64>)> {
    if r.tag != Tag::Params || r.header.is_empty() {
        return Err(Error::BadDump("not a parameter checkpoint".into()));
    }
    let spec = MlpSpec::new(r.header[1..].iter().map(|&w| w as usize).collect(), r.header[0] != 0)?;
    crate::error::check_len("params_from_record", spec.param_count(), r.values.len())?;
    Ok((spec, r.values))
}

pub fn write_record(path: &Path, r: &Record) -> Result<()> {
    std::fs::write(path, r.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_record(path: &Path) -> Result<Record> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Record::decode(&bytes)
}
