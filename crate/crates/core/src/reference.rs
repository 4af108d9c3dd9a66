//! Per-class reference Gaussians fitted on labeled training features, and the
//! `ADDREF01` binary file format that persists them.
//!
//! Layout (little-endian): magic `ADDREF01`, `u32 d`, `u32 K`, then per class
//! `u32 class_id`, `u64 count`, `d` f64 mean entries, `d*d` f64 covariance
//! entries (row-major), and finally a CRC32 of every preceding byte.

use std::fs;
use std::io;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SentinelError};
use crate::tensor_stats::{estimate_moments, Moments, SymMatrix};

pub const REFERENCE_MAGIC: &[u8; 8] = b"ADDREF01";

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReference {
    pub class_id: u32,
    pub stats: Moments,
}

/// Frozen per-class reference distributions. `classes[k].class_id == k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    dim: usize,
    classes: Vec<ClassReference>,
}

impl ReferenceModel {
    /// Builds a model from per-class moments, validating the invariants the
    /// file format and the detector rely on.
    pub fn from_classes(dim: usize, mut classes: Vec<ClassReference>) -> Result<Self> {
        if dim == 0 || classes.is_empty() {
            return Err(SentinelError::InvalidArgument(
                "reference model needs d >= 1 and K >= 1".into(),
            ));
        }
        classes.sort_by_key(|c| c.class_id);
        for (k, c) in classes.iter().enumerate() {
            if c.class_id as usize != k {
                return Err(SentinelError::FormatVersionMismatch(format!(
                    "class ids must be exactly 0..{}, found {}",
                    classes.len(),
                    c.class_id
                )));
            }
            if c.stats.count < 2 {
                return Err(SentinelError::ClassTooSmall(c.class_id));
            }
            if c.stats.dim() != dim {
                return Err(SentinelError::DimensionMismatch {
                    expected: dim,
                    actual: c.stats.dim(),
                });
            }
        }
        Ok(Self { dim, classes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassReference] {
        &self.classes
    }

    pub fn class(&self, class_id: u32) -> Option<&Moments> {
        self.classes.get(class_id as usize).map(|c| &c.stats)
    }

    /// Moments of all training samples pooled, recovered exactly from the
    /// per-class moments (law of total covariance, biased estimators).
    pub fn global_moments(&self) -> Moments {
        let total: u64 = self.classes.iter().map(|c| c.stats.count).sum();
        let mut mean = DVector::zeros(self.dim);
        for c in &self.classes {
            mean += &c.stats.mean * (c.stats.count as f64 / total as f64);
        }
        let mut cov = DMatrix::zeros(self.dim, self.dim);
        for c in &self.classes {
            let w = c.stats.count as f64 / total as f64;
            let dm = &c.stats.mean - &mean;
            cov += (c.stats.cov.matrix() + &dm * dm.transpose()) * w;
        }
        Moments {
            mean,
            cov: SymMatrix::from_symmetric_unchecked(cov),
            count: total,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dim;
        let mut out = Vec::with_capacity(20 + self.classes.len() * (12 + 8 * d * (d + 1)));
        out.extend_from_slice(REFERENCE_MAGIC);
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&(self.classes.len() as u32).to_le_bytes());
        for c in &self.classes {
            out.extend_from_slice(&c.class_id.to_le_bytes());
            out.extend_from_slice(&c.stats.count.to_le_bytes());
            for v in c.stats.mean.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let cov = c.stats.cov.matrix();
            for i in 0..d {
                for j in 0..d {
                    out.extend_from_slice(&cov[(i, j)].to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < REFERENCE_MAGIC.len() {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "file shorter than magic").into());
        }
        if &bytes[..8] != REFERENCE_MAGIC {
            return Err(SentinelError::FormatVersionMismatch(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(&bytes[..8])
            )));
        }
        if bytes.len() < 8 + 8 + 4 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated header").into());
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4-byte tail"));
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(SentinelError::ChecksumMismatch { stored, computed });
        }

        let mut r = Reader { buf: payload, pos: 8 };
        let d = r.u32()? as usize;
        let k = r.u32()? as usize;
        let mut classes = Vec::with_capacity(k);
        for _ in 0..k {
            let class_id = r.u32()?;
            let count = r.u64()?;
            let mean = DVector::from_iterator(d, (0..d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
            let entries = (0..d * d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let cov = SymMatrix::new(DMatrix::from_row_slice(d, d, &entries))?;
            classes.push(ClassReference {
                class_id,
                stats: Moments::new(mean, cov, count)?,
            });
        }
        if r.pos != payload.len() {
            return Err(SentinelError::FormatVersionMismatch(format!(
                "{} trailing bytes after class records",
                payload.len() - r.pos
            )));
        }
        Self::from_classes(d, classes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "record truncated"))?;
        self.pos = end;
        Ok(slice.try_into().expect("slice length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

/// Fits one Gaussian per ground-truth class.
///
/// Every class in `0..num_classes` must have at least two samples.
pub fn fit_reference<S, T>(features: &[S], labels: &[i64], num_classes: usize) -> Result<ReferenceModel>
where
    S: AsRef<[T]>,
    T: Copy + Into<f64>,
{
    if features.len() != labels.len() {
        return Err(SentinelError::LengthMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    let first = features.first().ok_or(SentinelError::EmptySampleSet)?;
    let dim = first.as_ref().len();
    let mut groups: Vec<Vec<&[T]>> = vec![Vec::new(); num_classes];
    for (f, &label) in features.iter().zip(labels) {
        if label < 0 || label as usize >= num_classes {
            return Err(SentinelError::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        let f = f.as_ref();
        if f.len() != dim {
            return Err(SentinelError::DimensionMismatch {
                expected: dim,
                actual: f.len(),
            });
        }
        groups[label as usize].push(f);
    }
    let mut classes = Vec::with_capacity(num_classes);
    for (k, group) in groups.iter().enumerate() {
        if group.len() < 2 {
            return Err(SentinelError::ClassTooSmall(k as u32));
        }
        classes.push(ClassReference {
            class_id: k as u32,
            stats: estimate_moments(group)?,
        });
    }
    ReferenceModel::from_classes(dim, classes)
}

pub fn save_reference(model: &ReferenceModel, path: &Path) -> Result<()> {
    crate::formats::write_atomic(path, &model.to_bytes())
}

pub fn load_reference(path: &Path) -> Result<ReferenceModel> {
    ReferenceModel::from_bytes(&fs::read(path)?)
}
