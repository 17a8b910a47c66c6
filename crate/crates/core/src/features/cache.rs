//! Feature sets and their binary cache (little-endian):
//!
//! ```text
//! "FCH1" | u16 version | u32 count | u32 dim | u8 dtype (0 = f32, 1 = f64)
//! | count·dim values, row-major
//! ```
//!
//! Provenance lives in a JSON sidecar `<cache>.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file_atomic, ByteReader};
use crate::error::{Error, Result};
use crate::real::{Precision, Real};

pub const CACHE_MAGIC: &[u8; 4] = b"FCH1";
pub const CACHE_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 1;

/// Where a feature set came from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub backbone: String,
    pub pool: String,
    /// SHA-256 over the ordered `(file name, content hash)` list.
    pub image_list_sha256: String,
    pub source: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub artifact: Option<crate::provenance::ArtifactProvenance>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureValues {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl FeatureValues {
    fn len(&self) -> usize {
        match self {
            FeatureValues::F32(v) => v.len(),
            FeatureValues::F64(v) => v.len(),
        }
    }
}

/// `count` feature vectors of a shared dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    values: FeatureValues,
    pub provenance: Provenance,
}

fn widen<T: Real, U: Real>(v: &[T]) -> Vec<U> {
    v.iter().map(|x| U::of(x.f64())).collect()
}

impl FeatureSet {
    pub fn new(dim: usize, values: FeatureValues, provenance: Provenance) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("feature dimension must be positive".into()));
        }
        if values.len() % dim != 0 {
            return Err(Error::Shape(format!("{} values do not split into rows of {dim}", values.len())));
        }
        let finite = match &values {
            FeatureValues::F32(v) => v.iter().all(|x| x.is_finite()),
            FeatureValues::F64(v) => v.iter().all(|x| x.is_finite()),
        };
        if !finite {
            return Err(Error::NonFinite("feature values".into()));
        }
        Ok(Self { dim, values, provenance })
    }

    pub fn from_f32(dim: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(dim, FeatureValues::F32(data), Provenance::default())
    }

    pub fn from_f64(dim: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(dim, FeatureValues::F64(data), Provenance::default())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn precision(&self) -> Precision {
        match self.values {
            FeatureValues::F32(_) => Precision::F32,
            FeatureValues::F64(_) => Precision::F64,
        }
    }

    pub fn values(&self) -> &FeatureValues {
        &self.values
    }

    /// All rows converted to `T` (exact when widening or same precision).
    pub fn rows<T: Real>(&self) -> Vec<T> {
        match &self.values {
            FeatureValues::F32(v) => widen(v),
            FeatureValues::F64(v) => widen(v),
        }
    }

    /// Row `i` as f64.
    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        let r = i * self.dim..(i + 1) * self.dim;
        match &self.values {
            FeatureValues::F32(v) => widen(&v[r]),
            FeatureValues::F64(v) => v[r].to_vec(),
        }
    }

    /// New set made of the listed rows, in order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.count()) {
            return Err(Error::InvalidParameter(format!("row {bad} out of range 0..{}", self.count())));
        }
        fn pick<T: Copy>(v: &[T], dim: usize, idx: &[usize]) -> Vec<T> {
            idx.iter().flat_map(|&i| v[i * dim..(i + 1) * dim].iter().copied()).collect()
        }
        let values = match &self.values {
            FeatureValues::F32(v) => FeatureValues::F32(pick(v, self.dim, idx)),
            FeatureValues::F64(v) => FeatureValues::F64(pick(v, self.dim, idx)),
        };
        Ok(Self {
            dim: self.dim,
            values,
            provenance: self.provenance.clone(),
        })
    }

    /// First `n` rows and the remainder.
    pub fn split_at(&self, n: usize) -> Result<(Self, Self)> {
        let n = n.min(self.count());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.count()).collect();
        Ok((self.select(&head)?, self.select(&tail)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let width = self.precision().byte_width();
        let mut out = Vec::with_capacity(HEADER_LEN + self.values.len() * width);
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.count() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.push(self.precision().code());
        match &self.values {
            FeatureValues::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
            FeatureValues::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        if r.take(4, "magic")? != CACHE_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "FCH1",
            });
        }
        let version = r.u16("version")?;
        if version != CACHE_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: CACHE_VERSION,
            });
        }
        let count = r.u32("count")? as usize;
        let dim = r.u32("dim")? as usize;
        let code = r.u8("dtype")?;
        let precision = Precision::from_code(code).ok_or_else(|| r.corrupt(format!("unknown dtype code {code}")))?;
        if dim == 0 {
            return Err(r.corrupt("dimension 0"));
        }
        let bytes_needed = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(precision.byte_width()))
            .ok_or_else(|| r.corrupt(format!("count {count} × dim {dim} overflows")))?;
        let payload = r.take(bytes_needed, "feature payload")?;
        if !r.is_empty() {
            return Err(r.corrupt(format!("{} trailing bytes", r.remaining())));
        }
        let values = match precision {
            Precision::F32 => FeatureValues::F32(payload.chunks_exact(4).map(f32::read_le).collect()),
            Precision::F64 => FeatureValues::F64(payload.chunks_exact(8).map(f64::read_le).collect()),
        };
        Self::new(dim, values, Provenance::default())
    }

    /// Writes the cache and its provenance sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_file_atomic(path, &self.to_bytes())?;
        let mut sidecar = serde_json::to_vec_pretty(&self.provenance)?;
        sidecar.push(b'\n');
        write_file_atomic(&sidecar_path(path), &sidecar)
    }

    /// Reads a cache; the sidecar is optional.
    pub fn load(path: &Path) -> Result<Self> {
        let mut set = Self::from_bytes(&read_file(path)?, path)?;
        let side = sidecar_path(path);
        if side.exists() {
            set.provenance = serde_json::from_slice(&read_file(&side)?)?;
        }
        Ok(set)
    }

    /// Rows of comma-separated numbers, one vector per line. A first line
    /// that does not parse as numbers is taken as a header.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let mut data = Vec::new();
        let mut dim = None;
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(|f| f.trim().parse::<f64>()).collect();
            let row = match parsed {
                Ok(row) => row,
                Err(_) if line == 0 => continue,
                Err(e) => {
                    return Err(Error::Corrupt {
                        path: path.to_path_buf(),
                        detail: format!("line {}: {e}", line + 1),
                    })
                }
            };
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(Error::Corrupt {
                        path: path.to_path_buf(),
                        detail: format!("line {} has {} values, expected {d}", line + 1, row.len()),
                    })
                }
                _ => {}
            }
            data.extend(row);
        }
        let dim = dim.ok_or_else(|| Error::InsufficientSamples(format!("{} holds no feature rows", path.display())))?;
        let mut set = Self::from_f64(dim, data)?;
        set.provenance.source = format!("csv:{}", path.display());
        Ok(set)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let set = FeatureSet::from_f32(2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = set.to_bytes();
        assert_eq!(&b[..4], b"FCH1");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..10], &[3, 0, 0, 0]);
        assert_eq!(&b[10..14], &[2, 0, 0, 0]);
        assert_eq!(b[14], 0);
        assert_eq!(&b[15..19], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 15 + 6 * 4);
    }

    #[test]
    fn overflowing_header_is_corrupt() {
        let mut b = FeatureSet::from_f32(1, vec![]).unwrap().to_bytes();
        b[6..10].copy_from_slice(&u32::MAX.to_le_bytes());
        b[10..14].copy_from_slice(&u32::MAX.to_le_bytes());
        let err = FeatureSet::from_bytes(&b, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Corrupt { .. } | Error::Truncated { .. }));
    }

    #[test]
    fn rows_widen_exactly() {
        let set = FeatureSet::from_f32(1, vec![0.1, -3.5]).unwrap();
        assert_eq!(set.rows::<f64>(), vec![0.1f32 as f64, -3.5]);
        assert_eq!(set.rows::<f32>(), vec![0.1, -3.5]);
    }

    #[test]
    fn select_and_split() {
        let set = FeatureSet::from_f64(2, (0..10).map(f64::from).collect()).unwrap();
        let s = set.select(&[4, 0]).unwrap();
        assert_eq!(s.rows::<f64>(), vec![8.0, 9.0, 0.0, 1.0]);
        let (a, b) = set.split_at(3).unwrap();
        assert_eq!((a.count(), b.count()), (3, 2));
        assert!(set.select(&[5]).is_err());
    }

    #[test]
    fn non_finite_and_ragged_sets_are_rejected() {
        assert!(FeatureSet::from_f32(2, vec![1.0, f32::NAN]).is_err());
        assert!(FeatureSet::from_f32(2, vec![1.0, 2.0, 3.0]).is_err());
        assert!(FeatureSet::from_f32(0, vec![]).is_err());
    }

    #[test]
    fn csv_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        std::fs::write(&p, "a,b\n1,2\n3.5,-4\n").unwrap();
        let set = FeatureSet::load_csv(&p).unwrap();
        assert_eq!((set.count(), set.dim()), (2, 2));
        assert_eq!(set.rows::<f64>(), vec![1.0, 2.0, 3.5, -4.0]);
        std::fs::write(&p, "1,2\n3\n").unwrap();
        assert!(FeatureSet::load_csv(&p).is_err());
    }
}
