use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SSPJ";
const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

/// A fitted semantic projection: dual basis over the training images plus
/// the canonical correlation of each retained direction.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticProjector {
    dual_basis: DMatrix<f64>,
    correlations: Vec<f64>,
    train_row_ids: Vec<String>,
    kernel_id: String,
}

impl SemanticProjector {
    pub fn new(
        dual_basis: DMatrix<f64>,
        correlations: Vec<f64>,
        train_row_ids: Vec<String>,
        kernel_id: impl Into<String>,
    ) -> Result<Self> {
        let p = SemanticProjector {
            dual_basis,
            correlations,
            train_row_ids,
            kernel_id: kernel_id.into(),
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let m = self.correlations.len();
        if m == 0 {
            return Err(Error::Invariant("projector has no components".into()));
        }
        if self.dual_basis.ncols() != m {
            return Err(Error::Invariant(format!(
                "dual basis has {} columns but {m} correlations",
                self.dual_basis.ncols()
            )));
        }
        if self.dual_basis.nrows() != self.train_row_ids.len() {
            return Err(Error::Invariant(format!(
                "dual basis has {} rows but {} training ids",
                self.dual_basis.nrows(),
                self.train_row_ids.len()
            )));
        }
        for (j, &r) in self.correlations.iter().enumerate() {
            if !(r > 0.0 && r <= 1.0 + 1e-9) {
                return Err(Error::Invariant(format!(
                    "correlation r_{j} = {r} outside (0, 1]"
                )));
            }
        }
        if self.correlations.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Invariant(
                "correlations are not sorted non-increasing".into(),
            ));
        }
        if self.dual_basis.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("non-finite dual basis entry".into()));
        }
        Ok(())
    }

    /// `N x M` matrix whose columns are the dual directions.
    pub fn dual_basis(&self) -> &DMatrix<f64> {
        &self.dual_basis
    }

    pub fn correlations(&self) -> &[f64] {
        &self.correlations
    }

    pub fn train_row_ids(&self) -> &[String] {
        &self.train_row_ids
    }

    pub fn kernel_id(&self) -> &str {
        &self.kernel_id
    }

    pub fn m_dims(&self) -> usize {
        self.correlations.len()
    }

    pub fn n_train(&self) -> usize {
        self.train_row_ids.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(
            &self.dual_basis,
            &self.correlations,
            &self.train_row_ids,
            &self.kernel_id,
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKSUM_LEN + 8 {
            return Err(Error::Integrity("projector file is truncated".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Integrity("bad magic, not a projector file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Integrity(format!(
                "projector version {version} is not supported (expected {VERSION})"
            )));
        }
        let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::Integrity(
                "projector checksum mismatch (truncated or corrupt file)".into(),
            ));
        }
        decode(&body[8..])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn encode(a: &DMatrix<f64>, r: &[f64], ids: &[String], kernel_id: &str) -> Vec<u8> {
    let mut w = Vec::new();
    w.write_all(MAGIC).unwrap();
    w.write_u32::<LittleEndian>(VERSION).unwrap();
    w.write_u64::<LittleEndian>(a.nrows() as u64).unwrap();
    w.write_u64::<LittleEndian>(a.ncols() as u64).unwrap();
    w.write_u64::<LittleEndian>(kernel_id.len() as u64).unwrap();
    w.write_all(kernel_id.as_bytes()).unwrap();
    let joined = ids.join("\n");
    w.write_u64::<LittleEndian>(joined.len() as u64).unwrap();
    w.write_all(joined.as_bytes()).unwrap();
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            w.write_f64::<LittleEndian>(a[(i, j)]).unwrap();
        }
    }
    for &x in r {
        w.write_f64::<LittleEndian>(x).unwrap();
    }
    let sum = Sha256::digest(&w);
    w.extend_from_slice(sum.as_slice());
    w
}

fn decode(mut r: &[u8]) -> Result<SemanticProjector> {
    let bad = |_| Error::Integrity("projector file is truncated".into());
    let n = r.read_u64::<LittleEndian>().map_err(bad)? as usize;
    let m = r.read_u64::<LittleEndian>().map_err(bad)? as usize;
    let read_string = |r: &mut &[u8]| -> Result<String> {
        let len = r.read_u64::<LittleEndian>().map_err(bad)? as usize;
        if r.len() < len {
            return Err(Error::Integrity("projector file is truncated".into()));
        }
        let mut buf = vec![0; len];
        r.read_exact(&mut buf).map_err(bad)?;
        String::from_utf8(buf).map_err(|_| Error::Integrity("invalid UTF-8 in projector".into()))
    };
    let kernel_id = read_string(&mut r)?;
    let ids = read_string(&mut r)?;
    let train_row_ids: Vec<String> = if n == 0 {
        Vec::new()
    } else {
        ids.split('\n').map(str::to_owned).collect()
    };
    let mut flat = Vec::with_capacity(n * m);
    for _ in 0..n * m {
        flat.push(r.read_f64::<LittleEndian>().map_err(bad)?);
    }
    let mut corr = Vec::with_capacity(m);
    for _ in 0..m {
        corr.push(r.read_f64::<LittleEndian>().map_err(bad)?);
    }
    if !r.is_empty() {
        return Err(Error::Integrity("trailing bytes in projector file".into()));
    }
    SemanticProjector::new(
        DMatrix::from_row_slice(n, m, &flat),
        corr,
        train_row_ids,
        kernel_id,
    )
}
