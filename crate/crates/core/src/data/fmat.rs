//! The `FMAT` binary matrix container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FMAT" | u32 version = 1 | u8 dtype (0 = f32, 1 = f64) | u64 rows | u64 cols
//! rows * cols values, row-major, little-endian
//! u64 byte length | row ids joined by '\n'
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FMAT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    /// `F32` when every value survives a round trip through `f32`, else `F64`.
    pub fn lossless_for(values: &DMatrix<f64>) -> Self {
        if values.iter().all(|&v| (v as f32) as f64 == v) {
            Dtype::F32
        } else {
            Dtype::F64
        }
    }
}

/// A matrix as stored on disk: values plus one identifier per row.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredMatrix {
    pub values: DMatrix<f64>,
    pub row_ids: Vec<String>,
    pub dtype: Dtype,
}

pub fn write<W: Write>(
    mut w: W,
    values: &DMatrix<f64>,
    row_ids: &[String],
    dtype: Dtype,
) -> std::io::Result<()> {
    assert_eq!(
        values.nrows(),
        row_ids.len(),
        "row id count must match rows"
    );
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u8(dtype as u8)?;
    w.write_u64::<LittleEndian>(values.nrows() as u64)?;
    w.write_u64::<LittleEndian>(values.ncols() as u64)?;
    for i in 0..values.nrows() {
        for j in 0..values.ncols() {
            match dtype {
                Dtype::F32 => w.write_f32::<LittleEndian>(values[(i, j)] as f32)?,
                Dtype::F64 => w.write_f64::<LittleEndian>(values[(i, j)])?,
            }
        }
    }
    let ids = row_ids.join("\n");
    w.write_u64::<LittleEndian>(ids.len() as u64)?;
    w.write_all(ids.as_bytes())?;
    Ok(())
}

fn truncated(what: &str) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            Error::Integrity(format!("truncated FMAT file while reading {what}"))
        }
        _ => Error::Integrity(format!("error reading {what}: {e}")),
    }
}

pub fn read<R: Read>(mut r: R) -> Result<StoredMatrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated("magic"))?;
    if &magic != MAGIC {
        return Err(Error::Integrity("bad magic, not an FMAT file".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated("version"))?;
    if version != VERSION {
        return Err(Error::Integrity(format!(
            "unsupported FMAT version {version}"
        )));
    }
    let dtype = match r.read_u8().map_err(truncated("dtype"))? {
        0 => Dtype::F32,
        1 => Dtype::F64,
        d => return Err(Error::Integrity(format!("unknown dtype tag {d}"))),
    };
    let rows = r.read_u64::<LittleEndian>().map_err(truncated("rows"))? as usize;
    let cols = r.read_u64::<LittleEndian>().map_err(truncated("cols"))? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Data(format!("empty matrix ({rows}x{cols})")));
    }
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Integrity("matrix size overflows".into()))?;
    let mut flat = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        let v = match dtype {
            Dtype::F32 => r.read_f32::<LittleEndian>().map_err(truncated("values"))? as f64,
            Dtype::F64 => r.read_f64::<LittleEndian>().map_err(truncated("values"))?,
        };
        flat.push(v);
    }
    let id_len = r
        .read_u64::<LittleEndian>()
        .map_err(truncated("row id length"))? as usize;
    let mut id_bytes = Vec::new();
    (&mut r)
        .take(id_len as u64)
        .read_to_end(&mut id_bytes)
        .map_err(truncated("row ids"))?;
    if id_bytes.len() != id_len {
        return Err(Error::Integrity(
            "truncated FMAT file while reading row ids".into(),
        ));
    }
    let ids = String::from_utf8(id_bytes)
        .map_err(|_| Error::Integrity("row ids are not valid UTF-8".into()))?;
    let row_ids: Vec<String> = ids.split('\n').map(str::to_owned).collect();
    if row_ids.len() != rows {
        return Err(Error::Integrity(format!(
            "{} row ids for {rows} rows",
            row_ids.len()
        )));
    }
    for (idx, v) in flat.iter().enumerate() {
        if !v.is_finite() {
            let (row, col) = (idx / cols, idx % cols);
            return Err(Error::NonFinite {
                row,
                row_id: row_ids[row].clone(),
                col,
            });
        }
    }
    Ok(StoredMatrix {
        values: DMatrix::from_row_slice(rows, cols, &flat),
        row_ids,
        dtype,
    })
}

pub fn write_file(
    path: &Path,
    values: &DMatrix<f64>,
    row_ids: &[String],
    dtype: Dtype,
) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write(&mut w, values, row_ids, dtype).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<StoredMatrix> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read(BufReader::new(f))
}
