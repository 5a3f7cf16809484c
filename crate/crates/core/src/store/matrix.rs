//! Dense embedding matrices and their binary file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic  b"NGMX"
//!      4     2  format version (1)
//!      6     2  flags; bit 0 = rows are unit-normalized
//!      8     4  num_rows (u32)
//!     12     4  dim (u32)
//!     16   4*num_rows*dim  row-major f32 payload
//!      …        id table: one JSON string per line, num_rows lines
//! ```
//!
//! Rows are written before the id table, so a file can be produced row by
//! row and a partially written file is recognizable by its short payload.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MATRIX_MAGIC: [u8; 4] = *b"NGMX";
pub const MATRIX_VERSION: u16 = 1;
const HEADER_LEN: u64 = 16;
const FLAG_NORMALIZED: u16 = 1;
const NORM_TOLERANCE: f64 = 1e-4;

/// Row-major `num_rows x dim` f32 matrix with one string id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    normalized: bool,
    index: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    /// Validates shape, id uniqueness, finiteness and (when flagged) unit norms.
    pub fn new(dim: usize, ids: Vec<String>, data: Vec<f32>, normalized: bool) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMatrix("dim must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::InvalidMatrix(format!(
                "{} ids but {} values for dim {dim}",
                ids.len(),
                data.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidMatrix(format!("duplicate row id {id:?}")));
            }
        }
        let m = EmbeddingMatrix {
            dim,
            ids,
            data,
            normalized,
            index,
        };
        for (i, row) in m.rows().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { id: m.ids[i].clone() });
            }
            if normalized {
                let norm = l2_norm(row);
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(Error::InvalidMatrix(format!(
                        "row {:?} is flagged normalized but has norm {norm}",
                        m.ids[i]
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(dim, ids, data, false)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_rows(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn row_by_id(&self, id: &str) -> Option<&[f32]> {
        self.row_index(id).map(|i| self.row(i))
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }
}

fn l2_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

/// Scales every row to unit L2 norm and sets the normalized flag.
pub fn normalize_rows(matrix: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut data = Vec::with_capacity(matrix.data.len());
    for (i, row) in matrix.rows().enumerate() {
        let norm = l2_norm(row);
        if norm == 0.0 {
            return Err(Error::ZeroNorm {
                id: matrix.ids[i].clone(),
            });
        }
        data.extend(row.iter().map(|&v| (f64::from(v) / norm) as f32));
    }
    Ok(EmbeddingMatrix {
        dim: matrix.dim,
        ids: matrix.ids.clone(),
        data,
        normalized: true,
        index: matrix.index.clone(),
    })
}

/// Streams rows into a matrix file; the id table is appended by [`MatrixWriter::finish`].
pub struct MatrixWriter {
    path: PathBuf,
    out: BufWriter<File>,
    num_rows: usize,
    dim: usize,
    rows_written: usize,
}

impl MatrixWriter {
    /// Starts a new file, truncating anything already at `path`.
    pub fn create(path: impl AsRef<Path>, num_rows: usize, dim: usize, normalized: bool) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if dim == 0 {
            return Err(Error::InvalidMatrix("dim must be positive".into()));
        }
        let rows32 = u32::try_from(num_rows)
            .map_err(|_| Error::InvalidMatrix(format!("{num_rows} rows exceed the format limit")))?;
        let dim32 = u32::try_from(dim).map_err(|_| Error::InvalidMatrix(format!("dim {dim} exceeds the format limit")))?;
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        let mut header = [0u8; HEADER_LEN as usize];
        header[0..4].copy_from_slice(&MATRIX_MAGIC);
        header[4..6].copy_from_slice(&MATRIX_VERSION.to_le_bytes());
        let flags = if normalized { FLAG_NORMALIZED } else { 0 };
        header[6..8].copy_from_slice(&flags.to_le_bytes());
        header[8..12].copy_from_slice(&rows32.to_le_bytes());
        header[12..16].copy_from_slice(&dim32.to_le_bytes());
        out.write_all(&header).map_err(|e| Error::io(&path, e))?;
        Ok(MatrixWriter {
            path,
            out,
            num_rows,
            dim,
            rows_written: 0,
        })
    }

    /// Reopens a partially written file, dropping any trailing partial row.
    ///
    /// Returns the writer positioned after the last complete row, plus the header.
    pub fn resume(path: impl AsRef<Path>) -> Result<(Self, MatrixHeader)> {
        let path = path.as_ref().to_path_buf();
        let header = read_header(&path)?;
        let len = std::fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
        let row_bytes = 4 * header.dim as u64;
        let complete = ((len - HEADER_LEN) / row_bytes).min(header.num_rows as u64);
        let end = HEADER_LEN + complete * row_bytes;
        let mut file = OpenOptions::new()
            .write(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        file.set_len(end).map_err(|e| Error::io(&path, e))?;
        file.seek(SeekFrom::Start(end)).map_err(|e| Error::io(&path, e))?;
        let writer = MatrixWriter {
            path,
            out: BufWriter::new(file),
            num_rows: header.num_rows,
            dim: header.dim,
            rows_written: complete as usize,
        };
        Ok((writer, header))
    }

    pub fn rows_written(&self) -> usize {
        self.rows_written
    }

    pub fn write_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: row.len(),
            });
        }
        if self.rows_written == self.num_rows {
            return Err(Error::InvalidMatrix(format!(
                "{}: more rows than the {} declared",
                self.path.display(),
                self.num_rows
            )));
        }
        for v in row {
            self.out.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&self.path, e))?;
        }
        self.rows_written += 1;
        Ok(())
    }

    /// Pushes buffered rows to the OS so an interrupted run keeps them.
    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }

    /// Writes the id table and closes the file.
    pub fn finish(mut self, ids: &[String]) -> Result<()> {
        if self.rows_written != self.num_rows || ids.len() != self.num_rows {
            return Err(Error::InvalidMatrix(format!(
                "{}: finished with {} rows and {} ids, header declares {}",
                self.path.display(),
                self.rows_written,
                ids.len(),
                self.num_rows
            )));
        }
        for id in ids {
            serde_json::to_writer(&mut self.out, id)?;
            self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))?;
        }
        self.flush()
    }
}

/// Decoded fixed-size header of a matrix file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixHeader {
    pub version: u16,
    pub normalized: bool,
    pub num_rows: usize,
    pub dim: usize,
}

impl MatrixHeader {
    pub fn payload_len(&self) -> u64 {
        4 * self.num_rows as u64 * self.dim as u64
    }
}

fn decode_header(path: &Path, bytes: &[u8]) -> Result<MatrixHeader> {
    let bad = |message: &str| Error::BadHeader {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    if bytes.len() < HEADER_LEN as usize {
        return Err(bad("file shorter than the 16-byte header"));
    }
    if bytes[0..4] != MATRIX_MAGIC {
        return Err(bad("wrong magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != MATRIX_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let flags = u16::from_le_bytes([bytes[6], bytes[7]]);
    let num_rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(bad("dim is zero"));
    }
    Ok(MatrixHeader {
        version,
        normalized: flags & FLAG_NORMALIZED != 0,
        num_rows,
        dim,
    })
}

pub fn read_header(path: impl AsRef<Path>) -> Result<MatrixHeader> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(HEADER_LEN as usize);
    (&mut file)
        .take(HEADER_LEN)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    decode_header(path, &buf)
}

pub fn save_matrix(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut w = MatrixWriter::create(path, matrix.num_rows(), matrix.dim, matrix.normalized)?;
    for row in matrix.rows() {
        w.write_row(row)?;
    }
    w.finish(&matrix.ids)
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = decode_header(path, &bytes)?;
    let payload_end = HEADER_LEN + header.payload_len();
    let available = bytes.len() as u64 - HEADER_LEN;
    if (bytes.len() as u64) < payload_end {
        return Err(Error::PayloadSizeMismatch {
            path: path.to_path_buf(),
            expected: header.payload_len(),
            found: available,
        });
    }
    let payload = &bytes[HEADER_LEN as usize..payload_end as usize];
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();

    let table = std::str::from_utf8(&bytes[payload_end as usize..]).map_err(|_| Error::BadHeader {
        path: path.to_path_buf(),
        message: "id table is not UTF-8".into(),
    })?;
    let mut ids = Vec::with_capacity(header.num_rows);
    for (i, line) in table.lines().enumerate() {
        let id: String = serde_json::from_str(line).map_err(|e| Error::BadHeader {
            path: path.to_path_buf(),
            message: format!("id table entry {}: {e}", i + 1),
        })?;
        ids.push(id);
    }
    if ids.len() != header.num_rows {
        return Err(Error::PayloadSizeMismatch {
            path: path.to_path_buf(),
            expected: header.num_rows as u64,
            found: ids.len() as u64,
        });
    }
    EmbeddingMatrix::new(header.dim, ids, data, header.normalized)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("r{i}")).collect()
    }

    #[test]
    fn three_by_four_round_trips_bit_exact() {
        let data: Vec<f32> = vec![
            1.0, -0.0, 3.5, f32::MIN_POSITIVE, 0.1, 0.2, 0.3, 1e-30, -7.25, 1e30, 2.0, -1.0,
        ];
        let m = EmbeddingMatrix::new(4, ids(3), data.clone(), false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        save_matrix(&m, &p).unwrap();
        let back = load_matrix(&p).unwrap();
        assert_eq!(back.ids(), m.ids());
        assert_eq!(back.dim(), 4);
        let bits = |d: &[f32]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.data()), bits(&data));
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_file_is_payload_mismatch() {
        let m = EmbeddingMatrix::new(4, ids(3), vec![0.5; 12], false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        save_matrix(&m, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..30]).unwrap();
        let err = load_matrix(&p).unwrap_err();
        assert!(matches!(err, Error::PayloadSizeMismatch { .. }));
        assert!(err.to_string().contains("payload size mismatch"));
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        std::fs::write(&p, b"NOPE000000000000").unwrap();
        assert!(matches!(load_matrix(&p), Err(Error::BadHeader { .. })));
    }

    #[test]
    fn normalize_three_four_five() {
        let m = EmbeddingMatrix::from_rows(vec!["a".into()], &[vec![3.0, 4.0]]).unwrap();
        let n = normalize_rows(&m).unwrap();
        assert!(n.is_normalized());
        assert_eq!(n.row(0), &[0.6, 0.8]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let m = EmbeddingMatrix::from_rows(vec!["a".into()], &[vec![0.6, 0.8]]).unwrap();
        let once = normalize_rows(&m).unwrap();
        let twice = normalize_rows(&once).unwrap();
        for (a, b) in m.data().iter().zip(twice.data()) {
            assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn zero_row_named() {
        let m = EmbeddingMatrix::from_rows(vec!["a".into(), "zero".into()], &[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        match normalize_rows(&m) {
            Err(Error::ZeroNorm { id }) => assert_eq!(id, "zero"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_nan_and_bad_norm_flag() {
        let err = EmbeddingMatrix::new(2, vec!["a".into(), "b".into()], vec![1.0, 0.0, f32::NAN, 0.0], false).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref id } if id == "b"));
        assert!(EmbeddingMatrix::new(2, vec!["a".into()], vec![3.0, 4.0], true).is_err());
        assert!(EmbeddingMatrix::new(2, vec!["a".into(), "a".into()], vec![0.0; 4], false).is_err());
    }

    #[test]
    fn resume_drops_partial_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let mut w = MatrixWriter::create(&p, 3, 2, false).unwrap();
        w.write_row(&[1.0, 2.0]).unwrap();
        w.flush().unwrap();
        drop(w);
        // half of a second row
        let mut f = OpenOptions::new().append(true).open(&p).unwrap();
        f.write_all(&[0, 0, 128]).unwrap();
        drop(f);
        assert!(load_matrix(&p).is_err());

        let (mut w, header) = MatrixWriter::resume(&p).unwrap();
        assert_eq!(header.num_rows, 3);
        assert_eq!(w.rows_written(), 1);
        w.write_row(&[3.0, 4.0]).unwrap();
        w.write_row(&[5.0, 6.0]).unwrap();
        w.finish(&ids(3)).unwrap();
        let m = load_matrix(&p).unwrap();
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
