//! Dense embedding matrices and their on-disk formats.
//!
//! `EMB1` is the canonical binary layout shared with external model
//! adapters. All integers are little-endian:
//!
//! | offset | size | field                              |
//! |--------|------|------------------------------------|
//! | 0      | 4    | magic `b"EMB1"`                    |
//! | 4      | 2    | version (`u16`, must be 1)         |
//! | 6      | 1    | dtype (`u8`, 0 = `f32` LE)         |
//! | 7      | 1    | reserved (must be 0)               |
//! | 8      | 8    | rows `M` (`u64`)                   |
//! | 16     | 8    | dims `D` (`u64`)                   |
//! | 24     | 4·M·D| row-major `f32` payload            |
//!
//! The file length must equal `24 + 4·M·D` exactly. CSV (one embedding per
//! line, comma-separated) is supported for fixtures and debugging.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"EMB1";
pub const VERSION: u16 = 1;
pub const DTYPE_F32_LE: u8 = 0;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum EmbioError {
    #[error("bad magic {found:?} at byte 0 (expected \"EMB1\")")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {version} at byte 4")]
    UnsupportedVersion { version: u16 },
    #[error("unsupported dtype code {code} at byte 6")]
    UnsupportedDtype { code: u8 },
    #[error("reserved byte 7 is {value}, expected 0")]
    ReservedNonZero { value: u8 },
    #[error("file truncated: expected {expected} bytes, found {actual} (data ends at byte offset {actual})")]
    TruncatedFile { expected: u64, actual: u64 },
    #[error("{extra} unexpected trailing bytes after byte offset {expected}")]
    TrailingBytes { expected: u64, extra: u64 },
    #[error("matrix shape {rows}x{dims} is empty")]
    EmptyShape { rows: u64, dims: u64 },
    #[error("matrix shape {rows}x{dims} overflows addressable size")]
    ShapeOverflow { rows: u64, dims: u64 },
    #[error("data length {actual} does not match shape {rows}x{dims}")]
    ShapeMismatch {
        rows: usize,
        dims: usize,
        actual: usize,
    },
    #[error("non-finite value {value} at row {row}, column {col}{}", byte_offset.map(|o| format!(" (byte offset {o})")).unwrap_or_default())]
    NonFiniteValue {
        row: usize,
        col: usize,
        value: f32,
        byte_offset: Option<u64>,
    },
    #[error("ragged rows: line {line} has {found} values, expected {expected}")]
    RaggedRows {
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("cannot parse {text:?} as a number at line {line}, column {col}")]
    Parse { line: u64, col: usize, text: String },
    #[error("csv error at line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> EmbioError {
    EmbioError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// An `M x D` row-major matrix of finite `f32` values, one embedding per row.
///
/// Equality compares shape and payload only; `source_tag` is provenance
/// metadata and is not stored in `EMB1` files.
#[derive(Clone)]
pub struct EmbeddingMatrix {
    rows: usize,
    dims: usize,
    data: Vec<f32>,
    source_tag: Option<String>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dims: usize, data: Vec<f32>) -> Result<Self, EmbioError> {
        if rows == 0 || dims == 0 {
            return Err(EmbioError::EmptyShape {
                rows: rows as u64,
                dims: dims as u64,
            });
        }
        if rows.checked_mul(dims) != Some(data.len()) {
            return Err(EmbioError::ShapeMismatch {
                rows,
                dims,
                actual: data.len(),
            });
        }
        check_finite(&data, dims, None)?;
        Ok(Self {
            rows,
            dims,
            data,
            source_tag: None,
        })
    }

    /// Build from a list of equally long rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self, EmbioError> {
        let dims = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dims);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dims {
                return Err(EmbioError::RaggedRows {
                    line: i as u64 + 1,
                    expected: dims,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dims, data)
    }

    pub fn with_source_tag(mut self, tag: impl Into<String>) -> Self {
        self.source_tag = Some(tag.into());
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn source_tag(&self) -> Option<&str> {
        self.source_tag.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    pub fn iter_rows(&self) -> std::slice::Chunks<'_, f32> {
        self.data.chunks(self.dims)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the payload. Writers re-validate finiteness, so a
    /// matrix edited through this slice is checked again before it is saved.
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Re-check the finiteness invariant.
    pub fn validate(&self) -> Result<(), EmbioError> {
        check_finite(&self.data, self.dims, None)
    }

    /// Serialize to `EMB1` bytes.
    pub fn to_emb1_bytes(&self) -> Result<Vec<u8>, EmbioError> {
        self.validate()?;
        let header = EmbeddingFileHeader::f32(self.rows as u64, self.dims as u64);
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(&header.to_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Parse `EMB1` bytes. Never allocates more than the input length implies.
    pub fn from_emb1_bytes(bytes: &[u8]) -> Result<Self, EmbioError> {
        let header = EmbeddingFileHeader::parse(bytes)?;
        let expected = header.file_len()?;
        let actual = bytes.len() as u64;
        if actual < expected {
            return Err(EmbioError::TruncatedFile { expected, actual });
        }
        if actual > expected {
            return Err(EmbioError::TrailingBytes {
                expected,
                extra: actual - expected,
            });
        }
        // file_len() succeeded and the buffer is that long, so both fit in usize.
        let rows = header.rows as usize;
        let dims = header.dims as usize;
        let data: Vec<f32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        check_finite(&data, dims, Some(HEADER_LEN as u64))?;
        Ok(Self {
            rows,
            dims,
            data,
            source_tag: None,
        })
    }
}

impl PartialEq for EmbeddingMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows && self.dims == other.dims && self.data == other.data
    }
}

impl fmt::Debug for EmbeddingMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("EmbeddingMatrix");
        s.field("rows", &self.rows).field("dims", &self.dims);
        if let Some(tag) = &self.source_tag {
            s.field("source_tag", tag);
        }
        if self.data.len() <= 16 {
            s.field("data", &self.data);
        }
        s.finish_non_exhaustive()
    }
}

fn check_finite(data: &[f32], dims: usize, payload_offset: Option<u64>) -> Result<(), EmbioError> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(pos) => Err(EmbioError::NonFiniteValue {
            row: pos / dims.max(1),
            col: pos % dims.max(1),
            value: data[pos],
            byte_offset: payload_offset.map(|o| o + 4 * pos as u64),
        }),
    }
}

/// The fixed 24-byte `EMB1` header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingFileHeader {
    pub version: u16,
    pub dtype: u8,
    pub rows: u64,
    pub dims: u64,
}

impl EmbeddingFileHeader {
    pub fn f32(rows: u64, dims: u64) -> Self {
        Self {
            version: VERSION,
            dtype: DTYPE_F32_LE,
            rows,
            dims,
        }
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6] = self.dtype;
        b[7] = 0;
        b[8..16].copy_from_slice(&self.rows.to_le_bytes());
        b[16..24].copy_from_slice(&self.dims.to_le_bytes());
        b
    }

    /// Parse and validate the header at the start of `bytes`.
    pub fn parse(bytes: &[u8]) -> Result<Self, EmbioError> {
        if bytes.len() < HEADER_LEN {
            // Report a bad magic first if the bytes we do have disagree.
            let n = bytes.len().min(4);
            if bytes[..n] != MAGIC[..n] {
                let mut found = [0u8; 4];
                found[..n].copy_from_slice(&bytes[..n]);
                return Err(EmbioError::BadMagic { found });
            }
            return Err(EmbioError::TruncatedFile {
                expected: HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
        if magic != MAGIC {
            return Err(EmbioError::BadMagic { found: magic });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(EmbioError::UnsupportedVersion { version });
        }
        let dtype = bytes[6];
        if dtype != DTYPE_F32_LE {
            return Err(EmbioError::UnsupportedDtype { code: dtype });
        }
        if bytes[7] != 0 {
            return Err(EmbioError::ReservedNonZero { value: bytes[7] });
        }
        let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let dims = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        if rows == 0 || dims == 0 {
            return Err(EmbioError::EmptyShape { rows, dims });
        }
        Ok(Self {
            version,
            dtype,
            rows,
            dims,
        })
    }

    /// Total file length implied by the header.
    pub fn file_len(&self) -> Result<u64, EmbioError> {
        let overflow = EmbioError::ShapeOverflow {
            rows: self.rows,
            dims: self.dims,
        };
        let payload = self
            .rows
            .checked_mul(self.dims)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER_LEN as u64))
            .ok_or(overflow)?;
        if usize::try_from(payload).is_err() {
            return Err(EmbioError::ShapeOverflow {
                rows: self.rows,
                dims: self.dims,
            });
        }
        Ok(payload)
    }
}

/// Read an `EMB1` file. The returned matrix is tagged with the file path.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix, EmbioError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(EmbeddingMatrix::from_emb1_bytes(&bytes)?.with_source_tag(path.display().to_string()))
}

/// Write `m` as an `EMB1` file. Non-finite values are refused before anything
/// is written.
pub fn save_embeddings(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<(), EmbioError> {
    let path = path.as_ref();
    let bytes = m.to_emb1_bytes()?;
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Read one embedding per line of comma-separated decimals.
pub fn load_csv(path: impl AsRef<Path>) -> Result<EmbeddingMatrix, EmbioError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    Ok(read_csv(file)?.with_source_tag(path.display().to_string()))
}

/// Parse CSV embeddings from any reader.
pub fn read_csv<R: std::io::Read>(reader: R) -> Result<EmbeddingMatrix, EmbioError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut data = Vec::new();
    let mut dims = None;
    let mut rows = 0usize;
    let mut record = csv::StringRecord::new();
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| EmbioError::Csv {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        if !more {
            break;
        }
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or(rows as u64 + 1);
        let expected = *dims.get_or_insert(record.len());
        if record.len() != expected {
            return Err(EmbioError::RaggedRows {
                line,
                expected,
                found: record.len(),
            });
        }
        for (col, field) in record.iter().enumerate() {
            let v: f32 = field.parse().map_err(|_| EmbioError::Parse {
                line,
                col: col + 1,
                text: field.to_string(),
            })?;
            if !v.is_finite() {
                return Err(EmbioError::NonFiniteValue {
                    row: rows,
                    col,
                    value: v,
                    byte_offset: None,
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    EmbeddingMatrix::new(rows, dims.unwrap_or(0), data)
}

/// Write one embedding per line. Values use the shortest representation that
/// parses back to the same `f32`.
pub fn save_csv(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<(), EmbioError> {
    let path = path.as_ref();
    m.validate()?;
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    write_csv(m, &mut w).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_csv<W: Write>(m: &EmbeddingMatrix, w: &mut W) -> std::io::Result<()> {
    for row in m.iter_rows() {
        let mut first = true;
        for v in row {
            if !first {
                w.write_all(b",")?;
            }
            write!(w, "{v}")?;
            first = false;
        }
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Load by extension: `.csv` is read as CSV, everything else as `EMB1`.
pub fn load_any(path: impl AsRef<Path>) -> Result<EmbeddingMatrix, EmbioError> {
    let path = path.as_ref();
    if is_csv(path) {
        load_csv(path)
    } else {
        load_embeddings(path)
    }
}

/// Save by extension, mirroring [`load_any`].
pub fn save_any(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<(), EmbioError> {
    let path = path.as_ref();
    if is_csv(path) {
        save_csv(m, path)
    } else {
        save_embeddings(m, path)
    }
}
