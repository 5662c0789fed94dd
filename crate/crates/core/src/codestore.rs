//! Persistent bit-packed code index for answers.
//!
//! Building the index runs each answer once through encode -> tanh
//! sharpening -> sign -> pack; serving then never touches the encoder for
//! answers again. Entries are ordered by answer id so identical inputs
//! produce byte-identical stores.
//!
//! # File format (`.hasb`, all integers little-endian)
//!
//! ```text
//! magic    4 bytes  "HASB"
//! version  u32      1
//! rows     u32      D
//! cols     u32      L
//! count    u64      number of entries
//! entry*   id_len u32, id bytes (UTF-8), payload ceil(D*L/8) bytes
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::data::TokenSequence;
use crate::encoder::{embed, encode};
use crate::error::{Error, Result};
use crate::hashing::{hard_binarize, payload_len, soft_binarize, BinaryMatrix};
use crate::matrix::Scalar;
use crate::model::ModelParams;

const STORE_MAGIC: &[u8; 4] = b"HASB";
const STORE_VERSION: u32 = 1;

/// In-memory code index: (D, L) header plus id-sorted entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeStore {
    rows: usize,
    cols: usize,
    entries: Vec<(String, BinaryMatrix)>,
}

impl CodeStore {
    pub fn new(rows: usize, cols: usize) -> CodeStore {
        CodeStore {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    /// Build from (id, code) pairs; sorts by id and rejects duplicates and
    /// shape mismatches.
    pub fn from_entries(
        rows: usize,
        cols: usize,
        entries: Vec<(String, BinaryMatrix)>,
    ) -> Result<CodeStore> {
        let mut entries = entries;
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::invalid_input(format!(
                    "duplicate answer id {:?}",
                    pair[0].0
                )));
            }
        }
        for (id, code) in &entries {
            if code.rows() != rows || code.cols() != cols {
                return Err(Error::invalid_input(format!(
                    "code for {id:?} is {}x{}, store is {rows}x{cols}",
                    code.rows(),
                    code.cols()
                )));
            }
        }
        Ok(CodeStore { rows, cols, entries })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BinaryMatrix)> {
        self.entries.iter().map(|(id, code)| (id.as_str(), code))
    }

    pub fn get(&self, id: &str) -> Option<&BinaryMatrix> {
        self.entries
            .binary_search_by(|(e, _)| e.as_str().cmp(id))
            .ok()
            .map(|i| &self.entries[i].1)
    }

    /// Total payload bytes across entries (header and ids excluded).
    pub fn payload_bytes(&self) -> u64 {
        self.entries.len() as u64 * payload_len(self.rows, self.cols) as u64
    }
}

/// Encode, sharpen, sign, and pack every answer.
pub fn build_index<'a, F: Scalar>(
    params: &ModelParams<F>,
    answers: impl IntoIterator<Item = (&'a String, &'a TokenSequence)>,
    beta: F,
) -> Result<CodeStore> {
    let rows = params.config.model_dim;
    let cols = params.config.seq_len;
    let mut entries = Vec::new();
    for (id, seq) in answers {
        let embedded = embed(seq, &params.embedding)?;
        let (features, _) = encode(&embedded, &seq.mask, &params.encoder)?;
        let soft = soft_binarize(&features, beta)?;
        entries.push((id.clone(), hard_binarize(&soft)));
    }
    CodeStore::from_entries(rows, cols, entries)
}

pub fn save(store: &CodeStore, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
    w.write_all(STORE_MAGIC)?;
    w.write_all(&STORE_VERSION.to_le_bytes())?;
    w.write_all(&(store.rows as u32).to_le_bytes())?;
    w.write_all(&(store.cols as u32).to_le_bytes())?;
    w.write_all(&(store.entries.len() as u64).to_le_bytes())?;
    for (id, code) in &store.entries {
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        w.write_all(code.payload())?;
    }
    w.flush()?;
    drop(w);
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Byte-counting reader so format errors can name their offset.
struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|_| {
            Error::format(self.offset, format!("truncated while reading {what}"))
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.read_exact(&mut buf, what)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn read_u64(&mut self, what: &str) -> Result<u64> {
        let mut buf = [0u8; 8];
        self.read_exact(&mut buf, what)?;
        Ok(u64::from_le_bytes(buf))
    }
}

pub fn load(path: &Path) -> Result<CodeStore> {
    let mut r = OffsetReader {
        inner: std::io::BufReader::new(std::fs::File::open(path)?),
        offset: 0,
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "magic")?;
    if &magic != STORE_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}")));
    }
    let version = r.read_u32("version")?;
    if version != STORE_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let rows = r.read_u32("rows")? as usize;
    let cols = r.read_u32("cols")? as usize;
    let count = r.read_u64("count")? as usize;

    let payload = payload_len(rows, cols);
    let mut entries = Vec::with_capacity(count);
    let mut previous: Option<String> = None;
    for i in 0..count {
        let id_len = r.read_u32(&format!("entry {i} id length"))? as usize;
        let mut id_bytes = vec![0u8; id_len];
        r.read_exact(&mut id_bytes, &format!("entry {i} id"))?;
        let id = String::from_utf8(id_bytes)
            .map_err(|_| Error::format(r.offset, format!("entry {i} id is not UTF-8")))?;
        if let Some(prev) = &previous {
            if *prev >= id {
                return Err(Error::format(
                    r.offset,
                    format!("entries out of order: {prev:?} then {id:?}"),
                ));
            }
        }
        let mut bytes = vec![0u8; payload];
        r.read_exact(&mut bytes, &format!("entry {i} payload"))?;
        let code = BinaryMatrix::from_payload(rows, cols, bytes)
            .map_err(|e| Error::format(r.offset, format!("entry {i}: {e}")))?;
        previous = Some(id.clone());
        entries.push((id, code));
    }
    let mut extra = [0u8; 1];
    if r.inner.read(&mut extra)? != 0 {
        return Err(Error::format(r.offset, "trailing bytes after entries"));
    }
    Ok(CodeStore { rows, cols, entries })
}

/// Exact storage arithmetic for one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryReport {
    pub rows: usize,
    pub cols: usize,
    pub count: usize,
    /// Bytes to store every matrix densely at `baseline_bytes_per_element`.
    pub float_bytes: u64,
    /// Bytes to store every matrix bit-packed.
    pub binary_bytes: u64,
}

impl MemoryReport {
    pub fn ratio(&self) -> f64 {
        self.float_bytes as f64 / self.binary_bytes as f64
    }
}

/// Storage cost of `count` D x L matrices: dense floats versus packed bits.
pub fn memory_report(
    rows: usize,
    cols: usize,
    count: usize,
    baseline_bytes_per_element: u64,
) -> MemoryReport {
    let per_matrix = (rows * cols) as u64;
    MemoryReport {
        rows,
        cols,
        count,
        float_bytes: count as u64 * per_matrix * baseline_bytes_per_element,
        binary_bytes: count as u64 * payload_len(rows, cols) as u64,
    }
}
