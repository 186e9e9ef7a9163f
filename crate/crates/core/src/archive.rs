//! The compressed-archive container: a fixed header, a section table, and
//! raw payload sections. Everything is little-endian. The model itself is
//! not stored; archives reference it by content hash.

use crate::error::{HvqError, Result};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"HVQC";
pub const ARCHIVE_VERSION: u16 = 1;

/// Set when the field was constant (sigma = 0): all sections are empty and
/// the stored mean reproduces the field exactly.
pub const FLAG_CONSTANT: u16 = 1;

pub const SECTION_MASK: u32 = 1;
pub const SECTION_IDX0: u32 = 2;
pub const SECTION_IDX1: u32 = 3;
pub const SECTION_OUTLIERS: u32 = 4;
pub const SECTION_TABLES: u32 = 5;

/// Parsed archive contents. Index/mask/table sections are kept as raw
/// bytes; their internal encoding belongs to the codec.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedArchive {
    pub flags: u16,
    pub model_hash: [u8; 32],
    /// Original (unpadded) field shape, 2D or 3D.
    pub shape: Vec<usize>,
    pub block_size: usize,
    pub mean: f64,
    pub std: f64,
    pub log_offset: f64,
    pub log_scaled: bool,
    /// Absolute error bound in original units; None = bound disabled.
    pub tau: Option<f32>,
    /// RLE-coded validity mask.
    pub mask: Vec<u8>,
    /// Huffman bitstream of bottom-level indices, all blocks row-major.
    pub idx0: Vec<u8>,
    /// Huffman bitstream of top-level indices (empty for 1-stage models).
    pub idx1: Vec<u8>,
    /// (flat index into the original array, exact original value).
    pub outliers: Vec<(u64, f32)>,
    /// Code-length tables and stream symbol counts.
    pub tables: Vec<u8>,
}

impl CompressedArchive {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

fn outlier_bytes(outliers: &[(u64, f32)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + outliers.len() * 12);
    out.extend_from_slice(&(outliers.len() as u64).to_le_bytes());
    for &(idx, val) in outliers {
        out.extend_from_slice(&idx.to_le_bytes());
        out.extend_from_slice(&val.to_le_bytes());
    }
    out
}

fn parse_outliers(bytes: &[u8]) -> Result<Vec<(u64, f32)>> {
    if bytes.len() < 8 {
        return Err(HvqError::Format("outlier section shorter than its count".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let expect = n
        .checked_mul(12)
        .and_then(|v| v.checked_add(8))
        .ok_or_else(|| HvqError::Format(format!("outlier count {n} overflows")))?;
    if bytes.len() != expect {
        return Err(HvqError::Format(format!(
            "outlier section is {} bytes, expected {expect} for {n} entries",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let o = 8 + i * 12;
        out.push((
            u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()),
            f32::from_le_bytes(bytes[o + 8..o + 12].try_into().unwrap()),
        ));
    }
    Ok(out)
}

pub fn serialize_archive(a: &CompressedArchive) -> Vec<u8> {
    let outliers = outlier_bytes(&a.outliers);
    let sections: [(u32, &[u8]); 5] = [
        (SECTION_MASK, &a.mask),
        (SECTION_IDX0, &a.idx0),
        (SECTION_IDX1, &a.idx1),
        (SECTION_OUTLIERS, &outliers),
        (SECTION_TABLES, &a.tables),
    ];

    let mut out = Vec::new();
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&a.flags.to_le_bytes());
    out.extend_from_slice(&a.model_hash);
    out.push(a.shape.len() as u8);
    for &d in &a.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&(a.block_size as u32).to_le_bytes());
    out.extend_from_slice(&a.mean.to_le_bytes());
    out.extend_from_slice(&a.std.to_le_bytes());
    out.extend_from_slice(&a.log_offset.to_le_bytes());
    out.extend_from_slice(&f64::from(u8::from(a.log_scaled)).to_le_bytes());
    out.extend_from_slice(&a.tau.unwrap_or(f32::NAN).to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());

    let table_start = out.len();
    let payload_start = table_start + sections.len() * 20;
    let mut offset = payload_start as u64;
    for (id, bytes) in &sections {
        out.extend_from_slice(&id.to_le_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        offset += bytes.len() as u64;
    }
    for (_, bytes) in &sections {
        out.extend_from_slice(bytes);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(HvqError::Format("archive truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn deserialize_archive(bytes: &[u8]) -> Result<CompressedArchive> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != ARCHIVE_MAGIC {
        return Err(HvqError::BadMagic);
    }
    let version = c.u16()?;
    if version != ARCHIVE_VERSION {
        return Err(HvqError::UnsupportedVersion(version));
    }
    let flags = c.u16()?;
    let model_hash: [u8; 32] = c.take(32)?.try_into().unwrap();
    let ndim = c.u8()? as usize;
    if !(2..=3).contains(&ndim) {
        return Err(HvqError::Format(format!("archive declares {ndim} dimensions")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = c.u64()?;
        if d == 0 || d > u64::from(u32::MAX) {
            return Err(HvqError::Format(format!("implausible dimension {d}")));
        }
        shape.push(d as usize);
    }
    let block_size = c.u32()? as usize;
    let mean = c.f64()?;
    let std = c.f64()?;
    let log_offset = c.f64()?;
    let log_flag = c.f64()?;
    if log_flag != 0.0 && log_flag != 1.0 {
        return Err(HvqError::Format(format!("log flag must be 0 or 1, got {log_flag}")));
    }
    let tau_raw = c.f32()?;
    let tau = if tau_raw.is_nan() { None } else { Some(tau_raw) };
    if let Some(t) = tau {
        if t <= 0.0 || !t.is_finite() {
            return Err(HvqError::Format(format!("stored error bound {t} not positive")));
        }
    }

    let n_sections = c.u32()? as usize;
    if n_sections > 64 {
        return Err(HvqError::SectionTable(format!(
            "implausible section count {n_sections}"
        )));
    }
    let mut entries = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let id = c.u32()?;
        let offset = c.u64()? as usize;
        let len = c.u64()? as usize;
        entries.push((id, offset, len));
    }
    let payload_start = c.pos;
    // non-overlapping and in-bounds
    let mut spans: Vec<(usize, usize)> = entries
        .iter()
        .map(|&(_, o, l)| (o, l))
        .filter(|&(_, l)| l > 0)
        .collect();
    spans.sort_unstable();
    let mut prev_end = payload_start;
    for (o, l) in spans {
        let end = o
            .checked_add(l)
            .ok_or_else(|| HvqError::SectionTable("section length overflows".into()))?;
        if o < prev_end {
            return Err(HvqError::SectionTable(format!(
                "section at offset {o} overlaps preceding bytes"
            )));
        }
        if end > bytes.len() {
            return Err(HvqError::SectionTable(format!(
                "section [{o}, {end}) runs past end of file ({} bytes)",
                bytes.len()
            )));
        }
        prev_end = end;
    }

    let mut mask = Vec::new();
    let mut idx0 = Vec::new();
    let mut idx1 = Vec::new();
    let mut outliers = Vec::new();
    let mut tables = Vec::new();
    for (id, offset, len) in entries {
        let body = if len == 0 {
            Vec::new()
        } else {
            bytes[offset..offset + len].to_vec()
        };
        match id {
            SECTION_MASK => mask = body,
            SECTION_IDX0 => idx0 = body,
            SECTION_IDX1 => idx1 = body,
            SECTION_OUTLIERS => outliers = parse_outliers(&body)?,
            SECTION_TABLES => tables = body,
            _ => {} // unknown future section: skipped
        }
    }

    Ok(CompressedArchive {
        flags,
        model_hash,
        shape,
        block_size,
        mean,
        std,
        log_offset,
        log_scaled: log_flag == 1.0,
        tau,
        mask,
        idx0,
        idx1,
        outliers,
        tables,
    })
}
