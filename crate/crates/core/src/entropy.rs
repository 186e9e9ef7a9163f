//! Lossless back end: bit-level IO, LEB128 varints, canonical Huffman
//! coding, and run-length mask coding.

use crate::error::{HvqError, Result};

pub const MAX_CODE_LEN: u8 = 32;

/// MSB-first bit writer, padded to a byte boundary on `finish`.
#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    current: u8,
    used: u8,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write_bits(&mut self, code: u32, len: u8) {
        debug_assert!(len <= 32);
        for i in (0..len).rev() {
            let bit = (code >> i) & 1;
            self.current = (self.current << 1) | bit as u8;
            self.used += 1;
            if self.used == 8 {
                self.bytes.push(self.current);
                self.current = 0;
                self.used = 0;
            }
        }
    }

    pub fn bit_len(&self) -> usize {
        self.bytes.len() * 8 + self.used as usize
    }

    pub fn finish(mut self) -> Vec<u8> {
        if self.used > 0 {
            self.current <<= 8 - self.used;
            self.bytes.push(self.current);
        }
        self.bytes
    }
}

/// MSB-first bit reader.
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn read_bit(&mut self) -> Result<u32> {
        let byte = self.pos / 8;
        if byte >= self.bytes.len() {
            return Err(HvqError::Format("bitstream truncated".into()));
        }
        let bit = (self.bytes[byte] >> (7 - (self.pos % 8))) & 1;
        self.pos += 1;
        Ok(u32::from(bit))
    }
}

pub fn write_varint(out: &mut Vec<u8>, mut value: u64) {
    loop {
        let mut byte = (value & 0x7f) as u8;
        value >>= 7;
        if value != 0 {
            byte |= 0x80;
        }
        out.push(byte);
        if value == 0 {
            break;
        }
    }
}

pub fn read_varint(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    let mut value = 0u64;
    let mut shift = 0u32;
    loop {
        if *pos >= bytes.len() {
            return Err(HvqError::Format("varint truncated".into()));
        }
        if shift >= 64 {
            return Err(HvqError::Format("varint too long".into()));
        }
        let byte = bytes[*pos];
        *pos += 1;
        value |= u64::from(byte & 0x7f)
            .checked_shl(shift)
            .ok_or_else(|| HvqError::Format("varint overflow".into()))?;
        if byte & 0x80 == 0 {
            return Ok(value);
        }
        shift += 7;
    }
}

/// Canonical Huffman table: per-symbol code lengths plus the derived
/// encode/decode tables. Two builds from identical frequencies produce
/// identical bitstreams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuffmanTable {
    lengths: Vec<u8>,
    codes: Vec<u32>,
    // decode side: symbols sorted by (length, symbol), plus per-length
    // first code and offsets into the sorted list
    sorted_symbols: Vec<u32>,
    first_code: [u32; MAX_CODE_LEN as usize + 1],
    count_by_len: [u32; MAX_CODE_LEN as usize + 1],
    offset_by_len: [u32; MAX_CODE_LEN as usize + 1],
}

impl HuffmanTable {
    /// Optimal prefix code from symbol frequencies, canonicalized.
    /// Construction ties break by symbol order; a single-symbol alphabet
    /// gets a 1-bit code.
    pub fn from_frequencies(freqs: &[u64]) -> Result<Self> {
        if freqs.iter().all(|&f| f == 0) {
            return Err(HvqError::InvalidArgument(
                "huffman: all frequencies are zero".into(),
            ));
        }
        let lengths = huffman_code_lengths(freqs);
        Self::from_lengths(lengths)
    }

    /// Rebuild from stored code lengths (the archive persists lengths only).
    pub fn from_lengths(lengths: Vec<u8>) -> Result<Self> {
        let max_len = MAX_CODE_LEN as usize;
        let mut count_by_len = [0u32; MAX_CODE_LEN as usize + 1];
        let mut kraft = 0u64;
        for &l in &lengths {
            if l as usize > max_len {
                return Err(HvqError::Format(format!("code length {l} exceeds 32")));
            }
            if l > 0 {
                count_by_len[l as usize] += 1;
                kraft += 1u64 << (max_len - l as usize);
            }
        }
        if kraft > 1u64 << max_len {
            return Err(HvqError::Format("code lengths violate Kraft".into()));
        }
        if kraft == 0 {
            return Err(HvqError::Format("no coded symbols".into()));
        }
        // canonical ordering: (length, symbol)
        let mut order: Vec<u32> = (0..lengths.len() as u32)
            .filter(|&s| lengths[s as usize] > 0)
            .collect();
        order.sort_by_key(|&s| (lengths[s as usize], s));

        let mut first_code = [0u32; MAX_CODE_LEN as usize + 1];
        let mut offset_by_len = [0u32; MAX_CODE_LEN as usize + 1];
        let mut code = 0u32;
        let mut offset = 0u32;
        for l in 1..=max_len {
            code <<= 1;
            first_code[l] = code;
            offset_by_len[l] = offset;
            code += count_by_len[l];
            offset += count_by_len[l];
        }

        let mut codes = vec![0u32; lengths.len()];
        let mut next = first_code;
        for &s in &order {
            let l = lengths[s as usize] as usize;
            codes[s as usize] = next[l];
            next[l] += 1;
        }
        Ok(Self {
            lengths,
            codes,
            sorted_symbols: order,
            first_code,
            count_by_len,
            offset_by_len,
        })
    }

    pub fn lengths(&self) -> &[u8] {
        &self.lengths
    }

    pub fn num_symbols(&self) -> usize {
        self.lengths.len()
    }

    pub fn encode(&self, symbols: &[u32]) -> Result<Vec<u8>> {
        let mut w = BitWriter::new();
        for &s in symbols {
            let s = s as usize;
            if s >= self.lengths.len() || self.lengths[s] == 0 {
                return Err(HvqError::InvalidArgument(format!(
                    "symbol {s} not in huffman table"
                )));
            }
            w.write_bits(self.codes[s], self.lengths[s]);
        }
        Ok(w.finish())
    }

    /// Exact encoded payload size in bits (before byte padding).
    pub fn encoded_bits(&self, symbols: &[u32]) -> u64 {
        symbols
            .iter()
            .map(|&s| u64::from(self.lengths[s as usize]))
            .sum()
    }

    pub fn decode(&self, bytes: &[u8], count: usize) -> Result<Vec<u32>> {
        let mut r = BitReader::new(bytes);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut code = 0u32;
            let mut len = 0usize;
            loop {
                code = (code << 1) | r.read_bit()?;
                len += 1;
                if len > MAX_CODE_LEN as usize {
                    return Err(HvqError::Format("invalid huffman code".into()));
                }
                let n = self.count_by_len[len];
                if n > 0 && code.wrapping_sub(self.first_code[len]) < n {
                    let idx = self.offset_by_len[len] + (code - self.first_code[len]);
                    out.push(self.sorted_symbols[idx as usize]);
                    break;
                }
            }
        }
        Ok(out)
    }
}

/// Huffman code lengths via a deterministic two-queue merge, with a
/// repair step that keeps every length within MAX_CODE_LEN.
fn huffman_code_lengths(freqs: &[u64]) -> Vec<u8> {
    let symbols: Vec<usize> = (0..freqs.len()).filter(|&s| freqs[s] > 0).collect();
    let mut lengths = vec![0u8; freqs.len()];
    if symbols.len() == 1 {
        lengths[symbols[0]] = 1;
        return lengths;
    }

    // leaves sorted by (freq, symbol); merged nodes arrive in
    // non-decreasing weight order so two queues suffice
    let mut leaves: Vec<(u64, usize)> = symbols.iter().map(|&s| (freqs[s], s)).collect();
    leaves.sort();
    #[derive(Clone)]
    struct NodeRef {
        weight: u64,
        members: Vec<usize>,
    }
    let mut q1: std::collections::VecDeque<NodeRef> = leaves
        .iter()
        .map(|&(w, s)| NodeRef {
            weight: w,
            members: vec![s],
        })
        .collect();
    let mut q2: std::collections::VecDeque<NodeRef> = std::collections::VecDeque::new();
    let pop_min = |q1: &mut std::collections::VecDeque<NodeRef>,
                   q2: &mut std::collections::VecDeque<NodeRef>| {
        match (q1.front(), q2.front()) {
            (Some(a), Some(b)) => {
                if a.weight <= b.weight {
                    q1.pop_front().unwrap()
                } else {
                    q2.pop_front().unwrap()
                }
            }
            (Some(_), None) => q1.pop_front().unwrap(),
            (None, Some(_)) => q2.pop_front().unwrap(),
            (None, None) => unreachable!(),
        }
    };
    while q1.len() + q2.len() > 1 {
        let a = pop_min(&mut q1, &mut q2);
        let b = pop_min(&mut q1, &mut q2);
        for &s in a.members.iter().chain(&b.members) {
            lengths[s] += 1;
        }
        let mut members = a.members;
        members.extend(b.members);
        q2.push_back(NodeRef {
            weight: a.weight + b.weight,
            members,
        });
    }

    // length-limit repair (rare; needs very skewed distributions)
    let max = MAX_CODE_LEN;
    if lengths.iter().any(|&l| l > max) {
        for l in lengths.iter_mut() {
            if *l > max {
                *l = max;
            }
        }
        let one = 1u64 << max;
        let mut kraft: u64 = lengths
            .iter()
            .filter(|&&l| l > 0)
            .map(|&l| 1u64 << (max - l))
            .sum();
        // lengthen the least frequent symbols until the code is prefix-free
        let mut by_freq: Vec<usize> = symbols.clone();
        by_freq.sort_by_key(|&s| (freqs[s], s));
        'outer: while kraft > one {
            for &s in &by_freq {
                if lengths[s] < max {
                    kraft -= 1u64 << (max - lengths[s]);
                    lengths[s] += 1;
                    kraft += 1u64 << (max - lengths[s]);
                    continue 'outer;
                }
            }
            unreachable!("kraft repair failed");
        }
    }
    lengths
}

/// Run-length mask coding: alternating varint run lengths, starting with
/// the run of 0s (possibly zero-length).
pub fn rle_mask_encode(bits: &[bool]) -> Vec<u8> {
    let mut out = Vec::new();
    write_varint(&mut out, bits.len() as u64);
    let mut current = false;
    let mut run = 0u64;
    for &b in bits {
        if b == current {
            run += 1;
        } else {
            write_varint(&mut out, run);
            current = b;
            run = 1;
        }
    }
    if !bits.is_empty() {
        write_varint(&mut out, run);
    }
    out
}

pub fn rle_mask_decode(bytes: &[u8]) -> Result<Vec<bool>> {
    let mut pos = 0usize;
    let total = read_varint(bytes, &mut pos)? as usize;
    let mut bits = Vec::with_capacity(total);
    let mut current = false;
    while bits.len() < total {
        let run = read_varint(bytes, &mut pos)? as usize;
        if bits.len() + run > total {
            return Err(HvqError::Format("mask runs exceed declared size".into()));
        }
        bits.extend(std::iter::repeat(current).take(run));
        current = !current;
    }
    Ok(bits)
}
