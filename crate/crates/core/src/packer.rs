//! Bit-exact `.sqpk` storage for N:M sparse, low-bit weight tensors.
//!
//! # Layout
//!
//! A 21-byte little-endian header:
//!
//! | offset | size | field                               |
//! |-------:|-----:|-------------------------------------|
//! | 0      | 4    | magic `SQPK`                        |
//! | 4      | 1    | version (1)                         |
//! | 5      | 4    | rows (u32)                          |
//! | 9      | 4    | cols (u32)                          |
//! | 13     | 1    | block axis (0 input-dim, 1 flat)    |
//! | 14     | 1    | N                                   |
//! | 15     | 1    | M                                   |
//! | 16     | 1    | bits                                |
//! | 17     | 4    | scale as IEEE-754 binary32 bits     |
//!
//! followed by one record per block, written MSB-first into a continuous
//! bit stream whose final byte is zero-padded. A record is an index field
//! and then `N` two's-complement codes of `bits` bits each, in ascending
//! position order. For 2:4 the index field is two 2-bit positions (4 bits);
//! for every other pattern it is the lexicographic rank of the kept position
//! set, `⌈log₂ C(M, N)⌉` bits wide.
//!
//! Blocks follow the zero-padded block layout on the header's axis. When a
//! block has fewer than `N` real slots, the lowest padding slots fill the
//! remaining positions with code 0; the decoder drops them and rejects any
//! other padding arrangement.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantizer::{CodeMatrix, QuantMode, QuantSpec, SUPPORTED_BITS};
use crate::sparsifier::SparsitySpec;
use crate::tensor::{BlockAxis, BlockCursor, Mask};

pub const MAGIC: &[u8; 4] = b"SQPK";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 21;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PackError {
    #[error("mask error in block {block}: {reason}")]
    Mask { block: usize, reason: String },
    #[error("code {code} at flat index {index} outside [{q_n}, {q_p}]")]
    Range {
        index: usize,
        code: i32,
        q_n: i64,
        q_p: i64,
    },
    #[error("corrupt stream: {0}")]
    Corrupt(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackHeader {
    pub version: u8,
    pub rows: u32,
    pub cols: u32,
    pub axis: BlockAxis,
    pub n: u8,
    pub m: u8,
    pub bits: u8,
    pub scale_bits: u32,
}

impl PackHeader {
    pub fn scale(&self) -> f32 {
        f32::from_bits(self.scale_bits)
    }

    fn to_bytes(self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(MAGIC);
        out[4] = self.version;
        out[5..9].copy_from_slice(&self.rows.to_le_bytes());
        out[9..13].copy_from_slice(&self.cols.to_le_bytes());
        out[13] = self.axis.code();
        out[14] = self.n;
        out[15] = self.m;
        out[16] = self.bits;
        out[17..21].copy_from_slice(&self.scale_bits.to_le_bytes());
        out
    }

    fn parse(bytes: &[u8]) -> Result<Self, PackError> {
        if bytes.len() < HEADER_LEN {
            return Err(PackError::Corrupt(format!(
                "header truncated: {} of {HEADER_LEN} bytes",
                bytes.len()
            )));
        }
        if &bytes[0..4] != MAGIC {
            return Err(PackError::Corrupt("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let header = Self {
            version: bytes[4],
            rows: u32_at(5),
            cols: u32_at(9),
            axis: BlockAxis::from_code(bytes[13])
                .ok_or_else(|| PackError::Corrupt(format!("bad axis code {}", bytes[13])))?,
            n: bytes[14],
            m: bytes[15],
            bits: bytes[16],
            scale_bits: u32_at(17),
        };
        if header.version != VERSION {
            return Err(PackError::Corrupt(format!("unknown version {}", header.version)));
        }
        if header.n == 0 || header.n >= header.m {
            return Err(PackError::Corrupt(format!("bad pattern {}:{}", header.n, header.m)));
        }
        if !SUPPORTED_BITS.contains(&header.bits) {
            return Err(PackError::Corrupt(format!("bad bit-width {}", header.bits)));
        }
        let s = header.scale();
        if !(s.is_finite() && s > 0.0) {
            return Err(PackError::Corrupt(format!("bad scale {s}")));
        }
        Ok(header)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedTensor {
    pub header: PackHeader,
    pub payload: Vec<u8>,
}

impl PackedTensor {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.header.to_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses the container. Record contents are validated by [`decode`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PackError> {
        let header = PackHeader::parse(bytes)?;
        Ok(Self {
            header,
            payload: bytes[HEADER_LEN..].to_vec(),
        })
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), PackError> {
        out.write_all(&self.to_bytes())
            .map_err(|e| PackError::Io(e.to_string()))
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, PackError> {
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| PackError::Io(e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    pub fn len_bytes(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i + 1) as u64)
}

fn ceil_log2(x: u64) -> usize {
    if x <= 1 {
        0
    } else {
        (64 - (x - 1).leading_zeros()) as usize
    }
}

/// Metadata bits per block.
pub fn index_bits(n: usize, m: usize) -> usize {
    if n == 2 && m == 4 {
        4
    } else {
        ceil_log2(binomial(m, n))
    }
}

pub fn record_bits(n: usize, m: usize, bits: usize) -> usize {
    n * bits + index_bits(n, m)
}

/// Lexicographic rank of an ascending position set among all `C(m, k)`.
pub fn combination_rank(positions: &[usize], m: usize) -> u64 {
    let k = positions.len();
    let mut rank = 0u64;
    let mut start = 0;
    for (i, &p) in positions.iter().enumerate() {
        for j in start..p {
            rank += binomial(m - 1 - j, k - 1 - i);
        }
        start = p + 1;
    }
    rank
}

/// Inverse of [`combination_rank`]; `None` if `rank >= C(m, k)`.
pub fn combination_unrank(mut rank: u64, m: usize, k: usize) -> Option<Vec<usize>> {
    if rank >= binomial(m, k) {
        return None;
    }
    let mut out = Vec::with_capacity(k);
    let mut j = 0;
    for i in 0..k {
        loop {
            let c = binomial(m - 1 - j, k - 1 - i);
            if rank < c {
                break;
            }
            rank -= c;
            j += 1;
        }
        out.push(j);
        j += 1;
    }
    Some(out)
}

struct BitWriter {
    bytes: Vec<u8>,
    nbits: usize,
}

impl BitWriter {
    fn with_capacity_bits(bits: usize) -> Self {
        Self {
            bytes: Vec::with_capacity(bits.div_ceil(8)),
            nbits: 0,
        }
    }

    fn push(&mut self, value: u64, width: usize) {
        for i in (0..width).rev() {
            if self.nbits.is_multiple_of(8) {
                self.bytes.push(0);
            }
            if (value >> i) & 1 == 1 {
                let last = self.bytes.len() - 1;
                self.bytes[last] |= 0x80 >> (self.nbits % 8);
            }
            self.nbits += 1;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl BitReader<'_> {
    fn read(&mut self, width: usize) -> u64 {
        let mut v = 0u64;
        for _ in 0..width {
            let bit = (self.bytes[self.pos / 8] >> (7 - self.pos % 8)) & 1;
            v = (v << 1) | bit as u64;
            self.pos += 1;
        }
        v
    }
}

fn layout(rows: usize, cols: usize, axis: BlockAxis, m: usize) -> BlockCursor {
    BlockCursor::new(rows, cols, axis, m, true).expect("padded layout always exists")
}

/// Packs quantization codes under an N:M mask.
///
/// The mask must keep exactly `N` real entries per block (fewer only when
/// the block has fewer than `N` real slots), codes must be in range, and
/// pruned entries must have code 0.
pub fn encode(
    codes: &CodeMatrix,
    mask: &Mask,
    sspec: &SparsitySpec,
    qspec: &QuantSpec,
) -> Result<PackedTensor, PackError> {
    if qspec.mode() != QuantMode::WeightSymmetric {
        return Err(PackError::Unsupported("only signed weight codes are packed".into()));
    }
    if codes.shape() != mask.shape() {
        return Err(PackError::Mask {
            block: 0,
            reason: format!("mask {:?} vs codes {:?}", mask.shape(), codes.shape()),
        });
    }
    let (rows, cols) = codes.shape();
    if rows > u32::MAX as usize || cols > u32::MAX as usize || sspec.m() > u8::MAX as usize {
        return Err(PackError::Unsupported("dimensions exceed header fields".into()));
    }
    let (n, m, bits) = (sspec.n(), sspec.m(), qspec.bits() as usize);
    let (q_n, q_p) = (qspec.q_n(), qspec.q_p());
    for (index, &code) in codes.data().iter().enumerate() {
        if (code as i64) < q_n || (code as i64) > q_p {
            return Err(PackError::Range { index, code, q_n, q_p });
        }
    }

    let cursor = layout(rows, cols, sspec.axis(), m);
    let rec = record_bits(n, m, bits);
    let mut w = BitWriter::with_capacity_bits(cursor.num_blocks() * rec);
    let value_mask = (1u64 << bits) - 1;
    let mut kept = Vec::with_capacity(n);
    for b in cursor.iter() {
        kept.clear();
        let real = cursor.real_slots(b);
        for k in 0..real {
            let i = cursor.slot(b, k).unwrap();
            if mask.bits()[i] {
                kept.push(k);
            } else if codes.data()[i] != 0 {
                return Err(PackError::Mask {
                    block: b,
                    reason: format!("pruned position {k} carries code {}", codes.data()[i]),
                });
            }
        }
        if kept.len() != n.min(real) {
            return Err(PackError::Mask {
                block: b,
                reason: format!("{} survivors, expected {}", kept.len(), n.min(real)),
            });
        }
        kept.extend(real..real + (n - kept.len()));

        if n == 2 && m == 4 {
            w.push(kept[0] as u64, 2);
            w.push(kept[1] as u64, 2);
        } else {
            w.push(combination_rank(&kept, m), index_bits(n, m));
        }
        for &k in &kept {
            let code = cursor.slot(b, k).map_or(0, |i| codes.data()[i]);
            w.push(code as i64 as u64 & value_mask, bits);
        }
    }
    debug_assert_eq!(w.nbits, cursor.num_blocks() * rec);

    Ok(PackedTensor {
        header: PackHeader {
            version: VERSION,
            rows: rows as u32,
            cols: cols as u32,
            axis: sspec.axis(),
            n: n as u8,
            m: m as u8,
            bits: bits as u8,
            scale_bits: (qspec.scale() as f32).to_bits(),
        },
        payload: w.bytes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub codes: CodeMatrix,
    pub mask: Mask,
    pub sparsity: SparsitySpec,
    /// Scale widened from the stored binary32 value.
    pub quant: QuantSpec,
}

impl Decoded {
    pub fn dequantize(&self) -> crate::tensor::Matrix {
        self.codes.dequantize(self.quant.scale())
    }
}

pub fn expected_payload_bytes(header: &PackHeader) -> usize {
    let cursor = layout(
        header.rows as usize,
        header.cols as usize,
        header.axis,
        header.m as usize,
    );
    (cursor.num_blocks() * record_bits(header.n as usize, header.m as usize, header.bits as usize)).div_ceil(8)
}

pub fn decode(packed: &PackedTensor) -> Result<Decoded, PackError> {
    let h = &packed.header;
    PackHeader::parse(&h.to_bytes())?;
    let (rows, cols) = (h.rows as usize, h.cols as usize);
    let (n, m, bits) = (h.n as usize, h.m as usize, h.bits as usize);
    let cursor = layout(rows, cols, h.axis, m);
    let rec = record_bits(n, m, bits);
    let total_bits = cursor.num_blocks() * rec;
    let expected = total_bits.div_ceil(8);
    if packed.payload.len() != expected {
        return Err(PackError::Corrupt(format!(
            "payload is {} bytes, header implies {expected}",
            packed.payload.len()
        )));
    }
    let sparsity = SparsitySpec::new(n, m)
        .map_err(|e| PackError::Corrupt(e.to_string()))?
        .with_axis(h.axis)
        .with_padding(true);
    let quant = QuantSpec::weight(h.bits, h.scale() as f64).map_err(|e| PackError::Corrupt(e.to_string()))?;

    let mut codes = vec![0i32; rows * cols];
    let mut mask = vec![false; rows * cols];
    let mut r = BitReader {
        bytes: &packed.payload,
        pos: 0,
    };
    let sign_bit = 1u64 << (bits - 1);
    for b in cursor.iter() {
        let positions = if n == 2 && m == 4 {
            let p0 = r.read(2) as usize;
            let p1 = r.read(2) as usize;
            if p0 >= p1 {
                return Err(PackError::Corrupt(format!(
                    "block {b}: positions {p0},{p1} not ascending"
                )));
            }
            vec![p0, p1]
        } else {
            let rank = r.read(index_bits(n, m));
            combination_unrank(rank, m, n)
                .ok_or_else(|| PackError::Corrupt(format!("block {b}: rank {rank} >= C({m},{n})")))?
        };
        let real = cursor.real_slots(b);
        let real_kept = positions.iter().filter(|&&p| p < real).count();
        if real_kept != n.min(real) {
            return Err(PackError::Corrupt(format!(
                "block {b}: {real_kept} real survivors, expected {}",
                n.min(real)
            )));
        }
        if positions
            .iter()
            .filter(|&&p| p >= real)
            .enumerate()
            .any(|(k, &p)| p != real + k)
        {
            return Err(PackError::Corrupt(format!(
                "block {b}: padding positions are not the lowest padding slots"
            )));
        }
        for &p in &positions {
            let raw = r.read(bits);
            let code = if raw & sign_bit != 0 {
                (raw as i64 - (1i64 << bits)) as i32
            } else {
                raw as i32
            };
            match cursor.slot(b, p) {
                Some(i) => {
                    codes[i] = code;
                    mask[i] = true;
                }
                None if code != 0 => {
                    return Err(PackError::Corrupt(format!(
                        "block {b}: padding slot {p} carries code {code}"
                    )));
                }
                None => {}
            }
        }
    }
    let tail = expected * 8 - total_bits;
    if tail > 0 && r.read(tail) != 0 {
        return Err(PackError::Corrupt("nonzero trailing pad bits".into()));
    }
    Ok(Decoded {
        codes: CodeMatrix::new(rows, cols, codes).map_err(|e| PackError::Corrupt(e.to_string()))?,
        mask: Mask::new(rows, cols, mask).map_err(|e| PackError::Corrupt(e.to_string()))?,
        sparsity,
        quant,
    })
}

/// Per-block storage versus a dense 32-bit baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionStats {
    pub dense_bits: usize,
    pub packed_bits: usize,
    pub ratio: f64,
    /// Fraction in `[0, 1)`.
    pub savings: f64,
}

impl CompressionStats {
    /// Ratio rounded half-up to one decimal.
    pub fn ratio_display(&self) -> f64 {
        (self.ratio * 10.0).round() / 10.0
    }

    /// Savings in percent, rounded half-up to two decimals.
    pub fn savings_percent_display(&self) -> f64 {
        (self.savings * 10_000.0).round() / 100.0
    }
}

pub fn compression_ratio(n: usize, m: usize, bits: usize) -> CompressionStats {
    let dense_bits = 32 * m;
    let packed_bits = record_bits(n, m, bits);
    CompressionStats {
        dense_bits,
        packed_bits,
        ratio: dense_bits as f64 / packed_bits as f64,
        savings: (dense_bits - packed_bits) as f64 / dense_bits as f64,
    }
}
