//! On-disk formats.
//!
//! Tensor files are raw little-endian `f32` payloads (`<name>.f32`) with a
//! JSON sidecar manifest (`<name>.json`) describing shape, dtype and layout.
//!
//! A `.glvq` archive is, with all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "GLVQ"
//! version      u16      1
//! group_count  u32
//! per group:
//!   rows u32, cols u32, dim u16, bits u8, pad u16,
//!   scale f16, mu f16 (0 = companding disabled),
//!   basis dim*dim f16 row-major,
//!   payload_len u64, packed codes
//! ```
//!
//! Codes are stored as offsets `z + 2^(b-1)` in `b` bits each, column-major
//! over the `d x l` code matrix, LSB-first within bytes. Groups are column
//! blocks of one layer, concatenated left to right.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use half::f16;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::codebook::{code_range, reconstruct, CodeMatrix, GroupCodec};
use crate::companding::CompandingParam;
use crate::error::{GlvqError, Result};
use crate::lattice::GenerationMatrix;

pub const MAGIC: [u8; 4] = *b"GLVQ";
pub const VERSION: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 4;

/// Sidecar manifest of a tensor file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub shape: [usize; 2],
    pub dtype: String,
    pub layout: String,
}

impl TensorManifest {
    pub fn f32_row_major(rows: usize, cols: usize) -> Self {
        Self { shape: [rows, cols], dtype: "f32".into(), layout: "row-major".into() }
    }
}

/// A 2-D `f32` tensor and its file representation.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub rows: usize,
    pub cols: usize,
    /// Row-major values.
    pub data: Vec<f32>,
}

/// Sidecar path: `weights.f32` -> `weights.json`.
pub fn manifest_path(payload: &Path) -> PathBuf {
    payload.with_extension("json")
}

impl TensorFile {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(GlvqError::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter().map(|&v| v as f32));
        }
        Self { rows: m.nrows(), cols: m.ncols(), data }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.rows, self.cols, self.data.iter().map(|&v| v as f64))
    }

    pub fn payload_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn manifest(&self) -> TensorManifest {
        TensorManifest::f32_row_major(self.rows, self.cols)
    }

    pub fn from_parts(manifest: &TensorManifest, payload: &[u8]) -> Result<Self> {
        if manifest.dtype != "f32" {
            return Err(GlvqError::Manifest(format!("unsupported dtype {:?}", manifest.dtype)));
        }
        if manifest.layout != "row-major" {
            return Err(GlvqError::Manifest(format!("unsupported layout {:?}", manifest.layout)));
        }
        let [rows, cols] = manifest.shape;
        let expected = rows * cols * 4;
        if payload.len() != expected {
            return Err(GlvqError::TruncatedPayload { expected, actual: payload.len() });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(rows, cols, data)
    }

    /// Reads `path` and its sidecar manifest.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path(path))?;
        let manifest: TensorManifest =
            serde_json::from_str(&text).map_err(|e| GlvqError::Manifest(e.to_string()))?;
        let payload = fs::read(path)?;
        Self::from_parts(&manifest, &payload)
    }

    /// Writes payload and manifest, each atomically.
    pub fn write(&self, path: &Path) -> Result<()> {
        let manifest = serde_json::to_string_pretty(&self.manifest())
            .map_err(|e| GlvqError::Manifest(e.to_string()))?;
        write_atomic(path, &self.payload_bytes())?;
        write_atomic(&manifest_path(path), format!("{manifest}\n").as_bytes())
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| GlvqError::Io(e.error))?;
    Ok(())
}

fn check_pack_bits(bits: u8) -> Result<()> {
    if !(1..=16).contains(&bits) {
        return Err(GlvqError::InvalidArgument(format!("bit-width {bits} outside 1..=16")));
    }
    Ok(())
}

/// Packed length in bytes for `count` codes of `bits` bits.
pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

/// Packs codes (column-major) as `b`-bit offsets, LSB-first.
pub fn pack_codes(codes: &[i32], bits: u8) -> Result<Vec<u8>> {
    check_pack_bits(bits)?;
    let (lo, hi) = code_range(bits);
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    let mut bitpos = 0usize;
    for &z in codes {
        if z < lo || z > hi {
            return Err(GlvqError::CodeOutOfRange { code: z as i64, bits });
        }
        let mut u = (z - lo) as u32;
        let mut remaining = bits as usize;
        while remaining > 0 {
            let byte = bitpos / 8;
            let shift = bitpos % 8;
            let take = remaining.min(8 - shift);
            out[byte] |= ((u & ((1 << take) - 1)) as u8) << shift;
            u >>= take;
            bitpos += take;
            remaining -= take;
        }
    }
    Ok(out)
}

/// Inverse of [`pack_codes`] for a `dim x columns` code matrix.
pub fn unpack_codes(payload: &[u8], bits: u8, dim: usize, columns: usize) -> Result<CodeMatrix> {
    check_pack_bits(bits)?;
    let count = dim * columns;
    let expected = packed_len(count, bits);
    if payload.len() != expected {
        return Err(GlvqError::TruncatedPayload { expected, actual: payload.len() });
    }
    let (lo, _) = code_range(bits);
    let mut codes = Vec::with_capacity(count);
    let mut bitpos = 0usize;
    for _ in 0..count {
        let mut u = 0u32;
        let mut got = 0usize;
        while got < bits as usize {
            let byte = bitpos / 8;
            let shift = bitpos % 8;
            let take = (bits as usize - got).min(8 - shift);
            let chunk = (payload[byte] >> shift) as u32 & ((1 << take) - 1);
            u |= chunk << got;
            got += take;
            bitpos += take;
        }
        codes.push(u as i32 + lo);
    }
    CodeMatrix::new(DMatrix::from_vec(dim, columns, codes), bits)
}

fn to_half(v: f64) -> Result<f16> {
    let h = f16::from_f64(v);
    if !h.is_finite() {
        return Err(GlvqError::HalfOverflow(v));
    }
    Ok(h)
}

/// Rounds every side parameter of `codec` through binary16, as stored.
pub fn round_side_info(codec: &GroupCodec) -> Result<GroupCodec> {
    let basis = codec.basis.matrix().map(|v| f16::from_f64(v).to_f64());
    let scale = to_half(codec.scale)?.to_f64();
    let mu = match codec.mu {
        Some(m) => Some(CompandingParam::new(to_half(m.value())?.to_f64())?),
        None => None,
    };
    GroupCodec::new(GenerationMatrix::new(basis)?, mu, codec.bits, scale, codec.rows, codec.cols)
}

/// One archived group: decode parameters plus its codes.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveGroup {
    pub codec: GroupCodec,
    pub codes: CodeMatrix,
}

/// Serializes groups into the `.glvq` layout.
pub fn write_archive(groups: &[ArchiveGroup]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(groups.len() as u32).to_le_bytes());
    for g in groups {
        let c = &g.codec;
        let d = c.dim();
        if g.codes.dim() != d || g.codes.columns() != c.columns() || g.codes.bits() != c.bits {
            return Err(GlvqError::ShapeMismatch(format!(
                "codes {}x{}@{}b do not match codec {}x{}@{}b",
                g.codes.dim(),
                g.codes.columns(),
                g.codes.bits(),
                d,
                c.columns(),
                c.bits
            )));
        }
        let rows = u32::try_from(c.rows).map_err(|_| GlvqError::InvalidArgument("rows exceed u32".into()))?;
        let cols = u32::try_from(c.cols).map_err(|_| GlvqError::InvalidArgument("cols exceed u32".into()))?;
        let dim = u16::try_from(d).map_err(|_| GlvqError::InvalidArgument("dim exceeds u16".into()))?;
        out.extend_from_slice(&rows.to_le_bytes());
        out.extend_from_slice(&cols.to_le_bytes());
        out.extend_from_slice(&dim.to_le_bytes());
        out.push(c.bits);
        out.extend_from_slice(&(c.pad as u16).to_le_bytes());
        out.extend_from_slice(&to_half(c.scale)?.to_le_bytes());
        let mu = c.mu.map_or(0.0, |m| m.value());
        out.extend_from_slice(&to_half(mu)?.to_le_bytes());
        let b = c.basis.matrix();
        for r in 0..d {
            for k in 0..d {
                out.extend_from_slice(&to_half(b[(r, k)])?.to_le_bytes());
            }
        }
        let payload = pack_codes(g.codes.as_slice(), c.bits)?;
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    Ok(out)
}

/// Location and header of one group inside archive bytes.
#[derive(Debug, Clone)]
struct GroupEntry {
    codec: GroupCodec,
    payload: std::ops::Range<usize>,
}

/// Parsed archive index over borrowed bytes; groups decode on demand.
#[derive(Debug, Clone)]
pub struct ArchiveReader<'a> {
    bytes: &'a [u8],
    entries: Vec<GroupEntry>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    group: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(
            GlvqError::TruncatedRecord { group: self.group, offset: self.pos },
        )?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn half(&mut self) -> Result<f64> {
        let b = self.take(2)?;
        Ok(f16::from_le_bytes([b[0], b[1]]).to_f64())
    }
}

impl<'a> ArchiveReader<'a> {
    /// Validates the header and every record without decoding codes.
    pub fn parse(bytes: &'a [u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            let mut m = [0u8; 4];
            let n = bytes.len().min(4);
            m[..n].copy_from_slice(&bytes[..n]);
            return Err(GlvqError::BadMagic(m));
        }
        if bytes.len() < HEADER_LEN {
            return Err(GlvqError::TruncatedRecord { group: 0, offset: bytes.len() });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(GlvqError::UnsupportedVersion(version));
        }
        let count = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let mut cur = Cursor { bytes, pos: HEADER_LEN, group: 0 };
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for group in 0..count {
            cur.group = group;
            let rows = cur.u32()? as usize;
            let cols = cur.u32()? as usize;
            let dim = cur.u16()? as usize;
            let bits = cur.take(1)?[0];
            let pad = cur.u16()? as usize;
            let scale = cur.half()?;
            let mu = cur.half()?;
            if dim == 0 {
                return Err(GlvqError::Manifest(format!("group {group} has zero lattice dimension")));
            }
            let mut basis = DMatrix::zeros(dim, dim);
            for r in 0..dim {
                for k in 0..dim {
                    basis[(r, k)] = cur.half()?;
                }
            }
            let len = cur.u64()? as usize;
            let start = cur.pos;
            cur.take(len)?;
            let mu = if mu == 0.0 { None } else { Some(CompandingParam::new(mu)?) };
            let codec = GroupCodec::new(GenerationMatrix::new(basis)?, mu, bits, scale, rows, cols)?;
            if codec.pad != pad {
                return Err(GlvqError::Manifest(format!(
                    "group {group}: stored pad {pad} inconsistent with geometry (expected {})",
                    codec.pad
                )));
            }
            let expected = packed_len(codec.dim() * codec.columns(), bits);
            if len != expected {
                return Err(GlvqError::TruncatedPayload { expected, actual: len });
            }
            entries.push(GroupEntry { codec, payload: start..start + len });
        }
        if cur.pos != bytes.len() {
            return Err(GlvqError::TrailingBytes(bytes.len() - cur.pos));
        }
        Ok(Self { bytes, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn codec(&self, index: usize) -> &GroupCodec {
        &self.entries[index].codec
    }

    pub fn codes(&self, index: usize) -> Result<CodeMatrix> {
        let e = &self.entries[index];
        unpack_codes(&self.bytes[e.payload.clone()], e.codec.bits, e.codec.dim(), e.codec.columns())
    }

    pub fn group(&self, index: usize) -> Result<ArchiveGroup> {
        Ok(ArchiveGroup { codec: self.codec(index).clone(), codes: self.codes(index)? })
    }

    /// Decodes sub-block `column` of group `index` without touching the rest.
    pub fn decode_block(&self, index: usize, column: usize) -> Result<Vec<f64>> {
        let e = &self.entries[index];
        let d = e.codec.dim();
        if column >= e.codec.columns() {
            return Err(GlvqError::InvalidArgument(format!("sub-block {column} out of range")));
        }
        let bits = e.codec.bits as usize;
        let (lo, _) = code_range(e.codec.bits);
        let payload = &self.bytes[e.payload.clone()];
        let z: Vec<i32> = (0..d)
            .map(|r| {
                let mut bitpos = (column * d + r) * bits;
                let mut u = 0u32;
                let mut got = 0;
                while got < bits {
                    let take = (bits - got).min(8 - bitpos % 8);
                    u |= ((payload[bitpos / 8] >> (bitpos % 8)) as u32 & ((1 << take) - 1)) << got;
                    got += take;
                    bitpos += take;
                }
                u as i32 + lo
            })
            .collect();
        e.codec.decode_block(&z)
    }

    /// Reconstructs all groups side by side.
    pub fn reconstruct(&self) -> Result<DMatrix<f64>> {
        let parts = (0..self.len())
            .map(|i| reconstruct(&self.codes(i)?, self.codec(i)))
            .collect::<Result<Vec<_>>>()?;
        concat_columns(&parts)
    }
}

/// Joins column blocks with equal row counts.
pub fn concat_columns(parts: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let rows = parts.first().map_or(0, |p| p.nrows());
    if parts.iter().any(|p| p.nrows() != rows) {
        return Err(GlvqError::ShapeMismatch("groups have differing row counts".into()));
    }
    let cols: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        out.columns_mut(at, p.ncols()).copy_from(p);
        at += p.ncols();
    }
    Ok(out)
}

pub fn read_archive(bytes: &[u8]) -> Result<Vec<ArchiveGroup>> {
    let reader = ArchiveReader::parse(bytes)?;
    (0..reader.len()).map(|i| reader.group(i)).collect()
}

/// Side-information overhead in percent: `100 (16 d^2 + 16) / (m n b)`.
/// Counts the FP16 basis and `mu` only, not the stored scale.
pub fn overhead_report(dim: u64, rows: u64, cols: u64, bits: u64) -> Result<f64> {
    if dim == 0 || rows == 0 || cols == 0 || bits == 0 {
        return Err(GlvqError::InvalidArgument("overhead arguments must be >= 1".into()));
    }
    Ok(100.0 * (16 * dim * dim + 16) as f64 / (rows * cols * bits) as f64)
}

/// Side-information bytes per group, with and without the stored scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SideInfoBytes {
    pub accounted: usize,
    pub actual: usize,
}

pub fn side_info_bytes(dim: usize) -> SideInfoBytes {
    let accounted = 2 * dim * dim + 2;
    // Stored header also carries rows, cols, dim, bits, pad, scale and payload length.
    SideInfoBytes { accounted, actual: accounted + 2 + 4 + 4 + 2 + 1 + 2 + 8 }
}

/// Rows of the reference per-group overhead table: `(d, m, n)` at
/// `b = 2 / 3 / 4` with their published two-decimal values.
pub const REFERENCE_OVERHEAD_TABLE: [(u64, u64, u64, [f64; 3]); 6] = [
    (8, 4096, 128, [0.10, 0.07, 0.05]),
    (8, 4096, 256, [0.05, 0.03, 0.02]),
    (16, 4096, 128, [0.39, 0.26, 0.20]),
    (16, 4096, 256, [0.20, 0.13, 0.10]),
    (32, 4096, 128, [1.56, 1.04, 0.78]),
    (32, 4096, 256, [0.78, 0.52, 0.39]),
];
