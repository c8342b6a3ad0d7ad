//! Binary model (`.srm`) and sparse delta (`.srd`) files, delta encoding
//! and application, and storage accounting.
//!
//! All integers and floats are little-endian.
//!
//! `.srm` (28 + 4P bytes):
//!
//! | offset | size | field                                            |
//! |--------|------|--------------------------------------------------|
//! | 0      | 4    | magic `SRMF`                                     |
//! | 4      | 4    | version (u32) = 1                                |
//! | 8      | 1    | arch code (0 espcn, 1 srcnn, 2 edsr1)            |
//! | 9      | 1    | scale                                            |
//! | 10     | 1    | provenance (0 random, 1 pretrained, 2 meta, 3 adapted) |
//! | 11     | 1    | reserved, 0                                      |
//! | 12     | 4    | provenance chunk id (u32), 0 unless adapted      |
//! | 16     | 4    | P (u32)                                          |
//! | 20     | 4P   | parameters (f32)                                 |
//! | 20+4P  | 8    | FNV-1a 64 content hash of the parameter bytes    |
//!
//! `.srd` (32 + 8E bytes):
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `SRDF`                           |
//! | 4      | 4    | version (u32) = 1                      |
//! | 8      | 1    | arch code                              |
//! | 9      | 1    | scale                                  |
//! | 10     | 2    | reserved, 0                            |
//! | 12     | 4    | chunk id (u32)                         |
//! | 16     | 8    | parent content hash (u64)              |
//! | 24     | 4    | parent parameter count P (u32)         |
//! | 28     | 4    | entry count E (u32)                    |
//! | 32     | 8E   | entries: index (u32), new value (f32)  |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::backbone::{ArchId, ArchSpec, ModelParams, Provenance};
use crate::error::{EmtError, Result, ResultExt};

pub const MODEL_MAGIC: [u8; 4] = *b"SRMF";
pub const DELTA_MAGIC: [u8; 4] = *b"SRDF";
pub const FORMAT_VERSION: u32 = 1;
pub const MODEL_HEADER_BYTES: usize = 20;
pub const DELTA_HEADER_BYTES: usize = 32;
pub const DELTA_ENTRY_BYTES: usize = 8;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// FNV-1a over the little-endian bytes of the parameter vector.
pub fn content_hash(theta: &[f32]) -> u64 {
    let mut h = FNV_OFFSET;
    for v in theta {
        for b in v.to_le_bytes() {
            h = (h ^ b as u64).wrapping_mul(FNV_PRIME);
        }
    }
    h
}

impl ModelParams {
    pub fn content_hash(&self) -> u64 {
        content_hash(&self.theta)
    }
}

/// Private parameters of one chunk: absolute new values at the coordinates
/// that changed relative to the parent model.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDelta {
    pub chunk_id: u32,
    pub parent_hash: u64,
    pub param_count: u32,
    pub arch_id: ArchId,
    pub scale: u8,
    pub entries: Vec<(u32, f32)>,
}

impl SparseDelta {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn encoded_len(&self) -> usize {
        DELTA_HEADER_BYTES + DELTA_ENTRY_BYTES * self.entries.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&DELTA_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.arch_id.code());
        out.push(self.scale);
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&self.chunk_id.to_le_bytes());
        out.extend_from_slice(&self.parent_hash.to_le_bytes());
        out.extend_from_slice(&self.param_count.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for &(i, v) in &self.entries {
            out.extend_from_slice(&i.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "delta");
        r.magic(&DELTA_MAGIC)?;
        r.version()?;
        let arch_id = ArchId::from_code(r.u8()?)?;
        let scale = r.u8()?;
        r.u16()?;
        let chunk_id = r.u32()?;
        let parent_hash = r.u64()?;
        let param_count = r.u32()?;
        let n = r.u32()? as usize;
        if r.remaining() != n * DELTA_ENTRY_BYTES {
            return Err(EmtError::Format(format!(
                "delta declares {n} entries but carries {} payload bytes",
                r.remaining()
            )));
        }
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let i = r.u32()?;
            let v = r.f32()?;
            if let Some(&(prev, _)) = entries.last() {
                if i <= prev {
                    return Err(EmtError::Format(format!("delta indices not ascending at {i}")));
                }
            }
            if i >= param_count {
                return Err(EmtError::IndexOutOfRange {
                    index: i as usize,
                    len: param_count as usize,
                });
            }
            entries.push((i, v));
        }
        Ok(SparseDelta {
            chunk_id,
            parent_hash,
            param_count,
            arch_id,
            scale,
            entries,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        SparseDelta::from_bytes(&fs::read(path)?)
    }
}

/// Record every coordinate where `adapted` differs from `parent`. Any
/// difference outside `mask` (sorted ascending) is a contract violation.
pub fn encode_delta(parent: &ModelParams, adapted: &ModelParams, mask: &[usize], chunk_id: u32) -> Result<SparseDelta> {
    if parent.arch != adapted.arch {
        return Err(EmtError::invalid(format!(
            "parent is {} x{}, adapted is {} x{}",
            parent.arch.arch_id, parent.arch.scale, adapted.arch.arch_id, adapted.arch.scale
        )));
    }
    let mut entries = Vec::new();
    let mut m = mask.iter().peekable();
    for (i, (&a, &b)) in parent.theta.iter().zip(&adapted.theta).enumerate() {
        while m.next_if(|&&j| j < i).is_some() {}
        let in_mask = m.peek() == Some(&&i);
        if a.to_bits() != b.to_bits() {
            if !in_mask {
                return Err(EmtError::MaskViolation { index: i });
            }
            entries.push((i as u32, b));
        }
    }
    Ok(SparseDelta {
        chunk_id,
        parent_hash: parent.content_hash(),
        param_count: parent.param_count() as u32,
        arch_id: parent.arch.arch_id,
        scale: parent.arch.scale as u8,
        entries,
    })
}

/// Overwrite the delta's coordinates in a copy of `parent`.
pub fn apply_delta(parent: &ModelParams, delta: &SparseDelta) -> Result<ModelParams> {
    let found = parent.content_hash();
    if found != delta.parent_hash {
        return Err(EmtError::HashMismatch {
            chunk: delta.chunk_id,
            expected: delta.parent_hash,
            found,
        });
    }
    if delta.arch_id != parent.arch.arch_id || delta.scale as usize != parent.arch.scale {
        return Err(EmtError::invalid(format!(
            "delta for chunk {} targets {} x{}, parent is {} x{}",
            delta.chunk_id, delta.arch_id, delta.scale, parent.arch.arch_id, parent.arch.scale
        )));
    }
    let mut theta = parent.theta.clone();
    for &(i, v) in &delta.entries {
        let slot = theta.get_mut(i as usize).ok_or(EmtError::IndexOutOfRange {
            index: i as usize,
            len: parent.param_count(),
        })?;
        *slot = v;
    }
    parent.with_theta(theta, Provenance::Adapted { chunk: delta.chunk_id })
}

/// Apply `deltas` in order starting from `root`, returning every
/// intermediate model.
pub fn reconstruct_chain(root: &ModelParams, deltas: &[SparseDelta]) -> Result<Vec<ModelParams>> {
    let mut out: Vec<ModelParams> = Vec::with_capacity(deltas.len());
    for d in deltas {
        let parent = out.last().unwrap_or(root);
        let next = apply_delta(parent, d)?;
        out.push(next);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StorageReport {
    pub param_count: usize,
    pub chunks: usize,
    pub private_params: usize,
    pub fraction_of_p: f64,
    pub delta_bytes: usize,
}

impl StorageReport {
    /// e.g. `0.28P`
    pub fn fraction_label(&self) -> String {
        format!("{:.2}P", self.fraction_of_p)
    }
}

pub fn storage_report(deltas: &[SparseDelta], param_count: usize) -> StorageReport {
    let private_params: usize = deltas.iter().map(SparseDelta::len).sum();
    StorageReport {
        param_count,
        chunks: deltas.len(),
        private_params,
        fraction_of_p: if param_count == 0 {
            0.0
        } else {
            private_params as f64 / param_count as f64
        },
        delta_bytes: deltas.iter().map(SparseDelta::encoded_len).sum(),
    }
}

fn provenance_codes(p: Provenance) -> (u8, u32) {
    match p {
        Provenance::Random => (0, 0),
        Provenance::Pretrained => (1, 0),
        Provenance::Meta => (2, 0),
        Provenance::Adapted { chunk } => (3, chunk),
    }
}

pub fn model_to_bytes(model: &ModelParams) -> Vec<u8> {
    let (prov, chunk) = provenance_codes(model.provenance);
    let mut out = Vec::with_capacity(MODEL_HEADER_BYTES + 4 * model.param_count() + 8);
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(model.arch.arch_id.code());
    out.push(model.arch.scale as u8);
    out.push(prov);
    out.push(0);
    out.extend_from_slice(&chunk.to_le_bytes());
    out.extend_from_slice(&(model.param_count() as u32).to_le_bytes());
    for v in &model.theta {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&model.content_hash().to_le_bytes());
    out
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::new(bytes, "model");
    r.magic(&MODEL_MAGIC)?;
    r.version()?;
    let arch_id = ArchId::from_code(r.u8()?)?;
    let scale = r.u8()? as usize;
    let prov = r.u8()?;
    r.u8()?;
    let chunk = r.u32()?;
    let provenance = match prov {
        0 => Provenance::Random,
        1 => Provenance::Pretrained,
        2 => Provenance::Meta,
        3 => Provenance::Adapted { chunk },
        other => return Err(EmtError::Format(format!("unknown provenance code {other}"))),
    };
    let p = r.u32()? as usize;
    let arch = ArchSpec::new(arch_id, scale)?;
    if arch.param_count() != p {
        return Err(EmtError::Format(format!(
            "{arch_id} x{scale} has {} parameters, file declares {p}",
            arch.param_count()
        )));
    }
    if r.remaining() != 4 * p + 8 {
        return Err(EmtError::Format(format!(
            "model payload is {} bytes, expected {}",
            r.remaining(),
            4 * p + 8
        )));
    }
    let mut theta = Vec::with_capacity(p);
    for _ in 0..p {
        theta.push(r.f32()?);
    }
    let stored = r.u64()?;
    let actual = content_hash(&theta);
    if stored != actual {
        return Err(EmtError::Format(format!(
            "model content hash {stored:016x} does not match parameters ({actual:016x})"
        )));
    }
    ModelParams::new(arch, theta, provenance)
}

pub fn write_model(path: &Path, model: &ModelParams) -> Result<()> {
    write_atomic(path, &model_to_bytes(model))
}

pub fn read_model(path: &Path) -> Result<ModelParams> {
    fs::read(path)
        .map_err(EmtError::from)
        .and_then(|b| model_from_bytes(&b))
        .context(|| format!("model {}", path.display()))
}

/// Write via a temporary file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| EmtError::Io(e.error))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Reader { bytes, pos: 0, what }
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self.bytes.get(self.pos..end).ok_or_else(|| {
            EmtError::Format(format!("{} file truncated at byte {}", self.what, self.pos))
        })?;
        self.pos = end;
        Ok(slice.try_into().expect("slice of length N"))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take::<4>()?;
        if &got != want {
            return Err(EmtError::Format(format!(
                "bad {} magic {:?}",
                self.what,
                String::from_utf8_lossy(&got)
            )));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(EmtError::Format(format!("unsupported {} version {v}", self.what)));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::build_model;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
        let theta = [1.5f32, -2.0];
        let bytes: Vec<u8> = theta.iter().flat_map(|v| v.to_le_bytes()).collect();
        assert_eq!(content_hash(&theta), fnv1a64(&bytes));
    }

    #[test]
    fn identical_models_give_empty_delta() {
        let m = build_model(ArchId::Espcn, 2, 1).unwrap();
        let d = encode_delta(&m, &m, &[], 1).unwrap();
        assert!(d.is_empty());
        assert_eq!(apply_delta(&m, &d).unwrap().theta, m.theta);
    }

    #[test]
    fn single_change() {
        let m = build_model(ArchId::Espcn, 2, 1).unwrap();
        let mut a = m.clone();
        a.theta[17] = 0.25;
        let d = encode_delta(&m, &a, &[3, 17, 40], 2).unwrap();
        assert_eq!(d.entries, vec![(17, 0.25)]);
        assert_eq!(d.encoded_len(), DELTA_HEADER_BYTES + 8);
        assert!(matches!(
            encode_delta(&m, &a, &[3, 40], 2),
            Err(EmtError::MaskViolation { index: 17 })
        ));
    }

    #[test]
    fn wrong_parent_is_rejected() {
        let m = build_model(ArchId::Espcn, 2, 1).unwrap();
        let mut a = m.clone();
        a.theta[0] += 1.0;
        let d1 = encode_delta(&m, &a, &[0], 1).unwrap();
        let mut b = a.clone();
        b.theta[5] += 1.0;
        let d2 = encode_delta(&a, &b, &[5], 2).unwrap();
        assert!(matches!(apply_delta(&m, &d2), Err(EmtError::HashMismatch { chunk: 2, .. })));
        let chain = reconstruct_chain(&m, &[d1, d2]).unwrap();
        assert_eq!(chain[1].theta, b.theta);
    }

    #[test]
    fn storage_fractions() {
        let r = storage_report(&[], 1000);
        assert_eq!(r.private_params, 0);
        assert_eq!(r.fraction_label(), "0.00P");
    }

    #[test]
    fn model_bytes_layout() {
        let m = build_model(ArchId::Edsr1, 4, 3).unwrap();
        let bytes = model_to_bytes(&m);
        assert_eq!(bytes.len(), 28 + 4 * m.param_count());
        assert_eq!(&bytes[..4], b"SRMF");
        assert_eq!(model_from_bytes(&bytes).unwrap(), m);

        let mut bad = bytes.clone();
        bad[MODEL_HEADER_BYTES] ^= 1;
        assert!(model_from_bytes(&bad).is_err());
        assert!(model_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn delta_rejects_malformed() {
        let d = SparseDelta {
            chunk_id: 1,
            parent_hash: 7,
            param_count: 10,
            arch_id: ArchId::Espcn,
            scale: 2,
            entries: vec![(1, 1.0), (4, 2.0)],
        };
        let bytes = d.to_bytes();
        assert_eq!(SparseDelta::from_bytes(&bytes).unwrap(), d);
        let mut unsorted = d.clone();
        unsorted.entries = vec![(4, 1.0), (1, 2.0)];
        assert!(SparseDelta::from_bytes(&unsorted.to_bytes()).is_err());
        let mut oob = d.clone();
        oob.entries = vec![(10, 1.0)];
        assert!(SparseDelta::from_bytes(&oob.to_bytes()).is_err());
        assert!(SparseDelta::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model(ArchId::Espcn, 3, 8).unwrap();
        let p = dir.path().join("m.srm");
        write_model(&p, &m).unwrap();
        assert_eq!(read_model(&p).unwrap(), m);
        let mut a = m.clone();
        a.theta[2] = 9.0;
        let d = encode_delta(&m, &a, &[2], 4).unwrap();
        let dp = dir.path().join("c.srd");
        d.write(&dp).unwrap();
        assert_eq!(std::fs::metadata(&dp).unwrap().len() as usize, 32 + 8);
        assert_eq!(SparseDelta::read(&dp).unwrap(), d);
    }
}
