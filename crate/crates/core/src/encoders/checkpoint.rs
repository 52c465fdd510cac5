//! Binary checkpoint format `VAWI-CKPT v1`.
//!
//! Layout (little-endian): magic `VAWICKPT`, u32 version, u32 tensor count,
//! then per tensor: u16 name length, UTF-8 name, u8 group id, u8 trainable
//! flag, u8 rank, rank × u64 dims, f32 row-major payload.

use std::path::Path;

use crate::error::{Result, VawiError};
use crate::tensor::Tensor;

use super::params::{ParamGroup, ParameterPartition};

pub const MAGIC: &[u8; 8] = b"VAWICKPT";
pub const VERSION: u32 = 1;

pub fn to_bytes(partition: &ParameterPartition) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(partition.len() as u32).to_le_bytes());
    for p in partition.entries() {
        let name = p.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| VawiError::Format(format!("tensor name too long: {}", p.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.group.id());
        out.push(partition.is_trainable(p.group) as u8);
        let shape = p.tensor.shape();
        let rank = u8::try_from(shape.len()).map_err(|_| VawiError::Format("rank above 255".into()))?;
        out.push(rank);
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.tensor.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            VawiError::Integrity(format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
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
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParameterPartition> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(VawiError::Format("bad magic bytes".into()));
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(VawiError::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut partition = ParameterPartition::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| VawiError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let gid = r.u8()?;
        let group = ParamGroup::from_id(gid).ok_or_else(|| VawiError::Format(format!("unknown group id {gid}")))?;
        let trainable = match r.u8()? {
            0 => false,
            1 => true,
            f => return Err(VawiError::Format(format!("bad trainable flag {f}"))),
        };
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(4).ok_or_else(|| VawiError::Integrity("payload size overflow".into()))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        partition.insert(name, group, Tensor::new(shape, data)?)?;
        partition.set_trainable(group, trainable);
    }
    if r.pos != bytes.len() {
        return Err(VawiError::Integrity(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(partition)
}

pub fn save_checkpoint(partition: &ParameterPartition, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(partition)?).map_err(|e| VawiError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParameterPartition> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| VawiError::io(path, e))?;
    from_bytes(&bytes)
}

/// Rounds every tensor to f32 precision, as a save/load cycle would.
pub fn quantize(partition: &mut ParameterPartition) {
    for p in partition.entries_mut() {
        p.tensor.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterPartition {
        let mut p = ParameterPartition::new();
        p.insert("a.w", ParamGroup::Plm, Tensor::from_rows(&[vec![1.5, -0.1], vec![3.25, 1e-7]]).unwrap())
            .unwrap();
        p.insert("v.e", ParamGroup::Vlp, Tensor::row_vector(vec![0.3, 0.7, -2.0])).unwrap();
        p.insert("s", ParamGroup::Head, Tensor::scalar(0.1)).unwrap();
        p.set_trainable(ParamGroup::Vlp, false);
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = sample();
        let bytes = to_bytes(&p).unwrap();
        let q = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&q).unwrap(), bytes);
        for (a, b) in p.entries().iter().zip(q.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.group, b.group);
            assert_eq!(a.tensor.shape(), b.tensor.shape());
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert_eq!((*x as f32).to_bits(), (*y as f32).to_bits());
            }
        }
        assert!(!q.is_trainable(ParamGroup::Vlp));
        assert!(q.is_trainable(ParamGroup::Plm));
    }

    #[test]
    fn corrupted_header_is_format_error() {
        let mut bytes = to_bytes(&sample()).unwrap();
        bytes[2] ^= 0xff;
        assert!(matches!(from_bytes(&bytes), Err(VawiError::Format(_))));
        let mut bytes = to_bytes(&sample()).unwrap();
        bytes[8] = 2;
        assert!(matches!(from_bytes(&bytes), Err(VawiError::Format(_))));
    }

    #[test]
    fn truncation_is_integrity_error() {
        let bytes = to_bytes(&sample()).unwrap();
        for cut in [12, 20, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(VawiError::Integrity(_))), "cut {cut}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(from_bytes(&longer), Err(VawiError::Integrity(_))));
    }

    #[test]
    fn empty_partition() {
        let bytes = to_bytes(&ParameterPartition::new()).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[12..16], &0u32.to_le_bytes());
        assert!(from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&sample(), &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        save_checkpoint(&q, dir.path().join("n.ckpt")).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(dir.path().join("n.ckpt")).unwrap());
    }
}
