//! Little-endian binary layouts shared by the tensor, model and patch files.
//!
//! Tensor layout (`PFT1`): magic, `u8` dtype code (1 = f32), `u32` rank,
//! `rank` x `u64` dims, raw row-major payload.
//! Container layout (`PFM1`, `PFP1`): magic, `u32` header length, UTF-8
//! JSON header, then one or more embedded tensor records.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"PFT1";
pub const DTYPE_F32: u8 = 1;
const MAX_RANK: u32 = 16;

pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32_le(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64_le(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn u32_be(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::format(
                at,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(
                self.pos,
                format!("{} trailing bytes", self.remaining()),
            ));
        }
        Ok(())
    }
}

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(DTYPE_F32);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.reserve(t.len() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn decode_tensor(r: &mut Reader<'_>) -> Result<Tensor> {
    r.expect_magic(TENSOR_MAGIC)?;
    let at = r.position();
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(at, format!("unsupported dtype code {dtype}")));
    }
    let at = r.position();
    let rank = r.u32_le("rank")?;
    if rank > MAX_RANK {
        return Err(Error::format(at, format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut count: usize = 1;
    for _ in 0..rank {
        let at = r.position();
        let d = r.u64_le("dim")?;
        let d = usize::try_from(d).map_err(|_| Error::format(at, "dim overflows usize"))?;
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::format(at, "element count overflows"))?;
        shape.push(d);
    }
    let at = r.position();
    let bytes = count
        .checked_mul(4)
        .ok_or_else(|| Error::format(at, "payload size overflows"))?;
    let payload = r.take(bytes, "tensor payload")?;
    let mut data = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(at + 4 * i, "non-finite tensor value"));
        }
        data.push(v);
    }
    Ok(Tensor::from_raw(shape, data))
}

pub fn encode_container(magic: &[u8; 4], header: &[u8], tensors: &[&Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    for t in tensors {
        encode_tensor(t, &mut out);
    }
    out
}

/// Reads magic and the JSON header; the reader is left at the first tensor.
pub fn decode_header<'a, H: serde::de::DeserializeOwned>(
    r: &mut Reader<'a>,
    magic: &[u8; 4],
) -> Result<H> {
    r.expect_magic(magic)?;
    let len = r.u32_le("header length")? as usize;
    let at = r.position();
    let raw = r.take(len, "header")?;
    serde_json::from_slice(raw).map_err(|e| Error::format(at, format!("bad header: {e}")))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    encode_tensor(t, &mut out);
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    let t = decode_tensor(&mut r)?;
    r.finish()?;
    Ok(t)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_file(path, &tensor_to_bytes(t))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    tensor_from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn offset_of(e: Error) -> u64 {
        match e {
            Error::Format { offset, .. } => offset,
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn scalar_round_trips() {
        let t = Tensor::scalar(-2.25);
        let back = tensor_from_bytes(&tensor_to_bytes(&t)).unwrap();
        assert!(back.bit_eq(&t));
    }

    #[test]
    fn short_payload_is_rejected_at_payload_start() {
        let t = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        let bytes = tensor_to_bytes(&t);
        let header = 4 + 1 + 4 + 2 * 8;
        for cut in [bytes.len() - 1, bytes.len() - 4, header + 2] {
            let off = offset_of(tensor_from_bytes(&bytes[..cut]).unwrap_err());
            assert_eq!(off, header as u64);
        }
    }

    #[test]
    fn bad_magic_and_dtype() {
        let mut bytes = tensor_to_bytes(&Tensor::scalar(1.0));
        bytes[4] = 2;
        assert_eq!(offset_of(tensor_from_bytes(&bytes).unwrap_err()), 4);
        bytes[0] = b'X';
        assert_eq!(offset_of(tensor_from_bytes(&bytes).unwrap_err()), 0);
    }

    #[test]
    fn huge_dims_do_not_allocate() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(TENSOR_MAGIC);
        bytes.push(DTYPE_F32);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(tensor_from_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn tensor_round_trip(dims in prop::collection::vec(0usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| ((i as u32).wrapping_mul(seed) % 1000) as f32 * 1e-3 - 0.5).collect();
            let t = Tensor::new(dims, data).unwrap();
            prop_assert!(tensor_from_bytes(&tensor_to_bytes(&t)).unwrap().bit_eq(&t));
        }
    }
}
