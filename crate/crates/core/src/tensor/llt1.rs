//! `LLT1` binary tensor files.
//!
//! Layout (all little-endian): the magic bytes `LLT1`, a `u32` rank, `rank`
//! `u64` extents, then the `f64` payload in row-major order. Several records
//! may be concatenated in one file.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LLT1";

pub fn write_to(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 8 * t.rank() + 8 * t.numel());
    write_to(&mut buf, t).expect("writing to a Vec cannot fail");
    buf
}

pub fn encode_all<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Vec<u8> {
    let mut buf = Vec::new();
    for t in tensors {
        write_to(&mut buf, t).expect("writing to a Vec cannot fail");
    }
    buf
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("LLT1 truncated while reading {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

/// Decode one record from the front of `bytes`, advancing the slice.
pub fn decode_one(bytes: &mut &[u8]) -> Result<Tensor> {
    let magic = take(bytes, 4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad LLT1 magic {:?}", magic)));
    }
    let rank = u32::from_le_bytes(take(bytes, 4, "rank")?.try_into().unwrap()) as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible LLT1 rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(bytes, 8, "dims")?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflow".into()))?;
    let payload = take(bytes, n.checked_mul(8).ok_or_else(|| Error::Format("payload overflow".into()))?, "payload")?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut rest = bytes;
    let t = decode_one(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after LLT1 record", rest.len())));
    }
    Ok(t)
}

pub fn decode_all(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut rest = bytes;
    let mut out = Vec::new();
    while !rest.is_empty() {
        out.push(decode_one(&mut rest)?);
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(t)).map_err(|e| Error::io(path, e))
}

pub fn save_all<'a>(path: impl AsRef<Path>, tensors: impl IntoIterator<Item = &'a Tensor>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_all(tensors)).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&read_bytes(path.as_ref())?)
}

pub fn load_all(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    decode_all(&read_bytes(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"LLT1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..24], &1u64.to_le_bytes());
        assert_eq!(&b[24..32], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 40);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut b = encode(&t);
        assert!(decode(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(decode(&b).is_err());
    }

    proptest! {
        #[test]
        fn concatenated_records_round_trip(
            shapes in prop::collection::vec(prop::collection::vec(1usize..5, 0..4), 1..4),
            seed in any::<u64>(),
        ) {
            let tensors: Vec<Tensor> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    Tensor::from_fn(s.clone(), |j| ((seed as f64) * 1e-9 + (i * 31 + j) as f64).sin()).unwrap()
                })
                .collect();
            let bytes = encode_all(&tensors);
            let back = decode_all(&bytes).unwrap();
            prop_assert_eq!(back, tensors);
        }
    }
}
