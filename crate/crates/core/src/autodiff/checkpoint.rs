//! `ICTX1` tensor container.
//!
//! Layout (all integers little-endian `u64`):
//! magic `ICTX1`, tensor count, then per tensor: name length, UTF-8 name
//! bytes, rank, dims, and the `f32` payload in row-major order.

use std::io::{Read, Write};

use super::array::Array;
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"ICTX1";

pub fn write_tensors<'a, W: Write>(
    mut w: W,
    tensors: impl IntoIterator<Item = (&'a str, &'a Array)>,
) -> Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, array) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(array.rank() as u64).to_le_bytes())?;
        for &d in array.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in array.data() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        path: "<checkpoint>".into(),
        detail: detail.into(),
    }
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Array)>> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let count = read_u64(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u64(&mut r)? as usize;
        if len > 1 << 20 {
            return Err(bad(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
        let rank = read_u64(&mut r)? as usize;
        if rank > 16 {
            return Err(bad(format!("tensor {name}: implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((name, Array::new(shape, data)?));
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: &std::path::Path) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensors(file, store.named_values())
}

pub fn load_into(store: &mut ParamStore, path: &std::path::Path) -> Result<()> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let tensors = read_tensors(file).map_err(|e| match e {
        Error::Format { detail, .. } => Error::Format {
            path: path.to_path_buf(),
            detail,
        },
        other => other,
    })?;
    store.load_values(tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn container_round_trip_is_bit_exact(
            dims in proptest::collection::vec(1usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let mut x = seed;
            let data: Vec<f64> = (0..n).map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((x >> 33) as f32 / 1e3 - 2e6) as f64
            }).collect();
            let a = Array::new(dims, data).unwrap();
            let mut bytes = Vec::new();
            write_tensors(&mut bytes, [("layer.0/w", &a)]).unwrap();
            let back = read_tensors(bytes.as_slice()).unwrap();
            prop_assert_eq!(&back[0].0, "layer.0/w");
            prop_assert_eq!(&back[0].1, &a);
            let mut again = Vec::new();
            write_tensors(&mut again, back.iter().map(|(n, a)| (n.as_str(), a))).unwrap();
            prop_assert_eq!(bytes, again);
        }
    }

    #[test]
    fn header_layout() {
        let a = Array::new(vec![2], vec![1.0, -0.5]).unwrap();
        let mut bytes = Vec::new();
        write_tensors(&mut bytes, [("w", &a)]).unwrap();
        assert_eq!(&bytes[..5], b"ICTX1");
        assert_eq!(u64::from_le_bytes(bytes[5..13].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[13..21].try_into().unwrap()), 1);
        assert_eq!(bytes[21], b'w');
        assert_eq!(bytes.len(), 5 + 8 + 8 + 1 + 8 + 8 + 2 * 4);
        assert!(read_tensors(&b"ICTX2\0\0\0\0\0\0\0\0"[..]).is_err());
    }
}
