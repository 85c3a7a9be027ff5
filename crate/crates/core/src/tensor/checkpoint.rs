//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! "QARC" | version: u32 | count: u64 |
//!   count × ( name_len: u32 | name: UTF-8 | rank: u32 | dims: rank × u64 | values: n × f64 )
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"QARC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    if &read_array::<4, _>(&mut r)? != MAGIC {
        return Err(Error::Format("missing QARC magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = u64::from_le_bytes(read_array(&mut r)?);
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_array(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(f64::from_le_bytes(read_array(&mut r)?));
        }
        out.push((name, Tensor::new(shape, values)?));
    }
    Ok(out)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    write_tensors(BufWriter::new(File::create(path)?), &store.named_tensors())
}

pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    let tensors = read_tensors(BufReader::new(File::open(path)?))?;
    store.load_named(&tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            tensors in prop::collection::vec(
                ("[a-z._0-9]{1,12}", prop::collection::vec(1usize..4, 1..4))
                    .prop_flat_map(|(name, shape)| {
                        let n = shape.iter().product::<usize>();
                        (Just(name), Just(shape), prop::collection::vec(any::<f64>(), n))
                    }),
                0..5,
            )
        ) {
            let tensors: Vec<(String, Tensor)> = tensors
                .into_iter()
                .map(|(n, s, v)| (n, Tensor::new(s, v).unwrap()))
                .collect();
            let mut buf = Vec::new();
            write_tensors(&mut buf, &tensors).unwrap();
            let back = read_tensors(buf.as_slice()).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for ((n1, t1), (n2, t2)) in tensors.iter().zip(&back) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let b1: Vec<u64> = t1.values().iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u64> = t2.values().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }

    #[test]
    fn layout_is_little_endian() {
        let t = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("ab".into(), t)]).unwrap();
        let mut want = b"QARC".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u64.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(b"ab");
        want.extend(1u32.to_le_bytes());
        want.extend(1u64.to_le_bytes());
        want.extend(1.0f64.to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_tensors(&b"NOPE\x01\0\0\0"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("w".into(), Tensor::from_vec(vec![1.0, 2.0]))]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_tensors(buf.as_slice()), Err(Error::Format(_))));
    }
}
