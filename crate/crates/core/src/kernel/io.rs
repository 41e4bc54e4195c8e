//! `MMT1` flat tensor files: magic `MMT1`, rank as u32 LE, each extent as
//! u32 LE, then the data as f64 LE in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MMT1";

pub fn write_mmt1<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_mmt1<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected MMT1")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank == 0 {
        return Err(Error::Format("rank 0 tensor".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut word)?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after tensor data".into()));
    }
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_mmt1(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    read_mmt1(&mut BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_mmt1(&mut buf, &t).unwrap();
        let mut expected = b"MMT1".to_vec();
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        assert!(read_mmt1(&mut &b"MMT2\x01\x00\x00\x00"[..]).is_err());
        let t = Tensor::vector(vec![1.0, 2.0]);
        let mut buf = Vec::new();
        write_mmt1(&mut buf, &t).unwrap();
        buf.pop();
        assert!(read_mmt1(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::randn(&shape, 3.0, &mut rng);
            let mut buf = Vec::new();
            write_mmt1(&mut buf, &t).unwrap();
            let back = read_mmt1(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
