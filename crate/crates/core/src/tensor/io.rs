//! `GTSR` binary tensor container.
//!
//! Layout of one record: magic `b"GTSR"`, `u8` version, `u8` rank, `rank`
//! little-endian `u32` extents, then `f32` values (little-endian, row-major).
//! Checkpoints store several records back to back.

use std::io::{ErrorKind, Read, Write};

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const GTSR_MAGIC: [u8; 4] = *b"GTSR";
pub const GTSR_VERSION: u8 = 1;

fn integrity(e: std::io::Error) -> Error {
    Error::Integrity(format!("truncated GTSR record: {e}"))
}

pub fn write_tensor<T: Real, W: Write>(w: &mut W, t: &Tensor<T>) -> std::io::Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| std::io::Error::other("rank exceeds 255"))?;
    w.write_all(&GTSR_MAGIC)?;
    w.write_all(&[GTSR_VERSION, rank])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| std::io::Error::other("extent exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn write_tensors<T: Real, W: Write>(w: &mut W, ts: &[&Tensor<T>]) -> std::io::Result<()> {
    ts.iter().try_for_each(|t| write_tensor(w, t))
}

/// Reads one record; `Ok(None)` on a clean end of stream.
pub fn read_tensor<T: Real, R: Read>(r: &mut R) -> Result<Option<Tensor<T>>> {
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut magic[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Integrity("truncated GTSR magic".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(integrity(e)),
        }
    }
    if magic != GTSR_MAGIC {
        return Err(Error::Integrity(format!("bad GTSR magic {magic:?}")));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head).map_err(integrity)?;
    if head[0] != GTSR_VERSION {
        return Err(Error::Integrity(format!("unsupported GTSR version {}", head[0])));
    }
    let rank = head[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(integrity)?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw).map_err(integrity)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data)
        .map(Some)
        .map_err(|e| Error::Integrity(format!("invalid GTSR payload: {e}")))
}

pub fn read_tensors<T: Real, R: Read>(r: &mut R) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::new();
    while let Some(t) = read_tensor(r)? {
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"GTSR");
        assert_eq!(buf[4], 1);
        assert_eq!(buf[5], 2);
        assert_eq!(&buf[6..10], &2u32.to_le_bytes());
        assert_eq!(&buf[10..14], &1u32.to_le_bytes());
        assert_eq!(&buf[14..18], &1.0f32.to_le_bytes());
        assert_eq!(&buf[18..22], &(-2.5f32).to_le_bytes());
        assert_eq!(buf.len(), 22);
    }

    #[test]
    fn corrupted_magic_is_integrity_error() {
        let t = Tensor::<f32>::ones(vec![3]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf[0] = b'X';
        let err = read_tensor::<f32, _>(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[test]
    fn truncated_payload_is_integrity_error() {
        let t = Tensor::<f32>::ones(vec![3]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(matches!(
            read_tensor::<f32, _>(&mut buf.as_slice()),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn multi_record_stream() {
        let a = Tensor::<f32>::ones(vec![2, 2]);
        let b = Tensor::<f32>::zeros(vec![1, 3, 1]);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[&a, &b]).unwrap();
        let back: Vec<Tensor<f32>> = read_tensors(&mut buf.as_slice()).unwrap();
        assert_eq!(back, vec![a, b]);
    }
}
