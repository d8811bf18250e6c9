//! Flat little-endian tensor files.
//!
//! Layout: `b"TEN4"`, dtype code (u32), `N, C, H, W` (u32 each), then
//! `N·C·H·W` IEEE-754 values in row-major order. A checkpoint is a plain
//! concatenation of such records.

use std::io::{ErrorKind, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Shape4, Tensor4};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"TEN4";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

fn fmt_err(e: std::io::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn write_tensor(mut w: impl Write, t: &Tensor4, dtype: DType) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + t.numel() * 8);
    buf.extend_from_slice(&MAGIC);
    buf.write_u32::<LittleEndian>(dtype as u32).map_err(fmt_err)?;
    for d in t.shape().dims() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        buf.write_u32::<LittleEndian>(d).map_err(fmt_err)?;
    }
    for &v in t.data() {
        match dtype {
            DType::F32 => buf.write_f32::<LittleEndian>(v as f32),
            DType::F64 => buf.write_f64::<LittleEndian>(v),
        }
        .map_err(fmt_err)?;
    }
    w.write_all(&buf).map_err(fmt_err)
}

/// Reads one record, or `None` at a clean end of stream.
fn read_record(mut r: impl Read) -> Result<Option<Tensor4>> {
    let mut magic = [0u8; 4];
    loop {
        match r.read(&mut magic[..1]) {
            Ok(0) => return Ok(None),
            Ok(_) => break,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(fmt_err(e)),
        }
    }
    r.read_exact(&mut magic[1..]).map_err(fmt_err)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let dtype = DType::from_code(r.read_u32::<LittleEndian>().map_err(fmt_err)?)?;
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.read_u32::<LittleEndian>().map_err(fmt_err)? as usize;
    }
    let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
    let mut data = vec![0.0; shape.numel()];
    match dtype {
        DType::F64 => r.read_f64_into::<LittleEndian>(&mut data).map_err(fmt_err)?,
        DType::F32 => {
            for v in &mut data {
                *v = r.read_f32::<LittleEndian>().map_err(fmt_err)? as f64;
            }
        }
    }
    Tensor4::from_vec(shape, data).map(Some)
}

pub fn read_tensor(r: impl Read) -> Result<Tensor4> {
    read_record(r)?.ok_or_else(|| Error::Format("empty tensor stream".into()))
}

pub fn write_tensors<'a>(mut w: impl Write, tensors: impl IntoIterator<Item = &'a Tensor4>, dtype: DType) -> Result<()> {
    for t in tensors {
        write_tensor(&mut w, t, dtype)?;
    }
    Ok(())
}

pub fn read_tensors(mut r: impl Read) -> Result<Vec<Tensor4>> {
    let mut out = Vec::new();
    while let Some(t) = read_record(&mut r)? {
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor4::from_vec(Shape4::new(1, 2, 1, 1), vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, DType::F64).unwrap();
        assert_eq!(&buf[..4], b"TEN4");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..24], &[1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&buf[24..32], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 24 + 16);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_tensor(&b"TEN5\x02\0\0\0"[..]).is_err());
        let t = Tensor4::ones(Shape4::new(1, 1, 2, 2));
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, DType::F32).unwrap();
        buf.pop();
        assert!(read_tensor(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(dims in (1usize..3, 1usize..4, 1usize..4, 1usize..4), seed in any::<u64>()) {
            let shape = Shape4::new(dims.0, dims.1, dims.2, dims.3);
            let mut k = seed;
            let t = Tensor4::from_fn(shape, |_, _, _, _| {
                k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (k >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            });
            let mut buf = Vec::new();
            write_tensors(&mut buf, [&t, &t.scale(2.0)], DType::F64).unwrap();
            let back = read_tensors(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0], &t);
            prop_assert_eq!(&back[1], &t.scale(2.0));
        }
    }
}
