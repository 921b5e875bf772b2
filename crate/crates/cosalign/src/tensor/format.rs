//! Binary tensor serialization.
//!
//! Layout: the 6-byte magic `FTNSR1`, one `u8` rank, `rank` little-endian
//! `u32` extents, then the row-major payload as little-endian `f32`. The
//! on-disk scalar type is always `f32`; an `f64` pipeline round-trips through
//! it with the corresponding precision loss.

use std::fmt;
use std::io::{Read, Write};

use crate::real::Real;
use crate::tensor::{Tensor, TensorError};

pub const TENSOR_MAGIC: &[u8; 6] = b"FTNSR1";

/// Rank cap: nothing in this crate goes past rank 4, so anything bigger is
/// treated as a corrupt stream rather than an allocation request.
pub const MAX_RANK: u8 = 8;

/// Refuse payloads past this many elements (1 GiB of f32) when reading.
const MAX_ELEMENTS: usize = 1 << 28;

#[derive(Debug)]
pub enum FormatError {
    Io(std::io::Error),
    /// Stream ended inside the named section.
    Eof { context: &'static str },
    BadMagic { context: &'static str, found: Vec<u8> },
    BadRank(u8),
    /// Extents multiply out past [`MAX_ELEMENTS`] or usize.
    Oversized { detail: String },
    /// A checkpoint entry name is not UTF-8.
    BadName,
    Tensor(TensorError),
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatError::Io(e) => write!(f, "io error: {e}"),
            FormatError::Eof { context } => write!(f, "stream ended inside {context}"),
            FormatError::BadMagic { context, found } => {
                write!(f, "bad {context} magic: {found:02x?}")
            }
            FormatError::BadRank(r) => write!(f, "rank {r} outside 1..={MAX_RANK}"),
            FormatError::Oversized { detail } => write!(f, "payload too large: {detail}"),
            FormatError::BadName => write!(f, "entry name is not valid UTF-8"),
            FormatError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for FormatError {}

impl From<std::io::Error> for FormatError {
    fn from(e: std::io::Error) -> Self {
        FormatError::Io(e)
    }
}

impl From<TensorError> for FormatError {
    fn from(e: TensorError) -> Self {
        FormatError::Tensor(e)
    }
}

pub(crate) fn read_exact_ctx(
    r: &mut impl Read,
    buf: &mut [u8],
    context: &'static str,
) -> Result<(), FormatError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            FormatError::Eof { context }
        } else {
            FormatError::Io(e)
        }
    })
}

pub(crate) fn read_u16(r: &mut impl Read, context: &'static str) -> Result<u16, FormatError> {
    let mut b = [0u8; 2];
    read_exact_ctx(r, &mut b, context)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32(r: &mut impl Read, context: &'static str) -> Result<u32, FormatError> {
    let mut b = [0u8; 4];
    read_exact_ctx(r, &mut b, context)?;
    Ok(u32::from_le_bytes(b))
}

/// Serialize shape + data without constructing a tensor.
pub fn write_raw<T: Real>(
    w: &mut impl Write,
    shape: &[usize],
    data: &[T],
) -> Result<(), FormatError> {
    assert!(
        !shape.is_empty() && shape.len() <= MAX_RANK as usize,
        "rank {} outside serializable range",
        shape.len()
    );
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[shape.len() as u8])?;
    for &e in shape {
        assert!(e <= u32::MAX as usize, "extent {e} overflows u32");
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn write_tensor<T: Real>(w: &mut impl Write, t: &Tensor<T>) -> Result<(), FormatError> {
    write_raw(w, t.shape(), &t.data())
}

/// Deserialize into shape + f32 payload.
pub fn read_raw(r: &mut impl Read) -> Result<(Vec<usize>, Vec<f32>), FormatError> {
    let mut magic = [0u8; 6];
    read_exact_ctx(r, &mut magic, "tensor magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(FormatError::BadMagic {
            context: "tensor",
            found: magic.to_vec(),
        });
    }
    let mut rank = [0u8; 1];
    read_exact_ctx(r, &mut rank, "tensor rank")?;
    let rank = rank[0];
    if rank == 0 || rank > MAX_RANK {
        return Err(FormatError::BadRank(rank));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let e = read_u32(r, "tensor extents")? as usize;
        numel = numel
            .checked_mul(e)
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| FormatError::Oversized {
                detail: format!("extents {shape:?} x {e}"),
            })?;
        shape.push(e);
    }
    let mut bytes = vec![0u8; numel * 4];
    read_exact_ctx(r, &mut bytes, "tensor payload")?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((shape, data))
}

/// Deserialize as an untracked leaf tensor.
pub fn read_tensor<T: Real>(r: &mut impl Read) -> Result<Tensor<T>, FormatError> {
    let (shape, data) = read_raw(r)?;
    let data: Vec<T> = data.iter().map(|&v| T::from_f64(v as f64)).collect();
    Ok(Tensor::new(&shape, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_shape_and_values() {
        let t = Tensor::<f32>::new(&[2, 3], vec![1.0, -2.5, 0.0, 3.25, 1e-7, -4.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..6], TENSOR_MAGIC);
        assert_eq!(buf.len(), 6 + 1 + 2 * 4 + 6 * 4);
        let back = read_tensor::<f32>(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        assert_eq!(back.to_vec(), t.to_vec());
    }

    #[test]
    fn f64_round_trips_at_f32_precision() {
        let t = Tensor::<f64>::new(&[2], vec![std::f64::consts::PI, 1.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor::<f64>(&mut buf.as_slice()).unwrap();
        assert_eq!(back.to_vec()[0], std::f64::consts::PI as f32 as f64);
        assert_eq!(back.to_vec()[1], 1.0);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let buf = b"FTNSRX\x01\x01\x00\x00\x00\x00\x00\x80\x3f".to_vec();
        assert!(matches!(
            read_tensor::<f32>(&mut buf.as_slice()),
            Err(FormatError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_payload_reports_section() {
        let t = Tensor::<f32>::new(&[4], vec![1.0; 4]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        match read_tensor::<f32>(&mut buf.as_slice()) {
            Err(FormatError::Eof { context }) => assert_eq!(context, "tensor payload"),
            other => panic!("expected eof error, got {other:?}"),
        }
    }

    #[test]
    fn absurd_extents_do_not_allocate() {
        let mut buf = Vec::new();
        buf.extend_from_slice(TENSOR_MAGIC);
        buf.push(2);
        buf.extend_from_slice(&u32::MAX.to_le_bytes());
        buf.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            read_tensor::<f32>(&mut buf.as_slice()),
            Err(FormatError::Oversized { .. })
        ));
    }
}
