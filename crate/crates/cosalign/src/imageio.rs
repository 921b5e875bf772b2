//! Binary Netpbm readers and writers.
//!
//! Images travel as 8-bit P6 (PPM, RGB) and label maps as 8-bit P5 (PGM,
//! one class id per pixel). Headers may contain `#` comments; maxval must be
//! 255. Parse failures carry the byte offset where the input stopped making
//! sense.

use std::fmt;
use std::path::Path;

use crate::labelmap::LabelMap;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug)]
pub enum ImageError {
    Io(std::io::Error),
    Parse { offset: usize, message: String },
}

impl fmt::Display for ImageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageError::Io(e) => write!(f, "io error: {e}"),
            ImageError::Parse { offset, message } => {
                write!(f, "byte {offset}: {message}")
            }
        }
    }
}

impl std::error::Error for ImageError {}

impl From<std::io::Error> for ImageError {
    fn from(e: std::io::Error) -> Self {
        ImageError::Io(e)
    }
}

const MAX_EXTENT: usize = 1 << 16;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail<V>(&self, message: impl Into<String>) -> Result<V, ImageError> {
        Err(ImageError::Parse {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn uint_token(&mut self, what: &str) -> Result<usize, ImageError> {
        self.skip_separators();
        let start = self.pos;
        let mut value: usize = 0;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            value = value
                .saturating_mul(10)
                .saturating_add((self.bytes[self.pos] - b'0') as usize);
            self.pos += 1;
        }
        if self.pos == start {
            return self.fail(format!("expected {what}"));
        }
        Ok(value)
    }
}

/// Parse a P6/P5 header; returns (width, height) with the cursor sitting at
/// the first payload byte.
fn parse_header<'a>(
    bytes: &'a [u8],
    magic: &[u8; 2],
) -> Result<(usize, usize, Cursor<'a>), ImageError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return cur.fail(format!(
            "expected {} magic",
            std::str::from_utf8(magic).unwrap()
        ));
    }
    cur.pos = 2;
    let width = cur.uint_token("width")?;
    let height = cur.uint_token("height")?;
    if width == 0 || height == 0 || width > MAX_EXTENT || height > MAX_EXTENT {
        return cur.fail(format!("unreasonable size {width}x{height}"));
    }
    let maxval = cur.uint_token("maxval")?;
    if maxval != 255 {
        return cur.fail(format!("unsupported maxval {maxval}, only 255"));
    }
    // Exactly one separator byte before the payload.
    if cur.pos >= bytes.len() || !matches!(bytes[cur.pos], b' ' | b'\t' | b'\r' | b'\n') {
        return cur.fail("expected single whitespace before payload");
    }
    cur.pos += 1;
    Ok((width, height, cur))
}

/// Parse binary PPM into (width, height, interleaved RGB bytes).
pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), ImageError> {
    let (width, height, cur) = parse_header(bytes, b"P6")?;
    let need = width * height * 3;
    if bytes.len() - cur.pos < need {
        return Err(ImageError::Parse {
            offset: bytes.len(),
            message: format!(
                "payload truncated: have {} of {need} bytes",
                bytes.len() - cur.pos
            ),
        });
    }
    Ok((width, height, bytes[cur.pos..cur.pos + need].to_vec()))
}

/// Parse binary PGM into a label map.
pub fn parse_pgm(bytes: &[u8]) -> Result<LabelMap, ImageError> {
    let (width, height, cur) = parse_header(bytes, b"P5")?;
    let need = width * height;
    if bytes.len() - cur.pos < need {
        return Err(ImageError::Parse {
            offset: bytes.len(),
            message: format!(
                "payload truncated: have {} of {need} bytes",
                bytes.len() - cur.pos
            ),
        });
    }
    Ok(LabelMap::new(height, width, bytes[cur.pos..cur.pos + need].to_vec()).unwrap())
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", labels.width(), labels.height()).into_bytes();
    out.extend_from_slice(labels.data());
    out
}

pub fn load_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>), ImageError> {
    parse_ppm(&std::fs::read(path)?)
}

pub fn load_pgm(path: &Path) -> Result<LabelMap, ImageError> {
    parse_pgm(&std::fs::read(path)?)
}

pub fn save_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), ImageError> {
    Ok(std::fs::write(path, encode_ppm(width, height, rgb))?)
}

pub fn save_pgm(path: &Path, labels: &LabelMap) -> Result<(), ImageError> {
    Ok(std::fs::write(path, encode_pgm(labels))?)
}

/// Interleaved RGB bytes to a planar `[3, h, w]` tensor scaled to `[0, 1]`.
pub fn rgb_to_tensor<T: Real>(width: usize, height: usize, rgb: &[u8]) -> Tensor<T> {
    assert_eq!(rgb.len(), width * height * 3);
    let hw = width * height;
    let mut data = vec![T::zero(); 3 * hw];
    for p in 0..hw {
        for ch in 0..3 {
            data[ch * hw + p] = T::from_f64(rgb[p * 3 + ch] as f64 / 255.0);
        }
    }
    Tensor::new(&[3, height, width], data).unwrap()
}

/// Planar `[3, h, w]` tensor (values clamped to `[0, 1]`) back to
/// interleaved bytes, rounding to nearest.
pub fn tensor_to_rgb<T: Real>(t: &Tensor<T>) -> (usize, usize, Vec<u8>) {
    assert_eq!(t.rank(), 3, "need [3,h,w]");
    assert_eq!(t.shape()[0], 3, "need 3 channels");
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let hw = h * w;
    let d = t.data();
    let mut rgb = vec![0u8; hw * 3];
    for p in 0..hw {
        for ch in 0..3 {
            let v = d[ch * hw + p].as_f64().clamp(0.0, 1.0);
            rgb[p * 3 + ch] = (v * 255.0).round() as u8;
        }
    }
    (w, h, rgb)
}
