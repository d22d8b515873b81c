//! Binary P6 images with maxval 255.

use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

const FORMAT: &str = "ppm";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB samples, row-major.
    pub data: Vec<u8>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u64> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap_or("");
        text.parse().map_err(|_| {
            FormatError::Header {
                format: FORMAT,
                reason: format!("expected {what} at byte {start}"),
            }
            .into()
        })
    }
}

pub fn read_ppm(bytes: &[u8]) -> Result<PpmImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(FormatError::BadMagic { format: FORMAT }.into());
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(FormatError::BadDimensions {
            format: FORMAT,
            width: width as i64,
            height: height as i64,
        }
        .into());
    }
    if maxval != 255 {
        return Err(FormatError::BadMaxval(maxval.min(u32::MAX as u64) as u32).into());
    }
    // exactly one whitespace byte separates the header from the samples
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => {
            return Err(FormatError::Header {
                format: FORMAT,
                reason: "missing whitespace after maxval".into(),
            }
            .into())
        }
    }
    let (width, height) = (width as usize, height as usize);
    let needed = 3 * width * height;
    let payload = &bytes[h.pos..];
    if payload.len() < needed {
        return Err(FormatError::Truncated {
            format: FORMAT,
            needed,
            found: payload.len(),
        }
        .into());
    }
    if payload.len() > needed {
        return Err(FormatError::TrailingBytes {
            format: FORMAT,
            extra: payload.len() - needed,
        }
        .into());
    }
    Ok(PpmImage {
        width,
        height,
        data: payload.to_vec(),
    })
}

pub fn write_ppm(image: &PpmImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn load_ppm(path: &Path) -> Result<PpmImage> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    read_ppm(&bytes)
}

pub fn save_ppm(image: &PpmImage, path: &Path) -> Result<()> {
    std::fs::write(path, write_ppm(image))?;
    Ok(())
}

impl PpmImage {
    /// `H x W x 3` tensor in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v as f32 / 255.0).collect();
        Tensor::new(vec![self.height, self.width, 3], data).expect("ppm dimensions are nonzero")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (height, width, c) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("ppm needs 3 channels, got {c}")));
        }
        let data = t
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }
}
