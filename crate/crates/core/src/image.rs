//! RGB float images and binary PPM input/output.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Row-major interleaved RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image { width, height, data }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Image { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn from_f32(width: usize, height: usize, data: &[f32]) -> Result<Self> {
        Image::from_data(width, height, data.iter().map(|&v| v as f64).collect())
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::shape(format!(
                "image {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// 8-bit binary PPM (`P6`), channels in R, G, B order, values clamped to
    /// `[0, 1]` and rounded.
    pub fn write_ppm<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        out.write_all(&bytes)?;
        Ok(())
    }

    /// Reads an 8-bit `P6` file, mapping bytes to `v / 255`.
    pub fn read_ppm<R: Read>(mut input: R) -> Result<Image> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let bad = |d: &str| Error::corrupt("ppm", d.to_string());
        // four whitespace-separated header fields, comments allowed
        let mut fields = Vec::new();
        let mut i = 0;
        while fields.len() < 4 {
            while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
                if bytes[i] == b'#' {
                    while i < bytes.len() && bytes[i] != b'\n' {
                        i += 1;
                    }
                } else {
                    i += 1;
                }
            }
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if start == i {
                return Err(bad("truncated header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
        }
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad("only 8-bit P6 is supported"));
        }
        let dim = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimensions"));
        let (w, h) = (dim(&fields[1])?, dim(&fields[2])?);
        let body = &bytes[(i + 1).min(bytes.len())..];
        if body.len() != w * h * 3 {
            return Err(bad("payload size does not match the header"));
        }
        Image::from_data(w, h, body.iter().map(|&b| b as f64 / 255.0).collect())
    }
}
