//! 8-bit RGB images with binary PPM (P6) read/write.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Image {
            width,
            height,
            pixels,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.pixels.len() + 32);
        write!(buf, "P6\n{} {}\n255\n", self.width, self.height)
            .expect("in-memory write cannot fail");
        buf.extend_from_slice(&self.pixels);
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_ppm(&bytes).map_err(|m| Error::Data(format!("{}: {m}", path.display())))
    }
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let token = |pos: &mut usize| -> std::result::Result<String, String> {
        // Skip whitespace and '#' comments between header fields.
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    if token(&mut pos)? != "P6" {
        return Err("not a P6 ppm".into());
    }
    let width: usize = token(&mut pos)?.parse().map_err(|_| "bad width")?;
    let height: usize = token(&mut pos)?.parse().map_err(|_| "bad height")?;
    let maxval: usize = token(&mut pos)?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(format!(
            "pixel data truncated: need {need}, have {}",
            bytes.len().saturating_sub(pos)
        ));
    }
    Ok(Image {
        width,
        height,
        pixels: bytes[pos..pos + need].to_vec(),
    })
}

/// Cheap validity probe used by manifest loading: the file must exist and
/// start with a P6 header.
pub fn is_readable_ppm(path: &Path) -> bool {
    match fs::read(path) {
        Ok(bytes) => bytes.starts_with(b"P6"),
        Err(_) => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::filled(5, 3, [10, 20, 30]);
        img.set(4, 2, [1, 2, 3]);
        let path = dir.path().join("t.ppm");
        img.write_ppm(&path).unwrap();
        let back = Image::read_ppm(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::filled(4, 4, [0, 0, 0]);
        let path = dir.path().join("t.ppm");
        img.write_ppm(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, bytes).unwrap();
        assert!(Image::read_ppm(&path).is_err());
    }
}
