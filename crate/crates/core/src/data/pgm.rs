//! Binary PGM ("P5", maxval 255) reading and writing. Round trips are
//! bit-exact at 8-bit quantization; masks are stored as {0, 255}.

use std::path::Path;

use crate::error::{Error, Result};

pub fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != width * height {
        return Err(Error::BadShape {
            op: "write_pgm",
            expected: format!("{} bytes", width * height),
            got: vec![bytes.len()],
        });
    }
    let mut out = format!("P5\n{} {}\n255\n", width, height).into_bytes();
    out.extend_from_slice(bytes);
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut pos = 0usize;
    let fail = |offset: usize, msg: &str| Error::Parse {
        path: path.display().to_string(),
        offset,
        msg: msg.to_string(),
    };

    let expect_token = |pos: &mut usize| -> Result<usize> {
        while *pos < raw.len() && raw[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < raw.len() && !raw[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(fail(start, "unexpected end of header"));
        }
        Ok(start)
    };

    let magic_at = expect_token(&mut pos)?;
    if &raw[magic_at..pos] != b"P5" {
        return Err(fail(magic_at, "magic bytes are not 'P5'"));
    }
    let mut read_number = |pos: &mut usize| -> Result<usize> {
        let at = expect_token(pos)?;
        std::str::from_utf8(&raw[at..*pos])
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| fail(at, "expected a decimal integer"))
    };
    let width = read_number(&mut pos)?;
    let height = read_number(&mut pos)?;
    let maxval_at = pos;
    let maxval = read_number(&mut pos)?;
    if maxval != 255 {
        return Err(fail(maxval_at, "maxval must be 255"));
    }
    if pos >= raw.len() || !raw[pos].is_ascii_whitespace() {
        return Err(fail(pos, "missing whitespace after maxval"));
    }
    pos += 1;
    if raw.len() - pos != width * height {
        return Err(fail(pos, "pixel payload length mismatch"));
    }
    Ok((width, height, raw[pos..].to_vec()))
}

/// `[0, 1]` float image to 8-bit, rounding.
pub fn image_to_bytes(image: &[f64]) -> Vec<u8> {
    image
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn bytes_to_image(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| b as f64 / 255.0).collect()
}

/// `{0, 1}` mask to `{0, 255}` storage bytes.
pub fn mask_to_bytes(mask: &[u8]) -> Vec<u8> {
    mask.iter().map(|&b| if b == 1 { 255 } else { 0 }).collect()
}

pub fn bytes_to_mask(bytes: &[u8]) -> Vec<u8> {
    bytes.iter().map(|&b| u8::from(b >= 128)).collect()
}
