//! Binary PPM (P6) reading and writing.
//!
//! The writer emits the exact header `P6\n<W> <H>\n255\n` followed by
//! `W*H*3` raw bytes. The parser is more liberal, per the format's rules:
//! any whitespace between header tokens and `#` comments are accepted, but
//! the maxval must be 255 and the pixel payload must be exactly the declared
//! length. All failures name the offending file.

use std::io::Write;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major, `width * height * 3` bytes.
    pub pixels: Vec<u8>,
}

pub fn write_ppm<W: Write>(w: &mut W, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let expect = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::Usage("image dimensions overflow".into()))?;
    if width == 0 || height == 0 {
        return Err(Error::Usage("image dimensions must be positive".into()));
    }
    if rgb.len() != expect {
        return Err(Error::Dim(format!(
            "ppm payload is {} bytes, {width}x{height} needs {expect}",
            rgb.len()
        )));
    }
    write!(w, "P6\n{width} {height}\n255\n")?;
    w.write_all(rgb)?;
    Ok(())
}

fn parse_err(file: &str, msg: impl Into<String>) -> Error {
    Error::Parse { file: file.into(), line: 1, msg: msg.into() }
}

/// Read one whitespace-delimited ASCII integer starting at `*pos`, skipping
/// leading whitespace and `#` comments.
fn next_int(bytes: &[u8], pos: &mut usize, file: &str, what: &str) -> Result<usize> {
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
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if *pos == start {
        return Err(parse_err(file, format!("expected {what} in ppm header")));
    }
    if *pos - start > 9 {
        return Err(parse_err(file, format!("{what} out of range")));
    }
    let text = std::str::from_utf8(&bytes[start..*pos]).expect("digits are ascii");
    text.parse()
        .map_err(|_| parse_err(file, format!("bad {what}: {text:?}")))
}

pub fn parse_ppm(bytes: &[u8], file: &str) -> Result<Ppm> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(parse_err(file, "missing P6 magic"));
    }
    let mut pos = 2;
    let width = next_int(bytes, &mut pos, file, "width")?;
    let height = next_int(bytes, &mut pos, file, "height")?;
    let maxval = next_int(bytes, &mut pos, file, "maxval")?;
    if width == 0 || height == 0 {
        return Err(parse_err(file, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(parse_err(file, format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(parse_err(file, "missing separator after maxval"));
    }
    pos += 1;
    let expect = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| parse_err(file, "image dimensions overflow"))?;
    let rest = &bytes[pos..];
    if rest.len() != expect {
        return Err(parse_err(
            file,
            format!("payload is {} bytes, header declares {expect}", rest.len()),
        ));
    }
    Ok(Ppm { width, height, pixels: rest.to_vec() })
}
