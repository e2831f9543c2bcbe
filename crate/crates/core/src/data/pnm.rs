//! Binary PPM (P6) and PGM (P5) codecs, 8-bit only.

use std::path::Path;

use crate::error::{Error, ParseErrorKind, Result};

/// A decoded PNM raster: interleaved channels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

fn magic_for(channels: usize) -> &'static str {
    if channels == 3 {
        "P6"
    } else {
        "P5"
    }
}

pub fn encode(width: usize, height: usize, channels: usize, pixels: &[u8]) -> Vec<u8> {
    debug_assert_eq!(pixels.len(), width * height * channels);
    let mut out = format!("{}\n{} {}\n255\n", magic_for(channels), width, height).into_bytes();
    out.extend_from_slice(pixels);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<u32, ParseErrorKind> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ParseErrorKind::Header(format!("missing or invalid {what}")))
    }
}

/// Decodes a P6 (`channels == 3`) or P5 (`channels == 1`) file body.
pub fn decode(bytes: &[u8], channels: usize) -> std::result::Result<Raster, ParseErrorKind> {
    let expected = magic_for(channels);
    if bytes.len() < 2 || &bytes[..2] != expected.as_bytes() {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(ParseErrorKind::Magic { expected, found });
    }
    let mut c = Cursor { bytes, pos: 2 };
    let width = c.number("width")? as usize;
    let height = c.number("height")? as usize;
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return Err(ParseErrorKind::MaxVal(maxval));
    }
    if width == 0 || height == 0 {
        return Err(ParseErrorKind::Header("zero dimension".into()));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if c.pos >= bytes.len() || !bytes[c.pos].is_ascii_whitespace() {
        return Err(ParseErrorKind::Header("no whitespace after maxval".into()));
    }
    let payload = &bytes[c.pos + 1..];
    let need = width * height * channels;
    if payload.len() < need {
        return Err(ParseErrorKind::Truncated {
            expected: need,
            found: payload.len(),
        });
    }
    Ok(Raster {
        width,
        height,
        channels,
        pixels: payload[..need].to_vec(),
    })
}

pub fn read(path: &Path, channels: usize) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, channels).map_err(|kind| Error::Parse {
        path: path.to_path_buf(),
        kind,
    })
}

pub fn write(path: &Path, raster: &Raster) -> Result<()> {
    let bytes = encode(raster.width, raster.height, raster.channels, &raster.pixels);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_two_by_two_ppm() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30]);
        let r = decode(&bytes, 3).unwrap();
        assert_eq!((r.width, r.height), (2, 2));
        assert_eq!(&r.pixels[9..12], &[10, 20, 30]);
        assert_eq!(encode(2, 2, 3, &r.pixels), bytes);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5 # labels\n# another\n3 1 255\n".to_vec();
        bytes.extend_from_slice(&[0, 1, 255]);
        assert_eq!(decode(&bytes, 1).unwrap().pixels, vec![0, 1, 255]);
    }

    #[test]
    fn distinct_failure_kinds() {
        assert!(matches!(decode(b"P6\n1 1\n255\n\0\0\0", 1), Err(ParseErrorKind::Magic { .. })));
        assert!(matches!(decode(b"P5\n1 1\n15\n\0", 1), Err(ParseErrorKind::MaxVal(15))));
        assert!(matches!(
            decode(b"P5\n2 2\n255\n\0\0", 1),
            Err(ParseErrorKind::Truncated { expected: 4, found: 2 })
        ));
        assert!(matches!(decode(b"P5\nx 2\n255\n", 1), Err(ParseErrorKind::Header(_))));
    }
}
