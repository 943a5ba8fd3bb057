//! Binary (P5) 8-bit PGM reading and writing.

use std::path::Path;

use crate::binio::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::image::Image;

fn skip_space_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> std::result::Result<usize, String> {
    *pos = skip_space_and_comments(bytes, *pos);
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(format!("missing {what} in header"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .unwrap()
        .parse()
        .map_err(|_| format!("bad {what} in header"))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let corrupt = |reason: String| Error::Corrupt {
        path: "<pgm>".into(),
        reason,
    };
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::UnsupportedFormat("not a PNM file".into()));
    }
    if bytes[1] != b'5' {
        return Err(Error::UnsupportedFormat(format!(
            "P{} images are not supported, only binary P5",
            bytes[1] as char
        )));
    }
    let mut pos = 2;
    let width = header_number(bytes, &mut pos, "width").map_err(corrupt)?;
    let height = header_number(bytes, &mut pos, "height").map_err(corrupt)?;
    let maxval = header_number(bytes, &mut pos, "maxval").map_err(corrupt)?;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("maxval {maxval}, only 255 is supported")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(corrupt("missing whitespace after maxval".into()));
    }
    pos += 1;
    let n = width
        .checked_mul(height)
        .filter(|&n| n > 0)
        .ok_or_else(|| corrupt(format!("bad dimensions {width}x{height}")))?;
    let payload = &bytes[pos..];
    if payload.len() < n {
        return Err(corrupt(format!(
            "truncated payload: {} of {n} bytes",
            payload.len()
        )));
    }
    Image::new(width, height, payload[..n].iter().map(|&v| f64::from(v)).collect())
}

/// Rounds to the nearest integer and clamps to `[0, 255]`.
pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.pixels().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
    out
}

pub fn load_pgm(path: &Path) -> Result<Image> {
    let bytes = read_file(path)?;
    decode_pgm(&bytes).map_err(|e| match e {
        Error::Corrupt { reason, .. } => Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}

pub fn save_pgm(img: &Image, path: &Path) -> Result<()> {
    write_atomic(path, &encode_pgm(img))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn payload_size() {
        let bytes = encode_pgm(&Image::zeros(256, 256));
        let header = b"P5\n256 256\n255\n".len();
        assert_eq!(bytes.len(), 65536 + header);
    }

    #[test]
    fn ascii_pgm_is_unsupported() {
        let r = decode_pgm(b"P2\n2 1\n255\n0 1\n");
        assert!(matches!(r, Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn rejects_maxval_and_truncation() {
        assert!(matches!(decode_pgm(b"P5\n2 1\n65535\n\0\0\0\0"), Err(Error::UnsupportedFormat(_))));
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\0\0\0"), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = decode_pgm(b"P5\n# made by hand\n2 1\n# max\n255\n\x07\xff").unwrap();
        assert_eq!(img.pixels(), &[7.0, 255.0]);
    }

    #[test]
    fn rounds_and_clamps() {
        let img = Image::new(4, 1, vec![-3.0, 1.4, 1.6, 300.0]).unwrap();
        let back = decode_pgm(&encode_pgm(&img)).unwrap();
        assert_eq!(back.pixels(), &[0.0, 1.0, 2.0, 255.0]);
    }

    proptest! {
        #[test]
        fn integer_images_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
            let img = Image::from_fn(w, h, |r, c| ((seed.wrapping_mul(31).wrapping_add((r * w + c) as u64 * 2654435761)) % 256) as f64);
            prop_assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
        }
    }
}
