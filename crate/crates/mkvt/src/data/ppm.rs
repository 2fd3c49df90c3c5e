//! Binary PPM (P6) and PGM (P5) reading and writing, maxval 255, no comments.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor3;

/// Parses a binary netpbm payload into pixels scaled to [0, 1].
pub fn decode_netpbm(bytes: &[u8]) -> Result<Tensor3> {
    let magic = bytes.get(0..2).ok_or_else(|| Error::Format("file shorter than a magic number".into()))?;
    let channels = match magic {
        b"P6" => 3,
        b"P5" => 1,
        b"P3" | b"P2" | b"P1" => {
            return Err(Error::UnsupportedFormat(format!(
                "ASCII netpbm variant {} is not supported; use binary P5/P6",
                String::from_utf8_lossy(magic)
            )))
        }
        other => {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected P5 or P6",
                String::from_utf8_lossy(other)
            )))
        }
    };

    // Header: three whitespace-separated integers after the magic, then one
    // whitespace byte, then the raster.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!(
                "expected a header integer at byte {pos}, found {:?}",
                bytes.get(pos).map(|b| *b as char)
            )));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are utf8");
        *field = text.parse().map_err(|_| Error::Format(format!("unparseable header field {text}")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("maxval {maxval} is not supported, only 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("zero-sized image".into()));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("missing whitespace between header and raster".into()));
    }
    pos += 1;

    let expected = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() < expected {
        return Err(Error::Format(format!(
            "truncated raster: expected {expected} bytes, found {}",
            raster.len()
        )));
    }
    let data: Vec<f64> = raster[..expected].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor3::from_vec(height, width, channels, data)
}

/// Quantizes pixels in [0, 1] to bytes and encodes a binary PPM or PGM.
pub fn encode_netpbm(image: &Tensor3) -> Result<Vec<u8>> {
    let (h, w, c) = image.shape();
    let magic = match c {
        3 => "P6",
        1 => "P5",
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{other}-channel images have no netpbm encoding; use 1 or 3 channels"
            )))
        }
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * c);
    for &v in image.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn read_netpbm(path: &Path) -> Result<Tensor3> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Format(format!("cannot read image {}: {e}", path.display())))?;
    decode_netpbm(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        Error::UnsupportedFormat(msg) => Error::UnsupportedFormat(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_netpbm(path: &Path, image: &Tensor3) -> Result<()> {
    std::fs::write(path, encode_netpbm(image)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_a_two_pixel_ppm() {
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 0]);
        let img = decode_netpbm(&bytes).unwrap();
        assert_eq!(img.shape(), (1, 2, 3));
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(0, 0, 1), 0.0);
        assert_eq!(img.get(0, 1, 0), 0.0);
    }

    #[test]
    fn decodes_a_uniform_pgm() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[128; 4]);
        let img = decode_netpbm(&bytes).unwrap();
        assert_eq!(img.shape(), (2, 2, 1));
        for &v in img.data() {
            assert_eq!(v, 128.0 / 255.0);
        }
    }

    #[test]
    fn rejects_ascii_ppm() {
        let err = decode_netpbm(b"P3\n1 1\n255\n255 0 0\n").unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat(_)));
    }

    #[test]
    fn rejects_unknown_magic() {
        let err = decode_netpbm(b"XX rest").unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn rejects_truncated_raster() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        let err = decode_netpbm(&bytes).unwrap_err();
        assert!(err.to_string().contains("truncated"), "got: {err}");
    }

    #[test]
    fn rejects_unsupported_maxval() {
        let err = decode_netpbm(b"P5\n1 1\n65535\n\x00\x00").unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat(_)));
    }

    #[test]
    fn encode_decode_round_trip_is_exact_on_quantized_values() {
        let img = Tensor3::from_vec(
            2,
            2,
            3,
            (0..12).map(|i| (i * 20) as f64 / 255.0).collect(),
        )
        .unwrap();
        let decoded = decode_netpbm(&encode_netpbm(&img).unwrap()).unwrap();
        assert_eq!(decoded, img);
    }
}
