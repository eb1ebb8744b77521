//! Portable float maps. `PF` holds three channels, `Pf` one; a negative scale
//! marks little-endian samples. Rows are stored bottom to top.

use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::Image;

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode_pfm(&bytes).map_err(|e| match e {
        Error::Format { message, .. } => super::format_error(path, message),
        other => other,
    })
}

/// Writes a one- or three-channel raster as little-endian float32 PFM.
pub fn write_pfm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    std::fs::write(path.as_ref(), encode_pfm(img)?)?;
    Ok(())
}

pub fn encode_pfm(img: &Image) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::Contract(format!("PFM needs 1 or 3 channels, got {c}"))),
    };
    let header = format!("{magic}\n{} {}\n-1.0\n", img.width(), img.height());
    let row_len = img.width() * img.channels();
    let mut out = Vec::with_capacity(header.len() + img.data().len() * 4);
    out.extend_from_slice(header.as_bytes());
    for y in (0..img.height()).rev() {
        let row = &img.data()[y * row_len..(y + 1) * row_len];
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn bad(message: impl Into<String>) -> Error {
    Error::Format {
        path: "<memory>".into(),
        message: message.into(),
    }
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Image> {
    // header tokens: magic, width, height, scale
    let mut tokens = Vec::with_capacity(4);
    let mut at = 0;
    while tokens.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..at]).map_err(|_| bad("non-ascii header"))?);
    }
    // exactly one whitespace byte separates the scale from the samples
    at += 1;
    let channels = match tokens[0] {
        "PF" => 3,
        "Pf" => 1,
        m => return Err(bad(format!("unknown magic {m:?}"))),
    };
    let width: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| bad("bad scale"))?;
    let little = scale < 0.0;
    let count = width * height * channels;
    let body = bytes.get(at..).unwrap_or_default();
    if body.len() < count * 4 {
        return Err(bad(format!("expected {} sample bytes, found {}", count * 4, body.len())));
    }
    let row_len = width * channels;
    let mut data = vec![0.0; count];
    for (i, chunk) in body[..count * 4].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let file_row = i / row_len;
        let y = height - 1 - file_row;
        data[y * row_len + i % row_len] = v as f64;
    }
    Image::from_vec(width, height, channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_standard() {
        let img = Image::from_fn(3, 2, 1, |x, y, px| px[0] = (x + 10 * y) as f64);
        let bytes = encode_pfm(&img).unwrap();
        assert!(bytes.starts_with(b"Pf\n3 2\n-1.0\n"));
        // bottom row first
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(first, 10.0);
        assert_eq!(decode_pfm(&bytes).unwrap(), img);
    }

    #[test]
    fn big_endian_is_accepted() {
        let mut bytes = b"PF\n1 1\n1.0\n".to_vec();
        for v in [1.5f32, -2.0, 0.25] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        let img = decode_pfm(&bytes).unwrap();
        assert_eq!(img.pixel(0, 0), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn truncated_body_is_rejected() {
        let bytes = b"Pf\n4 4\n-1.0\n\0\0\0\0".to_vec();
        assert!(matches!(decode_pfm(&bytes), Err(Error::Format { .. })));
    }
}
