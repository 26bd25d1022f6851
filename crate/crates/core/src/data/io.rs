use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use crate::error::{PdseError, Result};

use super::CTSlice;

pub const RAW_MAGIC: &[u8; 8] = b"PDSERAW1";
const PNG_SIGNATURE: &[u8; 8] = b"\x89PNG\r\n\x1a\n";

/// Encodes `PDSERAW1`, u32 height, u32 width, then little-endian u16 pixels.
pub fn encode_raw(height: usize, width: usize, pixels: &[u16]) -> Result<Vec<u8>> {
    if pixels.len() != height * width {
        return Err(PdseError::shape("encode_raw", &[pixels.len()], &[height, width]));
    }
    let h = u32::try_from(height).map_err(|_| PdseError::Format("height exceeds u32".into()))?;
    let w = u32::try_from(width).map_err(|_| PdseError::Format("width exceeds u32".into()))?;
    let mut out = Vec::with_capacity(16 + 2 * pixels.len());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    for p in pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_raw(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    if bytes.len() < 16 || &bytes[..8] != RAW_MAGIC {
        return Err(PdseError::Format("not a PDSERAW1 file or truncated header".into()));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if h == 0 || w == 0 {
        return Err(PdseError::Format(format!("raw image has empty extent {h}x{w}")));
    }
    let body = &bytes[16..];
    let expected = h.checked_mul(w).and_then(|n| n.checked_mul(2));
    if expected != Some(body.len()) {
        return Err(PdseError::Format(format!(
            "raw image {h}x{w} needs {} payload bytes, found {}",
            2 * h * w,
            body.len()
        )));
    }
    let pixels = body.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    Ok((h, w, pixels))
}

/// 16-bit grayscale PNG only.
pub fn decode_png16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let fmt = |e: png::DecodingError| PdseError::Format(format!("png: {e}"));
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(fmt)?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale {
        return Err(PdseError::Format(format!(
            "unsupported png color type {:?}, expected single-channel grayscale",
            info.color_type
        )));
    }
    if info.bit_depth != png::BitDepth::Sixteen {
        return Err(PdseError::Format(format!(
            "unsupported bit depth {:?}, expected 16",
            info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| PdseError::Format("png too large".into()))?;
    let mut buf = vec![0u8; size];
    let out = reader.next_frame(&mut buf).map_err(fmt)?;
    let data = &buf[..out.buffer_size()];
    if data.len() != 2 * w * h {
        return Err(PdseError::Format("png payload size mismatch".into()));
    }
    Ok((h, w, data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()))
}

pub fn encode_png16(height: usize, width: usize, pixels: &[u16]) -> Result<Vec<u8>> {
    if pixels.len() != height * width {
        return Err(PdseError::shape("encode_png16", &[pixels.len()], &[height, width]));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let fmt = |e: png::EncodingError| PdseError::Format(format!("png: {e}"));
        let mut w = enc.write_header().map_err(fmt)?;
        let bytes: Vec<u8> = pixels.iter().flat_map(|p| p.to_be_bytes()).collect();
        w.write_image_data(&bytes).map_err(fmt)?;
    }
    Ok(out)
}

/// 8-bit RGB PNG.
pub fn write_png_rgb8(path: &Path, height: usize, width: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * height * width {
        return Err(PdseError::shape("write_png_rgb8", &[rgb.len()], &[height, width, 3]));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let fmt = |e: png::EncodingError| PdseError::Format(format!("png: {e}"));
        enc.write_header().map_err(fmt)?.write_image_data(rgb).map_err(fmt)?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads a raw (`PDSERAW1`) or 16-bit grayscale PNG slice; the image id is
/// the file stem. Pixel values are kept exactly.
pub fn load_slice(path: &Path) -> Result<CTSlice> {
    let bytes = fs::read(path)?;
    let (h, w, pixels) = if bytes.starts_with(RAW_MAGIC) {
        decode_raw(&bytes)?
    } else if bytes.starts_with(PNG_SIGNATURE) {
        decode_png16(&bytes)?
    } else {
        return Err(PdseError::Format(format!(
            "{}: neither a PDSERAW1 file nor a PNG",
            path.display()
        )));
    };
    let image_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    CTSlice::new(image_id, h, w, pixels)
}

pub fn write_raw(path: &Path, slice: &CTSlice) -> Result<()> {
    let bytes = encode_raw(slice.height, slice.width, &slice.pixels)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn write_png16(path: &Path, slice: &CTSlice) -> Result<()> {
    fs::write(path, encode_png16(slice.height, slice.width, &slice.pixels)?)?;
    Ok(())
}
