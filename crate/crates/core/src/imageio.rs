//! PNG reading and writing for heatmaps, masks and toy RGB renders.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("png encode: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("png decode: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("unsupported png layout: {0}")]
    Unsupported(String),
    #[error("buffer has {got} bytes, expected {expected}")]
    Size { got: usize, expected: usize },
}

/// Decoded 8-bit image, row-major, `channels` interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn pixel(&self, u: usize, v: usize) -> &[u8] {
        let o = (v * self.width + u) * self.channels;
        &self.data[o..o + self.channels]
    }
}

fn write(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<(), ImageError> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut w = enc.write_header()?;
    w.write_image_data(data)?;
    w.finish()?;
    Ok(())
}

pub fn write_gray8(path: impl AsRef<Path>, width: usize, height: usize, data: &[u8]) -> Result<(), ImageError> {
    if data.len() != width * height {
        return Err(ImageError::Size { got: data.len(), expected: width * height });
    }
    write(path.as_ref(), width, height, png::ColorType::Grayscale, png::BitDepth::Eight, data)
}

pub fn write_rgb8(path: impl AsRef<Path>, width: usize, height: usize, data: &[u8]) -> Result<(), ImageError> {
    if data.len() != 3 * width * height {
        return Err(ImageError::Size { got: data.len(), expected: 3 * width * height });
    }
    write(path.as_ref(), width, height, png::ColorType::Rgb, png::BitDepth::Eight, data)
}

/// 1-bit grayscale PNG; `true` is white.
pub fn write_gray1(path: impl AsRef<Path>, width: usize, height: usize, bits: &[bool]) -> Result<(), ImageError> {
    if bits.len() != width * height {
        return Err(ImageError::Size { got: bits.len(), expected: width * height });
    }
    let stride = width.div_ceil(8);
    let mut packed = vec![0u8; stride * height];
    for v in 0..height {
        for u in 0..width {
            if bits[v * width + u] {
                packed[v * stride + u / 8] |= 0x80 >> (u % 8);
            }
        }
    }
    write(path.as_ref(), width, height, png::ColorType::Grayscale, png::BitDepth::One, &packed)
}

/// Reads any 8-bit or sub-byte grayscale/RGB(A) PNG, expanded to 8 bits.
pub fn read(path: impl AsRef<Path>) -> Result<Image8, ImageError> {
    let mut dec = png::Decoder::new(std::io::BufReader::new(File::open(path)?));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(ImageError::Unsupported(format!("{other:?}"))),
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ImageError::Unsupported(format!("bit depth {:?}", info.bit_depth)));
    }
    let width = info.width as usize;
    let height = info.height as usize;
    // Rows may be padded; repack tightly.
    let row = width * channels;
    let data = if info.line_size == row {
        buf
    } else {
        buf.chunks(info.line_size).flat_map(|r| r[..row].to_vec()).collect()
    };
    Ok(Image8 { width, height, channels, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_bit_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let bits: Vec<bool> = (0..11 * 3).map(|i| i % 3 == 0).collect();
        write_gray1(&p, 11, 3, &bits).unwrap();
        let img = read(&p).unwrap();
        assert_eq!((img.width, img.height, img.channels), (11, 3, 1));
        let back: Vec<bool> = img.data.iter().map(|&b| b > 127).collect();
        assert_eq!(back, bits);
    }

    #[test]
    fn gray_and_rgb_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let data: Vec<u8> = (0..20).map(|i| (i * 12) as u8).collect();
        write_gray8(&p, 5, 4, &data).unwrap();
        assert_eq!(read(&p).unwrap().data, data);
        let rgb: Vec<u8> = (0..60).map(|i| (i * 4) as u8).collect();
        write_rgb8(&p, 5, 4, &rgb).unwrap();
        let img = read(&p).unwrap();
        assert_eq!(img.channels, 3);
        assert_eq!(img.pixel(1, 0), &rgb[3..6]);
        assert!(write_gray8(&p, 5, 5, &data).is_err());
    }
}
