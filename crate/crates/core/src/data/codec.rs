//! 8-bit image files: PNG (behind the default `png` feature) and binary
//! PGM/PPM, which needs no external decoder.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Interleaved 8-bit pixels, 1 (gray) or 3 (RGB) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image8 {
    /// Planar `(1, c, h, w)` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, c) = (self.width, self.channels);
        Tensor::from_fn(Shape::new(1, c, self.height, w), |_, ch, y, x| {
            self.data[(y * w + x) * c + ch] as f64 / 255.0
        })
    }

    /// Quantize the first item of a `(n, c, h, w)` tensor in `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.c != 1 && s.c != 3 {
            return Err(Error::Codec(format!("cannot store {} channels as an image", s.c)));
        }
        let mut data = Vec::with_capacity(s.c * s.plane());
        for y in 0..s.h {
            for x in 0..s.w {
                for c in 0..s.c {
                    data.push((t.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        Ok(Image8 {
            width: s.w,
            height: s.h,
            channels: s.c,
            data,
        })
    }

    /// Binary mask where `v >= 0.5` maps to 255.
    pub fn from_mask(t: &Tensor) -> Result<Self> {
        Self::from_tensor(&t.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
    }
}

fn codec_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Codec(format!("{}: {msg}", path.display()))
}

pub fn read_image(path: &Path) -> Result<Image8> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| codec_err(path, e))
}

pub fn write_image(path: &Path, img: &Image8) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let bytes = match ext.as_str() {
        "pgm" | "ppm" | "pnm" => encode_pnm(img),
        "png" => encode_png(img).map_err(|e| codec_err(path, e))?,
        other => return Err(codec_err(path, format!("unsupported image extension `{other}`"))),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Image8, String> {
    if bytes.starts_with(b"\x89PNG") {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(bytes)
    } else {
        Err("unrecognized image format".into())
    }
}

pub fn encode_pnm(img: &Image8) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<Image8, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("not a binary PGM/PPM".into()),
    };
    // Header: magic, width, height, maxval, separated by whitespace and
    // optional `#` comments, then exactly one whitespace byte.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed header field")?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("only 8-bit PNM is supported (maxval {maxval})"));
    }
    pos += 1;
    let len = width * height * channels;
    let data = bytes
        .get(pos..pos + len)
        .ok_or("truncated pixel data")?
        .to_vec();
    Ok(Image8 {
        width,
        height,
        channels,
        data,
    })
}

#[cfg(feature = "png")]
fn encode_png(img: &Image8) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(if img.channels == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| e.to_string())?;
        writer.write_image_data(&img.data).map_err(|e| e.to_string())?;
    }
    Ok(out)
}

#[cfg(feature = "png")]
fn decode_png(bytes: &[u8]) -> std::result::Result<Image8, String> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or("image too large")?];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    buf.truncate(info.buffer_size());
    let (width, height) = (info.width as usize, info.height as usize);
    let (channels, data) = match info.color_type {
        png::ColorType::Grayscale => (1, buf),
        png::ColorType::GrayscaleAlpha => (1, buf.chunks(2).map(|p| p[0]).collect()),
        png::ColorType::Rgb => (3, buf),
        png::ColorType::Rgba => (3, buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect()),
        png::ColorType::Indexed => return Err("indexed PNG not expanded".into()),
    };
    Ok(Image8 {
        width,
        height,
        channels,
        data,
    })
}

#[cfg(not(feature = "png"))]
fn encode_png(_: &Image8) -> std::result::Result<Vec<u8>, String> {
    Err("PNG support is disabled; use .pgm/.ppm".into())
}

#[cfg(not(feature = "png"))]
fn decode_png(_: &[u8]) -> std::result::Result<Image8, String> {
    Err("PNG support is disabled; use .pgm/.ppm".into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_image() -> impl Strategy<Value = Image8> {
        (1usize..12, 1usize..12, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(w, h, c)| {
            proptest::collection::vec(any::<u8>(), w * h * c).prop_map(move |data| Image8 {
                width: w,
                height: h,
                channels: c,
                data,
            })
        })
    }

    proptest! {
        #[test]
        fn pnm_round_trip(img in arb_image()) {
            prop_assert_eq!(decode(&encode_pnm(&img)).unwrap(), img);
        }

        #[cfg(feature = "png")]
        #[test]
        fn png_round_trip(img in arb_image()) {
            prop_assert_eq!(decode(&encode_png(&img).unwrap()).unwrap(), img);
        }

        #[test]
        fn tensor_quantization_is_lossless(img in arb_image()) {
            prop_assert_eq!(Image8::from_tensor(&img.to_tensor()).unwrap(), img);
        }
    }

    #[test]
    fn pnm_header_comments_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let img = decode(bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 1, 1));
        assert_eq!(img.data, vec![0, 255]);
    }

    #[test]
    fn unknown_format_is_rejected() {
        assert!(decode(b"GIF89a").is_err());
    }
}
