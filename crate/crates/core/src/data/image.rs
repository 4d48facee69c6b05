//! Minimal image codecs: binary PGM/PPM and 8-bit PNG input, PGM output.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const CONVERT_HINT: &str =
    "convert it offline to PGM/PPM or 8-bit PNG (e.g. `magick in.tif out.png`)";

/// Decoded 8-bit raster, interleaved by channel.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub max_value: u8,
    pub pixels: Vec<u8>,
}

impl Raster {
    /// `(1, C, H, W)` tensor with values `raw / max_value`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let scale = 1.0 / f64::from(self.max_value);
        Tensor::from_fn([1, self.channels, self.height, self.width], |_, c, h, w| {
            let raw = self.pixels[(h * self.width + w) * self.channels + c];
            T::from_f64_lossy(f64::from(raw) * scale)
        })
    }
}

fn sniff_unsupported(bytes: &[u8]) -> Option<&'static str> {
    match bytes {
        [b'I', b'I', 0x2A, 0x00, ..] | [b'M', b'M', 0x00, 0x2A, ..] => Some("TIFF"),
        [b'G', b'I', b'F', b'8', ..] => Some("GIF"),
        [0xFF, 0xD8, 0xFF, ..] => Some("JPEG"),
        [b'B', b'M', ..] => Some("BMP"),
        [b'P', b'1'..=b'4', ..] => Some("ASCII or bitmap PNM"),
        _ => None,
    }
}

pub fn decode_image(path: &Path, bytes: &[u8]) -> Result<Raster> {
    if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        return decode_pnm(path, bytes);
    }
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        return decode_png(path, bytes);
    }
    let detail = match sniff_unsupported(bytes) {
        Some(kind) => format!("{kind} is not supported; {CONVERT_HINT}"),
        None => format!("unrecognized format; {CONVERT_HINT}"),
    };
    Err(Error::UnsupportedFormat {
        path: path.to_path_buf(),
        detail,
    })
}

/// Reads an image as a `(1, C, H, W)` tensor in `[0, 1]`.
pub fn load_image<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(decode_image(path, &bytes)?.to_tensor())
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()?
            .parse()
            .ok()
    }
}

fn decode_pnm(path: &Path, bytes: &[u8]) -> Result<Raster> {
    let malformed = |detail: &str| Error::Malformed {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let channels = if bytes[1] == b'5' { 1 } else { 3 };
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r
        .number()
        .ok_or_else(|| malformed("bad width in PNM header"))?;
    let height = r
        .number()
        .ok_or_else(|| malformed("bad height in PNM header"))?;
    let max_value = r
        .number()
        .ok_or_else(|| malformed("bad maxval in PNM header"))?;
    if width == 0 || height == 0 {
        return Err(malformed("zero image dimension"));
    }
    if max_value == 0 || max_value > 255 {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!("PNM maxval {max_value} (only 8-bit samples are supported)"),
        });
    }
    if !bytes.get(r.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed("missing whitespace after PNM header"));
    }
    let start = r.pos + 1;
    let need = width * height * channels;
    let pixels = bytes
        .get(start..start + need)
        .ok_or_else(|| {
            malformed(&format!(
                "truncated: expected {need} pixel bytes, found {}",
                bytes.len() - start
            ))
        })?
        .to_vec();
    Ok(Raster {
        width,
        height,
        channels,
        max_value: max_value as u8,
        pixels,
    })
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<Raster> {
    let unsupported = |detail: String| Error::UnsupportedFormat {
        path: path.to_path_buf(),
        detail,
    };
    let malformed = |e: png::DecodingError| Error::Malformed {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(malformed)?;
    let info = reader.info();
    let (color, depth, interlaced) = (info.color_type, info.bit_depth, info.interlaced);
    if depth != png::BitDepth::Eight {
        return Err(unsupported(format!(
            "PNG bit depth {depth:?}; only 8-bit is supported"
        )));
    }
    if interlaced {
        return Err(unsupported(format!("interlaced PNG; {CONVERT_HINT}")));
    }
    let channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(unsupported(format!(
                "PNG color type {other:?}; only grayscale or RGB"
            )))
        }
    };
    let mut pixels = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut pixels).map_err(malformed)?;
    pixels.truncate(frame.buffer_size());
    Ok(Raster {
        width: frame.width as usize,
        height: frame.height as usize,
        channels,
        max_value: 255,
        pixels,
    })
}

pub fn encode_pnm(raster: &Raster) -> Vec<u8> {
    let magic = if raster.channels == 1 { "P5" } else { "P6" };
    let mut out = format!(
        "{magic}\n{} {}\n{}\n",
        raster.width, raster.height, raster.max_value
    )
    .into_bytes();
    out.extend_from_slice(&raster.pixels);
    out
}

pub fn write_pnm(path: &Path, raster: &Raster) -> Result<()> {
    fs::write(path, encode_pnm(raster))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Byte used when writing probability `p` into an 8-bit map.
pub fn probability_byte(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Single-channel raster of `round(p·255)` from a `(1, 1, H, W)` map.
pub fn probability_raster<T: Real>(map: &Tensor<T>) -> Result<Raster> {
    let s = map.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::shape(
            "probability_raster",
            format!("expected a 1x1xHxW map, got {s}"),
        ));
    }
    Ok(Raster {
        width: s.w,
        height: s.h,
        channels: 1,
        max_value: 255,
        pixels: map
            .data()
            .iter()
            .map(|p| probability_byte(p.as_f64()))
            .collect(),
    })
}

/// 8-bit raster from a `(1, C, H, W)` tensor in `[0, 1]`, `C ∈ {1, 3}`.
pub fn tensor_raster<T: Real>(image: &Tensor<T>) -> Result<Raster> {
    let s = image.shape();
    if s.n != 1 || !(s.c == 1 || s.c == 3) {
        return Err(Error::shape(
            "tensor_raster",
            format!("expected 1x1 or 1x3 image, got {s}"),
        ));
    }
    let mut pixels = Vec::with_capacity(s.len());
    for h in 0..s.h {
        for w in 0..s.w {
            for c in 0..s.c {
                pixels.push(probability_byte(image.at(0, c, h, w).as_f64()));
            }
        }
    }
    Ok(Raster {
        width: s.w,
        height: s.h,
        channels: s.c,
        max_value: 255,
        pixels,
    })
}
