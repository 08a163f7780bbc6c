//! 8-bit RGB image files: PNG and binary PPM (P6).
//!
//! Images load as `(1, 3, h, w)` tensors scaled to `[0, 1]`. Saving quantizes
//! with round-half-up, so `load(save(x))` is within `1/255` of `x`.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Ppm,
}

impl ImageFormat {
    /// Format implied by a path's extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("png") => Ok(ImageFormat::Png),
            Some("ppm") => Ok(ImageFormat::Ppm),
            _ => Err(Error::Format(format!(
                "{}: expected a .png or .ppm file",
                path.display()
            ))),
        }
    }
}

pub fn is_image_path(path: &Path) -> bool {
    ImageFormat::from_path(path).is_ok()
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Truncated(m) => Error::Truncated(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Decodes by content sniffing, not by extension.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else {
        Err(Error::Format("not a PNG or binary PPM (P6) file".into()))
    }
}

pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_image(image, ImageFormat::from_path(path)?)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_image(image: &Tensor, format: ImageFormat) -> Result<Vec<u8>> {
    let (w, h, rgb) = to_rgb8(image)?;
    match format {
        ImageFormat::Ppm => {
            let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
            out.extend_from_slice(&rgb);
            Ok(out)
        }
        ImageFormat::Png => {
            let mut out = Vec::new();
            {
                let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
                enc.set_color(png::ColorType::Rgb);
                enc.set_depth(png::BitDepth::Eight);
                let mut writer = enc
                    .write_header()
                    .map_err(|e| Error::Format(format!("png encode: {e}")))?;
                writer
                    .write_image_data(&rgb)
                    .map_err(|e| Error::Format(format!("png encode: {e}")))?;
            }
            Ok(out)
        }
    }
}

/// Round-half-up quantization to 8 bits.
pub fn quantize(v: Real) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Interleaved RGB bytes of the first batch item. One-channel images are
/// replicated to gray.
pub fn to_rgb8(image: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (_, c, h, w) = image.dims4()?;
    if c != 3 && c != 1 {
        return Err(Error::dim(format!("cannot save a {c}-channel image")));
    }
    let mut rgb = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                rgb.push(quantize(image.at4(0, ch.min(c - 1), y, x)));
            }
        }
    }
    Ok((w, h, rgb))
}

fn from_interleaved(w: usize, h: usize, channels: usize, bytes: &[u8]) -> Result<Tensor> {
    let mut data = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        for ch in 0..3 {
            let src = match channels {
                1 | 2 => bytes[p * channels],
                _ => bytes[p * channels + ch],
            };
            data[ch * h * w + p] = Real::from(src) / 255.0;
        }
    }
    Tensor::new(vec![1, 3, h, w], data)
}

fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let map_err = |e: png::DecodingError| match e {
        png::DecodingError::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::Truncated("png stream ended early".into())
        }
        other => Error::Format(format!("png: {other}")),
    };
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(map_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("png too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(map_err)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "only 8-bit PNGs are supported, got {:?}",
            info.bit_depth
        )));
    }
    let channels = info.color_type.samples();
    let (w, h) = (info.width as usize, info.height as usize);
    from_interleaved(w, h, channels, &buf[..w * h * channels])
}

fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    // header: "P6" <ws> width <ws> height <ws> maxval <single ws> raster
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
                None => return Err(Error::Truncated("ppm header ended early".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("malformed ppm header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Format("ppm header value out of range".into()))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "only maxval 255 is supported, got {maxval}"
        )));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format("ppm has zero size".into()));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Truncated("ppm header ended early".into())),
    }
    let need = w * h * 3;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::Truncated(format!(
            "ppm raster has {} of {need} bytes",
            raster.len()
        )));
    }
    from_interleaved(w, h, 3, &raster[..need])
}
