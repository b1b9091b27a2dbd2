//! Image codecs: binary/ASCII PPM and PGM (the byte-exact path) and 8-bit PNG.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decoded 8-bit raster, interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Pnm,
    Png,
}

impl ImageFormat {
    pub fn extension(self, channels: usize) -> &'static str {
        match (self, channels) {
            (ImageFormat::Png, _) => "png",
            (ImageFormat::Pnm, 1) => "pgm",
            (ImageFormat::Pnm, _) => "ppm",
        }
    }
}

/// `[0,1]` float to byte: scale by 255 and round half up.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

impl Raster {
    /// Converts a `[C,H,W]` tensor with values in `[0,1]`.
    pub fn from_tensor(image: &Tensor) -> Result<Self> {
        let (c, h, w) = match image.shape() {
            &[c, h, w] if c == 1 || c == 3 => (c, h, w),
            other => {
                return Err(Error::Dimension(format!(
                    "image must be [1|3,H,W], got {other:?}"
                )))
            }
        };
        let plane = h * w;
        let mut pixels = Vec::with_capacity(c * plane);
        for p in 0..plane {
            for ch in 0..c {
                pixels.push(quantize(image.data()[ch * plane + p]));
            }
        }
        Ok(Self {
            width: w,
            height: h,
            channels: c,
            pixels,
        })
    }

    /// `[channels,H,W]` tensor in `[0,1]`, converting gray/RGB/RGBA as needed.
    pub fn to_tensor(&self, channels: usize) -> Result<Tensor> {
        let plane = self.width * self.height;
        let mut data = vec![0.0; channels * plane];
        for p in 0..plane {
            let px = &self.pixels[p * self.channels..(p + 1) * self.channels];
            for ch in 0..channels {
                let v = match (self.channels, channels) {
                    (1, _) | (2, _) => px[0],
                    (_, 1) => {
                        let sum = px[0] as u32 + px[1] as u32 + px[2] as u32;
                        ((sum + 1) / 3) as u8
                    }
                    _ => px[ch.min(2)],
                };
                data[ch * plane + p] = f64::from(v) / 255.0;
            }
        }
        Tensor::new(vec![channels, self.height, self.width], data)
    }

    /// Nearest-neighbor resize.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut pixels = Vec::with_capacity(width * height * self.channels);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                let sx = x * self.width / width;
                let at = (sy * self.width + sx) * self.channels;
                pixels.extend_from_slice(&self.pixels[at..at + self.channels]);
            }
        }
        Self {
            width,
            height,
            channels: self.channels,
            pixels,
        }
    }
}

pub fn encode_pnm(raster: &Raster) -> Result<Vec<u8>> {
    let magic = match raster.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Format(format!("PNM cannot hold {c} channels"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend_from_slice(&raster.pixels);
    Ok(out)
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed PNM header".into()))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Raster> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::Format("not a PNM file".into()));
    }
    let (channels, binary) = match bytes[1] {
        b'2' => (1, false),
        b'3' => (3, false),
        b'5' => (1, true),
        b'6' => (3, true),
        other => return Err(Error::Format(format!("unsupported PNM variant P{}", other as char))),
    };
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number()?;
    let height = r.number()?;
    let maxval = r.number()?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PNM maxval {maxval}")));
    }
    let count = width * height * channels;
    let scale = |v: usize| -> u8 {
        if maxval == 255 {
            v as u8
        } else {
            ((v * 255 + maxval / 2) / maxval) as u8
        }
    };
    let pixels = if binary {
        // Exactly one whitespace byte separates the header from the raster.
        let start = r.pos + 1;
        let raw = bytes
            .get(start..start + count)
            .ok_or_else(|| Error::Format("truncated PNM raster".into()))?;
        raw.iter().map(|&v| scale(v as usize)).collect()
    } else {
        (0..count)
            .map(|_| r.number().map(scale))
            .collect::<Result<Vec<u8>>>()?
    };
    Ok(Raster {
        width,
        height,
        channels,
        pixels,
    })
}

pub fn encode_png(raster: &Raster) -> Result<Vec<u8>> {
    let color = match raster.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => return Err(Error::Format(format!("PNG writer cannot hold {c} channels"))),
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, raster.width as u32, raster.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(format!("png header: {e}")))?;
        writer
            .write_image_data(&raster.pixels)
            .map_err(|e| Error::Format(format!("png data: {e}")))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Raster> {
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    let channels = info.color_type.samples();
    buf.truncate(info.buffer_size());
    Ok(Raster {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        pixels: buf,
    })
}

pub fn read_image(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let is_png = bytes.starts_with(b"\x89PNG");
    let decoded = if is_png { decode_png(&bytes) } else { decode_pnm(&bytes) };
    decoded.map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_image(path: &Path, raster: &Raster, format: ImageFormat) -> Result<()> {
    let bytes = match format {
        ImageFormat::Pnm => encode_pnm(raster)?,
        ImageFormat::Png => encode_png(raster)?,
    };
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Writes a `[C,H,W]` tensor; the extension is chosen by format and channels.
pub fn write_tensor_image(path_stem: &Path, image: &Tensor, format: ImageFormat) -> Result<std::path::PathBuf> {
    let raster = Raster::from_tensor(image)?;
    let path = path_stem.with_extension(format.extension(raster.channels));
    write_image(&path, &raster, format)?;
    Ok(path)
}
