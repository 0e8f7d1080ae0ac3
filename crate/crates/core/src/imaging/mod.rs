//! RGB images in `[0, 1]`, PNG/PPM I/O, resampling and SSIM.

pub mod artwork;
mod ssim;

use std::fs;
use std::io::Cursor;
use std::path::Path;

pub use ssim::{ssim, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};

use crate::error::{Error, Result};
use crate::tensorgrad::Tensor;

/// Height × width × 3 image with interleaved channels and values in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct ImageRGB {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl std::fmt::Debug for ImageRGB {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageRGB({}x{})", self.height, self.width)
    }
}

impl ImageRGB {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::InvalidArgument(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    /// Builds an image from a per-pixel function of `(row, col)`; values are
    /// clamped into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x).map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    /// Channel-first `3 × H × W` tensor.
    pub fn to_chw(&self) -> Tensor {
        let plane = self.height * self.width;
        let mut out = vec![0.0; 3 * plane];
        for (p, px) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c];
            }
        }
        Tensor::new(vec![3, self.height, self.width], out).expect("shape matches")
    }

    /// Inverse of [`to_chw`](Self::to_chw); values are clamped into `[0, 1]`.
    pub fn from_chw(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::InvalidArgument(format!(
                "expected a 3×H×W tensor, got {s:?}"
            )));
        }
        let (h, w) = (s[1], s[2]);
        let plane = h * w;
        let src = t.data();
        let mut data = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for c in 0..3 {
                data.push(src[c * plane + p].clamp(0.0, 1.0));
            }
        }
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    /// Values quantized to 8 bits, `round(v · 255)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    /// Separable resampling: area averaging when shrinking an axis, bilinear
    /// interpolation when enlarging it. Equal sizes copy exactly.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let wy = resample_weights(self.height, height);
        let wx = resample_weights(self.width, width);
        // Rows first.
        let mut tmp = vec![0.0; height * self.width * 3];
        for (y, taps) in wy.iter().enumerate() {
            for &(sy, w) in taps {
                let src = &self.data[sy * self.width * 3..(sy + 1) * self.width * 3];
                let dst = &mut tmp[y * self.width * 3..(y + 1) * self.width * 3];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
            }
        }
        let mut data = vec![0.0; height * width * 3];
        for y in 0..height {
            for (x, taps) in wx.iter().enumerate() {
                for &(sx, w) in taps {
                    for c in 0..3 {
                        data[(y * width + x) * 3 + c] += w * tmp[(y * self.width + sx) * 3 + c];
                    }
                }
            }
        }
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Self {
            height,
            width,
            data,
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.pixel(y, self.width - 1 - x))
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 1-D resampling taps `(source index, weight)` per destination index.
fn resample_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            if ratio > 1.0 {
                let (lo, hi) = (d as f64 * ratio, (d + 1) as f64 * ratio);
                let mut taps = Vec::new();
                let mut i = lo.floor() as usize;
                while (i as f64) < hi && i < src {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((i, overlap / ratio));
                    }
                    i += 1;
                }
                taps
            } else {
                let s = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let a = s - i0 as f64;
                if a == 0.0 || i0 + 1 >= src {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - a), (i0 + 1, a)]
                }
            }
        })
        .collect()
}

/// Reads an 8-bit RGB PNG or a binary PPM (P6, maxval 255).
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRGB> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|detected| Error::ImageFormat {
        path: path.to_path_buf(),
        detected,
    })
}

/// Decodes PNG or PPM bytes; the error describes the detected format.
pub fn decode_image(bytes: &[u8]) -> std::result::Result<ImageRGB, String> {
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else {
        let head: Vec<String> = bytes.iter().take(4).map(|b| format!("{b:02x}")).collect();
        Err(format!("unknown format, leading bytes {}", head.join(" ")))
    }
}

fn decode_png(bytes: &[u8]) -> std::result::Result<ImageRGB, String> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| format!("PNG, undecodable: {e}"))?;
    let info = reader.info();
    let (color, depth) = (info.color_type, info.bit_depth);
    if color != png::ColorType::Rgb || depth != png::BitDepth::Eight {
        let alpha = matches!(color, png::ColorType::Rgba | png::ColorType::GrayscaleAlpha);
        return Err(format!(
            "PNG {color:?} {depth:?}{}; expected 8-bit RGB",
            if alpha { " with alpha channel" } else { "" }
        ));
    }
    let mut buf = vec![0; reader.output_buffer_size().ok_or("PNG, image too large")?];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| format!("PNG, undecodable: {e}"))?;
    buf.truncate(frame.buffer_size());
    ImageRGB::from_bytes(frame.height as usize, frame.width as usize, &buf).map_err(|e| e.to_string())
}

fn decode_ppm(bytes: &[u8]) -> std::result::Result<ImageRGB, String> {
    // Header: "P6" width height maxval, separated by whitespace, with
    // optional '#' comments, then a single whitespace byte.
    let mut fields = Vec::new();
    let mut i = 2;
    while fields.len() < 3 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if start == i {
            return Err("PPM P6, malformed header".into());
        }
        let v: usize = std::str::from_utf8(&bytes[start..i])
            .unwrap()
            .parse()
            .map_err(|_| "PPM P6, malformed header")?;
        fields.push(v);
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(format!("PPM P6 with maxval {maxval}; expected 255"));
    }
    let body = bytes.get(i + 1..).ok_or("PPM P6, truncated")?;
    if body.len() < w * h * 3 {
        return Err("PPM P6, truncated pixel data".into());
    }
    ImageRGB::from_bytes(h, w, &body[..w * h * 3]).map_err(|e| e.to_string())
}

/// Writes an 8-bit RGB PNG with `byte = round(v · 255)`.
pub fn save_image(img: &ImageRGB, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(img);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_png(img: &ImageRGB) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("in-memory PNG header");
        writer
            .write_image_data(&img.to_bytes())
            .expect("in-memory PNG data");
    }
    out
}

/// Binary PPM (P6) encoding.
pub fn encode_ppm(img: &ImageRGB) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_bytes());
    out
}
