//! Raster images: float RGB storage, 8-bit quantization, PNG/PPM I/O and
//! clamped bilinear sampling.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// An RGB raster held as `f64` in `[0, 1]`, row-major, three channels per
/// pixel. Loading widens 8-bit samples by `v / 255`; saving quantizes with
/// [`quantize_channel`].
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// 8-bit quantization: scale to 0..=255 and round half up, clamping the
/// ends so out-of-range field outputs saturate instead of wrapping.
pub fn quantize_channel(v: f64) -> u8 {
    let q = (v * 255.0 + 0.5).floor();
    q.clamp(0.0, 255.0) as u8
}

impl RasterImage {
    pub fn new(width: usize, height: usize) -> Self {
        RasterImage {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    /// Builds an image by evaluating `f(x, y) -> [r, g, b]` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut img = RasterImage::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::argument(format!(
                "pixel buffer holds {} values, expected {} for {}x{} RGB",
                data.len(),
                width * height * 3,
                width,
                height
            )));
        }
        Ok(RasterImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Samples at normalized coordinates with pixel centers at
    /// `((i + 0.5) / w, (j + 0.5) / h)`, bilinearly interpolated and edge
    /// clamped, so every finite input is valid.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> [f64; 3] {
        let x = u * self.width as f64 - 0.5;
        let y = v * self.height as f64 - 0.5;
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let cx = |i: f64| (i.max(0.0) as usize).min(self.width - 1);
        let cy = |j: f64| (j.max(0.0) as usize).min(self.height - 1);
        let (x0i, x1i) = (cx(x0), cx(x0 + 1.0));
        let (y0i, y1i) = (cy(y0), cy(y0 + 1.0));
        let p00 = self.get(x0i, y0i);
        let p10 = self.get(x1i, y0i);
        let p01 = self.get(x0i, y1i);
        let p11 = self.get(x1i, y1i);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - fx) + p10[c] * fx;
            let bot = p01[c] * (1.0 - fx) + p11[c] * fx;
            out[c] = top * (1.0 - fy) + bot * fy;
        }
        out
    }

    /// The quantized 8-bit pixel stream, interleaved RGB.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_channel(v)).collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::argument(format!(
                "byte buffer holds {} values, expected {}",
                bytes.len(),
                width * height * 3
            )));
        }
        Ok(RasterImage {
            width,
            height,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }

    /// Loads PNG or binary PPM, chosen by file extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        match extension(path) {
            Ext::Png => {
                let img = image::open(path)?.into_rgb8();
                let (w, h) = (img.width() as usize, img.height() as usize);
                Self::from_bytes(w, h, img.as_raw())
            }
            Ext::Ppm => {
                let mut buf = Vec::new();
                std::fs::File::open(path)?.read_to_end(&mut buf)?;
                decode_ppm(&buf)
            }
            Ext::Other => Err(Error::argument(format!(
                "unsupported image extension in {}; use .png or .ppm",
                path.display()
            ))),
        }
    }

    /// Saves PNG or binary PPM, chosen by file extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        match extension(path) {
            Ext::Png => {
                let buf = image::RgbImage::from_raw(
                    self.width as u32,
                    self.height as u32,
                    self.to_bytes(),
                )
                .expect("buffer length matches dimensions");
                buf.save_with_format(path, image::ImageFormat::Png)?;
                Ok(())
            }
            Ext::Ppm => {
                let mut f = std::fs::File::create(path)?;
                f.write_all(&encode_ppm(self))?;
                Ok(())
            }
            Ext::Other => Err(Error::argument(format!(
                "unsupported image extension in {}; use .png or .ppm",
                path.display()
            ))),
        }
    }

    /// Mean squared error against `other` in float channel units.
    pub fn mse(&self, other: &RasterImage) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::argument(format!(
                "size mismatch: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let n = self.data.len() as f64;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(sum / n)
    }

    /// Peak signal-to-noise ratio in dB against `other`, with channel peak
    /// 1.0. Identical images give infinity.
    pub fn psnr(&self, other: &RasterImage) -> Result<f64> {
        let mse = self.mse(other)?;
        Ok(if mse == 0.0 {
            f64::INFINITY
        } else {
            -10.0 * mse.log10()
        })
    }
}

enum Ext {
    Png,
    Ppm,
    Other,
}

fn extension(path: &Path) -> Ext {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => Ext::Png,
        Some("ppm") => Ext::Ppm,
        _ => Ext::Other,
    }
}

fn encode_ppm(img: &RasterImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_bytes());
    out
}

fn decode_ppm(buf: &[u8]) -> Result<RasterImage> {
    let bad = |msg: &str| Error::argument(format!("malformed PPM: {msg}"));
    let mut pos = 0;
    // Header tokens may be separated by whitespace and '#' comments.
    let mut token = |buf: &[u8]| -> Result<String> {
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
    };
    if token(buf)? != "P6" {
        return Err(bad("not a binary P6 file"));
    }
    let width: usize = token(buf)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = token(buf)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = token(buf)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    // Exactly one whitespace byte separates the header from the samples.
    let data_start = pos + 1;
    let need = width * height * 3;
    if buf.len() < data_start + need {
        return Err(bad("pixel data truncated"));
    }
    RasterImage::from_bytes(width, height, &buf[data_start..data_start + need])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_up_and_clamps() {
        assert_eq!(quantize_channel(0.0), 0);
        assert_eq!(quantize_channel(1.0), 255);
        assert_eq!(quantize_channel(-0.2), 0);
        assert_eq!(quantize_channel(1.7), 255);
        // 0.5/255 sits exactly between 0 and 1 and rounds up.
        assert_eq!(quantize_channel(0.5 / 255.0), 1);
        assert_eq!(quantize_channel(127.49 / 255.0), 127);
        assert_eq!(quantize_channel(127.5 / 255.0), 128);
    }

    #[test]
    fn byte_roundtrip_is_exact() {
        let img = RasterImage::from_fn(5, 4, |x, y| {
            [
                (x as f64) / 4.0,
                (y as f64) / 3.0,
                ((x + y) % 2) as f64,
            ]
        });
        let bytes = img.to_bytes();
        let back = RasterImage::from_bytes(5, 4, &bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn bilinear_sampling_interpolates_and_clamps() {
        let mut img = RasterImage::new(2, 2);
        img.set(0, 0, [0.0, 0.0, 0.0]);
        img.set(1, 0, [1.0, 0.0, 0.0]);
        img.set(0, 1, [0.0, 1.0, 0.0]);
        img.set(1, 1, [1.0, 1.0, 0.0]);
        // Dead center mixes all four corners equally.
        let c = img.sample_bilinear(0.5, 0.5);
        assert!((c[0] - 0.5).abs() < 1e-12 && (c[1] - 0.5).abs() < 1e-12);
        // At a pixel center the sample is the pixel.
        let p = img.sample_bilinear(0.25, 0.25);
        assert_eq!(p, [0.0, 0.0, 0.0]);
        // Far outside the domain the nearest edge pixel wins.
        let e = img.sample_bilinear(5.0, -3.0);
        assert_eq!(e, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn ppm_roundtrip_preserves_bytes() {
        let img = RasterImage::from_fn(7, 3, |x, y| {
            [(x * 37 % 256) as f64 / 255.0, (y * 91 % 256) as f64 / 255.0, 0.25]
        });
        let encoded = encode_ppm(&img);
        let back = decode_ppm(&encoded).unwrap();
        assert_eq!(back.width(), 7);
        assert_eq!(back.height(), 3);
        assert_eq!(back.to_bytes(), img.to_bytes());
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let mut buf = b"P6 # format\n# a comment line\n3 2\n255\n".to_vec();
        buf.extend(std::iter::repeat_n(7u8, 18));
        let img = decode_ppm(&buf).unwrap();
        assert_eq!(img.width(), 3);
        assert_eq!(img.height(), 2);
        assert!((img.get(2, 1)[2] - 7.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn png_roundtrip_via_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = RasterImage::from_fn(9, 6, |x, y| {
            [
                (x as f64 + 0.5) / 9.0,
                (y as f64 + 0.5) / 6.0,
                ((x * y) % 5) as f64 / 4.0,
            ]
        });
        img.save(&path).unwrap();
        let back = RasterImage::load(&path).unwrap();
        assert_eq!(back.to_bytes(), img.to_bytes());
    }

    #[test]
    fn psnr_matches_hand_computation() {
        let a = RasterImage::from_fn(4, 4, |_, _| [0.5, 0.5, 0.5]);
        let mut b = a.clone();
        b.set(0, 0, [0.6, 0.5, 0.5]);
        // MSE = 0.01 / 48.
        let want = -10.0 * (0.01f64 / 48.0).log10();
        assert!((a.psnr(&b).unwrap() - want).abs() < 1e-9);
        assert!(a.psnr(&a).unwrap().is_infinite());
    }
}
