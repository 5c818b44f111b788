//! 8-bit RGB images, PPM (P6) I/O, and tensor conversion.
//!
//! PNG support is compiled in with the `png` feature.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    /// Interleaved RGB, row-major.
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Image(format!("empty image {width}×{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Image(format!(
                "{} bytes for a {width}×{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(x, y, c));
                }
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * 3 + c]
    }

    /// `1×3×H×W` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn(&[1, 3, h, w], |i| {
            let c = i / (h * w);
            let p = i % (h * w);
            self.data[p * 3 + c] as f64 / 255.0
        })
    }

    /// Inverse of [`Image::to_tensor`] for a `1×3×H×W` tensor; values are
    /// clamped to `[0, 1]` and rounded to the nearest level.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 || c != 3 {
            return Err(Error::Image(format!("expected 1×3×H×W, got {:?}", t.shape())));
        }
        let plane = h * w;
        let mut data = vec![0u8; plane * 3];
        for ch in 0..3 {
            for p in 0..plane {
                let v = t.data()[ch * plane + p];
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                data[p * 3 + ch] = (v * 255.0).round() as u8;
            }
        }
        Self::new(w, h, data)
    }

    /// Binary PPM with maxval 255.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // Skip whitespace and comments between header tokens.
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Image("truncated PPM header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
        }
        if fields[0] != "P6" {
            return Err(Error::Image(format!("unsupported PPM magic `{}` (only P6)", fields[0])));
        }
        let num = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Image(format!("bad PPM header field `{s}`")))
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Image(format!("unsupported PPM maxval {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::Image("truncated PPM header".into()));
        }
        pos += 1;
        let need = width
            .checked_mul(height)
            .and_then(|p| p.checked_mul(3))
            .ok_or_else(|| Error::Image("PPM dimensions overflow".into()))?;
        let raster = &bytes[pos..];
        if raster.len() < need {
            return Err(Error::Image(format!("PPM raster has {} of {need} bytes", raster.len())));
        }
        Self::new(width, height, raster[..need].to_vec())
    }

    /// Reads a PPM file, or a PNG file when built with the `png` feature.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(b"P6") {
            return Self::from_ppm(&bytes);
        }
        #[cfg(feature = "png")]
        if bytes.starts_with(b"\x89PNG") {
            let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
                .map_err(|e| Error::Image(e.to_string()))?
                .to_rgb8();
            let (w, h) = img.dimensions();
            return Self::new(w as usize, h as usize, img.into_raw());
        }
        Err(Error::Image(format!("{}: not a P6 PPM file", path.display())))
    }

    /// Writes PPM, or PNG for a `.png` path when built with the `png` feature.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            #[cfg(feature = "png")]
            {
                let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
                    .expect("dimensions checked at construction");
                return buf
                    .save_with_format(path, image::ImageFormat::Png)
                    .map_err(|e| Error::Image(e.to_string()));
            }
            #[cfg(not(feature = "png"))]
            return Err(Error::Image("PNG output requires the `png` feature".into()));
        }
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

/// Mirror index for reflect padding; repeats the reflection for pads wider
/// than the signal.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Reflect-pads the bottom and right of an `N,C,H,W` tensor up to the next
/// multiples of `multiple`.
pub fn pad_to_multiple(t: &Tensor, multiple: usize) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if (ph, pw) == (h, w) {
        return Ok(t.clone());
    }
    let src = t.data();
    Ok(Tensor::from_fn(&[n, c, ph, pw], |i| {
        let x = i % pw;
        let y = (i / pw) % ph;
        let nc = i / (pw * ph);
        let (sy, sx) = (reflect(y as isize, h), reflect(x as isize, w));
        src[(nc * h + sy) * w + sx]
    }))
}

/// Top-left `height×width` window of an `N,C,H,W` tensor.
pub fn crop(t: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    if height > h || width > w {
        return Err(Error::shape("crop", format!("{height}×{width} from {h}×{w}")));
    }
    let src = t.data();
    Ok(Tensor::from_fn(&[n, c, height, width], |i| {
        let x = i % width;
        let y = (i / width) % height;
        let nc = i / (width * height);
        src[(nc * h + y) * w + x]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y, c| ((x * 7 + y * 13 + c * 50) % 256) as u8)
    }

    #[test]
    fn ppm_roundtrip() {
        let img = gradient(5, 3);
        assert_eq!(Image::from_ppm(&img.to_ppm()).unwrap(), img);
    }

    #[test]
    fn ppm_header_with_comments() {
        let mut bytes = b"P6 # made by hand\n2 1\n# max\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = Image::from_ppm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(img.pixel(1, 0, 2), 6);
    }

    #[test]
    fn ppm_rejects_bad_input() {
        assert!(Image::from_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(Image::from_ppm(b"P6\n2 2\n255\n\x00\x00").is_err());
        assert!(Image::from_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
        assert!(Image::from_ppm(b"").is_err());
        assert!(Image::from_ppm(b"P6\n99999999999 99999999999\n255\n").is_err());
    }

    #[test]
    fn tensor_roundtrip() {
        let img = gradient(6, 4);
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[1, 3, 4, 6]);
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn reflect_padding_mirrors_without_repeating_the_edge() {
        let t = Tensor::from_fn(&[1, 1, 1, 3], |i| i as f64);
        let p = pad_to_multiple(&t, 8).unwrap();
        assert_eq!(p.shape(), &[1, 1, 8, 8]);
        assert_eq!(&p.data()[..8], &[0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0, 1.0]);
        assert_eq!(crop(&p, 1, 3).unwrap(), t);
    }

    #[test]
    fn padding_is_noop_on_multiples() {
        let t = Tensor::from_fn(&[1, 3, 16, 32], |i| i as f64);
        assert_eq!(pad_to_multiple(&t, 16).unwrap(), t);
    }
}
