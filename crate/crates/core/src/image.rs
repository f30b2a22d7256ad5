//! Image containers, YCrCb conversion, 2-D Fourier utilities, and PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::grad::{Float, Tensor};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Luma weights (full-range BT.601).
pub const KR: f64 = 0.299;
pub const KG: f64 = 0.587;
pub const KB: f64 = 0.114;
/// Chroma gains on `R - Y` and `B - Y`.
pub const CR_GAIN: f64 = 0.713;
pub const CB_GAIN: f64 = 0.564;
/// Neutral chroma on the `[0, 1]` scale.
pub const CHROMA_OFFSET: f64 = 0.5;

/// Imaginary parts above this after an inverse transform are a numeric failure.
pub const IMAG_FAIL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ColorSpace {
    Rgb,
    YCrCb,
}

/// `H x W x 3` raster, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    colorspace: ColorSpace,
    data: Vec<f32>,
}

/// `(Y, Cr, Cb)` of an RGB triple, before clamping.
pub fn rgb_to_ycrcb_px([r, g, b]: [f64; 3]) -> [f64; 3] {
    let y = KR * r + KG * g + KB * b;
    [y, CHROMA_OFFSET + CR_GAIN * (r - y), CHROMA_OFFSET + CB_GAIN * (b - y)]
}

/// `(R, G, B)` of a YCrCb triple, before clamping.
pub fn ycrcb_to_rgb_px([y, cr, cb]: [f64; 3]) -> [f64; 3] {
    let r = y + (cr - CHROMA_OFFSET) / CR_GAIN;
    let b = y + (cb - CHROMA_OFFSET) / CB_GAIN;
    let g = (y - KR * r - KB * b) / KG;
    [r, g, b]
}

impl Image {
    pub fn new(height: usize, width: usize, colorspace: ColorSpace, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            colorspace,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: [f32; 3]) -> Self {
        Self::from_fn(height, width, |_, _| value)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self {
            height,
            width,
            colorspace: ColorSpace::Rgb,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn colorspace(&self) -> ColorSpace {
        self.colorspace
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, v: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&v);
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn clamped(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn convert(&self, from: ColorSpace, to: ColorSpace, f: fn([f64; 3]) -> [f64; 3]) -> Result<Image> {
        if self.colorspace != from {
            return Err(Error::ColorSpace {
                expected: from,
                got: self.colorspace,
            });
        }
        let mut data = Vec::with_capacity(self.data.len());
        for px in self.data.chunks_exact(3) {
            let out = f([px[0] as f64, px[1] as f64, px[2] as f64]);
            data.extend(out.iter().map(|v| v.clamp(0.0, 1.0) as f32));
        }
        Ok(Image {
            data,
            colorspace: to,
            ..*self
        })
    }

    pub fn to_ycrcb(&self) -> Result<Image> {
        self.convert(ColorSpace::Rgb, ColorSpace::YCrCb, rgb_to_ycrcb_px)
    }

    pub fn to_rgb(&self) -> Result<Image> {
        self.convert(ColorSpace::YCrCb, ColorSpace::Rgb, ycrcb_to_rgb_px)
    }

    /// BT.601 luma plane in `f64`; YCrCb images return their first channel.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| match self.colorspace {
                ColorSpace::Rgb => KR * p[0] as f64 + KG * p[1] as f64 + KB * p[2] as f64,
                ColorSpace::YCrCb => p[0] as f64,
            })
            .collect()
    }

    /// Window `[y, y + h) x [x, x + w)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Image> {
        if y + h > self.height || x + w > self.width || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({y},{x}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(Image {
            height: h,
            width: w,
            colorspace: self.colorspace,
            data,
        })
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(y, x, self.pixel(y, self.width - 1 - x));
            }
        }
        out
    }

    /// Pad bottom and right by mirroring (edge pixel not repeated) up to at
    /// least `h x w`.
    pub fn reflect_pad(&self, h: usize, w: usize) -> Image {
        let (oh, ow) = (h.max(self.height), w.max(self.width));
        let reflect = |i: usize, n: usize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let m = i % period;
            if m < n {
                m
            } else {
                period - m
            }
        };
        let mut out = Image {
            height: oh,
            width: ow,
            colorspace: self.colorspace,
            data: vec![0.0; oh * ow * 3],
        };
        for y in 0..oh {
            for x in 0..ow {
                out.set_pixel(y, x, self.pixel(reflect(y, self.height), reflect(x, self.width)));
            }
        }
        out
    }
}

/// Stack images into an `N x 3 x H x W` tensor.
pub fn to_tensor<T: Float>(images: &[Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut out = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if !img.same_dims(first) {
            return Err(Error::Shape(format!(
                "batch mixes {}x{} and {}x{}",
                h, w, img.height, img.width
            )));
        }
        for c in 0..3 {
            out.extend(img.data[c..].iter().step_by(3).map(|&v| T::lit(v as f64)));
        }
    }
    Ok(Tensor::from_vec(vec![images.len(), 3, h, w], out))
}

/// Split an `N x 3 x H x W` tensor into RGB images (no clamping).
pub fn from_tensor<T: Float>(t: &Tensor<T>) -> Result<Vec<Image>> {
    if t.rank() != 4 || t.shape()[1] != 3 {
        return Err(Error::Shape(format!("expected N x 3 x H x W, got {:?}", t.shape())));
    }
    let (n, _, h, w) = t.dims4();
    let src = t.data();
    Ok((0..n)
        .map(|b| {
            let mut data = vec![0.0f32; h * w * 3];
            for c in 0..3 {
                let plane = &src[(b * 3 + c) * h * w..][..h * w];
                for (i, v) in plane.iter().enumerate() {
                    data[i * 3 + c] = v.as_f64() as f32;
                }
            }
            Image {
                height: h,
                width: w,
                colorspace: ColorSpace::Rgb,
                data,
            }
        })
        .collect())
}

/// Per-channel amplitude and phase of the unnormalized 2-D DFT, `H x W x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub height: usize,
    pub width: usize,
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
}

fn fft2(planes: &mut [Vec<Complex64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    let mut column = vec![Complex64::default(); h];
    for plane in planes.iter_mut() {
        for r in plane.chunks_exact_mut(w) {
            row.process(r);
        }
        for x in 0..w {
            for y in 0..h {
                column[y] = plane[y * w + x];
            }
            col.process(&mut column);
            for y in 0..h {
                plane[y * w + x] = column[y];
            }
        }
    }
}

/// Forward 2-D DFT of each channel. Phase is `atan2(im, re)`.
pub fn fft_decompose(img: &Image) -> Result<Spectrum> {
    if !img.all_finite() {
        return Err(Error::Numeric("non-finite pixel in fft_decompose".into()));
    }
    let (h, w) = (img.height, img.width);
    let mut planes: Vec<Vec<Complex64>> = (0..3)
        .map(|c| {
            img.data[c..]
                .iter()
                .step_by(3)
                .map(|&v| Complex64::new(v as f64, 0.0))
                .collect()
        })
        .collect();
    fft2(&mut planes, h, w, false);
    let mut amplitude = vec![0.0; h * w * 3];
    let mut phase = vec![0.0; h * w * 3];
    for (c, plane) in planes.iter().enumerate() {
        for (i, z) in plane.iter().enumerate() {
            amplitude[i * 3 + c] = z.norm();
            phase[i * 3 + c] = z.im.atan2(z.re);
        }
    }
    Ok(Spectrum {
        height: h,
        width: w,
        amplitude,
        phase,
    })
}

/// Inverse DFT (scaled by `1/HW`) of `amplitude * exp(j phase)`. The output is
/// not clamped.
pub fn fft_reconstruct(spec: &Spectrum) -> Result<Image> {
    let (h, w) = (spec.height, spec.width);
    let n = h * w * 3;
    if spec.amplitude.len() != n || spec.phase.len() != n {
        return Err(Error::Shape("spectrum planes do not match its dimensions".into()));
    }
    if spec.amplitude.iter().any(|a| *a < 0.0 || !a.is_finite()) || spec.phase.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric("spectrum has negative or non-finite entries".into()));
    }
    let mut planes: Vec<Vec<Complex64>> = (0..3)
        .map(|c| {
            (0..h * w)
                .map(|i| Complex64::from_polar(spec.amplitude[i * 3 + c], spec.phase[i * 3 + c]))
                .collect()
        })
        .collect();
    fft2(&mut planes, h, w, true);
    let scale = 1.0 / (h * w) as f64;
    let mut data = vec![0.0f32; n];
    let mut worst: f64 = 0.0;
    for (c, plane) in planes.iter().enumerate() {
        for (i, z) in plane.iter().enumerate() {
            worst = worst.max((z.im * scale).abs());
            data[i * 3 + c] = (z.re * scale) as f32;
        }
    }
    if worst > IMAG_FAIL {
        return Err(Error::Numeric(format!(
            "inverse DFT left imaginary residue {worst:.3e}"
        )));
    }
    Image::new(h, w, ColorSpace::Rgb, data)
}

/// Read an 8- or 16-bit RGB PNG into `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::data(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::data(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::data(path, e.to_string()))?;
    if info.color_type != png::ColorType::Rgb {
        return Err(Error::data(
            path,
            format!("unsupported color type {:?}; only RGB is accepted", info.color_type),
        ));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let data: Vec<f32> = match info.bit_depth {
        png::BitDepth::Eight => buf[..h * w * 3].iter().map(|&b| b as f32 / 255.0).collect(),
        png::BitDepth::Sixteen => buf[..h * w * 6]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 65535.0)
            .collect(),
        d => return Err(Error::data(path, format!("unsupported bit depth {d:?}"))),
    };
    Image::new(h, w, ColorSpace::Rgb, data)
}

/// 8-bit quantization: `floor(255 v + 0.5)` after clamping to `[0, 1]`.
pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8
}

/// Write an RGB image as an 8-bit PNG.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if img.colorspace != ColorSpace::Rgb {
        return Err(Error::ColorSpace {
            expected: ColorSpace::Rgb,
            got: img.colorspace,
        });
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize_u8(v)).collect();
    let mut writer = enc.write_header().map_err(|e| Error::data(path, e.to_string()))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::data(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::data(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_and_flip_index_the_right_pixels() {
        let img = Image::from_fn(3, 4, |y, x| [y as f32, x as f32, 0.0]);
        let c = img.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.pixel(0, 0), [1.0, 2.0, 0.0]);
        assert_eq!(img.flip_horizontal().pixel(2, 0), [2.0, 3.0, 0.0]);
        assert!(img.crop(2, 0, 2, 1).is_err());
    }

    #[test]
    fn reflect_pad_mirrors_without_repeating_the_edge() {
        let img = Image::from_fn(1, 3, |_, x| [x as f32; 3]);
        let p = img.reflect_pad(2, 6);
        let row: Vec<f32> = (0..6).map(|x| p.pixel(0, x)[0]).collect();
        assert_eq!(row, vec![0.0, 1.0, 2.0, 1.0, 0.0, 1.0]);
        assert_eq!(p.pixel(1, 4), p.pixel(0, 4));
    }

    #[test]
    fn tensor_round_trip() {
        let img = Image::from_fn(2, 3, |y, x| [y as f32, x as f32, 0.5]);
        let t = to_tensor::<f32>(&[img.clone(), img.clone()]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2, 3]);
        assert_eq!(t.data()[6..12], [0.0, 1.0, 2.0, 0.0, 1.0, 2.0]);
        assert_eq!(from_tensor(&t).unwrap()[1], img);
    }
}
