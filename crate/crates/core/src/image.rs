//! Image buffers, IO, color conversion, resampling, and quality metrics.
//!
//! Intensities are kept as `f64` in `[0, 1]` for the whole pipeline; 8-bit
//! quantization happens only when writing PNGs. Resampling is bilinear with
//! pixel-center alignment, except that exact integer downscales use block
//! averaging so that repeated 2x halving and a direct power-of-two downscale
//! agree.

use std::path::Path;

use crate::error::{Error, Result};

/// H x W x C grid of intensities in `[0, 1]`, row-major with interleaved
/// channels. C is 1 or 3.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Single-channel H x W grid of unconstrained reals (transmission maps,
/// dark channels, depth maps).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be nonzero"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "image data length",
                data.len(),
                height * width * channels,
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Constant-valued image.
    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
            .expect("filled image shape is valid by construction")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        self.data[(row * self.width + col) * self.channels + ch] = value;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// One channel as a scalar map.
    pub fn channel_plane(&self, ch: usize) -> ScalarMap {
        let mut data = Vec::with_capacity(self.height * self.width);
        for px in 0..self.height * self.width {
            data.push(self.data[px * self.channels + ch]);
        }
        ScalarMap {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// BT.601 luminance plane. For single-channel images this is the channel
    /// itself.
    pub fn luminance(&self) -> ScalarMap {
        if self.channels == 1 {
            return ScalarMap {
                height: self.height,
                width: self.width,
                data: self.data.clone(),
            };
        }
        let mut data = Vec::with_capacity(self.height * self.width);
        for px in 0..self.height * self.width {
            let r = self.data[px * 3];
            let g = self.data[px * 3 + 1];
            let b = self.data[px * 3 + 2];
            data.push(luma_bt601(r, g, b));
        }
        ScalarMap {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

impl ScalarMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("scalar map length", data.len(), height * width));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }
}

/// BT.601 luminance, written so that gray inputs reproduce the input value
/// bit-exactly.
#[inline]
pub fn luma_bt601(r: f64, g: f64, b: f64) -> f64 {
    g + 0.299 * (r - g) + 0.114 * (b - g)
}

/// Reads a PNG or JPEG into a 3-channel buffer with intensities `v / 255`.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let img = image::open(path).map_err(|source| Error::Codec {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Degenerate(format!(
            "zero-dimension image at {}",
            path.display()
        )));
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for px in rgb.pixels() {
        data.push(px.0[0] as f64 / 255.0);
        data.push(px.0[1] as f64 / 255.0);
        data.push(px.0[2] as f64 / 255.0);
    }
    ImageBuffer::new(h, w, 3, data)
}

/// Writes a buffer as PNG, clamping to `[0, 1]` and quantizing with
/// round-half-up.
pub fn save_image(img: &ImageBuffer, path: &Path) -> Result<()> {
    let quantize = |v: f64| -> u8 { (v.clamp(0.0, 1.0) * 255.0).round() as u8 };
    let w = img.width as u32;
    let h = img.height as u32;
    let save_err = |source: image::ImageError| Error::Codec {
        path: path.to_path_buf(),
        source,
    };
    // PNG is the only write format, whatever the extension says
    match img.channels {
        3 => {
            let mut out = image::RgbImage::new(w, h);
            for (i, px) in out.pixels_mut().enumerate() {
                px.0 = [
                    quantize(img.data[i * 3]),
                    quantize(img.data[i * 3 + 1]),
                    quantize(img.data[i * 3 + 2]),
                ];
            }
            out.save_with_format(path, image::ImageFormat::Png).map_err(save_err)
        }
        _ => {
            let mut out = image::GrayImage::new(w, h);
            for (i, px) in out.pixels_mut().enumerate() {
                px.0 = [quantize(img.data[i])];
            }
            out.save_with_format(path, image::ImageFormat::Png).map_err(save_err)
        }
    }
}

/// Linear interpolation in the `a + t*(b - a)` form, which maps equal
/// endpoints to exactly that value.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Mean of a block anchored at its first element; exact for constant blocks.
#[inline]
fn anchored_block_mean(plane: &[f64], width: usize, r0: usize, c0: usize, fh: usize, fw: usize) -> f64 {
    let anchor = plane[r0 * width + c0];
    let mut acc = 0.0;
    for r in r0..r0 + fh {
        for c in c0..c0 + fw {
            acc += plane[r * width + c] - anchor;
        }
    }
    anchor + acc / (fh * fw) as f64
}

/// Resamples one plane. Integer downscales in both axes use block averaging;
/// everything else is bilinear with pixel-center alignment and edge clamping.
/// Values are not clamped, so the same routine serves feature tensors.
pub(crate) fn resize_plane(
    src: &[f64],
    h: usize,
    w: usize,
    new_h: usize,
    new_w: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(new_h * new_w);
    let integer_down = new_h <= h && new_w <= w && h.is_multiple_of(new_h) && w.is_multiple_of(new_w);
    if integer_down {
        let fh = h / new_h;
        let fw = w / new_w;
        for r in 0..new_h {
            for c in 0..new_w {
                out.push(anchored_block_mean(src, w, r * fh, c * fw, fh, fw));
            }
        }
        return out;
    }
    let sy = h as f64 / new_h as f64;
    let sx = w as f64 / new_w as f64;
    for r in 0..new_h {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for c in 0..new_w {
            let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = lerp(src[y0 * w + x0], src[y0 * w + x1], tx);
            let bot = lerp(src[y1 * w + x0], src[y1 * w + x1], tx);
            out.push(lerp(top, bot, ty));
        }
    }
    out
}

/// Resizes an image, clamping the result into `[0, 1]`.
pub fn resize(img: &ImageBuffer, new_h: usize, new_w: usize) -> Result<ImageBuffer> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::invalid("resize target dimensions must be nonzero"));
    }
    let mut data = vec![0.0; new_h * new_w * img.channels];
    for ch in 0..img.channels {
        let plane: Vec<f64> = (0..img.height * img.width)
            .map(|px| img.data[px * img.channels + ch])
            .collect();
        let resized = resize_plane(&plane, img.height, img.width, new_h, new_w);
        for (px, v) in resized.into_iter().enumerate() {
            data[px * img.channels + ch] = v.clamp(0.0, 1.0);
        }
    }
    ImageBuffer::new(new_h, new_w, img.channels, data)
}

pub fn resize_map(map: &ScalarMap, new_h: usize, new_w: usize) -> Result<ScalarMap> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::invalid("resize target dimensions must be nonzero"));
    }
    let data = resize_plane(&map.data, map.height, map.width, new_h, new_w);
    ScalarMap::new(new_h, new_w, data)
}

/// BT.601 RGB -> YUV with chroma offset to `[0, 1]`. Gray pixels map to
/// chroma exactly 0.5 because the chroma terms are built from channel
/// differences.
pub fn rgb_to_yuv(img: &ImageBuffer) -> Result<ImageBuffer> {
    if img.channels != 3 {
        return Err(Error::shape("rgb_to_yuv channels", img.channels, 3));
    }
    let mut data = Vec::with_capacity(img.data.len());
    for px in 0..img.height * img.width {
        let r = img.data[px * 3];
        let g = img.data[px * 3 + 1];
        let b = img.data[px * 3 + 2];
        let y = luma_bt601(r, g, b);
        // b - y = 0.299(b-r) + 0.587(b-g); r - y = 0.587(r-g) + 0.114(r-b)
        let u = 0.564 * (0.299 * (b - r) + 0.587 * (b - g)) + 0.5;
        let v = 0.713 * (0.587 * (r - g) + 0.114 * (r - b)) + 0.5;
        data.push(y.clamp(0.0, 1.0));
        data.push(u.clamp(0.0, 1.0));
        data.push(v.clamp(0.0, 1.0));
    }
    ImageBuffer::new(img.height, img.width, 3, data)
}

/// Peak signal-to-noise ratio with peak 1. Zero MSE returns the 99.0
/// sentinel instead of infinity.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape(
            "psnr image shapes",
            format!("{}x{}x{}", b.height, b.width, b.channels),
            format!("{}x{}x{}", a.height, a.width, a.channels),
        ));
    }
    let mut acc = 0.0;
    for (x, y) in a.data.iter().zip(&b.data) {
        let d = x - y;
        acc += d * d;
    }
    let mse = acc / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(99.0);
    }
    Ok(-10.0 * mse.log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel_11() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid-window separable Gaussian filter; output is (h-10) x (w-10).
fn gaussian_valid(plane: &[f64], h: usize, w: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    // horizontal pass
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * plane[r * w + c + k];
            }
            tmp[r * ow + c] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[(r + k) * ow + c];
            }
            out[r * ow + c] = acc;
        }
    }
    out
}

/// Mean structural similarity over an 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, dynamic range 1. Three-channel inputs are compared
/// on luminance.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape(
            "ssim image shapes",
            format!("{}x{}x{}", b.height, b.width, b.channels),
            format!("{}x{}x{}", a.height, a.width, a.channels),
        ));
    }
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim requires min dimension >= {SSIM_WINDOW}, got {}x{}",
            a.height, a.width
        )));
    }
    let x = a.luminance();
    let y = b.luminance();
    let (h, w) = (a.height, a.width);
    let kernel = gaussian_kernel_11();

    let xx: Vec<f64> = x.data.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.data.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.data.iter().zip(&y.data).map(|(u, v)| u * v).collect();

    let mu_x = gaussian_valid(&x.data, h, w, &kernel);
    let mu_y = gaussian_valid(&y.data, h, w, &kernel);
    let m_xx = gaussian_valid(&xx, h, w, &kernel);
    let m_yy = gaussian_valid(&yy, h, w, &kernel);
    let m_xy = gaussian_valid(&xy, h, w, &kernel);

    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut acc = 0.0;
    for i in 0..mu_x.len() {
        let var_x = m_xx[i] - mu_x[i] * mu_x[i];
        let var_y = m_yy[i] - mu_y[i] * mu_y[i];
        let cov = m_xy[i] - mu_x[i] * mu_y[i];
        let num = (2.0 * mu_x[i] * mu_y[i] + c1) * (2.0 * cov + c2);
        let den = (mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + c1) * (var_x + var_y + c2);
        acc += num / den;
    }
    Ok(acc / mu_x.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ramp_image(h: usize, w: usize) -> ImageBuffer {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push((r * w + c) as f64 / (h * w) as f64);
            }
        }
        ImageBuffer::new(h, w, 1, data).unwrap()
    }

    fn seeded_random_image(seed: u64, h: usize, w: usize, channels: usize) -> ImageBuffer {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * channels).map(|_| rng.gen::<f64>()).collect();
        ImageBuffer::new(h, w, channels, data).unwrap()
    }

    /// Independent bilinear oracle: direct per-pixel weight evaluation with
    /// sum-of-products, no lerp form.
    fn bilinear_oracle(src: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for r in 0..nh {
            for c in 0..nw {
                let fy = ((r as f64 + 0.5) * h as f64 / nh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                let fx = ((c as f64 + 0.5) * w as f64 / nw as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let y0 = fy.floor() as usize;
                let x0 = fx.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let ty = fy - y0 as f64;
                let tx = fx - x0 as f64;
                out.push(
                    src[y0 * w + x0] * (1.0 - ty) * (1.0 - tx)
                        + src[y0 * w + x1] * (1.0 - ty) * tx
                        + src[y1 * w + x0] * ty * (1.0 - tx)
                        + src[y1 * w + x1] * ty * tx,
                );
            }
        }
        out
    }

    #[test]
    fn save_load_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.png");
        // 8-bit-origin data: quantized grid
        let img = {
            let mut img = seeded_random_image(7, 9, 13, 3);
            for v in img.data_mut() {
                *v = (*v * 255.0).round() / 255.0;
            }
            img
        };
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        save_image(&back, &path).unwrap();
        let again = load_image(&path).unwrap();
        assert_eq!(back.data(), again.data());
        // and the quantized originals survive with exact byte values
        for (a, b) in img.data().iter().zip(back.data()) {
            assert_eq!((a * 255.0).round() as u8, (b * 255.0).round() as u8);
        }
    }

    #[test]
    fn load_maps_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let white = dir.path().join("white.png");
        image::RgbImage::from_pixel(2, 2, image::Rgb([255, 255, 255]))
            .save(&white)
            .unwrap();
        let img = load_image(&white).unwrap();
        assert!(img.data().iter().all(|&v| v == 1.0));

        let gray = dir.path().join("gray.png");
        image::RgbImage::from_pixel(1, 1, image::Rgb([128, 128, 128]))
            .save(&gray)
            .unwrap();
        let img = load_image(&gray).unwrap();
        for &v in img.data() {
            assert_abs_diff_eq!(v, 128.0 / 255.0, epsilon = 1e-15);
            assert_abs_diff_eq!(v, 0.50196, epsilon = 1e-4);
        }
    }

    #[test]
    fn jpeg_files_are_readable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("photo.jpg");
        image::RgbImage::from_pixel(6, 4, image::Rgb([200, 100, 50]))
            .save(&path)
            .unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (4, 6, 3));
        // lossy codec: just require the ballpark
        assert_abs_diff_eq!(img.get(0, 0, 0), 200.0 / 255.0, epsilon = 0.05);
    }

    #[test]
    fn save_quantization_clamps_and_rounds_half_up() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.png");
        let img = ImageBuffer::new(1, 2, 1, vec![1.2, 0.5]).unwrap();
        save_image(&img, &path).unwrap();
        let raw = image::open(&path).unwrap().to_luma8();
        assert_eq!(raw.get_pixel(0, 0).0[0], 255);
        assert_eq!(raw.get_pixel(1, 0).0[0], 128);
    }

    #[test]
    fn resize_matches_bilinear_oracle_on_upscale() {
        let img = seeded_random_image(3, 6, 5, 1);
        let up = resize(&img, 11, 9).unwrap();
        let oracle = bilinear_oracle(img.data(), 6, 5, 11, 9);
        for (a, b) in up.data().iter().zip(&oracle) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn ramp_downsample_matches_block_average_oracle() {
        let img = ramp_image(4, 4);
        let down = resize(&img, 2, 2).unwrap();
        // oracle: for an exact 2x downscale the bilinear weights average each
        // 2x2 block
        for r in 0..2 {
            for c in 0..2 {
                let mut acc = 0.0;
                for dr in 0..2 {
                    for dc in 0..2 {
                        acc += img.get(2 * r + dr, 2 * c + dc, 0);
                    }
                }
                assert_abs_diff_eq!(down.get(r, c, 0), acc / 4.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gray_pixels_have_exact_half_chroma() {
        for &v in &[0.0, 0.137, 0.5, 0.93, 1.0] {
            let img = ImageBuffer::filled(2, 2, 3, v);
            let yuv = rgb_to_yuv(&img).unwrap();
            for px in 0..4 {
                assert_eq!(yuv.get(px / 2, px % 2, 0), v);
                assert_eq!(yuv.get(px / 2, px % 2, 1), 0.5);
                assert_eq!(yuv.get(px / 2, px % 2, 2), 0.5);
            }
        }
    }

    #[test]
    fn black_maps_to_zero_luma_half_chroma() {
        let img = ImageBuffer::filled(1, 1, 3, 0.0);
        let yuv = rgb_to_yuv(&img).unwrap();
        assert_eq!(yuv.data(), &[0.0, 0.5, 0.5]);
    }

    #[test]
    fn pure_red_matches_bt601_matrix() {
        let img = ImageBuffer::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let yuv = rgb_to_yuv(&img).unwrap();
        // independent evaluation of the conventional matrix form
        let y = 0.299;
        let u = 0.564 * (0.0 - y) + 0.5;
        let v = 0.713 * (1.0 - y) + 0.5;
        assert_abs_diff_eq!(yuv.get(0, 0, 0), y, epsilon = 1e-12);
        assert_abs_diff_eq!(yuv.get(0, 0, 1), u, epsilon = 1e-12);
        assert_abs_diff_eq!(yuv.get(0, 0, 2), v, epsilon = 1e-12);
    }

    #[test]
    fn rgb_to_yuv_rejects_single_channel() {
        let img = ImageBuffer::filled(2, 2, 1, 0.5);
        assert!(rgb_to_yuv(&img).is_err());
    }

    #[test]
    fn psnr_identical_gives_sentinel() {
        let img = seeded_random_image(11, 8, 8, 3);
        assert_eq!(psnr(&img, &img).unwrap(), 99.0);
    }

    #[test]
    fn psnr_uniform_error_is_twenty_db() {
        let a = ImageBuffer::filled(4, 4, 3, 0.4);
        let b = ImageBuffer::filled(4, 4, 3, 0.5);
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-9);
    }

    #[test]
    fn psnr_matches_direct_mse_on_random_pair() {
        let a = seeded_random_image(21, 9, 7, 3);
        let b = seeded_random_image(22, 9, 7, 3);
        // independent reference: two-pass mean of squared diffs
        let diffs: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let mse = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
        let expected = -10.0 * mse.log10();
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), expected, epsilon = 1e-9);
    }

    #[test]
    fn ssim_self_is_exactly_one() {
        let img = seeded_random_image(31, 16, 13, 3);
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);
    }

    #[test]
    fn ssim_of_distinct_constants_is_luminance_term() {
        let c1 = 0.3;
        let c2 = 0.7;
        let a = ImageBuffer::filled(12, 12, 1, c1);
        let b = ImageBuffer::filled(12, 12, 1, c2);
        let expected = (2.0 * c1 * c2 + SSIM_K1 * SSIM_K1) / (c1 * c1 + c2 * c2 + SSIM_K1 * SSIM_K1);
        assert_abs_diff_eq!(ssim(&a, &b).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn ssim_of_inverted_checkerboard_is_negative() {
        let h = 16;
        let w = 16;
        let mut a = ImageBuffer::filled(h, w, 1, 0.0);
        let mut b = ImageBuffer::filled(h, w, 1, 0.0);
        for r in 0..h {
            for c in 0..w {
                let v = ((r + c) % 2) as f64;
                a.set(r, c, 0, v);
                b.set(r, c, 0, 1.0 - v);
            }
        }
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let img = ImageBuffer::filled(8, 8, 1, 0.5);
        assert!(ssim(&img, &img).is_err());
    }

    #[test]
    fn metric_shape_mismatch_is_error() {
        let a = ImageBuffer::filled(12, 12, 3, 0.5);
        let b = ImageBuffer::filled(12, 13, 3, 0.5);
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn resize_preserves_constants_exactly(
            v in 0.0f64..=1.0,
            h in 1usize..12,
            w in 1usize..12,
            nh in 1usize..12,
            nw in 1usize..12,
        ) {
            let img = ImageBuffer::filled(h, w, 1, v);
            let out = resize(&img, nh, nw).unwrap();
            prop_assert!(out.data().iter().all(|&x| x == v));
        }

        #[test]
        fn psnr_decreases_with_error(base in 0.1f64..0.5, e1 in 0.01f64..0.2, scale in 1.5f64..4.0) {
            let a = ImageBuffer::filled(4, 4, 1, base);
            let b1 = ImageBuffer::filled(4, 4, 1, base + e1);
            let b2 = ImageBuffer::filled(4, 4, 1, base + e1 * scale);
            prop_assert!(psnr(&a, &b1).unwrap() > psnr(&a, &b2).unwrap());
        }

        #[test]
        fn upscale_then_downscale_of_constant_is_identity(v in 0.0f64..=1.0) {
            let img = ImageBuffer::filled(6, 6, 3, v);
            let up = resize(&img, 12, 12).unwrap();
            let back = resize(&up, 6, 6).unwrap();
            prop_assert!(back.data().iter().all(|&x| x == v));
        }
    }
}
