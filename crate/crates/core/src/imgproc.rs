//! Classical image operations used by the degradation pipeline: Gaussian
//! blur (optionally anisotropic), area downsampling, Catmull-Rom bicubic
//! upsampling, additive noise, quantization, and range clipping.
//!
//! All functions are pure; noise comes from a caller-supplied generator.

use autograd::{standard_normal, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Normalized 1-D Gaussian taps with radius ceil(3σ); σ = 0 yields `[1]`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with per-axis widths (replicated borders).
pub fn gaussian_blur(img: &ImageTensor, sigma_x: f64, sigma_y: f64) -> Result<ImageTensor> {
    if sigma_x < 0.0 || sigma_y < 0.0 {
        return Err(Error::InvalidArgument("blur widths must be non-negative".into()));
    }
    let (c, h, w) = (img.c(), img.h(), img.w());
    let kx = gaussian_kernel(sigma_x);
    let ky = gaussian_kernel(sigma_y);
    let rx = (kx.len() / 2) as i64;
    let ry = (ky.len() / 2) as i64;
    let src = img.data();

    // Horizontal pass.
    let mut tmp = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w as i64 {
                let mut acc = 0.0;
                for (i, &kv) in kx.iter().enumerate() {
                    let sx = (x + i as i64 - rx).clamp(0, w as i64 - 1) as usize;
                    acc += kv * src[row + sx];
                }
                tmp[row + x as usize] = acc;
            }
        }
    }
    // Vertical pass.
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h as i64 {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &kv) in ky.iter().enumerate() {
                    let sy = (y + i as i64 - ry).clamp(0, h as i64 - 1) as usize;
                    acc += kv * tmp[(ch * h + sy) * w + x];
                }
                out[(ch * h + y as usize) * w + x] = acc;
            }
        }
    }
    ImageTensor::new(Tensor::new(vec![c, h, w], out)?)
}

/// Area (box-average) downsampling by an integer factor dividing both dims.
pub fn downsample_area(img: &ImageTensor, factor: usize) -> Result<ImageTensor> {
    let (c, h, w) = (img.c(), img.h(), img.w());
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "downsample factor {factor} must divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let src = img.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += src[(ch * h + oy * factor + dy) * w + ox * factor + dx];
                    }
                }
                out[(ch * oh + oy) * ow + ox] = acc * norm;
            }
        }
    }
    ImageTensor::new(Tensor::new(vec![c, oh, ow], out)?)
}

/// Catmull-Rom cubic kernel (a = −0.5).
fn cubic(d: f64) -> f64 {
    const A: f64 = -0.5;
    let d = d.abs();
    if d <= 1.0 {
        (A + 2.0) * d * d * d - (A + 3.0) * d * d + 1.0
    } else if d < 2.0 {
        A * d * d * d - 5.0 * A * d * d + 8.0 * A * d - 4.0 * A
    } else {
        0.0
    }
}

/// Bicubic (Catmull-Rom) resampling to `(out_h, out_w)`, borders clamped.
/// Implemented separably: rows first, then columns.
pub fn upsample_bicubic(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("target size must be positive".into()));
    }
    let (c, h, w) = (img.c(), img.h(), img.w());

    let resample_axis = |src: &[f64], n_in: usize, n_out: usize, stride: usize, lanes: usize,
                         lane_stride: usize, out: &mut [f64], out_stride: usize,
                         out_lane_stride: usize| {
        let scale = n_in as f64 / n_out as f64;
        for o in 0..n_out {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let base = center.floor() as i64;
            let mut taps = [0.0f64; 4];
            for (i, tap) in taps.iter_mut().enumerate() {
                *tap = cubic(center - (base + i as i64 - 1) as f64);
            }
            for lane in 0..lanes {
                let mut acc = 0.0;
                for (i, &tv) in taps.iter().enumerate() {
                    let s = (base + i as i64 - 1).clamp(0, n_in as i64 - 1) as usize;
                    acc += tv * src[lane * lane_stride + s * stride];
                }
                out[lane * out_lane_stride + o * out_stride] = acc;
            }
        }
    };

    // Rows: width w -> out_w, lanes are (channel, row) pairs.
    let mut tmp = vec![0.0; c * h * out_w];
    resample_axis(img.data(), w, out_w, 1, c * h, w, &mut tmp, 1, out_w);
    // Columns: height h -> out_h, lanes are (channel, col) pairs. Columns of
    // a single channel are strided by out_w; channels by h * out_w.
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let src = &tmp[ch * h * out_w..(ch + 1) * h * out_w];
        let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        resample_axis(src, h, out_h, out_w, out_w, 1, dst, out_w, 1);
    }
    ImageTensor::new(Tensor::new(vec![c, out_h, out_w], out)?)
}

/// Adds i.i.d. Gaussian noise of standard deviation `sigma`.
pub fn add_gaussian_noise(img: &ImageTensor, sigma: f64, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    if sigma < 0.0 {
        return Err(Error::InvalidArgument("noise sigma must be non-negative".into()));
    }
    let data: Vec<f64> = img.data().iter().map(|&v| v + sigma * standard_normal(rng)).collect();
    ImageTensor::new(Tensor::new(img.tensor().shape().to_vec(), data)?)
}

/// Clamps to [0, 1] and snaps every pixel to one of `levels` equal steps.
pub fn quantize(img: &ImageTensor, levels: usize) -> Result<ImageTensor> {
    if levels < 2 {
        return Err(Error::InvalidArgument("quantization needs at least 2 levels".into()));
    }
    let q = (levels - 1) as f64;
    let data: Vec<f64> = img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * q).round() / q).collect();
    ImageTensor::new(Tensor::new(img.tensor().shape().to_vec(), data)?)
}

/// Clamps every pixel to [0, 1].
pub fn clip01(img: &ImageTensor) -> ImageTensor {
    ImageTensor::new(img.tensor().map(|v| v.clamp(0.0, 1.0))).expect("clip preserves shape")
}
