use std::path::Path;

use cyclebalance_nn::{Scalar, Tensor};
use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

/// Value range of raw pixel data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PixelRange {
    /// `[0, max]`, e.g. 255 for 8-bit PNG.
    Max(f64),
    /// Already normalised to `[-1, 1]`.
    Signed,
}

/// Decoded image before preprocessing; `data` is HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub range: PixelRange,
}

impl RawImage {
    pub fn from_chw<T: Scalar>(t: &Tensor<T>) -> Self {
        let s = t.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut data = vec![0.0; c * h * w];
        for ch in 0..c {
            for i in 0..h * w {
                data[i * c + ch] = t.data()[ch * h * w + i].to_f64().unwrap_or(f64::NAN);
            }
        }
        Self {
            height: h,
            width: w,
            channels: c,
            data,
            range: PixelRange::Signed,
        }
    }
}

pub fn load_image(path: &Path) -> Result<RawImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data, max) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().into_iter().map(f64::from).collect(), 255.0),
        DynamicImage::ImageLuma16(b) => (1, b.into_raw().into_iter().map(f64::from).collect(), 65535.0),
        DynamicImage::ImageRgb16(b) => (3, b.into_raw().into_iter().map(f64::from).collect(), 65535.0),
        DynamicImage::ImageRgba16(_) | DynamicImage::ImageLumaA16(_) => {
            let b = img.to_rgb16();
            (3, b.into_raw().into_iter().map(f64::from).collect(), 65535.0)
        }
        other => {
            let b = other.to_rgb8();
            (3, b.into_raw().into_iter().map(f64::from).collect(), 255.0)
        }
    };
    Ok(RawImage {
        height: h,
        width: w,
        channels,
        data,
        range: PixelRange::Max(max),
    })
}

/// Bilinear resize of a CHW tensor with half-pixel centres (corners not aligned).
/// Same-size input is returned unchanged.
pub fn resize_bilinear<T: Scalar>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if h == out_h && w == out_w {
        return img.clone();
    }
    let axis = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    let ys: Vec<_> = (0..out_h).map(|y| axis(y, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| axis(x, w, out_w)).collect();
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    for ch in 0..c {
        let src = &img.data()[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let p = |y: usize, x: usize| src[y * w + x].to_f64().unwrap_or(f64::NAN);
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.data_mut()[(ch * out_h + oy) * out_w + ox] = T::from_f64_lossy(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Rescales to `[-1, 1]`, converts to `channels` channels and resizes to
/// `resolution × resolution`. Returns CHW.
pub fn preprocess<T: Scalar>(raw: &RawImage, resolution: usize, channels: usize) -> Result<Tensor<T>> {
    if raw.height == 0 || raw.width == 0 || raw.channels == 0 {
        return Err(Error::Invalid(format!(
            "zero-sized image {}x{}x{}",
            raw.height, raw.width, raw.channels
        )));
    }
    if resolution == 0 || channels == 0 {
        return Err(Error::Invalid("resolution and channels must be positive".into()));
    }
    if raw.data.len() != raw.height * raw.width * raw.channels {
        return Err(Error::Shape(format!(
            "{} values for {}x{}x{}",
            raw.data.len(),
            raw.height,
            raw.width,
            raw.channels
        )));
    }
    if let Some(i) = raw.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("non-finite pixel value at index {i}")));
    }
    let scale = |v: f64| match raw.range {
        PixelRange::Max(m) => v / m * 2.0 - 1.0,
        PixelRange::Signed => v,
    };
    let (h, w, cin) = (raw.height, raw.width, raw.channels);
    let pick = |y: usize, x: usize, ch: usize| scale(raw.data[(y * w + x) * cin + ch]);
    let colour = match cin {
        1 | 2 => 1,
        _ => 3,
    };
    let planes = match (colour, channels) {
        (a, b) if a == b => colour,
        (1, _) => 1,
        (3, 1) => 3,
        _ => {
            return Err(Error::Invalid(format!(
                "cannot map {cin}-channel image to {channels} channels"
            )))
        }
    };
    let mut chw = Tensor::<f64>::zeros(&[planes, h, w]);
    for ch in 0..planes {
        for y in 0..h {
            for x in 0..w {
                chw.data_mut()[(ch * h + y) * w + x] = pick(y, x, ch);
            }
        }
    }
    let resized = resize_bilinear(&chw, resolution, resolution);
    let plane = resolution * resolution;
    let out = if planes == channels {
        resized
    } else if planes == 1 {
        Tensor::from_fn(&[channels, resolution, resolution], |i| resized.data()[i % plane])
    } else {
        // RGB -> single channel by channel mean
        Tensor::from_fn(&[1, resolution, resolution], |i| {
            (resized.data()[i] + resized.data()[plane + i] + resized.data()[2 * plane + i]) / 3.0
        })
    };
    Ok(out.cast())
}

pub fn quantize_u16(v: f64) -> u16 {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 65535.0).round() as u16
}

/// Inverse of [`quantize_u16`]; the same expression [`preprocess`] applies to 16-bit PNG data.
pub fn dequantize_u16(q: u16) -> f64 {
    f64::from(q) / 65535.0 * 2.0 - 1.0
}

/// Writes a CHW image in `[-1, 1]` as 16-bit grayscale (1 channel) or RGB (3 channels).
pub fn save_image_png16<T: Scalar>(img: &Tensor<T>, path: &Path) -> Result<()> {
    super::ensure_parent(path)?;
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let q = |ch: usize, i: usize| quantize_u16(img.data()[ch * h * w + i].to_f64().unwrap_or(0.0));
    let err = |e: image::ImageError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    match c {
        1 => {
            let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
                ImageBuffer::from_raw(w as u32, h as u32, (0..h * w).map(|i| q(0, i)).collect())
                    .expect("buffer size");
            buf.save(path).map_err(err)
        }
        3 => {
            let data = (0..h * w).flat_map(|i| [q(0, i), q(1, i), q(2, i)]).collect();
            let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
                ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer size");
            buf.save(path).map_err(err)
        }
        _ => Err(Error::Invalid(format!("cannot save {c}-channel image"))),
    }
}

/// Writes an H×W map with values in `[0, 1]` as 8-bit grayscale.
pub fn save_gray_png(values: &[f64], height: usize, width: usize, path: &Path) -> Result<()> {
    super::ensure_parent(path)?;
    let data = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(width as u32, height as u32, data).expect("buffer size");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn save_rgb_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    super::ensure_parent(path)?;
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> RawImage {
        RawImage {
            height: h,
            width: w,
            channels: 1,
            data: (0..h * w).map(|i| f(i / w, i % w)).collect(),
            range: PixelRange::Max(255.0),
        }
    }

    #[test]
    fn large_grayscale_to_three_channel_224() {
        let raw = gray(1024, 1024, |y, x| ((y * 31 + x * 17) % 256) as f64);
        let out: Tensor<f32> = preprocess(&raw, 224, 3).unwrap();
        assert_eq!(out.shape(), &[3, 224, 224]);
        assert!(out.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        let plane = 224 * 224;
        assert_eq!(&out.data()[..plane], &out.data()[plane..2 * plane]);
    }

    #[test]
    fn black_maps_to_minus_one() {
        let out: Tensor<f64> = preprocess(&gray(50, 70, |_, _| 0.0), 32, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn same_size_is_pure_rescale() {
        let raw = gray(224, 224, |y, x| ((y + 3 * x) % 256) as f64);
        let out: Tensor<f64> = preprocess(&raw, 224, 1).unwrap();
        for (o, r) in out.data().iter().zip(&raw.data) {
            assert_eq!(*o, r / 255.0 * 2.0 - 1.0);
        }
    }

    #[test]
    fn idempotent_on_preprocessed() {
        let raw = gray(97, 61, |y, x| ((y * x) % 256) as f64);
        let once: Tensor<f64> = preprocess(&raw, 48, 3).unwrap();
        let twice: Tensor<f64> = preprocess(&RawImage::from_chw(&once), 48, 3).unwrap();
        assert!(once.zip_map(&twice, |a, b| a - b).max_abs() < 1e-6);
    }

    #[test]
    fn rejects_degenerate_input() {
        let mut raw = gray(4, 4, |_, _| 1.0);
        raw.data[5] = f64::NAN;
        assert!(preprocess::<f32>(&raw, 4, 1).is_err());
        let empty = RawImage {
            height: 0,
            width: 4,
            channels: 1,
            data: vec![],
            range: PixelRange::Max(255.0),
        };
        assert!(preprocess::<f32>(&empty, 4, 1).is_err());
    }

    #[test]
    fn bilinear_half_pixel_downscale_averages_pairs() {
        // 4 -> 2 with half-pixel centres samples at 0.5 and 2.5
        let t = Tensor::<f64>::from_vec(&[1, 1, 4], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let r = resize_bilinear(&t, 1, 2);
        assert!((r.data()[0] - 1.0).abs() < 1e-12);
        assert!((r.data()[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn png16_round_trip_is_exact_after_quantisation() {
        let d = tempfile::tempdir().unwrap();
        let img = Tensor::<f32>::from_fn(&[1, 5, 7], |i| (i as f32 / 34.0) * 2.0 - 1.0);
        let p = d.path().join("x.png");
        save_image_png16(&img, &p).unwrap();
        let raw = load_image(&p).unwrap();
        assert_eq!((raw.height, raw.width, raw.channels), (5, 7, 1));
        for (i, v) in raw.data.iter().enumerate() {
            let want = dequantize_u16(quantize_u16(f64::from(img.data()[i])));
            assert_eq!(v / 65535.0 * 2.0 - 1.0, want);
        }
    }
}
