use std::io::Cursor;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An 8-bit RGB image, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "{} bytes for a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Binary PPM (P6) encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Decodes an image file to RGB8; gray is replicated, alpha dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<RawImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|reason| Error::Decode {
        path: path.to_path_buf(),
        reason,
    })
}

/// Decodes in-memory PPM, PNG or JPEG bytes to RGB8.
pub fn decode_image(bytes: &[u8]) -> std::result::Result<RawImage, String> {
    let reader = image::ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| e.to_string())?;
    if reader.format().is_none() {
        return Err("unrecognized image format".into());
    }
    let rgb = reader.decode().map_err(|e| e.to_string())?.to_rgb8();
    let (w, h) = rgb.dimensions();
    RawImage::new(w as usize, h as usize, rgb.into_raw()).map_err(|e| e.to_string())
}

/// Bilinear sample of an `[h, w, c]` tensor at continuous coordinates,
/// clamping to the edge.
fn sample(src: &[f32], h: usize, w: usize, c: usize, y: f64, x: f64, out: &mut [f32]) {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    for ch in 0..c {
        let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
        let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
        let bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
        out[ch] = top + (bottom - top) * fy;
    }
}

/// Resamples the window `[y0, y0 + win_h) x [x0, x0 + win_w)` of an `[h, w, c]`
/// tensor to `out_h x out_w`, with pixel centres at half-integer positions.
fn resample_window(
    t: &Tensor,
    y0: f64,
    x0: f64,
    win_h: f64,
    win_w: f64,
    out_h: usize,
    out_w: usize,
) -> Tensor {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let (sy, sx) = (win_h / out_h as f64, win_w / out_w as f64);
    let mut data = vec![0.0f32; out_h * out_w * c];
    for oy in 0..out_h {
        let y = y0 + (oy as f64 + 0.5) * sy - 0.5;
        for ox in 0..out_w {
            let x = x0 + (ox as f64 + 0.5) * sx - 0.5;
            let i = (oy * out_w + ox) * c;
            sample(t.data(), h, w, c, y, x, &mut data[i..i + c]);
        }
    }
    Tensor::new(&[out_h, out_w, c], data).expect("extents are positive")
}

/// Bilinear resize of an `[h, w, c]` tensor. Same-size resizes are exact.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if t.rank() != 3 || out_h == 0 || out_w == 0 {
        return Err(Error::shape(format!(
            "cannot resize {:?} to {out_h}x{out_w}",
            t.shape()
        )));
    }
    let (h, w) = (t.shape()[0], t.shape()[1]);
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    Ok(resample_window(t, 0.0, 0.0, h as f64, w as f64, out_h, out_w))
}

/// Raw bytes as an `[h, w, 3]` tensor of values in `[0, 255]`.
pub fn to_tensor(img: &RawImage) -> Tensor {
    let data = img.pixels.iter().map(|&p| p as f32).collect();
    Tensor::new(&[img.height, img.width, 3], data).expect("validated image")
}

/// Bilinear resize to `size x size`, then scale to `[0, 1]`.
pub fn preprocess(img: &RawImage, size: usize) -> Result<Tensor> {
    let resized = resize_bilinear(&to_tensor(img), size, size)?;
    Ok(resized.map(|v| (v / 255.0).clamp(0.0, 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub hflip_prob: f64,
    pub rotation_max_deg: f64,
    pub center_crop_min_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            hflip_prob: 0.5,
            rotation_max_deg: 15.0,
            center_crop_min_frac: 0.8,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::config(format!("hflip probability {}", self.hflip_prob)));
        }
        if !(0.0..=180.0).contains(&self.rotation_max_deg) {
            return Err(Error::config(format!("rotation {}", self.rotation_max_deg)));
        }
        if !(self.center_crop_min_frac > 0.0 && self.center_crop_min_frac <= 1.0) {
            return Err(Error::config(format!(
                "crop fraction {}",
                self.center_crop_min_frac
            )));
        }
        Ok(())
    }

    /// Draws one set of transform parameters. Always consumes three values
    /// so later draws do not depend on which transforms fired.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentParams {
        let flip = rng.random::<f64>() < self.hflip_prob;
        let angle_deg = (rng.random::<f64>() * 2.0 - 1.0) * self.rotation_max_deg;
        // U(min, 1]: 1 - U[0, 1) lies in (0, 1].
        let crop_frac = self.center_crop_min_frac
            + (1.0 - self.center_crop_min_frac) * (1.0 - rng.random::<f64>());
        AugmentParams {
            flip,
            angle_deg,
            crop_frac,
        }
    }
}

/// Concrete transform parameters for one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip: bool,
    pub angle_deg: f64,
    pub crop_frac: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        angle_deg: 0.0,
        crop_frac: 1.0,
    };
}

pub fn hflip(t: &Tensor) -> Tensor {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = t.clone();
    let src = t.data();
    for y in 0..h {
        for x in 0..w {
            let (d, s) = ((y * w + x) * c, (y * w + (w - 1 - x)) * c);
            out.data_mut()[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    out
}

/// Rotation about the image centre, bilinear with edge replication.
pub fn rotate(t: &Tensor, angle_deg: f64) -> Tensor {
    if angle_deg == 0.0 {
        return t.clone();
    }
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut data = vec![0.0f32; t.len()];
    for y in 0..h {
        let dy = y as f64 - cy;
        for x in 0..w {
            let dx = x as f64 - cx;
            // Inverse rotation maps each output pixel to its source.
            let sx = cx + cos * dx + sin * dy;
            let sy = cy - sin * dx + cos * dy;
            let i = (y * w + x) * c;
            sample(t.data(), h, w, c, sy, sx, &mut data[i..i + c]);
        }
    }
    Tensor::new(t.shape(), data).expect("same shape")
}

/// Central window of side `frac` times the image, resized back.
pub fn center_crop(t: &Tensor, frac: f64) -> Tensor {
    if frac >= 1.0 {
        return t.clone();
    }
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let (ch, cw) = (h as f64 * frac, w as f64 * frac);
    resample_window(t, (h as f64 - ch) / 2.0, (w as f64 - cw) / 2.0, ch, cw, h, w)
}

/// Applies flip, rotation and center crop in that order.
pub fn apply_augment(t: &Tensor, p: &AugmentParams) -> Tensor {
    let flipped = if p.flip { hflip(t) } else { t.clone() };
    let rotated = rotate(&flipped, p.angle_deg);
    center_crop(&rotated, p.crop_frac).map(|v| v.clamp(0.0, 1.0))
}

/// Random augmentation of a preprocessed `[h, w, 3]` image.
pub fn augment<R: Rng + ?Sized>(t: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Tensor {
    if !cfg.enabled {
        return t.clone();
    }
    apply_augment(t, &cfg.sample(rng))
}
