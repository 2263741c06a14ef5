//! Image tensors (`3×H×W`, values in `[0, 1]`), file IO and crop/resize.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::tensor::Tensor;

/// Context padding used for template crops: `sqrt((w + p)(h + p))`, `p = (w + h) / 2`.
pub fn context_side(w: f64, h: f64) -> f64 {
    let p = 0.5 * (w + h);
    ((w + p) * (h + p)).sqrt()
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let plane = w * h;
    Ok(Tensor::from_fn(&[3, h, w], |k| {
        let (c, p) = (k / plane, k % plane);
        raw[p * 3 + c] as f64 / 255.0
    }))
}

/// Writes an 8-bit RGB PNG; values are clamped to `[0, 1]` and rounded.
pub fn save_png(path: &Path, img: &Tensor) -> Result<()> {
    let (c, h, w) = img.dims3("save_png")?;
    if c != 3 {
        return Err(Error::dim("save_png", format!("expected 3 channels, got {c}")));
    }
    let plane = w * h;
    let d = img.data();
    let mut raw = vec![0u8; plane * 3];
    for p in 0..plane {
        for ch in 0..3 {
            raw[p * 3 + ch] = quantize(d[ch * plane + p]);
        }
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size matches");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn channel_means(img: &Tensor) -> Result<[f64; 3]> {
    let (c, h, w) = img.dims3("channel_means")?;
    if c != 3 {
        return Err(Error::dim("channel_means", format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let mut m = [0.0; 3];
    for (ch, v) in m.iter_mut().enumerate() {
        *v = img.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64;
    }
    Ok(m)
}

/// Square window of `side` frame pixels centred at `(cx, cy)`, resampled to `out × out`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
    pub out: usize,
}

impl CropWindow {
    pub fn scale(&self) -> f64 {
        self.out as f64 / self.side
    }

    /// Frame rectangle in crop pixels.
    pub fn to_crop(&self, r: &Rect) -> Rect {
        let s = self.scale();
        let half = self.out as f64 / 2.0;
        Rect::from_center(
            (r.cx() - self.cx) * s + half,
            (r.cy() - self.cy) * s + half,
            r.w * s,
            r.h * s,
        )
    }

    /// Crop rectangle in frame pixels.
    pub fn to_frame(&self, r: &Rect) -> Rect {
        let s = self.scale();
        let half = self.out as f64 / 2.0;
        Rect::from_center(
            (r.cx() - half) / s + self.cx,
            (r.cy() - half) / s + self.cy,
            r.w / s,
            r.h / s,
        )
    }
}

/// Bilinear crop. Output pixel `u` samples the frame at continuous coordinate
/// `cx − side/2 + (u + ½)·side/out`; taps outside the frame take the channel
/// mean. Returns the crop and whether any tap fell outside.
pub fn crop_resize(img: &Tensor, win: &CropWindow) -> Result<(Tensor, bool)> {
    let (c, h, w) = img.dims3("crop_resize")?;
    if c != 3 || h == 0 || w == 0 {
        return Err(Error::dim("crop_resize", format!("bad image shape {:?}", img.shape())));
    }
    if !(win.side > 0.0) || !win.side.is_finite() || !win.cx.is_finite() || !win.cy.is_finite() || win.out == 0 {
        return Err(Error::Contract(format!("invalid crop window {win:?}")));
    }
    let means = channel_means(img)?;
    let n = win.out;
    let step = win.side / n as f64;
    let x0 = win.cx - win.side / 2.0;
    let y0 = win.cy - win.side / 2.0;
    // Pixel-index coordinates of each output row/column.
    let xs: Vec<f64> = (0..n).map(|u| x0 + (u as f64 + 0.5) * step - 0.5).collect();
    let ys: Vec<f64> = (0..n).map(|v| y0 + (v as f64 + 0.5) * step - 0.5).collect();
    let d = img.data();
    let plane = h * w;
    let mut out = vec![0.0; 3 * n * n];
    let mut padded = false;
    for (v, &sy) in ys.iter().enumerate() {
        let fy = sy.floor();
        let ty = sy - fy;
        let iy = fy as i64;
        for (u, &sx) in xs.iter().enumerate() {
            let fx = sx.floor();
            let tx = sx - fx;
            let ix = fx as i64;
            let taps = [
                (iy, ix, (1.0 - ty) * (1.0 - tx)),
                (iy, ix + 1, (1.0 - ty) * tx),
                (iy + 1, ix, ty * (1.0 - tx)),
                (iy + 1, ix + 1, ty * tx),
            ];
            for ch in 0..3 {
                let mut acc = 0.0;
                for &(ty_, tx_, wt) in &taps {
                    if wt == 0.0 {
                        continue;
                    }
                    let val = if ty_ >= 0 && tx_ >= 0 && (ty_ as usize) < h && (tx_ as usize) < w {
                        d[ch * plane + ty_ as usize * w + tx_ as usize]
                    } else {
                        padded = true;
                        means[ch]
                    };
                    acc += wt * val;
                }
                out[ch * n * n + v * n + u] = acc;
            }
        }
    }
    Ok((Tensor::new(vec![3, n, n], out)?, padded))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_crop_reproduces_image() {
        let img = Tensor::from_fn(&[3, 8, 8], |k| (k % 13) as f64 / 13.0);
        let win = CropWindow {
            cx: 4.0,
            cy: 4.0,
            side: 8.0,
            out: 8,
        };
        let (c, padded) = crop_resize(&img, &win).unwrap();
        assert!(!padded);
        assert!(c.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn corner_crop_uses_means() {
        let img = Tensor::from_fn(&[3, 10, 10], |k| if k < 100 { 0.2 } else { 0.6 });
        let win = CropWindow {
            cx: -20.0,
            cy: -20.0,
            side: 10.0,
            out: 5,
        };
        let (c, padded) = crop_resize(&img, &win).unwrap();
        assert!(padded);
        let m = channel_means(&img).unwrap();
        for ch in 0..3 {
            for k in 0..25 {
                assert_eq!(c.data()[ch * 25 + k], m[ch]);
            }
        }
    }

    #[test]
    fn window_maps_round_trip() {
        let win = CropWindow {
            cx: 40.0,
            cy: 30.0,
            side: 50.0,
            out: 111,
        };
        let r = Rect::new(33.0, 21.0, 12.0, 7.0);
        let back = win.to_frame(&win.to_crop(&r));
        assert!((back.x - r.x).abs() < 1e-12 && (back.w - r.w).abs() < 1e-12);
        let centred = win.to_crop(&Rect::from_center(40.0, 30.0, 10.0, 10.0));
        assert!((centred.cx() - 55.5).abs() < 1e-12);
    }

    #[test]
    fn context_side_of_square() {
        assert_eq!(context_side(10.0, 10.0), 20.0);
    }
}
