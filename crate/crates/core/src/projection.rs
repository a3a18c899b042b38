//! Gnomonic viewport extraction from equirectangular panoramas.
//!
//! For every output pixel a ray is cast through the tangent plane at the
//! viewport center, converted back to (lat, lon), and sampled from the ERP
//! with bilinear interpolation. Longitude wraps across the +-180 degree seam;
//! latitude is clamped at the poles. Interpolation is a nested lerp, so a
//! constant image reproduces its value exactly and row-constant images are
//! seam-transparent.
//!
//! ERP addressing follows the crate convention: row 0 is lat = +90 degrees,
//! column 0 is lon = -180 degrees, both at pixel centers.

use std::path::Path;

use crate::error::{Error, Result};
use crate::sphere::SpherePoint;
use crate::tensor::Tensor;

/// Interpolation mode for ERP sampling. Bilinear is the production path;
/// nearest-neighbor exists for debugging interpolation artifacts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Bilinear,
    Nearest,
}

/// An equirectangular panorama with interleaved RGB rows, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ErpImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl ErpImage {
    /// Builds from an interleaved RGB buffer (`width*height*3` values).
    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Domain("image must have at least one pixel".to_string()));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "pixel buffer has {} values, expected {}x{}x3 = {}",
                pixels.len(),
                width,
                height,
                width * height * 3
            )));
        }
        if !pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Domain("pixel values must lie in [0, 1]".to_string()));
        }
        if width != 2 * height {
            log::warn!("ERP aspect is {width}x{height}, expected 2:1; continuing");
        }
        Ok(ErpImage { width, height, pixels })
    }

    /// Loads a PNG or JPEG file and normalizes it to [0, 1] RGB.
    pub fn from_path(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })?;
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let pixels = rgb.into_raw().iter().map(|&b| f32::from(b) / 255.0).collect();
        ErpImage::from_pixels(w, h, pixels)
    }

    #[must_use]
    pub fn width(&self) -> usize {
        self.width
    }

    #[must_use]
    pub fn height(&self) -> usize {
        self.height
    }

    #[must_use]
    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    #[must_use]
    fn texel(&self, x: usize, y: usize, c: usize) -> f64 {
        f64::from(self.pixels[(y * self.width + x) * 3 + c])
    }

    /// Bilinear sample at fractional ERP coordinates; x wraps, y clamps.
    fn sample(&self, x: f64, y: f64, c: usize, interp: Interpolation) -> f64 {
        let w = self.width as i64;
        let h = self.height as i64;
        match interp {
            Interpolation::Nearest => {
                let xi = (x.round() as i64).rem_euclid(w) as usize;
                let yi = (y.round() as i64).clamp(0, h - 1) as usize;
                self.texel(xi, yi, c)
            }
            Interpolation::Bilinear => {
                let x0 = x.floor();
                let y0 = y.floor();
                let fx = x - x0;
                let fy = y - y0;
                let x0i = (x0 as i64).rem_euclid(w) as usize;
                let x1i = (x0 as i64 + 1).rem_euclid(w) as usize;
                let y0i = (y0 as i64).clamp(0, h - 1) as usize;
                let y1i = (y0 as i64 + 1).clamp(0, h - 1) as usize;
                let top = lerp(self.texel(x0i, y0i, c), self.texel(x1i, y0i, c), fx);
                let bottom = lerp(self.texel(x0i, y1i, c), self.texel(x1i, y1i, c), fx);
                lerp(top, bottom, fy)
            }
        }
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// A square rectilinear viewport extracted from an ERP, interleaved RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct Viewport {
    pub size: usize,
    pub fov_deg: f64,
    /// Tangent-point (lat, lon) in degrees, crate convention.
    pub center_deg: (f64, f64),
    pixels: Vec<f32>,
}

impl Viewport {
    #[must_use]
    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    #[must_use]
    pub fn pixel(&self, u: usize, v: usize, c: usize) -> f32 {
        self.pixels[(v * self.size + u) * 3 + c]
    }

    /// Channel-major tensor `[3, size, size]` for the model input.
    #[must_use]
    pub fn to_chw_tensor(&self) -> Tensor {
        let s = self.size;
        let mut data = vec![0.0f64; 3 * s * s];
        for v in 0..s {
            for u in 0..s {
                for c in 0..3 {
                    data[c * s * s + v * s + u] = f64::from(self.pixel(u, v, c));
                }
            }
        }
        Tensor::from_vec(&[3, s, s], data).expect("shape matches buffer by construction")
    }

    /// Writes the viewport as an 8-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let s = self.size as u32;
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&v| (f64::from(v) * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let buf: image::RgbImage =
            image::ImageBuffer::from_raw(s, s, bytes).expect("buffer length matches dimensions");
        buf.save(path).map_err(|e| Error::Image { path: path.into(), source: e })
    }
}

fn check_extract_args(erp: &ErpImage, fov_deg: f64, size: usize) -> Result<()> {
    if erp.pixels.is_empty() {
        return Err(Error::Domain("cannot extract from an empty image".to_string()));
    }
    if !(fov_deg.is_finite() && fov_deg > 0.0 && fov_deg <= 120.0) {
        return Err(Error::Domain(format!(
            "field of view must lie in (0, 120] degrees, got {fov_deg}"
        )));
    }
    if size == 0 {
        return Err(Error::Domain("viewport size must be positive".to_string()));
    }
    Ok(())
}

/// Maps viewport pixel (u, v) to the (lat, lon) it samples, in radians.
///
/// Pixel centers are used, so for odd sizes the middle pixel is exactly the
/// tangent point. This is the single source of truth for the inverse mapping;
/// [`gnomonic_extract`] loops over it.
#[must_use]
pub fn gnomonic_pixel_latlon(
    center_deg: (f64, f64),
    fov_deg: f64,
    size: usize,
    u: usize,
    v: usize,
) -> (f64, f64) {
    let lat = center_deg.0.to_radians();
    let lon = center_deg.1.to_radians();
    let half_tan = (fov_deg.to_radians() / 2.0).tan();
    let s = size as f64;
    let px = (2.0 * (u as f64 + 0.5) / s - 1.0) * half_tan;
    let py = (1.0 - 2.0 * (v as f64 + 0.5) / s) * half_tan;

    let (sin_lat, cos_lat) = lat.sin_cos();
    let (sin_lon, cos_lon) = lon.sin_cos();
    // Tangent frame at the center: east, and north toward increasing lat.
    let cx = cos_lat * cos_lon + px * (-sin_lon) + py * (-sin_lat * cos_lon);
    let cy = cos_lat * sin_lon + px * cos_lon + py * (-sin_lat * sin_lon);
    let cz = sin_lat + py * cos_lat;

    let out_lat = cz.atan2(cx.hypot(cy));
    let out_lon = cy.atan2(cx);
    (out_lat, out_lon)
}

/// Extracts one gnomonic viewport with bilinear interpolation.
pub fn gnomonic_extract(
    erp: &ErpImage,
    center_deg: (f64, f64),
    fov_deg: f64,
    size: usize,
) -> Result<Viewport> {
    gnomonic_extract_with(erp, center_deg, fov_deg, size, Interpolation::Bilinear)
}

/// Extraction with an explicit interpolation mode.
pub fn gnomonic_extract_with(
    erp: &ErpImage,
    center_deg: (f64, f64),
    fov_deg: f64,
    size: usize,
    interp: Interpolation,
) -> Result<Viewport> {
    check_extract_args(erp, fov_deg, size)?;
    let w = erp.width as f64;
    let h = erp.height as f64;
    let mut pixels = vec![0.0f32; size * size * 3];
    for v in 0..size {
        for u in 0..size {
            let (lat, lon) = gnomonic_pixel_latlon(center_deg, fov_deg, size, u, v);
            let x = (lon + std::f64::consts::PI) / (2.0 * std::f64::consts::PI) * w - 0.5;
            let y = (std::f64::consts::FRAC_PI_2 - lat) / std::f64::consts::PI * h - 0.5;
            for c in 0..3 {
                pixels[(v * size + u) * 3 + c] = erp.sample(x, y, c, interp) as f32;
            }
        }
    }
    Ok(Viewport { size, fov_deg, center_deg, pixels })
}

/// Extracts one viewport per sampled point, order-preserving.
pub fn extract_all(
    erp: &ErpImage,
    points: &[SpherePoint],
    fov_deg: f64,
    size: usize,
) -> Result<Vec<Viewport>> {
    use rayon::prelude::*;
    points
        .par_iter()
        .map(|p| gnomonic_extract(erp, (p.lat_deg, p.lon_deg), fov_deg, size))
        .collect()
}
