//! Synthetic fundus-like images for tests, demos and smoke runs: a circular
//! field of view on a reddish background crossed by dark curved vessels.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::image::{write_pnm, Raster};
use super::sample::Sample;

#[derive(Clone, Copy, Debug)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub vessels: usize,
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            height: 48,
            width: 48,
            vessels: 4,
            noise: 0.03,
        }
    }
}

/// 8-bit rasters for one synthetic sample: RGB image, vessel label, FOV mask.
pub struct SynthRasters {
    pub image: Raster,
    pub label: Raster,
    pub mask: Raster,
}

pub fn synth_rasters(spec: &SynthSpec, seed: u64) -> SynthRasters {
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let radius = 0.48 * h.min(w) as f64;

    let mut vessel = vec![0u8; h * w];
    for _ in 0..spec.vessels {
        // Quadratic Bézier between two rim points through a jittered interior point.
        let a0: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let a1 = a0 + rng.gen_range(2.0..4.3);
        let p0 = (cy + radius * a0.sin(), cx + radius * a0.cos());
        let p2 = (cy + radius * a1.sin(), cx + radius * a1.cos());
        let p1 = (
            cy + rng.gen_range(-0.5..0.5) * radius,
            cx + rng.gen_range(-0.5..0.5) * radius,
        );
        let half = rng.gen_range(0.6..1.6);
        let steps = 4 * (h + w);
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let u = 1.0 - t;
            let y = u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0;
            let x = u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1;
            let (y0, y1) = (
                (y - half).floor().max(0.0) as usize,
                ((y + half).ceil() as usize).min(h - 1),
            );
            let (x0, x1) = (
                (x - half).floor().max(0.0) as usize,
                ((x + half).ceil() as usize).min(w - 1),
            );
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    let d = ((yy as f64 - y).powi(2) + (xx as f64 - x).powi(2)).sqrt();
                    if d <= half {
                        vessel[yy * w + xx] = 1;
                    }
                }
            }
        }
    }

    let mut image = Vec::with_capacity(h * w * 3);
    let mut label = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let r = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
            let inside = r <= radius;
            let v = inside && vessel[y * w + x] == 1;
            let shade = 1.0 - 0.35 * (r / radius).min(1.0);
            let base = if inside {
                [0.75 * shade, 0.45 * shade, 0.2 * shade]
            } else {
                [0.02, 0.02, 0.02]
            };
            for (c, b) in base.iter().enumerate() {
                let darken = if v { [0.55, 0.35, 0.6][c] } else { 1.0 };
                let noise = spec.noise * (rng.gen::<f64>() - 0.5) * 2.0;
                image.push(((b * darken + noise).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            label.push(if v { 255 } else { 0 });
            mask.push(if inside { 255 } else { 0 });
        }
    }
    let gray = |pixels| Raster {
        width: w,
        height: h,
        channels: 1,
        max_value: 255,
        pixels,
    };
    SynthRasters {
        image: Raster {
            width: w,
            height: h,
            channels: 3,
            max_value: 255,
            pixels: image,
        },
        label: gray(label),
        mask: gray(mask),
    }
}

pub fn synth_sample<T: Real>(spec: &SynthSpec, seed: u64) -> Sample<T> {
    let r = synth_rasters(spec, seed);
    Sample {
        id: format!("synth_{seed}"),
        image: r.image.to_tensor(),
        label: r.label.to_tensor(),
        fov_mask: Some(r.mask.to_tensor()),
    }
}

/// Writes `count` samples as `images/NN.ppm`, `labels/NN.pgm`, `masks/NN.pgm`.
pub fn write_synthetic_dataset(
    root: &Path,
    spec: &SynthSpec,
    count: usize,
    seed: u64,
) -> Result<()> {
    for dir in ["images", "labels", "masks"] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    for i in 0..count {
        let r = synth_rasters(spec, seed.wrapping_add(i as u64));
        let stem = format!("{:02}", i + 1);
        write_pnm(&root.join("images").join(format!("{stem}.ppm")), &r.image)?;
        write_pnm(&root.join("labels").join(format!("{stem}.pgm")), &r.label)?;
        write_pnm(&root.join("masks").join(format!("{stem}.pgm")), &r.mask)?;
    }
    Ok(())
}

/// Crops a `(N, C, H, W)` tensor to the window at `(top, left)`.
pub fn crop_window<T: Real>(
    x: &Tensor<T>,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if top + height > s.h || left + width > s.w || height == 0 || width == 0 {
        return Err(Error::shape(
            "crop_window",
            format!(
                "window {height}x{width} at ({top}, {left}) exceeds {}x{}",
                s.h, s.w
            ),
        ));
    }
    Ok(Tensor::from_fn([s.n, s.c, height, width], |n, c, h, w| {
        x.at(n, c, top + h, left + w)
    }))
}
