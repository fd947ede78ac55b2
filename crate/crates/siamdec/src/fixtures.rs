//! Seeded synthetic RGB-thermal scenes: one elliptical object that differs
//! from a textured background in colour and in temperature.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub struct SyntheticPair {
    pub id: String,
    pub rgb: RgbImage,
    /// Single-channel, as thermal cameras write it.
    pub thermal: GrayImage,
    pub gt: GrayImage,
}

pub fn synthetic_pair(index: usize, width: u32, height: u32, seed: u64) -> SyntheticPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (w, h) = (width as f64, height as f64);
    let (cx, cy) = (rng.random_range(0.3..0.7) * w, rng.random_range(0.3..0.7) * h);
    let (rx, ry) = (rng.random_range(0.12..0.28) * w, rng.random_range(0.12..0.28) * h);
    let bg: [f64; 3] = [rng.random_range(0.1..0.5), rng.random_range(0.1..0.5), rng.random_range(0.1..0.5)];
    let fg: [f64; 3] = bg.map(|c| (c + rng.random_range(0.35..0.5)).min(1.0));
    let (t_bg, t_fg) = (rng.random_range(0.15..0.35), rng.random_range(0.65..0.9));
    let mut rgb = RgbImage::new(width, height);
    let mut thermal = GrayImage::new(width, height);
    let mut gt = GrayImage::new(width, height);
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for y in 0..height {
        for x in 0..width {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
            let inside = dx * dx + dy * dy <= 1.0;
            let stripe = 0.06 * ((x as f64 * 0.7 + y as f64 * 0.3).sin());
            let base = if inside { fg } else { bg };
            let px = base.map(|c| byte(c + stripe + rng.random_range(-0.05..0.05)));
            rgb.put_pixel(x, y, Rgb(px));
            let t = if inside { t_fg } else { t_bg };
            thermal.put_pixel(x, y, Luma([byte(t + rng.random_range(-0.05..0.05))]));
            gt.put_pixel(x, y, Luma([if inside { 255 } else { 0 }]));
        }
    }
    SyntheticPair { id: format!("{index:04}"), rgb, thermal, gt }
}

/// Write `n` scenes in the `RGB/ T/ GT/` layout; returns their ids.
pub fn write_synthetic_dataset(root: &Path, n: usize, width: u32, height: u32, seed: u64) -> Result<Vec<String>> {
    for dir in ["RGB", "T", "GT"] {
        fs::create_dir_all(root.join(dir)).map_err(|e| Error::io(root.join(dir), e))?;
    }
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let p = synthetic_pair(i, width, height, seed);
        let save = |img: &dyn Fn(&Path) -> image::ImageResult<()>, dir: &str| {
            let path = root.join(dir).join(format!("{}.png", p.id));
            img(&path).map_err(|source| Error::Image { path, source })
        };
        save(&|path| p.rgb.save(path), "RGB")?;
        save(&|path| p.thermal.save(path), "T")?;
        save(&|path| p.gt.save(path), "GT")?;
        ids.push(p.id);
    }
    Ok(ids)
}
