//! Two-view augmentation with replayable parameter records.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::sample_bilinear;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AugmentConfig {
    pub output_size: u32,
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale_p: f64,
    /// Blur probability for the first and second view.
    pub blur_p: (f64, f64),
    pub blur_sigma: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            output_size: 256,
            crop_scale: (0.32, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            grayscale_p: 0.2,
            blur_p: (1.0, 0.1),
            blur_sigma: (0.1, 2.0),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

/// Everything needed to reproduce one augmented view from its source patch.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AugmentRecord {
    /// `(x, y, width, height)` in source pixels.
    pub crop: (f64, f64, f64, f64),
    pub output_size: u32,
    pub flip: bool,
    pub jitter: Option<Jitter>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedViewPair {
    pub u: RgbImage,
    pub v: RgbImage,
    pub u_record: AugmentRecord,
    pub v_record: AugmentRecord,
    pub seed: u64,
}

fn sample_record(
    rng: &mut ChaCha8Rng,
    cfg: &AugmentConfig,
    w: u32,
    h: u32,
    blur_p: f64,
) -> Result<AugmentRecord> {
    let area = f64::from(w) * f64::from(h);
    let (lr0, lr1) = (cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln());
    let mut crop = None;
    for _ in 0..10 {
        let target = area * rng.random_range(cfg.crop_scale.0..=cfg.crop_scale.1);
        let ratio = rng.random_range(lr0..=lr1).exp();
        let cw = (target * ratio).sqrt().round();
        let ch = (target / ratio).sqrt().round();
        if cw >= 1.0 && ch >= 1.0 && cw <= f64::from(w) && ch <= f64::from(h) {
            let x = rng.random_range(0.0..=f64::from(w) - cw).floor();
            let y = rng.random_range(0.0..=f64::from(h) - ch).floor();
            crop = Some((x, y, cw, ch));
            break;
        }
    }
    // fallback: whole image
    let crop = crop.unwrap_or((0.0, 0.0, f64::from(w), f64::from(h)));
    let flip = rng.random_bool(cfg.flip_p);
    let jitter = if rng.random_bool(cfg.jitter_p) {
        Some(Jitter {
            brightness: rng.random_range(1.0 - cfg.brightness..=1.0 + cfg.brightness),
            contrast: rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast),
            saturation: rng.random_range(1.0 - cfg.saturation..=1.0 + cfg.saturation),
        })
    } else {
        None
    };
    let grayscale = rng.random_bool(cfg.grayscale_p);
    let blur_sigma = if rng.random_bool(blur_p) {
        Some(rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1))
    } else {
        None
    };
    Ok(AugmentRecord {
        crop,
        output_size: cfg.output_size,
        flip,
        jitter,
        grayscale,
        blur_sigma,
    })
}

fn gray(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn gaussian_blur(buf: &mut [[f64; 3]], w: usize, h: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / z).collect();
    let mut tmp = vec![[0.0; 3]; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (ki, k) in kernel.iter().enumerate() {
                let sx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                let p = buf[y * w + sx];
                for c in 0..3 {
                    acc[c] += k * p[c];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (ki, k) in kernel.iter().enumerate() {
                let sy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                let p = tmp[sy * w + x];
                for c in 0..3 {
                    acc[c] += k * p[c];
                }
            }
            buf[y * w + x] = acc;
        }
    }
}

/// Replays a record on a source patch.
pub fn apply_record(patch: &RgbImage, rec: &AugmentRecord) -> Result<RgbImage> {
    let (x0, y0, cw, ch) = rec.crop;
    if !(cw > 0.0 && ch > 0.0) || rec.output_size == 0 {
        return Err(Error::invalid("degenerate crop"));
    }
    let out = rec.output_size;
    let sx = cw / f64::from(out);
    let sy = ch / f64::from(out);
    let flip = rec.flip;
    let cropped = sample_bilinear(patch, out, out, |x, y| {
        let xx = if flip { out - 1 - x } else { x };
        (
            x0 + (f64::from(xx) + 0.5) * sx - 0.5,
            y0 + (f64::from(y) + 0.5) * sy - 0.5,
        )
    });
    let n = out as usize;
    let mut buf: Vec<[f64; 3]> = cropped
        .pixels()
        .map(|p| [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])])
        .collect();
    if let Some(j) = rec.jitter {
        for p in buf.iter_mut() {
            for c in p.iter_mut() {
                *c = (*c * j.brightness).clamp(0.0, 255.0);
            }
        }
        let mean = buf.iter().map(|p| gray(*p)).sum::<f64>() / buf.len() as f64;
        for p in buf.iter_mut() {
            for c in p.iter_mut() {
                *c = ((*c - mean) * j.contrast + mean).clamp(0.0, 255.0);
            }
        }
        for p in buf.iter_mut() {
            let g = gray(*p);
            for c in p.iter_mut() {
                *c = ((*c - g) * j.saturation + g).clamp(0.0, 255.0);
            }
        }
    }
    if rec.grayscale {
        for p in buf.iter_mut() {
            let g = gray(*p);
            *p = [g; 3];
        }
    }
    if let Some(sigma) = rec.blur_sigma {
        gaussian_blur(&mut buf, n, n, sigma);
    }
    let mut img = RgbImage::new(out, out);
    for (dst, src) in img.pixels_mut().zip(&buf) {
        *dst = Rgb([
            src[0].round().clamp(0.0, 255.0) as u8,
            src[1].round().clamp(0.0, 255.0) as u8,
            src[2].round().clamp(0.0, 255.0) as u8,
        ]);
    }
    Ok(img)
}

/// Two independently augmented views of one patch, reproducible from `seed`.
pub fn augment_pair(patch: &RgbImage, seed: u64, cfg: &AugmentConfig) -> Result<AugmentedViewPair> {
    let (w, h) = patch.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::invalid("degenerate crop: empty patch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u_record = sample_record(&mut rng, cfg, w, h, cfg.blur_p.0)?;
    let v_record = sample_record(&mut rng, cfg, w, h, cfg.blur_p.1)?;
    Ok(AugmentedViewPair {
        u: apply_record(patch, &u_record)?,
        v: apply_record(patch, &v_record)?,
        u_record,
        v_record,
        seed,
    })
}

/// Views without augmentation (both equal to the patch), e.g. for tests.
pub fn identity_pair(patch: &RgbImage) -> AugmentedViewPair {
    let (w, h) = patch.dimensions();
    let rec = AugmentRecord {
        crop: (0.0, 0.0, f64::from(w), f64::from(h)),
        output_size: w,
        flip: false,
        jitter: None,
        grayscale: false,
        blur_sigma: None,
    };
    AugmentedViewPair {
        u: patch.clone(),
        v: patch.clone(),
        u_record: rec.clone(),
        v_record: rec,
        seed: 0,
    }
}
