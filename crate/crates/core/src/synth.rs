//! Synthetic data: two-texture patches for pretraining checks, Gaussian MIL
//! bags, and a small on-disk fixture for the CLI.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::datasets::{DatasetRecord, LabelKind, Magnification, Organ, Registry, Role};
use crate::error::{Error, Result};
use crate::mil::FeatureBag;

/// Parameters of the two-texture generator. Both classes cover the same ink
/// fraction; class 0 objects are round, class 1 objects are elongated with
/// random orientation.
#[derive(Clone, Debug)]
pub struct TextureSpec {
    pub size: u32,
    /// Objects are added until this fraction of pixels is covered.
    pub ink_fraction: f64,
    pub radius: (f64, f64),
    pub elongation: (f64, f64),
    /// Scales the per-image saturation/brightness spread (0 = fixed colours).
    pub colour_spread: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            size: 256,
            ink_fraction: 0.12,
            radius: (10.0, 13.0),
            elongation: (4.0, 6.0),
            colour_spread: 1.0,
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(1.0)) * 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// One textured patch of the given class.
pub fn texture_patch(class: usize, seed: u64, spec: &TextureSpec) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.size as usize;
    let k = spec.colour_spread;
    let mut spread = |mid: f64, half: f64| mid + k * half * rng.random_range(-1.0..=1.0);
    let bg = hsv(0.92, spread(0.175, 0.125), spread(0.85, 0.15));
    let fg = hsv(0.78, spread(0.55, 0.25), spread(0.4, 0.2));
    let mut ink = vec![false; n * n];
    let mut inked = 0usize;
    let target = (spec.ink_fraction * (n * n) as f64) as usize;
    while inked < target {
        let r = rng.random_range(spec.radius.0..spec.radius.1);
        let (a, b) = if class == 0 {
            (r, r)
        } else {
            let e: f64 = rng.random_range(spec.elongation.0..spec.elongation.1);
            (r * e.sqrt(), r / e.sqrt())
        };
        let theta = rng.random_range(0.0..PI);
        let (cx, cy) = (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64));
        let (ct, st) = (theta.cos(), theta.sin());
        let reach = a.max(b).ceil() as isize + 1;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (x, y) = (cx as isize + dx, cy as isize + dy);
                if x < 0 || y < 0 || x >= n as isize || y >= n as isize {
                    continue;
                }
                let px = x as f64 + 0.5 - cx;
                let py = y as f64 + 0.5 - cy;
                let u = px * ct + py * st;
                let v = -px * st + py * ct;
                let i = y as usize * n + x as usize;
                if !ink[i] && (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                    ink[i] = true;
                    inked += 1;
                }
            }
        }
    }
    let noise = 0.03;
    RgbImage::from_fn(spec.size, spec.size, |x, y| {
        let base = if ink[y as usize * n + x as usize] { fg } else { bg };
        let e: f64 = rng.random_range(-noise..=noise);
        Rgb(base.map(|c| ((c + e).clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// `n_unique` patches (alternating classes), each repeated `duplicates` times.
pub fn texture_corpus(n_unique: usize, duplicates: usize, seed: u64, spec: &TextureSpec) -> (Vec<RgbImage>, Vec<usize>) {
    let mut images = Vec::with_capacity(n_unique * duplicates);
    let mut labels = Vec::with_capacity(n_unique * duplicates);
    for i in 0..n_unique {
        let class = i % 2;
        let img = texture_patch(class, crate::derive_seed(seed, &[i as u64]), spec);
        for _ in 0..duplicates {
            images.push(img.clone());
            labels.push(class);
        }
    }
    (images, labels)
}

/// MIL bags: every instance is `N(0, I)`; a positive bag has exactly one
/// instance replaced by a draw from `N(shift·1, I)`.
pub fn gaussian_mil_bags(n_bags: usize, bag_size: usize, dim: usize, shift: f64, seed: u64) -> Vec<FeatureBag> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_bags)
        .map(|i| {
            let label = i % 2;
            let mut f = Array2::from_shape_simple_fn((bag_size, dim), || {
                let z: f64 = StandardNormal.sample(&mut rng);
                z as f32
            });
            if label == 1 {
                let k = rng.random_range(0..bag_size);
                f.row_mut(k).mapv_inplace(|v| v + shift as f32);
            }
            FeatureBag {
                image_id: format!("bag{i:04}"),
                features: f,
                label: Some(label),
            }
        })
        .collect()
}

/// Cytology-like source image: pale background with stained round or
/// irregular nuclei, class 1 having larger, darker, elongated nuclei.
pub fn cell_image(width: u32, height: u32, class: usize, seed: u64) -> RgbImage {
    let spec = TextureSpec {
        size: 0,
        ink_fraction: 0.0,
        radius: if class == 0 { (6.0, 9.0) } else { (9.0, 14.0) },
        elongation: (2.0, 3.5),
        colour_spread: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as usize, height as usize);
    let mut buf: Vec<[f64; 3]> = vec![[0.93, 0.88, 0.9]; w * h];
    let count = (w * h) / 2500;
    for _ in 0..count {
        let r = rng.random_range(spec.radius.0..spec.radius.1);
        let e: f64 = if class == 0 { 1.0 } else { rng.random_range(spec.elongation.0..spec.elongation.1) };
        let (a, b) = (r * e.sqrt(), r / e.sqrt());
        let theta = rng.random_range(0.0..PI);
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let stain = if class == 0 { [0.45, 0.3, 0.6] } else { [0.3, 0.15, 0.45] };
        let (ct, st) = (theta.cos(), theta.sin());
        let reach = a.max(b).ceil() as isize + 1;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (x, y) = (cx as isize + dx, cy as isize + dy);
                if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                    continue;
                }
                let px = x as f64 + 0.5 - cx;
                let py = y as f64 + 0.5 - cy;
                let u = px * ct + py * st;
                let v = -px * st + py * ct;
                if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                    buf[y as usize * w + x as usize] = stain;
                }
            }
        }
    }
    RgbImage::from_fn(width, height, |x, y| {
        let p = buf[y as usize * w + x as usize];
        Rgb(p.map(|c| (c * 255.0).round() as u8))
    })
}

/// Writes a small evaluation fixture: `images/` with `n_images` PNGs, a
/// registry `datasets.json` describing them, and `labels.csv`. Returns the
/// label map.
pub fn write_fixture(root: &Path, n_images: usize, seed: u64) -> Result<BTreeMap<String, usize>> {
    if n_images < 2 {
        return Err(Error::invalid("fixture needs at least 2 images"));
    }
    let images = root.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut labels = BTreeMap::new();
    let mut csv = String::from("image_id,label\n");
    for i in 0..n_images {
        let class = i % 2;
        let id = format!("img{i:03}");
        let img = cell_image(300 + (i as u32 % 3) * 100, 320, class, crate::derive_seed(seed, &[i as u64]));
        let path = images.join(format!("{id}.png"));
        img.save(&path).map_err(|e| Error::image(&path, e))?;
        csv.push_str(&format!("{id},{class}\n"));
        labels.insert(id, class);
    }
    crate::container::atomic_write(&root.join("labels.csv"), csv.as_bytes())?;
    let record = DatasetRecord {
        name: "toy".into(),
        organ: Organ::Other,
        label_kind: LabelKind::Binary,
        roles: [Role::Pretrain, Role::Evaluate].into_iter().collect(),
        root_path: images,
        magnification: Some(Magnification::Objective(40.0)),
        class_names: vec!["benign".into(), "malignant".into()],
        split: Some(crate::datasets::DisjointSplit {
            held_out_fraction: Some(0.5),
            held_out_count: None,
            held_out_ids: None,
            seed,
        }),
    };
    let mut reg = Registry::default();
    reg.register(record)?;
    reg.datasets[0].root_path = "images".into();
    reg.save(&root.join(crate::datasets::REGISTRY_FILE))?;
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn texture_is_deterministic_and_classes_balance_ink() {
        let spec = TextureSpec::default();
        assert_eq!(texture_patch(1, 5, &spec), texture_patch(1, 5, &spec));
        let (imgs, labels) = texture_corpus(4, 3, 1, &spec);
        assert_eq!(imgs.len(), 12);
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 6);
        assert_eq!(imgs[0], imgs[2]);
    }

    #[test]
    fn positive_bags_have_one_shifted_instance() {
        let bags = gaussian_mil_bags(4, 20, 8, 100.0, 3);
        for b in &bags {
            let big = b.features.rows().into_iter().filter(|r| r.sum() > 400.0).count();
            assert_eq!(big, b.label.unwrap());
        }
    }
}
