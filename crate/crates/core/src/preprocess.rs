//! Source image → 40x-equivalent 256×256 patches.
//!
//! Images are rescaled to the 40x reference, cut on a non-overlapping grid
//! anchored at the origin, and edge tiles are zero-padded on the bottom/right
//! when the padding along each axis is at most half a tile (dropped otherwise).
//! An optional relevance scorer keeps the top-k patches per image.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{list_source_images, DatasetRecord};
use crate::error::{Error, Result};

pub const TILE: u32 = 256;
pub const TARGET_MAGNIFICATION: f64 = 40.0;
pub const DEFAULT_TOPK: usize = 1500;
pub const DEFAULT_MPP_40X: f64 = 0.25;
pub const DEFAULT_REFERENCE_NUCLEUS_UM: f64 = 8.0;
pub const PATCH_INDEX_FILE: &str = "patches.jsonl";
pub const NUCLEI_FILE: &str = "nuclei.json";

#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub source_image_id: String,
    pub grid_row: u32,
    pub grid_col: u32,
    pub pixels: RgbImage,
    /// Largest per-axis share of the tile that is zero padding.
    pub pad_fraction: f64,
    pub valid_rows: u32,
    pub valid_cols: u32,
    pub effective_magnification: f64,
    pub relevance: Option<f64>,
}

impl PatchRecord {
    pub fn file_name(&self) -> String {
        patch_file_name(&self.source_image_id, self.grid_row, self.grid_col)
    }

    pub fn meta(&self) -> PatchMeta {
        PatchMeta {
            source_image_id: self.source_image_id.clone(),
            grid_row: self.grid_row,
            grid_col: self.grid_col,
            pad_fraction: self.pad_fraction,
            valid_rows: self.valid_rows,
            valid_cols: self.valid_cols,
            effective_magnification: self.effective_magnification,
            relevance: self.relevance,
            file: self.file_name(),
        }
    }
}

/// One line of `patches.jsonl`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PatchMeta {
    pub source_image_id: String,
    pub grid_row: u32,
    pub grid_col: u32,
    pub pad_fraction: f64,
    pub valid_rows: u32,
    pub valid_cols: u32,
    pub effective_magnification: f64,
    #[serde(default)]
    pub relevance: Option<f64>,
    pub file: String,
}

pub fn patch_file_name(image_id: &str, row: u32, col: u32) -> String {
    format!("{image_id}_r{row}_c{col}.png")
}

/// Number of tiles kept along an axis of length `n`.
pub fn tiles_along(n: u32, tile: u32) -> u32 {
    let full = n / tile;
    let rem = n % tile;
    full + u32::from(rem > 0 && 2 * (tile - rem) <= tile)
}

pub fn tile_image(image_id: &str, image: &RgbImage, tile: u32) -> Result<Vec<PatchRecord>> {
    if tile == 0 {
        return Err(Error::invalid("tile size must be positive"));
    }
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::invalid(format!("image {image_id} is empty")));
    }
    let rows = tiles_along(h, tile);
    let cols = tiles_along(w, tile);
    let mut out = Vec::with_capacity((rows * cols) as usize);
    for r in 0..rows {
        for c in 0..cols {
            let y0 = r * tile;
            let x0 = c * tile;
            let valid_rows = tile.min(h - y0);
            let valid_cols = tile.min(w - x0);
            let mut pixels = RgbImage::new(tile, tile);
            for y in 0..valid_rows {
                for x in 0..valid_cols {
                    pixels.put_pixel(x, y, *image.get_pixel(x0 + x, y0 + y));
                }
            }
            let pad = (tile - valid_rows).max(tile - valid_cols);
            out.push(PatchRecord {
                source_image_id: image_id.to_string(),
                grid_row: r,
                grid_col: c,
                pixels,
                pad_fraction: f64::from(pad) / f64::from(tile),
                valid_rows,
                valid_cols,
                effective_magnification: TARGET_MAGNIFICATION,
                relevance: None,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct MagnificationEstimate {
    pub mean_nucleus_px: f64,
    pub reference_nucleus_um: f64,
    pub mpp: f64,
    pub scale_factor_to_40x: f64,
}

/// Microns per pixel from measured nucleus diameters and a reference size.
pub fn infer_magnification(
    nucleus_diameters_px: &[f64],
    reference_nucleus_um: f64,
    mpp_40x_reference: f64,
) -> Result<MagnificationEstimate> {
    if nucleus_diameters_px.is_empty() {
        return Err(Error::invalid("no nucleus measurements"));
    }
    if let Some(bad) = nucleus_diameters_px
        .iter()
        .find(|d| !(d.is_finite() && **d > 0.0))
    {
        return Err(Error::invalid(format!("nucleus diameter {bad} is not positive")));
    }
    for (name, v) in [
        ("reference_nucleus_um", reference_nucleus_um),
        ("mpp_40x_reference", mpp_40x_reference),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::invalid(format!("{name} must be positive, got {v}")));
        }
    }
    let mean = nucleus_diameters_px.iter().sum::<f64>() / nucleus_diameters_px.len() as f64;
    let mpp = reference_nucleus_um / mean;
    Ok(MagnificationEstimate {
        mean_nucleus_px: mean,
        reference_nucleus_um,
        mpp,
        scale_factor_to_40x: mpp / mpp_40x_reference,
    })
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn rescale_to_40x(image: &RgbImage, scale_factor: f64) -> Result<RgbImage> {
    if !(scale_factor.is_finite() && scale_factor > 0.0) {
        return Err(Error::invalid(format!("scale factor {scale_factor} must be positive")));
    }
    if scale_factor == 1.0 {
        return Ok(image.clone());
    }
    let (w, h) = image.dimensions();
    let ow = (f64::from(w) * scale_factor).round() as u32;
    let oh = (f64::from(h) * scale_factor).round() as u32;
    if ow == 0 || oh == 0 {
        return Err(Error::invalid(format!(
            "rescaling {w}x{h} by {scale_factor} gives an empty image"
        )));
    }
    Ok(resize_bilinear(image, ow, oh))
}

pub(crate) fn resize_bilinear(image: &RgbImage, ow: u32, oh: u32) -> RgbImage {
    let (w, h) = image.dimensions();
    let sx = f64::from(w) / f64::from(ow);
    let sy = f64::from(h) / f64::from(oh);
    sample_bilinear(image, ow, oh, |x, y| {
        ((f64::from(x) + 0.5) * sx - 0.5, (f64::from(y) + 0.5) * sy - 0.5)
    })
}

/// Fills an `ow×oh` image by bilinearly sampling `image` at source coordinates
/// returned by `map`.
pub(crate) fn sample_bilinear(
    image: &RgbImage,
    ow: u32,
    oh: u32,
    map: impl Fn(u32, u32) -> (f64, f64),
) -> RgbImage {
    let (w, h) = image.dimensions();
    let maxx = f64::from(w - 1);
    let maxy = f64::from(h - 1);
    let mut out = RgbImage::new(ow, oh);
    for y in 0..oh {
        for x in 0..ow {
            let (fx, fy) = map(x, y);
            let fx = fx.clamp(0.0, maxx);
            let fy = fy.clamp(0.0, maxy);
            let x0 = fx.floor() as u32;
            let y0 = fy.floor() as u32;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let tx = fx - f64::from(x0);
            let ty = fy - f64::from(y0);
            let p00 = image.get_pixel(x0, y0);
            let p01 = image.get_pixel(x1, y0);
            let p10 = image.get_pixel(x0, y1);
            let p11 = image.get_pixel(x1, y1);
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let top = f64::from(p00[ch]) * (1.0 - tx) + f64::from(p01[ch]) * tx;
                let bot = f64::from(p10[ch]) * (1.0 - tx) + f64::from(p11[ch]) * tx;
                px[ch] = (top * (1.0 - ty) + bot * ty).round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(x, y, Rgb(px));
        }
    }
    out
}

/// Relevance model: probability that a patch holds diagnostically useful
/// content.
pub trait Scorer: Sync {
    fn score(&self, patch: &PatchRecord) -> f64;
}

/// Fraction of unpadded pixels darker than a luminance threshold, i.e. not
/// bright slide background.
#[derive(Clone, Copy, Debug)]
pub struct LuminanceScorer {
    pub threshold: f64,
}

impl Default for LuminanceScorer {
    fn default() -> Self {
        Self { threshold: 220.0 }
    }
}

pub fn luminance(p: &Rgb<u8>) -> f64 {
    0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])
}

impl Scorer for LuminanceScorer {
    fn score(&self, patch: &PatchRecord) -> f64 {
        let total = u64::from(patch.valid_rows) * u64::from(patch.valid_cols);
        if total == 0 {
            return 0.0;
        }
        let mut fg = 0u64;
        for y in 0..patch.valid_rows {
            for x in 0..patch.valid_cols {
                if luminance(patch.pixels.get_pixel(x, y)) < self.threshold {
                    fg += 1;
                }
            }
        }
        fg as f64 / total as f64
    }
}

/// Keeps the `k` highest-scoring patches, highest first; ties go to the
/// smaller `(grid_row, grid_col)`.
pub fn relevance_topk(
    patches: Vec<PatchRecord>,
    scorer: &dyn Scorer,
    k: usize,
) -> Result<Vec<PatchRecord>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut scored = Vec::with_capacity(patches.len());
    for mut p in patches {
        let s = scorer.score(&p);
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::invalid(format!(
                "scorer returned {s} for {} outside [0, 1]",
                p.file_name()
            )));
        }
        p.relevance = Some(s);
        scored.push((s, p));
    }
    scored.sort_by(|(sa, a), (sb, b)| {
        sb.total_cmp(sa)
            .then((a.grid_row, a.grid_col).cmp(&(b.grid_row, b.grid_col)))
    });
    scored.truncate(k);
    Ok(scored.into_iter().map(|(_, p)| p).collect())
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PreprocessOptions {
    pub tile: u32,
    pub topk: usize,
    pub mpp_40x: f64,
    pub reference_nucleus_um: f64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            tile: TILE,
            topk: DEFAULT_TOPK,
            mpp_40x: DEFAULT_MPP_40X,
            reference_nucleus_um: DEFAULT_REFERENCE_NUCLEUS_UM,
        }
    }
}

/// Rescale → tile → top-k for one image already in memory.
pub fn preprocess_image(
    image_id: &str,
    image: &RgbImage,
    scale_to_40x: f64,
    scorer: &dyn Scorer,
    opts: &PreprocessOptions,
) -> Result<Vec<PatchRecord>> {
    let rescaled = rescale_to_40x(image, scale_to_40x)?;
    let patches = tile_image(image_id, &rescaled, opts.tile)?;
    let mut kept = relevance_topk(patches, scorer, opts.topk)?;
    let magnification = TARGET_MAGNIFICATION;
    for p in &mut kept {
        p.effective_magnification = magnification;
    }
    Ok(kept)
}

fn load_nuclei(root: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let path = root.join(NUCLEI_FILE);
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    crate::container::read_json(&path)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    Ok(img.to_rgb8())
}

/// Preprocesses every source image of a dataset into `out_dir`, writing PNG
/// patches and `patches.jsonl`. Images are processed in parallel; output order
/// is by image id then grid position regardless of worker count.
pub fn preprocess_dataset(
    record: &DatasetRecord,
    out_dir: &Path,
    scorer: &dyn Scorer,
    opts: &PreprocessOptions,
) -> Result<Vec<PatchMeta>> {
    let images = list_source_images(record)?;
    if images.is_empty() {
        return Err(Error::invalid(format!(
            "no images under {}",
            record.root_path.display()
        )));
    }
    let nuclei = load_nuclei(&record.root_path)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let per_image: Vec<Result<Vec<PatchMeta>>> = images
        .par_iter()
        .map(|(id, path)| {
            let scale = match (record.magnification, nuclei.get(id)) {
                (Some(m), _) => m.scale_to_40x(opts.mpp_40x),
                (None, Some(d)) => {
                    infer_magnification(d, opts.reference_nucleus_um, opts.mpp_40x)?
                        .scale_factor_to_40x
                }
                (None, None) => {
                    return Err(Error::invalid(format!(
                        "{}: no magnification and no nucleus measurements for {id}",
                        record.name
                    )))
                }
            };
            let img = load_rgb(path)?;
            let mut patches = preprocess_image(id, &img, scale, scorer, opts)?;
            patches.sort_by_key(|p| (p.grid_row, p.grid_col));
            let mut metas = Vec::with_capacity(patches.len());
            for p in &patches {
                let file = out_dir.join(p.file_name());
                p.pixels.save(&file).map_err(|e| Error::image(&file, e))?;
                metas.push(p.meta());
            }
            Ok(metas)
        })
        .collect();
    let mut all = Vec::new();
    for r in per_image {
        all.extend(r?);
    }
    write_patch_index(out_dir, &all)?;
    Ok(all)
}

pub fn write_patch_index(dir: &Path, metas: &[PatchMeta]) -> Result<PathBuf> {
    let path = dir.join(PATCH_INDEX_FILE);
    let mut buf = Vec::new();
    for m in metas {
        serde_json::to_writer(&mut buf, m).map_err(|e| Error::json(&path, e))?;
        buf.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    crate::container::atomic_write(&path, &buf)?;
    Ok(path)
}

pub fn read_patch_index(dir: &Path) -> Result<Vec<PatchMeta>> {
    let path = dir.join(PATCH_INDEX_FILE);
    if !path.exists() {
        return Err(Error::MissingPath(path));
    }
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(&path, e))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Pixel-by-pixel oracle: walk every grid cell and keep it iff it touches
    /// the image and its per-axis padding is at most half a tile.
    fn oracle_count(h: u32, w: u32, tile: u32) -> u32 {
        let mut n = 0;
        let mut y0 = 0;
        while y0 < h {
            let mut x0 = 0;
            while x0 < w {
                let mut covered_rows = 0;
                for y in y0..y0 + tile {
                    covered_rows += u32::from(y < h);
                }
                let mut covered_cols = 0;
                for x in x0..x0 + tile {
                    covered_cols += u32::from(x < w);
                }
                if 2 * (tile - covered_rows) <= tile && 2 * (tile - covered_cols) <= tile {
                    n += 1;
                }
                x0 += tile;
            }
            y0 += tile;
        }
        n
    }

    #[test]
    fn spec_tiling_cases() {
        for (side, expected) in [(512, 4), (600, 4), (456, 4), (300, 1)] {
            let img = RgbImage::from_pixel(side, side, Rgb([200, 100, 50]));
            let patches = tile_image("x", &img, 256).unwrap();
            assert_eq!(patches.len(), expected, "side {side}");
            assert_eq!(oracle_count(side, side, 256) as usize, expected);
        }
    }

    #[test]
    fn padded_region_is_zero_and_pad_fraction_bounded() {
        let img = RgbImage::from_pixel(456, 300, Rgb([9, 9, 9]));
        let patches = tile_image("x", &img, 256).unwrap();
        assert_eq!(patches.len(), 2);
        let edge = &patches[1];
        assert_eq!((edge.valid_rows, edge.valid_cols), (256, 200));
        assert!((edge.pad_fraction - 56.0 / 256.0).abs() < 1e-12);
        assert_eq!(edge.pixels.get_pixel(199, 10), &Rgb([9, 9, 9]));
        for y in 0..256 {
            for x in 200..256 {
                assert_eq!(edge.pixels.get_pixel(x, y), &Rgb([0, 0, 0]));
            }
        }
        assert!(patches.iter().all(|p| p.pad_fraction <= 0.5));
    }

    #[test]
    fn tiling_errors() {
        assert!(tile_image("x", &RgbImage::new(0, 10), 256).is_err());
        assert!(tile_image("x", &RgbImage::new(10, 10), 0).is_err());
    }

    #[test]
    fn magnification_examples() {
        let m = infer_magnification(&[32.0, 32.0], 8.0, 0.25).unwrap();
        assert_eq!(m.mpp, 0.25);
        assert_eq!(m.scale_factor_to_40x, 1.0);
        let m = infer_magnification(&[16.0], 8.0, 0.25).unwrap();
        assert_eq!(m.mpp, 0.5);
        assert_eq!(m.scale_factor_to_40x, 2.0);
        assert!(infer_magnification(&[], 8.0, 0.25).is_err());
        assert!(infer_magnification(&[3.0, -1.0], 8.0, 0.25).is_err());
    }

    #[test]
    fn rescale_shapes_and_identity() {
        let img = RgbImage::from_fn(100, 100, |x, y| Rgb([(x * 2) as u8, (y * 2) as u8, 7]));
        assert_eq!(rescale_to_40x(&img, 1.0).unwrap(), img);
        assert_eq!(rescale_to_40x(&img, 2.0).unwrap().dimensions(), (200, 200));
        assert_eq!(rescale_to_40x(&img, 0.5).unwrap().dimensions(), (50, 50));
        assert!(rescale_to_40x(&img, 0.001).is_err());
        assert!(rescale_to_40x(&img, 0.0).is_err());
    }

    fn patch_with(row: u32, col: u32, value: u8) -> PatchRecord {
        PatchRecord {
            source_image_id: "s".into(),
            grid_row: row,
            grid_col: col,
            pixels: RgbImage::from_pixel(4, 4, Rgb([value; 3])),
            pad_fraction: 0.0,
            valid_rows: 4,
            valid_cols: 4,
            effective_magnification: 40.0,
            relevance: None,
        }
    }

    struct Fixed(f64);
    impl Scorer for Fixed {
        fn score(&self, _: &PatchRecord) -> f64 {
            self.0
        }
    }

    #[test]
    fn topk_clamps_and_rejects_bad_scores() {
        let patches: Vec<_> = (0..10).map(|i| patch_with(0, i, 0)).collect();
        let kept = relevance_topk(patches.clone(), &LuminanceScorer::default(), 1500).unwrap();
        assert_eq!(kept.len(), 10);
        assert!(relevance_topk(patches.clone(), &Fixed(1.5), 3).is_err());
        assert!(relevance_topk(patches, &Fixed(0.5), 0).is_err());
    }

    #[test]
    fn luminance_scorer_ignores_padding() {
        let mut p = patch_with(0, 0, 255);
        // top-left 2x2 valid region, dark; padded remainder is zero (dark) too
        p.valid_rows = 2;
        p.valid_cols = 2;
        for y in 0..2 {
            for x in 0..2 {
                p.pixels.put_pixel(x, y, Rgb([250, 250, 250]));
            }
        }
        assert_eq!(LuminanceScorer::default().score(&p), 0.0);
    }
}
