//! Frozen-encoder feature extraction: one CLS embedding per patch, grouped into
//! per-image bags.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use crate::backbone::{embed_cls, ModelWeights};
use crate::datasets::{write_feature_store, FeatureStore};
use crate::error::{Error, Result};
use crate::mil::FeatureBag;
use crate::preprocess::{load_rgb, read_patch_index, PatchMeta};

/// Patch index grouped by source image, images sorted by id and patches by
/// grid position.
pub fn group_patches(metas: &[PatchMeta]) -> BTreeMap<String, Vec<PatchMeta>> {
    let mut groups: BTreeMap<String, Vec<PatchMeta>> = BTreeMap::new();
    for m in metas {
        groups.entry(m.source_image_id.clone()).or_default().push(m.clone());
    }
    for v in groups.values_mut() {
        v.sort_by_key(|m| (m.grid_row, m.grid_col));
    }
    groups
}

fn embed_image(encoder: &ModelWeights, dir: &Path, id: &str, patches: &[PatchMeta]) -> Result<Array2<f32>> {
    let d = encoder.config.embed_dim;
    let mut rows = Array2::<f32>::zeros((patches.len(), d));
    for (i, m) in patches.iter().enumerate() {
        let img = load_rgb(&dir.join(&m.file))?;
        let cls = embed_cls(encoder, &img)?;
        if cls.len() != d {
            return Err(Error::shape(format!("{id}: embedding dim {} != {d}", cls.len())));
        }
        for (j, v) in cls.into_iter().enumerate() {
            rows[[i, j]] = v as f32;
        }
    }
    Ok(rows)
}

/// Bags for every image in `patches_dir`. With `parallel`, images are spread
/// over the rayon pool; the result is identical either way.
pub fn extract_bags(
    encoder: &ModelWeights,
    patches_dir: &Path,
    labels: Option<&BTreeMap<String, usize>>,
    parallel: bool,
) -> Result<Vec<FeatureBag>> {
    encoder.check_finite()?;
    let groups: Vec<(String, Vec<PatchMeta>)> = group_patches(&read_patch_index(patches_dir)?).into_iter().collect();
    if groups.is_empty() {
        return Err(Error::invalid(format!("no patches listed in {}", patches_dir.display())));
    }
    let make = |(id, metas): &(String, Vec<PatchMeta>)| -> Result<FeatureBag> {
        let features = embed_image(encoder, patches_dir, id, metas)?;
        FeatureBag::new(id.clone(), features, labels.and_then(|l| l.get(id).copied()))
    };
    if parallel {
        groups.par_iter().map(make).collect()
    } else {
        groups.iter().map(make).collect()
    }
}

/// Extracts and writes the feature store at `out_stem`.
pub fn extract_features(
    encoder: &ModelWeights,
    encoder_id: &str,
    patches_dir: &Path,
    labels: Option<&BTreeMap<String, usize>>,
    out_stem: &Path,
) -> Result<FeatureStore> {
    let bags = extract_bags(encoder, patches_dir, labels, true)?;
    write_feature_store(&bags, out_stem, encoder_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ViTConfig;
    use crate::datasets::read_feature_store;
    use crate::preprocess::{tile_image, write_patch_index};
    use image::{Rgb, RgbImage};

    fn fixture(dir: &Path) {
        let mut metas = Vec::new();
        for i in 0..3u8 {
            // 5 tiles of 16px: 80×16 image.
            let img = RgbImage::from_fn(80, 16, |x, y| Rgb([i * 40, (x * 3) as u8, (y * 7) as u8]));
            for p in tile_image(&format!("im{i}"), &img, 16).unwrap() {
                p.pixels.save(dir.join(p.file_name())).unwrap();
                metas.push(p.meta());
            }
        }
        metas.reverse();
        write_patch_index(dir, &metas).unwrap();
    }

    fn encoder() -> ModelWeights {
        let cfg = ViTConfig {
            image_size: 16,
            patch_size: 8,
            depth: 1,
            embed_dim: 64,
            heads: 2,
            head_hidden_dim: 8,
            head_bottleneck_dim: 8,
            head_out_dim: 8,
            ..ViTConfig::vit_tiny_desk()
        };
        ModelWeights::init(&cfg, 2).unwrap().backbone_only()
    }

    #[test]
    fn three_images_fifteen_rows_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let enc = encoder();
        let labels = BTreeMap::from([("im0".to_string(), 1usize)]);
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let store = extract_features(&enc, "enc", dir.path(), Some(&labels), &a).unwrap();
        extract_features(&enc, "enc", dir.path(), Some(&labels), &b).unwrap();
        assert_eq!(store.manifest.entries.len(), 3);
        assert_eq!(store.manifest.total_rows, 15);
        assert_eq!(store.manifest.dim, 64);
        let read = |s: &Path| std::fs::read(crate::container::blob_path(s, crate::container::Dtype::F32)).unwrap();
        assert_eq!(read(&a), read(&b));
        let bags = read_feature_store(&a).unwrap();
        assert_eq!(bags[0].label, Some(1));
        assert_eq!(bags[1].label, None);
    }

    #[test]
    fn parallel_matches_serial() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let enc = encoder();
        let par = extract_bags(&enc, dir.path(), None, true).unwrap();
        let ser = extract_bags(&enc, dir.path(), None, false).unwrap();
        assert_eq!(par, ser);
        // Row i of a bag is the embedding of the i-th patch in grid order.
        let img = load_rgb(&dir.path().join("im2_r0_c3.png")).unwrap();
        let direct = embed_cls(&enc, &img).unwrap();
        let row: Vec<f32> = ser[2].features.row(3).to_vec();
        assert_eq!(row, direct.iter().map(|&v| v as f32).collect::<Vec<_>>());
    }

    #[test]
    fn unreadable_patch_errors() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        std::fs::write(dir.path().join("im1_r0_c0.png"), b"not a png").unwrap();
        assert!(extract_bags(&encoder(), dir.path(), None, true).is_err());
    }
}
