//! Last-layer CLS attention heatmaps and 2-D embedding projections.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward, ModelWeights};
use crate::error::{Error, Result};

/// Grids whose max − min falls below this are treated as constant.
pub const CONSTANT_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadSelection {
    #[default]
    Mean,
    Head(usize),
}

impl std::fmt::Display for HeadSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HeadSelection::Mean => write!(f, "mean"),
            HeadSelection::Head(h) => write!(f, "head{h}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub image_id: String,
    pub head: HeadSelection,
    /// `[G×G]`, values in [0, 1].
    pub grid: Array2<f64>,
    /// Attention was (numerically) uniform; the grid is set to 0.5.
    pub constant: bool,
    /// Heatmap blended over the input patch, at the patch's resolution.
    pub overlay: RgbImage,
}

/// Min-max normalizes in place; returns false (and fills 0.5) for a constant grid.
pub fn normalize_grid(grid: &mut Array2<f64>) -> bool {
    let lo = grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > CONSTANT_EPS) {
        grid.fill(0.5);
        return false;
    }
    grid.mapv_inplace(|v| (v - lo) / (hi - lo));
    true
}

/// Final-layer CLS → patch attention for one patch.
pub fn attention_map(
    encoder: &ModelWeights,
    image_id: &str,
    patch: &RgbImage,
    head: HeadSelection,
) -> Result<AttentionMap> {
    let out = forward(encoder, patch, None)?;
    let heads = &out.last_layer_attention;
    if heads.is_empty() {
        return Err(Error::invalid("encoder produced no attention (depth 0?)"));
    }
    let g = encoder.config.grid_side();
    let cls_row = |a: &Array2<f64>| a.row(0).slice(ndarray::s![1..]).to_owned();
    let row = match head {
        HeadSelection::Mean => {
            let mut acc = cls_row(&heads[0]);
            for a in &heads[1..] {
                acc += &cls_row(a);
            }
            acc / heads.len() as f64
        }
        HeadSelection::Head(h) => cls_row(heads.get(h).ok_or_else(|| {
            Error::invalid(format!("head {h} out of range ({} heads)", heads.len()))
        })?),
    };
    if row.len() != g * g {
        return Err(Error::shape(format!("attention row has {} entries, grid is {g}×{g}", row.len())));
    }
    let mut grid = row.into_shape_with_order((g, g)).map_err(|e| Error::shape(e.to_string()))?;
    let constant = !normalize_grid(&mut grid);
    let overlay = overlay(patch, &grid);
    Ok(AttentionMap {
        image_id: image_id.to_string(),
        head,
        grid,
        constant,
        overlay,
    })
}

/// Blue → yellow → red ramp.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let (r, g, b) = if v < 0.5 {
        let t = v * 2.0;
        (t, t, 1.0 - t)
    } else {
        let t = (v - 0.5) * 2.0;
        (1.0, 1.0 - t, 0.0)
    };
    [r, g, b].map(|c| (c * 255.0).round() as u8)
}

/// The grid as a colour image, each cell `cell`×`cell` pixels. Constant grids
/// render mid-gray.
pub fn heatmap_image(grid: &Array2<f64>, constant: bool, cell: u32) -> RgbImage {
    let (h, w) = grid.dim();
    RgbImage::from_fn(w as u32 * cell, h as u32 * cell, |x, y| {
        if constant {
            return Rgb([128, 128, 128]);
        }
        Rgb(colormap(grid[[(y / cell) as usize, (x / cell) as usize]]))
    })
}

fn overlay(patch: &RgbImage, grid: &Array2<f64>) -> RgbImage {
    let (w, h) = patch.dimensions();
    let (gh, gw) = grid.dim();
    let mut out = patch.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        let r = (y as usize * gh / h as usize).min(gh - 1);
        let c = (x as usize * gw / w as usize).min(gw - 1);
        let m = colormap(grid[[r, c]]);
        for k in 0..3 {
            p.0[k] = ((p.0[k] as f64 + m[k] as f64) / 2.0).round() as u8;
        }
    }
    out
}

/// Writes `<id>_<head>_heatmap.png` and `<id>_<head>_overlay.png`.
pub fn write_attention_pngs(map: &AttentionMap, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (w, _) = map.overlay.dimensions();
    let cell = (w / map.grid.ncols().max(1) as u32).max(1);
    let heat = heatmap_image(&map.grid, map.constant, cell);
    let hp = dir.join(format!("{}_{}_heatmap.png", map.image_id, map.head));
    let op = dir.join(format!("{}_{}_overlay.png", map.image_id, map.head));
    heat.save(&hp).map_err(|e| Error::image(&hp, e))?;
    map.overlay.save(&op).map_err(|e| Error::image(&op, e))?;
    Ok((hp, op))
}

/// Attention maps for many patches, rendered in parallel; results are in input order.
pub fn render_attention_maps(
    encoder: &ModelWeights,
    patches: &[(String, RgbImage)],
    head: HeadSelection,
    dir: &Path,
) -> Result<Vec<AttentionMap>> {
    patches
        .par_iter()
        .map(|(id, img)| {
            let m = attention_map(encoder, id, img, head)?;
            write_attention_pngs(&m, dir)?;
            Ok(m)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "path")]
pub enum ProjectionMethod {
    Pca,
    /// CSV with `x` and `y` columns, one row per feature row.
    External(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingProjection {
    pub method: ProjectionMethod,
    /// `[n×2]`
    pub coords: Array2<f64>,
    /// Share of total variance captured by each component (PCA only).
    pub explained_variance: Option<[f64; 2]>,
}

/// Projects `[n×D]` features to 2-D.
pub fn project_embeddings(features: &Array2<f64>, method: &ProjectionMethod) -> Result<EmbeddingProjection> {
    let (n, d) = features.dim();
    if n < 3 {
        return Err(Error::invalid(format!("projection needs at least 3 rows, got {n}")));
    }
    if d < 2 {
        return Err(Error::invalid(format!("projection needs at least 2 dimensions, got {d}")));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("features to project".into()));
    }
    match method {
        ProjectionMethod::Pca => pca_2d(features),
        ProjectionMethod::External(path) => {
            let coords = read_external_coords(path)?;
            if coords.nrows() != n {
                return Err(Error::invalid(format!(
                    "{} has {} rows, expected {n}",
                    path.display(),
                    coords.nrows()
                )));
            }
            Ok(EmbeddingProjection {
                method: method.clone(),
                coords,
                explained_variance: None,
            })
        }
    }
}

fn pca_2d(features: &Array2<f64>) -> Result<EmbeddingProjection> {
    let (n, d) = features.dim();
    let mean = features.mean_axis(ndarray::Axis(0)).expect("n ≥ 3");
    let centred = features - &mean;
    let cov = centred.t().dot(&centred) / n as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut comps = Array2::zeros((d, 2));
    let mut ratio = [0.0; 2];
    for (k, &idx) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(idx);
        let pivot = (0..d)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .expect("d ≥ 2");
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            comps[[i, k]] = sign * v[i];
        }
        ratio[k] = if total > 0.0 { eig.eigenvalues[idx].max(0.0) / total } else { 0.0 };
    }
    Ok(EmbeddingProjection {
        method: ProjectionMethod::Pca,
        coords: centred.dot(&comps),
        explained_variance: Some(ratio),
    })
}

fn read_external_coords(path: &Path) -> Result<Array2<f64>> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let bad = |e: csv::Error| Error::invalid(format!("{}: {e}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(bad)?;
    let headers = rdr.headers().map_err(bad)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::invalid(format!("{}: no {name:?} column", path.display())))
    };
    let (cx, cy) = (col("x")?, col("y")?);
    let mut vals = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(bad)?;
        for c in [cx, cy] {
            let v: f64 = rec
                .get(c)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::invalid(format!("{}: bad coordinate row", path.display())))?;
            vals.push(v);
        }
    }
    Array2::from_shape_vec((vals.len() / 2, 2), vals).map_err(|e| Error::shape(e.to_string()))
}

/// `image_id,x,y,label` with an empty label for unlabelled rows.
pub fn write_projection_csv(
    path: &Path,
    ids: &[String],
    labels: &[Option<usize>],
    proj: &EmbeddingProjection,
) -> Result<()> {
    if ids.len() != proj.coords.nrows() || labels.len() != ids.len() {
        return Err(Error::shape("ids, labels and coordinates differ in length"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Runtime(e.to_string());
    w.write_record(["image_id", "x", "y", "label"]).map_err(err)?;
    for (i, id) in ids.iter().enumerate() {
        let label = labels[i].map(|l| l.to_string()).unwrap_or_default();
        w.write_record([
            id.as_str(),
            &proj.coords[[i, 0]].to_string(),
            &proj.coords[[i, 1]].to_string(),
            &label,
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Runtime(e.to_string()))?;
    crate::container::atomic_write(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ViTConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(patch: u32) -> ModelWeights {
        let cfg = ViTConfig {
            image_size: 64,
            patch_size: patch,
            depth: 1,
            embed_dim: 16,
            heads: 2,
            head_hidden_dim: 16,
            head_bottleneck_dim: 8,
            head_out_dim: 16,
            ..ViTConfig::vit_tiny_desk()
        };
        ModelWeights::init(&cfg, 1).unwrap().backbone_only()
    }

    fn noise(size: u32, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(size, size, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
    }

    #[test]
    fn grid_shape_and_range() {
        for patch in [16, 8] {
            let enc = tiny(patch);
            let m = attention_map(&enc, "a", &noise(64, 2), HeadSelection::Mean).unwrap();
            assert_eq!(m.grid.dim(), ((64 / patch) as usize, (64 / patch) as usize));
            assert!(!m.constant);
            let lo = m.grid.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = m.grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!((lo, hi), (0.0, 1.0));
            assert_eq!(m.overlay.dimensions(), (64, 64));
        }
        let enc = tiny(16);
        assert!(attention_map(&enc, "a", &noise(64, 2), HeadSelection::Head(1)).is_ok());
        assert!(attention_map(&enc, "a", &noise(64, 2), HeadSelection::Head(2)).is_err());
    }

    #[test]
    fn uniform_attention_is_flagged_gray() {
        // Zero query/key weights make every score equal, hence uniform softmax.
        let mut enc = tiny(16);
        for (name, w) in enc.params.iter_mut() {
            if name.contains("attn.qkv") {
                w.fill(0.0);
            }
        }
        let m = attention_map(&enc, "u", &noise(64, 3), HeadSelection::Mean).unwrap();
        assert!(m.constant);
        assert!(m.grid.iter().all(|&v| v == 0.5));
        let img = heatmap_image(&m.grid, m.constant, 4);
        assert!(img.pixels().all(|p| p.0 == [128, 128, 128]));
    }

    #[test]
    fn pngs_written() {
        let dir = tempfile::tempdir().unwrap();
        let m = attention_map(&tiny(16), "x", &noise(64, 4), HeadSelection::Mean).unwrap();
        let (h, o) = write_attention_pngs(&m, dir.path()).unwrap();
        assert_eq!(image::open(&h).unwrap().width(), 64);
        assert_eq!(image::open(&o).unwrap().width(), 64);
    }

    #[test]
    fn pca_of_2d_input_preserves_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((50, 2), |(_, j)| rng.random_range(-1.0..1.0) * (j as f64 + 1.0));
        let p = project_embeddings(&x, &ProjectionMethod::Pca).unwrap();
        let var = |a: &Array2<f64>| {
            let m = a.mean_axis(ndarray::Axis(0)).unwrap();
            (a - &m).mapv(|v| v * v).sum()
        };
        assert!((var(&x) - var(&p.coords)).abs() < 1e-9 * var(&x));
        let ev = p.explained_variance.unwrap();
        assert!((ev[0] + ev[1] - 1.0).abs() < 1e-12 && ev[0] >= ev[1]);
        assert_eq!(p, project_embeddings(&x, &ProjectionMethod::Pca).unwrap());
    }

    fn silhouette(x: &Array2<f64>, labels: &[usize]) -> f64 {
        let n = x.nrows();
        let dist = |i: usize, j: usize| (&x.row(i) - &x.row(j)).mapv(|v| v * v).sum().sqrt();
        let mut total = 0.0;
        for i in 0..n {
            let mut sums = [0.0; 2];
            let mut counts = [0usize; 2];
            for j in (0..n).filter(|&j| j != i) {
                sums[labels[j]] += dist(i, j);
                counts[labels[j]] += 1;
            }
            let a = sums[labels[i]] / counts[labels[i]] as f64;
            let b = sums[1 - labels[i]] / counts[1 - labels[i]] as f64;
            total += (b - a) / a.max(b);
        }
        total / n as f64
    }

    #[test]
    fn separated_clusters_stay_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let x = Array2::from_shape_fn((200, 8), |(i, j)| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            z + if j == 0 { 20.0 * labels[i] as f64 - 10.0 } else { 0.0 }
        });
        let p = project_embeddings(&x, &ProjectionMethod::Pca).unwrap();
        assert!(silhouette(&p.coords, &labels) > 0.8);
    }

    #[test]
    fn projection_errors() {
        let x = Array2::<f64>::zeros((2, 4));
        assert!(project_embeddings(&x, &ProjectionMethod::Pca).is_err());
        let x = Array2::<f64>::zeros((5, 1));
        assert!(project_embeddings(&x, &ProjectionMethod::Pca).is_err());
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.csv");
        std::fs::write(&f, "image_id,x,y\na,0,1\nb,1,2\nc,2,3\n").unwrap();
        let x = Array2::<f64>::zeros((4, 3));
        assert!(project_embeddings(&x, &ProjectionMethod::External(f.clone())).is_err());
        let x = Array2::<f64>::zeros((3, 3));
        let p = project_embeddings(&x, &ProjectionMethod::External(f)).unwrap();
        assert_eq!(p.coords[[2, 1]], 3.0);
    }
}
