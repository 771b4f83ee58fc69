//! Per-split MIL training and test metrics, aggregated into a report.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    accuracy, aggregate_runs, auroc_binary, auroc_micro, format_mean_std, paired_significance,
    stratified_splits, SplitSpec, DEFAULT_RATIOS,
};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::mil::{predict_bag, train_mil, FeatureBag, MilHyperparams};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Protocol {
    /// Random stratified splits regenerated from `seed`.
    Repeated {
        n_splits: usize,
        ratios: (f64, f64, f64),
        seed: u64,
    },
    /// Splits supplied with the dataset (inline or from a JSON file holding a
    /// `SplitSpec` or a list of them).
    Fixed {
        #[serde(default)]
        splits: Vec<SplitSpec>,
        #[serde(default)]
        split_file: Option<PathBuf>,
    },
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol::Repeated {
            n_splits: 100,
            ratios: DEFAULT_RATIOS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TaskConfig {
    pub task_id: String,
    pub model_id: String,
    /// Class names in label-index order; their count fixes the number of classes.
    pub class_names: Vec<String>,
    pub protocol: Protocol,
    pub mil: MilHyperparams,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            task_id: "task".into(),
            model_id: "model".into(),
            class_names: vec!["negative".into(), "positive".into()],
            protocol: Protocol::default(),
            mil: MilHyperparams::default(),
            threshold: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SplitMetrics {
    pub split_id: usize,
    pub accuracy: f64,
    pub auroc: f64,
    pub best_val_metric: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricSummary {
    pub mean: f64,
    /// Absent for single-split protocols.
    pub std: Option<f64>,
    pub formatted: String,
}

impl MetricSummary {
    fn from_values(values: &[f64]) -> Result<Self> {
        let (mean, std) = aggregate_runs(values)?;
        if values.len() == 1 {
            return Ok(Self {
                mean,
                std: None,
                formatted: format!("{mean:.3}"),
            });
        }
        Ok(Self {
            mean,
            std: Some(std),
            formatted: format_mean_std(mean, std),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub task_id: String,
    pub model_id: String,
    pub n_splits: usize,
    pub split_seeds: Vec<u64>,
    pub per_split: Vec<SplitMetrics>,
    pub accuracy: MetricSummary,
    pub auroc: MetricSummary,
    /// AUROC p-values against other models, keyed by their model id.
    pub p_values: BTreeMap<String, f64>,
}

/// Reads `image_id,label` rows; labels are class indices or class names.
pub fn read_labels_csv(path: &Path, class_names: &[String]) -> Result<BTreeMap<String, usize>> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        if rec.len() < 2 {
            return Err(Error::invalid(format!("{}: expected image_id,label", path.display())));
        }
        let id = rec[0].trim().to_string();
        let raw = rec[1].trim();
        let label = match raw.parse::<usize>() {
            Ok(v) => v,
            Err(_) => class_names
                .iter()
                .position(|c| c == raw)
                .ok_or_else(|| Error::invalid(format!("unknown label {raw:?} for {id}")))?,
        };
        if out.insert(id.clone(), label).is_some() {
            return Err(Error::invalid(format!("duplicate label row for {id}")));
        }
    }
    Ok(out)
}

fn resolve_splits(task: &TaskConfig, labels: &BTreeMap<String, usize>) -> Result<Vec<SplitSpec>> {
    match &task.protocol {
        Protocol::Repeated {
            n_splits,
            ratios,
            seed,
        } => stratified_splits(labels, *ratios, *n_splits, *seed),
        Protocol::Fixed { splits, split_file } => {
            let mut out = splits.clone();
            if let Some(f) = split_file {
                let v: serde_json::Value = crate::container::read_json(f)?;
                if v.is_array() {
                    out.extend(serde_json::from_value::<Vec<SplitSpec>>(v).map_err(|e| Error::json(f, e))?);
                } else {
                    out.push(serde_json::from_value(v).map_err(|e| Error::json(f, e))?);
                }
            }
            if out.is_empty() {
                return Err(Error::invalid("fixed protocol without splits"));
            }
            Ok(out)
        }
    }
}

fn eval_split(
    split: &SplitSpec,
    bags: &BTreeMap<&str, &FeatureBag>,
    n_classes: usize,
    task: &TaskConfig,
) -> Result<SplitMetrics> {
    let pick = |ids: &[String]| -> Vec<FeatureBag> { ids.iter().map(|id| bags[id.as_str()].clone()).collect() };
    let (train, val, test) = (pick(&split.train), pick(&split.val), pick(&split.test));
    let seed = derive_seed(task.seed, &[split.split_id as u64]);
    let model = train_mil(&train, &val, n_classes, &task.mil, seed)?;
    let probs: Vec<Vec<f64>> = test.iter().map(|b| predict_bag(b, &model)).collect::<Result<_>>()?;
    let labels: Vec<usize> = test.iter().map(|b| b.label.expect("labelled")).collect();
    let auroc = if n_classes == 2 {
        let s: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        auroc_binary(&s, &labels)?
    } else {
        auroc_micro(&probs, &labels)?
    };
    let summary = model.summary.clone().expect("trained model has a summary");
    Ok(SplitMetrics {
        split_id: split.split_id,
        accuracy: accuracy(&probs, &labels, task.threshold)?,
        auroc,
        best_val_metric: summary.best_val_metric,
        best_epoch: summary.best_epoch,
    })
}

/// Trains one ABMIL per split and reports test accuracy/AUROC. Splits run in
/// parallel; each split's result depends only on its own seed.
pub fn run_benchmark(
    bags: &[FeatureBag],
    labels: &BTreeMap<String, usize>,
    task: &TaskConfig,
) -> Result<MetricsReport> {
    let n_classes = task.class_names.len();
    if n_classes < 2 {
        return Err(Error::invalid("task needs at least 2 class names"));
    }
    let mut labelled: Vec<FeatureBag> = Vec::with_capacity(bags.len());
    for b in bags {
        let y = labels
            .get(&b.image_id)
            .ok_or_else(|| Error::invalid(format!("no label for image {}", b.image_id)))?;
        if *y >= n_classes {
            return Err(Error::invalid(format!("label {y} for {} outside {n_classes} classes", b.image_id)));
        }
        let mut b = b.clone();
        b.label = Some(*y);
        labelled.push(b);
    }
    let by_id: BTreeMap<&str, &FeatureBag> = labelled.iter().map(|b| (b.image_id.as_str(), b)).collect();
    if by_id.len() != labelled.len() {
        return Err(Error::invalid("duplicate image ids in feature store"));
    }
    let eval_labels: BTreeMap<String, usize> = labels
        .iter()
        .filter(|(id, _)| by_id.contains_key(id.as_str()))
        .map(|(k, v)| (k.clone(), *v))
        .collect();
    let splits = resolve_splits(task, &eval_labels)?;
    for s in &splits {
        let mut seen = BTreeSet::new();
        for id in s.all_ids() {
            if !by_id.contains_key(id.as_str()) {
                return Err(Error::invalid(format!("split {} references unknown image {id}", s.split_id)));
            }
            if !seen.insert(id) {
                return Err(Error::invalid(format!("split {} lists {id} twice", s.split_id)));
            }
        }
        if s.train.is_empty() || s.val.is_empty() || s.test.is_empty() {
            return Err(Error::invalid(format!("split {} has an empty partition", s.split_id)));
        }
    }
    let per_split: Vec<SplitMetrics> = splits
        .par_iter()
        .map(|s| eval_split(s, &by_id, n_classes, task))
        .collect::<Result<_>>()?;
    let accs: Vec<f64> = per_split.iter().map(|m| m.accuracy).collect();
    let aucs: Vec<f64> = per_split.iter().map(|m| m.auroc).collect();
    Ok(MetricsReport {
        task_id: task.task_id.clone(),
        model_id: task.model_id.clone(),
        n_splits: per_split.len(),
        split_seeds: splits.iter().map(|s| s.seed).collect(),
        accuracy: MetricSummary::from_values(&accs)?,
        auroc: MetricSummary::from_values(&aucs)?,
        per_split,
        p_values: BTreeMap::new(),
    })
}

/// Paired AUROC test between two reports over the same splits; records the
/// p-value in both.
pub fn compare_reports(a: &mut MetricsReport, b: &mut MetricsReport, n_perm: usize, seed: u64) -> Result<f64> {
    let ids_a: Vec<usize> = a.per_split.iter().map(|m| m.split_id).collect();
    let ids_b: Vec<usize> = b.per_split.iter().map(|m| m.split_id).collect();
    if ids_a != ids_b || a.split_seeds != b.split_seeds {
        return Err(Error::invalid("reports are not split-aligned"));
    }
    let xa: Vec<f64> = a.per_split.iter().map(|m| m.auroc).collect();
    let xb: Vec<f64> = b.per_split.iter().map(|m| m.auroc).collect();
    let p = paired_significance(&xa, &xb, n_perm, seed)?;
    a.p_values.insert(b.model_id.clone(), p);
    b.p_values.insert(a.model_id.clone(), p);
    Ok(p)
}

/// Table-style CSV: one row per (task, model) with formatted metrics.
pub fn write_table_csv(reports: &[MetricsReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["task", "model", "accuracy", "auroc", "n_splits"])
        .map_err(|e| Error::Runtime(e.to_string()))?;
    for r in reports {
        w.write_record([
            r.task_id.as_str(),
            r.model_id.as_str(),
            r.accuracy.formatted.as_str(),
            r.auroc.formatted.as_str(),
            &r.n_splits.to_string(),
        ])
        .map_err(|e| Error::Runtime(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Runtime(e.to_string()))?;
    crate::container::atomic_write(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn toy() -> (Vec<FeatureBag>, BTreeMap<String, usize>) {
        let mut bags = Vec::new();
        let mut labels = BTreeMap::new();
        for i in 0..20 {
            let y = i % 2;
            let id = format!("img{i:02}");
            let f = Array2::from_shape_fn((3, 4), |(r, c)| (y as f32) * 2.0 + (r + c + i) as f32 * 0.05);
            bags.push(FeatureBag::new(id.clone(), f, None).unwrap());
            labels.insert(id, y);
        }
        (bags, labels)
    }

    #[test]
    fn repeated_and_fixed_protocols() {
        let (bags, labels) = toy();
        let mut task = TaskConfig {
            protocol: Protocol::Repeated {
                n_splits: 3,
                ratios: DEFAULT_RATIOS,
                seed: 1,
            },
            mil: MilHyperparams {
                hidden_dim: 8,
                max_epochs: 5,
                lr: 1e-2,
                ..Default::default()
            },
            ..Default::default()
        };
        let r = run_benchmark(&bags, &labels, &task).unwrap();
        assert_eq!(r.per_split.len(), 3);
        assert!(r.accuracy.std.is_some());
        assert_eq!(r, run_benchmark(&bags, &labels, &task).unwrap());

        let split = super::super::stratified_split(&labels, DEFAULT_RATIOS, 9, 0).unwrap();
        task.protocol = Protocol::Fixed {
            splits: vec![split],
            split_file: None,
        };
        let r = run_benchmark(&bags, &labels, &task).unwrap();
        assert_eq!(r.n_splits, 1);
        assert!(r.auroc.std.is_none());
    }

    #[test]
    fn missing_label_is_an_error() {
        let (bags, mut labels) = toy();
        labels.remove("img03");
        assert!(run_benchmark(&bags, &labels, &TaskConfig::default()).is_err());
    }
}
