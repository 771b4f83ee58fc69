//! Attention-based MIL over frozen patch features.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{self, Tape, Var};
use crate::container::{self, Dtype};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::eval::{auroc_binary, auroc_micro};
use crate::optim::{AdamConfig, AdamW};

/// Patch embeddings of one image with its image-level label.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBag {
    pub image_id: String,
    /// `[n × D]`, one row per patch.
    pub features: Array2<f32>,
    pub label: Option<usize>,
}

impl FeatureBag {
    pub fn new(image_id: impl Into<String>, features: Array2<f32>, label: Option<usize>) -> Result<Self> {
        let bag = Self {
            image_id: image_id.into(),
            features,
            label,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.nrows() == 0 {
            return Err(Error::invalid(format!("bag {} is empty", self.image_id)));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("bag {} has non-finite features", self.image_id)));
        }
        Ok(())
    }

    fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }

    fn label_or_err(&self) -> Result<usize> {
        self.label
            .ok_or_else(|| Error::invalid(format!("bag {} has no label", self.image_id)))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MilHyperparams {
    /// Attention hidden dim `L`.
    pub hidden_dim: usize,
    pub dropout: f64,
    pub gated: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for MilHyperparams {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            dropout: 0.25,
            gated: false,
            lr: 1e-4,
            weight_decay: 0.0,
            max_epochs: 200,
            patience: 20,
        }
    }
}

impl MilHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::invalid("hidden_dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.lr > 0.0) || self.max_epochs == 0 {
            return Err(Error::invalid("lr and max_epochs must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub epochs_run: usize,
}

/// Parameters: `attention.V [L×D]`, `attention.w [1×L]`, optional
/// `attention.U [L×D]`, `classifier.weight [K×D]`, `classifier.bias [1×K]`
/// with `K = 1` for binary tasks and `K = C` otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct ABMILModel {
    pub dim: usize,
    pub n_classes: usize,
    pub hyper: MilHyperparams,
    pub params: BTreeMap<String, Array2<f64>>,
    pub summary: Option<TrainSummary>,
}

impl ABMILModel {
    pub fn init(dim: usize, n_classes: usize, hyper: &MilHyperparams, seed: u64) -> Result<Self> {
        hyper.validate()?;
        if dim == 0 {
            return Err(Error::invalid("feature dim must be positive"));
        }
        if n_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = hyper.hidden_dim;
        let mut uniform = |r: usize, c: usize, fan_in: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_simple_fn((r, c), || rng.random_range(-b..b))
        };
        let k = Self::outputs_for(n_classes);
        let mut params = BTreeMap::new();
        params.insert("attention.V".to_string(), uniform(l, dim, dim));
        params.insert("attention.w".to_string(), uniform(1, l, l));
        if hyper.gated {
            params.insert("attention.U".to_string(), uniform(l, dim, dim));
        }
        // Zero start: a random classifier can push attention away from the
        // discriminative instances before it has learned their direction.
        params.insert("classifier.weight".to_string(), Array2::zeros((k, dim)));
        params.insert("classifier.bias".to_string(), Array2::zeros((1, k)));
        Ok(Self {
            dim,
            n_classes,
            hyper: hyper.clone(),
            params,
            summary: None,
        })
    }

    fn outputs_for(n_classes: usize) -> usize {
        if n_classes == 2 {
            1
        } else {
            n_classes
        }
    }

    pub fn is_binary(&self) -> bool {
        self.n_classes == 2
    }

    fn check_bag(&self, bag: &FeatureBag) -> Result<()> {
        bag.validate()?;
        if bag.dim() != self.dim {
            return Err(Error::shape(format!(
                "bag {} has dim {}, model expects {}",
                bag.image_id,
                bag.dim(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "dim": self.dim,
            "n_classes": self.n_classes,
            "hyper": self.hyper,
            "summary": self.summary,
        });
        container::write_weights(stem, "abmil", &self.params, Dtype::F64, meta)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (manifest, params) = container::read_weights(stem)?;
        if manifest.kind != "abmil" {
            return Err(Error::Corrupt(format!("{} is a {} container", stem.display(), manifest.kind)));
        }
        #[derive(Deserialize)]
        struct Meta {
            dim: usize,
            n_classes: usize,
            hyper: MilHyperparams,
            summary: Option<TrainSummary>,
        }
        let m: Meta = serde_json::from_value(manifest.metadata).map_err(|e| Error::json(stem, e))?;
        Ok(Self {
            dim: m.dim,
            n_classes: m.n_classes,
            hyper: m.hyper,
            params,
            summary: m.summary,
        })
    }
}

fn attention_scores(model: &ABMILModel, h: &Array2<f64>) -> Array1<f64> {
    let v = &model.params["attention.V"];
    let w = model.params["attention.w"].row(0);
    let mut hidden = h.dot(&v.t()).mapv(f64::tanh);
    if let Some(u) = model.params.get("attention.U") {
        let gate = h.dot(&u.t()).mapv(autograd::sigmoid);
        hidden *= &gate;
    }
    hidden.dot(&w)
}

/// `a = softmax_i(w·tanh(V h_i))` (times `sigmoid(U h_i)` if gated) and
/// `z = Σ a_i h_i`.
pub fn attention_pool(bag: &FeatureBag, model: &ABMILModel) -> Result<(Vec<f64>, Vec<f64>)> {
    model.check_bag(bag)?;
    let h = bag.features_f64();
    let s = attention_scores(model, &h);
    let m = s.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = s.mapv(|x| (x - m).exp());
    let zsum = e.sum();
    let a: Vec<f64> = e.iter().map(|x| x / zsum).collect();
    let mut z = vec![0.0; model.dim];
    for (ai, row) in a.iter().zip(h.rows()) {
        for (zj, hj) in z.iter_mut().zip(row) {
            *zj += ai * hj;
        }
    }
    Ok((z, a))
}

/// Class probabilities; binary tasks return `[1 − p, p]`.
pub fn predict_bag(bag: &FeatureBag, model: &ABMILModel) -> Result<Vec<f64>> {
    let (z, _) = attention_pool(bag, model)?;
    let w = &model.params["classifier.weight"];
    let b = model.params["classifier.bias"].row(0);
    let logits: Vec<f64> = w
        .rows()
        .into_iter()
        .zip(b)
        .map(|(r, bi)| r.iter().zip(&z).map(|(x, y)| x * y).sum::<f64>() + bi)
        .collect();
    if model.is_binary() {
        let p = autograd::sigmoid(logits[0]);
        return Ok(vec![1.0 - p, p]);
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

/// Cross-entropy of one bag built on a tape; returns the loss node and the
/// bound parameters. `dropout_keep` scales the attention hidden layer.
fn bag_loss_on_tape(
    tape: &mut Tape,
    model: &ABMILModel,
    bag: &FeatureBag,
    label: usize,
    dropout_keep: Option<Array2<f64>>,
) -> (Var, BTreeMap<String, Var>) {
    let vars: BTreeMap<String, Var> = model
        .params
        .iter()
        .map(|(k, v)| (k.clone(), tape.param(v.clone())))
        .collect();
    let h = tape.constant(bag.features_f64());
    let pre = tape.matmul_t(h, vars["attention.V"]);
    let mut hidden = tape.tanh(pre);
    if let Some(&u) = vars.get("attention.U") {
        let g = tape.matmul_t(h, u);
        let g = tape.sigmoid(g);
        hidden = tape.mul(hidden, g);
    }
    if let Some(keep) = dropout_keep {
        hidden = tape.mul_const(hidden, keep);
    }
    let scores = tape.matmul_t(hidden, vars["attention.w"]);
    let scores = tape.transpose(scores);
    let a = tape.softmax(scores);
    let z = tape.matmul(a, h);
    let logits = tape.matmul_t(z, vars["classifier.weight"]);
    let logits = tape.add_row(logits, vars["classifier.bias"]);
    let (logits, k) = if model.is_binary() {
        let zero = tape.constant(Array2::zeros((1, 1)));
        (tape.concat_cols(&[zero, logits]), 2)
    } else {
        (logits, model.n_classes)
    };
    let lp = tape.log_softmax(logits);
    let mut onehot = Array2::zeros((1, k));
    onehot[[0, label]] = 1.0;
    let picked = tape.mul_const(lp, onehot);
    let s = tape.sum(picked);
    (tape.scale(s, -1.0), vars)
}

/// Loss and parameter gradients of one labelled bag without dropout.
pub fn bag_loss_and_grads(model: &ABMILModel, bag: &FeatureBag) -> Result<(f64, BTreeMap<String, Array2<f64>>)> {
    model.check_bag(bag)?;
    let label = bag.label_or_err()?;
    if label >= model.n_classes {
        return Err(Error::invalid(format!("label {label} out of range")));
    }
    let mut tape = Tape::new();
    let (loss, vars) = bag_loss_on_tape(&mut tape, model, bag, label, None);
    let mut g = tape.backward(loss);
    let grads = vars
        .into_iter()
        .map(|(k, v)| {
            let d = g.take(v).unwrap_or_else(|| Array2::zeros(model.params[&k].dim()));
            (k, d)
        })
        .collect();
    Ok((tape.scalar(loss), grads))
}

/// Validation metric: AUROC (micro for multiclass). Falls back to negative
/// mean cross-entropy when the validation labels are single-class.
pub fn validation_metric(model: &ABMILModel, bags: &[FeatureBag]) -> Result<f64> {
    let mut probs = Vec::with_capacity(bags.len());
    let mut labels = Vec::with_capacity(bags.len());
    for b in bags {
        probs.push(predict_bag(b, model)?);
        labels.push(b.label_or_err()?);
    }
    let distinct: std::collections::BTreeSet<_> = labels.iter().collect();
    if distinct.len() >= 2 {
        if model.is_binary() {
            let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
            return auroc_binary(&scores, &labels);
        }
        return auroc_micro(&probs, &labels);
    }
    let ce = probs
        .iter()
        .zip(&labels)
        .map(|(p, &y)| -p[y].max(1e-300).ln())
        .sum::<f64>()
        / probs.len() as f64;
    Ok(-ce)
}

/// Trains with Adam (one bag per step) and early stopping on validation
/// AUROC; returns the best-validation checkpoint.
pub fn train_mil(
    train: &[FeatureBag],
    val: &[FeatureBag],
    n_classes: usize,
    hyper: &MilHyperparams,
    seed: u64,
) -> Result<ABMILModel> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("train and validation sets must be non-empty"));
    }
    let dim = train[0].dim();
    for b in train.iter().chain(val) {
        b.validate()?;
        if b.dim() != dim {
            return Err(Error::shape(format!("bag {} has dim {}, expected {dim}", b.image_id, b.dim())));
        }
        let y = b.label_or_err()?;
        if y >= n_classes {
            return Err(Error::invalid(format!("bag {} label {y} ≥ {n_classes} classes", b.image_id)));
        }
    }
    let classes: std::collections::BTreeSet<usize> = train.iter().filter_map(|b| b.label).collect();
    if classes.len() < 2 {
        return Err(Error::invalid("training set contains a single class"));
    }
    let mut model = ABMILModel::init(dim, n_classes, hyper, derive_seed(seed, &[0]))?;
    let mut opt = AdamW::new(AdamConfig::default());
    let mut best = model.clone();
    let mut best_metric = validation_metric(&model, val)?;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs_run = 0;
    let keep_p = 1.0 - hyper.dropout;
    for epoch in 1..=hyper.max_epochs {
        epochs_run = epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1, epoch as u64]));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for &i in &order {
            let bag = &train[i];
            let keep = (hyper.dropout > 0.0).then(|| {
                Array2::from_shape_simple_fn((bag.len(), hyper.hidden_dim), || {
                    if rng.random_bool(keep_p) {
                        1.0 / keep_p
                    } else {
                        0.0
                    }
                })
            });
            let mut tape = Tape::new();
            let (loss, vars) = bag_loss_on_tape(&mut tape, &model, bag, bag.label.expect("checked"), keep);
            let lv = tape.scalar(loss);
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("MIL loss at epoch {epoch}")));
            }
            let mut g = tape.backward(loss);
            let grads: BTreeMap<String, Array2<f64>> = vars
                .into_iter()
                .filter_map(|(k, v)| g.take(v).map(|d| (k, d)))
                .collect();
            opt.update(&mut model.params, &grads, hyper.lr, hyper.weight_decay, |n| {
                n.ends_with("weight") || n.starts_with("attention.")
            });
        }
        let metric = validation_metric(&model, val)?;
        if metric > best_metric {
            best_metric = metric;
            best = model.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hyper.patience {
                break;
            }
        }
    }
    best.summary = Some(TrainSummary {
        best_epoch,
        best_val_metric: best_metric,
        epochs_run,
    });
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bag(n: usize, d: usize, seed: u64, label: usize) -> FeatureBag {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0f32..1.0));
        FeatureBag::new(format!("b{seed}"), f, Some(label)).unwrap()
    }

    #[test]
    fn singleton_bag_gets_full_attention() {
        let m = ABMILModel::init(6, 2, &MilHyperparams::default(), 1).unwrap();
        let b = bag(1, 6, 2, 0);
        let (z, a) = attention_pool(&b, &m).unwrap();
        assert_eq!(a, vec![1.0]);
        for (zi, hi) in z.iter().zip(b.features.row(0)) {
            assert!((zi - f64::from(*hi)).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_rows_share_attention() {
        let m = ABMILModel::init(4, 3, &MilHyperparams::default(), 3).unwrap();
        let mut b = bag(3, 4, 4, 1);
        let r0 = b.features.row(0).to_owned();
        b.features.row_mut(2).assign(&r0);
        let (_, a) = attention_pool(&b, &m).unwrap();
        assert_eq!(a[0], a[2]);
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let mut m = ABMILModel::init(4, 4, &MilHyperparams::default(), 3).unwrap();
        m.params.get_mut("classifier.weight").unwrap().fill(0.0);
        let p = predict_bag(&bag(5, 4, 1, 0), &m).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn rejects_bad_bags() {
        let m = ABMILModel::init(4, 2, &MilHyperparams::default(), 3).unwrap();
        assert!(predict_bag(&bag(2, 5, 1, 0), &m).is_err());
        assert!(FeatureBag::new("e", Array2::zeros((0, 4)), None).is_err());
        let mut nan = bag(2, 4, 1, 0);
        nan.features[[0, 0]] = f32::NAN;
        assert!(predict_bag(&nan, &m).is_err());
    }

    #[test]
    fn single_class_training_rejected() {
        let train = vec![bag(3, 4, 1, 0), bag(3, 4, 2, 0)];
        let val = vec![bag(3, 4, 3, 1)];
        assert!(train_mil(&train, &val, 2, &MilHyperparams::default(), 0).is_err());
    }

    #[test]
    fn gated_gradients_match_finite_differences() {
        let hyper = MilHyperparams {
            hidden_dim: 5,
            gated: true,
            ..Default::default()
        };
        let mut m = ABMILModel::init(4, 3, &hyper, 8).unwrap();
        m.params.insert("classifier.weight".into(), bag(3, 4, 10, 0).features_f64());
        let b = bag(6, 4, 9, 2);
        let (_, grads) = bag_loss_and_grads(&m, &b).unwrap();
        let eps = 1e-6;
        for (name, g) in &grads {
            for idx in 0..g.len() {
                let (r, c) = (idx / g.ncols(), idx % g.ncols());
                let mut plus = m.clone();
                plus.params.get_mut(name).unwrap()[[r, c]] += eps;
                let mut minus = m.clone();
                minus.params.get_mut(name).unwrap()[[r, c]] -= eps;
                let fd = (bag_loss_and_grads(&plus, &b).unwrap().0 - bag_loss_and_grads(&minus, &b).unwrap().0)
                    / (2.0 * eps);
                assert!((fd - g[[r, c]]).abs() < 1e-6, "{name}[{r},{c}]");
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let m = ABMILModel::init(4, 2, &MilHyperparams::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(&dir.path().join("m")).unwrap();
        assert_eq!(ABMILModel::load(&dir.path().join("m")).unwrap(), m);
    }
}
