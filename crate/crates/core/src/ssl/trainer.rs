//! Student/teacher training state, the iBOT update step and the pretraining
//! driver with checkpoint/resume.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment_pair, AugmentConfig, AugmentedViewPair};
use super::loss::{distill_on_tape, ema_update_in_place, teacher_probs_rows, update_center};
use super::mask::blockwise_mask;
use crate::autograd::Tape;
use crate::backbone::{
    self, encode, export_teacher_encoder, is_decayed, patch_head_prefix, patchify, project,
    BoundParams, ModelWeights, ViTConfig,
};
use crate::container::{self, Dtype};
use crate::datasets::CorpusIndex;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::optim::{clip_per_tensor, cosine_schedule, linear_warmup, AdamConfig, AdamW};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SslConfig {
    pub student_temp: f64,
    pub teacher_temp_start: f64,
    pub teacher_temp_end: f64,
    pub teacher_temp_warmup_steps: u64,
    pub momentum_start: f64,
    pub momentum_end: f64,
    pub center_momentum: f64,
    pub mask_ratio_range: (f64, f64),
    pub lambda_mim: f64,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay_start: f64,
    pub weight_decay_end: f64,
    /// Per-tensor gradient norm cap; `None` disables clipping.
    pub clip_grad: Option<f64>,
    /// The prototype layers receive no update before this step.
    pub freeze_last_layer_steps: u64,
    /// Schedule horizon.
    pub total_steps: u64,
    pub augment: AugmentConfig,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            student_temp: 0.1,
            teacher_temp_start: 0.04,
            teacher_temp_end: 0.07,
            teacher_temp_warmup_steps: 0,
            momentum_start: 0.996,
            momentum_end: 1.0,
            center_momentum: 0.9,
            mask_ratio_range: (0.1, 0.5),
            lambda_mim: 1.0,
            lr: 5e-4,
            min_lr: 1e-6,
            warmup_steps: 0,
            weight_decay_start: 0.04,
            weight_decay_end: 0.4,
            clip_grad: Some(3.0),
            freeze_last_layer_steps: 0,
            total_steps: 1,
            augment: AugmentConfig::default(),
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.mask_ratio_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!("mask_ratio_range ({lo}, {hi}) invalid")));
        }
        if !(self.student_temp > 0.0 && self.teacher_temp_start > 0.0 && self.teacher_temp_end > 0.0) {
            return Err(Error::invalid("temperatures must be positive"));
        }
        for (name, m) in [
            ("momentum_start", self.momentum_start),
            ("momentum_end", self.momentum_end),
            ("center_momentum", self.center_momentum),
        ] {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::invalid(format!("{name} {m} outside [0, 1]")));
            }
        }
        if self.lambda_mim < 0.0 {
            return Err(Error::invalid("lambda_mim must be non-negative"));
        }
        Ok(())
    }
}

/// Scheduled values in effect for one step.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct StepSchedule {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub teacher_temp: f64,
}

impl SslConfig {
    pub fn schedule_at(&self, step: u64) -> StepSchedule {
        let total = self.total_steps.max(1);
        StepSchedule {
            lr: cosine_schedule(self.lr, self.min_lr, step, total, self.warmup_steps),
            weight_decay: cosine_schedule(self.weight_decay_start, self.weight_decay_end, step, total, 0),
            momentum: cosine_schedule(self.momentum_start, self.momentum_end, step, total, 0),
            teacher_temp: linear_warmup(
                self.teacher_temp_start,
                self.teacher_temp_end,
                step,
                self.teacher_temp_warmup_steps,
            ),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: ViTConfig,
    pub ssl: SslConfig,
    pub student: BTreeMap<String, Array2<f64>>,
    pub teacher: BTreeMap<String, Array2<f64>>,
    /// Center for CLS-token teacher outputs.
    pub center: Vec<f64>,
    /// Center for patch-token teacher outputs.
    pub patch_center: Vec<f64>,
    pub step: u64,
    pub ema_momentum: f64,
    pub teacher_temp: f64,
    pub optimizer: AdamW,
}

impl PartialEq for TrainState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.ssl == other.ssl
            && self.student == other.student
            && self.teacher == other.teacher
            && self.center == other.center
            && self.patch_center == other.patch_center
            && self.step == other.step
            && self.optimizer.step == other.optimizer.step
            && self.optimizer.first == other.optimizer.first
            && self.optimizer.second == other.optimizer.second
    }
}

impl TrainState {
    /// Fresh state; the teacher starts as an exact copy of the student.
    pub fn new(config: &ViTConfig, ssl: &SslConfig, seed: u64) -> Result<Self> {
        ssl.validate()?;
        let student = ModelWeights::init(config, seed)?;
        Ok(Self::from_weights(student, ssl))
    }

    pub fn from_weights(student: ModelWeights, ssl: &SslConfig) -> Self {
        let k = student.config.head_out_dim;
        let sched = ssl.schedule_at(0);
        Self {
            config: student.config.clone(),
            ssl: ssl.clone(),
            teacher: student.params.clone(),
            student: student.params,
            center: vec![0.0; k],
            patch_center: vec![0.0; k],
            step: 0,
            ema_momentum: sched.momentum,
            teacher_temp: sched.teacher_temp,
            optimizer: AdamW::new(AdamConfig::default()),
        }
    }

    pub fn student_weights(&self) -> ModelWeights {
        ModelWeights {
            config: self.config.clone(),
            params: self.student.clone(),
        }
    }

    pub fn teacher_weights(&self) -> ModelWeights {
        ModelWeights {
            config: self.config.clone(),
            params: self.teacher.clone(),
        }
    }

    /// Lossless checkpoint (`f64` container) including optimizer moments.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut tensors = BTreeMap::new();
        for (k, v) in &self.student {
            tensors.insert(format!("student/{k}"), v.clone());
        }
        for (k, v) in &self.teacher {
            tensors.insert(format!("teacher/{k}"), v.clone());
        }
        for (k, v) in &self.optimizer.first {
            tensors.insert(format!("adam.m/{k}"), v.clone());
        }
        for (k, v) in &self.optimizer.second {
            tensors.insert(format!("adam.v/{k}"), v.clone());
        }
        let row = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row");
        tensors.insert("center".into(), row(&self.center));
        tensors.insert("patch_center".into(), row(&self.patch_center));
        let meta = serde_json::json!({
            "vit_config": self.config,
            "ssl_config": self.ssl,
            "step": self.step,
            "ema_momentum": self.ema_momentum,
            "teacher_temp": self.teacher_temp,
            "adam_step": self.optimizer.step,
            "adam_config": self.optimizer.config,
        });
        container::write_weights(stem, "train_state", &tensors, Dtype::F64, meta)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (manifest, tensors) = container::read_weights(stem)?;
        let meta = &manifest.metadata;
        let field = |k: &str| -> Result<serde_json::Value> {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks {k}")))
        };
        let parse = |k: &str| -> Result<serde_json::Value> { field(k) };
        let config: ViTConfig =
            serde_json::from_value(parse("vit_config")?).map_err(|e| Error::json(stem, e))?;
        let ssl: SslConfig =
            serde_json::from_value(parse("ssl_config")?).map_err(|e| Error::json(stem, e))?;
        let adam_config: AdamConfig =
            serde_json::from_value(parse("adam_config")?).map_err(|e| Error::json(stem, e))?;
        let num = |k: &str| -> Result<f64> {
            field(k)?
                .as_f64()
                .ok_or_else(|| Error::Corrupt(format!("checkpoint field {k} not numeric")))
        };
        let mut state = TrainState {
            config,
            ssl,
            student: BTreeMap::new(),
            teacher: BTreeMap::new(),
            center: Vec::new(),
            patch_center: Vec::new(),
            step: num("step")? as u64,
            ema_momentum: num("ema_momentum")?,
            teacher_temp: num("teacher_temp")?,
            optimizer: AdamW::new(adam_config),
        };
        state.optimizer.step = num("adam_step")? as u64;
        for (k, v) in tensors {
            if let Some(n) = k.strip_prefix("student/") {
                state.student.insert(n.to_string(), v);
            } else if let Some(n) = k.strip_prefix("teacher/") {
                state.teacher.insert(n.to_string(), v);
            } else if let Some(n) = k.strip_prefix("adam.m/") {
                state.optimizer.first.insert(n.to_string(), v);
            } else if let Some(n) = k.strip_prefix("adam.v/") {
                state.optimizer.second.insert(n.to_string(), v);
            } else if k == "center" {
                state.center = v.row(0).to_vec();
            } else if k == "patch_center" {
                state.patch_center = v.row(0).to_vec();
            }
        }
        if state.student.is_empty() || state.teacher.is_empty() {
            return Err(Error::Corrupt("checkpoint has no weights".into()));
        }
        Ok(state)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub step: u64,
    pub loss_cls: f64,
    pub loss_mim: f64,
    pub total: f64,
    pub lr: f64,
    pub momentum: f64,
    pub teacher_temp: f64,
    pub weight_decay: f64,
}

/// Loss value and student gradients for one batch.
pub struct Objective {
    pub loss_cls: f64,
    pub loss_mim: f64,
    pub total: f64,
    pub grads: BTreeMap<String, Array2<f64>>,
    /// Gradients reaching teacher parameters; only populated when the teacher
    /// is bound as trainable (a probe that must come back all-zero).
    pub teacher_grads: BTreeMap<String, Array2<f64>>,
    /// Teacher CLS logits, two rows per pair.
    pub teacher_cls: Array2<f64>,
    /// Teacher patch logits at masked positions, if any were masked.
    pub teacher_patch: Option<Array2<f64>>,
}

/// Per-pair, per-view masks derived from the step seed.
pub fn view_masks(
    config: &ViTConfig,
    ssl: &SslConfig,
    batch_len: usize,
    seed: u64,
) -> Result<Vec<[Vec<bool>; 2]>> {
    let (lo, hi) = ssl.mask_ratio_range;
    (0..batch_len)
        .map(|i| {
            let mut views = [Vec::new(), Vec::new()];
            for (v, slot) in views.iter_mut().enumerate() {
                let s = derive_seed(seed, &[1, i as u64, v as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let ratio = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                *slot = blockwise_mask(config.grid_side(), ratio, rng.random())?;
            }
            Ok(views)
        })
        .collect()
}

fn masked_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

/// iBOT objective: cross-view CLS self-distillation plus masked-patch
/// distillation against the unmasked teacher, averaged over the batch.
pub fn ibot_objective(state: &TrainState, batch: &[AugmentedViewPair], seed: u64) -> Result<Objective> {
    objective_impl(state, batch, seed, false)
}

/// As [`ibot_objective`] but with teacher parameters bound as trainable
/// leaves, so `teacher_grads` reports whatever gradient reaches them.
pub fn ibot_objective_probe_teacher(
    state: &TrainState,
    batch: &[AugmentedViewPair],
    seed: u64,
) -> Result<Objective> {
    objective_impl(state, batch, seed, true)
}

fn objective_impl(
    state: &TrainState,
    batch: &[AugmentedViewPair],
    seed: u64,
    teacher_trainable: bool,
) -> Result<Objective> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let cfg = &state.config;
    let ssl = &state.ssl;
    let tt = ssl.schedule_at(state.step).teacher_temp;
    let masks = view_masks(cfg, ssl, batch.len(), seed)?;
    let b = batch.len() as f64;
    let patch_prefix = patch_head_prefix(cfg);

    let mut grads: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    let mut teacher_grads: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    let mut cls_sum = 0.0;
    let mut mim_sum = 0.0;
    let mut teacher_cls_rows = Vec::new();
    let mut teacher_patch_rows: Vec<Array2<f64>> = Vec::new();

    for (pair, pair_masks) in batch.iter().zip(&masks) {
        let views = [patchify(&pair.u, cfg)?, patchify(&pair.v, cfg)?];
        let mut tape = Tape::new();
        let sb = BoundParams::bind(&mut tape, &state.student, true);
        let tb = BoundParams::bind(&mut tape, &state.teacher, teacher_trainable);

        let mut t_cls = Vec::with_capacity(2);
        let mut s_cls = Vec::with_capacity(2);
        let mut mim_terms = Vec::new();
        for v in 0..2 {
            let idx = masked_indices(&pair_masks[v]);
            let te = encode(&mut tape, cfg, &tb, &views[v], None)?;
            let tc = project(&mut tape, &tb, "head", te.cls);
            let tc = tape.detach(tc);
            t_cls.push(tape.value(tc).clone());

            let se = encode(&mut tape, cfg, &sb, &views[v], Some(&pair_masks[v]))?;
            if idx.is_empty() {
                s_cls.push(project(&mut tape, &sb, "head", se.cls));
                continue;
            }
            let tg = tape.gather_rows(te.patches, &idx);
            let tp = project(&mut tape, &tb, patch_prefix, tg);
            let tp = tape.detach(tp);
            let t_patch = tape.value(tp).clone();

            let sg = tape.gather_rows(se.patches, &idx);
            let (sc, sp) = if cfg.shared_head {
                let rows = tape.concat_rows(&[se.cls, sg]);
                let out = project(&mut tape, &sb, "head", rows);
                (tape.slice_rows(out, 0, 1), tape.slice_rows(out, 1, idx.len()))
            } else {
                (
                    project(&mut tape, &sb, "head", se.cls),
                    project(&mut tape, &sb, patch_prefix, sg),
                )
            };
            s_cls.push(sc);
            let targets = teacher_probs_rows(&t_patch, &state.patch_center, tt);
            let h = distill_on_tape(&mut tape, sp, targets, ssl.student_temp);
            mim_terms.push(tape.scale(h, 1.0 / idx.len() as f64));
            teacher_patch_rows.push(t_patch);
        }

        let target_v = teacher_probs_rows(&t_cls[1], &state.center, tt);
        let target_u = teacher_probs_rows(&t_cls[0], &state.center, tt);
        let h_uv = distill_on_tape(&mut tape, s_cls[0], target_v, ssl.student_temp);
        let h_vu = distill_on_tape(&mut tape, s_cls[1], target_u, ssl.student_temp);
        let cls = tape.add(h_uv, h_vu);
        let cls = tape.scale(cls, 0.5);
        let mim = match mim_terms.as_slice() {
            [] => tape.constant(Array2::zeros((1, 1))),
            [one] => tape.scale(*one, 0.5),
            [a, b2] => {
                let s = tape.add(*a, *b2);
                tape.scale(s, 0.5)
            }
            _ => unreachable!("two views"),
        };
        let cls_v = tape.scalar(cls);
        let mim_v = tape.scalar(mim);
        if !cls_v.is_finite() {
            return Err(Error::NonFinite(format!("L_cls at step {}", state.step)));
        }
        if !mim_v.is_finite() {
            return Err(Error::NonFinite(format!("L_mim at step {}", state.step)));
        }
        cls_sum += cls_v;
        mim_sum += mim_v;

        let weighted_mim = tape.scale(mim, ssl.lambda_mim);
        let total = tape.add(cls, weighted_mim);
        let total = tape.scale(total, 1.0 / b);
        let mut g = tape.backward(total);
        for (name, var) in sb.iter() {
            if let Some(d) = g.take(*var) {
                match grads.get_mut(name) {
                    Some(acc) => *acc += &d,
                    None => {
                        grads.insert(name.clone(), d);
                    }
                }
            }
        }
        if teacher_trainable {
            for (name, var) in tb.iter() {
                let d = g
                    .take(*var)
                    .unwrap_or_else(|| Array2::zeros(state.teacher[name].dim()));
                match teacher_grads.get_mut(name) {
                    Some(acc) => *acc += &d,
                    None => {
                        teacher_grads.insert(name.clone(), d);
                    }
                }
            }
        }
        teacher_cls_rows.extend(t_cls);
    }

    let views: Vec<_> = teacher_cls_rows.iter().map(|a| a.view()).collect();
    let teacher_cls = ndarray::concatenate(ndarray::Axis(0), &views).expect("same width");
    let teacher_patch = if teacher_patch_rows.is_empty() {
        None
    } else {
        let v: Vec<_> = teacher_patch_rows.iter().map(|a| a.view()).collect();
        Some(ndarray::concatenate(ndarray::Axis(0), &v).expect("same width"))
    };
    let loss_cls = cls_sum / b;
    let loss_mim = mim_sum / b;
    Ok(Objective {
        loss_cls,
        loss_mim,
        total: loss_cls + ssl.lambda_mim * loss_mim,
        grads,
        teacher_grads,
        teacher_cls,
        teacher_patch,
    })
}

/// One optimisation step: objective → AdamW on the student → EMA teacher →
/// center updates. The state is untouched if the loss is not finite.
pub fn ibot_step(state: &mut TrainState, batch: &[AugmentedViewPair], seed: u64) -> Result<LossBreakdown> {
    let sched = state.ssl.schedule_at(state.step);
    let mut obj = ibot_objective(state, batch, seed)?;
    if !obj.total.is_finite() {
        return Err(Error::NonFinite(format!("total loss at step {}", state.step)));
    }
    if let Some(max_norm) = state.ssl.clip_grad {
        clip_per_tensor(&mut obj.grads, max_norm);
    }
    if state.step < state.ssl.freeze_last_layer_steps {
        for (name, g) in obj.grads.iter_mut() {
            if name.ends_with(".last_layer.weight") {
                g.fill(0.0);
            }
        }
    }
    state
        .optimizer
        .update(&mut state.student, &obj.grads, sched.lr, sched.weight_decay, is_decayed);
    ema_update_in_place(&mut state.teacher, &state.student, sched.momentum)?;
    let mc = state.ssl.center_momentum;
    state.center = update_center(&state.center, &obj.teacher_cls, mc)?;
    if let Some(tp) = &obj.teacher_patch {
        state.patch_center = update_center(&state.patch_center, tp, mc)?;
    }
    let out = LossBreakdown {
        step: state.step,
        loss_cls: obj.loss_cls,
        loss_mim: obj.loss_mim,
        total: obj.total,
        lr: sched.lr,
        momentum: sched.momentum,
        teacher_temp: sched.teacher_temp,
        weight_decay: sched.weight_decay,
    };
    state.step += 1;
    state.ema_momentum = sched.momentum;
    state.teacher_temp = sched.teacher_temp;
    Ok(out)
}

/// Random access to pretraining patches.
pub trait PatchSource: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<RgbImage>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PatchSource for [RgbImage] {
    fn len(&self) -> usize {
        <[RgbImage]>::len(self)
    }
    fn get(&self, index: usize) -> Result<RgbImage> {
        Ok(self[index].clone())
    }
}

impl PatchSource for Vec<RgbImage> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn get(&self, index: usize) -> Result<RgbImage> {
        Ok(self[index].clone())
    }
}

impl PatchSource for CorpusIndex {
    fn len(&self) -> usize {
        self.entries.len()
    }
    fn get(&self, index: usize) -> Result<RgbImage> {
        crate::preprocess::load_rgb(&self.entries[index].path)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PretrainConfig {
    pub vit: ViTConfig,
    pub ssl: SslConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<u64>,
    pub checkpoint_every: u64,
    /// Estimate per-channel pixel statistics from the corpus before training.
    pub normalize_from_corpus: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            vit: ViTConfig::vit_tiny_desk(),
            ssl: SslConfig::default(),
            batch_size: 8,
            epochs: 1,
            max_steps: None,
            checkpoint_every: 50,
            normalize_from_corpus: true,
        }
    }
}

impl PretrainConfig {
    pub fn steps_per_epoch(&self, corpus_len: usize) -> u64 {
        corpus_len.div_ceil(self.batch_size.max(1)) as u64
    }

    pub fn total_steps(&self, corpus_len: usize) -> u64 {
        self.max_steps
            .unwrap_or(self.epochs as u64 * self.steps_per_epoch(corpus_len))
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop (after checkpointing) once this many steps are done.
    pub stop_at: Option<u64>,
}

pub const CHECKPOINT_STEM: &str = "checkpoint";
pub const ENCODER_STEM: &str = "encoder";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Per-channel mean/std over (up to) 64 evenly spaced corpus patches.
pub fn corpus_pixel_stats(source: &dyn PatchSource) -> Result<([f64; 3], [f64; 3])> {
    let n = source.len().min(64);
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    let mut count = 0.0;
    for k in 0..n {
        let img = source.get(k * source.len() / n)?;
        for p in img.pixels() {
            for c in 0..3 {
                let v = f64::from(p[c]) / 255.0;
                sum[c] += v;
                sq[c] += v * v;
            }
            count += 1.0;
        }
    }
    if count == 0.0 {
        return Err(Error::invalid("empty corpus"));
    }
    let mean = sum.map(|s| s / count);
    let mut std = [0.0; 3];
    for c in 0..3 {
        std[c] = (sq[c] / count - mean[c] * mean[c]).max(0.0).sqrt().max(1e-3);
    }
    Ok((mean, std))
}

/// Batch of augmented pairs for a global step; depends only on `(seed, step)`.
pub fn batch_for_step(
    source: &dyn PatchSource,
    cfg: &PretrainConfig,
    aug: &AugmentConfig,
    seed: u64,
    step: u64,
) -> Result<Vec<AugmentedViewPair>> {
    let n = source.len();
    let spe = cfg.steps_per_epoch(n);
    let epoch = step / spe;
    let within = (step % spe) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2, epoch])));
    let bs = cfg.batch_size.max(1);
    let start = within * bs;
    let end = (start + bs).min(n);
    order[start..end]
        .iter()
        .enumerate()
        .map(|(j, &idx)| {
            let img = source.get(idx)?;
            augment_pair(&img, derive_seed(seed, &[3, step, j as u64]), aug)
        })
        .collect()
}

/// Runs (or resumes) pretraining. Returns the final state and the exported
/// teacher encoder. With a checkpoint directory, the state is checkpointed
/// every `checkpoint_every` steps and at the end, and the encoder is written
/// there; a non-finite loss aborts leaving the last checkpoint in place.
pub fn pretrain(
    source: &dyn PatchSource,
    cfg: &PretrainConfig,
    seed: u64,
    opts: &RunOptions,
    resume: Option<TrainState>,
    on_step: &mut dyn FnMut(&LossBreakdown) -> Result<()>,
) -> Result<(TrainState, ModelWeights)> {
    if source.is_empty() {
        return Err(Error::invalid("pretraining corpus is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let total = cfg.total_steps(source.len());
    let mut state = match resume {
        Some(s) => s,
        None => {
            let mut vit = cfg.vit.clone();
            if cfg.normalize_from_corpus {
                let (mean, std) = corpus_pixel_stats(source)?;
                vit.pixel_mean = mean;
                vit.pixel_std = std;
            }
            let mut ssl = cfg.ssl.clone();
            ssl.total_steps = total;
            TrainState::new(&vit, &ssl, derive_seed(seed, &[0]))?
        }
    };
    let end = opts.stop_at.map_or(total, |s| s.min(total));
    let ckpt = |state: &TrainState| -> Result<()> {
        if let Some(dir) = &opts.checkpoint_dir {
            state.save(&dir.join(CHECKPOINT_STEM))?;
        }
        Ok(())
    };
    while state.step < end {
        let step = state.step;
        let batch = batch_for_step(source, cfg, &state.ssl.augment, seed, step)?;
        let loss = ibot_step(&mut state, &batch, derive_seed(seed, &[4, step]))?;
        on_step(&loss)?;
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            ckpt(&state)?;
        }
    }
    ckpt(&state)?;
    let encoder = export_teacher_encoder(&state)?;
    if let Some(dir) = &opts.checkpoint_dir {
        encoder.save(&dir.join(ENCODER_STEM), Dtype::F32)?;
    }
    Ok((state, encoder))
}

/// Convenience wrapper used by tests and the CLI: frozen CLS embeddings of a
/// list of images.
pub fn embed_all(encoder: &ModelWeights, images: &[RgbImage]) -> Result<Vec<Vec<f64>>> {
    images.iter().map(|im| backbone::embed_cls(encoder, im)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssl::augment::identity_pair;
    use image::Rgb;

    pub(crate) fn tiny() -> ViTConfig {
        ViTConfig {
            patch_size: 64,
            depth: 1,
            embed_dim: 16,
            heads: 2,
            head_hidden_dim: 16,
            head_bottleneck_dim: 8,
            head_out_dim: 12,
            ..ViTConfig::vit_tiny_desk()
        }
    }

    fn img(seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(256, 256, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
    }

    #[test]
    fn lambda_zero_and_no_mask_isolates_cls_term() {
        let ssl = SslConfig {
            lambda_mim: 0.0,
            mask_ratio_range: (0.0, 0.0),
            ..Default::default()
        };
        let state = TrainState::new(&tiny(), &ssl, 1).unwrap();
        let batch = vec![identity_pair(&img(1)), identity_pair(&img(2))];
        let obj = ibot_objective(&state, &batch, 5).unwrap();
        assert_eq!(obj.loss_mim, 0.0);
        assert_eq!(obj.total, obj.loss_cls);
        assert!(obj.teacher_patch.is_none());
    }

    #[test]
    fn step_is_deterministic_and_advances() {
        let state = TrainState::new(&tiny(), &SslConfig::default(), 1).unwrap();
        let batch = vec![identity_pair(&img(3))];
        let mut a = state.clone();
        let mut b = state.clone();
        let la = ibot_step(&mut a, &batch, 11).unwrap();
        let lb = ibot_step(&mut b, &batch, 11).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        assert_eq!(a.step, 1);
        assert_ne!(a.student, state.student);
        assert!(ibot_step(&mut a, &[], 1).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut state = TrainState::new(&tiny(), &SslConfig::default(), 2).unwrap();
        ibot_step(&mut state, &[identity_pair(&img(4))], 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck");
        state.save(&stem).unwrap();
        let back = TrainState::load(&stem).unwrap();
        assert_eq!(back, state);
    }

    #[test]
    fn zero_step_run_exports_initialisation() {
        let cfg = PretrainConfig {
            vit: tiny(),
            max_steps: Some(0),
            normalize_from_corpus: false,
            ..Default::default()
        };
        let corpus = vec![img(1), img(2)];
        let (state, enc) =
            pretrain(&corpus, &cfg, 9, &RunOptions::default(), None, &mut |_| Ok(())).unwrap();
        let init = ModelWeights::init(&cfg.vit, derive_seed(9, &[0])).unwrap();
        assert_eq!(enc, init.backbone_only());
        assert_eq!(state.step, 0);
    }
}
