//! Deterministic training loops, preprocessing and sampling.
//!
//! One run is single-threaded and bit-reproducible: every random draw comes
//! from a stream derived from the run seed, and batches are assembled in the
//! sampler's order.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{Label, Manifest};
use crate::error::{Error, Result};
use crate::losses::{
    inverse_frequency_weights, total_loss, ClassWeights, DistillParams, FeatureMap, HintAdapter,
    LossInputs, Mechanism,
};
use crate::model::{
    build_model, BackboneConfig, Classifier, LateFusion, ModuleFlags, Role, DEFAULT_INPUT_SIZE,
};
use crate::nn::resize::resize_plane_f64;
use crate::nn::{AdamW, Parameterized, Tensor};
use crate::seeding::rng_for;

pub const NORMALIZE_MEAN: f64 = 0.5;
pub const NORMALIZE_STD: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Shuffled,
    ClassBalanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub input_size: usize,
    pub weight_decay: f64,
    pub sampler: SamplerMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 16,
            epochs: 5,
            input_size: DEFAULT_INPUT_SIZE,
            weight_decay: 0.01,
            sampler: SamplerMode::Shuffled,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // Written so that a NaN learning rate is rejected too.
        let lr_positive = self.learning_rate > 0.0;
        if !lr_positive || self.batch_size == 0 || self.input_size == 0 || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "learning rate, batch size and input size must be positive; weight decay non-negative".into(),
            ));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW {
        AdamW::new(self.learning_rate as f32, self.weight_decay as f32)
    }
}

/// Decode → grayscale → bilinear resize → [0,1] → standardize; shape (1, S, S).
pub fn preprocess(path: &Path, input_size: usize) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane: Vec<f64> = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    let resized = resize_plane_f64(&plane, h, w, input_size, input_size);
    let data = resized
        .iter()
        .map(|&v| ((v - NORMALIZE_MEAN) / NORMALIZE_STD) as f32)
        .collect();
    Ok(Tensor::from_vec(&[1, input_size, input_size], data))
}

/// Decoded-image cache shared by every run of one process.
#[derive(Debug, Default)]
pub struct ImageStore {
    input_size: usize,
    cache: Mutex<HashMap<PathBuf, Arc<Tensor>>>,
}

impl ImageStore {
    pub fn new(input_size: usize) -> Self {
        Self {
            input_size,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn get(&self, path: &Path) -> Result<Arc<Tensor>> {
        if let Some(t) = self.cache.lock().expect("image cache poisoned").get(path) {
            return Ok(t.clone());
        }
        let t = Arc::new(preprocess(path, self.input_size)?);
        self.cache
            .lock()
            .expect("image cache poisoned")
            .insert(path.to_path_buf(), t.clone());
        Ok(t)
    }
}

/// Index stream for one epoch.
pub fn make_sampler(labels: &[Label], mode: SamplerMode, seed: u64) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::Empty("sampler over zero examples".into()));
    }
    let mut rng = rng_for(seed, "sampler");
    match mode {
        SamplerMode::Shuffled => {
            let mut idx: Vec<usize> = (0..labels.len()).collect();
            idx.shuffle(&mut rng);
            Ok(idx)
        }
        SamplerMode::ClassBalanced => {
            let by_class: [Vec<usize>; 2] = [Label::Negative, Label::Positive]
                .map(|c| (0..labels.len()).filter(|&i| labels[i] == c).collect());
            if let Some(c) = by_class.iter().position(|v| v.is_empty()) {
                return Err(Error::InvalidInput(format!(
                    "class-balanced sampling needs both classes; class {c} is empty"
                )));
            }
            Ok((0..labels.len())
                .map(|_| {
                    let class = &by_class[rng.gen_range(0..2)];
                    class[rng.gen_range(0..class.len())]
                })
                .collect())
        }
    }
}

/// Training or evaluation images with labels and stable ids.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub images: Vec<Arc<Tensor>>,
    pub labels: Vec<Label>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Loads the records at `indices` of `manifest`.
    pub fn from_manifest(
        manifest: &Manifest,
        indices: &[usize],
        store: &ImageStore,
    ) -> Result<Self> {
        let mut d = Dataset::default();
        for &i in indices {
            let r = &manifest.records[i];
            d.ids.push(r.image_id.clone());
            d.images.push(store.get(&r.image_path)?);
            d.labels.push(r.label);
        }
        Ok(d)
    }

    /// The paired CT of every X-ray at `indices`, in the same order.
    pub fn paired_ct(manifest: &Manifest, indices: &[usize], store: &ImageStore) -> Result<Self> {
        let mut missing = Vec::new();
        let mut d = Dataset::default();
        for &i in indices {
            let x = &manifest.records[i];
            match manifest.paired_ct(&x.image_id) {
                Some(ct) => {
                    d.ids.push(ct.image_id.clone());
                    d.images.push(store.get(&ct.image_path)?);
                    d.labels.push(x.label);
                }
                None => missing.push(x.image_id.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingPairedCt(missing));
        }
        Ok(d)
    }

    fn batch(&self, idx: &[usize]) -> Tensor {
        let items: Vec<&Tensor> = idx.iter().map(|&i| self.images[i].as_ref()).collect();
        Tensor::stack(&items)
    }

    fn class_weights(&self) -> ClassWeights {
        let pos = self.labels.iter().filter(|l| l.is_positive()).count();
        inverse_frequency_weights([self.len() - pos, pos]).unwrap_or_else(|_| {
            log::warn!("training set holds a single class; using unit class weights");
            ClassWeights::UNIT
        })
    }
}

/// Per-step training losses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrajectory {
    /// (epoch, step within epoch, batch loss).
    pub steps: Vec<(usize, usize, f64)>,
}

impl LossTrajectory {
    pub fn epoch_means(&self) -> Vec<f64> {
        let n_epochs = self.steps.iter().map(|s| s.0 + 1).max().unwrap_or(0);
        (0..n_epochs)
            .map(|e| {
                let v: Vec<f64> = self
                    .steps
                    .iter()
                    .filter(|s| s.0 == e)
                    .map(|s| s.2)
                    .collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,loss\n");
        for (e, s, l) in &self.steps {
            out.push_str(&format!("{e},{s},{l}\n"));
        }
        out
    }
}

/// Frozen per-image teacher outputs used as soft targets.
#[derive(Debug, Clone)]
pub struct TeacherSignal {
    pub logits: [f64; 2],
    /// (1, C, H, W) feature at the teacher's tap stage.
    pub tap: Arc<Tensor>,
}

fn logits_f64(t: &Tensor) -> Vec<[f64; 2]> {
    t.data
        .chunks(2)
        .map(|r| [r[0] as f64, r[1] as f64])
        .collect()
}

fn positive_prob(z: [f64; 2]) -> f64 {
    let d = z[1] - z[0];
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size)
}

/// Positive-class probabilities for every image.
pub fn predict_scores(
    model: &mut Classifier,
    data: &Dataset,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for b in batches(&idx, batch_size.max(1)) {
        let o = model.forward(&data.batch(b), false)?;
        out.extend(logits_f64(&o.logits).into_iter().map(positive_prob));
    }
    Ok(out)
}

/// Logits and tap features of a frozen teacher for every image.
pub fn teacher_signals(
    model: &mut Classifier,
    data: &Dataset,
    batch_size: usize,
) -> Result<Vec<TeacherSignal>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for b in batches(&idx, batch_size.max(1)) {
        let o = model.forward(&data.batch(b), false)?;
        let tap = o.tap_feature();
        let (_, c, h, w) = tap.dims4();
        for (k, z) in logits_f64(&o.logits).into_iter().enumerate() {
            out.push(TeacherSignal {
                logits: z,
                tap: Arc::new(Tensor::from_vec(&[1, c, h, w], tap.item(k).to_vec())),
            });
        }
    }
    Ok(out)
}

fn accuracy(scores: &[f64], labels: &[Label]) -> f64 {
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| (**s >= 0.5) == l.is_positive())
        .count();
    hits as f64 / scores.len().max(1) as f64
}

/// A trained single-modality classifier and its training history.
#[derive(Debug)]
pub struct TrainedClassifier {
    pub model: Classifier,
    pub adapter: Option<HintAdapter>,
    pub losses: LossTrajectory,
}

/// Shared loop behind teacher and student training.
fn fit(
    mut model: Classifier,
    train: &Dataset,
    config: &TrainConfig,
    params: &DistillParams,
    teacher: Option<&[TeacherSignal]>,
) -> Result<TrainedClassifier> {
    config.validate()?;
    params.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split has no images".into()));
    }
    let mech = params.mechanism;
    if mech.needs_teacher() {
        match teacher {
            Some(t) if t.len() == train.len() => {}
            Some(t) => {
                return Err(Error::Shape(format!(
                    "{} teacher signals for {} training images",
                    t.len(),
                    train.len()
                )))
            }
            None => return Err(Error::Config(format!("{mech:?} requires a teacher"))),
        }
    }
    let weights = train.class_weights();
    let mut adapter = match (mech, teacher) {
        (Mechanism::FeatureHint, Some(t)) => {
            let student_c = *model
                .config
                .stage_widths
                .get(model.tap_index())
                .expect("tap stage");
            let teacher_c = t[0].tap.shape[1];
            Some(HintAdapter::new(
                student_c,
                teacher_c,
                &mut rng_for(config.seed, "hint_adapter"),
            ))
        }
        _ => None,
    };
    let mut opt = config.optimizer();
    let mut losses = LossTrajectory::default();
    for epoch in 0..config.epochs {
        let order = make_sampler(
            &train.labels,
            config.sampler,
            crate::seeding::derive_seed(config.seed, &format!("epoch/{epoch}")),
        )?;
        for (step, b) in batches(&order, config.batch_size).enumerate() {
            let x = train.batch(b);
            let out = model.forward(&x, true)?;
            let logits = logits_f64(&out.logits);
            let labels: Vec<usize> = b.iter().map(|&i| train.labels[i].index()).collect();
            let t_logits: Option<Vec<[f64; 2]>> =
                teacher.map(|t| b.iter().map(|&i| t[i].logits).collect());
            let (s_tap, t_tap) = if mech.uses_tap() {
                let t = teacher.expect("checked above");
                let items: Vec<&Tensor> = b.iter().map(|&i| t[i].tap.as_ref()).collect();
                let stacked = Tensor::stack(&items);
                let (n, c, h, w) = (
                    stacked.shape[0],
                    stacked.shape[2],
                    stacked.shape[3],
                    stacked.shape[4],
                );
                let t_map = FeatureMap::new(
                    [n, c, h, w],
                    stacked.data.iter().map(|&v| v as f64).collect(),
                );
                (
                    Some(FeatureMap::from_tensor(out.tap_feature())),
                    Some(t_map),
                )
            } else {
                (None, None)
            };
            let loss = total_loss(
                LossInputs {
                    student_logits: &logits,
                    teacher_logits: t_logits.as_deref(),
                    labels: &labels,
                    student_tap: s_tap.as_ref(),
                    teacher_tap: t_tap.as_ref(),
                },
                params,
                weights,
                adapter.as_ref(),
            )?;
            if !loss.value.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite training loss at epoch {epoch} step {step}"
                )));
            }
            losses.steps.push((epoch, step, loss.value));
            model.zero_grad();
            let dlogits = Tensor::from_vec(
                &out.logits.shape,
                loss.d_logits
                    .iter()
                    .flat_map(|g| [g[0] as f32, g[1] as f32])
                    .collect(),
            );
            let tap_grad = loss
                .d_student_tap
                .as_ref()
                .map(|g| (out.tap, g.to_tensor()));
            model.backward(&dlogits, tap_grad);
            match (&mut adapter, &loss.d_adapter) {
                (Some(a), Some((dw, db))) => {
                    a.zero_grad();
                    for (g, d) in a.weight.grad.iter_mut().zip(dw) {
                        *g = *d as f32;
                    }
                    for (g, d) in a.bias.grad.iter_mut().zip(db) {
                        *g = *d as f32;
                    }
                    opt.step_many(&mut [&mut model, a]);
                }
                _ => opt.step(&mut model),
            }
        }
    }
    Ok(TrainedClassifier {
        model,
        adapter,
        losses,
    })
}

/// Trains a teacher-backbone classifier with weighted cross-entropy. The
/// returned model is never updated again.
pub fn train_teacher(
    train: &Dataset,
    config: &TrainConfig,
    flags: ModuleFlags,
) -> Result<TrainedClassifier> {
    if train.is_empty() {
        return Err(Error::Empty("teacher training split has no images".into()));
    }
    let cfg = BackboneConfig::for_role(Role::Teacher).with_input_size(config.input_size);
    let model = build_model(
        &cfg,
        flags,
        crate::seeding::derive_seed(config.seed, "teacher"),
    )?;
    fit(model, train, config, &DistillParams::default(), None)
}

/// Trains the X-ray student under any objective. `teacher` must hold one
/// signal per training image when the mechanism needs a teacher.
pub fn train_student(
    train: &Dataset,
    config: &TrainConfig,
    params: &DistillParams,
    flags: ModuleFlags,
    teacher: Option<&[TeacherSignal]>,
) -> Result<TrainedClassifier> {
    let cfg = BackboneConfig::for_role(Role::Student).with_input_size(config.input_size);
    let model = build_model(
        &cfg,
        flags,
        crate::seeding::derive_seed(config.seed, "student"),
    )?;
    fit(model, train, config, params, teacher)
}

#[derive(Debug)]
pub struct TrainedFusion {
    pub model: LateFusion,
    pub losses: LossTrajectory,
}

/// Trains the two-branch model on index-aligned X-ray/CT pairs.
pub fn train_late_fusion(
    xray: &Dataset,
    ct: &Dataset,
    config: &TrainConfig,
) -> Result<TrainedFusion> {
    config.validate()?;
    if xray.is_empty() || xray.len() != ct.len() {
        return Err(Error::Shape(format!(
            "{} X-rays vs {} CTs",
            xray.len(),
            ct.len()
        )));
    }
    let mut model = LateFusion::new(
        config.input_size,
        crate::seeding::derive_seed(config.seed, "late_fusion"),
    )?;
    let weights = xray.class_weights();
    let params = DistillParams::default();
    let mut opt = config.optimizer();
    let mut losses = LossTrajectory::default();
    for epoch in 0..config.epochs {
        let order = make_sampler(
            &xray.labels,
            config.sampler,
            crate::seeding::derive_seed(config.seed, &format!("epoch/{epoch}")),
        )?;
        for (step, b) in batches(&order, config.batch_size).enumerate() {
            let logits_t = model.forward(Some(&xray.batch(b)), Some(&ct.batch(b)), true)?;
            let logits = logits_f64(&logits_t);
            let labels: Vec<usize> = b.iter().map(|&i| xray.labels[i].index()).collect();
            let loss = total_loss(
                LossInputs {
                    student_logits: &logits,
                    teacher_logits: None,
                    labels: &labels,
                    student_tap: None,
                    teacher_tap: None,
                },
                &params,
                weights,
                None,
            )?;
            losses.steps.push((epoch, step, loss.value));
            model.zero_grad();
            let d = Tensor::from_vec(
                &logits_t.shape,
                loss.d_logits
                    .iter()
                    .flat_map(|g| [g[0] as f32, g[1] as f32])
                    .collect(),
            );
            model.backward(&d);
            opt.step(&mut model);
        }
    }
    Ok(TrainedFusion { model, losses })
}

pub fn predict_fusion_scores(
    model: &mut LateFusion,
    xray: &Dataset,
    ct: &Dataset,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..xray.len()).collect();
    let mut out = Vec::with_capacity(xray.len());
    for b in batches(&idx, batch_size.max(1)) {
        let z = model.forward(Some(&xray.batch(b)), Some(&ct.batch(b)), false)?;
        out.extend(logits_f64(&z).into_iter().map(positive_prob));
    }
    Ok(out)
}

/// Training accuracy of a classifier on its own training data.
pub fn training_accuracy(
    model: &mut Classifier,
    train: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    Ok(accuracy(
        &predict_scores(model, train, batch_size)?,
        &train.labels,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub image_id: String,
    pub label: Label,
    pub score: f64,
    pub prediction: Label,
}

/// Per-image validation outcome of one run plus its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub split_id: String,
    pub rows: Vec<PredictionRow>,
    pub wall_time_s: f64,
}

impl RunResult {
    pub fn new(
        run_id: &str,
        config_hash: &str,
        seed: u64,
        split_id: &str,
        val: &Dataset,
        scores: &[f64],
    ) -> Result<Self> {
        if scores.len() != val.len() {
            return Err(Error::Shape(format!(
                "{} scores for {} validation images",
                scores.len(),
                val.len()
            )));
        }
        if let Some(s) = scores
            .iter()
            .find(|s| !(s.is_finite() && (0.0..=1.0).contains(*s)))
        {
            return Err(Error::InvalidInput(format!("score {s} outside [0,1]")));
        }
        let rows = val
            .ids
            .iter()
            .zip(&val.labels)
            .zip(scores)
            .map(|((id, &label), &score)| PredictionRow {
                image_id: id.clone(),
                label,
                score,
                prediction: if score >= 0.5 {
                    Label::Positive
                } else {
                    Label::Negative
                },
            })
            .collect();
        Ok(Self {
            run_id: run_id.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            split_id: split_id.to_string(),
            rows,
            wall_time_s: 0.0,
        })
    }

    pub fn scores(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.score).collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.rows.iter().map(|r| r.label.is_positive()).collect()
    }

    /// `image_id,label,score,prediction`; scores use the shortest exact
    /// decimal form so they parse back bit-identically.
    pub fn predictions_csv(&self) -> String {
        let mut out = String::from("image_id,label,score,prediction\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.image_id,
                r.label.index(),
                r.score,
                r.prediction.index()
            ));
        }
        out
    }
}

/// Parses a predictions table back into rows.
pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let score: f64 = field(2)
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad score '{}'", field(2))))?;
        rows.push(PredictionRow {
            image_id: field(0).to_string(),
            label: field(1).parse()?,
            score,
            prediction: field(3).parse()?,
        });
    }
    Ok(rows)
}

/// Wall-clock timer for run metadata.
pub struct Stopwatch(Instant);

impl Stopwatch {
    pub fn start() -> Self {
        Self(Instant::now())
    }

    pub fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}
