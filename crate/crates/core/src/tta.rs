//! Test-time adaptation by input editing: a small source classifier, the
//! softmax ensemble over edited copies, and per-corruption evaluation.

use std::time::Instant;

use corredit_nn::layers::{Conv2d, GroupNorm, Linear};
use corredit_nn::{Adam, Bound, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::consistency::{sample_cm_batch, ConsistencyModel};
use crate::corruption::{apply_test_corruption, CorruptionKind, SeverityTable, TestCorruption};
use crate::data::LabeledImage;
use crate::diffusion::{sample_dpm_batch, Denoiser};
use crate::guidance::GuidanceConfig;
use crate::image::ImageTensor;
use crate::seed::{self, tag};
use crate::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub classes: usize,
    pub width: usize,
    pub groups: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            classes: crate::data::SHAPE_CLASSES,
            width: 16,
            groups: 4,
        }
    }
}

/// Four conv stages (the last three strided), global pooling, linear head.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub params: ParamStore<f32>,
    convs: Vec<(Conv2d, GroupNorm)>,
    head: Linear,
}

impl Classifier {
    pub fn init(config: &ClassifierConfig, seed: u64) -> Result<Self> {
        if config.classes < 2 || config.width == 0 || config.width % config.groups != 0 {
            return Err(Error::Config(format!("invalid classifier config {config:?}")));
        }
        let mut rng = seed::stream(seed, &[tag::CLASSIFIER, 0]);
        let mut params = ParamStore::new();
        let w = config.width;
        let chans = [(3, w, 1), (w, 2 * w, 2), (2 * w, 4 * w, 2), (4 * w, 4 * w, 2)];
        let convs = chans
            .iter()
            .enumerate()
            .map(|(i, &(a, b, s))| {
                (
                    Conv2d::new(&mut params, &format!("conv{i}"), a, b, 3, s, &mut rng),
                    GroupNorm::new(&mut params, &format!("norm{i}"), b, config.groups),
                )
            })
            .collect();
        let head = Linear::new(&mut params, "head", 4 * w, config.classes, &mut rng);
        Ok(Self {
            config: config.clone(),
            params,
            convs,
            head,
        })
    }

    /// Rebuilds the layer layout around existing parameters.
    pub fn with_params(config: &ClassifierConfig, params: ParamStore<f32>) -> Result<Self> {
        let mut c = Self::init(config, 0)?;
        if !c.params.same_layout(&params) {
            return Err(Error::Config(
                "classifier parameters do not match the configuration".into(),
            ));
        }
        c.params = params;
        Ok(c)
    }

    fn forward(&self, p: &Bound<f32>, x: &Var<f32>) -> Result<Var<f32>> {
        let mut h = x.clone();
        for (conv, norm) in &self.convs {
            h = norm.forward(p, &conv.forward(p, &h)?)?.silu();
        }
        Ok(self.head.forward(p, &h.global_avg_pool()?)?)
    }

    /// Logits `[B, classes]` for a batch of images.
    pub fn logits(&self, images: &[&ImageTensor]) -> Result<Tensor<f32>> {
        let g = Graph::inference();
        let p = self.params.bind(&g);
        Ok(self.forward(&p, &g.constant(image_batch(images)?))?.to_tensor())
    }

    /// Softmax probabilities for each image.
    pub fn predict_probs(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<f64>>> {
        let logits = self.logits(images)?;
        Ok(logits
            .data()
            .chunks(self.config.classes)
            .map(|row| softmax(&row.iter().map(|&v| v as f64).collect::<Vec<_>>()))
            .collect())
    }

    pub fn predict_prob(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        Ok(self.predict_probs(&[image])?.remove(0))
    }

    /// Top-1 accuracy over a labelled set, evaluated in chunks.
    pub fn accuracy(&self, data: &[LabeledImage]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("accuracy over an empty set".into()));
        }
        let mut correct = 0;
        for chunk in data.chunks(64) {
            let probs = self.predict_probs(&chunk.iter().map(|l| &l.image).collect::<Vec<_>>())?;
            correct += probs.iter().zip(chunk).filter(|(p, l)| argmax(p) == l.label).count();
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

/// `[B, 3, H, W]` with pixel values mapped to `[-1, 1]`.
fn image_batch(images: &[&ImageTensor]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (h, w, c) = first.shape();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        img.check_same_shape(first)?;
        data.extend(img.data().iter().map(|v| 2.0 * v - 1.0));
    }
    Ok(Tensor::new(&[images.len(), c, h, w], data)?)
}

/// Numerically stable softmax.
///
/// ```
/// let p = corredit::tta::softmax(&[1.0, 1.0, 1.0, 1.0]);
/// assert_eq!(p, vec![0.25; 4]);
/// ```
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainClassifierConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    pub target_accuracy: f64,
}

impl Default for TrainClassifierConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 3e-3,
            max_steps: 3000,
            eval_every: 100,
            target_accuracy: 0.95,
        }
    }
}

/// Outcome of classifier training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub steps: usize,
    pub val_accuracy: f64,
    pub losses: Vec<f64>,
}

/// Trains until validation accuracy reaches the target (checked every
/// `eval_every` steps) or the step budget runs out, which is an error.
pub fn train_classifier(
    train: &[LabeledImage],
    val: &[LabeledImage],
    model_config: &ClassifierConfig,
    config: &TrainClassifierConfig,
    seed: u64,
) -> Result<(Classifier, ClassifierReport)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(
            "classifier training needs train and validation data".into(),
        ));
    }
    if let Some(bad) = train.iter().chain(val).find(|l| l.label >= model_config.classes) {
        return Err(Error::InvalidArgument(format!(
            "label {} outside {} classes",
            bad.label, model_config.classes
        )));
    }
    let mut model = Classifier::init(model_config, seed)?;
    let mut opt = Adam::new(config.lr);
    let mut rng = seed::stream(seed, &[tag::CLASSIFIER, 1]);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::new();
    let mut val_accuracy = 0.0;
    for step in 1..=config.max_steps {
        let mut idx = Vec::with_capacity(config.batch_size);
        while idx.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let images: Vec<&ImageTensor> = idx.iter().map(|&i| &train[i].image).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| train[i].label).collect();
        let g = Graph::new();
        let p = model.params.bind(&g);
        let loss = model
            .forward(&p, &g.constant(image_batch(&images)?))?
            .cross_entropy(&labels)?;
        losses.push(loss.value().data()[0] as f64);
        let grads = p.collect_grads(&g.backward(&loss)?);
        drop(p);
        opt.step(&mut model.params, &grads)?;
        if step % config.eval_every.max(1) == 0 || step == config.max_steps {
            val_accuracy = model.accuracy(val)?;
            if val_accuracy >= config.target_accuracy {
                return Ok((
                    model,
                    ClassifierReport {
                        steps: step,
                        val_accuracy,
                        losses,
                    },
                ));
            }
        }
    }
    Err(Error::NotConverged(format!(
        "classifier reached {val_accuracy:.3} validation accuracy after {} steps, target {}",
        config.max_steps, config.target_accuracy
    )))
}

/// `0.5 p(x0) + 0.5 mean_i p(edit_i)`.
///
/// ```
/// use corredit::tta::ensemble_probs;
/// let y = ensemble_probs(&[0.2, 0.8], &[vec![0.6, 0.4], vec![1.0, 0.0]]).unwrap();
/// assert_eq!(y, vec![0.5, 0.5]);
/// ```
pub fn ensemble_probs(original: &[f64], edits: &[Vec<f64>]) -> Result<Vec<f64>> {
    if edits.is_empty() {
        return Err(Error::InvalidArgument(
            "ensemble needs at least one edited image".into(),
        ));
    }
    if edits.iter().any(|e| e.len() != original.len()) {
        return Err(Error::Shape("probability vectors differ in length".into()));
    }
    let n = edits.len() as f64;
    Ok((0..original.len())
        .map(|k| 0.5 * original[k] + 0.5 * (edits.iter().map(|e| e[k]).sum::<f64>() / n))
        .collect())
}

pub fn ensemble_predict(classifier: &Classifier, x0: &ImageTensor, edited: &[ImageTensor]) -> Result<Vec<f64>> {
    if edited.is_empty() {
        return Err(Error::InvalidArgument(
            "ensemble needs at least one edited image".into(),
        ));
    }
    let mut all = vec![x0];
    all.extend(edited);
    let mut probs = classifier.predict_probs(&all)?;
    let rest = probs.split_off(1);
    ensemble_probs(&probs[0], &rest)
}

/// MSE and PSNR (peak 1), with PSNR capped at [`PSNR_CAP`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerceptualDistance {
    pub mse: f64,
    pub psnr: f64,
}

pub fn perceptual_distance(a: &ImageTensor, b: &ImageTensor) -> Result<PerceptualDistance> {
    let mse = a.mse(b)?;
    let psnr = if mse == 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    };
    Ok(PerceptualDistance { mse, psnr })
}

/// Anything that maps corrupted images to edited ones.
pub trait Editor {
    fn name(&self) -> String;
    /// Network evaluations per edited image.
    fn nfe_per_edit(&self) -> u64;
    /// Evaluations counted by the underlying model so far.
    fn counted_nfe(&self) -> u64;
    fn edit_batch(&self, images: &[ImageTensor], seeds: &[u64]) -> Result<Vec<ImageTensor>>;
}

/// Returns its input; the ensemble then reduces to the source prediction.
pub struct IdentityEditor;

impl Editor for IdentityEditor {
    fn name(&self) -> String {
        "identity".into()
    }
    fn nfe_per_edit(&self) -> u64 {
        0
    }
    fn counted_nfe(&self) -> u64 {
        0
    }
    fn edit_batch(&self, images: &[ImageTensor], _seeds: &[u64]) -> Result<Vec<ImageTensor>> {
        Ok(images.to_vec())
    }
}

pub struct DpmEditor<'a> {
    pub model: &'a Denoiser,
    pub steps: usize,
    pub guidance: GuidanceConfig,
}

impl Editor for DpmEditor<'_> {
    fn name(&self) -> String {
        format!("dpm-{}", self.steps)
    }
    fn nfe_per_edit(&self) -> u64 {
        3 * self.steps as u64
    }
    fn counted_nfe(&self) -> u64 {
        self.model.nfe()
    }
    fn edit_batch(&self, images: &[ImageTensor], seeds: &[u64]) -> Result<Vec<ImageTensor>> {
        sample_dpm_batch(self.model, images, self.steps, &self.guidance, seeds)
    }
}

pub struct CmEditor<'a> {
    pub model: &'a ConsistencyModel,
    pub nfe: usize,
    pub omega: (f64, f64),
}

impl Editor for CmEditor<'_> {
    fn name(&self) -> String {
        format!("cm-{}", self.nfe)
    }
    fn nfe_per_edit(&self) -> u64 {
        self.nfe as u64
    }
    fn counted_nfe(&self) -> u64 {
        self.model.nfe()
    }
    fn edit_batch(&self, images: &[ImageTensor], seeds: &[u64]) -> Result<Vec<ImageTensor>> {
        sample_cm_batch(self.model, images, self.nfe, self.omega, seeds)
    }
}

/// Test images under one corruption, with their clean originals.
#[derive(Debug, Clone)]
pub struct CorruptedSet {
    pub corruption: TestCorruption,
    pub clean: Vec<ImageTensor>,
    pub corrupted: Vec<LabeledImage>,
}

/// Applies every `(kind, severity)` of the suite to `test`, one derived seed
/// per image.
pub fn corrupted_benchmark(
    test: &[LabeledImage],
    kinds: &[CorruptionKind],
    severities: &[u8],
    table: &SeverityTable,
    seed: u64,
) -> Result<Vec<CorruptedSet>> {
    let mut sets = Vec::new();
    for &kind in kinds {
        for &sev in severities {
            let corruption = TestCorruption::new(kind, sev)?;
            let corrupted = test
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    Ok(LabeledImage {
                        image: apply_test_corruption(&l.image, corruption, table, seed::derive(seed, &[i as u64]))?,
                        label: l.label,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            sets.push(CorruptedSet {
                corruption,
                clean: test.iter().map(|l| l.image.clone()).collect(),
                corrupted,
            });
        }
    }
    Ok(sets)
}

/// Results for one corruption kind and severity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTARow {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub samples: usize,
    pub source_accuracy: f64,
    /// Ensemble accuracy using the first `i + 1` edits, for `i < n_edits`.
    pub tta_accuracy_by_edits: Vec<f64>,
    pub mse_corrupted: f64,
    pub mse_edited: f64,
    pub psnr_corrupted: f64,
    pub psnr_edited: f64,
}

impl TTARow {
    pub fn tta_accuracy(&self) -> f64 {
        *self.tta_accuracy_by_edits.last().expect("at least one edit")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTAResult {
    pub editor: String,
    pub n_edits: usize,
    pub nfe_per_sample: u64,
    pub wall_seconds_per_sample: f64,
    pub rows: Vec<TTARow>,
}

impl TTAResult {
    pub fn mean_source_accuracy(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.source_accuracy))
    }

    pub fn mean_tta_accuracy(&self) -> f64 {
        mean(self.rows.iter().map(TTARow::tta_accuracy))
    }

    /// Mean ensemble accuracy with the first `n` edits.
    pub fn mean_tta_accuracy_with(&self, n: usize) -> Option<f64> {
        if n == 0 || n > self.n_edits {
            return None;
        }
        Some(mean(self.rows.iter().map(|r| r.tta_accuracy_by_edits[n - 1])))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TTAConfig {
    pub n_edits: usize,
    /// Images edited per editor call.
    pub chunk: usize,
}

impl Default for TTAConfig {
    fn default() -> Self {
        Self { n_edits: 4, chunk: 32 }
    }
}

/// Seed of edit `e` of sample `i` in set `s`.
pub fn edit_seed(root: u64, set: usize, sample: usize, edit: usize) -> u64 {
    seed::derive(root, &[tag::SAMPLE, set as u64, sample as u64, edit as u64])
}

/// Edits every corrupted image `n_edits` times with distinct seeds, scores
/// the softmax ensemble, and records NFE, wall clock and edit distances.
pub fn evaluate_tta(
    classifier: &Classifier,
    editor: &dyn Editor,
    sets: &[CorruptedSet],
    config: &TTAConfig,
    seed: u64,
) -> Result<TTAResult> {
    if config.n_edits == 0 || config.chunk == 0 {
        return Err(Error::Config("n_edits and chunk must be positive".into()));
    }
    let nfe_before = editor.counted_nfe();
    let mut wall = 0.0;
    let mut total = 0usize;
    let mut rows = Vec::new();
    for (si, set) in sets.iter().enumerate() {
        let n = set.corrupted.len();
        if n == 0 || set.clean.len() != n {
            return Err(Error::InvalidArgument(format!(
                "set {si} has {n} corrupted and {} clean images",
                set.clean.len()
            )));
        }
        total += n;
        let images: Vec<ImageTensor> = set.corrupted.iter().map(|l| l.image.clone()).collect();
        let source = chunked_probs(classifier, &images)?;
        let mut edit_probs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n];
        let (mut mse_e, mut psnr_e) = (0.0, 0.0);
        for e in 0..config.n_edits {
            let mut edited = Vec::with_capacity(n);
            for (ci, chunk) in images.chunks(config.chunk).enumerate() {
                let seeds: Vec<u64> = (0..chunk.len())
                    .map(|j| edit_seed(seed, si, ci * config.chunk + j, e))
                    .collect();
                let t0 = Instant::now();
                edited.extend(editor.edit_batch(chunk, &seeds)?);
                wall += t0.elapsed().as_secs_f64();
            }
            for (i, p) in chunked_probs(classifier, &edited)?.into_iter().enumerate() {
                edit_probs[i].push(p);
            }
            let (mut m, mut p) = (0.0, 0.0);
            for (ed, cl) in edited.iter().zip(&set.clean) {
                let d = perceptual_distance(ed, cl)?;
                m += d.mse;
                p += d.psnr;
            }
            mse_e += m / n as f64;
            psnr_e += p / n as f64;
        }
        let (mut mse_c, mut psnr_c) = (0.0, 0.0);
        for (co, cl) in images.iter().zip(&set.clean) {
            let d = perceptual_distance(co, cl)?;
            mse_c += d.mse;
            psnr_c += d.psnr;
        }
        let labels: Vec<usize> = set.corrupted.iter().map(|l| l.label).collect();
        let source_correct = source.iter().zip(&labels).filter(|(p, &l)| argmax(p) == l).count();
        let mut by_edits = Vec::with_capacity(config.n_edits);
        for k in 1..=config.n_edits {
            let mut correct = 0;
            for i in 0..n {
                let y = ensemble_probs(&source[i], &edit_probs[i][..k])?;
                correct += (argmax(&y) == labels[i]) as usize;
            }
            by_edits.push(correct as f64 / n as f64);
        }
        let ne = config.n_edits as f64;
        rows.push(TTARow {
            kind: set.corruption.kind,
            severity: set.corruption.severity,
            samples: n,
            source_accuracy: source_correct as f64 / n as f64,
            tta_accuracy_by_edits: by_edits,
            mse_corrupted: mse_c / n as f64,
            mse_edited: mse_e / ne,
            psnr_corrupted: psnr_c / n as f64,
            psnr_edited: psnr_e / ne,
        });
    }
    let nfe = editor.counted_nfe() - nfe_before;
    Ok(TTAResult {
        editor: editor.name(),
        n_edits: config.n_edits,
        nfe_per_sample: if total == 0 { 0 } else { nfe / total as u64 },
        wall_seconds_per_sample: if total == 0 { 0.0 } else { wall / total as f64 },
        rows,
    })
}

fn chunked_probs(classifier: &Classifier, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        out.extend(classifier.predict_probs(&chunk.iter().collect::<Vec<_>>())?);
    }
    Ok(out)
}
