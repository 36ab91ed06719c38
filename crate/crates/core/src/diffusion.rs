//! Noise-prediction model, its training objective, and DDIM sampling with
//! two-scale classifier-free guidance.

use std::sync::atomic::{AtomicU64, Ordering};

use corredit_nn::{Adam, Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{LatentCodec, LatentTensor};
use crate::corruption::{PairedSample, UNIVERSAL_INSTRUCTION};
use crate::guidance::{cfg_multimodal_batched, GuidanceConfig};
use crate::image::ImageTensor;
use crate::schedule::NoiseSchedule;
use crate::seed::{self, tag};
use crate::unet::{UNet, UNetInput, NULL_INSTRUCTION};
use crate::{Error, Result};

/// Conditioning for one network call. A missing instruction selects the
/// learned null row; a missing image selects the all-zero latent.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub instruction: Option<usize>,
    pub image_latent: Option<LatentTensor>,
}

impl ConditionBundle {
    pub fn full(image_latent: LatentTensor) -> Self {
        Self {
            instruction: Some(UNIVERSAL_INSTRUCTION),
            image_latent: Some(image_latent),
        }
    }

    pub fn instruction_id(&self) -> usize {
        self.instruction.unwrap_or(NULL_INSTRUCTION)
    }
}

/// A network with its parameters, codec and schedule, plus a counter of
/// per-sample network evaluations.
#[derive(Debug)]
pub struct Denoiser {
    pub net: UNet,
    pub params: ParamStore<f32>,
    pub codec: LatentCodec,
    pub schedule: NoiseSchedule,
    nfe: AtomicU64,
}

impl Clone for Denoiser {
    fn clone(&self) -> Self {
        Self::new(self.net.clone(), self.params.clone(), self.codec, self.schedule.clone())
    }
}

impl Denoiser {
    pub fn new(net: UNet, params: ParamStore<f32>, codec: LatentCodec, schedule: NoiseSchedule) -> Self {
        Self {
            net,
            params,
            codec,
            schedule,
            nfe: AtomicU64::new(0),
        }
    }

    /// Network evaluations so far, counted per sample (a batch of `B` adds `B`).
    pub fn nfe(&self) -> u64 {
        self.nfe.load(Ordering::Relaxed)
    }

    /// Records `rows` evaluations made outside [`Denoiser::eps_batch`].
    pub fn count_evaluations(&self, rows: usize) {
        self.nfe.fetch_add(rows as u64, Ordering::Relaxed);
    }

    pub fn reset_nfe(&self) {
        self.nfe.store(0, Ordering::Relaxed);
    }

    pub fn has_guidance_embedding(&self) -> bool {
        self.params.contains(&format!("{}.weight", crate::unet::GUIDANCE_PROJ))
    }

    /// Batched inference call on raw tensors.
    pub fn eps_batch(
        &self,
        z_t: &Tensor<f32>,
        timesteps: &[usize],
        instructions: &[usize],
        image_cond: &Tensor<f32>,
        guidance: Option<&[(f64, f64)]>,
    ) -> Result<Tensor<f32>> {
        let g = Graph::inference();
        let bound = self.params.bind(&g);
        let (z, c) = (g.constant(z_t.clone()), g.constant(image_cond.clone()));
        let out = self.net.forward(
            &bound,
            &UNetInput {
                z_t: &z,
                image_cond: &c,
                timesteps,
                instructions,
                guidance,
            },
        )?;
        let eps = eps_from_output(&z, &out, timesteps, &self.schedule)?;
        self.nfe.fetch_add(timesteps.len() as u64, Ordering::Relaxed);
        Ok(eps.to_tensor())
    }

    /// One noise prediction for a single latent.
    pub fn eps_predict(
        &self,
        z_t: &LatentTensor,
        t: usize,
        cond: &ConditionBundle,
        guidance: Option<(f64, f64)>,
    ) -> Result<LatentTensor> {
        let (c, h, w) = z_t.shape();
        let zero = LatentTensor::zeros(c, h, w);
        let img = cond.image_latent.as_ref().unwrap_or(&zero);
        let out = self.eps_batch(
            &LatentTensor::stack(&[z_t])?,
            &[t],
            &[cond.instruction_id()],
            &LatentTensor::stack(&[img])?,
            guidance.as_ref().map(std::slice::from_ref),
        )?;
        Ok(LatentTensor::unstack(&out)?.remove(0))
    }
}

/// `alpha(t_i) z_i + sigma(t_i) eps_i` per sample of a `[B, ...]` batch.
pub fn add_noise<T: Scalar>(
    z: &Tensor<T>,
    eps: &Tensor<T>,
    timesteps: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    z.check_same_shape(eps)?;
    let b = z.shape().first().copied().unwrap_or(0);
    if b != timesteps.len() || b == 0 {
        return Err(Error::Shape(format!("{} timesteps for batch {b}", timesteps.len())));
    }
    let n = z.numel() / b;
    let mut out = Vec::with_capacity(z.numel());
    for (i, &t) in timesteps.iter().enumerate() {
        let (a, s) = schedule.lookup(t)?;
        let (a, s) = (T::from_f64_lossy(a), T::from_f64_lossy(s));
        out.extend(
            z.data()[i * n..(i + 1) * n]
                .iter()
                .zip(&eps.data()[i * n..(i + 1) * n])
                .map(|(&zv, &ev)| a * zv + s * ev),
        );
    }
    Ok(Tensor::new(z.shape(), out)?)
}

/// Deterministic DDIM hop from `t` to `t_prev` given a noise estimate.
pub fn ddim_step<T: Scalar>(
    z_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!(
            "DDIM needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    z_t.check_same_shape(eps_hat)?;
    let (a, s) = schedule.lookup(t)?;
    let (ap, sp) = schedule.lookup(t_prev)?;
    let (a, s, ap, sp) = (
        T::from_f64_lossy(a),
        T::from_f64_lossy(s),
        T::from_f64_lossy(ap),
        T::from_f64_lossy(sp),
    );
    Ok(z_t.zip_map(eps_hat, |z, e| {
        let z0 = (z - s * e) / a;
        ap * z0 + sp * e
    })?)
}

/// DDIM step whose clean-latent estimate is clamped to `[lo, hi]`; the noise
/// estimate is then recomputed from the clamped value so the step stays on
/// the line through `z_t`.
pub fn ddim_step_clipped<T: Scalar>(
    z_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    (lo, hi): (f64, f64),
) -> Result<Tensor<T>> {
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!(
            "DDIM needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    z_t.check_same_shape(eps_hat)?;
    let (a, s) = schedule.lookup(t)?;
    let (ap, sp) = schedule.lookup(t_prev)?;
    let c = T::from_f64_lossy;
    let (a, s, ap, sp, lo, hi) = (c(a), c(s), c(ap), c(sp), c(lo), c(hi));
    Ok(z_t.zip_map(eps_hat, |z, e| {
        let z0 = ((z - s * e) / a).max(lo).min(hi);
        let e = (z - a * z0) / s;
        ap * z0 + sp * e
    })?)
}

/// Noise estimate from the raw network output `F`:
/// `eps_hat = sigma_t z_t + alpha_t F`.
///
/// `F` is the velocity target `alpha eps - sigma z0`, so the clean-latent
/// estimate `alpha z_t - sigma F` never divides by a vanishing `alpha`. The
/// objective is still the noise error.
pub fn eps_from_output<T: Scalar>(
    z_t: &Var<T>,
    out: &Var<T>,
    timesteps: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Var<T>> {
    let mut a = Vec::with_capacity(timesteps.len());
    let mut s = Vec::with_capacity(timesteps.len());
    for &t in timesteps {
        let (at, st) = schedule.lookup(t)?;
        a.push(T::from_f64_lossy(at));
        s.push(T::from_f64_lossy(st));
    }
    Ok(z_t.scale_per_sample(&s)?.add(&out.scale_per_sample(&a)?)?)
}

/// The clean-latent estimate `(z_t - sigma eps_hat) / alpha` inside a DDIM step.
pub fn predict_z0<T: Scalar>(
    z_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let (a, s) = schedule.lookup(t)?;
    let (a, s) = (T::from_f64_lossy(a), T::from_f64_lossy(s));
    Ok(z_t.zip_map(eps_hat, |z, e| (z - s * e) / a)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainDpmConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub p_drop_text: f64,
    pub p_drop_image: f64,
    pub p_drop_both: f64,
    pub grad_clip: f64,
    pub log_every: usize,
    pub timesteps: TimestepSampling,
}

/// Distribution of training timesteps over `1..=T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimestepSampling {
    Uniform,
    /// Density proportional to `min(snr, gamma) / snr`: flat where the
    /// signal-to-noise ratio is below `gamma`, thinned out near `t = 0`.
    MinSnr {
        gamma: f64,
    },
}

impl TimestepSampling {
    /// Cumulative distribution over `t = 1..=T`, or `None` when uniform.
    pub fn cdf(&self, schedule: &NoiseSchedule) -> Result<Option<Vec<f64>>> {
        let gamma = match *self {
            Self::Uniform => return Ok(None),
            Self::MinSnr { gamma } => gamma,
        };
        if !(gamma > 0.0) {
            return Err(Error::Config(format!("min-snr gamma must be positive, got {gamma}")));
        }
        let mut acc = 0.0;
        let mut cdf = Vec::with_capacity(schedule.t_max());
        for t in 1..=schedule.t_max() {
            let (a, s) = schedule.lookup(t)?;
            let snr = (a * a) / (s * s);
            acc += snr.min(gamma) / snr;
            cdf.push(acc);
        }
        cdf.iter_mut().for_each(|c| *c /= acc);
        Ok(Some(cdf))
    }

    pub fn draw<R: Rng + ?Sized>(cdf: Option<&[f64]>, t_max: usize, rng: &mut R) -> usize {
        match cdf {
            None => rng.random_range(1..=t_max),
            Some(cdf) => {
                let u: f64 = rng.random();
                1 + cdf.partition_point(|&c| c < u).min(t_max - 1)
            }
        }
    }
}

impl Default for TrainDpmConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 2e-4,
            steps: 2000,
            p_drop_text: 0.05,
            p_drop_image: 0.05,
            p_drop_both: 0.05,
            grad_clip: 1.0,
            log_every: 10,
            timesteps: TimestepSampling::Uniform,
        }
    }
}

impl TrainDpmConfig {
    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_drop_text, self.p_drop_image, self.p_drop_both];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) || ps.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "dropout probabilities {ps:?} must lie in [0, 1] and sum to at most 1"
            )));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("batch_size and lr must be positive".into()));
        }
        Ok(())
    }

    /// Which conditions survive: `(keep_instruction, keep_image)`.
    pub fn draw_dropout<R: Rng + ?Sized>(&self, rng: &mut R) -> (bool, bool) {
        let u: f64 = rng.random();
        if u < self.p_drop_text {
            (false, true)
        } else if u < self.p_drop_text + self.p_drop_image {
            (true, false)
        } else if u < self.p_drop_text + self.p_drop_image + self.p_drop_both {
            (false, false)
        } else {
            (true, true)
        }
    }
}

/// One training batch with its sampled timesteps, noise and dropped conditions.
#[derive(Debug, Clone)]
pub struct DpmBatch<T> {
    pub z0: Tensor<T>,
    pub image_cond: Tensor<T>,
    pub instructions: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub eps: Tensor<T>,
}

impl<T: Scalar> DpmBatch<T> {
    pub fn draw<R: Rng + ?Sized>(
        pairs: &[&PairedSample],
        codec: &LatentCodec,
        schedule: &NoiseSchedule,
        config: &TrainDpmConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let cdf = config.timesteps.cdf(schedule)?;
        let mut z0 = Vec::new();
        let mut cond = Vec::new();
        let mut instructions = Vec::new();
        let mut timesteps = Vec::new();
        for p in pairs {
            let z = codec.encode(&p.clean)?;
            let (keep_text, keep_image) = config.draw_dropout(rng);
            let c = if keep_image {
                codec.encode(&p.corrupted)?
            } else {
                let (cc, h, w) = z.shape();
                LatentTensor::zeros(cc, h, w)
            };
            instructions.push(if keep_text { p.instruction_id } else { NULL_INSTRUCTION });
            timesteps.push(TimestepSampling::draw(cdf.as_deref(), schedule.t_max(), rng));
            z0.push(z);
            cond.push(c);
        }
        let z0 = LatentTensor::stack::<T>(&z0.iter().collect::<Vec<_>>())?;
        let image_cond = LatentTensor::stack::<T>(&cond.iter().collect::<Vec<_>>())?;
        let eps = Tensor::randn(z0.shape(), 1.0, rng);
        Ok(Self {
            z0,
            image_cond,
            instructions,
            timesteps,
            eps,
        })
    }

    pub fn cast<U: Scalar>(&self) -> DpmBatch<U> {
        DpmBatch {
            z0: self.z0.cast(),
            image_cond: self.image_cond.cast(),
            instructions: self.instructions.clone(),
            timesteps: self.timesteps.clone(),
            eps: self.eps.cast(),
        }
    }
}

/// Mean squared error between the true and predicted noise, averaged over
/// every latent element of the batch.
pub fn dpm_loss<T: Scalar>(
    net: &UNet,
    params: &corredit_nn::Bound<T>,
    schedule: &NoiseSchedule,
    batch: &DpmBatch<T>,
) -> Result<Var<T>> {
    let g = params.graph();
    let z_t = g.constant(add_noise(&batch.z0, &batch.eps, &batch.timesteps, schedule)?);
    let cond = g.constant(batch.image_cond.clone());
    let out = net.forward(
        params,
        &UNetInput {
            z_t: &z_t,
            image_cond: &cond,
            timesteps: &batch.timesteps,
            instructions: &batch.instructions,
            guidance: None,
        },
    )?;
    let pred = eps_from_output(&z_t, &out, &batch.timesteps, schedule)?;
    Ok(pred.mse(&g.constant(batch.eps.clone()))?)
}

/// Optimizer state and data stream for noise-prediction training.
pub struct DpmTrainer {
    pub config: TrainDpmConfig,
    pub optimizer: Adam<f32>,
    rng: seed::Rng,
}

impl DpmTrainer {
    pub fn new(config: TrainDpmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut optimizer = Adam::new(config.lr);
        optimizer.clip_norm = (config.grad_clip > 0.0).then_some(config.grad_clip);
        Ok(Self {
            config,
            optimizer,
            rng: seed::stream(seed, &[tag::DPM_TRAIN]),
        })
    }

    /// Draws a batch from `pairs`, takes one optimizer step on `model`, and
    /// returns the loss measured before the update.
    pub fn train_step(&mut self, model: &mut Denoiser, pairs: &[PairedSample]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("no training pairs".into()));
        }
        let picks: Vec<&PairedSample> = (0..self.config.batch_size)
            .map(|_| &pairs[self.rng.random_range(0..pairs.len())])
            .collect();
        let batch = DpmBatch::<f32>::draw(&picks, &model.codec, &model.schedule, &self.config, &mut self.rng)?;
        self.step_on(model, &batch)
    }

    pub fn step_on(&mut self, model: &mut Denoiser, batch: &DpmBatch<f32>) -> Result<f64> {
        let g = Graph::new();
        let bound = model.params.bind(&g);
        let loss = dpm_loss(&model.net, &bound, &model.schedule, batch)?;
        let value = loss.value().data()[0] as f64;
        let grads = g.backward(&loss)?;
        let grads = bound.collect_grads(&grads);
        drop(bound);
        self.optimizer.step(&mut model.params, &grads)?;
        Ok(value)
    }
}

fn initial_noise(shape: (usize, usize, usize), seeds: &[u64]) -> Result<Tensor<f32>> {
    let (c, h, w) = shape;
    let parts: Vec<Tensor<f32>> = seeds
        .iter()
        .map(|&s| Tensor::randn(&[1, c, h, w], 1.0, &mut seed::stream(s, &[tag::SAMPLE, 0])))
        .collect();
    Ok(Tensor::stack_batch(&parts)?)
}

fn repeat3(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    Ok(Tensor::stack_batch(&[t.clone(), t.clone(), t.clone()])?)
}

/// Twenty-step style DDIM editing of a batch of corrupted images, one seed
/// per image. Each step evaluates the network under `(null, null)`,
/// `(image, null)` and `(image, instruction)` in a single `3B` batch.
pub fn sample_dpm_batch(
    model: &Denoiser,
    corrupted: &[ImageTensor],
    steps: usize,
    guidance: &GuidanceConfig,
    seeds: &[u64],
) -> Result<Vec<ImageTensor>> {
    if steps < 1 {
        return Err(Error::InvalidArgument("DDIM needs at least one step".into()));
    }
    if corrupted.is_empty() || corrupted.len() != seeds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images with {} seeds",
            corrupted.len(),
            seeds.len()
        )));
    }
    guidance.validate()?;
    let b = corrupted.len();
    let latents = corrupted
        .iter()
        .map(|i| model.codec.encode(i))
        .collect::<Result<Vec<_>>>()?;
    let cond = LatentTensor::stack::<f32>(&latents.iter().collect::<Vec<_>>())?;
    let mut z = initial_noise(latents[0].shape(), seeds)?;
    let zeros = Tensor::zeros(cond.shape());
    let cond3 = Tensor::stack_batch(&[zeros, cond.clone(), cond])?;
    let mut instr = vec![NULL_INSTRUCTION; 2 * b];
    instr.extend(std::iter::repeat_n(UNIVERSAL_INSTRUCTION, b));
    let ts = model.schedule.sampling_timesteps(steps)?;
    let t_max = model.schedule.t_max();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = model.eps_batch(&repeat3(&z)?, &vec![t; 3 * b], &instr, &cond3, None)?;
        let (uu, iu, it) = (
            eps.narrow_batch(0, b)?,
            eps.narrow_batch(b, b)?,
            eps.narrow_batch(2 * b, b)?,
        );
        let wi = guidance.omega_i(t, t_max)?;
        let combined = cfg_multimodal_batched(&uu, &iu, &it, &vec![(wi, guidance.omega_t); b])?;
        z = ddim_step_clipped(&z, &combined, t, t_prev, &model.schedule, model.codec.latent_range())?;
    }
    LatentTensor::unstack(&z)?
        .iter()
        .map(|l| model.codec.decode(l))
        .collect()
}

pub fn sample_dpm(
    model: &Denoiser,
    corrupted: &ImageTensor,
    steps: usize,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<ImageTensor> {
    Ok(sample_dpm_batch(model, std::slice::from_ref(corrupted), steps, guidance, &[seed])?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleConfig;
    use crate::unet::UNetConfig;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::cosine(&ScheduleConfig::default()).unwrap()
    }

    pub(crate) fn tiny_model(seed: u64) -> Denoiser {
        let cfg = UNetConfig {
            base_width: 8,
            channel_mults: vec![1, 2],
            res_blocks: 1,
            groups: 4,
            guidance_dim: 16,
            ..Default::default()
        };
        let (net, params) = UNet::init(&cfg, &mut seed::stream(seed, &[tag::INIT])).unwrap();
        Denoiser::new(net, params, LatentCodec::default(), schedule())
    }

    #[test]
    fn add_noise_identities() {
        let s = schedule();
        let mut rng = seed::stream(0, &[]);
        let z: Tensor<f64> = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let eps: Tensor<f64> = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        assert_eq!(add_noise(&z, &Tensor::zeros(&[2, 3, 2, 2]), &[0, 0], &s).unwrap(), z);
        let only = add_noise(&Tensor::zeros(&[2, 3, 2, 2]), &eps, &[300, 700], &s).unwrap();
        for (i, &t) in [300, 700].iter().enumerate() {
            let sg = s.lookup(t).unwrap().1;
            for j in 0..12 {
                assert_eq!(only.data()[i * 12 + j], sg * eps.data()[i * 12 + j]);
            }
        }
        // The same eps is recovered from both noise levels.
        for (t1, t2) in [(100, 400), (20, 40)] {
            let a = add_noise(&z, &eps, &[t1, t1], &s).unwrap();
            let b = add_noise(&z, &eps, &[t2, t2], &s).unwrap();
            let (a1, s1) = s.lookup(t1).unwrap();
            let (a2, s2) = s.lookup(t2).unwrap();
            for j in 0..z.numel() {
                let e1 = (a.data()[j] - a1 * z.data()[j]) / s1;
                let e2 = (b.data()[j] - a2 * z.data()[j]) / s2;
                assert!((e1 - e2).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn ddim_with_true_eps_recovers_z() {
        let s = schedule();
        let mut rng = seed::stream(1, &[]);
        let z: Tensor<f64> = Tensor::randn(&[1, 4, 3, 3], 1.0, &mut rng);
        let eps: Tensor<f64> = Tensor::randn(&[1, 4, 3, 3], 1.0, &mut rng);
        for t in [1, 50, 500, 1000] {
            let zt = add_noise(&z, &eps, &[t], &s).unwrap();
            let z0 = predict_z0(&zt, &eps, t, &s).unwrap();
            for (a, b) in z0.data().iter().zip(z.data()) {
                assert!((a - b).abs() < 1e-10);
            }
            let back = ddim_step(&zt, &eps, t, 0, &s).unwrap();
            for (a, b) in back.data().iter().zip(z.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        assert!(ddim_step(&z, &eps, 10, 10, &s).is_err());
    }

    #[test]
    fn ddim_between_equal_coefficients_is_identity() {
        // A schedule copy whose t and t_prev share coefficients.
        let s = schedule();
        let z: Tensor<f64> = Tensor::randn(&[1, 2, 2, 2], 1.0, &mut seed::stream(2, &[]));
        let eps: Tensor<f64> = Tensor::randn(&[1, 2, 2, 2], 1.0, &mut seed::stream(3, &[]));
        let (a, sg) = s.lookup(400).unwrap();
        let out = z.zip_map(&eps, |zv, e| a * ((zv - sg * e) / a) + sg * e).unwrap();
        for (x, y) in out.data().iter().zip(z.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_zero_never_drops_and_probabilities_validate() {
        let cfg = TrainDpmConfig {
            p_drop_text: 0.0,
            p_drop_image: 0.0,
            p_drop_both: 0.0,
            ..Default::default()
        };
        let mut rng = seed::stream(4, &[]);
        assert!((0..1000).all(|_| cfg.draw_dropout(&mut rng) == (true, true)));
        let bad = TrainDpmConfig {
            p_drop_text: 0.6,
            p_drop_image: 0.6,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let d = TrainDpmConfig::default();
        let mut counts = [0usize; 4];
        for _ in 0..20_000 {
            let (a, b) = d.draw_dropout(&mut rng);
            counts[(a as usize) * 2 + b as usize] += 1;
        }
        // (false,false), (false,true), (true,false) each near 5%.
        for &c in &counts[..3] {
            assert!((800..1200).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn image_condition_is_ignored_at_init() {
        let model = tiny_model(5);
        let mut rng = seed::stream(6, &[]);
        let z = LatentTensor::new(12, 4, 4, (0..192).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let c1 = LatentTensor::new(12, 4, 4, (0..192).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let c2 = LatentTensor::new(12, 4, 4, (0..192).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let a = model.eps_predict(&z, 300, &ConditionBundle::full(c1), None).unwrap();
        let b = model.eps_predict(&z, 300, &ConditionBundle::full(c2), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), z.shape());
    }

    #[test]
    fn sampling_counts_three_evaluations_per_step_and_is_deterministic() {
        let model = tiny_model(7);
        let img = ImageTensor::filled(8, 8, 0.3);
        let g = GuidanceConfig::default();
        model.reset_nfe();
        let a = sample_dpm(&model, &img, 20, &g, 11).unwrap();
        assert_eq!(model.nfe(), 60);
        let b = sample_dpm(&model, &img, 20, &g, 11).unwrap();
        assert_eq!(a, b);
        assert!(sample_dpm(&model, &img, 0, &g, 11).is_err());
    }

    #[test]
    fn init_loss_matches_closed_form() {
        // At init the output convolution is zero, so eps_hat = sigma z_t; with
        // z0 = 0 the error per element is alpha^4 eps^2.
        let model = tiny_model(8);
        let sched = schedule();
        let timesteps = vec![1, 250, 600, 1000];
        let eps = Tensor::<f64>::randn(&[4, 12, 4, 4], 1.0, &mut seed::stream(3, &[]));
        let batch = DpmBatch {
            z0: Tensor::zeros(&[4, 12, 4, 4]),
            image_cond: Tensor::zeros(&[4, 12, 4, 4]),
            instructions: vec![0; 4],
            timesteps: timesteps.clone(),
            eps: eps.clone(),
        };
        let g = Graph::new();
        let params = model.params.cast::<f64>();
        let loss = dpm_loss(&model.net, &params.bind(&g), &sched, &batch)
            .unwrap()
            .value()
            .data()[0];
        let per = 12 * 16;
        let mut want = 0.0;
        for (b, &t) in timesteps.iter().enumerate() {
            let a = sched.lookup(t).unwrap().0;
            want += eps.data()[b * per..(b + 1) * per]
                .iter()
                .map(|e| a.powi(4) * e * e)
                .sum::<f64>();
        }
        want /= (4 * per) as f64;
        assert!((loss - want).abs() < 1e-12 * want.max(1.0), "{loss} vs {want}");
    }
}
