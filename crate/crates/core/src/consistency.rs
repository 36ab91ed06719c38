//! Few-step consistency model distilled from the guided diffusion teacher,
//! with the two guidance scales embedded as network conditioning.

use corredit_nn::{Adam, Bound, Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::LatentTensor;
use crate::corruption::{PairedSample, UNIVERSAL_INSTRUCTION};
use crate::diffusion::{add_noise, eps_from_output, Denoiser};
use crate::guidance::cfg_multimodal_batched;
use crate::image::ImageTensor;
use crate::schedule::NoiseSchedule;
use crate::seed::{self, tag};
use crate::unet::{UNet, UNetInput, NULL_INSTRUCTION};
use crate::{Error, Result};

/// `c_skip(t)` and `c_out(t)` of the consistency parameterization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryCoeffs {
    pub c_skip: f64,
    pub c_out: f64,
}

/// `c_skip = s^2 / ((t - eps)^2 + s^2)`, `c_out = (t - eps) / sqrt((t - eps)^2 + s^2)`.
///
/// ```
/// use corredit::consistency::boundary_coeffs;
/// let b = boundary_coeffs(20, 20, 0.5).unwrap();
/// assert_eq!((b.c_skip, b.c_out), (1.0, 0.0));
/// ```
pub fn boundary_coeffs(t: usize, boundary: usize, s: f64) -> Result<BoundaryCoeffs> {
    if t < boundary {
        return Err(Error::InvalidArgument(format!(
            "timestep {t} below the boundary {boundary}"
        )));
    }
    boundary_coeffs_continuous(t as f64 - boundary as f64, s)
}

/// Same coefficients as a function of the continuous offset `d = t - eps >= 0`.
pub fn boundary_coeffs_continuous(d: f64, s: f64) -> Result<BoundaryCoeffs> {
    if !(d >= 0.0 && s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "offset {d} and scale {s} must be non-negative / positive"
        )));
    }
    let r = d * d + s * s;
    Ok(BoundaryCoeffs {
        c_skip: s * s / r,
        c_out: d / r.sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Number of teacher grid timesteps `t_n = n T / N`, `n = 1..=N`.
    pub grid_size: usize,
    /// Skip interval in grid steps.
    pub skip: usize,
    pub ema_mu: f64,
    /// Data-scale constant in the boundary coefficients, in timestep units.
    pub boundary_scale: f64,
    pub omega_i_range: [f64; 2],
    pub omega_t_range: [f64; 2],
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub grad_clip: f64,
    pub log_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            grid_size: 50,
            skip: 1,
            ema_mu: 0.95,
            boundary_scale: 0.5,
            omega_i_range: [1.0, 1.5],
            omega_t_range: [5.0, 15.0],
            batch_size: 32,
            lr: 2e-4,
            steps: 1000,
            grad_clip: 1.0,
            log_every: 10,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r[0] >= 0.0;
        if self.grid_size < 2 || self.grid_size > t_max {
            return Err(Error::Config(format!(
                "grid size {} outside [2, {t_max}]",
                self.grid_size
            )));
        }
        if !(1 <= self.skip && self.skip < self.grid_size) {
            return Err(Error::Config(format!(
                "skip {} must satisfy 1 <= k < N = {}",
                self.skip, self.grid_size
            )));
        }
        if !(0.0..1.0).contains(&self.ema_mu) {
            return Err(Error::Config(format!("ema mu {} outside [0, 1)", self.ema_mu)));
        }
        if !ordered(self.omega_i_range) || !ordered(self.omega_t_range) {
            return Err(Error::Config("guidance ranges must be ordered and non-negative".into()));
        }
        if !(self.boundary_scale > 0.0) || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(
                "boundary_scale, batch_size and lr must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn grid(&self, t_max: usize) -> TimeGrid {
        TimeGrid {
            size: self.grid_size,
            t_max,
        }
    }

    /// Clamps a guidance pair into the training ranges.
    pub fn clamp_guidance(&self, (wi, wt): (f64, f64)) -> (f64, f64) {
        (
            wi.clamp(self.omega_i_range[0], self.omega_i_range[1]),
            wt.clamp(self.omega_t_range[0], self.omega_t_range[1]),
        )
    }
}

/// The teacher's discrete timestep grid. Index 1 is the boundary `eps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeGrid {
    pub size: usize,
    pub t_max: usize,
}

impl TimeGrid {
    pub fn timestep(&self, n: usize) -> usize {
        ((n * self.t_max) as f64 / self.size as f64).round() as usize
    }

    pub fn boundary(&self) -> usize {
        self.timestep(1)
    }

    /// Grid indices visited by an `nfe`-step sampler, starting at `N` with a
    /// uniform stride of `floor((N - 1) / nfe)`.
    pub fn sampling_indices(&self, nfe: usize) -> Result<Vec<usize>> {
        if nfe == 0 || nfe >= self.size {
            return Err(Error::InvalidArgument(format!(
                "nfe {nfe} must lie in [1, {}]",
                self.size - 1
            )));
        }
        let stride = (self.size - 1) / nfe;
        Ok((0..nfe).map(|j| self.size - j * stride).collect())
    }
}

/// Guidance pairs clamped into the training ranges.
fn guidance_input(pairs: &[(f64, f64)], config: &DistillConfig) -> Vec<(f64, f64)> {
    pairs.iter().map(|&p| config.clamp_guidance(p)).collect()
}

/// Projected guidance embedding `[B, embed_dim]` for the given scale pairs.
pub fn embed_guidance<T: Scalar>(net: &UNet, params: &ParamStore<T>, pairs: &[(f64, f64)]) -> Result<Tensor<T>> {
    let g = Graph::inference();
    let p = params.bind(&g);
    let feats = g.constant(crate::unet::guidance_features(pairs, net.config().guidance_dim));
    let w = p.var(&format!("{}.weight", crate::unet::GUIDANCE_PROJ))?;
    let b = p.var(&format!("{}.bias", crate::unet::GUIDANCE_PROJ))?;
    Ok(feats.linear(w, Some(b))?.to_tensor())
}

/// Per-sample affine coefficients `(a, b)` with `f = a z_t + b eps_hat`.
fn output_coeffs(
    timesteps: &[usize],
    boundary: usize,
    s: f64,
    schedule: &NoiseSchedule,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut a = Vec::with_capacity(timesteps.len());
    let mut b = Vec::with_capacity(timesteps.len());
    for &t in timesteps {
        let BoundaryCoeffs { c_skip, c_out } = boundary_coeffs(t, boundary, s)?;
        let (al, sg) = schedule.lookup(t)?;
        a.push(c_skip + c_out / al);
        b.push(-c_out * sg / al);
    }
    Ok((a, b))
}

/// Inputs to one consistency-function evaluation over a batch.
pub struct ConsistencyInput<'a, T> {
    pub z_t: &'a Var<T>,
    pub image_cond: &'a Var<T>,
    pub timesteps: &'a [usize],
    pub instructions: &'a [usize],
    pub guidance: &'a [(f64, f64)],
}

/// `c_skip z_t + c_out (z_t - sigma eps_hat) / alpha`, differentiable in the
/// bound parameters. When every sample sits at the boundary the network is
/// not evaluated and `z_t` is returned unchanged.
pub fn f_consistency<T: Scalar>(
    net: &UNet,
    params: &Bound<T>,
    schedule: &NoiseSchedule,
    config: &DistillConfig,
    input: &ConsistencyInput<'_, T>,
) -> Result<(Var<T>, bool)> {
    let boundary = config.grid(schedule.t_max()).boundary();
    let (a, b) = output_coeffs(input.timesteps, boundary, config.boundary_scale, schedule)?;
    if b.iter().all(|&v| v == 0.0) {
        return Ok((input.z_t.clone(), false));
    }
    let guidance = guidance_input(input.guidance, config);
    let raw = net.forward(
        params,
        &UNetInput {
            z_t: input.z_t,
            image_cond: input.image_cond,
            timesteps: input.timesteps,
            instructions: input.instructions,
            guidance: Some(&guidance),
        },
    )?;
    let eps = eps_from_output(input.z_t, &raw, input.timesteps, schedule)?;
    let cast = |v: &[f64]| v.iter().map(|&x| T::from_f64_lossy(x)).collect::<Vec<T>>();
    let out = input
        .z_t
        .scale_per_sample(&cast(&a))?
        .add(&eps.scale_per_sample(&cast(&b))?)?;
    Ok((out, true))
}

/// Per-sample deterministic DDIM hop `t[i] -> t_prev[i]`.
pub fn ddim_step_batch<T: Scalar>(
    z_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: &[usize],
    t_prev: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    z_t.check_same_shape(eps_hat)?;
    let bsz = z_t.shape().first().copied().unwrap_or(0);
    if t.len() != bsz || t_prev.len() != bsz || bsz == 0 {
        return Err(Error::Shape(format!(
            "{} / {} timesteps for batch {bsz}",
            t.len(),
            t_prev.len()
        )));
    }
    let n = z_t.numel() / bsz;
    let mut out = Vec::with_capacity(z_t.numel());
    for i in 0..bsz {
        if t_prev[i] >= t[i] {
            return Err(Error::InvalidArgument(format!(
                "solver hop needs t_n < t_(n+k), got {} >= {}",
                t_prev[i], t[i]
            )));
        }
        let (a, s) = schedule.lookup(t[i])?;
        let (ap, sp) = schedule.lookup(t_prev[i])?;
        let (a, s, ap, sp) = (
            T::from_f64_lossy(a),
            T::from_f64_lossy(s),
            T::from_f64_lossy(ap),
            T::from_f64_lossy(sp),
        );
        let r = i * n..(i + 1) * n;
        out.extend(
            z_t.data()[r.clone()]
                .iter()
                .zip(&eps_hat.data()[r])
                .map(|(&z, &e)| ap * ((z - s * e) / a) + sp * e),
        );
    }
    Ok(Tensor::new(z_t.shape(), out)?)
}

/// One guided solver hop of the teacher from `t_{n+k}` to `t_n`, using the
/// three condition pairs in a single `3B` batch. Because the hop is affine in
/// the noise estimate and the guidance weights sum to one, combining the three
/// increments equals one hop with the guided estimate.
pub fn teacher_estimate(
    teacher: &Denoiser,
    z: &Tensor<f32>,
    image_cond: &Tensor<f32>,
    t_from: &[usize],
    t_to: &[usize],
    omegas: &[(f64, f64)],
) -> Result<Tensor<f32>> {
    let b = t_from.len();
    let zeros = Tensor::zeros(image_cond.shape());
    let cond3 = Tensor::stack_batch(&[zeros, image_cond.clone(), image_cond.clone()])?;
    let z3 = Tensor::stack_batch(&[z.clone(), z.clone(), z.clone()])?;
    let mut instr = vec![NULL_INSTRUCTION; 2 * b];
    instr.extend(std::iter::repeat_n(UNIVERSAL_INSTRUCTION, b));
    let ts: Vec<usize> = t_from.iter().cycle().take(3 * b).copied().collect();
    let eps = teacher.eps_batch(&z3, &ts, &instr, &cond3, None)?;
    let (uu, iu, it) = (
        eps.narrow_batch(0, b)?,
        eps.narrow_batch(b, b)?,
        eps.narrow_batch(2 * b, b)?,
    );
    let guided = cfg_multimodal_batched(&uu, &iu, &it, omegas)?;
    ddim_step_batch(z, &guided, t_from, t_to, &teacher.schedule)
}

/// `target <- mu target + (1 - mu) student`, elementwise.
pub fn ema_update<T: Scalar>(target: &mut ParamStore<T>, student: &ParamStore<T>, mu: f64) -> Result<()> {
    if !target.same_layout(student) {
        return Err(Error::Shape("EMA target and student layouts differ".into()));
    }
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::InvalidArgument(format!("ema mu {mu} outside [0, 1]")));
    }
    let m = T::from_f64_lossy(mu);
    let one_minus = T::from_f64_lossy(1.0 - mu);
    for (name, t) in target.iter_mut() {
        let s = student.get(name)?;
        for (x, &y) in t.data_mut().iter_mut().zip(s.data()) {
            *x = if mu == 0.0 {
                y
            } else if mu == 1.0 {
                *x
            } else {
                m * *x + one_minus * y
            };
        }
    }
    Ok(())
}

/// A consistency model: a denoiser with the guidance projection plus the
/// grid and boundary settings it was distilled with.
#[derive(Debug, Clone)]
pub struct ConsistencyModel {
    pub denoiser: Denoiser,
    pub config: DistillConfig,
}

impl ConsistencyModel {
    /// Student initialized from the teacher with a zero guidance projection.
    pub fn from_teacher(teacher: &Denoiser, config: DistillConfig) -> Result<Self> {
        config.validate(teacher.schedule.t_max())?;
        let mut params = teacher.params.clone();
        if !teacher.has_guidance_embedding() {
            teacher.net.add_guidance_projection(&mut params);
        }
        Ok(Self {
            denoiser: Denoiser::new(teacher.net.clone(), params, teacher.codec, teacher.schedule.clone()),
            config,
        })
    }

    pub fn nfe(&self) -> u64 {
        self.denoiser.nfe()
    }

    pub fn reset_nfe(&self) {
        self.denoiser.reset_nfe()
    }

    /// Inference evaluation of the consistency function on a batch.
    pub fn evaluate(
        &self,
        params: &ParamStore<f32>,
        z_t: &Tensor<f32>,
        image_cond: &Tensor<f32>,
        timesteps: &[usize],
        guidance: &[(f64, f64)],
    ) -> Result<Tensor<f32>> {
        let g = Graph::inference();
        let bound = params.bind(&g);
        let (z, c) = (g.constant(z_t.clone()), g.constant(image_cond.clone()));
        let instr = vec![UNIVERSAL_INSTRUCTION; timesteps.len()];
        let (out, evaluated) = f_consistency(
            &self.denoiser.net,
            &bound,
            &self.denoiser.schedule,
            &self.config,
            &ConsistencyInput {
                z_t: &z,
                image_cond: &c,
                timesteps,
                instructions: &instr,
                guidance,
            },
        )?;
        if evaluated {
            self.denoiser.count_evaluations(timesteps.len());
        }
        Ok(out.to_tensor())
    }

    /// Single-latent consistency function with the model's own parameters.
    pub fn f(
        &self,
        z_t: &LatentTensor,
        t: usize,
        omega: (f64, f64),
        image_latent: &LatentTensor,
    ) -> Result<LatentTensor> {
        let out = self.evaluate(
            &self.denoiser.params,
            &LatentTensor::stack(&[z_t])?,
            &LatentTensor::stack(&[image_latent])?,
            &[t],
            &[omega],
        )?;
        Ok(LatentTensor::unstack(&out)?.remove(0))
    }
}

/// Student, EMA target, optimizer and data stream for distillation.
pub struct Distiller {
    pub student: ConsistencyModel,
    pub target: ParamStore<f32>,
    pub optimizer: Adam<f32>,
    rng: seed::Rng,
}

/// Diagnostics of one distillation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillStats {
    pub loss: f64,
    pub grad_norm: f64,
}

impl Distiller {
    pub fn new(teacher: &Denoiser, config: DistillConfig, seed: u64) -> Result<Self> {
        let student = ConsistencyModel::from_teacher(teacher, config)?;
        let mut optimizer = Adam::new(student.config.lr);
        optimizer.clip_norm = (student.config.grad_clip > 0.0).then_some(student.config.grad_clip);
        Ok(Self {
            target: student.denoiser.params.clone(),
            student,
            optimizer,
            rng: seed::stream(seed, &[tag::DISTILL]),
        })
    }

    pub fn train_step(&mut self, teacher: &Denoiser, pairs: &[PairedSample]) -> Result<DistillStats> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("no training pairs".into()));
        }
        let picks: Vec<&PairedSample> = (0..self.student.config.batch_size)
            .map(|_| &pairs[self.rng.random_range(0..pairs.len())])
            .collect();
        let batch = DistillBatch::draw(&picks, teacher, &self.student.config, &mut self.rng)?;
        self.step_on(teacher, &batch)
    }

    /// One step of the distillation objective on a prepared batch, followed
    /// by the EMA update of the target.
    pub fn step_on(&mut self, teacher: &Denoiser, batch: &DistillBatch) -> Result<DistillStats> {
        let cfg = &self.student.config;
        let z_next = add_noise(&batch.z0, &batch.eps, &batch.t_from, &teacher.schedule)?;
        let z_hat = teacher_estimate(
            teacher,
            &z_next,
            &batch.image_cond,
            &batch.t_from,
            &batch.t_to,
            &batch.omegas,
        )?;
        let target_out = self
            .student
            .evaluate(&self.target, &z_hat, &batch.image_cond, &batch.t_to, &batch.omegas)?;

        let g = Graph::new();
        let bound = self.student.denoiser.params.bind(&g);
        let (z, c) = (g.constant(z_next), g.constant(batch.image_cond.clone()));
        let instr = vec![UNIVERSAL_INSTRUCTION; batch.t_from.len()];
        let (pred, _) = f_consistency(
            &self.student.denoiser.net,
            &bound,
            &teacher.schedule,
            cfg,
            &ConsistencyInput {
                z_t: &z,
                image_cond: &c,
                timesteps: &batch.t_from,
                instructions: &instr,
                guidance: &batch.omegas,
            },
        )?;
        let loss = pred.mse(&g.constant(target_out))?;
        let value = loss.value().data()[0] as f64;
        let grads = bound.collect_grads(&g.backward(&loss)?);
        drop(bound);
        let grad_norm = self.optimizer.step(&mut self.student.denoiser.params, &grads)?;
        ema_update(&mut self.target, &self.student.denoiser.params, cfg.ema_mu)?;
        Ok(DistillStats { loss: value, grad_norm })
    }
}

/// One distillation batch: clean latents, conditions, grid hops, shared noise
/// and sampled guidance scales.
#[derive(Debug, Clone)]
pub struct DistillBatch {
    pub z0: Tensor<f32>,
    pub image_cond: Tensor<f32>,
    pub t_from: Vec<usize>,
    pub t_to: Vec<usize>,
    pub eps: Tensor<f32>,
    pub omegas: Vec<(f64, f64)>,
}

impl DistillBatch {
    pub fn draw<R: Rng + ?Sized>(
        pairs: &[&PairedSample],
        teacher: &Denoiser,
        config: &DistillConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("empty distillation batch".into()));
        }
        let grid = config.grid(teacher.schedule.t_max());
        let codec = &teacher.codec;
        let (mut z0, mut cond, mut t_from, mut t_to, mut omegas) = (vec![], vec![], vec![], vec![], vec![]);
        for p in pairs {
            z0.push(codec.encode(&p.clean)?);
            cond.push(codec.encode(&p.corrupted)?);
            let n = rng.random_range(1..=config.grid_size - config.skip);
            t_to.push(grid.timestep(n));
            t_from.push(grid.timestep(n + config.skip));
            let [ilo, ihi] = config.omega_i_range;
            let [tlo, thi] = config.omega_t_range;
            omegas.push((
                ilo + (ihi - ilo) * rng.random::<f64>(),
                tlo + (thi - tlo) * rng.random::<f64>(),
            ));
        }
        let z0 = LatentTensor::stack::<f32>(&z0.iter().collect::<Vec<_>>())?;
        let image_cond = LatentTensor::stack::<f32>(&cond.iter().collect::<Vec<_>>())?;
        let eps = Tensor::randn(z0.shape(), 1.0, rng);
        Ok(Self {
            z0,
            image_cond,
            t_from,
            t_to,
            eps,
            omegas,
        })
    }
}

/// Multistep consistency editing of a batch: `nfe` evaluations per image,
/// re-noising to the next grid timestep in between.
pub fn sample_cm_batch(
    model: &ConsistencyModel,
    corrupted: &[ImageTensor],
    nfe: usize,
    omega: (f64, f64),
    seeds: &[u64],
) -> Result<Vec<ImageTensor>> {
    if corrupted.is_empty() || corrupted.len() != seeds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images with {} seeds",
            corrupted.len(),
            seeds.len()
        )));
    }
    let d = &model.denoiser;
    let grid = model.config.grid(d.schedule.t_max());
    let indices = grid.sampling_indices(nfe)?;
    let b = corrupted.len();
    let latents = corrupted
        .iter()
        .map(|i| d.codec.encode(i))
        .collect::<Result<Vec<_>>>()?;
    let cond = LatentTensor::stack::<f32>(&latents.iter().collect::<Vec<_>>())?;
    let mut rngs: Vec<seed::Rng> = seeds.iter().map(|&s| seed::stream(s, &[tag::SAMPLE, 0])).collect();
    let (c, h, w) = latents[0].shape();
    let draw = |rngs: &mut Vec<seed::Rng>| -> Result<Tensor<f32>> {
        let parts: Vec<Tensor<f32>> = rngs.iter_mut().map(|r| Tensor::randn(&[1, c, h, w], 1.0, r)).collect();
        Ok(Tensor::stack_batch(&parts)?)
    };
    let guidance = vec![omega; b];
    let mut z = draw(&mut rngs)?;
    let mut z0 = z.clone();
    for (j, &n) in indices.iter().enumerate() {
        let t = grid.timestep(n);
        z0 = model.evaluate(&d.params, &z, &cond, &vec![t; b], &guidance)?;
        if let Some(&next) = indices.get(j + 1) {
            let t_next = grid.timestep(next);
            z = add_noise(&z0, &draw(&mut rngs)?, &vec![t_next; b], &d.schedule)?;
        }
    }
    LatentTensor::unstack(&z0)?.iter().map(|l| d.codec.decode(l)).collect()
}

pub fn sample_cm(
    model: &ConsistencyModel,
    corrupted: &ImageTensor,
    nfe: usize,
    omega: (f64, f64),
    seed: u64,
) -> Result<ImageTensor> {
    Ok(sample_cm_batch(model, std::slice::from_ref(corrupted), nfe, omega, &[seed])?.remove(0))
}
