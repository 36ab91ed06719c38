//! Classifier-free guidance algebra.
//!
//! Both combinations are written with one coefficient per input, which keeps
//! the common reductions exact in floating point: zero scales return the
//! unconditional input and unit scales return the fully conditional one.

use corredit_nn::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageGuidanceMode {
    Constant,
    SqrtSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub omega_t: f64,
    pub omega_i_max: f64,
    pub omega_i_mode: ImageGuidanceMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            omega_t: 7.5,
            omega_i_max: 1.8,
            omega_i_mode: ImageGuidanceMode::SqrtSchedule,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega_t >= 0.0 && self.omega_i_max >= 0.0) {
            return Err(Error::Config(format!(
                "guidance scales must be non-negative, got omega_t={} omega_i_max={}",
                self.omega_t, self.omega_i_max
            )));
        }
        Ok(())
    }

    /// Image scale at timestep `t` of `t_max`.
    pub fn omega_i(&self, t: usize, t_max: usize) -> Result<f64> {
        match self.omega_i_mode {
            ImageGuidanceMode::Constant => Ok(self.omega_i_max),
            ImageGuidanceMode::SqrtSchedule => image_guidance_schedule(t, t_max, self.omega_i_max),
        }
    }
}

/// `omega_max * sqrt(t / T)`, in continuous `t`.
pub fn image_guidance_schedule(t: usize, t_max: usize, omega_max: f64) -> Result<f64> {
    if t > t_max || t_max == 0 {
        return Err(Error::InvalidArgument(format!("timestep {t} outside [0, {t_max}]")));
    }
    Ok(omega_max * (t as f64 / t_max as f64).sqrt())
}

fn combine<T: Scalar>(terms: &[(&[T], f64)], out: &mut [T]) -> Result<()> {
    if terms.iter().any(|(x, _)| x.len() != out.len()) {
        return Err(Error::Shape("guidance inputs differ in length".into()));
    }
    let coeffs: Vec<T> = terms.iter().map(|&(_, c)| T::from_f64_lossy(c)).collect();
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = T::zero();
        for ((x, _), &c) in terms.iter().zip(&coeffs) {
            acc += c * x[i];
        }
        *o = acc;
    }
    Ok(())
}

/// `eps_c + omega * (eps_c - eps_u)`, i.e. `(1 + omega) eps_c - omega eps_u`.
pub fn cfg_text_slice<T: Scalar>(eps_cond: &[T], eps_uncond: &[T], omega: f64) -> Result<Vec<T>> {
    if eps_cond.len() != eps_uncond.len() {
        return Err(Error::Shape("guidance inputs differ in length".into()));
    }
    let w = T::from_f64_lossy(omega);
    Ok(eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(&c, &u)| c + w * (c - u))
        .collect())
}

/// `eps_uu + omega_i (eps_iu - eps_uu) + omega_t (eps_it - eps_iu)`,
/// evaluated as `omega_t eps_it + (omega_i - omega_t) eps_iu + (1 - omega_i) eps_uu`.
pub fn cfg_multimodal_slice<T: Scalar>(
    eps_uu: &[T],
    eps_iu: &[T],
    eps_it: &[T],
    omega_i: f64,
    omega_t: f64,
) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); eps_uu.len()];
    combine(
        &[(eps_it, omega_t), (eps_iu, omega_i - omega_t), (eps_uu, 1.0 - omega_i)],
        &mut out,
    )?;
    Ok(out)
}

pub fn cfg_text<T: Scalar>(eps_cond: &Tensor<T>, eps_uncond: &Tensor<T>, omega: f64) -> Result<Tensor<T>> {
    eps_cond.check_same_shape(eps_uncond)?;
    Ok(Tensor::new(
        eps_cond.shape(),
        cfg_text_slice(eps_cond.data(), eps_uncond.data(), omega)?,
    )?)
}

pub fn cfg_multimodal<T: Scalar>(
    eps_uu: &Tensor<T>,
    eps_iu: &Tensor<T>,
    eps_it: &Tensor<T>,
    omega_i: f64,
    omega_t: f64,
) -> Result<Tensor<T>> {
    eps_uu.check_same_shape(eps_iu)?;
    eps_uu.check_same_shape(eps_it)?;
    Ok(Tensor::new(
        eps_uu.shape(),
        cfg_multimodal_slice(eps_uu.data(), eps_iu.data(), eps_it.data(), omega_i, omega_t)?,
    )?)
}

/// Per-sample multimodal combination over a batch laid out `[B, ...]`, with
/// one `(omega_i, omega_t)` pair per sample.
pub fn cfg_multimodal_batched<T: Scalar>(
    eps_uu: &Tensor<T>,
    eps_iu: &Tensor<T>,
    eps_it: &Tensor<T>,
    omegas: &[(f64, f64)],
) -> Result<Tensor<T>> {
    eps_uu.check_same_shape(eps_iu)?;
    eps_uu.check_same_shape(eps_it)?;
    let b = eps_uu.shape().first().copied().unwrap_or(0);
    if b != omegas.len() || b == 0 {
        return Err(Error::Shape(format!("{} guidance pairs for batch {b}", omegas.len())));
    }
    let n = eps_uu.numel() / b;
    let mut out = Vec::with_capacity(eps_uu.numel());
    for (i, &(wi, wt)) in omegas.iter().enumerate() {
        let r = i * n..(i + 1) * n;
        out.extend(cfg_multimodal_slice(
            &eps_uu.data()[r.clone()],
            &eps_iu.data()[r.clone()],
            &eps_it.data()[r],
            wi,
            wt,
        )?);
    }
    Ok(Tensor::new(eps_uu.shape(), out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spec_arithmetic() {
        assert_eq!(cfg_text_slice(&[2.0f64], &[1.0], 3.0).unwrap(), vec![5.0]);
        assert_eq!(
            cfg_multimodal_slice(&[0.0f64], &[1.0], &[2.0], 1.5, 7.5).unwrap(),
            vec![9.0]
        );
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(image_guidance_schedule(1000, 1000, 1.8).unwrap(), 1.8);
        assert_eq!(image_guidance_schedule(0, 1000, 1.8).unwrap(), 0.0);
        assert!((image_guidance_schedule(500, 1000, 1.8).unwrap() - 1.272_792_206).abs() < 1e-9);
        assert!(image_guidance_schedule(1001, 1000, 1.8).is_err());
        let c = GuidanceConfig {
            omega_i_mode: ImageGuidanceMode::Constant,
            ..Default::default()
        };
        assert_eq!(c.omega_i(3, 1000).unwrap(), 1.8);
    }

    fn vecs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..32).prop_flat_map(|n| {
            (
                proptest::collection::vec(-10.0f64..10.0, n),
                proptest::collection::vec(-10.0f64..10.0, n),
                proptest::collection::vec(-10.0f64..10.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn exact_reductions((uu, iu, it) in vecs(), w in 0.0f64..20.0) {
            prop_assert_eq!(cfg_multimodal_slice(&uu, &iu, &it, 1.0, 1.0).unwrap(), it.clone());
            prop_assert_eq!(cfg_multimodal_slice(&uu, &iu, &it, 0.0, 0.0).unwrap(), uu.clone());
            prop_assert_eq!(cfg_text_slice(&it, &uu, 0.0).unwrap(), it.clone());
            prop_assert_eq!(cfg_text_slice(&it, &it, w).unwrap(), it.clone());
        }

        #[test]
        fn unit_image_scale_is_text_cfg_on_image_branch((uu, iu, it) in vecs(), w in 0.0f64..20.0) {
            let a = cfg_multimodal_slice(&uu, &iu, &it, 1.0, w).unwrap();
            for i in 0..a.len() {
                let b = iu[i] + w * (it[i] - iu[i]);
                prop_assert!((a[i] - b).abs() <= 1e-12 * (1.0 + b.abs() + w * 10.0));
            }
        }

        #[test]
        fn homogeneous_in_eps((uu, iu, it) in vecs(), wi in 0.0f64..2.0, wt in 0.0f64..15.0, k in -8i32..8) {
            // Power-of-two scaling is exact in binary floating point.
            let s = 2f64.powi(k);
            let scale = |v: &Vec<f64>| v.iter().map(|x| x * s).collect::<Vec<_>>();
            let base = cfg_multimodal_slice(&uu, &iu, &it, wi, wt).unwrap();
            let scaled = cfg_multimodal_slice(&scale(&uu), &scale(&iu), &scale(&it), wi, wt).unwrap();
            prop_assert_eq!(scaled, scale(&base));
        }

        #[test]
        fn schedule_is_monotone(a in 0usize..=1000, b in 0usize..=1000) {
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(image_guidance_schedule(lo, 1000, 1.8).unwrap() <= image_guidance_schedule(hi, 1000, 1.8).unwrap());
        }
    }
}
