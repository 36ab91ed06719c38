use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixOp {
    AdditiveMix,
    MultiplicativeMix,
}

/// Floor inside the power of the multiplicative mix, so zeros stay finite.
pub const MULTIPLICATIVE_EPS: f32 = 1e-6;

/// One mixing round.
///
/// Additive: `(1 - w) * image + w * asset`. Multiplicative: a weighted
/// geometric mean computed on values rescaled to `[0, 2]` and mapped back,
/// `((2x)^(1-w) * (2a)^w) / 2`, so identical inputs reproduce the input.
pub fn pixmix_round(image: &ImageTensor, asset: &ImageTensor, op: MixOp, weight: f32) -> Result<ImageTensor> {
    image.check_same_shape(asset)?;
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::InvalidArgument(format!("mix weight {weight} outside [0, 1]")));
    }
    let data = image
        .data()
        .iter()
        .zip(asset.data())
        .map(|(&x, &a)| match op {
            MixOp::AdditiveMix => (1.0 - weight) * x + weight * a,
            MixOp::MultiplicativeMix => {
                let xb = (2.0 * x).max(MULTIPLICATIVE_EPS);
                let ab = (2.0 * a).max(MULTIPLICATIVE_EPS);
                0.5 * xb.powf(1.0 - weight) * ab.powf(weight)
            }
        })
        .collect();
    image.with_data(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: usize) -> ImageTensor {
        ImageTensor::from_fn(8, 8, |c, y, x| ((c * 7 + y * 5 + x * 3 + seed) % 11) as f32 / 10.0)
    }

    #[test]
    fn additive_endpoints() {
        let (a, b) = (img(0), img(4));
        assert_eq!(pixmix_round(&a, &b, MixOp::AdditiveMix, 0.0).unwrap(), a);
        assert_eq!(pixmix_round(&a, &b, MixOp::AdditiveMix, 1.0).unwrap(), b);
    }

    #[test]
    fn multiplicative_self_mix_is_normalised_input() {
        let a = img(2);
        for w in [0.1, 0.35, 0.6] {
            let out = pixmix_round(&a, &a, MixOp::MultiplicativeMix, w).unwrap();
            for (&o, &x) in out.data().iter().zip(a.data()) {
                let expected = (2.0 * x).max(MULTIPLICATIVE_EPS) / 2.0;
                assert!((o - expected).abs() < 1e-6, "{o} vs {expected}");
            }
        }
    }

    #[test]
    fn shape_mismatch_and_bad_weight_error() {
        let a = img(0);
        let b = ImageTensor::filled(4, 8, 0.5);
        assert!(pixmix_round(&a, &b, MixOp::AdditiveMix, 0.5).is_err());
        assert!(pixmix_round(&a, &a, MixOp::AdditiveMix, 1.5).is_err());
    }
}
