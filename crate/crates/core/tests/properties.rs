use corredit::consistency::{boundary_coeffs, DistillConfig};
use corredit::diffusion::{add_noise, ddim_step, predict_z0};
use corredit::guidance::{cfg_multimodal_batched, cfg_multimodal_slice, image_guidance_schedule};
use corredit::schedule::{NoiseSchedule, ScheduleConfig};
use corredit::tta::ensemble_probs;
use corredit_nn::Tensor;
use proptest::prelude::*;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::cosine(&ScheduleConfig::default()).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn triple(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    let v = || proptest::collection::vec(-5.0f64..5.0, n);
    (v(), v(), v())
}

proptest! {
    #[test]
    fn guidance_matches_nested_form((uu, iu, it) in triple(16), wi in -1.0f64..3.0, wt in 0.0f64..20.0) {
        let got = cfg_multimodal_slice(&uu, &iu, &it, wi, wt).unwrap();
        for k in 0..uu.len() {
            let nested = uu[k] + wi * (iu[k] - uu[k]) + wt * (it[k] - iu[k]);
            prop_assert!(close(got[k], nested, 1e-12));
        }
    }

    #[test]
    fn batched_guidance_is_per_sample((uu, iu, it) in triple(24), w in proptest::collection::vec((0.0f64..2.0, 0.0f64..15.0), 3)) {
        let t = |v: &Vec<f64>| Tensor::new(&[3, 8], v.clone()).unwrap();
        let out = cfg_multimodal_batched(&t(&uu), &t(&iu), &t(&it), &w).unwrap();
        for (b, &(wi, wt)) in w.iter().enumerate() {
            let r = b * 8..(b + 1) * 8;
            let one = cfg_multimodal_slice(&uu[r.clone()], &iu[r.clone()], &it[r.clone()], wi, wt).unwrap();
            prop_assert_eq!(&out.data()[r], &one[..]);
        }
    }

    #[test]
    fn image_scale_follows_square_root(t in 0usize..=1000, w in 0.1f64..5.0) {
        let v = image_guidance_schedule(t, 1000, w).unwrap();
        prop_assert!(close((v / w).powi(2), t as f64 / 1000.0, 1e-12));
    }

    #[test]
    fn schedule_is_monotone_and_preserving(t in 1usize..=1000) {
        let s = schedule();
        let (a0, s0) = s.lookup(t - 1).unwrap();
        let (a1, s1) = s.lookup(t).unwrap();
        prop_assert!(a1 < a0 && s1 > s0);
        prop_assert!((a1 * a1 + s1 * s1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_grid_shape(steps in 1usize..=200) {
        let ts = schedule().sampling_timesteps(steps).unwrap();
        prop_assert_eq!(ts.len(), steps);
        prop_assert_eq!(ts[0], 1000);
        prop_assert!(ts.windows(2).all(|p| p[0] > p[1]));
        prop_assert!(*ts.last().unwrap() >= 1);
    }

    /// With the true noise, a deterministic hop lands exactly on the
    /// forward-process point at the earlier time.
    #[test]
    fn ddim_with_true_noise_is_exact(
        z0 in proptest::collection::vec(-1.0f64..1.0, 8),
        eps in proptest::collection::vec(-3.0f64..3.0, 8),
        (t, back) in (2usize..=1000).prop_flat_map(|t| (Just(t), 1..t)),
    ) {
        let s = schedule();
        let (z0, eps) = (Tensor::new(&[1, 8], z0).unwrap(), Tensor::new(&[1, 8], eps).unwrap());
        let z_t = add_noise(&z0, &eps, &[t], &s).unwrap();
        let prev = t - back;
        let stepped = ddim_step(&z_t, &eps, t, prev, &s).unwrap();
        let expect = add_noise(&z0, &eps, &[prev], &s).unwrap();
        for (a, b) in stepped.data().iter().zip(expect.data()) {
            prop_assert!(close(*a, *b, 1e-9));
        }
        let x0 = predict_z0(&z_t, &eps, t, &s).unwrap();
        for (a, b) in x0.data().iter().zip(z0.data()) {
            prop_assert!(close(*a, *b, 1e-9 / s.lookup(t).unwrap().0));
        }
    }

    #[test]
    fn boundary_coefficients_are_monotone(t in 20usize..1000, s in 0.05f64..5.0) {
        let a = boundary_coeffs(t, 20, s).unwrap();
        let b = boundary_coeffs(t + 1, 20, s).unwrap();
        prop_assert!(b.c_skip < a.c_skip && b.c_out > a.c_out);
        prop_assert!((0.0..=1.0).contains(&a.c_skip) && (0.0..=1.0).contains(&a.c_out));
    }

    #[test]
    fn consistency_sampling_indices(nfe in 1usize..50) {
        let grid = DistillConfig::default().grid(1000);
        let idx = grid.sampling_indices(nfe).unwrap();
        prop_assert_eq!(idx.len(), nfe);
        prop_assert_eq!(idx[0], 50);
        prop_assert!(idx.windows(2).all(|p| p[0] > p[1]));
        prop_assert!(grid.timestep(*idx.last().unwrap()) > grid.boundary());
    }

    #[test]
    fn ensemble_is_half_original_half_edit_mean(
        raw in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 5), 2..7),
    ) {
        let norm = |v: &Vec<f64>| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
        let probs: Vec<Vec<f64>> = raw.iter().map(norm).collect();
        let (orig, edits) = (&probs[0], &probs[1..]);
        let got = ensemble_probs(orig, edits).unwrap();
        prop_assert!(close(got.iter().sum::<f64>(), 1.0, 1e-12));
        for k in 0..5 {
            let mut edit_sum = 0.0;
            for e in edits {
                edit_sum += e[k];
            }
            let want = (orig[k] + edit_sum / edits.len() as f64) / 2.0;
            prop_assert!(close(got[k], want, 1e-12));
        }
    }
}
