//! Central finite differences against the hand-written backward of every op.

use corredit_nn::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;

/// Checks d/dinputs of `sum(f(inputs) * probe)` for a fixed random probe.
fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&[Var<f64>]) -> Var<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let out_shape = {
        let g = Graph::inference();
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        f(&vars).shape().to_vec()
    };
    let probe = Tensor::<f64>::randn(&out_shape, 1.0, &mut rng);
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let g = Graph::inference();
        let vars: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&vars);
        y.value().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };

    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = f(&vars);
    let loss = y.mul(&g.constant(probe.clone())).unwrap().sum_all();
    let grads = g.backward(&loss).unwrap();

    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v);
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / (1.0 + a.abs().max(numeric.abs()));
            assert!(err < TOL, "input {i} elem {j}: analytic {a} numeric {numeric}");
        }
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn conv2d_all_geometries() {
    for &(k, stride) in &[(3, 1), (3, 2), (1, 1)] {
        check(
            vec![rand(&[2, 3, 5, 4], 1), rand(&[4, 3, k, k], 2), rand(&[4], 3)],
            |v| v[0].conv2d(&v[1], Some(&v[2]), stride, k / 2).unwrap(),
        );
    }
}

#[test]
fn linear_and_bias() {
    check(vec![rand(&[3, 5], 1), rand(&[4, 5], 2), rand(&[4], 3)], |v| {
        v[0].linear(&v[1], Some(&v[2])).unwrap()
    });
}

#[test]
fn group_norm_with_affine() {
    check(vec![rand(&[2, 4, 3, 3], 4), rand(&[4], 5), rand(&[4], 6)], |v| {
        v[0].group_norm(2, &v[1], &v[2], 1e-5).unwrap()
    });
}

#[test]
fn elementwise_ops() {
    check(vec![rand(&[2, 3], 7), rand(&[2, 3], 8)], |v| {
        let a = v[0].silu();
        let b = v[0].mul(&v[1]).unwrap();
        a.add(&b).unwrap().sub(&v[1].scale(0.3)).unwrap()
    });
}

#[test]
fn shape_ops() {
    check(
        vec![rand(&[2, 2, 3, 3], 9), rand(&[2, 1, 3, 3], 10), rand(&[2, 3], 11)],
        |v| {
            let c = v[0].concat_channels(&v[1]).unwrap();
            let c = c.add_channel_embedding(&v[2]).unwrap();
            let u = c.upsample_nearest2x().unwrap();
            u.reshape(&[2, 3, 36]).unwrap().transpose_last2().unwrap()
        },
    );
}

#[test]
fn attention_pieces() {
    check(vec![rand(&[2, 4, 3], 12), rand(&[2, 3, 5], 13)], |v| {
        let s = v[0].bmm(&v[1]).unwrap();
        s.softmax_last().unwrap()
    });
}

#[test]
fn reductions_and_losses() {
    check(vec![rand(&[3, 4], 14), rand(&[3, 4], 15)], |v| {
        let ce = v[0].cross_entropy(&[0, 3, 1]).unwrap();
        let mse = v[0].mse(&v[1]).unwrap();
        let pool = v[1]
            .reshape(&[3, 1, 2, 2])
            .unwrap()
            .global_avg_pool()
            .unwrap()
            .mean_all();
        ce.add(&mse).unwrap().add(&pool).unwrap()
    });
}

#[test]
fn gather_and_per_sample_scale() {
    check(vec![rand(&[3, 4], 16)], |v| {
        v[0].gather_rows(&[2, 0, 2])
            .unwrap()
            .scale_per_sample(&[0.5, -1.0, 2.0])
            .unwrap()
    });
}

#[test]
fn detach_blocks_gradient() {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(&[1], vec![3.0]).unwrap());
    let y = x.mul(&x.detach()).unwrap().sum_all();
    let grads = g.backward(&y).unwrap();
    assert_eq!(grads.get(&x).unwrap().data(), &[3.0]);
}

#[test]
fn inference_graph_records_nothing() {
    let g = Graph::<f32>::inference();
    let x = g.leaf(Tensor::ones(&[2, 2]));
    let y = x.silu().sum_all();
    assert!(!y.is_tracked());
    assert!(g.is_empty());
    assert!(g.backward(&y).is_err());
}
