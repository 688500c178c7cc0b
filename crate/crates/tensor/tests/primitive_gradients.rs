use cbhvt_tensor::gradcheck::{check_gradients, DEFAULT_TOLERANCE};
use cbhvt_tensor::ops::NormStats;
use cbhvt_tensor::{Array, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    Array::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Projects an output onto fixed random weights so every element matters.
fn project(y: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::constant(rand_array(&mut rng, y.shape()));
    y.mul(&w)?.sum_all()
}

fn check(name: &str, shapes: &[&[usize]], f: impl Fn(&[Tensor]) -> Result<Tensor>) {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Array> = shapes.iter().map(|s| rand_array(&mut rng, s)).collect();
        let names: Vec<String> = (0..shapes.len()).map(|i| format!("{name}[{i}]")).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let reports = check_gradients(&names, |xs| project(&f(xs)?, seed), &inputs, DEFAULT_TOLERANCE).unwrap();
        for r in reports {
            assert!(r.passed, "seed {seed}: {r:?}");
        }
    }
}

#[test]
fn convolutions() {
    for (k, s, p) in [(1, 1, 0), (3, 1, 1), (3, 2, 1), (5, 2, 2), (2, 2, 0)] {
        check("conv2d", &[&[2, 7, 6], &[3, 2, k, k], &[3]], move |x| {
            x[0].conv2d(&x[1], Some(&x[2]), s, p)
        });
    }
    check("conv2d_batched", &[&[2, 2, 5, 5], &[3, 2, 3, 3]], |x| x[0].conv2d(&x[1], None, 2, 1));
    check("conv_transpose2d", &[&[3, 4, 3], &[3, 2, 4, 4], &[2]], |x| {
        x[0].conv_transpose2d(&x[1], Some(&x[2]), 2, 1)
    });
}

#[test]
fn pooling_and_resizing() {
    check("max_pool2d", &[&[2, 6, 7]], |x| x[0].max_pool2d(3, 2, 1));
    check("global_avg_pool", &[&[3, 4, 5]], |x| x[0].global_avg_pool());
    check("global_max_pool", &[&[3, 4, 5]], |x| x[0].global_max_pool());
    check("upsample_nearest", &[&[2, 3, 3]], |x| x[0].upsample_nearest(2, 6, 5));
    check("resize_bilinear_up", &[&[2, 3, 4]], |x| x[0].resize_bilinear(7, 9));
    check("resize_bilinear_down", &[&[1, 2, 8, 8]], |x| x[0].resize_bilinear(3, 5));
    check("roi_align", &[&[2, 6, 6]], |x| {
        x[0].roi_align(&[[0.0, 0.0, 24.0, 24.0], [3.0, 5.0, 17.5, 11.0], [8.0, 8.0, 8.0, 9.0]], 0.25, 3, 3, 2)
    });
}

#[test]
fn normalization() {
    check("batch_norm_train", &[&[3, 4, 4], &[3], &[3]], |x| {
        Ok(x[0].batch_norm(&x[1], &x[2], &NormStats::Batch, 1e-5)?.0)
    });
    let fixed = NormStats::Fixed {
        mean: vec![0.1, -0.2],
        var: vec![0.5, 2.0],
    };
    check("batch_norm_eval", &[&[2, 2, 3, 3], &[2], &[2]], |x| {
        Ok(x[0].batch_norm(&x[1], &x[2], &fixed, 1e-5)?.0)
    });
    check("layer_norm", &[&[5, 6], &[6], &[6]], |x| x[0].layer_norm(&x[1], &x[2], 1e-6));
}

#[test]
fn activations_and_arithmetic() {
    check("relu", &[&[4, 5]], |x| x[0].relu());
    check("sigmoid", &[&[4, 5]], |x| x[0].sigmoid());
    check("tanh", &[&[4, 5]], |x| x[0].tanh());
    check("gelu", &[&[4, 5]], |x| x[0].gelu());
    check("softmax", &[&[3, 4, 5]], |x| x[0].softmax(1));
    check("exp_ln", &[&[6]], |x| x[0].exp()?.add_scalar(1.0)?.ln());
    check("add_broadcast", &[&[3, 4], &[4]], |x| x[0].add(&x[1]));
    check("mul_broadcast", &[&[2, 3, 4], &[3, 1]], |x| x[0].mul(&x[1]));
    check("div", &[&[3, 4], &[3, 4]], |x| x[0].div(&x[1].square()?.add_scalar(0.5)?));
    check("matmul", &[&[3, 4], &[4, 2]], |x| x[0].matmul(&x[1]));
}

#[test]
fn shape_manipulation() {
    check("permute", &[&[2, 3, 4]], |x| x[0].permute(&[2, 0, 1]));
    check("concat_narrow", &[&[2, 3], &[2, 2]], |x| Tensor::concat(&[x[0].clone(), x[1].clone()], 1)?.narrow(1, 1, 3));
    check("index_select", &[&[4, 3]], |x| x[0].index_select(&[3, 0, 3]));
    check("pick", &[&[3, 4]], |x| x[0].softmax(1)?.pick(&[0, 3, 1]));
    check("max_axis", &[&[3, 4]], |x| x[0].max_axis(1, true));
}
