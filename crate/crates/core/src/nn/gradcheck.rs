//! Finite-difference checks of every layer's backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Loss `Σ wᵢ·yᵢ` with fixed random weights, evaluated in train mode.
fn probe_loss(layer: &mut dyn Layer, x: &Tensor, w: &[f32]) -> f64 {
    let y = layer.forward_train(x).unwrap();
    // Drop the cache so the next call starts fresh.
    let _ = layer.backward(&Tensor::zeros(y.shape()));
    y.data().iter().zip(w).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
}

fn check(mut layer: Box<dyn Layer>, in_shape: &[usize], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = in_shape.iter().product();
    let x = Tensor::new(in_shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let y = layer.forward_train(&x).unwrap();
    let w: Vec<f32> = (0..y.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    zero_grad(layer.as_mut());
    let dx = layer.backward(&Tensor::new(y.shape().to_vec(), w.clone()).unwrap());
    let mut grads = Vec::new();
    layer.visit("", &mut |name, p| {
        if p.trainable {
            grads.push((name.to_string(), p.grad.clone()));
        }
    });
    // Undo accumulated grads so parameter probes below don't see them.
    zero_grad(layer.as_mut());

    let h = 2e-3f32;
    let tol = |a: f64, b: f64| (a - b).abs() <= 2e-2 * a.abs().max(b.abs()).max(1e-1);
    for i in (0..n).step_by((n / 17).max(1)) {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let lp = probe_loss(layer.as_mut(), &xp, &w);
        xp.data_mut()[i] -= 2.0 * h;
        let lm = probe_loss(layer.as_mut(), &xp, &w);
        let fd = (lp - lm) / (2.0 * h as f64);
        let an = dx.data()[i] as f64;
        assert!(tol(fd, an), "input grad {i}: fd {fd} vs analytic {an}");
    }
    for (name, g) in grads {
        for j in (0..g.len()).step_by((g.len() / 7).max(1)) {
            let bump = |layer: &mut dyn Layer, d: f32| {
                layer.visit_mut("", &mut |nm, p| {
                    if nm == name {
                        p.value[j] += d;
                    }
                });
            };
            bump(layer.as_mut(), h);
            let lp = probe_loss(layer.as_mut(), &x, &w);
            bump(layer.as_mut(), -2.0 * h);
            let lm = probe_loss(layer.as_mut(), &x, &w);
            bump(layer.as_mut(), h);
            let fd = (lp - lm) / (2.0 * h as f64);
            assert!(tol(fd, g[j] as f64), "{name}[{j}]: fd {fd} vs analytic {}", g[j]);
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(3)
}

const INIT: Init = Init::Normal { std: 0.3 };

#[test]
fn linear_backward() {
    check(Box::new(Linear::new(5, 3, INIT, &mut rng())), &[4, 5], 1);
}

#[test]
fn conv2d_backward() {
    check(Box::new(Conv2d::new(2, 3, 3, 2, 1, INIT, &mut rng())), &[2, 2, 5, 5], 2);
    check(Box::new(Conv2d::new(2, 3, 1, 1, 0, INIT, &mut rng())), &[2, 2, 3, 3], 3);
}

#[test]
fn conv_transpose2d_backward() {
    check(Box::new(ConvTranspose2d::new(3, 2, 3, 2, 1, 1, INIT, &mut rng())), &[2, 3, 3, 3], 4);
}

#[test]
fn conv_transpose2d_doubles_resolution() {
    let l = ConvTranspose2d::new(3, 2, 3, 2, 1, 1, INIT, &mut rng());
    let y = l.forward(&Tensor::zeros(&[1, 3, 4, 4])).unwrap();
    assert_eq!(y.shape(), &[1, 2, 8, 8]);
}

#[test]
fn batch_norm_backward() {
    let mut bn = BatchNorm::new(3);
    bn.gamma.value = vec![0.5, 1.5, -1.0];
    bn.beta.value = vec![0.1, -0.2, 0.3];
    check(Box::new(bn), &[4, 3, 2, 2], 5);
    check(Box::new(BatchNorm::new(2)), &[5, 2], 6);
}

#[test]
fn activations_and_pooling_backward() {
    check(Box::new(LeakyRelu::new(0.2)), &[3, 7], 7);
    check(Box::new(Sigmoid::default()), &[3, 7], 8);
    check(Box::new(GlobalAvgPool::default()), &[2, 3, 2, 2], 9);
}

#[test]
fn residual_unit_backward() {
    check(Box::new(ResidualUnit::new(2, 3, 2, 0.2, INIT, &mut rng())), &[2, 2, 4, 4], 10);
    check(Box::new(ResidualUnit::new(3, 3, 1, 0.2, INIT, &mut rng())), &[2, 3, 4, 4], 11);
}

#[test]
fn sequential_backward() {
    let mut r = rng();
    let mut s = Sequential::new();
    s.push("fc", Linear::new(4, 8, INIT, &mut r));
    s.push("view", Reshape::new(&[2, 2, 2]));
    s.push("bn", BatchNorm::new(2));
    s.push("act", Relu::default());
    s.push("up", ConvTranspose2d::new(2, 1, 3, 2, 1, 1, INIT, &mut r));
    s.push("out", Sigmoid::default());
    check(Box::new(s), &[3, 4], 12);
}
