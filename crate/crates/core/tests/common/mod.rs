#![allow(dead_code)]

use gsc_core::{Activation, HeadModel, Layer, Matrix, Vector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

pub fn vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vector {
    Vector::new(gaussian(rng, n, scale)).unwrap()
}

pub fn layer(rng: &mut ChaCha8Rng, input: usize, output: usize, act: Activation) -> Layer {
    let w = gaussian(rng, input * output, 1.0 / (input as f64).sqrt());
    let b = gaussian(rng, output, 0.1);
    Layer::new(
        Matrix::new(output, input, w).unwrap(),
        Vector::new(b).unwrap(),
        act,
    )
    .unwrap()
}

pub fn affine_head(rng: &mut ChaCha8Rng, d: usize, k: usize) -> HeadModel {
    HeadModel::new(vec![layer(rng, d, k, Activation::None)]).unwrap()
}

/// `dims[0] → dims[1] → … → dims[n]` with `act` on every hidden layer.
pub fn mlp(rng: &mut ChaCha8Rng, dims: &[usize], act: Activation) -> HeadModel {
    let n = dims.len() - 1;
    let layers = (0..n)
        .map(|i| {
            let a = if i + 1 == n { Activation::None } else { act };
            layer(rng, dims[i], dims[i + 1], a)
        })
        .collect();
    HeadModel::new(layers).unwrap()
}

pub fn random_dims(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let depth = rng.random_range(2..=3);
    let mut dims = vec![rng.random_range(3..=24)];
    for _ in 1..depth {
        dims.push(rng.random_range(3..=16));
    }
    dims.push(rng.random_range(2..=6));
    dims
}
