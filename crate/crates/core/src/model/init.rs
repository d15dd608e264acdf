use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Tensor;

/// Normal(0, std) truncated to two standard deviations by resampling.
pub fn trunc_normal<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

pub fn zeros(rows: usize, cols: usize) -> Tensor {
    Tensor::zeros(rows, cols)
}

pub fn ones(rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, vec![1.0; rows * cols])
}
