//! Inputs shared by the benchmarks.

use wsseg::network::{NetConfig, UNet};
use wsseg::nn::Tensor;
use wsseg::synthdata::{generate_phantoms, SampleRecord};
use wsseg::training::stack_batch;
use wsseg::Mask;

/// Deterministic values in `[-1, 1)`.
pub fn ramp(shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|i| ((i * 7919) % 2000) as f32 / 1000.0 - 1.0).collect()).unwrap()
}

/// Accurately labelled desk-size phantoms.
pub fn samples(n: usize, size: usize) -> Vec<SampleRecord> {
    generate_phantoms(n, size, 0)
        .unwrap()
        .into_iter()
        .map(|p| SampleRecord::accurate(p.image, p.truth).unwrap())
        .collect()
}

/// A batch of `n` desk samples as network input, labels and confidences.
pub fn batch(n: usize) -> (Tensor<f32>, Vec<u8>, Vec<f32>) {
    let s = samples(n, 64);
    let refs: Vec<&SampleRecord> = s.iter().collect();
    stack_batch(&refs).unwrap()
}

pub fn desk_net() -> UNet {
    UNet::new(&NetConfig::default()).unwrap()
}

/// Oval annotation of a desk phantom's lesions.
pub fn oval_mask() -> Mask {
    let p = &generate_phantoms(1, 64, 3).unwrap()[0];
    wsseg::synthdata::fit_oval(&p.truth, wsseg::synthdata::OVAL_SCALE).unwrap().mask
}
