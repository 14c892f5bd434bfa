//! Central finite-difference verification of analytic gradients.
//!
//! Each layer check draws a random instance, contracts the layer output
//! with a random cotangent `r` to get the scalar `L = sum(r * y)`, and
//! compares the backward pass (fed `dy = r`) against
//! `(L(x + h e_i) - L(x - h e_i)) / 2h` for every input and parameter
//! element.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layers::{self, Mode};
use super::tensor::Tensor;
use crate::synthdata::{derive_seed, rng_from_seed};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Denominator floor so exactly-zero gradients are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Elements whose two probes straddled a kink.
    pub skipped: usize,
}

impl Comparison {
    pub fn merge(self, other: Comparison) -> Comparison {
        let (checked, skipped) = (self.checked + other.checked, self.skipped + other.skipped);
        let worse = if other.max_rel_error > self.max_rel_error { other } else { self };
        Comparison {
            checked,
            skipped,
            ..worse
        }
    }

    pub fn empty() -> Comparison {
        Comparison {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
            skipped: 0,
        }
    }

    /// One compared element.
    pub fn single(index: usize, analytic: f64, numeric: f64) -> Comparison {
        Comparison {
            max_rel_error: relative_error(analytic, numeric),
            worst_index: index,
            analytic,
            numeric,
            checked: 1,
            skipped: 0,
        }
    }
}

/// Compares `analytic` with central differences of `f` around `x`.
pub fn compare(analytic: &[f64], x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Comparison {
    compare_branches(analytic, x, |v| (f(v), 0))
}

/// Like [`compare`] for piecewise-smooth `f`, which also returns a
/// fingerprint of its branch choices (ReLU signs, pooling winners). An
/// element whose two probes land on different branches is skipped: the
/// difference quotient across a kink says nothing about either side.
pub fn compare_branches(analytic: &[f64], x: &[f64], mut f: impl FnMut(&[f64]) -> (f64, u64)) -> Comparison {
    assert_eq!(analytic.len(), x.len());
    let mut probe = x.to_vec();
    let mut out = Comparison::empty();
    for i in 0..x.len() {
        probe[i] = x[i] + STEP;
        let (up, bu) = f(&probe);
        probe[i] = x[i] - STEP;
        let (down, bd) = f(&probe);
        probe[i] = x[i];
        if bu != bd {
            out.skipped += 1;
            continue;
        }
        out = out.merge(Comparison::single(i, analytic[i], (up - down) / (2.0 * STEP)));
    }
    out
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Uniform values whose magnitude is at least `gap`, so no element sits
/// within a finite-difference step of a kink at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape")
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with_data(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, data.to_vec()).expect("shape")
}

/// Named layer-level gradient checks.
pub const LAYERS: &[&str] = &[
    "conv3x3",
    "conv1x1",
    "batchnorm_train",
    "batchnorm_eval",
    "relu",
    "maxpool2",
    "upsample2_bilinear",
    "resize_bilinear",
    "adaptive_avgpool",
    "concat_channels",
    "dropout",
    "sigmoid",
];

/// Runs gradient check `layer` on the random instance `instance`.
pub fn check_layer(layer: &str, instance: u64) -> Comparison {
    let mut rng = rng_from_seed(derive_seed(0x6AD_C4EC, instance));
    match layer {
        "conv3x3" | "conv1x1" => {
            let k = if layer == "conv3x3" { 3 } else { 1 };
            let pad = (k - 1) / 2;
            let c = rng.random_range(1..=3);
            let o = rng.random_range(1..=3);
            let xs = [2, c, 4, 4];
            let ws = [o, c, k, k];
            let x = random_tensor(&mut rng, &xs, -1.0, 1.0);
            let w = random_tensor(&mut rng, &ws, -1.0, 1.0);
            let b = random_tensor(&mut rng, &[o], -1.0, 1.0);
            let (y, cache) = layers::conv2d_forward(&x, &w, &b, pad).unwrap();
            let r = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
            let (dx, dw, db) = layers::conv2d_backward(&cache, &w, &r, true).unwrap();
            let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
                dot(&layers::conv2d_forward(x, w, b, pad).unwrap().0, &r)
            };
            compare(dx.unwrap().data(), x.data(), |v| loss(&with_data(&xs, v), &w, &b))
                .merge(compare(dw.data(), w.data(), |v| loss(&x, &with_data(&ws, v), &b)))
                .merge(compare(db.data(), b.data(), |v| loss(&x, &w, &with_data(&[o], v))))
        }
        "batchnorm_train" | "batchnorm_eval" => {
            let mode = if layer == "batchnorm_train" { Mode::Train } else { Mode::Eval };
            let c = rng.random_range(1..=3);
            let xs = [rng.random_range(2..=3), c, 3, 4];
            let x = random_tensor(&mut rng, &xs, -2.0, 2.0);
            let g = random_tensor(&mut rng, &[c], 0.5, 1.5);
            let bt = random_tensor(&mut rng, &[c], -0.5, 0.5);
            let rm = random_tensor(&mut rng, &[c], -0.3, 0.3);
            let rv = random_tensor(&mut rng, &[c], 0.5, 1.5);
            let (y, cache, _) = layers::batchnorm_forward(&x, &g, &bt, &rm, &rv, mode).unwrap();
            let r = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
            let (dx, dg, db) = layers::batchnorm_backward(&cache, &g, &r).unwrap();
            let loss = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
                dot(&layers::batchnorm_forward(x, g, b, &rm, &rv, mode).unwrap().0, &r)
            };
            compare(dx.data(), x.data(), |v| loss(&with_data(&xs, v), &g, &bt))
                .merge(compare(dg.data(), g.data(), |v| loss(&x, &with_data(&[c], v), &bt)))
                .merge(compare(db.data(), bt.data(), |v| loss(&x, &g, &with_data(&[c], v))))
        }
        "relu" => {
            let xs = [2, 2, 3, 3];
            let x = away_from_zero(&mut rng, &xs, 1e-2);
            let (y, mask) = layers::relu_forward(&x);
            let r = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
            let dx = layers::relu_backward(&mask, &r);
            compare(dx.data(), x.data(), |v| dot(&layers::relu_forward(&with_data(&xs, v)).0, &r))
        }
        "maxpool2" => {
            let xs = [2, 2, 4, 6];
            let n: usize = xs.iter().product();
            // distinct values spaced well beyond the step
            let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                vals.swap(i, j);
            }
            let x = with_data(&xs, &vals);
            let (y, arg) = layers::maxpool2_forward(&x).unwrap();
            let r = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
            let dx = layers::maxpool2_backward(&arg, &xs, &r).unwrap();
            compare(dx.data(), x.data(), |v| {
                dot(&layers::maxpool2_forward(&with_data(&xs, v)).unwrap().0, &r)
            })
        }
        "upsample2_bilinear" => {
            let xs = [2, 2, rng.random_range(1..=4), rng.random_range(1..=4)];
            let x = random_tensor(&mut rng, &xs, -1.0, 1.0);
            let y = layers::upsample2_bilinear_forward(&x).unwrap();
            let r = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
            let dx = layers::upsample2_bilinear_backward(&xs, &r).unwrap();
            compare(dx.data(), x.data(), |v| {
                dot(&layers::upsample2_bilinear_forward(&with_data(&xs, v)).unwrap(), &r)
            })
        }
        "resize_bilinear" => {
            let xs = [1, 2, rng.random_range(1..=6), rng.random_range(1..=6)];
            let (oh, ow) = (rng.random_range(1..=8), rng.random_range(1..=8));
            let x = random_tensor(&mut rng, &xs, -1.0, 1.0);
            let y = layers::resize_bilinear_forward(&x, oh, ow).unwrap();
            let r = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
            let dx = layers::resize_bilinear_backward(&xs, &r).unwrap();
            compare(dx.data(), x.data(), |v| {
                dot(&layers::resize_bilinear_forward(&with_data(&xs, v), oh, ow).unwrap(), &r)
            })
        }
        "adaptive_avgpool" => {
            let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
            let xs = [2, 2, h, w];
            let (oh, ow) = (rng.random_range(1..=h), rng.random_range(1..=w));
            let x = random_tensor(&mut rng, &xs, -1.0, 1.0);
            let y = layers::adaptive_avgpool_forward(&x, oh, ow).unwrap();
            let r = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
            let dx = layers::adaptive_avgpool_backward(&xs, &r).unwrap();
            compare(dx.data(), x.data(), |v| {
                dot(&layers::adaptive_avgpool_forward(&with_data(&xs, v), oh, ow).unwrap(), &r)
            })
        }
        "concat_channels" => {
            let (ca, cb) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let (sa, sb) = ([2, ca, 3, 2], [2, cb, 3, 2]);
            let a = random_tensor(&mut rng, &sa, -1.0, 1.0);
            let b = random_tensor(&mut rng, &sb, -1.0, 1.0);
            let y = layers::concat_channels(&[&a, &b]).unwrap();
            let r = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
            let parts = layers::split_channels(&r, &[ca, cb]).unwrap();
            compare(parts[0].data(), a.data(), |v| {
                dot(&layers::concat_channels(&[&with_data(&sa, v), &b]).unwrap(), &r)
            })
            .merge(compare(parts[1].data(), b.data(), |v| {
                dot(&layers::concat_channels(&[&a, &with_data(&sb, v)]).unwrap(), &r)
            }))
        }
        "dropout" => {
            let xs = [2, 3, 3, 3];
            let x = random_tensor(&mut rng, &xs, -1.0, 1.0);
            let seed = rng.random();
            let (y, f) = layers::dropout_forward(&x, 0.4, seed, Mode::Train).unwrap();
            let r = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
            let dx = layers::dropout_backward(f.as_deref(), &r);
            compare(dx.data(), x.data(), |v| {
                dot(&layers::dropout_forward(&with_data(&xs, v), 0.4, seed, Mode::Train).unwrap().0, &r)
            })
        }
        "sigmoid" => {
            let xs = [2, 2, 3, 3];
            let x = random_tensor(&mut rng, &xs, -4.0, 4.0);
            let y = layers::sigmoid_forward(&x);
            let r = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
            let dx = layers::sigmoid_backward(&y, &r);
            compare(dx.data(), x.data(), |v| dot(&layers::sigmoid_forward(&with_data(&xs, v)), &r))
        }
        other => panic!("unknown layer check {other:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_passes_a_few_instances() {
        for layer in LAYERS {
            for inst in 0..3 {
                let c = check_layer(layer, inst);
                assert!(c.max_rel_error < 1e-4, "{layer} #{inst}: {c:?}");
                assert!(c.checked > 0);
            }
        }
    }

    #[test]
    fn harness_detects_a_wrong_gradient() {
        let x = [0.3, -0.7];
        let f = |v: &[f64]| v[0] * v[0] + 3.0 * v[1];
        assert!(compare(&[0.6, 3.0], &x, f).max_rel_error < 1e-8);
        assert!(compare(&[0.6, 2.9], &x, f).max_rel_error > 1e-2);
    }
}
