//! Differentiable building blocks for the segmentation network.

mod direct;
pub mod gradcheck;
pub mod layers;
mod tensor;

pub use layers::Mode;
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod tests {
    use super::layers::*;
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = t(&[1, 1, 3, 4], &(0..12).map(|v| v as f64 * 0.5 - 2.0).collect::<Vec<_>>());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let (y, _) = conv2d_forward(&x, &t(&[1, 1, 3, 3], &k), &t(&[1], &[0.0]), 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn single_pixel_all_ones_kernel() {
        let x = t(&[1, 1, 1, 1], &[0.75]);
        let (y, _) = conv2d_forward(&x, &t(&[1, 1, 3, 3], &[1.0; 9]), &t(&[1], &[0.0]), 1).unwrap();
        assert_eq!(y.data(), &[0.75]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_bad_padding() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[3, 1, 3, 3]);
        let b = Tensor::zeros(&[3]);
        assert!(matches!(conv2d_forward(&x, &w, &b, 1), Err(crate::Error::Shape(_))));
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        assert!(conv2d_forward(&x, &w, &b, 0).is_err());
    }

    #[test]
    fn batchnorm_train_standardises() {
        let mut rng = crate::synthdata::rng_from_seed(5);
        let x = gradcheck::random_tensor(&mut rng, &[4, 3, 5, 5], -3.0, 7.0);
        let ones = Tensor::filled(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let (y, _, stats) = batchnorm_forward(&x, &ones, &zeros, &zeros, &ones, Mode::Train).unwrap();
        assert!(stats.is_some());
        let hw = 25;
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| y.data()[(b * 3 + c) * hw..(b * 3 + c + 1) * hw].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5);
            // eps = 1e-5 shrinks the variance slightly
            assert!((v - 1.0).abs() < 1e-5 * 5.0, "{v}");
        }
    }

    #[test]
    fn batchnorm_train_needs_two_samples() {
        let x = Tensor::<f32>::zeros(&[1, 2, 3, 3]);
        let ones = Tensor::filled(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let err = batchnorm_forward(&x, &ones, &zeros, &zeros, &ones, Mode::Train).unwrap_err();
        assert!(matches!(err, crate::Error::InvalidState(_)));
        assert!(batchnorm_forward(&x, &ones, &zeros, &zeros, &ones, Mode::Eval).is_ok());
    }

    #[test]
    fn batchnorm_eval_is_deterministic() {
        let mut rng = crate::synthdata::rng_from_seed(6);
        let x = gradcheck::random_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        let g = Tensor::filled(&[2], 1.3);
        let b = Tensor::filled(&[2], 0.2);
        let rm = Tensor::filled(&[2], 0.1);
        let rv = Tensor::filled(&[2], 2.0);
        let a = batchnorm_forward(&x, &g, &b, &rm, &rv, Mode::Eval).unwrap().0;
        let c = batchnorm_forward(&x, &g, &b, &rm, &rv, Mode::Eval).unwrap().0;
        assert_eq!(a, c);
    }

    #[test]
    fn running_stats_use_momentum() {
        let mut rm = Tensor::<f64>::zeros(&[1]);
        let mut rv = Tensor::filled(&[1], 1.0);
        let stats = BatchStats {
            mean: vec![2.0],
            var_unbiased: vec![3.0],
        };
        update_running_stats(&mut rm, &mut rv, &stats);
        assert!((rm.data()[0] - 0.2).abs() < 1e-12);
        assert!((rv.data()[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn dropout_modes() {
        let x = Tensor::<f32>::filled(&[2, 2, 4, 4], 1.0);
        let (y, f) = dropout_forward(&x, 0.4, 1, Mode::Eval).unwrap();
        assert_eq!(y, x);
        assert!(f.is_none());
        let (y, _) = dropout_forward(&x, 0.4, 1, Mode::Train).unwrap();
        let kept = 1.0 / 0.6f32;
        assert!(y.data().iter().all(|&v| v == 0.0 || v == kept));
        assert!(y.data().iter().any(|&v| v == 0.0));
        assert_eq!(y, dropout_forward(&x, 0.4, 1, Mode::Train).unwrap().0);
    }

    #[test]
    fn adaptive_pool_to_one() {
        let x = t(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]);
        assert_eq!(adaptive_avgpool_forward(&x, 1, 1).unwrap().data(), &[4.0]);
    }

    #[test]
    fn adaptive_bins_overlap_when_uneven() {
        // 8 -> 3 bins: [0,3), [2,6), [5,8)
        let x = t(&[1, 1, 1, 8], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let y = adaptive_avgpool_forward(&x, 1, 3).unwrap();
        assert_eq!(y.data(), &[1.0, 3.5, 6.0]);
    }

    #[test]
    fn concat_split_identity() {
        let a = t(&[2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2, 1, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]);
        let parts = split_channels(&c, &[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = Tensor::<f32>::filled(&[1, 2, 3, 5], 0.625);
        let y = upsample2_bilinear_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 6, 10]);
        assert!(y.data().iter().all(|&v| v == 0.625));
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let x = t(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]);
        let (y, arg) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[1.0]);
        let dx = maxpool2_backward(&arg, x.shape(), &t(&[1, 1, 1, 1], &[2.0])).unwrap();
        assert_eq!(dx.data(), &[2.0, 0.0, 0.0, 0.0]);
        assert!(maxpool2_forward(&Tensor::<f64>::zeros(&[1, 1, 3, 2])).is_err());
    }
}
