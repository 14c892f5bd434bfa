//! Per-pixel label confidence for coarse oval annotations.
//!
//! Both models score a foreground pixel by its distance from the centre of
//! the annotated region, normalised by the largest such distance:
//!
//! ```text
//! phi = 1 - dist / (max_dist + epsilon)   for y = 1
//! phi = 1                                 for y = 0
//! ```
//!
//! [`moi1_weights`] uses the Euclidean distance to the (rounded) foreground
//! centroid. [`moi2_weights`] uses the Mahalanobis distance under the
//! covariance of the foreground pixel indices, so the weights follow the
//! oval's own shape and orientation. The maximum is taken over foreground
//! pixels only.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::imaging::{Grid, Mask, WeightMap};

/// Default normalisation offset.
pub const DEFAULT_EPSILON: f64 = 1.0;

/// Which distance defines label confidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InaccuracyModel {
    /// Euclidean distance to the annotation centre.
    Euclidean,
    /// Mahalanobis distance under the annotation's index covariance.
    Mahalanobis,
}

impl InaccuracyModel {
    pub fn as_str(self) -> &'static str {
        match self {
            InaccuracyModel::Euclidean => "moi1",
            InaccuracyModel::Mahalanobis => "moi2",
        }
    }

    pub fn weights(self, mask: &Mask, epsilon: f64) -> Result<Weights> {
        match self {
            InaccuracyModel::Euclidean => moi1_weights(mask, epsilon),
            InaccuracyModel::Mahalanobis => moi2_weights(mask, epsilon),
        }
    }
}

impl fmt::Display for InaccuracyModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InaccuracyModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moi1" => Ok(InaccuracyModel::Euclidean),
            "moi2" => Ok(InaccuracyModel::Mahalanobis),
            other => Err(Error::InvalidArgument(format!(
                "unknown inaccuracy model {other:?} (expected moi1 or moi2)"
            ))),
        }
    }
}

/// Why a weight computation did not follow its primary formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fallback {
    /// No foreground pixels; the map is all ones.
    EmptyForeground,
    /// Foreground covariance not invertible; Euclidean weights were used.
    SingularCovariance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub map: WeightMap,
    pub fallback: Option<Fallback>,
}

/// Moments of an annotation's foreground pixel indices.
#[derive(Debug, Clone, PartialEq)]
pub struct OvalStats {
    /// Foreground centroid rounded to the nearest pixel.
    pub centroid: (usize, usize),
    /// Mean `(row, col)` of the foreground pixels.
    pub mean: [f64; 2],
    /// Inverse of the sample covariance (denominator `N - 1`).
    pub inv_cov: [[f64; 2]; 2],
    pub max_euclid: f64,
    pub max_mahal: f64,
    pub epsilon: f64,
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive and finite, got {epsilon}"
        )));
    }
    Ok(())
}

fn mean_of(pixels: &[(usize, usize)]) -> [f64; 2] {
    let n = pixels.len() as f64;
    let (sr, sc) = pixels
        .iter()
        .fold((0.0, 0.0), |(a, b), &(r, c)| (a + r as f64, b + c as f64));
    [sr / n, sc / n]
}

/// Sample covariance with `N - 1` denominator; `None` when it is singular.
fn inverse_covariance(pixels: &[(usize, usize)], mean: [f64; 2]) -> Option<[[f64; 2]; 2]> {
    if pixels.len() < 3 {
        return None;
    }
    let mut srr = 0.0;
    let mut src = 0.0;
    let mut scc = 0.0;
    for &(r, c) in pixels {
        let dr = r as f64 - mean[0];
        let dc = c as f64 - mean[1];
        srr += dr * dr;
        src += dr * dc;
        scc += dc * dc;
    }
    let denom = (pixels.len() - 1) as f64;
    let (a, b, d) = (srr / denom, src / denom, scc / denom);
    let det = a * d - b * b;
    let scale = 0.25 * (a + d) * (a + d);
    if !(det > 1e-10 * scale) {
        return None;
    }
    Some([[d / det, -b / det], [-b / det, a / det]])
}

#[inline]
fn mahalanobis(inv: &[[f64; 2]; 2], mean: [f64; 2], r: usize, c: usize) -> f64 {
    let dr = r as f64 - mean[0];
    let dc = c as f64 - mean[1];
    let q = inv[0][0] * dr * dr + 2.0 * inv[0][1] * dr * dc + inv[1][1] * dc * dc;
    q.max(0.0).sqrt()
}

#[inline]
fn euclid(center: (usize, usize), r: usize, c: usize) -> f64 {
    let dr = r as f64 - center.0 as f64;
    let dc = c as f64 - center.1 as f64;
    (dr * dr + dc * dc).sqrt()
}

fn rounded_centroid(mean: [f64; 2]) -> (usize, usize) {
    (mean[0].round() as usize, mean[1].round() as usize)
}

impl OvalStats {
    /// Computes both models' statistics. Fails when the foreground is empty
    /// or its covariance is singular.
    pub fn from_mask(mask: &Mask, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        let pixels = mask.foreground();
        if pixels.is_empty() {
            return Err(Error::InvalidInput("mask has no foreground".into()));
        }
        let mean = mean_of(&pixels);
        let centroid = rounded_centroid(mean);
        let inv_cov = inverse_covariance(&pixels, mean).ok_or_else(|| {
            Error::InvalidInput("foreground index covariance is singular".into())
        })?;
        let max_euclid = pixels
            .iter()
            .map(|&(r, c)| euclid(centroid, r, c))
            .fold(0.0, f64::max);
        let max_mahal = pixels
            .iter()
            .map(|&(r, c)| mahalanobis(&inv_cov, mean, r, c))
            .fold(0.0, f64::max);
        Ok(OvalStats {
            centroid,
            mean,
            inv_cov,
            max_euclid,
            max_mahal,
            epsilon,
        })
    }
}

fn weight_map(mask: &Mask, distances: &[f64], max_dist: f64, epsilon: f64) -> WeightMap {
    let norm = max_dist + epsilon;
    let mut out = Grid::filled(mask.height(), mask.width(), 1.0f32);
    let mut k = 0;
    for (slot, &y) in out.data_mut().iter_mut().zip(mask.data()) {
        if y != 0 {
            *slot = (1.0 - distances[k] / norm) as f32;
            k += 1;
        }
    }
    out
}

/// Euclidean model: distance to the foreground centroid rounded to the
/// nearest pixel.
pub fn moi1_weights(mask: &Mask, epsilon: f64) -> Result<Weights> {
    check_epsilon(epsilon)?;
    let pixels = mask.foreground();
    if pixels.is_empty() {
        return Ok(Weights {
            map: Grid::filled(mask.height(), mask.width(), 1.0),
            fallback: Some(Fallback::EmptyForeground),
        });
    }
    let center = rounded_centroid(mean_of(&pixels));
    let dist: Vec<f64> = pixels.iter().map(|&(r, c)| euclid(center, r, c)).collect();
    let max_dist = dist.iter().copied().fold(0.0, f64::max);
    Ok(Weights {
        map: weight_map(mask, &dist, max_dist, epsilon),
        fallback: None,
    })
}

/// Mahalanobis model. Falls back to [`moi1_weights`] when fewer than three
/// pixels or a collinear foreground make the covariance singular.
pub fn moi2_weights(mask: &Mask, epsilon: f64) -> Result<Weights> {
    check_epsilon(epsilon)?;
    let pixels = mask.foreground();
    if pixels.is_empty() {
        return moi1_weights(mask, epsilon);
    }
    let mean = mean_of(&pixels);
    let Some(inv) = inverse_covariance(&pixels, mean) else {
        let mut w = moi1_weights(mask, epsilon)?;
        w.fallback = Some(Fallback::SingularCovariance);
        return Ok(w);
    };
    let dist: Vec<f64> = pixels
        .iter()
        .map(|&(r, c)| mahalanobis(&inv, mean, r, c))
        .collect();
    let max_dist = dist.iter().copied().fold(0.0, f64::max);
    Ok(Weights {
        map: weight_map(mask, &dist, max_dist, epsilon),
        fallback: None,
    })
}

/// Raises every weight to the power `n`.
pub fn power_transform(wm: &WeightMap, n: f64) -> Result<WeightMap> {
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "power must be positive and finite, got {n}"
        )));
    }
    if n == 1.0 {
        return Ok(wm.clone());
    }
    let n = n as f32;
    Ok(wm.map(|v| v.powf(n)))
}

/// Checks the weight-map invariants against its mask: every value in
/// `(0, 1]` and exactly 1 on background.
pub fn validate_weight_map(wm: &WeightMap, mask: &Mask) -> Result<()> {
    crate::imaging::check_dims(wm, mask, "weight map vs mask")?;
    for (i, (&v, &y)) in wm.data().iter().zip(mask.data()).enumerate() {
        if !(v > 0.0 && v <= 1.0) || (y == 0 && v != 1.0) {
            return Err(Error::InvalidInput(format!(
                "weight {v} at pixel {i} violates (0,1] / background = 1"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ellipse(h: usize, w: usize, center: (f64, f64), axes: (f64, f64)) -> Mask {
        Grid::from_fn(h, w, |r, c| {
            let dr = (r as f64 - center.0) / axes.0;
            let dc = (c as f64 - center.1) / axes.1;
            (dr * dr + dc * dc <= 1.0) as u8
        })
    }

    #[test]
    fn moi1_full_square_values() {
        let mask = Grid::filled(5, 5, 1u8);
        let w = moi1_weights(&mask, 1.0).unwrap();
        assert_eq!(w.fallback, None);
        assert_eq!(w.map.get(2, 2), 1.0);
        let corner = w.map.get(0, 0) as f64;
        assert!((corner - 0.2612).abs() < 1e-4, "{corner}");
        let d = 8f64.sqrt();
        assert_eq!(w.map.get(4, 4), (1.0 - d / (d + 1.0)) as f32);
    }

    #[test]
    fn background_is_one_for_both_models() {
        let mask = ellipse(20, 24, (9.0, 11.0), (5.0, 7.0));
        for model in [InaccuracyModel::Euclidean, InaccuracyModel::Mahalanobis] {
            let w = model.weights(&mask, 1.0).unwrap();
            validate_weight_map(&w.map, &mask).unwrap();
            for (v, y) in w.map.data().iter().zip(mask.data()) {
                if *y == 0 {
                    assert_eq!(*v, 1.0);
                }
            }
        }
    }

    #[test]
    fn empty_foreground_flags() {
        let mask = Grid::filled(8, 8, 0u8);
        let w = moi1_weights(&mask, 1.0).unwrap();
        assert_eq!(w.fallback, Some(Fallback::EmptyForeground));
        assert!(w.map.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn collinear_falls_back_to_euclidean() {
        let mut mask = Grid::filled(10, 10, 0u8);
        for c in 2..8 {
            mask.set(4, c, 1);
        }
        let w2 = moi2_weights(&mask, 1.0).unwrap();
        assert_eq!(w2.fallback, Some(Fallback::SingularCovariance));
        assert_eq!(w2.map, moi1_weights(&mask, 1.0).unwrap().map);
    }

    #[test]
    fn mahalanobis_equalises_axis_ends() {
        // semi-axes 10 (rows) and 5 (cols)
        let mask = ellipse(31, 21, (15.0, 10.0), (10.0, 5.0));
        let w1 = moi1_weights(&mask, 1.0).unwrap().map;
        let w2 = moi2_weights(&mask, 1.0).unwrap().map;
        let ends = [(5, 10), (25, 10), (15, 5), (15, 15)];
        for &(r, c) in &ends {
            assert_eq!(mask.get(r, c), 1);
        }
        let e2: Vec<f32> = ends.iter().map(|&(r, c)| w2.get(r, c)).collect();
        let e1: Vec<f32> = ends.iter().map(|&(r, c)| w1.get(r, c)).collect();
        assert_eq!(e2[0], e2[1]);
        assert_eq!(e2[2], e2[3]);
        // rasterisation perturbs the covariance, so the two axes only nearly agree
        assert!((e2[0] - e2[2]).abs() < 0.05, "{e2:?}");
        assert!((e1[0] - e1[2]).abs() > 0.3, "{e1:?}");
    }

    #[test]
    fn power_transform_cases() {
        let wm = Grid::new(1, 3, vec![0.5f32, 1.0, 0.8]).unwrap();
        assert_eq!(power_transform(&wm, 1.0).unwrap(), wm);
        let sq = power_transform(&wm, 2.0).unwrap();
        assert_eq!(sq.data(), &[0.25, 1.0, 0.8f32.powf(2.0)]);
        assert!(power_transform(&wm, 0.0).is_err());
        assert!(power_transform(&wm, -1.5).is_err());
    }

    #[test]
    fn oval_stats_of_symmetric_disc() {
        let mask = ellipse(21, 21, (10.0, 10.0), (6.0, 6.0));
        let s = OvalStats::from_mask(&mask, 1.0).unwrap();
        assert_eq!(s.centroid, (10, 10));
        assert_eq!(s.mean, [10.0, 10.0]);
        assert_eq!(s.inv_cov[0][1], 0.0);
        assert_eq!(s.inv_cov[0][0], s.inv_cov[1][1]);
        assert!((s.max_euclid - 6.0).abs() < 1e-12);
    }

    #[test]
    fn model_names_parse() {
        assert_eq!("moi1".parse::<InaccuracyModel>().unwrap(), InaccuracyModel::Euclidean);
        assert_eq!("moi2".parse::<InaccuracyModel>().unwrap(), InaccuracyModel::Mahalanobis);
        assert!("none".parse::<InaccuracyModel>().is_err());
    }
}
