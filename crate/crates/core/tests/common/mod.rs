//! Random masks shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use wsseg::synthdata::rng_from_seed;
use wsseg::{Grid, Mask};

/// A filled ellipse centred on a pixel, so its foreground is point
/// symmetric about `center` and the index mean equals it exactly.
pub struct Oval {
    pub center: (usize, usize),
    pub semi_axes: (f64, f64),
    pub angle: f64,
    pub mask: Mask,
}

pub fn ellipse(size: usize, center: (usize, usize), semi_axes: (f64, f64), angle: f64) -> Mask {
    let (a, b) = semi_axes;
    let (s, c) = angle.sin_cos();
    Grid::from_fn(size, size, |r, col| {
        let dr = r as f64 - center.0 as f64;
        let dc = col as f64 - center.1 as f64;
        let u = (dr * c + dc * s) / a;
        let v = (-dr * s + dc * c) / b;
        (u * u + v * v <= 1.0) as u8
    })
}

pub fn random_oval(seed: u64, size: usize) -> Oval {
    let mut rng = rng_from_seed(seed);
    let reach = size as f64 / 2.0 - 3.0;
    let a = rng.random_range(2.0..reach);
    let b = rng.random_range(1.5..a.max(2.0));
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let jitter = 2;
    let center = (
        size / 2 + rng.random_range(0..=jitter) - jitter / 2,
        size / 2 + rng.random_range(0..=jitter) - jitter / 2,
    );
    Oval {
        center,
        semi_axes: (a, b),
        angle,
        mask: ellipse(size, center, (a, b), angle),
    }
}

pub fn random_disc(seed: u64, size: usize) -> Oval {
    let mut rng = rng_from_seed(seed);
    let r = rng.random_range(2.0..size as f64 / 2.0 - 2.0);
    let center = (size / 2, size / 2);
    Oval {
        center,
        semi_axes: (r, r),
        angle: 0.0,
        mask: ellipse(size, center, (r, r), 0.0),
    }
}

/// Independent Bernoulli pixels with a random density.
pub fn random_mask(seed: u64, size: usize) -> Mask {
    let mut rng = rng_from_seed(seed);
    let density = rng.random_range(0.05..0.6);
    Grid::from_fn(size, size, |_, _| rng.random_bool(density) as u8)
}

/// Checks both models' maps on a point-symmetric oval: values in (0, 1],
/// ones on background and at the centre, Euclidean weights monotone in
/// distance, Mahalanobis weights constant across mirror-image pixels and
/// monotone in Mahalanobis distance. Returns the pixels compared.
pub fn check_oval_maps(o: &Oval) -> Result<usize, String> {
    use wsseg::weakmodels::{moi1_weights, moi2_weights};
    let m = &o.mask;
    let w1 = moi1_weights(m, 1.0).map_err(|e| e.to_string())?;
    let w2 = moi2_weights(m, 1.0).map_err(|e| e.to_string())?;
    if w2.fallback.is_some() {
        return Err("mahalanobis fell back on an oval".into());
    }
    let (h, w) = m.dims();
    let (cr, cc) = o.center;
    for (name, map) in [("moi1", &w1.map), ("moi2", &w2.map)] {
        for r in 0..h {
            for c in 0..w {
                let v = map.get(r, c);
                if !(v > 0.0 && v <= 1.0) {
                    return Err(format!("{name} ({r},{c}) = {v} outside (0,1]"));
                }
                if m.get(r, c) == 0 && v != 1.0 {
                    return Err(format!("{name} background ({r},{c}) = {v}"));
                }
            }
        }
        if map.get(cr, cc) != 1.0 {
            return Err(format!("{name} centre = {}", map.get(cr, cc)));
        }
    }
    let fg = m.foreground();
    let q = mahalanobis_sq(&fg);
    let d2 = |&(r, c): &(usize, usize)| (r as i64 - cr as i64).pow(2) + (c as i64 - cc as i64).pow(2);
    let mut pairs = 0;
    for (i, a) in fg.iter().enumerate() {
        for (j, b) in fg.iter().enumerate() {
            let (p1a, p1b) = (w1.map.get(a.0, a.1), w1.map.get(b.0, b.1));
            if d2(a) < d2(b) && p1a < p1b || d2(a) == d2(b) && p1a != p1b {
                return Err(format!("moi1 not monotone at {a:?} vs {b:?}"));
            }
            let (p2a, p2b) = (w2.map.get(a.0, a.1), w2.map.get(b.0, b.1));
            if q[j] - q[i] > 1e-9 * q[j] && p2a < p2b {
                return Err(format!("moi2 not monotone at {a:?} vs {b:?}"));
            }
            pairs += 1;
        }
        // mirror image through the centre has the same Mahalanobis distance
        let mirror = (2 * cr - a.0, 2 * cc - a.1);
        if w2.map.get(a.0, a.1) != w2.map.get(mirror.0, mirror.1) {
            return Err(format!("moi2 differs between {a:?} and {mirror:?}"));
        }
    }
    Ok(pairs)
}

/// Squared Mahalanobis distance of each pixel under the pixels' own
/// sample covariance.
fn mahalanobis_sq(px: &[(usize, usize)]) -> Vec<f64> {
    let n = px.len() as f64;
    let mr = px.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let mc = px.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let (mut a, mut b, mut d) = (0.0, 0.0, 0.0);
    for &(r, c) in px {
        let (x, y) = (r as f64 - mr, c as f64 - mc);
        a += x * x;
        b += x * y;
        d += y * y;
    }
    let det = a * d - b * b;
    px.iter()
        .map(|&(r, c)| {
            let (x, y) = (r as f64 - mr, c as f64 - mc);
            (d * x * x - 2.0 * b * x * y + a * y * y) * (n - 1.0) / det
        })
        .collect()
}

/// Counts pixel pairs ranked in opposite directions by the two models.
pub fn discordant_pairs(mask: &Mask) -> usize {
    use wsseg::weakmodels::{moi1_weights, moi2_weights};
    let a = moi1_weights(mask, 1.0).unwrap().map;
    let b = moi2_weights(mask, 1.0).unwrap().map;
    let fg = mask.foreground();
    let mut bad = 0;
    for x in &fg {
        for y in &fg {
            let (a1, a2) = (a.get(x.0, x.1), a.get(y.0, y.1));
            let (b1, b2) = (b.get(x.0, x.1), b.get(y.0, y.1));
            if a1 < a2 && b1 > b2 || a1 > a2 && b1 < b2 {
                bad += 1;
            }
        }
    }
    bad
}

/// Accurately labelled phantoms with all-ones confidence maps.
pub fn toy_samples(n: usize, size: usize, seed: u64) -> Vec<wsseg::synthdata::SampleRecord> {
    wsseg::synthdata::generate_phantoms(n, size, seed)
        .unwrap()
        .into_iter()
        .map(|p| wsseg::synthdata::SampleRecord::accurate(p.image, p.truth).unwrap())
        .collect()
}

/// A network small enough for multi-run tests.
pub fn toy_net() -> wsseg::network::NetConfig {
    wsseg::network::NetConfig {
        init_channels: 4,
        depth: 2,
        pyramid_scales: vec![1, 2],
        ..Default::default()
    }
}
