//! Brute-force reference versions of the scoring and weighting formulas,
//! written as plain per-pixel loops over row and column.
#![allow(dead_code)]

use wsseg::Mask;

fn fg(m: &Mask, r: usize, c: usize) -> bool {
    m.get(r, c) != 0
}

pub fn dsc(pred: &Mask, truth: &Mask) -> f64 {
    let (mut both, mut p, mut g) = (0u64, 0u64, 0u64);
    for r in 0..pred.height() {
        for c in 0..pred.width() {
            if fg(pred, r, c) && fg(truth, r, c) {
                both += 1;
            }
            if fg(pred, r, c) {
                p += 1;
            }
            if fg(truth, r, c) {
                g += 1;
            }
        }
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    }
}

/// `(background, foreground)` weights: `N1 / N0` and 1.
pub fn class_weights(labels: &[u8]) -> (f64, f64) {
    let mut n0 = 0u64;
    let mut n1 = 0u64;
    for &y in labels {
        if y == 0 {
            n0 += 1;
        } else {
            n1 += 1;
        }
    }
    if n0 == 0 || n1 == 0 {
        (1.0, 1.0)
    } else {
        (n1 as f64 / n0 as f64, 1.0)
    }
}

fn index_mean(m: &Mask) -> (f64, f64, f64) {
    let (mut n, mut sr, mut sc) = (0.0, 0.0, 0.0);
    for r in 0..m.height() {
        for c in 0..m.width() {
            if fg(m, r, c) {
                n += 1.0;
                sr += r as f64;
                sc += c as f64;
            }
        }
    }
    (n, sr / n, sc / n)
}

fn normalise(m: &Mask, dist: &dyn Fn(usize, usize) -> f64, epsilon: f64) -> Vec<f32> {
    let mut max = 0.0f64;
    for r in 0..m.height() {
        for c in 0..m.width() {
            if fg(m, r, c) && dist(r, c) > max {
                max = dist(r, c);
            }
        }
    }
    let mut out = Vec::new();
    for r in 0..m.height() {
        for c in 0..m.width() {
            out.push(if fg(m, r, c) { (1.0 - dist(r, c) / (max + epsilon)) as f32 } else { 1.0 });
        }
    }
    out
}

pub fn moi1(m: &Mask, epsilon: f64) -> Vec<f32> {
    let (_, mr, mc) = index_mean(m);
    let (i0, j0) = (mr.round(), mc.round());
    normalise(m, &|r, c| ((r as f64 - i0).powi(2) + (c as f64 - j0).powi(2)).sqrt(), epsilon)
}

pub fn moi2(m: &Mask, epsilon: f64) -> Vec<f32> {
    let (n, mr, mc) = index_mean(m);
    let mut cov = [[0.0f64; 2]; 2];
    for r in 0..m.height() {
        for c in 0..m.width() {
            if fg(m, r, c) {
                let d = [r as f64 - mr, c as f64 - mc];
                for i in 0..2 {
                    for j in 0..2 {
                        cov[i][j] += d[i] * d[j];
                    }
                }
            }
        }
    }
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= n - 1.0;
        }
    }
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let inv = [
        [cov[1][1] / det, -cov[0][1] / det],
        [-cov[1][0] / det, cov[0][0] / det],
    ];
    let dist = |r: usize, c: usize| {
        let d = [r as f64 - mr, c as f64 - mc];
        let mut q = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                q += d[i] * inv[i][j] * d[j];
            }
        }
        q.max(0.0).sqrt()
    };
    normalise(m, &dist, epsilon)
}
