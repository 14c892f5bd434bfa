//! Direct 3x3 convolution (padding 1) with register tiling.
//!
//! The channel counts in this network are small, which leaves im2col + GEMM
//! with thin matrices and an extra full copy of the input. Here the input is
//! zero-padded once and each tile of `OB` output channels by `TILE` pixels
//! is accumulated in registers over all input channels and taps.

use super::tensor::Real;

const OB: usize = 4; // `correlate` unrolls exactly four accumulators

/// Pixels per register tile. Narrow deep layers would waste half of a wide one.
fn tile(w: usize) -> usize {
    if w <= 8 {
        8
    } else {
        16
    }
}

/// `[N, C]` planes of `(h + 2) x pw`, one pixel of zero border plus zero
/// slack on the right so fixed-width loads never leave the plane.
#[derive(Debug, Clone)]
pub(crate) struct Padded<T> {
    data: Vec<T>,
    c: usize,
    h: usize,
    w: usize,
    pw: usize,
}

impl<T: Real> Padded<T> {
    pub fn new(x: &[T], n: usize, c: usize, h: usize, w: usize) -> Self {
        let pw = w.div_ceil(tile(w)) * tile(w) + 2;
        let plane = (h + 2) * pw;
        let mut data = vec![T::ZERO; n * c * plane];
        for p in 0..n * c {
            for y in 0..h {
                data[p * plane + (y + 1) * pw + 1..][..w].copy_from_slice(&x[(p * h + y) * w..][..w]);
            }
        }
        Padded { data, c, h, w, pw }
    }

    fn plane(&self) -> usize {
        (self.h + 2) * self.pw
    }
}

/// Packs kernels as `[ceil(out/OB)][in][9][OB]`; `get(o, i, tap)` reads the
/// source kernel.
pub(crate) fn pack<T: Real>(out: usize, inp: usize, get: impl Fn(usize, usize, usize) -> T) -> Vec<T> {
    let blocks = out.div_ceil(OB);
    let mut p = vec![T::ZERO; blocks * inp * 9 * OB];
    for o in 0..out {
        let (ob, oo) = (o / OB, o % OB);
        for i in 0..inp {
            for t in 0..9 {
                p[((ob * inp + i) * 9 + t) * OB + oo] = get(o, i, t);
            }
        }
    }
    p
}

/// `out[b][o][y][x] = bias[o] + sum_{c, ky, kx} k[o][c][ky][kx] * x[b][c][y+ky-1][x+kx-1]`
// The four accumulators are separate locals on purpose: with a nested
// `[[T; TILE]; OB]` LLVM spills them to the stack and stays scalar.
pub(crate) fn correlate<T: Real>(xp: &Padded<T>, n: usize, packed: &[T], out_ch: usize, bias: Option<&[T]>) -> Vec<T> {
    if tile(xp.w) == 8 {
        correlate_tiled::<T, 8>(xp, n, packed, out_ch, bias)
    } else {
        correlate_tiled::<T, 16>(xp, n, packed, out_ch, bias)
    }
}

fn correlate_tiled<T: Real, const TILE: usize>(
    xp: &Padded<T>,
    n: usize,
    packed: &[T],
    out_ch: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let (c, h, w, pw) = (xp.c, xp.h, xp.w, xp.pw);
    let plane = xp.plane();
    let hw = h * w;
    let mut out = vec![T::ZERO; n * out_ch * hw];
    for b in 0..n {
        let img = &xp.data[b * c * plane..(b + 1) * c * plane];
        for ob in 0..out_ch.div_ceil(OB) {
            let wb = &packed[ob * c * 9 * OB..(ob + 1) * c * 9 * OB];
            for y in 0..h {
                for x0 in (0..w).step_by(TILE) {
                    let mut a0 = [T::ZERO; TILE];
                    let mut a1 = [T::ZERO; TILE];
                    let mut a2 = [T::ZERO; TILE];
                    let mut a3 = [T::ZERO; TILE];
                    for ci in 0..c {
                        let base = ci * plane + y * pw + x0;
                        for t in 0..9 {
                            let off = base + (t / 3) * pw + t % 3;
                            let xs: [T; TILE] = img[off..off + TILE].try_into().expect("tile");
                            let k = (ci * 9 + t) * OB;
                            let wk: [T; OB] = wb[k..k + OB].try_into().expect("block");
                            for j in 0..TILE {
                                a0[j] = wk[0].mul_add(xs[j], a0[j]);
                                a1[j] = wk[1].mul_add(xs[j], a1[j]);
                                a2[j] = wk[2].mul_add(xs[j], a2[j]);
                                a3[j] = wk[3].mul_add(xs[j], a3[j]);
                            }
                        }
                    }
                    let cnt = TILE.min(w - x0);
                    for (oo, a) in [a0, a1, a2, a3].iter().enumerate() {
                        let oc = ob * OB + oo;
                        if oc >= out_ch {
                            break;
                        }
                        let bv = bias.map_or(T::ZERO, |bb| bb[oc]);
                        let dst = &mut out[(b * out_ch + oc) * hw + y * w + x0..][..cnt];
                        for (d, &v) in dst.iter_mut().zip(a) {
                            *d = v + bv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Kernel and bias gradients: `dk[o][c][ky][kx] = sum dy[b][o][y][x] * x[b][c][y+ky-1][x+kx-1]`.
pub(crate) fn weight_grad<T: Real>(xp: &Padded<T>, dy: &[T], n: usize, out_ch: usize) -> (Vec<T>, Vec<T>) {
    let dk = if tile(xp.w) == 8 {
        weight_grad_tiled::<T, 8>(xp, dy, n, out_ch)
    } else {
        weight_grad_tiled::<T, 16>(xp, dy, n, out_ch)
    };
    let hw = xp.h * xp.w;
    let db = (0..out_ch)
        .map(|oc| (0..n).map(|b| dy[(b * out_ch + oc) * hw..][..hw].iter().copied().sum::<T>()).sum())
        .collect();
    (dk, db)
}

fn weight_grad_tiled<T: Real, const DW_TILE: usize>(xp: &Padded<T>, dy: &[T], n: usize, out_ch: usize) -> Vec<T> {
    let (c, h, w, pw) = (xp.c, xp.h, xp.w, xp.pw);
    let plane = xp.plane();
    // dy with rows widened to a whole number of tiles, zero slack
    let dpw = w.div_ceil(DW_TILE) * DW_TILE;
    let mut dyw = vec![T::ZERO; n * out_ch * h * dpw];
    for p in 0..n * out_ch {
        for y in 0..h {
            dyw[(p * h + y) * dpw..][..w].copy_from_slice(&dy[(p * h + y) * w..][..w]);
        }
    }
    // two output channels per pass so each input load feeds two FMAs
    let mut dk = vec![T::ZERO; out_ch * c * 9];
    for oc in (0..out_ch).step_by(2) {
        let oc1 = (oc + 1).min(out_ch - 1);
        for ci in 0..c {
            let mut acc0 = [[T::ZERO; DW_TILE]; 9];
            let mut acc1 = [[T::ZERO; DW_TILE]; 9];
            for b in 0..n {
                let xpl = &xp.data[(b * c + ci) * plane..(b * c + ci + 1) * plane];
                let d0 = &dyw[(b * out_ch + oc) * h * dpw..][..h * dpw];
                let d1 = &dyw[(b * out_ch + oc1) * h * dpw..][..h * dpw];
                for y in 0..h {
                    for x0 in (0..dpw).step_by(DW_TILE) {
                        let g0: [T; DW_TILE] = d0[y * dpw + x0..][..DW_TILE].try_into().expect("tile");
                        let g1: [T; DW_TILE] = d1[y * dpw + x0..][..DW_TILE].try_into().expect("tile");
                        for t in 0..9 {
                            let off = (y + t / 3) * pw + x0 + t % 3;
                            let xs: [T; DW_TILE] = xpl[off..off + DW_TILE].try_into().expect("tile");
                            for j in 0..DW_TILE {
                                acc0[t][j] = g0[j].mul_add(xs[j], acc0[t][j]);
                                acc1[t][j] = g1[j].mul_add(xs[j], acc1[t][j]);
                            }
                        }
                    }
                }
            }
            for t in 0..9 {
                dk[(oc * c + ci) * 9 + t] = acc0[t].iter().copied().sum();
                dk[(oc1 * c + ci) * 9 + t] = acc1[t].iter().copied().sum();
            }
        }
    }
    dk
}
