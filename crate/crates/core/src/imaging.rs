//! Image, mask and weight-map grids plus the portable file formats they are
//! exchanged in.
//!
//! Masks travel as binary PGM (`P5`, maxval 255, `0 -> 0`, `255 -> 1`).
//! Images and weight maps travel as grayscale PFM (`Pf`, scale `-1.0`, so
//! little-endian). PFM stores scanlines bottom-to-top; [`read_pfm`] and
//! [`write_pfm`] flip rows so the in-memory grid is always top-to-bottom.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major `height x width` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Scan intensities, normally in `[0, 1]` after [`minmax_normalize`].
pub type Image = Grid<f32>;
/// Per-pixel labels: 1 for lesion, 0 for background.
pub type Mask = Grid<u8>;
/// Per-pixel label confidence in `(0, 1]`.
pub type WeightMap = Grid<f32>;

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} grid needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Grid {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Grid {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, row: usize) -> &[T] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    pub fn same_dims<U>(&self, other: &Grid<U>) -> bool {
        self.height == other.height && self.width == other.width
    }
}

impl Grid<u8> {
    /// Number of foreground (label 1) pixels.
    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Coordinates of every foreground pixel in row-major order.
    pub fn foreground(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) != 0 {
                    out.push((r, c));
                }
            }
        }
        out
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }
}

pub(crate) fn check_dims<A, B>(a: &Grid<A>, b: &Grid<B>, what: &str) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::Shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Rescales intensities to `[0, 1]` with `(v - min) / (max - min)`.
///
/// A constant image maps to all zeros.
pub fn minmax_normalize(img: &Image) -> Result<Image> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for (i, &v) in img.data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite value {v} at pixel ({}, {})",
                i / img.width,
                i % img.width
            )));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi == lo {
        return Ok(Grid::filled(img.height, img.width, 0.0));
    }
    let span = hi - lo;
    Ok(img.map(|v| (v - lo) / span))
}

/// Centered `out_h x out_w` window. When the margin is odd the extra
/// row/column is dropped from the bottom/right.
pub fn center_crop<T: Copy>(img: &Grid<T>, out_h: usize, out_w: usize) -> Result<Grid<T>> {
    if out_h == 0 || out_w == 0 || out_h > img.height || out_w > img.width {
        return Err(Error::InvalidArgument(format!(
            "cannot crop {}x{} to {out_h}x{out_w}",
            img.height, img.width
        )));
    }
    let top = (img.height - out_h) / 2;
    let left = (img.width - out_w) / 2;
    crop(img, top, left, out_h, out_w)
}

pub(crate) fn crop<T: Copy>(
    img: &Grid<T>,
    top: usize,
    left: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Grid<T>> {
    if top + out_h > img.height || left + out_w > img.width {
        return Err(Error::InvalidArgument(format!(
            "window {out_h}x{out_w} at ({top}, {left}) exceeds {}x{}",
            img.height, img.width
        )));
    }
    Ok(Grid::from_fn(out_h, out_w, |r, c| img.get(top + r, left + c)))
}

/// Corner-aligned source coordinate: output index 0 maps to input 0 and the
/// last output index maps to the last input index.
#[inline]
fn aligned_source(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out <= 1 {
        0.0
    } else {
        (i * (n_in - 1)) as f64 / (n_out - 1) as f64
    }
}

fn check_out_dims(out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "output size must be positive, got {out_h}x{out_w}"
        )));
    }
    Ok(())
}

/// Bilinear resize with corner-aligned sampling.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    check_out_dims(out_h, out_w)?;
    let (h, w) = img.dims();
    Ok(Grid::from_fn(out_h, out_w, |r, c| {
        let sr = aligned_source(r, h, out_h);
        let sc = aligned_source(c, w, out_w);
        bilinear_at(img, sr, sc)
    }))
}

/// Nearest-neighbour resize with the same corner-aligned geometry as
/// [`resize_bilinear`]; used for masks and weight maps.
pub fn resize_nearest<T: Copy>(img: &Grid<T>, out_h: usize, out_w: usize) -> Result<Grid<T>> {
    check_out_dims(out_h, out_w)?;
    let (h, w) = img.dims();
    Ok(Grid::from_fn(out_h, out_w, |r, c| {
        let sr = aligned_source(r, h, out_h).round() as usize;
        let sc = aligned_source(c, w, out_w).round() as usize;
        img.get(sr.min(h - 1), sc.min(w - 1))
    }))
}

/// Bilinear sample at an in-bounds real coordinate.
#[inline]
fn bilinear_at(img: &Image, r: f64, c: f64) -> f32 {
    let (h, w) = img.dims();
    let r0 = (r.floor() as usize).min(h - 1);
    let c0 = (c.floor() as usize).min(w - 1);
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let tr = (r - r0 as f64) as f32;
    let tc = (c - c0 as f64) as f32;
    let top = lerp(img.get(r0, c0), img.get(r0, c1), tc);
    let bottom = lerp(img.get(r1, c0), img.get(r1, c1), tc);
    lerp(top, bottom, tr)
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Bilinear sample at an arbitrary coordinate; `fill` outside the grid.
pub fn sample_bilinear(img: &Image, r: f64, c: f64, fill: f32) -> f32 {
    let (h, w) = img.dims();
    if !(r >= 0.0 && c >= 0.0 && r <= (h - 1) as f64 && c <= (w - 1) as f64) {
        return fill;
    }
    bilinear_at(img, r, c)
}

/// Nearest sample at an arbitrary coordinate; `fill` outside the grid.
pub fn sample_nearest<T: Copy>(img: &Grid<T>, r: f64, c: f64, fill: T) -> T {
    let (h, w) = img.dims();
    let rr = r.round();
    let cc = c.round();
    if !(rr >= 0.0 && cc >= 0.0 && rr <= (h - 1) as f64 && cc <= (w - 1) as f64) {
        return fill;
    }
    img.get(rr as usize, cc as usize)
}

pub fn flip_horizontal<T: Copy>(img: &Grid<T>) -> Grid<T> {
    let w = img.width;
    Grid::from_fn(img.height, w, |r, c| img.get(r, w - 1 - c))
}

/// Separable Gaussian blur with a kernel truncated at `3 sigma`; edges are
/// handled by clamping coordinates.
pub fn gaussian_blur(values: &Grid<f64>, sigma: f64) -> Grid<f64> {
    if sigma <= 0.0 {
        return values.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = values.dims();
    let r = radius as usize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    // rows with clamped borders, then both passes as slice sweeps
    let mut horizontal = vec![0.0; h * w];
    let mut padded = vec![0.0; w + 2 * r];
    for row in 0..h {
        for (i, p) in padded.iter_mut().enumerate() {
            *p = values.get(row, clamp(i as isize - radius, w));
        }
        let out = &mut horizontal[row * w..(row + 1) * w];
        for (k, &wt) in kernel.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(&padded[k..k + w]) {
                *o += wt * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for row in 0..h {
        let dst = &mut out[row * w..(row + 1) * w];
        for (k, &wt) in kernel.iter().enumerate() {
            let src = clamp(row as isize + k as isize - radius, h);
            for (o, &v) in dst.iter_mut().zip(&horizontal[src * w..(src + 1) * w]) {
                *o += wt * v;
            }
        }
    }
    Grid {
        height: h,
        width: w,
        data: out,
    }
}

// ---------------------------------------------------------------------------
// File formats

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> HeaderReader<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(self.path, start as u64, format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::format(self.path, start as u64, format!("non-ASCII {what}")))
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let offset = self.pos;
        let tok = self.token(what)?;
        match tok.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(Error::format(
                self.path,
                offset as u64,
                format!("invalid {what} {tok:?}"),
            )),
        }
    }

    /// Consumes the single whitespace byte that terminates a header.
    fn end_of_header(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(Error::format(
                self.path,
                self.pos as u64,
                "header not terminated by whitespace",
            )),
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a binary PGM holding a mask.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Mask> {
    let mut hdr = HeaderReader {
        bytes,
        pos: 0,
        path,
    };
    let magic = hdr.token("magic")?;
    if magic != "P5" {
        return Err(Error::format(path, 0, format!("expected P5 magic, got {magic:?}")));
    }
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    hdr.skip_space_and_comments();
    let maxval_offset = hdr.pos;
    let maxval = hdr.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(
            path,
            maxval_offset as u64,
            format!("unsupported maxval {maxval}, only 255 is accepted"),
        ));
    }
    let start = hdr.end_of_header()?;
    let needed = width * height;
    let payload = &bytes[start..];
    if payload.len() < needed {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated payload: expected {needed} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > needed {
        return Err(Error::format(
            path,
            (start + needed) as u64,
            "trailing bytes after payload",
        ));
    }
    let mut data = Vec::with_capacity(needed);
    for (i, &b) in payload.iter().enumerate() {
        match b {
            0 => data.push(0),
            255 => data.push(1),
            other => {
                return Err(Error::format(
                    path,
                    (start + i) as u64,
                    format!("mask pixel value {other} is neither 0 nor 255"),
                ))
            }
        }
    }
    Grid::new(height, width, data)
}

pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|&v| if v != 0 { 255u8 } else { 0 }));
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    decode_pgm(&read_bytes(path)?, path)
}

pub fn write_pgm(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    if !mask.is_binary() {
        return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
    }
    write_bytes(path.as_ref(), &encode_pgm(mask))
}

/// Parses a grayscale little-endian PFM.
pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Grid<f32>> {
    let mut hdr = HeaderReader {
        bytes,
        pos: 0,
        path,
    };
    let magic = hdr.token("magic")?;
    if magic != "Pf" {
        return Err(Error::format(path, 0, format!("expected Pf magic, got {magic:?}")));
    }
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    hdr.skip_space_and_comments();
    let scale_offset = hdr.pos;
    let scale_tok = hdr.token("scale")?;
    let scale: f64 = scale_tok.parse().map_err(|_| {
        Error::format(path, scale_offset as u64, format!("invalid scale {scale_tok:?}"))
    })?;
    if !(scale < 0.0) {
        return Err(Error::format(
            path,
            scale_offset as u64,
            "only little-endian (negative scale) PFM is supported",
        ));
    }
    let start = hdr.end_of_header()?;
    let needed = width * height * 4;
    let payload = &bytes[start..];
    if payload.len() < needed {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated payload: expected {needed} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > needed {
        return Err(Error::format(
            path,
            (start + needed) as u64,
            "trailing bytes after payload",
        ));
    }
    let mut data = vec![0f32; width * height];
    // bottom-to-top scanlines on disk
    for (file_row, chunk) in payload.chunks_exact(width * 4).enumerate() {
        let row = height - 1 - file_row;
        for (c, px) in chunk.chunks_exact(4).enumerate() {
            data[row * width + c] = f32::from_le_bytes([px[0], px[1], px[2], px[3]]);
        }
    }
    Grid::new(height, width, data)
}

pub fn encode_pfm(grid: &Grid<f32>) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", grid.width, grid.height).into_bytes();
    out.reserve(grid.len() * 4);
    for r in (0..grid.height).rev() {
        for &v in grid.row(r) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Grid<f32>> {
    let path = path.as_ref();
    decode_pfm(&read_bytes(path)?, path)
}

pub fn write_pfm(path: impl AsRef<Path>, grid: &Grid<f32>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pfm(grid))
}
