//! Centered 2-D DFT and the square low/high frequency split applied to
//! channel-first feature grids.
//!
//! Grids are `c × H × W` row-major. A [`Spectrum`] stores the transform with
//! the zero-frequency bin moved to `(⌊H/2⌋, ⌊W/2⌋)`. The low-pass mask keeps
//! every bin whose Chebyshev distance from that center is at most `ρ·H/2`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::linalg::{gemm, View};
use crate::tensor::Tensor;

/// Largest imaginary residue tolerated when a masked spectrum is brought
/// back to the real domain, relative to `max(1, max |x|)`.
pub const IMAG_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Spectrum {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Spectrum {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        let n = channels * height * width;
        Spectrum {
            channels,
            height,
            width,
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    /// Squared magnitude of bin `(c, u, v)` in centered coordinates.
    pub fn power(&self, c: usize, u: usize, v: usize) -> f64 {
        let i = (c * self.height + u) * self.width + v;
        self.re[i] * self.re[i] + self.im[i] * self.im[i]
    }

    pub fn total_power(&self) -> f64 {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r * r + i * i)
            .sum()
    }

    /// Zeroes every bin where `keep(u, v)` is false.
    pub fn masked(&self, mask: &FreqMask, keep_low: bool) -> Result<Spectrum> {
        if mask.height != self.height || mask.width != self.width {
            return Err(Error::shape(
                "mask",
                &[mask.height, mask.width],
                &[self.height, self.width],
            ));
        }
        let mut out = self.clone();
        let plane = self.height * self.width;
        for c in 0..self.channels {
            for (b, &inside) in mask.bins.iter().enumerate() {
                if inside != keep_low {
                    out.re[c * plane + b] = 0.0;
                    out.im[c * plane + b] = 0.0;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FreqMask {
    pub height: usize,
    pub width: usize,
    pub rho: f64,
    bins: Vec<bool>,
}

impl FreqMask {
    pub fn get(&self, u: usize, v: usize) -> bool {
        self.bins[u * self.width + v]
    }

    pub fn count(&self) -> usize {
        self.bins.iter().filter(|&&b| b).count()
    }

    pub fn bins(&self) -> &[bool] {
        &self.bins
    }
}

pub fn freq_mask(height: usize, width: usize, rho: f64) -> Result<FreqMask> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Range {
            name: "cutoff",
            detail: format!("rho = {rho} is outside [0, 1]"),
        });
    }
    require_square(height, width)?;
    let threshold = rho * height as f64 / 2.0;
    let (cu, cv) = ((height / 2) as f64, (width / 2) as f64);
    let mut bins = Vec::with_capacity(height * width);
    for u in 0..height {
        for v in 0..width {
            let d = (u as f64 - cu).abs().max((v as f64 - cv).abs());
            bins.push(d <= threshold);
        }
    }
    Ok(FreqMask {
        height,
        width,
        rho,
        bins,
    })
}

fn require_square(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Invalid("empty frequency grid".into()));
    }
    if height != width {
        return Err(Error::Invalid(format!(
            "frequency split needs a square grid, got {height}x{width}"
        )));
    }
    Ok(())
}

fn grid_dims(grid: &Tensor) -> Result<(usize, usize, usize)> {
    match *grid.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Invalid(format!("expected a c x H x W grid, got {s:?}"))),
    }
}

/// In-place 1-D DFT of `len` complex values laid out with `stride`.
/// `sign` is -1 for the forward transform and +1 for the inverse.
fn dft_lines(
    re: &mut [f64],
    im: &mut [f64],
    len: usize,
    stride: usize,
    starts: impl Iterator<Item = usize>,
    sign: f64,
) {
    let (cos, sin): (Vec<f64>, Vec<f64>) = (0..len)
        .map(|j| {
            let a = 2.0 * PI * j as f64 / len as f64;
            (a.cos(), sign * a.sin())
        })
        .unzip();
    let mut buf_re = vec![0.0; len];
    let mut buf_im = vec![0.0; len];
    for start in starts {
        for k in 0..len {
            let (mut sr, mut si) = (0.0, 0.0);
            for t in 0..len {
                let tw = (k * t) % len;
                let (xr, xi) = (re[start + t * stride], im[start + t * stride]);
                sr += xr * cos[tw] - xi * sin[tw];
                si += xr * sin[tw] + xi * cos[tw];
            }
            buf_re[k] = sr;
            buf_im[k] = si;
        }
        for k in 0..len {
            re[start + k * stride] = buf_re[k];
            im[start + k * stride] = buf_im[k];
        }
    }
}

fn transform_planes(re: &mut [f64], im: &mut [f64], c: usize, h: usize, w: usize, sign: f64) {
    let plane = h * w;
    // rows, then columns
    dft_lines(re, im, w, 1, (0..c * h).map(|r| r * w), sign);
    dft_lines(
        re,
        im,
        h,
        w,
        (0..c).flat_map(|ch| (0..w).map(move |col| ch * plane + col)),
        sign,
    );
}

/// Moves bin `k` to `(k + ⌊N/2⌋) mod N` on both axes (or back when `inverse`).
fn shift(src: &[f64], c: usize, h: usize, w: usize, inverse: bool) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    let (sh, sw) = (h / 2, w / 2);
    for ch in 0..c {
        for k1 in 0..h {
            for k2 in 0..w {
                let u = (k1 + sh) % h;
                let v = (k2 + sw) % w;
                let natural = (ch * h + k1) * w + k2;
                let centered = (ch * h + u) * w + v;
                if inverse {
                    out[natural] = src[centered];
                } else {
                    out[centered] = src[natural];
                }
            }
        }
    }
    out
}

pub fn dft2d(grid: &Tensor) -> Result<Spectrum> {
    let (c, h, w) = grid_dims(grid)?;
    let mut re = grid.data().to_vec();
    let mut im = vec![0.0; re.len()];
    transform_planes(&mut re, &mut im, c, h, w, -1.0);
    Ok(Spectrum {
        channels: c,
        height: h,
        width: w,
        re: shift(&re, c, h, w, false),
        im: shift(&im, c, h, w, false),
    })
}

/// Inverse of [`dft2d`], returning the real part after checking that the
/// imaginary residue is negligible.
pub fn idft2d(spectrum: &Spectrum) -> Result<Tensor> {
    let (c, h, w) = (spectrum.channels, spectrum.height, spectrum.width);
    let mut re = shift(&spectrum.re, c, h, w, true);
    let mut im = shift(&spectrum.im, c, h, w, true);
    transform_planes(&mut re, &mut im, c, h, w, 1.0);
    let norm = 1.0 / (h * w) as f64;
    let mut scale = 1.0f64;
    let mut residue = 0.0f64;
    for (r, i) in re.iter_mut().zip(&im) {
        *r *= norm;
        scale = scale.max(r.abs());
        residue = residue.max((i * norm).abs());
    }
    if residue > IMAG_TOLERANCE * scale {
        return Err(Error::ImaginaryResidue(residue));
    }
    Tensor::new(&[c, h, w], re)
}

/// `(low, high)` with `low = IFT(M ⊙ FT(x))` and `high = IFT((1 - M) ⊙ FT(x))`.
pub fn split_frequency(grid: &Tensor, rho: f64) -> Result<(Tensor, Tensor)> {
    let (_, h, w) = grid_dims(grid)?;
    let mask = freq_mask(h, w, rho)?;
    let spectrum = dft2d(grid)?;
    let low = idft2d(&spectrum.masked(&mask, true)?)?;
    let high = idft2d(&spectrum.masked(&mask, false)?)?;
    Ok((low, high))
}

/// Energy of `grid` that falls outside the low-pass mask, and the total.
pub fn high_frequency_energy(grid: &Tensor, rho: f64) -> Result<(f64, f64)> {
    let (_, h, w) = grid_dims(grid)?;
    let mask = freq_mask(h, w, rho)?;
    let spectrum = dft2d(grid)?;
    let total = spectrum.total_power();
    let high = spectrum.masked(&mask, false)?.total_power();
    Ok((high, total))
}

/// Frequency split over token matrices: `batch` images of `h·w` tokens with
/// `c` channels each, laid out as `(batch·h·w) × c` rows.
///
/// The masked transform is a fixed real linear map on the token grid, so it
/// is built once from [`split_frequency`] applied to each unit grid and then
/// applied to every image and channel as one matrix product.
#[derive(Clone, Debug)]
pub struct TokenSplitter {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    rho: f64,
    /// `n × n` low-pass operator, `n = h·w`.
    low: Arc<Vec<f64>>,
}

type OperatorKey = (usize, usize, u64);

/// Low-pass operators already built, shared by every splitter of the same
/// grid and cutoff.
static OPERATORS: OnceLock<Mutex<HashMap<OperatorKey, Arc<Vec<f64>>>>> = OnceLock::new();

fn low_operator(height: usize, width: usize, rho: f64) -> Result<Arc<Vec<f64>>> {
    let key = (height, width, rho.to_bits());
    let cache = OPERATORS.get_or_init(Default::default);
    if let Some(op) = cache.lock().expect("operator cache").get(&key) {
        return Ok(op.clone());
    }
    let n = height * width;
    let mut low = vec![0.0; n * n];
    for t in 0..n {
        let mut e = Tensor::zeros(&[1, height, width]);
        e.data_mut()[t] = 1.0;
        let (column, _) = split_frequency(&e, rho)?;
        for (r, v) in column.data().iter().enumerate() {
            low[r * n + t] = *v;
        }
    }
    let op = Arc::new(low);
    cache.lock().expect("operator cache").insert(key, op.clone());
    Ok(op)
}

impl TokenSplitter {
    pub fn new(batch: usize, height: usize, width: usize, channels: usize, rho: f64) -> Result<Self> {
        freq_mask(height, width, rho)?;
        Ok(TokenSplitter {
            batch,
            height,
            width,
            channels,
            rho,
            low: low_operator(height, width, rho)?,
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn len(&self) -> usize {
        self.batch * self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Returns the low- or high-pass component of `tokens`.
    pub fn project(&self, tokens: &[f64], keep_low: bool) -> Result<Vec<f64>> {
        let (n, c) = (self.height * self.width, self.channels);
        if tokens.len() != self.len() {
            return Err(Error::shape("frequency split", &[tokens.len()], &[self.len()]));
        }
        let mut out = if keep_low { vec![0.0; tokens.len()] } else { tokens.to_vec() };
        let alpha = if keep_low { 1.0 } else { -1.0 };
        let op = View::dense(&self.low, n, n);
        for b in 0..self.batch {
            let block = View {
                data: tokens,
                offset: b * n * c,
                rows: n,
                cols: c,
                row_stride: c,
                col_stride: 1,
            };
            gemm(alpha, op, block, 1.0, &mut out, b * n * c, c, 1);
        }
        Ok(out)
    }
}
