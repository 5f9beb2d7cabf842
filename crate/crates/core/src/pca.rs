//! Top principal components of token features by power iteration, and
//! their rendering as RGB maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ITERATIONS: usize = 100;
pub const TOLERANCE: f64 = 1e-9;
/// Projections with less variance than this render mid-gray.
pub const MIN_VARIANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm components, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Variance captured by each component.
    pub variances: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Covariance of the rows of an `n × c` matrix.
fn covariance(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c) = x.dims2()?;
    let d = x.data();
    let mut mean = vec![0.0; c];
    for row in d.chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; c * c];
    for row in d.chunks_exact(c) {
        for i in 0..c {
            let a = row[i] - mean[i];
            for j in i..c {
                cov[i * c + j] += a * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            let v = cov[i * c + j] / n as f64;
            cov[i * c + j] = v;
            cov[j * c + i] = v;
        }
    }
    Ok((mean, cov))
}

/// Top-`k` components of the rows of `x` (`n × c`) by power iteration with
/// deflation. Each iterate is re-orthogonalized against the components
/// already found.
pub fn principal_components(x: &Tensor, k: usize) -> Result<Pca> {
    let (_, c) = x.dims2()?;
    if k == 0 || k > c {
        return Err(Error::Range {
            name: "component count",
            detail: format!("{k} with {c} features"),
        });
    }
    let (mean, mut cov) = covariance(x)?;
    // iterates shorter than this are rounding noise from a zero spectrum
    let floor = 1e-13 * (0..c).map(|i| cov[i * c + i]).sum::<f64>();
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for idx in 0..k {
        // deterministic start that is not orthogonal to typical data
        let mut v: Vec<f64> = (0..c).map(|i| 1.0 + 0.1 * ((i + idx) % 7) as f64).collect();
        orthogonalize(&mut v, &components);
        if normalize(&mut v) == 0.0 {
            v = unit_outside(&components, c);
        }
        for _ in 0..ITERATIONS {
            let mut w = matvec(&cov, &v);
            orthogonalize(&mut w, &components);
            orthogonalize(&mut w, &components);
            if normalize(&mut w) <= floor {
                // the remaining spectrum is zero; any orthogonal unit vector
                // is an eigenvector
                w = unit_outside(&components, c);
            }
            if dot(&w, &v) < 0.0 {
                w.iter_mut().for_each(|x| *x = -*x);
            }
            let change = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = w;
            if change < TOLERANCE {
                break;
            }
        }
        let lambda = dot(&v, &matvec(&cov, &v)).max(0.0);
        for i in 0..c {
            for j in 0..c {
                cov[i * c + j] -= lambda * v[i] * v[j];
            }
        }
        variances.push(lambda);
        components.push(v);
    }
    Ok(Pca {
        mean,
        components,
        variances,
    })
}

fn matvec(m: &[f64], v: &[f64]) -> Vec<f64> {
    m.chunks_exact(v.len()).map(|row| dot(row, v)).collect()
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}

/// First standard basis vector with a nonzero remainder after projecting
/// out `basis`.
fn unit_outside(basis: &[Vec<f64>], c: usize) -> Vec<f64> {
    let mut best = vec![0.0; c];
    let mut best_norm = 0.0;
    for i in 0..c {
        let mut e = vec![0.0; c];
        e[i] = 1.0;
        orthogonalize(&mut e, basis);
        let n = dot(&e, &e).sqrt();
        if n > best_norm + 1e-6 {
            best_norm = n;
            best = e;
        }
    }
    normalize(&mut best);
    best
}

/// Projects an `n × c` token map (n = grid²) onto its top three components
/// and min-max scales each to `[0, 1]`. A projection whose variance is
/// below [`MIN_VARIANCE`] renders mid-gray. Returns `3 × grid × grid`.
pub fn render(tokens: &Tensor, grid: usize) -> Result<Tensor> {
    let (n, c) = tokens.dims2()?;
    if n != grid * grid {
        return Err(Error::shape("pca render", tokens.shape(), &[grid * grid, c]));
    }
    let k = c.min(3);
    let pca = principal_components(tokens, k)?;
    let d = tokens.data();
    let mut out = vec![0.5; 3 * n];
    for (ch, comp) in pca.components.iter().enumerate() {
        let proj: Vec<f64> = d
            .chunks_exact(c)
            .map(|row| row.iter().zip(&pca.mean).zip(comp).map(|((x, m), v)| (x - m) * v).sum())
            .collect();
        let mean = proj.iter().sum::<f64>() / n as f64;
        let var = proj.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n as f64;
        if var < MIN_VARIANCE {
            continue;
        }
        let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (p, v) in proj.iter().enumerate() {
            out[ch * n + p] = (v - lo) / (hi - lo);
        }
    }
    Tensor::new(&[3, grid, grid], out)
}

/// Nearest-neighbor enlargement of a `c × H × W` image by `factor`.
pub fn enlarge(img: &Tensor, factor: usize) -> Result<Tensor> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::Invalid(format!("expected a c x H x W image, got {:?}", img.shape())));
    };
    if factor == 0 {
        return Err(Error::Range {
            name: "scale factor",
            detail: "0".into(),
        });
    }
    let (hh, ww) = (h * factor, w * factor);
    let d = img.data();
    let mut out = vec![0.0; c * hh * ww];
    for ch in 0..c {
        for y in 0..hh {
            for x in 0..ww {
                out[(ch * hh + y) * ww + x] = d[(ch * h + y / factor) * w + x / factor];
            }
        }
    }
    Tensor::new(&[c, hh, ww], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_dominant_axis() {
        // points spread along (1, 1, 0) with a little spread along z
        let mut data = Vec::new();
        for i in 0..20 {
            let t = i as f64 - 9.5;
            data.extend_from_slice(&[t, t, 0.01 * (i % 3) as f64]);
        }
        let pca = principal_components(&Tensor::new(&[20, 3], data).unwrap(), 2).unwrap();
        let v = &pca.components[0];
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((v[0].abs() - s).abs() < 1e-9 && (v[1].abs() - s).abs() < 1e-9, "{v:?}");
        assert!(pca.variances[0] > 1000.0 * pca.variances[1]);
    }

    #[test]
    fn constant_map_is_mid_gray() {
        let img = render(&Tensor::full(&[16, 5], 3.0), 4).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rank_one_map_uses_one_channel() {
        let data: Vec<f64> = (0..16).flat_map(|i| [i as f64, 2.0 * i as f64]).collect();
        let img = render(&Tensor::new(&[16, 2], data).unwrap(), 4).unwrap();
        let d = img.data();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[15], 1.0);
        assert!(d[16..32].iter().all(|&v| v == 0.5));
        assert!(d[32..].iter().all(|&v| v == 0.5));
    }

    #[test]
    fn enlarge_repeats_pixels() {
        let img = Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(enlarge(&img, 2).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    }
}
