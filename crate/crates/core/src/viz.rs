//! PCA projection of self-attention features to RGB for eyeballing instance separability.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor_io::Features;

const POWER_ITERS: usize = 200;
const POWER_TOL: f64 = 1e-7;
const START_SEED: u64 = 0x5eed_0f_9ca;

#[derive(Debug, Clone)]
pub struct PcaProjection {
    /// Three unit rows of length D; zero rows past the feature rank.
    pub components: [Vec<f32>; 3],
    pub explained_variance: [f32; 3],
    /// H×W×3, each channel min-max scaled to [0, 1].
    pub image: Vec<f32>,
    pub h: usize,
    pub w: usize,
    pub degenerate: bool,
}

/// Top-3 principal components by power iteration with deflation and re-orthogonalization.
/// Explained variance is the Rayleigh quotient of the (population) covariance.
pub fn pca_rgb(features: &Features) -> Result<PcaProjection> {
    let (n, d) = (features.h * features.w, features.d);
    if d < 3 || n < 3 {
        return Err(Error::Precondition(format!(
            "PCA needs D >= 3 and at least 3 pixels, got D={d}, {n} pixels"
        )));
    }
    let mut mean = vec![0.0f64; d];
    for p in 0..n {
        for (m, &v) in mean.iter_mut().zip(features.pixel(p)) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = (0..n)
        .flat_map(|p| {
            features
                .pixel(p)
                .iter()
                .zip(&mean)
                .map(|(&v, m)| f64::from(v) - m)
                .collect::<Vec<_>>()
        })
        .collect();
    let mut cov = vec![0.0f64; d * d];
    for row in centered.chunks_exact(d) {
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= n as f64;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(START_SEED);
    let mut found: Vec<(Vec<f64>, f64)> = Vec::with_capacity(3);
    let mut deflated = cov.clone();
    let mut degenerate = false;
    for _ in 0..3 {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        orthogonalize(&mut v, found.iter().map(|(u, _)| u.as_slice()));
        if normalize(&mut v) == 0.0 {
            degenerate = true;
            break;
        }
        let mut ok = true;
        for _ in 0..POWER_ITERS {
            let mut next = matvec(&deflated, &v, d);
            orthogonalize(&mut next, found.iter().map(|(u, _)| u.as_slice()));
            let norm = normalize(&mut next);
            if norm <= 1e-12 * trace.max(1e-300) {
                ok = false;
                break;
            }
            let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            if delta < POWER_TOL {
                break;
            }
        }
        if !ok {
            degenerate = true;
            break;
        }
        let cv = matvec(&cov, &v, d);
        let lambda: f64 = v.iter().zip(&cv).map(|(a, b)| a * b).sum();
        if lambda <= 1e-12 * trace.max(1e-300) {
            degenerate = true;
            break;
        }
        for i in 0..d {
            for j in 0..d {
                deflated[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        found.push((v, lambda));
    }
    found.sort_by(|a, b| b.1.total_cmp(&a.1));

    let mut components: [Vec<f32>; 3] = [vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let mut explained_variance = [0.0f32; 3];
    for (k, (v, lambda)) in found.iter().enumerate() {
        components[k] = v.iter().map(|&x| x as f32).collect();
        explained_variance[k] = lambda.max(0.0) as f32;
    }

    let mut proj = vec![0.0f64; n * 3];
    for (p, row) in centered.chunks_exact(d).enumerate() {
        for (k, (v, _)) in found.iter().enumerate() {
            proj[p * 3 + k] = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }
    let mut image = vec![0.0f32; n * 3];
    for k in 0..3 {
        let (lo, hi) = (0..n).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(proj[p * 3 + k]), hi.max(proj[p * 3 + k]))
        });
        for p in 0..n {
            image[p * 3 + k] = if hi > lo {
                ((proj[p * 3 + k] - lo) / (hi - lo)) as f32
            } else {
                0.0
            };
        }
    }
    Ok(PcaProjection {
        components,
        explained_variance,
        image,
        h: features.h,
        w: features.w,
        degenerate,
    })
}

fn matvec(m: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| m[i * d..(i + 1) * d].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn orthogonalize<'a>(v: &mut [f64], basis: impl Iterator<Item = &'a [f64]>) {
    for u in basis {
        let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Binary PPM (P6) of the projection image.
pub fn write_ppm(path: &Path, proj: &PcaProjection) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", proj.w, proj.h).into_bytes();
    out.extend(
        proj.image
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}
