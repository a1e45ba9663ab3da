//! Per-channel Dice loss, pairwise overlap penalty, and their weighted sum.

use super::scalar::Real;
use crate::error::{Error, Result};

/// Added to Dice numerator and denominator, and to overlap denominators.
pub const SMOOTH: f64 = 1e-6;
/// Weight of the overlap penalty in the total loss.
pub const OVERLAP_WEIGHT: f64 = 0.25;

fn check(pred_len: usize, target_len: usize, channels: usize) -> Result<usize> {
    if channels == 0 || pred_len % channels != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{pred_len} values do not split into {channels} channels"
        )));
    }
    if pred_len != target_len {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {pred_len} values, target {target_len}"
        )));
    }
    if channels > 10 {
        return Err(Error::Precondition(format!("{channels} object channels exceed 10")));
    }
    Ok(pred_len / channels)
}

/// Σ_i [1 − (2·Σ p·t + s) / (Σ (p + t) + s)] over `channels` planes of `pred`/`target`.
pub fn dice_loss(pred: &[f32], target: &[f32], channels: usize) -> Result<f64> {
    let plane = check(pred.len(), target.len(), channels)?;
    let p: Vec<&[f32]> = pred.chunks_exact(plane).collect();
    let t: Vec<&[f32]> = target.chunks_exact(plane).collect();
    Ok(dice_terms(&p, &t, None))
}

/// Σ_{i≠j} 2·Σ p_i·p_j / (Σ (p_i + p_j) + s) over ordered channel pairs.
pub fn overlap_loss(pred: &[f32], channels: usize) -> Result<f64> {
    let plane = check(pred.len(), pred.len(), channels)?;
    let p: Vec<&[f32]> = pred.chunks_exact(plane).collect();
    Ok(overlap_terms(&p, None))
}

pub fn total_loss(pred: &[f32], target: &[f32], channels: usize) -> Result<f64> {
    Ok(dice_loss(pred, target, channels)? + OVERLAP_WEIGHT * overlap_loss(pred, channels)?)
}

/// Total loss with overlap weight `lambda` and its gradient with respect to `pred`.
pub fn total_loss_grad(pred: &[f64], target: &[f64], channels: usize, lambda: f64) -> Result<(f64, Vec<f64>)> {
    let plane = check(pred.len(), target.len(), channels)?;
    let p: Vec<&[f64]> = pred.chunks_exact(plane).collect();
    let t: Vec<&[f64]> = target.chunks_exact(plane).collect();
    let mut grad = vec![0.0; pred.len()];
    let loss = {
        let mut views: Vec<&mut [f64]> = grad.chunks_exact_mut(plane).collect();
        total_with_grad(&p, &t, &mut views, lambda)
    };
    Ok((loss, grad))
}

/// Dice sum; when `grad` is given, adds ∂loss/∂pred into it (one plane per channel).
pub(crate) fn dice_terms<T: Real>(pred: &[&[T]], target: &[&[T]], mut grad: Option<&mut [&mut [T]]>) -> f64 {
    let mut loss = 0.0;
    for (i, (p, t)) in pred.iter().zip(target).enumerate() {
        let (mut inter, mut sum) = (0.0f64, 0.0f64);
        for (&a, &b) in p.iter().zip(t.iter()) {
            inter += a.f64() * b.f64();
            sum += a.f64() + b.f64();
        }
        let num = 2.0 * inter + SMOOTH;
        let den = sum + SMOOTH;
        loss += 1.0 - num / den;
        if let Some(g) = grad.as_deref_mut() {
            let den2 = den * den;
            for (gv, &b) in g[i].iter_mut().zip(t.iter()) {
                *gv += T::of(-(2.0 * b.f64() * den - num) / den2);
            }
        }
    }
    loss
}

pub(crate) fn overlap_terms<T: Real>(pred: &[&[T]], mut grad: Option<&mut [&mut [T]]>) -> f64 {
    let k = pred.len();
    let sums: Vec<f64> = pred.iter().map(|p| p.iter().map(|v| v.f64()).sum()).collect();
    let mut loss = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            let inter: f64 = pred[i]
                .iter()
                .zip(pred[j].iter())
                .map(|(a, b)| a.f64() * b.f64())
                .sum();
            let den = sums[i] + sums[j] + SMOOTH;
            // (i, j) and (j, i) contribute equally
            loss += 2.0 * (2.0 * inter / den);
            if let Some(g) = grad.as_deref_mut() {
                let den2 = den * den;
                for px in 0..pred[i].len() {
                    let (pi, pj) = (pred[i][px].f64(), pred[j][px].f64());
                    g[i][px] += T::of(4.0 * (pj * den - inter) / den2);
                    g[j][px] += T::of(4.0 * (pi * den - inter) / den2);
                }
            }
        }
    }
    loss
}

/// Total loss and its gradient w.r.t. the prediction planes.
pub(crate) fn total_with_grad<T: Real>(
    pred: &[&[T]],
    target: &[&[T]],
    grad: &mut [&mut [T]],
    lambda: f64,
) -> f64 {
    let d = dice_terms(pred, target, Some(grad));
    let mut og: Vec<Vec<T>> = pred.iter().map(|p| vec![T::zero(); p.len()]).collect();
    let o = {
        let mut views: Vec<&mut [T]> = og.iter_mut().map(Vec::as_mut_slice).collect();
        overlap_terms(pred, Some(&mut views))
    };
    let w = T::of(lambda);
    for (g, o) in grad.iter_mut().zip(&og) {
        for (a, &b) in g.iter_mut().zip(o) {
            *a += w * b;
        }
    }
    d + lambda * o
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_examples() {
        let t = [1.0f32, 1.0, 0.0, 0.0];
        assert!(dice_loss(&t, &t, 1).unwrap().abs() < 1e-6);
        let disjoint = [0.0f32, 0.0, 1.0, 1.0];
        assert!((dice_loss(&disjoint, &t, 1).unwrap() - 1.0).abs() < 1e-6);
        let half = [0.0f32, 1.0, 1.0, 0.0];
        assert!((dice_loss(&half, &t, 1).unwrap() - 0.5).abs() < 1e-6);
        // both empty contributes 0
        assert!(dice_loss(&[0.0f32; 4], &[0.0f32; 4], 1).unwrap().abs() < 1e-12);
    }

    #[test]
    fn overlap_examples() {
        let a = [1.0f32, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0];
        assert_eq!(overlap_loss(&a, 2).unwrap(), 0.0);
        let twin = [1.0f32, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        assert!((overlap_loss(&twin, 2).unwrap() - 2.0).abs() < 1e-6);
        assert_eq!(overlap_loss(&[1.0f32, 0.5], 1).unwrap(), 0.0);
        assert!((total_loss(&twin, &twin, 2).unwrap() - 0.5).abs() < 1e-6);
        assert!(total_loss(&a, &a, 2).unwrap().abs() < 1e-6);
    }

    #[test]
    fn shape_errors() {
        assert!(dice_loss(&[0.0; 4], &[0.0; 3], 1).is_err());
        assert!(dice_loss(&[0.0; 5], &[0.0; 5], 2).is_err());
        assert!(dice_loss(&[0.0; 11], &[0.0; 11], 11).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let pred: Vec<f64> = (0..12).map(|i| 0.1 + 0.07 * ((i * 5) % 11) as f64).collect();
        let target: Vec<f64> = (0..12).map(|i| ((i * 3) % 4 == 0) as u8 as f64).collect();
        let eval = |p: &[f64]| {
            let pv: Vec<&[f64]> = p.chunks(4).collect();
            let tv: Vec<&[f64]> = target.chunks(4).collect();
            let mut g = vec![0.0; 12];
            let mut gv: Vec<&mut [f64]> = g.chunks_mut(4).collect();
            let l = total_with_grad(&pv, &tv, &mut gv, OVERLAP_WEIGHT);
            (l, g)
        };
        let (_, g) = eval(&pred);
        for i in 0..12 {
            let h = 1e-6;
            let mut a = pred.clone();
            a[i] += h;
            let mut b = pred.clone();
            b[i] -= h;
            let fd = (eval(&a).0 - eval(&b).0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }
}
