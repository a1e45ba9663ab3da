//! Adam training of the insertion network on matched layout pairs.

use std::path::PathBuf;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{RelayoutModel, INPUT_CHANNELS, OUTPUT_CHANNELS};
use crate::error::{Error, Result};
use crate::relayout::LayoutPair;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub hflip: bool,
    pub channel_shuffle: bool,
    /// Save a checkpoint every this many epochs (needs `checkpoint_dir`).
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this many optimizer steps regardless of `epochs`.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            seed: 0,
            hflip: true,
            channel_shuffle: true,
            checkpoint_every: None,
            checkpoint_dir: None,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub step_losses: Vec<f64>,
    /// Mean step loss per completed epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainLog {
    pub fn steps(&self) -> usize {
        self.step_losses.len()
    }
}

/// One training example as network tensors: input 9×H×W, target 10×H×W, and the number
/// of supervised channels (k+1).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<f32>,
    pub target: Vec<f32>,
    pub channels: usize,
}

/// Encodes a pair, optionally mirrored and with the source channels permuted by `perm`
/// (`perm[i]` is the source channel placed at input slot `i`). The target follows the same
/// permutation and the inserted instance always lands in channel k.
pub fn encode_example(pair: &LayoutPair, hflip: bool, perm: Option<&[usize]>) -> Result<Example> {
    let k = pair.source.num_channels();
    if k > INPUT_CHANNELS {
        return Err(Error::Precondition(format!("{k} source instances exceed {INPUT_CHANNELS}")));
    }
    let identity: Vec<usize> = (0..k).collect();
    let perm = perm.unwrap_or(&identity);
    if perm.len() != k {
        return Err(Error::Precondition("permutation length differs from source count".into()));
    }
    let (h, w) = (pair.source.h, pair.source.w);
    let plane = h * w;
    let sup = pair.supervised_target();
    let mut input = vec![0.0f32; INPUT_CHANNELS * plane];
    let mut target = vec![0.0f32; OUTPUT_CHANNELS * plane];
    let put = |dst: &mut [f32], m: &crate::grid::Mask| {
        for r in 0..h {
            for c in 0..w {
                let sc = if hflip { w - 1 - c } else { c };
                dst[r * w + c] = f32::from(m.data[r * w + sc]);
            }
        }
    };
    for (slot, &i) in perm.iter().enumerate() {
        put(&mut input[slot * plane..][..plane], &pair.source.channels[i]);
        put(&mut target[slot * plane..][..plane], sup[i]);
    }
    put(&mut target[k * plane..][..plane], sup[k]);
    Ok(Example {
        input,
        target,
        channels: k + 1,
    })
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(model: &RelayoutModel) -> Self {
        Self {
            m: model.net.zero_grads(),
            v: model.net.zero_grads(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut RelayoutModel, grads: &[Vec<f32>]) {
        let hp = model.hyper;
        self.t += 1;
        let (b1, b2) = (hp.beta1, hp.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = (hp.lr * c2.sqrt() / c1) as f32;
        let eps = (hp.adam_eps * c2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for (((p, g), m), v) in model.net.params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &g), m), v) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *x -= lr * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Trains `model` in place. Batches are drawn from a seeded per-epoch shuffle; each example
/// is mirrored with probability 1/2 and has its source channels permuted when enabled.
pub fn train(model: &mut RelayoutModel, data: &[LayoutPair], cfg: &TrainConfig) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }
    for p in data {
        p.validate()?;
    }
    let (h, w) = (data[0].source.h, data[0].source.w);
    if data.iter().any(|p| (p.source.h, p.source.w) != (h, w)) {
        return Err(Error::ShapeMismatch("training pairs differ in resolution".into()));
    }
    if !model.net.shape.accepts(h, w) {
        return Err(Error::InvalidShape(format!("network cannot run on {h}x{w}")));
    }
    let batch = model.hyper.batch.max(1);
    let lambda = model.hyper.lambda;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let plane = h * w;

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let first = log.steps();
        for chunk in order.chunks(batch) {
            if cfg.max_steps.is_some_and(|m| log.steps() >= m) {
                break 'epochs;
            }
            let mut input = Vec::with_capacity(chunk.len() * INPUT_CHANNELS * plane);
            let mut target = Vec::with_capacity(chunk.len() * OUTPUT_CHANNELS * plane);
            let mut channels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let pair = &data[i];
                let flip = cfg.hflip && rng.random_bool(0.5);
                let mut perm: Vec<usize> = (0..pair.source.num_channels()).collect();
                if cfg.channel_shuffle {
                    perm.shuffle(&mut rng);
                }
                let ex = encode_example(pair, flip, Some(&perm))?;
                input.extend_from_slice(&ex.input);
                target.extend_from_slice(&ex.target);
                channels.push(ex.channels);
            }
            let mut grads = model.net.zero_grads();
            let loss = model.net.loss_and_grad(&input, &target, &channels, h, w, lambda, &mut grads)?;
            let step = log.steps();
            if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss {loss}"),
                });
            }
            adam.step(model, &grads);
            if !model.all_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: "non-finite parameters after update".into(),
                });
            }
            log.step_losses.push(loss);
        }
        let done = &log.step_losses[first..];
        let mean = done.iter().sum::<f64>() / done.len().max(1) as f64;
        log.epoch_losses.push(mean);
        model.trained_epochs += 1;
        info!("epoch {} loss {:.5} ({} steps)", model.trained_epochs, mean, done.len());
        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, &cfg.checkpoint_dir) {
            if every > 0 && (epoch + 1) % every == 0 {
                model.save(&dir.join(format!("epoch_{:03}", model.trained_epochs)))?;
            }
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Mask;
    use crate::layout::InstanceLayout;

    fn sq(r: usize, c: usize) -> Mask {
        Mask::from_fn(32, 32, |y, x| y >= r && y < r + 3 && x >= c && x < c + 3)
    }

    fn pair() -> LayoutPair {
        let src = InstanceLayout::new(32, 32, vec![sq(2, 2), sq(2, 12)]).unwrap();
        let tgt = InstanceLayout::new(32, 32, vec![sq(2, 12), sq(20, 20), sq(2, 2)]).unwrap();
        LayoutPair::from_layouts(src, tgt).unwrap()
    }

    #[test]
    fn encode_aligns_target_with_source() {
        let p = pair();
        assert_eq!(p.correspondence, vec![2, 0]);
        let ex = encode_example(&p, false, None).unwrap();
        assert_eq!(ex.channels, 3);
        let plane = 1024;
        assert_eq!(ex.input[..2 * plane], ex.target[..2 * plane]);
        assert_eq!(ex.target[2 * plane + 20 * 32 + 20], 1.0);
        assert!(ex.input[2 * plane..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permutation_and_flip_move_together() {
        let p = pair();
        let ex = encode_example(&p, true, Some(&[1, 0])).unwrap();
        let plane = 1024;
        assert_eq!(ex.input[..2 * plane], ex.target[..2 * plane]);
        // slot 0 holds source channel 1 (cols 12..15) mirrored to cols 17..20
        assert_eq!(ex.input[2 * 32 + 17], 1.0);
        assert_eq!(ex.input[2 * 32 + 12], 0.0);
        // the new instance at cols 20..23 mirrors to 9..12 and stays in channel k
        assert_eq!(ex.target[2 * plane + 20 * 32 + 9], 1.0);
    }

    #[test]
    fn short_run_is_deterministic_and_lowers_loss() {
        let hyper = super::super::Hyper {
            base_width: 4,
            levels: 3,
            batch: 4,
            lr: 3e-3,
            ..Default::default()
        };
        let data: Vec<LayoutPair> = (0..4).map(|_| pair()).collect();
        let cfg = TrainConfig {
            epochs: 15,
            seed: 3,
            ..Default::default()
        };
        let mut a = RelayoutModel::new(hyper, 1);
        let mut b = RelayoutModel::new(hyper, 1);
        let la = train(&mut a, &data, &cfg).unwrap();
        let lb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        assert_eq!(a.trained_epochs, 15);
        assert!(la.epoch_losses.last().unwrap() < &la.epoch_losses[0]);
    }
}
