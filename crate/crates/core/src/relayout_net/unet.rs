//! Encoder/decoder network: per level two (3×3 conv → instance norm → ReLU), 2×2 max-pool
//! down, nearest-neighbour ×2 up with skip concatenation, 1×1 sigmoid head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{self, Act};
use super::loss;
use super::scalar::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    /// Resolution levels, the deepest being the bottleneck.
    pub levels: usize,
}

impl UNetShape {
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Grid side lengths must survive `levels - 1` halvings.
    pub fn accepts(&self, h: usize, w: usize) -> bool {
        let f = 1usize << (self.levels - 1);
        h % f == 0 && w % f == 0 && h >= f && w >= f
    }

    /// (name, shape) of every parameter, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        for l in 0..self.levels {
            let cin = if l == 0 { self.in_channels } else { self.width(l - 1) };
            let c = self.width(l);
            specs.push((format!("enc{l}.conv1.weight"), vec![c, cin, 3, 3]));
            specs.push((format!("enc{l}.conv2.weight"), vec![c, c, 3, 3]));
        }
        for l in (0..self.levels - 1).rev() {
            let cin = self.width(l + 1) + self.width(l);
            let c = self.width(l);
            specs.push((format!("dec{l}.conv1.weight"), vec![c, cin, 3, 3]));
            specs.push((format!("dec{l}.conv2.weight"), vec![c, c, 3, 3]));
        }
        specs.push(("head.weight".into(), vec![self.out_channels, self.base_width, 1, 1]));
        specs.push(("head.bias".into(), vec![self.out_channels]));
        specs
    }

    fn enc_index(&self, l: usize) -> usize {
        2 * l
    }

    fn dec_index(&self, l: usize) -> usize {
        2 * self.levels + 2 * (self.levels - 2 - l)
    }

    fn head_index(&self) -> usize {
        2 * self.levels + 2 * (self.levels - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    pub shape: UNetShape,
    pub params: Vec<Param<T>>,
}

struct BlockCache<T> {
    input: Act<T>,
    xhat1: Vec<T>,
    inv1: Vec<T>,
    mid: Act<T>,
    xhat2: Vec<T>,
    inv2: Vec<T>,
}

/// Activations kept for the backward pass.
pub struct Tape<T> {
    enc: Vec<BlockCache<T>>,
    pool_args: Vec<Vec<u8>>,
    dec: Vec<BlockCache<T>>,
    head_in: Act<T>,
    pub output: Act<T>,
}

impl<T: Real> Tape<T> {
    /// Which ReLUs are open and which max-pool inputs win. Two parameter settings with the
    /// same pattern lie on the same smooth piece of the network.
    pub fn activation_pattern(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for b in self.enc.iter().chain(&self.dec) {
            out.extend(b.xhat1.iter().chain(&b.xhat2).map(|&v| u8::from(v > T::zero())));
        }
        for a in &self.pool_args {
            out.extend_from_slice(a);
        }
        out
    }
}

impl<T: Real> UNet<T> {
    pub fn zeros(shape: UNetShape) -> Self {
        let params = shape
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                Param {
                    name,
                    shape,
                    data: vec![T::zero(); n],
                }
            })
            .collect();
        Self { shape, params }
    }

    /// Uniform(−1/√fan_in, 1/√fan_in) for every weight and the head bias.
    pub fn init(shape: UNetShape, seed: u64) -> Self {
        let mut net = Self::zeros(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head_fan_in = shape.base_width;
        for p in &mut net.params {
            let fan_in = if p.shape.len() == 4 {
                p.shape[1] * p.shape[2] * p.shape[3]
            } else {
                head_fan_in
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut p.data {
                *v = T::of(rng.random_range(-bound..bound));
            }
        }
        net
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect()
    }

    fn block_forward(&self, idx: usize, x: Act<T>) -> (Act<T>, BlockCache<T>) {
        let w1 = &self.params[idx];
        let w2 = &self.params[idx + 1];
        let z1 = layers::conv3_forward(&x, &w1.data, w1.shape[0]);
        let (mid, xhat1, inv1) = layers::norm_relu_forward(&z1);
        let z2 = layers::conv3_forward(&mid, &w2.data, w2.shape[0]);
        let (out, xhat2, inv2) = layers::norm_relu_forward(&z2);
        (
            out,
            BlockCache {
                input: x,
                xhat1,
                inv1,
                mid,
                xhat2,
                inv2,
            },
        )
    }

    fn block_backward(
        &self,
        idx: usize,
        cache: &BlockCache<T>,
        dy: &Act<T>,
        grads: &mut [Vec<T>],
        want_dx: bool,
    ) -> Option<Act<T>> {
        let dz2 = layers::norm_relu_backward(dy, &cache.xhat2, &cache.inv2);
        let dmid = layers::conv3_backward(&cache.mid, &self.params[idx + 1].data, &dz2, &mut grads[idx + 1], true)
            .expect("requested");
        let dz1 = layers::norm_relu_backward(&dmid, &cache.xhat1, &cache.inv1);
        layers::conv3_backward(&cache.input, &self.params[idx].data, &dz1, &mut grads[idx], want_dx)
    }

    /// Batched forward. `input` is N samples of C_in×H×W, sample-major; returns sigmoid scores
    /// as N samples of C_out×H×W together with the tape.
    pub fn forward_tape(&self, input: &[T], n: usize, h: usize, w: usize) -> Result<Tape<T>> {
        let s = self.shape;
        if !s.accepts(h, w) {
            return Err(Error::InvalidShape(format!(
                "{h}x{w} grid does not fit {} levels",
                s.levels
            )));
        }
        let per = s.in_channels * h * w;
        if input.len() != n * per || n == 0 {
            return Err(Error::ShapeMismatch(format!(
                "input has {} values, expected {n} x {per}",
                input.len()
            )));
        }
        let x = to_channel_major(input, n, s.in_channels, h * w);
        let mut x = Some(Act { c: s.in_channels, n, h, w, data: x });

        let mut enc = Vec::with_capacity(s.levels);
        let mut skips: Vec<Act<T>> = Vec::with_capacity(s.levels);
        let mut pool_args = Vec::with_capacity(s.levels - 1);
        for l in 0..s.levels {
            let inp = match x.take() {
                Some(first) => first,
                None => {
                    let (p, arg) = layers::maxpool2_forward(skips.last().expect("previous level"));
                    pool_args.push(arg);
                    p
                }
            };
            let (out, cache) = self.block_forward(s.enc_index(l), inp);
            enc.push(cache);
            skips.push(out);
        }
        let mut d = skips.pop().expect("bottleneck");
        let mut dec = Vec::with_capacity(s.levels - 1);
        for l in (0..s.levels - 1).rev() {
            let up = layers::upsample2_forward(&d);
            let cat = Act::concat(&up, &skips[l]);
            let (out, cache) = self.block_forward(s.dec_index(l), cat);
            dec.push(cache);
            d = out;
        }
        let hw = &self.params[s.head_index()];
        let hb = &self.params[s.head_index() + 1];
        let mut logits = Act::zeros(s.out_channels, n, h, w);
        let cols = d.cols();
        for (c, row) in logits.data.chunks_exact_mut(cols).enumerate() {
            row.iter_mut().for_each(|v| *v = hb.data[c]);
        }
        T::gemm(s.out_channels, s.base_width, cols, T::one(), &hw.data, false, &d.data, false, T::one(), &mut logits.data);
        logits
            .data
            .iter_mut()
            .for_each(|v| *v = T::one() / (T::one() + (-*v).exp()));
        Ok(Tape {
            enc,
            pool_args,
            dec,
            head_in: d,
            output: logits,
        })
    }

    pub fn forward(&self, input: &[T], n: usize, h: usize, w: usize) -> Result<Vec<T>> {
        let tape = self.forward_tape(input, n, h, w)?;
        Ok(to_sample_major(&tape.output.data, n, self.shape.out_channels, h * w))
    }

    /// Backpropagates `dout` (∂loss/∂sigmoid-output, channel-major like `tape.output`).
    pub fn backward(&self, tape: &Tape<T>, dout: &[T], grads: &mut [Vec<T>]) {
        let s = self.shape;
        let out = &tape.output;
        let mut dlogit = Act::zeros(out.c, out.n, out.h, out.w);
        for ((g, &y), &d) in dlogit.data.iter_mut().zip(&out.data).zip(dout) {
            *g = d * y * (T::one() - y);
        }
        let hi = s.head_index();
        let cols = out.cols();
        for (c, row) in dlogit.data.chunks_exact(cols).enumerate() {
            grads[hi + 1][c] += row.iter().fold(T::zero(), |a, &v| a + v);
        }
        T::gemm(s.out_channels, cols, s.base_width, T::one(), &dlogit.data, false, &tape.head_in.data, true, T::one(), &mut grads[hi]);
        let mut dd = Act::zeros(s.base_width, out.n, out.h, out.w);
        T::gemm(s.base_width, s.out_channels, cols, T::one(), &self.params[hi].data, true, &dlogit.data, false, T::zero(), &mut dd.data);

        let mut dskips: Vec<Option<Act<T>>> = (0..s.levels).map(|_| None).collect();
        for (cache, l) in tape.dec.iter().rev().zip(0..s.levels - 1) {
            let dcat = self
                .block_backward(s.dec_index(l), cache, &dd, grads, true)
                .expect("requested");
            let (dup, dskip) = dcat.split(s.width(l + 1));
            dskips[l] = Some(dskip);
            dd = layers::upsample2_backward(&dup);
        }
        let mut dx = dd;
        for l in (0..s.levels).rev() {
            if let Some(ds) = dskips[l].take() {
                dx.data.iter_mut().zip(&ds.data).for_each(|(a, &b)| *a += b);
            }
            let dinput = self.block_backward(s.enc_index(l), &tape.enc[l], &dx, grads, l > 0);
            if l > 0 {
                let di = dinput.expect("requested");
                let (h, w) = (tape.enc[l - 1].input.h, tape.enc[l - 1].input.w);
                dx = layers::maxpool2_backward(&di, &tape.pool_args[l - 1], h, w);
            }
        }
    }

    /// Mean total loss over a batch and its parameter gradient (added into `grads`).
    /// Sample `i` is supervised on its first `channels[i]` output channels.
    pub fn loss_and_grad(
        &self,
        input: &[T],
        target: &[T],
        channels: &[usize],
        h: usize,
        w: usize,
        lambda: f64,
        grads: &mut [Vec<T>],
    ) -> Result<f64> {
        let n = channels.len();
        let tape = self.forward_tape(input, n, h, w)?;
        let oc = self.shape.out_channels;
        if target.len() != n * oc * h * w {
            return Err(Error::ShapeMismatch("target size".into()));
        }
        let plane = h * w;
        let out = &tape.output.data;
        let mut dout = vec![T::zero(); out.len()];
        let mut total = 0.0;
        let scale = 1.0 / n as f64;
        for (b, &k) in channels.iter().enumerate() {
            let pred: Vec<&[T]> = (0..k).map(|c| &out[(c * n + b) * plane..][..plane]).collect();
            let tgt: Vec<&[T]> = (0..k).map(|c| &target[(b * oc + c) * plane..][..plane]).collect();
            let mut g: Vec<Vec<T>> = vec![vec![T::zero(); plane]; k];
            let l = {
                let mut gv: Vec<&mut [T]> = g.iter_mut().map(Vec::as_mut_slice).collect();
                loss::total_with_grad(&pred, &tgt, &mut gv, lambda)
            };
            total += l * scale;
            for (c, gc) in g.iter().enumerate() {
                let dst = &mut dout[(c * n + b) * plane..][..plane];
                for (d, &v) in dst.iter_mut().zip(gc) {
                    *d = v * T::of(scale);
                }
            }
        }
        self.backward(&tape, &dout, grads);
        Ok(total)
    }

    /// Mean total loss without gradients.
    pub fn loss(
        &self,
        input: &[T],
        target: &[T],
        channels: &[usize],
        h: usize,
        w: usize,
        lambda: f64,
    ) -> Result<f64> {
        let n = channels.len();
        let out = self.forward(input, n, h, w)?;
        let oc = self.shape.out_channels;
        let plane = h * w;
        let mut total = 0.0;
        for (b, &k) in channels.iter().enumerate() {
            let pred: Vec<&[T]> = (0..k).map(|c| &out[(b * oc + c) * plane..][..plane]).collect();
            let tgt: Vec<&[T]> = (0..k).map(|c| &target[(b * oc + c) * plane..][..plane]).collect();
            total += loss::dice_terms(&pred, &tgt, None) + lambda * loss::overlap_terms(&pred, None);
        }
        Ok(total / n as f64)
    }
}

/// N×C×P (sample-major) → C×N×P.
pub fn to_channel_major<T: Copy>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for ci in 0..c {
        for b in 0..n {
            out.extend_from_slice(&x[(b * c + ci) * p..][..p]);
        }
    }
    out
}

/// C×N×P → N×C×P.
pub fn to_sample_major<T: Copy>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for ci in 0..c {
            out.extend_from_slice(&x[(ci * n + b) * p..][..p]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNetShape {
        UNetShape {
            in_channels: 3,
            out_channels: 4,
            base_width: 2,
            levels: 3,
        }
    }

    #[test]
    fn param_layout() {
        let s = UNetShape {
            in_channels: 9,
            out_channels: 10,
            base_width: 32,
            levels: 4,
        };
        let specs = s.param_specs();
        assert_eq!(specs.len(), 8 + 6 + 2);
        assert_eq!(specs[0].1, vec![32, 9, 3, 3]);
        assert_eq!(specs[7].1, vec![256, 256, 3, 3]);
        assert_eq!(specs[s.dec_index(2)].1, vec![128, 384, 3, 3]);
        assert_eq!(specs[s.dec_index(0)].1, vec![32, 96, 3, 3]);
        assert_eq!(specs[s.head_index()].0, "head.weight");
        assert!(s.accepts(32, 32) && !s.accepts(12, 12));
    }

    #[test]
    fn zero_net_outputs_half() {
        let net = UNet::<f32>::zeros(tiny());
        let out = net.forward(&vec![0.0; 2 * 3 * 64], 2, 8, 8).unwrap();
        assert!(out.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn batch_is_independent_per_sample() {
        let net = UNet::<f64>::init(tiny(), 3);
        let a: Vec<f64> = (0..3 * 64).map(|i| ((i * 13) % 7) as f64 / 7.0).collect();
        let b: Vec<f64> = (0..3 * 64).map(|i| ((i * 5) % 3) as f64 / 3.0).collect();
        let both: Vec<f64> = a.iter().chain(&b).copied().collect();
        let ob = net.forward(&both, 2, 8, 8).unwrap();
        let oa = net.forward(&a, 1, 8, 8).unwrap();
        let o2 = net.forward(&b, 1, 8, 8).unwrap();
        assert!(ob[..256].iter().zip(&oa).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!(ob[256..].iter().zip(&o2).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn layout_transposes_roundtrip() {
        let x: Vec<u32> = (0..24).collect();
        assert_eq!(to_sample_major(&to_channel_major(&x, 2, 3, 4), 2, 3, 4), x);
    }
}
