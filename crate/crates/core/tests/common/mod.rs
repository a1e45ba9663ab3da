//! Finite-difference checks shared by the gradient tests and the acceptance run.

use countlayout::grid::Mask;
use countlayout::guidance::{layout_loss, layout_loss_grad};
use countlayout::relayout_net::{total_loss_grad, UNet, UNetShape, OVERLAP_WEIGHT};
use countlayout::Map2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;

pub fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Every conv feeds an instance norm, so its output does not depend on the weight scale,
/// while the finite-difference error grows like (step / |w|)². Conv weights are brought to
/// unit RMS so that a 1e-3 step is a small relative perturbation.
pub fn tiny_net(seed: u64) -> UNet<f64> {
    let mut net = UNet::init(
        UNetShape {
            in_channels: 9,
            out_channels: 10,
            base_width: 4,
            levels: 3,
        },
        seed,
    );
    for p in net.params.iter_mut().filter(|p| p.shape.len() == 4 && !p.name.starts_with("head")) {
        let rms = (p.data.iter().map(|v| v * v).sum::<f64>() / p.data.len() as f64).sqrt();
        p.data.iter_mut().for_each(|v| *v /= rms);
    }
    net
}

/// Two 8×8 samples with 2 and 3 source channels; blobs placed at random.
pub fn batch(seed: u64) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = 64;
    let mut input = vec![0.0; 2 * 9 * plane];
    let mut target = vec![0.0; 2 * 10 * plane];
    let ks = [2usize, 3];
    for (b, &k) in ks.iter().enumerate() {
        for c in 0..=k {
            let (r0, c0) = (rng.random_range(0..6), rng.random_range(0..6));
            for r in r0..r0 + 2 {
                for cc in c0..c0 + 2 {
                    target[(b * 10 + c) * plane + r * 8 + cc] = 1.0;
                    if c < k {
                        input[(b * 9 + c) * plane + r * 8 + cc] = 1.0;
                    }
                }
            }
        }
    }
    (input, target, ks.iter().map(|k| k + 1).collect())
}

#[derive(Debug)]
pub struct NetCheck {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
    pub worst_at: String,
}

impl NetCheck {
    /// A few kink crossings are expected; a large share would hide real errors.
    pub fn passes(&self, tol: f64) -> bool {
        self.worst <= tol && self.skipped * 20 <= self.checked + self.skipped
    }

    pub fn summary(&self) -> String {
        format!(
            "checked {} parameters, skipped {} whose ±step crosses a ReLU or pooling kink; worst relative error {:.3e} at {}",
            self.checked, self.skipped, self.worst, self.worst_at
        )
    }
}

/// Every parameter of the tiny net against central differences of the total loss.
pub fn check_unet_gradients(net_seed: u64, batch_seed: u64) -> NetCheck {
    let mut net = tiny_net(net_seed);
    let (x, t, ch) = batch(batch_seed);
    let lambda = OVERLAP_WEIGHT;
    let mut grads = net.zero_grads();
    net.loss_and_grad(&x, &t, &ch, 8, 8, lambda, &mut grads).unwrap();
    let mut out = NetCheck {
        checked: 0,
        skipped: 0,
        worst: 0.0,
        worst_at: String::new(),
    };
    let base_pattern = net.forward_tape(&x, 2, 8, 8).unwrap().activation_pattern();
    for pi in 0..net.params.len() {
        for i in 0..net.params[pi].data.len() {
            let orig = net.params[pi].data[i];
            net.params[pi].data[i] = orig + STEP;
            let up = net.loss(&x, &t, &ch, 8, 8, lambda).unwrap();
            let pat_up = net.forward_tape(&x, 2, 8, 8).unwrap().activation_pattern();
            net.params[pi].data[i] = orig - STEP;
            let down = net.loss(&x, &t, &ch, 8, 8, lambda).unwrap();
            let pat_down = net.forward_tape(&x, 2, 8, 8).unwrap().activation_pattern();
            net.params[pi].data[i] = orig;
            if pat_up != base_pattern || pat_down != base_pattern {
                out.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * STEP);
            let e = rel_err(grads[pi][i], numeric);
            if e > out.worst {
                out.worst = e;
                out.worst_at = format!("{}[{i}]: analytic {} numeric {numeric}", net.params[pi].name, grads[pi][i]);
            }
            out.checked += 1;
        }
    }
    out
}

/// Worst relative error of the total-loss gradient w.r.t. predictions over 20 random cases.
pub fn check_total_loss_gradient(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let k = rng.random_range(1..=4);
        let n = k * 16;
        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let target: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.3) as u8)).collect();
        let (_, g) = total_loss_grad(&pred, &target, k, OVERLAP_WEIGHT).unwrap();
        for i in 0..n {
            let mut p = pred.clone();
            p[i] += STEP;
            let up = total_loss_grad(&p, &target, k, OVERLAP_WEIGHT).unwrap().0;
            p[i] -= 2.0 * STEP;
            let down = total_loss_grad(&p, &target, k, OVERLAP_WEIGHT).unwrap().0;
            worst = worst.max(rel_err(g[i], (up - down) / (2.0 * STEP)));
        }
    }
    worst
}

/// Worst relative error of the layout-loss gradient over 20 random 6×7 maps.
///
/// Scores and step are dyadic so c ± h is exact in f32 and the loss is evaluated exactly.
pub fn check_layout_loss_gradient(seed: u64) -> f64 {
    let step = 2f64.powi(-14);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (h, w) = (6, 7);
        let c: Vec<f32> = (0..h * w).map(|_| rng.random_range(52..972) as f32 / 1024.0).collect();
        let m: Vec<u8> = (0..h * w).map(|_| rng.random_bool(0.4) as u8).collect();
        let (cross, mask) = (Map2::new(h, w, c.clone()).unwrap(), Mask::new(h, w, m).unwrap());
        let g = layout_loss_grad(&cross, &mask, 10.0).unwrap();
        for i in 0..h * w {
            let at = |v: f64| {
                let mut cc = cross.clone();
                cc.data[i] = v as f32;
                layout_loss(&cc, &mask, 10.0).unwrap()
            };
            let ci = f64::from(c[i]);
            let numeric = (at(ci + step) - at(ci - step)) / (2.0 * step);
            worst = worst.max(rel_err(g[i], numeric));
        }
    }
    worst
}
