//! Layout guidance: the weighted-BCE object layout loss, background→foreground
//! self-attention masking, and a per-pixel surrogate that exercises both without a
//! diffusion backbone.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{Map2, Mask};
use crate::layout::InstanceLayout;
use crate::localize::otsu_mask;
use crate::tensor_io::{layout_from_blob, layout_to_blob, read_blob, write_blob, KvDoc, TensorBlob, MANIFEST_FILE};

pub const CLAMP: f32 = 1e-7;
pub const T_MAX: u32 = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub fg_weight: f32,
    /// (upper, lower) timesteps during which the layout loss is applied.
    pub loss_t_range: (u32, u32),
    /// (upper, lower) timesteps during which self-attention is masked.
    pub sa_mask_t_range: (u32, u32),
    /// Layer-label prefixes that receive masking (the decoder).
    pub sa_mask_layers: Vec<String>,
    pub opt_steps: usize,
    pub step_size: f32,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            fg_weight: 10.0,
            loss_t_range: (1000, 500),
            sa_mask_t_range: (1000, 900),
            sa_mask_layers: vec!["up".into()],
            opt_steps: 500,
            step_size: 0.5,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, (hi, lo)) in [("loss_t_range", self.loss_t_range), ("sa_mask_t_range", self.sa_mask_t_range)] {
            if hi > T_MAX || lo > hi {
                return Err(Error::Precondition(format!("{name} ({hi}, {lo}) must satisfy {T_MAX} >= upper >= lower")));
            }
        }
        if !(self.fg_weight > 0.0 && self.fg_weight.is_finite()) {
            return Err(Error::Precondition("fg_weight must be positive".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Precondition("step_size must be positive".into()));
        }
        Ok(())
    }

    pub fn masks_layer(&self, layer: &str) -> bool {
        self.sa_mask_layers.iter().any(|p| layer.starts_with(p.as_str()))
    }

    /// Diffusion timestep a surrogate step stands for: 1000 at step 0, 0 at the last step.
    pub fn timestep_of(&self, step: usize) -> u32 {
        if self.opt_steps == 0 {
            return T_MAX;
        }
        (f64::from(T_MAX) * (1.0 - step as f64 / self.opt_steps as f64)).round() as u32
    }

    pub fn loss_active(&self, t: u32) -> bool {
        in_range(t, self.loss_t_range)
    }

    pub fn sa_mask_active(&self, t: u32) -> bool {
        in_range(t, self.sa_mask_t_range)
    }
}

fn in_range(t: u32, (hi, lo): (u32, u32)) -> bool {
    t <= hi && t >= lo
}

fn check_shapes(cross: &Map2, mask: &Mask) -> Result<()> {
    if (cross.h, cross.w) != (mask.h, mask.w) {
        return Err(Error::ShapeMismatch(format!(
            "cross map {}x{} vs mask {}x{}",
            cross.h, cross.w, mask.h, mask.w
        )));
    }
    Ok(())
}

/// −Σ w (m log c + (1−m) log(1−c)), with w = `fg_weight` on the mask and 1 elsewhere.
pub fn layout_loss(cross: &Map2, mask: &Mask, fg_weight: f32) -> Result<f64> {
    check_shapes(cross, mask)?;
    let lo = f64::from(CLAMP);
    Ok(cross
        .data
        .iter()
        .zip(&mask.data)
        .map(|(&c, &m)| {
            let c = f64::from(c).clamp(lo, 1.0 - lo);
            if m == 1 {
                -f64::from(fg_weight) * c.ln()
            } else {
                -(1.0 - c).ln()
            }
        })
        .sum())
}

/// ∂ layout_loss / ∂ c. Zero where the clamp is active.
pub fn layout_loss_grad(cross: &Map2, mask: &Mask, fg_weight: f32) -> Result<Vec<f64>> {
    check_shapes(cross, mask)?;
    let lo = f64::from(CLAMP);
    Ok(cross
        .data
        .iter()
        .zip(&mask.data)
        .map(|(&c, &m)| {
            let c = f64::from(c);
            if c < lo || c > 1.0 - lo {
                0.0
            } else if m == 1 {
                -f64::from(fg_weight) / c
            } else {
                1.0 / (1.0 - c)
            }
        })
        .collect())
}

/// Row-major N×N self-attention scores over the H·W pixels of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionMap {
    pub n: usize,
    pub scores: Vec<f32>,
    pub layer: String,
    pub timestep: u32,
}

impl SelfAttentionMap {
    pub fn new(n: usize, scores: Vec<f32>, layer: impl Into<String>, timestep: u32) -> Result<Self> {
        if scores.len() != n * n {
            return Err(Error::ShapeMismatch(format!("{} scores for {n}x{n}", scores.len())));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("self-attention scores must be finite".into()));
        }
        Ok(Self {
            n,
            scores,
            layer: layer.into(),
            timestep,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.scores[i * self.n + j]
    }

    /// Row-normalized Gaussian spatial affinity on an h×w grid.
    pub fn spatial(h: usize, w: usize, sigma: f32, layer: impl Into<String>, timestep: u32) -> Self {
        let n = h * w;
        let mut scores = vec![0.0f32; n * n];
        let s2 = 2.0 * sigma * sigma;
        for i in 0..n {
            let (ri, ci) = ((i / w) as f32, (i % w) as f32);
            let row = &mut scores[i * n..(i + 1) * n];
            for (j, v) in row.iter_mut().enumerate() {
                let (rj, cj) = ((j / w) as f32, (j % w) as f32);
                *v = (-((ri - rj).powi(2) + (ci - cj).powi(2)) / s2).exp();
            }
            let z: f32 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
        }
        Self {
            n,
            scores,
            layer: layer.into(),
            timestep,
        }
    }
}

/// Zeroes every entry whose query pixel lies in the background and whose key pixel lies in
/// the foreground; everything else is left untouched.
pub fn mask_self_attention(sa: &SelfAttentionMap, fg: &Mask) -> Result<SelfAttentionMap> {
    let n = fg.h * fg.w;
    if sa.n != n {
        return Err(Error::ShapeMismatch(format!(
            "self-attention over {} pixels, mask has {n}",
            sa.n
        )));
    }
    let mut out = sa.clone();
    for i in (0..n).filter(|&i| fg.data[i] == 0) {
        let row = &mut out.scores[i * n..(i + 1) * n];
        for (v, &m) in row.iter_mut().zip(&fg.data) {
            if m == 1 {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

/// Intersection over union of two binary masks (1 when both are empty).
pub fn mask_iou(a: &Mask, b: &Mask) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateRun {
    pub cross: Map2,
    pub sa: SelfAttentionMap,
    /// Loss before the first step and after every step (length opt_steps + 1).
    pub loss_trace: Vec<f64>,
    pub iou: f64,
    /// First step after which every foreground pixel scores above 0.9.
    pub fg_confident_at: Option<usize>,
}

/// Logits initialised uniformly in [−1, 1].
fn init_logits(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0f32..=1.0)).collect()
}

/// Optimizes a per-pixel logit field so that its sigmoid matches the layout union under
/// [`layout_loss`], masking a surrogate decoder self-attention map on the schedule.
pub fn guide_surrogate(layout: &InstanceLayout, cfg: &GuidanceConfig, seed: u64) -> Result<SurrogateRun> {
    cfg.validate()?;
    if layout.count() == 0 {
        return Err(Error::Precondition("guidance needs a nonempty layout".into()));
    }
    let (h, w) = (layout.h, layout.w);
    let target = layout.union();
    let mut z = init_logits(h * w, seed);
    let cross_of = |z: &[f32]| Map2 {
        h,
        w,
        data: z.iter().map(|&v| sigmoid(v)).collect(),
    };
    let layer = cfg.sa_mask_layers.first().cloned().unwrap_or_else(|| "up".into());
    let mut sa = SelfAttentionMap::spatial(h, w, 2.0, layer, T_MAX);
    let mut cross = cross_of(&z);
    let mut trace = vec![layout_loss(&cross, &target, cfg.fg_weight)?];
    let fg_px: Vec<usize> = (0..h * w).filter(|&i| target.data[i] == 1).collect();
    let confident = |c: &Map2| fg_px.iter().all(|&i| c.data[i] > 0.9);
    let mut fg_confident_at = confident(&cross).then_some(0);
    for step in 0..cfg.opt_steps {
        let t = cfg.timestep_of(step);
        sa.timestep = t;
        if cfg.sa_mask_active(t) && cfg.masks_layer(&sa.layer) {
            sa = mask_self_attention(&sa, &target)?;
        }
        // d loss / d z = w (c − m) for a sigmoid under weighted BCE
        for ((zi, &ci), &m) in z.iter_mut().zip(&cross.data).zip(&target.data) {
            let g = if m == 1 { cfg.fg_weight * (ci - 1.0) } else { ci };
            *zi -= cfg.step_size * g;
        }
        cross = cross_of(&z);
        let loss = layout_loss(&cross, &target, cfg.fg_weight)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("layout loss {loss}"),
            });
        }
        trace.push(loss);
        if fg_confident_at.is_none() && confident(&cross) {
            fg_confident_at = Some(step + 1);
        }
    }
    let fg = otsu_mask(&cross)?;
    Ok(SurrogateRun {
        iou: mask_iou(&fg.grid, &target),
        cross,
        sa,
        loss_trace: trace,
        fg_confident_at,
    })
}

/// Mean of each consecutive `window`-step block of a trace (a short last block included).
pub fn window_means(trace: &[f64], window: usize) -> Vec<f64> {
    trace
        .chunks(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

/// What a host generator needs to apply guidance for a corrected layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceArtifacts {
    pub layout: InstanceLayout,
    pub config: GuidanceConfig,
}

impl GuidanceArtifacts {
    pub fn foreground(&self) -> Mask {
        self.layout.union()
    }

    /// Writes `fg_mask.cgtn` (u8 H×W), `layout.cgtn` (u8 K×H×W) and a manifest with the
    /// schedule and masking rule.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.config.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let fg = self.foreground();
        write_blob(&dir.join("fg_mask.cgtn"), &TensorBlob::u8(vec![fg.h, fg.w], fg.data.clone())?)?;
        write_blob(&dir.join("layout.cgtn"), &layout_to_blob(&self.layout)?)?;
        let c = &self.config;
        let mut doc = KvDoc::new();
        doc.set("fg_mask", "fg_mask.cgtn")
            .set("layout", "layout.cgtn")
            .set("resolution", format!("{}x{}", fg.h, fg.w))
            .set("count", self.layout.count())
            .set("fg_weight", c.fg_weight)
            .set("loss_t_range", format!("{},{}", c.loss_t_range.0, c.loss_t_range.1))
            .set("loss_layers", "all")
            .set("sa_mask_t_range", format!("{},{}", c.sa_mask_t_range.0, c.sa_mask_t_range.1))
            .set("sa_mask_layers", c.sa_mask_layers.join(","))
            .set("sa_mask_rule", "zero[i,j] for i in background, j in foreground")
            .set("opt_steps", c.opt_steps)
            .set("step_size", c.step_size);
        doc.write(&dir.join(MANIFEST_FILE), "countlayout guidance artifacts v1")
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let doc = KvDoc::read(&dir.join(MANIFEST_FILE))?;
        let range = |key: &str| -> Result<(u32, u32)> {
            let v = doc.require(key)?;
            let (a, b) = v
                .split_once(',')
                .ok_or_else(|| Error::Manifest(format!("{key} = {v:?} is not `upper,lower`")))?;
            let p = |s: &str| s.trim().parse().map_err(|_| Error::Manifest(format!("bad timestep in {key}")));
            Ok((p(a)?, p(b)?))
        };
        let config = GuidanceConfig {
            fg_weight: doc.parse_key("fg_weight")?,
            loss_t_range: range("loss_t_range")?,
            sa_mask_t_range: range("sa_mask_t_range")?,
            sa_mask_layers: doc
                .require("sa_mask_layers")?
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect(),
            opt_steps: doc.parse_key("opt_steps")?,
            step_size: doc.parse_key("step_size")?,
        };
        config.validate()?;
        let layout = layout_from_blob(read_blob(&dir.join(doc.require("layout")?))?)?;
        let fg = read_blob(&dir.join(doc.require("fg_mask")?))?;
        if fg.dims != [layout.h, layout.w] || fg.into_u8()? != layout.union().data {
            return Err(Error::Manifest("fg_mask disagrees with the layout union".into()));
        }
        Ok(Self { layout, config })
    }
}
