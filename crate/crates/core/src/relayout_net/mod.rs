//! The k → k+1 layout network: model container, checkpoints, inference, losses, training.

pub mod layers;
pub mod loss;
pub mod scalar;
pub mod train;
pub mod unet;

use std::fs;
use std::path::{Path, PathBuf};

pub use loss::{dice_loss, overlap_loss, total_loss, total_loss_grad, OVERLAP_WEIGHT, SMOOTH};
pub use train::{train, TrainConfig, TrainLog};
pub use unet::{UNet, UNetShape};

use crate::error::{Error, Result};
use crate::grid::CANONICAL_SIZE;
use crate::tensor_io::{read_blob, write_blob, KvDoc, TensorBlob, MANIFEST_FILE};

pub const INPUT_CHANNELS: usize = 9;
pub const OUTPUT_CHANNELS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub lr: f64,
    pub batch: usize,
    /// Overlap-loss weight.
    pub lambda: f64,
    pub levels: usize,
    pub base_width: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lr: 8e-6,
            batch: 32,
            lambda: OVERLAP_WEIGHT,
            levels: 4,
            base_width: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl Hyper {
    pub fn unet_shape(&self) -> UNetShape {
        UNetShape {
            in_channels: INPUT_CHANNELS,
            out_channels: OUTPUT_CHANNELS,
            base_width: self.base_width,
            levels: self.levels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelayoutModel {
    pub net: UNet<f32>,
    pub hyper: Hyper,
    pub trained_epochs: usize,
    pub rng_seed: u64,
}

impl RelayoutModel {
    pub fn new(hyper: Hyper, seed: u64) -> Self {
        Self {
            net: UNet::init(hyper.unet_shape(), seed),
            hyper,
            trained_epochs: 0,
            rng_seed: seed,
        }
    }

    pub fn zeros(hyper: Hyper) -> Self {
        Self {
            net: UNet::zeros(hyper.unet_shape()),
            hyper,
            trained_epochs: 0,
            rng_seed: 0,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.net
            .params
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let h = &self.hyper;
        let mut doc = KvDoc::new();
        doc.set("in_channels", INPUT_CHANNELS)
            .set("out_channels", OUTPUT_CHANNELS)
            .set("base_width", h.base_width)
            .set("levels", h.levels)
            .set("lr", h.lr)
            .set("batch", h.batch)
            .set("lambda", h.lambda)
            .set("beta1", h.beta1)
            .set("beta2", h.beta2)
            .set("adam_eps", h.adam_eps)
            .set("trained_epochs", self.trained_epochs)
            .set("rng_seed", self.rng_seed);
        for p in &self.net.params {
            let file = format!("{}.cgtn", p.name);
            write_blob(&dir.join(&file), &TensorBlob::f32(p.shape.clone(), p.data.clone())?)?;
            doc.set(&format!("param.{}", p.name), file);
        }
        doc.write(&dir.join(MANIFEST_FILE), "countlayout relayout checkpoint v1")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let doc = KvDoc::read(&dir.join(MANIFEST_FILE))?;
        let in_ch: usize = doc.parse_key("in_channels")?;
        let out_ch: usize = doc.parse_key("out_channels")?;
        if (in_ch, out_ch) != (INPUT_CHANNELS, OUTPUT_CHANNELS) {
            return Err(Error::Manifest(format!(
                "checkpoint has {in_ch} -> {out_ch} channels, expected {INPUT_CHANNELS} -> {OUTPUT_CHANNELS}"
            )));
        }
        let hyper = Hyper {
            lr: doc.parse_key("lr")?,
            batch: doc.parse_key("batch")?,
            lambda: doc.parse_key("lambda")?,
            levels: doc.parse_key("levels")?,
            base_width: doc.parse_key("base_width")?,
            beta1: doc.parse_key("beta1")?,
            beta2: doc.parse_key("beta2")?,
            adam_eps: doc.parse_key("adam_eps")?,
        };
        let mut net = UNet::zeros(hyper.unet_shape());
        for p in &mut net.params {
            let file: PathBuf = doc
                .get(&format!("param.{}", p.name))
                .ok_or_else(|| Error::Manifest(format!("missing parameter `{}`", p.name)))?
                .into();
            let blob = read_blob(&dir.join(file))?;
            if blob.dims != p.shape {
                return Err(Error::ShapeMismatch(format!(
                    "parameter `{}` is {:?}, expected {:?}",
                    p.name, blob.dims, p.shape
                )));
            }
            p.data = blob.into_f32()?;
        }
        let model = Self {
            net,
            hyper,
            trained_epochs: doc.parse_key("trained_epochs")?,
            rng_seed: doc.parse_key("rng_seed")?,
        };
        if !model.all_finite() {
            return Err(Error::Manifest("checkpoint holds non-finite parameters".into()));
        }
        Ok(model)
    }
}

/// Scores for one 9×32×32 input as 10×32×32 values in (0, 1).
pub fn forward(model: &RelayoutModel, input: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
    if (h, w) != (CANONICAL_SIZE, CANONICAL_SIZE) {
        return Err(Error::InvalidShape(format!(
            "network runs on the {CANONICAL_SIZE}x{CANONICAL_SIZE} grid, got {h}x{w}"
        )));
    }
    model.net.forward(input, 1, h, w)
}

/// Batched variant of [`forward`] for N sample-major inputs.
pub fn forward_batch(model: &RelayoutModel, input: &[f32], n: usize) -> Result<Vec<f32>> {
    model.net.forward(input, n, CANONICAL_SIZE, CANONICAL_SIZE)
}
