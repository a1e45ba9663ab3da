use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use countlayout::eval::{self, BoxSet};
use countlayout::guidance::{self, GuidanceArtifacts, GuidanceConfig};
use countlayout::localize::{self, ClusterParams};
use countlayout::relayout::correct_layout;
use countlayout::relayout_net::{train, Hyper, RelayoutModel, TrainConfig};
use countlayout::tensor_io::{read_bundle, read_layout, write_blob, write_bundle, write_layout, TensorBlob};
use countlayout::{synthdata, viz, Error};

#[derive(Parser)]
#[command(name = "countlayout", version, about = "Count-aware layout extraction, correction and guidance")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Segment object instances from an attention bundle.
    Localize {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.10)]
        eps_min: f64,
        #[arg(long, default_value_t = 0.20)]
        eps_max: f64,
    },
    /// Render the top three principal components of the self-attention features.
    VizPca {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correct a layout to the requested instance count.
    Relayout {
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        target: usize,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the insertion network on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Resume from an existing checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        no_hflip: bool,
        #[arg(long)]
        no_channel_shuffle: bool,
        /// Also write out/epoch_NNN every this many epochs.
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Write a dataset of verified (k, k+1) layout pairs.
    GenData {
        #[arg(long)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a synthetic attention bundle for a layout.
    SynthBundle {
        #[arg(long)]
        layout: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = synthdata::FEATURE_DIM)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the surrogate layout guidance on a layout.
    GuideSim {
        #[arg(long)]
        layout: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the guidance artifacts (foreground mask, masking spec, schedule) here.
        #[arg(long)]
        export_guidance: Option<PathBuf>,
    },
    /// Count accuracy over a directory of layouts.
    Eval {
        #[arg(long)]
        layouts: PathBuf,
        /// Lines of `<layout subdirectory> <requested count>`.
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precision, recall and IoU of detector boxes against a layout's foreground.
    BoxMetrics {
        /// Lines of `r0 c0 r1 c1 label`.
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long)]
        layout: PathBuf,
        /// Only use boxes with this label.
        #[arg(long)]
        label: Option<String>,
    },
    /// Write the 200 CoCoCount prompts.
    Prompts {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Localize {
            bundle,
            out,
            eps_min,
            eps_max,
        } => {
            let b = read_bundle(&bundle)?;
            let params = ClusterParams {
                eps_min,
                eps_max,
                ..Default::default()
            };
            let loc = localize::localize(&b, &params)?;
            write_layout(&out, &loc.clustering.layout)?;
            println!(
                "instances {} (eps {:.2}, min_pts {}, foreground {:.1}%)",
                loc.clustering.layout.count(),
                loc.clustering.eps,
                loc.clustering.min_pts,
                100.0 * loc.foreground.coverage
            );
        }
        Cmd::VizPca { bundle, out } => {
            let b = read_bundle(&bundle)?;
            let p = viz::pca_rgb(&b.features)?;
            viz::write_ppm(&out, &p)?;
            let v = p.explained_variance;
            println!("explained variance {:.4} {:.4} {:.4}{}", v[0], v[1], v[2], if p.degenerate { " (degenerate)" } else { "" });
        }
        Cmd::Relayout {
            layout,
            target,
            model,
            out,
        } => {
            let l = read_layout(&layout)?;
            let m = RelayoutModel::load(&model).with_context(|| format!("loading model {}", model.display()))?;
            match correct_layout(&l, target, &m) {
                Ok(c) => {
                    write_layout(&out, &c.layout)?;
                    println!("{} -> {} instances in {} iterations", l.count(), c.layout.count(), c.iterations);
                }
                Err(Error::IterationCap { achieved, best, .. }) => {
                    write_layout(&out, &best)?;
                    bail!("iteration cap reached with {achieved} of {target} instances; best layout written to {}", out.display());
                }
                Err(e) => return Err(e.into()),
            }
        }
        Cmd::Train {
            data,
            out,
            epochs,
            seed,
            resume,
            no_hflip,
            no_channel_shuffle,
            checkpoint_every,
        } => {
            if epochs == 0 {
                bail!("--epochs must be at least 1");
            }
            let pairs = synthdata::read_dataset(&data)?;
            info!("{} training pairs", pairs.len());
            let mut model = match resume {
                Some(dir) => RelayoutModel::load(&dir)?,
                None => RelayoutModel::new(Hyper::default(), seed),
            };
            let cfg = TrainConfig {
                epochs,
                seed,
                hflip: !no_hflip,
                channel_shuffle: !no_channel_shuffle,
                checkpoint_every,
                checkpoint_dir: checkpoint_every.map(|_| out.clone()),
                max_steps: None,
            };
            let log = train(&mut model, &pairs, &cfg)?;
            model.save(&out)?;
            let curve: String = log.epoch_losses.iter().enumerate().map(|(i, l)| format!("{} {l:.6}\n", i + 1)).collect();
            fs::write(out.join("loss.txt"), curve)?;
            println!("trained {} epochs ({} steps); final epoch loss {:.5}", epochs, log.steps(), log.epoch_losses.last().copied().unwrap_or(f64::NAN));
        }
        Cmd::GenData { pairs, seed, out } => {
            synthdata::build_dataset(pairs, seed, &out)?;
            println!("wrote {pairs} pairs to {}", out.display());
        }
        Cmd::SynthBundle { layout, seed, dim, out } => {
            let l = read_layout(&layout)?;
            write_bundle(&out, &synthdata::make_bundle(&l, dim, seed)?)?;
        }
        Cmd::GuideSim {
            layout,
            steps,
            seed,
            out,
            export_guidance,
        } => {
            let l = read_layout(&layout)?;
            let cfg = GuidanceConfig {
                opt_steps: steps,
                ..Default::default()
            };
            let run = guidance::guide_surrogate(&l, &cfg, seed)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_blob(&out.join("cross.cgtn"), &TensorBlob::f32(vec![run.cross.h, run.cross.w], run.cross.data.clone())?)?;
            write_blob(&out.join("self_attention.cgtn"), &TensorBlob::f32(vec![run.sa.n, run.sa.n], run.sa.scores.clone())?)?;
            let trace: String = run.loss_trace.iter().enumerate().map(|(i, l)| format!("{i} {l:.6}\n")).collect();
            fs::write(out.join("loss_trace.txt"), trace)?;
            if let Some(dir) = export_guidance {
                GuidanceArtifacts { layout: l, config: cfg }.write(&dir)?;
            }
            println!("iou {:.4}, final loss {:.4}", run.iou, run.loss_trace.last().copied().unwrap_or(f64::NAN));
        }
        Cmd::Eval { layouts, targets, out } => {
            let reports = read_targets(&layouts, &targets)?;
            let report = eval::count_accuracy(&reports)?;
            fs::write(&out, report.render()).with_context(|| format!("writing {}", out.display()))?;
            println!("accuracy {:.4} over {} layouts", report.accuracy, report.per_prompt.len());
        }
        Cmd::BoxMetrics { boxes, layout, label } => {
            let text = fs::read_to_string(&boxes).with_context(|| format!("reading {}", boxes.display()))?;
            let l = read_layout(&layout)?;
            let picked = eval::parse_box_file(&text)?
                .into_iter()
                .filter(|b| label.as_deref().is_none_or(|want| b.label == want))
                .map(|b| b.bbox)
                .collect();
            let m = eval::mask_metrics(&BoxSet::new(l.h, l.w, picked)?, &l.union())?;
            println!(
                "precision {:.4}{} recall {:.4} iou {:.4}",
                m.precision,
                if m.precision_defined { "" } else { " (no boxes)" },
                m.recall,
                m.iou
            );
        }
        Cmd::Prompts { seed, out } => {
            let text: String = eval::cococount_prompts(seed).iter().map(|p| format!("{}\n", p.text)).collect();
            fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
        }
    }
    Ok(())
}

fn read_targets(root: &Path, file: &Path) -> Result<Vec<(usize, countlayout::InstanceLayout)>> {
    let text = fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (name, target) = line
            .rsplit_once(char::is_whitespace)
            .with_context(|| format!("{}:{}: expected `<layout> <count>`", file.display(), no + 1))?;
        let target: usize = target
            .parse()
            .with_context(|| format!("{}:{}: bad count {target:?}", file.display(), no + 1))?;
        out.push((target, read_layout(&root.join(name.trim()))?));
    }
    Ok(out)
}

