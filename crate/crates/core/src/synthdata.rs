//! Procedural (k, k+1) layout pairs and synthetic attention bundles, so the localization,
//! correction and training paths can run end to end without a diffusion model.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{Map2, Mask, CANONICAL_SIZE};
use crate::layout::InstanceLayout;
use crate::localize::{localize, ClusterParams};
use crate::relayout::LayoutPair;
use crate::tensor_io::{
    layout_from_blob, layout_to_blob, read_blob, write_blob, AttentionBundle, BundleManifest,
    Features, KvDoc, MANIFEST_FILE,
};

pub const MAX_SOURCE_COUNT: usize = 9;
pub const FEATURE_DIM: usize = 16;
/// Per-dimension feature noise; keeps within-instance cosine distance far below 0.05.
pub const FEATURE_NOISE: f32 = 0.02;
pub const CROSS_NOISE: f32 = 0.05;
const GAP: usize = 1;
const MAX_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pattern {
    Row,
    Grid,
    Arc,
    Cluster,
    Scatter,
}

impl Pattern {
    pub const ALL: [Pattern; 5] = [Self::Row, Self::Grid, Self::Arc, Self::Cluster, Self::Scatter];

    fn name(self) -> &'static str {
        match self {
            Self::Row => "row",
            Self::Grid => "grid",
            Self::Arc => "arc",
            Self::Cluster => "cluster",
            Self::Scatter => "scatter",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Disc,
    Square,
    Blob,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Self::Disc, Self::Square, Self::Blob];

    fn name(self) -> &'static str {
        match self {
            Self::Disc => "disc",
            Self::Square => "square",
            Self::Blob => "blob",
        }
    }
}

macro_rules! name_impls {
    ($t:ty) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .into_iter()
                    .find(|v| v.name() == s)
                    .ok_or_else(|| Error::Manifest(format!("unknown {} {s:?}", stringify!($t).to_lowercase())))
            }
        }
    };
}
name_impls!(Pattern);
name_impls!(Shape);

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub pattern: Pattern,
    /// Source instance count; the target has one more.
    pub count: usize,
    pub shape: Shape,
    /// Bounding-box side of every instance.
    pub size_px: usize,
    /// Maximum per-axis shift of matched instances between source and target.
    pub jitter: f32,
    pub seed: u64,
    /// Fixed (rows, cols) for the grid pattern; sized to fit count+1 when absent.
    pub grid: Option<(usize, usize)>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_SOURCE_COUNT).contains(&self.count) {
            return Err(Error::Precondition(format!("count {} outside [1, {MAX_SOURCE_COUNT}]", self.count)));
        }
        if self.size_px < 2 || self.size_px > CANONICAL_SIZE / 2 {
            return Err(Error::Precondition(format!("size {} outside [2, {}]", self.size_px, CANONICAL_SIZE / 2)));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Precondition("jitter must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// A spec with a size drawn from the range that usually fits `pattern` at `count`.
    pub fn random(pattern: Pattern, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let max = max_size(pattern, count + 1);
        let size_px = rng.random_range(2..=max.max(2));
        let shape = Shape::ALL[rng.random_range(0..3)];
        let jitter = if rng.random_bool(0.5) { 0.0 } else { 1.0 };
        Self {
            pattern,
            count,
            shape,
            size_px,
            jitter,
            seed: rng.random(),
            grid: None,
        }
    }
}

fn max_size(pattern: Pattern, n: usize) -> usize {
    let usable = CANONICAL_SIZE - 2;
    let per_line = |k: usize| (usable + GAP) / k - GAP;
    let s = match pattern {
        Pattern::Row => per_line(n),
        Pattern::Grid => per_line(grid_dims(n).1.max(grid_dims(n).0)),
        // about 1.6π of a radius-14 circle, neighbours a diagonal pitch apart
        Pattern::Arc => (70.0 / (std::f64::consts::SQRT_2 * n as f64)) as usize - GAP,
        Pattern::Cluster | Pattern::Scatter => {
            ((usable * usable) as f64 / (2.2 * n as f64)).sqrt() as usize - GAP
        }
    };
    s.clamp(2, 9)
}

fn grid_dims(n: usize) -> (usize, usize) {
    let cols = (n as f64).sqrt().ceil() as usize;
    (n.div_ceil(cols), cols)
}

/// One instance: a bounding box plus the shape parameters that rasterize it.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Item {
    r0: i32,
    c0: i32,
    size: usize,
    shape: Shape,
    /// Radial modulation for blobs: (a1, phase1, a2, phase2).
    warp: [f64; 4],
}

impl Item {
    fn fits(&self) -> bool {
        let n = CANONICAL_SIZE as i32;
        self.r0 >= 0 && self.c0 >= 0 && self.r0 + self.size as i32 <= n && self.c0 + self.size as i32 <= n
    }

    /// True when the boxes are closer than the minimum gap.
    fn conflicts(&self, o: &Item) -> bool {
        let g = GAP as i32;
        let (s, so) = (self.size as i32, o.size as i32);
        self.r0 < o.r0 + so + g && o.r0 < self.r0 + s + g && self.c0 < o.c0 + so + g && o.c0 < self.c0 + s + g
    }

    fn shifted(&self, dr: i32, dc: i32) -> Item {
        Item {
            r0: self.r0 + dr,
            c0: self.c0 + dc,
            ..*self
        }
    }

    fn rasterize(&self) -> Mask {
        let s = self.size as f64;
        let mid = (s - 1.0) / 2.0;
        let rad = s / 2.0;
        let (r0, c0, size) = (self.r0 as usize, self.c0 as usize, self.size);
        Mask::from_fn(CANONICAL_SIZE, CANONICAL_SIZE, |r, c| {
            if r < r0 || c < c0 || r >= r0 + size || c >= c0 + size {
                return false;
            }
            let (dy, dx) = (r as f64 - r0 as f64 - mid, c as f64 - c0 as f64 - mid);
            let d = (dy * dy + dx * dx).sqrt();
            match self.shape {
                Shape::Square => true,
                Shape::Disc => d <= rad,
                Shape::Blob if size <= 3 => d <= rad,
                Shape::Blob => {
                    let th = dy.atan2(dx);
                    let [a1, p1, a2, p2] = self.warp;
                    let m = 1.0 + 0.18 * (a1 * (th + p1).cos() + a2 * (2.0 * th + p2).cos());
                    d <= rad * m.min(1.0 + 1.0 / s)
                }
            }
        })
    }
}

fn no_conflicts(items: &[Item]) -> bool {
    items.iter().all(Item::fits)
        && items
            .iter()
            .enumerate()
            .all(|(i, a)| items[i + 1..].iter().all(|b| !a.conflicts(b)))
}

fn infeasible(spec: &SceneSpec, why: &str) -> Error {
    Error::Infeasible(format!(
        "{} pattern cannot hold {} instances of size {}: {why}",
        spec.pattern,
        spec.count + 1,
        spec.size_px
    ))
}

/// Target placements in insertion order: the last item is the added instance.
fn place(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Item>> {
    let n = spec.count + 1;
    let s = spec.size_px;
    let grid = CANONICAL_SIZE as i32;
    let mk = |rng: &mut ChaCha8Rng, r0: i32, c0: i32| Item {
        r0,
        c0,
        size: s,
        shape: spec.shape,
        warp: [
            rng.random_range(-1.0..1.0),
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(-1.0..1.0),
            rng.random_range(0.0..2.0 * PI),
        ],
    };
    let items = match spec.pattern {
        Pattern::Row => {
            let pitch_min = s + GAP;
            let span_min = n * pitch_min - GAP;
            if span_min > CANONICAL_SIZE {
                return Err(infeasible(spec, "row longer than the grid"));
            }
            let extra_max = (CANONICAL_SIZE - span_min) / n.max(2).saturating_sub(1).max(1);
            let pitch = (pitch_min + rng.random_range(0..=extra_max.min(3))) as i32;
            let span = (n as i32 - 1) * pitch + s as i32;
            let along0 = rng.random_range(0..=(grid - span).max(0));
            let across = rng.random_range(0..=grid - s as i32);
            let vertical = rng.random_bool(0.3);
            let reverse = rng.random_bool(0.5);
            (0..n as i32)
                .map(|i| {
                    let along = if reverse { along0 + span - s as i32 - i * pitch } else { along0 + i * pitch };
                    if vertical {
                        mk(rng, along, across)
                    } else {
                        mk(rng, across, along)
                    }
                })
                .collect()
        }
        Pattern::Grid => {
            let (rows, cols) = spec.grid.unwrap_or_else(|| grid_dims(n));
            if rows * cols < n {
                return Err(infeasible(spec, &format!("{rows}x{cols} grid has no free cell")));
            }
            let pitch_min = s + GAP;
            let need = rows.max(cols) * pitch_min - GAP;
            if need > CANONICAL_SIZE {
                return Err(infeasible(spec, "grid cells do not fit"));
            }
            let extra = rng.random_range(0..=((CANONICAL_SIZE - need) / rows.max(cols)).min(2));
            let pitch = (pitch_min + extra) as i32;
            let (h, w) = ((rows as i32 - 1) * pitch + s as i32, (cols as i32 - 1) * pitch + s as i32);
            let (or, oc) = (rng.random_range(0..=grid - h), rng.random_range(0..=grid - w));
            (0..n as i32)
                .map(|i| mk(rng, or + (i / cols as i32) * pitch, oc + (i % cols as i32) * pitch))
                .collect()
        }
        Pattern::Arc => {
            let mut found = None;
            for _ in 0..MAX_ATTEMPTS {
                let radius = rng.random_range(6.0..20.0);
                // chord long enough that neighbouring boxes keep the gap in both axes
                let chord = (s + GAP) as f64 * std::f64::consts::SQRT_2;
                if chord >= 2.0 * radius {
                    continue;
                }
                let step = 2.0 * (chord / (2.0 * radius)).asin();
                if step * (n as f64) > 1.6 * PI {
                    continue;
                }
                let (cr, cc) = (rng.random_range(0.0..grid as f64), rng.random_range(0.0..grid as f64));
                let start = rng.random_range(0.0..2.0 * PI);
                let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let half = (s as f64 - 1.0) / 2.0;
                let items: Vec<Item> = (0..n)
                    .map(|i| {
                        let th = start + dir * step * i as f64;
                        let r = (cr + radius * th.sin() - half).round() as i32;
                        let c = (cc + radius * th.cos() - half).round() as i32;
                        mk(rng, r, c)
                    })
                    .collect();
                if no_conflicts(&items) {
                    found = Some(items);
                    break;
                }
            }
            found.ok_or_else(|| infeasible(spec, "no arc fits"))?
        }
        Pattern::Cluster => {
            let half = s as f64 / 2.0;
            let centre = (
                rng.random_range(10.0..22.0) - half,
                rng.random_range(10.0..22.0) - half,
            );
            let mut items: Vec<Item> = Vec::with_capacity(n);
            for _ in 0..n {
                // the closest free spot to the cluster centre along random bearings
                let mut best: Option<(f64, Item)> = None;
                let proto = mk(rng, 0, 0);
                for _ in 0..48 {
                    let th = rng.random_range(0.0..2.0 * PI);
                    let mut rad = 0.0;
                    while rad < 24.0 {
                        let it = Item {
                            r0: (centre.0 + rad * th.sin()).round() as i32,
                            c0: (centre.1 + rad * th.cos()).round() as i32,
                            ..proto
                        };
                        if it.fits() && items.iter().all(|o| !it.conflicts(o)) {
                            if best.is_none_or(|(b, _)| rad < b) {
                                best = Some((rad, it));
                            }
                            break;
                        }
                        rad += 0.5;
                    }
                }
                items.push(best.ok_or_else(|| infeasible(spec, "cluster is full"))?.1);
            }
            items
        }
        Pattern::Scatter => {
            let mut items: Vec<Item> = Vec::with_capacity(n);
            for _ in 0..n {
                let mut placed = false;
                for _ in 0..MAX_ATTEMPTS * 8 {
                    let hi = grid - s as i32;
                    let (r, c) = (rng.random_range(0..=hi), rng.random_range(0..=hi));
                    let it = mk(rng, r, c);
                    if items.iter().all(|o| !it.conflicts(o)) {
                        items.push(it);
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    return Err(infeasible(spec, "no free spot"));
                }
            }
            items
        }
    };
    if !no_conflicts(&items) {
        return Err(infeasible(spec, "instances collide"));
    }
    Ok(items)
}

/// Builds a layout from items and returns it canonicalized along with, for each item, the
/// channel it ended up in.
fn canonical_layout(items: &[Item]) -> (InstanceLayout, Vec<usize>) {
    let layout = InstanceLayout {
        h: CANONICAL_SIZE,
        w: CANONICAL_SIZE,
        channels: items.iter().map(Item::rasterize).collect(),
    };
    let order = layout.canonical_order();
    let mut slot = vec![0; items.len()];
    for (pos, &i) in order.iter().enumerate() {
        slot[i] = pos;
    }
    (layout.canonicalized(), slot)
}

/// Generates a source layout with `spec.count` instances and its target with one more in
/// the same arrangement.
pub fn generate_pair(spec: &SceneSpec) -> Result<LayoutPair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let items = place(spec, &mut rng)?;
    let k = spec.count;
    let j = spec.jitter.floor() as i32;
    let mut moved = items.clone();
    if j > 0 {
        for _ in 0..MAX_ATTEMPTS {
            let mut cand = items.clone();
            for it in &mut cand[..k] {
                *it = it.shifted(rng.random_range(-j..=j), rng.random_range(-j..=j));
            }
            if no_conflicts(&cand) {
                moved = cand;
                break;
            }
        }
    }
    let (source, src_slot) = canonical_layout(&items[..k]);
    let (target, tgt_slot) = canonical_layout(&moved);
    let mut correspondence = vec![0; k];
    for i in 0..k {
        correspondence[src_slot[i]] = tgt_slot[i];
    }
    let pair = LayoutPair {
        source,
        target,
        correspondence,
        new_channel: tgt_slot[k],
    };
    pair.validate()?;
    Ok(pair)
}

fn box_blur(x: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (mut s, mut n) = (0.0, 0.0);
            for rr in r.saturating_sub(1)..(r + 2).min(h) {
                for cc in c.saturating_sub(1)..(c + 2).min(w) {
                    s += x[rr * w + cc];
                    n += 1.0;
                }
            }
            out[r * w + c] = s / n;
        }
    }
    out
}

/// Synthetic attention for a layout: one near-orthogonal feature direction per instance
/// (plus one for background) and a single cross map that is a softened layout indicator.
pub fn make_bundle(layout: &InstanceLayout, feature_dim: usize, seed: u64) -> Result<AttentionBundle> {
    make_bundle_with_noise(layout, feature_dim, seed, CROSS_NOISE)
}

pub fn make_bundle_with_noise(
    layout: &InstanceLayout,
    feature_dim: usize,
    seed: u64,
    cross_noise: f32,
) -> Result<AttentionBundle> {
    if feature_dim < 3 {
        return Err(Error::Precondition(format!("feature_dim {feature_dim} below 3")));
    }
    let layout = layout.clone().compact();
    let k = layout.num_channels();
    if k == 0 {
        return Err(Error::Precondition("layout has no instances".into()));
    }
    let cap = (feature_dim - 1).min(10);
    if k > cap {
        return Err(Error::Precondition(format!(
            "{k} instances need more than the {cap} separable directions of a {feature_dim}-dim feature space"
        )));
    }
    let (h, w) = (layout.h, layout.w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    // k+1 orthonormal directions by Gram-Schmidt on Gaussian draws
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
    while basis.len() < k + 1 {
        let mut v: Vec<f64> = (0..feature_dim).map(|_| normal.sample(&mut rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let labels = layout.labels();
    let noise = Normal::new(0.0f32, FEATURE_NOISE).expect("finite sigma");
    let mut feats = Vec::with_capacity(h * w * feature_dim);
    for lab in &labels {
        let dir = &basis[lab.unwrap_or(k)];
        feats.extend(dir.iter().map(|&x| x as f32 + noise.sample(&mut rng)));
    }
    let indicator: Vec<f32> = labels.iter().map(|l| if l.is_some() { 1.0 } else { 0.0 }).collect();
    let blurred = box_blur(&indicator, h, w);
    let cross: Vec<f32> = indicator
        .iter()
        .zip(&blurred)
        .map(|(&m, &b)| {
            let e = if cross_noise > 0.0 { rng.random_range(-cross_noise..=cross_noise) } else { 0.0 };
            0.75 * m + 0.25 * b + e
        })
        .collect();
    let manifest = BundleManifest {
        prompt: format!("synthetic layout with {k} instances"),
        object_token_indices: vec![1],
        timestep: 500,
        layer_id: "synthetic".into(),
        resolution: (h, w),
        tensor_files: Default::default(),
    };
    let bundle = AttentionBundle {
        manifest,
        features: Features::new(h, w, feature_dim, feats)?,
        cross: vec![Map2::new(h, w, cross)?],
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Instance count the localization pipeline recovers from a synthetic bundle of `layout`.
pub fn localized_count(layout: &InstanceLayout, seed: u64) -> Result<usize> {
    let bundle = make_bundle(layout, FEATURE_DIM, seed)?;
    Ok(localize(&bundle, &ClusterParams::default())?.clustering.layout.count())
}

/// The emission filter: both layouts must localize to their construction counts.
pub fn verify_pair(pair: &LayoutPair, seed: u64) -> bool {
    let k = pair.source.count();
    matches!(localized_count(&pair.source, seed), Ok(c) if c == k)
        && matches!(localized_count(&pair.target, seed ^ 0x5eed), Ok(c) if c == k + 1)
}

/// Stateless seed derivation (SplitMix64 finalizer).
pub fn sub_seed(seed: u64, index: u64, attempt: u64) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(attempt.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Pattern and count for dataset slot `index`: round-robin over all combinations.
pub fn slot_scene(index: usize) -> (Pattern, usize) {
    let combo = index % (Pattern::ALL.len() * MAX_SOURCE_COUNT);
    (Pattern::ALL[combo % Pattern::ALL.len()], combo / Pattern::ALL.len() + 1)
}

/// The verified pair for dataset slot `index`; infeasible or unverifiable draws are retried
/// with fresh sub-seeds.
pub fn dataset_pair(seed: u64, index: usize) -> Result<(SceneSpec, LayoutPair)> {
    let (pattern, count) = slot_scene(index);
    for attempt in 0..1000u64 {
        let s = sub_seed(seed, index as u64, attempt);
        let spec = SceneSpec::random(pattern, count, s);
        let pair = match generate_pair(&spec) {
            Ok(p) => p,
            Err(Error::Infeasible(_)) => continue,
            Err(e) => return Err(e),
        };
        if verify_pair(&pair, s) {
            return Ok((spec, pair));
        }
    }
    Err(Error::Infeasible(format!("no verified {pattern} pair with count {count}")))
}

/// In-memory dataset of `n` verified pairs.
pub fn generate_dataset(n: usize, seed: u64) -> Result<Vec<(SceneSpec, LayoutPair)>> {
    (0..n).map(|i| dataset_pair(seed, i)).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn write_pair(dir: &Path, spec: &SceneSpec, pair: &LayoutPair) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_blob(&dir.join("source.cgtn"), &layout_to_blob(&pair.source)?)?;
    write_blob(&dir.join("target.cgtn"), &layout_to_blob(&pair.target)?)?;
    let mut doc = KvDoc::new();
    doc.set("pattern", spec.pattern)
        .set("count", spec.count)
        .set("shape", spec.shape)
        .set("size_px", spec.size_px)
        .set("jitter", spec.jitter)
        .set("seed", spec.seed)
        .set("correspondence", join(&pair.correspondence))
        .set("new_channel", pair.new_channel)
        .set("source", "source.cgtn")
        .set("target", "target.cgtn");
    if let Some((r, c)) = spec.grid {
        doc.set("grid", format!("{r}x{c}"));
    }
    doc.write(&dir.join(MANIFEST_FILE), "countlayout layout pair v1")
}

pub fn read_pair(dir: &Path) -> Result<(SceneSpec, LayoutPair)> {
    let doc = KvDoc::read(&dir.join(MANIFEST_FILE))?;
    let spec = SceneSpec {
        pattern: doc.require("pattern")?.parse()?,
        count: doc.parse_key("count")?,
        shape: doc.require("shape")?.parse()?,
        size_px: doc.parse_key("size_px")?,
        jitter: doc.parse_key("jitter")?,
        seed: doc.parse_key("seed")?,
        grid: doc.get("grid").map(crate::tensor_io::parse_resolution).transpose()?,
    };
    let correspondence = doc
        .require("correspondence")?
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| Error::Manifest(format!("bad channel index {s:?}"))))
        .collect::<Result<Vec<usize>>>()?;
    let pair = LayoutPair {
        source: layout_from_blob(read_blob(&dir.join(doc.require("source")?))?)?,
        target: layout_from_blob(read_blob(&dir.join(doc.require("target")?))?)?,
        correspondence,
        new_channel: doc.parse_key("new_channel")?,
    };
    pair.validate()?;
    Ok((spec, pair))
}

pub fn pair_dir(root: &Path, index: usize) -> std::path::PathBuf {
    root.join(format!("pair_{index:06}"))
}

/// Writes `n_pairs` verified pairs to `out/pair_%06d/` plus a top-level manifest.
pub fn build_dataset(n_pairs: usize, seed: u64, out: &Path) -> Result<()> {
    if n_pairs == 0 {
        return Err(Error::Precondition("n_pairs must be at least 1".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for i in 0..n_pairs {
        let (spec, pair) = dataset_pair(seed, i)?;
        write_pair(&pair_dir(out, i), &spec, &pair)?;
        if (i + 1) % 1000 == 0 {
            log::info!("{} / {n_pairs} pairs written", i + 1);
        }
    }
    let mut doc = KvDoc::new();
    doc.set("pairs", n_pairs).set("seed", seed);
    doc.write(&out.join(MANIFEST_FILE), "countlayout layout dataset v1")
}

/// Reads every pair listed by a dataset manifest.
pub fn read_dataset(dir: &Path) -> Result<Vec<LayoutPair>> {
    let doc = KvDoc::read(&dir.join(MANIFEST_FILE))?;
    let n: usize = doc.parse_key("pairs")?;
    (0..n).map(|i| read_pair(&pair_dir(dir, i)).map(|(_, p)| p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localize::otsu_mask;

    fn spec(pattern: Pattern, count: usize, size: usize, jitter: f32, seed: u64) -> SceneSpec {
        SceneSpec {
            pattern,
            count,
            shape: Shape::Square,
            size_px: size,
            jitter,
            seed,
            grid: None,
        }
    }

    #[test]
    fn zero_jitter_row_keeps_source_and_appends() {
        let p = generate_pair(&spec(Pattern::Row, 4, 4, 0.0, 7)).unwrap();
        assert_eq!(p.source.count(), 4);
        assert_eq!(p.target.count(), 5);
        for (i, &j) in p.correspondence.iter().enumerate() {
            assert_eq!(p.source.channels[i], p.target.channels[j]);
        }
        // collinear: all centroids share a row or a column
        let cs: Vec<(f32, f32)> = p.target.centroids().into_iter().map(Option::unwrap).collect();
        let same_row = cs.iter().all(|c| c.0 == cs[0].0);
        let same_col = cs.iter().all(|c| c.1 == cs[0].1);
        assert!(same_row || same_col);
        // the added instance sits at one end of the line
        let key = |c: (f32, f32)| if same_row { c.1 } else { c.0 };
        let new = key(cs[p.new_channel]);
        assert!(cs.iter().all(|&c| key(c) <= new) || cs.iter().all(|&c| key(c) >= new));
    }

    #[test]
    fn full_fixed_grid_is_infeasible() {
        let mut s = spec(Pattern::Grid, 9, 3, 0.0, 1);
        s.grid = Some((3, 3));
        assert!(matches!(generate_pair(&s), Err(Error::Infeasible(_))));
        s.grid = Some((3, 4));
        assert!(generate_pair(&s).is_ok());
    }

    #[test]
    fn grid_fills_next_cell() {
        let p = generate_pair(&spec(Pattern::Grid, 5, 4, 0.0, 3)).unwrap();
        // 6 cells of a 2x3 grid; the new one is the last in row-major order
        let cs: Vec<(f32, f32)> = p.target.centroids().into_iter().map(Option::unwrap).collect();
        let last = cs.iter().cloned().fold((f32::MIN, f32::MIN), |a, c| if c > a { c } else { a });
        assert_eq!(cs[p.new_channel], last);
    }

    #[test]
    fn cluster_adds_at_periphery() {
        for seed in 0..20 {
            let p = generate_pair(&spec(Pattern::Cluster, 6, 4, 0.0, seed)).unwrap();
            let cs: Vec<(f32, f32)> = p.source.centroids().into_iter().map(Option::unwrap).collect();
            let m = cs.iter().fold((0.0, 0.0), |a, c| (a.0 + c.0 / 6.0, a.1 + c.1 / 6.0));
            let d = |c: (f32, f32)| ((c.0 - m.0).powi(2) + (c.1 - m.1).powi(2)).sqrt();
            let new = d(p.target.channels[p.new_channel].centroid().unwrap());
            let median = {
                let mut v: Vec<f32> = cs.iter().map(|&c| d(c)).collect();
                v.sort_by(f32::total_cmp);
                v[3]
            };
            assert!(new >= median, "seed {seed}: new at {new}, median {median}");
        }
    }

    #[test]
    fn jitter_is_bounded_and_gap_kept() {
        for seed in 0..30 {
            for pattern in Pattern::ALL {
                let s = SceneSpec {
                    jitter: 1.0,
                    ..SceneSpec::random(pattern, 1 + (seed as usize % 9), seed)
                };
                let Ok(p) = generate_pair(&s) else { continue };
                for (i, &j) in p.correspondence.iter().enumerate() {
                    let (a, b) = (p.source.channels[i].centroid().unwrap(), p.target.channels[j].centroid().unwrap());
                    assert!((a.0 - b.0).abs() <= 1.0 + 1e-4 && (a.1 - b.1).abs() <= 1.0 + 1e-4);
                    assert_eq!(p.source.channels[i].area(), p.target.channels[j].area());
                }
                assert!(p.target.is_disjoint());
            }
        }
    }

    #[test]
    fn make_bundle_noise_free_foreground_is_union() {
        let p = generate_pair(&spec(Pattern::Scatter, 3, 5, 0.0, 2)).unwrap();
        let b = make_bundle_with_noise(&p.target, 16, 1, 0.0).unwrap();
        let fg = otsu_mask(&b.cross[0]).unwrap();
        assert_eq!(fg.grid, p.target.union());
    }

    #[test]
    fn make_bundle_two_instances_localize() {
        let p = generate_pair(&spec(Pattern::Row, 1, 5, 0.0, 5)).unwrap();
        assert_eq!(localized_count(&p.target, 9).unwrap(), 2);
        assert!(make_bundle(&InstanceLayout::empty(32, 32), 16, 0).is_err());
        assert!(make_bundle(&p.target, 2, 0).is_err());
        assert!(make_bundle(&p.target, 3, 0).is_ok());
    }

    #[test]
    fn feature_geometry() {
        let p = generate_pair(&spec(Pattern::Grid, 3, 5, 0.0, 8)).unwrap();
        let b = make_bundle(&p.target, 16, 4).unwrap();
        let labels = p.target.labels();
        let cos = |a: &[f32], b: &[f32]| {
            let d: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let n = |v: &[f32]| v.iter().map(|x| x * x).sum::<f32>().sqrt();
            1.0 - d / (n(a) * n(b))
        };
        let px: Vec<usize> = (0..1024).filter(|&i| labels[i].is_some()).collect();
        for &i in &px {
            for &j in &px {
                let d = cos(b.features.pixel(i), b.features.pixel(j));
                if labels[i] == labels[j] {
                    assert!(d <= 0.05, "within {d}");
                } else {
                    assert!(d >= 0.5, "across {d}");
                }
            }
        }
    }

    #[test]
    fn dataset_slots_are_uniform_and_verified() {
        let data = generate_dataset(45, 11).unwrap();
        let mut seen = std::collections::HashSet::new();
        for (spec, pair) in &data {
            assert!(seen.insert((spec.pattern, spec.count)));
            assert_eq!(pair.source.count(), spec.count);
        }
        assert_eq!(seen.len(), 45);
    }

    #[test]
    fn write_read_pair_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (spec, pair) = dataset_pair(5, 17).unwrap();
        write_pair(dir.path(), &spec, &pair).unwrap();
        let (s2, p2) = read_pair(dir.path()).unwrap();
        assert_eq!(s2, spec);
        assert_eq!(p2, pair);
    }

    #[test]
    fn names_parse() {
        for p in Pattern::ALL {
            assert_eq!(p.to_string().parse::<Pattern>().unwrap(), p);
        }
        assert!("spiral".parse::<Pattern>().is_err());
    }
}
