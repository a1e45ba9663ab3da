//! Instance localization: cross-attention aggregation, Otsu foreground, and DBSCAN over
//! self-attention features with a dynamically chosen radius.

use crate::error::{Error, Result};
use crate::grid::{Map2, Mask};
pub use crate::layout::InstanceLayout;
use crate::tensor_io::{AttentionBundle, Features};

pub const OTSU_BINS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundMask {
    pub grid: Mask,
    pub threshold: f32,
    pub coverage: f32,
}

impl ForegroundMask {
    pub fn from_grid(grid: Mask, threshold: f32) -> Self {
        let coverage = grid.area() as f32 / (grid.h * grid.w) as f32;
        Self {
            grid,
            threshold,
            coverage,
        }
    }

    /// Pixel indices of the foreground, row-major.
    pub fn pixels(&self) -> Vec<usize> {
        self.grid
            .data
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v != 0).then_some(i))
            .collect()
    }
}

/// Mean of the object-token cross maps, min-max normalized to [0, 1].
pub fn aggregate_cross_attention(bundle: &AttentionBundle) -> Result<Map2> {
    let first = bundle
        .cross
        .first()
        .ok_or_else(|| Error::Precondition("bundle has no object-token cross maps".into()))?;
    let mut acc = vec![0.0f64; first.data.len()];
    for m in &bundle.cross {
        if m.data.len() != acc.len() {
            return Err(Error::ShapeMismatch("cross maps differ in size".into()));
        }
        for (a, &v) in acc.iter_mut().zip(&m.data) {
            *a += f64::from(v);
        }
    }
    let n = bundle.cross.len() as f64;
    let mean: Vec<f64> = acc.into_iter().map(|v| v / n).collect();
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = mean
        .into_iter()
        .map(|v| if span > 0.0 { ((v - lo) / span) as f32 } else { 0.0 })
        .collect();
    Map2::new(first.h, first.w, data)
}

/// Histogram bin of each value over `[lo, hi]`.
fn bin_indices(values: &[f32], lo: f64, hi: f64) -> Vec<usize> {
    let scale = OTSU_BINS as f64 / (hi - lo);
    values
        .iter()
        .map(|&v| (((f64::from(v) - lo) * scale) as usize).min(OTSU_BINS - 1))
        .collect()
}

/// Otsu threshold over a 256-bin histogram spanning the map's value range.
///
/// Bins `0..=t` form the background class for the first `t` that maximizes the
/// between-class variance; the reported threshold is the upper edge of bin `t`.
pub fn otsu_mask(map: &Map2) -> Result<ForegroundMask> {
    if map.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("map contains non-finite values".into()));
    }
    let (lo, hi) = map.min_max();
    let (lo, hi) = (f64::from(lo), f64::from(hi));
    if hi <= lo {
        return Err(Error::Degenerate("constant map has zero variance".into()));
    }
    let bins = bin_indices(&map.data, lo, hi);
    let mut hist = [0u64; OTSU_BINS];
    for &b in &bins {
        hist[b] += 1;
    }
    let total = bins.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();

    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (t, &h) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += h as f64;
        sum0 += t as f64 * h as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best.0 {
            best = (between, t);
        }
    }
    let t = best.1;
    let threshold = (lo + (t + 1) as f64 * (hi - lo) / OTSU_BINS as f64) as f32;
    let grid = Mask {
        h: map.h,
        w: map.w,
        data: bins.iter().map(|&b| u8::from(b > t)).collect(),
    };
    Ok(ForegroundMask::from_grid(grid, threshold))
}

/// Pairwise cosine distances between points, dense and symmetric.
#[derive(Debug, Clone)]
pub struct CosineDistances {
    n: usize,
    dist: Vec<f64>,
}

impl CosineDistances {
    pub fn new(points: &[&[f32]]) -> Self {
        let normed: Vec<Vec<f64>> = points
            .iter()
            .map(|p| {
                let norm = p.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
                if norm > 0.0 {
                    p.iter().map(|&v| f64::from(v) / norm).collect()
                } else {
                    vec![0.0; p.len()]
                }
            })
            .collect();
        let n = points.len();
        let mut dist = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let dot: f64 = normed[i].iter().zip(&normed[j]).map(|(a, b)| a * b).sum();
                let d = (1.0 - dot).max(0.0);
                dist[i * n + j] = d;
                dist[j * n + i] = d;
            }
        }
        Self { n, dist }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n + j]
    }
}

/// Union-find with path halving.
struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

/// DBSCAN labels: `Some(cluster)` or `None` for noise.
///
/// Core points are those with at least `min_pts` points (itself included) within `eps`.
/// Clusters are the connected components of the core points; a border point joins the
/// cluster of its nearest core neighbour, ties going to the neighbour with the smaller
/// `keys` entry, so the result does not depend on point enumeration order. Cluster ids
/// are dense and ordered by the smallest key in each cluster.
pub fn dbscan(dist: &CosineDistances, keys: &[usize], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = dist.len();
    assert_eq!(keys.len(), n, "one key per point");
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| dist.get(i, j) <= eps).count() >= min_pts)
        .collect();
    let mut ds = DisjointSet::new(n);
    for i in (0..n).filter(|&i| core[i]) {
        for j in ((i + 1)..n).filter(|&j| core[j]) {
            if dist.get(i, j) <= eps {
                ds.union(i, j);
            }
        }
    }
    let mut root_of = vec![None; n];
    for i in 0..n {
        if core[i] {
            root_of[i] = Some(ds.find(i));
        } else {
            let nearest = (0..n)
                .filter(|&j| core[j] && dist.get(i, j) <= eps)
                .min_by(|&a, &b| {
                    dist.get(i, a)
                        .total_cmp(&dist.get(i, b))
                        .then(keys[a].cmp(&keys[b]))
                });
            root_of[i] = nearest.map(|j| ds.find(j));
        }
    }
    // Dense ids ordered by smallest member key.
    let mut roots: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        if let Some(r) = root_of[i] {
            match roots.iter_mut().find(|(root, _)| *root == r) {
                Some(e) => e.1 = e.1.min(keys[i]),
                None => roots.push((r, keys[i])),
            }
        }
    }
    roots.sort_by_key(|&(_, k)| k);
    root_of
        .into_iter()
        .map(|r| r.map(|r| roots.iter().position(|&(root, _)| root == r).expect("root")))
        .collect()
}

pub fn num_clusters(labels: &[Option<usize>]) -> usize {
    labels.iter().flatten().max().map_or(0, |&m| m + 1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams {
    pub eps_min: f64,
    pub eps_max: f64,
    pub eps_step: f64,
    /// Consecutive sweep steps with equal cluster count required to accept a radius.
    pub plateau: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            eps_min: 0.10,
            eps_max: 0.20,
            eps_step: 0.01,
            plateau: 3,
        }
    }
}

impl ClusterParams {
    pub fn sweep(&self) -> Vec<f64> {
        let steps = ((self.eps_max - self.eps_min) / self.eps_step + 1e-9).floor() as usize;
        (0..=steps)
            .map(|i| self.eps_min + i as f64 * self.eps_step)
            .collect()
    }

    pub fn fallback_eps(&self) -> f64 {
        0.5 * (self.eps_min + self.eps_max)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_min > 0.0 && self.eps_max >= self.eps_min && self.eps_step > 0.0) {
            return Err(Error::Precondition(format!(
                "bad eps sweep [{}, {}] step {}",
                self.eps_min, self.eps_max, self.eps_step
            )));
        }
        Ok(())
    }
}

pub fn min_pts_for(foreground: usize) -> usize {
    4usize.max((0.02 * foreground as f64).round() as usize)
}

/// Picks the sweep radius: the smallest one that starts a run of `plateau` equal, non-zero
/// cluster counts; otherwise the midpoint of the range, or failing that the first radius
/// with any cluster.
pub fn select_eps(sweep: &[f64], counts: &[usize], params: &ClusterParams) -> Option<f64> {
    let p = params.plateau.max(1);
    for i in 0..counts.len().saturating_sub(p - 1) {
        if counts[i] > 0 && counts[i..i + p].iter().all(|&c| c == counts[i]) {
            return Some(sweep[i]);
        }
    }
    let fallback = params.fallback_eps();
    let fi = sweep
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - fallback).abs().total_cmp(&(b.1 - fallback).abs()))
        .map(|(i, _)| i)?;
    if counts[fi] > 0 {
        return Some(sweep[fi]);
    }
    counts.iter().position(|&c| c > 0).map(|i| sweep[i])
}

#[derive(Debug, Clone)]
pub struct Clustering {
    pub layout: InstanceLayout,
    pub eps: f64,
    pub min_pts: usize,
    /// Noise points moved to their nearest cluster.
    pub reassigned_noise: usize,
}

/// Clusters the foreground pixels' self-attention features into instance channels.
pub fn cluster_instances(
    bundle: &AttentionBundle,
    fg: &ForegroundMask,
    params: &ClusterParams,
) -> Result<Clustering> {
    cluster_features(&bundle.features, fg, params)
}

pub fn cluster_features(
    features: &Features,
    fg: &ForegroundMask,
    params: &ClusterParams,
) -> Result<Clustering> {
    params.validate()?;
    if (features.h, features.w) != (fg.grid.h, fg.grid.w) {
        return Err(Error::ShapeMismatch(format!(
            "features {}x{} vs foreground {}x{}",
            features.h, features.w, fg.grid.h, fg.grid.w
        )));
    }
    let pixels = fg.pixels();
    if pixels.is_empty() {
        return Err(Error::Precondition("foreground is empty".into()));
    }
    let points: Vec<&[f32]> = pixels.iter().map(|&p| features.pixel(p)).collect();
    let dist = CosineDistances::new(&points);
    let min_pts = min_pts_for(pixels.len());

    let sweep = params.sweep();
    let runs: Vec<Vec<Option<usize>>> = sweep
        .iter()
        .map(|&eps| dbscan(&dist, &pixels, eps, min_pts))
        .collect();
    let counts: Vec<usize> = runs.iter().map(|l| num_clusters(l)).collect();
    let eps = select_eps(&sweep, &counts, params).ok_or(Error::NoInstances)?;
    let idx = sweep.iter().position(|&e| e == eps).expect("eps from sweep");
    let mut labels = runs[idx].clone();
    let k = counts[idx];

    let reassigned_noise = assign_noise(&mut labels, &points, k);

    let (h, w) = (fg.grid.h, fg.grid.w);
    let mut channels = vec![Mask::zeros(h, w); k];
    for (&p, l) in pixels.iter().zip(&labels) {
        let c = l.expect("noise assigned");
        channels[c].data[p] = 1;
    }
    let layout = InstanceLayout::new(h, w, channels)?.canonicalized();
    Ok(Clustering {
        layout,
        eps,
        min_pts,
        reassigned_noise,
    })
}

/// Gives each noise point the cluster whose mean normalized feature is closest in cosine
/// distance. Returns the number of reassigned points.
fn assign_noise(labels: &mut [Option<usize>], points: &[&[f32]], k: usize) -> usize {
    let d = points.first().map_or(0, |p| p.len());
    let unit = |p: &[f32]| -> Vec<f64> {
        let n = p.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        p.iter()
            .map(|&v| if n > 0.0 { f64::from(v) / n } else { 0.0 })
            .collect()
    };
    let mut centroids = vec![vec![0.0f64; d]; k];
    for (p, l) in points.iter().zip(labels.iter()) {
        if let Some(c) = l {
            for (a, v) in centroids[*c].iter_mut().zip(unit(p)) {
                *a += v;
            }
        }
    }
    let centroid_units: Vec<Vec<f64>> = centroids
        .into_iter()
        .map(|c| {
            let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            c.into_iter().map(|v| if n > 0.0 { v / n } else { 0.0 }).collect()
        })
        .collect();
    let mut moved = 0;
    for (p, l) in points.iter().zip(labels.iter_mut()) {
        if l.is_none() {
            let u = unit(p);
            let best = centroid_units
                .iter()
                .enumerate()
                .map(|(c, cu)| (c, 1.0 - cu.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .map(|(c, _)| c)
                .expect("at least one cluster");
            *l = Some(best);
            moved += 1;
        }
    }
    moved
}

pub fn count_instances(layout: &InstanceLayout) -> usize {
    layout.count()
}

#[derive(Debug, Clone)]
pub struct Localization {
    pub aggregate: Map2,
    pub foreground: ForegroundMask,
    pub clustering: Clustering,
}

impl Localization {
    pub fn layout(&self) -> &InstanceLayout {
        &self.clustering.layout
    }

    pub fn count(&self) -> usize {
        count_instances(&self.clustering.layout)
    }
}

/// Full pipeline: aggregate → Otsu → cluster.
pub fn localize(bundle: &AttentionBundle, params: &ClusterParams) -> Result<Localization> {
    let aggregate = aggregate_cross_attention(bundle)?;
    let foreground = otsu_mask(&aggregate)?;
    let clustering = cluster_instances(bundle, &foreground, params)?;
    Ok(Localization {
        aggregate,
        foreground,
        clustering,
    })
}
