//! Count correction: trim on over-generation, iterative network insertion on
//! under-generation, and optimal instance matching between k and k+1 layouts.

pub mod assignment;

use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::layout::InstanceLayout;
use crate::relayout_net::{self, RelayoutModel, INPUT_CHANNELS, OUTPUT_CHANNELS};

pub use assignment::{solve as solve_assignment, Assignment};

pub const MAX_COUNT: usize = 10;
pub const MAX_INSERT_ITERATIONS: usize = 12;
/// Fraction of the grid the existing content is scaled to before each insertion.
pub const ZOOM_OUT_SCALE: f32 = 0.92;
pub const BINARIZE_THRESHOLD: f32 = 0.5;
/// Weight of the diagonal-normalized centroid distance in the matching cost.
pub const CENTROID_COST_WEIGHT: f64 = 0.1;

/// A k-instance layout, its (k+1)-instance counterpart, and which target channel each
/// source channel became.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutPair {
    pub source: InstanceLayout,
    pub target: InstanceLayout,
    /// `correspondence[i]` is the target channel matched to source channel `i`.
    pub correspondence: Vec<usize>,
    pub new_channel: usize,
}

impl LayoutPair {
    pub fn validate(&self) -> Result<()> {
        let (k, t) = (self.source.num_channels(), self.target.num_channels());
        if self.source.count() != k || self.target.count() != t {
            return Err(Error::Precondition("pair layouts contain empty channels".into()));
        }
        if t != k + 1 {
            return Err(Error::Precondition(format!(
                "pair has {k} source and {t} target instances"
            )));
        }
        if t > OUTPUT_CHANNELS {
            return Err(Error::Precondition(format!("{t} target instances exceed {OUTPUT_CHANNELS}")));
        }
        if self.correspondence.len() != k {
            return Err(Error::Precondition("correspondence must cover every source channel".into()));
        }
        let mut used = vec![false; t];
        for &j in &self.correspondence {
            if j >= t || used[j] {
                return Err(Error::Precondition("correspondence is not injective".into()));
            }
            used[j] = true;
        }
        match used.iter().position(|&u| !u) {
            Some(free) if free == self.new_channel => Ok(()),
            _ => Err(Error::Precondition("new_channel is not the unmatched target".into())),
        }
    }

    /// Matches the two layouts and builds the pair.
    pub fn from_layouts(source: InstanceLayout, target: InstanceLayout) -> Result<Self> {
        let source = source.compact();
        let target = target.compact();
        let m = match_layouts(&source, &target)?;
        let mut correspondence = vec![0; source.num_channels()];
        for &(i, j) in &m.assignment {
            correspondence[i] = j;
        }
        let pair = Self {
            source,
            target,
            correspondence,
            new_channel: m.unmatched_target,
        };
        pair.validate()?;
        Ok(pair)
    }

    /// Target channels in supervision order: matched partners of the source channels,
    /// then the inserted instance.
    pub fn supervised_target(&self) -> Vec<&Mask> {
        self.correspondence
            .iter()
            .map(|&j| &self.target.channels[j])
            .chain(std::iter::once(&self.target.channels[self.new_channel]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// (source channel, target channel)
    pub assignment: Vec<(usize, usize)>,
    pub total_cost: f64,
    pub unmatched_target: usize,
}

pub fn dice(a: &Mask, b: &Mask) -> f64 {
    let denom = a.area() + b.area();
    if denom == 0 {
        return 1.0;
    }
    2.0 * a.intersection(b) as f64 / denom as f64
}

/// 1 − Dice + 0.1 · centroid distance / grid diagonal.
pub fn match_cost(a: &Mask, b: &Mask) -> f64 {
    let diag = ((a.h * a.h + a.w * a.w) as f64).sqrt();
    let dist = match (a.centroid(), b.centroid()) {
        (Some((ra, ca)), Some((rb, cb))) => {
            (f64::from(ra - rb).powi(2) + f64::from(ca - cb).powi(2)).sqrt()
        }
        _ => diag,
    };
    1.0 - dice(a, b) + CENTROID_COST_WEIGHT * dist / diag
}

pub fn cost_matrix(src: &InstanceLayout, tgt: &InstanceLayout) -> Vec<Vec<f64>> {
    src.channels
        .iter()
        .map(|a| tgt.channels.iter().map(|b| match_cost(a, b)).collect())
        .collect()
}

/// Optimal one-to-one matching of source instances into a target with exactly one more
/// instance. Empty channels on either side are rejected.
pub fn match_layouts(src: &InstanceLayout, tgt: &InstanceLayout) -> Result<MatchResult> {
    if (src.h, src.w) != (tgt.h, tgt.w) {
        return Err(Error::ShapeMismatch("layouts differ in resolution".into()));
    }
    if src.count() != src.num_channels() || tgt.count() != tgt.num_channels() {
        return Err(Error::Precondition("layouts to match must not contain empty channels".into()));
    }
    if tgt.count() != src.count() + 1 {
        return Err(Error::Precondition(format!(
            "target has {} instances, source {}; expected exactly one more",
            tgt.count(),
            src.count()
        )));
    }
    match_with_costs(&cost_matrix(src, tgt))
}

/// Assignment on an explicit k × (k+1) cost matrix.
pub fn match_with_costs(cost: &[Vec<f64>]) -> Result<MatchResult> {
    let k = cost.len();
    if cost.iter().any(|r| r.len() != k + 1) {
        return Err(Error::Precondition("cost matrix must be k x (k+1)".into()));
    }
    let a = solve_assignment(cost)?;
    let mut used = vec![false; k + 1];
    a.cols_of_row.iter().for_each(|&j| used[j] = true);
    let unmatched_target = used.iter().position(|&u| !u).expect("one column left over");
    Ok(MatchResult {
        assignment: a.cols_of_row.iter().copied().enumerate().collect(),
        total_cost: a.total_cost,
        unmatched_target,
    })
}

/// Removes the smallest instances until `target` remain. Equal areas are broken by canonical
/// channel order (the later channel goes first). Surviving channels keep their order.
pub fn trim_layout(layout: &InstanceLayout, target: usize) -> Result<InstanceLayout> {
    let count = layout.count();
    if target == 0 || target >= count {
        return Err(Error::Precondition(format!(
            "trim needs 1 <= target < count, got target {target} with {count} instances"
        )));
    }
    let rank = canonical_rank(layout);
    let areas = layout.areas();
    let mut live: Vec<usize> = (0..layout.num_channels()).filter(|&i| areas[i] > 0).collect();
    // largest first; ties keep the canonically earlier channel
    live.sort_by(|&a, &b| areas[b].cmp(&areas[a]).then(rank[a].cmp(&rank[b])));
    let mut keep = live[..target].to_vec();
    keep.sort_unstable();
    InstanceLayout::new(
        layout.h,
        layout.w,
        keep.into_iter().map(|i| layout.channels[i].clone()).collect(),
    )
}

fn canonical_rank(layout: &InstanceLayout) -> Vec<usize> {
    let order = layout.canonical_order();
    let mut rank = vec![0; order.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    rank
}

/// Scales every channel about the grid centre by `scale` (nearest neighbour).
pub fn zoom_out(layout: &InstanceLayout, scale: f32) -> InstanceLayout {
    let (h, w) = (layout.h, layout.w);
    let map = |i: usize, n: usize| -> Option<usize> {
        let off = 0.5 * n as f32 * (1.0 - scale);
        let src = ((i as f32 + 0.5 - off) / scale).floor();
        (src >= 0.0 && (src as usize) < n).then_some(src as usize)
    };
    let channels = layout
        .channels
        .iter()
        .map(|m| {
            Mask::from_fn(h, w, |r, c| match (map(r, h), map(c, w)) {
                (Some(sr), Some(sc)) => m.get(sr, sc),
                _ => false,
            })
        })
        .collect();
    InstanceLayout { h, w, channels }
}

/// Network input: the layout's channels in order, zero-filled to 9.
pub fn encode_input(layout: &InstanceLayout) -> Result<Vec<f32>> {
    if layout.num_channels() > INPUT_CHANNELS {
        return Err(Error::Precondition(format!(
            "{} channels exceed the {INPUT_CHANNELS} network inputs",
            layout.num_channels()
        )));
    }
    let plane = layout.h * layout.w;
    let mut x = vec![0.0f32; INPUT_CHANNELS * plane];
    for (c, m) in layout.channels.iter().enumerate() {
        for (d, &v) in x[c * plane..(c + 1) * plane].iter_mut().zip(&m.data) {
            *d = f32::from(v);
        }
    }
    Ok(x)
}

/// Thresholds the first `channels` score planes at 0.5; a pixel above threshold in several
/// channels goes to the highest score (lowest index on ties).
pub fn binarize_scores(scores: &[f32], channels: usize, h: usize, w: usize) -> InstanceLayout {
    let plane = h * w;
    let mut masks = vec![Mask::zeros(h, w); channels];
    for p in 0..plane {
        let mut best: Option<(usize, f32)> = None;
        for c in 0..channels {
            let s = scores[c * plane + p];
            if s > BINARIZE_THRESHOLD && best.is_none_or(|(_, b)| s > b) {
                best = Some((c, s));
            }
        }
        if let Some((c, _)) = best {
            masks[c].data[p] = 1;
        }
    }
    InstanceLayout {
        h,
        w,
        channels: masks,
    }
}

/// One network pass: zoom out, predict k+1 channels, binarize, canonicalize.
pub fn insert_once(layout: &InstanceLayout, model: &RelayoutModel) -> Result<InstanceLayout> {
    let cur = layout.clone().compact();
    let k = cur.num_channels();
    let padded = zoom_out(&cur, ZOOM_OUT_SCALE);
    let x = encode_input(&padded)?;
    let scores = relayout_net::forward(model, &x, cur.h, cur.w)?;
    Ok(binarize_scores(&scores, k + 1, cur.h, cur.w).compact().canonicalized())
}

#[derive(Debug, Clone)]
pub struct Correction {
    pub layout: InstanceLayout,
    pub iterations: usize,
}

/// Brings `layout` to `target` instances: trims when over, repeats network insertion (with
/// cumulative zoom-out) when under, returns the input unchanged when equal.
pub fn correct_layout(layout: &InstanceLayout, target: usize, model: &RelayoutModel) -> Result<Correction> {
    if target == 0 || target > MAX_COUNT {
        return Err(Error::Precondition(format!("target {target} outside [1, {MAX_COUNT}]")));
    }
    let count = layout.count();
    if count == 0 {
        return Err(Error::Precondition("layout has no instances".into()));
    }
    if count > target {
        return Ok(Correction {
            layout: trim_layout(layout, target)?,
            iterations: 0,
        });
    }
    if count == target {
        return Ok(Correction {
            layout: layout.clone(),
            iterations: 0,
        });
    }
    let mut cur = layout.clone().compact().canonicalized();
    let mut best = cur.clone();
    for it in 1..=MAX_INSERT_ITERATIONS {
        cur = insert_once(&cur, model)?;
        let c = cur.count();
        if c > target {
            cur = trim_layout(&cur, target)?;
        }
        if cur.count() == target {
            return Ok(Correction {
                layout: cur,
                iterations: it,
            });
        }
        if target.abs_diff(cur.count()) <= target.abs_diff(best.count()) {
            best = cur.clone();
        }
        if cur.count() == 0 {
            break;
        }
    }
    Err(Error::IterationCap {
        iterations: MAX_INSERT_ITERATIONS,
        achieved: best.count(),
        target,
        best: Box::new(best),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(r: usize, c: usize, s: usize) -> Mask {
        Mask::from_fn(32, 32, |y, x| y >= r && y < r + s && x >= c && x < c + s)
    }

    fn rect(r: usize, c: usize, hh: usize, ww: usize) -> Mask {
        Mask::from_fn(32, 32, |y, x| y >= r && y < r + hh && x >= c && x < c + ww)
    }

    #[test]
    fn trim_removes_smallest() {
        // areas 30, 20, 5
        let l = InstanceLayout::new(32, 32, vec![rect(0, 0, 5, 6), rect(10, 0, 4, 5), rect(20, 0, 1, 5)]).unwrap();
        let t = trim_layout(&l, 2).unwrap();
        assert_eq!(t.areas(), vec![30, 20]);
        assert_eq!(t.channels[0], l.channels[0]);
        assert_eq!(t.channels[1], l.channels[1]);
        assert!(trim_layout(&l, 3).is_err());
        assert!(trim_layout(&l, 0).is_err());
    }

    #[test]
    fn trim_tie_keeps_canonically_first() {
        // two 10-px channels; the one at row 20 comes later canonically
        let l = InstanceLayout::new(32, 32, vec![rect(20, 0, 2, 5), rect(2, 0, 2, 5), rect(10, 10, 2, 2)]).unwrap();
        let t = trim_layout(&l, 1).unwrap();
        assert_eq!(t.channels, vec![rect(2, 0, 2, 5)]);
    }

    #[test]
    fn match_identical_square_plus_distant() {
        let src = InstanceLayout::new(32, 32, vec![square(4, 4, 2)]).unwrap();
        let tgt = InstanceLayout::new(32, 32, vec![square(25, 25, 2), square(4, 4, 2)]).unwrap();
        let m = match_layouts(&src, &tgt).unwrap();
        assert_eq!(m.assignment, vec![(0, 1)]);
        assert_eq!(m.unmatched_target, 0);
        assert!(m.total_cost.abs() < 1e-12);
        assert!(match_layouts(&src, &src).is_err());
    }

    #[test]
    fn injected_costs() {
        let m = match_with_costs(&[vec![0.1, 0.9, 5.0], vec![0.8, 0.2, 5.0]]).unwrap();
        assert_eq!(m.assignment, vec![(0, 0), (1, 1)]);
        assert_eq!(m.unmatched_target, 2);
        assert!((m.total_cost - 0.3).abs() < 1e-15);
    }

    #[test]
    fn pair_from_layouts_validates() {
        let src = InstanceLayout::new(32, 32, vec![square(2, 2, 3), square(2, 10, 3)]).unwrap();
        let tgt = InstanceLayout::new(32, 32, vec![square(2, 2, 3), square(2, 10, 3), square(2, 18, 3)]).unwrap();
        let p = LayoutPair::from_layouts(src, tgt).unwrap();
        assert_eq!(p.correspondence, vec![0, 1]);
        assert_eq!(p.new_channel, 2);
        let mut bad = p.clone();
        bad.new_channel = 0;
        assert!(bad.validate().is_err());
        let mut bad = p;
        bad.correspondence = vec![1, 1];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zoom_out_shrinks_towards_centre() {
        let l = InstanceLayout::new(32, 32, vec![square(0, 0, 4), square(28, 28, 4)]).unwrap();
        let z = zoom_out(&l, ZOOM_OUT_SCALE);
        assert_eq!(z.count(), 2);
        let (r, c) = z.channels[0].centroid().unwrap();
        assert!(r > 1.5 && c > 1.5);
        assert!(z.union().area() <= l.union().area());
        assert_eq!(zoom_out(&l, 1.0), l);
    }

    #[test]
    fn binarize_resolves_contested_pixels() {
        let (h, w) = (1, 3);
        let scores = [0.9, 0.6, 0.1, 0.7, 0.8, 0.4];
        let l = binarize_scores(&scores, 2, h, w);
        assert_eq!(l.channels[0].data, vec![1, 0, 0]);
        assert_eq!(l.channels[1].data, vec![0, 1, 0]);
        assert!(l.is_disjoint());
    }

    #[test]
    fn correct_layout_trims_and_keeps() {
        let model = RelayoutModel::zeros(Default::default());
        let four = InstanceLayout::new(32, 32, (0..4).map(|i| square(2, 2 + 6 * i, 2 + i)).collect()).unwrap();
        let same = correct_layout(&four, 4, &model).unwrap();
        assert_eq!(same.layout, four);
        assert_eq!(same.iterations, 0);
        let six = InstanceLayout::new(32, 32, (0..6).map(|i| square(2 + 5 * i, 2, 1 + i)).collect()).unwrap();
        let trimmed = correct_layout(&six, 4, &model).unwrap().layout;
        // the last square is clipped by the border to 30 px
        assert_eq!(trimmed.areas(), vec![9, 16, 25, 30]);
        assert!(correct_layout(&four, 11, &model).is_err());
        assert!(correct_layout(&four, 0, &model).is_err());
    }

    #[test]
    fn zero_model_insertion_hits_cap() {
        // all scores 0.5 never clear the strict threshold, so every pass empties the layout
        let model = RelayoutModel::zeros(Default::default());
        let one = InstanceLayout::new(32, 32, vec![square(10, 10, 4)]).unwrap();
        match correct_layout(&one, 3, &model) {
            Err(Error::IterationCap { target, best, .. }) => {
                assert_eq!(target, 3);
                assert_eq!(best.count(), 1);
            }
            other => panic!("expected iteration cap, got {other:?}"),
        }
    }
}
