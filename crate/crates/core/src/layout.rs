//! Multi-channel instance layouts: one binary mask per object instance.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::grid::Mask;

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceLayout {
    pub h: usize,
    pub w: usize,
    pub channels: Vec<Mask>,
}

impl InstanceLayout {
    pub fn new(h: usize, w: usize, channels: Vec<Mask>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidShape(format!("layout {h}x{w}")));
        }
        if let Some(bad) = channels.iter().find(|m| m.h != h || m.w != w) {
            return Err(Error::ShapeMismatch(format!(
                "channel {}x{} in {h}x{w} layout",
                bad.h, bad.w
            )));
        }
        Ok(Self { h, w, channels })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            channels: Vec::new(),
        }
    }

    /// Number of non-empty channels.
    pub fn count(&self) -> usize {
        self.channels.iter().filter(|m| !m.is_empty()).count()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn areas(&self) -> Vec<usize> {
        self.channels.iter().map(Mask::area).collect()
    }

    pub fn centroids(&self) -> Vec<Option<(f32, f32)>> {
        self.channels.iter().map(Mask::centroid).collect()
    }

    pub fn union(&self) -> Mask {
        let mut u = Mask::zeros(self.h, self.w);
        for m in &self.channels {
            u.union_with(m);
        }
        u
    }

    pub fn is_disjoint(&self) -> bool {
        let mut seen = vec![false; self.h * self.w];
        for m in &self.channels {
            for (s, &v) in seen.iter_mut().zip(&m.data) {
                if v != 0 {
                    if *s {
                        return false;
                    }
                    *s = true;
                }
            }
        }
        true
    }

    /// Channel permutation that puts non-empty channels first, ordered by centroid row then
    /// column; empty channels keep their relative order at the end.
    pub fn canonical_order(&self) -> Vec<usize> {
        let cents = self.centroids();
        let mut idx: Vec<usize> = (0..self.channels.len()).collect();
        idx.sort_by(|&a, &b| match (cents[a], cents[b]) {
            (Some((ra, ca)), Some((rb, cb))) => ra
                .total_cmp(&rb)
                .then(ca.total_cmp(&cb))
                .then(a.cmp(&b)),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => a.cmp(&b),
        });
        idx
    }

    pub fn canonicalize(&mut self) {
        let order = self.canonical_order();
        let mut old: Vec<Option<Mask>> = self.channels.drain(..).map(Some).collect();
        self.channels = order
            .into_iter()
            .map(|i| old[i].take().expect("permutation"))
            .collect();
    }

    pub fn canonicalized(mut self) -> Self {
        self.canonicalize();
        self
    }

    /// Drops empty channels.
    pub fn compact(mut self) -> Self {
        self.channels.retain(|m| !m.is_empty());
        self
    }

    pub fn hflip(&self) -> Self {
        Self {
            h: self.h,
            w: self.w,
            channels: self.channels.iter().map(Mask::hflip).collect(),
        }
    }

    pub fn resize_nearest(&self, h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            channels: self
                .channels
                .iter()
                .map(|m| m.resize_nearest(h, w))
                .collect(),
        }
    }

    /// Label image: `Some(channel)` per pixel, first channel wins on overlap.
    pub fn labels(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.h * self.w];
        for (k, m) in self.channels.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(&m.data) {
                if v != 0 && o.is_none() {
                    *o = Some(k);
                }
            }
        }
        out
    }
}
