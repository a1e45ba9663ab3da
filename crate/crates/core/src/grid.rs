//! Dense 2-D grids: float score maps and binary masks, row-major.

use crate::error::{Error, Result};

/// Side length of the canonical working grid.
pub const CANONICAL_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Map2 {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Map2 {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(Error::InvalidShape(format!(
                "map {h}x{w} with {} values",
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.w + c]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Map2 {
        if h == self.h && w == self.w {
            return self.clone();
        }
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            let (r0, r1, fr) = bilinear_coord(r, h, self.h);
            for c in 0..w {
                let (c0, c1, fc) = bilinear_coord(c, w, self.w);
                let top = self.get(r0, c0) * (1.0 - fc) + self.get(r0, c1) * fc;
                let bot = self.get(r1, c0) * (1.0 - fc) + self.get(r1, c1) * fc;
                out.push(top * (1.0 - fr) + bot * fr);
            }
        }
        Map2 { h, w, data: out }
    }
}

/// Source sample positions for output index `i` when mapping `src` cells onto `dst` cells.
pub(crate) fn bilinear_coord(i: usize, dst: usize, src: usize) -> (usize, usize, f32) {
    let pos = ((i as f32 + 0.5) * src as f32 / dst as f32 - 0.5).max(0.0);
    let i0 = (pos.floor() as usize).min(src - 1);
    let i1 = (i0 + 1).min(src - 1);
    (i0, i1, pos - i0 as f32)
}

#[inline]
pub(crate) fn nearest_coord(i: usize, dst: usize, src: usize) -> usize {
    ((i * src) / dst).min(src - 1)
}

/// Binary mask; every cell is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(Error::InvalidShape(format!(
                "mask {h}x{w} with {} values",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidShape("mask values must be 0 or 1".into()));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(u8::from(f(r, c)));
            }
        }
        Self { h, w, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.w + c] != 0
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, on: bool) {
        self.data[r * self.w + c] = u8::from(on);
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Mean (row, col) of set pixels, `None` when empty.
    pub fn centroid(&self) -> Option<(f32, f32)> {
        let (mut sr, mut sc, mut n) = (0usize, 0usize, 0usize);
        for r in 0..self.h {
            for c in 0..self.w {
                if self.get(r, c) {
                    sr += r;
                    sc += c;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sr as f32 / n as f32, sc as f32 / n as f32))
    }

    pub fn intersection(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a != 0 && b != 0)
            .count()
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    pub fn hflip(&self) -> Mask {
        Mask::from_fn(self.h, self.w, |r, c| self.get(r, self.w - 1 - c))
    }

    pub fn resize_nearest(&self, h: usize, w: usize) -> Mask {
        if h == self.h && w == self.w {
            return self.clone();
        }
        Mask::from_fn(h, w, |r, c| {
            self.get(nearest_coord(r, h, self.h), nearest_coord(c, w, self.w))
        })
    }

    pub fn to_map(&self) -> Map2 {
        Map2 {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f32::from(v)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_identity_and_constant() {
        let m = Map2::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.resize_bilinear(2, 2), m);
        let c = Map2::new(3, 5, vec![0.25; 15]).unwrap();
        let up = c.resize_bilinear(32, 32);
        assert!(up.data.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn bilinear_upsample_stays_within_range() {
        let m = Map2::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let up = m.resize_bilinear(8, 8);
        assert_eq!(up.get(0, 0), 0.0);
        assert_eq!(up.get(0, 7), 1.0);
        assert!(up.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn nearest_downsample_keeps_blocks() {
        let m = Mask::from_fn(64, 64, |r, c| r < 32 && c >= 32);
        let d = m.resize_nearest(32, 32);
        assert_eq!(d.area(), 256);
        assert!(d.get(0, 31) && !d.get(31, 0));
    }

    #[test]
    fn centroid_and_flip() {
        let m = Mask::from_fn(4, 4, |r, c| r == 1 && c <= 1);
        assert_eq!(m.centroid(), Some((1.0, 0.5)));
        assert_eq!(m.hflip().centroid(), Some((1.0, 2.5)));
        assert_eq!(Mask::zeros(3, 3).centroid(), None);
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(Mask::new(1, 2, vec![0, 2]).is_err());
        assert!(Mask::new(1, 2, vec![0]).is_err());
    }
}
