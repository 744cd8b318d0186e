//! Dense 2-D grids: grayscale images in [0,1] and binary masks.

use std::path::Path;

use crate::error::{Error, Result};

/// Grayscale image, row-major, values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Grid {
    pub fn zeros(h: usize, w: usize) -> Self {
        Grid { h, w, data: vec![0.0; h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "grid {}x{} needs {} values, got {}",
                h,
                w,
                h * w,
                data.len()
            )));
        }
        Ok(Grid { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(f(r, c));
            }
        }
        Grid { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.w + c] = v;
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Sample with reflection at the borders (reflect-101, no edge repeat).
    pub fn sample_reflect(&self, r: isize, c: isize) -> f32 {
        let rr = reflect_index(r, self.h);
        let cc = reflect_index(c, self.w);
        self.get(rr, cc)
    }

    /// Bilinear sample at fractional coordinates, clamped to the frame.
    pub fn sample_bilinear(&self, r: f32, c: f32) -> f32 {
        let r = r.clamp(0.0, (self.h - 1) as f32);
        let c = c.clamp(0.0, (self.w - 1) as f32);
        let r0 = r.floor() as usize;
        let c0 = c.floor() as usize;
        let r1 = (r0 + 1).min(self.h - 1);
        let c1 = (c0 + 1).min(self.w - 1);
        let fr = r - r0 as f32;
        let fc = c - c0 as f32;
        let top = self.get(r0, c0) * (1.0 - fc) + self.get(r0, c1) * fc;
        let bot = self.get(r1, c0) * (1.0 - fc) + self.get(r1, c1) * fc;
        top * (1.0 - fr) + bot * fr
    }

    /// Bilinear resize (half-pixel centers).
    pub fn resize_bilinear(&self, th: usize, tw: usize) -> Result<Self> {
        if th == 0 || tw == 0 {
            return Err(Error::invalid("resize target must be positive"));
        }
        if (th, tw) == (self.h, self.w) {
            return Ok(self.clone());
        }
        let sr = self.h as f32 / th as f32;
        let sc = self.w as f32 / tw as f32;
        Ok(Grid::from_fn(th, tw, |r, c| {
            let src_r = (r as f32 + 0.5) * sr - 0.5;
            let src_c = (c as f32 + 0.5) * sc - 0.5;
            self.sample_bilinear(src_r, src_c).clamp(0.0, 1.0)
        }))
    }

    /// Cut the inclusive box [r0..=r1] x [c0..=c1].
    pub fn crop(&self, r0: usize, c0: usize, r1: usize, c1: usize) -> Result<Self> {
        if r1 >= self.h || c1 >= self.w || r0 > r1 || c0 > c1 {
            return Err(Error::invalid(format!(
                "crop box ({r0},{c0})..({r1},{c1}) outside {}x{} image",
                self.h, self.w
            )));
        }
        Ok(Grid::from_fn(r1 - r0 + 1, c1 - c0 + 1, |r, c| self.get(r0 + r, c0 + c)))
    }

    pub fn center_crop(&self, th: usize, tw: usize) -> Result<Self> {
        if th > self.h || tw > self.w {
            return Err(Error::invalid("center crop larger than source"));
        }
        let r0 = (self.h - th) / 2;
        let c0 = (self.w - tw) / 2;
        self.crop(r0, c0, r0 + th - 1, c0 + tw - 1)
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::GrayImage::new(self.w as u32, self.h as u32);
        for r in 0..self.h {
            for c in 0..self.w {
                let v = (self.get(r, c).clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put_pixel(c as u32, r as u32, image::Luma([v]));
            }
        }
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Grid::from_vec(h, w, data)
    }
}

fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Binary mask, row-major, values 0/1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitGrid {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl BitGrid {
    pub fn zeros(h: usize, w: usize) -> Self {
        BitGrid { h, w, data: vec![0; h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} needs {} values, got {}",
                h,
                w,
                h * w,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(BitGrid { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(f(r, c) as u8);
            }
        }
        BitGrid { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.w + c] != 0
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.w + c] = v as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn crop(&self, r0: usize, c0: usize, r1: usize, c1: usize) -> Result<Self> {
        if r1 >= self.h || c1 >= self.w || r0 > r1 || c0 > c1 {
            return Err(Error::invalid("crop box outside mask"));
        }
        Ok(BitGrid::from_fn(r1 - r0 + 1, c1 - c0 + 1, |r, c| self.get(r0 + r, c0 + c)))
    }

    pub fn center_crop(&self, th: usize, tw: usize) -> Result<Self> {
        if th > self.h || tw > self.w {
            return Err(Error::invalid("center crop larger than source"));
        }
        let r0 = (self.h - th) / 2;
        let c0 = (self.w - tw) / 2;
        self.crop(r0, c0, r0 + th - 1, c0 + tw - 1)
    }

    /// 0 -> black, 1 -> 255, matching the manifest mask convention.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::GrayImage::new(self.w as u32, self.h as u32);
        for r in 0..self.h {
            for c in 0..self.w {
                img.put_pixel(c as u32, r as u32, image::Luma([if self.get(r, c) { 255 } else { 0 }]));
            }
        }
        img.save(path)?;
        Ok(())
    }

    /// Anything >= 128 counts as foreground.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.as_raw().iter().map(|&v| (v >= 128) as u8).collect();
        BitGrid::from_vec(h, w, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_resize_preserves_constants() {
        let g = Grid::from_fn(2, 2, |_, _| 0.7);
        let up = g.resize_bilinear(4, 4).unwrap();
        assert!(up.as_slice().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn resize_identity_is_exact() {
        let g = Grid::from_fn(5, 7, |r, c| (r * 7 + c) as f32 / 34.0);
        assert_eq!(g.resize_bilinear(5, 7).unwrap(), g);
    }

    #[test]
    fn crop_is_bit_exact_subgrid() {
        let g = Grid::from_fn(6, 6, |r, c| (r * 6 + c) as f32 / 35.0);
        let sub = g.crop(1, 2, 3, 4).unwrap();
        assert_eq!(sub.dims(), (3, 3));
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(sub.get(r, c), g.get(r + 1, c + 2));
            }
        }
    }

    #[test]
    fn reflect_indexing_mirrors_without_edge_repeat() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(2, 5), 2);
    }
}
