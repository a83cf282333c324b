use super::{BBox, LayoutError, Result};

/// Binary raster. Pixel (r, c) covers [c/W, (c+1)/W) × [r/H, (r+1)/H) in
/// normalized coordinates.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Result<Mask> {
        if height == 0 || width == 0 {
            return Err(LayoutError::InvalidMask(format!("dimensions {height}×{width}")));
        }
        Ok(Mask { height, width, bits: vec![false; height * width] })
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Mask> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(LayoutError::InvalidMask(format!("{} bits for {height}×{width}", bits.len())));
        }
        Ok(Mask { height, width, bits })
    }

    pub fn full(height: usize, width: usize) -> Result<Mask> {
        let mut m = Mask::new(height, width)?;
        m.bits.iter_mut().for_each(|b| *b = true);
        Ok(m)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.width + c] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Inclusive pixel bounds (rmin, cmin, rmax, cmax) of the set pixels.
    pub fn pixel_bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    b = Some(match b {
                        None => (r, c, r, c),
                        Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                    });
                }
            }
        }
        b
    }

    /// Tight normalized box around the set pixels, following the pixel-edge convention.
    pub fn tight_box(&self) -> Option<BBox> {
        let (r0, c0, r1, c1) = self.pixel_bounds()?;
        let (h, w) = (self.height as f64, self.width as f64);
        Some(BBox { x1: c0 as f64 / w, y1: r0 as f64 / h, x2: (c1 + 1) as f64 / w, y2: (r1 + 1) as f64 / h })
    }

    /// Filled rectangle: pixels whose centres fall inside the half-open box.
    pub fn rasterize_box(b: &BBox, height: usize, width: usize) -> Result<Mask> {
        let mut m = Mask::new(height, width)?;
        for r in 0..height {
            let cy = (r as f64 + 0.5) / height as f64;
            if cy < b.y1 || cy >= b.y2 {
                continue;
            }
            for c in 0..width {
                let cx = (c as f64 + 0.5) / width as f64;
                if cx >= b.x1 && cx < b.x2 {
                    m.set(r, c, true);
                }
            }
        }
        Ok(m)
    }

    /// Nearest-neighbour resampling by pixel centres.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Mask> {
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let mut m = Mask::new(height, width)?;
        for r in 0..height {
            let sr = ((r as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            for c in 0..width {
                let sc = ((c as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                m.set(r, c, self.get(sr.min(self.height - 1), sc.min(self.width - 1)));
            }
        }
        Ok(m)
    }

    /// Max-pool onto a coarser (or equal) grid: an output cell is set when any
    /// input pixel under it is set.
    pub fn max_pool(&self, height: usize, width: usize) -> Result<Mask> {
        if height > self.height || width > self.width {
            return self.resize_nearest(height, width);
        }
        let mut m = Mask::new(height, width)?;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    m.set(r * height / self.height, c * width / self.width, true);
                }
            }
        }
        Ok(m)
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.check_same_grid(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect();
        Mask::from_bits(self.height, self.width, bits)
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    pub fn iou(&self, other: &Mask) -> Result<f64> {
        self.check_same_grid(other)?;
        let inter = self.intersection_count(other);
        let union = self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count();
        Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
    }

    fn check_same_grid(&self, other: &Mask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(LayoutError::InvalidMask(format!(
                "grid {}×{} vs {}×{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// 4-connected components, in raster order of their first pixel.
    pub fn components(&self) -> Vec<Mask> {
        let mut label = vec![usize::MAX; self.bits.len()];
        let mut out = Vec::new();
        let mut stack = Vec::new();
        for start in 0..self.bits.len() {
            if !self.bits[start] || label[start] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut comp = vec![false; self.bits.len()];
            label[start] = id;
            stack.push(start);
            while let Some(i) = stack.pop() {
                comp[i] = true;
                let (r, c) = (i / self.width, i % self.width);
                let mut visit = |j: usize| {
                    if self.bits[j] && label[j] == usize::MAX {
                        label[j] = id;
                        stack.push(j);
                    }
                };
                if r > 0 {
                    visit(i - self.width);
                }
                if r + 1 < self.height {
                    visit(i + self.width);
                }
                if c > 0 {
                    visit(i - 1);
                }
                if c + 1 < self.width {
                    visit(i + 1);
                }
            }
            out.push(Mask { height: self.height, width: self.width, bits: comp });
        }
        out
    }

    /// Set pixels as a 0/1 float vector in row-major order.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_box_rasterizes_to_central_block() {
        let b = BBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        let m = Mask::rasterize_box(&b, 8, 8).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(m.get(r, c), (2..6).contains(&r) && (2..6).contains(&c));
            }
        }
    }

    #[test]
    fn single_pixel_tight_box() {
        let mut m = Mask::new(8, 8).unwrap();
        m.set(3, 5, true);
        let b = m.tight_box().unwrap();
        assert_eq!(b.to_array(), [5.0 / 8.0, 3.0 / 8.0, 6.0 / 8.0, 4.0 / 8.0]);
    }

    #[test]
    fn max_pool_of_corner_block() {
        let mut m = Mask::new(16, 16).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                m.set(r, c, true);
            }
        }
        let p = m.max_pool(8, 8).unwrap();
        assert_eq!(p.area(), 1);
        assert!(p.get(0, 0));
    }

    #[test]
    fn components_use_four_connectivity() {
        let mut m = Mask::new(4, 4).unwrap();
        m.set(0, 0, true);
        m.set(1, 1, true);
        m.set(2, 1, true);
        assert_eq!(m.components().len(), 2);
    }

    #[test]
    fn rejects_zero_dimensions() {
        assert!(Mask::new(0, 3).is_err());
        assert!(Mask::from_bits(2, 2, vec![true; 3]).is_err());
    }
}
