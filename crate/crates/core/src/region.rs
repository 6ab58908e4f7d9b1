//! Axis-aligned integer boxes in image pixel space.

use serde::Serialize;

use crate::error::{Error, Result};

/// Half-open box `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct RegionBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl RegionBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Data(format!("empty box ({x0},{y0},{x1},{y1})")));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// A `size x size` square centered on pixel `(cx, cy)` and translated so
    /// it lies inside a `width x height` image. The square is never shrunk
    /// unless it is larger than the image itself.
    pub fn square_around(cx: usize, cy: usize, size: usize, width: usize, height: usize) -> Self {
        let place = |c: usize, extent: usize| {
            let side = size.min(extent);
            let start = (c as isize - (side / 2) as isize).clamp(0, (extent - side) as isize) as usize;
            (start, start + side)
        };
        let (x0, x1) = place(cx, width);
        let (y0, y1) = place(cy, height);
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }

    /// Mirror image about the vertical axis of an image `width` pixels wide.
    pub fn hflip(&self, width: usize) -> Self {
        Self {
            x0: width - self.x1,
            x1: width - self.x0,
            ..*self
        }
    }

    /// The `cells x cells` tiling of a `side x side` image, row-major.
    pub fn grid(side: usize, cells: usize) -> Vec<Self> {
        let edge = |i: usize| i * side / cells;
        let mut out = Vec::with_capacity(cells * cells);
        for r in 0..cells {
            for c in 0..cells {
                out.push(Self {
                    x0: edge(c),
                    y0: edge(r),
                    x1: edge(c + 1),
                    y1: edge(r + 1),
                });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_square() {
        assert_eq!(RegionBox::square_around(32, 32, 18, 64, 64), RegionBox::new(23, 23, 41, 41).unwrap());
    }

    #[test]
    fn translated_at_border() {
        assert_eq!(RegionBox::square_around(0, 0, 18, 64, 64), RegionBox::new(0, 0, 18, 18).unwrap());
        assert_eq!(RegionBox::square_around(63, 2, 18, 64, 64), RegionBox::new(46, 0, 64, 18).unwrap());
    }

    #[test]
    fn mirror() {
        let b = RegionBox::new(10, 20, 28, 38).unwrap();
        assert_eq!(b.hflip(64), RegionBox::new(36, 20, 54, 38).unwrap());
        assert_eq!(b.hflip(64).hflip(64), b);
    }

    #[test]
    fn four_by_four_tiling_covers_exactly() {
        let tiles = RegionBox::grid(64, 4);
        assert_eq!(tiles.len(), 16);
        let mut hits = vec![0u8; 64 * 64];
        for t in &tiles {
            assert_eq!((t.width(), t.height()), (16, 16));
            for y in t.y0..t.y1 {
                for x in t.x0..t.x1 {
                    hits[y * 64 + x] += 1;
                }
            }
        }
        assert!(hits.iter().all(|&h| h == 1));
    }
}
