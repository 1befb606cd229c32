//! 2D count histograms for qualitative sample comparison, written as CSV
//! grids or 8-bit PGM images.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// bins x bins count grid over [xmin, xmax] x [ymin, ymax]. Row 0 is the top
/// of the image (largest y); the upper bounds are inclusive so corner points
/// land in the edge bins.
#[derive(Clone, Debug)]
pub struct HistogramGrid {
    pub bins: usize,
    pub bounds: [f64; 4],
    counts: Vec<u64>,
}

impl HistogramGrid {
    /// Bin the points; out-of-bounds points are dropped and counted in the
    /// second return value. `bounds` defaults to the data's min/max box.
    pub fn build(points: &Tensor, bins: usize, bounds: Option<[f64; 4]>) -> Result<(Self, usize)> {
        if bins < 2 {
            return Err(Error::InvalidArgument(format!("bins must be >= 2, got {bins}")));
        }
        if points.shape().len() != 2 || points.shape()[1] != 2 {
            return Err(Error::InvalidShape(format!(
                "histogram expects (n, 2) points, got {:?}",
                points.shape()
            )));
        }
        let bounds = match bounds {
            Some(b) => b,
            None => {
                if points.shape()[0] == 0 {
                    return Err(Error::EmptyBatch("histogram auto bounds".to_string()));
                }
                let mut b = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
                for p in points.rows() {
                    b[0] = b[0].min(p[0]);
                    b[1] = b[1].max(p[0]);
                    b[2] = b[2].min(p[1]);
                    b[3] = b[3].max(p[1]);
                }
                b
            }
        };
        let [xmin, xmax, ymin, ymax] = bounds;
        if !(xmin < xmax && ymin < ymax) {
            return Err(Error::InvalidArgument(format!(
                "bounds must satisfy xmin < xmax and ymin < ymax, got {bounds:?}"
            )));
        }
        let mut counts = vec![0u64; bins * bins];
        let mut oob = 0usize;
        let fbins = bins as f64;
        for p in points.rows() {
            let (x, y) = (p[0], p[1]);
            if x < xmin || x > xmax || y < ymin || y > ymax {
                oob += 1;
                continue;
            }
            let ix = (((x - xmin) / (xmax - xmin) * fbins) as usize).min(bins - 1);
            let iy = (((y - ymin) / (ymax - ymin) * fbins) as usize).min(bins - 1);
            counts[(bins - 1 - iy) * bins + ix] += 1;
        }
        Ok((
            HistogramGrid {
                bins,
                bounds,
                counts,
            },
            oob,
        ))
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.counts.chunks(self.bins) {
            for (k, c) in row.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                out.push_str(&c.to_string());
            }
            out.push('\n');
        }
        out
    }

    /// Binary P5 image, counts linearly mapped to 0..=255 by the grid max.
    pub fn to_pgm(&self) -> Vec<u8> {
        let max = self.counts.iter().max().copied().unwrap_or(0);
        let mut out = format!("P5\n{} {}\n255\n", self.bins, self.bins).into_bytes();
        for &c in &self.counts {
            let v = if max == 0 {
                0u8
            } else {
                ((c as f64 / max as f64) * 255.0).round() as u8
            };
            out.push(v);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_corner_points_fill_two_by_two() {
        let pts = Tensor::matrix(4, 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
        let (grid, oob) = HistogramGrid::build(&pts, 2, Some([0.0, 1.0, 0.0, 1.0])).unwrap();
        assert_eq!(oob, 0);
        assert_eq!(grid.counts(), &[1, 1, 1, 1]);
        assert_eq!(grid.total(), 4);
    }

    #[test]
    fn out_of_bounds_points_are_dropped() {
        let pts = Tensor::matrix(3, 2, vec![5.0, 5.0, -3.0, 0.5, 0.5, 0.5]).unwrap();
        let (grid, oob) = HistogramGrid::build(&pts, 2, Some([0.0, 1.0, 0.0, 1.0])).unwrap();
        assert_eq!(oob, 2);
        assert_eq!(grid.total(), 1);
    }

    #[test]
    fn row_zero_is_top_of_image() {
        let pts = Tensor::matrix(1, 2, vec![0.1, 0.9]).unwrap();
        let (grid, _) = HistogramGrid::build(&pts, 2, Some([0.0, 1.0, 0.0, 1.0])).unwrap();
        // High y lands in row 0, low x in column 0.
        assert_eq!(grid.counts(), &[1, 0, 0, 0]);
    }

    #[test]
    fn bins_and_bounds_validated() {
        let pts = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(HistogramGrid::build(&pts, 1, None).is_err());
        assert!(HistogramGrid::build(&pts, 4, Some([1.0, 0.0, 0.0, 1.0])).is_err());
    }

    #[test]
    fn pgm_scales_by_grid_max() {
        let pts = Tensor::matrix(3, 2, vec![0.1, 0.1, 0.2, 0.2, 0.9, 0.9]).unwrap();
        let (grid, _) = HistogramGrid::build(&pts, 2, Some([0.0, 1.0, 0.0, 1.0])).unwrap();
        let pgm = grid.to_pgm();
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        let body = &pgm[pgm.len() - 4..];
        // Two points in the bottom-left bin (=max 255), one top-right (128).
        assert_eq!(body, &[0, 128, 255, 0]);
    }
}
