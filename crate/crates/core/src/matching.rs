//! Pixel-to-representation neighborhood matching.
//!
//! Each view's feature-map cells are mapped to canonical points; a cell pair
//! across two views is a positive when its canonical distance is below
//! `t_pos`.

use crate::augment::{CanonicalPoint, ViewGeometry};
use crate::error::{CloveError, Result};

/// Canonical location of every feature cell of a view, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoints {
    pub points: Vec<CanonicalPoint>,
    pub valid: Vec<bool>,
    pub f_h: usize,
    pub f_w: usize,
}

impl GridPoints {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the cell `(row, col)` after a horizontal flip of the view.
    pub fn mirror_index(&self, index: usize) -> usize {
        let (r, c) = (index / self.f_w, index % self.f_w);
        r * self.f_w + (self.f_w - 1 - c)
    }
}

/// Index pairs `(i, j)` whose canonical points are closer than `t_pos`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<(usize, usize)>,
    pub t_pos: f64,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn build_grid(geom: &ViewGeometry, f_h: usize, f_w: usize) -> Result<GridPoints> {
    if f_h == 0 || f_w == 0 {
        return Err(CloveError::Contract(format!("grid must be non-empty, got {f_h}x{f_w}")));
    }
    let mut points = Vec::with_capacity(f_h * f_w);
    for r in 0..f_h {
        for c in 0..f_w {
            let px = (c as f64 + 0.5) / f_w as f64 * geom.out_w as f64;
            let py = (r as f64 + 0.5) / f_h as f64 * geom.out_h as f64;
            points.push(geom.view_to_canonical(px, py));
        }
    }
    let valid = points.iter().map(CanonicalPoint::in_frame).collect();
    Ok(GridPoints {
        points,
        valid,
        f_h,
        f_w,
    })
}

/// Sweep over view-2 points sorted by x, so only candidates inside the
/// `[x - t_pos, x + t_pos]` band get an exact distance test.
pub fn match_pairs(g1: &GridPoints, g2: &GridPoints, t_pos: f64) -> Result<MatchSet> {
    if !(t_pos > 0.0) || !t_pos.is_finite() {
        return Err(CloveError::config("t_pos", format!("must be a positive number, got {t_pos}")));
    }
    let mut order: Vec<usize> = (0..g2.len()).filter(|&j| g2.valid[j]).collect();
    order.sort_by(|&a, &b| g2.points[a].x.total_cmp(&g2.points[b].x).then(a.cmp(&b)));
    let xs: Vec<f64> = order.iter().map(|&j| g2.points[j].x).collect();

    let mut pairs = Vec::new();
    let mut row = Vec::new();
    for (i, p) in g1.points.iter().enumerate() {
        if !g1.valid[i] {
            continue;
        }
        let start = xs.partition_point(|&x| x <= p.x - t_pos);
        row.clear();
        for k in start..order.len() {
            if xs[k] >= p.x + t_pos {
                break;
            }
            let j = order[k];
            if p.distance(&g2.points[j]) < t_pos {
                row.push(j);
            }
        }
        row.sort_unstable();
        pairs.extend(row.iter().map(|&j| (i, j)));
    }
    Ok(MatchSet { pairs, t_pos })
}
