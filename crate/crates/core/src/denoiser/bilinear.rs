//! Bilinear resampling of feature grids and the matching adjoints.
//!
//! Coordinates are `(row, col)` in pixel units. Resizing uses the
//! align-corners convention, so corner pixels map onto corner pixels and
//! affine fields are reproduced exactly.

use crate::error::{Error, Result};
use crate::tensor::{Grid, Shape};

/// Interpolation taps along one axis: `(lo, hi, w_lo, w_hi)`.
#[inline]
fn taps(pos: f64, len: usize) -> (usize, usize, f64, f64) {
    let lo = pos.floor();
    let frac = pos - lo;
    let lo = lo as usize;
    let hi = if lo + 1 < len { lo + 1 } else { lo };
    (lo, hi, 1.0 - frac, frac)
}

fn in_bounds(pos: f64, len: usize) -> bool {
    pos.is_finite() && pos >= 0.0 && pos <= (len - 1) as f64
}

/// Samples every channel of `grid` at the fractional position `(y, x)`.
pub fn sample_point(grid: &Grid, y: f64, x: f64) -> Result<Vec<f64>> {
    let s = grid.shape();
    if !in_bounds(y, s.height) || !in_bounds(x, s.width) {
        return Err(Error::OutOfBounds(format!(
            "sample at ({y}, {x}) outside {}x{}",
            s.height, s.width
        )));
    }
    let (y0, y1, wy0, wy1) = taps(y, s.height);
    let (x0, x1, wx0, wx1) = taps(x, s.width);
    Ok((0..s.channels)
        .map(|c| {
            wy0 * (wx0 * grid.get(c, y0, x0) + wx1 * grid.get(c, y0, x1))
                + wy1 * (wx0 * grid.get(c, y1, x0) + wx1 * grid.get(c, y1, x1))
        })
        .collect())
}

fn axis_scale(src: usize, dst: usize) -> f64 {
    if dst <= 1 || src <= 1 {
        0.0
    } else {
        (src - 1) as f64 / (dst - 1) as f64
    }
}

/// Resizes each channel to `height × width`.
pub fn resize(src: &Grid, height: usize, width: usize) -> Grid {
    let s = src.shape();
    if s.height == height && s.width == width {
        return src.clone();
    }
    let sy = axis_scale(s.height, height);
    let sx = axis_scale(s.width, width);
    let ytaps: Vec<_> = (0..height).map(|y| taps(y as f64 * sy, s.height)).collect();
    let xtaps: Vec<_> = (0..width).map(|x| taps(x as f64 * sx, s.width)).collect();
    let mut out = Grid::zeros(Shape::new(s.channels, height, width));
    for c in 0..s.channels {
        for (y, &(y0, y1, wy0, wy1)) in ytaps.iter().enumerate() {
            for (x, &(x0, x1, wx0, wx1)) in xtaps.iter().enumerate() {
                let v = wy0 * (wx0 * src.get(c, y0, x0) + wx1 * src.get(c, y0, x1))
                    + wy1 * (wx0 * src.get(c, y1, x0) + wx1 * src.get(c, y1, x1));
                out.set(c, y, x, v);
            }
        }
    }
    out
}

/// Adjoint of [`resize`]: pulls a cotangent on the resized grid back onto
/// a grid of shape `src`.
pub fn resize_adjoint(cot: &Grid, src: Shape) -> Result<Grid> {
    let s = cot.shape();
    if s.channels != src.channels {
        return Err(Error::shape(src, s));
    }
    if s.height == src.height && s.width == src.width {
        return Ok(cot.clone());
    }
    let sy = axis_scale(src.height, s.height);
    let sx = axis_scale(src.width, s.width);
    let mut out = Grid::zeros(src);
    for y in 0..s.height {
        let (y0, y1, wy0, wy1) = taps(y as f64 * sy, src.height);
        for x in 0..s.width {
            let (x0, x1, wx0, wx1) = taps(x as f64 * sx, src.width);
            for c in 0..s.channels {
                let g = cot.get(c, y, x);
                out.add_at(c, y0, x0, g * wy0 * wx0);
                out.add_at(c, y0, x1, g * wy0 * wx1);
                out.add_at(c, y1, x0, g * wy1 * wx0);
                out.add_at(c, y1, x1, g * wy1 * wx1);
            }
        }
    }
    Ok(out)
}

/// Square patch of side `2r + 1` around a fractional center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSpec {
    pub center: (f64, f64),
    pub radius: usize,
}

impl PatchSpec {
    pub fn new(center: (f64, f64), radius: usize) -> Self {
        Self { center, radius }
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Fails unless the rounded-out footprint lies inside `height × width`.
    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        let r = self.radius as f64;
        let (cy, cx) = self.center;
        let ok = cy.is_finite()
            && cx.is_finite()
            && (cy - r).floor() >= 0.0
            && (cx - r).floor() >= 0.0
            && (cy + r).ceil() <= (height - 1) as f64
            && (cx + r).ceil() <= (width - 1) as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::OutOfBounds(format!(
                "patch of radius {} at ({cy:.3}, {cx:.3}) leaves the {height}x{width} grid",
                self.radius
            )))
        }
    }

    fn offsets(&self) -> impl Iterator<Item = (usize, usize, f64, f64)> + '_ {
        let r = self.radius as isize;
        let side = self.side();
        (0..side * side).map(move |i| {
            let (py, px) = (i / side, i % side);
            let y = self.center.0 + (py as isize - r) as f64;
            let x = self.center.1 + (px as isize - r) as f64;
            (py, px, y, x)
        })
    }
}

/// Bilinearly samples `grid` on the patch lattice; output is `D × side × side`.
pub fn sample_patch(grid: &Grid, patch: PatchSpec) -> Result<Grid> {
    let s = grid.shape();
    patch.check_bounds(s.height, s.width)?;
    let side = patch.side();
    let mut out = Grid::zeros(Shape::new(s.channels, side, side));
    for (py, px, y, x) in patch.offsets() {
        let (y0, y1, wy0, wy1) = taps(y, s.height);
        let (x0, x1, wx0, wx1) = taps(x, s.width);
        for c in 0..s.channels {
            let v = wy0 * (wx0 * grid.get(c, y0, x0) + wx1 * grid.get(c, y0, x1))
                + wy1 * (wx0 * grid.get(c, y1, x0) + wx1 * grid.get(c, y1, x1));
            out.set(c, py, px, v);
        }
    }
    Ok(out)
}

/// Accumulates the adjoint of [`sample_patch`] for cotangent `cot` into `acc`.
pub fn sample_patch_adjoint(cot: &Grid, patch: PatchSpec, acc: &mut Grid) -> Result<()> {
    let s = acc.shape();
    patch.check_bounds(s.height, s.width)?;
    let side = patch.side();
    cot.ensure_shape(Shape::new(s.channels, side, side))?;
    for (py, px, y, x) in patch.offsets() {
        let (y0, y1, wy0, wy1) = taps(y, s.height);
        let (x0, x1, wx0, wx1) = taps(x, s.width);
        for c in 0..s.channels {
            let g = cot.get(c, py, px);
            acc.add_at(c, y0, x0, g * wy0 * wx0);
            acc.add_at(c, y0, x1, g * wy0 * wx1);
            acc.add_at(c, y1, x0, g * wy1 * wx0);
            acc.add_at(c, y1, x1, g * wy1 * wx1);
        }
    }
    Ok(())
}
