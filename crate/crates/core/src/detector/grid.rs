use serde::{Deserialize, Serialize};

use crate::eval::BBox;
use crate::mining::{BoxOffsets, SCALE_COUNT};
use crate::{Error, Result, Scalar};

/// Cell layout of the three output maps, finest first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub image_size: usize,
    /// Cells per side for each map, e.g. `[8, 4, 2]`.
    pub cells: [usize; SCALE_COUNT],
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            cells: [8, 4, 2],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        for (s, &c) in self.cells.iter().enumerate() {
            if c == 0 || !self.image_size.is_multiple_of(c) {
                return Err(Error::config(format!(
                    "scale {s}: {c} cells do not tile a {} px image",
                    self.image_size
                )));
            }
        }
        if !self.cells.windows(2).all(|w| w[0] > w[1]) {
            return Err(Error::config(format!(
                "cell counts {:?} must shrink from fine to coarse",
                self.cells
            )));
        }
        Ok(())
    }

    /// Pixels per cell side at `scale`.
    pub fn stride(&self, scale: usize) -> usize {
        self.image_size / self.cells[scale]
    }

    pub fn total_cells(&self) -> usize {
        self.cells.iter().map(|c| c * c).sum()
    }
}

/// Targets for one map of one image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleTargets<T> {
    pub side: usize,
    pub positive: Vec<bool>,
    pub offsets: Vec<Option<BoxOffsets<T>>>,
}

impl<T: Scalar> ScaleTargets<T> {
    fn empty(side: usize) -> Self {
        Self {
            side,
            positive: vec![false; side * side],
            offsets: vec![None; side * side],
        }
    }

    pub fn positive_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.positive.iter().enumerate().filter(|(_, &p)| p).map(|(i, _)| i)
    }
}

/// Cell holding the box centre and the regression target for it:
/// `(cx / stride - col, cy / stride - row, ln(w / stride), ln(h / stride))`.
pub fn encode_box<T: Scalar>(b: &BBox<T>, side: usize, stride: usize) -> (usize, BoxOffsets<T>) {
    let s = T::from_usize(stride).unwrap();
    let (cx, cy) = b.center();
    let last = T::from_usize(side - 1).unwrap();
    let col = (cx / s).floor().max(T::zero()).min(last);
    let row = (cy / s).floor().max(T::zero()).min(last);
    let cell = row.to_usize().unwrap() * side + col.to_usize().unwrap();
    let offsets = [cx / s - col, cy / s - row, (b.width() / s).ln(), (b.height() / s).ln()];
    (cell, offsets)
}

/// Inverse of [`encode_box`]; size offsets are clamped to `[-8, 8]` before
/// exponentiation.
pub fn decode_box<T: Scalar>(offsets: &BoxOffsets<T>, cell: usize, side: usize, stride: usize) -> BBox<T> {
    let s = T::from_usize(stride).unwrap();
    let col = T::from_usize(cell % side).unwrap();
    let row = T::from_usize(cell / side).unwrap();
    let lim = T::of(8.0);
    let w = s * offsets[2].max(-lim).min(lim).exp();
    let h = s * offsets[3].max(-lim).min(lim).exp();
    let cx = (col + offsets[0]) * s;
    let cy = (row + offsets[1]) * s;
    let half = T::of(0.5);
    BBox {
        x1: cx - half * w,
        y1: cy - half * h,
        x2: cx + half * w,
        y2: cy + half * h,
    }
}

/// Per-map targets for a frame: the cell containing the box centre is
/// positive on every map; all others are negative.
pub fn build_targets<T: Scalar>(
    gt: Option<&BBox<T>>,
    grid: &GridSpec,
) -> Result<[ScaleTargets<T>; SCALE_COUNT]> {
    grid.validate()?;
    let mut out: [ScaleTargets<T>; SCALE_COUNT] = std::array::from_fn(|s| ScaleTargets::empty(grid.cells[s]));
    if let Some(b) = gt {
        b.validate()?;
        let side = T::from_usize(grid.image_size).unwrap();
        if !b.lies_within(side, side) {
            return Err(Error::domain(format!(
                "box [{}, {}, {}, {}] leaves the {} px image",
                b.x1, b.y1, b.x2, b.y2, grid.image_size
            )));
        }
        for (s, targets) in out.iter_mut().enumerate() {
            let (cell, offsets) = encode_box(b, grid.cells[s], grid.stride(s));
            targets.positive[cell] = true;
            targets.offsets[cell] = Some(offsets);
        }
    }
    Ok(out)
}
