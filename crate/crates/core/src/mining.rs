//! Loss rank mining over the three detector feature maps.
//!
//! For every feature map the per-cell objectness losses of each image are
//! flattened, ranked in descending order and only the top `B` fraction of
//! cells is kept. Each image contributes the mean of its kept losses, images
//! are averaged per map, and the three map averages are summed. The
//! selection is a hard mask: it is fixed for the step and gradients flow
//! only through the kept cells.

use crate::loss::{CellKernel, LossConfig, LossVariant};
use crate::{Error, Result, Scalar};

/// Number of feature maps (small, medium and large objects).
pub const SCALE_COUNT: usize = 3;

/// Box regression values of one cell: `(cx, cy, w, h)` offsets.
pub type BoxOffsets<T> = [T; 4];

/// Predictions and targets for one feature map across a mini-batch.
///
/// Cells are stored image-major, then row-major within the image.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleGrid<T> {
    images: usize,
    height: usize,
    width: usize,
    prob: Vec<T>,
    target: Vec<bool>,
    pred_box: Vec<BoxOffsets<T>>,
    target_box: Vec<Option<BoxOffsets<T>>>,
}

impl<T: Scalar> ScaleGrid<T> {
    pub fn new(
        images: usize,
        height: usize,
        width: usize,
        prob: Vec<T>,
        target: Vec<bool>,
        pred_box: Vec<BoxOffsets<T>>,
        target_box: Vec<Option<BoxOffsets<T>>>,
    ) -> Result<Self> {
        let cells = images * height * width;
        if images == 0 || height == 0 || width == 0 {
            return Err(Error::structural(format!(
                "empty feature map {images}x{height}x{width}"
            )));
        }
        for (name, len) in [
            ("probability", prob.len()),
            ("target", target.len()),
            ("predicted box", pred_box.len()),
            ("target box", target_box.len()),
        ] {
            if len != cells {
                return Err(Error::structural(format!(
                    "{name} grid has {len} cells, expected {images}x{height}x{width} = {cells}"
                )));
            }
        }
        if let Some(bad) = prob.iter().find(|p| !(**p >= T::zero() && **p <= T::one())) {
            return Err(Error::domain(format!("objectness {bad} outside [0, 1]")));
        }
        if let Some(i) = (0..cells).find(|&i| target[i] != target_box[i].is_some()) {
            return Err(Error::structural(format!(
                "cell {i}: box target must be present exactly on positive cells"
            )));
        }
        Ok(Self {
            images,
            height,
            width,
            prob,
            target,
            pred_box,
            target_box,
        })
    }

    /// Objectness-only grid with zero box predictions; handy for tests and
    /// for callers that do not regress boxes.
    pub fn objectness_only(
        images: usize,
        height: usize,
        width: usize,
        prob: Vec<T>,
        target: Vec<bool>,
    ) -> Result<Self> {
        let cells = target.len();
        let target_box = target
            .iter()
            .map(|&t| t.then_some([T::zero(); 4]))
            .collect();
        Self::new(
            images,
            height,
            width,
            prob,
            target,
            vec![[T::zero(); 4]; cells],
            target_box,
        )
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Cells per image.
    pub fn cells_per_image(&self) -> usize {
        self.height * self.width
    }

    pub fn prob(&self) -> &[T] {
        &self.prob
    }

    pub fn target(&self) -> &[bool] {
        &self.target
    }

    pub fn pred_box(&self) -> &[BoxOffsets<T>] {
        &self.pred_box
    }

    pub fn target_box(&self) -> &[Option<BoxOffsets<T>>] {
        &self.target_box
    }

    /// Per-cell losses of this map under `kernel`.
    pub fn cell_losses(&self, kernel: &CellKernel<T>) -> Result<LossMap<T>> {
        let mut values = Vec::with_capacity(self.prob.len());
        let mut d_dp = Vec::with_capacity(self.prob.len());
        for (&p, &t) in self.prob.iter().zip(&self.target) {
            let l = kernel.eval(p, t)?;
            values.push(l.value);
            d_dp.push(l.d_dp);
        }
        Ok(LossMap {
            images: self.images,
            height: self.height,
            width: self.width,
            values,
            d_dp,
        })
    }
}

/// Predictions and targets for the three feature maps of a mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapBatch<T> {
    scales: [ScaleGrid<T>; SCALE_COUNT],
}

impl<T: Scalar> FeatureMapBatch<T> {
    pub fn new(scales: [ScaleGrid<T>; SCALE_COUNT]) -> Result<Self> {
        let n = scales[0].images;
        if let Some(s) = scales.iter().position(|g| g.images != n) {
            return Err(Error::structural(format!(
                "scale {s} holds {} images, scale 0 holds {n}",
                scales[s].images
            )));
        }
        Ok(Self { scales })
    }

    pub fn scales(&self) -> &[ScaleGrid<T>; SCALE_COUNT] {
        &self.scales
    }

    pub fn images(&self) -> usize {
        self.scales[0].images
    }
}

/// Per-cell losses of one feature map, `images x height x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossMap<T> {
    images: usize,
    height: usize,
    width: usize,
    values: Vec<T>,
    d_dp: Vec<T>,
}

impl<T: Scalar> LossMap<T> {
    /// Builds a map of loss values from nested `[image][row][col]` data.
    /// Derivatives are set to zero.
    pub fn from_nested(nested: &[Vec<Vec<T>>]) -> Result<Self> {
        let images = nested.len();
        let height = nested.first().map_or(0, Vec::len);
        let width = nested
            .first()
            .and_then(|img| img.first())
            .map_or(0, Vec::len);
        if images == 0 || height == 0 || width == 0 {
            return Err(Error::structural("loss map has an empty dimension"));
        }
        let mut values = Vec::with_capacity(images * height * width);
        for (i, img) in nested.iter().enumerate() {
            if img.len() != height {
                return Err(Error::structural(format!(
                    "image {i} has {} rows, expected {height}",
                    img.len()
                )));
            }
            for (r, row) in img.iter().enumerate() {
                if row.len() != width {
                    return Err(Error::structural(format!(
                        "image {i} row {r} has {} columns, expected {width}",
                        row.len()
                    )));
                }
                values.extend_from_slice(row);
            }
        }
        let d_dp = vec![T::zero(); values.len()];
        Ok(Self {
            images,
            height,
            width,
            values,
            d_dp,
        })
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn cells_per_image(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn d_dp(&self) -> &[T] {
        &self.d_dp
    }

    fn image_values(&self, image: usize) -> &[T] {
        let n = self.cells_per_image();
        &self.values[image * n..(image + 1) * n]
    }
}

/// Splits a loss map into one row-major vector per image.
pub fn flatten_per_image<T: Scalar>(map: &LossMap<T>) -> Vec<Vec<T>> {
    (0..map.images)
        .map(|i| map.image_values(i).to_vec())
        .collect()
}

/// Number of cells kept out of `n` for rank factor `b`: `max(1, ceil(b n))`.
///
/// A relative slack of 1e-12 is subtracted before the ceiling so that
/// decimal rank factors such as 0.15 (stored as 0.15000000000000002) select
/// `ceil(0.15 * 20) = 3` rather than 4.
pub fn selection_count<T: Scalar>(n: usize, b: T) -> usize {
    let raw = b.as_f64() * n as f64;
    let k = (raw - raw.abs() * 1e-12).ceil();
    (k.max(1.0) as usize).min(n)
}

/// Indices of the `max(1, ceil(b n))` largest losses, ordered by descending
/// loss; equal losses keep the lower index first.
pub fn select_top_b<T: Scalar>(losses: &[T], b: T) -> Result<Vec<usize>> {
    check_rank_factor(b)?;
    if losses.is_empty() {
        return Err(Error::structural("cannot rank an empty loss vector"));
    }
    if let Some(bad) = losses.iter().find(|v| v.is_nan()) {
        return Err(Error::domain(format!("loss value {bad} cannot be ranked")));
    }
    let k = selection_count(losses.len(), b);
    let mut order: Vec<usize> = (0..losses.len()).collect();
    // sort_by is stable, so ties stay in index order
    order.sort_by(|&i, &j| losses[j].partial_cmp(&losses[i]).expect("NaN filtered above"));
    order.truncate(k);
    Ok(order)
}

fn check_rank_factor<T: Scalar>(b: T) -> Result<()> {
    if b > T::zero() && b <= T::one() {
        Ok(())
    } else {
        Err(Error::config(format!("rank factor B must be in (0, 1], got {b}")))
    }
}

/// Kept cell indices per scale and image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionMask {
    /// `selected[scale][image]` lists flattened cell indices, highest loss first.
    pub selected: [Vec<Vec<usize>>; SCALE_COUNT],
}

impl SelectionMask {
    pub fn count(&self, scale: usize, image: usize) -> usize {
        self.selected[scale][image].len()
    }
}

/// Reduced objectness loss with per-cell gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectnessLoss<T> {
    pub value: T,
    /// Contribution of each feature map; `value` is their sum.
    pub per_scale: [T; SCALE_COUNT],
    /// `d value / d p` for every cell, laid out like [`ScaleGrid`].
    pub d_dp: [Vec<T>; SCALE_COUNT],
    /// Present when the loss was rank-mined.
    pub mask: Option<SelectionMask>,
    /// Smallest gap between the last kept and the first dropped loss over
    /// every scale and image, or `None` when nothing was dropped. A
    /// zero margin means the selection boundary sits on a tie.
    pub selection_margin: Option<T>,
}

/// Plain mean reduction: per map, the mean over every cell of every image;
/// the three map means are summed.
pub fn mean_objectness_loss<T: Scalar>(
    batch: &FeatureMapBatch<T>,
    kernel: &CellKernel<T>,
) -> Result<ObjectnessLoss<T>> {
    let mut per_scale = [T::zero(); SCALE_COUNT];
    let mut d_dp: [Vec<T>; SCALE_COUNT] = Default::default();
    for (s, grid) in batch.scales.iter().enumerate() {
        let losses = grid.cell_losses(kernel)?;
        let n = T::from_usize(losses.values.len()).expect("cell count fits scalar");
        per_scale[s] = losses.values.iter().copied().sum::<T>() / n;
        d_dp[s] = losses.d_dp.iter().map(|&d| d / n).collect();
    }
    Ok(ObjectnessLoss {
        value: per_scale.iter().copied().sum(),
        per_scale,
        d_dp,
        mask: None,
        selection_margin: None,
    })
}

/// Loss rank mining with `kernel` as the per-cell loss.
pub fn lrm_objectness_loss<T: Scalar>(
    batch: &FeatureMapBatch<T>,
    cfg: &LossConfig<T>,
    kernel: &CellKernel<T>,
) -> Result<ObjectnessLoss<T>> {
    check_rank_factor(cfg.rank_b)?;
    let images = batch.images();
    let n_images = T::from_usize(images).expect("image count fits scalar");
    let mut per_scale = [T::zero(); SCALE_COUNT];
    let mut d_dp: [Vec<T>; SCALE_COUNT] = Default::default();
    let mut selected: [Vec<Vec<usize>>; SCALE_COUNT] = Default::default();
    let mut margin: Option<T> = None;

    for (s, grid) in batch.scales.iter().enumerate() {
        let losses = grid.cell_losses(kernel)?;
        let cells = losses.cells_per_image();
        let mut grad = vec![T::zero(); losses.values.len()];
        let mut scale_sum = T::zero();
        let mut scale_sel = Vec::with_capacity(images);

        for (i, image_losses) in flatten_per_image(&losses).into_iter().enumerate() {
            let keep = select_top_b(&image_losses, cfg.rank_b)?;
            let k = T::from_usize(keep.len()).expect("selection count fits scalar");
            let image_mean = keep.iter().map(|&c| image_losses[c]).sum::<T>() / k;
            scale_sum += image_mean;

            let weight = T::one() / (k * n_images);
            for &c in &keep {
                grad[i * cells + c] = losses.d_dp[i * cells + c] * weight;
            }
            if keep.len() < cells {
                let last_kept = image_losses[*keep.last().expect("k >= 1")];
                let first_dropped = (0..cells)
                    .filter(|c| !keep.contains(c))
                    .map(|c| image_losses[c])
                    .fold(T::neg_infinity(), T::max);
                let gap = last_kept - first_dropped;
                margin = Some(margin.map_or(gap, |m: T| m.min(gap)));
            }
            scale_sel.push(keep);
        }
        per_scale[s] = scale_sum / n_images;
        d_dp[s] = grad;
        selected[s] = scale_sel;
    }

    Ok(ObjectnessLoss {
        value: per_scale.iter().copied().sum(),
        per_scale,
        d_dp,
        mask: Some(SelectionMask { selected }),
        selection_margin: margin,
    })
}

/// Balanced focal loss per cell, then loss rank mining.
pub fn combined_objectness_loss<T: Scalar>(
    batch: &FeatureMapBatch<T>,
    cfg: &LossConfig<T>,
) -> Result<ObjectnessLoss<T>> {
    let kernel = CellKernel::BalancedFocal {
        alpha: cfg.alpha,
        gamma: cfg.gamma,
        xi: cfg.xi,
        eps: cfg.eps,
    };
    lrm_objectness_loss(batch, cfg, &kernel)
}

/// Objectness loss for the configured variant.
pub fn objectness_loss<T: Scalar>(
    batch: &FeatureMapBatch<T>,
    cfg: &LossConfig<T>,
) -> Result<ObjectnessLoss<T>> {
    cfg.validate()?;
    match cfg.variant {
        LossVariant::Bce | LossVariant::Focal | LossVariant::BalancedFocal => {
            mean_objectness_loss(batch, &cfg.kernel())
        }
        LossVariant::Lrm => lrm_objectness_loss(batch, cfg, &cfg.kernel()),
        LossVariant::Combined => combined_objectness_loss(batch, cfg),
    }
}
