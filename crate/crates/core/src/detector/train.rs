//! Total loss, plain SGD training and the whole-network gradient audit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grid::{build_targets, ScaleTargets};
use super::model::{DetectorModel, ForwardPass, ModelSpec, HEAD_OUTPUTS};
use super::scene::Frame;
use crate::loss::LossConfig;
use crate::mining::{objectness_loss, FeatureMapBatch, ObjectnessLoss, ScaleGrid, SelectionMask, SCALE_COUNT};
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig<T> {
    pub loss: LossConfig<T>,
    /// Weight of the box regression term, `lambda_box`.
    pub box_weight: T,
    pub learning_rate: T,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds both the weight initialisation and the batch shuffling.
    pub seed: u64,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            box_weight: T::one(),
            learning_rate: T::of(0.03),
            epochs: 30,
            batch_size: 16,
            seed: 7,
        }
    }
}

impl<T: Scalar> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.learning_rate >= T::zero() && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.box_weight >= T::zero() && self.box_weight.is_finite()) {
            return Err(Error::config(format!("box_weight must be finite and >= 0, got {}", self.box_weight)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Training-set losses at the end of an epoch, averaged over batches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    #[serde(rename = "box")]
    pub box_loss: f64,
    pub objectness: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: DetectorModel<T>,
    pub history: Vec<EpochStats>,
}

/// A frame converted to network input plus its per-map targets.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub frame: u64,
    pub input: Vec<T>,
    pub targets: [ScaleTargets<T>; SCALE_COUNT],
}

pub fn prepare<T: Scalar>(frames: &[Frame], spec: &ModelSpec) -> Result<Vec<Sample<T>>> {
    let grid = &spec.grid;
    frames
        .iter()
        .map(|f| {
            if f.size != grid.image_size || f.pixels.len() != f.size * f.size {
                return Err(Error::structural(format!(
                    "frame {} is {} px with {} pixels, model expects {} px",
                    f.id,
                    f.size,
                    f.pixels.len(),
                    grid.image_size
                )));
            }
            let gt = f.gt.map(|b| b.cast::<T>());
            Ok(Sample {
                frame: f.id,
                input: DetectorModel::<T>::input_from_pixels(&f.pixels),
                targets: build_targets(gt.as_ref(), grid)?,
            })
        })
        .collect()
}

fn smooth_l1<T: Scalar>(x: T) -> (T, T) {
    let half = T::of(0.5);
    if x.abs() < T::one() {
        (half * x * x, x)
    } else {
        (x.abs() - half, x.signum())
    }
}

/// Loss terms of one mini-batch and, optionally, the parameter gradient.
#[derive(Clone, Debug)]
pub struct BatchLoss<T> {
    pub total: T,
    pub box_loss: T,
    pub objectness: ObjectnessLoss<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> BatchLoss<T> {
    pub fn mask(&self) -> Option<&SelectionMask> {
        self.objectness.mask.as_ref()
    }
}

/// `box_weight * box + objectness` for a mini-batch.
///
/// The box term is smooth-L1 summed over the four offsets, averaged over
/// the positive cells of each map and summed over maps.
pub fn batch_loss<T: Scalar>(
    model: &DetectorModel<T>,
    samples: &[&Sample<T>],
    cfg: &TrainConfig<T>,
    with_grad: bool,
) -> Result<BatchLoss<T>> {
    if samples.is_empty() {
        return Err(Error::structural("empty batch"));
    }
    let passes = samples
        .iter()
        .map(|s| model.forward(&s.input))
        .collect::<Result<Vec<ForwardPass<T>>>>()?;
    if passes.iter().any(|p| p.heads.iter().any(|h| h.raw.iter().any(|v| !v.is_finite()))) {
        return Err(Error::domain("non-finite network output"));
    }

    let grids: [ScaleGrid<T>; SCALE_COUNT] = {
        let mut out = Vec::with_capacity(SCALE_COUNT);
        for s in 0..SCALE_COUNT {
            let side = passes[0].heads[s].side;
            let mut prob = Vec::new();
            let mut target = Vec::new();
            let mut pred_box = Vec::new();
            let mut target_box = Vec::new();
            for (pass, sample) in passes.iter().zip(samples) {
                let head = &pass.heads[s];
                let t = &sample.targets[s];
                if t.side != side {
                    return Err(Error::structural(format!(
                        "frame {}: target map {} is {}x{}, prediction is {side}x{side}",
                        sample.frame, s, t.side, t.side
                    )));
                }
                for c in 0..head.cells() {
                    prob.push(head.objectness(c));
                    pred_box.push(head.offsets(c));
                }
                target.extend_from_slice(&t.positive);
                target_box.extend_from_slice(&t.offsets);
            }
            out.push(ScaleGrid::new(samples.len(), side, side, prob, target, pred_box, target_box)?);
        }
        out.try_into().expect("three scales")
    };
    let batch = FeatureMapBatch::new(grids)?;
    let objectness = objectness_loss(&batch, &cfg.loss)?;

    let mut box_loss = T::zero();
    // d(box term)/d(offset) per scale, laid out like the grid cells
    let mut box_grad: [Vec<[T; 4]>; SCALE_COUNT] = Default::default();
    for (s, grid) in batch.scales().iter().enumerate() {
        let positives = grid.target().iter().filter(|&&t| t).count();
        box_grad[s] = vec![[T::zero(); 4]; grid.target().len()];
        if positives == 0 {
            continue;
        }
        let n = T::from_usize(positives).unwrap();
        let mut sum = T::zero();
        for (i, (pred, tgt)) in grid.pred_box().iter().zip(grid.target_box()).enumerate() {
            if let Some(tgt) = tgt {
                for k in 0..4 {
                    let (v, d) = smooth_l1(pred[k] - tgt[k]);
                    sum += v;
                    box_grad[s][i][k] = cfg.box_weight * d / n;
                }
            }
        }
        box_loss += sum / n;
    }
    let total = cfg.box_weight * box_loss + objectness.value;

    let grad = with_grad.then(|| {
        let mut grad = vec![T::zero(); model.param_count()];
        for (img, pass) in passes.iter().enumerate() {
            let d_heads: [Vec<T>; SCALE_COUNT] = std::array::from_fn(|s| {
                let head = &pass.heads[s];
                let cells = head.cells();
                let mut d = vec![T::zero(); HEAD_OUTPUTS * cells];
                for c in 0..cells {
                    let at = img * cells + c;
                    let p = head.objectness(c);
                    d[c] = objectness.d_dp[s][at] * p * (T::one() - p);
                    for k in 0..4 {
                        d[(k + 1) * cells + c] = box_grad[s][at][k];
                    }
                }
                d
            });
            model.backward(pass, &d_heads, &mut grad);
        }
        grad
    });

    Ok(BatchLoss {
        total,
        box_loss,
        objectness,
        grad,
    })
}

/// Trains a freshly initialised model (seeded by `cfg.seed`).
pub fn train<T: Scalar>(frames: &[Frame], spec: &ModelSpec, cfg: &TrainConfig<T>) -> Result<TrainOutcome<T>> {
    let model = DetectorModel::new(spec.clone(), cfg.seed)?;
    train_from(model, frames, cfg)
}

/// Plain SGD from the given parameters.
pub fn train_from<T: Scalar>(
    mut model: DetectorModel<T>,
    frames: &[Frame],
    cfg: &TrainConfig<T>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let samples = prepare::<T>(frames, model.spec())?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5348_5546));
    let mut history = Vec::with_capacity(cfg.epochs);

    let diverged = |epoch: usize, e: Error| match e {
        Error::Domain(detail) => Error::Divergence { epoch, detail },
        other => other,
    };
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &samples[i]).collect();
            let out = batch_loss(&model, &batch, cfg, true).map_err(|e| diverged(epoch, e))?;
            if !out.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite loss {} at batch {b}", out.total),
                });
            }
            let grad = out.grad.expect("gradient requested");
            for (p, g) in model.params_mut().iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * *g;
            }
            if model.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite parameters after batch {b}"),
                });
            }
        }
        let stats = epoch_loss(&model, &samples, cfg).map_err(|e| diverged(epoch, e))?;
        if !stats.total.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("non-finite end-of-epoch loss {}", stats.total),
            });
        }
        history.push(EpochStats { epoch, ..stats });
    }
    Ok(TrainOutcome { model, history })
}

/// Loss of the current model over the whole training set, averaged over
/// unshuffled batches so the value does not depend on the epoch's order.
fn epoch_loss<T: Scalar>(model: &DetectorModel<T>, samples: &[Sample<T>], cfg: &TrainConfig<T>) -> Result<EpochStats> {
    let (mut total, mut boxes, mut obj) = (0.0, 0.0, 0.0);
    let mut batches = 0usize;
    for chunk in samples.chunks(cfg.batch_size) {
        let batch: Vec<&Sample<T>> = chunk.iter().collect();
        let out = batch_loss(model, &batch, cfg, false)?;
        total += out.total.as_f64();
        boxes += out.box_loss.as_f64();
        obj += out.objectness.value.as_f64();
        batches += 1;
    }
    let n = batches as f64;
    Ok(EpochStats {
        epoch: 0,
        total: total / n,
        box_loss: boxes / n,
        objectness: obj / n,
    })
}

/// Result of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub max_rel_error: f64,
    /// Parameter index with the largest error.
    pub worst_param: usize,
    pub sampled: usize,
    /// Smallest rank mining selection gap in the batch, if any cell was
    /// dropped.
    pub selection_margin: Option<f64>,
}

/// Relative errors use `|a - n| / max(|a|, |n|, AUDIT_FLOOR)`.
pub const AUDIT_FLOOR: f64 = 1e-6;

/// Checks the analytic gradient of the total loss on `samples` against
/// central differences with step `h` on `count` parameters drawn without
/// replacement.
///
/// Batches whose rank mining selection sits on a tie, or whose selection
/// changes under any perturbation, are rejected with
/// [`Error::BoundaryTie`].
pub fn audit_gradients<T: Scalar>(
    model: &DetectorModel<T>,
    samples: &[&Sample<T>],
    cfg: &TrainConfig<T>,
    count: usize,
    h: T,
    seed: u64,
) -> Result<AuditReport> {
    let base = batch_loss(model, samples, cfg, true)?;
    let margin = base.objectness.selection_margin;
    if let Some(m) = margin {
        if m <= T::zero() {
            return Err(Error::BoundaryTie(format!(
                "selection boundary sits on a tie (margin {m})"
            )));
        }
    }
    let grad = base.grad.as_ref().expect("gradient requested");
    let mut indices: Vec<usize> = (0..model.param_count()).collect();
    indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    indices.truncate(count);

    let mut probe = model.clone();
    let mut worst = (0.0f64, 0usize);
    for &j in &indices {
        let orig = probe.params()[j];
        let mut eval = |value: T| -> Result<T> {
            probe.params_mut()[j] = value;
            let out = batch_loss(&probe, samples, cfg, false)?;
            if out.mask() != base.mask() {
                return Err(Error::BoundaryTie(format!(
                    "perturbing parameter {j} by {h} changes the rank mining selection (margin {})",
                    margin.map_or(f64::NAN, |m| m.as_f64())
                )));
            }
            Ok(out.total)
        };
        let plus = eval(orig + h)?;
        let minus = eval(orig - h)?;
        probe.params_mut()[j] = orig;
        let numeric = ((plus - minus) / (h + h)).as_f64();
        let analytic = grad[j].as_f64();
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(AUDIT_FLOOR);
        if err > worst.0 || indices.len() == 1 {
            worst = (err, j);
        }
    }
    Ok(AuditReport {
        max_rel_error: worst.0,
        worst_param: worst.1,
        sampled: indices.len(),
        selection_margin: margin.map(|m| m.as_f64()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::grid::GridSpec;
    use crate::detector::scene::{generate_dataset, SceneSpec};
    use crate::loss::LossVariant;

    fn small_spec() -> ModelSpec {
        ModelSpec {
            grid: GridSpec { image_size: 32, cells: [8, 4, 2] },
            channels: vec![4, 6, 6, 6],
        }
    }

    fn small_frames(count: usize) -> Vec<Frame> {
        let scene = SceneSpec { image_size: 32, target_size: [4, 10], ..SceneSpec::default() };
        generate_dataset(&scene, count).unwrap()
    }

    fn cfg(variant: LossVariant) -> TrainConfig<f64> {
        TrainConfig {
            loss: LossConfig::default().with_variant(variant),
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_alone() {
        let frames = small_frames(8);
        let c = TrainConfig { learning_rate: 0.0, ..cfg(LossVariant::Bce) };
        let init = DetectorModel::<f64>::new(small_spec(), c.seed).unwrap();
        let out = train(&frames, &small_spec(), &c).unwrap();
        assert_eq!(out.model.params(), init.params());
        let totals: Vec<f64> = out.history.iter().map(|e| e.total).collect();
        assert!(totals.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12), "{totals:?}");
    }

    #[test]
    fn same_seed_same_trajectory() {
        let frames = small_frames(8);
        let c = cfg(LossVariant::Combined);
        let a = train(&frames, &small_spec(), &c).unwrap();
        let b = train(&frames, &small_spec(), &c).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.params(), b.model.params());
    }

    #[test]
    fn history_splits_total_into_terms() {
        let frames = small_frames(8);
        let out = train(&frames, &small_spec(), &cfg(LossVariant::Focal)).unwrap();
        assert_eq!(out.history.len(), 3);
        for e in &out.history {
            assert!((e.total - (e.box_loss + e.objectness)).abs() < 1e-9);
        }
    }

    #[test]
    fn huge_learning_rate_reports_the_epoch() {
        let frames = small_frames(8);
        let c = TrainConfig { learning_rate: 1e12, ..cfg(LossVariant::Combined) };
        match train(&frames, &small_spec(), &c) {
            Err(Error::Divergence { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let frames = small_frames(2);
        for bad in [
            TrainConfig { epochs: 0, ..cfg(LossVariant::Bce) },
            TrainConfig { batch_size: 0, ..cfg(LossVariant::Bce) },
            TrainConfig { learning_rate: -1.0, ..cfg(LossVariant::Bce) },
        ] {
            assert!(matches!(train(&frames, &small_spec(), &bad), Err(Error::Config(_))));
        }
        assert!(matches!(train::<f64>(&[], &small_spec(), &cfg(LossVariant::Bce)), Err(Error::Config(_))));
        let wrong_size = generate_dataset(&SceneSpec::default(), 1).unwrap();
        assert!(matches!(
            train(&wrong_size, &small_spec(), &cfg(LossVariant::Bce)),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn unselected_cells_get_no_objectness_gradient() {
        let frames = small_frames(4);
        let spec = small_spec();
        let samples = prepare::<f64>(&frames, &spec).unwrap();
        let refs: Vec<&Sample<f64>> = samples.iter().collect();
        let model = DetectorModel::new(spec, 3).unwrap();
        let out = batch_loss(&model, &refs, &cfg(LossVariant::Combined), false).unwrap();
        let mask = out.mask().unwrap();
        for s in 0..SCALE_COUNT {
            let cells = out.objectness.d_dp[s].len() / refs.len();
            for img in 0..refs.len() {
                for c in 0..cells {
                    let d = out.objectness.d_dp[s][img * cells + c];
                    if !mask.selected[s][img].contains(&c) {
                        assert_eq!(d, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn audit_passes_for_every_variant() {
        let frames = small_frames(4);
        let spec = small_spec();
        let samples = prepare::<f64>(&frames, &spec).unwrap();
        let refs: Vec<&Sample<f64>> = samples.iter().collect();
        let model = DetectorModel::new(spec, 11).unwrap();
        for variant in LossVariant::ALL {
            let report = audit_gradients(&model, &refs, &cfg(variant), 40, 1e-6, 1).unwrap();
            assert!(report.max_rel_error < 1e-4, "{variant}: {report:?}");
        }
    }

    #[test]
    fn audit_rejects_ties() {
        // a zero model predicts exactly 0.5 everywhere, so every negative
        // cell has the same loss
        let frames = small_frames(2);
        let spec = small_spec();
        let samples = prepare::<f64>(&frames, &spec).unwrap();
        let refs: Vec<&Sample<f64>> = samples.iter().collect();
        let model = DetectorModel::zeroed(spec).unwrap();
        let err = audit_gradients(&model, &refs, &cfg(LossVariant::Lrm), 5, 1e-6, 0).unwrap_err();
        assert!(matches!(err, Error::BoundaryTie(_)));
    }
}
