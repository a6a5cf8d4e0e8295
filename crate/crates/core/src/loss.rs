//! Per-cell objectness loss kernels.
//!
//! Every kernel works on the two-sided form: with `p_t = p` for a positive
//! cell and `p_t = 1 - p` for a negative one, the probability is clamped to
//! `[eps, 1 - eps]` before the logarithm. Derivatives are exact for the
//! clamped expression, so they vanish inside the clamped regions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

/// Which objectness loss a run trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Plain binary cross-entropy, mean-reduced (the default detector loss).
    Bce,
    /// Focal loss, mean-reduced, no balancing weight.
    Focal,
    /// Focal loss scaled by `xi`, mean-reduced.
    BalancedFocal,
    /// Loss rank mining over binary cross-entropy.
    Lrm,
    /// Loss rank mining over balanced focal loss.
    Combined,
}

impl LossVariant {
    pub const ALL: [LossVariant; 5] = [
        LossVariant::Bce,
        LossVariant::Focal,
        LossVariant::BalancedFocal,
        LossVariant::Lrm,
        LossVariant::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Bce => "bce",
            LossVariant::Focal => "focal",
            LossVariant::BalancedFocal => "balanced_focal",
            LossVariant::Lrm => "lrm",
            LossVariant::Combined => "combined",
        }
    }

    /// Whether the objectness reduction keeps only the top-B cells.
    pub fn uses_rank_mining(self) -> bool {
        matches!(self, LossVariant::Lrm | LossVariant::Combined)
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        match norm.as_str() {
            "bce" | "default" => Ok(LossVariant::Bce),
            "focal" => Ok(LossVariant::Focal),
            "balanced_focal" | "balancedfocal" => Ok(LossVariant::BalancedFocal),
            "lrm" => Ok(LossVariant::Lrm),
            "combined" => Ok(LossVariant::Combined),
            _ => Err(Error::config(format!(
                "unknown loss variant `{s}` (expected bce, focal, balanced_focal, lrm or combined)"
            ))),
        }
    }
}

/// Objectness loss hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig<T> {
    pub variant: LossVariant,
    /// Focal weight for positive cells; negatives get `1 - alpha`.
    pub alpha: T,
    /// Focal focusing exponent.
    pub gamma: T,
    /// Balancing weight applied to the focal objectness term.
    pub xi: T,
    /// Fraction of cells kept per image per feature map by rank mining.
    pub rank_b: T,
    /// Probability clamp.
    pub eps: T,
}

impl<T: Scalar> Default for LossConfig<T> {
    fn default() -> Self {
        Self {
            variant: LossVariant::Bce,
            alpha: T::of(0.25),
            gamma: T::of(1.5),
            xi: T::of(30.0),
            rank_b: T::of(0.35),
            eps: T::of(1e-7),
        }
    }
}

impl<T: Scalar> LossConfig<T> {
    pub fn with_variant(mut self, variant: LossVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.alpha, self.gamma, self.xi, self.rank_b, self.eps]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("loss parameters must be finite"));
        }
        if !(self.alpha > T::zero() && self.alpha < T::one()) {
            return Err(Error::config(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if self.gamma < T::zero() {
            return Err(Error::config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.xi <= T::zero() {
            return Err(Error::config(format!("xi must be > 0, got {}", self.xi)));
        }
        if !(self.rank_b > T::zero() && self.rank_b <= T::one()) {
            return Err(Error::config(format!("rank_b must be in (0, 1], got {}", self.rank_b)));
        }
        if !(self.eps > T::zero() && self.eps < T::of(0.5)) {
            return Err(Error::config(format!("eps must be in (0, 0.5), got {}", self.eps)));
        }
        Ok(())
    }

    /// The per-cell kernel this variant ranks and reduces.
    pub fn kernel(&self) -> CellKernel<T> {
        match self.variant {
            LossVariant::Bce | LossVariant::Lrm => CellKernel::CrossEntropy { eps: self.eps },
            LossVariant::Focal => CellKernel::Focal {
                alpha: self.alpha,
                gamma: self.gamma,
                eps: self.eps,
            },
            LossVariant::BalancedFocal | LossVariant::Combined => CellKernel::BalancedFocal {
                alpha: self.alpha,
                gamma: self.gamma,
                xi: self.xi,
                eps: self.eps,
            },
        }
    }
}

/// Loss of one cell and its derivative with respect to the predicted
/// probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellLoss<T> {
    pub value: T,
    pub d_dp: T,
}

impl<T: Scalar> CellLoss<T> {
    fn scaled(self, k: T) -> Self {
        Self {
            value: k * self.value,
            d_dp: k * self.d_dp,
        }
    }
}

/// A per-cell kernel with its parameters bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CellKernel<T> {
    CrossEntropy { eps: T },
    Focal { alpha: T, gamma: T, eps: T },
    BalancedFocal { alpha: T, gamma: T, xi: T, eps: T },
}

impl<T: Scalar> CellKernel<T> {
    pub fn eval(&self, p: T, target: bool) -> Result<CellLoss<T>> {
        match *self {
            CellKernel::CrossEntropy { eps } => ce_loss(p, target, eps),
            CellKernel::Focal { alpha, gamma, eps } => focal_loss(p, target, alpha, gamma, eps),
            CellKernel::BalancedFocal {
                alpha,
                gamma,
                xi,
                eps,
            } => Ok(focal_loss(p, target, alpha, gamma, eps)?.scaled(xi)),
        }
    }
}

/// Clamped target-class probability and `d p_t / d p` (0 when clamped).
struct TargetProb<T> {
    p_t: T,
    dpt_dp: T,
}

fn target_prob<T: Scalar>(p: T, target: bool, eps: T) -> Result<TargetProb<T>> {
    if !p.is_finite() {
        return Err(Error::domain(format!("probability must be finite, got {p}")));
    }
    if p < T::zero() || p > T::one() {
        return Err(Error::domain(format!("probability must be in [0, 1], got {p}")));
    }
    let (raw, sign) = if target {
        (p, T::one())
    } else {
        (T::one() - p, -T::one())
    };
    let lo = eps;
    let hi = T::one() - eps;
    if raw < lo {
        Ok(TargetProb { p_t: lo, dpt_dp: T::zero() })
    } else if raw > hi {
        Ok(TargetProb { p_t: hi, dpt_dp: T::zero() })
    } else {
        Ok(TargetProb { p_t: raw, dpt_dp: sign })
    }
}

/// Two-sided cross-entropy `-log(p_t)`.
pub fn ce_loss<T: Scalar>(p: T, target: bool, eps: T) -> Result<CellLoss<T>> {
    let TargetProb { p_t, dpt_dp } = target_prob(p, target, eps)?;
    Ok(CellLoss {
        value: -p_t.ln(),
        d_dp: -(T::one() / p_t) * dpt_dp,
    })
}

/// Two-sided focal loss `-alpha_t (1 - p_t)^gamma log(p_t)`, with
/// `alpha_t = alpha` for positives and `1 - alpha` for negatives.
pub fn focal_loss<T: Scalar>(
    p: T,
    target: bool,
    alpha: T,
    gamma: T,
    eps: T,
) -> Result<CellLoss<T>> {
    let TargetProb { p_t, dpt_dp } = target_prob(p, target, eps)?;
    let alpha_t = if target { alpha } else { T::one() - alpha };
    let q = T::one() - p_t;
    let neg_log = -p_t.ln();
    let weight = q.powf(gamma);
    // d/dp_t of -(1-p_t)^gamma log(p_t)
    let d_weight = if gamma == T::zero() {
        T::zero()
    } else {
        gamma * q.powf(gamma - T::one())
    };
    let dv_dpt = alpha_t * (d_weight * p_t.ln() - weight / p_t);
    Ok(CellLoss {
        value: alpha_t * (weight * neg_log),
        d_dp: dv_dpt * dpt_dp,
    })
}

/// Focal loss scaled by the balancing weight `cfg.xi`.
pub fn balanced_focal_loss<T: Scalar>(
    p: T,
    target: bool,
    cfg: &LossConfig<T>,
) -> Result<CellLoss<T>> {
    Ok(focal_loss(p, target, cfg.alpha, cfg.gamma, cfg.eps)?.scaled(cfg.xi))
}

/// Compares a kernel's analytic derivative with a central difference at `p`.
///
/// Returns `|analytic - numeric| / max(1, |analytic|)`. Points closer than
/// `2h` to either end of `[0, 1]` are rejected because the stencil would
/// reach into the clamped region.
pub fn grad_check_cell<T, F>(kernel: F, p: T, target: bool, h: T) -> Result<T>
where
    T: Scalar,
    F: Fn(T, bool) -> Result<CellLoss<T>>,
{
    if !h.is_finite() || h <= T::zero() {
        return Err(Error::domain(format!("step must be positive, got {h}")));
    }
    let two_h = h + h;
    if !(p >= two_h && p <= T::one() - two_h) {
        return Err(Error::domain(format!(
            "check point p={p} lies within 2h={two_h} of the clamp boundary"
        )));
    }
    let analytic = kernel(p, target)?.d_dp;
    let plus = kernel(p + h, target)?.value;
    let minus = kernel(p - h, target)?.value;
    let numeric = (plus - minus) / two_h;
    Ok((analytic - numeric).abs() / T::one().max(analytic.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EPS: f64 = 1e-7;
    // Computed with 30-digit arithmetic.
    const FOCAL_HALF: f64 = 0.061_266_133_966_784_2;
    const BALANCED_HALF: f64 = 1.837_984_019_003_526;

    fn default_cfg() -> LossConfig<f64> {
        LossConfig::default()
    }

    #[test]
    fn ce_reference_values() {
        let perfect = ce_loss(1.0, true, EPS).unwrap();
        assert!(perfect.value <= -(1.0f64 - EPS).ln() + 1e-15);
        assert!(perfect.value >= 0.0);
        assert_eq!(perfect.d_dp, 0.0);

        assert!((ce_loss(0.5, true, EPS).unwrap().value - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((ce_loss(0.5, false, EPS).unwrap().value - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn ce_rejects_bad_probabilities() {
        assert!(matches!(ce_loss(f64::NAN, true, EPS), Err(Error::Domain(_))));
        assert!(matches!(ce_loss(f64::INFINITY, false, EPS), Err(Error::Domain(_))));
        assert!(matches!(ce_loss(1.5, false, EPS), Err(Error::Domain(_))));
        assert!(matches!(focal_loss(-0.1, true, 0.25, 1.5, EPS), Err(Error::Domain(_))));
    }

    #[test]
    fn clamped_region_has_zero_derivative() {
        let l = ce_loss(0.0, true, EPS).unwrap();
        assert!((l.value - (-(EPS.ln()))).abs() < 1e-12);
        assert_eq!(l.d_dp, 0.0);
        let f = focal_loss(1.0, false, 0.25, 1.5, EPS).unwrap();
        assert_eq!(f.d_dp, 0.0);
    }

    #[test]
    fn focal_reference_values() {
        let v = focal_loss(0.5, true, 0.25, 1.5, EPS).unwrap().value;
        assert!((v - FOCAL_HALF).abs() < 1e-15, "{v}");
        let perfect = focal_loss(1.0, true, 0.25, 1.5, EPS).unwrap().value;
        assert!((0.0..1e-12).contains(&perfect));
    }

    #[test]
    fn balanced_focal_reference_values() {
        let v = balanced_focal_loss(0.5, true, &default_cfg()).unwrap().value;
        assert!((v - BALANCED_HALF).abs() < 1e-13, "{v}");

        let unit = LossConfig { xi: 1.0, ..default_cfg() };
        for &p in &[0.01, 0.3, 0.5, 0.9] {
            for &t in &[true, false] {
                let a = balanced_focal_loss(p, t, &unit).unwrap();
                let b = focal_loss(p, t, 0.25, 1.5, EPS).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn xi_does_not_move_the_minimizer() {
        let grid: Vec<f64> = (1..1000).map(|i| i as f64 / 1000.0).collect();
        for &t in &[true, false] {
            let argmin = |xi: f64| {
                let cfg = LossConfig { xi, ..default_cfg() };
                grid.iter()
                    .copied()
                    .min_by(|&a, &b| {
                        let la = balanced_focal_loss(a, t, &cfg).unwrap().value;
                        let lb = balanced_focal_loss(b, t, &cfg).unwrap().value;
                        la.partial_cmp(&lb).unwrap()
                    })
                    .unwrap()
            };
            let reference = argmin(1.0);
            for xi in [0.5, 2.0, 30.0, 1000.0] {
                assert_eq!(argmin(xi), reference);
            }
        }
    }

    #[test]
    fn grad_check_examples() {
        let ce = |p, t| ce_loss(p, t, EPS);
        assert!(grad_check_cell(ce, 0.3, true, 1e-5).unwrap() < 1e-6);

        let cfg = default_cfg();
        let bfl = |p, t| balanced_focal_loss(p, t, &cfg);
        assert!(grad_check_cell(bfl, 0.7, false, 1e-5).unwrap() < 1e-6);

        let off = focal_loss(0.42, false, 0.3, 0.0, EPS).unwrap();
        let scaled = ce_loss(0.42, false, EPS).unwrap();
        assert!((off.d_dp - 0.7 * scaled.d_dp).abs() < 1e-12);
    }

    #[test]
    fn grad_check_rejects_boundary_points() {
        let ce = |p, t| ce_loss(p, t, EPS);
        assert!(matches!(grad_check_cell(ce, 1e-5, true, 1e-5), Err(Error::Domain(_))));
        assert!(matches!(grad_check_cell(ce, 1.0 - 1e-5, false, 1e-5), Err(Error::Domain(_))));
    }

    #[test]
    fn grad_check_notices_a_wrong_derivative() {
        let broken = |p: f64, t| {
            let mut l = ce_loss(p, t, EPS)?;
            l.d_dp *= 1.01;
            Ok(l)
        };
        assert!(grad_check_cell(broken, 0.3, true, 1e-5).unwrap() > 1e-3);
    }

    #[test]
    fn config_validation() {
        assert!(default_cfg().validate().is_ok());
        for bad in [
            LossConfig { alpha: 1.0, ..default_cfg() },
            LossConfig { alpha: 0.0, ..default_cfg() },
            LossConfig { gamma: -0.1, ..default_cfg() },
            LossConfig { xi: 0.0, ..default_cfg() },
            LossConfig { rank_b: 0.0, ..default_cfg() },
            LossConfig { rank_b: 1.01, ..default_cfg() },
            LossConfig { eps: 0.5, ..default_cfg() },
            LossConfig { gamma: f64::NAN, ..default_cfg() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn ignored_fields_do_not_change_outputs() {
        let base = default_cfg();
        let bce = base.with_variant(LossVariant::Bce);
        let bce_alt = LossConfig { gamma: 3.0, xi: 7.0, alpha: 0.6, ..bce };
        let lrm = base.with_variant(LossVariant::Lrm);
        let lrm_alt = LossConfig { gamma: 0.2, ..lrm };
        for &p in &[0.05, 0.5, 0.93] {
            for &t in &[true, false] {
                assert_eq!(bce.kernel().eval(p, t).unwrap(), bce_alt.kernel().eval(p, t).unwrap());
                assert_eq!(lrm.kernel().eval(p, t).unwrap(), lrm_alt.kernel().eval(p, t).unwrap());
            }
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in LossVariant::ALL {
            assert_eq!(v.name().parse::<LossVariant>().unwrap(), v);
        }
        assert_eq!("Balanced-Focal".parse::<LossVariant>().unwrap(), LossVariant::BalancedFocal);
        assert!("ohem".parse::<LossVariant>().is_err());
    }

    #[test]
    fn f32_kernels_track_f64() {
        let cfg32 = LossConfig::<f32>::default();
        let cfg64 = default_cfg();
        for &p in &[0.1f32, 0.5, 0.8] {
            let a = balanced_focal_loss(p, true, &cfg32).unwrap();
            let b = balanced_focal_loss(p as f64, true, &cfg64).unwrap();
            assert!((a.value as f64 - b.value).abs() < 1e-4 * b.value.max(1.0));
            assert!((a.d_dp as f64 - b.d_dp).abs() < 1e-4 * b.d_dp.abs().max(1.0));
        }
    }

    proptest! {
        #[test]
        fn values_are_finite_and_non_negative(p in 0.0f64..=1.0, t: bool, alpha in 0.01f64..0.99, gamma in 0.0f64..5.0) {
            for l in [ce_loss(p, t, EPS).unwrap(), focal_loss(p, t, alpha, gamma, EPS).unwrap()] {
                prop_assert!(l.value >= 0.0 && l.value.is_finite());
                prop_assert!(l.d_dp.is_finite());
            }
        }

        #[test]
        fn loss_strictly_decreases_in_target_probability(a in 1e-6f64..0.999, b in 1e-6f64..0.999, t: bool, gamma in 0.0f64..4.0) {
            prop_assume!((a - b).abs() > 1e-9);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            // express as p_t: p_t = p for positives, 1 - p for negatives
            let to_p = |pt: f64| if t { pt } else { 1.0 - pt };
            let l_lo = focal_loss(to_p(lo), t, 0.25, gamma, EPS).unwrap().value;
            let l_hi = focal_loss(to_p(hi), t, 0.25, gamma, EPS).unwrap().value;
            prop_assert!(l_hi < l_lo);
        }

        #[test]
        fn xi_scaling_is_exact(p in 0.0f64..=1.0, t: bool, xi in 0.01f64..100.0) {
            let cfg = LossConfig { xi, ..default_cfg() };
            let b = balanced_focal_loss(p, t, &cfg).unwrap();
            let f = focal_loss(p, t, cfg.alpha, cfg.gamma, EPS).unwrap();
            prop_assert_eq!(b.value, xi * f.value);
            prop_assert_eq!(b.d_dp, xi * f.d_dp);
        }

        #[test]
        fn kernels_pass_finite_difference_checks(p in 0.001f64..0.999, t: bool, gamma in 0.0f64..3.0, xi in 0.5f64..40.0) {
            let cfg = LossConfig { gamma, xi, ..default_cfg() };
            let h = 1e-6;
            let ce = |p, t| ce_loss(p, t, EPS);
            let fl = |p, t| focal_loss(p, t, cfg.alpha, cfg.gamma, EPS);
            let bfl = |p, t| balanced_focal_loss(p, t, &cfg);
            prop_assert!(grad_check_cell(ce, p, t, h).unwrap() < 1e-4);
            prop_assert!(grad_check_cell(fl, p, t, h).unwrap() < 1e-4);
            prop_assert!(grad_check_cell(bfl, p, t, h).unwrap() < 1e-4);
        }
    }
}
