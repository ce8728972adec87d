//! Affine map from raw conv features into `(0, 1)`.

use crate::error::{Result, VredError};
use crate::tensor::Tensor;

pub const DEFAULT_MARGIN: f64 = 0.05;

/// Feature range fitted once on the training corpus and frozen afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub feature_min: f64,
    pub feature_max: f64,
    pub margin: f64,
}

impl NormStats {
    pub fn new(feature_min: f64, feature_max: f64, margin: f64) -> Result<Self> {
        if !(feature_min.is_finite() && feature_max.is_finite() && feature_max > feature_min) {
            return Err(VredError::Config(format!(
                "normalization range [{feature_min}, {feature_max}] is empty"
            )));
        }
        if !(margin >= 0.0 && margin.is_finite()) {
            return Err(VredError::Config(format!(
                "normalization margin {margin} must be >= 0"
            )));
        }
        Ok(NormStats {
            feature_min,
            feature_max,
            margin,
        })
    }

    /// Placeholder range `[-1, 1]` for models whose codec has not been trained.
    pub fn unit() -> Self {
        NormStats {
            feature_min: -1.0,
            feature_max: 1.0,
            margin: 0.0,
        }
    }

    pub fn range(&self) -> f64 {
        self.feature_max - self.feature_min
    }

    /// `(f − min)/(max − min)` clamped to `[eps, 1 − eps]`.
    pub fn normalize(&self, f: &Tensor, eps: f64) -> Tensor {
        let r = self.range();
        f.map(|v| ((v - self.feature_min) / r).clamp(eps, 1.0 - eps))
    }

    pub fn denormalize(&self, u: &Tensor) -> Tensor {
        let r = self.range();
        u.map(|v| v * r + self.feature_min)
    }
}

/// Min/max over every feature value, widened by `margin·(max − min)` per side.
pub fn fit_normalization<'a>(
    features: impl IntoIterator<Item = &'a Tensor>,
    margin: f64,
) -> Result<NormStats> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut seen = false;
    for t in features {
        for &v in t.data() {
            lo = lo.min(v);
            hi = hi.max(v);
            seen = true;
        }
    }
    if !seen {
        return Err(VredError::DegenerateCorpus(
            "no features to fit normalization on".into(),
        ));
    }
    if !(hi > lo) {
        return Err(VredError::DegenerateCorpus(format!(
            "all features equal {lo}"
        )));
    }
    let pad = margin * (hi - lo);
    NormStats::new(lo - pad, hi + pad, margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fit_widens_by_margin() {
        let f = Tensor::vector(vec![-2.0, 0.3, 2.0]);
        let s = fit_normalization([&f], 0.05).unwrap();
        assert!((s.feature_min + 2.2).abs() < 1e-12);
        assert!((s.feature_max - 2.2).abs() < 1e-12);
    }

    #[test]
    fn constant_corpus_is_degenerate() {
        let f = Tensor::full(&[3, 4], 0.7);
        assert!(matches!(
            fit_normalization([&f], 0.05),
            Err(VredError::DegenerateCorpus(_))
        ));
        assert!(matches!(
            fit_normalization([], 0.05),
            Err(VredError::DegenerateCorpus(_))
        ));
    }

    #[test]
    fn normalize_examples() {
        let s = NormStats::new(-3.0, 5.0, 0.0).unwrap();
        let u = s.normalize(&Tensor::vector(vec![-3.0, 1.0, 9.0]), 1e-6);
        assert_eq!(u.data(), &[1e-6, 0.5, 1.0 - 1e-6]);
    }

    proptest! {
        #[test]
        fn round_trip_inside_range(lo in -10.0f64..0.0, width in 0.1f64..20.0, t in 0.001f64..0.999) {
            let s = NormStats::new(lo, lo + width, 0.0).unwrap();
            let f = Tensor::vector(vec![lo + t * width]);
            let back = s.denormalize(&s.normalize(&f, 1e-6));
            prop_assert!((back.item() - f.item()).abs() < 1e-12);
        }
    }
}
