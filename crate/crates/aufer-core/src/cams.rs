//! Class activation map formulas over feature stacks.
//!
//! Four methods share one contract: given the final feature stack (and for
//! the gradient methods, the gradient of the target class score with
//! respect to it), produce a single spatial map, min-max normalized onto
//! `[0, 1]`. A constant raw map (e.g. from all-zero gradients) normalizes
//! to all zeros.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::align::FeatureStack;
use crate::map::Map2;

/// The built-in class activation map methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CamMethod {
    /// Head-weight weighted sum of feature maps; needs a global-average-pool
    /// plus linear classifier head.
    Cam,
    /// Channel weights from spatially averaged score gradients, ReLU on the
    /// combination.
    GradCam,
    /// Pixelwise channel weights from second- and third-order gradient
    /// terms under an exponential score transform.
    GradCamPp,
    /// Elementwise product of ReLU'd gradients and features, summed over
    /// channels.
    LayerCam,
}

impl CamMethod {
    pub const ALL: [CamMethod; 4] =
        [CamMethod::Cam, CamMethod::GradCam, CamMethod::GradCamPp, CamMethod::LayerCam];

    pub fn id(self) -> &'static str {
        match self {
            CamMethod::Cam => "cam",
            CamMethod::GradCam => "gradcam",
            CamMethod::GradCamPp => "gradcampp",
            CamMethod::LayerCam => "layercam",
        }
    }

    pub fn parse(s: &str) -> Option<CamMethod> {
        CamMethod::ALL.into_iter().find(|m| m.id() == s.to_ascii_lowercase())
    }

    /// True when the method needs score gradients (everything but plain
    /// weight-based CAM).
    pub fn needs_gradients(self) -> bool {
        !matches!(self, CamMethod::Cam)
    }
}

impl fmt::Display for CamMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Classifier head weights, row-major `(classes, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    classes: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ClassWeights {
    pub fn new(classes: usize, channels: usize, data: Vec<f64>) -> Self {
        assert!(classes > 0 && channels > 0, "ClassWeights dimensions must be nonzero");
        assert_eq!(data.len(), classes * channels, "ClassWeights buffer length mismatch");
        Self { classes, channels, data }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.data[class * self.channels..(class + 1) * self.channels]
    }
}

/// One normalized map per class, all the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct CamStack {
    pub method: CamMethod,
    maps: Vec<Map2>,
}

impl CamStack {
    /// Panics if `maps` is empty or shapes disagree; per-class maps of one
    /// sample always share the feature stack's spatial shape.
    pub fn new(method: CamMethod, maps: Vec<Map2>) -> Self {
        assert!(!maps.is_empty(), "CamStack needs at least one class map");
        let shape = maps[0].shape();
        assert!(maps.iter().all(|m| m.shape() == shape), "CamStack maps must share a shape");
        Self { method, maps }
    }

    pub fn classes(&self) -> usize {
        self.maps.len()
    }

    pub fn class_map(&self, k: usize) -> &Map2 {
        &self.maps[k]
    }

    pub fn maps(&self) -> &[Map2] {
        &self.maps
    }
}

/// Weight-based CAM: `sum_c w[k][c] * F[c]`, min-max normalized.
pub fn cam(features: &FeatureStack, weights: &ClassWeights, class: usize) -> Result<Map2, CamError> {
    if weights.channels() != features.channels() {
        return Err(CamError::ChannelMismatch {
            features: features.channels(),
            weights: weights.channels(),
        });
    }
    if class >= weights.classes() {
        return Err(CamError::ClassOutOfRange { class, classes: weights.classes() });
    }
    let row = weights.row(class);
    let raw = weighted_channel_sum(features, |c, _| row[c]);
    Ok(raw.minmax_normalized())
}

/// Gradient CAM: channel weights are the spatial means of the score
/// gradients; the weighted sum is ReLU'd, then min-max normalized.
pub fn gradcam(features: &FeatureStack, score_grads: &FeatureStack) -> Result<Map2, CamError> {
    check_same_shape(features, score_grads)?;
    let plane = features.spatial().0 * features.spatial().1;
    let alphas: Vec<f64> = (0..features.channels())
        .map(|c| score_grads.channel(c).iter().sum::<f64>() / plane as f64)
        .collect();
    let mut raw = weighted_channel_sum(features, |c, _| alphas[c]);
    raw.map_inplace(|v| v.max(0.0));
    Ok(raw.minmax_normalized())
}

/// Second- and third-order gradient terms for [`gradcampp`].
///
/// Under the usual exponential score transform `Y = exp(score)`, the
/// second and third derivatives of `Y` with respect to each feature cell
/// are `Y * g^2` and `Y * g^3` where `g` is the score gradient; the `Y`
/// factor cancels inside the pixelwise weights, so only the elementwise
/// powers are kept. Stored flat in the feature stack's layout.
#[derive(Debug, Clone, PartialEq)]
pub struct HigherOrderTerms {
    pub grad_sq: Vec<f64>,
    pub grad_cu: Vec<f64>,
}

impl HigherOrderTerms {
    /// Derives both terms from plain score gradients (exponential-score
    /// convention).
    pub fn from_score_grads(score_grads: &FeatureStack) -> Self {
        let grad_sq: Vec<f64> = score_grads.data().iter().map(|g| g * g).collect();
        let grad_cu: Vec<f64> = score_grads.data().iter().map(|g| g * g * g).collect();
        Self { grad_sq, grad_cu }
    }
}

/// Second-order CAM variant: pixelwise channel weights
/// `alpha = g^2 / (2 g^2 + sum_spatial(F * g^3))` (zero where the
/// denominator vanishes), channel weight `w_c = sum_spatial(alpha * relu(g))`,
/// then ReLU and min-max normalization of the weighted sum.
pub fn gradcampp(
    features: &FeatureStack,
    score_grads: &FeatureStack,
    higher: &HigherOrderTerms,
) -> Result<Map2, CamError> {
    check_same_shape(features, score_grads)?;
    if higher.grad_sq.len() != features.data().len() || higher.grad_cu.len() != features.data().len() {
        return Err(CamError::ChannelMismatch {
            features: features.channels(),
            weights: higher.grad_sq.len() / (features.spatial().0 * features.spatial().1).max(1),
        });
    }
    let (h, w) = features.spatial();
    let plane = h * w;
    let mut weights = vec![0.0; features.channels()];
    for c in 0..features.channels() {
        let f = features.channel(c);
        let g = score_grads.channel(c);
        let g2 = &higher.grad_sq[c * plane..(c + 1) * plane];
        let g3 = &higher.grad_cu[c * plane..(c + 1) * plane];
        let fg3: f64 = f.iter().zip(g3).map(|(fv, gv)| fv * gv).sum();
        let mut wc = 0.0;
        for p in 0..plane {
            let denom = 2.0 * g2[p] + fg3;
            if denom != 0.0 {
                let alpha = g2[p] / denom;
                wc += alpha * g[p].max(0.0);
            }
        }
        weights[c] = wc;
    }
    let mut raw = weighted_channel_sum(features, |c, _| weights[c]);
    raw.map_inplace(|v| v.max(0.0));
    Ok(raw.minmax_normalized())
}

/// Elementwise CAM: `sum_c relu(g[c]) * F[c]`, min-max normalized.
pub fn layercam(features: &FeatureStack, score_grads: &FeatureStack) -> Result<Map2, CamError> {
    check_same_shape(features, score_grads)?;
    let (h, w) = features.spatial();
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for c in 0..features.channels() {
        let f = features.channel(c);
        let g = score_grads.channel(c);
        for p in 0..plane {
            out[p] += g[p].max(0.0) * f[p];
        }
    }
    Ok(Map2::from_vec(h, w, out).minmax_normalized())
}

fn check_same_shape(features: &FeatureStack, grads: &FeatureStack) -> Result<(), CamError> {
    if features.channels() != grads.channels() || features.spatial() != grads.spatial() {
        return Err(CamError::ShapeMismatch {
            features: (features.channels(), features.spatial().0, features.spatial().1),
            grads: (grads.channels(), grads.spatial().0, grads.spatial().1),
        });
    }
    Ok(())
}

fn weighted_channel_sum(features: &FeatureStack, weight: impl Fn(usize, usize) -> f64) -> Map2 {
    let (h, w) = features.spatial();
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for c in 0..features.channels() {
        let f = features.channel(c);
        for p in 0..plane {
            out[p] += weight(c, p) * f[p];
        }
    }
    Map2::from_vec(h, w, out)
}

/// Errors from the CAM formulas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CamError {
    /// Feature and gradient stacks disagree in shape `(c, h, w)`.
    ShapeMismatch { features: (usize, usize, usize), grads: (usize, usize, usize) },
    /// Head weights (or higher-order terms) sized for a different channel
    /// count than the features.
    ChannelMismatch { features: usize, weights: usize },
    /// Requested class at or beyond the head's class count.
    ClassOutOfRange { class: usize, classes: usize },
}

impl fmt::Display for CamError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CamError::ShapeMismatch { features, grads } => {
                write!(f, "feature stack {features:?} and gradient stack {grads:?} disagree")
            }
            CamError::ChannelMismatch { features, weights } => {
                write!(f, "features have {features} channels but weights cover {weights}")
            }
            CamError::ClassOutOfRange { class, classes } => {
                write!(f, "class {class} out of range for {classes} classes")
            }
        }
    }
}

impl core::error::Error for CamError {}

/// Convenience: the method ids as strings, for registries and CLIs.
pub fn builtin_method_ids() -> Vec<String> {
    CamMethod::ALL.iter().map(|m| String::from(m.id())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stack(channels: usize, h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> FeatureStack {
        let plane = h * w;
        let mut data = Vec::with_capacity(channels * plane);
        for c in 0..channels {
            for p in 0..plane {
                data.push(f(c, p));
            }
        }
        FeatureStack::new("cam_test", channels, h, w, data)
    }

    #[test]
    fn cam_matches_hand_computed_weighted_sum() {
        // Two channels on a 1x2 grid; class 0 weights (2, -1).
        // Raw map: 2*[1, 3] - 1*[0, 4] = [2, 2]... use distinct cells.
        let f = stack(2, 1, 2, |c, p| ((c * 2 + p) as f64) + 1.0); // ch0 [1,2], ch1 [3,4]
        let w = ClassWeights::new(2, 2, vec![2.0, -1.0, 0.5, 0.5]);
        // class 0 raw: [2*1-3, 2*2-4] = [-1, 0] -> normalized [0, 1]
        let m = cam(&f, &w, 0).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0]);
        // class 1 raw: [2, 3] -> normalized [0, 1]
        let m = cam(&f, &w, 1).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0]);
    }

    #[test]
    fn cam_errors() {
        let f = stack(2, 2, 2, |_, _| 1.0);
        let w = ClassWeights::new(2, 3, vec![0.0; 6]);
        assert!(matches!(cam(&f, &w, 0), Err(CamError::ChannelMismatch { .. })));
        let w = ClassWeights::new(2, 2, vec![0.0; 4]);
        assert!(matches!(cam(&f, &w, 5), Err(CamError::ClassOutOfRange { class: 5, classes: 2 })));
    }

    #[test]
    fn gradcam_matches_hand_computation() {
        // One channel 2x2: F = [1,2,3,4], g = [1,1,-1,1] -> alpha = 0.5.
        // Raw: relu(0.5 * F) = [0.5, 1, 1.5, 2] -> minmax [0, 1/3, 2/3, 1].
        let f = stack(1, 2, 2, |_, p| (p + 1) as f64);
        let g = FeatureStack::new("cam_test", 1, 2, 2, vec![1.0, 1.0, -1.0, 1.0]);
        let m = gradcam(&f, &g).unwrap();
        let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (got, want) in m.data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gradcam_zero_grads_give_zero_map() {
        let f = stack(3, 4, 4, |c, p| (c + p) as f64);
        let g = FeatureStack::zeros("cam_test", 3, 4, 4);
        let m = gradcam(&f, &g).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradcampp_matches_literal_formula_transcription() {
        let f = stack(3, 3, 3, |c, p| ((c * 17 + p * 5) % 11) as f64 * 0.2 - 0.3);
        let g = stack(3, 3, 3, |c, p| ((c * 7 + p * 3) % 13) as f64 * 0.1 - 0.5);
        let higher = HigherOrderTerms::from_score_grads(&g);
        let m = gradcampp(&f, &g, &higher).unwrap();

        // Independent literal transcription of the alpha formula.
        let plane = 9;
        let mut raw = vec![0.0; plane];
        for c in 0..3 {
            let fc = f.channel(c);
            let gc = g.channel(c);
            let fg3: f64 = (0..plane).map(|p| fc[p] * gc[p].powi(3)).sum();
            let mut wc = 0.0;
            for p in 0..plane {
                let denom = 2.0 * gc[p] * gc[p] + fg3;
                if denom != 0.0 {
                    wc += (gc[p] * gc[p] / denom) * gc[p].max(0.0);
                }
            }
            for p in 0..plane {
                raw[p] += wc * fc[p];
            }
        }
        for v in &mut raw {
            *v = v.max(0.0);
        }
        let expect = Map2::from_vec(3, 3, raw).minmax_normalized();
        for (got, want) in m.data().iter().zip(expect.data()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gradcampp_single_cell_collapses_like_gradcam() {
        // On a single-pixel, single-channel stack both methods normalize a
        // one-value map, which the constant-map rule sends to zero.
        let f = stack(1, 1, 1, |_, _| 2.5);
        let g = FeatureStack::new("cam_test", 1, 1, 1, vec![0.7]);
        let higher = HigherOrderTerms::from_score_grads(&g);
        let pp = gradcampp(&f, &g, &higher).unwrap();
        let gc = gradcam(&f, &g).unwrap();
        assert_eq!(pp.data(), gc.data());
    }

    #[test]
    fn layercam_matches_hand_computation() {
        // Two channels 1x2: relu(g0)*F0 + relu(g1)*F1.
        let f = FeatureStack::new("cam_test", 2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let g = FeatureStack::new("cam_test", 2, 1, 2, vec![0.5, -1.0, 1.0, 0.25]);
        // raw = [0.5*1 + 1*3, 0*2 + 0.25*4] = [3.5, 1.0] -> minmax [1, 0]
        let m = layercam(&f, &g).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0]);
    }

    #[test]
    fn cam_one_hot_weights_select_a_channel() {
        let f = stack(3, 2, 2, |c, p| ((c * 5 + p * 3) % 7) as f64);
        let w = ClassWeights::new(1, 3, vec![0.0, 1.0, 0.0]);
        let m = cam(&f, &w, 0).unwrap();
        let want = Map2::from_vec(2, 2, f.channel(1).to_vec()).minmax_normalized();
        assert_eq!(m, want);
    }

    #[test]
    fn cam_all_zero_weights_give_zero_map() {
        let f = stack(3, 2, 2, |c, p| (c + p) as f64);
        let w = ClassWeights::new(1, 3, vec![0.0; 3]);
        let m = cam(&f, &w, 0).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cam_matches_brute_force_weighted_sum() {
        let f = stack(3, 4, 4, |c, p| ((c * 29 + p * 11) % 17) as f64 * 0.1 - 0.8);
        let w_data: Vec<f64> = (0..6).map(|i| (i as f64) * 0.4 - 1.0).collect();
        let w = ClassWeights::new(2, 3, w_data.clone());
        for k in 0..2 {
            let got = cam(&f, &w, k).unwrap();
            let mut raw = vec![0.0; 16];
            for c in 0..3 {
                for p in 0..16 {
                    raw[p] += w_data[k * 3 + c] * f.channel(c)[p];
                }
            }
            let want = Map2::from_vec(4, 4, raw).minmax_normalized();
            for (g, e) in got.data().iter().zip(want.data()) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradcam_single_channel_uniform_grad_is_positive_part() {
        let f = stack(1, 2, 3, |_, p| p as f64 - 2.0); // [-2,-1,0,1,2,3]
        let g = stack(1, 2, 3, |_, _| 0.5);
        let m = gradcam(&f, &g).unwrap();
        let want = Map2::from_vec(2, 3, vec![0.0, 0.0, 0.0, 0.5, 1.0, 1.5])
            .minmax_normalized();
        assert_eq!(m, want);
    }

    #[test]
    fn layercam_uniform_nonneg_grads_match_gradcam() {
        // Per-channel constant nonnegative gradients over nonnegative
        // features: both methods reduce to the same weighted channel sum.
        let f = stack(3, 3, 3, |c, p| ((c * 7 + p) % 5) as f64 * 0.3);
        let consts = [0.2, 0.0, 1.4];
        let g = stack(3, 3, 3, |c, _| consts[c]);
        let lc = layercam(&f, &g).unwrap();
        let gc = gradcam(&f, &g).unwrap();
        for (a, b) in lc.data().iter().zip(gc.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layercam_negative_grads_give_zero_map() {
        let f = stack(2, 3, 3, |c, p| (c + p) as f64 * 0.1 + 0.1);
        let g = stack(2, 3, 3, |_, _| -1.0);
        let m = layercam(&f, &g).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradcampp_zero_grads_give_zero_map() {
        let f = stack(2, 3, 3, |c, p| (c * 3 + p) as f64);
        let g = FeatureStack::zeros("cam_test", 2, 3, 3);
        let higher = HigherOrderTerms::from_score_grads(&g);
        let m = gradcampp(&f, &g, &higher).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let f = stack(2, 2, 2, |_, _| 1.0);
        let g = FeatureStack::zeros("cam_test", 2, 3, 2);
        assert!(matches!(gradcam(&f, &g), Err(CamError::ShapeMismatch { .. })));
        assert!(matches!(layercam(&f, &g), Err(CamError::ShapeMismatch { .. })));
    }

    #[test]
    fn method_ids_round_trip() {
        for m in CamMethod::ALL {
            assert_eq!(CamMethod::parse(m.id()), Some(m));
        }
        assert_eq!(CamMethod::parse("nope"), None);
    }

    proptest! {
        #[test]
        fn all_methods_produce_unit_range_maps(
            f_seed in proptest::collection::vec(-3.0f64..3.0, 2 * 16),
            g_seed in proptest::collection::vec(-3.0f64..3.0, 2 * 16),
            w_seed in proptest::collection::vec(-2.0f64..2.0, 3 * 2),
        ) {
            let f = FeatureStack::new("cam_test", 2, 4, 4, f_seed);
            let g = FeatureStack::new("cam_test", 2, 4, 4, g_seed);
            let w = ClassWeights::new(3, 2, w_seed);
            let higher = HigherOrderTerms::from_score_grads(&g);
            for m in [
                cam(&f, &w, 1).unwrap(),
                gradcam(&f, &g).unwrap(),
                gradcampp(&f, &g, &higher).unwrap(),
                layercam(&f, &g).unwrap(),
            ] {
                prop_assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
