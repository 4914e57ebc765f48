//! Layer-wise attention, cosine alignment, and the composite training loss,
//! with analytic gradients for every piece.
//!
//! The attention of a feature stack is the plain channel mean; its agreement
//! with an action-unit heatmap is their cosine similarity over pixels; and
//! the training loss is cross-entropy plus `lambda` times the summed
//! per-layer alignment losses `1 - cosine`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::map::Map2;

/// A stack of `channels` spatial maps produced by one network layer, stored
/// `[channel][y][x]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    layer_id: String,
    channels: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl FeatureStack {
    pub fn new(layer_id: impl Into<String>, channels: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert!(channels > 0 && h > 0 && w > 0, "FeatureStack dimensions must be nonzero");
        assert_eq!(data.len(), channels * h * w, "FeatureStack buffer length mismatch");
        Self { layer_id: layer_id.into(), channels, h, w, data }
    }

    pub fn zeros(layer_id: impl Into<String>, channels: usize, h: usize, w: usize) -> Self {
        Self::new(layer_id, channels, h, w, vec![0.0; channels * h * w])
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Spatial shape `(h, w)`.
    pub fn spatial(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.h * self.w;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// The channel-mean attention of a [`FeatureStack`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub layer_id: String,
    pub values: Map2,
}

/// Channel mean: `T(y, x) = (1/n) * sum_c F[c](y, x)`.
pub fn layer_attention(f: &FeatureStack) -> AttentionMap {
    let (h, w) = f.spatial();
    let plane = h * w;
    let mut values = vec![0.0; plane];
    for c in 0..f.channels() {
        let ch = f.channel(c);
        for (acc, v) in values.iter_mut().zip(ch) {
            *acc += v;
        }
    }
    let inv = 1.0 / f.channels() as f64;
    for v in &mut values {
        *v *= inv;
    }
    AttentionMap { layer_id: f.layer_id.clone(), values: Map2::from_vec(h, w, values) }
}

/// Backward of [`layer_attention`]: broadcasts `d_attention / n` to every
/// channel.
pub fn layer_attention_backward(d_attention: &Map2, like: &FeatureStack) -> FeatureStack {
    assert_eq!(d_attention.shape(), like.spatial(), "attention gradient shape mismatch");
    let inv = 1.0 / like.channels() as f64;
    let plane = d_attention.len();
    let mut data = Vec::with_capacity(like.channels() * plane);
    for _ in 0..like.channels() {
        data.extend(d_attention.data().iter().map(|g| g * inv));
    }
    FeatureStack::new(like.layer_id.clone(), like.channels(), like.h, like.w, data)
}

/// Cosine similarity between two same-shape maps, flattened.
///
/// When either map has zero norm the similarity is undefined; this returns
/// `(0.0, true)` in that case (and the gradient of the alignment loss is
/// taken as zero there). Otherwise the flag is `false`.
pub fn cosine_sim_flagged(t: &Map2, a: &Map2) -> (f64, bool) {
    assert_eq!(t.shape(), a.shape(), "cosine_sim shape mismatch");
    let nt = t.norm2();
    let na = a.norm2();
    if nt == 0.0 || na == 0.0 {
        return (0.0, true);
    }
    (t.dot(a) / (nt * na), false)
}

/// [`cosine_sim_flagged`] without the zero-norm flag.
pub fn cosine_sim(t: &Map2, a: &Map2) -> f64 {
    cosine_sim_flagged(t, a).0
}

/// Alignment loss `1 - cosine_sim(t, a)`, in `[0, 2]`.
pub fn alignment_loss(t: &Map2, a: &Map2) -> f64 {
    1.0 - cosine_sim(t, a)
}

/// Alignment loss with its gradient with respect to `t`.
///
/// With `R = cos(T, A)`, the gradient of `1 - R` is
/// `-(A / (|T| |A|) - R * T / |T|^2)`. Returns `(loss, d_loss/dT,
/// zero_norm)`; a zero-norm input yields loss 1 and an all-zero gradient.
pub fn alignment_loss_grad(t: &Map2, a: &Map2) -> (f64, Map2, bool) {
    assert_eq!(t.shape(), a.shape(), "alignment_loss_grad shape mismatch");
    let nt = t.norm2();
    let na = a.norm2();
    if nt == 0.0 || na == 0.0 {
        return (1.0, Map2::zeros(t.h(), t.w()), true);
    }
    let r = t.dot(a) / (nt * na);
    let mut grad = Map2::zeros(t.h(), t.w());
    let inv_tna = 1.0 / (nt * na);
    let r_over_t2 = r / (nt * nt);
    for i in 0..t.len() {
        let g = -(a.data()[i] * inv_tna - r_over_t2 * t.data()[i]);
        grad.data_mut()[i] = g;
    }
    (1.0 - r, grad, false)
}

/// Alignment loss and its gradient pushed back to the feature stack.
///
/// Computes `1 - cos(attention(f), a)` and `d/dF` of it in one step.
pub fn aligned_pair_loss_grad(f: &FeatureStack, a: &Map2) -> (f64, FeatureStack, bool) {
    let t = layer_attention(f);
    let (loss, d_t, zero_norm) = alignment_loss_grad(&t.values, a);
    (loss, layer_attention_backward(&d_t, f), zero_norm)
}

/// Per-term breakdown of the composite loss for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// `cross_entropy + lambda * alignment`.
    pub total: f64,
    /// `-log p(y)`.
    pub cross_entropy: f64,
    /// Sum of `1 - cosine` over the aligned layers (0.0 when none).
    pub alignment: f64,
    /// How many aligned layers hit the zero-norm guard.
    pub zero_norm_terms: usize,
}

/// Composite loss for one sample: cross-entropy on `log_probs` at the true
/// class plus `lambda` times the summed alignment losses of
/// `(attention, target)` map pairs.
///
/// With `lambda == 0` the result is exactly the cross-entropy: the
/// alignment terms are not evaluated, so no floating-point residue of the
/// alignment path can leak in.
pub fn composite_loss(
    log_probs: &[f64],
    true_class: usize,
    pairs: &[(&Map2, &Map2)],
    lambda: f64,
) -> Result<LossBreakdown, AlignError> {
    let ce = cross_entropy(log_probs, true_class)?;
    if lambda < 0.0 {
        return Err(AlignError::NegativeLambda { lambda });
    }
    if lambda == 0.0 {
        return Ok(LossBreakdown { total: ce, cross_entropy: ce, alignment: 0.0, zero_norm_terms: 0 });
    }
    let mut alignment = 0.0;
    let mut zero_norm_terms = 0;
    for (t, a) in pairs {
        let (r, flagged) = cosine_sim_flagged(t, a);
        alignment += 1.0 - r;
        zero_norm_terms += flagged as usize;
    }
    Ok(LossBreakdown {
        total: ce + lambda * alignment,
        cross_entropy: ce,
        alignment,
        zero_norm_terms,
    })
}

/// [`composite_loss`] taking feature stacks, also returning the gradient of
/// the total loss with respect to each stack.
///
/// The cross-entropy part's gradient lives in logit space and belongs to
/// the classifier; only the alignment gradients flow through here. With
/// `lambda == 0` the returned gradients are exactly zero stacks.
pub fn composite_loss_grad_features(
    log_probs: &[f64],
    true_class: usize,
    pairs: &[(&FeatureStack, &Map2)],
    lambda: f64,
) -> Result<(LossBreakdown, Vec<FeatureStack>), AlignError> {
    let ce = cross_entropy(log_probs, true_class)?;
    if lambda < 0.0 {
        return Err(AlignError::NegativeLambda { lambda });
    }
    if lambda == 0.0 {
        let grads = pairs
            .iter()
            .map(|(f, _)| FeatureStack::zeros(f.layer_id.clone(), f.channels, f.h, f.w))
            .collect();
        return Ok((
            LossBreakdown { total: ce, cross_entropy: ce, alignment: 0.0, zero_norm_terms: 0 },
            grads,
        ));
    }
    let mut alignment = 0.0;
    let mut zero_norm_terms = 0;
    let mut grads = Vec::with_capacity(pairs.len());
    for (f, a) in pairs {
        let (loss, mut grad, flagged) = aligned_pair_loss_grad(f, a);
        alignment += loss;
        zero_norm_terms += flagged as usize;
        for g in grad.data_mut() {
            *g *= lambda;
        }
        grads.push(grad);
    }
    Ok((
        LossBreakdown {
            total: ce + lambda * alignment,
            cross_entropy: ce,
            alignment,
            zero_norm_terms,
        },
        grads,
    ))
}

fn cross_entropy(log_probs: &[f64], true_class: usize) -> Result<f64, AlignError> {
    if true_class >= log_probs.len() {
        return Err(AlignError::ClassOutOfRange { class: true_class, classes: log_probs.len() });
    }
    Ok(-log_probs[true_class])
}

/// Errors from the composite loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlignError {
    /// True-class index at or beyond the class count.
    ClassOutOfRange { class: usize, classes: usize },
    /// The alignment weight must be nonnegative.
    NegativeLambda { lambda: f64 },
}

impl fmt::Display for AlignError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlignError::ClassOutOfRange { class, classes } => {
                write!(f, "true-class index {class} out of range for {classes} classes")
            }
            AlignError::NegativeLambda { lambda } => {
                write!(f, "alignment weight must be nonnegative, got {lambda}")
            }
        }
    }
}

impl core::error::Error for AlignError {}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stack_from(channels: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> FeatureStack {
        let mut data = Vec::with_capacity(channels * h * w);
        for c in 0..channels {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(c, y, x));
                }
            }
        }
        FeatureStack::new("test", channels, h, w, data)
    }

    #[test]
    fn attention_is_channel_mean() {
        // Three channels holding c+1 everywhere: mean is 2 everywhere.
        let f = stack_from(3, 2, 2, |c, _, _| (c + 1) as f64);
        let t = layer_attention(&f);
        assert!(t.values.data().iter().all(|&v| v == 2.0));
        assert_eq!(t.layer_id, "test");
    }

    #[test]
    fn attention_matches_brute_force_mean() {
        let f = stack_from(5, 3, 4, |c, y, x| (c * 31 + y * 7 + x * 3) as f64 * 0.01 - 0.4);
        let t = layer_attention(&f);
        for y in 0..3 {
            for x in 0..4 {
                let mean: f64 =
                    (0..5).map(|c| f.channel(c)[y * 4 + x]).sum::<f64>() / 5.0;
                assert!((t.values.get(y, x) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_elementwise_mean_example() {
        let f = FeatureStack::new(
            "test",
            2,
            2,
            2,
            vec![0.0, 2.0, 4.0, 6.0, 2.0, 0.0, 0.0, 2.0],
        );
        let t = layer_attention(&f);
        assert_eq!(t.values.data(), &[1.0, 1.0, 2.0, 4.0]);
    }

    #[test]
    fn attention_of_single_channel_is_identity() {
        let f = stack_from(1, 3, 2, |_, y, x| (y * 2 + x) as f64 * 0.3);
        let t = layer_attention(&f);
        assert_eq!(t.values.data(), f.channel(0));
    }

    #[test]
    fn cosine_half_overlap_is_inverse_sqrt_two() {
        let t = Map2::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        let a = Map2::from_vec(2, 2, vec![1.0, 1.0, 0.0, 0.0]);
        let r = cosine_sim(&t, &a);
        assert!((r - 1.0 / 2f64.sqrt()).abs() < 1e-9, "got {r}");
        assert!((alignment_loss(&t, &a) - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-9);
    }

    #[test]
    fn cosine_disjoint_supports_is_zero() {
        let t = Map2::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        let a = Map2::from_vec(2, 2, vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(cosine_sim(&t, &a), 0.0);
        assert_eq!(alignment_loss(&t, &a), 1.0);
    }

    #[test]
    fn composite_loss_worked_examples() {
        let half = 0.5f64.ln();
        // Pure cross-entropy at p_y = 0.5.
        let out = composite_loss(&[half, half], 0, &[], 0.0).unwrap();
        assert!((out.total - 0.693_147_18).abs() < 1e-7);

        // Perfect alignment contributes nothing even at lambda = 4.
        let a = Map2::from_vec(1, 2, vec![0.3, 0.7]);
        let out = composite_loss(&[half, half], 0, &[(&a, &a)], 4.0).unwrap();
        assert!((out.total - 0.693_147_18).abs() < 1e-7);

        // One pair at cosine 1/sqrt(2).
        let t = Map2::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        let a = Map2::from_vec(2, 2, vec![1.0, 1.0, 0.0, 0.0]);
        let out = composite_loss(&[half, half], 0, &[(&t, &a)], 4.0).unwrap();
        let want = 0.693_147_180_559_945 + 4.0 * (1.0 - 1.0 / 2f64.sqrt());
        assert!((out.total - want).abs() < 1e-9);
        assert!((out.total - 1.864_72).abs() < 1e-4);
    }

    #[test]
    fn cosine_basic_values() {
        let a = Map2::from_vec(1, 2, vec![1.0, 0.0]);
        let b = Map2::from_vec(1, 2, vec![0.0, 1.0]);
        assert_eq!(cosine_sim(&a, &a), 1.0);
        assert_eq!(cosine_sim(&a, &b), 0.0);
        let c = Map2::from_vec(1, 2, vec![-1.0, 0.0]);
        assert_eq!(cosine_sim(&a, &c), -1.0);
    }

    #[test]
    fn cosine_zero_norm_flag() {
        let z = Map2::zeros(2, 2);
        let a = Map2::filled(2, 2, 1.0);
        assert_eq!(cosine_sim_flagged(&z, &a), (0.0, true));
        assert_eq!(cosine_sim_flagged(&a, &z), (0.0, true));
        let (_, grad, flagged) = alignment_loss_grad(&z, &a);
        assert!(flagged);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn proportional_maps_have_zero_alignment_loss() {
        let a = Map2::from_vec(2, 2, vec![0.1, 0.4, 0.2, 0.9]);
        let mut t = a.clone();
        t.map_inplace(|v| 3.7 * v);
        assert!(alignment_loss(&t, &a).abs() < 1e-12);
    }

    #[test]
    fn alignment_grad_matches_finite_differences() {
        let t = Map2::from_vec(2, 3, vec![0.3, -0.2, 0.8, 0.5, 0.1, -0.6]);
        let a = Map2::from_vec(2, 3, vec![0.9, 0.1, 0.2, 0.7, 0.3, 0.4]);
        let (_, grad, _) = alignment_loss_grad(&t, &a);
        let eps = 1e-6;
        for i in 0..t.len() {
            let mut plus = t.clone();
            plus.data_mut()[i] += eps;
            let mut minus = t.clone();
            minus.data_mut()[i] -= eps;
            let fd = (alignment_loss(&plus, &a) - alignment_loss(&minus, &a)) / (2.0 * eps);
            assert!(
                (grad.data()[i] - fd).abs() < 1e-8,
                "cell {i}: analytic {}, fd {fd}",
                grad.data()[i]
            );
        }
    }

    #[test]
    fn pair_grad_matches_finite_differences_through_attention() {
        let f = stack_from(4, 2, 2, |c, y, x| ((c * 13 + y * 5 + x * 2) % 9) as f64 * 0.1 + 0.05);
        let a = Map2::from_vec(2, 2, vec![0.9, 0.2, 0.4, 0.6]);
        let (_, grad, _) = aligned_pair_loss_grad(&f, &a);
        let eps = 1e-6;
        for i in 0..f.data().len() {
            let mut plus = f.clone();
            plus.data_mut()[i] += eps;
            let mut minus = f.clone();
            minus.data_mut()[i] -= eps;
            let lp = alignment_loss(&layer_attention(&plus).values, &a);
            let lm = alignment_loss(&layer_attention(&minus).values, &a);
            let fd = (lp - lm) / (2.0 * eps);
            assert!((grad.data()[i] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn composite_lambda_zero_is_bit_exact_cross_entropy() {
        let log_probs = [-1.2039728043259361, -0.3566749439387324, -4.605170185988091];
        let t = Map2::from_vec(1, 2, vec![0.2, 0.8]);
        let a = Map2::from_vec(1, 2, vec![0.9, 0.1]);
        let out = composite_loss(&log_probs, 1, &[(&t, &a)], 0.0).unwrap();
        assert_eq!(out.total, 0.3566749439387324);
        assert_eq!(out.total, out.cross_entropy);
        assert_eq!(out.alignment, 0.0);
    }

    #[test]
    fn composite_adds_lambda_weighted_alignment() {
        let log_probs = [-0.5, -1.5];
        let t = Map2::from_vec(1, 2, vec![1.0, 0.0]);
        let a = Map2::from_vec(1, 2, vec![0.0, 1.0]);
        // cosine 0 -> alignment 1; total = 0.5 + 4 * 1.
        let out = composite_loss(&log_probs, 0, &[(&t, &a)], 4.0).unwrap();
        assert!((out.total - 4.5).abs() < 1e-12);
        assert_eq!(out.zero_norm_terms, 0);
    }

    #[test]
    fn composite_class_out_of_range() {
        let log_probs = [-0.5, -1.5];
        assert_eq!(
            composite_loss(&log_probs, 2, &[], 0.0).unwrap_err(),
            AlignError::ClassOutOfRange { class: 2, classes: 2 }
        );
    }

    #[test]
    fn composite_grad_lambda_zero_is_zero_stacks() {
        let f = stack_from(2, 2, 2, |c, y, x| (c + y + x) as f64);
        let a = Map2::filled(2, 2, 0.5);
        let (out, grads) = composite_loss_grad_features(&[-0.7, -0.7], 0, &[(&f, &a)], 0.0).unwrap();
        assert_eq!(out.total, 0.7);
        assert_eq!(grads.len(), 1);
        assert!(grads[0].data().iter().all(|&g| g == 0.0));
    }

    proptest! {
        #[test]
        fn cosine_is_bounded_and_symmetric(
            t_seed in proptest::collection::vec(-10.0f64..10.0, 12),
            a_seed in proptest::collection::vec(-10.0f64..10.0, 12),
        ) {
            let t = Map2::from_vec(3, 4, t_seed);
            let a = Map2::from_vec(3, 4, a_seed);
            let r = cosine_sim(&t, &a);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            prop_assert!((r - cosine_sim(&a, &t)).abs() < 1e-12);
        }

        #[test]
        fn cosine_is_scale_invariant(
            t_seed in proptest::collection::vec(-10.0f64..10.0, 12),
            a_seed in proptest::collection::vec(0.0f64..1.0, 12),
            c in 1e-3f64..1e3,
        ) {
            let t = Map2::from_vec(3, 4, t_seed);
            let a = Map2::from_vec(3, 4, a_seed);
            prop_assume!(t.norm2() > 1e-9 && a.norm2() > 1e-9);
            let mut ct = t.clone();
            ct.map_inplace(|v| c * v);
            prop_assert!((cosine_sim(&ct, &a) - cosine_sim(&t, &a)).abs() < 1e-6);
        }

        #[test]
        fn alignment_loss_stays_in_range(
            t_seed in proptest::collection::vec(-10.0f64..10.0, 12),
            a_seed in proptest::collection::vec(-10.0f64..10.0, 12),
        ) {
            let t = Map2::from_vec(3, 4, t_seed);
            let a = Map2::from_vec(3, 4, a_seed);
            let l = alignment_loss(&t, &a);
            prop_assert!((-1e-12..=2.0 + 1e-12).contains(&l));
        }
    }
}
