//! Expression labels, action-unit records, and codebook validation.
//!
//! A codebook maps each of the seven expression labels to the facial action
//! units that characterize it. Every action unit carries one or more anchor
//! formulas: weighted combinations of 68-point landmark indices that resolve
//! to pixel positions at heatmap build time.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::landmarks::NUM_LANDMARKS;

/// The seven expression labels: the six basic expressions plus `Neutral`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Expression {
    Anger,
    Disgust,
    Fear,
    Happiness,
    Sadness,
    Surprise,
    Neutral,
}

impl Expression {
    /// All seven labels, in canonical order.
    pub const ALL: [Expression; 7] = [
        Expression::Anger,
        Expression::Disgust,
        Expression::Fear,
        Expression::Happiness,
        Expression::Sadness,
        Expression::Surprise,
        Expression::Neutral,
    ];

    /// The six basic expressions (everything but `Neutral`).
    pub const BASIC: [Expression; 6] = [
        Expression::Anger,
        Expression::Disgust,
        Expression::Fear,
        Expression::Happiness,
        Expression::Sadness,
        Expression::Surprise,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Expression::Anger => "Anger",
            Expression::Disgust => "Disgust",
            Expression::Fear => "Fear",
            Expression::Happiness => "Happiness",
            Expression::Sadness => "Sadness",
            Expression::Surprise => "Surprise",
            Expression::Neutral => "Neutral",
        }
    }

    /// Position in [`Expression::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    /// Parses a label, ignoring ASCII case.
    pub fn parse(s: &str) -> Result<Expression, UnknownExpression> {
        Expression::ALL
            .into_iter()
            .find(|e| e.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownExpression(s.to_string()))
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl core::str::FromStr for Expression {
    type Err = UnknownExpression;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Expression::parse(s)
    }
}

/// A label that is not one of the seven expressions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownExpression(pub String);

impl fmt::Display for UnknownExpression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown expression label {:?}", self.0)
    }
}

impl core::error::Error for UnknownExpression {}

/// Which side of the face an action unit's anchors cover.
///
/// Sides are viewer-relative: `Left` means the left half of the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Laterality {
    Left,
    Right,
    Bilateral,
    Central,
}

impl Laterality {
    pub fn label(self) -> &'static str {
        match self {
            Laterality::Left => "left",
            Laterality::Right => "right",
            Laterality::Bilateral => "bilateral",
            Laterality::Central => "central",
        }
    }

    pub fn parse(s: &str) -> Option<Laterality> {
        match s.to_ascii_lowercase().as_str() {
            "left" => Some(Laterality::Left),
            "right" => Some(Laterality::Right),
            "bilateral" => Some(Laterality::Bilateral),
            "central" => Some(Laterality::Central),
            _ => None,
        }
    }
}

impl fmt::Display for Laterality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One anchor formula: a weighted combination of landmark indices.
///
/// The resolved pixel position is `sum(w_i * p_i) / sum(w_i)` over the
/// listed `(landmark index, weight)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub weights: Vec<(usize, f64)>,
}

impl Anchor {
    /// Unweighted mean of the given landmark indices.
    pub fn mean_of(indices: &[usize]) -> Anchor {
        Anchor { weights: indices.iter().map(|&i| (i, 1.0)).collect() }
    }
}

/// One action unit within a codebook entry.
#[derive(Debug, Clone, PartialEq)]
pub struct AuSpec {
    /// Action unit code, e.g. `"AU12"`.
    pub au_code: String,
    /// Human-readable muscle/motion name, e.g. `"lip corner puller"`.
    pub name: String,
    /// Which side(s) of the face the anchors cover.
    pub laterality: Laterality,
    /// Gaussian radius as a fraction of the interocular distance.
    pub radius_factor: f64,
    /// Anchor formulas; `Bilateral` units carry exactly two (left then
    /// right), others at least one.
    pub anchors: Vec<Anchor>,
}

/// Expression-to-AU codebook covering all seven labels.
///
/// `Neutral` conventionally maps to an empty list: a face at rest activates
/// no action units, and its heatmap degenerates to the uniform floor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Codebook {
    entries: [Vec<AuSpec>; 7],
}

impl Codebook {
    /// Empty codebook (every expression maps to no action units).
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds from `(expression, specs)` pairs; later pairs for the same
    /// expression replace earlier ones.
    pub fn from_entries(entries: impl IntoIterator<Item = (Expression, Vec<AuSpec>)>) -> Self {
        let mut cb = Self::new();
        for (expr, specs) in entries {
            cb.set(expr, specs);
        }
        cb
    }

    pub fn set(&mut self, expression: Expression, specs: Vec<AuSpec>) {
        self.entries[expression.index()] = specs;
    }

    /// The action units for an expression; empty for unmapped expressions.
    pub fn lookup(&self, expression: Expression) -> &[AuSpec] {
        &self.entries[expression.index()]
    }

    /// [`Codebook::lookup`] by string label.
    pub fn lookup_label(&self, label: &str) -> Result<&[AuSpec], UnknownExpression> {
        Ok(self.lookup(Expression::parse(label)?))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Expression, &[AuSpec])> {
        Expression::ALL
            .into_iter()
            .map(move |e| (e, self.lookup(e)))
    }

    /// Structural validation; an empty result means the codebook is usable.
    ///
    /// Checked per expression entry:
    /// * every basic expression has at least one action unit, and `Neutral`
    ///   has none;
    /// * AU codes are unique within the entry;
    /// and per action unit:
    /// * `radius_factor` is positive and finite;
    /// * the anchor count matches the laterality (`Bilateral` needs exactly
    ///   two anchors, everything else at least one);
    /// * every referenced landmark index is below 68;
    /// * no anchor's weights are all zero (the weight sum divides the
    ///   position).
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for (expr, specs) in self.iter() {
            if expr == Expression::Neutral {
                if !specs.is_empty() {
                    out.push(Violation {
                        expression: Some(expr),
                        au_code: None,
                        field: "aus",
                        message: "Neutral must map to an empty action-unit list".to_string(),
                    });
                }
            } else if specs.is_empty() {
                out.push(Violation {
                    expression: Some(expr),
                    au_code: None,
                    field: "aus",
                    message: "basic expression has no action units".to_string(),
                });
            }
            for (i, a) in specs.iter().enumerate() {
                if specs[..i].iter().any(|b| b.au_code == a.au_code) {
                    out.push(Violation::for_au(
                        expr,
                        a,
                        "au_code",
                        "duplicate action-unit code within the expression",
                    ));
                }
                out.extend(validate_au(expr, a));
            }
        }
        out
    }
}

fn validate_au(expr: Expression, a: &AuSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    if !(a.radius_factor > 0.0 && a.radius_factor.is_finite()) {
        out.push(Violation::for_au(
            expr,
            a,
            "radius_factor",
            "radius factor must be positive and finite",
        ));
    }
    let anchors_ok = match a.laterality {
        Laterality::Bilateral => a.anchors.len() == 2,
        _ => !a.anchors.is_empty(),
    };
    if !anchors_ok {
        out.push(Violation::for_au(
            expr,
            a,
            "anchors",
            "anchor count does not match the declared laterality",
        ));
    }
    for anchor in &a.anchors {
        if anchor.weights.is_empty() {
            out.push(Violation::for_au(expr, a, "anchors", "anchor lists no landmarks"));
            continue;
        }
        for &(idx, _) in &anchor.weights {
            if idx >= NUM_LANDMARKS {
                out.push(Violation::for_au(
                    expr,
                    a,
                    "anchors",
                    "landmark index out of range (must be < 68)",
                ));
            }
        }
        let wsum: f64 = anchor.weights.iter().map(|&(_, w)| w).sum();
        if !(wsum.abs() > 1e-12 && wsum.is_finite()) {
            out.push(Violation::for_au(
                expr,
                a,
                "anchors",
                "anchor weights sum to zero",
            ));
        }
    }
    out
}

/// One structural problem found by [`Codebook::validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Expression entry the problem was found under, if any.
    pub expression: Option<Expression>,
    /// Offending action-unit code, if the problem is AU-local.
    pub au_code: Option<String>,
    /// Field the problem concerns.
    pub field: &'static str,
    pub message: String,
}

impl Violation {
    fn for_au(expr: Expression, a: &AuSpec, field: &'static str, message: &str) -> Violation {
        Violation {
            expression: Some(expr),
            au_code: Some(a.au_code.clone()),
            field,
            message: message.to_string(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.expression, &self.au_code) {
            (Some(e), Some(au)) => write!(f, "{e}/{au}: {} ({})", self.message, self.field),
            (Some(e), None) => write!(f, "{e}: {} ({})", self.message, self.field),
            _ => write!(f, "{} ({})", self.message, self.field),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn au(code: &str, laterality: Laterality, anchors: Vec<Anchor>) -> AuSpec {
        AuSpec {
            au_code: code.to_string(),
            name: "test unit".to_string(),
            laterality,
            radius_factor: 0.15,
            anchors,
        }
    }

    fn full_valid_codebook() -> Codebook {
        let mut cb = Codebook::new();
        for expr in Expression::BASIC {
            cb.set(
                expr,
                vec![au(
                    "AU12",
                    Laterality::Bilateral,
                    vec![Anchor::mean_of(&[48]), Anchor::mean_of(&[54])],
                )],
            );
        }
        cb
    }

    #[test]
    fn expression_labels_round_trip() {
        for e in Expression::ALL {
            assert_eq!(Expression::parse(e.label()).unwrap(), e);
            assert_eq!(Expression::parse(&e.label().to_ascii_uppercase()).unwrap(), e);
        }
        assert!(Expression::parse("Contempt").is_err());
    }

    #[test]
    fn valid_codebook_has_no_violations() {
        assert!(full_valid_codebook().validate().is_empty());
    }

    #[test]
    fn missing_basic_expression_is_flagged() {
        let mut cb = full_valid_codebook();
        cb.set(Expression::Fear, vec![]);
        let v = cb.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].expression, Some(Expression::Fear));
        assert_eq!(v[0].field, "aus");
    }

    #[test]
    fn nonempty_neutral_is_flagged() {
        let mut cb = full_valid_codebook();
        cb.set(
            Expression::Neutral,
            vec![au("AU1", Laterality::Central, vec![Anchor::mean_of(&[21, 22])])],
        );
        let v = cb.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].expression, Some(Expression::Neutral));
    }

    #[test]
    fn out_of_range_landmark_index_is_flagged() {
        let mut cb = full_valid_codebook();
        cb.set(
            Expression::Anger,
            vec![au("AU4", Laterality::Central, vec![Anchor::mean_of(&[68])])],
        );
        let v = cb.validate();
        assert!(v.iter().any(|v| {
            v.au_code.as_deref() == Some("AU4") && v.message.contains("out of range")
        }));
    }

    #[test]
    fn bilateral_needs_exactly_two_anchors() {
        let mut cb = full_valid_codebook();
        cb.set(
            Expression::Anger,
            vec![au("AU4", Laterality::Bilateral, vec![Anchor::mean_of(&[21])])],
        );
        assert!(cb
            .validate()
            .iter()
            .any(|v| v.field == "anchors" && v.message.contains("laterality")));
    }

    #[test]
    fn nonpositive_radius_is_flagged() {
        let mut cb = full_valid_codebook();
        let mut bad = au("AU9", Laterality::Central, vec![Anchor::mean_of(&[27])]);
        bad.radius_factor = 0.0;
        cb.set(Expression::Disgust, vec![bad]);
        assert!(cb
            .validate()
            .iter()
            .any(|v| v.field == "radius_factor" && v.au_code.as_deref() == Some("AU9")));
    }

    #[test]
    fn duplicate_au_code_is_flagged() {
        let mut cb = full_valid_codebook();
        cb.set(
            Expression::Anger,
            vec![
                au("AU4", Laterality::Central, vec![Anchor::mean_of(&[21, 22])]),
                au("AU4", Laterality::Central, vec![Anchor::mean_of(&[27])]),
            ],
        );
        assert!(cb
            .validate()
            .iter()
            .any(|v| v.field == "au_code" && v.message.contains("duplicate")));
    }

    #[test]
    fn zero_weight_sum_is_flagged() {
        let mut cb = full_valid_codebook();
        cb.set(
            Expression::Anger,
            vec![au(
                "AU4",
                Laterality::Central,
                vec![Anchor { weights: vec![(21, 1.0), (22, -1.0)] }],
            )],
        );
        assert!(cb.validate().iter().any(|v| v.message.contains("sum to zero")));
    }
}
