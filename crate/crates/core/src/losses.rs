//! Reference losses for mask detection and Siamese verification, with analytic
//! gradients and a central-difference gradient checker.
//!
//! - binary cross-entropy `-y ln p - (1-y) ln(1-p)`
//! - smooth-L1 `0.5 x²` for `|x| ≤ 1`, else `|x| - 0.5`
//! - box regression: smooth-L1 summed over the `(x, y, w, h)` correction residuals
//! - multi-task: classification loss plus box loss
//! - contrastive `y d² + (1-y) max(margin - d, 0)²`

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_MARGIN: f64 = 1.0;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum LossError {
    #[error("predicted probability {0} outside the open interval (0, 1)")]
    Probability(f64),
    #[error("distance {0} must be finite and non-negative")]
    Distance(f64),
    #[error("margin {0} must be finite and positive")]
    Margin(f64),
    #[error("loss terms must be finite and non-negative, got {0}")]
    Term(f64),
    #[error("finite-difference step and tolerance must be positive, got step {step}, tol {tol}")]
    CheckParams { step: f64, tol: f64 },
    #[error("coordinate {coordinate} is within one step of a non-differentiable point")]
    NearKink { coordinate: &'static str },
    #[error("unknown loss {0:?} (expected bce, smooth_l1, box, multitask or contrastive)")]
    UnknownLoss(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinarySample {
    pub y: bool,
    y_pred: f64,
}

impl BinarySample {
    pub fn new(y: bool, y_pred: f64) -> Result<Self, LossError> {
        if !(y_pred > 0.0 && y_pred < 1.0) {
            return Err(LossError::Probability(y_pred));
        }
        Ok(Self { y, y_pred })
    }

    pub fn y_pred(&self) -> f64 {
        self.y_pred
    }
}

pub fn bce_loss(s: &BinarySample) -> f64 {
    if s.y {
        -s.y_pred.ln()
    } else {
        -(1.0 - s.y_pred).ln()
    }
}

/// d/dp of [`bce_loss`].
pub fn bce_grad(s: &BinarySample) -> f64 {
    if s.y {
        -1.0 / s.y_pred
    } else {
        1.0 / (1.0 - s.y_pred)
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() <= 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() <= 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Predicted correction `t` for the true class `u` against the regression target `v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxRegressionSample {
    pub predicted: [f64; 4],
    pub target: [f64; 4],
    pub true_class: usize,
}

pub fn box_loss(s: &BoxRegressionSample) -> f64 {
    s.predicted
        .iter()
        .zip(&s.target)
        .map(|(t, v)| smooth_l1(t - v))
        .sum()
}

/// Gradient of [`box_loss`] with respect to the predicted correction.
/// The gradient with respect to the target is its negation.
pub fn box_loss_grad(s: &BoxRegressionSample) -> [f64; 4] {
    std::array::from_fn(|i| smooth_l1_grad(s.predicted[i] - s.target[i]))
}

pub fn multitask_loss(cls: f64, bbox: f64) -> Result<f64, LossError> {
    for term in [cls, bbox] {
        if !(term.is_finite() && term >= 0.0) {
            return Err(LossError::Term(term));
        }
    }
    Ok(cls + bbox)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveSample {
    /// True when both images show the same subject.
    pub same: bool,
    distance: f64,
    margin: f64,
}

impl ContrastiveSample {
    pub fn new(same: bool, distance: f64, margin: f64) -> Result<Self, LossError> {
        if !(distance.is_finite() && distance >= 0.0) {
            return Err(LossError::Distance(distance));
        }
        if !(margin.is_finite() && margin > 0.0) {
            return Err(LossError::Margin(margin));
        }
        Ok(Self {
            same,
            distance,
            margin,
        })
    }

    pub fn distance(&self) -> f64 {
        self.distance
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }
}

pub fn contrastive_loss(s: &ContrastiveSample) -> f64 {
    if s.same {
        s.distance * s.distance
    } else {
        let gap = (s.margin - s.distance).max(0.0);
        gap * gap
    }
}

/// `(d/d distance, d/d margin)` of [`contrastive_loss`].
pub fn contrastive_grad(s: &ContrastiveSample) -> (f64, f64) {
    if s.same {
        (2.0 * s.distance, 0.0)
    } else {
        let gap = (s.margin - s.distance).max(0.0);
        (-2.0 * gap, 2.0 * gap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    SmoothL1,
    Box,
    Multitask,
    Contrastive,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Bce,
        LossKind::SmoothL1,
        LossKind::Box,
        LossKind::Multitask,
        LossKind::Contrastive,
    ];
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Bce => "bce",
            LossKind::SmoothL1 => "smooth_l1",
            LossKind::Box => "box",
            LossKind::Multitask => "multitask",
            LossKind::Contrastive => "contrastive",
        })
    }
}

impl FromStr for LossKind {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s.trim().replace('-', "_"))
            .ok_or_else(|| LossError::UnknownLoss(s.to_string()))
    }
}

/// A loss evaluated at a point whose continuous inputs are the coordinates under test.
/// Discrete inputs (labels) stay fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradPoint {
    Bce { y: bool, y_pred: f64 },
    SmoothL1 { x: f64 },
    Box { predicted: [f64; 4], target: [f64; 4] },
    /// Classification BCE plus box regression; coordinates are `p` then `t_x..t_h`.
    Multitask {
        y: bool,
        y_pred: f64,
        predicted: [f64; 4],
        target: [f64; 4],
    },
    Contrastive { same: bool, distance: f64, margin: f64 },
}

const BOX_NAMES: [&str; 8] = ["t_x", "t_y", "t_w", "t_h", "v_x", "v_y", "v_w", "v_h"];

impl GradPoint {
    pub fn kind(&self) -> LossKind {
        match self {
            GradPoint::Bce { .. } => LossKind::Bce,
            GradPoint::SmoothL1 { .. } => LossKind::SmoothL1,
            GradPoint::Box { .. } => LossKind::Box,
            GradPoint::Multitask { .. } => LossKind::Multitask,
            GradPoint::Contrastive { .. } => LossKind::Contrastive,
        }
    }

    pub fn coordinate_names(&self) -> &'static [&'static str] {
        match self {
            GradPoint::Bce { .. } => &["y_pred"],
            GradPoint::SmoothL1 { .. } => &["x"],
            GradPoint::Box { .. } => &BOX_NAMES,
            GradPoint::Multitask { .. } => &["y_pred", "t_x", "t_y", "t_w", "t_h"],
            GradPoint::Contrastive { .. } => &["distance", "margin"],
        }
    }

    pub fn coordinates(&self) -> Vec<f64> {
        match *self {
            GradPoint::Bce { y_pred, .. } => vec![y_pred],
            GradPoint::SmoothL1 { x } => vec![x],
            GradPoint::Box { predicted, target } => predicted.iter().chain(&target).copied().collect(),
            GradPoint::Multitask {
                y_pred, predicted, ..
            } => std::iter::once(y_pred).chain(predicted).collect(),
            GradPoint::Contrastive {
                distance, margin, ..
            } => vec![distance, margin],
        }
    }

    /// The same loss with its coordinates replaced.
    fn with_coordinates(&self, c: &[f64]) -> GradPoint {
        match *self {
            GradPoint::Bce { y, .. } => GradPoint::Bce { y, y_pred: c[0] },
            GradPoint::SmoothL1 { .. } => GradPoint::SmoothL1 { x: c[0] },
            GradPoint::Box { .. } => GradPoint::Box {
                predicted: [c[0], c[1], c[2], c[3]],
                target: [c[4], c[5], c[6], c[7]],
            },
            GradPoint::Multitask { y, target, .. } => GradPoint::Multitask {
                y,
                y_pred: c[0],
                predicted: [c[1], c[2], c[3], c[4]],
                target,
            },
            GradPoint::Contrastive { same, .. } => GradPoint::Contrastive {
                same,
                distance: c[0],
                margin: c[1],
            },
        }
    }

    pub fn loss(&self) -> Result<f64, LossError> {
        Ok(match *self {
            GradPoint::Bce { y, y_pred } => bce_loss(&BinarySample::new(y, y_pred)?),
            GradPoint::SmoothL1 { x } => smooth_l1(x),
            GradPoint::Box { predicted, target } => box_loss(&BoxRegressionSample {
                predicted,
                target,
                true_class: 0,
            }),
            GradPoint::Multitask {
                y,
                y_pred,
                predicted,
                target,
            } => {
                let cls = bce_loss(&BinarySample::new(y, y_pred)?);
                let bbox = box_loss(&BoxRegressionSample {
                    predicted,
                    target,
                    true_class: 0,
                });
                multitask_loss(cls, bbox)?
            }
            GradPoint::Contrastive {
                same,
                distance,
                margin,
            } => contrastive_loss(&ContrastiveSample::new(same, distance, margin)?),
        })
    }

    pub fn analytic_gradient(&self) -> Result<Vec<f64>, LossError> {
        Ok(match *self {
            GradPoint::Bce { y, y_pred } => vec![bce_grad(&BinarySample::new(y, y_pred)?)],
            GradPoint::SmoothL1 { x } => vec![smooth_l1_grad(x)],
            GradPoint::Box { predicted, target } => {
                let g = box_loss_grad(&BoxRegressionSample {
                    predicted,
                    target,
                    true_class: 0,
                });
                g.iter().copied().chain(g.iter().map(|v| -v)).collect()
            }
            GradPoint::Multitask {
                y,
                y_pred,
                predicted,
                target,
            } => {
                // the sum passes each term's gradient through unchanged
                let g_cls = bce_grad(&BinarySample::new(y, y_pred)?);
                let g_box = box_loss_grad(&BoxRegressionSample {
                    predicted,
                    target,
                    true_class: 0,
                });
                std::iter::once(g_cls).chain(g_box).collect()
            }
            GradPoint::Contrastive {
                same,
                distance,
                margin,
            } => {
                let (gd, gm) = contrastive_grad(&ContrastiveSample::new(same, distance, margin)?);
                vec![gd, gm]
            }
        })
    }

    /// First coordinate lying within `radius` of a point where the loss is not differentiable.
    fn kink_within(&self, radius: f64) -> Option<&'static str> {
        let near = |x: f64| (x.abs() - 1.0).abs() <= radius;
        match *self {
            GradPoint::Bce { .. } => None,
            GradPoint::SmoothL1 { x } => near(x).then_some("x"),
            GradPoint::Box { predicted, target } => (0..4)
                .find(|&i| near(predicted[i] - target[i]))
                .map(|i| BOX_NAMES[i]),
            GradPoint::Multitask {
                predicted, target, ..
            } => (0..4)
                .find(|&i| near(predicted[i] - target[i]))
                .map(|i| BOX_NAMES[i]),
            GradPoint::Contrastive {
                same,
                distance,
                margin,
            } => (!same && (distance - margin).abs() <= 2.0 * radius).then_some("distance"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordinateCheck {
    pub name: &'static str,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub loss: LossKind,
    pub step: f64,
    pub tol: f64,
    pub coordinates: Vec<CoordinateCheck>,
    pub max_relative_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: &'static str,
    pub passed: bool,
}

/// Draws a random valid point for `kind` that lies more than `clearance` from every
/// non-differentiable point and every domain edge. Box residuals stay within ±3,
/// probabilities within [0.02, 0.98], distances within [0.05, 3] and margins within [0.25, 2].
pub fn sample_point<R: Rng + ?Sized>(kind: LossKind, rng: &mut R, clearance: f64) -> GradPoint {
    let vec4 = |rng: &mut R| -> [f64; 4] { std::array::from_fn(|_| rng.random_range(-3.0..=3.0)) };
    loop {
        let point = match kind {
            LossKind::Bce => GradPoint::Bce {
                y: rng.random(),
                y_pred: rng.random_range(0.02..=0.98),
            },
            LossKind::SmoothL1 => GradPoint::SmoothL1 {
                x: rng.random_range(-3.0..=3.0),
            },
            LossKind::Box => GradPoint::Box {
                predicted: vec4(rng),
                target: vec4(rng),
            },
            LossKind::Multitask => GradPoint::Multitask {
                y: rng.random(),
                y_pred: rng.random_range(0.02..=0.98),
                predicted: vec4(rng),
                target: vec4(rng),
            },
            LossKind::Contrastive => GradPoint::Contrastive {
                same: rng.random(),
                distance: rng.random_range(0.05..=3.0),
                margin: rng.random_range(0.25..=2.0),
            },
        };
        if point.kink_within(clearance).is_none() {
            return point;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckSummary {
    pub loss: LossKind,
    pub points: usize,
    pub passed: usize,
    pub max_relative_error: f64,
    pub worst_coordinate: &'static str,
    pub step: f64,
    pub tol: f64,
}

impl GradCheckSummary {
    pub fn all_passed(&self) -> bool {
        self.passed == self.points
    }
}

/// Runs [`grad_check`] at `points` seeded random points of `kind`, sampled at least
/// `10 * step` away from any kink.
pub fn grad_check_random(kind: LossKind, points: usize, seed: u64, step: f64, tol: f64) -> Result<GradCheckSummary, LossError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = GradCheckSummary {
        loss: kind,
        points,
        passed: 0,
        max_relative_error: 0.0,
        worst_coordinate: "",
        step,
        tol,
    };
    for _ in 0..points {
        let report = grad_check(&sample_point(kind, &mut rng, 10.0 * step), step, tol)?;
        summary.passed += usize::from(report.passed);
        if report.max_relative_error >= summary.max_relative_error {
            summary.max_relative_error = report.max_relative_error;
            summary.worst_coordinate = report.worst;
        }
    }
    Ok(summary)
}

/// `|a - n| / max(|a|, |n|)`, or zero when both vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-12 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares the analytic gradient at `point` with central differences of step `step`.
/// Passes iff every coordinate's relative error is below `tol`.
pub fn grad_check(point: &GradPoint, step: f64, tol: f64) -> Result<GradCheckReport, LossError> {
    if !(step > 0.0 && tol > 0.0) {
        return Err(LossError::CheckParams { step, tol });
    }
    if let Some(coordinate) = point.kink_within(step) {
        return Err(LossError::NearKink { coordinate });
    }
    let analytic = point.analytic_gradient()?;
    let base = point.coordinates();
    let names = point.coordinate_names();

    let mut coordinates = Vec::with_capacity(base.len());
    for (i, &a) in analytic.iter().enumerate() {
        let mut hi = base.clone();
        let mut lo = base.clone();
        hi[i] += step;
        lo[i] -= step;
        let numeric =
            (point.with_coordinates(&hi).loss()? - point.with_coordinates(&lo).loss()?) / (2.0 * step);
        coordinates.push(CoordinateCheck {
            name: names[i],
            analytic: a,
            numeric,
            relative_error: relative_error(a, numeric),
        });
    }
    let worst = coordinates
        .iter()
        .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
        .expect("every loss has a coordinate");
    let max_relative_error = worst.relative_error;
    Ok(GradCheckReport {
        loss: point.kind(),
        step,
        tol,
        worst: worst.name,
        passed: max_relative_error < tol,
        max_relative_error,
        coordinates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    #[test]
    fn bce_spot_values() {
        let near_one = bce_loss(&BinarySample::new(true, 0.999).unwrap());
        assert!((near_one - 0.0010005).abs() < 1e-7, "{near_one}");
        assert!((bce_loss(&BinarySample::new(true, 0.5).unwrap()) - LN_2).abs() < 1e-12);
        assert!((bce_loss(&BinarySample::new(false, 0.5).unwrap()) - LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_domain() {
        for p in [0.0, 1.0, -0.1, 1.2, f64::NAN] {
            assert!(BinarySample::new(true, p).is_err(), "{p}");
        }
        assert!(matches!(
            GradPoint::Bce { y: true, y_pred: 1.0 }.loss(),
            Err(LossError::Probability(_))
        ));
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(1.0), 0.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
    }

    #[test]
    fn box_loss_values() {
        let target = [3.0, -1.0, 2.0, 0.5];
        let same = BoxRegressionSample { predicted: target, target, true_class: 1 };
        assert_eq!(box_loss(&same), 0.0);
        let half = BoxRegressionSample {
            predicted: [3.5, -0.5, 2.0, 0.5],
            target,
            true_class: 1,
        };
        assert_eq!(box_loss(&half), 0.25);
        let far = BoxRegressionSample {
            predicted: target.map(|v| v + 2.0),
            target,
            true_class: 1,
        };
        assert_eq!(box_loss(&far), 6.0);
    }

    #[test]
    fn multitask_values() {
        assert_eq!(multitask_loss(0.0, 0.0).unwrap(), 0.0);
        assert!((multitask_loss(LN_2, 0.25).unwrap() - 0.943147).abs() < 1e-6);
        assert_eq!(multitask_loss(0.3, 1.7).unwrap(), multitask_loss(1.7, 0.3).unwrap());
        assert!(multitask_loss(-1.0, 0.0).is_err());
    }

    #[test]
    fn contrastive_values() {
        let l = |same, d, m| contrastive_loss(&ContrastiveSample::new(same, d, m).unwrap());
        assert_eq!(l(true, 0.0, 1.0), 0.0);
        assert_eq!(l(false, 1.5, 1.0), 0.0);
        assert_eq!(l(false, 0.5, 1.0), 0.25);
        assert!(ContrastiveSample::new(true, -0.1, 1.0).is_err());
        assert!(ContrastiveSample::new(true, 0.1, 0.0).is_err());
    }

    #[test]
    fn grad_check_examples() {
        let r = grad_check(&GradPoint::Bce { y: true, y_pred: 0.7 }, 1e-5, 1e-4).unwrap();
        assert!(r.passed);
        assert!((r.coordinates[0].analytic + 1.0 / 0.7).abs() < 1e-12);
        assert!((r.coordinates[0].analytic + 1.428571).abs() < 1e-6);

        let r = grad_check(&GradPoint::SmoothL1 { x: 0.3 }, 1e-5, 1e-4).unwrap();
        assert!(r.passed);
        assert_eq!(r.coordinates[0].analytic, 0.3);

        let r = grad_check(
            &GradPoint::Contrastive { same: false, distance: 0.5, margin: 1.0 },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed);
        assert_eq!(r.coordinates[0].analytic, -1.0);
    }

    #[test]
    fn grad_check_rejects_kinks_and_bad_params() {
        assert_eq!(
            grad_check(&GradPoint::SmoothL1 { x: 1.0 }, 1e-5, 1e-4),
            Err(LossError::NearKink { coordinate: "x" })
        );
        assert!(matches!(
            grad_check(
                &GradPoint::Contrastive { same: false, distance: 1.0, margin: 1.0 },
                1e-5,
                1e-4
            ),
            Err(LossError::NearKink { .. })
        ));
        assert!(matches!(
            grad_check(&GradPoint::SmoothL1 { x: 0.2 }, 0.0, 1e-4),
            Err(LossError::CheckParams { .. })
        ));
    }

    #[test]
    fn grad_check_names_offending_coordinate() {
        // A tolerance no central difference can meet on a curved loss.
        let r = grad_check(
            &GradPoint::Box {
                predicted: [0.1, 0.2, 5.0, 0.4],
                target: [0.0; 4],
            },
            1e-2,
            1e-17,
        )
        .unwrap();
        assert!(!r.passed);
        assert!(BOX_NAMES.contains(&r.worst));
        assert_eq!(r.coordinates.len(), 8);
    }

    proptest! {
        #[test]
        fn bce_label_flip_symmetry(p in 0.001f64..0.999, y: bool) {
            let a = bce_loss(&BinarySample::new(y, p).unwrap());
            let b = bce_loss(&BinarySample::new(!y, 1.0 - p).unwrap());
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn smooth_l1_even_nonnegative(x in -50.0f64..50.0) {
            prop_assert_eq!(smooth_l1(x), smooth_l1(-x));
            prop_assert!(smooth_l1(x) >= 0.0);
        }

        #[test]
        fn contrastive_monotone(d1 in 0.0f64..3.0, d2 in 0.0f64..3.0, m in 0.1f64..2.0) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let l = |same, d| contrastive_loss(&ContrastiveSample::new(same, d, m).unwrap());
            prop_assert!(l(true, lo) <= l(true, hi));
            prop_assert!(l(false, lo) >= l(false, hi));
            if hi >= m {
                prop_assert_eq!(l(false, hi), 0.0);
            }
            prop_assert!(l(true, lo) >= 0.0 && l(false, lo) >= 0.0);
        }
    }

    #[test]
    fn sampled_points_pass() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for kind in LossKind::ALL {
            assert_eq!(kind.to_string().parse::<LossKind>().unwrap(), kind);
            for _ in 0..100 {
                let p = sample_point(kind, &mut rng, 1e-3);
                let r = grad_check(&p, 1e-5, 1e-4).unwrap();
                assert!(r.passed, "{p:?}: {r:?}");
            }
        }
        assert!("hinge".parse::<LossKind>().is_err());
        for kind in LossKind::ALL {
            let s = grad_check_random(kind, 100, 3, 1e-5, 1e-4).unwrap();
            assert!(s.all_passed(), "{s:?}");
        }
    }

    #[test]
    fn smooth_l1_continuous_at_one() {
        let eps = 1e-12;
        assert!((smooth_l1(1.0 - eps) - smooth_l1(1.0 + eps)).abs() < 1e-9);
        assert_eq!(0.5 * 1.0f64 * 1.0, 1.0f64.abs() - 0.5);
    }
}
