//! Training losses: node regression, dense-sampling IoU loss, focal
//! classification and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AnchorChain, CoordinateSpace, Point2, Polyline};
use crate::line_iou::{ds_grad_points, liou_ds, IoUParams, SamplingAxis};

/// Probability clamp applied before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Classification weight.
    pub a: f64,
    /// Regression weight.
    pub b: f64,
    /// IoU weight.
    pub c: f64,
    /// Focal exponent on the predicted probability.
    pub gamma: f64,
    /// Exponent on the soft-target complement for negatives.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            a: 1.0,
            b: 5.0,
            c: 1.0,
            gamma: 2.0,
            lambda: 4.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.a, self.b, self.c, self.gamma, self.lambda];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "loss weights must be finite and >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// One decoder query: lane presence probability and its anchor-chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPrediction {
    pub probability: f64,
    pub chain: AnchorChain,
}

impl QueryPrediction {
    pub fn new(probability: f64, chain: AnchorChain) -> Result<Self> {
        if !(0.0..=1.0).contains(&probability) {
            return Err(Error::InvalidParameter(format!(
                "probability must be in [0, 1], got {probability}"
            )));
        }
        Ok(Self { probability, chain })
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::LengthMismatch { expected, actual });
    }
    Ok(())
}

/// Mean per-node L1 distance `|dx| + |dy|` between the chain and its targets.
pub fn loss_reg(pred: &AnchorChain, targets: &[Point2]) -> Result<f64> {
    check_len(pred.len(), targets.len())?;
    let sum: f64 = pred
        .nodes()
        .iter()
        .zip(targets)
        .map(|(p, t)| (p.x - t.x).abs() + (p.y - t.y).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

pub fn loss_reg_grad(pred: &AnchorChain, targets: &[Point2]) -> Result<Vec<Point2>> {
    check_len(pred.len(), targets.len())?;
    let n = pred.len() as f64;
    let sign = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
    Ok(pred
        .nodes()
        .iter()
        .zip(targets)
        .map(|(p, t)| Point2::new(sign(p.x - t.x) / n, sign(p.y - t.y) / n))
        .collect())
}

fn chain_pixel_scale(pred: &AnchorChain, gt: &Polyline) -> (f64, f64) {
    match pred.space() {
        CoordinateSpace::Normalized => (f64::from(gt.image_width), f64::from(gt.image_height)),
        CoordinateSpace::Pixel => (1.0, 1.0),
    }
}

/// `1 - dense-sampling IoU` between the ground truth and the predicted chain,
/// evaluated in pixel space.
pub fn loss_iou(pred: &AnchorChain, gt: &Polyline, params: &IoUParams, axis: SamplingAxis) -> Result<f64> {
    let line = pred.to_pixels(gt.image_width, gt.image_height)?;
    Ok(1.0 - liou_ds(gt, &line, params, axis)?)
}

/// Loss value and gradient with respect to the chain nodes, in the chain's
/// own coordinate space.
pub fn loss_iou_grad(
    pred: &AnchorChain,
    gt: &Polyline,
    params: &IoUParams,
    axis: SamplingAxis,
) -> Result<(f64, Vec<Point2>)> {
    let (sx, sy) = chain_pixel_scale(pred, gt);
    let pixels: Vec<Point2> = pred
        .nodes()
        .iter()
        .map(|p| Point2::new(p.x * sx, p.y * sy))
        .collect();
    // the dense-sampling IoU is symmetric, so differentiate with the
    // prediction in first position
    let g = ds_grad_points(&pixels, gt.points(), params, axis)?;
    let grads = g
        .d_value_d_nodes
        .iter()
        .map(|d| Point2::new(-d.x * sx, -d.y * sy))
        .collect();
    Ok((1.0 - g.value, grads))
}

/// Focal classification loss averaged over queries. `matched[q]` is the
/// binary match target of query `q`.
pub fn loss_cls(queries: &[QueryPrediction], matched: &[bool], weights: &LossWeights) -> Result<f64> {
    check_len(queries.len(), matched.len())?;
    if queries.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = queries
        .iter()
        .zip(matched)
        .map(|(q, &positive)| {
            let p = q.probability.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if positive {
                (1.0 - p).powf(weights.gamma) * p.ln()
            } else {
                // the (1 - P_q)^lambda factor is 1 for a binary target P_q = 0
                p.powf(weights.gamma) * (1.0 - p).ln()
            }
        })
        .sum();
    Ok(-sum / queries.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub reg: f64,
    pub iou: f64,
    /// Externally computed heatmap mask loss.
    pub mask: f64,
    /// Externally computed heatmap offset loss.
    pub offset: f64,
}

pub fn loss_total(components: &LossComponents, weights: &LossWeights) -> f64 {
    weights.a * components.cls
        + weights.b * components.reg
        + weights.c * components.iou
        + components.mask
        + components.offset
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain(coords: &[(f64, f64)]) -> AnchorChain {
        AnchorChain::new(coords.iter().copied().map(Point2::from).collect(), CoordinateSpace::Normalized)
            .unwrap()
    }

    fn query(p: f64) -> QueryPrediction {
        QueryPrediction::new(p, chain(&[(0.1, 0.1), (0.2, 0.9)])).unwrap()
    }

    #[test]
    fn reg_examples() {
        let c = chain(&[(0.1, 0.1), (0.2, 0.9)]);
        assert_eq!(loss_reg(&c, c.nodes()).unwrap(), 0.0);
        let single = AnchorChain::new(
            vec![Point2::new(0.5, 0.5), Point2::new(0.6, 0.6)],
            CoordinateSpace::Normalized,
        )
        .unwrap();
        let targets = [Point2::new(0.4, 0.3), Point2::new(0.5, 0.4)];
        assert_abs_diff_eq!(loss_reg(&single, &targets).unwrap(), 0.3, epsilon = 1e-12);
        assert!(matches!(
            loss_reg(&c, &targets[..1]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn reg_matches_mean_absolute_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nodes: Vec<(f64, f64)> = (0..16).map(|i| (i as f64 / 20.0, rng.gen())).collect();
        let targets: Vec<Point2> = (0..16).map(|_| Point2::new(rng.gen(), rng.gen())).collect();
        let c = chain(&nodes);
        let xs: f64 = c.nodes().iter().zip(&targets).map(|(p, t)| (p.x - t.x).abs()).sum::<f64>();
        let ys: f64 = c.nodes().iter().zip(&targets).map(|(p, t)| (p.y - t.y).abs()).sum::<f64>();
        assert_abs_diff_eq!(loss_reg(&c, &targets).unwrap(), (xs + ys) / 16.0, epsilon = 1e-12);
    }

    #[test]
    fn iou_loss_examples() {
        let gt = Polyline::from_xy(&[(50.0, 0.0), (50.0, 100.0)], 1640, 590).unwrap();
        let exact = AnchorChain::new(gt.points().to_vec(), CoordinateSpace::Pixel).unwrap();
        let p = IoUParams { r: 8.0, d: 1.0, n_pairs: 72 };
        assert_eq!(loss_iou(&exact, &gt, &p, SamplingAxis::Vertical).unwrap(), 0.0);
        let half = AnchorChain::new(
            vec![Point2::new(50.0, 0.0), Point2::new(50.0, 50.0)],
            CoordinateSpace::Pixel,
        )
        .unwrap();
        let v = loss_iou(&half, &gt, &p, SamplingAxis::Vertical).unwrap();
        assert_abs_diff_eq!(v, 1.0 - 51.0 / 101.0, epsilon = 1e-12);
        let far = AnchorChain::new(
            vec![Point2::new(1e7, 0.0), Point2::new(1e7, 100.0)],
            CoordinateSpace::Pixel,
        )
        .unwrap();
        assert!(loss_iou(&far, &gt, &p, SamplingAxis::Vertical).unwrap() > 1.9);
    }

    #[test]
    fn cls_examples() {
        let w = LossWeights::default();
        assert!(loss_cls(&[query(1.0)], &[true], &w).unwrap() < 1e-12);
        let v = loss_cls(&[query(0.5)], &[false], &w).unwrap();
        assert_abs_diff_eq!(v, -(0.25 * 0.5f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.1733, epsilon = 1e-4);
        assert!(loss_cls(&[query(0.5)], &[], &w).is_err());
    }

    #[test]
    fn focal_with_zero_gamma_is_bce() {
        let w = LossWeights { gamma: 0.0, ..LossWeights::default() };
        let probs = [0.1, 0.45, 0.8, 0.99, 1e-9];
        let labels = [true, false, true, false, true];
        let queries: Vec<_> = probs.iter().map(|&p| query(p)).collect();
        let bce: f64 = probs
            .iter()
            .zip(labels)
            .map(|(&p, y)| {
                let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                let y = if y { 1.0 } else { 0.0 };
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / probs.len() as f64;
        assert_abs_diff_eq!(loss_cls(&queries, &labels, &w).unwrap(), bce, epsilon = 1e-12);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(loss_total(&LossComponents::default(), &w), 0.0);
        let c = LossComponents { cls: 0.2, reg: 0.1, iou: 0.4, ..Default::default() };
        assert_abs_diff_eq!(loss_total(&c, &w), 1.1, epsilon = 1e-12);
        let no_reg = LossWeights { b: 0.0, ..w };
        let bumped = LossComponents { reg: 10.0, ..c };
        assert_eq!(loss_total(&c, &no_reg), loss_total(&bumped, &no_reg));
    }
}
