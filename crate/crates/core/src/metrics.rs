//! Lane evaluation: fixed-width mask IoU, unidirectional Fréchet distance,
//! F1 under a combined IoU/Fréchet threshold, MIoU/MDis and threshold sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian, CostMatrix};
use crate::error::{Error, Result};
use crate::geometry::{resample_with_step, Point2, Polyline};

/// Point spacing used before the discrete Fréchet recursion.
pub const FRECHET_STEP: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub image_width: u32,
    pub image_height: u32,
    pub stroke_width: f64,
    pub alpha: f64,
    /// Fréchet threshold in pixels; `f64::INFINITY` disables it.
    pub beta: f64,
}

impl EvalConfig {
    pub fn culane() -> Self {
        Self {
            image_width: 1640,
            image_height: 590,
            stroke_width: 30.0,
            alpha: 0.2,
            beta: 60.0,
        }
    }

    pub fn curvelanes() -> Self {
        Self {
            image_width: 2560,
            image_height: 1440,
            stroke_width: 30.0,
            alpha: 0.2,
            beta: 10.0,
        }
    }

    /// The IoU-only configuration, F1(0.5, inf), on a CULane-sized canvas.
    pub fn classic() -> Self {
        Self {
            alpha: 0.5,
            beta: f64::INFINITY,
            ..Self::culane()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::InvalidParameter("image dimensions must be positive".into()));
        }
        if !(self.stroke_width >= 1.0 && self.stroke_width.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "stroke width must be >= 1, got {}",
                self.stroke_width
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::InvalidParameter(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Binary raster stored as one bitset per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    words_per_row: usize,
    words: Vec<u64>,
    count: usize,
    /// Inclusive row span holding set pixels.
    rows: Option<(usize, usize)>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        let words_per_row = width.div_ceil(64);
        Self {
            width,
            height,
            words_per_row,
            words: vec![0; words_per_row * height],
            count: 0,
            rows: None,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height && self.words[y * self.words_per_row + x / 64] >> (x % 64) & 1 == 1
    }

    pub fn set(&mut self, x: usize, y: usize) {
        self.set_span(y, x, x);
    }

    /// Sets pixels `x0..=x1` of row `y`.
    fn set_span(&mut self, y: usize, x0: usize, x1: usize) {
        let row = &mut self.words[y * self.words_per_row..(y + 1) * self.words_per_row];
        for x in x0..=x1.min(self.width - 1) {
            let word = &mut row[x / 64];
            let bit = 1u64 << (x % 64);
            if *word & bit == 0 {
                *word |= bit;
                self.count += 1;
            }
        }
        self.rows = Some(match self.rows {
            None => (y, y),
            Some((lo, hi)) => (lo.min(y), hi.max(y)),
        });
    }
}

/// Range of x along row `y` covered by the capsule of radius `h` around
/// segment `p`-`q`, or `None`.
fn capsule_row_span(p: Point2, q: Point2, h: f64, y: f64) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut include = |a: f64, b: f64| {
        if a <= b {
            lo = lo.min(a);
            hi = hi.max(b);
        }
    };
    for c in [p, q] {
        let dy = y - c.y;
        if dy.abs() <= h {
            let half = (h * h - dy * dy).sqrt();
            include(c.x - half, c.x + half);
        }
    }
    let len = p.distance(&q);
    if len > 0.0 {
        let (ux, uy) = ((q.x - p.x) / len, (q.y - p.y) / len);
        // 0 <= (x - px) ux + (y - py) uy <= len
        let along = slab(ux, (y - p.y) * uy, 0.0, len);
        // -h <= -(x - px) uy + (y - py) ux <= h
        let across = slab(-uy, (y - p.y) * ux, -h, h);
        if let (Some(a), Some(b)) = (along, across) {
            include(a.0.max(b.0) + p.x, a.1.min(b.1) + p.x);
        }
    }
    (lo <= hi).then_some((lo, hi))
}

/// Solutions `t` of `lo <= k t + c <= hi`.
fn slab(k: f64, c: f64, lo: f64, hi: f64) -> Option<(f64, f64)> {
    if k == 0.0 {
        return (lo <= c && c <= hi).then_some((f64::NEG_INFINITY, f64::INFINITY));
    }
    let (a, b) = ((lo - c) / k, (hi - c) / k);
    Some((a.min(b), a.max(b)))
}

/// Rasterizes the lane stroked with total width `cfg.stroke_width` and round
/// caps and joins. Pixel `(x, y)` is set when its center, taken at integer
/// coordinates, lies within half the stroke width of the polyline.
pub fn render_mask(lane: &Polyline, cfg: &EvalConfig) -> Mask {
    let (w, h) = (cfg.image_width as usize, cfg.image_height as usize);
    let mut mask = Mask::new(w, h);
    let half = cfg.stroke_width / 2.0;
    for seg in lane.points().windows(2) {
        let (p, q) = (seg[0], seg[1]);
        let y_lo = (p.y.min(q.y) - half).ceil().max(0.0);
        let y_hi = (p.y.max(q.y) + half).floor().min(h as f64 - 1.0);
        if y_lo > y_hi {
            continue;
        }
        for y in y_lo as usize..=y_hi as usize {
            let Some((x0, x1)) = capsule_row_span(p, q, half, y as f64) else {
                continue;
            };
            let (x0, x1) = (x0.ceil().max(0.0), x1.floor().min(w as f64 - 1.0));
            if x0 <= x1 {
                mask.set_span(y, x0 as usize, x1 as usize);
            }
        }
    }
    mask
}

/// `|a and b| / |a or b|`, defined as 0 when both masks are empty.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::DimensionMismatch(format!(
            "mask sizes {}x{} and {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (Some(ra), Some(rb)) = (a.rows, b.rows) else {
        return Ok(0.0);
    };
    let (lo, hi) = (ra.0.max(rb.0), ra.1.min(rb.1));
    let mut inter = 0usize;
    if lo <= hi {
        let span = lo * a.words_per_row..(hi + 1) * a.words_per_row;
        inter = a.words[span.clone()]
            .iter()
            .zip(&b.words[span])
            .map(|(x, y)| (x & y).count_ones() as usize)
            .sum();
    }
    let union = a.count + b.count - inter;
    Ok(inter as f64 / union as f64)
}

/// Discrete Fréchet distance that must traverse every `gt` point in order
/// but may start and stop anywhere along `pred`.
pub fn frechet_unidirectional_points(gt: &[Point2], pred: &[Point2]) -> f64 {
    if gt.is_empty() || pred.is_empty() {
        return f64::INFINITY;
    }
    let m = pred.len();
    let mut prev: Vec<f64> = pred.iter().map(|p| gt[0].distance(p)).collect();
    let mut cur = vec![0.0; m];
    for g in &gt[1..] {
        for j in 0..m {
            let mut best = prev[j];
            if j > 0 {
                best = best.min(cur[j - 1]).min(prev[j - 1]);
            }
            cur[j] = g.distance(&pred[j]).max(best);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev.into_iter().fold(f64::INFINITY, f64::min)
}

/// Standard discrete Fréchet distance: both sequences traversed end to end.
pub fn frechet_discrete_points(a: &[Point2], b: &[Point2]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::INFINITY;
    }
    let m = b.len();
    let mut prev = vec![0.0; m];
    let mut cur = vec![0.0; m];
    for (i, p) in a.iter().enumerate() {
        for j in 0..m {
            let d = p.distance(&b[j]);
            cur[j] = match (i, j) {
                (0, 0) => d,
                (0, _) => d.max(cur[j - 1]),
                (_, 0) => d.max(prev[0]),
                _ => d.max(prev[j].min(cur[j - 1]).min(prev[j - 1])),
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m - 1]
}

fn dense(line: &Polyline) -> Vec<Point2> {
    resample_with_step(line, FRECHET_STEP)
        .map(|l| l.points().to_vec())
        .unwrap_or_else(|_| line.points().to_vec())
}

/// Unidirectional Fréchet distance from `gt` to `pred` after resampling both
/// to [`FRECHET_STEP`] spacing.
pub fn frechet_unidirectional(gt: &Polyline, pred: &Polyline) -> f64 {
    frechet_unidirectional_points(&dense(gt), &dense(pred))
}

pub fn frechet_discrete(a: &Polyline, b: &Polyline) -> f64 {
    frechet_discrete_points(&dense(a), &dense(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub iou: f64,
    pub frechet: f64,
}

impl PairScore {
    pub fn admissible(&self, alpha: f64, beta: f64) -> bool {
        self.iou >= alpha && self.frechet <= beta
    }
}

/// Scores of every prediction/ground-truth pair of one image, row-major by
/// prediction.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub n_pred: usize,
    pub n_gt: usize,
    pub scores: Vec<PairScore>,
}

impl ScoreMatrix {
    pub fn get(&self, pred: usize, gt: usize) -> PairScore {
        self.scores[pred * self.n_gt + gt]
    }
}

pub fn score_image(preds: &[Polyline], gts: &[Polyline], cfg: &EvalConfig) -> ScoreMatrix {
    let pred_masks: Vec<Mask> = preds.iter().map(|l| render_mask(l, cfg)).collect();
    let gt_masks: Vec<Mask> = gts.iter().map(|l| render_mask(l, cfg)).collect();
    let pred_dense: Vec<Vec<Point2>> = preds.iter().map(dense).collect();
    let gt_dense: Vec<Vec<Point2>> = gts.iter().map(dense).collect();
    let mut scores = Vec::with_capacity(preds.len() * gts.len());
    for (pm, pd) in pred_masks.iter().zip(&pred_dense) {
        for (gm, gd) in gt_masks.iter().zip(&gt_dense) {
            scores.push(PairScore {
                iou: mask_iou(pm, gm).expect("masks share the configured size"),
                frechet: frechet_unidirectional_points(gd, pd),
            });
        }
    }
    ScoreMatrix {
        n_pred: preds.len(),
        n_gt: gts.len(),
        scores,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
    pub frechet: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageEval {
    pub image_id: String,
    pub tags: Vec<String>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub matches: Vec<MatchedPair>,
}

/// Matches predictions to ground truth maximizing the number of pairs with
/// `iou >= alpha` and `frechet <= beta`, breaking ties by total IoU.
pub fn match_scores(scores: &ScoreMatrix, alpha: f64, beta: f64) -> ImageEval {
    let mut matches = Vec::new();
    if scores.n_pred > 0 && scores.n_gt > 0 {
        // any extra admissible pair outweighs the largest possible IoU sum
        let big = scores.n_pred.min(scores.n_gt) as f64 + 1.0;
        let costs = CostMatrix::from_fn(scores.n_pred, scores.n_gt, |p, g| {
            let s = scores.get(p, g);
            if s.admissible(alpha, beta) {
                -(big + s.iou)
            } else {
                0.0
            }
        })
        .expect("dimensions match");
        for (p, g) in hungarian(&costs).pairs {
            let s = scores.get(p, g);
            if s.admissible(alpha, beta) {
                matches.push(MatchedPair {
                    pred: p,
                    gt: g,
                    iou: s.iou,
                    frechet: s.frechet,
                });
            }
        }
    }
    let tp = matches.len();
    ImageEval {
        image_id: String::new(),
        tags: Vec::new(),
        tp,
        fp: scores.n_pred - tp,
        fn_: scores.n_gt - tp,
        matches,
    }
}

pub fn evaluate_image(preds: &[Polyline], gts: &[Polyline], cfg: &EvalConfig) -> ImageEval {
    match_scores(&score_image(preds, gts, cfg), cfg.alpha, cfg.beta)
}

/// Precision, recall and F1 from counts; each ratio is 0 when its
/// denominator is 0.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean IoU over true positives; `None` without any.
    pub miou: Option<f64>,
    /// Mean Fréchet distance over true positives; `None` without any.
    pub mdis: Option<f64>,
    pub per_image: Vec<ImageEval>,
}

pub fn aggregate(images: &[ImageEval]) -> MetricsReport {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let (mut iou_sum, mut dis_sum) = (0.0, 0.0);
    for img in images {
        tp += img.tp;
        fp += img.fp;
        fn_ += img.fn_;
        for m in &img.matches {
            iou_sum += m.iou;
            dis_sum += m.frechet;
        }
    }
    let (precision, recall, f1) = prf(tp, fp, fn_);
    let mean = |s: f64| (tp > 0).then(|| s / tp as f64);
    MetricsReport {
        tp,
        fp,
        fn_,
        precision,
        recall,
        f1,
        miou: mean(iou_sum),
        mdis: mean(dis_sum),
        per_image: images.to_vec(),
    }
}

/// Scores every image in parallel; output order follows input order.
pub fn score_dataset(images: &[(Vec<Polyline>, Vec<Polyline>)], cfg: &EvalConfig) -> Vec<ScoreMatrix> {
    images
        .par_iter()
        .map(|(preds, gts)| score_image(preds, gts, cfg))
        .collect()
}

/// Evaluates `(preds, gts)` images at the thresholds of `cfg`.
pub fn evaluate_dataset(images: &[(Vec<Polyline>, Vec<Polyline>)], cfg: &EvalConfig) -> MetricsReport {
    let evals: Vec<ImageEval> = score_dataset(images, cfg)
        .par_iter()
        .map(|s| match_scores(s, cfg.alpha, cfg.beta))
        .collect();
    aggregate(&evals)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub alpha: f64,
    pub beta: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepReport {
    pub af1: f64,
    pub ap: f64,
    pub ar: f64,
    /// Alpha-major order.
    pub cells: Vec<SweepCell>,
}

pub fn default_alpha_grid() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

/// 1% to 8% of the image width.
pub fn default_beta_grid(image_width: u32) -> Vec<f64> {
    (1..=8).map(|k| k as f64 * f64::from(image_width) / 100.0).collect()
}

/// Evaluates every `(alpha, beta)` grid point over precomputed scores.
pub fn sweep_scores(scores: &[ScoreMatrix], alphas: &[f64], betas: &[f64]) -> Result<SweepReport> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(Error::InvalidParameter("sweep grids must be non-empty".into()));
    }
    let grid: Vec<(f64, f64)> = alphas
        .iter()
        .flat_map(|&a| betas.iter().map(move |&b| (a, b)))
        .collect();
    let cells: Vec<SweepCell> = grid
        .par_iter()
        .map(|&(alpha, beta)| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for s in scores {
                let e = match_scores(s, alpha, beta);
                tp += e.tp;
                fp += e.fp;
                fn_ += e.fn_;
            }
            let (precision, recall, f1) = prf(tp, fp, fn_);
            SweepCell {
                alpha,
                beta,
                tp,
                fp,
                fn_,
                precision,
                recall,
                f1,
            }
        })
        .collect();
    let n = cells.len() as f64;
    let mean = |f: fn(&SweepCell) -> f64| cells.iter().map(f).sum::<f64>() / n;
    Ok(SweepReport {
        af1: mean(|c| c.f1),
        ap: mean(|c| c.precision),
        ar: mean(|c| c.recall),
        cells,
    })
}

pub fn sweep(
    images: &[(Vec<Polyline>, Vec<Polyline>)],
    alphas: &[f64],
    betas: &[f64],
    cfg: &EvalConfig,
) -> Result<SweepReport> {
    sweep_scores(&score_dataset(images, cfg), alphas, betas)
}
