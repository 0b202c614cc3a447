//! Minimum-cost bipartite matching and the two matching procedures built on
//! it: per-node ground-truth assignment for an anchor-chain, and
//! prediction-to-lane instance matching.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{resample_uniform, AnchorChain, CoordinateSpace, Point2, Polyline};
use crate::line_iou::{liou_p2p, IoUParams};
use crate::losses::{loss_reg, QueryPrediction};

/// Dense ground-truth samples per anchor-chain node.
pub const DENSE_SAMPLES_PER_NODE: usize = 10;

/// Dense row-major cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "cost ({}, {}) is not finite",
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

impl MatchResult {
    fn from_row_assignment(costs: &CostMatrix, row_to_col: &[Option<usize>]) -> Self {
        let mut col_used = vec![false; costs.cols];
        let mut pairs = Vec::new();
        let mut unmatched_rows = Vec::new();
        let mut total_cost = 0.0;
        for (r, c) in row_to_col.iter().enumerate() {
            match c {
                Some(c) => {
                    col_used[*c] = true;
                    total_cost += costs.get(r, *c);
                    pairs.push((r, *c));
                }
                None => unmatched_rows.push(r),
            }
        }
        let unmatched_cols = (0..costs.cols).filter(|&c| !col_used[c]).collect();
        Self {
            pairs,
            total_cost,
            unmatched_rows,
            unmatched_cols,
        }
    }

    pub fn col_of(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == row).map(|p| p.1)
    }
}

/// Minimum-cost assignment of `min(rows, cols)` pairs.
///
/// Shortest augmenting paths with row/column potentials, O(n^2 m). Rows are
/// inserted in index order and ties pick the lowest column, so the result is
/// deterministic.
pub fn hungarian(costs: &CostMatrix) -> MatchResult {
    if costs.rows == 0 || costs.cols == 0 {
        return MatchResult::from_row_assignment(costs, &vec![None; costs.rows]);
    }
    let row_to_col = if costs.rows <= costs.cols {
        solve_wide(costs.rows, costs.cols, |r, c| costs.get(r, c))
    } else {
        let col_to_row = solve_wide(costs.cols, costs.rows, |r, c| costs.get(c, r));
        let mut row_to_col = vec![None; costs.rows];
        for (c, r) in col_to_row.iter().enumerate() {
            if let Some(r) = r {
                row_to_col[*r] = Some(c);
            }
        }
        row_to_col
    };
    MatchResult::from_row_assignment(costs, &row_to_col)
}

/// Assignment for `n <= m`; every row gets a column.
fn solve_wide(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<Option<usize>> {
    // 1-based with column 0 as the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut min_v = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < min_v[j] {
                    min_v[j] = reduced;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![None; n];
    for j in 1..=m {
        if owner[j] != 0 {
            row_to_col[owner[j] - 1] = Some(j - 1);
        }
    }
    row_to_col
}

fn euclidean_costs(from: &[Point2], to: &[Point2]) -> CostMatrix {
    let data = from
        .iter()
        .flat_map(|p| to.iter().map(move |q| p.distance(q)))
        .collect();
    CostMatrix {
        rows: from.len(),
        cols: to.len(),
        data,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetSource {
    /// Index into the manual annotation nodes (first stage).
    Manual(usize),
    /// Index into the dense resampled nodes (second stage).
    Dense(usize),
}

/// Ground-truth target for every node of an anchor-chain.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeAssignment {
    /// One target per predicted node, in the chain's coordinate space.
    pub targets: Vec<Point2>,
    pub sources: Vec<TargetSource>,
    /// Summed Euclidean matching cost (pixels) of each stage.
    pub stage_costs: [f64; 2],
}

impl NodeAssignment {
    pub fn stage_one_nodes(&self) -> Vec<usize> {
        self.nodes_where(|s| matches!(s, TargetSource::Manual(_)))
    }

    pub fn stage_two_nodes(&self) -> Vec<usize> {
        self.nodes_where(|s| matches!(s, TargetSource::Dense(_)))
    }

    fn nodes_where(&self, f: impl Fn(&TargetSource) -> bool) -> Vec<usize> {
        self.sources
            .iter()
            .enumerate()
            .filter(|(_, s)| f(s))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Dense ground truth for a chain of `nodes` nodes.
pub fn dense_ground_truth(manual_gt: &Polyline, nodes: usize) -> Result<Polyline> {
    resample_uniform(manual_gt, (nodes * DENSE_SAMPLES_PER_NODE).max(2))
}

/// Two-stage node assignment. Predicted nodes are first matched one-to-one to
/// the manual annotation nodes; the nodes left over are then matched to the
/// dense samples. When the manual annotation has more nodes than the chain,
/// only the optimal `N` of them are used and the rest stay unassigned.
///
/// Matching runs in pixel space on Euclidean distance. A normalized chain is
/// scaled by the ground-truth image size, and targets are returned in the
/// chain's own space.
pub fn assign_nodes_two_stage(
    pred: &AnchorChain,
    manual_gt: &Polyline,
    dense_gt: &Polyline,
) -> Result<NodeAssignment> {
    let (sx, sy) = match pred.space() {
        CoordinateSpace::Normalized => (
            f64::from(manual_gt.image_width),
            f64::from(manual_gt.image_height),
        ),
        CoordinateSpace::Pixel => (1.0, 1.0),
    };
    let nodes: Vec<Point2> = pred
        .nodes()
        .iter()
        .map(|p| Point2::new(p.x * sx, p.y * sy))
        .collect();
    let (targets, sources, stage_costs) =
        assign_points_two_stage(&nodes, manual_gt.points(), dense_gt.points())?;
    Ok(NodeAssignment {
        targets: targets
            .into_iter()
            .map(|p| Point2::new(p.x / sx, p.y / sy))
            .collect(),
        sources,
        stage_costs,
    })
}

pub(crate) fn assign_points_two_stage(
    nodes: &[Point2],
    manual: &[Point2],
    dense: &[Point2],
) -> Result<(Vec<Point2>, Vec<TargetSource>, [f64; 2])> {
    let stage1 = hungarian(&euclidean_costs(nodes, manual));
    let mut targets = vec![Point2::default(); nodes.len()];
    let mut sources = vec![TargetSource::Manual(0); nodes.len()];
    for &(r, c) in &stage1.pairs {
        targets[r] = manual[c];
        sources[r] = TargetSource::Manual(c);
    }
    let remaining = stage1.unmatched_rows;
    let mut stage2_cost = 0.0;
    if !remaining.is_empty() {
        if dense.len() < remaining.len() {
            return Err(Error::InvalidParameter(format!(
                "dense ground truth has {} nodes but {} predicted nodes remain unmatched",
                dense.len(),
                remaining.len()
            )));
        }
        let left: Vec<Point2> = remaining.iter().map(|&i| nodes[i]).collect();
        let stage2 = hungarian(&euclidean_costs(&left, dense));
        stage2_cost = stage2.total_cost;
        for (r, c) in stage2.pairs {
            targets[remaining[r]] = dense[c];
            sources[remaining[r]] = TargetSource::Dense(c);
        }
    }
    Ok((targets, sources, [stage1.total_cost, stage2_cost]))
}

/// Weights of the prediction-to-lane matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceCostWeights {
    pub w_cls: f64,
    pub w_l1: f64,
    pub w_iou: f64,
}

impl Default for InstanceCostWeights {
    fn default() -> Self {
        Self {
            w_cls: 1.0,
            w_l1: 5.0,
            w_iou: 1.0,
        }
    }
}

impl InstanceCostWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_cls, self.w_l1, self.w_iou];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || all.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidParameter(format!(
                "instance cost weights must be >= 0 and not all zero: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Matching cost between one prediction and one lane:
/// `w_cls (1 - p) + w_l1 * mean node L1 + w_iou (1 - point-to-point IoU)`.
///
/// The L1 term is measured in normalized coordinates after two-stage node
/// assignment; the IoU uses pixel coordinates.
pub fn instance_cost(
    pred: &QueryPrediction,
    gt: &Polyline,
    weights: &InstanceCostWeights,
    params: &IoUParams,
) -> Result<f64> {
    let n = pred.chain.len();
    let dense = dense_ground_truth(gt, n)?;
    let (w, h) = (f64::from(gt.image_width), f64::from(gt.image_height));
    let pixel_chain = AnchorChain::new(
        pred.chain.to_pixels(gt.image_width, gt.image_height)?.points().to_vec(),
        CoordinateSpace::Pixel,
    )?;
    let assignment = assign_nodes_two_stage(&pixel_chain, gt, &dense)?;
    let normalized_nodes = AnchorChain::new(
        pixel_chain
            .nodes()
            .iter()
            .map(|p| Point2::new(p.x / w, p.y / h))
            .collect(),
        CoordinateSpace::Pixel,
    )?;
    let normalized_targets: Vec<Point2> = assignment
        .targets
        .iter()
        .map(|p| Point2::new(p.x / w, p.y / h))
        .collect();
    let l1 = loss_reg(&normalized_nodes, &normalized_targets)?;
    let pred_line = pixel_chain.to_pixels(gt.image_width, gt.image_height)?;
    let iou = liou_p2p(&pred_line, gt, params)?;
    Ok(weights.w_cls * (1.0 - pred.probability) + weights.w_l1 * l1 + weights.w_iou * (1.0 - iou))
}

/// One-to-one matching of predictions (rows) to ground-truth lanes (columns).
/// With no ground truth every prediction is unmatched.
pub fn instance_match(
    preds: &[QueryPrediction],
    gts: &[Polyline],
    weights: &InstanceCostWeights,
    params: &IoUParams,
) -> Result<MatchResult> {
    weights.validate()?;
    params.validate()?;
    let cols = gts.len();
    let costs: Vec<f64> = (0..preds.len() * cols)
        .into_par_iter()
        .map(|i| instance_cost(&preds[i / cols], &gts[i % cols], weights, params))
        .collect::<Result<_>>()?;
    Ok(hungarian(&CostMatrix::new(preds.len(), cols, costs)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::normalize;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_min(costs: &CostMatrix) -> f64 {
        fn rec(costs: &CostMatrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == costs.rows() {
                *best = best.min(acc);
                return;
            }
            for c in 0..costs.cols() {
                if !used[c] {
                    used[c] = true;
                    rec(costs, row + 1, used, acc + costs.get(row, c), best);
                    used[c] = false;
                }
            }
        }
        let t;
        let m = if costs.rows() > costs.cols() {
            t = CostMatrix::from_fn(costs.cols(), costs.rows(), |r, c| costs.get(c, r)).unwrap();
            &t
        } else {
            costs
        };
        let mut best = f64::INFINITY;
        rec(m, 0, &mut vec![false; m.cols()], 0.0, &mut best);
        best
    }

    #[test]
    fn hungarian_small_cases() {
        let r = hungarian(&CostMatrix::new(1, 1, vec![1.0]).unwrap());
        assert_eq!(r.pairs, vec![(0, 0)]);
        assert_eq!(r.total_cost, 1.0);
        let r = hungarian(&CostMatrix::new(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap());
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(r.total_cost, 2.0);
        let r = hungarian(&CostMatrix::new(0, 3, vec![]).unwrap());
        assert!(r.pairs.is_empty());
        assert_eq!(r.unmatched_cols, vec![0, 1, 2]);
    }

    #[test]
    fn hungarian_rectangular() {
        let tall = CostMatrix::new(3, 2, vec![5.0, 1.0, 1.0, 5.0, 0.5, 0.5]).unwrap();
        let r = hungarian(&tall);
        assert_eq!(r.pairs.len(), 2);
        assert_eq!(r.total_cost, brute_force_min(&tall));
        assert_eq!(r.unmatched_rows.len(), 1);
    }

    #[test]
    fn hungarian_random_6x6_matches_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let c = CostMatrix::from_fn(6, 6, |_, _| rng.gen_range(0..100) as f64).unwrap();
            assert_eq!(hungarian(&c).total_cost, brute_force_min(&c));
        }
    }

    #[test]
    fn non_finite_costs_rejected() {
        assert!(CostMatrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(CostMatrix::new(1, 2, vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn hungarian_is_optimal(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = CostMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-50.0..50.0)).unwrap();
            let r = hungarian(&c);
            prop_assert_eq!(r.pairs.len(), rows.min(cols));
            let best = brute_force_min(&c);
            prop_assert!((r.total_cost - best).abs() <= 1e-9);
            let mut seen_r = vec![false; rows];
            let mut seen_c = vec![false; cols];
            for (i, j) in r.pairs {
                prop_assert!(!seen_r[i] && !seen_c[j]);
                seen_r[i] = true;
                seen_c[j] = true;
            }
        }
    }

    fn pixel_chain(coords: &[(f64, f64)]) -> AnchorChain {
        AnchorChain::new(coords.iter().copied().map(Point2::from).collect(), CoordinateSpace::Pixel)
            .unwrap()
    }

    #[test]
    fn identical_nodes_assign_to_themselves() {
        let coords = [(10.0, 500.0), (60.0, 300.0), (90.0, 100.0)];
        let gt = Polyline::from_xy(&coords, 1640, 590).unwrap();
        let dense = dense_ground_truth(&gt, 3).unwrap();
        let a = assign_nodes_two_stage(&pixel_chain(&coords), &gt, &dense).unwrap();
        assert_eq!(a.targets, gt.points());
        assert_eq!(a.stage_costs, [0.0, 0.0]);
        assert_eq!(a.stage_one_nodes(), vec![0, 1, 2]);
    }

    #[test]
    fn normalized_chain_targets_stay_normalized() {
        let gt = Polyline::from_xy(&[(164.0, 59.0), (820.0, 295.0)], 1640, 590).unwrap();
        let dense = dense_ground_truth(&gt, 2).unwrap();
        let chain = normalize(&gt).unwrap();
        let a = assign_nodes_two_stage(&chain, &gt, &dense).unwrap();
        assert!((a.targets[0].x - 0.1).abs() < 1e-12 && (a.targets[1].y - 0.5).abs() < 1e-12);
    }

    #[test]
    fn more_manual_nodes_than_chain_nodes() {
        let gt = Polyline::from_xy(&[(0.0, 0.0), (0.0, 50.0), (0.0, 100.0), (0.0, 150.0)], 200, 200)
            .unwrap();
        let dense = dense_ground_truth(&gt, 2).unwrap();
        let a = assign_nodes_two_stage(&pixel_chain(&[(1.0, 1.0), (1.0, 149.0)]), &gt, &dense)
            .unwrap();
        assert_eq!(a.sources, vec![TargetSource::Manual(0), TargetSource::Manual(3)]);
    }

    #[test]
    fn instance_match_identical_is_free() {
        let gt = Polyline::from_xy(&[(100.0, 500.0), (300.0, 300.0), (400.0, 100.0)], 1640, 590)
            .unwrap();
        let pred = QueryPrediction::new(1.0, normalize(&gt).unwrap()).unwrap();
        let r = instance_match(&[pred], &[gt], &InstanceCostWeights::default(), &IoUParams::default())
            .unwrap();
        assert_eq!(r.pairs, vec![(0, 0)]);
        assert!(r.total_cost.abs() < 1e-12);
    }

    #[test]
    fn instance_match_without_gt() {
        let gt = Polyline::from_xy(&[(100.0, 500.0), (400.0, 100.0)], 1640, 590).unwrap();
        let pred = QueryPrediction::new(0.3, normalize(&gt).unwrap()).unwrap();
        let r = instance_match(&[pred], &[], &InstanceCostWeights::default(), &IoUParams::default())
            .unwrap();
        assert!(r.pairs.is_empty());
        assert_eq!(r.unmatched_rows, vec![0]);
    }
}
