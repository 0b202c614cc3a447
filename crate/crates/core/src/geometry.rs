//! Lane geometry: points, pixel-space polylines, normalized anchor-chains and
//! the primitives the IoU and matching code is built on (arc-length
//! resampling, monotone splitting along a sampling axis, interpolation at a
//! reference coordinate).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of nodes in an anchor-chain.
pub const DEFAULT_CHAIN_NODES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn lerp(&self, other: &Point2, t: f64) -> Point2 {
        Point2::new(
            self.x + t * (other.x - self.x),
            self.y + t * (other.y - self.y),
        )
    }

    /// Coordinate along `axis`.
    pub fn along(&self, axis: Axis) -> f64 {
        match axis {
            Axis::Vertical => self.y,
            Axis::Horizontal => self.x,
        }
    }

    /// Coordinate orthogonal to `axis`.
    pub fn across(&self, axis: Axis) -> f64 {
        match axis {
            Axis::Vertical => self.x,
            Axis::Horizontal => self.y,
        }
    }
}

impl From<(f64, f64)> for Point2 {
    fn from((x, y): (f64, f64)) -> Self {
        Point2::new(x, y)
    }
}

/// Sampling axis. `Vertical` walks the y coordinate (reference lines are image
/// rows), `Horizontal` walks x (reference lines are columns).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Vertical,
    Horizontal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Increasing,
    Decreasing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordinateSpace {
    Normalized,
    Pixel,
}

/// Drops consecutive duplicates and checks finiteness and length.
fn clean_points(points: Vec<Point2>) -> Result<Vec<Point2>> {
    if let Some(i) = points.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let mut out: Vec<Point2> = Vec::with_capacity(points.len());
    for p in points {
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    if out.len() < 2 {
        return Err(Error::TooFewPoints(out.len()));
    }
    Ok(out)
}

/// Ordered pixel-space point sequence describing one lane in an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    points: Vec<Point2>,
    pub image_width: u32,
    pub image_height: u32,
}

impl Polyline {
    /// Builds a polyline, collapsing consecutive duplicate points.
    pub fn new(points: Vec<Point2>, image_width: u32, image_height: u32) -> Result<Self> {
        Ok(Self {
            points: clean_points(points)?,
            image_width,
            image_height,
        })
    }

    pub fn from_xy(coords: &[(f64, f64)], image_width: u32, image_height: u32) -> Result<Self> {
        Self::new(
            coords.iter().copied().map(Point2::from).collect(),
            image_width,
            image_height,
        )
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn with_points(&self, points: Vec<Point2>) -> Result<Self> {
        Self::new(points, self.image_width, self.image_height)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| Point2::new(p.x + dx, p.y + dy))
                .collect(),
            ..*self
        }
    }
}

/// One lane instance as an ordered list of nodes, either normalized to the
/// unit square or in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorChain {
    nodes: Vec<Point2>,
    space: CoordinateSpace,
}

impl AnchorChain {
    pub fn new(nodes: Vec<Point2>, space: CoordinateSpace) -> Result<Self> {
        let nodes = clean_points(nodes)?;
        if space == CoordinateSpace::Normalized {
            let bad = nodes
                .iter()
                .position(|p| !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y));
            if let Some(index) = bad {
                let p = nodes[index];
                return Err(Error::OutOfUnitRange { index, x: p.x, y: p.y });
            }
        }
        Ok(Self { nodes, space })
    }

    /// Skips cleanup and range checks; used where node indices must stay
    /// stable under small perturbations.
    pub(crate) fn new_unchecked(nodes: Vec<Point2>, space: CoordinateSpace) -> Self {
        Self { nodes, space }
    }

    pub fn nodes(&self) -> &[Point2] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn space(&self) -> CoordinateSpace {
        self.space
    }

    /// Pixel-space polyline for this chain. Normalized chains are scaled by
    /// the image size; pixel chains are copied as-is.
    pub fn to_pixels(&self, width: u32, height: u32) -> Result<Polyline> {
        match self.space {
            CoordinateSpace::Normalized => denormalize(self, width, height),
            CoordinateSpace::Pixel => Polyline::new(self.nodes.clone(), width, height),
        }
    }
}

/// Sum of Euclidean edge lengths.
pub fn arc_length(line: &Polyline) -> f64 {
    points_arc_length(line.points())
}

pub(crate) fn points_arc_length(points: &[Point2]) -> f64 {
    points.windows(2).map(|w| w[0].distance(&w[1])).sum()
}

/// Location of a resampled point: `points[edge].lerp(points[edge + 1], tau)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct EdgeSample {
    pub edge: usize,
    pub tau: f64,
}

/// Positions of `count` equally spaced (in arc length) samples along `points`.
pub(crate) fn uniform_samples(points: &[Point2], count: usize) -> Result<Vec<EdgeSample>> {
    if count < 2 {
        return Err(Error::InvalidParameter(format!(
            "resample count must be >= 2, got {count}"
        )));
    }
    if points.len() < 2 {
        return Err(Error::TooFewPoints(points.len()));
    }
    let lengths: Vec<f64> = points.windows(2).map(|w| w[0].distance(&w[1])).collect();
    let total: f64 = lengths.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegeneratePolyline);
    }
    let last_edge = lengths.len() - 1;
    let mut out = Vec::with_capacity(count);
    out.push(EdgeSample { edge: 0, tau: 0.0 });
    let mut edge = 0;
    let mut start = 0.0;
    for k in 1..count - 1 {
        let target = total * k as f64 / (count - 1) as f64;
        while edge < last_edge && (start + lengths[edge] < target || lengths[edge] == 0.0) {
            start += lengths[edge];
            edge += 1;
        }
        let tau = if lengths[edge] > 0.0 {
            ((target - start) / lengths[edge]).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push(EdgeSample { edge, tau });
    }
    out.push(EdgeSample {
        edge: last_edge,
        tau: 1.0,
    });
    Ok(out)
}

pub(crate) fn evaluate_samples(points: &[Point2], samples: &[EdgeSample]) -> Vec<Point2> {
    let last = samples.len() - 1;
    samples
        .iter()
        .enumerate()
        .map(|(k, s)| {
            if k == 0 {
                points[0]
            } else if k == last {
                points[points.len() - 1]
            } else {
                points[s.edge].lerp(&points[s.edge + 1], s.tau)
            }
        })
        .collect()
}

/// Pulls gradients on uniformly resampled points back to the source nodes.
///
/// Sample `k` sits at arc length `c_k * L` with `c_k = k / (count - 1)`, so it
/// depends on every edge length through `L` and on the preceding edges
/// through the edge start offset.
pub(crate) fn uniform_samples_vjp(
    points: &[Point2],
    samples: &[EdgeSample],
    sample_grads: &[Point2],
) -> Vec<Point2> {
    let n_edges = points.len() - 1;
    let deltas: Vec<Point2> = points
        .windows(2)
        .map(|w| Point2::new(w[1].x - w[0].x, w[1].y - w[0].y))
        .collect();
    let lengths: Vec<f64> = deltas.iter().map(|d| d.x.hypot(d.y)).collect();
    let count = samples.len();

    let mut grads = vec![Point2::default(); points.len()];
    // d(objective)/d(length of edge j)
    let mut length_grads = vec![0.0; n_edges];
    // contributions of the form g_tau * c_k / len_e apply to every edge
    let mut global_length_grad = 0.0;
    // prefix term: -g_tau / len_e for all j < e
    let mut prefix_grad = vec![0.0; n_edges + 1];

    for (k, (s, g)) in samples.iter().zip(sample_grads).enumerate() {
        let e = s.edge;
        grads[e].x += (1.0 - s.tau) * g.x;
        grads[e].y += (1.0 - s.tau) * g.y;
        grads[e + 1].x += s.tau * g.x;
        grads[e + 1].y += s.tau * g.y;

        let len = lengths[e];
        if len <= 0.0 {
            continue;
        }
        let g_tau = g.x * deltas[e].x + g.y * deltas[e].y;
        let c = k as f64 / (count - 1) as f64;
        let u = s.tau * len;
        global_length_grad += g_tau * c / len;
        prefix_grad[e] -= g_tau / len;
        length_grads[e] -= g_tau * u / (len * len);
    }
    // prefix_grad[e] applies to edges j < e
    let mut running = 0.0;
    for j in (0..n_edges).rev() {
        running += prefix_grad[j + 1];
        length_grads[j] += running + global_length_grad;
    }
    for j in 0..n_edges {
        let len = lengths[j];
        if len <= 0.0 {
            continue;
        }
        let ux = deltas[j].x / len;
        let uy = deltas[j].y / len;
        grads[j + 1].x += length_grads[j] * ux;
        grads[j + 1].y += length_grads[j] * uy;
        grads[j].x -= length_grads[j] * ux;
        grads[j].y -= length_grads[j] * uy;
    }
    grads
}

/// Resamples `line` to `count` points equally spaced in arc length. The first
/// and last points are the input endpoints.
pub fn resample_uniform(line: &Polyline, count: usize) -> Result<Polyline> {
    let samples = uniform_samples(line.points(), count)?;
    let points = evaluate_samples(line.points(), &samples);
    // resampled points of a valid line are pairwise distinct along the curve,
    // but may coincide numerically on very short lines
    Ok(Polyline {
        points,
        image_width: line.image_width,
        image_height: line.image_height,
    })
}

/// Resamples so that consecutive points are at most `step` apart.
pub fn resample_with_step(line: &Polyline, step: f64) -> Result<Polyline> {
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!("step must be > 0, got {step}")));
    }
    let count = ((arc_length(line) / step).ceil() as usize + 1).max(2);
    resample_uniform(line, count)
}

pub fn normalize(line: &Polyline) -> Result<AnchorChain> {
    let (w, h) = check_dims(line.image_width, line.image_height)?;
    let nodes = line
        .points()
        .iter()
        .map(|p| Point2::new(p.x / w, p.y / h))
        .collect();
    AnchorChain::new(nodes, CoordinateSpace::Normalized)
}

pub fn denormalize(chain: &AnchorChain, width: u32, height: u32) -> Result<Polyline> {
    let (w, h) = check_dims(width, height)?;
    let points = chain
        .nodes()
        .iter()
        .map(|p| Point2::new(p.x * w, p.y * h))
        .collect();
    Polyline::new(points, width, height)
}

fn check_dims(width: u32, height: u32) -> Result<(f64, f64)> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidParameter(format!(
            "image dimensions must be positive, got {width}x{height}"
        )));
    }
    Ok((f64::from(width), f64::from(height)))
}

/// A run of points whose coordinate along `axis` never reverses direction.
/// Equal consecutive axis coordinates (flat runs) are kept inside a segment.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneSegment {
    pub points: Vec<Point2>,
    /// Index of `points[0]` in the source polyline.
    pub start_index: usize,
    pub axis: Axis,
    pub direction: Direction,
}

impl MonotoneSegment {
    /// Closed range `[lo, hi]` covered along the axis.
    pub fn axis_range(&self) -> (f64, f64) {
        let a = self.points[0].along(self.axis);
        let b = self.points[self.points.len() - 1].along(self.axis);
        if a <= b {
            (a, b)
        } else {
            (b, a)
        }
    }
}

/// Splits `points` at every reversal of the axis coordinate. The vertex where
/// the direction reverses ends one segment and starts the next.
pub(crate) fn split_points(points: &[Point2], axis: Axis) -> Vec<MonotoneSegment> {
    let mut segments = Vec::new();
    let mut start = 0;
    let mut direction: Option<Direction> = None;
    for i in 1..points.len() {
        let delta = points[i].along(axis) - points[i - 1].along(axis);
        let step = if delta > 0.0 {
            Some(Direction::Increasing)
        } else if delta < 0.0 {
            Some(Direction::Decreasing)
        } else {
            None
        };
        match (direction, step) {
            (_, None) => {}
            (None, Some(s)) => direction = Some(s),
            (Some(d), Some(s)) if d == s => {}
            (Some(d), Some(s)) => {
                segments.push(MonotoneSegment {
                    points: points[start..i].to_vec(),
                    start_index: start,
                    axis,
                    direction: d,
                });
                start = i - 1;
                direction = Some(s);
            }
        }
    }
    segments.push(MonotoneSegment {
        points: points[start..].to_vec(),
        start_index: start,
        axis,
        direction: direction.unwrap_or(Direction::Increasing),
    });
    segments
}

pub fn split_monotone(line: &Polyline, axis: Axis) -> Vec<MonotoneSegment> {
    split_points(line.points(), axis)
}

/// A reference-line crossing on edge `edge` (local to the segment) at
/// interpolation weight `t` from `points[edge]` towards `points[edge + 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Crossing {
    pub point: Point2,
    pub edge: usize,
    pub t: f64,
}

fn crossing_on_edge(a: &Point2, b: &Point2, axis: Axis, coordinate: f64, edge: usize) -> Crossing {
    let a0 = a.along(axis);
    let a1 = b.along(axis);
    let t = if a1 != a0 {
        ((coordinate - a0) / (a1 - a0)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let across = a.across(axis) + t * (b.across(axis) - a.across(axis));
    let point = match axis {
        Axis::Vertical => Point2::new(across, coordinate),
        Axis::Horizontal => Point2::new(coordinate, across),
    };
    Crossing { point, edge, t }
}

pub(crate) fn crossing_at(segment: &MonotoneSegment, coordinate: f64) -> Option<Crossing> {
    let axis = segment.axis;
    segment
        .points
        .windows(2)
        .enumerate()
        .find(|(_, w)| {
            let (a0, a1) = (w[0].along(axis), w[1].along(axis));
            a0.min(a1) <= coordinate && coordinate <= a0.max(a1)
        })
        .map(|(edge, w)| crossing_on_edge(&w[0], &w[1], axis, coordinate, edge))
}

/// Point where the reference line at `coordinate` crosses `segment`, taking
/// the first crossing in point order; `None` when out of range.
pub fn interpolate_at(segment: &MonotoneSegment, coordinate: f64) -> Option<Point2> {
    crossing_at(segment, coordinate).map(|c| c.point)
}

/// Crossings of a monotone segment with reference lines `origin + k * step`,
/// for `k` ascending, as `(k, crossing)`. Linear in points + lines crossed.
pub(crate) fn grid_crossings(
    segment: &MonotoneSegment,
    origin: f64,
    step: f64,
    out: &mut Vec<(usize, Crossing)>,
) {
    out.clear();
    let axis = segment.axis;
    let (lo, hi) = segment.axis_range();
    let Some((k_lo, k_hi)) = grid_index_range(origin, step, lo, hi) else {
        return;
    };
    let pts = &segment.points;
    match segment.direction {
        Direction::Increasing => {
            let mut edge = 0;
            for k in k_lo..=k_hi {
                let c = origin + k as f64 * step;
                while edge + 1 < pts.len() - 1 && pts[edge + 1].along(axis) < c {
                    edge += 1;
                }
                out.push((k, crossing_on_edge(&pts[edge], &pts[edge + 1], axis, c, edge)));
            }
        }
        Direction::Decreasing => {
            let mut edge = 0;
            let start = out.len();
            for k in (k_lo..=k_hi).rev() {
                let c = origin + k as f64 * step;
                while edge + 1 < pts.len() - 1 && pts[edge + 1].along(axis) > c {
                    edge += 1;
                }
                out.push((k, crossing_on_edge(&pts[edge], &pts[edge + 1], axis, c, edge)));
            }
            out[start..].reverse();
        }
    }
}

/// Inclusive range of grid indices `k >= 0` with `lo <= origin + k*step <= hi`.
pub(crate) fn grid_index_range(origin: f64, step: f64, lo: f64, hi: f64) -> Option<(usize, usize)> {
    let at = |k: i64| origin + k as f64 * step;
    let mut k_lo = ((lo - origin) / step).ceil().max(0.0) as i64;
    while k_lo > 0 && at(k_lo - 1) >= lo {
        k_lo -= 1;
    }
    while at(k_lo) < lo {
        k_lo += 1;
    }
    let mut k_hi = ((hi - origin) / step).floor() as i64;
    while at(k_hi + 1) <= hi {
        k_hi += 1;
    }
    while k_hi >= 0 && at(k_hi) > hi {
        k_hi -= 1;
    }
    if k_hi < k_lo || k_hi < 0 {
        None
    } else {
        Some((k_lo as usize, k_hi as usize))
    }
}
