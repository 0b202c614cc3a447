//! Line IoU between two lanes, in two flavors, with analytic gradients with
//! respect to the nodes of the first line.
//!
//! Both flavors treat each sampled point as the midpoint of a segment of
//! length `2r` laid along the line joining it to its partner. For a pair at
//! distance `dist` the overlap is `2r - dist` (kept negative once the segments
//! separate) and the union is `2r + dist`; the IoU is the ratio of the sums.
//!
//! * point-to-point: both lines are resampled to `n_pairs` points equally
//!   spaced in arc length and paired by index.
//! * dense-sampling: both lines are split into runs that are monotone along
//!   the sampling axis and crossed by reference lines every `d` pixels. A
//!   reference line crossing both paired runs contributes a pair; one
//!   crossing a single run adds `2r` to the union only.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    evaluate_samples, grid_crossings, split_points, uniform_samples, uniform_samples_vjp, Axis,
    Crossing, MonotoneSegment, Point2, Polyline,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IoUParams {
    /// Half-length of the virtual segment around each sample, pixels.
    pub r: f64,
    /// Reference-line spacing for dense sampling, pixels.
    pub d: f64,
    /// Number of paired samples for point-to-point IoU.
    pub n_pairs: usize,
}

impl Default for IoUParams {
    fn default() -> Self {
        Self {
            r: 8.0,
            d: 8.0,
            n_pairs: 72,
        }
    }
}

impl IoUParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::InvalidParameter(format!("r must be > 0, got {}", self.r)));
        }
        if !(self.d > 0.0 && self.d.is_finite()) {
            return Err(Error::InvalidParameter(format!("d must be > 0, got {}", self.d)));
        }
        if self.n_pairs < 2 {
            return Err(Error::InvalidParameter(format!(
                "n_pairs must be >= 2, got {}",
                self.n_pairs
            )));
        }
        Ok(())
    }
}

/// Sampling axis for dense-sampling IoU. `Both` averages the two single-axis
/// values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingAxis {
    Vertical,
    Horizontal,
    Both,
}

impl From<Axis> for SamplingAxis {
    fn from(axis: Axis) -> Self {
        match axis {
            Axis::Vertical => SamplingAxis::Vertical,
            Axis::Horizontal => SamplingAxis::Horizontal,
        }
    }
}

impl SamplingAxis {
    fn axes(self) -> &'static [Axis] {
        match self {
            SamplingAxis::Vertical => &[Axis::Vertical],
            SamplingAxis::Horizontal => &[Axis::Horizontal],
            SamplingAxis::Both => &[Axis::Vertical, Axis::Horizontal],
        }
    }
}

/// IoU value and its gradient with respect to each node of the first line.
#[derive(Debug, Clone, PartialEq)]
pub struct IoUGrad {
    pub value: f64,
    pub d_value_d_nodes: Vec<Point2>,
}

impl IoUGrad {
    pub fn max_abs(&self) -> f64 {
        self.d_value_d_nodes
            .iter()
            .map(|g| g.x.abs().max(g.y.abs()))
            .fold(0.0, f64::max)
    }
}

/// Derivative of `I / U` with respect to one pair distance, where each pair
/// adds `2r - dist` to `I` and `2r + dist` to `U`.
fn ratio_distance_grad(inter: f64, union: f64) -> f64 {
    -(inter + union) / (union * union)
}

fn unit_diff(a: &Point2, b: &Point2) -> Point2 {
    let dist = a.distance(b);
    if dist > 0.0 {
        Point2::new((a.x - b.x) / dist, (a.y - b.y) / dist)
    } else {
        // coincident points: subgradient 0
        Point2::default()
    }
}

pub fn liou_p2p(a: &Polyline, b: &Polyline, params: &IoUParams) -> Result<f64> {
    p2p_points(a.points(), b.points(), params)
}

pub(crate) fn p2p_points(a: &[Point2], b: &[Point2], params: &IoUParams) -> Result<f64> {
    params.validate()?;
    let sa = evaluate_samples(a, &uniform_samples(a, params.n_pairs)?);
    let sb = evaluate_samples(b, &uniform_samples(b, params.n_pairs)?);
    let two_r = 2.0 * params.r;
    let (mut inter, mut union) = (0.0, 0.0);
    for (p, q) in sa.iter().zip(&sb) {
        let dist = p.distance(q);
        inter += two_r - dist;
        union += two_r + dist;
    }
    Ok(inter / union)
}

pub fn liou_p2p_grad(a: &Polyline, b: &Polyline, params: &IoUParams) -> Result<IoUGrad> {
    p2p_grad_points(a.points(), b.points(), params)
}

pub(crate) fn p2p_grad_points(a: &[Point2], b: &[Point2], params: &IoUParams) -> Result<IoUGrad> {
    params.validate()?;
    let samples_a = uniform_samples(a, params.n_pairs)?;
    let sa = evaluate_samples(a, &samples_a);
    let sb = evaluate_samples(b, &uniform_samples(b, params.n_pairs)?);
    let two_r = 2.0 * params.r;
    let (mut inter, mut union) = (0.0, 0.0);
    for (p, q) in sa.iter().zip(&sb) {
        let dist = p.distance(q);
        inter += two_r - dist;
        union += two_r + dist;
    }
    let g_dist = ratio_distance_grad(inter, union);
    let sample_grads: Vec<Point2> = sa
        .iter()
        .zip(&sb)
        .map(|(p, q)| {
            let u = unit_diff(p, q);
            Point2::new(g_dist * u.x, g_dist * u.y)
        })
        .collect();
    Ok(IoUGrad {
        value: inter / union,
        d_value_d_nodes: uniform_samples_vjp(a, &samples_a, &sample_grads),
    })
}

/// One line split along an axis, with the grid crossings of every run.
struct SampledLine {
    segments: Vec<MonotoneSegment>,
    crossings: Vec<Vec<(usize, Crossing)>>,
}

fn axis_min(points: &[Point2], axis: Axis) -> (f64, usize) {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| (p.along(axis), i))
        .fold((f64::INFINITY, 0), |acc, v| if v.0 < acc.0 { v } else { acc })
}

fn sample_line(points: &[Point2], axis: Axis, origin: f64, step: f64) -> SampledLine {
    let segments = split_points(points, axis);
    let crossings = segments
        .iter()
        .map(|seg| {
            let mut out = Vec::new();
            grid_crossings(seg, origin, step, &mut out);
            out
        })
        .collect();
    SampledLine { segments, crossings }
}

/// Reference-line origin: the smallest axis coordinate over both lines, so
/// the grid moves with the geometry and does not depend on argument order.
fn grid_origin(a: &[Point2], b: &[Point2], axis: Axis) -> (f64, bool, usize) {
    let (min_a, idx_a) = axis_min(a, axis);
    let (min_b, _) = axis_min(b, axis);
    if min_a < min_b {
        (min_a, true, idx_a)
    } else {
        (min_b, false, 0)
    }
}

/// Visits each run pairing `(A_i, B_i)` and each reference line `k` in
/// ascending order, with the crossings present on that line.
fn for_each_term<F>(la: &SampledLine, lb: &SampledLine, mut f: F)
where
    F: FnMut(usize, usize, Option<&Crossing>, Option<&Crossing>),
{
    let runs = la.segments.len().max(lb.segments.len());
    let empty = Vec::new();
    for i in 0..runs {
        let ca = la.crossings.get(i).unwrap_or(&empty);
        let cb = lb.crossings.get(i).unwrap_or(&empty);
        let (mut ia, mut ib) = (0, 0);
        while ia < ca.len() || ib < cb.len() {
            let ka = ca.get(ia).map(|c| c.0).unwrap_or(usize::MAX);
            let kb = cb.get(ib).map(|c| c.0).unwrap_or(usize::MAX);
            if ka == kb {
                f(i, ka, Some(&ca[ia].1), Some(&cb[ib].1));
                ia += 1;
                ib += 1;
            } else if ka < kb {
                f(i, ka, Some(&ca[ia].1), None);
                ia += 1;
            } else {
                f(i, kb, None, Some(&cb[ib].1));
                ib += 1;
            }
        }
    }
}

fn ds_single_axis(a: &[Point2], b: &[Point2], params: &IoUParams, axis: Axis) -> Result<f64> {
    let (origin, _, _) = grid_origin(a, b, axis);
    let la = sample_line(a, axis, origin, params.d);
    let lb = sample_line(b, axis, origin, params.d);
    let two_r = 2.0 * params.r;
    let (mut inter, mut union) = (0.0, 0.0);
    for_each_term(&la, &lb, |_, _, pa, pb| match (pa, pb) {
        (Some(p), Some(q)) => {
            let dist = p.point.distance(&q.point);
            inter += two_r - dist;
            union += two_r + dist;
        }
        _ => union += two_r,
    });
    if union == 0.0 {
        return Err(Error::EmptySampling);
    }
    Ok(inter / union)
}

pub fn liou_ds(a: &Polyline, b: &Polyline, params: &IoUParams, axis: SamplingAxis) -> Result<f64> {
    ds_points(a.points(), b.points(), params, axis)
}

pub(crate) fn ds_points(
    a: &[Point2],
    b: &[Point2],
    params: &IoUParams,
    axis: SamplingAxis,
) -> Result<f64> {
    params.validate()?;
    let axes = axis.axes();
    let mut total = 0.0;
    for &ax in axes {
        total += ds_single_axis(a, b, params, ax)?;
    }
    Ok(total / axes.len() as f64)
}

/// Dense-sampling IoU for many pairs in parallel; output order follows input.
pub fn liou_ds_batch(
    pairs: &[(Polyline, Polyline)],
    params: &IoUParams,
    axis: SamplingAxis,
) -> Vec<Result<f64>> {
    pairs
        .par_iter()
        .map(|(a, b)| liou_ds(a, b, params, axis))
        .collect()
}

/// Number of monotone runs each line splits into along `axis`.
pub fn ds_segment_counts(a: &Polyline, b: &Polyline, axis: Axis) -> (usize, usize) {
    (
        split_points(a.points(), axis).len(),
        split_points(b.points(), axis).len(),
    )
}

/// Derivative of a crossing's across-axis coordinate: weights on the edge
/// endpoints' across and along coordinates and on the reference coordinate.
struct CrossingJacobian {
    w0_across: f64,
    w1_across: f64,
    w0_along: f64,
    w1_along: f64,
    w_ref: f64,
}

fn crossing_jacobian(p0: &Point2, p1: &Point2, axis: Axis, t: f64) -> CrossingJacobian {
    let span = p1.along(axis) - p0.along(axis);
    let across_delta = p1.across(axis) - p0.across(axis);
    if span == 0.0 {
        return CrossingJacobian {
            w0_across: 1.0,
            w1_across: 0.0,
            w0_along: 0.0,
            w1_along: 0.0,
            w_ref: 0.0,
        };
    }
    CrossingJacobian {
        w0_across: 1.0 - t,
        w1_across: t,
        w0_along: across_delta * (t - 1.0) / span,
        w1_along: -across_delta * t / span,
        w_ref: across_delta / span,
    }
}

fn add_along_across(g: &mut Point2, axis: Axis, along: f64, across: f64) {
    match axis {
        Axis::Vertical => {
            g.y += along;
            g.x += across;
        }
        Axis::Horizontal => {
            g.x += along;
            g.y += across;
        }
    }
}

fn ds_grad_single_axis(
    a: &[Point2],
    b: &[Point2],
    params: &IoUParams,
    axis: Axis,
) -> Result<(f64, Vec<Point2>)> {
    let (origin, origin_on_a, origin_node) = grid_origin(a, b, axis);
    let la = sample_line(a, axis, origin, params.d);
    let lb = sample_line(b, axis, origin, params.d);
    let two_r = 2.0 * params.r;

    let (mut inter, mut union) = (0.0, 0.0);
    for_each_term(&la, &lb, |_, _, pa, pb| match (pa, pb) {
        (Some(p), Some(q)) => {
            let dist = p.point.distance(&q.point);
            inter += two_r - dist;
            union += two_r + dist;
        }
        _ => union += two_r,
    });
    if union == 0.0 {
        return Err(Error::EmptySampling);
    }
    let g_dist = ratio_distance_grad(inter, union);

    let mut grads = vec![Point2::default(); a.len()];
    let mut g_origin = 0.0;
    for_each_term(&la, &lb, |i, _, pa, pb| {
        let (Some(p), Some(q)) = (pa, pb) else {
            return;
        };
        let u = unit_diff(&p.point, &q.point);
        // gradient on the A crossing; the B crossing receives the negative
        let ga = Point2::new(g_dist * u.x, g_dist * u.y);
        // both crossings lie on the same reference line, so only the
        // across component of the separation is non-zero
        let ga_across = ga.across(axis);

        let seg_a = &la.segments[i];
        let e0 = seg_a.start_index + p.edge;
        let jac_a = crossing_jacobian(&a[e0], &a[e0 + 1], axis, p.t);
        add_along_across(&mut grads[e0], axis, ga_across * jac_a.w0_along, ga_across * jac_a.w0_across);
        add_along_across(
            &mut grads[e0 + 1],
            axis,
            ga_across * jac_a.w1_along,
            ga_across * jac_a.w1_across,
        );

        let seg_b = &lb.segments[i];
        let f0 = seg_b.start_index + q.edge;
        let jac_b = crossing_jacobian(&b[f0], &b[f0 + 1], axis, q.t);
        g_origin += ga_across * (jac_a.w_ref - jac_b.w_ref);
    });
    if origin_on_a {
        add_along_across(&mut grads[origin_node], axis, g_origin, 0.0);
    }
    Ok((inter / union, grads))
}

pub fn liou_ds_grad(
    a: &Polyline,
    b: &Polyline,
    params: &IoUParams,
    axis: SamplingAxis,
) -> Result<IoUGrad> {
    ds_grad_points(a.points(), b.points(), params, axis)
}

pub(crate) fn ds_grad_points(
    a: &[Point2],
    b: &[Point2],
    params: &IoUParams,
    axis: SamplingAxis,
) -> Result<IoUGrad> {
    params.validate()?;
    let axes = axis.axes();
    let scale = 1.0 / axes.len() as f64;
    let mut value = 0.0;
    let mut grads = vec![Point2::default(); a.len()];
    for &ax in axes {
        let (v, g) = ds_grad_single_axis(a, b, params, ax)?;
        value += v;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.x += scale * gi.x;
            acc.y += scale * gi.y;
        }
    }
    Ok(IoUGrad {
        value: value * scale,
        d_value_d_nodes: grads,
    })
}

/// Discrete structure of a dense-sampling evaluation: run boundaries and the
/// edge each reference line crosses. Gradients are only meaningful while
/// this stays fixed under a perturbation.
pub(crate) fn ds_topology(
    a: &[Point2],
    b: &[Point2],
    params: &IoUParams,
    axis: SamplingAxis,
) -> Vec<usize> {
    let mut sig = Vec::new();
    for &ax in axis.axes() {
        let (origin, on_a, _) = grid_origin(a, b, ax);
        sig.push(on_a as usize);
        for line in [a, b] {
            let sampled = sample_line(line, ax, origin, params.d);
            sig.push(usize::MAX);
            for (seg, crossings) in sampled.segments.iter().zip(&sampled.crossings) {
                sig.push(seg.start_index);
                sig.push(seg.points.len());
                for (k, c) in crossings {
                    sig.push(*k);
                    sig.push(c.edge);
                    // crossings exactly at an edge end flip edges under perturbation
                    sig.push(usize::from(c.t == 0.0 || c.t == 1.0));
                }
            }
        }
    }
    sig
}
