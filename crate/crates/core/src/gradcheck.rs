//! Central finite-difference checks of the analytic gradients.
//!
//! The relative error of a group is `max_i |analytic_i - numeric_i|` divided
//! by the larger infinity norm of the two gradients (floored at
//! [`ABS_FLOOR`]). A component is skipped when the perturbation changes the
//! discrete structure of the evaluation (which edge a reference line
//! crosses, which texel cell a sample reads), since the function has a kink
//! there.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::geometry::{AnchorChain, CoordinateSpace, Point2, Polyline};
use crate::line_iou::{ds_grad_points, ds_points, ds_topology, p2p_grad_points, p2p_points, IoUParams, SamplingAxis};
use crate::losses::{loss_iou_grad, loss_reg, loss_reg_grad, LossWeights};
use crate::mrda::{mrda_gradcheck, random_fixture};

pub const ABS_FLOOR: f64 = 1e-6;

pub const P2P_TOLERANCE: f64 = 1e-5;
pub const DS_TOLERANCE: f64 = 1e-4;
pub const MRDA_TOLERANCE: f64 = 1e-5;
pub const LOSS_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GroupReport {
    fn empty(name: &str) -> Self {
        Self {
            name: name.to_string(),
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        }
    }

    fn absorb(&mut self, other: &GroupReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn group(&self, name: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

/// Checks `analytic` against central differences of `f` at `x`.
/// `structure` fingerprints the discrete state; components whose `±h`
/// perturbation changes it are skipped.
pub fn central_difference_check<S: PartialEq>(
    name: &str,
    x: &mut [f64],
    analytic: &[f64],
    h: f64,
    f: impl Fn(&[f64]) -> f64,
    structure: impl Fn(&[f64]) -> S,
) -> GroupReport {
    let mut report = GroupReport::empty(name);
    let base = structure(x);
    let mut numeric = vec![0.0; x.len()];
    let mut used = vec![false; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let (f_plus, s_plus) = (f(x), structure(x));
        x[i] = orig - h;
        let (f_minus, s_minus) = (f(x), structure(x));
        x[i] = orig;
        if s_plus != base || s_minus != base {
            report.skipped += 1;
            continue;
        }
        numeric[i] = (f_plus - f_minus) / (2.0 * h);
        used[i] = true;
        report.checked += 1;
    }
    report.max_rel_error = relative_error(analytic, &numeric, &used);
    report
}

fn relative_error(analytic: &[f64], numeric: &[f64], used: &[bool]) -> f64 {
    let mut max_diff: f64 = 0.0;
    let mut scale: f64 = ABS_FLOOR;
    for i in 0..analytic.len() {
        if !used[i] {
            continue;
        }
        max_diff = max_diff.max((analytic[i] - numeric[i]).abs());
        scale = scale.max(analytic[i].abs()).max(numeric[i].abs());
    }
    max_diff / scale
}

fn flatten(points: &[Point2]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y]).collect()
}

fn unflatten(flat: &[f64]) -> Vec<Point2> {
    flat.chunks(2).map(|c| Point2::new(c[0], c[1])).collect()
}

fn line_scale(points: &[Point2]) -> f64 {
    let (mut lo, mut hi) = (Point2::new(f64::MAX, f64::MAX), Point2::new(f64::MIN, f64::MIN));
    for p in points {
        lo = Point2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Point2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    (hi.x - lo.x).max(hi.y - lo.y).max(1.0)
}

/// Point-to-point IoU gradient with respect to the nodes of `a`.
pub fn p2p_gradcheck(a: &Polyline, b: &Polyline, params: &IoUParams) -> Result<GroupReport> {
    let analytic = flatten(&p2p_grad_points(a.points(), b.points(), params)?.d_value_d_nodes);
    let mut x = flatten(a.points());
    let h = 1e-5 * line_scale(a.points());
    Ok(central_difference_check(
        "p2p",
        &mut x,
        &analytic,
        h,
        |x| p2p_points(&unflatten(x), b.points(), params).expect("valid perturbation"),
        // the resampled edge index of each sample
        |x| {
            let pts = unflatten(x);
            crate::geometry::uniform_samples(&pts, params.n_pairs)
                .map(|s| s.iter().map(|e| e.edge).collect::<Vec<_>>())
                .unwrap_or_default()
        },
    ))
}

/// Dense-sampling IoU gradient with respect to the nodes of `a`. With
/// `skip_unstable = false` every component is compared, including those whose
/// perturbation changes the crossing structure.
pub fn ds_gradcheck(
    a: &Polyline,
    b: &Polyline,
    params: &IoUParams,
    axis: SamplingAxis,
    skip_unstable: bool,
) -> Result<GroupReport> {
    let analytic = flatten(&ds_grad_points(a.points(), b.points(), params, axis)?.d_value_d_nodes);
    let mut x = flatten(a.points());
    let h = 1e-5 * line_scale(a.points());
    Ok(central_difference_check(
        "ds",
        &mut x,
        &analytic,
        h,
        |x| ds_points(&unflatten(x), b.points(), params, axis).expect("valid perturbation"),
        |x| {
            if skip_unstable {
                ds_topology(&unflatten(x), b.points(), params, axis)
            } else {
                Vec::new()
            }
        },
    ))
}

/// Gradient of `b * loss_reg + c * loss_iou` with respect to a pixel-space
/// chain, holding the regression targets fixed.
pub fn loss_gradcheck(
    pred: &AnchorChain,
    targets: &[Point2],
    gt: &Polyline,
    params: &IoUParams,
    axis: SamplingAxis,
    weights: &LossWeights,
) -> Result<GroupReport> {
    let reg = loss_reg_grad(pred, targets)?;
    let (_, iou) = loss_iou_grad(pred, gt, params, axis)?;
    let analytic: Vec<f64> = reg
        .iter()
        .zip(&iou)
        .flat_map(|(r, i)| [weights.b * r.x + weights.c * i.x, weights.b * r.y + weights.c * i.y])
        .collect();
    let space = pred.space();
    let mut x = flatten(pred.nodes());
    let h = 1e-5 * line_scale(pred.nodes());
    let objective = |x: &[f64]| {
        let chain = AnchorChain::new_unchecked(unflatten(x), space);
        let reg = loss_reg(&chain, targets).expect("matching lengths");
        let (iou, _) = loss_iou_grad(&chain, gt, params, axis).expect("valid perturbation");
        weights.b * reg + weights.c * iou
    };
    Ok(central_difference_check(
        "loss",
        &mut x,
        &analytic,
        h,
        objective,
        |x| {
            let pts = unflatten(x);
            let signs: Vec<bool> = pts
                .iter()
                .zip(targets)
                .flat_map(|(p, t)| [p.x > t.x, p.y > t.y])
                .collect();
            (signs, ds_topology(&pts, gt.points(), params, axis))
        },
    ))
}

/// Random smooth lane running roughly top to bottom of a 1640x590 canvas.
pub fn random_smooth_lane(rng: &mut impl Rng, nodes: usize) -> Vec<Point2> {
    let x0 = rng.gen_range(300.0..1300.0);
    let slope = rng.gen_range(-1.2..1.2);
    let bend = rng.gen_range(-0.002..0.002);
    let y_top = rng.gen_range(200.0..300.0);
    let y_bottom = rng.gen_range(520.0..590.0);
    (0..nodes)
        .map(|i| {
            let t = i as f64 / (nodes - 1) as f64;
            let jitter = if i == 0 || i + 1 == nodes { 0.0 } else { rng.gen_range(-0.3..0.3) };
            let y = y_bottom + (y_top - y_bottom) * (t + jitter / nodes as f64);
            let dy = y - y_bottom;
            Point2::new(x0 + slope * dy + bend * dy * dy, y)
        })
        .collect()
}

/// Copy of `base` displaced by a smooth random field plus small noise.
pub fn perturbed_lane(rng: &mut impl Rng, base: &[Point2], nodes: usize) -> Vec<Point2> {
    let line = Polyline::new(base.to_vec(), 1640, 590).expect("valid base lane");
    let resampled = crate::geometry::resample_uniform(&line, nodes).expect("valid base lane");
    let shift = Point2::new(rng.gen_range(-12.0..12.0), rng.gen_range(-10.0..10.0));
    let tilt = rng.gen_range(-0.05..0.05);
    resampled
        .points()
        .iter()
        .map(|p| {
            Point2::new(
                p.x + shift.x + tilt * (p.y - 400.0) + rng.gen_range(-2.0..2.0),
                p.y + shift.y + rng.gen_range(-2.0..2.0),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteConfig {
    pub seed: u64,
    pub fixtures: usize,
    pub p2p_nodes: usize,
    pub ds_nodes: usize,
    pub params: IoUParams,
    pub mrda_height: usize,
    pub mrda_width: usize,
    pub mrda_channels: usize,
    pub mrda_nodes: usize,
    pub mrda_heads: usize,
    pub mrda_points: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0x1a7e_c4a1,
            fixtures: 100,
            p2p_nodes: 8,
            ds_nodes: 12,
            params: IoUParams::default(),
            mrda_height: 8,
            mrda_width: 8,
            mrda_channels: 4,
            mrda_nodes: 6,
            mrda_heads: 2,
            mrda_points: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteGroup {
    pub report: GroupReport,
    pub tolerance: f64,
    pub fixtures: usize,
}

impl SuiteGroup {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance && self.report.checked > 0
    }
}

/// Runs every gradient group over `config.fixtures` seeded random fixtures.
pub fn run_suite(config: &SuiteConfig) -> Result<Vec<SuiteGroup>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut p2p = GroupReport::empty("p2p");
    let mut ds = GroupReport::empty("ds");
    let mut loss = GroupReport::empty("loss");
    let mut nodes = GroupReport::empty("mrda_nodes");
    let mut offsets = GroupReport::empty("mrda_offsets");
    let mut logits = GroupReport::empty("mrda_logits");
    let params = config.params;
    for _ in 0..config.fixtures {
        let a = random_smooth_lane(&mut rng, config.p2p_nodes);
        let b = perturbed_lane(&mut rng, &a, config.p2p_nodes);
        let (a, b) = (Polyline::new(a, 1640, 590)?, Polyline::new(b, 1640, 590)?);
        p2p.absorb(&p2p_gradcheck(&a, &b, &params)?);

        let a = random_smooth_lane(&mut rng, config.ds_nodes);
        let b = perturbed_lane(&mut rng, &a, config.ds_nodes);
        let (a, b) = (Polyline::new(a, 1640, 590)?, Polyline::new(b, 1640, 590)?);
        ds.absorb(&ds_gradcheck(&a, &b, &params, SamplingAxis::Vertical, true)?);

        let chain = AnchorChain::new_unchecked(a.points().to_vec(), CoordinateSpace::Pixel);
        let targets: Vec<Point2> = chain
            .nodes()
            .iter()
            .map(|p| Point2::new(p.x + rng.gen_range(-5.0..5.0), p.y + rng.gen_range(-5.0..5.0)))
            .collect();
        loss.absorb(&loss_gradcheck(
            &chain,
            &targets,
            &b,
            &params,
            SamplingAxis::Vertical,
            &LossWeights::default(),
        )?);

        let (query, map, mrda_params) = random_fixture(
            &mut rng,
            config.mrda_height,
            config.mrda_width,
            config.mrda_channels,
            config.mrda_nodes,
            config.mrda_heads,
            config.mrda_points,
        );
        let report = mrda_gradcheck(&query, &map, &mrda_params)?;
        for (acc, g) in [&mut nodes, &mut offsets, &mut logits].into_iter().zip(&report.groups) {
            acc.absorb(g);
        }
    }
    let group = |report: GroupReport, tolerance: f64| SuiteGroup {
        report,
        tolerance,
        fixtures: config.fixtures,
    };
    Ok(vec![
        group(p2p, P2P_TOLERANCE),
        group(ds, DS_TOLERANCE),
        group(loss, LOSS_TOLERANCE),
        group(nodes, MRDA_TOLERANCE),
        group(offsets, MRDA_TOLERANCE),
        group(logits, MRDA_TOLERANCE),
    ])
}

/// Dense-sampling check on fixtures built with a node exactly on a
/// reference line, comparing every component. Expected to exceed the
/// tolerance: the crossing set changes inside the difference stencil.
pub fn run_topology_demo(config: &SuiteConfig) -> Result<SuiteGroup> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7090);
    let mut report = GroupReport::empty("ds_topology_demo");
    let params = config.params;
    for _ in 0..config.fixtures.max(1) {
        let mut a = random_smooth_lane(&mut rng, config.ds_nodes);
        let b = perturbed_lane(&mut rng, &a, config.ds_nodes);
        let origin = a
            .iter()
            .chain(&b)
            .map(|p| p.y)
            .fold(f64::INFINITY, f64::min);
        // snap an interior node onto a reference line
        let mid = a.len() / 2;
        let k = ((a[mid].y - origin) / params.d).round();
        a[mid].y = origin + k * params.d;
        let (a, b) = (Polyline::new(a, 1640, 590)?, Polyline::new(b, 1640, 590)?);
        let mut g = ds_gradcheck(&a, &b, &params, SamplingAxis::Vertical, false)?;
        g.name = report.name.clone();
        report.absorb(&g);
    }
    Ok(SuiteGroup {
        report,
        tolerance: DS_TOLERANCE,
        fixtures: config.fixtures.max(1),
    })
}

/// Fixed-format text rendering, stable across runs for a given seed.
pub fn format_suite(groups: &[SuiteGroup]) -> String {
    let mut out = String::new();
    for g in groups {
        let _ = writeln!(
            out,
            "{:<18} worst_rel_err={:.3e} tol={:.0e} checked={} skipped={} fixtures={} {}",
            g.report.name,
            g.report.max_rel_error,
            g.tolerance,
            g.report.checked,
            g.report.skipped,
            g.fixtures,
            if g.passed() { "PASS" } else { "FAIL" }
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_check_is_exact() {
        let mut x = vec![1.0, -2.0, 0.5];
        let analytic = vec![2.0, -4.0, 1.0];
        let r = central_difference_check("q", &mut x, &analytic, 1e-4, |x| x.iter().map(|v| v * v).sum(), |_| 0);
        assert!(r.max_rel_error < 1e-9);
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut x = vec![1.0, 2.0];
        let r = central_difference_check("q", &mut x, &[2.0, 0.0], 1e-4, |x| x[0] * x[0] + x[1] * x[1], |_| 0);
        assert!(r.max_rel_error > 0.5);
    }

    #[test]
    fn small_suite_passes() {
        let config = SuiteConfig { fixtures: 5, ..SuiteConfig::default() };
        for g in run_suite(&config).unwrap() {
            assert!(g.passed(), "{g:?}");
        }
    }

    #[test]
    fn suite_is_deterministic() {
        let config = SuiteConfig { fixtures: 3, ..SuiteConfig::default() };
        let a = format_suite(&run_suite(&config).unwrap());
        let b = format_suite(&run_suite(&config).unwrap());
        assert_eq!(a, b);
    }
}
