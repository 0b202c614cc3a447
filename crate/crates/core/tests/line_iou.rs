use lanechain::geometry::{split_monotone, Axis, Point2, Polyline};
use lanechain::line_iou::{liou_ds, liou_p2p, IoUParams, SamplingAxis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lane(coords: &[(f64, f64)]) -> Polyline {
    Polyline::from_xy(coords, 1640, 590).unwrap()
}

/// x of a y-monotone polyline at row `y`, if the row crosses it.
fn x_at(points: &[Point2], y: f64) -> Option<f64> {
    points.windows(2).find_map(|s| {
        let (lo, hi) = (s[0].y.min(s[1].y), s[0].y.max(s[1].y));
        (lo <= y && y <= hi && hi > lo).then(|| s[0].x + (y - s[0].y) / (s[1].y - s[0].y) * (s[1].x - s[0].x))
    })
}

/// Row-by-row dense-sampling IoU for two lanes that are monotone in y.
fn ds_oracle(a: &Polyline, b: &Polyline, r: f64, d: f64) -> f64 {
    let ys = a.points().iter().chain(b.points()).map(|p| p.y);
    let lo = ys.clone().fold(f64::INFINITY, f64::min);
    let hi = ys.fold(f64::NEG_INFINITY, f64::max);
    let (mut inter, mut union) = (0.0, 0.0);
    let mut k = 0;
    while lo + k as f64 * d <= hi {
        let y = lo + k as f64 * d;
        match (x_at(a.points(), y), x_at(b.points(), y)) {
            (Some(xa), Some(xb)) => {
                inter += 2.0 * r - (xa - xb).abs();
                union += 2.0 * r + (xa - xb).abs();
            }
            (Some(_), None) | (None, Some(_)) => union += 2.0 * r,
            (None, None) => {}
        }
        k += 1;
    }
    inter / union
}

fn random_monotone_lane(rng: &mut ChaCha8Rng) -> Polyline {
    let n = rng.gen_range(2..8);
    let y0 = rng.gen_range(400.0..589.0);
    let mut ys: Vec<f64> = (0..n).map(|_| rng.gen_range(150.0..y0)).collect();
    ys.push(y0);
    ys.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ys.dedup();
    let x0 = rng.gen_range(400.0..1200.0);
    let pts: Vec<(f64, f64)> = ys.iter().map(|&y| (x0 + rng.gen_range(-40.0..40.0), y)).collect();
    lane(&pts)
}

#[test]
fn ds_matches_row_by_row_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..300 {
        let a = random_monotone_lane(&mut rng);
        let b = random_monotone_lane(&mut rng);
        let d = [1.0, 3.0, 8.0][rng.gen_range(0..3)];
        let p = IoUParams { d, ..IoUParams::default() };
        let v = liou_ds(&a, &b, &p, SamplingAxis::Vertical).unwrap();
        assert!((v - ds_oracle(&a, &b, p.r, d)).abs() < 1e-9, "{v} vs oracle");
    }
}

#[test]
fn halving_the_row_spacing_barely_moves_smooth_lanes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let x0 = rng.gen_range(300.0..1300.0);
        let bend = rng.gen_range(-0.002..0.002);
        let (shift, extra_bend) = (rng.gen_range(-6.0..6.0), rng.gen_range(-0.0001..0.0001));
        let curve = |x0: f64, bend: f64| -> Polyline {
            let pts: Vec<(f64, f64)> = (0..20)
                .map(|i| {
                    let y = 589.0 - 15.0 * i as f64;
                    (x0 + bend * (589.0 - y).powi(2), y)
                })
                .collect();
            lane(&pts)
        };
        let a = curve(x0, bend);
        let b = curve(x0 + shift, bend + extra_bend);
        let coarse = liou_ds(&a, &b, &IoUParams { d: 8.0, ..IoUParams::default() }, SamplingAxis::Vertical).unwrap();
        let fine = liou_ds(&a, &b, &IoUParams { d: 4.0, ..IoUParams::default() }, SamplingAxis::Vertical).unwrap();
        assert!((coarse - fine).abs() / fine.abs() < 0.02, "{coarse} vs {fine}");
    }
}

#[test]
fn u_turns_split_in_two_along_their_axis() {
    let vertical = lane(&[(300.0, 500.0), (350.0, 200.0), (400.0, 500.0)]);
    assert_eq!(split_monotone(&vertical, Axis::Vertical).len(), 2);
    let horizontal = lane(&[(100.0, 100.0), (400.0, 150.0), (100.0, 200.0)]);
    assert_eq!(split_monotone(&horizontal, Axis::Horizontal).len(), 2);
    assert_eq!(split_monotone(&horizontal, Axis::Vertical).len(), 1);
    let v = liou_ds(&horizontal, &horizontal, &IoUParams::default(), SamplingAxis::Horizontal).unwrap();
    assert_eq!(v, 1.0);
}

#[test]
fn p2p_tends_to_minus_one_with_distance() {
    let a = lane(&[(0.0, 0.0), (0.0, 500.0)]);
    let p = IoUParams::default();
    let mut prev = 1.0;
    for delta in [0.0, 4.0, 16.0, 64.0, 256.0, 310.0, 1000.0] {
        let v = liou_p2p(&a, &a.translated(delta, 0.0), &p).unwrap();
        assert!(v <= prev);
        prev = v;
        if delta > 38.0 * p.r {
            assert!(v < -0.9);
        }
    }
    assert!((liou_p2p(&a, &a.translated(4.0, 0.0), &p).unwrap() - 0.6).abs() < 1e-9);
}

#[test]
fn ds_is_translation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let a = random_monotone_lane(&mut rng);
        let b = random_monotone_lane(&mut rng);
        let p = IoUParams::default();
        let (dx, dy) = (rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0));
        let v = liou_ds(&a, &b, &p, SamplingAxis::Both).unwrap();
        let w = liou_ds(&a.translated(dx, dy), &b.translated(dx, dy), &p, SamplingAxis::Both).unwrap();
        assert!((v - w).abs() < 1e-9, "{v} vs {w}");
    }
}
