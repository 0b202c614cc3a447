#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use lanechain::dataio::{write_predictions, PredictedLane};
use lanechain::geometry::Polyline;
use lanechain_cli::{run_args, Outcome};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Scene = (Vec<Polyline>, Vec<Polyline>);

pub fn lane(coords: &[(f64, f64)]) -> Polyline {
    Polyline::from_xy(coords, 1640, 590).unwrap()
}

pub fn run(args: &[&str]) -> Outcome {
    run_args(std::iter::once("lanechain").chain(args.iter().copied()))
}

/// Prediction running parallel to its lane about half a stroke width away,
/// mask IoU about 0.35.
pub fn parallel_offset_pair() -> (Polyline, Polyline) {
    let gt = lane(&[(600.0, 589.0), (760.0, 300.0)]);
    (gt.clone(), gt.translated(16.5, 0.0))
}

/// Prediction that follows the lower part of its lane and then turns away.
pub fn wrong_trend_pair() -> (Polyline, Polyline) {
    let gt = lane(&[(800.0, 589.0), (800.0, 250.0)]);
    let pred = lane(&[(800.0, 589.0), (800.0, 330.0), (900.0, 300.0)]);
    (gt, pred)
}

/// Up to four lanes spaced far apart, each predicted with a small shift or
/// missed, plus an occasional stray prediction.
pub fn separated_scene(rng: &mut ChaCha8Rng) -> Scene {
    let gts: Vec<Polyline> = (0..rng.gen_range(1..=4))
        .map(|i| {
            let x = 250.0 + 380.0 * i as f64;
            lane(&[(x, 589.0), (x + rng.gen_range(-60.0..60.0), 280.0)])
        })
        .collect();
    let mut preds = Vec::new();
    for g in &gts {
        if rng.gen_bool(0.85) {
            preds.push(g.translated(rng.gen_range(-25.0..25.0), 0.0));
        }
    }
    if rng.gen_bool(0.3) {
        preds.push(lane(&[(1550.0, 589.0), (1500.0, 300.0)]));
    }
    (preds, gts)
}

pub struct DatasetDirs {
    pub list: PathBuf,
    pub preds: PathBuf,
}

impl DatasetDirs {
    pub fn list(&self) -> &str {
        self.list.to_str().unwrap()
    }

    pub fn preds(&self) -> &str {
        self.preds.to_str().unwrap()
    }
}

fn lines_file(lanes: &[Polyline]) -> String {
    lanes
        .iter()
        .map(|l| {
            let coords: Vec<String> = l.points().iter().flat_map(|p| [p.x.to_string(), p.y.to_string()]).collect();
            coords.join(" ") + "\n"
        })
        .collect()
}

/// Writes a CULane-layout dataset: `gt/list/test.txt`, `gt/img/NNNNN.lines.txt`
/// and `pred/img/NNNNN.lines.txt`.
pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> DatasetDirs {
    let gt = dir.join("gt");
    let pred = dir.join("pred");
    fs::create_dir_all(gt.join("list")).unwrap();
    fs::create_dir_all(gt.join("img")).unwrap();
    fs::create_dir_all(pred.join("img")).unwrap();
    let mut list = String::new();
    for (i, (preds, gts)) in scenes.iter().enumerate() {
        let id = format!("img/{i:05}");
        list.push_str(&format!("/{id}.jpg\n"));
        fs::write(gt.join(format!("{id}.lines.txt")), lines_file(gts)).unwrap();
        let predicted: Vec<PredictedLane> =
            preds.iter().map(|l| PredictedLane { lane: l.clone(), confidence: 1.0 }).collect();
        fs::write(pred.join(format!("{id}.lines.txt")), write_predictions(&predicted)).unwrap();
    }
    let list_path = gt.join("list/test.txt");
    fs::write(&list_path, list).unwrap();
    DatasetDirs { list: list_path, preds: pred }
}

pub fn write_lane_file(path: &Path, lane: &Polyline) {
    fs::write(path, lines_file(std::slice::from_ref(lane))).unwrap();
}
