//! Annotation and prediction file formats, dataset listing and report output.
//!
//! Prediction files use the CULane `.lines.txt` layout with an optional
//! confidence after a `#` on each line:
//!
//! ```text
//! 512.5 589 530 560 551.25 530 # 0.93
//! ```
//!
//! Lines without `#` have confidence 1. Coordinates are written with Rust's
//! shortest round-trip float formatting, so write-then-parse is exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::geometry::{Point2, Polyline};
use crate::metrics::{prf, EvalConfig, MetricsReport, SweepCell, SweepReport};

/// Lanes parsed from one file plus the number of lanes dropped for having
/// fewer than two distinct points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedLanes {
    pub lanes: Vec<Polyline>,
    pub warnings: usize,
}

fn parse_coords(body: &str, line_no: usize) -> Result<Vec<Point2>> {
    let values = body
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line: line_no,
                    message: format!("invalid coordinate {tok:?}"),
                })
        })
        .collect::<Result<Vec<f64>>>()?;
    if values.len() % 2 != 0 {
        return Err(Error::Parse {
            line: line_no,
            message: format!("odd number of coordinates ({})", values.len()),
        });
    }
    Ok(values.chunks(2).map(|c| Point2::new(c[0], c[1])).collect())
}

/// Parses a CULane `.lines.txt` annotation: one lane per line, alternating
/// x y values.
pub fn parse_culane_lines(text: &str, width: u32, height: u32) -> Result<ParsedLanes> {
    let mut out = ParsedLanes::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let points = parse_coords(line, i + 1)?;
        match Polyline::new(points, width, height) {
            Ok(lane) => out.lanes.push(lane),
            Err(_) => out.warnings += 1,
        }
    }
    Ok(out)
}

fn schema(path: String, message: &str) -> Error {
    Error::Schema {
        path,
        message: message.to_string(),
    }
}

fn json_coord(v: Option<&Value>, path: String) -> Result<f64> {
    let parsed = match v {
        Some(Value::String(s)) => s.trim().parse::<f64>().ok(),
        Some(Value::Number(n)) => n.as_f64(),
        None => return Err(schema(path, "missing")),
        Some(_) => None,
    };
    parsed
        .filter(|v| v.is_finite())
        .ok_or_else(|| schema(path, "expected a numeric string or number"))
}

/// Parses a CurveLanes annotation: `{"Lines": [[{"x": "..", "y": ".."}, ..], ..]}`.
/// Coordinates may be strings or numbers; points off the canvas are kept.
pub fn parse_curvelanes_json(text: &str, width: u32, height: u32) -> Result<ParsedLanes> {
    let root: Value = serde_json::from_str(text)?;
    let lines = root
        .get("Lines")
        .ok_or_else(|| schema("Lines".into(), "missing"))?
        .as_array()
        .ok_or_else(|| schema("Lines".into(), "expected an array"))?;
    let mut out = ParsedLanes::default();
    for (i, lane) in lines.iter().enumerate() {
        let pts = lane
            .as_array()
            .ok_or_else(|| schema(format!("Lines[{i}]"), "expected an array"))?;
        let mut points = Vec::with_capacity(pts.len());
        for (j, p) in pts.iter().enumerate() {
            if !p.is_object() {
                return Err(schema(format!("Lines[{i}][{j}]"), "expected an object"));
            }
            let x = json_coord(p.get("x"), format!("Lines[{i}][{j}].x"))?;
            let y = json_coord(p.get("y"), format!("Lines[{i}][{j}].y"))?;
            points.push(Point2::new(x, y));
        }
        match Polyline::new(points, width, height) {
            Ok(lane) => out.lanes.push(lane),
            Err(_) => out.warnings += 1,
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedLane {
    pub lane: Polyline,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedPredictions {
    pub lanes: Vec<PredictedLane>,
    pub warnings: usize,
}

pub fn parse_predictions(text: &str, width: u32, height: u32) -> Result<ParsedPredictions> {
    let mut out = ParsedPredictions::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (body, confidence) = match line.split_once('#') {
            None => (line, 1.0),
            Some((body, conf)) => {
                let c = conf.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: i + 1,
                    message: format!("invalid confidence {:?}", conf.trim()),
                })?;
                if !(0.0..=1.0).contains(&c) {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("confidence {c} outside [0, 1]"),
                    });
                }
                (body, c)
            }
        };
        let points = parse_coords(body, i + 1)?;
        match Polyline::new(points, width, height) {
            Ok(lane) => out.lanes.push(PredictedLane { lane, confidence }),
            Err(_) => out.warnings += 1,
        }
    }
    Ok(out)
}

pub fn write_predictions(lanes: &[PredictedLane]) -> String {
    let mut out = String::new();
    for l in lanes {
        let coords: Vec<String> = l
            .lane
            .points()
            .iter()
            .flat_map(|p| [p.x.to_string(), p.y.to_string()])
            .collect();
        let _ = writeln!(out, "{} # {}", coords.join(" "), l.confidence);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Culane,
    Curvelanes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    /// Image path relative to the dataset root.
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub lanes: Vec<Polyline>,
    pub tags: Vec<String>,
}

fn strip_extension(id: &str) -> &str {
    match id.rfind('.') {
        Some(dot) if !id[dot..].contains('/') => &id[..dot],
        _ => id,
    }
}

/// Annotation file of an image for the given dataset layout.
pub fn annotation_path(root: &Path, image_id: &str, format: DatasetFormat) -> PathBuf {
    let stem = strip_extension(image_id);
    match format {
        DatasetFormat::Culane => root.join(format!("{stem}.lines.txt")),
        DatasetFormat::Curvelanes => {
            let stem = match stem.rsplit_once("images/") {
                Some((head, tail)) => format!("{head}labels/{tail}"),
                None => stem.to_string(),
            };
            root.join(format!("{stem}.lines.json"))
        }
    }
}

/// Prediction file of an image inside a prediction directory.
pub fn prediction_path(pred_dir: &Path, image_id: &str) -> PathBuf {
    pred_dir.join(format!("{}.lines.txt", strip_extension(image_id)))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads the predictions of one image. A missing file yields no lanes and
/// `missing = true`.
pub fn load_predictions(pred_dir: &Path, image_id: &str, width: u32, height: u32) -> Result<(ParsedPredictions, bool)> {
    let path = prediction_path(pred_dir, image_id);
    if !path.exists() {
        return Ok((ParsedPredictions::default(), true));
    }
    Ok((parse_predictions(&read(&path)?, width, height)?, false))
}

/// Lazily loaded dataset. Each `next` reads and parses one annotation file.
#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    format: DatasetFormat,
    width: u32,
    height: u32,
    tags: Vec<String>,
    ids: std::vec::IntoIter<String>,
    warnings: usize,
}

impl Dataset {
    /// Warnings so far: missing annotation files and dropped lanes.
    pub fn warnings(&self) -> usize {
        self.warnings
    }

    pub fn len_hint(&self) -> usize {
        self.ids.len()
    }
}

impl Iterator for Dataset {
    type Item = Result<ImageRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let image_id = self.ids.next()?;
        let path = annotation_path(&self.root, &image_id, self.format);
        let lanes = if path.exists() {
            let parsed = read(&path).and_then(|text| match self.format {
                DatasetFormat::Culane => parse_culane_lines(&text, self.width, self.height),
                DatasetFormat::Curvelanes => parse_curvelanes_json(&text, self.width, self.height),
            });
            match parsed {
                Ok(p) => {
                    self.warnings += p.warnings;
                    p.lanes
                }
                Err(e) => return Some(Err(e)),
            }
        } else {
            log::warn!("no annotation for {image_id} at {}", path.display());
            self.warnings += 1;
            Vec::new()
        };
        Some(Ok(ImageRecord {
            image_id,
            width: self.width,
            height: self.height,
            lanes,
            tags: self.tags.clone(),
        }))
    }
}

/// Opens a dataset. With a list file, images follow its order (first
/// whitespace token per line) and are tagged with the list file's stem.
/// Without one, `root` is walked for annotation files in sorted order.
pub fn load_dataset(
    list_file: Option<&Path>,
    root: &Path,
    format: DatasetFormat,
    width: u32,
    height: u32,
) -> Result<Dataset> {
    let (ids, tags) = match list_file {
        Some(list) => {
            let ids = read(list)?
                .lines()
                .filter_map(|l| l.split_whitespace().next())
                .map(|id| id.trim_start_matches('/').to_string())
                .collect();
            let tag = list
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .into_iter()
                .collect();
            (ids, tag)
        }
        None => (walk_annotations(root, format)?, Vec::new()),
    };
    Ok(Dataset {
        root: root.to_path_buf(),
        format,
        width,
        height,
        tags,
        ids: Vec::into_iter(ids),
        warnings: 0,
    })
}

fn walk_annotations(root: &Path, format: DatasetFormat) -> Result<Vec<String>> {
    let suffix = match format {
        DatasetFormat::Culane => ".lines.txt",
        DatasetFormat::Curvelanes => ".lines.json",
    };
    let mut ids = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Io {
            path: e.path().unwrap_or(root).display().to_string(),
            source: e.into_io_error().unwrap_or_else(|| std::io::Error::other("directory loop")),
        })?;
        let rel = match entry.path().strip_prefix(root) {
            Ok(rel) => rel.to_string_lossy().replace('\\', "/"),
            Err(_) => continue,
        };
        let Some(stem) = rel.strip_suffix(suffix) else {
            continue;
        };
        let stem = match format {
            DatasetFormat::Culane => stem.to_string(),
            DatasetFormat::Curvelanes => match stem.rsplit_once("labels/") {
                Some((head, tail)) => format!("{head}images/{tail}"),
                None => stem.to_string(),
            },
        };
        ids.push(format!("{stem}.jpg"));
    }
    Ok(ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Rounds to 6 significant digits.
pub fn round_sig6(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.5e}").parse().expect("formatted float parses")
}

fn num(v: f64) -> Value {
    if v.is_infinite() {
        Value::String(if v > 0.0 { "inf" } else { "-inf" }.into())
    } else {
        serde_json::Number::from_f64(round_sig6(v)).map_or(Value::Null, Value::Number)
    }
}

fn opt_num(v: Option<f64>) -> Value {
    v.map_or(Value::Null, num)
}

fn csv_num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        round_sig6(v).to_string()
    }
}

fn counts(tp: usize, fp: usize, fn_: usize) -> Map<String, Value> {
    let (precision, recall, f1) = prf(tp, fp, fn_);
    let mut m = Map::new();
    m.insert("tp".into(), json!(tp));
    m.insert("fp".into(), json!(fp));
    m.insert("fn".into(), json!(fn_));
    m.insert("precision".into(), num(precision));
    m.insert("recall".into(), num(recall));
    m.insert("f1".into(), num(f1));
    m
}

/// Per-tag counts, for scene-category breakdowns.
pub fn tag_breakdown(metrics: &MetricsReport) -> BTreeMap<String, (usize, usize, usize)> {
    let mut by_tag: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for img in &metrics.per_image {
        for tag in &img.tags {
            let e = by_tag.entry(tag.clone()).or_default();
            e.0 += img.tp;
            e.1 += img.fp;
            e.2 += img.fn_;
        }
    }
    by_tag
}

fn cell_json(c: &SweepCell) -> Value {
    json!({
        "alpha": num(c.alpha),
        "beta": num(c.beta),
        "f1": num(c.f1),
        "precision": num(c.precision),
        "recall": num(c.recall),
    })
}

/// Serializes an evaluation (and optional sweep) as JSON or long-form CSV.
/// JSON keys are sorted; reals carry 6 significant digits; MIoU/MDis are
/// `null` when undefined and an infinite beta is the string `"inf"`. CSV has
/// the header `alpha,beta,f1,precision,recall` and one row per sweep cell,
/// or a single row for the evaluation thresholds when there is no sweep.
pub fn emit_report(
    cfg: &EvalConfig,
    metrics: &MetricsReport,
    sweep: Option<&SweepReport>,
    format: ReportFormat,
) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Json => {
            let mut summary = counts(metrics.tp, metrics.fp, metrics.fn_);
            summary.insert("miou".into(), opt_num(metrics.miou));
            summary.insert("mdis".into(), opt_num(metrics.mdis));
            let per_image: Vec<Value> = metrics
                .per_image
                .iter()
                .map(|img| {
                    json!({
                        "image_id": img.image_id,
                        "tp": img.tp,
                        "fp": img.fp,
                        "fn": img.fn_,
                    })
                })
                .collect();
            let tags: Map<String, Value> = tag_breakdown(metrics)
                .into_iter()
                .map(|(tag, (tp, fp, fn_))| (tag, Value::Object(counts(tp, fp, fn_))))
                .collect();
            let mut doc = json!({
                "config": {
                    "image_width": cfg.image_width,
                    "image_height": cfg.image_height,
                    "stroke_width": num(cfg.stroke_width),
                    "alpha": num(cfg.alpha),
                    "beta": num(cfg.beta),
                },
                "metrics": summary,
                "tags": tags,
                "per_image": per_image,
            });
            if let Some(s) = sweep {
                doc["sweep"] = json!({
                    "af1": num(s.af1),
                    "ap": num(s.ap),
                    "ar": num(s.ar),
                    "cells": s.cells.iter().map(cell_json).collect::<Vec<_>>(),
                });
            }
            let mut bytes = serde_json::to_vec_pretty(&doc)?;
            bytes.push(b'\n');
            Ok(bytes)
        }
        ReportFormat::Csv => {
            let rows: Vec<(f64, f64, f64, f64, f64)> = match sweep {
                Some(s) => s
                    .cells
                    .iter()
                    .map(|c| (c.alpha, c.beta, c.f1, c.precision, c.recall))
                    .collect(),
                None => vec![(cfg.alpha, cfg.beta, metrics.f1, metrics.precision, metrics.recall)],
            };
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["alpha", "beta", "f1", "precision", "recall"])?;
            for (a, b, f, p, r) in rows {
                w.write_record([a, b, f, p, r].map(csv_num))?;
            }
            w.into_inner().map_err(|e| Error::Io {
                path: "<csv buffer>".into(),
                source: e.into_error(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{aggregate, sweep_scores, ImageEval, MatchedPair, PairScore, ScoreMatrix};
    use proptest::prelude::*;

    #[test]
    fn culane_examples() {
        let p = parse_culane_lines("0 10 5 20 10 30\n", 1640, 590).unwrap();
        assert_eq!(p.lanes.len(), 1);
        assert_eq!(
            p.lanes[0].points(),
            &[Point2::new(0.0, 10.0), Point2::new(5.0, 20.0), Point2::new(10.0, 30.0)]
        );
        assert_eq!(parse_culane_lines("", 1640, 590).unwrap().lanes.len(), 0);
        let p = parse_culane_lines("1 2\n3 4 5 6\n", 1640, 590).unwrap();
        assert_eq!((p.lanes.len(), p.warnings), (1, 1));
        let p = parse_culane_lines("1 1 1 1 \n", 1640, 590).unwrap();
        assert_eq!((p.lanes.len(), p.warnings), (0, 1));
    }

    #[test]
    fn culane_errors_carry_line_numbers() {
        match parse_culane_lines("1 2 3 4\n1 2 3\n", 1640, 590) {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_culane_lines("\n\n1 2 x 4\n", 1640, 590) {
            Err(Error::Parse { line: 3, message }) => assert!(message.contains("\"x\"")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn curvelanes_examples() {
        let p = parse_curvelanes_json(r#"{"Lines":[[{"x":"1.0","y":"2.0"},{"x":"3.0","y":"4.0"}]]}"#, 2560, 1440)
            .unwrap();
        assert_eq!(p.lanes.len(), 1);
        assert_eq!(p.lanes[0].points(), &[Point2::new(1.0, 2.0), Point2::new(3.0, 4.0)]);
        assert!(parse_curvelanes_json(r#"{"Lines":[]}"#, 2560, 1440).unwrap().lanes.is_empty());
        let off = parse_curvelanes_json(r#"{"Lines":[[{"x":"-50","y":"2"},{"x":3000,"y":"4"}]]}"#, 2560, 1440)
            .unwrap();
        assert_eq!(off.lanes[0].points()[1], Point2::new(3000.0, 4.0));
    }

    #[test]
    fn curvelanes_schema_errors_name_the_path() {
        let cases = [
            (r#"{"lines":[]}"#, "Lines"),
            (r#"{"Lines":{}}"#, "Lines"),
            (r#"{"Lines":[[{"x":"1","y":"2"}],[{"x":"1"}]]}"#, "Lines[1][0].y"),
            (r#"{"Lines":[[{"x":"one","y":"2"}]]}"#, "Lines[0][0].x"),
            (r#"{"Lines":[[3]]}"#, "Lines[0][0]"),
        ];
        for (text, expected) in cases {
            match parse_curvelanes_json(text, 2560, 1440) {
                Err(Error::Schema { path, .. }) => assert_eq!(path, expected),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(matches!(parse_curvelanes_json("{", 1, 1), Err(Error::Json(_))));
    }

    fn lane_strategy() -> impl Strategy<Value = PredictedLane> {
        (
            prop::collection::vec((-100.0f64..2000.0, -100.0f64..800.0), 2..30),
            0.0f64..=1.0,
        )
            .prop_filter_map("degenerate", |(pts, confidence)| {
                Polyline::from_xy(&pts, 1640, 590)
                    .ok()
                    .map(|lane| PredictedLane { lane, confidence })
            })
    }

    proptest! {
        #[test]
        fn predictions_round_trip(lanes in prop::collection::vec(lane_strategy(), 0..6)) {
            let text = write_predictions(&lanes);
            let back = parse_predictions(&text, 1640, 590).unwrap();
            prop_assert_eq!(back.warnings, 0);
            prop_assert_eq!(&back.lanes, &lanes);
            prop_assert_eq!(write_predictions(&back.lanes), text);
        }
    }

    #[test]
    fn predictions_without_confidence_default_to_one() {
        let p = parse_predictions("1 2 3 4\n5 6 7 8 # 0.25\n", 1640, 590).unwrap();
        assert_eq!(p.lanes[0].confidence, 1.0);
        assert_eq!(p.lanes[1].confidence, 0.25);
        assert!(parse_predictions("1 2 3 4 # 1.5\n", 1640, 590).is_err());
        assert!(parse_predictions("1 2 3 4 # high\n", 1640, 590).is_err());
    }

    #[test]
    fn annotation_paths() {
        let root = Path::new("/data");
        assert_eq!(
            annotation_path(root, "driver_23/05.MP4/00030.jpg", DatasetFormat::Culane),
            PathBuf::from("/data/driver_23/05.MP4/00030.lines.txt")
        );
        assert_eq!(
            annotation_path(root, "valid/images/abc.jpg", DatasetFormat::Curvelanes),
            PathBuf::from("/data/valid/labels/abc.lines.json")
        );
    }

    fn write(path: &Path, text: &str) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, text).unwrap();
    }

    #[test]
    fn dataset_follows_list_order_and_counts_missing() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        write(&root.join("a/2.lines.txt"), "0 0 10 10\n");
        write(&root.join("a/1.lines.txt"), "0 0 10 10\n5 5 9 9\n");
        write(&root.join("list/test_night.txt"), "/a/2.jpg\n/a/3.jpg 1 1\na/1.jpg\n");
        let mut ds = load_dataset(Some(&root.join("list/test_night.txt")), root, DatasetFormat::Culane, 1640, 590)
            .unwrap();
        let records: Vec<ImageRecord> = ds.by_ref().map(|r| r.unwrap()).collect();
        let ids: Vec<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
        assert_eq!(ids, ["a/2.jpg", "a/3.jpg", "a/1.jpg"]);
        assert_eq!(records.iter().map(|r| r.lanes.len()).collect::<Vec<_>>(), [1, 0, 2]);
        assert_eq!(ds.warnings(), 1);
        assert_eq!(records[0].tags, ["test_night"]);
        assert!(load_dataset(Some(&root.join("nope.txt")), root, DatasetFormat::Culane, 1, 1).is_err());
    }

    #[test]
    fn curvelanes_directory_walk() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let lane = r#"{"Lines":[[{"x":"1","y":"2"},{"x":"3","y":"4"}]]}"#;
        write(&root.join("valid/labels/b.lines.json"), lane);
        write(&root.join("valid/labels/a.lines.json"), lane);
        let records: Vec<ImageRecord> = load_dataset(None, root, DatasetFormat::Curvelanes, 2560, 1440)
            .unwrap()
            .map(|r| r.unwrap())
            .collect();
        let ids: Vec<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
        assert_eq!(ids, ["valid/images/a.jpg", "valid/images/b.jpg"]);
        assert!(records.iter().all(|r| r.lanes.len() == 1));
    }

    fn sample_reports() -> (MetricsReport, SweepReport) {
        let img = ImageEval {
            image_id: "x.jpg".into(),
            tags: vec!["normal".into()],
            tp: 1,
            fp: 1,
            fn_: 0,
            matches: vec![MatchedPair { pred: 0, gt: 0, iou: 2.0 / 3.0, frechet: 12.345678 }],
        };
        let scores = ScoreMatrix {
            n_pred: 1,
            n_gt: 1,
            scores: vec![PairScore { iou: 2.0 / 3.0, frechet: 12.345678 }],
        };
        (aggregate(&[img]), sweep_scores(&[scores], &[0.1, 0.5, 0.9], &[10.0, f64::INFINITY]).unwrap())
    }

    #[test]
    fn json_report_fields() {
        let (metrics, sweep) = sample_reports();
        let cfg = EvalConfig::classic();
        let bytes = emit_report(&cfg, &metrics, Some(&sweep), ReportFormat::Json).unwrap();
        let doc: Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(doc["config"]["beta"], "inf");
        assert_eq!(doc["metrics"]["tp"], 1);
        assert_eq!(doc["metrics"]["miou"].as_f64().unwrap(), 0.666667);
        assert_eq!(doc["metrics"]["mdis"].as_f64().unwrap(), 12.3457);
        assert_eq!(doc["metrics"]["precision"].as_f64().unwrap(), 0.5);
        assert_eq!(doc["tags"]["normal"]["fp"], 1);
        assert_eq!(doc["sweep"]["cells"].as_array().unwrap().len(), 6);
        assert_eq!(doc["sweep"]["cells"][1]["beta"], "inf");
        assert_eq!(emit_report(&cfg, &metrics, Some(&sweep), ReportFormat::Json).unwrap(), bytes);
    }

    #[test]
    fn empty_report_has_undefined_means() {
        let bytes = emit_report(&EvalConfig::culane(), &aggregate(&[]), None, ReportFormat::Json).unwrap();
        let doc: Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(doc["metrics"]["f1"].as_f64(), Some(0.0));
        assert!(doc["metrics"]["miou"].is_null());
        assert!(doc["metrics"]["mdis"].is_null());
    }

    #[test]
    fn csv_report_rows() {
        let (metrics, sweep) = sample_reports();
        let cfg = EvalConfig::culane();
        let text = String::from_utf8(emit_report(&cfg, &metrics, Some(&sweep), ReportFormat::Csv).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), sweep.cells.len() + 1);
        assert_eq!(lines[0], "alpha,beta,f1,precision,recall");
        assert_eq!(lines[2], "0.1,inf,1,1,1");
        let single = String::from_utf8(emit_report(&cfg, &metrics, None, ReportFormat::Csv).unwrap()).unwrap();
        assert_eq!(single.lines().count(), 2);
    }

    #[test]
    fn sig6_rounding() {
        assert_eq!(round_sig6(1.0 / 3.0), 0.333333);
        assert_eq!(round_sig6(123456789.0), 123457000.0);
        assert_eq!(round_sig6(0.0), 0.0);
    }
}
