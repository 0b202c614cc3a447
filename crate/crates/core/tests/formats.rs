use std::path::{Path, PathBuf};

use lanechain::dataio::{
    load_dataset, load_predictions, parse_predictions, prediction_path, write_predictions, DatasetFormat,
    ImageRecord, PredictedLane,
};
use lanechain::geometry::Point2;

fn data() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

fn points(coords: &[(f64, f64)]) -> Vec<Point2> {
    coords.iter().map(|&(x, y)| Point2::new(x, y)).collect()
}

#[test]
fn culane_golden_dataset() {
    let root = data().join("culane");
    let mut ds = load_dataset(Some(&root.join("list/test0_normal.txt")), &root, DatasetFormat::Culane, 1640, 590)
        .unwrap();
    let records: Vec<ImageRecord> = ds.by_ref().collect::<Result<_, _>>().unwrap();
    let ids: Vec<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    assert_eq!(
        ids,
        ["driver_100/clip_01/00030.jpg", "driver_100/clip_01/00060.jpg", "driver_100/clip_01/00090.jpg"]
    );
    let first = &records[0];
    assert_eq!(first.lanes.len(), 2);
    assert_eq!(
        first.lanes[0].points(),
        points(&[(512.5, 589.0), (530.0, 560.0), (551.25, 530.0), (574.0, 500.0)]).as_slice()
    );
    // the repeated point collapses
    assert_eq!(
        first.lanes[1].points(),
        points(&[(1202.0, 589.0), (1180.0, 560.0), (1158.0, 531.0)]).as_slice()
    );
    assert!(records[1].lanes.is_empty());
    assert!(records[2].lanes.is_empty());
    // one single-point lane dropped, one annotation file missing
    assert_eq!(ds.warnings(), 2);
    assert!(records.iter().all(|r| r.tags == ["test0_normal"] && (r.width, r.height) == (1640, 590)));
}

#[test]
fn curvelanes_golden_dataset() {
    let root = data().join("curvelanes");
    let records: Vec<ImageRecord> = load_dataset(None, &root, DatasetFormat::Curvelanes, 2560, 1440)
        .unwrap()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].image_id, "valid/images/0a1b.jpg");
    assert_eq!(
        records[0].lanes[0].points(),
        points(&[(1020.5, 1440.0), (1100.25, 1200.0), (1210.0, 990.75)]).as_slice()
    );
    // numbers and off-canvas points are accepted
    assert_eq!(records[0].lanes[1].points(), points(&[(2400.0, 1440.0), (2700.0, 1300.0)]).as_slice());
}

#[test]
fn prediction_files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let lanes = parse_predictions("0.1 589 7.25 300.5 # 0.875\n1e3 10 999.999 20\n", 1640, 590)
        .unwrap()
        .lanes;
    assert_eq!(lanes[1].confidence, 1.0);
    let id = "driver_100/clip_01/00030.jpg";
    let path = prediction_path(dir.path(), id);
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(&path, write_predictions(&lanes)).unwrap();
    let (back, missing) = load_predictions(dir.path(), id, 1640, 590).unwrap();
    assert!(!missing);
    assert_eq!(back.lanes, lanes);
    let (none, missing) = load_predictions(dir.path(), "other.jpg", 1640, 590).unwrap();
    assert!(missing && none.lanes.is_empty());
    let text = write_predictions(&[PredictedLane { lane: lanes[0].lane.clone(), confidence: 0.5 }]);
    assert_eq!(text, "0.1 589 7.25 300.5 # 0.5\n");
}
