use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rtseg_core::dataset::{CaseField, CaseNaming, DatasetManifest};
use rtseg_core::nifti::write_volume;
use rtseg_core::report::{parse_json_table, ScoreReport};
use rtseg_core::{Geometry, LabelMask, LabelSet, VoxelGrid};

fn rtseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtseg"))
        .args(args)
        .env_remove("RTSEG_JOBS")
        .env_remove("RTSEG_LABELS")
        .env("SOURCE_DATE_EPOCH", "0")
        .output()
        .unwrap()
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

fn mask(values: Vec<u8>, labels: &[u8]) -> LabelMask {
    let g = Geometry::with_dims([2, 2, 1]).unwrap();
    LabelMask::from_values(g, values, LabelSet::new(labels.iter().copied()).unwrap()).unwrap()
}

fn write_pair(root: &Path, id: &str, gt: Vec<u8>, pred: Vec<u8>) {
    fs::create_dir_all(root.join("gt")).unwrap();
    fs::create_dir_all(root.join("pred")).unwrap();
    write_volume(&mask(gt, &[1, 2]), root.join(format!("gt/{id}.nii.gz"))).unwrap();
    write_volume(&mask(pred, &[1, 2]), root.join(format!("pred/{id}.nii.gz"))).unwrap();
}

fn write_case(root: &Path, id: &str, reg_mask: Vec<u8>, labels: &[u8]) {
    let naming = CaseNaming::default();
    for field in CaseField::ALL {
        let path = root.join(id).join(naming.pattern(field).render(id));
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        match field {
            CaseField::RegPreRtMask => write_volume(&mask(reg_mask.clone(), labels), &path).unwrap(),
            f if f.is_mask() => write_volume(&mask(vec![1, 2, 0, 0], &[1, 2]), &path).unwrap(),
            _ => write_volume(&VoxelGrid::filled(Geometry::with_dims([2, 2, 1]).unwrap(), 3.0), &path).unwrap(),
        }
    }
}

#[test]
fn score_writes_report_and_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "a", vec![1, 1, 2, 0], vec![1, 0, 2, 0]);
    write_pair(dir.path(), "b", vec![1, 0, 0, 0], vec![1, 1, 2, 0]);
    let out = dir.path().join("r.json");
    let o = rtseg(&["score", "--pred", &p(&dir.path().join("pred")), "--gt", &p(&dir.path().join("gt")), "--out", &p(&out), "--model", "m"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("| Model | GTVp DSC_agg | GTVn DSC_agg | Mean |"));
    let report: ScoreReport = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    // GTVp: 2*(1+1)/(3+3); GTVn: 2*(1+0)/(2+1)
    assert!((report.labels[0].dsc_agg - 4.0 / 6.0).abs() < 1e-15);
    assert!((report.labels[1].dsc_agg - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(report.cases, vec!["a", "b"]);
    assert_eq!(report.metadata.timestamp.as_deref(), Some("1970-01-01T00:00:00Z"));
    assert_eq!(report.metadata.input_digests.len(), 4);
}

#[test]
fn score_missing_prediction_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "a", vec![1, 0, 0, 0], vec![1, 0, 0, 0]);
    write_pair(dir.path(), "b", vec![1, 0, 0, 0], vec![1, 0, 0, 0]);
    fs::remove_file(dir.path().join("pred/b.nii.gz")).unwrap();
    let o = rtseg(&["score", "--pred", &p(&dir.path().join("pred")), "--gt", &p(&dir.path().join("gt")), "--out", &p(&dir.path().join("r.json"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("b"));
}

#[test]
fn score_all_empty_cohort_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "a", vec![0; 4], vec![0; 4]);
    let o = rtseg(&["score", "--pred", &p(&dir.path().join("pred")), "--gt", &p(&dir.path().join("gt")), "--out", &p(&dir.path().join("r.json"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(rtseg(&["score"]).status.code(), Some(1));
    assert_eq!(rtseg(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(rtseg(&["--jobs", "0", "split", "--ids", "x", "--out", "y"]).status.code(), Some(1));
    assert_eq!(rtseg(&["ensemble", "--member", "no-path", "--target", "t", "--out", "o"]).status.code(), Some(1));
    assert_eq!(rtseg(&["--help"]).status.code(), Some(0));
}

#[test]
fn report_renders_rows_from_score_reports() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "a", vec![1, 1, 2, 0], vec![1, 0, 2, 0]);
    let r = dir.path().join("r.json");
    let o = rtseg(&["score", "--pred", &p(&dir.path().join("pred")), "--gt", &p(&dir.path().join("gt")), "--out", &p(&r), "--model", "FullRes"]);
    assert_eq!(o.status.code(), Some(0));
    let o = rtseg(&["report", "--input", &p(&r), "--format", "json"]);
    assert_eq!(o.status.code(), Some(0));
    let (rows, meta) = parse_json_table(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(rows[0].model_name, "FullRes");
    assert!(meta.input_digests.contains_key(&p(&r)));
    let o = rtseg(&["report", "--input", &p(&r), "--format", "csv"]);
    assert!(String::from_utf8(o.stdout).unwrap().starts_with("model,GTVp_dsc_agg,GTVn_dsc_agg,mean\nFullRes,"));
}

#[test]
fn assemble_507_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("tree");
    for id in ["p1", "p2", "p3"] {
        write_case(&root, id, vec![1, 2, 0, 0], &[1, 2]);
    }
    let out = dir.path().join("ds");
    let o = rtseg(&["assemble", "--root", &p(&root), "--layout", "507", "--out", &p(&out), "--folds", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("dataset.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(json["channel_names"], serde_json::json!({"0": "midRT", "1": "regPreRTmask"}));
    assert_eq!(json["labels"], serde_json::json!({"background": 0, "GTVp": 1, "GTVn": 2}));
    assert!(out.join("imagesTr/p2_0001.nii.gz").is_file());
    assert!(out.join("labelsTr/p3.nii.gz").is_file());
    let manifest = DatasetManifest::from_json(&text).unwrap();
    assert_eq!(manifest.num_training, 3);

    let split = dir.path().join("split.json");
    let o = rtseg(&["split", "--manifest", &p(&out.join("dataset.json")), "-k", "3", "--out", &p(&split)]);
    assert_eq!(o.status.code(), Some(0));
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(&split).unwrap()).unwrap();
    assert_eq!(s["assignment"], serde_json::to_value(&manifest.folds).unwrap());
}

#[test]
fn assemble_516_drops_cases_without_both_labels() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("tree");
    write_case(&root, "keep", vec![1, 2, 0, 0], &[1, 2]);
    write_case(&root, "nop", vec![0, 2, 0, 0], &[1, 2]);
    write_case(&root, "non", vec![1, 0, 0, 0], &[1, 2]);
    let out = dir.path().join("ds");
    let o = rtseg(&["assemble", "--root", &p(&root), "--layout", "516", "--out", &p(&out), "--folds", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = DatasetManifest::from_json(&fs::read_to_string(out.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(manifest.case_ids(), vec!["keep"]);
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("nop") && stderr.contains("non"));
}

#[test]
fn validate_flags_third_label() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("tree");
    write_case(&root, "good", vec![1, 2, 0, 0], &[1, 2]);
    let o = rtseg(&["validate", "--root", &p(&root)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    write_case(&root, "bad", vec![1, 2, 3, 0], &[1, 2, 3]);
    let o = rtseg(&["validate", "--root", &p(&root)]);
    assert_eq!(o.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("bad") && stderr.contains("preRT_mask_registered"), "{stderr}");
}
