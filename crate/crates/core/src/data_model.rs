//! Annotation records, the line-delimited clip manifest, and case-level
//! split hygiene.
//!
//! A manifest is JSON-lines: one self-describing record per line with the
//! fixed field names `clip_id, case_id, split, surgery, tool, action,
//! frame_count, frame_height, frame_width, pre_action_start,
//! pre_action_end, keypoints, frames_path`. Keypoints are an 8-number
//! array `[x0, y0, x1, y1, x2, y2, x3, y3]`.

use crate::error::{CoreError, Result};
use crate::heatmap;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl FromStr for Split {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CoreError::config(format!("unknown split `{other}`"))),
        }
    }
}

/// One clip's annotation: identity, prompt triplet, pre-action frame range,
/// the 4-point affordance polygon and frame geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub clip_id: String,
    pub case_id: String,
    pub split: Split,
    pub surgery: String,
    pub tool: String,
    pub action: String,
    pub frame_count: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub pre_action_start: usize,
    pub pre_action_end: usize,
    pub keypoints: [f64; 8],
    pub frames_path: String,
}

impl AnnotationRecord {
    pub fn keypoint_pairs(&self) -> [(f64, f64); 4] {
        let k = &self.keypoints;
        [(k[0], k[1]), (k[2], k[3]), (k[4], k[5]), (k[6], k[7])]
    }

    /// Zero-area polygons are accepted but flagged; target generation
    /// falls back to the vertex-mean centroid for them.
    pub fn degenerate(&self) -> bool {
        heatmap::polygon_is_degenerate(&self.keypoint_pairs())
    }

    pub fn triplet_key(&self) -> (String, String, String) {
        (
            self.surgery.clone(),
            self.tool.clone(),
            self.action.clone(),
        )
    }

    /// Geometric and range invariants; the closed tool-action vocabulary
    /// is enforced separately where a vocabulary is in scope.
    pub fn validate(&self) -> Result<()> {
        let id = &self.clip_id;
        if self.pre_action_start > self.pre_action_end {
            return Err(CoreError::validation(format!(
                "clip {id}: pre_action_start {} > pre_action_end {}",
                self.pre_action_start, self.pre_action_end
            )));
        }
        if self.pre_action_end >= self.frame_count {
            return Err(CoreError::validation(format!(
                "clip {id}: pre_action_end {} outside frame count {}",
                self.pre_action_end, self.frame_count
            )));
        }
        let (w, h) = (self.frame_width as f64, self.frame_height as f64);
        for (i, (x, y)) in self.keypoint_pairs().iter().enumerate() {
            if !(0.0..=w - 1.0).contains(x) || !(0.0..=h - 1.0).contains(y) {
                return Err(CoreError::validation(format!(
                    "clip {id}: keypoint {i} at ({x}, {y}) outside frame {}x{}",
                    self.frame_width, self.frame_height
                )));
            }
        }
        let pts = self.keypoint_pairs();
        if heatmap::quad_self_intersects(&pts) {
            return Err(CoreError::validation(format!(
                "clip {id}: keypoints form a self-intersecting quadrilateral"
            )));
        }
        if self.surgery.is_empty() || self.tool.is_empty() || self.action.is_empty() {
            return Err(CoreError::validation(format!(
                "clip {id}: empty prompt field"
            )));
        }
        Ok(())
    }
}

/// All records of a dataset plus the set of observed prompt triplets.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub records: Vec<AnnotationRecord>,
    pub vocabulary: BTreeSet<(String, String, String)>,
}

impl Manifest {
    pub fn from_records(records: Vec<AnnotationRecord>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut vocabulary = BTreeSet::new();
        for r in &records {
            r.validate()?;
            if !seen.insert(r.clip_id.clone()) {
                return Err(CoreError::validation(format!(
                    "duplicate clip_id {}",
                    r.clip_id
                )));
            }
            vocabulary.insert(r.triplet_key());
        }
        Ok(Manifest {
            records,
            vocabulary,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: AnnotationRecord =
                serde_json::from_str(&line).map_err(|e| CoreError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            records.push(record);
        }
        Self::from_records(records)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)
                .map_err(|e| CoreError::validation(format!("serialize record: {e}")))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn split_records(&self, split: Split) -> Vec<&AnnotationRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Per-case split usage and the leakage verdict.
#[derive(Debug, Clone)]
pub struct SplitReport {
    /// Case id -> the set of splits it contributes clips to.
    pub cases: BTreeMap<String, BTreeSet<Split>>,
    /// Cases appearing in more than one split.
    pub leaking_cases: Vec<String>,
    pub leakage: bool,
    /// Clip counts per split.
    pub counts: BTreeMap<Split, usize>,
}

/// Case-level split audit: leakage is true iff any case contributes clips
/// to more than one of train/val/test. Deterministic and order-independent.
pub fn validate_splits(manifest: &Manifest) -> SplitReport {
    let mut cases: BTreeMap<String, BTreeSet<Split>> = BTreeMap::new();
    let mut counts: BTreeMap<Split, usize> = BTreeMap::new();
    for r in &manifest.records {
        cases.entry(r.case_id.clone()).or_default().insert(r.split);
        *counts.entry(r.split).or_insert(0) += 1;
    }
    let leaking_cases: Vec<String> = cases
        .iter()
        .filter(|(_, splits)| splits.len() > 1)
        .map(|(case, _)| case.clone())
        .collect();
    let leakage = !leaking_cases.is_empty();
    SplitReport {
        cases,
        leaking_cases,
        leakage,
        counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(clip: &str, case: &str, split: Split) -> AnnotationRecord {
        AnnotationRecord {
            clip_id: clip.to_string(),
            case_id: case.to_string(),
            split,
            surgery: "cholecystectomy".to_string(),
            tool: "hook".to_string(),
            action: "dissect".to_string(),
            frame_count: 48,
            frame_height: 64,
            frame_width: 64,
            pre_action_start: 0,
            pre_action_end: 31,
            keypoints: [10.0, 10.0, 50.0, 10.0, 50.0, 40.0, 10.0, 40.0],
            frames_path: format!("clips/{clip}.afvc"),
        }
    }

    #[test]
    fn empty_file_loads_as_empty_manifest() {
        let dir = std::env::temp_dir().join("afford_test_manifest_empty");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("manifest.jsonl");
        std::fs::write(&path, "").unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.len(), 0);
        assert!(m.vocabulary.is_empty());
    }

    #[test]
    fn in_bounds_rectangle_is_accepted() {
        let r = record("clip0", "case0", Split::Train);
        assert!(r.validate().is_ok());
        assert!(!r.degenerate());
    }

    #[test]
    fn out_of_range_keypoint_is_rejected_naming_clip() {
        let mut r = record("clip_bad", "case0", Split::Train);
        r.keypoints[0] = 70.0;
        let err = r.validate().unwrap_err();
        assert!(err.to_string().contains("clip_bad"), "{err}");
    }

    #[test]
    fn parse_failure_reports_line_number() {
        let dir = std::env::temp_dir().join("afford_test_manifest_parse");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("manifest.jsonl");
        let good = serde_json::to_string(&record("a", "c", Split::Train)).unwrap();
        std::fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        let err = Manifest::load(&path).unwrap_err();
        match err {
            CoreError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn duplicate_clip_ids_are_rejected() {
        let records = vec![record("a", "c", Split::Train), record("a", "c", Split::Train)];
        assert!(Manifest::from_records(records).is_err());
    }

    #[test]
    fn same_case_same_split_has_no_leakage() {
        let m = Manifest::from_records(vec![
            record("a", "case0", Split::Train),
            record("b", "case0", Split::Train),
        ])
        .unwrap();
        let report = validate_splits(&m);
        assert!(!report.leakage);
        assert!(report.leaking_cases.is_empty());
    }

    #[test]
    fn case_spanning_splits_is_reported() {
        let m = Manifest::from_records(vec![
            record("a", "case0", Split::Train),
            record("b", "case0", Split::Test),
        ])
        .unwrap();
        let report = validate_splits(&m);
        assert!(report.leakage);
        assert_eq!(report.leaking_cases, vec!["case0".to_string()]);
    }

    #[test]
    fn split_report_is_order_independent() {
        let mut records = vec![
            record("a", "case0", Split::Train),
            record("b", "case1", Split::Val),
            record("c", "case2", Split::Test),
            record("d", "case0", Split::Train),
        ];
        let m1 = Manifest::from_records(records.clone()).unwrap();
        records.reverse();
        let m2 = Manifest::from_records(records).unwrap();
        let (r1, r2) = (validate_splits(&m1), validate_splits(&m2));
        assert_eq!(r1.cases, r2.cases);
        assert_eq!(r1.counts, r2.counts);
        assert_eq!(r1.leakage, r2.leakage);
    }

    proptest! {
        #[test]
        fn manifest_round_trip_is_field_exact(
            n in 1usize..8,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let splits = [Split::Train, Split::Val, Split::Test];
            let records: Vec<AnnotationRecord> = (0..n).map(|i| {
                let mut r = record(&format!("clip{i}"), &format!("case{}", i / 2),
                    splits[rng.random_range(0..3)]);
                for k in &mut r.keypoints {
                    *k = rng.random_range(0.0..63.0);
                }
                // keep the quad simple: rebuild as an axis-aligned box
                let (x0, y0) = (r.keypoints[0].min(40.0), r.keypoints[1].min(40.0));
                r.keypoints = [x0, y0, x0 + 5.0, y0, x0 + 5.0, y0 + 4.0, x0, y0 + 4.0];
                r
            }).collect();
            let m = Manifest::from_records(records.clone()).unwrap();
            let dir = std::env::temp_dir().join(format!("afford_rt_{seed}_{n}"));
            std::fs::create_dir_all(&dir).unwrap();
            let path = dir.join("m.jsonl");
            m.save(&path).unwrap();
            let loaded = Manifest::load(&path).unwrap();
            prop_assert_eq!(loaded.records, records);
            std::fs::remove_dir_all(&dir).ok();
        }
    }
}
