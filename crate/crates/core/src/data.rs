//! Videos, clips and tubelets, plus the line-delimited dataset format.
//!
//! A dataset file starts with one meta object and continues with one video
//! record per line:
//!
//! ```text
//! {"num_classes":5,"L":4,"T":16,"M":8,"D_vis":64,"format_version":1}
//! {"video_id":"v0","label":2,"clips":[[{"score":0.9,"boxes":[[cx,cy,w,h],...],"feat":[...]},...],...]}
//! ```
//!
//! Floats are written in shortest round-trip form, so `save` then `load`
//! reproduces every value bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// One per-frame box, normalized to the frame: center and size in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    fn problem(&self) -> Option<String> {
        let a = self.to_array();
        if a.iter().any(|v| !v.is_finite()) {
            return Some("non-finite box coordinate".into());
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Some(format!("degenerate box size w={} h={}", self.w, self.h));
        }
        if !(0.0..=1.0).contains(&self.cx) || !(0.0..=1.0).contains(&self.cy) {
            return Some(format!("box center ({}, {}) outside [0,1]", self.cx, self.cy));
        }
        None
    }
}

/// A tracked region across the `T` frames of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Tubelet {
    pub clip_index: usize,
    pub boxes: Vec<BBox>,
    pub visual: Vec<f64>,
    pub score: f64,
}

impl Tubelet {
    /// Per-frame `[cx, cy, w, h]` concatenated in frame order (length `4T`).
    pub fn coord_raw(&self) -> Vec<f64> {
        self.boxes.iter().flat_map(|b| b.to_array()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub label: usize,
    /// `L` clips of `M` tubelets each, tubelets in descending score order.
    pub clips: Vec<Vec<Tubelet>>,
}

impl VideoRecord {
    pub fn num_tubelets(&self) -> usize {
        self.clips.iter().map(Vec::len).sum()
    }

    /// Tubelets in storage order: clip-major, then slot.
    pub fn tubelets(&self) -> impl Iterator<Item = &Tubelet> {
        self.clips.iter().flatten()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub num_classes: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "D_vis")]
    pub d_vis: usize,
    pub format_version: u32,
}

impl DatasetMeta {
    pub fn new(num_classes: usize, l: usize, t: usize, m: usize, d_vis: usize) -> Self {
        DatasetMeta {
            num_classes,
            l,
            t,
            m,
            d_vis,
            format_version: FORMAT_VERSION,
        }
    }

    /// Nodes in each complete graph, `L · M`.
    pub fn nodes_per_video(&self) -> usize {
        self.l * self.m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<VideoRecord>,
}

/// One invariant violation, located by record index when it has one.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub record: Option<usize>,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Class ids in `[0, C)` with no records. Informational only.
    pub empty_classes: Vec<usize>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, record: Option<usize>, message: String) {
        self.violations.push(Violation { record, message });
    }
}

fn check_meta(meta: &DatasetMeta, report: &mut ValidationReport) {
    if meta.format_version != FORMAT_VERSION {
        report.push(
            None,
            format!("unsupported format_version {}", meta.format_version),
        );
    }
    for (name, v) in [
        ("num_classes", meta.num_classes),
        ("L", meta.l),
        ("T", meta.t),
        ("M", meta.m),
        ("D_vis", meta.d_vis),
    ] {
        if v == 0 {
            report.push(None, format!("meta field {name} must be >= 1"));
        }
    }
}

fn check_record(meta: &DatasetMeta, idx: usize, rec: &VideoRecord, report: &mut ValidationReport) {
    let id = &rec.video_id;
    if rec.label >= meta.num_classes {
        report.push(
            Some(idx),
            format!("video {id}: label {} outside [0, {})", rec.label, meta.num_classes),
        );
    }
    if rec.clips.len() != meta.l {
        report.push(
            Some(idx),
            format!("video {id}: {} clips, expected L={}", rec.clips.len(), meta.l),
        );
    }
    for (c, clip) in rec.clips.iter().enumerate() {
        if clip.len() != meta.m {
            report.push(
                Some(idx),
                format!("video {id} clip {c}: {} tubelets, expected M={}", clip.len(), meta.m),
            );
        }
        for (s, tub) in clip.iter().enumerate() {
            let at = format!("video {id} clip {c} tubelet {s}");
            if tub.clip_index != c {
                report.push(
                    Some(idx),
                    format!("{at}: clip_index {} does not match container", tub.clip_index),
                );
            }
            if tub.boxes.len() != meta.t {
                report.push(
                    Some(idx),
                    format!("{at}: {} boxes, expected T={}", tub.boxes.len(), meta.t),
                );
            }
            if tub.visual.len() != meta.d_vis {
                report.push(
                    Some(idx),
                    format!("{at}: feature length {}, expected D_vis={}", tub.visual.len(), meta.d_vis),
                );
            }
            if tub.visual.iter().any(|v| !v.is_finite()) {
                report.push(Some(idx), format!("{at}: non-finite feature value"));
            }
            if !(0.0..=1.0).contains(&tub.score) {
                report.push(Some(idx), format!("{at}: score {} outside [0,1]", tub.score));
            }
            for (f, b) in tub.boxes.iter().enumerate() {
                if let Some(p) = b.problem() {
                    report.push(Some(idx), format!("{at} frame {f}: {p}"));
                }
            }
        }
    }
}

/// Lists every invariant violation. An empty `violations` list means the
/// dataset is consistent with its meta.
pub fn validate(ds: &Dataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    check_meta(&ds.meta, &mut report);
    let mut seen = vec![false; ds.meta.num_classes];
    for (i, rec) in ds.records.iter().enumerate() {
        check_record(&ds.meta, i, rec, &mut report);
        if let Some(s) = seen.get_mut(rec.label) {
            *s = true;
        }
    }
    report.empty_classes = seen
        .iter()
        .enumerate()
        .filter(|(_, &s)| !s)
        .map(|(c, _)| c)
        .collect();
    report
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TubeletWire {
    score: f64,
    boxes: Vec<[f64; 4]>,
    feat: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordWire {
    video_id: String,
    label: usize,
    clips: Vec<Vec<TubeletWire>>,
}

impl RecordWire {
    fn into_record(self) -> VideoRecord {
        let clips = self
            .clips
            .into_iter()
            .enumerate()
            .map(|(c, clip)| {
                clip.into_iter()
                    .map(|t| Tubelet {
                        clip_index: c,
                        boxes: t
                            .boxes
                            .into_iter()
                            .map(|[cx, cy, w, h]| BBox { cx, cy, w, h })
                            .collect(),
                        visual: t.feat,
                        score: t.score,
                    })
                    .collect()
            })
            .collect();
        VideoRecord {
            video_id: self.video_id,
            label: self.label,
            clips,
        }
    }

    fn from_record(rec: &VideoRecord) -> Self {
        RecordWire {
            video_id: rec.video_id.clone(),
            label: rec.label,
            clips: rec
                .clips
                .iter()
                .map(|clip| {
                    clip.iter()
                        .map(|t| TubeletWire {
                            score: t.score,
                            boxes: t.boxes.iter().map(|b| b.to_array()).collect(),
                            feat: t.visual.clone(),
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

/// Reads a dataset file and checks it against its own meta.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut meta: Option<DatasetMeta> = None;
    let mut records = Vec::new();
    let mut first_line_of = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        };
        match &meta {
            None => meta = Some(serde_json::from_str(&line).map_err(parse_err)?),
            Some(_) => {
                let wire: RecordWire = serde_json::from_str(&line).map_err(parse_err)?;
                records.push(wire.into_record());
                first_line_of.push(lineno);
            }
        }
    }
    let meta = meta.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: "missing meta line".into(),
    })?;
    let ds = Dataset { meta, records };
    let report = validate(&ds);
    if let Some(v) = report.violations.first() {
        let line = v.record.map_or(1, |r| first_line_of[r]);
        let more = report.violations.len() - 1;
        let suffix = if more > 0 {
            format!(" (and {more} more)")
        } else {
            String::new()
        };
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{}{suffix}", v.message),
        });
    }
    Ok(ds)
}

/// Writes a valid dataset; invalid datasets are rejected before any byte is
/// written.
pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let report = validate(ds);
    if let Some(v) = report.violations.first() {
        return Err(Error::InvalidData(v.message.clone()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, &ds.meta).map_err(|e| Error::InvalidData(e.to_string()))?;
    w.write_all(b"\n").map_err(io)?;
    for rec in &ds.records {
        serde_json::to_writer(&mut w, &RecordWire::from_record(rec))
            .map_err(|e| Error::InvalidData(e.to_string()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_video(meta: &DatasetMeta, id: &str, label: usize) -> VideoRecord {
        let clips = (0..meta.l)
            .map(|c| {
                (0..meta.m)
                    .map(|s| Tubelet {
                        clip_index: c,
                        boxes: (0..meta.t)
                            .map(|f| BBox::new(0.1 + 0.01 * s as f64, 0.2 + 0.001 * f as f64, 0.1, 0.2))
                            .collect(),
                        visual: (0..meta.d_vis).map(|d| (c * 100 + s * 10 + d) as f64 * 0.1).collect(),
                        score: 1.0 - 0.1 * s as f64,
                    })
                    .collect()
            })
            .collect();
        VideoRecord {
            video_id: id.into(),
            label,
            clips,
        }
    }

    fn tiny_dataset() -> Dataset {
        let meta = DatasetMeta::new(2, 2, 3, 2, 4);
        let records = vec![tiny_video(&meta, "a", 0), tiny_video(&meta, "b", 1)];
        Dataset { meta, records }
    }

    #[test]
    fn valid_dataset_has_empty_report() {
        assert!(validate(&tiny_dataset()).is_valid());
    }

    #[test]
    fn score_out_of_range_is_one_violation() {
        let mut ds = tiny_dataset();
        ds.records[1].clips[0][1].score = 1.5;
        let r = validate(&ds);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].record, Some(1));
    }

    #[test]
    fn zero_width_box_is_one_violation() {
        let mut ds = tiny_dataset();
        ds.records[0].clips[1][0].boxes[2].w = 0.0;
        let r = validate(&ds);
        assert_eq!(r.violations.len(), 1);
        assert!(r.violations[0].message.contains("degenerate"));
    }

    #[test]
    fn empty_class_is_flagged_not_violated() {
        let mut ds = tiny_dataset();
        ds.records.pop();
        let r = validate(&ds);
        assert!(r.is_valid());
        assert_eq!(r.empty_classes, vec![1]);
    }

    #[test]
    fn short_tubelet_fails_load_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let mut ds = tiny_dataset();
        save_dataset(&ds, &path).unwrap();
        ds.records[1].clips[1][0].boxes.pop();
        // bypass save's validation by writing the wire format directly
        let mut text = serde_json::to_string(&ds.meta).unwrap() + "\n";
        for r in &ds.records {
            text += &serde_json::to_string(&RecordWire::from_record(r)).unwrap();
            text += "\n";
        }
        std::fs::write(&path, text).unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
        assert!(err.contains("video b clip 1 tubelet 0"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let meta = r#"{"num_classes":1,"L":1,"T":1,"M":1,"D_vis":1,"format_version":1}"#;
        std::fs::write(&path, format!("{meta}\n{{\"video_id\":\"x\",\"clips\":[]}}\n")).unwrap();
        let err = load_dataset(&path).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("label"), "{err}");
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_dataset("/nonexistent/ds.jsonl"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn empty_record_list_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let ds = Dataset {
            meta: DatasetMeta::new(3, 4, 16, 8, 64),
            records: vec![],
        };
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn non_finite_feature_is_rejected_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        let mut ds = tiny_dataset();
        ds.records[0].clips[0][0].visual[1] = f64::NAN;
        assert!(save_dataset(&ds, &path).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn default_scale_video_has_32_tubelets() {
        let meta = DatasetMeta::new(1, 4, 16, 8, 64);
        let ds = Dataset {
            records: vec![tiny_video(&meta, "v", 0)],
            meta,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.records.len(), 1);
        assert_eq!(back.records[0].num_tubelets(), 32);
    }
}
