//! Track annotations and predictions as JSON Lines.
//!
//! One object per line: `{"video_id": .., "frames": .., "boxes": [[x, y, w, h], ..]}`.
//! Predictions use the same schema.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{bail, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub video_id: String,
    #[serde(rename = "frames")]
    pub frame_source: PathBuf,
    #[serde(rename = "boxes")]
    pub gt_boxes: Vec<BBox>,
}

impl TrackRecord {
    pub fn init_box(&self) -> Option<&BBox> {
        self.gt_boxes.first()
    }

    pub fn validate(&self) -> Result<()> {
        if self.gt_boxes.is_empty() {
            bail!(Format, "track {:?} has no boxes", self.video_id);
        }
        if let Some((i, b)) = self
            .gt_boxes
            .iter()
            .enumerate()
            .find(|(_, b)| !(b.is_finite() && b.w >= 0.0 && b.h >= 0.0))
        {
            bail!(Format, "track {:?} frame {i}: invalid box {b:?}", self.video_id);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub video_id: String,
    #[serde(default, rename = "frames", skip_serializing_if = "Option::is_none")]
    pub frame_source: Option<PathBuf>,
    pub boxes: Vec<BBox>,
}

impl Prediction {
    pub fn new(video_id: impl Into<String>, boxes: Vec<BBox>) -> Self {
        Self {
            video_id: video_id.into(),
            frame_source: None,
            boxes,
        }
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(r: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

fn write_jsonl<T: Serialize, W: Write>(items: &[T], mut w: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads annotations; relative frame paths are resolved against the
/// annotation file's directory.
pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<TrackRecord>> {
    let path = path.as_ref();
    let mut recs: Vec<TrackRecord> = read_jsonl(BufReader::new(File::open(path)?))?;
    let base = path.parent().unwrap_or(Path::new(""));
    for r in &mut recs {
        r.validate()?;
        if r.frame_source.is_relative() {
            r.frame_source = base.join(&r.frame_source);
        }
    }
    Ok(recs)
}

pub fn read_records<R: BufRead>(r: R) -> Result<Vec<TrackRecord>> {
    let recs: Vec<TrackRecord> = read_jsonl(r)?;
    recs.iter().try_for_each(TrackRecord::validate)?;
    Ok(recs)
}

pub fn write_records<W: Write>(records: &[TrackRecord], w: W) -> Result<()> {
    write_jsonl(records, w)
}

pub fn save_records(records: &[TrackRecord], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(records, BufWriter::new(File::create(path)?))
}

pub fn read_predictions<R: BufRead>(r: R) -> Result<Vec<Prediction>> {
    read_jsonl(r)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    read_jsonl(BufReader::new(File::open(path)?))
}

pub fn write_predictions<W: Write>(predictions: &[Prediction], w: W) -> Result<()> {
    write_jsonl(predictions, w)
}

pub fn save_predictions(predictions: &[Prediction], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(predictions, BufWriter::new(File::create(path)?))
}

/// Parses a GOT-10k style `groundtruth.txt`: one `x,y,w,h` per line.
pub fn read_got10k_groundtruth<R: Read>(r: R) -> Result<Vec<BBox>> {
    let mut boxes = Vec::new();
    for (n, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        let [x, y, w, h] = vals[..] else {
            bail!(Format, "line {}: expected 4 values, got {}", n + 1, vals.len());
        };
        boxes.push(BBox::new(x, y, w, h));
    }
    Ok(boxes)
}

/// Builds a record for a GOT-10k sequence directory holding
/// `groundtruth.txt` and its frames.
pub fn got10k_record(sequence_dir: impl AsRef<Path>) -> Result<TrackRecord> {
    let dir = sequence_dir.as_ref();
    let gt = read_got10k_groundtruth(File::open(dir.join("groundtruth.txt"))?)?;
    let video_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    let rec = TrackRecord {
        video_id,
        frame_source: dir.to_path_buf(),
        gt_boxes: gt,
    };
    rec.validate()?;
    Ok(rec)
}
