//! Video/annotation data model and its JSON-lines file formats.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::numeric::is_unit;

pub const UNIT_TOLERANCE: f64 = 1e-6;

/// One candidate region in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    /// Detection confidence in `[0, 1]`.
    pub confidence: f64,
    pub text_embedding: Vec<f64>,
    pub image_embedding: Vec<f64>,
    /// Backbone RoI feature fed to the association head.
    pub raw_feature: Vec<f64>,
    pub class_label: Option<usize>,
}

impl Detection {
    pub fn new(
        bbox: BoundingBox,
        confidence: f64,
        text_embedding: Vec<f64>,
        image_embedding: Vec<f64>,
        raw_feature: Vec<f64>,
        class_label: Option<usize>,
    ) -> Result<Self> {
        let det = Self {
            bbox,
            confidence,
            text_embedding,
            image_embedding,
            raw_feature,
            class_label,
        };
        det.validate()?;
        Ok(det)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::InvalidInput(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        if !is_unit(&self.text_embedding, UNIT_TOLERANCE) {
            return Err(Error::InvalidInput("text embedding is not unit length".into()));
        }
        if !is_unit(&self.image_embedding, UNIT_TOLERANCE) {
            return Err(Error::InvalidInput("image embedding is not unit length".into()));
        }
        if self.raw_feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("raw feature has non-finite entries".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameObservations {
    pub frame_index: usize,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthBox {
    pub bbox: BoundingBox,
    pub track_id: u64,
    pub class_id: usize,
}

/// Frames sorted by index. `ground_truth`, when present, is aligned with
/// `frames` position by position.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VideoSequence {
    pub frames: Vec<FrameObservations>,
    pub ground_truth: Option<Vec<Vec<GroundTruthBox>>>,
}

impl VideoSequence {
    /// Builds a sequence over the union of frame indices seen in either map.
    pub fn from_maps(
        detections: BTreeMap<usize, Vec<Detection>>,
        ground_truth: Option<BTreeMap<usize, Vec<GroundTruthBox>>>,
    ) -> Self {
        let mut indices: Vec<usize> = detections.keys().copied().collect();
        if let Some(gt) = &ground_truth {
            indices.extend(gt.keys().copied());
        }
        indices.sort_unstable();
        indices.dedup();
        let mut detections = detections;
        let frames = indices
            .iter()
            .map(|&i| FrameObservations {
                frame_index: i,
                detections: detections.remove(&i).unwrap_or_default(),
            })
            .collect();
        let ground_truth = ground_truth.map(|mut gt| {
            indices
                .iter()
                .map(|i| gt.remove(i).unwrap_or_default())
                .collect()
        });
        Self {
            frames,
            ground_truth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.frames.windows(2) {
            if w[0].frame_index >= w[1].frame_index {
                return Err(Error::InvalidInput(format!(
                    "frames not strictly increasing at index {}",
                    w[1].frame_index
                )));
            }
        }
        if let Some(gt) = &self.ground_truth {
            if gt.len() != self.frames.len() {
                return Err(Error::dims("ground-truth frames", self.frames.len(), gt.len()));
            }
            for (frame, boxes) in self.frames.iter().zip(gt) {
                let mut ids = HashSet::new();
                for b in boxes {
                    if !ids.insert(b.track_id) {
                        return Err(Error::InvalidInput(format!(
                            "track {} appears twice in frame {}",
                            b.track_id, frame.frame_index
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn num_detections(&self) -> usize {
        self.frames.iter().map(|f| f.detections.len()).sum()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectionRecord {
    frame: usize,
    #[serde(rename = "box")]
    bbox: BoundingBox,
    conf: f64,
    text_emb: Vec<f64>,
    img_emb: Vec<f64>,
    raw_feat: Vec<f64>,
    class: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GroundTruthRecord {
    frame: usize,
    track: u64,
    class: usize,
    #[serde(rename = "box")]
    bbox: BoundingBox,
}

/// Parses JSON lines, collecting the 1-based numbers of every bad line.
fn read_jsonl<T, F>(path: &Path, mut accept: F) -> Result<()>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(T) -> Result<()>,
{
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bad = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ok = serde_json::from_str::<T>(&line)
            .map_err(|e| Error::json(path, e))
            .and_then(&mut accept);
        if ok.is_err() {
            bad.push(n + 1);
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Malformed {
            path: path.to_path_buf(),
            lines: bad,
        })
    }
}

pub fn read_detections(path: &Path) -> Result<BTreeMap<usize, Vec<Detection>>> {
    let mut out: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    read_jsonl(path, |r: DetectionRecord| {
        let det = Detection::new(r.bbox, r.conf, r.text_emb, r.img_emb, r.raw_feat, r.class)?;
        out.entry(r.frame).or_default().push(det);
        Ok(())
    })?;
    Ok(out)
}

pub fn read_ground_truth(path: &Path) -> Result<BTreeMap<usize, Vec<GroundTruthBox>>> {
    let mut out: BTreeMap<usize, Vec<GroundTruthBox>> = BTreeMap::new();
    let mut seen = HashSet::new();
    read_jsonl(path, |r: GroundTruthRecord| {
        if !seen.insert((r.frame, r.track)) {
            return Err(Error::InvalidInput("duplicate (frame, track)".into()));
        }
        out.entry(r.frame).or_default().push(GroundTruthBox {
            bbox: r.bbox,
            track_id: r.track,
            class_id: r.class,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn load_sequence(detections: &Path, ground_truth: Option<&Path>) -> Result<VideoSequence> {
    let dets = read_detections(detections)?;
    let gt = ground_truth.map(read_ground_truth).transpose()?;
    let seq = VideoSequence::from_maps(dets, gt);
    seq.validate()?;
    Ok(seq)
}

fn write_lines<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, &r).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_detections(path: &Path, seq: &VideoSequence) -> Result<()> {
    let records = seq.frames.iter().flat_map(|f| {
        f.detections.iter().map(move |d| DetectionRecord {
            frame: f.frame_index,
            bbox: d.bbox,
            conf: d.confidence,
            text_emb: d.text_embedding.clone(),
            img_emb: d.image_embedding.clone(),
            raw_feat: d.raw_feature.clone(),
            class: d.class_label,
        })
    });
    write_lines(path, records)
}

pub fn write_ground_truth(path: &Path, seq: &VideoSequence) -> Result<()> {
    let empty = Vec::new();
    let gt = seq.ground_truth.as_ref().unwrap_or(&empty);
    let records = seq.frames.iter().zip(gt).flat_map(|(f, boxes)| {
        boxes.iter().map(move |b| GroundTruthRecord {
            frame: f.frame_index,
            track: b.track_id,
            class: b.class_id,
            bbox: b.bbox,
        })
    });
    write_lines(path, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> VideoSequence {
        let b = BoundingBox::new(10.0, 20.0, 4.0, 6.0).unwrap();
        let d = Detection::new(b, 0.75, vec![0.6, 0.8], vec![1.0, 0.0], vec![0.5, -1.5, 2.0], Some(1))
            .unwrap();
        let mut dets = BTreeMap::new();
        dets.insert(3, vec![d.clone()]);
        dets.insert(1, vec![d]);
        let mut gt = BTreeMap::new();
        gt.insert(
            2,
            vec![GroundTruthBox {
                bbox: b,
                track_id: 7,
                class_id: 1,
            }],
        );
        VideoSequence::from_maps(dets, Some(gt))
    }

    #[test]
    fn sequence_covers_union_of_frames() {
        let seq = sample();
        let idx: Vec<usize> = seq.frames.iter().map(|f| f.frame_index).collect();
        assert_eq!(idx, vec![1, 2, 3]);
        let gt = seq.ground_truth.as_ref().unwrap();
        assert_eq!(gt[1].len(), 1);
        assert!(gt[0].is_empty());
        seq.validate().unwrap();
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let seq = sample();
        let dp = dir.path().join("d.jsonl");
        let gp = dir.path().join("g.jsonl");
        write_detections(&dp, &seq).unwrap();
        write_ground_truth(&gp, &seq).unwrap();
        let back = load_sequence(&dp, Some(&gp)).unwrap();
        assert_eq!(back, seq);
    }

    #[test]
    fn detection_line_format() {
        let line = r#"{"frame": 0, "box": [1,2,3,4], "conf": 0.5, "text_emb": [1.0], "img_emb": [0.0, 1.0], "raw_feat": [], "class": null}"#;
        let r: DetectionRecord = serde_json::from_str(line).unwrap();
        assert_eq!(r.class, None);
        assert_eq!(r.bbox.w, 3.0);
    }

    #[test]
    fn malformed_lines_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.jsonl");
        std::fs::write(
            &p,
            "{\"frame\":0,\"track\":1,\"class\":0,\"box\":[1,1,2,2]}\nnot json\n{\"frame\":0,\"track\":1,\"class\":0,\"box\":[1,1,2,2]}\n{\"frame\":1,\"track\":1,\"class\":0,\"box\":[1,1,0,2]}\n",
        )
        .unwrap();
        match read_ground_truth(&p) {
            Err(Error::Malformed { lines, .. }) => assert_eq!(lines, vec![2, 3, 4]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_non_unit_embeddings() {
        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert!(Detection::new(b, 0.5, vec![0.5], vec![1.0], vec![], None).is_err());
        assert!(Detection::new(b, 1.5, vec![1.0], vec![1.0], vec![], None).is_err());
    }
}
