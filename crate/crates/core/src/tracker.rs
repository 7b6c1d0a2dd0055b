//! Online appearance-only association: bi-directional softmax plus cosine
//! similarity, one-to-one matching, track lifecycle and trajectory-level
//! category voting.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::assignment::min_cost_assignment;
use crate::data::VideoSequence;
use crate::error::{Error, Result};
use crate::geometry::{nms_indices, BoundingBox};
use crate::numeric::{normalized, rows_to_matrix};
use crate::prompt::{classify, ClassEmbeddingBank, FusionBetas};
use crate::ssl::AssociationHead;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingStrategy {
    Greedy,
    Hungarian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub memory_frames: usize,
    pub match_threshold: f64,
    pub new_track_confidence: f64,
    pub momentum: f64,
    pub bisoftmax_temperature: f64,
    pub nms_iou: f64,
    pub matching: MatchingStrategy,
    pub fusion: FusionBetas,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            memory_frames: 10,
            match_threshold: 0.35,
            new_track_confidence: 0.5,
            momentum: 0.8,
            bisoftmax_temperature: 1.0,
            nms_iou: 0.5,
            matching: MatchingStrategy::Greedy,
            fusion: FusionBetas::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1]".into()));
        }
        if !(self.bisoftmax_temperature > 0.0) {
            return Err(Error::InvalidConfig("bisoftmax_temperature must be > 0".into()));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::InvalidConfig("nms_iou must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u64,
    /// Unit-length running appearance embedding.
    pub embedding: Vec<f64>,
    pub last_box: BoundingBox,
    /// Frames since the last match.
    pub age: usize,
    pub class_votes: BTreeMap<usize, usize>,
    pub confidence: f64,
}

/// One detection as seen by the tracker.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackInput {
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub embedding: Vec<f64>,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameAssignment {
    /// Track id per detection; `None` for discarded detections.
    pub assignments: Vec<Option<u64>>,
    pub new_tracks: Vec<u64>,
    pub dropped_tracks: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub active_tracks: Vec<Track>,
    pub config: TrackerConfig,
    pub next_id: u64,
}

/// `½ (row-softmax + column-softmax)` of the dot products.
pub fn bisoftmax_similarity(tracks: &DMatrix<f64>, dets: &DMatrix<f64>, temperature: f64) -> Result<DMatrix<f64>> {
    if tracks.nrows() == 0 || dets.nrows() == 0 {
        return Ok(DMatrix::zeros(tracks.nrows(), dets.nrows()));
    }
    if tracks.ncols() != dets.ncols() {
        return Err(Error::dims("embedding dimension", tracks.ncols(), dets.ncols()));
    }
    let logits = (tracks * dets.transpose()) / temperature;
    let exp_rows = softmax_rows(&logits);
    let exp_cols = softmax_rows(&logits.transpose()).transpose();
    Ok((exp_rows + exp_cols) * 0.5)
}

fn softmax_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    crate::ssl::row_softmax(m, 1.0)
}

/// Cosine of unit-row matrices.
pub fn cosine_similarity(tracks: &DMatrix<f64>, dets: &DMatrix<f64>) -> DMatrix<f64> {
    tracks * dets.transpose()
}

/// Mean of the bi-softmax score and cosine remapped to `[0, 1]`.
pub fn combined_similarity(bis: &DMatrix<f64>, cos: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if bis.shape() != cos.shape() {
        return Err(Error::dims("similarity shape", bis.len(), cos.len()));
    }
    Ok(bis.zip_map(cos, |b, c| 0.5 * (b + 0.5 * (1.0 + c))))
}

/// `normalize(m · old + (1 − m) · new)`; keeps the old embedding when the
/// mix vanishes.
pub fn update_embedding(track: &mut Track, det_embedding: &[f64], momentum: f64) {
    let mixed: Vec<f64> = track
        .embedding
        .iter()
        .zip(det_embedding)
        .map(|(o, n)| momentum * o + (1.0 - momentum) * n)
        .collect();
    if let Some(v) = normalized(&mixed) {
        track.embedding = v;
    }
}

/// Most voted category, lowest id on ties.
pub fn vote_category(votes: &BTreeMap<usize, usize>) -> Result<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (&class, &count) in votes {
        if count > 0 && best.is_none_or(|(_, c)| count > c) {
            best = Some((class, count));
        }
    }
    best.map(|(c, _)| c).ok_or(Error::NoVotes)
}

pub fn vote_trajectory_category(track: &Track) -> Result<usize> {
    vote_category(&track.class_votes)
}

impl TrackerState {
    pub fn new(config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            active_tracks: Vec::new(),
            config,
            next_id: 0,
        })
    }

    /// Score matrix `tracks x detections`.
    pub fn similarity(&self, dets: &[TrackInput]) -> Result<DMatrix<f64>> {
        if self.active_tracks.is_empty() || dets.is_empty() {
            return Ok(DMatrix::zeros(self.active_tracks.len(), dets.len()));
        }
        let dim = self.active_tracks[0].embedding.len();
        let t = rows_to_matrix(
            &self.active_tracks.iter().map(|t| t.embedding.clone()).collect::<Vec<_>>(),
            dim,
        );
        let d = rows_to_matrix(&dets.iter().map(|d| d.embedding.clone()).collect::<Vec<_>>(), dim);
        let bis = bisoftmax_similarity(&t, &d, self.config.bisoftmax_temperature)?;
        combined_similarity(&bis, &cosine_similarity(&t, &d))
    }

    fn match_pairs(&self, scores: &DMatrix<f64>) -> Vec<(usize, usize)> {
        let thr = self.config.match_threshold;
        match self.config.matching {
            MatchingStrategy::Greedy => {
                let mut cands: Vec<(f64, usize, usize)> = Vec::new();
                for i in 0..scores.nrows() {
                    for j in 0..scores.ncols() {
                        if scores[(i, j)] > thr {
                            cands.push((scores[(i, j)], i, j));
                        }
                    }
                }
                cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
                let mut track_used = vec![false; scores.nrows()];
                let mut det_used = vec![false; scores.ncols()];
                let mut out = Vec::new();
                for (_, i, j) in cands {
                    if !track_used[i] && !det_used[j] {
                        track_used[i] = true;
                        det_used[j] = true;
                        out.push((i, j));
                    }
                }
                out
            }
            MatchingStrategy::Hungarian => {
                let cost = scores.map(|s| if s > thr { -s } else { 0.0 });
                min_cost_assignment(&cost)
                    .into_iter()
                    .enumerate()
                    .filter_map(|(i, j)| j.map(|j| (i, j)))
                    .filter(|&(i, j)| scores[(i, j)] > thr)
                    .collect()
            }
        }
    }

    /// Associates one frame of (already NMS-filtered) detections.
    pub fn associate_frame(&mut self, dets: &[TrackInput]) -> Result<FrameAssignment> {
        let dets: Vec<TrackInput> = dets
            .iter()
            .map(|d| {
                let embedding = normalized(&d.embedding)
                    .ok_or_else(|| Error::InvalidInput("zero detection embedding".into()))?;
                Ok(TrackInput {
                    embedding,
                    ..d.clone()
                })
            })
            .collect::<Result<_>>()?;
        if let (Some(t), Some(d)) = (self.active_tracks.first(), dets.first()) {
            if t.embedding.len() != d.embedding.len() {
                return Err(Error::dims("detection embedding", t.embedding.len(), d.embedding.len()));
            }
        }

        let scores = self.similarity(&dets)?;
        let pairs = self.match_pairs(&scores);
        let mut out = FrameAssignment {
            assignments: vec![None; dets.len()],
            ..FrameAssignment::default()
        };
        let mut matched_track = vec![false; self.active_tracks.len()];
        let momentum = self.config.momentum;
        for (ti, di) in pairs {
            let det = &dets[di];
            let track = &mut self.active_tracks[ti];
            update_embedding(track, &det.embedding, momentum);
            track.last_box = det.bbox;
            track.age = 0;
            track.confidence = det.confidence;
            *track.class_votes.entry(det.class_id).or_default() += 1;
            matched_track[ti] = true;
            out.assignments[di] = Some(track.id);
        }

        let mut survivors = Vec::with_capacity(self.active_tracks.len());
        for (track, matched) in self.active_tracks.drain(..).zip(matched_track) {
            let mut track = track;
            if !matched {
                track.age += 1;
            }
            if track.age > self.config.memory_frames {
                out.dropped_tracks.push(track.id);
            } else {
                survivors.push(track);
            }
        }
        self.active_tracks = survivors;

        for (di, det) in dets.iter().enumerate() {
            if out.assignments[di].is_some() || det.confidence <= self.config.new_track_confidence {
                continue;
            }
            let id = self.next_id;
            self.next_id += 1;
            self.active_tracks.push(Track {
                id,
                embedding: det.embedding.clone(),
                last_box: det.bbox,
                age: 0,
                class_votes: BTreeMap::from([(det.class_id, 1)]),
                confidence: det.confidence,
            });
            out.assignments[di] = Some(id);
            out.new_tracks.push(id);
        }
        Ok(out)
    }
}

/// One output row per (frame, track).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRow {
    pub frame: usize,
    pub track_id: u64,
    pub class_id: usize,
    pub bbox: BoundingBox,
    pub confidence: f64,
}

/// Runs NMS, embedding, classification and association over a sequence,
/// then relabels every row with its trajectory's voted category.
pub fn track_sequence(
    seq: &VideoSequence,
    head: &AssociationHead,
    bank: &ClassEmbeddingBank,
    config: &TrackerConfig,
) -> Result<Vec<TrackRow>> {
    let mut state = TrackerState::new(*config)?;
    let mut rows = Vec::new();
    let mut votes: BTreeMap<u64, BTreeMap<usize, usize>> = BTreeMap::new();
    for frame in &seq.frames {
        let kept = nms_indices(&frame.detections, config.nms_iou);
        let inputs: Vec<TrackInput> = kept
            .iter()
            .map(|&i| {
                let d = &frame.detections[i];
                let embedding = head.embed_one(&d.raw_feature)?;
                let (class_id, _) = classify(d, bank, config.fusion)?;
                Ok(TrackInput {
                    bbox: d.bbox,
                    confidence: d.confidence,
                    embedding,
                    class_id,
                })
            })
            .collect::<Result<_>>()?;
        let result = state.associate_frame(&inputs)?;
        for (input, id) in inputs.iter().zip(&result.assignments) {
            if let Some(id) = id {
                *votes.entry(*id).or_default().entry(input.class_id).or_default() += 1;
                rows.push(TrackRow {
                    frame: frame.frame_index,
                    track_id: *id,
                    class_id: input.class_id,
                    bbox: input.bbox,
                    confidence: input.confidence,
                });
            }
        }
    }
    for row in &mut rows {
        row.class_id = vote_category(&votes[&row.track_id])?;
    }
    rows.sort_by(|a, b| a.frame.cmp(&b.frame).then(a.track_id.cmp(&b.track_id)));
    Ok(rows)
}

pub const TRACK_CSV_HEADER: &str = "frame,track_id,class_id,x,y,w,h,conf";

pub fn write_track_csv(path: &Path, rows: &[TrackRow]) -> Result<()> {
    let mut out = String::from(TRACK_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.frame, r.track_id, r.class_id, r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h, r.confidence
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    frame: usize,
    track_id: u64,
    class_id: usize,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    conf: f64,
}

/// Reads a track CSV, reporting the 1-based line of every malformed row.
pub fn read_track_csv(path: &Path) -> Result<Vec<TrackRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("{other:?}")),
    })?;
    let mut rows = Vec::new();
    let mut bad = Vec::new();
    for (i, rec) in reader.deserialize::<CsvRow>().enumerate() {
        let line = i + 2;
        match rec {
            Ok(r) => match BoundingBox::new(r.x, r.y, r.w, r.h) {
                Ok(bbox) if (0.0..=1.0).contains(&r.conf) => rows.push(TrackRow {
                    frame: r.frame,
                    track_id: r.track_id,
                    class_id: r.class_id,
                    bbox,
                    confidence: r.conf,
                }),
                _ => bad.push(line),
            },
            Err(_) => bad.push(line),
        }
    }
    if bad.is_empty() {
        Ok(rows)
    } else {
        Err(Error::Malformed {
            path: path.to_path_buf(),
            lines: bad,
        })
    }
}
