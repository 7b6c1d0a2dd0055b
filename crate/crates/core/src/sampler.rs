//! Long/short-interval training-sequence sampling and the category clusters
//! that restrict consistency learning to objects of one kind.

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingPlan {
    pub segment_length: usize,
    pub sub_min: usize,
    pub sub_max: usize,
    /// Upper bound on the number of frames in one sampled sequence.
    pub frames_per_sequence: usize,
    pub seed: u64,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self {
            segment_length: 24,
            sub_min: 2,
            sub_max: 8,
            frames_per_sequence: 12,
            seed: 0,
        }
    }
}

impl SamplingPlan {
    pub fn validate(&self) -> Result<()> {
        if self.segment_length < 2 {
            return Err(Error::InvalidConfig("segment_length must be > 1".into()));
        }
        if self.sub_min < 2 || self.sub_max < self.sub_min || self.sub_max > self.segment_length {
            return Err(Error::InvalidConfig(format!(
                "sub-segment range ({}, {}) must satisfy 2 <= min <= max <= segment_length",
                self.sub_min, self.sub_max
            )));
        }
        if self.frames_per_sequence < 3 {
            return Err(Error::InvalidConfig("frames_per_sequence must be >= 3".into()));
        }
        Ok(())
    }
}

/// Consecutive segments of length `segment_length`; a trailing remainder of
/// fewer than two frames is merged into the previous segment.
pub fn split_segments(video_length: usize, segment_length: usize) -> Vec<Range<usize>> {
    let segment_length = segment_length.max(2);
    let mut out: Vec<Range<usize>> = Vec::new();
    let mut start = 0;
    while start < video_length {
        let end = (start + segment_length).min(video_length);
        if end - start < 2 {
            if let Some(last) = out.last_mut() {
                last.end = end;
                break;
            }
        }
        out.push(start..end);
        start = end;
    }
    out
}

/// One random contiguous sub-segment per chosen segment, in temporal order.
///
/// When the segments cannot all contribute within `frames_per_sequence`, a
/// random subset of `frames_per_sequence / sub_min` segments is used and the
/// sub-segment lengths are capped so that the total stays within the bound.
pub fn sample_sub_segments(
    segments: &[Range<usize>],
    plan: &SamplingPlan,
    draw: u64,
) -> Vec<Range<usize>> {
    if segments.is_empty() {
        return Vec::new();
    }
    let mut rng = rng_for(plan.seed, "long-short-sampling", draw);
    let budget = plan.frames_per_sequence.max(plan.sub_min);
    let used = segments.len().min(budget / plan.sub_min).max(1);
    let mut chosen: Vec<usize> = if used < segments.len() {
        sample(&mut rng, segments.len(), used).into_vec()
    } else {
        (0..segments.len()).collect()
    };
    chosen.sort_unstable();
    let per_segment = budget / used;
    chosen
        .into_iter()
        .map(|s| {
            let seg = &segments[s];
            let len = seg.end - seg.start;
            let hi = plan.sub_max.min(len).min(per_segment).max(1);
            let lo = plan.sub_min.min(hi);
            let sub_len = rng.random_range(lo..=hi);
            let offset = rng.random_range(0..=len - sub_len);
            seg.start + offset..seg.start + offset + sub_len
        })
        .collect()
}

/// Frame indices of the concatenated sub-segments, strictly increasing.
pub fn sample_training_sequence(segments: &[Range<usize>], plan: &SamplingPlan, draw: u64) -> Vec<usize> {
    sample_sub_segments(segments, plan, draw)
        .into_iter()
        .flatten()
        .collect()
}

pub type FramePair = (usize, usize);
pub type FrameTriple = (usize, usize, usize);

/// All unordered pairs and triples of `0..n` in lexicographic order.
pub fn enumerate_groups(n: usize) -> (Vec<FramePair>, Vec<FrameTriple>) {
    let mut pairs = Vec::new();
    let mut triples = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((i, j));
            for k in j + 1..n {
                triples.push((i, j, k));
            }
        }
    }
    (pairs, triples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    /// `k x D` centroids.
    pub centroids: DMatrix<f64>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after each Lloyd iteration.
    pub cost_history: Vec<f64>,
}

impl ClusterModel {
    pub fn cost(&self) -> f64 {
        self.cost_history.last().copied().unwrap_or(0.0)
    }
}

fn sq_dist(a: &[f64], b: impl Iterator<Item = f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &DMatrix<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.nrows() {
        let d = sq_dist(point, centroids.row(c).iter().copied());
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's k-means from k-means++ seeding. Empty clusters take the point
/// farthest from its current centroid.
pub fn kmeans_cluster(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<ClusterModel> {
    let n = points.len();
    if k == 0 || n < k {
        return Err(Error::TooFewPoints { points: n, k });
    }
    let dim = points[0].len();
    if let Some(bad) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::dims("cluster feature", dim, bad.len()));
    }
    let mut rng = rng_for(seed, "kmeans++", 0);

    let mut centroids = DMatrix::zeros(k, dim);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(&points[first]);
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, points[first].iter().copied()))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // All remaining points coincide with a centroid.
            (0..n).find(|i| !(0..c).any(|j| centroids.row(j).iter().eq(points[*i].iter()))).unwrap_or(c)
        };
        centroids.row_mut(c).copy_from_slice(&points[pick]);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points[pick].iter().copied()));
        }
    }

    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut cost_history = Vec::new();
    for iter in 0..max_iter.max(1) {
        if iter > 0 {
            let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
            if next == assignments {
                break;
            }
            assignments = next;
        }
        repair_empty(points, &mut centroids, &mut assignments);
        update_centroids(points, &mut centroids, &assignments);
        cost_history.push(total_cost(points, &centroids, &assignments));
    }
    Ok(ClusterModel {
        k,
        centroids,
        assignments,
        cost_history,
    })
}

fn repair_empty(points: &[Vec<f64>], centroids: &mut DMatrix<f64>, assignments: &mut [usize]) {
    let k = centroids.nrows();
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let far = (0..points.len())
            .filter(|&i| sizes[assignments[i]] > 1)
            .max_by(|&i, &j| {
                let di = sq_dist(&points[i], centroids.row(assignments[i]).iter().copied());
                let dj = sq_dist(&points[j], centroids.row(assignments[j]).iter().copied());
                di.total_cmp(&dj).then(j.cmp(&i))
            });
        let Some(far) = far else { return };
        assignments[far] = empty;
        centroids.row_mut(empty).copy_from_slice(&points[far]);
    }
}

fn update_centroids(points: &[Vec<f64>], centroids: &mut DMatrix<f64>, assignments: &[usize]) {
    let mut sums = DMatrix::zeros(centroids.nrows(), centroids.ncols());
    let mut counts = vec![0usize; centroids.nrows()];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (d, v) in p.iter().enumerate() {
            sums[(a, d)] += v;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            let mean = sums.row(c) / count as f64;
            centroids.set_row(c, &mean);
        }
    }
}

fn total_cost(points: &[Vec<f64>], centroids: &DMatrix<f64>, assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, centroids.row(a).iter().copied()))
        .sum()
}

/// Members of one cluster in one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMembers {
    /// Position of the frame in the sampled sequence.
    pub frame: usize,
    /// Detection indices within that frame.
    pub objects: Vec<usize>,
}

/// Splits each frame's detections by cluster. `assignments` run over frames
/// in order, detections in order within a frame; frames without members are
/// omitted. Every detection lands in exactly one cluster's lists.
pub fn category_partition(
    frame_sizes: &[usize],
    assignments: &[usize],
) -> Result<BTreeMap<usize, Vec<FrameMembers>>> {
    let total: usize = frame_sizes.iter().sum();
    if total != assignments.len() {
        return Err(Error::dims("cluster assignments", total, assignments.len()));
    }
    let mut groups: BTreeMap<usize, Vec<FrameMembers>> = BTreeMap::new();
    let mut cursor = 0;
    for (frame, &size) in frame_sizes.iter().enumerate() {
        for obj in 0..size {
            let cluster = assignments[cursor + obj];
            let lists = groups.entry(cluster).or_default();
            match lists.last_mut() {
                Some(last) if last.frame == frame => last.objects.push(obj),
                _ => lists.push(FrameMembers {
                    frame,
                    objects: vec![obj],
                }),
            }
        }
        cursor += size;
    }
    Ok(groups)
}

/// [`category_partition`] without the clusters seen in fewer than two
/// frames, which cannot form frame pairs.
pub fn category_groups(frame_sizes: &[usize], assignments: &[usize]) -> Result<BTreeMap<usize, Vec<FrameMembers>>> {
    let mut groups = category_partition(frame_sizes, assignments)?;
    groups.retain(|_, frames| frames.len() >= 2);
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn split_examples() {
        assert_eq!(split_segments(96, 24), vec![0..24, 24..48, 48..72, 72..96]);
        assert_eq!(split_segments(25, 24), vec![0..25]);
        assert_eq!(split_segments(10, 24), vec![0..10]);
        assert_eq!(split_segments(50, 24), vec![0..24, 24..48, 48..50]);
        assert_eq!(split_segments(49, 24), vec![0..24, 24..49]);
    }

    #[test]
    fn single_segment_gives_consecutive_frames() {
        let plan = SamplingPlan::default();
        let seq = sample_training_sequence(&split_segments(20, 24), &plan, 0);
        assert!(seq.len() >= 2);
        assert!(seq.windows(2).all(|w| w[1] == w[0] + 1));
    }

    #[test]
    fn four_segments_respect_bounds() {
        let plan = SamplingPlan {
            sub_min: 2,
            sub_max: 6,
            frames_per_sequence: 24,
            ..SamplingPlan::default()
        };
        let segs = split_segments(96, 24);
        for draw in 0..200 {
            let subs = sample_sub_segments(&segs, &plan, draw);
            assert_eq!(subs.len(), 4);
            let seq: Vec<usize> = subs.iter().cloned().flatten().collect();
            assert!((8..=24).contains(&seq.len()));
            assert!(seq.windows(2).all(|w| w[0] < w[1]));
            for (s, seg) in subs.iter().zip(&segs) {
                assert!(s.start >= seg.start && s.end <= seg.end);
                assert!((2..=6).contains(&s.len()));
            }
        }
    }

    #[test]
    fn frame_cap_limits_sequence_length() {
        let plan = SamplingPlan {
            frames_per_sequence: 9,
            ..SamplingPlan::default()
        };
        let segs = split_segments(240, 24);
        for draw in 0..100 {
            let subs = sample_sub_segments(&segs, &plan, draw);
            let total: usize = subs.iter().map(|s| s.len()).sum();
            assert!(total <= 9 && subs.len() == 4, "{subs:?}");
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let plan = SamplingPlan::default();
        let segs = split_segments(96, 24);
        assert_eq!(
            sample_training_sequence(&segs, &plan, 3),
            sample_training_sequence(&segs, &plan, 3)
        );
    }

    #[test]
    fn group_counts() {
        for (n, p, t) in [(4, 6, 4), (3, 3, 1), (5, 10, 10), (2, 1, 0), (1, 0, 0)] {
            let (pairs, triples) = enumerate_groups(n);
            assert_eq!((pairs.len(), triples.len()), (p, t));
        }
        let (pairs, triples) = enumerate_groups(4);
        assert_eq!(pairs[0], (0, 1));
        assert_eq!(triples, vec![(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]);
    }

    /// Exhaustive optimal 2-clustering cost.
    fn brute_force_two_clusters(points: &[Vec<f64>]) -> (f64, Vec<usize>) {
        let n = points.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1..(1u32 << n) - 1 {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let mut cost = 0.0;
            for c in 0..2 {
                let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, l)| **l == c).map(|(p, _)| p).collect();
                let d = points[0].len();
                let mean: Vec<f64> = (0..d).map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64).collect();
                cost += members.iter().map(|p| sq_dist(p, mean.iter().copied())).sum::<f64>();
            }
            if cost < best.0 {
                best = (cost, labels);
            }
        }
        best
    }

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        a.iter().zip(b).all(|(x, y)| (a[0] == *x) == (b[0] == *y))
    }

    #[test]
    fn two_blobs_match_brute_force() {
        let mut rng = rng_for(1, "blobs", 0);
        let points: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let base = if i % 2 == 0 { 0.0 } else { 10.0 };
                vec![base + rng.random_range(-0.5..0.5), base + rng.random_range(-0.5..0.5)]
            })
            .collect();
        let (oracle_cost, oracle_labels) = brute_force_two_clusters(&points);
        let truth: Vec<usize> = (0..12).map(|i| i % 2).collect();
        assert!(same_partition(&oracle_labels, &truth));
        let model = kmeans_cluster(&points, 2, 7, 50).unwrap();
        assert!(same_partition(&model.assignments, &truth));
        assert!((model.cost() - oracle_cost).abs() < 1e-9);
    }

    #[test]
    fn k_one_is_the_mean() {
        let points = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, -1.0]];
        let model = kmeans_cluster(&points, 1, 0, 10).unwrap();
        assert!((model.centroids[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((model.centroids[(0, 1)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_equal_n_has_zero_cost() {
        let points = vec![vec![0.0], vec![1.0], vec![5.0], vec![9.0]];
        let model = kmeans_cluster(&points, 4, 3, 10).unwrap();
        assert_eq!(model.cost(), 0.0);
        let mut a = model.assignments.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3]);
        assert!(matches!(kmeans_cluster(&points, 5, 0, 10), Err(Error::TooFewPoints { .. })));
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let points = vec![vec![1.0], vec![1.0], vec![1.0], vec![2.0]];
        let model = kmeans_cluster(&points, 3, 0, 10).unwrap();
        let mut seen = model.assignments.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn category_group_examples() {
        let groups = category_groups(&[2, 0, 3], &[0; 5]).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(
            groups[&0],
            vec![FrameMembers { frame: 0, objects: vec![0, 1] }, FrameMembers { frame: 2, objects: vec![0, 1, 2] }]
        );
        let groups = category_groups(&[2, 2], &[0, 1, 0, 0]).unwrap();
        assert!(!groups.contains_key(&1));
        assert!(category_groups(&[], &[]).unwrap().is_empty());
        assert!(category_groups(&[2], &[0]).is_err());
    }

    proptest! {
        #[test]
        fn segments_partition_the_video(len in 1usize..300, l in 2usize..40) {
            let segs = split_segments(len, l);
            prop_assert_eq!(segs[0].start, 0);
            prop_assert_eq!(segs.last().unwrap().end, len);
            for w in segs.windows(2) {
                prop_assert_eq!(w[0].end, w[1].start);
            }
            for s in &segs {
                prop_assert!(s.len() <= l + 1);
                prop_assert!(s.len() >= 2 || segs.len() == 1);
            }
        }

        #[test]
        fn sequences_increase(len in 2usize..200, seed in 0u64..1000, draw in 0u64..50) {
            let plan = SamplingPlan { seed, ..SamplingPlan::default() };
            let seq = sample_training_sequence(&split_segments(len, plan.segment_length), &plan, draw);
            prop_assert!(seq.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(seq.len() <= plan.frames_per_sequence);
            prop_assert!(seq.iter().all(|&f| f < len));
        }

        #[test]
        fn kmeans_cost_never_increases(raw in prop::collection::vec(-5.0..5.0f64, 20..60), k in 1usize..5, seed in 0u64..100) {
            let points: Vec<Vec<f64>> = raw.chunks_exact(2).map(|c| c.to_vec()).collect();
            prop_assume!(points.len() >= k);
            let model = kmeans_cluster(&points, k, seed, 50).unwrap();
            for w in model.cost_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
            prop_assert_eq!(model.assignments.len(), points.len());
            prop_assert!(model.assignments.iter().all(|&a| a < k));
        }

        #[test]
        fn partition_covers_every_detection_once(sizes in prop::collection::vec(0usize..5, 0..6), k in 1usize..4, seed in 0u64..50) {
            let total: usize = sizes.iter().sum();
            let mut rng = rng_for(seed, "groups", 0);
            let assignments: Vec<usize> = (0..total).map(|_| rng.random_range(0..k)).collect();
            let parts = category_partition(&sizes, &assignments).unwrap();
            let mut seen: Vec<Vec<usize>> = vec![Vec::new(); sizes.len()];
            for frames in parts.values() {
                for fm in frames {
                    prop_assert!(!fm.objects.is_empty());
                    seen[fm.frame].extend(&fm.objects);
                }
            }
            for (f, s) in seen.iter_mut().enumerate() {
                s.sort_unstable();
                prop_assert_eq!(s.clone(), (0..sizes[f]).collect::<Vec<_>>());
            }
            let groups = category_groups(&sizes, &assignments).unwrap();
            for (c, frames) in &groups {
                prop_assert!(frames.len() >= 2);
                prop_assert_eq!(frames, &parts[c]);
            }
        }
    }
}
