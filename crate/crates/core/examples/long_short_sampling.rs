//! Segmenting a video, drawing long-short-interval training sequences and
//! grouping detections into category clusters.
//!
//! ```text
//! cargo run --release --example long_short_sampling
//! ```

use ovmot::sampler::{
    category_groups, enumerate_groups, kmeans_cluster, sample_sub_segments, split_segments, SamplingPlan,
};
use ovmot::synth::{generate_scenario, ScenarioConfig};

fn main() -> ovmot::Result<()> {
    let scenario = generate_scenario(&ScenarioConfig::default())?;
    let seq = &scenario.sequence;
    let plan = SamplingPlan::default();
    let segments = split_segments(seq.frames.len(), plan.segment_length);
    println!("{} frames -> segments {:?}", seq.frames.len(), segments);

    for draw in 0..3 {
        let runs = sample_sub_segments(&segments, &plan, draw);
        let frames: Vec<usize> = runs.iter().cloned().flatten().collect();
        let (pairs, triples) = enumerate_groups(frames.len());
        println!(
            "draw {draw}: runs {runs:?} -> {} frames, {} pairs, {} triples",
            frames.len(),
            pairs.len(),
            triples.len()
        );
    }

    let runs = sample_sub_segments(&segments, &plan, 0);
    let frames: Vec<usize> = runs.into_iter().flatten().collect();
    let sizes: Vec<usize> = frames.iter().map(|&t| seq.frames[t].detections.len()).collect();
    let points: Vec<Vec<f64>> = frames
        .iter()
        .flat_map(|&t| seq.frames[t].detections.iter().map(|d| d.text_embedding.clone()))
        .collect();
    let model = kmeans_cluster(&points, scenario.class_bank.num_classes(), 1, 20)?;
    println!("k-means cost per iteration {:?}", model.cost_history);
    for (cluster, members) in category_groups(&sizes, &model.assignments)? {
        let objects: usize = members.iter().map(|m| m.objects.len()).sum();
        println!("cluster {cluster}: {objects} detections over {} frames", members.len());
    }
    Ok(())
}
