//! Tracking-state prompts, attention weights, the piecewise schedule, the
//! weighted text loss and base/novel probability fusion on a generated
//! scenario with occlusions.
//!
//! ```text
//! cargo run --release --example prompt_attention
//! ```

use ovmot::prompt::{
    attention_weight, candidate_weights, classify, piecewise_reweight, weighted_text_loss, FusionBetas,
    PiecewiseSchedule,
};
use ovmot::synth::{generate_scenario, OcclusionConfig, ScenarioConfig};

fn main() -> ovmot::Result<()> {
    let mut config = ScenarioConfig {
        name: "occlusion-demo".into(),
        num_frames: 40,
        ..ScenarioConfig::default()
    };
    config.occlusion = OcclusionConfig {
        probability: 0.3,
        ..OcclusionConfig::default()
    };
    config.detector.false_positive_rate = 0.5;
    let scenario = generate_scenario(&config)?;
    let lambda = scenario.class_bank.temperature;
    let schedule = PiecewiseSchedule::default();

    let (mut clean, mut occluded) = (Vec::new(), Vec::new());
    for (frame, facts) in scenario.sequence.frames.iter().zip(&scenario.truth) {
        for (det, fact) in frame.detections.iter().zip(facts) {
            let w = attention_weight(&det.text_embedding, &scenario.prompts, lambda)?;
            if fact.occluded {
                occluded.push(w);
            } else {
                clean.push(w);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    println!("clean detections:    {:>4}  mean weight {:.4}", clean.len(), mean(&clean));
    println!("occluded detections: {:>4}  mean weight {:.4}", occluded.len(), mean(&occluded));
    for w in [0.1, 0.25, 0.45, 0.7, 0.95] {
        println!("piecewise({w:.2}) = {:.2}", piecewise_reweight(w, &schedule));
    }

    let frame: Vec<_> = scenario.sequence.frames.iter().flat_map(|f| f.detections.clone()).collect();
    let frame = &frame;
    let raw = candidate_weights(frame, &scenario.prompts, lambda, None)?;
    let banded = candidate_weights(frame, &scenario.prompts, lambda, Some(&schedule))?;
    let uniform = vec![1.0; frame.len()];
    println!(
        "text loss over all candidates: uniform {:.3e}, attention {:.3e}, piecewise {:.3e}",
        weighted_text_loss(frame, &scenario.class_bank, &uniform)?,
        weighted_text_loss(frame, &scenario.class_bank, &raw)?,
        weighted_text_loss(frame, &scenario.class_bank, &banded)?
    );

    let mut correct = 0;
    let mut total = 0;
    for det in scenario.sequence.frames.iter().flat_map(|f| &f.detections) {
        let (class, _) = classify(det, &scenario.class_bank, FusionBetas::default())?;
        if let Some(label) = det.class_label {
            correct += usize::from(class == label);
            total += 1;
        }
    }
    println!("fused classification accuracy {correct}/{total}");
    Ok(())
}
