//! Pairwise and triplet consistency matrices, the margin loss, the IoU
//! assignment targets and the analytic gradient of a batch loss.
//!
//! ```text
//! cargo run --example consistency_losses
//! ```

use nalgebra::DMatrix;
use ovmot::geometry::{iou_matrix, BoundingBox};
use ovmot::ssl::{
    assignment_matrix, batch_loss, inter_loss, intra_loss, loss_gradient, margin_loss, pair_consistency,
    row_softmax, similarity_matrix, trip_consistency, AssociationHead, ClusterSample, FeatureMatrix, FrameSample,
    SslConfig, TrainingBatch,
};

fn features(rows: &[[f64; 3]]) -> FeatureMatrix {
    FeatureMatrix::normalized(DMatrix::from_fn(rows.len(), 3, |r, c| rows[r][c]))
}

fn main() -> ovmot::Result<()> {
    let fi = features(&[[1.0, 0.1, 0.0], [0.0, 1.0, 0.2], [0.1, 0.0, 1.0]]);
    let fj = features(&[[0.9, 0.2, 0.1], [0.1, 0.9, 0.1], [0.2, 0.1, 0.9]]);
    let fk = features(&[[0.8, 0.3, 0.0], [0.0, 0.8, 0.4], [0.3, 0.0, 0.8]]);
    let tau = 10.0;

    let e_pair = pair_consistency(&fi, &fj, tau)?;
    let e_trip = trip_consistency(&fi, &fj, &fk, tau)?;
    println!("E_pair:{e_pair:.4}");
    println!("E_trip:{e_trip:.4}");
    println!("margin loss on E_pair {:.6}, on E_trip {:.6}", margin_loss(&e_pair, 0.5), margin_loss(&e_trip, 0.5));
    let cfg = SslConfig {
        adaptive_tau: false,
        ..SslConfig::default()
    };
    println!("intra loss {:.6}", intra_loss(&fi, &fj, &fk, &cfg)?);

    let boxes_i: Vec<BoundingBox> = [10.0, 60.0, 110.0]
        .iter()
        .map(|&x| BoundingBox::new(x, 20.0, 30.0, 30.0))
        .collect::<ovmot::Result<_>>()?;
    let boxes_j: Vec<BoundingBox> = boxes_i.iter().map(|b| b.translated(0.5, 0.5)).collect();
    let a = assignment_matrix(&iou_matrix(&boxes_i, &boxes_j), cfg.iou_thres);
    let s = row_softmax(&similarity_matrix(&fi, &fj)?, tau);
    println!("assignment targets:{a}");
    println!("inter loss {:.6}", inter_loss(&s, &a)?);

    let frame = |index: usize, rows: &FeatureMatrix, boxes: &[BoundingBox]| FrameSample {
        frame_index: index,
        run: 0,
        raw: rows.matrix().clone(),
        boxes: boxes.to_vec(),
    };
    let batch = TrainingBatch {
        clusters: vec![ClusterSample {
            cluster: 0,
            frames: vec![frame(0, &fi, &boxes_i), frame(1, &fj, &boxes_j), frame(2, &fk, &boxes_j)],
        }],
    };
    let head = AssociationHead::new(DMatrix::identity(3, 3), 0.1)?;
    let (loss, grad) = loss_gradient(&batch, &head, &cfg)?;
    println!(
        "batch: intra {:.6} inter {:.6} total {:.6} ({} pairs, {} triples)",
        loss.intra, loss.inter, loss.total, loss.pairs, loss.triples
    );
    let stepped = head.sgd_step(&grad)?;
    println!(
        "after one step: total {:.6}, gradient norm {:.6}",
        batch_loss(&batch, &stepped, &cfg)?.total,
        grad.norm()
    );
    Ok(())
}
