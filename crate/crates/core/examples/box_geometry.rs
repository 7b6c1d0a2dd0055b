//! IoU between center-format boxes and greedy non-maximum suppression.
//!
//! ```text
//! cargo run --example box_geometry
//! ```

use ovmot::data::Detection;
use ovmot::geometry::{iou, iou_matrix, nms_indices, BoundingBox};

fn detection(x: f64, y: f64, side: f64, conf: f64) -> ovmot::Result<Detection> {
    Detection::new(
        BoundingBox::new(x, y, side, side)?,
        conf,
        vec![1.0, 0.0],
        vec![1.0, 0.0],
        vec![0.0; 4],
        None,
    )
}

fn main() -> ovmot::Result<()> {
    let a = BoundingBox::new(50.0, 50.0, 40.0, 40.0)?;
    let b = a.translated(10.0, 0.0);
    let c = a.translated(60.0, 0.0);
    println!("IoU(a, a)            = {:.4}", iou(&a, &a));
    println!("IoU(a, shifted 10px) = {:.4}", iou(&a, &b));
    println!("IoU(a, disjoint)     = {:.4}", iou(&a, &c));
    println!("pairwise IoU matrix:\n{:.3}", iou_matrix(&[a, b, c], &[a, b, c]));

    let dets = vec![
        detection(100.0, 100.0, 30.0, 0.95)?,
        detection(104.0, 101.0, 30.0, 0.80)?,
        detection(200.0, 100.0, 30.0, 0.70)?,
        detection(202.0, 103.0, 30.0, 0.90)?,
    ];
    for thr in [0.3, 0.5, 0.9] {
        println!("NMS at {thr}: kept {:?}", nms_indices(&dets, thr));
    }
    Ok(())
}
