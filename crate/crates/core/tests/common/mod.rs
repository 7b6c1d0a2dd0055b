#![allow(dead_code)]

use nalgebra::DMatrix;
use ovmot::geometry::{iou, BoundingBox};
use ovmot::metrics::EvalBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `Σ_r max(0, max_{c≠r} E_rc − E_rr + m)` by direct enumeration.
pub fn margin_loss_oracle(e: &DMatrix<f64>, m: f64) -> f64 {
    let n = e.nrows();
    let mut total = 0.0;
    for r in 0..n {
        let mut others = Vec::new();
        for c in 0..e.ncols() {
            if c != r {
                others.push(e[(r, c)]);
            }
        }
        if others.is_empty() {
            continue;
        }
        let hardest = others.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let v = hardest - e[(r, r)] + m;
        if v > 0.0 {
            total += v;
        }
    }
    total
}

#[derive(Debug, Clone, Copy)]
pub struct OracleMetrics {
    pub loca: f64,
    pub clsa: f64,
    pub assoca: f64,
    pub teta: f64,
}

fn best_frame_matching(p: &[&EvalBox], g: &[&EvalBox], thr: f64) -> Vec<(usize, usize)> {
    fn go(
        i: usize,
        p: &[&EvalBox],
        g: &[&EvalBox],
        thr: f64,
        used: &mut Vec<bool>,
        cur: &mut Vec<(usize, usize)>,
        best: &mut (usize, f64, Vec<(usize, usize)>),
    ) {
        if i == p.len() {
            let sum: f64 = cur.iter().map(|&(a, b)| iou(&p[a].bbox, &g[b].bbox)).sum();
            if cur.len() > best.0 || (cur.len() == best.0 && sum > best.1) {
                *best = (cur.len(), sum, cur.clone());
            }
            return;
        }
        go(i + 1, p, g, thr, used, cur, best);
        for j in 0..g.len() {
            if !used[j] && iou(&p[i].bbox, &g[j].bbox) >= thr {
                used[j] = true;
                cur.push((i, j));
                go(i + 1, p, g, thr, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, f64::NEG_INFINITY, Vec::new());
    go(0, p, g, thr, &mut vec![false; g.len()], &mut Vec::new(), &mut best);
    best.2
}

/// Localization by exhaustive matching, then the classification and
/// association sets enumerated pair by pair.
pub fn metrics_oracle(pred: &[EvalBox], gt: &[EvalBox], thr: f64) -> OracleMetrics {
    let mut frames: Vec<usize> = pred.iter().chain(gt).map(|b| b.frame).collect();
    frames.sort_unstable();
    frames.dedup();
    let mut tpl: Vec<(EvalBox, EvalBox)> = Vec::new();
    let mut fp = 0usize;
    let mut fnl = 0usize;
    for f in frames {
        let p: Vec<&EvalBox> = pred.iter().filter(|b| b.frame == f).collect();
        let g: Vec<&EvalBox> = gt.iter().filter(|b| b.frame == f).collect();
        let m = best_frame_matching(&p, &g, thr);
        fp += p.len() - m.len();
        fnl += g.len() - m.len();
        tpl.extend(m.into_iter().map(|(a, b)| (*p[a], *g[b])));
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let loca = ratio(tpl.len(), tpl.len() + fp + fnl);

    let tpc: Vec<_> = tpl.iter().filter(|(p, g)| p.class_id == g.class_id).collect();
    let fpc: Vec<_> = tpl.iter().filter(|(p, g)| p.class_id != g.class_id).collect();
    let fnc: Vec<_> = tpl.iter().filter(|(p, g)| g.class_id != p.class_id).collect();
    let clsa = ratio(tpc.len(), tpc.len() + fpc.len() + fnc.len());

    let mut scores = Vec::new();
    for (bp, bg) in &tpl {
        let tpa: Vec<_> = tpl
            .iter()
            .filter(|(p, g)| p.track_id == bp.track_id && g.track_id == bg.track_id)
            .collect();
        let fpa: Vec<_> = tpl
            .iter()
            .filter(|(p, g)| p.track_id == bp.track_id && g.track_id != bg.track_id)
            .collect();
        let fna: Vec<_> = tpl
            .iter()
            .filter(|(p, g)| g.track_id == bg.track_id && p.track_id != bp.track_id)
            .collect();
        scores.push(tpa.len() as f64 / (tpa.len() + fpa.len() + fna.len()) as f64);
    }
    let assoca = if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    };
    OracleMetrics {
        loca,
        clsa,
        assoca,
        teta: (loca + clsa + assoca) / 3.0,
    }
}

pub fn eval_box(frame: usize, id: u64, class: usize, x: f64, y: f64) -> EvalBox {
    EvalBox {
        frame,
        track_id: id,
        class_id: class,
        bbox: BoundingBox::new(x, y, 20.0, 20.0).unwrap(),
    }
}

/// One ground-truth track laid out on its own row so that tracks never
/// overlap, moving one pixel per frame.
pub fn gt_track(id: u64, class: usize, frames: std::ops::Range<usize>) -> Vec<EvalBox> {
    frames
        .map(|f| eval_box(f, id, class, 30.0 + f as f64, 40.0 + 60.0 * id as f64))
        .collect()
}

/// A prediction on top of a ground-truth box, shifted by `dx` pixels.
pub fn pred_on(g: &EvalBox, id: u64, class: usize, dx: f64) -> EvalBox {
    EvalBox {
        track_id: id,
        class_id: class,
        bbox: g.bbox.translated(dx, 0.0),
        frame: g.frame,
    }
}

pub struct Fixture {
    pub name: &'static str,
    pub pred: Vec<EvalBox>,
    pub gt: Vec<EvalBox>,
}

/// Hand-built fixtures, each with at most 4 tracks and 6 frames.
pub fn fixtures() -> Vec<Fixture> {
    let mut out = Vec::new();

    let gt: Vec<EvalBox> = (0..3).flat_map(|id| gt_track(id, id as usize % 2, 0..6)).collect();
    out.push(Fixture {
        name: "perfect",
        pred: gt.clone(),
        gt: gt.clone(),
    });

    let gt = gt_track(0, 0, 0..4);
    let pred = gt
        .iter()
        .enumerate()
        .map(|(i, g)| pred_on(g, if i < 2 { 10 } else { 11 }, 0, 0.5 * i as f64))
        .collect();
    out.push(Fixture {
        name: "fragmented",
        pred,
        gt,
    });

    let gt = gt_track(0, 1, 0..2);
    let pred = gt.iter().enumerate().map(|(i, g)| pred_on(g, i as u64, 1, 0.0)).collect();
    out.push(Fixture {
        name: "switch every frame",
        pred,
        gt,
    });

    let gt: Vec<EvalBox> = gt_track(0, 0, 0..6).into_iter().chain(gt_track(1, 1, 0..6)).collect();
    let pred = gt
        .iter()
        .map(|g| {
            let swapped = g.frame >= 3;
            let id = if (g.track_id == 0) != swapped { 5 } else { 6 };
            pred_on(g, id, g.class_id, 0.3 * g.frame as f64)
        })
        .collect();
    out.push(Fixture {
        name: "identity swap",
        pred,
        gt,
    });

    let gt: Vec<EvalBox> = gt_track(0, 0, 0..5).into_iter().chain(gt_track(1, 0, 1..6)).collect();
    let mut pred: Vec<EvalBox> = gt
        .iter()
        .filter(|g| !(g.track_id == 1 && g.frame % 2 == 0))
        .map(|g| pred_on(g, g.track_id + 20, 0, 1.0))
        .collect();
    pred.extend(gt_track(3, 1, 2..5).into_iter().map(|b| EvalBox { track_id: 99, ..b }));
    out.push(Fixture {
        name: "misses and false positives",
        pred,
        gt,
    });

    let gt: Vec<EvalBox> = (0..4).flat_map(|id| gt_track(id, id as usize, 0..3)).collect();
    let pred = gt
        .iter()
        .map(|g| pred_on(g, g.track_id, if g.frame == 1 { 3 - g.class_id } else { g.class_id }, 2.0))
        .collect();
    out.push(Fixture {
        name: "class errors",
        pred,
        gt,
    });

    let gt: Vec<EvalBox> = gt_track(0, 0, 0..3).into_iter().chain(gt_track(1, 1, 3..6)).collect();
    let pred = gt.iter().map(|g| pred_on(g, 42, 0, 1.5)).collect();
    out.push(Fixture {
        name: "one prediction over two objects",
        pred,
        gt,
    });

    // p1 overlaps g1 best, but it is also the only prediction that can cover
    // g2, so taking the single best IoU first would lose a match.
    let g1 = eval_box(0, 0, 0, 51.0, 50.0);
    let g2 = eval_box(0, 1, 0, 45.0, 50.0);
    let p1 = eval_box(0, 7, 0, 50.0, 50.0);
    let p2 = eval_box(0, 8, 0, 56.0, 50.0);
    out.push(Fixture {
        name: "crossed overlaps",
        pred: vec![p1, p2],
        gt: vec![g1, g2],
    });

    out
}

/// Random fixtures within the same size bounds.
pub fn random_fixture(seed: u64) -> Fixture {
    let mut r = rng(seed);
    let tracks = r.random_range(1..=4u64);
    let frames = r.random_range(1..=6usize);
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    for id in 0..tracks {
        let class = r.random_range(0..3);
        let start = r.random_range(0..frames);
        for g in gt_track(id, class, start..frames) {
            if r.random_bool(0.85) {
                let pid = if r.random_bool(0.8) { id } else { r.random_range(10..13) };
                let pclass = if r.random_bool(0.8) { class } else { r.random_range(0..3) };
                pred.push(pred_on(&g, pid, pclass, r.random_range(-4.0..4.0)));
            }
            gt.push(g);
        }
    }
    if r.random_bool(0.5) {
        pred.push(eval_box(0, 77, 0, 400.0, 400.0));
    }
    Fixture {
        name: "random",
        pred,
        gt,
    }
}
