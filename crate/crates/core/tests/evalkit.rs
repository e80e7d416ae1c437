use dronedet::evalkit::{
    average_precision, coco_summary, parse_report_csv, pr_curve, report_csv, report_svg, EvalDet, EvalReport, GtBox,
    IOU_THRESHOLDS, MAX_DETS,
};
use dronedet::BBox;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gt(image: &str, x0: f64, y0: f64, x1: f64, y1: f64) -> GtBox<f64> {
    GtBox {
        image_id: image.into(),
        bbox: BBox::new(x0, y0, x1, y1),
    }
}

fn det(id: usize, image: &str, b: [f64; 4], score: f64) -> EvalDet<f64> {
    EvalDet {
        id,
        image_id: image.into(),
        bbox: BBox::new(b[0], b[1], b[2], b[3]),
        score,
    }
}

// ---- independent second implementation ----

fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let i = iw * ih;
    let u = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - i;
    if u <= 0.0 {
        0.0
    } else {
        (i / u).min(1.0)
    }
}

fn raw(b: &BBox<f64>) -> [f64; 4] {
    [b.x_min, b.y_min, b.x_max, b.y_max]
}

fn area(b: [f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

fn bucket_ok(bucket: usize, a: f64) -> bool {
    match bucket {
        0 => true,
        1 => a < 1024.0,
        2 => (1024.0..=9216.0).contains(&a),
        _ => a > 9216.0,
    }
}

/// Returns (ap, final recall) at one threshold and bucket.
fn brute(dets: &[EvalDet<f64>], gts: &[GtBox<f64>], t: f64, bucket: usize) -> (f64, f64) {
    let mut order: Vec<&EvalDet<f64>> = dets.iter().collect();
    order.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.id.cmp(&b.id)));
    let mut kept = Vec::new();
    for d in order {
        let already = kept.iter().filter(|k: &&&EvalDet<f64>| k.image_id == d.image_id).count();
        if already < MAX_DETS {
            kept.push(d);
        }
    }
    let npos = gts.iter().filter(|g| bucket_ok(bucket, area(raw(&g.bbox)))).count();
    let mut taken = vec![false; gts.len()];
    let mut flags: Vec<bool> = Vec::new();
    for d in kept {
        // key: in-range first, then IoU, then lowest index
        let mut best: Option<(bool, f64, usize)> = None;
        for (g, gg) in gts.iter().enumerate() {
            if taken[g] || gg.image_id != d.image_id {
                continue;
            }
            let v = box_iou(raw(&d.bbox), raw(&gg.bbox));
            if v < t {
                continue;
            }
            let inr = bucket_ok(bucket, area(raw(&gg.bbox)));
            let better = match best {
                None => true,
                Some((binr, bv, _)) => (inr && !binr) || (inr == binr && v > bv),
            };
            if better {
                best = Some((inr, v, g));
            }
        }
        match best {
            Some((inr, _, g)) => {
                taken[g] = true;
                if inr {
                    flags.push(true);
                }
            }
            None => {
                if bucket_ok(bucket, area(raw(&d.bbox))) {
                    flags.push(false);
                }
            }
        }
    }
    if npos == 0 {
        return (0.0, 0.0);
    }
    let mut pts = Vec::new();
    let mut tp = 0;
    for (k, f) in flags.iter().enumerate() {
        tp += *f as usize;
        pts.push((tp as f64 / npos as f64, tp as f64 / (k + 1) as f64));
    }
    let mut ap = 0.0;
    for s in 0..=100 {
        let level = s as f64 / 100.0;
        let best = pts
            .iter()
            .filter(|p| p.0 >= level)
            .map(|p| p.1)
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
        ap += best.unwrap_or(0.0);
    }
    (ap / 101.0, pts.last().map_or(0.0, |p| p.0))
}

fn brute_metrics(dets: &[EvalDet<f64>], gts: &[GtBox<f64>]) -> [f64; 12] {
    let sweep = |bucket: usize| -> Vec<(f64, f64)> { IOU_THRESHOLDS.iter().map(|&t| brute(dets, gts, t, bucket)).collect() };
    let avg = |v: &[(f64, f64)], ar: bool| v.iter().map(|p| if ar { p.1 } else { p.0 }).sum::<f64>() / v.len() as f64;
    let all = sweep(0);
    let (s, m, l) = (sweep(1), sweep(2), sweep(3));
    [
        avg(&all, false),
        all[0].0,
        all[5].0,
        avg(&s, false),
        avg(&m, false),
        avg(&l, false),
        avg(&all, true),
        all[0].1,
        all[5].1,
        avg(&s, true),
        avg(&m, true),
        avg(&l, true),
    ]
}

fn random_instance(rng: &mut impl Rng) -> (Vec<EvalDet<f64>>, Vec<GtBox<f64>>) {
    let images = ["i0", "i1", "i2"];
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for im in images.iter().take(rng.gen_range(1..=3)) {
        for _ in 0..rng.gen_range(0..=4) {
            let side = [8.0, 20.0, 40.0, 70.0, 120.0][rng.gen_range(0..5)] * rng.gen_range(0.8..1.25);
            let (x, y) = (rng.gen_range(0.0..300.0), rng.gen_range(0.0..300.0));
            let g = gt(im, x, y, x + side, y + side * rng.gen_range(0.6..1.4));
            // a few detections near each ground truth
            for _ in 0..rng.gen_range(0..3) {
                let j = side * 0.15;
                let b = raw(&g.bbox).map(|v| v + rng.gen_range(-j..j));
                let b = [b[0].min(b[2]), b[1].min(b[3]), b[0].max(b[2]), b[1].max(b[3])];
                let id = dets.len();
                dets.push(det(id, im, b, rng.gen_range(0..6) as f64 / 5.0));
            }
            gts.push(g);
        }
        for _ in 0..rng.gen_range(0..3) {
            let side = rng.gen_range(5.0..130.0);
            let (x, y) = (rng.gen_range(0.0..300.0), rng.gen_range(0.0..300.0));
            let id = dets.len();
            dets.push(det(id, im, [x, y, x + side, y + side], rng.gen_range(0..6) as f64 / 5.0));
        }
    }
    (dets, gts)
}

fn values(r: &EvalReport<f64>) -> [f64; 12] {
    r.metrics().map(|m| m.1)
}

#[test]
fn matches_second_implementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..50 {
        let (dets, gts) = random_instance(&mut rng);
        let got = values(&coco_summary(&dets, &gts).unwrap());
        let want = brute_metrics(&dets, &gts);
        for (i, (a, b)) in got.iter().zip(want).enumerate() {
            assert!((a - b).abs() <= 1e-9, "metric {i}: {a} vs {b}");
        }
    }
}

/// Three images, four ground truths (two small, one medium, one large).
fn fixture() -> (Vec<EvalDet<f64>>, Vec<GtBox<f64>>) {
    let gts = vec![
        gt("A", 0.0, 0.0, 10.0, 10.0),
        gt("A", 50.0, 50.0, 150.0, 150.0),
        gt("B", 0.0, 0.0, 50.0, 50.0),
        gt("C", 10.0, 10.0, 20.0, 20.0),
    ];
    let dets = vec![
        det(0, "A", [0.0, 0.0, 10.0, 10.0], 0.9),
        det(1, "B", [0.0, 0.0, 50.0, 50.0], 0.8),
        det(2, "A", [200.0, 200.0, 210.0, 210.0], 0.7),
        det(3, "C", [10.0, 10.0, 20.0, 21.0], 0.6),
        det(4, "A", [50.0, 50.0, 150.0, 142.0], 0.5),
    ];
    (dets, gts)
}

#[test]
fn hand_computed_fixture() {
    let (dets, gts) = fixture();
    let c = pr_curve(&dets, &gts, 0.5).unwrap();
    let expect = [(0.25, 1.0), (0.5, 1.0), (0.5, 2.0 / 3.0), (0.75, 0.75), (1.0, 0.8)];
    assert_eq!(c.points.len(), 5);
    for (p, e) in c.points.iter().zip(expect) {
        assert!((p.0 - e.0).abs() < 1e-15 && (p.1 - e.1).abs() < 1e-15);
    }
    // at 0.95 only the two exact hits count
    let c95 = pr_curve(&dets, &gts, 0.95).unwrap();
    let flags: Vec<f64> = c95.points.iter().map(|p| p.0).collect();
    assert_eq!(flags, [0.25, 0.5, 0.5, 0.5, 0.5]);

    let r = coco_summary(&dets, &gts).unwrap();
    let ap50 = 91.0 / 101.0;
    let ap95 = 51.0 / 101.0;
    let small_hi = (51.0 + 100.0 / 3.0) / 101.0;
    let want = [
        (9.0 * ap50 + ap95) / 10.0,
        ap50,
        ap50,
        (9.0 * small_hi + ap95) / 10.0,
        1.0,
        0.9,
        0.95,
        1.0,
        1.0,
        0.95,
        1.0,
        0.9,
    ];
    for ((name, got), w) in r.metrics().iter().zip(want) {
        assert!((got - w).abs() < 1e-12, "{name}: {got} vs {w}");
    }
    assert_eq!(r.bucket_counts, (2, 1, 1));
}

#[test]
fn perfect_and_empty_detectors() {
    let (_, gts) = fixture();
    let perfect: Vec<_> = gts.iter().enumerate().map(|(i, g)| det(i, &g.image_id, raw(&g.bbox), 0.9)).collect();
    let r = coco_summary(&perfect, &gts).unwrap();
    assert!(r.metrics().iter().all(|m| m.1 == 1.0), "{:?}", r.metrics());
    let r = coco_summary(&[], &gts).unwrap();
    assert!(r.metrics().iter().all(|m| m.1 == 0.0));
}

#[test]
fn single_gt_curves() {
    let gts = [gt("x", 0.0, 0.0, 10.0, 10.0)];
    let hit = pr_curve(&[det(0, "x", [0.0, 0.0, 10.0, 10.0], 0.5)], &gts, 0.5).unwrap();
    assert_eq!(hit.points, [(1.0, 1.0)]);
    assert_eq!(average_precision(&hit.points), 1.0);
    let miss = pr_curve(&[det(0, "x", [20.0, 20.0, 30.0, 30.0], 0.5)], &gts, 0.5).unwrap();
    assert!(miss.points.iter().all(|p| p.1 == 0.0));
    // a detection on another image cannot claim the ground truth
    let other = pr_curve(&[det(0, "y", [0.0, 0.0, 10.0, 10.0], 0.5)], &gts, 0.5).unwrap();
    assert_eq!(other.points, [(0.0, 0.0)]);
    assert!(pr_curve(&[det(3, "x", [0.0; 4], 0.1), det(3, "x", [0.0; 4], 0.2)], &gts, 0.5).is_err());
}

#[test]
fn csv_and_svg_round_trip() {
    let (dets, gts) = fixture();
    let r = coco_summary(&dets, &gts).unwrap();
    let csv = report_csv(&r);
    let rows = csv.lines().count() - 2;
    assert_eq!(rows, IOU_THRESHOLDS.len() * 5 + 12);
    let parsed = parse_report_csv::<f64>(&csv).unwrap();
    for (name, v) in r.metrics() {
        assert_eq!(parsed.metrics[name].to_bits(), v.to_bits());
    }
    assert_eq!(parsed.curves.len(), IOU_THRESHOLDS.len());
    for ((t, pts), c) in parsed.curves.iter().zip(&r.pr_curves) {
        assert_eq!(*t, c.iou);
        assert_eq!(pts, &c.points);
    }

    let svg = report_svg(&r);
    let polylines: Vec<&str> = svg.lines().filter(|l| l.starts_with("<polyline")).collect();
    assert_eq!(polylines.len(), r.pr_curves.len());
    for (line, c) in polylines.iter().zip(&r.pr_curves) {
        let start = line.find("points=\"").unwrap() + 8;
        let end = start + line[start..].find('"').unwrap();
        assert_eq!(line[start..end].split_whitespace().count(), c.points.len());
    }
}

#[test]
fn per_image_cap() {
    let gts = [gt("x", 0.0, 0.0, 40.0, 40.0)];
    let mut dets: Vec<_> = (0..MAX_DETS).map(|i| det(i, "x", [100.0, 100.0, 140.0, 140.0], 0.9)).collect();
    dets.push(det(MAX_DETS, "x", [0.0, 0.0, 40.0, 40.0], 0.1));
    let r = coco_summary(&dets, &gts).unwrap();
    assert_eq!(r.ar_50, 0.0);
    dets.push(det(MAX_DETS + 1, "y", [0.0, 0.0, 1.0, 1.0], 0.9));
    assert_eq!(coco_summary(&dets, &gts).unwrap().ar_50, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn order_invariance_and_threshold_monotonicity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut dets, gts) = random_instance(&mut rng);
        let a = coco_summary(&dets, &gts).unwrap();
        dets.shuffle(&mut rng);
        let b = coco_summary(&dets, &gts).unwrap();
        prop_assert_eq!(&a, &b);
        let ap95 = if a.pr_curves[9].num_gt == 0 { 0.0 } else { average_precision(&a.pr_curves[9].points) };
        prop_assert!(a.ap_50 >= a.ap_75 && a.ap_75 >= ap95);
        let (s, m, l) = a.bucket_counts;
        prop_assert_eq!(s + m + l, gts.len());
        for (_, v) in a.metrics() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn adding_true_positives_never_lowers_ap(seed in any::<u64>(), score in 0.0..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dets, gts) = random_instance(&mut rng);
        let before = coco_summary(&dets, &gts).unwrap();
        // ground truths no detection claims at the loosest threshold stay free at all of them
        let claimed: Vec<bool> = {
            gts.iter().map(|g| dets.iter().any(|d| d.image_id == g.image_id && box_iou(raw(&d.bbox), raw(&g.bbox)) >= 0.5)).collect()
        };
        if let Some(g) = gts.iter().zip(&claimed).find(|(_, c)| !**c).map(|(g, _)| g) {
            let mut more = dets.clone();
            more.push(det(10_000, &g.image_id, raw(&g.bbox), score));
            let after = coco_summary(&more, &gts).unwrap();
            prop_assert!(after.ap_5095 >= before.ap_5095 - 1e-12);
            prop_assert!(after.ap_50 >= before.ap_50 - 1e-12);
        }
    }
}
