use flowdet_core::eval::{ap_evaluate, giou, iou, raw_pr, AreaRanges, Detection, GtBox, Stratum};
use flowdet_core::Error;
use proptest::prelude::*;
use serde::Deserialize;

#[derive(Deserialize)]
struct Expected {
    precision: Vec<f64>,
    recall: Vec<f64>,
    interpolated_runs: Vec<(usize, f64)>,
    ap50: f64,
}

#[derive(Deserialize)]
struct Fixture {
    categories: Vec<u64>,
    gts: Vec<GtBox>,
    dets: Vec<Detection>,
    expected: Expected,
}

fn fixture() -> Fixture {
    serde_json::from_str(include_str!("fixtures/ap_fixture.json")).unwrap()
}

#[test]
fn hand_computed_fixture() {
    let f = fixture();
    let (_, rc, pr) = raw_pr(&f.dets, &f.gts, 1, 0.5).unwrap();
    assert_eq!(rc, f.expected.recall);
    assert_eq!(pr, f.expected.precision);
    let r = ap_evaluate(&f.dets, &f.gts, &f.categories, &AreaRanges::default()).unwrap();
    let curve: Vec<f64> = f
        .expected
        .interpolated_runs
        .iter()
        .flat_map(|&(n, v)| std::iter::repeat_n(v, n))
        .collect();
    assert_eq!(r.pr_curves[0].precision, curve);
    assert!((r.ap50 - f.expected.ap50).abs() < 1e-12, "{}", r.ap50);
    assert!(r.ap <= r.ap50);
}

fn gt(image_id: u64, category_id: u64, bbox: [f64; 4]) -> GtBox {
    GtBox { image_id, category_id, bbox, area: bbox[2] * bbox[3] }
}

fn det(image_id: u64, category_id: u64, bbox: [f64; 4], score: f64) -> Detection {
    Detection { image_id, category_id, bbox, score }
}

#[test]
fn perfect_and_empty() {
    let g = vec![gt(1, 1, [5.0, 5.0, 40.0, 50.0])];
    let d = vec![det(1, 1, [5.0, 5.0, 40.0, 50.0], 1.0)];
    let r = ap_evaluate(&d, &g, &[1], &AreaRanges::default()).unwrap();
    assert_eq!((r.ap, r.ap50), (1.0, 1.0));
    let r = ap_evaluate(&[], &g, &[1], &AreaRanges::default()).unwrap();
    assert_eq!([r.ap, r.ap50, r.ap_s, r.ap_l], [0.0; 4]);
}

#[test]
fn unknown_category_is_an_error() {
    let g = vec![gt(1, 1, [0.0, 0.0, 4.0, 4.0])];
    let d = vec![det(1, 9, [0.0, 0.0, 4.0, 4.0], 0.5)];
    assert!(matches!(ap_evaluate(&d, &g, &[1], &AreaRanges::default()), Err(Error::UnknownCategory(9))));
}

#[test]
fn size_strata_use_their_own_boxes() {
    let g = vec![gt(1, 1, [0.0, 0.0, 10.0, 10.0]), gt(1, 1, [100.0, 100.0, 100.0, 100.0])];
    let d = vec![det(1, 1, [100.0, 100.0, 100.0, 100.0], 0.9)];
    let r = ap_evaluate(&d, &g, &[1], &AreaRanges::default()).unwrap();
    assert_eq!(r.ap_l, 1.0);
    assert_eq!(r.ap_s, 0.0);
}

fn arb_box() -> impl Strategy<Value = [f64; 4]> {
    (0.0f64..50.0, 0.0f64..50.0, 0.5f64..30.0, 0.5f64..30.0).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
}

fn scene() -> impl Strategy<Value = (Vec<GtBox>, Vec<Detection>)> {
    let g = prop::collection::vec((0u64..3, 1u64..3, arb_box()), 1..8);
    let d = prop::collection::vec((0u64..3, 1u64..3, arb_box(), 0.01f64..1.0), 0..12);
    (g, d).prop_map(|(g, d)| {
        let xywh = |b: [f64; 4]| [b[0], b[1], b[2] - b[0], b[3] - b[1]];
        (
            g.into_iter().map(|(i, c, b)| gt(i, c, xywh(b))).collect(),
            d.into_iter().map(|(i, c, b, s)| det(i, c, xywh(b), s)).collect(),
        )
    })
}

proptest! {
    #[test]
    fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let (x, y) = (iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((giou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let gv = giou(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&gv) && gv <= x + 1e-12);
    }

    #[test]
    fn ap_monotone_in_threshold((gts, dets) in scene()) {
        let ap_at = |t: f64| {
            let cats = [1, 2];
            let mut vals = Vec::new();
            for c in cats {
                if gts.iter().any(|g| g.category_id == c) {
                    let (_, rc, pr) = raw_pr(&dets, &gts, c, t).unwrap();
                    let mut p = pr.clone();
                    for i in (0..p.len().saturating_sub(1)).rev() { p[i] = p[i].max(p[i + 1]); }
                    let v: f64 = (0..=100).map(|r| {
                        let idx = rc.partition_point(|&x| x < r as f64 / 100.0);
                        p.get(idx).copied().unwrap_or(0.0)
                    }).sum::<f64>() / 101.0;
                    vals.push(v);
                }
            }
            vals.iter().sum::<f64>()
        };
        let mut prev = f64::INFINITY;
        for i in 0..10 {
            let v = ap_at(0.5 + 0.05 * i as f64);
            prop_assert!(v <= prev + 1e-12);
            prev = v;
        }
        let r = ap_evaluate(&dets, &gts, &[1, 2], &AreaRanges::default()).unwrap();
        for v in [r.ap, r.ap50, r.ap75, r.ap_s, r.ap_m, r.ap_l] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(r.ap <= r.ap50 + 1e-12);
    }

    #[test]
    fn zero_confidence_fp_keeps_ranked_outcomes((gts, dets) in scene(), extra in arb_box()) {
        let (_, rc, pr) = raw_pr(&dets, &gts, 1, 0.5).unwrap();
        let mut more = dets.clone();
        more.push(det(0, 1, [extra[0] + 500.0, extra[1] + 500.0, 3.0, 3.0], 0.0));
        let (_, rc2, pr2) = raw_pr(&more, &gts, 1, 0.5).unwrap();
        prop_assert_eq!(&rc2[..rc.len()], &rc[..]);
        prop_assert_eq!(&pr2[..pr.len()], &pr[..]);
    }

    #[test]
    fn strata_partition(area in 0.0f64..20000.0) {
        let r = AreaRanges::default();
        let s = r.stratum(area);
        let flags = [area < 1024.0, (1024.0..=9216.0).contains(&area), area > 9216.0];
        prop_assert_eq!(flags.iter().filter(|&&f| f).count(), 1);
        prop_assert_eq!(s, [Stratum::Small, Stratum::Medium, Stratum::Large][flags.iter().position(|&f| f).unwrap()]);
    }
}
