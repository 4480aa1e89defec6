mod support;

use bimsa::data::LabelMap;
use bimsa::eval::{iou_report, plan_tiles, ConfusionMatrix};
use proptest::prelude::*;

use support::oracle::iou_by_sets;

fn labels(n_class: u8, with_ignore: bool) -> impl Strategy<Value = Vec<u8>> {
    let cell = if with_ignore {
        prop_oneof![9 => 0..n_class, 1 => Just(255u8)].boxed()
    } else {
        (0..n_class).boxed()
    };
    prop::collection::vec(cell, 64)
}

proptest! {
    #[test]
    fn iou_matches_set_counting((n, pred, truth) in (2u8..9).prop_flat_map(|n| (Just(n), labels(n, false), labels(n, true)))) {
        let lm = |d: &Vec<u8>| LabelMap { width: 8, height: 8, data: d.clone() };
        let mut cm = ConfusionMatrix::new(n as usize);
        cm.accumulate(&lm(&pred), &lm(&truth)).unwrap();
        let r = iou_report(&cm, &[]);
        let (iou, miou) = iou_by_sets(&pred, &truth, n as usize);
        prop_assert_eq!(r.iou, iou);
        prop_assert_eq!(r.miou, miou);
        prop_assert!((0.0..=1.0).contains(&r.miou));
        prop_assert_eq!(cm.total() as usize, truth.iter().filter(|&&t| t != 255).count());
    }

    #[test]
    fn tiles_cover_and_stay_inside(h in 1usize..300, w in 1usize..300, tile in 1usize..128, frac in 0.0f64..1.0) {
        let overlap = ((tile as f64) * frac) as usize;
        let overlap = overlap.min(tile - 1);
        let p = plan_tiles(h, w, tile, overlap).unwrap();
        let mut cover = vec![0u16; h * w];
        for t in &p.tiles {
            prop_assert!(t.y + t.h <= h && t.x + t.w <= w);
            for y in t.y..t.y + t.h {
                for x in t.x..t.x + t.w {
                    cover[y * w + x] += 1;
                }
            }
        }
        prop_assert!(cover.iter().all(|&c| c >= 1));
        for axis in [&p.rows, &p.cols] {
            for k in 0..axis.len().saturating_sub(2) {
                prop_assert_eq!(axis[k + 1] - axis[k], tile - overlap);
            }
        }
        // row-major order
        let keys: Vec<_> = p.tiles.iter().map(|t| (t.y, t.x)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        prop_assert_eq!(keys, sorted);
    }
}
