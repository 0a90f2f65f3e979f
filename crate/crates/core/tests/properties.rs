use proptest::prelude::*;

use sdcm_core::autodiff::smooth_l1;
use sdcm_core::detect::{iou, nms, Detection};
use sdcm_core::hsi_io::{read_cube, write_cube, HsiCube};
use sdcm_core::scl::topk_count;
use sdcm_core::sgg::energy_map;
use sdcm_core::tensor::{softmax_lastdim, Tensor};

fn boxes() -> impl Strategy<Value = [f64; 4]> {
    (0.1..0.9f64, 0.1..0.9f64, 0.02..0.4f64, 0.02..0.4f64).prop_map(|(x, y, w, h)| [x, y, w, h])
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-30.0..30.0f64, 12)) {
        let s = softmax_lastdim(&Tensor::new([3, 4], v).unwrap()).unwrap();
        for row in s.data().chunks(4) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn energy_lies_in_zero_two(v in prop::collection::vec(-5.0..5.0f64, 2..40), lam in 1e-6..1.0f64) {
        let n = v.len();
        let e = energy_map(&Tensor::new([1, 1, 1, n], v).unwrap(), lam).unwrap();
        prop_assert!(e.values.data().iter().all(|&x| x > 0.0 && x <= 2.0 + 1e-12));
    }

    #[test]
    fn smooth_l1_is_even_and_nonnegative(x in -10.0..10.0f64) {
        prop_assert!(smooth_l1(x) >= 0.0);
        prop_assert_eq!(smooth_l1(x), smooth_l1(-x));
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in boxes(), b in boxes()) {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert!((ab - ba).abs() < 1e-15);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
    }

    #[test]
    fn topk_count_stays_in_range(k in 0.001..=1.0f64, n in 1usize..500) {
        let c = topk_count(k, n);
        prop_assert!(c >= 1 && c <= n);
    }

    #[test]
    fn nms_ignores_input_order(bs in prop::collection::vec((boxes(), 0usize..2), 1..12), seed in any::<u64>()) {
        // distinct confidences make the greedy order unambiguous
        let dets: Vec<Detection> = bs.iter().enumerate().map(|(i, (b, c))| {
            let mut probs = vec![0.2, 0.2];
            probs[*c] = 0.8;
            Detection { bbox: *b, class_probs: probs, confidence: 0.05 + i as f64 / 20.0 }
        }).collect();
        let mut shuffled = dets.clone();
        let n = shuffled.len();
        for i in 0..n {
            shuffled.swap(i, (seed as usize).wrapping_add(i * 7) % n);
        }
        let key = |d: &Vec<Detection>| {
            let mut c: Vec<u64> = d.iter().map(|x| x.confidence.to_bits()).collect();
            c.sort();
            c
        };
        prop_assert_eq!(key(&nms(&dets, 0.5).unwrap()), key(&nms(&shuffled, 0.5).unwrap()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn cube_file_round_trips(h in 1usize..6, w in 1usize..6, b in 2usize..5, v in prop::collection::vec(-1e3..1e3f64, 150)) {
        let wl: Vec<f64> = (0..b).map(|i| 400.0 + 10.0 * i as f64).collect();
        let data = Tensor::new([h, w, b], v[..h * w * b].to_vec()).unwrap();
        let cube = HsiCube::new(wl, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.hsic");
        write_cube(&cube, &path).unwrap();
        prop_assert_eq!(read_cube(&path).unwrap(), cube);
    }
}
