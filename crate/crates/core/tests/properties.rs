//! Property tests over the public API.

use mmcan::checkpoint::{read_container, write_container};
use mmcan::experiment::{attention_mask, mean_std, median, MASK_HIGH, MASK_LOW};
use mmcan::model::{argmax_label, average_probs};
use mmcan::tensor::Tensor;
use mmcan::training::Metrics;
use proptest::prelude::*;

fn prob_pair() -> impl Strategy<Value = [f64; 2]> {
    (0.0f64..=1.0).prop_map(|p| [1.0 - p, p])
}

proptest! {
    #[test]
    fn mask_marks_exactly_the_entries_above_the_median(row in prop::collection::vec(0.0f64..1.0, 1..20)) {
        let med = median(&row);
        let mask = attention_mask(&row);
        prop_assert_eq!(mask.len(), row.len());
        for (&w, &m) in row.iter().zip(&mask) {
            prop_assert_eq!(m, if w > med { MASK_HIGH } else { MASK_LOW });
        }
        // At most half the entries can lie strictly above the median.
        prop_assert!(mask.iter().filter(|&&m| m == MASK_HIGH).count() * 2 <= row.len());
    }

    #[test]
    fn metrics_stay_in_unit_interval(labels in prop::collection::vec((0u8..2, 0u8..2), 1..60)) {
        let (pred, truth): (Vec<u8>, Vec<u8>) = labels.into_iter().unzip();
        let m = Metrics::from_labels(&pred, &truth);
        for v in [m.accuracy, m.precision_fake, m.recall_fake, m.f1_fake, m.precision_real, m.recall_real, m.f1_real] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let correct = pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
        prop_assert_eq!(m.accuracy, correct as f64 / pred.len() as f64);
    }

    #[test]
    fn averaged_probabilities_are_a_distribution(a in prob_pair(), b in prob_pair()) {
        let p = average_probs(a, b);
        prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        prop_assert!(p[0] >= a[0].min(b[0]) - 1e-15 && p[0] <= a[0].max(b[0]) + 1e-15);
        prop_assert_eq!(argmax_label(p), if p[1] > p[0] { 1 } else { 0 });
    }

    #[test]
    fn mean_std_is_shift_invariant_in_spread(values in prop::collection::vec(-10.0f64..10.0, 1..12), shift in -5.0f64..5.0) {
        let (m, s) = mean_std(&values);
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let (m2, s2) = mean_std(&shifted);
        prop_assert!((m2 - m - shift).abs() < 1e-9);
        prop_assert!((s2 - s).abs() < 1e-9);
        prop_assert!(s >= 0.0);
    }

    #[test]
    fn container_round_trips_bitwise(
        values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40),
        config in "[a-z ]{0,30}",
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let t = Tensor::new(&[values.len()], values.clone()).unwrap();
        write_container(&path, &config, &[("w", &t)]).unwrap();
        let (cfg_back, tensors) = read_container(&path).unwrap();
        prop_assert_eq!(cfg_back, config);
        prop_assert_eq!(tensors.len(), 1);
        prop_assert_eq!(&tensors[0].0, "w");
        let back: Vec<u64> = tensors[0].1.data().iter().map(|v| v.to_bits()).collect();
        let orig: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(back, orig);
    }
}
