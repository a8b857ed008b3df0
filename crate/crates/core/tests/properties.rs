use cbmkit::activation::{fit_norm_stats, histogram, normalize, ActivationMatrix};
use cbmkit::goodness::{entropy, goodness, softmax, CutoffMode};
use cbmkit::store::{ArrayData, Container, NamedArray};
use ndarray::Array2;
use proptest::prelude::*;
use serde_json::json;

fn finite() -> impl Strategy<Value = f64> {
    -50.0..50.0f64
}

fn array_data() -> impl Strategy<Value = ArrayData> {
    prop_oneof![
        prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 0..40).prop_map(ArrayData::F32),
        prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 0..40).prop_map(ArrayData::F64),
        prop::collection::vec(any::<u32>(), 0..40).prop_map(ArrayData::U32),
        prop::collection::vec(any::<u8>(), 0..40).prop_map(ArrayData::U8),
    ]
}

fn activations(rows: usize, cols: usize) -> impl Strategy<Value = ActivationMatrix> {
    prop::collection::vec(finite(), rows * cols).prop_map(move |v| {
        let scores = Array2::from_shape_vec((rows, cols), v).unwrap();
        normalize(scores.view(), &fit_norm_stats(scores.view(), 1e-6).unwrap()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn container_round_trips(
        kind in "[a-z_]{1,12}",
        arrays in prop::collection::vec(array_data(), 0..5),
        names in prop::collection::vec("\\PC{0,10}", 0..6),
        attr in any::<i64>(),
    ) {
        let mut c = Container::new(kind);
        for (i, data) in arrays.into_iter().enumerate() {
            let len = data.len();
            c.push(NamedArray::new(format!("a{i}"), vec![len], data).unwrap());
        }
        c.names.insert("labels".into(), names);
        c.attrs.insert("n".into(), json!(attr));
        let bytes = c.to_bytes().unwrap();
        prop_assert_eq!(bytes.len() % 64, 0);
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn softmax_ignores_shifts(x in prop::collection::vec(finite(), 1..30), shift in -100.0..100.0f64) {
        let a = softmax(&x).unwrap();
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let b = softmax(&shifted).unwrap();
        for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
        prop_assert!((a.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_lies_between_zero_and_ln_n(x in prop::collection::vec(finite(), 1..30)) {
        let h = entropy(&softmax(&x).unwrap());
        prop_assert!(h >= -1e-12);
        prop_assert!(h <= (x.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn goodness_ignores_concept_order(
        acts in activations(8, 12),
        perm in Just((0..12).collect::<Vec<usize>>()).prop_shuffle(),
        cut in 1..=12usize,
        truncated in any::<bool>(),
    ) {
        let mode = if truncated { CutoffMode::FullSoftmaxTruncated } else { CutoffMode::SubsetSoftmax };
        let labels: Vec<u32> = (0..8).map(|i| i % 3).collect();
        let shuffled = acts.select_concepts(&perm).unwrap();
        for l in [None, Some(labels.as_slice())] {
            let a = goodness(&acts, l, cut, mode).unwrap();
            let b = goodness(&shuffled, l, cut, mode).unwrap();
            prop_assert!((a.mean_entropy - b.mean_entropy).abs() < 1e-9);
            // Without renormalization the truncated sum is only bounded by ln K.
            let bound = if truncated { 12.0f64.ln() } else { (cut as f64).ln() };
            prop_assert!(a.mean_entropy <= bound + 1e-9);
        }
    }

    #[test]
    fn histogram_counts_every_value(
        values in prop::collection::vec(-10.0..10.0f64, 0..200),
        width in 0.05..2.0f64,
        lo in -5.0..0.0f64,
        span in 0.5..8.0f64,
    ) {
        let h = histogram(values.iter().copied(), width, (lo, lo + span)).unwrap();
        prop_assert_eq!(h.counts.iter().sum::<u64>(), values.len() as u64);
        prop_assert_eq!(h.total, values.len() as u64);
        prop_assert_eq!(h.edges.len(), h.counts.len() + 1);
        let below = values.iter().filter(|&&v| v < lo).count() as u64;
        prop_assert_eq!(h.clamped_low, below);
    }
}
