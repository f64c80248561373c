use std::collections::HashSet;
use std::fs;

use nrnm::tasks::{
    build_splits, gen_adding, load_external, segment_motifs, write_csv, write_jsonl, Dataset, ExternalFormat,
    ExternalSchema, LabelVocab, Split, TaskSpec,
};
use nrnm::Error;

fn chi_square(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let expected = n as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

#[test]
fn copy_memory_labels_are_uniform() {
    let spec = TaskSpec::copy_memory(30, 20, 8, 2).with_counts(4000, 0, 0).with_seed(5);
    let splits = build_splits(&spec).unwrap();
    // 99.9th percentile of chi-square with 7 degrees of freedom.
    let stat = chi_square(&splits.train.label_counts());
    assert!(stat < 24.32, "chi-square {stat}");
}

#[test]
fn segment_order_labels_are_uniform() {
    let spec = TaskSpec::segment_order(40, 10, 6, 6, 3).with_counts(3000, 0, 0);
    let stat = chi_square(&build_splits(&spec).unwrap().train.label_counts());
    // 99.9th percentile, 5 degrees of freedom.
    assert!(stat < 20.52, "chi-square {stat}");
}

#[test]
fn copy_memory_plants_label_exactly_once() {
    let (t, g, k, d) = (25, 10, 5, 8);
    let spec = TaskSpec::copy_memory(t, g, k, d - k).with_counts(200, 0, 0);
    let data = build_splits(&spec).unwrap().train;
    for s in &data.samples {
        for step in 0..t {
            let frame = s.frame(step, d);
            assert_eq!(frame.iter().filter(|&&v| v == 1.0).count(), 1);
            let symbol = frame.iter().position(|&v| v == 1.0).unwrap();
            if step == t - 1 - g {
                assert_eq!(symbol, s.label);
            } else {
                assert!(symbol >= k, "label symbol outside the planted step");
            }
        }
    }
}

#[test]
fn adding_base_rate_is_one_half() {
    let spec = TaskSpec::adding(20, 5);
    let n = 100_000;
    let positives: usize = (0..n).map(|i| gen_adding(&spec, Split::Train, i).label).sum();
    let rate = positives as f64 / n as f64;
    assert!((rate - 0.5).abs() < 0.01, "base rate {rate}");
    let s = gen_adding(&spec, Split::Train, 7);
    let marks: Vec<usize> = (0..20).filter(|&t| s.frame(t, 2)[1] == 1.0).collect();
    assert_eq!(marks.len(), 2);
    assert!(marks[1] - marks[0] >= 5);
    let sum = s.frame(marks[0], 2)[0] + s.frame(marks[1], 2)[0];
    assert_eq!(s.label, usize::from(sum > 1.0));
}

/// Ordered pairs of distinct motifs in lexicographic order.
fn ordered_pairs(p: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for a in 0..p {
        for b in 0..p {
            if a != b {
                out.push((a, b));
            }
        }
    }
    out
}

#[test]
fn segment_order_template_matcher_is_perfect() {
    let (t, g, k, d, l) = (40, 12, 6, 5, 3);
    let spec = TaskSpec::segment_order(t, g, k, d, l).with_counts(300, 50, 50);
    let motifs = segment_motifs(&spec);
    assert_eq!(motifs.len(), 3);
    let pairs = ordered_pairs(3);
    let splits = build_splits(&spec).unwrap();
    for data in [&splits.train, &splits.val, &splits.test] {
        for s in &data.samples {
            // Marker frames are exactly the two motif occurrences.
            let marked: Vec<usize> = (0..t).filter(|&i| s.frame(i, d)[0] == 1.0).collect();
            assert_eq!(marked.len(), 2 * l);
            let (first, second) = (marked[0], marked[l]);
            assert_eq!(second - first, l + g);
            let find = |start: usize| {
                let window = &s.features[start * d..(start + l) * d];
                motifs.iter().position(|m| m.as_slice() == window).expect("known motif")
            };
            let predicted = pairs.iter().position(|&p| p == (find(first), find(second))).unwrap();
            assert_eq!(predicted, s.label);
        }
    }
}

fn key(features: &[f64]) -> Vec<u64> {
    features.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn splits_are_disjoint_and_deterministic() {
    for spec in [
        TaskSpec::copy_memory(6, 2, 2, 2).with_counts(40, 10, 10),
        TaskSpec::adding(10, 3).with_counts(100, 50, 50),
        TaskSpec::segment_order(12, 2, 2, 3, 2).with_counts(100, 30, 30),
    ] {
        let a = build_splits(&spec).unwrap();
        let b = build_splits(&spec).unwrap();
        assert_eq!(a.train.samples, b.train.samples);
        assert_eq!(a.test.samples, b.test.samples);
        let train: HashSet<_> = a.train.samples.iter().map(|s| key(&s.features)).collect();
        let val: HashSet<_> = a.val.samples.iter().map(|s| key(&s.features)).collect();
        for s in &a.test.samples {
            assert!(!train.contains(&key(&s.features)));
            assert!(!val.contains(&key(&s.features)));
        }
        assert!(train.is_disjoint(&val));
        assert_eq!(a.train.len(), spec.n_train);
        let other = build_splits(&spec.clone().with_seed(99)).unwrap();
        assert_ne!(a.train.samples, other.train.samples);
    }
}

#[test]
fn sample_stream_ignores_split_sizes() {
    let small = build_splits(&TaskSpec::adding(10, 3).with_counts(20, 5, 5)).unwrap();
    let large = build_splits(&TaskSpec::adding(10, 3).with_counts(50, 5, 5)).unwrap();
    assert_eq!(small.train.samples[..], large.train.samples[..20]);
}

fn same_data(a: &Dataset, b: &Dataset) {
    assert_eq!(a.dim, b.dim);
    assert_eq!(a.len(), b.len());
    for (x, y) in a.samples.iter().zip(&b.samples) {
        assert_eq!(key(&x.features), key(&y.features));
        assert_eq!(x.len, y.len);
        assert_eq!(x.label, y.label);
    }
}

#[test]
fn csv_and_jsonl_round_trip_bit_exact() {
    let spec = TaskSpec::adding(7, 2).with_counts(12, 0, 0);
    let data = build_splits(&spec).unwrap().train;
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    let jsonl = dir.path().join("d.jsonl");
    write_csv(&data, &csv).unwrap();
    write_jsonl(&data, &jsonl).unwrap();
    let schema = ExternalSchema::default();
    let from_csv = load_external(&csv, ExternalFormat::Csv, &schema, None).unwrap();
    let from_jsonl = load_external(&jsonl, ExternalFormat::Jsonl, &schema, None).unwrap();
    same_data(&data, &from_csv);
    same_data(&data, &from_jsonl);
}

#[test]
fn csv_reorders_steps_and_handles_variable_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.csv");
    fs::write(
        &path,
        "seq_id,step,feat_0,feat_1,label\n\
         a,1,0.5,1,cat\n\
         a,0,0.25,2,cat\n\
         b,0,1,1,dog\n",
    )
    .unwrap();
    let d = load_external(&path, ExternalFormat::Csv, &ExternalSchema::default(), None).unwrap();
    assert_eq!(d.dim, 2);
    assert_eq!(d.classes, 2);
    assert_eq!(d.samples[0].len, 2);
    assert_eq!(d.samples[0].features, vec![0.25, 2.0, 0.5, 1.0]);
    assert_eq!(d.samples[1].len, 1);
    assert_eq!(d.labels.as_ref().unwrap().names(), ["cat", "dog"]);
    let batch = d.batch::<f64>(&[0, 1]).unwrap();
    assert_eq!(batch.lengths, vec![2, 1]);
}

#[test]
fn numeric_labels_sort_numerically() {
    let v = LabelVocab::from_names(["10", "2", "1"].map(String::from));
    assert_eq!(v.names(), ["1", "2", "10"]);
    let v = LabelVocab::from_names(["b", "a", "10"].map(String::from));
    assert_eq!(v.names(), ["10", "a", "b"]);
}

fn parse_error_line(text: &str, format: ExternalFormat, vocab: Option<&LabelVocab>) -> usize {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad");
    fs::write(&path, text).unwrap();
    match load_external(&path, format, &ExternalSchema::default(), vocab) {
        Err(Error::Parse { line, .. }) => line,
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn malformed_external_data_reports_line() {
    let head = "seq_id,step,feat_0,label\n";
    assert_eq!(parse_error_line(&format!("{head}a,0,x,1\n"), ExternalFormat::Csv, None), 2);
    assert_eq!(parse_error_line(&format!("{head}a,0,1,1\na,1,inf,1\n"), ExternalFormat::Csv, None), 3);
    assert_eq!(parse_error_line(&format!("{head}a,0,1,1\na,1,2,0\n"), ExternalFormat::Csv, None), 3);
    assert_eq!(parse_error_line(&format!("{head}a,0,1,1\na,0,2,1\n"), ExternalFormat::Csv, None), 3);
    assert_eq!(parse_error_line("seq_id,step,label\na,0,1\n", ExternalFormat::Csv, None), 1);
    let vocab = LabelVocab::from_names(["0".to_string()]);
    assert_eq!(parse_error_line(&format!("{head}a,0,1,7\n"), ExternalFormat::Csv, Some(&vocab)), 2);
    let j = "{\"id\":\"a\",\"features\":[[1,2]],\"label\":0}\n{\"id\":\"b\",\"features\":[[1]],\"label\":1}\n";
    assert_eq!(parse_error_line(j, ExternalFormat::Jsonl, None), 2);
    assert_eq!(parse_error_line("{\"features\":[[1]]}\n", ExternalFormat::Jsonl, None), 1);
    assert_eq!(parse_error_line("not json\n", ExternalFormat::Jsonl, None), 1);
}

#[test]
fn invalid_specs_are_config_errors() {
    for spec in [
        TaskSpec::copy_memory(10, 10, 4, 2),
        TaskSpec::adding(3, 1),
        TaskSpec::segment_order(8, 4, 6, 4, 3),
    ] {
        let e = build_splits(&spec).unwrap_err();
        assert_eq!(e.exit_code(), 2, "{e}");
    }
}
