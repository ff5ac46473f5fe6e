use std::path::PathBuf;

use s3rec::dataio::{load, preprocess, to_raw, FoldSplit, SynthConfig};
use s3rec::recommender::{train_plain, RatingData, TrainConfig, TrainMode};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

// Expected shapes were computed from the TSV files by a separate pandas
// script (dedupe keeping the last value, then iterative threshold filter).
#[test]
fn bundled_fixture_filters_to_known_shapes() {
    let cases = [(0, 9, 10, 49, 25, 136.0), (3, 8, 10, 47, 19, 133.5), (4, 8, 8, 41, 19, 113.5), (5, 0, 0, 0, 0, 0.0)];
    for (min, m, n, count, social, sum) in cases {
        let (data, s) = load(&fixture("ratings_50.tsv"), &fixture("social_50.tsv"), min).unwrap();
        assert_eq!((data.m, data.n, data.ratings.len(), s.nnz()), (m, n, count, social), "threshold {min}");
        let total: f64 = data.ratings.iter().map(|r| r.2).sum();
        assert!((total - sum).abs() < 1e-9, "threshold {min}: rating sum {total}");
    }
}

#[test]
fn reloading_filtered_output_changes_nothing() {
    let (data, social) = load(&fixture("ratings_50.tsv"), &fixture("social_50.tsv"), 4).unwrap();
    let edges: Vec<(String, String, f64)> = social
        .edges
        .iter()
        .map(|&(a, b, w)| (data.user_ids[a].clone(), data.user_ids[b].clone(), w))
        .collect();
    let (again, social_again) = preprocess(to_raw(&data), &edges, 4).unwrap();
    assert_eq!(again, data);
    assert_eq!(social_again, social);
}

fn assert_monotone(objectives: &[f64]) {
    for w in objectives.windows(2) {
        assert!(w[1] <= w[0], "objective increased: {} -> {}", w[0], w[1]);
    }
}

#[test]
fn objective_is_monotone_on_bundled_fixtures() {
    let (data, social) = load(&fixture("ratings_50.tsv"), &fixture("social_50.tsv"), 3).unwrap();
    let split = FoldSplit::new(data.ratings.len(), 5, 0).unwrap();
    let (train, test) = split.split(&data.ratings, 0);
    let rd = RatingData { m: data.m, n: data.n, train: &train, test: &test };
    for mode in [TrainMode::Mf, TrainMode::Soreg] {
        let cfg = TrainConfig { k: 4, epochs: 50, mode, ..TrainConfig::default() };
        let (_, metrics) = train_plain(rd, &social.to_sparse(), &cfg).unwrap();
        assert_monotone(&metrics.iter().map(|m| m.objective).collect::<Vec<_>>());
    }

    let (data, social) = s3rec::dataio::synth(&SynthConfig::default()).unwrap();
    let rd = RatingData { m: data.m, n: data.n, train: &data.ratings, test: &[] };
    let cfg = TrainConfig { epochs: 50, ..TrainConfig::default() };
    let (_, metrics) = train_plain(rd, &social.to_sparse(), &cfg).unwrap();
    assert_monotone(&metrics.iter().map(|m| m.objective).collect::<Vec<_>>());
}
