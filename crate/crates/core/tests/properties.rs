mod common;

use std::sync::OnceLock;

use num_bigint::BigUint;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use s3rec::ahe::{lift, lower, AheKeyPair};
use s3rec::dataio::{filter_to_fixpoint, FoldSplit, RawRating};
use s3rec::ring::RingElement;
use s3rec::sparsela::{matmul_oracle_ring, matmul_sparse};
use s3rec::transport::Phase;

fn key() -> &'static AheKeyPair {
    static KEY: OnceLock<AheKeyPair> = OnceLock::new();
    KEY.get_or_init(|| common::small_key(61))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dense_protocol_equals_oracle(seed in any::<u64>(), k in 1usize..4, m in 1usize..6, n in 1usize..5) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let x = common::random_x(&mut rng, k, m);
        let y = common::random_x(&mut rng, m, n);
        let run = common::run_dense(&x, &y, seed);
        prop_assert_eq!(run.z, matmul_oracle_ring(&x, &y).unwrap());
        for (p, rep) in run.reports.iter().enumerate() {
            prop_assert_eq!(rep.stats.payload_sent(Phase::Compute), 16 * (k * m * n) as u64, "party {}", p);
        }
        prop_assert_eq!(run.reports[0].stats.total_bytes_sent(), run.reports[1].stats.bytes_received());
        prop_assert_eq!(run.reports[1].stats.total_bytes_sent(), run.reports[0].stats.bytes_received());
    }

    #[test]
    fn insensitive_protocol_equals_oracle(seed in any::<u64>(), k in 1usize..4, m in 1usize..8, n in 1usize..6, alpha in 0.05f64..1.0) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let x = common::random_x(&mut rng, k, m);
        let y = common::random_sparse(&mut rng, m, n, alpha);
        let run = common::run_insensitive(&x, &y, seed);
        prop_assert_eq!(run.z, matmul_oracle_ring(&x, &y.to_dense()).unwrap());
        prop_assert_eq!(run.reports[1].stats.payload_sent(Phase::Compute), 16 * (k * y.nnz()) as u64);
    }

    #[test]
    fn sparse_bins_equal_dense_oracle(seed in any::<u64>(), k in 1usize..5, m in 1usize..10, n in 1usize..10, alpha in 0.0f64..1.0) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let x = common::random_x(&mut rng, k, m);
        let y = common::random_sparse(&mut rng, m, n, alpha);
        prop_assert_eq!(matmul_sparse(&x, &y).unwrap(), matmul_oracle_ring(&x, &y.to_dense()).unwrap());
    }

    #[test]
    fn ahe_inner_product_is_exact(xs in proptest::collection::vec(any::<u64>(), 1..24), seed in any::<u64>()) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let key = key();
        let pk = key.public();
        let ys: Vec<u64> = xs.iter().map(|x| x.rotate_left(17) ^ seed).collect();
        let mut acc = pk.trivial_zero();
        let mut expected = BigUint::from(0u32);
        for (&x, &y) in xs.iter().zip(&ys) {
            let c = key.encrypt(&BigUint::from(x), &mut rng).unwrap();
            acc = pk.add(&acc, &pk.mul_plain(&c, &BigUint::from(y)).unwrap()).unwrap();
            expected += BigUint::from(x) * BigUint::from(y);
        }
        prop_assert_eq!(key.decrypt(&acc).unwrap(), expected % pk.n());
    }

    #[test]
    fn lift_lower_round_trip(v in any::<u64>()) {
        prop_assert_eq!(lower(&lift(RingElement::new(v))), RingElement::new(v));
    }

    #[test]
    fn folds_partition_all_ratings(count in 0usize..200, folds in 2usize..8, seed in any::<u64>()) {
        let split = FoldSplit::new(count, folds, seed).unwrap();
        let mut seen = vec![0; count];
        for f in 0..folds {
            let (train, test) = split.indices(f);
            prop_assert_eq!(train.len() + test.len(), count);
            for i in test {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        prop_assert_eq!(FoldSplit::new(count, folds, seed).unwrap(), split);
    }

    #[test]
    fn filtering_reaches_a_fixpoint(pairs in proptest::collection::vec((0u8..8, 0u8..8), 0..80), min in 0usize..6) {
        let raw: Vec<RawRating> = pairs
            .iter()
            .map(|&(u, i)| RawRating { user: format!("u{u}"), item: format!("i{i}"), value: 1.0 })
            .collect();
        let once = filter_to_fixpoint(raw, min);
        prop_assert_eq!(filter_to_fixpoint(once.clone(), min), once);
    }
}
