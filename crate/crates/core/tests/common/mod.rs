#![allow(dead_code)]

use rand::Rng;
use s3rec::ahe::{keygen_unchecked, AheKeyPair};
use s3rec::mpcshare::dealer_generate;
use s3rec::ring::RingElement;
use s3rec::securemm::{
    matmul_dense_p0, matmul_dense_p1, matmul_insensitive_p0, matmul_insensitive_p1, matmul_sensitive_p0,
    matmul_sensitive_p1, reconstruct_matrix, sensitive_setup_p0, sensitive_setup_p1, ProtocolReport, SensitiveConfig,
};
use s3rec::sparsela::{DenseMatrix, SparseMatrix};
use s3rec::transport::{run_inproc, FrameRecord};

/// Small, insecure keys: fast enough for exhaustive integration tests.
pub fn small_key(seed: u64) -> AheKeyPair {
    keygen_unchecked(512, seed).expect("keygen")
}

pub fn random_x<R: Rng>(rng: &mut R, k: usize, m: usize) -> DenseMatrix<RingElement> {
    DenseMatrix::from_fn(k, m, |_, _| RingElement::random(rng))
}

/// Sparse `m x n` ring matrix; each entry is nonzero with probability `alpha`.
pub fn random_sparse<R: Rng>(rng: &mut R, m: usize, n: usize, alpha: f64) -> SparseMatrix<RingElement> {
    let mut entries = Vec::new();
    for a in 0..m {
        for j in 0..n {
            if rng.gen_bool(alpha) {
                entries.push((a, j, RingElement::new(rng.gen_range(1..u64::MAX))));
            }
        }
    }
    SparseMatrix::from_triplets(m, n, entries).expect("in range")
}

/// Sparse matrix with exactly the given support and random nonzero values.
pub fn with_support<R: Rng>(rng: &mut R, m: usize, n: usize, loc: &[(usize, usize)]) -> SparseMatrix<RingElement> {
    let entries = loc.iter().map(|&(a, j)| (a, j, RingElement::new(rng.gen_range(1..u64::MAX))));
    SparseMatrix::from_triplets(m, n, entries).expect("in range")
}

pub struct Run {
    pub z: DenseMatrix<RingElement>,
    pub reports: [ProtocolReport; 2],
    pub transcripts: [Vec<FrameRecord>; 2],
}

pub fn run_dense(x: &DenseMatrix<RingElement>, y: &DenseMatrix<RingElement>, seed: u64) -> Run {
    let (k, m) = x.shape();
    let n = y.cols();
    let (mut s0, mut s1) = dealer_generate(k * m * n, seed);
    let (r0, r1) = run_inproc(
        seed,
        |s| matmul_dense_p0(s, x, n, 0, &mut s0).map(|r| (r, s.transcript().to_vec())),
        |s| matmul_dense_p1(s, y, k, 0, &mut s1).map(|r| (r, s.transcript().to_vec())),
    );
    finish(r0.expect("P0"), r1.expect("P1"))
}

pub fn run_insensitive(x: &DenseMatrix<RingElement>, y: &SparseMatrix<RingElement>, seed: u64) -> Run {
    let k = x.rows();
    let (mut s0, mut s1) = dealer_generate(k * y.nnz(), seed);
    let pattern = y.pattern();
    let (r0, r1) = run_inproc(
        seed,
        |s| matmul_insensitive_p0(s, x, &pattern, 0, &mut s0).map(|r| (r, s.transcript().to_vec())),
        |s| matmul_insensitive_p1(s, y, k, 0, &mut s1).map(|r| (r, s.transcript().to_vec())),
    );
    finish(r0.expect("P0"), r1.expect("P1"))
}

pub fn run_sensitive(
    config: SensitiveConfig,
    key: &AheKeyPair,
    pir_key: Option<&AheKeyPair>,
    x: &DenseMatrix<RingElement>,
    y: &SparseMatrix<RingElement>,
    seed: u64,
) -> Run {
    let k = x.rows();
    let n = y.cols();
    let (r0, r1) = run_inproc(
        seed,
        |s| {
            let ctx = sensitive_setup_p0(s, key.clone(), config)?;
            matmul_sensitive_p0(s, &ctx, x, n, 0).map(|r| (r, s.transcript().to_vec()))
        },
        |s| {
            let ctx = sensitive_setup_p1(s, config, pir_key.cloned())?;
            matmul_sensitive_p1(s, &ctx, y, k, 0).map(|r| (r, s.transcript().to_vec()))
        },
    );
    finish(r0.expect("P0"), r1.expect("P1"))
}

type Side = ((s3rec::securemm::SharedMatrix, ProtocolReport), Vec<FrameRecord>);

fn finish(((z0, rep0), t0): Side, ((z1, rep1), t1): Side) -> Run {
    Run { z: reconstruct_matrix(&z0, &z1).expect("shapes"), reports: [rep0, rep1], transcripts: [t0, t1] }
}
