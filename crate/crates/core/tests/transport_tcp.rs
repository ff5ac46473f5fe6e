mod common;

use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use s3rec::mpcshare::dealer_generate;
use s3rec::securemm::{matmul_dense_p0, matmul_dense_p1, reconstruct_matrix};
use s3rec::sparsela::matmul_oracle_ring;
use s3rec::transport::{party_seeds, ChannelStats, PartySession, Phase};
use s3rec::PartyId;

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn tcp_and_inproc_record_identical_stats() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let (k, m, n) = (2, 4, 3);
    let x = common::random_x(&mut rng, k, m);
    let y = common::random_sparse(&mut rng, m, n, 0.7).to_dense();
    let seed = 77;

    let inproc = common::run_dense(&x, &y, seed);

    let addr = format!("127.0.0.1:{}", free_port());
    let (seed0, seed1) = party_seeds(seed);
    let (mut st0, mut st1) = dealer_generate(k * m * n, seed);
    let (r0, r1) = thread::scope(|scope| {
        let listen_addr = addr.clone();
        let yr = &y;
        let h = scope.spawn(move || {
            let mut s = PartySession::tcp_listen(listen_addr, PartyId::P1, seed1).unwrap();
            let out = matmul_dense_p1(&mut s, yr, k, 0, &mut st1).unwrap();
            (out, s.stats().clone())
        });
        let mut s = PartySession::tcp_connect(&addr, PartyId::P0, seed0, Duration::from_secs(5)).unwrap();
        let out = matmul_dense_p0(&mut s, &x, n, 0, &mut st0).unwrap();
        ((out, s.stats().clone()), h.join().unwrap())
    });
    let ((z0, rep0), stats0): ((_, _), ChannelStats) = r0;
    let ((z1, rep1), stats1) = r1;
    assert_eq!(reconstruct_matrix(&z0, &z1).unwrap(), matmul_oracle_ring(&x, &y).unwrap());
    assert_eq!(rep0.stats, inproc.reports[0].stats);
    assert_eq!(rep1.stats, inproc.reports[1].stats);
    assert_eq!(stats0.total_bytes_sent(), stats1.bytes_received());
    assert_eq!(stats1.total_bytes_sent(), stats0.bytes_received());
    assert_eq!(stats0.payload_sent(Phase::Compute), 16 * (k * m * n) as u64);
}
