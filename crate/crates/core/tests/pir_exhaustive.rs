mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use s3rec::ahe::lift;
use s3rec::pir::{PirBackend, PirClient, PirDatabase, PirServer};
use s3rec::ring::RingElement;

fn random_db(rng: &mut ChaCha20Rng, count: usize, entry_size: usize) -> PirDatabase {
    PirDatabase::new((0..count).map(|_| (0..entry_size).map(|_| rng.gen()).collect()).collect()).unwrap()
}

fn check_all_indices(db: &PirDatabase, client: &mut PirClient, rng: &mut ChaCha20Rng) {
    let server = PirServer::new(db, client.backend(), &client.setup_message()).unwrap();
    let mut response_sizes = Vec::new();
    for i in 0..db.count() {
        let q = client.query(i, rng).unwrap();
        let r = server.respond(&q).unwrap();
        response_sizes.push(r.to_bytes().len());
        assert_eq!(client.extract(&r).unwrap(), db.entry(i).unwrap(), "index {i} of {}", db.count());
    }
    response_sizes.dedup();
    assert_eq!(response_sizes.len(), 1, "response size depends on the index");
}

#[test]
fn plain_backend_every_index_up_to_256_entries() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    for count in [1, 2, 3, 17, 64, 255, 256] {
        let db = random_db(&mut rng, count, 12);
        check_all_indices(&db, &mut PirClient::plain(count, 12), &mut rng);
    }
}

#[test]
fn ahe_linear_backend_every_index_of_64_entries() {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let key = common::small_key(31);
    for (count, entry_size) in [(1, 5), (3, 70), (64, 16)] {
        let db = random_db(&mut rng, count, entry_size);
        check_all_indices(&db, &mut PirClient::ahe_linear(count, entry_size, key.clone()), &mut rng);
    }
}

#[test]
fn entries_that_are_ciphertext_blobs_survive_retrieval() {
    // Column blobs as in the sensitive protocol: each entry is k fixed-width
    // ciphertexts under one key, fetched with PIR under another.
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let inner = common::small_key(41);
    let outer = common::small_key(42);
    let (k, m) = (3, 6);
    let values: Vec<Vec<RingElement>> = (0..m).map(|_| (0..k).map(|_| RingElement::random(&mut rng)).collect()).collect();
    let blobs: Vec<Vec<u8>> = values
        .iter()
        .map(|col| {
            let cts: Vec<_> = col.iter().map(|&v| inner.encrypt(&lift(v), &mut rng).unwrap()).collect();
            inner.public().encode_ciphertexts(&cts)
        })
        .collect();
    let entry_size = blobs[0].len();
    assert_eq!(entry_size, k * inner.public().ciphertext_bytes());
    let db = PirDatabase::new(blobs).unwrap();
    for backend in [PirBackend::Plain, PirBackend::AheLinear] {
        let mut client = match backend {
            PirBackend::Plain => PirClient::plain(m, entry_size),
            PirBackend::AheLinear => PirClient::ahe_linear(m, entry_size, outer.clone()),
        };
        let server = PirServer::new(&db, backend, &client.setup_message()).unwrap();
        for (a, expected) in values.iter().enumerate() {
            let q = client.query(a, &mut rng).unwrap();
            let blob = client.extract(&server.respond(&q).unwrap()).unwrap();
            let cts = inner.public().decode_ciphertexts(&blob).unwrap();
            let got: Vec<RingElement> = cts.iter().map(|c| s3rec::ahe::lower(&inner.decrypt(c).unwrap())).collect();
            assert_eq!(&got, expected, "{backend} column {a}");
        }
    }
}
