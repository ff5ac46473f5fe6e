//! Single-server PIR behind a query / response / extract interface.
//!
//! Two backends:
//! - `plain`: the index travels in the clear. Insecure; used for functional
//!   tests and as a communication lower bound.
//! - `ahe-linear`: the client sends Paillier encryptions of the indicator
//!   vector `e_i` under its own key; the server answers each chunk position
//!   with `prod_a q_a^{chunk_a}`, an encryption of the chunk of entry `i`.
//!
//! Every query and response starts with a one-byte backend tag.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use num_traits::{One, Zero};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ahe::{AheKeyPair, Ciphertext, PublicKey};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PirBackend {
    Plain,
    AheLinear,
}

impl PirBackend {
    pub fn tag(self) -> u8 {
        match self {
            PirBackend::Plain => 1,
            PirBackend::AheLinear => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(PirBackend::Plain),
            2 => Ok(PirBackend::AheLinear),
            other => Err(Error::protocol(format!("unknown PIR backend tag {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PirBackend::Plain => "plain",
            PirBackend::AheLinear => "ahe-linear",
        }
    }
}

impl fmt::Display for PirBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PirBackend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(PirBackend::Plain),
            "ahe-linear" => Ok(PirBackend::AheLinear),
            other => Err(Error::Config(format!("unknown PIR backend '{other}'"))),
        }
    }
}

/// Backend selection plus recursion depth. Only depth 1 is implemented.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PirParams {
    pub backend: PirBackend,
    pub recursion_depth: u32,
}

impl PirParams {
    pub fn new(backend: PirBackend) -> Self {
        PirParams { backend, recursion_depth: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        match self.recursion_depth {
            1 => Ok(()),
            d => Err(Error::Unsupported(format!("PIR recursion depth {d}; only d = 1 is implemented"))),
        }
    }
}

/// Server-side database of equally sized opaque blobs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PirDatabase {
    entries: Vec<Vec<u8>>,
    entry_size: usize,
}

impl PirDatabase {
    pub fn new(entries: Vec<Vec<u8>>) -> Result<Self> {
        let entry_size = entries
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::usage("PIR database needs at least one entry"))?;
        if let Some(bad) = entries.iter().position(|e| e.len() != entry_size) {
            return Err(Error::shape(format!(
                "entry {bad} has {} bytes, expected {entry_size}",
                entries[bad].len()
            )));
        }
        Ok(PirDatabase { entries, entry_size })
    }

    pub fn count(&self) -> usize {
        self.entries.len()
    }

    pub fn entry_size(&self) -> usize {
        self.entry_size
    }

    pub fn entry(&self, i: usize) -> Option<&[u8]> {
        self.entries.get(i).map(Vec::as_slice)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PirQuery {
    pub backend: PirBackend,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PirResponse {
    pub backend: PirBackend,
    pub payload: Vec<u8>,
}

macro_rules! tagged_message {
    ($t:ty) => {
        impl $t {
            /// Wire form: backend tag byte followed by the payload.
            pub fn to_bytes(&self) -> Vec<u8> {
                let mut out = Vec::with_capacity(1 + self.payload.len());
                out.push(self.backend.tag());
                out.extend_from_slice(&self.payload);
                out
            }

            pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
                let (&tag, payload) = bytes
                    .split_first()
                    .ok_or_else(|| Error::protocol("empty PIR message"))?;
                Ok(Self { backend: PirBackend::from_tag(tag)?, payload: payload.to_vec() })
            }
        }
    };
}

tagged_message!(PirQuery);
tagged_message!(PirResponse);

/// Splits an entry into plaintext-sized chunks (the last may be shorter).
fn chunk_lengths(entry_size: usize, chunk_bytes: usize) -> Vec<usize> {
    let mut out = vec![chunk_bytes; entry_size / chunk_bytes];
    if !entry_size.is_multiple_of(chunk_bytes) {
        out.push(entry_size % chunk_bytes);
    }
    out
}

/// Client side: builds queries and extracts responses.
pub struct PirClient {
    backend: PirBackend,
    count: usize,
    entry_size: usize,
    key: Option<AheKeyPair>,
    outstanding: usize,
}

impl fmt::Debug for PirClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PirClient")
            .field("backend", &self.backend)
            .field("count", &self.count)
            .field("entry_size", &self.entry_size)
            .finish_non_exhaustive()
    }
}

impl PirClient {
    pub fn plain(count: usize, entry_size: usize) -> Self {
        PirClient { backend: PirBackend::Plain, count, entry_size, key: None, outstanding: 0 }
    }

    /// `key` must be the client's own key pair, distinct from any key used
    /// to produce the database contents.
    pub fn ahe_linear(count: usize, entry_size: usize, key: AheKeyPair) -> Self {
        PirClient { backend: PirBackend::AheLinear, count, entry_size, key: Some(key), outstanding: 0 }
    }

    pub fn backend(&self) -> PirBackend {
        self.backend
    }

    /// Bytes the server needs before answering: the client's public key for
    /// `ahe-linear`, nothing for `plain`.
    pub fn setup_message(&self) -> Vec<u8> {
        match &self.key {
            Some(k) => k.public().to_bytes(),
            None => Vec::new(),
        }
    }

    pub fn query<R: Rng + ?Sized>(&mut self, i: usize, rng: &mut R) -> Result<PirQuery> {
        if i >= self.count {
            return Err(Error::Range(format!("PIR index {i} out of range for {} entries", self.count)));
        }
        let payload = match self.backend {
            PirBackend::Plain => (i as u64).to_le_bytes().to_vec(),
            PirBackend::AheLinear => {
                let key = self.key.as_ref().expect("ahe-linear client holds a key");
                let one = BigUint::one();
                let zero = BigUint::zero();
                let cts = (0..self.count)
                    .map(|a| key.encrypt(if a == i { &one } else { &zero }, rng))
                    .collect::<Result<Vec<_>>>()?;
                key.public().encode_ciphertexts(&cts)
            }
        };
        self.outstanding += 1;
        Ok(PirQuery { backend: self.backend, payload })
    }

    pub fn extract(&mut self, response: &PirResponse) -> Result<Vec<u8>> {
        if response.backend != self.backend {
            return Err(Error::protocol("PIR response backend does not match the client"));
        }
        if self.outstanding == 0 {
            return Err(Error::protocol("PIR response without an outstanding query"));
        }
        let blob = match self.backend {
            PirBackend::Plain => {
                if response.payload.len() != self.entry_size {
                    return Err(Error::protocol(format!(
                        "plain PIR response has {} bytes, expected {}",
                        response.payload.len(),
                        self.entry_size
                    )));
                }
                response.payload.clone()
            }
            PirBackend::AheLinear => {
                let key = self.key.as_ref().expect("ahe-linear client holds a key");
                let pk = key.public();
                let lens = chunk_lengths(self.entry_size, pk.plaintext_chunk_bytes());
                let cts = pk.decode_ciphertexts(&response.payload)?;
                if cts.len() != lens.len() {
                    return Err(Error::protocol(format!(
                        "ahe-linear response carries {} chunks, expected {}",
                        cts.len(),
                        lens.len()
                    )));
                }
                let mut blob = Vec::with_capacity(self.entry_size);
                for (c, len) in cts.iter().zip(lens) {
                    let m = key.decrypt(c)?.to_bytes_be();
                    if m.len() > len && !(m.len() == 1 && m[0] == 0) {
                        return Err(Error::protocol("decrypted PIR chunk exceeds its width"));
                    }
                    let m = if m == [0] { Vec::new() } else { m };
                    blob.extend(std::iter::repeat_n(0u8, len - m.len()));
                    blob.extend_from_slice(&m);
                }
                blob
            }
        };
        self.outstanding -= 1;
        Ok(blob)
    }
}

/// Server side. Stateless apart from the immutable database and, for
/// `ahe-linear`, the client's public key.
pub struct PirServer<'a> {
    db: &'a PirDatabase,
    client_pk: Option<PublicKey>,
}

impl<'a> PirServer<'a> {
    pub fn new(db: &'a PirDatabase, backend: PirBackend, setup: &[u8]) -> Result<Self> {
        let client_pk = match backend {
            PirBackend::Plain => None,
            PirBackend::AheLinear => Some(PublicKey::from_bytes(setup)?),
        };
        Ok(PirServer { db, client_pk })
    }

    pub fn respond(&self, q: &PirQuery) -> Result<PirResponse> {
        let payload = match (q.backend, &self.client_pk) {
            (PirBackend::Plain, None) => {
                let raw: [u8; 8] = q
                    .payload
                    .as_slice()
                    .try_into()
                    .map_err(|_| Error::protocol("plain PIR query must be 8 bytes"))?;
                let i = u64::from_le_bytes(raw) as usize;
                self.db
                    .entry(i)
                    .ok_or_else(|| Error::protocol(format!("PIR index {i} out of range")))?
                    .to_vec()
            }
            (PirBackend::AheLinear, Some(pk)) => {
                let selectors = pk.decode_ciphertexts(&q.payload)?;
                if selectors.len() != self.db.count() {
                    return Err(Error::protocol(format!(
                        "ahe-linear query has {} selectors for {} entries",
                        selectors.len(),
                        self.db.count()
                    )));
                }
                let chunk_bytes = pk.plaintext_chunk_bytes();
                let lens = chunk_lengths(self.db.entry_size(), chunk_bytes);
                let mut answers: Vec<Ciphertext> = Vec::with_capacity(lens.len());
                let mut offset = 0;
                for len in lens {
                    let mut acc = pk.trivial_zero();
                    for (a, sel) in selectors.iter().enumerate() {
                        let entry = self.db.entry(a).expect("index below count");
                        let chunk = BigUint::from_bytes_be(&entry[offset..offset + len]);
                        if chunk.is_zero() {
                            continue;
                        }
                        acc = pk.add(&acc, &pk.mul_plain(sel, &chunk)?)?;
                    }
                    answers.push(acc);
                    offset += len;
                }
                pk.encode_ciphertexts(&answers)
            }
            _ => return Err(Error::protocol("PIR query backend does not match the server")),
        };
        Ok(PirResponse { backend: q.backend, payload })
    }
}

/// Response payload size in bytes (excluding the tag) for one query.
pub fn response_payload_bytes(backend: PirBackend, entry_size: usize, client_pk: Option<&PublicKey>) -> usize {
    match backend {
        PirBackend::Plain => entry_size,
        PirBackend::AheLinear => {
            let pk = client_pk.expect("ahe-linear sizing needs the client key");
            chunk_lengths(entry_size, pk.plaintext_chunk_bytes()).len() * pk.ciphertext_bytes()
        }
    }
}

/// Query payload size in bytes (excluding the tag).
pub fn query_payload_bytes(backend: PirBackend, count: usize, client_pk: Option<&PublicKey>) -> usize {
    match backend {
        PirBackend::Plain => 8,
        PirBackend::AheLinear => count * client_pk.expect("ahe-linear sizing needs the client key").ciphertext_bytes(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ahe::keygen_unchecked;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn u64_db(values: &[u64]) -> PirDatabase {
        PirDatabase::new(values.iter().map(|v| v.to_le_bytes().to_vec()).collect()).unwrap()
    }

    fn fetch(client: &mut PirClient, db: &PirDatabase, i: usize, rng: &mut ChaCha20Rng) -> Vec<u8> {
        let server = PirServer::new(db, client.backend(), &client.setup_message()).unwrap();
        let q = PirQuery::from_bytes(&client.query(i, rng).unwrap().to_bytes()).unwrap();
        let r = PirResponse::from_bytes(&server.respond(&q).unwrap().to_bytes()).unwrap();
        client.extract(&r).unwrap()
    }

    #[test]
    fn plain_query_payload_is_le_index() {
        let mut c = PirClient::plain(4, 8);
        let q = c.query(2, &mut ChaCha20Rng::seed_from_u64(0)).unwrap();
        assert_eq!(q.payload, 2u64.to_le_bytes());
        assert_eq!(q.to_bytes()[0], 1);
    }

    #[test]
    fn plain_examples() {
        let db = u64_db(&[10, 20, 30, 40]);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut c = PirClient::plain(4, 8);
        assert_eq!(fetch(&mut c, &db, 2, &mut rng), 30u64.to_le_bytes());
        let single = u64_db(&[99]);
        let mut c = PirClient::plain(1, 8);
        assert_eq!(fetch(&mut c, &single, 0, &mut rng), 99u64.to_le_bytes());
    }

    #[test]
    fn ahe_linear_examples() {
        let key = keygen_unchecked(512, 51).unwrap();
        let db = u64_db(&[10, 20, 30, 40]);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut c = PirClient::ahe_linear(4, 8, key.clone());
        let q = c.query(2, &mut rng).unwrap();
        assert_eq!(q.payload.len(), 4 * key.public().ciphertext_bytes());
        // the indicator decrypts to e_2
        let sel = key.public().decode_ciphertexts(&q.payload).unwrap();
        let plain: Vec<BigUint> = sel.iter().map(|s| key.decrypt(s).unwrap()).collect();
        let expect: Vec<BigUint> = (0..4).map(|a| BigUint::from((a == 2) as u32)).collect();
        assert_eq!(plain, expect);
        let server = PirServer::new(&db, PirBackend::AheLinear, &c.setup_message()).unwrap();
        let r = server.respond(&q).unwrap();
        assert_eq!(c.extract(&r).unwrap(), 30u64.to_le_bytes());
    }

    #[test]
    fn index_out_of_range() {
        let mut c = PirClient::plain(4, 8);
        assert!(matches!(c.query(4, &mut ChaCha20Rng::seed_from_u64(0)), Err(Error::Range(_))));
    }

    #[test]
    fn malformed_queries_are_protocol_errors() {
        let db = u64_db(&[1, 2]);
        let server = PirServer::new(&db, PirBackend::Plain, &[]).unwrap();
        let bad = PirQuery { backend: PirBackend::Plain, payload: vec![0; 7] };
        assert!(matches!(server.respond(&bad), Err(Error::Protocol(_))));
        let oob = PirQuery { backend: PirBackend::Plain, payload: 5u64.to_le_bytes().to_vec() };
        assert!(matches!(server.respond(&oob), Err(Error::Protocol(_))));
        let wrong = PirQuery { backend: PirBackend::AheLinear, payload: vec![] };
        assert!(matches!(server.respond(&wrong), Err(Error::Protocol(_))));
        assert!(PirQuery::from_bytes(&[9, 0]).is_err());
        assert!(PirQuery::from_bytes(&[]).is_err());
    }

    #[test]
    fn extract_without_query_fails() {
        let mut c = PirClient::plain(2, 8);
        let r = PirResponse { backend: PirBackend::Plain, payload: vec![0; 8] };
        assert!(matches!(c.extract(&r), Err(Error::Protocol(_))));
    }

    #[test]
    fn database_validation() {
        assert!(PirDatabase::new(vec![]).is_err());
        assert!(matches!(PirDatabase::new(vec![vec![1], vec![1, 2]]), Err(Error::Shape(_))));
    }

    #[test]
    fn recursion_depth_above_one_is_unsupported() {
        let mut p = PirParams::new(PirBackend::AheLinear);
        assert!(p.validate().is_ok());
        p.recursion_depth = 2;
        assert!(matches!(p.validate(), Err(Error::Unsupported(_))));
    }

    #[test]
    fn chunking_reassembles_long_blobs() {
        // 600-byte blobs over a 512-bit client key: chunk width 63 bytes.
        let key = keygen_unchecked(512, 52).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let entries: Vec<Vec<u8>> = (0..3)
            .map(|i| {
                let mut e: Vec<u8> = (0..600).map(|_| rng.gen()).collect();
                e[0] = 0; // leading zeros must survive
                e[1] = if i == 0 { 0 } else { e[1] };
                e
            })
            .collect();
        let db = PirDatabase::new(entries.clone()).unwrap();
        let mut c = PirClient::ahe_linear(3, 600, key.clone());
        for (i, e) in entries.iter().enumerate() {
            assert_eq!(&fetch(&mut c, &db, i, &mut rng), e);
        }
        assert_eq!(
            response_payload_bytes(PirBackend::AheLinear, 600, Some(key.public())),
            600usize.div_ceil(63) * key.public().ciphertext_bytes()
        );
    }

    #[test]
    fn ahe_linear_query_hides_index_bytes() {
        let key = keygen_unchecked(512, 53).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut c = PirClient::ahe_linear(8, 8, key);
        let q3 = c.query(3, &mut rng).unwrap();
        let q5 = c.query(5, &mut rng).unwrap();
        assert_eq!(q3.payload.len(), q5.payload.len());
        for (q, i) in [(&q3, 3u64), (&q5, 5u64)] {
            let needle = i.to_le_bytes();
            assert!(!q.payload.windows(8).any(|w| w == needle));
        }
    }
}
