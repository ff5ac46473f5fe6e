//! Secure matrix multiplication between a dense `X` (held by P0) and `Y`
//! (held by P1), plus the composed social-term protocol.
//!
//! Three variants:
//! - dense: one Beaver triple per scalar product, `k*m*n` triples.
//! - insensitive: `l_y` is public, so only the `k*t` aligned pairs are
//!   multiplied.
//! - sensitive: `l_y` stays private to P1. P0 encrypts `X` under its Paillier
//!   key; P1 pulls the columns it needs (by PIR or by receiving all of them),
//!   accumulates homomorphically, masks, and sends the results back for P0
//!   to decrypt.
//!
//! Every role function takes the public dimensions as arguments and returns
//! its share together with a `ProtocolReport` measured from the session.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use num_bigint::{BigUint, RandBigInt};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ahe::{lift, lower, AheKeyPair, Ciphertext, PublicKey};
use crate::error::{Error, Result};
use crate::mpcshare::{mul_batch, rec_batch, recv_shares, shr_batch, TripleStore};
use crate::pir::{
    query_payload_bytes, response_payload_bytes, PirBackend, PirClient, PirDatabase, PirParams, PirQuery, PirResponse,
    PirServer,
};
use crate::ring::{FixedPointCodec, RingElement};
use crate::sparsela::{DenseMatrix, DiagonalMatrix, SparseMatrix, SparsityPattern};
use crate::transport::{ChannelStats, MsgType, PartySession, Phase};
use crate::PartyId;

/// Statistical security parameter for the sensitive protocol's masks.
pub const STAT_SECURITY_BITS: u32 = 40;

/// One party's additive shares of a matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedMatrix {
    owner: PartyId,
    rows: usize,
    cols: usize,
    shares: Vec<RingElement>,
    scale: u32,
}

impl SharedMatrix {
    pub fn new(owner: PartyId, rows: usize, cols: usize, shares: Vec<RingElement>, scale: u32) -> Result<Self> {
        if shares.len() != rows * cols {
            return Err(Error::shape(format!("{rows}x{cols} shared matrix with {} shares", shares.len())));
        }
        Ok(SharedMatrix { owner, rows, cols, shares, scale })
    }

    pub fn owner(&self) -> PartyId {
        self.owner
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn scale(&self) -> u32 {
        self.scale
    }

    pub fn shares(&self) -> &[RingElement] {
        &self.shares
    }

    pub fn add(&self, other: &SharedMatrix) -> Result<SharedMatrix> {
        if self.owner != other.owner || self.scale != other.scale || (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::usage("adding shared matrices with different owner, scale or shape"));
        }
        let shares = self.shares.iter().zip(&other.shares).map(|(&a, &b)| a + b).collect();
        Ok(SharedMatrix { shares, ..self.clone() })
    }

    /// Local truncation by `bits` on every share.
    pub fn truncate(&self, bits: u32) -> Result<SharedMatrix> {
        let scale = self
            .scale
            .checked_sub(bits)
            .ok_or_else(|| Error::usage(format!("cannot truncate {bits} bits from scale {}", self.scale)))?;
        let shares = self.shares.iter().map(|&s| crate::ring::trunc_local(s, bits, self.owner)).collect();
        Ok(SharedMatrix { shares, scale, ..self.clone() })
    }

    /// Opens the matrix towards `to`; only that party gets `Some`.
    pub fn open(&self, session: &mut PartySession, to: PartyId) -> Result<Option<DenseMatrix<RingElement>>> {
        Ok(rec_batch(session, &self.shares, to)?
            .map(|v| DenseMatrix::from_vec(self.rows, self.cols, v).expect("share count matches shape")))
    }
}

/// Combines both parties' shares without a channel (tests and oracles).
pub fn reconstruct_matrix(a: &SharedMatrix, b: &SharedMatrix) -> Result<DenseMatrix<RingElement>> {
    if a.owner == b.owner || (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(Error::usage("reconstruction needs one share matrix from each party"));
    }
    let data = a.shares.iter().zip(&b.shares).map(|(&x, &y)| x + y).collect();
    DenseMatrix::from_vec(a.rows, a.cols, data)
}

/// Per-party measurements of one protocol run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: String,
    pub party: usize,
    pub k: usize,
    pub m: usize,
    pub n: usize,
    pub t: usize,
    pub triples_consumed: u64,
    pub scalar_muls: u64,
    pub pir_queries: u64,
    pub ciphertexts_sent: u64,
    pub stats: ChannelStats,
    pub wall_ms: f64,
}

impl ProtocolReport {
    pub fn compute_payload(&self) -> u64 {
        self.stats.payload_sent(Phase::Compute)
    }

    /// Payload bytes sent in the input, compute and output phases.
    pub fn online_payload(&self) -> u64 {
        [Phase::Input, Phase::Compute, Phase::Output].iter().map(|&p| self.stats.payload_sent(p)).sum()
    }

    pub fn to_kv(&self) -> String {
        let mut out = format!(
            "protocol = {}\nparty = {}\nk = {}\nm = {}\nn = {}\nt = {}\ntriples_consumed = {}\nscalar_muls = {}\npir_queries = {}\nciphertexts_sent = {}\nwall_ms = {:.3}\n",
            self.protocol,
            self.party,
            self.k,
            self.m,
            self.n,
            self.t,
            self.triples_consumed,
            self.scalar_muls,
            self.pir_queries,
            self.ciphertexts_sent,
            self.wall_ms
        );
        out.push_str(&self.stats.to_kv());
        out
    }
}

/// Captures session counters at protocol start.
struct Meter {
    start: Instant,
    stats: ChannelStats,
    triples: usize,
}

impl Meter {
    fn start(session: &PartySession, store: Option<&TripleStore>) -> Self {
        Meter { start: Instant::now(), stats: session.stats().clone(), triples: store.map_or(0, TripleStore::consumed) }
    }

    fn finish(self, session: &PartySession, store: Option<&TripleStore>, mut report: ProtocolReport) -> ProtocolReport {
        report.party = session.party().index();
        report.stats = session.stats().since(&self.stats);
        report.triples_consumed = (store.map_or(0, TripleStore::consumed) - self.triples) as u64;
        report.wall_ms = self.start.elapsed().as_secs_f64() * 1e3;
        report
    }
}

fn ensure_triples(store: &TripleStore, needed: usize) -> Result<()> {
    if store.remaining() < needed {
        return Err(Error::TriplesExhausted { requested: needed, remaining: store.remaining() });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dense

/// Core of the dense protocol once both operands are shared.
fn dense_products(
    session: &mut PartySession,
    (k, m, n): (usize, usize, usize),
    x: &[RingElement],
    y: &[RingElement],
    store: &mut TripleStore,
) -> Result<Vec<RingElement>> {
    let mut xs = Vec::with_capacity(k * m * n);
    let mut ys = Vec::with_capacity(k * m * n);
    for i in 0..k {
        for j in 0..n {
            for a in 0..m {
                xs.push(x[i * m + a]);
                ys.push(y[a * n + j]);
            }
        }
    }
    let z = mul_batch(session, &xs, &ys, store)?;
    if m == 0 {
        return Ok(vec![RingElement::ZERO; k * n]);
    }
    Ok(z.chunks(m).map(|c| c.iter().copied().sum()).collect())
}

/// P0 side of the dense protocol; `n` is the public column count of `Y`.
pub fn matmul_dense_p0(
    session: &mut PartySession,
    x: &DenseMatrix<RingElement>,
    n: usize,
    scale: u32,
    store: &mut TripleStore,
) -> Result<(SharedMatrix, ProtocolReport)> {
    let (k, m) = x.shape();
    ensure_triples(store, k * m * n)?;
    let meter = Meter::start(session, Some(store));
    let x0 = shr_batch(session, x.data())?;
    let y0 = recv_shares(session, m * n)?;
    let z = dense_products(session, (k, m, n), &x0, &y0, store)?;
    let report = ProtocolReport { protocol: "dense".into(), k, m, n, t: m * n, scalar_muls: (k * m * n) as u64, ..Default::default() };
    Ok((SharedMatrix::new(PartyId::P0, k, n, z, scale)?, meter.finish(session, Some(store), report)))
}

/// P1 side of the dense protocol; `k` is the public row count of `X`.
pub fn matmul_dense_p1(
    session: &mut PartySession,
    y: &DenseMatrix<RingElement>,
    k: usize,
    scale: u32,
    store: &mut TripleStore,
) -> Result<(SharedMatrix, ProtocolReport)> {
    let (m, n) = y.shape();
    ensure_triples(store, k * m * n)?;
    let meter = Meter::start(session, Some(store));
    let x1 = recv_shares(session, k * m)?;
    let y1 = shr_batch(session, y.data())?;
    let z = dense_products(session, (k, m, n), &x1, &y1, store)?;
    let report = ProtocolReport { protocol: "dense".into(), k, m, n, t: m * n, scalar_muls: (k * m * n) as u64, ..Default::default() };
    Ok((SharedMatrix::new(PartyId::P1, k, n, z, scale)?, meter.finish(session, Some(store), report)))
}

// ---------------------------------------------------------------------------
// Insensitive sparsity

fn pattern_digest(pattern: &SparsityPattern, k: usize) -> Vec<u8> {
    let mut h = Sha256::new();
    h.update((k as u64).to_le_bytes());
    h.update(pattern.to_bytes());
    h.finalize().to_vec()
}

/// Both parties confirm they hold the same public `l_y`.
fn agree_on_pattern(session: &mut PartySession, pattern: &SparsityPattern, k: usize) -> Result<()> {
    let mine = pattern_digest(pattern, k);
    let theirs = session.exchange(Phase::Input, MsgType::Control, &mine)?;
    if theirs != mine {
        return Err(Error::protocol("parties disagree on the public sparsity pattern"));
    }
    Ok(())
}

/// Multiplies the aligned bin pairs and sums each bin. `x_bin_shares` are in
/// `(i, j, a)` order, `y_shares` in `l_y` order.
fn insensitive_products(
    session: &mut PartySession,
    k: usize,
    pattern: &SparsityPattern,
    x_bin_shares: &[RingElement],
    y_shares: &[RingElement],
    store: &mut TripleStore,
) -> Result<Vec<RingElement>> {
    let support = pattern.column_support();
    let ys: Vec<RingElement> = (0..k).flat_map(|_| support.iter().flatten().map(|&p| y_shares[p])).collect();
    let z = mul_batch(session, x_bin_shares, &ys, store)?;
    let mut out = Vec::with_capacity(k * pattern.cols());
    let mut it = z.into_iter();
    for _ in 0..k {
        for col in &support {
            out.push(it.by_ref().take(col.len()).sum());
        }
    }
    Ok(out)
}

/// P0 side of the insensitive protocol. `pattern` is the public `l_y`.
pub fn matmul_insensitive_p0(
    session: &mut PartySession,
    x: &DenseMatrix<RingElement>,
    pattern: &SparsityPattern,
    scale: u32,
    store: &mut TripleStore,
) -> Result<(SharedMatrix, ProtocolReport)> {
    let (k, m) = x.shape();
    if m != pattern.rows() {
        return Err(Error::shape(format!("X has {m} cols, Y has {} rows", pattern.rows())));
    }
    let t = pattern.nnz();
    ensure_triples(store, k * t)?;
    let meter = Meter::start(session, Some(store));
    agree_on_pattern(session, pattern, k)?;
    let support = pattern.column_support();
    let loc = pattern.loc();
    let bins: Vec<RingElement> =
        (0..k).flat_map(|i| support.iter().flatten().map(move |&p| x.get(i, loc[p].0))).collect();
    let x0 = shr_batch(session, &bins)?;
    let y0 = recv_shares(session, t)?;
    let z = insensitive_products(session, k, pattern, &x0, &y0, store)?;
    let report = ProtocolReport { protocol: "insensitive".into(), k, m, n: pattern.cols(), t, scalar_muls: (k * t) as u64, ..Default::default() };
    Ok((SharedMatrix::new(PartyId::P0, k, pattern.cols(), z, scale)?, meter.finish(session, Some(store), report)))
}

/// P1 side of the insensitive protocol.
pub fn matmul_insensitive_p1(
    session: &mut PartySession,
    y: &SparseMatrix<RingElement>,
    k: usize,
    scale: u32,
    store: &mut TripleStore,
) -> Result<(SharedMatrix, ProtocolReport)> {
    let pattern = y.pattern();
    let t = pattern.nnz();
    ensure_triples(store, k * t)?;
    let meter = Meter::start(session, Some(store));
    agree_on_pattern(session, &pattern, k)?;
    let x1 = recv_shares(session, k * t)?;
    let y1 = shr_batch(session, y.val())?;
    let z = insensitive_products(session, k, &pattern, &x1, &y1, store)?;
    let report = ProtocolReport { protocol: "insensitive".into(), k, m: y.rows(), n: y.cols(), t, scalar_muls: (k * t) as u64, ..Default::default() };
    Ok((SharedMatrix::new(PartyId::P1, k, y.cols(), z, scale)?, meter.finish(session, Some(store), report)))
}

// ---------------------------------------------------------------------------
// Sensitive sparsity

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SensitiveMode {
    Pir,
    FullTransfer,
}

impl SensitiveMode {
    fn tag(self) -> u8 {
        match self {
            SensitiveMode::Pir => 1,
            SensitiveMode::FullTransfer => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SensitiveMode::Pir => "pir",
            SensitiveMode::FullTransfer => "full-transfer",
        }
    }
}

impl fmt::Display for SensitiveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SensitiveMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pir" => Ok(SensitiveMode::Pir),
            "full-transfer" => Ok(SensitiveMode::FullTransfer),
            other => Err(Error::Config(format!("unknown sensitive mode '{other}' (pir | full-transfer)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitiveConfig {
    pub mode: SensitiveMode,
    pub pir: PirParams,
    /// Pads the PIR query count to this public bound with dummy queries.
    pub pad_queries_to: Option<usize>,
}

impl SensitiveConfig {
    pub fn pir(backend: PirBackend) -> Self {
        SensitiveConfig { mode: SensitiveMode::Pir, pir: PirParams::new(backend), pad_queries_to: None }
    }

    pub fn full_transfer() -> Self {
        SensitiveConfig { mode: SensitiveMode::FullTransfer, pir: PirParams::new(PirBackend::Plain), pad_queries_to: None }
    }

    pub fn protocol_name(&self) -> String {
        match self.mode {
            SensitiveMode::Pir => format!("sensitive-pir-{}", self.pir.backend),
            SensitiveMode::FullTransfer => "sensitive-full-transfer".into(),
        }
    }

    fn uses_ahe_pir(&self) -> bool {
        self.mode == SensitiveMode::Pir && self.pir.backend == PirBackend::AheLinear
    }
}

/// Query padding target `ceil(alpha_pub * m)`.
pub fn padding_target(alpha_pub: f64, m: usize) -> usize {
    (alpha_pub * m as f64).ceil() as usize
}

/// Bit bound on any accumulated inner product of `m` lifted ring values.
pub fn sum_bits(m: usize) -> u32 {
    128 + (usize::BITS - m.leading_zeros())
}

/// Rejects keys whose plaintext space cannot hold the masked inner product.
pub fn check_plaintext_space(pk: &PublicKey, m: usize) -> Result<()> {
    let needed = sum_bits(m) + STAT_SECURITY_BITS + 1;
    if needed >= pk.bits() {
        return Err(Error::Config(format!(
            "a {}-bit key cannot hold {needed}-bit masked sums for m = {m}",
            pk.bits()
        )));
    }
    Ok(())
}

/// P0's state after setup: its key pair and whatever P1's PIR client needs.
pub struct SensitiveP0 {
    key: AheKeyPair,
    config: SensitiveConfig,
    pir_setup: Vec<u8>,
}

/// P1's state after setup: P0's public key and its own PIR key if any.
pub struct SensitiveP1 {
    pk: PublicKey,
    config: SensitiveConfig,
    pir_key: Option<AheKeyPair>,
}

impl SensitiveP0 {
    pub fn config(&self) -> &SensitiveConfig {
        &self.config
    }
}

impl SensitiveP1 {
    pub fn config(&self) -> &SensitiveConfig {
        &self.config
    }

    pub fn peer_key(&self) -> &PublicKey {
        &self.pk
    }
}

/// Offline setup at P0: publishes the public key and mode, receives P1's PIR
/// client parameters.
pub fn sensitive_setup_p0(session: &mut PartySession, key: AheKeyPair, config: SensitiveConfig) -> Result<SensitiveP0> {
    config.pir.validate()?;
    let mut payload = vec![config.mode.tag(), config.pir.backend.tag()];
    payload.extend_from_slice(&key.public().to_bytes());
    session.send(Phase::Offline, MsgType::Control, &payload)?;
    let pir_setup = session.recv_expect(MsgType::Control)?;
    Ok(SensitiveP0 { key, config, pir_setup })
}

/// Offline setup at P1. `pir_key` is required for the `ahe-linear` backend
/// in pir mode and must differ from P0's key.
pub fn sensitive_setup_p1(
    session: &mut PartySession,
    config: SensitiveConfig,
    pir_key: Option<AheKeyPair>,
) -> Result<SensitiveP1> {
    config.pir.validate()?;
    if config.uses_ahe_pir() && pir_key.is_none() {
        return Err(Error::usage("ahe-linear PIR needs a client key at P1"));
    }
    let payload = session.recv_expect(MsgType::Control)?;
    if payload.len() < 2 || payload[0] != config.mode.tag() || payload[1] != config.pir.backend.tag() {
        return Err(Error::protocol("parties disagree on the sensitive-protocol configuration"));
    }
    let pk = PublicKey::from_bytes(&payload[2..])?;
    let pir_key = if config.uses_ahe_pir() { pir_key } else { None };
    if pir_key.as_ref().is_some_and(|k| k.public().n() == pk.n()) {
        return Err(Error::usage("the PIR client key must differ from P0's key"));
    }
    let setup = pir_key.as_ref().map(|k| k.public().to_bytes()).unwrap_or_default();
    session.send(Phase::Offline, MsgType::Control, &setup)?;
    Ok(SensitiveP1 { pk, config, pir_key })
}

/// P0 side of the sensitive protocol; `n` is the public column count of `Y`.
pub fn matmul_sensitive_p0(
    session: &mut PartySession,
    ctx: &SensitiveP0,
    x: &DenseMatrix<RingElement>,
    n: usize,
    scale: u32,
) -> Result<(SharedMatrix, ProtocolReport)> {
    let (k, m) = x.shape();
    let pk = ctx.key.public();
    check_plaintext_space(pk, m)?;
    let meter = Meter::start(session, None);
    let mut report = ProtocolReport { protocol: ctx.config.protocol_name(), k, m, n, ..Default::default() };

    // Column-major so each column of X is one contiguous blob.
    let mut columns: Vec<Vec<Ciphertext>> = Vec::with_capacity(m);
    for a in 0..m {
        let col = (0..k).map(|i| ctx.key.encrypt(&lift(x.get(i, a)), session.rng())).collect::<Result<Vec<_>>>()?;
        columns.push(col);
    }

    match ctx.config.mode {
        SensitiveMode::FullTransfer => {
            let all: Vec<Ciphertext> = columns.into_iter().flatten().collect();
            session.send(Phase::Input, MsgType::AheCiphertextBatch, &pk.encode_ciphertexts(&all))?;
            report.ciphertexts_sent = (k * m) as u64;
        }
        SensitiveMode::Pir => {
            let count = read_count(&session.recv_expect(MsgType::Control)?)?;
            if count > m.max(1) * 64 {
                return Err(Error::protocol(format!("implausible PIR query count {count}")));
            }
            if m == 0 {
                if count != 0 {
                    return Err(Error::protocol("PIR queries against an empty database"));
                }
            } else {
                let db = PirDatabase::new(columns.iter().map(|c| pk.encode_ciphertexts(c)).collect())?;
                let server = PirServer::new(&db, ctx.config.pir.backend, &ctx.pir_setup)?;
                for _ in 0..count {
                    let q = PirQuery::from_bytes(&session.recv_expect(MsgType::PirQuery)?)?;
                    let r = server.respond(&q)?;
                    session.send(Phase::Input, MsgType::PirResponse, &r.to_bytes())?;
                }
            }
            report.pir_queries = count as u64;
            report.ciphertexts_sent = (k * count) as u64;
        }
    }

    let masked = pk.decode_ciphertexts(&session.recv_expect(MsgType::AheCiphertextBatch)?)?;
    if masked.len() != k * n {
        return Err(Error::protocol(format!("expected {} masked ciphertexts, got {}", k * n, masked.len())));
    }
    let shares = masked.iter().map(|c| ctx.key.decrypt(c).map(|v| lower(&v))).collect::<Result<Vec<_>>>()?;
    Ok((SharedMatrix::new(PartyId::P0, k, n, shares, scale)?, meter.finish(session, None, report)))
}

/// P1 side of the sensitive protocol; `k` is the public row count of `X`.
pub fn matmul_sensitive_p1(
    session: &mut PartySession,
    ctx: &SensitiveP1,
    y: &SparseMatrix<RingElement>,
    k: usize,
    scale: u32,
) -> Result<(SharedMatrix, ProtocolReport)> {
    let (m, n) = (y.rows(), y.cols());
    let pk = &ctx.pk;
    check_plaintext_space(pk, m)?;
    let meter = Meter::start(session, None);
    let mut report =
        ProtocolReport { protocol: ctx.config.protocol_name(), k, m, n, t: y.nnz(), ..Default::default() };

    // columns[a] holds enc(x_{i,a}) for i < k once retrieved.
    let mut columns: Vec<Option<Vec<Ciphertext>>> = vec![None; m];
    match ctx.config.mode {
        SensitiveMode::FullTransfer => {
            let all = pk.decode_ciphertexts(&session.recv_expect(MsgType::AheCiphertextBatch)?)?;
            if all.len() != k * m {
                return Err(Error::protocol(format!("expected {} ciphertexts, got {}", k * m, all.len())));
            }
            let mut it = all.into_iter();
            for slot in columns.iter_mut() {
                *slot = Some(it.by_ref().take(k).collect());
            }
        }
        SensitiveMode::Pir => {
            let rows = y.distinct_rows();
            let total = match ctx.config.pad_queries_to {
                Some(bound) if rows.len() > bound => {
                    return Err(Error::Config(format!(
                        "{} distinct rows exceed the public padding bound {bound}",
                        rows.len()
                    )))
                }
                Some(bound) => bound,
                None => rows.len(),
            };
            if m == 0 && total > 0 {
                return Err(Error::Config("cannot pad PIR queries against an empty database".into()));
            }
            session.send(Phase::Input, MsgType::Control, &(total as u64).to_le_bytes())?;
            let blob_bytes = k * pk.ciphertext_bytes();
            let mut client = match &ctx.pir_key {
                Some(key) => PirClient::ahe_linear(m, blob_bytes, key.clone()),
                None => PirClient::plain(m, blob_bytes),
            };
            let dummies: Vec<usize> = (rows.len()..total).map(|_| session.rng().gen_range(0..m)).collect();
            for (idx, &a) in rows.iter().chain(&dummies).enumerate() {
                let q = client.query(a, session.rng())?;
                session.send(Phase::Input, MsgType::PirQuery, &q.to_bytes())?;
                let r = PirResponse::from_bytes(&session.recv_expect(MsgType::PirResponse)?)?;
                let blob = client.extract(&r)?;
                if idx < rows.len() {
                    let col = pk.decode_ciphertexts(&blob)?;
                    if col.len() != k {
                        return Err(Error::protocol("retrieved column has the wrong ciphertext count"));
                    }
                    columns[a] = Some(col);
                }
            }
            report.pir_queries = total as u64;
        }
    }

    let support = y.column_support();
    let mask_bits = (sum_bits(m) + STAT_SECURITY_BITS) as u64;
    let mut masked = Vec::with_capacity(k * n);
    let mut shares = Vec::with_capacity(k * n);
    for i in 0..k {
        for col in &support {
            let mut beta = pk.trivial_zero();
            for &p in col {
                let (a, _) = y.loc()[p];
                let enc_x = &columns[a].as_ref().expect("every supported row was retrieved")[i];
                beta = pk.add(&beta, &pk.mul_plain(enc_x, &lift(y.val()[p]))?)?;
            }
            let g: BigUint = session.rng().gen_biguint(mask_bits);
            masked.push(pk.add(&beta, &pk.encrypt(&g, session.rng())?)?);
            shares.push(-lower(&g));
        }
    }
    session.send(Phase::Compute, MsgType::AheCiphertextBatch, &pk.encode_ciphertexts(&masked))?;
    report.ciphertexts_sent = (k * n) as u64;
    report.scalar_muls = (k * y.nnz()) as u64;
    Ok((SharedMatrix::new(PartyId::P1, k, n, shares, scale)?, meter.finish(session, None, report)))
}

fn read_count(payload: &[u8]) -> Result<usize> {
    let raw: [u8; 8] = payload.try_into().map_err(|_| Error::protocol("malformed count frame"))?;
    Ok(u64::from_le_bytes(raw) as usize)
}

// ---------------------------------------------------------------------------
// Closed-form communication

/// Predicted payload bytes one party sends in each phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseBytes {
    pub offline: u64,
    pub input: u64,
    pub compute: u64,
    pub output: u64,
}

impl PhaseBytes {
    pub fn online(&self) -> u64 {
        self.input + self.compute + self.output
    }

    pub fn measured(stats: &ChannelStats) -> Self {
        PhaseBytes {
            offline: stats.payload_sent(Phase::Offline),
            input: stats.payload_sent(Phase::Input),
            compute: stats.payload_sent(Phase::Compute),
            output: stats.payload_sent(Phase::Output),
        }
    }
}

/// Dense protocol: `[P0, P1]`.
pub fn predict_dense(k: usize, m: usize, n: usize) -> [PhaseBytes; 2] {
    let compute = 16 * (k * m * n) as u64;
    [
        PhaseBytes { input: 8 * (k * m) as u64, compute, ..Default::default() },
        PhaseBytes { input: 8 * (m * n) as u64, compute, ..Default::default() },
    ]
}

/// Insensitive protocol: `[P0, P1]`, including the 32-byte pattern digest.
pub fn predict_insensitive(k: usize, t: usize) -> [PhaseBytes; 2] {
    let compute = 16 * (k * t) as u64;
    [
        PhaseBytes { input: 32 + 8 * (k * t) as u64, compute, ..Default::default() },
        PhaseBytes { input: 32 + 8 * t as u64, compute, ..Default::default() },
    ]
}

/// Sensitive protocol: `[P0, P1]` given `queries` PIR queries (ignored in
/// full-transfer mode). `pir_pk` is P1's PIR key for the `ahe-linear` backend.
pub fn predict_sensitive(
    config: &SensitiveConfig,
    pk: &PublicKey,
    pir_pk: Option<&PublicKey>,
    (k, m, n): (usize, usize, usize),
    queries: usize,
) -> [PhaseBytes; 2] {
    let c = pk.ciphertext_bytes() as u64;
    let (p0_input, p1_input) = match config.mode {
        SensitiveMode::FullTransfer => ((k * m) as u64 * c, 0),
        SensitiveMode::Pir => {
            let backend = config.pir.backend;
            let q = queries as u64;
            let resp = 1 + response_payload_bytes(backend, k * pk.ciphertext_bytes(), pir_pk) as u64;
            let query = 1 + query_payload_bytes(backend, m, pir_pk) as u64;
            (q * resp, 8 + q * query)
        }
    };
    [
        PhaseBytes { input: p0_input, ..Default::default() },
        PhaseBytes { input: p1_input, compute: (k * n) as u64 * c, ..Default::default() },
    ]
}

/// Offline setup bytes of the sensitive protocol: `[P0, P1]`.
pub fn predict_sensitive_setup(pk: &PublicKey, pir_pk: Option<&PublicKey>) -> [PhaseBytes; 2] {
    [
        PhaseBytes { offline: 2 + pk.to_bytes().len() as u64, ..Default::default() },
        PhaseBytes { offline: pir_pk.map_or(0, |p| p.to_bytes().len() as u64), ..Default::default() },
    ]
}

// ---------------------------------------------------------------------------
// Social term

/// Triples one social-term evaluation consumes for `k x m` factors.
pub fn st_mpc_triples(k: usize, m: usize) -> usize {
    k * m
}

/// Outcome of one social-term evaluation at a party.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StMpcReport {
    pub insensitive: ProtocolReport,
    pub sensitive: ProtocolReport,
    pub stats: ChannelStats,
}

/// P0 side of the social term `gamma/2 * U (D^T + E^T) - gamma * U S^T`.
/// Returns the decoded plaintext term.
pub fn st_mpc_p0(
    session: &mut PartySession,
    sensitive: &SensitiveP0,
    store: &mut TripleStore,
    codec: &FixedPointCodec,
    gamma: f64,
    u: &DenseMatrix<f64>,
) -> Result<(DenseMatrix<f64>, StMpcReport)> {
    let before = session.stats().clone();
    let (k, m) = u.shape();
    let f = codec.frac_bits();
    let half = DenseMatrix::from_vec(k, m, codec.encode_slice(u.scale(gamma / 2.0).data())?)?;
    let neg = DenseMatrix::from_vec(k, m, codec.encode_slice(u.scale(-gamma).data())?)?;
    let (r0, ins) = matmul_insensitive_p0(session, &half, &SparsityPattern::full_diagonal(m), 2 * f, store)?;
    let (r1, sen) = matmul_sensitive_p0(session, sensitive, &neg, m, 2 * f)?;
    let opened = r0.add(&r1)?.open(session, PartyId::P0)?.expect("P0 receives the opening");
    let term = opened.map(|e| codec.decode_at(e, 2 * f));
    let report = StMpcReport { insensitive: ins, sensitive: sen, stats: session.stats().since(&before) };
    Ok((term, report))
}

/// P1 side of the social term; `k` is the public latent dimension.
#[allow(clippy::too_many_arguments)]
pub fn st_mpc_p1(
    session: &mut PartySession,
    sensitive: &SensitiveP1,
    store: &mut TripleStore,
    codec: &FixedPointCodec,
    k: usize,
    d: &DiagonalMatrix,
    e: &DiagonalMatrix,
    s: &SparseMatrix<f64>,
) -> Result<StMpcReport> {
    let before = session.stats().clone();
    let f = codec.frac_bits();
    let m = s.rows();
    if d.dim() != m || e.dim() != m || s.cols() != m {
        return Err(Error::shape("D, E and S must all be m x m"));
    }
    let encode = |v: f64| codec.encode(v);
    let de = d.add(e)?.to_sparse();
    let de_ring = SparseMatrix::new(m, m, de.loc().to_vec(), de.val().iter().map(|&v| encode(v)).collect::<Result<_>>()?)?;
    let st = s.transpose();
    let st_ring = SparseMatrix::new(m, m, st.loc().to_vec(), st.val().iter().map(|&v| encode(v)).collect::<Result<_>>()?)?;
    let (r0, ins) = matmul_insensitive_p1(session, &de_ring, k, 2 * f, store)?;
    let (r1, sen) = matmul_sensitive_p1(session, sensitive, &st_ring, k, 2 * f)?;
    r0.add(&r1)?.open(session, PartyId::P0)?;
    Ok(StMpcReport { insensitive: ins, sensitive: sen, stats: session.stats().since(&before) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ahe::keygen_unchecked;
    use crate::mpcshare::dealer_generate;
    use crate::sparsela::{build_d_e, matmul_oracle, matmul_oracle_ring};
    use crate::transport::run_inproc;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::sync::OnceLock;

    fn key_p0() -> &'static AheKeyPair {
        static K: OnceLock<AheKeyPair> = OnceLock::new();
        K.get_or_init(|| keygen_unchecked(1024, 101).unwrap())
    }

    fn key_pir() -> &'static AheKeyPair {
        static K: OnceLock<AheKeyPair> = OnceLock::new();
        K.get_or_init(|| keygen_unchecked(1024, 202).unwrap())
    }

    fn ring_mat(rows: &[&[i64]]) -> DenseMatrix<RingElement> {
        DenseMatrix::from_rows(&rows.iter().map(|r| r.iter().map(|&v| RingElement::from_i64(v)).collect()).collect::<Vec<_>>())
            .unwrap()
    }

    fn ring_sparse(m: usize, n: usize, entries: &[(usize, usize, i64)]) -> SparseMatrix<RingElement> {
        SparseMatrix::from_triplets(m, n, entries.iter().map(|&(r, c, v)| (r, c, RingElement::from_i64(v)))).unwrap()
    }

    fn random_instance(rng: &mut ChaCha20Rng, k: usize, m: usize, alpha: f64) -> (DenseMatrix<RingElement>, SparseMatrix<RingElement>) {
        let x = DenseMatrix::from_fn(k, m, |_, _| RingElement::random(rng));
        let mut entries = Vec::new();
        for r in 0..m {
            for c in 0..m {
                if rng.gen_bool(alpha) {
                    entries.push((r, c, RingElement::random(rng)));
                }
            }
        }
        (x, SparseMatrix::from_triplets(m, m, entries).unwrap())
    }

    fn run_dense(x: &DenseMatrix<RingElement>, y: &DenseMatrix<RingElement>) -> (DenseMatrix<RingElement>, ProtocolReport, ProtocolReport) {
        let need = x.rows() * x.cols() * y.cols();
        let (mut st0, mut st1) = dealer_generate(need, 9);
        let (k, n) = (x.rows(), y.cols());
        let (a, b) = run_inproc(
            1,
            |s| matmul_dense_p0(s, x, n, 0, &mut st0).unwrap(),
            |s| matmul_dense_p1(s, y, k, 0, &mut st1).unwrap(),
        );
        (reconstruct_matrix(&a.0, &b.0).unwrap(), a.1, b.1)
    }

    fn run_insensitive(x: &DenseMatrix<RingElement>, y: &SparseMatrix<RingElement>) -> (DenseMatrix<RingElement>, ProtocolReport, ProtocolReport) {
        let need = x.rows() * y.nnz();
        let (mut st0, mut st1) = dealer_generate(need, 10);
        let k = x.rows();
        let pattern = y.pattern();
        let (a, b) = run_inproc(
            2,
            |s| matmul_insensitive_p0(s, x, &pattern, 0, &mut st0).unwrap(),
            |s| matmul_insensitive_p1(s, y, k, 0, &mut st1).unwrap(),
        );
        (reconstruct_matrix(&a.0, &b.0).unwrap(), a.1, b.1)
    }

    fn run_sensitive(
        config: SensitiveConfig,
        x: &DenseMatrix<RingElement>,
        y: &SparseMatrix<RingElement>,
    ) -> (DenseMatrix<RingElement>, ProtocolReport, ProtocolReport) {
        let (k, n) = (x.rows(), y.cols());
        let (a, b) = run_inproc(
            3,
            |s| {
                let ctx = sensitive_setup_p0(s, key_p0().clone(), config).unwrap();
                matmul_sensitive_p0(s, &ctx, x, n, 0).unwrap()
            },
            |s| {
                let ctx = sensitive_setup_p1(s, config, Some(key_pir().clone())).unwrap();
                matmul_sensitive_p1(s, &ctx, y, k, 0).unwrap()
            },
        );
        (reconstruct_matrix(&a.0, &b.0).unwrap(), a.1, b.1)
    }

    #[test]
    fn dense_examples() {
        let x = ring_mat(&[&[1, 2]]);
        let id = ring_mat(&[&[1, 0], &[0, 1]]);
        let (z, r0, r1) = run_dense(&x, &id);
        assert_eq!(z, x);
        assert_eq!(r0.triples_consumed, 4);
        assert_eq!(r0.compute_payload(), 16 * 4);
        assert_eq!(r1.compute_payload(), 16 * 4);
        let (z, _, _) = run_dense(&x, &ring_mat(&[&[0, 0], &[0, 0]]));
        assert_eq!(z, ring_mat(&[&[0, 0]]));
    }

    #[test]
    fn dense_random_matches_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let x = DenseMatrix::from_fn(4, 8, |_, _| RingElement::random(&mut rng));
        let y = DenseMatrix::from_fn(8, 8, |_, _| RingElement::random(&mut rng));
        let (z, r0, _) = run_dense(&x, &y);
        assert_eq!(z, matmul_oracle_ring(&x, &y).unwrap());
        assert_eq!(PhaseBytes::measured(&r0.stats), predict_dense(4, 8, 8)[0]);
    }

    #[test]
    fn dense_reports_triple_exhaustion() {
        let x = ring_mat(&[&[1, 2]]);
        let (mut st0, _) = dealer_generate(3, 1);
        let (mut s0, _s1) = PartySession::inproc_pair(0);
        let err = matmul_dense_p0(&mut s0, &x, 2, 0, &mut st0).unwrap_err();
        assert!(matches!(err, Error::TriplesExhausted { requested: 4, remaining: 3 }));
        assert_eq!(s0.stats().total_bytes_sent(), 0);
    }

    #[test]
    fn insensitive_examples() {
        let x = ring_mat(&[&[1, 2]]);
        let y = ring_sparse(2, 2, &[(0, 0, 3), (1, 1, 4)]);
        let (z, r0, r1) = run_insensitive(&x, &y);
        assert_eq!(z, ring_mat(&[&[3, 8]]));
        assert_eq!((r0.triples_consumed, r1.triples_consumed), (2, 2));

        let (z, r0, _) = run_insensitive(&x, &ring_sparse(2, 2, &[]));
        assert_eq!(z, ring_mat(&[&[0, 0]]));
        assert_eq!(r0.triples_consumed, 0);
        assert_eq!(r0.compute_payload(), 0);
    }

    #[test]
    fn insensitive_random_matches_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let (x, y) = random_instance(&mut rng, 3, 16, 0.1);
        let (z, r0, r1) = run_insensitive(&x, &y);
        assert_eq!(z, matmul_oracle_ring(&x, &y.to_dense()).unwrap());
        assert_eq!(r0.triples_consumed as usize, 3 * y.nnz());
        let pred = predict_insensitive(3, y.nnz());
        assert_eq!(PhaseBytes::measured(&r0.stats), pred[0]);
        assert_eq!(PhaseBytes::measured(&r1.stats), pred[1]);
    }

    #[test]
    fn insensitive_detects_pattern_disagreement() {
        let x = ring_mat(&[&[1, 2]]);
        let y = ring_sparse(2, 2, &[(0, 0, 3), (1, 1, 4)]);
        let wrong = SparsityPattern::new(2, 2, vec![(0, 1), (1, 1)]).unwrap();
        let (mut st0, mut st1) = dealer_generate(2, 3);
        let (a, b) = run_inproc(
            4,
            |s| matmul_insensitive_p0(s, &x, &wrong, 0, &mut st0),
            |s| matmul_insensitive_p1(s, &y, 1, 0, &mut st1),
        );
        assert!(matches!(a, Err(Error::Protocol(_))));
        assert!(matches!(b, Err(Error::Protocol(_))));
    }

    #[test]
    fn sensitive_examples_all_variants() {
        let configs = [
            SensitiveConfig::full_transfer(),
            SensitiveConfig::pir(PirBackend::Plain),
            SensitiveConfig::pir(PirBackend::AheLinear),
        ];
        let x = ring_mat(&[&[5, -7, 11], &[2, 3, -4]]);
        for config in configs {
            let (z, r0, r1) = run_sensitive(config, &x, &ring_sparse(3, 3, &[]));
            assert_eq!(z, ring_mat(&[&[0, 0, 0], &[0, 0, 0]]));
            assert_eq!(r1.pir_queries, 0);
            assert_eq!(r1.ciphertexts_sent, 6);
            if config.mode == SensitiveMode::FullTransfer {
                assert_eq!(r0.ciphertexts_sent, 6);
            }

            // y_{1,2} = 1 selects column 1 of X into column 2
            let (z, _, r1) = run_sensitive(config, &x, &ring_sparse(3, 3, &[(1, 2, 1)]));
            assert_eq!(z, ring_mat(&[&[0, 0, -7], &[0, 0, 3]]));
            if config.mode == SensitiveMode::Pir {
                assert_eq!(r1.pir_queries, 1);
            }
        }
    }

    #[test]
    fn sensitive_random_matches_oracle_and_formulas() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let (x, y) = random_instance(&mut rng, 2, 8, 0.2);
        let oracle = matmul_oracle_ring(&x, &y.to_dense()).unwrap();
        let pir_pk = key_pir().public();
        for config in [SensitiveConfig::full_transfer(), SensitiveConfig::pir(PirBackend::Plain), SensitiveConfig::pir(PirBackend::AheLinear)] {
            let (z, r0, r1) = run_sensitive(config, &x, &y);
            assert_eq!(z, oracle, "{}", config.protocol_name());
            let distinct = y.distinct_rows().len();
            if config.mode == SensitiveMode::Pir {
                assert_eq!(r1.pir_queries as usize, distinct);
                assert_eq!(r0.ciphertexts_sent as usize, 2 * distinct);
            }
            let pred = predict_sensitive(&config, key_p0().public(), Some(pir_pk), (2, 8, 8), distinct);
            let setup = predict_sensitive_setup(key_p0().public(), config.uses_ahe_pir().then_some(pir_pk));
            let m0 = PhaseBytes::measured(&r0.stats);
            let m1 = PhaseBytes::measured(&r1.stats);
            assert_eq!(PhaseBytes { offline: 0, ..m0 }, pred[0]);
            assert_eq!(PhaseBytes { offline: 0, ..m1 }, pred[1]);
            assert_eq!(setup[0].offline + setup[1].offline, 2 + key_p0().public().to_bytes().len() as u64 + if config.uses_ahe_pir() { pir_pk.to_bytes().len() as u64 } else { 0 });
        }
    }

    #[test]
    fn sensitive_padding_hides_distinct_rows() {
        let mut config = SensitiveConfig::pir(PirBackend::Plain);
        config.pad_queries_to = Some(padding_target(0.5, 4));
        let x = ring_mat(&[&[1, 2, 3, 4]]);
        let one = ring_sparse(4, 4, &[(2, 0, 9)]);
        let two = ring_sparse(4, 4, &[(0, 1, 1), (3, 3, 2)]);
        let (z1, _, r1) = run_sensitive(config, &x, &one);
        let (z2, _, r2) = run_sensitive(config, &x, &two);
        assert_eq!(z1, matmul_oracle_ring(&x, &one.to_dense()).unwrap());
        assert_eq!(z2, matmul_oracle_ring(&x, &two.to_dense()).unwrap());
        assert_eq!((r1.pir_queries, r2.pir_queries), (2, 2));
        assert_eq!(r1.stats, r2.stats);
    }

    #[test]
    fn plaintext_space_overflow_is_config_error() {
        assert_eq!(sum_bits(0), 128);
        assert_eq!(sum_bits(1), 129);
        assert_eq!(sum_bits(7), 131);
        assert_eq!(sum_bits(8), 132);
        // a 173-bit modulus holds 128 + 3 + 40 + 1 bits but not 128 + 4 + 40 + 1
        let pk = PublicKey::from_modulus((BigUint::from(1u8) << 172u32) | BigUint::from(1u8)).unwrap();
        assert!(check_plaintext_space(&pk, 7).is_ok());
        assert!(matches!(check_plaintext_space(&pk, 8), Err(Error::Config(_))));
    }

    #[test]
    fn mismatched_sensitive_configs_fail_setup() {
        let (a, b) = run_inproc(
            5,
            |s| sensitive_setup_p0(s, key_p0().clone(), SensitiveConfig::full_transfer()).map(|_| ()),
            |s| sensitive_setup_p1(s, SensitiveConfig::pir(PirBackend::Plain), None).map(|_| ()),
        );
        assert!(b.is_err());
        assert!(a.is_err());
    }

    #[test]
    fn fixed_point_product_within_bound() {
        let codec = FixedPointCodec::default();
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let (k, m) = (2, 10);
        let ulp = codec.ulp();
        // fixed-point representable inputs in (-2^8, 2^8)
        let xr = DenseMatrix::from_fn(k, m, |_, _| (rng.gen_range(-(1i64 << 28)..(1i64 << 28)) as f64) * ulp);
        let yr = DenseMatrix::from_fn(m, m, |_, _| (rng.gen_range(-(1i64 << 28)..(1i64 << 28)) as f64) * ulp);
        let x = xr.map(|v| codec.encode(v).unwrap());
        let y = yr.map(|v| codec.encode(v).unwrap());
        let (mut st0, mut st1) = dealer_generate(k * m * m, 15);
        let f = codec.frac_bits();
        let (a, b) = run_inproc(
            6,
            |s| matmul_dense_p0(s, &x, m, 2 * f, &mut st0).unwrap().0.truncate(f).unwrap(),
            |s| matmul_dense_p1(s, &y, k, 2 * f, &mut st1).unwrap().0.truncate(f).unwrap(),
        );
        let z = reconstruct_matrix(&a, &b).unwrap().map(|e| codec.decode(e));
        let truth = matmul_oracle(&xr, &yr).unwrap();
        assert!(z.max_abs_diff(&truth) <= (m + 1) as f64 * ulp);
    }

    #[test]
    fn st_mpc_matches_plaintext_social_term() {
        let codec = FixedPointCodec::default();
        let mut rng = ChaCha20Rng::seed_from_u64(16);
        let (k, m) = (2, 6);
        let u = DenseMatrix::from_fn(k, m, |_, _| rng.gen_range(-1.0..1.0));
        let mut entries = Vec::new();
        for r in 0..m {
            for c in 0..m {
                if rng.gen_bool(0.2) {
                    entries.push((r, c, 1.0));
                }
            }
        }
        let s = SparseMatrix::from_triplets(m, m, entries).unwrap();
        let (d, e) = build_d_e(&s).unwrap();
        let config = SensitiveConfig::full_transfer();
        for gamma in [0.5, 0.0] {
            let (mut st0, mut st1) = dealer_generate(st_mpc_triples(k, m), 17);
            let (term, _) = run_inproc(
                7,
                |sess| {
                    let ctx = sensitive_setup_p0(sess, key_p0().clone(), config).unwrap();
                    st_mpc_p0(sess, &ctx, &mut st0, &codec, gamma, &u).unwrap().0
                },
                |sess| {
                    let ctx = sensitive_setup_p1(sess, config, None).unwrap();
                    st_mpc_p1(sess, &ctx, &mut st1, &codec, k, &d, &e, &s).unwrap()
                },
            );
            let de = d.add(&e).unwrap().to_dense();
            let oracle = matmul_oracle(&u, &de)
                .unwrap()
                .scale(gamma / 2.0)
                .zip_with(&matmul_oracle(&u, &s.to_dense().transpose()).unwrap().scale(gamma), |a, b| a - b)
                .unwrap();
            assert!(term.max_abs_diff(&oracle) <= (m + 1) as f64 * codec.ulp(), "gamma {gamma}");
            if gamma == 0.0 {
                assert!(term.data().iter().all(|&v| v == 0.0));
            }
        }
    }
}
