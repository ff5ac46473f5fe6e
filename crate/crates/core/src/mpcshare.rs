//! Additive secret sharing over `Z_{2^64}` with Beaver-triple multiplication.
//!
//! A value `x` is held as `x = x_0 + x_1 mod 2^64`, one summand per party.
//! Addition is local; multiplication consumes one triple and opens two
//! masked ring elements per party.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ring::{elements_from_bytes, elements_to_bytes, RingElement, RING_BYTES};
use crate::transport::{MsgType, PartySession, Phase};
use crate::PartyId;

/// One party's additive share of a secret, tagged with its fixed-point scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Share {
    pub owner: PartyId,
    pub value: RingElement,
    pub scale: u32,
}

impl Share {
    pub fn new(owner: PartyId, value: RingElement, scale: u32) -> Self {
        Share { owner, value, scale }
    }

    /// Share of the public constant `c`: party 0 holds `c`, party 1 holds 0.
    pub fn public(owner: PartyId, c: RingElement, scale: u32) -> Self {
        let value = if owner == PartyId::P0 { c } else { RingElement::ZERO };
        Share { owner, value, scale }
    }
}

/// Local addition. Zero communication.
pub fn add(x: Share, y: Share) -> Result<Share> {
    check_compatible(&x, &y)?;
    Ok(Share { value: x.value + y.value, ..x })
}

pub fn sub(x: Share, y: Share) -> Result<Share> {
    check_compatible(&x, &y)?;
    Ok(Share { value: x.value - y.value, ..x })
}

/// Multiplication by a public ring constant; the scale is unchanged.
pub fn scale_by(x: Share, c: RingElement) -> Share {
    Share { value: x.value * c, ..x }
}

fn check_compatible(x: &Share, y: &Share) -> Result<()> {
    if x.owner != y.owner {
        return Err(Error::usage(format!(
            "operands belong to different parties ({} vs {})",
            x.owner, y.owner
        )));
    }
    if x.scale != y.scale {
        return Err(Error::usage(format!("scale mismatch: {} vs {}", x.scale, y.scale)));
    }
    Ok(())
}

/// Reconstructs a secret from both shares.
pub fn reconstruct(s0: RingElement, s1: RingElement) -> RingElement {
    s0 + s1
}

/// Shares a batch of plaintexts held by the caller: the caller keeps
/// `x - r`, the peer receives `r` in one SHARE_BATCH frame.
pub fn shr_batch(session: &mut PartySession, xs: &[RingElement]) -> Result<Vec<RingElement>> {
    let masks: Vec<RingElement> = xs.iter().map(|_| RingElement::random(session.rng())).collect();
    session.send(Phase::Input, MsgType::ShareBatch, &elements_to_bytes(&masks))?;
    Ok(xs.iter().zip(&masks).map(|(&x, &r)| x - r).collect())
}

/// Receives the peer's side of [`shr_batch`].
pub fn recv_shares(session: &mut PartySession, count: usize) -> Result<Vec<RingElement>> {
    let payload = session.recv_expect(MsgType::ShareBatch)?;
    let shares = elements_from_bytes(&payload)?;
    if shares.len() != count {
        return Err(Error::protocol(format!(
            "expected {count} shared values, received {}",
            shares.len()
        )));
    }
    Ok(shares)
}

pub fn shr(session: &mut PartySession, x: RingElement, scale: u32) -> Result<Share> {
    let v = shr_batch(session, &[x])?;
    Ok(Share::new(session.party(), v[0], scale))
}

pub fn recv_share(session: &mut PartySession, scale: u32) -> Result<Share> {
    let v = recv_shares(session, 1)?;
    Ok(Share::new(session.party(), v[0], scale))
}

/// Opens a batch of shares towards `to`. The other party sends its shares in
/// the output phase and returns `None`.
pub fn rec_batch(
    session: &mut PartySession,
    shares: &[RingElement],
    to: PartyId,
) -> Result<Option<Vec<RingElement>>> {
    if session.party() == to {
        let payload = session.recv_expect(MsgType::OpenBatch)?;
        let theirs = elements_from_bytes(&payload)?;
        if theirs.len() != shares.len() {
            return Err(Error::protocol(format!(
                "expected {} shares to reconstruct, received {}",
                shares.len(),
                theirs.len()
            )));
        }
        Ok(Some(shares.iter().zip(&theirs).map(|(&a, &b)| a + b).collect()))
    } else {
        session.send(Phase::Output, MsgType::OpenBatch, &elements_to_bytes(shares))?;
        Ok(None)
    }
}

pub fn rec(session: &mut PartySession, s: Share, to: PartyId) -> Result<Option<RingElement>> {
    Ok(rec_batch(session, &[s.value], to)?.map(|v| v[0]))
}

/// One party's share of a multiplication triple `c = a * b`.
///
/// Not `Clone`: a triple is consumed by value so it cannot be used twice.
#[derive(Debug, PartialEq, Eq)]
pub struct BeaverTriple {
    pub owner: PartyId,
    pub a: RingElement,
    pub b: RingElement,
    pub c: RingElement,
}

/// Consume-once queue of one party's triple shares.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripleStore {
    owner: PartyId,
    a: Vec<RingElement>,
    b: Vec<RingElement>,
    c: Vec<RingElement>,
    next: usize,
}

/// Borrowed view over a contiguous run of triples taken from a store.
pub struct TripleBatch<'a> {
    pub a: &'a [RingElement],
    pub b: &'a [RingElement],
    pub c: &'a [RingElement],
}

impl TripleStore {
    pub fn empty(owner: PartyId) -> Self {
        TripleStore { owner, a: Vec::new(), b: Vec::new(), c: Vec::new(), next: 0 }
    }

    pub fn owner(&self) -> PartyId {
        self.owner
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn remaining(&self) -> usize {
        self.a.len() - self.next
    }

    pub fn consumed(&self) -> usize {
        self.next
    }

    fn push(&mut self, a: RingElement, b: RingElement, c: RingElement) {
        self.a.push(a);
        self.b.push(b);
        self.c.push(c);
    }

    /// Takes the next `count` triples. Fails without consuming anything when
    /// fewer remain.
    pub fn take(&mut self, count: usize) -> Result<TripleBatch<'_>> {
        if count > self.remaining() {
            return Err(Error::TriplesExhausted { requested: count, remaining: self.remaining() });
        }
        let range = self.next..self.next + count;
        self.next += count;
        Ok(TripleBatch { a: &self.a[range.clone()], b: &self.b[range.clone()], c: &self.c[range] })
    }

    pub fn take_one(&mut self) -> Result<BeaverTriple> {
        let owner = self.owner;
        let t = self.take(1)?;
        Ok(BeaverTriple { owner, a: t.a[0], b: t.b[0], c: t.c[0] })
    }

    /// Unconsumed triples as `(a, b, c)` tuples.
    pub fn iter_remaining(&self) -> impl Iterator<Item = (RingElement, RingElement, RingElement)> + '_ {
        (self.next..self.a.len()).map(move |i| (self.a[i], self.b[i], self.c[i]))
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.remaining() * 3 * RING_BYTES);
        for (a, b, c) in self.iter_remaining() {
            out.extend_from_slice(&a.to_le_bytes());
            out.extend_from_slice(&b.to_le_bytes());
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    fn from_bytes(owner: PartyId, bytes: &[u8]) -> Result<Self> {
        let words = elements_from_bytes(bytes)?;
        if words.len() % 3 != 0 {
            return Err(Error::protocol("triple payload is not a multiple of 24 bytes"));
        }
        let mut store = TripleStore::empty(owner);
        for t in words.chunks_exact(3) {
            store.push(t[0], t[1], t[2]);
        }
        Ok(store)
    }

    pub const FILE_MAGIC: &'static [u8; 4] = b"S3TR";

    /// Writes the unconsumed triples: `"S3TR" | count: u64 LE | count x (a, b, c)`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::FILE_MAGIC)?;
        w.write_all(&(self.remaining() as u64).to_le_bytes())?;
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(owner: PartyId, mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != Self::FILE_MAGIC {
            return Err(Error::Validation("not a triple store file (bad magic)".into()));
        }
        let mut count = [0u8; 8];
        r.read_exact(&mut count)?;
        let count = u64::from_le_bytes(count) as usize;
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != count * 3 * RING_BYTES {
            return Err(Error::Validation(format!(
                "triple file declares {count} triples but carries {} bytes",
                body.len()
            )));
        }
        Self::from_bytes(owner, &body)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(owner: PartyId, path: &Path) -> Result<Self> {
        Self::read_from(owner, BufReader::new(File::open(path)?))
    }
}

/// Trusted-dealer triple generation: `count` triples, shares for both parties.
pub fn dealer_generate(count: usize, seed: u64) -> (TripleStore, TripleStore) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut s0 = TripleStore::empty(PartyId::P0);
    let mut s1 = TripleStore::empty(PartyId::P1);
    for _ in 0..count {
        let a = RingElement::random(&mut rng);
        let b = RingElement::random(&mut rng);
        let c = a * b;
        let a0 = RingElement::random(&mut rng);
        let b0 = RingElement::random(&mut rng);
        let c0 = RingElement::random(&mut rng);
        s0.push(a0, b0, c0);
        s1.push(a - a0, b - b0, c - c0);
    }
    (s0, s1)
}

/// Checks that two stores hold consistent shares of valid triples.
pub fn verify_triples(s0: &TripleStore, s1: &TripleStore) -> bool {
    s0.remaining() == s1.remaining()
        && s0
            .iter_remaining()
            .zip(s1.iter_remaining())
            .all(|((a0, b0, c0), (a1, b1, c1))| (a0 + a1) * (b0 + b1) == c0 + c1)
}

/// Provisions this party's triple store from a dealer seed known to both
/// parties (benchmark-mode trusted dealer).
///
/// With `distribute`, each party emulates the dealer for its peer and ships
/// the peer's shares over the channel in the offline phase, so offline
/// traffic is exactly `24 * count` payload bytes per party.
pub fn provision_triples(
    session: &mut PartySession,
    count: usize,
    dealer_seed: u64,
    distribute: bool,
) -> Result<TripleStore> {
    let (s0, s1) = dealer_generate(count, dealer_seed);
    let (mine, theirs) = match session.party() {
        PartyId::P0 => (s0, s1),
        PartyId::P1 => (s1, s0),
    };
    if !distribute {
        return Ok(mine);
    }
    let received = session.exchange(Phase::Offline, MsgType::ShareBatch, &theirs.to_bytes())?;
    let store = TripleStore::from_bytes(session.party(), &received)?;
    if store.len() != count {
        return Err(Error::protocol(format!(
            "dealer delivered {} triples, expected {count}",
            store.len()
        )));
    }
    Ok(store)
}

/// Beaver multiplication of a batch of shared pairs.
///
/// Opens `x - a` and `y - b` for every pair in one OPEN_BATCH frame per party
/// (compute phase, 16 payload bytes per product). Result shares carry the sum
/// of the operand scales; the caller truncates.
pub fn mul_batch(
    session: &mut PartySession,
    xs: &[RingElement],
    ys: &[RingElement],
    store: &mut TripleStore,
) -> Result<Vec<RingElement>> {
    if xs.len() != ys.len() {
        return Err(Error::shape(format!(
            "mul_batch operands differ in length: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if store.owner() != session.party() {
        return Err(Error::usage(format!(
            "triple store belongs to {}, session is {}",
            store.owner(),
            session.party()
        )));
    }
    let n = xs.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let party = session.party();
    let t = store.take(n)?;
    let mut masked = Vec::with_capacity(2 * n);
    for i in 0..n {
        masked.push(xs[i] - t.a[i]);
        masked.push(ys[i] - t.b[i]);
    }
    let payload = elements_to_bytes(&masked);
    let theirs = elements_from_bytes(&session.exchange(Phase::Compute, MsgType::OpenBatch, &payload)?)?;
    if theirs.len() != 2 * n {
        return Err(Error::protocol(format!(
            "expected {} opened values, received {}",
            2 * n,
            theirs.len()
        )));
    }
    let out = (0..n)
        .map(|i| {
            let e = masked[2 * i] + theirs[2 * i];
            let f = masked[2 * i + 1] + theirs[2 * i + 1];
            let mut z = t.c[i] + e * t.b[i] + f * t.a[i];
            if party == PartyId::P0 {
                z += e * f;
            }
            z
        })
        .collect();
    Ok(out)
}

/// Single Beaver multiplication with an explicit triple.
pub fn mul(session: &mut PartySession, x: Share, y: Share, triple: BeaverTriple) -> Result<Share> {
    if x.owner != session.party() || y.owner != session.party() || triple.owner != session.party() {
        return Err(Error::usage("operands and triple must belong to the session's party"));
    }
    let mut store = TripleStore::empty(triple.owner);
    store.push(triple.a, triple.b, triple.c);
    let z = mul_batch(session, &[x.value], &[y.value], &mut store)?;
    Ok(Share::new(x.owner, z[0], x.scale + y.scale))
}
