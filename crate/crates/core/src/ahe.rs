//! Paillier additively homomorphic encryption.
//!
//! `Enc(m) = (1 + m n) r^n mod n^2`. Ciphertext multiplication adds
//! plaintexts; exponentiation by a plaintext scales them. The key holder
//! encrypts and decrypts through CRT over `p^2` and `q^2`.

use std::fmt;
use std::fs;
use std::path::Path;

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ring::RingElement;

/// Modulus sizes accepted by [`keygen`].
pub const SUPPORTED_BITS: [u32; 2] = [2048, 3072];

pub const DEFAULT_BITS: u32 = 2048;

#[derive(Clone, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    bits: u32,
    fingerprint: u64,
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({} bits, fp {:016x})", self.bits, self.fingerprint)
    }
}

impl PublicKey {
    pub fn from_modulus(n: BigUint) -> Result<Self> {
        if n.is_zero() || n.is_even() {
            return Err(Error::Validation("Paillier modulus must be odd and non-zero".into()));
        }
        let bits = n.bits() as u32;
        let digest = Sha256::digest(n.to_bytes_be());
        let fingerprint = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let n_squared = &n * &n;
        Ok(PublicKey { n, n_squared, bits, fingerprint })
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Fixed width of a serialized ciphertext magnitude (bytes of `n^2`).
    pub fn ciphertext_magnitude_bytes(&self) -> usize {
        (self.n_squared.bits() as usize).div_ceil(8)
    }

    /// Full serialized ciphertext width: 4-byte length prefix + magnitude.
    pub fn ciphertext_bytes(&self) -> usize {
        4 + self.ciphertext_magnitude_bytes()
    }

    /// Largest whole number of bytes that always fits below `n`.
    pub fn plaintext_chunk_bytes(&self) -> usize {
        (self.bits as usize - 1) / 8
    }

    fn check_plaintext(&self, m: &BigUint) -> Result<()> {
        if m >= &self.n {
            return Err(Error::Range(format!(
                "plaintext of {} bits does not fit below the {}-bit modulus",
                m.bits(),
                self.bits
            )));
        }
        Ok(())
    }

    fn random_unit<R: Rng + ?Sized>(&self, rng: &mut R) -> BigUint {
        loop {
            let r = rng.gen_biguint_below(&self.n);
            if !r.is_zero() && r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }

    /// Encrypts `m` in `[0, n)` with fresh randomness from `rng`.
    pub fn encrypt<R: Rng + ?Sized>(&self, m: &BigUint, rng: &mut R) -> Result<Ciphertext> {
        self.check_plaintext(m)?;
        let r = self.random_unit(rng);
        let rn = r.modpow(&self.n, &self.n_squared);
        Ok(self.finish_encryption(m, &rn))
    }

    fn finish_encryption(&self, m: &BigUint, rn: &BigUint) -> Ciphertext {
        // (1 + n)^m = 1 + m n (mod n^2)
        let gm = (BigUint::one() + m * &self.n) % &self.n_squared;
        Ciphertext { value: (gm * rn) % &self.n_squared, key: self.fingerprint }
    }

    pub fn encrypt_u64<R: Rng + ?Sized>(&self, m: u64, rng: &mut R) -> Result<Ciphertext> {
        self.encrypt(&BigUint::from(m), rng)
    }

    /// Encryption of zero with randomness 1; a neutral starting accumulator.
    pub fn trivial_zero(&self) -> Ciphertext {
        Ciphertext { value: BigUint::one(), key: self.fingerprint }
    }

    fn check_key(&self, c: &Ciphertext) -> Result<()> {
        if c.key != self.fingerprint {
            return Err(Error::usage("ciphertext was produced under a different public key"));
        }
        Ok(())
    }

    /// `Enc(x) (+) Enc(y) = Enc(x + y mod n)`.
    pub fn add(&self, x: &Ciphertext, y: &Ciphertext) -> Result<Ciphertext> {
        self.check_key(x)?;
        self.check_key(y)?;
        Ok(Ciphertext { value: (&x.value * &y.value) % &self.n_squared, key: self.fingerprint })
    }

    /// `Enc(x) (x) k = Enc(x k mod n)`.
    pub fn mul_plain(&self, x: &Ciphertext, k: &BigUint) -> Result<Ciphertext> {
        self.check_key(x)?;
        self.check_plaintext(k)?;
        Ok(Ciphertext { value: x.value.modpow(k, &self.n_squared), key: self.fingerprint })
    }

    /// Serialized public key: 4-byte LE length + big-endian `n`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mag = self.n.to_bytes_be();
        let mut out = Vec::with_capacity(4 + mag.len());
        out.extend_from_slice(&(mag.len() as u32).to_le_bytes());
        out.extend_from_slice(&mag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (n, rest) = read_length_prefixed(bytes)?;
        if !rest.is_empty() {
            return Err(Error::protocol("trailing bytes after public key"));
        }
        Self::from_modulus(n)
    }

    pub fn decode_ciphertext(&self, bytes: &[u8]) -> Result<Ciphertext> {
        if bytes.len() != self.ciphertext_bytes() {
            return Err(Error::protocol(format!(
                "ciphertext must be {} bytes, got {}",
                self.ciphertext_bytes(),
                bytes.len()
            )));
        }
        let (value, _) = read_length_prefixed(bytes)?;
        if value >= self.n_squared {
            return Err(Error::protocol("ciphertext value outside [0, n^2)"));
        }
        Ok(Ciphertext { value, key: self.fingerprint })
    }

    /// Fixed-width concatenation of ciphertexts.
    pub fn encode_ciphertexts(&self, cts: &[Ciphertext]) -> Vec<u8> {
        let mut out = Vec::with_capacity(cts.len() * self.ciphertext_bytes());
        for c in cts {
            c.write_fixed(self.ciphertext_magnitude_bytes(), &mut out);
        }
        out
    }

    pub fn decode_ciphertexts(&self, bytes: &[u8]) -> Result<Vec<Ciphertext>> {
        let w = self.ciphertext_bytes();
        if !bytes.len().is_multiple_of(w) {
            return Err(Error::protocol(format!(
                "ciphertext batch of {} bytes is not a multiple of {w}",
                bytes.len()
            )));
        }
        bytes.chunks_exact(w).map(|c| self.decode_ciphertext(c)).collect()
    }
}

fn read_length_prefixed(bytes: &[u8]) -> Result<(BigUint, &[u8])> {
    if bytes.len() < 4 {
        return Err(Error::protocol("missing length prefix"));
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 4 + len {
        return Err(Error::protocol(format!(
            "length prefix announces {len} bytes, only {} present",
            bytes.len() - 4
        )));
    }
    Ok((BigUint::from_bytes_be(&bytes[4..4 + len]), &bytes[4 + len..]))
}

/// Paillier ciphertext, tagged with the fingerprint of its public key.
#[derive(Clone, PartialEq, Eq)]
pub struct Ciphertext {
    value: BigUint,
    key: u64,
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Ciphertext({} bits, key {:016x})", self.value.bits(), self.key)
    }
}

impl Ciphertext {
    pub fn value(&self) -> &BigUint {
        &self.value
    }

    fn write_fixed(&self, width: usize, out: &mut Vec<u8>) {
        let mag = self.value.to_bytes_be();
        out.extend_from_slice(&(width as u32).to_le_bytes());
        out.extend(std::iter::repeat_n(0u8, width - mag.len()));
        out.extend_from_slice(&mag);
    }

    /// 4-byte LE length + big-endian magnitude padded to `pk`'s ciphertext
    /// width, so every ciphertext under one key has the same size.
    pub fn to_bytes(&self, pk: &PublicKey) -> Vec<u8> {
        let mut out = Vec::with_capacity(pk.ciphertext_bytes());
        self.write_fixed(pk.ciphertext_magnitude_bytes(), &mut out);
        out
    }
}

/// Decryption key with CRT precomputation.
#[derive(Clone)]
pub struct SecretKey {
    p: BigUint,
    q: BigUint,
    p_squared: BigUint,
    q_squared: BigUint,
    // decryption
    hp: BigUint,
    hq: BigUint,
    p_inv_q: BigUint,
    // encryption exponents n mod phi(p^2), n mod phi(q^2) and CRT coefficient
    n_mod_phi_pp: BigUint,
    n_mod_phi_qq: BigUint,
    pp_inv_qq: BigUint,
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

impl SecretKey {
    fn from_primes(p: BigUint, q: BigUint, n: &BigUint) -> Result<Self> {
        let one = BigUint::one();
        let p_squared = &p * &p;
        let q_squared = &q * &q;
        let g = n + &one;
        let lp = |x: BigUint, p: &BigUint| (x - &one) / p;
        let hp = lp(g.modpow(&(&p - &one), &p_squared), &p)
            .modinv(&p)
            .ok_or_else(|| Error::Validation("degenerate prime p".into()))?;
        let hq = lp(g.modpow(&(&q - &one), &q_squared), &q)
            .modinv(&q)
            .ok_or_else(|| Error::Validation("degenerate prime q".into()))?;
        let p_inv_q = (&p % &q)
            .modinv(&q)
            .ok_or_else(|| Error::Validation("p not invertible mod q".into()))?;
        let n_mod_phi_pp = n % (&p_squared - &p);
        let n_mod_phi_qq = n % (&q_squared - &q);
        let pp_inv_qq = (&p_squared % &q_squared)
            .modinv(&q_squared)
            .ok_or_else(|| Error::Validation("p^2 not invertible mod q^2".into()))?;
        Ok(SecretKey {
            p,
            q,
            p_squared,
            q_squared,
            hp,
            hq,
            p_inv_q,
            n_mod_phi_pp,
            n_mod_phi_qq,
            pp_inv_qq,
        })
    }

    fn decrypt_raw(&self, c: &BigUint) -> BigUint {
        let one = BigUint::one();
        let mp = ((c % &self.p_squared).modpow(&(&self.p - &one), &self.p_squared) - &one)
            / &self.p
            * &self.hp
            % &self.p;
        let mq = ((c % &self.q_squared).modpow(&(&self.q - &one), &self.q_squared) - &one)
            / &self.q
            * &self.hq
            % &self.q;
        // Garner: m = mp + p * ((mq - mp) p^-1 mod q)
        let diff = (&mq + &self.q - (&mp % &self.q)) % &self.q;
        mp + &self.p * ((diff * &self.p_inv_q) % &self.q)
    }

    /// `r^n mod n^2` through CRT.
    fn rn(&self, r: &BigUint, n_squared: &BigUint) -> BigUint {
        let a = (r % &self.p_squared).modpow(&self.n_mod_phi_pp, &self.p_squared);
        let b = (r % &self.q_squared).modpow(&self.n_mod_phi_qq, &self.q_squared);
        let diff = (&b + &self.q_squared - (&a % &self.q_squared)) % &self.q_squared;
        (a + &self.p_squared * ((diff * &self.pp_inv_qq) % &self.q_squared)) % n_squared
    }
}

#[derive(Clone, Debug)]
pub struct AheKeyPair {
    pk: PublicKey,
    sk: SecretKey,
}

impl AheKeyPair {
    pub fn public(&self) -> &PublicKey {
        &self.pk
    }

    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint> {
        self.pk.check_key(c)?;
        Ok(self.sk.decrypt_raw(&c.value))
    }

    /// Key-holder encryption; same distribution as [`PublicKey::encrypt`],
    /// roughly four times cheaper.
    pub fn encrypt<R: Rng + ?Sized>(&self, m: &BigUint, rng: &mut R) -> Result<Ciphertext> {
        self.pk.check_plaintext(m)?;
        let r = self.pk.random_unit(rng);
        let rn = self.sk.rn(&r, &self.pk.n_squared);
        Ok(self.pk.finish_encryption(m, &rn))
    }

    pub fn encrypt_u64<R: Rng + ?Sized>(&self, m: u64, rng: &mut R) -> Result<Ciphertext> {
        self.encrypt(&BigUint::from(m), rng)
    }

    pub const SECRET_FILE_MAGIC: &'static [u8; 4] = b"S3SK";
    pub const PUBLIC_FILE_MAGIC: &'static [u8; 4] = b"S3PK";

    /// `"S3SK" | len p | p | len q | q`, lengths 4-byte LE, magnitudes big-endian.
    pub fn secret_to_bytes(&self) -> Vec<u8> {
        let mut out = Self::SECRET_FILE_MAGIC.to_vec();
        for x in [&self.sk.p, &self.sk.q] {
            let mag = x.to_bytes_be();
            out.extend_from_slice(&(mag.len() as u32).to_le_bytes());
            out.extend_from_slice(&mag);
        }
        out
    }

    pub fn secret_from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = bytes
            .strip_prefix(Self::SECRET_FILE_MAGIC.as_slice())
            .ok_or_else(|| Error::Validation("not a secret key file (bad magic)".into()))?;
        let (p, rest) = read_length_prefixed(body)?;
        let (q, rest) = read_length_prefixed(rest)?;
        if !rest.is_empty() {
            return Err(Error::Validation("trailing bytes in secret key file".into()));
        }
        Self::from_primes(p, q)
    }

    fn from_primes(p: BigUint, q: BigUint) -> Result<Self> {
        let n = &p * &q;
        let sk = SecretKey::from_primes(p, q, &n)?;
        Ok(AheKeyPair { pk: PublicKey::from_modulus(n)?, sk })
    }

    pub fn save(&self, secret_path: &Path, public_path: &Path) -> Result<()> {
        fs::write(secret_path, self.secret_to_bytes())?;
        write_public_key(&self.pk, public_path)
    }

    pub fn load(secret_path: &Path) -> Result<Self> {
        Self::secret_from_bytes(&fs::read(secret_path)?)
    }
}

pub fn write_public_key(pk: &PublicKey, path: &Path) -> Result<()> {
    let mut out = AheKeyPair::PUBLIC_FILE_MAGIC.to_vec();
    out.extend_from_slice(&pk.to_bytes());
    fs::write(path, out)?;
    Ok(())
}

pub fn read_public_key(path: &Path) -> Result<PublicKey> {
    let bytes = fs::read(path)?;
    let body = bytes
        .strip_prefix(AheKeyPair::PUBLIC_FILE_MAGIC.as_slice())
        .ok_or_else(|| Error::Validation("not a public key file (bad magic)".into()))?;
    PublicKey::from_bytes(body)
}

/// Generates a key pair with an exactly `bits`-bit modulus, deterministically
/// from `seed`. Only the sizes in [`SUPPORTED_BITS`] are accepted.
pub fn keygen(bits: u32, seed: u64) -> Result<AheKeyPair> {
    if !SUPPORTED_BITS.contains(&bits) {
        return Err(Error::Config(format!(
            "unsupported Paillier modulus size {bits}; expected one of {SUPPORTED_BITS:?}"
        )));
    }
    keygen_unchecked(bits, seed)
}

/// Like [`keygen`] but accepts any even size of at least 512 bits. Small
/// moduli are insecure and only meant for fast unit tests.
pub fn keygen_unchecked(bits: u32, seed: u64) -> Result<AheKeyPair> {
    if bits < 512 || !bits.is_multiple_of(2) {
        return Err(Error::Config(format!("modulus size {bits} must be even and >= 512")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let half = bits as usize / 2;
    loop {
        let p = gen_prime(half, &mut rng)?;
        let q = gen_prime(half, &mut rng)?;
        if p == q {
            continue;
        }
        let n = &p * &q;
        if n.bits() as u32 != bits {
            continue;
        }
        return AheKeyPair::from_primes(p, q);
    }
}

fn gen_prime(bits: usize, rng: &mut dyn RngCore) -> Result<BigUint> {
    glass_pumpkin::prime::from_rng(bits, rng)
        .map_err(|e| Error::Config(format!("prime generation failed: {e}")))
}

/// Embeds a ring residue into the plaintext space as the integer in `[0, 2^64)`.
pub fn lift(e: RingElement) -> BigUint {
    BigUint::from(e.value())
}

/// Reduces a plaintext modulo 2^64.
pub fn lower(m: &BigUint) -> RingElement {
    RingElement((m & BigUint::from(u64::MAX)).to_u64().expect("masked to 64 bits"))
}
