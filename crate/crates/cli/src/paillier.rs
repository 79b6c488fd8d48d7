//! Textbook Paillier with `g = n + 1`, the homomorphic baseline for the
//! benchmarks.

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{CryptoRng, RngCore};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PaillierError {
    #[error("message is not smaller than the modulus")]
    MessageTooLarge,
    #[error("ciphertext is outside Z*_(n^2)")]
    InvalidCiphertext,
    #[error("prime generation failed")]
    KeyGeneration,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    n2: BigUint,
}

#[derive(Clone, Debug)]
pub struct SecretKey {
    lambda: BigUint,
    mu: BigUint,
    p: BigUint,
    q: BigUint,
}

#[derive(Clone, Debug)]
pub struct Keypair {
    pub public: PublicKey,
    pub secret: SecretKey,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ciphertext(pub BigUint);

impl PublicKey {
    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n2
    }

    pub fn modulus_bits(&self) -> u64 {
        self.n.bits()
    }

    /// `(1 + m·n) · r^n mod n²` for a fresh `r`.
    pub fn encrypt<R: RngCore + CryptoRng>(&self, m: &BigUint, rng: &mut R) -> Result<Ciphertext, PaillierError> {
        let r = self.random_unit(rng);
        self.encrypt_with_noise(m, &r.modpow(&self.n, &self.n2))
    }

    pub fn encrypt_u64<R: RngCore + CryptoRng>(&self, m: u64, rng: &mut R) -> Result<Ciphertext, PaillierError> {
        self.encrypt(&BigUint::from(m), rng)
    }

    /// Encryption with a precomputed noise term `r^n mod n²`.
    pub fn encrypt_with_noise(&self, m: &BigUint, noise: &BigUint) -> Result<Ciphertext, PaillierError> {
        if m >= &self.n {
            return Err(PaillierError::MessageTooLarge);
        }
        let gm = (BigUint::one() + m * &self.n) % &self.n2;
        Ok(Ciphertext(gm * noise % &self.n2))
    }

    /// `Enc(m1) · Enc(m2)` decrypts to `m1 + m2 mod n`.
    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Ciphertext {
        Ciphertext(&a.0 * &b.0 % &self.n2)
    }

    /// `Enc(m)^k` decrypts to `k·m mod n`.
    pub fn scalar_mul(&self, c: &Ciphertext, k: &BigUint) -> Ciphertext {
        Ciphertext(c.0.modpow(k, &self.n2))
    }

    /// Homomorphic sum of all ciphertexts; the empty sum is the trivial `Enc(0) = 1`.
    pub fn sum<'a>(&self, cts: impl IntoIterator<Item = &'a Ciphertext>) -> Ciphertext {
        let mut acc = BigUint::one();
        for c in cts {
            acc = acc * &c.0 % &self.n2;
        }
        Ciphertext(acc)
    }

    fn random_unit<R: RngCore + CryptoRng>(&self, rng: &mut R) -> BigUint {
        loop {
            let r = rng.gen_biguint_range(&BigUint::one(), &self.n);
            if r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }
}

impl SecretKey {
    pub fn decrypt(&self, pk: &PublicKey, c: &Ciphertext) -> Result<BigUint, PaillierError> {
        if c.0.is_zero() || c.0 >= pk.n2 || !c.0.gcd(&pk.n).is_one() {
            return Err(PaillierError::InvalidCiphertext);
        }
        let u = c.0.modpow(&self.lambda, &pk.n2);
        let l = (u - 1u32) / &pk.n;
        Ok(l * &self.mu % &pk.n)
    }

    /// A fresh `r^n mod n²`, computed modulo `p²` and `q²` and recombined.
    pub fn noise<R: RngCore + CryptoRng>(&self, pk: &PublicKey, rng: &mut R) -> BigUint {
        let r = pk.random_unit(rng);
        let p2 = &self.p * &self.p;
        let q2 = &self.q * &self.q;
        let ep = &pk.n % (&self.p * (&self.p - 1u32));
        let eq = &pk.n % (&self.q * (&self.q - 1u32));
        let xp = r.modpow(&ep, &p2);
        let xq = r.modpow(&eq, &q2);
        // x = xp + p²·((xq - xp)·(p²)^-1 mod q²)
        let p2_inv = p2.modinv(&q2).expect("p and q are distinct primes");
        let diff = (&xq + &q2 - (&xp % &q2)) % &q2;
        let h = diff * p2_inv % &q2;
        (xp + p2 * h) % &pk.n2
    }
}

impl Keypair {
    /// Generates a key with an `bits`-bit modulus from two distinct primes of
    /// equal length.
    pub fn generate<R: RngCore + CryptoRng>(bits: usize, rng: &mut R) -> Result<Keypair, PaillierError> {
        loop {
            let p = glass_pumpkin::prime::from_rng(bits / 2, rng).map_err(|_| PaillierError::KeyGeneration)?;
            let q = glass_pumpkin::prime::from_rng(bits / 2, rng).map_err(|_| PaillierError::KeyGeneration)?;
            if p == q {
                continue;
            }
            let n = &p * &q;
            if n.bits() as usize != bits {
                continue;
            }
            let lambda = (&p - 1u32).lcm(&(&q - 1u32));
            let Some(mu) = lambda.modinv(&n) else { continue };
            let n2 = &n * &n;
            return Ok(Keypair { public: PublicKey { n, n2 }, secret: SecretKey { lambda, mu, p, q } });
        }
    }

    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint, PaillierError> {
        self.secret.decrypt(&self.public, c)
    }
}

/// Precomputed noise terms for encrypting large benchmark fixtures. Each
/// ciphertext gets the product of two pool entries picked at random.
pub struct NoisePool {
    entries: Vec<BigUint>,
}

impl NoisePool {
    pub fn new<R: RngCore + CryptoRng>(keys: &Keypair, size: usize, rng: &mut R) -> Self {
        let entries = (0..size.max(2)).map(|_| keys.secret.noise(&keys.public, rng)).collect();
        NoisePool { entries }
    }

    pub fn encrypt_u64<R: RngCore>(&self, pk: &PublicKey, m: u64, rng: &mut R) -> Ciphertext {
        let i = (rng.next_u64() % self.entries.len() as u64) as usize;
        let j = (rng.next_u64() % self.entries.len() as u64) as usize;
        let noise = &self.entries[i] * &self.entries[j] % &pk.n2;
        pk.encrypt_with_noise(&BigUint::from(m), &noise).expect("u64 fits a 2048-bit modulus")
    }
}
