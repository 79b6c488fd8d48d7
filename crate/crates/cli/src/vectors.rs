//! Published AES-128-GCM validation vectors and a mutation-forgery harness.

use rand::Rng;
use serde::Serialize;

use secgrid_core::crypto::{ae_decrypt, ae_encrypt_with_iv, derive_key, CipherEnvelope, SymKey, IV_LEN};

#[derive(Clone, Copy, Debug, Serialize)]
pub struct GcmVector {
    pub name: &'static str,
    pub key: &'static str,
    pub iv: &'static str,
    pub aad: &'static str,
    pub plaintext: &'static str,
    pub ciphertext: &'static str,
    pub tag: &'static str,
}

const P3: &str = "d9313225f88406e5a55909c5aff5269a86a7a9531534f7da2e4c303d8a318a72\
                  1c3c0c95956809532fcf0e2449a6b525b16aedf5aa0de657ba637b391aafd255";
const C3: &str = "42831ec2217774244b7221b784d0d49ce3aa212f2c02a4e035c17e2329aca12e\
                  21d514b25466931c7d8f6a5aac84aa051ba30b396a0aac973d58e091473f5985";

const P4: &str = "d9313225f88406e5a55909c5aff5269a86a7a9531534f7da2e4c303d8a318a72\
                  1c3c0c95956809532fcf0e2449a6b525b16aedf5aa0de657ba637b39";
const C4: &str = "42831ec2217774244b7221b784d0d49ce3aa212f2c02a4e035c17e2329aca12e\
                  21d514b25466931c7d8f6a5aac84aa051ba30b396a0aac973d58e091";

/// The AES-128 cases of the original GCM submission's test set.
pub const GCM_VECTORS: &[GcmVector] = &[
    GcmVector {
        name: "gcm-aes128-1",
        key: "00000000000000000000000000000000",
        iv: "000000000000000000000000",
        aad: "",
        plaintext: "",
        ciphertext: "",
        tag: "58e2fccefa7e3061367f1d57a4e7455a",
    },
    GcmVector {
        name: "gcm-aes128-2",
        key: "00000000000000000000000000000000",
        iv: "000000000000000000000000",
        aad: "",
        plaintext: "00000000000000000000000000000000",
        ciphertext: "0388dace60b6a392f328c2b971b2fe78",
        tag: "ab6e47d42cec13bdf53a67b21257bddf",
    },
    GcmVector {
        name: "gcm-aes128-3",
        key: "feffe9928665731c6d6a8f9467308308",
        iv: "cafebabefacedbaddecaf888",
        aad: "",
        plaintext: P3,
        ciphertext: C3,
        tag: "4d5c2af327cd64a62cf35abd2ba6fab4",
    },
    GcmVector {
        name: "gcm-aes128-4",
        key: "feffe9928665731c6d6a8f9467308308",
        iv: "cafebabefacedbaddecaf888",
        aad: "feedfacedeadbeeffeedfacedeadbeefabaddad2",
        plaintext: P4,
        ciphertext: C4,
        tag: "5bc94fbc3221a5db94fae95ae7121a47",
    },
];

fn unhex(s: &str) -> Vec<u8> {
    hex::decode(s).expect("vector hex")
}

/// Encrypts and decrypts one vector; `Err` describes the first mismatch.
pub fn check_vector(v: &GcmVector) -> Result<(), String> {
    let key = SymKey::from_slice(&unhex(v.key)).map_err(|e| e.to_string())?;
    let iv: [u8; IV_LEN] = unhex(v.iv).try_into().map_err(|_| "iv length".to_string())?;
    let aad = unhex(v.aad);
    let env = ae_encrypt_with_iv(&key, iv, &unhex(v.plaintext), &aad);
    if hex::encode(&env.ciphertext) != v.ciphertext {
        return Err(format!("{}: ciphertext {}", v.name, hex::encode(&env.ciphertext)));
    }
    if hex::encode(env.tag) != v.tag {
        return Err(format!("{}: tag {}", v.name, hex::encode(env.tag)));
    }
    let opened = ae_decrypt(&key, &env, &aad).map_err(|e| format!("{}: {e}", v.name))?;
    if opened != unhex(v.plaintext) {
        return Err(format!("{}: decryption mismatch", v.name));
    }
    Ok(())
}

/// One random single-field mutation of an authentic `(envelope, aad)` pair:
/// a bit flip in the IV, ciphertext, tag or aad, a truncated or extended
/// ciphertext, or a fresh random tag.
pub fn mutate<R: Rng>(env: &CipherEnvelope, aad: &[u8], rng: &mut R) -> (CipherEnvelope, Vec<u8>) {
    let mut env = env.clone();
    let mut aad = aad.to_vec();
    loop {
        match rng.gen_range(0..7) {
            0 => flip(&mut env.iv, rng),
            1 if !env.ciphertext.is_empty() => flip(&mut env.ciphertext, rng),
            2 => flip(&mut env.tag, rng),
            3 if !aad.is_empty() => flip(&mut aad, rng),
            4 if !env.ciphertext.is_empty() => {
                let keep = rng.gen_range(0..env.ciphertext.len());
                env.ciphertext.truncate(keep);
            }
            5 => env.ciphertext.push(rng.gen()),
            6 => {
                let fresh: [u8; 16] = rng.gen();
                if fresh == env.tag {
                    continue;
                }
                env.tag = fresh;
            }
            _ => continue,
        }
        return (env, aad);
    }
}

fn flip<R: Rng>(bytes: &mut [u8], rng: &mut R) {
    let bit = rng.gen_range(0..bytes.len() * 8);
    bytes[bit / 8] ^= 1 << (bit % 8);
}

#[derive(Debug, Serialize)]
pub struct VectorDump {
    pub gcm: Vec<GcmResult>,
    pub kdf: Vec<KdfVector>,
}

#[derive(Debug, Serialize)]
pub struct GcmResult {
    #[serde(flatten)]
    pub vector: GcmVector,
    pub pass: bool,
}

#[derive(Debug, Serialize)]
pub struct KdfVector {
    pub ikm: String,
    pub context: String,
    pub key: String,
}

/// Everything the `vectors` subcommand prints.
pub fn dump() -> VectorDump {
    let gcm = GCM_VECTORS.iter().map(|v| GcmResult { vector: *v, pass: check_vector(v).is_ok() }).collect();
    let kdf = [(&b""[..], &b"secgrid/session"[..]), (b"\x0b\x0b\x0b\x0b", b"secgrid/seal/v1")]
        .iter()
        .map(|(ikm, ctx)| KdfVector {
            ikm: hex::encode(ikm),
            context: String::from_utf8_lossy(ctx).into_owned(),
            key: hex::encode(derive_key(ikm, ctx).as_bytes()),
        })
        .collect();
    VectorDump { gcm, kdf }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn published_vectors_pass() {
        for v in GCM_VECTORS {
            check_vector(v).unwrap();
        }
    }

    #[test]
    fn a_wrong_expected_tag_is_reported() {
        let mut v = GCM_VECTORS[1];
        v.tag = "ab6e47d42cec13bdf53a67b21257bdde";
        assert!(check_vector(&v).is_err());
    }

    #[test]
    fn mutations_always_change_something() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let key = SymKey::generate(&mut rng);
        let env = ae_encrypt_with_iv(&key, [1; IV_LEN], b"payload", b"aad");
        for _ in 0..1000 {
            let (m, aad) = mutate(&env, b"aad", &mut rng);
            assert!(m != env || aad != b"aad");
            assert!(ae_decrypt(&key, &m, &aad).is_err());
        }
    }

    #[test]
    fn dump_serializes() {
        let d = dump();
        assert!(d.gcm.iter().all(|g| g.pass));
        let json = serde_json::to_string(&d).unwrap();
        assert!(json.contains("58e2fccefa7e3061367f1d57a4e7455a"));
    }
}
