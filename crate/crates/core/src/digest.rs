//! Project-wide content digest (SHA-256, lowercase hex).

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Digest over a multiset of digests: sorted, newline-terminated, hashed.
pub fn digest_of_digests<I, S>(digests: I) -> String
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut all: Vec<String> = digests.into_iter().map(|d| d.as_ref().to_owned()).collect();
    all.sort();
    let mut hasher = Sha256::new();
    for d in &all {
        hasher.update(d.as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}
