//! Bearer tokens stored as salted SHA-256 digests.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "PascalCase", deny_unknown_fields)]
pub struct TokenEntry {
    pub principal: String,
    pub salt: String,
    /// Lowercase hex of `sha256(salt || token)`.
    pub sha256: String,
}

impl TokenEntry {
    /// Hashes `token` under a fresh random salt.
    pub fn issue(principal: impl Into<String>, token: &str) -> Self {
        let salt = hex::encode(rand::random::<[u8; 16]>());
        let sha256 = hash_token(&salt, token);
        TokenEntry {
            principal: principal.into(),
            salt,
            sha256,
        }
    }
}

pub fn hash_token(salt: &str, token: &str) -> String {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    h.update(token.as_bytes());
    hex::encode(h.finalize())
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

#[derive(Debug, Clone, Default)]
pub struct TokenTable {
    entries: Vec<TokenEntry>,
}

impl TokenTable {
    pub fn new(entries: Vec<TokenEntry>) -> Self {
        TokenTable { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Principal owning `token`, if any. Every entry is checked so the
    /// timing does not depend on which one matches.
    pub fn authenticate(&self, token: &str) -> Option<&str> {
        let mut found = None;
        for entry in &self.entries {
            let digest = hash_token(&entry.salt, token);
            if constant_time_eq(digest.as_bytes(), entry.sha256.to_ascii_lowercase().as_bytes()) && found.is_none() {
                found = Some(entry.principal.as_str());
            }
        }
        found
    }

    pub fn principals(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.principal.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_salt_then_token() {
        // sha256("abc")
        assert_eq!(
            hash_token("a", "bc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn issued_entry_authenticates_only_its_token() {
        let table = TokenTable::new(vec![TokenEntry::issue("ce-a", "alpha"), TokenEntry::issue("ce-b", "beta")]);
        assert_eq!(table.authenticate("alpha"), Some("ce-a"));
        assert_eq!(table.authenticate("beta"), Some("ce-b"));
        assert_eq!(table.authenticate("gamma"), None);
        assert_eq!(table.authenticate(""), None);
    }

    #[test]
    fn same_token_different_salts_differ() {
        let a = TokenEntry::issue("p", "t");
        let b = TokenEntry::issue("p", "t");
        assert_ne!(a.sha256, b.sha256);
    }
}
