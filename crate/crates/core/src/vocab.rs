//! Reserved symbols shared by every module.

use sha2::{Digest, Sha256};

pub type Token = u32;

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const EOS: Token = 2;
pub const UNK: Token = 3;
pub const NUM_SPECIAL: usize = 4;

pub fn is_special(token: Token) -> bool {
    (token as usize) < NUM_SPECIAL
}

pub fn token_name(token: Token) -> String {
    match token {
        PAD => "<pad>".into(),
        BOS => "<s>".into(),
        EOS => "</s>".into(),
        UNK => "<unk>".into(),
        t => format!("w{t}"),
    }
}

/// Stable fingerprint of a vocabulary table, stored in checkpoint headers.
pub fn vocab_hash(size: usize) -> u64 {
    let mut hasher = Sha256::new();
    for id in 0..size as Token {
        hasher.update(token_name(id).as_bytes());
        hasher.update([0u8]);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}
