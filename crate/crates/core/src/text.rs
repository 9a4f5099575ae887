//! Tokenization and name normalization shared by the fulltext index, the
//! hashing embedder and tag matching.

use unicode_normalization::UnicodeNormalization;

/// Splits text into lowercase word tokens.
///
/// Text is NFKC-folded first so that superscripts and subscripts collapse to
/// plain digits (`x²` becomes `x2`), then split on every non-alphanumeric
/// character.
pub fn tokenize(text: &str) -> Vec<String> {
    let folded: String = text.nfkc().collect::<String>().to_lowercase();
    folded
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Canonical key for tag-name deduplication: NFC, trimmed, inner whitespace
/// collapsed, case-folded.
pub fn normalize_name(name: &str) -> String {
    let nfc: String = name.nfc().collect();
    nfc.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// 64-bit FNV-1a. Stable across platforms and process restarts, unlike the
/// std `DefaultHasher`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}
