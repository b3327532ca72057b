//! Closed synthetic token set shared by the model, the benchmark and the metrics.
//!
//! Layout: seven control tokens, then one canonical name token per object
//! category, then one synonym token per category.

pub type TokenId = usize;

pub const QUERY: TokenId = 0;
pub const QMARK: TokenId = 1;
pub const YES: TokenId = 2;
pub const NO: TokenId = 3;
pub const DESCRIBE: TokenId = 4;
pub const PERIOD: TokenId = 5;
pub const EOS: TokenId = 6;

pub const NUM_CONTROL: usize = 7;

/// Canonical name token of object `id`.
pub fn object_token(id: usize) -> TokenId {
    NUM_CONTROL + id
}

/// Synonym token of object `id` in a vocabulary of `num_objects` categories.
pub fn synonym_token(id: usize, num_objects: usize) -> TokenId {
    NUM_CONTROL + num_objects + id
}

pub fn vocab_size(num_objects: usize) -> usize {
    NUM_CONTROL + 2 * num_objects
}

/// POPE prompt `⟨Q⟩ ⟨object⟩ ⟨?⟩`.
pub fn question_prompt(object: usize) -> Vec<TokenId> {
    vec![QUERY, object_token(object), QMARK]
}

pub fn caption_prompt() -> Vec<TokenId> {
    vec![DESCRIBE]
}

pub fn control_name(token: TokenId) -> Option<&'static str> {
    match token {
        QUERY => Some("<Q>"),
        QMARK => Some("<?>"),
        YES => Some("yes"),
        NO => Some("no"),
        DESCRIBE => Some("<DESCRIBE>"),
        PERIOD => Some("."),
        EOS => Some("<EOS>"),
        _ => None,
    }
}
