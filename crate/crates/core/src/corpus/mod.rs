//! Conversations, vocabulary, JSONL ingestion and the synthetic generator.

mod conversation;
mod jsonl;
mod synthetic;
mod vocab;

pub use conversation::{derive_reply_to, Conversation, Turn};
pub use jsonl::{
    load_corpus, parse_jsonl, parse_jsonl_str, to_jsonl_string, write_jsonl, ConversationRecord, RawConversation,
    RawTurn, TurnRecord,
};
pub use synthetic::{generate_synthetic, SyntheticSpec, TokenLayout};
pub use vocab::{build_vocab, is_special, split_words, Vocabulary, CLS, MASK, NUM_SPECIAL, PAD, SEP, SPECIAL_TOKENS, UNK};

#[cfg(test)]
pub(crate) use conversation::fixtures;
