//! Subword vocabularies, tag handling, quote localization and pair filtering.

mod filter;
mod quotes;
mod vocab;

pub use filter::filter_pairs;
pub use quotes::{localize_quotes, QuoteStyle};
pub use vocab::{
    balance_corpora, direction_token, is_punct_or_symbol, learn_bpe, prepend_tag, pretokenize, BpeOptions, Pretokenize, Vocabulary, BOS,
    BOS_TOKEN, BT_TAG, BT_TAG_TOKEN, END_OF_WORD, EOS, EOS_TOKEN, PAD, PAD_TOKEN, UNK, UNK_TOKEN,
};
