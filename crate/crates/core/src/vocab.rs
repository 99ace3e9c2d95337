use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{detokenize, BasicTokenizer, Tokenizer, SEPARATOR};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
/// End-of-sequence doubles as the condition separator.
pub const EOS: &str = SEPARATOR;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;

/// Token ↔ id table. Ids 0..4 are the specials, then tokens in first-seen order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::from(vec![PAD.into(), UNK.into(), BOS.into(), EOS.into()])
    }
}

impl Vocab {
    pub fn build<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self::default();
        for t in tokens {
            v.add(t.as_ref());
        }
        v
    }

    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), i);
        i
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

/// Text ↔ id conversion for the generator, with length budgets.
#[derive(Debug, Clone)]
pub struct TextCodec {
    pub vocab: Vocab,
    tokenizer: BasicTokenizer,
    max_len: usize,
}

impl TextCodec {
    /// `max_len` bounds encoder inputs; targets get one slot less for `<eos>`.
    pub fn new(vocab: Vocab, max_len: usize) -> Self {
        Self {
            vocab,
            tokenizer: BasicTokenizer::default(),
            max_len,
        }
    }

    /// A vocabulary covering every token of `texts`.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, max_len: usize) -> Self {
        let tokenizer = BasicTokenizer::default();
        let mut vocab = Vocab::default();
        for t in texts {
            for w in tokenizer.words(t) {
                vocab.add(&w);
            }
        }
        Self::new(vocab, max_len)
    }

    pub fn words(&self, text: &str) -> Vec<String> {
        self.tokenizer.words(text)
    }

    /// Encoder ids. Over-long inputs lose tokens just before the first separator so the condition survives.
    pub fn encode_source(&self, text: &str) -> Vec<usize> {
        let mut ids = self.vocab.encode(&self.words(text));
        if ids.len() > self.max_len {
            let excess = ids.len() - self.max_len;
            match ids.iter().position(|&i| i == EOS_ID) {
                Some(sep) if sep >= excess => {
                    ids.drain(sep - excess..sep);
                }
                _ => ids.truncate(self.max_len),
            }
        }
        ids
    }

    pub fn encode_target(&self, text: &str) -> Vec<usize> {
        let mut ids = self.vocab.encode(&self.words(text));
        ids.truncate(self.max_len.saturating_sub(1));
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        detokenize(&self.vocab.decode(ids))
    }
}
