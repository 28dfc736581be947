//! Token inventory with the three reserved symbols every component relies on.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BLANK_TOKEN: &str = "<blank>";
pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "<eos>";

/// Index into the vocabulary. Doubles as the column index of every logit
/// matrix, so the layout below is load-bearing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenId(pub usize);

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Fixed token inventory.
///
/// Layout contract: id 0 is the CTC blank, id 1 the unknown token, the last
/// id the sequence terminator, and everything in between is a real token.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds from an ordered token list; validates the reserved layout.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 {
            return Err(Error::Format(format!(
                "vocabulary needs the three reserved tokens plus at least one real token, got {}",
                tokens.len()
            )));
        }
        if tokens[0] != BLANK_TOKEN {
            return Err(Error::Format(format!(
                "first vocabulary entry must be {BLANK_TOKEN}, got {:?}",
                tokens[0]
            )));
        }
        if tokens[1] != UNK_TOKEN {
            return Err(Error::Format(format!(
                "second vocabulary entry must be {UNK_TOKEN}, got {:?}",
                tokens[1]
            )));
        }
        if tokens.last().map(String::as_str) != Some(EOS_TOKEN) {
            return Err(Error::Format(format!(
                "last vocabulary entry must be {EOS_TOKEN}, got {:?}",
                tokens.last()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!(
                    "token {i} is empty or contains whitespace: {tok:?}"
                )));
            }
            if index.insert(tok.clone(), TokenId(i)).is_some() {
                return Err(Error::Format(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Reads a one-token-per-line UTF-8 file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        Vocabulary::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn blank(&self) -> TokenId {
        TokenId(0)
    }

    pub fn unk(&self) -> TokenId {
        TokenId(1)
    }

    pub fn eos(&self) -> TokenId {
        TokenId(self.tokens.len() - 1)
    }

    /// Count of real tokens (everything except blank, unk, eos).
    pub fn real_count(&self) -> usize {
        self.tokens.len() - 3
    }

    /// Ids of the real tokens, in index order. These are the emittable
    /// symbols: decoders never propose blank, unk, or eos as output tokens.
    pub fn real_ids(&self) -> impl Iterator<Item = TokenId> {
        (2..self.tokens.len() - 1).map(TokenId)
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id.0]
    }

    /// Exact id of a known token string.
    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Id of a token string, falling back to unk for unseen strings.
    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or_else(|| self.unk())
    }

    /// SHA-256 over the newline-joined token list; checkpoints embed it so a
    /// model can refuse to run against the wrong inventory.
    pub fn sha256_hex(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.tokens.join("\n").as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
