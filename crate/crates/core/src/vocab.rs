//! Token alphabet with reserved protocol roles.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub type TokenId = u32;

/// Ids of the reserved protocol symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roles {
    pub pad: TokenId,
    pub search_open: TokenId,
    pub search_close: TokenId,
    pub answer_open: TokenId,
    pub answer_close: TokenId,
    pub info_open: TokenId,
    pub info_close: TokenId,
    pub end_of_action: TokenId,
    pub no_hit: TokenId,
    /// Fixed feedback sequence emitted after a malformed action.
    pub invalid_message: [TokenId; 4],
}

impl Roles {
    pub fn all(&self) -> Vec<TokenId> {
        let mut ids = vec![
            self.pad,
            self.search_open,
            self.search_close,
            self.answer_open,
            self.answer_close,
            self.info_open,
            self.info_close,
            self.end_of_action,
            self.no_hit,
        ];
        ids.extend_from_slice(&self.invalid_message);
        ids
    }

    /// Tag tokens that delimit actions and feedback.
    pub fn is_tag(&self, id: TokenId) -> bool {
        id == self.search_open
            || id == self.search_close
            || id == self.answer_open
            || id == self.answer_close
            || id == self.info_open
            || id == self.info_close
    }

    /// Tokens that end action generation.
    pub fn stop_tokens(&self) -> Vec<TokenId> {
        vec![self.search_close, self.answer_close, self.end_of_action]
    }
}

const RESERVED_NAMES: [&str; 13] = [
    "<pad>",
    "<search>",
    "</search>",
    "<answer>",
    "</answer>",
    "<information>",
    "</information>",
    "<eoa>",
    "<nohit>",
    "<inv:my>",
    "<inv:previous>",
    "<inv:action>",
    "<inv:is-invalid>",
];

/// Number of ids taken by [`Vocab::standard`] before the first content token.
pub const RESERVED_COUNT: usize = RESERVED_NAMES.len();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabRecord", into = "VocabRecord")]
pub struct Vocab {
    tokens: Vec<String>,
    roles: Roles,
}

#[derive(Serialize, Deserialize)]
struct VocabRecord {
    tokens: Vec<String>,
    roles: Roles,
}

impl TryFrom<VocabRecord> for Vocab {
    type Error = LabError;

    fn try_from(r: VocabRecord) -> Result<Self> {
        Vocab::new(r.tokens, r.roles)
    }
}

impl From<Vocab> for VocabRecord {
    fn from(v: Vocab) -> Self {
        VocabRecord { tokens: v.tokens, roles: v.roles }
    }
}

impl Vocab {
    pub fn new(tokens: Vec<String>, roles: Roles) -> Result<Self> {
        if tokens.len() < 8 {
            return Err(LabError::InvalidVocab(format!("size {} below minimum 8", tokens.len())));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &tokens {
            if !seen.insert(t.as_str()) {
                return Err(LabError::InvalidVocab(format!("duplicate symbol {t:?}")));
            }
        }
        let ids = roles.all();
        let mut distinct = std::collections::BTreeSet::new();
        for id in &ids {
            if *id as usize >= tokens.len() {
                return Err(LabError::InvalidVocab(format!("role id {id} outside vocabulary")));
            }
            if !distinct.insert(*id) {
                return Err(LabError::InvalidVocab(format!("role id {id} assigned twice")));
            }
        }
        Ok(Vocab { tokens, roles })
    }

    /// Reserved symbols at ids `0..RESERVED_COUNT`, then content tokens `t<id>`.
    pub fn standard(size: usize) -> Result<Self> {
        if size < RESERVED_COUNT + 1 {
            return Err(LabError::InvalidVocab(format!(
                "standard vocabulary needs at least {} tokens, got {size}",
                RESERVED_COUNT + 1
            )));
        }
        let tokens = (0..size)
            .map(|i| match RESERVED_NAMES.get(i) {
                Some(name) => (*name).to_string(),
                None => format!("t{i}"),
            })
            .collect();
        let roles = Roles {
            pad: 0,
            search_open: 1,
            search_close: 2,
            answer_open: 3,
            answer_close: 4,
            info_open: 5,
            info_close: 6,
            end_of_action: 7,
            no_hit: 8,
            invalid_message: [9, 10, 11, 12],
        };
        Vocab::new(tokens, roles)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn roles(&self) -> &Roles {
        &self.roles
    }

    pub fn contains(&self, id: TokenId) -> bool {
        (id as usize) < self.tokens.len()
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, symbol: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == symbol).map(|i| i as TokenId)
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        self.roles.all().contains(&id)
    }

    /// Non-reserved ids in ascending order.
    pub fn content_tokens(&self) -> Vec<TokenId> {
        let reserved = self.roles.all();
        (0..self.tokens.len() as TokenId).filter(|id| !reserved.contains(id)).collect()
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&id| self.symbol(id).unwrap_or("<?>")).collect::<Vec<_>>().join(" ")
    }
}
