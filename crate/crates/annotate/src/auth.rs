//! Static bearer tokens.
//!
//! Token file: one `token<TAB>annotator_id<TAB>role<TAB>expiry` per line,
//! where role is `annotator` or `adjudicator` and expiry is Unix seconds or
//! `-` for none. Blank lines and `#` comments are skipped.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::ApiError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Annotator,
    Adjudicator,
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "annotator" => Ok(Role::Annotator),
            "adjudicator" => Ok(Role::Adjudicator),
            _ => Err(format!("unknown role `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionToken {
    pub annotator_id: String,
    pub role: Role,
    pub expiry: Option<u64>,
}

#[derive(Clone, Debug, Default)]
pub struct TokenTable {
    tokens: HashMap<String, SessionToken>,
}

impl TokenTable {
    pub fn insert(&mut self, token: impl Into<String>, session: SessionToken) {
        self.tokens.insert(token.into(), session);
    }

    pub fn parse(text: &str) -> Result<Self, ApiError> {
        let mut t = TokenTable::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: String| ApiError::TokenFile { line: i + 1, message: m };
            let f: Vec<&str> = line.split('\t').map(str::trim).collect();
            let [token, id, role, expiry] = f.as_slice() else {
                return Err(bad(format!("expected 4 tab-separated fields, got {}", f.len())));
            };
            if token.is_empty() || id.is_empty() {
                return Err(bad("empty token or annotator id".into()));
            }
            let role = role.parse().map_err(bad)?;
            let expiry = match *expiry {
                "-" | "" => None,
                e => Some(e.parse().map_err(|_| bad(format!("bad expiry `{e}`")))?),
            };
            if t.tokens.contains_key(*token) {
                return Err(bad("duplicate token".into()));
            }
            t.insert(
                *token,
                SessionToken {
                    annotator_id: id.to_string(),
                    role,
                    expiry,
                },
            );
        }
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ApiError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| ApiError::TokenFile {
            line: 0,
            message: format!("{}: {e}", path.as_ref().display()),
        })?;
        Self::parse(&text)
    }

    /// Resolves a bearer token, checking expiry against `now`.
    pub fn authenticate(&self, token: &str, now: u64) -> Result<&SessionToken, ApiError> {
        let s = self.tokens.get(token).ok_or(ApiError::Unauthorized("unknown token"))?;
        match s.expiry {
            Some(t) if t <= now => Err(ApiError::Unauthorized("token expired")),
            _ => Ok(s),
        }
    }
}
