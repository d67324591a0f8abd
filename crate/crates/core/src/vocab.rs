//! Whole-unit token inventory.
//!
//! Tokens are lexical units (numbers, operators, keywords); text is the
//! single-space joining of token strings.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Printable rendering of the stop symbol.
pub const STOP_TOKEN: &str = "<eos>";

pub const PLUS: &str = "+";
pub const MINUS: &str = "-";
pub const TIMES: &str = "*";
pub const EQUALS: &str = "=";
pub const COLON: &str = ":";
pub const SUM: &str = "SUM";
pub const TARGET: &str = "TARGET";
pub const FROM: &str = "FROM";
pub const ANSWER: &str = "ANSWER";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    stop: TokenId,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.stop == other.stop
    }
}

impl Vocab {
    /// Builds a vocabulary; `stop` must be one of `tokens`.
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>, stop: &str) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidVocab(format!("token {i} is empty or contains whitespace")));
            }
            if index.insert(t.clone(), TokenId(i as u32)).is_some() {
                return Err(Error::InvalidVocab(format!("duplicate token `{t}`")));
            }
        }
        let stop = *index
            .get(stop)
            .ok_or_else(|| Error::InvalidVocab(format!("stop token `{stop}` missing")))?;
        Ok(Self { tokens, index, stop })
    }

    /// The inventory shared by both task families: numbers `0..=max_value`,
    /// operators, keywords, then the stop symbol.
    pub fn arithmetic(max_value: u32) -> Self {
        let mut tokens: Vec<String> = (0..=max_value).map(|v| v.to_string()).collect();
        for kw in [PLUS, MINUS, TIMES, EQUALS, COLON, SUM, TARGET, FROM, ANSWER, STOP_TOKEN] {
            tokens.push(kw.to_string());
        }
        Self::new(tokens, STOP_TOKEN).expect("arithmetic vocabulary is well formed")
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn stop_id(&self) -> TokenId {
        self.stop
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Id of a token known to exist; panics otherwise.
    pub fn expect_id(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or_else(|| panic!("token `{token}` not in vocabulary"))
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id.index())
            .map(String::as_str)
            .ok_or(Error::IdOutOfRange { id: id.0, size: self.size() })
    }

    /// Token for a non-negative integer, if the vocabulary has one.
    pub fn number(&self, value: i64) -> Option<TokenId> {
        if value < 0 {
            return None;
        }
        self.id(&value.to_string())
    }

    /// Integer value of a numeric token.
    pub fn value(&self, id: TokenId) -> Option<i64> {
        let t = self.tokens.get(id.index())?;
        if t.bytes().all(|b| b.is_ascii_digit()) {
            t.parse().ok()
        } else {
            None
        }
    }

    /// Largest integer representable by a single token.
    pub fn max_number(&self) -> Option<i64> {
        (0..self.size() as u32).filter_map(|i| self.value(TokenId(i))).max()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|unit| self.id(unit).ok_or_else(|| Error::UnknownToken(unit.to_string())))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let parts = ids.iter().map(|&id| self.token(id)).collect::<Result<Vec<_>>>()?;
        Ok(parts.join(" "))
    }

    /// Stable 64-bit FNV-1a fingerprint of the token inventory.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::util::Fnv::new();
        for t in &self.tokens {
            h.write(t.as_bytes());
            h.write(&[0]);
        }
        h.write(&self.stop.0.to_le_bytes());
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> Vocab {
        Vocab::arithmetic(9)
    }

    #[test]
    fn empty_text_round_trips() {
        let v = small();
        assert_eq!(v.encode("").unwrap(), Vec::<TokenId>::new());
        assert_eq!(v.decode(&[]).unwrap(), "");
    }

    #[test]
    fn direct_lookup() {
        let v = small();
        let ids = v.encode("3 + 4").unwrap();
        assert_eq!(ids, vec![v.expect_id("3"), v.expect_id("+"), v.expect_id("4")]);
        assert_eq!(v.decode(&ids).unwrap(), "3 + 4");
    }

    #[test]
    fn unknown_unit_is_reported() {
        match small().encode("3 ^ 4") {
            Err(Error::UnknownToken(u)) => assert_eq!(u, "^"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_range_id() {
        let v = small();
        assert!(matches!(v.decode(&[TokenId(999)]), Err(Error::IdOutOfRange { id: 999, .. })));
    }

    #[test]
    fn stop_only_from_literal() {
        let v = small();
        assert!(!v.encode("1 + 2 = 3").unwrap().contains(&v.stop_id()));
        assert_eq!(v.encode("1 <eos>").unwrap()[1], v.stop_id());
        assert_eq!(v.decode(&[v.stop_id()]).unwrap(), "<eos>");
    }

    #[test]
    fn duplicates_rejected() {
        assert!(Vocab::new(["a", "b", "a", "<eos>"], "<eos>").is_err());
        assert!(Vocab::new(["a", "b"], "<eos>").is_err());
    }

    #[test]
    fn token_zero_is_not_stop() {
        let v = small();
        assert_ne!(v.stop_id(), TokenId(0));
        assert_eq!(v.value(TokenId(0)), Some(0));
        assert_eq!(v.max_number(), Some(9));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn text_round_trip(ids in proptest::collection::vec(0u32..20, 0..24)) {
            let v = small();
            let text = ids.iter().map(|&i| v.token(TokenId(i)).unwrap()).collect::<Vec<_>>().join(" ");
            prop_assert_eq!(v.decode(&v.encode(&text).unwrap()).unwrap(), text);
        }

        #[test]
        fn id_round_trip(ids in proptest::collection::vec(0u32..20, 0..24)) {
            let v = small();
            let ids: Vec<TokenId> = ids.into_iter().map(TokenId).collect();
            prop_assert_eq!(v.encode(&v.decode(&ids).unwrap()).unwrap(), ids);
        }
    }
}
