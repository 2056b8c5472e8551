//! Character vocabulary and encoded sentences.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const MASK: TokenId = 3;
pub const N_SPECIAL: usize = 4;

/// Content characters of the built-in toy language: `a-z`, `A-Z`, `2-9`, `.` and `,`.
pub fn toy_chars() -> Vec<char> {
    ('a'..='z')
        .chain('A'..='Z')
        .chain('2'..='9')
        .chain(['.', ','])
        .collect()
}

/// Dense id table: specials occupy `0..4`, content characters follow.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, TokenId>,
}

impl Vocab {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, (i + N_SPECIAL) as TokenId).is_some() {
                return Err(Error::InvalidInput(format!("duplicate vocab char {c:?}")));
            }
        }
        if chars.len() + N_SPECIAL < 8 {
            return Err(Error::InvalidInput(format!(
                "vocabulary of {} content chars is too small",
                chars.len()
            )));
        }
        Ok(Vocab { chars, index })
    }

    pub fn toy() -> Self {
        Vocab::new(toy_chars()).expect("toy vocabulary is valid")
    }

    /// Vocabulary covering every character of `texts`, in sorted order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut chars: Vec<char> = texts.into_iter().flat_map(str::chars).collect();
        chars.sort_unstable();
        chars.dedup();
        Vocab::new(chars)
    }

    /// Total size `vs`, specials included.
    pub fn size(&self) -> usize {
        self.chars.len() + N_SPECIAL
    }

    pub fn content_size(&self) -> usize {
        self.chars.len()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn is_content(&self, id: TokenId) -> bool {
        (id as usize) >= N_SPECIAL && (id as usize) < self.size()
    }

    pub fn content_ids(&self) -> impl Iterator<Item = TokenId> {
        (N_SPECIAL as TokenId)..(self.size() as TokenId)
    }

    /// Index of a content id among the content classes.
    pub fn class_of(&self, id: TokenId) -> usize {
        debug_assert!(self.is_content(id));
        id as usize - N_SPECIAL
    }

    pub fn id_of_class(&self, class: usize) -> TokenId {
        (class + N_SPECIAL) as TokenId
    }

    pub fn id(&self, c: char) -> Result<TokenId> {
        self.index.get(&c).copied().ok_or(Error::UnknownSymbol(c))
    }

    pub fn char_of(&self, id: TokenId) -> Option<char> {
        if self.is_content(id) {
            Some(self.chars[id as usize - N_SPECIAL])
        } else {
            None
        }
    }

    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        let ids = text
            .chars()
            .map(|c| self.id(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenSeq::new(ids))
    }

    pub fn decode(&self, seq: &TokenSeq) -> Result<String> {
        seq.ids()
            .iter()
            .map(|&id| {
                self.char_of(id)
                    .ok_or_else(|| Error::InvalidInput(format!("id {id} has no character")))
            })
            .collect()
    }

    /// Like [`Vocab::decode`] but shows masks as `_` and other specials as `?`.
    pub fn render(&self, seq: &TokenSeq) -> String {
        seq.ids()
            .iter()
            .map(|&id| match self.char_of(id) {
                Some(c) => c,
                None if id == MASK => '_',
                None => '?',
            })
            .collect()
    }

    /// The ordered character list, as stored in checkpoints.
    pub fn to_text(&self) -> String {
        self.chars.iter().collect()
    }
}

/// An encoded sentence. Positions may hold `MASK`; other specials are added
/// by the model, never stored here.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct TokenSeq {
    ids: Vec<TokenId>,
}

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSeq { ids }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    /// Number of positions, masks included.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of content (non-special) tokens.
    pub fn k(&self) -> usize {
        self.ids
            .iter()
            .filter(|&&id| id as usize >= N_SPECIAL)
            .count()
    }

    pub fn mask_positions(&self) -> Vec<usize> {
        self.ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == MASK)
            .map(|(i, _)| i)
            .collect()
    }

    /// Replaces `[start, end)` with `with`.
    pub fn splice(&self, start: usize, end: usize, with: &[TokenId]) -> TokenSeq {
        let mut ids = Vec::with_capacity(self.ids.len() - (end - start) + with.len());
        ids.extend_from_slice(&self.ids[..start]);
        ids.extend_from_slice(with);
        ids.extend_from_slice(&self.ids[end..]);
        TokenSeq { ids }
    }

    pub fn with_token(&self, pos: usize, id: TokenId) -> TokenSeq {
        let mut ids = self.ids.clone();
        ids[pos] = id;
        TokenSeq { ids }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_vocab_layout() {
        let v = Vocab::toy();
        assert_eq!(v.content_size(), 62);
        assert_eq!(v.size(), 66);
        assert!(!v.is_content(MASK));
        assert_eq!(v.class_of(v.id('a').unwrap()), 0);
    }

    #[test]
    fn empty_string_round_trips() {
        let v = Vocab::toy();
        let s = v.encode("").unwrap();
        assert!(s.is_empty());
        assert_eq!(v.decode(&s).unwrap(), "");
    }

    #[test]
    fn unknown_char_is_named() {
        let v = Vocab::toy();
        match v.encode("Kago#hub.") {
            Err(Error::UnknownSymbol(c)) => assert_eq!(c, '#'),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicates_and_tiny_vocabs_rejected() {
        assert!(Vocab::new(vec!['a', 'b', 'a', 'c']).is_err());
        assert!(Vocab::new(vec!['a', 'b', 'c']).is_err());
        assert!(Vocab::new(vec!['a', 'b', 'c', 'd']).is_ok());
    }

    #[test]
    fn k_excludes_masks() {
        let s = TokenSeq::new(vec![5, MASK, 6, MASK]);
        assert_eq!(s.len(), 4);
        assert_eq!(s.k(), 2);
        assert_eq!(s.mask_positions(), vec![1, 3]);
        assert_eq!(s.splice(1, 2, &[9, 9]).ids(), &[5, 9, 9, 6, MASK]);
    }
}
