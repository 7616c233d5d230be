use crate::error::{DeerError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: usize = 3;

/// Character vocabulary. Ids 0..3 are PAD, BOS, EOS; characters follow in
/// the configured order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new(crate::data::DEFAULT_GLYPHS).expect("default glyph set is valid")
    }
}

impl Vocab {
    pub fn new(symbols: &str) -> Result<Self> {
        let chars: Vec<char> = symbols.chars().collect();
        if chars.is_empty() {
            return Err(DeerError::Config("vocabulary is empty".into()));
        }
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) {
                return Err(DeerError::Config(format!("vocabulary repeats {c:?}")));
            }
        }
        Ok(Self { chars })
    }

    /// Total ids including the three specials.
    pub fn size(&self) -> usize {
        self.chars.len() + SPECIALS
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn symbols(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&x| x == c).map(|i| i + SPECIALS)
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        id.checked_sub(SPECIALS).and_then(|i| self.chars.get(i).copied())
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| self.id(c).ok_or_else(|| DeerError::Input(format!("character {c:?} not in vocabulary"))))
            .collect()
    }

    /// Characters up to the first EOS; specials are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter_map(|&i| self.char_of(i))
            .collect()
    }

    /// Teacher-forcing pair for `text`: `[BOS, c1..cn]` and `[c1..cn, EOS]`.
    pub fn teacher_pair(&self, text: &str) -> Result<(Vec<usize>, Vec<usize>)> {
        let ids = self.encode(text)?;
        let mut input = vec![BOS];
        input.extend(&ids);
        let mut target = ids;
        target.push(EOS);
        Ok((input, target))
    }
}
