use std::collections::HashMap;

use crate::error::{input_err, Result};

/// Ordered symbol set plus three special classes appended after the symbols.
#[derive(Clone, Debug, PartialEq)]
pub struct Charset {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Default for Charset {
    /// `0-9a-z`: 36 symbols, 39 classes with the specials.
    fn default() -> Self {
        Self::new(('0'..='9').chain('a'..='z').collect()).expect("distinct symbols")
    }
}

impl Charset {
    pub fn new(symbols: Vec<char>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &c) in symbols.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(input_err!("symbol {c:?} listed twice in the charset"));
            }
        }
        Ok(Self { symbols, index })
    }

    pub fn symbol_count(&self) -> usize {
        self.symbols.len()
    }

    pub fn bos(&self) -> usize {
        self.symbols.len()
    }

    pub fn eos(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn pad(&self) -> usize {
        self.symbols.len() + 2
    }

    pub fn class_count(&self) -> usize {
        self.symbols.len() + 3
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn symbol(&self, i: usize) -> Option<char> {
        self.symbols.get(i).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.index_of(c)
                    .ok_or_else(|| input_err!("symbol {c:?} in {text:?} is outside the charset"))
            })
            .collect()
    }

    /// Symbols up to the first EOS; specials are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != self.eos())
            .filter_map(|&i| self.symbol(i))
            .collect()
    }

    /// Teacher-forcing pair for `text`: BOS-prefixed inputs and
    /// EOS-suffixed targets, both optionally padded with PAD to `pad_to`.
    pub fn teacher_forcing(&self, text: &str, pad_to: Option<usize>) -> Result<(Vec<usize>, Vec<usize>)> {
        let ids = self.encode(text)?;
        let mut input = Vec::with_capacity(ids.len() + 1);
        input.push(self.bos());
        input.extend(&ids);
        let mut target = ids;
        target.push(self.eos());
        if let Some(n) = pad_to {
            if n < target.len() {
                return Err(input_err!("label {text:?} does not fit in {n} decoder positions"));
            }
            input.resize(n, self.pad());
            target.resize(n, self.pad());
        }
        Ok((input, target))
    }
}
