use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

/// Province abbreviations used on mainland Chinese plates.
pub const PROVINCES: [&str; 31] = [
    "京", "津", "沪", "渝", "冀", "豫", "云", "辽", "黑", "湘", "皖", "鲁", "新", "苏", "浙", "赣",
    "鄂", "桂", "甘", "晋", "蒙", "陕", "吉", "闽", "贵", "粤", "青", "藏", "川", "宁", "琼",
];

/// Plate letters: A-Z without I and O.
pub const LETTERS: [&str; 24] = [
    "A", "B", "C", "D", "E", "F", "G", "H", "J", "K", "L", "M", "N", "P", "Q", "R", "S", "T",
    "U", "V", "W", "X", "Y", "Z",
];

pub const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];

/// Coarse category of a plate symbol, used by templates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SymbolClass {
    Province,
    Letter,
    Digit,
    Other,
}

impl SymbolClass {
    pub fn of(symbol: &str) -> Self {
        let mut chars = symbol.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if c.is_ascii_digit() => SymbolClass::Digit,
            (Some(c), None) if c.is_ascii_uppercase() => SymbolClass::Letter,
            (Some(c), None) if !c.is_ascii() && c.is_alphabetic() => SymbolClass::Province,
            _ => SymbolClass::Other,
        }
    }
}

/// Ordered output alphabet. Class indices `0..len()-1` are the symbols; the
/// last index is the CTC blank.
#[derive(Clone, PartialEq, Eq)]
pub struct CharSet {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl fmt::Debug for CharSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CharSet")
            .field("symbols", &self.symbols.len())
            .field("classes", &self.len())
            .finish()
    }
}

impl CharSet {
    /// Every symbol must be a single, unique, non-whitespace character.
    pub fn new<S: Into<String>>(symbols: impl IntoIterator<Item = S>) -> Result<Self> {
        let symbols: Vec<String> = symbols.into_iter().map(Into::into).collect();
        if symbols.is_empty() {
            return Err(Error::Config("character set is empty".into()));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.chars().count() != 1 || s.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("symbol {s:?} is not a single character")));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate symbol {s:?}")));
            }
        }
        Ok(CharSet { symbols, index })
    }

    /// 31 provinces, 24 letters and 10 digits, plus blank: 66 classes.
    pub fn chinese() -> Self {
        let all = PROVINCES.iter().chain(&LETTERS).chain(&DIGITS).copied();
        CharSet::new(all).expect("built-in set is valid")
    }

    /// The ten digits plus blank.
    pub fn digits() -> Self {
        CharSet::new(DIGITS).expect("built-in set is valid")
    }

    /// One symbol per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        CharSet::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.symbols {
            out.push_str(s);
            out.push('\n');
        }
        out
    }

    /// Number of classes including the blank.
    pub fn len(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn blank(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, class: usize) -> Option<&str> {
        self.symbols.get(class).map(String::as_str)
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn class_of(&self, class: usize) -> Option<SymbolClass> {
        self.symbol(class).map(SymbolClass::of)
    }

    /// Symbol indices of a plate string.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                let s = c.encode_utf8(&mut buf);
                self.index_of(s)
                    .ok_or_else(|| Error::InvalidArgument(format!("symbol {s:?} not in character set")))
            })
            .collect()
    }

    /// Plate string of a label; indices outside the alphabet render as `?`.
    pub fn decode(&self, label: &[usize]) -> String {
        label
            .iter()
            .map(|&i| self.symbol(i).unwrap_or("?"))
            .collect()
    }
}
