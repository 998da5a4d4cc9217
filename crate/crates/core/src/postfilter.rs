//! Template post-filtering: pick the best decoded candidate whose symbols
//! fit a known plate layout.

use std::fmt;
use std::str::FromStr;

use crate::ctc::Label;
use crate::error::{Error, Result};
use crate::model::{CharSet, SymbolClass};

/// One position of a template.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Token {
    /// `P`: a province logogram.
    Province,
    /// `L`: a letter.
    Letter,
    /// `D`: a digit.
    Digit,
    /// `A`: a letter or a digit.
    Alnum,
    /// Exactly this symbol. Written bare, or quoted (`'P'`) when it would
    /// otherwise read as a class token.
    Literal(String),
}

impl Token {
    pub fn accepts(&self, symbol: &str) -> bool {
        let class = SymbolClass::of(symbol);
        match self {
            Token::Province => class == SymbolClass::Province,
            Token::Letter => class == SymbolClass::Letter,
            Token::Digit => class == SymbolClass::Digit,
            Token::Alnum => matches!(class, SymbolClass::Letter | SymbolClass::Digit),
            Token::Literal(s) => s == symbol,
        }
    }
}

impl FromStr for Token {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "P" => Token::Province,
            "L" => Token::Letter,
            "D" => Token::Digit,
            "A" => Token::Alnum,
            _ => {
                let lit = s
                    .strip_prefix('\'')
                    .and_then(|r| r.strip_suffix('\''))
                    .unwrap_or(s);
                if lit.is_empty() {
                    return Err(Error::Config(format!("empty template token {s:?}")));
                }
                Token::Literal(lit.to_string())
            }
        })
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Province => f.write_str("P"),
            Token::Letter => f.write_str("L"),
            Token::Digit => f.write_str("D"),
            Token::Alnum => f.write_str("A"),
            Token::Literal(s) if matches!(s.as_str(), "P" | "L" | "D" | "A") => write!(f, "'{s}'"),
            Token::Literal(s) => f.write_str(s),
        }
    }
}

/// A plate layout: one token per symbol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    tokens: Vec<Token>,
}

impl Template {
    pub fn new(tokens: Vec<Token>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Config("a template needs at least one token".into()));
        }
        Ok(Template { tokens })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// True iff the lengths agree and every symbol fits its token.
    pub fn matches_symbols<S: AsRef<str>>(&self, symbols: &[S]) -> bool {
        symbols.len() == self.tokens.len()
            && self.tokens.iter().zip(symbols).all(|(t, s)| t.accepts(s.as_ref()))
    }

    /// As [`Template::matches_symbols`] for a label over `charset`; labels
    /// with out-of-range classes never match.
    pub fn matches(&self, label: &[usize], charset: &CharSet) -> bool {
        let symbols: Option<Vec<&str>> = label.iter().map(|&k| charset.symbol(k)).collect();
        symbols.is_some_and(|s| self.matches_symbols(&s))
    }
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Template::new(s.split_whitespace().map(str::parse).collect::<Result<_>>()?)
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// What to return when no candidate fits any template.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fallback {
    /// The highest-ranked candidate.
    #[default]
    TopOne,
    /// Fail with [`Error::NoTemplateMatch`].
    Reject,
}

impl FromStr for Fallback {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1" | "top-one" => Ok(Fallback::TopOne),
            "reject" => Ok(Fallback::Reject),
            other => Err(Error::Config(format!("unknown fallback {other:?}"))),
        }
    }
}

/// Non-empty, ordered collection of templates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateSet {
    templates: Vec<Template>,
    pub fallback: Fallback,
}

impl TemplateSet {
    pub fn new(templates: Vec<Template>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Config("a template set needs at least one template".into()));
        }
        Ok(TemplateSet {
            templates,
            fallback: Fallback::TopOne,
        })
    }

    /// Province, letter, then five letters or digits.
    pub fn chinese() -> Self {
        TemplateSet::new(vec!["P L A A A A A".parse().expect("valid template")]).expect("non-empty")
    }

    /// Five digits, for the digit-only toy character set.
    pub fn digits() -> Self {
        TemplateSet::new(vec!["D D D D D".parse().expect("valid template")]).expect("non-empty")
    }

    /// One template per line, tokens separated by spaces; `#` starts a
    /// comment.
    pub fn parse(text: &str) -> Result<Self> {
        let templates = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        TemplateSet::new(templates)
    }

    pub fn to_text(&self) -> String {
        self.templates.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn with_fallback(mut self, fallback: Fallback) -> Self {
        self.fallback = fallback;
        self
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn matches(&self, label: &[usize], charset: &CharSet) -> bool {
        self.templates.iter().any(|t| t.matches(label, charset))
    }
}

/// First candidate (in the given order) that matches any template; when none
/// does, the set's fallback decides.
pub fn post_filter(candidates: &[(Label, f64)], templates: &TemplateSet, charset: &CharSet) -> Result<Label> {
    let Some(top) = candidates.first() else {
        return Err(Error::InvalidArgument("no candidates to filter".into()));
    };
    if let Some((label, _)) = candidates.iter().find(|(l, _)| templates.matches(l, charset)) {
        return Ok(label.clone());
    }
    match templates.fallback {
        Fallback::TopOne => Ok(top.0.clone()),
        Fallback::Reject => Err(Error::NoTemplateMatch),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn enc(cs: &CharSet, s: &str) -> Label {
        cs.encode(s).unwrap()
    }

    #[test]
    fn template_examples() {
        let cs = CharSet::chinese();
        let t: Template = "P L D D D D D".parse().unwrap();
        assert!(t.matches(&enc(&cs, "京A12345"), &cs));
        assert!(!t.matches(&enc(&cs, "京A1234"), &cs));
        assert!(!t.matches(&enc(&cs, "京AB2345"), &cs));
        assert!(!t.matches(&[cs.blank()], &cs));
        let lit: Template = "'A' D x".parse().unwrap();
        assert!(lit.matches_symbols(&["A", "3", "x"]));
        assert!(!lit.matches_symbols(&["B", "3", "x"]));
        assert_eq!(lit.to_string(), "'A' D x");
        assert!("".parse::<Template>().is_err());
    }

    #[test]
    fn set_text_round_trip() {
        let text = "# plates\nP L A A A A A\nD D D # digits\n";
        let set = TemplateSet::parse(text).unwrap();
        assert_eq!(set.templates().len(), 2);
        assert_eq!(TemplateSet::parse(&set.to_text()).unwrap(), set);
        assert!(TemplateSet::parse("# nothing\n").is_err());
    }

    #[test]
    fn filter_examples() {
        let cs = CharSet::chinese();
        let set = TemplateSet::chinese();
        let good = enc(&cs, "京A12345");
        let short = enc(&cs, "京A1234");
        let bad = enc(&cs, "1A12345");
        let c = vec![(good.clone(), 0.5), (short.clone(), 0.3)];
        assert_eq!(post_filter(&c, &set, &cs).unwrap(), good);
        let c = vec![(short.clone(), 0.5), (bad.clone(), 0.3), (good.clone(), 0.1)];
        assert_eq!(post_filter(&c, &set, &cs).unwrap(), good);
        let c = vec![(short.clone(), 0.5), (bad.clone(), 0.3)];
        assert_eq!(post_filter(&c, &set, &cs).unwrap(), short);
        let reject = set.clone().with_fallback(Fallback::Reject);
        assert!(matches!(post_filter(&c, &reject, &cs), Err(Error::NoTemplateMatch)));
        assert!(post_filter(&[], &set, &cs).is_err());
    }

    proptest! {
        #[test]
        fn alnum_template_matches_membership_oracle(label in prop::collection::vec(0usize..65, 0..6)) {
            let cs = CharSet::chinese();
            let t: Template = "A A A".parse().unwrap();
            let oracle = label.len() == 3 && label.iter().all(|&k| {
                let s = cs.symbols()[k].as_str();
                s.len() == 1 && s.chars().all(|c| c.is_ascii_alphanumeric())
            });
            prop_assert_eq!(t.matches(&label, &cs), oracle);
        }

        #[test]
        fn filter_returns_first_matching_candidate(
            labels in prop::collection::vec(prop::collection::vec(0usize..65, 5..9), 1..8)
        ) {
            let cs = CharSet::chinese();
            let set = TemplateSet::chinese();
            let cands: Vec<(Label, f64)> = labels.into_iter().enumerate().map(|(i, l)| (l, 1.0 / (i + 2) as f64)).collect();
            let out = post_filter(&cands, &set, &cs).unwrap();
            let pos = cands.iter().position(|(l, _)| *l == out).unwrap();
            if set.matches(&out, &cs) {
                prop_assert!(cands[..pos].iter().all(|(l, _)| !set.matches(l, &cs)));
            } else {
                prop_assert_eq!(pos, 0);
                prop_assert!(cands.iter().all(|(l, _)| !set.matches(l, &cs)));
            }
        }
    }
}
