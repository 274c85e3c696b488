use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub type TokenId = u32;

/// Closed token inventory: concepts, then styles, then `BOS`, `EOS`, `PAD`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    n_concepts: usize,
    n_styles: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Concept(usize),
    Style(usize),
    Bos,
    Eos,
    Pad,
}

impl Vocab {
    pub fn new(n_concepts: usize, n_styles: usize) -> Self {
        Vocab {
            n_concepts,
            n_styles,
        }
    }

    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    pub fn n_styles(&self) -> usize {
        self.n_styles
    }

    /// Concepts plus styles.
    pub fn n_content(&self) -> usize {
        self.n_concepts + self.n_styles
    }

    pub fn size(&self) -> usize {
        self.n_content() + 3
    }

    pub fn concept(&self, j: usize) -> TokenId {
        assert!(j < self.n_concepts);
        j as TokenId
    }

    pub fn style(&self, j: usize) -> TokenId {
        assert!(j < self.n_styles);
        (self.n_concepts + j) as TokenId
    }

    pub fn bos(&self) -> TokenId {
        self.n_content() as TokenId
    }

    pub fn eos(&self) -> TokenId {
        self.n_content() as TokenId + 1
    }

    pub fn pad(&self) -> TokenId {
        self.n_content() as TokenId + 2
    }

    pub fn kind(&self, id: TokenId) -> Option<TokenKind> {
        let i = id as usize;
        if i < self.n_concepts {
            Some(TokenKind::Concept(i))
        } else if i < self.n_content() {
            Some(TokenKind::Style(i - self.n_concepts))
        } else if id == self.bos() {
            Some(TokenKind::Bos)
        } else if id == self.eos() {
            Some(TokenKind::Eos)
        } else if id == self.pad() {
            Some(TokenKind::Pad)
        } else {
            None
        }
    }

    pub fn is_content(&self, id: TokenId) -> bool {
        (id as usize) < self.n_content()
    }

    pub fn is_style(&self, id: TokenId) -> bool {
        matches!(self.kind(id), Some(TokenKind::Style(_)))
    }

    pub fn name(&self, id: TokenId) -> String {
        match self.kind(id) {
            Some(TokenKind::Concept(j)) => format!("c{j}"),
            Some(TokenKind::Style(j)) => format!("s{j}"),
            Some(TokenKind::Bos) => "<bos>".into(),
            Some(TokenKind::Eos) => "<eos>".into(),
            Some(TokenKind::Pad) => "<pad>".into(),
            None => format!("<unk:{id}>"),
        }
    }

    pub fn parse_token(&self, s: &str) -> Result<TokenId> {
        let parse_idx = |rest: &str, limit: usize| -> Option<usize> {
            rest.parse::<usize>().ok().filter(|&j| j < limit)
        };
        if let Some(rest) = s.strip_prefix('c') {
            if let Some(j) = parse_idx(rest, self.n_concepts) {
                return Ok(self.concept(j));
            }
        } else if let Some(rest) = s.strip_prefix('s') {
            if let Some(j) = parse_idx(rest, self.n_styles) {
                return Ok(self.style(j));
            }
        }
        Err(invalid(format!("unknown token {s:?}")))
    }

    /// Parse whitespace-separated token names such as `"c0 c1 s3"`.
    pub fn parse_prompt(&self, text: &str, max_len: usize) -> Result<Prompt> {
        let ids = text
            .split_whitespace()
            .map(|t| self.parse_token(t))
            .collect::<Result<Vec<_>>>()?;
        Prompt::new(ids, self, max_len)
    }

    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.name(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A nonempty sequence of content tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Prompt(Vec<TokenId>);

impl Prompt {
    pub fn new(tokens: Vec<TokenId>, vocab: &Vocab, max_len: usize) -> Result<Self> {
        let p = Prompt(tokens);
        p.validate(vocab, max_len)?;
        Ok(p)
    }

    /// Build without validation; callers must uphold the invariants.
    pub(crate) fn from_raw(tokens: Vec<TokenId>) -> Self {
        Prompt(tokens)
    }

    pub fn validate(&self, vocab: &Vocab, max_len: usize) -> Result<()> {
        if self.0.is_empty() {
            return Err(invalid("empty prompt"));
        }
        if self.0.len() > max_len {
            return Err(invalid(format!(
                "prompt length {} exceeds max_len {max_len}",
                self.0.len()
            )));
        }
        if let Some(&bad) = self.0.iter().find(|&&t| !vocab.is_content(t)) {
            return Err(invalid(format!(
                "token id {bad} is not a concept or style token"
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The concept tokens in order; `None` if the prompt has none.
    pub fn concept_projection(&self, vocab: &Vocab) -> Option<Prompt> {
        let c: Vec<_> = self
            .0
            .iter()
            .copied()
            .filter(|&t| matches!(vocab.kind(t), Some(TokenKind::Concept(_))))
            .collect();
        (!c.is_empty()).then_some(Prompt(c))
    }

    pub fn has_style(&self, vocab: &Vocab) -> bool {
        self.0.iter().any(|&t| vocab.is_style(t))
    }

    pub fn starts_with(&self, prefix: &Prompt) -> bool {
        self.0.starts_with(&prefix.0)
    }

    /// 0/1 indicator bags over concepts and styles.
    pub fn bags(&self, vocab: &Vocab) -> (Vec<f64>, Vec<f64>) {
        let mut concepts = vec![0.0; vocab.n_concepts()];
        let mut styles = vec![0.0; vocab.n_styles()];
        for &t in &self.0 {
            match vocab.kind(t) {
                Some(TokenKind::Concept(j)) => concepts[j] = 1.0,
                Some(TokenKind::Style(j)) => styles[j] = 1.0,
                _ => {}
            }
        }
        (concepts, styles)
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        write!(f, "[{}]", ids.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_dense_and_disjoint() {
        let v = Vocab::new(8, 4);
        assert_eq!(v.size(), 15);
        assert_eq!(v.concept(7), 7);
        assert_eq!(v.style(0), 8);
        assert_eq!((v.bos(), v.eos(), v.pad()), (12, 13, 14));
        for id in 0..15 {
            assert!(v.kind(id).is_some());
        }
        assert!(v.kind(15).is_none());
    }

    #[test]
    fn parse_and_render_round_trip() {
        let v = Vocab::new(8, 4);
        let p = v.parse_prompt("c0 c1 s3", 12).unwrap();
        assert_eq!(p.tokens(), &[0, 1, 11]);
        assert_eq!(v.render(p.tokens()), "c0 c1 s3");
        assert!(v.parse_prompt("c9", 12).is_err());
        assert!(v.parse_prompt("", 12).is_err());
    }

    #[test]
    fn prompt_rejects_specials_and_overlength() {
        let v = Vocab::new(8, 4);
        assert!(Prompt::new(vec![0, v.pad()], &v, 12).is_err());
        assert!(Prompt::new(vec![99], &v, 12).is_err());
        assert!(Prompt::new(vec![0; 13], &v, 12).is_err());
        assert!(Prompt::new(vec![], &v, 12).is_err());
    }
}
