//! Lexicon-driven text sentiment labelling.
//!
//! Lexicon files are UTF-8 text, one `word<TAB>score` entry per line. Blank
//! lines and lines starting with `#` are skipped.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::SentimentLabel;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    scores: HashMap<String, f64>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, word: impl Into<String>, score: f64) {
        self.scores.insert(word.into(), score);
    }

    /// Polarity of `word`; unknown words score 0.
    pub fn score(&self, word: &str) -> f64 {
        self.scores.get(word).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lex = Lexicon::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, score) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("lexicon line {}: expected word<TAB>score", n + 1)))?;
            let score: f64 = score
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("lexicon line {}: bad score {score:?}", n + 1)))?;
            if !score.is_finite() {
                return Err(Error::Data(format!("lexicon line {}: non-finite score", n + 1)));
            }
            lex.insert(word.trim(), score);
        }
        Ok(lex)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::parse(&text)
    }
}

/// Sum of token polarities, then its sign: `> 0` positive, `< 0` negative,
/// `0` neutral.
///
/// Scores are summed in ascending order so the label does not depend on
/// token order.
pub fn score_text_sentiment<S: AsRef<str>>(tokens: &[S], lexicon: &Lexicon) -> SentimentLabel {
    let mut scores: Vec<f64> = tokens.iter().map(|t| lexicon.score(t.as_ref())).collect();
    scores.sort_by(f64::total_cmp);
    let total: f64 = scores.iter().sum();
    if total > 0.0 {
        SentimentLabel::Positive
    } else if total < 0.0 {
        SentimentLabel::Negative
    } else {
        SentimentLabel::Neutral
    }
}
