use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLANK: usize = 0;
pub const EOS: usize = 1;

/// Token inventory: `0` is the transducer blank, `1` is end-of-sentence,
/// then `num_common` frequent tokens, then `num_rare` rare tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub num_common: usize,
    pub num_rare: usize,
}

impl Vocab {
    pub fn new(num_common: usize, num_rare: usize) -> Result<Self> {
        if num_common == 0 {
            return Err(Error::Corpus("vocabulary needs at least one common token".into()));
        }
        Ok(Vocab {
            num_common,
            num_rare,
        })
    }

    pub fn size(&self) -> usize {
        2 + self.num_common + self.num_rare
    }

    pub fn blank(&self) -> usize {
        BLANK
    }

    pub fn eos(&self) -> usize {
        EOS
    }

    pub fn common(&self) -> std::ops::Range<usize> {
        2..2 + self.num_common
    }

    pub fn rare(&self) -> std::ops::Range<usize> {
        2 + self.num_common..self.size()
    }

    pub fn is_rare(&self, t: usize) -> bool {
        self.rare().contains(&t)
    }

    /// Tokens that may appear in a transcript.
    pub fn is_lexical(&self, t: usize) -> bool {
        t >= 2 && t < self.size()
    }

    /// Human-readable form: `c<i>` for common and `R<i>` for rare tokens.
    pub fn token_name(&self, t: usize) -> String {
        match t {
            BLANK => "<b>".into(),
            EOS => "</s>".into(),
            _ if self.common().contains(&t) => format!("c{}", t - 2),
            _ if self.is_rare(t) => format!("R{}", t - 2 - self.num_common),
            _ => format!("?{t}"),
        }
    }

    pub fn render(&self, tokens: &[usize]) -> String {
        tokens.iter().map(|&t| self.token_name(t)).collect::<Vec<_>>().join(" ")
    }

    pub fn check_transcript(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| !self.is_lexical(t)) {
            Some(t) => Err(Error::Corpus(format!("token {t} is not a transcript token"))),
            None => Ok(()),
        }
    }
}
