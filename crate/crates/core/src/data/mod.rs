//! Record types, TSV loaders, synthetic corpora and sampling utilities.

mod balance;
mod cipher;
mod records;
mod synth;

pub use balance::balance_sample;
pub use cipher::{apply_cipher, CipherSpec, CipheredNli};
pub use records::{
    load_absa, load_nli, load_parallel, load_rte, merge_nli, save_absa, save_nli, save_parallel,
    save_rte, AbsaExample, NliExample, ParallelPair, RteExample,
};
pub use synth::{gen_synthetic_absa, gen_synthetic_nli, Lexicon, ABSA_TOPICS, LEXICON};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Three-way inference label. The discriminant is the class index used by
/// the classifier output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NliLabel {
    Entailment = 0,
    Neutral = 1,
    Contradiction = 2,
}

impl NliLabel {
    pub const ALL: [NliLabel; 3] = [
        NliLabel::Entailment,
        NliLabel::Neutral,
        NliLabel::Contradiction,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Label(format!("class index {i} outside 0..3")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NliLabel::Entailment => "entailment",
            NliLabel::Neutral => "neutral",
            NliLabel::Contradiction => "contradiction",
        }
    }
}

impl fmt::Display for NliLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NliLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entailment" => Ok(NliLabel::Entailment),
            "neutral" => Ok(NliLabel::Neutral),
            "contradiction" => Ok(NliLabel::Contradiction),
            other => Err(Error::Label(format!("unknown NLI label {other:?}"))),
        }
    }
}

/// Two-way entailment label used by RTE-style data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RteLabel {
    Entailment,
    NoEntailment,
}

impl RteLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            RteLabel::Entailment => "entailment",
            RteLabel::NoEntailment => "no-entailment",
        }
    }
}

impl FromStr for RteLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entailment" => Ok(RteLabel::Entailment),
            "no-entailment" => Ok(RteLabel::NoEntailment),
            other => Err(Error::Label(format!("unknown RTE label {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sentiment {
    Positive,
    Negative,
}

impl Sentiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Positive => "positive",
            Sentiment::Negative => "negative",
        }
    }
}

impl FromStr for Sentiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Sentiment::Positive),
            "negative" => Ok(Sentiment::Negative),
            other => Err(Error::Label(format!("unknown sentiment {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_strings_round_trip() {
        for l in NliLabel::ALL {
            assert_eq!(l.as_str().parse::<NliLabel>().unwrap(), l);
            assert_eq!(NliLabel::from_index(l.index()).unwrap(), l);
        }
        assert!("maybe".parse::<NliLabel>().is_err());
        assert!("Entailment".parse::<NliLabel>().is_err());
        assert!(NliLabel::from_index(3).is_err());
        assert_eq!(
            "no-entailment".parse::<RteLabel>().unwrap(),
            RteLabel::NoEntailment
        );
        assert_eq!(
            "positive".parse::<Sentiment>().unwrap(),
            Sentiment::Positive
        );
    }
}
