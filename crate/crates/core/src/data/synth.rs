//! Template grammars for the synthetic NLI task and the hotel-review
//! analog used by the zero-shot adapters.
//!
//! NLI premises have the shape `det subject is specific location`, where the
//! specific predicate belongs to one side of an opposed pair of general
//! predicates. Hypotheses restate the subject (or its hypernym) with a
//! general predicate from the same pair, optionally negated, or with an
//! attribute from a pool that no premise ever mentions:
//!
//! * entailment: the premise's own general predicate
//! * contradiction: the opposite general predicate, or `not` + its own
//! * neutral: an unrelated attribute, optionally negated

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AbsaExample, NliExample, NliLabel, Sentiment};
use crate::error::{Error, Result};

/// Two mutually exclusive general predicates and the specific predicates
/// that imply each of them.
#[derive(Debug)]
pub struct PredicatePair {
    pub general: [&'static str; 2],
    pub specific: [&'static [&'static str]; 2],
}

#[derive(Debug)]
pub struct Lexicon {
    /// `(noun, hypernym)`
    pub subjects: &'static [(&'static str, &'static str)],
    pub pairs: &'static [PredicatePair],
    /// Attributes disjoint from every premise predicate.
    pub neutral: &'static [&'static str],
    pub determiners: &'static [&'static str],
    pub locations: &'static [&'static str],
}

pub const LEXICON: Lexicon = Lexicon {
    subjects: &[
        ("man", "person"),
        ("woman", "person"),
        ("boy", "person"),
        ("girl", "person"),
        ("doctor", "person"),
        ("farmer", "person"),
        ("teacher", "person"),
        ("student", "person"),
        ("chef", "person"),
        ("artist", "person"),
        ("pilot", "person"),
        ("nurse", "person"),
        ("dog", "animal"),
        ("cat", "animal"),
        ("horse", "animal"),
        ("rabbit", "animal"),
        ("goat", "animal"),
        ("bird", "animal"),
    ],
    pairs: &[
        PredicatePair {
            general: ["moving", "resting"],
            specific: [
                &["running", "jumping", "dancing", "swimming", "climbing"],
                &["sleeping", "sitting", "napping", "lying", "dozing"],
            ],
        },
        PredicatePair {
            general: ["loud", "quiet"],
            specific: [
                &["shouting", "singing", "cheering", "drumming", "barking"],
                &[
                    "reading",
                    "whispering",
                    "meditating",
                    "writing",
                    "listening",
                ],
            ],
        },
    ],
    neutral: &[
        "happy", "tired", "hungry", "famous", "young", "old", "tall", "rich", "sad", "brave",
    ],
    determiners: &["a", "the"],
    locations: &[
        "in the park",
        "near the river",
        "at the beach",
        "on the street",
        "in the garden",
        "by the lake",
    ],
};

impl Lexicon {
    /// Every distinct word the grammar can emit, in first-appearance order.
    pub fn words(&self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = Vec::new();
        let mut push = |w: &'static str| {
            if !out.contains(&w) {
                out.push(w);
            }
        };
        for d in self.determiners {
            push(d);
        }
        for (s, h) in self.subjects {
            push(s);
            push(h);
        }
        push("is");
        push("not");
        for p in self.pairs {
            for side in 0..2 {
                push(p.general[side]);
                p.specific[side].iter().for_each(|w| push(w));
            }
        }
        for w in self.neutral {
            push(w);
        }
        for loc in self.locations {
            loc.split_whitespace().for_each(&mut push);
        }
        out
    }

    /// Pair index and side of a specific predicate.
    pub fn specific_side(&self, word: &str) -> Option<(usize, usize)> {
        self.pairs.iter().enumerate().find_map(|(i, p)| {
            (0..2)
                .find(|&s| p.specific[s].contains(&word))
                .map(|s| (i, s))
        })
    }

    /// Pair index and side of a general predicate.
    pub fn general_side(&self, word: &str) -> Option<(usize, usize)> {
        self.pairs
            .iter()
            .enumerate()
            .find_map(|(i, p)| (0..2).find(|&s| p.general[s] == word).map(|s| (i, s)))
    }
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

fn nli_example(rng: &mut ChaCha8Rng, label: NliLabel, subjects: &[(&str, &str)]) -> NliExample {
    let lex = &LEXICON;
    let (noun, hypernym) = *pick(rng, subjects);
    let pair = pick(rng, lex.pairs);
    let side = rng.random_range(0..2);
    let specific = pick(rng, pair.specific[side]);
    let premise = format!(
        "{} {noun} is {specific} {}",
        pick(rng, lex.determiners),
        pick(rng, lex.locations)
    );

    let subject = if rng.random_bool(0.5) { noun } else { hypernym };
    let negated = match label {
        NliLabel::Entailment => false,
        NliLabel::Neutral => rng.random_ratio(1, 3),
        NliLabel::Contradiction => rng.random_bool(0.5),
    };
    let predicate = match label {
        NliLabel::Entailment => pair.general[side],
        NliLabel::Contradiction => pair.general[side ^ usize::from(!negated)],
        NliLabel::Neutral => pick(rng, lex.neutral),
    };
    let not = if negated { "not " } else { "" };
    let hypothesis = format!(
        "{} {subject} is {not}{predicate}",
        pick(rng, lex.determiners)
    );
    NliExample::new(premise, hypothesis, label)
}

/// `n` template pairs over the first `grammar_size` subjects of
/// [`LEXICON`]. Labels cycle through the three classes before shuffling, so
/// each class count is within one of `n / 3`.
pub fn gen_synthetic_nli(seed: u64, n: usize, grammar_size: usize) -> Result<Vec<NliExample>> {
    if n < 3 {
        return Err(Error::Argument(format!(
            "need at least 3 examples, got {n}"
        )));
    }
    let max = LEXICON.subjects.len();
    if !(10..=max).contains(&grammar_size) {
        return Err(Error::Argument(format!(
            "grammar_size must be in 10..={max}, got {grammar_size}"
        )));
    }
    let subjects = &LEXICON.subjects[..grammar_size];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<NliExample> = (0..n)
        .map(|i| nli_example(&mut rng, NliLabel::ALL[i % 3], subjects))
        .collect();
    out.shuffle(&mut rng);
    Ok(out)
}

pub const ABSA_TOPICS: [&str; 7] = [
    "cleanliness",
    "comfort",
    "amenities",
    "staff",
    "value",
    "wifi",
    "location",
];

const ABSA_PHRASES: [[&[&str]; 2]; 7] = [
    [
        &[
            "the room was spotless",
            "the bathroom was very clean",
            "the sheets were fresh",
        ],
        &[
            "the room was dirty",
            "the bathroom was filthy",
            "there was dust everywhere",
        ],
    ],
    [
        &[
            "the bed was very comfortable",
            "we slept really well",
            "the pillows were soft",
        ],
        &[
            "the bed was hard",
            "we could not sleep at all",
            "the mattress was awful",
        ],
    ],
    [
        &[
            "the pool was great",
            "the gym had everything",
            "the breakfast buffet was rich",
        ],
        &[
            "the pool was closed",
            "the gym was broken",
            "the breakfast was poor",
        ],
    ],
    [
        &[
            "the staff was friendly",
            "the receptionist was helpful",
            "the owners were kind",
        ],
        &[
            "the staff was rude",
            "the receptionist ignored us",
            "the owners were unhelpful",
        ],
    ],
    [
        &[
            "the price was fair",
            "it was worth every euro",
            "a bargain for the quality",
        ],
        &[
            "it was far too expensive",
            "the price was a rip off",
            "not worth the money",
        ],
    ],
    [
        &[
            "the wifi was fast",
            "internet worked perfectly",
            "the connection was stable",
        ],
        &[
            "the wifi kept dropping",
            "internet was painfully slow",
            "no connection in the room",
        ],
    ],
    [
        &[
            "close to the station",
            "the view of the sea was lovely",
            "right in the centre",
        ],
        &[
            "far from everything",
            "the street was noisy",
            "hard to reach by bus",
        ],
    ],
];

const ABSA_OPENERS: [&str; 4] = ["honestly", "overall", "we found that", "in short"];

/// Hotel-review analog: `n` single-topic reviews cycling over the seven
/// topics and both sentiments, shuffled; the first 80% are tagged `train`,
/// the rest `test`.
pub fn gen_synthetic_absa(seed: u64, n: usize) -> Result<Vec<AbsaExample>> {
    if n == 0 {
        return Err(Error::Argument("need at least one review".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<AbsaExample> = (0..n)
        .map(|i| {
            let topic = (i / 2) % ABSA_TOPICS.len();
            let sentiment = if i % 2 == 0 {
                Sentiment::Positive
            } else {
                Sentiment::Negative
            };
            let phrase = pick(&mut rng, ABSA_PHRASES[topic][i % 2]);
            AbsaExample {
                text: format!("{} {phrase}", pick(&mut rng, &ABSA_OPENERS)),
                topic: ABSA_TOPICS[topic].to_string(),
                sentiment,
                split: String::new(),
            }
        })
        .collect();
    out.shuffle(&mut rng);
    let n_train = n * 4 / 5;
    for (i, ex) in out.iter_mut().enumerate() {
        ex.split = if i < n_train { "train" } else { "test" }.to_string();
    }
    Ok(out)
}
