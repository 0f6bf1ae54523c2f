use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NliLabel, RteLabel, Sentiment};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NliExample {
    pub premise: String,
    pub hypothesis: String,
    pub label: NliLabel,
}

impl NliExample {
    pub fn new(premise: impl Into<String>, hypothesis: impl Into<String>, label: NliLabel) -> Self {
        Self {
            premise: premise.into(),
            hypothesis: hypothesis.into(),
            label,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RteExample {
    pub premise: String,
    pub hypothesis: String,
    pub label: RteLabel,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AbsaExample {
    pub text: String,
    pub topic: String,
    pub sentiment: Sentiment,
    pub split: String,
}

/// A sentence in the teacher language and its translation in the student
/// language.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParallelPair {
    pub source: String,
    pub target: String,
}

impl ParallelPair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Result<Self> {
        let (source, target) = (source.into(), target.into());
        if source.trim().is_empty() || target.trim().is_empty() {
            return Err(Error::data("parallel pair with an empty side"));
        }
        Ok(Self { source, target })
    }
}

/// Splits every non-empty line of a tab-separated file into exactly
/// `columns` non-empty fields and hands them to `row`.
fn read_rows<T>(
    path: &Path,
    columns: usize,
    mut row: impl FnMut(&[&str]) -> std::result::Result<T, String>,
) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != columns {
            return Err(parse_err(format!(
                "expected {columns} columns, found {}",
                fields.len()
            )));
        }
        if let Some(k) = fields.iter().position(|f| f.trim().is_empty()) {
            return Err(parse_err(format!("column {} is empty", k + 1)));
        }
        out.push(row(&fields).map_err(parse_err)?);
    }
    if out.is_empty() {
        return Err(Error::data(format!(
            "{} contains no records",
            path.display()
        )));
    }
    Ok(out)
}

fn check_field(s: &str) -> Result<&str> {
    if s.contains(['\t', '\n', '\r']) {
        return Err(Error::data(format!(
            "field {s:?} contains a tab or newline"
        )));
    }
    Ok(s)
}

fn write_rows<'a>(path: &Path, rows: impl Iterator<Item = Vec<&'a str>>) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        for (k, field) in row.iter().enumerate() {
            if k > 0 {
                text.push('\t');
            }
            text.push_str(check_field(field)?);
        }
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn load_nli(path: impl AsRef<Path>) -> Result<Vec<NliExample>> {
    read_rows(path.as_ref(), 3, |f| {
        let label = f[2].parse::<NliLabel>().map_err(|e| e.to_string())?;
        Ok(NliExample::new(f[0], f[1], label))
    })
}

pub fn save_nli(path: impl AsRef<Path>, examples: &[NliExample]) -> Result<()> {
    write_rows(
        path.as_ref(),
        examples
            .iter()
            .map(|e| vec![e.premise.as_str(), e.hypothesis.as_str(), e.label.as_str()]),
    )
}

pub fn load_rte(path: impl AsRef<Path>) -> Result<Vec<RteExample>> {
    read_rows(path.as_ref(), 3, |f| {
        let label = f[2].parse::<RteLabel>().map_err(|e| e.to_string())?;
        Ok(RteExample {
            premise: f[0].into(),
            hypothesis: f[1].into(),
            label,
        })
    })
}

pub fn save_rte(path: impl AsRef<Path>, examples: &[RteExample]) -> Result<()> {
    write_rows(
        path.as_ref(),
        examples
            .iter()
            .map(|e| vec![e.premise.as_str(), e.hypothesis.as_str(), e.label.as_str()]),
    )
}

/// Columns: text, topic, sentiment, split.
pub fn load_absa(path: impl AsRef<Path>) -> Result<Vec<AbsaExample>> {
    read_rows(path.as_ref(), 4, |f| {
        let sentiment = f[2].parse::<Sentiment>().map_err(|e| e.to_string())?;
        Ok(AbsaExample {
            text: f[0].into(),
            topic: f[1].into(),
            sentiment,
            split: f[3].into(),
        })
    })
}

pub fn save_absa(path: impl AsRef<Path>, examples: &[AbsaExample]) -> Result<()> {
    write_rows(
        path.as_ref(),
        examples.iter().map(|e| {
            vec![
                e.text.as_str(),
                e.topic.as_str(),
                e.sentiment.as_str(),
                e.split.as_str(),
            ]
        }),
    )
}

/// Columns: source, target.
pub fn load_parallel(path: impl AsRef<Path>) -> Result<Vec<ParallelPair>> {
    read_rows(path.as_ref(), 2, |f| {
        Ok(ParallelPair {
            source: f[0].into(),
            target: f[1].into(),
        })
    })
}

pub fn save_parallel(path: impl AsRef<Path>, pairs: &[ParallelPair]) -> Result<()> {
    write_rows(
        path.as_ref(),
        pairs
            .iter()
            .map(|p| vec![p.source.as_str(), p.target.as_str()]),
    )
}

/// Joins several NLI corpora into one by plain concatenation, in argument
/// order. No deduplication.
pub fn merge_nli(parts: &[&[NliExample]]) -> Vec<NliExample> {
    parts.iter().flat_map(|p| p.iter().cloned()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_snli_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        fs::write(
            &path,
            "A soccer game with multiple males playing\tSome men are playing a sport\tentailment\n",
        )
        .unwrap();
        let rows = load_nli(&path).unwrap();
        assert_eq!(
            rows,
            vec![NliExample::new(
                "A soccer game with multiple males playing",
                "Some men are playing a sport",
                NliLabel::Entailment
            )]
        );
    }

    #[test]
    fn bad_label_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        fs::write(&path, "a\tb\tneutral\nc\td\tmaybe\n").unwrap();
        match load_nli(&path) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("maybe"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        fs::write(&path, "a\tb\n").unwrap();
        assert!(matches!(load_nli(&path), Err(Error::Parse { line: 1, .. })));
        fs::write(&path, "a\t \tneutral\n").unwrap();
        assert!(matches!(load_nli(&path), Err(Error::Parse { line: 1, .. })));
        fs::write(&path, "").unwrap();
        assert!(matches!(load_nli(&path), Err(Error::Data(_))));
    }

    #[test]
    fn other_formats_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rte = vec![RteExample {
            premise: "p".into(),
            hypothesis: "h".into(),
            label: RteLabel::NoEntailment,
        }];
        save_rte(dir.path().join("r.tsv"), &rte).unwrap();
        assert_eq!(load_rte(dir.path().join("r.tsv")).unwrap(), rte);

        let absa = vec![AbsaExample {
            text: "the room was clean".into(),
            topic: "cleanliness".into(),
            sentiment: Sentiment::Positive,
            split: "test".into(),
        }];
        save_absa(dir.path().join("a.tsv"), &absa).unwrap();
        assert_eq!(load_absa(dir.path().join("a.tsv")).unwrap(), absa);

        let par = vec![ParallelPair::new("a b", "x y").unwrap()];
        save_parallel(dir.path().join("p.tsv"), &par).unwrap();
        assert_eq!(load_parallel(dir.path().join("p.tsv")).unwrap(), par);
        assert!(ParallelPair::new("", "x").is_err());
    }

    #[test]
    fn save_rejects_embedded_tabs() {
        let dir = tempfile::tempdir().unwrap();
        let bad = vec![NliExample::new("a\tb", "c", NliLabel::Neutral)];
        assert!(save_nli(dir.path().join("x.tsv"), &bad).is_err());
    }

    #[test]
    fn merge_is_concatenation() {
        let a = vec![NliExample::new("a", "b", NliLabel::Neutral)];
        let b = vec![
            NliExample::new("a", "b", NliLabel::Neutral),
            NliExample::new("c", "d", NliLabel::Entailment),
        ];
        let m = merge_nli(&[&a, &b]);
        assert_eq!(m.len(), 3);
        assert_eq!(m[0], a[0]);
        assert_eq!(&m[1..], &b[..]);
    }
}
