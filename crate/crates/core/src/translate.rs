//! Machine-translation baseline: fine-tuning on NLI data translated one
//! mini-batch at a time by a pluggable [`Translator`].

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::data::NliExample;
use crate::error::{Error, Result};
use crate::head::NliModel;
use crate::optim::TrainingHyperParams;
use crate::train::{train_classifier, RunOptions, TrainingLog};

/// Deterministic text-to-text map. `translate_many` is the batch entry point
/// and returns one output per input, in order.
pub trait Translator: Sync {
    fn translate(&self, text: &str) -> Result<String>;

    fn translate_many(&self, texts: &[&str]) -> Result<Vec<String>> {
        texts.iter().map(|t| self.translate(t)).collect()
    }
}

impl<T: Translator + ?Sized> Translator for &T {
    fn translate(&self, text: &str) -> Result<String> {
        (**self).translate(text)
    }

    fn translate_many(&self, texts: &[&str]) -> Result<Vec<String>> {
        (**self).translate_many(texts)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityTranslator;

impl Translator for IdentityTranslator {
    fn translate(&self, text: &str) -> Result<String> {
        Ok(text.to_string())
    }
}

/// Word-by-word substitution through an injective map.
#[derive(Clone, Debug)]
pub struct DictionaryTranslator {
    map: HashMap<String, String>,
    pub passthrough: bool,
}

impl DictionaryTranslator {
    pub fn new(map: impl IntoIterator<Item = (String, String)>, passthrough: bool) -> Result<Self> {
        let map: HashMap<String, String> = map.into_iter().collect();
        let mut seen = HashMap::with_capacity(map.len());
        for (src, dst) in &map {
            if let Some(prev) = seen.insert(dst, src) {
                return Err(Error::data(format!(
                    "dictionary is not injective: {prev:?} and {src:?} both map to {dst:?}"
                )));
            }
        }
        Ok(Self { map, passthrough })
    }

    pub fn from_cipher(spec: &crate::data::CipherSpec) -> Self {
        let map: BTreeMap<String, String> = spec.map().clone();
        Self {
            map: map.into_iter().collect(),
            passthrough: spec.passthrough,
        }
    }
}

impl Translator for DictionaryTranslator {
    fn translate(&self, text: &str) -> Result<String> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            match self
                .map
                .get(word)
                .or_else(|| self.map.get(&word.to_lowercase()))
            {
                Some(w) => out.push(w.as_str()),
                None if self.passthrough => out.push(word),
                None => return Err(Error::Coverage(word.to_string())),
            }
        }
        Ok(out.join(" "))
    }
}

struct Pipe {
    _child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// External translator speaking a line protocol on its standard streams:
/// one sentence per line in, one translation per line out, UTF-8. Each batch
/// is written in full and flushed before its replies are read.
pub struct SubprocessTranslator {
    pipe: Mutex<Pipe>,
}

impl SubprocessTranslator {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            pipe: Mutex::new(Pipe {
                _child: child,
                stdin,
                stdout,
            }),
        })
    }
}

impl Translator for SubprocessTranslator {
    fn translate(&self, text: &str) -> Result<String> {
        Ok(self.translate_many(&[text])?.remove(0))
    }

    fn translate_many(&self, texts: &[&str]) -> Result<Vec<String>> {
        let mut pipe = self
            .pipe
            .lock()
            .map_err(|_| Error::data("translator pipe poisoned"))?;
        for t in texts {
            if t.contains('\n') {
                return Err(Error::data("sentence contains a newline"));
            }
            writeln!(pipe.stdin, "{t}")?;
        }
        pipe.stdin.flush()?;
        let mut out = Vec::with_capacity(texts.len());
        for _ in texts {
            let mut line = String::new();
            if pipe.stdout.read_line(&mut line)? == 0 {
                return Err(Error::data("translator closed its output"));
            }
            out.push(line.trim_end_matches(['\n', '\r']).to_string());
        }
        Ok(out)
    }
}

/// Wraps a translator and counts sentences and batches passed through it.
pub struct CountingTranslator<T> {
    inner: T,
    sentences: AtomicUsize,
    batches: AtomicUsize,
    largest_batch: AtomicUsize,
}

impl<T: Translator> CountingTranslator<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            sentences: AtomicUsize::new(0),
            batches: AtomicUsize::new(0),
            largest_batch: AtomicUsize::new(0),
        }
    }

    pub fn sentences(&self) -> usize {
        self.sentences.load(Ordering::SeqCst)
    }

    pub fn batches(&self) -> usize {
        self.batches.load(Ordering::SeqCst)
    }

    pub fn largest_batch(&self) -> usize {
        self.largest_batch.load(Ordering::SeqCst)
    }
}

impl<T: Translator> Translator for CountingTranslator<T> {
    fn translate(&self, text: &str) -> Result<String> {
        self.translate_many(&[text]).map(|mut v| v.remove(0))
    }

    fn translate_many(&self, texts: &[&str]) -> Result<Vec<String>> {
        self.sentences.fetch_add(texts.len(), Ordering::SeqCst);
        self.batches.fetch_add(1, Ordering::SeqCst);
        self.largest_batch.fetch_max(texts.len(), Ordering::SeqCst);
        self.inner.translate_many(texts)
    }
}

/// Memoizes another translator by input string.
pub struct CachingTranslator<T> {
    inner: T,
    cache: Mutex<HashMap<String, String>>,
}

impl<T: Translator> CachingTranslator<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl<T: Translator> Translator for CachingTranslator<T> {
    fn translate(&self, text: &str) -> Result<String> {
        self.translate_many(&[text]).map(|mut v| v.remove(0))
    }

    fn translate_many(&self, texts: &[&str]) -> Result<Vec<String>> {
        let mut cache = self
            .cache
            .lock()
            .map_err(|_| Error::data("translation cache poisoned"))?;
        let missing: Vec<&str> = texts
            .iter()
            .copied()
            .filter(|t| !cache.contains_key(*t))
            .collect();
        if !missing.is_empty() {
            for (src, dst) in missing.iter().zip(self.inner.translate_many(&missing)?) {
                cache.insert(src.to_string(), dst);
            }
        }
        Ok(texts.iter().map(|t| cache[*t].clone()).collect())
    }
}

/// Translates premise and hypothesis of every example in one translator
/// batch. Labels and order are kept. A failure is reported against the
/// index of the offending example.
pub fn translate_batch<T: Translator + ?Sized>(
    t: &T,
    batch: &[NliExample],
) -> Result<Vec<NliExample>> {
    if batch.is_empty() {
        return Err(Error::data("empty translation batch"));
    }
    let texts: Vec<&str> = batch
        .iter()
        .flat_map(|e| [e.premise.as_str(), e.hypothesis.as_str()])
        .collect();
    let out = match t.translate_many(&texts) {
        Ok(out) => out,
        Err(_) => {
            // Locate the failing example sentence by sentence.
            for (i, ex) in batch.iter().enumerate() {
                for text in [&ex.premise, &ex.hypothesis] {
                    if let Err(e) = t.translate(text) {
                        return Err(Error::Translation {
                            index: i,
                            message: e.to_string(),
                        });
                    }
                }
            }
            return Err(Error::Translation {
                index: 0,
                message: "batch translation failed".into(),
            });
        }
    };
    if out.len() != texts.len() {
        return Err(Error::Translation {
            index: out.len() / 2,
            message: format!("expected {} outputs, got {}", texts.len(), out.len()),
        });
    }
    let mut result = Vec::with_capacity(batch.len());
    for (i, (ex, pair)) in batch.iter().zip(out.chunks(2)).enumerate() {
        if pair.iter().any(|s| s.trim().is_empty()) {
            return Err(Error::Translation {
                index: i,
                message: "empty translation".into(),
            });
        }
        result.push(NliExample::new(pair[0].clone(), pair[1].clone(), ex.label));
    }
    Ok(result)
}

/// [`crate::train::finetune_nli`] with every mini-batch passed through
/// [`translate_batch`] just before it is used.
pub fn finetune_translated<T: Translator + ?Sized>(
    model: &mut NliModel,
    dataset: &[NliExample],
    translator: &T,
    hyper: &TrainingHyperParams,
    opts: RunOptions,
) -> Result<TrainingLog> {
    train_classifier(model, dataset, hyper, opts, &mut |batch| {
        translate_batch(translator, &batch)
    })
}
