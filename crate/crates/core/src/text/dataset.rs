use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::vocab::Vocabulary;

/// One labeled instance: target text, zero or more context texts, class id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub text: Vec<String>,
    pub contexts: Vec<Vec<String>>,
    pub label: usize,
}

/// Examples plus class names; `labels[id]` is the name of class `id`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub labels: Vec<String>,
}

/// Example with tokens replaced by vocabulary ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub text: Vec<usize>,
    pub contexts: Vec<Vec<usize>>,
    pub label: usize,
}

/// Whitespace split, lowercased.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(|t| t.to_lowercase()).collect()
}

#[derive(Deserialize)]
struct RawRecord {
    label: Option<serde_json::Value>,
    text: Option<String>,
    #[serde(default)]
    contexts: Vec<String>,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    label: &'a str,
    text: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    contexts: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn encode(&self, vocab: &Vocabulary) -> Vec<EncodedExample> {
        self.examples.iter().map(|e| e.encode(vocab)).collect()
    }

    /// Re-maps class ids onto `labels` by name. Fails on a name `labels`
    /// does not contain.
    pub fn relabel(&self, labels: &[String]) -> Result<Dataset> {
        let mut examples = self.examples.clone();
        for ex in &mut examples {
            let name = &self.labels[ex.label];
            ex.label = labels
                .iter()
                .position(|l| l == name)
                .ok_or_else(|| Error::Config(format!("label {name:?} is not one of the model classes {labels:?}")))?;
        }
        Ok(Dataset {
            examples,
            labels: labels.to_vec(),
        })
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for ex in &self.examples {
            let rec = OutRecord {
                label: &self.labels[ex.label],
                text: ex.text.join(" "),
                contexts: ex.contexts.iter().map(|c| c.join(" ")).collect(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

impl Example {
    pub fn encode(&self, vocab: &Vocabulary) -> EncodedExample {
        EncodedExample {
            text: vocab.encode(&self.text),
            contexts: self.contexts.iter().map(|c| vocab.encode(c)).collect(),
            label: self.label,
        }
    }
}

/// Reads one JSON object per line: `label` (string), `text` (string) and an
/// optional `contexts` list of strings. Blank lines are skipped. Class ids
/// follow first-appearance order of labels.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ds = Dataset::default();
    let fmt = |line: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        line,
        msg,
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| fmt(lineno, format!("invalid JSON: {e}")))?;
        let label = match rec.label {
            Some(serde_json::Value::String(s)) => s,
            Some(other) => return Err(fmt(lineno, format!("label must be a string, got {other}"))),
            None => return Err(fmt(lineno, "missing \"label\"".into())),
        };
        let text = rec.text.ok_or_else(|| fmt(lineno, "missing \"text\"".into()))?;
        let text = tokenize(&text);
        if text.is_empty() {
            return Err(fmt(lineno, "empty \"text\"".into()));
        }
        let mut contexts = Vec::with_capacity(rec.contexts.len());
        for (k, c) in rec.contexts.iter().enumerate() {
            let toks = tokenize(c);
            if toks.is_empty() {
                return Err(fmt(lineno, format!("context {k} is empty")));
            }
            contexts.push(toks);
        }
        let class = match ds.labels.iter().position(|l| *l == label) {
            Some(c) => c,
            None => {
                ds.labels.push(label);
                ds.labels.len() - 1
            }
        };
        ds.examples.push(Example {
            text,
            contexts,
            label: class,
        });
    }
    Ok(ds)
}
