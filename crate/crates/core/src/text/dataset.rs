use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::vocab::{tokenize, Vocabulary, CLS, PAD, SEP};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Real(f64),
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Real(_) => None,
        }
    }

    pub fn real(self) -> f64 {
        match self {
            Label::Class(c) => c as f64,
            Label::Real(r) => r,
        }
    }

    fn kind(self) -> TaskKind {
        match self {
            Label::Class(_) => TaskKind::Classification,
            Label::Real(_) => TaskKind::Regression,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// One labelled input, single sentence or sentence pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub text_a: Vec<String>,
    pub text_b: Option<Vec<String>>,
    pub label: Label,
    pub domain: Domain,
}

impl Example {
    pub fn new(text: &str, text_b: Option<&str>, label: Label, domain: Domain) -> Self {
        Example {
            text_a: tokenize(text),
            text_b: text_b.map(tokenize),
            label,
            domain,
        }
    }

    /// Number of editable (non-special) tokens.
    pub fn m(&self) -> usize {
        self.text_a.len() + self.text_b.as_ref().map_or(0, Vec::len)
    }
}

#[derive(Serialize)]
struct JsonLine {
    text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    text_b: Option<String>,
    label: Label,
    domain: Domain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    task: TaskKind,
    split: Split,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, split: Split) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::Dataset("dataset is empty".into()))?;
        let task = first.label.kind();
        if let Some(i) = examples.iter().position(|e| e.label.kind() != task) {
            return Err(Error::Dataset(format!(
                "example {i} has a {:?} label in a {task:?} dataset",
                examples[i].label.kind()
            )));
        }
        Ok(Dataset {
            examples,
            task,
            split,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// One more than the largest class id (1 for regression).
    pub fn num_classes(&self) -> usize {
        match self.task {
            TaskKind::Regression => 1,
            TaskKind::Classification => {
                self.examples
                    .iter()
                    .filter_map(|e| e.label.class())
                    .max()
                    .unwrap_or(0)
                    + 1
            }
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// All sentences, both segments, as whitespace text.
    pub fn texts(&self) -> impl Iterator<Item = String> + '_ {
        self.examples.iter().flat_map(|e| {
            std::iter::once(e.text_a.join(" ")).chain(e.text_b.as_ref().map(|b| b.join(" ")))
        })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for e in &self.examples {
            let line = JsonLine {
                text: e.text_a.join(" "),
                text_b: e.text_b.as_ref().map(|b| b.join(" ")),
                label: e.label,
                domain: e.domain,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

fn data_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a JSONL dataset. Each line needs `text`, `label` and `domain`
/// (`"source"` or `"target"`); `text_b` is optional. Integer labels make a
/// classification dataset, real labels a regression dataset whose labels are
/// min-max normalized to `[0, 1]`.
pub fn load_jsonl(path: &Path, split: Split) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut examples = Vec::new();
    let mut kind: Option<(TaskKind, usize)> = None;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value =
            serde_json::from_str(&line).map_err(|e| data_err(path, lineno, e.to_string()))?;
        let obj = v
            .as_object()
            .ok_or_else(|| data_err(path, lineno, "line is not a JSON object"))?;
        let field = |name: &str| {
            obj.get(name)
                .ok_or_else(|| data_err(path, lineno, format!("missing field `{name}`")))
        };
        let text = field("text")?
            .as_str()
            .ok_or_else(|| data_err(path, lineno, "field `text` is not a string"))?;
        let text_b = match obj.get("text_b") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.as_str()),
            Some(_) => return Err(data_err(path, lineno, "field `text_b` is not a string")),
        };
        let label = match field("label")? {
            Value::Number(n) if n.is_u64() => Label::Class(n.as_u64().unwrap() as usize),
            Value::Number(n) => Label::Real(n.as_f64().unwrap_or(f64::NAN)),
            _ => return Err(data_err(path, lineno, "field `label` is not a number")),
        };
        if !label.real().is_finite() {
            return Err(data_err(path, lineno, "field `label` is not finite"));
        }
        let domain = match field("domain")?.as_str() {
            Some("source") => Domain::Source,
            Some("target") => Domain::Target,
            _ => {
                return Err(data_err(
                    path,
                    lineno,
                    "field `domain` must be \"source\" or \"target\"",
                ))
            }
        };
        match kind {
            None => kind = Some((label.kind(), lineno)),
            Some((k, first)) if k != label.kind() => {
                return Err(data_err(
                    path,
                    lineno,
                    format!(
                        "{:?} label mixed with {k:?} labels (first seen at line {first})",
                        label.kind()
                    ),
                ));
            }
            _ => {}
        }
        examples.push(Example::new(text, text_b, label, domain));
    }
    if matches!(kind, Some((TaskKind::Regression, _))) {
        normalize_regression(&mut examples);
    }
    Dataset::new(examples, split).map_err(|e| match e {
        Error::Dataset(m) => data_err(path, 0, m),
        e => e,
    })
}

fn normalize_regression(examples: &mut [Example]) {
    let (lo, hi) = examples
        .iter()
        .map(|e| e.label.real())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    for e in examples {
        let v = e.label.real();
        e.label = Label::Real(if span > 0.0 { (v - lo) / span } else { 0.0 });
    }
}

/// Draws exactly `n_per_class` examples of every class without replacement.
/// The result keeps the original relative order.
pub fn subsample_target(dataset: &Dataset, n_per_class: usize, seed: u64) -> Result<Dataset> {
    if dataset.task() != TaskKind::Classification {
        return Err(Error::Dataset(
            "subsampling per class needs a classification dataset".into(),
        ));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in dataset.examples().iter().enumerate() {
        by_class
            .entry(e.label.class().unwrap())
            .or_default()
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(n_per_class * by_class.len());
    for (class, mut idx) in by_class {
        if idx.len() < n_per_class {
            return Err(Error::Dataset(format!(
                "class {class} has {} examples, fewer than the {n_per_class} requested",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        picked.extend_from_slice(&idx[..n_per_class]);
    }
    picked.sort_unstable();
    let examples = picked
        .into_iter()
        .map(|i| dataset.examples()[i].clone())
        .collect();
    Dataset::new(examples, dataset.split())
}

/// Token ids laid out as `[CLS] a… [SEP] (b… [SEP])`, padded to a fixed
/// length. Padding always sits at the tail.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub editable: Vec<bool>,
    /// Number of leading non-pad positions.
    pub valid_len: usize,
}

impl Encoded {
    pub fn editable_positions(&self) -> Vec<usize> {
        self.editable
            .iter()
            .enumerate()
            .filter_map(|(i, &e)| e.then_some(i))
            .collect()
    }

    pub fn m(&self) -> usize {
        self.editable.iter().filter(|e| **e).count()
    }

    pub fn ids_usize(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| i as usize).collect()
    }
}

/// Encodes one example. Over-long inputs are truncated, longest segment
/// first.
pub fn encode(example: &Example, vocab: &Vocabulary, max_len: usize) -> Result<Encoded> {
    if max_len < 3 {
        return Err(Error::InvalidArgument(format!(
            "max_len {max_len} is below 3"
        )));
    }
    let mut a: Vec<u32> = example.text_a.iter().map(|t| vocab.id(t)).collect();
    let mut b: Option<Vec<u32>> = example
        .text_b
        .as_ref()
        .map(|b| b.iter().map(|t| vocab.id(t)).collect());
    let budget = max_len - 2 - usize::from(b.is_some());
    let before = a.len() + b.as_ref().map_or(0, Vec::len);
    while a.len() + b.as_ref().map_or(0, Vec::len) > budget {
        match &mut b {
            Some(bv) if bv.len() > a.len() => {
                bv.pop();
            }
            _ if !a.is_empty() => {
                a.pop();
            }
            Some(bv) => {
                bv.pop();
            }
            None => break,
        }
    }
    let after = a.len() + b.as_ref().map_or(0, Vec::len);
    if after < before {
        log::debug!("truncated input from {before} to {after} tokens");
    }
    let mut ids = Vec::with_capacity(max_len);
    let mut editable = Vec::with_capacity(max_len);
    ids.push(CLS);
    editable.push(false);
    for &t in &a {
        ids.push(t);
        editable.push(true);
    }
    ids.push(SEP);
    editable.push(false);
    if let Some(bv) = &b {
        for &t in bv {
            ids.push(t);
            editable.push(true);
        }
        ids.push(SEP);
        editable.push(false);
    }
    let valid_len = ids.len();
    ids.resize(max_len, PAD);
    editable.resize(max_len, false);
    Ok(Encoded {
        ids,
        editable,
        valid_len,
    })
}

/// Inverse of [`encode`] on the non-pad prefix.
pub fn decode(encoded: &Encoded, vocab: &Vocabulary) -> (Vec<String>, Option<Vec<String>>) {
    let mut segments: Vec<Vec<String>> = vec![Vec::new()];
    for &id in &encoded.ids[1..encoded.valid_len] {
        if id == SEP {
            segments.push(Vec::new());
        } else {
            segments
                .last_mut()
                .unwrap()
                .push(vocab.token(id).unwrap_or("[UNK]").to_string());
        }
    }
    segments.pop();
    let mut it = segments.into_iter();
    let a = it.next().unwrap_or_default();
    (a, it.next())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::vocab::{CLS, PAD, SEP};

    fn vocab() -> Vocabulary {
        Vocabulary::build(["hi a b"], 1).unwrap()
    }

    #[test]
    fn single_sentence_layout() {
        let v = vocab();
        let e = Example::new("hi", None, Label::Class(0), Domain::Target);
        let enc = encode(&e, &v, 5).unwrap();
        assert_eq!(enc.ids, vec![CLS, v.id("hi"), SEP, PAD, PAD]);
        assert_eq!(enc.valid_len, 3);
    }

    #[test]
    fn pair_layout_and_editable_mask() {
        let v = vocab();
        let e = Example::new("a", Some("b"), Label::Class(0), Domain::Target);
        let enc = encode(&e, &v, 6).unwrap();
        assert_eq!(enc.ids, vec![CLS, v.id("a"), SEP, v.id("b"), SEP, PAD]);
        assert_eq!(enc.editable, vec![false, true, false, true, false, false]);
        assert_eq!(enc.editable_positions(), vec![1, 3]);
    }

    #[test]
    fn truncation_and_decode() {
        let v = vocab();
        let e = Example::new("a b hi a", Some("b"), Label::Class(0), Domain::Target);
        let enc = encode(&e, &v, 6).unwrap();
        assert_eq!(enc.valid_len, 6);
        assert_eq!(enc.m(), 3);
        let (a, b) = decode(&enc, &v);
        assert_eq!(a, vec!["a", "b"]);
        assert_eq!(b.unwrap(), vec!["b"]);
        assert!(encode(&e, &v, 2).is_err());
    }

    fn balanced(n: usize) -> Dataset {
        let ex = (0..n)
            .map(|i| Example::new("a", None, Label::Class(i % 2), Domain::Target))
            .collect();
        Dataset::new(ex, Split::Train).unwrap()
    }

    #[test]
    fn subsample_balances_exactly() {
        let ds = balanced(1000);
        let sub = subsample_target(&ds, 40, 3).unwrap();
        assert_eq!(sub.len(), 80);
        let ones = sub
            .examples()
            .iter()
            .filter(|e| e.label == Label::Class(1))
            .count();
        assert_eq!(ones, 40);
        assert_eq!(sub, subsample_target(&ds, 40, 3).unwrap());
        assert!(subsample_target(&ds, 501, 3).is_err());
    }

    #[test]
    fn dataset_rejects_mixed_kinds() {
        let ex = vec![
            Example::new("a", None, Label::Class(1), Domain::Target),
            Example::new("a", None, Label::Real(0.5), Domain::Target),
        ];
        assert!(Dataset::new(ex, Split::Train).is_err());
        assert!(Dataset::new(vec![], Split::Train).is_err());
    }
}
