//! Deterministic synthetic source/target classification tasks.
//!
//! A sentence is a bag of filler tokens plus keywords. The label is the class
//! whose keyword set contributes the most tokens; distractor keywords from
//! other classes are always outnumbered. Each class owns keywords shared by
//! both domains plus keywords that only ever appear in one domain, which is
//! the domain shift a target-only learner cannot see past.

use std::collections::BTreeSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Domain, Example, Label, Split};
use crate::{Error, Result};

/// Per-class keyword sets for each domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeywordSets {
    pub source: Vec<BTreeSet<String>>,
    pub target: Vec<BTreeSet<String>>,
}

impl KeywordSets {
    pub fn for_domain(&self, domain: Domain) -> &[BTreeSet<String>] {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    fn validate(&self, classes: usize) -> Result<()> {
        for (name, sets) in [("source", &self.source), ("target", &self.target)] {
            if sets.len() != classes {
                return Err(Error::Config(format!(
                    "{name} keyword sets: expected {classes} classes, got {}",
                    sets.len()
                )));
            }
            for (c, s) in sets.iter().enumerate() {
                if s.is_empty() {
                    return Err(Error::Config(format!(
                        "{name} keyword set for class {c} is empty"
                    )));
                }
            }
            for i in 0..sets.len() {
                for j in i + 1..sets.len() {
                    if let Some(w) = sets[i].intersection(&sets[j]).next() {
                        return Err(Error::Config(format!(
                            "{name} keyword `{w}` belongs to both class {i} and class {j}"
                        )));
                    }
                }
            }
        }
        let shared = (0..classes).any(|c| {
            self.source[c]
                .intersection(&self.target[c])
                .next()
                .is_some()
        });
        if !shared {
            log::warn!(
                "source and target keyword sets do not overlap; nothing transfers across domains"
            );
        }
        Ok(())
    }

    /// Keyword-count rule: the class with the most keyword hits in `tokens`.
    /// Ties and keyword-free inputs give `None`.
    pub fn classify(&self, tokens: &[String], domain: Domain) -> Option<usize> {
        let sets = self.for_domain(domain);
        let counts: Vec<usize> = sets
            .iter()
            .map(|s| tokens.iter().filter(|t| s.contains(*t)).count())
            .collect();
        let best = *counts.iter().max()?;
        if best == 0 || counts.iter().filter(|c| **c == best).count() > 1 {
            return None;
        }
        counts.iter().position(|c| *c == best)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: usize,
    /// Filler tokens common to both domains, drawn Zipf-distributed.
    pub filler_vocab: usize,
    /// Extra filler tokens private to each domain.
    pub domain_filler: usize,
    pub domain_filler_rate: f64,
    /// Keywords per class present in both domains.
    pub shared_keywords: usize,
    /// Keywords per class present in only one domain.
    pub domain_keywords: usize,
    /// Overrides the generated keyword sets.
    pub keywords: Option<KeywordSets>,
    pub min_len: usize,
    pub max_len: usize,
    pub min_keywords: usize,
    pub max_keywords: usize,
    pub max_distractors: usize,
    pub source_size: usize,
    pub target_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 2,
            filler_vocab: 40,
            domain_filler: 10,
            domain_filler_rate: 0.3,
            shared_keywords: 12,
            domain_keywords: 24,
            keywords: None,
            min_len: 5,
            max_len: 8,
            min_keywords: 1,
            max_keywords: 2,
            max_distractors: 1,
            source_size: 800,
            target_size: 500,
            validation_size: 100,
            test_size: 500,
        }
    }
}

/// Generated task splits.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub source: Dataset,
    /// Full labelled target pool before data-scarce subsampling.
    pub target: Dataset,
    pub target_validation: Dataset,
    pub target_test: Dataset,
    pub keywords: KeywordSets,
}

impl SynthSpec {
    pub fn keyword_sets(&self) -> KeywordSets {
        if let Some(k) = &self.keywords {
            return k.clone();
        }
        let mut source = Vec::new();
        let mut target = Vec::new();
        for c in 0..self.classes {
            let shared = (0..self.shared_keywords).map(|i| format!("c{c}_s{i}"));
            source.push(
                shared
                    .clone()
                    .chain((0..self.domain_keywords).map(|i| format!("c{c}_src{i}")))
                    .collect(),
            );
            target.push(
                shared
                    .chain((0..self.domain_keywords).map(|i| format!("c{c}_tgt{i}")))
                    .collect(),
            );
        }
        KeywordSets { source, target }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.classes < 2 {
            return bad("need at least two classes");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("length range is empty");
        }
        if self.min_keywords == 0 || self.min_keywords > self.max_keywords {
            return bad("keyword range is empty");
        }
        if self.max_keywords + self.max_distractors.min(self.max_keywords - 1) > self.min_len {
            return bad("keywords and distractors do not fit in the shortest sentence");
        }
        if self.filler_vocab == 0 {
            return bad("filler_vocab must be positive");
        }
        if !(0.0..=1.0).contains(&self.domain_filler_rate) {
            return bad("domain_filler_rate must be in [0, 1]");
        }
        if self.source_size == 0
            || self.target_size == 0
            || self.validation_size == 0
            || self.test_size == 0
        {
            return bad("all split sizes must be positive");
        }
        self.keyword_sets().validate(self.classes)
    }

    fn sentence(
        &self,
        rng: &mut ChaCha8Rng,
        class: usize,
        domain: Domain,
        kw: &KeywordSets,
        filler: &Filler,
    ) -> Vec<String> {
        let sets: Vec<Vec<&String>> = kw
            .for_domain(domain)
            .iter()
            .map(|s| s.iter().collect())
            .collect();
        let len = rng.gen_range(self.min_len..=self.max_len);
        let k = rng.gen_range(self.min_keywords..=self.max_keywords);
        let distractors = rng.gen_range(0..=self.max_distractors.min(k - 1));
        let mut toks: Vec<String> = Vec::with_capacity(len);
        for _ in 0..k {
            toks.push(sets[class].choose(rng).unwrap().to_string());
        }
        for _ in 0..distractors {
            let other = (class + rng.gen_range(1..self.classes)) % self.classes;
            toks.push(sets[other].choose(rng).unwrap().to_string());
        }
        while toks.len() < len {
            toks.push(filler.draw(rng, domain));
        }
        toks.shuffle(rng);
        toks
    }

    fn dataset(
        &self,
        seed: u64,
        stream: u64,
        n: usize,
        domain: Domain,
        split: Split,
        kw: &KeywordSets,
    ) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let filler = Filler::new(self);
        let mut examples: Vec<Example> = (0..n)
            .map(|i| {
                let class = i % self.classes;
                Example {
                    text_a: self.sentence(&mut rng, class, domain, kw, &filler),
                    text_b: None,
                    label: Label::Class(class),
                    domain,
                }
            })
            .collect();
        examples.shuffle(&mut rng);
        Dataset::new(examples, split)
    }
}

struct Filler {
    shared: Vec<String>,
    zipf: WeightedIndex<f64>,
    source: Vec<String>,
    target: Vec<String>,
    rate: f64,
}

impl Filler {
    fn new(spec: &SynthSpec) -> Self {
        Filler {
            shared: (0..spec.filler_vocab).map(|i| format!("w{i}")).collect(),
            zipf: WeightedIndex::new((0..spec.filler_vocab).map(|r| 1.0 / (r + 1) as f64)).unwrap(),
            source: (0..spec.domain_filler)
                .map(|i| format!("src_w{i}"))
                .collect(),
            target: (0..spec.domain_filler)
                .map(|i| format!("tgt_w{i}"))
                .collect(),
            rate: spec.domain_filler_rate,
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng, domain: Domain) -> String {
        let own = match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        };
        if !own.is_empty() && rng.gen_bool(self.rate) {
            own.choose(rng).unwrap().clone()
        } else {
            self.shared[self.zipf.sample(rng)].clone()
        }
    }
}

/// Generates the source set and the target pool, validation and test splits.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<SynthCorpus> {
    spec.validate()?;
    let kw = spec.keyword_sets();
    Ok(SynthCorpus {
        source: spec.dataset(seed, 1, spec.source_size, Domain::Source, Split::Train, &kw)?,
        target: spec.dataset(seed, 2, spec.target_size, Domain::Target, Split::Train, &kw)?,
        target_validation: spec.dataset(
            seed,
            3,
            spec.validation_size,
            Domain::Target,
            Split::Validation,
            &kw,
        )?,
        target_test: spec.dataset(seed, 4, spec.test_size, Domain::Target, Split::Test, &kw)?,
        keywords: kw,
    })
}

/// Accuracy of the keyword-count rule, the ceiling for any learner.
pub fn keyword_oracle_accuracy(dataset: &Dataset, keywords: &KeywordSets) -> f64 {
    let hits = dataset
        .examples()
        .iter()
        .filter(|e| keywords.classify(&e.text_a, e.domain) == e.label.class())
        .count();
    hits as f64 / dataset.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            source_size: 2000,
            target_size: 80,
            validation_size: 20,
            test_size: 40,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn sizes_as_requested_and_balanced() {
        let c = synth_generate(&small(), 1).unwrap();
        assert_eq!(c.source.len(), 2000);
        assert_eq!(c.target.len(), 80);
        let ones = c
            .target
            .examples()
            .iter()
            .filter(|e| e.label == Label::Class(1))
            .count();
        assert_eq!(ones, 40);
        assert!(c
            .source
            .examples()
            .iter()
            .all(|e| e.domain == Domain::Source));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_generate(&small(), 9).unwrap();
        let b = synth_generate(&small(), 9).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&small(), 10).unwrap();
        assert_ne!(a.source, c.source);
    }

    #[test]
    fn label_follows_keywords() {
        let kw = small().keyword_sets();
        let toks: Vec<String> = ["w1", "c0_s3", "w2", "c0_tgt1"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(kw.classify(&toks, Domain::Target), Some(0));
        let c = synth_generate(&small(), 2).unwrap();
        assert_eq!(keyword_oracle_accuracy(&c.target_test, &c.keywords), 1.0);
        assert_eq!(keyword_oracle_accuracy(&c.source, &c.keywords), 1.0);
    }

    #[test]
    fn overlapping_class_keywords_rejected() {
        let mut spec = small();
        let mut kw = spec.keyword_sets();
        kw.target[1].insert("c0_s0".into());
        spec.keywords = Some(kw);
        assert!(matches!(synth_generate(&spec, 0), Err(Error::Config(_))));
    }
}
