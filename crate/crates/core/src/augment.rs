//! The stationary edit distribution `P_s(z|x)`.
//!
//! A sample is drawn in three stages: an edit distance `d` weighted by
//! `exp(−d/α)·c(d,m)`, a uniform set of `d` editable positions, then one
//! substitute per position from the generator, left to right, each
//! conditioned on the edits before it. Substitutes never equal the original
//! token, so the Hamming distance of `z` from `x` is exactly `d` and every `z`
//! has a single derivation. That makes `log P_s(z|x)` exactly scorable.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use num_bigint::BigUint;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{candidate_mask, mlm_logits_at, Encoder, HeadKind};
use crate::numerics::{log_sum_exp, Graph};
use crate::text::{
    decode, encode, Dataset, Domain, Encoded, Label, Vocabulary, MASK, NUM_RESERVED,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Distance temperature `α`.
    pub alpha: f64,
    /// Substitution temperature applied to generator logits.
    pub temperature: f64,
    pub n_target: usize,
    pub n_source: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            alpha: 0.6,
            temperature: 1.0,
            n_target: 20,
            n_source: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("temperature", self.temperature)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "sampler.{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// `C(m,e)·s^e`, the number of sequences at Hamming distance `e` from a
/// length-`m` sequence with `s` substitutes per position.
pub fn count_at_distance(e: usize, m: usize, substitutes: usize) -> Result<BigUint> {
    if e > m {
        return Err(Error::InvalidArgument(format!(
            "edit distance {e} exceeds length {m}"
        )));
    }
    let mut binom = BigUint::from(1u32);
    for i in 0..e {
        binom = binom * BigUint::from(m - i) / BigUint::from(i + 1);
    }
    Ok(binom * BigUint::from(substitutes).pow(e as u32))
}

/// `ln C(m,e)`.
pub fn log_binomial(m: usize, e: usize) -> f64 {
    let e = e.min(m - e.min(m));
    (1..=e).map(|i| ((m - e + i) as f64 / i as f64).ln()).sum()
}

/// `ln c(e,m)`; `−∞` when there are no substitutes and `e > 0`.
pub fn log_count_at_distance(e: usize, m: usize, substitutes: usize) -> f64 {
    if e == 0 {
        return 0.0;
    }
    if substitutes == 0 || e > m {
        return f64::NEG_INFINITY;
    }
    log_binomial(m, e) + e as f64 * (substitutes as f64).ln()
}

/// `P(d)` over `d ∈ [0, m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceDistribution {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Set when `m = 0` and all mass sits on `d = 0`.
    pub degenerate: bool,
}

impl DistanceDistribution {
    pub fn expected(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(d, p)| d as f64 * p)
            .sum()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        if self.probs.len() == 1 {
            return 0;
        }
        WeightedIndex::new(&self.probs)
            .expect("distance distribution has positive mass")
            .sample(rng)
    }
}

/// `P(d) ∝ exp(−d/α)·c(d,m)`, normalized in log space.
pub fn distance_distribution(
    m: usize,
    substitutes: usize,
    alpha: f64,
) -> Result<DistanceDistribution> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    if m == 0 {
        return Ok(DistanceDistribution {
            probs: vec![1.0],
            log_probs: vec![0.0],
            degenerate: true,
        });
    }
    let logits: Vec<f64> = (0..=m)
        .map(|d| log_count_at_distance(d, m, substitutes) - d as f64 / alpha)
        .collect();
    let z = log_sum_exp(&logits);
    let log_probs: Vec<f64> = logits.iter().map(|l| l - z).collect();
    Ok(DistanceDistribution {
        probs: log_probs.iter().map(|l| l.exp()).collect(),
        log_probs,
        degenerate: false,
    })
}

/// Uniform `d`-subset of `editable`, sorted.
pub fn sample_positions(d: usize, editable: &[usize], rng: &mut impl Rng) -> Result<Vec<usize>> {
    if d > editable.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot choose {d} positions out of {}",
            editable.len()
        )));
    }
    let mut chosen: Vec<usize> = rand::seq::index::sample(rng, editable.len(), d)
        .into_iter()
        .map(|i| editable[i])
        .collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Anything that yields vocabulary logits for a masked position.
pub trait MaskedPredictor {
    fn vocab_size(&self) -> usize;

    /// Logits at `position` after replacing it with `[MASK]`.
    fn masked_logits(&self, ids: &[u32], valid_len: usize, position: usize) -> Result<Vec<f64>>;
}

impl MaskedPredictor for Encoder {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn masked_logits(&self, ids: &[u32], valid_len: usize, position: usize) -> Result<Vec<f64>> {
        if self.config().head != HeadKind::Mlm {
            return Err(Error::InvalidArgument(
                "generator needs a masked-LM head".into(),
            ));
        }
        if position >= valid_len {
            return Err(Error::InvalidArgument(format!(
                "position {position} is padding"
            )));
        }
        let mut masked = ids[..valid_len].to_vec();
        masked[position] = MASK;
        let mut g = Graph::new();
        let vars = self.forward(&mut g, &masked, valid_len)?;
        let l = mlm_logits_at(&mut g, self.params(), vars.hidden, &[position])?;
        Ok(g.data(l).to_vec())
    }
}

/// Log-probabilities over substitutes at `position`, re-softened at
/// `temperature`. Non-candidates read `−∞`.
pub fn substitute_log_probs(
    generator: &dyn MaskedPredictor,
    ids: &[u32],
    valid_len: usize,
    position: usize,
    temperature: f64,
) -> Result<Vec<f64>> {
    let logits = generator.masked_logits(ids, valid_len, position)?;
    let allowed = candidate_mask(generator.vocab_size(), ids[position]);
    let scaled: Vec<f64> = logits
        .iter()
        .zip(&allowed)
        .map(|(l, &ok)| {
            if ok {
                l / temperature
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let z = log_sum_exp(&scaled);
    if !z.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "no substitute candidates at position {position}"
        )));
    }
    Ok(scaled.into_iter().map(|s| s - z).collect())
}

/// Draws one substitute for `position`, returning it with its log-probability.
pub fn sample_substitute(
    generator: &dyn MaskedPredictor,
    ids: &[u32],
    valid_len: usize,
    position: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<(u32, f64)> {
    let lp = substitute_log_probs(generator, ids, valid_len, position, temperature)?;
    let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let w = WeightedIndex::new(&probs)
        .map_err(|e| Error::NonFinite(format!("substitute distribution: {e}")))?;
    let tok = w.sample(rng);
    Ok((tok as u32, lp[tok]))
}

/// An edited sequence with its derivation.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    /// Index of the original in the concatenation source ++ target.
    pub origin_index: usize,
    pub z: Encoded,
    pub d: usize,
    pub positions: Vec<usize>,
    pub words: Vec<u32>,
    /// Tokens of `x` at `positions`.
    pub originals: Vec<u32>,
    pub log_ps: f64,
    pub label: Label,
    pub domain: Domain,
}

/// Substitutes per position used in the counting formula: all
/// non-reserved tokens except the original.
pub fn substitutes_per_position(vocab_size: usize) -> usize {
    vocab_size.saturating_sub(NUM_RESERVED + 1)
}

/// Draws one sample from `P_s(·|x)`.
pub fn sample_augmented(
    x: &Encoded,
    label: Label,
    domain: Domain,
    origin_index: usize,
    config: &SamplerConfig,
    generator: &dyn MaskedPredictor,
    rng: &mut impl Rng,
) -> Result<AugmentedSample> {
    let editable = x.editable_positions();
    let m = editable.len();
    let dist = distance_distribution(
        m,
        substitutes_per_position(generator.vocab_size()),
        config.alpha,
    )?;
    let d = dist.sample(rng);
    let positions = sample_positions(d, &editable, rng)?;
    let mut z = x.clone();
    let mut log_ps = dist.log_probs[d] - log_binomial(m, d);
    let mut words = Vec::with_capacity(d);
    let originals: Vec<u32> = positions.iter().map(|&p| x.ids[p]).collect();
    for &p in &positions {
        let (w, lp) =
            sample_substitute(generator, &z.ids, z.valid_len, p, config.temperature, rng)?;
        z.ids[p] = w;
        words.push(w);
        log_ps += lp;
    }
    Ok(AugmentedSample {
        origin_index,
        z,
        d,
        positions,
        words,
        originals,
        log_ps,
        label,
        domain,
    })
}

/// Exact `log P_s(z|x)` for an arbitrary edit `z` of `x`; `−∞` if `z` changes
/// a non-editable position.
pub fn score_augmented(
    x: &Encoded,
    z: &[u32],
    config: &SamplerConfig,
    generator: &dyn MaskedPredictor,
) -> Result<f64> {
    if z.len() != x.ids.len() {
        return Err(Error::shape("score_augmented", &[x.ids.len()], &[z.len()]));
    }
    let positions: Vec<usize> = (0..z.len()).filter(|&i| z[i] != x.ids[i]).collect();
    if positions.iter().any(|&p| !x.editable[p]) {
        return Ok(f64::NEG_INFINITY);
    }
    let m = x.m();
    let d = positions.len();
    let dist = distance_distribution(
        m,
        substitutes_per_position(generator.vocab_size()),
        config.alpha,
    )?;
    let mut lp = dist.log_probs[d] - log_binomial(m, d);
    let mut cur = x.ids.clone();
    for &p in &positions {
        let dist = substitute_log_probs(generator, &cur, x.valid_len, p, config.temperature)?;
        lp += dist[z[p] as usize];
        cur[p] = z[p];
    }
    Ok(lp)
}

/// Encoded examples with their labels and domains.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSet {
    pub items: Vec<Encoded>,
    pub labels: Vec<Label>,
    pub domains: Vec<Domain>,
    /// Size of the vocabulary the ids refer to.
    pub vocab_size: usize,
}

impl EncodedSet {
    pub fn new(dataset: &Dataset, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let items = dataset
            .examples()
            .iter()
            .map(|e| encode(e, vocab, max_len))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedSet {
            items,
            labels: dataset.examples().iter().map(|e| e.label).collect(),
            domains: dataset.examples().iter().map(|e| e.domain).collect(),
            vocab_size: vocab.len(),
        })
    }

    pub fn empty(vocab_size: usize) -> Self {
        EncodedSet {
            items: Vec::new(),
            labels: Vec::new(),
            domains: Vec::new(),
            vocab_size,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    /// `self` followed by `other`.
    pub fn concat(&self, other: &EncodedSet) -> Result<EncodedSet> {
        if self.vocab_size != other.vocab_size {
            return Err(Error::InvalidArgument(
                "concatenating sets over different vocabularies".into(),
            ));
        }
        let mut out = self.clone();
        out.items.extend_from_slice(&other.items);
        out.labels.extend_from_slice(&other.labels);
        out.domains.extend_from_slice(&other.domains);
        Ok(out)
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Originals as unedited samples (`d = 0`, `log_ps = 0`).
    pub fn identity_samples(&self, offset: usize) -> Vec<AugmentedSample> {
        (0..self.len())
            .map(|i| AugmentedSample {
                origin_index: offset + i,
                z: self.items[i].clone(),
                d: 0,
                positions: Vec::new(),
                words: Vec::new(),
                originals: Vec::new(),
                log_ps: 0.0,
                label: self.labels[i],
                domain: self.domains[i],
            })
            .collect()
    }
}

/// `n_source` samples per source example followed by `n_target` per target
/// example, in input order.
pub fn augment_corpus(
    source: &EncodedSet,
    target: &EncodedSet,
    config: &SamplerConfig,
    generator: &dyn MaskedPredictor,
    rng: &mut impl Rng,
) -> Result<Vec<AugmentedSample>> {
    config.validate()?;
    for (name, set) in [("source", source), ("target", target)] {
        if set.vocab_size != generator.vocab_size() {
            return Err(Error::InvalidArgument(format!(
                "{name} data uses a vocabulary of {} tokens, the generator {}",
                set.vocab_size,
                generator.vocab_size()
            )));
        }
    }
    let mut out =
        Vec::with_capacity(source.len() * config.n_source + target.len() * config.n_target);
    for (set, n, offset) in [
        (source, config.n_source, 0),
        (target, config.n_target, source.len()),
    ] {
        for i in 0..set.len() {
            for _ in 0..n {
                out.push(sample_augmented(
                    &set.items[i],
                    set.labels[i],
                    set.domains[i],
                    offset + i,
                    config,
                    generator,
                    rng,
                )?);
            }
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct DumpLine<'a> {
    text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    text_b: Option<String>,
    label: Label,
    domain: &'a str,
    d: usize,
    log_ps: f64,
    origin_index: usize,
}

/// Writes samples as JSONL with fields
/// `text, [text_b], label, domain, d, log_ps, origin_index`.
pub fn write_augmented_jsonl(
    path: &Path,
    samples: &[AugmentedSample],
    vocab: &Vocabulary,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        let (a, b) = decode(&s.z, vocab);
        let line = DumpLine {
            text: a.join(" "),
            text_b: b.map(|b| b.join(" ")),
            label: s.label,
            domain: s.domain.as_str(),
            d: s.d,
            log_ps: s.log_ps,
            origin_index: s.origin_index,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
