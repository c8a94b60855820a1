//! Post-LN transformer encoder with a classification, regression or
//! masked-language-model head.
//!
//! Only the last layer's hidden states and per-head attention maps are
//! exposed; the distillation losses need nothing deeper.

mod checkpoint;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

use crate::numerics::{Graph, ParameterStore, Tensor, Var};
use crate::text::{Encoded, MASK, NUM_RESERVED};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum HeadKind {
    Classifier { classes: usize },
    Regressor,
    Mlm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub head: HeadKind,
}

/// Encoder shape without the data-dependent fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl Architecture {
    pub const TEACHER: Architecture = Architecture {
        layers: 4,
        hidden: 64,
        heads: 4,
        ffn: 256,
    };
    /// Head count matches the teacher so attention maps pair one to one.
    pub const STUDENT: Architecture = Architecture {
        layers: 2,
        hidden: 32,
        heads: 4,
        ffn: 96,
    };
    /// Masked-LM generator. Its predictions only need to be plausible
    /// substitutes, so it is kept at student width.
    pub const GENERATOR: Architecture = Architecture {
        layers: 2,
        hidden: 32,
        heads: 4,
        ffn: 128,
    };

    pub fn with(self, vocab_size: usize, max_len: usize, head: HeadKind) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            ffn: self.ffn,
            vocab_size,
            max_len,
            head,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model {name} must be at least 1")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if let HeadKind::Classifier { classes } = self.head {
            if classes < 2 {
                return Err(Error::Config(format!(
                    "classifier needs at least 2 classes, got {classes}"
                )));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn output_width(&self) -> usize {
        match self.head {
            HeadKind::Classifier { classes } => classes,
            HeadKind::Regressor => 1,
            HeadKind::Mlm => self.vocab_size,
        }
    }
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    /// Last-layer hidden states, `len × hidden`.
    pub hidden: Var,
    /// Last-layer attention maps, one `len × len` node per head.
    pub attention: Vec<Var>,
    /// Classifier or regressor logits, `1 × k`.
    pub logits: Option<Var>,
}

/// Materialized forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub hidden: Tensor,
    pub attention: Vec<Tensor>,
    pub logits: Option<Tensor>,
    /// Per-position vocabulary logits (masked-LM head only).
    pub mlm_logits: Option<Tensor>,
    pub valid_len: usize,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Deterministic initialization: weights uniform in ±1/√fan_in, biases zero,
/// layer-norm gains one. Output heads use the smaller ±1/fan_in so an
/// untrained masked-LM head starts out close to uniform.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = config.hidden;
    let s = 1.0 / (h as f64).sqrt();
    let mut p = ParameterStore::new();
    p.insert(
        "embed.token",
        uniform(&mut rng, vec![config.vocab_size, h], s),
    )?;
    p.insert("embed.pos", uniform(&mut rng, vec![config.max_len, h], s))?;
    p.insert("embed.ln.gain", Tensor::vector(vec![1.0; h]))?;
    p.insert("embed.ln.bias", Tensor::zeros(vec![h]))?;
    for l in 0..config.layers {
        for w in ["q", "k", "v", "o"] {
            p.insert(
                format!("layer{l}.attn.{w}.w"),
                uniform(&mut rng, vec![h, h], s),
            )?;
            p.insert(format!("layer{l}.attn.{w}.b"), Tensor::zeros(vec![h]))?;
        }
        p.insert(
            format!("layer{l}.ffn.w1"),
            uniform(&mut rng, vec![h, config.ffn], s),
        )?;
        p.insert(format!("layer{l}.ffn.b1"), Tensor::zeros(vec![config.ffn]))?;
        p.insert(
            format!("layer{l}.ffn.w2"),
            uniform(
                &mut rng,
                vec![config.ffn, h],
                1.0 / (config.ffn as f64).sqrt(),
            ),
        )?;
        p.insert(format!("layer{l}.ffn.b2"), Tensor::zeros(vec![h]))?;
        for ln in ["ln1", "ln2"] {
            p.insert(format!("layer{l}.{ln}.gain"), Tensor::vector(vec![1.0; h]))?;
            p.insert(format!("layer{l}.{ln}.bias"), Tensor::zeros(vec![h]))?;
        }
    }
    let k = config.output_width();
    p.insert("head.w", uniform(&mut rng, vec![h, k], 1.0 / h as f64))?;
    p.insert("head.b", Tensor::zeros(vec![k]))?;
    Ok(p)
}

fn linear<'p>(g: &mut Graph<'p>, params: &'p ParameterStore, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(params, &format!("{prefix}.w"))?;
    let b = g.param(params, &format!("{prefix}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

fn layer_norm<'p>(
    g: &mut Graph<'p>,
    params: &'p ParameterStore,
    x: Var,
    prefix: &str,
) -> Result<Var> {
    let gain = g.param(params, &format!("{prefix}.gain"))?;
    let bias = g.param(params, &format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Runs the encoder over one sequence. Positions at or beyond `valid_len`
/// are padding and are masked out as attention keys.
pub fn encoder_forward<'p>(
    g: &mut Graph<'p>,
    config: &ModelConfig,
    params: &'p ParameterStore,
    ids: &[u32],
    valid_len: usize,
) -> Result<EncoderVars> {
    let len = ids.len();
    if len == 0 || len > config.max_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length {len} outside 1..={}",
            config.max_len
        )));
    }
    if valid_len == 0 || valid_len > len {
        return Err(Error::InvalidArgument(format!(
            "valid length {valid_len} for sequence of {len}"
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= config.vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "token id {bad} out of range for vocabulary of {}",
            config.vocab_size
        )));
    }
    let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..len).collect();
    let tok_table = g.param(params, "embed.token")?;
    let pos_table = g.param(params, "embed.pos")?;
    let tok = g.embedding(tok_table, &ids)?;
    let pos = g.embedding(pos_table, &positions)?;
    let summed = g.add(tok, pos)?;
    let mut x = layer_norm(g, params, summed, "embed.ln")?;

    let key_mask: Vec<bool> = (0..len).map(|j| j < valid_len).collect();
    let dk = config.head_dim();
    let inv_sqrt_dk = 1.0 / (dk as f64).sqrt();
    let mut attention = Vec::new();
    for l in 0..config.layers {
        let q = linear(g, params, x, &format!("layer{l}.attn.q"))?;
        let k = linear(g, params, x, &format!("layer{l}.attn.k"))?;
        let v = linear(g, params, x, &format!("layer{l}.attn.v"))?;
        let mut contexts = Vec::with_capacity(config.heads);
        let last = l + 1 == config.layers;
        for h in 0..config.heads {
            let qh = g.slice_cols(q, h * dk, dk)?;
            let kh = g.slice_cols(k, h * dk, dk)?;
            let vh = g.slice_cols(v, h * dk, dk)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, inv_sqrt_dk);
            let att = g.softmax(scores, 1.0, Some(&key_mask))?;
            contexts.push(g.matmul(att, vh)?);
            if last {
                attention.push(att);
            }
        }
        let ctx = g.concat_cols(&contexts)?;
        let attn_out = linear(g, params, ctx, &format!("layer{l}.attn.o"))?;
        let res = g.add(x, attn_out)?;
        x = layer_norm(g, params, res, &format!("layer{l}.ln1"))?;

        let w1 = g.param(params, &format!("layer{l}.ffn.w1"))?;
        let b1 = g.param(params, &format!("layer{l}.ffn.b1"))?;
        let w2 = g.param(params, &format!("layer{l}.ffn.w2"))?;
        let b2 = g.param(params, &format!("layer{l}.ffn.b2"))?;
        let f = g.matmul(x, w1)?;
        let f = g.add_row(f, b1)?;
        let f = g.gelu(f);
        let f = g.matmul(f, w2)?;
        let f = g.add_row(f, b2)?;
        let res = g.add(x, f)?;
        x = layer_norm(g, params, res, &format!("layer{l}.ln2"))?;
    }

    let logits = match config.head {
        HeadKind::Mlm => None,
        HeadKind::Classifier { .. } | HeadKind::Regressor => {
            let cls = g.select_rows(x, &[0])?;
            Some(linear(g, params, cls, "head")?)
        }
    };
    Ok(EncoderVars {
        hidden: x,
        attention,
        logits,
    })
}

/// Vocabulary logits of the masked-LM head at the given positions,
/// `positions.len() × vocab`.
pub fn mlm_logits_at<'p>(
    g: &mut Graph<'p>,
    params: &'p ParameterStore,
    hidden: Var,
    positions: &[usize],
) -> Result<Var> {
    let rows = g.select_rows(hidden, positions)?;
    linear(g, params, rows, "head")
}

/// Candidate mask for substituting at a position holding `original`:
/// everything except reserved tokens and `original` itself.
pub fn candidate_mask(vocab_size: usize, original: u32) -> Vec<bool> {
    (0..vocab_size)
        .map(|id| id >= NUM_RESERVED && id != original as usize)
        .collect()
}

/// Encoder configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: ModelConfig,
    params: ParameterStore,
}

impl Encoder {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_model(&config, seed)?;
        Ok(Encoder { config, params })
    }

    /// Wraps existing parameters after checking names and shapes against a
    /// fresh initialization. Extra parameters (e.g. a distillation
    /// projection) are allowed.
    pub fn from_parts(config: ModelConfig, params: ParameterStore) -> Result<Self> {
        let reference = init_model(&config, 0)?;
        for (name, t) in reference.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Encoder { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterStore {
        self.params
    }

    /// Number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Forward pass over the non-pad prefix only. Pad rows never influence
    /// valid rows, so this matches [`encoder_forward`] on the full input.
    pub fn forward<'p>(
        &'p self,
        g: &mut Graph<'p>,
        ids: &[u32],
        valid_len: usize,
    ) -> Result<EncoderVars> {
        let n = valid_len.min(ids.len());
        encoder_forward(g, &self.config, &self.params, &ids[..n], n)
    }

    /// Forward pass materialized into tensors.
    pub fn output(&self, input: &Encoded) -> Result<EncoderOutput> {
        let mut g = Graph::new();
        let vars = self.forward(&mut g, &input.ids, input.valid_len)?;
        let mlm_logits = match self.config.head {
            HeadKind::Mlm => {
                let all: Vec<usize> = (0..input.valid_len).collect();
                let v = mlm_logits_at(&mut g, &self.params, vars.hidden, &all)?;
                Some(g.value(v))
            }
            _ => None,
        };
        Ok(EncoderOutput {
            hidden: g.value(vars.hidden),
            attention: vars.attention.iter().map(|&a| g.value(a)).collect(),
            logits: vars.logits.map(|v| g.value(v)),
            mlm_logits,
            valid_len: input.valid_len,
        })
    }

    /// Logits only, as a plain vector.
    pub fn logits(&self, input: &Encoded) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.forward(&mut g, &input.ids, input.valid_len)?;
        let l = vars.logits.ok_or_else(|| {
            Error::InvalidArgument("masked-LM encoder has no sequence logits".into())
        })?;
        Ok(g.data(l).to_vec())
    }

    /// Distribution over substitutes for an editable position: the input is
    /// masked at `position`, and reserved tokens plus the original token get
    /// probability zero.
    pub fn mlm_predict(&self, input: &Encoded, position: usize) -> Result<Vec<f64>> {
        if self.config.head != HeadKind::Mlm {
            return Err(Error::InvalidArgument(
                "mlm_predict needs a masked-LM head".into(),
            ));
        }
        if !input.editable.get(position).copied().unwrap_or(false) {
            return Err(Error::InvalidArgument(format!(
                "position {position} is not editable"
            )));
        }
        let original = input.ids[position];
        let mut ids = input.ids.clone();
        ids[position] = MASK;
        let mut g = Graph::new();
        let vars = self.forward(&mut g, &ids, input.valid_len)?;
        let logits = mlm_logits_at(&mut g, &self.params, vars.hidden, &[position])?;
        let mask = candidate_mask(self.config.vocab_size, original);
        let probs = g.softmax(logits, 1.0, Some(&mask))?;
        Ok(g.data(probs).to_vec())
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        Ok(Checkpoint {
            meta: serde_json::json!({ "model": self.config, "tags": extra }),
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            ck.meta
                .get("model")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("checkpoint has no model config".into()))?,
        )?;
        config.validate()?;
        Self::from_parts(config, ck.params)
    }

    pub fn save(&self, path: &Path, tags: serde_json::Value) -> Result<()> {
        self.to_checkpoint(tags)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::text::{CLS, PAD, SEP};

    fn tiny(head: HeadKind) -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ffn: 12,
            vocab_size: 11,
            max_len: 7,
            head,
        }
    }

    fn input() -> Encoded {
        Encoded {
            ids: vec![CLS, 5, 7, 9, SEP, PAD, PAD],
            editable: vec![false, true, true, true, false, false, false],
            valid_len: 5,
        }
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let c = tiny(HeadKind::Classifier { classes: 2 });
        assert_eq!(init_model(&c, 4).unwrap(), init_model(&c, 4).unwrap());
        assert_ne!(init_model(&c, 4).unwrap(), init_model(&c, 5).unwrap());
        let bad = ModelConfig {
            hidden: 33,
            heads: 4,
            ..c
        };
        assert!(matches!(init_model(&bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn attention_rows_sum_to_one_and_skip_padding() {
        let cfg = tiny(HeadKind::Classifier { classes: 2 });
        let params = init_model(&cfg, 1).unwrap();
        let x = input();
        let mut g = Graph::new();
        let vars = encoder_forward(&mut g, &cfg, &params, &x.ids, x.valid_len).unwrap();
        assert_eq!(vars.attention.len(), 2);
        for &a in &vars.attention {
            let a = g.value(a);
            for r in 0..a.rows() {
                let row = a.row(r);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row[5..].iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn pad_tail_content_does_not_change_logits() {
        let enc = Encoder::init(tiny(HeadKind::Classifier { classes: 3 }), 2).unwrap();
        let a = enc.logits(&input()).unwrap();
        let mut other = input();
        other.ids[5] = 8;
        other.ids[6] = 10;
        let b = enc.logits(&other).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn trimmed_forward_matches_full_forward() {
        let cfg = tiny(HeadKind::Classifier { classes: 2 });
        let enc = Encoder::init(cfg, 8).unwrap();
        let x = input();
        let mut g = Graph::new();
        let full = encoder_forward(&mut g, &cfg, enc.params(), &x.ids, x.valid_len).unwrap();
        let full_logits = g.data(full.logits.unwrap()).to_vec();
        let full_att = g.value(full.attention[1]);
        let out = enc.output(&x).unwrap();
        for (a, b) in out.logits.unwrap().data().iter().zip(&full_logits) {
            assert!((a - b).abs() < 1e-12);
        }
        for r in 0..x.valid_len {
            for c in 0..x.valid_len {
                assert!((out.attention[1].at(r, c) - full_att.at(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_out_of_range_ids() {
        let enc = Encoder::init(tiny(HeadKind::Regressor), 2).unwrap();
        let mut bad = input();
        bad.ids[1] = 11;
        assert!(enc.logits(&bad).is_err());
    }

    #[test]
    fn mlm_distribution_excludes_reserved_and_original() {
        let enc = Encoder::init(tiny(HeadKind::Mlm), 3).unwrap();
        let p = enc.mlm_predict(&input(), 2).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[..NUM_RESERVED].iter().all(|v| *v == 0.0));
        assert_eq!(p[7], 0.0);
        let support: Vec<f64> = p.iter().copied().filter(|v| *v > 0.0).collect();
        assert_eq!(support.len(), 11 - NUM_RESERVED - 1);
        let max = support.iter().cloned().fold(0.0, f64::max);
        let min = support.iter().cloned().fold(1.0, f64::min);
        assert!(max / min < 3.0, "{max} / {min}");
        assert!(enc.mlm_predict(&input(), 0).is_err());
    }

    #[test]
    fn heads_pass_gradient_check() {
        for head in [
            HeadKind::Classifier { classes: 3 },
            HeadKind::Regressor,
            HeadKind::Mlm,
        ] {
            let cfg = ModelConfig {
                layers: 1,
                hidden: 4,
                heads: 2,
                ffn: 6,
                ..tiny(head)
            };
            let params = init_model(&cfg, 11).unwrap();
            let x = input();
            let report = grad_check(
                |g, p| {
                    let vars = encoder_forward(g, &cfg, p, &x.ids, x.valid_len)?;
                    let out = match vars.logits {
                        Some(l) => l,
                        None => mlm_logits_at(g, p, vars.hidden, &[1, 3])?,
                    };
                    let t = g.tanh(out);
                    let s = g.mul(t, t)?;
                    let a0 = g.mul(vars.attention[0], vars.attention[0])?;
                    let a = g.sum(a0);
                    let s = g.sum(s);
                    g.add(s, a)
                },
                &params,
                1e-5,
                1e-3,
            )
            .unwrap();
            assert!(report.passed(), "{head:?}: {}", report.max_rel_err());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let enc = Encoder::init(tiny(HeadKind::Mlm), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        enc.save(&path, serde_json::json!({"seed": 5})).unwrap();
        assert_eq!(Encoder::load(&path).unwrap(), enc);
    }

    #[test]
    fn default_student_is_about_seven_and_a_half_times_smaller() {
        let t = Encoder::init(
            Architecture::TEACHER.with(185, 10, HeadKind::Classifier { classes: 2 }),
            0,
        )
        .unwrap();
        let s = Encoder::init(
            Architecture::STUDENT.with(185, 10, HeadKind::Classifier { classes: 2 }),
            0,
        )
        .unwrap();
        let ratio = t.num_params() as f64 / s.num_params() as f64;
        assert!((6.75..8.25).contains(&ratio), "ratio {ratio}");
    }
}
