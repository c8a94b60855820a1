//! Plain distillation and the augmented, selector-driven distillation loop.
//!
//! Both paths share [`kd_step`] and the per-batch validation bookkeeping, so
//! with identity augmentation and every sample selected the augmented loop
//! retraces plain distillation bit for bit.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    batches, init_student, rng_stream, streams, sub_seed, validation_metric, TaskData, TrainConfig,
};
use crate::augment::{augment_corpus, AugmentedSample};
use crate::distill::{kd_loss, KDConfig, LossBreakdown, PROJECTION};
use crate::eval::MetricValue;
use crate::model::{
    candidate_mask, encoder_forward, mlm_logits_at, Encoder, EncoderOutput, ModelConfig,
};
use crate::numerics::{Adam, Graph, ParameterStore, Var};
use crate::selector::{
    featurize, policy_optimizer, policy_update, select_actions, state_dim, step_reward, ActionMode,
    Actions, Baseline, EpisodeHistory, PolicyNet, PolicyUpdateReport, Transition,
};
use crate::text::{Encoded, TaskKind, MASK};
use crate::{Error, Result};

/// Teacher outputs for a fixed list of inputs.
pub type TeacherCache = Vec<EncoderOutput>;

/// One optimizer step of the student on the mean KD loss over `inputs`.
pub fn kd_step(
    student: &mut Encoder,
    opt: &mut Adam,
    inputs: &[&Encoded],
    teacher: &[&EncoderOutput],
    kd: &KDConfig,
    task: TaskKind,
) -> Result<LossBreakdown> {
    if inputs.is_empty() || inputs.len() != teacher.len() {
        return Err(Error::InvalidArgument(format!(
            "kd step over {} inputs and {} teacher outputs",
            inputs.len(),
            teacher.len()
        )));
    }
    let scale = 1.0 / inputs.len() as f64;
    let (grads, breakdown) = {
        let mut g = Graph::new();
        let w = if kd.hidden {
            Some(g.param(student.params(), PROJECTION)?)
        } else {
            None
        };
        let mut totals = Vec::with_capacity(inputs.len());
        let mut breakdown = LossBreakdown::default();
        for (x, t) in inputs.iter().zip(teacher) {
            let vars = student.forward(&mut g, &x.ids, x.valid_len)?;
            let terms = kd_loss(&mut g, &vars, t, w, kd, task)?;
            breakdown.accumulate(&terms.breakdown(&g));
            totals.push(terms.total);
        }
        let sum = g.add_n(&totals)?;
        let loss = g.scale(sum, scale);
        (g.backward(loss)?, breakdown.scaled(scale))
    };
    opt.step(student.params_mut(), &grads)?;
    Ok(breakdown)
}

/// One row of the step-level metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub mean_prob: f64,
    pub frac_selected: f64,
    pub reward: f64,
    pub val_metric: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str =
        "step,epoch,l_att,l_hidden,l_dark,l_kd,mean_prob,frac_selected,reward,val_metric";

    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            l.l_att,
            l.l_hidden,
            l.l_dark,
            l.l_kd,
            self.mean_prob,
            self.frac_selected,
            self.reward,
            self.val_metric
        )
    }

    pub fn csv(records: &[StepRecord]) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in records {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorUpdateReport {
    pub loss: f64,
    /// Batch too small to normalize; raw weights went through a sigmoid.
    pub weights_flagged: bool,
    /// No sample in the batch had an edit.
    pub skipped: bool,
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    /// Best-validation student.
    pub student: Encoder,
    pub best_validation: MetricValue,
    /// Step of the kept student; 0 is the initialization.
    pub best_step: usize,
    pub initial_validation: MetricValue,
    pub records: Vec<StepRecord>,
    pub generator: Option<Encoder>,
    pub policy: Option<PolicyNet>,
    pub policy_reports: Vec<PolicyUpdateReport>,
    /// Corpus of the first epoch, kept for inspection dumps.
    pub first_corpus: Vec<AugmentedSample>,
    pub epoch_sizes: Vec<usize>,
}

/// Student, optimizer and best-validation tracking shared by both loops.
struct KdState<'a> {
    student: Encoder,
    opt: Adam,
    best: Encoder,
    best_val: MetricValue,
    best_step: usize,
    initial: MetricValue,
    current: MetricValue,
    step: usize,
    data: &'a TaskData,
    kd: KDConfig,
}

impl<'a> KdState<'a> {
    fn new(data: &'a TaskData, config: &TrainConfig, seed: u64) -> Result<Self> {
        let student = init_student(data, config, seed)?;
        let val = validation_metric(&student, &data.validation, data.task)?;
        Ok(KdState {
            best: student.clone(),
            student,
            opt: Adam::new(config.distill.optimizer),
            best_val: val,
            best_step: 0,
            initial: val,
            current: val,
            step: 0,
            data,
            kd: config.kd,
        })
    }

    /// KD update, then validation. Returns the losses and the metrics before
    /// and after the update.
    fn step(
        &mut self,
        inputs: &[&Encoded],
        teacher: &[&EncoderOutput],
    ) -> Result<(LossBreakdown, MetricValue, MetricValue)> {
        let losses = kd_step(
            &mut self.student,
            &mut self.opt,
            inputs,
            teacher,
            &self.kd,
            self.data.task,
        )?;
        self.step += 1;
        let before = self.current;
        self.current = validation_metric(&self.student, &self.data.validation, self.data.task)?;
        if self.current.value > self.best_val.value {
            self.best_val = self.current;
            self.best = self.student.clone();
            self.best_step = self.step;
        }
        Ok((losses, before, self.current))
    }
}

/// Distillation on the original source and target-train examples.
pub fn plain_kd(
    teacher: &Encoder,
    data: &TaskData,
    config: &TrainConfig,
    seed: u64,
) -> Result<DistillOutcome> {
    config.validate()?;
    let items = data.source.concat(&data.target_train)?;
    let cache: TeacherCache = items
        .items
        .iter()
        .map(|x| teacher.output(x))
        .collect::<Result<_>>()?;
    let mut state = KdState::new(data, config, seed)?;
    let mut shuffle = rng_stream(seed, streams::SHUFFLE_KD);
    let mut records = Vec::new();
    for epoch in 1..=config.distill.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut shuffle);
        for batch in batches(&order, config.distill.batch_size) {
            let inputs: Vec<&Encoded> = batch.iter().map(|&i| &items.items[i]).collect();
            let outs: Vec<&EncoderOutput> = batch.iter().map(|&i| &cache[i]).collect();
            let (losses, before, after) = state.step(&inputs, &outs)?;
            records.push(StepRecord {
                step: state.step,
                epoch,
                losses,
                mean_prob: 1.0,
                frac_selected: 1.0,
                reward: step_reward(after, before).value,
                val_metric: after.value,
            });
        }
    }
    Ok(DistillOutcome {
        student: state.best,
        best_validation: state.best_val,
        best_step: state.best_step,
        initial_validation: state.initial,
        records,
        generator: None,
        policy: None,
        policy_reports: Vec::new(),
        first_corpus: Vec::new(),
        epoch_sizes: vec![items.len(); config.distill.epochs],
    })
}

/// Which parts of the augmented loop are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DistillMode {
    /// Sample from `P_s`; otherwise every original appears once, unedited.
    pub augment: bool,
    /// Policy picks samples; otherwise all are kept.
    pub selector: bool,
    /// Reward-weighted generator step after each batch.
    pub update_generator: bool,
}

impl DistillMode {
    pub const L2A: DistillMode = DistillMode {
        augment: true,
        selector: true,
        update_generator: true,
    };
    /// Augmentation from the fixed pretrained generator, no selection.
    pub const FIXED_AUGMENT: DistillMode = DistillMode {
        augment: true,
        selector: false,
        update_generator: false,
    };
    /// Identity augmentation with every sample kept.
    pub const DEGENERATE: DistillMode = DistillMode {
        augment: false,
        selector: false,
        update_generator: false,
    };
}

/// Augmented distillation. Per epoch: resample the corpus from the current
/// generator, then per batch score the samples with the policy, draw
/// actions, update the student on the selected samples, update the
/// generator, and reward the policy with the validation change. The policy
/// is updated once per epoch over the episode.
pub fn run_distill(
    teacher: &Encoder,
    generator: Encoder,
    data: &TaskData,
    config: &TrainConfig,
    seed: u64,
    mode: DistillMode,
) -> Result<DistillOutcome> {
    config.validate()?;
    if mode.augment && config.sampler.n_source == 0 && config.sampler.n_target == 0 {
        return Err(Error::Config(
            "sampler.n_source and sampler.n_target are both 0".into(),
        ));
    }
    let mut state = KdState::new(data, config, seed)?;
    let mut generator = generator;
    let mut gen_opt = Adam::new(config.generator_update);
    let mut policy = PolicyNet::init(
        state_dim(data.outputs),
        config.selector.hidden,
        sub_seed(seed, streams::POLICY_INIT),
    )?;
    let mut pol_opt = policy_optimizer(&config.selector);
    let mut baseline = Baseline::default();
    let mut shuffle = rng_stream(seed, streams::SHUFFLE_KD);
    let mut aug_rng = rng_stream(seed, streams::AUGMENT);
    let mut act_rng = rng_stream(seed, streams::ACTIONS);
    let identity = || -> Vec<AugmentedSample> {
        let mut v = data.source.identity_samples(0);
        v.extend(data.target_train.identity_samples(data.source.len()));
        v
    };

    let mut records = Vec::new();
    let mut policy_reports = Vec::new();
    let mut first_corpus = Vec::new();
    let mut epoch_sizes = Vec::new();
    for epoch in 1..=config.distill.epochs {
        let corpus = if mode.augment {
            augment_corpus(
                &data.source,
                &data.target_train,
                &config.sampler,
                &generator,
                &mut aug_rng,
            )?
        } else {
            identity()
        };
        epoch_sizes.push(corpus.len());
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut shuffle);
        let mut history = EpisodeHistory::new(config.selector.gamma);
        for batch in batches(&order, config.distill.batch_size) {
            let samples: Vec<&AugmentedSample> = batch.iter().map(|&i| &corpus[i]).collect();
            let t_outs: Vec<EncoderOutput> = samples
                .iter()
                .map(|s| teacher.output(&s.z))
                .collect::<Result<_>>()?;
            let (states, probs, actions) = if mode.selector {
                let t_logits: Vec<Vec<f64>> =
                    t_outs.iter().map(logits_of).collect::<Result<_>>()?;
                let s_logits: Vec<Vec<f64>> = samples
                    .iter()
                    .map(|s| state.student.logits(&s.z))
                    .collect::<Result<_>>()?;
                let log_ps: Vec<f64> = samples.iter().map(|s| s.log_ps).collect();
                let domains: Vec<_> = samples.iter().map(|s| s.domain).collect();
                let states = featurize(
                    &t_logits,
                    &s_logits,
                    &log_ps,
                    &domains,
                    data.task,
                    config.kd.temperature,
                )?;
                let probs = policy.forward(&states)?;
                let actions = select_actions(&probs, &mut act_rng, ActionMode::Sample);
                (states, probs, actions)
            } else {
                let n = samples.len();
                (
                    Vec::new(),
                    vec![1.0; n],
                    Actions {
                        mask: vec![true; n],
                        forced: false,
                    },
                )
            };
            let inputs: Vec<&Encoded> = samples
                .iter()
                .zip(&actions.mask)
                .filter(|(_, &a)| a)
                .map(|(s, _)| &s.z)
                .collect();
            let outs: Vec<&EncoderOutput> = t_outs
                .iter()
                .zip(&actions.mask)
                .filter(|(_, &a)| a)
                .map(|(t, _)| t)
                .collect();
            let (losses, before, after) = state.step(&inputs, &outs)?;
            let reward = step_reward(after, before);
            if mode.update_generator {
                generator_l2a_update(&mut generator, &mut gen_opt, &samples, &probs)?;
            }
            if mode.selector {
                history.push(Transition {
                    states,
                    actions: actions.mask.clone(),
                    reward: reward.value,
                });
            }
            records.push(StepRecord {
                step: state.step,
                epoch,
                losses,
                mean_prob: probs.iter().sum::<f64>() / probs.len() as f64,
                frac_selected: actions.selected() as f64 / samples.len() as f64,
                reward: reward.value,
                val_metric: after.value,
            });
        }
        if mode.selector {
            policy_reports.push(policy_update(
                &mut policy,
                &mut pol_opt,
                &history,
                &mut baseline,
                config.selector.baseline_decay,
            )?);
        }
        if epoch == 1 {
            first_corpus = corpus;
        }
    }
    Ok(DistillOutcome {
        student: state.best,
        best_validation: state.best_val,
        best_step: state.best_step,
        initial_validation: state.initial,
        records,
        generator: mode.augment.then_some(generator),
        policy: mode.selector.then_some(policy),
        policy_reports,
        first_corpus,
        epoch_sizes,
    })
}

fn logits_of(out: &EncoderOutput) -> Result<Vec<f64>> {
    out.logits
        .as_ref()
        .map(|t| t.data().to_vec())
        .ok_or_else(|| Error::InvalidArgument("teacher has no task head".into()))
}

/// `log P_G(z|x)`: all edited positions are masked at once and the
/// substituted words scored over the candidate set of each position. `None`
/// for unedited samples.
pub fn generator_log_likelihood<'p>(
    g: &mut Graph<'p>,
    config: &ModelConfig,
    params: &'p ParameterStore,
    sample: &AugmentedSample,
) -> Result<Option<Var>> {
    if sample.positions.is_empty() {
        return Ok(None);
    }
    let n = sample.z.valid_len;
    let mut masked = sample.z.ids[..n].to_vec();
    for &p in &sample.positions {
        masked[p] = MASK;
    }
    let vars = encoder_forward(g, config, params, &masked, n)?;
    let logits = mlm_logits_at(g, params, vars.hidden, &sample.positions)?;
    let allowed: Vec<bool> = sample
        .originals
        .iter()
        .flat_map(|&o| candidate_mask(config.vocab_size, o))
        .collect();
    let lp = g.log_softmax(logits, 1.0, Some(&allowed))?;
    let at: Vec<(usize, usize)> = sample
        .words
        .iter()
        .enumerate()
        .map(|(r, &w)| (r, w as usize))
        .collect();
    let picked = g.gather(lp, &at)?;
    Ok(Some(g.sum(picked)))
}

/// Weights `log_ps + π` min-max normalized to `[0, 1]` within the batch
/// (all 1 when they coincide). Batches below two go through a sigmoid
/// instead, flagged.
pub fn normalized_weights(raw: &[f64]) -> (Vec<f64>, bool) {
    if raw.len() < 2 {
        return (raw.iter().map(|r| 1.0 / (1.0 + (-r).exp())).collect(), true);
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return (vec![1.0; raw.len()], false);
    }
    (raw.iter().map(|r| (r - lo) / (hi - lo)).collect(), false)
}

/// `−(1/n) Σ w(z)·log P_G(z|x)` for the given weights; `None` if no sample
/// is edited.
pub fn weighted_mle_loss<'p>(
    g: &mut Graph<'p>,
    config: &ModelConfig,
    params: &'p ParameterStore,
    samples: &[&AugmentedSample],
    weights: &[f64],
) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    for (s, &w) in samples.iter().zip(weights) {
        if let Some(ll) = generator_log_likelihood(g, config, params, s)? {
            terms.push(g.scale(ll, -w / samples.len() as f64));
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    g.add_n(&terms).map(Some)
}

/// Reward-weighted maximum-likelihood step on the generator.
pub fn generator_l2a_update(
    generator: &mut Encoder,
    opt: &mut Adam,
    samples: &[&AugmentedSample],
    scores: &[f64],
) -> Result<GeneratorUpdateReport> {
    if samples.len() != scores.len() {
        return Err(Error::InvalidArgument(
            "one policy score per sample required".into(),
        ));
    }
    let raw: Vec<f64> = samples
        .iter()
        .zip(scores)
        .map(|(s, p)| s.log_ps + p)
        .collect();
    let (weights, flagged) = normalized_weights(&raw);
    let config = *generator.config();
    let step = {
        let mut g = Graph::new();
        match weighted_mle_loss(&mut g, &config, generator.params(), samples, &weights)? {
            Some(loss) => Some((g.scalar(loss), g.backward(loss)?)),
            None => None,
        }
    };
    match step {
        Some((loss, grads)) => {
            opt.step(generator.params_mut(), &grads)?;
            Ok(GeneratorUpdateReport {
                loss,
                weights_flagged: flagged,
                skipped: false,
            })
        }
        None => Ok(GeneratorUpdateReport {
            loss: 0.0,
            weights_flagged: flagged,
            skipped: true,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::sample_augmented;
    use crate::augment::SamplerConfig;
    use crate::model::HeadKind;
    use crate::numerics::grad_check;
    use crate::text::{Domain, Label, CLS, SEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weights_normalize() {
        let (w, f) = normalized_weights(&[-3.0, -1.0, -2.0]);
        assert_eq!(w, vec![0.0, 1.0, 0.5]);
        assert!(!f);
        assert_eq!(normalized_weights(&[-2.0, -2.0]).0, vec![1.0, 1.0]);
        let (w, f) = normalized_weights(&[0.0]);
        assert!(f && (w[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn weighted_mle_gradient_check() {
        let cfg = ModelConfig {
            layers: 1,
            hidden: 4,
            heads: 2,
            ffn: 5,
            vocab_size: 10,
            max_len: 6,
            head: HeadKind::Mlm,
        };
        let gen = Encoder::init(cfg, 2).unwrap();
        let x = Encoded {
            ids: vec![CLS, 5, 6, 7, SEP, 0],
            editable: vec![false, true, true, true, false, false],
            valid_len: 5,
        };
        let sc = SamplerConfig {
            alpha: 5.0,
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut samples = Vec::new();
        while samples.len() < 2 {
            let s = sample_augmented(&x, Label::Class(0), Domain::Target, 0, &sc, &gen, &mut rng)
                .unwrap();
            if s.d > 0 {
                samples.push(s);
            }
        }
        let refs: Vec<&AugmentedSample> = samples.iter().collect();
        let report = grad_check(
            |g, p| Ok(weighted_mle_loss(g, &cfg, p, &refs, &[1.0, 0.3])?.unwrap()),
            gen.params(),
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "{}", report.max_rel_err());
    }
}
