//! Masked-LM pretraining and supervised fine-tuning.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    batches, rng_stream, streams, sub_seed, validation_metric, StageConfig, TaskData, TrainConfig,
};
use crate::augment::EncodedSet;
use crate::eval::MetricValue;
use crate::model::{mlm_logits_at, Encoder, HeadKind, ModelConfig};
use crate::numerics::{Adam, Graph, ParameterStore, Var};
use crate::text::{Encoded, Label, TaskKind, MASK, NUM_RESERVED};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorReport {
    pub epochs: usize,
    pub heldout_accuracy: f64,
    /// `1 / candidates`, the accuracy of a uniform guess.
    pub chance: f64,
    pub heldout_positions: usize,
    /// Set when zero epochs were requested and the initialization is returned.
    pub untrained: bool,
    pub epoch_losses: Vec<f64>,
}

/// Mean cross-entropy of the original tokens at `positions` of an input whose
/// `positions` have been replaced by `[MASK]`. Reserved tokens are excluded
/// from the softmax.
pub fn mlm_loss<'p>(
    g: &mut Graph<'p>,
    config: &ModelConfig,
    params: &'p ParameterStore,
    masked: &[u32],
    valid_len: usize,
    positions: &[usize],
    targets: &[u32],
) -> Result<Var> {
    let n = valid_len.min(masked.len());
    let vars = crate::model::encoder_forward(g, config, params, &masked[..n], n)?;
    let logits = mlm_logits_at(g, params, vars.hidden, positions)?;
    let allowed: Vec<bool> = (0..config.vocab_size)
        .map(|id| id >= NUM_RESERVED)
        .collect();
    let lp = g.log_softmax(logits, 1.0, Some(&allowed))?;
    let at: Vec<(usize, usize)> = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| (r, t as usize))
        .collect();
    let picked = g.gather(lp, &at)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / positions.len() as f64))
}

fn draw_mask(x: &Encoded, rate: f64, rng: &mut impl Rng) -> Vec<usize> {
    let editable = x.editable_positions();
    if editable.is_empty() {
        return Vec::new();
    }
    let mut chosen: Vec<usize> = editable
        .iter()
        .copied()
        .filter(|_| rng.gen::<f64>() < rate)
        .collect();
    if chosen.is_empty() {
        chosen.push(editable[rng.gen_range(0..editable.len())]);
    }
    chosen
}

fn apply_mask(x: &Encoded, positions: &[usize]) -> (Vec<u32>, Vec<u32>) {
    let mut ids = x.ids.clone();
    let targets = positions.iter().map(|&p| x.ids[p]).collect();
    for &p in positions {
        ids[p] = MASK;
    }
    (ids, targets)
}

/// Masked-token pretraining of the generator on the given unlabeled corpus.
/// One tenth of the corpus (at least one sequence) is held out for the
/// reported accuracy.
pub fn pretrain_generator(
    corpus: &[Encoded],
    config: &ModelConfig,
    stage: &StageConfig,
    mask_rate: f64,
    seed: u64,
) -> Result<(Encoder, GeneratorReport)> {
    if config.head != HeadKind::Mlm {
        return Err(Error::Config("generator needs a masked-LM head".into()));
    }
    let usable: Vec<&Encoded> = corpus.iter().filter(|x| x.m() > 0).collect();
    if usable.is_empty() {
        return Err(Error::Dataset("generator corpus is empty".into()));
    }
    let mut gen = Encoder::init(*config, sub_seed(seed, streams::GENERATOR_INIT))?;
    let mut rng = rng_stream(seed, streams::GENERATOR_MASK);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    order.shuffle(&mut rng);
    let n_held = if usable.len() > 1 {
        (usable.len() / 10).max(1)
    } else {
        0
    };
    let (held, train) = order.split_at(n_held);
    let train: Vec<usize> = if train.is_empty() {
        held.to_vec()
    } else {
        train.to_vec()
    };
    let held_masks: Vec<(usize, Vec<usize>)> = held
        .iter()
        .map(|&i| (i, draw_mask(usable[i], mask_rate, &mut rng)))
        .collect();

    let mut opt = Adam::new(stage.optimizer);
    let mut epoch_losses = Vec::with_capacity(stage.epochs);
    let mut order = train;
    for _ in 0..stage.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for batch in batches(&order, stage.batch_size) {
            let masks: Vec<Vec<usize>> = batch
                .iter()
                .map(|&i| draw_mask(usable[i], mask_rate, &mut rng))
                .collect();
            let grads = {
                let mut g = Graph::new();
                let mut losses = Vec::with_capacity(batch.len());
                for (&i, pos) in batch.iter().zip(&masks) {
                    let (ids, targets) = apply_mask(usable[i], pos);
                    losses.push(mlm_loss(
                        &mut g,
                        config,
                        gen.params(),
                        &ids,
                        usable[i].valid_len,
                        pos,
                        &targets,
                    )?);
                }
                let sum = g.add_n(&losses)?;
                let loss = g.scale(sum, 1.0 / losses.len() as f64);
                total += g.scalar(loss) * batch.len() as f64;
                count += batch.len();
                g.backward(loss)?
            };
            opt.step(gen.params_mut(), &grads)?;
        }
        epoch_losses.push(total / count.max(1) as f64);
    }

    let candidates = config.vocab_size.saturating_sub(NUM_RESERVED).max(1);
    let mut hits = 0;
    let mut total = 0;
    let eval_set: Vec<(usize, Vec<usize>)> = if held_masks.is_empty() {
        vec![(0, draw_mask(usable[0], mask_rate, &mut rng))]
    } else {
        held_masks
    };
    for (i, pos) in &eval_set {
        let (ids, targets) = apply_mask(usable[*i], pos);
        let mut g = Graph::new();
        let vars = gen.forward(&mut g, &ids, usable[*i].valid_len)?;
        let logits = mlm_logits_at(&mut g, gen.params(), vars.hidden, pos)?;
        let l = g.value(logits);
        for (r, &t) in targets.iter().enumerate() {
            let row = &l.row(r)[NUM_RESERVED..];
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            hits += (best + NUM_RESERVED == t as usize) as usize;
            total += 1;
        }
    }
    let report = GeneratorReport {
        epochs: stage.epochs,
        heldout_accuracy: hits as f64 / total.max(1) as f64,
        chance: 1.0 / candidates as f64,
        heldout_positions: total,
        untrained: stage.epochs == 0,
        epoch_losses,
    };
    if report.untrained {
        log::warn!("generator pretraining ran zero epochs; returning the initialization");
    }
    Ok((gen, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedReport {
    /// Epoch of the kept checkpoint; 0 is the initialization.
    pub best_epoch: usize,
    pub best_validation: MetricValue,
    pub epoch_losses: Vec<f64>,
    pub epoch_validation: Vec<f64>,
}

fn supervised_loss<'p>(
    g: &mut Graph<'p>,
    model: &'p Encoder,
    x: &Encoded,
    label: Label,
) -> Result<Var> {
    let vars = model.forward(g, &x.ids, x.valid_len)?;
    let logits = vars
        .logits
        .ok_or_else(|| Error::InvalidArgument("supervised training needs a task head".into()))?;
    match label {
        Label::Class(c) => {
            let lp = g.log_softmax(logits, 1.0, None)?;
            let picked = g.gather(lp, &[(0, c)])?;
            let s = g.sum(picked);
            Ok(g.scale(s, -1.0))
        }
        Label::Real(r) => {
            let t = g.constant(crate::numerics::Tensor::matrix(1, 1, vec![r])?);
            g.mse(logits, t)
        }
    }
}

/// Supervised training keeping the best-validation checkpoint (checked
/// after every epoch, ties keep the earlier one).
pub fn train_supervised(
    mut model: Encoder,
    train: &EncodedSet,
    validation: &EncodedSet,
    task: TaskKind,
    stage: &StageConfig,
    rng: &mut impl Rng,
) -> Result<(Encoder, SupervisedReport)> {
    if train.is_empty() {
        return Err(Error::Dataset("supervised training set is empty".into()));
    }
    let mut opt = Adam::new(stage.optimizer);
    let mut best = model.clone();
    let mut best_val = validation_metric(&model, validation, task)?;
    let mut best_epoch = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::new();
    let mut epoch_validation = Vec::new();
    let mut step = 0;
    for epoch in 1..=stage.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in batches(&order, stage.batch_size) {
            let grads = {
                let mut g = Graph::new();
                let losses = batch
                    .iter()
                    .map(|&i| supervised_loss(&mut g, &model, &train.items[i], train.labels[i]))
                    .collect::<Result<Vec<_>>>()?;
                let sum = g.add_n(&losses)?;
                let loss = g.scale(sum, 1.0 / losses.len() as f64);
                total += g.scalar(loss) * batch.len() as f64;
                g.backward(loss)?
            };
            step += 1;
            opt.set_lr_scale(stage.lr_scale(step));
            opt.step(model.params_mut(), &grads)?;
        }
        let val = validation_metric(&model, validation, task)?;
        epoch_losses.push(total / train.len() as f64);
        epoch_validation.push(val.value);
        if val.value > best_val.value {
            best_val = val;
            best = model.clone();
            best_epoch = epoch;
        }
    }
    Ok((
        best,
        SupervisedReport {
            best_epoch,
            best_validation: best_val,
            epoch_losses,
            epoch_validation,
        },
    ))
}

/// Teacher trained on the full source set plus the full target pool.
pub fn train_teacher(
    data: &TaskData,
    config: &TrainConfig,
    seed: u64,
) -> Result<(Encoder, SupervisedReport)> {
    let mc = data.model_config(config.teacher, config.max_len, data.head());
    let init = Encoder::init(mc, sub_seed(seed, streams::TEACHER_INIT))?;
    let train = data.source.concat(&data.target_pool)?;
    let mut rng = rng_stream(seed, streams::TEACHER_SHUFFLE);
    train_supervised(
        init,
        &train,
        &data.validation,
        data.task,
        &config.teacher_train,
        &mut rng,
    )
}

/// Student fine-tuned on the labelled target subsample only.
pub fn train_student_ft(
    data: &TaskData,
    config: &TrainConfig,
    seed: u64,
) -> Result<(Encoder, SupervisedReport)> {
    let init = super::init_student(data, config, seed)?;
    let mut rng = rng_stream(seed, streams::STUDENT_FT_SHUFFLE);
    train_supervised(
        init,
        &data.target_train,
        &data.validation,
        data.task,
        &config.student_train,
        &mut rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::text::{CLS, SEP};

    #[test]
    fn mlm_loss_gradient_check() {
        let cfg = ModelConfig {
            layers: 1,
            hidden: 4,
            heads: 2,
            ffn: 5,
            vocab_size: 9,
            max_len: 6,
            head: HeadKind::Mlm,
        };
        let params = crate::model::init_model(&cfg, 3).unwrap();
        let ids = [CLS, MASK, 6, MASK, SEP];
        let report = grad_check(
            |g, p| mlm_loss(g, &cfg, p, &ids, 5, &[1, 3], &[7, 5]),
            &params,
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "{}", report.max_rel_err());
    }

    #[test]
    fn zero_epochs_returns_flagged_init() {
        let cfg = ModelConfig {
            layers: 1,
            hidden: 4,
            heads: 2,
            ffn: 5,
            vocab_size: 9,
            max_len: 6,
            head: HeadKind::Mlm,
        };
        let x = Encoded {
            ids: vec![CLS, 5, 6, 7, SEP, 0],
            editable: vec![false, true, true, true, false, false],
            valid_len: 5,
        };
        let stage = StageConfig::new(0, 4, 1e-3);
        let (g, r) = pretrain_generator(&[x.clone(), x], &cfg, &stage, 0.15, 4).unwrap();
        assert!(r.untrained);
        assert_eq!(
            g,
            Encoder::init(cfg, sub_seed(4, streams::GENERATOR_INIT)).unwrap()
        );
        assert!(pretrain_generator(&[], &cfg, &stage, 0.15, 4).is_err());
    }
}
