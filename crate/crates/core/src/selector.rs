//! Keep/drop policy over augmented samples, trained by REINFORCE.
//!
//! One epoch is one episode and one batch is one step. Each sample gets an
//! independent Bernoulli action; the step reward is the change in the
//! student's validation metric caused by that batch's update.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::MetricValue;
use crate::numerics::{
    softmax_vec, Adam, AdamConfig, Gradients, Graph, ParameterStore, Tensor, Var,
};
use crate::text::{Domain, TaskKind};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectorConfig {
    pub gamma: f64,
    pub hidden: usize,
    pub baseline_decay: f64,
    pub optimizer: AdamConfig,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            gamma: 0.95,
            hidden: 128,
            baseline_decay: 0.9,
            optimizer: AdamConfig::with_lr(3e-4),
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "selector.gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.hidden == 0 {
            return Err(Error::Config("selector.hidden must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::Config(
                "selector.baseline_decay must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// State width for `k` output units.
pub fn state_dim(k: usize) -> usize {
    3 * k + 3
}

/// States for a batch: teacher and student output probabilities (raw outputs
/// for regression), their absolute difference, the teacher/student dark
/// loss, per-batch standardized `log_ps` and a target-domain indicator.
pub fn featurize(
    teacher: &[Vec<f64>],
    student: &[Vec<f64>],
    log_ps: &[f64],
    domains: &[Domain],
    task: TaskKind,
    temperature: f64,
) -> Result<Vec<Vec<f64>>> {
    let n = teacher.len();
    if student.len() != n || log_ps.len() != n || domains.len() != n {
        return Err(Error::InvalidArgument(
            "featurize: batch components differ in length".into(),
        ));
    }
    let all_finite = teacher
        .iter()
        .chain(student)
        .flatten()
        .chain(log_ps)
        .all(|v| v.is_finite());
    if !all_finite {
        return Err(Error::NonFinite("selector features".into()));
    }
    let mean = log_ps.iter().sum::<f64>() / n.max(1) as f64;
    let var = log_ps.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n.max(1) as f64;
    let sd = var.sqrt();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if teacher[i].len() != student[i].len() {
            return Err(Error::shape(
                "featurize",
                &[teacher[i].len()],
                &[student[i].len()],
            ));
        }
        let (t, s, dark) = match task {
            TaskKind::Classification => {
                let t = softmax_vec(&teacher[i], temperature);
                let s = softmax_vec(&student[i], temperature);
                let ce = -t
                    .iter()
                    .zip(&s)
                    .map(|(p, q)| p * q.max(1e-300).ln())
                    .sum::<f64>();
                (t, s, ce)
            }
            TaskKind::Regression => {
                let d: f64 = teacher[i]
                    .iter()
                    .zip(&student[i])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (
                    teacher[i].clone(),
                    student[i].clone(),
                    d / teacher[i].len() as f64,
                )
            }
        };
        let mut f = Vec::with_capacity(state_dim(t.len()));
        f.extend_from_slice(&t);
        f.extend_from_slice(&s);
        f.extend(t.iter().zip(&s).map(|(a, b)| (a - b).abs()));
        f.push(dark);
        f.push(if sd > 0.0 {
            (log_ps[i] - mean) / sd
        } else {
            0.0
        });
        f.push(if domains[i] == Domain::Target {
            1.0
        } else {
            0.0
        });
        out.push(f);
    }
    Ok(out)
}

/// Two-layer tanh network with a sigmoid output.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    params: ParameterStore,
    dim: usize,
}

impl PolicyNet {
    /// The output layer starts at zero, so every score is initially 0.5.
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::Config("policy dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (dim as f64).sqrt();
        let w1 = (0..dim * hidden).map(|_| rng.gen_range(-s..s)).collect();
        let mut params = ParameterStore::new();
        params.insert("policy.w1", Tensor::matrix(dim, hidden, w1)?)?;
        params.insert("policy.b1", Tensor::zeros(vec![hidden]))?;
        params.insert("policy.w2", Tensor::zeros(vec![hidden, 1]))?;
        params.insert("policy.b2", Tensor::zeros(vec![1]))?;
        Ok(PolicyNet { params, dim })
    }

    pub fn from_params(params: ParameterStore) -> Result<Self> {
        let dim = params.get("policy.w1")?.rows();
        for name in ["policy.b1", "policy.w2", "policy.b2"] {
            params.get(name)?;
        }
        Ok(PolicyNet { params, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    /// Pre-sigmoid scores, `n × 1`.
    pub fn scores<'p>(&'p self, g: &mut Graph<'p>, states: &[Vec<f64>]) -> Result<Var> {
        policy_scores(g, &self.params, self.dim, states)
    }

    /// `π(s)` for each state.
    pub fn forward(&self, states: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let u = self.scores(&mut g, states)?;
        let p = g.sigmoid(u);
        Ok(g.data(p).to_vec())
    }
}

fn policy_scores<'p>(
    g: &mut Graph<'p>,
    params: &'p ParameterStore,
    dim: usize,
    states: &[Vec<f64>],
) -> Result<Var> {
    if states.is_empty() {
        return Err(Error::InvalidArgument("policy over an empty batch".into()));
    }
    if let Some(bad) = states.iter().find(|s| s.len() != dim) {
        return Err(Error::shape("policy input", &[dim], &[bad.len()]));
    }
    let x = g.constant(Tensor::matrix(states.len(), dim, states.concat())?);
    let w1 = g.param(params, "policy.w1")?;
    let b1 = g.param(params, "policy.b1")?;
    let w2 = g.param(params, "policy.w2")?;
    let b2 = g.param(params, "policy.b2")?;
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.tanh(h);
    let u = g.matmul(h, w2)?;
    g.add_row(u, b2)
}

/// `Σᵢ aᵢ log pᵢ + (1−aᵢ) log(1−pᵢ)` for the policy in `params`.
pub fn log_likelihood<'p>(
    g: &mut Graph<'p>,
    params: &'p ParameterStore,
    states: &[Vec<f64>],
    actions: &[bool],
) -> Result<Var> {
    if actions.len() != states.len() {
        return Err(Error::InvalidArgument(format!(
            "{} actions for {} states",
            actions.len(),
            states.len()
        )));
    }
    let dim = params.get("policy.w1")?.rows();
    let u = policy_scores(g, params, dim, states)?;
    let log_p = g.log_sigmoid(u);
    let neg = g.scale(u, -1.0);
    let log_q = g.log_sigmoid(neg);
    let on: Vec<f64> = actions.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
    let off: Vec<f64> = on.iter().map(|a| 1.0 - a).collect();
    let a = g.weighted_sum(log_p, &on)?;
    let b = g.weighted_sum(log_q, &off)?;
    g.add(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    Sample,
    Threshold,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Actions {
    pub mask: Vec<bool>,
    /// Set when nothing was selected and the top-scoring sample was forced on.
    pub forced: bool,
}

impl Actions {
    pub fn selected(&self) -> usize {
        self.mask.iter().filter(|a| **a).count()
    }
}

/// Bernoulli draws (training) or `p ≥ 0.5` (evaluation). Never selects nothing.
pub fn select_actions(probs: &[f64], rng: &mut impl Rng, mode: ActionMode) -> Actions {
    let mut mask: Vec<bool> = match mode {
        ActionMode::Sample => probs.iter().map(|&p| rng.gen::<f64>() < p).collect(),
        ActionMode::Threshold => probs.iter().map(|&p| p >= 0.5).collect(),
    };
    let forced = !probs.is_empty() && mask.iter().all(|a| !a);
    if forced {
        let best = probs
            .iter()
            .enumerate()
            .fold(0, |b, (i, &p)| if p > probs[b] { i } else { b });
        mask[best] = true;
    }
    Actions { mask, forced }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reward {
    pub value: f64,
    /// Either side was an undefined metric and read as 0.
    pub flagged: bool,
}

pub fn step_reward(after: MetricValue, before: MetricValue) -> Reward {
    let read = |m: MetricValue| if m.undefined { 0.0 } else { m.value };
    Reward {
        value: read(after) - read(before),
        flagged: after.undefined || before.undefined,
    }
}

/// `Rₜ = Σₖ γᵏ rₜ₊ₖ`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<bool>,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeHistory {
    pub transitions: Vec<Transition>,
    pub gamma: f64,
}

impl EpisodeHistory {
    pub fn new(gamma: f64) -> Self {
        EpisodeHistory {
            transitions: Vec::new(),
            gamma,
        }
    }

    pub fn push(&mut self, t: Transition) {
        self.transitions.push(t);
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Exponential moving average of raw episode returns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub value: f64,
    pub initialized: bool,
}

impl Baseline {
    pub fn update(&mut self, mean_return: f64, decay: f64) {
        if self.initialized {
            self.value = decay * self.value + (1.0 - decay) * mean_return;
        } else {
            self.value = mean_return;
            self.initialized = true;
        }
    }
}

/// Per-step advantages. Episodes of two or more steps use standardized
/// returns (all zero when the returns are constant); single-step episodes
/// subtract the running baseline instead.
pub fn advantages(returns: &[f64], baseline: &Baseline) -> Vec<f64> {
    if returns.len() >= 2 {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let sd = (returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
        if sd < 1e-12 {
            return vec![0.0; returns.len()];
        }
        returns.iter().map(|r| (r - mean) / sd).collect()
    } else {
        returns.iter().map(|r| r - baseline.value).collect()
    }
}

/// Gradient of `weight · log π(a|s)` with respect to the policy parameters.
pub fn reinforce_gradient(
    policy: &PolicyNet,
    states: &[Vec<f64>],
    actions: &[bool],
    weight: f64,
) -> Result<Gradients> {
    let mut g = Graph::new();
    let ll = log_likelihood(&mut g, policy.params(), states, actions)?;
    let obj = g.scale(ll, weight);
    g.backward(obj)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyUpdateReport {
    pub steps: usize,
    pub mean_return: f64,
    pub baseline: f64,
    pub update_norm: f64,
}

/// REINFORCE ascent over one episode: one optimizer step per transition.
pub fn policy_update(
    policy: &mut PolicyNet,
    optimizer: &mut Adam,
    history: &EpisodeHistory,
    baseline: &mut Baseline,
    decay: f64,
) -> Result<PolicyUpdateReport> {
    if history.is_empty() {
        return Err(Error::InvalidArgument(
            "policy update over an empty episode".into(),
        ));
    }
    let rewards: Vec<f64> = history.transitions.iter().map(|t| t.reward).collect();
    let returns = discounted_returns(&rewards, history.gamma);
    let adv = advantages(&returns, baseline);
    let before = policy.params().clone();
    for (t, &a) in history.transitions.iter().zip(&adv) {
        if a == 0.0 {
            continue;
        }
        // Adam minimizes, so step on the negated objective.
        let grads = reinforce_gradient(policy, &t.states, &t.actions, -a)?;
        optimizer.step(policy.params_mut(), &grads)?;
    }
    let mean_return = returns.iter().sum::<f64>() / returns.len() as f64;
    baseline.update(mean_return, decay);
    let update_norm = policy
        .params()
        .iter()
        .zip(before.iter())
        .flat_map(|((_, a), (_, b))| {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .collect::<Vec<_>>()
        })
        .sum::<f64>()
        .sqrt();
    Ok(PolicyUpdateReport {
        steps: history.len(),
        mean_return,
        baseline: baseline.value,
        update_norm,
    })
}

/// Fresh optimizer for a policy.
pub fn policy_optimizer(config: &SelectorConfig) -> Adam {
    Adam::new(config.optimizer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    #[test]
    fn featurize_examples() {
        let t = vec![vec![0.3, -0.2], vec![0.3, -0.2]];
        let f = featurize(
            &t,
            &t,
            &[-3.0, -3.0],
            &[Domain::Target, Domain::Source],
            TaskKind::Classification,
            1.0,
        )
        .unwrap();
        assert_eq!(f[0].len(), state_dim(2));
        assert!(f[0][4..6].iter().all(|v| *v == 0.0));
        assert_eq!(f[0][..8], f[1][..8]);
        assert_eq!(f[0][7], 0.0);
        let one = featurize(
            &t[..1],
            &t[..1],
            &[-7.0],
            &[Domain::Target],
            TaskKind::Classification,
            1.0,
        )
        .unwrap();
        assert_eq!(one[0][7], 0.0);
        assert!(featurize(
            &t[..1],
            &t[..1],
            &[f64::NAN],
            &[Domain::Target],
            TaskKind::Classification,
            1.0
        )
        .is_err());
    }

    #[test]
    fn fresh_policy_outputs_one_half() {
        let p = PolicyNet::init(5, 8, 0).unwrap();
        let out = p.forward(&[vec![1.0, -2.0, 0.0, 3.0, 0.5]]).unwrap();
        assert_eq!(out, vec![0.5]);
        assert!(p.forward(&[vec![1.0]]).is_err());
    }

    #[test]
    fn log_likelihood_gradient_check() {
        let mut p = PolicyNet::init(3, 4, 1).unwrap();
        let w2 = p.params_mut().get_mut("policy.w2").unwrap();
        w2.data_mut().copy_from_slice(&[0.3, -0.5, 0.8, 0.1]);
        let states = vec![vec![0.2, -1.0, 0.4], vec![1.5, 0.3, -0.7]];
        let report = grad_check(
            |g, ps| log_likelihood(g, ps, &states, &[true, false]),
            p.params(),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{}", report.max_rel_err());
    }

    #[test]
    fn threshold_and_forced_actions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = select_actions(&[0.999; 4], &mut rng, ActionMode::Threshold);
        assert_eq!(a.selected(), 4);
        let a = select_actions(&[0.001, 0.002, 0.001], &mut rng, ActionMode::Sample);
        assert_eq!(a.selected(), 1);
        assert!(a.forced && a.mask[1]);
    }

    #[test]
    fn bernoulli_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut hits = [0usize; 2];
        for _ in 0..10_000 {
            let a = select_actions(&[0.9, 0.1], &mut rng, ActionMode::Sample);
            for i in 0..2 {
                hits[i] += a.mask[i] as usize;
            }
        }
        // Forcing fires on all-zero draws and always picks the first sample.
        let f1 = hits[1] as f64 / 1e4;
        assert!((f1 - 0.1).abs() < 0.02, "{f1}");
    }

    #[test]
    fn returns_and_rewards() {
        assert_eq!(
            discounted_returns(&[1.0, 1.0, 1.0], 0.5),
            vec![1.75, 1.5, 1.0]
        );
        assert_eq!(
            discounted_returns(&[1.0, 2.0, 3.0], 1.0),
            vec![6.0, 5.0, 3.0]
        );
        assert_eq!(discounted_returns(&[0.4], 0.9), vec![0.4]);
        let m = |v| MetricValue {
            value: v,
            undefined: false,
        };
        assert!((step_reward(m(0.80), m(0.75)).value - 0.05).abs() < 1e-12);
        assert_eq!(step_reward(m(0.7), m(0.7)).value, 0.0);
        assert!(step_reward(m(0.6), m(0.7)).value < 0.0);
        let undef = MetricValue {
            value: 0.0,
            undefined: true,
        };
        assert!(step_reward(m(0.5), undef).flagged);
    }

    #[test]
    fn equal_returns_give_no_update() {
        let mut p = PolicyNet::init(3, 4, 2).unwrap();
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        let mut h = EpisodeHistory::new(1.0);
        for _ in 0..3 {
            h.push(Transition {
                states: vec![vec![0.1, 0.2, 0.3]],
                actions: vec![true],
                reward: 0.0,
            });
        }
        // With γ = 1 every step's return is the final reward.
        h.transitions[2].reward = 0.25;
        let mut b = Baseline::default();
        let r = policy_update(&mut p, &mut opt, &h, &mut b, 0.9).unwrap();
        assert_eq!(r.update_norm, 0.0);
        assert_eq!(p, before);
        assert!(policy_update(&mut p, &mut opt, &EpisodeHistory::new(0.9), &mut b, 0.9).is_err());
    }
}
