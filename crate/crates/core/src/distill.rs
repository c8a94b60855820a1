//! Attention, hidden-state and dark-knowledge distillation losses.
//!
//! Teacher quantities enter as constants: the teacher is frozen during
//! distillation, so its outputs are materialized once per input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{EncoderOutput, EncoderVars};
use crate::numerics::{softmax_vec, Graph, ParameterStore, Tensor, Var};
use crate::text::TaskKind;
use crate::{Error, Result};

/// Name of the trainable student-to-teacher hidden projection.
pub const PROJECTION: &str = "distill.w";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KDConfig {
    /// Softening temperature of the dark-knowledge term.
    pub temperature: f64,
    pub att: bool,
    pub hidden: bool,
    pub dark: bool,
}

impl Default for KDConfig {
    fn default() -> Self {
        KDConfig {
            temperature: 1.0,
            att: true,
            hidden: true,
            dark: true,
        }
    }
}

impl KDConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "kd.temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.att || self.hidden || self.dark) {
            return Err(Error::Config(
                "kd: at least one of att, hidden, dark must be enabled".into(),
            ));
        }
        Ok(())
    }
}

/// Initial projection `W` (student hidden × teacher hidden).
pub fn init_projection(student_hidden: usize, teacher_hidden: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = 1.0 / (student_hidden as f64).sqrt();
    let data = (0..student_hidden * teacher_hidden)
        .map(|_| rng.gen_range(-s..s))
        .collect();
    Tensor::new(vec![student_hidden, teacher_hidden], data).expect("shape matches data")
}

/// Adds [`PROJECTION`] to a student parameter store.
pub fn attach_projection(
    student: &mut ParameterStore,
    student_hidden: usize,
    teacher_hidden: usize,
    seed: u64,
) -> Result<()> {
    student.insert(
        PROJECTION,
        init_projection(student_hidden, teacher_hidden, seed),
    )
}

/// Mean over heads of the elementwise MSE between attention maps.
pub fn attention_loss(g: &mut Graph<'_>, student: &[Var], teacher: &[Var]) -> Result<Var> {
    if student.len() != teacher.len() {
        return Err(Error::InvalidArgument(format!(
            "attention loss needs equal head counts, student has {} and teacher {}",
            student.len(),
            teacher.len()
        )));
    }
    if student.is_empty() {
        return Err(Error::InvalidArgument(
            "attention loss over zero heads".into(),
        ));
    }
    let terms = student
        .iter()
        .zip(teacher)
        .map(|(&s, &t)| g.mse(s, t))
        .collect::<Result<Vec<_>>>()?;
    let total = g.add_n(&terms)?;
    Ok(g.scale(total, 1.0 / terms.len() as f64))
}

/// `MSE(H_s·W − H_t)`.
pub fn hidden_loss(g: &mut Graph<'_>, h_s: Var, h_t: Var, w: Var) -> Result<Var> {
    let projected = g.matmul(h_s, w)?;
    g.mse(projected, h_t)
}

/// Soft cross-entropy of the student under the teacher, both softened at
/// `temperature`; MSE for regression. There is no `T²` factor.
pub fn dark_loss(
    g: &mut Graph<'_>,
    g_s: Var,
    g_t: &[f64],
    temperature: f64,
    task: TaskKind,
) -> Result<Var> {
    let width = g.data(g_s).len();
    if width != g_t.len() {
        return Err(Error::shape("dark_loss", g.shape(g_s), &[1, g_t.len()]));
    }
    match task {
        TaskKind::Classification => {
            let p_t = softmax_vec(g_t, temperature);
            let log_q = g.log_softmax(g_s, temperature, None)?;
            let ce = g.weighted_sum(log_q, &p_t)?;
            Ok(g.scale(ce, -1.0))
        }
        TaskKind::Regression => {
            if width != 1 {
                return Err(Error::InvalidArgument(format!(
                    "regression logits must be scalar, got {width}"
                )));
            }
            let t = g.constant(Tensor::new(g.shape(g_s).to_vec(), g_t.to_vec())?);
            g.mse(g_s, t)
        }
    }
}

/// Per-term loss values of one step; disabled terms read 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_att: f64,
    pub l_hidden: f64,
    pub l_dark: f64,
    pub l_kd: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,l_att,l_hidden,l_dark,l_kd";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{}",
            self.l_att, self.l_hidden, self.l_dark, self.l_kd
        )
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.l_att += other.l_att;
        self.l_hidden += other.l_hidden;
        self.l_dark += other.l_dark;
        self.l_kd += other.l_kd;
    }

    pub fn scaled(mut self, factor: f64) -> LossBreakdown {
        self.l_att *= factor;
        self.l_hidden *= factor;
        self.l_dark *= factor;
        self.l_kd *= factor;
        self
    }
}

/// Graph nodes of the combined loss.
#[derive(Clone, Copy, Debug)]
pub struct KdTerms {
    pub total: Var,
    pub att: Option<Var>,
    pub hidden: Option<Var>,
    pub dark: Option<Var>,
}

impl KdTerms {
    pub fn breakdown(&self, g: &Graph<'_>) -> LossBreakdown {
        let read = |v: Option<Var>| v.map(|v| g.scalar(v)).unwrap_or(0.0);
        LossBreakdown {
            l_att: read(self.att),
            l_hidden: read(self.hidden),
            l_dark: read(self.dark),
            l_kd: g.scalar(self.total),
        }
    }
}

/// Unweighted sum of the enabled terms for one input. The student forward
/// must cover the same non-pad prefix as the teacher output.
pub fn kd_loss(
    g: &mut Graph<'_>,
    student: &EncoderVars,
    teacher: &EncoderOutput,
    w: Option<Var>,
    config: &KDConfig,
    task: TaskKind,
) -> Result<KdTerms> {
    config.validate()?;
    let mut terms = Vec::new();
    let att = if config.att {
        let n = teacher.valid_len;
        let s = student
            .attention
            .iter()
            .map(|&a| g.block(a, n, n))
            .collect::<Result<Vec<_>>>()?;
        let t: Vec<Var> = teacher
            .attention
            .iter()
            .map(|a| leading_block(a, n).map(|b| g.constant(b)))
            .collect::<Result<_>>()?;
        let l = attention_loss(g, &s, &t)?;
        terms.push(l);
        Some(l)
    } else {
        None
    };
    let hidden = if config.hidden {
        let w =
            w.ok_or_else(|| Error::InvalidArgument("hidden loss needs the projection W".into()))?;
        let n = teacher.valid_len;
        let rows: Vec<usize> = (0..n).collect();
        let h_s = g.select_rows(student.hidden, &rows)?;
        let h_t = g.constant(leading_rows(&teacher.hidden, n)?);
        let l = hidden_loss(g, h_s, h_t, w)?;
        terms.push(l);
        Some(l)
    } else {
        None
    };
    let dark = if config.dark {
        let g_s = student
            .logits
            .ok_or_else(|| Error::InvalidArgument("dark loss needs student logits".into()))?;
        let g_t = teacher
            .logits
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("dark loss needs teacher logits".into()))?;
        let l = dark_loss(g, g_s, g_t.data(), config.temperature, task)?;
        terms.push(l);
        Some(l)
    } else {
        None
    };
    let total = g.add_n(&terms)?;
    Ok(KdTerms {
        total,
        att,
        hidden,
        dark,
    })
}

fn leading_block(t: &Tensor, n: usize) -> Result<Tensor> {
    if t.rows() < n || t.cols() < n {
        return Err(Error::shape("attention block", t.shape(), &[n, n]));
    }
    let data = (0..n).flat_map(|r| t.row(r)[..n].to_vec()).collect();
    Tensor::matrix(n, n, data)
}

fn leading_rows(t: &Tensor, n: usize) -> Result<Tensor> {
    if t.rows() < n {
        return Err(Error::shape("hidden rows", t.shape(), &[n, t.cols()]));
    }
    Tensor::matrix(n, t.cols(), t.data()[..n * t.cols()].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{entropy, grad_check};

    fn mat(g: &mut Graph<'_>, r: usize, c: usize, v: &[f64]) -> Var {
        g.constant(Tensor::matrix(r, c, v.to_vec()).unwrap())
    }

    #[test]
    fn attention_loss_examples() {
        let mut g = Graph::new();
        let a = mat(&mut g, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = mat(&mut g, 2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let same = attention_loss(&mut g, &[a], &[a]).unwrap();
        assert_eq!(g.scalar(same), 0.0);
        let ab = attention_loss(&mut g, &[a], &[b]).unwrap();
        let ba = attention_loss(&mut g, &[b], &[a]).unwrap();
        assert!((g.scalar(ab) - 1.0).abs() < 1e-15);
        assert_eq!(g.scalar(ab), g.scalar(ba));
        assert!(attention_loss(&mut g, &[a, a], &[b]).is_err());
    }

    #[test]
    fn hidden_loss_zero_cases() {
        let mut g = Graph::new();
        let h = mat(&mut g, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let i = mat(&mut g, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let l = hidden_loss(&mut g, h, h, i).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let z = mat(&mut g, 2, 3, &[0.0; 6]);
        let zt = mat(&mut g, 2, 3, &[0.0; 6]);
        let l = hidden_loss(&mut g, h, zt, z).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let bad = mat(&mut g, 3, 3, &[0.0; 9]);
        assert!(hidden_loss(&mut g, h, zt, bad).is_err());
    }

    #[test]
    fn dark_loss_examples() {
        let mut g = Graph::new();
        let s = mat(&mut g, 1, 2, &[0.0, 0.0]);
        let l = dark_loss(&mut g, s, &[0.0, 0.0], 1.0, TaskKind::Classification).unwrap();
        assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
        let r = mat(&mut g, 1, 1, &[0.3]);
        let l = dark_loss(&mut g, r, &[0.5], 1.0, TaskKind::Regression).unwrap();
        assert!((g.scalar(l) - 0.04).abs() < 1e-12);
        assert!(dark_loss(&mut g, s, &[0.0, 0.0, 0.0], 1.0, TaskKind::Classification).is_err());
    }

    #[test]
    fn dark_loss_at_match_is_teacher_entropy_with_zero_gradient() {
        let t = [0.4, -1.2, 2.0];
        let mut params = ParameterStore::new();
        params
            .insert("s", Tensor::matrix(1, 3, t.to_vec()).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let s = g.param(&params, "s").unwrap();
        let l = dark_loss(&mut g, s, &t, 2.0, TaskKind::Classification).unwrap();
        assert!((g.scalar(l) - entropy(&softmax_vec(&t, 2.0))).abs() < 1e-12);
        let grads = g.backward(l).unwrap();
        assert!(grads
            .get("s")
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dark_loss_gradient_check() {
        let mut params = ParameterStore::new();
        params
            .insert("s", Tensor::matrix(1, 3, vec![0.1, 0.7, -0.5]).unwrap())
            .unwrap();
        params
            .insert("r", Tensor::matrix(1, 1, vec![0.2]).unwrap())
            .unwrap();
        let report = grad_check(
            |g, p| {
                let s = g.param(p, "s")?;
                let r = g.param(p, "r")?;
                let a = dark_loss(g, s, &[1.0, -0.3, 0.2], 1.7, TaskKind::Classification)?;
                let b = dark_loss(g, r, &[0.9], 1.0, TaskKind::Regression)?;
                g.add(a, b)
            },
            &params,
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(report.passed());
    }

    #[test]
    fn config_rejects_all_terms_off_and_bad_temperature() {
        let off = KDConfig {
            att: false,
            hidden: false,
            dark: false,
            ..KDConfig::default()
        };
        assert!(off.validate().is_err());
        let cold = KDConfig {
            temperature: 0.0,
            ..KDConfig::default()
        };
        assert!(cold.validate().is_err());
    }
}
