//! Instance-level InfoNCE, its symmetric cross-view form, the column-wise
//! cluster-level loss and their weighted total.

use serde::{Deserialize, Serialize};
use slicer_autodiff::{Tape, Tensor, Var};

use crate::error::{Result, SlicerError};

/// How many in-batch negatives each positive is contrasted with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "NegativesRepr", into = "NegativesRepr")]
pub enum Negatives {
    /// Every other row.
    All,
    /// The next `K` rows, cyclically.
    Count(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NegativesRepr {
    Count(usize),
    Word(String),
}

impl TryFrom<NegativesRepr> for Negatives {
    type Error = String;

    fn try_from(r: NegativesRepr) -> std::result::Result<Self, String> {
        match r {
            NegativesRepr::Count(k) => Ok(Negatives::Count(k)),
            NegativesRepr::Word(w) if w == "all" => Ok(Negatives::All),
            NegativesRepr::Word(w) => Err(format!("expected \"all\" or a count, got {w:?}")),
        }
    }
}

impl From<Negatives> for NegativesRepr {
    fn from(n: Negatives) -> Self {
        match n {
            Negatives::All => NegativesRepr::Word("all".into()),
            Negatives::Count(k) => NegativesRepr::Count(k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub num_negatives: Negatives,
    pub normalize_rows: bool,
    pub cluster_softmax: bool,
    pub normalize_cols: bool,
    /// Both view directions of the instance loss; off gives the single
    /// direction of a plain momentum-contrast learner.
    pub symmetric: bool,
    pub cluster_loss: bool,
    pub w_instance: f64,
    pub w_cluster: f64,
    /// Weight of `ln C - H(mean cluster assignment)` per view; 0 disables.
    pub entropy_weight: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            num_negatives: Negatives::All,
            normalize_rows: true,
            cluster_softmax: true,
            normalize_cols: true,
            symmetric: true,
            cluster_loss: true,
            w_instance: 1.0,
            w_cluster: 1.0,
            entropy_weight: 0.0,
        }
    }
}

impl ContrastiveConfig {
    pub fn instance_enabled(&self) -> bool {
        self.w_instance != 0.0
    }

    pub fn cluster_enabled(&self) -> bool {
        self.cluster_loss && self.w_cluster != 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(SlicerError::config("loss.tau", "must be positive"));
        }
        if self.num_negatives == Negatives::Count(0) {
            return Err(SlicerError::config(
                "loss.num_negatives",
                "must be at least 1",
            ));
        }
        for (key, w) in [
            ("loss.w_instance", self.w_instance),
            ("loss.w_cluster", self.w_cluster),
            ("loss.entropy_weight", self.entropy_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(SlicerError::config(
                    key,
                    "must be a finite non-negative weight",
                ));
            }
        }
        if !self.instance_enabled() && !self.cluster_enabled() {
            return Err(SlicerError::config(
                "loss.w_instance",
                "instance and cluster terms are both disabled",
            ));
        }
        Ok(())
    }
}

/// Per-row candidate columns, positive first.
fn candidates(n: usize, negatives: Negatives) -> Result<Vec<Vec<usize>>> {
    if n < 2 {
        return Err(SlicerError::InvalidInput(format!(
            "contrastive loss needs at least 2 rows for negatives, got {n}"
        )));
    }
    let k = match negatives {
        Negatives::All => n - 1,
        Negatives::Count(k) if (1..n).contains(&k) => k,
        Negatives::Count(k) => {
            return Err(SlicerError::config(
                "loss.num_negatives",
                format!("{k} negatives need at least {} rows, got {n}", k + 1),
            ))
        }
    };
    Ok((0..n)
        .map(|i| (0..=k).map(|j| (i + j) % n).collect())
        .collect())
}

fn check_pair(tape: &Tape, a: Var, b: Var, what: &'static str) -> Result<(usize, usize)> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa.len() != 2 || sa != sb {
        return Err(SlicerError::Shape {
            context: what,
            detail: format!("{sa:?} vs {sb:?}"),
        });
    }
    Ok((sa[0], sa[1]))
}

/// Mean over rows `i` of `-log softmax_j(a_i . b_j / tau)[j = i]`, the
/// softmax running over the positive and the selected negatives.
fn info_nce_core(
    tape: &mut Tape,
    a: Var,
    b: Var,
    tau: f64,
    negatives: Negatives,
    normalize: bool,
) -> Result<Var> {
    let (n, _) = check_pair(tape, a, b, "info_nce")?;
    let idx = candidates(n, negatives)?;
    let (a, b) = if normalize {
        (tape.l2_normalize(a, 1)?, tape.l2_normalize(b, 1)?)
    } else {
        (a, b)
    };
    let bt = tape.transpose(b)?;
    let sim = tape.matmul(a, bt)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    let picked = tape.take_along_rows(logits, idx)?;
    let logp = tape.log_softmax(picked, 1)?;
    let pos = tape.take_along_rows(logp, vec![vec![0]; n])?;
    let total = tape.sum(pos)?;
    Ok(tape.scale(total, -1.0 / n as f64)?)
}

/// Instance-level InfoNCE of `anchor` rows against `target` rows.
pub fn instance_info_nce(
    tape: &mut Tape,
    anchor: Var,
    target: Var,
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    info_nce_core(
        tape,
        anchor,
        target,
        cfg.tau,
        cfg.num_negatives,
        cfg.normalize_rows,
    )
}

/// `L(student_a, teacher_b) + L(student_b, teacher_a)`.
pub fn symmetric_instance_loss(
    tape: &mut Tape,
    student_a: Var,
    student_b: Var,
    teacher_a: Var,
    teacher_b: Var,
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    let ab = instance_info_nce(tape, student_a, teacher_b, cfg)?;
    let ba = instance_info_nce(tape, student_b, teacher_a, cfg)?;
    Ok(tape.add(ab, ba)?)
}

/// Transposed (and optionally softmaxed, column-normalised) view of an
/// `N x C` output: row `c` of the result is column `c` of the input.
fn cluster_columns(tape: &mut Tape, x: Var, cfg: &ContrastiveConfig) -> Result<Var> {
    let y = if cfg.cluster_softmax {
        tape.softmax(x, 1)?
    } else {
        x
    };
    let yt = tape.transpose(y)?;
    Ok(if cfg.normalize_cols {
        tape.l2_normalize(yt, 1)?
    } else {
        yt
    })
}

/// Column-wise contrast between two student outputs: column `c` of view a
/// against the same column of view b, other columns as negatives.
pub fn cluster_contrastive_loss(
    tape: &mut Tape,
    student_a: Var,
    student_b: Var,
    cfg: &ContrastiveConfig,
) -> Result<Var> {
    let (_, c) = check_pair(tape, student_a, student_b, "cluster_contrastive_loss")?;
    if c < 2 {
        return Err(SlicerError::InvalidInput(format!(
            "cluster loss needs at least 2 columns, got {c}"
        )));
    }
    let ya = cluster_columns(tape, student_a, cfg)?;
    let yb = cluster_columns(tape, student_b, cfg)?;
    info_nce_core(tape, ya, yb, cfg.tau, cfg.num_negatives, false)
}

/// `ln C - H(p)` where `p` is the batch-mean row softmax.
fn assignment_entropy_gap(tape: &mut Tape, x: Var) -> Result<Var> {
    let c = tape.value(x).shape()[1] as f64;
    let p = tape.softmax(x, 1)?;
    let mean = tape.mean(p, 0)?;
    let logm = tape.log(mean)?;
    let plogp = tape.mul(mean, logm)?;
    let neg_h = tape.sum(plogp)?;
    Ok(tape.shift(neg_h, c.ln())?)
}

/// The objective and the values of its parts.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub instance: f64,
    pub cluster: f64,
    pub entropy: f64,
}

/// `w_instance * instance + w_cluster * cluster (+ entropy term)`; disabled
/// terms are not evaluated and contribute 0.
pub fn total_loss(
    tape: &mut Tape,
    student_a: Var,
    student_b: Var,
    teacher_a: Var,
    teacher_b: Var,
    cfg: &ContrastiveConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    let mut parts = Vec::new();
    let (mut instance, mut cluster, mut entropy) = (0.0, 0.0, 0.0);
    if cfg.instance_enabled() {
        let l = if cfg.symmetric {
            symmetric_instance_loss(tape, student_a, student_b, teacher_a, teacher_b, cfg)?
        } else {
            instance_info_nce(tape, student_a, teacher_b, cfg)?
        };
        instance = tape.value(l).item();
        parts.push(tape.scale(l, cfg.w_instance)?);
    }
    if cfg.cluster_enabled() {
        let l = cluster_contrastive_loss(tape, student_a, student_b, cfg)?;
        cluster = tape.value(l).item();
        parts.push(tape.scale(l, cfg.w_cluster)?);
    }
    if cfg.entropy_weight > 0.0 {
        let ea = assignment_entropy_gap(tape, student_a)?;
        let eb = assignment_entropy_gap(tape, student_b)?;
        let e = tape.add(ea, eb)?;
        entropy = tape.value(e).item();
        parts.push(tape.scale(e, cfg.entropy_weight)?);
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    Ok(LossTerms {
        total,
        instance,
        cluster,
        entropy,
    })
}

/// Evaluates a loss on plain tensors without recording.
pub fn eval_loss(
    inputs: &[&Tensor],
    f: impl FnOnce(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}
