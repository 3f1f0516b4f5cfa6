//! Mask construction: which table entries are hidden from the model, and
//! which of them are scored by the training loss.
//!
//! Evaluation-split target entries are always masked. Training-row entries
//! are selected stochastically once per pass (probabilities `p_feature` /
//! `p_target`); a selected entry is masked out with probability 0.9 and
//! randomized with probability 0.1, and either way joins the loss set.
//! `Context` rows and missing cells are exempt from everything: context
//! rows stay fully revealed, missing cells stay permanently hidden.

use crate::data::{Cell, DataTable, Role};
use crate::embedding::{ColumnStats, FittedSchema};
use crate::error::{NptError, Result};
use crate::rng::DeterministicRng;

/// Per-pass mask state. `bits` is the n x d mask matrix (true = hidden at
/// input). `loss` marks the entries the *training* loss scores this pass:
/// stochastically masked-out or randomized training-row entries only.
/// Evaluation metrics instead score the always-masked val/test targets,
/// which deliberately never carry a loss flag; their true values must not
/// feed gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    n: usize,
    d: usize,
    bits: Vec<bool>,
    loss: Vec<bool>,
}

impl MaskMatrix {
    pub fn new(n: usize, d: usize) -> Self {
        MaskMatrix {
            n,
            d,
            bits: vec![false; n * d],
            loss: vec![false; n * d],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n && j < self.d);
        i * self.d + j
    }

    pub fn bit(&self, i: usize, j: usize) -> bool {
        self.bits[self.idx(i, j)]
    }

    pub fn set_bit(&mut self, i: usize, j: usize, v: bool) {
        let at = self.idx(i, j);
        self.bits[at] = v;
    }

    pub fn loss_at(&self, i: usize, j: usize) -> bool {
        self.loss[self.idx(i, j)]
    }

    pub fn set_loss(&mut self, i: usize, j: usize, v: bool) {
        let at = self.idx(i, j);
        self.loss[at] = v;
    }

    /// Loss entries in row-major order.
    pub fn loss_entries(&self) -> Vec<(usize, usize)> {
        (0..self.n * self.d)
            .filter(|&at| self.loss[at])
            .map(|at| (at / self.d, at % self.d))
            .collect()
    }

    /// Restriction to the given rows, in order.
    pub fn subset(&self, rows: &[usize]) -> MaskMatrix {
        let mut out = MaskMatrix::new(rows.len(), self.d);
        for (new, &old) in rows.iter().enumerate() {
            for j in 0..self.d {
                out.bits[new * self.d + j] = self.bits[old * self.d + j];
                out.loss[new * self.d + j] = self.loss[old * self.d + j];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Exactly one target column; evaluation-split targets hidden.
    Supervised,
    /// No distinguished targets: the objective is filling in hidden
    /// features, so only stochastic and missing-value masks apply.
    Imputation,
    /// Supervised, but training rows may lack labels; those are simply
    /// permanent missing-value masks.
    SemiSupervised,
}

#[derive(Debug, Clone, Copy)]
pub struct MaskConfig {
    pub p_feature: f64,
    pub p_target: f64,
    pub mode: MaskMode,
    /// Of the selected entries, the fraction hidden outright...
    pub mask_token_prob: f64,
    /// ...and the fraction replaced by a random in-distribution value.
    pub randomize_prob: f64,
}

impl MaskConfig {
    pub fn new(p_feature: f64, p_target: f64, mode: MaskMode) -> Self {
        MaskConfig {
            p_feature,
            p_target,
            mode,
            mask_token_prob: 0.9,
            randomize_prob: 0.1,
        }
    }

    /// Evaluation passes reveal every training value and hide only the
    /// deterministic masks (val/test targets, missing cells).
    pub fn eval(mode: MaskMode) -> Self {
        MaskConfig::new(0.0, 0.0, mode)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_feature", self.p_feature),
            ("p_target", self.p_target),
            ("mask_token_prob", self.mask_token_prob),
            ("randomize_prob", self.randomize_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(NptError::config(format!("{name} = {p} is not a probability")));
            }
        }
        if (self.mask_token_prob + self.randomize_prob - 1.0).abs() > 1e-12 {
            return Err(NptError::config(
                "mask_token_prob and randomize_prob must sum to 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// What happened to one candidate entry.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskAction {
    Keep,
    MaskOut,
    /// Replacement value: uniform over the fitted vocabulary for
    /// categorical columns, mean + std * N(0,1) for continuous ones
    /// (a standard normal draw in standardized space).
    Randomize(Cell),
}

/// Select entries with their column's probability and split the selected
/// ones 90/10 into mask-out vs randomize. One rng draw sequence, in entry
/// order, so realizations are reproducible.
pub fn apply_stochastic_mask(
    entries: &[(usize, usize)],
    config: &MaskConfig,
    fitted: &FittedSchema,
    rng: &mut DeterministicRng,
) -> Result<Vec<MaskAction>> {
    config.validate()?;
    let mut actions = Vec::with_capacity(entries.len());
    for &(_, j) in entries {
        let is_target = fitted.schema.columns[j].target && config.mode != MaskMode::Imputation;
        let p = if is_target { config.p_target } else { config.p_feature };
        if !rng.bernoulli(p) {
            actions.push(MaskAction::Keep);
            continue;
        }
        if rng.bernoulli(config.mask_token_prob) {
            actions.push(MaskAction::MaskOut);
        } else {
            let replacement = match &fitted.stats[j] {
                ColumnStats::Categorical { vocab } => {
                    Cell::Cat(vocab[rng.below(vocab.len() as u64) as usize].clone())
                }
                ColumnStats::Continuous { mean, std } => Cell::Num(mean + std * rng.normal()),
            };
            actions.push(MaskAction::Randomize(replacement));
        }
    }
    Ok(actions)
}

/// Build one pass's realized input table and mask matrix.
///
/// Deterministic part: missing cells are hidden with no loss; in the
/// supervised and semi-supervised modes, val/test target entries are
/// hidden with no loss. Stochastic part: training-row entries go through
/// [`apply_stochastic_mask`]; context rows are untouched.
pub fn build_task_masks(
    table: &DataTable,
    fitted: &FittedSchema,
    config: &MaskConfig,
    rng: &mut DeterministicRng,
) -> Result<(DataTable, MaskMatrix)> {
    config.validate()?;
    let (n, d) = (table.n(), table.d());
    let mut x = table.clone();
    let mut mask = MaskMatrix::new(n, d);

    for i in 0..n {
        for j in 0..d {
            if table.cell(i, j).is_missing() {
                mask.set_bit(i, j, true);
            }
        }
    }

    if matches!(config.mode, MaskMode::Supervised | MaskMode::SemiSupervised) {
        let target = fitted.schema.single_target()?;
        for i in 0..n {
            if matches!(table.roles[i], Role::Val | Role::Test) {
                mask.set_bit(i, target, true);
            }
        }
    }

    let mut entries = Vec::new();
    for i in 0..n {
        if table.roles[i] != Role::Train {
            continue;
        }
        for j in 0..d {
            if !table.cell(i, j).is_missing() {
                entries.push((i, j));
            }
        }
    }
    let actions = apply_stochastic_mask(&entries, config, fitted, rng)?;
    for (&(i, j), action) in entries.iter().zip(&actions) {
        match action {
            MaskAction::Keep => {}
            MaskAction::MaskOut => {
                mask.set_bit(i, j, true);
                mask.set_loss(i, j, true);
            }
            MaskAction::Randomize(cell) => {
                x.rows[i][j] = cell.clone();
                mask.set_loss(i, j, true);
            }
        }
    }
    Ok((x, mask))
}
