//! The assembled model: input embedding, an even stack of attention
//! blocks alternating between-datapoint and between-attribute attention
//! (datapoints first), per-column readout, and the masked-entry objective
//!
//! ```text
//! loss = (1 - lambda) * mean target NLL + lambda * mean feature NLL
//! ```
//!
//! with lambda cosine-annealed from 1 (all feature reconstruction) to 0
//! (all target prediction) over training.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::attention::{aba, abd, AttentionMaps, AttnContext, MhsaParams};
use crate::data::DataTable;
use crate::embedding::{input_embed, output_embed, ColumnStats, EmbedParams, FittedSchema};
use crate::error::{NptError, Result};
use crate::masking::{MaskConfig, MaskMatrix, MaskMode};
use crate::rng::DeterministicRng;
use crate::tensor::{Scalar, Tensor};
use crate::Mode;

/// Trade-off schedule for the feature-loss weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaKind {
    /// 1/2 (1 + cos(pi t / T)): starts at 1, ends at 0.
    Cosine,
    Constant(f64),
}

/// Architecture and optimization hyperparameters. Deserialized from JSON
/// config files with unknown keys rejected; omitted keys take defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Total attention blocks; even, alternating datapoint/attribute.
    pub layers: usize,
    pub heads: usize,
    /// Per-attribute embedding width.
    pub e: usize,
    pub dropout: f64,
    pub p_feature: f64,
    pub p_target: f64,
    pub mask_mode: MaskMode,
    pub lambda: LambdaKind,
    pub lr: f64,
    /// Total optimizer steps.
    pub steps: usize,
    /// Fraction of steps at the base learning rate before cosine decay.
    pub flat_frac: f64,
    /// Rows per training batch; 0 = the whole table at once.
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Replace every between-datapoint block with the identity, leaving a
    /// purely parametric per-row model.
    pub ablate_abd: bool,
    pub capture_attention: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            layers: 4,
            heads: 2,
            e: 16,
            dropout: 0.1,
            p_feature: 0.15,
            p_target: 0.5,
            mask_mode: MaskMode::Supervised,
            lambda: LambdaKind::Cosine,
            lr: 1e-3,
            steps: 400,
            flat_frac: 0.7,
            batch_size: 0,
            clip_norm: 1.0,
            seed: 0,
            ablate_abd: false,
            capture_attention: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)
            .map_err(|e| NptError::config(format!("bad run config: {e}")))?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Validate against a table with `d` columns.
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.layers == 0 || self.layers % 2 != 0 {
            return Err(NptError::config(format!(
                "layers = {} must be a positive even number",
                self.layers
            )));
        }
        if self.heads == 0 || self.e % self.heads != 0 || (d * self.e) % self.heads != 0 {
            return Err(NptError::config(format!(
                "heads = {} must divide e = {} and d*e = {}",
                self.heads,
                self.e,
                d * self.e
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NptError::config(format!("dropout = {} not in [0, 1)", self.dropout)));
        }
        if self.lr <= 0.0 || self.steps == 0 || self.clip_norm <= 0.0 {
            return Err(NptError::config(
                "lr, steps and clip_norm must be positive".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.flat_frac) {
            return Err(NptError::config(format!("flat_frac = {} not in [0, 1]", self.flat_frac)));
        }
        if let LambdaKind::Constant(v) = self.lambda {
            if !(0.0..=1.0).contains(&v) {
                return Err(NptError::config(format!("constant lambda = {v} not in [0, 1]")));
            }
        }
        self.mask_config().validate()
    }

    pub fn mask_config(&self) -> MaskConfig {
        MaskConfig::new(self.p_feature, self.p_target, self.mask_mode)
    }
}

/// All learnable weights plus the bookkeeping the forward pass needs.
#[derive(Clone)]
pub struct NptParams<T: Scalar = f32> {
    pub embed: EmbedParams<T>,
    /// Even slots attend between datapoints (width d*e), odd slots between
    /// attributes (width e).
    pub layers: Vec<MhsaParams<T>>,
    pub dropout: f64,
    pub ablate_abd: bool,
    pub step: u64,
}

impl<T: Scalar> NptParams<T> {
    pub fn init(fitted: FittedSchema, config: &RunConfig, rng: &mut DeterministicRng) -> Result<Self> {
        let d = fitted.schema.d();
        config.validate(d)?;
        let embed = EmbedParams::init(fitted, config.e, rng)?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let width = if l % 2 == 0 { d * config.e } else { config.e };
            layers.push(MhsaParams::init(width, config.heads, rng)?);
        }
        Ok(NptParams {
            embed,
            layers,
            dropout: config.dropout,
            ablate_abd: config.ablate_abd,
            step: 0,
        })
    }

    /// Stable (name, tensor) enumeration over every learnable weight.
    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = self.embed.named();
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named(&format!("layer.{l}")));
        }
        out
    }

    /// Mutable slots in [`NptParams::named`] order.
    pub fn slots_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.embed.slots_mut();
        for layer in self.layers.iter_mut() {
            out.extend(layer.slots_mut());
        }
        out
    }

    /// Overwrite weights from (name, shape, data) triples, e.g. a loaded
    /// checkpoint. Every parameter must be covered exactly once.
    pub fn assign_named(&mut self, tensors: &[(String, Vec<usize>, Vec<T>)]) -> Result<()> {
        let order: Vec<String> = self.named().into_iter().map(|(n, _)| n).collect();
        let slots = self.slots_mut();
        if tensors.len() != order.len() {
            return Err(NptError::data(format!(
                "checkpoint holds {} tensors, model has {}",
                tensors.len(),
                order.len()
            )));
        }
        for ((name, shape, data), (want, slot)) in
            tensors.iter().zip(order.iter().zip(slots.into_iter()))
        {
            if name != want {
                return Err(NptError::data(format!(
                    "tensor {name:?} out of order; expected {want:?}"
                )));
            }
            if shape != slot.shape() {
                return Err(NptError::data(format!(
                    "tensor {name:?} has shape {shape:?}, model expects {:?}",
                    slot.shape()
                )));
            }
            *slot = Tensor::param(shape, data.clone())?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.named()
            .iter()
            .all(|(_, t)| t.data().iter().all(|v| v.is_finite()))
    }
}

/// Run the model on one realized batch. Returns per-column predictions
/// (`[n, e_j]` each) and, when requested, the attention maps of every
/// layer and head.
pub fn forward<T: Scalar>(
    x_input: &DataTable,
    mask: &MaskMatrix,
    params: &NptParams<T>,
    mode: Mode,
    rng: &mut DeterministicRng,
    capture_attention: bool,
) -> Result<(Vec<Tensor<T>>, Option<AttentionMaps>)> {
    if mask.n() != x_input.n() || mask.d() != x_input.d() {
        return Err(NptError::shape(format!(
            "mask is {}x{}, table is {}x{}",
            mask.n(),
            mask.d(),
            x_input.n(),
            x_input.d()
        )));
    }
    let mut maps = capture_attention.then(AttentionMaps::default);
    let mut h = input_embed(x_input, mask, &params.embed)?;
    for (l, layer) in params.layers.iter().enumerate() {
        let between_datapoints = l % 2 == 0;
        if between_datapoints && params.ablate_abd {
            continue;
        }
        let mut ctx = AttnContext {
            mode,
            attn_dropout: params.dropout,
            hidden_dropout: params.dropout,
            rng,
            capture: maps.as_mut(),
            layer: l,
        };
        h = if between_datapoints {
            abd(&h, layer, &mut ctx)?
        } else {
            aba(&h, layer, &mut ctx)?
        };
    }
    let z = output_embed(&h, &params.embed)?;
    Ok((z, maps))
}

/// Mean negative log likelihood over one group of loss entries, as a
/// differentiable scalar: cross-entropy for categorical columns, half
/// squared error in standardized units for continuous ones.
fn group_nll<T: Scalar>(
    z: &[Tensor<T>],
    x_true: &DataTable,
    fitted: &FittedSchema,
    entries: &[(usize, usize)],
) -> Result<Tensor<T>> {
    let n = x_true.n();
    let mut by_col: Vec<Vec<usize>> = vec![Vec::new(); x_true.d()];
    for &(i, j) in entries {
        by_col[j].push(i);
    }
    let mut total: Option<Tensor<T>> = None;
    for (j, rows) in by_col.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let term = match &fitted.stats[j] {
            ColumnStats::Continuous { .. } => {
                let mut truth = vec![T::ZERO; n];
                let mut pick = vec![T::ZERO; n];
                for &i in rows {
                    let v = x_true.cell(i, j).as_num().ok_or_else(|| {
                        NptError::internal(format!("loss entry ({i}, {j}) is not numeric"))
                    })?;
                    truth[i] = T::from_f64(fitted.standardize(j, v)?);
                    pick[i] = T::ONE;
                }
                let truth = Tensor::from_vec(&[n, 1], truth)?;
                let pick = Tensor::from_vec(&[n, 1], pick)?;
                let diff = z[j].sub(&truth)?;
                diff.mul(&diff)?.scale(T::from_f64(0.5)).mul(&pick)?.sum_all()
            }
            ColumnStats::Categorical { .. } => {
                let c = fitted.encoded_width(j);
                let mut pick = vec![T::ZERO; n * c];
                for &i in rows {
                    let label = x_true.cell(i, j).as_cat().ok_or_else(|| {
                        NptError::internal(format!("loss entry ({i}, {j}) is not categorical"))
                    })?;
                    pick[i * c + fitted.cat_index(j, label)?] = T::ONE;
                }
                let pick = Tensor::from_vec(&[n, c], pick)?;
                let logp = z[j].log_softmax_last()?;
                logp.mul(&pick)?.sum_all().scale(T::from_f64(-1.0))
            }
        };
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    let total = total.ok_or_else(|| NptError::internal("group_nll called with no entries"))?;
    Ok(total.scale(T::from_f64(1.0 / entries.len() as f64)))
}

/// The masked-entry objective. Loss entries come from the mask matrix and
/// are partitioned by the schema's target flags; each side is a mean NLL
/// over its own entries. A side whose entry set is empty contributes 0
/// (with a warning when its weight is nonzero).
pub fn npt_loss<T: Scalar>(
    z: &[Tensor<T>],
    x_true: &DataTable,
    mask: &MaskMatrix,
    lambda: f64,
    fitted: &FittedSchema,
) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(NptError::config(format!("lambda = {lambda} not in [0, 1]")));
    }
    let entries = mask.loss_entries();
    if entries.is_empty() {
        return Err(NptError::data(
            "no loss entries were selected this pass; nothing to score".to_string(),
        ));
    }
    let (targets, features): (Vec<_>, Vec<_>) = entries
        .into_iter()
        .partition(|&(_, j)| fitted.schema.columns[j].target);

    let mut loss: Option<Tensor<T>> = None;
    let mut add_side = |weight: f64, entries: &[(usize, usize)], name: &str| -> Result<()> {
        if weight == 0.0 {
            return Ok(());
        }
        if entries.is_empty() {
            log::warn!("{name} loss has weight {weight} but no entries this pass; contributing 0");
            return Ok(());
        }
        let term = group_nll(z, x_true, fitted, entries)?.scale(T::from_f64(weight));
        loss = Some(match loss.take() {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
        Ok(())
    };
    add_side(1.0 - lambda, &targets, "target")?;
    add_side(lambda, &features, "feature")?;
    match loss {
        Some(l) => Ok(l),
        // Both weighted sides were empty; the loss is exactly 0.
        None => Ok(Tensor::from_vec(&[1], vec![T::ZERO])?),
    }
}

/// Feature-loss weight at `step` of `total`.
pub fn tradeoff_lambda(step: u64, total: u64, kind: LambdaKind) -> f64 {
    match kind {
        LambdaKind::Constant(v) => v,
        LambdaKind::Cosine => {
            if total == 0 {
                return 0.0;
            }
            let t = (step.min(total)) as f64 / total as f64;
            0.5 * (1.0 + (PI * t).cos())
        }
    }
}

/// Finite-difference check of the full pipeline: embed, all attention
/// layers, output projections, and the mixed loss, differentiated with
/// respect to every parameter tensor on a small mixed-type table. A
/// `skew` other than 1 deliberately falsifies the analytic gradients so
/// callers can prove the check catches broken gradients.
pub fn full_loss_gradcheck(seed: u64, skew: f64) -> Result<crate::tensor::GradcheckOutcome> {
    use crate::data::Cell;
    use crate::embedding::{AttrKind, AttributeSchema, ColumnDecl};
    use crate::masking::build_task_masks;

    let schema = AttributeSchema {
        columns: vec![
            ColumnDecl { name: "c".to_string(), kind: AttrKind::Categorical, target: false },
            ColumnDecl { name: "x".to_string(), kind: AttrKind::Continuous, target: false },
            ColumnDecl { name: "y".to_string(), kind: AttrKind::Continuous, target: true },
        ],
    };
    let mut rng = DeterministicRng::new(seed);
    let labels = ["a", "b"];
    let rows: Vec<Vec<Cell>> = (0..4)
        .map(|i| {
            vec![
                Cell::Cat(labels[i % 2].to_string()),
                Cell::Num(rng.normal()),
                Cell::Num(rng.normal()),
            ]
        })
        .collect();
    let table = DataTable::new(schema, rows)?;
    let fitted = FittedSchema::fit(&table)?;
    let config = RunConfig {
        layers: 2,
        heads: 2,
        e: 4,
        p_feature: 0.5,
        p_target: 0.9,
        ..RunConfig::default()
    };
    let skeleton = NptParams::<f64>::init(fitted.clone(), &config, &mut rng)?;
    let (x_input, mask) = build_task_masks(&table, &fitted, &config.mask_config(), &mut rng)?;
    if mask.loss_entries().is_empty() {
        return Err(NptError::internal(
            "gradcheck mask drew no loss entries; change the seed",
        ));
    }

    let named = skeleton.named();
    let inputs: Vec<(Vec<usize>, Vec<f64>)> = named
        .iter()
        .map(|(_, t)| (t.shape().to_vec(), t.data().to_vec()))
        .collect();
    let f = move |xs: &[Tensor<f64>]| {
        let mut p = skeleton.clone();
        for (slot, x) in p.slots_mut().into_iter().zip(xs) {
            *slot = x.clone();
        }
        let mut rng = DeterministicRng::new(0);
        let (z, _) = forward(&x_input, &mask, &p, Mode::Eval, &mut rng, false)?;
        npt_loss(&z, &table, &mask, 0.35, &fitted)
    };
    crate::tensor::gradcheck_skewed(f, &inputs, crate::tensor::GRADCHECK_H, skew)
}
