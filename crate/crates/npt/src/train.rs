//! Training loop and role-scoped evaluation.
//!
//! One optimizer step consumes one batch. Masks are resampled once per
//! epoch on the full table and batches are cut from that realization, so
//! every row sees many different mask patterns over a run. All
//! stochasticity is scoped to independent rng streams forked from the
//! config seed: parameter init, masking, batch shuffles, and dropout
//! never perturb each other's draws.

use std::collections::VecDeque;
use std::io::Write;

use serde::Serialize;

use crate::data::{DataTable, Role};
use crate::embedding::{AttrKind, FittedSchema};
use crate::error::{NptError, Result};
use crate::masking::{build_task_masks, MaskConfig};
use crate::model::{forward, npt_loss, tradeoff_lambda, NptParams, RunConfig};
use crate::optim::{lr_at, LambHyper, Optimizer};
use crate::rng::DeterministicRng;
use crate::tensor::Scalar;
use crate::Mode;

const STREAM_INIT: u64 = 1;
const STREAM_MASK: u64 = 2;
const STREAM_BATCH: u64 = 3;
const STREAM_DROPOUT: u64 = 4;
const STREAM_EVAL: u64 = 5;

/// One line of the JSONL metrics stream.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub lambda: f64,
    pub lr: f64,
    /// None when the batch held no loss entries and the step was skipped.
    pub train_loss: Option<f64>,
    /// Mean target NLL on validation rows; reported at epoch boundaries.
    pub val_target_loss: Option<f64>,
    pub epoch: u64,
}

/// Target-column metrics for the rows of one role, in row order.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub role: Role,
    pub n: usize,
    /// Mean target NLL (squared-error form for continuous targets,
    /// cross-entropy for categorical), in standardized units.
    pub nll: f64,
    pub rmse_std: Option<f64>,
    pub rmse_raw: Option<f64>,
    pub accuracy: Option<f64>,
    pub rows: Vec<usize>,
    /// Standardized predictions (continuous targets only).
    pub pred_std: Vec<f64>,
    pub truth_std: Vec<f64>,
}

pub struct TrainResult {
    pub params: NptParams<f32>,
    pub metrics: Vec<MetricsRow>,
}

/// Train a fresh model on `table` under `config`. Metrics rows go to
/// `sink` as JSONL while training runs and are also returned in memory.
pub fn train(
    table: &DataTable,
    config: &RunConfig,
    mut sink: Option<&mut dyn Write>,
) -> Result<TrainResult> {
    config.validate(table.d())?;
    let fitted = FittedSchema::fit(table)?;
    let root = DeterministicRng::new(config.seed);
    let mut init_rng = root.fork(STREAM_INIT);
    let mut mask_rng = root.fork(STREAM_MASK);
    let mut batch_rng = root.fork(STREAM_BATCH);
    let mut drop_rng = root.fork(STREAM_DROPOUT);

    let mut params: NptParams<f32> = NptParams::init(fitted.clone(), config, &mut init_rng)?;
    let mut opt = Optimizer::new(
        LambHyper {
            clip_norm: config.clip_norm,
            ..LambHyper::default()
        },
        &params.named(),
    );

    let has_val = !table.rows_with_role(Role::Val).is_empty();
    let mask_config = config.mask_config();
    let total = config.steps as u64;
    let mut metrics = Vec::with_capacity(config.steps);
    let mut queue: VecDeque<Vec<usize>> = VecDeque::new();
    let mut realization: Option<(DataTable, crate::masking::MaskMatrix)> = None;
    let mut epoch: u64 = 0;

    for step in 0..total {
        if queue.is_empty() {
            realization = Some(build_task_masks(table, &fitted, &mask_config, &mut mask_rng)?);
            queue = make_train_batches(table, config.batch_size, &mut batch_rng)?;
            epoch += 1;
        }
        let idx = queue.pop_front().expect("queue refilled above");
        let (x_epoch, m_epoch) = realization.as_ref().expect("realization set above");
        let xb = x_epoch.subset(&idx)?;
        let mb = m_epoch.subset(&idx);
        let lambda = tradeoff_lambda(step, total, config.lambda);
        let lr = lr_at(step, total, config.lr, config.flat_frac);

        let train_loss = if mb.loss_entries().is_empty() {
            None
        } else {
            let truth = table.subset(&idx)?;
            let (z, _) = forward(&xb, &mb, &params, Mode::Train, &mut drop_rng, false)?;
            let loss = npt_loss(&z, &truth, &mb, lambda, &fitted)?;
            let value = loss.item()?.to_f64();
            if !value.is_finite() {
                return Err(NptError::internal(format!(
                    "training loss became non-finite at step {step}"
                )));
            }
            loss.backward()?;
            let named = params.named();
            let mut grads: Vec<Vec<f32>> = named.iter().map(|(_, t)| t.grad()).collect();
            for (_, t) in &named {
                t.clear_grad();
            }
            opt.step(&mut params.slots_mut(), &mut grads, lr)?;
            params.step += 1;
            Some(value)
        };

        let epoch_end = queue.is_empty() || step + 1 == total;
        let val_target_loss = if epoch_end && has_val {
            Some(evaluate(&params, config, table, Role::Val)?.nll)
        } else {
            None
        };

        let row = MetricsRow {
            step,
            lambda,
            lr,
            train_loss,
            val_target_loss,
            epoch,
        };
        if let Some(w) = sink.as_deref_mut() {
            serde_json::to_writer(&mut *w, &row)
                .map_err(|e| NptError::internal(format!("metrics serialization: {e}")))?;
            writeln!(w)?;
        }
        metrics.push(row);
    }

    Ok(TrainResult { params, metrics })
}

fn make_train_batches(
    table: &DataTable,
    batch_size: usize,
    rng: &mut DeterministicRng,
) -> Result<VecDeque<Vec<usize>>> {
    Ok(crate::data::make_batches(table, batch_size, Mode::Train, rng)?.into())
}

/// Forward the whole table under the deterministic evaluation mask and
/// collect each row's output vector for the single target column.
/// `batch_size` 0 runs one full-table batch.
fn forward_target_outputs<T: Scalar>(
    params: &NptParams<T>,
    config: &RunConfig,
    table: &DataTable,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let fitted = &params.embed.fitted;
    let target = fitted.schema.single_target()?;
    let root = DeterministicRng::new(config.seed);
    let mut eval_rng = root.fork(STREAM_EVAL);
    let batches = crate::data::make_batches(table, batch_size, Mode::Eval, &mut eval_rng)?;
    let mut out: Vec<Vec<f64>> = vec![Vec::new(); table.n()];
    for idx in &batches {
        let sub = table.subset(idx)?;
        let (x, mask) =
            build_task_masks(&sub, fitted, &MaskConfig::eval(config.mask_mode), &mut eval_rng)?;
        let mut rng = eval_rng.fork(0);
        let (z, _) = forward(&x, &mask, params, Mode::Eval, &mut rng, false)?;
        let zt = &z[target];
        let width = zt.shape()[1];
        let data = zt.data();
        for (pos, &row) in idx.iter().enumerate() {
            out[row] = data[pos * width..(pos + 1) * width]
                .iter()
                .map(|v| v.to_f64())
                .collect();
        }
    }
    Ok(out)
}

/// Standardized target prediction for every row (continuous targets).
/// `batch_size` 0 lets the whole table attend at once; callers that care
/// about matching the training regime pass the configured batch size.
pub fn target_predictions<T: Scalar>(
    params: &NptParams<T>,
    config: &RunConfig,
    table: &DataTable,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let fitted = &params.embed.fitted;
    let target = fitted.schema.single_target()?;
    if fitted.schema.columns[target].kind != AttrKind::Continuous {
        return Err(NptError::config(
            "target predictions require a continuous target column",
        ));
    }
    let outputs = forward_target_outputs(params, config, table, batch_size)?;
    Ok(outputs.into_iter().map(|v| v[0]).collect())
}

/// Score the target column on the rows of one role. The table is
/// evaluated at the configured batch size, the regime the model was
/// trained in; batch mates act as support with val/test targets masked.
pub fn evaluate<T: Scalar>(
    params: &NptParams<T>,
    config: &RunConfig,
    table: &DataTable,
    role: Role,
) -> Result<EvalReport> {
    let fitted = &params.embed.fitted;
    let target = fitted.schema.single_target()?;
    let continuous = fitted.schema.columns[target].kind == AttrKind::Continuous;
    let outputs = forward_target_outputs(params, config, table, config.batch_size)?;

    let mut rows = Vec::new();
    let mut pred_std = Vec::new();
    let mut truth_std = Vec::new();
    let mut nll_sum = 0.0;
    let mut hits = 0usize;
    for row in table.rows_with_role(role) {
        let cell = table.cell(row, target);
        if cell.is_missing() {
            continue;
        }
        let z = &outputs[row];
        if continuous {
            let raw = cell
                .as_num()
                .ok_or_else(|| NptError::internal(format!("row {row}: non-numeric target")))?;
            let truth = fitted.standardize(target, raw)?;
            let pred = z[0];
            nll_sum += 0.5 * (pred - truth) * (pred - truth);
            rows.push(row);
            pred_std.push(pred);
            truth_std.push(truth);
        } else {
            let label = cell
                .as_cat()
                .ok_or_else(|| NptError::internal(format!("row {row}: non-categorical target")))?;
            let truth_idx = fitted.cat_index(target, label)?;
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            nll_sum += lse - z[truth_idx];
            let mut arg = 0;
            for (c, &v) in z.iter().enumerate() {
                if v > z[arg] {
                    arg = c;
                }
            }
            if arg == truth_idx {
                hits += 1;
            }
            rows.push(row);
        }
    }

    let n = rows.len();
    if n == 0 {
        return Err(NptError::data(format!(
            "no scorable rows with role {role:?} and a present target"
        )));
    }
    let (rmse_std, rmse_raw, accuracy) = if continuous {
        let mse = pred_std
            .iter()
            .zip(&truth_std)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n as f64;
        let (_, std) = fitted.continuous_stats(target)?;
        (Some(mse.sqrt()), Some(mse.sqrt() * std), None)
    } else {
        (None, None, Some(hits as f64 / n as f64))
    };

    Ok(EvalReport {
        role,
        n,
        nll: nll_sum / n as f64,
        rmse_std,
        rmse_raw,
        accuracy,
        rows,
        pred_std,
        truth_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_duplication_task, split_rows, synth_regression, Variant};

    fn duplication_table(n: usize, seed: u64) -> DataTable {
        let mut rng = DeterministicRng::new(seed);
        let mut table = synth_regression(n, 5, 0.9, &mut rng).unwrap();
        let roles = split_rows(n, (0.6, 0.2, 0.2), seed).unwrap();
        table.set_roles(roles).unwrap();
        make_duplication_task(&table, Variant::Plain, &mut rng).unwrap()
    }

    fn tiny_config(steps: usize, seed: u64) -> RunConfig {
        serde_json::from_str(&format!(
            r#"{{"layers": 2, "heads": 2, "e": 8, "steps": {steps},
                 "lr": 0.003, "seed": {seed}}}"#
        ))
        .unwrap()
    }

    #[test]
    fn training_reduces_the_loss() {
        let table = duplication_table(32, 11);
        let config = tiny_config(80, 3);
        let result = train(&table, &config, None).unwrap();
        let losses: Vec<f64> = result.metrics.iter().filter_map(|m| m.train_loss).collect();
        assert!(losses.len() > 20);
        let head = losses[..5].iter().sum::<f64>() / 5.0;
        let tail = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(
            tail < 0.6 * head,
            "loss did not drop: first 5 avg {head}, last 5 avg {tail}"
        );
    }

    #[test]
    fn same_seed_reproduces_parameters_bitwise() {
        let table = duplication_table(24, 5);
        let config = tiny_config(20, 9);
        let a = train(&table, &config, None).unwrap();
        let b = train(&table, &config, None).unwrap();
        for ((name_a, ta), (_, tb)) in a.params.named().iter().zip(b.params.named().iter()) {
            let bits_a: Vec<u32> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "tensor {name_a} differs between runs");
        }
        let other = tiny_config(20, 10);
        let c = train(&table, &other, None).unwrap();
        let pa: Vec<u32> = a.params.named()[0].1.data().iter().map(|v| v.to_bits()).collect();
        let pc: Vec<u32> = c.params.named()[0].1.data().iter().map(|v| v.to_bits()).collect();
        assert_ne!(pa, pc, "different seeds should differ");
    }

    #[test]
    fn metrics_stream_is_valid_jsonl() {
        let table = duplication_table(24, 5);
        let config = tiny_config(12, 2);
        let mut buf = Vec::new();
        let result = train(&table, &config, Some(&mut buf)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 12);
        assert_eq!(result.metrics.len(), 12);
        for line in lines {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            for key in ["step", "lambda", "lr", "train_loss", "val_target_loss", "epoch"] {
                assert!(v.get(key).is_some(), "missing {key} in {line}");
            }
        }
        let last = result.metrics.last().unwrap();
        assert!(last.val_target_loss.is_some(), "final step reports val loss");
    }

    #[test]
    fn evaluate_reports_role_scoped_metrics() {
        let table = duplication_table(32, 7);
        let config = tiny_config(30, 4);
        let result = train(&table, &config, None).unwrap();
        let report = evaluate(&result.params, &config, &table, Role::Test).unwrap();
        let test_rows = table.rows_with_role(Role::Test);
        assert_eq!(report.rows, test_rows);
        assert_eq!(report.n, test_rows.len());
        assert_eq!(report.pred_std.len(), report.n);
        assert!(report.rmse_std.unwrap().is_finite());
        assert!(report.rmse_raw.unwrap() >= report.rmse_std.unwrap() * 0.0);
        assert!(report.accuracy.is_none());
        assert!(report.nll.is_finite());

        let preds = target_predictions(&result.params, &config, &table, 0).unwrap();
        assert_eq!(preds.len(), table.n());
        for (k, row) in report.rows.iter().enumerate() {
            assert_eq!(preds[*row], report.pred_std[k], "evaluate and predictions agree");
        }
    }
}
