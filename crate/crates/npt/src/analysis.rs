//! Interaction probes for trained models.
//!
//! These procedures ask whether a model actually uses attention between
//! rows: corrupt every other row and watch the error move, delete rows
//! that don't matter and inspect which ones survive, or permute the rows
//! outright and confirm the outputs permute along. All probes treat the
//! model as read-only; corruption fans out over evaluated rows with
//! per-row rng substreams, so results are identical for any thread count
//! (`NPT_THREADS` caps the fan-out).

use serde::Serialize;

use crate::data::{standardized_features, DataTable};
use crate::embedding::FittedSchema;
use crate::error::{NptError, Result};
use crate::masking::MaskMatrix;
use crate::model::{forward, NptParams, RunConfig};
use crate::rng::DeterministicRng;
use crate::tensor::Scalar;
use crate::train::target_predictions;
use crate::Mode;

/// Knobs for [`deletion_experiment`].
#[derive(Debug, Clone, Copy)]
pub struct DeletionParams {
    /// Hard cap on the relative drift of the prediction; the experiment
    /// stops once a tolerable proposal would exceed it.
    pub delta_max: f64,
    /// Initial drift allowance per accepted proposal.
    pub delta_it: f64,
    /// Consecutive rejections before the allowance grows.
    pub n_max_retry: usize,
    /// Stop once fewer than this fraction of rows remains.
    pub epsilon: f64,
    /// Multiplier applied to the allowance after too many rejections.
    pub growth: f64,
}

impl Default for DeletionParams {
    fn default() -> Self {
        DeletionParams {
            delta_max: 0.1,
            delta_it: 0.01,
            n_max_retry: 50,
            epsilon: 0.02,
            growth: 1.1,
        }
    }
}

impl DeletionParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.delta_max, self.delta_it, self.epsilon, self.growth];
        if positive.iter().any(|v| *v <= 0.0) || self.n_max_retry == 0 {
            return Err(NptError::config(
                "deletion parameters must all be positive",
            ));
        }
        if self.epsilon >= 1.0 {
            return Err(NptError::config("deletion stop fraction must be below 1"));
        }
        Ok(())
    }
}

/// Same run with every between-datapoint attention layer replaced by the
/// identity: a purely parametric per-row network, the no-interaction
/// control.
pub fn parametric_ablation(config: &RunConfig) -> RunConfig {
    let mut ablated = config.clone();
    ablated.ablate_abd = true;
    ablated
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "pearson needs paired samples");
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Probe fan-out width: `NPT_THREADS` if set, else the machine's
/// available parallelism.
pub fn probe_threads() -> usize {
    if let Ok(v) = std::env::var("NPT_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Copy of `table` where, for every column independently, the values of
/// all rows except `k` are permuted among themselves. Row `k` is
/// untouched and every column keeps its exact multiset of values.
fn corrupt_copy(table: &DataTable, k: usize, rng: &mut DeterministicRng) -> DataTable {
    let mut out = table.clone();
    let others: Vec<usize> = (0..table.n()).filter(|&i| i != k).collect();
    for j in 0..table.d() {
        let mut values: Vec<crate::data::Cell> =
            others.iter().map(|&i| table.cell(i, j).clone()).collect();
        rng.shuffle(&mut values);
        for (pos, &i) in others.iter().enumerate() {
            out.rows[i][j] = values[pos].clone();
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct CorruptionOutcome {
    pub rows: Vec<usize>,
    pub clean: Vec<f64>,
    pub corrupted: Vec<f64>,
    pub truth_std: Vec<f64>,
    pub clean_rmse: f64,
    pub corrupted_rmse: f64,
}

impl CorruptionOutcome {
    /// Sign convention: positive means corruption hurt.
    pub fn delta(&self) -> f64 {
        self.corrupted_rmse - self.clean_rmse
    }
}

fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    let n = pred.len().max(1) as f64;
    (pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
        .sqrt()
}

/// For each row `k` in `eval_rows`: permute every column of all other
/// rows (destroying any cross-row structure while preserving column
/// marginals), re-predict, and score row `k`'s target. Standardized
/// units throughout; predictions run at the configured batch size, the
/// same regime the model was trained and cleanly evaluated in.
pub fn corruption_eval<T: Scalar>(
    params: &NptParams<T>,
    config: &RunConfig,
    table: &DataTable,
    eval_rows: &[usize],
    rng: &DeterministicRng,
) -> Result<CorruptionOutcome> {
    let fitted = params.embed.fitted.clone();
    let target = fitted.schema.single_target()?;
    let clean_all = target_predictions(params, config, table, config.batch_size)?;

    let mut truth_std = Vec::with_capacity(eval_rows.len());
    for &k in eval_rows {
        let cell = table.cell(k, target);
        let raw = cell.as_num().ok_or_else(|| {
            NptError::data(format!("row {k} has no numeric target to score"))
        })?;
        truth_std.push(fitted.standardize(target, raw)?);
    }

    let threads = probe_threads().min(eval_rows.len()).max(1);
    let corrupted = if threads <= 1 {
        let mut out = Vec::with_capacity(eval_rows.len());
        for &k in eval_rows {
            let mut sub_rng = rng.fork(k as u64);
            let bad = corrupt_copy(table, k, &mut sub_rng);
            out.push(target_predictions(params, config, &bad, config.batch_size)?[k]);
        }
        out
    } else {
        corruption_fan_out(params, config, table, eval_rows, rng, threads)?
    };

    let clean: Vec<f64> = eval_rows.iter().map(|&k| clean_all[k]).collect();
    Ok(CorruptionOutcome {
        clean_rmse: rmse(&clean, &truth_std),
        corrupted_rmse: rmse(&corrupted, &truth_std),
        rows: eval_rows.to_vec(),
        clean,
        corrupted,
        truth_std,
    })
}

/// Threaded body of [`corruption_eval`]. Each worker rebuilds the
/// parameters from a plain snapshot (tensors are not thread-shareable)
/// and processes a strided slice of the evaluated rows; per-row rng
/// substreams keep the result independent of the thread count.
fn corruption_fan_out<T: Scalar>(
    params: &NptParams<T>,
    config: &RunConfig,
    table: &DataTable,
    eval_rows: &[usize],
    rng: &DeterministicRng,
    threads: usize,
) -> Result<Vec<f64>> {
    let triples = crate::checkpoint::plain_triples(&params.named());
    let fitted = params.embed.fitted.clone();
    let results: Vec<Result<Vec<(usize, f64)>>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for t in 0..threads {
            let triples = &triples;
            let fitted = &fitted;
            let my_rows: Vec<(usize, usize)> = eval_rows
                .iter()
                .cloned()
                .enumerate()
                .skip(t)
                .step_by(threads)
                .collect();
            handles.push(scope.spawn(move || {
                let mut local: NptParams<T> =
                    NptParams::init(fitted.clone(), config, &mut DeterministicRng::new(0))?;
                local.assign_named(triples)?;
                let mut out = Vec::with_capacity(my_rows.len());
                for (pos, k) in my_rows {
                    let mut sub_rng = rng.fork(k as u64);
                    let bad = corrupt_copy(table, k, &mut sub_rng);
                    out.push((pos, target_predictions(&local, config, &bad, config.batch_size)?[k]));
                }
                Ok(out)
            }));
        }
        handles.into_iter().map(|h| h.join().expect("probe worker panicked")).collect()
    });
    let mut merged = vec![0.0; eval_rows.len()];
    for chunk in results {
        for (pos, value) in chunk? {
            merged[pos] = value;
        }
    }
    Ok(merged)
}

/// Iteratively delete rows that barely move the prediction for `i_star`.
///
/// Proposals are drawn uniformly from the remaining rows (never `i_star`).
/// A proposal's drift is measured against the original full-input
/// prediction, `|y' - y| / max(|y|, 1e-8)`; it is accepted while the drift
/// stays under the current allowance, which grows by `growth` after
/// `n_max_retry` consecutive rejections. The walk stops when fewer than
/// `epsilon * n` rows remain or a tolerable proposal would break the
/// `delta_max` total-drift cap. Returns the kept rows including `i_star`,
/// sorted.
pub fn deletion_experiment<T: Scalar>(
    params: &NptParams<T>,
    config: &RunConfig,
    table: &DataTable,
    i_star: usize,
    dp: &DeletionParams,
    rng: &mut DeterministicRng,
) -> Result<Vec<usize>> {
    dp.validate()?;
    let n = table.n();
    if i_star >= n {
        return Err(NptError::config(format!("i_star {i_star} out of range for {n} rows")));
    }
    // Deletion severs duplication pairs by design; drop the links so
    // subsetting one half of a pair is legal.
    let mut t = table.clone();
    t.pair = vec![None; n];

    let predict = |kept_sorted: &[usize]| -> Result<f64> {
        let sub = t.subset(kept_sorted)?;
        let pos = kept_sorted
            .iter()
            .position(|&r| r == i_star)
            .expect("i_star is always kept");
        Ok(target_predictions(params, config, &sub, 0)?[pos])
    };

    let all: Vec<usize> = (0..n).collect();
    let y0 = predict(&all)?;
    let denom = y0.abs().max(1e-8);
    let floor = dp.epsilon * n as f64;

    let mut remaining: Vec<usize> = (0..n).filter(|&i| i != i_star).collect();
    let mut delta_it = dp.delta_it;
    let mut retries = 0usize;
    loop {
        if remaining.is_empty() {
            break;
        }
        let c_pos = rng.below(remaining.len() as u64) as usize;
        let c = remaining[c_pos];
        let mut keep: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&i| i != c)
            .chain(std::iter::once(i_star))
            .collect();
        keep.sort_unstable();
        let change = (predict(&keep)? - y0).abs() / denom;
        if change < delta_it {
            if change < dp.delta_max {
                remaining.remove(c_pos);
                retries = 0;
            } else {
                break;
            }
        } else {
            retries += 1;
        }
        if retries >= dp.n_max_retry {
            delta_it *= dp.growth;
            retries = 0;
        }
        if (remaining.len() as f64) < floor {
            break;
        }
    }

    let mut kept = remaining;
    kept.push(i_star);
    kept.sort_unstable();
    Ok(kept)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DistanceStats {
    pub kept: Option<f64>,
    pub deleted: Option<f64>,
    pub random: Option<f64>,
}

/// Mean squared Euclidean distance in standardized feature space from
/// `i_star` to each given set, plus to a random control set of the same
/// size as `deleted` drawn from all other rows. Empty sets report None.
pub fn deletion_distance_stats(
    table: &DataTable,
    fitted: &FittedSchema,
    i_star: usize,
    kept: &[usize],
    deleted: &[usize],
    rng: &mut DeterministicRng,
) -> Result<DistanceStats> {
    let anchor = &standardized_features(table, fitted, &[i_star])?[0];
    let mean_dist = |rows: &[usize]| -> Result<Option<f64>> {
        if rows.is_empty() {
            return Ok(None);
        }
        let feats = standardized_features(table, fitted, rows)?;
        let total: f64 = feats
            .iter()
            .map(|f| {
                f.iter()
                    .zip(anchor)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum();
        Ok(Some(total / rows.len() as f64))
    };

    let mut pool: Vec<usize> = (0..table.n()).filter(|&i| i != i_star).collect();
    rng.shuffle(&mut pool);
    let control: Vec<usize> = pool.into_iter().take(deleted.len()).collect();

    Ok(DistanceStats {
        kept: mean_dist(kept)?,
        deleted: mean_dist(deleted)?,
        random: mean_dist(&control)?,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SignedRank {
    pub w: f64,
    pub p: f64,
    /// Non-zero differences that entered the statistic.
    pub n: usize,
}

/// Wilcoxon signed-rank test, one-sided with H1: median(a) < median(b).
///
/// Zero differences are dropped; tied magnitudes share average ranks; W
/// sums the ranks of positive differences, so small W supports H1. The
/// p-value uses the normal approximation with tie-corrected variance and
/// a continuity correction. All differences zero is degenerate: p = 1.
pub fn signed_rank_test(pairs: &[(f64, f64)]) -> Result<SignedRank> {
    let diffs: Vec<f64> = pairs
        .iter()
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(SignedRank { w: 0.0, p: 1.0, n: 0 });
    }
    if n < 6 {
        return Err(NptError::data(format!(
            "signed-rank normal approximation needs at least 6 non-zero differences, got {n}"
        )));
    }

    let (ranks, tie_correction) = average_ranks(&diffs);
    let w: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_correction / 48.0;
    if var <= 0.0 {
        return Ok(SignedRank { w, p: 1.0, n });
    }
    let z = (w - mean + 0.5) / var.sqrt();
    let p = 0.5 * libm::erfc(-z / std::f64::consts::SQRT_2);
    Ok(SignedRank { w, p: p.clamp(f64::MIN_POSITIVE, 1.0), n })
}

/// Ranks of |d| (1-based, average for ties) plus the tie-correction term
/// sum(t^3 - t) over tie groups.
fn average_ranks(diffs: &[f64]) -> (Vec<f64>, f64) {
    let n = diffs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        diffs[a]
            .abs()
            .partial_cmp(&diffs[b].abs())
            .expect("non-finite difference in signed-rank input")
    });
    let mut ranks = vec![0.0; n];
    let mut tie_correction = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        let t = (j - i + 1) as f64;
        tie_correction += t * t * t - t;
        i = j + 1;
    }
    (ranks, tie_correction)
}

/// Max over `num_perms` random row permutations of the deviation between
/// the permuted model outputs and the outputs of the permuted inputs.
/// Exact row equivariance makes this 0 up to float reassociation.
pub fn equivariance_check<T: Scalar>(
    params: &NptParams<T>,
    x: &DataTable,
    mask: &MaskMatrix,
    num_perms: usize,
    rng: &mut DeterministicRng,
) -> Result<f64> {
    let mut fwd_rng = rng.fork(u64::MAX);
    let (base, _) = forward(x, mask, params, Mode::Eval, &mut fwd_rng, false)?;
    let mut worst: f64 = 0.0;
    for _ in 0..num_perms {
        let mut perm: Vec<usize> = (0..x.n()).collect();
        rng.shuffle(&mut perm);
        let xp = x.subset(&perm)?;
        let mp = mask.subset(&perm);
        let (out, _) = forward(&xp, &mp, params, Mode::Eval, &mut fwd_rng, false)?;
        for (zp, z) in out.iter().zip(&base) {
            let width = zp.shape()[1];
            let (dp, db) = (zp.data(), z.data());
            for (new_row, &old_row) in perm.iter().enumerate() {
                for c in 0..width {
                    let dev = (dp[new_row * width + c].to_f64()
                        - db[old_row * width + c].to_f64())
                    .abs();
                    worst = worst.max(dev);
                }
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Serialize)]
pub struct DeletionReport {
    pub points: usize,
    pub mean_kept: Option<f64>,
    pub mean_deleted: Option<f64>,
    pub mean_random: Option<f64>,
    pub w: f64,
    pub p: f64,
}

/// JSON payload written by the probe CLI. `delta` is corrupted − clean.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub probe: String,
    pub clean_metric: Option<f64>,
    pub corrupted_metric: Option<f64>,
    pub delta: Option<f64>,
    pub deletion: Option<DeletionReport>,
    pub equivariance_max_dev: Option<f64>,
}

impl ProbeReport {
    pub fn empty(probe: &str) -> Self {
        ProbeReport {
            probe: probe.to_string(),
            clean_metric: None,
            corrupted_metric: None,
            delta: None,
            deletion: None,
            equivariance_max_dev: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_rows, synth_regression, Cell, Role};
    use crate::masking::{build_task_masks, MaskConfig};
    use crate::masking::MaskMode;

    fn probe_table(n: usize, seed: u64) -> DataTable {
        let mut rng = DeterministicRng::new(seed);
        let mut table = synth_regression(n, 3, 0.8, &mut rng).unwrap();
        let roles = split_rows(n, (0.6, 0.2, 0.2), seed).unwrap();
        table.set_roles(roles).unwrap();
        table
    }

    fn tiny_model(table: &DataTable, ablate: bool, seed: u64) -> (NptParams<f32>, RunConfig) {
        let fitted = FittedSchema::fit(table).unwrap();
        let mut config: RunConfig = serde_json::from_str(
            r#"{"layers": 2, "heads": 2, "e": 8, "steps": 10}"#,
        )
        .unwrap();
        config.ablate_abd = ablate;
        config.seed = seed;
        let params = NptParams::init(fitted, &config, &mut DeterministicRng::new(seed)).unwrap();
        (params, config)
    }

    #[test]
    fn corruption_preserves_multisets_and_the_evaluated_row() {
        let table = probe_table(12, 3);
        let k = 5;
        let bad = corrupt_copy(&table, k, &mut DeterministicRng::new(9));
        for j in 0..table.d() {
            assert_eq!(bad.cell(k, j), table.cell(k, j), "row {k} must stay untouched");
            let mut orig: Vec<String> = (0..table.n()).map(|i| format!("{:?}", table.cell(i, j))).collect();
            let mut perm: Vec<String> = (0..table.n()).map(|i| format!("{:?}", bad.cell(i, j))).collect();
            orig.sort();
            perm.sort();
            assert_eq!(orig, perm, "column {j} multiset changed");
        }
        let mut moved = 0;
        for i in 0..table.n() {
            for j in 0..table.d() {
                if bad.cell(i, j) != table.cell(i, j) {
                    moved += 1;
                }
            }
        }
        assert!(moved > 10, "permutation should actually move values, moved {moved}");
    }

    #[test]
    fn row_ignoring_model_sees_zero_corruption_delta() {
        let table = probe_table(16, 5);
        let (params, config) = tiny_model(&table, true, 21);
        let eval_rows = table.rows_with_role(Role::Test);
        let outcome =
            corruption_eval(&params, &config, &table, &eval_rows, &DeterministicRng::new(2))
                .unwrap();
        for (c, k) in outcome.clean.iter().zip(&outcome.corrupted) {
            assert_eq!(c.to_bits(), k.to_bits(), "ablated predictions must be untouched");
        }
        assert_eq!(outcome.delta(), 0.0);
    }

    #[test]
    fn corruption_is_thread_count_invariant() {
        let table = probe_table(14, 8);
        let (params, config) = tiny_model(&table, false, 4);
        let eval_rows = table.rows_with_role(Role::Test);
        let rng = DeterministicRng::new(6);
        let serial = corruption_eval(&params, &config, &table, &eval_rows, &rng).unwrap();
        let fanned =
            corruption_fan_out(&params, &config, &table, &eval_rows, &rng, 3).unwrap();
        for (a, b) in serial.corrupted.iter().zip(&fanned) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn deletion_on_a_row_ignoring_model_hits_the_floor() {
        let table = probe_table(20, 7);
        let (params, config) = tiny_model(&table, true, 3);
        let i_star = table.rows_with_role(Role::Test)[0];
        let dp = DeletionParams::default();
        let kept = deletion_experiment(
            &params,
            &config,
            &table,
            i_star,
            &dp,
            &mut DeterministicRng::new(17),
        )
        .unwrap();
        assert!(kept.contains(&i_star), "i_star always kept");
        // Floor: fewer than epsilon * n = 0.4 others remain, i.e. none.
        assert_eq!(kept, vec![i_star]);
    }

    #[test]
    fn distance_stats_match_hand_arithmetic() {
        let mut rng = DeterministicRng::new(1);
        let mut table = synth_regression(3, 2, 0.5, &mut rng).unwrap();
        table.rows[0][0] = Cell::Num(0.0);
        table.rows[0][1] = Cell::Num(0.0);
        table.rows[1][0] = Cell::Num(1.0);
        table.rows[1][1] = Cell::Num(1.0);
        table.rows[2][0] = Cell::Num(2.0);
        table.rows[2][1] = Cell::Num(0.0);
        let fitted = FittedSchema::fit(&table).unwrap();
        let (m0, s0) = fitted.continuous_stats(0).unwrap();
        let (m1, s1) = fitted.continuous_stats(1).unwrap();
        let std0 = |x: f64| (x - m0) / s0;
        let std1 = |x: f64| (x - m1) / s1;
        let d01 = (std0(0.0) - std0(1.0)).powi(2) + (std1(0.0) - std1(1.0)).powi(2);
        let d02 = (std0(0.0) - std0(2.0)).powi(2) + (std1(0.0) - std1(0.0)).powi(2);

        let stats = deletion_distance_stats(
            &table,
            &fitted,
            0,
            &[1, 2],
            &[],
            &mut DeterministicRng::new(5),
        )
        .unwrap();
        let expect = 0.5 * (d01 + d02);
        assert!((stats.kept.unwrap() - expect).abs() < 1e-12);
        assert!(stats.deleted.is_none());
        assert!(stats.random.is_none(), "control matches the deleted size of 0");

        let same = deletion_distance_stats(
            &table,
            &fitted,
            0,
            &[1],
            &[1],
            &mut DeterministicRng::new(5),
        )
        .unwrap();
        assert_eq!(same.kept, same.deleted);
    }

    #[test]
    fn duplicate_of_the_anchor_contributes_zero_distance() {
        let mut rng = DeterministicRng::new(2);
        let mut table = synth_regression(3, 2, 0.5, &mut rng).unwrap();
        table.rows[1][0] = table.rows[0][0].clone();
        table.rows[1][1] = table.rows[0][1].clone();
        let fitted = FittedSchema::fit(&table).unwrap();
        let stats = deletion_distance_stats(
            &table,
            &fitted,
            0,
            &[1],
            &[],
            &mut DeterministicRng::new(3),
        )
        .unwrap();
        assert_eq!(stats.kept, Some(0.0));
    }

    fn enumeration_p(diffs: &[f64], w_obs: f64) -> f64 {
        let (ranks, _) = average_ranks(diffs);
        let n = diffs.len();
        let mut at_most = 0u64;
        for signs in 0..(1u64 << n) {
            let w: f64 = (0..n).filter(|i| signs >> i & 1 == 1).map(|i| ranks[i]).sum();
            if w <= w_obs + 1e-12 {
                at_most += 1;
            }
        }
        at_most as f64 / (1u64 << n) as f64
    }

    #[test]
    fn signed_rank_matches_exhaustive_enumeration_for_small_n() {
        for seed in 0..6u64 {
            for n in 6..=8usize {
                let mut rng = DeterministicRng::new(100 + seed * 10 + n as u64);
                let pairs: Vec<(f64, f64)> = (0..n)
                    .map(|_| (rng.normal(), 0.3 * rng.normal() - 0.4))
                    .collect();
                let result = signed_rank_test(&pairs).unwrap();
                let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).collect();
                let (ranks, _) = average_ranks(&diffs);
                let w_direct: f64 = diffs
                    .iter()
                    .zip(&ranks)
                    .filter(|(d, _)| **d > 0.0)
                    .map(|(_, r)| *r)
                    .sum();
                assert_eq!(result.w, w_direct, "W is a deterministic rank sum");
                let p_exact = enumeration_p(&diffs, result.w);
                assert!(
                    (result.p - p_exact).abs() < 0.06,
                    "n={n} seed={seed}: approx {} vs exact {p_exact}",
                    result.p
                );
            }
        }
    }

    #[test]
    fn signed_rank_extremes_and_degenerate_cases() {
        let all_below: Vec<(f64, f64)> = (0..20).map(|i| (i as f64, i as f64 + 1.5)).collect();
        let r = signed_rank_test(&all_below).unwrap();
        assert_eq!(r.w, 0.0);
        assert!(r.p < 0.001, "p = {}", r.p);

        let mut mirrored = Vec::new();
        for i in 1..=10 {
            mirrored.push((0.0, i as f64));
            mirrored.push((i as f64, 0.0));
        }
        let r = signed_rank_test(&mirrored).unwrap();
        assert!((r.p - 0.5).abs() < 0.1, "symmetric pairs give p near 0.5, got {}", r.p);

        let zeros = vec![(1.0, 1.0); 10];
        let r = signed_rank_test(&zeros).unwrap();
        assert_eq!(r.p, 1.0);
        assert_eq!(r.n, 0);

        let too_few = vec![(1.0, 2.0); 4];
        assert!(signed_rank_test(&too_few).is_err());
    }

    #[test]
    fn equivariance_identity_is_exact_and_random_perms_are_tight() {
        let table = probe_table(10, 4);
        let fitted = FittedSchema::fit(&table).unwrap();
        let config: RunConfig = serde_json::from_str(
            r#"{"layers": 2, "heads": 2, "e": 8, "steps": 10}"#,
        )
        .unwrap();
        let params: NptParams<f64> =
            NptParams::init(fitted.clone(), &config, &mut DeterministicRng::new(11)).unwrap();
        let (x, mask) = build_task_masks(
            &table,
            &fitted,
            &MaskConfig::eval(MaskMode::Supervised),
            &mut DeterministicRng::new(12),
        )
        .unwrap();
        let dev = equivariance_check(&params, &x, &mask, 20, &mut DeterministicRng::new(13))
            .unwrap();
        assert!(dev <= 1e-9, "64-bit deviation {dev}");
    }

    #[test]
    fn pearson_handles_the_basic_shapes() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let up: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        let down: Vec<f64> = x.iter().map(|v| -0.5 * v + 2.0).collect();
        assert!((pearson(&x, &up) - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &down) + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&x, &[2.0; 4]), 0.0);
    }

    #[test]
    fn ablation_flips_exactly_one_flag() {
        let config: RunConfig = serde_json::from_str(
            r#"{"layers": 4, "heads": 2, "e": 16, "steps": 100}"#,
        )
        .unwrap();
        let ablated = parametric_ablation(&config);
        assert!(ablated.ablate_abd);
        assert!(!config.ablate_abd);
        assert_eq!(ablated.layers, config.layers);
        assert_eq!(ablated.seed, config.seed);
    }
}
