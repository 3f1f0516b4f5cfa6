//! Tables, row roles, splits, batching, the semi-synthetic duplication
//! tasks, and the k-nearest-neighbour oracle used as their reference
//! solver.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{AttrKind, AttributeSchema, FittedSchema};
use crate::error::{NptError, Result};
use crate::rng::DeterministicRng;
use crate::Mode;

/// One table entry. Categorical cells keep their raw label; vocabulary
/// indices are assigned only when a schema is fitted.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Cat(String),
    Missing,
}

impl Cell {
    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }

    pub fn as_num(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_cat(&self) -> Option<&str> {
        match self {
            Cell::Cat(s) => Some(s),
            _ => None,
        }
    }
}

/// Row role. `Context` rows (the revealed duplicates of the duplication
/// tasks) are pure support data: never masked, never scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
    Context,
}

#[derive(Debug, Clone)]
pub struct DataTable {
    pub schema: AttributeSchema,
    pub rows: Vec<Vec<Cell>>,
    pub roles: Vec<Role>,
    /// Partner row for duplication pairs; symmetric where present.
    pub pair: Vec<Option<usize>>,
}

impl DataTable {
    /// New table with every row marked `Train` and no pairing.
    pub fn new(schema: AttributeSchema, rows: Vec<Vec<Cell>>) -> Result<Self> {
        let d = schema.d();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(NptError::data(format!(
                    "row {i} has {} cells, schema declares {d} columns",
                    row.len()
                )));
            }
        }
        let n = rows.len();
        Ok(DataTable {
            schema,
            rows,
            roles: vec![Role::Train; n],
            pair: vec![None; n],
        })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn d(&self) -> usize {
        self.schema.d()
    }

    pub fn cell(&self, i: usize, j: usize) -> &Cell {
        &self.rows[i][j]
    }

    pub fn set_roles(&mut self, roles: Vec<Role>) -> Result<()> {
        if roles.len() != self.n() {
            return Err(NptError::data(format!(
                "role vector has {} entries for {} rows",
                roles.len(),
                self.n()
            )));
        }
        self.roles = roles;
        Ok(())
    }

    pub fn rows_with_role(&self, role: Role) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.roles[i] == role).collect()
    }

    /// Restriction to `indices` (in the given order), remapping pair links.
    /// Pairs must not be split across the boundary; batching guarantees
    /// this, so a split pair is an internal error.
    pub fn subset(&self, indices: &[usize]) -> Result<DataTable> {
        let mut new_of = vec![None; self.n()];
        for (new, &old) in indices.iter().enumerate() {
            if old >= self.n() {
                return Err(NptError::internal(format!("subset index {old} out of range")));
            }
            if new_of[old].is_some() {
                return Err(NptError::internal(format!("subset repeats row {old}")));
            }
            new_of[old] = Some(new);
        }
        let mut pair = Vec::with_capacity(indices.len());
        for &old in indices {
            pair.push(match self.pair[old] {
                None => None,
                Some(p) => Some(new_of[p].ok_or_else(|| {
                    NptError::internal(format!(
                        "row {old} was subset without its duplication partner {p}"
                    ))
                })?),
            });
        }
        Ok(DataTable {
            schema: self.schema.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            roles: indices.iter().map(|&i| self.roles[i]).collect(),
            pair,
        })
    }

    /// Load a typed table from CSV. The header must match the schema's
    /// column names in order; empty cells become `Missing`.
    pub fn load_csv(path: impl AsRef<Path>, schema: AttributeSchema) -> Result<DataTable> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| NptError::data(format!("cannot read {}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| NptError::data(format!("bad CSV header: {e}")))?
            .clone();
        if headers.len() != schema.d() {
            return Err(NptError::data(format!(
                "CSV has {} columns, schema declares {}",
                headers.len(),
                schema.d()
            )));
        }
        for (j, col) in schema.columns.iter().enumerate() {
            if headers.get(j) != Some(col.name.as_str()) {
                return Err(NptError::data(format!(
                    "CSV column {j} is {:?}, schema expects {:?}",
                    headers.get(j).unwrap_or(""),
                    col.name
                )));
            }
        }
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| NptError::data(format!("CSV row {i}: {e}")))?;
            if record.len() != schema.d() {
                return Err(NptError::data(format!(
                    "CSV row {i} has {} fields, expected {}",
                    record.len(),
                    schema.d()
                )));
            }
            let mut row = Vec::with_capacity(schema.d());
            for (j, field) in record.iter().enumerate() {
                let cell = if field.is_empty() {
                    Cell::Missing
                } else {
                    match schema.columns[j].kind {
                        AttrKind::Continuous => Cell::Num(field.parse::<f64>().map_err(|_| {
                            NptError::data(format!(
                                "row {i}, column {:?}: {field:?} is not numeric",
                                schema.columns[j].name
                            ))
                        })?),
                        AttrKind::Categorical => Cell::Cat(field.to_string()),
                    }
                };
                row.push(cell);
            }
            rows.push(row);
        }
        DataTable::new(schema, rows)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = csv::Writer::from_path(path.as_ref())
            .map_err(|e| NptError::data(format!("cannot write CSV: {e}")))?;
        writer
            .write_record(self.schema.columns.iter().map(|c| c.name.as_str()))
            .map_err(|e| NptError::data(format!("CSV write: {e}")))?;
        for row in &self.rows {
            let fields: Vec<String> = row
                .iter()
                .map(|c| match c {
                    Cell::Num(v) => format!("{v}"),
                    Cell::Cat(s) => s.clone(),
                    Cell::Missing => String::new(),
                })
                .collect();
            writer
                .write_record(&fields)
                .map_err(|e| NptError::data(format!("CSV write: {e}")))?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Deterministic shuffled train/val/test assignment with the given
/// fractions (which must sum to 1).
pub fn split_rows(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<Vec<Role>> {
    let (ft, fv, fe) = fractions;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(NptError::config(format!(
            "split fractions ({ft}, {fv}, {fe}) must be nonnegative and sum to 1"
        )));
    }
    let n_train = (n as f64 * ft).round() as usize;
    let n_val = (n as f64 * fv).round() as usize;
    if n_train + n_val > n {
        return Err(NptError::config("split fractions round past the row count".to_string()));
    }
    let mut rng = DeterministicRng::new(seed);
    let order = rng.permutation(n);
    let mut roles = vec![Role::Test; n];
    for (pos, &i) in order.iter().enumerate() {
        roles[i] = if pos < n_train {
            Role::Train
        } else if pos < n_train + n_val {
            Role::Val
        } else {
            Role::Test
        };
    }
    Ok(roles)
}

/// k-fold cross-validation role vectors. Fold f's test rows are the f-th
/// chunk of one global shuffle; the remaining rows split train/val 7:2.
pub fn cv_folds(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<Role>>> {
    if k < 2 || k > n {
        return Err(NptError::config(format!("cannot make {k} folds from {n} rows")));
    }
    let mut rng = DeterministicRng::new(seed);
    let order = rng.permutation(n);
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let lo = f * n / k;
        let hi = (f + 1) * n / k;
        let mut roles = vec![Role::Train; n];
        for &i in &order[lo..hi] {
            roles[i] = Role::Test;
        }
        let rest: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
        let n_val = (rest.len() as f64 * 2.0 / 9.0).round() as usize;
        for &i in rest.iter().rev().take(n_val) {
            roles[i] = Role::Val;
        }
        folds.push(roles);
    }
    Ok(folds)
}

fn pair_units(table: &DataTable) -> Vec<(Role, Vec<usize>)> {
    let mut seen = vec![false; table.n()];
    let mut units = Vec::new();
    for i in 0..table.n() {
        if seen[i] {
            continue;
        }
        seen[i] = true;
        let mut unit = vec![i];
        if let Some(p) = table.pair[i] {
            if !seen[p] {
                seen[p] = true;
                unit.push(p);
            }
        }
        let anchor = unit
            .iter()
            .map(|&r| table.roles[r])
            .find(|&r| r != Role::Context)
            .unwrap_or(Role::Context);
        units.push((anchor, unit));
    }
    units
}

/// Partition rows into batches of roughly `batch_size` rows
/// (`0` = one full-dataset batch). Duplication pairs always land in the
/// same batch. Training batches are a shuffled packing; evaluation batches
/// approximately preserve the table's train/val/test proportions so that a
/// test row never appears without support rows.
pub fn make_batches(
    table: &DataTable,
    batch_size: usize,
    mode: Mode,
    rng: &mut DeterministicRng,
) -> Result<Vec<Vec<usize>>> {
    let n = table.n();
    if n == 0 {
        return Err(NptError::data("cannot batch an empty table".to_string()));
    }
    let bs = if batch_size == 0 || batch_size > n { n } else { batch_size };
    let mut units = pair_units(table);

    let mut batches: Vec<Vec<usize>> = Vec::new();
    match mode {
        Mode::Train => {
            rng.shuffle(&mut units);
            let mut cur: Vec<usize> = Vec::new();
            for (_, unit) in units {
                if !cur.is_empty() && cur.len() + unit.len() > bs {
                    batches.push(std::mem::take(&mut cur));
                }
                cur.extend(unit);
            }
            if !cur.is_empty() {
                batches.push(cur);
            }
        }
        Mode::Eval => {
            let target = n.div_ceil(bs);
            let mut slots: Vec<Vec<usize>> = vec![Vec::new(); target];
            for role in [Role::Train, Role::Val, Role::Test, Role::Context] {
                let mut group: Vec<Vec<usize>> = units
                    .iter()
                    .filter(|(r, _)| *r == role)
                    .map(|(_, u)| u.clone())
                    .collect();
                rng.shuffle(&mut group);
                for (i, unit) in group.into_iter().enumerate() {
                    slots[i % target].extend(unit);
                }
            }
            batches = slots.into_iter().filter(|b| !b.is_empty()).collect();
            for batch in &batches {
                let all_test = batch.iter().all(|&i| table.roles[i] == Role::Test);
                if all_test && batch.len() != n {
                    return Err(NptError::internal(
                        "evaluation batch contains only test rows; they would have no support"
                            .to_string(),
                    ));
                }
            }
        }
    }

    let mut covered = vec![false; n];
    for batch in &batches {
        for &i in batch {
            if covered[i] {
                return Err(NptError::internal(format!("row {i} batched twice")));
            }
            covered[i] = true;
        }
    }
    if covered.iter().any(|c| !c) {
        return Err(NptError::internal("batching dropped rows".to_string()));
    }
    Ok(batches)
}

/// Duplication-task flavours.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Exact copies with revealed targets.
    Plain,
    /// The last three feature columns of every row (originals and
    /// duplicates alike) are overwritten with independent Normal(1, 1)
    /// draws, so matching must rely on the remaining features.
    RandomFeatures,
    /// Duplicate targets are shifted by +1, so a pure lookup answer is
    /// off by exactly 1.
    AddOne,
    /// Both modifications at once.
    Both,
}

impl std::str::FromStr for Variant {
    type Err = NptError;

    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "plain" => Ok(Variant::Plain),
            "random_features" => Ok(Variant::RandomFeatures),
            "add_one" => Ok(Variant::AddOne),
            "both" => Ok(Variant::Both),
            other => Err(NptError::config(format!(
                "unknown variant {other:?}; expected plain|random_features|add_one|both"
            ))),
        }
    }
}

/// Append a revealed-target duplicate of every row. Originals keep their
/// roles; duplicates get `Role::Context` and pair links in both
/// directions. Values are assumed to live in standardized space already,
/// which is how [`synth_regression`] produces them.
pub fn make_duplication_task(
    table: &DataTable,
    variant: Variant,
    rng: &mut DeterministicRng,
) -> Result<DataTable> {
    let target = table.schema.single_target()?;
    if table.schema.columns[target].kind != AttrKind::Continuous {
        return Err(NptError::config(
            "the duplication task needs a continuous target".to_string(),
        ));
    }
    let features: Vec<usize> = (0..table.d()).filter(|&j| j != target).collect();
    let randomize = matches!(variant, Variant::RandomFeatures | Variant::Both);
    let add_one = matches!(variant, Variant::AddOne | Variant::Both);
    if randomize && features.len() < 4 {
        return Err(NptError::config(format!(
            "random_features overwrites three feature columns and needs at least 4, got {}",
            features.len()
        )));
    }

    let n = table.n();
    let mut out = table.clone();
    for i in 0..n {
        let mut dup = table.rows[i].clone();
        if add_one {
            if let Cell::Num(v) = dup[target] {
                dup[target] = Cell::Num(v + 1.0);
            }
        }
        out.rows.push(dup);
        out.roles.push(Role::Context);
        out.pair.push(Some(i));
        out.pair[i] = Some(n + i);
    }
    if randomize {
        let noisy = &features[features.len() - 3..];
        for row in out.rows.iter_mut() {
            for &j in noisy {
                row[j] = Cell::Num(1.0 + rng.normal());
            }
        }
    }
    Ok(out)
}

/// Standardized continuous feature vectors for the given rows; the target
/// column is excluded. Categorical or missing features are not supported
/// here; the distance-based tools that call this need dense coordinates.
pub fn standardized_features(
    table: &DataTable,
    fitted: &FittedSchema,
    rows: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let feature_cols = fitted.schema.feature_indices();
    let mut out = Vec::with_capacity(rows.len());
    for &i in rows {
        let mut v = Vec::with_capacity(feature_cols.len());
        for &j in &feature_cols {
            match table.cell(i, j) {
                Cell::Num(x) => v.push(fitted.standardize(j, *x)?),
                other => {
                    return Err(NptError::data(format!(
                        "row {i}, column {j} is {other:?}; feature distances need continuous values"
                    )))
                }
            }
        }
        out.push(v);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnnWeighting {
    Uniform,
    InverseDistance,
}

/// k-nearest-neighbour regression in Euclidean feature space. Ties in
/// distance resolve toward the lower row index, so results are
/// deterministic.
pub fn knn_oracle(
    train_x: &[Vec<f64>],
    train_y: &[f64],
    test_x: &[Vec<f64>],
    k: usize,
    weighting: KnnWeighting,
) -> Result<Vec<f64>> {
    if train_x.len() != train_y.len() {
        return Err(NptError::config(format!(
            "{} training points but {} targets",
            train_x.len(),
            train_y.len()
        )));
    }
    if k == 0 || k > train_x.len() {
        return Err(NptError::config(format!(
            "k = {k} is outside 1..={} training points",
            train_x.len()
        )));
    }
    let mut preds = Vec::with_capacity(test_x.len());
    for q in test_x {
        let mut dist: Vec<(f64, usize)> = train_x
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let d2: f64 = x.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2, i)
            })
            .collect();
        dist.sort_by(|a, b| a.partial_cmp(b).expect("NaN distance"));
        let nearest = &dist[..k];
        let pred = match weighting {
            KnnWeighting::Uniform => {
                nearest.iter().map(|&(_, i)| train_y[i]).sum::<f64>() / k as f64
            }
            KnnWeighting::InverseDistance => {
                let mut num = 0.0;
                let mut den = 0.0;
                for &(d2, i) in nearest {
                    let w = 1.0 / d2.sqrt().max(1e-12);
                    num += w * train_y[i];
                    den += w;
                }
                num / den
            }
        };
        preds.push(pred);
    }
    Ok(preds)
}

/// Synthetic standardized regression table: `features` i.i.d. standard
/// normal columns, and a target built from the first four of them so that
/// the signal explains `r_squared` of its unit variance. The trailing
/// feature columns carry no signal, which is exactly what the
/// `random_features` variant wants to overwrite.
pub fn synth_regression(
    n: usize,
    features: usize,
    r_squared: f64,
    rng: &mut DeterministicRng,
) -> Result<DataTable> {
    if n == 0 || features == 0 {
        return Err(NptError::config("need at least one row and one feature".to_string()));
    }
    if !(0.0..1.0).contains(&r_squared) {
        return Err(NptError::config(format!("r_squared {r_squared} must be in [0, 1)")));
    }
    let informative = features.min(4);
    let a = (r_squared / informative as f64).sqrt();
    let s = (1.0 - r_squared).sqrt();
    let schema = AttributeSchema::regression(features);
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let xs: Vec<f64> = (0..features).map(|_| rng.normal()).collect();
        let y: f64 = a * xs[..informative].iter().sum::<f64>() + s * rng.normal();
        let mut row: Vec<Cell> = xs.into_iter().map(Cell::Num).collect();
        row.push(Cell::Num(y));
        rows.push(row);
    }
    DataTable::new(schema, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_table() -> DataTable {
        let schema = AttributeSchema::regression(2);
        let rows = vec![
            vec![Cell::Num(0.25), Cell::Num(-1.5), Cell::Num(2.0)],
            vec![Cell::Num(1.0), Cell::Missing, Cell::Num(-0.125)],
            vec![Cell::Num(-3.75), Cell::Num(0.5), Cell::Num(0.0)],
        ];
        DataTable::new(schema, rows).unwrap()
    }

    #[test]
    fn csv_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        let table = toy_table();
        table.write_csv(&path).unwrap();
        let back = DataTable::load_csv(&path, table.schema.clone()).unwrap();
        assert_eq!(table.rows, back.rows);
        assert!(back.rows[1][1].is_missing());
    }

    #[test]
    fn csv_header_mismatch_names_the_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        toy_table().write_csv(&path).unwrap();
        let other = AttributeSchema::regression(2);
        let mut renamed = other;
        renamed.columns[1].name = "z9".to_string();
        let err = DataTable::load_csv(&path, renamed).unwrap_err();
        assert!(err.to_string().contains("z9"), "{err}");
    }

    #[test]
    fn csv_rejects_non_numeric_continuous() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "x1,x2,y\n1.0,oops,3.0\n").unwrap();
        let err = DataTable::load_csv(&path, AttributeSchema::regression(2)).unwrap_err();
        assert!(err.to_string().contains("oops"), "{err}");
    }

    #[test]
    fn split_sizes_match_fractions() {
        let roles = split_rows(10, (0.7, 0.2, 0.1), 3).unwrap();
        let count = |r: Role| roles.iter().filter(|&&x| x == r).count();
        assert_eq!(count(Role::Train), 7);
        assert_eq!(count(Role::Val), 2);
        assert_eq!(count(Role::Test), 1);
        assert_eq!(roles, split_rows(10, (0.7, 0.2, 0.1), 3).unwrap());
        assert_ne!(roles, split_rows(10, (0.7, 0.2, 0.1), 4).unwrap());
    }

    #[test]
    fn cv_folds_are_disjoint_and_cover() {
        let folds = cv_folds(25, 10, 7).unwrap();
        assert_eq!(folds.len(), 10);
        let mut test_seen = vec![false; 25];
        for roles in &folds {
            for (i, &r) in roles.iter().enumerate() {
                if r == Role::Test {
                    assert!(!test_seen[i], "row {i} in two test folds");
                    test_seen[i] = true;
                }
            }
            assert!(roles.iter().any(|&r| r == Role::Val));
        }
        assert!(test_seen.iter().all(|&s| s));
    }

    #[test]
    fn train_batches_partition_and_keep_pairs_together() {
        let mut rng = DeterministicRng::new(5);
        let base = synth_regression(33, 5, 0.5, &mut rng).unwrap();
        let table = make_duplication_task(&base, Variant::Plain, &mut rng).unwrap();
        let batches = make_batches(&table, 16, Mode::Train, &mut rng).unwrap();
        let mut seen = vec![false; table.n()];
        for batch in &batches {
            for &i in batch {
                assert!(!seen[i]);
                seen[i] = true;
            }
            for &i in batch {
                if let Some(p) = table.pair[i] {
                    assert!(batch.contains(&p), "row {i} batched without partner {p}");
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn eval_batches_preserve_role_proportions() {
        let mut rng = DeterministicRng::new(11);
        let mut table = synth_regression(1000, 4, 0.5, &mut rng).unwrap();
        table.set_roles(split_rows(1000, (0.7, 0.2, 0.1), 2).unwrap()).unwrap();
        let batches = make_batches(&table, 100, Mode::Eval, &mut rng).unwrap();
        assert_eq!(batches.len(), 10);
        for batch in &batches {
            let test = batch.iter().filter(|&&i| table.roles[i] == Role::Test).count();
            let frac = test as f64 / batch.len() as f64;
            assert!((frac - 0.1).abs() <= 0.01, "test fraction {frac}");
        }
    }

    #[test]
    fn full_dataset_batch_when_size_is_zero() {
        let mut rng = DeterministicRng::new(1);
        let table = synth_regression(12, 3, 0.4, &mut rng).unwrap();
        let batches = make_batches(&table, 0, Mode::Train, &mut rng).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len(), 12);
    }

    #[test]
    fn eval_rejects_test_only_batches() {
        let mut rng = DeterministicRng::new(2);
        let mut table = synth_regression(20, 3, 0.4, &mut rng).unwrap();
        table.set_roles(vec![Role::Test; 20]).unwrap();
        let err = make_batches(&table, 10, Mode::Eval, &mut rng).unwrap_err();
        assert!(err.to_string().contains("only test rows"), "{err}");
    }

    #[test]
    fn eval_allows_test_rows_with_context_support() {
        let mut rng = DeterministicRng::new(3);
        let mut base = synth_regression(16, 5, 0.5, &mut rng).unwrap();
        base.set_roles(vec![Role::Test; 16]).unwrap();
        let table = make_duplication_task(&base, Variant::Plain, &mut rng).unwrap();
        let batches = make_batches(&table, 8, Mode::Eval, &mut rng).unwrap();
        for batch in &batches {
            assert!(batch.iter().any(|&i| table.roles[i] == Role::Context));
        }
    }

    #[test]
    fn plain_duplicates_copy_features_and_link_pairs() {
        let mut rng = DeterministicRng::new(9);
        let base = synth_regression(6, 5, 0.5, &mut rng).unwrap();
        let dup = make_duplication_task(&base, Variant::Plain, &mut rng).unwrap();
        assert_eq!(dup.n(), 12);
        for i in 0..6 {
            assert_eq!(dup.rows[i], dup.rows[6 + i]);
            assert_eq!(dup.pair[i], Some(6 + i));
            assert_eq!(dup.pair[6 + i], Some(i));
            assert_eq!(dup.roles[6 + i], Role::Context);
        }
    }

    #[test]
    fn add_one_shifts_duplicate_targets_only() {
        let mut rng = DeterministicRng::new(10);
        let base = synth_regression(5, 5, 0.5, &mut rng).unwrap();
        let dup = make_duplication_task(&base, Variant::AddOne, &mut rng).unwrap();
        let t = dup.schema.single_target().unwrap();
        for i in 0..5 {
            let orig = dup.rows[i][t].as_num().unwrap();
            let copy = dup.rows[5 + i][t].as_num().unwrap();
            assert_eq!(copy, orig + 1.0);
            for j in 0..t {
                assert_eq!(dup.rows[i][j], dup.rows[5 + i][j]);
            }
        }
    }

    #[test]
    fn random_features_overwrites_last_three_columns_independently() {
        let mut rng = DeterministicRng::new(12);
        let base = synth_regression(8, 7, 0.5, &mut rng).unwrap();
        let dup = make_duplication_task(&base, Variant::RandomFeatures, &mut rng).unwrap();
        for i in 0..8 {
            for j in 0..4 {
                assert_eq!(dup.rows[i][j], dup.rows[8 + i][j], "shared column {j}");
            }
            for j in 4..7 {
                assert_ne!(dup.rows[i][j], dup.rows[8 + i][j], "noisy column {j}");
                assert_ne!(dup.rows[i][j], base.rows[i][j], "original overwritten");
            }
        }
        let err = make_duplication_task(
            &synth_regression(4, 3, 0.5, &mut rng).unwrap(),
            Variant::RandomFeatures,
            &mut rng,
        )
        .unwrap_err();
        assert!(err.to_string().contains("at least 4"), "{err}");
    }

    #[test]
    fn one_nn_solves_the_plain_task_exactly() {
        let mut rng = DeterministicRng::new(21);
        let base = synth_regression(64, 7, 0.5, &mut rng).unwrap();
        let dup = make_duplication_task(&base, Variant::Plain, &mut rng).unwrap();
        let fitted = FittedSchema::fit(&dup).unwrap();
        let t = dup.schema.single_target().unwrap();
        let originals: Vec<usize> = (0..64).collect();
        let copies: Vec<usize> = (64..128).collect();
        let train_x = standardized_features(&dup, &fitted, &copies).unwrap();
        let train_y: Vec<f64> = copies.iter().map(|&i| dup.rows[i][t].as_num().unwrap()).collect();
        let test_x = standardized_features(&dup, &fitted, &originals).unwrap();
        let preds = knn_oracle(&train_x, &train_y, &test_x, 1, KnnWeighting::Uniform).unwrap();
        for (i, &p) in preds.iter().enumerate() {
            assert_eq!(p, dup.rows[i][t].as_num().unwrap());
        }
    }

    #[test]
    fn one_nn_residual_is_one_on_add_one() {
        let mut rng = DeterministicRng::new(22);
        let base = synth_regression(64, 7, 0.5, &mut rng).unwrap();
        let dup = make_duplication_task(&base, Variant::AddOne, &mut rng).unwrap();
        let fitted = FittedSchema::fit(&dup).unwrap();
        let t = dup.schema.single_target().unwrap();
        let copies: Vec<usize> = (64..128).collect();
        let originals: Vec<usize> = (0..64).collect();
        let train_x = standardized_features(&dup, &fitted, &copies).unwrap();
        let train_y: Vec<f64> = copies.iter().map(|&i| dup.rows[i][t].as_num().unwrap()).collect();
        let test_x = standardized_features(&dup, &fitted, &originals).unwrap();
        let preds = knn_oracle(&train_x, &train_y, &test_x, 1, KnnWeighting::Uniform).unwrap();
        for (i, &p) in preds.iter().enumerate() {
            let truth = dup.rows[i][t].as_num().unwrap();
            // Exact lookup of target + 1; only f64 rounding of the +1 remains.
            assert!((p - truth - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_k_uniform_returns_the_train_mean() {
        let train_x = vec![vec![0.0], vec![1.0], vec![2.0]];
        let train_y = vec![1.0, 2.0, 6.0];
        let preds =
            knn_oracle(&train_x, &train_y, &[vec![5.0]], 3, KnnWeighting::Uniform).unwrap();
        assert!((preds[0] - 3.0).abs() < 1e-15);
        assert!(knn_oracle(&train_x, &train_y, &[vec![0.0]], 4, KnnWeighting::Uniform).is_err());
        assert!(knn_oracle(&train_x, &train_y, &[vec![0.0]], 0, KnnWeighting::Uniform).is_err());
    }

    #[test]
    fn inverse_distance_weighting_prefers_the_closer_point() {
        let train_x = vec![vec![0.0], vec![10.0]];
        let train_y = vec![0.0, 10.0];
        let preds =
            knn_oracle(&train_x, &train_y, &[vec![1.0]], 2, KnnWeighting::InverseDistance)
                .unwrap();
        // weights 1/1 and 1/9
        assert!((preds[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn synthetic_tables_are_seeded_and_standardized() {
        let mut a = DeterministicRng::new(33);
        let mut b = DeterministicRng::new(33);
        let ta = synth_regression(4096, 7, 0.5, &mut a).unwrap();
        let tb = synth_regression(4096, 7, 0.5, &mut b).unwrap();
        assert_eq!(ta.rows, tb.rows);

        let t = ta.schema.single_target().unwrap();
        let ys: Vec<f64> = (0..ta.n()).map(|i| ta.rows[i][t].as_num().unwrap()).collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / ys.len() as f64;
        assert!(mean.abs() < 0.06, "target mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "target variance {var}");
    }

    #[test]
    fn subset_remaps_pairs_and_rejects_split_pairs() {
        let mut rng = DeterministicRng::new(40);
        let base = synth_regression(4, 5, 0.5, &mut rng).unwrap();
        let dup = make_duplication_task(&base, Variant::Plain, &mut rng).unwrap();
        let sub = dup.subset(&[1, 5, 2, 6]).unwrap();
        assert_eq!(sub.pair[0], Some(1));
        assert_eq!(sub.pair[1], Some(0));
        assert_eq!(sub.pair[2], Some(3));
        assert!(dup.subset(&[1, 2]).is_err());
    }
}
