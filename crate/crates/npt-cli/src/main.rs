//! Command line front end: train models, generate the synthetic
//! duplication tasks, run interaction probes against checkpoints, and
//! gradient-check the whole stack.
//!
//! Exit codes: 0 success, 1 check/assertion failure, 2 usage, config, or
//! data errors.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use npt::analysis::{
    corruption_eval, deletion_distance_stats, deletion_experiment, equivariance_check,
    signed_rank_test, DeletionParams, DeletionReport, ProbeReport,
};
use npt::attention::write_attention_csvs;
use npt::checkpoint::{load_checkpoint, save_checkpoint};
use npt::data::{
    make_duplication_task, split_rows, synth_regression, DataTable, Role, Variant,
};
use npt::embedding::AttributeSchema;
use npt::error::{NptError, Result};
use npt::masking::{build_task_masks, MaskConfig};
use npt::model::{forward, full_loss_gradcheck, RunConfig};
use npt::rng::DeterministicRng;
use npt::tensor::{op_checks, GRADCHECK_TOL};
use npt::train::{evaluate, train, EvalReport};
use npt::Mode;

#[derive(Parser)]
#[command(name = "npt", version, about = "Train and probe non-parametric transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint, a JSONL metrics stream, and
    /// a final evaluation report.
    Train {
        /// Run configuration (JSON; unknown keys are rejected).
        #[arg(long)]
        config: PathBuf,
        /// Data CSV matching the schema.
        #[arg(long)]
        data: PathBuf,
        /// Column schema (JSON).
        #[arg(long)]
        schema: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Role assignments produced by `synth` (JSON). Without it, rows
        /// are split 70/15/15 by the config seed.
        #[arg(long)]
        roles: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a synthetic duplication task: CSV, schema, and roles.
    Synth {
        /// plain | random_features | add_one | both
        #[arg(long, default_value = "plain")]
        variant: String,
        /// Number of original rows (the table gets 2n with duplicates).
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        features: usize,
        /// Fraction of target variance explained by the features.
        #[arg(long, default_value_t = 0.4)]
        r_squared: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an interaction probe against a trained checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Schema for the data file; must match the checkpoint's schema.
        #[arg(long)]
        schema: PathBuf,
        /// Role assignments (JSON). Without it, rows split 70/15/15.
        #[arg(long)]
        roles: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: ProbeMode,
        #[arg(long)]
        out: PathBuf,
        /// Test points for the deletion probe.
        #[arg(long, default_value_t = 16)]
        points: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference checks for every op and the full loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeMode {
    Corrupt,
    Delete,
    Equivariance,
    Attention,
}

/// Sidecar file carrying role assignments and duplication pair links.
#[derive(Serialize, Deserialize)]
struct RolesFile {
    roles: Vec<Role>,
    pair: Vec<Option<usize>>,
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let code = match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                NptError::Config(_) | NptError::Data(_) => 2,
                _ => 1,
            }
        }
    };
    std::process::exit(code);
}

fn read_text(path: &Path, what: &str) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| NptError::data(format!("reading {what} {}: {e}", path.display())))
}

fn load_table(
    data: &Path,
    schema_path: &Path,
    roles: Option<&Path>,
    seed: u64,
) -> Result<DataTable> {
    let schema = AttributeSchema::from_json(&read_text(schema_path, "schema file")?)?;
    let mut table = DataTable::load_csv(data, schema)?;
    match roles {
        Some(path) => {
            let file: RolesFile = serde_json::from_str(&read_text(path, "roles file")?)
                .map_err(|e| NptError::data(format!("parsing {}: {e}", path.display())))?;
            if file.pair.len() != table.n() {
                return Err(NptError::data(format!(
                    "roles file describes {} rows, data has {}",
                    file.pair.len(),
                    table.n()
                )));
            }
            table.set_roles(file.roles)?;
            table.pair = file.pair;
        }
        None => {
            let roles = split_rows(table.n(), (0.7, 0.15, 0.15), seed)?;
            table.set_roles(roles)?;
        }
    }
    Ok(table)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| NptError::internal(format!("serializing {}: {e}", path.display())))?;
    fs::write(path, text + "\n")
        .map_err(|e| NptError::data(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Train { config, data, schema, out, roles, seed } => {
            cmd_train(&config, &data, &schema, &out, roles.as_deref(), seed)
        }
        Command::Synth { variant, n, features, r_squared, seed, out } => {
            cmd_synth(&variant, n, features, r_squared, seed, &out)
        }
        Command::Probe { checkpoint, data, schema, roles, mode, out, points, seed } => {
            cmd_probe(&checkpoint, &data, &schema, roles.as_deref(), mode, &out, points, seed)
        }
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
    }
}

fn cmd_train(
    config_path: &Path,
    data: &Path,
    schema: &Path,
    out: &Path,
    roles: Option<&Path>,
    seed: Option<u64>,
) -> Result<i32> {
    let mut config = RunConfig::from_json(&read_text(config_path, "config file")?)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let table = load_table(data, schema, roles, config.seed)?;
    fs::create_dir_all(out)
        .map_err(|e| NptError::data(format!("creating {}: {e}", out.display())))?;

    let metrics_path = out.join("metrics.jsonl");
    let mut metrics_file = std::io::BufWriter::new(
        fs::File::create(&metrics_path)
            .map_err(|e| NptError::data(format!("creating {}: {e}", metrics_path.display())))?,
    );
    let result = train(&table, &config, Some(&mut metrics_file))?;
    std::io::Write::flush(&mut metrics_file)?;

    let ckpt_path = out.join("checkpoint.nptc");
    save_checkpoint(&result.params, &config, &ckpt_path)?;

    #[derive(Serialize)]
    struct FinalEval {
        val: Option<EvalReport>,
        test: Option<EvalReport>,
    }
    let eval_for = |role: Role| -> Result<Option<EvalReport>> {
        if table.rows_with_role(role).is_empty() {
            Ok(None)
        } else {
            evaluate(&result.params, &config, &table, role).map(Some)
        }
    };
    let report = FinalEval { val: eval_for(Role::Val)?, test: eval_for(Role::Test)? };
    write_json(&out.join("eval.json"), &report)?;

    let last_train = result.metrics.iter().rev().find_map(|m| m.train_loss);
    println!(
        "trained {} steps; final train loss {}; artifacts in {}",
        result.metrics.len(),
        last_train.map_or("n/a".to_string(), |l| format!("{l:.6}")),
        out.display()
    );
    Ok(0)
}

fn cmd_synth(
    variant: &str,
    n: usize,
    features: usize,
    r_squared: f64,
    seed: u64,
    out: &Path,
) -> Result<i32> {
    let variant: Variant = variant.parse()?;
    let mut rng = DeterministicRng::new(seed);
    let mut table = synth_regression(n, features, r_squared, &mut rng)?;
    table.set_roles(split_rows(n, (0.7, 0.15, 0.15), seed)?)?;
    let dup = make_duplication_task(&table, variant, &mut rng)?;

    fs::create_dir_all(out)
        .map_err(|e| NptError::data(format!("creating {}: {e}", out.display())))?;
    dup.write_csv(out.join("data.csv"))?;
    fs::write(out.join("schema.json"), dup.schema.to_json() + "\n")
        .map_err(|e| NptError::data(format!("writing schema: {e}")))?;
    let roles = RolesFile { roles: dup.roles.clone(), pair: dup.pair.clone() };
    write_json(&out.join("roles.json"), &roles)?;
    println!("wrote {} rows to {}", dup.n(), out.display());
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_probe(
    checkpoint: &Path,
    data: &Path,
    schema_path: &Path,
    roles: Option<&Path>,
    mode: ProbeMode,
    out: &Path,
    points: usize,
    seed: Option<u64>,
) -> Result<i32> {
    let (params, mut config) = load_checkpoint(checkpoint)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let table = load_table(data, schema_path, roles, config.seed)?;
    let fitted_schema = serde_json::to_value(&params.embed.fitted.schema)
        .map_err(|e| NptError::internal(format!("schema comparison: {e}")))?;
    let given_schema = serde_json::to_value(&table.schema)
        .map_err(|e| NptError::internal(format!("schema comparison: {e}")))?;
    if fitted_schema != given_schema {
        return Err(NptError::data(format!(
            "schema {} does not match the checkpoint's training schema",
            schema_path.display()
        )));
    }
    fs::create_dir_all(out)
        .map_err(|e| NptError::data(format!("creating {}: {e}", out.display())))?;
    let rng = DeterministicRng::new(config.seed ^ 0x70726f6265);

    let report = match mode {
        ProbeMode::Corrupt => {
            let eval_rows = table.rows_with_role(Role::Test);
            if eval_rows.is_empty() {
                return Err(NptError::data("corruption probe needs test rows"));
            }
            let outcome = corruption_eval(&params, &config, &table, &eval_rows, &rng)?;
            let mut report = ProbeReport::empty("corrupt");
            report.clean_metric = Some(outcome.clean_rmse);
            report.corrupted_metric = Some(outcome.corrupted_rmse);
            report.delta = Some(outcome.delta());
            report
        }
        ProbeMode::Delete => {
            let test_rows = table.rows_with_role(Role::Test);
            if test_rows.is_empty() {
                return Err(NptError::data("deletion probe needs test rows"));
            }
            let chosen = &test_rows[..test_rows.len().min(points)];
            let dp = DeletionParams::default();
            let fitted = params.embed.fitted.clone();
            let mut kept_means = Vec::new();
            let mut deleted_means = Vec::new();
            let mut random_means = Vec::new();
            let mut pairs = Vec::new();
            for &i_star in chosen {
                let mut sub_rng = rng.fork(i_star as u64);
                let kept = deletion_experiment(&params, &config, &table, i_star, &dp, &mut sub_rng)?;
                let deleted: Vec<usize> = (0..table.n())
                    .filter(|i| !kept.contains(i))
                    .collect();
                let kept_others: Vec<usize> =
                    kept.iter().copied().filter(|&i| i != i_star).collect();
                let stats = deletion_distance_stats(
                    &table, &fitted, i_star, &kept_others, &deleted, &mut sub_rng,
                )?;
                if let (Some(k), Some(r)) = (stats.kept, stats.random) {
                    pairs.push((k, r));
                    kept_means.push(k);
                    random_means.push(r);
                }
                if let Some(d) = stats.deleted {
                    deleted_means.push(d);
                }
            }
            let sr = signed_rank_test(&pairs)?;
            let mean = |v: &[f64]| {
                if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) }
            };
            let mut report = ProbeReport::empty("delete");
            report.deletion = Some(DeletionReport {
                points: pairs.len(),
                mean_kept: mean(&kept_means),
                mean_deleted: mean(&deleted_means),
                mean_random: mean(&random_means),
                w: sr.w,
                p: sr.p,
            });
            report
        }
        ProbeMode::Equivariance => {
            let fitted = params.embed.fitted.clone();
            let mut rng = rng;
            let (x, mask) =
                build_task_masks(&table, &fitted, &MaskConfig::eval(config.mask_mode), &mut rng)?;
            let dev = equivariance_check(&params, &x, &mask, 20, &mut rng)?;
            let mut report = ProbeReport::empty("equivariance");
            report.equivariance_max_dev = Some(dev);
            report
        }
        ProbeMode::Attention => {
            let fitted = params.embed.fitted.clone();
            let mut rng = rng;
            let (x, mask) =
                build_task_masks(&table, &fitted, &MaskConfig::eval(config.mask_mode), &mut rng)?;
            let (_, maps) = forward(&x, &mask, &params, Mode::Eval, &mut rng, true)?;
            let maps = maps.ok_or_else(|| NptError::internal("capture flag produced no maps"))?;
            let files = write_attention_csvs(&maps, out)?;
            println!("wrote {} attention files to {}", files.len(), out.display());
            ProbeReport::empty("attention")
        }
    };

    write_json(&out.join("report.json"), &report)?;
    println!("probe report written to {}", out.join("report.json").display());
    Ok(0)
}

fn cmd_gradcheck(seed: u64) -> Result<i32> {
    // Test hook: a skew other than 1 multiplies the analytic gradients to
    // prove the checker catches wrong gradients.
    let skew = match std::env::var("NPT_GRADCHECK_BREAK") {
        Ok(v) => v.trim().parse::<f64>().map_err(|_| {
            NptError::config(format!("NPT_GRADCHECK_BREAK must be a float, got {v:?}"))
        })?,
        Err(_) => 1.0,
    };

    let mut all_pass = true;
    for check in op_checks() {
        let outcome = check.run(seed, skew)?;
        let pass = outcome.passes(GRADCHECK_TOL);
        all_pass &= pass;
        println!(
            "op {:<16} max rel err {:>12.3e}  tiny abs err {:>12.3e}  {}",
            check.name,
            outcome.resolved_rel_err,
            outcome.tiny_abs_err,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    let outcome = full_loss_gradcheck(seed, skew)?;
    let pass = outcome.passes(GRADCHECK_TOL);
    all_pass &= pass;
    println!(
        "op {:<16} max rel err {:>12.3e}  tiny abs err {:>12.3e}  {}",
        "full_npt_loss",
        outcome.resolved_rel_err,
        outcome.tiny_abs_err,
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(if all_pass { 0 } else { 1 })
}
