use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dst_core::analysis::{distribution_csv, matrix_csv, module_distribution, overlap_matrix, IndexSet};
use dst_core::harness::{
    bench_csv, bench_deltas, finetune, gen_task, lr_epsilon_sweep, pretrain, Activation, MlpSpec,
};
use dst_core::param_store::{
    load_checkpoint, load_checkpoint_full, save_checkpoint, save_checkpoint_with_seed, SeedSnapshot,
};
use dst_core::partition::SiloScheme;
use dst_core::rng::Xoshiro256;
use dst_core::subset_delta::{apply, diff, load_delta, save_delta, SubsetDelta};
use dst_core::DstError;

use crate::config::RunConfig;

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_INTEGRITY: u8 = 3;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<DstError> for CliError {
    fn from(e: DstError) -> Self {
        let code = match &e {
            DstError::Config(_)
            | DstError::InvalidEpsilon(_)
            | DstError::InvalidArgument(_)
            | DstError::LengthMismatch { .. }
            | DstError::Shape(_)
            | DstError::UnknownTask(_) => EXIT_USAGE,
            DstError::Format(_)
            | DstError::Corrupt(_)
            | DstError::ChecksumMismatch { .. }
            | DstError::NonFinite { .. } => EXIT_INTEGRITY,
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

fn load_config(path: &Path, overrides: &[String], required: &[&str]) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    for o in overrides {
        cfg.set(o)?;
    }
    cfg.require(required)?;
    Ok(cfg)
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    fs::write(path, contents).map_err(|e| CliError {
        code: EXIT_RUNTIME,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError {
        code: EXIT_RUNTIME,
        message: format!("cannot create {}: {e}", dir.display()),
    })
}

fn stdout(text: &str) -> CliResult {
    std::io::stdout()
        .write_all(text.as_bytes())
        .map_err(|e| CliError {
            code: EXIT_RUNTIME,
            message: format!("cannot write to stdout: {e}"),
        })
}

pub fn cmd_pretrain(config: &Path, overrides: &[String], out: &Path) -> CliResult {
    let cfg = load_config(config, overrides, &["task.kind", "model.widths"])?;
    let exp = cfg.experiment(0)?;
    let data = gen_task(&exp.pretrain_task)?;
    let (params, loss) = pretrain(&exp.mlp, &data, &exp.pretrain)?;
    create_dir(out)?;
    save_checkpoint(&params, out.join("seed.dstc"))?;
    println!("final pretrain loss: {loss}");
    Ok(())
}

pub fn cmd_finetune(config: &Path, overrides: &[String], seed: &Path, out: &Path) -> CliResult {
    let cfg = load_config(config, overrides, &["task.kind", "model.widths", "train.method"])?;
    let exp = cfg.experiment(0)?;
    let train = cfg.train(0)?;
    let params = load_checkpoint(seed)?;
    if *params.layout() != exp.mlp.layout() {
        return Err(CliError::usage(format!(
            "seed {} does not match model.widths {:?}",
            seed.display(),
            exp.mlp.widths()
        )));
    }
    let snapshot = SeedSnapshot::new(&params);
    let run = finetune(&exp.mlp, &snapshot, &exp.finetune_data()?, &train)?;
    run.write_dir(out)?;
    println!(
        "final held-out loss: {} ({} free parameters)",
        run.final_heldout_loss(),
        run.delta.len()
    );
    Ok(())
}

pub fn cmd_apply(seed: &Path, delta: &Path, out: &Path) -> CliResult {
    let seed = SeedSnapshot::new(&load_checkpoint(seed)?);
    let delta = load_delta(delta)?;
    let merged = apply(&seed, &delta)?;
    save_checkpoint_with_seed(&merged, seed.checksum(), out)?;
    Ok(())
}

pub fn cmd_diff(seed: &Path, model: &Path, out: &Path) -> CliResult {
    let seed = SeedSnapshot::new(&load_checkpoint(seed)?);
    let model = load_checkpoint_full(model)?;
    if model.seed_checksum != 0 && model.seed_checksum != seed.checksum() {
        return Err(DstError::ChecksumMismatch {
            expected: seed.checksum(),
            found: model.seed_checksum,
        }
        .into());
    }
    if *model.params.layout() != *seed.layout() {
        return Err(CliError::usage("model and seed layouts differ"));
    }
    save_delta(&diff(&seed, &model.params)?, out)?;
    Ok(())
}

fn label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn index_set(delta: &SubsetDelta) -> IndexSet {
    delta.indices().iter().map(|&i| i as usize).collect()
}

pub fn cmd_overlap(deltas: &[PathBuf]) -> CliResult {
    if deltas.is_empty() {
        return Err(CliError::usage("overlap needs at least one delta"));
    }
    let loaded = deltas
        .iter()
        .map(load_delta)
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(d) = loaded.iter().find(|d| d.n() != loaded[0].n()) {
        return Err(CliError::usage(format!(
            "deltas describe models of different size ({} vs {})",
            loaded[0].n(),
            d.n()
        )));
    }
    let sets: Vec<IndexSet> = loaded.iter().map(index_set).collect();
    let matrix = overlap_matrix(&sets)?;
    let labels: Vec<String> = deltas.iter().map(|p| label(p)).collect();
    stdout(&matrix_csv(&labels, &matrix))
}

pub fn cmd_stats(delta: &Path, seed: &Path, granularity: SiloScheme) -> CliResult {
    let seed = SeedSnapshot::new(&load_checkpoint(seed)?);
    let delta = load_delta(delta)?;
    if delta.seed_checksum() != seed.checksum() {
        return Err(DstError::ChecksumMismatch {
            expected: seed.checksum(),
            found: delta.seed_checksum(),
        }
        .into());
    }
    let shares = module_distribution(&index_set(&delta), seed.layout(), granularity);
    stdout(&distribution_csv(granularity, &shares))
}

pub fn cmd_bench(
    seed: &Path,
    deltas: &[PathBuf],
    repetitions: usize,
    batch: usize,
    activation: Activation,
) -> CliResult {
    if repetitions == 0 {
        return Err(CliError::usage("repetitions must be positive"));
    }
    if batch == 0 {
        return Err(CliError::usage("batch must be positive"));
    }
    let seed = SeedSnapshot::new(&load_checkpoint(seed)?);
    let mlp = MlpSpec::from_layout(seed.layout(), activation, 0)?;
    let loaded = deltas
        .iter()
        .map(|p| Ok((label(p), load_delta(p)?)))
        .collect::<Result<Vec<_>, DstError>>()?;
    let mut rng = Xoshiro256::seed_from_u64(0);
    let inputs: Vec<f32> = (0..batch * mlp.input_dim())
        .map(|_| rng.normal() as f32)
        .collect();
    let rows = bench_deltas(&mlp, &seed, &loaded, &inputs, repetitions)?;
    stdout(&bench_csv(&rows))
}

pub fn cmd_sweep(config: &Path, overrides: &[String], out: Option<&Path>) -> CliResult {
    let cfg = load_config(
        config,
        overrides,
        &["task.kind", "model.widths", "sweep.lrs", "sweep.epsilons"],
    )?;
    let grid = cfg.sweep()?;
    // Validate once up front so per-cell closures cannot fail on config.
    cfg.experiment(0)?;
    cfg.train(0)?;
    let table = lr_epsilon_sweep(
        &grid,
        |s| cfg.experiment(s).expect("validated"),
        |s| cfg.train(s).expect("validated"),
    )?;
    let csv = table.to_csv();
    stdout(&csv)?;
    for (eps, lr) in table.best_lr_mean() {
        eprintln!("epsilon {eps}: best learning rate {lr}");
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join("sweep.csv"), &csv)?;
        write_file(&dir.join("best_lr.csv"), &table.best_lr_csv())?;
    }
    Ok(())
}
