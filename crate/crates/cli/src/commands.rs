use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fas_gnn::autodiff::suite::{check_all_primitives, check_primitive, PRIMITIVES};
use fas_gnn::autodiff::GradCheckReport;
use fas_gnn::baselines::{hzf_grid_search, mrt_equal_power, position_grid_oracle, zf_equal_power};
use fas_gnn::channel::{
    channel_matrix, check_feasibility, equidistant_positions, utility, EquidistantMode,
};
use fas_gnn::training::{fit, median, pipeline_gradcheck};
use fas_gnn::{
    checkpoint, evaluate, infer, Dataset, Metrics, PositionSource, SystemConfig, TwoStageModel,
    Utility,
};

use crate::config::{write_resolved, ExperimentConfig};
use crate::error::CliError;
use crate::{BaselineMethod, Layout};

const PIPELINE_COORDS: usize = 200;
const PIPELINE_STEP: f64 = 1e-5;
const PIPELINE_TOLERANCE: f64 = 1e-3;

fn required(
    flag: Option<PathBuf>,
    fallback: &Option<PathBuf>,
    what: &str,
) -> Result<PathBuf, CliError> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Config(format!("no {what} given (flag or [paths] entry)")))
}

/// Reads a dataset and checks it was drawn for this system.
fn load_dataset(cfg: &ExperimentConfig, path: &Path) -> Result<(Dataset, SystemConfig), CliError> {
    let data = if path.extension().is_some_and(|e| e == "csv") {
        let file = File::open(path)?;
        Dataset::read_csv(file, &cfg.system, 0)?
    } else {
        Dataset::read_binary(path)?
    };
    let system = cfg.system.with_users(data.n_users);
    if data.n_antennas != system.n_antennas || data.config_hash != system.hash() {
        return Err(CliError::Config(format!(
            "dataset {} (N={}, K={}) was not generated for this system configuration",
            path.display(),
            data.n_antennas,
            data.n_users
        )));
    }
    if data.is_empty() {
        return Err(CliError::Config(format!(
            "dataset {} is empty",
            path.display()
        )));
    }
    Ok((data, system))
}

fn load_model(cfg: &ExperimentConfig, path: Option<PathBuf>) -> Result<TwoStageModel, CliError> {
    let path = required(path, &cfg.paths.checkpoint, "checkpoint")?;
    let model = checkpoint::load(&path)?;
    if model.n_antennas != cfg.system.n_antennas {
        return Err(CliError::Config(format!(
            "checkpoint is for N={} but the configuration has N={}",
            model.n_antennas, cfg.system.n_antennas
        )));
    }
    Ok(model)
}

pub fn gen_data(
    mut cfg: ExperimentConfig,
    out: &Path,
    size: usize,
    seed: u64,
    users: Option<usize>,
    name: &str,
    csv: bool,
) -> Result<(), CliError> {
    if let Some(k) = users {
        cfg.system = cfg.system.with_users(k);
        cfg.validate()?;
    }
    let data = fas_gnn::sample_dataset(&cfg.system, size, seed);
    let path = out.join(format!("{name}.bin"));
    data.write_binary(&path)?;
    if csv {
        data.write_csv(File::create(out.join(format!("{name}.csv")))?)?;
    }
    write_resolved(&cfg, "gen-data", out)?;
    println!(
        "wrote {} (N={}, K={}, size={}, seed={}, hash={})",
        path.display(),
        data.n_antennas,
        data.n_users,
        data.len(),
        seed,
        data.content_hash()
    );
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, out: &Path, data: Option<PathBuf>) -> Result<(), CliError> {
    let path = required(data, &cfg.paths.dataset, "dataset")?;
    let (data, system) = load_dataset(cfg, &path)?;
    if data.n_users != cfg.system.n_users {
        return Err(CliError::Config(format!(
            "dataset has K={} but the configuration trains K={}",
            data.n_users, cfg.system.n_users
        )));
    }
    let split = cfg.split.split(data.len());
    if split.train.len() < 2 || split.validation.is_empty() {
        return Err(CliError::Config(
            "dataset too small for the configured split".into(),
        ));
    }
    let model = TwoStageModel::new(&cfg.architecture, system.n_antennas, cfg.training.seed)?;
    let start = Instant::now();
    let res = fit(
        model,
        &data.samples[split.train.clone()],
        &data.samples[split.validation.clone()],
        &system,
        &cfg.training,
    )?;
    let seconds = start.elapsed().as_secs_f64();
    checkpoint::save(&res.best, &out.join("checkpoint.ckpt"))?;
    res.report
        .write_csv(File::create(out.join("train_report.csv"))?)?;
    if !split.test.is_empty() {
        let m = evaluate(
            &res.best,
            &data.samples[split.test.clone()],
            &system,
            cfg.training.utility,
        )?;
        Metrics::write_csv(
            &[(data.content_hash(), m)],
            File::create(out.join("test_metrics.csv"))?,
        )?;
    }
    write_resolved(cfg, "train", out)?;
    println!(
        "trained {} epochs in {seconds:.1}s ({:?}); best epoch {} with validation {} {:.4} (initial {:.4})",
        res.report.epochs.len(),
        res.report.stop_reason,
        res.report.best_epoch,
        cfg.training.utility.name(),
        res.report.best_val_utility,
        res.report.initial_val_utility
    );
    Ok(())
}

pub fn eval(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: Option<PathBuf>,
    data: Vec<PathBuf>,
) -> Result<(), CliError> {
    let model = load_model(cfg, checkpoint)?;
    let paths = if data.is_empty() {
        vec![required(None, &cfg.paths.dataset, "dataset")?]
    } else {
        data
    };
    let mut rows = Vec::new();
    for path in &paths {
        let (data, system) = load_dataset(cfg, path)?;
        let m = evaluate(&model, &data.samples, &system, cfg.training.utility)?;
        println!(
            "{}: K={} mean {} {:.4}, feasibility {}, {:.3} ms/sample",
            path.display(),
            m.n_users,
            m.utility.name(),
            m.mean_utility,
            m.feasibility_rate,
            m.mean_inference_ms
        );
        rows.push((data.content_hash(), m));
    }
    Metrics::write_csv(&rows, File::create(out.join("metrics.csv"))?)?;
    write_resolved(cfg, "eval", out)?;
    if rows.iter().any(|(_, m)| m.feasibility_rate < 1.0) {
        return Err(CliError::Validation("infeasible outputs found".into()));
    }
    Ok(())
}

pub fn baseline(
    cfg: &ExperimentConfig,
    out: &Path,
    method: BaselineMethod,
    data: Option<PathBuf>,
    layout: Layout,
    limit: Option<usize>,
) -> Result<(), CliError> {
    let path = required(data, &cfg.paths.dataset, "dataset")?;
    let (data, system) = load_dataset(cfg, &path)?;
    let kind = cfg.training.utility;
    let grid = cfg.grid.spec();
    let mode = match layout {
        Layout::Full => EquidistantMode::FullAperture,
        Layout::Half => EquidistantMode::HalfWavelength,
    };
    let fixed = equidistant_positions(&system, mode);
    let name = match method {
        BaselineMethod::Mrt => "mrt_equal_power",
        BaselineMethod::Zf => "zf_equal_power",
        BaselineMethod::Grid => "hzf_grid",
        BaselineMethod::Oracle => "position_grid_oracle",
    };
    let samples = &data.samples[..limit.unwrap_or(data.len()).min(data.len())];
    let mut w = csv::Writer::from_writer(File::create(out.join("baseline.csv"))?);
    w.write_record([
        "sample",
        "method",
        "utility",
        "seconds",
        "feasible",
        "mrt_utility",
        "zf_utility",
        "dominates_equal_power",
    ])?;
    let (mut total, mut infeasible, mut not_dominant) = (0.0, 0usize, 0usize);
    for (i, s) in samples.iter().enumerate() {
        let g = channel_matrix(&fixed, s, &system)?;
        let mrt = utility(&mrt_equal_power(&g, &system)?, &g, &system, kind)?;
        let zf = utility(&zf_equal_power(&g, &system)?, &g, &system, kind)?;
        let start = Instant::now();
        let (value, feasible) = match method {
            BaselineMethod::Mrt => (
                mrt,
                check_feasibility(&mrt_equal_power(&g, &system)?, &fixed, &system).passed(),
            ),
            BaselineMethod::Zf => (
                zf,
                check_feasibility(&zf_equal_power(&g, &system)?, &fixed, &system).passed(),
            ),
            BaselineMethod::Grid => {
                let r = hzf_grid_search(&g, &system, &grid, kind)?;
                (
                    r.utility,
                    check_feasibility(&r.beams, &fixed, &system).passed(),
                )
            }
            BaselineMethod::Oracle => {
                let r = position_grid_oracle(s, &system, &grid, kind)?;
                (
                    r.utility,
                    check_feasibility(&r.beams, &r.positions, &system).passed(),
                )
            }
        };
        let seconds = start.elapsed().as_secs_f64();
        let dominates = value >= mrt.max(zf) - 1e-12;
        total += value;
        infeasible += (!feasible) as usize;
        not_dominant += (!dominates) as usize;
        w.write_record([
            i.to_string(),
            name.to_string(),
            format!("{value:e}"),
            format!("{seconds:.6}"),
            feasible.to_string(),
            format!("{mrt:e}"),
            format!("{zf:e}"),
            dominates.to_string(),
        ])?;
    }
    w.flush()?;
    write_resolved(cfg, "baseline", out)?;
    println!(
        "{name}: mean {} {:.4} over {} samples; {} below the equal-power baselines",
        kind.name(),
        total / samples.len() as f64,
        samples.len(),
        not_dominant
    );
    if infeasible > 0 {
        return Err(CliError::Validation(format!(
            "{infeasible} infeasible baseline outputs"
        )));
    }
    Ok(())
}

pub fn gradcheck(
    cfg: &ExperimentConfig,
    out: &Path,
    scope: &str,
    seed: u64,
) -> Result<(), CliError> {
    let reports: Vec<GradCheckReport> = match scope {
        "all" => check_all_primitives(seed).map_err(fas_gnn::FasError::from)?,
        "pipeline" => {
            let model = TwoStageModel::new(&cfg.architecture, cfg.system.n_antennas, seed)?;
            let batch = fas_gnn::sample_dataset(&cfg.system, 8, seed).samples;
            [Utility::SumRate, Utility::EnergyEfficiency]
                .into_iter()
                .map(|kind| {
                    pipeline_gradcheck(
                        &model,
                        &batch,
                        &cfg.system,
                        kind,
                        PIPELINE_COORDS,
                        seed,
                        PIPELINE_STEP,
                        PIPELINE_TOLERANCE,
                    )
                })
                .collect::<Result<_, _>>()?
        }
        name if PRIMITIVES.contains(&name) => {
            vec![check_primitive(name, seed).map_err(fas_gnn::FasError::from)?]
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown gradcheck scope `{other}`; use all, pipeline or one of {}",
                PRIMITIVES.join(", ")
            )))
        }
    };
    let mut text = String::new();
    for (i, r) in reports.iter().enumerate() {
        let csv = r.to_csv();
        text.push_str(if i == 0 {
            &csv
        } else {
            csv.split_once('\n').map_or("", |(_, rest)| rest)
        });
        println!(
            "{} {}: max rel {:.2e} (tolerance {:e})",
            if r.passed() { "pass" } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.tolerance
        );
    }
    std::fs::write(out.join("gradcheck.csv"), text)?;
    write_resolved(cfg, "gradcheck", out)?;
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(CliError::Validation(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

pub fn bench(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    samples: usize,
) -> Result<(), CliError> {
    let model = load_model(cfg, checkpoint)?;
    let path = required(data, &cfg.paths.dataset, "dataset")?;
    let (data, system) = load_dataset(cfg, &path)?;
    let set = &data.samples[..samples.min(data.len())];
    let kind = cfg.training.utility;
    infer(
        &model,
        &set[..set.len().min(4)],
        &system,
        &PositionSource::Learned,
        kind,
        1,
    )?;
    let mut single = Vec::with_capacity(set.len());
    for s in set {
        let start = Instant::now();
        infer(
            &model,
            std::slice::from_ref(s),
            &system,
            &PositionSource::Learned,
            kind,
            1,
        )?;
        single.push(1e3 * start.elapsed().as_secs_f64());
    }
    let start = Instant::now();
    infer(
        &model,
        set,
        &system,
        &PositionSource::Learned,
        kind,
        set.len(),
    )?;
    let batched = 1e3 * start.elapsed().as_secs_f64() / set.len() as f64;
    let mean = single.iter().sum::<f64>() / single.len() as f64;
    let mut w = csv::Writer::from_writer(File::create(out.join("bench.csv"))?);
    w.write_record(["mode", "n", "k", "samples", "mean_ms", "median_ms"])?;
    let (n, k) = (system.n_antennas.to_string(), system.n_users.to_string());
    let count = set.len().to_string();
    w.write_record([
        "batch1",
        &n,
        &k,
        &count,
        &format!("{mean:.6}"),
        &format!("{:.6}", median(&single)),
    ])?;
    w.write_record([
        "batched",
        &n,
        &k,
        &count,
        &format!("{batched:.6}"),
        &format!("{batched:.6}"),
    ])?;
    w.flush()?;
    write_resolved(cfg, "bench", out)?;
    println!(
        "(N={n}, K={k}) batch 1: mean {mean:.3} ms, median {:.3} ms; batched: {batched:.3} ms/sample",
        median(&single)
    );
    Ok(())
}
