use std::path::{Path, PathBuf};

use timegrad::diffusion::DiffusionSchedule;
use timegrad::engine::{
    forecast, format_train_log, load_checkpoint, plot_data, read_samples_csv, rolling_forecast, save_checkpoint, train,
    write_quantiles_csv, write_samples_csv, ForecastSampleSet,
};
use timegrad::metrics::{CrpsReport, SampleCube};
use timegrad::numcore::RngStream;
use timegrad::pipeline::{load_dataset, Dataset, DatasetFormat};
use timegrad::synthetic::{ar1, VarProcess};
use timegrad::{Error, Result};

use crate::config::{RunConfig, SyntheticKind};
use crate::output::Staging;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const QUANTILES_FILE: &str = "quantiles.csv";
pub const PLOT_FILE: &str = "plot.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const PER_ENTITY_FILE: &str = "metrics_per_entity.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

/// Level added to the generated AR(1) series so that mean scaling is
/// well defined.
const AR1_LEVEL: f64 = 10.0;

fn load(cfg: &RunConfig) -> Result<Dataset> {
    load_dataset(cfg.data_path()?, cfg.data_format)
}

/// The rows before the held-out test windows.
fn training_part(cfg: &RunConfig, ds: &Dataset) -> Result<Dataset> {
    let held = cfg.test_windows * cfg.prediction_steps;
    if held >= ds.len() {
        return Err(Error::Config(format!(
            "data.test_windows = {} of {} steps leaves no training rows in a dataset of {} rows",
            cfg.test_windows,
            cfg.prediction_steps,
            ds.len()
        )));
    }
    ds.slice(0..ds.len() - held)
}

fn io_write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ds = load(cfg)?;
    let part = training_part(cfg, &ds)?;
    let mcfg = cfg.model_config(ds.dim(), ds.freq());
    let out = train(&part, &mcfg, &cfg.train)?;
    let mut st = Staging::new(&cfg.output_dir)?;
    save_checkpoint(&out.checkpoint, &st.file(CHECKPOINT_FILE)?)?;
    io_write(&st.file(TRAIN_LOG_FILE)?, &format_train_log(&out.log))?;
    st.commit()
}

pub fn cmd_forecast(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<PathBuf>> {
    let default_ck = cfg.output_dir.join(CHECKPOINT_FILE);
    let ck = load_checkpoint(checkpoint.unwrap_or(&default_ck))?;
    let ds = load(cfg)?;
    let model = &ck.model;
    let rng = RngStream::new(cfg.forecast_seed);
    let sets: Vec<ForecastSampleSet> = if cfg.test_windows > 0 {
        rolling_forecast(model, &ds, cfg.test_windows, cfg.samples, &rng)?
            .into_iter()
            .map(|(fs, _)| fs)
            .collect()
    } else {
        vec![forecast(model, &ds, cfg.samples, &rng)?]
    };
    let plot = plot_data(&sets, &cfg.quantiles, ds.names())?;
    let plot = serde_json::to_string_pretty(&plot).map_err(|e| Error::Contract(e.to_string()))?;
    let mut st = Staging::new(&cfg.output_dir)?;
    write_samples_csv(&st.file(SAMPLES_FILE)?, &sets)?;
    write_quantiles_csv(&st.file(QUANTILES_FILE)?, &sets, &cfg.quantiles)?;
    io_write(&st.file(PLOT_FILE)?, &(plot + "\n"))?;
    st.commit()
}

/// Pairs each forecast window with the truth rows it covers, assuming the
/// windows are the last `windows * steps` rows of `truth`.
pub fn align_truth(cubes: Vec<(usize, SampleCube)>, truth: &Dataset) -> Result<Vec<(SampleCube, Vec<Vec<f64>>)>> {
    let k = cubes.len();
    let (steps, dim) = (cubes[0].1.steps(), cubes[0].1.dim());
    if dim != truth.dim() {
        return Err(Error::Contract(format!(
            "forecast has {dim} entities but the truth has {}",
            truth.dim()
        )));
    }
    if k * steps > truth.len() {
        return Err(Error::Contract(format!(
            "forecast horizon of {k} windows x {steps} steps = {} rows exceeds the {} truth rows",
            k * steps,
            truth.len()
        )));
    }
    let first = truth.len() - k * steps;
    Ok(cubes
        .into_iter()
        .map(|(w, cube)| {
            let start = first + w * steps;
            (cube, truth.values()[start..start + steps].to_vec())
        })
        .collect())
}

pub fn cmd_evaluate(cfg: &RunConfig, forecast_file: Option<&Path>) -> Result<Vec<PathBuf>> {
    let default_samples = cfg.output_dir.join(SAMPLES_FILE);
    let cubes = read_samples_csv(forecast_file.unwrap_or(&default_samples))?;
    let truth = load(cfg)?;
    let windows = align_truth(cubes, &truth)?;
    let report = CrpsReport::evaluate(&windows)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Contract(e.to_string()))?;
    let mut per_entity = String::from("entity,name,crps\n");
    for (d, v) in report.crps_per_entity.iter().enumerate() {
        per_entity.push_str(&format!("{d},{},{v:?}\n", truth.names()[d]));
    }
    let mut st = Staging::new(&cfg.output_dir)?;
    io_write(&st.file(METRICS_FILE)?, &(json + "\n"))?;
    io_write(&st.file(PER_ENTITY_FILE)?, &per_entity)?;
    st.commit()
}

/// Mean and standard error of the CRPS_sum over repeats for one length.
fn ablation_point(cfg: &RunConfig, ds: &Dataset, part: &Dataset, n: usize) -> Result<(f64, f64)> {
    let mut mcfg = cfg.model_config(ds.dim(), ds.freq());
    mcfg.diffusion_steps = n;
    let mut scores = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats as u64 {
        let mut tcfg = cfg.train.clone();
        tcfg.seed = cfg.train.seed + r;
        let out = train(part, &mcfg, &tcfg)?;
        let rng = RngStream::new(cfg.forecast_seed + r);
        let windows: Vec<_> = rolling_forecast(&out.checkpoint.model, ds, cfg.test_windows, cfg.samples, &rng)?
            .into_iter()
            .map(|(fs, truth)| (fs.cube, truth))
            .collect();
        scores.push(CrpsReport::evaluate(&windows)?.crps_sum);
    }
    let k = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / k;
    let stderr = if scores.len() > 1 {
        (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt() / k.sqrt()
    } else {
        f64::NAN
    };
    Ok((mean, stderr))
}

pub fn cmd_ablate_n(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    if cfg.test_windows == 0 {
        return Err(Error::Config(
            "ablation needs data.test_windows >= 1 to score against".into(),
        ));
    }
    let ds = load(cfg)?;
    let part = training_part(cfg, &ds)?;
    let results: Vec<Result<(f64, f64)>> = if cfg.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = cfg
                .n_list
                .iter()
                .map(|&n| {
                    let (ds, part) = (&ds, &part);
                    s.spawn(move || ablation_point(cfg, ds, part, n))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Contract("ablation worker panicked".into())))
                })
                .collect()
        })
    } else {
        cfg.n_list.iter().map(|&n| ablation_point(cfg, &ds, &part, n)).collect()
    };
    let mut st = Staging::new(&cfg.output_dir)?;
    let path = st.file(ABLATION_FILE)?;
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Ingestion(e.to_string()))?;
    let csv_err = |e: csv::Error| Error::Ingestion(e.to_string());
    w.write_record(["N", "crps_sum", "stderr", "error"]).map_err(csv_err)?;
    for (n, r) in cfg.n_list.iter().zip(&results) {
        let row = match r {
            Ok((mean, se)) => [n.to_string(), format!("{mean:?}"), format!("{se:?}"), String::new()],
            Err(e) => {
                log::warn!("N = {n} failed: {e}");
                [
                    n.to_string(),
                    "NaN".into(),
                    "NaN".into(),
                    format!("{}: {e}", e.class().as_str()),
                ]
            }
        };
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    drop(w);
    st.commit()
}

/// `n,beta,alpha_bar,tilde_beta` rows of the linear schedule.
pub fn cmd_schedule(cfg: &RunConfig) -> Result<String> {
    let s = DiffusionSchedule::linear(cfg.diffusion_steps, cfg.beta_1, cfg.beta_n)?;
    let mut out = String::from("n,beta,alpha_bar,tilde_beta\n");
    for (i, ((b, ab), tb)) in s.betas().iter().zip(s.alpha_bars()).zip(s.tilde_betas()).enumerate() {
        out.push_str(&format!("{},{b:?},{ab:?},{tb:?}\n", i + 1));
    }
    Ok(out)
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut rng = RngStream::new(cfg.train.seed);
    let values = match cfg.generate_kind {
        SyntheticKind::Var => VarProcess::correlated_pair().generate(cfg.generate_length, 200, &mut rng),
        SyntheticKind::Ar1 => ar1(0.9, 1.0, cfg.generate_length, 200, &mut rng)
            .into_iter()
            .map(|r| vec![r[0] + AR1_LEVEL])
            .collect(),
    };
    let ds = Dataset::from_values(cfg.generate_freq, values)?;
    let mut st = Staging::new(&cfg.output_dir)?;
    match cfg.data_format {
        DatasetFormat::CsvWide => ds.write_csv_wide(&st.file("synthetic.csv")?)?,
        DatasetFormat::JsonLines => ds.write_jsonlines(&st.file("synthetic.jsonl")?)?,
    }
    st.commit()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_table_shape() {
        let t = cmd_schedule(&RunConfig::default()).unwrap();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 101);
        assert!(lines[1].ends_with(",0.0"), "{}", lines[1]);
        assert!(lines[100].starts_with("100,0.1,"));
    }

    #[test]
    fn truth_alignment_errors_name_lengths() {
        let truth = Dataset::from_values(timegrad::pipeline::Frequency::Day, vec![vec![1.0]; 5]).unwrap();
        let cube = SampleCube::new(1, 3, 1, vec![0.0; 3]).unwrap();
        let err = align_truth(vec![(0, cube.clone()), (1, cube)], &truth)
            .unwrap_err()
            .to_string();
        assert!(err.contains('6') && err.contains('5'), "{err}");
    }
}
