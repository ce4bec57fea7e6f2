use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use beamtrack::channel::dft_codebook;
use beamtrack::gradcheck::full_model_gradcheck;
use beamtrack::metrics::{evaluate, evaluate_oracle_probe, MetricsReport};
use beamtrack::model::{count_params, read_btmd, write_btmd, ModelConfig, ModelParams};
use beamtrack::scene::{build_dataset, read_btds, write_btds, write_meta, Dataset};
use beamtrack::train::fit_with;
use beamtrack::{Error, Result};

use crate::config::{EvalSplit, RunConfig};
use crate::Common;

/// Process exit status for a failed command.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::Io(_) => 3,
        Error::Format(_) => 4,
        Error::Mismatch(_) => 5,
        _ => 1,
    }
}

fn setup(common: &Common, extra: &[(String, String)]) -> Result<RunConfig> {
    let mut overrides = common.overrides();
    overrides.extend_from_slice(extra);
    let cfg = RunConfig::load(common.config.as_deref(), &overrides)?;
    // fails only if a global pool already exists, which cannot happen in this process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    Ok(cfg)
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes `bytes` to `path` and the effective config to `path.meta`.
fn write_output(path: &Path, bytes: &[u8], command: &str, cfg: &RunConfig, notes: &[(String, String)]) -> Result<()> {
    fs::write(path, bytes)?;
    let mut meta = format!("# beamtrack {command}\n").into_bytes();
    for (k, v) in notes {
        meta.extend_from_slice(format!("# {k}: {v}\n").as_bytes());
    }
    write_meta(&mut meta, &cfg.to_entries())?;
    fs::write(sidecar_path(path), meta)?;
    Ok(())
}

fn echo(cfg: &RunConfig) {
    println!("effective config:");
    for (k, v) in cfg.to_entries() {
        println!("  {k}={v}");
    }
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_dataset(path: &Path, split: f64) -> Result<Dataset> {
    read_btds(&mut open(path)?, split)
}

/// Dataset-side shapes come from the file, not the config.
fn adopt_dataset_shape(cfg: &mut RunConfig, ds: &Dataset) {
    let m = ds.meta();
    cfg.scene.frames_total = m.frames_total;
    cfg.scene.height = m.height;
    cfg.scene.width = m.width;
    cfg.history = m.history;
    cfg.horizon = m.horizon;
    cfg.beams = m.codebook_size;
    cfg.model.history = m.history;
    cfg.model.horizon = m.horizon;
    cfg.model.codebook_size = m.codebook_size;
    cfg.model.frame_height = m.height;
    cfg.model.frame_width = m.width;
}

pub fn gen(common: &Common, out: &Path) -> Result<ExitCode> {
    let cfg = setup(common, &[])?;
    echo(&cfg);
    let codebook = dft_codebook(&cfg.ula, cfg.beams)?;
    let ds = build_dataset(
        &cfg.scene,
        &cfg.ula,
        &codebook,
        &cfg.multipath,
        cfg.history,
        cfg.horizon,
        cfg.split,
        cfg.seed,
    )?;
    let mut bytes = Vec::new();
    write_btds(&mut bytes, &ds)?;
    let samples = ds.meta().sample_count();
    let hist = ds.label_histogram();
    let hist_text = hist.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    let notes = [("samples".to_string(), samples.to_string()), ("label histogram".to_string(), hist_text.clone())];
    write_output(out, &bytes, "gen", &cfg, &notes)?;
    println!("samples: {samples} (train {}, validation {})", ds.split().train.len(), ds.split().validation.len());
    println!("label histogram: {hist_text}");
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn train(common: &Common, data: &Path, out: &Path, report: &Path, epochs: Option<usize>) -> Result<ExitCode> {
    let extra: Vec<(String, String)> = epochs.map(|e| ("epochs".to_string(), e.to_string())).into_iter().collect();
    let mut cfg = setup(common, &extra)?;
    let ds = load_dataset(data, cfg.split)?;
    adopt_dataset_shape(&mut cfg, &ds);
    cfg.model.validate()?;
    echo(&cfg);
    let params = ModelParams::<f32>::init(&cfg.model, cfg.seed)?;
    println!("parameters: {}", params.count_params());
    let start = Instant::now();
    let (best, rep) = fit_with(params, &ds, &cfg.train, |r| {
        println!(
            "epoch {:>3}  train {:.6}  val {:.6}  lr {:.3e}  ({:.1}s)",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.lr,
            start.elapsed().as_secs_f64()
        );
    })?;
    let mut bytes = Vec::new();
    write_btmd(&mut bytes, &best)?;
    let notes = match (rep.best_epoch, rep.best_val_loss()) {
        (Some(i), Some(v)) => {
            println!("best epoch {} (val loss {v:.6})", rep.epochs[i].epoch);
            vec![("best epoch".to_string(), rep.epochs[i].epoch.to_string()), ("best val loss".to_string(), v.to_string())]
        }
        _ => {
            println!("no epochs run; writing the initial model");
            Vec::new()
        }
    };
    write_output(out, &bytes, "train", &cfg, &notes)?;
    write_output(report, rep.to_csv().as_bytes(), "train", &cfg, &notes)?;
    println!("wrote {} and {}", out.display(), report.display());
    Ok(ExitCode::SUCCESS)
}

fn print_report(m: &MetricsReport) {
    println!("{:>6} {:>8} {:>8} {:>8} {:>8} {:>10}", "slot", "top1", "top3", "top5", "dba", "loss");
    let row = |name: String, s: &beamtrack::metrics::SlotMetrics| {
        println!("{name:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>10.6}", s.top1, s.top3, s.top5, s.dba, s.loss);
    };
    for (i, s) in m.per_slot.iter().enumerate() {
        row(i.to_string(), s);
    }
    row("avg".into(), &m.average);
}

pub fn eval(common: &Common, data: &Path, model: Option<&Path>, report: &Path, probe_oracle: bool) -> Result<ExitCode> {
    let mut cfg = setup(common, &[])?;
    let ds = load_dataset(data, cfg.split)?;
    adopt_dataset_shape(&mut cfg, &ds);
    let params = match model {
        Some(path) => {
            let p: ModelParams<f32> = read_btmd(&mut open(path)?)?;
            p.config().check_dataset(ds.meta())?;
            cfg.model = p.config().clone();
            Some(p)
        }
        None => None,
    };
    echo(&cfg);
    let timestamps: Vec<usize> = match cfg.eval_split {
        EvalSplit::Validation => ds.split().validation.clone(),
        EvalSplit::All => ds.meta().timestamps().collect(),
    };
    let metrics = match (&params, probe_oracle) {
        (_, true) => evaluate_oracle_probe(&ds, &timestamps, &cfg.metrics)?,
        (Some(p), false) => evaluate(p, &ds, &timestamps, &cfg.metrics)?,
        (None, false) => return Err(Error::Usage("eval needs --model or --probe-oracle".into())),
    };
    print_report(&metrics);
    let mut notes = vec![("samples".to_string(), metrics.samples.to_string())];
    if probe_oracle {
        notes.push(("mode".to_string(), "oracle probe".to_string()));
    }
    write_output(report, metrics.to_csv().as_bytes(), "eval", &cfg, &notes)?;
    let plot = report.with_extension("dat");
    write_output(&plot, metrics.plot_data().as_bytes(), "eval", &cfg, &notes)?;
    println!("wrote {} and {}", report.display(), plot.display());
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(common: &Common, corrupt: Option<&str>) -> Result<ExitCode> {
    let cfg = setup(common, &[])?;
    let model = ModelConfig {
        mha: cfg.model.mha,
        ..ModelConfig::tiny()
    };
    println!(
        "tiny network: {} parameters, seed {}, step {:e}, tolerance {:e}",
        count_params(&model),
        cfg.gradcheck.seed,
        cfg.gradcheck.step,
        cfg.gradcheck.tolerance
    );
    let start = Instant::now();
    let report = full_model_gradcheck(&model, &cfg.gradcheck, corrupt)?;
    let mut names: Vec<&str> = Vec::new();
    for e in &report.entries {
        if !names.contains(&e.name.as_str()) {
            names.push(&e.name);
        }
    }
    for name in &names {
        let worst = report.entries.iter().filter(|e| e.name == *name).map(|e| e.rel_err).fold(0.0, f64::max);
        println!("  {name:<16} worst rel err {worst:.3e}");
    }
    println!(
        "{} entries checked in {:.2}s, worst {:.3e}",
        report.entries.len(),
        start.elapsed().as_secs_f64(),
        report.worst()
    );
    if report.passed() {
        println!("PASS");
        return Ok(ExitCode::SUCCESS);
    }
    let mut failed: Vec<&str> = report.failures().map(|e| e.name.as_str()).collect();
    failed.dedup();
    for e in report.failures() {
        eprintln!(
            "  {}[{}]: analytic {:.6e}, numeric {:.6e}, rel err {:.3e}",
            e.name, e.index, e.analytic, e.numeric, e.rel_err
        );
    }
    println!("FAIL: {}", failed.join(", "));
    Ok(ExitCode::from(1))
}
