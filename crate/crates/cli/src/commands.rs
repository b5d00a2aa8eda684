use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mim_core::cells::CellKind;
use mim_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use mim_core::data::{generate_moving_glyphs, load_dataset, save_dataset, SequenceDataset};
use mim_core::metrics::{evaluate, saturation_rate, EvalOptions, MetricReport, SaturationMode, SaturationReport};
use mim_core::network::{
    copy_last_frame, frame_range, predict, predict_with_diagnostics, Network, NetworkConfig, TrainConfig,
    TrainOptions, Trainer,
};
use mim_core::optim::AdamConfig;
use mim_core::Tensor;
use serde_json::json;

use crate::config::{Baseline, DiagnoseRun, EvalRun, GenDataRun, LayerSelect, ModeSelect, RunConfig, TrainRun};
use crate::error::{CliError, CliResult};

pub const CHECKPOINT_FILE: &str = "checkpoint.mimc";
pub const LOSS_LOG: &str = "loss.jsonl";
pub const CRASH_REPORT: &str = "crash.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BASELINE_METRICS_FILE: &str = "metrics_copy.jsonl";
pub const SATURATION_FILE: &str = "saturation.jsonl";

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Writes the resolved configuration next to a command's outputs.
fn write_resolved<C: RunConfig>(run: &C, path: &Path) -> CliResult<()> {
    write_file(path, &run.to_text())
}

pub fn gen_data(run: &GenDataRun) -> CliResult<()> {
    let ds = generate_moving_glyphs(&run.generator)?;
    if let Some(dir) = run.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_dataset(&run.out, &ds)?;
    let resolved = run.out.with_extension("cfg");
    write_resolved(run, &resolved)?;
    let g = &run.generator;
    println!(
        "wrote {} sequences x {} frames of 1x{}x{} (seed {}) to {}",
        ds.len(),
        g.length,
        g.height,
        g.width,
        g.seed,
        run.out.display()
    );
    println!("resolved config: {}", resolved.display());
    Ok(())
}

/// Metadata keys stored in training checkpoints. A resumed run must agree
/// on all of them to retrace the original batch order and loss.
const TRAIN_META: [&str; 4] = ["batch_size", "shuffle_seed", "supervise_input_phase", "clip_norm"];

fn train_metadata(run: &TrainRun) -> Vec<(&'static str, String)> {
    let entries = run.entries();
    TRAIN_META
        .iter()
        .map(|&k| (k, entries.iter().find(|(e, _)| *e == k).expect("train key").1.clone()))
        .collect()
}

/// Takes the network configuration and training keys stored in the
/// checkpoint `resume` points at as the starting point of `run`, so only
/// deliberate changes need restating.
pub fn seed_from_checkpoint(run: &mut TrainRun, ckpt: &Checkpoint) -> CliResult<()> {
    run.network = ckpt.config().clone();
    for k in TRAIN_META {
        if let Some(v) = ckpt.metadata.get(k) {
            run.set(k, v)?;
        }
    }
    Ok(())
}

fn check_resume(run: &TrainRun, ckpt: &Checkpoint) -> CliResult<()> {
    let ours = run.network.entries();
    for ((k, theirs), (_, mine)) in ckpt.config().entries().iter().zip(&ours) {
        if theirs != mine {
            return Err(mim_core::Error::ConfigMismatch(format!("{k}: checkpoint has {theirs}, run requests {mine}")).into());
        }
    }
    for (k, mine) in train_metadata(run) {
        if let Some(theirs) = ckpt.metadata.get(k) {
            if *theirs != mine {
                return Err(
                    mim_core::Error::ConfigMismatch(format!("{k}: checkpoint has {theirs}, run requests {mine}")).into(),
                );
            }
        }
    }
    if ckpt.step > run.steps {
        return Err(CliError::config(format!(
            "checkpoint is at step {} but steps = {}",
            ckpt.step, run.steps
        )));
    }
    Ok(())
}

fn save_training_checkpoint(trainer: &Trainer, run: &TrainRun, path: &Path) -> CliResult<()> {
    let mut ckpt = Checkpoint::new(trainer.network.clone());
    ckpt.adam = Some(trainer.adam.clone());
    ckpt.step = trainer.step;
    for (k, v) in train_metadata(run) {
        ckpt.metadata.insert(k.to_owned(), v);
    }
    // Write then rename so an interrupted save never clobbers the last
    // good checkpoint.
    let tmp = path.with_extension("mimc.tmp");
    save_checkpoint(&tmp, &ckpt)?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn train(run: &TrainRun, resume: Option<Checkpoint>) -> CliResult<()> {
    let data_path = run.data.as_ref().expect("validated");
    let dataset = load_dataset(data_path)?;
    create_dir(&run.out)?;
    write_resolved(run, &run.out.join("train.cfg"))?;

    let config = TrainConfig {
        batch_size: run.batch_size,
        shuffle_seed: run.shuffle_seed,
        options: TrainOptions {
            adam: AdamConfig {
                lr: run.lr,
                ..AdamConfig::default()
            },
            supervise_input_phase: run.supervise_input_phase,
            clip_norm: run.clip_norm,
        },
    };
    let ckpt_path = run.out.join(CHECKPOINT_FILE);
    let mut last_good: Option<(PathBuf, u64)> = None;
    let mut trainer = match resume {
        Some(ckpt) => {
            check_resume(run, &ckpt)?;
            let mut adam = ckpt.adam;
            if let Some(a) = adam.as_mut() {
                a.config.lr = run.lr;
            }
            last_good = run.resume.clone().map(|p| (p, ckpt.step));
            Trainer::resume(ckpt.network, adam, ckpt.step, config)
        }
        None => Trainer::new(Network::new(run.network.clone())?, config),
    };

    let log_path = run.out.join(LOSS_LOG);
    let log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(run.resume.is_some())
        .truncate(run.resume.is_none())
        .open(&log_path)
        .map_err(|e| CliError::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    let log_err = |e| CliError::io(&log_path, e);

    println!(
        "training {} parameters on {} sequences from step {} to {}",
        trainer.network.params.scalar_count(),
        dataset.len(),
        trainer.step,
        run.steps
    );
    let mut saved_at = None;
    while trainer.step < run.steps {
        let report = match trainer.step_on(&dataset) {
            Ok(r) => r,
            Err(e @ mim_core::Error::NonFinite { .. }) => {
                log.flush().map_err(log_err)?;
                write_crash_report(&run.out, trainer.step, &e, last_good.as_ref())?;
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        let line = json!({
            "step": trainer.step,
            "loss": report.loss,
            "sampling_probability": report.sampling_probability,
            "grad_norm": report.grad_norm,
        });
        writeln!(log, "{line}").map_err(log_err)?;
        if run.checkpoint_every > 0 && trainer.step % run.checkpoint_every == 0 {
            log.flush().map_err(log_err)?;
            save_training_checkpoint(&trainer, run, &ckpt_path)?;
            last_good = Some((ckpt_path.clone(), trainer.step));
            saved_at = Some(trainer.step);
        }
        if run.log_every > 0 && trainer.step % run.log_every == 0 {
            println!(
                "step {:>6}  loss {:.5}  p(ground truth) {:.3}",
                trainer.step, report.loss, report.sampling_probability
            );
        }
    }
    log.flush().map_err(log_err)?;
    if saved_at != Some(trainer.step) {
        save_training_checkpoint(&trainer, run, &ckpt_path)?;
    }
    println!("checkpoint: {}", ckpt_path.display());
    println!("loss log: {}", log_path.display());
    Ok(())
}

fn write_crash_report(out: &Path, step: u64, err: &mim_core::Error, last_good: Option<&(PathBuf, u64)>) -> CliResult<()> {
    let report = json!({
        "step": step,
        "error": err.to_string(),
        "last_checkpoint": last_good.map(|(p, _)| p.display().to_string()),
        "last_checkpoint_step": last_good.map(|(_, s)| *s),
    });
    let path = out.join(CRASH_REPORT);
    write_file(&path, &format!("{report:#}\n"))?;
    eprintln!("crash report: {}", path.display());
    Ok(())
}

/// `(start, len)` of consecutive chunks of at most `batch_size` sequences.
fn chunks(ds: &SequenceDataset, batch_size: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    (0..ds.len())
        .step_by(batch_size)
        .map(move |start| (start, batch_size.min(ds.len() - start)))
}

fn predict_all(network: &Network, ds: &SequenceDataset, batch_size: usize) -> CliResult<Tensor> {
    let parts = chunks(ds, batch_size)
        .map(|(start, len)| predict(network, &ds.slice(start, len)?.data))
        .collect::<mim_core::Result<Vec<_>>>()?;
    Ok(Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)?)
}

fn print_report(label: &str, report: &MetricReport) {
    println!("{label}");
    println!("  frame        mse        mae     ssim");
    for t in 0..report.horizon {
        println!(
            "  {:>5} {:>10.4} {:>10.4} {:>8.4}",
            t + 1,
            report.mse.per_frame[t],
            report.mae.per_frame[t],
            report.ssim.per_frame[t]
        );
    }
    println!(
        "  {:>5} {:>10.4} {:>10.4} {:>8.4}",
        "mean", report.mse.mean, report.mae.mean, report.ssim.mean
    );
    for (thr, s) in &report.csi {
        println!("  csi@{thr}: {:.4}", s.mean);
    }
    if let Some(s) = &report.sharpness {
        println!("  sharpness: {:.3} dB", s.mean);
    }
}

pub fn eval(run: &EvalRun) -> CliResult<()> {
    let ds = load_dataset(run.data.as_ref().expect("validated"))?;
    if ds.is_empty() {
        return Err(CliError::config("evaluation dataset is empty"));
    }
    let network = match &run.checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let mut requested = ckpt.config().clone();
            for (k, v) in &run.network_overrides {
                requested.set(k, v)?;
            }
            ckpt.config().ensure_compatible(&requested)?;
            Some(ckpt.network)
        }
        None => None,
    };
    let (input_len, horizon) = match &network {
        Some(n) => (n.config.input_len, n.config.horizon),
        None => (run.input_len, run.horizon),
    };
    if ds.seq_len() < input_len + horizon {
        return Err(mim_core::Error::Shape {
            op: "eval",
            detail: format!("sequences have {} frames, need {input_len} + {horizon}", ds.seq_len()),
        }
        .into());
    }
    let gt = frame_range(&ds.data, input_len, horizon)?;
    let options = EvalOptions {
        scale: run.scale,
        sharpness: run.sharpness,
        thresholds: run.thresholds.clone(),
        ..EvalOptions::default()
    };

    create_dir(&run.out)?;
    write_resolved(run, &run.out.join("eval.cfg"))?;
    if let Some(net) = &network {
        let pred = predict_all(net, &ds, run.batch_size)?;
        let report = evaluate(&pred, &gt, &options)?;
        let path = run.out.join(METRICS_FILE);
        write_file(&path, &report.to_json_lines())?;
        print_report(&format!("model ({} sequences) -> {}", ds.len(), path.display()), &report);
    }
    if run.baseline == Baseline::Copy {
        let pred = copy_last_frame(&ds.data, input_len, horizon)?;
        let report = evaluate(&pred, &gt, &options)?;
        let path = run.out.join(BASELINE_METRICS_FILE);
        write_file(&path, &report.to_json_lines())?;
        print_report(&format!("copy-last-frame baseline -> {}", path.display()), &report);
    }
    Ok(())
}

fn mode_name(mode: SaturationMode) -> &'static str {
    match mode {
        SaturationMode::ForgetGate => "f_t",
        SaturationMode::VirtualRatio => "|T/C|",
    }
}

/// The criterion for `kind`, or an error if the cell records no such
/// diagnostic.
fn layer_mode(select: ModeSelect, kind: CellKind, layer: usize) -> CliResult<SaturationMode> {
    let native = match kind {
        CellKind::StLstm => SaturationMode::ForgetGate,
        CellKind::Mim { .. } => SaturationMode::VirtualRatio,
    };
    match select {
        ModeSelect::Auto => Ok(native),
        ModeSelect::Fixed(m) if m == native => Ok(m),
        ModeSelect::Fixed(m) => Err(CliError::config(format!(
            "layer {layer} is {} and records no {} diagnostics; choose mode = {} or another layer",
            match kind {
                CellKind::StLstm => "an ST-LSTM cell",
                CellKind::Mim { .. } => "a MIM block",
            },
            mode_name(m),
            if native == SaturationMode::ForgetGate { "forget" } else { "ratio" },
        ))),
    }
}

pub fn diagnose_gates(run: &DiagnoseRun) -> CliResult<()> {
    let ckpt = load_checkpoint(run.checkpoint.as_ref().expect("validated"))?;
    let mut ds = load_dataset(run.data.as_ref().expect("validated"))?;
    if run.count > 0 && run.count < ds.len() {
        ds = ds.slice(0, run.count)?;
    }
    if ds.is_empty() {
        return Err(CliError::config("diagnosis dataset is empty"));
    }
    let cfg: &NetworkConfig = ckpt.config();
    let layers: Vec<usize> = match run.layer {
        LayerSelect::All => (1..=cfg.layers).collect(),
        LayerSelect::One(l) if l <= cfg.layers => vec![l],
        LayerSelect::One(l) => {
            return Err(CliError::config(format!("layer {l} out of range (model has {})", cfg.layers)));
        }
    };
    let modes = layers
        .iter()
        .map(|&l| layer_mode(run.mode, cfg.layer_kind(l), l))
        .collect::<CliResult<Vec<_>>>()?;

    // Saturated and counted cells per layer and timestamp, pooled over chunks.
    let steps = cfg.sequence_len() - 1;
    let mut sat = vec![vec![0u64; steps]; layers.len()];
    let mut counted = vec![vec![0u64; steps]; layers.len()];
    for (start, len) in chunks(&ds, run.batch_size) {
        let (_, diags) = predict_with_diagnostics(&ckpt.network, &ds.slice(start, len)?.data, true)?;
        for (i, (&l, &mode)) in layers.iter().zip(&modes).enumerate() {
            let per_step: Vec<_> = diags.iter().map(|d| &d[l - 1]).collect();
            let r = saturation_rate(&per_step, run.threshold, mode)?;
            for t in 0..steps {
                // Exact: the rate is a ratio of integers well below 2^53.
                sat[i][t] += (r.per_timestamp[t] * r.counted[t] as f64).round() as u64;
                counted[i][t] += r.counted[t];
            }
        }
    }

    create_dir(&run.out)?;
    write_resolved(run, &run.out.join("diagnose.cfg"))?;
    let mut text = String::new();
    for (i, (&l, &mode)) in layers.iter().zip(&modes).enumerate() {
        let rate = |s: u64, c: u64| if c == 0 { 0.0 } else { s as f64 / c as f64 };
        let report = SaturationReport {
            mode,
            threshold: run.threshold,
            per_timestamp: sat[i].iter().zip(&counted[i]).map(|(&s, &c)| rate(s, c)).collect(),
            counted: counted[i].clone(),
            mean: rate(sat[i].iter().sum(), counted[i].iter().sum()),
        };
        text.push_str(&report.to_json_lines(l));
        let curve: Vec<String> = report.per_timestamp.iter().map(|r| format!("{r:.3}")).collect();
        println!(
            "layer {l} {} < {}: mean {:.4}  per step [{}]",
            mode_name(mode),
            run.threshold,
            report.mean,
            curve.join(" ")
        );
    }
    let path = run.out.join(SATURATION_FILE);
    write_file(&path, &text)?;
    println!("report: {}", path.display());
    Ok(())
}
