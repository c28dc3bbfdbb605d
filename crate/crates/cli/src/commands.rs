//! Drivers behind the CLI verbs: train, eval, rectify-report, dataset-gen.
//! Each returns structured results so integration tests can call them
//! in-process; the binary maps errors to exit codes.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use protoseg_core::metrics::{
    argmax_classes, dice_binary, jaccard_binary, sliding_window_predict, surface_metrics,
};
use protoseg_core::trainer::{predict_probabilities, rectify_quality, Trainer};
use protoseg_core::volume::{
    generate_synthetic_dataset_with_truth, DatasetSplit, LabelMask, Volume,
};

use crate::checkpoint::Checkpoint;
use crate::config::{apply_env_overrides, RunConfig};
use crate::formats::{load_dataset, save_dataset, RunLock};
use crate::{code_hash, CliError, CliResult};

/// Command-line overrides accepted by `train`.
#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    /// Feature switches: no-crln, no-cps, no-strongaug, agg-sum, rect-v1,
    /// rect-v2.
    pub ablate: Vec<String>,
    /// Prototypes per class.
    pub r: Option<usize>,
    /// Positive-centre blend weight.
    pub xi: Option<f64>,
    /// Iterations before rectification activates.
    pub s_iters: Option<u64>,
    pub tau: Option<f64>,
    pub tau_w: Option<f64>,
    pub resume: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub iterations: u64,
    pub final_checkpoint: PathBuf,
    pub final_loss: f64,
}

/// One line of the per-iteration metrics log (JSON lines).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_supervised: f64,
    pub loss_map_supervised: f64,
    pub loss_unsupervised: f64,
    pub loss_contrastive: f64,
    pub mu: f64,
    pub rectification_active: bool,
    pub reliable_before: f64,
    pub reliable_after: f64,
    pub pseudo_dice_before: Option<f64>,
    pub pseudo_dice_after: Option<f64>,
    pub anchor_count: usize,
}

/// One line of the checkpoint-time rectification-quality log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RectifyRecord {
    pub iteration: u64,
    pub cases: usize,
    pub reliable_before: f64,
    pub reliable_after: f64,
    pub dice_before: f64,
    pub dice_after: f64,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    seed: u64,
    config_hash: String,
    code_hash: &'a str,
    env_overrides: Vec<String>,
    cli_overrides: Vec<String>,
    files: Vec<&'a str>,
    config: String,
}

fn apply_cli_overrides(cfg: &mut RunConfig, args: &TrainArgs) -> CliResult<Vec<String>> {
    let mut applied = Vec::new();
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
        applied.push(format!("seed={seed}"));
    }
    for flag in &args.ablate {
        match flag.as_str() {
            "no-crln" => cfg.train.use_crln = false,
            "no-cps" => cfg.train.use_cps = false,
            "no-strongaug" => cfg.train.use_strong_aug = false,
            "agg-sum" => cfg.train.learned_aggregation = false,
            "rect-v1" => cfg.train.rectify_variant = "replace".into(),
            "rect-v2" => cfg.train.rectify_variant = "concat".into(),
            other => {
                return Err(CliError::Config(format!(
                    "unknown ablation '{other}' (expected no-crln|no-cps|no-strongaug|agg-sum|rect-v1|rect-v2)"
                )))
            }
        }
        applied.push(format!("ablate={flag}"));
    }
    if let Some(r) = args.r {
        cfg.train.prototypes_per_class = r;
        applied.push(format!("r={r}"));
    }
    if let Some(xi) = args.xi {
        cfg.train.xi = xi;
        applied.push(format!("xi={xi}"));
    }
    if let Some(s) = args.s_iters {
        cfg.train.rectify_after = s;
        applied.push(format!("s-iters={s}"));
    }
    if let Some(tau) = args.tau {
        cfg.train.tau = tau;
        applied.push(format!("tau={tau}"));
    }
    if let Some(tau_w) = args.tau_w {
        cfg.train.tau_w = tau_w;
        applied.push(format!("tau-w={tau_w}"));
    }
    Ok(applied)
}

/// Loads the dataset a config points at, together with reference masks for
/// the unlabelled cases when available.
fn load_configured_dataset(
    cfg: &RunConfig,
    data_dir: Option<&Path>,
) -> CliResult<(DatasetSplit, Option<Vec<LabelMask>>)> {
    match data_dir {
        Some(dir) => load_dataset(dir),
        None => match cfg.dataset.source.as_str() {
            "synthetic" => {
                let (split, truth) = generate_synthetic_dataset_with_truth(&cfg.synth_config())?;
                Ok((split, Some(truth)))
            }
            "disk" => load_dataset(Path::new(&cfg.dataset.dir)),
            other => Err(CliError::Config(format!("unknown dataset source '{other}'"))),
        },
    }
}

fn check_crops_fit(cfg: &RunConfig, split: &DatasetSplit) -> CliResult<()> {
    let aug = cfg.aug_config();
    for vol in split
        .labelled
        .iter()
        .map(|c| &c.volume)
        .chain(split.unlabelled.iter())
    {
        aug.validate(vol.dims())?;
    }
    Ok(())
}

/// Mean rectification quality of the teacher over a fixed subset of
/// unlabelled cases.
fn rectify_report_row(
    trainer: &Trainer<f64>,
    split: &DatasetSplit,
    truth: &[LabelMask],
    cases: usize,
    iteration: u64,
) -> CliResult<RectifyRecord> {
    let n = cases.min(split.unlabelled.len());
    let mut row = RectifyRecord {
        iteration,
        cases: n,
        reliable_before: 0.0,
        reliable_after: 0.0,
        dice_before: 0.0,
        dice_after: 0.0,
    };
    for (vol, mask) in split.unlabelled.iter().zip(truth).take(n) {
        let q = rectify_quality(trainer.teacher(), trainer.config().tau, vol, mask)?;
        row.reliable_before += q.reliable_before;
        row.reliable_after += q.reliable_after;
        row.dice_before += q.dice_before;
        row.dice_after += q.dice_after;
    }
    let inv = 1.0 / n.max(1) as f64;
    row.reliable_before *= inv;
    row.reliable_after *= inv;
    row.dice_before *= inv;
    row.dice_after *= inv;
    Ok(row)
}

/// Runs training end to end: dataset, trainer loop, metrics log,
/// checkpoints, and rectification-quality records.
pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainSummary> {
    let mut cfg = RunConfig::load(&args.config)?;
    let env_applied = apply_env_overrides(&mut cfg, |n| std::env::var(n).ok())?;
    let cli_applied = apply_cli_overrides(&mut cfg, args)?;
    cfg.validate_for_training()?;

    fs::create_dir_all(&args.out)?;
    let _lock = RunLock::acquire(&args.out)?;

    let (split, truth) = load_configured_dataset(&cfg, None)?;
    check_crops_fit(&cfg, &split)?;

    let mut trainer: Trainer<f64> = match &args.resume {
        Some(ckpt_path) => {
            let ck = Checkpoint::load(ckpt_path)?;
            if ck.config_hash != cfg.hash() {
                return Err(CliError::Config(format!(
                    "cannot resume: checkpoint config hash {} differs from current {}",
                    ck.config_hash,
                    cfg.hash()
                )));
            }
            ck.into_trainer()?
        }
        None => Trainer::new(cfg.train_config()?)?,
    };

    let manifest = RunManifest {
        seed: cfg.train.seed,
        config_hash: cfg.hash(),
        code_hash: code_hash(),
        env_overrides: env_applied,
        cli_overrides: cli_applied,
        files: vec!["config.toml", "metrics.jsonl", "rectify.jsonl", "final.ckpt"],
        config: cfg.canonical_toml(),
    };
    fs::write(
        args.out.join("manifest.toml"),
        toml::to_string(&manifest).expect("manifest serialises"),
    )?;
    fs::write(args.out.join("config.toml"), cfg.canonical_toml())?;

    let resuming = args.resume.is_some();
    let metrics_path = args.out.join("metrics.jsonl");
    let rectify_path = args.out.join("rectify.jsonl");
    let mut metrics_log = std::io::BufWriter::new(
        fs::OpenOptions::new()
            .create(true)
            .append(resuming)
            .truncate(!resuming)
            .write(true)
            .open(&metrics_path)?,
    );
    let mut rectify_log = std::io::BufWriter::new(
        fs::OpenOptions::new()
            .create(true)
            .append(resuming)
            .truncate(!resuming)
            .write(true)
            .open(&rectify_path)?,
    );

    let max_iters = cfg.train.max_iters as u64;
    let interval = cfg.train.checkpoint_interval;
    if trainer.iteration() >= max_iters {
        return Err(CliError::Config(format!(
            "checkpoint is already at iteration {} of {max_iters}",
            trainer.iteration()
        )));
    }
    let mut final_loss = f64::NAN;
    let mut warned_no_truth = false;
    while trainer.iteration() < max_iters {
        let stats = trainer.train_step(&split, truth.as_deref())?;
        final_loss = stats.loss_total;
        let record = MetricsRecord {
            iteration: stats.iteration,
            lr: stats.lr,
            loss_total: stats.loss_total,
            loss_supervised: stats.loss_supervised,
            loss_map_supervised: stats.loss_map_supervised,
            loss_unsupervised: stats.loss_unsupervised,
            loss_contrastive: stats.loss_contrastive,
            mu: stats.mu,
            rectification_active: stats.rectification_active,
            reliable_before: stats.reliable_before,
            reliable_after: stats.reliable_after,
            pseudo_dice_before: stats.pseudo_dice_before,
            pseudo_dice_after: stats.pseudo_dice_after,
            anchor_count: stats.anchor_count,
        };
        serde_json::to_writer(&mut metrics_log, &record)
            .map_err(|e| CliError::Data(format!("metrics log: {e}")))?;
        metrics_log.write_all(b"\n")?;

        let it = stats.iteration;
        if it % interval == 0 || it == max_iters {
            let ck = Checkpoint::from_trainer(&trainer, &cfg);
            ck.save(&args.out.join(format!("checkpoint-{it:06}.ckpt")))?;
            match &truth {
                Some(masks) => {
                    let row = rectify_report_row(
                        &trainer,
                        &split,
                        masks,
                        cfg.train.rectify_report_cases,
                        it,
                    )?;
                    serde_json::to_writer(&mut rectify_log, &row)
                        .map_err(|e| CliError::Data(format!("rectify log: {e}")))?;
                    rectify_log.write_all(b"\n")?;
                    println!(
                        "iter {it}/{max_iters} loss {:.4} mu {:.4} reliable {:.4}->{:.4} dice {:.4}->{:.4}",
                        stats.loss_total,
                        stats.mu,
                        row.reliable_before,
                        row.reliable_after,
                        row.dice_before,
                        row.dice_after
                    );
                }
                None => {
                    if !warned_no_truth {
                        eprintln!(
                            "note: dataset carries no reference masks for unlabelled cases; rectification-quality records are skipped"
                        );
                        warned_no_truth = true;
                    }
                    println!(
                        "iter {it}/{max_iters} loss {:.4} mu {:.4}",
                        stats.loss_total, stats.mu
                    );
                }
            }
        }
    }
    metrics_log.flush()?;
    rectify_log.flush()?;

    let final_path = args.out.join("final.ckpt");
    Checkpoint::from_trainer(&trainer, &cfg).save(&final_path)?;
    Ok(TrainSummary {
        run_dir: args.out.clone(),
        iterations: trainer.iteration(),
        final_checkpoint: final_path,
        final_loss,
    })
}

/// Command-line arguments for `eval`.
#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data_dir: Option<PathBuf>,
    pub window: Option<[usize; 3]>,
    pub stride: Option<[usize; 3]>,
    pub physical_spacing: bool,
    pub out: Option<PathBuf>,
}

/// One line of the evaluation log: metrics averaged over foreground
/// classes for one validation case. Surface distances are null when every
/// foreground class is empty on exactly one side (undefined distance).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub dice: f64,
    pub jaccard: f64,
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
}

#[derive(Debug)]
pub struct EvalSummary {
    pub records: Vec<EvalRecord>,
    pub mean_dice: f64,
    pub mean_jaccard: f64,
    pub out_path: PathBuf,
}

fn check_window(window: [usize; 3]) -> CliResult<()> {
    for w in window {
        if w < 8 || w % 4 != 0 {
            return Err(CliError::Config(format!(
                "window {window:?}: extents must be >= 8 and divisible by 4"
            )));
        }
    }
    Ok(())
}

/// Scores one case with the given model: sliding-window probabilities,
/// hard labels, then per-foreground-class metrics folded into one record.
fn score_case(
    trainer: &Trainer<f64>,
    volume: &Volume,
    mask: &LabelMask,
    window: [usize; 3],
    stride: [usize; 3],
    spacing: [f64; 3],
) -> CliResult<EvalRecord> {
    let model = trainer.teacher();
    let num_classes = mask.num_classes();
    let normalized = volume.normalized();
    let probs = sliding_window_predict::<f64, _>(
        &normalized,
        num_classes,
        window,
        stride,
        |patch| {
            let p = predict_probabilities(model, patch);
            if !p.data().iter().all(|v| v.is_finite()) {
                return Err(protoseg_core::err::CoreError::Numeric(format!(
                    "non-finite prediction on case {}",
                    volume.id
                )));
            }
            Ok(p)
        },
    )?;
    let pred = argmax_classes(&probs);
    let dims = mask.dims();
    let mut dice_acc = 0.0;
    let mut jac_acc = 0.0;
    let mut surf: Vec<(f64, f64)> = Vec::new();
    for class in 1..num_classes as u8 {
        let p: Vec<bool> = pred.iter().map(|&v| v == class).collect();
        let t = mask.class_mask(class);
        dice_acc += dice_binary(&p, &t);
        jac_acc += jaccard_binary(&p, &t);
        let pe = p.iter().all(|&b| !b);
        let te = t.iter().all(|&b| !b);
        if pe != te {
            eprintln!(
                "warning: case {} class {class}: one side has no voxels; surface distances are undefined and excluded",
                volume.id
            );
        } else {
            surf.push(surface_metrics(&p, &t, dims, spacing));
        }
    }
    let fg = (num_classes - 1) as f64;
    let defined = surf.len();
    Ok(EvalRecord {
        id: volume.id.clone(),
        dice: dice_acc / fg,
        jaccard: jac_acc / fg,
        asd: (defined > 0)
            .then(|| surf.iter().map(|s| s.0).sum::<f64>() / defined as f64),
        hd95: (defined > 0)
            .then(|| surf.iter().map(|s| s.1).sum::<f64>() / defined as f64),
    })
}

/// Evaluates a checkpoint's teacher on the validation split with
/// sliding-window inference; prints a table and writes a JSON-lines file.
pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalSummary> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let mut cfg = ck.run_config()?;
    apply_env_overrides(&mut cfg, |n| std::env::var(n).ok())?;
    let (split, _) = load_configured_dataset(&cfg, args.data_dir.as_deref())?;
    if split.val.is_empty() {
        return Err(CliError::Data("dataset has no validation cases".into()));
    }
    let window = args.window.unwrap_or(cfg.eval.window);
    let stride = args.stride.unwrap_or(cfg.eval.stride);
    check_window(window)?;
    let trainer = ck.into_trainer()?;

    let mut records = Vec::with_capacity(split.val.len());
    println!(
        "{:<12} {:>8} {:>8} {:>8} {:>8}",
        "case", "dice", "jaccard", "asd", "hd95"
    );
    for case in &split.val {
        let spacing = if args.physical_spacing || cfg.eval.physical_spacing {
            case.volume.spacing()
        } else {
            [1.0, 1.0, 1.0]
        };
        let rec = score_case(&trainer, &case.volume, &case.mask, window, stride, spacing)?;
        let fmt_opt =
            |v: Option<f64>| v.map(|x| format!("{x:8.4}")).unwrap_or_else(|| "       —".into());
        println!(
            "{:<12} {:>8.4} {:>8.4} {} {}",
            rec.id,
            rec.dice,
            rec.jaccard,
            fmt_opt(rec.asd),
            fmt_opt(rec.hd95)
        );
        records.push(rec);
    }
    let n = records.len() as f64;
    let mean_dice = records.iter().map(|r| r.dice).sum::<f64>() / n;
    let mean_jaccard = records.iter().map(|r| r.jaccard).sum::<f64>() / n;
    println!("{:<12} {:>8.4} {:>8.4}", "mean", mean_dice, mean_jaccard);

    let out_path = args.out.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("eval.jsonl")
    });
    let mut file = std::io::BufWriter::new(fs::File::create(&out_path)?);
    for rec in &records {
        serde_json::to_writer(&mut file, rec)
            .map_err(|e| CliError::Data(format!("eval log: {e}")))?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(EvalSummary { records, mean_dice, mean_jaccard, out_path })
}

/// Command-line arguments for `rectify-report`.
#[derive(Debug, Clone, Default)]
pub struct RectifyReportArgs {
    pub run_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub plot: Option<PathBuf>,
}

/// Replays every checkpoint of a run (or one checkpoint) and reports how
/// rectification changes pseudo-label reliability and accuracy.
pub fn cmd_rectify_report(args: &RectifyReportArgs) -> CliResult<Vec<RectifyRecord>> {
    let mut paths: Vec<PathBuf> = Vec::new();
    match (&args.run_dir, &args.checkpoint) {
        (Some(dir), None) => {
            for entry in fs::read_dir(dir)
                .map_err(|e| CliError::Data(format!("cannot read {}: {e}", dir.display())))?
            {
                let p = entry?.path();
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                if name.starts_with("checkpoint-") && name.ends_with(".ckpt") {
                    paths.push(p);
                }
            }
            paths.sort();
            if paths.is_empty() {
                return Err(CliError::Data(format!(
                    "no checkpoint-*.ckpt files in {}",
                    dir.display()
                )));
            }
        }
        (None, Some(ck)) => paths.push(ck.clone()),
        _ => {
            return Err(CliError::Config(
                "pass exactly one of --run-dir or --checkpoint".into(),
            ))
        }
    }

    let first = Checkpoint::load(&paths[0])?;
    let mut cfg = first.run_config()?;
    apply_env_overrides(&mut cfg, |n| std::env::var(n).ok())?;
    let (split, truth) = load_configured_dataset(&cfg, args.data_dir.as_deref())?;
    let truth = truth.ok_or_else(|| {
        CliError::Data(
            "rectification-quality reports need reference masks for the unlabelled cases".into(),
        )
    })?;

    let mut records = Vec::with_capacity(paths.len());
    for path in &paths {
        let ck = if path == &paths[0] { first.clone() } else { Checkpoint::load(path)? };
        if ck.config_hash != first.config_hash {
            return Err(CliError::Data(format!(
                "checkpoint {} was trained with a different config",
                path.display()
            )));
        }
        let trainer = ck.into_trainer()?;
        let row = rectify_report_row(
            &trainer,
            &split,
            &truth,
            cfg.train.rectify_report_cases,
            ck.iteration,
        )?;
        println!(
            "{}",
            serde_json::to_string(&row).map_err(|e| CliError::Data(e.to_string()))?
        );
        records.push(row);
    }
    records.sort_by_key(|r| r.iteration);
    records.dedup_by_key(|r| r.iteration);

    let out_path = args.out.clone().unwrap_or_else(|| {
        let base = args
            .run_dir
            .clone()
            .or_else(|| args.checkpoint.as_ref().and_then(|c| c.parent().map(Path::to_path_buf)))
            .unwrap_or_else(|| PathBuf::from("."));
        base.join("rectify-report.jsonl")
    });
    let mut file = std::io::BufWriter::new(fs::File::create(&out_path)?);
    for rec in &records {
        serde_json::to_writer(&mut file, rec)
            .map_err(|e| CliError::Data(format!("report log: {e}")))?;
        file.write_all(b"\n")?;
    }
    file.flush()?;

    if let Some(plot) = &args.plot {
        write_rectify_plot(plot, &records)?;
    }
    Ok(records)
}

/// Minimal SVG line plot of the rectification-quality curves.
fn write_rectify_plot(path: &Path, records: &[RectifyRecord]) -> CliResult<()> {
    if records.is_empty() {
        return Err(CliError::Data("nothing to plot".into()));
    }
    let (w, h, ml, mb, mt, mr) = (640.0, 360.0, 60.0, 40.0, 20.0, 20.0);
    let x0 = records.first().unwrap().iteration as f64;
    let x1 = records.last().unwrap().iteration.max(records[0].iteration + 1) as f64;
    let px = |it: u64| ml + (it as f64 - x0) / (x1 - x0) * (w - ml - mr);
    let py = |v: f64| (h - mb) - v.clamp(0.0, 1.0) * (h - mb - mt);
    let poly = |pick: &dyn Fn(&RectifyRecord) -> f64| -> String {
        records
            .iter()
            .map(|r| format!("{:.1},{:.1}", px(r.iteration), py(pick(r))))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb, w - mr, h - mb, h - mb
    ));
    let series: [(&str, &str, &dyn Fn(&RectifyRecord) -> f64); 4] = [
        ("#4682b4", "4 3", &|r| r.reliable_before),
        ("#4682b4", "", &|r| r.reliable_after),
        ("#e8822a", "4 3", &|r| r.dice_before),
        ("#e8822a", "", &|r| r.dice_after),
    ];
    for (color, dash, pick) in series {
        let dash_attr =
            if dash.is_empty() { String::new() } else { format!(" stroke-dasharray=\"{dash}\"") };
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\"{dash_attr} stroke-width=\"2\" points=\"{}\"/>\n",
            poly(pick)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\">iteration</text>\n",
        (w - ml) / 2.0,
        h - 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\">reliable fraction (blue) / pseudo-label dice (orange); dashed = before, solid = after</text>\n",
        ml, mt - 6.0
    ));
    svg.push_str("</svg>\n");
    fs::write(path, svg)?;
    Ok(())
}

/// Command-line arguments for `dataset-gen`.
#[derive(Debug, Clone, Default)]
pub struct DatasetGenArgs {
    pub config: PathBuf,
    pub out: PathBuf,
}

/// Materialises the configured synthetic dataset to disk, including
/// reference masks for the unlabelled cases.
pub fn cmd_dataset_gen(args: &DatasetGenArgs) -> CliResult<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    apply_env_overrides(&mut cfg, |n| std::env::var(n).ok())?;
    cfg.synth_config().validate()?;
    let (split, truth) = generate_synthetic_dataset_with_truth(&cfg.synth_config())?;
    fs::create_dir_all(&args.out)?;
    save_dataset(&args.out, &split, Some(&truth))?;
    println!(
        "wrote {} labelled, {} unlabelled, {} validation cases to {}",
        split.labelled.len(),
        split.unlabelled.len(),
        split.val.len(),
        args.out.display()
    );
    Ok(())
}

/// Shared helper for tests and the acceptance suite: reads a JSON-lines
/// file into typed records.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
        })
        .collect()
}
