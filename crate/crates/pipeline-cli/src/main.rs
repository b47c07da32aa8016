//! Command-line surface for the pipeline: dataset synthesis, splitting,
//! training, evaluation, gradient checking, batch upscaling, and dataset
//! inspection. Reports go to stdout as JSON; logs go to stderr. Exit
//! codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use numcore::{Adam, AdamConfig};
use pipeline_cli::{checkpoint, evalcmd, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "pipeline-cli", version, about = "Dual-stream multimodal pest detection pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MethodArg {
    Nearest,
    Bilinear,
    External,
}

#[derive(Subcommand)]
enum Cmd {
    /// Composite a synthetic detection dataset onto backgrounds.
    Synth {
        /// Output directory for images, sidecars, and manifest.jsonl.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 4)]
        per_image: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory of background .png files.
        #[arg(long, requires = "targets", conflicts_with = "toy_classes")]
        backgrounds: Option<PathBuf>,
        /// Directory with one subdirectory of target .png files per class id.
        #[arg(long, requires = "backgrounds")]
        targets: Option<PathBuf>,
        /// Use procedural pools with this many classes instead of
        /// --backgrounds/--targets.
        #[arg(long)]
        toy_classes: Option<usize>,
        #[arg(long, default_value_t = 4)]
        toy_backgrounds: usize,
        /// Side of the square procedural background, pixels.
        #[arg(long, default_value_t = 64)]
        toy_size: u32,
        /// Peak per-channel background noise; 0 gives black backgrounds.
        #[arg(long, default_value_t = 23)]
        toy_noise: u8,
        #[arg(long, value_delimiter = ',', default_values_t = vec![10u32, 14])]
        toy_target_sizes: Vec<u32>,
        /// Rescale each pasted target by a uniform factor in [0.5, 1.5].
        #[arg(long)]
        scale_jitter: bool,
        /// Skip the caption sidecar files.
        #[arg(long)]
        no_text: bool,
        #[arg(long, default_value_t = 100)]
        max_retries: usize,
        #[arg(long, default_value_t = 10)]
        reroll_budget: usize,
    },
    /// Partition a manifest into train/val/test manifests.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Three comma-separated fractions summing to 1.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.8, 0.1, 0.1])]
        ratios: Vec<f64>,
    },
    /// Train on a manifest and write a checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// JSON run configuration; defaults are the published settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from an existing checkpoint (its embedded config wins
        /// over --config).
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
        /// Use the desk-scale model with this many classes.
        #[arg(long)]
        toy: Option<usize>,
        /// Override any config key, e.g. --set learning_rate=1e-3 or
        /// --set model.encoder.dropout=0. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Evaluate a checkpoint against a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Decode confidence cutoff; defaults to the checkpoint's value.
        /// Lower it to sweep more of the precision-recall curve.
        #[arg(long)]
        conf_thresh: Option<f64>,
        /// Suppression overlap cutoff; defaults to the checkpoint's value.
        #[arg(long)]
        nms_thresh: Option<f64>,
        /// Emit a flat CSV row instead of JSON.
        #[arg(long)]
        csv: bool,
        /// Print per-image ground truth and detections to stderr.
        #[arg(long)]
        dump: bool,
    },
    /// Finite-difference checks over every op and the toy model.
    Gradcheck {
        /// Finite-difference probes per parameter tensor.
        #[arg(long, default_value_t = 2)]
        per_param: usize,
        /// Corrupt one gradient on purpose to prove the harness notices.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Upscale every .png in a directory.
    Sr {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        factor: usize,
        #[arg(long, value_enum, default_value_t = MethodArg::Bilinear)]
        method: MethodArg,
        /// Command invoked as `cmd in.png out.png factor` for --method external.
        #[arg(long)]
        external_cmd: Option<String>,
    },
    /// Dataset statistics as JSON.
    Inspect {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                std::process::exit(0);
            }
            let _ = e.print();
            std::process::exit(1);
        }
    };
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {}", e);
        std::process::exit(e.exit_code());
    }
}

fn emit(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("report serializes"));
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Synth {
            out,
            count,
            per_image,
            seed,
            backgrounds,
            targets,
            toy_classes,
            toy_backgrounds,
            toy_size,
            toy_noise,
            toy_target_sizes,
            scale_jitter,
            no_text,
            max_retries,
            reroll_budget,
        } => {
            let (bgs, crops) = match (backgrounds, targets, toy_classes) {
                (Some(bg_dir), Some(t_dir), None) => (
                    pipeline_cli::dataio::load_backgrounds(&bg_dir)?,
                    pipeline_cli::dataio::load_targets(&t_dir)?,
                ),
                (None, None, Some(classes)) => (
                    acie::toy::toy_backgrounds(toy_backgrounds, toy_size, toy_size, seed, toy_noise),
                    acie::toy::toy_targets(classes, &toy_target_sizes),
                ),
                _ => {
                    return Err(CliError::Usage(
                        "pass --backgrounds with --targets, or --toy-classes".to_string(),
                    ))
                }
            };
            let cfg = acie::AcieConfig {
                background_pool: bgs.len(),
                target_pool: crops.len(),
                per_image,
                count,
                seed,
                max_retries,
                reroll_budget,
                scale_jitter,
                emit_text: !no_text,
            };
            let rows = acie::generate(&cfg, &bgs, &crops, &out)?;
            emit(serde_json::json!({
                "out": out,
                "manifest": out.join("manifest.jsonl"),
                "images": rows.len(),
                "per_image": per_image,
            }));
            Ok(())
        }

        Cmd::Split { manifest, seed, ratios } => {
            let ratios: [f64; 3] = ratios
                .try_into()
                .map_err(|_| CliError::Usage("--ratios needs exactly 3 values".to_string()))?;
            let rows = acie::read_manifest(&manifest)?;
            if rows.is_empty() {
                return Err(CliError::Data(format!("{}: manifest is empty", manifest.display())));
            }
            let parts = pipeline_cli::split_dataset(rows.len(), ratios, seed)?;
            let dir = manifest.parent().unwrap_or(Path::new("."));
            let names = ["train.jsonl", "val.jsonl", "test.jsonl"];
            let mut out = serde_json::Map::new();
            for (name, indices) in names.iter().zip(&parts) {
                let subset: Vec<acie::ManifestRow> =
                    indices.iter().map(|&i| rows[i].clone()).collect();
                let path = dir.join(name);
                acie::write_manifest(&path, &subset)?;
                out.insert(
                    name.trim_end_matches(".jsonl").to_string(),
                    serde_json::json!({"file": path, "images": subset.len()}),
                );
            }
            emit(serde_json::Value::Object(out));
            Ok(())
        }

        Cmd::Train {
            manifest,
            out,
            config,
            resume,
            toy,
            overrides,
            seed,
            epochs,
            batch_size,
            learning_rate,
            max_steps,
        } => {
            let restored = resume.as_deref().map(checkpoint::load).transpose()?;
            let mut cfg = match &restored {
                Some((cfg, _, _, _)) => cfg.clone(),
                None => {
                    let mut cfg = RunConfig::from_file(config.as_deref())?;
                    if let Some(classes) = toy {
                        cfg.model = fusedet::model::ModelConfig::toy(classes);
                    }
                    cfg
                }
            };
            for assignment in &overrides {
                cfg.apply_override(assignment)?;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = learning_rate {
                cfg.learning_rate = v;
            }
            if let Some(v) = max_steps {
                cfg.max_steps = Some(v);
            }
            cfg.validate()?;
            let (mut model, mut adam, start_step) = match restored {
                Some((_, model, adam, step)) => (model, adam, step),
                None => {
                    let model = fusedet::model::Model::new(cfg.model.clone(), cfg.seed)?;
                    let adam = Adam::new(AdamConfig {
                        lr: cfg.learning_rate,
                        weight_decay: cfg.weight_decay,
                        ..AdamConfig::default()
                    });
                    (model, adam, 0)
                }
            };
            adam.cfg.lr = cfg.learning_rate;
            adam.cfg.weight_decay = cfg.weight_decay;

            let dataset = pipeline_cli::load_dataset(&manifest)?;
            eprintln!(
                "training on {} samples, {} parameters, starting at step {}",
                dataset.samples.len(),
                model.param_count(),
                start_step
            );
            let report = pipeline_cli::train(
                &mut model,
                &mut adam,
                &dataset.samples,
                &cfg,
                start_step,
                &mut |row| {
                    eprintln!(
                        "step {} L_PTI {:.6} L_B {:.6} L_O {:.6}",
                        row.step, row.l_pti, row.l_b, row.l_o
                    );
                },
            )?;
            checkpoint::save(&out, &cfg, &model, &adam)?;
            emit(serde_json::json!({
                "checkpoint": out,
                "report": report,
            }));
            Ok(())
        }

        Cmd::Eval { checkpoint: ckpt, manifest, conf_thresh, nms_thresh, csv, dump } => {
            let (_, mut model, _, _) = checkpoint::load(&ckpt)?;
            if let Some(ct) = conf_thresh {
                model.cfg.conf_thresh = ct;
            }
            if let Some(nt) = nms_thresh {
                model.cfg.nms_thresh = nt;
            }
            let dataset = pipeline_cli::load_dataset(&manifest)?;
            if dump {
                for (sample, row) in dataset.samples.iter().zip(&dataset.rows) {
                    eprintln!("{}", row.image);
                    for gt in &sample.gts {
                        eprintln!(
                            "  gt  {} {:.0} {:.0} {:.0} {:.0}",
                            gt.class_id, gt.x1, gt.y1, gt.x2, gt.y2
                        );
                    }
                    let mut dets = model.forward_detections(sample)?;
                    dets.truncate(6);
                    for d in &dets {
                        eprintln!("  det {}", d.line());
                    }
                }
            }
            let report = evalcmd::evaluate_model(&model, &dataset.samples)?;
            if csv {
                println!("{}", evalkit::EvalReport::csv_header());
                println!("{}", report.csv_row());
            } else {
                emit(serde_json::to_value(&report).expect("report serializes"));
            }
            Ok(())
        }

        Cmd::Gradcheck { per_param, corrupt } => {
            let report = fusedet::gradsuite::full_report(per_param, corrupt)
                .map_err(|e| CliError::Numeric(e.to_string()))?;
            emit(serde_json::to_value(&report).expect("report serializes"));
            if !report.pass {
                return Err(CliError::Numeric(format!(
                    "max relative error {} is at or above {}",
                    report.max_rel_err, report.threshold
                )));
            }
            Ok(())
        }

        Cmd::Sr { input, out, factor, method, external_cmd } => {
            let method = match (method, external_cmd) {
                (MethodArg::Nearest, None) => fusedet::srproxy::UpscaleMethod::Nearest,
                (MethodArg::Bilinear, None) => fusedet::srproxy::UpscaleMethod::Bilinear,
                (MethodArg::External, Some(cmd)) => fusedet::srproxy::UpscaleMethod::External(cmd),
                (MethodArg::External, None) => {
                    return Err(CliError::Usage(
                        "--method external needs --external-cmd".to_string(),
                    ))
                }
                (_, Some(_)) => {
                    return Err(CliError::Usage(
                        "--external-cmd only applies to --method external".to_string(),
                    ))
                }
            };
            std::fs::create_dir_all(&out)
                .map_err(|e| CliError::Data(format!("{}: {}", out.display(), e)))?;
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&input)
                .map_err(|e| CliError::Data(format!("{}: {}", input.display(), e)))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "png"))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(CliError::Data(format!("{}: no .png inputs", input.display())));
            }
            for path in &paths {
                let image = fusedet::pngio::load_rgb(path)?;
                let up = fusedet::srproxy::upscale(&image, factor, &method)?;
                let dest = out.join(path.file_name().expect("png path has a file name"));
                fusedet::pngio::save_rgb(&dest, &up)?;
            }
            emit(serde_json::json!({"processed": paths.len(), "factor": factor, "out": out}));
            Ok(())
        }

        Cmd::Inspect { manifest } => {
            let dataset = pipeline_cli::load_dataset(&manifest)?;
            let mut boxes_per_class: std::collections::BTreeMap<usize, usize> =
                std::collections::BTreeMap::new();
            let mut total_boxes = 0usize;
            let mut with_text = 0usize;
            let (mut min_w, mut max_w, mut min_h, mut max_h) =
                (usize::MAX, 0usize, usize::MAX, 0usize);
            for sample in &dataset.samples {
                let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
                min_w = min_w.min(w);
                max_w = max_w.max(w);
                min_h = min_h.min(h);
                max_h = max_h.max(h);
                with_text += sample.text.is_some() as usize;
                for gt in &sample.gts {
                    total_boxes += 1;
                    *boxes_per_class.entry(gt.class_id).or_insert(0) += 1;
                }
            }
            emit(serde_json::json!({
                "samples": dataset.samples.len(),
                "with_text": with_text,
                "boxes": total_boxes,
                "boxes_per_class": boxes_per_class,
                "width": {"min": min_w, "max": max_w},
                "height": {"min": min_h, "max": max_h},
            }));
            Ok(())
        }
    }
}
