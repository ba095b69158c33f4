use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use ddsd_core::checkpoint::{load_model, save_clf, save_fusion, SavedModel};
use ddsd_core::clf::{train_clf_baseline, ClfModel};
use ddsd_core::config::{preset, ExperimentConfig, TrainSection, PRESET_NAMES};
use ddsd_core::corpus::{generate_corpus, read_manifest, MANIFEST_FILE, TRAIN_SPLIT};
use ddsd_core::dataset::{build_examples, build_text_only, fit_scaler, manifest_dir};
use ddsd_core::eval::{
    evaluate, evaluate_scores, write_det_csv, write_det_svg, write_scores_csv, EvalReport,
    ScoredExample,
};
use ddsd_core::model::{count_trainable_params, FusionModel};
use ddsd_core::train::{train_with, write_loss_csv};

const CONFIG_FILE: &str = "config.json";
const CKPT_FILE: &str = "model.ckpt";
const LOSS_FILE: &str = "loss.csv";
/// Where `gen-data` puts the auxiliary text-only corpus, relative to `--out`.
const TEXT_ONLY_DIR: &str = "text_only";

#[derive(Parser)]
#[command(name = "ddsd", version, about = "Multimodal device-directed speech detection with a prefix-conditioned LM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the shipped experiment presets as JSON files.
    Presets {
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus from the config's corpus section.
    GenData {
        /// Config file or preset name.
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Split name; ids outside `train` are prefixed with it.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        n_directed: Option<usize>,
        #[arg(long)]
        n_non_directed: Option<usize>,
    },
    /// Train the configured model on a generated corpus.
    Train {
        #[arg(long)]
        config: String,
        /// Corpus directory (or manifest file).
        #[arg(long)]
        data: PathBuf,
        /// Auxiliary text-only corpus mixed into every epoch.
        #[arg(long)]
        text_only: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a corpus with a checkpoint and compute the DET curve and EER.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Axis limit of the DET plot.
        #[arg(long, default_value_t = 0.25)]
        clip: f64,
        /// Only write scores.
        #[arg(long)]
        scores_only: bool,
    },
    /// Rank evaluation reports by EER.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(arg: &str) -> Result<ExperimentConfig> {
    let path = Path::new(arg);
    if path.exists() {
        Ok(ExperimentConfig::load(path)?)
    } else if PRESET_NAMES.contains(&arg) {
        Ok(preset(arg)?)
    } else {
        bail!(
            "config `{arg}` is neither a file nor a preset ({})",
            PRESET_NAMES.join(", ")
        )
    }
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.to_path_buf()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn presets(out: &Path) -> Result<()> {
    create_dir(out)?;
    for name in PRESET_NAMES {
        let path = out.join(format!("{name}.json"));
        fs::write(&path, preset(name)?.to_json() + "\n")?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn gen_data(
    config: &str,
    out: &Path,
    seed: Option<u64>,
    split: Option<String>,
    n_directed: Option<usize>,
    n_non_directed: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.corpus.seed = s;
        if let Some(t) = &mut cfg.text_only {
            t.seed = s;
        }
    }
    if let Some(s) = split {
        cfg.corpus.split = s;
    }
    if let Some(n) = n_directed {
        cfg.corpus.n_directed = n;
    }
    if let Some(n) = n_non_directed {
        cfg.corpus.n_non_directed = n;
    }
    cfg.validate()?;
    println!("{}", cfg.to_json());
    create_dir(out)?;
    let corpus = generate_corpus(&cfg.corpus, out)?;
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    println!(
        "generated {} utterances in {}",
        corpus.records.len(),
        corpus.manifest.display()
    );
    // The auxiliary corpus only accompanies training data.
    if let Some(t) = cfg.text_only.as_ref().filter(|_| cfg.corpus.split == TRAIN_SPLIT) {
        let aux = generate_corpus(t, &out.join(TEXT_ONLY_DIR))?;
        println!(
            "generated {} text-only utterances in {}",
            aux.records.len(),
            aux.manifest.display()
        );
    }
    Ok(())
}

fn train(
    config: &str,
    data: &Path,
    text_only: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    epochs: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    match &mut cfg.train {
        TrainSection::PrefixLm(t) => {
            if let Some(s) = seed {
                t.seed = s;
                cfg.model.init_seed = s;
            }
            if let Some(e) = epochs {
                t.epochs = e;
            }
        }
        TrainSection::Clf(c) => {
            if let Some(s) = seed {
                c.seed = s;
            }
            if let Some(e) = epochs {
                c.epochs = e;
            }
        }
    }
    cfg.validate()?;
    println!("{}", cfg.to_json());
    let manifest = manifest_path(data);
    let records = read_manifest(&manifest)?;
    create_dir(out)?;
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    let ckpt = out.join(CKPT_FILE);
    let loss_path = out.join(LOSS_FILE);

    match &cfg.train {
        TrainSection::PrefixLm(tc) => {
            let mut model = FusionModel::new(cfg.model.clone())?;
            if model.modalities().ds {
                model.scaler = fit_scaler(&records)?;
            }
            let examples = build_examples(&model, &records, manifest_dir(&manifest))?;
            let aux_path = match (text_only, &cfg.text_only) {
                (Some(p), _) => Some(manifest_path(p)),
                (None, Some(_)) => {
                    let p = manifest_dir(&manifest).join(TEXT_ONLY_DIR).join(MANIFEST_FILE);
                    if !p.exists() {
                        bail!(
                            "config `{}` wants a text-only corpus: pass --text-only or generate it with gen-data",
                            cfg.name
                        );
                    }
                    Some(p)
                }
                (None, None) => None,
            };
            let aux = match aux_path {
                Some(p) => build_text_only(&model, &read_manifest(&p)?)?,
                None => Vec::new(),
            };
            let trainable = count_trainable_params(&model);
            println!("trainable parameters: {trainable}");
            let report = train_with(
                &mut model,
                &examples,
                &aux,
                tc,
                &mut |epoch, m| {
                    eprintln!("epoch {} done", epoch + 1);
                    match tc.checkpoint_every {
                        Some(k) if (epoch + 1) % k == 0 => {
                            let path = out.join(format!("epoch-{:03}.ckpt", epoch + 1));
                            save_fusion(&path, m, json!({"name": cfg.name, "epoch": epoch + 1}))
                        }
                        _ => Ok(()),
                    }
                },
                None,
            )?;
            for (e, l) in report.epoch_losses.iter().enumerate() {
                eprintln!("epoch {:>3} loss {l:.5}", e + 1);
            }
            write_loss_csv(&loss_path, &report.log)?;
            let meta = json!({
                "name": cfg.name,
                "trainable_params": trainable,
                "steps": report.total_steps,
            });
            save_fusion(&ckpt, &model, meta)?;
            println!("final loss: {:.6}", report.final_loss().unwrap_or(f64::NAN));
        }
        TrainSection::Clf(cc) => {
            let mut model = ClfModel::new(cfg.model.audio.clone(), cc.hidden_dim, cc.seed)?;
            let pooled = model.pooled_features(&records, &manifest)?;
            let labels: Vec<_> = records.iter().map(|r| r.label).collect();
            let trainable = count_trainable_params(&model);
            println!("trainable parameters: {trainable}");
            let report = train_clf_baseline(&mut model, &pooled, &labels, cc)?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in report.step_losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l}\n"));
            }
            fs::write(&loss_path, csv)?;
            let meta = json!({"name": cfg.name, "trainable_params": trainable});
            save_clf(&ckpt, &model, cc.seed, meta)?;
            println!(
                "final loss: {:.6}",
                report.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, out: &Path, clip: f64, scores_only: bool) -> Result<()> {
    if !(clip > 0.0 && clip <= 1.0) {
        bail!("--clip must be in (0, 1], got {clip}");
    }
    let settings = json!({
        "ckpt": ckpt,
        "data": data,
        "out": out,
        "clip": clip,
        "scores_only": scores_only,
    });
    println!("{}", serde_json::to_string_pretty(&settings)?);
    let (model, meta) = load_model(ckpt)?;
    let manifest = manifest_path(data);
    let records = read_manifest(&manifest)?;
    let (evaluation, modalities, trainable) = match &model {
        SavedModel::Fusion(m) => {
            let examples = build_examples(m, &records, manifest_dir(&manifest))?;
            (
                evaluate(m, &examples)?,
                m.modalities().to_string(),
                count_trainable_params(m),
            )
        }
        SavedModel::Clf(m) => {
            let pooled = m.pooled_features(&records, &manifest)?;
            let scored = records
                .iter()
                .zip(&pooled)
                .map(|(r, p)| ScoredExample::new(r.id.clone(), r.label, m.score_pooled(p)))
                .collect::<ddsd_core::Result<Vec<_>>>()?;
            (evaluate_scores(scored)?, "audio".to_string(), count_trainable_params(m))
        }
    };
    create_dir(out)?;
    let scores = out.join("scores.csv");
    write_scores_csv(&evaluation.scored, &scores)?;
    if scores_only {
        println!("scores: {}", scores.display());
        return Ok(());
    }
    let det_csv = out.join("det.csv");
    let det_svg = out.join("det.svg");
    write_det_csv(&evaluation.curve, &det_csv)?;
    write_det_svg(&evaluation.curve, &det_svg, clip)?;
    let name = meta["name"]
        .as_str()
        .map(str::to_string)
        .unwrap_or_else(|| ckpt.display().to_string());
    let report = EvalReport {
        name,
        modalities,
        trainable_params: trainable,
        eer: evaluation.curve.eer,
        eer_threshold: evaluation.curve.eer_threshold,
        n_directed: evaluation.n_directed,
        n_non_directed: evaluation.n_non_directed,
        artifacts: vec![scores, det_csv, det_svg],
    };
    write_json(&out.join("report.json"), &report)?;
    println!("EER: {:.4}%", report.eer * 100.0);
    Ok(())
}

fn compare(reports: &[PathBuf], out: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for p in reports {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let r: EvalReport =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        rows.push(r);
    }
    rows.sort_by(|a, b| a.eer.total_cmp(&b.eer).then_with(|| a.name.cmp(&b.name)));
    let mut table = String::from("| rank | name | modalities | trainable params | EER (%) |\n");
    table.push_str("|---:|---|---|---:|---:|\n");
    for (i, r) in rows.iter().enumerate() {
        table.push_str(&format!(
            "| {} | {} | {} | {} | {:.2} |\n",
            i + 1,
            r.name,
            r.modalities,
            r.trainable_params,
            r.eer * 100.0
        ));
    }
    print!("{table}");
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(out, table).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Presets { out } => presets(&out),
        Command::GenData {
            config,
            out,
            seed,
            split,
            n_directed,
            n_non_directed,
        } => gen_data(&config, &out, seed, split, n_directed, n_non_directed),
        Command::Train {
            config,
            data,
            text_only,
            out,
            seed,
            epochs,
        } => train(&config, &data, text_only.as_deref(), &out, seed, epochs),
        Command::Eval {
            ckpt,
            data,
            out,
            clip,
            scores_only,
        } => eval(&ckpt, &data, &out, clip, scores_only),
        Command::Compare { reports, out } => compare(&reports, &out),
    }
}

/// Failures caused by the environment or a bug rather than by the inputs.
fn is_internal(err: &anyhow::Error) -> bool {
    matches!(
        err.downcast_ref::<ddsd_core::Error>(),
        Some(ddsd_core::Error::Training(_))
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_internal(&e) { 2 } else { 1 })
        }
    }
}
