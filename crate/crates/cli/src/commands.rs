use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use anapred::dataset::{
    self, load_case_dir, normalize_case, preprocess_case, read_manifest, save_case, split_cases,
    write_manifest, write_split, CaseBundle,
};
use anapred::metrics::{aggregate, evaluate_case, CaseRows, MetricsReport};
use anapred::model::{gradcheck, Checkpoint, GradcheckConfig};
use anapred::phantom::generate_corpus;
use anapred::train::{
    checkpoint_input, predict, run_ablation, run_comparison, train, Corpus, TrainOptions,
    BEST_CHECKPOINT, LAST_CHECKPOINT,
};
use anapred::volume::{read_volume, write_atomic, write_volume_channel};
use anapred::warp::Prediction;

use crate::config::{ConfigError, RunConfig};
use crate::{Command, Common, GradcheckFailed};

pub const PRED_IMAGE: &str = "image";
pub const PRED_GTVP: &str = "gtvp";
pub const PRED_GTVN: &str = "gtvn";
pub const PRED_DVF: [&str; 3] = ["dvf_x", "dvf_y", "dvf_z"];

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { common, out, n } => generate(&common, out, n),
        Command::Preprocess { common, input, out } => preprocess(&common, &input, out),
        Command::Train {
            common,
            data,
            out,
            deterministic,
            resume,
            epochs,
        } => cmd_train(&common, data, out, deterministic, resume, epochs),
        Command::Predict {
            checkpoint,
            cases,
            data,
            out,
        } => cmd_predict(&checkpoint, &cases, data.as_deref(), &out),
        Command::Evaluate {
            common,
            data,
            pred,
            out,
            csv,
            all,
        } => evaluate(&common, data, &pred, out, csv, all),
        Command::Ablate {
            common,
            data,
            out,
            csv,
            deterministic,
        } => harness(&common, data, out, csv, deterministic, true),
        Command::Compare {
            common,
            data,
            out,
            csv,
            deterministic,
        } => harness(&common, data, out, csv, deterministic, false),
        Command::Gradcheck {
            config,
            seed,
            samples,
            corrupt_group,
        } => cmd_gradcheck(config.as_deref(), seed, samples, corrupt_group),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.train.augment.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn generate(common: &Common, out: Option<PathBuf>, n: usize) -> Result<()> {
    let cfg = load_config(common)?;
    let out = cfg.out_dir(out.as_deref())?;
    if n == 0 {
        return Err(ConfigError("--n must be at least 1".into()).into());
    }
    let seed = common.seed.unwrap_or(0);
    let cases = generate_corpus(n, &cfg.phantom, seed)?;
    create_dir(&out)?;
    let mut entries = Vec::with_capacity(cases.len());
    for c in &cases {
        entries.push(save_case(&out, c, false)?);
    }
    write_manifest(&out, &entries)?;
    let ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
    let s = &cfg.split;
    let split = split_cases(&ids, (s.train, s.val, s.test), seed)?;
    write_split(&out, &split)?;
    log::info!("wrote {n} cases to {}", out.display());
    print_json(&json!({
        "cases": n,
        "out": out,
        "split": {"train": split.train.len(), "val": split.val.len(), "test": split.test.len()},
    }))
}

fn preprocess(common: &Common, input: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common)?;
    let out = cfg.out_dir(out.as_deref())?;
    let entries = read_manifest(input)?;
    create_dir(&out)?;
    let mut new_entries = Vec::with_capacity(entries.len());
    let mut provenance = Vec::with_capacity(entries.len());
    for e in &entries {
        let c =
            dataset::load_case(input, e).with_context(|| format!("loading case {}", e.case_id))?;
        let (p, prov) = preprocess_case(&c, &cfg.preprocess, e.normalized)?;
        new_entries.push(save_case(&out, &p, true)?);
        provenance.push(prov);
    }
    write_manifest(&out, &new_entries)?;
    if input.join(dataset::SPLIT_FILE).exists() {
        write_split(&out, &dataset::read_split(input)?)?;
    }
    write_atomic(
        &out.join("provenance.json"),
        &serde_json::to_vec_pretty(&provenance)?,
    )?;
    print_json(&json!({"cases": entries.len(), "out": out}))
}

fn cmd_train(
    common: &Common,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    deterministic: bool,
    resume: bool,
    epochs: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if deterministic {
        cfg.train.deterministic = true;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
        cfg.validate()?;
    }
    let data = cfg.data_dir(data.as_deref())?;
    let out = cfg.out_dir(out.as_deref())?;
    let corpus = Corpus::load(&data)?;
    create_dir(&out)?;
    write_atomic(
        &out.join("run_config.json"),
        &serde_json::to_vec_pretty(&cfg)?,
    )?;
    let outcome = train(
        &corpus,
        &cfg.train,
        &cfg.model,
        &out,
        &TrainOptions {
            resume,
            stop_after_epochs: None,
        },
    )?;
    print_json(&json!({
        "epochs": outcome.state.epoch,
        "steps": outcome.state.step,
        "final_lr": outcome.state.plateau.lr,
        "best_val_loss": outcome.state.best_val,
        "last_train_loss": outcome.epochs.last().map(|e| e.train_loss),
        "best_checkpoint": out.join(BEST_CHECKPOINT),
        "last_checkpoint": out.join(LAST_CHECKPOINT),
    }))
}

/// Loads a case directory; raw intensities are normalized unless the
/// parent manifest marks the case as already normalized.
fn load_case_for_inference(dir: &Path) -> Result<CaseBundle> {
    let c = load_case_dir(dir).with_context(|| format!("loading case {}", dir.display()))?;
    let normalized = dir
        .parent()
        .and_then(|p| read_manifest(p).ok())
        .and_then(|m| m.into_iter().find(|e| e.case_id == c.case_id))
        .map(|e| e.normalized);
    let normalized = normalized.unwrap_or_else(|| c.ct.data.iter().all(|v| v.abs() <= 1.0));
    Ok(if normalized { c } else { normalize_case(&c)? })
}

fn write_prediction(
    out: &Path,
    c: &CaseBundle,
    p: &Prediction,
    dvf: &anapred::warp::Dvf,
) -> Result<()> {
    let dir = out.join(&c.case_id);
    create_dir(&dir)?;
    write_volume_channel(&p.image, &dir.join(PRED_IMAGE), PRED_IMAGE)?;
    write_volume_channel(&p.gtvp, &dir.join(PRED_GTVP), PRED_GTVP)?;
    write_volume_channel(&p.gtvn, &dir.join(PRED_GTVN), PRED_GTVN)?;
    for (a, name) in PRED_DVF.iter().enumerate() {
        write_volume_channel(&dvf.component_volume(a, &c.ct), &dir.join(name), name)?;
    }
    Ok(())
}

fn cmd_predict(
    checkpoint: &Path,
    cases: &[PathBuf],
    data: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let sel = checkpoint_input(&ck)?;
    let bundles: Vec<CaseBundle> = match data {
        Some(d) => {
            let corpus = Corpus::load(d)?;
            corpus
                .subset(&corpus.split.test)?
                .into_iter()
                .cloned()
                .collect()
        }
        None => cases
            .iter()
            .map(|p| load_case_for_inference(p))
            .collect::<Result<_>>()?,
    };
    create_dir(out)?;
    let mut written = Vec::new();
    for c in &bundles {
        let (p, dvf) = predict(c, &ck.params, &ck.model, &sel)?;
        write_prediction(out, c, &p, &dvf)?;
        written.push(c.case_id.clone());
    }
    print_json(&json!({"predicted": written, "out": out}))
}

fn read_prediction(dir: &Path) -> Result<Prediction> {
    let get = |name: &str| {
        read_volume(&dir.join(name)).with_context(|| format!("reading {name} in {}", dir.display()))
    };
    Ok(Prediction {
        image: get(PRED_IMAGE)?,
        gtvp: get(PRED_GTVP)?,
        gtvn: get(PRED_GTVN)?,
    })
}

fn write_report(report: &MetricsReport, out: &Path, stem: &str, csv: bool) -> Result<()> {
    report.validate()?;
    create_dir(out)?;
    write_atomic(
        &out.join(format!("{stem}.json")),
        report.to_json()?.as_bytes(),
    )?;
    write_atomic(
        &out.join(format!("{stem}.txt")),
        report.to_table().as_bytes(),
    )?;
    if csv {
        write_atomic(&out.join(format!("{stem}.csv")), report.to_csv().as_bytes())?;
    }
    eprint!("{}", report.to_table());
    println!("{}", report.to_json()?);
    Ok(())
}

fn evaluate(
    common: &Common,
    data: Option<PathBuf>,
    pred: &Path,
    out: Option<PathBuf>,
    csv: bool,
    all: bool,
) -> Result<()> {
    let cfg = load_config(common)?;
    let data = cfg.data_dir(data.as_deref())?;
    let out = out
        .or_else(|| cfg.paths.out.clone())
        .unwrap_or_else(|| pred.to_path_buf());
    let corpus = Corpus::load(&data)?;
    let cases: Vec<&CaseBundle> = if all {
        corpus.cases.iter().collect()
    } else {
        corpus.subset(&corpus.split.test)?
    };
    if cases.is_empty() {
        bail!(ConfigError("no cases to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(cases.len());
    for c in cases {
        let p = read_prediction(&pred.join(&c.case_id))?;
        rows.push(CaseRows {
            case_id: c.case_id.clone(),
            rows: evaluate_case(c, &p)?,
        });
    }
    let report = aggregate("Evaluation", rows)?;
    write_report(&report, &out, "metrics", csv)
}

fn harness(
    common: &Common,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    csv: bool,
    deterministic: bool,
    ablate: bool,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if deterministic {
        cfg.train.deterministic = true;
    }
    let data = cfg.data_dir(data.as_deref())?;
    let out = cfg.out_dir(out.as_deref())?;
    let corpus = Corpus::load(&data)?;
    create_dir(&out)?;
    write_atomic(
        &out.join("run_config.json"),
        &serde_json::to_vec_pretty(&cfg)?,
    )?;
    let (report, stem) = if ablate {
        (
            run_ablation(&corpus, &cfg.train, &cfg.model, &out)?,
            "ablation",
        )
    } else {
        (
            run_comparison(&corpus, &cfg.train, &cfg.model, &out)?,
            "comparison",
        )
    };
    write_report(&report, &out, stem, csv)
}

fn cmd_gradcheck(
    config: Option<&Path>,
    seed: Option<u64>,
    samples: Option<usize>,
    corrupt: Option<String>,
) -> Result<()> {
    let mut cfg: GradcheckConfig = match config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| ConfigError(format!("gradcheck config {}: {e}", p.display())))?
        }
        None => GradcheckConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = samples {
        cfg.samples = n;
    }
    if corrupt.is_some() {
        cfg.corrupt_group = corrupt;
    }
    let report = gradcheck(&cfg)?;
    for g in &report.groups {
        eprintln!(
            "{:<14} samples {:>3}  max rel err {:.3e}  worst {}  {}",
            g.group,
            g.samples,
            g.max_rel_err,
            g.worst,
            if g.passed { "ok" } else { "FAIL" }
        );
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !report.passed {
        let names: Vec<String> = report
            .failures()
            .iter()
            .map(|g| format!("group {} at {}", g.group, g.worst))
            .collect();
        return Err(GradcheckFailed(names.join(", ")).into());
    }
    Ok(())
}
