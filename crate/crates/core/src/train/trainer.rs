//! The training loop.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::mpsc::sync_channel;
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, Plateau};
use super::{derive_seed, Corpus, TrainConfig};
use crate::dataset::{augment, stack_input, AugmentSpec, CaseBundle};
use crate::error::{Error, Result};
use crate::loss::{composite_loss, LossBreakdown, LossCase};
use crate::model::{forward, gradient_prepared, Checkpoint, ModelConfig, NamedArray, Params};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LOG_FILE: &str = "train.log.jsonl";
pub const EVENTS_FILE: &str = "events.json";
const FAILURE_FILE: &str = "failure.json";

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_AUGMENT: u64 = 3;

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from `last.ckpt` in the output directory when present.
    pub resume: bool,
    /// Stop after this many completed epochs (the run can be resumed).
    pub stop_after_epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub total: f64,
    pub ssim: f64,
    pub dice_p: f64,
    pub dice_n: f64,
    pub diffusion: f64,
    pub lr: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine {
    Step(StepRecord),
    Epoch(EpochRecord),
}

impl LogLine {
    fn epoch(&self) -> usize {
        match self {
            LogLine::Step(s) => s.epoch,
            LogLine::Epoch(e) => e.epoch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub epoch: usize,
    pub step: u64,
    pub kind: String,
    pub detail: serde_json::Value,
}

/// Everything besides parameters and moments needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub adam_step: u64,
    pub plateau: Plateau,
    pub best_val: Option<f64>,
    pub config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelConfig,
    pub params: Params<f32>,
    /// Parameters of the epoch with the lowest validation loss.
    pub best_params: Params<f32>,
    pub epochs: Vec<EpochRecord>,
    pub state: TrainState,
}

struct Prepared {
    case_id: String,
    input: Vec<f32>,
    loss: LossCase<f32>,
}

fn prepare(c: &CaseBundle, cfg: &TrainConfig, epoch: usize, pos: usize) -> Result<Prepared> {
    let aug;
    let c = if cfg.augment.probability > 0.0 {
        let spec = AugmentSpec {
            seed: derive_seed(cfg.seed, &[TAG_AUGMENT, epoch as u64, pos as u64]),
            ..cfg.augment.clone()
        };
        aug = augment(c, &spec)?;
        &aug
    } else {
        c
    };
    Ok(Prepared {
        case_id: c.case_id.clone(),
        input: stack_input(c, &cfg.input)?.data,
        loss: LossCase::from_bundle(c, &cfg.input)?,
    })
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    model: ModelConfig,
    out_dir: &'a Path,
    params: Params<f32>,
    adam: Adam<f32>,
    state: TrainState,
    events: Vec<Event>,
    log: fs::File,
    history: Vec<EpochRecord>,
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

fn moments_arrays(params: &Params<f32>, adam: &Adam<f32>) -> Vec<NamedArray> {
    let mut out = Vec::with_capacity(2 * params.len());
    for (prefix, arrays) in [("adam.m/", &adam.m), ("adam.v/", &adam.v)] {
        for (s, a) in params.specs.iter().zip(arrays) {
            out.push(NamedArray {
                name: format!("{prefix}{}", s.name),
                shape: vec![s.rows, s.cols],
                data: a.clone(),
            });
        }
    }
    out
}

fn read_log(path: &Path) -> Result<Vec<LogLine>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = io(path, fs::read_to_string(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

impl<'a> Run<'a> {
    fn start(
        corpus_model: ModelConfig,
        cfg: &'a TrainConfig,
        out_dir: &'a Path,
        opts: &TrainOptions,
    ) -> Result<Self> {
        io(out_dir, fs::create_dir_all(out_dir))?;
        let last = out_dir.join(LAST_CHECKPOINT);
        let log_path = out_dir.join(LOG_FILE);
        if opts.resume && last.exists() {
            let ck = Checkpoint::load(&last)?;
            if ck.model != corpus_model {
                return Err(Error::Invalid(
                    "checkpoint model config differs from the requested one".into(),
                ));
            }
            let state: TrainState = serde_json::from_value(ck.meta.clone())?;
            let same = TrainConfig {
                epochs: cfg.epochs,
                ..state.config.clone()
            };
            if &same != cfg {
                return Err(Error::Invalid(
                    "checkpoint train config differs from the requested one (only epochs may change)".into(),
                ));
            }
            let mut adam = Adam::new(
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_eps,
                std::iter::empty(),
            );
            for s in &ck.params.specs {
                let get = |p: &str| {
                    ck.extra(&format!("{p}{}", s.name))
                        .map(|a| a.data.clone())
                        .ok_or_else(|| Error::Missing(format!("optimizer moments for {}", s.name)))
                };
                adam.m.push(get("adam.m/")?);
                adam.v.push(get("adam.v/")?);
            }
            adam.step = state.adam_step;

            // Drop anything logged after the checkpoint was written.
            let lines: Vec<LogLine> = read_log(&log_path)?
                .into_iter()
                .filter(|l| l.epoch() <= state.epoch)
                .collect();
            let history = lines
                .iter()
                .filter_map(|l| match l {
                    LogLine::Epoch(e) => Some(e.clone()),
                    _ => None,
                })
                .collect();
            let mut text = Vec::new();
            for l in &lines {
                serde_json::to_writer(&mut text, l)?;
                text.push(b'\n');
            }
            crate::volume::write_atomic(&log_path, &text)?;
            let ev_path = out_dir.join(EVENTS_FILE);
            let events: Vec<Event> = if ev_path.exists() {
                serde_json::from_slice(&io(&ev_path, fs::read(&ev_path))?)?
            } else {
                Vec::new()
            };
            let events = events
                .into_iter()
                .filter(|e| e.epoch <= state.epoch)
                .collect();
            let log = io(
                &log_path,
                fs::OpenOptions::new().append(true).open(&log_path),
            )?;
            log::info!("resuming after epoch {}", state.epoch);
            return Ok(Run {
                cfg,
                model: corpus_model,
                out_dir,
                params: ck.params,
                adam,
                state,
                events,
                log,
                history,
            });
        }
        let params = Params::<f32>::init(&corpus_model, derive_seed(cfg.seed, &[TAG_INIT]))?;
        let adam = Adam::new(
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
            params.values.iter().map(Vec::len),
        );
        let log = io(&log_path, fs::File::create(&log_path))?;
        Ok(Run {
            cfg,
            model: corpus_model,
            out_dir,
            params,
            adam,
            state: TrainState {
                epoch: 0,
                step: 0,
                adam_step: 0,
                plateau: Plateau::new(
                    cfg.lr0,
                    cfg.plateau_factor,
                    cfg.plateau_patience,
                    cfg.plateau_threshold,
                    cfg.min_lr,
                ),
                best_val: None,
                config: cfg.clone(),
            },
            events: Vec::new(),
            log,
            history: Vec::new(),
        })
    }

    fn write_line(&mut self, line: &LogLine) -> Result<()> {
        let mut s = serde_json::to_vec(line)?;
        s.push(b'\n');
        let p = self.out_dir.join(LOG_FILE);
        io(&p, self.log.write_all(&s))
    }

    fn event(&mut self, kind: &str, detail: serde_json::Value) {
        self.events.push(Event {
            epoch: self.state.epoch + 1,
            step: self.state.step,
            kind: kind.into(),
            detail,
        });
    }

    fn fail(&self, case_id: &str, epoch: usize, reason: &str) -> Error {
        let dump = serde_json::json!({
            "case_id": case_id,
            "epoch": epoch,
            "step": self.state.step,
            "lr": self.state.plateau.lr,
            "reason": reason,
        });
        let path = self.out_dir.join(FAILURE_FILE);
        if let Ok(bytes) = serde_json::to_vec_pretty(&dump) {
            if let Err(e) = crate::volume::write_atomic(&path, &bytes) {
                log::error!("could not write {}: {e}", path.display());
            }
        }
        log::error!("non-finite loss on case {case_id} at epoch {epoch}: {reason}");
        Error::NonFiniteLoss {
            case_id: case_id.to_string(),
        }
    }

    /// Gradients of one batch, averaged.
    fn batch_gradient(
        &self,
        batch: &[Prepared],
        epoch: usize,
    ) -> Result<(LossBreakdown, Vec<Vec<f32>>)> {
        let eval = |p: &Prepared| {
            gradient_prepared(
                &p.input,
                &p.loss,
                &self.params,
                &self.model,
                &self.cfg.weights,
            )
            .map_err(|e| match e {
                Error::NonFinite(what) => self.fail(&p.case_id, epoch, &what),
                other => other,
            })
        };
        let zero = || -> Vec<Vec<f32>> {
            self.params
                .values
                .iter()
                .map(|v| vec![0.0; v.len()])
                .collect()
        };
        let add = |acc: &mut Vec<Vec<f32>>, g: &[Vec<f32>]| {
            for (a, b) in acc.iter_mut().zip(g) {
                a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
            }
        };
        let mut losses = Vec::with_capacity(batch.len());
        let mut sum = zero();
        if self.cfg.deterministic {
            let results: Vec<_> = batch.par_iter().map(eval).collect();
            for r in results {
                let (l, g) = r?;
                losses.push(l);
                add(&mut sum, &g);
            }
        } else {
            // Accumulate in completion order.
            let shared = Mutex::new((Vec::new(), zero()));
            batch.par_iter().try_for_each(|p| -> Result<()> {
                let (l, g) = eval(p)?;
                let mut s = shared.lock().expect("gradient accumulator");
                s.0.push(l);
                add(&mut s.1, &g);
                Ok(())
            })?;
            (losses, sum) = shared.into_inner().expect("gradient accumulator");
        }
        let k = batch.len() as f64;
        let inv = 1.0 / batch.len() as f32;
        for v in sum.iter_mut().flatten() {
            *v *= inv;
        }
        let mean = |f: fn(&LossBreakdown) -> f64| losses.iter().map(f).sum::<f64>() / k;
        let loss = LossBreakdown {
            total: mean(|l| l.total),
            ssim: mean(|l| l.ssim),
            dice_p: mean(|l| l.dice_p),
            dice_n: mean(|l| l.dice_n),
            diffusion: mean(|l| l.diffusion),
        };
        Ok((loss, sum))
    }

    fn step(&mut self, batch: &[Prepared], epoch: usize, epoch_loss: &mut f64) -> Result<()> {
        let (loss, grads) = self.batch_gradient(batch, epoch)?;
        if !loss.total.is_finite() {
            return Err(self.fail(&batch[0].case_id, epoch, "batch loss"));
        }
        let lr = self.state.plateau.lr;
        let applied = self.adam.update(&mut self.params.values, &grads, lr);
        self.state.step += 1;
        if !applied {
            log::warn!(
                "epoch {epoch} step {}: non-finite gradient, update skipped",
                self.state.step
            );
            self.event(
                "skipped_step",
                serde_json::json!({"reason": "non-finite gradient"}),
            );
        }
        *epoch_loss += loss.total * batch.len() as f64;
        self.write_line(&LogLine::Step(StepRecord {
            epoch,
            step: self.state.step,
            total: loss.total,
            ssim: loss.ssim,
            dice_p: loss.dice_p,
            dice_n: loss.dice_n,
            diffusion: loss.diffusion,
            lr,
            skipped: !applied,
        }))
    }

    fn validation_loss(&self, cases: &[&CaseBundle]) -> Result<Option<f64>> {
        if cases.is_empty() {
            return Ok(None);
        }
        let losses: Vec<f64> = cases
            .par_iter()
            .map(|c| {
                let stack = stack_input(c, &self.cfg.input)?;
                let dvf = forward(&stack, &self.params, &self.model, c.ct.spacing_mm)?;
                Ok(composite_loss(c, &dvf, &self.cfg.weights, &self.cfg.input)?.total)
            })
            .collect::<Result<_>>()?;
        Ok(Some(losses.iter().sum::<f64>() / losses.len() as f64))
    }

    fn epoch(&mut self, train: &[&CaseBundle], val: &[&CaseBundle]) -> Result<()> {
        let epoch = self.state.epoch + 1;
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            self.cfg.seed,
            &[TAG_SHUFFLE, epoch as u64],
        )));
        let cfg = self.cfg;
        let mut epoch_loss = 0.0;
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel::<Result<Prepared>>(cfg.prefetch);
            let order = &order;
            scope.spawn(move || {
                for (pos, &ci) in order.iter().enumerate() {
                    if tx.send(prepare(train[ci], cfg, epoch, pos)).is_err() {
                        break;
                    }
                }
            });
            let mut batch = Vec::with_capacity(cfg.batch_size);
            for item in rx {
                batch.push(item?);
                if batch.len() == cfg.batch_size {
                    self.step(&batch, epoch, &mut epoch_loss)?;
                    batch.clear();
                }
            }
            if !batch.is_empty() {
                self.step(&batch, epoch, &mut epoch_loss)?;
            }
            Ok(())
        })?;
        let train_loss = epoch_loss / train.len() as f64;
        let val_loss = self.validation_loss(val)?;
        let metric = val_loss.unwrap_or(train_loss);
        let lr = self.state.plateau.lr;
        if self.state.plateau.observe(metric) {
            let to = self.state.plateau.lr;
            log::info!("epoch {epoch}: learning rate {lr:e} -> {to:e}");
            self.event("lr_change", serde_json::json!({"from": lr, "to": to}));
        }
        if self.state.best_val.is_none_or(|b| metric < b) {
            self.state.best_val = Some(metric);
            let mut ck = Checkpoint::new(self.model.clone(), self.params.clone());
            ck.meta =
                serde_json::json!({"epoch": epoch, "val_loss": metric, "input": self.cfg.input});
            ck.save(&self.out_dir.join(BEST_CHECKPOINT))?;
            self.event(
                "best_checkpoint",
                serde_json::json!({"file": BEST_CHECKPOINT, "val_loss": metric}),
            );
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        };
        self.write_line(&LogLine::Epoch(record.clone()))?;
        let p = self.out_dir.join(LOG_FILE);
        io(&p, self.log.flush())?;
        self.history.push(record);
        crate::volume::write_atomic(
            &self.out_dir.join(EVENTS_FILE),
            &serde_json::to_vec_pretty(&self.events)?,
        )?;

        self.state.epoch = epoch;
        self.state.adam_step = self.adam.step;
        let mut ck = Checkpoint::new(self.model.clone(), self.params.clone());
        ck.extra = moments_arrays(&self.params, &self.adam);
        ck.meta = serde_json::to_value(&self.state)?;
        ck.save(&self.out_dir.join(LAST_CHECKPOINT))?;
        log::info!(
            "epoch {epoch}/{}: train {train_loss:.5} val {} lr {lr:e} ({:.1}s)",
            self.cfg.epochs,
            val_loss.map_or("-".to_string(), |v| format!("{v:.5}")),
            t0.elapsed().as_secs_f64()
        );
        Ok(())
    }
}

/// Trains on the corpus split and writes checkpoints and logs to `out_dir`.
pub fn train(
    corpus: &Corpus,
    cfg: &TrainConfig,
    model: &ModelConfig,
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = cfg.model_for(model);
    model.validate()?;
    let train_cases = corpus.subset(&corpus.split.train)?;
    let val_cases = corpus.subset(&corpus.split.val)?;
    if train_cases.is_empty() {
        return Err(Error::Invalid("the training split is empty".into()));
    }
    for c in train_cases.iter().chain(&val_cases) {
        c.targets()?;
        if c.dims() != model.input_shape {
            return Err(Error::Shape(format!(
                "case {} has grid {:?}, the model expects {:?}",
                c.case_id,
                c.dims(),
                model.input_shape
            )));
        }
    }
    let mut run = Run::start(model, cfg, out_dir, opts)?;
    while run.state.epoch < cfg.epochs {
        if opts.stop_after_epochs.is_some_and(|s| run.state.epoch >= s) {
            break;
        }
        run.epoch(&train_cases, &val_cases)?;
    }
    let best = out_dir.join(BEST_CHECKPOINT);
    let best_params = if best.exists() {
        Checkpoint::load(&best)?.params
    } else {
        run.params.clone()
    };
    Ok(TrainOutcome {
        model: run.model,
        params: run.params,
        best_params,
        epochs: run.history,
        state: run.state,
    })
}
