//! Mini-batch training with Adam and cosine warm restarts.

use std::io::Write;
use std::path::PathBuf;

use bat_core::autodiff::Tape;
use bat_core::data::Scene;
use bat_core::model::{BatModel, PreparedScene};
use bat_core::nn::ParamStore;
use bat_core::objective::{cosine_warm_restart_lr, OptimizerState};
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::eval::{default_horizons, evaluate, Predictor};
use crate::{HarnessError, Result, RunConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Rate used for the epoch's last batch.
    pub lr: f64,
    /// Scene-weighted mean of the sequence NLL term.
    pub train_nll: f64,
    /// Root of the mean squared displacement of the labeled mode over all steps.
    pub train_rmse: f64,
    /// Best-mode validation RMSE per whole-second horizon; empty when skipped.
    pub val_rmse: Vec<f64>,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Receives the CSV training log.
    pub log: Option<&'a mut dyn Write>,
    /// Final checkpoint path; also where the last good state goes on abort.
    pub checkpoint: Option<PathBuf>,
    /// Continue from this state instead of a fresh init.
    pub resume: Option<Checkpoint>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

pub fn log_header(horizons: usize) -> String {
    let mut s = String::from("epoch,lr,train_nll,train_rmse");
    for h in 1..=horizons {
        s.push_str(&format!(",val_rmse_{h}s"));
    }
    s
}

fn log_line(entry: &EpochLog, horizons: usize) -> String {
    let mut s = format!("{},{:.8},{:.6},{:.6}", entry.epoch, entry.lr, entry.train_nll, entry.train_rmse);
    for h in 0..horizons {
        match entry.val_rmse.get(h) {
            Some(v) => s.push_str(&format!(",{v:.6}")),
            None => s.push(','),
        }
    }
    s
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Gradient of the loss with respect to every bound parameter, keyed by name.
fn batch_gradients(
    model: &BatModel,
    params: &ParamStore,
    batch: &[&PreparedScene],
    cfg: &RunConfig,
) -> Result<(IndexMap<String, Vec<f64>>, bat_core::model::LossParts)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let (loss, parts) = model.loss(&mut tape, &bound, batch, cfg.loss)?;
    if !parts.total.is_finite() {
        return Ok((IndexMap::new(), parts));
    }
    let grads = tape.backward(loss).map_err(bat_core::CoreError::from)?;
    let map = bound
        .iter()
        .map(|(name, var)| {
            let len = params.get(name).map_or(0, |t| t.len());
            (name.to_string(), grads.get_or_zeros(var, len))
        })
        .collect();
    Ok((map, parts))
}

/// Trains on `train`, optionally tracking `val`. Deterministic for a given
/// config and scene order.
pub fn train(cfg: &RunConfig, train: &[Scene], val: &[Scene], mut opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(HarnessError::Config("training split is empty".into()));
    }
    let model = BatModel::new(cfg.model.clone())?;
    let (mut params, mut optimizer, start) = match opts.resume.take() {
        Some(c) => {
            model.check_params(&c.params)?;
            (c.params, c.optimizer, c.epoch)
        }
        None => {
            let p = model.init_params();
            let o = OptimizerState::new(&p, cfg.adam);
            (p, o, 0)
        }
    };
    let prepared: Vec<PreparedScene> = train.iter().map(|s| model.prepare(s)).collect::<std::result::Result<_, _>>()?;
    let horizons = default_horizons(&cfg.model);
    if let Some(w) = opts.log.as_deref_mut() {
        writeln!(w, "{}", log_header(horizons.len()))?;
    }
    let snapshot = |params: &ParamStore, optimizer: &OptimizerState, epoch: usize| Checkpoint {
        params: params.clone(),
        optimizer: optimizer.clone(),
        config: cfg.clone(),
        epoch,
    };

    let n = prepared.len();
    let batches = n.div_ceil(cfg.batch_size);
    let mut log = Vec::new();
    for epoch in start..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(cfg.model.seed, epoch)));
        let (mut nll_sum, mut disp_sum) = (0.0, 0.0);
        let mut lr = cfg.lr;
        for b in 0..batches {
            let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];
            let batch: Vec<&PreparedScene> = idx.iter().map(|&i| &prepared[i]).collect();
            lr = cosine_warm_restart_lr(cfg.lr, epoch as f64 + b as f64 / batches as f64, cfg.t0, cfg.t_mult);
            let (grads, parts) = batch_gradients(&model, &params, &batch, cfg)?;
            let step = if parts.total.is_finite() {
                optimizer.adam_step(&mut params, &grads, lr).map_err(HarnessError::from)
            } else {
                Err(HarnessError::Core(bat_core::CoreError::NonFinite("loss".into())))
            };
            if let Err(e) = step {
                if !matches!(e, HarnessError::Core(bat_core::CoreError::NonFinite(_))) {
                    return Err(e);
                }
                // Nothing was updated for this batch, so `params` is the last good state.
                let saved = match &opts.checkpoint {
                    Some(path) => {
                        snapshot(&params, &optimizer, epoch).save(path)?;
                        Some(path.display().to_string())
                    }
                    None => None,
                };
                log::error!("aborting: {e}");
                return Err(HarnessError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b,
                    saved,
                });
            }
            nll_sum += parts.nll * batch.len() as f64;
            disp_sum += parts.displacement * batch.len() as f64;
        }
        let val_rmse = if cfg.val_every > 0 && (epoch + 1) % cfg.val_every == 0 && !val.is_empty() {
            let t = evaluate(&model, &params, val, &horizons, false)?;
            t.get("all", Predictor::BestMode).map(|r| r.rmse.clone()).unwrap_or_default()
        } else {
            Vec::new()
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            train_nll: nll_sum / n as f64,
            train_rmse: (disp_sum / n as f64).sqrt(),
            val_rmse,
        };
        log::info!("{}", log_line(&entry, horizons.len()));
        if let Some(w) = opts.log.as_deref_mut() {
            writeln!(w, "{}", log_line(&entry, horizons.len()))?;
        }
        log.push(entry);
    }
    let checkpoint = snapshot(&params, &optimizer, cfg.epochs.max(start));
    if let Some(path) = &opts.checkpoint {
        checkpoint.save(path)?;
    }
    Ok(TrainOutcome { checkpoint, log })
}
