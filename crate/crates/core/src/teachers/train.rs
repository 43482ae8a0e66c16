//! Teacher training loop: full-softmax cross-entropy on the next item,
//! per-epoch validation HR@10, early stopping with patience, and the
//! best-validation checkpoint returned.

use rand::seq::SliceRandom;

use crate::catalog::SeqExample;
use crate::error::{Error, Result};
use crate::optim::{Adagrad, Adam};
use crate::parallel::{chunked_fold, map_indexed, ExecMode};
use crate::rng::substream;

use super::{TeacherConfig, TeacherModel, TeacherOpt};

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_hr10: f64,
    pub epoch_losses: Vec<f64>,
    pub val_hr10: Vec<f64>,
}

enum Opt {
    Adam(Adam),
    Adagrad(Adagrad),
}

impl Opt {
    fn step(&mut self, p: &mut [f64], g: &[f64]) {
        match self {
            Opt::Adam(o) => o.step(p, g),
            Opt::Adagrad(o) => o.step(p, g),
        }
    }
}

/// 1-based rank of `target` under descending score with lower-index
/// tie-break.
pub fn rank_of_target(scores: &[f64], target: u32) -> usize {
    let t = target as usize;
    let st = scores[t];
    let mut rank = 1;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if i == t {
            continue;
        }
        if s > st || (s == st && i < t) {
            rank += 1;
        }
    }
    rank
}

/// HR@10 of `model` over `examples`, full-catalog ranking.
pub fn validation_hr10(model: &TeacherModel, examples: &[SeqExample], mode: ExecMode) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let hits = map_indexed(mode, examples, |_, ex| -> Result<f64> {
        let scores = model.score_next(&ex.history)?;
        Ok(if rank_of_target(&scores, ex.target) <= 10 {
            1.0
        } else {
            0.0
        })
    });
    let mut total = 0.0;
    for h in hits {
        total += h?;
    }
    Ok(total / examples.len() as f64)
}

/// Train on the train split, validate per epoch, return the
/// best-validation model (ties keep the earlier epoch). `epochs = 0`
/// returns the random initialization unchanged.
pub fn train_teacher(
    config: &TeacherConfig,
    train: &[SeqExample],
    valid: &[SeqExample],
    n_items: usize,
    l_hist: usize,
    mode: ExecMode,
) -> Result<(TeacherModel, TrainReport)> {
    if train.is_empty() {
        return Err(Error::Data("empty train split".to_string()));
    }
    let mut model = TeacherModel::init(config, n_items, l_hist)?;
    let mut report = TrainReport {
        epochs_run: 0,
        best_epoch: 0,
        best_val_hr10: f64::NEG_INFINITY,
        epoch_losses: Vec::new(),
        val_hr10: Vec::new(),
    };
    if config.epochs == 0 {
        report.best_val_hr10 = 0.0;
        return Ok((model, report));
    }

    let n_params = model.scalar_count();
    let mut opt = match config.optimizer {
        TeacherOpt::Adam => Opt::Adam(Adam::new(n_params, config.learning_rate)),
        TeacherOpt::Adagrad => Opt::Adagrad(Adagrad::new(n_params, config.learning_rate)),
    };

    let mut best: Option<TeacherModel> = None;
    let mut step = 0usize;
    let mut since_best = 0usize;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut erng = substream(config.seed, &format!("teacher:epoch{epoch}"));
        order.shuffle(&mut erng);

        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for batch_ids in order.chunks(config.batch_size) {
            let batch: Vec<&SeqExample> = batch_ids.iter().map(|&i| &train[i]).collect();
            let d_scale = 1.0 / batch.len() as f64;
            let seed = config.seed;
            let acc = chunked_fold(
                mode,
                &batch,
                || (0.0f64, model.grads_zero(), Ok(())),
                |acc, idx, ex| {
                    if acc.2.is_err() {
                        return;
                    }
                    let mut drng = substream(seed, &format!("teacher:drop:{step}:{idx}"));
                    let rng = if config.dropout > 0.0 {
                        Some(&mut drng)
                    } else {
                        None
                    };
                    match model.example_loss_grads(&ex.history, ex.target, rng, d_scale, &mut acc.1)
                    {
                        Ok(l) => acc.0 += l,
                        Err(e) => acc.2 = Err(e),
                    }
                },
                |total, part| {
                    if total.2.is_ok() {
                        if part.2.is_err() {
                            total.2 = part.2;
                        } else {
                            total.0 += part.0;
                            total.1.add(&part.1);
                        }
                    }
                },
            );
            acc.2?;
            let batch_loss = acc.0 / batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Train {
                    step,
                    msg: format!("non-finite loss {batch_loss}"),
                });
            }
            let grads = acc.1;
            let mut flat = model.collect();
            let gflat = grads.collect(config.embedding_dim);
            opt.step(&mut flat, &gflat);
            if flat.iter().any(|x| !x.is_finite()) {
                return Err(Error::Train {
                    step,
                    msg: "non-finite weight after update".to_string(),
                });
            }
            model.assign(&flat);
            epoch_loss += batch_loss;
            n_batches += 1;
            step += 1;
        }
        report.epoch_losses.push(epoch_loss / n_batches.max(1) as f64);
        report.epochs_run = epoch + 1;

        let val = validation_hr10(&model, valid, mode)?;
        report.val_hr10.push(val);
        if val > report.best_val_hr10 {
            report.best_val_hr10 = val;
            report.best_epoch = epoch;
            best = Some(model.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    Ok((best.unwrap_or(model), report))
}
