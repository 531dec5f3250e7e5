use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::Windows;
use crate::error::{Error, Result};
use crate::model::{Model, RunMode};
use crate::params::ParamSet;
use crate::rng::SeededRng;
use crate::tape::Tape;
use crate::training::checkpoint::Checkpoint;
use crate::training::loss::mpjpe;
use crate::training::optim::{
    clip_gradients, step_lr, Adam, AdamConfig, BASE_LR, BATCH_SIZE, CLIP_NORM, DECAY_EVERY, EPOCHS,
    LR_DECAY,
};

/// Optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    pub decay_every: usize,
    pub clip_norm: f64,
    pub adam: AdamConfig,
    /// Seeds batch order and dropout.
    pub seed: u64,
    /// Epochs between numbered checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Set the model's input offset to the mean training pose before fitting.
    pub center_inputs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: EPOCHS,
            batch_size: BATCH_SIZE,
            base_lr: BASE_LR,
            lr_decay: LR_DECAY,
            decay_every: DECAY_EVERY,
            clip_norm: CLIP_NORM,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 10,
            center_inputs: true,
        }
    }
}

impl TrainConfig {
    /// Learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_lr(self.base_lr, self.lr_decay, self.decay_every, epoch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Config(
                "epochs, batch_size and decay_every must be positive".into(),
            ));
        }
        if !(self.base_lr >= 0.0) || !(self.clip_norm > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config(
                "need base_lr >= 0, clip_norm > 0 and lr_decay > 0".into(),
            ));
        }
        Ok(())
    }
}

/// One row of the loss history; `epoch` counts from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    /// Epoch with the lowest validation loss (training loss without
    /// validation data).
    pub best_epoch: usize,
    pub adam: Adam,
}

/// `epoch,lr,train_loss,val_loss`; the last column is empty without
/// validation data.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_loss\n");
    for r in history {
        let val = r.val_loss.map(|v| format!("{v:e}")).unwrap_or_default();
        s.push_str(&format!("{},{:e},{:e},{val}\n", r.epoch, r.lr, r.train_loss));
    }
    s
}

/// Parses [`history_csv`] output.
pub fn parse_history_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "epoch,lr,train_loss,val_loss")) => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: "missing loss history header".into(),
            })
        }
    }
    lines
        .map(|(i, line)| {
            let bad = || Error::Parse {
                line: i + 1,
                msg: format!("bad history row `{line}`"),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                lr: f[1].parse().map_err(|_| bad())?,
                train_loss: f[2].parse().map_err(|_| bad())?,
                val_loss: if f[3].is_empty() {
                    None
                } else {
                    Some(f[3].parse().map_err(|_| bad())?)
                },
            })
        })
        .collect()
}

/// Mean loss over every frame of every window, eval mode.
pub fn eval_loss(model: &Model, data: &Windows) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(32) {
        let (x, y) = data.batch(chunk);
        total += mpjpe(&model.predict(&x)?, &y)? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

fn non_finite_group(set: &ParamSet) -> Option<&str> {
    set.iter().find(|(_, t)| !t.all_finite()).map(|(n, _)| n)
}

fn largest_group(set: &ParamSet) -> &str {
    set.iter()
        .map(|(n, t)| (n, t.data().iter().fold(0.0f64, |a, v| a.max(v.abs()))))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map_or("-", |(n, _)| n)
}

/// Minibatch training with seeded shuffling, gradient clipping and Adam.
/// With `out_dir`, writes `loss_history.csv` after every epoch and the
/// `last`, `best` and numbered checkpoints.
pub fn fit(
    model: &mut Model,
    cfg: &TrainConfig,
    train: &Windows,
    val: Option<&Windows>,
    out_dir: Option<&Path>,
) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.center_inputs {
        model.set_input_offset(train.mean_pose())?;
    }
    let mut order_rng = SeededRng::derive(cfg.seed, 1);
    let mut drop_rng = SeededRng::derive(cfg.seed, 2);
    let mut adam = Adam::new(&model.params, cfg.adam.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for e in 0..cfg.epochs {
        let lr = cfg.lr_at(e);
        order_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train.batch(idx);
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let out = model.forward(&mut tape, &bound, &x, RunMode::Train(&mut drop_rng))?;
            let loss = tape.mpjpe(out.output, Arc::new(y))?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                let culprit = non_finite_group(&model.params).unwrap_or_else(|| largest_group(&model.params));
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {} batch {b}; parameter group {culprit}",
                    e + 1
                )));
            }
            let grads = tape.backward(loss).map_err(|err| {
                Error::Numeric(format!("epoch {} batch {b}: {err}", e + 1))
            })?;
            let mut g = bound.gradients(&grads, &model.params);
            if let Some(name) = non_finite_group(&g) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at epoch {} batch {b}; parameter group {name}",
                    e + 1
                )));
            }
            clip_gradients(&mut g, cfg.clip_norm)?;
            adam.step(&mut model.params, &g, lr)?;
            model.apply_bn_updates(&out.bn_updates)?;
            loss_sum += value * idx.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = val.map(|v| eval_loss(model, v)).transpose()?;
        let epoch = e + 1;
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
        });
        let score = val_loss.unwrap_or(train_loss);
        let improved = best.map_or(true, |(_, s)| score < s);
        if improved {
            best = Some((epoch, score));
        }
        if let Some(dir) = out_dir {
            std::fs::write(dir.join("loss_history.csv"), history_csv(&history))?;
            let ck = Checkpoint {
                model: model.clone(),
                train: Some(cfg.clone()),
                epoch: epoch as u64,
                adam: Some(adam.clone()),
            };
            ck.save(&dir.join("last.ckpt"))?;
            if improved {
                ck.save(&dir.join("best.ckpt"))?;
            }
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                ck.save(&dir.join(format!("epoch_{epoch:03}.ckpt")))?;
            }
        }
    }
    Ok(FitReport {
        history,
        best_epoch: best.map_or(0, |(e, _)| e),
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_windows, synthesize_dataset};
    use crate::graph::{SkeletonKind, SkeletonTopology};
    use crate::model::ModelConfig;

    fn setup(n_seq: usize) -> (ModelConfig, Windows) {
        let cfg = ModelConfig {
            t_history: 3,
            t_future: 2,
            joints: 3,
            input_dim: 3,
            d_hidden: 4,
            blocks: 1,
            level_joint_counts: vec![3, 1],
            skeleton: SkeletonKind::Chain,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let topo = SkeletonTopology::chain(3, &[1]).unwrap();
        let mut pairs = Vec::new();
        for s in synthesize_dataset(&topo, n_seq, 5, 3).unwrap() {
            pairs.extend(split_windows(&s, 3, 2, 5).unwrap());
        }
        // work in metres so a small model sees unit-scale inputs
        let w = Windows::from_pairs(&pairs).unwrap();
        let w = Windows {
            history: w.history.scale(1e-2),
            future: w.future.scale(1e-2),
        };
        (cfg, w)
    }

    #[test]
    fn overfits_single_sample() {
        let (cfg, data) = setup(1);
        let mut model = Model::init(&cfg).unwrap();
        let tc = TrainConfig {
            base_lr: 1e-2,
            ..TrainConfig::default()
        };
        let report = fit(&mut model, &tc, &data, None, None).unwrap();
        assert_eq!(report.history.len(), 50);
        assert!(report.history[49].train_loss < report.history[0].train_loss);
    }

    #[test]
    fn same_seed_same_history() {
        let (cfg, data) = setup(6);
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 4,
            base_lr: 1e-3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = Model::init(&cfg).unwrap();
            fit(&mut model, &tc, &data, Some(&data), None).unwrap().history
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_lr_full_batch_keeps_loss() {
        let (cfg, data) = setup(5);
        let mut model = Model::init(&cfg).unwrap();
        let before = model.params.clone();
        let tc = TrainConfig {
            epochs: 4,
            base_lr: 0.0,
            ..TrainConfig::default()
        };
        let h = fit(&mut model, &tc, &data, None, None).unwrap().history;
        for r in &h {
            assert!((r.train_loss - h[0].train_loss).abs() < 1e-12);
        }
        assert_eq!(model.params, before);
    }

    #[test]
    fn writes_history_and_checkpoints() {
        let (cfg, data) = setup(2);
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::init(&cfg).unwrap();
        let tc = TrainConfig {
            epochs: 10,
            checkpoint_every: 5,
            base_lr: 1e-3,
            ..TrainConfig::default()
        };
        let report = fit(&mut model, &tc, &data, Some(&data), Some(dir.path())).unwrap();
        let text = std::fs::read_to_string(dir.path().join("loss_history.csv")).unwrap();
        assert_eq!(parse_history_csv(&text).unwrap(), report.history);
        for f in ["last.ckpt", "best.ckpt", "epoch_005.ckpt", "epoch_010.ckpt"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let last = Checkpoint::load(&dir.path().join("last.ckpt")).unwrap();
        assert_eq!(last.epoch, 10);
        assert_eq!(last.model.params, model.params);
    }

    #[test]
    fn schedule_and_validation() {
        let tc = TrainConfig::default();
        assert_eq!(tc.lr_at(0), 1e-5);
        assert!((tc.lr_at(4) - 9.6e-6).abs() < 1e-18);
        assert!(TrainConfig { batch_size: 0, ..tc.clone() }.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }
}
