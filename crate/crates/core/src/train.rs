//! Mini-batch training loop.

use std::io::Write;

use rand::seq::SliceRandom;

use crate::config::TrainConfig;
use crate::data::Window;
use crate::error::{Error, Result};
use crate::init::{seeded, SeedRng};
use crate::metrics::{fmt6, mae};
use crate::model::MstGnn;
use crate::optim::{clip, global_norm, Adam, AdamConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Training aborts once the batch loss exceeds this.
pub const LOSS_LIMIT: f64 = 1e9;

pub const METRICS_HEADER: &str = "epoch,step,l_pred,l_gram,l_ent,total,mae";

/// Batch-mean loss components and diagnostics from one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub l_pred: f64,
    pub l_gram: f64,
    pub l_ent: f64,
    pub total: f64,
    pub mae: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// `Ψ_{0→r}` values from every window of the batch.
    pub pool_ops: Vec<Tensor>,
    /// `Ψ_{r→0}` values from every window of the batch.
    pub unpool_ops: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub step: u64,
    pub l_pred: f64,
    pub l_gram: f64,
    pub l_ent: f64,
    pub total: f64,
    pub mae: f64,
}

impl EpochStats {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            fmt6(self.l_pred),
            fmt6(self.l_gram),
            fmt6(self.l_ent),
            fmt6(self.total),
            fmt6(self.mae)
        )
    }
}

pub struct Trainer {
    pub model: MstGnn,
    pub config: TrainConfig,
    pub adam: Adam,
    shuffle: SeedRng,
}

impl Trainer {
    pub fn new(model: MstGnn, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(AdamConfig::from(&config), model.store());
        let shuffle = seeded(config.seed.wrapping_add(0x5eed));
        Ok(Trainer {
            model,
            config,
            adam,
            shuffle,
        })
    }

    /// A fresh model seeded from the training seed.
    pub fn from_config(model: crate::config::ModelConfig, config: TrainConfig) -> Result<Self> {
        let model = MstGnn::new(model, config.seed)?;
        Self::new(model, config)
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    /// Forward, backward, clip and one Adam update on `batch`. The loss is
    /// the mean over the batch's windows.
    pub fn step(&mut self, batch: &[&Window]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let weights = self.config.weights;
        let model = &self.model;
        let mut tape = Tape::new();
        let p = model.store().bind(&mut tape);
        let inv = 1.0 / batch.len() as f64;
        let (mut totals, mut sums) = (Vec::new(), [0.0; 4]);
        let (mut pool_ops, mut unpool_ops) = (Vec::new(), Vec::new());
        for w in batch {
            let teacher = self.config.teacher_forcing.then_some(&w.future);
            let fwd = model.forward(&mut tape, &p, &w.observed, teacher)?;
            let out = model.loss(&mut tape, &fwd, &w.future, &weights)?;
            sums[0] += tape.value(out.terms.pred).item();
            sums[1] += tape.value(out.terms.gram).item();
            sums[2] += tape.value(out.terms.ent).item();
            sums[3] += mae(tape.value(fwd.prediction), &w.future)?.mean;
            pool_ops.extend(fwd.pool_operators().iter().map(|&v| tape.value(v).clone()));
            unpool_ops.extend(
                fwd.unpool_operators()
                    .iter()
                    .map(|&v| tape.value(v).clone()),
            );
            totals.push(out.total);
        }
        let sum = tape.add_all(&totals)?;
        let loss = tape.scale(sum, inv)?;
        let total = tape.value(loss).item();
        if total > LOSS_LIMIT {
            return Err(Error::Diverged(format!(
                "loss {total:e} exceeds {LOSS_LIMIT:e} at step {}",
                self.adam.step + 1
            )));
        }
        let grads = tape.backward(loss)?;
        let mut grads = model.store().collect_grads(&p, &grads);
        let grad_norm = global_norm(&grads);
        clip(&mut grads, self.config.clip, self.config.clip_mode)?;
        self.adam.step(self.model.store_mut(), &grads)?;
        Ok(StepStats {
            l_pred: sums[0] * inv,
            l_gram: sums[1] * inv,
            l_ent: sums[2] * inv,
            total,
            mae: sums[3] * inv,
            grad_norm,
            pool_ops,
            unpool_ops,
        })
    }

    /// One shuffled pass over `windows`. `on_step` sees every step's stats and
    /// may return `false` to stop early.
    pub fn epoch(
        &mut self,
        epoch: usize,
        windows: &[Window],
        mut on_step: impl FnMut(&StepStats) -> bool,
    ) -> Result<(EpochStats, bool)> {
        if windows.is_empty() {
            return Err(Error::Config("no training windows".into()));
        }
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut self.shuffle);
        let mut acc = [0.0; 5];
        let mut batches = 0usize;
        let mut keep_going = true;
        for chunk in order.chunks(self.config.batch_size) {
            if self
                .config
                .max_steps
                .is_some_and(|n| self.adam.step >= n as u64)
            {
                keep_going = false;
                break;
            }
            let batch: Vec<&Window> = chunk.iter().map(|&i| &windows[i]).collect();
            let s = self.step(&batch)?;
            for (a, v) in acc
                .iter_mut()
                .zip([s.l_pred, s.l_gram, s.l_ent, s.total, s.mae])
            {
                *a += v;
            }
            batches += 1;
            if !on_step(&s) {
                keep_going = false;
                break;
            }
        }
        let n = batches.max(1) as f64;
        let stats = EpochStats {
            epoch,
            step: self.adam.step,
            l_pred: acc[0] / n,
            l_gram: acc[1] / n,
            l_ent: acc[2] / n,
            total: acc[3] / n,
            mae: acc[4] / n,
        };
        Ok((stats, keep_going && batches > 0))
    }

    /// Runs the configured number of epochs (or until `max_steps`), writing
    /// one metrics row per epoch to `log`.
    pub fn fit(&mut self, windows: &[Window], log: &mut impl Write) -> Result<Vec<EpochStats>> {
        writeln!(log, "{METRICS_HEADER}")?;
        let mut history = Vec::new();
        let epochs = match self.config.max_steps {
            Some(_) => usize::MAX,
            None => self.config.epochs,
        };
        for epoch in 1..=epochs {
            if self
                .config
                .max_steps
                .is_some_and(|n| self.adam.step >= n as u64)
            {
                break;
            }
            let (stats, more) = self.epoch(epoch, windows, |_| true)?;
            writeln!(log, "{}", stats.csv_row())?;
            history.push(stats);
            if !more {
                break;
            }
        }
        Ok(history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{synth_generate, windows};

    fn toy() -> ModelConfig {
        ModelConfig {
            obs_len: 4,
            pred_len: 2,
            layer_dims: vec![4, 4],
            embed_dim: 2,
            temporal_hops: 1,
            spatial_scales: 2,
            temporal_scales: 2,
            ..ModelConfig::desk(4)
        }
    }

    fn data() -> Vec<Window> {
        windows(&synth_generate(4, 12, 1).unwrap(), 4, 2, 1).unwrap()
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 3,
            ..Default::default()
        };
        let mut t = Trainer::from_config(toy(), cfg).unwrap();
        let before = t.model.store().values();
        let mut sink = Vec::new();
        t.fit(&data(), &mut sink).unwrap();
        assert_eq!(t.model.store().values(), before);
        assert!(t.step_count() > 0);
    }

    #[test]
    fn equal_seeds_give_equal_logs() {
        let run = || {
            let cfg = TrainConfig {
                lr: 1e-3,
                batch_size: 2,
                epochs: 2,
                ..Default::default()
            };
            let mut t = Trainer::from_config(toy(), cfg).unwrap();
            let mut log = Vec::new();
            t.fit(&data(), &mut log).unwrap();
            (String::from_utf8(log).unwrap(), t.model.store().values())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert!(a.starts_with(METRICS_HEADER));
        assert_eq!(a.lines().count(), 3);
    }

    #[test]
    fn max_steps_stops_early() {
        let cfg = TrainConfig {
            batch_size: 1,
            max_steps: Some(5),
            ..Default::default()
        };
        let mut t = Trainer::from_config(toy(), cfg).unwrap();
        t.fit(&data(), &mut Vec::new()).unwrap();
        assert_eq!(t.step_count(), 5);
    }

    #[test]
    fn step_reports_stochastic_operators() {
        let mut t = Trainer::from_config(toy(), TrainConfig::default()).unwrap();
        let d = data();
        let s = t.step(&[&d[0], &d[1]]).unwrap();
        assert_eq!(s.pool_ops.len(), 4);
        for psi in s.pool_ops.iter().chain(&s.unpool_ops) {
            for row in psi.data().chunks(psi.cols()) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
