//! Training loop: fresh synthetic batches every iteration, AdamW with a
//! separate backbone learning rate and a single 10x step drop.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Detector;
use crate::nn::{ParamGroup, ParamStore};
use crate::scene::{generate_scene, mix_seed, Scene};
use crate::tensor::{AdamW, AdamWConfig, Graph, OptimizerState, Tensor};

/// Loss means over one logging interval.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    /// Number of completed iterations at the end of the interval.
    pub iteration: usize,
    pub loss: f64,
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub lr: f64,
    /// Seconds since the trainer was created. Not written to CSV.
    pub wall_clock: f64,
}

pub const METRICS_HEADER: &str = "iteration,loss,loss_class,loss_l1,loss_giou,lr";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iteration, self.loss, self.class, self.l1, self.giou, self.lr
        )
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        writeln!(s, "{}", r.csv_row()).expect("write to string");
    }
    s
}

/// Scalar components of one iteration's batch loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub loss: f64,
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

/// Running sums for the current logging interval: loss, class, l1, giou, count.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Interval([f64; 5]);

impl Interval {
    fn add(&mut self, s: &StepLoss) {
        for (acc, v) in self.0.iter_mut().zip([s.loss, s.class, s.l1, s.giou, 1.0]) {
            *acc += v;
        }
    }
}

/// Scenes of training batch `iteration`.
pub fn training_batch(config: &TrainConfig, iteration: usize) -> Result<Vec<Scene>> {
    (0..config.batch_size)
        .map(|b| generate_scene(&config.scene, mix_seed(config.scene.seed, iteration as u64, b as u64)))
        .collect()
}

/// Held-out scenes for evaluation; disjoint from the training stream for
/// any realistic iteration count.
pub fn evaluation_scenes(config: &TrainConfig, seed: u64, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| generate_scene(&config.scene, mix_seed(seed, u64::MAX, i as u64)))
        .collect()
}

pub struct Trainer {
    pub model: Detector,
    pub params: ParamStore,
    optimizer: AdamW,
    iteration: usize,
    interval: Interval,
    started: Instant,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let (model, params) = Detector::new(config)?;
        let optimizer = AdamW::new(
            AdamWConfig {
                lr: config.lr,
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
            params.tensors(),
        );
        Ok(Self {
            model,
            params,
            optimizer,
            iteration: 0,
            interval: Interval::default(),
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.model.config
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// `(transformer, backbone)` learning rates in effect at `iteration`.
    pub fn learning_rates(config: &TrainConfig, iteration: usize) -> (f64, f64) {
        let f = if iteration >= config.lr_drop { 0.1 } else { 1.0 };
        (config.lr * f, config.lr_backbone * f)
    }

    fn tag(&self, e: Error, forward: bool) -> Error {
        match e {
            Error::LossDiverged { component, .. } => Error::LossDiverged {
                component,
                iteration: self.iteration,
            },
            Error::NonFinite(_) => Error::LossDiverged {
                component: if forward { "forward" } else { "gradient" },
                iteration: self.iteration,
            },
            e => e,
        }
    }

    /// One optimization step on a fresh batch.
    pub fn step(&mut self) -> Result<StepLoss> {
        let scenes = training_batch(self.config(), self.iteration)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, true);
        let loss = self
            .model
            .batch_loss(&mut g, &p, &scenes)
            .map_err(|e| self.tag(e, true))?;
        g.backward(loss.total).map_err(|e| self.tag(e, false))?;
        let grads: Vec<Tensor> = p
            .vars()
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let (lr, lr_backbone) = Self::learning_rates(self.config(), self.iteration);
        let rates: Vec<f64> = self
            .params
            .ids()
            .map(|id| match self.params.group(id) {
                ParamGroup::Transformer => lr,
                ParamGroup::Backbone => lr_backbone,
            })
            .collect();
        let params = self.params.tensors_mut();
        if let Err(e) = self.optimizer.step_with_rates(params, &grads, &rates) {
            return Err(self.tag(e, false));
        }
        let out = StepLoss {
            loss: loss.value,
            class: loss.class,
            l1: loss.l1,
            giou: loss.giou,
        };
        self.iteration += 1;
        self.interval.add(&out);
        Ok(out)
    }

    /// Trains until `until` iterations are complete (capped at the config
    /// budget), returning one record per finished logging interval.
    pub fn run(&mut self, until: usize, mut on_record: impl FnMut(&MetricsRecord)) -> Result<Vec<MetricsRecord>> {
        let until = until.min(self.config().iterations);
        let mut records = Vec::new();
        while self.iteration < until {
            self.step()?;
            let done = self.iteration;
            if done % self.config().log_every == 0 || done == self.config().iterations {
                let [loss, class, l1, giou, n] = self.interval.0;
                let rec = MetricsRecord {
                    iteration: done,
                    loss: loss / n,
                    class: class / n,
                    l1: l1 / n,
                    giou: giou / n,
                    lr: Self::learning_rates(self.config(), done - 1).0,
                    wall_clock: self.started.elapsed().as_secs_f64(),
                };
                self.interval = Interval::default();
                on_record(&rec);
                records.push(rec);
            }
        }
        Ok(records)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::with_capacity(3 * self.params.len() + 1);
        let st = &self.optimizer.state;
        for (i, name) in self.params.names().iter().enumerate() {
            tensors.push((format!("param.{name}"), self.params.tensors()[i].clone()));
        }
        for (i, name) in self.params.names().iter().enumerate() {
            tensors.push((format!("adam.m.{name}"), st.first_moment[i].clone()));
            tensors.push((format!("adam.v.{name}"), st.second_moment[i].clone()));
        }
        tensors.push((
            "train.interval".into(),
            Tensor::new(vec![5], self.interval.0.to_vec()).expect("five sums"),
        ));
        Checkpoint {
            config: self.config().clone(),
            iteration: self.iteration as u64,
            optimizer_step: st.step,
            tensors,
        }
    }

    /// Rebuilds a trainer that continues exactly where `ckpt` stopped.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(&ckpt.config)?;
        let fetch = |name: String, like: &Tensor| -> Result<Tensor> {
            let v = ckpt
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if v.shape() != like.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    v.shape(),
                    like.shape()
                )));
            }
            Ok(v.clone())
        };
        let mut state = OptimizerState::zeros_like(t.params.tensors());
        state.step = ckpt.optimizer_step;
        for i in 0..t.params.len() {
            let name = t.params.names()[i].clone();
            let like = t.params.tensors()[i].clone();
            t.params.tensors_mut()[i] = fetch(format!("param.{name}"), &like)?;
            state.first_moment[i] = fetch(format!("adam.m.{name}"), &like)?;
            state.second_moment[i] = fetch(format!("adam.v.{name}"), &like)?;
        }
        let expected = 3 * t.params.len() + 1;
        if ckpt.tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, model expects {expected}",
                ckpt.tensors.len()
            )));
        }
        let interval = fetch("train.interval".into(), &Tensor::zeros(&[5]))?;
        t.interval = Interval(interval.data().try_into().expect("five sums"));
        t.optimizer.state = state;
        t.iteration = usize::try_from(ckpt.iteration)
            .map_err(|_| Error::Checkpoint("iteration out of range".into()))?;
        if t.iteration > ckpt.config.iterations {
            return Err(Error::Checkpoint(format!(
                "iteration {} exceeds the configured budget {}",
                t.iteration, ckpt.config.iterations
            )));
        }
        Ok(t)
    }
}

/// Trains up to iteration `until` (capped at the budget) and writes
/// `checkpoint.cdtr`, `metrics.csv` and `config.json` into `out`. When
/// resuming, rows already in `out/metrics.csv` up to the checkpoint's
/// iteration are kept, so a stopped and resumed run ends with the same file
/// as an uninterrupted one.
pub fn train_to_dir(
    config: &TrainConfig,
    out: &Path,
    resume: Option<&Checkpoint>,
    until: usize,
    on_record: impl FnMut(&MetricsRecord),
) -> Result<Vec<MetricsRecord>> {
    let (mut trainer, mut csv) = match resume {
        Some(c) => {
            if &c.config != config {
                return Err(Error::Config("resume checkpoint was trained with a different config".into()));
            }
            let kept = match std::fs::read_to_string(out.join("metrics.csv")) {
                Ok(text) => rows_through(&text, c.iteration)?,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => metrics_csv(&[]),
                Err(e) => return Err(e.into()),
            };
            (Trainer::from_checkpoint(c)?, kept)
        }
        None => (Trainer::new(config)?, metrics_csv(&[])),
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), config.to_json())?;
    let records = trainer.run(until, on_record)?;
    for r in &records {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    std::fs::write(out.join("metrics.csv"), csv)?;
    trainer.checkpoint().save(&out.join("checkpoint.cdtr"))?;
    Ok(records)
}

/// Header plus the rows of an existing metrics file with iteration at most
/// `last`.
fn rows_through(text: &str, last: u64) -> Result<String> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Config("existing metrics.csv has an unexpected header".into()));
    }
    let mut out = metrics_csv(&[]);
    for line in lines {
        let it: u64 = line
            .split(',')
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::Config(format!("malformed metrics row `{line}`")))?;
        if it <= last {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        let mut c = TrainConfig::desk();
        c.width = 16;
        c.heads = 2;
        c.encoder_layers = 1;
        c.decoder_layers = 2;
        c.queries = 4;
        c.iterations = 6;
        c.lr_drop = 4;
        c.log_every = 4;
        c.batch_size = 1;
        c
    }

    #[test]
    fn lr_drops_tenfold() {
        let c = tiny();
        assert_eq!(Trainer::learning_rates(&c, 3), (c.lr, c.lr_backbone));
        let (a, b) = Trainer::learning_rates(&c, 4);
        assert_eq!((a, b), (c.lr * 0.1, c.lr_backbone * 0.1));
    }

    #[test]
    fn records_cover_partial_last_interval() {
        let mut t = Trainer::new(&tiny()).unwrap();
        let recs = t.run(100, |_| {}).unwrap();
        assert_eq!(recs.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![4, 6]);
        assert_eq!(t.iteration(), 6);
        assert!(metrics_csv(&recs).starts_with(METRICS_HEADER));
    }

    #[test]
    fn huge_parameter_reports_divergence() {
        let mut t = Trainer::new(&tiny()).unwrap();
        let id = t.params.find("patch_embed.weight").unwrap();
        t.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 1e300);
        let err = t.step().unwrap_err();
        assert!(matches!(err, Error::LossDiverged { iteration: 0, .. }), "{err}");
    }
}
