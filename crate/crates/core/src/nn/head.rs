//! Two-hidden-layer MLP heads for age regression and sex classification on
//! frozen embeddings.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::model::ParamSet;
use super::optim::{adam_step, AdamState};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::eval::metrics::{auroc, mae};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    AgeRegression,
    SexClassification,
}

impl Task {
    pub fn metric_name(self) -> &'static str {
        match self {
            Task::AgeRegression => "mae",
            Task::SexClassification => "auroc",
        }
    }

    /// Whether `a` is a strictly better validation metric than `b`.
    fn better(self, a: f64, b: f64) -> bool {
        match self {
            Task::AgeRegression => a < b,
            Task::SexClassification => a > b,
        }
    }
}

/// Hidden sizes searched in grid mode.
pub const HIDDEN_GRID: [usize; 4] = [32, 64, 128, 256];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: (usize, usize),
    /// Train one head per `(h1, h2)` pair from [`HIDDEN_GRID`] with
    /// `h1 >= h2` and keep the best on validation.
    pub grid_search: bool,
    pub lr: f64,
    pub lr_decay: f64,
    /// Stagnant epochs before each learning-rate decay.
    pub plateau: usize,
    /// Stagnant epochs before stopping; `None` trains for `max_epochs`.
    pub patience: Option<usize>,
    pub max_epochs: usize,
    pub batch_size: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: (256, 128),
            grid_search: false,
            lr: 1e-4,
            lr_decay: 0.5,
            plateau: 5,
            patience: Some(10),
            max_epochs: 200,
            batch_size: 64,
        }
    }
}

impl HeadConfig {
    pub fn preset(task: Task) -> Self {
        let hidden = match task {
            Task::AgeRegression => (256, 128),
            Task::SexClassification => (256, 256),
        };
        HeadConfig {
            hidden,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.hidden;
        if !(HIDDEN_GRID.contains(&a) && HIDDEN_GRID.contains(&b)) {
            return Err(Error::Config(format!(
                "hidden sizes ({a}, {b}) not in {HIDDEN_GRID:?}"
            )));
        }
        if !(self.lr > 0.0 && self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("head lr and decay must be positive".into()));
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.plateau == 0 {
            return Err(Error::Config("head epochs, batch size and plateau must be positive".into()));
        }
        Ok(())
    }

    fn grid(&self) -> Vec<(usize, usize)> {
        if !self.grid_search {
            return vec![self.hidden];
        }
        let mut g = Vec::new();
        for &a in &HIDDEN_GRID {
            for &b in &HIDDEN_GRID {
                if a >= b {
                    g.push((a, b));
                }
            }
        }
        g
    }
}

/// A trained head including its input and target standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub task: Task,
    pub hidden: (usize, usize),
    pub params: ParamSet<f32>,
    pub feat_mean: Vec<f32>,
    pub feat_scale: Vec<f32>,
    pub target_mean: f64,
    pub target_scale: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedHead {
    pub head: Head,
    /// MAE in years or AUROC on the validation split.
    pub val_metric: f64,
    pub epochs: usize,
}

fn init_head(d: usize, hidden: (usize, usize), seed: u64) -> ParamSet<f32> {
    let mut rng = rng::stream(&[seed, hidden.0 as u64, hidden.1 as u64]);
    let mut p = ParamSet::default();
    let mut layer = |p: &mut ParamSet<f32>, name: &str, d_in: usize, d_out: usize| {
        let bound = (6.0 / d_in as f64).sqrt();
        let w = (0..d_in * d_out).map(|_| rng.gen_range(-bound..bound) as f32).collect();
        p.push(format!("{name}.w"), Tensor::new(vec![d_out, d_in], w));
        p.push(format!("{name}.b"), Tensor::zeros(&[d_out]));
    };
    layer(&mut p, "fc1", d, hidden.0);
    layer(&mut p, "fc2", hidden.0, hidden.1);
    layer(&mut p, "out", hidden.1, 1);
    p
}

impl Head {
    fn standardize(&self, features: &[&[f32]]) -> Tensor<f32> {
        let d = self.feat_mean.len();
        let mut data = Vec::with_capacity(features.len() * d);
        for f in features {
            data.extend(
                f.iter()
                    .zip(&self.feat_mean)
                    .zip(&self.feat_scale)
                    .map(|((x, m), s)| (x - m) / s),
            );
        }
        Tensor::new(vec![features.len(), d], data)
    }

    fn forward(
        g: &mut Graph<f32>,
        params: &ParamSet<f32>,
        x: Tensor<f32>,
    ) -> (super::graph::Var, super::model::Bound) {
        let b = params.bind(g);
        let x = g.input(x);
        let h = g.linear(x, b.var("fc1.w"), b.var("fc1.b"));
        let h = g.relu(h);
        let h = g.linear(h, b.var("fc2.w"), b.var("fc2.b"));
        let h = g.relu(h);
        (g.linear(h, b.var("out.w"), b.var("out.b")), b)
    }

    /// Predicted age in years, or the logit for male sex.
    pub fn predict(&self, features: &[&[f32]]) -> Result<Vec<f64>> {
        if features.iter().any(|f| f.len() != self.feat_mean.len()) {
            return Err(Error::Shape(format!(
                "head expects {}-dimensional features",
                self.feat_mean.len()
            )));
        }
        let mut g = Graph::new();
        let (out, _) = Head::forward(&mut g, &self.params, self.standardize(features));
        Ok(g.value(out)
            .data
            .iter()
            .map(|&v| v as f64 * self.target_scale + self.target_mean)
            .collect())
    }

    fn evaluate(&self, features: &[&[f32]], targets: &[f64]) -> Result<f64> {
        let pred = self.predict(features)?;
        match self.task {
            Task::AgeRegression => mae(&pred, targets),
            Task::SexClassification => {
                let labels: Vec<bool> = targets.iter().map(|&t| t > 0.5).collect();
                auroc(&pred, &labels)
            }
        }
    }
}

fn column_stats(rows: &[&[f32]]) -> (Vec<f32>, Vec<f32>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0f64; d];
    for r in rows {
        for (m, &x) in mean.iter_mut().zip(r.iter()) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; d];
    for r in rows {
        for ((v, &x), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
            *v += (x as f64 - m).powi(2);
        }
    }
    let scale = var
        .iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > 1e-8 {
                s as f32
            } else {
                1.0
            }
        })
        .collect();
    (mean.into_iter().map(|m| m as f32).collect(), scale)
}

/// Trains a head on `train` indices, selecting by the metric on `val`.
/// Targets are ages in years or 0/1 (1 = male).
pub fn train_head(
    features: &[Vec<f32>],
    targets: &[f64],
    task: Task,
    cfg: &HeadConfig,
    train: &[usize],
    val: &[usize],
    seed: u64,
) -> Result<TrainedHead> {
    cfg.validate()?;
    if features.len() != targets.len() {
        return Err(Error::Shape("features and targets differ in length".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("head training or validation split".into()));
    }
    if let Some(&i) = train.iter().chain(val).find(|&&i| i >= features.len()) {
        return Err(Error::OutOfRange(format!("split index {i}")));
    }
    let d = features[train[0]].len();
    if d == 0 || train.iter().chain(val).any(|&i| features[i].len() != d) {
        return Err(Error::Shape("ragged feature vectors".into()));
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("head targets".into()));
    }
    if task == Task::SexClassification {
        let pos = train.iter().filter(|&&i| targets[i] > 0.5).count();
        if pos == 0 || pos == train.len() {
            return Err(Error::SingleClass);
        }
    }

    let train_rows: Vec<&[f32]> = train.iter().map(|&i| features[i].as_slice()).collect();
    let val_rows: Vec<&[f32]> = val.iter().map(|&i| features[i].as_slice()).collect();
    let val_targets: Vec<f64> = val.iter().map(|&i| targets[i]).collect();
    let (feat_mean, feat_scale) = column_stats(&train_rows);
    let (target_mean, target_scale) = match task {
        Task::AgeRegression => {
            let n = train.len() as f64;
            let m = train.iter().map(|&i| targets[i]).sum::<f64>() / n;
            let v = train.iter().map(|&i| (targets[i] - m).powi(2)).sum::<f64>() / n;
            (m, if v > 1e-12 { v.sqrt() } else { 1.0 })
        }
        Task::SexClassification => (0.0, 1.0),
    };

    let mut best: Option<TrainedHead> = None;
    for hidden in cfg.grid() {
        let mut head = Head {
            task,
            hidden,
            params: init_head(d, hidden, seed),
            feat_mean: feat_mean.clone(),
            feat_scale: feat_scale.clone(),
            target_mean,
            target_scale,
        };
        let x_all = head.standardize(&train_rows);
        let y_all: Vec<f32> = train
            .iter()
            .map(|&i| ((targets[i] - target_mean) / target_scale) as f32)
            .collect();
        let mut adam = AdamState::new(&head.params);
        let mut rng = rng::stream(&[seed, 0x4ead, hidden.0 as u64, hidden.1 as u64]);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut lr = cfg.lr;
        let mut best_metric = head.evaluate(&val_rows, &val_targets)?;
        let mut best_params = head.params.clone();
        let mut stagnant = 0;
        let mut epochs = 0;
        for _ in 0..cfg.max_epochs {
            epochs += 1;
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let mut xb = Vec::with_capacity(chunk.len() * d);
                for &r in chunk {
                    xb.extend_from_slice(&x_all.data[r * d..(r + 1) * d]);
                }
                let yb: Vec<f32> = chunk.iter().map(|&r| y_all[r]).collect();
                let mut g = Graph::new();
                let (out, _) = Head::forward(&mut g, &head.params, Tensor::new(vec![chunk.len(), d], xb));
                let loss = match task {
                    Task::AgeRegression => g.mse(out, &yb),
                    Task::SexClassification => g.bce_with_logits(out, &yb),
                };
                let grads = g.backward(loss);
                let pg = g.param_grads(&grads, &head.params.names);
                adam_step(&mut adam, &mut head.params, &pg, lr)?;
            }
            let metric = head.evaluate(&val_rows, &val_targets)?;
            if task.better(metric, best_metric) {
                best_metric = metric;
                best_params = head.params.clone();
                stagnant = 0;
            } else {
                stagnant += 1;
                if stagnant % cfg.plateau == 0 {
                    lr *= cfg.lr_decay;
                }
                if cfg.patience.is_some_and(|p| stagnant >= p) {
                    break;
                }
            }
        }
        if cfg.patience.is_some() {
            head.params = best_params;
        } else {
            best_metric = head.evaluate(&val_rows, &val_targets)?;
        }
        log::debug!("head {hidden:?}: val {} {best_metric:.4} after {epochs} epochs", task.metric_name());
        let candidate = TrainedHead {
            head,
            val_metric: best_metric,
            epochs,
        };
        if best
            .as_ref()
            .map_or(true, |b| task.better(candidate.val_metric, b.val_metric))
        {
            best = Some(candidate);
        }
    }
    Ok(best.expect("grid is never empty"))
}
