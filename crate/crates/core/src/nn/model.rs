//! Residual 1-D convolutional encoder and its projection head.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graph::{BatchStats, Graph, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng;

/// Named tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet<F> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<F>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.names.len() - 1
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        let i = self
            .index(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.tensors[i]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Registers every tensor as a graph parameter, returning vars in order.
    pub fn bind(&self, g: &mut Graph<F>) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .enumerate()
                .map(|(i, t)| g.param(i, t.clone()))
                .collect(),
            names: self.names.clone(),
        }
    }
}

/// Graph variables for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
    names: Vec<String>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub in_leads: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub block_kernel: usize,
    /// Output channels of each residual block; its length is the block count.
    pub widths: Vec<usize>,
    pub block_stride: usize,
    pub embedding_dim: usize,
    /// Hidden and output sizes of the projection head.
    pub projection_dims: Vec<usize>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Dropout rate; only 0 is supported.
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_leads: 8,
            stem_kernel: 17,
            stem_stride: 1,
            block_kernel: 15,
            widths: vec![16, 32, 64, 128],
            block_stride: 4,
            embedding_dim: 256,
            projection_dims: vec![256, 128],
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    /// Widths for large-scale runs.
    pub fn full_scale() -> Self {
        EncoderConfig {
            widths: vec![64, 128, 196, 256],
            ..Default::default()
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.widths.len()
    }

    pub fn projection_dim(&self) -> usize {
        *self.projection_dims.last().unwrap_or(&self.embedding_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let odd = |k: usize| k % 2 == 1;
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if !(odd(self.stem_kernel) && odd(self.block_kernel)) {
            return Err(Error::Config("kernel sizes must be odd".into()));
        }
        if self.in_leads == 0 || self.embedding_dim == 0 || self.stem_stride == 0 || self.block_stride == 0
        {
            return Err(Error::Config("zero-sized encoder dimension".into()));
        }
        if self.projection_dims.is_empty() || self.projection_dims.contains(&0) {
            return Err(Error::Config("projection head needs positive sizes".into()));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(Error::Config("bn_momentum in [0,1), bn_eps > 0".into()));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config("dropout is not supported".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, binding checkpoints to configs.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }

    fn block_io(&self, i: usize) -> (usize, usize) {
        let c_in = if i == 0 { self.widths[0] } else { self.widths[i - 1] };
        (c_in, self.widths[i])
    }

    fn needs_skip_conv(&self, i: usize) -> bool {
        let (c_in, c_out) = self.block_io(i);
        c_in != c_out || self.block_stride != 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated by the caller.
    Train,
    /// Frozen running statistics.
    Eval,
}

/// Encoder + projection weights and normalization running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F> {
    pub params: ParamSet<F>,
    /// `<layer>.running_mean` / `<layer>.running_var` per normalization layer.
    pub buffers: ParamSet<F>,
}

fn uniform<F: Scalar, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<F> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| F::of(rng.gen_range(-bound..bound))).collect(),
    )
}

fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

impl<F: Scalar> EncoderParams<F> {
    /// Fan-in scaled uniform weights, zero biases, unit/zero normalization.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(&[seed, 0x1417]);
        let mut params = ParamSet::default();
        let mut buffers = ParamSet::default();
        let mut norm = |params: &mut ParamSet<F>, name: &str, c: usize| {
            params.push(format!("{name}.gamma"), Tensor::filled(&[c], F::one()));
            params.push(format!("{name}.beta"), Tensor::zeros(&[c]));
            buffers.push(format!("{name}.running_mean"), Tensor::zeros(&[c]));
            buffers.push(format!("{name}.running_var"), Tensor::filled(&[c], F::one()));
        };
        let c0 = cfg.widths[0];
        params.push(
            "stem.conv.w",
            uniform(&[c0, cfg.in_leads, cfg.stem_kernel], he_bound(cfg.in_leads * cfg.stem_kernel), &mut rng),
        );
        norm(&mut params, "stem.bn", c0);
        let k = cfg.block_kernel;
        for i in 0..cfg.n_blocks() {
            let (c_in, c_out) = cfg.block_io(i);
            params.push(
                format!("block{i}.conv1.w"),
                uniform(&[c_out, c_in, k], he_bound(c_in * k), &mut rng),
            );
            norm(&mut params, &format!("block{i}.bn1"), c_out);
            params.push(
                format!("block{i}.conv2.w"),
                uniform(&[c_out, c_out, k], he_bound(c_out * k), &mut rng),
            );
            norm(&mut params, &format!("block{i}.bn2"), c_out);
            if cfg.needs_skip_conv(i) {
                params.push(
                    format!("block{i}.skip.w"),
                    uniform(&[c_out, c_in, 1], he_bound(c_in), &mut rng),
                );
                params.push(format!("block{i}.skip.b"), Tensor::zeros(&[c_out]));
            }
        }
        let last = *cfg.widths.last().unwrap();
        params.push(
            "embed.w",
            uniform(&[cfg.embedding_dim, last], he_bound(last), &mut rng),
        );
        params.push("embed.b", Tensor::zeros(&[cfg.embedding_dim]));
        let mut d_in = cfg.embedding_dim;
        for (j, &d_out) in cfg.projection_dims.iter().enumerate() {
            params.push(format!("proj.{j}.w"), uniform(&[d_out, d_in], he_bound(d_in), &mut rng));
            params.push(format!("proj.{j}.b"), Tensor::zeros(&[d_out]));
            d_in = d_out;
        }
        Ok(EncoderParams { params, buffers })
    }

    pub fn cast<G: Scalar>(&self) -> EncoderParams<G> {
        EncoderParams {
            params: self.params.cast(),
            buffers: self.buffers.cast(),
        }
    }

    /// Exponential moving average of the normalization statistics:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<F>)], momentum: f64) {
        let mom = F::of(momentum);
        let one_minus = F::one() - mom;
        for (layer, s) in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let i = self
                    .buffers
                    .index(&format!("{layer}.{suffix}"))
                    .expect("normalization buffer exists");
                for (r, b) in self.buffers.tensors[i].data.iter_mut().zip(batch.iter()) {
                    *r = mom * *r + one_minus * *b;
                }
            }
        }
    }
}

/// Output of an encoder forward pass.
pub struct EncoderOutput<F> {
    pub embedding: Var,
    /// Per normalization layer batch statistics (training mode only).
    pub batch_stats: Vec<(String, BatchStats<F>)>,
}

fn check_finite<F: Scalar>(g: &Graph<F>, v: Var, layer: &str) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation {
            layer: layer.to_string(),
        })
    }
}

struct Ctx<'a, F: Scalar> {
    cfg: &'a EncoderConfig,
    params: &'a EncoderParams<F>,
    bound: &'a Bound,
    mode: Mode,
    stats: Vec<(String, BatchStats<F>)>,
}

impl<F: Scalar> Ctx<'_, F> {
    fn norm(&mut self, g: &mut Graph<F>, x: Var, name: &str) -> Var {
        let gamma = self.bound.var(&format!("{name}.gamma"));
        let beta = self.bound.var(&format!("{name}.beta"));
        let eps = F::of(self.cfg.bn_eps);
        match self.mode {
            Mode::Train => {
                let (y, s) = g.batch_norm(x, gamma, beta, eps);
                self.stats.push((name.to_string(), s));
                y
            }
            Mode::Eval => {
                let mean = &self.params.buffers.get(&format!("{name}.running_mean")).data;
                let var = &self.params.buffers.get(&format!("{name}.running_var")).data;
                g.channel_affine(x, gamma, beta, mean, var, eps)
            }
        }
    }
}

/// Stem, residual blocks, global average pool and a linear map to the
/// embedding. `x` is `[B, in_leads, T]`.
pub fn encoder_forward<F: Scalar>(
    cfg: &EncoderConfig,
    params: &EncoderParams<F>,
    bound: &Bound,
    g: &mut Graph<F>,
    x: Var,
    mode: Mode,
) -> Result<EncoderOutput<F>> {
    let shape = g.value(x).shape.clone();
    if shape.len() != 3 || shape[1] != cfg.in_leads || shape[2] < cfg.stem_kernel / 2 + 1 || shape[0] == 0 {
        return Err(Error::Shape(format!(
            "encoder expects [B, {}, T], got {shape:?}",
            cfg.in_leads
        )));
    }
    let mut ctx = Ctx {
        cfg,
        params,
        bound,
        mode,
        stats: Vec::new(),
    };
    let mut h = g.conv1d(x, bound.var("stem.conv.w"), None, cfg.stem_stride, cfg.stem_kernel / 2);
    h = ctx.norm(g, h, "stem.bn");
    h = g.relu(h);
    check_finite(g, h, "stem")?;
    let pad = cfg.block_kernel / 2;
    for i in 0..cfg.n_blocks() {
        let p = |s: &str| format!("block{i}.{s}");
        let mut y = g.conv1d(h, bound.var(&p("conv1.w")), None, cfg.block_stride, pad);
        y = ctx.norm(g, y, &p("bn1"));
        y = g.relu(y);
        y = g.conv1d(y, bound.var(&p("conv2.w")), None, 1, pad);
        y = ctx.norm(g, y, &p("bn2"));
        let skip = if cfg.needs_skip_conv(i) {
            g.conv1d(
                h,
                bound.var(&p("skip.w")),
                Some(bound.var(&p("skip.b"))),
                cfg.block_stride,
                0,
            )
        } else {
            h
        };
        let sum = g.add(y, skip);
        h = g.relu(sum);
        check_finite(g, h, &format!("block{i}"))?;
    }
    let pooled = g.mean_time(h);
    let embedding = g.linear(pooled, bound.var("embed.w"), bound.var("embed.b"));
    check_finite(g, embedding, "embed")?;
    Ok(EncoderOutput {
        embedding,
        batch_stats: ctx.stats,
    })
}

/// Non-linear projection: linear layers with rectifiers between them.
pub fn projection_forward<F: Scalar>(
    cfg: &EncoderConfig,
    bound: &Bound,
    g: &mut Graph<F>,
    embedding: Var,
) -> Result<Var> {
    let shape = &g.value(embedding).shape;
    if shape.len() != 2 || shape[1] != cfg.embedding_dim {
        return Err(Error::Shape(format!(
            "projection expects [B, {}], got {shape:?}",
            cfg.embedding_dim
        )));
    }
    let mut h = embedding;
    let n = cfg.projection_dims.len();
    for j in 0..n {
        h = g.linear(h, bound.var(&format!("proj.{j}.w")), bound.var(&format!("proj.{j}.b")));
        if j + 1 < n {
            h = g.relu(h);
        }
    }
    check_finite(g, h, "projection")?;
    Ok(h)
}

/// Packs equally shaped `[leads x time]` lead-major inputs into `[B, leads, time]`.
pub fn batch_tensor<F: Scalar>(inputs: &[&[f32]], n_leads: usize, n_time: usize) -> Result<Tensor<F>> {
    let mut data = Vec::with_capacity(inputs.len() * n_leads * n_time);
    for x in inputs {
        if x.len() != n_leads * n_time {
            return Err(Error::Shape(format!(
                "input of {} values, expected {n_leads}x{n_time}",
                x.len()
            )));
        }
        data.extend(x.iter().map(|&v| F::of(v as f64)));
    }
    Ok(Tensor::new(vec![inputs.len(), n_leads, n_time], data))
}

/// Evaluation-mode embeddings for a batch of lead-major inputs.
pub fn embed_batch(
    cfg: &EncoderConfig,
    params: &EncoderParams<f32>,
    inputs: &[&[f32]],
    n_time: usize,
) -> Result<Vec<Vec<f32>>> {
    let mut g = Graph::<f32>::new();
    let bound = params.params.bind(&mut g);
    let x = g.input(batch_tensor(inputs, cfg.in_leads, n_time)?);
    let out = encoder_forward(cfg, params, &bound, &mut g, x, Mode::Eval)?;
    let e = g.value(out.embedding);
    Ok(e.data.chunks_exact(cfg.embedding_dim).map(<[f32]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            in_leads: 2,
            stem_kernel: 5,
            block_kernel: 3,
            widths: vec![3, 4],
            block_stride: 2,
            embedding_dim: 6,
            projection_dims: vec![5, 3],
            ..Default::default()
        }
    }

    fn input(b: usize, c: usize, t: usize, seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(&[seed]);
        Tensor::new(vec![b, c, t], (0..b * c * t).map(|_| r.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn default_embedding_shape() {
        let cfg = EncoderConfig::default();
        let p = EncoderParams::<f32>::init(&cfg, 1).unwrap();
        let x: Vec<f32> = (0..8 * 2800).map(|i| ((i % 97) as f32 * 0.01).sin()).collect();
        let e = embed_batch(&cfg, &p, &[&x, &x], 2800).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].len(), 256);
        assert_eq!(e[0], e[1]);
    }

    #[test]
    fn eval_mode_is_per_sample_and_deterministic() {
        let cfg = tiny();
        let p = EncoderParams::<f64>::init(&cfg, 3).unwrap();
        let run = |x: Tensor<f64>| {
            let mut g = Graph::new();
            let b = p.params.bind(&mut g);
            let xv = g.input(x);
            let out = encoder_forward(&cfg, &p, &b, &mut g, xv, Mode::Eval).unwrap();
            g.value(out.embedding).data.clone()
        };
        let x = input(3, 2, 20, 1);
        let a = run(x.clone());
        assert_eq!(a, run(x.clone()));
        // Swap rows 0 and 2.
        let t = 2 * 20;
        let mut swapped = x.clone();
        swapped.data[..t].copy_from_slice(&x.data[2 * t..]);
        swapped.data[2 * t..].copy_from_slice(&x.data[..t]);
        let s = run(swapped);
        let d = cfg.embedding_dim;
        assert_eq!(&s[..d], &a[2 * d..]);
        assert_eq!(&s[2 * d..], &a[..d]);
        assert_eq!(&s[d..2 * d], &a[d..2 * d]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let cfg = tiny();
        let p = EncoderParams::<f64>::init(&cfg, 3).unwrap();
        let mut g = Graph::new();
        let b = p.params.bind(&mut g);
        let x = g.input(input(1, 3, 20, 1));
        assert!(matches!(
            encoder_forward(&cfg, &p, &b, &mut g, x, Mode::Eval),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_projection_gives_zero_output() {
        let cfg = tiny();
        let mut p = EncoderParams::<f64>::init(&cfg, 3).unwrap();
        for (n, t) in p.params.names.iter().zip(p.params.tensors.iter_mut()) {
            if n.starts_with("proj.") {
                t.data.fill(0.0);
            }
        }
        let mut g = Graph::new();
        let b = p.params.bind(&mut g);
        let e = g.input(Tensor::new(vec![4, 6], input(4, 1, 6, 2).data));
        let z = projection_forward(&cfg, &b, &mut g, e).unwrap();
        assert_eq!(g.value(z).shape, vec![4, 3]);
        assert!(g.value(z).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let cfg = tiny();
        let p = EncoderParams::<f64>::init(&cfg, 3).unwrap();
        let mut g = Graph::new();
        let b = p.params.bind(&mut g);
        let mut x = input(2, 2, 20, 1);
        x.data[5] = f64::INFINITY;
        let xv = g.input(x);
        assert!(matches!(
            encoder_forward(&cfg, &p, &b, &mut g, xv, Mode::Eval),
            Err(Error::NonFiniteActivation { ref layer }) if layer == "stem"
        ));
    }
}
