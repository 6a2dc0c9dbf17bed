//! Layer records, parameter initialization and the forward pass.
//!
//! Layout (input `[N, 1, H, W]`):
//!
//! ```text
//! stem:   conv3x3/2 (1 -> C1), GeLU, conv3x3/2 (C1 -> C1), GeLU
//! stage:  conv3x3/2 embedding (C_prev -> C), feature block (C -> C)   x3
//! head:   channel norm, global average pool, fully connected (C3 -> classes)
//! ```
//!
//! A feature block first layer-normalizes the embedded map across channels,
//! then runs two paths over the result `x`:
//! `A = InvRes(x)` and
//! `B = PW(ConvT(MHA(InvRes(InvRes(AvgPool(x))))))`, where the transposed
//! convolution restores the spatial size of `A`. The block output is
//! `PW(concat(A * B, B))`, projecting `2C` channels back to `C`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::kernels::{adaptive_windows, strided_windows, PoolWindows};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input `(H, W)`.
    pub input_size: (usize, usize),
    pub stage_channels: [usize; 3],
    pub heads: usize,
    /// Kernel (and stride) of the path-B average pool.
    pub pool: usize,
    pub invres_expansion: usize,
    pub num_classes: usize,
    pub toy_scale: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            input_size: (64, 64),
            stage_channels: [16, 24, 32],
            heads: 4,
            pool: 7,
            invres_expansion: 2,
            num_classes: 8,
            toy_scale: true,
        }
    }

    pub fn full() -> Self {
        Self {
            input_size: (128, 128),
            stage_channels: [96, 160, 288],
            toy_scale: false,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h < 1 || w < 1 {
            return Err(Error::Config("input size must be positive".into()));
        }
        if self.heads == 0 || self.pool == 0 || self.invres_expansion == 0 || self.num_classes < 2 {
            return Err(Error::Config(
                "heads, pool and expansion must be positive and num_classes >= 2".into(),
            ));
        }
        for &c in &self.stage_channels {
            if c == 0 {
                return Err(Error::Config("stage channels must be positive".into()));
            }
            if c % self.heads != 0 {
                return Err(Error::Config(format!(
                    "stage channels {c} not divisible by {} heads",
                    self.heads
                )));
            }
        }
        Ok(())
    }

    /// Spatial sizes `[stem, stage 1, stage 2, stage 3]`.
    pub fn spatial_sizes(&self) -> [(usize, usize); 4] {
        let down = |(h, w): (usize, usize)| (conv_out(h, 3, 2, 1), conv_out(w, 3, 2, 1));
        let stem = down(down(self.input_size));
        let s1 = down(stem);
        let s2 = down(s1);
        [stem, s1, s2, down(s2)]
    }
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Pooling windows of path B along one axis of length `len`.
pub fn pool_windows(len: usize, kernel: usize) -> PoolWindows {
    if len >= 2 * kernel {
        strided_windows(len, kernel)
    } else {
        adaptive_windows(len, len.min(2))
    }
}

/// `(stride, kernel)` of a padding-free transposed convolution taking `from`
/// cells to exactly `to` cells.
pub fn upsample_geometry(from: usize, to: usize) -> (usize, usize) {
    let s = (to / from).max(1);
    (s, to - (from - 1) * s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    /// Seed the initializer drew this tensor from.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zero,
    /// Uniform on `±sqrt(6 / fan_in)`.
    He { fan_in: usize },
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
    One,
}

/// Ordered parameter list with deterministic initialization.
#[derive(Debug, Clone)]
pub struct ParamStore<S> {
    pub params: Vec<Param<S>>,
    root_seed: u64,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new(root_seed: u64) -> Self {
        Self { params: Vec::new(), root_seed }
    }

    fn alloc(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let index = self.params.len();
        let seed = seeds::derive(self.root_seed, index as u64);
        let n: usize = shape.iter().product();
        let bound = match init {
            Init::Zero => 0.0,
            Init::One => -1.0,
            Init::He { fan_in } => (6.0 / fan_in as f64).sqrt(),
            Init::Xavier { fan_in, fan_out } => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        };
        let data = if bound == 0.0 {
            vec![S::zero(); n]
        } else if bound < 0.0 {
            vec![S::one(); n]
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| S::of(rng.gen_range(-bound..bound))).collect()
        };
        self.params.push(Param {
            name,
            value: Tensor { shape: shape.to_vec(), data },
            seed,
        });
        index
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, groups: usize) -> Conv {
        let fan_in = c_in / groups * k * k;
        let w = self.alloc(format!("{name}.weight"), &[c_out, c_in / groups, k, k], Init::He { fan_in });
        let b = self.alloc(format!("{name}.bias"), &[c_out], Init::Zero);
        Conv { w, b, stride, pad: k / 2, groups }
    }

    pub fn conv_t(&mut self, name: &str, c_in: usize, c_out: usize, kernel: (usize, usize), stride: (usize, usize)) -> ConvT {
        // Each output cell sees about kh*kw/(sh*sw) input positions per channel.
        let fan_in = (c_in * kernel.0 * kernel.1 / (stride.0 * stride.1)).max(1);
        let w = self.alloc(
            format!("{name}.weight"),
            &[c_in, c_out, kernel.0, kernel.1],
            Init::He { fan_in },
        );
        let b = self.alloc(format!("{name}.bias"), &[c_out], Init::Zero);
        ConvT { w, b, stride }
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        let w = self.alloc(
            format!("{name}.weight"),
            &[d_out, d_in],
            Init::Xavier { fan_in: d_in, fan_out: d_out },
        );
        let b = self.alloc(format!("{name}.bias"), &[d_out], Init::Zero);
        Linear { w, b }
    }

    pub fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.alloc(format!("{name}.gamma"), &[c], Init::One),
            beta: self.alloc(format!("{name}.beta"), &[c], Init::Zero),
        }
    }

    pub fn invres(&mut self, name: &str, c: usize, expansion: usize) -> InvRes {
        let e = c * expansion;
        InvRes {
            expand: self.conv(&format!("{name}.expand"), c, e, 1, 1, 1),
            depthwise: self.conv(&format!("{name}.dw"), e, e, 3, 1, e),
            project: self.conv(&format!("{name}.project"), e, c, 1, 1, 1),
        }
    }

    pub fn mha(&mut self, name: &str, c: usize, heads: usize) -> Mha {
        Mha {
            q: self.linear(&format!("{name}.q"), c, c),
            k: self.linear(&format!("{name}.k"), c, c),
            v: self.linear(&format!("{name}.v"), c, c),
            o: self.linear(&format!("{name}.o"), c, c),
            heads,
        }
    }

    /// Feature block for a `c`-channel map of spatial size `hw`.
    pub fn feature_block(&mut self, name: &str, c: usize, hw: (usize, usize), cfg: &ModelConfig) -> FeatureBlock {
        let rows = pool_windows(hw.0, cfg.pool);
        let cols = pool_windows(hw.1, cfg.pool);
        let (sh, kh) = upsample_geometry(rows.len(), hw.0);
        let (sw, kw) = upsample_geometry(cols.len(), hw.1);
        FeatureBlock {
            norm: self.norm(&format!("{name}.norm"), c),
            path_a: self.invres(&format!("{name}.a"), c, cfg.invres_expansion),
            b_invres1: self.invres(&format!("{name}.b1"), c, cfg.invres_expansion),
            b_invres2: self.invres(&format!("{name}.b2"), c, cfg.invres_expansion),
            attention: self.mha(&format!("{name}.mha"), c, cfg.heads),
            upsample: self.conv_t(&format!("{name}.convt"), c, c, (kh, kw), (sh, sw)),
            b_pw: self.conv(&format!("{name}.b_pw"), c, c, 1, 1, 1),
            fuse: self.conv(&format!("{name}.fuse"), 2 * c, c, 1, 1, 1),
            rows,
            cols,
        }
    }

    /// Registers every parameter on the tape, in order.
    pub fn bind(&self, g: &mut Graph<S>) -> Result<Vec<Var>> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| g.param(i, p.value.clone()))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv {
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &[Var], x: Var) -> Result<Var> {
        g.conv2d(x, p[self.w], p[self.b], self.stride, self.pad, self.groups)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvT {
    pub w: usize,
    pub b: usize,
    pub stride: (usize, usize),
}

impl ConvT {
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &[Var], x: Var) -> Result<Var> {
        g.conv_transpose(x, p[self.w], p[self.b], self.stride)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &[Var], x: Var) -> Result<Var> {
        g.linear(x, p[self.w], p[self.b])
    }
}

/// Channel layer normalization with a learned per-channel affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

impl Norm {
    pub const EPS: f64 = 1e-5;

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &[Var], x: Var) -> Result<Var> {
        g.channel_norm(x, p[self.gamma], p[self.beta], Self::EPS)
    }
}

/// Inverted residual: PW expand, GeLU, DW 3x3, PW project, plus the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InvRes {
    pub expand: Conv,
    pub depthwise: Conv,
    pub project: Conv,
}

impl InvRes {
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &[Var], x: Var) -> Result<Var> {
        let h = self.expand.forward(g, p, x)?;
        let h = g.gelu(h)?;
        let h = self.depthwise.forward(g, p, h)?;
        let h = self.project.forward(g, p, h)?;
        g.add(h, x)
    }
}

/// Multi-head self-attention over the spatial cells of a `[N, C, H, W]` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mha {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Mha {
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &[Var], x: Var) -> Result<Var> {
        let [n, c, h, w] = g.value(x).dims4()?;
        let l = h * w;
        let tokens = g.reshape(x, &[n, c, l])?;
        let tokens = g.permute(tokens, &[0, 2, 1])?;
        let out = self.attend(g, p, tokens)?.0;
        let out = g.permute(out, &[0, 2, 1])?;
        g.reshape(out, &[n, c, h, w])
    }

    /// Attention over `[N, L, C]` tokens; also returns the `[N * heads, L, L]`
    /// attention weights.
    pub fn attend<S: Scalar>(&self, g: &mut Graph<S>, p: &[Var], tokens: Var) -> Result<(Var, Var)> {
        let [n, l, c] = g.value(tokens).dims3()?;
        let heads = self.heads;
        if heads == 0 || c % heads != 0 {
            return Err(Error::Graph(format!("{c} channels not divisible by {heads} heads")));
        }
        let d = c / heads;
        let split = |g: &mut Graph<S>, lin: &Linear| -> Result<Var> {
            let t = lin.forward(g, p, tokens)?;
            let t = g.reshape(t, &[n, l, heads, d])?;
            let t = g.permute(t, &[0, 2, 1, 3])?;
            g.reshape(t, &[n * heads, l, d])
        };
        let q = split(g, &self.q)?;
        let k = split(g, &self.k)?;
        let v = split(g, &self.v)?;
        let scores = g.matmul(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
        let weights = g.softmax(scores)?;
        let ctx = g.matmul(weights, v, false)?;
        let ctx = g.reshape(ctx, &[n, heads, l, d])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[n, l, c])?;
        Ok((self.o.forward(g, p, ctx)?, weights))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureBlock {
    pub norm: Norm,
    pub path_a: InvRes,
    pub b_invres1: InvRes,
    pub b_invres2: InvRes,
    pub attention: Mha,
    pub upsample: ConvT,
    pub b_pw: Conv,
    pub fuse: Conv,
    pub rows: PoolWindows,
    pub cols: PoolWindows,
}

impl FeatureBlock {
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &[Var], x: Var) -> Result<Var> {
        let x = self.norm.forward(g, p, x)?;
        let a = self.path_a.forward(g, p, x)?;
        let b = g.avg_pool(x, self.rows.clone(), self.cols.clone())?;
        let b = self.b_invres1.forward(g, p, b)?;
        let b = self.b_invres2.forward(g, p, b)?;
        let b = self.attention.forward(g, p, b)?;
        let b = self.upsample.forward(g, p, b)?;
        let b = self.b_pw.forward(g, p, b)?;
        if g.shape(a) != g.shape(b) {
            return Err(Error::Graph(format!(
                "path B upsampled to {:?}, path A is {:?}",
                g.shape(b),
                g.shape(a)
            )));
        }
        let ab = g.mul(a, b)?;
        let cat = g.concat_channels(ab, b)?;
        self.fuse.forward(g, p, cat)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage {
    pub embed: Conv,
    pub block: FeatureBlock,
}

/// The classifier: layer records plus their parameters.
#[derive(Debug, Clone)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    pub stem: [Conv; 2],
    pub stages: Vec<Stage>,
    pub head_norm: Norm,
    pub fc: Linear,
    pub seed: u64,
}

/// Builds the classifier with every parameter drawn from `seed`.
pub fn build_model<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<S>> {
    cfg.validate()?;
    let sizes = cfg.spatial_sizes();
    let mut store = ParamStore::new(seed);
    let [c1, _, c3] = cfg.stage_channels;
    let stem = [store.conv("stem.0", 1, c1, 3, 2, 1), store.conv("stem.1", c1, c1, 3, 2, 1)];
    let mut c_prev = c1;
    let mut stages = Vec::with_capacity(3);
    for (i, &c) in cfg.stage_channels.iter().enumerate() {
        let name = format!("stage{}", i + 1);
        let embed = store.conv(&format!("{name}.embed"), c_prev, c, 3, 2, 1);
        let block = store.feature_block(&format!("{name}.block"), c, sizes[i + 1], cfg);
        stages.push(Stage { embed, block });
        c_prev = c;
    }
    let head_norm = store.norm("head.norm", c3);
    let fc = store.linear("head.fc", c3, cfg.num_classes);
    Ok(Model { config: cfg.clone(), store, stem, stages, head_norm, fc, seed })
}

/// Closed-form parameter count of a configuration.
pub fn analytic_parameter_count(cfg: &ModelConfig) -> usize {
    let conv = |ci: usize, co: usize, k: usize, groups: usize| co * (ci / groups) * k * k + co;
    let invres = |c: usize| {
        let e = c * cfg.invres_expansion;
        conv(c, e, 1, 1) + conv(e, e, 3, e) + conv(e, c, 1, 1)
    };
    let sizes = cfg.spatial_sizes();
    let [c1, _, c3] = cfg.stage_channels;
    let mut total = conv(1, c1, 3, 1) + conv(c1, c1, 3, 1);
    let mut c_prev = c1;
    for (i, &c) in cfg.stage_channels.iter().enumerate() {
        let (h, w) = sizes[i + 1];
        let (_, kh) = upsample_geometry(pool_windows(h, cfg.pool).len(), h);
        let (_, kw) = upsample_geometry(pool_windows(w, cfg.pool).len(), w);
        total += conv(c_prev, c, 3, 1)
            + 2 * c
            + 3 * invres(c)
            + 4 * (c * c + c)
            + (c * c * kh * kw + c)
            + conv(c, c, 1, 1)
            + conv(2 * c, c, 1, 1);
        c_prev = c;
    }
    total + 2 * c3 + c3 * cfg.num_classes + cfg.num_classes
}

impl<S: Scalar> Model<S> {
    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.store.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.store.params
    }

    /// Records the forward pass for `x: [N, 1, H, W]` and returns the logits
    /// `[N, classes]`.
    pub fn forward(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        self.forward_traced(g, x, &mut |_, _| {})
    }

    /// Forward pass that reports each named intermediate shape to `trace`.
    pub fn forward_traced(
        &self,
        g: &mut Graph<S>,
        x: Var,
        trace: &mut dyn FnMut(&str, &[usize]),
    ) -> Result<Var> {
        let [_, c, h, w] = g.value(x).dims4()?;
        if c != 1 || (h, w) != self.config.input_size {
            return Err(Error::Graph(format!(
                "model expects [N, 1, {}, {}], got {:?}",
                self.config.input_size.0,
                self.config.input_size.1,
                g.shape(x)
            )));
        }
        let p = self.store.bind(g)?;
        let mut h = x;
        for conv in &self.stem {
            h = conv.forward(g, &p, h)?;
            h = g.gelu(h)?;
        }
        trace("stem", g.shape(h));
        for (i, stage) in self.stages.iter().enumerate() {
            h = stage.embed.forward(g, &p, h)?;
            trace(["stage1.embed", "stage2.embed", "stage3.embed"][i], g.shape(h));
            h = stage.block.forward(g, &p, h)?;
            trace(["stage1.block", "stage2.block", "stage3.block"][i], g.shape(h));
        }
        let h = self.head_norm.forward(g, &p, h)?;
        let pooled = g.global_avg_pool(h)?;
        trace("gap", g.shape(pooled));
        let logits = self.fc.forward(g, &p, pooled)?;
        trace("logits", g.shape(logits));
        Ok(logits)
    }

    pub fn logits(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let xv = g.input(x.clone())?;
        let out = self.forward(&mut g, xv)?;
        Ok(g.value(out).clone())
    }

    /// Class probabilities `[N, classes]`.
    pub fn predict_proba(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let xv = g.input(x.clone())?;
        let out = self.forward(&mut g, xv)?;
        let probs = g.softmax(out)?;
        Ok(g.value(probs).clone())
    }

    /// Mean cross-entropy of a batch and the gradient of every parameter.
    pub fn loss_and_grads(&self, x: &Tensor<S>, labels: &[usize]) -> Result<(f64, Tensor<S>, Vec<Tensor<S>>)> {
        let mut g = Graph::new();
        let xv = g.input(x.clone())?;
        let logits = self.forward(&mut g, xv)?;
        let loss = g.softmax_cross_entropy(logits, labels)?;
        let grads = g.backward(loss, self.store.params.len())?;
        let grads = grads
            .into_iter()
            .zip(&self.store.params)
            .map(|(gr, p)| gr.unwrap_or_else(|| Tensor::zeros(&p.value.shape)))
            .collect();
        Ok((g.value(loss).data[0].as_f64(), g.value(logits).clone(), grads))
    }

    /// Same architecture and parameters in another precision.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            store: ParamStore {
                params: self
                    .store
                    .params
                    .iter()
                    .map(|p| Param { name: p.name.clone(), value: p.value.cast(), seed: p.seed })
                    .collect(),
                root_seed: self.store.root_seed,
            },
            stem: self.stem,
            stages: self.stages.clone(),
            head_norm: self.head_norm,
            fc: self.fc,
            seed: self.seed,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.store.params.iter().all(|p| p.value.is_finite())
    }
}
