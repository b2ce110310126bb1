//! The encoder: per-feature embeddings with a learned [CLS] token, stacked
//! feature-level and instance-level attention blocks, global/local
//! projectors and the prediction head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, SumOrder, Var};
use crate::data::{Batch, FeatureSlot};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const NORMALIZE_EPS: f64 = 1e-8;

/// Which attention blocks make up each stage of the encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Feature attention followed by instance attention.
    #[default]
    Both,
    FeatureOnly,
    InstanceOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Both, Variant::InstanceOnly, Variant::FeatureOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Both => "both",
            Variant::FeatureOnly => "feature_only",
            Variant::InstanceOnly => "instance_only",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Variant::Both),
            "feature_only" => Ok(Variant::FeatureOnly),
            "instance_only" => Ok(Variant::InstanceOnly),
            _ => Err(Error::Config(format!(
                "unknown variant `{s}` (expected both, feature_only or instance_only)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPooling {
    /// `Cls`, except `Mean` for `instance_only`, whose [CLS] slot never
    /// attends to a feature token.
    #[default]
    Auto,
    /// Use the [CLS] position of Z, g and l.
    Cls,
    /// Average over all positions.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub variant: Variant,
    pub ffn_multiplier: usize,
    pub dropout: f64,
    /// Hidden width of the prediction head; `None` means `2 * d`.
    pub head_hidden: Option<usize>,
    pub head_pooling: HeadPooling,
    /// Stop head gradients from reaching the projectors.
    pub detach_head_projections: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            layers: 6,
            heads: 8,
            variant: Variant::Both,
            ffn_multiplier: 4,
            dropout: 0.0,
            head_hidden: None,
            head_pooling: HeadPooling::Auto,
            detach_head_projections: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.ffn_multiplier == 0 {
            return Err(Error::Config("d, heads and ffn_multiplier must be positive".into()));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embedding size {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.head_hidden == Some(0) {
            return Err(Error::Config("head_hidden must be positive".into()));
        }
        Ok(())
    }

    /// Pooling actually applied by the head.
    pub fn resolved_pooling(&self) -> HeadPooling {
        match (self.head_pooling, self.variant) {
            (HeadPooling::Auto, Variant::InstanceOnly) => HeadPooling::Mean,
            (HeadPooling::Auto, _) => HeadPooling::Cls,
            (p, _) => p,
        }
    }

    pub fn head_hidden(&self) -> usize {
        self.head_hidden.unwrap_or(2 * self.d)
    }

    /// Attention block kinds in execution order.
    pub fn block_kinds(&self) -> Vec<AttentionKind> {
        let stage: &[AttentionKind] = match self.variant {
            Variant::Both => &[AttentionKind::Feature, AttentionKind::Instance],
            Variant::FeatureOnly => &[AttentionKind::Feature],
            Variant::InstanceOnly => &[AttentionKind::Instance],
        };
        (0..self.layers).flat_map(|_| stage.iter().copied()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Attends across the tokens of one instance.
    Feature,
    /// Attends across the instances of the batch at each token position.
    Instance,
}

/// Input columns and output width the parameters were built for.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub features: Vec<FeatureSlot>,
    pub n_outputs: usize,
}

impl InputLayout {
    pub fn for_dataset(dataset: &crate::data::Dataset) -> Self {
        Self {
            features: dataset.schema.feature_layout(),
            n_outputs: dataset.targets.n_outputs(),
        }
    }

    /// Token count including [CLS].
    pub fn n_tokens(&self) -> usize {
        self.features.len() + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<P> {
    pub ln1_gamma: P,
    pub ln1_beta: P,
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
    pub ln2_gamma: P,
    pub ln2_beta: P,
    pub ffn_in: P,
    pub ffn_out: P,
}

/// Two-layer map `d -> d -> d` (also used for the head, with other widths).
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<P> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

/// Every learnable array of the model. `P` is [`Tensor`] for stored values
/// and [`Var`] once bound into a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P = Tensor> {
    pub cls: P,
    pub cat_tables: Vec<P>,
    pub num_weights: Vec<P>,
    pub num_biases: Vec<P>,
    pub blocks: Vec<BlockParams<P>>,
    pub projector_global: MlpParams<P>,
    pub projector_local: MlpParams<P>,
    pub head: MlpParams<P>,
    pub global_table: P,
}

impl<P> ModelParams<P> {
    /// Maps every parameter in a fixed order, passing its dotted name.
    pub fn try_map<'a, Q>(&'a self, f: &mut dyn FnMut(&str, &'a P) -> Result<Q>) -> Result<ModelParams<Q>> {
        let mlp =
            |f: &mut dyn FnMut(&str, &'a P) -> Result<Q>, prefix: &str, m: &'a MlpParams<P>| -> Result<MlpParams<Q>> {
                Ok(MlpParams {
                    w1: f(&format!("{prefix}.w1"), &m.w1)?,
                    b1: f(&format!("{prefix}.b1"), &m.b1)?,
                    w2: f(&format!("{prefix}.w2"), &m.w2)?,
                    b2: f(&format!("{prefix}.b2"), &m.b2)?,
                })
            };
        let cls = f("cls", &self.cls)?;
        let cat_tables = self
            .cat_tables
            .iter()
            .enumerate()
            .map(|(i, p)| f(&format!("cat_table.{i}"), p))
            .collect::<Result<_>>()?;
        let num_weights = self
            .num_weights
            .iter()
            .enumerate()
            .map(|(i, p)| f(&format!("num_weight.{i}"), p))
            .collect::<Result<_>>()?;
        let num_biases = self
            .num_biases
            .iter()
            .enumerate()
            .map(|(i, p)| f(&format!("num_bias.{i}"), p))
            .collect::<Result<_>>()?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let mut n = |field: &str, p: &'a P| f(&format!("block.{i}.{field}"), p);
            blocks.push(BlockParams {
                ln1_gamma: n("ln1_gamma", &b.ln1_gamma)?,
                ln1_beta: n("ln1_beta", &b.ln1_beta)?,
                wq: n("wq", &b.wq)?,
                wk: n("wk", &b.wk)?,
                wv: n("wv", &b.wv)?,
                wo: n("wo", &b.wo)?,
                ln2_gamma: n("ln2_gamma", &b.ln2_gamma)?,
                ln2_beta: n("ln2_beta", &b.ln2_beta)?,
                ffn_in: n("ffn_in", &b.ffn_in)?,
                ffn_out: n("ffn_out", &b.ffn_out)?,
            });
        }
        Ok(ModelParams {
            cls,
            cat_tables,
            num_weights,
            num_biases,
            blocks,
            projector_global: mlp(f, "projector_global", &self.projector_global)?,
            projector_local: mlp(f, "projector_local", &self.projector_local)?,
            head: mlp(f, "head", &self.head)?,
            global_table: f("global_table", &self.global_table)?,
        })
    }

    /// Visits every parameter mutably, in the same order as [`Self::try_map`].
    pub fn for_each_mut<'a>(&'a mut self, f: &mut dyn FnMut(&str, &'a mut P)) {
        let mlp = |f: &mut dyn FnMut(&str, &'a mut P), prefix: &str, m: &'a mut MlpParams<P>| {
            f(&format!("{prefix}.w1"), &mut m.w1);
            f(&format!("{prefix}.b1"), &mut m.b1);
            f(&format!("{prefix}.w2"), &mut m.w2);
            f(&format!("{prefix}.b2"), &mut m.b2);
        };
        f("cls", &mut self.cls);
        for (i, p) in self.cat_tables.iter_mut().enumerate() {
            f(&format!("cat_table.{i}"), p);
        }
        for (i, p) in self.num_weights.iter_mut().enumerate() {
            f(&format!("num_weight.{i}"), p);
        }
        for (i, p) in self.num_biases.iter_mut().enumerate() {
            f(&format!("num_bias.{i}"), p);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let mut n = |field: &str, p: &'a mut P| f(&format!("block.{i}.{field}"), p);
            n("ln1_gamma", &mut b.ln1_gamma);
            n("ln1_beta", &mut b.ln1_beta);
            n("wq", &mut b.wq);
            n("wk", &mut b.wk);
            n("wv", &mut b.wv);
            n("wo", &mut b.wo);
            n("ln2_gamma", &mut b.ln2_gamma);
            n("ln2_beta", &mut b.ln2_beta);
            n("ffn_in", &mut b.ffn_in);
            n("ffn_out", &mut b.ffn_out);
        }
        mlp(f, "projector_global", &mut self.projector_global);
        mlp(f, "projector_local", &mut self.projector_local);
        mlp(f, "head", &mut self.head);
        f("global_table", &mut self.global_table);
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.try_map(&mut |n, _| {
            names.push(n.to_owned());
            Ok(())
        })
        .expect("infallible");
        names
    }

    /// Parameters in traversal order.
    pub fn to_vec(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.try_map(&mut |_, p| {
            out.push(p);
            Ok(())
        })
        .expect("infallible");
        out
    }

    /// Mutable parameters in traversal order.
    pub fn to_vec_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        self.for_each_mut(&mut |_, p| out.push(p));
        out
    }
}

impl ModelParams<Tensor> {
    pub fn n_values(&self) -> usize {
        self.to_vec().iter().map(|t| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.to_vec().iter().all(|t| t.all_finite())
    }
}

/// Per-forward options.
pub struct ForwardMode<'a> {
    /// Dropout randomness; `None` disables dropout.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl ForwardMode<'_> {
    pub fn eval() -> Self {
        Self { dropout_rng: None }
    }
}

/// Intermediate outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Encoded tokens `[b, m+1, d]`.
    pub z: Var,
    /// Global vectors `[b, m+1, d]`, unit length.
    pub global: Var,
    /// Local vectors `[b, m+1, d]`, unit length.
    pub local: Var,
    /// `[b, C]`, or `[b, 1]` for regression.
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabDeco {
    pub config: ModelConfig,
    pub layout: InputLayout,
}

fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound) as f32)
}

fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let dist = Normal::new(0.0f64, 0.1).expect("valid normal");
    Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng) as f32)
}

impl TabDeco {
    pub fn new(config: ModelConfig, layout: InputLayout) -> Result<Self> {
        config.validate()?;
        if layout.features.is_empty() || layout.n_outputs == 0 {
            return Err(Error::Config("model needs at least one feature and one output".into()));
        }
        Ok(Self { config, layout })
    }

    pub fn n_tokens(&self) -> usize {
        self.layout.n_tokens()
    }

    /// Fresh parameters drawn from the seeded init stream.
    pub fn init(&self, seed: u64) -> ModelParams {
        let mut rng = stream(seed, Purpose::Init);
        let d = self.config.d;
        let ffn = d * self.config.ffn_multiplier;
        let rng = &mut rng;
        let cls = normal_init(rng, &[d]);
        let mut cat_tables = Vec::new();
        let mut num_weights = Vec::new();
        let mut num_biases = Vec::new();
        for slot in &self.layout.features {
            match *slot {
                FeatureSlot::Categorical { cardinality, .. } => cat_tables.push(normal_init(rng, &[cardinality, d])),
                FeatureSlot::Numerical { .. } => {
                    num_weights.push(normal_init(rng, &[d]));
                    num_biases.push(normal_init(rng, &[d]));
                }
            }
        }
        let blocks = self
            .config
            .block_kinds()
            .iter()
            .map(|_| BlockParams {
                ln1_gamma: Tensor::ones([d]),
                ln1_beta: Tensor::zeros([d]),
                wq: uniform_init(rng, &[d, d], d),
                wk: uniform_init(rng, &[d, d], d),
                wv: uniform_init(rng, &[d, d], d),
                wo: uniform_init(rng, &[d, d], d),
                ln2_gamma: Tensor::ones([d]),
                ln2_beta: Tensor::zeros([d]),
                ffn_in: uniform_init(rng, &[d, ffn], d),
                ffn_out: uniform_init(rng, &[ffn, d], ffn),
            })
            .collect();
        let mlp = |rng: &mut ChaCha8Rng, inp: usize, hid: usize, out: usize| MlpParams {
            w1: uniform_init(rng, &[inp, hid], inp),
            b1: uniform_init(rng, &[hid], inp),
            w2: uniform_init(rng, &[hid, out], hid),
            b2: uniform_init(rng, &[out], hid),
        };
        let projector_global = mlp(rng, d, d, d);
        let projector_local = mlp(rng, d, d, d);
        let head = mlp(rng, 3 * d, self.config.head_hidden(), self.layout.n_outputs);
        let global_table = normal_init(rng, &[self.n_tokens(), d]);
        ModelParams {
            cls,
            cat_tables,
            num_weights,
            num_biases,
            blocks,
            projector_global,
            projector_local,
            head,
            global_table,
        }
    }

    /// Registers `params` as trainable leaves of `graph`.
    pub fn bind<T: Scalar>(&self, graph: &mut Graph<T>, params: &ModelParams) -> ModelParams<Var> {
        params
            .try_map(&mut |_, t| Ok(graph.param(t.cast())))
            .expect("binding is infallible")
    }

    /// Checks that `params` have the shapes this model expects.
    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        let expected = self.init(0);
        let want: Vec<(String, Vec<usize>)> = {
            let mut v = Vec::new();
            expected.try_map(&mut |n, t| {
                v.push((n.to_owned(), t.shape().to_vec()));
                Ok(())
            })?;
            v
        };
        let mut got = Vec::new();
        params.try_map(&mut |n, t| {
            got.push((n.to_owned(), t.shape().to_vec()));
            Ok(())
        })?;
        if want != got {
            let first = want
                .iter()
                .zip(&got)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| format!("expected {} parameters, found {}", want.len(), got.len()));
            return Err(Error::ConfigMismatch(first));
        }
        Ok(())
    }

    /// Token embeddings `[b, m+1, d]`; position 0 is [CLS].
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, p: &ModelParams<Var>, batch: &Batch) -> Result<Var> {
        let b = batch.size();
        let d = self.config.d;
        if b == 0 {
            return Err(Error::invalid("embed", "empty batch"));
        }
        let cls = g.reshape(p.cls, &[1, d])?;
        let cls = g.gather_rows(cls, &vec![0; b])?;
        let mut tokens = vec![g.reshape(cls, &[b, 1, d])?];
        let (mut cat_i, mut num_i) = (0, 0);
        for slot in &self.layout.features {
            let tok = match *slot {
                FeatureSlot::Categorical { offset, cardinality } => {
                    let codes: Vec<usize> = (0..b)
                        .map(|r| batch.categorical[r * batch.n_categorical + offset] as usize)
                        .collect();
                    if let Some(&bad) = codes.iter().find(|&&c| c >= cardinality) {
                        return Err(Error::invalid(
                            "embed",
                            format!("categorical code {bad} out of range for cardinality {cardinality}"),
                        ));
                    }
                    let t = g.gather_rows(p.cat_tables[cat_i], &codes)?;
                    cat_i += 1;
                    t
                }
                FeatureSlot::Numerical { offset } => {
                    let values = Tensor::from_fn([b, 1], |r| {
                        T::of(batch.numerical[r * batch.n_numerical + offset] as f64)
                    });
                    let x = g.constant(values);
                    let w = g.reshape(p.num_weights[num_i], &[1, d])?;
                    let t = g.matmul(x, w)?;
                    let t = g.add_bias(t, p.num_biases[num_i])?;
                    num_i += 1;
                    t
                }
            };
            tokens.push(g.reshape(tok, &[b, 1, d])?);
        }
        g.concat(&tokens, 1)
    }

    fn dropout<T: Scalar>(&self, g: &mut Graph<T>, x: Var, mode: &mut ForwardMode) -> Result<Var> {
        let rate = self.config.dropout;
        match mode.dropout_rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                let keep = T::of(1.0 / (1.0 - rate));
                let n = g.value(x).numel();
                let mask = (0..n)
                    .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
                    .collect();
                g.mul_const(x, mask)
            }
            _ => Ok(x),
        }
    }

    /// Multi-head self-attention over axis 1 of `x: [B, n, d]`.
    fn attention<T: Scalar>(&self, g: &mut Graph<T>, blk: &BlockParams<Var>, x: Var, order: SumOrder) -> Result<Var> {
        let (bsz, n, d) = match *g.shape(x) {
            [a, b, c] => (a, b, c),
            ref s => return Err(Error::invalid("attention", format!("expected rank 3, got {s:?}"))),
        };
        let h = self.config.heads;
        let dh = d / h;
        let split_heads = |g: &mut Graph<T>, w: Var| -> Result<Var> {
            let t = g.matmul(x, w)?;
            let t = g.reshape(t, &[bsz, n, h, dh])?;
            let t = g.permute(t, &[0, 2, 1, 3])?;
            g.reshape(t, &[bsz * h, n, dh])
        };
        let q = split_heads(g, blk.wq)?;
        let k = split_heads(g, blk.wk)?;
        let v = split_heads(g, blk.wv)?;
        let kt = g.transpose(k, 1, 2)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = g.softmax_with(scores, 2, order)?;
        let ctx = g.matmul_with(weights, v, order)?;
        let ctx = g.reshape(ctx, &[bsz, h, n, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[bsz, n, d])?;
        g.matmul(ctx, blk.wo)
    }

    /// Pre-norm transformer block with attention along axis 1 of `x`.
    fn block<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        blk: &BlockParams<Var>,
        x: Var,
        order: SumOrder,
        mode: &mut ForwardMode,
    ) -> Result<Var> {
        let h = g.layer_norm(x, blk.ln1_gamma, blk.ln1_beta, LAYER_NORM_EPS)?;
        let a = self.attention(g, blk, h, order)?;
        let a = self.dropout(g, a, mode)?;
        let x = g.add(x, a)?;
        let h = g.layer_norm(x, blk.ln2_gamma, blk.ln2_beta, LAYER_NORM_EPS)?;
        let f = g.matmul(h, blk.ffn_in)?;
        let f = g.gelu(f);
        let f = g.matmul(f, blk.ffn_out)?;
        let f = self.dropout(g, f, mode)?;
        g.add(x, f)
    }

    /// Attention across the tokens of each instance independently.
    pub fn feature_attention_block<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        blk: &BlockParams<Var>,
        z: Var,
        mode: &mut ForwardMode,
    ) -> Result<Var> {
        self.block(g, blk, z, SumOrder::Sequential, mode)
    }

    /// Attention across the batch at each token position. Reductions over
    /// the batch run in canonical order, so permuting the batch permutes the
    /// output exactly.
    pub fn instance_attention_block<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        blk: &BlockParams<Var>,
        z: Var,
        mode: &mut ForwardMode,
    ) -> Result<Var> {
        let zt = g.permute(z, &[1, 0, 2])?;
        let out = self.block(g, blk, zt, SumOrder::Canonical, mode)?;
        g.permute(out, &[1, 0, 2])
    }

    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ModelParams<Var>,
        batch: &Batch,
        mode: &mut ForwardMode,
    ) -> Result<Var> {
        let mut z = self.embed(g, p, batch)?;
        for (kind, blk) in self.config.block_kinds().into_iter().zip(&p.blocks) {
            z = match kind {
                AttentionKind::Feature => self.feature_attention_block(g, blk, z, mode)?,
                AttentionKind::Instance => self.instance_attention_block(g, blk, z, mode)?,
            };
        }
        Ok(z)
    }

    fn mlp<T: Scalar>(g: &mut Graph<T>, m: &MlpParams<Var>, x: Var) -> Result<Var> {
        let h = g.matmul(x, m.w1)?;
        let h = g.add_bias(h, m.b1)?;
        let h = g.gelu(h);
        let o = g.matmul(h, m.w2)?;
        g.add_bias(o, m.b2)
    }

    /// Position-wise global and local projections, each L2-normalized.
    pub fn project<T: Scalar>(&self, g: &mut Graph<T>, p: &ModelParams<Var>, z: Var) -> Result<(Var, Var)> {
        let gl = Self::mlp(g, &p.projector_global, z)?;
        let gl = g.l2_normalize(gl, NORMALIZE_EPS)?;
        let lo = Self::mlp(g, &p.projector_local, z)?;
        let lo = g.l2_normalize(lo, NORMALIZE_EPS)?;
        Ok((gl, lo))
    }

    /// Head over the pooled `[Z, g, l]` concatenation.
    pub fn predict<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ModelParams<Var>,
        z: Var,
        global: Var,
        local: Var,
    ) -> Result<Var> {
        let (global, local) = if self.config.detach_head_projections {
            (g.detach(global), g.detach(local))
        } else {
            (global, local)
        };
        let b = g.shape(z)[0];
        let d = self.config.d;
        let pool = |g: &mut Graph<T>, x: Var| -> Result<Var> {
            match self.config.resolved_pooling() {
                HeadPooling::Cls | HeadPooling::Auto => {
                    let c = g.narrow(x, 1, 0, 1)?;
                    g.reshape(c, &[b, d])
                }
                HeadPooling::Mean => g.mean_axis(x, 1),
            }
        };
        let parts = [pool(g, z)?, pool(g, global)?, pool(g, local)?];
        let x = g.concat(&parts, 1)?;
        Self::mlp(g, &p.head, x)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ModelParams<Var>,
        batch: &Batch,
        mode: &mut ForwardMode,
    ) -> Result<Forward> {
        let z = self.encode(g, p, batch, mode)?;
        let (global, local) = self.project(g, p, z)?;
        let logits = self.predict(g, p, z, global, local)?;
        Ok(Forward {
            z,
            global,
            local,
            logits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Targets;

    pub(crate) fn layout() -> InputLayout {
        InputLayout {
            features: vec![
                FeatureSlot::Numerical { offset: 0 },
                FeatureSlot::Categorical {
                    offset: 0,
                    cardinality: 3,
                },
                FeatureSlot::Numerical { offset: 1 },
            ],
            n_outputs: 2,
        }
    }

    pub(crate) fn batch(b: usize, seed: u64) -> Batch {
        let mut rng = stream(seed, Purpose::Fixture);
        Batch {
            categorical: (0..b).map(|_| rng.random_range(0..3)).collect(),
            numerical: (0..2 * b).map(|_| rng.random_range(-2.0..2.0)).collect(),
            targets: Targets::Classes {
                labels: (0..b).map(|i| i % 2).collect(),
                n_classes: 2,
            },
            row_ids: (0..b).collect(),
            n_categorical: 1,
            n_numerical: 2,
        }
    }

    fn small(variant: Variant) -> TabDeco {
        TabDeco::new(
            ModelConfig {
                d: 8,
                layers: 2,
                heads: 2,
                variant,
                ..ModelConfig::default()
            },
            layout(),
        )
        .unwrap()
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig {
            d: 10,
            heads: 4,
            ..ModelConfig::default()
        };
        assert!(TabDeco::new(cfg, layout()).is_err());
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let m = small(Variant::Both);
        let p = m.init(0);
        let names = p.names();
        let set: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert_eq!(names.first().unwrap(), "cls");
        assert_eq!(names.last().unwrap(), "global_table");
        let mut visited = Vec::new();
        let mut q = p.clone();
        q.for_each_mut(&mut |n, _| visited.push(n.to_owned()));
        assert_eq!(visited, names);
        assert_eq!(p.blocks.len(), 4);
        assert_eq!(p.global_table.shape(), &[4, 8]);
    }

    #[test]
    fn embed_shape_cls_and_bias() {
        let m = small(Variant::Both);
        let params = m.init(1);
        let mut bt = batch(3, 0);
        bt.numerical[0] = 0.0;
        let mut g = Graph::<f32>::new();
        let p = m.bind(&mut g, &params);
        let e = m.embed(&mut g, &p, &bt).unwrap();
        assert_eq!(g.shape(e), &[3, 4, 8]);
        let v = g.value(e);
        for r in 0..3 {
            for k in 0..8 {
                assert_eq!(v.at(&[r, 0, k]), params.cls.data()[k]);
            }
        }
        for k in 0..8 {
            assert_eq!(v.at(&[0, 1, k]), params.num_biases[0].data()[k]);
        }
    }

    #[test]
    fn embed_rejects_bad_code() {
        let m = small(Variant::Both);
        let params = m.init(1);
        let mut bt = batch(2, 0);
        bt.categorical[1] = 3;
        let mut g = Graph::<f32>::new();
        let p = m.bind(&mut g, &params);
        assert!(m.embed(&mut g, &p, &bt).is_err());
    }

    #[test]
    fn identical_rows_identical_embeddings() {
        let m = small(Variant::Both);
        let params = m.init(1);
        let one = batch(1, 5);
        let two = one.permuted(&[0, 0]);
        let mut g = Graph::<f32>::new();
        let p = m.bind(&mut g, &params);
        let e = m.embed(&mut g, &p, &two).unwrap();
        let v = g.value(e).data();
        assert_eq!(v[..32], v[32..]);
    }

    #[test]
    fn forward_shapes_and_unit_projections() {
        for variant in Variant::ALL {
            let m = small(variant);
            let params = m.init(2);
            let mut g = Graph::<f32>::new();
            let p = m.bind(&mut g, &params);
            let f = m.forward(&mut g, &p, &batch(5, 1), &mut ForwardMode::eval()).unwrap();
            assert_eq!(g.shape(f.z), &[5, 4, 8]);
            assert_eq!(g.shape(f.global), &[5, 4, 8]);
            assert_eq!(g.shape(f.local), &[5, 4, 8]);
            assert_eq!(g.shape(f.logits), &[5, 2]);
            for v in [f.global, f.local] {
                for row in g.value(v).data().chunks(8) {
                    let n: f32 = row.iter().map(|x| x * x).sum::<f32>().sqrt();
                    assert!((n - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn zero_layers_encode_is_embed() {
        let m = TabDeco::new(
            ModelConfig {
                d: 4,
                layers: 0,
                heads: 2,
                ..ModelConfig::default()
            },
            layout(),
        )
        .unwrap();
        let params = m.init(0);
        let mut g = Graph::<f32>::new();
        let p = m.bind(&mut g, &params);
        let bt = batch(3, 3);
        let e = m.embed(&mut g, &p, &bt).unwrap();
        let z = m.encode(&mut g, &p, &bt, &mut ForwardMode::eval()).unwrap();
        assert_eq!(g.value(e), g.value(z));
    }

    #[test]
    fn zero_head_weights_give_bias_logits() {
        let m = small(Variant::Both);
        let mut params = m.init(4);
        params.head.w2 = Tensor::zeros(params.head.w2.shape().to_vec());
        let mut g = Graph::<f32>::new();
        let p = m.bind(&mut g, &params);
        let f = m.forward(&mut g, &p, &batch(4, 0), &mut ForwardMode::eval()).unwrap();
        for row in g.value(f.logits).data().chunks(2) {
            assert_eq!(row, params.head.b2.data());
        }
    }

    #[test]
    fn single_row_instance_attention() {
        // softmax over one candidate is exactly 1, so the block reduces to the
        // value path of that row
        let m = small(Variant::InstanceOnly);
        let params = m.init(0);
        let mut g = Graph::<f64>::new();
        let p = m.bind(&mut g, &params);
        let bt = batch(1, 0);
        let z = m.embed(&mut g, &p, &bt).unwrap();
        let out = m
            .instance_attention_block(&mut g, &p.blocks[0], z, &mut ForwardMode::eval())
            .unwrap();
        assert_eq!(g.shape(out), &[1, 4, 8]);

        let blk = &p.blocks[0];
        let h = g.layer_norm(z, blk.ln1_gamma, blk.ln1_beta, LAYER_NORM_EPS).unwrap();
        let v = g.matmul(h, blk.wv).unwrap();
        let a = g.matmul(v, blk.wo).unwrap();
        let x = g.add(z, a).unwrap();
        let h = g.layer_norm(x, blk.ln2_gamma, blk.ln2_beta, LAYER_NORM_EPS).unwrap();
        let f = g.matmul(h, blk.ffn_in).unwrap();
        let f = g.gelu(f);
        let f = g.matmul(f, blk.ffn_out).unwrap();
        let expected = g.add(x, f).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(expected)) < 1e-12);
    }

    #[test]
    fn dropout_only_with_rng() {
        let m = TabDeco::new(
            ModelConfig {
                d: 8,
                layers: 1,
                heads: 2,
                dropout: 0.5,
                ..ModelConfig::default()
            },
            layout(),
        )
        .unwrap();
        let params = m.init(0);
        let bt = batch(4, 0);
        let run = |mode: &mut ForwardMode| {
            let mut g = Graph::<f32>::new();
            let p = m.bind(&mut g, &params);
            let f = m.forward(&mut g, &p, &bt, mode).unwrap();
            g.value(f.logits).clone()
        };
        let a = run(&mut ForwardMode::eval());
        let b = run(&mut ForwardMode::eval());
        assert_eq!(a, b);
        let mut rng = stream(0, Purpose::Dropout);
        let c = run(&mut ForwardMode {
            dropout_rng: Some(&mut rng),
        });
        assert_ne!(a, c);
    }
}
