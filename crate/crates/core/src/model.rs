//! The equivariant refinement network.
//!
//! Rows are nodes (or edges) and columns are channels: coordinates are
//! `n×3`, embeddings `n×d`. One layer updates positions by a mean over
//! incoming edges of `(x_i − x_j)/(‖x_i − x_j‖ + C)` scaled by a learned
//! scalar per message, blended with the skip anchor `x⁽⁰⁾` by `α`, and
//! updates embeddings from messages, attention and the embedded input
//! features, blended by `β`. Coordinates only ever enter through
//! differences and norms, so the stack commutes with rigid motions.

use std::rc::Rc;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, Eager};
use crate::featurize::ComplexGraph;

pub mod weights;

pub use weights::{load_model, load_weights, save_model, save_weights, WeightsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    LeakyRelu,
    Silu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    LayerNorm,
    Identity,
}

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgrConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub node_feature_dim: usize,
    pub edge_feature_dim: usize,
    pub qa_loss_weight: f64,
    pub psr_loss_weight: f64,
    pub activation: Activation,
    pub normalization: Normalization,
    pub attention_enabled: bool,
    pub window_size: usize,
    pub norm_constant: f64,
    /// Training-time coordinate noise in Å; 0 disables corruption.
    pub noise_sigma: f64,
}

impl Default for EgrConfig {
    fn default() -> Self {
        Self {
            num_layers: 7,
            hidden_dim: 64,
            node_feature_dim: 39,
            edge_feature_dim: 15,
            qa_loss_weight: 0.05,
            psr_loss_weight: 1.0,
            activation: Activation::LeakyRelu,
            normalization: Normalization::LayerNorm,
            attention_enabled: true,
            window_size: 128,
            norm_constant: 1.0,
            noise_sigma: 0.1,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("{what} width {got} does not match the configured {expected}")]
    WidthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

impl EgrConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1");
        }
        if self.hidden_dim == 0 || self.node_feature_dim == 0 {
            return bad("hidden_dim and node_feature_dim must be at least 1");
        }
        if self.window_size == 0 {
            return bad("window_size must be at least 1");
        }
        if !(self.qa_loss_weight >= 0.0 && self.psr_loss_weight >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.norm_constant > 0.0 && self.norm_constant.is_finite()) {
            return bad("norm_constant must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be non-negative");
        }
        Ok(())
    }

    pub fn check_graph(&self, graph: &ComplexGraph) -> Result<(), ModelError> {
        let node = graph.node_features.ncols();
        if node != self.node_feature_dim {
            return Err(ModelError::WidthMismatch {
                what: "node feature",
                expected: self.node_feature_dim,
                got: node,
            });
        }
        let edge = graph.edge_features.ncols();
        if edge != self.edge_feature_dim {
            return Err(ModelError::WidthMismatch {
                what: "edge feature",
                expected: self.edge_feature_dim,
                got: edge,
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameters, generic over storage: arrays for values and gradients, tape
// variables while a forward pass is being recorded.

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub offset: T,
}

/// `Linear → Norm → activation → Linear`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub first: Linear<T>,
    pub norm: Norm<T>,
    pub second: Linear<T>,
}

/// Bias-free query, key and value projections.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub query: T,
    pub key: T,
    pub value: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub edge_mlp: Mlp<T>,
    pub coord_mlp: Mlp<T>,
    pub node_mlp: Mlp<T>,
    pub global_attention: Attention<T>,
    pub local_attention: Attention<T>,
}

/// Skip strengths, stored as logits; `α = σ(alpha_logit)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Skip<T> {
    pub alpha_logit: T,
    pub beta_logit: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub embed: Linear<T>,
    pub layers: Vec<LayerParams<T>>,
    pub qa_head: Mlp<T>,
    pub skip: Skip<T>,
}

type MapFn<'f, T, U> = dyn FnMut(&str, &T) -> U + 'f;

impl<T> Linear<T> {
    fn map<U>(&self, p: &str, f: &mut MapFn<T, U>) -> Linear<U> {
        Linear {
            weight: f(&format!("{p}.weight"), &self.weight),
            bias: f(&format!("{p}.bias"), &self.bias),
        }
    }

    fn collect<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{p}.weight"), &self.weight));
        out.push((format!("{p}.bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{p}.weight"), &mut self.weight));
        out.push((format!("{p}.bias"), &mut self.bias));
    }
}

impl<T> Norm<T> {
    fn map<U>(&self, p: &str, f: &mut MapFn<T, U>) -> Norm<U> {
        Norm {
            gain: f(&format!("{p}.gain"), &self.gain),
            offset: f(&format!("{p}.offset"), &self.offset),
        }
    }

    fn collect<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{p}.gain"), &self.gain));
        out.push((format!("{p}.offset"), &self.offset));
    }

    fn collect_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{p}.gain"), &mut self.gain));
        out.push((format!("{p}.offset"), &mut self.offset));
    }
}

impl<T> Mlp<T> {
    fn map<U>(&self, p: &str, f: &mut MapFn<T, U>) -> Mlp<U> {
        Mlp {
            first: self.first.map(&format!("{p}.first"), f),
            norm: self.norm.map(&format!("{p}.norm"), f),
            second: self.second.map(&format!("{p}.second"), f),
        }
    }

    fn collect<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a T)>) {
        self.first.collect(&format!("{p}.first"), out);
        self.norm.collect(&format!("{p}.norm"), out);
        self.second.collect(&format!("{p}.second"), out);
    }

    fn collect_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.first.collect_mut(&format!("{p}.first"), out);
        self.norm.collect_mut(&format!("{p}.norm"), out);
        self.second.collect_mut(&format!("{p}.second"), out);
    }
}

impl<T> Attention<T> {
    fn map<U>(&self, p: &str, f: &mut MapFn<T, U>) -> Attention<U> {
        Attention {
            query: f(&format!("{p}.query"), &self.query),
            key: f(&format!("{p}.key"), &self.key),
            value: f(&format!("{p}.value"), &self.value),
        }
    }

    fn collect<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{p}.query"), &self.query));
        out.push((format!("{p}.key"), &self.key));
        out.push((format!("{p}.value"), &self.value));
    }

    fn collect_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{p}.query"), &mut self.query));
        out.push((format!("{p}.key"), &mut self.key));
        out.push((format!("{p}.value"), &mut self.value));
    }
}

impl<T> LayerParams<T> {
    fn map<U>(&self, p: &str, f: &mut MapFn<T, U>) -> LayerParams<U> {
        LayerParams {
            edge_mlp: self.edge_mlp.map(&format!("{p}.edge_mlp"), f),
            coord_mlp: self.coord_mlp.map(&format!("{p}.coord_mlp"), f),
            node_mlp: self.node_mlp.map(&format!("{p}.node_mlp"), f),
            global_attention: self.global_attention.map(&format!("{p}.global_attention"), f),
            local_attention: self.local_attention.map(&format!("{p}.local_attention"), f),
        }
    }

    fn collect<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a T)>) {
        self.edge_mlp.collect(&format!("{p}.edge_mlp"), out);
        self.coord_mlp.collect(&format!("{p}.coord_mlp"), out);
        self.node_mlp.collect(&format!("{p}.node_mlp"), out);
        self.global_attention.collect(&format!("{p}.global_attention"), out);
        self.local_attention.collect(&format!("{p}.local_attention"), out);
    }

    fn collect_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.edge_mlp.collect_mut(&format!("{p}.edge_mlp"), out);
        self.coord_mlp.collect_mut(&format!("{p}.coord_mlp"), out);
        self.node_mlp.collect_mut(&format!("{p}.node_mlp"), out);
        self.global_attention.collect_mut(&format!("{p}.global_attention"), out);
        self.local_attention.collect_mut(&format!("{p}.local_attention"), out);
    }
}

impl<T> ModelParams<T> {
    /// Applies `f` to every block in canonical order, keeping the structure.
    pub fn map_named<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        let f: &mut MapFn<T, U> = &mut f;
        ModelParams {
            embed: self.embed.map("embed", f),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, layer)| layer.map(&format!("layers.{l}"), f))
                .collect(),
            qa_head: self.qa_head.map("qa_head", f),
            skip: Skip {
                alpha_logit: f("skip.alpha_logit", &self.skip.alpha_logit),
                beta_logit: f("skip.beta_logit", &self.skip.beta_logit),
            },
        }
    }

    /// Every block with its canonical name, in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.embed.collect("embed", &mut out);
        for (l, layer) in self.layers.iter().enumerate() {
            layer.collect(&format!("layers.{l}"), &mut out);
        }
        self.qa_head.collect("qa_head", &mut out);
        out.push(("skip.alpha_logit".into(), &self.skip.alpha_logit));
        out.push(("skip.beta_logit".into(), &self.skip.beta_logit));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.embed.collect_mut("embed", &mut out);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.collect_mut(&format!("layers.{l}"), &mut out);
        }
        self.qa_head.collect_mut("qa_head", &mut out);
        out.push(("skip.alpha_logit".into(), &mut self.skip.alpha_logit));
        out.push(("skip.beta_logit".into(), &mut self.skip.beta_logit));
        out
    }
}

impl ModelParams<(usize, usize)> {
    /// Block shapes implied by `config`.
    pub fn shapes(config: &EgrConfig) -> Self {
        let d = config.hidden_dim;
        let linear = |i: usize, o: usize| Linear {
            weight: (i, o),
            bias: (1, o),
        };
        let mlp = |i: usize, o: usize| Mlp {
            first: linear(i, d),
            norm: Norm {
                gain: (1, d),
                offset: (1, d),
            },
            second: linear(d, o),
        };
        let attention = || Attention {
            query: (d, d),
            key: (d, d),
            value: (d, d),
        };
        ModelParams {
            embed: linear(config.node_feature_dim, d),
            layers: (0..config.num_layers)
                .map(|_| LayerParams {
                    edge_mlp: mlp(2 * d + config.edge_feature_dim + 1, d),
                    coord_mlp: mlp(d, 1),
                    node_mlp: mlp(4 * d, d),
                    global_attention: attention(),
                    local_attention: attention(),
                })
                .collect(),
            qa_head: mlp(d, 1),
            skip: Skip {
                alpha_logit: (1, 1),
                beta_logit: (1, 1),
            },
        }
    }
}

pub type Params = ModelParams<Array2<f64>>;

impl Params {
    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        self.map_named(|_, a| Array2::zeros(a.dim()))
    }

    /// Name of the first block holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.named()
            .into_iter()
            .find(|(_, a)| a.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }

    pub fn alpha(&self) -> f64 {
        crate::tape::sigmoid(self.skip.alpha_logit[[0, 0]])
    }

    pub fn beta(&self) -> f64 {
        crate::tape::sigmoid(self.skip.beta_logit[[0, 0]])
    }
}

/// Fresh parameters: uniform weights with variance `1/fan_in`, zero biases,
/// unit norm gains, zero skip logits (`α = β = ½`), and a zero final layer
/// in every coordinate MLP so the first forward pass moves nothing.
pub fn init_params(config: &EgrConfig, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelParams::shapes(config).map_named(|name, &(rows, cols)| {
        let zero = name.ends_with(".bias")
            || name.ends_with(".offset")
            || name.starts_with("skip.")
            || (name.contains(".coord_mlp.second."));
        if zero {
            Array2::zeros((rows, cols))
        } else if name.ends_with(".gain") {
            Array2::ones((rows, cols))
        } else {
            let limit = (3.0 / rows as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
        }
    })
}

// ---------------------------------------------------------------------------
// Forward pass.

fn activate<B: Backend>(b: &B, x: &B::V, activation: Activation) -> B::V {
    match activation {
        Activation::LeakyRelu => b.leaky_relu(x, LEAKY_SLOPE),
        Activation::Silu => b.silu(x),
    }
}

fn linear<B: Backend>(b: &B, p: &Linear<B::V>, x: &B::V) -> B::V {
    b.add_row(&b.matmul(x, &p.weight), &p.bias)
}

pub fn mlp<B: Backend>(b: &B, p: &Mlp<B::V>, x: &B::V, config: &EgrConfig) -> B::V {
    let mut y = linear(b, &p.first, x);
    if config.normalization == Normalization::LayerNorm {
        y = b.add_row(&b.mul_row(&b.layer_norm(&y), &p.norm.gain), &p.norm.offset);
    }
    let y = activate(b, &y, config.activation);
    linear(b, &p.second, &y)
}

/// `Q(KᵀV)/n`: global attention in time linear in `n`.
pub fn linear_attention<B: Backend>(b: &B, p: &Attention<B::V>, h: &B::V) -> B::V {
    let n = b.shape(h).0;
    let q = b.matmul(h, &p.query);
    let k = b.matmul(h, &p.key);
    let v = b.matmul(h, &p.value);
    let kv = b.matmul(&b.transpose(&k), &v);
    b.scale(&b.matmul(&q, &kv), 1.0 / n as f64)
}

/// `(QKᵀ/n)V`, the quadratic form of [`linear_attention`].
pub fn quadratic_attention<B: Backend>(b: &B, p: &Attention<B::V>, h: &B::V) -> B::V {
    let n = b.shape(h).0;
    let q = b.matmul(h, &p.query);
    let k = b.matmul(h, &p.key);
    let v = b.matmul(h, &p.value);
    let scores = b.scale(&b.matmul(&q, &b.transpose(&k)), 1.0 / n as f64);
    b.matmul(&scores, &v)
}

/// Softmax attention with scale `1/√d`, computed separately inside
/// consecutive index blocks of at most `window` nodes.
pub fn local_window_attention<B: Backend>(
    b: &B,
    p: &Attention<B::V>,
    h: &B::V,
    window: usize,
) -> B::V {
    let (n, d) = b.shape(h);
    let q = b.matmul(h, &p.query);
    let k = b.matmul(h, &p.key);
    let v = b.matmul(h, &p.value);
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let block = |q: &B::V, k: &B::V, v: &B::V| {
        let scores = b.scale(&b.matmul(q, &b.transpose(k)), inv_sqrt_d);
        b.matmul(&b.softmax_rows(&scores), v)
    };
    if n <= window {
        return block(&q, &k, &v);
    }
    let parts: Vec<B::V> = (0..n)
        .step_by(window)
        .map(|start| {
            let idx: Rc<[usize]> = (start..(start + window).min(n)).collect();
            block(
                &b.gather_rows(&q, &idx),
                &b.gather_rows(&k, &idx),
                &b.gather_rows(&v, &idx),
            )
        })
        .collect();
    b.concat_rows(&parts)
}

/// Per-graph inputs shared by every layer.
pub struct GraphContext<V> {
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    pub node_count: usize,
    pub edge_features: V,
    /// Embedded input node features, `f_i` of the node update.
    pub embedded: V,
    /// Skip anchor `x⁽⁰⁾`.
    pub initial_coords: V,
}

impl<V> GraphContext<V> {
    pub fn new<B: Backend<V = V>>(b: &B, graph: &ComplexGraph, embedded: V) -> Self {
        Self {
            src: graph.edges.iter().map(|e| e.0).collect(),
            dst: graph.edges.iter().map(|e| e.1).collect(),
            node_count: graph.node_count(),
            edge_features: b.constant(graph.edge_features.clone()),
            embedded,
            initial_coords: b.constant(graph.initial_coords.clone()),
        }
    }
}

/// One layer: returns the updated `(coords, embeddings)`.
pub fn egr_layer<B: Backend>(
    b: &B,
    layer: &LayerParams<B::V>,
    skip: &Skip<B::V>,
    ctx: &GraphContext<B::V>,
    coords: &B::V,
    h: &B::V,
    config: &EgrConfig,
) -> (B::V, B::V) {
    let h_dst = b.gather_rows(h, &ctx.dst);
    let h_src = b.gather_rows(h, &ctx.src);
    let diff = b.sub(&b.gather_rows(coords, &ctx.dst), &b.gather_rows(coords, &ctx.src));
    let dist_sq = b.row_sum_sq(&diff);
    let message_in = b.concat_cols(&[&h_dst, &h_src, &ctx.edge_features, &dist_sq]);
    let messages = mlp(b, &layer.edge_mlp, &message_in, config);

    let weight = mlp(b, &layer.coord_mlp, &messages, config);
    let inv_len = b.recip(&b.add_const(&b.row_norm(&diff), config.norm_constant));
    let step = b.mul_col(&diff, &b.mul(&inv_len, &weight));
    let displacement = b.segment_mean(&step, &ctx.dst, ctx.node_count);
    let alpha = b.sigmoid(&skip.alpha_logit);
    let keep = b.add_const(&b.scale(&alpha, -1.0), 1.0);
    let coords_next = b.add(
        &b.add(
            &b.mul_scalar(&ctx.initial_coords, &alpha),
            &b.mul_scalar(coords, &keep),
        ),
        &displacement,
    );

    let aggregated = b.segment_mean(&messages, &ctx.dst, ctx.node_count);
    let attended = if config.attention_enabled {
        b.add(
            &linear_attention(b, &layer.global_attention, h),
            &local_window_attention(b, &layer.local_attention, h, config.window_size),
        )
    } else {
        b.constant(Array2::zeros(b.shape(h)))
    };
    let node_in = b.concat_cols(&[h, &aggregated, &attended, &ctx.embedded]);
    let updated = mlp(b, &layer.node_mlp, &node_in, config);
    let beta = b.sigmoid(&skip.beta_logit);
    let keep_h = b.add_const(&b.scale(&beta, -1.0), 1.0);
    let h_next = b.add(&b.mul_scalar(&updated, &beta), &b.mul_scalar(h, &keep_h));
    (coords_next, h_next)
}

/// Outputs of [`forward_with`] on a backend.
pub struct ForwardOutput<V> {
    pub coords: V,
    pub embeddings: V,
    /// Per-node quality in `[0, 1]`, `n×1`.
    pub quality: V,
}

pub fn forward_with<B: Backend>(
    b: &B,
    params: &ModelParams<B::V>,
    graph: &ComplexGraph,
    config: &EgrConfig,
) -> ForwardOutput<B::V> {
    let features = b.constant(graph.node_features.clone());
    let embedded = linear(b, &params.embed, &features);
    let ctx = GraphContext::new(b, graph, embedded.clone());
    let mut coords = b.constant(graph.coords.clone());
    let mut h = embedded;
    for layer in &params.layers {
        (coords, h) = egr_layer(b, layer, &params.skip, &ctx, &coords, &h, config);
    }
    let quality = b.sigmoid(&mlp(b, &params.qa_head, &h, config));
    ForwardOutput {
        coords,
        embeddings: h,
        quality,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementResult {
    /// Refined positions, `n×3`.
    pub refined_coords: Array2<f64>,
    /// Final node embeddings, `n×d`.
    pub embeddings: Array2<f64>,
    /// Graph node index of each Cα, aligned with `quality`.
    pub ca_nodes: Vec<usize>,
    /// Predicted per-residue LDDT-Cα at each Cα node.
    pub quality: Vec<f64>,
}

pub fn forward(
    graph: &ComplexGraph,
    params: &Params,
    config: &EgrConfig,
) -> Result<RefinementResult, ModelError> {
    config.validate()?;
    config.check_graph(graph)?;
    let out = forward_with(&Eager, params, graph, config);
    let ca_nodes = graph.ca_nodes();
    let quality = ca_nodes.iter().map(|&i| out.quality[[i, 0]]).collect();
    Ok(RefinementResult {
        refined_coords: out.coords,
        embeddings: out.embeddings,
        ca_nodes,
        quality,
    })
}

/// Runs `iterations` passes, feeding each output back in as the next input.
pub fn refine_iteratively(
    graph: &ComplexGraph,
    params: &Params,
    config: &EgrConfig,
    iterations: usize,
) -> Result<RefinementResult, ModelError> {
    let mut current = graph.clone();
    let mut result = forward(&current, params, config)?;
    for _ in 1..iterations {
        current.set_coords(result.refined_coords.clone());
        result = forward(&current, params, config)?;
    }
    Ok(result)
}

/// Every quality value from a forward pass, per node (`n` entries).
pub fn node_quality(graph: &ComplexGraph, params: &Params, config: &EgrConfig) -> Vec<f64> {
    let out = forward_with(&Eager, params, graph, config);
    out.quality.slice(s![.., 0]).to_vec()
}
