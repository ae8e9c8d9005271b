//! Losses, exact gradients, AdamW and the early-stopping training loop.
//!
//! The refinement loss is a Huber penalty on every coordinate component of
//! atoms with a native counterpart; the quality loss is a squared error on
//! Cα nodes with a defined LDDT label. Either set may be empty, and an
//! example with both empty contributes nothing.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurize::{build_knn_graph, corrupt_coordinates, ComplexGraph, FeatureError, GraphConfig};
use crate::metrics::{lddt_ca, MetricError, LDDT_RADIUS, LDDT_THRESHOLDS};
use crate::model::weights::{params_from_blocks, read_container, write_container, WeightsError};
use crate::model::{forward_with, init_params, EgrConfig, ModelError, Params};
use crate::structio::{
    kabsch_superpose, match_atoms, parse_pdb_file, AtomCorrespondence, ComplexStructure, StructureError, Vec3,
};
use crate::tape::Tape;
use crate::backend::Eager;

pub const HUBER_DELTA: f64 = 1.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} loss is undefined on an empty target set")]
    LossUndefined(&'static str),
    #[error("example has neither coordinate nor quality targets")]
    SkipExample,
    #[error("non-finite gradient in parameter block {0}")]
    NonFiniteGradient(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence {
        epoch: usize,
        loss: f64,
        /// Parameters and optimizer state before the failing step.
        last_good: Box<Checkpoint>,
    },
    #[error("no training examples")]
    EmptyDataset,
    #[error("{id}: {source}")]
    Example {
        id: String,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Examples.

/// A decoy graph with its supervision targets, indexed by graph node.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub target_id: String,
    pub decoy_id: String,
    pub graph: ComplexGraph,
    /// `(node, native position)` for nodes with a native counterpart.
    pub coord_targets: Vec<(usize, Vec3)>,
    /// `(node, LDDT-Cα label)` for Cα nodes whose label is defined.
    pub quality_targets: Vec<(usize, f64)>,
}

/// Superposes `native` onto `decoy` over matched Cα atoms (all matched atoms
/// when there are too few Cα), featurizes the decoy and attaches targets.
pub fn build_example(
    target_id: &str,
    decoy_id: &str,
    decoy: &ComplexStructure,
    native: &ComplexStructure,
    graph_config: &GraphConfig,
    surface_override: Option<&[f64]>,
) -> Result<TrainingExample, TrainError> {
    let corr = match_atoms(decoy, native)?;
    let decoy_xyz = decoy.coords();
    let native_xyz = native.coords();
    let fit = |pairs: &[(usize, usize)]| {
        let mobile: Vec<Vec3> = pairs.iter().map(|&(_, n)| native_xyz[n]).collect();
        let target: Vec<Vec3> = pairs.iter().map(|&(d, _)| decoy_xyz[d]).collect();
        kabsch_superpose(&mobile, &target, None)
    };
    let sup = fit(&corr.matched_ca).or_else(|_| fit(&corr.pairs))?;
    let aligned = native.transformed(&sup.rotation, &sup.translation);
    let aligned_xyz = aligned.coords();

    let graph = build_knn_graph(decoy, graph_config, surface_override)?;
    let to_native = corr.decoy_to_native(decoy.atom_count());
    let coord_targets = graph
        .atom_of_node
        .iter()
        .enumerate()
        .filter_map(|(node, &atom)| to_native[atom].map(|n| (node, aligned_xyz[n])))
        .collect();

    let mut node_of_atom = vec![None; decoy.atom_count()];
    for (node, &atom) in graph.atom_of_node.iter().enumerate() {
        node_of_atom[atom] = Some(node);
    }
    let quality_targets = match ground_truth_lddt(decoy, native, &corr) {
        Ok(labels) => labels
            .into_iter()
            .filter_map(|(atom, q)| Some((node_of_atom[atom]?, q)))
            .collect(),
        Err(MetricError::TooFewCa(_)) => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    Ok(TrainingExample {
        target_id: target_id.to_string(),
        decoy_id: decoy_id.to_string(),
        graph,
        coord_targets,
        quality_targets,
    })
}

/// Per-residue LDDT-Cα labels as `(decoy Cα atom, label)`; residues with no
/// native neighbour inside the inclusion radius are left out.
pub fn ground_truth_lddt(
    decoy: &ComplexStructure,
    native: &ComplexStructure,
    corr: &AtomCorrespondence,
) -> Result<Vec<(usize, f64)>, MetricError> {
    let result = lddt_ca(decoy, native, corr, LDDT_RADIUS, &LDDT_THRESHOLDS)?;
    Ok(result
        .ca_pairs
        .iter()
        .zip(&result.per_residue)
        .filter_map(|(&(d, _), r)| Some((d, r.lddt?)))
        .collect())
}

/// Loads every `<id>_decoy.pdb` / `<id>_native.pdb` pair in `dir`, sorted by id.
pub fn load_examples(dir: &Path, graph_config: &GraphConfig) -> Result<Vec<TrainingExample>, TrainError> {
    let mut ids: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix("_decoy.pdb"))
                .map(str::to_string)
        })
        .collect();
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let wrap = |e: TrainError| TrainError::Example {
                id: id.clone(),
                source: Box::new(e),
            };
            let decoy = parse_pdb_file(dir.join(format!("{id}_decoy.pdb"))).map_err(|e| wrap(e.into()))?;
            let native = parse_pdb_file(dir.join(format!("{id}_native.pdb"))).map_err(|e| wrap(e.into()))?;
            build_example(&id, &id, &decoy, &native, graph_config, None).map_err(wrap)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Losses.

/// Huber penalty of a residual and its derivative.
pub fn huber(r: f64, delta: f64) -> (f64, f64) {
    if r.abs() < delta {
        (0.5 * r * r, r)
    } else {
        (delta * (r.abs() - 0.5 * delta), delta * r.signum())
    }
}

/// Mean Huber penalty over the components of matched atoms, with its
/// gradient with respect to every predicted coordinate.
pub fn psr_loss(
    coords: &Array2<f64>,
    targets: &[(usize, Vec3)],
    delta: f64,
) -> Result<(f64, Array2<f64>), TrainError> {
    if targets.is_empty() {
        return Err(TrainError::LossUndefined("refinement"));
    }
    let count = (3 * targets.len()) as f64;
    let mut grad = Array2::zeros(coords.dim());
    let mut total = 0.0;
    for &(node, target) in targets {
        for c in 0..3 {
            let (v, g) = huber(coords[[node, c]] - target[c], delta);
            total += v;
            grad[[node, c]] = g / count;
        }
    }
    Ok((total / count, grad))
}

/// Mean squared error over labeled Cα nodes; `quality` is the `n×1`
/// per-node prediction.
pub fn qa_loss(
    quality: &Array2<f64>,
    targets: &[(usize, f64)],
) -> Result<(f64, Array2<f64>), TrainError> {
    if targets.is_empty() {
        return Err(TrainError::LossUndefined("quality"));
    }
    let count = targets.len() as f64;
    let mut grad = Array2::zeros(quality.dim());
    let mut total = 0.0;
    for &(node, label) in targets {
        let r = quality[[node, 0]] - label;
        total += r * r;
        grad[[node, 0]] = 2.0 * r / count;
    }
    Ok((total / count, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub psr: Option<f64>,
    pub qa: Option<f64>,
    pub total: f64,
    /// d total / d coordinates.
    pub coord_grad: Array2<f64>,
    /// d total / d per-node quality.
    pub quality_grad: Array2<f64>,
}

/// Weighted sum of whichever losses have targets.
pub fn total_loss(
    example: &TrainingExample,
    coords: &Array2<f64>,
    quality: &Array2<f64>,
    config: &EgrConfig,
) -> Result<LossBreakdown, TrainError> {
    let psr = (!example.coord_targets.is_empty())
        .then(|| psr_loss(coords, &example.coord_targets, HUBER_DELTA))
        .transpose()?;
    let qa = (!example.quality_targets.is_empty())
        .then(|| qa_loss(quality, &example.quality_targets))
        .transpose()?;
    if psr.is_none() && qa.is_none() {
        return Err(TrainError::SkipExample);
    }
    let mut total = 0.0;
    let mut coord_grad = Array2::zeros(coords.dim());
    let mut quality_grad = Array2::zeros(quality.dim());
    if let Some((v, g)) = &psr {
        total += config.psr_loss_weight * v;
        coord_grad = g * config.psr_loss_weight;
    }
    if let Some((v, g)) = &qa {
        total += config.qa_loss_weight * v;
        quality_grad = g * config.qa_loss_weight;
    }
    Ok(LossBreakdown {
        psr: psr.map(|p| p.0),
        qa: qa.map(|q| q.0),
        total,
        coord_grad,
        quality_grad,
    })
}

/// Loss on `graph` (which may be a corrupted copy of the example's graph)
/// and its exact gradient with respect to every parameter block.
pub fn backward(
    example: &TrainingExample,
    graph: &ComplexGraph,
    params: &Params,
    config: &EgrConfig,
) -> Result<(LossBreakdown, Params), TrainError> {
    config.check_graph(graph)?;
    let tape = Tape::new();
    let bound = params.map_named(|_, a| tape.param(a.clone()));
    let out = forward_with(&tape, &bound, graph, config);
    let loss = {
        let coords = tape.value(out.coords);
        let quality = tape.value(out.quality);
        total_loss(example, &coords, &quality, config)?
    };
    let coord_term = tape.scalar_fn(out.coords, 0.0, loss.coord_grad.clone());
    let quality_term = tape.scalar_fn(out.quality, loss.total, loss.quality_grad.clone());
    let root = tape.add(coord_term, quality_term);
    let grads = tape.backward(root);
    let grads = bound.map_named(|_, v| grads.get_or_zeros(*v, tape.shape(*v)));
    if let Some(block) = grads.first_non_finite() {
        return Err(TrainError::NonFiniteGradient(block));
    }
    Ok((loss, grads))
}

// ---------------------------------------------------------------------------
// Optimizer.

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Params,
    pub second_moment: Params,
    pub config: AdamWConfig,
}

impl OptimizerState {
    pub fn new(params: &Params, config: AdamWConfig) -> Self {
        Self {
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            config,
        }
    }
}

/// One bias-corrected AdamW update with decoupled weight decay.
pub fn adamw_step(params: &mut Params, grads: &Params, state: &mut OptimizerState) {
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let m_scale = 1.0 / (1.0 - c.beta1.powi(t));
    let v_scale = 1.0 / (1.0 - c.beta2.powi(t));
    let grads = grads.named();
    let blocks = params
        .named_mut()
        .into_iter()
        .zip(state.first_moment.named_mut())
        .zip(state.second_moment.named_mut())
        .zip(grads);
    for ((((_, theta), (_, m)), (_, v)), (_, g)) in blocks {
        ndarray::Zip::from(theta)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|theta, m, v, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m * m_scale;
                let v_hat = *v * v_scale;
                let old = *theta;
                *theta = old - c.learning_rate * m_hat / (v_hat.sqrt() + c.eps)
                    - c.learning_rate * c.weight_decay * old;
            });
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = grads
        .named()
        .iter()
        .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.named_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// Checkpoints: the weights container plus both moment sets.

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: EgrConfig,
    pub params: Params,
    pub optimizer: OptimizerState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerRecord {
    step: u64,
    adamw: AdamWConfig,
}

const FIRST_MOMENT: &str = "optimizer.first_moment.";
const SECOND_MOMENT: &str = "optimizer.second_moment.";

pub fn save_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut blocks = ckpt.params.named();
    let first: Vec<(String, &Array2<f64>)> = ckpt
        .optimizer
        .first_moment
        .named()
        .into_iter()
        .map(|(n, a)| (format!("{FIRST_MOMENT}{n}"), a))
        .collect();
    let second: Vec<(String, &Array2<f64>)> = ckpt
        .optimizer
        .second_moment
        .named()
        .into_iter()
        .map(|(n, a)| (format!("{SECOND_MOMENT}{n}"), a))
        .collect();
    blocks.extend(first);
    blocks.extend(second);
    let record = serde_json::to_value(OptimizerRecord {
        step: ckpt.optimizer.step,
        adamw: ckpt.optimizer.config,
    })
    .expect("record serializes");
    write_container(&ckpt.config, &blocks, Some(&record))
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint, TrainError> {
    let container = read_container(bytes)?;
    let record: OptimizerRecord = container
        .extra
        .clone()
        .ok_or_else(|| WeightsError::Header("no optimizer record".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| WeightsError::Header(e.to_string())))?;
    let params = params_from_blocks(&container.config, &container.blocks)?;
    let strip = |prefix: &str| -> Vec<(String, Array2<f64>)> {
        container
            .blocks
            .iter()
            .filter_map(|(n, a)| n.strip_prefix(prefix).map(|s| (s.to_string(), a.clone())))
            .collect()
    };
    let first = params_from_blocks(&container.config, &strip(FIRST_MOMENT))?;
    let second = params_from_blocks(&container.config, &strip(SECOND_MOMENT))?;
    Ok(Checkpoint {
        config: container.config,
        params,
        optimizer: OptimizerState {
            step: record.step,
            first_moment: first,
            second_moment: second,
            config: record.adamw,
        },
    })
}

// ---------------------------------------------------------------------------
// Training loop.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub model: EgrConfig,
    pub optimizer: AdamWConfig,
    pub max_epochs: usize,
    pub patience: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub clip_norm: f64,
    /// Off for the no-positional-corruption ablation.
    pub positional_corruption: bool,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            model: EgrConfig::default(),
            optimizer: AdamWConfig::default(),
            max_epochs: 1000,
            patience: 50,
            max_steps: None,
            clip_norm: 1.0,
            positional_corruption: true,
            seed: 0,
        }
    }
}

impl TrainOptions {
    pub fn effective_sigma(&self) -> f64 {
        if self.positional_corruption {
            self.model.noise_sigma
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmsd: f64,
    pub best: bool,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub best_val_rmsd: f64,
    pub log: Vec<EpochLog>,
    pub steps: usize,
}

/// Root-mean-square distance between predicted and native positions over
/// matched nodes, without superposition.
pub fn matched_rmsd(coords: &Array2<f64>, targets: &[(usize, Vec3)]) -> f64 {
    if targets.is_empty() {
        return f64::NAN;
    }
    let sum: f64 = targets
        .iter()
        .map(|&(node, t)| (0..3).map(|c| (coords[[node, c]] - t[c]).powi(2)).sum::<f64>())
        .sum();
    (sum / targets.len() as f64).sqrt()
}

/// Mean matched-atom RMSD of the model's refinement over `examples`
/// (examples without coordinate targets are skipped).
pub fn mean_refined_rmsd(examples: &[TrainingExample], params: &Params, config: &EgrConfig) -> f64 {
    let values: Vec<f64> = examples
        .par_iter()
        .filter(|e| !e.coord_targets.is_empty())
        .map(|e| {
            let out = forward_with(&Eager, params, &e.graph, config);
            matched_rmsd(&out.coords, &e.coord_targets)
        })
        .collect();
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Trains from `initial` (fresh parameters from the seed when `None`),
/// keeping the parameters with the lowest validation RMSD. An empty
/// validation set falls back to the training set.
pub fn train_loop(
    train: &[TrainingExample],
    validation: &[TrainingExample],
    options: &TrainOptions,
    initial: Option<Params>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let config = &options.model;
    config.validate()?;
    for e in train.iter().chain(validation) {
        config.check_graph(&e.graph)?;
    }
    let validation = if validation.is_empty() { train } else { validation };
    let sigma = options.effective_sigma();
    let mut master = ChaCha8Rng::seed_from_u64(options.seed);
    let mut params = initial.unwrap_or_else(|| init_params(config, master.random()));
    let mut optimizer = OptimizerState::new(&params, options.optimizer);

    let mut best: Option<(f64, usize, Params, OptimizerState)> = None;
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut steps = 0;

    'epochs: for epoch in 1..=options.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(master.random());
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut counted = 0usize;
        for &i in &order {
            if options.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let example = &train[i];
            let mut graph = example.graph.clone();
            if sigma > 0.0 {
                corrupt_coordinates(&mut graph, sigma, &mut rng);
            }
            let (loss, mut grads) = match backward(example, &graph, &params, config) {
                Ok(v) => v,
                Err(TrainError::SkipExample) => continue,
                Err(TrainError::NonFiniteGradient(_)) => {
                    return Err(divergence(epoch, f64::NAN, config, &params, &optimizer))
                }
                Err(e) => return Err(e),
            };
            if !loss.total.is_finite() {
                return Err(divergence(epoch, loss.total, config, &params, &optimizer));
            }
            clip_grad_norm(&mut grads, options.clip_norm);
            adamw_step(&mut params, &grads, &mut optimizer);
            if params.first_non_finite().is_some() {
                return Err(divergence(epoch, loss.total, config, &params, &optimizer));
            }
            loss_sum += loss.total;
            counted += 1;
            steps += 1;
        }

        let val_rmsd = mean_refined_rmsd(validation, &params, config);
        let improved = best.as_ref().is_none_or(|(b, ..)| val_rmsd < *b);
        if improved {
            best = Some((val_rmsd, epoch, params.clone(), optimizer.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let entry = EpochLog {
            epoch,
            train_loss: if counted > 0 { loss_sum / counted as f64 } else { f64::NAN },
            val_rmsd,
            best: improved,
            sigma,
        };
        on_epoch(&entry);
        log.push(entry);
        if since_best >= options.patience || options.max_steps.is_some_and(|m| steps >= m) {
            break 'epochs;
        }
    }

    let (best_val_rmsd, best_epoch, params, optimizer) = best.unwrap_or_else(|| {
        let v = mean_refined_rmsd(validation, &params, config);
        (v, 0, params, optimizer)
    });
    Ok(TrainOutcome {
        best: Checkpoint {
            config: config.clone(),
            params,
            optimizer,
        },
        best_epoch,
        best_val_rmsd,
        log,
        steps,
    })
}

fn divergence(
    epoch: usize,
    loss: f64,
    config: &EgrConfig,
    params: &Params,
    optimizer: &OptimizerState,
) -> TrainError {
    TrainError::Divergence {
        epoch,
        loss,
        last_good: Box::new(Checkpoint {
            config: config.clone(),
            params: params.clone(),
            optimizer: optimizer.clone(),
        }),
    }
}
