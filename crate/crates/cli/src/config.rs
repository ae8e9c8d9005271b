//! The JSON run configuration read by `egr train`.

use std::path::PathBuf;

use egr_core::featurize::{Granularity, GraphConfig, DEFAULT_K};
use egr_core::model::{Activation, EgrConfig, Normalization};
use egr_core::train::{AdamWConfig, TrainOptions};
use serde::{Deserialize, Serialize};

use crate::exit::{CmdResult, Failure, MISSING_INPUT, PARSE};

/// Every key is optional; unknown keys are rejected so a misspelled
/// ablation flag cannot be silently ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Weights to start from instead of a fresh initialization.
    pub model_path: Option<PathBuf>,
    pub granularity: Granularity,
    pub k: usize,
    pub noise_sigma: f64,
    pub psr_loss_weight: f64,
    pub qa_loss_weight: f64,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub activation: Activation,
    pub normalization: Normalization,
    pub attention_enabled: bool,
    pub window_size: usize,
    pub norm_constant: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub no_positional_corruption: bool,
    pub no_surface_proximity: bool,
    pub no_relative_geometric_features: bool,
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub out_weights: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = EgrConfig::default();
        let optimizer = AdamWConfig::default();
        let options = TrainOptions::default();
        Self {
            model_path: None,
            granularity: Granularity::AllAtom,
            k: DEFAULT_K,
            noise_sigma: model.noise_sigma,
            psr_loss_weight: model.psr_loss_weight,
            qa_loss_weight: model.qa_loss_weight,
            num_layers: model.num_layers,
            hidden_dim: model.hidden_dim,
            activation: model.activation,
            normalization: model.normalization,
            attention_enabled: model.attention_enabled,
            window_size: model.window_size,
            norm_constant: model.norm_constant,
            learning_rate: optimizer.learning_rate,
            weight_decay: optimizer.weight_decay,
            clip_norm: options.clip_norm,
            max_epochs: options.max_epochs,
            patience: options.patience,
            max_steps: None,
            seed: 0,
            no_positional_corruption: false,
            no_surface_proximity: false,
            no_relative_geometric_features: false,
            train_dir: None,
            val_dir: None,
            out_weights: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> CmdResult<Self> {
        serde_json::from_str(text).map_err(|e| Failure::new(PARSE, e).context("invalid run config"))
    }

    pub fn graph_config(&self) -> GraphConfig {
        GraphConfig {
            granularity: self.granularity,
            k: self.k,
            surface_proximity: !self.no_surface_proximity,
            geometric_features: !self.no_relative_geometric_features,
        }
    }

    /// Model settings with feature widths following the ablation flags.
    pub fn model_config(&self) -> EgrConfig {
        let graph = self.graph_config();
        EgrConfig {
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            node_feature_dim: graph.node_dim(),
            edge_feature_dim: graph.edge_dim(),
            qa_loss_weight: self.qa_loss_weight,
            psr_loss_weight: self.psr_loss_weight,
            activation: self.activation,
            normalization: self.normalization,
            attention_enabled: self.attention_enabled,
            window_size: self.window_size,
            norm_constant: self.norm_constant,
            noise_sigma: self.noise_sigma,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            model: self.model_config(),
            optimizer: AdamWConfig {
                learning_rate: self.learning_rate,
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            max_epochs: self.max_epochs,
            patience: self.patience,
            max_steps: self.max_steps,
            clip_norm: self.clip_norm,
            positional_corruption: !self.no_positional_corruption,
            seed: self.seed,
        }
    }

    /// Every input path the config names must exist.
    pub fn check_paths(&self) -> CmdResult {
        for path in [&self.model_path, &self.train_dir, &self.val_dir].into_iter().flatten() {
            if !path.exists() {
                return Err(Failure::msg(MISSING_INPUT, format!("{} does not exist", path.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        let model = RunConfig::default().model_config();
        assert_eq!(model, EgrConfig::default());
    }

    #[test]
    fn misspelled_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"no_surface_proximty": true}"#).unwrap_err();
        assert_eq!(err.code, PARSE);
    }

    #[test]
    fn ablations_shrink_feature_widths() {
        let nsp = RunConfig::from_json(r#"{"no_surface_proximity": true}"#).unwrap();
        assert_eq!(nsp.model_config().node_feature_dim, 38);
        let nrgf = RunConfig::from_json(r#"{"no_relative_geometric_features": true}"#).unwrap();
        assert_eq!(nrgf.model_config().edge_feature_dim, 3);
        let ca = RunConfig::from_json(r#"{"granularity": "c-alpha", "no_relative_geometric_features": true}"#).unwrap();
        assert_eq!((ca.model_config().node_feature_dim, ca.model_config().edge_feature_dim), (28, 2));
        let npc = RunConfig::from_json(r#"{"no_positional_corruption": true}"#).unwrap();
        assert_eq!(npc.train_options().effective_sigma(), 0.0);
    }
}
