use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use egr_core::featurize::{build_knn_graph, array_to_coords, Granularity, GraphConfig};
use egr_core::metrics::{
    format_mean_std, hit_rate, mean_std, ranking_loss, score_decoy, HitCounts, QualityReport,
    RankedDecoy, RankingInput,
};
use egr_core::model::{load_model, refine_iteratively, save_model};
use egr_core::structio::{parse_pdb_file, write_pdb, ComplexStructure};
use egr_core::train::{load_examples, train_loop, TrainError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::exit::{CmdResult, Failure, MISSING_INPUT, PARSE, WEIGHTS_MISMATCH};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn read(path: &Path) -> CmdResult<Vec<u8>> {
    fs::read(path).map_err(|e| Failure::from(e).context(path.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, bytes).map_err(|e| Failure::from(e).context(path.display()))
}

fn load_structure(path: &Path) -> CmdResult<ComplexStructure> {
    if !path.exists() {
        return Err(Failure::msg(MISSING_INPUT, format!("{} does not exist", path.display())));
    }
    parse_pdb_file(path).map_err(|e| Failure::from(e).context(path.display()))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

// ---------------------------------------------------------------------------
// refine

#[derive(Debug, Serialize, Deserialize)]
pub struct ResidueQuality {
    pub chain: String,
    pub residue_index: i32,
    pub residue_name: String,
    pub predicted_lddt: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RefineReport {
    pub schema_version: u32,
    pub granularity: Granularity,
    pub iterations: usize,
    pub residues: Vec<ResidueQuality>,
    pub mean_predicted_lddt: f64,
}

pub fn refine(input: &Path, weights: &Path, output: &Path, report: &Path, iterations: usize) -> CmdResult {
    if iterations == 0 {
        return Err(Failure::msg(PARSE, "--iterations must be at least 1"));
    }
    let (params, config, recorded) = load_model(&read(weights)?)
        .map_err(|e| Failure::from(e).context(weights.display()))?;
    let graph_config = match recorded {
        Some(g) => g,
        None => GraphConfig::from_widths(config.node_feature_dim, config.edge_feature_dim).ok_or_else(|| {
            Failure::msg(
                WEIGHTS_MISMATCH,
                format!(
                    "weights expect {} node and {} edge channels, which no graph configuration produces",
                    config.node_feature_dim, config.edge_feature_dim
                ),
            )
        })?,
    };
    let structure = load_structure(input)?;
    let graph = build_knn_graph(&structure, &graph_config, None)?;
    let result = refine_iteratively(&graph, &params, &config, iterations)?;

    let mut coords = structure.coords();
    for (node, p) in array_to_coords(&result.refined_coords).into_iter().enumerate() {
        coords[graph.atom_of_node[node]] = p;
    }
    let mut refined = structure.clone();
    refined.set_coords(&coords)?;
    if graph_config.granularity == Granularity::CAlpha {
        for residue in refined.chains.iter_mut().flat_map(|c| c.residues.iter_mut()) {
            residue.atoms.retain(|a| a.name == "CA");
        }
    }
    write(output, write_pdb(&refined, None)?)?;

    let residues_flat: Vec<_> = structure.residues().collect();
    let residues: Vec<ResidueQuality> = result
        .ca_nodes
        .iter()
        .zip(&result.quality)
        .map(|(&node, &q)| {
            let (chain, residue) = residues_flat[graph.residue_of_node[node]];
            ResidueQuality {
                chain: chain.id.clone(),
                residue_index: residue.index,
                residue_name: residue.name.clone(),
                predicted_lddt: q,
            }
        })
        .collect();
    let mean = if residues.is_empty() {
        f64::NAN
    } else {
        result.quality.iter().sum::<f64>() / result.quality.len() as f64
    };
    let report_value = RefineReport {
        schema_version: REPORT_SCHEMA_VERSION,
        granularity: graph_config.granularity,
        iterations,
        residues,
        mean_predicted_lddt: mean,
    };
    write(report, to_json(&report_value))
}

// ---------------------------------------------------------------------------
// score

pub fn score(decoy: &Path, native: &Path, report: &Path) -> CmdResult {
    let d = load_structure(decoy)?;
    let n = load_structure(native)?;
    let r: QualityReport = score_decoy(&d, &n)?;
    write(report, to_json(&r))
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Debug, Deserialize)]
struct ScoreRow {
    target: String,
    decoy: String,
    predicted_score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TargetSummary {
    pub target: String,
    pub decoys: usize,
    pub hits: String,
    pub hit_counts: HitCounts,
    pub top_decoy: String,
    pub ranking_loss: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OverallSummary {
    pub targets: usize,
    /// Targets with at least one acceptable / medium / high hit.
    pub hits: String,
    pub hit_counts: HitCounts,
    pub ranking_loss: String,
    pub ranking_loss_mean: f64,
    pub ranking_loss_std: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub schema_version: u32,
    pub top_n: usize,
    pub per_target: Vec<TargetSummary>,
    pub summary: OverallSummary,
}

/// Decoys are read from `decoys/<target>/<decoy>.pdb`, natives from
/// `natives/<target>.pdb`.
pub fn evaluate(
    scores: &Path,
    natives: &Path,
    decoys: &Path,
    top_n: usize,
    summary: &Path,
    workers: Option<usize>,
) -> CmdResult {
    if !scores.exists() {
        return Err(Failure::msg(MISSING_INPUT, format!("{} does not exist", scores.display())));
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(scores)
        .map_err(|e| Failure::new(PARSE, e).context(scores.display()))?;
    let mut by_target: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
    for row in reader.deserialize::<ScoreRow>() {
        let row = row.map_err(|e| Failure::new(PARSE, e).context(scores.display()))?;
        by_target.entry(row.target).or_default().push((row.decoy, row.predicted_score));
    }
    if by_target.is_empty() {
        return Err(Failure::msg(MISSING_INPUT, format!("no targets in {}", scores.display())));
    }

    let mut jobs: Vec<(String, String, PathBuf, PathBuf)> = Vec::new();
    for (target, rows) in &by_target {
        let native_path = natives.join(format!("{target}.pdb"));
        for (decoy, _) in rows {
            let decoy_path = decoys.join(target).join(format!("{decoy}.pdb"));
            for p in [&native_path, &decoy_path] {
                if !p.is_file() {
                    return Err(Failure::msg(MISSING_INPUT, format!("{} does not exist", p.display())));
                }
            }
            jobs.push((target.clone(), decoy.clone(), native_path.clone(), decoy_path));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Failure::new(crate::exit::GENERAL, e))?;
    let dockq: Vec<CmdResult<f64>> = pool.install(|| {
        jobs.par_iter()
            .map(|(target, decoy, native_path, decoy_path)| {
                let n = load_structure(native_path)?;
                let d = load_structure(decoy_path)?;
                score_decoy(&d, &n)
                    .map(|r| r.dockq)
                    .map_err(|e| Failure::from(e).context(format!("{target}/{decoy}")))
            })
            .collect()
    });
    let mut dockq = dockq.into_iter();

    let mut inputs = Vec::new();
    for (target, rows) in &by_target {
        let mut ranked = Vec::new();
        for (decoy, score) in rows {
            ranked.push(RankedDecoy {
                decoy_id: decoy.clone(),
                predicted_score: *score,
                true_dockq: dockq.next().expect("one result per job")?,
            });
        }
        inputs.push(RankingInput {
            target_id: target.clone(),
            decoys: ranked,
        });
    }

    let hits = hit_rate(&inputs, top_n);
    let losses: Vec<f64> = inputs.iter().map(ranking_loss).collect();
    let per_target = inputs
        .iter()
        .zip(&hits.per_target)
        .zip(&losses)
        .map(|((input, (_, h)), &loss)| TargetSummary {
            target: input.target_id.clone(),
            decoys: input.decoys.len(),
            hits: h.to_string(),
            hit_counts: *h,
            top_decoy: input.ranked()[0].decoy_id.clone(),
            ranking_loss: loss,
        })
        .collect();
    let (mean, std) = mean_std(&losses);
    let out = EvaluationSummary {
        schema_version: REPORT_SCHEMA_VERSION,
        top_n,
        per_target,
        summary: OverallSummary {
            targets: inputs.len(),
            hits: hits.summary.to_string(),
            hit_counts: hits.summary,
            ranking_loss: format_mean_std(&losses),
            ranking_loss_mean: mean,
            ranking_loss_std: std,
        },
    };
    write(summary, to_json(&out))
}

// ---------------------------------------------------------------------------
// train

/// Path of the epoch log written next to the weights.
pub fn log_path(weights: &Path) -> PathBuf {
    let mut name = weights.file_name().unwrap_or_default().to_os_string();
    name.push(".log.jsonl");
    weights.with_file_name(name)
}

pub fn train(
    config_path: &Path,
    train_dir: Option<&Path>,
    val_dir: Option<&Path>,
    out_weights: Option<&Path>,
) -> CmdResult {
    let text = fs::read_to_string(config_path).map_err(|e| Failure::from(e).context(config_path.display()))?;
    let mut run = RunConfig::from_json(&text)?;
    if let Some(p) = train_dir {
        run.train_dir = Some(p.to_path_buf());
    }
    if let Some(p) = val_dir {
        run.val_dir = Some(p.to_path_buf());
    }
    if let Some(p) = out_weights {
        run.out_weights = Some(p.to_path_buf());
    }
    run.check_paths()?;
    let train_dir = run
        .train_dir
        .clone()
        .ok_or_else(|| Failure::msg(PARSE, "no training directory given"))?;
    let out = run
        .out_weights
        .clone()
        .ok_or_else(|| Failure::msg(PARSE, "no output weights path given"))?;

    let graph_config = run.graph_config();
    let options = run.train_options();
    let train_set = load_examples(&train_dir, &graph_config)?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset.into());
    }
    let val_set = match &run.val_dir {
        Some(dir) => load_examples(dir, &graph_config)?,
        None => Vec::new(),
    };
    let initial = match &run.model_path {
        Some(path) => {
            let (params, config, _) = load_model(&read(path)?).map_err(|e| Failure::from(e).context(path.display()))?;
            if (config.node_feature_dim, config.edge_feature_dim, config.num_layers, config.hidden_dim)
                != (options.model.node_feature_dim, options.model.edge_feature_dim, options.model.num_layers, options.model.hidden_dim)
            {
                return Err(Failure::msg(WEIGHTS_MISMATCH, format!("{} does not match the run config", path.display())));
            }
            Some(params)
        }
        None => None,
    };
    eprintln!(
        "training on {} examples, validating on {}",
        train_set.len(),
        if val_set.is_empty() { train_set.len() } else { val_set.len() }
    );

    let mut log = String::new();
    let result = train_loop(&train_set, &val_set, &options, initial, |entry| {
        let line = serde_json::to_string(entry).expect("log entry serializes");
        eprintln!("{line}");
        log.push_str(&line);
        log.push('\n');
    });
    write(&log_path(&out), &log)?;
    match result {
        Ok(outcome) => {
            write(&out, save_model(&outcome.best.params, &outcome.best.config, &graph_config))?;
            eprintln!(
                "best validation RMSD {:.4} at epoch {}",
                outcome.best_val_rmsd, outcome.best_epoch
            );
            Ok(())
        }
        Err(e) => {
            if let TrainError::Divergence { last_good, .. } = &e {
                let mut name = out.file_name().unwrap_or_default().to_os_string();
                name.push(".last-good");
                let rescue = out.with_file_name(name);
                write(&rescue, save_model(&last_good.params, &last_good.config, &graph_config))?;
                return Err(Failure::from(e).context(format!("last good weights saved to {}", rescue.display())));
            }
            Err(e.into())
        }
    }
}
