use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use egr_core::featurize::GraphConfig;
use egr_core::metrics::{format_mean_std, quality_class, score_decoy, QualityClass, QualityReport};
use egr_core::model::{init_params, save_model, save_weights, EgrConfig, Params};
use egr_core::structio::{parse_pdb_file, write_pdb, ComplexStructure, Vec3};
use egr_core::synthetic::{helix_dimer, perturb};
use nalgebra::Rotation3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tempfile::TempDir;

fn egr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egr"))
        .args(args)
        .output()
        .expect("egr runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn save_pdb(path: &Path, s: &ComplexStructure) {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).unwrap();
    }
    fs::write(path, write_pdb(s, None).unwrap()).unwrap();
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn small_config() -> EgrConfig {
    EgrConfig {
        num_layers: 2,
        hidden_dim: 8,
        window_size: 32,
        ..EgrConfig::default()
    }
}

/// Fresh parameters with a non-zero coordinate head so refinement moves atoms.
fn active_params(config: &EgrConfig) -> Params {
    let mut params = init_params(config, 3);
    for layer in &mut params.layers {
        layer.coord_mlp.second.weight.fill(0.05);
    }
    params
}

fn complex(seed: u64, residues: usize) -> ComplexStructure {
    helix_dimer(residues, 9.5, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn zero_init_refinement_returns_the_input() {
    let dir = TempDir::new().unwrap();
    let (input, weights, output, report) = (
        dir.path().join("in.pdb"),
        dir.path().join("w.egrw"),
        dir.path().join("out.pdb"),
        dir.path().join("report.json"),
    );
    let s = perturb(&complex(1, 8), 0.4, &mut ChaCha8Rng::seed_from_u64(2));
    save_pdb(&input, &s);
    let config = small_config();
    fs::write(&weights, save_weights(&init_params(&config, 0), &config)).unwrap();
    let out = egr(&["refine", "--input", p(&input), "--weights", p(&weights), "--output", p(&output), "--report", p(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let original = parse_pdb_file(&input).unwrap();
    let refined = parse_pdb_file(&output).unwrap();
    assert_eq!(original, refined);

    let r = json(&report);
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["residues"].as_array().unwrap().len(), 16);
    let mean = r["mean_predicted_lddt"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mean));
}

#[test]
fn refinement_commutes_with_rigid_motion() {
    let dir = TempDir::new().unwrap();
    let weights = dir.path().join("w.egrw");
    let config = small_config();
    fs::write(&weights, save_model(&active_params(&config), &config, &GraphConfig::default())).unwrap();
    let s = perturb(&complex(4, 8), 0.4, &mut ChaCha8Rng::seed_from_u64(5));
    let rotation = Rotation3::from_euler_angles(0.7, -0.4, 2.1);
    let shift = Vec3::new(10.0, -4.0, 3.0);
    let moved = s.transformed(rotation.matrix(), &shift);

    let mut results = Vec::new();
    for (name, structure) in [("a", &s), ("b", &moved)] {
        let input = dir.path().join(format!("{name}.pdb"));
        let output = dir.path().join(format!("{name}_out.pdb"));
        let report = dir.path().join(format!("{name}.json"));
        save_pdb(&input, structure);
        let out = egr(&["refine", "--input", p(&input), "--weights", p(&weights), "--output", p(&output), "--report", p(&report)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let mean = json(&report)["mean_predicted_lddt"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&mean));
        results.push((parse_pdb_file(&input).unwrap(), parse_pdb_file(&output).unwrap(), mean));
    }
    let (ref in_a, ref out_a, q_a) = results[0];
    let (_, ref out_b, q_b) = results[1];
    let displacement: f64 = in_a.coords().iter().zip(out_a.coords()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    assert!(displacement > 0.01, "refinement should move atoms");
    // both inputs were rounded to PDB precision before refinement
    for (a, b) in out_a.coords().iter().zip(out_b.coords()) {
        assert!((rotation * a + shift - b).norm() < 5e-3);
    }
    assert!((q_a - q_b).abs() < 1e-3);
}

#[test]
fn iterations_feed_output_back_in() {
    let dir = TempDir::new().unwrap();
    let weights = dir.path().join("w.egrw");
    let config = small_config();
    fs::write(&weights, save_model(&active_params(&config), &config, &GraphConfig::default())).unwrap();
    let input = dir.path().join("in.pdb");
    save_pdb(&input, &complex(6, 6));
    let run = |iterations: &str, name: &str| {
        let output = dir.path().join(format!("{name}.pdb"));
        let report = dir.path().join(format!("{name}.json"));
        let out = egr(&["refine", "--input", p(&input), "--weights", p(&weights), "--output", p(&output), "--report", p(&report), "--iterations", iterations]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        (parse_pdb_file(&output).unwrap(), json(&report))
    };
    let (once, _) = run("1", "one");
    let (twice, report) = run("2", "two");
    assert_eq!(report["iterations"], 2);
    assert_ne!(once, twice);
}

#[test]
fn c_alpha_weights_write_c_alpha_models() {
    let dir = TempDir::new().unwrap();
    let weights = dir.path().join("w.egrw");
    let graph = GraphConfig::c_alpha();
    let config = EgrConfig {
        node_feature_dim: graph.node_dim(),
        edge_feature_dim: graph.edge_dim(),
        ..small_config()
    };
    fs::write(&weights, save_weights(&init_params(&config, 0), &config)).unwrap();
    let input = dir.path().join("in.pdb");
    save_pdb(&input, &complex(7, 5));
    let (output, report) = (dir.path().join("out.pdb"), dir.path().join("r.json"));
    let out = egr(&["refine", "--input", p(&input), "--weights", p(&weights), "--output", p(&output), "--report", p(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let refined = parse_pdb_file(&output).unwrap();
    assert_eq!(refined.atom_count(), 10);
    assert!(refined.atoms().all(|a| a.name == "CA"));
    assert_eq!(json(&report)["granularity"], "c-alpha");
}

#[test]
fn refine_error_codes() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("in.pdb");
    save_pdb(&input, &complex(8, 4));
    let (output, report) = (dir.path().join("out.pdb"), dir.path().join("r.json"));
    let run = |weights: &Path, input: &Path| {
        egr(&["refine", "--input", p(input), "--weights", p(weights), "--output", p(&output), "--report", p(&report)])
    };

    let odd = EgrConfig {
        node_feature_dim: 50,
        ..small_config()
    };
    let odd_weights = dir.path().join("odd.egrw");
    fs::write(&odd_weights, save_weights(&init_params(&odd, 0), &odd)).unwrap();
    assert_eq!(code(&run(&odd_weights, &input)), 3);

    let recorded = dir.path().join("recorded.egrw");
    fs::write(&recorded, save_model(&init_params(&small_config(), 0), &small_config(), &GraphConfig::c_alpha())).unwrap();
    assert_eq!(code(&run(&recorded, &input)), 3);

    let garbage = dir.path().join("garbage.egrw");
    fs::write(&garbage, b"not a weights file at all").unwrap();
    assert_eq!(code(&run(&garbage, &input)), 3);

    let good = dir.path().join("good.egrw");
    fs::write(&good, save_weights(&init_params(&small_config(), 0), &small_config())).unwrap();
    let bad_pdb = dir.path().join("bad.pdb");
    fs::write(&bad_pdb, "ATOM      1  CA  ALA A   1    not-a-number\n").unwrap();
    assert_eq!(code(&run(&good, &bad_pdb)), 2);
    assert_eq!(code(&run(&good, &dir.path().join("absent.pdb"))), 6);
    assert_eq!(code(&egr(&["refine", "--input", p(&input)])), 2);
}

#[test]
fn score_reports_perfect_and_failed_docking() {
    let dir = TempDir::new().unwrap();
    let native = complex(9, 10);
    let (native_path, decoy_path, report) = (dir.path().join("n.pdb"), dir.path().join("d.pdb"), dir.path().join("r.json"));
    save_pdb(&native_path, &native);

    let out = egr(&["score", "--decoy", p(&native_path), "--native", p(&native_path), "--report", p(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = json(&report);
    assert_eq!(r["schema_version"], 1);
    assert!((r["dockq"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(r["quality_class"], "high");
    assert_eq!(r["lddt_ca_global"], 1.0);

    let mut far = native.clone();
    for a in far.atoms_mut().filter(|a| a.chain_id == "B") {
        a.coord += Vec3::new(100.0, 0.0, 0.0);
    }
    save_pdb(&decoy_path, &far);
    let out = egr(&["score", "--decoy", p(&decoy_path), "--native", p(&native_path), "--report", p(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = json(&report);
    assert_eq!(r["fnat"], 0.0);
    assert_eq!(r["quality_class"], "incorrect");
}

#[test]
fn score_report_matches_the_library_exactly() {
    let dir = TempDir::new().unwrap();
    let native = complex(10, 10);
    let decoy = perturb(&native, 0.8, &mut ChaCha8Rng::seed_from_u64(11));
    let (native_path, decoy_path, report) = (dir.path().join("n.pdb"), dir.path().join("d.pdb"), dir.path().join("r.json"));
    save_pdb(&native_path, &native);
    save_pdb(&decoy_path, &decoy);
    let out = egr(&["score", "--decoy", p(&decoy_path), "--native", p(&native_path), "--report", p(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let from_cli: QualityReport = serde_json::from_value(json(&report)).unwrap();
    let direct = score_decoy(&parse_pdb_file(&decoy_path).unwrap(), &parse_pdb_file(&native_path).unwrap()).unwrap();
    assert_eq!(from_cli, direct);
    let recomputed = egr_core::metrics::dockq(from_cli.fnat, from_cli.lrmsd, from_cli.irmsd);
    assert_eq!(recomputed, from_cli.dockq);
}

#[test]
fn score_error_codes() {
    let dir = TempDir::new().unwrap();
    let native = complex(12, 6);
    let native_path = dir.path().join("n.pdb");
    save_pdb(&native_path, &native);
    let report = dir.path().join("r.json");

    let mut renamed = native.clone();
    for chain in &mut renamed.chains {
        chain.id = if chain.id == "A" { "X".into() } else { "Y".into() };
        for a in chain.residues.iter_mut().flat_map(|r| r.atoms.iter_mut()) {
            a.chain_id = chain.id.clone();
        }
    }
    let renamed_path = dir.path().join("renamed.pdb");
    save_pdb(&renamed_path, &renamed);
    let out = egr(&["score", "--decoy", p(&renamed_path), "--native", p(&native_path), "--report", p(&report)]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));

    let mut single = native.clone();
    single.chains.truncate(1);
    let single_path = dir.path().join("single.pdb");
    save_pdb(&single_path, &single);
    let out = egr(&["score", "--decoy", p(&single_path), "--native", p(&single_path), "--report", p(&report)]);
    assert_eq!(code(&out), 5, "{}", stderr(&out));
}

/// One target of twelve decoys with increasing noise, scored in order of
/// increasing noise.
fn evaluation_fixture(dir: &Path) -> (PathBuf, PathBuf, PathBuf, Vec<f64>) {
    let natives = dir.join("natives");
    let decoys = dir.join("decoys");
    let native = complex(13, 10);
    save_pdb(&natives.join("t1.pdb"), &native);
    let native = parse_pdb_file(natives.join("t1.pdb")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut csv = String::from("target,decoy,predicted_score\n");
    let mut true_dockq = Vec::new();
    for i in 0..12 {
        let mut decoy = perturb(&native, 0.3 * i as f64, &mut rng);
        for a in decoy.atoms_mut().filter(|a| a.chain_id == "B") {
            a.coord += Vec3::new(0.0, 0.0, 1.5 * i as f64);
        }
        let path = decoys.join("t1").join(format!("d{i:02}.pdb"));
        save_pdb(&path, &decoy);
        true_dockq.push(score_decoy(&parse_pdb_file(&path).unwrap(), &native).unwrap().dockq);
        csv.push_str(&format!("t1,d{i:02},{}\n", 1.0 - i as f64 / 12.0));
    }
    let scores = dir.join("scores.csv");
    fs::write(&scores, csv).unwrap();
    (scores, natives, decoys, true_dockq)
}

#[test]
fn evaluate_counts_hits_among_the_top_ranked() {
    let dir = TempDir::new().unwrap();
    let (scores, natives, decoys, true_dockq) = evaluation_fixture(dir.path());
    let summary = dir.path().join("summary.json");
    let out = egr(&["evaluate", "--scores", p(&scores), "--natives", p(&natives), "--decoys", p(&decoys), "--summary", p(&summary), "--workers", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let s = json(&summary);

    let classes: Vec<QualityClass> = true_dockq[..10].iter().map(|&d| quality_class(d)).collect();
    let acceptable = classes.iter().filter(|&&c| c >= QualityClass::Acceptable).count();
    let medium = classes.iter().filter(|&&c| c >= QualityClass::Medium).count();
    let high = classes.iter().filter(|&&c| c == QualityClass::High).count();
    assert!(high > 0 && acceptable < 10, "fixture should mix classes: {classes:?}");
    let target = &s["per_target"][0];
    assert_eq!(target["hits"], format!("{acceptable}/{medium}/{high}"));
    assert_eq!(target["top_decoy"], "d00");
    assert_eq!(target["ranking_loss"].as_f64().unwrap(), 1.0 - true_dockq[0]);
    assert_eq!(s["summary"]["hits"], "1/1/1");
    assert_eq!(s["summary"]["ranking_loss"], format_mean_std(&[1.0 - true_dockq[0]]));

    let top3 = dir.path().join("top3.json");
    let out = egr(&["evaluate", "--scores", p(&scores), "--natives", p(&natives), "--decoys", p(&decoys), "--summary", p(&top3), "--top-n", "3"]);
    assert_eq!(code(&out), 0);
    let top3_hits: usize = true_dockq[..3].iter().filter(|&&d| quality_class(d) >= QualityClass::Acceptable).count();
    assert_eq!(json(&top3)["per_target"][0]["hit_counts"]["acceptable"], top3_hits);
}

#[test]
fn evaluate_is_independent_of_worker_count() {
    let dir = TempDir::new().unwrap();
    let (scores, natives, decoys, _) = evaluation_fixture(dir.path());
    let mut outputs = Vec::new();
    for workers in ["1", "3"] {
        let summary = dir.path().join(format!("s{workers}.json"));
        let out = egr(&["evaluate", "--scores", p(&scores), "--natives", p(&natives), "--decoys", p(&decoys), "--summary", p(&summary), "--workers", workers]);
        assert_eq!(code(&out), 0);
        outputs.push(fs::read(&summary).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn evaluate_error_codes() {
    let dir = TempDir::new().unwrap();
    let (scores, natives, decoys, _) = evaluation_fixture(dir.path());
    let summary = dir.path().join("summary.json");

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "target,decoy,predicted_score\n").unwrap();
    let out = egr(&["evaluate", "--scores", p(&empty), "--natives", p(&natives), "--decoys", p(&decoys), "--summary", p(&summary)]);
    assert_eq!(code(&out), 6);
    assert!(stderr(&out).contains("no targets"));

    let missing = dir.path().join("missing.csv");
    fs::write(&missing, "target,decoy,predicted_score\nt1,d99,0.5\n").unwrap();
    let out = egr(&["evaluate", "--scores", p(&missing), "--natives", p(&natives), "--decoys", p(&decoys), "--summary", p(&summary)]);
    assert_eq!(code(&out), 6);

    let malformed = dir.path().join("malformed.csv");
    fs::write(&malformed, "target,decoy,predicted_score\nt1,d00,high\n").unwrap();
    let out = egr(&["evaluate", "--scores", p(&malformed), "--natives", p(&natives), "--decoys", p(&decoys), "--summary", p(&summary)]);
    assert_eq!(code(&out), 2);
    assert!(!summary.exists());
    let _ = scores;
}

fn training_set(dir: &Path, count: usize) -> PathBuf {
    let train = dir.join("train");
    fs::create_dir_all(&train).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for i in 0..count {
        let native = helix_dimer(5, 9.5, &mut rng);
        let decoy = perturb(&native, 0.5, &mut rng);
        save_pdb(&train.join(format!("ex{i}_native.pdb")), &native);
        save_pdb(&train.join(format!("ex{i}_decoy.pdb")), &decoy);
    }
    train
}

const TOY_CONFIG: &str = r#"{
    "num_layers": 2, "hidden_dim": 8, "window_size": 32,
    "learning_rate": 0.01, "max_epochs": 40, "seed": 3
}"#;

fn log_lines(weights: &Path) -> Vec<Value> {
    let log = weights.with_file_name(format!("{}.log.jsonl", weights.file_name().unwrap().to_str().unwrap()));
    fs::read_to_string(log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn training_lowers_rmsd_on_the_training_trio_deterministically() {
    let dir = TempDir::new().unwrap();
    let train = training_set(dir.path(), 3);
    let config = dir.path().join("run.json");
    fs::write(&config, TOY_CONFIG).unwrap();
    let mut weights_bytes = Vec::new();
    for name in ["a.egrw", "b.egrw"] {
        let weights = dir.path().join(name);
        let out = egr(&["train", "--config", p(&config), "--train-dir", p(&train), "--val-dir", p(&train), "--out-weights", p(&weights)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        weights_bytes.push(fs::read(&weights).unwrap());
        let log = log_lines(&weights);
        assert_eq!(log.len(), 40);
        assert!(log.iter().all(|e| e["sigma"] == 0.1));
    }
    assert_eq!(weights_bytes[0], weights_bytes[1]);

    // refinement with the trained weights beats the unrefined decoys
    let weights = dir.path().join("a.egrw");
    let mut before = 0.0;
    let mut after = 0.0;
    for i in 0..3 {
        let decoy = train.join(format!("ex{i}_decoy.pdb"));
        let native = parse_pdb_file(train.join(format!("ex{i}_native.pdb"))).unwrap();
        let (output, report) = (dir.path().join(format!("r{i}.pdb")), dir.path().join(format!("r{i}.json")));
        let out = egr(&["refine", "--input", p(&decoy), "--weights", p(&weights), "--output", p(&output), "--report", p(&report)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let example = egr_core::train::build_example(
            "t",
            "d",
            &parse_pdb_file(&decoy).unwrap(),
            &native,
            &GraphConfig::default(),
            None,
        )
        .unwrap();
        let refined = parse_pdb_file(&output).unwrap();
        let refined_xyz = egr_core::featurize::coords_to_array(&refined.coords());
        before += egr_core::train::matched_rmsd(&example.graph.coords, &example.coord_targets);
        after += egr_core::train::matched_rmsd(&refined_xyz, &example.coord_targets);
    }
    assert!(after < before, "{after} vs {before}");
}

#[test]
fn positional_corruption_flag_reaches_the_log() {
    let dir = TempDir::new().unwrap();
    let train = training_set(dir.path(), 1);
    let config = dir.path().join("run.json");
    fs::write(&config, r#"{"num_layers": 1, "hidden_dim": 4, "max_epochs": 2, "no_positional_corruption": true}"#).unwrap();
    let weights = dir.path().join("w.egrw");
    let out = egr(&["train", "--config", p(&config), "--train-dir", p(&train), "--val-dir", p(&train), "--out-weights", p(&weights)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(log_lines(&weights).iter().all(|e| e["sigma"] == 0.0));
}

#[test]
fn train_error_codes() {
    let dir = TempDir::new().unwrap();
    let weights = dir.path().join("w.egrw");
    let config = dir.path().join("run.json");
    fs::write(&config, r#"{"num_layers": 1, "hidden_dim": 4, "max_epochs": 2}"#).unwrap();

    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = egr(&["train", "--config", p(&config), "--train-dir", p(&empty), "--val-dir", p(&empty), "--out-weights", p(&weights)]);
    assert_eq!(code(&out), 8, "{}", stderr(&out));

    let train = training_set(dir.path(), 1);
    let typo = dir.path().join("typo.json");
    fs::write(&typo, r#"{"no_positional_corupption": true}"#).unwrap();
    let out = egr(&["train", "--config", p(&typo), "--train-dir", p(&train), "--val-dir", p(&train), "--out-weights", p(&weights)]);
    assert_eq!(code(&out), 2);

    let out = egr(&["train", "--config", p(&config), "--train-dir", p(&dir.path().join("nowhere")), "--val-dir", p(&train), "--out-weights", p(&weights)]);
    assert_eq!(code(&out), 6);

    // starting weights that already hold an infinity diverge on the first step
    let model = EgrConfig {
        num_layers: 1,
        hidden_dim: 4,
        ..EgrConfig::default()
    };
    let mut params = init_params(&model, 0);
    params.layers[0].node_mlp.first.weight[[0, 0]] = f64::INFINITY;
    let start = dir.path().join("start.egrw");
    fs::write(&start, save_weights(&params, &model)).unwrap();
    let diverging = dir.path().join("diverging.json");
    fs::write(
        &diverging,
        format!(r#"{{"num_layers": 1, "hidden_dim": 4, "max_epochs": 2, "model_path": {:?}}}"#, p(&start)),
    )
    .unwrap();
    let out = egr(&["train", "--config", p(&diverging), "--train-dir", p(&train), "--val-dir", p(&train), "--out-weights", p(&weights)]);
    assert_eq!(code(&out), 7, "{}", stderr(&out));
    assert!(dir.path().join("w.egrw.last-good").exists());
}
