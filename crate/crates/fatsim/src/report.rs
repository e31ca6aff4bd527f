//! Experiment orchestration and artifact emission.
//!
//! A run writes `manifest.json`, `metrics.csv` (one row per round),
//! `weights.csv` (per-round similarities and aggregation weights in long
//! form) and optionally a final checkpoint and an SVCCA drift report. CSV
//! reals carry 17 significant digits so 64-bit values round-trip; rerunning
//! the same resolved config reproduces the CSV files byte for byte.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::analysis;
use crate::checkpoint::save_checkpoint;
use crate::config::ResolvedConfig;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::federation::{self, RoundRecord};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

/// Stable metrics.csv header; columns never reorder within a major version.
pub const METRICS_HEADER: &str = "round,train_loss,accuracy,robust_accuracy,lr";
pub const WEIGHTS_HEADER: &str = "round,client,similarity,weight";
pub const SVCCA_HEADER: &str = "layer,pair,mean_correlation,retained_a,retained_b";

/// Decimal rendering with 17 significant digits ('.' separator), enough to
/// reconstruct the exact 64-bit value.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct RunArtifacts {
    pub records: Vec<RoundRecord>,
    pub final_params: ParameterSet,
    pub train: Dataset,
    pub test: Dataset,
}

/// Materialize the train/test datasets named by the config.
///
/// Blob train and test splits share class centers: one pool per class is
/// generated and split by index, so held-out samples come from the same
/// distribution.
pub fn load_data(cfg: &ResolvedConfig) -> Result<(Dataset, Dataset)> {
    match cfg.data.source.as_str() {
        "blobs" => {
            let per_class = cfg.data.samples_per_class + cfg.data.test_samples_per_class;
            let pool = data::generate_blobs(
                cfg.model.num_classes,
                (cfg.model.image_h, cfg.model.image_w, cfg.model.channels),
                per_class,
                cfg.data.spread,
                cfg.partition.seed,
            )?;
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (i, ex) in pool.examples.iter().enumerate() {
                if i % per_class < cfg.data.samples_per_class {
                    train.push(ex.clone());
                } else {
                    test.push(ex.clone());
                }
            }
            Ok((
                Dataset {
                    examples: train,
                    num_classes: pool.num_classes,
                },
                Dataset {
                    examples: test,
                    num_classes: pool.num_classes,
                },
            ))
        }
        "idx" => {
            let train = data::load_idx(
                cfg.data.train_images.as_ref().unwrap(),
                cfg.data.train_labels.as_ref().unwrap(),
            )?;
            let test = data::load_idx(
                cfg.data.test_images.as_ref().unwrap(),
                cfg.data.test_labels.as_ref().unwrap(),
            )?;
            Ok((train, test))
        }
        other => Err(Error::Config(format!("unknown data source {other:?}"))),
    }
}

/// Execute the federated run described by `cfg` and write all artifacts
/// into `out_dir` (created if missing).
pub fn run_experiment(cfg: &ResolvedConfig, out_dir: &Path) -> Result<RunArtifacts> {
    fs::create_dir_all(out_dir)?;
    let started = unix_ms();
    let (train, test) = load_data(cfg)?;
    let shards = data::partition(&train, cfg.fed.clients, &cfg.partition)?;
    let (records, final_params) =
        federation::run_federation(&cfg.fed, &cfg.model, shards, &test)?;
    let finished = unix_ms();

    write_metrics_csv(&records, &out_dir.join("metrics.csv"))?;
    write_weights_csv(&records, &out_dir.join("weights.csv"))?;
    if cfg.output.checkpoint {
        save_checkpoint(&final_params, &out_dir.join("final.fatc"))?;
    }
    if cfg.output.svcca {
        write_svcca_csv(cfg, &final_params, &train, &test, &out_dir.join("svcca.csv"))?;
    }
    write_manifest(cfg, &records, started, finished, &out_dir.join("manifest.json"))?;
    Ok(RunArtifacts {
        records,
        final_params,
        train,
        test,
    })
}

fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub fn write_metrics_csv(records: &[RoundRecord], path: &Path) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.round,
            fmt_real(r.train_loss),
            fmt_real(r.accuracy),
            fmt_real(r.robust_accuracy),
            fmt_real(r.lr),
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_weights_csv(records: &[RoundRecord], path: &Path) -> Result<()> {
    let mut out = String::from(WEIGHTS_HEADER);
    out.push('\n');
    for r in records {
        for ((&client, &sim), &w) in r
            .participants
            .iter()
            .zip(&r.similarities)
            .zip(&r.weights)
        {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.round,
                client,
                fmt_real(sim),
                fmt_real(w),
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Final-round drift pairs: the global model against two clients retrained
/// one more local pass from it, and those clients against each other.
fn write_svcca_csv(
    cfg: &ResolvedConfig,
    final_params: &ParameterSet,
    train: &Dataset,
    test: &Dataset,
    path: &Path,
) -> Result<()> {
    let shards = data::partition(train, cfg.fed.clients, &cfg.partition)?;
    let a_id = 0usize;
    let b_id = (cfg.fed.clients - 1).min(3);
    let probe_round = cfg.fed.rounds as usize + 1;
    let mut locals = Vec::new();
    for id in [a_id, b_id] {
        let out = federation::client_update(
            id,
            probe_round,
            final_params,
            &cfg.model,
            &cfg.fed,
            &shards[id],
            cfg.fed.lr,
            None,
            0.0,
        )?;
        locals.push(out.params);
    }
    let samples: Vec<(Tensor, usize)> = test.examples.iter().take(128).cloned().collect();
    let layers = cfg
        .output
        .svcca_layers
        .clone()
        .unwrap_or_else(|| vec![0, cfg.model.depth - 1]);
    let mut out = String::from(SVCCA_HEADER);
    out.push('\n');
    for &layer in &layers {
        let server = analysis::collect_activations(&cfg.model, final_params, &samples, layer)?;
        let ca = analysis::collect_activations(&cfg.model, &locals[0], &samples, layer)?;
        let cb = analysis::collect_activations(&cfg.model, &locals[1], &samples, layer)?;
        for (label, x, y) in [
            (format!("server-vs-client{a_id}"), &server, &ca),
            (format!("server-vs-client{b_id}"), &server, &cb),
            (format!("client{a_id}-vs-client{b_id}"), &ca, &cb),
        ] {
            let rep = analysis::svcca(x, y, 0.99)?;
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                layer,
                label,
                fmt_real(rep.mean_correlation),
                rep.retained_a,
                rep.retained_b,
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_manifest(
    cfg: &ResolvedConfig,
    records: &[RoundRecord],
    started_ms: u128,
    finished_ms: u128,
    path: &Path,
) -> Result<()> {
    let last = records.last();
    let manifest = serde_json::json!({
        "software_version": env!("CARGO_PKG_VERSION"),
        "metrics_schema": 1,
        "config": cfg,
        "seed": cfg.fed.seed,
        "started_unix_ms": started_ms as u64,
        "finished_unix_ms": finished_ms as u64,
        "gradient_clipping": "none",
        "eval_attack": "training AttackConfig reused for robust-accuracy evaluation",
        "summary": {
            "rounds": records.len(),
            "final_train_loss": last.map(|r| r.train_loss),
            "final_accuracy": last.map(|r| r.accuracy),
            "final_robust_accuracy": last.map(|r| r.robust_accuracy),
            "total_wall_ms": records.iter().map(|r| r.wall_ms).sum::<f64>(),
        },
    });
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}
