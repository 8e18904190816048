//! The pipeline phases behind the CLI subcommands.

use std::path::Path;

use serde::{Deserialize, Serialize};

use dfbf_core::data::{generate_shapes_dataset, read_cifar10_binary, LabeledDataset};
use dfbf_core::distill::{finetune, DistillConfig, TapSelection};
use dfbf_core::error::{Error, Result};
use dfbf_core::graph::{load_checkpoint, save_checkpoint, NetworkGraph};
use dfbf_core::hash::{per_tensor_hashes, tensor_map_hash};
use dfbf_core::prune::{apply_prune, plan_prune, report, PruneReport};
use dfbf_core::rng::derive_seed;
use dfbf_core::synth::{generate_dataset, read_dfds, write_dfds, SynthDataset};
use dfbf_core::train::{evaluate, train_supervised, EvalResult};

use crate::config::{DataConfig, RunConfig};
use crate::metrics::MetricsWriter;
use crate::rundir::RunDir;

pub fn load_data(cfg: &RunConfig) -> Result<(LabeledDataset<f32>, LabeledDataset<f32>)> {
    match &cfg.data {
        DataConfig::Shapes { train_per_class, test_per_class, classes, size } => {
            let train = generate_shapes_dataset(
                derive_seed(cfg.seed, "shapes-train"),
                *train_per_class,
                *classes,
                *size,
                "train",
            )?;
            let test = generate_shapes_dataset(
                derive_seed(cfg.seed, "shapes-test"),
                *test_per_class,
                *classes,
                *size,
                "test",
            )?;
            Ok((train, test))
        }
        DataConfig::Cifar10 { dir } => read_cifar10_binary(Path::new(dir)),
    }
}

/// Baseline supervised training; writes the checkpoint and reports test
/// accuracy.
pub fn cmd_train(cfg: &RunConfig, out_checkpoint: &Path, metrics: Option<&mut MetricsWriter>) -> Result<f64> {
    let (train, test) = load_data(cfg)?;
    let mut graph = cfg.model.build(cfg.seed)?;
    let stats = train_supervised(&mut graph, &train, &cfg.train)?;
    if let Some(metrics) = metrics {
        for s in &stats {
            metrics.record("train", "epoch_loss", s.mean_loss)?;
        }
    }
    let result = evaluate(&graph, &test, cfg.eval.batch_size)?;
    save_checkpoint(&graph, out_checkpoint)?;
    println!("baseline test accuracy: {:.4}", result.accuracy);
    Ok(result.accuracy)
}

/// Plan and apply pruning; returns the report.
pub fn cmd_prune(
    cfg: &RunConfig,
    checkpoint: &Path,
    out_checkpoint: &Path,
    plan_out: Option<&Path>,
) -> Result<PruneReport> {
    let graph: NetworkGraph<f32> = load_checkpoint(checkpoint)?;
    let plan = plan_prune(&graph, cfg.prune.ratio, cfg.prune.strategy, cfg.prune.mode)?;
    let pruned = apply_prune(&graph, &plan)?;
    let rep = report(&graph, &pruned)?;
    save_checkpoint(&pruned, out_checkpoint)?;
    if let Some(plan_out) = plan_out {
        std::fs::write(plan_out, serde_json::to_string_pretty(&plan)?)?;
    }
    println!(
        "pruned: removed {:.2}% filters, {:.2}% backbone parameters",
        rep.removed_filters_pct, rep.removed_params_pct
    );
    Ok(rep)
}

/// Synthesize the label-free dataset from a frozen teacher.
pub fn cmd_synthesize(cfg: &RunConfig, checkpoint: &Path, out_dataset: &Path) -> Result<()> {
    let graph: NetworkGraph<f32> = load_checkpoint(checkpoint)?;
    let before = tensor_map_hash(graph.params());
    let ds = generate_dataset(&graph, &cfg.synth)?;
    debug_assert_eq!(before, tensor_map_hash(graph.params()));
    write_dfds(out_dataset, &ds.images, &ds.header, None)?;
    println!("synthesized {} images into {}", ds.len(), out_dataset.display());
    Ok(())
}

/// Fine-tune a pruned checkpoint against its teacher on synthetic images.
pub fn cmd_finetune(
    cfg: &RunConfig,
    pruned_ckpt: &Path,
    teacher_ckpt: &Path,
    dataset: &Path,
    out_checkpoint: &Path,
    losses_out: Option<&Path>,
) -> Result<()> {
    let pruned: NetworkGraph<f32> = load_checkpoint(pruned_ckpt)?;
    let teacher: NetworkGraph<f32> = load_checkpoint(teacher_ckpt)?;
    let (ds, _labels): (SynthDataset<f32>, _) = read_dfds(dataset)?;
    if !ds.matches_model(&teacher) {
        eprintln!(
            "warning: dataset {} was synthesized from a different model than {}",
            dataset.display(),
            teacher_ckpt.display()
        );
    }
    let head_before = per_tensor_hashes(&pruned.head_params());
    let (tuned, history) = finetune(pruned, &teacher, &ds.images, &cfg.distill)?;
    let head_after = per_tensor_hashes(&tuned.head_params());
    if head_before != head_after {
        return Err(Error::graph("head parameters changed during fine-tuning".to_string()));
    }
    println!("head hash before == after: {}", head_before == head_after);
    save_checkpoint(&tuned, out_checkpoint)?;
    if let Some(losses_out) = losses_out {
        let mut out = String::new();
        for rec in &history {
            out.push_str(&serde_json::to_string(rec)?);
            out.push('\n');
        }
        std::fs::write(losses_out, out)?;
    }
    Ok(())
}

/// Evaluate a checkpoint; prints overall and per-class accuracy.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalResult> {
    let graph: NetworkGraph<f32> = load_checkpoint(checkpoint)?;
    let (_train, test) = load_data(cfg)?;
    let result = evaluate(&graph, &test, cfg.eval.batch_size)?;
    println!("accuracy: {:.4} over {} samples", result.accuracy, result.total);
    for (k, acc) in result.per_class.iter().enumerate() {
        println!("  class {k}: {acc:.4}");
    }
    Ok(result)
}

/// One row of the pipeline comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub accuracy: f64,
    pub removed_filters_pct: f64,
    pub removed_params_pct: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub rows: Vec<ReportRow>,
    pub prune: PruneReport,
}

/// train -> prune -> synthesize -> finetune -> eval, with the three-row
/// comparison (Baseline / w/o fine-tuning / DFBF).
pub fn cmd_pipeline(cfg: &RunConfig, rundir: &mut RunDir) -> Result<PipelineReport> {
    rundir.lock()?;
    std::fs::write(rundir.file("config.resolved.json"), serde_json::to_string_pretty(cfg)?)?;
    let mut metrics = MetricsWriter::create(&rundir.file("metrics.jsonl"))?;

    let baseline_ckpt = rundir.checkpoint("baseline.dfbf");
    let pruned_ckpt = rundir.checkpoint("pruned.dfbf");
    let dfbf_ckpt = rundir.checkpoint("dfbf.dfbf");
    let dataset = rundir.dataset("synthetic.dfds");

    let acc_baseline = cmd_train(cfg, &baseline_ckpt, Some(&mut metrics))?;
    metrics.record("eval", "baseline_accuracy", acc_baseline)?;

    let teacher: NetworkGraph<f32> = load_checkpoint(&baseline_ckpt)?;
    let teacher_hashes = per_tensor_hashes(teacher.params());

    let rep = cmd_prune(cfg, &baseline_ckpt, &pruned_ckpt, Some(rundir.file("prune_plan.json").as_path()))?;
    let (_, test) = load_data(cfg)?;
    let pruned: NetworkGraph<f32> = load_checkpoint(&pruned_ckpt)?;
    let acc_pruned = evaluate(&pruned, &test, cfg.eval.batch_size)?.accuracy;
    metrics.record("eval", "pruned_accuracy", acc_pruned)?;

    cmd_synthesize(cfg, &baseline_ckpt, &dataset)?;
    cmd_finetune(
        cfg,
        &pruned_ckpt,
        &baseline_ckpt,
        &dataset,
        &dfbf_ckpt,
        Some(rundir.file("finetune_losses.jsonl").as_path()),
    )?;

    let tuned: NetworkGraph<f32> = load_checkpoint(&dfbf_ckpt)?;
    let acc_dfbf = evaluate(&tuned, &test, cfg.eval.batch_size)?.accuracy;
    metrics.record("eval", "dfbf_accuracy", acc_dfbf)?;

    // the teacher must come out of the whole procedure untouched
    let teacher_after: NetworkGraph<f32> = load_checkpoint(&baseline_ckpt)?;
    if per_tensor_hashes(teacher_after.params()) != teacher_hashes {
        return Err(Error::graph("teacher checkpoint changed during the pipeline".to_string()));
    }

    let rows = vec![
        ReportRow {
            method: "Baseline".to_string(),
            accuracy: acc_baseline,
            removed_filters_pct: 0.0,
            removed_params_pct: 0.0,
        },
        ReportRow {
            method: "w/o fine-tuning".to_string(),
            accuracy: acc_pruned,
            removed_filters_pct: rep.removed_filters_pct,
            removed_params_pct: rep.removed_params_pct,
        },
        ReportRow {
            method: "DFBF".to_string(),
            accuracy: acc_dfbf,
            removed_filters_pct: rep.removed_filters_pct,
            removed_params_pct: rep.removed_params_pct,
        },
    ];
    let pipeline_report = PipelineReport { rows, prune: rep };
    std::fs::write(rundir.file("report.json"), serde_json::to_string_pretty(&pipeline_report)?)?;

    println!("\n{:<18} {:>9} {:>18} {:>17}", "Method", "Accuracy", "Removed Filters %", "Removed Params %");
    for row in &pipeline_report.rows {
        println!(
            "{:<18} {:>9.4} {:>18.2} {:>17.2}",
            row.method, row.accuracy, row.removed_filters_pct, row.removed_params_pct
        );
    }
    Ok(pipeline_report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub accuracy: f64,
}

/// Fine-tune one pruned model per gamma against a shared read-only
/// teacher; fine-tunes run on parallel workers.
pub fn cmd_sweep_gamma(
    cfg: &RunConfig,
    gammas: &[f64],
    pruned_ckpt: &Path,
    teacher_ckpt: &Path,
    dataset: &Path,
) -> Result<Vec<SweepRow>> {
    use rayon::prelude::*;
    let pruned: NetworkGraph<f32> = load_checkpoint(pruned_ckpt)?;
    let teacher: NetworkGraph<f32> = load_checkpoint(teacher_ckpt)?;
    let (ds, _) = read_dfds::<f32>(dataset)?;
    let (_, test) = load_data(cfg)?;

    let rows: Vec<SweepRow> = gammas
        .par_iter()
        .map(|&gamma| {
            let dcfg = DistillConfig { gamma, ..cfg.distill.clone() };
            let (tuned, _) = finetune(pruned.clone(), &teacher, &ds.images, &dcfg)?;
            let acc = evaluate(&tuned, &test, cfg.eval.batch_size)?.accuracy;
            Ok(SweepRow { gamma, accuracy: acc })
        })
        .collect::<Result<Vec<_>>>()?;

    println!("{:>7} {:>9}", "gamma", "accuracy");
    for row in &rows {
        println!("{:>7.2} {:>9.4}", row.gamma, row.accuracy);
    }
    Ok(rows)
}

/// Print the header of a checkpoint or dataset container.
pub fn cmd_inspect(path: &Path) -> Result<()> {
    let mut magic = [0u8; 4];
    {
        use std::io::Read;
        let mut f = std::fs::File::open(path)?;
        f.read_exact(&mut magic)
            .map_err(|_| Error::format(format!("{}: file too short", path.display())))?;
    }
    match &magic {
        b"DFBF" => {
            let graph: NetworkGraph<f32> = load_checkpoint(path)?;
            println!("checkpoint {}", path.display());
            println!("  layers: {}", graph.layers().len());
            println!("  backbone boundary: {}", graph.backbone_boundary());
            println!("  parameters: {}", graph.total_param_count());
            println!("  model hash: {}", tensor_map_hash(graph.params()));
            for layer in graph.layers() {
                println!(
                    "  {:<16} {:<16} tap={} prunable={}",
                    layer.id,
                    layer.kind.name(),
                    layer.tap,
                    layer.prunable
                );
            }
        }
        b"DFDS" => {
            let (ds, labels) = read_dfds::<f32>(path)?;
            println!("dataset {}", path.display());
            println!("  images: {}", ds.len());
            if let Some(first) = ds.images.first() {
                println!("  shape: {:?}", first.shape());
            }
            println!("  labeled: {}", labels.is_some());
            if let Some(hash) = &ds.header.model_hash {
                println!("  model hash: {hash}");
            }
        }
        other => {
            return Err(Error::format(format!(
                "{}: unknown magic {:?} (expected \"DFBF\" or \"DFDS\")",
                path.display(),
                other
            )))
        }
    }
    Ok(())
}

/// Tap-selection parsing for the finetune CLI flag.
pub fn parse_tap_selection(s: &str) -> Result<TapSelection> {
    match s {
        "all" => Ok(TapSelection::All),
        "every_second" => Ok(TapSelection::EverySecond),
        "output_only" => Ok(TapSelection::OutputOnly),
        other => Err(Error::config(format!(
            "unknown tap selection '{other}' (expected all | every_second | output_only)"
        ))),
    }
}
