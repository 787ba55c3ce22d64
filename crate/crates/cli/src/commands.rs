use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use triage_core::datasets::{
    harmonize_labels, load_manifest, split_by_protocol, stage1_relabel, synthesize_filter_negatives, Label,
    Manifest, Split, Task, DEFAULT_RATIOS,
};
use triage_core::evaluation::{
    aggregate_runs, evaluate_model, extract_embeddings, filter_clean, pca_project, write_projector, ConfusionMatrix,
    RunAggregate, Spread,
};
use triage_core::models::{
    build, build_covid_net, build_filter_net, CovidNetConfig, FilterNetConfig, ModelConfig, ModelGraph,
    FILTER_CLASSES, STAGE1_CLASSES, STAGE2_CLASSES,
};
use triage_core::synthetic::write_dataset;
use triage_core::training::{train, train_two_stage, LabeledSet, TrainConfig, TrainHistory, WeightsMode};
use triage_service::demo::{build_demo_models, DemoOptions};
use triage_service::{AppState, ServiceConfig};

use crate::{SplitArg, SpreadArg, TaskArg, TrainOverrides, WeightsArg};

const HISTORY_FILE: &str = "history.jsonl";
const EVAL_BATCH: usize = 32;

fn labels_of(names: &[impl AsRef<str>]) -> Result<Vec<Label>> {
    names
        .iter()
        .map(|n| n.as_ref().parse::<Label>().map_err(|e| anyhow::anyhow!("{e}")))
        .collect()
}

struct Sets {
    train: LabeledSet,
    validation: LabeledSet,
    test: LabeledSet,
}

fn load_sets(manifest: &Manifest, classes: &[Label], size: usize, seed: u64) -> Result<Sets> {
    let assignment = split_by_protocol(manifest, DEFAULT_RATIOS, seed)?;
    for w in &assignment.warnings {
        tracing::warn!("{w}");
    }
    let load = |s: Split| LabeledSet::from_manifest(manifest, &assignment.indices(s), classes, size);
    let sets = Sets {
        train: load(Split::Train)?,
        validation: load(Split::Validation)?,
        test: load(Split::Test)?,
    };
    tracing::info!(
        train = sets.train.len(),
        validation = sets.validation.len(),
        test = sets.test.len(),
        "split loaded"
    );
    Ok(sets)
}

fn apply_overrides(mut cfg: TrainConfig, o: &TrainOverrides) -> TrainConfig {
    if let Some(e) = o.max_epochs {
        cfg.max_epochs = e;
    }
    if let Some(lr) = o.lr {
        cfg.initial_lr = lr;
    }
    if let Some(b) = o.batch_size {
        cfg.batch_size = b;
    }
    cfg
}

fn save_outputs(model: &ModelGraph, history: &TrainHistory, out: &Path) -> Result<()> {
    model.save(out)?;
    history.write_jsonl(&out.join(HISTORY_FILE))?;
    if let Some(best) = history.best() {
        println!(
            "best epoch {} of {}: validation loss {:.4}, accuracy {:.4}",
            history.best_epoch,
            history.epochs.len(),
            best.validation_loss,
            best.validation_accuracy
        );
    }
    println!("saved model and {HISTORY_FILE} to {}", out.display());
    Ok(())
}

fn report_test(model: &ModelGraph, test: &LabeledSet) -> Result<()> {
    if test.is_empty() {
        println!("test split is empty");
        return Ok(());
    }
    let m = evaluate_model(model, test, EVAL_BATCH)?;
    println!("test accuracy {:.4} on {} images", m.accuracy().unwrap_or(0.0), test.len());
    Ok(())
}

pub fn train_filter(manifest: &Path, out: &Path, seed: u64, negative_fraction: f64, o: &TrainOverrides) -> Result<()> {
    let mut m = load_manifest(manifest)?;
    if m.task != Task::Filter {
        bail!("{} is not a filter manifest", manifest.display());
    }
    if negative_fraction > 0.0 {
        m = synthesize_filter_negatives(&m, negative_fraction, seed)?;
    }
    let classes = labels_of(&FILTER_CLASSES)?;
    let sets = load_sets(&m, &classes, o.input_size, seed)?;
    let model = build_filter_net(&FilterNetConfig {
        input_size: o.input_size,
        seed,
        ..FilterNetConfig::default()
    })?;
    let cfg = apply_overrides(TrainConfig::filter(), o);
    let outcome = train(model, &sets.train, &sets.validation, &cfg, seed)?;
    report_test(&outcome.model, &sets.test)?;
    save_outputs(&outcome.model, &outcome.history, out)
}

pub struct CovidArgs {
    pub stage: u8,
    pub manifest: PathBuf,
    pub weights_mode: WeightsArg,
    pub init: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub clean_with: Option<PathBuf>,
    pub freeze_backbone: bool,
    pub overrides: TrainOverrides,
}

pub fn train_covid(a: &CovidArgs) -> Result<()> {
    let mut m = load_manifest(&a.manifest)?;
    if m.task != Task::Classifier {
        bail!("{} is not a classifier manifest", a.manifest.display());
    }
    m = harmonize_labels(&m);
    if let Some(dir) = &a.clean_with {
        let filter = ModelGraph::load(dir).with_context(|| format!("loading filter from {}", dir.display()))?;
        let (kept, removed) = filter_clean(&m, &filter, triage_service::config::DEFAULT_FILTER_THRESHOLD)?;
        println!("filter removed {} of {} records", removed.len(), m.len());
        m = kept;
    }
    let (names, data): (&[&str], Manifest) = match a.stage {
        1 => (&STAGE1_CLASSES, stage1_relabel(&m)),
        _ => (&STAGE2_CLASSES, m),
    };
    let classes = labels_of(names)?;
    let size = a.overrides.input_size;
    let fresh = || {
        build_covid_net(&CovidNetConfig {
            num_classes: names.len(),
            input_size: size,
            seed: a.seed,
            ..CovidNetConfig::default()
        })
    };
    let model = match &a.init {
        None => fresh()?,
        Some(dir) => {
            let init = ModelGraph::load(dir).with_context(|| format!("loading {}", dir.display()))?;
            if init.class_names == names {
                init
            } else if a.stage == 2 && init.class_names == STAGE1_CLASSES {
                init.with_new_head(&STAGE2_CLASSES, a.seed)?
            } else {
                bail!("cannot start stage {} from classes {:?}", a.stage, init.class_names);
            }
        }
    };
    let input = model.config.input_size();
    let sets = load_sets(&data, &classes, input, a.seed)?;
    let cfg = TrainConfig {
        weights_mode: Some(match a.weights_mode {
            WeightsArg::AsWritten => WeightsMode::AsWritten,
            WeightsArg::Inverse => WeightsMode::Inverse,
        }),
        freeze_backbone: a.freeze_backbone,
        ..apply_overrides(TrainConfig::classifier(), &a.overrides)
    };
    let outcome = train(model, &sets.train, &sets.validation, &cfg, a.seed)?;
    report_test(&outcome.model, &sets.test)?;
    save_outputs(&outcome.model, &outcome.history, &a.out)
}

pub struct EvalArgs {
    pub manifest: PathBuf,
    pub model: PathBuf,
    pub runs: usize,
    pub out: PathBuf,
    pub seed: u64,
    pub retrain: bool,
    pub spread: SpreadArg,
    pub max_epochs: Option<usize>,
    pub lr: Option<f64>,
}

#[derive(Serialize)]
struct EvalReport {
    model: String,
    manifest: String,
    seed: u64,
    retrain: bool,
    per_run: Vec<ConfusionMatrix>,
    aggregate: RunAggregate,
}

fn reseeded(config: &ModelConfig, seed: u64) -> ModelConfig {
    match config {
        ModelConfig::Filter(c) => ModelConfig::Filter(FilterNetConfig { seed, ..c.clone() }),
        ModelConfig::Covid(c) => ModelConfig::Covid(CovidNetConfig { seed, ..c.clone() }),
    }
}

fn retrain_run(stored: &ModelGraph, sets: &Sets, seed: u64, a: &EvalArgs) -> Result<ModelGraph> {
    let adjust = |mut cfg: TrainConfig| {
        cfg.max_epochs = a.max_epochs.unwrap_or(cfg.max_epochs);
        cfg.initial_lr = a.lr.unwrap_or(cfg.initial_lr);
        cfg
    };
    let config = reseeded(&stored.config, seed);
    Ok(match &config {
        ModelConfig::Filter(_) => train(build(&config)?, &sets.train, &sets.validation, &adjust(TrainConfig::filter()), seed)?.model,
        ModelConfig::Covid(c) if c.num_classes == 3 => {
            let stage = adjust(TrainConfig::classifier());
            train_two_stage(c, &sets.train, &sets.validation, &stage, &stage, seed, false)?.model
        }
        ModelConfig::Covid(_) => {
            train(build(&config)?, &sets.train, &sets.validation, &adjust(TrainConfig::classifier()), seed)?.model
        }
    })
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if a.runs == 0 {
        bail!("--runs must be at least 1");
    }
    let stored = ModelGraph::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let mut m = load_manifest(&a.manifest)?;
    if m.task == Task::Classifier {
        m = harmonize_labels(&m);
        if stored.class_names == STAGE1_CLASSES {
            m = stage1_relabel(&m);
        }
    }
    let classes = labels_of(&stored.class_names)?;
    let mut per_run = Vec::with_capacity(a.runs);
    for run in 0..a.runs {
        let seed = a.seed.wrapping_add(run as u64);
        let sets = load_sets(&m, &classes, stored.config.input_size(), seed)?;
        let model = if a.retrain {
            retrain_run(&stored, &sets, seed, a)?
        } else {
            stored.clone()
        };
        let cm = evaluate_model(&model, &sets.test, EVAL_BATCH)?;
        println!("run {run}: seed {seed}, test accuracy {:.4}", cm.accuracy().unwrap_or(f64::NAN));
        per_run.push(cm);
    }
    let spread = match a.spread {
        SpreadArg::Population => Spread::Population,
        SpreadArg::Sample => Spread::Sample,
    };
    let aggregate = aggregate_runs(&per_run, spread)?;
    print_aggregate(&aggregate);
    let report = EvalReport {
        model: a.model.display().to_string(),
        manifest: a.manifest.display().to_string(),
        seed: a.seed,
        retrain: a.retrain,
        per_run,
        aggregate,
    };
    std::fs::write(&a.out, serde_json::to_vec_pretty(&report)?).with_context(|| format!("writing {}", a.out.display()))?;
    println!("report written to {}", a.out.display());
    Ok(())
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_owned(), |v| format!("{:.1}%", 100.0 * v))
}

fn print_aggregate(agg: &RunAggregate) {
    println!("{:<14} {:>12} {:>18} {:>12} {:>18}", "class", "sens pooled", "sens mean±std", "spec pooled", "spec mean±std");
    for (c, name) in agg.summed.class_names.iter().enumerate() {
        let ms = |m: &triage_core::evaluation::MeanStd| format!("{}±{}", pct(m.mean), pct(m.std));
        println!(
            "{:<14} {:>12} {:>18} {:>12} {:>18}",
            name,
            pct(agg.pooled.sensitivity[c]),
            ms(&agg.sensitivity[c]),
            pct(agg.pooled.specificity[c]),
            ms(&agg.specificity[c]),
        );
    }
}

pub fn export_projector(model: &Path, manifest: &Path, out: &Path, split: SplitArg, seed: u64) -> Result<()> {
    let model = ModelGraph::load(model).with_context(|| format!("loading {}", model.display()))?;
    let mut m = load_manifest(manifest)?;
    if m.task == Task::Classifier {
        m = harmonize_labels(&m);
    }
    let indices: Vec<usize> = match split {
        SplitArg::All => (0..m.len()).collect(),
        s => {
            let which = match s {
                SplitArg::Train => Split::Train,
                SplitArg::Validation => Split::Validation,
                _ => Split::Test,
            };
            split_by_protocol(&m, DEFAULT_RATIOS, seed)?.indices(which)
        }
    };
    let export = extract_embeddings(&model, &m, &indices)?;
    write_projector(out, &export)?;
    let rows: Vec<Vec<f64>> = export
        .vectors
        .iter()
        .map(|r| r.iter().map(|&x| x as f64).collect())
        .collect();
    if rows.len() >= 3 {
        let pca = pca_project(&rows, 3)?;
        let mut tsv = String::new();
        for r in &pca.coordinates {
            let line: Vec<String> = r.iter().map(|x| x.to_string()).collect();
            tsv.push_str(&line.join("\t"));
            tsv.push('\n');
        }
        std::fs::write(out.join("pca.tsv"), tsv)?;
        std::fs::write(out.join("pca.json"), serde_json::to_vec_pretty(&pca)?)?;
        println!("explained variance ratios {:?}", pca.explained_variance_ratio);
    }
    println!(
        "{} embeddings written to {} ({} skipped)",
        export.vectors.len(),
        out.display(),
        export.skipped.len()
    );
    Ok(())
}

pub fn serve(config: ServiceConfig, host: &str, port: u16) -> Result<()> {
    let state = Arc::new(AppState::load(config)?);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        triage_service::serve(listener, state).await?;
        Ok(())
    })
}

pub fn synth_data(task: TaskArg, out: &Path, count: &[usize], size: usize, seed: u64) -> Result<()> {
    let task = match task {
        TaskArg::Filter => Task::Filter,
        TaskArg::Classifier => Task::Classifier,
    };
    let m = write_dataset(out, task, count, size, seed)?;
    println!("{} records written to {}: {:?}", m.len(), out.join("manifest.csv").display(), m.class_counts());
    Ok(())
}

pub fn demo_models(out: &Path, input_size: usize, seed: u64) -> Result<()> {
    let report = build_demo_models(
        out,
        &DemoOptions {
            input_size,
            seed,
            ..DemoOptions::default()
        },
    )?;
    println!(
        "demo models saved to {} (held-out filter accuracy {:.3}, classifier accuracy {:.3})",
        out.display(),
        report.filter_accuracy,
        report.classifier_accuracy
    );
    Ok(())
}
