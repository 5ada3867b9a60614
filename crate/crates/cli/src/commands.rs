//! One function per subcommand. Each writes its artifacts into the run
//! directory and returns a short human summary.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use idsf::analysis::{
    export_embeddings, group_similarity_means, sample_user_items, similarity_matrix, top_k_row_filter, write_export,
    EmbeddingKind,
};
use idsf::checkpoint::{load_checkpoint, save_checkpoint};
use idsf::data::{sidecar_path, write_interactions, write_matrix_file, write_sidecar, Modality, Split, SplitManifest};
use idsf::eval::{comparison_table, evaluate, EvalReport, COMPARISON_COLUMNS};
use idsf::model::{Ablation, AblationFlags, Idsf};
use idsf::train::{EpochRecord, FitResult, Trainer};
use idsf::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::inputs::{name, Inputs};
use crate::run::RunDir;

pub const SPLIT_FILE: &str = "split.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_report(dir: &RunDir, stem: &str, label: &str, report: &EvalReport) -> Result<()> {
    write_json(&dir.file(&format!("{stem}.json")), report)?;
    fs::write(dir.file(&format!("{stem}.txt")), report.to_table(label))?;
    Ok(())
}

/// Writes the split manifest and, for synthetic data, the interaction TSV
/// and both feature files with sidecars.
pub fn prepare(config: &RunConfig, out: &Path) -> Result<String> {
    let inputs = Inputs::load(config)?;
    let dir = RunDir::create(out, "prepare", config, &inputs.files)?;
    let ds = &inputs.dataset;
    let manifest = SplitManifest::from_dataset(
        ds,
        config.split_seed(),
        config.data.split.ratios,
        config.data.split.strategy,
    );
    manifest.save(dir.file(SPLIT_FILE))?;
    let mut summary = format!(
        "{} users, {} items, {} / {} / {} train / valid / test interactions\nsplit: {}\n",
        ds.user_count(),
        ds.item_count(),
        ds.edges(Split::Train).len(),
        ds.edges(Split::Valid).len(),
        ds.edges(Split::Test).len(),
        dir.file(SPLIT_FILE).display()
    );
    if let Some(syn) = &inputs.synthetic {
        write_interactions(dir.file("interactions.tsv"), &syn.records)?;
        for m in Modality::ALL {
            let table = match m {
                Modality::Text => &syn.text,
                Modality::Visual => &syn.visual,
            };
            let path = dir.file(&format!("{}.bin", name(m)));
            write_matrix_file(&path, table)?;
            write_sidecar(sidecar_path(&path), &syn.item_ids)?;
        }
        let _ = writeln!(summary, "synthetic data written to {}", dir.path.display());
    }
    dir.finish()?;
    Ok(summary)
}

/// Training outcome plus the model rebuilt from the best parameters.
pub struct TrainOutcome {
    pub fit: FitResult,
    pub best: Idsf<f32>,
    pub test: EvalReport,
}

/// Fits one model and evaluates its best-validation parameters on test.
/// `progress` receives one JSON line per epoch.
pub fn fit_and_test(config: &RunConfig, inputs: &Inputs, progress: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.model.clone(), inputs.graph.clone(), &inputs.features)?;
    let fit = match progress {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            trainer.fit(&inputs.dataset, &config.train, Some(&mut w))?
        }
        None => trainer.fit(&inputs.dataset, &config.train, None)?,
    };
    let best = Idsf::from_store(
        config.model.clone(),
        inputs.graph.clone(),
        &inputs.features,
        fit.best_params.clone(),
    )?;
    let mut test = evaluate(&best.representations()?, &inputs.dataset, Split::Test, &config.eval.ks)?;
    test.config = Some(serde_json::to_value(&config.model)?);
    Ok(TrainOutcome { fit, best, test })
}

#[derive(Serialize)]
struct History<'a> {
    epochs: &'a [EpochRecord],
    best_epoch: usize,
    best_valid_recall20: f64,
    stopped_early: bool,
}

pub fn train(config: &RunConfig, out: &Path) -> Result<String> {
    let inputs = Inputs::load(config)?;
    let dir = RunDir::create(out, "train", config, &inputs.files)?;
    let outcome = fit_and_test(config, &inputs, Some(&dir.file("progress.jsonl")))?;
    let fit = &outcome.fit;
    let rng = fit.best_rng.restore()?;
    save_checkpoint(
        dir.file(CHECKPOINT_DIR),
        &config.model,
        &fit.best_params,
        Some(&rng),
        Some(fit.best_epoch),
        Some(fit.best_recall20),
    )?;
    write_json(
        &dir.file("history.json"),
        &History {
            epochs: &fit.history,
            best_epoch: fit.best_epoch,
            best_valid_recall20: fit.best_recall20,
            stopped_early: fit.stopped_early,
        },
    )?;
    write_report(&dir, "report", "IDSF", &outcome.test)?;
    let manifest = dir.finish()?;
    Ok(format!(
        "run {} trained {} epochs (best {} with valid Recall@20 {:.5})\n{}",
        manifest.run_id,
        fit.history.len(),
        fit.best_epoch,
        fit.best_recall20,
        outcome.test.to_table("IDSF")
    ))
}

/// Loads `checkpoint` if given, otherwise initializes a model from the
/// configured seed. The checkpoint's model settings replace the config's.
fn model_for(config: &mut RunConfig, checkpoint: Option<&Path>) -> Result<(Inputs, Idsf<f32>)> {
    match checkpoint {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            if ckpt.manifest.config != config.model {
                log::info!("using the model settings stored in {}", p.display());
            }
            config.model = ckpt.manifest.config.clone();
            let inputs = Inputs::load(config)?;
            let model = Idsf::from_store(
                config.model.clone(),
                inputs.graph.clone(),
                &inputs.features,
                ckpt.params,
            )?;
            Ok((inputs, model))
        }
        None => {
            let inputs = Inputs::load(config)?;
            let mut rng = ChaCha8Rng::seed_from_u64(config.model.seed);
            let model = Idsf::new(config.model.clone(), inputs.graph.clone(), &inputs.features, &mut rng)?;
            Ok((inputs, model))
        }
    }
}

fn checkpoint_files(checkpoint: Option<&Path>) -> Vec<PathBuf> {
    checkpoint
        .map(|p| {
            vec![
                p.join(idsf::checkpoint::MANIFEST_FILE),
                p.join(idsf::checkpoint::PARAMS_FILE),
            ]
        })
        .unwrap_or_default()
}

pub fn evaluate_cmd(config: &RunConfig, out: &Path, checkpoint: Option<&Path>, split: Split) -> Result<String> {
    let mut config = config.clone();
    let (inputs, model) = model_for(&mut config, checkpoint)?;
    let mut files = inputs.files.clone();
    files.extend(checkpoint_files(checkpoint));
    let dir = RunDir::create(out, "evaluate", &config, &files)?;
    let mut report = evaluate(&model.representations()?, &inputs.dataset, split, &config.eval.ks)?;
    report.config = Some(serde_json::to_value(&config.model)?);
    let label = if checkpoint.is_some() { "IDSF" } else { "untrained" };
    write_report(&dir, "report", label, &report)?;
    dir.finish()?;
    Ok(report.to_table(label))
}

/// Full model first, then each single-component ablation.
pub fn ablate(config: &RunConfig, out: &Path) -> Result<String> {
    let inputs = Inputs::load(config)?;
    let dir = RunDir::create(out, "ablate", config, &inputs.files)?;
    let variants: Vec<Option<Ablation>> = std::iter::once(None).chain(Ablation::ALL.map(Some)).collect();
    let mut rows = Vec::new();
    for variant in variants {
        let mut c = config.clone();
        c.model.ablation = AblationFlags::only(variant);
        let slug = variant.map_or("full", slug);
        log::info!("ablation variant `{slug}`");
        let outcome = fit_and_test(&c, &inputs, Some(&dir.file(&format!("progress-{slug}.jsonl"))))?;
        write_json(&dir.file(&format!("report-{slug}.json")), &outcome.test)?;
        rows.push((variant.map_or("IDSF", Ablation::label).to_string(), outcome.test));
    }
    let mut csv = String::from("variant");
    for c in COMPARISON_COLUMNS {
        let _ = write!(csv, ",{c}");
    }
    csv.push('\n');
    for (label, report) in &rows {
        csv.push_str(label);
        for v in report.comparison_row() {
            let _ = write!(csv, ",{:.6}", v * 100.0);
        }
        csv.push('\n');
    }
    fs::write(dir.file("ablation.csv"), csv)?;
    let table = comparison_table(&rows.iter().map(|(l, r)| (l.clone(), r)).collect::<Vec<_>>());
    fs::write(dir.file("ablation.txt"), &table)?;
    dir.finish()?;
    Ok(table)
}

fn slug(a: Ablation) -> &'static str {
    match a {
        Ablation::NoContent => "no_content",
        Ablation::ContentNoContrast => "no_contrast",
        Ablation::ContentNoId => "content_no_id",
        Ablation::StructureNoId => "structure_no_id",
    }
}

struct SweepRow {
    gamma: f64,
    beta: f64,
    best_epoch: usize,
    valid_recall20: f64,
    test: [f64; 6],
}

/// Grid over γ × β. With `parallel_runs > 1`, that many grid points train
/// at once on separate threads; each point is independent and seeded alike,
/// so results match the sequential order.
pub fn sweep(config: &RunConfig, out: &Path, parallel_runs: usize) -> Result<String> {
    let inputs = Inputs::load(config)?;
    let dir = RunDir::create(out, "sweep", config, &inputs.files)?;
    let points: Vec<(f64, f64)> = config
        .sweep
        .gammas
        .iter()
        .flat_map(|&g| config.sweep.betas.iter().map(move |&b| (g, b)))
        .collect();
    let run_point = |&(gamma, beta): &(f64, f64)| -> Result<SweepRow> {
        let mut c = config.clone();
        c.model.gamma = gamma;
        c.model.beta = beta;
        log::info!("sweep point gamma={gamma} beta={beta}");
        let o = fit_and_test(&c, &inputs, None)?;
        Ok(SweepRow {
            gamma,
            beta,
            best_epoch: o.fit.best_epoch,
            valid_recall20: o.fit.best_recall20,
            test: o.test.comparison_row(),
        })
    };
    let results: Vec<Result<SweepRow>> = if parallel_runs <= 1 {
        points.iter().map(run_point).collect()
    } else {
        let slots: Vec<Mutex<Option<Result<SweepRow>>>> = points.iter().map(|_| Mutex::new(None)).collect();
        let next = std::sync::atomic::AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..parallel_runs.min(points.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= points.len() {
                        break;
                    }
                    let r = run_point(&points[i]);
                    *slots[i].lock().expect("sweep slot") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().expect("sweep slot").expect("every point ran"))
            .collect()
    };
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("gamma,beta,best_epoch,valid_R@20");
    for c in COMPARISON_COLUMNS {
        let _ = write!(csv, ",{c}");
    }
    csv.push('\n');
    for r in &rows {
        let _ = write!(
            csv,
            "{},{},{},{:.6}",
            r.gamma,
            r.beta,
            r.best_epoch,
            r.valid_recall20 * 100.0
        );
        for v in r.test {
            let _ = write!(csv, ",{:.6}", v * 100.0);
        }
        csv.push('\n');
    }
    fs::write(dir.file("sweep.csv"), &csv)?;
    dir.finish()?;
    Ok(csv)
}

#[derive(Serialize)]
struct SimilaritySummary {
    kind: &'static str,
    within_group_mean: f64,
    across_group_mean: f64,
    zero_rows: Vec<usize>,
}

#[derive(Serialize)]
struct AnalysisSummary {
    users: Vec<String>,
    items: Vec<String>,
    groups: Vec<usize>,
    top_k: usize,
    similarity: Vec<SimilaritySummary>,
    exports: Vec<PathBuf>,
}

/// Similarity matrices over a non-overlapping user sample plus embedding
/// exports. Without a checkpoint the model is trained first.
pub fn analyze(config: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<String> {
    let mut config = config.clone();
    let (inputs, model) = match checkpoint {
        Some(_) => model_for(&mut config, checkpoint)?,
        None => {
            let inputs = Inputs::load(&config)?;
            let best = fit_and_test(&config, &inputs, None)?.best;
            (inputs, best)
        }
    };
    let mut files = inputs.files.clone();
    files.extend(checkpoint_files(checkpoint));
    let dir = RunDir::create(out, "analyze", &config, &files)?;
    let a = &config.analysis;
    let ds = &inputs.dataset;

    // A separate stream keeps the sample independent of training draws.
    let mut rng = ChaCha8Rng::seed_from_u64(config.model.seed ^ 0x5A4D_504C);
    let sample = sample_user_items(ds, a.users, a.retries, &mut rng)?;
    let mut similarity = Vec::new();
    for kind in EmbeddingKind::ALL.into_iter().filter(|k| !k.is_user_table()) {
        let table = match export_embeddings(&model, kind) {
            Ok(t) => t,
            Err(Error::Config(msg)) => {
                log::info!("skipping {}: {msg}", kind.name());
                continue;
            }
            Err(e) => return Err(e),
        };
        let m = similarity_matrix(&table.select_rows(&sample.items));
        let filtered = top_k_row_filter(&m, a.top_k)?;
        fs::write(dir.file(&format!("similarity-{}.csv", kind.name())), m.to_csv())?;
        fs::write(
            dir.file(&format!("similarity-{}-top{}.csv", kind.name(), a.top_k)),
            filtered.to_csv(),
        )?;
        let (within, across) = group_similarity_means(&m, &sample.groups);
        similarity.push(SimilaritySummary {
            kind: kind.name(),
            within_group_mean: within,
            across_group_mean: across,
            zero_rows: m.zero_rows.clone(),
        });
    }

    let selectors: Vec<EmbeddingKind> = if a.exports.is_empty() {
        EmbeddingKind::ALL.to_vec()
    } else {
        a.exports.iter().map(|s| s.parse()).collect::<Result<_>>()?
    };
    let mut item_label = vec![None; ds.item_count()];
    for (&i, &g) in sample.items.iter().zip(&sample.groups) {
        item_label[i] = Some(g);
    }
    let mut user_label = vec![None; ds.user_count()];
    for (g, &u) in sample.users.iter().enumerate() {
        user_label[u] = Some(g);
    }
    let mut exports = Vec::new();
    for kind in selectors {
        let table = match export_embeddings(&model, kind) {
            Ok(t) => t,
            Err(Error::Config(msg)) if a.exports.is_empty() => {
                log::info!("not exporting {}: {msg}", kind.name());
                continue;
            }
            Err(e) => return Err(e),
        };
        let (ids, labels) = if kind.is_user_table() {
            (ds.users().raw_ids(), &user_label)
        } else {
            (ds.items().raw_ids(), &item_label)
        };
        let paths = write_export(
            dir.path.join("exports").join(format!("{}.bin", kind.name())),
            &table,
            ids,
            labels,
        )?;
        exports.push(paths.matrix);
    }

    let summary = AnalysisSummary {
        users: sample.users.iter().map(|&u| ds.users().raw(u).to_string()).collect(),
        items: sample.items.iter().map(|&i| ds.items().raw(i).to_string()).collect(),
        groups: sample.groups.clone(),
        top_k: a.top_k,
        similarity,
        exports,
    };
    write_json(&dir.file("analysis.json"), &summary)?;
    dir.finish()?;
    let mut text = format!("{} users, {} items sampled\n", summary.users.len(), summary.items.len());
    for s in &summary.similarity {
        let _ = writeln!(
            text,
            "{:<14} within {:+.4}  across {:+.4}",
            s.kind, s.within_group_mean, s.across_group_mean
        );
    }
    Ok(text)
}
