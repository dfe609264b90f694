use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use infofuse_core::corpus::{self, KcoreStats, MetadataCoverage, MetadataTable, SplitBundle};
use infofuse_core::encoder::{CheckpointManifest, Model};
use infofuse_core::enrichment::cache::{Description, EnrichmentCache};
use infofuse_core::enrichment::features::{build_textual_table, build_visual_table, FeatureTable, Modality};
use infofuse_core::enrichment::text_encoder::{HashingEncoder, HttpEmbeddingEncoder, TextEncoder};
use infofuse_core::enrichment::vlm::{enrich_items, ChatCompletionClient, EnrichJob, EnrichOptions, ImageLoader};
use infofuse_core::evaluator::{self, render_table, BprMf, MetricsReport, Popularity};
use infofuse_core::fingerprint::{hash_bytes, short, Fingerprinter};
use infofuse_core::graphs::{build_item_knn, build_norm_bipartite, build_user_knn};
use infofuse_core::projection::pca_2d;
use infofuse_core::trainer::{self, AblationArm, FitOptions, TrainConfig, TrainData};
use infofuse_core::{io, Error};
use serde::{Deserialize, Serialize};

use crate::config::{require_input, EncoderKind, RunConfig};
use crate::layout::{Layout, VisualSource};
use crate::{PartialEnrichment, UsageError};

/// Written by `prepare`; downstream commands read the split through it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrepareManifest {
    /// Digest of the raw inputs and the settings that shaped the split.
    pub input_fingerprint: String,
    pub split_fingerprint: String,
    pub kcore: usize,
    pub kcore_stats: KcoreStats,
    pub raw_interactions: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub metadata: Option<MetadataCoverage>,
}

fn write_resolved_config(dir: &Path, config: &RunConfig) -> anyhow::Result<()> {
    io::write_atomic(&dir.join("config.toml"), config.to_toml().as_bytes())?;
    Ok(())
}

fn file_digest(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hash_bytes(&bytes))
}

fn load_split(layout: &Layout) -> anyhow::Result<SplitBundle> {
    if !layout.prepare_manifest().exists() {
        return Err(Error::MissingArtifact {
            what: format!("prepared split under {}", layout.prepared_dir().display()),
            command: "infofuse prepare".into(),
        }
        .into());
    }
    Ok(SplitBundle::read(&layout.split_dir())?)
}

fn load_table(path: &Path, what: &str, producer: &str) -> anyhow::Result<FeatureTable> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            what: format!("{what} ({})", path.display()),
            command: producer.into(),
        }
        .into());
    }
    Ok(FeatureTable::read(path)?)
}

fn text_encoder(config: &RunConfig) -> anyhow::Result<Box<dyn TextEncoder>> {
    Ok(match config.encoder.kind {
        EncoderKind::Hashing => Box::new(HashingEncoder::new(config.encoder.dim)?),
        EncoderKind::Http => {
            let url = config
                .encoder
                .url
                .clone()
                .ok_or_else(|| UsageError("encoder.kind = \"http\" requires encoder.url".into()))?;
            let model = config.encoder.model.clone().unwrap_or_default();
            Box::new(HttpEmbeddingEncoder::connect(url, model)?)
        }
    })
}

fn load_metadata_for(config: &RunConfig, split: &SplitBundle) -> anyhow::Result<MetadataTable> {
    let path = require_input(config.paths.metadata.as_deref(), "item metadata", "metadata")?;
    let table = corpus::load_metadata(&path, &split.train)?;
    let c = table.coverage;
    log::info!(
        "metadata: {:.1}% with image, {:.1}% with title, {} orphan rows, {} malformed rows",
        100.0 * c.with_image,
        100.0 * c.with_title,
        c.orphan_rows,
        c.malformed_rows
    );
    Ok(table)
}

pub fn prepare(config: &RunConfig, layout: &Layout) -> anyhow::Result<()> {
    let interactions = require_input(config.paths.interactions.as_deref(), "interaction", "interactions")?;
    let ratios = config.data.split;
    let mut fp = Fingerprinter::new("prepare");
    fp.str(&file_digest(&interactions)?)
        .u64(config.data.kcore as u64)
        .f64(ratios.train)
        .f64(ratios.valid)
        .f64(ratios.test)
        .u64(config.seed());
    if let Some(meta) = &config.paths.metadata {
        fp.str(&file_digest(meta)?);
    }
    let input_fingerprint = fp.finish();

    if let Ok(existing) = io::read_json::<PrepareManifest>(&layout.prepare_manifest()) {
        if existing.input_fingerprint == input_fingerprint && SplitBundle::read(&layout.split_dir()).is_ok() {
            println!("prepare: up-to-date ({})", short(&existing.split_fingerprint));
            return Ok(());
        }
    }

    let raw = corpus::load_interactions(&interactions)?;
    let (filtered, stats) = corpus::apply_kcore(&raw, config.data.kcore)?;
    log::info!(
        "{}-core: {} rounds, dropped {} users, {} items, {} interactions",
        config.data.kcore,
        stats.rounds,
        stats.removed_users,
        stats.removed_items,
        stats.removed_pairs
    );
    let bundle = corpus::split(&filtered, ratios, config.seed())?;
    bundle.write(&layout.split_dir())?;

    let bipartite = build_norm_bipartite(&bundle.train);
    let mut edges = String::from("user\titem\tweight\n");
    for &(u, i, w) in &bipartite.edges {
        edges.push_str(&format!("{}\t{}\t{w}\n", bundle.vocab().users[u as usize], bundle.vocab().items[i as usize]));
    }
    io::write_atomic(&layout.bipartite(), edges.as_bytes())?;
    let user_graph = build_user_knn(&bundle.train, config.train.k, config.train.normalize_user_graph)?;
    user_graph.write(&layout.user_graph(), &[bundle.fingerprint()])?;

    let metadata = match &config.paths.metadata {
        Some(_) => Some(load_metadata_for(config, &bundle)?.coverage),
        None => None,
    };
    let manifest = PrepareManifest {
        input_fingerprint,
        split_fingerprint: bundle.fingerprint(),
        kcore: config.data.kcore,
        kcore_stats: stats,
        raw_interactions: raw.len(),
        n_users: bundle.vocab().n_users(),
        n_items: bundle.vocab().n_items(),
        train: bundle.train.len(),
        valid: bundle.valid.len(),
        test: bundle.test.len(),
        metadata,
    };
    write_resolved_config(&layout.prepared_dir(), config)?;
    io::write_json(&layout.prepare_manifest(), &manifest)?;
    println!(
        "prepare: {} users, {} items, {} train / {} valid / {} test interactions ({})",
        manifest.n_users,
        manifest.n_items,
        manifest.train,
        manifest.valid,
        manifest.test,
        short(&manifest.split_fingerprint)
    );
    Ok(())
}

pub fn enrich(config: &RunConfig, layout: &Layout, use_title: bool) -> anyhow::Result<()> {
    let source = if use_title { VisualSource::Titled } else { VisualSource::Untitled };
    let split = load_split(layout)?;
    let metadata = load_metadata_for(config, &split)?;
    let spec = config.prompt.spec()?;
    let endpoint = ChatCompletionClient::new(config.endpoint.endpoint());
    let cache = EnrichmentCache::open(config.cache_dir())?;
    let loader = ImageLoader::new(config.images_dir());
    let jobs: Vec<EnrichJob> = split
        .vocab()
        .items
        .iter()
        .zip(&metadata.rows)
        .enumerate()
        .map(|(index, (key, meta))| EnrichJob {
            index,
            key: key.clone(),
            title: meta.title.clone(),
            image: meta.image.clone(),
        })
        .collect();
    let options = EnrichOptions {
        concurrency: config.endpoint.concurrency,
        retry: config.endpoint.retry(),
        use_title,
    };
    if jobs.iter().all(|job| job.image.is_none()) {
        log::warn!("no item has an image; every visual row falls back to its title encoding");
    }
    log::info!("describing {} items with {}", jobs.len(), config.endpoint.model);
    let report = enrich_items(&jobs, &endpoint, &loader, &spec, &cache, &options)?;

    let encoder = text_encoder(config)?;
    let marker = config.prompt.description_marker.as_deref();
    let table = build_visual_table(split.vocab(), &report.descriptions, encoder.as_ref(), marker)?;
    fs::create_dir_all(layout.features_dir())?;
    write_descriptions(&layout.descriptions(source), &report.descriptions)?;
    io::write_json(&layout.failures(source), &report.failures)?;
    write_resolved_config(&layout.features_dir(), config)?;
    write_table_if_changed(&layout.visual(source), &table, "visual features")?;
    println!(
        "enrich: {} items, {} degraded, {} failed",
        report.descriptions.len(),
        report.degraded,
        report.failures.len()
    );
    if !report.failures.is_empty() {
        return Err(PartialEnrichment {
            failed: report.failures.len(),
            total: jobs.len(),
            report: layout.failures(source),
        }
        .into());
    }
    Ok(())
}

fn write_descriptions(path: &Path, descriptions: &[Description]) -> anyhow::Result<()> {
    let mut out = String::new();
    for d in descriptions {
        out.push_str(&serde_json::to_string(d)?);
        out.push('\n');
    }
    io::write_atomic(path, out.as_bytes())?;
    Ok(())
}

/// Keeps an existing file whose fingerprint already matches.
fn write_table_if_changed(path: &Path, table: &FeatureTable, what: &str) -> anyhow::Result<()> {
    if let Ok(existing) = FeatureTable::read(path) {
        if existing.fingerprint == table.fingerprint {
            println!("{what}: up-to-date ({})", short(&table.fingerprint));
            return Ok(());
        }
    }
    table.write(path)?;
    println!("{what}: wrote {} ({} x {})", path.display(), table.n_rows(), table.d_feat());
    Ok(())
}

pub fn encode(config: &RunConfig, layout: &Layout) -> anyhow::Result<()> {
    let split = load_split(layout)?;
    let metadata = load_metadata_for(config, &split)?;
    let encoder = text_encoder(config)?;
    let textual = build_textual_table(split.vocab(), &metadata, encoder.as_ref())?;
    fs::create_dir_all(layout.features_dir())?;
    write_resolved_config(&layout.features_dir(), config)?;
    write_table_if_changed(&layout.textual(), &textual, "textual features")?;
    if let Some(raw) = &config.paths.raw_visual {
        let path = require_input(Some(raw), "raw visual feature", "raw_visual")?;
        let table = FeatureTable::import_delimited(&path, split.vocab(), Modality::Visual)?;
        write_table_if_changed(&layout.visual(VisualSource::Raw), &table, "raw visual features")?;
    }
    Ok(())
}

/// Split, feature tables and graphs for one arm.
fn train_data(layout: &Layout, arm: AblationArm, config: &TrainConfig) -> anyhow::Result<TrainData> {
    let split = load_split(layout)?;
    let textual = load_table(&layout.textual(), "textual features", "infofuse encode")?;
    let source = VisualSource::of(arm);
    let visual = load_table(&layout.visual(source), "visual features", source.producer())?;
    Ok(TrainData::build(split, &visual, &textual, config)?)
}

fn arm_config(config: &RunConfig, arm: AblationArm) -> TrainConfig {
    TrainConfig {
        arm,
        ..config.train_config()
    }
}

/// Train one arm, or reuse a finished run with the same fingerprint.
fn train_arm(config: &RunConfig, layout: &Layout, arm: AblationArm) -> anyhow::Result<(MetricsReport, PathBuf)> {
    let train_config = arm_config(config, arm);
    train_config.validate()?;
    let data = train_data(layout, arm, &train_config)?;
    let fingerprint = trainer::run_fingerprint(&train_config, &data);
    let run_dir = layout.run_dir(arm, &fingerprint);
    let metrics_path = run_dir.join("metrics.json");
    if metrics_path.exists() && run_dir.join("checkpoint").join(infofuse_core::encoder::MANIFEST_FILE).exists() {
        let report: MetricsReport = io::read_json(&metrics_path)?;
        if report.config_fingerprint == fingerprint {
            println!("train {}: up-to-date ({})", arm.tag(), run_dir.display());
            return Ok((report, run_dir));
        }
    }
    fs::create_dir_all(&run_dir)?;
    let resolved = RunConfig {
        train: train_config.clone(),
        ..config.clone()
    };
    write_resolved_config(&run_dir, &resolved)?;
    io::write_json(&run_dir.join("train_config.json"), &train_config)?;
    write_item_graph(layout, arm, &train_config, &data, &run_dir)?;
    log::info!("training {} into {}", arm.label(), run_dir.display());
    let outcome = trainer::fit(
        &data,
        &train_config,
        &FitOptions {
            run_dir: Some(run_dir.clone()),
            label: arm.label().to_string(),
        },
    )?;
    println!(
        "train {}: {} epochs, best epoch {} (valid R@{} {:.4})",
        arm.tag(),
        outcome.epochs_run,
        outcome.best_epoch,
        train_config.early_stop_k,
        outcome.best_valid_recall
    );
    Ok((outcome.test, run_dir))
}

fn write_item_graph(layout: &Layout, arm: AblationArm, config: &TrainConfig, data: &TrainData, run_dir: &Path) -> anyhow::Result<()> {
    let textual = FeatureTable::read(&layout.textual())?;
    let visual = FeatureTable::read(&layout.visual(VisualSource::of(arm)))?;
    let graph = build_item_knn(&visual, &textual, config.k)?;
    graph.write(
        &run_dir.join("item_graph.bin"),
        &[data.visual_fingerprint.clone(), data.textual_fingerprint.clone()],
    )?;
    Ok(())
}

pub fn train(config: &RunConfig, layout: &Layout, arm: Option<AblationArm>) -> anyhow::Result<()> {
    let arm = arm.unwrap_or(config.train.arm);
    let (report, _) = train_arm(config, layout, arm)?;
    print!("{}", render_table(&[report]));
    Ok(())
}

/// A finished run directory and the data it was trained on.
struct LoadedRun {
    model: Model,
    config: TrainConfig,
    data: TrainData,
    run_dir: PathBuf,
}

fn load_run(config: &RunConfig, layout: &Layout, arm: Option<AblationArm>, run_dir: Option<&Path>) -> anyhow::Result<LoadedRun> {
    let (train_config, run_dir) = match run_dir {
        Some(dir) => {
            let path = dir.join("train_config.json");
            if !path.exists() {
                return Err(UsageError(format!("{} is not a run directory (no train_config.json)", dir.display())).into());
            }
            (io::read_json::<TrainConfig>(&path)?, Some(dir.to_path_buf()))
        }
        None => (arm_config(config, arm.unwrap_or(config.train.arm)), None),
    };
    let data = train_data(layout, train_config.arm, &train_config)?;
    let fingerprint = trainer::run_fingerprint(&train_config, &data);
    let run_dir = run_dir.unwrap_or_else(|| layout.run_dir(train_config.arm, &fingerprint));
    let checkpoint = run_dir.join("checkpoint");
    if !checkpoint.join(infofuse_core::encoder::MANIFEST_FILE).exists() {
        return Err(Error::MissingArtifact {
            what: format!("checkpoint under {}", run_dir.display()),
            command: format!("infofuse train --arm {}", train_config.arm.tag()),
        }
        .into());
    }
    let (model, manifest): (Model, CheckpointManifest) = Model::load(&checkpoint)?;
    if manifest.config_fingerprint != fingerprint {
        return Err(Error::Format {
            what: format!("checkpoint {}", checkpoint.display()),
            message: "trained on a different split, feature set or configuration".into(),
        }
        .into());
    }
    Ok(LoadedRun {
        model,
        config: train_config,
        data,
        run_dir,
    })
}

pub fn evaluate(config: &RunConfig, layout: &Layout, arm: Option<AblationArm>, run_dir: Option<&Path>, with_bpr_mf: bool) -> anyhow::Result<()> {
    let run = load_run(config, layout, arm, run_dir)?;
    let label = run.config.arm.label();
    let mut reports = vec![trainer::evaluate_model(&run.model, &run.data, &run.config, label, true)?];
    let options = trainer::eval_options(&run.config, &run.data, "Popularity", "test");
    let split = &run.data.split;
    reports.push(evaluator::evaluate(&Popularity::fit(&split.train), &split.train, &split.test, &options));
    if with_bpr_mf {
        let bpr = BprMf::fit(&split.train, &split.valid, &config.bpr_mf_config());
        let options = trainer::eval_options(&run.config, &run.data, "BPR-MF", "test");
        reports.push(evaluator::evaluate(&bpr, &split.train, &split.test, &options));
    }
    io::write_json(&run.run_dir.join("evaluation.json"), &reports)?;
    print!("{}", render_table(&reports));
    Ok(())
}

/// Combined output of an ablation sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: AblationArm,
    pub run_dir: PathBuf,
    pub report: MetricsReport,
}

pub fn ablate(config: &RunConfig, layout: &Layout, arms: &[AblationArm], skip_missing: bool) -> anyhow::Result<()> {
    let arms: Vec<AblationArm> = if arms.is_empty() { AblationArm::ALL.to_vec() } else { arms.to_vec() };
    let mut summary = AblationSummary {
        rows: Vec::new(),
        skipped: Vec::new(),
    };
    for arm in arms {
        let source = VisualSource::of(arm);
        if skip_missing && !layout.visual(source).exists() {
            log::warn!("skipping {}: {} not found; run `{}`", arm.tag(), layout.visual(source).display(), source.producer());
            summary.skipped.push(arm.tag().to_string());
            continue;
        }
        let (report, run_dir) = train_arm(config, layout, arm)?;
        summary.rows.push(AblationRow { arm, run_dir, report });
    }
    let reports: Vec<MetricsReport> = summary.rows.iter().map(|r| r.report.clone()).collect();
    let table = render_table(&reports);
    let dir = layout.ablation_dir();
    fs::create_dir_all(&dir)?;
    write_resolved_config(&dir, config)?;
    io::write_json(&dir.join("ablation.json"), &summary)?;
    io::write_atomic(&dir.join("table.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

pub fn export_embeddings(config: &RunConfig, layout: &Layout, arm: Option<AblationArm>, run_dir: Option<&Path>) -> anyhow::Result<()> {
    let run = load_run(config, layout, arm, run_dir)?;
    let embeddings = run.model.embeddings(&run.data.inputs)?;
    let name = run.run_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    let dir = layout.exports_dir().join(name);
    fs::create_dir_all(&dir)?;
    let vocab = run.data.split.vocab();
    for (what, keys, matrix) in [("items", &vocab.items, &embeddings.items), ("users", &vocab.users, &embeddings.users)] {
        let projection = pca_2d(matrix);
        let mut out = String::from("id\tpc1\tpc2");
        for j in 0..matrix.ncols() {
            out.push_str(&format!("\te{j}"));
        }
        out.push('\n');
        for (r, key) in keys.iter().enumerate() {
            out.push_str(key);
            for value in projection.coords.row(r).iter().chain(matrix.row(r).iter()) {
                out.push_str(&format!("\t{value}"));
            }
            out.push('\n');
        }
        io::write_atomic(&dir.join(format!("{what}.tsv")), out.as_bytes())?;
        io::write_json(&dir.join(format!("{what}_pca.json")), &projection.variance)?;
    }
    write_resolved_config(&dir, config)?;
    println!("export: wrote {}", dir.display());
    Ok(())
}

pub fn synthesize(dir: &Path, seed: u64) -> anyhow::Result<()> {
    use infofuse_core::synthetic::{planted_blocks, write_corpus, SyntheticConfig};
    let data = planted_blocks(&SyntheticConfig {
        seed,
        ..SyntheticConfig::default()
    })?;
    write_corpus(&data, dir)?;
    println!(
        "synthesize: {} users, {} items, {} interactions in {}",
        data.interactions.n_users(),
        data.interactions.n_items(),
        data.interactions.len(),
        dir.display()
    );
    Ok(())
}
