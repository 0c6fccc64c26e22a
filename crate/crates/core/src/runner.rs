//! Sweep execution and reporting: one metrics CSV per sweep cell, a summary
//! CSV aggregated over seeds, and SVG charts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::chart::{render_chart, Series};
use crate::config::{Cell, ExperimentConfig};
use crate::corruption::write_pgm;
use crate::dataset::{
    load_idx, stratified_subset, DatasetError, LabeledDataset, Source, NUM_CLASSES,
};
use crate::experiment::{prepare, run_experiment, ExperimentError};
use crate::metrics::{
    aggregate_seeds, node_average, read_csv, write_csv, CellKey, Metric, MetricsError, RoundRecord,
};
use crate::rng::{derive, Stream};
use crate::scenario::{Paradigm, Scheme};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("pre-flight check failed: {0}")]
    Preflight(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{cell} (run seed {seed}): {source}")]
    Experiment {
        cell: String,
        seed: u64,
        #[source]
        source: ExperimentError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Metrics {
        path: PathBuf,
        #[source]
        source: MetricsError,
    },
    #[error("thread pool: {0}")]
    Threads(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Training subset and full test set.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Fails if any input file is missing or the output path is unusable.
pub fn preflight(cfg: &ExperimentConfig) -> Result<(), RunError> {
    let missing: Vec<String> = cfg
        .data
        .all()
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(RunError::Preflight(format!(
            "missing dataset files: {}",
            missing.join(", ")
        )));
    }
    if cfg.output_dir.exists() && !cfg.output_dir.is_dir() {
        return Err(RunError::Preflight(format!(
            "{} exists and is not a directory",
            cfg.output_dir.display()
        )));
    }
    Ok(())
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets, RunError> {
    let d = &cfg.data;
    let full = load_idx(&d.train_images, &d.train_labels, Source::Train)?;
    let test = load_idx(&d.test_images, &d.test_labels, Source::Test)?;
    let train = stratified_subset(
        &full,
        cfg.subset_fraction,
        &mut derive(cfg.subset_seed, Stream::Subset, &[]),
    )?;
    Ok(Datasets { train, test })
}

/// Runs every replicate of one cell; records are ordered by seed, round, node.
pub fn run_cell(
    cfg: &ExperimentConfig,
    cell: &Cell,
    data: &Datasets,
) -> Result<Vec<RoundRecord>, RunError> {
    let mut records = Vec::new();
    for &replicate in &cfg.seeds {
        let scenario = cfg.scenario(cell, replicate);
        if let Some(plan) = &scenario.checkpoints {
            fs::create_dir_all(&plan.dir).map_err(io_err(&plan.dir))?;
        }
        log::info!(
            "running {} with seeds {}/{}",
            cell.stem(),
            replicate.graph,
            replicate.run
        );
        run_experiment(&scenario, &data.train, &data.test, |r| {
            records.push(r);
            Ok(())
        })
        .map_err(|source| RunError::Experiment {
            cell: cell.stem(),
            seed: replicate.run,
            source,
        })?;
    }
    Ok(records)
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, RunError> {
    if threads <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| RunError::Threads(e.to_string()))?;
    Ok(pool.install(f))
}

fn write_manifests(cfg: &ExperimentConfig, cell: &Cell, data: &Datasets) -> Result<(), RunError> {
    let dir = cfg.output_dir.join("manifests");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for &replicate in &cfg.seeds {
        let scenario = cfg.scenario(cell, replicate);
        let setup = prepare(&scenario, &data.train).map_err(|source| RunError::Experiment {
            cell: cell.stem(),
            seed: replicate.run,
            source,
        })?;
        let base = format!("{}_seed{}", cell.stem(), replicate.run);
        let manifest = dir.join(format!("{base}.csv"));
        fs::write(&manifest, setup.assignment.to_manifest_csv()).map_err(io_err(&manifest))?;
        if cell.paradigm != Paradigm::Centralized {
            let edges = dir.join(format!("{base}.edges"));
            fs::write(&edges, setup.graph.to_edge_list()).map_err(io_err(&edges))?;
        }
    }
    Ok(())
}

/// Files written by a run or a report.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Outputs {
    pub cell_csvs: Vec<PathBuf>,
    pub summary: Option<PathBuf>,
    pub charts: Vec<PathBuf>,
}

/// Runs the whole sweep and writes CSVs, summary and charts to the output directory.
pub fn run(cfg: &ExperimentConfig) -> Result<Outputs, RunError> {
    preflight(cfg)?;
    let data = load_datasets(cfg)?;
    fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;
    let mut outputs = Outputs::default();
    let mut all = Vec::new();
    for cell in cfg.cells() {
        if cfg.write_manifests {
            write_manifests(cfg, &cell, &data)?;
        }
        let records = with_threads(cfg.threads, || run_cell(cfg, &cell, &data))??;
        let path = cfg.output_dir.join(format!("{}.csv", cell.stem()));
        let key = CellKey {
            paradigm: cell.paradigm,
            scheme: cell.scheme,
            alpha: cell.alpha,
            p: cell.p,
        };
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        write_csv(std::io::BufWriter::new(file), &key, &records).map_err(|source| {
            RunError::Metrics {
                path: path.clone(),
                source,
            }
        })?;
        outputs.cell_csvs.push(path);
        all.extend(records.into_iter().map(|r| (key, r)));
    }
    let (summary, charts) = write_report(
        &all,
        &cfg.output_dir,
        cfg.collateral_class,
        cfg.target_class,
    )?;
    outputs.summary = Some(summary);
    outputs.charts = charts;
    Ok(outputs)
}

/// Rebuilds summary and charts from the cell CSVs in `input`.
pub fn report(input: &Path, out: &Path, collateral: u8, target: u8) -> Result<Outputs, RunError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(input)
        .map_err(io_err(input))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "csv") && p.file_name().is_some_and(|n| n != SUMMARY)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(RunError::Preflight(format!(
            "no metrics CSVs in {}",
            input.display()
        )));
    }
    let mut all = Vec::new();
    for path in &paths {
        let file = fs::File::open(path).map_err(io_err(path))?;
        all.extend(read_csv(file).map_err(|source| RunError::Metrics {
            path: path.clone(),
            source,
        })?);
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let (summary, charts) = write_report(&all, out, collateral, target)?;
    Ok(Outputs {
        cell_csvs: paths,
        summary: Some(summary),
        charts,
    })
}

const SUMMARY: &str = "summary.csv";

/// Seed-aggregated series of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub cell: CellKey,
    pub seeds: usize,
    /// Per metric name: `(round, mean, ci_half_width)`.
    pub metrics: BTreeMap<String, Vec<(usize, f64, Option<f64>)>>,
}

type BySeed = BTreeMap<u64, Vec<RoundRecord>>;

fn group_key(c: &CellKey) -> (Paradigm, Scheme, u64, u64) {
    (c.paradigm, c.scheme, c.alpha.to_bits(), c.p.to_bits())
}

/// Node-averaged then seed-aggregated metrics per cell, ordered by cell.
/// For decentralized cells the collateral F1 is also split by clean-neighbour flag.
pub fn summarize(
    records: &[(CellKey, RoundRecord)],
    collateral: u8,
) -> Result<Vec<CellSummary>, MetricsError> {
    let mut cells: BTreeMap<_, (CellKey, BySeed)> = BTreeMap::new();
    for (key, r) in records {
        let entry = cells
            .entry(group_key(key))
            .or_insert_with(|| (*key, BTreeMap::new()));
        entry.1.entry(r.seed).or_default().push(r.clone());
    }
    let mut metrics: Vec<Metric> = vec![Metric::Accuracy];
    metrics.extend((0..NUM_CLASSES as u8).map(Metric::F1));
    let mut out = Vec::new();
    for (cell, by_seed) in cells.values() {
        let mut summary = CellSummary {
            cell: *cell,
            seeds: by_seed.len(),
            metrics: BTreeMap::new(),
        };
        for &m in &metrics {
            let series: Vec<Vec<(usize, f64)>> =
                by_seed.values().map(|rs| node_average(rs, m)).collect();
            let agg = aggregate_seeds(&series, 0.95)?;
            summary.metrics.insert(
                m.name(),
                agg.iter()
                    .map(|a| (a.round, a.mean, a.ci_half_width))
                    .collect(),
            );
        }
        if cell.paradigm == Paradigm::Dfl {
            for (suffix, flag) in [("clean_neighbor", true), ("no_clean_neighbor", false)] {
                let series: Vec<Vec<(usize, f64)>> = by_seed
                    .values()
                    .map(|rs| {
                        let group: Vec<RoundRecord> = rs
                            .iter()
                            .filter(|r| r.has_clean_neighbor == Some(flag))
                            .cloned()
                            .collect();
                        node_average(&group, Metric::F1(collateral))
                    })
                    .collect();
                // a group can be empty in some seeds; only aggregate when every seed has it
                if series.iter().all(|s| !s.is_empty()) {
                    if let Ok(agg) = aggregate_seeds(&series, 0.95) {
                        let name = format!("{}_{suffix}", Metric::F1(collateral).name());
                        summary.metrics.insert(
                            name,
                            agg.iter()
                                .map(|a| (a.round, a.mean, a.ci_half_width))
                                .collect(),
                        );
                    }
                }
            }
        }
        out.push(summary);
    }
    Ok(out)
}

fn write_report(
    records: &[(CellKey, RoundRecord)],
    out: &Path,
    collateral: u8,
    target: u8,
) -> Result<(PathBuf, Vec<PathBuf>), RunError> {
    let summary_path = out.join(SUMMARY);
    let summaries = summarize(records, collateral).map_err(|source| RunError::Metrics {
        path: summary_path.clone(),
        source,
    })?;

    let mut csv = String::from("paradigm,scheme,alpha,p,metric,round,mean,ci_half_width,seeds\n");
    for s in &summaries {
        for (name, points) in &s.metrics {
            for &(round, mean, ci) in points {
                let ci = ci.map(|c| c.to_string()).unwrap_or_default();
                csv.push_str(&format!(
                    "{},{},{},{},{name},{round},{mean},{ci},{}\n",
                    s.cell.paradigm, s.cell.scheme, s.cell.alpha, s.cell.p, s.seeds
                ));
            }
        }
    }
    fs::write(&summary_path, csv).map_err(io_err(&summary_path))?;

    // one chart per metric and (paradigm, scheme, alpha) group, one line per p
    type Group<'a> = ((Paradigm, Scheme, u64), Vec<&'a CellSummary>);
    let mut groups: Vec<Group> = Vec::new();
    for s in &summaries {
        let g = (s.cell.paradigm, s.cell.scheme, s.cell.alpha.to_bits());
        match groups.iter_mut().find(|(k, _)| *k == g) {
            Some((_, v)) => v.push(s),
            None => groups.push((g, vec![s])),
        }
    }
    let mut charts = Vec::new();
    for metric in [Metric::Accuracy, Metric::F1(collateral), Metric::F1(target)] {
        let name = metric.name();
        for ((paradigm, scheme, alpha_bits), members) in &groups {
            let alpha = f64::from_bits(*alpha_bits);
            let series: Vec<Series> = members
                .iter()
                .map(|s| Series {
                    name: format!("p={}", s.cell.p),
                    points: s.metrics[&name]
                        .iter()
                        .map(|&(r, m, ci)| (r, Some(m), ci))
                        .collect(),
                })
                .collect();
            let title = format!("{name}: {paradigm}, {scheme}, alpha={alpha}");
            let path = out.join(format!("chart_{name}_{paradigm}_{scheme}_a{alpha}.svg"));
            fs::write(&path, render_chart(&title, &name, &series)).map_err(io_err(&path))?;
            charts.push(path);
        }
    }
    Ok((summary_path, charts))
}

/// Dumps up to `limit` corrupted samples per corrupting cell (first replicate)
/// as PGM triples: original target image, collateral exemplar, corrupted result.
pub fn inspect_corruption(
    cfg: &ExperimentConfig,
    out: &Path,
    limit: usize,
) -> Result<Vec<PathBuf>, RunError> {
    preflight(cfg)?;
    let data = load_datasets(cfg)?;
    let replicate = cfg.seeds[0];
    let mut written = Vec::new();
    for cell in cfg
        .cells()
        .iter()
        .filter(|c| c.scheme != Scheme::None && c.p > 0.0)
    {
        let scenario = cfg.scenario(cell, replicate);
        let setup = prepare(&scenario, &data.train).map_err(|source| RunError::Experiment {
            cell: cell.stem(),
            seed: replicate.run,
            source,
        })?;
        let dir = out.join(cell.stem());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for i in setup.overlay.indices().take(limit) {
            let exemplar = setup
                .overlay
                .exemplar_of(i)
                .expect("every corrupted index records its exemplar");
            for (suffix, image) in [
                ("target", data.train.image(i)),
                ("exemplar", data.train.image(exemplar)),
                (
                    "corrupted",
                    setup.overlay.get(i).expect("index comes from the overlay"),
                ),
            ] {
                let path = dir.join(format!("sample{i}_{suffix}.pgm"));
                write_pgm(&path, image).map_err(io_err(&path))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
