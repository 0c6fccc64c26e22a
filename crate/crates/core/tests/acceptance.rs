//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1 to 6 and 10 train on real MNIST, read from `MNIST_DIR` or
//! `data/mnist` at the workspace root. The desk profile is 16 nodes, a
//! stratified quarter of the training set, 150 rounds, seeds 1 to 3 and the
//! `mlp_small` preset. On a single core the whole suite takes about an hour.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use dflsim::config::{parse_config_str, Cell, ExperimentConfig};
use dflsim::dataset::{
    build_assignment, load_idx, split_validation, AllocationScheme, DatasetError,
    FederatedAssignment, LabeledDataset, Source, NUM_CLASSES, PIXELS,
};
use dflsim::experiment::run_experiment;
use dflsim::metrics::{Metric, RoundRecord};
use dflsim::neuralnet::{average_params, ArchitectureConfig, CnnConfig, MlpConfig, ParamSet};
use dflsim::rng::{derive, Stream};
use dflsim::runner::{self, Datasets};
use dflsim::scenario::{Paradigm, Scheme};
use dflsim::topology::{centrality_ranking, generate_ba};
use rand::Rng;

mod common;

const COLLATERAL: u8 = 4;
const TARGET: u8 = 9;
const ROUNDS: usize = 150;

type Outcome = Result<String, String>;

fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn desk_config() -> &'static ExperimentConfig {
    static CFG: OnceLock<ExperimentConfig> = OnceLock::new();
    CFG.get_or_init(|| {
        let text = format!(
            "[experiment]\nn_nodes = 16\nrounds = {ROUNDS}\nseeds = [1, 2, 3]\neval_every = {ROUNDS}\n\
             [data]\nmnist_dir = {:?}\nsubset_fraction = 0.25\n[model]\npreset = \"mlp_small\"\n",
            mnist_dir().display().to_string()
        );
        parse_config_str(&text, &[]).expect("desk profile is a valid config")
    })
}

fn desk_data() -> &'static Datasets {
    static DATA: OnceLock<Datasets> = OnceLock::new();
    DATA.get_or_init(|| {
        let cfg = desk_config();
        runner::preflight(cfg)
            .unwrap_or_else(|e| panic!("{e}; set MNIST_DIR to the IDX directory"));
        runner::load_datasets(cfg).expect("MNIST loads")
    })
}

/// Final-round records of each seed for one desk-profile cell.
fn desk(paradigm: Paradigm, scheme: Scheme, alpha: f64, p: f64) -> Arc<Vec<Vec<RoundRecord>>> {
    type Slot = Arc<OnceLock<Arc<Vec<Vec<RoundRecord>>>>>;
    static RUNS: OnceLock<Mutex<HashMap<String, Slot>>> = OnceLock::new();
    let cell = Cell {
        paradigm,
        scheme,
        alpha,
        p,
    };
    let slot = RUNS
        .get_or_init(Default::default)
        .lock()
        .unwrap()
        .entry(cell.stem())
        .or_default()
        .clone();
    slot.get_or_init(|| {
        let cfg = desk_config();
        let data = desk_data();
        let start = Instant::now();
        let runs = cfg
            .seeds
            .iter()
            .map(|&rep| {
                let mut last = Vec::new();
                run_experiment(&cfg.scenario(&cell, rep), &data.train, &data.test, |r| {
                    if r.round == ROUNDS {
                        last.push(r);
                    }
                    Ok(())
                })
                .unwrap_or_else(|e| panic!("{}: {e}", cell.stem()));
                last
            })
            .collect();
        println!(
            "    ran {} over 3 seeds in {:.0}s",
            cell.stem(),
            start.elapsed().as_secs_f64()
        );
        Arc::new(runs)
    })
    .clone()
}

fn node_mean(records: &[RoundRecord], metric: Metric) -> f64 {
    records.iter().map(|r| r.metric(metric)).sum::<f64>() / records.len() as f64
}

/// Node mean per seed, then mean over seeds.
fn seed_mean(runs: &[Vec<RoundRecord>], metric: Metric) -> f64 {
    runs.iter().map(|r| node_mean(r, metric)).sum::<f64>() / runs.len() as f64
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn no_corruption_convergence() -> Outcome {
    let dfl = desk(Paradigm::Dfl, Scheme::None, 0.0, 0.0);
    let central = desk(Paradigm::Centralized, Scheme::None, 0.0, 0.0);
    let mut ok = true;
    let mut parts = Vec::new();
    for class in [COLLATERAL, TARGET] {
        let d = seed_mean(&dfl, Metric::F1(class));
        let c = seed_mean(&central, Metric::F1(class));
        ok &= d >= 0.93 && (d - c).abs() <= 0.03;
        parts.push(format!("F1({class}) dfl {d:.4} centralized {c:.4}"));
    }
    check(
        ok,
        format!("{} (need dfl >= 0.93 and within 0.03)", parts.join(", ")),
    )
}

fn balanced_damage_ordering() -> Outcome {
    let runs = desk(Paradigm::Dfl, Scheme::Balanced, 0.95, 0.9);
    let c = seed_mean(&runs, Metric::F1(COLLATERAL));
    let t = seed_mean(&runs, Metric::F1(TARGET));
    check(
        t - c >= 0.03,
        format!("F1(4) {c:.4} F1(9) {t:.4} gap {:.4} (need >= 0.03)", t - c),
    )
}

fn balanced_vs_unbalanced() -> Outcome {
    let bal = seed_mean(
        &desk(Paradigm::Dfl, Scheme::Balanced, 0.95, 0.9),
        Metric::F1(COLLATERAL),
    );
    let unbal = seed_mean(
        &desk(Paradigm::Dfl, Scheme::Unbalanced, 0.95, 0.9),
        Metric::F1(COLLATERAL),
    );
    check(
        unbal - bal >= 0.15,
        format!(
            "F1(4) unbalanced {unbal:.4} balanced {bal:.4} gap {:.4} (need >= 0.15)",
            unbal - bal
        ),
    )
}

fn bounded_accuracy_impact() -> Outcome {
    let clean = seed_mean(
        &desk(Paradigm::Dfl, Scheme::None, 0.0, 0.0),
        Metric::Accuracy,
    );
    let bad = seed_mean(
        &desk(Paradigm::Dfl, Scheme::Balanced, 0.95, 0.9),
        Metric::Accuracy,
    );
    check(
        clean - bad <= 0.15,
        format!(
            "accuracy p=0 {clean:.4} p=0.9 {bad:.4} drop {:.4} (need <= 0.15)",
            clean - bad
        ),
    )
}

fn clean_neighbor_mitigation() -> Outcome {
    let runs = desk(Paradigm::Dfl, Scheme::Balanced, 0.95, 0.9);
    let mut with = Vec::new();
    let mut network = Vec::new();
    for seed in runs.iter() {
        let group: Vec<RoundRecord> = seed
            .iter()
            .filter(|r| r.has_clean_neighbor == Some(true))
            .cloned()
            .collect();
        if group.is_empty() {
            continue;
        }
        with.push(node_mean(&group, Metric::F1(COLLATERAL)));
        network.push(node_mean(seed, Metric::F1(COLLATERAL)));
    }
    if with.is_empty() {
        return Err("no node has a clean neighbour in any seed".into());
    }
    let w = with.iter().sum::<f64>() / with.len() as f64;
    let n = network.iter().sum::<f64>() / network.len() as f64;
    check(
        w >= n,
        format!(
            "F1(4) with clean neighbour {w:.4} network {n:.4} over {} seeds",
            with.len()
        ),
    )
}

fn mild_corruption() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for p in [0.1, 0.5, 0.9] {
        let dfl = desk(Paradigm::Dfl, Scheme::Balanced, 0.5, p);
        let fl = desk(Paradigm::Fl, Scheme::Balanced, 0.5, p);
        let mut worst: f64 = 0.0;
        for class in [COLLATERAL, TARGET] {
            worst = worst.max(
                (seed_mean(&dfl, Metric::F1(class)) - seed_mean(&fl, Metric::F1(class))).abs(),
            );
        }
        ok &= worst <= 0.05;
        parts.push(format!("p={p} max |dfl-fl| {worst:.4}"));
    }
    check(ok, format!("{} (need <= 0.05)", parts.join(", ")))
}

fn random_arch<R: Rng>(rng: &mut R) -> ArchitectureConfig {
    if rng.random_bool(0.5) {
        ArchitectureConfig::Mlp(MlpConfig {
            hidden_units: rng.random_range(1..=8),
            dropout: 0.0,
        })
    } else {
        ArchitectureConfig::Cnn(CnnConfig {
            conv1_channels: rng.random_range(1..=3),
            conv2_channels: rng.random_range(1..=3),
            kernel: [3, 5][rng.random_range(0..2)],
            fc1_units: rng.random_range(1..=4),
            conv_dropout: 0.0,
            fc_dropout: 0.0,
        })
    }
}

/// Relative error of each coordinate against a compensated, weight-normalized
/// sum, scaled by the sum of absolute terms.
fn aggregation_oracle() -> Outcome {
    let mut rng = derive(7, Stream::Init, &[]);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let arch = random_arch(&mut rng);
        let k = rng.random_range(1..=6);
        let models: Vec<ParamSet> = (0..k)
            .map(|_| {
                let mut p = ParamSet::zeros(arch);
                for v in p.values_mut() {
                    let sign = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
                    *v = sign * 10f64.powf(rng.random_range(-3.0..3.0));
                }
                p
            })
            .collect();
        let mut weights: Vec<f64> = (0..k)
            .map(|_| {
                if rng.random_bool(0.15) {
                    0.0
                } else {
                    rng.random_range(0.0..1000.0)
                }
            })
            .collect();
        if weights.iter().all(|&w| w == 0.0) {
            weights[0] = rng.random_range(1.0..1000.0);
        }
        let pairs: Vec<(&ParamSet, f64)> = models.iter().zip(weights.iter().copied()).collect();
        let got = average_params(&pairs).map_err(|e| format!("case {case}: {e}"))?;
        if !got.same_shape(&models[0]) {
            return Err(format!("case {case}: output shape differs"));
        }
        let total: f64 = weights.iter().sum();
        let flat: Vec<Vec<f64>> = models.iter().map(|m| m.values().collect()).collect();
        for (c, g) in got.values().enumerate() {
            let terms: Vec<f64> = flat
                .iter()
                .zip(&weights)
                .map(|(x, w)| w / total * x[c])
                .collect();
            let (mut sum, mut comp) = (0.0f64, 0.0f64);
            for &t in &terms {
                let s = sum + t;
                comp += if sum.abs() >= t.abs() {
                    (sum - s) + t
                } else {
                    (t - s) + sum
                };
                sum = s;
            }
            let expect = sum + comp;
            let scale: f64 = terms.iter().map(|t| t.abs()).sum();
            let rel = if scale == 0.0 {
                g.abs()
            } else {
                (g - expect).abs() / scale
            };
            worst = worst.max(rel);
        }
    }
    check(
        worst <= 1e-12,
        format!("1000 cases, worst relative error {worst:.2e} (need <= 1e-12)"),
    )
}

fn gradient_suite() -> Outcome {
    let archs = [
        ("compact_cnn", ArchitectureConfig::compact_cnn()),
        (
            "mlp_dropout",
            ArchitectureConfig::Mlp(MlpConfig {
                hidden_units: 16,
                dropout: 0.5,
            }),
        ),
        ("mlp_small", ArchitectureConfig::mlp_small()),
    ];
    let mut worst = (String::new(), 0.0f64);
    let mut kinks = 0;
    for (i, (name, arch)) in archs.into_iter().enumerate() {
        for r in common::gradient_check(arch, 80 + i as u64, 20) {
            kinks += r.kinks;
            if r.max_rel > worst.1 || worst.0.is_empty() {
                worst = (format!("{name}/{}", r.tensor), r.max_rel);
            }
        }
    }
    check(
        worst.1 <= 1e-3,
        format!(
            "20 probes per tensor, worst {} at {:.2e} (need <= 1e-3), {kinks} kink probes redrawn",
            worst.0, worst.1
        ),
    )
}

fn labels_only(per_class: usize) -> LabeledDataset {
    let labels: Vec<u8> = (0..per_class * NUM_CLASSES)
        .map(|i| (i % NUM_CLASSES) as u8)
        .collect();
    LabeledDataset::new(vec![0.0; labels.len() * PIXELS], labels, Source::Train).unwrap()
}

fn check_partition(ds: &LabeledDataset, a: &FederatedAssignment) -> Result<(), String> {
    a.validate(ds).map_err(|e| e.to_string())?;
    let held: usize = a.nodes.iter().map(|n| n.train.len() + n.val.len()).sum();
    if held != ds.len() {
        return Err(format!("{held} samples held, dataset has {}", ds.len()));
    }
    Ok(())
}

fn allocation_suite() -> Outcome {
    let ds = labels_only(600);
    let n_t = ds.indices_of(TARGET).len();
    let mut cases = 0;
    for n in [10usize, 50] {
        for k in 0..=10usize {
            let p = k as f64 / 10.0;
            for seed in 1..=3u64 {
                let g = generate_ba(n, 1, &mut derive(seed, Stream::Graph, &[])).unwrap();
                let ranking = centrality_ranking(&g);
                for scheme in [AllocationScheme::Balanced, AllocationScheme::Unbalanced] {
                    let ctx = format!("N={n} p={p} seed={seed} {scheme:?}");
                    let a = build_assignment(
                        &ds,
                        &ranking,
                        scheme,
                        TARGET,
                        p,
                        &mut derive(seed, Stream::Allocation, &[]),
                    )
                    .map_err(|e| format!("{ctx}: {e}"))?;
                    check_partition(&ds, &a).map_err(|e| format!("{ctx}: {e}"))?;
                    let flagged: BTreeSet<usize> =
                        (0..n).filter(|&i| a.nodes[i].holds_corrupt()).collect();
                    let targets = |i: usize| {
                        a.nodes[i]
                            .train
                            .iter()
                            .filter(|&&s| ds.label(s) == TARGET)
                            .count()
                    };
                    match scheme {
                        AllocationScheme::Balanced => {
                            let expect: BTreeSet<usize> = ranking.ordered()[..(k * n).div_ceil(10)]
                                .iter()
                                .copied()
                                .collect();
                            if flagged != expect {
                                return Err(format!(
                                    "{ctx}: flagged {flagged:?}, expected the top {}",
                                    expect.len()
                                ));
                            }
                            for i in 0..n {
                                let share = targets(i);
                                if share.abs_diff(n_t / n) > 1 {
                                    return Err(format!(
                                        "{ctx}: node {i} holds {share} target samples"
                                    ));
                                }
                                let bad = a.nodes[i].corrupt.len();
                                if bad != if flagged.contains(&i) { share } else { 0 } {
                                    return Err(format!("{ctx}: node {i} flags {bad} of {share}"));
                                }
                            }
                        }
                        AllocationScheme::Unbalanced => {
                            let hub = ranking.top();
                            let bad = (k * n_t).div_ceil(10);
                            let expect: BTreeSet<usize> = if k == 0 {
                                BTreeSet::new()
                            } else {
                                BTreeSet::from([hub])
                            };
                            if flagged != expect {
                                return Err(format!(
                                    "{ctx}: flagged {flagged:?}, expected {expect:?}"
                                ));
                            }
                            if targets(hub) != bad || a.nodes[hub].corrupt.len() != bad {
                                return Err(format!(
                                    "{ctx}: hub holds {} target samples",
                                    targets(hub)
                                ));
                            }
                            for i in (0..n).filter(|&i| i != hub) {
                                if targets(i).abs_diff((n_t - bad) / (n - 1)) > 1 {
                                    return Err(format!(
                                        "{ctx}: node {i} holds {} target samples",
                                        targets(i)
                                    ));
                                }
                            }
                        }
                    }
                    for class in (0..NUM_CLASSES as u8).filter(|&c| c != TARGET) {
                        let counts: Vec<usize> = a
                            .nodes
                            .iter()
                            .map(|nd| nd.train.iter().filter(|&&s| ds.label(s) == class).count())
                            .collect();
                        if counts.iter().max().unwrap() - counts.iter().min().unwrap() > 1 {
                            return Err(format!("{ctx}: class {class} spread unevenly"));
                        }
                    }
                    let split =
                        split_validation(&ds, &a, 0.2, &mut derive(seed, Stream::Validation, &[]))
                            .map_err(|e| format!("{ctx}: {e}"))?;
                    check_partition(&ds, &split).map_err(|e| format!("{ctx} after split: {e}"))?;
                    if split
                        .nodes
                        .iter()
                        .zip(&a.nodes)
                        .any(|(s, o)| s.corrupt != o.corrupt)
                    {
                        return Err(format!("{ctx}: validation split changed the flags"));
                    }
                    cases += 1;
                }
            }
        }
    }
    Ok(format!("{cases} allocations checked"))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let outputs: Vec<Vec<(String, Vec<u8>)>> = [1usize, 2]
        .iter()
        .map(|threads| {
            let out = tmp.path().join(format!("threads{threads}"));
            let text = format!(
                "[experiment]\nparadigm = [\"dfl\", \"fl\"]\nscheme = \"balanced\"\nn_nodes = 6\nalpha = 0.95\n\
                 p = [0.0, 0.5]\nrounds = 3\nseeds = [1, 2]\nthreads = {threads}\noutput_dir = {:?}\n\
                 [data]\nmnist_dir = {:?}\nsubset_fraction = 0.02\n[model]\npreset = \"mlp_small\"\n",
                out.display().to_string(),
                mnist_dir().display().to_string()
            );
            let cfg = parse_config_str(&text, &[]).map_err(|e| e.to_string())?;
            let files = runner::run(&cfg).map_err(|e| e.to_string())?;
            files
                .cell_csvs
                .iter()
                .map(|p| Ok((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(p).map_err(|e| e.to_string())?)))
                .collect()
        })
        .collect::<Result<_, String>>()?;
    check(
        outputs[0] == outputs[1] && outputs[0].len() == 4,
        format!(
            "{} metrics CSVs from serial and 2-thread runs compared byte for byte",
            outputs[0].len()
        ),
    )
}

fn idx_pair(count: u32, images: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::new();
    for w in [0x0803u32, count, 28, 28] {
        img.extend_from_slice(&w.to_be_bytes());
    }
    img.extend_from_slice(images);
    let mut lab = Vec::new();
    for w in [0x0801u32, count] {
        lab.extend_from_slice(&w.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    (img, lab)
}

fn idx_golden() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let load = |name: &str, img: &[u8], lab: &[u8]| -> Result<LabeledDataset, DatasetError> {
        let (ip, lp) = (
            tmp.path().join(format!("{name}.img")),
            tmp.path().join(format!("{name}.lab")),
        );
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        load_idx(&ip, &lp, Source::Test)
    };
    let pixels: Vec<u8> = (0..2 * PIXELS).map(|i| (i * 7 % 256) as u8).collect();
    let (img, lab) = idx_pair(2, &pixels, &[7, 3]);

    let ds = load("good", &img, &lab).map_err(|e| format!("valid fixture rejected: {e}"))?;
    if ds.len() != 2 || ds.labels() != [7, 3] {
        return Err(format!(
            "decoded {} samples with labels {:?}",
            ds.len(),
            ds.labels()
        ));
    }
    for (k, &b) in pixels.iter().enumerate() {
        if ds.image(k / PIXELS)[k % PIXELS] != b as f32 / 255.0 {
            return Err(format!(
                "pixel {k} decoded as {}",
                ds.image(k / PIXELS)[k % PIXELS]
            ));
        }
    }

    let mut bad_magic = img.clone();
    bad_magic[3] = 0x01;
    let mut labels_magic = lab.clone();
    labels_magic[3] = 0x03;
    type Case<'a> = (
        &'a str,
        Result<LabeledDataset, DatasetError>,
        fn(&DatasetError) -> bool,
    );
    let failures: Vec<Case> = vec![
        (
            "image magic",
            load("m1", &bad_magic, &lab),
            |e| matches!(e, DatasetError::Format { msg, .. } if msg.contains("magic")),
        ),
        (
            "label magic",
            load("m2", &img, &labels_magic),
            |e| matches!(e, DatasetError::Format { msg, .. } if msg.contains("magic")),
        ),
        (
            "truncated pixels",
            load("t1", &img[..img.len() - 1], &lab),
            |e| e.to_string().contains("truncated"),
        ),
        ("truncated header", load("t2", &img[..10], &lab), |e| {
            e.to_string().contains("truncated")
        }),
        (
            "truncated labels",
            load("t3", &img, &lab[..lab.len() - 1]),
            |e| e.to_string().contains("truncated"),
        ),
        (
            "count mismatch",
            load("c1", &img, &idx_pair(3, &[], &[1, 2, 3]).1),
            |e| matches!(e, DatasetError::Consistency(_)),
        ),
        (
            "label range",
            load("l1", &img, &idx_pair(2, &[], &[7, 10]).1),
            |e| e.to_string().contains("label 10"),
        ),
    ];
    for (what, result, expected) in failures {
        match result {
            Ok(_) => return Err(format!("{what}: accepted")),
            Err(e) if !expected(&e) => return Err(format!("{what}: wrong error `{e}`")),
            Err(_) => {}
        }
    }
    Ok("exact decoding plus 7 malformed fixtures rejected".into())
}

fn mnist_counts() -> Outcome {
    let cfg = desk_config();
    runner::preflight(cfg).map_err(|e| e.to_string())?;
    let train = load_idx(
        &cfg.data.train_images,
        &cfg.data.train_labels,
        Source::Train,
    )
    .map_err(|e| e.to_string())?;
    let test = load_idx(&cfg.data.test_images, &cfg.data.test_labels, Source::Test)
        .map_err(|e| e.to_string())?;
    check(
        train.len() == 60_000 && test.len() == 10_000,
        format!("{} training and {} test images", train.len(), test.len()),
    )
}

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 12] = [
        ("criterion 7 aggregation oracle", aggregation_oracle),
        ("criterion 8 gradient suite", gradient_suite),
        ("criterion 9 allocation suite", allocation_suite),
        ("criterion 11 IDX golden fixtures", idx_golden),
        ("MNIST files load with full counts", mnist_counts),
        ("criterion 10 serial and parallel runs match", determinism),
        (
            "criterion 1 no-corruption convergence",
            no_corruption_convergence,
        ),
        (
            "criterion 2 balanced damage ordering",
            balanced_damage_ordering,
        ),
        (
            "criterion 3 balanced vs unbalanced gap",
            balanced_vs_unbalanced,
        ),
        (
            "criterion 4 bounded accuracy impact",
            bounded_accuracy_impact,
        ),
        (
            "criterion 5 clean-neighbour mitigation",
            clean_neighbor_mitigation,
        ),
        ("criterion 6 mild corruption, DFL vs FL", mild_corruption),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|w| name.contains(w.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
