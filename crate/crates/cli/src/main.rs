mod table;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use partlabel_core::ablation::{benchmark_datasets, first_iteration_comparison, run_ablation, AblationResult, AblationRow, BenchmarkConfig};
use partlabel_core::audit::{replay_audit, Clock};
use partlabel_core::dataset::{load_dataset, write_dataset, PreparationConfig, PreparedDataset};
use partlabel_core::label_tree::LabelTree;
use partlabel_core::oracle::{Oracle, OracleConfig};
use partlabel_core::proposer::baseline::{RandomProposer, UniformProposer};
use partlabel_core::proposer::builtin::{BuiltinProposer, ProposerConfig};
use partlabel_core::proposer::Proposer;
use partlabel_core::session::{working_tree, NodeSummary, Session, SessionOptions, SessionReport};
use partlabel_core::synthetic::{generate, label_tree, Family, SyntheticConfig};
use partlabel_core::SessionConfig;

use table::Table;

#[derive(Parser)]
#[command(name = "partlabel", version, about = "Active labeling of fine-grained 3D parts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled dataset (manifest, tree, shape files).
    Generate {
        #[arg(long, default_value = "chair")]
        family: Family,
        #[arg(long, default_value_t = 100)]
        shapes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.8)]
        symmetric_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the per-node proposer on a labeled dataset.
    Pretrain {
        #[arg(long)]
        dataset: PathBuf,
        /// Taxonomy to train against instead of the dataset's own.
        #[arg(long)]
        tree: Option<PathBuf>,
        /// Train a single model over the leaves instead of one per node.
        #[arg(long)]
        flat: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        points: Points,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one session against the simulated annotator.
    Simulate {
        #[arg(long)]
        dataset: PathBuf,
        /// SessionConfig JSON; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pretrained proposer; without it the baseline is used.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Baseline::Random)]
        baseline: Baseline,
        /// Probability of a wrong simulated answer.
        #[arg(long, default_value_t = 0.0)]
        error_rate: f64,
        #[command(flatten)]
        points: Points,
        /// Write the audit log here.
        #[arg(long)]
        audit: Option<PathBuf>,
        /// Report JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the five-row ablation and print time and accuracy per row.
    Ablate {
        /// Labeling set; without it a synthetic benchmark is generated.
        #[arg(long, requires = "train")]
        dataset: Option<PathBuf>,
        /// Pretraining set, disjoint from the labeling set.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long, default_value = "chair")]
        family: Family,
        #[arg(long, default_value_t = 50)]
        train_shapes: usize,
        #[arg(long, default_value_t = 200)]
        test_shapes: usize,
        /// Rows to run (modify-everything, proposer+modify-all, flat-active,
        /// no-sym, full); all when omitted.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Points sampled per shape; defaults to 2048 for the synthetic
        /// benchmark and 8192 for dataset files.
        #[arg(long)]
        points: Option<usize>,
        /// CSV with one line per (seed, row).
        #[arg(long)]
        out: Option<PathBuf>,
        /// CSV of first-iteration verified counts, hierarchical vs flat.
        #[arg(long)]
        series: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, env = "PARTLABEL_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "PARTLABEL_HOST", default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = "PARTLABEL_DATASET_ROOT", default_value = ".")]
        dataset_root: PathBuf,
        #[arg(long, env = "PARTLABEL_MODEL_STORE")]
        model_store: Option<PathBuf>,
        #[arg(long, env = "PARTLABEL_AUDIT_DIR", default_value = "audit")]
        audit_dir: PathBuf,
        #[command(flatten)]
        points: Points,
    },
    /// Replay an audit log and print its cost and iteration series.
    Report {
        #[arg(long)]
        session: PathBuf,
        /// Cost report JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-iteration series CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(clap::Args, Clone, Copy)]
struct Points {
    /// Points sampled per shape.
    #[arg(long, default_value_t = PreparationConfig::default().points_per_shape)]
    points: usize,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Baseline {
    Random,
    Uniform,
}

fn prep(points: Points) -> PreparationConfig {
    PreparationConfig {
        points_per_shape: points.points,
        ..Default::default()
    }
}

fn load(path: &Path, points: Points) -> Result<PreparedDataset> {
    PreparedDataset::load(path, &prep(points)).with_context(|| format!("loading dataset {}", path.display()))
}

fn proposer_config(seed: u64, epochs: Option<usize>, points: Points) -> ProposerConfig {
    let mut c = ProposerConfig {
        seed,
        n_sample_points: points.points,
        ..Default::default()
    };
    if let Some(e) = epochs {
        c.pretrain.epochs = e;
    }
    c
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn f(x: f64, digits: usize) -> String {
    format!("{x:.digits$}")
}

fn series_table(nodes: &[NodeSummary]) -> Table {
    let mut t = Table::new(&["node", "iteration", "verified", "modified"]);
    for n in nodes {
        for i in 0..n.iterations as usize {
            let at = |v: &[usize]| v.get(i).copied().unwrap_or(0).to_string();
            t.row(vec![
                n.node.clone(),
                (i + 1).to_string(),
                at(&n.verified_per_iteration),
                at(&n.modified_per_iteration),
            ]);
        }
    }
    t
}

fn cost_table(report: &partlabel_core::cost::CostReport) -> Table {
    let mut t = Table::new(&["node", "labels", "P_v", "S_v", "P_m_checked", "P_m_edited", "seconds"]);
    for n in &report.nodes {
        let c = &n.counters;
        t.row(vec![
            n.node.clone(),
            n.label_count.to_string(),
            c.verify_correct_parts.to_string(),
            c.verify_failed_shapes.to_string(),
            c.modify_checked_parts.to_string(),
            c.modify_edited_parts.to_string(),
            f(n.seconds.total, 1),
        ]);
    }
    t
}

#[derive(Serialize)]
struct SimulationOutput {
    dataset: String,
    seed: u64,
    model: Option<String>,
    baseline: Option<Baseline>,
    oracle: OracleConfig,
    points_per_shape: usize,
    report: SessionReport,
}

fn generate_cmd(family: Family, shapes: usize, seed: u64, symmetric_fraction: f64, out: &Path) -> Result<()> {
    let cfg = SyntheticConfig {
        family,
        shapes,
        seed,
        symmetric_fraction,
        id_prefix: family.name().into(),
        ..Default::default()
    };
    let records = generate(&cfg);
    let name = format!("synthetic-{}-{seed}", family.name());
    let manifest = write_dataset(out, &name, family.name(), &label_tree(family), &records)?;
    let parts: usize = records.iter().map(|r| r.parts.len()).sum();
    println!("wrote {} shapes ({parts} parts) to {}", records.len(), manifest.display());
    Ok(())
}

fn pretrain_cmd(
    dataset: &Path,
    tree: Option<&Path>,
    flat: bool,
    seed: u64,
    epochs: Option<usize>,
    points: Points,
    out: &Path,
) -> Result<()> {
    let data = match tree {
        None => load(dataset, points)?,
        Some(t) => {
            let tree = LabelTree::load(t).with_context(|| format!("loading tree {}", t.display()))?;
            let loaded = load_dataset(dataset).with_context(|| format!("loading dataset {}", dataset.display()))?;
            for shape in &loaded.shapes {
                shape.validate(&tree, &shape.id)?;
            }
            PreparedDataset::from_records(&loaded.manifest.name, &loaded.manifest.category, tree, &loaded.shapes, &prep(points))?
        }
    };
    let tree = working_tree(&data.tree, !flat);
    let model = BuiltinProposer::pretrain(&tree, &data.shapes, proposer_config(seed, epochs, points))?;
    for w in model.warnings() {
        tracing::warn!("{w}");
    }
    model.save(out).with_context(|| format!("saving model to {}", out.display()))?;
    let mut t = Table::new(&["node", "labels", "examples", "final_loss"]);
    for node in tree.internal_nodes() {
        if let Some(m) = model.model(node) {
            let loss = m.pretrain_losses.last().copied().unwrap_or(f64::NAN);
            t.row(vec![node.to_string(), m.spec.children.len().to_string(), m.base_labels.len().to_string(), f(loss, 4)]);
        }
    }
    print!("{}", t.render());
    println!("saved {} ({} shapes, {})", out.display(), data.shapes.len(), if flat { "flat" } else { "hierarchical" });
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn simulate_cmd(
    dataset: &Path,
    config: Option<&Path>,
    seed: u64,
    model: Option<&Path>,
    baseline: Baseline,
    error_rate: f64,
    points: Points,
    audit: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let data = load(dataset, points)?;
    let mut session_config: SessionConfig = match config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing session config {}", p.display()))?,
        None => SessionConfig::default(),
    };
    session_config.seed = seed;
    let proposer: Box<dyn Proposer> = match model {
        Some(p) => Box::new(BuiltinProposer::load(p).with_context(|| format!("loading model {}", p.display()))?),
        None => match baseline {
            Baseline::Random => Box::new(RandomProposer::new(seed)),
            Baseline::Uniform => Box::new(UniformProposer),
        },
    };
    let oracle = OracleConfig { error_rate, seed };
    let options = SessionOptions {
        id: format!("simulate-{seed}"),
        dataset: data.name.clone(),
        config: session_config,
        clock: Clock::Simulated,
        audit_path: audit.map(Path::to_path_buf),
        checkpoints: None,
    };
    let mut session = Session::start(options, &data.tree, &data.shapes, proposer)?;
    let mut annotator = Oracle::for_session(&session, oracle).map_err(anyhow::Error::msg)?;
    session.run(&mut annotator)?;
    let report = session.report();

    print!("{}", cost_table(&report.cost).render());
    println!();
    print!("{}", series_table(&report.nodes).render());
    println!();
    if let Some(e) = &report.evaluation {
        println!("accuracy {:.4}  mIoU {:.4}", e.part_accuracy, e.miou);
    }
    println!("simulated labeling time {:.3} h", report.cost.hours);
    if let Some(out) = out {
        let output = SimulationOutput {
            dataset: dataset.display().to_string(),
            seed,
            model: model.map(|m| m.display().to_string()),
            baseline: model.is_none().then_some(baseline),
            oracle,
            points_per_shape: points.points,
            report,
        };
        write_json(out, &output)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn ablate_cmd(
    dataset: Option<&Path>,
    train: Option<&Path>,
    family: Family,
    train_shapes: usize,
    test_shapes: usize,
    grid: &[String],
    seeds: &[u64],
    epochs: Option<usize>,
    points: Option<usize>,
    out: Option<&Path>,
    series: Option<&Path>,
) -> Result<()> {
    let rows = AblationRow::from_grid(grid).map_err(anyhow::Error::msg)?;
    let points = Points {
        points: points.unwrap_or(match dataset {
            Some(_) => PreparationConfig::default().points_per_shape,
            None => BenchmarkConfig::default().points_per_shape,
        }),
    };
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    let files = match (dataset, train) {
        (Some(d), Some(t)) => Some((Arc::new(load(t, points)?), Arc::new(load(d, points)?))),
        (None, None) => None,
        _ => bail!("--dataset and --train go together"),
    };
    let mut results: Vec<AblationResult> = Vec::new();
    for &seed in seeds {
        let (train, test) = match &files {
            Some((t, d)) => ((**t).clone(), (**d).clone()),
            None => {
                let cfg = BenchmarkConfig {
                    family,
                    train_shapes,
                    test_shapes,
                    points_per_shape: points.points,
                    ..Default::default()
                };
                benchmark_datasets(&cfg, seed).map_err(anyhow::Error::msg)?
            }
        };
        tracing::info!(seed, shapes = test.shapes.len(), "running {} rows", rows.len());
        let pcfg = proposer_config(seed, epochs, points);
        results.extend(run_ablation(&rows, &train, &test, seed, &pcfg, &SessionConfig::default()).map_err(anyhow::Error::msg)?);
    }

    let mut csv = Table::new(&[
        "seed", "row", "prop", "hier", "sym", "hours", "part_accuracy", "miou", "P_v", "S_v", "P_m_checked", "P_m_edited",
    ]);
    for r in &results {
        let c = r.row.config(&SessionConfig::default());
        let yn = |b: bool| if b { "y" } else { "n" }.to_string();
        csv.row(vec![
            r.seed.to_string(),
            r.row.name().into(),
            yn(c.use_proposer),
            yn(c.hierarchical),
            yn(c.symmetry),
            f(r.hours, 4),
            f(r.part_accuracy, 4),
            f(r.miou, 4),
            r.counters.verify_correct_parts.to_string(),
            r.counters.verify_failed_shapes.to_string(),
            r.counters.modify_checked_parts.to_string(),
            r.counters.modify_edited_parts.to_string(),
        ]);
    }
    let mut summary = Table::new(&["row", "prop", "hier", "sym", "mean_hours", "min_accuracy"]);
    for &row in &rows {
        let of: Vec<&AblationResult> = results.iter().filter(|r| r.row == row).collect();
        let c = row.config(&SessionConfig::default());
        let yn = |b: bool| if b { "y" } else { "-" }.to_string();
        summary.row(vec![
            row.name().into(),
            yn(c.use_proposer),
            yn(c.hierarchical),
            yn(c.symmetry),
            f(of.iter().map(|r| r.hours).sum::<f64>() / of.len() as f64, 3),
            f(of.iter().map(|r| r.part_accuracy).fold(1.0, f64::min), 4),
        ]);
    }
    print!("{}", summary.render());
    if let Some(out) = out {
        csv.write_csv(out)?;
    }
    if let Some(path) = series {
        let mut t = Table::new(&["seed", "node", "hierarchical", "flat"]);
        for &seed in seeds {
            let nodes = |row| results.iter().find(|r| r.seed == seed && r.row == row).map(|r| r.nodes.as_slice());
            let (Some(h), Some(fl)) = (nodes(AblationRow::Full), nodes(AblationRow::FlatActive)) else {
                bail!("--series needs the full and flat-active rows");
            };
            for (node, hv, fv) in first_iteration_comparison(h, fl) {
                t.row(vec![seed.to_string(), node, hv.to_string(), fv.to_string()]);
            }
        }
        println!();
        print!("{}", t.render());
        t.write_csv(path)?;
    }
    Ok(())
}

fn report_cmd(session: &Path, out: Option<&Path>, csv: Option<&Path>) -> Result<()> {
    let state = replay_audit(session).with_context(|| format!("replaying {}", session.display()))?;
    if !state.started() {
        bail!("{} holds no session", session.display());
    }
    let cost = state.ledger.report();
    println!(
        "session {}  dataset {}  proposer {}  shapes {}  {}",
        state.session,
        state.dataset,
        state.proposer,
        state.shapes.len(),
        if state.complete { "complete" } else { "in progress" }
    );
    print!("{}", cost_table(&cost).render());
    println!();
    let series = series_table(&state.series());
    print!("{}", series.render());
    println!("simulated labeling time {:.3} h", cost.hours);
    if let Some(out) = out {
        write_json(
            out,
            &serde_json::json!({
                "session": state.session,
                "config": state.config,
                "complete": state.complete,
                "cost": cost,
                "nodes": state.series(),
            }),
        )?;
    }
    if let Some(path) = csv {
        series.write_csv(path)?;
    }
    Ok(())
}

fn main() -> std::process::ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).init();
    match run(Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            // many causes already print their source; skip the repeats
            let mut message = e.to_string();
            for cause in e.chain().skip(1).map(|c| c.to_string()) {
                if !message.contains(&cause) {
                    message = format!("{message}: {cause}");
                }
            }
            eprintln!("error: {message}");
            std::process::ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            family,
            shapes,
            seed,
            symmetric_fraction,
            out,
        } => generate_cmd(family, shapes, seed, symmetric_fraction, &out),
        Command::Pretrain {
            dataset,
            tree,
            flat,
            seed,
            epochs,
            points,
            out,
        } => pretrain_cmd(&dataset, tree.as_deref(), flat, seed, epochs, points, &out),
        Command::Simulate {
            dataset,
            config,
            seed,
            model,
            baseline,
            error_rate,
            points,
            audit,
            out,
        } => simulate_cmd(
            &dataset,
            config.as_deref(),
            seed,
            model.as_deref(),
            baseline,
            error_rate,
            points,
            audit.as_deref(),
            out.as_deref(),
        ),
        Command::Ablate {
            dataset,
            train,
            family,
            train_shapes,
            test_shapes,
            grid,
            seeds,
            epochs,
            points,
            out,
            series,
        } => ablate_cmd(
            dataset.as_deref(),
            train.as_deref(),
            family,
            train_shapes,
            test_shapes,
            &grid,
            &seeds,
            epochs,
            points,
            out.as_deref(),
            series.as_deref(),
        ),
        Command::Serve {
            port,
            host,
            dataset_root,
            model_store,
            audit_dir,
            points,
        } => {
            let addr: SocketAddr = format!("{host}:{port}").parse().with_context(|| format!("bad address {host}:{port}"))?;
            let config = partlabel_service::ServiceConfig {
                dataset_root,
                model_store,
                audit_dir,
                points_per_shape: points.points,
            };
            tokio::runtime::Runtime::new()?.block_on(partlabel_service::serve(config, addr))?;
            Ok(())
        }
        Command::Report { session, out, csv } => report_cmd(&session, out.as_deref(), csv.as_deref()),
    }
}
