use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use pairsearch_core::baselines::Strategy;
use pairsearch_core::embed::GaussianEmbedding;
use pairsearch_harness::metrics::write_rows;
use pairsearch_harness::suites::{run_blind_suite, run_calibration, run_convergence_suite, run_embed_eval, run_scaling_suite};
use pairsearch_harness::{gen_hypercube, pca_project, summarise, Dataset, ExperimentSpec, Suite};
use pairsearch_service::{Catalog, DataDir, Service, ServiceConfig};

#[derive(Parser)]
#[command(name = "pairsearch", version, about = "Find a target object through pairwise comparisons")]
struct Cli {
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// TOML experiment (or, for `serve`, service) config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Synthetic catalog size.
    #[arg(long)]
    n: Option<usize>,
    /// Synthetic dimension.
    #[arg(long)]
    d: Option<usize>,
    /// Object CSV instead of synthetic data.
    #[arg(long, conflicts_with_all = ["n", "d"])]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a uniform hypercube catalog as CSV.
    Gen {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        d: usize,
    },
    /// Fit the answer noise to a flip rate.
    Calibrate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        flip_rate: Option<f64>,
    },
    /// Query counts and step times per strategy and catalog size.
    SearchBench {
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<Strategy>>,
        #[arg(long)]
        d: Option<usize>,
    },
    /// Searches with hidden features, learning the embedding on the way.
    BlindBench {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
    },
    /// One-dimensional posterior traces.
    Convergence {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Train an embedding on triplets and score it on a holdout.
    EmbedEval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        triplets: Option<usize>,
        #[arg(long)]
        triplet_file: Option<PathBuf>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Project an embedding snapshot onto its principal components.
    Pca {
        snapshot: PathBuf,
        #[arg(long, default_value_t = 2)]
        k: usize,
    },
    /// Run the interactive HTTP service.
    Serve {
        /// Object catalog CSV (`id,label[,image_ref,…]`).
        #[arg(long)]
        catalog: PathBuf,
        /// Directory for triplets, embedding snapshot and counters.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Candidates per query (2 or 4).
        #[arg(long)]
        candidates: Option<usize>,
    },
}

fn experiment(cli: &Cli, suite: Suite) -> Result<ExperimentSpec> {
    let mut spec = match &cli.config {
        Some(path) => ExperimentSpec::load(path)?,
        None => ExperimentSpec::default(),
    };
    spec.suite = suite;
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    if let Some(out) = &cli.out {
        spec.out = out.clone();
    }
    Ok(spec)
}

fn apply_data(spec: &mut ExperimentSpec, data: &DataArgs) {
    if let Some(path) = &data.data {
        spec.dataset = Dataset::Csv { path: path.clone(), standardize: true };
    } else if data.n.is_some() || data.d.is_some() {
        let (n0, d0) = match spec.dataset {
            Dataset::Hypercube { n, d } => (n, d),
            Dataset::Csv { .. } => (1000, 5),
        };
        spec.dataset = Dataset::Hypercube { n: data.n.unwrap_or(n0), d: data.d.unwrap_or(d0) };
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn write_csv<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    write_rows(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?, rows)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Gen { n, d } => {
            let set = gen_hypercube(*n, *d, cli.seed.unwrap_or(0))?;
            match &cli.out {
                Some(path) => set.write_csv(fs::File::create(path)?)?,
                None => set.write_csv(std::io::stdout().lock())?,
            }
        }
        Command::Calibrate { data, flip_rate } => {
            let mut spec = experiment(&cli, Suite::Calibrate)?;
            apply_data(&mut spec, data);
            if let Some(f) = flip_rate {
                spec.flip_rate = *f;
            }
            spec.validate()?;
            let report = run_calibration(&spec)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if cli.out.is_some() {
                write_json(&spec.out.join("calibration.json"), &report)?;
            }
        }
        Command::SearchBench { episodes, sizes, strategies, d } => {
            let mut spec = experiment(&cli, Suite::Scaling)?;
            if let Some(e) = episodes {
                spec.episodes = *e;
            }
            if let Some(s) = sizes {
                spec.sizes = s.clone();
            }
            if let Some(s) = strategies {
                spec.strategies = s.clone();
            }
            if let Some(d) = d {
                spec.dataset = Dataset::Hypercube { n: spec.sizes.first().copied().unwrap_or(1000), d: *d };
            }
            spec.validate()?;
            let rows = run_scaling_suite(&spec)?;
            write_csv(&spec.out.join("metrics.csv"), &rows)?;
            println!("strategy\tn\tepisodes\tmean_queries\tmean_step_us");
            for s in summarise(&rows) {
                let t = s.mean_step_us.map_or_else(|| "-".into(), |t| format!("{t:.1}"));
                println!("{}\t{}\t{}\t{:.2}\t{t}", s.strategy, s.n, s.episodes, s.mean_queries);
            }
        }
        Command::BlindBench { data, episodes, window } => {
            let mut spec = experiment(&cli, Suite::Blind)?;
            apply_data(&mut spec, data);
            if let Some(e) = episodes {
                spec.blind.episodes = *e;
            }
            if let Some(w) = window {
                spec.window = *w;
            }
            spec.window = spec.window.min(spec.blind.episodes);
            spec.validate()?;
            let rows = run_blind_suite(&spec, Some(&spec.out))?;
            write_csv(&spec.out.join("metrics.csv"), &rows)?;
            for mode in &spec.blind.modes {
                if let Some(last) = rows.iter().filter(|r| r.strategy == mode.name()).last() {
                    println!("{}\tfinal window mean {:.2}", mode.name(), last.window_mean.unwrap_or(f64::NAN));
                }
            }
        }
        Command::Convergence { steps, runs } => {
            let mut spec = experiment(&cli, Suite::Convergence)?;
            if let Some(s) = steps {
                spec.convergence.steps = *s;
            }
            if let Some(r) = runs {
                spec.convergence.runs = *r;
            }
            spec.validate()?;
            let rows = run_convergence_suite(&spec)?;
            write_csv(&spec.out.join("convergence.csv"), &rows)?;
            let last: Vec<_> = rows.iter().filter(|r| r.m == spec.convergence.steps).collect();
            let worst = last.iter().map(|r| r.abs_error).fold(0.0, f64::max);
            println!("{} runs, {} steps: largest final |error| {worst:.4}", last.len(), spec.convergence.steps);
        }
        Command::EmbedEval { data, triplets, triplet_file, dim, epochs } => {
            let mut spec = experiment(&cli, Suite::EmbedEval)?;
            apply_data(&mut spec, data);
            if let Some(t) = triplets {
                spec.embed.triplets = *t;
            }
            if let Some(f) = triplet_file {
                spec.embed.triplet_file = Some(f.clone());
            }
            if let Some(d) = dim {
                spec.train.dim = *d;
            }
            if let Some(e) = epochs {
                spec.train.epochs = *e;
            }
            spec.validate()?;
            let report = run_embed_eval(&spec, Some(&spec.out))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            write_json(&spec.out.join("embed-eval.json"), &report)?;
        }
        Command::Pca { snapshot, k } => {
            let emb = GaussianEmbedding::load(snapshot)?;
            let projected = pca_project(&emb.means_as_objects()?, *k)?;
            let mut rows = Vec::with_capacity(projected.len());
            for (id, row) in projected.rows().enumerate() {
                let mut rec = vec![id.to_string()];
                rec.extend(row.iter().map(|v| format!("{v:?}")));
                rows.push(rec);
            }
            let mut header = vec!["id".to_string()];
            header.extend((1..=*k).map(|c| format!("pc{c}")));
            let sink: Box<dyn std::io::Write> = match &cli.out {
                Some(p) => Box::new(fs::File::create(p)?),
                None => Box::new(std::io::stdout().lock()),
            };
            let mut w = csv::Writer::from_writer(sink);
            w.write_record(&header)?;
            for r in rows {
                w.write_record(&r)?;
            }
            w.flush()?;
        }
        Command::Serve { catalog, data_dir, addr, candidates } => {
            let mut config: ServiceConfig = match &cli.config {
                Some(p) => toml::from_str(&fs::read_to_string(p)?).context("invalid service config")?,
                None => ServiceConfig::default(),
            };
            if let Some(seed) = cli.seed {
                config.seed = seed;
            }
            if let Some(k) = candidates {
                config.candidates = *k;
            }
            let catalog = Catalog::load_csv(catalog)?;
            let service = match data_dir {
                Some(dir) => Service::open(config, catalog, DataDir::new(dir)?)?,
                None => {
                    let n = catalog.len();
                    Service::in_memory(config, catalog, None, pairsearch_core::embed::TripletStore::new(n))?
                }
            };
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(pairsearch_service::serve(Arc::new(service), *addr))?;
        }
    }
    Ok(())
}
