//! Command-line surface.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::corpus::parse_corpus;
use crate::embed::EmbeddingSource;
use crate::error::{Error, Result};
use crate::grad::{fd_check, LossConfig};
use crate::graph::{load_graph, save_graph, MultiLkg};
use crate::model::EncodedGraph;
use crate::params::{write_atomic, QsgnnParameters};
use crate::retrieval::{evaluate, read_jsonl, score_chunks, score_documents, top_k, EvalExample};
use crate::seeds::{substream, Stream};
use crate::synth::{emit_examples, gen_one_hop, gen_two_hop};
use crate::train::{prepare_examples, sha256_hex, train, Mode, TrainingExample};

#[derive(Debug, Parser)]
#[command(name = "mlkg", version, about = "Multi-level knowledge graph retrieval")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Configuration override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the graph from a corpus file.
    BuildGraph {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic training examples from a graph.
    Synth {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Chains per bridge entity; 0 for no cap.
        #[arg(long)]
        cap: Option<usize>,
        /// Also write the questions as an evaluation file.
        #[arg(long)]
        eval_out: Option<PathBuf>,
    },
    Pretrain(TrainArgs),
    Finetune(TrainArgs),
    /// Rank documents for one query.
    Retrieve {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(short, long, default_value_t = 5)]
        k: usize,
        /// Rank chunks instead of documents.
        #[arg(long)]
        chunks: bool,
    },
    /// Recall@2 / recall@5 over an evaluation file.
    Eval {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        examples: PathBuf,
        /// Metrics record destination (one JSON line).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    GradCheck {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        examples: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        /// Number of examples in the checked batch.
        #[arg(long, default_value_t = 4)]
        batch: usize,
    },
    /// Print graph statistics.
    Stats {
        #[arg(long)]
        graph: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub examples: PathBuf,
    /// Where the selected parameters are written.
    #[arg(long)]
    pub out: PathBuf,
    /// Starting parameters (fresh initialization when absent).
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_sha256: String,
    config: String,
    wall_time_secs: f64,
    outputs: Vec<(String, String)>,
}

struct Run {
    config: RunConfig,
    force: bool,
    started: Instant,
}

impl Run {
    fn required(&self, value: Option<&PathBuf>, flag: &str) -> Result<PathBuf> {
        value
            .cloned()
            .ok_or_else(|| Error::Config(format!("missing required flag --{flag} (or `{}` in the configuration)", flag.replace('-', "_"))))
    }

    fn existing(&self, path: PathBuf, flag: &str) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::Config(format!("--{flag}: {} does not exist", path.display())))
        }
    }

    fn writable(&self, path: &Path) -> Result<()> {
        if path.exists() && !self.force {
            return Err(Error::Precondition(format!("{} exists; pass --force to overwrite", path.display())));
        }
        Ok(())
    }

    fn graph(&self, flag: Option<&PathBuf>) -> Result<MultiLkg> {
        let path = self.required(flag.or(self.config.graph.as_ref()), "graph")?;
        load_graph(self.existing(path, "graph")?)
    }

    fn encoded(&self, g: &MultiLkg) -> Result<(EncodedGraph, EmbeddingSource)> {
        let source = self.config.embedding_source()?;
        Ok((EncodedGraph::new(g, &source)?, source))
    }

    fn manifest(&self, command: &str, outputs: &[&Path]) -> Result<()> {
        let Some(first) = outputs.first() else { return Ok(()) };
        let mut hashes = Vec::new();
        for p in outputs {
            hashes.push((p.display().to_string(), sha256_hex(&std::fs::read(p)?)));
        }
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.config.seed,
            config_sha256: self.config.hash(),
            config: self.config.to_text(),
            wall_time_secs: self.started.elapsed().as_secs_f64(),
            outputs: hashes,
        };
        let mut name = first.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        write_atomic(&first.with_file_name(name), json.as_bytes())
    }

    fn params(&self, path: &Path, source: &EmbeddingSource) -> Result<QsgnnParameters> {
        let p = QsgnnParameters::load(self.existing(path.to_path_buf(), "params")?, None)?;
        if p.config.input_dim != source.dim() {
            return Err(Error::Shape(format!(
                "parameters expect {}-dimensional embeddings, the embedding source gives {}",
                p.config.input_dim,
                source.dim()
            )));
        }
        Ok(p)
    }
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    crate::retrieval::write_jsonl(items, &mut buf)?;
    write_atomic(path, &buf)
}

fn flag_overrides(common: &Common) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for item in &common.overrides {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {item:?}")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        out.push(("seed".into(), seed.to_string()));
    }
    Ok(out)
}

/// Parses `argv` and runs the command. Data goes to `stdout`.
pub fn run_command<I, T>(argv: I, stdout: &mut (dyn Write + Send)) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| Error::Config(e.to_string()))?;
    run(cli, stdout)
}

pub fn run(cli: Cli, stdout: &mut (dyn Write + Send)) -> Result<()> {
    let config = RunConfig::load(cli.common.config.as_deref(), std::env::vars(), &flag_overrides(&cli.common)?)?;
    let run = Run { config, force: cli.common.force, started: Instant::now() };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.common.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| execute(&run, cli.command, stdout))
}

fn execute(run: &Run, command: Command, stdout: &mut (dyn Write + Send)) -> Result<()> {
    match command {
        Command::BuildGraph { corpus, out } => {
            let corpus = run.required(corpus.as_ref().or(run.config.corpus.as_ref()), "corpus")?;
            let bundle = parse_corpus(run.existing(corpus, "corpus")?)?;
            run.writable(&out)?;
            let g = MultiLkg::build(&bundle)?;
            if g.report.skipped_self_pairs > 0 {
                log::warn!("{} triples had identical subject and object", g.report.skipped_self_pairs);
            }
            save_graph(&g, &out)?;
            writeln!(stdout, "{}", g.stats())?;
            run.manifest("build-graph", &[&out])
        }
        Command::Synth { graph, out, cap, eval_out } => {
            let g = run.graph(graph.as_ref())?;
            run.writable(&out)?;
            if let Some(p) = &eval_out {
                run.writable(p)?;
            }
            let cap = match cap {
                Some(0) => None,
                Some(c) => Some(c),
                None => run.config.chain_cap(),
            };
            let (enc, source) = run.encoded(&g)?;
            let mut questions = gen_one_hop(&g);
            let one = questions.len();
            questions.extend(gen_two_hop(&g, cap, run.config.seed));
            let examples = emit_examples(&questions, &enc, &source, run.config.negatives_k, run.config.seed)?;
            write_lines(&out, &examples)?;
            let mut outputs: Vec<&Path> = vec![&out];
            if let Some(p) = &eval_out {
                let evals: Vec<EvalExample> = questions.iter().map(|q| q.to_eval_example()).collect();
                write_lines(p, &evals)?;
                outputs.push(p);
            }
            writeln!(stdout, "one-hop {one}\ntwo-hop {}", questions.len() - one)?;
            run.manifest("synth", &outputs)
        }
        Command::Pretrain(args) => train_command(run, Mode::Pretrain, args, stdout),
        Command::Finetune(args) => train_command(run, Mode::Finetune, args, stdout),
        Command::Retrieve { graph, params, query, k, chunks } => {
            let g = run.graph(graph.as_ref())?;
            let (enc, source) = run.encoded(&g)?;
            let p = run.params(&params, &source)?;
            let q = source.embed(&query)?;
            let (ids, scores) = if chunks {
                (g.chunks.iter().map(|c| c.id.clone()).collect::<Vec<_>>(), score_chunks(&p, &enc, &q)?)
            } else {
                (enc.document_ids.clone(), score_documents(&p, &enc, &q)?)
            };
            for (id, score) in top_k(&ids, &scores, k)?.ranked {
                writeln!(stdout, "{id}\t{score:.6}")?;
            }
            Ok(())
        }
        Command::Eval { graph, params, examples, out } => {
            let g = run.graph(graph.as_ref())?;
            let (enc, source) = run.encoded(&g)?;
            let p = run.params(&params, &source)?;
            let examples: Vec<EvalExample> = read_jsonl(run.existing(examples, "examples")?)?;
            let report = evaluate(&p, &enc, &examples, &source)?;
            match &out {
                Some(path) => {
                    run.writable(path)?;
                    write_atomic(path, format!("{}\n", report.summary_json()).as_bytes())?;
                    writeln!(stdout, "{report}")?;
                    run.manifest("eval", &[path])
                }
                None => {
                    writeln!(stdout, "{}", report.summary_json())?;
                    log::info!("\n{report}");
                    Ok(())
                }
            }
        }
        Command::GradCheck { graph, examples, params, eps, samples, batch } => {
            let g = run.graph(graph.as_ref())?;
            let (enc, source) = run.encoded(&g)?;
            let p = match &params {
                Some(path) => run.params(path, &source)?,
                None => QsgnnParameters::init(run.config.model_config(source.dim()), &mut substream(run.config.seed, Stream::Init))?,
            };
            let raw: Vec<TrainingExample> = read_jsonl(run.existing(examples, "examples")?)?;
            let raw = &raw[..raw.len().min(batch.max(1))];
            let prepared = prepare_examples(&enc, &source, raw, run.config.negatives_k, run.config.seed)?;
            let report = fd_check(
                &p,
                &enc,
                &prepared,
                &LossConfig::new(run.config.tau),
                eps,
                samples,
                &mut substream(run.config.seed, Stream::Check),
            )?;
            writeln!(
                stdout,
                "max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e}) over {} coordinates",
                report.max_relative_error, report.worst_tensor, report.worst_index, report.analytic, report.numeric, report.coordinates
            )?;
            Ok(())
        }
        Command::Stats { graph } => {
            let g = run.graph(graph.as_ref())?;
            writeln!(stdout, "{}", g.stats())?;
            Ok(())
        }
    }
}

fn train_command(run: &Run, mode: Mode, args: TrainArgs, stdout: &mut (dyn Write + Send)) -> Result<()> {
    let g = run.graph(args.graph.as_ref())?;
    run.writable(&args.out)?;
    let checkpoint_dir = args.checkpoint_dir.or_else(|| run.config.output_dir.clone());
    if let Some(dir) = &checkpoint_dir {
        if dir.join("manifest.json").exists() && !run.force {
            return Err(Error::Precondition(format!("{} holds checkpoints; pass --force to overwrite", dir.display())));
        }
    }
    let (enc, source) = run.encoded(&g)?;
    let cfg = run.config.train_config(mode);
    let raw: Vec<TrainingExample> = read_jsonl(run.existing(args.examples, "examples")?)?;
    let examples = prepare_examples(&enc, &source, &raw, cfg.negatives_k, cfg.seed)?;
    let init = match &args.init {
        Some(path) => run.params(path, &source)?,
        None => {
            if mode == Mode::Finetune {
                log::warn!("fine-tuning from a fresh initialization");
            }
            QsgnnParameters::init(run.config.model_config(source.dim()), &mut substream(cfg.seed, Stream::Init))?
        }
    };
    let outcome = train(mode, &enc, &examples, &cfg, init, checkpoint_dir.as_deref())?;
    outcome.params.save(&args.out)?;
    for rec in &outcome.history {
        writeln!(
            stdout,
            "step {:>6}  epoch {:>3}  holdout recall@5 {}",
            rec.step,
            rec.epoch,
            rec.holdout_recall_at_5.map_or("-".to_string(), |r| format!("{r:.4}"))
        )?;
    }
    writeln!(stdout, "selected step {}", outcome.selected_step)?;
    run.manifest(if mode == Mode::Pretrain { "pretrain" } else { "finetune" }, &[&args.out])
}
