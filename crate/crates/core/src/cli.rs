//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 1 for usage and configuration errors, 2 for data errors and 3
//! for numerical failures.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::analyze::{probe_fg, probe_masked_atoms, subtree_census, ProbeOptions, PROBE_EPOCHS, PROBE_LR, PROBE_TRAIN_FRACTION};
use crate::error::{Error, Result};
use crate::fragment::compose;
use crate::gradcheck::{check_ops, check_pipeline, DEFAULT_INSTANCES, DEFAULT_STEP, DEFAULT_TOLERANCE, PIPELINE_TOLERANCE};
use crate::io::write_atomic;
use crate::molgraph::{format_graphs, load_graph_file, MolGraph};
use crate::nets::{Autoencoder, ModelConfig};
use crate::pretrain::{
    metrics_csv, model_embedding, stream_rng, train, Checkpoint, TrainConfig, TrainOutput, DEFAULT_MASK_RATIO,
};
use crate::sgt::sgt_tokenize;
use crate::tokenize::{build_motif_vocab, frozen_gnn_tokenize, tok_edge, tok_motif, tok_node, AtomVocab, FrozenGnnTokenizer, Token, TokenValue};

pub const SEED_ENV: &str = "MGMLAB_SEED";
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "mgmlab", version, about = "Masked graph modeling tools for molecular graphs")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed and MGMLAB_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; most commands print to stdout without it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TokenizeWith {
    Node,
    Edge,
    Motif,
    Sgt,
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeWhat {
    Atoms,
    Fg,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a SMILES corpus to the structured graph format.
    Parse { input: PathBuf },
    /// List the fragments a recipe produces for each molecule.
    Fragment {
        input: PathBuf,
        #[arg(long)]
        recipe: Option<String>,
    },
    /// Emit tokens for each molecule.
    Tokenize {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "node")]
        with: TokenizeWith,
        /// Embedding source for `sgt` and weights for `frozen`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// One-hop subtree and atom-type distributions.
    Census { input: PathBuf },
    /// Masked graph model pretraining.
    Pretrain { input: Option<PathBuf> },
    /// Linear probes on a frozen checkpoint.
    Probe {
        input: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "atoms")]
        task: ProbeWhat,
    },
    /// Finite-difference check of every op and the full model.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
    },
}

fn default_probe_ratio() -> f64 {
    DEFAULT_MASK_RATIO
}
fn default_probe_fraction() -> f64 {
    PROBE_TRAIN_FRACTION
}
fn default_probe_epochs() -> usize {
    PROBE_EPOCHS
}
fn default_probe_lr() -> f64 {
    PROBE_LR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_probe_ratio")]
    pub mask_ratio: f64,
    #[serde(default = "default_probe_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_probe_epochs")]
    pub epochs: usize,
    #[serde(default = "default_probe_lr")]
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

/// Everything a run reads, as one file: top-level paths plus `[train]` and
/// `[probe]` sections.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `MGMLAB_SEED` and then the command-line flags.
    pub fn resolve(mut self, cli: &Cli, env_seed: Option<&str>) -> Result<Self> {
        if let Some(s) = env_seed {
            self.train.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}='{s}' is not an unsigned integer")))?;
        }
        if let Some(s) = cli.seed {
            self.train.seed = s;
        }
        if cli.threads.is_some() {
            self.threads = cli.threads;
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        3
    } else if matches!(e, Error::Config(_)) {
        1
    } else {
        2
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn corpus_path(explicit: Option<&PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    explicit
        .or(cfg.corpus.as_ref())
        .cloned()
        .ok_or_else(|| Error::Config("no corpus given on the command line or in the config".into()))
}

/// Writes `name` under the output directory, or prints it.
fn emit(out: Option<&Path>, name: &str, text: &str) -> Result<()> {
    match out {
        Some(dir) => write_atomic(&dir.join(name), text.as_bytes()),
        None => print_stdout(text),
    }
}

/// Prints to stdout, treating a closed pipe (as with `| head`) as success.
fn print_stdout(text: &str) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

pub fn execute(cli: &Cli) -> Result<i32> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = base.resolve(cli, env_seed.as_deref())?;
    if let Some(n) = cfg.threads {
        // Fails only if a pool already exists, as in repeated in-process runs.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = cli.out.as_deref();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(RESOLVED_CONFIG_FILE), cfg.to_toml().as_bytes())?;
    }
    let load = |p: &Path| -> Result<Vec<MolGraph>> { load_graph_file(p) };

    match &cli.command {
        Command::Parse { input } => {
            emit(out, "graphs.txt", &format_graphs(&load(input)?))?;
        }
        Command::Fragment { input, recipe } => {
            let recipe = match recipe {
                Some(r) => r.parse()?,
                None => cfg.train.recipe()?,
            };
            let ctx = cfg.train.fragment_context()?;
            let mut text = format!("# recipe {recipe}\n");
            for (m, g) in load(input)?.iter().enumerate() {
                for f in compose(g, &recipe, &ctx)? {
                    let _ = writeln!(text, "{m}\t{}\t{}\t{}", f.kind().name(), join(f.nodes()), join(f.edges()));
                }
            }
            emit(out, "fragments.tsv", &text)?;
        }
        Command::Tokenize { input, with, checkpoint } => {
            let graphs = load(input)?;
            emit(out, "tokens.tsv", &tokenize_corpus(&graphs, *with, checkpoint.as_deref(), &cfg, out)?)?;
        }
        Command::Census { input } => {
            let census = subtree_census(&load(input)?);
            match out {
                Some(dir) => {
                    write_atomic(&dir.join("subtrees.csv"), census.subtrees.to_csv().as_bytes())?;
                    write_atomic(&dir.join("atoms.csv"), census.atoms.to_csv().as_bytes())?;
                }
                None => print_stdout(&(census.subtrees.to_csv() + &census.atoms.to_csv()))?,
            }
        }
        Command::Pretrain { input } => {
            let corpus = load(&corpus_path(input.as_ref(), &cfg)?)?;
            let result = train(&corpus, &cfg.train, &TrainOutput { dir: out.map(Path::to_path_buf) })?;
            if out.is_none() {
                print_stdout(&metrics_csv(&result.metrics))?;
            }
        }
        Command::Probe { input, checkpoint, task } => {
            let corpus = load(&corpus_path(input.as_ref(), &cfg)?)?;
            let ckpt = Checkpoint::load(checkpoint)?;
            let opts = ProbeOptions {
                seed: cfg.train.seed,
                train_fraction: cfg.probe.train_fraction,
                epochs: cfg.probe.epochs,
                lr: cfg.probe.lr,
                ..ProbeOptions::default()
            };
            let report = match task {
                ProbeWhat::Atoms => probe_masked_atoms(&ckpt, &corpus, cfg.probe.mask_ratio, &opts)?,
                ProbeWhat::Fg => probe_fg(&ckpt, &corpus, &cfg.train.fragment_context()?.patterns, &opts)?,
            };
            emit(out, "probe.txt", &report.to_string())?;
        }
        Command::Gradcheck { instances } => {
            let mut text = String::new();
            let mut ok = true;
            let ops = check_ops(cfg.train.seed, *instances, DEFAULT_STEP)?;
            let pipeline = check_pipeline(cfg.train.seed, (*instances / 10).max(1), DEFAULT_STEP)?;
            let rows = ops
                .iter()
                .map(|r| (r, DEFAULT_TOLERANCE))
                .chain(pipeline.iter().map(|r| (r, PIPELINE_TOLERANCE)));
            for (r, tol) in rows {
                let pass = r.passed(tol);
                ok &= pass;
                let _ = writeln!(
                    text,
                    "{} {} max_rel_error={:.3e} tol={tol:e} instances={}",
                    if pass { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_rel_error,
                    r.instances
                );
            }
            emit(out, "gradcheck.txt", &text)?;
            if !ok {
                eprintln!("error: gradient check failed");
                return Ok(3);
            }
        }
    }
    Ok(0)
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn token_line(m: usize, t: &Token) -> String {
    let value = match &t.value {
        TokenValue::Discrete(id) => id.to_string(),
        TokenValue::Continuous(v) => v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" "),
    };
    format!("{m}\t{}\t{value}\n", join(t.fragment.nodes()))
}

fn tokenize_corpus(
    graphs: &[MolGraph],
    with: TokenizeWith,
    checkpoint: Option<&Path>,
    cfg: &RunConfig,
    out: Option<&Path>,
) -> Result<String> {
    let mut text = String::from("# molecule\tnodes\tvalue\n");
    match with {
        TokenizeWith::Node | TokenizeWith::Edge => {
            let atoms = AtomVocab::from_graphs(graphs);
            for (m, g) in graphs.iter().enumerate() {
                let toks = if with == TokenizeWith::Node { tok_node(g, &atoms) } else { tok_edge(g) };
                toks.iter().for_each(|t| text.push_str(&token_line(m, t)));
            }
        }
        TokenizeWith::Motif => {
            let recipe = cfg.train.recipe()?;
            let ctx = cfg.train.fragment_context()?;
            let vocab = build_motif_vocab(graphs, &recipe, &ctx, cfg.train.motif_threshold)?;
            if let Some(dir) = out {
                vocab.save(dir.join("motif_vocab.tsv"))?;
            }
            for (m, g) in graphs.iter().enumerate() {
                for t in tok_motif(g, &recipe, &ctx, &vocab)? {
                    text.push_str(&token_line(m, &t));
                }
            }
        }
        TokenizeWith::Sgt => {
            // Embedding from a checkpoint, or a freshly seeded one.
            let (model, atoms) = match checkpoint {
                Some(p) => {
                    let ckpt = Checkpoint::load(p)?;
                    (Autoencoder::from_checkpoint(&ckpt)?, ckpt.atoms()?)
                }
                None => {
                    let atoms = AtomVocab::from_graphs(graphs);
                    let mcfg = ModelConfig {
                        num_atom_ids: atoms.size(),
                        dim: cfg.train.dim,
                        encoder: cfg.train.encoder,
                        decoder: cfg.train.decoder,
                        out_dim: cfg.train.dim,
                        edge_features: cfg.train.edge_features,
                        remask: cfg.train.remask,
                    };
                    (Autoencoder::new(mcfg, &mut stream_rng(cfg.train.seed, "init", 0))?, atoms)
                }
            };
            let emb = model_embedding(&model, &atoms)?;
            let sgt = crate::sgt::SgtConfig {
                embedding_dim: model.cfg.dim,
                ..cfg.train.sgt_config()?
            };
            for (m, g) in graphs.iter().enumerate() {
                let toks = sgt_tokenize(g, &emb, &sgt)?;
                for (i, row) in toks.values.rows().into_iter().enumerate() {
                    let vals: Vec<String> = row.iter().map(|x| format!("{x:.6}")).collect();
                    let _ = writeln!(text, "{m}\t{i}\t{}", vals.join(" "));
                }
            }
        }
        TokenizeWith::Frozen => {
            let path = checkpoint
                .or(cfg.train.frozen_checkpoint.as_deref())
                .ok_or_else(|| Error::Config("the frozen tokenizer needs --checkpoint".into()))?;
            let tok = FrozenGnnTokenizer::from_checkpoint(&Checkpoint::load(path)?)?;
            for (m, g) in graphs.iter().enumerate() {
                frozen_gnn_tokenize(g, &tok).iter().for_each(|t| text.push_str(&token_line(m, t)));
            }
        }
    }
    Ok(text)
}
