use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lrn::bench::{bench, BenchConfig, BenchMode, Pass, Precision};
use lrn::checkpoint::Checkpoint;
use lrn::checks::{decompose_check, gradcheck, gradnorms, ElmanRecurrence};
use lrn::engine::Parallel;
use lrn::{corpus, metrics, trace, Error};
use lrn_core::tasks::TaskId;
use lrn_core::training::{train, OptimizerKind, TrainConfig};
use lrn_core::{Activation, CellKind};

#[derive(Parser)]
#[command(name = "lrn", version, about = "Lightweight recurrent network toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare analytic BPTT gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train a model on a synthetic task or the character corpus.
    Train(TrainArgs),
    /// Time fused against naive recurrences.
    Bench(BenchArgs),
    /// Per-token decay traces of a trained model, as CSV.
    Trace(TraceArgs),
    /// Backward hidden-gradient norms over a sequence, as JSON.
    Gradnorms(GradnormsArgs),
    /// Check the weighted-sum expansion of the hidden state.
    DecomposeCheck(DecomposeArgs),
}

#[derive(Args)]
struct Output {
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Output {
    fn write(&self, text: &str) -> Result<(), Error> {
        match &self.out {
            Some(path) => std::fs::write(path, text).map_err(|e| io_error(path, e)),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

fn io_error(path: &Path, e: io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "lrn")]
    cell: CellKind,
    /// Activation; every supported one when omitted.
    #[arg(long)]
    activation: Option<Activation>,
    #[arg(long, default_value_t = 6)]
    dim: usize,
    #[arg(long, default_value_t = 10)]
    len: usize,
    #[arg(long, default_value_t = 13)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    task: TaskId,
    #[arg(long, default_value = "lrn")]
    cell: CellKind,
    #[arg(long)]
    activation: Option<Activation>,
    #[arg(long)]
    dim: Option<usize>,
    /// Sequence length; the blank span for the copy task.
    #[arg(long)]
    len: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    /// Initial forget-gate bias.
    #[arg(long)]
    forget_bias: Option<f64>,
    /// Initial input-gate bias.
    #[arg(long)]
    input_bias: Option<f64>,
    /// Stop once the evaluation metric reaches this value.
    #[arg(long)]
    target: Option<f64>,
    /// Text file for the char-LM task; the bundled corpus otherwise.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Where to save the trained model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// JSON Lines metrics; stdout otherwise.
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "lrn")]
    cell: CellKind,
    #[arg(long, default_value = "fused")]
    mode: BenchMode,
    #[arg(long, default_value_t = 512)]
    dim: usize,
    #[arg(long, default_value_t = 256)]
    len: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 2)]
    warmups: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    layer_norm: bool,
    /// Time forward and backward passes together.
    #[arg(long)]
    backward: bool,
    #[arg(long, default_value = "f32")]
    precision: Precision,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: String,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct GradnormsArgs {
    #[arg(long, default_value = "lrn")]
    cell: CellKind,
    #[arg(long)]
    activation: Option<Activation>,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    len: usize,
    #[arg(long, default_value_t = 9)]
    seed: u64,
    /// Elman only: replace `U` by this multiple of a random orthogonal matrix.
    #[arg(long)]
    orthogonal_scale: Option<f64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long, default_value = "lrn")]
    cell: CellKind,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 32)]
    len: usize,
    #[arg(long, default_value_t = 21)]
    seed: u64,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[command(flatten)]
    output: Output,
}

/// Outcome of a subcommand that ran to completion.
enum Verdict {
    Pass,
    Fail,
}

fn run_gradcheck(a: GradcheckArgs) -> Result<Verdict, Error> {
    let acts = match a.activation {
        Some(g) => vec![g],
        None => a.cell.activations().to_vec(),
    };
    let mut reports = Vec::new();
    for g in acts {
        reports.push(gradcheck(a.cell, g, a.dim, a.len, a.seed)?);
    }
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let mut text = String::new();
    for r in &reports {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    text.push_str(&format!("max relative error {worst:e} (tol {:e})\n", a.tol));
    a.output.write(&text)?;
    Ok(if worst <= a.tol { Verdict::Pass } else { Verdict::Fail })
}

fn run_train(a: TrainArgs) -> Result<Verdict, Error> {
    let mut c = TrainConfig::new(a.task, a.cell);
    if let Some(g) = a.activation {
        c.activation = g;
    }
    macro_rules! set {
        ($($field:ident = $arg:expr),*) => { $(if let Some(v) = $arg { c.$field = v; })* };
    }
    set!(d = a.dim, seq_len = a.len, batch = a.batch, layers = a.layers, max_steps = a.steps, lr = a.lr,
        clip_norm = a.clip_norm, seed = a.seed, eval_interval = a.eval_interval, optimizer = a.optimizer,
        forget_bias = a.forget_bias, input_bias = a.input_bias);
    c.target_metric = a.target;
    let text = match a.task {
        TaskId::CharLm => Some(corpus::load(a.corpus.as_deref())?),
        _ => None,
    };
    let mut sink: Box<dyn Write> = match &a.output.out {
        Some(path) => Box::new(BufWriter::new(File::create(path).map_err(|e| io_error(path, e))?)),
        None => Box::new(io::stdout().lock()),
    };
    let mut write_err = None;
    let outcome = train(&c, text.as_deref(), &Parallel, |r| {
        if let Err(e) = metrics::write_record(&mut sink, r).and_then(|_| sink.flush()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_error(a.output.out.as_deref().unwrap_or(Path::new("<stdout>")), e));
    }
    if let Some(path) = &a.checkpoint {
        Checkpoint {
            task: Some(a.task),
            model: outcome.model,
        }
        .save(path)?;
    }
    Ok(match (c.target_metric, outcome.reached_target) {
        (Some(_), false) => Verdict::Fail,
        _ => Verdict::Pass,
    })
}

fn run_bench(a: BenchArgs) -> Result<Verdict, Error> {
    let config = BenchConfig {
        kind: a.cell,
        mode: a.mode,
        pass: if a.backward { Pass::ForwardBackward } else { Pass::Forward },
        d: a.dim,
        n: a.len,
        batch: a.batch,
        repeats: a.repeats,
        warmups: a.warmups,
        seed: a.seed,
        layer_norm: a.layer_norm,
        precision: a.precision,
    };
    let report = bench(&config)?;
    a.output.write(&format!("{}\n", serde_json::to_string_pretty(&report)?))?;
    Ok(Verdict::Pass)
}

fn run_trace(a: TraceArgs) -> Result<Verdict, Error> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (ids, names) = trace::encode(&ckpt.model, ckpt.task, &a.input)?;
    let rows = trace::trace(&ckpt.model, &ids, &names)?;
    a.output.write(&trace::to_csv(&rows))?;
    Ok(Verdict::Pass)
}

fn run_gradnorms(a: GradnormsArgs) -> Result<Verdict, Error> {
    let g = a.activation.unwrap_or(a.cell.default_activation());
    let elman = match a.orthogonal_scale {
        Some(s) if a.cell == CellKind::Elman => ElmanRecurrence::ScaledOrthogonal(s),
        Some(_) => return Err(Error::Unsupported("--orthogonal-scale applies to the elman cell only".into())),
        None => ElmanRecurrence::Initialised,
    };
    let report = gradnorms(a.cell, g, a.dim, a.len, a.seed, elman)?;
    a.output.write(&format!("{}\n", serde_json::to_string(&report)?))?;
    Ok(Verdict::Pass)
}

fn run_decompose(a: DecomposeArgs) -> Result<Verdict, Error> {
    let r = decompose_check(a.cell, a.dim, a.len, a.seed)?;
    a.output.write(&format!("{}\nmax |delta| {:e} (tol {:e})\n", serde_json::to_string(&r)?, r.max_abs_error, a.tol))?;
    Ok(if r.max_abs_error <= a.tol { Verdict::Pass } else { Verdict::Fail })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Train(a) => run_train(a),
        Command::Bench(a) => run_bench(a),
        Command::Trace(a) => run_trace(a),
        Command::Gradnorms(a) => run_gradnorms(a),
        Command::DecomposeCheck(a) => run_decompose(a),
    };
    match result {
        Ok(Verdict::Pass) => ExitCode::SUCCESS,
        Ok(Verdict::Fail) => ExitCode::from(1),
        Err(Error::Core(lrn_core::Error::InvalidArgument(msg))) | Err(Error::Unsupported(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
