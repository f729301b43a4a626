use clap::{Parser, Subcommand};
use dynavoc::error::{Error, Result};
use dynavoc::pipeline::{
    decode_split, run_experiment, stage_bench, stage_bias, stage_data, stage_eval,
    stage_pretrain, write_results, EvalBundle, ExperimentSpec, PipelineEvent,
};
use dynavoc::train::TrainEvent;
use std::path::PathBuf;

/// Contextual biasing on a frozen encoder-decoder, end to end on
/// synthetic speech: corpus generation, two training stages, biased beam
/// decoding, scoring, and benchmarks, all driven by one JSON config.
#[derive(Parser)]
#[command(name = "dynavoc", version)]
struct Cli {
    /// JSON experiment config; missing fields take the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppresses per-step training output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generates the synthetic corpus.
    GenData,
    /// Pretrains the backbone (generates the corpus first if needed).
    Pretrain,
    /// Attaches and trains the biasing adapters over the frozen backbone.
    TrainBias,
    /// Decodes one split under one condition and writes hypotheses.
    Decode {
        #[arg(long, default_value = "test_unseen")]
        split: String,
        /// Biasing-list size; 0 decodes without a list.
        #[arg(long, default_value_t = 20)]
        n: usize,
        /// Dynamic-token bonus (defaults to the config's value).
        #[arg(long)]
        mu: Option<f64>,
    },
    /// Decodes and scores the whole condition grid.
    Eval,
    /// Times the decoder; wall-clock numbers go to bench.json only.
    Bench,
    /// Everything: corpus, training, evaluation, benchmark, report.
    Run,
}

fn load_spec(cli: &Cli) -> Result<ExperimentSpec> {
    let mut spec: ExperimentSpec = match &cli.config {
        Some(p) => {
            let body = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&body)?
        }
        None => ExperimentSpec::default(),
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    if let Some(o) = &cli.out {
        spec.out_dir = o.clone();
    }
    Ok(spec)
}

fn print_event(ev: PipelineEvent, quiet: bool) {
    match ev {
        PipelineEvent::Stage(s) => println!("{s}"),
        PipelineEvent::Train(t) if !quiet => match t {
            TrainEvent::Step {
                stage,
                epoch,
                step,
                loss,
                lr,
                grad_norm,
                ..
            } => println!(
                "[{stage:?} epoch {epoch} step {step}] loss {loss:.4} lr {lr:.2e} grad {grad_norm:.3}"
            ),
            TrainEvent::Val {
                stage,
                epoch,
                val_loss,
                val_wer,
                val_bwer,
                ..
            } => {
                let mut line =
                    format!("[{stage:?} epoch {epoch}] val loss {val_loss:.4}");
                if let Some(w) = val_wer {
                    line.push_str(&format!(" wer {:.1}", w * 100.0));
                }
                if let Some(b) = val_bwer {
                    line.push_str(&format!(" listed-wer {:.1}", b * 100.0));
                }
                println!("{line}");
            }
        },
        PipelineEvent::Train(_) => {}
    }
}

fn print_headlines(spec: &ExperimentSpec, bundle: &EvalBundle) {
    let unseen = |n: usize| {
        bundle.conditions.iter().find(|r| {
            r.condition.split == "test_unseen"
                && r.condition.list_size == n
                && (n == 0 || r.condition.mu == spec.decode.mu)
        })
    };
    if let Some(base) = unseen(0) {
        println!("test_unseen baseline: WER (B-WER) {}", base.paired);
    }
    if let Some(biased) = unseen(spec.mu_sweep_n) {
        println!(
            "test_unseen N={} mu={}: WER (B-WER) {}",
            spec.mu_sweep_n, spec.decode.mu, biased.paired
        );
    }
    if let Some(it) = &bundle.iteration {
        println!(
            "decoding iterations on {} qualifying utterances: {:.1}% fewer",
            it.utterances, it.reduction_pct
        );
    }
    println!("full tables: {}", spec.results_path().display());
}

fn dispatch(cli: Cli) -> Result<()> {
    let spec = load_spec(&cli)?;
    let quiet = cli.quiet;
    let mut progress = |ev: PipelineEvent| print_event(ev, quiet);
    match cli.cmd {
        Cmd::GenData => stage_data(&spec, &mut progress),
        Cmd::Pretrain => stage_pretrain(&spec, &mut progress).map(|_| ()),
        Cmd::TrainBias => stage_bias(&spec, &mut progress).map(|_| ()),
        Cmd::Decode { split, n, mu } => {
            let mu = mu.unwrap_or(spec.decode.mu);
            decode_split(&spec, &split, n, mu, &mut progress).map(|_| ())
        }
        Cmd::Eval => {
            let bundle = stage_eval(&spec, &mut progress)?;
            write_results(&spec, &bundle)?;
            print_headlines(&spec, &bundle);
            Ok(())
        }
        Cmd::Bench => {
            stage_bench(&spec, &mut progress)?;
            // Fold the new timings into the report when scores exist.
            let eval_path = spec.eval_path();
            if eval_path.exists() {
                let body =
                    std::fs::read_to_string(&eval_path).map_err(|e| Error::io(&eval_path, e))?;
                let bundle: EvalBundle = serde_json::from_str(&body)?;
                if bundle.spec_hash == spec.spec_hash() {
                    write_results(&spec, &bundle)?;
                }
            }
            println!("timings: {}", spec.bench_path().display());
            Ok(())
        }
        Cmd::Run => {
            let bundle = run_experiment(&spec, &mut progress)?;
            print_headlines(&spec, &bundle);
            Ok(())
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } => "shape",
        Error::NonFinite { .. } => "non_finite",
        Error::InvalidArg { .. } => "invalid_arg",
        Error::Vocab(_) => "vocab",
        Error::Datagen(_) => "datagen",
        Error::Model(_) => "model",
        Error::Checkpoint(_) => "checkpoint",
        Error::Diverged { .. } => "diverged",
        Error::Decode(_) => "decode",
        Error::Metrics(_) => "metrics",
        Error::SpecMismatch { .. } => "spec_mismatch",
        Error::Pipeline(_) => "pipeline",
        Error::GradCheck(_) => "grad_check",
        Error::Io { .. } => "io",
        Error::Json(_) => "json",
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        let record = serde_json::json!({
            "error": { "kind": error_kind(&e), "message": e.to_string() }
        });
        eprintln!("{record}");
        std::process::exit(1);
    }
}
