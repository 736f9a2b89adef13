//! `moe-lab`: command-line front end for the routing laboratory.
//!
//! Subcommands:
//! - `route`   — route a score file through a strategy, write the mask CSV,
//!               print the budget audit;
//! - `train`   — train the toy model on the synthetic task, write checkpoint
//!               and metrics CSV;
//! - `analyze` — emit JSON/CSV reports from a checkpoint;
//! - `verify`  — run the acceptance suite.
//!
//! Exit codes: 0 success, 1 verification failure or internal error, 2 input
//! parse/validation error, 3 infeasible budget, 4 training divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use moe_lab::analytics::{
    activation_distribution, batch_sensitivity_sweep, routing_entropy, token_entropy_vs_experts,
    TokenEntropyRecord,
};
use moe_lab::checkpoint::{model_from_json, model_to_json};
use moe_lab::config::ExperimentConfig;
use moe_lab::error::Error;
use moe_lab::layer::GateMode;
use moe_lab::model::{lm_forward, token_entropy, token_logprob_shift, ToyLm};
use moe_lab::online::online_mask;
use moe_lab::report::{
    parse_scores_csv, render_histogram_csv, render_mask_csv, render_metrics_csv, MetricReport,
};
use moe_lab::routing::{BudgetConfig, RoutingStrategy};
use moe_lab::task::SyntheticTask;
use moe_lab::train::{evaluate, train, EVAL_SEQUENCE_OFFSET};
use moe_lab::verify::run_all_checks;
use moe_lab::{RoutingMask, ScoreMatrix};

#[derive(Parser)]
#[command(name = "moe-lab", version, about = "Mixture-of-experts routing laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct BudgetArgs {
    /// Per-token expert budget K.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Minimum experts per token (bounded/online strategies).
    #[arg(long)]
    lower_bound: Option<usize>,
    /// Maximum experts per token (bounded/online strategies); default K+2.
    #[arg(long)]
    upper_bound: Option<usize>,
}

impl BudgetArgs {
    fn to_budget(&self, n_experts: usize) -> Result<BudgetConfig, Error> {
        let lower = self.lower_bound.unwrap_or(1);
        let upper = self
            .upper_bound
            .unwrap_or_else(|| (self.k + 2).min(n_experts));
        BudgetConfig::with_bounds(self.k, lower, upper, n_experts)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Route one or more score files and write mask CSVs.
    Route {
        /// Score file(s): comma-separated rows, one row-stochastic row per token.
        #[arg(long, required = true, num_args = 1..)]
        scores: Vec<PathBuf>,
        #[arg(long, default_value = "topk")]
        strategy: String,
        #[command(flatten)]
        budget: BudgetArgs,
        /// Output directory for mask CSVs.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train the toy model on the synthetic task.
    Train {
        /// Experiment config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config's routing strategy.
        #[arg(long)]
        strategy: Option<String>,
        /// Override the config's per-token budget.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        lower_bound: Option<usize>,
        #[arg(long)]
        upper_bound: Option<usize>,
        /// Override the config's train/task seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit analysis reports from a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task seed for the evaluation corpus.
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long, default_value = "seqtopk-bounded")]
        strategy: String,
        #[command(flatten)]
        budget: BudgetArgs,
        /// Reports to emit (comma separated):
        /// entropy,activation,token_entropy,batch_sensitivity,logprob_shift.
        #[arg(long, default_value = "entropy,activation,token_entropy,batch_sensitivity,logprob_shift")]
        reports: String,
        /// Sequence length of the evaluation corpus.
        #[arg(long, default_value_t = 12)]
        seq_len: usize,
        /// Number of evaluation sequences.
        #[arg(long, default_value_t = 32)]
        sequences: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the acceptance suite; nonzero exit on any failure.
    Verify,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::InvalidInput(_) | Error::Format(_) => 2,
        Error::BudgetInfeasible(_) => 3,
        Error::TrainingDiverged { .. } => 4,
        Error::CorrelationUndefined(_) => 2,
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Route {
            scores,
            strategy,
            budget,
            out,
        } => cmd_route(&scores, &strategy, &budget, &out),
        Command::Train {
            config,
            strategy,
            k,
            lower_bound,
            upper_bound,
            seed,
            out,
        } => cmd_train(config, strategy, k, lower_bound, upper_bound, seed, out),
        Command::Analyze {
            checkpoint,
            seed,
            strategy,
            budget,
            reports,
            seq_len,
            sequences,
            out,
        } => cmd_analyze(
            &checkpoint,
            seed,
            &strategy,
            &budget,
            &reports,
            seq_len,
            sequences,
            &out,
        ),
        Command::Verify => cmd_verify(),
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::InvalidInput(format!("cannot create {:?}: {}", dir, e)))?;
    let path = dir.join(name);
    fs::write(&path, contents)
        .map_err(|e| Error::InvalidInput(format!("cannot write {:?}: {}", path, e)))?;
    println!("wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// route
// ---------------------------------------------------------------------------

fn cmd_route(
    score_paths: &[PathBuf],
    strategy: &str,
    budget_args: &BudgetArgs,
    out: &Path,
) -> Result<ExitCode, Error> {
    let strategy: RoutingStrategy = strategy.parse()?;
    let mut matrices = Vec::new();
    for path in score_paths {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidInput(format!("cannot read {:?}: {}", path, e)))?;
        let scores = parse_scores_csv(&text)
            .map_err(|e| Error::InvalidInput(format!("{}: {}", path.display(), e)))?;
        matrices.push(scores);
    }
    let n = matrices[0].n_experts();
    if matrices.iter().any(|m| m.n_experts() != n) {
        return Err(Error::InvalidInput(
            "score files disagree on expert count".into(),
        ));
    }
    let budget = budget_args.to_budget(n)?;

    let masks: Vec<RoutingMask> = match strategy {
        RoutingStrategy::BatchTopK => moe_lab::routing::batchtopk_route(&matrices, budget.k_tok)?,
        RoutingStrategy::OnlineSeqTopK => matrices
            .iter()
            .map(|m| online_mask(m, &budget))
            .collect::<Result<_, _>>()?,
        _ => matrices
            .iter()
            .map(|m| moe_lab::routing::route_offline(m, strategy, &budget))
            .collect::<Result<_, _>>()?,
    };

    for (idx, (scores, mask)) in matrices.iter().zip(&masks).enumerate() {
        let name = if masks.len() == 1 {
            "mask.csv".to_string()
        } else {
            format!("mask_{}.csv", idx)
        };
        write_file(out, &name, &render_mask_csv(mask))?;
        println!(
            "sequence {}: strategy={} tokens={} experts={} total_selected={} budget={}",
            idx,
            strategy,
            scores.n_tokens(),
            n,
            mask.total_selected(),
            budget.seq_budget(scores.n_tokens()),
        );
        println!("  per-token counts: {:?}", mask.counts());
        println!("  ties break to (lower token, lower expert); scores compared in f64");
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config_path: Option<PathBuf>,
    strategy: Option<String>,
    k: Option<usize>,
    lower_bound: Option<usize>,
    upper_bound: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<ExitCode, Error> {
    let mut cfg = match config_path {
        Some(path) => {
            let text = fs::read_to_string(&path)
                .map_err(|e| Error::InvalidInput(format!("cannot read {:?}: {}", path, e)))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = strategy {
        cfg.strategy = s.parse()?;
    }
    if let Some(k) = k {
        cfg.budget.k_tok = k;
        cfg.budget.upper_bound = (k + 2).min(cfg.model.n_experts);
    }
    if let Some(l) = lower_bound {
        cfg.budget.lower_bound = l;
    }
    if let Some(u) = upper_bound {
        cfg.budget.upper_bound = u;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.task.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o.to_string_lossy().into_owned();
    }
    cfg.validate()?;

    let task = SyntheticTask::new(
        cfg.task.seed,
        cfg.task.seq_len,
        cfg.model.d_model,
        cfg.model.vocab,
    )?;
    let model = ToyLm::init(cfg.model, cfg.train.seed)?;
    let outcome = train(model, &task, &cfg.to_train_config())?;

    let dir = PathBuf::from(&cfg.output_dir);
    write_file(&dir, "config.json", &cfg.to_json())?;
    write_file(&dir, "checkpoint.json", &model_to_json(&outcome.model))?;
    write_file(&dir, "metrics.csv", &render_metrics_csv(&outcome.trace))?;
    if let Some(last) = outcome.trace.last() {
        println!(
            "trained {} steps: task_loss {:.4}, mean experts/token {:.3}",
            last.step + 1,
            last.task_loss,
            last.mean_experts_per_token
        );
    } else {
        println!("0 steps requested: wrote initialization checkpoint");
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn cmd_analyze(
    checkpoint: &Path,
    seed: u64,
    strategy: &str,
    budget_args: &BudgetArgs,
    reports: &str,
    seq_len: usize,
    sequences: usize,
    out: &Path,
) -> Result<ExitCode, Error> {
    let strategy: RoutingStrategy = strategy.parse()?;
    let text = fs::read_to_string(checkpoint)
        .map_err(|e| Error::InvalidInput(format!("cannot read {:?}: {}", checkpoint, e)))?;
    let model = model_from_json(&text)?;
    let dims = model.dims;
    let budget = budget_args.to_budget(dims.n_experts)?;
    let task = SyntheticTask::new(seed, seq_len, dims.d_model, dims.vocab)?;
    let wanted: Vec<&str> = reports.split(',').map(|s| s.trim()).collect();

    // One pass over the evaluation corpus collects everything the per-layer
    // reports need.
    let mut score_rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); dims.n_layers];
    let mut masks: Vec<Vec<RoutingMask>> = vec![Vec::new(); dims.n_layers];
    let mut records: Vec<TokenEntropyRecord> = Vec::new();
    let mut corpus_layer0: Vec<ScoreMatrix> = Vec::new();
    for s in 0..sequences as u64 {
        let sample = task.sample(EVAL_SEQUENCE_OFFSET + s);
        let fwd = lm_forward(&model, &sample.inputs, strategy, &budget, GateMode::Raw)?;
        for l in 0..dims.n_layers {
            for t in 0..sample.targets.len() {
                score_rows[l].push(fwd.scores[l].row(t).to_vec());
            }
            masks[l].push(fwd.masks[l].clone());
        }
        corpus_layer0.push(fwd.scores[0].clone());
        for t in 0..sample.targets.len() {
            records.push(TokenEntropyRecord {
                token_index: t,
                entropy: token_entropy(fwd.prob_rows.row(t)),
                activated_experts: fwd.masks.iter().map(|m| m.counts()[t]).sum(),
                difficulty: Some(sample.difficulty[t]),
            });
        }
    }

    for report in wanted {
        match report {
            "entropy" => {
                for l in 0..dims.n_layers {
                    let stats = routing_entropy(&score_rows[l], &masks[l], l)?;
                    let doc = MetricReport::new("routing_entropy", l, strategy.as_str(), &stats);
                    write_file(out, &format!("routing_entropy_layer{}.json", l), &doc.to_json())?;
                }
            }
            "activation" => {
                for l in 0..dims.n_layers {
                    let hist = activation_distribution(&masks[l]);
                    let doc = MetricReport::new("activation_distribution", l, strategy.as_str(), &hist);
                    write_file(
                        out,
                        &format!("activation_distribution_layer{}.json", l),
                        &doc.to_json(),
                    )?;
                    write_file(
                        out,
                        &format!("activation_distribution_layer{}.csv", l),
                        &render_histogram_csv(&hist),
                    )?;
                }
            }
            "token_entropy" => {
                let rep = token_entropy_vs_experts(&records)?;
                let doc = MetricReport::new("token_entropy_vs_experts", 0, strategy.as_str(), &rep);
                write_file(out, "token_entropy_vs_experts.json", &doc.to_json())?;
            }
            "batch_sensitivity" => {
                let usable = corpus_layer0.len() - corpus_layer0.len() % 16;
                if usable < 16 {
                    return Err(Error::InvalidInput(
                        "batch sensitivity needs at least 16 sequences".into(),
                    ));
                }
                let rep = batch_sensitivity_sweep(
                    strategy,
                    &[1, 4, 16],
                    &corpus_layer0[..usable],
                    &budget,
                )?;
                let doc = MetricReport::new("batch_sensitivity", 0, strategy.as_str(), &rep);
                write_file(out, "batch_sensitivity.json", &doc.to_json())?;
            }
            "logprob_shift" => {
                let sample = task.sample(EVAL_SEQUENCE_OFFSET);
                let ks: Vec<usize> = [1usize, 2, 4, 8]
                    .into_iter()
                    .filter(|&k| k <= dims.n_experts)
                    .collect();
                let reference_k = *ks.last().expect("at least one k");
                let shifts =
                    token_logprob_shift(&model, &sample.inputs, &sample.targets, &ks, reference_k)?;
                let doc = MetricReport::new("logprob_shift", 0, RoutingStrategy::TopK.as_str(), &shifts);
                write_file(out, "logprob_shift.json", &doc.to_json())?;
            }
            other => {
                return Err(Error::InvalidInput(format!("unknown report '{}'", other)));
            }
        }
    }

    // Headline numbers on stdout.
    let eval = evaluate(&model, &task, strategy, &budget, 0.01, sequences.min(16), 8)?;
    println!(
        "eval: task_loss {:.4}, experts/token {:.3} (easy {:.3}, hard {:.3})",
        eval.task_loss, eval.mean_experts_per_token, eval.mean_experts_easy, eval.mean_experts_hard
    );
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

fn cmd_verify() -> Result<ExitCode, Error> {
    let results = run_all_checks();
    let mut failed = 0usize;
    for r in &results {
        println!("{}", r);
        if !r.passed {
            failed += 1;
        }
    }
    println!(
        "{} of {} checks passed",
        results.len() - failed,
        results.len()
    );
    if failed == 0 {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::FAILURE)
    }
}
