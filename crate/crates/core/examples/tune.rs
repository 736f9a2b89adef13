//! Scratch hyperparameter sweep for the soft checks. Not part of the build.

use moe_lab::analytics::{token_entropy_vs_experts, TokenEntropyRecord};
use moe_lab::layer::GateMode;
use moe_lab::model::{lm_forward, token_entropy, ModelDims, ToyLm};
use moe_lab::routing::{BudgetConfig, RoutingStrategy};
use moe_lab::task::{Difficulty, SyntheticTask};
use moe_lab::train::{evaluate, train, TrainConfig, EVAL_SEQUENCE_OFFSET};

fn run(
    strategy: RoutingStrategy,
    k: usize,
    seed: u64,
    steps: usize,
    lr: f64,
    aux: f64,
    dims: ModelDims,
    seq_len: usize,
) -> (f64, f64, f64, f64) {
    let task = SyntheticTask::new(seed, seq_len, dims.d_model, dims.vocab).unwrap();
    let budget = BudgetConfig::new(k, dims.n_experts).unwrap();
    let cfg = TrainConfig {
        steps,
        learning_rate: lr,
        batch_size: 6,
        aux_loss_coefficient: aux,
        strategy,
        budget,
        seed,
    };
    let model = ToyLm::init(dims, seed).unwrap();
    let out = train(model, &task, &cfg).unwrap();
    let report = evaluate(&out.model, &task, strategy, &budget, aux, 32, 6).unwrap();

    // correlation
    let mut records = Vec::new();
    let mut easy = (0.0, 0usize);
    let mut hard = (0.0, 0usize);
    for s in 0..32u64 {
        let sample = task.sample(EVAL_SEQUENCE_OFFSET + s);
        let fwd = lm_forward(&out.model, &sample.inputs, strategy, &budget, GateMode::Raw).unwrap();
        for t in 0..sample.targets.len() {
            let count: usize = fwd.masks.iter().map(|m| m.counts()[t]).sum();
            records.push(TokenEntropyRecord {
                token_index: t,
                entropy: token_entropy(fwd.prob_rows.row(t)),
                activated_experts: count,
                difficulty: Some(sample.difficulty[t]),
            });
            match sample.difficulty[t] {
                Difficulty::Easy => {
                    easy.0 += count as f64;
                    easy.1 += 1;
                }
                Difficulty::Hard => {
                    hard.0 += count as f64;
                    hard.1 += 1;
                }
            }
        }
    }
    let corr = token_entropy_vs_experts(&records)
        .map(|r| r.correlation)
        .unwrap_or(f64::NAN);
    (
        report.task_loss,
        corr,
        easy.0 / easy.1 as f64,
        hard.0 / hard.1 as f64,
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1000);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.3);
    let aux: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let seq_len: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(12);
    let d_hidden: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(24);
    let dims = ModelDims {
        d_model: 12,
        d_hidden,
        n_experts: 8,
        n_layers: 1,
        vocab: 8,
    };

    println!("steps={} lr={} aux={} seq_len={}", steps, lr, aux, seq_len);
    let t0 = std::time::Instant::now();
    println!("--- soft A: bounded seqtopk k=2 ---");
    for seed in [11u64, 12, 13, 14, 15] {
        let (loss, corr, easy, hard) = run(
            RoutingStrategy::SeqTopKBounded,
            2,
            seed,
            steps,
            lr,
            aux,
            dims,
            seq_len,
        );
        println!(
            "seed {}: loss {:.4} corr {:+.3} experts easy {:.2} hard {:.2} {}",
            seed,
            loss,
            corr,
            easy,
            hard,
            if corr > 0.0 && hard > easy { "OK" } else { "MISS" }
        );
    }
    println!("--- soft B ---");
    for k in [1usize, 2] {
        for seed in [11u64, 12, 13, 14, 15] {
            let (g, _, _, _) = run(RoutingStrategy::SeqTopKBounded, k, seed, steps, lr, aux, dims, seq_len);
            let (t, _, _, _) = run(RoutingStrategy::TopK, k, seed, steps, lr, aux, dims, seq_len);
            let (o, _, _, _) = run(RoutingStrategy::OnlineSeqTopK, k, seed, steps, lr, aux, dims, seq_len);
            println!(
                "k={} seed {}: global {:.4} topk {:.4} online {:.4}  g<=t:{} g<=o:{}",
                k,
                seed,
                g,
                t,
                o,
                g <= t,
                g <= o
            );
        }
    }
    println!("elapsed {:.1?}", t0.elapsed());
}
