//! Pretrains the toy encoder and runs the sequential capacity experiment.
//!
//! cargo run --release -p layerprobe --example toy_capacity -- [pretrain_epochs] [lr] [batch]

use std::time::Instant;

use layerprobe::capacity::{run_capacity, CapacityPlan};
use layerprobe::nn::{AdamWConfig, DecoderHead, EncoderConfig, EncoderModel};
use layerprobe::toy::{generate, ToyConfig};
use layerprobe::training::{train_mlm, TrainConfig};
use layerprobe::Execution;

fn main() -> layerprobe::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5e-4);
    let batch: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
    let world = generate(&ToyConfig::default())?;
    println!("vocab {} corpus {} lines", world.vocab.len(), world.corpus.len());
    let cfg = EncoderConfig::toy(world.vocab.len());
    let mut model = EncoderModel::new(cfg.clone())?;
    let mut head = DecoderHead::random(cfg.hidden_dim, cfg.vocab_size, cfg.seed + 1);
    let t = Instant::now();
    let train = TrainConfig { epochs, execution: Execution::Sequential, ..TrainConfig::default() };
    let trace = train_mlm(&mut model, &mut head, &world.corpus, &world.vocab, &train)?;
    println!("pretrain {:.1}s initial val {:?}", t.elapsed().as_secs_f64(), trace.initial_val_loss);
    for e in &trace.epochs {
        println!("  epoch {} train {:.3} val {:?}", e.epoch, e.train_loss, e.val_loss);
    }
    for epochs_per_set in [10, 1] {
        let plan = CapacityPlan {
            epochs_per_set,
            batch_size: batch,
            optimizer: AdamWConfig { lr, ..AdamWConfig::default() },
            ..CapacityPlan::default()
        };
        let t = Instant::now();
        let r = run_capacity(&model, &head, &world.probe_sets, &world.vocab, &world.heldout, &plan, Execution::Sequential)?;
        println!("{} in {:.1}s", r.label, t.elapsed().as_secs_f64());
        for s in &r.sets {
            println!("  {:<12} base {:.2} after {:.2}", s.name, s.baseline_p_at_1, s.p_at_1);
        }
        let tl: Vec<String> = r.train_losses.iter().map(|l| format!("{l:.2}")).collect();
        println!("  train losses {}", tl.join(" "));
        println!("  heldout {:.3} -> {:.3} ({:+.1}%)", r.heldout_loss_before, r.heldout_loss_after, r.relative_increase_percent());
    }
    Ok(())
}
