//! Desk-scale synthetic experiment: trains the dense-bundle prior and all
//! four ablation variants, then prints the table and filter effect.
//!
//! cargo run --release -p fiberseg-core --example desk_run [seed]

use std::time::Instant;

use fiberseg::continuity::{train_prior, PriorConfig, PriorSource};
use fiberseg::evaluate::{ablation_harness, ablation_table, AblationPlan, MatchConfig, Variant};
use fiberseg::model::{ModelConfig, UNetConfig};
use fiberseg::pipeline::{stack_priors, FilterConfig};
use fiberseg::synth::{generate_stack, SynthConfig};
use fiberseg::trainer::TrainConfig;

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let t0 = Instant::now();
    let train = generate_stack(&SynthConfig {
        seed,
        n_sections: 45,
        charted_stride: 9,
        ..Default::default()
    })
    .unwrap();
    let test = generate_stack(&SynthConfig {
        seed: seed + 1000,
        n_sections: 10,
        ..Default::default()
    })
    .unwrap();
    println!("data {:.0?}", t0.elapsed());

    let pc = PriorConfig { seed, ..Default::default() };
    let prior = train_prior(&train, &pc).unwrap();
    let priors = stack_priors(&test, PriorSource::Model(&prior), &pc).unwrap();
    for (p, s) in priors.priors.iter().zip(&test) {
        let gt = s.label_mask(2).unwrap();
        let hit = p.mask.as_slice().iter().zip(gt.as_slice()).filter(|(a, b)| **a == 1 && **b == 1).count();
        println!("prior {}: {} px, gt {} px, overlap {}", s.id, p.mask.count(), gt.count(), hit);
    }
    println!("prior {:.0?}", t0.elapsed());

    let plan = AblationPlan {
        model: ModelConfig {
            unet: UNetConfig {
                base_width: 16,
                patch_size: 128,
                ..Default::default()
            },
            ..Default::default()
        },
        train: TrainConfig {
            pretrain_epochs: 20,
            te_epochs: 20,
            patience: 20,
            seed,
            ..Default::default()
        },
        filter: FilterConfig::default(),
        match_config: MatchConfig::default(),
    };
    let run = ablation_harness(&train, &test, Some(&priors), &Variant::ALL, &plan).unwrap();
    println!("{}", ablation_table(&run.rows));
    for r in &run.results {
        println!(
            "{}: raw TPR {:?}/{:?} FP {:.2} -> filtered TPR {:?}/{:?} FP {:.2}",
            r.variant, r.raw.tpr_dense, r.raw.tpr_moderate, r.raw.fp_avg, r.filtered.tpr_dense, r.filtered.tpr_moderate, r.filtered.fp_avg
        );
        for h in &r.history {
            println!("  {:?} {} loss {:.4} val {:.4} tpr {:?}", h.phase, h.epoch, h.train_loss, h.val_loss, h.val_tpr_dense);
        }
    }
    println!("total {:.0?}", t0.elapsed());
}
