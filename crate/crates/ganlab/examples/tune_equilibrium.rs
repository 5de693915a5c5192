use ganlab::harness::{TrainRun, TrainSettings};
use ganlab::losses::{Variant, VariantConfig};
use ganlab::pkpd::dataset::{Dataset, DatasetConfig};

fn main() {
    let ds_cfg = DatasetConfig {
        patients: 1,
        horizon: 30,
        seed: 5,
        classes: 1,
        ..DatasetConfig::default()
    };
    let ds = Dataset::synthesize(&ds_cfg).unwrap();
    let hash = ds.sha256_hex();
    for (g_lr, d_lr, steps, beta1) in [
        (5e-4, 5e-4, 8000, 0.5),
        (5e-4, 2e-4, 8000, 0.9),
        (1e-3, 3e-4, 8000, 0.9),
        (3e-4, 3e-4, 12000, 0.9),
    ] {
        let mut accs = Vec::new();
        for seed in 1..=4u64 {
            let cfg = VariantConfig::new(Variant::VanillaNonSaturating);
            let settings = TrainSettings {
                steps,
                batch: 8,
                probe_every: 10,
                checkpoint_every: 0,
                probe_size: 8,
                noise_width: 2,
                latent_width: 4,
                hidden: vec![16],
                g_learning_rate: g_lr,
                d_learning_rate: d_lr,
                adam_beta1: beta1,
                ..TrainSettings::default()
            };
            let mut run = TrainRun::initialize(&ds, &hash, &cfg, &settings, seed).unwrap();
            for _ in 0..settings.steps {
                run.train_step(&ds).unwrap();
            }
            let tail = &run.records[(steps as f64 * 0.8) as usize..];
            let mean_acc: f64 =
                tail.iter().map(|r| r.d_accuracy_probe).sum::<f64>() / tail.len() as f64;
            accs.push(mean_acc);
        }
        println!(
            "g_lr={g_lr} d_lr={d_lr} steps={steps} b1={beta1}: {:?}",
            accs.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
    }
}
