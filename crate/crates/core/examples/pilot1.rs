use dfbf_core::data::generate_shapes_dataset;
use dfbf_core::distill::{finetune, DistillConfig, TapSelection};
use dfbf_core::graph::build_resnet_tiny;
use dfbf_core::prune::{apply_prune, plan_prune, PruneStrategy, SparsityMode};
use dfbf_core::rng::{derive_seed, rng_from_seed};
use dfbf_core::synth::{generate_dataset, SynthConfig};
use dfbf_core::train::{evaluate, train_supervised, TrainConfig};
use std::time::Instant;

fn main() {
    let seed = 0u64;
    let t_all = Instant::now();

    let train = generate_shapes_dataset::<f32>(derive_seed(seed, "train-data"), 1000, 4, 32, "train").unwrap();
    let test = generate_shapes_dataset::<f32>(derive_seed(seed, "test-data"), 200, 4, 32, "test").unwrap();
    println!("data: {:.1}s", t_all.elapsed().as_secs_f32());

    let mut rng = rng_from_seed(derive_seed(seed, "init"));
    let mut teacher = build_resnet_tiny::<f32>(&[8, 16, 32], &[1, 1, 1], 4, &mut rng).unwrap();
    let t0 = Instant::now();
    let cfg = TrainConfig { epochs: 5, batch_size: 64, lr: 0.05, seed: derive_seed(seed, "train"), ..TrainConfig::default() };
    let stats = train_supervised(&mut teacher, &train, &cfg).unwrap();
    let acc_base = evaluate(&teacher, &test, 256).unwrap().accuracy;
    println!("baseline: acc {:.4}, loss {:.3}->{:.3}, {:.1}s", acc_base,
        stats.first().unwrap().mean_loss, stats.last().unwrap().mean_loss, t0.elapsed().as_secs_f32());

    let t0 = Instant::now();
    let plan = plan_prune(&teacher, 0.3, PruneStrategy::L1, SparsityMode::Uniform).unwrap();
    let pruned = apply_prune(&teacher, &plan).unwrap();
    let acc_pruned = evaluate(&pruned, &test, 256).unwrap().accuracy;
    println!("pruned: acc {:.4} (drop {:.4}), {:.1}s", acc_pruned, acc_base - acc_pruned, t0.elapsed().as_secs_f32());

    let t0 = Instant::now();
    let synth_cfg = SynthConfig {
        width: 24, height: 24, batch_size: 64, num_images: 512, steps: 60,
        seed: derive_seed(seed, "synth"), ..SynthConfig::default()
    };
    let ds = generate_dataset(&teacher, &synth_cfg).unwrap();
    println!("synth: {} images, {:.1}s", ds.len(), t0.elapsed().as_secs_f32());

    for (name, taps) in [("all", TapSelection::All), ("every_second", TapSelection::EverySecond), ("output_only", TapSelection::OutputOnly)] {
        let t0 = Instant::now();
        let dcfg = DistillConfig { gamma: 0.0, taps, epochs: 10, batch_size: 64, seed: derive_seed(seed, "distill"), ..DistillConfig::default() };
        let (tuned, hist) = finetune(pruned.clone(), &teacher, &ds.images, &dcfg).unwrap();
        let acc = evaluate(&tuned, &test, 256).unwrap().accuracy;
        let drop = acc_base - acc_pruned;
        let recovery = if drop > 0.0 { (acc - acc_pruned) / drop } else { f64::NAN };
        println!(
            "dfbf[{name}]: acc {:.4}, recovery {:.2}, loss {:.4}->{:.4}, {:.1}s",
            acc, recovery, hist.first().unwrap().l_total, hist.last().unwrap().l_total,
            t0.elapsed().as_secs_f32()
        );
    }
    println!("TOTAL: {:.1}s", t_all.elapsed().as_secs_f32());
}
