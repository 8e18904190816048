use dfbf_core::distill::{finetune, DistillConfig, TapSelection};
use dfbf_core::graph::build_resnet_tiny;
use dfbf_core::prune::{apply_prune, plan_prune, PruneStrategy, SparsityMode};
use dfbf_core::rng::rng_from_seed;
use dfbf_core::tensor::Tensor;

fn main() {
    let mut rng = rng_from_seed(0);
    let teacher = build_resnet_tiny::<f32>(&[8, 16, 32], &[1, 1, 1], 4, &mut rng).unwrap();
    let plan = plan_prune(&teacher, 0.3, PruneStrategy::L1, SparsityMode::Uniform).unwrap();
    let pruned = apply_prune(&teacher, &plan).unwrap();
    let images: Vec<Tensor<f32>> = (0..8)
        .map(|i| {
            let mut r = rng_from_seed(100 + i);
            Tensor::rand_uniform(vec![3, 24, 24], 0.0, 1.0, &mut r)
        })
        .collect();
    let dcfg = DistillConfig { epochs: 1, batch_size: 4, ..DistillConfig::default() };
    match finetune(pruned, &teacher, &images, &dcfg) {
        Ok(_) => println!("finetune ok"),
        Err(e) => println!("finetune error: {e}"),
    }
}
