//! Distillation fine-tuning of a pruned backbone against its unpruned
//! teacher.
//!
//! Both networks run on synthetic images with batch norm in eval mode (the
//! teacher's distributional anchor stays fixed and the student's running
//! statistics are not corrupted by non-natural batch statistics). The
//! objective matches the student's boundary output and a weighted set of
//! intermediate tap activations to the teacher's, with depth-increasing
//! weights mu_n = n / (N + 1) * gamma + 1 and mu_out = gamma + 1. Only the
//! pruned backbone's parameters move; the head is never executed, let
//! alone updated.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ExecOptions, Execution, NetworkGraph};
use crate::optim::SgdOptimizer;
use crate::rng::derive_seed_indexed;
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapSelection {
    All,
    EverySecond,
    OutputOnly,
}

/// Fine-tuning settings; optimizer defaults follow the standard recipe
/// (SGD, lr 0.01, momentum 0.9, weight decay 5e-4).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub gamma: f64,
    pub taps: TapSelection,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            gamma: 0.0,
            taps: TapSelection::All,
            epochs: 30,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

/// The loss weighting schedule: mu_n = n / (N + 1) * gamma + 1 for
/// n = 1..=N, mu_out = gamma + 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuSchedule {
    pub mu: Vec<f64>,
    pub mu_out: f64,
}

pub fn mu_schedule(n_taps: usize, gamma: f64) -> Result<MuSchedule> {
    if !(gamma >= 0.0) {
        return Err(Error::config(format!("gamma must be non-negative, got {gamma}")));
    }
    let denom = (n_taps + 1) as f64;
    let mu = (1..=n_taps).map(|n| n as f64 / denom * gamma + 1.0).collect();
    Ok(MuSchedule { mu, mu_out: gamma + 1.0 })
}

/// Mean-over-batch, channel-summed, spatial-mean l1 mismatch between two
/// equally shaped feature maps: l1_distance_sum / (B * spatial).
pub fn feature_l1_loss<T: Scalar>(tape: &mut crate::tape::Tape<T>, student: Var, teacher: Var) -> Result<Var> {
    let shape = tape.shape(student).to_vec();
    if shape != tape.shape(teacher) {
        return Err(Error::shape(format!(
            "feature loss: shape {:?} vs {:?}",
            shape,
            tape.shape(teacher)
        )));
    }
    let batch = shape.first().copied().unwrap_or(1);
    let spatial: usize = if shape.len() > 2 { shape[2..].iter().product() } else { 1 };
    let raw = tape.l1_distance_sum(student, teacher)?;
    Ok(tape.scale(raw, T::one() / T::from_usize(batch * spatial)))
}

/// Indices of the taps used under a selection rule. EverySecond keeps the
/// odd depth indices n = 1, 3, ... and renumbers before the mu schedule.
pub fn select_tap_indices(total: usize, selection: TapSelection) -> Vec<usize> {
    match selection {
        TapSelection::All => (0..total).collect(),
        TapSelection::EverySecond => (0..total).step_by(2).collect(),
        TapSelection::OutputOnly => Vec::new(),
    }
}

/// Per-step loss values, later serialized as JSONL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_out: f64,
    pub l_inter: f64,
    pub l_total: f64,
}

struct DfbfLossVars {
    total: Var,
    out: Var,
    inter: Option<Var>,
}

/// Build mu_out * L_out + L_inter on the student tape; the teacher's
/// activations enter as constants.
fn build_dfbf_loss<T: Scalar>(
    student: &mut Execution<T>,
    teacher: &Execution<T>,
    tap_indices: &[usize],
    schedule: &MuSchedule,
) -> Result<DfbfLossVars> {
    let z_teacher = student.tape.constant(
        teacher.tape.shape(teacher.output).to_vec(),
        teacher.tape.value(teacher.output).to_vec(),
    );
    let out = feature_l1_loss(&mut student.tape, student.output, z_teacher)
        .map_err(|e| Error::graph(format!("boundary output misalignment: {e}")))?;

    let mut inter: Option<Var> = None;
    for (slot, &tap_idx) in tap_indices.iter().enumerate() {
        let (sid, s_var) = &student.taps[tap_idx];
        let (tid, t_var) = &teacher.taps[tap_idx];
        if sid != tid {
            return Err(Error::graph(format!("tap misalignment: student '{sid}' vs teacher '{tid}'")));
        }
        let t_const = student
            .tape
            .constant(teacher.tape.shape(*t_var).to_vec(), teacher.tape.value(*t_var).to_vec());
        let tap_loss = feature_l1_loss(&mut student.tape, *s_var, t_const)
            .map_err(|e| Error::graph(format!("tap misalignment at '{sid}': {e}")))?;
        let weighted = student.tape.scale(tap_loss, T::from_f64(schedule.mu[slot]));
        inter = Some(match inter {
            Some(acc) => student.tape.add(acc, weighted)?,
            None => weighted,
        });
    }

    let out_weighted = student.tape.scale(out, T::from_f64(schedule.mu_out));
    let total = match inter {
        Some(i) => student.tape.add(out_weighted, i)?,
        None => out_weighted,
    };
    Ok(DfbfLossVars { total, out, inter })
}

/// Structural pre-check: intermediate tap lists and the boundary must agree
/// in id order and shape between the two graphs.
pub fn check_tap_alignment<T: Scalar>(
    pruned: &NetworkGraph<T>,
    teacher: &NetworkGraph<T>,
    input_shape: &[usize],
) -> Result<()> {
    let p_taps = pruned.intermediate_tap_ids();
    let t_taps = teacher.intermediate_tap_ids();
    if p_taps != t_taps {
        return Err(Error::graph(format!(
            "tap misalignment: pruned taps {p_taps:?} vs teacher taps {t_taps:?}"
        )));
    }
    let p_shapes = pruned.infer_shapes(input_shape)?;
    let t_shapes = teacher.infer_shapes(input_shape)?;
    for tap in p_taps.iter().chain([pruned.backbone_boundary().to_string()].iter()) {
        if p_shapes.get(tap) != t_shapes.get(tap) {
            return Err(Error::graph(format!(
                "tap misalignment at '{tap}': pruned {:?} vs teacher {:?}",
                p_shapes.get(tap),
                t_shapes.get(tap)
            )));
        }
    }
    Ok(())
}

/// One evaluation of the distillation objective on a batch; returns
/// (l_out, l_inter, l_total) without touching any parameters.
pub fn dfbf_loss<T: Scalar>(
    pruned: &NetworkGraph<T>,
    teacher: &NetworkGraph<T>,
    batch: &Tensor<T>,
    cfg: &DistillConfig,
) -> Result<(f64, f64, f64)> {
    let teacher_exec = teacher.forward(batch, &ExecOptions::distill_teacher())?;
    let mut student_exec = pruned.forward(batch, &ExecOptions::distill_student())?;
    let tap_indices = select_tap_indices(teacher_exec.taps.len(), cfg.taps);
    let schedule = mu_schedule(tap_indices.len(), cfg.gamma)?;
    let vars = build_dfbf_loss(&mut student_exec, &teacher_exec, &tap_indices, &schedule)?;
    let l_out = student_exec.tape.scalar(vars.out).to_f64x();
    let l_inter = vars.inter.map_or(0.0, |v| student_exec.tape.scalar(v).to_f64x());
    let l_total = student_exec.tape.scalar(vars.total).to_f64x();
    Ok((l_out, l_inter, l_total))
}

/// Fine-tune the pruned backbone on synthetic images. Only backbone
/// parameters of `pruned` change; the teacher is read-only throughout.
pub fn finetune<T: Scalar>(
    mut pruned: NetworkGraph<T>,
    teacher: &NetworkGraph<T>,
    images: &[Tensor<T>],
    cfg: &DistillConfig,
) -> Result<(NetworkGraph<T>, Vec<LossRecord>)> {
    if images.is_empty() {
        return Err(Error::data("finetune: the synthetic dataset is empty".to_string()));
    }
    let img_shape = images[0].shape().to_vec();
    let mut input_shape = vec![1usize];
    input_shape.extend_from_slice(&img_shape);
    check_tap_alignment(&pruned, teacher, &input_shape)?;

    let total_taps = teacher.intermediate_tap_ids().len();
    let tap_indices = select_tap_indices(total_taps, cfg.taps);
    let schedule = mu_schedule(tap_indices.len(), cfg.gamma)?;

    let mut optimizer = SgdOptimizer::new(
        T::from_f64(cfg.lr),
        T::from_f64(cfg.momentum),
        T::from_f64(cfg.weight_decay),
    )?;
    let trainable = pruned.trainable_param_keys(true);
    let per = images[0].numel();

    let mut history = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let shuffle = derive_seed_indexed(cfg.seed, "distill-epoch", epoch as u64);
        for batch_idx in crate::data::batch_indices(images.len(), cfg.batch_size, Some(shuffle)) {
            let mut data = Vec::with_capacity(batch_idx.len() * per);
            for &i in &batch_idx {
                data.extend_from_slice(images[i].data());
            }
            let mut shape = vec![batch_idx.len()];
            shape.extend_from_slice(&img_shape);
            let batch = Tensor::from_vec(shape, data)?;

            let teacher_exec = teacher.forward(&batch, &ExecOptions::distill_teacher())?;
            let mut student_exec = pruned.forward(&batch, &ExecOptions::distill_student())?;
            let vars = build_dfbf_loss(&mut student_exec, &teacher_exec, &tap_indices, &schedule)?;
            student_exec.tape.check_finite(vars.total, "distillation loss")?;

            let l_out = student_exec.tape.scalar(vars.out).to_f64x();
            let l_inter = vars.inter.map_or(0.0, |v| student_exec.tape.scalar(v).to_f64x());
            let l_total = student_exec.tape.scalar(vars.total).to_f64x();

            student_exec.tape.backward(vars.total)?;
            let grads: BTreeMap<String, Vec<T>> = student_exec.param_grads();
            optimizer.step(pruned.params_mut(), &grads, &trainable)?;

            step += 1;
            history.push(LossRecord { step, epoch, l_out, l_inter, l_total });
        }
    }
    Ok((pruned, history))
}

/// Eq. 4: run the reassembled model (pruned backbone + original head).
pub fn assemble_and_predict<T: Scalar>(pruned: &NetworkGraph<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    pruned.predict(input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_resnet_tiny;
    use crate::prune::{apply_prune, plan_prune, PruneStrategy, SparsityMode};
    use crate::rng::rng_from_seed;
    use crate::tape::Tape;

    #[test]
    fn mu_schedule_collapses_at_gamma_zero() {
        for n in [1usize, 3, 7] {
            let s = mu_schedule(n, 0.0).unwrap();
            assert!(s.mu.iter().all(|&m| m == 1.0));
            assert_eq!(s.mu_out, 1.0);
        }
    }

    #[test]
    fn mu_schedule_gamma6_n3() {
        let s = mu_schedule(3, 6.0).unwrap();
        assert_eq!(s.mu, vec![2.5, 4.0, 5.5]);
        assert_eq!(s.mu_out, 7.0);
    }

    #[test]
    fn mu_schedule_gamma1_n4() {
        let s = mu_schedule(4, 1.0).unwrap();
        for (a, b) in s.mu.iter().zip([1.2, 1.4, 1.6, 1.8]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(s.mu_out, 2.0);
    }

    #[test]
    fn mu_strictly_increasing_for_positive_gamma() {
        let s = mu_schedule(5, 2.5).unwrap();
        for w in s.mu.windows(2) {
            assert!(w[0] < w[1]);
        }
        assert!(*s.mu.last().unwrap() < s.mu_out);
    }

    #[test]
    fn out_loss_identical_inputs_is_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let mut rng = rng_from_seed(1);
        let t = Tensor::randn(vec![2, 3, 4, 4], 0.0, 1.0, &mut rng);
        let a = tape.leaf(&t);
        let b = tape.constant(t.shape().to_vec(), t.data().to_vec());
        let loss = feature_l1_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);
    }

    #[test]
    fn out_loss_hand_case() {
        // z = 0, z_hat = ones [1,2,2,2]: sum 8, / (1 * 4) = 2.0
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(vec![1, 2, 2, 2], vec![1.0; 8]);
        let b = tape.constant(vec![1, 2, 2, 2], vec![0.0; 8]);
        let loss = feature_l1_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.scalar(loss), 2.0);
    }

    #[test]
    fn out_loss_matches_loop_oracle() {
        let mut rng = rng_from_seed(2);
        let x = Tensor::<f64>::randn(vec![3, 4, 5, 5], 0.0, 1.0, &mut rng);
        let y = Tensor::<f64>::randn(vec![3, 4, 5, 5], 0.0, 1.0, &mut rng);
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(&x);
        let b = tape.leaf(&y);
        let loss = feature_l1_loss(&mut tape, a, b).unwrap();
        let mut oracle = 0.0;
        for (u, v) in x.data().iter().zip(y.data()) {
            oracle += (u - v).abs();
        }
        oracle /= (3 * 25) as f64;
        assert!((tape.scalar(loss) - oracle).abs() < 1e-6);
    }

    #[test]
    fn rank2_feature_loss_normalizes_by_batch_only() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(vec![2, 3], vec![1.0; 6]);
        let b = tape.constant(vec![2, 3], vec![0.0; 6]);
        let loss = feature_l1_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.scalar(loss), 3.0);
    }

    #[test]
    fn single_tap_weighting_is_linear() {
        // per-tap raw loss 1.0 with mu = 2.5 contributes exactly 2.5
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(vec![1, 1, 2, 2], vec![1.0; 4]);
        let b = tape.constant(vec![1, 1, 2, 2], vec![0.0; 4]);
        let raw = feature_l1_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.scalar(raw), 1.0);
        let weighted = tape.scale(raw, 2.5);
        assert_eq!(tape.scalar(weighted), 2.5);
    }

    fn teacher_and_identical_student(seed: u64) -> (NetworkGraph<f32>, NetworkGraph<f32>) {
        let mut rng = rng_from_seed(seed);
        let teacher = build_resnet_tiny::<f32>(&[8, 12], &[1, 1], 4, &mut rng).unwrap();
        let plan = plan_prune(&teacher, 0.0, PruneStrategy::L1, SparsityMode::Uniform).unwrap();
        let student = apply_prune(&teacher, &plan).unwrap();
        (teacher, student)
    }

    #[test]
    fn identical_networks_have_zero_dfbf_loss() {
        let (teacher, student) = teacher_and_identical_student(3);
        let mut rng = rng_from_seed(4);
        let batch = Tensor::rand_uniform(vec![2, 3, 16, 16], 0.0, 1.0, &mut rng);
        let cfg = DistillConfig { gamma: 1.5, ..DistillConfig::default() };
        let (l_out, l_inter, l_total) = dfbf_loss(&student, &teacher, &batch, &cfg).unwrap();
        assert!(l_out.abs() < 1e-6);
        assert!(l_inter.abs() < 1e-6);
        assert!(l_total.abs() < 1e-6);
    }

    #[test]
    fn gamma_zero_collapses_to_unweighted_sum() {
        let mut rng = rng_from_seed(5);
        let teacher = build_resnet_tiny::<f32>(&[8], &[1], 2, &mut rng).unwrap();
        let mut rng2 = rng_from_seed(6);
        let student = build_resnet_tiny::<f32>(&[8], &[1], 2, &mut rng2).unwrap();
        let batch = Tensor::rand_uniform(vec![2, 3, 16, 16], 0.0, 1.0, &mut rng);
        let cfg = DistillConfig { gamma: 0.0, ..DistillConfig::default() };
        let (l_out, l_inter, l_total) = dfbf_loss(&student, &teacher, &batch, &cfg).unwrap();
        assert!((l_total - (l_out + l_inter)).abs() < 1e-4, "{l_total} vs {} ", l_out + l_inter);
    }

    #[test]
    fn dfbf_gradient_matches_finite_differences() {
        // f64 graphs; perturb a sample of backbone weight elements
        let mut rng = rng_from_seed(7);
        let teacher = build_resnet_tiny::<f64>(&[6], &[1], 2, &mut rng).unwrap();
        let mut rng2 = rng_from_seed(8);
        let mut student = build_resnet_tiny::<f64>(&[6], &[1], 2, &mut rng2).unwrap();
        let batch = Tensor::rand_uniform(vec![2, 3, 12, 12], 0.0, 1.0, &mut rng);
        let cfg = DistillConfig { gamma: 2.0, ..DistillConfig::default() };

        let teacher_exec = teacher.forward(&batch, &ExecOptions::distill_teacher()).unwrap();
        let mut student_exec = student.forward(&batch, &ExecOptions::distill_student()).unwrap();
        let tap_indices = select_tap_indices(teacher_exec.taps.len(), cfg.taps);
        let schedule = mu_schedule(tap_indices.len(), cfg.gamma).unwrap();
        let vars = build_dfbf_loss(&mut student_exec, &teacher_exec, &tap_indices, &schedule).unwrap();
        student_exec.tape.backward(vars.total).unwrap();
        let grads = student_exec.param_grads();

        let key = "s0b0_conv_a.weight".to_string();
        let analytic = grads[&key].clone();
        let h = 1e-5;
        for idx in [0usize, 7, 33, 101] {
            let orig = student.params()["s0b0_conv_a.weight"].data()[idx];
            student.param_mut("s0b0_conv_a", "weight").unwrap().data_mut()[idx] = orig + h;
            let (_, _, up) = dfbf_loss(&student, &teacher, &batch, &cfg).unwrap();
            student.param_mut("s0b0_conv_a", "weight").unwrap().data_mut()[idx] = orig - h;
            let (_, _, down) = dfbf_loss(&student, &teacher, &batch, &cfg).unwrap();
            student.param_mut("s0b0_conv_a", "weight").unwrap().data_mut()[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (analytic[idx] - fd).abs() / analytic[idx].abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "idx {idx}: analytic {} vs fd {fd}", analytic[idx]);
        }
    }

    #[test]
    fn zero_epochs_leaves_weights_bitwise_unchanged() {
        let (teacher, student) = teacher_and_identical_student(9);
        let before = crate::hash::tensor_map_hash(student.params());
        let images: Vec<Tensor<f32>> = (0..4)
            .map(|i| Tensor::rand_uniform(vec![3, 16, 16], 0.0, 1.0, &mut rng_from_seed(10 + i)))
            .collect();
        let cfg = DistillConfig { epochs: 0, ..DistillConfig::default() };
        let (tuned, history) = finetune(student, &teacher, &images, &cfg).unwrap();
        assert!(history.is_empty());
        assert_eq!(before, crate::hash::tensor_map_hash(tuned.params()));
    }

    #[test]
    fn identity_pruned_model_stays_put_without_weight_decay() {
        let (teacher, student) = teacher_and_identical_student(11);
        let before = crate::hash::tensor_map_hash(student.params());
        let images: Vec<Tensor<f32>> = (0..8)
            .map(|i| Tensor::rand_uniform(vec![3, 16, 16], 0.0, 1.0, &mut rng_from_seed(20 + i)))
            .collect();
        let cfg = DistillConfig { epochs: 1, batch_size: 4, weight_decay: 0.0, ..DistillConfig::default() };
        let (tuned, history) = finetune(student, &teacher, &images, &cfg).unwrap();
        // identical nets: loss exactly zero, gradients exactly zero
        for rec in &history {
            assert!(rec.l_total.abs() < 1e-6);
        }
        assert_eq!(before, crate::hash::tensor_map_hash(tuned.params()));
    }

    #[test]
    fn head_is_bitwise_frozen_through_finetune() {
        let mut rng = rng_from_seed(12);
        let teacher = build_resnet_tiny::<f32>(&[8, 12], &[1, 1], 4, &mut rng).unwrap();
        let plan = plan_prune(&teacher, 0.25, PruneStrategy::L1, SparsityMode::Uniform).unwrap();
        let student = apply_prune(&teacher, &plan).unwrap();
        let head_before = crate::hash::per_tensor_hashes(&student.head_params());
        let teacher_before = crate::hash::tensor_map_hash(teacher.params());
        let images: Vec<Tensor<f32>> = (0..8)
            .map(|i| Tensor::rand_uniform(vec![3, 16, 16], 0.0, 1.0, &mut rng_from_seed(30 + i)))
            .collect();
        let cfg = DistillConfig { epochs: 2, batch_size: 4, ..DistillConfig::default() };
        let (tuned, history) = finetune(student, &teacher, &images, &cfg).unwrap();
        assert_eq!(head_before, crate::hash::per_tensor_hashes(&tuned.head_params()));
        assert_eq!(teacher_before, crate::hash::tensor_map_hash(teacher.params()));
        // steps strictly increasing
        for w in history.windows(2) {
            assert!(w[0].step < w[1].step);
        }
        // backbone weights actually moved
        assert_ne!(
            crate::hash::tensor_map_hash(apply_prune(&teacher, &plan).unwrap().params()),
            crate::hash::tensor_map_hash(tuned.params())
        );
    }

    #[test]
    fn tap_misalignment_fails_before_any_step() {
        let mut rng = rng_from_seed(13);
        let teacher = build_resnet_tiny::<f32>(&[8, 12], &[1, 1], 4, &mut rng).unwrap();
        let mut rng2 = rng_from_seed(14);
        let other = build_resnet_tiny::<f32>(&[8], &[1], 4, &mut rng2).unwrap();
        let images = vec![Tensor::rand_uniform(vec![3, 16, 16], 0.0, 1.0, &mut rng)];
        let err = finetune(other, &teacher, &images, &DistillConfig::default()).unwrap_err();
        assert!(err.to_string().contains("tap misalignment"), "{err}");
    }

    #[test]
    fn assemble_matches_full_forward_and_argmax_is_scale_invariant() {
        let (teacher, student) = teacher_and_identical_student(15);
        let mut rng = rng_from_seed(16);
        let x = Tensor::rand_uniform(vec![2, 3, 16, 16], 0.0, 1.0, &mut rng);
        let y = assemble_and_predict(&student, &x).unwrap();
        let y_teacher = teacher.predict(&x).unwrap();
        for (a, b) in y.data().iter().zip(y_teacher.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        let argmax = |row: &[f32]| {
            row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0
        };
        let scaled: Vec<f32> = y.data().iter().map(|v| v * 3.25).collect();
        for b in 0..2 {
            assert_eq!(argmax(&y.data()[b * 4..(b + 1) * 4]), argmax(&scaled[b * 4..(b + 1) * 4]));
        }
    }
}
