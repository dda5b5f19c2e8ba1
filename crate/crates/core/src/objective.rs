//! Per-pipeline training losses: cross-entropy on ground truth, logit
//! matching toward another pipeline, or nothing.

use crate::error::{Error, Result};
use crate::label::{ModelConfig, PipelineTarget, NUM_PIPELINES};
use crate::network::Network;
use crate::nn::ops;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub per_pipeline: [f64; NUM_PIPELINES],
    pub kinds: [PipelineTarget; NUM_PIPELINES],
}

/// Which terms of the objective participate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermMask {
    pub hard: bool,
    pub matching: bool,
}

impl Default for TermMask {
    fn default() -> Self {
        TermMask {
            hard: true,
            matching: true,
        }
    }
}

/// Mean squared error over classes and batch: sum((a - b)^2) / (N * K).
pub fn logit_mse<T: Real>(student: &Tensor<T>, teacher: &Tensor<T>) -> Result<f64> {
    let (n, k) = student.dims2("logit_mse")?;
    if teacher.shape() != student.shape() {
        return Err(Error::dim("logit_mse", "logits", format!("{:?} vs {:?}", student.shape(), teacher.shape())));
    }
    let sum: f64 = student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(a, b)| {
            let d = a.to_f64() - b.to_f64();
            d * d
        })
        .sum();
    Ok(sum / (n * k) as f64)
}

/// Gradient of [`logit_mse`] with respect to the student only.
fn logit_mse_backward<T: Real>(student: &Tensor<T>, teacher: &Tensor<T>) -> Tensor<T> {
    let scale = 2.0 / student.len() as f64;
    let data = student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(a, b)| T::from_f64(scale * (a.to_f64() - b.to_f64())))
        .collect();
    Tensor::new(student.shape().to_vec(), data).expect("same shape")
}

/// Loss and per-exit logit gradients. The teacher side of a matching term
/// is treated as a constant.
pub fn matching_loss<T: Real>(
    config: &ModelConfig,
    logits: &[Tensor<T>],
    labels: &[usize],
) -> Result<(LossReport, Vec<Option<Tensor<T>>>)> {
    matching_loss_masked(config, logits, labels, TermMask::default())
}

pub fn matching_loss_masked<T: Real>(
    config: &ModelConfig,
    logits: &[Tensor<T>],
    labels: &[usize],
    mask: TermMask,
) -> Result<(LossReport, Vec<Option<Tensor<T>>>)> {
    config.validate_targets()?;
    if logits.len() != NUM_PIPELINES {
        return Err(Error::dim("matching_loss", "exits", format!("expected 3 logit tensors, got {}", logits.len())));
    }
    let (n, _) = logits[0].dims2("matching_loss")?;
    for l in logits {
        if l.shape() != logits[0].shape() {
            return Err(Error::dim("matching_loss", "logits", format!("{:?} vs {:?}", l.shape(), logits[0].shape())));
        }
    }
    if labels.len() != n {
        return Err(Error::dim("matching_loss", "labels", format!("{} labels for batch of {n}", labels.len())));
    }
    let mut per_pipeline = [0.0; NUM_PIPELINES];
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; NUM_PIPELINES];
    for (i, target) in config.targets.iter().enumerate() {
        match *target {
            PipelineTarget::Hard if mask.hard => {
                let (loss, probs) = ops::softmax_cross_entropy(&logits[i], labels)?;
                per_pipeline[i] = loss;
                grads[i] = Some(ops::softmax_cross_entropy_backward(&probs, labels)?);
            }
            PipelineTarget::Match(j) if mask.matching => {
                per_pipeline[i] = logit_mse(&logits[i], &logits[j - 1])?;
                grads[i] = Some(logit_mse_backward(&logits[i], &logits[j - 1]));
            }
            _ => {}
        }
    }
    let report = LossReport {
        total: per_pipeline.iter().sum(),
        per_pipeline,
        kinds: config.targets,
    };
    Ok((report, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradFlow {
    /// Gradient norm of this exit's head parameters under the full objective.
    pub head_grad_norm: f64,
    /// For a matching pipeline: gradient norm reaching the teacher's head
    /// from this pipeline's matching term alone, with hard terms disabled.
    pub teacher_grad_norm: Option<f64>,
}

fn head_norm<T: Real>(net: &Network<T>, exit: usize) -> f64 {
    net.head_params(exit).iter().map(|p| p.grad.sum_squares()).sum::<f64>().sqrt()
}

fn backward_once<T: Real>(
    net: &Network<T>,
    config: &ModelConfig,
    batch: &Tensor<T>,
    labels: &[usize],
    select: impl Fn(&mut Vec<Option<Tensor<T>>>),
    mask: TermMask,
) -> Result<Network<T>> {
    let mut net = net.clone();
    net.zero_grad();
    let (logits, tape) = net.forward_train(&[batch])?;
    let (_, mut grads) = matching_loss_masked(config, &logits, labels, mask)?;
    select(&mut grads);
    net.backward(tape, &grads)?;
    Ok(net)
}

/// Runs forward and backward on a copy of `net` and reports head gradient
/// norms per pipeline.
pub fn grad_flow_audit<T: Real>(
    net: &Network<T>,
    config: &ModelConfig,
    batch: &Tensor<T>,
    labels: &[usize],
) -> Result<[GradFlow; NUM_PIPELINES]> {
    let full = backward_once(net, config, batch, labels, |_| {}, TermMask::default())?;
    let mut out = [GradFlow {
        head_grad_norm: 0.0,
        teacher_grad_norm: None,
    }; NUM_PIPELINES];
    for (i, flow) in out.iter_mut().enumerate() {
        flow.head_grad_norm = head_norm(&full, i + 1);
        if let PipelineTarget::Match(j) = config.targets[i] {
            let only_i = |g: &mut Vec<Option<Tensor<T>>>| {
                for (k, slot) in g.iter_mut().enumerate() {
                    if k != i {
                        *slot = None;
                    }
                }
            };
            let mask = TermMask {
                hard: false,
                matching: true,
            };
            let audited = backward_once(net, config, batch, labels, only_i, mask)?;
            flow.teacher_grad_norm = Some(head_norm(&audited, j));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::parse_model_label;
    use crate::network::build_graph;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(label: &str) -> ModelConfig {
        parse_model_label(label).unwrap()
    }

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn uniform_logits_give_three_log_k() {
        let l = Tensor::<f64>::zeros(&[4, 100]);
        let logits = vec![l.clone(), l.clone(), l];
        let (r, _) = matching_loss(&cfg("PN3-ddd"), &logits, &[0, 5, 17, 99]).unwrap();
        for term in r.per_pipeline {
            assert!((term - 100f64.ln()).abs() < 1e-12);
        }
        assert!((r.total - 13.8155).abs() < 1e-4);
    }

    #[test]
    fn identical_student_and_teacher_cost_nothing() {
        let a = t(&[2, 3], &[0.3, -1.0, 2.0, 0.5, 0.1, -0.7]);
        let logits = vec![a.clone(), a.clone(), a];
        let (r, grads) = matching_loss(&cfg("PN3-x3d"), &logits, &[0, 1]).unwrap();
        assert_eq!(r.per_pipeline[0], 0.0);
        assert_eq!(r.per_pipeline[1], 0.0);
        assert!(grads[0].is_none());
        assert!(grads[1].as_ref().unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn hand_mse_example() {
        let logits = vec![t(&[1, 2], &[9.0, 9.0]), t(&[1, 2], &[0.0, 0.0]), t(&[1, 2], &[2.0, -2.0])];
        let (r, grads) = matching_loss(&cfg("PN3-x3d"), &logits, &[0]).unwrap();
        assert_eq!(r.per_pipeline[1], 4.0);
        assert_eq!(r.per_pipeline[0], 0.0);
        assert_eq!(r.kinds, [PipelineTarget::Untrained, PipelineTarget::Match(3), PipelineTarget::Hard]);
        // d/da of ((a0-2)^2 + (a1+2)^2)/2 at a = 0
        assert_eq!(grads[1].as_ref().unwrap().data(), &[-2.0, 2.0]);
        // teacher gradient comes only from its own cross-entropy term
        let (ce, probs) = ops::softmax_cross_entropy(&logits[2], &[0]).unwrap();
        assert_eq!(r.per_pipeline[2], ce);
        assert_eq!(grads[2].as_ref().unwrap(), &ops::softmax_cross_entropy_backward(&probs, &[0]).unwrap());
    }

    #[test]
    fn rejects_bad_labels_and_shapes() {
        let l = Tensor::<f64>::zeros(&[2, 3]);
        let logits = vec![l.clone(), l.clone(), l.clone()];
        assert!(matches!(matching_loss(&cfg("PN3-ddd"), &logits, &[0, 3]), Err(Error::Label { .. })));
        assert!(matching_loss(&cfg("PN3-ddd"), &logits, &[0]).is_err());
        let bad = vec![l.clone(), l, Tensor::zeros(&[2, 4])];
        assert!(matching_loss(&cfg("PN3-ddd"), &bad, &[0, 1]).is_err());
        let mut c = cfg("PN3-ddd");
        c.targets = [PipelineTarget::Match(2), PipelineTarget::Untrained, PipelineTarget::Hard];
        assert!(matching_loss(&c, &vec![Tensor::<f64>::zeros(&[2, 3]); 3], &[0, 1]).is_err());
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (sa, tb) = (t(&[3, 4], &a), t(&[3, 4], &b));
        let g = logit_mse_backward(&sa, &tb);
        for i in 0..12 {
            let mut p = a.clone();
            p[i] += 1e-6;
            let mut m = a.clone();
            m[i] -= 1e-6;
            let num = (logit_mse(&t(&[3, 4], &p), &tb).unwrap() - logit_mse(&t(&[3, 4], &m), &tb).unwrap()) / 2e-6;
            assert!((num - g.data()[i]).abs() < 1e-8);
        }
    }

    fn small_net(label: &str) -> (ModelConfig, Network<f64>, Tensor<f64>, Vec<usize>) {
        let c = cfg(label).with_growth(4).with_layers_per_block(1).with_classes(5).with_input_size(16);
        let net = build_graph(&c, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Vec<f64> = (0..4 * 3 * 16 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        (c, net, t(&[4, 3, 16, 16], &x), vec![0, 1, 2, 3])
    }

    #[test]
    fn audit_untrained_and_stop_gradient() {
        let (c, net, x, y) = small_net("PN3-x3d");
        let flow = grad_flow_audit(&net, &c, &x, &y).unwrap();
        assert_eq!(flow[0].head_grad_norm, 0.0);
        assert!(flow[1].head_grad_norm > 0.0);
        assert!(flow[2].head_grad_norm > 0.0);
        assert_eq!(flow[1].teacher_grad_norm, Some(0.0));
        assert_eq!(flow[0].teacher_grad_norm, None);
    }

    #[test]
    fn audit_all_hard_heads_receive_gradient() {
        let (c, net, x, y) = small_net("PN3-ddd");
        let flow = grad_flow_audit(&net, &c, &x, &y).unwrap();
        assert!(flow.iter().all(|f| f.head_grad_norm > 0.0));
    }

    proptest! {
        #[test]
        fn total_is_sum_of_independent_terms(v in proptest::collection::vec(-5.0f64..5.0, 18), y in proptest::collection::vec(0usize..3, 2)) {
            let logits: Vec<Tensor<f64>> = v.chunks(6).map(|c| t(&[2, 3], c)).collect();
            for label in ["PN3-ddd", "PN3-33d", "PN3-x3d", "PN3cut-2dd"] {
                let c = cfg(label);
                let (r, _) = matching_loss(&c, &logits, &y).unwrap();
                let mut sum = 0.0;
                for i in 0..3 {
                    sum += match c.targets[i] {
                        PipelineTarget::Hard => ops::softmax_cross_entropy(&logits[i], &y).unwrap().0,
                        PipelineTarget::Match(j) => logit_mse(&logits[i], &logits[j - 1]).unwrap(),
                        PipelineTarget::Untrained => 0.0,
                    };
                }
                prop_assert!((r.total - sum).abs() < 1e-12);
            }
        }

        #[test]
        fn mse_nonnegative_zero_iff_equal(a in proptest::collection::vec(-5.0f64..5.0, 6), b in proptest::collection::vec(-5.0f64..5.0, 6)) {
            let m = logit_mse(&t(&[2, 3], &a), &t(&[2, 3], &b)).unwrap();
            prop_assert!(m >= 0.0);
            prop_assert_eq!(m == 0.0, a == b);
        }
    }
}
