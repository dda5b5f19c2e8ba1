//! FLOP accounting per exit and confidence-thresholded early exit.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::label::NUM_PIPELINES;
use crate::network::{Network, Node, NodeId, NodeOp};
use crate::nn::ops;
use crate::tensor::{Real, Tensor};
use crate::train::for_each_exit_logits;

/// Threshold above any softmax probability.
pub const UNREACHABLE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopTable {
    /// Per node, indexed by node id.
    pub per_node: Vec<u64>,
    /// Cost of each exit's ancestor subgraph, shared nodes counted once.
    pub cumulative: Vec<u64>,
    /// Cost of evaluating exits 1..=i in order, shared nodes counted once.
    pub charged: Vec<u64>,
}

/// FLOPs of one node for a single sample. A multiply-accumulate counts 2.
/// With `elementwise`, batch norm adds 2 per element, ReLU 1 and pooling 1
/// per output.
pub fn node_flops<T: Real>(node: &Node<T>, elementwise: bool) -> u64 {
    let input = node.input_shape;
    let out = node.output_shape;
    let conv = |cin: usize, cout: usize, k: (usize, usize), h: usize, w: usize| -> u64 {
        2 * (h * w * cout * cin * k.0 * k.1) as u64
    };
    let ew = |n: usize| if elementwise { n as u64 } else { 0 };
    match &node.op {
        NodeOp::Input => 0,
        NodeOp::Conv(c) => conv(c.in_channels(), c.out_channels(), c.kernel(), out.height, out.width),
        NodeOp::Pool => ew(out.numel()),
        NodeOp::Block(b) => {
            let plane = input.height * input.width;
            b.layers
                .iter()
                .map(|l| {
                    let cin = l.spec.in_channels;
                    let mid = l.conv1.out_channels();
                    conv(cin, mid, l.conv1.kernel(), input.height, input.width)
                        + conv(mid, l.conv2.out_channels(), l.conv2.kernel(), input.height, input.width)
                        + ew(3 * cin * plane + 3 * mid * plane)
                })
                .sum()
        }
        NodeOp::Transition(t) => {
            let c = t.spec.channels;
            conv(c, c, t.conv.kernel(), input.height, input.width) + ew(3 * input.numel() + out.numel())
        }
        NodeOp::Head(h) => {
            let (f, k) = (h.fc.in_features(), h.fc.out_features());
            (2 * f * k) as u64 + ew(input.numel() + 2 * f)
        }
    }
}

fn masked_sum(per_node: &[u64], mask: &[bool]) -> u64 {
    per_node.iter().zip(mask).filter(|(_, &m)| m).map(|(f, _)| f).sum()
}

pub fn count_flops<T: Real>(net: &Network<T>, elementwise: bool) -> FlopTable {
    let per_node: Vec<u64> = net.nodes().iter().map(|n| node_flops(n, elementwise)).collect();
    let masks: Vec<Vec<bool>> = net.exits().iter().map(|&e| net.ancestors(e)).collect();
    let cumulative = masks.iter().map(|m| masked_sum(&per_node, m)).collect();
    let mut union = vec![false; per_node.len()];
    let charged = masks
        .iter()
        .map(|m| {
            for (u, &x) in union.iter_mut().zip(m) {
                *u |= x;
            }
            masked_sum(&per_node, &union)
        })
        .collect();
    FlopTable {
        per_node,
        cumulative,
        charged,
    }
}

/// Confidence thresholds for exits 1 and 2; exit 3 always answers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExitPolicy {
    pub tau1: f64,
    pub tau2: f64,
}

impl ExitPolicy {
    pub fn new(tau1: f64, tau2: f64) -> Self {
        ExitPolicy { tau1, tau2 }
    }

    pub fn always_last() -> Self {
        ExitPolicy::new(UNREACHABLE, UNREACHABLE)
    }

    fn threshold(&self, exit: usize) -> f64 {
        match exit {
            1 => self.tau1,
            2 => self.tau2,
            _ => f64::NEG_INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExitDecision {
    pub label: usize,
    /// 1-based exit index.
    pub exit: usize,
    pub confidence: f64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitReport {
    pub decisions: Vec<ExitDecision>,
    pub accuracy: f64,
    pub mean_flops: f64,
    pub histogram: [usize; NUM_PIPELINES],
}

/// (arg-max, max softmax probability) of a single logit row.
fn confidence<T: Real>(row: &[T]) -> (usize, f64) {
    let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v.to_f64() - max).exp()).sum();
    (ops::argmax(row), 1.0 / z)
}

/// Classifies one sample, evaluating later exits only while confidence
/// stays below the threshold. Nodes shared with earlier exits are reused
/// and charged once.
pub fn early_exit_predict<T: Real>(net: &Network<T>, table: &FlopTable, x: &Tensor<T>, policy: ExitPolicy) -> Result<ExitDecision> {
    let (n, ..) = x.dims4("early_exit_predict")?;
    if n != 1 {
        return Err(Error::dim("early_exit_predict", "batch", format!("expected one sample, got {n}")));
    }
    let mut acts = net.activations(&[x])?;
    let mut flops = 0;
    let exits: Vec<NodeId> = net.exits().to_vec();
    for (i, &id) in exits.iter().enumerate() {
        let exit = i + 1;
        flops += acts.ensure(id)?.iter().map(|&c| table.per_node[c]).sum::<u64>();
        let (label, conf) = confidence(acts.node(id)?.data());
        if exit == exits.len() || conf >= policy.threshold(exit) {
            return Ok(ExitDecision {
                label,
                exit,
                confidence: conf,
                flops,
            });
        }
    }
    Err(Error::Config("network has no exits".into()))
}

/// Per-sample prediction and confidence at every exit, computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitProfile {
    pub rows: Vec<[(usize, f64); NUM_PIPELINES]>,
    pub labels: Vec<usize>,
    pub charged: Vec<u64>,
}

pub fn exit_profile(net: &Network<f32>, data: &Dataset, table: &FlopTable) -> Result<ExitProfile> {
    if net.exits().len() != NUM_PIPELINES {
        return Err(Error::Config(format!("expected {NUM_PIPELINES} exits, network has {}", net.exits().len())));
    }
    let mut rows = vec![[(0, 0.0); NUM_PIPELINES]; data.len()];
    for_each_exit_logits(net, data, |start, logits| {
        for (e, l) in logits.iter().enumerate() {
            let (_, k) = l.dims2("exit_profile")?;
            for (r, row) in l.data().chunks(k).enumerate() {
                rows[start + r][e] = confidence(row);
            }
        }
        Ok(())
    })?;
    Ok(ExitProfile {
        rows,
        labels: data.labels().to_vec(),
        charged: table.charged.clone(),
    })
}

impl ExitProfile {
    pub fn apply(&self, policy: ExitPolicy) -> ExitReport {
        let decisions: Vec<ExitDecision> = self
            .rows
            .iter()
            .map(|row| {
                let i = (0..NUM_PIPELINES)
                    .find(|&i| i + 1 == NUM_PIPELINES || row[i].1 >= policy.threshold(i + 1))
                    .expect("last exit always answers");
                ExitDecision {
                    label: row[i].0,
                    exit: i + 1,
                    confidence: row[i].1,
                    flops: self.charged[i],
                }
            })
            .collect();
        let n = decisions.len().max(1) as f64;
        let correct = decisions.iter().zip(&self.labels).filter(|(d, &y)| d.label == y).count();
        let mut histogram = [0; NUM_PIPELINES];
        for d in &decisions {
            histogram[d.exit - 1] += 1;
        }
        ExitReport {
            accuracy: 100.0 * correct as f64 / n,
            mean_flops: decisions.iter().map(|d| d.flops as f64).sum::<f64>() / n,
            histogram,
            decisions,
        }
    }
}

/// Early exit over a whole dataset.
pub fn early_exit_dataset(net: &Network<f32>, data: &Dataset, table: &FlopTable, policy: ExitPolicy) -> Result<ExitReport> {
    Ok(exit_profile(net, data, table)?.apply(policy))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnytimePoint {
    pub exit: usize,
    pub flops: u64,
    pub accuracy: f64,
}

pub fn anytime_curve(net: &Network<f32>, data: &Dataset, table: &FlopTable) -> Result<Vec<AnytimePoint>> {
    let acc = crate::train::evaluate(net, data)?;
    Ok(acc
        .iter()
        .zip(&table.cumulative)
        .enumerate()
        .map(|(i, (&accuracy, &flops))| AnytimePoint {
            exit: i + 1,
            flops,
            accuracy,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub policy: ExitPolicy,
    pub accuracy: f64,
    pub mean_flops: f64,
    pub histogram: [usize; NUM_PIPELINES],
}

/// Evaluates every (tau1, tau2) pair; rows are stably sorted by mean FLOPs.
pub fn threshold_sweep(
    net: &Network<f32>,
    data: &Dataset,
    table: &FlopTable,
    grid: &[(f64, f64)],
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("threshold grid is empty".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidBatch {
            op: "threshold_sweep",
            detail: "dataset is empty".into(),
        });
    }
    let profile = exit_profile(net, data, table)?;
    let mut rows: Vec<SweepRow> = grid
        .iter()
        .map(|&(t1, t2)| {
            let policy = ExitPolicy::new(t1, t2);
            let r = profile.apply(policy);
            SweepRow {
                policy,
                accuracy: r.accuracy,
                mean_flops: r.mean_flops,
                histogram: r.histogram,
            }
        })
        .collect();
    rows.sort_by(|a, b| a.mean_flops.total_cmp(&b.mean_flops));
    Ok(rows)
}

pub const ANYTIME_HEADER: &str = "exit,flops,accuracy";
pub const SWEEP_HEADER: &str = "tau1,tau2,accuracy,mean_flops,n_exit1,n_exit2,n_exit3";

pub fn anytime_csv(points: &[AnytimePoint]) -> String {
    let mut s = format!("{ANYTIME_HEADER}\n");
    for p in points {
        s.push_str(&format!("{},{},{:.4}\n", p.exit, p.flops, p.accuracy));
    }
    s
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.4},{:.3},{},{},{}\n",
            r.policy.tau1, r.policy.tau2, r.accuracy, r.mean_flops, r.histogram[0], r.histogram[1], r.histogram[2]
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthConfig};
    use crate::label::parse_model_label;
    use crate::network::{build_graph, FeatureShape, GraphBuilder};
    use crate::nn::{Conv2d, Linear};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> Network<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = GraphBuilder::<f32>::new();
        let a = g.input("a", FeatureShape::new(24, 4, 4));
        let conv = g.add("conv", NodeOp::Conv(Conv2d::new("conv", 24, 12, 3, &mut rng)), &[a]).unwrap();
        let head = crate::network::ExitHead {
            norm: crate::nn::BatchNormState::new("head.norm", 120),
            fc: Linear::new("head.fc", 120, 100, &mut rng),
        };
        let b = g.input("b", FeatureShape::new(120, 1, 1));
        let fc = g.add("fc", NodeOp::Head(head), &[b]).unwrap();
        g.finish(vec![conv, fc], None).unwrap()
    }

    #[test]
    fn toy_graph_counts() {
        let t = count_flops(&toy(), false);
        assert_eq!(t.cumulative, vec![82_944, 24_000]);
        assert_eq!(t.per_node.iter().sum::<u64>(), 82_944 + 24_000);
    }

    #[test]
    fn weightless_graph_costs_nothing() {
        let mut g = GraphBuilder::<f32>::new();
        let a = g.input("a", FeatureShape::new(3, 8, 8));
        let p = g.add("p", NodeOp::Pool, &[a]).unwrap();
        let net = g.finish(vec![p], None).unwrap();
        assert_eq!(count_flops(&net, false).cumulative, vec![0]);
        assert_eq!(count_flops(&net, true).cumulative, vec![3 * 16]);
    }

    fn defaults(label: &str) -> Network<f32> {
        build_graph(&parse_model_label(label).unwrap(), 0).unwrap()
    }

    #[test]
    fn cumulative_strictly_increases_at_defaults() {
        for label in ["PN3-ddd", "PN3cut-ddd"] {
            for ew in [false, true] {
                let t = count_flops(&defaults(label), ew);
                assert!(t.cumulative.windows(2).all(|w| w[0] < w[1]), "{label} {:?}", t.cumulative);
            }
        }
    }

    #[test]
    fn cumulative_equals_reachability_sum() {
        for label in ["PN3-ddd", "PN3cut-ddd"] {
            let net = defaults(label);
            let t = count_flops(&net, false);
            for (i, &exit) in net.exits().iter().enumerate() {
                // depth-first walk over producers, independent of the mask helper
                let mut seen = vec![false; net.nodes().len()];
                let mut stack = vec![exit];
                while let Some(n) = stack.pop() {
                    if !std::mem::replace(&mut seen[n], true) {
                        stack.extend(&net.node(n).inputs);
                    }
                }
                let expected: u64 = (0..seen.len()).filter(|&n| seen[n]).map(|n| node_flops(net.node(n), false)).sum();
                assert_eq!(t.cumulative[i], expected);
            }
        }
    }

    #[test]
    fn charging_reuses_cascade_and_pays_for_cut_pipelines() {
        let shared = |net: &Network<f32>, t: &FlopTable| -> u64 {
            ["stem", "pool1", "pool2", "pool3"].iter().map(|n| t.per_node[net.node_id(n).unwrap()]).sum()
        };
        let cut = defaults("PN3cut-ddd");
        let t = count_flops(&cut, false);
        let s = shared(&cut, &t);
        assert_eq!(t.charged[2], t.cumulative.iter().sum::<u64>() - 2 * s);
        let casc = defaults("PN3-ddd");
        let t = count_flops(&casc, false);
        let heads: u64 = ["head1", "head2"].iter().map(|n| t.per_node[casc.node_id(n).unwrap()]).sum();
        assert_eq!(t.charged[2], t.cumulative[2] + heads);
        assert!(t.charged[2] < t.cumulative.iter().sum::<u64>());
        assert_eq!(t.charged[0], t.cumulative[0]);
    }

    fn small() -> (Network<f32>, Dataset) {
        let model = parse_model_label("PN3-ddd")
            .unwrap()
            .with_growth(4)
            .with_layers_per_block(1)
            .with_classes(4)
            .with_input_size(16);
        let net = build_graph(&model, 1).unwrap();
        let data = synth_dataset(&SynthConfig {
            size: 16,
            ..SynthConfig::new(12, 4)
        })
        .unwrap();
        (net, data)
    }

    #[test]
    fn single_sample_path_matches_profile() {
        let (net, data) = small();
        let table = count_flops(&net, false);
        for policy in [ExitPolicy::new(0.0, 0.0), ExitPolicy::always_last(), ExitPolicy::new(0.3, 0.35)] {
            let report = early_exit_dataset(&net, &data, &table, policy).unwrap();
            for (i, d) in report.decisions.iter().enumerate() {
                let (x, _) = data.batch(&[i]);
                let single = early_exit_predict(&net, &table, &x, policy).unwrap();
                assert_eq!((single.exit, single.label, single.flops), (d.exit, d.label, d.flops));
                assert!((single.confidence - d.confidence).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn threshold_limits() {
        let (net, data) = small();
        let table = count_flops(&net, false);
        let acc = crate::train::evaluate(&net, &data).unwrap();
        let floor = early_exit_dataset(&net, &data, &table, ExitPolicy::new(0.0, 0.7)).unwrap();
        assert_eq!(floor.accuracy, acc[0]);
        assert_eq!(floor.mean_flops, table.cumulative[0] as f64);
        assert!(floor.decisions.iter().all(|d| d.flops == table.cumulative[0]));
        let ceil = early_exit_dataset(&net, &data, &table, ExitPolicy::always_last()).unwrap();
        assert_eq!(ceil.accuracy, acc[2]);
        assert_eq!(ceil.histogram, [0, 0, data.len()]);
    }

    #[test]
    fn crafted_confidence_contrast() {
        // Scaling the input moves exit-1 confidence; find a scale where it
        // sits between 0.4 and 0.6 and check both policies.
        let (net, data) = small();
        let table = count_flops(&net, false);
        let (x, _) = data.batch(&[0]);
        let conf_at = |s: f32| {
            let mut xs = x.clone();
            xs.data_mut().iter_mut().for_each(|v| *v *= s);
            let mut acts = net.activations(&[&xs]).unwrap();
            (confidence(acts.exit(1).unwrap().data()).1, xs)
        };
        let (mut lo, mut hi) = (0.0f32, 64.0f32);
        let (c_lo, c_hi) = (conf_at(lo).0, conf_at(hi).0);
        assert!((c_lo - 0.5).signum() != (c_hi - 0.5).signum(), "{c_lo} {c_hi}");
        let mut found = None;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let (c, xs) = conf_at(mid);
            if (0.45..0.55).contains(&c) {
                found = Some(xs);
                break;
            }
            if (c < 0.5) == (c_lo < 0.5) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let xs = found.expect("bisection reaches confidence near 0.5");
        assert_eq!(early_exit_predict(&net, &table, &xs, ExitPolicy::new(0.4, UNREACHABLE)).unwrap().exit, 1);
        assert!(early_exit_predict(&net, &table, &xs, ExitPolicy::new(0.6, UNREACHABLE)).unwrap().exit > 1);
    }

    #[test]
    fn anytime_and_sweep_outputs() {
        let (net, data) = small();
        let table = count_flops(&net, false);
        let curve = anytime_curve(&net, &data, &table).unwrap();
        assert!(curve.windows(2).all(|w| w[0].flops < w[1].flops));
        let csv = anytime_csv(&curve);
        assert!(csv.starts_with("exit,flops,accuracy\n1,"));
        assert_eq!(csv.lines().count(), 4);
        let grid = [(UNREACHABLE, UNREACHABLE), (0.0, 0.0), (0.5, 0.5)];
        let rows = threshold_sweep(&net, &data, &table, &grid).unwrap();
        assert!(rows.windows(2).all(|w| w[0].mean_flops <= w[1].mean_flops));
        assert_eq!(rows[0].mean_flops, table.cumulative[0] as f64);
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with("tau1,tau2,accuracy,mean_flops,n_exit1,n_exit2,n_exit3\n0,0,"));
        assert!(threshold_sweep(&net, &data, &table, &[]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn raising_tau1_never_adds_exit1_samples(a in 0.0f64..1.0, b in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let (lo, hi) = (a.min(b), a.max(b));
            let rows: Vec<[(usize, f64); 3]> = (0..20)
                .map(|i| {
                    let c = |k: usize| ((i * 7 + k * 13) % 20) as f64 / 20.0;
                    [(0, c(1)), (1, c(2)), (2, c(3))]
                })
                .collect();
            let profile = ExitProfile { labels: vec![0; 20], rows, charged: vec![1, 2, 3] };
            prop_assert!(profile.apply(ExitPolicy::new(hi, t2)).histogram[0] <= profile.apply(ExitPolicy::new(lo, t2)).histogram[0]);
        }
    }
}
