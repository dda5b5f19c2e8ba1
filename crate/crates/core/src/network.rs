//! Layer graph for ParaNet3 and its forward/backward execution.
//!
//! Nodes are stored in topological order: every node's inputs have smaller
//! ids. A node with several inputs sees their channel concatenation.

use std::collections::BTreeSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dense::{DenseBlock, DenseBlockCache, DenseBlockSpec, Transition, TransitionCache, TransitionSpec};
use crate::error::{Error, Result};
use crate::label::{ModelConfig, NUM_PIPELINES};
use crate::nn::ops::{self, BatchNormCache};
use crate::nn::{BatchNormState, Conv2d, Linear, Mode, Param};
use crate::tensor::{Real, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct FeatureShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        FeatureShape { channels, height, width }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}x{}", self.channels, self.height, self.width)
    }
}

/// Exit classifier: global average pool, batch norm, fully connected.
#[derive(Debug, Clone)]
pub struct ExitHead<T> {
    pub norm: BatchNormState<T>,
    pub fc: Linear<T>,
}

impl<T: Real> ExitHead<T> {
    pub fn new(name: &str, channels: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        ExitHead {
            norm: BatchNormState::new(&format!("{name}.norm"), channels),
            fc: Linear::new(&format!("{name}.fc"), channels, classes, rng),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.norm.params();
        v.extend(self.fc.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.norm.params_mut();
        v.extend(self.fc.params_mut());
        v
    }
}

#[derive(Debug, Clone)]
pub enum NodeOp<T> {
    Input,
    Conv(Conv2d<T>),
    Pool,
    Block(DenseBlock<T>),
    Transition(Transition<T>),
    Head(ExitHead<T>),
}

impl<T: Real> NodeOp<T> {
    fn kind(&self) -> &'static str {
        match self {
            NodeOp::Input => "input",
            NodeOp::Conv(_) => "conv",
            NodeOp::Pool => "pool",
            NodeOp::Block(_) => "block",
            NodeOp::Transition(_) => "transition",
            NodeOp::Head(_) => "head",
        }
    }

    /// Output shape for a given (concatenated) input shape.
    pub fn output_shape(&self, name: &str, input: FeatureShape) -> Result<FeatureShape> {
        let expect = |want: usize| -> Result<()> {
            if input.channels != want {
                return Err(Error::Config(format!(
                    "node {name}: expects {want} input channels, producers give {}",
                    input.channels
                )));
            }
            Ok(())
        };
        let halve = || -> Result<FeatureShape> {
            if input.height % 2 != 0 || input.width % 2 != 0 {
                return Err(Error::Config(format!("node {name}: cannot halve odd extent {input}")));
            }
            Ok(FeatureShape::new(input.channels, input.height / 2, input.width / 2))
        };
        match self {
            NodeOp::Input => Ok(input),
            NodeOp::Conv(c) => {
                expect(c.in_channels())?;
                let (kh, kw) = c.kernel();
                let out = |e: usize, k: usize| (e + 2 * c.pad - k) / c.stride + 1;
                Ok(FeatureShape::new(c.out_channels(), out(input.height, kh), out(input.width, kw)))
            }
            NodeOp::Pool => halve(),
            NodeOp::Block(b) => {
                expect(b.spec.in_channels)?;
                Ok(FeatureShape::new(b.spec.out_channels(), input.height, input.width))
            }
            NodeOp::Transition(t) => {
                expect(t.spec.channels)?;
                halve()
            }
            NodeOp::Head(h) => {
                expect(h.norm.channels())?;
                Ok(FeatureShape::new(h.fc.out_features(), 1, 1))
            }
        }
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            NodeOp::Input => Ok(x.clone()),
            NodeOp::Conv(c) => c.forward(x),
            NodeOp::Pool => ops::avg_pool2(x),
            NodeOp::Block(b) => b.forward_eval(x),
            NodeOp::Transition(t) => t.forward_eval(x),
            NodeOp::Head(h) => {
                let pooled = ops::global_avg_pool(x)?;
                h.fc.forward(&h.norm.forward_eval(&pooled)?)
            }
        }
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, NodeCache<T>)> {
        match self {
            NodeOp::Input => Ok((x.clone(), NodeCache::None)),
            NodeOp::Conv(c) => Ok((c.forward(x)?, NodeCache::Conv(x.clone()))),
            NodeOp::Pool => Ok((ops::avg_pool2(x)?, NodeCache::None)),
            NodeOp::Block(b) => {
                let (y, cache) = b.forward_train(x)?;
                Ok((y, NodeCache::Block(cache)))
            }
            NodeOp::Transition(t) => {
                let (y, cache) = t.forward_train(x)?;
                Ok((y, NodeCache::Transition(cache)))
            }
            NodeOp::Head(h) => {
                let (_, _, height, width) = x.dims4("exit_head")?;
                let pooled = ops::global_avg_pool(x)?;
                let (normed, bn) = h.norm.forward_train(&pooled)?;
                let y = h.fc.forward(&normed)?;
                Ok((y, NodeCache::Head { height, width, bn, normed }))
            }
        }
    }

    fn backward(&mut self, cache: &NodeCache<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        match (self, cache) {
            (NodeOp::Input, _) => Ok(grad.clone()),
            (NodeOp::Conv(c), NodeCache::Conv(x)) => c.backward(x, grad),
            (NodeOp::Pool, _) => ops::avg_pool2_backward(grad),
            (NodeOp::Block(b), NodeCache::Block(cache)) => b.backward(cache, grad),
            (NodeOp::Transition(t), NodeCache::Transition(cache)) => t.backward(cache, grad),
            (NodeOp::Head(h), NodeCache::Head { height, width, bn, normed }) => {
                let g = h.fc.backward(normed, grad)?;
                let g = h.norm.backward(bn, &g)?;
                ops::global_avg_pool_backward(&g, *height, *width)
            }
            (op, _) => unreachable!("cache does not belong to a {} node", op.kind()),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            NodeOp::Input | NodeOp::Pool => Vec::new(),
            NodeOp::Conv(c) => c.params(),
            NodeOp::Block(b) => b.params(),
            NodeOp::Transition(t) => t.params(),
            NodeOp::Head(h) => h.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            NodeOp::Input | NodeOp::Pool => Vec::new(),
            NodeOp::Conv(c) => c.params_mut(),
            NodeOp::Block(b) => b.params_mut(),
            NodeOp::Transition(t) => t.params_mut(),
            NodeOp::Head(h) => h.params_mut(),
        }
    }

    pub fn batch_norms(&self) -> Vec<&BatchNormState<T>> {
        match self {
            NodeOp::Input | NodeOp::Pool | NodeOp::Conv(_) => Vec::new(),
            NodeOp::Block(b) => b.batch_norms(),
            NodeOp::Transition(t) => vec![&t.norm],
            NodeOp::Head(h) => vec![&h.norm],
        }
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormState<T>> {
        match self {
            NodeOp::Input | NodeOp::Pool | NodeOp::Conv(_) => Vec::new(),
            NodeOp::Block(b) => b.batch_norms_mut(),
            NodeOp::Transition(t) => vec![&mut t.norm],
            NodeOp::Head(h) => vec![&mut h.norm],
        }
    }
}

#[derive(Debug)]
enum NodeCache<T> {
    None,
    Conv(Tensor<T>),
    Block(DenseBlockCache<T>),
    Transition(TransitionCache<T>),
    Head {
        height: usize,
        width: usize,
        bn: BatchNormCache<T>,
        normed: Tensor<T>,
    },
}

#[derive(Debug, Clone)]
pub struct Node<T> {
    pub name: String,
    pub op: NodeOp<T>,
    pub inputs: Vec<NodeId>,
    /// Shape fed to the op (channel concatenation of all inputs).
    pub input_shape: FeatureShape,
    pub output_shape: FeatureShape,
}

/// Incrementally assembles a [`Network`], inferring and checking shapes.
#[derive(Debug)]
pub struct GraphBuilder<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for GraphBuilder<T> {
    fn default() -> Self {
        GraphBuilder { nodes: Vec::new() }
    }
}

impl<T: Real> GraphBuilder<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, name: &str, shape: FeatureShape) -> NodeId {
        self.nodes.push(Node {
            name: name.to_string(),
            op: NodeOp::Input,
            inputs: Vec::new(),
            input_shape: shape,
            output_shape: shape,
        });
        self.nodes.len() - 1
    }

    pub fn shape(&self, id: NodeId) -> FeatureShape {
        self.nodes[id].output_shape
    }

    /// Adds a node; concatenated inputs must agree in spatial extent.
    pub fn add(&mut self, name: &str, op: NodeOp<T>, inputs: &[NodeId]) -> Result<NodeId> {
        if matches!(op, NodeOp::Input) || inputs.is_empty() {
            return Err(Error::Config(format!("node {name}: non-input nodes need at least one producer")));
        }
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(Error::Config(format!("duplicate node name {name}")));
        }
        let first = *inputs.iter().find(|&&i| i >= self.nodes.len()).unwrap_or(&inputs[0]);
        if first >= self.nodes.len() {
            return Err(Error::Config(format!("node {name}: unknown producer {first}")));
        }
        let base = self.nodes[inputs[0]].output_shape;
        let mut channels = 0;
        for &i in inputs {
            let s = self.nodes[i].output_shape;
            if (s.height, s.width) != (base.height, base.width) {
                return Err(Error::Config(format!(
                    "node {name}: producer {} is {s} but {} is {base}; concatenation needs equal resolution",
                    self.nodes[i].name, self.nodes[inputs[0]].name
                )));
            }
            channels += s.channels;
        }
        let input_shape = FeatureShape::new(channels, base.height, base.width);
        let output_shape = op.output_shape(name, input_shape)?;
        self.nodes.push(Node {
            name: name.to_string(),
            op,
            inputs: inputs.to_vec(),
            input_shape,
            output_shape,
        });
        Ok(self.nodes.len() - 1)
    }

    pub fn finish(self, exits: Vec<NodeId>, config: Option<ModelConfig>) -> Result<Network<T>> {
        for &e in &exits {
            if e >= self.nodes.len() {
                return Err(Error::Config(format!("exit {e} is not a node")));
            }
        }
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            for p in n.op.params() {
                if !seen.insert(p.name.clone()) {
                    return Err(Error::Config(format!("duplicate parameter name {}", p.name)));
                }
            }
        }
        Ok(Network {
            config,
            nodes: self.nodes,
            exits,
        })
    }
}

/// Cached state of a training-mode forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    caches: Vec<NodeCache<T>>,
    batch: usize,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    config: Option<ModelConfig>,
    nodes: Vec<Node<T>>,
    exits: Vec<NodeId>,
}

/// Reachable parameters of one exit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExitCensus {
    pub exit: usize,
    pub names: BTreeSet<String>,
    pub tensors: usize,
    pub scalars: usize,
}

impl<T: Real> Network<T> {
    pub fn config(&self) -> Option<&ModelConfig> {
        self.config.as_ref()
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id]
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn exits(&self) -> &[NodeId] {
        &self.exits
    }

    pub fn input_ids(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, NodeOp::Input))
            .map(|(i, _)| i)
            .collect()
    }

    /// Producer-consumer pairs where the consumer concatenates more than one input.
    pub fn concat_edges(&self) -> Vec<(NodeId, NodeId)> {
        let mut edges = Vec::new();
        for (id, n) in self.nodes.iter().enumerate() {
            if n.inputs.len() > 1 {
                edges.extend(n.inputs.iter().map(|&p| (p, id)));
            }
        }
        edges
    }

    /// Membership mask of `node` and all nodes it transitively reads from.
    pub fn ancestors(&self, node: NodeId) -> Vec<bool> {
        let mut mask = vec![false; self.nodes.len()];
        mask[node] = true;
        for id in (0..=node).rev() {
            if mask[id] {
                for &p in &self.nodes[id].inputs {
                    mask[p] = true;
                }
            }
        }
        mask
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.nodes.iter().flat_map(|n| n.op.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.nodes.iter_mut().flat_map(|n| n.op.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Parameters of the head node of exit `exit` (1-based).
    pub fn head_params(&self, exit: usize) -> Vec<&Param<T>> {
        self.nodes[self.exits[exit - 1]].op.params()
    }

    /// Parameters followed by batch-norm running statistics, in node order.
    pub fn state_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self.params().into_iter().map(|p| (p.name.clone(), &p.value)).collect();
        for n in &self.nodes {
            for bn in n.op.batch_norms() {
                out.extend(bn.buffers());
            }
        }
        out
    }

    /// Visits every state tensor mutably, in [`Network::state_tensors`] order.
    pub fn visit_state_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>) -> Result<()>) -> Result<()> {
        for p in self.params_mut() {
            f(&p.name, &mut p.value)?;
        }
        for n in &mut self.nodes {
            for bn in n.op.batch_norms_mut() {
                for (name, t) in bn.buffers_mut() {
                    f(&name, t)?;
                }
            }
        }
        Ok(())
    }

    /// Reverse reachability from each exit head to the parameters it reads.
    pub fn parameter_census(&self) -> Vec<ExitCensus> {
        self.exits
            .iter()
            .enumerate()
            .map(|(i, &exit)| {
                let mask = self.ancestors(exit);
                let mut names = BTreeSet::new();
                let mut tensors = 0;
                let mut scalars = 0;
                for (id, n) in self.nodes.iter().enumerate() {
                    if mask[id] {
                        for p in n.op.params() {
                            names.insert(p.name.clone());
                            tensors += 1;
                            scalars += p.value.len();
                        }
                    }
                }
                ExitCensus {
                    exit: i + 1,
                    names,
                    tensors,
                    scalars,
                }
            })
            .collect()
    }

    fn check_inputs(&self, inputs: &[&Tensor<T>]) -> Result<usize> {
        let ids = self.input_ids();
        if ids.len() != inputs.len() {
            return Err(Error::dim("forward", "inputs", format!("network has {} inputs, got {}", ids.len(), inputs.len())));
        }
        let mut batch = None;
        for (&id, x) in ids.iter().zip(inputs) {
            let (n, c, h, w) = x.dims4("forward")?;
            let s = self.nodes[id].output_shape;
            if (c, h, w) != (s.channels, s.height, s.width) {
                return Err(Error::dim(
                    "forward",
                    "input",
                    format!("input {} expects [N, {}, {}, {}], got {:?}", self.nodes[id].name, s.channels, s.height, s.width, x.shape()),
                ));
            }
            if *batch.get_or_insert(n) != n {
                return Err(Error::dim("forward", "batch", "inputs disagree on batch size"));
            }
        }
        Ok(batch.unwrap_or(0))
    }

    fn gather(values: &[Option<Tensor<T>>], inputs: &[NodeId]) -> Result<Tensor<T>> {
        if let [single] = inputs {
            return Ok(values[*single].clone().expect("producer evaluated"));
        }
        let parts: Vec<&Tensor<T>> = inputs.iter().map(|&i| values[i].as_ref().expect("producer evaluated")).collect();
        ops::concat_channels(&parts)
    }

    /// Lazy evaluation-mode executor sharing already computed nodes.
    pub fn activations<'a>(&'a self, inputs: &[&Tensor<T>]) -> Result<Activations<'a, T>> {
        self.check_inputs(inputs)?;
        let mut values = vec![None; self.nodes.len()];
        for (&id, x) in self.input_ids().iter().zip(inputs) {
            values[id] = Some((*x).clone());
        }
        Ok(Activations {
            net: self,
            values,
            hook: None,
        })
    }

    /// Evaluation-mode logits of every exit.
    pub fn forward_eval(&self, inputs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let mut acts = self.activations(inputs)?;
        self.exits.iter().map(|&e| acts.node(e).cloned()).collect()
    }

    /// Training-mode forward; returns exit logits and the tape for
    /// [`Network::backward`]. Batch-norm running statistics are updated.
    pub fn forward_train(&mut self, inputs: &[&Tensor<T>]) -> Result<(Vec<Tensor<T>>, Tape<T>)> {
        let batch = self.check_inputs(inputs)?;
        let mut values: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let ids = self.input_ids();
        let mut caches = Vec::with_capacity(self.nodes.len());
        let mut next_input = inputs.iter();
        for id in 0..self.nodes.len() {
            if ids.contains(&id) {
                values[id] = Some((*next_input.next().expect("checked")).clone());
                caches.push(NodeCache::None);
                continue;
            }
            let x = Self::gather(&values, &self.nodes[id].inputs)?;
            let (y, cache) = self.nodes[id].op.forward_train(&x)?;
            values[id] = Some(y);
            caches.push(cache);
        }
        let logits = self.exits.iter().map(|&e| values[e].clone().expect("evaluated")).collect();
        Ok((logits, Tape { caches, batch }))
    }

    /// Backpropagates exit gradients (one per exit; `None` contributes
    /// nothing) and accumulates parameter gradients. Returns the gradient
    /// with respect to each network input.
    pub fn backward(&mut self, tape: Tape<T>, exit_grads: &[Option<Tensor<T>>]) -> Result<Vec<Tensor<T>>> {
        if exit_grads.len() != self.exits.len() {
            return Err(Error::dim("backward", "exits", format!("{} exit gradients for {} exits", exit_grads.len(), self.exits.len())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for (&e, g) in self.exits.iter().zip(exit_grads) {
            if let Some(g) = g {
                accumulate(&mut grads[e], g.clone());
            }
        }
        let ids = self.input_ids();
        for id in (0..self.nodes.len()).rev() {
            if ids.contains(&id) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let gin = self.nodes[id].op.backward(&tape.caches[id], &g)?;
            let inputs = self.nodes[id].inputs.clone();
            if let [single] = inputs.as_slice() {
                accumulate(&mut grads[*single], gin);
            } else {
                let widths: Vec<usize> = inputs.iter().map(|&p| self.nodes[p].output_shape.channels).collect();
                for (&p, part) in inputs.iter().zip(ops::split_channels(&gin, &widths)?) {
                    accumulate(&mut grads[p], part);
                }
            }
        }
        Ok(ids
            .iter()
            .map(|&id| {
                grads[id].take().unwrap_or_else(|| {
                    let s = self.nodes[id].output_shape;
                    Tensor::zeros(&[tape.batch, s.channels, s.height, s.width])
                })
            })
            .collect())
    }

    /// Runs every exit on a single-input network. In training mode the
    /// tape is discarded.
    pub fn forward_all_exits(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Vec<Tensor<T>>> {
        match mode {
            Mode::Eval => self.forward_eval(&[batch]),
            Mode::Train => self.forward_train(&[batch]).map(|(l, _)| l),
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

type Hook<'a, T> = Box<dyn FnMut(NodeId, &mut Tensor<T>) + 'a>;

/// Evaluation-mode activations computed on demand. Requesting a node
/// evaluates only the ancestors not computed yet.
pub struct Activations<'a, T> {
    net: &'a Network<T>,
    values: Vec<Option<Tensor<T>>>,
    hook: Option<Hook<'a, T>>,
}

impl<'a, T: Real> Activations<'a, T> {
    /// Installs a callback that may modify each node output right after
    /// it is computed.
    pub fn with_hook(mut self, hook: impl FnMut(NodeId, &mut Tensor<T>) + 'a) -> Self {
        self.hook = Some(Box::new(hook));
        self
    }

    pub fn is_computed(&self, id: NodeId) -> bool {
        self.values[id].is_some()
    }

    /// Evaluates `id` and any missing ancestors; returns the ids that were
    /// newly computed, in order.
    pub fn ensure(&mut self, id: NodeId) -> Result<Vec<NodeId>> {
        let mask = self.net.ancestors(id);
        let mut computed = Vec::new();
        for n in 0..=id {
            if !mask[n] || self.values[n].is_some() {
                continue;
            }
            let node = &self.net.nodes[n];
            let x = Network::gather(&self.values, &node.inputs)?;
            let mut y = node.op.forward_eval(&x)?;
            if let Some(hook) = self.hook.as_mut() {
                hook(n, &mut y);
            }
            self.values[n] = Some(y);
            computed.push(n);
        }
        Ok(computed)
    }

    pub fn node(&mut self, id: NodeId) -> Result<&Tensor<T>> {
        self.ensure(id)?;
        Ok(self.values[id].as_ref().expect("evaluated"))
    }

    /// Logits of exit `exit` (1-based).
    pub fn exit(&mut self, exit: usize) -> Result<&Tensor<T>> {
        let id = self.net.exits[exit - 1];
        self.node(id)
    }
}

/// Builds the three-pipeline network described by `config`.
///
/// A shared 3x3 stem conv (3 -> 2k) runs at full resolution and is pooled
/// three times; the 1x, 2x and 3x pooled maps feed pipelines 3, 2 and 1.
/// Pipeline p has p dense blocks separated by transitions, so every final
/// block works at 1/8 resolution. With cascading, block b of pipeline p is
/// concatenated into block b+1 of pipeline p+1.
pub fn build_graph<T: Real>(config: &ModelConfig, seed: u64) -> Result<Network<T>> {
    let size = config.input_size;
    if size == 0 || size % 8 != 0 {
        return Err(Error::Config(format!("input size {size} is not a positive multiple of 8")));
    }
    if config.growth == 0 {
        return Err(Error::Config("growth rate must be at least 1".into()));
    }
    if config.num_classes < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    let k = config.growth;
    let n = config.layers_per_block;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = GraphBuilder::<T>::new();

    let input = g.input("input", FeatureShape::new(3, size, size));
    let stem = g.add("stem", NodeOp::Conv(Conv2d::new("stem", 3, 2 * k, 3, &mut rng)), &[input])?;
    let mut pools = Vec::with_capacity(NUM_PIPELINES);
    let mut prev = stem;
    for i in 1..=NUM_PIPELINES {
        prev = g.add(&format!("pool{i}"), NodeOp::Pool, &[prev])?;
        pools.push(prev);
    }

    // blocks[p][b]: output of block b of pipeline p (0-based)
    let mut blocks: Vec<Vec<NodeId>> = Vec::with_capacity(NUM_PIPELINES);
    let mut exits = Vec::with_capacity(NUM_PIPELINES);
    for p in 0..NUM_PIPELINES {
        let mut row = Vec::with_capacity(p + 1);
        let mut trunk = pools[NUM_PIPELINES - 1 - p];
        for b in 0..=p {
            let mut sources = vec![trunk];
            if config.cascading && b > 0 {
                sources.push(blocks[p - 1][b - 1]);
            }
            let channels: usize = sources.iter().map(|&s| g.shape(s).channels).sum();
            let name = format!("p{}b{}", p + 1, b + 1);
            let spec = DenseBlockSpec {
                num_layers: n,
                growth: k,
                in_channels: channels,
            };
            let block = g.add(&name, NodeOp::Block(DenseBlock::new(&name, spec, &mut rng)), &sources)?;
            row.push(block);
            trunk = block;
            if b < p {
                let name = format!("p{}t{}", p + 1, b + 1);
                let spec = TransitionSpec {
                    channels: g.shape(block).channels,
                };
                trunk = g.add(&name, NodeOp::Transition(Transition::new(&name, spec, &mut rng)), &[block])?;
            }
        }
        let name = format!("head{}", p + 1);
        let channels = g.shape(trunk).channels;
        let head = g.add(
            &name,
            NodeOp::Head(ExitHead::new(&name, channels, config.num_classes, &mut rng)),
            &[trunk],
        )?;
        exits.push(head);
        blocks.push(row);
    }
    g.finish(exits, Some(config.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::parse_model_label;
    use rand::Rng;

    fn cfg(label: &str) -> ModelConfig {
        parse_model_label(label).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small(label: &str) -> Network<f32> {
        build_graph(&cfg(label).with_growth(4).with_layers_per_block(1).with_classes(10).with_input_size(16), 3).unwrap()
    }

    #[test]
    fn rejects_indivisible_input() {
        let c = cfg("PN3-ddd").with_input_size(20);
        assert!(matches!(build_graph::<f32>(&c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn exits_all_at_one_eighth_resolution() {
        for label in ["PN3-ddd", "PN3cut-ddd"] {
            let net = build_graph::<f32>(&cfg(label), 0).unwrap();
            assert_eq!(net.exits().len(), 3);
            for &e in net.exits() {
                let s = net.node(e).input_shape;
                assert_eq!((s.height, s.width), (4, 4));
            }
            for (p, c) in net.concat_edges() {
                let (a, b) = (net.node(p).output_shape, net.node(c).input_shape);
                assert_eq!((a.height, a.width), (b.height, b.width));
            }
        }
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        let mut net = build_graph::<f32>(&cfg("PN3-ddd").with_growth(4).with_layers_per_block(1), 1).unwrap();
        let x = random(&[2, 3, 32, 32], 2);
        let logits = net.forward_all_exits(&x, Mode::Eval).unwrap();
        assert_eq!(logits.len(), 3);
        for l in &logits {
            assert_eq!(l.shape(), &[2, 100]);
            assert!(l.all_finite());
        }
        let logits = net.forward_all_exits(&x, Mode::Train).unwrap();
        assert!(logits.iter().all(Tensor::all_finite));
    }

    #[test]
    fn duplicate_sample_gives_identical_rows() {
        let net = small("PN3-ddd");
        let one = random(&[1, 3, 16, 16], 4);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let x = Tensor::new(vec![2, 3, 16, 16], data).unwrap();
        for l in net.forward_eval(&[&x]).unwrap() {
            let (a, b) = l.data().split_at(10);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let x = random(&[2, 3, 16, 16], 5);
        let a = small("PN3-ddd").forward_eval(&[&x]).unwrap();
        let b = small("PN3-ddd").forward_eval(&[&x]).unwrap();
        assert_eq!(a, b);
    }

    fn exits_changed_by_zeroing(net: &Network<f32>, node: &str) -> Vec<bool> {
        let x = random(&[2, 3, 16, 16], 6);
        let clean = net.forward_eval(&[&x]).unwrap();
        let target = net.node_id(node).unwrap();
        let mut acts = net.activations(&[&x]).unwrap().with_hook(move |id, t| {
            if id == target {
                t.fill(0.0);
            }
        });
        (1..=3).map(|e| acts.exit(e).unwrap() != &clean[e - 1]).collect()
    }

    #[test]
    fn zeroing_first_block_reaches_cascaded_exits_only() {
        assert_eq!(exits_changed_by_zeroing(&small("PN3-ddd"), "p1b1"), vec![true, true, true]);
        assert_eq!(exits_changed_by_zeroing(&small("PN3cut-ddd"), "p1b1"), vec![true, false, false]);
        assert_eq!(exits_changed_by_zeroing(&small("PN3-ddd"), "p2b1"), vec![false, true, true]);
    }

    #[test]
    fn census_cut_pipelines_are_disjoint() {
        let net = small("PN3cut-ddd");
        let census = net.parameter_census();
        let strip = |c: &ExitCensus| -> BTreeSet<String> {
            c.names.iter().filter(|n| !n.starts_with("stem.")).cloned().collect()
        };
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(strip(&census[i]).is_disjoint(&strip(&census[j])), "{i} vs {j}");
            }
        }
    }

    #[test]
    fn census_cascade_nests_block_params() {
        let net = small("PN3-ddd");
        let census = net.parameter_census();
        let blocks = |c: &ExitCensus| -> BTreeSet<String> {
            c.names.iter().filter(|n| n.contains('b') && n.starts_with('p')).cloned().collect()
        };
        assert!(blocks(&census[0]).is_subset(&blocks(&census[1])));
        assert!(blocks(&census[1]).is_subset(&blocks(&census[2])));
        assert!(blocks(&census[0]).len() < blocks(&census[1]).len());
        let total: usize = net.params().iter().map(|p| p.value.shape().iter().product::<usize>()).sum();
        assert_eq!(net.param_count(), total);
    }

    #[test]
    fn backward_reaches_cascade_sources() {
        let mut net = small("PN3-ddd");
        let x = random(&[2, 3, 16, 16], 7);
        let (logits, tape) = net.forward_train(&[&x]).unwrap();
        let g = Tensor::full(logits[2].shape(), 0.1);
        net.backward(tape, &[None, None, Some(g)]).unwrap();
        let norm = |prefix: &str| -> f64 {
            net.params().iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.grad.sum_squares()).sum()
        };
        assert!(norm("p1b1.") > 0.0);
        assert!(norm("p2b1.") > 0.0);
        assert!(norm("p2b2.") > 0.0);
        assert_eq!(norm("head1."), 0.0);
        assert_eq!(norm("head2."), 0.0);
    }

    #[test]
    fn builder_rejects_resolution_mismatch() {
        let mut g = GraphBuilder::<f32>::new();
        let a = g.input("a", FeatureShape::new(2, 8, 8));
        let p = g.add("p", NodeOp::Pool, &[a]).unwrap();
        assert!(g.add("q", NodeOp::Pool, &[a, p]).is_err());
    }
}
