//! Builders for the four compared architectures and whole-network execution.

mod spec;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    BatchNormLayer, CenterFrame, ConvUnit, Dense, Dropout, DropoutState, Flatten, FoldFrames, FrameMean, GlobalAvgPool,
    Layer, Mode, Param, Relu, Resize, ResidualBlock, UnitKind,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use spec::{ModelSpec, TwoDMode, Variant};

/// One entry of a network's layer list.
pub enum Node<T: Scalar> {
    Conv(ConvUnit<T>),
    Norm(BatchNormLayer<T>),
    Relu(Relu),
    Resize(Resize),
    Residual(ResidualBlock<T>),
    Pool(GlobalAvgPool),
    Flatten(Flatten),
    Dropout(Dropout<T>),
    Dense(Dense<T>),
    CenterFrame(CenterFrame),
    FoldFrames(FoldFrames),
    FrameMean(FrameMean),
}

impl<T: Scalar> Node<T> {
    pub fn layer(&self) -> &dyn Layer<T> {
        match self {
            Node::Conv(l) => l,
            Node::Norm(l) => l,
            Node::Relu(l) => l,
            Node::Resize(l) => l,
            Node::Residual(l) => l,
            Node::Pool(l) => l,
            Node::Flatten(l) => l,
            Node::Dropout(l) => l,
            Node::Dense(l) => l,
            Node::CenterFrame(l) => l,
            Node::FoldFrames(l) => l,
            Node::FrameMean(l) => l,
        }
    }

    pub fn layer_mut(&mut self) -> &mut dyn Layer<T> {
        match self {
            Node::Conv(l) => l,
            Node::Norm(l) => l,
            Node::Relu(l) => l,
            Node::Resize(l) => l,
            Node::Residual(l) => l,
            Node::Pool(l) => l,
            Node::Flatten(l) => l,
            Node::Dropout(l) => l,
            Node::Dense(l) => l,
            Node::CenterFrame(l) => l,
            Node::FoldFrames(l) => l,
            Node::FrameMean(l) => l,
        }
    }
}

/// One row of [`Network::describe`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub index: usize,
    pub kind: String,
    /// Output extents for a batch of one.
    pub output_shape: Vec<usize>,
    pub params: usize,
    pub hyperparams: serde_json::Value,
}

pub struct Network<T: Scalar> {
    spec: ModelSpec,
    nodes: Vec<Node<T>>,
}

struct Builder<T: Scalar> {
    nodes: Vec<Node<T>>,
    dims: Vec<usize>,
}

impl<T: Scalar> Builder<T> {
    fn push(&mut self, node: Node<T>) -> Result<()> {
        let index = self.nodes.len();
        self.dims = node.layer().output_dims(&self.dims).map_err(|e| Error::Layer {
            index,
            kind: node.layer().kind().to_string(),
            source: Box::new(e),
        })?;
        self.nodes.push(node);
        Ok(())
    }

    fn channels(&self) -> usize {
        self.dims[1]
    }
}

impl<T: Scalar> Network<T> {
    /// Builds the layer graph for `spec`, drawing every initial weight from
    /// a generator seeded with `spec.seed`. Fails if any stage would shrink
    /// an extent below one.
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let [c, t, h, w] = spec.input_shape;
        let mut b = Builder {
            nodes: Vec::new(),
            dims: vec![1, c, t, h, w],
        };
        let two_d = spec.variant == Variant::Cnn2d;
        if two_d {
            b.push(match spec.two_d_mode {
                TwoDMode::CenterFrame => Node::CenterFrame(CenterFrame::default()),
                TwoDMode::FrameVote => Node::FoldFrames(FoldFrames::default()),
            })?;
        }
        let kernel = if two_d { [1, spec.kernel[1], spec.kernel[2]] } else { spec.kernel };
        let unit = match spec.variant {
            Variant::Proposed | Variant::Cnn2p1dBase => UnitKind::Factored {
                kernel,
                mid: spec.mid_channels,
                interleaved_relu: spec.interleaved_relu,
            },
            Variant::Cnn3d | Variant::Cnn2d => UnitKind::Full { kernel },
        };
        let targets = spec.stage_targets()?;
        let stages = spec.stage_filters.len();
        for (stage, &filters) in spec.stage_filters.iter().enumerate() {
            let mut stride = [1, 1, 1];
            if stage > 0 {
                if spec.variant == Variant::Cnn2p1dBase {
                    let halve_t = stage + 1 == stages;
                    stride = [if halve_t { 2 } else { 1 }, 2, 2];
                } else {
                    b.push(Node::Resize(Resize::new(targets[stage - 1])?))?;
                }
            }
            let c_in = b.channels();
            if stage % 2 == 0 {
                b.push(Node::Conv(unit.build(c_in, filters, stride, &mut rng)?))?;
                b.push(Node::Norm(BatchNormLayer::new(filters)?))?;
                b.push(Node::Relu(Relu::default()))?;
            } else {
                b.push(Node::Residual(ResidualBlock::new(c_in, filters, stride, unit, &mut rng)?))?;
            }
            if b.dims[2..].contains(&0) {
                return Err(Error::Config(format!(
                    "input {:?} is too small for stage {stage}",
                    spec.input_shape
                )));
            }
        }
        b.push(Node::Pool(GlobalAvgPool::default()))?;
        b.push(Node::Flatten(Flatten::default()))?;
        let dropout_seed: u64 = rng.gen();
        b.push(Node::Dropout(Dropout::new(spec.dropout, dropout_seed)?))?;
        let features = b.channels();
        b.push(Node::Dense(Dense::new(features, spec.num_classes, &mut rng)?))?;
        if two_d && spec.two_d_mode == TwoDMode::FrameVote {
            b.push(Node::FrameMean(FrameMean { frames: t }))?;
        }
        Ok(Network {
            spec: spec.clone(),
            nodes: b.nodes,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [Node<T>] {
        &mut self.nodes
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let d = batch.dims();
        if d.len() != 5 || d[1..] != self.spec.input_shape {
            let mut expected = vec![d.first().copied().unwrap_or(1)];
            expected.extend(self.spec.input_shape);
            return Err(Error::ShapeMismatch {
                op: "network input",
                left: d.to_vec(),
                right: expected,
            });
        }
        Ok(())
    }

    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for (index, node) in self.nodes.iter_mut().enumerate() {
            let layer = node.layer_mut();
            x = layer.forward(&x, mode).map_err(|e| Error::Layer {
                index,
                kind: layer.kind().to_string(),
                source: Box::new(e),
            })?;
        }
        Ok(x)
    }

    /// Back-propagates `grad_logits` through the cached forward pass and
    /// returns the gradient of every parameter, keyed like [`Network::params`].
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<BTreeMap<String, Tensor<T>>> {
        let (_, grads) = self.backward_with_input(grad_logits)?;
        let mut missing = None;
        self.visit_params(&mut |name, _| {
            if !grads.contains_key(&name) {
                missing = Some(name);
            }
        });
        match missing {
            Some(name) => Err(Error::Data(format!("parameter {name} received no gradient"))),
            None => Ok(grads),
        }
    }

    /// Gradient with respect to the network input, using the same cached
    /// forward pass as [`Network::backward`].
    pub fn backward_with_input(&mut self, grad_logits: &Tensor<T>) -> Result<(Tensor<T>, BTreeMap<String, Tensor<T>>)> {
        let mut g = grad_logits.clone();
        for (index, node) in self.nodes.iter_mut().enumerate().rev() {
            let layer = node.layer_mut();
            g = layer.backward(&g).map_err(|e| Error::Layer {
                index,
                kind: layer.kind().to_string(),
                source: Box::new(e),
            })?;
        }
        let mut grads = BTreeMap::new();
        self.visit_params(&mut |name, p| {
            if let Some(grad) = &p.grad {
                grads.insert(name, grad.clone());
            }
        });
        Ok((g, grads))
    }

    fn prefix(index: usize, node: &Node<T>) -> String {
        format!("{index:02}.{}", node.layer().kind())
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Param<T>)) {
        for (i, node) in self.nodes.iter().enumerate() {
            node.layer().visit_params(&Self::prefix(i, node), f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Param<T>)) {
        for (i, node) in self.nodes.iter_mut().enumerate() {
            let prefix = Self::prefix(i, node);
            node.layer_mut().visit_params_mut(&prefix, f);
        }
    }

    pub fn visit_buffers(&self, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, node) in self.nodes.iter().enumerate() {
            node.layer().visit_buffers(&Self::prefix(i, node), f);
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, node) in self.nodes.iter_mut().enumerate() {
            let prefix = Self::prefix(i, node);
            node.layer_mut().visit_buffers_mut(&prefix, f);
        }
    }

    /// Parameter registry: every trainable tensor by unique name.
    pub fn params(&self) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        self.visit_params(&mut |name, p| {
            out.insert(name, p.value.clone());
        });
        out
    }

    pub fn buffers(&self) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        self.visit_buffers(&mut |name, b| {
            out.insert(name, b.clone());
        });
        out
    }

    /// Replaces parameters and buffers by name. Every name must exist and
    /// every extent must match; missing entries are an error.
    pub fn load_state(&mut self, params: &BTreeMap<String, Tensor<T>>, buffers: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        let mut problem = None;
        let mut seen = 0;
        self.visit_params_mut(&mut |name, p| match params.get(&name) {
            Some(t) if t.dims() == p.value.dims() => {
                p.value = t.clone();
                p.grad = None;
                seen += 1;
            }
            Some(t) => problem = Some(format!("parameter {name} has extents {:?}, expected {:?}", t.dims(), p.value.dims())),
            None => problem = Some(format!("parameter {name} missing from state")),
        });
        if problem.is_none() && seen != params.len() {
            problem = Some("state holds parameters unknown to this network".to_string());
        }
        let mut seen = 0;
        self.visit_buffers_mut(&mut |name, b| match buffers.get(&name) {
            Some(t) if t.dims() == b.dims() => {
                *b = t.clone();
                seen += 1;
            }
            _ => problem = Some(format!("buffer {name} missing or misshapen")),
        });
        if problem.is_none() && seen != buffers.len() {
            problem = Some("state holds buffers unknown to this network".to_string());
        }
        match problem {
            Some(msg) => Err(Error::Format(msg)),
            None => Ok(()),
        }
    }

    pub fn count_params(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, p| total += p.value.numel());
        total
    }

    pub fn clear_cache(&mut self) {
        for node in &mut self.nodes {
            node.layer_mut().clear_cache();
        }
    }

    pub fn dropout_state(&self) -> Option<DropoutState> {
        self.nodes.iter().find_map(|n| match n {
            Node::Dropout(d) => Some(d.state()),
            _ => None,
        })
    }

    pub fn restore_dropout(&mut self, state: &DropoutState) -> Result<()> {
        for node in &mut self.nodes {
            if let Node::Dropout(d) = node {
                d.restore(state)?;
            }
        }
        Ok(())
    }

    pub fn describe(&self) -> Vec<LayerSummary> {
        let mut dims = vec![1];
        dims.extend(self.spec.input_shape);
        let mut rows = Vec::with_capacity(self.nodes.len());
        for (index, node) in self.nodes.iter().enumerate() {
            let layer = node.layer();
            // Shapes were validated when the network was built.
            dims = layer.output_dims(&dims).unwrap_or_default();
            let mut params = 0;
            layer.visit_params("", &mut |_, p| params += p.value.numel());
            rows.push(LayerSummary {
                index,
                kind: layer.kind().to_string(),
                output_shape: dims.clone(),
                params,
                hyperparams: layer.hyperparams(),
            });
        }
        rows
    }

    pub fn describe_text(&self) -> String {
        let mut out = format!("{} ({} parameters)\n", self.spec.variant, self.count_params());
        for row in self.describe() {
            let _ = writeln!(out, "{:>3}  {:<16} {:<22} {:>8}", row.index, row.kind, format!("{:?}", row.output_shape), row.params);
        }
        out
    }
}
