//! Directed acyclic layer graphs with eager shape inference, seeded weights,
//! forward execution and receptive-field probing.
//!
//! Nodes can only consume earlier nodes, so insertion order is a topological
//! order and the graph is acyclic by construction.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, ConvGeometry, ConvSpec, Grid, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Mish,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    Input { shape: Shape },
    Conv { out_channels: usize, geometry: ConvGeometry },
    ConvTranspose { out_channels: usize, geometry: ConvGeometry },
    PixelShuffle { factor: usize },
    Concat,
    Add,
    Activation(Activation),
    /// Inference-mode batch normalization: per-channel affine.
    BatchNorm,
    MaxPool { geometry: ConvGeometry },
}

impl NodeKind {
    pub fn tag(&self) -> &'static str {
        match self {
            NodeKind::Input { .. } => "input",
            NodeKind::Conv { geometry, .. } if geometry.dilation > 1 => "dconv",
            NodeKind::Conv { .. } => "conv",
            NodeKind::ConvTranspose { .. } => "deconv",
            NodeKind::PixelShuffle { .. } => "shuffle",
            NodeKind::Concat => "concat",
            NodeKind::Add => "add",
            NodeKind::Activation(Activation::Relu) => "relu",
            NodeKind::Activation(Activation::Mish) => "mish",
            NodeKind::BatchNorm => "bn",
            NodeKind::MaxPool { .. } => "maxpool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ArchGraph {
    nodes: Vec<Node>,
    shapes: Vec<Shape>,
    tags: BTreeMap<String, NodeId>,
    dilation_groups: Vec<(String, Vec<usize>)>,
}

impl ArchGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Shape recorded when the node was inserted.
    pub fn shape(&self, id: NodeId) -> Shape {
        self.shapes[id.0]
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Input { .. }))
            .map(|n| n.id)
            .collect()
    }

    pub fn tags(&self) -> &BTreeMap<String, NodeId> {
        &self.tags
    }

    pub fn tagged(&self, tag: &str) -> Option<NodeId> {
        self.tags.get(tag).copied()
    }

    pub fn require(&self, tag: &str) -> Result<NodeId> {
        self.tagged(tag)
            .ok_or_else(|| Error::invalid("graph", format!("missing tagged node `{tag}`")))
    }

    pub fn set_tag(&mut self, tag: impl Into<String>, id: NodeId) {
        self.tags.insert(tag.into(), id);
    }

    /// Registers a dilation rate sequence used somewhere in the graph.
    pub fn register_dilations(&mut self, name: impl Into<String>, rates: Vec<usize>) {
        self.dilation_groups.push((name.into(), rates));
    }

    pub fn dilation_groups(&self) -> &[(String, Vec<usize>)] {
        &self.dilation_groups
    }

    /// Appends a node after checking its inputs and inferring its shape.
    pub fn push(&mut self, name: impl Into<String>, kind: NodeKind, inputs: &[NodeId]) -> Result<NodeId> {
        let id = NodeId(self.nodes.len());
        if let Some(bad) = inputs.iter().find(|i| i.0 >= id.0) {
            return Err(Error::invalid(
                "graph",
                format!("node {id} consumes {bad}, which is not an earlier node"),
            ));
        }
        let in_shapes: Vec<Shape> = inputs.iter().map(|i| self.shapes[i.0]).collect();
        let shape = infer(&kind, &in_shapes).map_err(|e| Error::Node {
            node: id.0,
            kind: kind.tag().to_string(),
            source: Box::new(e),
        })?;
        self.nodes.push(Node {
            id,
            name: name.into(),
            kind,
            inputs: inputs.to_vec(),
        });
        self.shapes.push(shape);
        Ok(id)
    }

    pub fn input(&mut self, name: &str, shape: Shape) -> Result<NodeId> {
        self.push(name, NodeKind::Input { shape }, &[])
    }

    pub fn conv(&mut self, name: &str, x: NodeId, out_channels: usize, geometry: ConvGeometry) -> Result<NodeId> {
        self.push(name, NodeKind::Conv { out_channels, geometry }, &[x])
    }

    pub fn deconv(&mut self, name: &str, x: NodeId, out_channels: usize, geometry: ConvGeometry) -> Result<NodeId> {
        self.push(name, NodeKind::ConvTranspose { out_channels, geometry }, &[x])
    }

    pub fn shuffle(&mut self, name: &str, x: NodeId, factor: usize) -> Result<NodeId> {
        self.push(name, NodeKind::PixelShuffle { factor }, &[x])
    }

    pub fn concat(&mut self, name: &str, xs: &[NodeId]) -> Result<NodeId> {
        self.push(name, NodeKind::Concat, xs)
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(name, NodeKind::Add, &[a, b])
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name, NodeKind::Activation(Activation::Relu), &[x])
    }

    pub fn mish(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name, NodeKind::Activation(Activation::Mish), &[x])
    }

    pub fn batch_norm(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push(name, NodeKind::BatchNorm, &[x])
    }

    pub fn max_pool(&mut self, name: &str, x: NodeId, geometry: ConvGeometry) -> Result<NodeId> {
        self.push(name, NodeKind::MaxPool { geometry }, &[x])
    }

    /// Re-derives every shape from the node list alone.
    pub fn infer_shapes(&self) -> Result<Vec<Shape>> {
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<Shape> = node.inputs.iter().map(|i| shapes[i.0]).collect();
            shapes.push(infer(&node.kind, &ins).map_err(|e| Error::Node {
                node: node.id.0,
                kind: node.kind.tag().to_string(),
                source: Box::new(e),
            })?);
        }
        Ok(shapes)
    }

    /// Consumers of each node, indexed by node id.
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for n in &self.nodes {
            for i in &n.inputs {
                out[i.0].push(n.id);
            }
        }
        out
    }
}

fn infer(kind: &NodeKind, ins: &[Shape]) -> Result<Shape> {
    let arity = |n: usize| -> Result<()> {
        if ins.len() != n {
            return Err(Error::ShapeMismatch {
                op: "arity",
                dim: "inputs",
                expected: n,
                found: ins.len(),
            });
        }
        Ok(())
    };
    match kind {
        NodeKind::Input { shape } => {
            arity(0)?;
            if shape.is_empty() {
                return Err(Error::invalid("input", format!("degenerate shape {shape}")));
            }
            Ok(*shape)
        }
        NodeKind::Conv { out_channels, geometry } => {
            arity(1)?;
            if geometry.kernel % 2 == 0 {
                return Err(Error::invalid("conv", "kernel must be odd"));
            }
            if *out_channels == 0 {
                return Err(Error::invalid("conv", "zero output channels"));
            }
            window(ins[0], *out_channels, geometry)
        }
        NodeKind::MaxPool { geometry } => {
            arity(1)?;
            window(ins[0], ins[0].channels, geometry)
        }
        NodeKind::ConvTranspose { out_channels, geometry } => {
            arity(1)?;
            geometry.validate("deconv")?;
            if !(1..=2).contains(&geometry.stride) {
                return Err(Error::invalid("deconv", "stride must be 1 or 2"));
            }
            let s = ins[0];
            Ok(Shape::new(*out_channels, s.height * geometry.stride, s.width * geometry.stride))
        }
        NodeKind::PixelShuffle { factor } => {
            arity(1)?;
            let s = ins[0];
            let f2 = factor * factor;
            if *factor == 0 || s.channels % f2 != 0 {
                return Err(Error::invalid(
                    "pixel_shuffle",
                    format!("{} channels not divisible by {f2}", s.channels),
                ));
            }
            Ok(Shape::new(s.channels / f2, s.height * factor, s.width * factor))
        }
        NodeKind::Concat => {
            let first = ins
                .first()
                .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
            let mut c = 0;
            for s in ins {
                if (s.height, s.width) != (first.height, first.width) {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        dim: if s.height != first.height { "height" } else { "width" },
                        expected: if s.height != first.height { first.height } else { first.width },
                        found: if s.height != first.height { s.height } else { s.width },
                    });
                }
                c += s.channels;
            }
            Ok(Shape::new(c, first.height, first.width))
        }
        NodeKind::Add => {
            arity(2)?;
            if ins[0] != ins[1] {
                return Err(Error::invalid("add", format!("{} vs {}", ins[0], ins[1])));
            }
            Ok(ins[0])
        }
        NodeKind::Activation(_) | NodeKind::BatchNorm => {
            arity(1)?;
            Ok(ins[0])
        }
    }
}

fn window(s: Shape, channels: usize, geometry: &ConvGeometry) -> Result<Shape> {
    geometry.validate("window")?;
    match (geometry.output_size(s.height), geometry.output_size(s.width)) {
        (Some(h), Some(w)) => Ok(Shape::new(channels, h, w)),
        _ => Err(Error::invalid(
            "window",
            format!("extent {} does not fit input {s}", geometry.extent()),
        )),
    }
}

/// Learnable parameters of one node.
#[derive(Debug, Clone, PartialEq)]
pub enum Param<T> {
    Conv(ConvSpec<T>),
    Affine { scale: Vec<T>, shift: Vec<T> },
}

/// Parameters indexed by node; parameter-free nodes hold `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    params: Vec<Option<Param<T>>>,
}

impl<T: Scalar> Weights<T> {
    fn build(graph: &ArchGraph, mut conv: impl FnMut(usize, usize, usize) -> (Vec<T>, Vec<T>)) -> Self {
        let params = graph
            .nodes()
            .iter()
            .map(|n| match &n.kind {
                NodeKind::Conv { out_channels, geometry } | NodeKind::ConvTranspose { out_channels, geometry } => {
                    let cin = graph.shape(n.inputs[0]).channels;
                    let (w, b) = conv(cin, *out_channels, geometry.kernel);
                    Some(Param::Conv(ConvSpec {
                        in_channels: cin,
                        out_channels: *out_channels,
                        geometry: *geometry,
                        weights: w,
                        bias: b,
                    }))
                }
                NodeKind::BatchNorm => {
                    let c = graph.shape(n.id).channels;
                    Some(Param::Affine {
                        scale: vec![T::one(); c],
                        shift: vec![T::zero(); c],
                    })
                }
                _ => None,
            })
            .collect();
        Self { params }
    }

    /// Xavier-uniform convolution weights, zero biases, identity normalization.
    pub fn seeded(graph: &ArchGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(graph, |cin, cout, k| {
            let fan = ((cin + cout) * k * k) as f64;
            let limit = (6.0 / fan).sqrt();
            let w = (0..cout * cin * k * k)
                .map(|_| T::lit(rng.gen_range(-limit..=limit)))
                .collect();
            (w, vec![T::zero(); cout])
        })
    }

    /// All-ones convolutions and identity normalization, for impulse probing.
    pub fn probe(graph: &ArchGraph) -> Self {
        Self::build(graph, |cin, cout, k| (vec![T::one(); cout * cin * k * k], vec![T::zero(); cout]))
    }

    pub fn zeros(graph: &ArchGraph) -> Self {
        Self::build(graph, |cin, cout, k| (vec![T::zero(); cout * cin * k * k], vec![T::zero(); cout]))
    }

    pub fn get(&self, id: NodeId) -> Option<&Param<T>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, id: NodeId) -> Option<&mut Param<T>> {
        self.params.get_mut(id.0).and_then(Option::as_mut)
    }

    /// Replaces a node's parameters after checking they have the same layout.
    pub fn set(&mut self, id: NodeId, param: Param<T>) -> Result<()> {
        let slot = self
            .params
            .get_mut(id.0)
            .ok_or_else(|| Error::invalid("weights", format!("no node {id}")))?;
        let compatible = match (slot.as_ref(), &param) {
            (Some(Param::Conv(a)), Param::Conv(b)) => {
                a.in_channels == b.in_channels
                    && a.out_channels == b.out_channels
                    && a.geometry == b.geometry
                    && a.weights.len() == b.weights.len()
                    && a.bias.len() == b.bias.len()
            }
            (Some(Param::Affine { scale, .. }), Param::Affine { scale: s2, shift }) => {
                scale.len() == s2.len() && shift.len() == s2.len()
            }
            _ => false,
        };
        if !compatible {
            return Err(Error::invalid("weights", format!("incompatible parameters for node {id}")));
        }
        *slot = Some(param);
        Ok(())
    }

    /// Multiplies every weight and bias of a convolution node by `factor`.
    pub fn scale_node(&mut self, id: NodeId, factor: T) -> Result<()> {
        match self.get_mut(id) {
            Some(Param::Conv(spec)) => {
                spec.weights.iter_mut().for_each(|w| *w = *w * factor);
                spec.bias.iter_mut().for_each(|b| *b = *b * factor);
                Ok(())
            }
            _ => Err(Error::invalid("weights", format!("node {id} is not a convolution"))),
        }
    }
}

/// Results of a forward pass.
#[derive(Debug, Clone)]
pub struct Activations<T> {
    values: Vec<Option<Grid<T>>>,
    shapes: Vec<Shape>,
}

impl<T: Scalar> Activations<T> {
    pub fn get(&self, id: NodeId) -> Option<&Grid<T>> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    /// Shape each node actually produced.
    pub fn executed_shapes(&self) -> &[Shape] {
        &self.shapes
    }

    /// Every tagged output that was retained, by tag.
    pub fn named(&self, graph: &ArchGraph) -> BTreeMap<String, Grid<T>> {
        graph
            .tags()
            .iter()
            .filter_map(|(t, id)| self.get(*id).map(|g| (t.clone(), g.clone())))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Retain {
    /// Keep every node's output.
    All,
    /// Keep graph inputs and tagged nodes; free the rest after their last use.
    #[default]
    Tagged,
}

/// Runs the graph. `inputs` follow the order of [`ArchGraph::inputs`].
pub fn forward<T: Scalar>(
    graph: &ArchGraph,
    weights: &Weights<T>,
    inputs: &[Grid<T>],
    retain: Retain,
) -> Result<Activations<T>> {
    let input_ids = graph.inputs();
    if inputs.len() != input_ids.len() {
        return Err(Error::ShapeMismatch {
            op: "forward",
            dim: "inputs",
            expected: input_ids.len(),
            found: inputs.len(),
        });
    }
    let consumers = graph.consumers();
    let last_use: Vec<usize> = consumers
        .iter()
        .enumerate()
        .map(|(i, c)| c.iter().map(|n| n.0).max().unwrap_or(i))
        .collect();
    let keep: Vec<bool> = (0..graph.len())
        .map(|i| retain == Retain::All || graph.tags().values().any(|t| t.0 == i))
        .collect();

    let mut values: Vec<Option<Grid<T>>> = vec![None; graph.len()];
    let mut shapes = Vec::with_capacity(graph.len());
    let mut next_input = 0;
    for node in graph.nodes() {
        let wrap = |e: Error| Error::Node {
            node: node.id.0,
            kind: node.kind.tag().to_string(),
            source: Box::new(e),
        };
        let arg = |k: usize| -> &Grid<T> {
            values[node.inputs[k].0]
                .as_ref()
                .expect("inputs are evaluated before consumers")
        };
        let out = match &node.kind {
            NodeKind::Input { shape } => {
                let g = &inputs[next_input];
                next_input += 1;
                if g.shape() != *shape {
                    return Err(wrap(Error::invalid(
                        "forward",
                        format!("input {} has shape {}, declared {shape}", node.name, g.shape()),
                    )));
                }
                g.clone()
            }
            NodeKind::Conv { .. } | NodeKind::ConvTranspose { .. } => {
                let spec = match weights.get(node.id) {
                    Some(Param::Conv(s)) => s,
                    _ => return Err(wrap(Error::invalid("forward", "missing convolution weights"))),
                };
                if matches!(node.kind, NodeKind::Conv { .. }) {
                    tensor::conv2d(arg(0), spec)
                } else {
                    tensor::conv_transpose2d(arg(0), spec)
                }
                .map_err(wrap)?
            }
            NodeKind::PixelShuffle { factor } => tensor::pixel_shuffle(arg(0), *factor).map_err(wrap)?,
            NodeKind::Concat => {
                let xs: Vec<&Grid<T>> = (0..node.inputs.len()).map(arg).collect();
                tensor::concat_channels(&xs).map_err(wrap)?
            }
            NodeKind::Add => tensor::add_elementwise(arg(0), arg(1)).map_err(wrap)?,
            NodeKind::Activation(Activation::Relu) => tensor::relu(arg(0)),
            NodeKind::Activation(Activation::Mish) => tensor::mish(arg(0)),
            NodeKind::BatchNorm => match weights.get(node.id) {
                Some(Param::Affine { scale, shift }) => {
                    tensor::channel_affine(arg(0), scale, shift).map_err(wrap)?
                }
                _ => return Err(wrap(Error::invalid("forward", "missing normalization parameters"))),
            },
            NodeKind::MaxPool { geometry } => tensor::max_pool2d(arg(0), *geometry).map_err(wrap)?,
        };
        shapes.push(out.shape());
        values[node.id.0] = Some(out);
        for i in &node.inputs {
            if !keep[i.0] && last_use[i.0] == node.id.0 {
                values[i.0] = None;
            }
        }
    }
    for (i, v) in values.iter_mut().enumerate() {
        if !keep[i] && !consumers[i].is_empty() {
            *v = None;
        }
    }
    Ok(Activations { values, shapes })
}

/// Boolean `(c, y, x)` dependency mask of one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub shape: Shape,
    pub bits: Vec<bool>,
}

impl Mask {
    fn new(shape: Shape) -> Self {
        Self {
            shape,
            bits: vec![false; shape.len()],
        }
    }

    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    /// Spatial union over channels, row-major `(y, x)`.
    pub fn spatial(&self) -> Vec<bool> {
        let p = self.shape.plane();
        let mut out = vec![false; p];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                out[i % p] = true;
            }
        }
        out
    }

    pub fn positions(&self) -> Vec<(usize, usize)> {
        let w = self.shape.width;
        self.spatial()
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i / w, i % w))
            .collect()
    }
}

/// Input cells with a nonzero path to `node` at `(y, x)` (any channel), on
/// the node `source`.
///
/// Equivalent to probing each source cell with an impulse under all-ones
/// weights and identity activations, computed in one reverse sweep.
pub fn receptive_field_on(
    graph: &ArchGraph,
    node: NodeId,
    pos: (usize, usize),
    source: NodeId,
) -> Result<Vec<(usize, usize)>> {
    let masks = dependency_masks(graph, node, pos)?;
    Ok(masks[source.0]
        .as_ref()
        .map(Mask::positions)
        .unwrap_or_default())
}

/// [`receptive_field_on`] the graph's first input.
pub fn receptive_field(graph: &ArchGraph, node: NodeId, pos: (usize, usize)) -> Result<Vec<(usize, usize)>> {
    let input = *graph
        .inputs()
        .first()
        .ok_or_else(|| Error::invalid("receptive_field", "graph has no input"))?;
    receptive_field_on(graph, node, pos, input)
}

/// Reverse-propagated masks for every ancestor of `node`.
pub fn dependency_masks(graph: &ArchGraph, node: NodeId, pos: (usize, usize)) -> Result<Vec<Option<Mask>>> {
    if node.0 >= graph.len() {
        return Err(Error::invalid("receptive_field", format!("no node {node}")));
    }
    let s = graph.shape(node);
    if pos.0 >= s.height || pos.1 >= s.width {
        return Err(Error::invalid(
            "receptive_field",
            format!("position {pos:?} outside {}x{}", s.height, s.width),
        ));
    }
    let mut masks: Vec<Option<Mask>> = vec![None; graph.len()];
    let mut m = Mask::new(s);
    for c in 0..s.channels {
        let i = m.idx(c, pos.0, pos.1);
        m.bits[i] = true;
    }
    masks[node.0] = Some(m);

    for n in graph.nodes()[..=node.0].iter().rev() {
        let Some(out) = masks[n.id.0].take() else {
            continue;
        };
        let contributions = backprop(graph, n, &out);
        masks[n.id.0] = Some(out);
        for (input, mask) in n.inputs.iter().zip(contributions) {
            let slot = &mut masks[input.0];
            match slot {
                Some(existing) => existing
                    .bits
                    .iter_mut()
                    .zip(&mask.bits)
                    .for_each(|(a, &b)| *a |= b),
                None => *slot = Some(mask),
            }
        }
    }
    Ok(masks)
}

fn backprop(graph: &ArchGraph, node: &Node, out: &Mask) -> Vec<Mask> {
    let in_shapes: Vec<Shape> = node.inputs.iter().map(|i| graph.shape(*i)).collect();
    match &node.kind {
        NodeKind::Input { .. } => Vec::new(),
        NodeKind::Activation(_) | NodeKind::BatchNorm => vec![out.clone()],
        NodeKind::Add => vec![out.clone(), out.clone()],
        NodeKind::Concat => {
            let mut offset = 0;
            in_shapes
                .iter()
                .map(|&s| {
                    let n = s.len();
                    let m = Mask {
                        shape: s,
                        bits: out.bits[offset..offset + n].to_vec(),
                    };
                    offset += n;
                    m
                })
                .collect()
        }
        NodeKind::PixelShuffle { factor } => {
            let f = *factor;
            let s = in_shapes[0];
            let mut m = Mask::new(s);
            for c in 0..out.shape.channels {
                for y in 0..out.shape.height {
                    for x in 0..out.shape.width {
                        if out.bits[out.idx(c, y, x)] {
                            let ci = c * f * f + (y % f) * f + x % f;
                            let i = m.idx(ci, y / f, x / f);
                            m.bits[i] = true;
                        }
                    }
                }
            }
            vec![m]
        }
        NodeKind::Conv { geometry, .. } => {
            let spatial = out.spatial();
            let s = in_shapes[0];
            let g = geometry;
            let mut plane = vec![false; s.plane()];
            for oy in 0..out.shape.height {
                for ox in 0..out.shape.width {
                    if !spatial[oy * out.shape.width + ox] {
                        continue;
                    }
                    for ky in 0..g.kernel {
                        let iy = (oy * g.stride + ky * g.dilation) as i64 - g.padding as i64;
                        if iy < 0 || iy >= s.height as i64 {
                            continue;
                        }
                        for kx in 0..g.kernel {
                            let ix = (ox * g.stride + kx * g.dilation) as i64 - g.padding as i64;
                            if ix >= 0 && ix < s.width as i64 {
                                plane[iy as usize * s.width + ix as usize] = true;
                            }
                        }
                    }
                }
            }
            vec![broadcast(s, &plane)]
        }
        NodeKind::MaxPool { geometry } => {
            let s = in_shapes[0];
            let g = geometry;
            let mut m = Mask::new(s);
            for c in 0..out.shape.channels {
                for oy in 0..out.shape.height {
                    for ox in 0..out.shape.width {
                        if !out.bits[out.idx(c, oy, ox)] {
                            continue;
                        }
                        for ky in 0..g.kernel {
                            let iy = (oy * g.stride + ky * g.dilation) as i64 - g.padding as i64;
                            if iy < 0 || iy >= s.height as i64 {
                                continue;
                            }
                            for kx in 0..g.kernel {
                                let ix = (ox * g.stride + kx * g.dilation) as i64 - g.padding as i64;
                                if ix >= 0 && ix < s.width as i64 {
                                    let i = m.idx(c, iy as usize, ix as usize);
                                    m.bits[i] = true;
                                }
                            }
                        }
                    }
                }
            }
            vec![m]
        }
        NodeKind::ConvTranspose { geometry, .. } => {
            let spatial = out.spatial();
            let s = in_shapes[0];
            let g = geometry;
            let crop = g.transpose_crop();
            let (oh, ow) = (out.shape.height as i64, out.shape.width as i64);
            let mut plane = vec![false; s.plane()];
            for iy in 0..s.height {
                for ix in 0..s.width {
                    'taps: for ky in 0..g.kernel {
                        let y = (iy * g.stride + ky * g.dilation) as i64 - crop;
                        if y < 0 || y >= oh {
                            continue;
                        }
                        for kx in 0..g.kernel {
                            let x = (ix * g.stride + kx * g.dilation) as i64 - crop;
                            if x >= 0 && x < ow && spatial[(y * ow + x) as usize] {
                                plane[iy * s.width + ix] = true;
                                break 'taps;
                            }
                        }
                    }
                }
            }
            vec![broadcast(s, &plane)]
        }
    }
}

fn broadcast(shape: Shape, plane: &[bool]) -> Mask {
    let mut bits = Vec::with_capacity(shape.len());
    for _ in 0..shape.channels {
        bits.extend_from_slice(plane);
    }
    Mask { shape, bits }
}

const SCHEMA: &str = "# dronedet arch v1";

fn geometry_fields(g: &ConvGeometry) -> String {
    format!("k={} s={} d={} p={}", g.kernel, g.stride, g.dilation, g.padding)
}

impl ArchGraph {
    /// Line-oriented text form: one node per line
    /// (`<id> <kind> <name> [key=value ...] in=<ids>`), then `tag` and
    /// `dilations` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::from(SCHEMA);
        out.push('\n');
        for n in &self.nodes {
            let _ = write!(out, "{} {} {}", n.id, n.kind.tag(), n.name);
            match &n.kind {
                NodeKind::Input { shape } => {
                    let _ = write!(out, " shape={shape}");
                }
                NodeKind::Conv { out_channels, geometry } | NodeKind::ConvTranspose { out_channels, geometry } => {
                    let _ = write!(out, " out={out_channels} {}", geometry_fields(geometry));
                }
                NodeKind::MaxPool { geometry } => {
                    let _ = write!(out, " {}", geometry_fields(geometry));
                }
                NodeKind::PixelShuffle { factor } => {
                    let _ = write!(out, " factor={factor}");
                }
                _ => {}
            }
            if !n.inputs.is_empty() {
                let ids: Vec<String> = n.inputs.iter().map(|i| i.to_string()).collect();
                let _ = write!(out, " in={}", ids.join(","));
            }
            out.push('\n');
        }
        for (tag, id) in &self.tags {
            let _ = writeln!(out, "tag {tag} {id}");
        }
        for (name, rates) in &self.dilation_groups {
            let r: Vec<String> = rates.iter().map(|r| r.to_string()).collect();
            let _ = writeln!(out, "dilations {name} {}", r.join(","));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == SCHEMA => {}
            _ => return Err(Error::parse(1, format!("expected `{SCHEMA}` header"))),
        }
        let mut g = ArchGraph::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks[0] {
                "tag" => {
                    if toks.len() != 3 {
                        return Err(Error::parse(lineno, "tag line needs a name and an id"));
                    }
                    let id = parse_usize(toks[2], lineno)?;
                    if id >= g.len() {
                        return Err(Error::parse(lineno, format!("tag refers to unknown node {id}")));
                    }
                    g.set_tag(toks[1], NodeId(id));
                }
                "dilations" => {
                    if toks.len() != 3 {
                        return Err(Error::parse(lineno, "dilations line needs a name and rates"));
                    }
                    let rates = toks[2]
                        .split(',')
                        .map(|r| parse_usize(r, lineno))
                        .collect::<Result<Vec<_>>>()?;
                    g.register_dilations(toks[1], rates);
                }
                _ => parse_node(&mut g, &toks, lineno)?,
            }
        }
        Ok(g)
    }
}

fn parse_usize(s: &str, line: usize) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::parse(line, format!("expected an unsigned integer, got `{s}`")))
}

fn parse_node(g: &mut ArchGraph, toks: &[&str], line: usize) -> Result<()> {
    if toks.len() < 3 {
        return Err(Error::parse(line, "node line needs id, kind and name"));
    }
    let id = parse_usize(toks[0], line)?;
    if id != g.len() {
        return Err(Error::parse(line, format!("node ids must be sequential, expected {}", g.len())));
    }
    let mut fields = BTreeMap::new();
    for t in &toks[3..] {
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| Error::parse(line, format!("malformed field `{t}`")))?;
        fields.insert(k, v);
    }
    let num = |k: &str| -> Result<usize> {
        let v = fields
            .get(k)
            .ok_or_else(|| Error::parse(line, format!("missing field `{k}`")))?;
        parse_usize(v, line)
    };
    let geometry = || -> Result<ConvGeometry> { Ok(ConvGeometry::new(num("k")?, num("s")?, num("d")?, num("p")?)) };
    let kind = match toks[1] {
        "input" => {
            let s = fields
                .get("shape")
                .ok_or_else(|| Error::parse(line, "missing field `shape`"))?;
            let dims = s
                .split('x')
                .map(|d| parse_usize(d, line))
                .collect::<Result<Vec<_>>>()?;
            if dims.len() != 3 {
                return Err(Error::parse(line, format!("bad shape `{s}`")));
            }
            NodeKind::Input {
                shape: Shape::new(dims[0], dims[1], dims[2]),
            }
        }
        "conv" | "dconv" => NodeKind::Conv {
            out_channels: num("out")?,
            geometry: geometry()?,
        },
        "deconv" => NodeKind::ConvTranspose {
            out_channels: num("out")?,
            geometry: geometry()?,
        },
        "maxpool" => NodeKind::MaxPool { geometry: geometry()? },
        "shuffle" => NodeKind::PixelShuffle { factor: num("factor")? },
        "concat" => NodeKind::Concat,
        "add" => NodeKind::Add,
        "relu" => NodeKind::Activation(Activation::Relu),
        "mish" => NodeKind::Activation(Activation::Mish),
        "bn" => NodeKind::BatchNorm,
        other => return Err(Error::parse(line, format!("unknown node kind `{other}`"))),
    };
    let inputs = match fields.get("in") {
        Some(v) => v
            .split(',')
            .map(|i| parse_usize(i, line).map(NodeId))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    g.push(toks[2], kind, &inputs)
        .map_err(|e| Error::parse(line, e.to_string()))?;
    Ok(())
}
