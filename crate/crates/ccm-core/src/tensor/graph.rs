//! Dynamic computation graph (tape) for reverse-mode differentiation.
//!
//! A [`Graph`] is built per forward call and consumed by [`Graph::backward`].
//! Nodes are appended in execution order, so ids are already topologically
//! sorted. Values are `Arc` buffers, which makes saving activations for the
//! backward pass a pointer copy.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::ops;
use super::{numel, Element, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle tying a [`Tensor`] to the node of the graph that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    pub(crate) graph: u64,
    pub(crate) id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Operator tag plus its attributes. Inputs are supplied separately to
/// [`Graph::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    /// Inputs `[x, w]` or `[x, w, b]`; stride 1.
    Conv2d { padding: Padding },
    /// Inputs `[x, w]` or `[x, w, b]`; `x: [In]`, `w: [Out, In]`.
    Linear,
    /// Inputs `[a, b]`, both `[C*, H, W]`; concatenates along channels.
    ConcatChannels,
    Add,
    Sub,
    Mul,
    /// Inputs `[x, b]`; `x: [C, H, W]`, `b: [C]` broadcast over `H, W`.
    BiasAdd,
    Silu,
    /// Inputs `[x, gamma, beta]`.
    GroupNorm { groups: usize, eps: f64 },
    Upsample2x,
    AvgPool2x,
    /// Broadcast scalar multiply.
    Scale { alpha: f64 },
    /// Broadcast scalar add.
    Shift { delta: f64 },
    Sum,
    Mean,
    Sqrt,
    /// No tensor inputs; emits the sinusoidal embedding of `t`.
    TimeEmbed { t: f64, dim: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear => "linear",
            Op::ConcatChannels => "concat_channels",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::BiasAdd => "bias_add",
            Op::Silu => "silu",
            Op::GroupNorm { .. } => "group_norm",
            Op::Upsample2x => "upsample2x",
            Op::AvgPool2x => "avg_pool2x",
            Op::Scale { .. } => "scale",
            Op::Shift { .. } => "shift",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Sqrt => "sqrt",
            Op::TimeEmbed { .. } => "time_embed",
        }
    }
}

struct Node<T: Element> {
    op: Op,
    inputs: Vec<u32>,
    shape: Vec<usize>,
    value: Arc<[T]>,
    /// Op-specific saved buffers (group-norm statistics).
    aux: Vec<Arc<[T]>>,
    /// True when a requires-grad leaf is reachable from this node.
    track: bool,
}

pub struct Graph<T: Element> {
    id: u64,
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(node);
        id
    }

    fn push_leaf(&mut self, t: &Tensor<T>, track: bool) -> u32 {
        self.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape: t.shape().to_vec(),
            value: t.data_arc(),
            aux: Vec::new(),
            track,
        })
    }

    /// Register a tensor as a graph input. The returned tensor shares the
    /// buffer and carries the node handle; gradients flow into it iff the
    /// tensor has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Tensor<T> {
        let id = self.push_leaf(t, t.requires_grad());
        t.clone().with_node(NodeRef { graph: self.id, id })
    }

    /// Register a tensor as a non-differentiable constant.
    pub fn constant(&mut self, t: &Tensor<T>) -> Tensor<T> {
        let id = self.push_leaf(t, false);
        t.clone()
            .with_requires_grad(false)
            .with_node(NodeRef { graph: self.id, id })
    }

    fn resolve(&mut self, t: &Tensor<T>, op: &'static str) -> Result<u32> {
        match t.node() {
            Some(nr) if nr.graph == self.id => Ok(nr.id),
            Some(nr) => Err(Error::Graph(format!(
                "{op}: input belongs to graph {} but was applied on graph {}",
                nr.graph, self.id
            ))),
            None if t.requires_grad() => Err(Error::Graph(format!(
                "{op}: requires-grad tensor must be registered with Graph::leaf before use"
            ))),
            None => Ok(self.push_leaf(t, false)),
        }
    }

    fn node_value(&self, id: u32) -> (&[T], &[usize]) {
        let n = &self.nodes[id as usize];
        (&n.value, &n.shape)
    }

    fn out_tensor(&mut self, op: Op, ids: Vec<u32>, shape: Vec<usize>, value: Vec<T>, aux: Vec<Arc<[T]>>) -> Tensor<T> {
        let track = ids.iter().any(|&i| self.nodes[i as usize].track);
        let value: Arc<[T]> = value.into();
        let id = self.push(Node {
            op,
            inputs: ids,
            shape: shape.clone(),
            value: Arc::clone(&value),
            aux,
            track,
        });
        Tensor {
            shape,
            data: value,
            requires_grad: false,
            grad: None,
            node: Some(NodeRef { graph: self.id, id }),
        }
    }

    /// Apply an operator to input tensors, recording the result. This is the
    /// single entry point all convenience methods funnel through.
    pub fn apply(&mut self, op: Op, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if self.consumed {
            return Err(Error::Graph(
                "graph already consumed by backward".into(),
            ));
        }
        let name = op.name();
        let ids: Vec<u32> = inputs
            .iter()
            .map(|t| self.resolve(t, name))
            .collect::<Result<_>>()?;
        let arity_err = |expected: &str| {
            Err(Error::Graph(format!(
                "{name}: expected {expected} inputs, got {}",
                ids.len()
            )))
        };

        match op {
            Op::Leaf => Err(Error::Graph("leaf is not applicable".into())),
            Op::Conv2d { padding } => {
                if ids.len() < 2 || ids.len() > 3 {
                    return arity_err("2 or 3");
                }
                let (x, xs) = self.node_value(ids[0]);
                let (w, ws) = self.node_value(ids[1]);
                if xs.len() != 3 || ws.len() != 4 {
                    return Err(Error::shape(
                        "conv2d",
                        format!("need x [C,H,W] and w [Co,Ci,Kh,Kw], got {xs:?} and {ws:?}"),
                    ));
                }
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                if wcin != cin {
                    return Err(Error::shape(
                        "conv2d",
                        format!("input has {cin} channels, kernel expects {wcin}"),
                    ));
                }
                let same = padding == Padding::Same;
                let Some((hout, wout, ph, pw)) = ops::conv2d_out_shape(h, wd, kh, kw, same) else {
                    return Err(Error::shape(
                        "conv2d",
                        format!(
                            "kernel {kh}x{kw} incompatible with input {h}x{wd} under {padding:?} padding"
                        ),
                    ));
                };
                let b = if ids.len() == 3 {
                    let (b, bs) = self.node_value(ids[2]);
                    if bs != [cout] {
                        return Err(Error::shape(
                            "conv2d",
                            format!("bias shape {bs:?}, expected [{cout}]"),
                        ));
                    }
                    Some(b)
                } else {
                    None
                };
                let y = ops::conv2d_fwd(x, w, b, cin, h, wd, cout, kh, kw, hout, wout, ph, pw);
                Ok(self.out_tensor(op, ids, vec![cout, hout, wout], y, Vec::new()))
            }
            Op::Linear => {
                if ids.len() < 2 || ids.len() > 3 {
                    return arity_err("2 or 3");
                }
                let (x, xs) = self.node_value(ids[0]);
                let (w, ws) = self.node_value(ids[1]);
                if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] {
                    return Err(Error::shape(
                        "linear",
                        format!("need x [In] and w [Out,In], got {xs:?} and {ws:?}"),
                    ));
                }
                let (out, inp) = (ws[0], ws[1]);
                let b = if ids.len() == 3 {
                    let (b, bs) = self.node_value(ids[2]);
                    if bs != [out] {
                        return Err(Error::shape(
                            "linear",
                            format!("bias shape {bs:?}, expected [{out}]"),
                        ));
                    }
                    Some(b)
                } else {
                    None
                };
                let y = ops::linear_fwd(x, w, b, out, inp);
                Ok(self.out_tensor(op, ids, vec![out], y, Vec::new()))
            }
            Op::ConcatChannels => {
                if ids.len() != 2 {
                    return arity_err("2");
                }
                let (a, ash) = self.node_value(ids[0]);
                let (b, bsh) = self.node_value(ids[1]);
                if ash.len() != 3 || bsh.len() != 3 || ash[1..] != bsh[1..] {
                    return Err(Error::shape(
                        "concat_channels",
                        format!("need matching [C,H,W] spatial extents, got {ash:?} and {bsh:?}"),
                    ));
                }
                let mut y = Vec::with_capacity(a.len() + b.len());
                y.extend_from_slice(a);
                y.extend_from_slice(b);
                let shape = vec![ash[0] + bsh[0], ash[1], ash[2]];
                Ok(self.out_tensor(op, ids, shape, y, Vec::new()))
            }
            Op::Add | Op::Sub | Op::Mul => {
                if ids.len() != 2 {
                    return arity_err("2");
                }
                let (a, ash) = self.node_value(ids[0]);
                let (b, bsh) = self.node_value(ids[1]);
                if ash != bsh {
                    return Err(Error::shape(name, format!("{ash:?} vs {bsh:?}")));
                }
                let y: Vec<T> = match op {
                    Op::Add => a.iter().zip(b).map(|(&x, &y)| x + y).collect(),
                    Op::Sub => a.iter().zip(b).map(|(&x, &y)| x - y).collect(),
                    _ => a.iter().zip(b).map(|(&x, &y)| x * y).collect(),
                };
                let shape = ash.to_vec();
                Ok(self.out_tensor(op, ids, shape, y, Vec::new()))
            }
            Op::BiasAdd => {
                if ids.len() != 2 {
                    return arity_err("2");
                }
                let (x, xs) = self.node_value(ids[0]);
                let (b, bs) = self.node_value(ids[1]);
                if xs.len() != 3 || bs.len() != 1 || bs[0] != xs[0] {
                    return Err(Error::shape(
                        "bias_add",
                        format!("need x [C,H,W] and b [C], got {xs:?} and {bs:?}"),
                    ));
                }
                let hw = xs[1] * xs[2];
                let mut y = x.to_vec();
                for c in 0..xs[0] {
                    let bv = b[c];
                    for v in &mut y[c * hw..(c + 1) * hw] {
                        *v += bv;
                    }
                }
                let shape = xs.to_vec();
                Ok(self.out_tensor(op, ids, shape, y, Vec::new()))
            }
            Op::Silu => {
                if ids.len() != 1 {
                    return arity_err("1");
                }
                let (x, xs) = self.node_value(ids[0]);
                let y = ops::silu_fwd(x);
                let shape = xs.to_vec();
                Ok(self.out_tensor(op, ids, shape, y, Vec::new()))
            }
            Op::GroupNorm { groups, eps } => {
                if ids.len() != 3 {
                    return arity_err("3 (x, gamma, beta)");
                }
                let (x, xs) = self.node_value(ids[0]);
                let (gm, gms) = self.node_value(ids[1]);
                let (bt, bts) = self.node_value(ids[2]);
                if xs.len() != 3 {
                    return Err(Error::shape(
                        "group_norm",
                        format!("need x [C,H,W], got {xs:?}"),
                    ));
                }
                let c = xs[0];
                if groups == 0 || c % groups != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "group_norm: {groups} groups do not divide {c} channels"
                    )));
                }
                if gms != [c] || bts != [c] {
                    return Err(Error::shape(
                        "group_norm",
                        format!("gamma/beta must be [{c}], got {gms:?} and {bts:?}"),
                    ));
                }
                let hw = xs[1] * xs[2];
                let (y, means, inv_stds) = ops::group_norm_fwd(x, c, hw, groups, eps, gm, bt);
                let shape = xs.to_vec();
                let aux = vec![Arc::from(means), Arc::from(inv_stds)];
                Ok(self.out_tensor(op, ids, shape, y, aux))
            }
            Op::Upsample2x => {
                if ids.len() != 1 {
                    return arity_err("1");
                }
                let (x, xs) = self.node_value(ids[0]);
                if xs.len() != 3 {
                    return Err(Error::shape("upsample2x", format!("need [C,H,W], got {xs:?}")));
                }
                let y = ops::upsample2x_fwd(x, xs[0], xs[1], xs[2]);
                let shape = vec![xs[0], 2 * xs[1], 2 * xs[2]];
                Ok(self.out_tensor(op, ids, shape, y, Vec::new()))
            }
            Op::AvgPool2x => {
                if ids.len() != 1 {
                    return arity_err("1");
                }
                let (x, xs) = self.node_value(ids[0]);
                if xs.len() != 3 || xs[1] % 2 != 0 || xs[2] % 2 != 0 {
                    return Err(Error::shape(
                        "avg_pool2x",
                        format!("need [C,H,W] with even H and W, got {xs:?}"),
                    ));
                }
                let y = ops::avgpool2x_fwd(x, xs[0], xs[1], xs[2]);
                let shape = vec![xs[0], xs[1] / 2, xs[2] / 2];
                Ok(self.out_tensor(op, ids, shape, y, Vec::new()))
            }
            Op::Scale { alpha } => {
                if ids.len() != 1 {
                    return arity_err("1");
                }
                let (x, xs) = self.node_value(ids[0]);
                let a = T::from_f64(alpha);
                let y: Vec<T> = x.iter().map(|&v| a * v).collect();
                let shape = xs.to_vec();
                Ok(self.out_tensor(op, ids, shape, y, Vec::new()))
            }
            Op::Shift { delta } => {
                if ids.len() != 1 {
                    return arity_err("1");
                }
                let (x, xs) = self.node_value(ids[0]);
                let d = T::from_f64(delta);
                let y: Vec<T> = x.iter().map(|&v| v + d).collect();
                let shape = xs.to_vec();
                Ok(self.out_tensor(op, ids, shape, y, Vec::new()))
            }
            Op::Sum | Op::Mean => {
                if ids.len() != 1 {
                    return arity_err("1");
                }
                let (x, _) = self.node_value(ids[0]);
                let mut acc = T::ZERO;
                for &v in x {
                    acc += v;
                }
                if matches!(op, Op::Mean) {
                    acc /= T::from_f64(x.len() as f64);
                }
                Ok(self.out_tensor(op, ids, vec![1], vec![acc], Vec::new()))
            }
            Op::Sqrt => {
                if ids.len() != 1 {
                    return arity_err("1");
                }
                let (x, xs) = self.node_value(ids[0]);
                let y: Vec<T> = x.iter().map(|&v| v.sqrt()).collect();
                let shape = xs.to_vec();
                Ok(self.out_tensor(op, ids, shape, y, Vec::new()))
            }
            Op::TimeEmbed { t, dim } => {
                if !ids.is_empty() {
                    return arity_err("0");
                }
                if dim == 0 || dim % 2 != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "time_embed: dim must be positive and even, got {dim}"
                    )));
                }
                if t <= 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "time_embed: t must be positive, got {t}"
                    )));
                }
                let y = ops::time_embed_values(t, dim);
                Ok(self.out_tensor(op, ids, vec![dim], y, Vec::new()))
            }
        }
    }

    // Convenience wrappers.

    pub fn conv2d(
        &mut self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
        padding: Padding,
    ) -> Result<Tensor<T>> {
        match b {
            Some(b) => self.apply(Op::Conv2d { padding }, &[x, w, b]),
            None => self.apply(Op::Conv2d { padding }, &[x, w]),
        }
    }

    pub fn linear(
        &mut self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        match b {
            Some(b) => self.apply(Op::Linear, &[x, w, b]),
            None => self.apply(Op::Linear, &[x, w]),
        }
    }

    pub fn concat_channels(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(Op::ConcatChannels, &[a, b])
    }

    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn bias_add(&mut self, x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(Op::BiasAdd, &[x, b])
    }

    pub fn silu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(Op::Silu, &[x])
    }

    pub fn group_norm(
        &mut self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        groups: usize,
        eps: f64,
    ) -> Result<Tensor<T>> {
        self.apply(Op::GroupNorm { groups, eps }, &[x, gamma, beta])
    }

    pub fn upsample2x(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(Op::Upsample2x, &[x])
    }

    pub fn avg_pool2x(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(Op::AvgPool2x, &[x])
    }

    pub fn scale(&mut self, x: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
        self.apply(Op::Scale { alpha }, &[x])
    }

    pub fn shift(&mut self, x: &Tensor<T>, delta: f64) -> Result<Tensor<T>> {
        self.apply(Op::Shift { delta }, &[x])
    }

    pub fn sum(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(Op::Sum, &[x])
    }

    pub fn mean(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(Op::Mean, &[x])
    }

    pub fn sqrt(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(Op::Sqrt, &[x])
    }

    pub fn time_embed(&mut self, t: f64, dim: usize) -> Result<Tensor<T>> {
        self.apply(Op::TimeEmbed { t, dim }, &[])
    }

    /// Reverse pass from a scalar loss. Consumes the graph: a second call
    /// fails. Every requires-grad leaf ends up with a gradient buffer in the
    /// returned map; leaves the loss does not reach get zeros.
    pub fn backward(&mut self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Graph("backward called on a consumed graph".into()));
        }
        let Some(nr) = loss.node() else {
            return Err(Error::Graph("backward: loss was not produced by a graph".into()));
        };
        if nr.graph != self.id {
            return Err(Error::Graph(format!(
                "backward: loss belongs to graph {}, not {}",
                nr.graph, self.id
            )));
        }
        if numel(&self.nodes[nr.id as usize].shape) != 1 {
            return Err(Error::Graph(format!(
                "backward: loss must be scalar, shape is {:?}",
                self.nodes[nr.id as usize].shape
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[nr.id as usize].track {
            grads[nr.id as usize] = Some(vec![T::ONE]);
            for id in (0..=nr.id as usize).rev() {
                if self.nodes[id].op == Op::Leaf {
                    continue;
                }
                let Some(gy) = grads[id].take() else { continue };
                self.propagate(id, &gy, &mut grads);
            }
        }

        let mut out: Vec<Option<Arc<[T]>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.op == Op::Leaf && node.track {
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| vec![T::ZERO; numel(&node.shape)]);
                out[id] = Some(g.into());
            }
        }
        Ok(Gradients {
            graph: self.id,
            grads: out,
        })
    }

    fn needs(&self, id: u32) -> bool {
        self.nodes[id as usize].track
    }

    fn propagate(&self, id: usize, gy: &[T], grads: &mut Vec<Option<Vec<T>>>) {
        let node = &self.nodes[id];
        let ids = &node.inputs;
        let send = |input: u32, g: Vec<T>, grads: &mut Vec<Option<Vec<T>>>| {
            let slot = &mut grads[input as usize];
            match slot {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += *b;
                    }
                }
                None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf | Op::TimeEmbed { .. } => {}
            Op::Conv2d { padding } => {
                let (x, xs) = self.node_value(ids[0]);
                let (w, ws) = self.node_value(ids[1]);
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let same = *padding == Padding::Same;
                let (hout, wout, ph, pw) =
                    ops::conv2d_out_shape(h, wd, kh, kw, same).expect("validated in forward");
                let need_db = ids.len() == 3 && self.needs(ids[2]);
                let (dx, dw, db) = ops::conv2d_bwd(
                    x,
                    w,
                    gy,
                    cin,
                    h,
                    wd,
                    cout,
                    kh,
                    kw,
                    hout,
                    wout,
                    ph,
                    pw,
                    self.needs(ids[0]),
                    self.needs(ids[1]),
                    need_db,
                );
                if let Some(dx) = dx {
                    send(ids[0], dx, grads);
                }
                if let Some(dw) = dw {
                    send(ids[1], dw, grads);
                }
                if let Some(db) = db {
                    send(ids[2], db, grads);
                }
            }
            Op::Linear => {
                let (x, _) = self.node_value(ids[0]);
                let (w, ws) = self.node_value(ids[1]);
                let (out, inp) = (ws[0], ws[1]);
                let need_db = ids.len() == 3 && self.needs(ids[2]);
                let (dx, dw, db) = ops::linear_bwd(
                    x,
                    w,
                    gy,
                    out,
                    inp,
                    self.needs(ids[0]),
                    self.needs(ids[1]),
                    need_db,
                );
                if let Some(dx) = dx {
                    send(ids[0], dx, grads);
                }
                if let Some(dw) = dw {
                    send(ids[1], dw, grads);
                }
                if let Some(db) = db {
                    send(ids[2], db, grads);
                }
            }
            Op::ConcatChannels => {
                let (_, ash) = self.node_value(ids[0]);
                let na = numel(ash);
                if self.needs(ids[0]) {
                    send(ids[0], gy[..na].to_vec(), grads);
                }
                if self.needs(ids[1]) {
                    send(ids[1], gy[na..].to_vec(), grads);
                }
            }
            Op::Add => {
                if self.needs(ids[0]) {
                    send(ids[0], gy.to_vec(), grads);
                }
                if self.needs(ids[1]) {
                    send(ids[1], gy.to_vec(), grads);
                }
            }
            Op::Sub => {
                if self.needs(ids[0]) {
                    send(ids[0], gy.to_vec(), grads);
                }
                if self.needs(ids[1]) {
                    send(ids[1], gy.iter().map(|&g| -g).collect(), grads);
                }
            }
            Op::Mul => {
                let (a, _) = self.node_value(ids[0]);
                let (b, _) = self.node_value(ids[1]);
                if self.needs(ids[0]) {
                    send(ids[0], gy.iter().zip(b).map(|(&g, &v)| g * v).collect(), grads);
                }
                if self.needs(ids[1]) {
                    send(ids[1], gy.iter().zip(a).map(|(&g, &v)| g * v).collect(), grads);
                }
            }
            Op::BiasAdd => {
                let (_, xs) = self.node_value(ids[0]);
                if self.needs(ids[0]) {
                    send(ids[0], gy.to_vec(), grads);
                }
                if self.needs(ids[1]) {
                    let hw = xs[1] * xs[2];
                    let mut db = vec![T::ZERO; xs[0]];
                    for (c, d) in db.iter_mut().enumerate() {
                        *d = gy[c * hw..(c + 1) * hw].iter().copied().sum();
                    }
                    send(ids[1], db, grads);
                }
            }
            Op::Silu => {
                if self.needs(ids[0]) {
                    let (x, _) = self.node_value(ids[0]);
                    send(ids[0], ops::silu_bwd(x, gy), grads);
                }
            }
            Op::GroupNorm { groups, .. } => {
                let (x, xs) = self.node_value(ids[0]);
                let (gamma, _) = self.node_value(ids[1]);
                let hw = xs[1] * xs[2];
                let (dx, dgamma, dbeta) = ops::group_norm_bwd(
                    x,
                    gamma,
                    &node.aux[0],
                    &node.aux[1],
                    gy,
                    xs[0],
                    hw,
                    *groups,
                    self.needs(ids[0]),
                    self.needs(ids[1]),
                    self.needs(ids[2]),
                );
                if let Some(dx) = dx {
                    send(ids[0], dx, grads);
                }
                if let Some(dgamma) = dgamma {
                    send(ids[1], dgamma, grads);
                }
                if let Some(dbeta) = dbeta {
                    send(ids[2], dbeta, grads);
                }
            }
            Op::Upsample2x => {
                if self.needs(ids[0]) {
                    let (_, xs) = self.node_value(ids[0]);
                    send(ids[0], ops::upsample2x_bwd(gy, xs[0], xs[1], xs[2]), grads);
                }
            }
            Op::AvgPool2x => {
                if self.needs(ids[0]) {
                    let (_, xs) = self.node_value(ids[0]);
                    send(ids[0], ops::avgpool2x_bwd(gy, xs[0], xs[1], xs[2]), grads);
                }
            }
            Op::Scale { alpha } => {
                if self.needs(ids[0]) {
                    let a = T::from_f64(*alpha);
                    send(ids[0], gy.iter().map(|&g| a * g).collect(), grads);
                }
            }
            Op::Shift { .. } => {
                if self.needs(ids[0]) {
                    send(ids[0], gy.to_vec(), grads);
                }
            }
            Op::Sum => {
                if self.needs(ids[0]) {
                    let (x, _) = self.node_value(ids[0]);
                    send(ids[0], vec![gy[0]; x.len()], grads);
                }
            }
            Op::Mean => {
                if self.needs(ids[0]) {
                    let (x, _) = self.node_value(ids[0]);
                    let g = gy[0] / T::from_f64(x.len() as f64);
                    send(ids[0], vec![g; x.len()], grads);
                }
            }
            Op::Sqrt => {
                if self.needs(ids[0]) {
                    let y = &node.value;
                    let half = T::from_f64(0.5);
                    send(
                        ids[0],
                        gy.iter().zip(y.iter()).map(|(&g, &yv)| g * half / yv).collect(),
                        grads,
                    );
                }
            }
        }
    }
}

/// Per-leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T: Element> {
    graph: u64,
    grads: Vec<Option<Arc<[T]>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient buffer for a requires-grad leaf registered on the graph that
    /// produced these gradients.
    pub fn get(&self, leaf: &Tensor<T>) -> Result<&[T]> {
        let Some(nr) = leaf.node() else {
            return Err(Error::Graph("gradients: tensor has no graph node".into()));
        };
        if nr.graph != self.graph {
            return Err(Error::Graph(format!(
                "gradients: tensor belongs to graph {}, not {}",
                nr.graph, self.graph
            )));
        }
        self.grads[nr.id as usize]
            .as_deref()
            .ok_or_else(|| Error::Graph("gradients: tensor is not a requires-grad leaf".into()))
    }

    pub fn get_arc(&self, leaf: &Tensor<T>) -> Result<Arc<[T]>> {
        let Some(nr) = leaf.node() else {
            return Err(Error::Graph("gradients: tensor has no graph node".into()));
        };
        if nr.graph != self.graph {
            return Err(Error::Graph(format!(
                "gradients: tensor belongs to graph {}, not {}",
                nr.graph, self.graph
            )));
        }
        self.grads[nr.id as usize]
            .as_ref()
            .map(Arc::clone)
            .ok_or_else(|| Error::Graph("gradients: tensor is not a requires-grad leaf".into()))
    }

    /// Write the gradient for `leaf` into the tensor's own grad buffer.
    pub fn write_into(&self, leaf_handle: &Tensor<T>, target: &mut Tensor<T>) -> Result<()> {
        let g = self.get(leaf_handle)?;
        target.set_grad(g.to_vec())
    }
}
