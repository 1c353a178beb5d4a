//! Minimal N-dimensional tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value: shape, row-major buffer, an optional gradient
//! buffer and an optional handle into the [`Graph`] that produced it. Tensors
//! created outside a recording graph carry no graph handle and are immutable
//! data safe to share across threads. All differentiable computation goes
//! through [`Graph`], a dynamic tape built per forward call and consumed by
//! `backward`.

mod element;
pub mod gradcheck;
pub mod graph;
pub mod ops;

pub use element::Element;
pub use gradcheck::{grad_check, grad_check_coords};
pub use graph::{Gradients, Graph, NodeRef, Op, Padding};

use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// N-dimensional floating-point array, row-major.
#[derive(Debug, Clone)]
pub struct Tensor<T: Element> {
    shape: Vec<usize>,
    data: Arc<[T]>,
    requires_grad: bool,
    grad: Option<Arc<[T]>>,
    node: Option<NodeRef>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {:?} implies {} elements, buffer has {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: data.into(),
            requires_grad: false,
            grad: None,
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(shape.to_vec(), vec![T::ZERO; numel(shape)])
            .expect("zeros: valid shape")
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor::from_vec(shape.to_vec(), vec![value; numel(shape)])
            .expect("full: valid shape")
    }

    pub fn scalar(value: T) -> Self {
        Tensor::from_vec(vec![1], vec![value]).expect("scalar")
    }

    /// Standard-normal samples. Values are drawn in f64 and narrowed, so the
    /// stream is identical across element types for a given RNG state.
    pub fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let data: Vec<T> = (0..numel(shape))
            .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Tensor::from_vec(shape.to_vec(), data).expect("randn: valid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<[T]> {
        Arc::clone(&self.data)
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::InvalidArgument(format!(
                "gradient buffer length {} does not match tensor numel {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad.into());
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn node(&self) -> Option<NodeRef> {
        self.node
    }

    pub(crate) fn with_node(mut self, node: NodeRef) -> Self {
        self.node = Some(node);
        self
    }

    /// Drop the graph handle, keeping the value.
    pub fn detach(mut self) -> Self {
        self.node = None;
        self
    }

    /// Replace the value buffer in place (used by optimizer updates).
    pub fn replace_data(&mut self, data: Vec<T>) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::InvalidArgument(format!(
                "replacement buffer length {} does not match tensor numel {}",
                data.len(),
                self.data.len()
            )));
        }
        self.data = data.into();
        Ok(())
    }

    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "item() requires a scalar tensor, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let data: Vec<T> = self.data.iter().map(|&v| f(v)).collect();
        Tensor::from_vec(self.shape.clone(), data).expect("map preserves shape")
    }

    /// Eager `self + alpha * other`, elementwise. Not recorded on any graph.
    pub fn add_scaled(&self, other: &Tensor<T>, alpha: T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_scaled",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data: Vec<T> = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a + alpha * b)
            .collect();
        Tensor::from_vec(self.shape.clone(), data)
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.maximum(lo).minimum(hi))
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data: Vec<U> = self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect();
        Tensor::from_vec(self.shape.clone(), data).expect("cast preserves shape")
    }
}

impl<T: Element> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

const DUMP_MAGIC: &[u8; 4] = b"CCMT";

/// Write the raw debug dump: magic `CCMT`, u32 rank, u32 extents
/// (little-endian), then the payload as 32-bit little-endian floats.
pub fn write_dump<T: Element, W: Write>(tensor: &Tensor<T>, w: &mut W) -> Result<()> {
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
    for &e in tensor.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Read a `CCMT` dump back. The payload is always 32-bit.
pub fn read_dump<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::InvalidArgument(format!(
            "bad tensor dump magic {magic:?}, expected {DUMP_MAGIC:?}"
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut b4)?;
        shape.push(u32::from_le_bytes(b4) as usize);
    }
    let n = numel(&shape);
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b4)?;
        data.push(f32::from_le_bytes(b4));
    }
    Tensor::from_vec(shape, data)
}
