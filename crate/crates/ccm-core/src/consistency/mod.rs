//! The conditional consistency function, its training objective, and the
//! training loop.
//!
//! The model blends an identity path with the network output,
//! `g(r, v, t) = a_skip(t) * r + a_out(t) * G(r, v, t)`, which is exactly the
//! identity at the minimal noise level. Training matches the model's outputs
//! at adjacent noise levels of the same noised target against a frozen
//! teacher copy of the weights.

mod train;

pub use train::{
    train, train_resumed, LogRecord, OptimizerKind, TrainConfig, TrainEvent, TrainOutput,
};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::network::{self, bind_params, BoundParams, Parameters, UNetConfig};
use crate::schedule::{weighting, NoiseSchedule};
use crate::tensor::{Element, Graph, Tensor};

/// Student parameters, frozen-teacher copy, and the schedule they share.
#[derive(Debug, Clone)]
pub struct ConsistencyModel<T: Element> {
    pub params: Parameters<T>,
    pub teacher_params: Parameters<T>,
    pub sched: NoiseSchedule,
    pub net_cfg: UNetConfig,
}

impl<T: Element> ConsistencyModel<T> {
    /// Fresh model; the teacher starts as a copy of the student.
    pub fn new(net_cfg: UNetConfig, sched: NoiseSchedule, seed: u64) -> Result<Self> {
        sched.validate()?;
        let params = network::init::<T>(&net_cfg, seed)?;
        let teacher_params = params.clone();
        Ok(ConsistencyModel {
            params,
            teacher_params,
            sched,
            net_cfg,
        })
    }

    pub fn from_parts(
        net_cfg: UNetConfig,
        sched: NoiseSchedule,
        params: Parameters<T>,
        teacher_params: Parameters<T>,
    ) -> Result<Self> {
        sched.validate()?;
        net_cfg.validate()?;
        if !params.same_structure(&teacher_params) {
            return Err(Error::InvalidArgument(
                "student and teacher parameter sets must have identical names and shapes".into(),
            ));
        }
        Ok(ConsistencyModel {
            net_cfg,
            sched,
            params,
            teacher_params,
        })
    }

    /// Evaluate the consistency function without recording gradients.
    ///
    /// At `t == sigma_min` this returns `r_t` itself (the boundary identity,
    /// bitwise); elsewhere it is the skip/out blend around the network.
    pub fn g(
        &self,
        r_t: &Tensor<T>,
        v: &Tensor<T>,
        t: f64,
        use_teacher: bool,
    ) -> Result<Tensor<T>> {
        if !(t >= self.sched.sigma_min && t <= self.sched.sigma_max) {
            return Err(Error::Schedule(format!(
                "g: t = {t} outside [{}, {}]",
                self.sched.sigma_min, self.sched.sigma_max
            )));
        }
        if t == self.sched.sigma_min {
            return Ok(r_t.clone().detach().with_requires_grad(false));
        }
        let params = if use_teacher {
            &self.teacher_params
        } else {
            &self.params
        };
        let mut g = Graph::new();
        let bp = bind_params(&mut g, params, false);
        let rc = g.constant(r_t);
        let vc = g.constant(v);
        let out = g_in_graph(&mut g, &self.net_cfg, &bp, &self.sched, &rc, &vc, t)?;
        Ok(out.detach())
    }
}

/// Consistency function recorded on an existing graph. `r_t` and `v` must
/// already be registered on `g`.
pub fn g_in_graph<T: Element>(
    g: &mut Graph<T>,
    cfg: &UNetConfig,
    bp: &BoundParams<T>,
    sched: &NoiseSchedule,
    r_t: &Tensor<T>,
    v: &Tensor<T>,
    t: f64,
) -> Result<Tensor<T>> {
    let (a_skip, a_out) = sched.scalings(t)?;
    if t == sched.sigma_min {
        // a_skip is exactly 1 and a_out exactly 0 here; scaling by 1 keeps
        // the value bitwise.
        return g.scale(r_t, 1.0);
    }
    let net = network::forward_bound(g, cfg, bp, r_t, v, t)?;
    let skip = g.scale(r_t, a_skip)?;
    let out = g.scale(&net, a_out)?;
    g.add(&skip, &out)
}

/// Pseudo-Huber distance `sqrt(||a - b||^2 + c^2) - c`, eager.
pub fn pseudo_huber<T: Element>(a: &Tensor<T>, b: &Tensor<T>, c: f64) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "pseudo_huber",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "pseudo_huber: c must be positive, got {c}"
        )));
    }
    let mut sq = T::ZERO;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        sq += d * d;
    }
    let c = T::from_f64(c);
    Ok((sq + c * c).sqrt() - c)
}

/// Pseudo-Huber distance recorded on a graph.
pub fn pseudo_huber_in_graph<T: Element>(
    g: &mut Graph<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: f64,
) -> Result<Tensor<T>> {
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "pseudo_huber: c must be positive, got {c}"
        )));
    }
    let d = g.sub(a, b)?;
    let sq = g.mul(&d, &d)?;
    let total = g.sum(&sq)?;
    let shifted = g.shift(&total, c * c)?;
    let root = g.sqrt(&shifted)?;
    g.shift(&root, -c)
}

/// Default pseudo-Huber constant for images with `d` scalars:
/// `0.00054 * sqrt(d)`.
pub fn default_huber_c(numel: usize) -> f64 {
    0.00054 * (numel as f64).sqrt()
}

/// One evaluation of the training objective.
pub struct CctLoss<T: Element> {
    pub loss: f64,
    /// Per-parameter gradients, aligned with the model's parameter order.
    /// `None` when gradients were not requested.
    pub grads: Option<Vec<Arc<[T]>>>,
}

/// The consistency training loss for one sample at the adjacent level pair
/// `(t_n, t_{n+1})` (1-indexed into `levels`):
///
/// `lambda(t_n) * d(g_student(r + t_{n+1} z, v, t_{n+1}), g_teacher(r + t_n z, v, t_n))`
///
/// The teacher branch is evaluated eagerly, outside the recording graph, so
/// the returned gradients are with respect to the student parameters only.
pub fn cct_loss<T: Element>(
    model: &ConsistencyModel<T>,
    r: &Tensor<T>,
    v: &Tensor<T>,
    n: usize,
    levels: &[f64],
    z: &Tensor<T>,
    huber_c: f64,
    compute_grads: bool,
) -> Result<CctLoss<T>> {
    if r.shape() != v.shape() || r.shape() != z.shape() {
        return Err(Error::shape(
            "cct_loss",
            format!(
                "r {:?}, v {:?}, z {:?} must all match",
                r.shape(),
                v.shape(),
                z.shape()
            ),
        ));
    }
    if levels.len() < 2 || n < 1 || n > levels.len() - 1 {
        return Err(Error::InvalidArgument(format!(
            "cct_loss: n = {n} out of range [1, {}]",
            levels.len().saturating_sub(1)
        )));
    }
    let t_n = levels[n - 1];
    let t_np1 = levels[n];
    let lambda = weighting(t_n, t_np1)?;

    let r_n = r.add_scaled(z, T::from_f64(t_n))?;
    let r_np1 = r.add_scaled(z, T::from_f64(t_np1))?;

    // Frozen-teacher target; no gradient flows into it.
    let target = model.g(&r_n, v, t_n, true)?;

    let mut g = Graph::new();
    let bp = bind_params(&mut g, &model.params, compute_grads);
    let rc = g.constant(&r_np1);
    let vc = g.constant(v);
    let student = g_in_graph(&mut g, &model.net_cfg, &bp, &model.sched, &rc, &vc, t_np1)?;
    let tc = g.constant(&target);
    let dist = pseudo_huber_in_graph(&mut g, &student, &tc, huber_c)?;
    let loss_t = g.scale(&dist, lambda)?;
    let loss = loss_t.item()?.to_f64();

    let grads = if compute_grads {
        let grads = g.backward(&loss_t)?;
        let mut out = Vec::with_capacity(model.params.len());
        for (name, _) in model.params.iter() {
            let handle = bp
                .handle(name)
                .expect("binding covers every parameter");
            out.push(grads.get_arc(handle)?);
        }
        Some(out)
    } else {
        None
    };

    Ok(CctLoss { loss, grads })
}
