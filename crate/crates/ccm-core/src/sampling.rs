//! Single-step conditional generation: draw noise at the maximal level,
//! evaluate the consistency function once with the condition attached.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::consistency::ConsistencyModel;
use crate::error::{Error, Result};
use crate::parallel::{self, Parallelism};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct SampleRequest<'a, T: Element> {
    /// Condition image `[C, H, W]` in `[-1, 1]`.
    pub v: &'a Tensor<T>,
    pub seed: u64,
    /// Clamp the generated image to `[-1, 1]` (on by default; outputs feed
    /// 8-bit encoding).
    pub clamp: bool,
}

impl<'a, T: Element> SampleRequest<'a, T> {
    pub fn new(v: &'a Tensor<T>, seed: u64) -> Self {
        SampleRequest {
            v,
            seed,
            clamp: true,
        }
    }
}

fn check_condition<T: Element>(model: &ConsistencyModel<T>, v: &Tensor<T>) -> Result<()> {
    let c = model.net_cfg.out_channels;
    if v.shape().len() != 3 || v.shape()[0] != c {
        return Err(Error::shape(
            "sample",
            format!("condition must be [{c}, H, W], got {:?}", v.shape()),
        ));
    }
    model.net_cfg.check_extents(v.shape()[1], v.shape()[2])
}

/// Generate one image: `r = g(T * z, v, T)` with `z ~ N(0, I)` drawn from the
/// request seed. Deterministic per seed; the model is untouched.
pub fn sample_single_step<T: Element>(
    model: &ConsistencyModel<T>,
    req: &SampleRequest<'_, T>,
) -> Result<Tensor<T>> {
    check_condition(model, req.v)?;
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let z = Tensor::<T>::randn(req.v.shape(), &mut rng);
    let sigma_max = model.sched.sigma_max;
    let r_hat = Tensor::zeros(req.v.shape()).add_scaled(&z, T::from_f64(sigma_max))?;
    let out = model.g(&r_hat, req.v, sigma_max, false)?;
    Ok(if req.clamp {
        out.clamp(T::from_f64(-1.0), T::ONE)
    } else {
        out
    })
}

/// Generate one image per condition; element `i` uses seed `seed + i`, so a
/// batch reproduces the corresponding single calls exactly.
pub fn sample_batch<T: Element>(
    model: &ConsistencyModel<T>,
    conditions: &[Tensor<T>],
    seed: u64,
    clamp: bool,
    par: Parallelism,
) -> Result<Vec<Tensor<T>>> {
    if conditions.is_empty() {
        return Ok(Vec::new());
    }
    let shape = conditions[0].shape().to_vec();
    for v in conditions {
        if v.shape() != shape.as_slice() {
            return Err(Error::shape(
                "sample_batch",
                format!("mixed extents: {:?} vs {:?}", v.shape(), shape),
            ));
        }
    }
    parallel::map_indexed(conditions, par, |i, v| {
        let req = SampleRequest {
            v,
            seed: seed.wrapping_add(i as u64),
            clamp,
        };
        sample_single_step(model, &req)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::UNetConfig;
    use crate::schedule::NoiseSchedule;
    use rand::SeedableRng;

    fn model() -> ConsistencyModel<f32> {
        let cfg = UNetConfig {
            out_channels: 3,
            base_width: 8,
            channel_mults: vec![1, 2],
            depth: 1,
            time_embed_dim: 8,
        };
        ConsistencyModel::new(cfg, NoiseSchedule::default(), 5).unwrap()
    }

    fn condition(seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::<f32>::randn(&[3, 8, 8], &mut rng).clamp(-1.0, 1.0)
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let m = model();
        let v = condition(1);
        let a = sample_single_step(&m, &SampleRequest::new(&v, 9)).unwrap();
        let b = sample_single_step(&m, &SampleRequest::new(&v, 9)).unwrap();
        assert_eq!(a.data(), b.data());
        let c = sample_single_step(&m, &SampleRequest::new(&v, 10)).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn untrained_model_is_scaled_clamped_noise() {
        let m = model();
        let v = condition(2);
        let out = sample_single_step(&m, &SampleRequest::new(&v, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::<f32>::randn(&[3, 8, 8], &mut rng);
        let (a_skip, _) = m.sched.scalings(m.sched.sigma_max).unwrap();
        for (&o, &zv) in out.data().iter().zip(z.data()) {
            let expect = ((a_skip as f32) * (m.sched.sigma_max as f32 * zv)).clamp(-1.0, 1.0);
            assert!((o - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn output_shape_and_range() {
        let m = model();
        let v = condition(4);
        let out = sample_single_step(&m, &SampleRequest::new(&v, 1)).unwrap();
        assert_eq!(out.shape(), v.shape());
        assert!(out.data().iter().all(|&x| (-1.0..=1.0).contains(&x)));
    }

    #[test]
    fn sampling_does_not_mutate_parameters() {
        let m = model();
        let before: Vec<Vec<f32>> = m.params.iter().map(|(_, t)| t.to_vec()).collect();
        let v = condition(5);
        let _ = sample_single_step(&m, &SampleRequest::new(&v, 1)).unwrap();
        let after: Vec<Vec<f32>> = m.params.iter().map(|(_, t)| t.to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn batch_matches_single_and_handles_edges() {
        let m = model();
        let v0 = condition(6);
        let v1 = condition(7);
        let batch = sample_batch(
            &m,
            &[v0.clone(), v1.clone()],
            100,
            true,
            Parallelism::Sequential,
        )
        .unwrap();
        let single0 = sample_single_step(&m, &SampleRequest::new(&v0, 100)).unwrap();
        let single1 = sample_single_step(&m, &SampleRequest::new(&v1, 101)).unwrap();
        assert_eq!(batch[0].data(), single0.data());
        assert_eq!(batch[1].data(), single1.data());

        // Identical conditions, different derived seeds: outputs differ.
        let twice = sample_batch(&m, &[v0.clone(), v0.clone()], 7, true, Parallelism::Rayon)
            .unwrap();
        assert_ne!(twice[0].data(), twice[1].data());

        let empty: Vec<Tensor<f32>> = Vec::new();
        assert!(sample_batch(&m, &empty, 0, true, Parallelism::Rayon)
            .unwrap()
            .is_empty());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let odd = Tensor::<f32>::randn(&[3, 16, 16], &mut rng).clamp(-1.0, 1.0);
        assert!(sample_batch(&m, &[v0, odd], 0, true, Parallelism::Rayon).is_err());
    }

    #[test]
    fn incompatible_extents_are_rejected() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bad = Tensor::<f32>::randn(&[3, 5, 5], &mut rng).clamp(-1.0, 1.0);
        assert!(sample_single_step(&m, &SampleRequest::new(&bad, 0)).is_err());
        let wrong_c = Tensor::<f32>::randn(&[1, 8, 8], &mut rng).clamp(-1.0, 1.0);
        assert!(sample_single_step(&m, &SampleRequest::new(&wrong_c, 0)).is_err());
    }
}
