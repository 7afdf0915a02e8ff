//! Forward noising process and the denoising objective.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn;

/// Linear-β noise schedule with cumulative products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `P` linearly spaced β values in `[beta_start, beta_end]`, `α_p = 1 − β_p`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule horizon must be positive"));
        }
        if !(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0) {
            return Err(invalid(format!(
                "betas must lie in (0, 1), got [{beta_start}, {beta_end}]"
            )));
        }
        if beta_start > beta_end {
            return Err(invalid("beta_start must not exceed beta_end"));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|p| beta_start + (beta_end - beta_start) * p as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(&betas)
    }

    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(invalid("schedule horizon must be positive"));
        }
        let mut alphas = Vec::with_capacity(betas.len());
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &b in betas {
            if !(b > 0.0 && b < 1.0) {
                return Err(invalid(format!("beta {b} outside (0, 1)")));
            }
            let a = 1.0 - b;
            acc *= a;
            alphas.push(a);
            alpha_bars.push(acc);
        }
        Ok(Self { alphas, alpha_bars })
    }

    pub fn horizon(&self) -> usize {
        self.alphas.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, p: usize) -> Result<f64> {
        self.alpha_bars
            .get(p)
            .copied()
            .ok_or_else(|| invalid(format!("timestep {p} outside [0, {})", self.horizon())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Timestep {
    Clean,
    Step(usize),
}

/// Image-space latent `[channels, height, width]` tagged with its timestep.
#[derive(Debug, Clone)]
pub struct LatentImage {
    pub data: Tensor,
    pub timestep: Timestep,
}

impl LatentImage {
    pub fn clean(data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(invalid(format!("latent must be [C, H, W], got {:?}", data.dims())));
        }
        nn::ensure_finite(&data, "latent image")?;
        Ok(Self {
            data,
            timestep: Timestep::Clean,
        })
    }

    /// Maps an RGB image in `[0, 1]` to the symmetric range `[-1, 1]`.
    pub fn from_rgb01(rgb: &Tensor) -> Result<Self> {
        Self::clean(rgb.affine(2.0, -1.0)?)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.data.dims();
        (d[0], d[1], d[2])
    }
}

/// `z_p = sqrt(ᾱ_p) z_0 + sqrt(1 − ᾱ_p) ε`. Works on any shape, batched or not.
pub fn noise_tensor(z0: &Tensor, p: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if z0.dims() != eps.dims() {
        return Err(Error::Shape {
            expected: z0.dims().to_vec(),
            got: eps.dims().to_vec(),
        });
    }
    let ab = schedule.alpha_bar(p)?;
    Ok(((z0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

pub fn forward_noise(
    z0: &LatentImage,
    p: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<LatentImage> {
    let data = noise_tensor(&z0.data, p, eps, schedule)?;
    Ok(LatentImage {
        data,
        timestep: Timestep::Step(p),
    })
}

/// Mean squared error between the true and predicted noise.
pub fn diffusion_loss(eps: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    if eps.dims() != eps_hat.dims() {
        return Err(Error::Shape {
            expected: eps.dims().to_vec(),
            got: eps_hat.dims().to_vec(),
        });
    }
    Ok((eps - eps_hat)?.sqr()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alphas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn constant_beta_products() {
        let s = NoiseSchedule::linear(3, 0.1, 0.1).unwrap();
        let want = [0.9, 0.81, 0.729];
        for (a, b) in s.alpha_bars().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
    }

    #[test]
    fn zero_noise_scales_input() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let z0 = LatentImage::clean(Tensor::new(&[[[0.3f64, -0.7]]], &Device::Cpu).unwrap()).unwrap();
        let eps = z0.data.zeros_like().unwrap();
        let zp = forward_noise(&z0, 40, &eps, &s).unwrap();
        let k = s.alpha_bar(40).unwrap().sqrt();
        let got = nn::to_f64_vec(&zp.data).unwrap();
        assert_eq!(got, vec![0.3 * k, -0.7 * k]);
        assert_eq!(zp.timestep, Timestep::Step(40));
    }

    #[test]
    fn hand_evaluated_noising() {
        let s = NoiseSchedule::from_betas(&[0.75]).unwrap();
        let z0 = Tensor::new(&[1.0f64], &Device::Cpu).unwrap();
        let eps = Tensor::new(&[1.0f64], &Device::Cpu).unwrap();
        let zp = noise_tensor(&z0, 0, &eps, &s).unwrap();
        assert!((nn::scalar(&zp).unwrap() - 1.366_025_403_784_438_6).abs() < 1e-12);
    }

    #[test]
    fn forward_noise_errors() {
        let s = NoiseSchedule::linear(4, 0.1, 0.2).unwrap();
        let z0 = LatentImage::clean(Tensor::zeros((1, 2, 2), candle_core::DType::F64, &Device::Cpu).unwrap()).unwrap();
        let bad = Tensor::zeros((1, 2, 3), candle_core::DType::F64, &Device::Cpu).unwrap();
        assert!(forward_noise(&z0, 0, &bad, &s).is_err());
        let eps = z0.data.zeros_like().unwrap();
        assert!(forward_noise(&z0, 4, &eps, &s).is_err());
    }

    #[test]
    fn loss_values() {
        let d = Device::Cpu;
        let a = Tensor::new(&[1.0f64, 1.0], &d).unwrap();
        let b = Tensor::new(&[0.0f64, 0.0], &d).unwrap();
        assert_eq!(nn::scalar(&diffusion_loss(&a, &b).unwrap()).unwrap(), 1.0);
        assert_eq!(nn::scalar(&diffusion_loss(&a, &a).unwrap()).unwrap(), 0.0);
        assert!(diffusion_loss(&a, &Tensor::new(&[0.0f64], &d).unwrap()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn alpha_bars_strictly_decrease(p in 1usize..300, lo in 1e-5f64..0.3, span in 0.0f64..0.6) {
                let hi = (lo + span).min(0.99);
                let s = NoiseSchedule::linear(p, lo, hi).unwrap();
                let mut run = 1.0;
                for (i, (&a, &ab)) in s.alphas().iter().zip(s.alpha_bars()).enumerate() {
                    prop_assert!(a > 0.0 && a < 1.0);
                    prop_assert!(ab > 0.0 && ab <= 1.0);
                    run *= a;
                    prop_assert!((run - ab).abs() < 1e-12);
                    if i > 0 {
                        prop_assert!(ab < s.alpha_bars()[i - 1]);
                    }
                }
            }

            #[test]
            fn loss_is_symmetric(xs in proptest::collection::vec(-5.0f64..5.0, 1..20), shift in -2.0f64..2.0) {
                let d = Device::Cpu;
                let a = Tensor::new(xs.as_slice(), &d).unwrap();
                let b = (&a + shift).unwrap().sin().unwrap();
                let l1 = nn::scalar(&diffusion_loss(&a, &b).unwrap()).unwrap();
                let l2 = nn::scalar(&diffusion_loss(&b, &a).unwrap()).unwrap();
                prop_assert!(l1 >= 0.0);
                prop_assert_eq!(l1, l2);
            }
        }
    }
}
