use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::Tensor;
use crate::rng::{rng_from, stream};

/// Forward-diffusion noise schedule. `alpha_bar[t]` is the cumulative product of
/// `1 - beta` up to and including step `t` (zero-based, as in the reference
/// latent-diffusion schedulers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return invalid("noise schedule needs at least one step");
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return invalid(format!("beta {b} outside (0, 1)"));
        }
        let alpha_bar = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bar })
    }

    /// Betas linear in sqrt-space between `start` and `end`.
    pub fn scaled_linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps < 2 {
            return invalid("scaled-linear schedule needs at least two steps");
        }
        let (a, b) = (start.sqrt(), end.sqrt());
        let betas = (0..steps)
            .map(|i| {
                let v = a + (b - a) * i as f64 / (steps - 1) as f64;
                v * v
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps < 2 {
            return invalid("linear schedule needs at least two steps");
        }
        Self::from_betas(
            (0..steps)
                .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
                .collect(),
        )
    }

    /// The 1000-step scaled-linear schedule used by Stable Diffusion v1.x.
    pub fn stable_diffusion() -> Self {
        Self::scaled_linear(1000, 0.00085, 0.012).expect("valid built-in schedule")
    }

    /// Parses a diffusers `scheduler_config.json`.
    pub fn from_scheduler_config(json: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            num_train_timesteps: usize,
            beta_start: f64,
            beta_end: f64,
            beta_schedule: String,
        }
        let raw: Raw = serde_json::from_str(json)?;
        match raw.beta_schedule.as_str() {
            "scaled_linear" => Self::scaled_linear(raw.num_train_timesteps, raw.beta_start, raw.beta_end),
            "linear" => Self::linear(raw.num_train_timesteps, raw.beta_start, raw.beta_end),
            other => Err(Error::Provider(format!("unsupported beta schedule `{other}`"))),
        }
    }

    pub fn num_timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn hash(&self) -> String {
        let bytes: Vec<u8> = self.betas.iter().flat_map(|b| b.to_le_bytes()).collect();
        crate::nn::models::sha256_hex(&bytes)
    }
}

/// `sqrt(alpha_bar_t) * latent + sqrt(1 - alpha_bar_t) * noise`.
///
/// When `noise` is `None` a standard-normal draw seeded by `seed` is used.
pub fn add_noise(latent: &Tensor, t: usize, schedule: &NoiseSchedule, noise: Option<&Tensor>, seed: u64) -> Result<Tensor> {
    if t < 1 || t >= schedule.num_timesteps() {
        return invalid(format!("timestep {t} outside [1, {})", schedule.num_timesteps()));
    }
    let drawn;
    let eps = match noise {
        Some(n) => {
            if n.shape != latent.shape {
                return invalid(format!("noise shape {:?} differs from latent {:?}", n.shape, latent.shape));
            }
            &n.data
        }
        None => {
            let mut rng = rng_from(seed, &[stream::NOISE]);
            drawn = (0..latent.data.len())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect::<Vec<f64>>();
            &drawn
        }
    };
    let ab = schedule.alpha_bar(t);
    let (signal, spread) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Tensor {
        shape: latent.shape,
        data: latent.data.iter().zip(eps).map(|(l, e)| signal * l + spread * e).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bar_strictly_decreasing_in_unit_interval() {
        let s = NoiseSchedule::stable_diffusion();
        assert_eq!(s.num_timesteps(), 1000);
        assert!((s.betas()[0] - 0.00085).abs() < 1e-15);
        assert!((s.betas()[999] - 0.012).abs() < 1e-15);
        for w in s.alpha_bars().windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn zero_noise_scales_latent() {
        let s = NoiseSchedule::stable_diffusion();
        let l = Tensor::from_vec([1, 2, 1, 1], vec![1.5, -2.0]).unwrap();
        let out = add_noise(&l, 150, &s, Some(&Tensor::zeros(l.shape)), 0).unwrap();
        let k = s.alpha_bar(150).sqrt();
        assert_eq!(out.data, vec![k * 1.5, k * -2.0]);
    }

    #[test]
    fn forced_noise_interpolates_exactly() {
        let s = NoiseSchedule::stable_diffusion();
        let l = Tensor::from_vec([1, 3, 1, 1], vec![0.3, 0.1, -0.2]).unwrap();
        let e = Tensor::from_vec([1, 3, 1, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let out = add_noise(&l, 400, &s, Some(&e), 0).unwrap();
        let ab = s.alpha_bar(400);
        let resid: Vec<f64> = out.data.iter().zip(&l.data).map(|(o, l)| o - ab.sqrt() * l).collect();
        let ratio = resid.iter().map(|r| r * r).sum::<f64>().sqrt() / e.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((ratio - (1.0 - ab).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn timestep_bounds_and_shape_checks() {
        let s = NoiseSchedule::stable_diffusion();
        let l = Tensor::zeros([1, 4, 4, 4]);
        assert!(add_noise(&l, 0, &s, None, 0).is_err());
        assert!(add_noise(&l, 1000, &s, None, 0).is_err());
        assert!(add_noise(&l, 10, &s, Some(&Tensor::zeros([1, 4, 2, 2])), 0).is_err());
        assert_eq!(add_noise(&l, 10, &s, None, 5).unwrap(), add_noise(&l, 10, &s, None, 5).unwrap());
    }

    #[test]
    fn scheduler_config_parses() {
        let json = r#"{"beta_start":0.00085,"beta_end":0.012,"beta_schedule":"scaled_linear","num_train_timesteps":1000,"clip_sample":false}"#;
        assert_eq!(NoiseSchedule::from_scheduler_config(json).unwrap(), NoiseSchedule::stable_diffusion());
        let bad = r#"{"beta_start":0.1,"beta_end":0.2,"beta_schedule":"cosine","num_train_timesteps":10}"#;
        assert!(NoiseSchedule::from_scheduler_config(bad).is_err());
    }
}
