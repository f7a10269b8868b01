use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{AgentError, ACTION_DIM};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuParams {
    pub theta: f64,
    pub sigma: f64,
    pub mu: f64,
    pub dt: f64,
}

impl Default for OuParams {
    fn default() -> Self {
        Self {
            theta: 0.15,
            sigma: 0.2,
            mu: 0.0,
            dt: 1.0,
        }
    }
}

impl OuParams {
    pub fn validate(&self) -> Result<(), AgentError> {
        if !(self.theta > 0.0 && self.sigma >= 0.0 && self.dt > 0.0 && self.mu.is_finite()) {
            return Err(AgentError::InvalidConfig(format!("OU parameters {self:?}")));
        }
        Ok(())
    }

    /// Stationary variance of the discrete recursion,
    /// `σ²·dt / (1 − (1 − θ·dt)²)`.
    pub fn stationary_variance(&self) -> f64 {
        let rho = 1.0 - self.theta * self.dt;
        self.sigma * self.sigma * self.dt / (1.0 - rho * rho)
    }
}

/// Discrete Ornstein–Uhlenbeck process, one independent channel per action
/// component.
#[derive(Debug, Clone)]
pub struct OuNoise {
    pub params: OuParams,
    pub state: [f64; ACTION_DIM],
    rng: ChaCha8Rng,
}

impl OuNoise {
    pub fn new(params: OuParams, seed: u64) -> Self {
        Self {
            params,
            state: [params.mu; ACTION_DIM],
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Back to the mean; the random stream continues.
    pub fn reset(&mut self) {
        self.state = [self.params.mu; ACTION_DIM];
    }

    /// `x ← x + θ(μ − x)dt + σ√dt·ξ`.
    pub fn sample(&mut self) -> [f64; ACTION_DIM] {
        let OuParams { theta, sigma, mu, dt } = self.params;
        let sq = dt.sqrt();
        for x in &mut self.state {
            let xi: f64 = StandardNormal.sample(&mut self.rng);
            *x += theta * (mu - *x) * dt + sigma * sq * xi;
        }
        self.state
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_at_mean_is_fixed_point() {
        let mut n = OuNoise::new(OuParams { sigma: 0.0, mu: 0.3, ..Default::default() }, 1);
        for _ in 0..100 {
            assert_eq!(n.sample(), [0.3; 3]);
        }
    }

    #[test]
    fn full_decay_in_one_step() {
        let p = OuParams { theta: 1.0, sigma: 0.0, mu: 0.0, dt: 1.0 };
        let mut n = OuNoise::new(p, 1);
        n.state = [0.5; 3];
        assert_eq!(n.sample(), [0.0; 3]);
    }

    #[test]
    fn lag_one_autocorrelation_and_variance() {
        let p = OuParams::default();
        let mut n = OuNoise::new(p, 42);
        for _ in 0..1000 {
            n.sample();
        }
        let xs: Vec<f64> = (0..100_000).map(|_| n.sample()[0]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        let cov = xs.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / (xs.len() - 1) as f64;
        let rho = cov / var;
        let expected = 1.0 - p.theta * p.dt;
        assert!((rho - expected).abs() < 0.02 * expected, "rho {rho}");
        let v_expected = p.stationary_variance();
        assert!((var - v_expected).abs() < 0.05 * v_expected, "var {var} vs {v_expected}");
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = OuNoise::new(OuParams::default(), 5);
        let mut b = OuNoise::new(OuParams::default(), 5);
        for _ in 0..10 {
            assert_eq!(a.sample(), b.sample());
        }
    }
}
