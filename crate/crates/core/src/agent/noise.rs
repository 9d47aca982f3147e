use rand::Rng;
use rand_distr::StandardNormal;

/// Discrete Ornstein-Uhlenbeck process
/// `n_k = (1 − μ T_s) n_{k−1} + σ √T_s N(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuNoise {
    pub n: f64,
    /// Mean reversion rate (1/s).
    pub mu: f64,
    /// Diffusion factor; annealed by the trainer.
    pub sigma: f64,
    pub ts: f64,
}

impl OuNoise {
    pub fn new(mu: f64, sigma: f64, ts: f64) -> Self {
        Self { n: 0.0, mu, sigma, ts }
    }

    /// Advances one sample. The normal draw is taken even at `σ = 0` so the
    /// random stream stays aligned across schedules.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.n = (1.0 - self.mu * self.ts) * self.n + self.sigma * self.ts.sqrt() * z;
        self.n
    }

    /// Variance of the stationary AR(1) law.
    pub fn stationary_variance(&self) -> f64 {
        let phi = 1.0 - self.mu * self.ts;
        self.sigma * self.sigma * self.ts / (1.0 - phi * phi)
    }
}
