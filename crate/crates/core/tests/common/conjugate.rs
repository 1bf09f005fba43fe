//! IVON on the separable quadratic problem with λ = N, compared with the
//! closed-form conjugate posterior.

use ivon_lora::optim::{GaussianPosterior, IvonHyper, Optimizer};
use ivon_lora::rng::StreamRng;
use ivon_lora_oracles::{exact_gaussian_posterior, ConjugateResult, QuadraticProblem};

pub struct ConjugateRun {
    pub exact: ConjugateResult,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Analytic variational objective `E_q ℓ + KL/λ` after every step.
    pub objective: Vec<f64>,
}

impl ConjugateRun {
    pub fn max_mean_error(&self) -> f64 {
        self.mean.iter().zip(&self.exact.mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn max_relative_variance_error(&self) -> f64 {
        self.variance
            .iter()
            .zip(&self.exact.variance)
            .map(|(a, b)| ((a - b) / b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn problem() -> QuadraticProblem {
    QuadraticProblem::new(vec![0.5, 1.0, 1.5, 2.0, 3.0], vec![1.0, -0.5, 0.25, 2.0, -1.5], 10_000)
}

/// Hyperparameters for the certificate: λ = N, δ = 1/(N v₀) so the prior is
/// `N(0, v₀)`, full-batch gradients.
pub fn hyper(prob: &QuadraticProblem, v0: f64, steps: u64) -> IvonHyper {
    let n = prob.n as f64;
    IvonHyper {
        lr: 0.1,
        beta1: 0.9,
        beta2: 1.0 - 1e-3,
        ess: n,
        weight_decay: 1.0 / (n * v0),
        h0: 1.0,
        clip_radius: 1e3,
        total_steps: steps,
        mc_samples: 8,
    }
}

pub fn run(steps: u64, seed: u64) -> ConjugateRun {
    let prob = problem();
    let v0 = 1.0;
    let hyper = hyper(&prob, v0, steps);
    let mut post = GaussianPosterior::new(vec![0.0; prob.dim()], hyper.clone()).unwrap();
    let mut rng = StreamRng::new(seed, "conjugate");
    let mut objective = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        for _ in 0..post.mc_samples() {
            let theta = post.draw(&mut rng).unwrap().to_vec();
            post.accumulate(&prob.grad(&theta)).unwrap();
        }
        post.apply().unwrap();
        objective.push(analytic_objective(&prob, post.mean(), &post.variance(), v0, hyper.ess));
    }
    ConjugateRun {
        exact: exact_gaussian_posterior(&prob, v0),
        mean: post.mean().to_vec(),
        variance: post.variance(),
        objective,
    }
}

/// `E_q ℓ + KL(q‖p)/λ` in closed form for the separable quadratic.
pub fn analytic_objective(prob: &QuadraticProblem, m: &[f64], v: &[f64], v0: f64, lambda: f64) -> f64 {
    let mut el = prob.loss(m);
    let mut kl = 0.0;
    for i in 0..m.len() {
        el += prob.curvature[i] * v[i] / 2.0;
        kl += 0.5 * ((v[i] + m[i] * m[i]) / v0 - 1.0 - (v[i] / v0).ln());
    }
    el + kl / lambda
}

/// Means over consecutive windows of `w` values.
pub fn window_means(xs: &[f64], w: usize) -> Vec<f64> {
    xs.chunks(w).filter(|c| c.len() == w).map(|c| c.iter().sum::<f64>() / w as f64).collect()
}
