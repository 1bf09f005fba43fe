//! Reference implementations used only by tests. Nothing here calls into the
//! library under test; every formula is written out again from scratch.

use rand::Rng;
use rand_distr::StandardNormal;

/// Separable quadratic loss `ℓ(θ) = (1/N) Σ_n Σ_i a_i (θ_i − c_i − d_ni)² / 2`
/// with per-example offsets `d_ni` that average to zero, so the full-batch
/// curvature is `a_i` and the full-batch optimum is `c_i`.
#[derive(Clone, Debug)]
pub struct QuadraticProblem {
    pub curvature: Vec<f64>,
    pub optimum: Vec<f64>,
    pub n: usize,
    /// Spread of the per-example optima around `optimum`.
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConjugateResult {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl QuadraticProblem {
    pub fn new(curvature: Vec<f64>, optimum: Vec<f64>, n: usize) -> Self {
        assert_eq!(curvature.len(), optimum.len());
        assert!(curvature.iter().all(|&a| a > 0.0));
        Self {
            curvature,
            optimum,
            n,
            spread: 0.5,
        }
    }

    pub fn dim(&self) -> usize {
        self.curvature.len()
    }

    /// Offset of example `n` in dimension `i`; pairs of examples cancel.
    fn offset(&self, n: usize, i: usize) -> f64 {
        if self.n % 2 == 1 && n == self.n - 1 {
            return 0.0;
        }
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        sign * self.spread * (1.0 + ((n / 2 + i) % 3) as f64)
    }

    pub fn example_loss(&self, n: usize, theta: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..self.dim() {
            let r = theta[i] - self.optimum[i] - self.offset(n, i);
            total += self.curvature[i] * r * r / 2.0;
        }
        total
    }

    /// Full-batch average loss.
    pub fn loss(&self, theta: &[f64]) -> f64 {
        let mut total = 0.0;
        for n in 0..self.n {
            total += self.example_loss(n, theta);
        }
        total / self.n as f64
    }

    /// Full-batch gradient; the offsets cancel so this is `a (θ − c)`.
    pub fn grad(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.curvature[i] * (theta[i] - self.optimum[i]))
            .collect()
    }
}

/// Posterior under prior `N(0, v0 I)` with the loss scaled by `N`:
/// precision `N a_i + 1/v0`, mean `N a_i c_i / precision`.
pub fn exact_gaussian_posterior(prob: &QuadraticProblem, v0: f64) -> ConjugateResult {
    assert!(v0 > 0.0);
    let n = prob.n as f64;
    let mut mean = Vec::new();
    let mut variance = Vec::new();
    for i in 0..prob.dim() {
        let precision = n * prob.curvature[i] + 1.0 / v0;
        mean.push(n * prob.curvature[i] * prob.optimum[i] / precision);
        variance.push(1.0 / precision);
    }
    ConjugateResult { mean, variance }
}

/// Central differences `(f(θ + ε e_i) − f(θ − ε e_i)) / 2ε`.
pub fn finite_difference_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, theta: &[f64], eps: f64) -> Vec<f64> {
    assert!(eps > 0.0);
    let mut x = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = f(&x);
        x[i] = orig - eps;
        let down = f(&x);
        x[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    out
}

/// KL(N(m, diag v) || N(0, v0 I)), summed per coordinate.
pub fn gaussian_kl(mean: &[f64], var: &[f64], v0: f64) -> f64 {
    let mut kl = 0.0;
    for (m, v) in mean.iter().zip(var) {
        // ½ [ tr(Σ0⁻¹Σ) + μᵀΣ0⁻¹μ − k + ln det Σ0 − ln det Σ ], per coordinate
        kl += 0.5 * (v / v0 + m * m / v0 - 1.0 + v0.ln() - v.ln());
    }
    kl
}

#[derive(Clone, Debug)]
pub struct McObjective {
    /// Monte Carlo estimate of the expected loss plus `KL / λ`.
    pub value: f64,
    pub expected_loss: f64,
    /// Standard error of the expected-loss term.
    pub std_error: f64,
    pub kl: f64,
}

/// `(1/S) Σ_s ℓ(θ_s) + KL(q || p) / λ` with `θ_s ~ N(mean, diag var)`.
pub fn mc_objective<F: FnMut(&[f64]) -> f64, R: Rng>(
    mean: &[f64],
    var: &[f64],
    mut loss: F,
    v0: f64,
    lambda: f64,
    num_samples: usize,
    rng: &mut R,
) -> McObjective {
    assert!(num_samples >= 1);
    let mut values = Vec::with_capacity(num_samples);
    let mut theta = vec![0.0; mean.len()];
    for _ in 0..num_samples {
        for i in 0..mean.len() {
            let z: f64 = rng.sample(StandardNormal);
            theta[i] = mean[i] + var[i].sqrt() * z;
        }
        values.push(loss(&theta));
    }
    let s = num_samples as f64;
    let avg = values.iter().sum::<f64>() / s;
    let std_error = if num_samples > 1 {
        let ss: f64 = values.iter().map(|x| (x - avg) * (x - avg)).sum();
        (ss / (s - 1.0) / s).sqrt()
    } else {
        0.0
    };
    let kl = gaussian_kl(mean, var, v0);
    McObjective {
        value: avg + kl / lambda,
        expected_loss: avg,
        std_error,
        kl,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BruteMetrics {
    pub acc: f64,
    pub ece: f64,
    pub nll: f64,
    pub brier: f64,
    pub bin_counts: Vec<usize>,
}

/// Loop-by-loop recomputation of accuracy, ECE, NLL and Brier. `probs` is
/// row-major `n × k`.
pub fn brute_force_metrics(probs: &[f64], k: usize, labels: &[usize], num_bins: usize) -> BruteMetrics {
    let n = labels.len();
    assert!(n > 0 && num_bins > 0 && probs.len() == n * k);
    let mut correct = 0usize;
    let mut nll = 0.0;
    let mut brier = 0.0;
    let mut bin_counts = vec![0usize; num_bins];
    let mut bin_conf = vec![0.0; num_bins];
    let mut bin_hits = vec![0.0; num_bins];
    for row in 0..n {
        let p = &probs[row * k..row * k + k];
        let mut pred = 0;
        let mut conf = p[0];
        for j in 1..k {
            if p[j] > conf {
                conf = p[j];
                pred = j;
            }
        }
        let hit = pred == labels[row];
        if hit {
            correct += 1;
        }
        let mut b = 0;
        while b + 1 < num_bins && conf >= (b + 1) as f64 / num_bins as f64 {
            b += 1;
        }
        bin_counts[b] += 1;
        bin_conf[b] += conf;
        if hit {
            bin_hits[b] += 1.0;
        }
        let mut pt = p[labels[row]];
        if pt < 1e-12 {
            pt = 1e-12;
        }
        nll -= pt.ln();
        for j in 0..k {
            let target = if j == labels[row] { 1.0 } else { 0.0 };
            brier += (p[j] - target).powi(2);
        }
    }
    let mut ece = 0.0;
    for b in 0..num_bins {
        if bin_counts[b] > 0 {
            let c = bin_counts[b] as f64;
            ece += c / n as f64 * (bin_hits[b] / c - bin_conf[b] / c).abs();
        }
    }
    BruteMetrics {
        acc: correct as f64 / n as f64,
        ece,
        nll: nll / n as f64,
        brier: brier / n as f64,
        bin_counts,
    }
}

/// Plain AdamW with decoupled weight decay, linear decay to zero over
/// `total` steps, and bias correction. Returns the parameter trajectory.
pub fn reference_adamw(
    init: &[f64],
    grads: &[Vec<f64>],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    wd: f64,
    total: usize,
) -> Vec<Vec<f64>> {
    let mut p = init.to_vec();
    let mut m = vec![0.0; p.len()];
    let mut v = vec![0.0; p.len()];
    let mut trace = Vec::new();
    for (t, g) in grads.iter().enumerate() {
        let a = lr * (1.0 - t as f64 / total as f64);
        let step = (t + 1) as i32;
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mhat = m[i] / (1.0 - beta1.powi(step));
            let vhat = v[i] / (1.0 - beta2.powi(step));
            p[i] = p[i] * (1.0 - a * wd) - a * mhat / (vhat.sqrt() + eps);
        }
        trace.push(p.clone());
    }
    trace
}
