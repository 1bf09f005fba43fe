use ivon_lora::optim::{GaussianPosterior, IvonHyper};
use ivon_lora::rng::StreamRng;

pub struct MonteCarlo {
    pub mean: f64,
    pub std_error: f64,
}

/// Mean and standard error of ĥ over `n` posterior draws for the 1-D loss
/// `curvature/2 · (θ − 1)²`.
pub fn hessian_estimates(curvature: f64, n: usize, seed: u64) -> MonteCarlo {
    let post = GaussianPosterior::new(
        vec![0.4],
        IvonHyper {
            ess: 50.0,
            weight_decay: 0.0,
            h0: 2.0,
            ..IvonHyper::default()
        },
    )
    .unwrap();
    let mut rng = StreamRng::new(seed, "unbiased");
    let est: Vec<f64> = (0..n)
        .map(|_| {
            let theta = post.sample(1.0, &mut rng).unwrap();
            let grad = [curvature * (theta[0] - 1.0)];
            post.hessian_estimate(&grad, &theta)[0]
        })
        .collect();
    let nf = n as f64;
    let mean = est.iter().sum::<f64>() / nf;
    let sd = (est.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
    MonteCarlo {
        mean,
        std_error: sd / nf.sqrt(),
    }
}
