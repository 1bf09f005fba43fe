use ivon_lora::predict::{PredictionMode, PredictiveBatch};
use rand::rngs::StdRng;
use rand::Rng;

/// Random predictive rows: a mix of uniform, one-hot (exact ties and
/// certainties), mild and peaked softmax rows, with uniform labels.
pub fn random_batch(rng: &mut StdRng, n: usize, k: usize) -> PredictiveBatch {
    let mut probs = Vec::with_capacity(n * k);
    for _ in 0..n {
        let style = rng.gen_range(0..4);
        let row: Vec<f64> = match style {
            0 => vec![1.0 / k as f64; k],
            1 => {
                let mut r = vec![0.0; k];
                r[rng.gen_range(0..k)] = 1.0;
                r
            }
            _ => {
                let t = if style == 2 { 1.0 } else { 6.0 };
                let z: Vec<f64> = (0..k).map(|_| (t * rng.gen_range(-1.0..1.0f64)).exp()).collect();
                let s: f64 = z.iter().sum();
                z.into_iter().map(|v| v / s).collect()
            }
        };
        probs.extend(row);
    }
    let labels = (0..n).map(|_| rng.gen_range(0..k)).collect();
    PredictiveBatch::new(probs, k, labels, PredictionMode::Mean).unwrap()
}
