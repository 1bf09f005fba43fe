use std::path::Path;

use ivon_lora::harness::{pretrain, ExperimentConfig};

/// Seconds-scale experiment: small model, short schedules, real pipeline.
pub fn config(dir: &Path, optimizer: &str) -> ExperimentConfig {
    let text = format!(
        r#"
seed = 3
precision = "f64"
out_dir = "{out}"

[task]
pretrain_size = 400
train_size = 48
val_size = 32
test_size = 64
signal = 0.3

[model]
vocab_size = 12
seq_len = 6
embed_dim = 8
num_heads = 2
num_layers = 1
num_classes = 3
mlp_dim = 12

[model.lora]
rank = 2
alpha = 4.0
dropout = 0.1

[pretrain]
steps = 60
batch_size = 16
lr = 3e-3

[finetune]
steps = 40
batch_size = 8
eval_interval = 10
checkpoint_interval = 20
base_checkpoint = "{base}"

[optimizer]
kind = "{optimizer}"

[optimizer.adamw]
lr = 1e-2

[optimizer.ivon]
lr = 0.1
ess = 1000.0
h0 = 0.1

[eval]
samples = 4
modes = ["mean", "ensemble", "mc_dropout"]
tau_grid = [0.0, 0.5, 1.0]
"#,
        out = dir.join("run").display(),
        base = dir.join("base.ckpt").display(),
    );
    ExperimentConfig::from_toml_str(&text).expect("tiny config")
}

/// Config plus a pretrained base checkpoint under `dir`.
pub fn with_base(dir: &Path, optimizer: &str) -> ExperimentConfig {
    let cfg = config(dir, optimizer);
    if !cfg.finetune.base_checkpoint.exists() {
        pretrain::<f64>(&cfg, &cfg.finetune.base_checkpoint).expect("tiny pretrain");
    }
    cfg
}

/// Checkpoint bytes with the run-specific meta (output directory, wall-clock
/// timings) removed, for comparing runs written to different places.
pub fn canonical_checkpoint(path: &Path) -> Vec<u8> {
    let mut c = ivon_lora::harness::Checkpoint::load(path).expect("checkpoint");
    let meta = c.meta.as_object_mut().expect("meta object");
    meta.remove("timings");
    if let Some(cfg) = meta.get_mut("config").and_then(|v| v.as_object_mut()) {
        cfg.remove("out_dir");
    }
    c.to_bytes()
}
