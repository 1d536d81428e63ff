use mopelab::data::{generate, SyntheticConfig};
use mopelab::encoder::EncoderConfig;
use mopelab::fusion::{FusionConfig, FusionModel, MopeSettings, PromptFlags};
use mopelab::trainer::{evaluate, train, TrainConfig};
use std::time::Instant;

fn run(k: usize, l: usize, flags: PromptFlags, lr: f64, epochs: usize, seed: u64, bs: usize) {
    let ds = generate(&SyntheticConfig::default()).unwrap();
    let cfg = FusionConfig {
        main: EncoderConfig { num_layers: 2, d_model: 32, num_heads: 2, d_ff: 64, seq_len: 16, vocab: Some(16) },
        complementary: EncoderConfig { num_layers: 1, d_model: 8, num_heads: 2, d_ff: 16, seq_len: 3, vocab: None },
        mope: MopeSettings { experts: k, prompt_len: l, ..Default::default() },
        prompts: flags,
        ..Default::default()
    };
    let mut model = FusionModel::new(&cfg, 16, seed).unwrap();
    let tc = TrainConfig { epochs, batch_size: bs, lr_main: lr, lr_complementary: lr, seed, ..Default::default() };
    let t = Instant::now();
    let out = train(&mut model, &ds.train, &ds.val, &tc).unwrap();
    let test = evaluate(&mut model, &ds.test, 64, 0.01).unwrap();
    let vals: Vec<String> = out.metrics.iter().filter(|r| r.split == "val").map(|r| format!("{:.3}", r.accuracy)).collect();
    println!("k={k} l={l} bs={bs} lr={lr}: test={:.3} ({:.1}s/ep) val: {}",
        test.accuracy, t.elapsed().as_secs_f64()/epochs as f64, vals.join(" "));
}

fn main() {
    let full = PromptFlags::default();
    run(8, 4, full, 2e-2, 2, 1, 32);
    run(8, 4, full, 2e-2, 2, 1, 64);
    run(1, 37, PromptFlags { static_prompt: true, dynamic_prompt: false, mapped_prompt: false }, 2e-2, 2, 1, 32);
}
