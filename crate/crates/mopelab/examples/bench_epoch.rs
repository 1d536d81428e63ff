use mopelab::data::{generate, Dataset, SyntheticConfig};
use mopelab::encoder::EncoderConfig;
use mopelab::fusion::{FusionConfig, FusionModel, MopeSettings, PromptFlags};
use mopelab::report::routing_report;
use mopelab::trainer::{evaluate, train, TrainConfig};
use std::time::Instant;

fn run(
    ds: &Dataset,
    tag: &str,
    k: usize,
    l: usize,
    flags: PromptFlags,
    imp_weight: f64,
    with_val: bool,
    seed: u64,
) {
    let cfg = FusionConfig {
        main: EncoderConfig {
            num_layers: 2,
            d_model: 32,
            num_heads: 2,
            d_ff: 64,
            seq_len: 16,
            vocab: Some(16),
        },
        complementary: EncoderConfig {
            num_layers: 1,
            d_model: 8,
            num_heads: 2,
            d_ff: 16,
            seq_len: 3,
            vocab: None,
        },
        mope: MopeSettings {
            experts: k,
            prompt_len: l,
            ..Default::default()
        },
        prompts: flags,
        ..Default::default()
    };
    let mut model = FusionModel::new(&cfg, 16, seed).unwrap();
    let epochs = 20usize;
    let tc = TrainConfig {
        epochs,
        batch_size: 32,
        lr_main: 2e-2,
        lr_complementary: 2e-2,
        imp_weight,
        seed,
        ..Default::default()
    };
    let empty: Vec<_> = Vec::new();
    let val = if with_val { &ds.val } else { &empty };
    let t = Instant::now();
    let out = train(&mut model, &ds.train, val, &tc).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let test = evaluate(&mut model, &ds.test, 64, imp_weight).unwrap();
    let routing = if flags.dynamic_prompt {
        let rep = routing_report(&mut model, &ds.val, 64, 3).unwrap();
        let cv: f64 = rep.layers.iter().map(|l| l.cv2.sqrt()).sum::<f64>() / rep.layers.len() as f64;
        let ms = rep
            .layers
            .iter()
            .map(|l| l.max_share)
            .fold(0.0f64, f64::max);
        format!(" cv={cv:.3} max_share={ms:.3}")
    } else {
        String::new()
    };
    let vals: Vec<String> = out
        .metrics
        .iter()
        .filter(|r| r.split == "val")
        .map(|r| format!("{:.3}", r.accuracy))
        .collect();
    println!(
        "{tag} k={k} l={l} imp={imp_weight} seed={seed}: test={:.3} total={:.0}s ({:.1}s/ep){} val: {}",
        test.accuracy,
        secs,
        secs / epochs as f64,
        routing,
        vals.join(" ")
    );
}

fn main() {
    let ds = generate(&SyntheticConfig::default()).unwrap();
    let full = PromptFlags::default();
    let stat = PromptFlags {
        static_prompt: true,
        dynamic_prompt: false,
        mapped_prompt: false,
    };
    let dynamic = PromptFlags {
        static_prompt: false,
        dynamic_prompt: true,
        mapped_prompt: false,
    };
    let mapped = PromptFlags {
        static_prompt: false,
        dynamic_prompt: false,
        mapped_prompt: true,
    };
    for seed in [1, 2, 3] {
        run(&ds, "c5-mope", 8, 2, full, 0.01, true, seed);
        run(&ds, "c5-mope", 4, 2, full, 0.01, true, seed);
        run(&ds, "c5-mope", 2, 2, full, 0.01, true, seed);
        run(&ds, "c5-van", 1, 19, stat, 0.01, true, seed);
        run(&ds, "c5-van", 1, 11, stat, 0.01, true, seed);
        run(&ds, "c5-van", 1, 7, stat, 0.01, true, seed);
    }
    for seed in [1, 2, 3] {
        run(&ds, "c6-static", 8, 2, stat, 0.01, false, seed);
        run(&ds, "c6-dynamic", 8, 2, dynamic, 0.01, false, seed);
        run(&ds, "c6-mapped", 8, 2, mapped, 0.01, false, seed);
        run(&ds, "c7-noimp", 8, 2, full, 0.0, false, seed);
    }
}
