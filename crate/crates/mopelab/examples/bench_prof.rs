use mopelab::data::{generate, SyntheticConfig};
use mopelab::encoder::EncoderConfig;
use mopelab::fusion::{FusionConfig, FusionModel, Mode, ForwardStreams};
use mopelab::params::Binder;
use mopelab::tensor::Tape;
use std::time::Instant;

fn main() {
    let ds = generate(&SyntheticConfig::default()).unwrap();
    let cfg = FusionConfig {
        main: EncoderConfig { num_layers: 2, d_model: 32, num_heads: 2, d_ff: 64, seq_len: 16, vocab: Some(16) },
        complementary: EncoderConfig { num_layers: 1, d_model: 8, num_heads: 2, d_ff: 16, seq_len: 3, vocab: None },
        ..Default::default()
    };
    let mut model = FusionModel::new(&cfg, 16, 1).unwrap();
    let batch: Vec<&_> = ds.train[..32].iter().collect();
    let mut streams = ForwardStreams::new(1);
    // forward only
    let t = Instant::now();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.store);
        let _ = model.forward_batch(&mut tape, &mut binder, &batch, Mode::Train, Some(&mut streams)).unwrap();
    }
    println!("forward only: {:.1} ms/batch", t.elapsed().as_secs_f64()*250.0);
    // forward + loss + backward
    let labels: Vec<usize> = batch.iter().map(|i| i.label).collect();
    let t = Instant::now();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.store);
        let out = model.forward_batch(&mut tape, &mut binder, &batch, Mode::Train, Some(&mut streams)).unwrap();
        let loss = tape.cross_entropy_mean(out.logits, &labels).unwrap();
        let _ = tape.backward(loss).unwrap();
    }
    println!("fwd+bwd: {:.1} ms/batch", t.elapsed().as_secs_f64()*250.0);
}
