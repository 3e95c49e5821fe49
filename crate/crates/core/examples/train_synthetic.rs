//! Trains the small synthetic setup and prints loss, accuracy and wall time.
//! Usage: `cargo run --release --example train_synthetic -- [epochs] [train_per_class]`

use std::time::Instant;

use lightnet::data::synth_sar_generate;
use lightnet::train::{evaluate, train, TrainConfig};
use lightnet::{build_model, mobilenetv3_large_spec};

fn main() {
    let epochs: usize = std::env::args().nth(1).map_or(150, |s| s.parse().unwrap());
    let per_class: usize = std::env::args().nth(2).map_or(10, |s| s.parse().unwrap());
    let data = synth_sar_generate(10, per_class, 20, 64, 0).unwrap();
    let spec = mobilenetv3_large_spec(1, 10, 0.25).unwrap();
    let mut model = build_model::<f32>(&spec, 0).unwrap();
    let config = TrainConfig { epochs, ..Default::default() };
    let t = Instant::now();
    let h = train(&mut model, &data.train, &config).unwrap();
    for (i, (l, a)) in h.loss.iter().zip(&h.train_accuracy).enumerate().step_by(10) {
        println!("epoch {} loss {l:.4} acc {a:.3}", i + 1);
    }
    println!("last {:.4} {:.3} in {:?}", h.loss.last().unwrap(), h.train_accuracy.last().unwrap(), t.elapsed());
    let classes = data.manifest.classes.clone();
    let m = evaluate(&mut model, &data.train, &classes, 64, config.channel_mode).unwrap();
    println!("eval-mode train average {:.4}", m.average_accuracy);
    let m = evaluate(&mut model, &data.test, &classes, 64, config.channel_mode).unwrap();
    println!("test average {:.4}", m.average_accuracy);
}
