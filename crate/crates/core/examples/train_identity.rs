//! Trains one identity embedding per generated object and prints the loss
//! averaged over blocks of ten steps.

mod common;

use sketchscene::backend::{StubAdapters, ToyBackend};
use sketchscene::identity::{save_embedding, train_identities, TrainConfig};
use sketchscene::objects::generate_objects;

fn main() {
    let out = common::out_dir("train_identity");
    let spec = common::demo_scene();
    let assets = generate_objects(&spec, 7, &StubAdapters, 2, None).unwrap();
    let labels: Vec<String> = spec.objects.iter().map(|o| o.class_label.clone()).collect();
    let cfg = TrainConfig {
        steps: 100,
        ..TrainConfig::toy()
    };
    let trained = train_identities(&assets, &cfg, &ToyBackend::new(), &labels, |_, _| {}).unwrap();
    for e in &trained {
        let means: Vec<String> = e
            .loss_trace
            .chunks(10)
            .map(|c| format!("{:.4}", c.iter().sum::<f64>() / c.len() as f64))
            .collect();
        println!("{} (from {:?}): {}", e.token, e.init_source, means.join(" "));
        save_embedding(e, cfg.learning_rate, &out).unwrap();
    }
    println!("embeddings written to {}", out.display());
}
