//! Train the slice classifier on synthetic studies and measure held-out AUC.
//!
//! ```bash
//! cargo run --release --example train_classifier [model.json]
//! ```
//!
//! The model is written to `model.json` (default: `target/example-model.json`)
//! and can be passed to the `iterative_explain` example.

use std::path::PathBuf;
use std::time::Instant;

use explainseg::classifier::{forward, train, TrainConfig, TrainingSet};
use explainseg::evaluation::auc_roc;
use explainseg::io::save_params;
use explainseg::phantom::{generate_dataset, PhantomConfig};
use explainseg::volume::{extract_minivolume, hu_window_default};

fn main() -> explainseg::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "target/example-model.json".into());

    let train_studies = generate_dataset(&PhantomConfig { seed: 11, ..Default::default() }, 160, 0.5)?;
    let test_studies = generate_dataset(&PhantomConfig { seed: 99, ..Default::default() }, 20, 0.5)?;
    let set = TrainingSet::from_studies(&train_studies)?;
    println!("{} positive / {} negative training slices", set.positives(), set.negatives());

    let cfg = TrainConfig::default();
    let t = Instant::now();
    let outcome = train(&set, &cfg)?;
    let n = outcome.curve.len();
    for k in (0..n).step_by(n / 6).chain([n - 1]) {
        let s = &outcome.curve[k];
        println!("  iter {:>4}  loss {:.4}  |g| {:.3}", s.iteration, s.loss, s.grad_norm);
    }
    println!("trained {} iterations in {:.1?}", cfg.iterations, t.elapsed());

    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in &test_studies {
        let w = hu_window_default(&s.volume)?;
        for z in 0..w.dims().depth {
            scores.push(forward(&outcome.params, &extract_minivolume(&w, z)?)?.prob as f64);
            labels.push(s.slice_labels[z]);
        }
    }
    println!("held-out slice AUC {:.4} over {} slices", auc_roc(&scores, &labels)?, scores.len());

    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).expect("model directory");
    }
    save_params(&outcome.params, &out, None)?;
    println!("saved {}", out.display());
    Ok(())
}
