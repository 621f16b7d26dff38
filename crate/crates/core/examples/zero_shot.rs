//! Zero-shot directions: the model is trained on some (source encoding,
//! target encoding) pairs and tested on unseen combinations. Selection
//! composes the encoder heads of the source key with the decoder heads of
//! the target key.
//!
//!     cargo run --example zero_shot -- [steps]

use headsel::experiment::{cmd_train, ExperimentConfig};

fn main() -> headsel::Result<()> {
    let steps = std::env::args().nth(1).unwrap_or_else(|| "1500".into());
    for strategy in ["shared", "group"] {
        let mut cfg = ExperimentConfig::parse(
            "suite = zero_shot\nhprime = 8\nd_model = 32\nffn = 64\nenc_layers = 1\ndec_layers = 1\n\
             lr = 0.002\nselection_lr_scale = 10\n",
        )?;
        cfg.set("strategy", strategy)?;
        cfg.set("max_steps", &steps)?;
        cfg.set("out", &format!("results/zero_shot_{strategy}"))?;
        let run = cmd_train(&cfg)?;
        println!("== {strategy}");
        for m in &run.metrics {
            println!(
                "{:<20} accuracy {:.3}  edit error {:.3}",
                m.task, m.sequence_accuracy, m.edit_error
            );
        }
    }
    Ok(())
}
