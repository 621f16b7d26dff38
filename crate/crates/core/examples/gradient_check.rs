//! Finite-difference check of every parameter gradient, including the
//! selection logits, on a tiny selective model.
//!
//!     cargo run --example gradient_check

use headsel::model::{Model, ModelConfig};
use headsel::selection::Strategy;
use headsel::tasks::{generate, interference_suite, Split, TokenLayout};

fn main() -> headsel::Result<()> {
    let suite = interference_suite();
    let layout = TokenLayout::for_tasks(&suite);
    let samples = generate(&suite[1], Split::Valid, 3)?;
    let batch = layout.batch(&samples.iter().take(2).collect::<Vec<_>>())?;

    for strategy in [Strategy::Subset, Strategy::Group] {
        let config = ModelConfig {
            d_model: 8,
            ffn: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            candidates: 4,
            strategy,
            vocab_src: layout.model_vocab(),
            vocab_tgt: layout.model_vocab(),
            task_keys: layout.tags,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        let model = Model::new(config, 7)?;
        // tau and beta chosen so the KL term contributes a visible gradient.
        let err = headsel::training::model_grad_check(&model, &batch, 0.7, 0.5, 11, 1e-5)?;
        println!(
            "{strategy:<7} {} params  max relative error {err:.2e}  {}",
            model.param_count(),
            if err < 1e-4 { "ok" } else { "FAILED" }
        );
    }
    Ok(())
}
