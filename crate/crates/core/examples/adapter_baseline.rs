//! Adapter baseline: a shared backbone is trained, frozen, and one small
//! residual adapter stack per task direction is trained on top.
//!
//!     cargo run --example adapter_baseline -- [backbone_steps] [adapter_steps]

use headsel::experiment::{cmd_train, ExperimentConfig};

fn main() -> headsel::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = ExperimentConfig::parse(
        "strategy = adapter\nd_model = 32\nffn = 64\nenc_layers = 1\ndec_layers = 1\n\
         lr = 0.002\nadapter_dim = 16\nout = results/adapter_baseline\n",
    )?;
    cfg.set("max_steps", args.first().map_or("1000", String::as_str))?;
    cfg.set("adapter_steps", args.get(1).map_or("500", String::as_str))?;

    let run = cmd_train(&cfg)?;
    let trainable: usize = run
        .model
        .params()
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.tensor.numel())
        .sum();
    println!(
        "backbone {} epochs, adapters {} epochs; {trainable} adapter parameters of {}",
        run.report.epochs.len(),
        run.adapter_report.as_ref().map_or(0, |r| r.epochs.len()),
        run.model.param_count()
    );
    for m in &run.metrics {
        println!("{:<14} accuracy {:.3}", m.task, m.sequence_accuracy);
    }
    Ok(())
}
