//! Trains one model on the four-task interference suite and writes a
//! results directory.
//!
//!     cargo run --example train_interference -- [shared|subset|group] [steps] [out]

use headsel::experiment::{cmd_train, ExperimentConfig};

fn main() -> headsel::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let strategy = args.first().map_or("group", String::as_str);
    let steps = args.get(1).map_or("1500", String::as_str);
    let out = args.get(2).map_or("results/train_interference", String::as_str);

    let mut cfg = ExperimentConfig::parse(
        "d_model = 32\nffn = 64\nenc_layers = 1\ndec_layers = 1\nhprime = 8\n\
         lr = 0.002\nselection_lr_scale = 10\ntau_schedule = fixed:1\n",
    )?;
    cfg.set("strategy", strategy)?;
    cfg.set("max_steps", steps)?;
    cfg.set("out", out)?;

    let run = cmd_train(&cfg)?;
    println!("{}", run.report.log_tsv());
    for m in &run.metrics {
        println!(
            "{:<14} accuracy {:.3}  edit error {:.3}",
            m.task, m.sequence_accuracy, m.edit_error
        );
    }
    for (task, mask) in &run.masks {
        let layers: Vec<_> = (0..mask.layers()).map(|l| mask.selected(l)).collect();
        println!("{task:<14} heads {layers:?}");
    }
    println!("results in {}", run.dir.display());
    Ok(())
}
