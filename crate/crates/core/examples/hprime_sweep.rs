//! Sweeps the candidate pool size H' for one strategy. Cells the strategy
//! cannot run (group needs H' divisible by H) are recorded as skipped.
//!
//!     cargo run --example hprime_sweep -- [subset|group] [steps]

use headsel::experiment::{cmd_sweep_hprime, sweep_means, ExperimentConfig};

fn main() -> headsel::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = ExperimentConfig::parse(
        "d_model = 32\nffn = 64\nenc_layers = 1\ndec_layers = 1\nhprimes = 4,6,8,12\nseeds = 1\n\
         lr = 0.002\nselection_lr_scale = 10\nout = results/hprime_sweep\n",
    )?;
    cfg.set("strategy", args.first().map_or("group", String::as_str))?;
    cfg.set("max_steps", args.get(1).map_or("600", String::as_str))?;

    let rows = cmd_sweep_hprime(&cfg)?;
    for r in &rows {
        match r.result {
            Some((acc, err)) => println!(
                "H'={:<3} seed {}  accuracy {acc:.3}  edit error {err:.3}",
                r.hprime, r.seed
            ),
            None => println!("H'={:<3} seed {}  skipped ({})", r.hprime, r.seed, r.note),
        }
    }
    for (m, hp, n, acc, _) in sweep_means(&rows) {
        println!("{m} H'={hp}: mean accuracy {acc:.3} over {n} seed(s)");
    }
    Ok(())
}
