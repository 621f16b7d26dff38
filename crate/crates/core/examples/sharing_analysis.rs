//! Head-sharing matrix, per-head load and load balance for run
//! directories. Without arguments a short group run is trained first.
//!
//!     cargo run --example sharing_analysis -- [run_dir ...]

use std::path::PathBuf;

use headsel::experiment::{cmd_analyze, cmd_train, ExperimentConfig};

fn main() -> headsel::Result<()> {
    let mut dirs: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    if dirs.is_empty() {
        let cfg = ExperimentConfig::parse(
            "strategy = group\nhprime = 8\nd_model = 32\nffn = 64\nenc_layers = 1\ndec_layers = 1\n\
             max_steps = 800\nlr = 0.002\nselection_lr_scale = 10\nout = results/sharing_analysis\n",
        )?;
        dirs.push(cmd_train(&cfg)?.dir);
    }
    for (dir, res) in dirs.iter().zip(cmd_analyze(&dirs, None)?) {
        println!("== {}", dir.display());
        match res {
            Ok(a) => {
                print!("{}", a.sharing.to_csv());
                print!("{}", a.load.to_csv());
                for (l, cv) in a.balance.iter().enumerate() {
                    println!("layer {l}: load cv {cv:.3}");
                }
            }
            Err(e) => println!("error: {e}"),
        }
    }
    Ok(())
}
