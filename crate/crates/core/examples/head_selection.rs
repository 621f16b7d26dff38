//! The selection machinery on its own: relaxed posteriors, the subset and
//! group rules, search spaces and parameter overhead.
//!
//!     cargo run --example head_selection

use headsel::rng::stream;
use headsel::selection::{
    gumbel_posterior, kl_bernoulli, search_space_size, select, selection_param_count, SelectionPrior, Strategy,
};

fn main() -> headsel::Result<()> {
    let (active, candidates) = (4, 8);
    // One layer of logits for one task.
    let logits = [1.2, -0.3, 0.8, 2.0, -1.5, 0.1, 0.9, 0.4];
    let mut rng = stream(1, "example");

    let mean = gumbel_posterior(&logits, 1, 1.0, &mut rng, false)?;
    println!(
        "q (no noise): {:?}",
        mean.values().iter().map(|q| format!("{q:.3}")).collect::<Vec<_>>()
    );
    for strategy in [Strategy::Subset, Strategy::Group] {
        let mask = select(strategy, &mean, active)?;
        println!("{strategy:<7} selects {:?}", mask.selected(0));
    }

    println!("\nfive noisy draws at tau = 0.5:");
    for _ in 0..5 {
        let q = gumbel_posterior(&logits, 1, 0.5, &mut rng, true)?;
        let subset = select(Strategy::Subset, &q, active)?.selected(0);
        let group = select(Strategy::Group, &q, active)?.selected(0);
        println!("  subset {subset:?}  group {group:?}");
    }

    let prior = SelectionPrior::new(active, candidates)?;
    println!(
        "\nKL(q || Bernoulli({})) = {:.4}",
        prior.p_select(),
        kl_bernoulli(&mean, &prior)
    );

    println!("\nassignments per layer and task:");
    for hp in [4, 8, 12, 16] {
        println!(
            "  H'={hp:<2} subset {:>6}  group {:>4}",
            search_space_size(Strategy::Subset, active, hp)?,
            search_space_size(Strategy::Group, active, hp)?
        );
    }
    println!(
        "\nselection logits for 8 tasks, 12 layers, H'=16: {}",
        selection_param_count(8, 16, 12)
    );
    Ok(())
}
