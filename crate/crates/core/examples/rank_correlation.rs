//! Spearman and Kendall agreement between two rankings of allocation rules.

use repairprune::transition::rank_correlation;

fn main() -> repairprune::Result<()> {
    // objective values and recovered accuracies for six hypothetical rules
    let objective = [0.41, 0.38, 0.52, 0.35, 0.47, 0.44];
    let accuracy = [21.0, 23.5, 12.0, 24.1, 17.2, 17.2];
    let neg: Vec<f64> = accuracy.iter().map(|a| -a).collect();
    let r = rank_correlation(&objective, &neg)?;
    println!(
        "n = {}  spearman {:.4}  kendall tau-b {:.4}",
        r.n, r.spearman_rho, r.kendall_tau
    );
    Ok(())
}
