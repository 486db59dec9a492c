//! Transition band from RR and ERK objective values over a target sweep.

use repairprune::transition::{cts_profile, profile_csv, CtsConfig};

fn main() -> repairprune::Result<()> {
    let targets = [0.90, 0.925, 0.935, 0.94, 0.945, 0.95, 0.955, 0.96, 0.975];
    let j_rr = [0.20, 0.24, 0.27, 0.30, 0.33, 0.37, 0.42, 0.48, 0.70];
    let j_erk = [0.21, 0.26, 0.31, 0.37, 0.42, 0.46, 0.49, 0.52, 0.71];

    let profile = cts_profile(&targets, &j_rr, &j_erk, &CtsConfig::default())?;
    print!("{}", profile_csv(&profile)?);
    for (name, band) in [("broad band", profile.broad_band), ("core", profile.core)] {
        match band {
            Some(b) => println!(
                "{name}: {:.1}% to {:.1}%",
                b.s_start * 100.0,
                b.s_end * 100.0
            ),
            None => println!("{name}: not detected"),
        }
    }
    Ok(())
}
