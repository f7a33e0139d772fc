//! Covariate independences implied by a DAG: every separation up to one
//! conditioning variable, and the ordered local Markov list.

use sensproj::graphs::{format_constraints, implied_constraints, markov_constraints, parse_dag};

fn main() -> sensproj::Result<()> {
    let g = parse_dag("X1 -> X4; X2 -> X3; X2 -> X4")?;
    let covs = ["X1", "X2", "X3", "X4"];
    let names: Vec<String> = covs.iter().map(|s| s.to_string()).collect();

    println!("implied, |S| <= 1:");
    print!("{}", format_constraints(&implied_constraints(&g, &covs, 1)?, &names));
    println!("\nlocal Markov, topological order:");
    print!("{}", format_constraints(&markov_constraints(&g, &covs)?, &names));
    Ok(())
}
