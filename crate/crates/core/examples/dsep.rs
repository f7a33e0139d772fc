//! d-separation queries on the covariate graph of the first simulation design.

use sensproj::graphs::parse_dag;

fn main() -> sensproj::Result<()> {
    let g = parse_dag("X1 -> X4; X2 -> X3; X2 -> X4; U -> Y; T -> Y")?;
    let queries: [(&str, &str, &[&str]); 5] = [
        ("X1", "X2", &[]),
        ("X1", "X2", &["X4"]),
        ("X3", "X4", &[]),
        ("X3", "X4", &["X2"]),
        ("X1", "X3", &["X4"]),
    ];
    for (a, b, given) in queries {
        let sep = g.d_separated(a, b, given)?;
        println!("{a} _||_ {b} | {{{}}}: {sep}", given.join(", "));
    }
    Ok(())
}
