//! Drive the command-line pipeline from code: parse a TOML configuration,
//! run two subcommands into a scratch directory and print the summary.

use landau_hilbert::config::RunConfig;
use landau_hilbert::harness::{run_subcommand, Subcommand};

fn main() {
    let dir = std::env::temp_dir().join("landau-cli-pipeline");
    let text = format!(
        r#"
seed = 7
output_dir = "{}"

[momentum]
points_per_axis = 8

[checks]
kernel_pairs = 1000
coercivity_points = 10

[euler]
t_final = 0.2
closure = "analytic"

[solver]
t_final = 0.2
"#,
        dir.display()
    );
    let cfg = RunConfig::from_toml(&text).expect("valid configuration");
    for cmd in [Subcommand::CheckKernel, Subcommand::EulerSolve] {
        let checks = run_subcommand(cmd, &cfg).expect("subcommand runs");
        println!("{}: {} checks, {} failed", cmd.name(), checks.len(), checks.iter().filter(|c| !c.pass).count());
    }
    let summary = std::fs::read_to_string(dir.join("summary.md")).expect("summary written");
    println!("{summary}");
}
