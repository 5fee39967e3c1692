//! Searches the restricted configuration space and compares against random configurations.

use epd_sim::optimizer::Strategy;
use epd_sim::presets::{optimizer_ablation, preset};

fn main() -> epd_sim::Result<()> {
    let p = preset("table5-optimizer")?;
    let a = optimizer_ablation(&p, Strategy::SurrogateGuided, 60, 10, 0)?;
    let c = &a.solver.candidate;
    println!(
        "solver: {} batches {}/{}/{} irp {} -> goodput {:.2} r/s",
        c.layout(),
        c.encode.max_batch,
        c.prefill.max_batch,
        c.decode.max_batch,
        c.irp,
        a.solver.f
    );
    for e in &a.random {
        println!("random: {:8} -> goodput {:.2} r/s", e.candidate.layout(), e.f);
    }
    println!("mean of random {:.2} r/s, ratio {:.2}", a.random_mean_goodput, a.ratio);
    Ok(())
}
