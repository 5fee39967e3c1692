//! Shifted workload from short to long outputs, with and without online role switching.

use epd_sim::presets::{preset, switch_ablation};

fn main() -> epd_sim::Result<()> {
    let a = switch_ablation(&preset("table6-switch")?)?;
    for s in [&a.with_switch, &a.without_switch] {
        println!(
            "{:12} makespan {:6.2} s, mean latency {:6.2} s, TPOT {:.4} s, {} -> {} ({} switches)",
            s.system, s.makespan, s.mean_latency, s.mean_tpot, s.initial_layout, s.final_layout, s.switches
        );
    }
    for ev in &a.trace.switches {
        println!("  {ev:?}");
    }
    Ok(())
}
