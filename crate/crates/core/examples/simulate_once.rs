//! Runs the 5E2P1D deployment on a Poisson workload and prints per-request latencies.

use epd_sim::metrics::{slo_attainment, tpot, ttft};
use epd_sim::sim::{StageDefaults, SystemConfig};
use epd_sim::workload::{generate_poisson, slo_for, WorkloadSpec};
use epd_sim::{run_simulation, Resolution};

fn main() -> epd_sim::Result<()> {
    let spec = WorkloadSpec {
        rate: 1.5,
        num_requests: 20,
        prompt_tokens: 22,
        images_per_request: 4,
        resolution: Resolution::new(4032, 3024),
        output_tokens: 10,
        seed: 0,
        slo: slo_for("minicpm-v-2.6", 4).expect("slo row"),
    };
    let config = SystemConfig::from_preset("minicpm-v-2.6", "5E2P1D", &StageDefaults::default())?;
    let requests = generate_poisson(&spec)?;
    let trace = run_simulation(&config, &requests, spec.seed)?;
    for r in &trace.requests {
        println!(
            "request {:2}: arrival {:6.2} s, TTFT {:.3} s, TPOT {:.4} s",
            r.id,
            r.arrival,
            ttft(r)?,
            tpot(r)?
        );
    }
    println!(
        "SLO attainment {:.2}, makespan {:.2} s",
        slo_attainment(&trace.requests)?,
        trace.makespan()
    );
    Ok(())
}
