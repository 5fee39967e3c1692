//! Sweeps request rate on the encode-heavy preset and compares goodput across systems.

use epd_sim::metrics::GOODPUT_THRESHOLD;
use epd_sim::presets::{preset, sweep_all};

fn main() -> epd_sim::Result<()> {
    let p = preset("encode-heavy")?;
    let results = sweep_all(&p)?;
    print!("{:>6}", "rate");
    for r in &results {
        print!("{:>11}", r.system);
    }
    println!();
    for rate in &p.rates {
        print!("{rate:6.2}");
        for r in &results {
            print!("{:11.2}", r.attainment_at(*rate).unwrap_or(f64::NAN));
        }
        println!();
    }
    for r in &results {
        println!("{} goodput: {} r/s", r.system, r.goodput(GOODPUT_THRESHOLD));
    }
    Ok(())
}
