//! Mean TTFT with and without intra-request parallelism as images per request grow.

use epd_sim::presets::{irp_ablation, preset};

fn main() -> epd_sim::Result<()> {
    for row in irp_ablation(&preset("table4-irp")?)? {
        println!(
            "{} images: {:.3} s with IRP, {:.3} s without ({:.2}x)",
            row.images_per_request, row.ttft_irp, row.ttft_no_irp, row.ratio
        );
    }
    Ok(())
}
