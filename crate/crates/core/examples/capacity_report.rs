//! Prints per-GPU feasibility for aggregated and disaggregated shapes of each built-in model.

use epd_sim::capacity::{comparison_table, TableSettings};
use epd_sim::model::{Catalog, HardwareSpec, StageRole};

fn main() -> epd_sim::Result<()> {
    let catalog = Catalog::builtin();
    let hw = HardwareSpec::a100_node();
    for name in ["minicpm-v-2.6", "internvl2-8b", "internvl2-26b"] {
        let model = catalog.model(name)?;
        println!(
            "{name}: encode instance keeps {:.2}% less weight memory",
            100.0 * model.memory_reduction(StageRole::Encode)
        );
        for row in comparison_table(model, &hw, TableSettings::default())? {
            println!(
                "  {:10} {:9} {:24} {:5} ({})",
                row.shape, row.resolution, row.metric, row.value, row.limiting_factor
            );
        }
    }
    Ok(())
}
