mod common;

use common::*;
use epd_sim::optimizer::cost;
use epd_sim::role_switch::ControllerParams;
use epd_sim::sim::sched::irp_shard;
use epd_sim::sim::{InstanceConfig, StageDefaults, SystemConfig};
use epd_sim::{run_simulation, Request, StageRole};
use proptest::prelude::*;

const MODELS: [&str; 3] = ["minicpm-v-2.6", "internvl2-8b", "internvl2-26b"];

fn layout() -> impl Strategy<Value = String> {
    prop_oneof![
        (1u32..=4, 1u32..=2, 1u32..=2).prop_map(|(e, p, d)| format!("{e}E{p}P{d}D")),
        (1u32..=4, 1u32..=2).prop_map(|(ep, d)| format!("{ep}EP{d}D")),
        (1u32..=4).prop_map(|m| format!("{m}M")),
    ]
}

fn config() -> impl Strategy<Value = SystemConfig> {
    (
        0usize..3,
        layout(),
        any::<bool>(),
        any::<bool>(),
        prop::sample::select(vec![1u32, 2, 4]),
        prop::sample::select(vec![1u32, 2]),
        prop::sample::select(vec![8u32, 32, 128]),
    )
        .prop_map(|(m, layout, irp, switch, eb, pb, db)| {
            let defaults = StageDefaults::default().with_batches(eb, pb, db);
            let cfg = SystemConfig::from_preset(MODELS[m], &layout, &defaults).unwrap().with_irp(irp);
            let params = ControllerParams {
                cooldown: 0.5,
                ..ControllerParams::default()
            };
            let split = !layout.contains("EP") && !layout.ends_with('M');
            cfg.with_role_switch((switch && split).then_some(params))
        })
}

fn requests(n: usize) -> impl Strategy<Value = Vec<Request>> {
    prop::collection::vec((0.0f64..0.8, 0usize..=4, 1u64..=40), n).prop_map(|v| {
        let mut t = 0.0;
        v.into_iter()
            .enumerate()
            .map(|(i, (gap, images, out))| {
                t += gap;
                image_request(i as u64, t, images, out)
            })
            .collect()
    })
}

fn trace_bytes(cfg: &SystemConfig, reqs: &[Request]) -> Vec<u8> {
    let trace = run_simulation(cfg, reqs, 7).unwrap();
    let mut out = Vec::new();
    trace.write_json(&mut out).unwrap();
    trace.write_events(&mut out).unwrap();
    out
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn equal_inputs_give_identical_traces(cfg in config(), reqs in requests(30)) {
        prop_assert_eq!(trace_bytes(&cfg, &reqs), trace_bytes(&cfg, &reqs));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 40, ..ProptestConfig::default() })]

    #[test]
    fn causal_and_conserving(cfg in config(), reqs in requests(50)) {
        let trace = run_simulation(&cfg, &reqs, 0).unwrap();
        prop_assert_eq!(trace.requests.len(), reqs.len());
        prop_assert_eq!(trace.completed() + trace.rejected(), reqs.len());
        for (rec, req) in trace.requests.iter().zip(&reqs) {
            prop_assert_eq!(rec.id, req.id);
            prop_assert!(rec.is_complete() != rec.rejected.is_some(), "request {} neither done nor rejected", rec.id);
            if let Some(v) = rec.causality_violation() {
                prop_assert!(false, "{}", v);
            }
            if rec.is_complete() {
                let encoded: u64 = rec.shards.iter().map(|s| s.patches).sum();
                prop_assert_eq!(encoded, cfg.model.patches_for_request(req).unwrap());
            }
        }
        prop_assert!(trace.events.windows(2).all(|w| w[0].time <= w[1].time));
        prop_assert_eq!(trace.final_roles().len(), cfg.instances.len());
    }

    #[test]
    fn irp_shards_balance_and_conserve(patches in 0u64..10_000, width in 1usize..64) {
        let shards = irp_shard(patches, width);
        prop_assert_eq!(shards.len(), width);
        prop_assert_eq!(shards.iter().sum::<u64>(), patches);
        let (lo, hi) = (shards.iter().min().unwrap(), shards.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        prop_assert!(shards.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn cost_is_weighted_gpu_sum(
        shapes in prop::collection::vec((1u32..=8, 1u32..=4), 0..12),
        c in 0.0f64..10.0,
    ) {
        let instances: Vec<InstanceConfig> = shapes
            .iter()
            .map(|&(tp, pp)| InstanceConfig { tp, pp, ..InstanceConfig::new(StageRole::Prefill, 1) })
            .collect();
        let mut direct = 0.0;
        for &(tp, pp) in &shapes {
            direct += c * f64::from(tp) * f64::from(pp);
        }
        prop_assert!((cost(&instances, c) - direct).abs() <= 1e-9 * direct.max(1.0));
    }
}

