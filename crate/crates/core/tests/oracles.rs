mod common;

use common::*;
use epd_sim::capacity::{max_batch, max_images_per_request, DeploymentShape, LimitingFactor};
use epd_sim::cost::{transfer_latency, Channel};
use epd_sim::metrics::{goodput_from_profile, slo_attainment, tpot, ttft, SweepPoint, SweepResult};
use epd_sim::model::{preset, INTERNVL2_26B, INTERNVL2_8B, MINICPM_V_2_6};
use epd_sim::{run_simulation, HardwareSpec, Resolution, StageRole};

#[test]
fn single_request_ttft_matches_cost_sum() {
    let hw = HardwareSpec::a100_node();
    let cost = epd_sim::model::Catalog::builtin().cost(MINICPM_V_2_6).unwrap().clone();
    let cfg = single_pipeline(cost.clone(), hw.clone());
    for images in [1, 2, 4, 8] {
        let req = image_request(0, 0.5, images, 16);
        let (mm, total) = cfg.model.tokens_for_request(&req).unwrap();
        let patches = cfg.model.patches_for_request(&req).unwrap();
        let expected = cost.encode_latency(patches, 1)
            + transfer_latency(mm * cfg.model.mm_bytes_per_token(), Channel::IntraNode, &hw)
            + cost.prefill_latency(total, 1, 1);
        let trace = run_simulation(&cfg, &[req], 0).unwrap();
        let got = ttft(&trace.requests[0]).unwrap();
        assert!((got - expected).abs() < 1e-9, "{images} images: {got} vs {expected}");
    }
}

#[test]
fn single_request_tpot_is_one_decode_step() {
    let cost = dyadic_cost();
    let cfg = single_pipeline(cost.clone(), infinite_bandwidth());
    for out in [2, 3, 17, 64] {
        let trace = run_simulation(&cfg, &[image_request(0, 0.0, 2, out)], 0).unwrap();
        let rec = &trace.requests[0];
        assert_eq!(tpot(rec).unwrap(), cost.decode_step_latency(1, 0), "{out} tokens");
        // Dyadic parameters make the TTFT sum exact as well.
        let patches = cfg.model.patches_for_request(&image_request(0, 0.0, 2, out)).unwrap();
        let total = cfg.model.tokens_for_request(&image_request(0, 0.0, 2, out)).unwrap().1;
        assert_eq!(
            ttft(rec).unwrap(),
            cost.encode_latency(patches, 1) + cost.prefill_latency(total, 1, 1)
        );
    }
}

#[test]
fn single_token_output_completes_at_prefill() {
    let cfg = single_pipeline(dyadic_cost(), infinite_bandwidth());
    let trace = run_simulation(&cfg, &[image_request(0, 0.0, 1, 1)], 0).unwrap();
    let rec = &trace.requests[0];
    assert_eq!(rec.completion, rec.prefill_end);
    assert_eq!(tpot(rec).unwrap(), 0.0);
    assert_eq!(slo_attainment(&trace.requests).unwrap(), 1.0);
}

fn result(points: &[(f64, f64)]) -> SweepResult {
    SweepResult {
        system: "hand".into(),
        model: MINICPM_V_2_6.into(),
        images_per_request: 1,
        gpus: 1,
        points: points
            .iter()
            .map(|&(rate, attainment)| SweepPoint {
                rate,
                rate_per_gpu: rate,
                attainment,
                mean_ttft: 0.0,
                p99_ttft: 0.0,
                mean_tpot: 0.0,
                completed: 0,
                rejected: 0,
            })
            .collect(),
    }
}

#[test]
fn goodput_matches_brute_force() {
    let profiles: [&[(f64, f64)]; 5] = [
        &[(1.0, 1.0), (2.0, 0.95), (3.0, 0.8), (4.0, 0.2)],
        &[(1.0, 0.5), (2.0, 0.4)],
        &[(1.0, 0.9), (2.0, 0.89), (3.0, 0.91)],
        &[(0.5, 1.0)],
        &[(3.0, 0.2), (1.0, 1.0), (2.0, 0.93)],
    ];
    for p in profiles {
        let mut brute = 0.0;
        for &(r, a) in p {
            if a >= 0.9 && r > brute {
                brute = r;
            }
        }
        assert_eq!(goodput_from_profile(p, 0.9), brute, "{p:?}");
        assert_eq!(result(p).goodput(0.9), brute, "{p:?}");
    }
}

#[test]
fn encode_weight_reduction() {
    let m = preset(MINICPM_V_2_6).unwrap();
    assert!((m.memory_reduction(StageRole::Encode) - 0.95).abs() < 0.005);
    let m = preset(INTERNVL2_8B).unwrap();
    assert!((m.memory_reduction(StageRole::Encode) - 0.9625).abs() < 0.005);
}

#[test]
fn heavy_profile_encode_batch() {
    let m = preset(INTERNVL2_26B).unwrap();
    let hw = HardwareSpec::a100_node();
    let res = Resolution::new(787, 444);
    let agg = max_batch(&m, &hw, DeploymentShape::new(StageRole::EncodePrefill, 0.8), 10, res).unwrap();
    let enc = max_batch(&m, &hw, DeploymentShape::new(StageRole::Encode, 0.8), 10, res).unwrap();
    let (a, e) = (agg.count().unwrap(), enc.count().unwrap());
    assert!(e >= 5 * a, "encode {e} vs aggregated {a}");
}

#[test]
fn internvl2_8b_images_limited_by_context() {
    let m = preset(INTERNVL2_8B).unwrap();
    let r = max_images_per_request(
        &m,
        &HardwareSpec::a100_node(),
        DeploymentShape::new(StageRole::EncodePrefill, 0.8),
        RES_4K,
    )
    .unwrap();
    assert_eq!(r.limiting_factor, LimitingFactor::ContextLength);
    assert_eq!(r.count(), Some(19));
}
