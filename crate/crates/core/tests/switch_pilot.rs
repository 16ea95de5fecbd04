//! RMMC response to a single flat-to-sharp curvature switch.
//!
//! The golden file stores the pilot measurement; regenerate it with
//! `cargo test --test switch_pilot -- --ignored`.

mod common;

use std::fs;

use serde::{Deserialize, Serialize};

use curvadion::config::ProblemSpec;
use curvadion::dion::DionConfig;
use curvadion::distsim::{simulate, SimConfig};
use curvadion::trigger::SyncPolicy;

const SWITCH_AT: u64 = 100;
const STEPS: u64 = 110;
const WINDOW: u64 = 20;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const MIN_RATIO: f64 = 5.0;

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct Pilot {
    switch_at: u64,
    window: u64,
    seeds: Vec<u64>,
    ratios: Vec<f64>,
    mean_ratio: f64,
    min_ratio: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Global RMMC at `SWITCH_AT + 1` over the median of the `WINDOW` steps before the switch.
fn spike_ratio(seed: u64) -> f64 {
    let spec = ProblemSpec::CurvatureSwitch {
        layers: vec![[16, 8], [8, 4]],
        flat_range: [0.01, 0.1],
        sharp_range: [1.0, 10.0],
        switch_steps: Some(vec![SWITCH_AT]),
        schedule: None,
        noise_sigma: 0.05,
        noise_model: Default::default(),
        init_scale: 0.5,
        problem_seed: None,
    };
    let problem = spec.build(seed, STEPS).unwrap();
    let cfg = SimConfig::new(4, SyncPolicy::EveryStep, DionConfig::default(), STEPS, seed);
    let out = simulate(problem.as_ref(), &cfg).unwrap();
    let rmmc: Vec<f64> = out.records.iter().map(|r| r.global_rmmc).collect();
    let s = SWITCH_AT as usize;
    let pre = median(rmmc[s - 1 - WINDOW as usize..s - 1].to_vec());
    rmmc[s] / pre
}

fn pilot() -> Pilot {
    let ratios: Vec<f64> = SEEDS.iter().map(|&s| spike_ratio(s)).collect();
    Pilot {
        switch_at: SWITCH_AT,
        window: WINDOW,
        seeds: SEEDS.to_vec(),
        mean_ratio: ratios.iter().sum::<f64>() / ratios.len() as f64,
        ratios,
        min_ratio: MIN_RATIO,
    }
}

#[test]
fn switch_spike_exceeds_rolling_median() {
    let golden: Pilot =
        serde_json::from_str(&fs::read_to_string(common::data_dir().join("switch_pilot.json")).unwrap()).unwrap();
    let now = pilot();
    assert_eq!(golden.seeds, now.seeds);
    for (g, n) in golden.ratios.iter().zip(&now.ratios) {
        assert!((g - n).abs() <= 1e-9 * g.abs(), "pilot drifted: golden {g}, now {n}");
    }
    assert!(now.mean_ratio >= golden.min_ratio, "seed-averaged ratio {}", now.mean_ratio);
}

#[test]
#[ignore]
fn regenerate_switch_pilot() {
    let p = pilot();
    let mut s = serde_json::to_string_pretty(&p).unwrap();
    s.push('\n');
    fs::write(common::data_dir().join("switch_pilot.json"), s).unwrap();
    eprintln!("{p:?}");
}
