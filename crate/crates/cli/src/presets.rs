//! Experiment presets: the standard two-zone merging network under the four
//! batch experiments (terminal-speed sweep, fixed-vs-none comparison,
//! feedback comparison, time-varying demand).

use crate::report::{
    IntervalReport, IntervalVariant, PresetReport, QuadraticFit, SweepPoint, SweepReport,
    VariantReport, ZoneStats, REPORT_SCHEMA_VERSION,
};
use crate::scenario::scenario_hash;
use crate::HarnessError;
use czflow_core::sim_engine::{
    run, EntrySpeed, InflowConfig, MetricsRecord, PolicyConfig, RatePoint, ScenarioConfig,
    ZoneConfig,
};
use czflow_core::{BaselineSpeed, Lane, PolicyKind};
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetKind {
    VmSweep,
    FixedVsNone,
    FeedbackVsFixedVsNone,
    VaryingTraffic,
}

impl PresetKind {
    pub const ALL: [PresetKind; 4] = [
        PresetKind::VmSweep,
        PresetKind::FixedVsNone,
        PresetKind::FeedbackVsFixedVsNone,
        PresetKind::VaryingTraffic,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PresetKind::VmSweep => "vm_sweep",
            PresetKind::FixedVsNone => "fixed_vs_none",
            PresetKind::FeedbackVsFixedVsNone => "feedback_vs_fixed_vs_none",
            PresetKind::VaryingTraffic => "varying_traffic",
        }
    }
}

impl std::str::FromStr for PresetKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PresetKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                HarnessError::Config(format!(
                    "unknown preset '{s}'; expected one of: {}",
                    PresetKind::ALL.map(|k| k.name()).join(", ")
                ))
            })
    }
}

/// Demand schedule of the time-varying experiment: vehicles/hour per road
/// over consecutive 400 s intervals.
pub const VARYING_INTERVALS: [(f64, f64, f64); 5] = [
    (0.0, 400.0, 300.0),
    (400.0, 800.0, 200.0),
    (800.0, 1200.0, 400.0),
    (1200.0, 1600.0, 100.0),
    (1600.0, 2000.0, 400.0),
];

fn fixed(value: f64) -> PolicyConfig {
    PolicyConfig {
        kind: PolicyKind::Fixed,
        v_b: Some(BaselineSpeed::Constant { value }),
        ..Default::default()
    }
}

fn critical_feedback(v_b: BaselineSpeed, k: f64, l: f64) -> PolicyConfig {
    PolicyConfig {
        kind: PolicyKind::CriticalFeedback,
        v_b: Some(v_b),
        k,
        l: Some(l),
        ..Default::default()
    }
}

/// The reference network: zone 1 (main + merge inflows) feeds zone 2's main
/// lane; zone 2 keeps its own merge inflow and a fixed 18.5 m/s terminal
/// command for comparability across upstream policies.
pub fn two_zone_scenario(
    cz1_policy: PolicyConfig,
    alpha: f64,
    duration: f64,
    schedule: Vec<RatePoint>,
) -> ScenarioConfig {
    let mut z1 = ZoneConfig::new(1);
    z1.alpha = alpha;
    z1.downstream = Some(2);
    z1.policy = cz1_policy;
    z1.inflows = vec![
        InflowConfig { lane: Lane::Main, schedule: schedule.clone() },
        InflowConfig { lane: Lane::Merge, schedule: schedule.clone() },
    ];
    let mut z2 = ZoneConfig::new(2);
    z2.alpha = alpha;
    z2.policy = fixed(18.5);
    z2.inflows = vec![InflowConfig { lane: Lane::Merge, schedule }];
    ScenarioConfig {
        dt: 0.1,
        duration,
        seed: 1,
        deterministic_arrivals: false,
        entry_speed: EntrySpeed::Uniform { low: 12.0, high: 20.0 },
        zones: vec![z1, z2],
    }
}

fn steady(rate: f64) -> Vec<RatePoint> {
    vec![RatePoint { t: 0.0, rate }]
}

fn varying() -> Vec<RatePoint> {
    VARYING_INTERVALS.iter().map(|&(t, _, rate)| RatePoint { t, rate }).collect()
}

#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub sweep_value: Option<f64>,
    pub config: ScenarioConfig,
}

/// Variant list of a preset (seed not yet applied).
pub fn preset_variants(kind: PresetKind) -> Vec<Variant> {
    match kind {
        PresetKind::VmSweep => {
            let mut variants = Vec::new();
            let mut step = 0;
            loop {
                let vm = 12.0 + 0.5 * step as f64;
                if vm > 20.0 + 1e-9 {
                    break;
                }
                variants.push(Variant {
                    name: format!("vm_{vm:.1}"),
                    sweep_value: Some(vm),
                    config: two_zone_scenario(fixed(vm), 0.0625, 400.0, steady(400.0)),
                });
                step += 1;
            }
            variants
        }
        PresetKind::FixedVsNone => vec![
            Variant {
                name: "none".into(),
                sweep_value: None,
                config: two_zone_scenario(PolicyConfig::default(), 0.0625, 400.0, steady(400.0)),
            },
            Variant {
                name: "fixed_15".into(),
                sweep_value: None,
                config: two_zone_scenario(fixed(15.0), 0.0625, 400.0, steady(400.0)),
            },
            Variant {
                name: "fixed_12".into(),
                sweep_value: None,
                config: two_zone_scenario(fixed(12.0), 0.0625, 400.0, steady(400.0)),
            },
        ],
        PresetKind::FeedbackVsFixedVsNone => vec![
            Variant {
                name: "feedback".into(),
                sweep_value: None,
                config: two_zone_scenario(
                    critical_feedback(BaselineSpeed::Constant { value: 18.0 }, 0.5, 50.0),
                    0.0625,
                    400.0,
                    steady(400.0),
                ),
            },
            Variant {
                name: "fixed_15".into(),
                sweep_value: None,
                config: two_zone_scenario(fixed(15.0), 0.0625, 400.0, steady(400.0)),
            },
            Variant {
                name: "none".into(),
                sweep_value: None,
                config: two_zone_scenario(PolicyConfig::default(), 0.0625, 400.0, steady(400.0)),
            },
        ],
        PresetKind::VaryingTraffic => vec![
            Variant {
                name: "feedback".into(),
                sweep_value: None,
                config: two_zone_scenario(
                    critical_feedback(BaselineSpeed::AvgCriticalSpeedPlus { offset: 2.0 }, 0.5, 50.0),
                    0.25,
                    2000.0,
                    varying(),
                ),
            },
            Variant {
                name: "fixed_15".into(),
                sweep_value: None,
                config: two_zone_scenario(fixed(15.0), 0.25, 2000.0, varying()),
            },
            Variant {
                name: "none".into(),
                sweep_value: None,
                config: two_zone_scenario(PolicyConfig::default(), 0.25, 2000.0, varying()),
            },
        ],
    }
}

/// Metrics of every (variant, seed) run of a preset.
pub struct PresetRuns {
    pub kind: PresetKind,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// metrics[variant_index][seed_index]
    pub metrics: Vec<Vec<MetricsRecord>>,
}

/// Execute every (variant, seed) combination, in parallel over runs.
pub fn execute_preset(
    kind: PresetKind,
    seeds: &[u64],
    dt_override: Option<f64>,
    deterministic: bool,
) -> Result<PresetRuns, HarnessError> {
    let mut variants = preset_variants(kind);
    for v in &mut variants {
        if let Some(dt) = dt_override {
            v.config.dt = dt;
        }
        v.config.deterministic_arrivals = deterministic;
    }
    let jobs: Vec<(usize, usize)> = (0..variants.len())
        .flat_map(|vi| (0..seeds.len()).map(move |si| (vi, si)))
        .collect();
    let results: Result<Vec<((usize, usize), MetricsRecord)>, HarnessError> = jobs
        .par_iter()
        .map(|&(vi, si)| {
            let mut config = variants[vi].config.clone();
            config.seed = seeds[si];
            let out = run(&config).map_err(|e| HarnessError::Config(e.to_string()))?;
            Ok(((vi, si), out.metrics))
        })
        .collect();
    let mut metrics: Vec<Vec<Option<MetricsRecord>>> =
        vec![(0..seeds.len()).map(|_| None).collect(); variants.len()];
    for ((vi, si), m) in results? {
        metrics[vi][si] = Some(m);
    }
    Ok(PresetRuns {
        kind,
        seeds: seeds.to_vec(),
        variants,
        metrics: metrics
            .into_iter()
            .map(|row| row.into_iter().map(|m| m.unwrap()).collect())
            .collect(),
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Seed-averaged zone and network statistics for one variant.
pub fn variant_report(variant: &Variant, runs: &[MetricsRecord]) -> VariantReport {
    let zone_ids: Vec<u32> = variant.config.zones.iter().map(|z| z.id).collect();
    let zones = zone_ids
        .iter()
        .map(|&zid| {
            let per_seed: Vec<_> = runs
                .iter()
                .map(|m| m.zones.iter().find(|z| z.zone == zid).unwrap())
                .collect();
            ZoneStats {
                zone: zid,
                mean_travel_time: mean(per_seed.iter().map(|z| z.mean_travel_time)),
                mean_energy: mean(per_seed.iter().map(|z| z.mean_energy)),
                mean_obj_weighted: mean(per_seed.iter().map(|z| z.mean_obj_weighted)),
                mean_obj_normalized: mean(per_seed.iter().map(|z| z.mean_obj_normalized)),
                fem_count: mean(per_seed.iter().map(|z| z.fem_count as f64)),
                fem_time_avg: mean(per_seed.iter().map(|z| z.fem_time_avg)),
                infeasible_count: mean(per_seed.iter().map(|z| z.infeasible_count as f64)),
                exited: mean(per_seed.iter().map(|z| z.exited as f64)),
            }
        })
        .collect();
    VariantReport {
        name: variant.name.clone(),
        sweep_value: variant.sweep_value,
        scenario_hash: scenario_hash(&variant.config),
        zones,
        total_obj_weighted: mean(runs.iter().map(|m| m.total_obj_weighted)),
        total_obj_normalized: mean(runs.iter().map(|m| m.total_obj_normalized)),
        fem_count: mean(runs.iter().map(|m| m.fem_count as f64)),
        fem_time_avg: mean(runs.iter().map(|m| m.fem_time_avg)),
        infeasible_count: mean(runs.iter().map(|m| m.infeasible_count as f64)),
    }
}

/// Mean whole-journey objective of vehicles entering during `[a, b)`,
/// seed-averaged.
pub fn interval_objective(runs: &[MetricsRecord], a: f64, b: f64) -> (f64, usize) {
    let mut per_seed = Vec::new();
    let mut total = 0usize;
    for m in runs {
        let rows: Vec<f64> = m
            .per_cav_network
            .iter()
            .filter(|n| n.completed && n.entered >= a && n.entered < b)
            .map(|n| n.obj_weighted)
            .collect();
        total += rows.len();
        if !rows.is_empty() {
            per_seed.push(rows.iter().sum::<f64>() / rows.len() as f64);
        }
    }
    (mean(per_seed.into_iter()), total)
}

/// Full report assembly for a preset.
pub fn summarize(runs: &PresetRuns) -> PresetReport {
    let variants: Vec<VariantReport> = runs
        .variants
        .iter()
        .zip(&runs.metrics)
        .map(|(v, m)| variant_report(v, m))
        .collect();

    let sweep = (runs.kind == PresetKind::VmSweep).then(|| {
        let points: Vec<SweepPoint> = variants
            .iter()
            .map(|v| SweepPoint {
                vm: v.sweep_value.unwrap(),
                obj_cz1: v.zones[0].mean_obj_weighted,
                obj_cz2: v.zones[1].mean_obj_weighted,
                obj_total: v.total_obj_weighted,
            })
            .collect();
        let xs: Vec<f64> = points.iter().map(|p| p.vm).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.obj_total).collect();
        let (c0, c1, c2) = crate::report::quadratic_fit(&xs, &ys);
        SweepReport { points, fit: QuadraticFit { c0, c1, c2, argmin: -c1 / (2.0 * c2) } }
    });

    let intervals = (runs.kind == PresetKind::VaryingTraffic).then(|| {
        VARYING_INTERVALS
            .iter()
            .map(|&(a, b, rate)| IntervalReport {
                t_start: a,
                t_end: b,
                rate,
                variants: runs
                    .variants
                    .iter()
                    .zip(&runs.metrics)
                    .map(|(v, m)| {
                        let (obj, cavs) = interval_objective(m, a, b);
                        IntervalVariant { name: v.name.clone(), mean_obj_weighted: obj, cavs }
                    })
                    .collect(),
            })
            .collect()
    });

    PresetReport {
        schema_version: REPORT_SCHEMA_VERSION,
        preset: runs.kind.name().to_string(),
        seeds: runs.seeds.clone(),
        variants,
        sweep,
        intervals,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_has_seventeen_points() {
        let variants = preset_variants(PresetKind::VmSweep);
        assert_eq!(variants.len(), 17);
        assert_eq!(variants[0].sweep_value, Some(12.0));
        assert_eq!(variants[16].sweep_value, Some(20.0));
    }

    #[test]
    fn varying_traffic_has_five_intervals_of_400s() {
        let variants = preset_variants(PresetKind::VaryingTraffic);
        for v in &variants {
            assert_eq!(v.config.duration, 2000.0);
            assert_eq!(v.config.zones[0].alpha, 0.25);
            let schedule = &v.config.zones[0].inflows[0].schedule;
            assert_eq!(schedule.len(), 5);
            let rates: Vec<f64> = schedule.iter().map(|p| p.rate).collect();
            assert_eq!(rates, vec![300.0, 200.0, 400.0, 100.0, 400.0]);
            for (i, p) in schedule.iter().enumerate() {
                assert_eq!(p.t, 400.0 * i as f64);
            }
        }
    }

    #[test]
    fn comparison_presets_share_downstream_policy() {
        for kind in [PresetKind::FixedVsNone, PresetKind::FeedbackVsFixedVsNone] {
            for v in preset_variants(kind) {
                let z2 = &v.config.zones[1];
                assert_eq!(z2.policy.kind, PolicyKind::Fixed);
                assert_eq!(z2.policy.v_b, Some(BaselineSpeed::Constant { value: 18.5 }));
            }
        }
    }

    #[test]
    fn preset_names_round_trip() {
        for kind in PresetKind::ALL {
            let parsed: PresetKind = kind.name().parse().unwrap();
            assert_eq!(parsed, kind);
        }
        assert!("bogus".parse::<PresetKind>().is_err());
    }
}
