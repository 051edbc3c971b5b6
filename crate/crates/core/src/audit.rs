//! Post-hoc safety audit over a completed run's trace and event log.
//!
//! The auditor never touches controller state: it reconstructs motion purely
//! from trace rows (step-start state plus the control held over the step) and
//! exit events, then checks
//!
//!  * rear-end spacing `z ≥ phi·v + delta` for every same-lane in-zone pair
//!    whose follower has been in tracking mode with feasible QPs since its
//!    enforcement phase ended, and
//!  * merge spacing at every crossing whose FIFO predecessor was not the
//!    physical predecessor.

use crate::control_zone::{Mode, TraceRow};
use crate::sim_engine::{ScenarioConfig, SimEvent};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct AuditReport {
    pub rear_pairs_checked: usize,
    pub rear_min_slack: f64,
    pub rear_violations: usize,
    pub merge_crossings_checked: usize,
    pub merge_min_slack: f64,
    pub merge_violations: usize,
}

impl AuditReport {
    pub fn clean(&self) -> bool {
        self.rear_violations == 0 && self.merge_violations == 0
    }
}

/// Position of a vehicle `s` seconds after a trace row, mirroring the exact
/// integrator (constant control, held at rest once the speed hits zero).
fn position_after(row: &TraceRow, s: f64) -> f64 {
    if row.u < 0.0 && row.v + row.u * s < 0.0 {
        let tau = -row.v / row.u;
        row.x + row.v * tau + 0.5 * row.u * tau * tau
    } else {
        row.x + row.v * s + 0.5 * row.u * s * s
    }
}

struct ZoneShape {
    length: f64,
    phi: f64,
    delta: f64,
    downstream: Option<u32>,
}

/// Vehicle position in `zone`'s frame at time `t`: from its own rows in that
/// zone, else recursively from the downstream zone offset by the length, else
/// ballistically from its exit event.
fn position_in_zone(
    rows_by_cav_zone: &BTreeMap<(u64, u32), Vec<&TraceRow>>,
    exits: &BTreeMap<(u64, u32), (f64, f64)>,
    shapes: &BTreeMap<u32, ZoneShape>,
    cav: u64,
    zone: u32,
    t: f64,
    depth: usize,
) -> Option<f64> {
    if depth > 8 {
        return None;
    }
    if let Some(rows) = rows_by_cav_zone.get(&(cav, zone)) {
        // Last row at or before t.
        if let Some(row) = rows.iter().rev().find(|r| r.t <= t + 1e-12) {
            let shape = &shapes[&zone];
            let x = position_after(row, t - row.t);
            if x < shape.length {
                return Some(x);
            }
        }
    }
    let shape = &shapes[&zone];
    let (t_exit, v_exit) = *exits.get(&(cav, zone))?;
    if t_exit > t + 1e-9 {
        return None;
    }
    match shape.downstream {
        Some(d) => position_in_zone(rows_by_cav_zone, exits, shapes, cav, d, t, depth + 1)
            .map(|x| shape.length + x)
            .or(Some(shape.length + v_exit * (t - t_exit))),
        None => Some(shape.length + v_exit * (t - t_exit)),
    }
}

/// Scan a full run for spacing violations. `rear_tol` and `merge_tol` are the
/// slack floors (negative values admit that much discretization slack).
///
/// Rear-end pairs are audited when both vehicles are in tracking mode with a
/// feasible-QP history; merge crossings are audited when the exiting vehicle
/// has such a history, since spacing guarantees presuppose the constraints
/// were actually enforceable.
pub fn audit_trace(
    trace: &[TraceRow],
    events: &[SimEvent],
    config: &ScenarioConfig,
    rear_tol: f64,
    merge_tol: f64,
) -> AuditReport {
    let shapes: BTreeMap<u32, ZoneShape> = config
        .zones
        .iter()
        .map(|z| {
            (
                z.id,
                ZoneShape {
                    length: z.length,
                    phi: z.phi,
                    delta: z.delta,
                    downstream: z.downstream,
                },
            )
        })
        .collect();

    // Tracking-mode cleanliness per (cav, zone): true from the first OCBF row
    // until any infeasible step.
    let mut clean: BTreeMap<(u64, u32), bool> = BTreeMap::new();
    let mut rows_by_cav_zone: BTreeMap<(u64, u32), Vec<&TraceRow>> = BTreeMap::new();
    // Rows grouped per (time, zone, lane) for the pairwise scan.
    let mut groups: BTreeMap<(u64, u32, u8), Vec<(usize, &TraceRow)>> = BTreeMap::new();
    let mut clean_at_row: Vec<bool> = Vec::with_capacity(trace.len());

    for (i, row) in trace.iter().enumerate() {
        let key = (row.cav.0, row.zone);
        let entry = clean.entry(key).or_insert(false);
        if row.mode == Mode::Ocbf {
            if !rows_by_cav_zone.contains_key(&key)
                || rows_by_cav_zone[&key].iter().all(|r| r.mode == Mode::Fe)
            {
                *entry = true;
            }
            if !row.qp_feasible {
                *entry = false;
            }
        }
        clean_at_row.push(*entry && row.mode == Mode::Ocbf);
        rows_by_cav_zone.entry(key).or_default().push(row);
        let lane_key = match row.lane {
            crate::control_zone::Lane::Main => 0u8,
            crate::control_zone::Lane::Merge => 1u8,
        };
        groups.entry((row.t.to_bits(), row.zone, lane_key)).or_default().push((i, row));
    }

    let mut report = AuditReport {
        rear_pairs_checked: 0,
        rear_min_slack: f64::INFINITY,
        rear_violations: 0,
        merge_crossings_checked: 0,
        merge_min_slack: f64::INFINITY,
        merge_violations: 0,
    };

    for ((_, zone, _), mut members) in groups {
        let shape = &shapes[&zone];
        members.sort_by(|a, b| b.1.x.partial_cmp(&a.1.x).unwrap());
        for w in members.windows(2) {
            let (li, leader) = w[0];
            let (fi, follower) = w[1];
            if !clean_at_row[fi] || !clean_at_row[li] {
                continue;
            }
            let slack = (leader.x - follower.x) - shape.phi * follower.v - shape.delta;
            report.rear_pairs_checked += 1;
            report.rear_min_slack = report.rear_min_slack.min(slack);
            if slack < rear_tol {
                report.rear_violations += 1;
            }
        }
    }

    // Exit lookup for ghost reconstruction.
    let mut exits: BTreeMap<(u64, u32), (f64, f64)> = BTreeMap::new();
    for e in events {
        if let SimEvent::Exited { t, cav, zone, v_cross, .. } = e {
            exits.insert((*cav, *zone), (*t, *v_cross));
        }
    }

    for e in events {
        let SimEvent::Exited { t, cav, zone, v_cross, im1: Some(im1), im1_is_ip: false, .. } = e
        else {
            continue;
        };
        // Exiter must have a clean tracking history in this zone; absent
        // rows (event-only tests) are audited unconditionally.
        if !clean.get(&(*cav, *zone)).copied().unwrap_or(true) {
            continue;
        }
        let shape = &shapes[zone];
        let Some(x_pred) =
            position_in_zone(&rows_by_cav_zone, &exits, &shapes, *im1, *zone, *t, 0)
        else {
            continue;
        };
        let z = x_pred - shape.length;
        let slack = z - shape.phi * v_cross - shape.delta;
        report.merge_crossings_checked += 1;
        report.merge_min_slack = report.merge_min_slack.min(slack);
        if slack < merge_tol {
            report.merge_violations += 1;
        }
    }

    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control_zone::{CavId, Lane};

    fn row(t: f64, cav: u64, lane: Lane, x: f64, v: f64, u: f64, feasible: bool) -> TraceRow {
        TraceRow {
            t,
            cav: CavId(cav),
            zone: 1,
            lane,
            fifo_index: 0,
            x,
            v,
            u,
            e_relax: 0.0,
            mode: Mode::Ocbf,
            qp_feasible: feasible,
        }
    }

    fn one_zone_config() -> ScenarioConfig {
        ScenarioConfig {
            dt: 0.1,
            duration: 1.0,
            seed: 0,
            deterministic_arrivals: true,
            entry_speed: crate::sim_engine::EntrySpeed::Constant { value: 15.0 },
            zones: vec![crate::sim_engine::ZoneConfig::new(1)],
        }
    }

    #[test]
    fn detects_rear_end_violation() {
        let config = one_zone_config();
        // Follower 20 m behind at 20 m/s: needs 36 m.
        let trace =
            vec![row(0.0, 1, Lane::Main, 100.0, 15.0, 0.0, true), row(0.0, 2, Lane::Main, 80.0, 20.0, 0.0, true)];
        let report = audit_trace(&trace, &[], &config, -1e-6, -1e-3);
        assert_eq!(report.rear_pairs_checked, 1);
        assert_eq!(report.rear_violations, 1);
        assert!((report.rear_min_slack - (20.0 - 36.0)).abs() < 1e-12);
    }

    #[test]
    fn clean_spacing_passes() {
        let config = one_zone_config();
        let trace =
            vec![row(0.0, 1, Lane::Main, 100.0, 15.0, 0.0, true), row(0.0, 2, Lane::Main, 50.0, 20.0, 0.0, true)];
        let report = audit_trace(&trace, &[], &config, -1e-6, -1e-3);
        assert_eq!(report.rear_violations, 0);
        assert!(report.clean());
    }

    #[test]
    fn infeasible_follower_is_excluded() {
        let config = one_zone_config();
        let mut bad = row(0.0, 2, Lane::Main, 80.0, 20.0, 0.0, false);
        bad.qp_feasible = false;
        let trace = vec![row(0.0, 1, Lane::Main, 100.0, 15.0, 0.0, true), bad];
        let report = audit_trace(&trace, &[], &config, -1e-6, -1e-3);
        assert_eq!(report.rear_pairs_checked, 0);
    }

    #[test]
    fn merge_crossing_uses_ghost_reconstruction() {
        let config = one_zone_config();
        // Predecessor exited at t=9.5 at 16 m/s; follower crosses at t=10.0
        // at 20 m/s. Gap at crossing: 16*0.5 = 8 m < 36 m -> violation.
        let events = vec![
            SimEvent::Exited {
                t: 9.5,
                cav: 1,
                zone: 1,
                v_cross: 16.0,
                im1: None,
                im1_is_ip: false,
                to_zone: None,
            },
            SimEvent::Exited {
                t: 10.0,
                cav: 2,
                zone: 1,
                v_cross: 20.0,
                im1: Some(1),
                im1_is_ip: false,
                to_zone: None,
            },
        ];
        let report = audit_trace(&[], &events, &config, -1e-6, -1e-3);
        assert_eq!(report.merge_crossings_checked, 1);
        assert_eq!(report.merge_violations, 1);
        assert!((report.merge_min_slack - (8.0 - 36.0)).abs() < 1e-9);
        // A slower follower crossing much later is fine.
        let ok_events = vec![
            events[0],
            SimEvent::Exited {
                t: 13.0,
                cav: 2,
                zone: 1,
                v_cross: 15.0,
                im1: Some(1),
                im1_is_ip: false,
                to_zone: None,
            },
        ];
        let report = audit_trace(&[], &ok_events, &config, -1e-6, -1e-3);
        assert_eq!(report.merge_violations, 0);
    }

    #[test]
    fn same_lane_crossings_not_merge_audited() {
        let config = one_zone_config();
        let events = vec![SimEvent::Exited {
            t: 10.0,
            cav: 2,
            zone: 1,
            v_cross: 20.0,
            im1: Some(1),
            im1_is_ip: true,
            to_zone: None,
        }];
        let report = audit_trace(&[], &events, &config, -1e-6, -1e-3);
        assert_eq!(report.merge_crossings_checked, 0);
    }
}
