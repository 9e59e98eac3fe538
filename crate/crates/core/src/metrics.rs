//! Evaluation metrics: per-vehicle travel time and energy, the weighted
//! objective, post-encroachment time, conflict ratios, and report emission.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::dynamics::VehicleCategory;
use crate::error::{Result, SimError};
use crate::scalar::Real;
use crate::Scalar;

/// One pass of a vehicle through a merge point's conflict zone.
#[derive(Debug, Clone, Copy)]
pub struct ZoneCrossing {
    pub merge_point: usize,
    /// True when the vehicle approached on the merge point's entry ramp.
    pub from_ramp: bool,
    /// Time the vehicle entered the zone, seconds (interpolated).
    pub t_enter: Scalar,
    /// Time the vehicle left the zone, seconds (interpolated).
    pub t_exit: Scalar,
}

/// Full per-vehicle record assembled by the engine.
#[derive(Debug, Clone)]
pub struct VehicleRecord {
    pub id: u64,
    pub category: VehicleCategory,
    pub entry: usize,
    pub exit: usize,
    pub t_entry: Scalar,
    pub t_exit: Option<Scalar>,
    /// Applied acceleration per tick.
    pub accel_trace: Vec<Scalar>,
    pub crossings: Vec<ZoneCrossing>,
}

impl VehicleRecord {
    pub fn travel_time(&self) -> Option<Scalar> {
        self.t_exit.map(|t| t - self.t_entry)
    }
}

/// Energy score: travel time plus the accumulated squared-input term.
/// `None` for vehicles still in the system.
pub fn energy(record: &VehicleRecord, dt: Scalar) -> Option<Scalar> {
    let travel = record.travel_time()?;
    let control: Scalar = record.accel_trace.iter().map(|a| 0.5 * a * a * dt).sum();
    Some(travel + control)
}

/// Scalarization weight for the combined objective.
pub fn eta<R: Real>(lambda: R, a_max: R, a_min: R) -> Result<R> {
    if !(lambda > R::zero() && lambda < R::one()) {
        return Err(SimError::Domain(format!(
            "lambda must lie in (0, 1), got {lambda:?}"
        )));
    }
    let peak = (a_max * a_max).max(a_min * a_min);
    Ok(lambda * peak / (R::two() * (R::one() - lambda)))
}

/// Combined objective from the table notes.
pub fn avg_obj<R: Real>(avg_travel: R, avg_energy: R, eta: R) -> R {
    eta * avg_travel + avg_energy
}

/// A leader/follower pair crossing the same conflict zone from different
/// approaches.
#[derive(Debug, Clone, Copy)]
pub struct PetEvent {
    pub merge_point: usize,
    pub leader: u64,
    pub follower: u64,
    pub leader_category: VehicleCategory,
    pub follower_category: VehicleCategory,
    /// Follower zone entry minus leader zone exit, seconds. Non-positive
    /// when the follower entered while the leader was still inside.
    pub pet: Scalar,
}

/// Extracts post-encroachment events from the recorded zone passages.
///
/// For each merge point, passages are ordered by zone-entry time; every
/// consecutive pair arriving from different approaches yields one event.
pub fn pet_events(records: &[VehicleRecord]) -> Vec<PetEvent> {
    #[derive(Clone, Copy)]
    struct Pass {
        vehicle: u64,
        category: VehicleCategory,
        from_ramp: bool,
        t_enter: Scalar,
        t_exit: Scalar,
    }
    let mut per_merge: BTreeMap<usize, Vec<Pass>> = BTreeMap::new();
    for rec in records {
        for c in &rec.crossings {
            per_merge.entry(c.merge_point).or_default().push(Pass {
                vehicle: rec.id,
                category: rec.category,
                from_ramp: c.from_ramp,
                t_enter: c.t_enter,
                t_exit: c.t_exit,
            });
        }
    }
    let mut events = Vec::new();
    for (merge_point, passes) in &mut per_merge {
        passes.sort_by(|a, b| {
            a.t_enter
                .partial_cmp(&b.t_enter)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.vehicle.cmp(&b.vehicle))
        });
        for pair in passes.windows(2) {
            let (lead, follow) = (&pair[0], &pair[1]);
            if lead.from_ramp == follow.from_ramp {
                continue;
            }
            events.push(PetEvent {
                merge_point: *merge_point,
                leader: lead.vehicle,
                follower: follow.vehicle,
                leader_category: lead.category,
                follower_category: follow.category,
                pet: follow.t_enter - lead.t_exit,
            });
        }
    }
    events
}

/// Fraction of events whose PET falls below the threshold. The flag is set
/// when there were no events at all.
pub fn conflict_ratio(pets: &[Scalar], threshold: Scalar) -> (Scalar, bool) {
    if pets.is_empty() {
        return (0.0, true);
    }
    let conflicts = pets.iter().filter(|p| **p < threshold).count();
    (conflicts as Scalar / pets.len() as Scalar, false)
}

/// Divides each value by the baseline value. A zero baseline maps equal
/// values to 1 and anything else to infinity.
pub fn normalize(values: &[Scalar], baseline: &[Scalar]) -> Vec<Scalar> {
    values
        .iter()
        .zip(baseline)
        .map(|(v, b)| {
            if *b == 0.0 {
                if *v == 0.0 {
                    1.0
                } else {
                    Scalar::INFINITY
                }
            } else {
                v / b
            }
        })
        .collect()
}

/// Aggregates for one intersection (entry leg / merge point).
#[derive(Debug, Clone, Serialize)]
pub struct IntersectionReport {
    pub merge_point: usize,
    pub completed: u64,
    pub avg_travel_time: Scalar,
    pub avg_energy: Scalar,
    /// Combined objective per lambda, recomputed from the averages.
    pub avg_obj: BTreeMap<String, Scalar>,
    pub pet_mean_all: Option<Scalar>,
    pub pet_mean_cav: Option<Scalar>,
    pub pet_mean_hdv: Option<Scalar>,
    pub pet_events: u64,
    pub conflicts: u64,
    pub conflict_ratio: Scalar,
    pub no_pet_events: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Counts {
    pub spawned: u64,
    pub completed: u64,
    pub in_system: u64,
    pub queued: u64,
}

/// Machine-readable summary of one run.
#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub scenario_hash: String,
    pub variant: String,
    pub seed: u64,
    pub ticks_executed: u64,
    pub counts: Counts,
    pub intersections: Vec<IntersectionReport>,
    /// Worst realized speed-dependent spacing residual over the run.
    pub min_spacing_residual: Scalar,
    /// Worst absolute deviation of a circulating vehicle from the ring
    /// radius, meters.
    pub max_annulus_deviation: Scalar,
    pub sequence_solves: u64,
    pub degraded_sequences: u64,
    pub degraded_plans: u64,
    pub mean_delay_s: Scalar,
    pub config: BTreeMap<String, String>,
}

/// Builds the per-intersection aggregates from completed records.
pub fn intersection_reports(
    records: &[VehicleRecord],
    legs: usize,
    dt: Scalar,
    lambdas: &[Scalar],
    a_max: Scalar,
    pet_threshold: Scalar,
) -> Vec<IntersectionReport> {
    let events = pet_events(records);
    (0..legs)
        .map(|leg| {
            let done: Vec<&VehicleRecord> = records
                .iter()
                .filter(|r| r.entry == leg && r.t_exit.is_some())
                .collect();
            let n = done.len() as Scalar;
            let avg_travel = if done.is_empty() {
                0.0
            } else {
                done.iter().map(|r| r.travel_time().unwrap()).sum::<Scalar>() / n
            };
            let avg_en = if done.is_empty() {
                0.0
            } else {
                done.iter().map(|r| energy(r, dt).unwrap()).sum::<Scalar>() / n
            };
            let mut obj = BTreeMap::new();
            for lambda in lambdas {
                let e = eta(*lambda, a_max, a_max).expect("lambda in (0,1)");
                obj.insert(format!("{lambda}"), avg_obj(avg_travel, avg_en, e));
            }
            let at_leg: Vec<&PetEvent> = events.iter().filter(|e| e.merge_point == leg).collect();
            let pets: Vec<Scalar> = at_leg.iter().map(|e| e.pet).collect();
            let (ratio, none) = conflict_ratio(&pets, pet_threshold);
            let mean_of = |filter: &dyn Fn(&PetEvent) -> bool| -> Option<Scalar> {
                let vals: Vec<Scalar> = at_leg
                    .iter()
                    .filter(|e| filter(e))
                    .map(|e| e.pet)
                    .collect();
                if vals.is_empty() {
                    None
                } else {
                    Some(vals.iter().sum::<Scalar>() / vals.len() as Scalar)
                }
            };
            IntersectionReport {
                merge_point: leg,
                completed: done.len() as u64,
                avg_travel_time: avg_travel,
                avg_energy: avg_en,
                avg_obj: obj,
                pet_mean_all: mean_of(&|_| true),
                pet_mean_cav: mean_of(&|e| e.follower_category == VehicleCategory::Cav),
                pet_mean_hdv: mean_of(&|e| e.follower_category == VehicleCategory::Hdv),
                pet_events: at_leg.len() as u64,
                conflicts: pets.iter().filter(|p| **p < pet_threshold).count() as u64,
                conflict_ratio: ratio,
                no_pet_events: none,
            }
        })
        .collect()
}

/// Rounds to the given number of significant digits.
pub fn round_sig(x: Scalar, digits: i32) -> Scalar {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let magnitude = x.abs().log10().floor() as i32;
    let factor = 10f64.powi(digits - 1 - magnitude);
    (x * factor).round() / factor
}

fn round_json(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Number(n) => {
            if let Some(f) = n.as_f64() {
                if n.is_f64() {
                    if let Some(num) = serde_json::Number::from_f64(round_sig(f, 6)) {
                        *value = serde_json::Value::Number(num);
                    }
                }
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(round_json),
        serde_json::Value::Object(map) => map.values_mut().for_each(round_json),
        _ => {}
    }
}

/// Serializes the report with floats limited to six significant digits.
pub fn summary_json(report: &SimReport) -> String {
    let mut value = serde_json::to_value(report).expect("report serializes");
    round_json(&mut value);
    let mut out = serde_json::to_string_pretty(&value).expect("json prints");
    out.push('\n');
    out
}

/// Per-vehicle CSV with the fixed column contract.
pub fn per_vehicle_csv(records: &[VehicleRecord], dt: Scalar, scenario_hash: &str) -> String {
    let mut out = format!("# scenario={scenario_hash}\n");
    out.push_str("id,category,entry,exit,t_entry,t_exit,travel_time,energy\n");
    for r in records {
        let Some(t_exit) = r.t_exit else { continue };
        let travel = r.travel_time().unwrap();
        let en = energy(r, dt).unwrap();
        out.push_str(&format!(
            "{},{},{},{},{:.3},{:.3},{:.3},{:.6}\n",
            r.id, r.category, r.entry, r.exit, r.t_entry, t_exit, travel, en
        ));
    }
    out
}

/// Per-tick density CSV: `(tick, segment, rho)`.
pub fn density_csv(rows: &[(u64, usize, Scalar)], scenario_hash: &str) -> String {
    let mut out = format!("# scenario={scenario_hash}\n");
    out.push_str("tick,segment,rho\n");
    for (tick, segment, rho) in rows {
        out.push_str(&format!("{tick},{segment},{rho:.6}\n"));
    }
    out
}
