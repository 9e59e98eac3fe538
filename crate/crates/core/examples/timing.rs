use roundabout_sim::config::{preset_experiment1, Variant};
use roundabout_sim::engine;

fn main() {
    let mut cfg = preset_experiment1(0.6);
    cfg.ticks = 5000; // 500 s
    cfg.vehicle_cap = 50;
    cfg.seed = 1;
    let t0 = std::time::Instant::now();
    let out = engine::run(&cfg).unwrap();
    let dt = t0.elapsed();
    println!(
        "m2: {:?} ticks={} spawned={} completed={} min_res={:.4} annulus={:.4} seq_solves={} degraded_plans={}",
        dt,
        out.report.ticks_executed,
        out.report.counts.spawned,
        out.report.counts.completed,
        out.report.min_spacing_residual,
        out.report.max_annulus_deviation,
        out.report.sequence_solves,
        out.report.degraded_plans,
    );
    for i in &out.report.intersections {
        println!(
            "  leg {}: n={} travel={:.2} energy={:.2} pet_events={} conflicts={} ratio={:.3}",
            i.merge_point, i.completed, i.avg_travel_time, i.avg_energy, i.pet_events, i.conflicts, i.conflict_ratio
        );
    }
    let cfg3 = cfg.clone().with_variant(Variant::M3);
    let t0 = std::time::Instant::now();
    let out3 = engine::run(&cfg3).unwrap();
    println!("m3: {:?} completed={} min_res={:.4}", t0.elapsed(), out3.report.counts.completed, out3.report.min_spacing_residual);
    for i in &out3.report.intersections {
        println!(
            "  leg {}: n={} travel={:.2} energy={:.2} pet_events={} conflicts={} ratio={:.3}",
            i.merge_point, i.completed, i.avg_travel_time, i.avg_energy, i.pet_events, i.conflicts, i.conflict_ratio
        );
    }
}
