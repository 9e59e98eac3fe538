use roundabout_sim::config::{preset_experiment1, Variant};
use roundabout_sim::engine;

fn main() {
    let mut cfg = preset_experiment1(0.6).with_variant(Variant::M3);
    cfg.ticks = 5000;
    cfg.vehicle_cap = 50;
    cfg.seed = 1;
    match engine::run(&cfg) {
        Ok(out) => println!("ok completed={}", out.report.counts.completed),
        Err(e) => println!("ERR {e}"),
    }
}
