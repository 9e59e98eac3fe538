//! Scenario configuration: typed parameters, a diff-able flat key-value text
//! format, experiment presets, and the scenario hash used to group runs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::comms::DelayModel;
use crate::error::{Result, SimError};
use crate::Scalar;

/// Controller variant under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Variant {
    /// Two-layer control: sequencing with the local objective only.
    M1,
    /// Proposed scheme: sequencing, delay compensation, multi-scale objective.
    M2,
    /// Plain MPC baseline: no sequencing, no delay compensation.
    M3,
}

impl Variant {
    /// Feature flags implied by the variant tag.
    pub fn flags(&self) -> (bool, bool, bool) {
        match self {
            Variant::M1 => (true, false, false),
            Variant::M2 => (true, true, true),
            Variant::M3 => (false, false, false),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::M1 => write!(f, "m1"),
            Variant::M2 => write!(f, "m2"),
            Variant::M3 => write!(f, "m3"),
        }
    }
}

impl FromStr for Variant {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m1" => Ok(Variant::M1),
            "m2" => Ok(Variant::M2),
            "m3" => Ok(Variant::M3),
            other => Err(SimError::Config(format!("unknown variant '{other}'"))),
        }
    }
}

/// Complete scenario description. Every field has a default; a parsed file
/// only overrides what it names.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    // Layout.
    pub ring_radius: Scalar,
    pub lane_width: Scalar,
    pub ramp_length: Scalar,
    pub legs: usize,
    pub exit_offset: Scalar,

    // Traffic.
    pub rates: Vec<Scalar>,
    /// Additional through-demand per exit, veh/h, spread across entries.
    pub exit_demand: Scalar,
    pub penetration: Scalar,
    pub initial_speed: Scalar,
    pub hdv_setpoint: Scalar,
    pub hdv_gain: Scalar,
    pub ttc_threshold: Scalar,
    pub coordination_radius: Scalar,
    /// Stop generating arrivals after this many vehicles; 0 = unlimited.
    pub vehicle_cap: u64,

    // Communication.
    pub delay_model: DelayModel,
    pub threshold_ticks: u32,
    pub delay_window: usize,
    /// When false the communication layer is bypassed and controllers read
    /// true states directly.
    pub fusion: bool,

    // Vehicle control.
    pub horizon: usize,
    pub state_weights: [Scalar; 4],
    pub input_weights: [Scalar; 2],
    pub lambda: Scalar,
    pub reaction_time: Scalar,
    pub standstill: Scalar,
    pub d_min: Scalar,
    pub headway: Scalar,
    pub body_length: Scalar,
    pub cg_height: Scalar,
    pub half_width: Scalar,
    pub rho_max: Scalar,
    pub solver_margin: Scalar,
    pub max_inner_iterations: usize,
    pub ring_ref_speed: Scalar,
    pub ramp_ref_speed: Scalar,

    // Sequencing.
    pub desired_spacing: Scalar,
    pub alpha: [Scalar; 4],
    pub weight_b: Scalar,
    pub weight_m: Scalar,
    pub double_subtraction: bool,
    pub platoon_cap: usize,
    pub trigger_ticks: u64,
    pub freeze_distance: Scalar,

    // Bounds.
    pub speed_min: Scalar,
    pub speed_max: Scalar,
    pub accel_max: Scalar,
    pub steer_max: Scalar,
    pub wheelbase: Scalar,

    // Engine.
    pub dt: Scalar,
    pub ticks: u64,
    pub variant: Variant,
    pub sequencing: bool,
    pub delay_compensation: bool,
    pub multi_scale: bool,
    pub collision_gap: Scalar,
    pub governor_margin: Scalar,
    pub spawn_margin: Scalar,

    // Metrics.
    pub pet_zone: Scalar,
    pub pet_threshold: Scalar,
    pub report_lambdas: Vec<Scalar>,

    // Outputs.
    pub message_trace: bool,
    pub solver_diagnostics: bool,
    pub sequence_log: bool,
    pub phase_log: bool,

    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            ring_radius: 30.0,
            lane_width: 4.0,
            ramp_length: 60.0,
            legs: 3,
            exit_offset: 10.0,

            rates: vec![396.0, 396.0, 396.0],
            exit_demand: 0.0,
            penetration: 0.6,
            initial_speed: 10.0,
            hdv_setpoint: 15.0,
            hdv_gain: 1.0,
            ttc_threshold: 2.5,
            coordination_radius: 60.0,
            vehicle_cap: 200,

            delay_model: DelayModel::Uniform { lo: 1, hi: 3 },
            threshold_ticks: 2,
            delay_window: 50,
            fusion: true,

            horizon: 10,
            state_weights: [1.0, 1.0, 0.1, 0.5],
            input_weights: [0.1, 0.1],
            lambda: 0.1,
            reaction_time: 1.8,
            standstill: 4.5,
            d_min: 5.0,
            headway: 1.5,
            body_length: 4.5,
            cg_height: 0.5,
            half_width: 0.9,
            rho_max: 0.15,
            solver_margin: 0.01,
            max_inner_iterations: 200,
            ring_ref_speed: 15.0,
            ramp_ref_speed: 10.0,

            desired_spacing: 10.0,
            alpha: [1.0, 1.0, 0.5, 10.0],
            weight_b: 1.0,
            weight_m: 1.0,
            double_subtraction: true,
            platoon_cap: 8,
            trigger_ticks: 10,
            freeze_distance: 10.0,

            speed_min: 0.0,
            speed_max: 20.0,
            accel_max: 5.0,
            steer_max: 0.6,
            wheelbase: 2.7,

            dt: 0.1,
            ticks: 20_000,
            variant: Variant::M2,
            sequencing: true,
            delay_compensation: true,
            multi_scale: true,
            collision_gap: 4.5,
            governor_margin: 0.05,
            spawn_margin: 2.0,

            pet_zone: 5.0,
            pet_threshold: 2.0,
            report_lambdas: vec![0.1, 0.2],

            message_trace: false,
            solver_diagnostics: false,
            sequence_log: false,
            phase_log: false,

            seed: 1,
        }
    }
}

fn fmt_list(values: &[Scalar]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn fmt_delay(model: &DelayModel) -> String {
    match model {
        DelayModel::Fixed(d) => format!("fixed:{d}"),
        DelayModel::Uniform { lo, hi } => format!("uniform:{lo}:{hi}"),
    }
}

fn parse_delay(s: &str) -> Result<DelayModel> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["fixed", d] => Ok(DelayModel::Fixed(
            d.parse().map_err(|_| SimError::Config(format!("bad delay '{s}'")))?,
        )),
        ["uniform", lo, hi] => {
            let lo = lo.parse().map_err(|_| SimError::Config(format!("bad delay '{s}'")))?;
            let hi = hi.parse().map_err(|_| SimError::Config(format!("bad delay '{s}'")))?;
            if lo > hi {
                return Err(SimError::Config(format!("empty delay range '{s}'")));
            }
            Ok(DelayModel::Uniform { lo, hi })
        }
        _ => Err(SimError::Config(format!("unknown delay model '{s}'"))),
    }
}

impl ScenarioConfig {
    /// Applies the variant's feature flags to the explicit flag fields.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        let (seq, comp, multi) = variant.flags();
        self.sequencing = seq;
        self.delay_compensation = comp;
        self.multi_scale = multi;
        self
    }

    /// Effective per-entry arrival rates: the configured rates plus the
    /// exit-side through-demand spread uniformly over the entries.
    pub fn effective_rates(&self) -> Vec<Scalar> {
        let extra = self.exit_demand * self.legs as Scalar / self.rates.len().max(1) as Scalar;
        self.rates.iter().map(|r| r + extra).collect()
    }

    /// Flat key/value view, in stable emission order.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("layout.ring_radius", self.ring_radius.to_string());
        put("layout.lane_width", self.lane_width.to_string());
        put("layout.ramp_length", self.ramp_length.to_string());
        put("layout.legs", self.legs.to_string());
        put("layout.exit_offset", self.exit_offset.to_string());

        put("traffic.rates", fmt_list(&self.rates));
        put("traffic.exit_demand", self.exit_demand.to_string());
        put("traffic.penetration", self.penetration.to_string());
        put("traffic.initial_speed", self.initial_speed.to_string());
        put("traffic.hdv_setpoint", self.hdv_setpoint.to_string());
        put("traffic.hdv_gain", self.hdv_gain.to_string());
        put("traffic.ttc_threshold", self.ttc_threshold.to_string());
        put("traffic.coordination_radius", self.coordination_radius.to_string());
        put("traffic.vehicle_cap", self.vehicle_cap.to_string());

        put("comms.delay_model", fmt_delay(&self.delay_model));
        put("comms.threshold_ticks", self.threshold_ticks.to_string());
        put("comms.window", self.delay_window.to_string());
        put("comms.fusion", self.fusion.to_string());

        put("control.horizon", self.horizon.to_string());
        put("control.state_weights", fmt_list(&self.state_weights));
        put("control.input_weights", fmt_list(&self.input_weights));
        put("control.lambda", self.lambda.to_string());
        put("control.reaction_time", self.reaction_time.to_string());
        put("control.standstill", self.standstill.to_string());
        put("control.d_min", self.d_min.to_string());
        put("control.headway", self.headway.to_string());
        put("control.body_length", self.body_length.to_string());
        put("control.cg_height", self.cg_height.to_string());
        put("control.half_width", self.half_width.to_string());
        put("control.rho_max", self.rho_max.to_string());
        put("control.solver_margin", self.solver_margin.to_string());
        put("control.max_inner_iterations", self.max_inner_iterations.to_string());
        put("control.ring_ref_speed", self.ring_ref_speed.to_string());
        put("control.ramp_ref_speed", self.ramp_ref_speed.to_string());

        put("sequencer.desired_spacing", self.desired_spacing.to_string());
        put("sequencer.alpha", fmt_list(&self.alpha));
        put("sequencer.b", self.weight_b.to_string());
        put("sequencer.m", self.weight_m.to_string());
        put("sequencer.double_subtraction", self.double_subtraction.to_string());
        put("sequencer.platoon_cap", self.platoon_cap.to_string());
        put("sequencer.trigger_ticks", self.trigger_ticks.to_string());
        put("sequencer.freeze_distance", self.freeze_distance.to_string());

        put("bounds.speed_min", self.speed_min.to_string());
        put("bounds.speed_max", self.speed_max.to_string());
        put("bounds.accel_max", self.accel_max.to_string());
        put("bounds.steer_max", self.steer_max.to_string());
        put("bounds.wheelbase", self.wheelbase.to_string());

        put("engine.dt", self.dt.to_string());
        put("engine.ticks", self.ticks.to_string());
        put("engine.variant", self.variant.to_string());
        put("engine.sequencing", self.sequencing.to_string());
        put("engine.delay_compensation", self.delay_compensation.to_string());
        put("engine.multi_scale", self.multi_scale.to_string());
        put("engine.collision_gap", self.collision_gap.to_string());
        put("engine.governor_margin", self.governor_margin.to_string());
        put("engine.spawn_margin", self.spawn_margin.to_string());

        put("metrics.pet_zone", self.pet_zone.to_string());
        put("metrics.pet_threshold", self.pet_threshold.to_string());
        put("metrics.lambdas", fmt_list(&self.report_lambdas));

        put("outputs.message_trace", self.message_trace.to_string());
        put("outputs.solver_diagnostics", self.solver_diagnostics.to_string());
        put("outputs.sequence_log", self.sequence_log.to_string());
        put("outputs.phase_log", self.phase_log.to_string());

        put("seed", self.seed.to_string());
        m
    }

    /// Canonical text form: one `key = value` line per field, sorted.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_map() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Parses the flat key-value format. Unknown keys are rejected; missing
    /// keys keep their defaults. Feature flags default from the variant
    /// unless given explicitly.
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(SimError::Config(format!(
                    "line {}: expected 'key = value'",
                    lineno + 1
                )));
            };
            raw.insert(k.trim().to_string(), v.trim().to_string());
        }

        let mut cfg = ScenarioConfig::default();
        // Variant first so flags can default from it.
        if let Some(v) = raw.get("engine.variant") {
            cfg = cfg.with_variant(v.parse()?);
        }

        let known = cfg.to_map();
        for key in raw.keys() {
            if !known.contains_key(key.as_str()) {
                return Err(SimError::Config(format!("unknown key '{key}'")));
            }
        }

        fn get<T: FromStr>(raw: &BTreeMap<String, String>, key: &str, cur: T) -> Result<T> {
            match raw.get(key) {
                Some(v) => v
                    .parse()
                    .map_err(|_| SimError::Config(format!("bad value for '{key}': '{v}'"))),
                None => Ok(cur),
            }
        }
        fn get_list(raw: &BTreeMap<String, String>, key: &str, cur: Vec<Scalar>) -> Result<Vec<Scalar>> {
            match raw.get(key) {
                Some(v) => v
                    .split(',')
                    .map(|p| {
                        p.trim()
                            .parse()
                            .map_err(|_| SimError::Config(format!("bad list for '{key}'")))
                    })
                    .collect(),
                None => Ok(cur),
            }
        }

        cfg.ring_radius = get(&raw, "layout.ring_radius", cfg.ring_radius)?;
        cfg.lane_width = get(&raw, "layout.lane_width", cfg.lane_width)?;
        cfg.ramp_length = get(&raw, "layout.ramp_length", cfg.ramp_length)?;
        cfg.legs = get(&raw, "layout.legs", cfg.legs)?;
        cfg.exit_offset = get(&raw, "layout.exit_offset", cfg.exit_offset)?;

        cfg.rates = get_list(&raw, "traffic.rates", cfg.rates)?;
        cfg.exit_demand = get(&raw, "traffic.exit_demand", cfg.exit_demand)?;
        cfg.penetration = get(&raw, "traffic.penetration", cfg.penetration)?;
        cfg.initial_speed = get(&raw, "traffic.initial_speed", cfg.initial_speed)?;
        cfg.hdv_setpoint = get(&raw, "traffic.hdv_setpoint", cfg.hdv_setpoint)?;
        cfg.hdv_gain = get(&raw, "traffic.hdv_gain", cfg.hdv_gain)?;
        cfg.ttc_threshold = get(&raw, "traffic.ttc_threshold", cfg.ttc_threshold)?;
        cfg.coordination_radius = get(&raw, "traffic.coordination_radius", cfg.coordination_radius)?;
        cfg.vehicle_cap = get(&raw, "traffic.vehicle_cap", cfg.vehicle_cap)?;

        if let Some(v) = raw.get("comms.delay_model") {
            cfg.delay_model = parse_delay(v)?;
        }
        cfg.threshold_ticks = get(&raw, "comms.threshold_ticks", cfg.threshold_ticks)?;
        cfg.delay_window = get(&raw, "comms.window", cfg.delay_window)?;
        cfg.fusion = get(&raw, "comms.fusion", cfg.fusion)?;

        cfg.horizon = get(&raw, "control.horizon", cfg.horizon)?;
        let sw = get_list(&raw, "control.state_weights", cfg.state_weights.to_vec())?;
        if sw.len() != 4 {
            return Err(SimError::Config("control.state_weights needs 4 entries".into()));
        }
        cfg.state_weights = [sw[0], sw[1], sw[2], sw[3]];
        let iw = get_list(&raw, "control.input_weights", cfg.input_weights.to_vec())?;
        if iw.len() != 2 {
            return Err(SimError::Config("control.input_weights needs 2 entries".into()));
        }
        cfg.input_weights = [iw[0], iw[1]];
        cfg.lambda = get(&raw, "control.lambda", cfg.lambda)?;
        cfg.reaction_time = get(&raw, "control.reaction_time", cfg.reaction_time)?;
        cfg.standstill = get(&raw, "control.standstill", cfg.standstill)?;
        cfg.d_min = get(&raw, "control.d_min", cfg.d_min)?;
        cfg.headway = get(&raw, "control.headway", cfg.headway)?;
        cfg.body_length = get(&raw, "control.body_length", cfg.body_length)?;
        cfg.cg_height = get(&raw, "control.cg_height", cfg.cg_height)?;
        cfg.half_width = get(&raw, "control.half_width", cfg.half_width)?;
        cfg.rho_max = get(&raw, "control.rho_max", cfg.rho_max)?;
        cfg.solver_margin = get(&raw, "control.solver_margin", cfg.solver_margin)?;
        cfg.max_inner_iterations = get(&raw, "control.max_inner_iterations", cfg.max_inner_iterations)?;
        cfg.ring_ref_speed = get(&raw, "control.ring_ref_speed", cfg.ring_ref_speed)?;
        cfg.ramp_ref_speed = get(&raw, "control.ramp_ref_speed", cfg.ramp_ref_speed)?;

        cfg.desired_spacing = get(&raw, "sequencer.desired_spacing", cfg.desired_spacing)?;
        let al = get_list(&raw, "sequencer.alpha", cfg.alpha.to_vec())?;
        if al.len() != 4 {
            return Err(SimError::Config("sequencer.alpha needs 4 entries".into()));
        }
        cfg.alpha = [al[0], al[1], al[2], al[3]];
        cfg.weight_b = get(&raw, "sequencer.b", cfg.weight_b)?;
        cfg.weight_m = get(&raw, "sequencer.m", cfg.weight_m)?;
        cfg.double_subtraction = get(&raw, "sequencer.double_subtraction", cfg.double_subtraction)?;
        cfg.platoon_cap = get(&raw, "sequencer.platoon_cap", cfg.platoon_cap)?;
        cfg.trigger_ticks = get(&raw, "sequencer.trigger_ticks", cfg.trigger_ticks)?;
        cfg.freeze_distance = get(&raw, "sequencer.freeze_distance", cfg.freeze_distance)?;

        cfg.speed_min = get(&raw, "bounds.speed_min", cfg.speed_min)?;
        cfg.speed_max = get(&raw, "bounds.speed_max", cfg.speed_max)?;
        cfg.accel_max = get(&raw, "bounds.accel_max", cfg.accel_max)?;
        cfg.steer_max = get(&raw, "bounds.steer_max", cfg.steer_max)?;
        cfg.wheelbase = get(&raw, "bounds.wheelbase", cfg.wheelbase)?;

        cfg.dt = get(&raw, "engine.dt", cfg.dt)?;
        cfg.ticks = get(&raw, "engine.ticks", cfg.ticks)?;
        cfg.sequencing = get(&raw, "engine.sequencing", cfg.sequencing)?;
        cfg.delay_compensation = get(&raw, "engine.delay_compensation", cfg.delay_compensation)?;
        cfg.multi_scale = get(&raw, "engine.multi_scale", cfg.multi_scale)?;
        cfg.collision_gap = get(&raw, "engine.collision_gap", cfg.collision_gap)?;
        cfg.governor_margin = get(&raw, "engine.governor_margin", cfg.governor_margin)?;
        cfg.spawn_margin = get(&raw, "engine.spawn_margin", cfg.spawn_margin)?;

        cfg.pet_zone = get(&raw, "metrics.pet_zone", cfg.pet_zone)?;
        cfg.pet_threshold = get(&raw, "metrics.pet_threshold", cfg.pet_threshold)?;
        cfg.report_lambdas = get_list(&raw, "metrics.lambdas", cfg.report_lambdas)?;

        cfg.message_trace = get(&raw, "outputs.message_trace", cfg.message_trace)?;
        cfg.solver_diagnostics = get(&raw, "outputs.solver_diagnostics", cfg.solver_diagnostics)?;
        cfg.sequence_log = get(&raw, "outputs.sequence_log", cfg.sequence_log)?;
        cfg.phase_log = get(&raw, "outputs.phase_log", cfg.phase_log)?;

        cfg.seed = get(&raw, "seed", cfg.seed)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rates.len() != self.legs {
            return Err(SimError::Config(format!(
                "traffic.rates needs one rate per leg ({} legs)",
                self.legs
            )));
        }
        if !(0.0..=1.0).contains(&self.penetration) {
            return Err(SimError::Config("penetration must lie in [0, 1]".into()));
        }
        if self.dt <= 0.0 || self.horizon == 0 {
            return Err(SimError::Config("dt and horizon must be positive".into()));
        }
        if self.speed_max <= self.speed_min {
            return Err(SimError::Config("speed bounds are inverted".into()));
        }
        for (k, v) in [
            ("ring_radius", self.ring_radius),
            ("lane_width", self.lane_width),
            ("ramp_length", self.ramp_length),
            ("accel_max", self.accel_max),
            ("steer_max", self.steer_max),
            ("wheelbase", self.wheelbase),
            ("collision_gap", self.collision_gap),
        ] {
            if v <= 0.0 {
                return Err(SimError::Config(format!("{k} must be positive")));
            }
        }
        Ok(())
    }

    /// Hash of the scenario with the comparison axes (variant flags, seed,
    /// penetration) masked out, so runs meant to be compared share it.
    pub fn scenario_hash(&self) -> String {
        let mut map = self.to_map();
        for key in [
            "engine.variant",
            "engine.sequencing",
            "engine.delay_compensation",
            "engine.multi_scale",
            "traffic.penetration",
            "seed",
        ] {
            map.remove(key);
        }
        let mut text = String::new();
        for (k, v) in &map {
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }
        format!("{:016x}", fnv1a(text.as_bytes()))
    }

    /// Reference file documenting every key at its default value.
    pub fn reference_text() -> String {
        let mut out = String::from(
            "# Scenario configuration reference.\n\
             # Every key is optional; omitted keys keep the defaults below.\n\
             # engine.sequencing / delay_compensation / multi_scale default\n\
             # from engine.variant when not given explicitly.\n\n",
        );
        out.push_str(&ScenarioConfig::default().emit());
        out
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Experiment 1: equal inflow at every entry, randomized exits.
pub fn preset_experiment1(penetration: Scalar) -> ScenarioConfig {
    ScenarioConfig {
        rates: vec![396.0, 396.0, 396.0],
        exit_demand: 0.0,
        penetration,
        vehicle_cap: 200,
        ticks: 20_000,
        ..ScenarioConfig::default()
    }
}

/// Experiment 2: asymmetric heavy load with added exit-side through-demand.
pub fn preset_experiment2() -> ScenarioConfig {
    ScenarioConfig {
        rates: vec![108.0, 540.0, 540.0],
        exit_demand: 576.0,
        ..preset_experiment1(0.6)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_default() {
        let cfg = ScenarioConfig::default();
        let parsed = ScenarioConfig::parse(&cfg.emit()).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn round_trip_modified() {
        let mut cfg = preset_experiment2().with_variant(Variant::M1);
        cfg.seed = 1234;
        cfg.penetration = 0.8;
        cfg.delay_model = DelayModel::Fixed(0);
        let parsed = ScenarioConfig::parse(&cfg.emit()).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(ScenarioConfig::parse("bogus.key = 1\n").is_err());
    }

    #[test]
    fn variant_sets_flags_but_explicit_flags_win() {
        let cfg = ScenarioConfig::parse("engine.variant = m3\n").unwrap();
        assert!(!cfg.sequencing && !cfg.delay_compensation && !cfg.multi_scale);
        let cfg =
            ScenarioConfig::parse("engine.variant = m1\nengine.multi_scale = true\n").unwrap();
        assert!(cfg.sequencing && !cfg.delay_compensation && cfg.multi_scale);
    }

    #[test]
    fn experiment1_preset_matches_settings() {
        let cfg = preset_experiment1(0.2);
        assert_eq!(cfg.rates, vec![396.0; 3]);
        assert_eq!(cfg.vehicle_cap, 200);
        assert_eq!(cfg.ticks, 20_000);
        assert_eq!(cfg.penetration, 0.2);
        assert_eq!(cfg.hdv_setpoint, 15.0);
        let pure_hdv = preset_experiment1(0.0);
        assert_eq!(pure_hdv.penetration, 0.0);
        let high = preset_experiment1(0.8);
        assert_eq!(high.penetration, 0.8);
    }

    #[test]
    fn experiment2_preset_rates_and_demand() {
        let cfg = preset_experiment2();
        assert_eq!(cfg.rates, vec![108.0, 540.0, 540.0]);
        assert_eq!(cfg.effective_rates(), vec![684.0, 1116.0, 1116.0]);
        // Total demand vs experiment 1: about a 2.5-fold increase.
        let total: Scalar = cfg.effective_rates().iter().sum();
        let base: Scalar = preset_experiment1(0.6).effective_rates().iter().sum();
        let factor = total / base;
        assert!((2.3..=2.6).contains(&factor), "factor={factor}");
    }

    #[test]
    fn hash_ignores_comparison_axes_only() {
        let a = preset_experiment1(0.2).with_variant(Variant::M1);
        let mut b = preset_experiment1(0.8).with_variant(Variant::M3);
        b.seed = 99;
        assert_eq!(a.scenario_hash(), b.scenario_hash());
        let mut c = a.clone();
        c.ring_radius = 31.0;
        assert_ne!(a.scenario_hash(), c.scenario_hash());
    }

    #[test]
    fn bad_values_rejected() {
        assert!(ScenarioConfig::parse("traffic.penetration = 1.5\n").is_err());
        assert!(ScenarioConfig::parse("engine.dt = 0\n").is_err());
        assert!(ScenarioConfig::parse("comms.delay_model = sometimes\n").is_err());
        assert!(ScenarioConfig::parse("control.state_weights = 1,2\n").is_err());
    }

    #[test]
    fn reference_text_parses_to_default() {
        let cfg = ScenarioConfig::parse(&ScenarioConfig::reference_text()).unwrap();
        assert_eq!(cfg, ScenarioConfig::default());
    }
}
