//! Per-vehicle distributed model predictive control.
//!
//! Each vehicle minimizes a quadratic tracking cost over a short input
//! horizon subject to speed, input, spacing, rollover, and lane-annulus
//! constraints. Constraints become smooth hinge penalties `max(0, -r)^2`
//! with an increasing weight schedule; each penalty stage is minimized by
//! projected gradient descent with backtracking line search. Gradients come
//! from the rollout linearized around the warm start, augmented with the
//! leader/follower gap recursions.

use crate::dynamics::{self, ControlInput, Limits, VehicleState};
use crate::error::{Result, SimError};
use crate::geometry::Point;
use crate::linalg::{self, Mat2, Mat4, Mat4x2};
use crate::scalar::{angle_diff, Real};

/// Spacing constraint parameters.
#[derive(Debug, Clone, Copy)]
pub struct SpacingParams<R> {
    /// Reaction time (seconds per m/s of speed-dependent gap).
    pub reaction_time: R,
    /// Standstill gap offset, tied to the vehicle length.
    pub standstill: R,
    /// Minimum safe spacing.
    pub d_min: R,
    /// Time headway.
    pub headway: R,
    /// Vehicle body length.
    pub body_length: R,
}

impl<R: Real> Default for SpacingParams<R> {
    fn default() -> Self {
        Self {
            reaction_time: R::of(1.8),
            standstill: R::of(4.5),
            d_min: R::of(5.0),
            headway: R::of(1.5),
            body_length: R::of(4.5),
        }
    }
}

/// Rollover constraint parameters.
#[derive(Debug, Clone, Copy)]
pub struct RolloverParams<R> {
    /// Height of the center of gravity.
    pub cg_height: R,
    /// Half-width of the vehicle.
    pub half_width: R,
    pub gravity: R,
}

impl<R: Real> Default for RolloverParams<R> {
    fn default() -> Self {
        Self {
            cg_height: R::of(0.5),
            half_width: R::of(0.9),
            gravity: R::of(9.81),
        }
    }
}

/// Ring-lane membership bounds.
#[derive(Debug, Clone, Copy)]
pub struct AnnulusParams<R> {
    pub center: Point<R>,
    pub radius: R,
    pub half_width: R,
}

/// Positive-definite weighting matrices of the tracking cost.
#[derive(Debug, Clone, Copy)]
pub struct DmpcWeights<R> {
    pub state: Mat4<R>,
    pub input: Mat2<R>,
    pub delay_penalty: R,
}

impl<R: Real> DmpcWeights<R> {
    pub fn new(state: Mat4<R>, input: Mat2<R>, delay_penalty: R) -> Result<Self> {
        if !linalg::mat4_is_pd(&state) || !linalg::mat2_is_pd(&input) {
            return Err(SimError::Domain(
                "weighting matrices must be positive definite".into(),
            ));
        }
        if delay_penalty < R::zero() {
            return Err(SimError::Domain("delay penalty weight must be non-negative".into()));
        }
        Ok(Self {
            state,
            input,
            delay_penalty,
        })
    }

    pub fn diagonal(state: [R; 4], input: [R; 2], delay_penalty: R) -> Result<Self> {
        Self::new(linalg::mat4_diag(state), linalg::mat2_diag(input), delay_penalty)
    }
}

/// Solver configuration.
#[derive(Debug, Clone, Copy)]
pub struct SolverParams<R> {
    pub penalty_schedule: [R; 3],
    pub max_inner_iterations: usize,
    pub step_tolerance: R,
    /// Extra slack the solver keeps on spacing constraints.
    pub constraint_margin: R,
}

impl<R: Real> Default for SolverParams<R> {
    fn default() -> Self {
        Self {
            penalty_schedule: [R::of(1e2), R::of(1e3), R::of(1e4)],
            max_inner_iterations: 200,
            step_tolerance: R::of(1e-6),
            constraint_margin: R::of(0.01),
        }
    }
}

/// Constraint partner on the shared axis, assumed to hold its speed.
#[derive(Debug, Clone, Copy)]
pub struct NeighborInfo<R> {
    /// Center-to-center gap at the current tick, positive.
    pub gap: R,
    pub speed: R,
}

/// Reference pose and speed for one horizon stage.
#[derive(Debug, Clone, Copy)]
pub struct RefPoint<R> {
    pub x: R,
    pub y: R,
    pub heading: R,
    pub speed: R,
}

#[derive(Debug, Clone)]
pub struct DmpcProblem<R> {
    pub dt: R,
    pub horizon: usize,
    pub tick: u64,
    pub initial: VehicleState<R>,
    /// References for stages `1..=horizon`.
    pub reference: Vec<RefPoint<R>>,
    pub weights: DmpcWeights<R>,
    pub limits: Limits<R>,
    pub spacing: SpacingParams<R>,
    pub rollover: RolloverParams<R>,
    /// Lane annulus bounds; applied while circulating.
    pub annulus: Option<AnnulusParams<R>>,
    /// Path curvature along the horizon.
    pub curvature: R,
    pub predecessor: Option<NeighborInfo<R>>,
    pub follower: Option<NeighborInfo<R>>,
    /// Sliding-window mean communication delay, seconds.
    pub tau_bar: R,
    pub solver: SolverParams<R>,
}

/// Solved input sequence with its predicted rollout.
#[derive(Debug, Clone)]
pub struct ControlPlan<R> {
    pub inputs: Vec<ControlInput<R>>,
    /// Nonlinear rollout under `inputs`, including the initial state.
    pub states: Vec<VehicleState<R>>,
    /// Tracking + input cost plus the delay penalty term.
    pub cost: R,
    /// Most-violated constraint residual over the rollout; non-negative when
    /// every constraint holds.
    pub min_residual: R,
    pub degraded: bool,
    pub iterations: usize,
    pub final_penalty: R,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    /// Speed-dependent gap to the leader.
    SpacingLead,
    /// Speed-dependent gap to the follower.
    SpacingFollow,
    /// Delay-adjusted headway gap to the leader.
    DelayLeadHeadway,
    /// Delay-adjusted length gap to the leader.
    DelayLeadLength,
    /// Delay-adjusted headway gap demanded by the follower.
    DelayFollowHeadway,
    SpeedMin,
    SpeedMax,
    Rollover,
    AnnulusOuter,
    AnnulusInner,
}

/// Quadratic stage cost with heading wrap-around.
pub fn stage_cost<R: Real>(
    s: [R; 4],
    u: [R; 2],
    s_ref: [R; 4],
    state_w: &Mat4<R>,
    input_w: &Mat2<R>,
) -> R {
    let dev = [
        s[0] - s_ref[0],
        s[1] - s_ref[1],
        angle_diff(s[2], s_ref[2]),
        s[3] - s_ref[3],
    ];
    linalg::quad4(state_w, dev) + linalg::quad2(input_w, u)
}

/// Tracking + input cost of an input sequence under the nonlinear model,
/// plus the decision-independent delay penalty `lambda * N_p * tau_bar`.
pub fn total_cost<R: Real>(problem: &DmpcProblem<R>, inputs: &[[R; 2]]) -> R {
    let mut cost = R::zero();
    let mut state = problem.initial;
    for (j, u) in inputs.iter().enumerate() {
        let input = ControlInput::new(u[0], u[1], 0);
        state = dynamics::step(&state, &input, problem.dt, &problem.limits)
            .unwrap_or(state);
        let r = &problem.reference[j];
        cost += stage_cost(
            state.kinematic(),
            *u,
            [r.x, r.y, r.heading, r.speed],
            &problem.weights.state,
            &problem.weights.input,
        );
    }
    cost + problem.weights.delay_penalty * R::of(problem.horizon as f64) * problem.tau_bar
}

/// Residuals of the spacing constraints; feasible iff every residual is
/// non-negative. Constraints with an absent partner are skipped.
pub fn spacing_residuals<R: Real>(
    d_pre: Option<R>,
    d_fol: Option<R>,
    v_i: R,
    v_follower: R,
    params: &SpacingParams<R>,
    tau_bar: R,
    a_max: R,
) -> Vec<(ConstraintKind, R)> {
    let mut out = Vec::new();
    if let Some(d) = d_pre {
        out.push((
            ConstraintKind::SpacingLead,
            d - (params.reaction_time * v_i + params.standstill),
        ));
        out.push((
            ConstraintKind::DelayLeadHeadway,
            d - (params.d_min
                + v_i * params.headway
                + v_i * tau_bar
                + R::half() * a_max * tau_bar * tau_bar),
        ));
        out.push((
            ConstraintKind::DelayLeadLength,
            d - (params.body_length + params.standstill + v_i * tau_bar),
        ));
    }
    if let Some(d) = d_fol {
        out.push((
            ConstraintKind::SpacingFollow,
            d - (params.reaction_time * v_i + params.standstill),
        ));
        out.push((
            ConstraintKind::DelayFollowHeadway,
            d - (params.d_min + v_follower * params.headway + v_follower * tau_bar),
        ));
    }
    out
}

/// Residual of the rollover constraint: non-negative when safe.
pub fn rollover_residual<R: Real>(curvature: R, speed: R, params: &RolloverParams<R>) -> R {
    params.half_width * params.gravity - curvature * speed * speed * params.cg_height
}

/// Gap required from the leader when stopped; being below it means the
/// spacing constraints cannot be satisfied at any speed.
fn stopped_infeasible_gap<R: Real>(params: &SpacingParams<R>, tau_bar: R, a_max: R) -> R {
    let r10b = params.standstill;
    let r11a = params.d_min + R::half() * a_max * tau_bar * tau_bar;
    let r11b = params.body_length + params.standstill;
    r10b.max(r11a).max(r11b)
}

struct Rollout<R> {
    /// Kinematic states for stages `0..=horizon`.
    states: Vec<[R; 4]>,
    /// Leader gap per stage, when a leader exists.
    gap_pre: Vec<R>,
    /// Follower gap per stage, when a follower exists.
    gap_fol: Vec<R>,
}

impl<R: Real> DmpcProblem<R> {
    fn roll_affine(
        &self,
        inputs: &[[R; 2]],
        nominal: &[[R; 4]],
        nominal_u: &[[R; 2]],
        f_mats: &[Mat4<R>],
        g_mats: &[Mat4x2<R>],
    ) -> Rollout<R> {
        let n = self.horizon;
        let mut states = Vec::with_capacity(n + 1);
        let mut delta = [R::zero(); 4];
        states.push(nominal[0]);
        for j in 0..n {
            let du = [
                inputs[j][0] - nominal_u[j][0],
                inputs[j][1] - nominal_u[j][1],
            ];
            let fd = linalg::mat4_mul_vec(&f_mats[j], delta);
            let gd = linalg::mat4x2_mul_vec(&g_mats[j], du);
            for i in 0..4 {
                delta[i] = fd[i] + gd[i];
            }
            let mut s = nominal[j + 1];
            for i in 0..4 {
                s[i] += delta[i];
            }
            states.push(s);
        }
        self.attach_gaps(states)
    }

    fn roll_nonlinear(&self, inputs: &[[R; 2]]) -> Rollout<R> {
        let n = self.horizon;
        let mut states = Vec::with_capacity(n + 1);
        let mut state = self.initial;
        states.push(state.kinematic());
        for u in inputs.iter().take(n) {
            let input = ControlInput::new(u[0], u[1], 0);
            state = dynamics::step(&state, &input, self.dt, &self.limits).unwrap_or(state);
            states.push(state.kinematic());
        }
        self.attach_gaps(states)
    }

    fn attach_gaps(&self, states: Vec<[R; 4]>) -> Rollout<R> {
        let n = self.horizon;
        let mut gap_pre = Vec::new();
        let mut gap_fol = Vec::new();
        if let Some(pre) = &self.predecessor {
            gap_pre = Vec::with_capacity(n + 1);
            gap_pre.push(pre.gap);
            for j in 0..n {
                let g = gap_pre[j] + (pre.speed - states[j][3]) * self.dt;
                gap_pre.push(g);
            }
        }
        if let Some(fol) = &self.follower {
            gap_fol = Vec::with_capacity(n + 1);
            gap_fol.push(fol.gap);
            for j in 0..n {
                let g = gap_fol[j] + (states[j][3] - fol.speed) * self.dt;
                gap_fol.push(g);
            }
        }
        Rollout {
            states,
            gap_pre,
            gap_fol,
        }
    }

    /// Cost (tracking + input + weighted hinge penalties) of a rollout, and
    /// optionally its gradient contributions per stage.
    fn penalized_cost(
        &self,
        rollout: &Rollout<R>,
        inputs: &[[R; 2]],
        weight: R,
        margin: R,
        mut grads: Option<(&mut Vec<[R; 6]>, &mut Vec<[R; 2]>)>,
    ) -> R {
        let n = self.horizon;
        let mut cost = R::zero();
        for j in 1..=n {
            let s = rollout.states[j];
            let r = &self.reference[j - 1];
            let dev = [
                s[0] - r.x,
                s[1] - r.y,
                angle_diff(s[2], r.heading),
                s[3] - r.speed,
            ];
            cost += linalg::quad4(&self.weights.state, dev);
            if let Some((gs, _)) = grads.as_mut() {
                let mv = linalg::mat4_mul_vec(&self.weights.state, dev);
                for i in 0..4 {
                    gs[j][i] += R::two() * mv[i];
                }
            }

            // Hinge penalties. Each returns d(pen)/dr when violated.
            let mut hinge = |r: R, grads: &mut Option<(&mut Vec<[R; 6]>, &mut Vec<[R; 2]>)>,
                             apply: &dyn Fn(R, &mut [R; 6])| {
                if r < R::zero() {
                    cost += weight * r * r;
                    if let Some((gs, _)) = grads.as_mut() {
                        let dpen = R::two() * weight * r;
                        apply(dpen, &mut gs[j]);
                    }
                }
            };

            let v = s[3];
            hinge(v - self.limits.speed_min, &mut grads, &|d, g| g[3] -= d);
            hinge(self.limits.speed_max - v, &mut grads, &|d, g| g[3] += d);

            let roll = rollover_residual(self.curvature, v, &self.rollover);
            let curv = self.curvature;
            let hc = self.rollover.cg_height;
            hinge(roll, &mut grads, &|d, g| {
                g[3] += d * (-R::two() * curv * v * hc)
            });

            if let Some(a) = &self.annulus {
                let dx = s[0] - a.center.x;
                let dy = s[1] - a.center.y;
                let dist = (dx * dx + dy * dy).sqrt().max(R::of(1e-9));
                hinge(a.radius + a.half_width - dist, &mut grads, &|d, g| {
                    g[0] -= d * dx / dist;
                    g[1] -= d * dy / dist;
                });
                hinge(dist - (a.radius - a.half_width), &mut grads, &|d, g| {
                    g[0] += d * dx / dist;
                    g[1] += d * dy / dist;
                });
            }

            let sp = &self.spacing;
            if self.predecessor.is_some() {
                let gap = rollout.gap_pre[j];
                hinge(
                    gap - (sp.reaction_time * v + sp.standstill) - margin,
                    &mut grads,
                    &|d, g| {
                        g[4] += d;
                        g[3] -= d * sp.reaction_time;
                    },
                );
                let tb = self.tau_bar;
                let amax = self.limits.accel_max;
                hinge(
                    gap - (sp.d_min + v * sp.headway + v * tb + R::half() * amax * tb * tb)
                        - margin,
                    &mut grads,
                    &|d, g| {
                        g[4] += d;
                        g[3] -= d * (sp.headway + tb);
                    },
                );
                hinge(
                    gap - (sp.body_length + sp.standstill + v * tb) - margin,
                    &mut grads,
                    &|d, g| {
                        g[4] += d;
                        g[3] -= d * tb;
                    },
                );
            }
            if let Some(fol) = &self.follower {
                let gap = rollout.gap_fol[j];
                hinge(
                    gap - (sp.reaction_time * v + sp.standstill) - margin,
                    &mut grads,
                    &|d, g| {
                        g[5] += d;
                        g[3] -= d * sp.reaction_time;
                    },
                );
                let vf = fol.speed;
                hinge(
                    gap - (sp.d_min + vf * sp.headway + vf * self.tau_bar) - margin,
                    &mut grads,
                    &|d, g| g[5] += d,
                );
            }
        }
        for (j, u) in inputs.iter().enumerate().take(n) {
            cost += linalg::quad2(&self.weights.input, *u);
            if let Some((_, gu)) = grads.as_mut() {
                let mu = linalg::mat2_mul_vec(&self.weights.input, *u);
                gu[j][0] += R::two() * mu[0];
                gu[j][1] += R::two() * mu[1];
            }
        }
        cost
    }

    /// Worst constraint residual over a rollout (no margin).
    fn min_residual(&self, rollout: &Rollout<R>) -> R {
        let mut min_r = R::infinity();
        for j in 1..=self.horizon {
            let s = rollout.states[j];
            let v = s[3];
            min_r = min_r
                .min(v - self.limits.speed_min)
                .min(self.limits.speed_max - v)
                .min(rollover_residual(self.curvature, v, &self.rollover));
            if let Some(a) = &self.annulus {
                let dist =
                    ((s[0] - a.center.x).powi(2) + (s[1] - a.center.y).powi(2)).sqrt();
                min_r = min_r
                    .min(a.radius + a.half_width - dist)
                    .min(dist - (a.radius - a.half_width));
            }
            let d_pre = self.predecessor.as_ref().map(|_| rollout.gap_pre[j]);
            let d_fol = self.follower.as_ref().map(|_| rollout.gap_fol[j]);
            let v_f = self.follower.as_ref().map_or(R::zero(), |f| f.speed);
            for (_, r) in spacing_residuals(
                d_pre,
                d_fol,
                v,
                v_f,
                &self.spacing,
                self.tau_bar,
                self.limits.accel_max,
            ) {
                min_r = min_r.min(r);
            }
        }
        min_r
    }
}

/// Solves the horizon problem. Deterministic: identical problems and warm
/// starts produce identical plans.
pub fn solve<R: Real>(problem: &DmpcProblem<R>, warm_start: &[[R; 2]]) -> ControlPlan<R> {
    let n = problem.horizon;
    assert!(n >= 1, "horizon must be at least one step");
    assert_eq!(problem.reference.len(), n, "one reference per stage");

    let clamp_u = |u: [R; 2]| -> [R; 2] {
        [
            u[0].max(-problem.limits.accel_max).min(problem.limits.accel_max),
            u[1].max(-problem.limits.steer_max).min(problem.limits.steer_max),
        ]
    };

    // Infeasible even when stopped: emergency braking, flagged degraded.
    if let Some(pre) = &problem.predecessor {
        let req = stopped_infeasible_gap(&problem.spacing, problem.tau_bar, problem.limits.accel_max);
        if pre.gap < req {
            let steer = {
                let ff = (problem.initial.wheelbase * problem.curvature).atan();
                let corr = angle_diff(problem.reference[0].heading, problem.initial.heading);
                (ff + corr)
                    .max(-problem.limits.steer_max)
                    .min(problem.limits.steer_max)
            };
            let inputs_raw: Vec<[R; 2]> =
                vec![[-problem.limits.accel_max, steer]; n];
            let rollout = problem.roll_nonlinear(&inputs_raw);
            let states = rollout_states(problem, &rollout);
            return ControlPlan {
                inputs: pack_inputs(problem, &inputs_raw),
                states,
                cost: total_cost(problem, &inputs_raw),
                min_residual: problem.min_residual(&rollout),
                degraded: true,
                iterations: 0,
                final_penalty: R::zero(),
            };
        }
    }

    // Warm start, padded/truncated to the horizon and clamped into bounds.
    let mut warm: Vec<[R; 2]> = (0..n)
        .map(|j| clamp_u(*warm_start.get(j).unwrap_or(warm_start.last().unwrap_or(&[R::zero(); 2]))))
        .collect();
    if warm_start.is_empty() {
        warm = vec![[R::zero(); 2]; n];
    }

    // Linearize once around the warm-start rollout.
    let mut nominal = Vec::with_capacity(n + 1);
    let mut f_mats = Vec::with_capacity(n);
    let mut g_mats = Vec::with_capacity(n);
    let mut k = problem.initial.kinematic();
    nominal.push(k);
    for u in &warm {
        let (f, g) = dynamics::linearize_raw(k, *u, problem.initial.wheelbase, problem.dt);
        f_mats.push(f);
        g_mats.push(g);
        k = dynamics::step_raw(k, *u, problem.initial.wheelbase, problem.dt);
        nominal.push(k);
    }

    let margin = problem.solver.constraint_margin;
    let mut u = warm.clone();
    let mut total_iters = 0usize;
    let mut final_penalty = problem.solver.penalty_schedule[0];

    for &weight in &problem.solver.penalty_schedule {
        final_penalty = weight;
        let mut step_len = R::one();
        let mut cost = {
            let ro = problem.roll_affine(&u, &nominal, &warm, &f_mats, &g_mats);
            problem.penalized_cost(&ro, &u, weight, margin, None)
        };
        for _ in 0..problem.solver.max_inner_iterations {
            total_iters += 1;
            // Gradient by the adjoint pass over the augmented rollout.
            let ro = problem.roll_affine(&u, &nominal, &warm, &f_mats, &g_mats);
            let mut gs = vec![[R::zero(); 6]; n + 1];
            let mut gu = vec![[R::zero(); 2]; n];
            problem.penalized_cost(&ro, &u, weight, margin, Some((&mut gs, &mut gu)));

            let mut grad = vec![[R::zero(); 2]; n];
            let mut lam = gs[n];
            for j in (0..n).rev() {
                let kin = [lam[0], lam[1], lam[2], lam[3]];
                let gt = linalg::mat4x2_tr_mul_vec(&g_mats[j], kin);
                grad[j][0] = gu[j][0] + gt[0];
                grad[j][1] = gu[j][1] + gt[1];
                if j > 0 {
                    let ft = linalg::mat4_tr_mul_vec(&f_mats[j], kin);
                    let mut prev = gs[j];
                    for i in 0..4 {
                        prev[i] += ft[i];
                    }
                    // Gap recursion adjoints.
                    prev[3] += -problem.dt * lam[4] + problem.dt * lam[5];
                    prev[4] += lam[4];
                    prev[5] += lam[5];
                    lam = prev;
                }
            }

            // Projected gradient step with backtracking.
            let mut accepted = false;
            let mut t = step_len;
            for _ in 0..40 {
                let mut cand = u.clone();
                let mut dir_dot = R::zero();
                let mut step_norm2 = R::zero();
                for j in 0..n {
                    cand[j] = clamp_u([u[j][0] - t * grad[j][0], u[j][1] - t * grad[j][1]]);
                    let dx = cand[j][0] - u[j][0];
                    let dy = cand[j][1] - u[j][1];
                    dir_dot += grad[j][0] * dx + grad[j][1] * dy;
                    step_norm2 += dx * dx + dy * dy;
                }
                if step_norm2 == R::zero() {
                    break;
                }
                let ro_c = problem.roll_affine(&cand, &nominal, &warm, &f_mats, &g_mats);
                let cand_cost = problem.penalized_cost(&ro_c, &cand, weight, margin, None);
                if cand_cost <= cost + R::of(1e-4) * dir_dot {
                    let converged = step_norm2.sqrt() < problem.solver.step_tolerance;
                    u = cand;
                    cost = cand_cost;
                    step_len = (t * R::two()).min(R::of(64.0));
                    accepted = true;
                    if converged {
                        accepted = false;
                    }
                    break;
                }
                t *= R::half();
            }
            if !accepted {
                break;
            }
        }
    }

    // Keep whichever of solved/warm start scores better on the true rollout
    // under the final penalty weight.
    let weight = final_penalty;
    let eval_true = |inputs: &[[R; 2]]| {
        let ro = problem.roll_nonlinear(inputs);
        problem.penalized_cost(&ro, inputs, weight, R::zero(), None)
    };
    let solved_cost = eval_true(&u);
    let warm_cost = eval_true(&warm);
    if warm_cost < solved_cost {
        u = warm;
    }

    let rollout = problem.roll_nonlinear(&u);
    let states = rollout_states(problem, &rollout);
    ControlPlan {
        inputs: pack_inputs(problem, &u),
        states,
        cost: total_cost(problem, &u),
        min_residual: problem.min_residual(&rollout),
        degraded: false,
        iterations: total_iters,
        final_penalty,
    }
}

fn pack_inputs<R: Real>(problem: &DmpcProblem<R>, u: &[[R; 2]]) -> Vec<ControlInput<R>> {
    u.iter()
        .enumerate()
        .map(|(j, v)| ControlInput::new(v[0], v[1], problem.tick + j as u64))
        .collect()
}

fn rollout_states<R: Real>(problem: &DmpcProblem<R>, rollout: &Rollout<R>) -> Vec<VehicleState<R>> {
    rollout
        .states
        .iter()
        .map(|k| problem.initial.with_kinematic(*k))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::VehicleCategory;
    use crate::geometry::{PathPhase, RouteId};
    use approx::assert_relative_eq;

    fn initial(speed: f64) -> VehicleState<f64> {
        VehicleState {
            id: 1,
            x: 0.0,
            y: 0.0,
            heading: 0.0,
            speed,
            wheelbase: 2.7,
            category: VehicleCategory::Cav,
            route: RouteId { entry: 0, exit: 1 },
            entered_at: 0.0,
            phase: PathPhase::EntryRamp,
        }
    }

    fn straight_problem(speed: f64, horizon: usize) -> DmpcProblem<f64> {
        let reference = (1..=horizon)
            .map(|k| RefPoint {
                x: speed * 0.1 * k as f64,
                y: 0.0,
                heading: 0.0,
                speed,
            })
            .collect();
        DmpcProblem {
            dt: 0.1,
            horizon,
            tick: 0,
            initial: initial(speed),
            reference,
            weights: DmpcWeights::diagonal([1.0, 1.0, 0.1, 0.5], [0.1, 0.1], 0.1).unwrap(),
            limits: Limits::default(),
            spacing: SpacingParams::default(),
            rollover: RolloverParams::default(),
            annulus: None,
            curvature: 0.0,
            predecessor: None,
            follower: None,
            tau_bar: 0.0,
            solver: SolverParams::default(),
        }
    }

    #[test]
    fn stage_cost_examples() {
        let rw = linalg::mat4_diag([1.0, 1.0, 1.0, 1.0]);
        let qw = linalg::mat2_diag([1.0, 1.0]);
        assert_eq!(
            stage_cost([1.0, 2.0, 0.3, 4.0], [0.0; 2], [1.0, 2.0, 0.3, 4.0], &rw, &qw),
            0.0
        );
        assert_eq!(
            stage_cost([2.0, 0.0, 0.0, 0.0], [0.0; 2], [1.0, 0.0, 0.0, 0.0], &rw, &qw),
            1.0
        );
    }

    #[test]
    fn delay_penalty_term_arithmetic() {
        let mut p = straight_problem(10.0, 10);
        p.tau_bar = 0.2;
        // Zero deviations: coast along the reference.
        let u = vec![[0.0, 0.0]; 10];
        let cost = total_cost(&p, &u);
        assert_relative_eq!(cost, 0.1 * 10.0 * 0.2, epsilon = 1e-9);
    }

    #[test]
    fn non_pd_weights_rejected() {
        assert!(DmpcWeights::diagonal([1.0, 1.0, 0.0, 0.5], [0.1, 0.1], 0.1).is_err());
        assert!(DmpcWeights::diagonal([1.0, 1.0, 0.1, 0.5], [0.1, -0.1], 0.1).is_err());
    }

    #[test]
    fn spacing_residual_examples() {
        let p = SpacingParams::default();
        // Delay headway at the boundary.
        let r = spacing_residuals(Some(20.0), None, 10.0, 0.0, &p, 0.0, 5.0);
        let headway = r
            .iter()
            .find(|(k, _)| *k == ConstraintKind::DelayLeadHeadway)
            .unwrap();
        assert_relative_eq!(headway.1, 0.0);

        let r = spacing_residuals(Some(25.0), None, 10.0, 0.0, &p, 0.0, 5.0);
        let lead = r
            .iter()
            .find(|(k, _)| *k == ConstraintKind::SpacingLead)
            .unwrap();
        assert_relative_eq!(lead.1, 2.5);

        // Stationary case: threshold reduces to the minimum spacing.
        let r = spacing_residuals(Some(5.0), None, 0.0, 0.0, &p, 0.0, 5.0);
        let headway = r
            .iter()
            .find(|(k, _)| *k == ConstraintKind::DelayLeadHeadway)
            .unwrap();
        assert_relative_eq!(headway.1, 0.0);

        // Absent neighbors: no residuals.
        assert!(spacing_residuals::<f64>(None, None, 10.0, 0.0, &p, 0.0, 5.0).is_empty());
    }

    #[test]
    fn rollover_examples() {
        let p = RolloverParams::default();
        assert!(rollover_residual(0.0, 25.0, &p) > 0.0);
        assert_relative_eq!(
            rollover_residual(1.0 / 30.0, 20.0, &p),
            0.9 * 9.81 - (400.0 / 30.0) * 0.5,
            epsilon = 1e-12
        );
        // Speed solving the equality sits above the speed cap.
        let v_crit = (0.9_f64 * 9.81 * 30.0 / 0.5).sqrt();
        assert!(v_crit > 20.0 && v_crit < 24.0);
    }

    #[test]
    fn on_reference_plan_is_near_zero() {
        let p = straight_problem(10.0, 10);
        let plan = solve(&p, &[]);
        assert!(plan.cost <= 1e-6, "cost={}", plan.cost);
        for input in &plan.inputs {
            assert!(input.accel.abs() < 1e-3 && input.steer.abs() < 1e-3);
        }
        assert!(!plan.degraded);
    }

    #[test]
    fn parked_leader_at_dmin_forces_braking() {
        let mut p = straight_problem(10.0, 10);
        p.predecessor = Some(NeighborInfo { gap: 5.0, speed: 0.0 });
        let plan = solve(&p, &[]);
        assert!(plan.degraded);
        assert!(plan.inputs[0].accel <= 0.0);
        assert_eq!(plan.inputs[0].accel, -5.0);
    }

    #[test]
    fn close_leader_induces_braking() {
        let mut p = straight_problem(15.0, 10);
        // Gap feasible at low speed but violating at 15 m/s.
        p.predecessor = Some(NeighborInfo {
            gap: 20.0,
            speed: 15.0,
        });
        let plan = solve(&p, &[]);
        assert!(!plan.degraded);
        assert!(plan.inputs[0].accel < -0.5, "accel={}", plan.inputs[0].accel);
    }

    #[test]
    fn delay_term_never_changes_argmin() {
        let mut p = straight_problem(12.0, 10);
        p.predecessor = Some(NeighborInfo {
            gap: 26.0,
            speed: 11.0,
        });
        p.tau_bar = 0.2;
        let warm = vec![[0.3, 0.01]; 10];
        p.weights.delay_penalty = 0.0;
        let a = solve(&p, &warm);
        p.weights.delay_penalty = 1.0;
        let b = solve(&p, &warm);
        for (ua, ub) in a.inputs.iter().zip(&b.inputs) {
            assert_eq!(ua.accel, ub.accel);
            assert_eq!(ua.steer, ub.steer);
        }
        assert!(b.cost > a.cost);
    }

    #[test]
    fn solver_is_deterministic() {
        let mut p = straight_problem(14.0, 10);
        p.predecessor = Some(NeighborInfo {
            gap: 30.0,
            speed: 12.0,
        });
        let warm = vec![[0.1, 0.0]; 10];
        let a = solve(&p, &warm);
        let b = solve(&p, &warm);
        assert_eq!(a.cost, b.cost);
        for (ua, ub) in a.inputs.iter().zip(&b.inputs) {
            assert_eq!((ua.accel, ua.steer), (ub.accel, ub.steer));
        }
    }

    #[test]
    fn penalty_increases_with_violation() {
        let mut p = straight_problem(15.0, 5);
        p.predecessor = Some(NeighborInfo {
            gap: 25.0,
            speed: 15.0,
        });
        let eval = |gap: f64| {
            let mut q = p.clone();
            q.predecessor = Some(NeighborInfo { gap, speed: 15.0 });
            let ro = q.roll_nonlinear(&vec![[0.0, 0.0]; 5]);
            q.penalized_cost(&ro, &vec![[0.0, 0.0]; 5], 100.0, 0.0, None)
        };
        // Deeper violation, strictly larger penalized objective.
        assert!(eval(20.0) > eval(25.0));
        assert!(eval(15.0) > eval(20.0));
    }

    #[test]
    fn improves_on_feasible_warm_start() {
        let mut p = straight_problem(8.0, 10);
        // Reference asks for 12 m/s; a zero warm start is feasible.
        for (k, r) in p.reference.iter_mut().enumerate() {
            r.speed = 12.0;
            r.x = 8.0 * 0.1 * (k + 1) as f64;
        }
        let warm = vec![[0.0, 0.0]; 10];
        let plan = solve(&p, &warm);
        let warm_cost = total_cost(&p, &warm);
        assert!(plan.cost <= warm_cost + 1e-9);
    }

    #[test]
    fn unconstrained_single_step_matches_least_squares() {
        // The quadratic subproblem over the linearized model must agree with
        // the closed-form solution.
        let mut state = 0xc0ffee123456789u64;
        let mut rand = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..100 {
            let speed = 5.0 + rand() * 10.0;
            let mut p = straight_problem(speed, 1);
            p.initial.heading = rand() * 0.4 - 0.2;
            p.reference[0] = RefPoint {
                x: rand() * 2.0,
                y: rand() * 2.0 - 1.0,
                heading: rand() * 0.2 - 0.1,
                speed: speed + rand() * 2.0 - 1.0,
            };
            // Generous bounds so the projection never binds.
            p.limits.accel_max = 1e6;
            p.limits.steer_max = 1e6;
            p.limits.speed_max = 1e6;
            p.limits.speed_min = -1e6;
            p.solver.step_tolerance = 1e-12;
            p.solver.max_inner_iterations = 4000;

            let plan = solve(&p, &[[0.0, 0.0]]);

            // Closed form: min (G u - b)^T R (G u - b) + u^T Q u with the
            // affine prediction s1 = base + G u linearized at u = 0.
            let (_, g) = dynamics::linearize_raw(
                p.initial.kinematic(),
                [0.0, 0.0],
                p.initial.wheelbase,
                p.dt,
            );
            let base = dynamics::step_raw(p.initial.kinematic(), [0.0, 0.0], p.initial.wheelbase, p.dt);
            let r = &p.reference[0];
            let b = [
                r.x - base[0],
                r.y - base[1],
                crate::scalar::angle_diff(r.heading, base[2]),
                r.speed - base[3],
            ];
            let rw = &p.weights.state;
            let qw = &p.weights.input;
            // Normal equations: (G^T R G + Q) u = G^T R b.
            let rg = [
                linalg::mat4_mul_vec(rw, [g[0][0], g[1][0], g[2][0], g[3][0]]),
                linalg::mat4_mul_vec(rw, [g[0][1], g[1][1], g[2][1], g[3][1]]),
            ];
            let mut h = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    h[i][j] = (0..4).map(|k| [g[0][i], g[1][i], g[2][i], g[3][i]][k] * rg[j][k]).sum::<f64>()
                        + qw[i][j];
                }
            }
            let rb = linalg::mat4_mul_vec(rw, b);
            let gt_rb = [
                g[0][0] * rb[0] + g[1][0] * rb[1] + g[2][0] * rb[2] + g[3][0] * rb[3],
                g[0][1] * rb[0] + g[1][1] * rb[1] + g[2][1] * rb[2] + g[3][1] * rb[3],
            ];
            let u_star = linalg::mat2_solve(&h, gt_rb).unwrap();
            assert!(
                (plan.inputs[0].accel - u_star[0]).abs() < 1e-6,
                "accel {} vs {}",
                plan.inputs[0].accel,
                u_star[0]
            );
            assert!(
                (plan.inputs[0].steer - u_star[1]).abs() < 1e-6,
                "steer {} vs {}",
                plan.inputs[0].steer,
                u_star[1]
            );
        }
    }
}
