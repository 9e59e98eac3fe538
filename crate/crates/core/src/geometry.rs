//! Roundabout layout and position mapping.
//!
//! The ring is a circle traversed counter-clockwise. Each leg `j` has an entry
//! ramp that joins the ring tangentially at merge point `M_j` and an exit ramp
//! that leaves the ring tangentially a short arc upstream of `M_j`. Ring and
//! ramp positions near a merge point are made comparable by projecting them to
//! a shared scalar axis: the signed remaining path distance to the merge point
//! (negative upstream, positive once past it).

use crate::error::{Result, SimError};
use crate::scalar::{normalize_angle, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point<R> {
    pub x: R,
    pub y: R,
}

impl<R: Real> Point<R> {
    pub fn new(x: R, y: R) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point<R>) -> R {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// A ramp merging with / diverging from the ring at a conflict point.
#[derive(Debug, Clone, Copy)]
pub struct MergePoint<R> {
    pub id: usize,
    /// Ring angle of the conflict point.
    pub angle: R,
    /// Arc-length coordinate of the conflict point on the ring.
    pub arc: R,
    pub position: Point<R>,
}

/// Phase of a route: entry ramp, circulating ring, or exit ramp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PathPhase {
    EntryRamp,
    Ring,
    ExitRamp,
}

/// Pose of a point on a route, with the local path curvature.
#[derive(Debug, Clone, Copy)]
pub struct PathPose<R> {
    pub x: R,
    pub y: R,
    pub heading: R,
    pub curvature: R,
    pub phase: PathPhase,
}

/// Identifies a route through the roundabout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct RouteId {
    pub entry: usize,
    pub exit: usize,
}

/// A position expressed along a route.
#[derive(Debug, Clone, Copy)]
pub struct RoutePosition<R> {
    pub route: RouteId,
    pub progress: R,
}

/// Scalar projection of a vehicle position onto a merge point's virtual axis.
#[derive(Debug, Clone, Copy)]
pub struct ZProjection<R> {
    pub merge_point: usize,
    /// Signed distance along the merged virtual axis; negative = upstream.
    pub z: R,
}

#[derive(Debug, Clone)]
pub struct RoundaboutLayout<R> {
    pub center: Point<R>,
    /// Ring radius `TR`.
    pub ring_radius: R,
    /// Lane width `w_d`.
    pub lane_width: R,
    /// Per-segment arc lengths; segment `j` spans from `M_j` to `M_{j+1}`.
    pub segment_lengths: Vec<R>,
    pub merge_points: Vec<MergePoint<R>>,
    pub ramp_length: R,
    /// Arc distance by which each exit point precedes its leg's merge point.
    pub exit_offset: R,
    routes: Vec<RoutePath<R>>,
}

impl<R: Real> RoundaboutLayout<R> {
    /// Builds a layout with `legs` equally spaced entry/exit pairs.
    pub fn new(
        center: Point<R>,
        ring_radius: R,
        lane_width: R,
        ramp_length: R,
        legs: usize,
        exit_offset: R,
    ) -> Result<Self> {
        if !(ring_radius > R::zero()) || !(lane_width > R::zero()) || !(ramp_length > R::zero()) {
            return Err(SimError::Domain(
                "ring radius, lane width and ramp length must be positive".into(),
            ));
        }
        if legs < 1 {
            return Err(SimError::Domain("at least one leg is required".into()));
        }
        let circumference = R::two_pi() * ring_radius;
        let seg = circumference / R::of(legs as f64);
        if exit_offset < R::zero() || exit_offset >= seg {
            return Err(SimError::Domain(
                "exit offset must lie within one segment".into(),
            ));
        }
        let merge_points: Vec<MergePoint<R>> = (0..legs)
            .map(|j| {
                let angle = R::two_pi() * R::of(j as f64) / R::of(legs as f64);
                MergePoint {
                    id: j,
                    angle,
                    arc: angle * ring_radius,
                    position: Point::new(
                        center.x + ring_radius * angle.cos(),
                        center.y + ring_radius * angle.sin(),
                    ),
                }
            })
            .collect();
        let segment_lengths = vec![seg; legs];
        let mut layout = Self {
            center,
            ring_radius,
            lane_width,
            segment_lengths,
            merge_points,
            ramp_length,
            exit_offset,
            routes: Vec::new(),
        };
        layout.validate()?;
        let mut routes = Vec::with_capacity(legs * legs);
        for entry in 0..legs {
            for exit in 0..legs {
                routes.push(RoutePath::build(&layout, RouteId { entry, exit }));
            }
        }
        layout.routes = routes;
        Ok(layout)
    }

    fn validate(&self) -> Result<()> {
        if self.segment_lengths.iter().any(|l| !(*l > R::zero())) {
            return Err(SimError::Domain("segment lengths must be positive".into()));
        }
        if self.merge_points.len() != self.segment_lengths.len() {
            return Err(SimError::Domain(
                "one segment per merge point is required".into(),
            ));
        }
        let total: R = self
            .segment_lengths
            .iter()
            .fold(R::zero(), |acc, l| acc + *l);
        let err = (total - self.circumference()).abs();
        if err > R::of(1e-6) {
            return Err(SimError::Domain(format!(
                "segment lengths must tile the ring (off by {err:?} m)"
            )));
        }
        Ok(())
    }

    pub fn legs(&self) -> usize {
        self.merge_points.len()
    }

    pub fn circumference(&self) -> R {
        R::two_pi() * self.ring_radius
    }

    pub fn route(&self, id: RouteId) -> &RoutePath<R> {
        &self.routes[id.entry * self.legs() + id.exit]
    }

    /// Ring segment containing the given arc coordinate.
    pub fn segment_of_arc(&self, arc: R) -> usize {
        let circ = self.circumference();
        let mut s = arc % circ;
        if s < R::zero() {
            s += circ;
        }
        let mut acc = R::zero();
        for (j, len) in self.segment_lengths.iter().enumerate() {
            acc += *len;
            if s < acc {
                return j;
            }
        }
        self.segment_lengths.len() - 1
    }

    /// Maps an arc-length coordinate on the ring centerline to a pose.
    ///
    /// The returned point satisfies `|(x, y) - center| = TR` and the heading is
    /// the counter-clockwise tangent direction.
    pub fn arc_to_cartesian(&self, s_arc: R) -> Result<(R, R, R)> {
        if !s_arc.is_finite() {
            return Err(SimError::NonFinite("arc coordinate"));
        }
        if s_arc < R::zero() || s_arc >= self.circumference() {
            return Err(SimError::Domain(format!(
                "arc coordinate {s_arc:?} outside [0, circumference)"
            )));
        }
        let phi = s_arc / self.ring_radius;
        let x = self.center.x + self.ring_radius * phi.cos();
        let y = self.center.y + self.ring_radius * phi.sin();
        let heading = normalize_angle(phi + R::pi() * R::half());
        Ok((x, y, heading))
    }

    /// Projects a route position onto a merge point's virtual axis.
    ///
    /// Errors with [`SimError::NotApplicable`] when the merge point does not
    /// lie on the vehicle's route (for ramp vehicles, only their own entry's
    /// merge point and downstream ring merge points apply).
    pub fn project_to_z(
        &self,
        pos: &RoutePosition<R>,
        merge_point: usize,
    ) -> Result<ZProjection<R>> {
        let path = self.route(pos.route);
        match path.merge_coord(merge_point) {
            Some(pm) => Ok(ZProjection {
                merge_point,
                z: pos.progress - pm,
            }),
            None => Err(SimError::NotApplicable {
                vehicle: 0,
                merge_point,
            }),
        }
    }

    /// Remaining path distance to the merge point; zero at or past it.
    pub fn distance_to_merge(&self, pos: &RoutePosition<R>, merge_point: usize) -> Result<R> {
        let z = self.project_to_z(pos, merge_point)?.z;
        Ok(if z < R::zero() { -z } else { R::zero() })
    }
}

/// One leg-to-leg route: entry ramp, ring arc, exit ramp.
#[derive(Debug, Clone)]
pub struct RoutePath<R> {
    pub id: RouteId,
    ramp_length: R,
    /// Arc coordinate of the entry merge point.
    entry_arc: R,
    /// Length of the circulating arc between merge-in and divergence.
    ring_length: R,
    circumference: R,
    ring_radius: R,
    center: Point<R>,
    entry_start: Point<R>,
    entry_dir: (R, R),
    entry_heading: R,
    exit_start: Point<R>,
    exit_dir: (R, R),
    exit_heading: R,
    /// Merge points on this route with their path coordinates.
    merges: Vec<(usize, R)>,
}

impl<R: Real> RoutePath<R> {
    fn build(layout: &RoundaboutLayout<R>, id: RouteId) -> Self {
        let circ = layout.circumference();
        let tr = layout.ring_radius;
        let entry_mp = &layout.merge_points[id.entry];
        let exit_mp = &layout.merge_points[id.exit];

        let entry_heading = normalize_angle(entry_mp.angle + R::pi() * R::half());
        let entry_dir = (entry_heading.cos(), entry_heading.sin());
        let entry_start = Point::new(
            entry_mp.position.x - layout.ramp_length * entry_dir.0,
            entry_mp.position.y - layout.ramp_length * entry_dir.1,
        );

        let exit_arc = {
            let mut a = exit_mp.arc - layout.exit_offset;
            if a < R::zero() {
                a += circ;
            }
            a
        };
        let mut ring_length = exit_arc - entry_mp.arc;
        while ring_length <= R::zero() {
            ring_length += circ;
        }
        let exit_angle = exit_arc / tr;
        let exit_heading = normalize_angle(exit_angle + R::pi() * R::half());
        let exit_dir = (exit_heading.cos(), exit_heading.sin());
        let exit_start = Point::new(
            layout.center.x + tr * exit_angle.cos(),
            layout.center.y + tr * exit_angle.sin(),
        );

        let mut merges = Vec::new();
        for mp in &layout.merge_points {
            let mut rel = mp.arc - entry_mp.arc;
            if rel < R::zero() {
                rel += circ;
            }
            if rel <= ring_length {
                merges.push((mp.id, layout.ramp_length + rel));
            }
        }
        merges.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());

        Self {
            id,
            ramp_length: layout.ramp_length,
            entry_arc: entry_mp.arc,
            ring_length,
            circumference: circ,
            ring_radius: tr,
            center: layout.center,
            entry_start,
            entry_dir,
            entry_heading,
            exit_start,
            exit_dir,
            exit_heading,
            merges,
        }
    }

    pub fn length(&self) -> R {
        self.ramp_length + self.ring_length + self.ramp_length
    }

    /// Path coordinate of a merge point on this route, if it lies on it.
    pub fn merge_coord(&self, merge_point: usize) -> Option<R> {
        self.merges
            .iter()
            .find(|(id, _)| *id == merge_point)
            .map(|(_, p)| *p)
    }

    pub fn merges(&self) -> &[(usize, R)] {
        &self.merges
    }

    pub fn phase_at(&self, progress: R) -> PathPhase {
        if progress < self.ramp_length {
            PathPhase::EntryRamp
        } else if progress < self.ramp_length + self.ring_length {
            PathPhase::Ring
        } else {
            PathPhase::ExitRamp
        }
    }

    /// Arc coordinate on the ring for a ring-phase progress value.
    pub fn arc_at(&self, progress: R) -> Option<R> {
        if self.phase_at(progress) != PathPhase::Ring {
            return None;
        }
        let mut arc = self.entry_arc + (progress - self.ramp_length);
        while arc >= self.circumference {
            arc -= self.circumference;
        }
        Some(arc)
    }

    /// Pose at a path coordinate. Values beyond the ends clamp to the ends.
    pub fn pose_at(&self, progress: R) -> PathPose<R> {
        let p = progress.max(R::zero()).min(self.length());
        match self.phase_at(p) {
            PathPhase::EntryRamp => PathPose {
                x: self.entry_start.x + p * self.entry_dir.0,
                y: self.entry_start.y + p * self.entry_dir.1,
                heading: self.entry_heading,
                curvature: R::zero(),
                phase: PathPhase::EntryRamp,
            },
            PathPhase::Ring => {
                let arc = self.entry_arc + (p - self.ramp_length);
                let phi = arc / self.ring_radius;
                PathPose {
                    x: self.center.x + self.ring_radius * phi.cos(),
                    y: self.center.y + self.ring_radius * phi.sin(),
                    heading: normalize_angle(phi + R::pi() * R::half()),
                    curvature: R::one() / self.ring_radius,
                    phase: PathPhase::Ring,
                }
            }
            PathPhase::ExitRamp => {
                let q = p - self.ramp_length - self.ring_length;
                PathPose {
                    x: self.exit_start.x + q * self.exit_dir.0,
                    y: self.exit_start.y + q * self.exit_dir.1,
                    heading: self.exit_heading,
                    curvature: R::zero(),
                    phase: PathPhase::ExitRamp,
                }
            }
        }
    }

    /// Projects a planar position onto the path. The projection is local:
    /// only candidates within a few meters of `hint` (the previous progress)
    /// are considered, so corridors that pass near each other in the plane
    /// cannot capture a vehicle that is not on them.
    pub fn project(&self, x: R, y: R, hint: R) -> R {
        let window = R::of(4.0);
        let mut best_p = hint.max(R::zero()).min(self.length());
        let mut best_d = R::infinity();
        let mut consider = |p: R| {
            if (p - hint).abs() > window {
                return;
            }
            let pose = self.pose_at(p);
            let d = (pose.x - x).powi(2) + (pose.y - y).powi(2);
            if d < best_d - R::of(1e-12) || (d <= best_d + R::of(1e-12) && (p - hint).abs() < (best_p - hint).abs())
            {
                best_d = d;
                best_p = p;
            }
        };

        // Entry ramp candidate.
        let q = ((x - self.entry_start.x) * self.entry_dir.0
            + (y - self.entry_start.y) * self.entry_dir.1)
            .max(R::zero())
            .min(self.ramp_length);
        consider(q);

        // Ring candidate, unwrapped near the hint.
        let ang = (y - self.center.y).atan2(x - self.center.x);
        let mut arc = ang * self.ring_radius - self.entry_arc;
        while arc < R::zero() {
            arc += self.circumference;
        }
        while arc >= self.circumference {
            arc -= self.circumference;
        }
        let ring_hint = hint - self.ramp_length;
        for k in [-R::one(), R::zero(), R::one()] {
            let cand = arc + k * self.circumference;
            if cand >= -R::of(1e-9) && cand <= self.ring_length + R::of(1e-9) {
                consider(self.ramp_length + cand.max(R::zero()).min(self.ring_length));
            } else if (cand - ring_hint).abs() < self.circumference * R::half() {
                consider(self.ramp_length + cand.max(R::zero()).min(self.ring_length));
            }
        }

        // Exit ramp candidate.
        let q = ((x - self.exit_start.x) * self.exit_dir.0
            + (y - self.exit_start.y) * self.exit_dir.1)
            .max(R::zero())
            .min(self.ramp_length);
        consider(self.ramp_length + self.ring_length + q);

        best_p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn layout() -> RoundaboutLayout<f64> {
        RoundaboutLayout::new(Point::new(0.0, 0.0), 30.0, 4.0, 60.0, 3, 10.0).unwrap()
    }

    #[test]
    fn arc_zero_maps_to_reference_angle() {
        let l = layout();
        let (x, y, th) = l.arc_to_cartesian(0.0).unwrap();
        assert_relative_eq!(x, 30.0, epsilon = 1e-12);
        assert_relative_eq!(y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(th, PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn quarter_circumference() {
        let l = layout();
        let (x, y, th) = l.arc_to_cartesian(l.circumference() / 4.0).unwrap();
        assert_relative_eq!(x, 0.0, epsilon = 1e-9);
        assert_relative_eq!(y, 30.0, epsilon = 1e-9);
        assert_relative_eq!(th, PI, epsilon = 1e-12);
    }

    #[test]
    fn radius_identity_holds_everywhere() {
        let l = layout();
        let mut s = 0.0;
        while s < l.circumference() {
            let (x, y, _) = l.arc_to_cartesian(s).unwrap();
            assert_relative_eq!((x * x + y * y).sqrt(), 30.0, epsilon = 1e-9);
            s += 1.7;
        }
    }

    #[test]
    fn out_of_range_arc_is_domain_error() {
        let l = layout();
        assert!(l.arc_to_cartesian(-1.0).is_err());
        assert!(l.arc_to_cartesian(l.circumference()).is_err());
    }

    #[test]
    fn segments_tile_the_ring() {
        let l = layout();
        let total: f64 = l.segment_lengths.iter().sum();
        assert!((total - l.circumference()).abs() < 1e-6);
    }

    #[test]
    fn z_is_zero_at_merge_point() {
        let l = layout();
        let route = RouteId { entry: 0, exit: 1 };
        let pm = l.route(route).merge_coord(0).unwrap();
        let z = l
            .project_to_z(&RoutePosition { route, progress: pm }, 0)
            .unwrap();
        assert_eq!(z.z, 0.0);
    }

    #[test]
    fn ramp_vehicle_25m_before_merge() {
        let l = layout();
        let route = RouteId { entry: 0, exit: 1 };
        let pm = l.route(route).merge_coord(0).unwrap();
        let z = l
            .project_to_z(
                &RoutePosition {
                    route,
                    progress: pm - 25.0,
                },
                0,
            )
            .unwrap();
        assert_relative_eq!(z.z, -25.0, epsilon = 1e-12);
        assert_relative_eq!(
            l.distance_to_merge(
                &RoutePosition {
                    route,
                    progress: pm - 25.0
                },
                0
            )
            .unwrap(),
            25.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn ramp_vehicle_orders_ahead_of_farther_ring_vehicle() {
        let l = layout();
        // Ring vehicle that entered at leg 2 and approaches merge point 0.
        let ring_route = RouteId { entry: 2, exit: 1 };
        let ring_pm = l.route(ring_route).merge_coord(0).unwrap();
        let ring = l
            .project_to_z(
                &RoutePosition {
                    route: ring_route,
                    progress: ring_pm - 40.0,
                },
                0,
            )
            .unwrap();
        let ramp_route = RouteId { entry: 0, exit: 1 };
        let ramp_pm = l.route(ramp_route).merge_coord(0).unwrap();
        let ramp = l
            .project_to_z(
                &RoutePosition {
                    route: ramp_route,
                    progress: ramp_pm - 25.0,
                },
                0,
            )
            .unwrap();
        assert!(ramp.z > ring.z);
    }

    #[test]
    fn half_ring_distance() {
        let l = layout();
        let route = RouteId { entry: 1, exit: 1 };
        // Position on the ring exactly half a circumference upstream of M0.
        let pm = l.route(route).merge_coord(0).unwrap();
        let d = l
            .distance_to_merge(
                &RoutePosition {
                    route,
                    progress: pm - PI * 30.0,
                },
                0,
            )
            .unwrap();
        assert_relative_eq!(d, PI * 30.0, epsilon = 1e-9);
    }

    #[test]
    fn merge_not_on_route_is_not_applicable() {
        let l = layout();
        // Entry 0 exiting at leg 2 never reaches merge point 2 (the exit
        // diverges upstream of it).
        let route = RouteId { entry: 0, exit: 2 };
        let err = l.project_to_z(&RoutePosition { route, progress: 5.0 }, 2);
        assert!(matches!(err, Err(SimError::NotApplicable { .. })));
    }

    #[test]
    fn advancing_reduces_remaining_distance() {
        let l = layout();
        let route = RouteId { entry: 0, exit: 1 };
        let path = l.route(route);
        let pm = path.merge_coord(0).unwrap();
        let mut p = 3.0;
        let mut last = l
            .project_to_z(&RoutePosition { route, progress: p }, 0)
            .unwrap()
            .z;
        while p + 1.0 < pm {
            p += 1.0;
            let z = l
                .project_to_z(&RoutePosition { route, progress: p }, 0)
                .unwrap()
                .z;
            assert_relative_eq!(z - last, 1.0, epsilon = 1e-9);
            last = z;
        }
    }

    #[test]
    fn project_recovers_progress_on_every_phase() {
        let l = layout();
        let route = RouteId { entry: 0, exit: 2 };
        let path = l.route(route);
        let mut p = 0.0;
        while p < path.length() {
            let pose = path.pose_at(p);
            let rec = path.project(pose.x, pose.y, p - 0.4);
            assert!((rec - p).abs() < 1e-6, "p={p} rec={rec}");
            p += 1.3;
        }
    }

    #[test]
    fn ring_poses_stay_on_annulus() {
        let l = layout();
        let route = RouteId { entry: 2, exit: 1 };
        let path = l.route(route);
        let mut p = 60.0;
        while path.phase_at(p) == PathPhase::Ring {
            let pose = path.pose_at(p);
            let r = (pose.x * pose.x + pose.y * pose.y).sqrt();
            assert!(r >= 30.0 - 2.0 && r <= 30.0 + 2.0);
            p += 2.1;
        }
    }

    #[test]
    fn entry_ramp_joins_tangentially() {
        let l = layout();
        let route = RouteId { entry: 1, exit: 2 };
        let path = l.route(route);
        let before = path.pose_at(59.999);
        let after = path.pose_at(60.001);
        assert!((before.heading - after.heading).abs() < 1e-3);
        assert!(before.phase == PathPhase::EntryRamp && after.phase == PathPhase::Ring);
    }
}
