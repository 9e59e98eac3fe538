//! Per-merge-point entry sequencing.
//!
//! Vehicles near a merge point form a virtual platoon on the shared axis. A
//! binary assignment matrix maps vehicles to virtual car-following slots; the
//! sequencer picks the assignment minimizing a multi-scale objective that
//! combines spacing/velocity deviation indicators, estimated travel time, and
//! segment-density imbalance, solved exactly by branch-and-bound.
//!
//! Matrix rows follow the canonical platoon enumeration (approach, then
//! front-to-back). The precedence constraint is scoped per approach when
//! candidate assignments are enumerated: vehicles on one lane cannot overtake
//! each other, while cross-approach interleaving is free. Human-driven
//! vehicles and near-merge frozen vehicles are pinned to their observed
//! relative order.

use crate::error::{Result, SimError};
use crate::scalar::Real;

/// Which approach a platoon member occupies relative to the merge point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Approach {
    Ring,
    Ramp,
}

#[derive(Debug, Clone, Copy)]
pub struct PlatoonMember<R> {
    pub id: u64,
    pub approach: Approach,
    /// Observed position on the merge point's virtual axis.
    pub z: R,
    /// Observed speed.
    pub speed: R,
    pub is_cav: bool,
    /// Near-merge members keep their committed slot order.
    pub frozen: bool,
    /// Kinematic time from the current position to the merge point, seconds.
    pub time_to_merge: R,
    /// Kinematic time from the merge point to the route exit, seconds.
    pub time_merge_to_exit: R,
    /// Ring segment this member will add a vehicle to when it enters, if any.
    pub enters_segment: Option<usize>,
}

/// Observation snapshot a merge-point controller sequences on.
#[derive(Debug, Clone)]
pub struct PlatoonSnapshot<R> {
    pub merge_point: usize,
    /// Members in canonical order: approach, then z descending, then id.
    pub members: Vec<PlatoonMember<R>>,
    /// Desired inter-slot spacing.
    pub desired_spacing: R,
    /// Seconds of waiting added per predecessor slot.
    pub slot_wait: R,
    /// Vehicles already counted per ring segment.
    pub initial_counts: Vec<usize>,
    pub segment_lengths: Vec<R>,
    /// Previously committed slot order (vehicle ids, front first).
    pub committed: Vec<u64>,
}

impl<R: Real> PlatoonSnapshot<R> {
    pub fn new(
        merge_point: usize,
        mut members: Vec<PlatoonMember<R>>,
        desired_spacing: R,
        slot_wait: R,
        initial_counts: Vec<usize>,
        segment_lengths: Vec<R>,
        committed: Vec<u64>,
    ) -> Self {
        members.sort_by(|a, b| {
            a.approach
                .cmp(&b.approach)
                .then(b.z.partial_cmp(&a.z).unwrap_or(std::cmp::Ordering::Equal))
                .then(a.id.cmp(&b.id))
        });
        Self {
            merge_point,
            members,
            desired_spacing,
            slot_wait,
            initial_counts,
            segment_lengths,
            committed,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// True when `a` is observed ahead of `b` on the shared axis.
    fn z_ahead(&self, a: usize, b: usize) -> bool {
        let (ma, mb) = (&self.members[a], &self.members[b]);
        match ma.z.partial_cmp(&mb.z) {
            Some(std::cmp::Ordering::Greater) => true,
            Some(std::cmp::Ordering::Less) => false,
            _ => ma.id < mb.id,
        }
    }

    /// Pairwise precedence constraints `(a, b)` requiring slot(a) < slot(b).
    ///
    /// Same-approach pairs keep their lane order; pairs involving a
    /// human-driven vehicle keep the observed order; pairs involving a frozen
    /// vehicle keep the committed order. Constraints are added in that
    /// priority; any later pair that would close a cycle is dropped.
    pub fn precedence(&self) -> Vec<(usize, usize)> {
        let n = self.members.len();
        let mut reach = vec![vec![false; n]; n];
        let mut pairs = Vec::new();
        let add = |pairs: &mut Vec<(usize, usize)>, reach: &mut Vec<Vec<bool>>, a: usize, b: usize| {
            if reach[b][a] || reach[a][b] {
                return;
            }
            pairs.push((a, b));
            // Transitive closure update.
            let mut stack = vec![b];
            let mut seen = vec![false; n];
            while let Some(x) = stack.pop() {
                if seen[x] {
                    continue;
                }
                seen[x] = true;
                for y in 0..n {
                    if reach[x][y] && !seen[y] {
                        stack.push(y);
                    }
                }
            }
            for (pred, r) in reach.iter_mut().enumerate() {
                if pred == a || r[a] {
                    for (y, hit) in seen.iter().enumerate() {
                        if *hit {
                            r[y] = true;
                        }
                    }
                    r[b] = true;
                }
            }
            reach[a][b] = true;
            for (y, hit) in seen.iter().enumerate() {
                if *hit {
                    reach[a][y] = true;
                }
            }
        };

        for a in 0..n {
            for b in 0..n {
                if a != b
                    && self.members[a].approach == self.members[b].approach
                    && self.z_ahead(a, b)
                {
                    add(&mut pairs, &mut reach, a, b);
                }
            }
        }
        for a in 0..n {
            for b in 0..n {
                if a == b || (self.members[a].is_cav && self.members[b].is_cav) {
                    continue;
                }
                if self.z_ahead(a, b) {
                    add(&mut pairs, &mut reach, a, b);
                }
            }
        }
        for a in 0..n {
            for b in 0..n {
                if a == b || !(self.members[a].frozen || self.members[b].frozen) {
                    continue;
                }
                let ca = self.committed.iter().position(|id| *id == self.members[a].id);
                let cb = self.committed.iter().position(|id| *id == self.members[b].id);
                let a_first = match (ca, cb) {
                    (Some(x), Some(y)) => x < y,
                    _ => self.z_ahead(a, b),
                };
                if a_first {
                    add(&mut pairs, &mut reach, a, b);
                }
            }
        }
        pairs
    }

    /// True iff a slot-major order of member indices respects all pins.
    pub fn order_allowed(&self, order: &[usize]) -> bool {
        if order.len() != self.members.len() {
            return false;
        }
        let mut pos = vec![usize::MAX; self.members.len()];
        for (slot, &m) in order.iter().enumerate() {
            if m >= pos.len() || pos[m] != usize::MAX {
                return false;
            }
            pos[m] = slot;
        }
        self.precedence().iter().all(|&(a, b)| pos[a] < pos[b])
    }
}

/// Binary assignment of platoon rows to virtual car-following slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceMatrix {
    n: usize,
    bits: Vec<bool>,
}

impl SequenceMatrix {
    pub fn identity(n: usize) -> Self {
        let mut bits = vec![false; n * n];
        for i in 0..n {
            bits[i * n + i] = true;
        }
        Self { n, bits }
    }

    pub fn from_entries(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        for r in rows {
            if r.len() != n {
                return Err(SimError::MatrixShape {
                    rows: n,
                    cols: r.len(),
                });
            }
        }
        let bits = rows.iter().flatten().map(|v| *v != 0).collect();
        Ok(Self { n, bits })
    }

    /// Builds the matrix for a slot-major order: `order[slot] = row`.
    pub fn from_order(order: &[usize]) -> Self {
        let n = order.len();
        let mut bits = vec![false; n * n];
        for (slot, &row) in order.iter().enumerate() {
            bits[row * n + slot] = true;
        }
        Self { n, bits }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entry(&self, row: usize, slot: usize) -> bool {
        self.bits[row * self.n + slot]
    }

    pub fn row_in_slot(&self, slot: usize) -> Option<usize> {
        (0..self.n).find(|&r| self.entry(r, slot))
    }

    pub fn slot_of_row(&self, row: usize) -> Option<usize> {
        (0..self.n).find(|&s| self.entry(row, s))
    }

    /// Row/column assignment sums are exactly one.
    pub fn is_assignment(&self) -> bool {
        for i in 0..self.n {
            let row: usize = (0..self.n).filter(|&s| self.entry(i, s)).count();
            let col: usize = (0..self.n).filter(|&r| self.entry(r, i)).count();
            if row != 1 || col != 1 {
                return false;
            }
        }
        true
    }

    /// Checks the assignment sums and the printed precedence form over all
    /// consecutive row pairs: row `i` may take slot `n` only if row `i-1`
    /// holds no later slot.
    pub fn is_feasible(&self) -> bool {
        if !self.is_assignment() {
            return false;
        }
        for i in 1..self.n {
            let slot = self.slot_of_row(i).unwrap();
            let prev_has_later = (slot + 1..self.n).any(|l| self.entry(i - 1, l));
            if prev_has_later {
                return false;
            }
        }
        true
    }
}

/// Multi-scale objective weights.
#[derive(Debug, Clone, Copy)]
pub struct SequenceObjectiveWeights<R> {
    pub alpha1: R,
    pub alpha2: R,
    pub alpha3: R,
    pub alpha4: R,
    pub b: R,
    pub m: R,
    /// When set, the spacing indicator compares the deviation against the
    /// desired spacing once more, as printed in the source formulation.
    pub double_subtraction: bool,
}

impl<R: Real> SequenceObjectiveWeights<R> {
    pub fn validated(self) -> Result<Self> {
        let all = [self.alpha1, self.alpha2, self.alpha3, self.alpha4, self.b, self.m];
        if all.iter().any(|w| *w < R::zero()) {
            return Err(SimError::Domain("sequence weights must be non-negative".into()));
        }
        if [self.alpha1, self.alpha2, self.alpha3, self.alpha4]
            .iter()
            .all(|w| *w == R::zero())
        {
            return Err(SimError::Domain("at least one alpha must be positive".into()));
        }
        Ok(self)
    }
}

impl<R: Real> Default for SequenceObjectiveWeights<R> {
    fn default() -> Self {
        Self {
            alpha1: R::one(),
            alpha2: R::one(),
            alpha3: R::half(),
            alpha4: R::of(10.0),
            b: R::one(),
            m: R::one(),
            double_subtraction: true,
        }
    }
}

/// Spacing deviation between consecutive slots `i` and `i+1` (1-based `i`).
pub fn spacing_deviation<R: Real>(
    matrix: &SequenceMatrix,
    snapshot: &PlatoonSnapshot<R>,
    slot: usize,
) -> Result<R> {
    if slot < 1 || slot >= matrix.n() {
        return Err(SimError::Domain(format!("slot {slot} out of range")));
    }
    let front = matrix
        .row_in_slot(slot - 1)
        .ok_or(SimError::InfeasibleSequence)?;
    let rear = matrix.row_in_slot(slot).ok_or(SimError::InfeasibleSequence)?;
    Ok(snapshot.members[front].z - snapshot.members[rear].z - snapshot.desired_spacing)
}

/// Sign indicators for one adjacent slot pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotIndicators {
    /// +1 when the spacing deviation term is negative, -1 when positive.
    pub y_spacing: i8,
    /// +1 when the rear slot is slower than the front slot, -1 when faster.
    pub y_speed: i8,
    /// `y_spacing - y_speed`.
    pub chi: i8,
}

fn sign_indicator<R: Real>(term: R) -> i8 {
    if term < R::zero() {
        1
    } else if term > R::zero() {
        -1
    } else {
        0
    }
}

/// Evaluates the deviation indicators for every adjacent slot pair.
pub fn deviation_indicators<R: Real>(
    matrix: &SequenceMatrix,
    snapshot: &PlatoonSnapshot<R>,
    weights: &SequenceObjectiveWeights<R>,
) -> Result<Vec<SlotIndicators>> {
    let n = matrix.n();
    let mut out = Vec::with_capacity(n.saturating_sub(1));
    for slot in 1..n {
        let dev = spacing_deviation(matrix, snapshot, slot)?;
        let term = if weights.double_subtraction {
            dev - snapshot.desired_spacing
        } else {
            dev
        };
        let front = matrix.row_in_slot(slot - 1).unwrap();
        let rear = matrix.row_in_slot(slot).unwrap();
        let dv = snapshot.members[rear].speed - snapshot.members[front].speed;
        let y_spacing = sign_indicator(term);
        let y_speed = sign_indicator(dv);
        out.push(SlotIndicators {
            y_spacing,
            y_speed,
            chi: y_spacing - y_speed,
        });
    }
    Ok(out)
}

/// Travel-time phases of one vehicle under a slot assignment, seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TravelTimeEstimate<R> {
    pub entry_merge: R,
    pub delay: R,
    pub merge_exit: R,
    pub total: R,
}

pub fn travel_time_estimate<R: Real>(
    snapshot: &PlatoonSnapshot<R>,
    row: usize,
    slot: usize,
) -> TravelTimeEstimate<R> {
    let member = &snapshot.members[row];
    let delay = if member.z >= R::zero() {
        R::zero()
    } else {
        R::of(slot as f64) * snapshot.slot_wait
    };
    let total = member.time_to_merge + delay + member.time_merge_to_exit;
    TravelTimeEstimate {
        entry_merge: member.time_to_merge,
        delay,
        merge_exit: member.time_merge_to_exit,
        total,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityTerms<R> {
    pub rho: Vec<R>,
    pub rho_bar: R,
    /// Tight absolute density deviation per segment.
    pub psi: Vec<R>,
}

/// Segment densities, their average, and the absolute deviation variables.
pub fn density_terms<R: Real>(snapshot: &PlatoonSnapshot<R>) -> DensityTerms<R> {
    let segs = snapshot.segment_lengths.len();
    let mut counts: Vec<R> = snapshot
        .initial_counts
        .iter()
        .map(|c| R::of(*c as f64))
        .collect();
    counts.resize(segs, R::zero());
    for member in &snapshot.members {
        if let Some(j) = member.enters_segment {
            if j < segs {
                counts[j] += R::one();
            }
        }
    }
    let total_len: R = snapshot
        .segment_lengths
        .iter()
        .fold(R::zero(), |a, l| a + *l);
    let total_count: R = counts.iter().fold(R::zero(), |a, c| a + *c);
    let rho: Vec<R> = counts
        .iter()
        .zip(&snapshot.segment_lengths)
        .map(|(c, l)| *c / *l)
        .collect();
    let rho_bar = total_count / total_len;
    let psi = rho.iter().map(|r| (*r - rho_bar).abs()).collect();
    DensityTerms { rho, rho_bar, psi }
}

/// Multi-scale objective for a feasible assignment.
pub fn objective<R: Real>(
    matrix: &SequenceMatrix,
    snapshot: &PlatoonSnapshot<R>,
    weights: &SequenceObjectiveWeights<R>,
) -> Result<R> {
    if matrix.n() != snapshot.len() {
        return Err(SimError::MatrixShape {
            rows: matrix.n(),
            cols: snapshot.len(),
        });
    }
    if !matrix.is_assignment() {
        return Err(SimError::InfeasibleSequence);
    }
    let order: Vec<usize> = (0..matrix.n())
        .map(|slot| matrix.row_in_slot(slot).unwrap())
        .collect();
    if !snapshot.order_allowed(&order) {
        return Err(SimError::InfeasibleSequence);
    }
    Ok(objective_of_order(&order, snapshot, weights))
}

fn adjacency_term<R: Real>(
    front: usize,
    rear: usize,
    snapshot: &PlatoonSnapshot<R>,
    weights: &SequenceObjectiveWeights<R>,
) -> R {
    let dev = snapshot.members[front].z - snapshot.members[rear].z - snapshot.desired_spacing;
    let term = if weights.double_subtraction {
        dev - snapshot.desired_spacing
    } else {
        dev
    };
    let y_spacing = R::of(sign_indicator(term) as f64);
    let dv = snapshot.members[rear].speed - snapshot.members[front].speed;
    let y_speed = R::of(sign_indicator(dv) as f64);
    let chi = y_spacing - y_speed;
    weights.alpha1 * weights.b * y_spacing * y_spacing + weights.alpha2 * weights.m * chi * chi
}

fn objective_of_order<R: Real>(
    order: &[usize],
    snapshot: &PlatoonSnapshot<R>,
    weights: &SequenceObjectiveWeights<R>,
) -> R {
    let n = order.len();
    let mut obj = weights.alpha4 * density_terms(snapshot).psi.iter().fold(R::zero(), |a, p| a + *p);
    let inv_n = R::one() / R::of(n as f64);
    for (slot, &row) in order.iter().enumerate() {
        obj += weights.alpha3 * inv_n * travel_time_estimate(snapshot, row, slot).total;
        if slot >= 1 {
            obj += adjacency_term(order[slot - 1], row, snapshot, weights);
        }
    }
    obj
}

/// Result of one sequence solve.
#[derive(Debug, Clone)]
pub struct SequenceSolution<R> {
    /// Vehicle ids in slot order, front first.
    pub order: Vec<u64>,
    pub matrix: SequenceMatrix,
    pub objective: R,
    pub nodes_expanded: u64,
    pub degraded: bool,
}

/// Platoon size above which the solver falls back to a greedy order.
pub const DEFAULT_PLATOON_CAP: usize = 8;

/// Finds the feasible assignment minimizing the multi-scale objective.
///
/// Branch-and-bound over slot assignments; the bound is the committed-slot
/// cost with zero for unassigned slots, which never overestimates because all
/// objective terms are non-negative. Ties resolve to the lexicographically
/// smallest slot assignment by vehicle id. Platoons larger than `cap` use a
/// nearest-first greedy order and are flagged degraded.
pub fn solve_sequence<R: Real>(
    snapshot: &PlatoonSnapshot<R>,
    weights: &SequenceObjectiveWeights<R>,
    cap: usize,
) -> SequenceSolution<R> {
    let n = snapshot.len();
    if n == 0 {
        return SequenceSolution {
            order: Vec::new(),
            matrix: SequenceMatrix::identity(0),
            objective: weights.alpha4
                * density_terms(snapshot).psi.iter().fold(R::zero(), |a, p| a + *p),
            nodes_expanded: 0,
            degraded: false,
        };
    }
    let pairs = snapshot.precedence();
    let preds: Vec<Vec<usize>> = {
        let mut p = vec![Vec::new(); n];
        for &(a, b) in &pairs {
            p[b].push(a);
        }
        p
    };

    if n > cap {
        // Nearest-first greedy: repeatedly place the frontmost available row.
        let mut placed = vec![false; n];
        let mut order = Vec::with_capacity(n);
        for _ in 0..n {
            let mut best: Option<usize> = None;
            for r in 0..n {
                if placed[r] || !preds[r].iter().all(|&a| placed[a]) {
                    continue;
                }
                best = match best {
                    None => Some(r),
                    Some(cur) => {
                        if snapshot.z_ahead(r, cur) {
                            Some(r)
                        } else {
                            Some(cur)
                        }
                    }
                };
            }
            let r = best.expect("precedence pairs are acyclic");
            placed[r] = true;
            order.push(r);
        }
        let objective = objective_of_order(&order, snapshot, weights);
        return SequenceSolution {
            order: order.iter().map(|&r| snapshot.members[r].id).collect(),
            matrix: SequenceMatrix::from_order(&order),
            objective,
            nodes_expanded: 0,
            degraded: true,
        };
    }

    // Candidate rows in ascending vehicle id so the first optimum found is
    // the lexicographically smallest by id.
    let mut id_sorted: Vec<usize> = (0..n).collect();
    id_sorted.sort_by_key(|&r| snapshot.members[r].id);

    let alpha4_term =
        weights.alpha4 * density_terms(snapshot).psi.iter().fold(R::zero(), |a, p| a + *p);
    let inv_n = R::one() / R::of(n as f64);

    struct Search<'a, R: Real> {
        snapshot: &'a PlatoonSnapshot<R>,
        weights: &'a SequenceObjectiveWeights<R>,
        preds: &'a [Vec<usize>],
        id_sorted: &'a [usize],
        inv_n: R,
        best_cost: R,
        best_order: Vec<usize>,
        nodes: u64,
    }

    impl<R: Real> Search<'_, R> {
        fn dfs(&mut self, order: &mut Vec<usize>, placed: &mut Vec<bool>, cost: R) {
            self.nodes += 1;
            let n = placed.len();
            if order.len() == n {
                if cost < self.best_cost {
                    self.best_cost = cost;
                    self.best_order = order.clone();
                }
                return;
            }
            for &r in self.id_sorted {
                if placed[r] || !self.preds[r].iter().all(|&a| placed[a]) {
                    continue;
                }
                let slot = order.len();
                let mut next = cost
                    + self.weights.alpha3
                        * self.inv_n
                        * travel_time_estimate(self.snapshot, r, slot).total;
                if slot >= 1 {
                    next += adjacency_term(order[slot - 1], r, self.snapshot, self.weights);
                }
                if next >= self.best_cost {
                    continue;
                }
                placed[r] = true;
                order.push(r);
                self.dfs(order, placed, next);
                order.pop();
                placed[r] = false;
            }
        }
    }

    let mut search = Search {
        snapshot,
        weights,
        preds: &preds,
        id_sorted: &id_sorted,
        inv_n,
        best_cost: R::infinity(),
        best_order: Vec::new(),
        nodes: 0,
    };
    search.dfs(&mut Vec::with_capacity(n), &mut vec![false; n], alpha4_term);

    let order = search.best_order;
    SequenceSolution {
        order: order.iter().map(|&r| snapshot.members[r].id).collect(),
        matrix: SequenceMatrix::from_order(&order),
        objective: search.best_cost,
        nodes_expanded: search.nodes,
        degraded: false,
    }
}

/// Reference solver: exhaustively enumerates every allowed order. Exists to
/// cross-check [`solve_sequence`]; exponential in the platoon size.
pub fn exhaustive_best<R: Real>(
    snapshot: &PlatoonSnapshot<R>,
    weights: &SequenceObjectiveWeights<R>,
) -> Option<(Vec<u64>, R)> {
    let n = snapshot.len();
    let mut best: Option<(Vec<usize>, R)> = None;
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let mut used = vec![false; n];
    // Enumerate in ascending-id candidate order so ties resolve identically
    // to the branch-and-bound path.
    let mut id_sorted: Vec<usize> = (0..n).collect();
    id_sorted.sort_by_key(|&r| snapshot.members[r].id);

    fn recurse<R: Real>(
        snapshot: &PlatoonSnapshot<R>,
        weights: &SequenceObjectiveWeights<R>,
        id_sorted: &[usize],
        order: &mut Vec<usize>,
        used: &mut Vec<bool>,
        best: &mut Option<(Vec<usize>, R)>,
    ) {
        let n = used.len();
        if order.len() == n {
            if snapshot.order_allowed(order) {
                let cost = objective_of_order(order, snapshot, weights);
                let better = match best {
                    None => true,
                    Some((_, b)) => cost < *b,
                };
                if better {
                    *best = Some((order.clone(), cost));
                }
            }
            return;
        }
        for &r in id_sorted {
            if used[r] {
                continue;
            }
            used[r] = true;
            order.push(r);
            recurse(snapshot, weights, id_sorted, order, used, best);
            order.pop();
            used[r] = false;
        }
    }
    recurse(snapshot, weights, &id_sorted, &mut order, &mut used, &mut best);
    best.map(|(order, cost)| {
        (
            order.iter().map(|&r| snapshot.members[r].id).collect(),
            cost,
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn member(id: u64, approach: Approach, z: f64, speed: f64) -> PlatoonMember<f64> {
        PlatoonMember {
            id,
            approach,
            z,
            speed,
            is_cav: true,
            frozen: false,
            time_to_merge: if z < 0.0 { -z / 10.0 } else { 0.0 },
            time_merge_to_exit: 5.0,
            enters_segment: if approach == Approach::Ramp { Some(0) } else { None },
        }
    }

    fn snapshot(members: Vec<PlatoonMember<f64>>) -> PlatoonSnapshot<f64> {
        PlatoonSnapshot::new(
            0,
            members,
            10.0,
            10.0 / 15.0,
            vec![0, 0, 0],
            vec![60.0, 60.0, 60.0],
            vec![],
        )
    }

    #[test]
    fn identity_matrix_is_feasible() {
        for n in 1..6 {
            assert!(SequenceMatrix::identity(n).is_feasible());
        }
    }

    #[test]
    fn zero_row_is_infeasible() {
        let m = SequenceMatrix::from_entries(&[vec![0, 0], vec![0, 1]]).unwrap();
        assert!(!m.is_feasible());
    }

    #[test]
    fn printed_precedence_rejects_row_swap() {
        // Row 1 in slot 2 and row 2 in slot 1 violates the printed form.
        let m = SequenceMatrix::from_entries(&[vec![0, 1], vec![1, 0]]).unwrap();
        assert!(!m.is_feasible());
    }

    #[test]
    fn non_square_is_shape_error() {
        assert!(SequenceMatrix::from_entries(&[vec![1, 0, 0], vec![0, 1, 0]]).is_err());
    }

    #[test]
    fn spacing_deviation_examples() {
        let snap = snapshot(vec![
            member(1, Approach::Ring, -5.0, 15.0),
            member(2, Approach::Ring, -15.0, 15.0),
        ]);
        let m = SequenceMatrix::identity(2);
        assert_relative_eq!(spacing_deviation(&m, &snap, 1).unwrap(), 0.0);

        let snap = snapshot(vec![
            member(1, Approach::Ring, -5.0, 15.0),
            member(2, Approach::Ring, -20.0, 15.0),
        ]);
        assert_relative_eq!(spacing_deviation(&m, &snap, 1).unwrap(), 5.0);

        let snap = snapshot(vec![
            member(1, Approach::Ring, -5.0, 15.0),
            member(2, Approach::Ring, -11.0, 15.0),
        ]);
        assert_relative_eq!(spacing_deviation(&m, &snap, 1).unwrap(), -4.0);
        assert!(spacing_deviation(&m, &snap, 0).is_err());
        assert!(spacing_deviation(&m, &snap, 2).is_err());
    }

    #[test]
    fn indicator_signs() {
        // Gap 17 with desired 10: deviation 7 - 10 = -3 -> +1.
        let snap = snapshot(vec![
            member(1, Approach::Ring, -5.0, 15.0),
            member(2, Approach::Ring, -22.0, 15.0),
        ]);
        let w = SequenceObjectiveWeights::default();
        let ind = deviation_indicators(&SequenceMatrix::identity(2), &snap, &w).unwrap();
        assert_eq!(ind[0].y_spacing, 1);
        // Equal slot speeds: zero velocity indicator.
        assert_eq!(ind[0].y_speed, 0);
        assert_eq!(ind[0].chi, 1);
    }

    #[test]
    fn chi_combines_indicators() {
        // Rear slot faster -> y_speed = -1; spacing deviation negative -> +1.
        let snap = snapshot(vec![
            member(1, Approach::Ring, -5.0, 10.0),
            member(2, Approach::Ramp, -12.0, 15.0),
        ]);
        let w = SequenceObjectiveWeights::default();
        let ind = deviation_indicators(&SequenceMatrix::identity(2), &snap, &w).unwrap();
        assert_eq!(ind[0].y_spacing, 1);
        assert_eq!(ind[0].y_speed, -1);
        assert_eq!(ind[0].chi, 2);
    }

    #[test]
    fn travel_time_examples() {
        // Past the merge point: no slot wait.
        let snap = snapshot(vec![
            member(1, Approach::Ring, 3.0, 15.0),
            member(2, Approach::Ring, -60.0, 15.0),
        ]);
        let t = travel_time_estimate(&snap, 0, 2);
        assert_eq!(t.delay, 0.0);

        // 60 m to the merge at 10 m/s in the first slot.
        let snap = snapshot(vec![member(1, Approach::Ramp, -60.0, 10.0)]);
        let t = travel_time_estimate(&snap, 0, 0);
        assert_relative_eq!(t.entry_merge, 6.0);
        assert_eq!(t.delay, 0.0);

        // Third slot behind two vehicles.
        let t = travel_time_estimate(&snap, 0, 2);
        assert_relative_eq!(t.delay, 2.0 * 10.0 / 15.0, epsilon = 1e-12);
    }

    #[test]
    fn density_hand_values() {
        let mut snap = snapshot(vec![]);
        snap.initial_counts = vec![6, 0, 0];
        snap.segment_lengths = vec![60.0, 60.0, 60.0];
        let d = density_terms(&snap);
        assert_relative_eq!(d.rho[0], 0.1);

        snap.initial_counts = vec![4, 4, 4];
        let d = density_terms(&snap);
        assert!(d.psi.iter().all(|p| *p == 0.0));

        snap.initial_counts = vec![6, 3, 3];
        let d = density_terms(&snap);
        assert_relative_eq!(d.rho_bar, 1.0 / 15.0, epsilon = 1e-12);
        assert_relative_eq!(d.psi[0], 1.0 / 30.0, epsilon = 1e-12);
        assert_relative_eq!(d.psi[1], 1.0 / 60.0, epsilon = 1e-12);
        assert_relative_eq!(d.psi[2], 1.0 / 60.0, epsilon = 1e-12);
    }

    #[test]
    fn psi_satisfies_tight_inequalities() {
        let mut snap = snapshot(vec![]);
        snap.initial_counts = vec![7, 2, 5];
        let d = density_terms(&snap);
        for j in 0..3 {
            let dev = d.rho[j] - d.rho_bar;
            assert!(d.psi[j] >= dev - 1e-15);
            assert!(d.psi[j] >= -dev - 1e-15);
            assert!(d.psi[j] >= 0.0);
            assert!((d.psi[j] - dev).abs() < 1e-12 || (d.psi[j] + dev).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_alpha4_only_uniform_density_is_zero() {
        let mut snap = snapshot(vec![
            member(1, Approach::Ring, -5.0, 15.0),
            member(2, Approach::Ring, -15.0, 15.0),
        ]);
        snap.initial_counts = vec![2, 2, 2];
        let w = SequenceObjectiveWeights {
            alpha1: 0.0,
            alpha2: 0.0,
            alpha3: 0.0,
            alpha4: 10.0,
            ..Default::default()
        };
        let obj = objective(&SequenceMatrix::identity(2), &snap, &w).unwrap();
        assert_eq!(obj, 0.0);
    }

    #[test]
    fn objective_rejects_infeasible() {
        let snap = snapshot(vec![
            member(1, Approach::Ring, -5.0, 15.0),
            member(2, Approach::Ring, -15.0, 15.0),
        ]);
        let w = SequenceObjectiveWeights::default();
        // Same-approach swap is not allowed.
        let m = SequenceMatrix::from_order(&[1, 0]);
        assert!(objective(&m, &snap, &w).is_err());
    }

    #[test]
    fn worked_two_vehicle_instance_matches_oracle() {
        // Ring vehicle at -10 doing 15, ramp vehicle at -25 doing 10.
        let snap = snapshot(vec![
            member(1, Approach::Ring, -10.0, 15.0),
            member(2, Approach::Ramp, -25.0, 10.0),
        ]);
        let w = SequenceObjectiveWeights::default();
        // Both orders are feasible across approaches.
        let keep = objective(&SequenceMatrix::from_order(&[0, 1]), &snap, &w).unwrap();
        let swap = objective(&SequenceMatrix::from_order(&[1, 0]), &snap, &w).unwrap();
        let (best_order, best_cost) = exhaustive_best(&snap, &w).unwrap();
        let sol = solve_sequence(&snap, &w, DEFAULT_PLATOON_CAP);
        assert_relative_eq!(sol.objective, best_cost, epsilon = 1e-12);
        assert_eq!(sol.order, best_order);
        assert_relative_eq!(sol.objective, keep.min(swap), epsilon = 1e-12);
    }

    #[test]
    fn single_vehicle_is_trivial() {
        let snap = snapshot(vec![member(1, Approach::Ramp, -30.0, 10.0)]);
        let sol = solve_sequence(&snap, &SequenceObjectiveWeights::default(), 8);
        assert_eq!(sol.order, vec![1]);
        assert!(sol.matrix.is_feasible());
    }

    #[test]
    fn near_ring_vehicle_keeps_first_slot() {
        let snap = snapshot(vec![
            member(1, Approach::Ring, -5.0, 15.0),
            member(2, Approach::Ramp, -40.0, 10.0),
        ]);
        let sol = solve_sequence(&snap, &SequenceObjectiveWeights::default(), 8);
        assert_eq!(sol.order[0], 1);
    }

    #[test]
    fn feasible_order_count_matches_interleavings() {
        // Two ring + two ramp CAVs: order-preserving interleavings = C(4,2) = 6.
        let snap = snapshot(vec![
            member(1, Approach::Ring, -5.0, 15.0),
            member(2, Approach::Ring, -20.0, 15.0),
            member(3, Approach::Ramp, -10.0, 10.0),
            member(4, Approach::Ramp, -30.0, 10.0),
        ]);
        let n = snap.len();
        let mut count = 0;
        let mut order = Vec::new();
        let mut used = vec![false; n];
        fn rec(
            snap: &PlatoonSnapshot<f64>,
            order: &mut Vec<usize>,
            used: &mut Vec<bool>,
            count: &mut usize,
        ) {
            if order.len() == used.len() {
                if snap.order_allowed(order) {
                    *count += 1;
                }
                return;
            }
            for r in 0..used.len() {
                if !used[r] {
                    used[r] = true;
                    order.push(r);
                    rec(snap, order, used, count);
                    order.pop();
                    used[r] = false;
                }
            }
        }
        rec(&snap, &mut order, &mut used, &mut count);
        assert_eq!(count, 6);
    }

    #[test]
    fn hdv_is_pinned_to_observed_order() {
        let mut hdv = member(3, Approach::Ramp, -8.0, 15.0);
        hdv.is_cav = false;
        let snap = snapshot(vec![
            member(1, Approach::Ring, -20.0, 15.0),
            hdv,
        ]);
        // The HDV is ahead by z; no order may put the ring CAV first.
        // Canonical order sorts the ring CAV to row 0 and the ramp HDV to
        // row 1, so only the swapped order is admissible.
        assert!(snap.order_allowed(&[1, 0]));
        assert!(!snap.order_allowed(&[0, 1]));
        let sol = solve_sequence(&snap, &SequenceObjectiveWeights::default(), 8);
        assert_eq!(sol.order[0], 3);
    }

    #[test]
    fn frozen_vehicle_keeps_committed_order() {
        let mut a = member(1, Approach::Ring, -9.0, 15.0);
        a.frozen = true;
        let b = member(2, Approach::Ramp, -7.0, 12.0);
        let mut snap = snapshot(vec![a, b]);
        // Committed order says vehicle 1 leads even though 2 is now ahead by z.
        snap.committed = vec![1, 2];
        let sol = solve_sequence(&snap, &SequenceObjectiveWeights::default(), 8);
        assert_eq!(sol.order, vec![1, 2]);
    }

    #[test]
    fn random_instances_match_oracle() {
        let mut state = 0x853c49e6748fea9bu64;
        let mut rand = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let w = SequenceObjectiveWeights::default();
        for _ in 0..40 {
            let n = 3 + (rand() * 4.0) as usize;
            let members: Vec<_> = (0..n)
                .map(|i| {
                    let approach = if rand() < 0.5 { Approach::Ring } else { Approach::Ramp };
                    let mut m = member(i as u64 + 1, approach, -(rand() * 60.0), 5.0 + rand() * 10.0);
                    if rand() < 0.2 {
                        m.is_cav = false;
                    }
                    m
                })
                .collect();
            let snap = snapshot(members);
            let (oracle_order, oracle_cost) = exhaustive_best(&snap, &w).unwrap();
            let sol = solve_sequence(&snap, &w, DEFAULT_PLATOON_CAP);
            assert!((sol.objective - oracle_cost).abs() < 1e-9);
            assert_eq!(sol.order, oracle_order);
            assert!(sol.matrix.is_assignment());
        }
    }

    #[test]
    fn greedy_fallback_for_oversized_platoons() {
        let members: Vec<_> = (0..10)
            .map(|i| member(i as u64 + 1, Approach::Ring, -(i as f64) * 8.0 - 3.0, 15.0))
            .collect();
        let snap = snapshot(members);
        let sol = solve_sequence(&snap, &SequenceObjectiveWeights::default(), 8);
        assert!(sol.degraded);
        // Nearest first.
        assert_eq!(sol.order, (1..=10).collect::<Vec<u64>>());
    }

    #[test]
    fn prefix_cost_never_exceeds_completion() {
        let w = SequenceObjectiveWeights::default();
        let snap = snapshot(vec![
            member(1, Approach::Ring, -6.0, 15.0),
            member(2, Approach::Ring, -19.0, 14.0),
            member(3, Approach::Ramp, -12.0, 9.0),
            member(4, Approach::Ramp, -33.0, 11.0),
        ]);
        let full_order = vec![0, 2, 1, 3];
        assert!(snap.order_allowed(&full_order));
        let full = objective_of_order(&full_order, &snap, &w);
        let alpha4 = w.alpha4 * density_terms(&snap).psi.iter().sum::<f64>();
        let mut partial = alpha4;
        for (slot, &row) in full_order.iter().enumerate() {
            partial += w.alpha3 / 4.0 * travel_time_estimate(&snap, row, slot).total;
            if slot >= 1 {
                partial += adjacency_term(full_order[slot - 1], row, &snap, &w);
            }
            assert!(partial <= full + 1e-12);
        }
    }

    #[test]
    fn objective_is_pure() {
        let snap = snapshot(vec![
            member(1, Approach::Ring, -10.0, 15.0),
            member(2, Approach::Ramp, -25.0, 10.0),
        ]);
        let w = SequenceObjectiveWeights::default();
        let m = SequenceMatrix::identity(2);
        let a = objective(&m, &snap, &w).unwrap();
        let b = objective(&m, &snap, &w).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weights_validation() {
        let mut w = SequenceObjectiveWeights::<f64>::default();
        assert!(w.validated().is_ok());
        w.alpha1 = -1.0;
        assert!(w.validated().is_err());
        let zeroed = SequenceObjectiveWeights {
            alpha1: 0.0,
            alpha2: 0.0,
            alpha3: 0.0,
            alpha4: 0.0,
            b: 1.0,
            m: 1.0,
            double_subtraction: true,
        };
        assert!(zeroed.validated().is_err());
    }
}
