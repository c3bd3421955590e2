//! Per-block evaluation kernels.
//!
//! A pass over the data is a sequence of blocks. Every dataset-wide sum the
//! engine reports is built the same way: each block is reduced on its own,
//! starting from zero and walking its rows in order, and the per-block results
//! are folded in scan order. Worker count and check timing therefore never
//! change a result, only who computes which block.
//!
//! For a set of candidate models on the line `base - alpha * dir`, each
//! candidate's per-block statistics depend only on that candidate's step, not
//! on which other candidates are evaluated alongside it.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::estimator::{moments_report, Accumulator, EstimateReport};
use crate::task::{ExampleRef, LossFamily, TaskSpec};
use crate::vecmath::{add_assign, add_sq_scaled, axpy, dot};

/// Rows of one block, each `dim` features followed by the label.
#[derive(Debug, Clone, Copy)]
pub struct BlockView<'a> {
    rows: &'a [f64],
    dim: usize,
}

impl<'a> BlockView<'a> {
    pub fn new(rows: &'a [f64], dim: usize) -> Result<Self> {
        if !rows.len().is_multiple_of(dim + 1) {
            return Err(Error::Structural(alloc::format!(
                "block of {} values is not a whole number of rows of width {}",
                rows.len(),
                dim + 1
            )));
        }
        Ok(BlockView { rows, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len() / (self.dim + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    #[inline]
    pub fn example(&self, i: usize) -> ExampleRef<'a> {
        let w = self.dim + 1;
        let r = &self.rows[i * w..(i + 1) * w];
        ExampleRef {
            features: &r[..self.dim],
            label: r[self.dim],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = ExampleRef<'a>> + '_ {
        (0..self.len()).map(move |i| self.example(i))
    }
}

/// Loss and gradient sums of one model over some examples.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateStats {
    pub loss: Accumulator,
    pub grad: Vec<f64>,
    /// Per-coordinate sums of squared example gradients; empty when the
    /// caller does not need gradient intervals.
    pub grad_sq: Vec<f64>,
}

impl CandidateStats {
    pub fn empty(d: usize, track_variance: bool) -> Self {
        CandidateStats {
            loss: Accumulator::EMPTY,
            grad: vec![0.0; d],
            grad_sq: if track_variance {
                vec![0.0; d]
            } else {
                Vec::new()
            },
        }
    }

    pub fn n(&self) -> u64 {
        self.loss.n
    }

    pub fn merge_from(&mut self, other: &CandidateStats) {
        self.loss.merge_from(&other.loss);
        add_assign(&mut self.grad, &other.grad);
        add_assign(&mut self.grad_sq, &other.grad_sq);
    }

    /// Interval for the summed loss (regularizer not included).
    pub fn loss_report(&self, population: u64, z: f64) -> Result<EstimateReport> {
        moments_report(self.loss.n, self.loss.sum, self.loss.sum_sq, population, z)
    }

    /// Per-coordinate intervals for the summed gradient.
    pub fn grad_report(&self, population: u64, z: f64) -> Result<Vec<EstimateReport>> {
        if self.grad_sq.len() != self.grad.len() {
            return Err(Error::Structural(
                "gradient variance was not tracked".into(),
            ));
        }
        self.grad
            .iter()
            .zip(&self.grad_sq)
            .map(|(&s, &q)| moments_report(self.loss.n, s, q, population, z))
            .collect()
    }
}

/// Candidates `base - alpha * dir`.
#[derive(Debug, Clone, Copy)]
pub struct StepLine<'a> {
    pub base: &'a [f64],
    pub dir: &'a [f64],
}

impl StepLine<'_> {
    pub fn point(&self, alpha: f64) -> Vec<f64> {
        self.base
            .iter()
            .zip(self.dir)
            .map(|(&w, &g)| w - alpha * g)
            .collect()
    }
}

/// Reusable buffers for `evaluate_line_block`.
#[derive(Debug, Default)]
pub struct LineScratch {
    a: Vec<f64>,
    b: Vec<f64>,
    pos: Vec<(f64, u32)>,
    neg: Vec<(f64, u32)>,
    always: Vec<u32>,
}

/// Statistics of every candidate step over one block, in `alphas` order.
pub fn evaluate_line_block(
    task: &TaskSpec,
    line: StepLine<'_>,
    alphas: &[f64],
    block: BlockView<'_>,
    track_variance: bool,
    scratch: &mut LineScratch,
) -> Vec<CandidateStats> {
    let d = block.dim();
    let n = block.len();
    scratch.a.clear();
    scratch.b.clear();
    for i in 0..n {
        let x = block.example(i).features;
        scratch.a.push(dot(line.base, x));
        scratch.b.push(dot(line.dir, x));
    }
    let mut out: Vec<CandidateStats> = alphas
        .iter()
        .map(|_| CandidateStats::empty(d, track_variance))
        .collect();
    match task.family {
        LossFamily::SvmHinge => hinge_line(task, alphas, block, track_variance, scratch, &mut out),
        LossFamily::Logistic => {
            for i in 0..n {
                let ex = block.example(i);
                let (a, b) = (scratch.a[i], scratch.b[i]);
                for (st, &alpha) in out.iter_mut().zip(alphas) {
                    let m = a - alpha * b;
                    st.loss.push(task.margin_loss(ex.label, m));
                    let c = task.margin_coef(ex.label, m);
                    if c != 0.0 {
                        axpy(&mut st.grad, c, ex.features);
                        if track_variance {
                            add_sq_scaled(&mut st.grad_sq, c, ex.features);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Hinge loss along a line. An example with `p = y b != 0` is active on a
/// half-line of steps bounded by `t = (y a - 1) / p`, so after sorting the
/// block's examples by `t` every candidate's active set is a prefix (p > 0)
/// or suffix (p < 0) of the sorted order plus the examples active for every
/// step. One running sum over each sorted group then serves all candidates.
fn hinge_line(
    task: &TaskSpec,
    alphas: &[f64],
    block: BlockView<'_>,
    track_variance: bool,
    sc: &mut LineScratch,
    out: &mut [CandidateStats],
) {
    let d = block.dim();
    let n = block.len();
    sc.pos.clear();
    sc.neg.clear();
    sc.always.clear();
    for i in 0..n {
        let y = block.example(i).label;
        let (a, b) = (sc.a[i], sc.b[i]);
        for (st, &alpha) in out.iter_mut().zip(alphas) {
            st.loss.push(task.margin_loss(y, a - alpha * b));
        }
        let p = y * b;
        let q = y * a - 1.0;
        if p > 0.0 {
            sc.pos.push((q / p, i as u32));
        } else if p < 0.0 {
            sc.neg.push((q / p, i as u32));
        } else if q < 0.0 {
            sc.always.push(i as u32);
        }
    }
    let key = |l: &(f64, u32), r: &(f64, u32)| l.0.total_cmp(&r.0).then(l.1.cmp(&r.1));
    sc.pos.sort_unstable_by(key);
    sc.neg.sort_unstable_by(key);

    // (ends[c], starts[c]): active positives are pos[..ends], negatives neg[starts..]
    let ends: Vec<usize> = alphas
        .iter()
        .map(|&al| sc.pos.partition_point(|e| e.0 < al))
        .collect();
    let starts: Vec<usize> = alphas
        .iter()
        .map(|&al| sc.neg.partition_point(|e| e.0 <= al))
        .collect();

    let width = if track_variance { 2 * d } else { d };
    let add_row = |acc: &mut [f64], i: u32| {
        let ex = block.example(i as usize);
        let c = -ex.label;
        let (s, q) = acc.split_at_mut(d);
        axpy(s, c, ex.features);
        if track_variance {
            add_sq_scaled(q, c, ex.features);
        }
    };

    let pre = prefix_snapshots(&sc.pos, &ends, width, &add_row);
    // suffix sums run from the last sorted row backwards
    let suffix_len: Vec<usize> = starts.iter().map(|&s| sc.neg.len() - s).collect();
    let neg_rev: Vec<(f64, u32)> = sc.neg.iter().rev().copied().collect();
    let suf = prefix_snapshots(&neg_rev, &suffix_len, width, &add_row);

    let mut always = vec![0.0; width];
    for &i in &sc.always {
        add_row(&mut always, i);
    }

    for (c, st) in out.iter_mut().enumerate() {
        let (p, s) = (&pre[c], &suf[c]);
        for j in 0..d {
            st.grad[j] = (p[j] + s[j]) + always[j];
        }
        if track_variance {
            for j in 0..d {
                st.grad_sq[j] = (p[d + j] + s[d + j]) + always[d + j];
            }
        }
    }
}

/// Running sums over `rows` in order, snapshotted after `counts[c]` rows for
/// each candidate `c`.
fn prefix_snapshots(
    rows: &[(f64, u32)],
    counts: &[usize],
    width: usize,
    add_row: &dyn Fn(&mut [f64], u32),
) -> Vec<Vec<f64>> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_unstable_by_key(|&c| counts[c]);
    let mut snaps = vec![Vec::new(); counts.len()];
    let mut run = vec![0.0; width];
    let mut taken = 0;
    for c in order {
        while taken < counts[c] {
            add_row(&mut run, rows[taken].1);
            taken += 1;
        }
        snaps[c] = run.clone();
    }
    snaps
}

/// Loss and gradient sums of a single model over one block.
pub fn evaluate_model_block(
    task: &TaskSpec,
    w: &[f64],
    block: BlockView<'_>,
    track_variance: bool,
) -> CandidateStats {
    let mut st = CandidateStats::empty(block.dim(), track_variance);
    for ex in block.iter() {
        let m = dot(w, ex.features);
        st.loss.push(task.margin_loss(ex.label, m));
        let c = task.margin_coef(ex.label, m);
        // a running sum that starts at +0.0 never becomes -0.0, so skipping
        // zero contributions is exact
        if c != 0.0 {
            axpy(&mut st.grad, c, ex.features);
            if track_variance {
                add_sq_scaled(&mut st.grad_sq, c, ex.features);
            }
        }
    }
    st
}

/// Summed loss of a single model over one block.
pub fn loss_block(task: &TaskSpec, w: &[f64], block: BlockView<'_>) -> Accumulator {
    let mut acc = Accumulator::EMPTY;
    for ex in block.iter() {
        acc.push(task.margin_loss(ex.label, dot(w, ex.features)));
    }
    acc
}

/// Turns summed statistics into the full objective gradient at `w`:
/// `sum + mu * dR(w)`.
pub fn add_regularizer_gradient(task: &TaskSpec, w: &[f64], grad_sum: &[f64]) -> Vec<f64> {
    let r = task.regularizer_gradient(w);
    grad_sum.iter().zip(&r).map(|(g, r)| g + r).collect()
}

/// Incremental updates for one model that steps once per group of `batch`
/// consecutive examples, using the group's summed gradient.
///
/// Group sums are folded like dataset sums: one partial per block segment,
/// starting from zero, added to the group total when the block or the group
/// ends. A group spanning the whole pass therefore reproduces the batch
/// gradient bit for bit. Each step also applies the share `count / N` of the
/// regularizer gradient, so one pass applies it once in total.
#[derive(Debug, Clone)]
pub struct GroupStepper {
    alpha: f64,
    batch: u64,
    population: u64,
    count: u64,
    last_zero: bool,
    acc: Vec<f64>,
    seg: Vec<f64>,
    reg: Vec<f64>,
}

impl GroupStepper {
    pub fn new(d: usize, alpha: f64, batch: u64, population: u64) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::Config(alloc::format!(
                "step size must be finite and >= 0, got {alpha}"
            )));
        }
        if batch == 0 || population == 0 || batch > population {
            return Err(Error::Config(alloc::format!(
                "batch size must be in [1, {population}], got {batch}"
            )));
        }
        Ok(GroupStepper {
            alpha,
            batch,
            population,
            count: 0,
            last_zero: false,
            acc: vec![0.0; d],
            seg: if batch > 1 { vec![0.0; d] } else { Vec::new() },
            reg: vec![0.0; d],
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn batch(&self) -> u64 {
        self.batch
    }

    /// Adds one example's gradient at `w`; true when the group is complete.
    #[inline]
    pub fn observe(&mut self, task: &TaskSpec, w: &[f64], ex: ExampleRef<'_>) -> bool {
        let c = task.margin_coef(ex.label, dot(w, ex.features));
        self.count += 1;
        self.last_zero = c == 0.0;
        if c != 0.0 {
            // batch 1: acc is zero here, and 0 + (0 + v) == 0 + v
            let target = if self.batch == 1 {
                &mut self.acc
            } else {
                &mut self.seg
            };
            axpy(target, c, ex.features);
        }
        self.count == self.batch
    }

    /// Call at every block boundary.
    pub fn end_block(&mut self) {
        if self.batch > 1 && self.count > 0 {
            add_assign(&mut self.acc, &self.seg);
            self.seg.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn has_pending(&self) -> bool {
        self.count > 0
    }

    /// Closes the current group and returns its step direction, evaluating
    /// the regularizer at `w`. Call `clear` once the step is applied.
    pub fn finish_group(&mut self, task: &TaskSpec, w: &[f64]) -> &[f64] {
        if self.batch > 1 {
            add_assign(&mut self.acc, &self.seg);
            self.seg.iter_mut().for_each(|v| *v = 0.0);
        }
        let share = self.count as f64 / self.population as f64;
        task.regularizer_gradient_into(w, &mut self.reg);
        for (a, r) in self.acc.iter_mut().zip(&self.reg) {
            *a += share * r;
        }
        self.count = 0;
        &self.acc
    }

    pub fn clear(&mut self) {
        self.acc.iter_mut().for_each(|v| *v = 0.0);
    }

    /// `w <- w - alpha * direction` for the completed group.
    pub fn apply(&mut self, task: &TaskSpec, w: &mut [f64]) {
        let alpha = self.alpha;
        let g = self.finish_group(task, w);
        for (wj, gj) in w.iter_mut().zip(g) {
            *wj -= alpha * gj;
        }
        self.clear();
    }

    /// Observes `ex` and steps if that completes a group.
    #[inline]
    pub fn process(&mut self, task: &TaskSpec, w: &mut [f64], ex: ExampleRef<'_>) {
        if self.observe(task, w, ex) {
            if self.batch == 1 && self.last_zero && task.reg == crate::task::Regularizer::None {
                // zero step leaves every weight bit-identical
                self.count = 0;
                return;
            }
            self.apply(task, w);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::Regularizer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_block(n: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for _ in 0..n {
            for _ in 0..d {
                rows.push(rng.random_range(-2.0..2.0));
            }
            rows.push(if rng.random_bool(0.5) { 1.0 } else { -1.0 });
        }
        rows
    }

    fn tasks() -> [TaskSpec; 3] {
        [
            TaskSpec::svm(),
            TaskSpec::logistic(),
            TaskSpec::new(LossFamily::SvmHinge, Regularizer::L2, 0.3).unwrap(),
        ]
    }

    #[test]
    fn line_candidates_match_materialized_models() {
        let d = 6;
        let rows = random_block(300, d, 1);
        let block = BlockView::new(&rows, d).unwrap();
        let base: Vec<f64> = (0..d).map(|j| 0.1 * j as f64 - 0.2).collect();
        let dir: Vec<f64> = (0..d).map(|j| 0.5 - 0.15 * j as f64).collect();
        let alphas = [0.0, 0.05, 0.3, 1.0, 2.5];
        for task in tasks() {
            let mut sc = LineScratch::default();
            let line = StepLine {
                base: &base,
                dir: &dir,
            };
            let got = evaluate_line_block(&task, line, &alphas, block, true, &mut sc);
            for (st, &al) in got.iter().zip(&alphas) {
                let w = line.point(al);
                let want = evaluate_model_block(&task, &w, block, true);
                assert_eq!(st.loss.n, want.loss.n);
                assert!((st.loss.sum - want.loss.sum).abs() < 1e-9, "{task:?} {al}");
                for j in 0..d {
                    assert!((st.grad[j] - want.grad[j]).abs() < 1e-9);
                    assert!((st.grad_sq[j] - want.grad_sq[j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn candidate_results_do_not_depend_on_the_other_candidates() {
        let d = 5;
        let rows = random_block(500, d, 2);
        let block = BlockView::new(&rows, d).unwrap();
        let base = vec![0.3, -0.1, 0.2, 0.0, 0.4];
        let dir = vec![1.0, 0.5, -0.5, 0.25, -1.0];
        let alphas = [0.01, 0.1, 0.2, 0.4, 0.8, 1.6];
        for task in tasks() {
            let line = StepLine {
                base: &base,
                dir: &dir,
            };
            let all = evaluate_line_block(
                &task,
                line,
                &alphas,
                block,
                true,
                &mut LineScratch::default(),
            );
            for (c, &al) in alphas.iter().enumerate() {
                let one = evaluate_line_block(
                    &task,
                    line,
                    &[al],
                    block,
                    true,
                    &mut LineScratch::default(),
                );
                assert_eq!(one[0], all[c]);
            }
        }
    }

    #[test]
    fn zero_direction_matches_direct_evaluation_bitwise() {
        let d = 7;
        let rows = random_block(200, d, 3);
        let block = BlockView::new(&rows, d).unwrap();
        let w: Vec<f64> = (0..d).map(|j| 0.2 - 0.05 * j as f64).collect();
        let zero = vec![0.0; d];
        for task in tasks() {
            let line = StepLine {
                base: &w,
                dir: &zero,
            };
            let got = evaluate_line_block(
                &task,
                line,
                &[0.0],
                block,
                true,
                &mut LineScratch::default(),
            );
            assert_eq!(got[0], evaluate_model_block(&task, &w, block, true));
        }
    }

    #[test]
    fn full_group_reproduces_the_batch_step() {
        let d = 4;
        let rows = random_block(90, d, 4);
        // three blocks of 30
        let blocks: Vec<BlockView<'_>> = rows
            .chunks(30 * (d + 1))
            .map(|r| BlockView::new(r, d).unwrap())
            .collect();
        let w0 = vec![0.1, 0.2, -0.3, 0.05];
        for task in tasks() {
            let mut total = CandidateStats::empty(d, false);
            for b in &blocks {
                total.merge_from(&evaluate_model_block(&task, &w0, *b, false));
            }
            let g = add_regularizer_gradient(&task, &w0, &total.grad);
            let alpha = 0.01;
            let want: Vec<f64> = w0.iter().zip(&g).map(|(w, g)| w - alpha * g).collect();

            let mut w = w0.clone();
            let mut st = GroupStepper::new(d, alpha, 90, 90).unwrap();
            for b in &blocks {
                for ex in b.iter() {
                    st.process(&task, &mut w, ex);
                }
                st.end_block();
            }
            assert_eq!(w, want);
        }
    }

    #[test]
    fn unit_groups_are_plain_incremental_steps() {
        let d = 3;
        let rows = random_block(40, d, 5);
        let block = BlockView::new(&rows, d).unwrap();
        let task = TaskSpec::logistic();
        let alpha = 0.1;
        let mut w = vec![0.0; d];
        let mut st = GroupStepper::new(d, alpha, 1, 40).unwrap();
        let mut reference = vec![0.0; d];
        for ex in block.iter() {
            st.process(&task, &mut w, ex);
            let c = task.margin_coef(ex.label, dot(&reference, ex.features));
            for (r, x) in reference.iter_mut().zip(ex.features) {
                *r -= alpha * (0.0 + c * x);
            }
        }
        assert_eq!(w, reference);
    }

    #[test]
    fn stepper_rejects_bad_batches() {
        assert!(GroupStepper::new(2, 0.1, 0, 10).is_err());
        assert!(GroupStepper::new(2, 0.1, 11, 10).is_err());
        assert!(GroupStepper::new(2, f64::NAN, 1, 10).is_err());
    }

    #[test]
    fn block_view_shape() {
        let rows = [1.0, 2.0, 1.0, 3.0, 4.0, -1.0];
        let b = BlockView::new(&rows, 2).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.example(1).features, [3.0, 4.0]);
        assert_eq!(b.example(1).label, -1.0);
        assert!(BlockView::new(&rows[..5], 2).is_err());
    }
}
