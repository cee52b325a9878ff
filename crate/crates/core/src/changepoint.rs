//! Penalised multiple changepoint detection (PELT) for Normal mean and
//! variance changes, with a CROPS penalty sweep.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats;

pub const VARIANCE_FLOOR: f64 = 1e-10;
pub const DEFAULT_MIN_SEG_LEN: usize = 2;
/// Gaps longer than this many consecutive missing hours split a series.
pub const MAX_BRIDGED_GAP: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChangepointError {
    #[error("series of length {n} is too short for segments of at least {min_seg_len}")]
    TooShort { n: usize, min_seg_len: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("penalty must be finite and non-negative, got {0}")]
    InvalidPenalty(f64),
    #[error("penalty range must satisfy 0 < lo < hi, got [{lo}, {hi}]")]
    InvalidRange { lo: f64, hi: f64 },
    #[error("minimum segment length must be at least 1")]
    InvalidMinSegLen,
    #[error("empty CROPS curve")]
    EmptyCurve,
}

pub type Result<T> = std::result::Result<T, ChangepointError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// Normal likelihood with per-segment mean and variance.
    #[default]
    MeanVariance,
    /// Per-segment mean, variance fixed at a robust whole-series estimate.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeltOptions {
    pub min_seg_len: usize,
    pub cost: CostKind,
}

impl Default for PeltOptions {
    fn default() -> Self {
        Self { min_seg_len: DEFAULT_MIN_SEG_LEN, cost: CostKind::MeanVariance }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentParams {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    /// Exclusive end index of every segment but the last.
    pub changepoints: Vec<usize>,
    pub penalty: f64,
    /// Segment costs plus `penalty` per changepoint.
    pub total_cost: f64,
    /// Segment costs alone.
    pub fit_cost: f64,
    pub segment_params: Vec<SegmentParams>,
}

impl Segmentation {
    pub fn count(&self) -> usize {
        self.changepoints.len()
    }

    /// `(start, end)` of every segment, end exclusive.
    pub fn segments(&self, n: usize) -> Vec<(usize, usize)> {
        let mut bounds = vec![0];
        bounds.extend(&self.changepoints);
        bounds.push(n);
        bounds.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Segment cost via prefix sums of the centred series.
struct Cost {
    s1: Vec<f64>,
    s2: Vec<f64>,
    kind: CostKind,
    scale: f64,
}

impl Cost {
    fn new(x: &[f64], kind: CostKind) -> Self {
        let centre = stats::mean(x);
        let mut s1 = Vec::with_capacity(x.len() + 1);
        let mut s2 = Vec::with_capacity(x.len() + 1);
        let (mut a, mut b) = (0.0, 0.0);
        s1.push(0.0);
        s2.push(0.0);
        for v in x {
            let c = v - centre;
            a += c;
            b += c * c;
            s1.push(a);
            s2.push(b);
        }
        let scale = match kind {
            CostKind::MeanVariance => 1.0,
            CostKind::Mean => robust_variance(x),
        };
        Self { s1, s2, kind, scale }
    }

    fn moments(&self, s: usize, t: usize) -> (f64, f64) {
        moments((t - s) as f64, self.s1[t] - self.s1[s], self.s2[t] - self.s2[s])
    }

    /// Twice the negative maximised log-likelihood of `x[s..t]`. With the
    /// variance floor this is the constrained maximum, which keeps the cost
    /// sub-additive.
    fn eval(&self, s: usize, t: usize) -> f64 {
        self.eval_sums((t - s) as f64, self.s1[t] - self.s1[s], self.s2[t] - self.s2[s])
    }

    #[inline(always)]
    fn eval_sums(&self, len: f64, sum: f64, sq: f64) -> f64 {
        let (_, var) = moments(len, sum, sq);
        match self.kind {
            CostKind::MeanVariance => {
                let v = var.max(VARIANCE_FLOOR);
                len * ((2.0 * std::f64::consts::PI * v).ln() + var / v)
            }
            CostKind::Mean => len * var / self.scale,
        }
    }
}

#[inline(always)]
fn moments(len: f64, sum: f64, sq: f64) -> (f64, f64) {
    let ss = (sq - sum * sum / len).max(0.0);
    (sum / len, ss / len)
}

/// Noise variance from the median absolute first difference, robust to
/// mean shifts; 1 when the series is locally constant.
fn robust_variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 1.0;
    }
    let diffs: Vec<f64> = x.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let sd = stats::median(&diffs) / (std::f64::consts::SQRT_2 * 0.674_489_750_196_081_7);
    if sd > 0.0 {
        sd * sd
    } else {
        1.0
    }
}

fn check(series: &[f64], penalty: f64, opts: &PeltOptions) -> Result<()> {
    if opts.min_seg_len == 0 {
        return Err(ChangepointError::InvalidMinSegLen);
    }
    if series.len() < 2 * opts.min_seg_len {
        return Err(ChangepointError::TooShort { n: series.len(), min_seg_len: opts.min_seg_len });
    }
    if let Some(i) = series.iter().position(|v| !v.is_finite()) {
        return Err(ChangepointError::NonFinite(i));
    }
    if !(penalty >= 0.0 && penalty.is_finite()) {
        return Err(ChangepointError::InvalidPenalty(penalty));
    }
    Ok(())
}

fn backtrack(prev: &[usize], n: usize) -> Vec<usize> {
    let mut cps = vec![];
    let mut t = prev[n];
    while t > 0 {
        cps.push(t);
        t = prev[t];
    }
    cps.reverse();
    cps
}

fn finish(cost: &Cost, cps: Vec<usize>, penalty: f64, n: usize, centre: f64) -> Segmentation {
    let mut seg = Segmentation { changepoints: cps, penalty, total_cost: 0.0, fit_cost: 0.0, segment_params: vec![] };
    for (s, t) in seg.segments(n) {
        let (mean, variance) = cost.moments(s, t);
        seg.fit_cost += cost.eval(s, t);
        seg.segment_params.push(SegmentParams { mean: mean + centre, variance });
    }
    seg.total_cost = seg.fit_cost + penalty * seg.count() as f64;
    seg
}

/// Exact optimum of `Σ C(segment) + penalty·#changepoints` by pruned dynamic
/// programming.
pub fn pelt(series: &[f64], penalty: f64) -> Result<Segmentation> {
    pelt_with(series, penalty, &PeltOptions::default())
}

pub fn pelt_with(series: &[f64], penalty: f64, opts: &PeltOptions) -> Result<Segmentation> {
    check(series, penalty, opts)?;
    let n = series.len();
    let cost = Cost::new(series, opts.cost);
    let mut search = Search::new(&cost, opts.min_seg_len, penalty, n);
    for t in opts.min_seg_len..=n {
        search.step(t);
    }
    let centre = stats::mean(series);
    Ok(finish(&cost, backtrack(&search.prev, n), penalty, n, centre))
}

const BLOCK_LEN: usize = 32;
const BLOCK_LEAD: usize = 32;

/// Consecutive candidates sharing the bound
/// `F[s] + C(s,t) ≥ min_s(F[s] + C(s,b)) + C(b,t)` for a split `b < t`.
struct Block {
    lo: usize,
    hi: usize,
    split: usize,
    floor: f64,
}

/// PELT state. Candidates older than the last few are grouped in blocks whose
/// sub-additivity bound often rules out every member with one evaluation;
/// members are then neither evaluated nor needed for the optimum.
struct Search<'a> {
    cost: &'a Cost,
    min: usize,
    penalty: f64,
    f: Vec<f64>,
    prev: Vec<usize>,
    cand: Vec<usize>,
    alive: Vec<bool>,
    dead: usize,
    blocks: Vec<Block>,
    blocked: usize,
    // pruning decided at t only applies once t itself can end a segment
    pending: BTreeMap<usize, Vec<usize>>,
    values: Vec<(usize, f64)>,
}

impl<'a> Search<'a> {
    fn new(cost: &'a Cost, min: usize, penalty: f64, n: usize) -> Self {
        let mut f = vec![f64::INFINITY; n + 1];
        f[0] = -penalty;
        Self {
            cost,
            min,
            penalty,
            f,
            prev: vec![0; n + 1],
            cand: vec![0],
            alive: vec![true],
            dead: 0,
            blocks: vec![],
            blocked: 0,
            pending: BTreeMap::new(),
            values: vec![],
        }
    }

    fn compact(&mut self) {
        let mut map = vec![0; self.cand.len() + 1];
        let mut keep = 0;
        for i in 0..self.cand.len() {
            map[i] = keep;
            if self.alive[i] {
                self.cand[keep] = self.cand[i];
                keep += 1;
            }
        }
        map[self.cand.len()] = keep;
        self.blocked = map[self.blocked];
        self.cand.truncate(keep);
        self.alive = vec![true; keep];
        self.dead = 0;
        for b in &mut self.blocks {
            b.lo = map[b.lo];
            b.hi = map[b.hi];
        }
        self.blocks.retain(|b| b.hi > b.lo);
    }

    fn step(&mut self, t: usize) {
        let (min, penalty) = (self.min, self.penalty);
        if let Some(drop) = self.pending.remove(&t) {
            for s in drop {
                if let Ok(i) = self.cand.binary_search(&s) {
                    if self.alive[i] {
                        self.alive[i] = false;
                        self.dead += 1;
                    }
                }
            }
            if self.dead > 64 && 2 * self.dead > self.cand.len() {
                self.compact();
            }
        }
        if t - min >= min {
            self.cand.push(t - min);
            self.alive.push(true);
        }
        while self.cand.len() - self.blocked >= BLOCK_LEN {
            let (lo, hi) = (self.blocked, self.blocked + BLOCK_LEN);
            let split = self.cand[hi - 1] + BLOCK_LEAD;
            if split >= t {
                break;
            }
            let floor = (lo..hi)
                .filter(|&i| self.alive[i])
                .map(|i| self.f[self.cand[i]] + self.cost.eval(self.cand[i], split))
                .fold(f64::INFINITY, f64::min);
            self.blocks.push(Block { lo, hi, split, floor });
            self.blocked = hi;
        }

        // (value + penalty, s), ties to the earliest s
        let mut best = (f64::INFINITY, 0usize);
        let consider = |best: &mut (f64, usize), s: usize, v: f64| {
            let total = v + penalty;
            if total < best.0 || (total == best.0 && s < best.1) {
                *best = (total, s);
            }
        };
        self.values.clear();
        for i in self.blocked..self.cand.len() {
            if self.alive[i] {
                let s = self.cand[i];
                let v = self.f[s] + self.cost.eval(s, t);
                consider(&mut best, s, v);
                self.values.push((s, v));
            }
        }
        let mut skipped = vec![];
        for (bi, b) in self.blocks.iter().enumerate() {
            let tail = self.cost.eval(b.split, t);
            let bound = b.floor + tail - 1e-8 * (b.floor.abs() + tail.abs() + 1.0);
            if bound + penalty > best.0 {
                skipped.push((bi, bound));
                continue;
            }
            for i in b.lo..b.hi {
                if self.alive[i] {
                    let s = self.cand[i];
                    let v = self.f[s] + self.cost.eval(s, t);
                    consider(&mut best, s, v);
                    self.values.push((s, v));
                }
            }
        }
        self.f[t] = best.0;
        self.prev[t] = best.1;

        let mut drop: Vec<usize> = self.values.iter().filter(|(_, v)| *v > best.0).map(|(s, _)| *s).collect();
        for (bi, bound) in skipped {
            if bound > best.0 {
                let b = &self.blocks[bi];
                drop.extend((b.lo..b.hi).filter(|&i| self.alive[i]).map(|i| self.cand[i]));
            }
        }
        if !drop.is_empty() {
            drop.sort_unstable();
            self.pending.entry(t + min).or_default().extend(drop);
        }
    }
}

/// Unpruned O(n²) optimal partitioning; same optimum as [`pelt_with`].
pub fn optimal_partitioning(series: &[f64], penalty: f64, opts: &PeltOptions) -> Result<Segmentation> {
    check(series, penalty, opts)?;
    let n = series.len();
    let min = opts.min_seg_len;
    let cost = Cost::new(series, opts.cost);
    let mut f = vec![f64::INFINITY; n + 1];
    let mut prev = vec![0usize; n + 1];
    f[0] = -penalty;
    for t in min..=n {
        let mut best = f64::INFINITY;
        let mut arg = 0;
        for s in std::iter::once(0).chain(min..=t.saturating_sub(min)) {
            if s > 0 && t - s < min {
                continue;
            }
            let v = f[s] + cost.eval(s, t) + penalty;
            if v < best {
                best = v;
                arg = s;
            }
        }
        f[t] = best;
        prev[t] = arg;
    }
    let centre = stats::mean(series);
    Ok(finish(&cost, backtrack(&prev, n), penalty, n, centre))
}

/// Default single-run penalty `3·ln n`.
pub fn default_penalty(n: usize) -> f64 {
    3.0 * (n as f64).ln()
}

/// Default CROPS range `[ln n, 100·ln n]`.
pub fn default_penalty_range(n: usize) -> (f64, f64) {
    let l = (n as f64).ln();
    (l, 100.0 * l)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropsEntry {
    /// Penalties in `[penalty_lo, penalty_hi]` give this segmentation.
    pub penalty_lo: f64,
    pub penalty_hi: f64,
    pub num_changepoints: usize,
    pub segmentation: Segmentation,
}

/// Entries ordered by increasing penalty, hence non-increasing count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropsCurve {
    pub entries: Vec<CropsEntry>,
    /// Number of distinct PELT runs.
    pub runs: usize,
}

pub fn crops(series: &[f64], penalty_lo: f64, penalty_hi: f64) -> Result<CropsCurve> {
    crops_with(series, penalty_lo, penalty_hi, &PeltOptions::default())
}

/// Resolve the optimal changepoint count over a penalty range.
pub fn crops_with(series: &[f64], penalty_lo: f64, penalty_hi: f64, opts: &PeltOptions) -> Result<CropsCurve> {
    if !(penalty_lo > 0.0 && penalty_lo < penalty_hi && penalty_hi.is_finite()) {
        return Err(ChangepointError::InvalidRange { lo: penalty_lo, hi: penalty_hi });
    }
    let mut runs = 0;
    let mut run = |beta: f64| -> Result<Segmentation> {
        runs += 1;
        pelt_with(series, beta, opts)
    };
    let lo = run(penalty_lo)?;
    let hi = run(penalty_hi)?;
    let mut by_count: BTreeMap<usize, Segmentation> = BTreeMap::new();
    let mut stack = vec![];
    if lo.count() > hi.count() {
        stack.push((lo.clone(), hi.clone()));
    }
    by_count.insert(lo.count(), lo);
    by_count.entry(hi.count()).or_insert(hi);

    while let Some((a, b)) = stack.pop() {
        // a has more changepoints and the smaller penalty
        if a.count() <= b.count() + 1 {
            continue;
        }
        let beta = (b.fit_cost - a.fit_cost) / (a.count() - b.count()) as f64;
        if !(beta > a.penalty && beta < b.penalty) {
            continue;
        }
        let c = run(beta)?;
        if c.count() == a.count() || c.count() == b.count() {
            continue;
        }
        by_count.entry(c.count()).or_insert_with(|| c.clone());
        stack.push((a, c.clone()));
        stack.push((c, b));
    }

    // lower envelope of the cost lines Q_m + β·m, in increasing penalty
    let mut entries: Vec<CropsEntry> = vec![];
    for seg in by_count.into_values().rev() {
        loop {
            let Some(last) = entries.last() else { break };
            let boundary = crossing(&last.segmentation, &seg);
            if boundary <= last.penalty_lo {
                entries.pop();
                continue;
            }
            break;
        }
        let lo = entries.last().map_or(penalty_lo, |last| crossing(&last.segmentation, &seg).clamp(penalty_lo, penalty_hi));
        if let Some(last) = entries.last_mut() {
            last.penalty_hi = lo;
        }
        entries.push(CropsEntry { penalty_lo: lo, penalty_hi, num_changepoints: seg.count(), segmentation: seg });
    }
    entries.retain(|e| e.penalty_hi > e.penalty_lo || e.penalty_lo == penalty_hi);
    Ok(CropsCurve { entries, runs })
}

/// Penalty at which `more` (more changepoints) and `fewer` cost the same.
fn crossing(more: &Segmentation, fewer: &Segmentation) -> f64 {
    (fewer.fit_cost - more.fit_cost) / (more.count() as f64 - fewer.count() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub segmentation: Segmentation,
    pub requested: usize,
    /// The requested count was not on the curve and the nearest was used.
    pub fallback: bool,
}

/// Segmentation with `m` changepoints, or the nearest available count
/// (ties go to the larger count).
pub fn select_by_count(curve: &CropsCurve, m: usize) -> Result<Selection> {
    let best = curve
        .entries
        .iter()
        .min_by(|a, b| {
            let da = a.num_changepoints.abs_diff(m);
            let db = b.num_changepoints.abs_diff(m);
            da.cmp(&db).then(b.num_changepoints.cmp(&a.num_changepoints))
        })
        .ok_or(ChangepointError::EmptyCurve)?;
    Ok(Selection { segmentation: best.segmentation.clone(), requested: m, fallback: best.num_changepoints != m })
}

/// A run of a gappy series analysed on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSegmentation {
    /// Span `[start, end)` in the original indexing.
    pub start: usize,
    pub end: usize,
    /// Changepoints mapped back to original indices.
    pub changepoints: Vec<usize>,
    pub segmentation: Segmentation,
}

/// Split at gaps longer than [`MAX_BRIDGED_GAP`], drop missing points inside
/// each run, and segment each run. Runs too short to segment are skipped.
pub fn pelt_gappy(series: &[Option<f64>], penalty: Option<f64>, opts: &PeltOptions) -> Result<Vec<RunSegmentation>> {
    let mut out = vec![];
    for (start, end) in split_runs(series) {
        let idx: Vec<usize> = (start..end).filter(|&i| series[i].is_some()).collect();
        let values: Vec<f64> = idx.iter().map(|&i| series[i].unwrap()).collect();
        if values.len() < 2 * opts.min_seg_len.max(1) {
            continue;
        }
        let beta = penalty.unwrap_or_else(|| default_penalty(values.len()));
        let seg = pelt_with(&values, beta, opts)?;
        out.push(RunSegmentation { start, end, changepoints: seg.changepoints.iter().map(|&c| idx[c]).collect(), segmentation: seg });
    }
    Ok(out)
}

/// Observed runs `[start, end)`, separated by gaps of more than
/// [`MAX_BRIDGED_GAP`] missing points. Runs start and end on observed values.
pub fn split_runs(series: &[Option<f64>]) -> Vec<(usize, usize)> {
    let mut runs = vec![];
    let mut start: Option<usize> = None;
    let mut last_obs = 0;
    for (i, v) in series.iter().enumerate() {
        if v.is_none() {
            continue;
        }
        match start {
            Some(s) if i - last_obs - 1 > MAX_BRIDGED_GAP => {
                runs.push((s, last_obs + 1));
                start = Some(i);
            }
            None => start = Some(i),
            _ => {}
        }
        last_obs = i;
    }
    if let Some(s) = start {
        runs.push((s, last_obs + 1));
    }
    runs
}
