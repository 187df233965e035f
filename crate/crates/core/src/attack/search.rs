//! Parallel hyperplane search: bias placement over live intervals, strip
//! extraction from gradient reports, and the evolving search state.
//!
//! The state keeps one record per distinct activating set seen so far (a
//! "set observation"), each covering the bias range over which it was
//! observed. Adjacent records always differ; the gaps between them are the
//! live intervals. An empty record (no activating input) can only exist
//! below every nonempty one; observations violating that ordering are
//! discarded as cancellation artifacts.

use crate::data::FeatureBounds;
use crate::error::{Error, Result};
use crate::model::GradientReport;
use crate::numerics::DenseVector;

/// One neuron-round observation: normalized weight gradient, bias gradient,
/// and the bias that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Strip {
    pub g: DenseVector,
    pub h: f64,
    pub bias: f64,
}

/// Strip comparison flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EqualityMode {
    /// Componentwise relative comparison, for noiseless full-batch runs.
    Exact,
    /// Projection-residual comparison, for local-steps and noisy runs.
    Robust,
}

/// Whether two strips come from the same activating set.
pub fn strips_equal(
    a: &Strip,
    b: &Strip,
    mode: EqualityMode,
    g_equal_tol: f64,
    residual_tol: f64,
) -> bool {
    match mode {
        EqualityMode::Exact => {
            let scale = a
                .g
                .iter()
                .chain(b.g.iter())
                .fold(1.0f64, |m, v| m.max(v.abs()));
            a.g.dist_inf(&b.g) <= g_equal_tol * scale
                && (a.h - b.h).abs() <= g_equal_tol * a.h.abs().max(1.0)
        }
        EqualityMode::Robust => {
            // Project the higher-bias observation onto the other and test
            // the Euclidean residual.
            let (p, q) = if a.bias >= b.bias { (a, b) } else { (b, a) };
            let qq: f64 = q.g.iter().map(|v| v * v).sum();
            if qq == 0.0 {
                return p.g.norm2() < residual_tol;
            }
            let pq: f64 = p.g.iter().zip(q.g.iter()).map(|(x, y)| x * y).sum();
            let coef = pq / qq;
            let residual: f64 = p
                .g
                .iter()
                .zip(q.g.iter())
                .map(|(x, y)| (x - coef * y) * (x - coef * y))
                .sum::<f64>()
                .sqrt();
            residual < residual_tol
        }
    }
}

/// Bias range `[low, high]` guaranteed to contain every boundary bias
/// `-w.x` for `x` inside the feature box, by interval arithmetic.
pub fn initial_interval(w: &DenseVector, bounds: &FeatureBounds) -> Result<(f64, f64)> {
    if w.len() != bounds.dim() {
        return Err(Error::shape(format!(
            "direction dim {} != bounds dim {}",
            w.len(),
            bounds.dim()
        )));
    }
    let mut max_dot = 0.0;
    let mut min_dot = 0.0;
    for (wj, (lo, hi)) in w.iter().zip(bounds.iter()) {
        if *wj > 0.0 {
            max_dot += wj * hi;
            min_dot += wj * lo;
        } else {
            max_dot += wj * lo;
            min_dot += wj * hi;
        }
    }
    let (low, high) = (-max_dot, -min_dot);
    if !(low < high) {
        return Err(Error::invalid(
            "degenerate search interval (zero attack direction?)",
        ));
    }
    Ok((low, high))
}

/// Extracts strips from a gradient report: one per neuron whose bias
/// gradient magnitude clears `h_floor` (anything below is treated as "no
/// activating input"). `biases[i]` is the bias neuron `i` carried.
pub fn compute_observations(
    report: &GradientReport,
    biases: &[f64],
    h_floor: f64,
) -> Vec<Strip> {
    let layer = &report.layers[0];
    let mut strips = Vec::new();
    for (i, &bias) in biases.iter().enumerate() {
        let h = layer.biases.get(i);
        if h.abs() <= h_floor {
            continue;
        }
        let g = DenseVector::from(layer.weights.row(i).iter().map(|w| w / h).collect::<Vec<_>>());
        strips.push(Strip { g, h, bias });
    }
    strips
}

/// Places `n` bias values over the live intervals: a single interval gets
/// `n` equispaced interior points; multiple intervals are sorted by
/// descending length, the `n mod M` longest receive one extra point each.
/// With more intervals than probes, the `n` longest receive one point each
/// and the rest wait for a later round.
pub fn spread_biases(intervals: &[(f64, f64)], n: usize) -> Vec<f64> {
    if intervals.is_empty() || n == 0 {
        return Vec::new();
    }
    let interior = |(lo, hi): (f64, f64), count: usize, out: &mut Vec<f64>| {
        let width = hi - lo;
        for i in 1..=count {
            out.push(lo + i as f64 * width / (count as f64 + 1.0));
        }
    };

    let mut out = Vec::with_capacity(n);
    if intervals.len() == 1 {
        interior(intervals[0], n, &mut out);
        return out;
    }
    let mut sorted: Vec<(f64, f64)> = intervals.to_vec();
    sorted.sort_by(|a, b| {
        let (wa, wb) = (a.1 - a.0, b.1 - b.0);
        wb.partial_cmp(&wa)
            .unwrap()
            .then(a.0.partial_cmp(&b.0).unwrap())
    });
    let m = sorted.len();
    if m > n {
        for &iv in sorted.iter().take(n) {
            interior(iv, 1, &mut out);
        }
        return out;
    }
    let q = n / m;
    let r = n % m;
    for (k, &iv) in sorted.iter().enumerate() {
        interior(iv, if k < r { q + 1 } else { q }, &mut out);
    }
    out
}

/// One distinct activating set and the bias range it was observed over.
/// `strip` is None for the empty set.
#[derive(Debug, Clone)]
struct SetObservation {
    strip: Option<Strip>,
    lo: f64,
    hi: f64,
}

/// Evolving search state of the parallel attack.
#[derive(Debug, Clone)]
pub struct SearchState {
    observations: Vec<SetObservation>,
    epsilon: f64,
    mode: EqualityMode,
    g_equal_tol: f64,
    residual_tol: f64,
    initial: (f64, f64),
    pending: Vec<f64>,
    rounds_observed: usize,
}

impl SearchState {
    pub fn new(
        initial: (f64, f64),
        epsilon: f64,
        mode: EqualityMode,
        g_equal_tol: f64,
        residual_tol: f64,
    ) -> Result<Self> {
        if !(initial.0 < initial.1) {
            return Err(Error::invalid("initial interval must have positive width"));
        }
        if epsilon < 0.0 || !epsilon.is_finite() {
            return Err(Error::invalid("epsilon must be finite and >= 0"));
        }
        Ok(Self {
            observations: Vec::new(),
            epsilon,
            mode,
            g_equal_tol,
            residual_tol,
            initial,
            pending: Vec::new(),
            rounds_observed: 0,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn equal(&self, a: &Option<Strip>, b: &Option<Strip>) -> bool {
        match (a, b) {
            (None, None) => true,
            (Some(x), Some(y)) => {
                strips_equal(x, y, self.mode, self.g_equal_tol, self.residual_tol)
            }
            _ => false,
        }
    }

    /// Gaps between adjacent distinct observations that are still worth
    /// subdividing: width at least epsilon with representable interior
    /// points. Before any observation the whole initial interval is live.
    pub fn live_intervals(&self) -> Vec<(f64, f64)> {
        if self.rounds_observed == 0 {
            return vec![self.initial];
        }
        self.adjacent_gaps()
            .into_iter()
            .filter(|&(lo, hi)| {
                let width = hi - lo;
                width >= self.epsilon && width > 0.0 && {
                    let mid = lo + width * 0.5;
                    lo < mid && mid < hi
                }
            })
            .collect()
    }

    fn adjacent_gaps(&self) -> Vec<(f64, f64)> {
        self.observations
            .windows(2)
            .map(|pair| (pair[0].hi, pair[1].lo))
            .filter(|&(lo, hi)| hi > lo)
            .collect()
    }

    /// Adjacent unequal pairs whose gap dropped below epsilon: flagged
    /// unresolvable rather than subdivided further.
    pub fn epsilon_collisions(&self) -> usize {
        if self.epsilon <= 0.0 {
            return 0;
        }
        self.adjacent_gaps()
            .iter()
            .filter(|&&(lo, hi)| hi - lo < self.epsilon)
            .count()
    }

    /// Chooses the next round's bias vector and remembers it so that
    /// silent neurons can be registered as empty observations.
    pub fn update_hyperplanes(&mut self, n: usize) -> Vec<f64> {
        let biases = spread_biases(&self.live_intervals(), n);
        self.pending = biases.clone();
        biases
    }

    /// Merges a round of strips into the state. Pending biases that no
    /// strip claimed become empty observations. Each observation either
    /// extends the range of an equal neighbor or founds a new set.
    pub fn update_search_state(&mut self, new_strips: Vec<Strip>) {
        let mut items: Vec<(f64, Option<Strip>)> = Vec::with_capacity(self.pending.len());
        let mut claimed: Vec<f64> = new_strips.iter().map(|s| s.bias).collect();
        claimed.sort_by(f64::total_cmp);
        let mut pending = std::mem::take(&mut self.pending);
        pending.sort_by(f64::total_cmp);
        // Multiset difference pending - claimed = silent biases.
        let mut ci = 0;
        for &b in &pending {
            if ci < claimed.len() && claimed[ci] == b {
                ci += 1;
            } else {
                items.push((b, None));
            }
        }
        for s in new_strips {
            items.push((s.bias, Some(s)));
        }
        items.sort_by(|a, b| a.0.total_cmp(&b.0));

        for (bias, strip) in items {
            self.insert(bias, strip);
        }
        self.merge_adjacent_equal();
        self.rounds_observed += 1;
    }

    fn insert(&mut self, bias: f64, strip: Option<Strip>) {
        // First index whose range starts beyond the new bias.
        let pos = self
            .observations
            .partition_point(|obs| obs.lo <= bias);
        if pos > 0 && self.observations[pos - 1].hi >= bias {
            // Inside an existing range: consistent duplicates carry no new
            // information, contradictions are dropped.
            return;
        }
        let is_empty = strip.is_none();
        if is_empty && self.observations[..pos].iter().any(|o| o.strip.is_some()) {
            // An empty reading above a live set is physically impossible
            // under nested activation; discard (gradient cancellation).
            return;
        }
        if pos > 0 && self.equal(&self.observations[pos - 1].strip, &strip) {
            self.observations[pos - 1].hi = bias;
            return;
        }
        if pos < self.observations.len() && self.equal(&self.observations[pos].strip, &strip) {
            self.observations[pos].lo = bias;
            return;
        }
        self.observations.insert(
            pos,
            SetObservation {
                strip,
                lo: bias,
                hi: bias,
            },
        );
    }

    fn merge_adjacent_equal(&mut self) {
        let mut k = 1;
        while k < self.observations.len() {
            if self.equal(
                &self.observations[k - 1].strip,
                &self.observations[k].strip,
            ) {
                self.observations[k - 1].hi = self.observations[k].hi;
                self.observations.remove(k);
            } else {
                k += 1;
            }
        }
    }

    /// Retained strips in ascending bias order, one per distinct activating
    /// set, each reported at the lowest bias that produced it.
    pub fn strips(&self) -> Vec<Strip> {
        self.observations
            .iter()
            .filter_map(|obs| {
                obs.strip.as_ref().map(|s| Strip {
                    g: s.g.clone(),
                    h: s.h,
                    bias: obs.lo,
                })
            })
            .collect()
    }

    pub fn rounds_observed(&self) -> usize {
        self.rounds_observed
    }
}
