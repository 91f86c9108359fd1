//! Exhaustive enumeration over Ωᴺ for finite Ω.
//!
//! Objectives of the form `Σ_{i<j} T_ij(x_i, x_j) + Σ_i D_i(x_i) + G(Σx², Σx·x⁰, Σx)`
//! are visited in reflected Gray-code order, so each step changes one
//! coordinate and costs O(N).

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian_equiv::OverlapStats;
use crate::special::LogSumExp;

/// Running sums that determine the overlaps of a configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Sums {
    pub n: usize,
    /// `Σ x_i²`.
    pub sq: f64,
    /// `Σ x_i x⁰_i`.
    pub dot0: f64,
    /// `Σ x_i`.
    pub sum: f64,
}

impl Sums {
    pub fn of(x: &[f64], x0: &[f64]) -> Self {
        Self {
            n: x.len(),
            sq: x.iter().map(|v| v * v).sum(),
            dot0: x.iter().zip(x0).map(|(a, b)| a * b).sum(),
            sum: x.iter().sum(),
        }
    }

    pub fn stats(&self, x0_sq: f64) -> OverlapStats {
        let n = self.n as f64;
        let s = self.sq / n;
        let m = self.dot0 / n;
        let s0 = x0_sq / n;
        let cos = if s > 0.0 && s0 > 0.0 {
            (m / (s * s0).sqrt()).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        OverlapStats {
            s,
            m,
            v: self.sum / n,
            cos,
        }
    }
}

pub type GlobalTerm = Arc<dyn Fn(&Sums) -> f64 + Send + Sync>;

/// A pairwise objective tabulated on the points of a finite Ω.
#[derive(Clone)]
pub struct PairObjective {
    n: usize,
    points: Vec<f64>,
    /// `T_ij(a, b)` at `((i·n + j)·m + a)·m + b`, filled for both orders.
    pair: Vec<f64>,
    /// `D_i(a)` at `i·m + a`.
    diag: Vec<f64>,
    x0: Vec<f64>,
    global: GlobalTerm,
    /// Invariant under `x → −x`.
    even: bool,
}

impl std::fmt::Debug for PairObjective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PairObjective")
            .field("n", &self.n)
            .field("points", &self.points)
            .field("even", &self.even)
            .finish_non_exhaustive()
    }
}

impl PairObjective {
    /// Tabulates `pair(i, j, a, b)` for `i < j` and `diag(i, a)` over the points.
    pub fn new(
        points: &[f64],
        x0: Vec<f64>,
        mut pair: impl FnMut(usize, usize, f64, f64) -> Result<f64>,
        mut diag: impl FnMut(usize, f64) -> Result<f64>,
        global: GlobalTerm,
        even: bool,
    ) -> Result<Self> {
        let n = x0.len();
        let m = points.len();
        let mut table = vec![0.0; n * n * m * m];
        for i in 0..n {
            for j in i + 1..n {
                for (a, &xa) in points.iter().enumerate() {
                    for (b, &xb) in points.iter().enumerate() {
                        let v = pair(i, j, xa, xb)?;
                        table[((i * n + j) * m + a) * m + b] = v;
                        table[((j * n + i) * m + b) * m + a] = v;
                    }
                }
            }
        }
        let mut d = vec![0.0; n * m];
        for i in 0..n {
            for (a, &xa) in points.iter().enumerate() {
                d[i * m + a] = diag(i, xa)?;
            }
        }
        Ok(Self {
            n,
            points: points.to_vec(),
            pair: table,
            diag: d,
            x0,
            global,
            even,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    fn m(&self) -> usize {
        self.points.len()
    }

    #[inline]
    fn t(&self, i: usize, j: usize, a: usize, b: usize) -> f64 {
        let m = self.m();
        self.pair[((i * self.n + j) * m + a) * m + b]
    }

    /// Value at the configuration given by point indices.
    pub fn value_digits(&self, digits: &[u8]) -> f64 {
        let m = self.m();
        let mut total = 0.0;
        for i in 0..self.n {
            let a = digits[i] as usize;
            total += self.diag[i * m + a];
            for j in i + 1..self.n {
                total += self.t(i, j, a, digits[j] as usize);
            }
        }
        let x = self.point_vector(digits);
        total + (self.global)(&Sums::of(&x, &self.x0))
    }

    pub fn point_vector(&self, digits: &[u8]) -> Vec<f64> {
        digits.iter().map(|&d| self.points[d as usize]).collect()
    }

    /// Number of configurations `|Ω|^N`.
    pub fn configurations(&self) -> f64 {
        (self.m() as f64).powi(self.n as i32)
    }

    fn mirror_symmetric(&self) -> bool {
        self.even && self.m() == 2 && self.points[0] == -self.points[1]
    }
}

/// Constraint set Ω_ε(S, M[, v]).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shell {
    pub s: f64,
    pub m: f64,
    pub v: Option<f64>,
    pub eps: f64,
}

impl Shell {
    pub fn contains(&self, st: &OverlapStats) -> bool {
        (st.s - self.s).abs() <= self.eps
            && (st.m - self.m).abs() <= self.eps
            && self.v.is_none_or(|v| (st.v - v).abs() <= self.eps)
    }
}

/// Receives every visited configuration.
pub trait Accumulator: Send {
    /// `mirrored` means the configuration stands for itself and its negation.
    fn visit(&mut self, digits: &[u8], value: f64, stats: &OverlapStats, mirrored: bool);
    fn merge(&mut self, other: Self)
    where
        Self: Sized;
}

/// Default cap on `|Ω|^N`.
pub const DEFAULT_LIMIT: usize = 1 << 24;

/// Visits every configuration of Ωᴺ (inside `shell`, if given).
pub fn enumerate<A: Accumulator>(
    obj: &PairObjective,
    shell: Option<&Shell>,
    limit: usize,
    init: impl Fn() -> A + Sync,
) -> Result<A> {
    let configs = obj.configurations();
    if configs > limit as f64 {
        return Err(Error::TooLarge { configs, limit });
    }
    let n = obj.n;
    let m = obj.m();
    if n == 0 {
        let mut acc = init();
        let st = Sums::default().stats(0.0);
        acc.visit(&[], (obj.global)(&Sums::default()), &st, false);
        return Ok(acc);
    }
    let mirrored = shell.is_none() && obj.mirror_symmetric();
    // coordinates n - fixed .. n are pinned per task; the rest are Gray-coded
    let pinned_by_symmetry = usize::from(mirrored);
    let mut split = pinned_by_symmetry;
    while split < n && (m as f64).powi((split - pinned_by_symmetry) as i32) < 64.0 && n - split > 8
    {
        split += 1;
    }
    let free = n - split;
    let tasks = m.pow((split - pinned_by_symmetry) as u32);
    let x0_sq: f64 = obj.x0.iter().map(|v| v * v).sum();

    let results: Vec<A> = (0..tasks)
        .into_par_iter()
        .map(|task| {
            let mut acc = init();
            let mut digits = vec![0u8; n];
            let mut t = task;
            for d in digits.iter_mut().take(n - pinned_by_symmetry).skip(free) {
                *d = (t % m) as u8;
                t /= m;
            }
            if mirrored {
                digits[n - 1] = 1;
            }
            gray_walk(obj, &mut digits, free, x0_sq, shell, mirrored, &mut acc);
            acc
        })
        .collect();
    let mut iter = results.into_iter();
    let mut acc = iter.next().expect("at least one task");
    for r in iter {
        acc.merge(r);
    }
    Ok(acc)
}

/// Gray-code walk over the first `free` coordinates, starting from `digits`.
fn gray_walk<A: Accumulator>(
    obj: &PairObjective,
    digits: &mut [u8],
    free: usize,
    x0_sq: f64,
    shell: Option<&Shell>,
    mirrored: bool,
    acc: &mut A,
) {
    let m = obj.m();
    let x: Vec<f64> = obj.point_vector(digits);
    let mut sums = Sums::of(&x, &obj.x0);
    let mut pair_total = obj.value_digits(digits) - (obj.global)(&sums);

    let visit = |digits: &[u8], pair_total: f64, sums: &Sums, acc: &mut A| {
        let st = sums.stats(x0_sq);
        if shell.is_none_or(|sh| sh.contains(&st)) {
            acc.visit(digits, pair_total + (obj.global)(sums), &st, mirrored);
        }
    };

    // Knuth's loopless reflected mixed-radix Gray code
    let mut focus: Vec<usize> = (0..=free).collect();
    let mut dir = vec![1i8; free];
    loop {
        visit(digits, pair_total, &sums, acc);
        let j = focus[0];
        focus[0] = 0;
        if j == free {
            break;
        }
        let old = digits[j] as usize;
        let new = (old as i64 + dir[j] as i64) as usize;
        let mut delta = obj.diag[j * m + new] - obj.diag[j * m + old];
        for (k, &dk) in digits.iter().enumerate() {
            if k != j {
                let dk = dk as usize;
                delta += obj.t(j, k, new, dk) - obj.t(j, k, old, dk);
            }
        }
        pair_total += delta;
        let (xo, xn) = (obj.points[old], obj.points[new]);
        sums.sq += xn * xn - xo * xo;
        sums.dot0 += (xn - xo) * obj.x0[j];
        sums.sum += xn - xo;
        digits[j] = new as u8;
        if new == 0 || new == m - 1 {
            dir[j] = -dir[j];
            focus[j] = focus[j + 1];
            focus[j + 1] = j + 1;
        }
    }
}

/// `log Σ exp(L·f(x))` over the enumerated configurations.
#[derive(Clone, Debug)]
pub struct LogPartition {
    beta: f64,
    lse: LogSumExp,
    count: f64,
}

impl LogPartition {
    pub fn new(beta: f64) -> Self {
        Self {
            beta,
            lse: LogSumExp::default(),
            count: 0.0,
        }
    }

    pub fn value(&self) -> f64 {
        self.lse.value()
    }

    /// Number of configurations summed.
    pub fn count(&self) -> f64 {
        self.count
    }
}

impl Accumulator for LogPartition {
    fn visit(&mut self, _digits: &[u8], value: f64, _stats: &OverlapStats, mirrored: bool) {
        if mirrored {
            self.lse.push(self.beta * value + std::f64::consts::LN_2);
            self.count += 2.0;
        } else {
            self.lse.push(self.beta * value);
            self.count += 1.0;
        }
    }

    fn merge(&mut self, other: Self) {
        self.lse.merge(&other.lse);
        self.count += other.count;
    }
}

/// Maximum value and the near-maximal configurations.
#[derive(Clone, Debug)]
pub struct MaxTracker {
    pub best: f64,
    /// Candidates within the tolerance of the running best.
    pub candidates: Vec<(f64, Vec<u8>, bool)>,
    pub rel_tol: f64,
}

impl MaxTracker {
    pub fn new(rel_tol: f64) -> Self {
        Self {
            best: f64::NEG_INFINITY,
            candidates: Vec::new(),
            rel_tol,
        }
    }

    fn window(&self) -> f64 {
        self.rel_tol * self.best.abs().max(1.0)
    }

    fn prune(&mut self) {
        let cut = self.best - self.window();
        self.candidates.retain(|c| c.0 >= cut);
    }
}

impl Accumulator for MaxTracker {
    fn visit(&mut self, digits: &[u8], value: f64, _stats: &OverlapStats, mirrored: bool) {
        if value < self.best - self.window() {
            return;
        }
        if value > self.best {
            self.best = value;
            self.prune();
        }
        self.candidates.push((value, digits.to_vec(), mirrored));
    }

    fn merge(&mut self, other: Self) {
        if other.best > self.best {
            self.best = other.best;
        }
        self.candidates.extend(other.candidates);
        self.prune();
    }
}

/// Exact maximum and maximizing set.
#[derive(Clone, Debug, PartialEq)]
pub struct ArgmaxSet {
    pub value: f64,
    /// Maximizers as point vectors, sorted lexicographically.
    pub points: Vec<Vec<f64>>,
}

/// Maximizers of `obj` within relative tolerance `rel_tol`; candidates are
/// re-evaluated from scratch, so accumulated rounding in the walk cannot
/// change the set.
pub fn argmax_set(
    obj: &PairObjective,
    shell: Option<&Shell>,
    rel_tol: f64,
    limit: usize,
) -> Result<ArgmaxSet> {
    // a looser window during the walk, tightened after exact re-evaluation
    let tracker = enumerate(obj, shell, limit, || MaxTracker::new(rel_tol.max(1e-9)))?;
    if tracker.candidates.is_empty() {
        return Err(Error::EmptyShell);
    }
    let mut exact: Vec<(f64, Vec<u8>)> = Vec::new();
    for (_, digits, mirrored) in tracker.candidates {
        let v = obj.value_digits(&digits);
        if mirrored {
            let flipped: Vec<u8> = digits.iter().map(|&d| 1 - d).collect();
            exact.push((obj.value_digits(&flipped), flipped));
        }
        exact.push((v, digits));
    }
    let best = exact.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max);
    let cut = best - rel_tol * best.abs().max(1.0);
    let mut points: Vec<Vec<f64>> = exact
        .into_iter()
        .filter(|e| e.0 >= cut)
        .map(|e| obj.point_vector(&e.1))
        .collect();
    points.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    points.dedup();
    Ok(ArgmaxSet {
        value: best,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_objective(
        n: usize,
        points: &[f64],
        seed: u64,
        even: bool,
    ) -> (PairObjective, Vec<f64>) {
        let mut rng = stream_rng(seed, 0);
        let w: Vec<f64> = (0..n * n)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let x0: Vec<f64> = (0..n)
            .map(|i| if i % 3 == 0 { -1.0 } else { 1.0 })
            .collect();
        let w2 = w.clone();
        let global: GlobalTerm = if even {
            Arc::new(|s: &Sums| 0.3 * s.dot0 * s.dot0 / s.n as f64 - 0.1 * s.sq * s.sq / s.n as f64)
        } else {
            Arc::new(|s: &Sums| 0.3 * s.dot0 - 0.2 * s.sum * s.sum / s.n as f64)
        };
        let obj = PairObjective::new(
            points,
            x0,
            move |i, j, a, b| {
                Ok(w2[i * n + j] * a * b + if even { 0.0 } else { 0.1 * w2[j * n + i] * a })
            },
            |i, a| Ok(0.5 * a * a * (i as f64)),
            global,
            even,
        )
        .unwrap();
        (obj, w)
    }

    fn brute(obj: &PairObjective, beta: f64) -> (f64, f64) {
        let n = obj.n();
        let m = obj.points().len();
        let mut best = f64::NEG_INFINITY;
        let mut lse = LogSumExp::default();
        let mut digits = vec![0u8; n];
        for code in 0..m.pow(n as u32) {
            let mut c = code;
            for d in digits.iter_mut() {
                *d = (c % m) as u8;
                c /= m;
            }
            let v = obj.value_digits(&digits);
            best = best.max(v);
            lse.push(beta * v);
        }
        (best, lse.value())
    }

    #[test]
    fn walk_matches_brute_force() {
        for (n, pts, even) in [
            (9, vec![-1.0, 1.0], true),
            (9, vec![-1.0, 1.0], false),
            (6, vec![-1.0, 0.0, 2.0], false),
            (11, vec![-1.0, 1.0], false),
        ] {
            let (obj, _) = random_objective(n, &pts, n as u64, even);
            let (best, lse) = brute(&obj, 0.7);
            let z = enumerate(&obj, None, DEFAULT_LIMIT, || LogPartition::new(0.7)).unwrap();
            assert!((z.value() - lse).abs() < 1e-9, "{} {}", z.value(), lse);
            assert_eq!(z.count(), obj.configurations());
            let am = argmax_set(&obj, None, 1e-12, DEFAULT_LIMIT).unwrap();
            assert!((am.value - best).abs() < 1e-9);
            assert_eq!(am.points.len(), if even { 2 } else { 1 });
        }
    }

    #[test]
    fn shells_filter_and_can_be_empty() {
        let (obj, _) = random_objective(8, &[-1.0, 1.0], 2, true);
        let empty = Shell {
            s: 0.5,
            m: 0.0,
            v: None,
            eps: 0.1,
        };
        assert!(matches!(
            argmax_set(&obj, Some(&empty), 1e-12, DEFAULT_LIMIT),
            Err(Error::EmptyShell)
        ));
        let sh = Shell {
            s: 1.0,
            m: 0.0,
            v: None,
            eps: 0.2,
        };
        let z = enumerate(&obj, Some(&sh), DEFAULT_LIMIT, || LogPartition::new(1.0)).unwrap();
        // x·x⁰ = 2k − 8 for k agreements, so only k = 4 survives
        let expected: f64 = (0..=8u32)
            .filter(|k| ((2.0 * *k as f64 - 8.0) / 8.0).abs() <= 0.2)
            .map(|k| {
                (1..=8u64).product::<u64>() as f64
                    / ((1..=k as u64).product::<u64>() * (1..=(8 - k) as u64).product::<u64>())
                        as f64
            })
            .sum();
        assert_eq!(z.count(), expected);
    }

    #[test]
    fn size_limit() {
        let (obj, _) = random_objective(12, &[-1.0, 1.0], 1, true);
        assert!(matches!(
            enumerate(&obj, None, 1000, || LogPartition::new(1.0)),
            Err(Error::TooLarge { .. })
        ));
    }
}
