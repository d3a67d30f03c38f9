//! Linear-chain CRF with virtual start and stop states.
//!
//! For `K` labels the transition matrix is `[K + 2, K + 2]`: row `K` holds
//! the start scores and column `K + 1` the stop scores. Entries entering the
//! start state or leaving the stop state are never read.

use thiserror::Error;

use crate::autodiff::kernels::logsumexp;
use crate::autodiff::{AutodiffError, Graph, Real, Tensor, Var};

/// Largest path count the exhaustive oracle will enumerate.
pub const MAX_ORACLE_PATHS: f64 = 1e6;

#[derive(Debug, Error, PartialEq)]
pub enum CrfError {
    #[error("label {label} at position {position} is outside 0..{k}")]
    InvalidLabel { position: usize, label: usize, k: usize },
    #[error("empty sequence")]
    Empty,
    #[error("emissions have {emissions} columns but transitions are {rows}x{cols}")]
    Shape { emissions: usize, rows: usize, cols: usize },
    #[error("{labels} labels and {steps} emission rows")]
    Length { labels: usize, steps: usize },
    #[error("transition matrix has non-finite entries")]
    NonFinite,
    #[error("{paths:e} paths exceed the enumeration limit")]
    TooLarge { paths: f64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Index helper over a `[K + 2, K + 2]` transition table.
#[derive(Debug, Clone, Copy)]
pub struct Transitions<'a, R> {
    data: &'a [R],
    k: usize,
}

impl<'a, R: Real> Transitions<'a, R> {
    pub fn new(table: &'a Tensor<R>) -> Result<Self, CrfError> {
        let s = table.shape();
        if s.len() != 2 || s[0] != s[1] || s[0] < 3 {
            return Err(CrfError::Shape {
                emissions: 0,
                rows: s[0],
                cols: *s.last().unwrap_or(&0),
            });
        }
        if !table.all_finite() {
            return Err(CrfError::NonFinite);
        }
        Ok(Self {
            data: table.data(),
            k: s[0] - 2,
        })
    }

    pub fn labels(&self) -> usize {
        self.k
    }

    pub fn start(&self, y: usize) -> R {
        self.data[self.k * (self.k + 2) + y]
    }

    pub fn stop(&self, y: usize) -> R {
        self.data[y * (self.k + 2) + self.k + 1]
    }

    pub fn get(&self, from: usize, to: usize) -> R {
        self.data[from * (self.k + 2) + to]
    }
}

fn check_emissions<R: Real>(emissions: &Tensor<R>, tr: &Transitions<R>) -> Result<usize, CrfError> {
    let t = emissions.rows();
    if emissions.cols() != tr.k || emissions.shape().len() != 2 {
        return Err(CrfError::Shape {
            emissions: emissions.cols(),
            rows: tr.k + 2,
            cols: tr.k + 2,
        });
    }
    if t == 0 {
        return Err(CrfError::Empty);
    }
    Ok(t)
}

fn check_labels(labels: &[usize], t: usize, k: usize) -> Result<(), CrfError> {
    if labels.len() != t {
        return Err(CrfError::Length {
            labels: labels.len(),
            steps: t,
        });
    }
    if let Some((position, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= k) {
        return Err(CrfError::InvalidLabel { position, label, k });
    }
    Ok(())
}

/// Unnormalized score of one label path. Terms are added left to right in
/// the same order as [`viterbi`], so equal paths give bit-equal scores.
pub fn path_score<R: Real>(emissions: &Tensor<R>, labels: &[usize], transitions: &Tensor<R>) -> Result<R, CrfError> {
    let tr = Transitions::new(transitions)?;
    let t = check_emissions(emissions, &tr)?;
    check_labels(labels, t, tr.k)?;
    let e = |i: usize, y: usize| emissions.data()[i * tr.k + y];
    let mut s = tr.start(labels[0]) + e(0, labels[0]);
    for i in 1..t {
        s = s + tr.get(labels[i - 1], labels[i]) + e(i, labels[i]);
    }
    Ok(s + tr.stop(labels[t - 1]))
}

/// Forward log-scores `alpha[t * K + y]`.
fn forward<R: Real>(emissions: &[R], tr: &Transitions<R>, t: usize) -> Vec<R> {
    let k = tr.k;
    let mut alpha = vec![R::zero(); t * k];
    for y in 0..k {
        alpha[y] = tr.start(y) + emissions[y];
    }
    let mut buf = vec![R::zero(); k];
    for i in 1..t {
        for y in 0..k {
            for (p, b) in buf.iter_mut().enumerate() {
                *b = alpha[(i - 1) * k + p] + tr.get(p, y);
            }
            alpha[i * k + y] = logsumexp(&buf) + emissions[i * k + y];
        }
    }
    alpha
}

/// Backward log-scores `beta[t * K + y]`, including the stop transition.
fn backward<R: Real>(emissions: &[R], tr: &Transitions<R>, t: usize) -> Vec<R> {
    let k = tr.k;
    let mut beta = vec![R::zero(); t * k];
    for y in 0..k {
        beta[(t - 1) * k + y] = tr.stop(y);
    }
    let mut buf = vec![R::zero(); k];
    for i in (0..t - 1).rev() {
        for y in 0..k {
            for (n, b) in buf.iter_mut().enumerate() {
                *b = tr.get(y, n) + emissions[(i + 1) * k + n] + beta[(i + 1) * k + n];
            }
            beta[i * k + y] = logsumexp(&buf);
        }
    }
    beta
}

fn finish<R: Real>(alpha: &[R], tr: &Transitions<R>, t: usize) -> R {
    let k = tr.k;
    let last: Vec<R> = (0..k).map(|y| alpha[(t - 1) * k + y] + tr.stop(y)).collect();
    logsumexp(&last)
}

/// Log-partition function by the forward algorithm.
pub fn log_partition<R: Real>(emissions: &Tensor<R>, transitions: &Tensor<R>) -> Result<R, CrfError> {
    let tr = Transitions::new(transitions)?;
    let t = check_emissions(emissions, &tr)?;
    Ok(finish(&forward(emissions.data(), &tr, t), &tr, t))
}

/// `log p(labels | emissions)`.
pub fn log_likelihood<R: Real>(emissions: &Tensor<R>, labels: &[usize], transitions: &Tensor<R>) -> Result<R, CrfError> {
    Ok(path_score(emissions, labels, transitions)? - log_partition(emissions, transitions)?)
}

/// Posterior expectations under the CRF.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals<R> {
    pub log_partition: R,
    /// `[T, K]` label marginals.
    pub unary: Tensor<R>,
    /// `[K + 2, K + 2]` expected transition counts, start and stop included.
    pub transitions: Tensor<R>,
}

/// Forward-backward marginals.
pub fn marginals<R: Real>(emissions: &Tensor<R>, transitions: &Tensor<R>) -> Result<Marginals<R>, CrfError> {
    let tr = Transitions::new(transitions)?;
    let t = check_emissions(emissions, &tr)?;
    let k = tr.k;
    let e = emissions.data();
    let alpha = forward(e, &tr, t);
    let beta = backward(e, &tr, t);
    let log_z = finish(&alpha, &tr, t);
    let unary = Tensor::from_fn(&[t, k], |i| (alpha[i] + beta[i] - log_z).exp());
    let mut pair = Tensor::zeros(&[k + 2, k + 2]);
    let w = k + 2;
    let pd = pair.data_mut();
    for y in 0..k {
        pd[k * w + y] = unary.data()[y];
        pd[y * w + k + 1] = unary.data()[(t - 1) * k + y];
    }
    for i in 1..t {
        for p in 0..k {
            for y in 0..k {
                let lp = alpha[(i - 1) * k + p] + tr.get(p, y) + e[i * k + y] + beta[i * k + y] - log_z;
                pd[p * w + y] += lp.exp();
            }
        }
    }
    Ok(Marginals {
        log_partition: log_z,
        unary,
        transitions: pair,
    })
}

/// Best label path and its score. Ties go to the lower label id, scanning
/// from the last position backwards.
pub fn viterbi<R: Real>(emissions: &Tensor<R>, transitions: &Tensor<R>) -> Result<(Vec<usize>, R), CrfError> {
    let tr = Transitions::new(transitions)?;
    let t = check_emissions(emissions, &tr)?;
    let k = tr.k;
    let e = emissions.data();
    let mut delta: Vec<R> = (0..k).map(|y| tr.start(y) + e[y]).collect();
    let mut back = vec![0usize; t * k];
    for i in 1..t {
        let mut next = vec![R::zero(); k];
        for y in 0..k {
            let mut best = 0;
            let mut best_score = delta[0] + tr.get(0, y);
            for p in 1..k {
                let s = delta[p] + tr.get(p, y);
                if s > best_score {
                    best = p;
                    best_score = s;
                }
            }
            back[i * k + y] = best;
            next[y] = best_score + e[i * k + y];
        }
        delta = next;
    }
    let mut last = 0;
    let mut score = delta[0] + tr.stop(0);
    for y in 1..k {
        let s = delta[y] + tr.stop(y);
        if s > score {
            last = y;
            score = s;
        }
    }
    let mut path = vec![0; t];
    path[t - 1] = last;
    for i in (1..t).rev() {
        path[i - 1] = back[i * k + path[i]];
    }
    Ok((path, score))
}

/// Exhaustive results over all `K^T` paths.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult<R> {
    pub log_partition: R,
    pub best_path: Vec<usize>,
    pub best_score: R,
}

/// Enumerates every path. Among equal best scores the path that is smallest
/// when compared from the last position backwards wins, matching
/// [`viterbi`].
pub fn brute_force_oracle<R: Real>(emissions: &Tensor<R>, transitions: &Tensor<R>) -> Result<OracleResult<R>, CrfError> {
    let tr = Transitions::new(transitions)?;
    let t = check_emissions(emissions, &tr)?;
    let k = tr.k;
    let paths = (k as f64).powi(t as i32);
    if paths > MAX_ORACLE_PATHS {
        return Err(CrfError::TooLarge { paths });
    }
    let mut labels = vec![0usize; t];
    let mut scores = Vec::with_capacity(paths as usize);
    let mut best: Option<(Vec<usize>, R)> = None;
    loop {
        let s = path_score(emissions, &labels, transitions)?;
        scores.push(s);
        let better = match &best {
            None => true,
            Some((bp, bs)) => s > *bs || (s == *bs && labels.iter().rev().lt(bp.iter().rev())),
        };
        if better {
            best = Some((labels.clone(), s));
        }
        // Odometer with position 0 varying fastest.
        let mut i = 0;
        while i < t {
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
        if i == t {
            break;
        }
    }
    let (best_path, best_score) = best.expect("at least one path");
    Ok(OracleResult {
        log_partition: logsumexp(&scores),
        best_path,
        best_score,
    })
}

/// Negative log-likelihood as a graph node, differentiable with respect to
/// both the `[T, K]` emissions and the transition table.
pub fn neg_log_likelihood<R: Real>(
    g: &mut Graph<R>,
    emissions: Var,
    transitions: Var,
    labels: &[usize],
) -> Result<Var, CrfError> {
    let em = g.value(emissions).clone();
    let tt = g.value(transitions).clone();
    let score = path_score(&em, labels, &tt)?;
    let m = marginals(&em, &tt)?;
    let k = m.unary.cols();
    let w = k + 2;
    let mut g_em = m.unary;
    for (i, &y) in labels.iter().enumerate() {
        g_em.data_mut()[i * k + y] -= R::one();
    }
    let mut g_tr = m.transitions;
    {
        let d = g_tr.data_mut();
        d[k * w + labels[0]] -= R::one();
        d[labels[labels.len() - 1] * w + k + 1] -= R::one();
        for pair in labels.windows(2) {
            d[pair[0] * w + pair[1]] -= R::one();
        }
    }
    Ok(g.custom_scalar(&[emissions, transitions], m.log_partition - score, vec![g_em, g_tr])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_param_gradients, FdOptions, ParamStore};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(rng: &mut ChaCha8Rng, t: usize, k: usize) -> (Tensor<f64>, Tensor<f64>) {
        let em = Tensor::from_fn(&[t, k], |_| rng.random_range(-2.0..2.0));
        let tr = Tensor::from_fn(&[k + 2, k + 2], |_| rng.random_range(-2.0..2.0));
        (em, tr)
    }

    fn all_paths(t: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..t {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..k).map(move |y| {
                        let mut q = p.clone();
                        q.push(y);
                        q
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn single_step_closed_form() {
        let em = Tensor::matrix(1, 3, &[0.5, -1.0, 2.0]).unwrap();
        let tr = Tensor::<f64>::zeros(&[5, 5]);
        let ll = log_likelihood(&em, &[1], &tr).unwrap();
        let expected = -1.0 - logsumexp(em.data());
        assert!((ll - expected).abs() < 1e-12);
    }

    #[test]
    fn hand_enumerated_fixtures() {
        let zeros = Tensor::<f64>::zeros(&[4, 4]);
        let r = brute_force_oracle(&Tensor::zeros(&[2, 2]), &zeros).unwrap();
        assert!((r.log_partition - 4f64.ln()).abs() < 1e-15);
        let r = brute_force_oracle(&Tensor::matrix(1, 2, &[1.0, 0.0]).unwrap(), &zeros).unwrap();
        assert!((r.log_partition - (1f64.exp() + 1.0).ln()).abs() < 1e-15);
        assert_eq!(r.best_path, vec![0]);
        // T=2, K=2 with a table small enough to list by hand:
        // paths 00: 1+0+0.5=1.5, 01: 1+2+0=3, 10: 0+0+0.5=0.5, 11: 0+0+0=0.
        let em = Tensor::matrix(2, 2, &[1.0, 0.0, 0.5, 0.0]).unwrap();
        let mut tr = Tensor::<f64>::zeros(&[4, 4]);
        tr.data_mut()[1] = 2.0;
        let r = brute_force_oracle(&em, &tr).unwrap();
        let z = [1.5f64, 3.0, 0.5, 0.0].iter().map(|s| s.exp()).sum::<f64>().ln();
        assert!((r.log_partition - z).abs() < 1e-14);
        assert_eq!(r.best_path, vec![0, 1]);
        assert_eq!(r.best_score, 3.0);
    }

    #[test]
    fn oracle_refuses_large_instances() {
        let em = Tensor::<f64>::zeros(&[11, 4]);
        let tr = Tensor::zeros(&[6, 6]);
        assert!(matches!(brute_force_oracle(&em, &tr), Err(CrfError::TooLarge { .. })));
    }

    #[test]
    fn matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let t = rng.random_range(1..=5);
            let k = rng.random_range(1..=4);
            let (em, tr) = random_instance(&mut rng, t, k);
            let oracle = brute_force_oracle(&em, &tr).unwrap();
            assert!((log_partition(&em, &tr).unwrap() - oracle.log_partition).abs() < 1e-8);
            let (path, score) = viterbi(&em, &tr).unwrap();
            assert_eq!(path, oracle.best_path);
            assert_eq!(score, oracle.best_score);
            let total: f64 = all_paths(t, k)
                .iter()
                .map(|p| log_likelihood(&em, p, &tr).unwrap().exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_scores_decode_to_label_zero() {
        let em = Tensor::<f64>::full(&[4, 3], 0.7);
        let tr = Tensor::full(&[5, 5], -0.2);
        assert_eq!(viterbi(&em, &tr).unwrap().0, vec![0; 4]);
        assert_eq!(brute_force_oracle(&em, &tr).unwrap().best_path, vec![0; 4]);
    }

    #[test]
    fn viterbi_ties_prefer_lower_ids_from_the_end() {
        // Two best paths, [1, 0] and [0, 1]; the later position decides.
        let em = Tensor::matrix(2, 2, &[0.0, 0.0, 0.0, 0.0]).unwrap();
        let mut tr = Tensor::<f64>::zeros(&[4, 4]);
        tr.data_mut()[1] = 1.0; // 0 -> 1
        tr.data_mut()[4] = 1.0; // 1 -> 0
        assert_eq!(viterbi(&em, &tr).unwrap().0, vec![1, 0]);
        assert_eq!(brute_force_oracle(&em, &tr).unwrap().best_path, vec![1, 0]);
    }

    #[test]
    fn invalid_labels_are_rejected() {
        let em = Tensor::<f64>::zeros(&[2, 3]);
        let tr = Tensor::zeros(&[5, 5]);
        assert_eq!(
            log_likelihood(&em, &[0, 3], &tr).unwrap_err(),
            CrfError::InvalidLabel { position: 1, label: 3, k: 3 }
        );
        assert!(matches!(log_likelihood(&em, &[0], &tr), Err(CrfError::Length { .. })));
    }

    #[test]
    fn marginals_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (em, tr) = random_instance(&mut rng, 5, 3);
        let m = marginals(&em, &tr).unwrap();
        for r in 0..5 {
            assert!((m.unary.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // Expected transitions: 1 start, 1 stop, T-1 internal.
        let total: f64 = m.transitions.data().iter().sum();
        assert!((total - 6.0).abs() < 1e-12);
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = rng.random_range(1..=6);
            let k = rng.random_range(2..=4);
            let (em, tr) = random_instance(&mut rng, t, k);
            let labels: Vec<usize> = (0..t).map(|_| rng.random_range(0..k)).collect();
            let mut store = ParamStore::new();
            store.insert("em", em);
            store.insert("tr", tr);
            let report = check_param_gradients(
                &store,
                |g, p| neg_log_likelihood(g, p["em"], p["tr"], &labels).map_err(|e| match e {
                    CrfError::Autodiff(a) => a,
                    other => panic!("{other}"),
                }),
                &FdOptions::default(),
            )
            .unwrap();
            assert!(report.passed, "{report:?}");
        }
    }

    proptest! {
        #[test]
        fn log_partition_bounds_every_path(seed in any::<u64>(), t in 1usize..5, k in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (em, tr) = random_instance(&mut rng, t, k);
            let z = log_partition(&em, &tr).unwrap();
            for p in all_paths(t, k) {
                prop_assert!(path_score(&em, &p, &tr).unwrap() <= z + 1e-12);
            }
        }

        #[test]
        fn emission_shift_is_invisible(seed in any::<u64>(), t in 1usize..6, k in 1usize..5, c in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (em, tr) = random_instance(&mut rng, t, k);
            let shifted = Tensor::from_fn(&[t, k], |i| em.data()[i] + c);
            let labels: Vec<usize> = (0..t).map(|i| i % k).collect();
            let a = log_likelihood(&em, &labels, &tr).unwrap();
            let b = log_likelihood(&shifted, &labels, &tr).unwrap();
            prop_assert!((a - b).abs() < 1e-6);
            let z = log_partition(&em, &tr).unwrap();
            let zs = log_partition(&shifted, &tr).unwrap();
            prop_assert!((zs - z - t as f64 * c).abs() < 1e-9);
            prop_assert_eq!(viterbi(&em, &tr).unwrap().0, viterbi(&shifted, &tr).unwrap().0);
        }
    }
}
