//! Central finite-difference checks of analytic gradients, in `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Graph, ParamStore, Params, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates checked per tensor; smaller tensors are checked in full.
    pub coords_per_tensor: usize,
    /// Denominator floor of the relative error, so that entries whose true
    /// gradient is ~0 are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            coords_per_tensor: 32,
            floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(tensor name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
    pub passed: bool,
}

impl FdReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: None,
            checked: 0,
            passed: true,
        }
    }

    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64, opts: &FdOptions) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(opts.floor);
        self.checked += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        if rel > self.max_rel_error || !rel.is_finite() {
            self.max_rel_error = rel;
            self.worst = Some((name.to_string(), idx, analytic, numeric));
        }
        self.passed = self.max_rel_error < opts.tolerance && self.max_rel_error.is_finite();
    }
}

fn coords(n: usize, opts: &FdOptions, salt: u64) -> Vec<usize> {
    if n <= opts.coords_per_tensor {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut idx = sample(&mut rng, n, opts.coords_per_tensor).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Checks the gradient of the scalar `f(x)` with respect to `x`.
pub fn check_input_gradient<F>(f: F, x: &Tensor<f64>, opts: &FdOptions) -> Result<FdReport, AutodiffError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let loss = f(&mut g, xv)?;
    let analytic = g.backward(loss)?.get_or_zero(&g, xv);
    let eval = |t: Tensor<f64>| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let v = g.leaf(t);
        let l = f(&mut g, v)?;
        Ok(g.value(l).item())
    };
    let mut report = FdReport::new();
    for i in coords(x.numel(), opts, 0) {
        let mut plus = x.clone();
        plus.data_mut()[i] += opts.step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= opts.step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * opts.step);
        report.record("x", i, analytic.data()[i], numeric, opts);
    }
    Ok(report)
}

/// Checks the gradient of a scalar loss with respect to every parameter
/// tensor of `store`, sampling coordinates of large tensors.
pub fn check_param_gradients<F>(store: &ParamStore<f64>, f: F, opts: &FdOptions) -> Result<FdReport, AutodiffError>
where
    F: Fn(&mut Graph<f64>, &Params) -> Result<Var, AutodiffError>,
{
    let mut g = Graph::new();
    let params = g.bind(store);
    let loss = f(&mut g, &params)?;
    let analytic = g.backward(loss)?.params(&g, &params);
    let eval = |s: &ParamStore<f64>| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let p = g.bind(s);
        let l = f(&mut g, &p)?;
        Ok(g.value(l).item())
    };
    let mut report = FdReport::new();
    let mut work = store.clone();
    for (salt, (name, tensor)) in store.iter().enumerate() {
        let grad = analytic.get(name).expect("every bound parameter has a gradient");
        for i in coords(tensor.numel(), opts, salt as u64 + 1) {
            let orig = tensor.data()[i];
            work.get_mut(name).expect("same names").data_mut()[i] = orig + opts.step;
            let up = eval(&work)?;
            work.get_mut(name).expect("same names").data_mut()[i] = orig - opts.step;
            let down = eval(&work)?;
            work.get_mut(name).expect("same names").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            report.record(name, i, grad.data()[i], numeric, opts);
        }
    }
    Ok(report)
}
