//! Central finite-difference verification of taped gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// `|a - b| / max(1e-12, |a| + |b|)`; NaN maps to +inf.
pub fn relative_error(a: f64, b: f64) -> f64 {
    relative_error_floored(a, b, 1e-12)
}

/// `|a - b| / max(floor, |a| + |b|)`; NaN maps to +inf.
pub fn relative_error_floored(a: f64, b: f64, floor: f64) -> f64 {
    let e = (a - b).abs() / (a.abs() + b.abs()).max(floor);
    if e.is_nan() {
        f64::INFINITY
    } else {
        e
    }
}

/// Max relative error between the taped gradient of a scalar `f` and its
/// central-difference estimate, over every coordinate of `x`.
///
/// Errors raised by `f` and non-finite values both count as +inf.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> f64
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let opts = GradCheckOptions { eps, max_coords: usize::MAX, skip_kinks: false, seed: 0, floor: 1e-12 };
    match gradient_check(|g, v| f(g, v[0]), std::slice::from_ref(x), &opts) {
        Ok(r) => r.max_rel_error,
        Err(_) => f64::INFINITY,
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates checked per input; larger tensors are subsampled.
    pub max_coords: usize,
    /// Skip coordinates whose ±eps probes do not both lie in the base
    /// point's smooth piece of every ReLU6, |x| and bilinear cell.
    pub skip_kinks: bool,
    pub seed: u64,
    /// Lower bound on the relative-error denominator. Gradients that vanish
    /// by symmetry (a key bias under softmax, a shift feeding a batch norm)
    /// would otherwise compare finite-difference noise against zero.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, max_coords: 24, skip_kinks: true, seed: 0, floor: 1e-5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

/// Multi-input variant: every tensor in `inputs` becomes a gradient leaf.
pub fn gradient_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    gradient_check_with(&(), |g, _, v| f(g, v), inputs, opts)
}

/// Like [`gradient_check`], with `env` (typically a parameter store) handed
/// to `f` under the graph's lifetime.
pub fn gradient_check_with<E: ?Sized, F>(env: &E, f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &'g E, &[Var<'g>]) -> Result<Var<'g>>,
{
    let (analytic, base_sig): (Vec<Tensor>, u64) = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&g, env, &vars)?;
        let grads = g.backward(loss)?;
        (vars.iter().map(|&v| grads.wrt(v)).collect(), g.kink_signature())
    };
    let eval = |probe: &[Tensor]| -> (f64, u64) {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = probe.iter().map(|t| g.constant(t.clone())).collect();
        match f(&g, env, &vars) {
            Ok(v) => {
                let val = v.value().data().iter().sum::<f64>();
                (val, g.kink_signature())
            }
            Err(_) => (f64::NAN, 0),
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped_kinks: 0, worst: None };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + opts.eps;
            let (fp, sp) = eval(&probe);
            probe[k].data_mut()[i] = orig - opts.eps;
            let (fm, sm) = eval(&probe);
            probe[k].data_mut()[i] = orig;
            // both probes must share the base point's smooth piece
            if opts.skip_kinks && (sp != base_sig || sm != base_sig) {
                report.skipped_kinks += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * opts.eps);
            let err = relative_error_floored(analytic[k].data()[i], fd, opts.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((k, i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    #[test]
    fn sum_of_squares_within_bound() {
        let x = random(&[4], 1, -1.0, 1.0);
        let err = finite_diff_check(|_, v| Ok(v.square().sum()), &x, 1e-5);
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn nan_counts_as_failure() {
        let x = Tensor::new(&[2], vec![-1.0, 1.0]).unwrap();
        let err = finite_diff_check(|_, v| Ok(v.ln().sum()), &x, 1e-5);
        assert_eq!(err, f64::INFINITY);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // relu6 at the exact kink: taped slope 0, one-sided probe sees 1/2.
        let x = Tensor::new(&[1], vec![6.0]).unwrap();
        let err = finite_diff_check(|_, v| Ok(v.relu6().sum()), &x, 1e-5);
        assert!(err > 0.5);
        let opts = GradCheckOptions { max_coords: 8, ..Default::default() };
        let r = gradient_check(|_, v| Ok(v[0].relu6().sum()), &[x], &opts).unwrap();
        assert_eq!((r.checked, r.skipped_kinks), (0, 1));
    }

    #[test]
    fn subsampling_is_seeded() {
        let x = random(&[100], 3, -1.0, 1.0);
        let opts = GradCheckOptions { max_coords: 5, seed: 9, ..Default::default() };
        let a = gradient_check(|_, v| Ok(v[0].tanh().sum()), std::slice::from_ref(&x), &opts).unwrap();
        let b = gradient_check(|_, v| Ok(v[0].tanh().sum()), &[x], &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checked, 5);
    }
}
