//! Central-difference verification of reverse-mode gradients.

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Entries checked per parameter tensor; `None` checks every entry.
    /// When sampling, the entry with the largest analytic gradient is
    /// always included.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: DEFAULT_EPS, max_entries: None, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub numel: usize,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

fn evaluate<F>(f: &F, params: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Rank(format!("objective must be scalar, got {:?}", v.dims())));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(Error::Eval(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

fn select_entries(grad: &Tensor<f64>, limit: Option<usize>, rng: &mut Rng) -> Vec<usize> {
    let n = grad.len();
    match limit {
        Some(k) if k < n => {
            let top = grad
                .data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map_or(0, |(i, _)| i);
            let mut picked = vec![top];
            while picked.len() < k.max(1) {
                let i = rng.below(n);
                if !picked.contains(&i) {
                    picked.push(i);
                }
            }
            picked
        }
        _ => (0..n).collect(),
    }
}

/// Compares `backward()` gradients of `f` against central differences
/// `(f(p + eps e_i) - f(p - eps e_i)) / 2 eps` for every parameter in
/// `params`. The per-entry error is `|g_ad - g_fd| / max(1, |g_fd|)`.
pub fn finite_difference_check<F>(f: F, params: &ParamStore<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&opts.eps) {
        return Err(Error::Config(format!("finite-difference eps {} outside [1e-6, 1e-3]", opts.eps)));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    if !tape.value(loss).data()[0].is_finite() {
        return Err(Error::Eval("objective is not finite".into()));
    }
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut rng = Rng::new(opts.seed);
    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    for (name, value) in params.iter() {
        let zeros;
        let g_ad = match grads.get(name) {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros(value.dims());
                &zeros
            }
        };
        let mut worst = 0.0f64;
        let entries = select_entries(g_ad, opts.max_entries, &mut rng);
        for &i in &entries {
            let orig = value.data()[i];
            probe.get_mut(name)?.data_mut()[i] = orig + opts.eps;
            let plus = evaluate(&f, &probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig - opts.eps;
            let minus = evaluate(&f, &probe)?;
            probe.get_mut(name)?.data_mut()[i] = orig;
            let g_fd = (plus - minus) / (2.0 * opts.eps);
            let err = (g_ad.data()[i] - g_fd).abs() / g_fd.abs().max(1.0);
            worst = worst.max(err);
        }
        report.params.push(ParamCheck {
            name: name.to_string(),
            max_rel_error: worst,
            checked: entries.len(),
            numel: value.len(),
        });
    }
    Ok(report)
}

/// Single-tensor form: `f` receives the tape and the leaf for `p`.
pub fn check_tensor_gradient<F>(f: F, p: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    store.insert("p", p.clone());
    let wrapped = |tape: &mut Tape<f64>, ps: &ParamStore<f64>| {
        let leaf = tape.param("p", ps.get("p")?.clone());
        f(tape, leaf)
    };
    let opts = GradCheckOptions { eps, ..Default::default() };
    Ok(finite_difference_check(wrapped, &store, &opts)?.max_rel_error())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels;

    #[test]
    fn quadratic_matches_to_machine_precision() {
        let p = Rng::new(1).normal_tensor(&[5], 0.0, 1.0);
        let err = check_tensor_gradient(
            |t, p| {
                let sq = t.mul(p, p)?;
                Ok(t.sum(sq))
            },
            &p,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_matches_analytic_gradient() {
        // loss = -log softmax(z)[target]; d loss / dz = softmax(z) - onehot.
        let z = Rng::new(2).normal_tensor::<f64>(&[1, 6], 0.0, 1.5);
        let target = 4;
        let mut tape = Tape::new();
        let zv = tape.param("p", z.clone());
        let sm = tape.softmax(zv).unwrap();
        let onehot = tape.constant(Tensor::from_fn(&[1, 6], |i| if i == target { 1.0 } else { 0.0 }));
        let picked = tape.mul(sm, onehot).unwrap();
        let s = tape.sum(picked);
        let l = tape.ln(s).unwrap();
        let loss = tape.scale(l, -1.0);
        let g = tape.backward(loss).unwrap();
        let probs = kernels::softmax_rows(&z).unwrap();
        for i in 0..6 {
            let want = probs.data()[i] - if i == target { 1.0 } else { 0.0 };
            assert!((g.get("p").unwrap().data()[i] - want).abs() < 1e-12);
        }
        let err = check_tensor_gradient(
            |t, p| {
                let sm = t.softmax(p)?;
                let oh = t.constant(Tensor::from_fn(&[1, 6], |i| if i == target { 1.0 } else { 0.0 }));
                let picked = t.mul(sm, oh)?;
                let s = t.sum(picked);
                let l = t.ln(s)?;
                Ok(t.scale(l, -1.0))
            },
            &z,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn eps_out_of_range_is_rejected() {
        let p = Tensor::full(&[2], 1.0);
        assert!(check_tensor_gradient(|t, p| Ok(t.sum(p)), &p, 1e-1).is_err());
    }

    #[test]
    fn non_finite_objective_propagates() {
        let p = Tensor::full(&[2], -1.0);
        let r = check_tensor_gradient(
            |t, p| {
                let s = t.sum(p);
                t.ln(s)
            },
            &p,
            1e-4,
        );
        assert!(matches!(r, Err(Error::Eval(_))));
    }
}
