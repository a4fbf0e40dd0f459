//! Central finite-difference gradient checks in double precision.

use alloc::vec::Vec;

use super::{RngStream, Tape, Tensor, Var};
use crate::{Error, Result};

/// Gradient-check settings.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub epsilon: f64,
    /// Probe at most this many elements per input, chosen at random.
    pub max_probes: Option<usize>,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            epsilon: 1e-5,
            max_probes: None,
            floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
}

/// Maximum relative error between tape gradients and central differences.
///
/// `f` records a computation on the tape from the given input variables.
/// Non-scalar outputs are reduced with fixed pseudo-random weights first.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let cfg = GradCheck {
        epsilon,
        ..GradCheck::default()
    };
    Ok(cfg.run(f, inputs)?.max_rel_error)
}

impl GradCheck {
    pub fn new(epsilon: f64) -> Self {
        GradCheck {
            epsilon,
            ..Self::default()
        }
    }

    pub fn probes(mut self, n: usize) -> Self {
        self.max_probes = Some(n);
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn run<F>(&self, f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let analytic = self.analytic(&f, inputs)?;
        self.compare(|xs| self.evaluate(&f, xs, false).map(|(v, _, _)| v), &analytic, inputs)
    }

    /// Compares externally supplied gradients against central differences of
    /// `value`.
    pub fn compare<V>(&self, value: V, analytic: &[Tensor<f64>], inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
    where
        V: Fn(&[Tensor<f64>]) -> Result<f64>,
    {
        if analytic.len() != inputs.len() {
            return Err(Error::InvalidArgument("one gradient per input required".into()));
        }
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst_input: 0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            probes: 0,
        };
        let mut rng = RngStream::new(self.seed, 0x6772_6164);
        let mut work: Vec<Tensor<f64>> = inputs.iter().map(|t| t.clone().with_requires_grad(false)).collect();
        for (which, input) in inputs.iter().enumerate() {
            if analytic[which].shape() != input.shape() {
                return Err(Error::shape("grad_check", "gradient shape differs from input"));
            }
            let mut indices: Vec<usize> = (0..input.len()).collect();
            if let Some(n) = self.max_probes.filter(|&n| n < indices.len()) {
                rng.shuffle(&mut indices);
                indices.truncate(n);
                indices.sort_unstable();
            }
            for &i in &indices {
                let x0 = input.data()[i];
                work[which].data_mut()[i] = x0 + self.epsilon;
                let up = value(&work)?;
                work[which].data_mut()[i] = x0 - self.epsilon;
                let down = value(&work)?;
                work[which].data_mut()[i] = x0;
                let numeric = (up - down) / (2.0 * self.epsilon);
                let a = analytic[which].data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
                report.probes += 1;
                if rel > report.max_rel_error || report.probes == 1 {
                    report.max_rel_error = report.max_rel_error.max(rel);
                    report.worst_input = which;
                    report.worst_index = i;
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
        Ok(report)
    }

    fn analytic<F>(&self, f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let (_, tape, vars) = self.evaluate(f, inputs, true)?;
        let (tape, out) = tape.expect("tape retained");
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.get(v).cloned()).collect()
    }

    #[allow(clippy::type_complexity)]
    fn evaluate<F>(
        &self,
        f: &F,
        inputs: &[Tensor<f64>],
        keep: bool,
    ) -> Result<(f64, Option<(Tape<f64>, Var)>, Vec<Var>)>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
            .collect();
        let mut out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            let n = tape.value(out).len();
            let mut rng = RngStream::new(self.seed, 0x7765_6967);
            let weights: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            out = tape.weighted_sum(out, &weights)?;
        }
        let value = tape.value(out).data()[0];
        Ok((value, keep.then_some((tape, out)), vars))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Mode, Padding, PoolKind};

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = RngStream::new(seed, 99);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    /// Values bounded away from zero so relu and max-pool stay smooth.
    fn away_from_kinks(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = RngStream::new(seed, 5);
        let n: usize = shape.iter().product();
        let v = (0..n)
            .map(|i| {
                let m = 0.1 + rng.uniform();
                let s = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
                s * m + i as f64 * 1e-3
            })
            .collect();
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn linear_op_is_exact() {
        let x = random(&[3, 4], 1);
        let w = random(&[4, 2], 2);
        // central differences are exact on affine maps, so a wide step only
        // reduces cancellation error
        let err = grad_check(|t, v| t.dense(v[0], v[1], None), &[x, w], 1e-3).unwrap();
        assert!(err < 1e-9, "{}", err);
    }

    #[test]
    fn relu_away_from_kink() {
        let x = away_from_kinks(&[2, 5], 3);
        let err = grad_check(|t, v| t.relu(v[0]), &[x], 1e-5).unwrap();
        assert!(err < 1e-6, "{}", err);
    }

    #[test]
    fn corrupted_backward_rule_is_caught() {
        let x = random(&[2, 3], 4);
        let cfg = GradCheck::default();
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.softmax(v[0])?;
            let w = [0.3, -1.0, 2.0, 0.5, 0.1, -0.7];
            t.weighted_sum(y, &w)
        };
        let good = cfg.analytic(&f, core::slice::from_ref(&x)).unwrap();
        let bad: Vec<Tensor<f64>> = good
            .iter()
            .map(|g| Tensor::from_vec(g.shape(), g.data().iter().map(|v| v * 1.5 + 0.01).collect()).unwrap())
            .collect();
        let value = |xs: &[Tensor<f64>]| cfg.evaluate(&f, xs, false).map(|r| r.0);
        assert!(
            cfg.compare(value, &good, core::slice::from_ref(&x))
                .unwrap()
                .max_rel_error
                < 1e-6
        );
        assert!(
            cfg.compare(value, &bad, core::slice::from_ref(&x))
                .unwrap()
                .max_rel_error
                > 1e-2
        );
    }

    #[test]
    fn conv_gradients() {
        let x = random(&[1, 8, 8, 3], 5);
        let k = random(&[3, 3, 3, 4], 6);
        let b = random(&[4], 7);
        let err = grad_check(
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Same),
            &[x.clone(), k.clone(), b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{}", err);
        let err = grad_check(
            |t, v| t.conv2d(v[0], v[1], None, 2, Padding::Same),
            &[x.clone(), k.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{}", err);
        let err = grad_check(|t, v| t.conv2d(v[0], v[1], None, 2, Padding::Valid), &[x, k], 1e-5).unwrap();
        assert!(err < 1e-6, "{}", err);
        let p = random(&[2, 4, 4, 3], 8);
        let k1 = random(&[1, 1, 3, 5], 9);
        let err = grad_check(|t, v| t.conv2d(v[0], v[1], None, 1, Padding::Same), &[p, k1], 1e-5).unwrap();
        assert!(err < 1e-6, "{}", err);
    }

    #[test]
    fn batch_norm_gradients() {
        let x = random(&[3, 2, 2, 3], 10);
        let g = random(&[3], 11);
        let b = random(&[3], 12);
        let rm = [0.1, -0.2, 0.3];
        let rv = [1.5, 0.7, 2.0];
        for mode in [Mode::Train, Mode::Eval] {
            let err = grad_check(
                |t, v| Ok(t.batch_norm(v[0], v[1], v[2], (&rm, &rv), mode, 1e-5)?.0),
                &[x.clone(), g.clone(), b.clone()],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "{:?}: {}", mode, err);
        }
    }

    #[test]
    fn pooling_gradients() {
        let x = away_from_kinks(&[2, 4, 4, 2], 13);
        for kind in [PoolKind::Max, PoolKind::Avg] {
            let err = grad_check(|t, v| t.pool(v[0], kind, 2, 2), core::slice::from_ref(&x), 1e-5).unwrap();
            assert!(err < 1e-6, "{:?}: {}", kind, err);
        }
        let err = grad_check(
            |t, v| t.pool(v[0], PoolKind::Avg, 3, 1),
            core::slice::from_ref(&x),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{}", err);
        let err = grad_check(|t, v| t.global_avg_pool(v[0]), &[x], 1e-5).unwrap();
        assert!(err < 1e-9, "{}", err);
    }

    #[test]
    fn avg_pool_spreads_inverse_window_area() {
        let mut tape = Tape::new();
        let x = tape.leaf(random(&[1, 4, 4, 1], 14).with_requires_grad(true));
        let p = tape.pool(x, PoolKind::Avg, 2, 2).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn dense_and_matmul_gradients() {
        let x = random(&[3, 5], 15);
        let w = random(&[5, 4], 16);
        let b = random(&[4], 17);
        let err = grad_check(|t, v| t.dense(v[0], v[1], Some(v[2])), &[x.clone(), w, b], 1e-5).unwrap();
        assert!(err < 1e-7, "{}", err);
        let p = random(&[6, 5], 18);
        let err = grad_check(|t, v| t.matmul_nt(v[0], v[1]), &[x, p], 1e-5).unwrap();
        assert!(err < 1e-7, "{}", err);
    }

    #[test]
    fn smooth_activation_gradients() {
        let x = random(&[3, 4], 19);
        let err = grad_check(|t, v| t.softmax(v[0]), core::slice::from_ref(&x), 1e-5).unwrap();
        assert!(err < 1e-6, "{}", err);
        let err = grad_check(|t, v| t.l2_normalize(v[0]), core::slice::from_ref(&x), 1e-5).unwrap();
        assert!(err < 1e-6, "{}", err);
        let err = grad_check(
            |t, v| {
                let mut rng = RngStream::new(1, 1);
                t.dropout(v[0], 0.4, Mode::Train, &mut rng)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{}", err);
    }

    #[test]
    fn structural_op_gradients() {
        let a = random(&[2, 3, 3, 2], 20);
        let b = random(&[2, 3, 3, 3], 21);
        let c = random(&[2, 3, 3, 2], 22);
        let err = grad_check(|t, v| t.concat(&[v[0], v[1], v[2]]), &[a.clone(), b, c.clone()], 1e-3).unwrap();
        assert!(err < 1e-9, "{}", err);
        let err = grad_check(|t, v| t.add(v[0], v[1]), &[a.clone(), c.clone()], 1e-3).unwrap();
        assert!(err < 1e-9, "{}", err);
        let err = grad_check(|t, v| t.mul(v[0], v[1]), &[a.clone(), c], 1e-3).unwrap();
        assert!(err < 1e-6, "{}", err);
        let err = grad_check(
            |t, v| {
                let f = t.flatten(v[0])?;
                let s = t.affine(f, -2.5, 1.0)?;
                t.mean(s)
            },
            &[a],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{}", err);
    }

    #[test]
    fn cross_entropy_gradient() {
        let x = random(&[4, 5], 23);
        let mut y = Tensor::<f64>::zeros(&[4, 5]);
        for (i, c) in [0usize, 3, 4, 1].iter().enumerate() {
            y.data_mut()[i * 5 + c] = 1.0;
        }
        let err = grad_check(|t, v| t.softmax_cross_entropy(v[0], &y), &[x], 1e-5).unwrap();
        assert!(err < 1e-6, "{}", err);
    }

    #[test]
    fn composite_graph_gradients() {
        let x = random(&[2, 5, 5, 2], 24);
        let k = random(&[3, 3, 2, 3], 25);
        let g = random(&[3], 26);
        let b = random(&[3], 27);
        let w = random(&[75, 4], 28);
        let bias = random(&[4], 29);
        let mut y = Tensor::<f64>::zeros(&[2, 4]);
        y.data_mut()[1] = 1.0;
        y.data_mut()[6] = 1.0;
        let err = grad_check(
            |t, v| {
                let c = t.conv2d(v[0], v[1], None, 1, Padding::Same)?;
                let (n, _) = t.batch_norm(c, v[2], v[3], (&[0.0; 3], &[1.0; 3]), Mode::Train, 1e-5)?;
                let r = t.relu(n)?;
                let f = t.flatten(r)?;
                let o = t.dense(f, v[4], Some(v[5]))?;
                t.softmax_cross_entropy(o, &y)
            },
            &[x, k, g, b, w, bias],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{}", err);
    }
}
