use crate::neural::{MlpGradients, ParamSet};

use super::TrainError;

/// Elementwise summation scheme for [`allreduce_sum`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Summation {
    /// Left-to-right in worker order.
    #[default]
    Ordered,
    /// Correctly rounded sum, independent of worker order.
    Exact,
}

/// Sums worker gradients elementwise. The result does not depend on thread
/// scheduling: `Ordered` adds in slice order, `Exact` rounds the true sum once.
pub fn allreduce_sum(grads: &[&MlpGradients], summation: Summation) -> Result<MlpGradients, TrainError> {
    let (first, rest) = grads.split_first().ok_or(TrainError::ShapeMismatch)?;
    if rest.iter().any(|g| !first.same_shape(*g)) {
        return Err(TrainError::ShapeMismatch);
    }
    let mut out = (*first).clone();
    match summation {
        Summation::Ordered => {
            for g in rest {
                out.add_assign(g).map_err(|_| TrainError::ShapeMismatch)?;
            }
        }
        Summation::Exact => {
            let sources: Vec<Vec<&[f64]>> = grads.iter().map(|g| g.param_slices()).collect();
            let mut column = Vec::with_capacity(grads.len());
            let mut partials = Vec::new();
            for (si, dst) in out.param_slices_mut().into_iter().enumerate() {
                for (k, d) in dst.iter_mut().enumerate() {
                    column.clear();
                    column.extend(sources.iter().map(|s| s[si][k]));
                    *d = fsum_with(&column, &mut partials);
                }
            }
        }
    }
    Ok(out)
}

/// Correctly rounded sum of finite doubles (Shewchuk's exact partials with
/// round-half-even on the final step).
pub fn fsum(xs: &[f64]) -> f64 {
    fsum_with(xs, &mut Vec::new())
}

fn fsum_with(xs: &[f64], partials: &mut Vec<f64>) -> f64 {
    partials.clear();
    for &x0 in xs {
        let mut x = x0;
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        n -= 1;
        let x = hi;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    // the remaining partials decide ties of the last rounding
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if x - hi == y {
            hi = x;
        }
    }
    hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{Mlp, MlpSpec, OutputActivation};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Exact sum of doubles that are integer multiples of 2^-64, via
    /// 128-bit fixed point; inputs must keep the total below 2^127.
    fn fixed_point_sum(xs: &[f64]) -> f64 {
        let scale = 2f64.powi(64);
        let total: i128 = xs.iter().map(|&x| (x * scale) as i128).sum();
        // i128 → f64 rounds to nearest-even, then the power-of-two rescale is exact
        total as f64 / scale
    }

    fn grads(seed: u64) -> MlpGradients {
        let net = Mlp::init(MlpSpec::new(4, vec![5], 2, OutputActivation::Tanh), seed).unwrap();
        let mut g = MlpGradients::zeros_like(&net);
        for (d, s) in g.param_slices_mut().into_iter().zip(net.param_slices()) {
            d.copy_from_slice(s);
        }
        g
    }

    #[test]
    fn fsum_simple_cases() {
        assert_eq!(fsum(&[]), 0.0);
        assert_eq!(fsum(&[1e100, 1.0, -1e100]), 1.0);
        assert_eq!(fsum(&[0.1; 10]), 1.0);
        assert_eq!(fsum(&[1.0, 1e-16, 1e-16]), 1.0 + 2e-16);
    }

    proptest! {
        #[test]
        fn fsum_matches_fixed_point_oracle(raw in proptest::collection::vec(-(1i64 << 50)..(1i64 << 50), 1..40), shift in 0i32..30) {
            let scale = 2f64.powi(-shift);
            let xs: Vec<f64> = raw.iter().map(|&r| r as f64 * scale).collect();
            prop_assert_eq!(fsum(&xs).to_bits(), fixed_point_sum(&xs).to_bits());
        }
    }

    #[test]
    fn identical_gradients_scale_by_worker_count() {
        let g = grads(1);
        for w in [1usize, 2, 4, 8] {
            let all: Vec<&MlpGradients> = std::iter::repeat_n(&g, w).collect();
            for mode in [Summation::Ordered, Summation::Exact] {
                let s = allreduce_sum(&all, mode).unwrap();
                let mut expected = g.clone();
                expected.scale(w as f64);
                assert!(s.distance(&expected) <= 1e-15 * w as f64, "{mode:?} w={w}");
            }
        }
    }

    #[test]
    fn opposite_gradients_cancel() {
        let g = grads(2);
        let mut neg = g.clone();
        neg.scale(-1.0);
        for mode in [Summation::Ordered, Summation::Exact] {
            assert!(allreduce_sum(&[&g, &neg], mode).unwrap().is_zero());
        }
    }

    #[test]
    fn permutation_invariance() {
        let gs: Vec<MlpGradients> = (0..8).map(|s| grads(10 + s)).collect();
        let refs: Vec<&MlpGradients> = gs.iter().collect();
        let ordered = allreduce_sum(&refs, Summation::Ordered).unwrap();
        let exact = allreduce_sum(&refs, Summation::Exact).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut perm = refs.clone();
            perm.shuffle(&mut rng);
            let p_ordered = allreduce_sum(&perm, Summation::Ordered).unwrap();
            let p_exact = allreduce_sum(&perm, Summation::Exact).unwrap();
            for (a, b) in ordered.param_slices().iter().zip(p_ordered.param_slices()) {
                assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12));
            }
            assert_eq!(exact, p_exact);
            for (a, b) in exact.param_slices().iter().zip(p_exact.param_slices()) {
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = grads(1);
        let net = Mlp::init(MlpSpec::new(4, vec![6], 2, OutputActivation::Tanh), 0).unwrap();
        let b = MlpGradients::zeros_like(&net);
        assert!(matches!(allreduce_sum(&[&a, &b], Summation::Ordered), Err(TrainError::ShapeMismatch)));
        assert!(allreduce_sum(&[], Summation::Ordered).is_err());
    }
}
