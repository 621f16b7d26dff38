use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the analytic gradient of a scalar function `f` at `x` with
/// central finite differences and returns the largest relative error,
/// using `max(|analytic|, |numeric|, 1e-8)` as the denominator.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_with(|g, xs| f(g, xs[0]), std::slice::from_ref(x), eps)
}

/// Multi-input form of [`grad_check`]; every input is perturbed.
pub fn grad_check_with<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::contract("grad_check needs eps > 0"));
    }
    let eval = |vals: &[Tensor], track: bool| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| g.leaf(t.clone().with_requires_grad(track)))
            .collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(Error::contract(format!(
                "grad_check needs a scalar function, got shape {:?}",
                g.value(out).shape()
            )));
        }
        Ok((g, vars, out))
    };

    let (mut g, vars, out) = eval(inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (ti, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = probe[ti].data()[i];
            probe[ti].data_mut()[i] = orig + eps;
            let (gp, _, op) = eval(&probe, false)?;
            probe[ti].data_mut()[i] = orig - eps;
            let (gm, _, om) = eval(&probe, false)?;
            probe[ti].data_mut()[i] = orig;
            let numeric = (gp.scalar_value(op) - gm.scalar_value(om)) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::AttentionSegment;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn square_sum() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");

        let mut g = Graph::new();
        let v = g.leaf(x.with_requires_grad(true));
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(vec![0.3, -0.7]);
        let err = grad_check(|g, _| Ok(g.constant(Tensor::scalar(4.0))), &x, 1e-4).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        assert!(grad_check(|g, x| Ok(g.relu(x)), &x, 1e-4).is_err());
        assert!(grad_check(|g, x| Ok(g.sum(x)), &x, 0.0).is_err());
    }

    #[test]
    fn matmul_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = [random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)];
        let err = grad_check_with(
            |g, xs| {
                let c = g.matmul(xs[0], xs[1])?;
                Ok(g.sum(c))
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = [
            random(&[2, 4], &mut rng),
            random(&[4], &mut rng),
            random(&[4], &mut rng),
            random(&[2, 4], &mut rng),
        ];
        // Weighted sum so the gradient is not trivially zero.
        let err = grad_check_with(
            |g, xs| {
                let y = g.layer_norm(xs[0], xs[1], xs[2])?;
                let w = g.mul(y, xs[3])?;
                Ok(g.sum(w))
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn elementwise_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = [
            random(&[3, 5], &mut rng),
            random(&[5], &mut rng),
            random(&[3, 5], &mut rng),
            random(&[1], &mut rng),
        ];
        let err = grad_check_with(
            |g, xs| {
                let a = g.add_bias(xs[0], xs[1])?;
                let r = g.relu(a);
                let s = g.softmax(r);
                let m = g.mul(s, xs[2])?;
                let c = g.concat(&[m, xs[0]])?;
                let sc = g.mul_scalar(c, xs[3])?;
                let d = g.dropout(sc, (0..30).map(|i| (i % 3) as f64 * 0.5).collect())?;
                let e = g.scale(d, 0.7);
                Ok(g.sum(e))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn attention_and_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = [
            random(&[5, 3], &mut rng),
            random(&[5, 3], &mut rng),
            random(&[5, 4], &mut rng),
            random(&[4, 6], &mut rng),
        ];
        let segs = [
            AttentionSegment {
                q_start: 0,
                q_len: 3,
                k_start: 0,
                k_len: 3,
            },
            AttentionSegment {
                q_start: 3,
                q_len: 2,
                k_start: 3,
                k_len: 2,
            },
        ];
        for causal in [false, true] {
            let err = grad_check_with(
                |g, xs| {
                    let o = g.attention(xs[0], xs[1], xs[2], &segs, causal)?;
                    let logits = g.matmul(o, xs[3])?;
                    g.cross_entropy(logits, &[1, 5, 0, 2, 3])
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "causal={causal}: {err}");
        }
    }

    #[test]
    fn gather_gumbel_gate_and_kl_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = [random(&[3, 4], &mut rng), random(&[2, 5], &mut rng)];
        let noise = [0.3, -1.2, 0.8, 0.1];
        let err = grad_check_with(
            |g, xs| {
                let row = g.gather(xs[0], &[1])?;
                let q = g.gumbel_sigmoid(row, &noise, 0.7)?;
                let q = g.concat(&[q])?;
                let kl = g.kl_bernoulli(q, 0.25)?;
                let cat = g.concat(&[q, q])?;
                let s = g.sum(cat);
                g.add(kl, s)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
