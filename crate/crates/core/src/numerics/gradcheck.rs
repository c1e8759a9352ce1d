//! Finite-difference verification of analytic gradients.
//!
//! The central-difference loop here is the independent oracle for the whole
//! reverse pass: it only ever calls the forward path. `grad_check` perturbs
//! one coordinate at a time, so it is O(2 * numel) forward evaluations and is
//! meant for tiny models and op-level tests, not training.

use crate::elem::{Dtype, Elem};
use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, TensorId};
use crate::numerics::tensor::Tensor;

/// Step size giving near-optimal central-difference accuracy per precision:
/// small enough to control truncation, large enough to dominate rounding.
pub fn default_eps(dtype: Dtype) -> f64 {
    match dtype {
        Dtype::F32 => 1e-2,
        Dtype::F64 => 1e-5,
    }
}

/// Max over coordinates of `|analytic - central difference| / max(1, |analytic|)`
/// for a scalar-valued function built on a [`Graph`].
///
/// `f` receives a fresh graph and the id of the input under test; everything
/// else it uses must be captured as constants.
pub fn grad_check<E, F>(mut f: F, x: &Tensor<E>, eps: f64) -> Result<f64>
where
    E: Elem,
    F: FnMut(&mut Graph<E>, TensorId) -> Result<TensorId>,
{
    if eps <= 0.0 {
        return Err(Error::config("grad_check eps must be positive".to_string()));
    }
    x.check_finite("grad_check input")?;

    // Analytic side.
    let mut g = Graph::new();
    let xid = g.param(x.clone());
    let loss = f(&mut g, xid)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::state(format!(
            "grad_check target must be scalar, got {:?}",
            g.shape(loss)
        )));
    }
    g.backward(loss)?;
    let analytic = g.grad(xid).expect("param grad populated by backward");
    analytic.check_finite("grad_check analytic gradient")?;

    // Numeric side: central differences, one coordinate at a time.
    let mut max_err = 0.0f64;
    for i in 0..x.numel() {
        let plus = eval_perturbed(&mut f, x, i, eps)?;
        let minus = eval_perturbed(&mut f, x, i, -eps)?;
        let numeric = (plus - minus) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(Error::numeric("grad_check", format!("non-finite difference at coordinate {i}")));
        }
        let a = analytic.data()[i].to_f64();
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

fn eval_perturbed<E, F>(f: &mut F, x: &Tensor<E>, coord: usize, delta: f64) -> Result<f64>
where
    E: Elem,
    F: FnMut(&mut Graph<E>, TensorId) -> Result<TensorId>,
{
    let mut data = x.data().to_vec();
    data[coord] = E::from_f64(data[coord].to_f64() + delta);
    let xp = Tensor::new(x.shape().to_vec(), data)?;
    let mut g = Graph::new();
    let xid = g.leaf(xp);
    let loss = f(&mut g, xid)?;
    Ok(g.value(loss).item()?.to_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn rand_t<E: Elem>(shape: &[usize], name: &str) -> Tensor<E> {
        let mut rng = stream(11, name);
        Tensor::from_fn(shape.to_vec(), |_| {
            E::from_f64(crate::rng::next_normal(&mut rng) * 0.5)
        })
    }

    #[test]
    fn sum_of_squares_is_nearly_exact() {
        let x = rand_t::<f64>(&[5], "sq");
        let err = grad_check(
            |g, xid| {
                let sq = g.mul(xid, xid)?;
                g.mean_all(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn normalize_then_sum() {
        let x = rand_t::<f64>(&[4, 6], "ln");
        let err = grad_check(
            |g, xid| {
                let y = g.normalize(xid, 1e-6)?;
                let r = g.leaf(rand_t::<f64>(&[4, 6], "ln-proj"));
                let p = g.mul(y, r)?;
                g.mean_all(p)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    // Sweep every forward op in both precisions on random shapes.
    // Tolerances: 1e-4 standard, 1e-6 wide.

    fn tol<E: Elem>() -> f64 {
        match E::DTYPE {
            Dtype::F32 => 1e-4,
            Dtype::F64 => 1e-6,
        }
    }

    fn sweep<E: Elem>() {
        let eps = default_eps(E::DTYPE);
        let t = tol::<E>();
        let check = |name: &str,
                     x: &Tensor<E>,
                     f: &mut dyn FnMut(&mut Graph<E>, TensorId) -> crate::error::Result<TensorId>| {
            let err = grad_check(|g, id| f(g, id), x, eps).unwrap();
            assert!(err < t, "{name} [{}]: err = {err:.3e} >= {t:.0e}", E::DTYPE.name());
        };

        // matmul, both operands
        let a = rand_t::<E>(&[5, 7], "mm-a");
        let b = rand_t::<E>(&[7, 4], "mm-b");
        check("matmul-lhs", &a, &mut |g, id| {
            let bb = g.leaf(b.clone());
            let p = g.matmul(id, bb)?;
            g.mean_all(p)
        });
        check("matmul-rhs", &b, &mut |g, id| {
            let aa = g.leaf(a.clone());
            let p = g.matmul(aa, id)?;
            g.mean_all(p)
        });

        // bmm
        let ba = rand_t::<E>(&[3, 4, 5], "bmm-a");
        check("bmm-lhs", &ba, &mut |g, id| {
            let bb = g.leaf(rand_t::<E>(&[3, 5, 2], "bmm-b"));
            let p = g.bmm(id, bb)?;
            g.mean_all(p)
        });

        // add / sub / mul with and without trailing broadcast
        let x2 = rand_t::<E>(&[4, 6], "ew-x");
        let y2 = rand_t::<E>(&[4, 6], "ew-y");
        let bias = rand_t::<E>(&[6], "ew-b");
        check("add", &x2, &mut |g, id| {
            let y = g.leaf(y2.clone());
            let s = g.add(id, y)?;
            g.mean_all(s)
        });
        check("add-bcast-rhs", &bias, &mut |g, id| {
            let x = g.leaf(x2.clone());
            let s = g.add(x, id)?;
            g.mean_all(s)
        });
        check("sub", &x2, &mut |g, id| {
            let y = g.leaf(y2.clone());
            let s = g.sub(id, y)?;
            let sq = g.mul(s, s)?;
            g.mean_all(sq)
        });
        check("mul-bcast-rhs", &bias, &mut |g, id| {
            let x = g.leaf(x2.clone());
            let s = g.mul(x, id)?;
            g.mean_all(s)
        });

        // scale / gelu
        check("scale", &x2, &mut |g, id| {
            let s = g.scale(id, E::from_f64(-1.7))?;
            g.mean_all(s)
        });
        check("gelu", &x2, &mut |g, id| {
            let s = g.gelu(id)?;
            g.mean_all(s)
        });

        // softmax and normalize, projected to break symmetry
        let proj = rand_t::<E>(&[4, 6], "proj");
        check("softmax", &x2, &mut |g, id| {
            let s = g.softmax(id)?;
            let r = g.leaf(proj.clone());
            let p = g.mul(s, r)?;
            g.mean_all(p)
        });
        check("normalize", &x2, &mut |g, id| {
            let s = g.normalize(id, E::from_f64(1e-6))?;
            let r = g.leaf(proj.clone());
            let p = g.mul(s, r)?;
            g.mean_all(p)
        });

        // reductions
        check("mean-axis0", &x2, &mut |g, id| {
            let m = g.mean(id, 0)?;
            let r = g.leaf(rand_t::<E>(&[6], "mean-proj"));
            let p = g.mul(m, r)?;
            g.mean_all(p)
        });
        check("variance-axis1", &x2, &mut |g, id| {
            let v = g.variance(id, 1)?;
            let r = g.leaf(rand_t::<E>(&[4], "var-proj"));
            let p = g.mul(v, r)?;
            g.mean_all(p)
        });

        // gather (with a repeated index) and scatter
        check("gather", &x2, &mut |g, id| {
            let s = g.gather(id, &[3, 0, 3])?;
            let r = g.leaf(rand_t::<E>(&[3, 6], "gather-proj"));
            let p = g.mul(s, r)?;
            g.mean_all(p)
        });
        let src = rand_t::<E>(&[2, 6], "scatter-src");
        check("scatter-rows-base", &x2, &mut |g, id| {
            let s = g.leaf(src.clone());
            let o = g.scatter_rows(id, s, &[1, 3])?;
            let r = g.leaf(proj.clone());
            let p = g.mul(o, r)?;
            g.mean_all(p)
        });
        check("scatter-rows-src", &src, &mut |g, id| {
            let x = g.leaf(x2.clone());
            let o = g.scatter_rows(x, id, &[1, 3])?;
            let r = g.leaf(proj.clone());
            let p = g.mul(o, r)?;
            g.mean_all(p)
        });

        // conv1d, both operands
        let cx = rand_t::<E>(&[2, 16], "conv-x");
        let cw = rand_t::<E>(&[3, 2, 4], "conv-w");
        check("conv1d-x", &cx, &mut |g, id| {
            let w = g.leaf(cw.clone());
            let o = g.conv1d(id, w, 3)?;
            let r = g.leaf(rand_t::<E>(&[3, 5], "conv-proj"));
            let p = g.mul(o, r)?;
            g.mean_all(p)
        });
        check("conv1d-w", &cw, &mut |g, id| {
            let x = g.leaf(cx.clone());
            let o = g.conv1d(x, id, 3)?;
            let r = g.leaf(rand_t::<E>(&[3, 5], "conv-proj"));
            let p = g.mul(o, r)?;
            g.mean_all(p)
        });

        // reshape + permute + concat + repeat_rows
        check("reshape-permute", &x2, &mut |g, id| {
            let rs = g.reshape(id, vec![2, 2, 6])?;
            let pm = g.permute(rs, &[2, 0, 1])?;
            let r = g.leaf(rand_t::<E>(&[6, 2, 2], "perm-proj"));
            let p = g.mul(pm, r)?;
            g.mean_all(p)
        });
        check("concat", &x2, &mut |g, id| {
            let other = g.leaf(rand_t::<E>(&[2, 6], "cat-b"));
            let c = g.concat(&[id, other], 0)?;
            let r = g.leaf(rand_t::<E>(&[6, 6], "cat-proj"));
            let p = g.mul(c, r)?;
            g.mean_all(p)
        });
        let vrow = rand_t::<E>(&[6], "rep-v");
        check("repeat-rows", &vrow, &mut |g, id| {
            let rr = g.repeat_rows(id, 5)?;
            let r = g.leaf(rand_t::<E>(&[5, 6], "rep-proj"));
            let p = g.mul(rr, r)?;
            g.mean_all(p)
        });

        // smooth_l1 clear of the junction on both branches
        let quad = x2.map(|v| v * E::from_f64(0.4)); // |r| < 0.8 < beta
        check("smooth-l1-quadratic", &quad, &mut |g, id| {
            let h = g.smooth_l1(id, E::one())?;
            g.mean_all(h)
        });
        let lin = x2.map(|v| v * E::from_f64(0.3) + E::from_f64(2.0)); // r > 1.1 > beta
        check("smooth-l1-linear", &lin, &mut |g, id| {
            let h = g.smooth_l1(id, E::one())?;
            g.mean_all(h)
        });
    }

    #[test]
    fn every_op_passes_in_wide_precision() {
        sweep::<f64>();
    }

    #[test]
    fn every_op_passes_in_standard_precision() {
        sweep::<f32>();
    }

    #[test]
    fn forward_and_grads_are_deterministic() {
        let run = || {
            let x = rand_t::<f64>(&[3, 4], "det");
            let mut g = Graph::new();
            let id = g.param(x);
            let n = g.normalize(id, 1e-6).unwrap();
            let gl = g.gelu(n).unwrap();
            let loss = g.mean_all(gl).unwrap();
            g.backward(loss).unwrap();
            (
                g.value(loss).item().unwrap().to_bits(),
                g.grad(id).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
