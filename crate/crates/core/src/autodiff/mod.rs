//! Reverse-mode differentiation for the encoder and reparameterization path,
//! plus a forward-mode dual number used for ODE parameter sensitivities.

mod dual;
mod tape;

pub use dual::{Dual, Scalar};
pub use tape::{backward, eval_graph, sigmoid, Gradients, Tape, Tensor, Var};

use crate::error::Result;

/// Maximum relative error between the reverse-mode gradient of `f` at `x`
/// and central differences with step `h`:
/// `max_k |(f(x+h e_k) − f(x−h e_k))/(2h) − g_k| / (|g_k| + 1e-8)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.input("x", point.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).data[0])
    };
    let mut tape = Tape::new();
    let v = tape.input("x", x.clone());
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let g = grads.get("x").expect("input registered").clone();
    let mut worst = 0.0f64;
    for k in 0..x.data.len() {
        let mut plus = x.clone();
        plus.data[k] += h;
        let mut minus = x.clone();
        minus.data[k] -= h;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let err = (fd - g.data[k]).abs() / (g.data[k].abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::RandomStream;
    use rand::Rng;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::row(vec![0.3, -1.2, 2.5]);
        let err = finite_difference_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                let lin = t.affine(x, 3.0, 1.0);
                let s = t.add(sq, lin)?;
                Ok(t.sum(s))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn exp_within_taylor_bound() {
        let err = finite_difference_check(|t, x| Ok(t.exp(x)), &Tensor::scalar(1.0), 1e-4).unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    fn random_tensor(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect()).unwrap()
    }

    #[test]
    fn two_layer_tanh_network() {
        let mut rng = RandomStream::new(11).rng();
        for _ in 0..20 {
            let w1 = random_tensor(&mut rng, 3, 8, 1.0);
            let b1 = random_tensor(&mut rng, 1, 8, 0.5);
            let w2 = random_tensor(&mut rng, 8, 1, 1.0);
            let x = random_tensor(&mut rng, 1, 3, 1.0);
            let err = finite_difference_check(
                |t, x| {
                    let w1 = t.constant(w1.clone());
                    let b1 = t.constant(b1.clone());
                    let w2 = t.constant(w2.clone());
                    let h = t.matmul(x, w1)?;
                    let h = t.add_row(h, b1)?;
                    let h = t.tanh(h);
                    let o = t.matmul(h, w2)?;
                    Ok(t.sum(o))
                },
                &x,
                1e-4,
            )
            .unwrap();
            assert!(err <= 1e-5, "{err}");
        }
    }
}
