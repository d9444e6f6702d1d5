//! Operations built from the primitive set. None of these have their own
//! backward rule; gradients flow through the primitives they expand to.

use super::{Real, Result, Tape, Tensor, Var};

impl<T: Real> Tape<T> {
    /// A constant tensor filled with `value`, shaped like `like`.
    pub fn filled_like(&self, like: Var, value: T) -> Result<Var> {
        let shape = self.shape(like);
        let c = self.constant(Tensor::scalar(value)?);
        self.broadcast(c, &shape)
    }

    /// `a · c` for a constant scalar `c`.
    pub fn scale(&self, a: Var, c: T) -> Result<Var> {
        let k = self.filled_like(a, c)?;
        self.mul(a, k)
    }

    /// `a + c` for a constant scalar `c`.
    pub fn add_scalar(&self, a: Var, c: T) -> Result<Var> {
        let k = self.filled_like(a, c)?;
        self.add(a, k)
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Broadcasts `b` to `a`'s shape, then adds.
    pub fn add_broadcast(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a);
        let bb = self.broadcast(b, &shape)?;
        self.add(a, bb)
    }

    /// Broadcasts `b` to `a`'s shape, then multiplies.
    pub fn mul_broadcast(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a);
        let bb = self.broadcast(b, &shape)?;
        self.mul(a, bb)
    }

    /// `σ(x) = ½(1 + tanh(x/2))`.
    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let half = self.scale(a, T::of(0.5))?;
        let t = self.tanh(half)?;
        let shifted = self.add_scalar(t, T::one())?;
        self.scale(shifted, T::of(0.5))
    }

    /// `x · σ(x)`.
    pub fn silu(&self, a: Var) -> Result<Var> {
        let s = self.sigmoid(a)?;
        self.mul(a, s)
    }

    /// `x Wᵀ (+ b)` with `W` stored as `[out, in]`.
    pub fn linear(&self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let wt = self.transpose(weight)?;
        let y = self.matmul(x, wt)?;
        match bias {
            Some(b) => self.add_broadcast(y, b),
            None => Ok(y),
        }
    }

    /// Layer norm followed by a per-feature affine map.
    pub fn layer_norm_affine(&self, x: Var, gain: Var, shift: Var, eps: T) -> Result<Var> {
        let n = self.layer_norm(x, eps)?;
        let scaled = self.mul_broadcast(n, gain)?;
        self.add_broadcast(scaled, shift)
    }

    /// Scaled dot-product attention over `heads` equal slices of the feature
    /// axis. `q` is `[B, Nq, d]`, `k` and `v` are `[B, Nk, d]`; `mask`, if
    /// given, is an additive `[Nq, Nk]` bias applied before the softmax.
    pub fn multi_head_attention(&self, q: Var, k: Var, v: Var, heads: usize, mask: Option<Var>) -> Result<Var> {
        let qs = self.shape(q);
        let ks = self.shape(k);
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || heads == 0 || qs[2] % heads != 0 {
            return Err(super::NumericsError::ShapeMismatch { op: "multi_head_attention", lhs: qs, rhs: ks });
        }
        let (b, nq, nk, d) = (qs[0], qs[1], ks[1], qs[2]);
        let dh = d / heads;
        let inv = T::one() / T::of_usize(dh).sqrt();
        let mask = match mask {
            Some(m) => Some(self.broadcast(m, &[b, nq, nk])?),
            None => None,
        };
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (self.slice(q, 2, lo, hi)?, self.slice(k, 2, lo, hi)?, self.slice(v, 2, lo, hi)?)
            };
            let kt = self.transpose(kh)?;
            let scores = self.matmul(qh, kt)?;
            let mut scores = self.scale(scores, inv)?;
            if let Some(m) = mask {
                scores = self.add(scores, m)?;
            }
            let weights = self.softmax(scores)?;
            outs.push(self.matmul(weights, vh)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            self.concat(&outs, 2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::evaluate_with_gradients;
    use super::*;

    #[test]
    fn sigmoid_matches_closed_form() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[3], &[-2.0, 0.0, 3.0]).unwrap());
        let s = tape.value(tape.sigmoid(x).unwrap());
        for (v, x) in s.data().iter().zip([-2.0f64, 0.0, 3.0]) {
            assert!((v - 1.0 / (1.0 + (-x).exp())).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_uses_out_in_layout() {
        let w = Tensor::<f64>::from_f64(&[1, 2], &[2.0, -1.0]).unwrap();
        let x = Tensor::<f64>::from_f64(&[1, 2], &[3.0, 4.0]).unwrap();
        let (v, g) = evaluate_with_gradients(&[w, x], |tape, p| {
            let y = tape.linear(p[1], p[0], None)?;
            tape.sum(y)
        })
        .unwrap();
        assert_eq!(v, 2.0);
        assert_eq!(g[0].data(), &[3.0, 4.0]);
        assert_eq!(g[1].data(), &[2.0, -1.0]);
    }
}
