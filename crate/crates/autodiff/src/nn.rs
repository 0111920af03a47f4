//! Composite operations assembled from tape primitives.

use crate::error::{AdError, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

impl<T: Real> Graph<T> {
    /// `x [..., in] @ w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(AdError::Shape {
                op: "mse",
                lhs: self.shape(pred).to_vec(),
                rhs: self.shape(target).to_vec(),
            });
        }
        let d = self.sub(pred, target)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Mean cross-entropy of `logits [..., C]` against integer class `targets`,
    /// with label smoothing: the target distribution puts `1 - smoothing` on the
    /// true class and spreads `smoothing` uniformly over all `C` classes.
    pub fn cross_entropy_smoothed(&mut self, logits: Var, targets: &[usize], smoothing: T) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let classes = *shape.last().ok_or(AdError::Invalid {
            op: "cross_entropy",
            msg: "logits must have a class axis".into(),
        })?;
        let rows = self.value(logits).len() / classes.max(1);
        if rows != targets.len() {
            return Err(AdError::Invalid {
                op: "cross_entropy",
                msg: format!("{} targets for logits of shape {shape:?}", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(AdError::Invalid {
                op: "cross_entropy",
                msg: format!("target class {bad} >= {classes}"),
            });
        }
        let off = smoothing / T::c(classes as f64);
        let on = T::one() - smoothing + off;
        let mut dist = vec![off; rows * classes];
        for (r, &t) in targets.iter().enumerate() {
            dist[r * classes + t] = on;
        }
        let dist = self.constant(Tensor::new(&shape, dist)?);
        let logp = self.log_softmax(logits, shape.len() - 1)?;
        let weighted = self.mul(logp, dist)?;
        let total = self.sum(weighted);
        Ok(self.scale(total, -T::one() / T::c(rows as f64)))
    }

    /// `softmax(q k^T / sqrt(d) + mask) v` over the last two axes.
    ///
    /// `q [.., m, d]`, `k [.., n, d]`, `v [.., n, dv]`; `mask` is an additive
    /// tensor broadcastable to `[.., m, n]` (use `-inf`-like values to block).
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
        let d = *self.shape(q).last().ok_or(AdError::Invalid {
            op: "attention",
            msg: "scalar query".into(),
        })?;
        let scores = self.bmm(q, k, true)?;
        let scores = self.scale(scores, T::one() / T::c(d as f64).sqrt());
        let scores = match mask {
            Some(m) => self.add(scores, m)?,
            None => scores,
        };
        let nd = self.shape(scores).len();
        let w = self.softmax(scores, nd - 1)?;
        self.bmm(w, v, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothed_cross_entropy_hand_fixture() {
        // logits [0, ln 2, 0] -> p = [1/4, 1/2, 1/4]; target class 1, smoothing 0.01 over 3 classes.
        let mut g = Graph::<f64>::new();
        let logits = g.param(Tensor::new(&[1, 3], vec![0.0, 2f64.ln(), 0.0]).unwrap());
        let loss = g.cross_entropy_smoothed(logits, &[1], 0.01).unwrap();
        let off = 0.01 / 3.0;
        let on = 0.99 + off;
        let expected = -(on * 0.5f64.ln() + 2.0 * off * 0.25f64.ln());
        assert!((g.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn mse_at_target_has_zero_grad() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let x = g.param(t.clone());
        let c = g.constant(t);
        let loss = g.mse(x, c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_with_diagonal_mask_returns_values() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_fn(&[1, 3, 2], |i| i as f64 * 0.3));
        let k = g.constant(Tensor::from_fn(&[1, 3, 2], |i| (i as f64).sin()));
        let v = g.constant(Tensor::from_fn(&[1, 3, 2], |i| i as f64));
        let mask = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 0.0 } else { f64::NEG_INFINITY });
        let m = g.constant(mask);
        let out = g.scaled_dot_attention(q, k, v, Some(m)).unwrap();
        assert_eq!(g.value(out).data(), g.value(v).data());
    }
}
