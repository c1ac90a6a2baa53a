//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as it executes the forward pass, keeping
//! the produced value and a backward closure. [`Tape::backward`] then walks the
//! record in reverse, streaming gradients to each operation's parents. Ids are
//! assigned in execution order, so parents always precede children and a single
//! reverse sweep visits every node after all of its consumers.
//!
//! Values are owned by the tape; [`Var`] is a copyable handle. The tape is
//! meant to live for one training step and be dropped. Operations on constants
//! (registered with [`Tape::constant`]) skip gradient work entirely, so running
//! a forward pass over constant inputs costs only the value bookkeeping.

use std::cell::{Ref, RefCell};

use rand::Rng;

use super::ops::{self, ConvSpec};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn<T> = Box<dyn Fn(&[Tensor<T>], &[bool], &Tensor<T>, &mut dyn FnMut(usize, Tensor<T>))>;

struct Inner<T: Real> {
    values: Vec<Tensor<T>>,
    needs: Vec<bool>,
    backs: Vec<Option<BackwardFn<T>>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Tape<T: Real> {
    inner: RefCell<Inner<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { inner: RefCell::new(Inner { values: Vec::new(), needs: Vec::new(), backs: Vec::new() }) }
    }

    /// Number of recorded values.
    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register a differentiable input; its gradient survives [`Self::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, true, None)
    }

    /// Register a value gradients never reach (inputs, labels, detached stats).
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, false, None)
    }

    /// Borrow a recorded value.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.inner.borrow(), |inner| &inner.values[v.0])
    }

    pub fn value_clone(&self, v: Var) -> Tensor<T> {
        self.inner.borrow().values[v.0].clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().values[v.0].shape().to_vec()
    }

    fn push(&self, value: Tensor<T>, needs: bool, back: Option<BackwardFn<T>>) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(value);
        inner.needs.push(needs);
        inner.backs.push(back);
        Var(inner.values.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let inner = self.inner.borrow();
        vars.iter().any(|v| inner.needs[v.0])
    }

    /// Reverse sweep from a scalar loss. Gradients of intermediate values are
    /// freed as soon as they have been consumed; only leaf gradients survive.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let inner = self.inner.borrow();
        let loss_val = &inner.values[loss.0];
        if loss_val.numel() != 1 {
            return Err(Error::shape(format!("backward needs a scalar loss, got {:?}", loss_val.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..inner.values.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_val.shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !inner.needs[id] {
                continue;
            }
            match &inner.backs[id] {
                Some(back) => {
                    let needs = &inner.needs;
                    let mut sink = |pid: usize, gt: Tensor<T>| {
                        if !needs[pid] {
                            return;
                        }
                        match &mut grads[pid] {
                            Some(acc) => acc.add_assign(&gt),
                            slot => *slot = Some(gt),
                        }
                    };
                    back(&inner.values, needs, &g, &mut sink);
                }
                None => grads[id] = Some(g),
            }
        }
        Ok(Gradients { grads })
    }

    // ---- elementwise and vector ops ----

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            inner.values[a.0].add(&inner.values[b.0])?
        };
        let needs = self.needs(&[a, b]);
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |_, _, g, sink| {
                sink(a.0, g.clone());
                sink(b.0, g.clone());
            })),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            inner.values[a.0].sub(&inner.values[b.0])?
        };
        let needs = self.needs(&[a, b]);
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |_, _, g, sink| {
                sink(a.0, g.clone());
                sink(b.0, g.scale(-T::one()));
            })),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            inner.values[a.0].mul(&inner.values[b.0])?
        };
        let needs = self.needs(&[a, b]);
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |vals, needs, g, sink| {
                if needs[a.0] {
                    sink(a.0, g.mul(&vals[b.0]).expect("mul grad"));
                }
                if needs[b.0] {
                    sink(b.0, g.mul(&vals[a.0]).expect("mul grad"));
                }
            })),
        ))
    }

    /// Sum of same-shape tensors.
    pub fn add_n(&self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("add_n of zero tensors"));
        }
        let out = {
            let inner = self.inner.borrow();
            let mut acc = inner.values[xs[0].0].clone();
            for v in &xs[1..] {
                if inner.values[v.0].shape() != acc.shape() {
                    return Err(Error::shape(format!(
                        "add_n shapes differ: {:?} vs {:?}",
                        acc.shape(),
                        inner.values[v.0].shape()
                    )));
                }
                acc.add_assign(&inner.values[v.0]);
            }
            acc
        };
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let needs = self.needs(xs);
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |_, _, g, sink| {
                for &pid in &ids {
                    sink(pid, g.clone());
                }
            })),
        ))
    }

    /// Weighted sum of same-shape tensors with constant coefficients.
    pub fn weighted_sum(&self, terms: &[(Var, T)]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::shape("weighted_sum of zero tensors"));
        }
        let out = {
            let inner = self.inner.borrow();
            let mut acc = inner.values[terms[0].0 .0].scale(terms[0].1);
            for &(v, w) in &terms[1..] {
                if inner.values[v.0].shape() != acc.shape() {
                    return Err(Error::shape(format!(
                        "weighted_sum shapes differ: {:?} vs {:?}",
                        acc.shape(),
                        inner.values[v.0].shape()
                    )));
                }
                acc.add_assign(&inner.values[v.0].scale(w));
            }
            acc
        };
        let saved: Vec<(usize, T)> = terms.iter().map(|&(v, w)| (v.0, w)).collect();
        let needs = self.needs(&terms.iter().map(|&(v, _)| v).collect::<Vec<_>>());
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |_, _, g, sink| {
                for &(pid, w) in &saved {
                    sink(pid, g.scale(w));
                }
            })),
        ))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let out = self.inner.borrow().values[a.0].scale(c);
        let needs = self.needs(&[a]);
        self.push(out, needs, Some(Box::new(move |_, _, g, sink| sink(a.0, g.scale(c)))))
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        let out = self.inner.borrow().values[a.0].map(|v| v + c);
        let needs = self.needs(&[a]);
        self.push(out, needs, Some(Box::new(move |_, _, g, sink| sink(a.0, g.clone()))))
    }

    /// y = 1 / sqrt(x + eps)
    pub fn rsqrt_eps(&self, a: Var, eps: T) -> Var {
        let out = self.inner.borrow().values[a.0].map(|v| T::one() / (v + eps).sqrt());
        let needs = self.needs(&[a]);
        let saved = out.clone();
        self.push(
            out,
            needs,
            Some(Box::new(move |_, _, g, sink| {
                let half = T::from_f64(0.5);
                sink(a.0, g.zip_map(&saved, |gv, y| -half * y * y * y * gv).expect("rsqrt grad"));
            })),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.inner.borrow().values[a.0].map(|v| T::one() / (T::one() + (-v).exp()));
        let needs = self.needs(&[a]);
        let saved = out.clone();
        self.push(
            out,
            needs,
            Some(Box::new(move |_, _, g, sink| {
                sink(a.0, g.zip_map(&saved, |gv, y| gv * y * (T::one() - y)).expect("sigmoid grad"));
            })),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.inner.borrow().values[a.0].map(|v| v.tanh());
        let needs = self.needs(&[a]);
        let saved = out.clone();
        self.push(
            out,
            needs,
            Some(Box::new(move |_, _, g, sink| {
                sink(a.0, g.zip_map(&saved, |gv, y| gv * (T::one() - y * y)).expect("tanh grad"));
            })),
        )
    }

    /// Reduce to a scalar by summation.
    pub fn sum_all(&self, a: Var) -> Var {
        let (sum, shape) = {
            let inner = self.inner.borrow();
            (inner.values[a.0].sum(), inner.values[a.0].shape().to_vec())
        };
        let needs = self.needs(&[a]);
        self.push(
            Tensor::scalar(sum),
            needs,
            Some(Box::new(move |_, _, g, sink| {
                sink(a.0, Tensor::full(&shape, g.item()));
            })),
        )
    }

    // ---- neural network ops ----

    pub fn relu(&self, x: Var) -> Var {
        let out = ops::relu(&self.inner.borrow().values[x.0]);
        let needs = self.needs(&[x]);
        self.push(
            out,
            needs,
            Some(Box::new(move |vals, _, g, sink| sink(x.0, ops::relu_grad(&vals[x.0], g)))),
        )
    }

    pub fn conv2d(&self, x: Var, w: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            let b = bias.map(|b| inner.values[b.0].clone());
            ops::conv2d(&inner.values[x.0], &inner.values[w.0], b.as_ref(), &spec)?
        };
        let mut parents = vec![x, w];
        parents.extend(bias);
        let needs = self.needs(&parents);
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |vals, needs, g, sink| {
                if needs[x.0] {
                    sink(x.0, ops::conv2d_grad_input(vals[x.0].shape(), &vals[w.0], g, &spec).expect("conv grad"));
                }
                if needs[w.0] {
                    sink(w.0, ops::conv2d_grad_weight(&vals[x.0], g, vals[w.0].shape(), &spec).expect("conv grad"));
                }
                if let Some(b) = bias {
                    if needs[b.0] {
                        sink(b.0, ops::conv2d_grad_bias(g).expect("conv grad"));
                    }
                }
            })),
        ))
    }

    pub fn dense(&self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            let b = bias.map(|b| inner.values[b.0].clone());
            ops::dense(&inner.values[x.0], &inner.values[w.0], b.as_ref())?
        };
        let mut parents = vec![x, w];
        parents.extend(bias);
        let needs = self.needs(&parents);
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |vals, needs, g, sink| {
                if needs[x.0] {
                    sink(x.0, ops::dense_grad_input(g, &vals[w.0]).expect("dense grad"));
                }
                if needs[w.0] {
                    sink(w.0, ops::dense_grad_weight(&vals[x.0], g).expect("dense grad"));
                }
                if let Some(b) = bias {
                    if needs[b.0] {
                        sink(b.0, ops::dense_grad_bias(g).expect("dense grad"));
                    }
                }
            })),
        ))
    }

    pub fn max_pool2d(&self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (out, argmax) = ops::max_pool2d(&self.inner.borrow().values[x.0], kernel, stride, padding)?;
        let needs = self.needs(&[x]);
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |vals, _, g, sink| {
                sink(x.0, ops::max_pool2d_grad(vals[x.0].shape(), g, &argmax));
            })),
        ))
    }

    pub fn avg_pool2d(&self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let out = ops::avg_pool2d(&self.inner.borrow().values[x.0], kernel, stride, padding)?;
        let needs = self.needs(&[x]);
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |vals, _, g, sink| {
                sink(x.0, ops::avg_pool2d_grad(vals[x.0].shape(), g, kernel, stride, padding));
            })),
        ))
    }

    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(&self.inner.borrow().values[x.0])?;
        let needs = self.needs(&[x]);
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |vals, _, g, sink| {
                sink(x.0, ops::global_avg_pool_grad(vals[x.0].shape(), g));
            })),
        ))
    }

    /// Train-mode batch norm: statistics come from the batch itself. Returns
    /// the output plus the batch mean and variance for running-average updates.
    pub fn batch_norm_train(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Tensor<T>, Tensor<T>)> {
        let (out, mean, var) = {
            let inner = self.inner.borrow();
            let (mean, var) = ops::batch_stats(&inner.values[x.0])?;
            let out =
                ops::batch_norm_apply(&inner.values[x.0], &inner.values[gamma.0], &inner.values[beta.0], &mean, &var, eps)?;
            (out, mean, var)
        };
        let needs = self.needs(&[x, gamma, beta]);
        let (mean_c, var_c) = (mean.clone(), var.clone());
        let v = self.push(
            out,
            needs,
            Some(Box::new(move |vals, needs, g, sink| {
                let (gx, gg, gb) =
                    ops::batch_norm_grad(&vals[x.0], &vals[gamma.0], &mean_c, &var_c, eps, g).expect("bn grad");
                if needs[x.0] {
                    sink(x.0, gx);
                }
                if needs[gamma.0] {
                    sink(gamma.0, gg);
                }
                if needs[beta.0] {
                    sink(beta.0, gb);
                }
            })),
        );
        Ok((v, mean, var))
    }

    pub fn channel_mean(&self, x: Var) -> Result<Var> {
        let out = ops::channel_mean(&self.inner.borrow().values[x.0])?;
        let needs = self.needs(&[x]);
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |vals, _, g, sink| {
                sink(x.0, ops::channel_mean_grad(vals[x.0].shape(), g));
            })),
        ))
    }

    pub fn channel_var(&self, x: Var) -> Result<Var> {
        let (mean, out) = {
            let inner = self.inner.borrow();
            let (mean, var) = ops::batch_stats(&inner.values[x.0])?;
            (mean, var)
        };
        let needs = self.needs(&[x]);
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |vals, _, g, sink| {
                sink(x.0, ops::channel_var_grad(&vals[x.0], &mean, g));
            })),
        ))
    }

    /// y[o, ...] = x[o, ...] * s[o] along the leading axis.
    pub fn scale_axis0(&self, x: Var, s: Var) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            ops::scale_axis0(&inner.values[x.0], &inner.values[s.0])?
        };
        let needs = self.needs(&[x, s]);
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |vals, needs, g, sink| {
                let xv = &vals[x.0];
                let sv = &vals[s.0];
                let o = xv.shape()[0];
                let inner_len = xv.numel() / o;
                if needs[x.0] {
                    sink(x.0, ops::scale_axis0(g, sv).expect("scale grad"));
                }
                if needs[s.0] {
                    let mut gs = vec![T::zero(); o];
                    for (oi, (gc, xc)) in g.data().chunks(inner_len).zip(xv.data().chunks(inner_len)).enumerate() {
                        gs[oi] = gc.iter().zip(xc).map(|(&a, &b)| a * b).sum();
                    }
                    sink(s.0, Tensor::new(&[o], gs).expect("scale grad"));
                }
            })),
        ))
    }

    pub fn concat_channels(&self, xs: &[Var]) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            let refs: Vec<&Tensor<T>> = xs.iter().map(|v| &inner.values[v.0]).collect();
            ops::concat_channels(&refs)?
        };
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let needs = self.needs(xs);
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |vals, needs, g, sink| {
                let mut from = 0;
                for &pid in &ids {
                    let c = vals[pid].shape()[1];
                    if needs[pid] {
                        sink(pid, ops::slice_channels(g, from, c).expect("concat grad"));
                    }
                    from += c;
                }
            })),
        ))
    }

    pub fn dropout<R: Rng>(&self, x: Var, p: f64, train: bool, rng: &mut R) -> Var {
        let (out, mask) = ops::dropout(&self.inner.borrow().values[x.0], p, train, rng);
        let needs = self.needs(&[x]);
        match mask {
            None => self.push(out, needs, Some(Box::new(move |_, _, g, sink| sink(x.0, g.clone())))),
            Some(mask) => self.push(
                out,
                needs,
                Some(Box::new(move |_, _, g, sink| sink(x.0, g.mul(&mask).expect("dropout grad")))),
            ),
        }
    }

    /// Mean cross entropy between logits and integer labels.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(&self.inner.borrow().values[logits.0], labels)?;
        let labels = labels.to_vec();
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            needs,
            Some(Box::new(move |_, _, g, sink| {
                sink(logits.0, ops::softmax_cross_entropy_grad(&probs, &labels, g.item()));
            })),
        ))
    }

    // ---- structural ops ----

    /// Row lookup: out[i, :] = table[idx[i], :].
    pub fn gather_rows(&self, table: Var, idx: &[usize]) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            let t = &inner.values[table.0];
            let (rows, d) = super::dims2(t.shape(), "gather_rows table")?;
            if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
                return Err(Error::shape(format!("row {bad} out of range for table of {rows}")));
            }
            let mut out = Tensor::zeros(&[idx.len(), d]);
            for (r, &i) in idx.iter().enumerate() {
                out.data_mut()[r * d..(r + 1) * d].copy_from_slice(&t.data()[i * d..(i + 1) * d]);
            }
            out
        };
        let idx = idx.to_vec();
        let needs = self.needs(&[table]);
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |vals, _, g, sink| {
                let mut gt = Tensor::zeros(vals[table.0].shape());
                let d = vals[table.0].shape()[1];
                for (r, &i) in idx.iter().enumerate() {
                    for (a, &b) in gt.data_mut()[i * d..(i + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *a += b;
                    }
                }
                sink(table.0, gt);
            })),
        ))
    }

    /// Generic differentiable gather: out[i] = x.flat[map[i]], with
    /// `u32::MAX` entries producing zero. Backward scatter-adds into x.
    pub fn gather_map(&self, x: Var, map: Vec<u32>, out_shape: &[usize]) -> Result<Var> {
        let out = {
            let inner = self.inner.borrow();
            let xd = inner.values[x.0].data();
            let numel: usize = out_shape.iter().product();
            if map.len() != numel {
                return Err(Error::shape(format!("index map has {} entries for shape {out_shape:?}", map.len())));
            }
            if let Some(&bad) = map.iter().find(|&&i| i != u32::MAX && i as usize >= xd.len()) {
                return Err(Error::shape(format!("map index {bad} out of range for {} source values", xd.len())));
            }
            let data: Vec<T> =
                map.iter().map(|&i| if i == u32::MAX { T::zero() } else { xd[i as usize] }).collect();
            Tensor::new(out_shape, data)?
        };
        let needs = self.needs(&[x]);
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |vals, _, g, sink| {
                let mut gx = Tensor::zeros(vals[x.0].shape());
                let gd = gx.data_mut();
                for (&i, &gv) in map.iter().zip(g.data()) {
                    if i != u32::MAX {
                        gd[i as usize] += gv;
                    }
                }
                sink(x.0, gx);
            })),
        ))
    }

    /// Rescale a tensor so its root-mean-square equals `target`.
    pub fn rms_normalize(&self, x: Var, target: T, eps: T) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let xv = &inner.values[x.0];
            let n = T::from_f64(xv.numel() as f64);
            let ms = xv.data().iter().map(|&v| v * v).sum::<T>() / n + eps;
            xv.scale(target / ms.sqrt())
        };
        let needs = self.needs(&[x]);
        self.push(
            out,
            needs,
            Some(Box::new(move |vals, _, g, sink| {
                let xv = &vals[x.0];
                let n = T::from_f64(xv.numel() as f64);
                let ms = xv.data().iter().map(|&v| v * v).sum::<T>() / n + eps;
                let r = ms.sqrt();
                let dot = g.data().iter().zip(xv.data()).map(|(&a, &b)| a * b).sum::<T>();
                let k = target / r;
                let corr = dot / (n * ms);
                sink(x.0, g.zip_map(xv, |gv, xvv| k * (gv - xvv * corr)).expect("rms grad"));
            })),
        )
    }

    /// Custom forward with a caller-supplied gradient rule; the hook behind
    /// straight-through estimators. `backward` maps (input value, upstream
    /// gradient) to the input gradient.
    pub fn custom_grad<F, B>(&self, x: Var, forward: F, backward: B) -> Var
    where
        F: FnOnce(&Tensor<T>) -> Tensor<T>,
        B: Fn(&Tensor<T>, &Tensor<T>) -> Tensor<T> + 'static,
    {
        let out = forward(&self.inner.borrow().values[x.0]);
        let needs = self.needs(&[x]);
        self.push(
            out,
            needs,
            Some(Box::new(move |vals, _, g, sink| sink(x.0, backward(&vals[x.0], g)))),
        )
    }
}

/// Maximum relative error between tape gradients and central finite
/// differences of `f`, evaluated in the tape's own precision. Callers pass a
/// builder that registers the given inputs as leaves and returns a scalar
/// loss; every leaf is perturbed elementwise.
pub fn grad_check<T, F>(inputs: &[Tensor<T>], delta: T, f: F) -> f64
where
    T: Real,
    F: Fn(&Tape<T>, &[Var]) -> Var,
{
    let run = |tensors: &[Tensor<T>]| -> T {
        let tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars);
        let v = tape.value(loss).item();
        v
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).expect("backward");

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        // Elements far below the tensor's gradient scale sit in the
        // finite-difference noise floor; compare those absolutely.
        let scale = analytic.data().iter().fold(0.0f64, |m, &g| m.max(g.to_f64().abs()));
        let floor = (1e-3 * scale).max(1e-8);
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += delta;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= delta;
            let fd = (run(&plus) - run(&minus)).to_f64() / (2.0 * delta.to_f64());
            let an = analytic.data()[j].to_f64();
            let denom = an.abs().max(fd.abs()).max(floor);
            worst = worst.max((an - fd).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn chain_rule_on_scalars() {
        // d/dx of (3x)^2 at x=2 is 18x/... = 2*3x*3 = 36.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0f64));
        let y = tape.scale(x, 3.0);
        let z = tape.mul(y, y).unwrap();
        let grads = tape.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 36.0);
    }

    #[test]
    fn fanout_accumulates() {
        // z = x + x must give dz/dx = 2.
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(5.0f64));
        let z = tape.add(x, x).unwrap();
        let grads = tape.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0f64));
        let c = tape.constant(Tensor::scalar(4.0f64));
        let z = tape.mul(x, c).unwrap();
        let grads = tape.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 4.0);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[3]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&[2, 3], &mut rng);
        let b = rand_tensor(&[2, 3], &mut rng);
        let err = grad_check(&[a, b], 1e-5, |tape, vars| {
            let s = tape.sigmoid(vars[0]);
            let t = tape.tanh(vars[1]);
            let m = tape.mul(s, t).unwrap();
            let r = tape.rsqrt_eps(tape.mul(m, m).unwrap(), 0.3);
            tape.sum_all(r)
        });
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn conv_and_dense_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[2, 2, 5, 5], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let dw = rand_tensor(&[27, 4], &mut rng);
        let err = grad_check(&[x, w, b, dw], 1e-5, |tape, vars| {
            let y = tape.conv2d(vars[0], vars[1], Some(vars[2]), ConvSpec::new(2, 1, 1, 1)).unwrap();
            let y = tape.relu(y);
            let p = tape.global_avg_pool(y).unwrap();
            // 3 channels at 3x3 -> flatten and push through a dense layer
            let flat = tape.gather_map(p, (0..6u32).collect(), &[2, 3]).unwrap();
            let wide = tape.gather_map(flat, (0..6u32).cycle().take(2 * 27).collect(), &[2, 27]).unwrap();
            let out = tape.dense(wide, vars[3], None).unwrap();
            let sm = tape.softmax_cross_entropy(out, &[1, 3]).unwrap();
            tape.sum_all(sm)
        });
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn grouped_conv_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_tensor(&[1, 4, 5, 5], &mut rng);
        let w = rand_tensor(&[4, 1, 3, 3], &mut rng);
        let err = grad_check(&[x, w], 1e-5, |tape, vars| {
            let y = tape.conv2d(vars[0], vars[1], None, ConvSpec::new(1, 1, 1, 4)).unwrap();
            let y = tape.mul(y, y).unwrap();
            tape.sum_all(y)
        });
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn pooling_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[1, 2, 6, 6], &mut rng);
        let err = grad_check(&[x], 1e-6, |tape, vars| {
            let a = tape.avg_pool2d(vars[0], 3, 1, 1).unwrap();
            let m = tape.max_pool2d(a, 2, 2, 0).unwrap();
            tape.sum_all(m)
        });
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn batch_norm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[3, 2, 4, 4], &mut rng);
        let gamma = rand_tensor(&[2], &mut rng);
        let beta = rand_tensor(&[2], &mut rng);
        // Weight the loss elementwise so it is not nearly invariant to x
        // (a plain sum of squares of normalized values almost is, which
        // pushes the true gradient below finite-difference resolution).
        let cw = rand_tensor(&[3, 2, 4, 4], &mut rng);
        let err = grad_check(&[x, gamma, beta], 1e-5, move |tape, vars| {
            let (y, _, _) = tape.batch_norm_train(vars[0], vars[1], vars[2], 1e-5).unwrap();
            let c = tape.constant(cw.clone());
            let y = tape.mul(y, c).unwrap();
            let y = tape.tanh(y);
            tape.sum_all(y)
        });
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn fold_style_composition_matches_finite_differences() {
        // Mirrors the fold arithmetic: scale weights by gamma/sqrt(var+eps)
        // where the statistics themselves depend on a convolution output.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[2, 2, 4, 4], &mut rng);
        let w = rand_tensor(&[2, 2, 3, 3], &mut rng);
        let gamma = rand_tensor(&[2], &mut rng);
        let beta = rand_tensor(&[2], &mut rng);
        let cw = rand_tensor(&[2, 2, 4, 4], &mut rng);
        let err = grad_check(&[x, w, gamma, beta], 1e-5, move |tape, vars| {
            let conv = tape.conv2d(vars[0], vars[1], None, ConvSpec::new(1, 1, 1, 1)).unwrap();
            let mean = tape.channel_mean(conv).unwrap();
            let var = tape.channel_var(conv).unwrap();
            let inv = tape.rsqrt_eps(var, 1e-5);
            let s = tape.mul(vars[2], inv).unwrap();
            let w_fold = tape.scale_axis0(vars[1], s).unwrap();
            let shift = tape.sub(vars[3], tape.mul(s, mean).unwrap()).unwrap();
            let y = tape.conv2d(vars[0], w_fold, Some(shift), ConvSpec::new(1, 1, 1, 1)).unwrap();
            let c = tape.constant(cw.clone());
            let y = tape.mul(y, c).unwrap();
            tape.sum_all(y)
        });
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let table = rand_tensor(&[4, 3], &mut rng);
        let err = grad_check(&[table], 1e-6, |tape, vars| {
            let rows = tape.gather_rows(vars[0], &[0, 2, 2]).unwrap();
            let norm = tape.rms_normalize(rows, 0.5, 1e-12);
            let mapped = tape
                .gather_map(norm, vec![0, 4, 8, u32::MAX, 2, 2], &[2, 3])
                .unwrap();
            let s = tape.sigmoid(mapped);
            tape.sum_all(s)
        });
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn straight_through_estimator_passes_gradient_inside_range() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3], vec![-2.0f64, 0.5, 3.0]).unwrap());
        // Round to integers inside [-1, 1], pass-through gradient inside, zero outside.
        let q = tape.custom_grad(
            x,
            |t| t.map(|v| v.clamp(-1.0, 1.0).round()),
            |xv, g| {
                g.zip_map(xv, |gv, v| if (-1.0..=1.0).contains(&v) { gv } else { 0.0 })
                    .unwrap()
            },
        );
        let loss = tape.sum_all(q);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn concat_and_weighted_sum_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&[1, 1, 2, 2], &mut rng);
        let b = rand_tensor(&[1, 2, 2, 2], &mut rng);
        let err = grad_check(&[a, b], 1e-6, |tape, vars| {
            let cat = tape.concat_channels(&[vars[0], vars[1]]).unwrap();
            let double = tape.weighted_sum(&[(cat, 0.75), (cat, 0.5)]).unwrap();
            let s = tape.tanh(double);
            tape.sum_all(s)
        });
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn dropout_scales_surviving_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::full(&[1000], 1.0));
        let d = tape.dropout(x, 0.25, true, &mut rng);
        let loss = tape.sum_all(d);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(x).unwrap();
        let scale = 1.0 / 0.75;
        assert!(g.data().iter().all(|&v| v == 0.0 || (v - scale).abs() < 1e-12));
        let kept = g.data().iter().filter(|&&v| v != 0.0).count();
        assert!((650..850).contains(&kept), "kept {kept}");
    }
}
