//! Differentiable elementwise, reduction, shape, and matmul ops.

use crate::grad::float::Float;
use crate::grad::tape::Var;
use crate::grad::tensor::{broadcast_strides, contiguous_strides, for_each_index2, matmul_into, Tensor};

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Float> Tensor<T> {
    /// Materialize a broadcast of `self` to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor<T> {
        if self.shape() == shape {
            return self.clone();
        }
        let sa = broadcast_strides(self.shape(), shape);
        let zeros = vec![0; shape.len()];
        let mut out = Vec::with_capacity(shape.iter().product());
        let src = self.data();
        for_each_index2(shape, &sa, &zeros, |i, _| out.push(src[i]));
        Tensor::from_vec(shape.to_vec(), out)
    }
}

impl<T: Float> Var<T> {
    fn unary(&self, value: Tensor<T>, grad: impl FnOnce(&Tensor<T>) -> Tensor<T> + 'static) -> Var<T> {
        self.tape().record(value, &[self], move |g, _| vec![Some(grad(g))])
    }

    // ---- binary, broadcasting ----

    pub fn add(&self, o: &Var<T>) -> Var<T> {
        let (sa, sb) = (self.shape().to_vec(), o.shape().to_vec());
        let v = self.value().add(o.value());
        self.tape().record(v, &[self, o], move |g, need| {
            vec![
                need[0].then(|| g.sum_to_shape(&sa)),
                need[1].then(|| g.sum_to_shape(&sb)),
            ]
        })
    }

    pub fn sub(&self, o: &Var<T>) -> Var<T> {
        let (sa, sb) = (self.shape().to_vec(), o.shape().to_vec());
        let v = self.value().sub(o.value());
        self.tape().record(v, &[self, o], move |g, need| {
            vec![
                need[0].then(|| g.sum_to_shape(&sa)),
                need[1].then(|| g.map(|x| -x).sum_to_shape(&sb)),
            ]
        })
    }

    pub fn mul(&self, o: &Var<T>) -> Var<T> {
        let (a, b) = (self.value().clone(), o.value().clone());
        let v = a.mul(&b);
        self.tape().record(v, &[self, o], move |g, need| {
            vec![
                need[0].then(|| g.mul(&b).sum_to_shape(a.shape())),
                need[1].then(|| g.mul(&a).sum_to_shape(b.shape())),
            ]
        })
    }

    pub fn div(&self, o: &Var<T>) -> Var<T> {
        let (a, b) = (self.value().clone(), o.value().clone());
        let v = a.zip_map(&b, |x, y| x / y);
        self.tape().record(v, &[self, o], move |g, need| {
            let ga = need[0].then(|| g.zip_map(&b, |gv, y| gv / y).sum_to_shape(a.shape()));
            let gb = need[1].then(|| {
                let q = a.zip_map(&b, |x, y| -x / (y * y));
                g.mul(&q).sum_to_shape(b.shape())
            });
            vec![ga, gb]
        })
    }

    // ---- scalar ----

    pub fn add_scalar(&self, s: f64) -> Var<T> {
        let s = T::lit(s);
        self.unary(self.value().map(|x| x + s), |g| g.clone())
    }

    pub fn mul_scalar(&self, s: f64) -> Var<T> {
        let s = T::lit(s);
        self.unary(self.value().map(|x| x * s), move |g| g.scale(s))
    }

    pub fn neg(&self) -> Var<T> {
        self.mul_scalar(-1.0)
    }

    /// `s - self`
    pub fn rsub_scalar(&self, s: f64) -> Var<T> {
        let s = T::lit(s);
        self.unary(self.value().map(|x| s - x), |g| g.map(|v| -v))
    }

    // ---- unary ----

    pub fn square(&self) -> Var<T> {
        let x = self.value().clone();
        let two = T::lit(2.0);
        self.unary(x.map(|v| v * v), move |g| g.zip_map(&x, |gv, xv| gv * two * xv))
    }

    pub fn sqrt(&self) -> Var<T> {
        let y = self.value().map(|v| v.sqrt());
        let yc = y.clone();
        let half = T::lit(0.5);
        self.unary(y, move |g| g.zip_map(&yc, |gv, yv| gv * half / yv))
    }

    pub fn exp(&self) -> Var<T> {
        let y = self.value().map(|v| v.exp());
        let yc = y.clone();
        self.unary(y, move |g| g.mul(&yc))
    }

    pub fn ln(&self) -> Var<T> {
        let x = self.value().clone();
        self.unary(x.map(|v| v.ln()), move |g| g.zip_map(&x, |gv, xv| gv / xv))
    }

    pub fn abs(&self) -> Var<T> {
        let x = self.value().clone();
        self.unary(x.map(|v| v.abs()), move |g| {
            g.zip_map(&x, |gv, xv| {
                if xv > T::zero() {
                    gv
                } else if xv < T::zero() {
                    -gv
                } else {
                    T::zero()
                }
            })
        })
    }

    pub fn relu(&self) -> Var<T> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<T> {
        let x = self.value().clone();
        let s = T::lit(slope);
        let y = x.map(|v| if v > T::zero() { v } else { v * s });
        self.unary(y, move |g| {
            g.zip_map(&x, |gv, xv| if xv > T::zero() { gv } else { gv * s })
        })
    }

    pub fn sigmoid(&self) -> Var<T> {
        let y = self.value().map(sigmoid);
        let yc = y.clone();
        self.unary(y, move |g| g.zip_map(&yc, |gv, yv| gv * yv * (T::one() - yv)))
    }

    /// `x * sigmoid(x)`
    pub fn silu(&self) -> Var<T> {
        let x = self.value().clone();
        let y = x.map(|v| v * sigmoid(v));
        self.unary(y, move |g| {
            g.zip_map(&x, |gv, xv| {
                let s = sigmoid(xv);
                gv * (s + xv * s * (T::one() - s))
            })
        })
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&self) -> Var<T> {
        let x = self.value().clone();
        let y = x.map(|v| v.max(T::zero()) + (-v.abs()).exp().ln_1p());
        self.unary(y, move |g| g.zip_map(&x, |gv, xv| gv * sigmoid(xv)))
    }

    pub fn tanh(&self) -> Var<T> {
        let y = self.value().map(|v| v.tanh());
        let yc = y.clone();
        self.unary(y, move |g| g.zip_map(&yc, |gv, yv| gv * (T::one() - yv * yv)))
    }

    /// Clamp to `[lo, hi]`; the gradient passes where the input lies inside
    /// the closed interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<T> {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        let x = self.value().clone();
        let y = x.map(|v| v.max(lo).min(hi));
        self.unary(y, move |g| {
            g.zip_map(&x, |gv, xv| if xv >= lo && xv <= hi { gv } else { T::zero() })
        })
    }

    /// Value of `replacement`, gradient passed to `self` unchanged
    /// (straight-through estimator).
    pub fn straight_through(&self, replacement: Tensor<T>) -> Var<T> {
        assert_eq!(
            self.shape(),
            replacement.shape(),
            "straight-through replacement must keep the shape"
        );
        self.unary(replacement, |g| g.clone())
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Var<T> {
        let shape = self.shape().to_vec();
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, move |g| Tensor::full(shape, g.item()))
    }

    pub fn mean_all(&self) -> Var<T> {
        let n = self.value().numel() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sum down to `shape` (keepdim semantics over broadcast axes).
    pub fn sum_to(&self, shape: &[usize]) -> Var<T> {
        let in_shape = self.shape().to_vec();
        let v = self.value().sum_to_shape(shape);
        self.unary(v, move |g| g.broadcast_to(&in_shape))
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_axes(&self, axes: &[usize]) -> Var<T> {
        let shape = reduced_shape(self.shape(), axes);
        self.sum_to(&shape)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Var<T> {
        let count: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_axes(axes).mul_scalar(1.0 / count as f64)
    }

    /// Max over `axes` (keepdim). The gradient goes to the first maximizer.
    pub fn max_axes(&self, axes: &[usize]) -> Var<T> {
        let in_shape = self.shape().to_vec();
        let out_shape = reduced_shape(&in_shape, axes);
        let so = broadcast_strides(&out_shape, &in_shape);
        let ident = contiguous_strides(&in_shape);
        let numel: usize = out_shape.iter().product();
        let mut best = vec![T::neg_infinity(); numel];
        let mut arg = vec![usize::MAX; numel];
        let src = self.value().data();
        for_each_index2(&in_shape, &ident, &so, |is, io| {
            if src[is] > best[io] || arg[io] == usize::MAX {
                best[io] = src[is];
                arg[io] = is;
            }
        });
        let v = Tensor::from_vec(out_shape, best);
        let total = self.value().numel();
        self.unary(v, move |g| {
            let mut out = vec![T::zero(); total];
            for (gi, &a) in g.data().iter().zip(&arg) {
                out[a] += *gi;
            }
            Tensor::from_vec(in_shape, out)
        })
    }

    // ---- shape ----

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Var<T> {
        let in_shape = self.shape().to_vec();
        let v = self.value().reshape(shape);
        self.unary(v, move |g| g.reshape(in_shape))
    }

    /// Collapse all axes after the first.
    pub fn flatten_rows(&self) -> Var<T> {
        let n = self.shape()[0];
        let rest = self.value().numel() / n.max(1);
        self.reshape(vec![n, rest])
    }

    pub fn permute(&self, perm: &[usize]) -> Var<T> {
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let v = self.value().permute(perm);
        self.unary(v, move |g| g.permute(&inv))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<T> {
        let in_shape = self.shape().to_vec();
        let v = self.value().narrow(axis, start, len);
        self.unary(v, move |g| {
            let outer: usize = in_shape[..axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let dim = in_shape[axis];
            let mut out = vec![T::zero(); in_shape.iter().product()];
            let gd = g.data();
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                let src = o * len * inner;
                out[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
            }
            Tensor::from_vec(in_shape, out)
        })
    }

    pub fn concat(parts: &[&Var<T>], axis: usize) -> Var<T> {
        let tape = parts[0].tape().clone();
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let v = Tensor::concat(&values, axis);
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        tape.record(v, parts, move |g, need| {
            let mut start = 0;
            sizes
                .iter()
                .zip(need)
                .map(|(&len, &n)| {
                    let s = start;
                    start += len;
                    n.then(|| g.narrow(axis, s, len))
                })
                .collect()
        })
    }

    /// Rows of a `(K, D)` table selected by `indices`, giving `(len, D)`.
    pub fn gather_rows(&self, indices: &[usize]) -> Var<T> {
        let (k, d) = match self.shape() {
            &[k, d] => (k, d),
            s => panic!("gather_rows needs a 2-D table, got {s:?}"),
        };
        let src = self.value().data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            assert!(i < k, "row index {i} out of range for {k} rows");
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let v = Tensor::from_vec(vec![indices.len(), d], out);
        let indices = indices.to_vec();
        self.unary(v, move |g| {
            let mut acc = vec![T::zero(); k * d];
            for (r, &i) in indices.iter().enumerate() {
                for (a, &gv) in acc[i * d..(i + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                    *a += gv;
                }
            }
            Tensor::from_vec(vec![k, d], acc)
        })
    }

    // ---- matmul ----

    /// Batched matmul over the last two axes. Operands are rank 2 or 3; a
    /// leading batch of 1 (or a rank-2 operand) broadcasts.
    pub fn matmul(&self, o: &Var<T>) -> Var<T> {
        let (ba, m, k) = mat_dims(self.shape());
        let (bb, k2, n) = mat_dims(o.shape());
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", self.shape(), o.shape());
        assert!(
            ba == bb || ba == 1 || bb == 1,
            "matmul batch dims {ba} and {bb} do not broadcast"
        );
        let batch = ba.max(bb);
        let (a, b) = (self.value().clone(), o.value().clone());
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let ai = if ba == 1 { 0 } else { i };
            let bi = if bb == 1 { 0 } else { i };
            matmul_into(
                &a.data()[ai * m * k..],
                false,
                &b.data()[bi * k * n..],
                false,
                &mut out[i * m * n..],
                m,
                k,
                n,
                false,
            );
        }
        let out_shape = if self.shape().len() == 2 && o.shape().len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let v = Tensor::from_vec(out_shape, out);
        self.tape().record(v, &[self, o], move |g, need| {
            let gd = g.data();
            let ga = need[0].then(|| {
                let mut da = vec![T::zero(); ba * m * k];
                for i in 0..batch {
                    let ai = if ba == 1 { 0 } else { i };
                    let bi = if bb == 1 { 0 } else { i };
                    matmul_into(
                        &gd[i * m * n..],
                        false,
                        &b.data()[bi * k * n..],
                        true,
                        &mut da[ai * m * k..],
                        m,
                        n,
                        k,
                        true,
                    );
                }
                Tensor::from_vec(a.shape().to_vec(), da)
            });
            let gb = need[1].then(|| {
                let mut db = vec![T::zero(); bb * k * n];
                for i in 0..batch {
                    let ai = if ba == 1 { 0 } else { i };
                    let bi = if bb == 1 { 0 } else { i };
                    matmul_into(
                        &a.data()[ai * m * k..],
                        true,
                        &gd[i * m * n..],
                        false,
                        &mut db[bi * k * n..],
                        k,
                        m,
                        n,
                        true,
                    );
                }
                Tensor::from_vec(b.shape().to_vec(), db)
            });
            vec![ga, gb]
        })
    }
}

fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let mut out = shape.to_vec();
    for &a in axes {
        assert!(a < shape.len(), "axis {a} out of range for {shape:?}");
        out[a] = 1;
    }
    out
}

fn mat_dims(shape: &[usize]) -> (usize, usize, usize) {
    match *shape {
        [m, k] => (1, m, k),
        [b, m, k] => (b, m, k),
        _ => panic!("matmul operand must be rank 2 or 3, got {shape:?}"),
    }
}
