//! Dense linear algebra and reduction ops for the tape.

use alloc::vec;
use alloc::vec::Vec;

use super::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// `out [m,n] = a [m,k] @ b [k,n]`
fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let or = &mut out[i * n..(i + 1) * n];
        for (p, &av) in ar.iter().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in or.iter_mut().zip(br.iter()) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `out [m,q] = a [m,p] @ b [q,p]^T`
fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, p: usize, q: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * q];
    for i in 0..m {
        let ar = &a[i * p..(i + 1) * p];
        for j in 0..q {
            let br = &b[j * p..(j + 1) * p];
            let mut s = T::zero();
            for (&x, &y) in ar.iter().zip(br.iter()) {
                s = s + x * y;
            }
            out[i * q + j] = s;
        }
    }
    out
}

/// `out [k,n] = a [m,k]^T @ b [m,n]`
fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let br = &b[i * n..(i + 1) * n];
        for (p, &av) in ar.iter().enumerate() {
            let or = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in or.iter_mut().zip(br.iter()) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn dims2<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 2, "expected a 2D tensor, got {s:?}");
    (s[0], s[1])
}

/// Views a `[c, ...]` tensor as `[c, n]` with trailing axes flattened.
fn chan2<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    let s = t.shape();
    assert!(!s.is_empty(), "expected a channelled tensor");
    (s[0], s[1..].iter().product())
}

impl<T: Scalar> Tape<T> {
    /// Matrix product `a [m,k] @ b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims2(self.value(a));
        let (k2, n) = dims2(self.value(b));
        assert_eq!(k, k2, "matmul inner dims");
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::from_vec(&[m, n], out).unwrap();
        self.push_op(out, &[a, b], move |t, g| {
            let av = t.value(a).data();
            let bv = t.value(b).data();
            let da = mm_nt(g.data(), bv, m, n, k);
            let db = mm_tn(av, g.data(), m, k, n);
            vec![
                (a, Tensor::from_vec(&[m, k], da).unwrap()),
                (b, Tensor::from_vec(&[k, n], db).unwrap()),
            ]
        })
    }

    /// Matrix product against a transposed right factor: `a [m,k] @ b [n,k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims2(self.value(a));
        let (n, k2) = dims2(self.value(b));
        assert_eq!(k, k2, "matmul_nt inner dims");
        let out = mm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::from_vec(&[m, n], out).unwrap();
        self.push_op(out, &[a, b], move |t, g| {
            let av = t.value(a).data();
            let bv = t.value(b).data();
            let da = mm(g.data(), bv, m, n, k);
            let db = mm_tn(g.data(), av, m, n, k);
            vec![
                (a, Tensor::from_vec(&[m, k], da).unwrap()),
                (b, Tensor::from_vec(&[n, k], db).unwrap()),
            ]
        })
    }

    /// Row-wise affine projection: `x [m,k] @ w [f,k]^T + bias [f]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let (m, k) = dims2(self.value(x));
        let (f, k2) = dims2(self.value(w));
        assert_eq!(k, k2, "linear inner dims");
        assert_eq!(self.value(bias).len(), f, "linear bias length");
        let mut out = mm_nt(self.value(x).data(), self.value(w).data(), m, k, f);
        let bv = self.value(bias).data();
        for row in out.chunks_mut(f) {
            for (o, &b) in row.iter_mut().zip(bv.iter()) {
                *o = *o + b;
            }
        }
        let out = Tensor::from_vec(&[m, f], out).unwrap();
        self.push_op(out, &[x, w, bias], move |t, g| {
            let xv = t.value(x).data();
            let wv = t.value(w).data();
            let dx = mm(g.data(), wv, m, f, k);
            let dw = mm_tn(g.data(), xv, m, f, k);
            let mut db = vec![T::zero(); f];
            for row in g.data().chunks(f) {
                for (d, &gi) in db.iter_mut().zip(row.iter()) {
                    *d = *d + gi;
                }
            }
            vec![
                (x, Tensor::from_vec(&[m, k], dx).unwrap()),
                (w, Tensor::from_vec(&[f, k], dw).unwrap()),
                (bias, Tensor::from_vec(&[f], db).unwrap()),
            ]
        })
    }

    /// 1x1x1 convolution over a channels-first field: `w [co,ci] @ x [ci,...]`
    /// plus bias, with trailing spatial axes preserved.
    pub fn pointwise_conv(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let (ci, n) = chan2(self.value(x));
        let (co, ci2) = dims2(self.value(w));
        assert_eq!(ci, ci2, "pointwise_conv channels");
        assert_eq!(self.value(bias).len(), co, "pointwise_conv bias length");
        let mut out = mm(self.value(w).data(), self.value(x).data(), co, ci, n);
        let bv = self.value(bias).data();
        for (c, row) in out.chunks_mut(n).enumerate() {
            let b = bv[c];
            for o in row.iter_mut() {
                *o = *o + b;
            }
        }
        let mut out_shape = self.value(x).shape().to_vec();
        out_shape[0] = co;
        let out = Tensor::from_vec(&out_shape, out).unwrap();
        self.push_op(out, &[x, w, bias], move |t, g| {
            let xv = t.value(x).data();
            let wv = t.value(w).data();
            let dw = mm_nt(g.data(), xv, co, n, ci);
            let dx = mm_tn(wv, g.data(), co, ci, n);
            let mut db = vec![T::zero(); co];
            for (c, row) in g.data().chunks(n).enumerate() {
                let mut s = T::zero();
                for &gi in row {
                    s = s + gi;
                }
                db[c] = s;
            }
            vec![
                (x, Tensor::from_vec(t.value(x).shape(), dx).unwrap()),
                (w, Tensor::from_vec(&[co, ci], dw).unwrap()),
                (bias, Tensor::from_vec(&[co], db).unwrap()),
            ]
        })
    }

    /// Transposes a `[m, ...]` tensor into `[n, m]` with trailing axes
    /// flattened into the leading output axis.
    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = chan2(self.value(a));
        let av = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let out = Tensor::from_vec(&[n, m], out).unwrap();
        self.push_op(out, &[a], move |t, g| {
            let gv = g.data();
            let mut da = vec![T::zero(); m * n];
            for j in 0..n {
                for i in 0..m {
                    da[i * n + j] = gv[j * m + i];
                }
            }
            vec![(a, Tensor::from_vec(t.value(a).shape(), da).unwrap())]
        })
    }

    fn softmax_groups(&mut self, a: Var, group: impl Fn(usize) -> (usize, usize, usize) + Copy + 'static, groups: usize) -> Var {
        // group(g) -> (start, stride, count): strided view of one softmax fibre
        let av = self.value(a).data();
        let mut out = av.to_vec();
        for gi in 0..groups {
            let (start, stride, count) = group(gi);
            let mut mx = T::neg_infinity();
            for i in 0..count {
                let v = av[start + i * stride];
                if v > mx {
                    mx = v;
                }
            }
            let mut s = T::zero();
            for i in 0..count {
                let e = (av[start + i * stride] - mx).exp();
                out[start + i * stride] = e;
                s = s + e;
            }
            let inv = T::one() / s;
            for i in 0..count {
                out[start + i * stride] = out[start + i * stride] * inv;
            }
        }
        let shape = self.value(a).shape().to_vec();
        let out = Tensor::from_vec(&shape, out).unwrap();
        let out_idx = self.len();
        self.push_op(out, &[a], move |t, g| {
            let y = t.nodes[out_idx].value.data();
            let gv = g.data();
            let mut da = vec![T::zero(); y.len()];
            for gi in 0..groups {
                let (start, stride, count) = group(gi);
                let mut dot = T::zero();
                for i in 0..count {
                    let k = start + i * stride;
                    dot = dot + gv[k] * y[k];
                }
                for i in 0..count {
                    let k = start + i * stride;
                    da[k] = y[k] * (gv[k] - dot);
                }
            }
            vec![(a, Tensor::from_vec(t.value(a).shape(), da).unwrap())]
        })
    }

    /// Softmax over axis 0 of a `[c, ...]` tensor (per position).
    pub fn softmax_axis0(&mut self, a: Var) -> Var {
        let (c, n) = chan2(self.value(a));
        self.softmax_groups(a, move |col| (col, n, c), n)
    }

    /// Softmax over axis 1 of an `[m, n]` tensor (per row).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = dims2(self.value(a));
        self.softmax_groups(a, move |row| (row * n, 1, n), m)
    }

    /// Rescales each position of a nonnegative `[c, ...]` tensor so the
    /// values across axis 0 sum to one.
    pub fn normalize_axis0(&mut self, a: Var) -> Var {
        let (c, n) = chan2(self.value(a));
        let av = self.value(a).data();
        let mut out = vec![T::zero(); c * n];
        for col in 0..n {
            let mut s = T::zero();
            for row in 0..c {
                s = s + av[row * n + col];
            }
            let inv = T::one() / s;
            for row in 0..c {
                out[row * n + col] = av[row * n + col] * inv;
            }
        }
        let out = Tensor::from_vec(self.value(a).shape(), out).unwrap();
        let out_idx = self.len();
        self.push_op(out, &[a], move |t, g| {
            let av = t.value(a).data();
            let y = t.nodes[out_idx].value.data();
            let gv = g.data();
            let mut da = vec![T::zero(); c * n];
            for col in 0..n {
                let mut s = T::zero();
                let mut dot = T::zero();
                for row in 0..c {
                    let k = row * n + col;
                    s = s + av[k];
                    dot = dot + gv[k] * y[k];
                }
                let inv = T::one() / s;
                for row in 0..c {
                    let k = row * n + col;
                    da[k] = (gv[k] - dot) * inv;
                }
            }
            vec![(a, Tensor::from_vec(t.value(a).shape(), da).unwrap())]
        })
    }

    /// Concatenates `[c_i, ...]` tensors along axis 0; trailing shapes must
    /// match and are preserved.
    pub fn concat_rows(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "concat_rows needs at least one input");
        let trailing = self.value(vars[0]).shape()[1..].to_vec();
        let n: usize = trailing.iter().product();
        let mut rows = 0usize;
        let mut data = Vec::new();
        for &v in vars {
            let s = self.value(v).shape();
            assert_eq!(&s[1..], &trailing[..], "concat_rows trailing shape mismatch");
            rows += s[0];
            data.extend_from_slice(self.value(v).data());
        }
        let mut out_shape = alloc::vec![rows];
        out_shape.extend_from_slice(&trailing);
        let out = Tensor::from_vec(&out_shape, data).unwrap();
        let vars_own: Vec<Var> = vars.to_vec();
        self.push_op(out, vars, move |t, g| {
            let gv = g.data();
            let mut offset = 0usize;
            let mut contribs = Vec::with_capacity(vars_own.len());
            for &v in &vars_own {
                let m = t.value(v).shape()[0];
                let part = gv[offset..offset + m * n].to_vec();
                offset += m * n;
                contribs.push((v, Tensor::from_vec(t.value(v).shape(), part).unwrap()));
            }
            contribs
        })
    }

    /// Concatenates two 2D tensors along axis 1 (columns).
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (m, na) = dims2(self.value(a));
        let (m2, nb) = dims2(self.value(b));
        assert_eq!(m, m2, "concat_cols row mismatch");
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            data.extend_from_slice(&av[i * na..(i + 1) * na]);
            data.extend_from_slice(&bv[i * nb..(i + 1) * nb]);
        }
        let out = Tensor::from_vec(&[m, na + nb], data).unwrap();
        self.push_op(out, &[a, b], move |_, g| {
            let gv = g.data();
            let mut da = Vec::with_capacity(m * na);
            let mut db = Vec::with_capacity(m * nb);
            for i in 0..m {
                let row = &gv[i * (na + nb)..(i + 1) * (na + nb)];
                da.extend_from_slice(&row[..na]);
                db.extend_from_slice(&row[na..]);
            }
            vec![
                (a, Tensor::from_vec(&[m, na], da).unwrap()),
                (b, Tensor::from_vec(&[m, nb], db).unwrap()),
            ]
        })
    }

    /// Gathers rows of a 2D tensor; backward scatter-adds into the source.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (m, n) = dims2(self.value(a));
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            assert!(i < m, "gather_rows index {i} out of {m}");
            data.extend_from_slice(&av[i * n..(i + 1) * n]);
        }
        let out = Tensor::from_vec(&[idx.len(), n], data).unwrap();
        let idx_own: Vec<usize> = idx.to_vec();
        self.push_op(out, &[a], move |_, g| {
            let gv = g.data();
            let mut da = vec![T::zero(); m * n];
            for (k, &i) in idx_own.iter().enumerate() {
                let src = &gv[k * n..(k + 1) * n];
                let dst = &mut da[i * n..(i + 1) * n];
                for (d, &s) in dst.iter_mut().zip(src.iter()) {
                    *d = *d + s;
                }
            }
            vec![(a, Tensor::from_vec(&[m, n], da).unwrap())]
        })
    }

    /// Extracts one column of a 2D tensor as a `[m]` vector.
    pub fn take_col(&mut self, a: Var, j: usize) -> Var {
        let (m, n) = dims2(self.value(a));
        assert!(j < n, "take_col column {j} out of {n}");
        let av = self.value(a).data();
        let data: Vec<T> = (0..m).map(|i| av[i * n + j]).collect();
        let out = Tensor::from_vec(&[m], data).unwrap();
        self.push_op(out, &[a], move |_, g| {
            let gv = g.data();
            let mut da = vec![T::zero(); m * n];
            for i in 0..m {
                da[i * n + j] = gv[i];
            }
            vec![(a, Tensor::from_vec(&[m, n], da).unwrap())]
        })
    }

    /// Numerically stable `log(sum(exp(row)))` per row of an `[m, n]` tensor.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let (m, n) = dims2(self.value(a));
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mut mx = T::neg_infinity();
            for &x in row {
                if x > mx {
                    mx = x;
                }
            }
            let mut s = T::zero();
            for &x in row {
                s = s + (x - mx).exp();
            }
            out.push(mx + s.ln());
        }
        let out = Tensor::from_vec(&[m], out).unwrap();
        let out_idx = self.len();
        self.push_op(out, &[a], move |t, g| {
            let av = t.value(a).data();
            let y = t.nodes[out_idx].value.data();
            let gv = g.data();
            let mut da = vec![T::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    da[i * n + j] = gv[i] * (av[i * n + j] - y[i]).exp();
                }
            }
            vec![(a, Tensor::from_vec(&[m, n], da).unwrap())]
        })
    }

    /// Pairwise cosine similarity between rows of `a [m,f]` and rows of `b [q,f]`.
    ///
    /// Vectors are used unnormalised; norms are floored at a tiny epsilon to
    /// keep the value defined for near-zero vectors.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Var {
        let (m, f) = dims2(self.value(a));
        let (q, f2) = dims2(self.value(b));
        assert_eq!(f, f2, "cosine_rows feature dims");
        let eps = T::from_f64c(1e-30);
        let norms = move |data: &[T], rows: usize| -> Vec<T> {
            (0..rows)
                .map(|i| {
                    let r = &data[i * f..(i + 1) * f];
                    let mut s = T::zero();
                    for &x in r {
                        s = s + x * x;
                    }
                    s.sqrt().max(eps)
                })
                .collect()
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let na = norms(av, m);
        let nb = norms(bv, q);
        let mut out = vec![T::zero(); m * q];
        for i in 0..m {
            let ar = &av[i * f..(i + 1) * f];
            for j in 0..q {
                let br = &bv[j * f..(j + 1) * f];
                let mut dot = T::zero();
                for (&x, &y) in ar.iter().zip(br.iter()) {
                    dot = dot + x * y;
                }
                out[i * q + j] = dot / (na[i] * nb[j]);
            }
        }
        let out = Tensor::from_vec(&[m, q], out).unwrap();
        let out_idx = self.len();
        self.push_op(out, &[a, b], move |t, g| {
            let av = t.value(a).data();
            let bv = t.value(b).data();
            let cos = t.nodes[out_idx].value.data();
            let na = norms(av, m);
            let nb = norms(bv, q);
            let gv = g.data();
            let mut da = vec![T::zero(); m * f];
            let mut db = vec![T::zero(); q * f];
            for i in 0..m {
                let ar = &av[i * f..(i + 1) * f];
                for j in 0..q {
                    let gij = gv[i * q + j];
                    if gij == T::zero() {
                        continue;
                    }
                    let br = &bv[j * f..(j + 1) * f];
                    let c = cos[i * q + j];
                    let inv = T::one() / (na[i] * nb[j]);
                    let ia2 = T::one() / (na[i] * na[i]);
                    let ib2 = T::one() / (nb[j] * nb[j]);
                    for k in 0..f {
                        da[i * f + k] = da[i * f + k] + gij * (br[k] * inv - c * ar[k] * ia2);
                        db[j * f + k] = db[j * f + k] + gij * (ar[k] * inv - c * br[k] * ib2);
                    }
                }
            }
            vec![
                (a, Tensor::from_vec(&[m, f], da).unwrap()),
                (b, Tensor::from_vec(&[q, f], db).unwrap()),
            ]
        })
    }
}
