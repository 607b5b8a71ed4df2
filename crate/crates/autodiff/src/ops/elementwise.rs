use crate::element::Element;
use crate::error::{invalid, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{numel, strides, Tensor};

/// Numpy-style broadcast of two shapes, aligned on trailing axes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out_shape`, the linear offset of the element of
/// `in_shape` it broadcasts from.
pub(crate) fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let n = out_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0usize; n];
    for i in 0..in_shape.len() {
        let o = n - in_shape.len() + i;
        eff[o] = if in_shape[i] == 1 { 0 } else { in_strides[i] };
    }
    let total = numel(out_shape);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

/// Sum `grad` (shaped like the broadcast output) back onto `in_shape`.
pub(crate) fn reduce_to<T: Element>(grad: &[T], out_shape: &[usize], in_shape: &[usize]) -> Tensor<T> {
    let mut acc = Tensor::zeros(in_shape);
    if out_shape == in_shape {
        acc.data_mut().copy_from_slice(grad);
        return acc;
    }
    let offsets = broadcast_offsets(out_shape, in_shape);
    let dst = acc.data_mut();
    for (g, &o) in grad.iter().zip(&offsets) {
        dst[o] = dst[o] + *g;
    }
    acc
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }

    fn apply<T: Element>(self, a: T, b: T) -> T {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }
}

impl<T: Element> Tape<T> {
    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let Some(out_shape) = broadcast_shape(&sa, &sb) else {
            invalid!("{}: cannot broadcast {sa:?} with {sb:?}", op.name());
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| op.apply(x, y)).collect()
        } else {
            let oa = broadcast_offsets(&out_shape, &sa);
            let ob = broadcast_offsets(&out_shape, &sb);
            oa.iter().zip(&ob).map(|(&i, &j)| op.apply(va[i], vb[j])).collect()
        };
        let value = Tensor::from_vec(&out_shape, data)?;
        let os = out_shape.clone();
        self.push(
            op.name(),
            value,
            &[a, b],
            Box::new(move |args| {
                let (x, y) = (args.inputs[0], args.inputs[1]);
                let g = args.grad.data();
                let same = x.shape() == y.shape();
                let (ox, oy) = if same {
                    (Vec::new(), Vec::new())
                } else {
                    (broadcast_offsets(&os, x.shape()), broadcast_offsets(&os, y.shape()))
                };
                let xv = |i: usize| if same { x.data()[i] } else { x.data()[ox[i]] };
                let yv = |i: usize| if same { y.data()[i] } else { y.data()[oy[i]] };
                let n = g.len();
                let ga: Option<Vec<T>> = args.needs[0].then(|| match op {
                    BinOp::Add | BinOp::Sub => g.to_vec(),
                    BinOp::Mul => (0..n).map(|i| g[i] * yv(i)).collect(),
                    BinOp::Div => (0..n).map(|i| g[i] / yv(i)).collect(),
                });
                let gb: Option<Vec<T>> = args.needs[1].then(|| match op {
                    BinOp::Add => g.to_vec(),
                    BinOp::Sub => g.iter().map(|&v| -v).collect(),
                    BinOp::Mul => (0..n).map(|i| g[i] * xv(i)).collect(),
                    BinOp::Div => (0..n)
                        .map(|i| {
                            let d = yv(i);
                            -g[i] * xv(i) / (d * d)
                        })
                        .collect(),
                });
                vec![
                    ga.map(|v| reduce_to(&v, &os, x.shape())),
                    gb.map(|v| reduce_to(&v, &os, y.shape())),
                ]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    /// Elementwise map whose derivative is expressed through input and output.
    fn unary(
        &mut self,
        op: &'static str,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(
            op,
            value,
            &[x],
            Box::new(move |args| {
                let (xi, yo, g) = (args.inputs[0].data(), args.output.data(), args.grad.data());
                let data = (0..g.len()).map(|i| g[i] * df(xi[i], yo[i])).collect();
                vec![Some(Tensor::from_vec(args.grad.shape(), data).expect("same shape"))]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(
            "relu",
            x,
            |v| v.max(T::zero()),
            |v, _| if v > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), |_, y| y)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary("ln", x, |v| v.ln(), |v, _| T::one() / v)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let half = T::from_f64_lossy(0.5);
        self.unary("sqrt", x, |v| v.sqrt(), move |_, y| half / y)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(
            "softplus",
            x,
            |v| v.max(T::zero()) + (-v.abs()).exp().ln_1p(),
            |v, _| sigmoid(v),
        )
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        let pe = T::from_f64_lossy(p);
        let pm1 = T::from_f64_lossy(p - 1.0);
        self.unary("powf", x, move |v| v.powf(pe), move |v, _| pe * v.powf(pm1))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary("neg", x, |v| -v, |_, _| -T::one())
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        self.unary("scale", x, move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        self.unary("add_scalar", x, move |v| v + c, |_, _| T::one())
    }

    /// `c - x`.
    pub fn rsub_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        self.unary("rsub_scalar", x, move |v| c - v, |_, _| -T::one())
    }
}

pub fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
