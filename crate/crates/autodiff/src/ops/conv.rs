//! 2-D convolution with stride, zero padding, dilation and groups.
//!
//! Lowered to GEMMs over im2col tiles of a few output rows, holding only the
//! kernel taps able to touch the input. Large dilations on small maps
//! therefore collapse to the centre tap instead of multiplying zeros.
//! Depthwise convolutions take a direct loop.

use crate::element::{gemm, Element, MatMut, MatRef};
use crate::error::{invalid, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1, groups: 1 }
    }
}

impl Conv2dSpec {
    /// Stride-1 3x3 convolution that preserves spatial size at `dilation`.
    pub fn same3x3(dilation: usize) -> Self {
        Self { stride: 1, padding: dilation, dilation, groups: 1 }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

/// Column-buffer elements per tile. Weight gradients reduce over the tile, so
/// they prefer a longer one.
const FORWARD_TILE: usize = 1 << 16;
const WEIGHT_GRAD_TILE: usize = 1 << 16;

/// Kernel tap with the output ranges whose receptive sample lies inside the input.
#[derive(Clone, Copy, Debug)]
struct Tap {
    ki: usize,
    kj: usize,
    rows: (usize, usize),
    cols: (usize, usize),
}

#[derive(Clone, Debug)]
struct Geom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
    spec: Conv2dSpec,
    taps: Vec<Tap>,
}

fn valid_range(out: usize, input: usize, k: usize, spec: &Conv2dSpec) -> (usize, usize) {
    let inside = |o: usize| {
        let pos = (o * spec.stride + k * spec.dilation) as isize - spec.padding as isize;
        pos >= 0 && (pos as usize) < input
    };
    match (0..out).find(|&o| inside(o)) {
        Some(lo) => {
            let hi = (lo..out).rev().find(|&o| inside(o)).expect("lo is inside") + 1;
            (lo, hi)
        }
        None => (0, 0),
    }
}

impl Geom {
    fn new(xs: &[usize], ws: &[usize], spec: Conv2dSpec) -> Result<Self> {
        let &[batch, cin, h, w] = xs else { invalid!("conv2d: input must be [B,C,H,W], got {xs:?}") };
        let &[cout, cin_g, kh, kw] = ws else { invalid!("conv2d: weight must be 4-D, got {ws:?}") };
        if spec.stride == 0 || spec.dilation == 0 || spec.groups == 0 {
            invalid!("conv2d: stride, dilation and groups must be positive: {spec:?}");
        }
        let groups = spec.groups;
        if cin % groups != 0 || cout % groups != 0 {
            invalid!("conv2d: channels {cin}->{cout} not divisible by groups {groups}");
        }
        if cin_g != cin / groups {
            invalid!("conv2d: weight expects {cin_g} input channels per group, input has {}", cin / groups);
        }
        let (Some(ho), Some(wo)) = (spec.output_size(h, kh), spec.output_size(w, kw)) else {
            invalid!("conv2d: {h}x{w} input too small for {kh}x{kw} kernel at {spec:?}");
        };
        let mut taps = Vec::new();
        for ki in 0..kh {
            let rows = valid_range(ho, h, ki, &spec);
            if rows.0 == rows.1 {
                continue;
            }
            for kj in 0..kw {
                let cols = valid_range(wo, w, kj, &spec);
                if cols.0 < cols.1 {
                    taps.push(Tap { ki, kj, rows, cols });
                }
            }
        }
        Ok(Self { batch, cin, h, w, cout, kh, kw, ho, wo, groups, cin_g, cout_g: cout / groups, spec, taps })
    }

    fn plane_out(&self) -> usize {
        self.ho * self.wo
    }

    fn k(&self) -> usize {
        self.cin_g * self.taps.len()
    }

    fn depthwise(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }

    fn src(&self, o: usize, k: usize) -> usize {
        o * self.spec.stride + k * self.spec.dilation - self.spec.padding
    }

    /// Weight columns used by group `g`, laid out `[cout_g, cin_g * taps]`.
    fn gather_weights<T: Element>(&self, w: &[T], g: usize) -> Vec<T> {
        let nt = self.taps.len();
        let mut out = vec![T::zero(); self.cout_g * self.k()];
        for o in 0..self.cout_g {
            for c in 0..self.cin_g {
                for (t, tap) in self.taps.iter().enumerate() {
                    out[o * self.k() + c * nt + t] =
                        w[(((g * self.cout_g + o) * self.cin_g + c) * self.kh + tap.ki) * self.kw + tap.kj];
                }
            }
        }
        out
    }

    fn scatter_weights<T: Element>(&self, sub: &[T], g: usize, dw: &mut [T]) {
        let nt = self.taps.len();
        for o in 0..self.cout_g {
            for c in 0..self.cin_g {
                for (t, tap) in self.taps.iter().enumerate() {
                    let at = (((g * self.cout_g + o) * self.cin_g + c) * self.kh + tap.ki) * self.kw + tap.kj;
                    dw[at] = dw[at] + sub[o * self.k() + c * nt + t];
                }
            }
        }
    }

    /// Fill `col` (`[cin_g * taps, (r1 - r0) * wo]`) with output rows
    /// `r0..r1` of one group of one sample. Entries outside the valid ranges
    /// are left untouched and must be zero.
    fn im2col<T: Element>(&self, x: &[T], col: &mut [T], r0: usize, r1: usize) {
        let (nt, ld) = (self.taps.len(), (r1 - r0) * self.wo);
        for c in 0..self.cin_g {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for (t, tap) in self.taps.iter().enumerate() {
                let row0 = (c * nt + t) * ld;
                for oy in tap.rows.0.max(r0)..tap.rows.1.min(r1) {
                    let iy = self.src(oy, tap.ki);
                    let src_row = &plane[iy * self.w..(iy + 1) * self.w];
                    let at = row0 + (oy - r0) * self.wo;
                    let dst = &mut col[at..at + self.wo];
                    if self.spec.stride == 1 {
                        let ix0 = self.src(tap.cols.0, tap.kj);
                        let n = tap.cols.1 - tap.cols.0;
                        dst[tap.cols.0..tap.cols.1].copy_from_slice(&src_row[ix0..ix0 + n]);
                    } else {
                        for ox in tap.cols.0..tap.cols.1 {
                            dst[ox] = src_row[self.src(ox, tap.kj)];
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Element>(&self, col: &[T], r0: usize, r1: usize, dx: &mut [T]) {
        let (nt, ld) = (self.taps.len(), (r1 - r0) * self.wo);
        for c in 0..self.cin_g {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for (t, tap) in self.taps.iter().enumerate() {
                let row0 = (c * nt + t) * ld;
                for oy in tap.rows.0.max(r0)..tap.rows.1.min(r1) {
                    let iy = self.src(oy, tap.ki);
                    let at = row0 + (oy - r0) * self.wo;
                    let row = &col[at..at + self.wo];
                    for ox in tap.cols.0..tap.cols.1 {
                        let d = &mut plane[iy * self.w + self.src(ox, tap.kj)];
                        *d = *d + row[ox];
                    }
                }
            }
        }
    }

    /// Tiles over the batch-flattened output rows, as `(sample, r0, r1)`
    /// segments. A tile's column buffer stays near cache size unless the
    /// weights are larger, in which case it grows to amortize their packing.
    fn tiles(&self, budget: usize) -> Vec<Vec<(usize, usize, usize)>> {
        let row_cost = (self.k() * self.wo).max(1);
        let per = (budget.max(2 * self.cout_g * self.k()) / row_cost).max(1);
        let mut tiles = Vec::new();
        let mut cur = Vec::new();
        let mut filled = 0;
        for n in 0..self.batch {
            let mut r0 = 0;
            while r0 < self.ho {
                let r1 = (r0 + per - filled).min(self.ho);
                cur.push((n, r0, r1));
                filled += r1 - r0;
                r0 = r1;
                if filled == per {
                    tiles.push(std::mem::take(&mut cur));
                    filled = 0;
                }
            }
        }
        if !cur.is_empty() {
            tiles.push(cur);
        }
        tiles
    }

    fn tile_len(&self, tile: &[(usize, usize, usize)]) -> usize {
        tile.iter().map(|&(_, r0, r1)| (r1 - r0) * self.wo).sum()
    }

    /// Column buffer `[k, len]` of group `gi` over a tile.
    fn tile_cols<T: Element>(&self, x: &[T], gi: usize, tile: &[(usize, usize, usize)], col: &mut Vec<T>, seg: &mut Vec<T>) {
        let plane_in = self.h * self.w;
        let (k, len) = (self.k(), self.tile_len(tile));
        col.clear();
        col.resize(k * len, T::zero());
        let mut off = 0;
        for &(n, r0, r1) in tile {
            let x0 = (n * self.cin + gi * self.cin_g) * plane_in;
            let xs = &x[x0..x0 + self.cin_g * plane_in];
            let sl = (r1 - r0) * self.wo;
            if tile.len() == 1 {
                self.im2col(xs, col, r0, r1);
                return;
            }
            seg.clear();
            seg.resize(k * sl, T::zero());
            self.im2col(xs, seg, r0, r1);
            for r in 0..k {
                col[r * len + off..r * len + off + sl].copy_from_slice(&seg[r * sl..(r + 1) * sl]);
            }
            off += sl;
        }
    }

    /// Copies between an output-shaped buffer and a `[cout_g, len]` tile.
    fn tile_out<T: Element>(&self, buf: &mut [T], tmp: &mut [T], gi: usize, tile: &[(usize, usize, usize)], to_buf: bool) {
        let (p, len) = (self.plane_out(), self.tile_len(tile));
        let mut off = 0;
        for &(n, r0, r1) in tile {
            let sl = (r1 - r0) * self.wo;
            for o in 0..self.cout_g {
                let at = (n * self.cout + gi * self.cout_g + o) * p + r0 * self.wo;
                let t = &mut tmp[o * len + off..o * len + off + sl];
                if to_buf {
                    buf[at..at + sl].copy_from_slice(t);
                } else {
                    t.copy_from_slice(&buf[at..at + sl]);
                }
            }
            off += sl;
        }
    }
}

fn forward<T: Element>(geom: &Geom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let g = geom;
    let (p, plane_in) = (g.plane_out(), g.h * g.w);
    let mut out = vec![T::zero(); g.batch * g.cout * p];
    if g.depthwise() {
        for n in 0..g.batch {
            for c in 0..g.cout {
                let xin = &x[(n * g.cin + c) * plane_in..(n * g.cin + c + 1) * plane_in];
                let dst = &mut out[(n * g.cout + c) * p..(n * g.cout + c + 1) * p];
                for tap in &g.taps {
                    let wv = w[(c * g.kh + tap.ki) * g.kw + tap.kj];
                    for oy in tap.rows.0..tap.rows.1 {
                        let iy = g.src(oy, tap.ki);
                        if g.spec.stride == 1 {
                            let ix0 = g.src(tap.cols.0, tap.kj);
                            let n = tap.cols.1 - tap.cols.0;
                            let d = &mut dst[oy * g.wo + tap.cols.0..oy * g.wo + tap.cols.1];
                            for (d, &xv) in d.iter_mut().zip(&xin[iy * g.w + ix0..iy * g.w + ix0 + n]) {
                                *d = *d + wv * xv;
                            }
                            continue;
                        }
                        for ox in tap.cols.0..tap.cols.1 {
                            let ix = g.src(ox, tap.kj);
                            dst[oy * g.wo + ox] = dst[oy * g.wo + ox] + wv * xin[iy * g.w + ix];
                        }
                    }
                }
            }
        }
    } else {
        let k = g.k();
        let (mut col, mut seg, mut tmp) = (Vec::new(), Vec::new(), Vec::new());
        let tiles = g.tiles(FORWARD_TILE);
        for gi in 0..g.groups {
            let wsub = g.gather_weights(w, gi);
            let wref = MatRef::new(&wsub, g.cout_g, k);
            for tile in &tiles {
                let len = g.tile_len(tile);
                g.tile_cols(x, gi, tile, &mut col, &mut seg);
                tmp.clear();
                tmp.resize(g.cout_g * len, T::zero());
                gemm(T::one(), wref, MatRef::new(&col, k, len), T::zero(), MatMut::new(&mut tmp, g.cout_g, len));
                g.tile_out(&mut out, &mut tmp, gi, tile, true);
            }
        }
    }
    if let Some(b) = bias {
        for n in 0..g.batch {
            for (c, &bv) in b.iter().enumerate() {
                out[(n * g.cout + c) * p..(n * g.cout + c + 1) * p].iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    out
}

/// Returns `(dx, dw)`; each only when requested.
fn backward<T: Element>(
    geom: &Geom,
    x: &[T],
    w: &[T],
    grad: &[T],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let g = geom;
    let (p, plane_in) = (g.plane_out(), g.h * g.w);
    let mut dx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_w.then(|| vec![T::zero(); w.len()]);
    if g.depthwise() {
        for n in 0..g.batch {
            for c in 0..g.cout {
                let xin = &x[(n * g.cin + c) * plane_in..(n * g.cin + c + 1) * plane_in];
                let gout = &grad[(n * g.cout + c) * p..(n * g.cout + c + 1) * p];
                for tap in &g.taps {
                    let wi = (c * g.kh + tap.ki) * g.kw + tap.kj;
                    let wv = w[wi];
                    let mut acc = T::zero();
                    for oy in tap.rows.0..tap.rows.1 {
                        let iy = g.src(oy, tap.ki);
                        if g.spec.stride == 1 {
                            let ix0 = g.src(tap.cols.0, tap.kj);
                            let n_ = tap.cols.1 - tap.cols.0;
                            let gs = &gout[oy * g.wo + tap.cols.0..oy * g.wo + tap.cols.1];
                            let xs = &xin[iy * g.w + ix0..iy * g.w + ix0 + n_];
                            acc = gs.iter().zip(xs).fold(acc, |a, (&gv, &xv)| a + gv * xv);
                            if let Some(dx) = dx.as_mut() {
                                let at = (n * g.cin + c) * plane_in + iy * g.w + ix0;
                                for (d, &gv) in dx[at..at + n_].iter_mut().zip(gs) {
                                    *d = *d + wv * gv;
                                }
                            }
                            continue;
                        }
                        for ox in tap.cols.0..tap.cols.1 {
                            let ix = g.src(ox, tap.kj);
                            let gv = gout[oy * g.wo + ox];
                            acc = acc + gv * xin[iy * g.w + ix];
                            if let Some(dx) = dx.as_mut() {
                                let d = &mut dx[(n * g.cin + c) * plane_in + iy * g.w + ix];
                                *d = *d + wv * gv;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[wi] = dw[wi] + acc;
                    }
                }
            }
        }
        return (dx, dw);
    }

    // Stride-1 input gradients are themselves a convolution of the output
    // gradient with the flipped, transposed kernel; that GEMM has a much
    // deeper inner dimension than the im2col adjoint.
    let flipped = need_x && g.spec.stride == 1 && g.spec.padding <= g.spec.dilation * (g.kh.max(g.kw) - 1)
        && g.kh == g.kw;
    if flipped {
        let pad = g.spec.dilation * (g.kh - 1) - g.spec.padding;
        let spec = Conv2dSpec { stride: 1, padding: pad, dilation: g.spec.dilation, groups: g.groups };
        let gt = Geom::new(&[g.batch, g.cout, g.ho, g.wo], &[g.cin, g.cout_g, g.kh, g.kw], spec)
            .expect("adjoint geometry is valid");
        debug_assert_eq!((gt.ho, gt.wo), (g.h, g.w));
        let mut wt = vec![T::zero(); w.len()];
        for gi in 0..g.groups {
            for o in 0..g.cout_g {
                for c in 0..g.cin_g {
                    for ki in 0..g.kh {
                        for kj in 0..g.kw {
                            let src = (((gi * g.cout_g + o) * g.cin_g + c) * g.kh + ki) * g.kw + kj;
                            let dst = (((gi * g.cin_g + c) * g.cout_g + o) * g.kh + (g.kh - 1 - ki)) * g.kw + (g.kw - 1 - kj);
                            wt[dst] = w[src];
                        }
                    }
                }
            }
        }
        dx = Some(forward(&gt, grad, &wt, None));
    }

    let k = g.k();
    let (mut col, mut seg, mut gtmp, mut dcol) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut grad_buf = grad.to_vec();
    let tiles = g.tiles(if need_w { WEIGHT_GRAD_TILE } else { FORWARD_TILE });
    for gi in 0..g.groups {
        let wsub = g.gather_weights(w, gi);
        let mut dsub = vec![T::zero(); if need_w { g.cout_g * k } else { 0 }];
        for tile in &tiles {
            let len = g.tile_len(tile);
            gtmp.clear();
            gtmp.resize(g.cout_g * len, T::zero());
            g.tile_out(&mut grad_buf, &mut gtmp, gi, tile, false);
            let gref = MatRef::new(&gtmp, g.cout_g, len);
            if need_w {
                g.tile_cols(x, gi, tile, &mut col, &mut seg);
                // accumulate dW^T = col gout^T; dsub is [cout_g, k] so view it transposed
                gemm(T::one(), MatRef::new(&col, k, len), gref.t(), T::one(), MatMut::new(&mut dsub, g.cout_g, k).t());
            }
            if let (false, Some(dx)) = (flipped, dx.as_mut()) {
                dcol.clear();
                dcol.resize(k * len, T::zero());
                gemm(T::one(), MatRef::new(&wsub, g.cout_g, k).t(), gref, T::zero(), MatMut::new(&mut dcol, k, len));
                let mut off = 0;
                for &(n, r0, r1) in tile {
                    let sl = (r1 - r0) * g.wo;
                    seg.clear();
                    seg.resize(k * sl, T::zero());
                    for r in 0..k {
                        seg[r * sl..(r + 1) * sl].copy_from_slice(&dcol[r * len + off..r * len + off + sl]);
                    }
                    let x0 = (n * g.cin + gi * g.cin_g) * plane_in;
                    g.col2im(&seg, r0, r1, &mut dx[x0..x0 + g.cin_g * plane_in]);
                    off += sl;
                }
            }
        }
        if let Some(dw) = dw.as_mut() {
            g.scatter_weights(&dsub, gi, dw);
        }
    }
    (dx, dw)
}

impl<T: Element> Tape<T> {
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let geom = Geom::new(self.shape(x), self.shape(w), spec)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                invalid!("conv2d: bias {:?} != [{}]", self.shape(b), geom.cout);
            }
        }
        let out = forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        );
        let out_shape = [geom.batch, geom.cout, geom.ho, geom.wo];
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push(
            "conv2d",
            Tensor::from_vec(&out_shape, out)?,
            &parents,
            Box::new(move |args| {
                let (xv, wv, g) = (args.inputs[0], args.inputs[1], args.grad.data());
                let (dx, dw) = backward(&geom, xv.data(), wv.data(), g, args.needs[0], args.needs[1]);
                let mut grads = vec![
                    dx.map(|d| Tensor::from_vec(xv.shape(), d).expect("x shape")),
                    dw.map(|d| Tensor::from_vec(wv.shape(), d).expect("w shape")),
                ];
                if args.inputs.len() == 3 {
                    grads.push(args.needs[2].then(|| {
                        let p = geom.plane_out();
                        let mut db = vec![T::zero(); geom.cout];
                        for n in 0..geom.batch {
                            for (c, acc) in db.iter_mut().enumerate() {
                                let s = &g[(n * geom.cout + c) * p..(n * geom.cout + c + 1) * p];
                                *acc = *acc + s.iter().fold(T::zero(), |a, &v| a + v);
                            }
                        }
                        Tensor::from_vec(&[geom.cout], db).expect("bias shape")
                    }));
                }
                grads
            }),
        )
    }
}
