//! Segmentation-network blocks: EnBlock, MTBlock, SSM, UTrans, UpBlock.

use stpnet_autodiff::{Attention, Conv2dSpec, Element, Graph, ParamId, ParamStore, Tensor, UpsampleMode, Var};

use crate::error::{invalid, Result};
use crate::nn::{BatchNorm, Conv, ConvBnRelu, LayerNorm, Linear};

/// Two resolution-preserving conv-BN-ReLU layers.
#[derive(Clone, Debug)]
pub struct EnBlock {
    a: ConvBnRelu,
    b: ConvBnRelu,
    cin: usize,
}

impl EnBlock {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            a: ConvBnRelu::new(store, &format!("{name}.a"), cin, cout),
            b: ConvBnRelu::new(store, &format!("{name}.b"), cout, cout),
            cin,
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.tape.shape(x);
        if s.len() != 4 || s[1] != self.cin {
            invalid!("EnBlock expects [B, {}, H, W], got {s:?}", self.cin);
        }
        let y = self.a.forward(g, x)?;
        self.b.forward(g, y)
    }
}

/// Scalar mean of a text feature over tokens and channels.
pub fn text_mean<T: Element>(text: &Tensor<T>) -> T {
    text.sum() / T::from_usize(text.numel()).expect("size fits")
}

/// Appends a constant channel holding each sample's text mean, then
/// maxpool, batch norm, 3x3 conv and ReLU in that order.
#[derive(Clone, Debug)]
pub struct MtBlock {
    bn: BatchNorm,
    conv: Conv,
    cin: usize,
}

impl MtBlock {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            bn: BatchNorm::new(store, &format!("{name}.bn"), cin + 1),
            conv: Conv::new(store, &format!("{name}.conv"), cin + 1, cout, 3, Conv2dSpec::same3x3(1), true),
            cin,
        }
    }

    /// `means[b]` is the text mean for sample `b`.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var, means: &[T]) -> Result<Var> {
        let s = g.tape.shape(x).to_vec();
        let &[b, c, h, w] = s.as_slice() else { invalid!("MTBlock expects a 4-D input, got {s:?}") };
        if c != self.cin || means.len() != b {
            invalid!("MTBlock expects {} channels and {b} text means, got {c} and {}", self.cin, means.len());
        }
        if h % 2 != 0 || w % 2 != 0 {
            invalid!("MTBlock needs even spatial dims, got {h}x{w}");
        }
        let plane = h * w;
        let data = means.iter().flat_map(|&m| std::iter::repeat(m).take(plane)).collect();
        let text = g.tape.constant(Tensor::from_vec(&[b, 1, h, w], data)?)?;
        let y = g.tape.concat(&[x, text], 1)?;
        let y = g.tape.maxpool2d(y, 2)?;
        let y = self.bn.forward(g, y)?;
        let y = self.conv.forward(g, y)?;
        Ok(g.tape.relu(y)?)
    }
}

/// Spatial scale-aware module: a sigmoid spatial gate and a multi-dilation
/// branch, fused by a zero-initialized 1x1 conv onto a residual path.
#[derive(Clone, Debug)]
pub struct Ssm {
    proj_in: Conv,
    gate_dw: Conv,
    gate_pw: Conv,
    dilated: Vec<Conv>,
    ms_dw: Conv,
    pub proj_out: Conv,
}

impl Ssm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, c: usize, dilations: &[usize]) -> Self {
        let pw = Conv2dSpec::default();
        let dw = Conv2dSpec::same3x3(1).with_groups(c);
        Self {
            proj_in: Conv::new(store, &format!("{name}.proj_in"), c, c, 1, pw, true),
            gate_dw: Conv::new(store, &format!("{name}.gate_dw"), c, c, 3, dw, true),
            gate_pw: Conv::new(store, &format!("{name}.gate_pw"), c, c, 1, pw, true),
            dilated: dilations
                .iter()
                .map(|&d| Conv::new(store, &format!("{name}.dil{d}"), c, c, 3, Conv2dSpec::same3x3(d), true))
                .collect(),
            ms_dw: Conv::new(store, &format!("{name}.ms_dw"), c, c, 3, dw, true),
            proj_out: Conv::zeroed(store, &format!("{name}.proj_out"), 2 * c, c),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let xp = self.proj_in.forward(g, x)?;
        // spatial gate
        let a = self.gate_dw.forward(g, xp)?;
        let a = self.gate_pw.forward(g, a)?;
        let a = g.tape.sigmoid(a)?;
        let f_sp = g.tape.mul(xp, a)?;
        // multi-scale branch
        let mut f_msa = self.dilated[0].forward(g, xp)?;
        for conv in &self.dilated[1..] {
            let y = conv.forward(g, xp)?;
            f_msa = g.tape.add(f_msa, y)?;
        }
        let m = self.ms_dw.forward(g, f_msa)?;
        let f_ms = g.tape.mul(xp, m)?;
        let cat = g.tape.concat(&[f_sp, f_ms], 1)?;
        let out = self.proj_out.forward(g, cat)?;
        Ok(g.tape.add(x, out)?)
    }
}

/// Transformer block over image tokens joined with projected text tokens;
/// only the image tokens are kept after attention.
#[derive(Clone, Debug)]
pub struct UTrans {
    pos: ParamId,
    text_proj: Linear,
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    heads: usize,
    c: usize,
    side: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct UTransOutput {
    pub output: Var,
    /// `[B * heads, N + M, N + M]`.
    pub weights: Var,
}

impl UTrans {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        side: usize,
        d_text: usize,
        heads: usize,
        ffn_ratio: usize,
    ) -> Self {
        let l = |s: &mut ParamStore<T>, n: &str, i, o| Linear::new(s, &format!("{name}.{n}"), i, o);
        Self {
            pos: store.uniform(format!("{name}.pos"), &[side * side, c], 0.02),
            text_proj: l(store, "text_proj", d_text, c),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), c),
            q: l(store, "q", c, c),
            k: l(store, "k", c, c),
            v: l(store, "v", c, c),
            o: l(store, "o", c, c),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), c),
            ff1: l(store, "ff1", c, ffn_ratio * c),
            ff2: l(store, "ff2", ffn_ratio * c, c),
            heads,
            c,
            side,
        }
    }

    /// `x` is `[B, C, H, W]`; `text`, when given, is `[B, M, D]`.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var, text: Option<Var>) -> Result<UTransOutput> {
        let s = g.tape.shape(x).to_vec();
        let &[b, c, h, w] = s.as_slice() else { invalid!("UTrans expects a 4-D input, got {s:?}") };
        if c != self.c || h != self.side || w != self.side {
            invalid!("UTrans built for [_, {}, {side}, {side}], got {s:?}", self.c, side = self.side);
        }
        let n = h * w;
        let t = g.tape.permute(x, &[0, 2, 3, 1])?;
        let t = g.tape.reshape(t, &[b, n, c])?;
        let pos = g.param(self.pos)?;
        let img = g.tape.add(t, pos)?;
        let seq = match text {
            Some(text) => {
                let tt = self.text_proj.forward(g, text)?;
                g.tape.concat(&[img, tt], 1)?
            }
            None => img,
        };
        let xn = self.ln1.forward(g, seq)?;
        let q = self.q.forward(g, xn)?;
        let k = self.k.forward(g, xn)?;
        let v = self.v.forward(g, xn)?;
        let Attention { output, weights } = g.tape.scaled_dot_attention(q, k, v, self.heads)?;
        let att = self.o.forward(g, output)?;
        let att_img = g.tape.slice(att, 1, 0, n)?;
        let z = g.tape.add(img, att_img)?;
        let zn = self.ln2.forward(g, z)?;
        let f = self.ff1.forward(g, zn)?;
        let f = g.tape.relu(f)?;
        let f = self.ff2.forward(g, f)?;
        let z = g.tape.add(z, f)?;
        let z = g.tape.reshape(z, &[b, h, w, c])?;
        let output = g.tape.permute(z, &[0, 3, 1, 2])?;
        Ok(UTransOutput { output, weights })
    }
}

/// Bilinear 2x upsample, concat with the skip, two conv-BN-ReLU layers.
#[derive(Clone, Debug)]
pub struct UpBlock {
    a: ConvBnRelu,
    b: ConvBnRelu,
}

impl UpBlock {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, cin: usize, cskip: usize, cout: usize) -> Self {
        Self {
            a: ConvBnRelu::new(store, &format!("{name}.a"), cin + cskip, cout),
            b: ConvBnRelu::new(store, &format!("{name}.b"), cout, cout),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var, skip: Var) -> Result<Var> {
        let (xs, ss) = (g.tape.shape(x).to_vec(), g.tape.shape(skip).to_vec());
        if xs.len() != 4 || ss.len() != 4 || ss[0] != xs[0] || ss[2] != 2 * xs[2] || ss[3] != 2 * xs[3] {
            invalid!("UpBlock skip {ss:?} must have twice the spatial size of {xs:?}");
        }
        let up = g.tape.upsample2x(x, UpsampleMode::Bilinear)?;
        let cat = g.tape.concat(&[up, skip], 1)?;
        let y = self.a.forward(g, cat)?;
        self.b.forward(g, y)
    }
}
