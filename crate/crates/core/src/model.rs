//! Full network: retrieval encoder, focal heads and the U-shaped
//! segmentation network, plus the end-to-end forward and loss.

use stpnet_autodiff::{Conv2dSpec, Element, Graph, ParamStore, Tensor, Var};

use crate::blocks::{text_mean, EnBlock, MtBlock, Ssm, UTrans, UpBlock};
use crate::error::{invalid, Error, Result};
use crate::losses::{focal_loss, mix_loss, retrieval_loss, seg_loss, Lambdas, LossReport};
use crate::nn::{Conv, Linear};
use crate::retrieval::{recombine_features, retrieve, LocOrder, RetrievalConfig, RetrievalEncoder, RetrievalResult};
use crate::synthgen::Labels;
use crate::textbank::{Category, Domain, EncodedBank, TextBank, TextEncoder, TextFeature};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StpnetConfig {
    pub in_channels: usize,
    /// EnBlock width, then the output width of stages 1..4.
    pub base_channels: [usize; 5],
    pub image_size: usize,
    pub text_len: usize,
    pub text_dim: usize,
    pub domain: Domain,
    /// Seed of the frozen token table; kept apart from `seed` so every run
    /// sees the same bank.
    pub text_seed: u64,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub dilations: [usize; 3],
    /// Stages (1-based) that carry a UTrans block.
    pub utrans_stages: Vec<usize>,
    pub tau: f64,
    pub gamma: f64,
    pub lambdas: Lambdas,
    pub retrieval: RetrievalConfig,
    pub seed: u64,
}

impl Default for StpnetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: [16, 32, 64, 128, 256],
            image_size: 64,
            text_len: crate::textbank::DEFAULT_L,
            text_dim: crate::textbank::DEFAULT_D,
            domain: Domain::Lung,
            text_seed: 0,
            heads: 4,
            ffn_ratio: 4,
            dilations: [6, 12, 18],
            utrans_stages: vec![2, 3, 4],
            tau: crate::retrieval::DEFAULT_TAU,
            gamma: 2.0,
            lambdas: Lambdas::default(),
            retrieval: RetrievalConfig::default(),
            seed: 0,
        }
    }
}

impl StpnetConfig {
    /// 32x32 inputs and narrow layers, for finite-difference checks.
    pub fn reduced() -> Self {
        Self {
            base_channels: [4, 8, 8, 8, 8],
            image_size: 32,
            retrieval: RetrievalConfig { channels: [4, 4, 8, 8], hidden: 8 },
            ffn_ratio: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 16 != 0 {
            invalid!("image_size must be a positive multiple of 16, got {}", self.image_size);
        }
        if self.base_channels.contains(&0) || self.retrieval.channels.contains(&0) || self.retrieval.hidden == 0 {
            invalid!("channel widths must be positive");
        }
        if self.in_channels == 0 || self.text_len == 0 || self.text_dim == 0 || self.ffn_ratio == 0 {
            invalid!("in_channels, text_len, text_dim and ffn_ratio must be positive");
        }
        for &s in &self.utrans_stages {
            if !(1..=4).contains(&s) {
                invalid!("utrans stage {s} outside 1..=4");
            }
            if self.heads == 0 || self.base_channels[s] % self.heads != 0 {
                invalid!("stage {s} width {} not divisible by {} heads", self.base_channels[s], self.heads);
            }
        }
        if !(self.tau > 0.0) || !(self.gamma == 0.0 || self.gamma >= 1.0) {
            invalid!("tau must be positive and gamma 0 or >= 1");
        }
        Ok(())
    }

    pub fn text_bank(&self) -> Result<EncodedBank> {
        EncodedBank::new(TextBank::new(self.domain), TextEncoder::new(self.text_seed, self.text_len, self.text_dim)?)
    }
}

/// Ablation and diagnostic switches that change the forward pass, not the
/// parameter set.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForwardOptions {
    /// Replace every recombined text feature with zeros.
    pub no_text: bool,
    /// Bypass the SSM blocks.
    pub no_ssm: bool,
    /// Run UTrans over image tokens only.
    pub no_utrans_text: bool,
    /// Use the ground-truth phrases instead of the retrieved ones.
    pub teacher_force_text: bool,
    pub loc_order: LocOrder,
}

/// Parameter handles; values live in the [`ParamStore`].
#[derive(Clone, Debug)]
pub struct StpnetNet {
    pub cfg: StpnetConfig,
    pub retrieval: RetrievalEncoder,
    pub focal_heads: Vec<Linear>,
    pub enblock: EnBlock,
    pub mt: Vec<MtBlock>,
    pub ssm: Vec<Ssm>,
    pub utrans: Vec<Option<UTrans>>,
    pub up: Vec<UpBlock>,
    pub head: Conv,
}

#[derive(Clone, Debug)]
pub struct StpnetModel<T: Element> {
    pub net: StpnetNet,
    pub store: ParamStore<T>,
}

impl StpnetNet {
    pub fn build<T: Element>(cfg: &StpnetConfig, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let retrieval = RetrievalEncoder::new(store, &cfg.retrieval, cfg.in_channels, cfg.image_size, cfg.text_dim);
        let focal_heads = Category::ALL
            .iter()
            .map(|cat| Linear::new(store, &format!("focal.{}", cat.header().to_lowercase()), cfg.text_dim, cat.size()))
            .collect();
        let enblock = EnBlock::new(store, "enblock", cfg.in_channels, c[0]);
        let mut mt = Vec::new();
        let mut ssm = Vec::new();
        let mut utrans = Vec::new();
        for i in 1..=4 {
            mt.push(MtBlock::new(store, &format!("stage{i}.mt"), c[i - 1], c[i]));
            ssm.push(Ssm::new(store, &format!("stage{i}.ssm"), c[i], &cfg.dilations));
            let side = cfg.image_size >> i;
            utrans.push(cfg.utrans_stages.contains(&i).then(|| {
                UTrans::new(store, &format!("stage{i}.utrans"), c[i], side, cfg.text_dim, cfg.heads, cfg.ffn_ratio)
            }));
        }
        // decoder k consumes stage 4 - k and the skip one level up
        let up = (0..4).map(|k| UpBlock::new(store, &format!("up{}", k + 1), c[4 - k], c[3 - k], c[3 - k])).collect();
        let head = Conv::new(store, "head", c[0], 1, 1, Conv2dSpec::default(), true);
        Ok(Self { cfg: cfg.clone(), retrieval, focal_heads, enblock, mt, ssm, utrans, up, head })
    }
}

impl<T: Element> StpnetModel<T> {
    pub fn new(cfg: &StpnetConfig) -> Result<Self> {
        let mut store = ParamStore::new(cfg.seed);
        let net = StpnetNet::build(cfg, &mut store)?;
        Ok(Self { net, store })
    }

    pub fn cfg(&self) -> &StpnetConfig {
        &self.net.cfg
    }

    pub fn cast<U: Element>(&self) -> StpnetModel<U> {
        StpnetModel { net: self.net.clone(), store: self.store.cast() }
    }
}

/// Values exposed by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub f_v: Var,
    /// `[B, n_c]` focal-head logits per category.
    pub focal_logits: Vec<Var>,
    pub retrieval: Vec<RetrievalResult>,
    /// Recombined text levels fed to the network, each `[B, L, D]`.
    pub text: [Tensor<f64>; 4],
    /// Outputs of the four UpBlocks, deepest first.
    pub up: Vec<Var>,
    /// Attention weights of each UTrans stage that ran.
    pub attention: Vec<Var>,
}

impl StpnetNet {
    /// End-to-end forward. `labels` is required with `teacher_force_text`.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<'_, T>,
        img: &Tensor<T>,
        bank: &EncodedBank,
        opts: ForwardOptions,
        labels: Option<&[Labels]>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let s = img.shape();
        if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.image_size || s[3] != cfg.image_size {
            invalid!("expected [B, {}, {n}, {n}] input, got {s:?}", cfg.in_channels, n = cfg.image_size);
        }
        if bank.encoder.d != cfg.text_dim || bank.encoder.l != cfg.text_len {
            invalid!("text bank is {}x{}, model expects {}x{}", bank.encoder.l, bank.encoder.d, cfg.text_len, cfg.text_dim);
        }
        let b = s[0];
        let x = g.tape.constant(img.clone())?;

        let f_v = self.retrieval.forward(g, x)?;
        let focal_logits = self.focal_heads.iter().map(|h| h.forward(g, f_v)).collect::<Result<Vec<_>>>()?;
        let fv_vals = g.tape.value(f_v).to_f64_vec();
        let d = cfg.text_dim;
        let retrieval = fv_vals.chunks_exact(d).map(|v| retrieve(v, bank, cfg.tau)).collect::<Result<Vec<_>>>()?;

        let text = self.text_levels(bank, &retrieval, opts, labels, b)?;
        let means: Vec<Vec<T>> =
            text.iter().map(|t| per_sample_text_means(t).into_iter().map(T::from_f64_lossy).collect()).collect();

        let mut skips = vec![self.enblock.forward(g, x)?];
        let mut attention = Vec::new();
        let mut h = skips[0];
        for i in 0..4 {
            h = self.mt[i].forward(g, h, &means[i])?;
            if !opts.no_ssm {
                h = self.ssm[i].forward(g, h)?;
            }
            if let Some(ut) = &self.utrans[i] {
                let tv = if opts.no_utrans_text { None } else { Some(g.tape.constant(text[(i + 1).min(3)].cast())?) };
                let o = ut.forward(g, h, tv)?;
                h = o.output;
                attention.push(o.weights);
            }
            skips.push(h);
        }
        let mut up = Vec::with_capacity(4);
        for (k, blk) in self.up.iter().enumerate() {
            h = blk.forward(g, h, skips[3 - k])?;
            up.push(h);
        }
        let logits = self.head.forward(g, h)?;
        Ok(ForwardOutput { logits, f_v, focal_logits, retrieval, text, up, attention })
    }

    fn text_levels(
        &self,
        bank: &EncodedBank,
        retrieval: &[RetrievalResult],
        opts: ForwardOptions,
        labels: Option<&[Labels]>,
        b: usize,
    ) -> Result<[Tensor<f64>; 4]> {
        let (l, d) = (self.cfg.text_len, self.cfg.text_dim);
        let mut levels: [Vec<f64>; 4] = Default::default();
        if !opts.no_text {
            for (i, r) in retrieval.iter().enumerate() {
                let chosen: [usize; 4] = if opts.teacher_force_text {
                    let labels = labels.ok_or_else(|| Error::InvalidArgument("teacher forcing needs labels".into()))?;
                    labels.get(i).ok_or_else(|| Error::InvalidArgument("fewer labels than samples".into()))?.indices()
                } else {
                    r.j_stars()
                };
                let feats: Vec<&TextFeature> =
                    Category::ALL.iter().zip(chosen).map(|(&c, j)| bank.feature(c, j)).collect::<Result<_>>()?;
                let rec = recombine_features([feats[0], feats[1], feats[2], feats[3]], opts.loc_order)?;
                for (lv, t) in levels.iter_mut().zip(&rec) {
                    lv.extend_from_slice(t.data());
                }
            }
        } else {
            levels.iter_mut().for_each(|lv| *lv = vec![0.0; b * l * d]);
        }
        Ok(levels.map(|lv| Tensor::from_vec(&[b, l, d], lv).expect("b*l*d values")))
    }

    /// Mixed loss of a forward pass against masks `[B, 1, S, S]` and labels.
    pub fn loss<T: Element>(
        &self,
        g: &mut Graph<'_, T>,
        out: &ForwardOutput,
        masks: &Tensor<T>,
        labels: &[Labels],
        bank: &EncodedBank,
        lambdas: Lambdas,
    ) -> Result<(Var, LossReport)> {
        let gt = g.tape.constant(masks.clone())?;
        let seg = seg_loss(&mut g.tape, out.logits, gt)?;
        let pos: Vec<Vec<usize>> = (0..4).map(|c| labels.iter().map(|l| l.indices()[c]).collect()).collect();
        let pos_refs: Vec<&[usize]> = pos.iter().map(Vec::as_slice).collect();
        let cands: Vec<Tensor<f64>> = Category::ALL.iter().map(|&c| pooled_matrix(bank, c)).collect();
        let cand_refs: Vec<&Tensor<f64>> = cands.iter().collect();
        let (ret, ret_terms) = retrieval_loss(&mut g.tape, out.f_v, &cand_refs, &pos_refs, self.cfg.tau)?;
        let (foc, _) = focal_loss(&mut g.tape, &out.focal_logits, &pos_refs, self.cfg.gamma)?;
        let mix = mix_loss(&mut g.tape, seg, ret, foc, lambdas)?;
        let v = |g: &Graph<'_, T>, x: Var| g.tape.value(x).item().as_f64();
        let report = LossReport {
            seg: v(g, seg),
            retrieval: v(g, ret),
            focal: v(g, foc),
            mix: v(g, mix),
            retrieval_terms: std::array::from_fn(|i| v(g, ret_terms[i])),
        };
        Ok((mix, report))
    }
}

/// Pooled phrase vectors of one category as `[n, D]`.
pub fn pooled_matrix(bank: &EncodedBank, c: Category) -> Tensor<f64> {
    let feats = bank.features(c);
    let d = feats[0].pooled.len();
    Tensor::from_vec(&[feats.len(), d], feats.iter().flat_map(|f| f.pooled.iter().copied()).collect()).expect("non-empty")
}

/// `[B, L, D]` mean per sample, as the MTBlock sees it.
pub fn per_sample_text_means(text: &Tensor<f64>) -> Vec<f64> {
    let s = text.shape();
    text.data().chunks_exact(s[1] * s[2]).map(|c| text_mean(&Tensor::from_vec(&[c.len()], c.to_vec()).expect("non-empty"))).collect()
}
