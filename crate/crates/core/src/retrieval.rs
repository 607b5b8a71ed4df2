//! Image encoder, cosine ranking against the phrase bank, and the running-mean
//! recombination of retrieved phrases into four prompt levels.

use stpnet_autodiff::{Conv2dSpec, Element, Graph, ParamId, ParamStore, Tensor, UpsampleMode, Var};

use crate::error::{invalid, Error, Result};
use crate::nn::{Conv, ConvBnRelu, Linear};
use crate::textbank::{Category, EncodedBank, TextFeature};

pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub channels: [usize; 4],
    /// Width of the per-position map before global pooling.
    pub hidden: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { channels: [16, 32, 64, 128], hidden: 64 }
    }
}

/// Four conv-BN-ReLU-maxpool stages; the last is upsampled and joined with
/// the third, mapped per position (1x1 conv plus a learned position bias,
/// ReLU), max-pooled over space and projected to the text dimension.
#[derive(Clone, Debug)]
pub struct RetrievalEncoder {
    stages: Vec<ConvBnRelu>,
    fuse: Conv,
    pos_bias: ParamId,
    out: Linear,
    in_channels: usize,
}

impl RetrievalEncoder {
    pub fn new<T: Element>(store: &mut ParamStore<T>, cfg: &RetrievalConfig, in_channels: usize, image_size: usize, d: usize) -> Self {
        let mut cin = in_channels;
        let stages = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let s = ConvBnRelu::new(store, &format!("retrieval.stage{}", i + 1), cin, c);
                cin = c;
                s
            })
            .collect();
        let fused = cfg.channels[2] + cfg.channels[3];
        let side = image_size / 8;
        Self {
            stages,
            fuse: Conv::new(store, "retrieval.fuse", fused, cfg.hidden, 1, Conv2dSpec::default(), true),
            pos_bias: store.zeros("retrieval.pos_bias", &[cfg.hidden, side, side]),
            out: Linear::new(store, "retrieval.out", cfg.hidden, d),
            in_channels,
        }
    }

    /// `[B, C, H, W] -> F_v [B, D]`.
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, img: Var) -> Result<Var> {
        let s = g.tape.shape(img).to_vec();
        if s.len() != 4 || s[1] != self.in_channels {
            invalid!("retrieval encoder expects [B, {}, H, W], got {s:?}", self.in_channels);
        }
        if s[2] % 16 != 0 || s[3] % 16 != 0 {
            invalid!("retrieval encoder needs spatial dims divisible by 16, got {s:?}");
        }
        let mut x = img;
        let mut feats = Vec::with_capacity(4);
        for stage in &self.stages {
            let y = stage.forward(g, x)?;
            x = g.tape.maxpool2d(y, 2)?;
            feats.push(x);
        }
        let up = g.tape.upsample2x(feats[3], UpsampleMode::Bilinear)?;
        let cat = g.tape.concat(&[feats[2], up], 1)?;
        let h = self.fuse.forward(g, cat)?;
        let pb = g.param(self.pos_bias)?;
        let h = g.tape.add(h, pb)?;
        let h = g.tape.relu(h)?;
        let pooled = g.tape.global_max_pool2d(h)?;
        self.out.forward(g, pooled)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine of a zero-norm vector".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryScores {
    pub cosines: Vec<f64>,
    /// `softmax(cosines / tau)`.
    pub scores: Vec<f64>,
    pub j_star: usize,
}

pub fn score_category(f_v: &[f64], candidates: &[&[f64]], tau: f64) -> Result<CategoryScores> {
    if !(tau > 0.0) {
        invalid!("tau must be positive, got {tau}");
    }
    if candidates.is_empty() {
        invalid!("no candidates to score");
    }
    let cosines = candidates.iter().map(|c| cosine(f_v, c)).collect::<Result<Vec<_>>>()?;
    let m = cosines.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = cosines.iter().map(|c| ((c - m) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    let j_star = argmax(&cosines);
    Ok(CategoryScores { scores: e.iter().map(|v| v / z).collect(), cosines, j_star })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryRetrieval {
    pub category: Category,
    pub scores: CategoryScores,
    pub feature: TextFeature,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocOrder {
    /// Infection, Num, LeftLoc, RightLoc.
    #[default]
    LeftFirst,
    /// Infection, Num, RightLoc, LeftLoc.
    RightFirst,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    /// In category order.
    pub categories: Vec<CategoryRetrieval>,
    pub recombined: Option<[Tensor<f64>; 4]>,
}

impl RetrievalResult {
    pub fn j_stars(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.categories[i].scores.j_star)
    }
}

pub fn retrieve(f_v: &[f64], bank: &EncodedBank, tau: f64) -> Result<RetrievalResult> {
    let categories = Category::ALL
        .into_iter()
        .map(|c| {
            let feats = bank.features(c);
            let cands: Vec<&[f64]> = feats.iter().map(|f| f.pooled.as_slice()).collect();
            let scores = score_category(f_v, &cands, tau)?;
            let feature = feats[scores.j_star].clone();
            Ok(CategoryRetrieval { category: c, scores, feature })
        })
        .collect::<Result<_>>()?;
    Ok(RetrievalResult { categories, recombined: None })
}

/// `F_text,i = (1/i) sum_{j<=i} tokens(f_j)` over features in accumulation order.
pub fn recombine_features(features: [&TextFeature; 4], order: LocOrder) -> Result<[Tensor<f64>; 4]> {
    let seq = match order {
        LocOrder::LeftFirst => [0, 1, 2, 3],
        LocOrder::RightFirst => [0, 1, 3, 2],
    };
    let shape = features[0].tokens.shape().to_vec();
    if features.iter().any(|f| f.tokens.shape() != shape) {
        invalid!("retrieved features disagree in shape");
    }
    let mut acc = vec![0.0; features[0].tokens.numel()];
    let mut out: Vec<Tensor<f64>> = Vec::with_capacity(4);
    for (i, &k) in seq.iter().enumerate() {
        acc.iter_mut().zip(features[k].tokens.data()).for_each(|(a, v)| *a += v);
        let n = (i + 1) as f64;
        out.push(Tensor::from_vec(&shape, acc.iter().map(|a| a / n).collect())?);
    }
    Ok(out.try_into().expect("four levels"))
}

pub fn recombine(result: &mut RetrievalResult, order: LocOrder) -> Result<&[Tensor<f64>; 4]> {
    if result.categories.len() != 4 {
        return Err(Error::Contract(format!("recombine needs 4 retrieved features, have {}", result.categories.len())));
    }
    let fs = std::array::from_fn(|i| &result.categories[i].feature);
    result.recombined = Some(recombine_features(fs, order)?);
    Ok(result.recombined.as_ref().expect("just set"))
}

/// Table-style listing: one block per category, phrase and score to four
/// decimals, the retrieved row marked with `*`.
pub fn format_scores(result: &RetrievalResult, bank: &EncodedBank) -> String {
    let mut out = String::new();
    for r in &result.categories {
        out.push_str(&format!("{}\n", r.category.header()));
        for (j, (p, s)) in bank.bank.phrases(r.category).iter().zip(&r.scores.scores).enumerate() {
            let mark = if j == r.scores.j_star { '*' } else { ' ' };
            out.push_str(&format!("  {mark} {p:<32} {s:.4}\n"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textbank::{Domain, TextBank, TextEncoder};

    fn bank() -> EncodedBank {
        EncodedBank::new(TextBank::new(Domain::Lung), TextEncoder::new(0, 8, 32).unwrap()).unwrap()
    }

    fn feature(v: f64) -> TextFeature {
        TextFeature { tokens: Tensor::full(&[2, 3], v), pooled: vec![v; 3], n_tokens: 2, category: Category::Num, index: 0 }
    }

    #[test]
    fn equal_cosines_split_evenly() {
        let s = score_category(&[1.0, 0.0], &[&[0.0, 1.0], &[0.0, -1.0]], 0.07).unwrap();
        assert_eq!(s.scores, [0.5, 0.5]);
        assert_eq!(s.j_star, 0);
    }

    #[test]
    fn zero_vector_is_numeric_error() {
        assert!(matches!(score_category(&[0.0, 0.0], &[&[1.0, 0.0]], 0.1), Err(Error::Numeric(_))));
        assert!(score_category(&[1.0], &[&[1.0]], 0.0).is_err());
    }

    #[test]
    fn scale_invariance() {
        let b = bank();
        let v: Vec<f64> = (0..32).map(|i| ((i * 7) as f64).sin()).collect();
        let base = retrieve(&v, &b, DEFAULT_TAU).unwrap();
        for c in [1e-3, 0.5, 7.0, 1e4] {
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            let r = retrieve(&scaled, &b, DEFAULT_TAU).unwrap();
            assert_eq!(r.j_stars(), base.j_stars());
            for (a, b) in r.categories.iter().zip(&base.categories) {
                for (x, y) in a.scores.scores.iter().zip(&b.scores.scores) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn structure_and_normalization() {
        let b = bank();
        let v: Vec<f64> = (0..32).map(|i| (i as f64).cos()).collect();
        let r = retrieve(&v, &b, DEFAULT_TAU).unwrap();
        assert_eq!(r.categories.len(), 4);
        for c in &r.categories {
            assert!((c.scores.scores.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            assert_eq!(c.scores.j_star, argmax(&c.scores.scores));
            assert_eq!(c.feature.index, c.scores.j_star);
        }
        assert!(r.recombined.is_none());
    }

    #[test]
    fn left_loc_three_self_retrieves() {
        let b = bank();
        let v = b.feature(Category::LeftLoc, 3).unwrap().pooled.clone();
        assert_eq!(retrieve(&v, &b, DEFAULT_TAU).unwrap().categories[2].scores.j_star, 3);
    }

    #[test]
    fn recombination_means() {
        let (a, b) = (feature(1.0), feature(3.0));
        let out = recombine_features([&a, &b, &a, &b], LocOrder::LeftFirst).unwrap();
        assert_eq!(out[0], a.tokens);
        assert!(out[1].data().iter().all(|&v| v == 2.0));
        assert!(out[2].data().iter().all(|&v| (v - 5.0 / 3.0).abs() < 1e-15));
        assert!(out[3].data().iter().all(|&v| v == 2.0));
        let same = recombine_features([&a, &a, &a, &a], LocOrder::LeftFirst).unwrap();
        assert!(same.iter().all(|t| *t == a.tokens));
    }

    #[test]
    fn swapping_loc_order_only_moves_level_three() {
        let fs = [feature(1.0), feature(-2.0), feature(5.0), feature(0.25)];
        let refs = std::array::from_fn(|i| &fs[i]);
        let l = recombine_features(refs, LocOrder::LeftFirst).unwrap();
        let r = recombine_features(refs, LocOrder::RightFirst).unwrap();
        assert_eq!((&l[0], &l[1], &l[3]), (&r[0], &r[1], &r[3]));
        assert_ne!(l[2], r[2]);
    }

    #[test]
    fn recombine_requires_four() {
        let b = bank();
        let v: Vec<f64> = (0..32).map(|i| i as f64 + 1.0).collect();
        let mut r = retrieve(&v, &b, DEFAULT_TAU).unwrap();
        let f1 = r.categories[0].feature.tokens.clone();
        assert_eq!(recombine(&mut r, LocOrder::LeftFirst).unwrap()[0], f1);
        r.categories.pop();
        assert!(matches!(recombine(&mut r, LocOrder::LeftFirst), Err(Error::Contract(_))));
    }

    #[test]
    fn listing_marks_retrieved_rows() {
        let b = bank();
        let v = b.feature(Category::Infection, 1).unwrap().pooled.clone();
        let text = format_scores(&retrieve(&v, &b, DEFAULT_TAU).unwrap(), &b);
        assert!(text.contains("* Bilateral pulmonary infection"));
        assert_eq!(text.matches('*').count(), 4);
    }
}
