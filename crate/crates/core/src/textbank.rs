//! The four-category phrase bank and a frozen toy text encoder.
//!
//! The encoder is a lookup table: each distinct lowercase token owns a fixed
//! random vector derived from `(seed, token)`. It has no parameters, so no
//! gradient can ever reach it.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use stpnet_autodiff::Tensor;

use crate::error::{invalid, Error, Result};

pub const DEFAULT_L: usize = 8;
pub const DEFAULT_D: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Lung,
    Polyp,
}

impl FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lung" => Ok(Domain::Lung),
            "polyp" => Ok(Domain::Polyp),
            other => Err(Error::InvalidArgument(format!("unknown text-bank domain {other:?}"))),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Lung => "lung",
            Domain::Polyp => "polyp",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Category {
    Infection,
    Num,
    LeftLoc,
    RightLoc,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Infection, Category::Num, Category::LeftLoc, Category::RightLoc];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn size(self) -> usize {
        [2, 2, 8, 8][self.index()]
    }

    pub fn header(self) -> &'static str {
        ["Infection", "Num", "LeftLoc", "RightLoc"][self.index()]
    }

    fn from_header(s: &str) -> Option<Self> {
        Category::ALL.into_iter().find(|c| c.header() == s)
    }
}

/// Location phrases in bank order; index = occupied-thirds code.
const LOC_PREFIXES: [&str; 8] =
    ["No lesion in", "Upper", "Middle", "Lower", "Upper lower", "Upper middle", "Middle lower", "Upper middle lower"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextBank {
    pub domain: Domain,
    categories: [Vec<String>; 4],
}

impl TextBank {
    pub fn new(domain: Domain) -> Self {
        let organ = domain.to_string();
        let loc = |side: &str| LOC_PREFIXES.iter().map(|p| format!("{p} {side} {organ}")).collect::<Vec<_>>();
        let bank = Self {
            domain,
            categories: [
                vec!["Unilateral pulmonary infection".into(), "Bilateral pulmonary infection".into()],
                vec!["One infected area".into(), "Multiple infected areas".into()],
                loc("left"),
                loc("right"),
            ],
        };
        debug_assert!(bank.validate().is_ok());
        bank
    }

    pub fn phrases(&self, c: Category) -> &[String] {
        &self.categories[c.index()]
    }

    pub fn phrase(&self, c: Category, index: usize) -> Result<&str> {
        match self.categories[c.index()].get(index) {
            Some(p) => Ok(p),
            None => invalid!("{} has {} phrases, index {index} out of range", c.header(), c.size()),
        }
    }

    pub fn len(&self) -> usize {
        self.categories.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        for c in Category::ALL {
            if self.categories[c.index()].len() != c.size() {
                invalid!("{} must have {} phrases, found {}", c.header(), c.size(), self.categories[c.index()].len());
            }
        }
        let mut all: Vec<&String> = self.categories.iter().flatten().collect();
        all.sort();
        if all.windows(2).any(|w| w[0] == w[1]) {
            invalid!("duplicate phrase in text bank");
        }
        Ok(())
    }

    /// Plain-text form: a `domain:` line, then `[Category]` headers each
    /// followed by one phrase per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("domain: {}\n", self.domain);
        for c in Category::ALL {
            out.push_str(&format!("\n[{}]\n", c.header()));
            for p in self.phrases(c) {
                out.push_str(p);
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut domain = None;
        let mut categories: [Vec<String>; 4] = Default::default();
        let mut current: Option<Category> = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(d) = line.strip_prefix("domain:") {
                domain = Some(d.parse()?);
            } else if let Some(h) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(
                    Category::from_header(h).ok_or_else(|| Error::Format(format!("line {}: unknown category [{h}]", n + 1)))?,
                );
            } else {
                let c = current.ok_or_else(|| Error::Format(format!("line {}: phrase before any category header", n + 1)))?;
                categories[c.index()].push(line.to_string());
            }
        }
        let domain = domain.ok_or_else(|| Error::Format("missing `domain:` line".into()))?;
        let bank = Self { domain, categories };
        bank.validate()?;
        Ok(bank)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextFeature {
    /// `[L, D]`; rows past `n_tokens` are zero padding.
    pub tokens: Tensor<f64>,
    pub pooled: Vec<f64>,
    pub n_tokens: usize,
    pub category: Category,
    pub index: usize,
}

/// Mean over the non-pad token rows.
pub fn pool_tokens(feature: &TextFeature) -> Result<Vec<f64>> {
    let d = feature.tokens.shape()[1];
    if feature.n_tokens == 0 {
        invalid!("cannot pool an all-pad text feature");
    }
    let mut out = vec![0.0; d];
    for row in feature.tokens.data().chunks_exact(d).take(feature.n_tokens) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    let n = feature.n_tokens as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextEncoder {
    pub seed: u64,
    pub l: usize,
    pub d: usize,
}

impl TextEncoder {
    pub fn new(seed: u64, l: usize, d: usize) -> Result<Self> {
        if l == 0 || d == 0 {
            invalid!("text encoder needs L, D > 0");
        }
        Ok(Self { seed, l, d })
    }

    /// Fixed vector of one lowercase token, entries N(0, 1/D).
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let key = token.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3));
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ key);
        let scale = 1.0 / (self.d as f64).sqrt();
        (0..self.d).map(|_| StandardNormal.sample(&mut rng)).map(|v: f64| v * scale).collect()
    }

    pub fn encode_phrase(&self, phrase: &str) -> (Tensor<f64>, usize) {
        let tokens: Vec<String> = phrase.split_whitespace().map(str::to_lowercase).take(self.l).collect();
        let mut data = vec![0.0; self.l * self.d];
        for (row, tok) in data.chunks_exact_mut(self.d).zip(&tokens) {
            row.copy_from_slice(&self.token_vector(tok));
        }
        (Tensor::from_vec(&[self.l, self.d], data).expect("positive dims"), tokens.len())
    }

    pub fn encode(&self, bank: &TextBank, category: Category, index: usize) -> Result<TextFeature> {
        let phrase = bank.phrase(category, index)?;
        let (tokens, n_tokens) = self.encode_phrase(phrase);
        let mut f = TextFeature { tokens, pooled: Vec::new(), n_tokens, category, index };
        f.pooled = pool_tokens(&f)?;
        Ok(f)
    }
}

/// A bank with every phrase encoded once.
#[derive(Clone, Debug)]
pub struct EncodedBank {
    pub bank: TextBank,
    pub encoder: TextEncoder,
    features: [Vec<TextFeature>; 4],
}

impl EncodedBank {
    pub fn new(bank: TextBank, encoder: TextEncoder) -> Result<Self> {
        let mut features: [Vec<TextFeature>; 4] = Default::default();
        for c in Category::ALL {
            features[c.index()] = (0..c.size()).map(|j| encoder.encode(&bank, c, j)).collect::<Result<_>>()?;
        }
        Ok(Self { bank, encoder, features })
    }

    pub fn features(&self, c: Category) -> &[TextFeature] {
        &self.features[c.index()]
    }

    pub fn feature(&self, c: Category, index: usize) -> Result<&TextFeature> {
        match self.features[c.index()].get(index) {
            Some(f) => Ok(f),
            None => invalid!("{} index {index} out of range", c.header()),
        }
    }

    /// Unit-normalized pooled vectors of one category, row-major `[n, D]`.
    pub fn unit_pooled(&self, c: Category) -> Tensor<f64> {
        let d = self.encoder.d;
        let mut data = Vec::with_capacity(c.size() * d);
        for f in self.features(c) {
            let norm = f.pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
            data.extend(f.pooled.iter().map(|v| v / norm));
        }
        Tensor::from_vec(&[c.size(), d], data).expect("non-empty category")
    }
}
