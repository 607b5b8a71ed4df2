//! Procedural lesion images whose masks determine the four text labels.
//!
//! Image-left is anatomical-left. Lesions are filled ellipses that never
//! straddle the vertical midline, so field occupancy is unambiguous.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use stpnet_autodiff::{Element, Tensor};

use crate::error::{invalid, Error, Result};

pub const DATASET_MAGIC: &[u8; 5] = b"STPD1";

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub image_size: usize,
    pub min_lesions: usize,
    pub max_lesions: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Added inside each lesion (overlaps stack before clamping).
    pub intensity: f64,
    pub background_level: f64,
    pub background_amplitude: f64,
    pub noise_sigma: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_lesions: 1,
            max_lesions: 3,
            radius_min: 3.0,
            radius_max: 12.0,
            intensity: 0.35,
            background_level: 0.3,
            background_amplitude: 0.08,
            noise_sigma: 0.04,
        }
    }
}

impl GenConfig {
    /// Defaults with lesion radii scaled to a `size x size` field.
    pub fn for_size(size: usize) -> Self {
        let d = Self::default();
        let k = size as f64 / d.image_size as f64;
        Self { image_size: size, radius_min: d.radius_min * k, radius_max: d.radius_max * k, ..d }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s < 6 || s % 2 != 0 {
            invalid!("image_size must be even and >= 6, got {s}");
        }
        if self.min_lesions == 0 || self.min_lesions > self.max_lesions {
            invalid!("lesion count range {}..={} is empty or allows zero", self.min_lesions, self.max_lesions);
        }
        if !(self.radius_min >= 1.0 && self.radius_min <= self.radius_max) {
            invalid!("radius range [{}, {}] invalid", self.radius_min, self.radius_max);
        }
        // The widest lesion (2r + 1 pixels) must fit inside one field.
        if 2.0 * self.radius_max.ceil() + 1.0 > (s / 2) as f64 {
            invalid!("radius_max {} does not fit in a {}-pixel field", self.radius_max, s / 2);
        }
        if self.noise_sigma < 0.0 || !self.intensity.is_finite() {
            invalid!("noise_sigma must be >= 0 and intensity finite");
        }
        Ok(())
    }

    /// Row boundaries of the upper/middle/lower thirds: `[0, t1)`, `[t1, t2)`, `[t2, size)`.
    pub fn thirds(&self) -> (usize, usize) {
        let s = self.image_size as f64;
        ((s / 3.0).round() as usize, (2.0 * s / 3.0).round() as usize)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
pub struct Labels {
    /// 0 unilateral, 1 bilateral.
    pub infection: u8,
    /// 0 one area, 1 multiple areas.
    pub num: u8,
    pub left_loc: u8,
    pub right_loc: u8,
}

impl Labels {
    /// Bank indices in category order.
    pub fn indices(&self) -> [usize; 4] {
        [self.infection, self.num, self.left_loc, self.right_loc].map(usize::from)
    }

    pub fn from_indices(ix: [usize; 4]) -> Result<Self> {
        let sizes = [2, 2, 8, 8];
        if ix.iter().zip(sizes).any(|(&i, n)| i >= n) {
            invalid!("label indices {ix:?} out of range");
        }
        Ok(Self { infection: ix[0] as u8, num: ix[1] as u8, left_loc: ix[2] as u8, right_loc: ix[3] as u8 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lesion {
    pub cx: i64,
    pub cy: i64,
    /// Semi-axes in pixels.
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Lesion {
    fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        ((self.a * c).hypot(self.b * s), (self.a * s).hypot(self.b * c))
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = ((x - self.cx) as f64, (y - self.cy) as f64);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub size: usize,
    /// Row-major `size x size`, values in `[0, 1]`.
    pub image: Vec<f32>,
    /// Row-major `size x size`, values in `{0, 1}`.
    pub mask: Vec<u8>,
    pub labels: Labels,
    pub seed: u64,
}

/// Occupied-thirds set to bank index: bit 0 upper, bit 1 middle, bit 2 lower.
const THIRDS_TO_INDEX: [u8; 8] = [0, 1, 2, 5, 3, 4, 6, 7];

pub fn derive_text_labels(mask: &[u8], cfg: &GenConfig) -> Result<Labels> {
    let s = cfg.image_size;
    if mask.len() != s * s {
        invalid!("mask has {} pixels, expected {}", mask.len(), s * s);
    }
    if mask.iter().any(|&m| m > 1) {
        invalid!("mask must be binary");
    }
    if !mask.contains(&1) {
        invalid!("empty mask has no text labels");
    }
    let (t1, t2) = cfg.thirds();
    let mut thirds = [0usize; 2];
    for y in 0..s {
        let bit = if y < t1 { 1 } else if y < t2 { 2 } else { 4 };
        for x in 0..s {
            if mask[y * s + x] == 1 {
                thirds[usize::from(x >= s / 2)] |= bit;
            }
        }
    }
    let components = count_components(mask, s);
    Ok(Labels {
        infection: u8::from(thirds[0] != 0 && thirds[1] != 0),
        num: u8::from(components > 1),
        left_loc: THIRDS_TO_INDEX[thirds[0]],
        right_loc: THIRDS_TO_INDEX[thirds[1]],
    })
}

/// 8-connected foreground components.
pub fn count_components(mask: &[u8], s: usize) -> usize {
    let mut seen = vec![false; mask.len()];
    let mut queue = VecDeque::new();
    let mut count = 0;
    for start in 0..mask.len() {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (y, x) = ((p / s) as i64, (p % s) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= s as i64 || nx >= s as i64 {
                        continue;
                    }
                    let q = ny as usize * s + nx as usize;
                    if mask[q] == 1 && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    count
}

/// Draw one lesion inside field 0 (left) or 1 (right).
fn draw_lesion(rng: &mut ChaCha8Rng, cfg: &GenConfig, field: usize) -> Lesion {
    let s = cfg.image_size as i64;
    let half = s / 2;
    let mut l = Lesion {
        cx: 0,
        cy: 0,
        a: rng.gen_range(cfg.radius_min..=cfg.radius_max),
        b: rng.gen_range(cfg.radius_min..=cfg.radius_max),
        theta: rng.gen_range(0.0..std::f64::consts::PI),
    };
    let (ex, ey) = l.half_extents();
    let (ex, ey) = (ex.ceil() as i64, ey.ceil() as i64);
    let x0 = field as i64 * half;
    l.cx = rng.gen_range(x0 + ex..=x0 + half - 1 - ex);
    l.cy = rng.gen_range(ey..=s - 1 - ey);
    l
}

/// Rasterize lesions over a smooth background with additive noise.
pub fn render(lesions: &[Lesion], cfg: &GenConfig, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<u8>) {
    let s = cfg.image_size;
    let tau = std::f64::consts::TAU;
    let (fx, fy) = (rng.gen_range(0.5..2.0) * tau / s as f64, rng.gen_range(0.5..2.0) * tau / s as f64);
    let (px, py) = (rng.gen_range(0.0..tau), rng.gen_range(0.0..tau));
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma >= 0");
    let mut image = Vec::with_capacity(s * s);
    let mut mask = vec![0u8; s * s];
    for y in 0..s {
        for x in 0..s {
            let mut v = cfg.background_level
                + cfg.background_amplitude * (fx * x as f64 + px).sin() * (fy * y as f64 + py).cos();
            for l in lesions {
                if l.contains(x as i64, y as i64) {
                    v += cfg.intensity;
                    mask[y * s + x] = 1;
                }
            }
            v += rng.sample(noise);
            image.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    (image, mask)
}

pub fn generate_sample(seed: u64, cfg: &GenConfig) -> Result<SegSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(cfg.min_lesions..=cfg.max_lesions);
    let lesions: Vec<Lesion> = (0..k)
        .map(|_| {
            let field = rng.gen_range(0..2);
            draw_lesion(&mut rng, cfg, field)
        })
        .collect();
    sample_from_lesions(seed, &lesions, cfg, &mut rng)
}

/// Render explicit lesions; used by `generate_sample` and for placed test cases.
pub fn sample_from_lesions(seed: u64, lesions: &[Lesion], cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Result<SegSample> {
    let (image, mask) = render(lesions, cfg, rng);
    let labels = derive_text_labels(&mask, cfg)?;
    Ok(SegSample { size: cfg.image_size, image, mask, labels, seed })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<SegSample>,
    pub val: Vec<SegSample>,
    pub test: Vec<SegSample>,
}

/// Per-sample seeds are `seed ^ index` over consecutive index ranges
/// `[0, n_train)`, `[n_train, n_train + n_val)`, then test.
pub fn generate_split(seed: u64, n_train: usize, n_val: usize, n_test: usize, cfg: &GenConfig) -> Result<Split> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        invalid!("split sizes must be positive, got {n_train}/{n_val}/{n_test}");
    }
    let range = |lo: usize, n: usize| (lo..lo + n).map(|i| generate_sample(seed ^ i as u64, cfg)).collect::<Result<Vec<_>>>();
    let split =
        Split { train: range(0, n_train)?, val: range(n_train, n_val)?, test: range(n_train + n_val, n_test)? };
    let hist = label_histogram(&split.train);
    log::info!("train label marginals: {hist:?}");
    for (c, h) in hist.iter().enumerate() {
        if h.iter().filter(|&&n| n > 0).count() < 2 {
            log::warn!("category {c} has fewer than two distinct label values in the training split");
        }
    }
    Ok(split)
}

/// Per category, the count of each label value.
pub fn label_histogram(samples: &[SegSample]) -> [Vec<usize>; 4] {
    let mut h = [vec![0; 2], vec![0; 2], vec![0; 8], vec![0; 8]];
    for s in samples {
        for (c, i) in s.labels.indices().into_iter().enumerate() {
            h[c][i] += 1;
        }
    }
    h
}

/// `[B, 1, S, S]` images and masks of a batch.
pub fn batch_tensors<T: Element>(samples: &[&SegSample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let Some(first) = samples.first() else { invalid!("empty batch") };
    let s = first.size;
    if samples.iter().any(|x| x.size != s) {
        invalid!("mixed image sizes in batch");
    }
    let img = samples.iter().flat_map(|x| x.image.iter().map(|&v| T::from_f64_lossy(f64::from(v)))).collect();
    let mask = samples.iter().flat_map(|x| x.mask.iter().map(|&v| T::from_f64_lossy(f64::from(v)))).collect();
    let shape = [samples.len(), 1, s, s];
    Ok((Tensor::from_vec(&shape, img)?, Tensor::from_vec(&shape, mask)?))
}

pub fn write_dataset(w: &mut impl Write, samples: &[SegSample]) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    let count = u32::try_from(samples.len()).map_err(|_| Error::InvalidArgument("too many samples".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for s in samples {
        for v in &s.image {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&s.mask)?;
        w.write_all(&[s.labels.infection, s.labels.num, s.labels.left_loc, s.labels.right_loc])?;
        w.write_all(&s.seed.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a dataset file; the image side is recovered from the payload length.
pub fn read_dataset(r: &mut impl Read) -> Result<Vec<SegSample>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 9 || &bytes[..5] != DATASET_MAGIC {
        return Err(Error::Format("not an STPD1 dataset".into()));
    }
    let count = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let body = &bytes[9..];
    if count == 0 {
        return if body.is_empty() { Ok(Vec::new()) } else { Err(Error::Format("trailing bytes".into())) };
    }
    if body.len() % count != 0 {
        return Err(Error::Format("payload length not a multiple of the sample count".into()));
    }
    let per = body.len() / count;
    // per = 5 s^2 + 12
    let s = (((per.saturating_sub(12)) / 5) as f64).sqrt().round() as usize;
    if 5 * s * s + 12 != per {
        return Err(Error::Format(format!("record size {per} does not match any square image")));
    }
    let cfg = GenConfig::for_size(s);
    body.chunks_exact(per)
        .map(|rec| {
            let n = s * s;
            let image = rec[..4 * n].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            let mask = rec[4 * n..5 * n].to_vec();
            let l = &rec[5 * n..5 * n + 4];
            let labels = Labels::from_indices([l[0], l[1], l[2], l[3]].map(usize::from))?;
            let seed = u64::from_le_bytes(rec[5 * n + 4..].try_into().expect("8 bytes"));
            let sample = SegSample { size: s, image, mask, labels, seed };
            if derive_text_labels(&sample.mask, &cfg)? != labels {
                return Err(Error::Format(format!("sample {seed}: stored labels disagree with its mask")));
            }
            Ok(sample)
        })
        .collect()
}

pub fn save_dataset(path: &Path, samples: &[SegSample]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(&mut w, samples)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<SegSample>> {
    read_dataset(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank() -> (GenConfig, Vec<u8>) {
        let cfg = GenConfig::default();
        let n = cfg.image_size;
        (cfg, vec![0; n * n])
    }

    fn fill(mask: &mut [u8], s: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) {
        for y in rows {
            for x in cols.clone() {
                mask[y * s + x] = 1;
            }
        }
    }

    #[test]
    fn thirds_partition() {
        assert_eq!(GenConfig::default().thirds(), (21, 43));
    }

    #[test]
    fn thirds_codes_follow_bank_order() {
        let (cfg, _) = blank();
        let rows = [0..5, 25..30, 50..55];
        let cases: [(&[usize], u8); 7] =
            [(&[0], 1), (&[1], 2), (&[2], 3), (&[0, 2], 4), (&[0, 1], 5), (&[1, 2], 6), (&[0, 1, 2], 7)];
        for (thirds, want) in cases {
            let (_, mut m) = blank();
            for &t in thirds {
                fill(&mut m, 64, rows[t].clone(), 2..6);
            }
            let l = derive_text_labels(&m, &cfg).unwrap();
            assert_eq!((l.left_loc, l.right_loc, l.infection), (want, 0, 0), "{thirds:?}");
        }
    }

    #[test]
    fn spanning_blob_is_upper_middle_lower() {
        let (cfg, mut m) = blank();
        fill(&mut m, 64, 10..55, 10..14);
        let l = derive_text_labels(&m, &cfg).unwrap();
        assert_eq!(l, Labels { infection: 0, num: 0, left_loc: 7, right_loc: 0 });
    }

    #[test]
    fn one_blob_per_field_is_bilateral_multiple() {
        let (cfg, mut m) = blank();
        fill(&mut m, 64, 30..33, 5..8);
        fill(&mut m, 64, 30..33, 40..43);
        let l = derive_text_labels(&m, &cfg).unwrap();
        assert_eq!((l.infection, l.num), (1, 1));
    }

    #[test]
    fn diagonal_touch_is_one_component() {
        let (cfg, mut m) = blank();
        m[10 * 64 + 10] = 1;
        m[11 * 64 + 11] = 1;
        assert_eq!(derive_text_labels(&m, &cfg).unwrap().num, 0);
        m[13 * 64 + 13] = 1;
        assert_eq!(derive_text_labels(&m, &cfg).unwrap().num, 1);
    }

    #[test]
    fn labeler_rejects_bad_masks() {
        let (cfg, mut m) = blank();
        assert!(derive_text_labels(&m, &cfg).unwrap_err().is_invalid_argument());
        m[0] = 2;
        assert!(derive_text_labels(&m, &cfg).unwrap_err().is_invalid_argument());
    }

    #[test]
    fn translation_within_a_third_keeps_labels() {
        let (cfg, mut a) = blank();
        let mut b = a.clone();
        fill(&mut a, 64, 22..26, 3..7);
        fill(&mut b, 64, 36..40, 20..24);
        assert_eq!(derive_text_labels(&a, &cfg).unwrap(), derive_text_labels(&b, &cfg).unwrap());
        let mut c = vec![0; 64 * 64];
        fill(&mut c, 64, 44..48, 20..24);
        let (la, lc) = (derive_text_labels(&a, &cfg).unwrap(), derive_text_labels(&c, &cfg).unwrap());
        assert_eq!((la.left_loc, lc.left_loc), (2, 3));
        assert_eq!((la.right_loc, la.infection, la.num), (lc.right_loc, lc.infection, lc.num));
    }

    #[test]
    fn placed_right_lower_lesion() {
        let cfg = GenConfig::default();
        let l = Lesion { cx: 48, cy: 55, a: 3.0, b: 3.0, theta: 0.0 };
        let s = sample_from_lesions(0, &[l], &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.labels, Labels { infection: 0, num: 0, left_loc: 0, right_loc: 3 });
        assert!(s.mask.iter().filter(|&&m| m == 1).count() >= 28);
    }

    #[test]
    fn samples_are_deterministic_and_bounded() {
        let cfg = GenConfig::default();
        for seed in 0..50 {
            let a = generate_sample(seed, &cfg).unwrap();
            assert_eq!(a, generate_sample(seed, &cfg).unwrap());
            assert!(a.image.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(a.mask.iter().filter(|&&m| m == 1).count() >= 28);
        }
    }

    #[test]
    fn infeasible_radius_rejected() {
        let cfg = GenConfig { radius_max: 16.0, ..GenConfig::default() };
        assert!(generate_sample(0, &cfg).unwrap_err().is_invalid_argument());
    }

    #[test]
    fn split_sizes_and_seeds() {
        let cfg = GenConfig::default();
        let s = generate_split(9, 4, 2, 3, &cfg).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (4, 2, 3));
        let seeds: Vec<u64> = s.train.iter().chain(&s.val).chain(&s.test).map(|x| x.seed).collect();
        assert_eq!(seeds, (0..9u64).map(|i| 9 ^ i).collect::<Vec<_>>());
        assert!(generate_split(0, 0, 1, 1, &cfg).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = GenConfig::default();
        let samples: Vec<_> = (0..3).map(|i| generate_sample(i, &cfg).unwrap()).collect();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &samples).unwrap();
        assert_eq!(buf.len(), 9 + 3 * (5 * 64 * 64 + 12));
        assert_eq!(read_dataset(&mut buf.as_slice()).unwrap(), samples);
        buf[0] = b'X';
        assert!(read_dataset(&mut buf.as_slice()).is_err());
    }
}
