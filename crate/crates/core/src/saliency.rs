//! Decoder activation maps and binary PGM I/O.

use std::path::{Path, PathBuf};

use stpnet_autodiff::{Element, Graph, Tensor};

use crate::error::{invalid, Error, Result};
use crate::model::{ForwardOptions, StpnetModel};
use crate::textbank::EncodedBank;

/// Binary (P5) greyscale image with maxval 255.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        invalid!("{} pixels for a {width}x{height} image", pixels.len());
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a P5 or P2 image, returning `(width, height, values in [0, 1])`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    parse_pgm(&std::fs::read(path)?)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM header field {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    let scale = 1.0 / maxval as f32;
    let vals: Vec<f32> = match fields[0].as_str() {
        "P5" => {
            let data = &bytes[(pos + 1).min(bytes.len())..];
            if data.len() < w * h {
                return Err(Error::Format("truncated PGM pixel data".into()));
            }
            data[..w * h].iter().map(|&b| f32::from(b) * scale).collect()
        }
        "P2" => String::from_utf8_lossy(&bytes[pos..])
            .split_ascii_whitespace()
            .take(w * h)
            .map(|s| num(s).map(|v| v as f32 * scale))
            .collect::<Result<_>>()?,
        other => return Err(Error::Format(format!("unsupported image type {other}"))),
    };
    if vals.len() != w * h {
        return Err(Error::Format("truncated PGM pixel data".into()));
    }
    Ok((w, h, vals))
}

/// Channel-mean absolute activation of a `[1, C, h, w]` map, min-max scaled
/// to `0..=255` and nearest-upsampled to `size x size`. A constant map comes
/// out all zeros.
pub fn saliency_map<T: Element>(act: &Tensor<T>, size: usize) -> Result<Vec<u8>> {
    let &[1, c, h, w] = act.shape() else { invalid!("expected a single-sample activation, got {:?}", act.shape()) };
    if size % h != 0 || size % w != 0 {
        invalid!("{h}x{w} map does not divide {size}");
    }
    let plane = h * w;
    let mut m = vec![0.0f64; plane];
    for ch in act.data().chunks_exact(plane) {
        for (a, v) in m.iter_mut().zip(ch) {
            *a += v.as_f64().abs() / c as f64;
        }
    }
    let (lo, hi) = m.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let span = hi - lo;
    let q: Vec<u8> = m.iter().map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }).collect();
    let (fy, fx) = (size / h, size / w);
    Ok((0..size * size).map(|i| q[(i / size / fy) * w + (i % size) / fx]).collect())
}

/// Writes `{prefix}_up{k}.pgm` for the four decoder blocks (k = 1 deepest)
/// and `{prefix}_mask.pgm`, returning the paths in that order.
pub fn export_saliency<T: Element>(
    model: &StpnetModel<T>,
    bank: &EncodedBank,
    image: &[f32],
    opts: ForwardOptions,
    prefix: &str,
) -> Result<Vec<PathBuf>> {
    let s = model.cfg().image_size;
    if image.len() != s * s {
        invalid!("image has {} pixels, model expects {s}x{s}", image.len());
    }
    let img = Tensor::from_vec(&[1, 1, s, s], image.iter().map(|&v| T::from_f64_lossy(f64::from(v))).collect())?;
    let mut store = model.store.clone();
    let mut g = Graph::new(&mut store, false);
    let out = model.net.forward(&mut g, &img, bank, opts, None)?;
    let mut paths = Vec::new();
    for (k, &u) in out.up.iter().enumerate() {
        let path = PathBuf::from(format!("{prefix}_up{}.pgm", k + 1));
        write_pgm(&path, s, s, &saliency_map(g.tape.value(u), s)?)?;
        paths.push(path);
    }
    let mask: Vec<u8> = g.tape.value(out.logits).data().iter().map(|v| if v.as_f64() > 0.0 { 255 } else { 0 }).collect();
    let path = PathBuf::from(format!("{prefix}_mask.pgm"));
    write_pgm(&path, s, s, &mask)?;
    paths.push(path);
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let px: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        write_pgm(&p, 4, 3, &px).unwrap();
        let (w, h, v) = read_pgm(&p).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(v.iter().map(|x| (x * 255.0).round() as u8).collect::<Vec<_>>(), px);
    }

    #[test]
    fn ascii_pgm_with_comment() {
        let (w, h, v) = parse_pgm(b"P2\n# c\n2 1\n4\n0 4\n").unwrap();
        assert_eq!((w, h, v), (2, 1, vec![0.0, 1.0]));
        assert!(parse_pgm(b"P6\n1 1\n255\n\0\0\0").is_err());
    }

    #[test]
    fn constant_activation_maps_to_zero() {
        let t = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let m = saliency_map(&t, 16).unwrap();
        assert_eq!(m.len(), 256);
        assert!(m.iter().all(|&v| v == 0));
    }

    #[test]
    fn min_max_scaling_and_upsampling() {
        let t = Tensor::<f32>::from_f64(&[1, 2, 2, 2], &[0.0, 1.0, 2.0, 3.0, 0.0, -1.0, -2.0, -3.0]).unwrap();
        let m = saliency_map(&t, 4).unwrap();
        assert_eq!(&m[..4], &[0, 0, 85, 85]);
        assert_eq!(m[15], 255);
    }
}
