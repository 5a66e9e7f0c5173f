//! Detection results files, split manifests and a minimal PPM codec.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::coco::{CocoDoc, SplitAssignment};
use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::tensor::Tensor;

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write detections in COCO results layout.
pub fn export_detections(dets: &[Detection], path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(dets).expect("serializable");
    write_file(path.as_ref(), text.as_bytes())
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Seeded shuffle of the image ids, then cut by rounded ratios. The last
/// split takes whatever rounding leaves over.
pub fn split_manifest(doc: &CocoDoc, ratios: &[f64], seed: u64) -> Result<SplitAssignment> {
    if ratios.is_empty() || ratios.len() > SPLIT_NAMES.len() || ratios.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios sum to {sum}, expected 1")));
    }
    let mut ids: Vec<u64> = doc.images.iter().map(|im| im.id).collect();
    ids.sort_unstable();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let mut out = SplitAssignment::new();
    let mut start = 0;
    for (k, r) in ratios.iter().enumerate() {
        let end = if k + 1 == ratios.len() {
            n
        } else {
            (start + (r * n as f64).round() as usize).min(n)
        };
        for id in &ids[start..end] {
            out.insert(*id, SPLIT_NAMES[k].to_string());
        }
        start = end;
    }
    Ok(out)
}

/// One `<split>.txt` per split with one image id per line, ascending.
pub fn write_split_manifest(splits: &SplitAssignment, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut paths = Vec::new();
    for name in SPLIT_NAMES {
        let mut text = String::new();
        for (id, _) in splits.iter().filter(|(_, s)| s.as_str() == name) {
            text.push_str(&format!("{id}\n"));
        }
        let p = dir.join(format!("{name}.txt"));
        write_file(&p, text.as_bytes())?;
        paths.push(p);
    }
    Ok(paths)
}

pub fn read_split_manifest(dir: impl AsRef<Path>) -> Result<SplitAssignment> {
    let mut out = SplitAssignment::new();
    for name in SPLIT_NAMES {
        let p = dir.as_ref().join(format!("{name}.txt"));
        if !p.exists() {
            continue;
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        for (i, line) in text.lines().map(str::trim).enumerate().filter(|(_, l)| !l.is_empty()) {
            let id = line
                .parse()
                .map_err(|_| Error::Format(format!("{}:{}: bad image id {line:?}", p.display(), i + 1)))?;
            out.insert(id, name.to_string());
        }
    }
    Ok(out)
}

/// Binary PPM (P6) from a `[3, H, W]` tensor in `[0, 1]`.
pub fn write_ppm(img: &Tensor<f64>, path: impl AsRef<Path>) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("write_ppm", format!("expected [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut bytes = Vec::with_capacity(3 * h * w + 20);
    write!(bytes, "P6\n{w} {h}\n255\n").expect("in-memory write");
    let d = img.data();
    for i in 0..h * w {
        for c in 0..3 {
            bytes.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_file(path.as_ref(), &bytes)
}

/// Read an ASCII (P3) or binary (P6) PPM with maxval ≤ 255 into `[3, H, W]`.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let num = |t: String| t.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM number {t:?}")));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
    }
    let n = w * h * 3;
    let samples: Vec<usize> = match magic.as_str() {
        "P6" => {
            let start = pos + 1;
            let body = bytes.get(start..start + n).ok_or_else(|| Error::Format("truncated PPM data".into()))?;
            body.iter().map(|b| *b as usize).collect()
        }
        "P3" => {
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(num(token()?)?);
            }
            v
        }
        m => return Err(Error::Format(format!("unsupported PPM magic {m:?}"))),
    };
    let mut data = vec![0.0; n];
    for (i, px) in samples.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px[c] as f64 / maxval as f64;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}
