//! PNG images, JSON-lines dataset manifests, raw probability dumps, and
//! conversion between images and tensors.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::synth::{self, ScenePairSpec, CHANGED, UNCHANGED};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TRAIN_FRACTION: f64 = 0.8;
const PROB_MAGIC: &[u8; 4] = b"CDPM";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub t1: String,
    pub t2: String,
    pub gt: String,
    pub split: Split,
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    require(path)?;
    Ok(image::open(path)?.to_rgb8())
}

/// Load a change mask; only 0 (unchanged) and 255 (changed) are accepted.
pub fn load_mask(path: &Path) -> Result<GrayImage> {
    require(path)?;
    let mask = image::open(path)?.to_luma8();
    if let Some(bad) = mask.pixels().find(|p| p.0[0] != CHANGED && p.0[0] != UNCHANGED) {
        return Err(Error::InvalidArgument(format!(
            "{}: mask value {} is neither 0 nor 255",
            path.display(),
            bad.0[0]
        )));
    }
    Ok(mask)
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn mask_to_bools(mask: &GrayImage) -> Vec<bool> {
    mask.pixels().map(|p| p.0[0] == CHANGED).collect()
}

pub fn bools_to_mask(values: &[bool], width: u32, height: u32) -> Result<GrayImage> {
    let data = values.iter().map(|&b| if b { CHANGED } else { UNCHANGED }).collect();
    GrayImage::from_raw(width, height, data)
        .ok_or_else(|| Error::shape("bools_to_mask", &[values.len()], &[(width * height) as usize]))
}

/// 8-bit rendering of a probability map, `round(255 * p)`.
pub fn prob_to_gray(prob: &[f64], width: u32, height: u32) -> Result<GrayImage> {
    let data = prob
        .iter()
        .map(|&p| (255.0 * p.clamp(0.0, 1.0)).round() as u8)
        .collect();
    GrayImage::from_raw(width, height, data)
        .ok_or_else(|| Error::shape("prob_to_gray", &[prob.len()], &[(width * height) as usize]))
}

/// Raw probability map: `"CDPM"`, width and height as little-endian u32,
/// then row-major little-endian f32 values.
pub fn write_prob_map(path: &Path, prob: &[f64], width: u32, height: u32) -> Result<()> {
    if prob.len() != (width * height) as usize {
        return Err(Error::shape(
            "write_prob_map",
            &[prob.len()],
            &[(width * height) as usize],
        ));
    }
    let mut buf = Vec::with_capacity(12 + 4 * prob.len());
    buf.extend_from_slice(PROB_MAGIC);
    buf.extend_from_slice(&width.to_le_bytes());
    buf.extend_from_slice(&height.to_le_bytes());
    for &p in prob {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_prob_map(path: &Path) -> Result<(Vec<f64>, u32, u32)> {
    require(path)?;
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[..4] != PROB_MAGIC {
        return Err(Error::InvalidArgument(format!(
            "{} is not a raw probability map",
            path.display()
        )));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let height = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let body = &bytes[12..];
    if body.len() != 4 * (width as usize) * (height as usize) {
        return Err(Error::InvalidArgument(format!(
            "{}: truncated probability map",
            path.display()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((values, width, height))
}

/// Scale 8-bit RGB to `[-1, 1]` as a `1 x 3 x H x W` tensor.
pub fn rgb_to_tensor<T: Element>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut data = vec![T::zero(); 3 * w * h];
    for c in 0..3 {
        for i in 0..w * h {
            data[c * w * h + i] = T::from_f64(raw[3 * i + c] as f64 / 127.5 - 1.0);
        }
    }
    Tensor::from_parts(vec![1, 3, h, w], data)
}

/// `{0, 1}` mask tensor `1 x 1 x H x W`.
pub fn mask_to_tensor<T: Element>(mask: &GrayImage) -> Tensor<T> {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let data = mask
        .pixels()
        .map(|p| if p.0[0] == CHANGED { T::one() } else { T::zero() })
        .collect();
    Tensor::from_parts(vec![1, 1, h, w], data)
}

/// One image pair with its mask, as loaded from a manifest.
#[derive(Clone, Debug)]
pub struct PairImages {
    pub t1: RgbImage,
    pub t2: RgbImage,
    pub gt: GrayImage,
    pub split: Split,
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    require(path)?;
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Load every record of the manifest in `dir`. A missing file or a record
/// whose images disagree in size is an error.
pub fn load_dataset(dir: &Path) -> Result<Vec<PairImages>> {
    let records = read_manifest(&dir.join(MANIFEST_FILE))?;
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!("{}: empty manifest", dir.display())));
    }
    records
        .iter()
        .map(|r| {
            let t1 = load_rgb(&dir.join(&r.t1))?;
            let t2 = load_rgb(&dir.join(&r.t2))?;
            let gt = load_mask(&dir.join(&r.gt))?;
            if t1.dimensions() != t2.dimensions() || t1.dimensions() != gt.dimensions() {
                return Err(Error::InvalidArgument(format!(
                    "record {} has mismatched image sizes",
                    r.t1
                )));
            }
            Ok(PairImages {
                t1,
                t2,
                gt,
                split: r.split,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct GeneratedDataset {
    pub dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

/// Generate `pairs` synthetic scenes into `dir` with a seeded train/val split.
pub fn generate_dataset(
    dir: &Path,
    pairs: usize,
    size: usize,
    seed: u64,
    change_fraction: f64,
) -> Result<GeneratedDataset> {
    if pairs == 0 {
        return Err(Error::InvalidArgument("at least one pair is required".into()));
    }
    fs::create_dir_all(dir)?;
    let mut master = RngStream::new(seed);
    let mut order: Vec<usize> = (0..pairs).collect();
    master.shuffle(&mut order);
    let n_train = ((pairs as f64) * TRAIN_FRACTION).round() as usize;
    let mut split = vec![Split::Val; pairs];
    for &i in order.iter().take(n_train) {
        split[i] = Split::Train;
    }

    let mut records = Vec::with_capacity(pairs);
    for (i, split) in split.into_iter().enumerate() {
        let mut spec = ScenePairSpec::new(size, master.next_u64());
        spec.change_fraction = change_fraction;
        let pair = synth::generate_pair(&spec)?;
        let rec = ManifestRecord {
            t1: format!("{i:04}_t1.png"),
            t2: format!("{i:04}_t2.png"),
            gt: format!("{i:04}_gt.png"),
            split,
        };
        save_rgb(&pair.t1, &dir.join(&rec.t1))?;
        save_rgb(&pair.t2, &dir.join(&rec.t2))?;
        save_gray(&pair.gt, &dir.join(&rec.gt))?;
        records.push(rec);
    }
    write_manifest(&dir.join(MANIFEST_FILE), &records)?;
    Ok(GeneratedDataset {
        dir: dir.to_path_buf(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prob_map_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.f32");
        let prob = vec![0.0, 0.25, 0.5, 1.0, 0.125, 0.75];
        write_prob_map(&path, &prob, 3, 2).unwrap();
        let (back, w, h) = read_prob_map(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back, prob);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(read_prob_map(&path).is_err());
    }

    #[test]
    fn manifest_split_and_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(dir.path(), 10, 32, 4, 0.5).unwrap();
        let train = ds.records.iter().filter(|r| r.split == Split::Train).count();
        assert_eq!(train, 8);
        assert_eq!(load_dataset(dir.path()).unwrap().len(), 10);

        fs::remove_file(dir.path().join(&ds.records[3].t2)).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)), "{err}");
    }

    #[test]
    fn non_binary_mask_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mut m = GrayImage::new(2, 2);
        m.put_pixel(0, 0, image::Luma([128]));
        save_gray(&m, &path).unwrap();
        assert!(load_mask(&path).is_err());
    }

    #[test]
    fn tensor_conversion_ranges() {
        let img = RgbImage::from_raw(1, 1, vec![0, 255, 51]).unwrap();
        let t: Tensor<f64> = rgb_to_tensor(&img);
        assert_eq!(t.shape(), &[1, 3, 1, 1]);
        assert_eq!(t.data()[0], -1.0);
        assert_eq!(t.data()[1], 1.0);
    }
}
