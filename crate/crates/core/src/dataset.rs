//! On-disk dataset layout:
//!
//! ```text
//! <root>/vocab.txt
//! <root>/<split>/samples.jsonl
//! <root>/<split>/images/<id>.png   RGB
//! <root>/<split>/masks/<id>.png    8-bit grey, 0 or 255
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{Object, Sample, SceneSpec, Split};
use crate::vocab::Vocab;

/// One line of `samples.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub tokens: Vec<u32>,
    pub text: String,
    /// The referred object.
    pub object: Object,
    pub scene: SceneSpec,
}

pub fn write_rgb(path: &Path, size: usize, rgb: &[u8]) -> Result<()> {
    let img = RgbImage::from_raw(size as u32, size as u32, rgb.to_vec())
        .ok_or_else(|| Error::Internal("RGB buffer does not match its size".into()))?;
    img.save(path)?;
    Ok(())
}

/// Saves a 0/1 (or 0/255) mask as a 0/255 greyscale PNG.
pub fn write_mask(path: &Path, size: usize, mask: &[u8]) -> Result<()> {
    let px: Vec<u8> = mask.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    write_gray(path, size, size, &px)
}

pub fn write_gray(path: &Path, width: usize, height: usize, px: &[u8]) -> Result<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, px.to_vec())
        .ok_or_else(|| Error::Internal("greyscale buffer does not match its size".into()))?;
    img.save(path)?;
    Ok(())
}

/// Writes one split, creating its directories as needed.
pub fn export_split(root: &Path, split: Split, samples: &[Sample]) -> Result<()> {
    let dir = root.join(split.name());
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut lines = BufWriter::new(fs::File::create(dir.join("samples.jsonl"))?);
    for s in samples {
        write_rgb(&dir.join("images").join(format!("{}.png", s.id)), s.size, &s.rgb)?;
        write_mask(&dir.join("masks").join(format!("{}.png", s.id)), s.size, &s.gt)?;
        let meta = SampleMeta {
            id: s.id.clone(),
            tokens: s.tokens.clone(),
            text: s.text.clone(),
            object: *s.scene.referred(),
            scene: s.scene.clone(),
        };
        serde_json::to_writer(&mut lines, &meta)?;
        lines.write_all(b"\n")?;
    }
    lines.flush()?;
    Ok(())
}

pub fn write_vocab(root: &Path, vocab: &Vocab) -> Result<()> {
    fs::create_dir_all(root)?;
    vocab.save(&root.join("vocab.txt"))
}

/// Reads a split back; masks are returned as 0/1.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<Sample>> {
    let dir = root.join(split.name());
    let file = fs::File::open(dir.join("samples.jsonl"))
        .map_err(|e| Error::Input(format!("cannot open {}: {e}", dir.join("samples.jsonl").display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let meta: SampleMeta = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("samples.jsonl line {}: {e}", n + 1)))?;
        let img = image::open(dir.join("images").join(format!("{}.png", meta.id)))?.into_rgb8();
        let mask = image::open(dir.join("masks").join(format!("{}.png", meta.id)))?.into_luma8();
        if img.width() != img.height() || mask.dimensions() != img.dimensions() {
            return Err(Error::Input(format!("{}: image and mask sizes disagree", meta.id)));
        }
        out.push(Sample {
            id: meta.id,
            size: img.width() as usize,
            rgb: img.into_raw(),
            text: meta.text,
            tokens: meta.tokens,
            gt: mask.into_raw().into_iter().map(|v| (v >= 128) as u8).collect(),
            scene: meta.scene,
        });
    }
    if out.is_empty() {
        return Err(Error::Input(format!("split {} in {} is empty", split.name(), root.display())));
    }
    Ok(out)
}
