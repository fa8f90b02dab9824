//! Loading a generated dataset directory back into memory.
//!
//! Samples are discovered by listing `*.ppm` files and pairing each with its
//! `.txt` label sibling; an image without labels (or labels without an
//! image) is an error that names the file. Order is lexicographic by file
//! name, so iteration is deterministic on every platform.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{BBox, GroundTruth};
use crate::tensor::Tensor;

use super::labels::{parse_labels, Label};
use super::ppm::parse_ppm;
use super::NUM_CLASSES;

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSample {
    /// File stem, e.g. `img_00003`.
    pub name: String,
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB bytes as stored on disk.
    pub pixels: Vec<u8>,
    pub labels: Vec<Label>,
}

impl LoadedSample {
    /// Image as a [3, H, W] tensor scaled to [0, 1].
    pub fn image_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0.0; 3 * h * w];
        for i in 0..h * w {
            for c in 0..3 {
                data[c * h * w + i] = self.pixels[i * 3 + c] as f64 / 255.0;
            }
        }
        Tensor::new(&[3, h, w], data).expect("shape matches construction")
    }

    /// Labels as pixel-space ground truths for the evaluator.
    pub fn ground_truths(&self, image_id: usize) -> Result<Vec<GroundTruth>> {
        let mut out = Vec::with_capacity(self.labels.len());
        for l in &self.labels {
            let (x1, y1, x2, y2) = l.corners();
            out.push(GroundTruth {
                image_id,
                class_id: l.class_id,
                bbox: BBox::new(
                    x1 * self.width as f64,
                    y1 * self.height as f64,
                    x2 * self.width as f64,
                    y2 * self.height as f64,
                )?,
            });
        }
        Ok(out)
    }
}

/// Load every sample in `dir`, sorted by file name. An empty directory gives
/// an empty vector.
pub fn load_dir(dir: &Path) -> Result<Vec<LoadedSample>> {
    let mut ppm_stems: Vec<String> = Vec::new();
    let mut txt_stems: Vec<String> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let (Some(stem), Some(ext)) = (
            path.file_stem().and_then(|s| s.to_str()),
            path.extension().and_then(|s| s.to_str()),
        ) else {
            continue;
        };
        match ext {
            "ppm" => ppm_stems.push(stem.to_string()),
            // The generator drops a config echo next to the samples; it is
            // dataset metadata, not an orphan label.
            "txt" if stem != "config.resolved" => txt_stems.push(stem.to_string()),
            _ => {}
        }
    }
    ppm_stems.sort();
    txt_stems.sort();
    for stem in &txt_stems {
        if !ppm_stems.contains(stem) {
            return Err(Error::Data(format!(
                "orphan label file {stem}.txt has no matching image"
            )));
        }
    }

    let mut out = Vec::with_capacity(ppm_stems.len());
    for stem in ppm_stems {
        let img_path = dir.join(format!("{stem}.ppm"));
        let txt_path = dir.join(format!("{stem}.txt"));
        if !txt_path.exists() {
            return Err(Error::Data(format!(
                "orphan image file {stem}.ppm has no matching labels"
            )));
        }
        let bytes = fs::read(&img_path)?;
        let img = parse_ppm(&bytes, &img_path.to_string_lossy())?;
        let text = fs::read_to_string(&txt_path)?;
        let labels = parse_labels(&text, &txt_path.to_string_lossy(), NUM_CLASSES)?;
        out.push(LoadedSample {
            name: stem,
            width: img.width,
            height: img.height,
            pixels: img.pixels,
            labels,
        });
    }
    Ok(out)
}
