//! Triplet dataset directories.
//!
//! Layout: `index.json` lists the samples; each sample directory holds
//! `i0.png`, `it.png` and `i1.png` as 16-bit PNG.

use std::path::Path;

use fldr_core::synthetic::Triplet;
use serde::{Deserialize, Serialize};

use crate::error::{FldrError, Result};
use crate::io::{read_image, write_image, BitDepth};

const INDEX: &str = "index.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub name: String,
    pub t: f64,
    /// Ground-truth displacement between the outer frames, if known.
    pub flow: Option<[f64; 2]>,
}

pub fn save_dataset(dir: &Path, samples: &[Triplet<f32>]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| FldrError::io(dir, e))?;
    let mut index = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample_{i:06}");
        let sub = dir.join(&name);
        write_image(&sub.join("i0.png"), &s.i0, BitDepth::Sixteen)?;
        write_image(&sub.join("it.png"), &s.it, BitDepth::Sixteen)?;
        write_image(&sub.join("i1.png"), &s.i1, BitDepth::Sixteen)?;
        index.push(SampleEntry { name, t: s.t, flow: s.flow });
    }
    let path = dir.join(INDEX);
    let text = serde_json::to_string_pretty(&index).expect("index serialises");
    std::fs::write(&path, text).map_err(|e| FldrError::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Triplet<f32>>> {
    let path = dir.join(INDEX);
    let text = std::fs::read_to_string(&path).map_err(|e| FldrError::io(&path, e))?;
    let index: Vec<SampleEntry> =
        serde_json::from_str(&text).map_err(|e| FldrError::data(format_args!("{}: {e}", path.display())))?;
    index
        .into_iter()
        .map(|e| {
            if !(e.t > 0.0 && e.t < 1.0) {
                return Err(FldrError::data(format_args!("{}: sample {} has t = {} outside (0, 1)", path.display(), e.name, e.t)));
            }
            let sub = dir.join(&e.name);
            let s = Triplet { i0: read_image(&sub.join("i0.png"))?, it: read_image(&sub.join("it.png"))?, i1: read_image(&sub.join("i1.png"))?, t: e.t, flow: e.flow };
            if s.it.shape() != s.i0.shape() || s.i1.shape() != s.i0.shape() {
                return Err(FldrError::data(format_args!("{}: frames differ in size", sub.display())));
            }
            Ok(s)
        })
        .collect()
}
