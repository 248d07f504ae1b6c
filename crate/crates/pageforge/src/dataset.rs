//! On-disk datasets: `<root>/{split}/pages/*.png`, one `<root>/{split}.jsonl`
//! per split, `<root>/stats.json` and the generator settings in
//! `<root>/gen.json`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use pageforge_core::detect::BBox;
use pageforge_core::ner::TagSet;
use pageforge_core::synth::{
    dataset_stats, gen_page, DatasetStats, GenConfig, PageSample, Split, WordAnnotation,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par_map;

pub const STATS_FILE: &str = "stats.json";
pub const GEN_FILE: &str = "gen.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WordRecord {
    /// `[cx, cy, w, h]` in pixels.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub text: String,
    pub tag: String,
}

/// One line of a split file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageRecord {
    /// Image path relative to the dataset root.
    pub image: String,
    pub words: Vec<WordRecord>,
}

pub fn split_file(root: &Path, split: Split) -> PathBuf {
    root.join(format!("{}.jsonl", split.name()))
}

fn page_path(split: Split, i: usize) -> String {
    format!("{}/pages/{i:05}.png", split.name())
}

pub fn save_png(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::format(path, e))?;
    w.write_image_data(pixels)
        .map_err(|e| Error::format(path, e))?;
    w.finish().map_err(|e| Error::format(path, e))
}

/// Reads any 8- or 16-bit PNG as 8-bit gray, `(height, width, pixels)`.
pub fn load_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let gray = match info.color_type {
        png::ColorType::Grayscale => data.to_vec(),
        png::ColorType::GrayscaleAlpha => data.chunks_exact(2).map(|p| p[0]).collect(),
        png::ColorType::Rgb => data.chunks_exact(3).map(luma).collect(),
        png::ColorType::Rgba => data.chunks_exact(4).map(luma).collect(),
        png::ColorType::Indexed => return Err(Error::format(path, "palette was not expanded")),
    };
    if gray.len() != w * h {
        return Err(Error::format(path, "unexpected pixel count"));
    }
    Ok((h, w, gray))
}

fn luma(p: &[u8]) -> u8 {
    ((299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32 + 500) / 1000) as u8
}

fn is_non_empty_dir(p: &Path) -> bool {
    fs::read_dir(p)
        .map(|mut d| d.next().is_some())
        .unwrap_or(false)
}

/// Generates all splits of `cfg` under `root`. A non-empty `root` is refused
/// unless `force`, which replaces the dataset files but nothing else.
pub fn write_dataset(root: &Path, cfg: &GenConfig, force: bool) -> Result<DatasetStats> {
    cfg.validate()?;
    if root.is_file() {
        return Err(Error::Usage(format!("{} is a file", root.display())));
    }
    if is_non_empty_dir(root) {
        if !force {
            return Err(Error::Usage(format!(
                "{} is not empty; pass --force to overwrite",
                root.display()
            )));
        }
        for split in Split::ALL {
            let d = root.join(split.name());
            if d.exists() {
                fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            }
            let f = split_file(root, split);
            if f.exists() {
                fs::remove_file(&f).map_err(|e| Error::io(&f, e))?;
            }
        }
    }
    let tags = TagSet::default();
    let mut generated = Vec::new();
    for split in Split::ALL {
        let dir = root.join(split.name()).join("pages");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let idx: Vec<usize> = (0..cfg.pages(split)).collect();
        let pages = par_map(&idx, |&i| gen_page(cfg, cfg.page_seed(split, i)))
            .into_iter()
            .collect::<pageforge_core::Result<Vec<_>>>()?;
        let path = split_file(root, split);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        for (i, p) in pages.iter().enumerate() {
            let rel = page_path(split, i);
            save_png(&root.join(&rel), p.height, p.width, &p.pixels)?;
            let rec = PageRecord {
                image: rel,
                words: p.words.iter().map(word_record).collect(),
            };
            let line = serde_json::to_string(&rec).expect("records serialize");
            writeln!(out, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))?;
        generated.push((split, pages));
    }
    let refs: Vec<(Split, &[PageSample])> =
        generated.iter().map(|(s, p)| (*s, p.as_slice())).collect();
    let stats = dataset_stats(cfg, tags.tags(), &refs);
    write_json(&root.join(GEN_FILE), cfg)?;
    write_json(&root.join(STATS_FILE), &stats)?;
    Ok(stats)
}

fn word_record(w: &WordAnnotation) -> WordRecord {
    WordRecord {
        bbox: w.bbox.to_array(),
        text: w.text.clone(),
        tag: w.tag.clone(),
    }
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::format(path, e))
}

/// Checks that `root` looks like a dataset; a usage error otherwise.
pub fn check_root(root: &Path) -> Result<()> {
    if !root.is_dir() {
        return Err(Error::Usage(format!(
            "dataset directory {} does not exist",
            root.display()
        )));
    }
    Ok(())
}

/// Loads every page of one split.
pub fn read_split(root: &Path, split: Split) -> Result<Vec<PageSample>> {
    check_root(root)?;
    let path = split_file(root, split);
    if !path.is_file() {
        return Err(Error::Usage(format!("{} is missing", path.display())));
    }
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PageRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(&path, format!("line {}: {e}", n + 1)))?;
        records.push(rec);
    }
    let pages = par_map(&records, |rec| -> Result<PageSample> {
        let (height, width, pixels) = load_png(&root.join(&rec.image))?;
        let words = rec
            .words
            .iter()
            .map(|w| WordAnnotation {
                bbox: BBox::new(w.bbox[0], w.bbox[1], w.bbox[2], w.bbox[3]),
                text: w.text.clone(),
                tag: w.tag.clone(),
            })
            .collect();
        Ok(PageSample {
            height,
            width,
            pixels,
            words,
        })
    });
    pages.into_iter().collect()
}

/// Recomputes the statistics of a dataset from its files.
pub fn compute_stats(root: &Path) -> Result<DatasetStats> {
    check_root(root)?;
    let cfg: GenConfig = read_json(&root.join(GEN_FILE))?;
    let mut splits = Vec::new();
    for split in Split::ALL {
        splits.push((split, read_split(root, split)?));
    }
    let refs: Vec<(Split, &[PageSample])> =
        splits.iter().map(|(s, p)| (*s, p.as_slice())).collect();
    Ok(dataset_stats(&cfg, TagSet::default().tags(), &refs))
}
