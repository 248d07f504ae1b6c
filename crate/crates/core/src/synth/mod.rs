//! Synthetic handwritten-looking pages with word boxes, transcriptions and
//! entity tags.
//!
//! Three regimes exercise different kinds of tag evidence:
//! * `records`: marriage-record lines following a fixed grammar, tags mostly
//!   follow from word identity;
//! * `forms`: rows introduced by a printed key; values come from one shared
//!   vocabulary so only the layout tells the tag;
//! * `prose`: running text where a trigger word fixes the tag of the next
//!   word, which may sit at the start of the following line.

mod font;
pub mod vocab;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::detect::BBox;
use crate::error::{bail, Error, Result};
use crate::ner::OTHER;

pub use font::{has_glyph, GLYPH_H, GLYPH_W};

/// Longest word the renderer accepts.
pub const MAX_WORD_LEN: usize = 15;

/// Rendering parameters for one word.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordStyle {
    pub scale_x: usize,
    pub scale_y: usize,
    /// Degrees; positive leans right.
    pub shear_deg: f64,
    /// Extra pixels added to the right and bottom of every glyph dot.
    pub thickness: usize,
    /// Per-character vertical offset drawn from `-j..=j`.
    pub baseline_jitter: usize,
    /// Gaussian noise on ink pixels.
    pub noise_sigma: f64,
    /// Fraction of ink pixels dropped.
    pub dropout: f64,
    pub ink: f32,
}

impl WordStyle {
    /// Noise-free, unsheared, unjittered style.
    pub fn clean(scale: usize) -> Self {
        WordStyle {
            scale_x: scale,
            scale_y: scale,
            shear_deg: 0.0,
            thickness: 0,
            baseline_jitter: 0,
            noise_sigma: 0.0,
            dropout: 0.0,
            ink: 1.0,
        }
    }
}

/// A rendered word: ink intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct WordImage {
    pub width: usize,
    pub height: usize,
    pub ink: Vec<f32>,
    /// Smallest box covering every non-zero pixel, bitmap coordinates.
    pub tight: BBox,
}

impl WordImage {
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.ink[y * self.width + x]
    }
}

fn validate_word(text: &str) -> Result<Vec<&'static [u8; 7]>> {
    let n = text.chars().count();
    if n == 0 || n > MAX_WORD_LEN {
        bail!(
            InvalidArgument,
            "word `{text}` must have 1..={MAX_WORD_LEN} characters"
        );
    }
    text.chars()
        .map(|c| {
            font::glyph(c).ok_or_else(|| Error::InvalidArgument(format!("no glyph for `{c}`")))
        })
        .collect()
}

/// Rasterises `text` with 5x7 glyphs. Deterministic for a given style and
/// RNG state.
pub fn render_word(text: &str, style: &WordStyle, rng: &mut impl Rng) -> Result<WordImage> {
    let glyphs = validate_word(text)?;
    let (sx, sy) = (style.scale_x, style.scale_y);
    if sx == 0 || sy == 0 {
        bail!(InvalidArgument, "glyph scale must be positive");
    }
    if !(0.0..=1.0).contains(&style.dropout) || style.noise_sigma < 0.0 {
        bail!(InvalidArgument, "noise parameters out of range");
    }
    let n = glyphs.len();
    let j = style.baseline_jitter;
    let t = style.thickness;
    let height = GLYPH_H * sy + 2 * j + t;
    let tan = libm::tan(style.shear_deg.to_radians());
    let extent = libm::ceil(libm::fabs(tan) * (height - 1) as f64) as usize;
    let width = n * (GLYPH_W + 1) * sx - sx + t + extent;
    let shift = |y: usize| -> usize {
        let s = libm::round(tan * (height - 1 - y) as f64) as i64;
        (if tan < 0.0 { extent as i64 + s } else { s }) as usize
    };
    let mut ink = vec![0.0f32; width * height];
    for (i, g) in glyphs.iter().enumerate() {
        let dy = if j > 0 {
            rng.random_range(0..=2 * j)
        } else {
            j
        };
        let x0 = i * (GLYPH_W + 1) * sx;
        for r in 0..GLYPH_H {
            for c in 0..GLYPH_W {
                if !font::bit(g, r, c) {
                    continue;
                }
                for yy in r * sy..(r + 1) * sy + t {
                    let py = dy + yy;
                    let off = shift(py);
                    for xx in c * sx..(c + 1) * sx + t {
                        ink[py * width + x0 + xx + off] = 1.0;
                    }
                }
            }
        }
    }
    for v in ink.iter_mut().filter(|v| **v > 0.0) {
        let mut val = style.ink;
        if style.noise_sigma > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            val += (z * style.noise_sigma) as f32;
        }
        if style.dropout > 0.0 && rng.random_bool(style.dropout) {
            val = 0.0;
        } else {
            val = val.clamp(0.05, 1.0);
        }
        *v = val;
    }
    let tight = tight_box(&ink, width, height)
        .ok_or_else(|| Error::InvalidArgument(format!("word `{text}` rendered without ink")))?;
    Ok(WordImage {
        width,
        height,
        ink,
        tight,
    })
}

fn tight_box(ink: &[f32], w: usize, h: usize) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if ink[y * w + x] > 0.0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    (x0 != usize::MAX)
        .then(|| BBox::from_corners(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Records,
    Forms,
    Prose,
}

impl core::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "records" => Ok(Regime::Records),
            "forms" => Ok(Regime::Forms),
            "prose" => Ok(Regime::Prose),
            _ => Err(Error::InvalidArgument(format!("unknown regime `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl core::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub regime: Regime,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub margin: usize,
    pub train_pages: usize,
    pub valid_pages: usize,
    pub test_pages: usize,
    /// Inclusive range of horizontal glyph scales, chosen per page.
    pub scale_x: [usize; 2],
    pub scale_y: [usize; 2],
    pub shear_max_deg: f64,
    pub thickness_max: usize,
    pub baseline_jitter: usize,
    /// Upper bound of the per-page ink noise sigma.
    pub word_noise_max: f64,
    /// Upper bound of the per-page background noise sigma.
    pub page_noise_max: f64,
    /// Upper bound of the per-page salt-and-pepper fraction.
    pub salt_pepper_max: f64,
    /// Target share of entity words in the prose regime.
    pub entity_fraction: f64,
    pub word_gap: [usize; 2],
    pub line_gap: usize,
    pub max_retries: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            regime: Regime::Records,
            seed: 0,
            height: 256,
            width: 320,
            margin: 8,
            train_pages: 50,
            valid_pages: 10,
            test_pages: 10,
            scale_x: [3, 3],
            scale_y: [3, 3],
            shear_max_deg: 15.0,
            thickness_max: 1,
            baseline_jitter: 2,
            word_noise_max: 0.1,
            page_noise_max: 0.1,
            salt_pepper_max: 0.01,
            entity_fraction: 0.17,
            word_gap: [8, 16],
            line_gap: 4,
            max_retries: 8,
        }
    }
}

impl GenConfig {
    pub fn new(regime: Regime, seed: u64) -> Self {
        GenConfig {
            regime,
            seed,
            ..Default::default()
        }
    }

    pub fn pages(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_pages,
            Split::Valid => self.valid_pages,
            Split::Test => self.test_pages,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_range = |r: [usize; 2]| r[0] >= 1 && r[0] <= r[1];
        if !ok_range(self.scale_x)
            || !ok_range(self.scale_y)
            || self.scale_y[1] > 4
            || self.scale_x[1] > 4
        {
            bail!(
                InvalidArgument,
                "glyph scales must lie in 1..=4 with min <= max"
            );
        }
        if !(0.0..=45.0).contains(&self.shear_max_deg) {
            bail!(InvalidArgument, "shear must lie in 0..=45 degrees");
        }
        if !(0.0..=1.0).contains(&self.word_noise_max)
            || !(0.0..=1.0).contains(&self.page_noise_max)
            || !(0.0..=0.5).contains(&self.salt_pepper_max)
        {
            bail!(InvalidArgument, "noise bounds out of range");
        }
        if !(0.0..0.5).contains(&self.entity_fraction) {
            bail!(InvalidArgument, "entity fraction must lie in [0, 0.5)");
        }
        if self.word_gap[0] < 1 || self.word_gap[0] > self.word_gap[1] {
            bail!(InvalidArgument, "word gap range is invalid");
        }
        if self.line_pitch() * 2 + 2 * self.margin > self.height
            || self.width < 2 * self.margin + 64
        {
            bail!(
                InvalidArgument,
                "page of {}x{} is too small",
                self.height,
                self.width
            );
        }
        Ok(())
    }

    /// Vertical distance between line tops; fits the tallest possible word.
    pub fn line_pitch(&self) -> usize {
        GLYPH_H * self.scale_y[1] + 2 * self.baseline_jitter + self.thickness_max + self.line_gap
    }

    /// Seed of one page: the dataset seed xor the page index, with the split
    /// in the high half.
    pub fn page_seed(&self, split: Split, index: usize) -> u64 {
        self.seed ^ (split.index() << 32 | index as u64)
    }
}

/// One annotated word. `bbox` is in center form and tightly covers the ink.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordAnnotation {
    pub bbox: BBox,
    pub text: String,
    pub tag: String,
}

/// A generated page: 8-bit grey pixels (255 is paper) plus annotations in
/// reading order.
#[derive(Clone, Debug, PartialEq)]
pub struct PageSample {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub words: Vec<WordAnnotation>,
}

impl PageSample {
    /// Ink intensities (1 is ink) in `[0, 1]`.
    pub fn ink(&self) -> Vec<f32> {
        self.pixels
            .iter()
            .map(|&p| 1.0 - p as f32 / 255.0)
            .collect()
    }
}

struct Canvas {
    h: usize,
    w: usize,
    ink: Vec<f32>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Canvas {
            h,
            w,
            ink: vec![0.0; h * w],
        }
    }

    fn blit(&mut self, img: &WordImage, x0: usize, y0: usize) {
        for y in 0..img.height {
            for x in 0..img.width {
                let (py, px) = (y0 + y, x0 + x);
                if py < self.h && px < self.w {
                    let d = &mut self.ink[py * self.w + px];
                    *d = d.max(img.at(x, y));
                }
            }
        }
    }

    fn rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, v: f32) {
        for y in y0..=y1.min(self.h - 1) {
            for x in x0..=x1.min(self.w - 1) {
                if y == y0 || y == y1 || x == x0 || x == x1 {
                    self.ink[y * self.w + x] = v;
                }
            }
        }
    }
}

/// Writer style shared by every word of a page.
struct PageStyle {
    scale_x: usize,
    scale_y: usize,
    shear: f64,
    thickness: usize,
    jitter: usize,
    noise: f64,
    ink: f32,
}

impl PageStyle {
    fn draw(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Self {
        let s = cfg.shear_max_deg;
        PageStyle {
            scale_x: rng.random_range(cfg.scale_x[0]..=cfg.scale_x[1]),
            scale_y: rng.random_range(cfg.scale_y[0]..=cfg.scale_y[1]),
            shear: if s > 0.0 {
                rng.random_range(-s..=s)
            } else {
                0.0
            },
            thickness: rng.random_range(0..=cfg.thickness_max),
            jitter: cfg.baseline_jitter,
            noise: if cfg.word_noise_max > 0.0 {
                rng.random_range(0.0..=cfg.word_noise_max)
            } else {
                0.0
            },
            ink: rng.random_range(0.8..=1.0),
        }
    }

    fn word(&self, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> WordStyle {
        let s = cfg.shear_max_deg;
        let shear = (self.shear + rng.random_range(-3.0..=3.0)).clamp(-s, s);
        WordStyle {
            scale_x: self.scale_x,
            scale_y: self.scale_y,
            shear_deg: shear,
            thickness: self.thickness,
            baseline_jitter: self.jitter,
            noise_sigma: self.noise,
            dropout: 0.0,
            ink: self.ink,
        }
    }
}

/// Line-by-line placement of rendered words.
struct Layout<'a> {
    cfg: &'a GenConfig,
    canvas: Canvas,
    words: Vec<WordAnnotation>,
    line: usize,
    lines: usize,
    x: usize,
    wrap: bool,
    style: PageStyle,
}

impl<'a> Layout<'a> {
    fn new(cfg: &'a GenConfig, rng: &mut ChaCha8Rng) -> Self {
        let lines = (cfg.height - 2 * cfg.margin + cfg.line_gap) / cfg.line_pitch();
        Layout {
            cfg,
            canvas: Canvas::new(cfg.height, cfg.width),
            words: Vec::new(),
            line: 0,
            lines,
            x: cfg.margin,
            wrap: true,
            style: PageStyle::draw(cfg, rng),
        }
    }

    fn line_top(&self) -> usize {
        self.cfg.margin + self.line * self.cfg.line_pitch()
    }

    fn newline(&mut self) -> bool {
        self.line += 1;
        self.x = self.cfg.margin;
        self.line < self.lines
    }

    /// Places a word at the cursor, wrapping once if needed. Returns false if
    /// the page is full; nothing is drawn in that case.
    fn place(&mut self, text: &str, tag: &str, rng: &mut ChaCha8Rng) -> Result<bool> {
        if self.line >= self.lines {
            return Ok(false);
        }
        let img = render_word(text, &self.style.word(self.cfg, rng), rng)?;
        let right = self.cfg.width - self.cfg.margin;
        if img.width > right - self.cfg.margin {
            bail!(Layout, "word `{text}` is wider than the page");
        }
        if self.x + img.width > right && (!self.wrap || !self.newline()) {
            return Ok(false);
        }
        let slack = (self.cfg.line_pitch() - self.cfg.line_gap).saturating_sub(img.height);
        let y0 = self.line_top()
            + if slack > 0 {
                rng.random_range(0..=slack)
            } else {
                0
            };
        let x0 = self.x;
        self.canvas.blit(&img, x0, y0);
        let t = img.tight;
        self.words.push(WordAnnotation {
            bbox: BBox::new(t.x + x0 as f64, t.y + y0 as f64, t.w, t.h),
            text: text.to_string(),
            tag: tag.to_string(),
        });
        self.x = x0 + img.width + rng.random_range(self.cfg.word_gap[0]..=self.cfg.word_gap[1]);
        Ok(true)
    }

    /// Places all words or none of them.
    fn place_all(&mut self, unit: &[(String, &str)], rng: &mut ChaCha8Rng) -> Result<bool> {
        let saved = (self.canvas.ink.clone(), self.words.len(), self.line, self.x);
        for (text, tag) in unit {
            if !self.place(text, tag, rng)? {
                self.canvas.ink = saved.0;
                self.words.truncate(saved.1);
                self.line = saved.2;
                self.x = saved.3;
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn finish(mut self, rng: &mut ChaCha8Rng) -> PageSample {
        let sigma = if self.cfg.page_noise_max > 0.0 {
            rng.random_range(0.0..=self.cfg.page_noise_max)
        } else {
            0.0
        };
        let sp = if self.cfg.salt_pepper_max > 0.0 {
            rng.random_range(0.0..=self.cfg.salt_pepper_max)
        } else {
            0.0
        };
        for v in self.canvas.ink.iter_mut() {
            if sigma > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                *v += (libm::fabs(z) * sigma * 0.5) as f32;
            }
            if sp > 0.0 && rng.random_bool(sp) {
                *v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            }
        }
        let pixels = self
            .canvas
            .ink
            .iter()
            .map(|v| libm::roundf(255.0 * (1.0 - v.clamp(0.0, 1.0))) as u8)
            .collect();
        PageSample {
            height: self.cfg.height,
            width: self.cfg.width,
            pixels,
            words: self.words,
        }
    }
}

fn pick(rng: &mut ChaCha8Rng, list: &[&str]) -> String {
    list.choose(rng).copied().unwrap_or("x").to_string()
}

/// One marriage record: `on DAY MONTH YEAR husband married wife`, where the
/// husband is `NAME SURNAME [OCCUPATION] [of LOCATION]` and the wife is
/// `NAME SURNAME [daughter of NAME [SURNAME]]`.
pub fn record_words(rng: &mut ChaCha8Rng) -> Vec<(String, &'static str)> {
    let mut out: Vec<(String, &'static str)> = vec![
        ("on".into(), OTHER),
        (rng.random_range(1..=28u32).to_string(), "date"),
        (pick(rng, vocab::MONTHS), "date"),
        (rng.random_range(1600..1700u32).to_string(), "date"),
        (pick(rng, vocab::NAMES), "name"),
        (pick(rng, vocab::SURNAMES), "name"),
    ];
    if rng.random_bool(0.7) {
        out.push((pick(rng, vocab::OCCUPATIONS), "occupation"));
    }
    if rng.random_bool(0.6) {
        out.push(("of".into(), OTHER));
        out.push((pick(rng, vocab::LOCATIONS), "location"));
    }
    out.push(("married".into(), OTHER));
    out.push((pick(rng, vocab::NAMES), "name"));
    out.push((pick(rng, vocab::SURNAMES), "name"));
    if rng.random_bool(0.5) {
        out.push(("daughter".into(), OTHER));
        out.push(("of".into(), OTHER));
        out.push((pick(rng, vocab::NAMES), "name"));
        if rng.random_bool(0.5) {
            out.push((pick(rng, vocab::SURNAMES), "name"));
        }
    }
    out
}

fn gen_records(layout: &mut Layout, rng: &mut ChaCha8Rng) -> Result<()> {
    loop {
        let rec = record_words(rng);
        if !layout.place_all(&rec, rng)? {
            return Ok(());
        }
    }
}

/// Glyph scale of printed form keys.
const KEY_SCALE: usize = 2;

fn draw_key(layout: &mut Layout, key: &str, rng: &mut ChaCha8Rng) -> Result<usize> {
    let img = render_word(key, &WordStyle::clean(KEY_SCALE), rng)?;
    let pad = 3;
    let x0 = layout.cfg.margin;
    let y0 = layout.line_top()
        + (layout.cfg.line_pitch() - layout.cfg.line_gap).saturating_sub(img.height + 2 * pad) / 2;
    layout.canvas.blit(&img, x0 + pad, y0 + pad);
    let (x1, y1) = (x0 + img.width + 2 * pad, y0 + img.height + 2 * pad);
    layout.canvas.rect(x0, y0, x1, y1, 1.0);
    layout.canvas.rect(x0 + 1, y0 + 1, x1 - 1, y1 - 1, 1.0);
    Ok(x1)
}

/// Width reserved for the printed key column of the forms regime.
fn key_column(cfg: &GenConfig) -> usize {
    let longest = vocab::FORM_KEYS
        .iter()
        .map(|k| k.0.len())
        .max()
        .unwrap_or(1);
    cfg.margin + longest * (GLYPH_W + 1) * KEY_SCALE + 6 + 12
}

fn gen_forms(layout: &mut Layout, rng: &mut ChaCha8Rng) -> Result<()> {
    let retries = layout.cfg.max_retries;
    layout.wrap = false;
    for row in 0..layout.lines {
        layout.line = row;
        // some fields are left blank
        if !rng.random_bool(0.9) {
            continue;
        }
        let tag = match vocab::FORM_TEMPLATE[row % vocab::FORM_TEMPLATE.len()] {
            Some(key) => {
                draw_key(layout, key, rng)?;
                vocab::FORM_KEYS
                    .iter()
                    .find(|k| k.0 == key)
                    .expect("template keys are form keys")
                    .1
            }
            None => OTHER,
        };
        let mut n = rng.random_range(1..=3usize);
        let mut attempt = 0;
        let indent = rng.random_range(0..=12);
        loop {
            layout.x = key_column(layout.cfg) + indent;
            let unit: Vec<(String, &str)> =
                (0..n).map(|_| (pick(rng, vocab::SHARED), tag)).collect();
            if layout.place_all(&unit, rng)? {
                break;
            }
            attempt += 1;
            n = n.saturating_sub(1).max(1);
            if attempt > retries {
                bail!(
                    Layout,
                    "form row {row} does not fit after {retries} retries"
                );
            }
        }
    }
    Ok(())
}

fn gen_prose(layout: &mut Layout, rng: &mut ChaCha8Rng) -> Result<()> {
    let f = layout.cfg.entity_fraction;
    // a unit is either one filler or a trigger+entity pair; entities are
    // q / (1 + q) of all words
    let q = f / (1.0 - f);
    loop {
        let unit: Vec<(String, &str)> = if rng.random_bool(q.min(1.0)) {
            let (trig, tag) = *vocab::TRIGGERS.choose(rng).expect("triggers");
            vec![(trig.to_string(), OTHER), (pick(rng, vocab::SHARED), tag)]
        } else {
            vec![(pick(rng, vocab::FILLERS), OTHER)]
        };
        if !layout.place_all(&unit, rng)? {
            return Ok(());
        }
    }
}

/// Generates one page from its own seed.
pub fn gen_page(cfg: &GenConfig, page_seed: u64) -> Result<PageSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(page_seed);
    let mut last = None;
    for _ in 0..=cfg.max_retries {
        let mut layout = Layout::new(cfg, &mut rng);
        if layout.lines == 0 {
            bail!(Layout, "no line fits on the page");
        }
        let r = match cfg.regime {
            Regime::Records => gen_records(&mut layout, &mut rng),
            Regime::Forms => {
                if key_column(cfg) + 64 > cfg.width {
                    bail!(Layout, "page too narrow for forms");
                }
                gen_forms(&mut layout, &mut rng)
            }
            Regime::Prose => gen_prose(&mut layout, &mut rng),
        };
        match r {
            Ok(()) if !layout.words.is_empty() => return Ok(layout.finish(&mut rng)),
            Ok(()) => last = Some(Error::Layout("page holds no words".into())),
            Err(e @ Error::Layout(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Layout("retries exhausted".into())))
}

/// All pages of one split.
pub fn gen_split(cfg: &GenConfig, split: Split) -> Result<Vec<PageSample>> {
    (0..cfg.pages(split))
        .map(|i| gen_page(cfg, cfg.page_seed(split, i)))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitStats {
    pub pages: usize,
    pub words: usize,
    pub vocabulary: usize,
    pub entity_words: usize,
    pub entity_pct: f64,
    /// Distinct words absent from the training vocabulary.
    pub oov_words: usize,
    pub oov_pct: f64,
    pub tag_counts: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetStats {
    pub regime: Regime,
    pub seed: u64,
    pub num_tags: usize,
    pub tags: Vec<String>,
    pub splits: BTreeMap<String, SplitStats>,
    /// Words seen with more than one tag anywhere in the dataset.
    pub ambiguous: Vec<String>,
}

fn vocab_of(pages: &[PageSample]) -> BTreeSet<&str> {
    pages
        .iter()
        .flat_map(|p| p.words.iter().map(|w| w.text.as_str()))
        .collect()
}

/// Summary statistics over named splits; OOV is measured against `train`.
pub fn dataset_stats(
    cfg: &GenConfig,
    tags: &[String],
    splits: &[(Split, &[PageSample])],
) -> DatasetStats {
    let train: BTreeSet<&str> = splits
        .iter()
        .filter(|s| s.0 == Split::Train)
        .flat_map(|s| vocab_of(s.1))
        .collect();
    let mut word_tags: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for (split, pages) in splits {
        let v = vocab_of(pages);
        let mut st = SplitStats {
            pages: pages.len(),
            vocabulary: v.len(),
            ..Default::default()
        };
        for t in tags {
            st.tag_counts.insert(t.clone(), 0);
        }
        for w in pages.iter().flat_map(|p| &p.words) {
            st.words += 1;
            if w.tag != OTHER {
                st.entity_words += 1;
            }
            *st.tag_counts.entry(w.tag.clone()).or_default() += 1;
            word_tags.entry(&w.text).or_default().insert(&w.tag);
        }
        st.entity_pct = if st.words > 0 {
            100.0 * st.entity_words as f64 / st.words as f64
        } else {
            0.0
        };
        st.oov_words = v.iter().filter(|w| !train.contains(*w)).count();
        st.oov_pct = if v.is_empty() {
            0.0
        } else {
            100.0 * st.oov_words as f64 / v.len() as f64
        };
        out.insert(split.name().to_string(), st);
    }
    DatasetStats {
        regime: cfg.regime,
        seed: cfg.seed,
        num_tags: tags.len(),
        tags: tags.to_vec(),
        splits: out,
        ambiguous: word_tags
            .into_iter()
            .filter(|(_, t)| t.len() > 1)
            .map(|(w, _)| w.to_string())
            .collect(),
    }
}
