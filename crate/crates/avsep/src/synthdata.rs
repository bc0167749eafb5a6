//! Synthetic labeled audio-visual corpus and mix-and-separate examples.
//!
//! Categories are harmonic tones with disjoint fundamental bands paired
//! with distinct rendered shapes, so the toy task is learnable by
//! construction: a spectral-centroid threshold already separates the audio
//! classes, and shape/color separates the images.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{
    self, stft, to_log_spec, AudioClip, FreqMap, LogSpec, Spectrogram, CLIP_SECONDS,
    SAMPLE_RATE,
};
use crate::error::{AvsepError, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_IMAGE_SIZE: usize = 64;
/// Per-source peak so a two-source sum stays within [-1, 1].
const SOURCE_PEAK: f64 = 0.45;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Triangle,
    Diamond,
    Cross,
    Square,
    Ring,
}

/// One instrument-like category: a harmonic timbre plus a visual recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub name: String,
    /// Fundamental frequency band, Hz.
    pub f0_range: (f64, f64),
    /// Relative harmonic amplitudes, fundamental first.
    pub harmonic_amps: Vec<f64>,
    pub shape: Shape,
    pub color: [f64; 3],
}

const MAX_CATEGORIES: usize = 6;

/// The default category table; `c` must be in 2..=6.
pub fn default_categories(c: usize) -> Result<Vec<Category>> {
    if !(2..=MAX_CATEGORIES).contains(&c) {
        return Err(AvsepError::Config(format!(
            "category count must be in 2..={MAX_CATEGORIES}, got {c}"
        )));
    }
    let table: [(&str, (f64, f64), &[f64], Shape, [f64; 3]); MAX_CATEGORIES] = [
        (
            "low-tone",
            (200.0, 400.0),
            &[1.0, 0.5, 0.25, 0.12, 0.06],
            Shape::Circle,
            [0.85, 0.20, 0.20],
        ),
        (
            "bright-tone",
            (1500.0, 3000.0),
            &[1.0, 0.3],
            Shape::Triangle,
            [0.20, 0.80, 0.25],
        ),
        (
            "mid-tone",
            (600.0, 1100.0),
            &[1.0, 0.4, 0.15],
            Shape::Diamond,
            [0.25, 0.35, 0.90],
        ),
        (
            "high-tone",
            (3500.0, 5000.0),
            &[1.0],
            Shape::Cross,
            [0.90, 0.85, 0.20],
        ),
        (
            "reed-tone",
            (900.0, 1400.0),
            &[0.7, 1.0, 0.5],
            Shape::Square,
            [0.85, 0.25, 0.85],
        ),
        (
            "sub-tone",
            (120.0, 200.0),
            &[1.0, 0.6, 0.4, 0.2, 0.1],
            Shape::Ring,
            [0.20, 0.80, 0.80],
        ),
    ];
    Ok(table[..c]
        .iter()
        .enumerate()
        .map(|(id, (name, f0, amps, shape, color))| Category {
            id,
            name: (*name).into(),
            f0_range: *f0,
            harmonic_amps: amps.to_vec(),
            shape: *shape,
            color: *color,
        })
        .collect())
}

/// Deterministic harmonic-tone clip: three notes drawn from the category's
/// fundamental band, with vibrato, tremolo and an attack/release envelope.
pub fn synth_audio(category: &Category, seed: u64, duration: f64) -> Result<AudioClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = SAMPLE_RATE as f64;
    let n = (duration * sr).round() as usize;
    if n == 0 {
        return Err(AvsepError::Validation("duration too short".into()));
    }
    let nyquist = sr / 2.0;
    let notes = 3usize;
    let note_len = n / notes;
    let mut samples = vec![0.0f64; n];

    for note in 0..notes {
        let f0 = rng.random_range(category.f0_range.0..category.f0_range.1);
        let tremolo_rate = rng.random_range(3.0..6.0);
        let tremolo_phase = rng.random_range(0.0..std::f64::consts::TAU);
        let start = note * note_len;
        let end = if note == notes - 1 { n } else { start + note_len };
        let len = end - start;
        let attack = (0.05 * sr) as usize;
        let release = (0.10 * sr) as usize;

        for (h, &amp) in category.harmonic_amps.iter().enumerate() {
            let freq = f0 * (h + 1) as f64;
            if freq > 0.95 * nyquist {
                break;
            }
            let phase0 = rng.random_range(0.0..std::f64::consts::TAU);
            let mut phase = phase0;
            for i in 0..len {
                let t = i as f64 / sr;
                // slight vibrato on the instantaneous frequency
                let inst = freq * (1.0 + 0.003 * (std::f64::consts::TAU * 5.0 * t).sin());
                phase += std::f64::consts::TAU * inst / sr;
                let mut env = 1.0 + 0.1 * (std::f64::consts::TAU * tremolo_rate * t + tremolo_phase).sin();
                if i < attack {
                    env *= i as f64 / attack as f64;
                }
                if len - i < release {
                    env *= (len - i) as f64 / release as f64;
                }
                samples[start + i] += amp * env * phase.sin();
            }
        }
    }

    let peak = samples.iter().fold(0.0f64, |a, &s| a.max(s.abs()));
    if peak > 0.0 {
        let g = SOURCE_PEAK / peak;
        for s in &mut samples {
            *s *= g;
        }
    }
    AudioClip::new(samples, SAMPLE_RATE)
}

/// Pixel rectangle, half-open: x in [x0, x1), y in [y0, y1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    /// (row, col) center.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.y0 + self.y1) as f64 / 2.0 - 0.5,
            (self.x0 + self.x1) as f64 / 2.0 - 0.5,
        )
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Renders the category's shape at a random position/scale over a
/// cluttered background; the bounding box is tight around drawn pixels.
pub fn render_image(category: &Category, seed: u64, size: usize) -> (Array3<f64>, BBox) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Array3::<f64>::zeros((3, size, size));

    // low-contrast background clutter
    let base = 0.35 + rng.random_range(-0.05..0.05);
    img.fill(base);
    for _ in 0..6 {
        let w = rng.random_range(6..size / 2);
        let h = rng.random_range(6..size / 2);
        let x = rng.random_range(0..size - w);
        let y = rng.random_range(0..size - h);
        let tint: [f64; 3] = [
            base + rng.random_range(-0.08..0.08),
            base + rng.random_range(-0.08..0.08),
            base + rng.random_range(-0.08..0.08),
        ];
        for c in 0..3 {
            for yy in y..y + h {
                for xx in x..x + w {
                    img[(c, yy, xx)] = tint[c].clamp(0.0, 1.0);
                }
            }
        }
    }

    // shape footprint: side in [15, 39] px keeps bbox area in ~[4%, 40%]
    // of a 64x64 image, scaled proportionally for other sizes
    let scale = size as f64 / DEFAULT_IMAGE_SIZE as f64;
    let side = rng.random_range((15.0 * scale) as usize..=(39.0 * scale) as usize);
    let r = side / 2;
    let cy = rng.random_range(r..size - r);
    let cx = rng.random_range(r..size - r);

    let (mut min_x, mut min_y, mut max_x, mut max_y) = (size, size, 0usize, 0usize);
    let mut put = |img: &mut Array3<f64>, x: usize, y: usize| {
        for c in 0..3 {
            img[(c, y, x)] = category.color[c];
        }
        min_x = min_x.min(x);
        min_y = min_y.min(y);
        max_x = max_x.max(x);
        max_y = max_y.max(y);
    };

    let ri = r as isize;
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            let inside = match category.shape {
                Shape::Circle => dx * dx + dy * dy <= ri * ri,
                Shape::Triangle => {
                    // apex at the top, base at the bottom
                    let row = dy + ri; // 0..=2r
                    let half = (row * ri) / (2 * ri).max(1);
                    dx.abs() <= half
                }
                Shape::Diamond => dx.abs() + dy.abs() <= ri,
                Shape::Cross => dx.abs() <= ri / 3 || dy.abs() <= ri / 3,
                Shape::Square => true,
                Shape::Ring => {
                    let d2 = dx * dx + dy * dy;
                    d2 <= ri * ri && d2 >= (ri / 2) * (ri / 2)
                }
            };
            if inside {
                let y = (cy as isize + dy) as usize;
                let x = (cx as isize + dx) as usize;
                if y < size && x < size {
                    put(&mut img, x, y);
                }
            }
        }
    }

    let bbox = BBox { x0: min_x, y0: min_y, x1: max_x + 1, y1: max_y + 1 };
    (img, bbox)
}

/// Shift jitter used as per-epoch training augmentation; the image is
/// translated with edge padding and the bbox moved with it (clamped).
pub fn jitter_image(image: &Array3<f64>, bbox: &BBox, rng: &mut ChaCha8Rng) -> (Array3<f64>, BBox) {
    let (c, h, w) = image.dim();
    let dy = rng.random_range(-4i64..=4) as isize;
    let dx = rng.random_range(-4i64..=4) as isize;
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sy = (y as isize - dy).clamp(0, h as isize - 1) as usize;
                let sx = (x as isize - dx).clamp(0, w as isize - 1) as usize;
                out[(ci, y, x)] = image[(ci, sy, sx)];
            }
        }
    }
    let clamp_x = |v: usize| (v as isize + dx).clamp(0, w as isize) as usize;
    let clamp_y = |v: usize| (v as isize + dy).clamp(0, h as isize) as usize;
    let bbox = BBox {
        x0: clamp_x(bbox.x0),
        y0: clamp_y(bbox.y0),
        x1: clamp_x(bbox.x1),
        y1: clamp_y(bbox.y1),
    };
    (out, bbox)
}

/// One (image, audio, category) triple.
#[derive(Debug, Clone)]
pub struct AvSample {
    pub id: String,
    pub image: Array3<f64>,
    pub audio: AudioClip,
    pub category: usize,
    pub bbox: BBox,
}

/// A mix-and-separate training/eval example for N = 2 sources.
#[derive(Debug, Clone)]
pub struct MixtureExample {
    pub id: String,
    pub sources: Vec<AvSample>,
    pub mix: AudioClip,
    pub mix_spec: Spectrogram,
    pub mix_logspec: LogSpec,
    /// One binary 256 x T mask per source; they partition the grid.
    pub gt_masks: Vec<Array2<f64>>,
}

/// Sums two different-category samples and derives ground-truth dominance
/// masks on the log grid (ties to the lower source index).
pub fn make_mixture(a: &AvSample, b: &AvSample, map: &FreqMap) -> Result<MixtureExample> {
    if a.category == b.category {
        return Err(AvsepError::Validation(
            "mixture sources must come from different categories".into(),
        ));
    }
    if a.audio.len() != b.audio.len() {
        return Err(AvsepError::Validation(format!(
            "audio length mismatch: {} vs {}",
            a.audio.len(),
            b.audio.len()
        )));
    }
    let sum: Vec<f64> = a
        .audio
        .samples()
        .iter()
        .zip(b.audio.samples())
        .map(|(x, y)| x + y)
        .collect();
    let mix = AudioClip::new(sum, a.audio.sample_rate())?;

    let mix_spec = stft(&mix)?;
    let mix_logspec = to_log_spec(&mix_spec, map)?;
    let la = to_log_spec(&stft(&a.audio)?, map)?;
    let lb = to_log_spec(&stft(&b.audio)?, map)?;

    let mask_a = ndarray::Zip::from(&la.mag)
        .and(&lb.mag)
        .map_collect(|&ma, &mb| if ma >= mb { 1.0 } else { 0.0 });
    let mask_b = mask_a.mapv(|m| 1.0 - m);

    Ok(MixtureExample {
        id: format!("{}+{}", a.id, b.id),
        sources: vec![a.clone(), b.clone()],
        mix,
        mix_spec,
        mix_logspec,
        gt_masks: vec![mask_a, mask_b],
    })
}

/// Magnitude-weighted mean frequency of a clip's spectrum, Hz.
pub fn spectral_centroid(clip: &AudioClip) -> Result<f64> {
    let prepared = dsp::prepare_clip(clip);
    let spec = stft(&prepared)?;
    let mag = spec.magnitude();
    let hz_per_bin = clip.sample_rate() as f64 / spec.window_size as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for (k, row) in mag.outer_iter().enumerate() {
        let m: f64 = row.sum();
        num += k as f64 * hz_per_bin * m;
        den += m;
    }
    if den <= 0.0 {
        return Err(AvsepError::Degenerate("silent clip has no centroid".into()));
    }
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub categories: usize,
    pub train_per_category: usize,
    pub val_per_category: usize,
    pub test_per_category: usize,
    pub seed: u64,
    pub image_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            categories: 4,
            train_per_category: 200,
            val_per_category: 40,
            test_per_category: 40,
            seed: 0,
            image_size: DEFAULT_IMAGE_SIZE,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub index: u64,
    pub split: Split,
    pub category: usize,
    pub audio: String,
    pub image: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub schema_version: u32,
    pub config: CorpusConfig,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub meta: CorpusMeta,
    pub rows: Vec<ManifestRow>,
}

impl Corpus {
    pub fn rows_for(&self, split: Split) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    pub fn categories(&self) -> Result<Vec<Category>> {
        default_categories(self.meta.config.categories)
    }

    pub fn load_sample(&self, row: &ManifestRow) -> Result<AvSample> {
        let audio = dsp::read_wav(self.root.join(&row.audio))?;
        let image = read_png(&self.root.join(&row.image))?;
        Ok(AvSample {
            id: row.id.clone(),
            image,
            audio,
            category: row.category,
            bbox: row.bbox,
        })
    }
}

pub fn write_png(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (_, h, w) = image.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (image[(0, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[(1, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[(2, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = px[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Generates and persists a corpus: WAV per clip, PNG per image, one
/// manifest row per sample. Bit-identical for a fixed (config, seed).
pub fn make_corpus(config: &CorpusConfig, out_dir: &Path, overwrite: bool) -> Result<Corpus> {
    let categories = default_categories(config.categories)?;
    if config.train_per_category == 0 || config.val_per_category == 0 || config.test_per_category == 0
    {
        return Err(AvsepError::Config("split sizes must be >= 1".into()));
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    if manifest_path.exists() && !overwrite {
        return Err(AvsepError::AlreadyExists(out_dir.display().to_string()));
    }
    fs::create_dir_all(out_dir.join("audio"))?;
    fs::create_dir_all(out_dir.join("images"))?;

    let mut rows = Vec::new();
    let mut index = 0u64;
    for split in Split::ALL {
        let per_cat = match split {
            Split::Train => config.train_per_category,
            Split::Val => config.val_per_category,
            Split::Test => config.test_per_category,
        };
        for cat in &categories {
            for i in 0..per_cat {
                // every sample owns an RNG stream derived from (seed, index),
                // so generation order and sharding cannot change outputs
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(index + 1);
                let audio_seed: u64 = rng.random();
                let image_seed: u64 = rng.random();

                let id = format!("{}-c{}-{:04}", split.as_str(), cat.id, i);
                let audio = synth_audio(cat, audio_seed, CLIP_SECONDS)?;
                let (image, bbox) = render_image(cat, image_seed, config.image_size);

                let audio_rel = format!("audio/{id}.wav");
                let image_rel = format!("images/{id}.png");
                dsp::write_wav(out_dir.join(&audio_rel), &audio)?;
                write_png(&out_dir.join(&image_rel), &image)?;
                rows.push(ManifestRow {
                    id,
                    index,
                    split,
                    category: cat.id,
                    audio: audio_rel,
                    image: image_rel,
                    bbox,
                });
                index += 1;
            }
        }
    }

    let meta = CorpusMeta { schema_version: MANIFEST_SCHEMA_VERSION, config: config.clone() };
    let mut mf = fs::File::create(&manifest_path)?;
    for row in &rows {
        writeln!(mf, "{}", serde_json::to_string(row)?)?;
    }
    fs::write(out_dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;

    Ok(Corpus { root: out_dir.to_path_buf(), meta, rows })
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let meta: CorpusMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    if meta.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(AvsepError::Data(format!(
            "unsupported manifest schema {}",
            meta.schema_version
        )));
    }
    let file = fs::File::open(dir.join("manifest.jsonl"))?;
    let mut rows = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str::<ManifestRow>(&line)?);
    }
    if rows.is_empty() {
        return Err(AvsepError::Data("empty manifest".into()));
    }
    Ok(Corpus { root: dir.to_path_buf(), meta, rows })
}

/// Deterministic different-category pairing for a split: the i-th sample
/// of category c is mixed with the i-th sample of category c+1 (mod C).
pub fn mixture_pairs(rows: &[&ManifestRow], categories: usize) -> Vec<(usize, usize)> {
    let mut by_cat: Vec<Vec<usize>> = vec![Vec::new(); categories];
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by_key(|&i| rows[i].index);
    for i in order {
        by_cat[rows[i].category].push(i);
    }
    let mut pairs = Vec::new();
    for c in 0..categories {
        let next = (c + 1) % categories;
        let n = by_cat[c].len().min(by_cat[next].len());
        for i in 0..n {
            pairs.push((by_cat[c][i], by_cat[next][i]));
        }
    }
    pairs
}
