//! Synthetic moving-glyph sequences, the dataset file format and batching.
//!
//! Dataset file layout (little-endian):
//!
//! ```text
//! "MIMD"  u32 version  u32 N, T, C, H, W
//! f32 data (row-major [N, T, C, H, W])
//! u32 len + UTF-8 metadata
//! ```

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"MIMD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum GlyphSource {
    /// Filled square, cross and disk of the given side length.
    Builtin { size: usize },
    /// A dataset file of shape `[G, 1, 1, h, w]`, one raster per glyph.
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub glyphs: usize,
    pub source: GlyphSource,
    /// Speed in pixels per frame, drawn uniformly from `[min, max]`.
    pub speed: (f32, f32),
    /// Acceleration magnitude in pixels per frame², drawn uniformly.
    pub acceleration: (f32, f32),
    pub length: usize,
    pub count: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            height: 64,
            width: 64,
            glyphs: 2,
            source: GlyphSource::Builtin { size: 16 },
            speed: (2.0, 4.0),
            acceleration: (0.0, 0.0),
            length: 20,
            count: 1000,
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("bad value for `{key}`: `{value}`")))
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("canvas extents must be positive"));
        }
        for (name, (lo, hi)) in [("speed", self.speed), ("acceleration", self.acceleration)] {
            if !lo.is_finite() || !hi.is_finite() || lo < 0.0 || lo > hi {
                return Err(Error::invalid(format!("{name} range [{lo}, {hi}] is not a finite, ordered, non-negative range")));
            }
        }
        if let GlyphSource::Builtin { size } = self.source {
            if size == 0 {
                return Err(Error::invalid("glyph size must be positive"));
            }
            check_fits(size, size, self)?;
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("glyphs", self.glyphs.to_string()),
        ];
        match &self.source {
            GlyphSource::Builtin { size } => out.push(("glyph_size", size.to_string())),
            GlyphSource::File(p) => out.push(("glyph_file", p.display().to_string())),
        }
        out.extend([
            ("speed_min", self.speed.0.to_string()),
            ("speed_max", self.speed.1.to_string()),
            ("accel_min", self.acceleration.0.to_string()),
            ("accel_max", self.acceleration.1.to_string()),
            ("length", self.length.to_string()),
            ("count", self.count.to_string()),
            ("seed", self.seed.to_string()),
        ]);
        out
    }

    /// Sets one field by key. Returns `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "glyphs" => self.glyphs = parse(key, value)?,
            "glyph_size" => self.source = GlyphSource::Builtin { size: parse(key, value)? },
            "glyph_file" => self.source = GlyphSource::File(PathBuf::from(value.trim())),
            "speed_min" => self.speed.0 = parse(key, value)?,
            "speed_max" => self.speed.1 = parse(key, value)?,
            "accel_min" => self.acceleration.0 = parse(key, value)?,
            "accel_max" => self.acceleration.1 = parse(key, value)?,
            "length" => self.length = parse(key, value)?,
            "count" => self.count = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

fn check_fits(h: usize, w: usize, cfg: &GeneratorConfig) -> Result<()> {
    if h > cfg.height || w > cfg.width {
        return Err(Error::invalid(format!(
            "glyph {h}x{w} does not fit the {}x{} canvas",
            cfg.height, cfg.width
        )));
    }
    Ok(())
}

/// The three procedural glyphs at side length `size`.
pub fn builtin_glyphs(size: usize) -> Vec<Tensor> {
    let s = size as f32;
    let c = (s - 1.0) / 2.0;
    let bar = (size / 4).max(1);
    let lo = (size - bar) / 2;
    let square = Tensor::ones(&[size, size]);
    let cross = Tensor::from_fn(&[size, size], |i| {
        let (y, x) = (i / size, i % size);
        let on = (lo..lo + bar).contains(&y) || (lo..lo + bar).contains(&x);
        on as u8 as f32
    });
    let r2 = (s / 2.0) * (s / 2.0);
    let disk = Tensor::from_fn(&[size, size], |i| {
        let (y, x) = ((i / size) as f32 - c, (i % size) as f32 - c);
        (y * y + x * x <= r2) as u8 as f32
    });
    vec![square, cross, disk]
}

/// Folds an unbounded coordinate into `[0, span]` as if it bounced between
/// walls at both ends.
pub fn reflect(u: f64, span: f64) -> f64 {
    if span <= 0.0 {
        return 0.0;
    }
    let m = u.rem_euclid(2.0 * span);
    if m > span {
        2.0 * span - m
    } else {
        m
    }
}

/// One glyph's motion: initial position `(y, x)`, velocity and constant
/// acceleration (the acceleration flips together with the velocity at a
/// wall, so a bounce mirrors the whole trajectory).
#[derive(Clone, Debug, PartialEq)]
pub struct GlyphTrack {
    pub glyph: Tensor,
    pub position: (f64, f64),
    pub velocity: (f64, f64),
    pub acceleration: (f64, f64),
}

impl GlyphTrack {
    /// Top-left corner at frame `t` for a canvas of `height x width`.
    pub fn position_at(&self, t: usize, height: usize, width: usize) -> (f64, f64) {
        let (gh, gw) = (self.glyph.shape()[0], self.glyph.shape()[1]);
        let mut u = self.position;
        let mut v = self.velocity;
        for _ in 0..t {
            u.0 += v.0;
            u.1 += v.1;
            v.0 += self.acceleration.0;
            v.1 += self.acceleration.1;
        }
        (
            reflect(u.0, (height - gh) as f64),
            reflect(u.1, (width - gw) as f64),
        )
    }
}

/// Renders `length` frames (`[length, 1, height, width]`), composing
/// overlapping glyphs by per-pixel maximum.
pub fn render_tracks(tracks: &[GlyphTrack], length: usize, height: usize, width: usize) -> Result<Tensor> {
    for tr in tracks {
        let [gh, gw] = *tr.glyph.shape() else {
            return Err(Error::shape("render_tracks", format!("glyph must be 2-D, got {:?}", tr.glyph.shape())));
        };
        if gh > height || gw > width {
            return Err(Error::invalid(format!("glyph {gh}x{gw} does not fit the {height}x{width} canvas")));
        }
    }
    let mut out = Tensor::zeros(&[length, 1, height, width]);
    let frame = height * width;
    for t in 0..length {
        let canvas = &mut out.data_mut()[t * frame..][..frame];
        for tr in tracks {
            let (gh, gw) = (tr.glyph.shape()[0], tr.glyph.shape()[1]);
            let (py, px) = tr.position_at(t, height, width);
            let (oy, ox) = (
                (py.round() as usize).min(height - gh),
                (px.round() as usize).min(width - gw),
            );
            for y in 0..gh {
                for x in 0..gw {
                    let px = &mut canvas[(oy + y) * width + ox + x];
                    *px = px.max(tr.glyph.data()[y * gw + x]);
                }
            }
        }
    }
    Ok(out)
}

fn random_vector<R: Rng + ?Sized>(range: (f32, f32), rng: &mut R) -> (f64, f64) {
    let mag = if range.0 == range.1 {
        range.0 as f64
    } else {
        rng.gen_range(range.0 as f64..=range.1 as f64)
    };
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    (mag * angle.sin(), mag * angle.cos())
}

fn load_glyphs(cfg: &GeneratorConfig) -> Result<Vec<Tensor>> {
    match &cfg.source {
        GlyphSource::Builtin { size } => Ok(builtin_glyphs(*size)),
        GlyphSource::File(path) => {
            let ds = load_dataset(path)?;
            let &[g, t, c, h, w] = ds.data.shape() else { unreachable!() };
            if t != 1 || c != 1 || g == 0 {
                return Err(Error::Format {
                    path: path.clone(),
                    detail: format!("glyph file must have shape [G>0, 1, 1, h, w], got {:?}", ds.data.shape()),
                });
            }
            check_fits(h, w, cfg)?;
            Ok((0..g)
                .map(|i| Tensor::new(vec![h, w], ds.data.data()[i * h * w..][..h * w].to_vec()).expect("sized"))
                .collect())
        }
    }
}

/// Deterministic moving-glyph dataset of shape `[count, length, 1, H, W]`.
pub fn generate_moving_glyphs(cfg: &GeneratorConfig) -> Result<SequenceDataset> {
    cfg.validate()?;
    let glyphs = load_glyphs(cfg)?;
    let seq = cfg.length * cfg.height * cfg.width;
    let mut data = Vec::with_capacity(cfg.count * seq);
    for i in 0..cfg.count {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let tracks: Vec<GlyphTrack> = (0..cfg.glyphs)
            .map(|_| {
                let glyph = glyphs[rng.gen_range(0..glyphs.len())].clone();
                let (gh, gw) = (glyph.shape()[0], glyph.shape()[1]);
                let position = (
                    rng.gen_range(0.0..=(cfg.height - gh) as f64),
                    rng.gen_range(0.0..=(cfg.width - gw) as f64),
                );
                let velocity = random_vector(cfg.speed, &mut rng);
                let acceleration = random_vector(cfg.acceleration, &mut rng);
                GlyphTrack {
                    glyph,
                    position,
                    velocity,
                    acceleration,
                }
            })
            .collect();
        data.extend(render_tracks(&tracks, cfg.length, cfg.height, cfg.width)?.into_data());
    }
    Ok(SequenceDataset {
        data: Tensor::new(vec![cfg.count, cfg.length, 1, cfg.height, cfg.width], data)?,
        metadata: cfg.to_text(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    /// `[N, T, C, H, W]`, values in `[0, 1]`.
    pub data: Tensor,
    pub metadata: String,
}

impl SequenceDataset {
    pub fn new(data: Tensor, metadata: impl Into<String>) -> Result<Self> {
        if data.shape().len() != 5 {
            return Err(Error::shape("dataset", format!("expected [N, T, C, H, W], got {:?}", data.shape())));
        }
        if let Some(v) = data.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("dataset value {v} outside [0, 1]")));
        }
        Ok(SequenceDataset {
            data,
            metadata: metadata.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seq_len(&self) -> usize {
        self.data.shape()[1]
    }

    /// `[C, H, W]`.
    pub fn frame_shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[2], s[3], s[4]]
    }

    /// Sequences `indices` stacked into `[B, T, C, H, W]`.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let per = self.data.numel() / self.len().max(1);
        let mut out = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("sequence index {i} out of range for {} sequences", self.len())));
            }
            out.extend_from_slice(&self.data.data()[i * per..][..per]);
        }
        let mut shape = self.data.shape().to_vec();
        shape[0] = indices.len();
        Tensor::new(shape, out)
    }

    /// Sequences `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<SequenceDataset> {
        let idx: Vec<usize> = (start..start + len).collect();
        Ok(SequenceDataset {
            data: self.gather(&idx)?,
            metadata: self.metadata.clone(),
        })
    }
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &SequenceDataset) -> Result<()> {
    let mut w = Writer::default();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    for &d in ds.data.shape() {
        w.len_u32(d)?;
    }
    w.f32s(ds.data.data());
    w.string(&ds.metadata)?;
    w.save(path.as_ref())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<SequenceDataset> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes, path);
    r.magic(DATASET_MAGIC)?;
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(r.error(format!("unsupported dataset version {version}")));
    }
    let mut shape = Vec::with_capacity(5);
    for _ in 0..5 {
        shape.push(r.u32("dims")? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| r.error("dataset size overflows"))?;
    let data = r.f32s(numel, "dataset values")?;
    let metadata = r.string("metadata")?;
    r.finish()?;
    SequenceDataset::new(Tensor::new(shape, data)?, metadata).map_err(|e| r.error(e.to_string()))
}

/// One epoch of batches over `n` sequences in a seeded order.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIterator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }
}

/// Index batches for `epoch`; the order is a permutation seeded by
/// `(shuffle_seed, epoch)` and the last batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Result<BatchIterator> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(BatchIterator {
        order,
        batch_size,
        pos: 0,
    })
}

/// The first epoch of batches over `ds`.
pub fn batch_iterator(ds: &SequenceDataset, batch_size: usize, shuffle_seed: u64) -> Result<BatchIterator> {
    epoch_batches(ds.len(), batch_size, shuffle_seed, 0)
}

/// Indices of the batch used at global training step `step`, walking
/// epochs back to back.
pub fn batch_for_step(n: usize, batch_size: usize, shuffle_seed: u64, step: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::invalid("cannot draw batches from an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let per_epoch = n.div_ceil(batch_size) as u64;
    let (epoch, idx) = (step / per_epoch, step % per_epoch);
    Ok(epoch_batches(n, batch_size, shuffle_seed, epoch)?
        .nth(idx as usize)
        .expect("index within epoch"))
}
