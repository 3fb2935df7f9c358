//! Procedural scenes, pseudo-RGB rendering and the on-disk sample set.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use echodepth_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dsp::{chirp, stft_magnitude, Spectrogram, SpectrogramConfig, Waveform, WindowKind};
use crate::echo::{simulate_echo, EchoConfig, Material, Scene, SPEED_OF_SOUND};
use crate::error::{Error, Result};
use crate::kv::{KvList, KvMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Replica,
    Matterport,
}

impl Profile {
    pub fn spectrogram(self) -> SpectrogramConfig {
        match self {
            Profile::Replica => SpectrogramConfig::replica(),
            Profile::Matterport => SpectrogramConfig::matterport(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Replica => "replica",
            Profile::Matterport => "matterport",
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replica" => Ok(Profile::Replica),
            "matterport" => Ok(Profile::Matterport),
            _ => Err(Error::Config(format!("unknown profile {s:?} (expected replica or matterport)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// Plaster wall, fabric, wood and metal; index 0 is the back-wall material.
pub fn default_materials() -> Vec<Material> {
    vec![
        Material::new("plaster-wall", 0.85, [0.90, 0.88, 0.80]).expect("valid"),
        Material::new("fabric", 0.15, [0.70, 0.20, 0.25]).expect("valid"),
        Material::new("wood", 0.55, [0.60, 0.40, 0.15]).expect("valid"),
        Material::new("metal", 0.90, [0.35, 0.50, 0.75]).expect("valid"),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub material_table: Vec<Material>,
    pub profile: Profile,
    pub spectro: SpectrogramConfig,
    pub echo: EchoConfig,
    pub speed_of_sound: f64,
    pub seed: u64,
    pub furniture_min: usize,
    pub furniture_max: usize,
    pub invalid_fraction: f64,
    pub noise_sigma: f64,
    pub chirp_duration_s: f64,
    pub chirp_f0: f64,
    pub chirp_f1: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::for_profile(Profile::Replica)
    }
}

impl DatasetConfig {
    pub fn for_profile(profile: Profile) -> Self {
        DatasetConfig {
            image_size: 32,
            n_train: 512,
            n_val: 64,
            n_test: 128,
            depth_min: 0.5,
            depth_max: 10.0,
            material_table: default_materials(),
            profile,
            spectro: profile.spectrogram(),
            echo: EchoConfig::default(),
            speed_of_sound: SPEED_OF_SOUND,
            seed: 0,
            furniture_min: 2,
            furniture_max: 6,
            invalid_fraction: 0.01,
            noise_sigma: 0.02,
            chirp_duration_s: 0.003,
            chirp_f0: 20.0,
            chirp_f1: 20_000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![32, 64, 128].contains(&self.image_size) {
            return Err(Error::Config(format!("image size {} not in {{32, 64, 128}}", self.image_size)));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("split counts must be at least 1".into()));
        }
        if !(self.depth_min > 0.0 && self.depth_min < 0.6 * self.depth_max) {
            return Err(Error::Config(format!(
                "depth range [{}, {}] needs 0 < d_min < 0.6·d_max",
                self.depth_min, self.depth_max
            )));
        }
        if self.material_table.is_empty() || self.material_table.len() > u16::MAX as usize {
            return Err(Error::Config("material table must be non-empty".into()));
        }
        if self.furniture_min > self.furniture_max {
            return Err(Error::Config("furniture_min exceeds furniture_max".into()));
        }
        if !(0.0..1.0).contains(&self.invalid_fraction) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("invalid_fraction must be in [0,1) and noise_sigma ≥ 0".into()));
        }
        self.spectro.validate()
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    pub fn pulse(&self) -> Result<Waveform> {
        Ok(chirp(self.chirp_duration_s, self.chirp_f0, self.chirp_f1, self.spectro.sample_rate)?.wave)
    }

    pub fn to_kv(&self) -> KvList {
        let mut kv = KvList::new();
        kv.push("image_size", self.image_size);
        kv.push("n_train", self.n_train);
        kv.push("n_val", self.n_val);
        kv.push("n_test", self.n_test);
        kv.push("depth_min", self.depth_min);
        kv.push("depth_max", self.depth_max);
        kv.push("seed", self.seed);
        kv.push("profile", self.profile.name());
        kv.push("sample_rate", self.spectro.sample_rate);
        kv.push("duration_ms", self.spectro.duration_ms);
        kv.push("window_len", self.spectro.window_len);
        kv.push("hop_len", self.spectro.hop_len);
        kv.push("n_fft", self.spectro.n_fft);
        kv.push("mic_baseline_m", self.echo.mic_baseline_m);
        kv.push("fov_deg", self.echo.fov_deg);
        kv.push("include_direct", self.echo.include_direct);
        kv.push("distance_falloff", self.echo.distance_falloff);
        kv.push("speed_of_sound", self.speed_of_sound);
        kv.push("furniture_min", self.furniture_min);
        kv.push("furniture_max", self.furniture_max);
        kv.push("invalid_fraction", self.invalid_fraction);
        kv.push("noise_sigma", self.noise_sigma);
        kv.push("chirp_duration_s", self.chirp_duration_s);
        kv.push("chirp_f0", self.chirp_f0);
        kv.push("chirp_f1", self.chirp_f1);
        kv.push("materials", self.material_table.len());
        for (i, m) in self.material_table.iter().enumerate() {
            kv.push(
                format!("material.{i}"),
                format!("{},{},{},{},{}", m.name, m.reflection, m.albedo[0], m.albedo[1], m.albedo[2]),
            );
        }
        kv
    }

    /// Reads every key written by [`DatasetConfig::to_kv`]; all are required.
    pub fn from_kv(map: &KvMap) -> Result<Self> {
        let profile: Profile = map.require("profile")?;
        let spectro = SpectrogramConfig {
            window_len: map.require("window_len")?,
            hop_len: map.require("hop_len")?,
            n_fft: map.require("n_fft")?,
            sample_rate: map.require("sample_rate")?,
            duration_ms: map.require("duration_ms")?,
            window: WindowKind::Hann,
        };
        let n_materials: usize = map.require("materials")?;
        let mut material_table = Vec::with_capacity(n_materials);
        for i in 0..n_materials {
            let key = format!("material.{i}");
            let raw: String = map.require(&key)?;
            let parts: Vec<&str> = raw.split(',').collect();
            if parts.len() != 5 {
                return Err(Error::Config(format!("{key}: expected name,reflection,r,g,b")));
            }
            let num = |s: &str| -> Result<f64> { s.parse().map_err(|e| Error::Config(format!("{key}: {e}"))) };
            material_table.push(Material::new(
                parts[0],
                num(parts[1])?,
                [num(parts[2])?, num(parts[3])?, num(parts[4])?],
            )?);
        }
        let cfg = DatasetConfig {
            image_size: map.require("image_size")?,
            n_train: map.require("n_train")?,
            n_val: map.require("n_val")?,
            n_test: map.require("n_test")?,
            depth_min: map.require("depth_min")?,
            depth_max: map.require("depth_max")?,
            material_table,
            profile,
            spectro,
            echo: EchoConfig {
                mic_baseline_m: map.require("mic_baseline_m")?,
                fov_deg: map.require("fov_deg")?,
                include_direct: map.require("include_direct")?,
                distance_falloff: map.require("distance_falloff")?,
            },
            speed_of_sound: map.require("speed_of_sound")?,
            seed: map.require("seed")?,
            furniture_min: map.require("furniture_min")?,
            furniture_max: map.require("furniture_max")?,
            invalid_fraction: map.require("invalid_fraction")?,
            noise_sigma: map.require("noise_sigma")?,
            chirp_duration_s: map.require("chirp_duration_s")?,
            chirp_f0: map.require("chirp_f0")?,
            chirp_f1: map.require("chirp_f1")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Builds the scene for `seed`: a back wall plus occluding rectangles, with a
/// sprinkle of invalid (zero-depth) pixels. Depths are exactly representable in `f32`.
pub fn generate_scene(seed: u64, cfg: &DatasetConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = cfg.image_size;
    let wall = rng.gen_range(0.6 * cfg.depth_max..cfg.depth_max) as f32 as f64;
    let mut depth = vec![wall; w * w];
    let mut materials = vec![0u16; w * w];

    let n_rect = rng.gen_range(cfg.furniture_min..=cfg.furniture_max);
    let (lo, hi) = ((w / 8).max(1), (w / 2).max(1));
    let mut rects: Vec<(usize, usize, usize, usize, f64, u16)> = (0..n_rect)
        .map(|_| {
            let rw = rng.gen_range(lo..=hi);
            let rh = rng.gen_range(lo..=hi);
            let x0 = rng.gen_range(0..=w - rw);
            let y0 = rng.gen_range(0..=w - rh);
            let d = (rng.gen_range(cfg.depth_min..wall) as f32 as f64).min(wall);
            let m = rng.gen_range(0..cfg.material_table.len()) as u16;
            (x0, y0, rw, rh, d, m)
        })
        .collect();
    // far to near, so nearer rectangles overwrite the ones behind them
    rects.sort_by(|a, b| b.4.total_cmp(&a.4));
    for &(x0, y0, rw, rh, d, m) in &rects {
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                depth[y * w + x] = d;
                materials[y * w + x] = m;
            }
        }
    }

    if cfg.invalid_fraction > 0.0 {
        let keep = rng.gen_range(0..w * w);
        for (i, d) in depth.iter_mut().enumerate() {
            if rng.gen_bool(cfg.invalid_fraction) && i != keep {
                *d = 0.0;
            }
        }
    }

    Scene {
        width: w,
        height: w,
        depth,
        materials,
        material_table: cfg.material_table.clone(),
        speed_of_sound: cfg.speed_of_sound,
    }
}

pub fn shading(depth: f64) -> f64 {
    (1.0 / (1.0 + 0.25 * depth)).clamp(0.0, 1.0)
}

/// Pseudo-RGB image `[3, H, W]`: albedo × distance shading, optional
/// Gaussian noise `(sigma, seed)`, clamped to `[0, 1]`. Invalid pixels are black.
pub fn render_image(scene: &Scene, noise: Option<(f64, u64)>) -> Result<Tensor> {
    scene.validate()?;
    let n = scene.width * scene.height;
    let mut noise = match noise {
        Some((sigma, seed)) => {
            let dist = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(format!("noise sigma: {e}")))?;
            Some((dist, ChaCha8Rng::seed_from_u64(seed)))
        }
        None => None,
    };
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        let d = scene.depth[i];
        for c in 0..3 {
            // the noise stream advances for every pixel so it is independent of the mask
            let eps = match &mut noise {
                Some((dist, r)) => dist.sample(r),
                None => 0.0,
            };
            if d > 0.0 {
                let albedo = scene.material_table[scene.materials[i] as usize].albedo[c];
                data[c * n + i] = (albedo * shading(d) + eps).clamp(0.0, 1.0);
            }
        }
    }
    Ok(Tensor::new(&[3, scene.height, scene.width], data)?)
}

/// One stored sample. Values are exactly representable as `f32` so they
/// survive a write/read cycle unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSample {
    pub seed: u64,
    pub size: usize,
    /// `[3, H, W]`.
    pub image: Tensor,
    /// Row-major `H × W`, meters, 0 where invalid.
    pub depth: Vec<f64>,
    pub materials: Vec<u16>,
    pub echo: Waveform,
    pub spectrogram: Spectrogram,
}

impl RenderedSample {
    pub fn valid_mask(&self) -> Vec<bool> {
        self.depth.iter().map(|&d| d > 0.0).collect()
    }
}

fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

pub fn render_sample(seed: u64, cfg: &DatasetConfig, pulse: &Waveform) -> Result<RenderedSample> {
    let scene = generate_scene(seed, cfg);
    let noise = (cfg.noise_sigma > 0.0).then_some((cfg.noise_sigma, seed ^ 0x5EED_1A6E));
    let image = quantize(&render_image(&scene, noise)?);
    let echo = simulate_echo(&scene, pulse, &cfg.spectro, &cfg.echo)?.quantized();
    let spec = stft_magnitude(&echo, &cfg.spectro)?;
    let spectrogram = Spectrogram {
        values: quantize(&spec.values),
        config: spec.config,
    };
    Ok(RenderedSample {
        seed,
        size: cfg.image_size,
        image,
        depth: scene.depth,
        materials: scene.materials,
        echo,
        spectrogram,
    })
}

const SAMPLE_MAGIC: &[u8; 4] = b"AVD1";

fn push_section(buf: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    buf.extend_from_slice(tag);
    buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    buf.extend_from_slice(payload);
}

fn f32_bytes<'a>(values: impl Iterator<Item = &'a f64>) -> Vec<u8> {
    values.flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn encode_sample(s: &RenderedSample) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(SAMPLE_MAGIC);
    push_section(&mut buf, b"IMG ", &f32_bytes(s.image.data().iter()));
    push_section(&mut buf, b"DEP ", &f32_bytes(s.depth.iter()));
    let mat: Vec<u8> = s.materials.iter().flat_map(|m| m.to_le_bytes()).collect();
    push_section(&mut buf, b"MAT ", &mat);
    let (l, r) = (s.echo.channel(0), s.echo.channel(1));
    let wav = f32_bytes(l.iter().zip(r).flat_map(|(a, b)| [a, b]));
    push_section(&mut buf, b"WAV ", &wav);
    push_section(&mut buf, b"SPC ", &f32_bytes(s.spectrogram.values.data().iter()));
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn section(&mut self, tag: &[u8; 4]) -> Result<&'a [u8]> {
        let name = String::from_utf8_lossy(tag).into_owned();
        if self.bytes.len() < self.pos + 12 {
            return Err(Error::format(self.path, format!("truncated before section {name:?}")));
        }
        if &self.bytes[self.pos..self.pos + 4] != tag {
            return Err(Error::format(self.path, format!("expected section {name:?}")));
        }
        let len = u64::from_le_bytes(self.bytes[self.pos + 4..self.pos + 12].try_into().expect("8 bytes")) as usize;
        let start = self.pos + 12;
        let end = start
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, format!("section {name:?} overruns file")))?;
        self.pos = end;
        Ok(&self.bytes[start..end])
    }

    fn f32s(&mut self, tag: &[u8; 4], expected: Option<usize>) -> Result<Vec<f64>> {
        let raw = self.section(tag)?;
        if raw.len() % 4 != 0 || expected.is_some_and(|n| n * 4 != raw.len()) {
            return Err(Error::format(
                self.path,
                format!("section {:?} has {} bytes", String::from_utf8_lossy(tag), raw.len()),
            ));
        }
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

pub fn decode_sample(bytes: &[u8], path: &Path, seed: u64, cfg: &DatasetConfig) -> Result<RenderedSample> {
    if bytes.len() < 4 || &bytes[..4] != SAMPLE_MAGIC {
        return Err(Error::format(path, "missing AVD1 magic"));
    }
    let w = cfg.image_size;
    let [c, p, q] = cfg.spectro.shape();
    let mut r = Reader { bytes, pos: 4, path };
    let image = Tensor::new(&[3, w, w], r.f32s(b"IMG ", Some(3 * w * w))?)?;
    let depth = r.f32s(b"DEP ", Some(w * w))?;
    let mat_raw = r.section(b"MAT ")?;
    if mat_raw.len() != 2 * w * w {
        return Err(Error::format(path, "material section size mismatch"));
    }
    let materials: Vec<u16> = mat_raw
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    if materials.iter().any(|&m| m as usize >= cfg.material_table.len()) {
        return Err(Error::format(path, "material index outside table"));
    }
    let inter = r.f32s(b"WAV ", Some(2 * cfg.spectro.num_samples()))?;
    let echo = Waveform::stereo(
        inter.iter().step_by(2).copied().collect(),
        inter.iter().skip(1).step_by(2).copied().collect(),
        cfg.spectro.sample_rate,
    )?;
    let values = Tensor::new(&[c, p, q], r.f32s(b"SPC ", Some(c * p * q))?)?;
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last section"));
    }
    Ok(RenderedSample {
        seed,
        size: w,
        image,
        depth,
        materials,
        echo,
        spectrogram: Spectrogram {
            values,
            config: cfg.spectro.clone(),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub split: Split,
    pub file: String,
    pub seed: u64,
}

/// Distinct per-sample seeds for every split, drawn from the dataset seed.
pub fn sample_seeds(cfg: &DatasetConfig) -> Vec<IndexEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for split in Split::ALL {
        for i in 0..cfg.count(split) {
            let seed = loop {
                let s: u64 = rng.gen();
                if seen.insert(s) {
                    break s;
                }
            };
            out.push(IndexEntry {
                split,
                file: format!("{}_{i:05}.avd", split.name()),
                seed,
            });
        }
    }
    out
}

const INDEX_FILE: &str = "index.txt";
const MANIFEST_FILE: &str = "manifest.txt";
const CHUNK: usize = 32;

/// Renders every sample and writes the dataset to `out`. Rendering runs in
/// parallel; files are written by one writer in index order.
pub fn build_dataset(cfg: &DatasetConfig, out: &Path) -> Result<Vec<IndexEntry>> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let pulse = cfg.pulse()?;
    let entries = sample_seeds(cfg);
    for chunk in entries.chunks(CHUNK) {
        let encoded: Vec<Vec<u8>> = chunk
            .par_iter()
            .map(|e| render_sample(e.seed, cfg, &pulse).map(|s| encode_sample(&s)))
            .collect::<Result<_>>()?;
        for (e, bytes) in chunk.iter().zip(encoded) {
            let path = out.join(&e.file);
            fs::write(&path, bytes).map_err(|err| Error::io(&path, err))?;
        }
    }
    let mut index = String::new();
    for e in &entries {
        index.push_str(&format!("{} {} {}\n", e.split.name(), e.file, e.seed));
    }
    write_text(&out.join(INDEX_FILE), &index)?;
    write_text(&out.join(MANIFEST_FILE), &cfg.to_kv().to_text())?;
    Ok(entries)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// A dataset directory opened for reading.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    pub root: PathBuf,
    pub config: DatasetConfig,
    pub entries: Vec<IndexEntry>,
}

impl DatasetDir {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest_path = root.join(MANIFEST_FILE);
        let map = KvList::parse(&read_text(&manifest_path)?)?.into_map();
        let config = DatasetConfig::from_kv(&map).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        map.reject_unused()
            .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        let index_path = root.join(INDEX_FILE);
        let mut entries = Vec::new();
        for (n, line) in read_text(&index_path)?.lines().enumerate() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::format(&index_path, format!("line {}: expected `split file seed`", n + 1));
            if parts.len() != 3 {
                return Err(bad());
            }
            entries.push(IndexEntry {
                split: parts[0].parse().map_err(|_| bad())?,
                file: parts[1].to_string(),
                seed: parts[2].parse().map_err(|_| bad())?,
            });
        }
        Ok(DatasetDir {
            root: root.to_path_buf(),
            config,
            entries,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<RenderedSample>> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                let path = self.root.join(&e.file);
                let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
                decode_sample(&bytes, &path, e.seed, &self.config)
            })
            .collect()
    }
}
