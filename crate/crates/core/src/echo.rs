//! First-order echo synthesis: a depth/material scene becomes a binaural
//! impulse response, and the response applied to a pulse gives the echo.

use crate::dsp::{convolve, SpectrogramConfig, Waveform};
use crate::error::{Error, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Material {
    pub name: String,
    /// Fraction of incident sound reflected back, in `[0, 1]`.
    pub reflection: f64,
    /// Surface colour used by the renderer.
    pub albedo: [f64; 3],
}

impl Material {
    pub fn new(name: &str, reflection: f64, albedo: [f64; 3]) -> Result<Self> {
        if !(0.0..=1.0).contains(&reflection) {
            return Err(Error::InvalidArgument(format!(
                "material {name}: reflection {reflection} outside [0, 1]"
            )));
        }
        if albedo.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidArgument(format!("material {name}: albedo outside [0, 1]")));
        }
        Ok(Material {
            name: name.to_string(),
            reflection,
            albedo,
        })
    }
}

/// A depth map with per-pixel material labels. Maps are row-major
/// `height × width`; a depth of 0 marks a missing measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub materials: Vec<u16>,
    pub material_table: Vec<Material>,
    pub speed_of_sound: f64,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        if n == 0 || self.depth.len() != n || self.materials.len() != n {
            return Err(Error::InvalidArgument(format!(
                "scene {}x{} has {} depths and {} material labels",
                self.height,
                self.width,
                self.depth.len(),
                self.materials.len()
            )));
        }
        if !(self.speed_of_sound > 0.0) {
            return Err(Error::InvalidArgument("speed of sound must be positive".into()));
        }
        if let Some(d) = self.depth.iter().find(|d| !(**d >= 0.0) || !d.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid depth value {d}")));
        }
        if let Some(m) = self.materials.iter().find(|&&m| m as usize >= self.material_table.len()) {
            return Err(Error::InvalidArgument(format!(
                "material index {m} outside table of {}",
                self.material_table.len()
            )));
        }
        if self.valid_count() == 0 {
            return Err(Error::EmptyScene);
        }
        Ok(())
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.depth.iter().map(|&d| d > 0.0).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EchoConfig {
    pub mic_baseline_m: f64,
    pub fov_deg: f64,
    /// Add the unit lag-0 tap for the emitted signal itself.
    pub include_direct: bool,
    /// Scale each reflection by `1/max(d, 0.1)`.
    pub distance_falloff: bool,
}

impl Default for EchoConfig {
    fn default() -> Self {
        EchoConfig {
            mic_baseline_m: 0.2,
            fov_deg: 90.0,
            include_direct: true,
            distance_falloff: false,
        }
    }
}

impl EchoConfig {
    pub fn with_baseline(mic_baseline_m: f64) -> Self {
        EchoConfig {
            mic_baseline_m,
            ..Default::default()
        }
    }
}

/// Binaural room impulse response.
#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    left: Vec<f64>,
    right: Vec<f64>,
    pub sample_rate: u32,
    pub includes_direct: bool,
}

impl Rir {
    pub fn new(left: Vec<f64>, right: Vec<f64>, sample_rate: u32, includes_direct: bool) -> Result<Self> {
        if left.len() != right.len() {
            return Err(Error::InvalidArgument("RIR channels differ in length".into()));
        }
        if left.iter().chain(&right).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("RIR has non-finite taps".into()));
        }
        Ok(Rir {
            left,
            right,
            sample_rate,
            includes_direct,
        })
    }

    pub fn left(&self) -> &[f64] {
        &self.left
    }

    pub fn right(&self) -> &[f64] {
        &self.right
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }

    pub fn to_waveform(&self) -> Result<Waveform> {
        Waveform::stereo(self.left.clone(), self.right.clone(), self.sample_rate)
    }
}

/// Horizontal angle of a pixel column, linear across the field of view, in radians.
pub fn column_azimuth(col: usize, width: usize, fov_deg: f64) -> f64 {
    ((col as f64 + 0.5) / width as f64 - 0.5) * fov_deg.to_radians()
}

/// Arrival times `(left, right)` in seconds of the reflection from a surface
/// at `depth` seen at `azimuth`.
pub fn ear_delays(depth: f64, azimuth: f64, baseline: f64, speed: f64) -> (f64, f64) {
    let round_trip = 2.0 * depth / speed;
    let itd = 0.5 * baseline * azimuth.sin() / speed;
    (round_trip + itd, round_trip - itd)
}

fn lag(t: f64, fs: f64) -> usize {
    (t * fs).round().max(0.0) as usize
}

pub fn synthesize_rir(scene: &Scene, sample_rate: u32, cfg: &EchoConfig) -> Result<Rir> {
    scene.validate()?;
    if !(cfg.mic_baseline_m >= 0.0) {
        return Err(Error::InvalidArgument("mic baseline must be nonnegative".into()));
    }
    if sample_rate == 0 {
        return Err(Error::InvalidArgument("sample rate must be positive".into()));
    }
    let fs = sample_rate as f64;
    let n_valid = scene.valid_count() as f64;
    let mut taps = Vec::with_capacity(scene.valid_count());
    let mut max_lag = 0;
    for row in 0..scene.height {
        for col in 0..scene.width {
            let i = row * scene.width + col;
            let d = scene.depth[i];
            if d <= 0.0 {
                continue;
            }
            let az = column_azimuth(col, scene.width, cfg.fov_deg);
            let (tl, tr) = ear_delays(d, az, cfg.mic_baseline_m, scene.speed_of_sound);
            let mut amp = scene.material_table[scene.materials[i] as usize].reflection / n_valid;
            if cfg.distance_falloff {
                amp /= d.max(0.1);
            }
            let (ll, lr) = (lag(tl, fs), lag(tr, fs));
            max_lag = max_lag.max(ll).max(lr);
            taps.push((ll, lr, amp));
        }
    }
    let mut left = vec![0.0; max_lag + 1];
    let mut right = vec![0.0; max_lag + 1];
    if cfg.include_direct {
        left[0] += 1.0;
        right[0] += 1.0;
    }
    for (ll, lr, amp) in taps {
        left[ll] += amp;
        right[lr] += amp;
    }
    Rir::new(left, right, sample_rate, cfg.include_direct)
}

/// Stereo echo of `pulse` in `scene`, truncated to the configured duration.
pub fn simulate_echo(scene: &Scene, pulse: &Waveform, spec: &SpectrogramConfig, cfg: &EchoConfig) -> Result<Waveform> {
    if pulse.num_channels() != 1 {
        return Err(Error::InvalidArgument("echo pulse must be mono".into()));
    }
    if pulse.sample_rate() != spec.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "pulse rate {} differs from spectrogram rate {}",
            pulse.sample_rate(),
            spec.sample_rate
        )));
    }
    let rir = synthesize_rir(scene, spec.sample_rate, cfg)?;
    convolve(pulse, &rir, Some(spec.num_samples()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(a: f64) -> Vec<Material> {
        vec![Material::new("m", a, [0.5; 3]).unwrap()]
    }

    fn scene(width: usize, height: usize, depth: Vec<f64>, a: f64) -> Scene {
        Scene {
            width,
            height,
            materials: vec![0; depth.len()],
            depth,
            material_table: table(a),
            speed_of_sound: SPEED_OF_SOUND,
        }
    }

    #[test]
    fn single_pixel_tap() {
        let s = scene(1, 1, vec![3.43], 1.0);
        let fs = 44_100;
        let rir = synthesize_rir(&s, fs, &EchoConfig::with_baseline(0.0)).unwrap();
        let expected_lag = (0.02 * fs as f64).round() as usize;
        assert_eq!(rir.len(), expected_lag + 1);
        for ch in [rir.left(), rir.right()] {
            assert_eq!(ch[0], 1.0);
            assert_eq!(ch[expected_lag], 1.0);
            assert_eq!(ch.iter().filter(|&&v| v != 0.0).count(), 2);
        }
    }

    #[test]
    fn coincident_pixels_sum() {
        // a 1-wide scene puts both pixels at azimuth 0
        let s = scene(1, 2, vec![2.0, 2.0], 0.5);
        let rir = synthesize_rir(&s, 16_000, &EchoConfig::default()).unwrap();
        let l = (4.0 / 343.0 * 16_000.0_f64).round() as usize;
        assert!((rir.left()[l] - 0.5).abs() < 1e-15);
        assert!((rir.right()[l] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn absorbing_scene_is_direct_only() {
        let s = scene(4, 4, vec![1.5; 16], 0.0);
        let rir = synthesize_rir(&s, 16_000, &EchoConfig::default()).unwrap();
        assert_eq!(rir.left()[0], 1.0);
        assert!(rir.left()[1..].iter().chain(&rir.right()[1..]).all(|&v| v == 0.0));
    }

    #[test]
    fn empty_scene_rejected() {
        let s = scene(2, 2, vec![0.0; 4], 1.0);
        assert!(matches!(
            synthesize_rir(&s, 16_000, &EchoConfig::default()),
            Err(Error::EmptyScene)
        ));
    }

    #[test]
    fn bad_material_index_rejected() {
        let mut s = scene(2, 1, vec![1.0, 1.0], 1.0);
        s.materials[1] = 3;
        assert!(s.validate().is_err());
    }

    #[test]
    fn right_column_reaches_left_ear_later() {
        let s = scene(2, 1, vec![0.0, 2.0], 1.0);
        let rir = synthesize_rir(&s, 44_100, &EchoConfig::default()).unwrap();
        let pos = |c: &[f64]| c[1..].iter().position(|&v| v != 0.0).unwrap() + 1;
        assert!(pos(rir.left()) > pos(rir.right()));
    }

    #[test]
    fn falloff_scales_by_inverse_depth() {
        let s = scene(1, 1, vec![4.0], 0.8);
        let cfg = EchoConfig {
            distance_falloff: true,
            ..EchoConfig::with_baseline(0.0)
        };
        let rir = synthesize_rir(&s, 16_000, &cfg).unwrap();
        assert!((rir.left().last().unwrap() - 0.2).abs() < 1e-15);
    }
}
