//! Ablation and input-resolution protocols built on [`crate::train`].

use echodepth_tensor::Tensor;

use crate::error::Result;
use crate::fusion::FusionKind;
use crate::kv::KvList;
use crate::metrics::{MetricsReport, RelMode};
use crate::model::{Model, ModelKind, Modalities};
use crate::nets::NetConfig;
use crate::scene::RenderedSample;
use crate::train::{evaluate, evaluate_with, train, TrainConfig};

pub const MODALITY_MODES: [Modalities; 4] = [
    Modalities::ECHO,
    Modalities::ECHO_IMG,
    Modalities::ECHO_MAT,
    Modalities::ALL,
];

pub const SWEEP_SCALES: [f64; 6] = [1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn to_kv(&self) -> KvList {
        let mut kv = self.net.to_kv();
        kv.extend(&self.train.to_kv());
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        kv.push("experiment.seeds", seeds.join(","));
        kv
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    pub report: MetricsReport,
}

/// Trains `kind` from scratch with `seed` (weights and shuffling) and
/// returns the trained model.
pub fn train_model(kind: ModelKind, cfg: &ExperimentConfig, seed: u64, train_set: &[RenderedSample]) -> Result<Model> {
    let mut model = Model::new(kind, cfg.net.clone(), seed)?;
    let tc = TrainConfig {
        seed,
        eval_val: false,
        ..cfg.train.clone()
    };
    train(&mut model, train_set, None, &tc, |_, _| Ok(()))?;
    Ok(model)
}

fn run_kinds(
    kinds: &[(String, ModelKind)],
    cfg: &ExperimentConfig,
    train_set: &[RenderedSample],
    test_set: &[RenderedSample],
) -> Result<Vec<RunResult>> {
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        for (label, kind) in kinds {
            let model = train_model(*kind, cfg, seed, train_set)?;
            let report = evaluate(&model, test_set, RelMode::Absolute)?.report;
            out.push(RunResult {
                label: label.clone(),
                seed,
                report,
            });
        }
    }
    Ok(out)
}

/// One trained concatenation-decoder model per modality subset and seed.
pub fn ablate_modalities(
    modes: &[Modalities],
    cfg: &ExperimentConfig,
    train_set: &[RenderedSample],
    test_set: &[RenderedSample],
) -> Result<Vec<RunResult>> {
    let kinds: Vec<(String, ModelKind)> = modes.iter().map(|m| (m.name(), ModelKind::Subset(*m))).collect();
    run_kinds(&kinds, cfg, train_set, test_set)
}

/// One trained attention model per fusion variant and seed.
pub fn ablate_fusion(
    variants: &[FusionKind],
    cfg: &ExperimentConfig,
    train_set: &[RenderedSample],
    test_set: &[RenderedSample],
) -> Result<Vec<RunResult>> {
    let kinds: Vec<(String, ModelKind)> = variants
        .iter()
        .map(|f| (f.name().to_string(), ModelKind::Fused(*f)))
        .collect();
    run_kinds(&kinds, cfg, train_set, test_set)
}

/// Mean RMSE per label, in first-seen label order.
pub fn mean_rmse(results: &[RunResult]) -> Vec<(String, f64)> {
    let mut labels: Vec<String> = Vec::new();
    for r in results {
        if !labels.contains(&r.label) {
            labels.push(r.label.clone());
        }
    }
    labels
        .into_iter()
        .map(|l| {
            let v: Vec<f64> = results.iter().filter(|r| r.label == l).map(|r| r.report.rmse).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            (l, mean)
        })
        .collect()
}

/// Nearest-neighbour downsample of a `[C, H, W]` image by `scale`, then
/// nearest-neighbour upsample back to `H × W`. `None` if the reduced image
/// would be smaller than one pixel.
pub fn degrade_resolution(image: &Tensor, scale: f64) -> Option<Tensor> {
    let [c, h, w] = match *image.shape() {
        [c, h, w] => [c, h, w],
        _ => return None,
    };
    let sh = (h as f64 * scale).round() as usize;
    let sw = (w as f64 * scale).round() as usize;
    if sh < 1 || sw < 1 {
        return None;
    }
    let src = image.data();
    let mut small = vec![0.0; c * sh * sw];
    for ch in 0..c {
        for y in 0..sh {
            let sy = y * h / sh;
            for x in 0..sw {
                let sx = x * w / sw;
                small[(ch * sh + y) * sw + x] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    Some(Tensor::from_fn(&[c, h, w], |i| {
        let ch = i / (h * w);
        let y = (i / w) % h;
        let x = i % w;
        small[(ch * sh + y * sh / h) * sw + x * sw / w]
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub scale: f64,
    pub report: Option<MetricsReport>,
    pub note: Option<String>,
}

/// Evaluates `model` with the RGB input degraded at each scale; the echo input is untouched.
pub fn resolution_sweep(model: &Model, samples: &[RenderedSample], scales: &[f64]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &scale in scales {
        let size = samples.first().map_or(0, |s| s.size);
        if (size as f64 * scale).round() < 1.0 {
            rows.push(SweepRow {
                scale,
                report: None,
                note: Some(format!("scale {scale} leaves less than one pixel of a {size}-pixel image")),
            });
            continue;
        }
        let ev = evaluate_with(model, samples, RelMode::Absolute, |s| {
            degrade_resolution(&s.image, scale).expect("scale checked above")
        })?;
        rows.push(SweepRow {
            scale,
            report: Some(ev.report),
            note: None,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_is_identity() {
        let img = Tensor::from_fn(&[3, 8, 8], |i| i as f64);
        assert_eq!(degrade_resolution(&img, 1.0).unwrap(), img);
    }

    #[test]
    fn constant_image_survives_down_up() {
        let img = Tensor::full(&[3, 8, 8], 0.4);
        assert_eq!(degrade_resolution(&img, 0.5).unwrap(), img);
    }

    #[test]
    fn half_scale_replicates_blocks() {
        let img = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
        let d = degrade_resolution(&img, 0.5).unwrap();
        assert_eq!(
            d.data(),
            &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 2.0, 2.0, 8.0, 8.0, 10.0, 10.0, 8.0, 8.0, 10.0, 10.0]
        );
        assert!(degrade_resolution(&img, 0.1).is_none());
    }

    #[test]
    fn mean_rmse_groups_by_label() {
        let rep = |rmse| MetricsReport {
            rmse,
            rel: 0.0,
            log10: 0.0,
            delta1: 1.0,
            delta2: 1.0,
            delta3: 1.0,
            n_valid: 1,
            n_clamped: 0,
        };
        let rs = vec![
            RunResult { label: "a".into(), seed: 0, report: rep(1.0) },
            RunResult { label: "b".into(), seed: 0, report: rep(4.0) },
            RunResult { label: "a".into(), seed: 1, report: rep(3.0) },
        ];
        assert_eq!(mean_rmse(&rs), vec![("a".to_string(), 2.0), ("b".to_string(), 4.0)]);
    }
}
