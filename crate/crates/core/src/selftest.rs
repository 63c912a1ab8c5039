//! Built-in invariant checks run by `cvq self-test`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distortion::{variant_classes, DistortionClass, NUM_CLASSES};
use crate::error::Result;
use crate::features::{FeatureSequence, Scale};
use crate::loss::{batch_loss, batch_loss_reference, BatchItem, Label, LossConfig, LossMode};
use crate::model::{ForwardPass, ModelDims, SequenceModel};
use crate::video::{Fps, VideoTensor};
use crate::wavelet::{wpt_forward, wpt_inverse, WaveletFamily};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst relative error between analytic parameter gradients of
/// `a·z + b·h` and central differences, for a small random model.
pub fn model_gradient_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = ModelDims { input_dim: 4, hidden_dim: 5, projector_hidden: 6, output_dim: 3 };
    let mut model = SequenceModel::init(dims, &mut rng);
    for (_, t) in model.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    let x = FeatureSequence::new(4, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect(), Scale::Full)?;
    let a: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let objective = |m: &SequenceModel| -> Result<f64> {
        let e = m.embed(&x)?;
        Ok(a.iter().zip(&e.z).map(|(p, q)| p * q).sum::<f64>() + b.iter().zip(&e.h).map(|(p, q)| p * q).sum::<f64>())
    };
    let mut pass = ForwardPass::new(&model);
    pass.forward(&x)?;
    let grads = pass.backward(Some(&a), Some(&b))?;
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..grads.tensors().len() {
        for i in 0..grads.tensors()[k].1.data.len() {
            let orig = model.tensors()[k].1.data[i];
            model.tensors_mut()[k].1.data[i] = orig + eps;
            let up = objective(&model)?;
            model.tensors_mut()[k].1.data[i] = orig - eps;
            let down = objective(&model)?;
            model.tensors_mut()[k].1.data[i] = orig;
            worst = worst.max(relative_error((up - down) / (2.0 * eps), grads.tensors()[k].1.data[i], 1e-6));
        }
    }
    Ok(worst)
}

/// Worst relative error of `dL/dz` for a random mixed batch.
pub fn loss_gradient_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = [Label::Synthetic(0), Label::Synthetic(0), Label::Synthetic(1), Label::Synthetic(1), Label::Ugc(7), Label::Ugc(7)];
    let mut batch: Vec<BatchItem> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| BatchItem { z: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(), label: *l, view_id: i % 2 })
        .collect();
    let cfg = LossConfig { temperature: 0.5, mode: LossMode::Combined };
    let grad = batch_loss(&batch, &cfg)?.grad_z;
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..batch.len() {
        for k in 0..4 {
            let orig = batch[i].z[k];
            batch[i].z[k] = orig + eps;
            let up = batch_loss_reference(&batch, &cfg)?;
            batch[i].z[k] = orig - eps;
            let down = batch_loss_reference(&batch, &cfg)?;
            batch[i].z[k] = orig;
            worst = worst.max(relative_error((up - down) / (2.0 * eps), grad[i][k], 1e-6));
        }
    }
    Ok(worst)
}

/// Max reconstruction error of analysis followed by synthesis.
pub fn wavelet_reconstruction_error(signals: usize, len: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..signals {
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        for family in WaveletFamily::ALL {
            let y = wpt_inverse(&wpt_forward(&x, family)?, family, len)?;
            worst = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        }
    }
    Ok(worst)
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

pub fn run_all() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let ids: std::collections::BTreeSet<usize> = DistortionClass::all().map(|c| c.class_id()).collect();
    out.push(check("class enumeration", ids.len() == NUM_CLASSES && NUM_CLASSES == 120, format!("{} ids", ids.len())));

    let source = VideoTensor::filled(1920, 1080, 1, Fps::integer(60), 0.5);
    let variants = source.and_then(|v| variant_classes(&v)).map(|c| c.len());
    out.push(check("60 fps 1080p variants", matches!(variants, Ok(45)), format!("{variants:?}")));

    match wavelet_reconstruction_error(100, 64, 0) {
        Ok(e) => out.push(check("wavelet perfect reconstruction", e <= 1e-10, format!("max error {e:.3e}"))),
        Err(e) => out.push(check("wavelet perfect reconstruction", false, e.to_string())),
    }

    let identical: Vec<BatchItem> =
        (0..4).map(|i| BatchItem { z: vec![1.0, 0.0], label: Label::Synthetic(3), view_id: i % 2 }).collect();
    let cfg = LossConfig { temperature: 0.1, mode: LossMode::Combined };
    let l = batch_loss(&identical, &cfg).map(|b| b.loss);
    out.push(check(
        "loss oracle (log 3)",
        matches!(l, Ok(v) if (v - 3f64.ln()).abs() < 1e-9),
        format!("{l:?}"),
    ));

    let worst = (0..3).map(loss_gradient_error).collect::<Result<Vec<_>>>().map(|v| v.into_iter().fold(0.0, f64::max));
    out.push(check("loss gradient", matches!(worst, Ok(e) if e < 1e-4), format!("{worst:?}")));
    let worst = (0..3).map(model_gradient_error).collect::<Result<Vec<_>>>().map(|v| v.into_iter().fold(0.0, f64::max));
    out.push(check("model gradient", matches!(worst, Ok(e) if e < 1e-4), format!("{worst:?}")));
    out
}
