//! NT-Xent objectives over cosine similarities of projector outputs.
//!
//! For item `i` with positive set `P(i)` (same label, excluding `i`):
//!
//! ```text
//! L_i = (1/|P(i)|) sum_{j in P(i)} -log( exp(phi_ij / tau) / sum_{m != i} exp(phi_im / tau) )
//! ```
//!
//! Synthetic items are positives of every other item with the same
//! distortion class; a UGC item has exactly one positive, its other view.
//! The batch loss is the mean of the per-item losses that the mode enables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What makes two batch items positives of each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Synthetic(usize),
    Ugc(u64),
}

impl Label {
    pub fn is_ugc(&self) -> bool {
        matches!(self, Label::Ugc(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub z: Vec<f64>,
    pub label: Label,
    pub view_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Combined,
    SyntheticOnly,
    UgcOnly,
}

impl LossMode {
    /// Whether items with this label take part in the loss at all.
    pub fn admits(self, label: &Label) -> bool {
        match self {
            LossMode::Combined => true,
            LossMode::SyntheticOnly => !label.is_ugc(),
            LossMode::UgcOnly => label.is_ugc(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub mode: LossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 0.1, mode: LossMode::Combined }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Ok(c.clamp(-1.0, 1.0))
}

fn positives(i: usize, batch: &[BatchItem]) -> Vec<usize> {
    (0..batch.len()).filter(|&j| j != i && batch[j].label == batch[i].label).collect()
}

/// `-log(exp(phi_ij/tau) / sum_{m != i} exp(phi_im/tau))` averaged over `js`,
/// evaluated term by term.
fn reference_term(i: usize, js: &[usize], batch: &[BatchItem], tau: f64) -> Result<f64> {
    let sims: Vec<f64> = batch
        .iter()
        .enumerate()
        .map(|(m, item)| if m == i { Ok(f64::NEG_INFINITY) } else { cosine_sim(&batch[i].z, &item.z).map(|s| s / tau) })
        .collect::<Result<_>>()?;
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + sims.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    Ok(js.iter().map(|&j| lse - sims[j]).sum::<f64>() / js.len() as f64)
}

/// Supervised NT-Xent for synthetic item `i`; the denominator spans the whole batch.
pub fn loss_synthetic(i: usize, batch: &[BatchItem], cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if batch.get(i).map_or(true, |b| b.label.is_ugc()) {
        return Err(Error::InvalidConfig(format!("item {i} is not a synthetic batch member")));
    }
    let pos = positives(i, batch);
    if pos.is_empty() {
        return Err(Error::NoPositives(i));
    }
    reference_term(i, &pos, batch, cfg.temperature)
}

/// Instance-discrimination loss for UGC item `i`, whose only positive is its other view.
pub fn loss_ugc(i: usize, batch: &[BatchItem], cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if !batch.get(i).is_some_and(|b| b.label.is_ugc()) {
        return Err(Error::InvalidConfig(format!("item {i} is not a UGC batch member")));
    }
    let pos = positives(i, batch);
    match pos.len() {
        0 => Err(Error::NoPositives(i)),
        1 => reference_term(i, &pos, batch, cfg.temperature),
        count => Err(Error::MultiplePositives { index: i, count }),
    }
}

/// Batch loss and its gradient with respect to every `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    pub per_item: Vec<Option<f64>>,
    pub grad_z: Vec<Vec<f64>>,
}

/// Mean per-item loss over the items the mode admits, with analytic
/// gradients. Items excluded by the mode are removed from the batch
/// entirely and receive zero gradient.
pub fn batch_loss(batch: &[BatchItem], cfg: &LossConfig) -> Result<BatchLoss> {
    cfg.validate()?;
    let active: Vec<usize> = (0..batch.len()).filter(|&i| cfg.mode.admits(&batch[i].label)).collect();
    if active.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let k = batch[active[0]].z.len();
    if active.iter().any(|&i| batch[i].z.len() != k) {
        return Err(Error::DimensionMismatch("batch embeddings differ in length".into()));
    }
    let n = active.len();
    let tau = cfg.temperature;

    let norms: Vec<f64> = active.iter().map(|&i| norm(&batch[i].z)).collect();
    if norms.iter().any(|&v| v == 0.0) {
        return Err(Error::ZeroVector);
    }
    let unit: Vec<Vec<f64>> = active
        .iter()
        .zip(&norms)
        .map(|(&i, &nv)| batch[i].z.iter().map(|v| v / nv).collect())
        .collect();
    let mut sim = vec![0.0; n * n];
    for a in 0..n {
        for b in a..n {
            let s: f64 = unit[a].iter().zip(&unit[b]).map(|(x, y)| x * y).sum();
            sim[a * n + b] = s;
            sim[b * n + a] = s;
        }
    }

    // coefficient of phi_ab in the total loss
    let mut coef = vec![0.0; n * n];
    let mut per_item = vec![None; batch.len()];
    let mut total = 0.0;
    for a in 0..n {
        let label = batch[active[a]].label;
        let pos: Vec<usize> = (0..n).filter(|&b| b != a && batch[active[b]].label == label).collect();
        if pos.is_empty() {
            return Err(Error::NoPositives(active[a]));
        }
        if label.is_ugc() && pos.len() > 1 {
            return Err(Error::MultiplePositives { index: active[a], count: pos.len() });
        }
        let row = &sim[a * n..(a + 1) * n];
        let max = (0..n).filter(|&b| b != a).map(|b| row[b] / tau).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).filter(|&b| b != a).map(|b| (row[b] / tau - max).exp()).sum();
        let lse = max + denom.ln();
        let inv_p = 1.0 / pos.len() as f64;
        let li = lse - inv_p * pos.iter().map(|&b| row[b] / tau).sum::<f64>();
        per_item[active[a]] = Some(li);
        total += li;
        for b in (0..n).filter(|&b| b != a) {
            coef[a * n + b] += ((row[b] / tau - max).exp() / denom) / (tau * n as f64);
        }
        for &b in &pos {
            coef[a * n + b] -= inv_p / (tau * n as f64);
        }
    }

    let mut grad_unit = vec![vec![0.0; k]; n];
    for a in 0..n {
        for b in 0..n {
            let c = coef[a * n + b];
            if c == 0.0 {
                continue;
            }
            for d in 0..k {
                grad_unit[a][d] += c * unit[b][d];
                grad_unit[b][d] += c * unit[a][d];
            }
        }
    }
    let mut grad_z = vec![vec![0.0; k]; batch.len()];
    for a in 0..n {
        let proj: f64 = grad_unit[a].iter().zip(&unit[a]).map(|(g, u)| g * u).sum();
        grad_z[active[a]] = grad_unit[a].iter().zip(&unit[a]).map(|(g, u)| (g - u * proj) / norms[a]).collect();
    }
    Ok(BatchLoss { loss: total / n as f64, per_item, grad_z })
}

/// Term-by-term evaluation of the batch loss through `loss_synthetic` and `loss_ugc`.
pub fn batch_loss_reference(batch: &[BatchItem], cfg: &LossConfig) -> Result<f64> {
    let kept: Vec<BatchItem> = batch.iter().filter(|b| cfg.mode.admits(&b.label)).cloned().collect();
    if kept.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for i in 0..kept.len() {
        total += if kept[i].label.is_ugc() { loss_ugc(i, &kept, cfg)? } else { loss_synthetic(i, &kept, cfg)? };
    }
    Ok(total / kept.len() as f64)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn item(z: Vec<f64>, label: Label) -> BatchItem {
        BatchItem { z, label, view_id: 0 }
    }

    #[test]
    fn cosine_basics() {
        let z = vec![0.3, -1.2, 2.0];
        assert!((cosine_sim(&z, &z).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = z.iter().map(|v| -v).collect();
        assert!((cosine_sim(&z, &neg).unwrap() + 1.0).abs() < 1e-15);
        let w = vec![1.0, 0.5, -0.1];
        let w3: Vec<f64> = w.iter().map(|v| 3.0 * v).collect();
        assert!((cosine_sim(&z, &w).unwrap() - cosine_sim(&z, &w3).unwrap()).abs() < 1e-12);
        assert!((cosine_sim(&z, &w).unwrap() - cosine_sim(&w, &z).unwrap()).abs() < 1e-15);
        assert!(matches!(cosine_sim(&z, &[0.0; 3]), Err(Error::ZeroVector)));
    }

    #[test]
    fn identical_pair_has_zero_loss() {
        let cfg = LossConfig::default();
        let batch = vec![item(vec![1.0, 2.0], Label::Synthetic(3)), item(vec![1.0, 2.0], Label::Synthetic(3))];
        assert!(loss_synthetic(0, &batch, &cfg).unwrap().abs() < 1e-15);
    }

    #[test]
    fn one_positive_one_orthogonal_negative() {
        let cfg = LossConfig::default();
        let batch = vec![
            item(vec![1.0, 0.0], Label::Synthetic(0)),
            item(vec![2.0, 0.0], Label::Synthetic(0)),
            item(vec![0.0, 1.0], Label::Synthetic(1)),
        ];
        let expected = (1.0 + (-10.0f64).exp()).ln();
        assert!((loss_synthetic(0, &batch, &cfg).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 4.5399e-5).abs() < 1e-9);
    }

    #[test]
    fn ugc_pair_alone_is_zero() {
        let cfg = LossConfig::default();
        let batch = vec![item(vec![1.0, 0.0], Label::Ugc(9)), item(vec![0.2, 1.0], Label::Ugc(9))];
        assert!(loss_ugc(0, &batch, &cfg).unwrap().abs() < 1e-15);
    }

    #[test]
    fn ugc_hand_case() {
        let cfg = LossConfig::default();
        let s = (1.0f64 - 0.81).sqrt();
        let t = (1.0f64 - 0.01).sqrt();
        let batch = vec![
            item(vec![1.0, 0.0], Label::Ugc(1)),
            item(vec![0.9, s], Label::Ugc(1)),
            item(vec![0.1, t], Label::Ugc(2)),
            item(vec![0.1, -t], Label::Ugc(2)),
        ];
        let expected = -((9.0f64).exp() / ((9.0f64).exp() + 2.0 * (1.0f64).exp())).ln();
        assert!((loss_ugc(0, &batch, &cfg).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ugc_multiple_positives() {
        let cfg = LossConfig::default();
        let batch = vec![
            item(vec![1.0, 0.0], Label::Ugc(1)),
            item(vec![0.0, 1.0], Label::Ugc(1)),
            item(vec![1.0, 1.0], Label::Ugc(1)),
        ];
        assert!(matches!(loss_ugc(0, &batch, &cfg), Err(Error::MultiplePositives { index: 0, count: 2 })));
        assert!(matches!(batch_loss(&batch, &cfg), Err(Error::MultiplePositives { .. })));
    }

    #[test]
    fn no_positives() {
        let cfg = LossConfig::default();
        let batch = vec![item(vec![1.0, 0.0], Label::Synthetic(1)), item(vec![0.0, 1.0], Label::Synthetic(2))];
        assert!(matches!(loss_synthetic(0, &batch, &cfg), Err(Error::NoPositives(0))));
        assert!(matches!(batch_loss(&batch, &cfg), Err(Error::NoPositives(0))));
    }

    #[test]
    fn four_identical_same_class_gives_log3() {
        let cfg = LossConfig::default();
        let batch: Vec<BatchItem> = (0..4).map(|_| item(vec![0.5, 0.5, 0.1], Label::Synthetic(7))).collect();
        let out = batch_loss(&batch, &cfg).unwrap();
        assert!((out.loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_batch() {
        assert!(matches!(batch_loss(&[], &LossConfig::default()), Err(Error::EmptyBatch)));
    }

    fn mixed_batch(rng: &mut ChaCha8Rng, k: usize) -> Vec<BatchItem> {
        let labels = [
            Label::Synthetic(4),
            Label::Synthetic(4),
            Label::Synthetic(9),
            Label::Synthetic(9),
            Label::Synthetic(4),
            Label::Ugc(1),
            Label::Ugc(1),
            Label::Ugc(2),
            Label::Ugc(2),
        ];
        labels
            .iter()
            .enumerate()
            .map(|(v, &label)| BatchItem { z: (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(), label, view_id: v % 2 })
            .collect()
    }

    #[test]
    fn synthetic_only_ignores_ugc() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = mixed_batch(&mut rng, 5);
        let cfg = LossConfig { temperature: 0.1, mode: LossMode::SyntheticOnly };
        let out = batch_loss(&batch, &cfg).unwrap();
        for (i, b) in batch.iter().enumerate() {
            if b.label.is_ugc() {
                assert!(out.grad_z[i].iter().all(|&g| g == 0.0));
                assert!(out.per_item[i].is_none());
            }
        }
        let syn: Vec<BatchItem> = batch.iter().filter(|b| !b.label.is_ugc()).cloned().collect();
        assert!((batch_loss(&syn, &cfg).unwrap().loss - out.loss).abs() < 1e-14);
    }

    #[test]
    fn vectorized_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for mode in [LossMode::Combined, LossMode::SyntheticOnly, LossMode::UgcOnly] {
            let cfg = LossConfig { temperature: 0.1, mode };
            for _ in 0..20 {
                let batch = mixed_batch(&mut rng, 6);
                let a = batch_loss(&batch, &cfg).unwrap().loss;
                let b = batch_loss_reference(&batch, &cfg).unwrap();
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = LossConfig::default();
        let mut batch = mixed_batch(&mut rng, 5);
        let out = batch_loss(&batch, &cfg).unwrap();
        let eps = 1e-6;
        for i in 0..batch.len() {
            for d in 0..5 {
                let orig = batch[i].z[d];
                batch[i].z[d] = orig + eps;
                let up = batch_loss(&batch, &cfg).unwrap().loss;
                batch[i].z[d] = orig - eps;
                let down = batch_loss(&batch, &cfg).unwrap().loss;
                batch[i].z[d] = orig;
                let fd = (up - down) / (2.0 * eps);
                let g = out.grad_z[i][d];
                assert!((fd - g).abs() / fd.abs().max(g.abs()).max(1e-6) < 1e-6, "{fd} vs {g}");
            }
        }
    }

    #[test]
    fn scale_and_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = LossConfig::default();
        let batch = mixed_batch(&mut rng, 4);
        let base = batch_loss(&batch, &cfg).unwrap().loss;
        let mut scaled = batch.clone();
        scaled[3].z.iter_mut().for_each(|v| *v *= 7.5);
        assert!((batch_loss(&scaled, &cfg).unwrap().loss - base).abs() < 1e-9);
        let mut rev = batch.clone();
        rev.reverse();
        assert!((batch_loss(&rev, &cfg).unwrap().loss - base).abs() < 1e-12);
    }
}
