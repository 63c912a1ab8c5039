//! Training samples: precomputed features for both spatial scales of a
//! video, untransformed and for every temporal band-pass leaf.
//!
//! On disk, one directory per video holds `{scale}_raw.cvqf` and
//! `{scale}_{family}_s{subband}.cvqf` for `scale` in `full`, `half`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distortion::resample_spatial;
use crate::error::{Error, Result};
use crate::features::{encode_video, load_features, save_features, FeatureSequence, Scale, SpatialEncoder};
use crate::loss::Label;
use crate::video::VideoTensor;
use crate::wavelet::{wpt_subband_video, WaveletBand};

/// Features of one spatial scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewFeatures {
    pub raw: FeatureSequence,
    pub subbands: BTreeMap<WaveletBand, FeatureSequence>,
}

impl ViewFeatures {
    pub fn get(&self, band: Option<WaveletBand>) -> Option<&FeatureSequence> {
        match band {
            None => Some(&self.raw),
            Some(s) => self.subbands.get(&s),
        }
    }

    fn all(&self) -> impl Iterator<Item = &FeatureSequence> {
        std::iter::once(&self.raw).chain(self.subbands.values())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub id: String,
    pub label: Label,
    pub full: ViewFeatures,
    pub half: ViewFeatures,
}

impl TrainingSample {
    pub fn view(&self, scale: Scale) -> &ViewFeatures {
        match scale {
            Scale::Full => &self.full,
            Scale::Half => &self.half,
        }
    }
}

/// Half-resolution view, anti-aliased by the widened Lanczos kernel.
pub fn half_scale(video: &VideoTensor) -> Result<VideoTensor> {
    resample_spatial(video, (video.width() / 2).max(1), (video.height() / 2).max(1))
}

/// Features of a single view: untransformed plus, when requested, every
/// band-pass leaf. Subband stacks are rescaled to `[0, 1]` before encoding.
pub fn view_features(
    video: &VideoTensor,
    encoder: &dyn SpatialEncoder,
    scale: Scale,
    with_subbands: bool,
) -> Result<ViewFeatures> {
    let raw = encode_video(video, encoder, scale)?;
    let subbands = if with_subbands {
        WaveletBand::all()
            .into_par_iter()
            .map(|band| {
                let sub = wpt_subband_video(video, band)?.normalize_unit_range();
                Ok((band, encode_video(&sub, encoder, scale)?))
            })
            .collect::<Result<BTreeMap<_, _>>>()?
    } else {
        BTreeMap::new()
    };
    Ok(ViewFeatures { raw, subbands })
}

/// Both views of one video. The half-scale view is downsampled before any
/// temporal transform is applied.
pub fn sample_from_video(
    id: impl Into<String>,
    label: Label,
    video: &VideoTensor,
    encoder: &dyn SpatialEncoder,
    with_subbands: bool,
) -> Result<TrainingSample> {
    let half = half_scale(video)?;
    let (full, half) = rayon::join(
        || view_features(video, encoder, Scale::Full, with_subbands),
        || view_features(&half, encoder, Scale::Half, with_subbands),
    );
    Ok(TrainingSample { id: id.into(), label, full: full?, half: half? })
}

fn file_name(scale: Scale, band: Option<WaveletBand>) -> String {
    match band {
        None => format!("{}_raw.cvqf", scale.name()),
        Some(s) => format!("{}_{}.cvqf", scale.name(), s.tag()),
    }
}

pub fn save_view(view: &ViewFeatures, scale: Scale, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::from_write(e, dir))?;
    save_features(&view.raw, dir.join(file_name(scale, None)))?;
    for (band, seq) in &view.subbands {
        save_features(seq, dir.join(file_name(scale, Some(*band))))?;
    }
    Ok(())
}

/// Loads a view; subband files are optional but must be all-or-nothing.
pub fn load_view(dir: &Path, scale: Scale) -> Result<ViewFeatures> {
    let raw = load_features(dir.join(file_name(scale, None)), scale)?;
    let mut subbands = BTreeMap::new();
    for band in WaveletBand::all() {
        let path = dir.join(file_name(scale, Some(band)));
        if path.exists() {
            subbands.insert(band, load_features(&path, scale)?);
        }
    }
    if !subbands.is_empty() && subbands.len() != WaveletBand::all().len() {
        return Err(Error::MissingFile(dir.join(format!("{}_<missing subbands>", scale.name()))));
    }
    Ok(ViewFeatures { raw, subbands })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub id: String,
    pub label: Label,
    pub feature_dir: PathBuf,
}

/// Training data manifest (JSON): `{"samples": [{"id", "label", "feature_dir"}]}`
/// where `label` is `{"synthetic": class_id}` or `{"ugc": instance_id}`.
/// Relative feature directories resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainManifest {
    pub samples: Vec<ManifestSample>,
}

impl TrainManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::from_open(e, path))?;
        let mut m: Self = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut m.samples {
            if s.feature_dir.is_relative() {
                s.feature_dir = base.join(&s.feature_dir);
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::from_write(e, path))
    }

    pub fn load_samples(&self) -> Result<Vec<TrainingSample>> {
        self.samples
            .iter()
            .map(|s| {
                Ok(TrainingSample {
                    id: s.id.clone(),
                    label: s.label,
                    full: load_view(&s.feature_dir, Scale::Full)?,
                    half: load_view(&s.feature_dir, Scale::Half)?,
                })
            })
            .collect()
    }
}

/// Validated training samples.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    samples: Vec<TrainingSample>,
    dim: usize,
    temporal_transform: bool,
    synthetic: Vec<usize>,
    ugc: Vec<usize>,
}

impl TrainingSet {
    /// Checks dims, view completeness and the minimum length `crop_len`.
    pub fn new(samples: Vec<TrainingSample>, crop_len: usize, temporal_transform: bool) -> Result<Self> {
        let mut dim = None;
        let mut seen_ugc = HashSet::new();
        for s in &samples {
            if let Label::Ugc(id) = s.label {
                if !seen_ugc.insert(id) {
                    return Err(Error::InvalidConfig(format!("UGC instance id {id} used by more than one sample")));
                }
            }
            for view in [&s.full, &s.half] {
                if temporal_transform && view.subbands.len() != WaveletBand::all().len() {
                    return Err(Error::InvalidConfig(format!("sample {} lacks subband features", s.id)));
                }
                let used: Vec<&FeatureSequence> =
                    if temporal_transform { view.subbands.values().collect() } else { vec![&view.raw] };
                for seq in view.all() {
                    match dim {
                        None => dim = Some(seq.dim()),
                        Some(d) if d != seq.dim() => {
                            return Err(Error::DimensionMismatch(format!(
                                "sample {} has feature dim {}, dataset uses {d}",
                                s.id,
                                seq.dim()
                            )))
                        }
                        _ => {}
                    }
                }
                if let Some(short) = used.iter().find(|seq| seq.frames() < crop_len) {
                    return Err(Error::TooFewFrames { needed: crop_len, available: short.frames() });
                }
            }
        }
        let dim = dim.ok_or_else(|| Error::InvalidConfig("empty training set".into()))?;
        let synthetic = (0..samples.len()).filter(|&i| !samples[i].label.is_ugc()).collect();
        let ugc = (0..samples.len()).filter(|&i| samples[i].label.is_ugc()).collect();
        Ok(Self { samples, dim, temporal_transform, synthetic, ugc })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Every sequence a training batch can draw from.
    pub fn training_sequences(&self) -> impl Iterator<Item = &FeatureSequence> {
        let transformed = self.temporal_transform;
        self.samples.iter().flat_map(move |s| {
            [&s.full, &s.half].into_iter().flat_map(move |v| {
                let seqs: Box<dyn Iterator<Item = &FeatureSequence>> =
                    if transformed { Box::new(v.subbands.values()) } else { Box::new(std::iter::once(&v.raw)) };
                seqs
            })
        })
    }

    pub fn samples(&self) -> &[TrainingSample] {
        &self.samples
    }

    pub fn synthetic_indices(&self) -> &[usize] {
        &self.synthetic
    }

    pub fn ugc_indices(&self) -> &[usize] {
        &self.ugc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::MscnEncoder;
    use crate::video::Fps;

    fn video() -> VideoTensor {
        VideoTensor::from_fn(32, 32, 16, Fps::integer(30), |t, y, x, c| {
            (0.5 + 0.3 * ((x as f32 * 0.7 + t as f32 * 0.4).sin() * (y as f32 * 0.3).cos()) + 0.02 * c as f32)
                .clamp(0.0, 1.0)
        })
        .unwrap()
    }

    #[test]
    fn views_and_layout_round_trip() {
        let enc = MscnEncoder::default();
        let s = sample_from_video("a", Label::Ugc(3), &video(), &enc, true).unwrap();
        assert_eq!(s.full.raw.frames(), 16);
        assert_eq!(s.half.raw.frames(), 16);
        assert_eq!(s.full.subbands.len(), 21);
        assert!(s.full.subbands.values().all(|f| f.frames() == 2 && f.dim() == 40));

        let dir = tempfile::tempdir().unwrap();
        let sd = dir.path().join("a");
        save_view(&s.full, Scale::Full, &sd).unwrap();
        save_view(&s.half, Scale::Half, &sd).unwrap();
        let manifest = TrainManifest { samples: vec![ManifestSample { id: "a".into(), label: s.label, feature_dir: "a".into() }] };
        let mp = dir.path().join("train.json");
        manifest.save(&mp).unwrap();
        let loaded = TrainManifest::load(&mp).unwrap().load_samples().unwrap();
        assert_eq!(loaded[0], s);
    }

    #[test]
    fn short_samples_rejected() {
        let enc = MscnEncoder::default();
        let s = sample_from_video("a", Label::Ugc(3), &video(), &enc, true).unwrap();
        assert!(matches!(TrainingSet::new(vec![s.clone()], 3, true), Err(Error::TooFewFrames { needed: 3, available: 2 })));
        assert!(TrainingSet::new(vec![s], 16, false).is_ok());
    }

    #[test]
    fn duplicate_ugc_ids_rejected() {
        let enc = MscnEncoder::default();
        let s = sample_from_video("a", Label::Ugc(3), &video(), &enc, false).unwrap();
        assert!(matches!(TrainingSet::new(vec![s.clone(), s], 4, false), Err(Error::InvalidConfig(_))));
    }
}
