//! Synthetic distortion generation: frame-rate reduction, Lanczos
//! downscaling, compression, and upscaling back to the source resolution,
//! with a resolution-independent class label per output.

mod codec;
mod resample;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{save_bundle, Fps, VideoTensor};

pub use codec::{compress, surrogate_compress, surrogate_step, CompressionBackend, ExternalEncoder};
pub use resample::{axis_taps, lanczos, resample_spatial, Taps, LANCZOS_TAPS};

/// Frame-rate set (fps).
pub const FPS_LEVELS: [u32; 6] = [24, 30, 60, 82, 98, 120];
/// Downscaling factors.
pub const SCALE_LEVELS: [usize; 4] = [1, 2, 4, 8];
/// Constant rate factors; `None` is lossless.
pub const CRF_LEVELS: [Option<u32>; 5] = [None, Some(24), Some(36), Some(48), Some(63)];
pub const NUM_CLASSES: usize = FPS_LEVELS.len() * SCALE_LEVELS.len() * CRF_LEVELS.len();

pub const MIN_WIDTH: usize = 320;
pub const MIN_HEIGHT: usize = 240;

/// A (frame rate, downscale, CRF) triple with its canonical fps-major id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DistortionClass {
    pub fps_index: usize,
    pub scale_index: usize,
    pub crf_index: usize,
}

impl DistortionClass {
    pub fn new(fps_index: usize, scale_index: usize, crf_index: usize) -> Result<Self> {
        if fps_index >= FPS_LEVELS.len() || scale_index >= SCALE_LEVELS.len() || crf_index >= CRF_LEVELS.len() {
            return Err(Error::InvalidConfig(format!(
                "class indices ({fps_index}, {scale_index}, {crf_index}) out of range"
            )));
        }
        Ok(Self { fps_index, scale_index, crf_index })
    }

    pub fn from_id(class_id: usize) -> Result<Self> {
        if class_id >= NUM_CLASSES {
            return Err(Error::InvalidConfig(format!("class id {class_id} out of range")));
        }
        let per_fps = SCALE_LEVELS.len() * CRF_LEVELS.len();
        Self::new(
            class_id / per_fps,
            (class_id % per_fps) / CRF_LEVELS.len(),
            class_id % CRF_LEVELS.len(),
        )
    }

    pub fn class_id(&self) -> usize {
        self.fps_index * SCALE_LEVELS.len() * CRF_LEVELS.len() + self.scale_index * CRF_LEVELS.len() + self.crf_index
    }

    pub fn fps(&self) -> u32 {
        FPS_LEVELS[self.fps_index]
    }

    pub fn scale(&self) -> usize {
        SCALE_LEVELS[self.scale_index]
    }

    pub fn crf(&self) -> Option<u32> {
        CRF_LEVELS[self.crf_index]
    }

    /// Every class in id order.
    pub fn all() -> impl Iterator<Item = Self> {
        (0..NUM_CLASSES).map(|id| Self::from_id(id).expect("id in range"))
    }
}

fn source_rate(fps: Fps) -> Result<u32> {
    fps.as_integer()
        .filter(|f| FPS_LEVELS.contains(f))
        .ok_or_else(|| Error::UnsupportedSourceRate(fps.to_string()))
}

/// Members of the frame-rate set not above the source rate, descending.
pub fn admissible_fps(source_fps: Fps) -> Result<Vec<u32>> {
    let src = source_rate(source_fps)?;
    Ok(FPS_LEVELS.iter().rev().copied().filter(|&f| f <= src).collect())
}

/// Downscale factors that keep the frame at or above 320x240.
pub fn admissible_scales(width: usize, height: usize) -> Result<Vec<usize>> {
    let scales: Vec<usize> = SCALE_LEVELS
        .iter()
        .copied()
        .filter(|&d| width / d >= MIN_WIDTH && height / d >= MIN_HEIGHT)
        .collect();
    if scales.is_empty() {
        return Err(Error::SourceTooSmall { width, height });
    }
    Ok(scales)
}

/// Source frame indices kept when reducing `fps_in` to `fps_out`:
/// `floor(k * fps_in / fps_out)` for `k < floor(T * fps_out / fps_in)`.
pub fn frame_selection(num_frames: usize, fps_in: u32, fps_out: u32) -> Vec<usize> {
    let count = num_frames as u64 * fps_out as u64 / fps_in as u64;
    (0..count).map(|k| (k * fps_in as u64 / fps_out as u64) as usize).collect()
}

/// Lowers the frame rate by dropping frames; frames are never interpolated.
pub fn drop_frames(video: &VideoTensor, target_fps: u32) -> Result<VideoTensor> {
    let src = source_rate(video.fps())?;
    if !FPS_LEVELS.contains(&target_fps) {
        return Err(Error::UnsupportedSourceRate(target_fps.to_string()));
    }
    if target_fps > src {
        return Err(Error::RateIncrease { target: target_fps, source_fps: video.fps().to_string() });
    }
    let indices = frame_selection(video.num_frames(), src, target_fps);
    if indices.is_empty() {
        return Err(Error::TooFewFrames { needed: src.div_ceil(target_fps) as usize, available: video.num_frames() });
    }
    video.select_frames(&indices, Fps::integer(target_fps))
}

/// One distorted output of the generator.
#[derive(Debug, Clone)]
pub struct Variant {
    pub class: DistortionClass,
    pub video: VideoTensor,
}

/// The distortion tuples a source admits, in generation order.
pub fn variant_classes(source: &VideoTensor) -> Result<Vec<DistortionClass>> {
    let fps = admissible_fps(source.fps())?;
    let scales = admissible_scales(source.width(), source.height())?;
    let mut out = Vec::with_capacity(fps.len() * scales.len() * CRF_LEVELS.len());
    for f in &fps {
        let fi = FPS_LEVELS.iter().position(|x| x == f).expect("member");
        for d in &scales {
            let di = SCALE_LEVELS.iter().position(|x| x == d).expect("member");
            for ci in 0..CRF_LEVELS.len() {
                out.push(DistortionClass { fps_index: fi, scale_index: di, crf_index: ci });
            }
        }
    }
    Ok(out)
}

/// Applies one distortion tuple: frame rate, downsample, compress, upsample.
pub fn apply_distortion(source: &VideoTensor, class: DistortionClass, backend: &CompressionBackend) -> Result<VideoTensor> {
    let (w, h) = (source.width(), source.height());
    let reduced = drop_frames(source, class.fps())?;
    let d = class.scale();
    let small = resample_spatial(&reduced, w / d, h / d)?;
    let coded = compress(&small, class.crf_index, backend)?;
    resample_spatial(&coded, w, h)
}

/// Streams every admissible variant of `source` to `sink`.
pub fn generate_variants_with(
    source: &VideoTensor,
    backend: &CompressionBackend,
    mut sink: impl FnMut(Variant) -> Result<()>,
) -> Result<()> {
    let w = source.width();
    let h = source.height();
    let mut by_fps: Option<(u32, VideoTensor)> = None;
    let mut by_scale: Option<((u32, usize), VideoTensor)> = None;
    for class in variant_classes(source)? {
        if by_fps.as_ref().map(|(f, _)| *f) != Some(class.fps()) {
            by_fps = Some((class.fps(), drop_frames(source, class.fps())?));
            by_scale = None;
        }
        let reduced = &by_fps.as_ref().expect("set above").1;
        let key = (class.fps(), class.scale());
        if by_scale.as_ref().map(|(k, _)| *k) != Some(key) {
            by_scale = Some((key, resample_spatial(reduced, w / class.scale(), h / class.scale())?));
        }
        let small = &by_scale.as_ref().expect("set above").1;
        let coded = compress(small, class.crf_index, backend)?;
        sink(Variant { class, video: resample_spatial(&coded, w, h)? })?;
    }
    Ok(())
}

pub fn generate_variants(source: &VideoTensor, backend: &CompressionBackend) -> Result<Vec<Variant>> {
    let mut out = Vec::new();
    generate_variants_with(source, backend, |v| {
        out.push(v);
        Ok(())
    })?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub fps_index: usize,
    pub scale_index: usize,
    pub crf_index: usize,
    pub class_id: usize,
}

impl ManifestEntry {
    pub fn class(&self) -> Result<DistortionClass> {
        let class = DistortionClass::new(self.fps_index, self.scale_index, self.crf_index)?;
        if class.class_id() != self.class_id {
            return Err(Error::InvalidConfig(format!(
                "manifest entry {} has class_id {} but indices encode {}",
                self.path.display(),
                self.class_id,
                class.class_id()
            )));
        }
        Ok(class)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationManifest {
    pub source_id: String,
    pub source_fps: Fps,
    pub source_width: usize,
    pub source_height: usize,
    pub entries: Vec<ManifestEntry>,
}

impl GenerationManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::from_open(e, path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::from_write(e, path))
    }
}

/// Generates every variant of `source` and writes each as a bundle under `out_dir`.
pub fn write_variants(
    source: &VideoTensor,
    source_id: &str,
    backend: &CompressionBackend,
    out_dir: &Path,
) -> Result<GenerationManifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::from_write(e, out_dir))?;
    let mut entries = Vec::new();
    generate_variants_with(source, backend, |v| {
        let path: PathBuf = out_dir.join(format!("{source_id}_c{:03}.cvqv", v.class.class_id()));
        save_bundle(&v.video, &path)?;
        entries.push(ManifestEntry {
            path,
            fps_index: v.class.fps_index,
            scale_index: v.class.scale_index,
            crf_index: v.class.crf_index,
            class_id: v.class.class_id(),
        });
        Ok(())
    })?;
    Ok(GenerationManifest {
        source_id: source_id.to_string(),
        source_fps: source.fps(),
        source_width: source.width(),
        source_height: source.height(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    #[test]
    fn class_ids_cover_range_exactly() {
        let ids: BTreeSet<usize> = DistortionClass::all().map(|c| c.class_id()).collect();
        assert_eq!(ids.len(), 120);
        assert_eq!(ids.iter().copied().collect::<Vec<_>>(), (0..120).collect::<Vec<_>>());
        for c in DistortionClass::all() {
            assert_eq!(DistortionClass::from_id(c.class_id()).unwrap(), c);
        }
    }

    #[test]
    fn fps_admissibility() {
        assert_eq!(admissible_fps(Fps::integer(120)).unwrap(), vec![120, 98, 82, 60, 30, 24]);
        assert_eq!(admissible_fps(Fps::integer(60)).unwrap(), vec![60, 30, 24]);
        assert_eq!(admissible_fps(Fps::integer(24)).unwrap(), vec![24]);
        assert!(matches!(admissible_fps(Fps::integer(25)), Err(Error::UnsupportedSourceRate(_))));
        assert!(matches!(admissible_fps(Fps::new(30000, 1001).unwrap()), Err(Error::UnsupportedSourceRate(_))));
        assert_eq!(admissible_fps(Fps::new(60, 2).unwrap()).unwrap(), vec![30, 24]);
    }

    #[test]
    fn scale_admissibility() {
        assert_eq!(admissible_scales(1920, 1080).unwrap(), vec![1, 2, 4]);
        assert_eq!(admissible_scales(320, 240).unwrap(), vec![1]);
        assert!(matches!(admissible_scales(319, 240), Err(Error::SourceTooSmall { .. })));
    }

    #[test]
    fn scale_admissibility_2160p_by_threshold() {
        // brute force over the threshold rule
        let expected: Vec<usize> = [1usize, 2, 4, 8]
            .into_iter()
            .filter(|d| 3840 / d >= 320 && 2160 / d >= 240)
            .collect();
        assert_eq!(expected, vec![1, 2, 4, 8]);
        assert_eq!(admissible_scales(3840, 2160).unwrap(), expected);
    }

    fn indexed(frames: usize, fps: u32) -> VideoTensor {
        VideoTensor::from_fn(1, 1, frames, Fps::integer(fps), |t, _, _, _| t as f32 / 1000.0).unwrap()
    }

    fn frame_ids(v: &VideoTensor) -> Vec<usize> {
        (0..v.num_frames()).map(|t| (v.at(t, 0, 0, 0) * 1000.0).round() as usize).collect()
    }

    #[test]
    fn drop_120_to_60() {
        let out = drop_frames(&indexed(8, 120), 60).unwrap();
        assert_eq!(frame_ids(&out), vec![0, 2, 4, 6]);
        assert_eq!(out.fps(), Fps::integer(60));
    }

    #[test]
    fn drop_identity() {
        let out = drop_frames(&indexed(8, 120), 120).unwrap();
        assert_eq!(frame_ids(&out), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn drop_120_to_82() {
        let out = drop_frames(&indexed(120, 120), 82).unwrap();
        let mut expected = Vec::new();
        for k in 0..82usize {
            expected.push(k * 120 / 82);
        }
        assert_eq!(out.num_frames(), 82);
        assert_eq!(frame_ids(&out), expected);
    }

    #[test]
    fn drop_rejects_increase() {
        assert!(matches!(drop_frames(&indexed(8, 60), 120), Err(Error::RateIncrease { .. })));
    }

    #[test]
    fn same_class_across_native_resolutions() {
        // 4K source downscaled 2x to 1080p and 1080p source downscaled 2x to 540p
        let fps60 = FPS_LEVELS.iter().position(|&f| f == 60).unwrap();
        let crf48 = CRF_LEVELS.iter().position(|&c| c == Some(48)).unwrap();
        let from_4k = DistortionClass::new(fps60, SCALE_LEVELS.iter().position(|&d| 3840 / d == 1920).unwrap(), crf48).unwrap();
        let from_1080 = DistortionClass::new(fps60, SCALE_LEVELS.iter().position(|&d| 1920 / d == 960).unwrap(), crf48).unwrap();
        assert_eq!(from_4k.class_id(), from_1080.class_id());
    }

    #[test]
    fn variant_counts() {
        let src = |w, h, fps| VideoTensor::filled(w, h, 1, Fps::integer(fps), 0.0).unwrap();
        assert_eq!(variant_classes(&src(1920, 1080, 60)).unwrap().len(), 45);
        assert_eq!(variant_classes(&src(320, 240, 24)).unwrap().len(), 5);
    }

    #[test]
    fn generated_variants_restore_resolution() {
        let src = VideoTensor::from_fn(320, 240, 3, Fps::integer(24), |_, y, x, c| {
            ((x + 2 * y + c) % 7) as f32 / 7.0
        })
        .unwrap();
        let variants = generate_variants(&src, &CompressionBackend::Surrogate).unwrap();
        assert_eq!(variants.len(), 5);
        for v in &variants {
            assert_eq!((v.video.width(), v.video.height(), v.video.num_frames()), (320, 240, 3));
        }
        assert_eq!(variants[0].video, src);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let src = VideoTensor::filled(320, 240, 2, Fps::integer(24), 0.25).unwrap();
        let m = write_variants(&src, "clip", &CompressionBackend::Surrogate, dir.path()).unwrap();
        assert_eq!(m.entries.len(), 5);
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let back = GenerationManifest::load(&path).unwrap();
        assert_eq!(back, m);
        for e in &back.entries {
            assert!(e.path.exists());
            e.class().unwrap();
        }
    }
}
