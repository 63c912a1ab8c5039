//! Compression backends.
//!
//! The external backend shells out to a user-supplied encoder command. The
//! command template may use `{input}`, `{output}`, `{crf}` and `{lossless}`;
//! it receives a `CVQV` bundle at `{input}` and must leave a bundle of the
//! same geometry at `{output}`. A wrapper that pipes raw RGB through ffmpeg
//! strips the 29-byte header (`tail -c +30`), feeds `-f rawvideo -pix_fmt
//! rgb24 -s WxH`, and prepends the same header to the decoded rawvideo.

use std::f64::consts::PI;
use std::path::PathBuf;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{load_bundle, save_bundle, VideoTensor, CHANNELS};

use super::CRF_LEVELS;

const BLOCK: usize = 8;

/// How a downscaled clip is compressed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompressionBackend {
    /// Hermetic block-DCT quantizer; distortion grows monotonically with CRF.
    #[default]
    Surrogate,
    External(ExternalEncoder),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalEncoder {
    pub command_template: String,
    /// Scratch directory for intermediate bundles; a fresh temp dir when unset.
    #[serde(default)]
    pub work_dir: Option<PathBuf>,
}

impl ExternalEncoder {
    pub fn render(&self, input: &str, output: &str, crf: Option<u32>) -> String {
        self.command_template
            .replace("{input}", input)
            .replace("{output}", output)
            .replace("{crf}", &crf.unwrap_or(0).to_string())
            .replace("{lossless}", if crf.is_none() { "1" } else { "0" })
    }

    fn run(&self, video: &VideoTensor, crf: Option<u32>) -> Result<VideoTensor> {
        let scratch = match &self.work_dir {
            Some(dir) => tempfile::Builder::new().prefix("cvq-enc").tempdir_in(dir)?,
            None => tempfile::Builder::new().prefix("cvq-enc").tempdir()?,
        };
        let input = scratch.path().join("input.cvqv");
        let output = scratch.path().join("output.cvqv");
        save_bundle(video, &input)?;
        let cmd = self.render(&input.to_string_lossy(), &output.to_string_lossy(), crf);
        let status = Command::new("sh")
            .arg("-c")
            .arg(&cmd)
            .output()
            .map_err(|e| Error::BackendUnavailable(format!("cannot spawn sh: {e}")))?;
        if !status.status.success() {
            return Err(Error::EncoderFailure(format!(
                "`{cmd}` exited with {}: {}",
                status.status,
                String::from_utf8_lossy(&status.stderr).trim()
            )));
        }
        let decoded = load_bundle(&output).map_err(|e| Error::EncoderFailure(format!("decoded output: {e}")))?;
        if (decoded.width(), decoded.height(), decoded.num_frames())
            != (video.width(), video.height(), video.num_frames())
        {
            return Err(Error::EncoderFailure("decoded geometry differs from input".into()));
        }
        Ok(decoded.with_fps(video.fps()))
    }
}

/// Quantization step of the surrogate codec for a CRF value; `None` is lossless.
pub fn surrogate_step(crf: Option<u32>) -> f64 {
    match crf {
        None => 0.0,
        Some(c) => 0.02 * (c as f64 / 63.0).powi(2),
    }
}

pub fn compress(video: &VideoTensor, crf_index: usize, backend: &CompressionBackend) -> Result<VideoTensor> {
    let crf = *CRF_LEVELS
        .get(crf_index)
        .ok_or_else(|| Error::InvalidConfig(format!("crf index {crf_index} out of range")))?;
    match backend {
        CompressionBackend::Surrogate => surrogate_compress(video, surrogate_step(crf)),
        CompressionBackend::External(enc) => enc.run(video, crf),
    }
}

fn dct_basis() -> [[f64; BLOCK]; BLOCK] {
    let mut m = [[0.0; BLOCK]; BLOCK];
    for (k, row) in m.iter_mut().enumerate() {
        let scale = if k == 0 { (1.0 / BLOCK as f64).sqrt() } else { (2.0 / BLOCK as f64).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = scale * (PI * (2 * n + 1) as f64 * k as f64 / (2 * BLOCK) as f64).cos();
        }
    }
    m
}

/// Per-frame, per-channel 8x8 orthonormal DCT with uniform quantization.
/// Partial border blocks are padded by edge replication.
pub fn surrogate_compress(video: &VideoTensor, step: f64) -> Result<VideoTensor> {
    if step == 0.0 {
        return Ok(video.clone());
    }
    let basis = dct_basis();
    let (w, h) = (video.width(), video.height());
    let mut out = video.samples().to_vec();
    let mut block = [[0.0f64; BLOCK]; BLOCK];
    let mut tmp = [[0.0f64; BLOCK]; BLOCK];
    for t in 0..video.num_frames() {
        for c in 0..CHANNELS {
            for by in (0..h).step_by(BLOCK) {
                for bx in (0..w).step_by(BLOCK) {
                    for (i, row) in block.iter_mut().enumerate() {
                        for (j, v) in row.iter_mut().enumerate() {
                            *v = video.at(t, (by + i).min(h - 1), (bx + j).min(w - 1), c) as f64;
                        }
                    }
                    // forward: C = B X B^T
                    mat_mul(&basis, &block, &mut tmp, false);
                    mat_mul_transposed_right(&tmp, &basis, &mut block);
                    for v in block.iter_mut().flatten() {
                        *v = (*v / step).round() * step;
                    }
                    // inverse: X = B^T C B
                    mat_mul(&basis, &block, &mut tmp, true);
                    mat_mul(&tmp, &basis, &mut block, false);
                    for (i, row) in block.iter().enumerate() {
                        for (j, &v) in row.iter().enumerate() {
                            let (y, x) = (by + i, bx + j);
                            if y < h && x < w {
                                out[video.index(t, y, x, c)] = v.clamp(0.0, 1.0) as f32;
                            }
                        }
                    }
                }
            }
        }
    }
    VideoTensor::new(w, h, video.num_frames(), video.fps(), out)
}

type Block = [[f64; BLOCK]; BLOCK];

// out = a * b, or a^T * b when `transpose_a`
fn mat_mul(a: &Block, b: &Block, out: &mut Block, transpose_a: bool) {
    for i in 0..BLOCK {
        for j in 0..BLOCK {
            let mut s = 0.0;
            for k in 0..BLOCK {
                let av = if transpose_a { a[k][i] } else { a[i][k] };
                s += av * b[k][j];
            }
            out[i][j] = s;
        }
    }
}

fn mat_mul_transposed_right(a: &Block, b: &Block, out: &mut Block) {
    for i in 0..BLOCK {
        for j in 0..BLOCK {
            out[i][j] = (0..BLOCK).map(|k| a[i][k] * b[j][k]).sum();
        }
    }
}
