//! Stream bookkeeping: frame counts, episode labels, contiguous subsets and
//! the resize/center-crop input geometry.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::seed;
use crate::world::floor_count;

pub const DEFAULT_FPS: f64 = 5.0;
pub const EPISODE_LENGTH_S: f64 = 288.0;
pub const RESIZE_MINOR_EDGE: usize = 256;
pub const CROP_SIZE: usize = 224;
/// Total hours of the combined natural-video corpus.
pub const CORPUS_HOURS: f64 = 1301.0;

#[derive(Debug, Error, PartialEq)]
pub enum StreamError {
    #[error("duration must be positive and finite (got {0})")]
    BadDuration(f64),
    #[error("fps must be positive and finite (got {0})")]
    BadFps(f64),
    #[error("episode length must be positive (got {0})")]
    BadEpisodeLength(f64),
    #[error("fraction must lie in (0, 1] (got {0})")]
    BadFraction(f64),
    #[error("subset window [{start}, {end}) s exceeds stream duration {total} s")]
    WindowOutOfRange { start: f64, end: f64, total: f64 },
    #[error("crop {crop} exceeds resized minor edge {minor}")]
    CropTooLarge { crop: usize, minor: usize },
    #[error("frame index {index} out of range for {len} frames")]
    FrameOutOfRange { index: usize, len: usize },
}

/// `floor(duration_hours * 3600 * fps)`.
pub fn frame_count(duration_hours: f64, fps: f64) -> Result<u64, StreamError> {
    if !(duration_hours > 0.0 && duration_hours.is_finite()) {
        return Err(StreamError::BadDuration(duration_hours));
    }
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(StreamError::BadFps(fps));
    }
    Ok(floor_count(duration_hours * 3600.0, fps) as u64)
}

/// Left-closed episode id: `floor(t / episode_length_s)`.
pub fn episode_label(timestamp_s: f64, episode_length_s: f64) -> usize {
    let q = timestamp_s.max(0.0) / episode_length_s;
    // Guard against 287.99999999 style representation error at a boundary.
    (q + q * 1e-12).floor() as usize
}

/// `ceil(total_duration_s / episode_length_s)`.
pub fn num_episodes(total_duration_s: f64, episode_length_s: f64) -> usize {
    let q = total_duration_s / episode_length_s;
    let r = q.round();
    if (q - r).abs() <= 1e-9 * q.max(1.0) {
        (r as usize).max(1)
    } else {
        q.ceil() as usize
    }
}

/// A virtual continuous stream sampled at `fps`, starting at `start_s` of the
/// source timeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamIndex {
    pub total_duration_s: f64,
    pub fps: f64,
    #[serde(default)]
    pub start_s: f64,
}

impl StreamIndex {
    pub fn new(total_duration_s: f64, fps: f64) -> Result<Self, StreamError> {
        Self::with_start(0.0, total_duration_s, fps)
    }

    pub fn with_start(start_s: f64, total_duration_s: f64, fps: f64) -> Result<Self, StreamError> {
        if !(total_duration_s > 0.0 && total_duration_s.is_finite()) {
            return Err(StreamError::BadDuration(total_duration_s));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(StreamError::BadFps(fps));
        }
        Ok(StreamIndex {
            total_duration_s,
            fps,
            start_s: start_s.max(0.0),
        })
    }

    pub fn from_hours(hours: f64, fps: f64) -> Result<Self, StreamError> {
        Self::new(hours * 3600.0, fps)
    }

    pub fn hours(&self) -> f64 {
        self.total_duration_s / 3600.0
    }

    pub fn frame_count(&self) -> usize {
        floor_count(self.total_duration_s, self.fps)
    }

    /// Offset of frame `k` from the start of this stream.
    pub fn relative_timestamp(&self, k: usize) -> f64 {
        k as f64 / self.fps
    }

    /// Source-timeline timestamp of frame `k`.
    pub fn timestamp(&self, k: usize) -> f64 {
        self.start_s + self.relative_timestamp(k)
    }
}

/// Frame → episode mapping for one stream; labels start at 0 for the first frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLabeling {
    pub episode_length_s: f64,
    pub num_episodes: usize,
    pub index: StreamIndex,
}

impl EpisodeLabeling {
    pub fn new(index: &StreamIndex, episode_length_s: f64) -> Result<Self, StreamError> {
        if !(episode_length_s > 0.0 && episode_length_s.is_finite()) {
            return Err(StreamError::BadEpisodeLength(episode_length_s));
        }
        Ok(EpisodeLabeling {
            episode_length_s,
            num_episodes: num_episodes(index.total_duration_s, episode_length_s),
            index: *index,
        })
    }

    pub fn label(&self, frame: usize) -> Result<usize, StreamError> {
        let idx = &self.index;
        let len = idx.frame_count();
        if frame >= len {
            return Err(StreamError::FrameOutOfRange { index: frame, len });
        }
        let e = episode_label(idx.relative_timestamp(frame), self.episode_length_s);
        Ok(e.min(self.num_episodes - 1))
    }

    /// Frames carrying each episode label.
    pub fn frames_per_episode(&self) -> Vec<usize> {
        let idx = &self.index;
        let mut counts = vec![0usize; self.num_episodes];
        // Episode e covers frames [ceil(e*L*fps), ceil((e+1)*L*fps)).
        let first_frame = |e: usize| -> usize {
            let x = e as f64 * self.episode_length_s * idx.fps;
            let r = x.round();
            if (x - r).abs() <= 1e-9 * x.max(1.0) {
                r as usize
            } else {
                x.ceil() as usize
            }
        };
        let total = idx.frame_count();
        for (e, c) in counts.iter_mut().enumerate() {
            let lo = first_frame(e).min(total);
            let hi = if e + 1 == self.num_episodes {
                total
            } else {
                first_frame(e + 1).min(total)
            };
            *c = hi - lo;
        }
        counts
    }
}

/// Temporally contiguous block covering `fraction` of a stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub fraction: f64,
    pub start_offset_s: f64,
}

impl SubsetSpec {
    pub fn new(fraction: f64, start_offset_s: f64) -> Self {
        SubsetSpec {
            fraction,
            start_offset_s,
        }
    }

    pub fn validate(&self, index: &StreamIndex) -> Result<(), StreamError> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(StreamError::BadFraction(self.fraction));
        }
        let end = self.start_offset_s + self.fraction * index.total_duration_s;
        let tol = 1e-9 * index.total_duration_s.max(1.0);
        if self.start_offset_s < 0.0 || end > index.total_duration_s + tol {
            return Err(StreamError::WindowOutOfRange {
                start: self.start_offset_s,
                end,
                total: index.total_duration_s,
            });
        }
        Ok(())
    }

    /// Offset drawn uniformly from the valid range, keyed by `(seed, repeat)`.
    pub fn random(
        index: &StreamIndex,
        fraction: f64,
        seed: u64,
        repeat: u64,
    ) -> Result<Self, StreamError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(StreamError::BadFraction(fraction));
        }
        let slack = (1.0 - fraction) * index.total_duration_s;
        let offset = if slack > 0.0 {
            seed::rng(&[seed, seed::tag("subset"), repeat, fraction.to_bits()])
                .random_range(0.0..slack)
        } else {
            0.0
        };
        Ok(SubsetSpec::new(fraction, offset))
    }
}

/// Restricts `index` to the block described by `spec`; episode labels over the
/// result start again from 0.
pub fn contiguous_subset(
    index: &StreamIndex,
    spec: &SubsetSpec,
) -> Result<StreamIndex, StreamError> {
    spec.validate(index)?;
    let duration =
        (spec.fraction * index.total_duration_s).min(index.total_duration_s - spec.start_offset_s);
    StreamIndex::with_start(index.start_s + spec.start_offset_s, duration, index.fps)
}

/// The single subset equivalent to applying `outer` and then `inner`
/// (`inner.fraction` is relative to the outer block).
pub fn compose_subsets(outer: &SubsetSpec, inner: &SubsetSpec) -> SubsetSpec {
    SubsetSpec {
        fraction: outer.fraction * inner.fraction,
        start_offset_s: outer.start_offset_s + inner.start_offset_s,
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Dimensions after scaling the minor edge to `minor`, rounding half-up.
pub fn resized_dims(height: usize, width: usize, minor: usize) -> (usize, usize) {
    if height <= width {
        (
            minor,
            round_half_up(width as f64 * minor as f64 / height as f64).max(1),
        )
    } else {
        (
            round_half_up(height as f64 * minor as f64 / width as f64).max(1),
            minor,
        )
    }
}

/// Bilinear resize so the minor edge is `resize_minor_edge`, then a central
/// `crop`×`crop` window.
pub fn resize_center_crop(
    frame: &Image,
    resize_minor_edge: usize,
    crop: usize,
) -> Result<Image, StreamError> {
    if crop > resize_minor_edge || crop == 0 {
        return Err(StreamError::CropTooLarge {
            crop,
            minor: resize_minor_edge,
        });
    }
    let (h, w) = resized_dims(frame.height(), frame.width(), resize_minor_edge);
    let resized = if (h, w) == (frame.height(), frame.width()) {
        frame.clone()
    } else {
        frame.resize(h, w)
    };
    let top = (h - crop) / 2;
    let left = (w - crop) / 2;
    let mut out = resized.crop(top, left, crop, crop);
    out.clamp01();
    Ok(out)
}
