//! Shared inputs for the benchmarks.

use vsr_core::config::RunConfig;
use vsr_core::media::{Frame, VideoClip};
use vsr_core::restorer::RestorerPipeline;
use vsr_core::synth::moving_clip;
use vsr_core::workflow::fresh_pipeline;

pub fn clip(frames: usize, h: usize, w: usize) -> VideoClip {
    moving_clip(17, frames, h, w)
}

/// Two consecutive frames of a panning scene.
pub fn frame_pair(h: usize, w: usize) -> (Frame, Frame) {
    let c = clip(2, h, w);
    (c.frames()[0].clone(), c.frames()[1].clone())
}

/// Untrained pipeline with the desk-scale denoiser.
pub fn desk_pipeline() -> RestorerPipeline {
    let mut cfg = RunConfig::default();
    cfg.model.denoiser.width = 64;
    fresh_pipeline(&cfg).expect("default config is valid")
}
