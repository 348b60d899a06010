//! Directory-level operations shared by the command line and the tests:
//! degrade a corpus, load training pairs, train a stage, restore a corpus.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::degradation::{apply_degradation, make_recipe, DegradationRecipe, DegradeConfig};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::media::{self, Frame, ImageSample, VideoClip};
use crate::models::{Checkpoint, VsrModels};
use crate::restorer::RestorerPipeline;
use crate::trainer::{pretrain_vae, ImagePairs, LogRecord, TrainState, Trainer, VideoPairs};

pub const RECIPES_FILE: &str = "recipes.json";

/// Seed for one named item, independent of corpus order.
pub fn item_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Degrades every clip under `input` into a same-named clip under `output`
/// and records each drawn recipe in `output/recipes.json`.
pub fn degrade_dir(input: &Path, output: &Path, cfg: &DegradeConfig, seed: u64, force: bool) -> Result<BTreeMap<String, DegradationRecipe>> {
    cfg.validate()?;
    let dirs = media::list_clip_dirs(input)?;
    if dirs.is_empty() {
        return Err(Error::Data(format!("no clips under {}", input.display())));
    }
    let recipes_path = output.join(RECIPES_FILE);
    if recipes_path.exists() && !force {
        return Err(Error::Exists(recipes_path));
    }
    let mut recipes = BTreeMap::new();
    for dir in &dirs {
        let name = dir_name(dir);
        let clip = media::read_clip(dir)?;
        let recipe = make_recipe(cfg, item_seed(seed, &name))?;
        let lr = apply_degradation(&clip, &recipe)?;
        media::write_clip(&lr, &output.join(&name), force)?;
        recipes.insert(name, recipe);
    }
    std::fs::write(&recipes_path, serde_json::to_string_pretty(&recipes)? + "\n").map_err(|e| Error::io(&recipes_path, e))?;
    Ok(recipes)
}

/// Clips under `hr` paired with same-named clips under `lr`.
pub fn load_video_pairs(hr: &Path, lr: &Path) -> Result<VideoPairs> {
    let mut pairs = VideoPairs::default();
    for dir in media::list_clip_dirs(hr)? {
        let name = dir_name(&dir);
        let lr_dir = lr.join(&name);
        if !media::is_clip_dir(&lr_dir) {
            return Err(Error::Data(format!("no LR clip `{name}` under {}", lr.display())));
        }
        pairs.hr.push(media::read_clip(&dir)?);
        pairs.lr.push(media::read_clip(&lr_dir)?);
    }
    if pairs.hr.is_empty() {
        return Err(Error::Data(format!("no clips under {}", hr.display())));
    }
    Ok(pairs)
}

/// Every frame of every paired clip becomes one image pair.
pub fn load_image_pairs(hr: &Path, lr: &Path) -> Result<ImagePairs> {
    let videos = load_video_pairs(hr, lr)?;
    Ok(images_from_videos(&videos))
}

pub fn images_from_videos(videos: &VideoPairs) -> ImagePairs {
    let mut out = ImagePairs::default();
    for (l, h) in videos.lr.iter().zip(&videos.hr) {
        out.lr.extend(l.frames().iter().cloned().map(ImageSample));
        out.hr.extend(h.frames().iter().cloned().map(ImageSample));
    }
    out
}

/// Training inputs for either stage; the image stream is only used in stage 2.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub videos: VideoPairs,
    pub images: ImagePairs,
}

impl TrainData {
    pub fn hr_frames(&self) -> Vec<Frame> {
        let mut frames: Vec<Frame> = self.videos.hr.iter().flat_map(|c| c.frames().iter().cloned()).collect();
        frames.extend(self.images.hr.iter().map(|i| i.frame().clone()));
        frames
    }
}

/// Fresh models with the VAE already frozen (no pretraining).
pub fn fresh_pipeline(cfg: &RunConfig) -> Result<RestorerPipeline> {
    let mut models = VsrModels::new(cfg.model.clone(), DType::F32, &Device::Cpu, cfg.seed)?;
    models.vae.freeze();
    pipeline(models, cfg)
}

fn pipeline(models: VsrModels, cfg: &RunConfig) -> Result<RestorerPipeline> {
    Ok(RestorerPipeline::new(models, &cfg.diffusion, cfg.io.scale)?.with_chunk_frames(cfg.io.chunk_frames))
}

/// Models rebuilt from a checkpoint's own model config, VAE frozen.
pub fn pipeline_from_checkpoint(ck: &Checkpoint, cfg: &RunConfig) -> Result<RestorerPipeline> {
    let mut models = VsrModels::new(ck.model_config.clone(), DType::F32, &Device::Cpu, ck.seed)?;
    ck.apply_to(&models)?;
    models.vae.freeze();
    pipeline(models, cfg)
}

/// Runs one training stage and returns the final checkpoint.
///
/// Stage 1 without `resume` starts from fresh models and pretrains the VAE
/// on the HR frames first. Stage 2 needs a checkpoint; from a stage-1
/// checkpoint the optimizer restarts, from a stage-2 one it continues.
pub fn run_training(
    cfg: &RunConfig,
    data: &TrainData,
    resume: Option<&Checkpoint>,
    vae_log: &mut dyn FnMut(usize, f64),
    log: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let stage = cfg.train.stage;
    let (pipe, mut state) = match resume {
        None if stage == 2 => {
            return Err(Error::Argument("stage 2 starts from a stage-1 checkpoint (pass --resume)".into()));
        }
        None => {
            let models = VsrModels::new(cfg.model.clone(), DType::F32, &Device::Cpu, cfg.seed)?;
            if cfg.train.vae_iters > 0 {
                let losses = pretrain_vae(&models.vae, &data.hr_frames(), &cfg.train, cfg.seed)?;
                for (i, l) in losses.into_iter().enumerate() {
                    vae_log(i, l);
                }
            }
            let mut models = models;
            models.vae.freeze();
            (pipeline(models, cfg)?, TrainState::new(cfg.seed, stage))
        }
        Some(ck) => {
            ck.check_compatible(&cfg.model)?;
            if ck.stage > stage {
                return Err(Error::Incompatible(format!(
                    "checkpoint is from stage {}, cannot resume stage {stage}",
                    ck.stage
                )));
            }
            let pipe = pipeline_from_checkpoint(ck, cfg)?;
            let state = if ck.stage == stage {
                TrainState::from_checkpoint(ck, pipe.models.denoiser.params())?
            } else {
                TrainState::new(cfg.seed, stage)
            };
            (pipe, state)
        }
    };
    let loss: &LossConfig = &cfg.loss;
    let trainer = Trainer::new(&pipe, cfg.train.clone(), loss.weights(), loss.extractor())?;
    match stage {
        1 => trainer.train_stage1(&data.videos, &mut state, log)?,
        _ => trainer.train_stage2(&data.videos, &data.images, &mut state, log)?,
    }
    state.to_checkpoint(&pipe, &cfg.fingerprint())
}

/// Restores every clip under `input` into a same-named clip under `output`.
pub fn restore_dir(pipe: &RestorerPipeline, input: &Path, output: &Path, force: bool) -> Result<Vec<String>> {
    let dirs = media::list_clip_dirs(input)?;
    if dirs.is_empty() {
        return Err(Error::Data(format!("no clips under {}", input.display())));
    }
    let mut names = Vec::new();
    for dir in &dirs {
        let name = dir_name(dir);
        let out = pipe.restore(&media::read_clip(dir)?)?;
        media::write_clip(&out, &output.join(&name), force)?;
        names.push(name);
    }
    Ok(names)
}

/// Bilinear upscaling of every clip, the restoration baseline.
pub fn upscale_baseline(clips: &[VideoClip], scale: usize) -> Result<Vec<VideoClip>> {
    clips.iter().map(|c| media::upscale_clip_bilinear(c, scale)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::moving_clip;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.vae.hidden = 8;
        cfg.model.vae.blocks = 1;
        cfg.model.denoiser.width = 16;
        cfg.model.denoiser.heads = 2;
        cfg.model.denoiser.depth = 1;
        cfg.train.iters = Some(2);
        cfg.train.vae_iters = 2;
        cfg.train.vae_batch = 2;
        cfg.train.vae_crop = 16;
        cfg.train.clip_frames = 2;
        cfg.train.batch_size = 1;
        cfg
    }

    #[test]
    fn item_seed_depends_on_name() {
        assert_eq!(item_seed(1, "a"), item_seed(1, "a"));
        assert_ne!(item_seed(1, "a"), item_seed(1, "b"));
        assert_ne!(item_seed(1, "a"), item_seed(2, "a"));
    }

    #[test]
    fn degrade_then_train_both_stages() {
        let tmp = tempfile::tempdir().unwrap();
        let (hr, lr) = (tmp.path().join("hr"), tmp.path().join("lr"));
        for k in 0..2 {
            media::write_clip(&moving_clip(k, 3, 32, 32), &hr.join(format!("c{k}")), false).unwrap();
        }
        let cfg = tiny_config();
        let recipes = degrade_dir(&hr, &lr, &cfg.degrade, 7, false).unwrap();
        assert_eq!(recipes.len(), 2);
        assert!(matches!(degrade_dir(&hr, &lr, &cfg.degrade, 7, false), Err(Error::Exists(_))));
        let again = degrade_dir(&hr, &lr, &cfg.degrade, 7, true).unwrap();
        assert_eq!(recipes, again);

        let videos = load_video_pairs(&hr, &lr).unwrap();
        assert_eq!(videos.lr[0].height(), 8);
        let data = TrainData {
            images: images_from_videos(&videos),
            videos,
        };
        let mut vae_steps = 0;
        let mut records = Vec::new();
        let ck1 = run_training(&cfg, &data, None, &mut |_, _| vae_steps += 1, &mut |r| {
            records.push(r.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!((vae_steps, records.len(), ck1.step, ck1.stage), (2, 2, 2, 1));

        let mut cfg2 = cfg.clone();
        cfg2.train.stage = 2;
        assert!(run_training(&cfg2, &data, None, &mut |_, _| {}, &mut |_| Ok(())).is_err());
        let ck2 = run_training(&cfg2, &data, Some(&ck1), &mut |_, _| {}, &mut |_| Ok(())).unwrap();
        assert_eq!((ck2.stage, ck2.step), (2, 2));
        // The VAE is frozen after stage 1 and untouched by stage 2.
        for name in ck1.param_names().iter().filter(|n| n.starts_with("vae.")) {
            assert_eq!(ck1.params[name], ck2.params[name]);
        }

        let pipe = pipeline_from_checkpoint(&ck2, &cfg2).unwrap();
        let names = restore_dir(&pipe, &lr, &tmp.path().join("sr"), false).unwrap();
        assert_eq!(names, vec!["c0", "c1"]);
        let sr = media::read_clip(&tmp.path().join("sr/c0")).unwrap();
        assert_eq!((sr.len(), sr.height(), sr.width()), (3, 32, 32));
    }
}
