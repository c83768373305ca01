//! The full pipeline: tiles → per-branch encoders → projectors → fusion →
//! spliced sequence → language model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembler::{answer_ids, prompt_ids, splice, Tokenizer, EOS};
use crate::encoder::{EncoderConfig, VisionEncoder};
use crate::error::{Error, Result};
use crate::fusion::{
    channel_down_map, fuse_post_channel, fuse_post_interleave, fuse_pre, Branch, FusionStrategy,
    Projector, VisualSequence,
};
use crate::lm::{LmConfig, ToyLm};
use crate::tensor::{ParamId, ParamStore, Session, Tensor, Var};
use crate::tiler::{segment, ImageBuffer, TileSet};

pub const ENCODER_A: &str = "encoder_a";
pub const ENCODER_B: &str = "encoder_b";
pub const PROJECTOR_A: &str = "projector_a";
pub const PROJECTOR_B: &str = "projector_b";
pub const PROJECTOR_SHARED: &str = "projector_shared";
pub const FUSION_DOWN: &str = "fusion.down";
pub const LM: &str = "lm";

fn default_max_tiles() -> usize {
    6
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TilingConfig {
    pub enabled: bool,
    #[serde(default = "default_max_tiles")]
    pub max_tiles: usize,
    #[serde(default = "default_true")]
    pub thumbnail: bool,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            max_tiles: 6,
            thumbnail: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub encoder_a: Option<EncoderConfig>,
    #[serde(default)]
    pub encoder_b: Option<EncoderConfig>,
    pub projector_hidden: usize,
    pub fusion: FusionStrategy,
    pub lm: LmConfig,
    #[serde(default)]
    pub tiling: TilingConfig,
}

impl ModelConfig {
    pub fn tile_size(&self) -> usize {
        self.encoder_a
            .as_ref()
            .or(self.encoder_b.as_ref())
            .map_or(0, EncoderConfig::tile_size)
    }

    /// `"A"`, `"B"` or `"A+B"`.
    pub fn encoders_label(&self) -> &'static str {
        match (self.encoder_a.is_some(), self.encoder_b.is_some()) {
            (true, true) => "A+B",
            (true, false) => "A",
            (false, true) => "B",
            (false, false) => "none",
        }
    }

    /// Post-unshuffle tokens per tile of each present branch.
    pub fn branch_tokens(&self) -> (usize, usize) {
        (
            self.encoder_a.as_ref().map_or(0, EncoderConfig::tokens_per_tile),
            self.encoder_b.as_ref().map_or(0, EncoderConfig::tokens_per_tile),
        )
    }

    /// Visual tokens per tile entering the language model.
    pub fn fused_tokens_per_tile(&self) -> usize {
        match self.branch_tokens() {
            (a, 0) => a,
            (0, b) => b,
            (a, b) => self.fusion.fused_tokens(a, b),
        }
    }

    pub fn max_tiles(&self) -> usize {
        if self.tiling.enabled {
            self.tiling.max_tiles
        } else {
            1
        }
    }

    /// Cuts an image according to the tiling settings; tiling off means one
    /// stretched tile and no thumbnail.
    pub fn tile(&self, img: &ImageBuffer) -> Result<TileSet> {
        if self.tiling.enabled {
            segment(img, self.tile_size(), self.tiling.max_tiles, self.tiling.thumbnail)
        } else {
            segment(img, self.tile_size(), 1, false)
        }
    }

    pub fn problems(&self, path: &str) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(a) = &self.encoder_a {
            out.extend(a.problems(&format!("{path}.encoder_a")));
        }
        if let Some(b) = &self.encoder_b {
            out.extend(b.problems(&format!("{path}.encoder_b")));
        }
        out.extend(self.lm.problems(&format!("{path}.lm")));
        if self.projector_hidden == 0 {
            out.push(format!("{path}.projector_hidden: must be positive"));
        }
        if self.tiling.max_tiles == 0 {
            out.push(format!("{path}.tiling.max_tiles: must be at least 1"));
        }
        match (&self.encoder_a, &self.encoder_b) {
            (None, None) => out.push(format!("{path}: at least one encoder is required")),
            (Some(a), Some(b)) => {
                if a.tile_size() != b.tile_size() {
                    out.push(format!(
                        "{path}.encoder_b: tile size {} differs from encoder_a's {}",
                        b.tile_size(),
                        a.tile_size()
                    ));
                }
                if a.norm_mean.len() != b.norm_mean.len() {
                    out.push(format!("{path}.encoder_b.norm_mean: channel count differs"));
                }
                let fusion = self.fusion;
                match fusion {
                    FusionStrategy::PostChannel | FusionStrategy::PreChannel
                        if a.tokens_per_tile() != b.tokens_per_tile() =>
                    {
                        out.push(format!(
                            "{path}.fusion: {fusion} needs equal tokens per tile, got {} and {}",
                            a.tokens_per_tile(),
                            b.tokens_per_tile()
                        ))
                    }
                    FusionStrategy::PreSequence if a.out_channels() != b.out_channels() => {
                        out.push(format!(
                            "{path}.fusion: pre-sequence needs equal feature widths, got {} and {}",
                            a.out_channels(),
                            b.out_channels()
                        ))
                    }
                    _ => {}
                }
            }
            _ => {
                if self.fusion != FusionStrategy::PostInterleave {
                    out.push(format!(
                        "{path}.fusion: {} needs both encoders",
                        self.fusion
                    ));
                }
            }
        }
        out
    }
}

/// Post-unshuffle features of one image, computed once for a frozen branch.
#[derive(Clone, Debug, Default)]
pub struct CachedFeatures {
    pub a: Option<Tensor>,
    pub b: Option<Tensor>,
}

/// A question/answer example with its images already tiled.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub images: Vec<TileSet>,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
    pub answer_text: String,
}

impl PreparedSample {
    pub fn new(cfg: &ModelConfig, images: &[ImageBuffer], question: &str, answer: &str) -> Result<Self> {
        let tok = Tokenizer;
        Ok(Self {
            images: images.iter().map(|i| cfg.tile(i)).collect::<Result<_>>()?,
            prompt: prompt_ids(&tok, images.len(), question),
            answer: answer_ids(&tok, answer),
            answer_text: answer.to_string(),
        })
    }

    pub fn visual_tokens(&self, cfg: &ModelConfig) -> usize {
        self.images
            .iter()
            .map(|ts| ts.patch_count() * cfg.fused_tokens_per_tile())
            .sum()
    }
}

#[derive(Clone, Debug)]
pub struct HybridModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder_a: Option<VisionEncoder>,
    pub encoder_b: Option<VisionEncoder>,
    pub projector_a: Option<Projector>,
    pub projector_b: Option<Projector>,
    pub projector_shared: Option<Projector>,
    pub down: Option<ParamId>,
    pub lm: ToyLm,
}

impl HybridModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let problems = cfg.problems("model");
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.lm.d_lm;
        let h = cfg.projector_hidden;
        let encoder_a = cfg
            .encoder_a
            .clone()
            .map(|c| VisionEncoder::new(&mut store, ENCODER_A, c, &mut rng))
            .transpose()?;
        let encoder_b = cfg
            .encoder_b
            .clone()
            .map(|c| VisionEncoder::new(&mut store, ENCODER_B, c, &mut rng))
            .transpose()?;
        let (mut projector_a, mut projector_b, mut projector_shared, mut down) = (None, None, None, None);
        if cfg.fusion.is_pre() && encoder_a.is_some() && encoder_b.is_some() {
            let (a, b) = (cfg.encoder_a.as_ref().unwrap(), cfg.encoder_b.as_ref().unwrap());
            let width = match cfg.fusion {
                FusionStrategy::PreChannel => a.out_channels() + b.out_channels(),
                _ => a.out_channels(),
            };
            projector_shared = Some(Projector::new(&mut store, PROJECTOR_SHARED, width, h, d, &mut rng)?);
        } else {
            if let Some(a) = &cfg.encoder_a {
                projector_a = Some(Projector::new(&mut store, PROJECTOR_A, a.out_channels(), h, d, &mut rng)?);
            }
            if let Some(b) = &cfg.encoder_b {
                projector_b = Some(Projector::new(&mut store, PROJECTOR_B, b.out_channels(), h, d, &mut rng)?);
            }
            if cfg.fusion == FusionStrategy::PostChannel && encoder_a.is_some() && encoder_b.is_some() {
                down = Some(channel_down_map(&mut store, FUSION_DOWN, d, &mut rng)?);
            }
        }
        let lm = ToyLm::new(&mut store, LM, cfg.lm.clone(), &mut rng)?;
        Ok(Self {
            cfg,
            store,
            encoder_a,
            encoder_b,
            projector_a,
            projector_b,
            projector_shared,
            down,
            lm,
        })
    }

    /// Both branches' post-unshuffle features for one image, outside any
    /// training graph.
    pub fn encode_image(&self, image: &TileSet) -> Result<CachedFeatures> {
        let run = |enc: &Option<VisionEncoder>| -> Result<Option<Tensor>> {
            enc.as_ref()
                .map(|e| {
                    let mut s = Session::new(&self.store);
                    let v = e.forward(&mut s, image)?;
                    Ok(s.graph.tensor(v).with_requires_grad(false))
                })
                .transpose()
        };
        Ok(CachedFeatures {
            a: run(&self.encoder_a)?,
            b: run(&self.encoder_b)?,
        })
    }

    fn branch_grid(
        &self,
        s: &mut Session,
        enc: &VisionEncoder,
        image: &TileSet,
        cached: Option<&Tensor>,
    ) -> Result<Var> {
        match cached {
            Some(t) => Ok(s.graph.leaf(t.clone())),
            None => enc.forward(s, image),
        }
    }

    /// Fused visual tokens of one image.
    pub fn visual(
        &self,
        s: &mut Session,
        image: &TileSet,
        cache: Option<&CachedFeatures>,
    ) -> Result<VisualSequence> {
        let ga = match &self.encoder_a {
            Some(e) => Some(self.branch_grid(s, e, image, cache.and_then(|c| c.a.as_ref()))?),
            None => None,
        };
        let gb = match &self.encoder_b {
            Some(e) => Some(self.branch_grid(s, e, image, cache.and_then(|c| c.b.as_ref()))?),
            None => None,
        };
        if let (Some(shared), Some(a), Some(b)) = (&self.projector_shared, ga, gb) {
            return fuse_pre(s, a, b, self.cfg.fusion, shared);
        }
        let pa = match (&self.projector_a, ga) {
            (Some(p), Some(g)) => Some(p.project(s, g, Branch::A)?),
            _ => None,
        };
        let pb = match (&self.projector_b, gb) {
            (Some(p), Some(g)) => Some(p.project(s, g, Branch::B)?),
            _ => None,
        };
        match (pa, pb) {
            (Some(a), Some(b)) => match self.cfg.fusion {
                FusionStrategy::PostChannel => {
                    let down = s.param(self.down.expect("post-channel model has a down map"));
                    fuse_post_channel(&mut s.graph, &a, &b, down)
                }
                _ => fuse_post_interleave(&mut s.graph, &a, &b),
            },
            (Some(x), None) | (None, Some(x)) => Ok(x),
            (None, None) => unreachable!("config validation requires an encoder"),
        }
    }

    fn visuals(
        &self,
        s: &mut Session,
        sample: &PreparedSample,
        cache: Option<&[CachedFeatures]>,
    ) -> Result<Vec<VisualSequence>> {
        sample
            .images
            .iter()
            .enumerate()
            .map(|(i, ts)| self.visual(s, ts, cache.map(|c| &c[i])))
            .collect()
    }

    /// Mean answer cross-entropy of one sample, or `None` if nothing is
    /// supervised.
    pub fn sample_loss(
        &self,
        s: &mut Session,
        sample: &PreparedSample,
        cache: Option<&[CachedFeatures]>,
    ) -> Result<Option<Var>> {
        let visual = self.visuals(s, sample, cache)?;
        let table = s.param(self.lm.tok_embed);
        let seq = splice(
            &mut s.graph,
            &sample.prompt,
            &sample.answer,
            &visual,
            table,
            self.cfg.lm.context_limit,
        )?;
        self.lm.loss(s, &seq)
    }

    /// Greedy answer text (bytes before EOS).
    pub fn predict(
        &self,
        sample: &PreparedSample,
        cache: Option<&[CachedFeatures]>,
        max_new: usize,
    ) -> Result<String> {
        let mut s = Session::new(&self.store);
        let visual = self.visuals(&mut s, sample, cache)?;
        let mut ids = self.lm.greedy_decode(&mut s, &sample.prompt, &visual, max_new)?;
        if ids.last() == Some(&EOS) {
            ids.pop();
        }
        Ok(Tokenizer.decode_string(&ids))
    }
}
