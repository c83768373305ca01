//! Patch-embedding vision encoders and pixel-unshuffle token reduction.
//!
//! Each branch turns every patch of a [`TileSet`] into a `grid_side ×
//! grid_side` feature grid. Pixel unshuffle then folds each `r × r`
//! spatial block into channels:
//!
//! ```text
//! out[n, c·r² + dr·r + dc, i, j] = in[n, c, i·r + dr, j·r + dc]
//! ```
//!
//! so a `[n, c, s, s]` grid becomes `[n, c·r², s/r, s/r]` and the token count
//! per tile drops by `r²`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Block, LayerNorm, Linear};
use crate::tensor::{permute, Graph, ParamId, ParamStore, Session, Tensor, Var};
use crate::tiler::{normalize, ImageBuffer, TileSet};

/// What part of the signal a branch looks at before patchifying.
///
/// `Lowpass` replaces every `block × block` cell by its mean; `Highpass`
/// keeps only the residual around that mean. The two are complementary:
/// their sum is the original tile.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InputView {
    #[default]
    Full,
    Lowpass {
        block: usize,
    },
    Highpass {
        block: usize,
    },
}

impl InputView {
    pub fn block(self) -> Option<usize> {
        match self {
            InputView::Full => None,
            InputView::Lowpass { block } | InputView::Highpass { block } => Some(block),
        }
    }

    pub fn apply(self, img: &ImageBuffer) -> Result<ImageBuffer> {
        let Some(k) = self.block() else {
            return Ok(img.clone());
        };
        if k == 0 || img.height() % k != 0 || img.width() % k != 0 {
            return Err(Error::dim(
                "input_view",
                format!("block {k} does not tile {}x{}", img.height(), img.width()),
            ));
        }
        let c = img.channels();
        let mut out = img.clone();
        for by in (0..img.height()).step_by(k) {
            for bx in (0..img.width()).step_by(k) {
                for ch in 0..c {
                    let mut sum = 0.0;
                    for y in by..by + k {
                        for x in bx..bx + k {
                            sum += img.get(y, x, ch);
                        }
                    }
                    let mean = sum / (k * k) as f64;
                    for y in by..by + k {
                        for x in bx..bx + k {
                            let v = match self {
                                InputView::Lowpass { .. } => mean,
                                _ => img.get(y, x, ch) - mean,
                            };
                            out.set(y, x, ch, v);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn default_mean() -> Vec<f64> {
    vec![0.5; 3]
}

fn default_std() -> Vec<f64> {
    vec![0.25; 3]
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Tokens per axis before unshuffle; `grid_side · patch_size` is the tile
    /// size.
    pub grid_side: usize,
    pub unshuffle_r: usize,
    #[serde(default = "default_mean")]
    pub norm_mean: Vec<f64>,
    #[serde(default = "default_std")]
    pub norm_std: Vec<f64>,
    #[serde(default = "default_true")]
    pub frozen: bool,
    #[serde(default)]
    pub view: InputView,
}

impl EncoderConfig {
    pub fn tile_size(&self) -> usize {
        self.grid_side * self.patch_size
    }

    /// Tokens per tile after pixel unshuffle.
    pub fn tokens_per_tile(&self) -> usize {
        let side = self.grid_side / self.unshuffle_r.max(1);
        side * side
    }

    /// Feature width after pixel unshuffle.
    pub fn out_channels(&self) -> usize {
        self.embed_dim * self.unshuffle_r * self.unshuffle_r
    }

    /// Every violated constraint, prefixed with `path`.
    pub fn problems(&self, path: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut bad = |key: &str, msg: String| out.push(format!("{path}.{key}: {msg}"));
        for (key, v) in [
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("grid_side", self.grid_side),
            ("unshuffle_r", self.unshuffle_r),
        ] {
            if v == 0 {
                bad(key, "must be positive".into());
            }
        }
        if self.heads > 0 && self.embed_dim % self.heads != 0 {
            bad(
                "heads",
                format!("{} does not divide embed_dim {}", self.heads, self.embed_dim),
            );
        }
        if self.unshuffle_r > 0 && self.grid_side % self.unshuffle_r != 0 {
            bad(
                "unshuffle_r",
                format!("{} does not divide grid_side {}", self.unshuffle_r, self.grid_side),
            );
        }
        if self.norm_mean.len() != self.norm_std.len() {
            bad("norm_std", "length differs from norm_mean".into());
        }
        if self.norm_std.iter().any(|&s| s == 0.0) {
            bad("norm_std", "contains zero".into());
        }
        if let Some(k) = self.view.block() {
            if k == 0 || self.tile_size() % k != 0 {
                bad("view.block", format!("{k} does not divide tile size {}", self.tile_size()));
            }
        }
        out
    }
}

/// Visual tokens before or after pixel unshuffle: `[n_tiles, channels,
/// side, side]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub n_tiles: usize,
    pub side: usize,
    pub channels: usize,
    pub data: Tensor,
}

impl TokenGrid {
    pub fn new(data: Tensor) -> Result<Self> {
        match *data.shape() {
            [n_tiles, channels, h, w] if h == w => Ok(Self {
                n_tiles,
                side: h,
                channels,
                data,
            }),
            ref s => Err(Error::dim(
                "token_grid",
                format!("expected [n, c, s, s], got {s:?}"),
            )),
        }
    }

    pub fn tokens_per_tile(&self) -> usize {
        self.side * self.side
    }
}

const UNSHUFFLE_PERM: [usize; 6] = [0, 1, 3, 5, 2, 4];
const SHUFFLE_PERM: [usize; 6] = [0, 1, 4, 2, 5, 3];

/// Space-to-depth by factor `r`.
pub fn pixel_unshuffle(grid: &TokenGrid, r: usize) -> Result<TokenGrid> {
    if r == 0 || grid.side % r != 0 {
        return Err(Error::dim(
            "pixel_unshuffle",
            format!("side {} is not divisible by r={r}", grid.side),
        ));
    }
    let (n, c, s) = (grid.n_tiles, grid.channels, grid.side / r);
    let data = permute(grid.data.data(), &[n, c, s, r, s, r], &UNSHUFFLE_PERM);
    TokenGrid::new(Tensor::new(vec![n, c * r * r, s, s], data)?)
}

/// Depth-to-space by factor `r`; the exact inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(grid: &TokenGrid, r: usize) -> Result<TokenGrid> {
    if r == 0 || grid.channels % (r * r) != 0 {
        return Err(Error::dim(
            "pixel_shuffle",
            format!("{} channels are not divisible by r²={}", grid.channels, r * r),
        ));
    }
    let (n, c, s) = (grid.n_tiles, grid.channels / (r * r), grid.side);
    let data = permute(grid.data.data(), &[n, c, r, r, s, s], &SHUFFLE_PERM);
    TokenGrid::new(Tensor::new(vec![n, c, s * r, s * r], data)?)
}

/// [`pixel_unshuffle`] as a differentiable graph op on a `[n, c, s, s]` node.
pub fn pixel_unshuffle_var(g: &mut Graph, x: Var, r: usize) -> Result<Var> {
    let (n, c, side) = match *g.shape(x) {
        [n, c, h, w] if h == w => (n, c, h),
        ref s => {
            return Err(Error::dim(
                "pixel_unshuffle",
                format!("expected [n, c, s, s], got {s:?}"),
            ))
        }
    };
    if r == 0 || side % r != 0 {
        return Err(Error::dim(
            "pixel_unshuffle",
            format!("side {side} is not divisible by r={r}"),
        ));
    }
    let s = side / r;
    let x = g.reshape(x, vec![n, c, s, r, s, r])?;
    let x = g.permute(x, &UNSHUFFLE_PERM)?;
    g.reshape(x, vec![n, c * r * r, s, s])
}

/// Post-unshuffle tokens per tile of the two branches combined.
pub fn token_budget(a: &EncoderConfig, b: &EncoderConfig) -> usize {
    a.tokens_per_tile() + b.tokens_per_tile()
}

/// A toy ViT: linear patch embedding, learned positions, pre-norm blocks and
/// a final norm.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub cfg: EncoderConfig,
    pub prefix: String,
    embed: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl VisionEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let problems = cfg.problems(prefix);
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let channels = cfg.norm_mean.len();
        let patch_dim = cfg.patch_size * cfg.patch_size * channels;
        let d = cfg.embed_dim;
        let tokens = cfg.grid_side * cfg.grid_side;
        let embed = Linear::new(store, &format!("{prefix}.patch_embed"), patch_dim, d, true, 1.0, rng)?;
        let pos = store.add_normal(format!("{prefix}.pos"), vec![tokens, d], 0.5, rng)?;
        let gain = 1.0 / ((2 * cfg.depth.max(1)) as f64).sqrt();
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, &format!("{prefix}.block{i}"), d, cfg.heads, false, gain, rng))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), d)?;
        Ok(Self {
            cfg,
            prefix: prefix.to_string(),
            embed,
            pos,
            blocks,
            norm,
        })
    }

    /// Normalizes with the branch statistics, applies the branch view and
    /// cuts every patch (tiles, then thumbnail) into flattened
    /// `patch_size²·channels` vectors ordered `(py, px, c)`.
    /// Returns `[n_patches, grid_side², patch_dim]` values.
    pub fn patchify(&self, tiles: &TileSet) -> Result<Tensor> {
        let cfg = &self.cfg;
        let p = cfg.patch_size;
        let first = &tiles.tiles[0];
        if first.height() != first.width() || first.height() % p != 0 {
            return Err(Error::dim(
                "encode",
                format!(
                    "tile {}x{} is not divisible into {p}x{p} patches",
                    first.height(),
                    first.width()
                ),
            ));
        }
        if first.height() != cfg.tile_size() {
            return Err(Error::dim(
                "encode",
                format!(
                    "tile size {} differs from grid_side·patch_size = {}",
                    first.height(),
                    cfg.tile_size()
                ),
            ));
        }
        let normed = normalize(tiles, &cfg.norm_mean, &cfg.norm_std)?;
        let g = cfg.grid_side;
        let c = first.channels();
        let patch_dim = p * p * c;
        let n = normed.patch_count();
        let mut data = Vec::with_capacity(n * g * g * patch_dim);
        for patch in normed.patches() {
            let img = cfg.view.apply(patch)?;
            for gy in 0..g {
                for gx in 0..g {
                    for py in 0..p {
                        for px in 0..p {
                            for ch in 0..c {
                                data.push(img.get(gy * p + py, gx * p + px, ch));
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![n, g * g, patch_dim], data)
    }

    /// Graph forward up to the pre-unshuffle grid `[n, embed_dim, side,
    /// side]`.
    pub fn forward_grid(&self, s: &mut Session, tiles: &TileSet) -> Result<Var> {
        let patches = self.patchify(tiles)?;
        let n = patches.shape()[0];
        let (g, d) = (self.cfg.grid_side, self.cfg.embed_dim);
        let x = s.graph.leaf(patches);
        let x = self.embed.forward(s, x)?;
        let pos = s.param(self.pos);
        let ids: Vec<usize> = (0..n).flat_map(|_| 0..g * g).collect();
        let pos = s.graph.embedding(pos, &ids)?;
        let pos = s.graph.reshape(pos, vec![n, g * g, d])?;
        let mut x = s.graph.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(s, x)?;
        }
        let x = self.norm.forward(s, x)?;
        let x = s.graph.reshape(x, vec![n, g, g, d])?;
        s.graph.permute(x, &[0, 3, 1, 2])
    }

    /// Graph forward including pixel unshuffle: `[n, embed_dim·r², side/r,
    /// side/r]`.
    pub fn forward(&self, s: &mut Session, tiles: &TileSet) -> Result<Var> {
        let grid = self.forward_grid(s, tiles)?;
        pixel_unshuffle_var(&mut s.graph, grid, self.cfg.unshuffle_r)
    }

    /// Pre-unshuffle feature grid, computed outside any training graph.
    pub fn encode(&self, store: &ParamStore, tiles: &TileSet) -> Result<TokenGrid> {
        let mut s = Session::new(store);
        let v = self.forward_grid(&mut s, tiles)?;
        TokenGrid::new(s.graph.tensor(v).with_requires_grad(false))
    }

    pub fn blocks(&self) -> usize {
        self.blocks.len()
    }
}
