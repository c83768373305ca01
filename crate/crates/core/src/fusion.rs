//! Projectors and the strategies for merging two branches' visual tokens.
//!
//! Post-adaptation strategies project each branch with its own MLP first and
//! merge in the language embedding space; pre-adaptation strategies merge raw
//! encoder features and send them through one shared projector.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::tensor::{Graph, ParamId, ParamStore, Session, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Branch {
    A,
    B,
    /// A token mixing both branches (channel fusion).
    Both,
}

/// Where a visual token came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TokenOrigin {
    pub tile: usize,
    pub branch: Branch,
    /// Row-major index within the tile's token grid (offset by the first
    /// branch's count for pre-sequence fusion).
    pub position: usize,
}

/// Projected visual tokens `[n_tokens, d_lm]` with per-token provenance.
#[derive(Clone, Debug)]
pub struct VisualSequence {
    /// `None` only for a sequence without tokens.
    pub embeddings: Option<Var>,
    pub provenance: Vec<TokenOrigin>,
    /// Patches covered: tiles `0..n_tiles`.
    pub n_tiles: usize,
}

impl VisualSequence {
    pub fn empty(n_tiles: usize) -> Self {
        Self {
            embeddings: None,
            provenance: Vec::new(),
            n_tiles,
        }
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    /// Token count per tile.
    pub fn tile_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_tiles];
        for o in &self.provenance {
            counts[o.tile] += 1;
        }
        counts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionStrategy {
    /// Per tile: all of branch A's projected tokens, then all of branch B's.
    PostInterleave,
    /// Aligned token pairs concatenated in embedding space and mapped back to
    /// `d_lm` by a learned linear map.
    PostChannel,
    /// Raw features concatenated along the token axis, one shared projector.
    PreSequence,
    /// Raw features concatenated along the channel axis, one shared projector.
    PreChannel,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy::PostInterleave,
        FusionStrategy::PostChannel,
        FusionStrategy::PreSequence,
        FusionStrategy::PreChannel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::PostInterleave => "post-interleave",
            FusionStrategy::PostChannel => "post-channel",
            FusionStrategy::PreSequence => "pre-sequence",
            FusionStrategy::PreChannel => "pre-channel",
        }
    }

    pub fn is_pre(self) -> bool {
        matches!(self, FusionStrategy::PreSequence | FusionStrategy::PreChannel)
    }

    /// Fused tokens per tile given each branch's post-unshuffle count.
    pub fn fused_tokens(self, a: usize, b: usize) -> usize {
        match self {
            FusionStrategy::PostInterleave | FusionStrategy::PreSequence => a + b,
            FusionStrategy::PostChannel | FusionStrategy::PreChannel => a,
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("fusion.kind: unknown strategy {s:?}")))
    }
}

/// Two-layer GELU MLP from encoder features to the LM embedding width.
#[derive(Clone, Debug)]
pub struct Projector {
    pub mlp: Mlp,
    pub in_dim: usize,
    pub d_lm: usize,
}

impl Projector {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        d_lm: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, name, in_dim, hidden, d_lm, rng)?,
            in_dim,
            d_lm,
        })
    }

    /// Projects a `[n, c, s, s]` grid. Tokens are read row-major within each
    /// tile and tiles stay in order.
    pub fn project(&self, s: &mut Session, grid: Var, branch: Branch) -> Result<VisualSequence> {
        let (n, c, side) = grid_dims(&s.graph, grid, "project")?;
        if c != self.in_dim {
            return Err(Error::dim(
                "project",
                format!("features of width {c}, projector expects {}", self.in_dim),
            ));
        }
        let rows = tokens_rows(&mut s.graph, grid)?;
        let out = self.mlp.forward(s, rows)?;
        let t = side * side;
        let provenance = (0..n)
            .flat_map(|tile| {
                (0..t).map(move |position| TokenOrigin {
                    tile,
                    branch,
                    position,
                })
            })
            .collect();
        Ok(VisualSequence {
            embeddings: Some(out),
            provenance,
            n_tiles: n,
        })
    }
}

fn grid_dims(g: &Graph, grid: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *g.shape(grid) {
        [n, c, h, w] if h == w => Ok((n, c, h)),
        ref s => Err(Error::dim(op, format!("expected [n, c, s, s], got {s:?}"))),
    }
}

/// `[n, c, s, s]` to per-tile token rows `[n, s², c]`.
fn tokens_3d(g: &mut Graph, grid: Var) -> Result<Var> {
    let (n, c, side) = grid_dims(g, grid, "tokens")?;
    let x = g.permute(grid, &[0, 2, 3, 1])?;
    g.reshape(x, vec![n, side * side, c])
}

fn tokens_rows(g: &mut Graph, grid: Var) -> Result<Var> {
    let (n, c, side) = grid_dims(g, grid, "tokens")?;
    let x = g.permute(grid, &[0, 2, 3, 1])?;
    g.reshape(x, vec![n * side * side, c])
}

/// Tile-level interleave: for each tile in ascending order, branch `a`'s
/// tokens then branch `b`'s, each in their original order.
pub fn fuse_post_interleave(
    g: &mut Graph,
    a: &VisualSequence,
    b: &VisualSequence,
) -> Result<VisualSequence> {
    if a.n_tiles != b.n_tiles {
        return Err(Error::Contract(format!(
            "interleave needs the same tiles, got {} and {}",
            a.n_tiles, b.n_tiles
        )));
    }
    let table = match (a.embeddings, b.embeddings) {
        (Some(x), Some(y)) => g.concat(&[x, y], 0)?,
        (Some(x), None) | (None, Some(x)) => x,
        (None, None) => return Ok(VisualSequence::empty(a.n_tiles)),
    };
    let mut by_tile: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, o) in a.provenance.iter().chain(&b.provenance).enumerate() {
        by_tile.entry(o.tile).or_default().push(i);
    }
    // Rows of `a` precede rows of `b` in the table, so the per-tile index
    // lists are already A-block then B-block.
    let order: Vec<usize> = by_tile.into_values().flatten().collect();
    let all: Vec<TokenOrigin> = a.provenance.iter().chain(&b.provenance).copied().collect();
    let provenance = order.iter().map(|&i| all[i]).collect();
    let embeddings = g.embedding(table, &order)?;
    Ok(VisualSequence {
        embeddings: Some(embeddings),
        provenance,
        n_tiles: a.n_tiles,
    })
}

/// Channel fusion after projection: `down · [a_i ; b_i]` for aligned pairs.
/// `down` is `[2·d_lm, d_lm]`.
pub fn fuse_post_channel(
    g: &mut Graph,
    a: &VisualSequence,
    b: &VisualSequence,
    down: Var,
) -> Result<VisualSequence> {
    if a.n_tiles != b.n_tiles || a.tile_counts() != b.tile_counts() {
        return Err(Error::Contract(format!(
            "channel fusion needs equal per-tile token counts, got {:?} and {:?}",
            a.tile_counts(),
            b.tile_counts()
        )));
    }
    let (Some(x), Some(y)) = (a.embeddings, b.embeddings) else {
        return Ok(VisualSequence::empty(a.n_tiles));
    };
    let cat = g.concat(&[x, y], 1)?;
    let fused = g.matmul(cat, down)?;
    Ok(VisualSequence {
        embeddings: Some(fused),
        provenance: a
            .provenance
            .iter()
            .map(|o| TokenOrigin {
                branch: Branch::Both,
                ..*o
            })
            .collect(),
        n_tiles: a.n_tiles,
    })
}

/// Pre-adaptation fusion of raw post-unshuffle grids through one shared
/// projector.
pub fn fuse_pre(
    s: &mut Session,
    a_raw: Var,
    b_raw: Var,
    kind: FusionStrategy,
    shared: &Projector,
) -> Result<VisualSequence> {
    let (na, ca, sa) = grid_dims(&s.graph, a_raw, "fuse_pre")?;
    let (nb, cb, sb) = grid_dims(&s.graph, b_raw, "fuse_pre")?;
    if na != nb {
        return Err(Error::dim(
            "fuse_pre",
            format!("{na} tiles in branch A, {nb} in branch B"),
        ));
    }
    let (ta, tb) = (sa * sa, sb * sb);
    let ta3 = tokens_3d(&mut s.graph, a_raw)?;
    let tb3 = tokens_3d(&mut s.graph, b_raw)?;
    let (rows, per_tile, width) = match kind {
        FusionStrategy::PreSequence => {
            if ca != cb {
                return Err(Error::dim(
                    "fuse_pre",
                    format!("sequence concatenation needs equal widths, got {ca} and {cb}"),
                ));
            }
            let cat = s.graph.concat(&[ta3, tb3], 1)?;
            (s.graph.reshape(cat, vec![na * (ta + tb), ca])?, ta + tb, ca)
        }
        FusionStrategy::PreChannel => {
            if ta != tb {
                return Err(Error::dim(
                    "fuse_pre",
                    format!("channel concatenation needs equal token counts, got {ta} and {tb}"),
                ));
            }
            let cat = s.graph.concat(&[ta3, tb3], 2)?;
            (s.graph.reshape(cat, vec![na * ta, ca + cb])?, ta, ca + cb)
        }
        other => {
            return Err(Error::Contract(format!(
                "{other} is not a pre-adaptation strategy"
            )))
        }
    };
    if width != shared.in_dim {
        return Err(Error::dim(
            "fuse_pre",
            format!("fused width {width}, shared projector expects {}", shared.in_dim),
        ));
    }
    let out = shared.mlp.forward(s, rows)?;
    let provenance = (0..na)
        .flat_map(|tile| {
            (0..per_tile).map(move |p| match kind {
                FusionStrategy::PreSequence if p >= ta => TokenOrigin {
                    tile,
                    branch: Branch::B,
                    position: p,
                },
                FusionStrategy::PreSequence => TokenOrigin {
                    tile,
                    branch: Branch::A,
                    position: p,
                },
                _ => TokenOrigin {
                    tile,
                    branch: Branch::Both,
                    position: p,
                },
            })
        })
        .collect();
    Ok(VisualSequence {
        embeddings: Some(out),
        provenance,
        n_tiles: na,
    })
}

/// Learned `[2·d_lm, d_lm]` map used by post-channel fusion.
pub fn channel_down_map(
    store: &mut ParamStore,
    name: &str,
    d_lm: usize,
    rng: &mut impl Rng,
) -> Result<ParamId> {
    store.add_normal(name, vec![2 * d_lm, d_lm], 1.0 / ((2 * d_lm) as f64).sqrt(), rng)
}
