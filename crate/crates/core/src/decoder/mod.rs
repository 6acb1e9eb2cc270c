//! Causal decoder: frame-wise self-attention followed by cross-attention to
//! the features of context frames, run either batched with explicit masks or
//! incrementally through a [`StreamSession`].

mod cache;
mod session;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use cache::{CachedFrame, KVCache};
pub use session::{FrameOutput, StreamSession};

use crate::encoder::{encode_frames, TokenGrid};
use crate::error::{Error, Result};
use crate::model::layers::{cross_attention, cross_kv, mlp, self_attention};
use crate::model::{Graph, ParamStore};
use crate::numerics::{Mask, Real, Var};

/// Which earlier frames each frame's cross-attention may read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CachePolicy {
    /// Every earlier frame.
    FullCausal,
    /// Frame 1 plus the `k` most recent earlier frames.
    Window(usize),
    /// Every other frame, past and future. Offline only.
    FullAttention,
}

impl CachePolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            CachePolicy::Window(0) => Err(Error::Config("window size must be >= 1".into())),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for CachePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CachePolicy::FullCausal => write!(f, "causal"),
            CachePolicy::Window(k) => write!(f, "window:{k}"),
            CachePolicy::FullAttention => write!(f, "fa"),
        }
    }
}

impl FromStr for CachePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let p = match s {
            "causal" => CachePolicy::FullCausal,
            "fa" => CachePolicy::FullAttention,
            _ => {
                let k = s
                    .strip_prefix("window:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| {
                        Error::Config(format!("unknown policy {s:?}; expected causal, window:K or fa"))
                    })?;
                CachePolicy::Window(k)
            }
        };
        p.validate()?;
        Ok(p)
    }
}

impl TryFrom<String> for CachePolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CachePolicy> for String {
    fn from(p: CachePolicy) -> String {
        p.to_string()
    }
}

/// 1-based frames that frame `t` of an `n`-frame sequence cross-attends.
///
/// Frame 1 has no predecessor and attends itself, unless `mutual_first_pair`
/// is set, in which case frames 1 and 2 attend each other.
pub fn context_frames(policy: CachePolicy, t: usize, n: usize, mutual_first_pair: bool) -> Vec<usize> {
    if mutual_first_pair && n >= 2 && t <= 2 && policy != CachePolicy::FullAttention {
        return vec![3 - t];
    }
    match policy {
        _ if t == 1 && policy != CachePolicy::FullAttention => vec![1],
        CachePolicy::FullCausal => (1..t).collect(),
        CachePolicy::Window(k) => {
            let lo = t.saturating_sub(k).max(2);
            std::iter::once(1).chain(lo..t).collect()
        }
        CachePolicy::FullAttention if n == 1 => vec![1],
        CachePolicy::FullAttention => (1..=n).filter(|&f| f != t).collect(),
    }
}

/// Cross-attention mask over `n` frames of `k` tokens each.
pub fn cross_mask(policy: CachePolicy, n: usize, k: usize, mutual_first_pair: bool) -> Mask {
    let allowed: Vec<Vec<bool>> = (1..=n)
        .map(|t| {
            let ctx = context_frames(policy, t, n, mutual_first_pair);
            (1..=n).map(|f| ctx.contains(&f)).collect()
        })
        .collect();
    Mask::from_fn(n * k, n * k, |i, j| allowed[i / k][j / k])
}

/// Context tokens read by frame `t` while streaming.
///
/// FullCausal: `(t - 1) K`. Window(k): frame 1 plus the last `k` frames
/// before `t`, which overlap once `t - 1 <= k`, giving
/// `min(t - 1, k + [t - 1 > k]) K`. FullAttention ingests causally, so its
/// per-ingest count equals FullCausal. Frame 1 reads its own `K` tokens.
pub fn attended_token_count(policy: CachePolicy, t: usize, k: usize) -> usize {
    if t <= 1 {
        return k;
    }
    let frames = match policy {
        CachePolicy::FullCausal | CachePolicy::FullAttention => t - 1,
        CachePolicy::Window(w) => (t - 1).min(w + usize::from(t - 1 > w)),
    };
    frames * k
}

/// Feature pyramid `G^0..G^B`, each level `[n * K, C]`.
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub levels: Vec<Var>,
    pub n_frames: usize,
}

fn layer_name(g: &Graph<'_, impl Real>, layer: usize) -> Result<String> {
    let b = g.params().config().decoder_depth;
    if layer == 0 || layer > b {
        return Err(Error::Contract(format!("decoder layer {layer} outside 1..={b}")));
    }
    Ok(format!("dec.{}", layer - 1))
}

/// Keys and values that decoder layer `layer` (1-based) derives from
/// context features `ctx` (that layer's input).
pub fn layer_kv<T: Real>(g: &mut Graph<'_, T>, layer: usize, ctx: Var) -> Result<(Var, Var)> {
    let n = layer_name(g, layer)?;
    cross_kv(g, &format!("{n}.cross"), &format!("{n}.ln_ctx"), ctx)
}

/// One decoder block: `x += SelfAttn(x)`, `x += CrossAttn(x, k, v)`,
/// `x += MLP(x)`, all pre-norm.
pub fn decoder_block<T: Real>(
    g: &mut Graph<'_, T>,
    layer: usize,
    x: Var,
    self_mask: Option<&Mask>,
    k: Var,
    v: Var,
    cross_mask: Option<&Mask>,
) -> Result<Var> {
    let n = layer_name(g, layer)?;
    let h = g.norm(&format!("{n}.ln1"), x)?;
    let a = self_attention(g, &format!("{n}.self"), h, None, self_mask)?;
    let x = g.add(x, a)?;
    let h = g.norm(&format!("{n}.ln2"), x)?;
    let a = cross_attention(g, &format!("{n}.cross"), h, k, v, cross_mask)?;
    let x = g.add(x, a)?;
    let h = g.norm(&format!("{n}.ln3"), x)?;
    let m = mlp(g, &format!("{n}.mlp"), h)?;
    g.add(x, m)
}

/// Evaluates one decoder block on concrete features.
pub fn decoder_block_eval<T: Real>(
    params: &ParamStore<T>,
    layer: usize,
    query: &TokenGrid<T>,
    context: &[&TokenGrid<T>],
) -> Result<TokenGrid<T>> {
    if context.is_empty() {
        return Err(Error::Contract("decoder block needs a non-empty context".into()));
    }
    let mut g = Graph::new(params, false);
    let x = g.constant(query.tokens.clone());
    let parts: Vec<Var> = context.iter().map(|c| g.constant(c.tokens.clone())).collect();
    let ctx = g.concat_rows(&parts)?;
    let (k, v) = layer_kv(&mut g, layer, ctx)?;
    let y = decoder_block(&mut g, layer, x, None, k, v, None)?;
    TokenGrid::new(g.value(y).clone(), query.grid, query.frame)
}

/// Adds the register token to the first `k` rows.
pub(crate) fn add_register<T: Real>(g: &mut Graph<'_, T>, x: Var, k: usize) -> Result<Var> {
    let reg = g.p("reg")?;
    let rows = g.value(x).rows();
    let first = g.slice_rows(x, 0, k)?;
    let first = g.add_row(first, reg)?;
    if rows == k {
        return Ok(first);
    }
    let rest = g.slice_rows(x, k, rows)?;
    g.concat_rows(&[first, rest])
}

/// Training-time path: all frames at once with masks encoding `policy`.
pub fn batched_forward<T: Real>(
    g: &mut Graph<'_, T>,
    frames: &[&[f32]],
    policy: CachePolicy,
) -> Result<Pyramid> {
    let n = frames.len();
    if n < 2 {
        return Err(Error::Contract(format!("batched forward needs >= 2 frames, got {n}")));
    }
    policy.validate()?;
    let cfg = g.params().config();
    let k = cfg.tokens_per_frame();
    let self_mask = Mask::block_diagonal(n, k);
    let cmask = cross_mask(policy, n, k, cfg.mutual_first_pair);
    let x = encode_frames(g, frames)?;
    let mut x = add_register(g, x, k)?;
    let mut levels = vec![x];
    for layer in 1..=cfg.decoder_depth {
        let (kk, vv) = layer_kv(g, layer, x)?;
        x = decoder_block(g, layer, x, Some(&self_mask), kk, vv, Some(&cmask))?;
        levels.push(x);
    }
    Ok(Pyramid { levels, n_frames: n })
}
