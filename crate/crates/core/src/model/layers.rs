use std::rc::Rc;

use super::Graph;
use crate::error::Result;
use crate::numerics::{Mask, Real, Var};

/// Per-row rotation angles for [`crate::numerics::Tape::rotate_pairs`].
#[derive(Clone, Debug)]
pub struct RopeTable<T> {
    pub cos: Rc<[T]>,
    pub sin: Rc<[T]>,
}

/// Projects and unit-normalizes per head.
fn qk<T: Real>(g: &mut Graph<'_, T>, name: &str, x: Var, head_dim: usize) -> Result<Var> {
    let y = g.linear(name, x)?;
    g.normalize_groups(y, head_dim)
}

/// Multi-head self-attention with QK-norm and optional rotary embedding.
pub(crate) fn self_attention<T: Real>(
    g: &mut Graph<'_, T>,
    name: &str,
    x: Var,
    rope: Option<&RopeTable<T>>,
    mask: Option<&Mask>,
) -> Result<Var> {
    let cfg = g.params().config();
    let (heads, hd) = (cfg.heads, cfg.head_dim());
    let mut q = qk(g, &format!("{name}.q"), x, hd)?;
    let mut k = qk(g, &format!("{name}.k"), x, hd)?;
    if let Some(r) = rope {
        q = g.rotate_pairs(q, r.cos.clone(), r.sin.clone(), hd)?;
        k = g.rotate_pairs(k, r.cos.clone(), r.sin.clone(), hd)?;
    }
    let v = g.linear(&format!("{name}.v"), x)?;
    let tau = g.p(&format!("{name}.tau"))?;
    let a = g.attention(q, k, v, tau, heads, mask)?;
    g.linear(&format!("{name}.o"), a)
}

/// Normalized keys and values of context features for cross-attention
/// layer `name`. These are what the streaming cache stores.
pub(crate) fn cross_kv<T: Real>(
    g: &mut Graph<'_, T>,
    name: &str,
    ctx_norm: &str,
    ctx: Var,
) -> Result<(Var, Var)> {
    let hd = g.params().config().head_dim();
    let y = g.norm(ctx_norm, ctx)?;
    let k = qk(g, &format!("{name}.k"), y, hd)?;
    let v = g.linear(&format!("{name}.v"), y)?;
    Ok((k, v))
}

pub(crate) fn cross_attention<T: Real>(
    g: &mut Graph<'_, T>,
    name: &str,
    x: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
) -> Result<Var> {
    let cfg = g.params().config();
    let (heads, hd) = (cfg.heads, cfg.head_dim());
    let q = qk(g, &format!("{name}.q"), x, hd)?;
    let tau = g.p(&format!("{name}.tau"))?;
    let a = g.attention(q, k, v, tau, heads, mask)?;
    g.linear(&format!("{name}.o"), a)
}

pub(crate) fn mlp<T: Real>(g: &mut Graph<'_, T>, name: &str, x: Var) -> Result<Var> {
    let h = g.linear(&format!("{name}.fc1"), x)?;
    let h = g.gelu(h);
    g.linear(&format!("{name}.fc2"), h)
}
