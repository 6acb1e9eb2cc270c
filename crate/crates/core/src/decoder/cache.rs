use super::CachePolicy;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Normalized keys and values one frame contributes to one decoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedFrame<T> {
    pub frame: usize,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

/// Per-layer projected keys/values of processed frames.
///
/// Memory is `2 * B * C` values per cached token.
#[derive(Clone, Debug)]
pub struct KVCache<T> {
    policy: CachePolicy,
    layers: Vec<Vec<CachedFrame<T>>>,
}

impl<T: Real> KVCache<T> {
    pub fn new(policy: CachePolicy, depth: usize) -> Self {
        KVCache {
            policy,
            layers: vec![Vec::new(); depth],
        }
    }

    pub fn policy(&self) -> CachePolicy {
        self.policy
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Entries of decoder layer `layer` (1-based), in frame order.
    pub fn layer(&self, layer: usize) -> &[CachedFrame<T>] {
        &self.layers[layer - 1]
    }

    pub fn frames(&self, layer: usize) -> Vec<usize> {
        self.layer(layer).iter().map(|e| e.frame).collect()
    }

    pub fn tokens(&self, layer: usize) -> usize {
        self.layer(layer).iter().map(|e| e.k.rows()).sum()
    }

    /// Stored scalar count across all layers.
    pub fn numel(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|e| e.k.len() + e.v.len())
            .sum()
    }

    /// Inserts or replaces `entry` in layer `layer`, keeping frames ordered.
    pub fn put(&mut self, layer: usize, entry: CachedFrame<T>) -> Result<()> {
        let l = self
            .layers
            .get_mut(layer.wrapping_sub(1))
            .ok_or_else(|| Error::Contract(format!("cache layer {layer} out of range")))?;
        match l.binary_search_by_key(&entry.frame, |e| e.frame) {
            Ok(i) => l[i] = entry,
            Err(i) => l.insert(i, entry),
        }
        Ok(())
    }

    /// Applies the policy's retention rule after frame `t` was cached.
    pub fn evict(&mut self) {
        if let CachePolicy::Window(k) = self.policy {
            for l in &mut self.layers {
                let keep_from = l.len().saturating_sub(k);
                let mut i = 0;
                l.retain(|e| {
                    let keep = e.frame == 1 || i >= keep_from;
                    i += 1;
                    keep
                });
            }
        }
    }

    /// Concatenated keys and values of the given frames at `layer`.
    pub fn gather(&self, layer: usize, frames: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let l = self.layer(layer);
        let mut k = Vec::new();
        let mut v = Vec::new();
        let mut rows = 0;
        let mut cols = 0;
        for &f in frames {
            let e = l
                .iter()
                .find(|e| e.frame == f)
                .ok_or_else(|| Error::Contract(format!("frame {f} not cached at layer {layer}")))?;
            k.extend_from_slice(e.k.data());
            v.extend_from_slice(e.v.data());
            rows += e.k.rows();
            cols = e.k.cols();
        }
        Ok((Tensor::new(vec![rows, cols], k)?, Tensor::new(vec![rows, cols], v)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(frame: usize) -> CachedFrame<f32> {
        CachedFrame {
            frame,
            k: Tensor::from_fn(&[2, 4], |i| (frame * 10 + i) as f32),
            v: Tensor::zeros(&[2, 4]),
        }
    }

    #[test]
    fn window_keeps_first_and_last_k() {
        let mut c = KVCache::new(CachePolicy::Window(2), 3);
        for t in 1..=8 {
            for l in 1..=3 {
                c.put(l, entry(t)).unwrap();
            }
            c.evict();
        }
        for l in 1..=3 {
            assert_eq!(c.frames(l), vec![1, 7, 8]);
        }
        assert_eq!(c.tokens(1), 6);
        assert_eq!(c.numel(), 3 * 3 * 16);
    }

    #[test]
    fn put_replaces_and_orders() {
        let mut c = KVCache::new(CachePolicy::FullCausal, 1);
        c.put(1, entry(2)).unwrap();
        c.put(1, entry(1)).unwrap();
        c.put(1, entry(2)).unwrap();
        assert_eq!(c.frames(1), vec![1, 2]);
        let (k, _) = c.gather(1, &[2, 1]).unwrap();
        assert_eq!(k.shape(), &[4, 4]);
        assert_eq!(k.data()[0], 20.0);
        assert!(c.put(2, entry(3)).is_err());
        assert!(c.gather(1, &[3]).is_err());
    }
}
