use super::{
    add_register, attended_token_count, context_frames, decoder_block, layer_kv, CachePolicy,
    CachedFrame, KVCache,
};
use crate::encoder::{check_resolution, encode_frames, TokenGrid};
use crate::error::{Error, Result};
use crate::heads::{run_heads, PointmapPrediction};
use crate::model::{Graph, ParamStore};
use crate::numerics::{Real, Tensor, Var};

/// Result of decoding one frame.
#[derive(Clone, Debug)]
pub struct FrameOutput<T> {
    /// 1-based.
    pub frame: usize,
    /// `G^0..G^B`.
    pub pyramid: Vec<TokenGrid<T>>,
    pub prediction: PointmapPrediction,
    /// Context tokens read by this frame's cross-attention, per layer.
    pub attended_tokens: usize,
    /// Cached context tokens plus this frame's own tokens, per layer.
    pub resident_tokens: usize,
}

/// Incremental decoder over a stream of frames.
pub struct StreamSession<'p, T: Real> {
    params: &'p ParamStore<T>,
    cache: KVCache<T>,
    t: usize,
    finalized: bool,
    /// Encoder tokens (`G^0`) kept for layer-synchronous revisits.
    retained: Vec<Tensor<T>>,
    revised_first: Option<FrameOutput<T>>,
}

impl<'p, T: Real> StreamSession<'p, T> {
    pub fn new(params: &'p ParamStore<T>, policy: CachePolicy) -> Result<Self> {
        policy.validate()?;
        params.config().validate()?;
        Ok(StreamSession {
            params,
            cache: KVCache::new(policy, params.config().decoder_depth),
            t: 0,
            finalized: false,
            retained: Vec::new(),
            revised_first: None,
        })
    }

    pub fn policy(&self) -> CachePolicy {
        self.cache.policy()
    }

    pub fn cache(&self) -> &KVCache<T> {
        &self.cache
    }

    /// Frames ingested so far.
    pub fn frames_seen(&self) -> usize {
        self.t
    }

    fn mutual(&self) -> bool {
        self.params.config().mutual_first_pair && self.policy() != CachePolicy::FullAttention
    }

    fn retains(&self, t: usize) -> bool {
        self.policy() == CachePolicy::FullAttention || (self.mutual() && t <= 2)
    }

    /// With the mutual first-pair option, ingesting frame 2 re-decodes
    /// frame 1; its updated output is available here once.
    pub fn take_revised_first(&mut self) -> Option<FrameOutput<T>> {
        self.revised_first.take()
    }

    pub fn ingest_frame(&mut self, rgb: &[f32]) -> Result<FrameOutput<T>> {
        if self.finalized {
            return Err(Error::Finalized);
        }
        let cfg = self.params.config();
        check_resolution(cfg, rgb)?;
        let t = self.t + 1;
        let k = cfg.tokens_per_frame();
        let mut g = Graph::new(self.params, false);
        let x0 = encode_frames(&mut g, &[rgb])?;
        let x0 = if t == 1 { add_register(&mut g, x0, k)? } else { x0 };
        if self.retains(t) {
            self.retained.push(g.value(x0).clone());
        }
        self.t = t;
        if self.mutual() && t == 2 {
            let mut outs = self.revisit(&[1, 2], |f| vec![3 - f])?;
            let second = outs.pop().expect("two outputs");
            self.revised_first = outs.pop();
            self.cache.evict();
            return Ok(second);
        }
        let context = if t == 1 { Vec::new() } else { self.cache.frames(1) };
        let mut x = x0;
        let mut levels = vec![x];
        for layer in 1..=cfg.decoder_depth {
            let (kt, vt) = layer_kv(&mut g, layer, x)?;
            let (kc, vc) = if t == 1 {
                (kt, vt)
            } else {
                let (kc, vc) = self.cache.gather(layer, &context)?;
                (g.constant(kc), g.constant(vc))
            };
            let entry = CachedFrame {
                frame: t,
                k: g.value(kt).clone(),
                v: g.value(vt).clone(),
            };
            x = decoder_block(&mut g, layer, x, None, kc, vc, None)?;
            levels.push(x);
            self.cache.put(layer, entry)?;
        }
        self.cache.evict();
        let mut out = self.output(&g, &levels, t)?;
        out.attended_tokens = attended_token_count(self.policy(), t, k);
        out.resident_tokens = (context.len().max(1) + usize::from(t > 1)) * k;
        Ok(out)
    }

    fn output(&self, g: &Graph<'_, T>, levels: &[Var], t: usize) -> Result<FrameOutput<T>> {
        // Heads run in their own graph so they never touch the cache path.
        let cfg = self.params.config();
        let mut hg = Graph::new(self.params, false);
        let lv: Vec<Var> = levels.iter().map(|&l| hg.constant(g.value(l).clone())).collect();
        let heads = run_heads(&mut hg, &lv, 1)?;
        let prediction = heads.predictions(&hg, t)?.remove(0);
        let pyramid = levels
            .iter()
            .map(|&l| TokenGrid::new(g.value(l).clone(), cfg.grid(), t))
            .collect::<Result<Vec<_>>>()?;
        Ok(FrameOutput {
            frame: t,
            pyramid,
            prediction,
            attended_tokens: 0,
            resident_tokens: 0,
        })
    }

    /// Re-decodes `frames` layer by layer so that every frame can read the
    /// refreshed features of its context at the same depth. Cache entries
    /// of those frames are overwritten.
    fn revisit(
        &mut self,
        frames: &[usize],
        context_of: impl Fn(usize) -> Vec<usize>,
    ) -> Result<Vec<FrameOutput<T>>> {
        let cfg = self.params.config();
        let k = cfg.tokens_per_frame();
        let mut feats: Vec<Tensor<T>> = frames.iter().map(|&f| self.retained[f - 1].clone()).collect();
        let mut pyramids: Vec<Vec<Tensor<T>>> = feats.iter().map(|f| vec![f.clone()]).collect();
        for layer in 1..=cfg.decoder_depth {
            let mut g = Graph::new(self.params, false);
            for (i, &f) in frames.iter().enumerate() {
                let x = g.constant(feats[i].clone());
                let (kv, vv) = layer_kv(&mut g, layer, x)?;
                self.cache.put(
                    layer,
                    CachedFrame {
                        frame: f,
                        k: g.value(kv).clone(),
                        v: g.value(vv).clone(),
                    },
                )?;
            }
            for (i, &f) in frames.iter().enumerate() {
                let (kc, vc) = self.cache.gather(layer, &context_of(f))?;
                let x = g.constant(feats[i].clone());
                let (kc, vc) = (g.constant(kc), g.constant(vc));
                let y = decoder_block(&mut g, layer, x, None, kc, vc, None)?;
                pyramids[i].push(g.value(y).clone());
            }
            for (i, p) in pyramids.iter().enumerate() {
                feats[i] = p[layer].clone();
            }
        }
        let mut outs = Vec::with_capacity(frames.len());
        for (i, &f) in frames.iter().enumerate() {
            let mut g = Graph::new(self.params, false);
            let levels: Vec<Var> = pyramids[i].iter().map(|l| g.constant(l.clone())).collect();
            let mut out = self.output(&g, &levels, f)?;
            let ctx = context_of(f).len();
            out.attended_tokens = ctx * k;
            out.resident_tokens = (self.cache.frames(1).len() + 1) * k;
            outs.push(out);
        }
        Ok(outs)
    }

    /// Ends the stream. Under FullAttention every frame is re-decoded
    /// against all other frames and the refreshed outputs are returned;
    /// other policies return nothing.
    pub fn finalize(&mut self) -> Result<Vec<FrameOutput<T>>> {
        if self.finalized {
            return Err(Error::Finalized);
        }
        self.finalized = true;
        if self.policy() != CachePolicy::FullAttention || self.t < 2 {
            return Ok(Vec::new());
        }
        let n = self.t;
        let frames: Vec<usize> = (1..=n).collect();
        let policy = self.policy();
        self.revisit(&frames, |f| context_frames(policy, f, n, false))
    }
}
