//! Patch tokenizer and weight-shared ViT encoder with 2-D rotary embeddings.

use crate::error::{Error, Result};
use crate::model::layers::{mlp, self_attention, RopeTable};
use crate::model::{Graph, ModelConfig, ParamStore};
use crate::numerics::{Mask, Real, Tensor, Var};

/// Per-frame token features with their patch-grid geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T> {
    /// `[K, C]`, raster order over the patch grid.
    pub tokens: Tensor<T>,
    pub grid: (usize, usize),
    /// 1-based frame index.
    pub frame: usize,
}

impl<T: Real> TokenGrid<T> {
    pub fn new(tokens: Tensor<T>, grid: (usize, usize), frame: usize) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() != grid.0 * grid.1 {
            return Err(Error::Shape(format!(
                "token grid {:?} for {}x{} patches",
                tokens.shape(),
                grid.0,
                grid.1
            )));
        }
        Ok(TokenGrid { tokens, grid, frame })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flattens an interleaved RGB image into `[K, p*p*3]` patch rows.
pub fn patchify<T: Real>(rgb: &[f32], height: usize, width: usize, p: usize) -> Result<Tensor<T>> {
    if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
        return Err(Error::Shape(format!(
            "image {height}x{width} not divisible by patch {p}"
        )));
    }
    if rgb.len() != height * width * 3 {
        return Err(Error::Shape(format!(
            "rgb buffer of {} values for {height}x{width}",
            rgb.len()
        )));
    }
    let (gh, gw) = (height / p, width / p);
    let row = p * p * 3;
    let mut out = Vec::with_capacity(gh * gw * row);
    for pr in 0..gh {
        for pc in 0..gw {
            for dy in 0..p {
                let start = ((pr * p + dy) * width + pc * p) * 3;
                out.extend(rgb[start..start + p * 3].iter().map(|&v| T::of(v as f64)));
            }
        }
    }
    Tensor::new(vec![gh * gw, row], out)
}

fn check_rope_dim(head_dim: usize) -> Result<()> {
    if head_dim == 0 || !head_dim.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "2-D rotary embedding needs a head dim divisible by 4, got {head_dim}"
        )));
    }
    Ok(())
}

/// Angles for 2-D rotary embedding: the first half of each head's pairs
/// rotate with the patch row, the second half with the patch column.
fn rope_angles(positions: &[(usize, usize)], head_dim: usize, base: f64) -> Vec<f64> {
    let quarter = head_dim / 4;
    let half = head_dim / 2;
    let mut out = Vec::with_capacity(positions.len() * half);
    for &(r, c) in positions {
        for j in 0..half {
            let (pos, jj) = if j < quarter { (r, j) } else { (c, j - quarter) };
            let freq = base.powf(-(jj as f64) / quarter as f64);
            out.push(pos as f64 * freq);
        }
    }
    out
}

pub fn rope_table<T: Real>(
    positions: &[(usize, usize)],
    head_dim: usize,
    base: f64,
) -> Result<RopeTable<T>> {
    check_rope_dim(head_dim)?;
    let a = rope_angles(positions, head_dim, base);
    Ok(RopeTable {
        cos: a.iter().map(|x| T::of(x.cos())).collect(),
        sin: a.iter().map(|x| T::of(x.sin())).collect(),
    })
}

/// Grid positions of `frames` consecutive frames, raster order.
pub fn grid_positions(grid: (usize, usize), frames: usize) -> Vec<(usize, usize)> {
    let one: Vec<_> = (0..grid.0)
        .flat_map(|r| (0..grid.1).map(move |c| (r, c)))
        .collect();
    one.iter().copied().cycle().take(one.len() * frames).collect()
}

/// Applies the 2-D rotary embedding to `[rows, C]` features, one grid
/// position per row, independently per head.
pub fn rope_rotate<T: Real>(
    x: &Tensor<T>,
    positions: &[(usize, usize)],
    head_dim: usize,
    base: f64,
) -> Result<Tensor<T>> {
    let table = rope_table::<T>(positions, head_dim, base)?;
    let mut tape = crate::numerics::Tape::new();
    let v = tape.constant(x.clone());
    let r = tape.rotate_pairs(v, table.cos, table.sin, head_dim)?;
    Ok(tape.value(r).clone())
}

/// Encodes `frames` (interleaved RGB) into `[n * K, C]` tokens. Frames never
/// attend each other.
pub fn encode_frames<T: Real>(g: &mut Graph<'_, T>, frames: &[&[f32]]) -> Result<Var> {
    let cfg = g.params().config();
    if frames.is_empty() {
        return Err(Error::Contract("encode of zero frames".into()));
    }
    let mut patches = Vec::with_capacity(frames.len());
    for f in frames {
        patches.push(patchify::<T>(f, cfg.height, cfg.width, cfg.patch_size)?);
    }
    let k = cfg.tokens_per_frame();
    let n = frames.len();
    let data: Vec<T> = patches.into_iter().flat_map(Tensor::into_data).collect();
    let patches = Tensor::new(vec![n * k, cfg.patch_size * cfg.patch_size * 3], data)?;
    let rope = rope_table::<T>(&grid_positions(cfg.grid(), n), cfg.head_dim(), cfg.rope_base)?;
    let mask = (n > 1).then(|| Mask::block_diagonal(n, k));
    let x = g.constant(patches);
    let mut x = g.linear("patch_embed", x)?;
    for i in 0..cfg.encoder_depth {
        let h = g.norm(&format!("enc.{i}.ln1"), x)?;
        let a = self_attention(g, &format!("enc.{i}.attn"), h, Some(&rope), mask.as_ref())?;
        x = g.add(x, a)?;
        let h = g.norm(&format!("enc.{i}.ln2"), x)?;
        let m = mlp(g, &format!("enc.{i}.mlp"), h)?;
        x = g.add(x, m)?;
    }
    g.norm("enc.norm", x)
}

/// Encodes a single frame outside of any training graph.
pub fn encode<T: Real>(params: &ParamStore<T>, rgb: &[f32], frame: usize) -> Result<TokenGrid<T>> {
    let mut g = Graph::new(params, false);
    let x = encode_frames(&mut g, &[rgb])?;
    TokenGrid::new(g.value(x).clone(), params.config().grid(), frame)
}

pub(crate) fn check_resolution(cfg: &ModelConfig, rgb: &[f32]) -> Result<()> {
    if rgb.len() != cfg.pixels() * 3 {
        return Err(Error::Shape(format!(
            "frame has {} rgb values, model expects {}x{}x3",
            rgb.len(),
            cfg.height,
            cfg.width
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut impl Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random::<f32>()).collect()
    }

    #[test]
    fn patchify_shapes_and_errors() {
        let t = patchify::<f64>(&vec![0.0; 8 * 8 * 3], 8, 8, 4).unwrap();
        assert_eq!(t.shape(), &[4, 48]);
        assert!(matches!(
            patchify::<f64>(&vec![0.0; 30 * 32 * 3], 30, 32, 8),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_tokens_and_one_hot_moves_one_patch() {
        let cfg = ModelConfig::default();
        let params = ParamStore::init(&cfg, 3).unwrap();
        let w = params.get("patch_embed.w").unwrap();
        let embed = |img: &[f32]| matmul(&patchify::<f64>(img, 32, 32, 8).unwrap(), w).unwrap();
        let zero = embed(&vec![0.0; 32 * 32 * 3]);
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let mut img = vec![0.0; 32 * 32 * 3];
        img[(13 * 32 + 21) * 3 + 1] = 1.0;
        let one = embed(&img);
        let changed: Vec<usize> = (0..16)
            .filter(|&r| (0..64).any(|c| one.at2(r, c) != zero.at2(r, c)))
            .collect();
        // Pixel (13, 21) lies in patch row 1, column 2.
        assert_eq!(changed, vec![6]);
    }

    #[test]
    fn rope_identity_at_origin_and_norm_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[3, 32], |_| rng.random::<f64>() - 0.5);
        let at0 = rope_rotate(&x, &[(0, 0); 3], 16, 100.0).unwrap();
        assert_eq!(at0, x);
        let r = rope_rotate(&x, &[(1, 2), (3, 0), (5, 7)], 16, 100.0).unwrap();
        for i in 0..3 {
            for h in 0..2 {
                let n = |t: &Tensor<f64>| {
                    t.data()[i * 32 + h * 16..i * 32 + h * 16 + 16]
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt()
                };
                assert!((n(&x) - n(&r)).abs() < 1e-6);
            }
        }
        assert!(matches!(rope_rotate(&x, &[(0, 0); 3], 6, 100.0), Err(Error::Config(_))));
    }

    #[test]
    fn rope_dot_depends_only_on_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Tensor::from_fn(&[1, 16], |_| rng.random::<f64>() - 0.5);
        let k = Tensor::from_fn(&[1, 16], |_| rng.random::<f64>() - 0.5);
        let dot = |a: (usize, usize), b: (usize, usize)| {
            let rq = rope_rotate(&q, &[a], 16, 100.0).unwrap();
            let rk = rope_rotate(&k, &[b], 16, 100.0).unwrap();
            rq.data().iter().zip(rk.data()).map(|(x, y)| x * y).sum::<f64>()
        };
        for (dr, dc) in [(0usize, 0usize), (1, 2), (3, 1), (0, 4)] {
            let reference = dot((dr, dc), (0, 0));
            for base in 0..4 {
                for base2 in 0..4 {
                    let d = dot((base + dr, base2 + dc), (base, base2));
                    assert!((d - reference).abs() < 1e-12, "{dr},{dc}: {d} vs {reference}");
                }
            }
        }
    }

    #[test]
    fn encode_is_deterministic_shaped_and_per_frame() {
        let cfg = ModelConfig::default();
        let params = ParamStore::init(&cfg, 4).unwrap().cast::<f32>();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_image(&mut rng, 32 * 32 * 3);
        let b = random_image(&mut rng, 32 * 32 * 3);
        let ta = encode(&params, &a, 1).unwrap();
        assert_eq!(ta.tokens.shape(), &[16, 64]);
        assert_eq!(encode(&params, &a, 1).unwrap(), ta);
        let tb = encode(&params, &b, 2).unwrap();
        let mut g = Graph::new(&params, false);
        let both = encode_frames(&mut g, &[&b, &a]).unwrap();
        let v = g.value(both);
        let diff = |rows: std::ops::Range<usize>, t: &TokenGrid<f32>| {
            v.data()[rows.start * 64..rows.end * 64]
                .iter()
                .zip(t.tokens.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max)
        };
        assert!(diff(0..16, &tb) < 1e-5);
        assert!(diff(16..32, &ta) < 1e-5);
    }

    /// Dense f64 reference of one pre-norm encoder block.
    fn reference_block(params: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let cfg = params.config();
        let (c, heads, hd) = (cfg.dim, cfg.heads, cfg.head_dim());
        let p = |n: &str| params.get(n).unwrap().data().to_vec();
        let n = x.rows();
        let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
            x.chunks(c)
                .flat_map(|r| {
                    let m = r.iter().sum::<f64>() / c as f64;
                    let v = r.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / c as f64;
                    let s = 1.0 / (v + 1e-6).sqrt();
                    r.iter().enumerate().map(move |(j, a)| (a - m) * s * g[j] + b[j]).collect::<Vec<_>>()
                })
                .collect()
        };
        let lin = |x: &[f64], w: &[f64], b: &[f64], fin: usize, fout: usize| -> Vec<f64> {
            let mut out = vec![0.0; n * fout];
            for i in 0..n {
                for o in 0..fout {
                    let mut s = b[o];
                    for k in 0..fin {
                        s += x[i * fin + k] * w[k * fout + o];
                    }
                    out[i * fout + o] = s;
                }
            }
            out
        };
        let unit = |x: &mut [f64]| {
            for ch in x.chunks_mut(hd) {
                let s = (ch.iter().map(|a| a * a).sum::<f64>() + 1e-12).sqrt();
                ch.iter_mut().for_each(|a| *a /= s);
            }
        };
        let pos = grid_positions(cfg.grid(), 1);
        let ang = rope_angles(&pos, hd, cfg.rope_base);
        let rot = |x: &mut [f64]| {
            for i in 0..n {
                for h in 0..heads {
                    for j in 0..hd / 2 {
                        let a = ang[i * hd / 2 + j];
                        let o = i * c + h * hd + 2 * j;
                        let (x0, x1) = (x[o], x[o + 1]);
                        x[o] = x0 * a.cos() - x1 * a.sin();
                        x[o + 1] = x0 * a.sin() + x1 * a.cos();
                    }
                }
            }
        };
        let xd = x.data();
        let h = ln(xd, &p("enc.0.ln1.g"), &p("enc.0.ln1.b"));
        let mut q = lin(&h, &p("enc.0.attn.q.w"), &p("enc.0.attn.q.b"), c, c);
        let mut k = lin(&h, &p("enc.0.attn.k.w"), &p("enc.0.attn.k.b"), c, c);
        let v = lin(&h, &p("enc.0.attn.v.w"), &p("enc.0.attn.v.b"), c, c);
        unit(&mut q);
        unit(&mut k);
        rot(&mut q);
        rot(&mut k);
        let tau = p("enc.0.attn.tau")[0];
        let mut att = vec![0.0; n * c];
        for hh in 0..heads {
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| tau * (0..hd).map(|d| q[i * c + hh * hd + d] * k[j * c + hh * hd + d]).sum::<f64>())
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for d in 0..hd {
                    att[i * c + hh * hd + d] = (0..n).map(|j| e[j] / z * v[j * c + hh * hd + d]).sum();
                }
            }
        }
        let o = lin(&att, &p("enc.0.attn.o.w"), &p("enc.0.attn.o.b"), c, c);
        let x1: Vec<f64> = xd.iter().zip(&o).map(|(a, b)| a + b).collect();
        let h = ln(&x1, &p("enc.0.ln2.g"), &p("enc.0.ln2.b"));
        let f = lin(&h, &p("enc.0.mlp.fc1.w"), &p("enc.0.mlp.fc1.b"), c, 4 * c);
        let f: Vec<f64> = f
            .iter()
            .map(|&a| 0.5 * a * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (a + 0.044715 * a * a * a)).tanh()))
            .collect();
        let f = lin(&f, &p("enc.0.mlp.fc2.w"), &p("enc.0.mlp.fc2.b"), 4 * c, c);
        let out: Vec<f64> = x1.iter().zip(&f).map(|(a, b)| a + b).collect();
        Tensor::new(vec![n, c], out).unwrap()
    }

    #[test]
    fn encoder_block_matches_dense_reference() {
        let cfg = ModelConfig {
            encoder_depth: 1,
            ..Default::default()
        };
        let mut params = ParamStore::init(&cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for name in ["enc.0.ln1.g", "enc.0.ln1.b", "enc.0.attn.q.b", "enc.0.mlp.fc1.b"] {
            params
                .get_mut(name)
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random::<f64>() - 0.5);
        }
        let x = Tensor::from_fn(&[16, 64], |_| rng.random::<f64>() - 0.5);
        let params32 = params.cast::<f32>();
        let mut g = Graph::new(&params32, false);
        let xv = g.constant(x.cast());
        let rope = rope_table::<f32>(&grid_positions(cfg.grid(), 1), 16, cfg.rope_base).unwrap();
        let h = g.norm("enc.0.ln1", xv).unwrap();
        let a = self_attention(&mut g, "enc.0.attn", h, Some(&rope), None).unwrap();
        let x1 = g.add(xv, a).unwrap();
        let h = g.norm("enc.0.ln2", x1).unwrap();
        let m = mlp(&mut g, "enc.0.mlp", h).unwrap();
        let y = g.add(x1, m).unwrap();
        let expect = reference_block(&params, &x);
        let got: Tensor<f64> = g.value(y).cast();
        assert!(got.max_abs_diff(&expect) < 1e-5, "{}", got.max_abs_diff(&expect));
    }

    #[test]
    fn qk_norm_bounds_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = ModelConfig::default();
        let params = ParamStore::init(&cfg, 12).unwrap();
        let tau = params.get("enc.0.attn.tau").unwrap().data()[0];
        let mut g = Graph::new(&params, false);
        let x = g.constant(Tensor::from_fn(&[16, 64], |_| 10.0 * (rng.random::<f64>() - 0.5)));
        let q = g.linear("enc.0.attn.q", x).unwrap();
        let q = g.normalize_groups(q, 16).unwrap();
        let k = g.linear("enc.0.attn.k", x).unwrap();
        let k = g.normalize_groups(k, 16).unwrap();
        let (qv, kv) = (g.value(q), g.value(k));
        for i in 0..16 {
            for j in 0..16 {
                for h in 0..4 {
                    let d: f64 = (0..16).map(|d| qv.at2(i, h * 16 + d) * kv.at2(j, h * 16 + d)).sum();
                    assert!((tau * d).abs() <= tau + 1e-12);
                }
            }
        }
    }
}
