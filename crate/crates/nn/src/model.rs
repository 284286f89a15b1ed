//! The Siamese change-segmentation network.
//!
//! A shared encoder runs on anchor and sample. At each attention resolution
//! the decoder skip is `concat(f1, mechanism(f1, f2))`; elsewhere it is `f1`.
//! The decoder upsamples back to input size and a two-layer head emits two
//! logits per pixel (class 1 = change).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use sdn_core::dataset::PairRecord;
use sdn_core::eval::ChangePredictor;
use sdn_core::par::{self, Execution};
use sdn_core::{BinaryMask, RgbImage};

use crate::attention;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Gca,
    Lca,
    GcaMsa,
    ConcatOnly,
}

impl Mechanism {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mechanism::Gca => "gca",
            Mechanism::Lca => "lca",
            Mechanism::GcaMsa => "gca_msa",
            Mechanism::ConcatOnly => "concat",
        }
    }
}

impl std::str::FromStr for Mechanism {
    type Err = NnError;
    fn from_str(s: &str) -> Result<Self, NnError> {
        match s {
            "gca" => Ok(Mechanism::Gca),
            "lca" => Ok(Mechanism::Lca),
            "gca_msa" => Ok(Mechanism::GcaMsa),
            "concat" | "concat_only" => Ok(Mechanism::ConcatOnly),
            other => Err(NnError::InvalidArgument(format!("unknown mechanism {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub mechanism: Mechanism,
    /// LCA window per attention resolution, same order as
    /// [`ArchConfig::attention_resolutions`].
    pub windows: Vec<usize>,
    /// Heads of the linear self-attention (`gca_msa` only).
    pub heads: usize,
    pub positional_encoding: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_size: usize,
    /// Encoder widths; stage `i` runs at `input_size / 2^(i+1)`.
    pub encoder_widths: Vec<usize>,
    /// Spatial sizes (square) whose skips use the attention mechanism.
    pub attention_resolutions: Vec<usize>,
    pub attention: AttentionConfig,
    /// Decoder widths from the coarsest stage outwards, one per stage.
    pub decoder_widths: Vec<usize>,
    pub head_width: usize,
    pub classes: usize,
    /// 3×3 convolutions per encoder and decoder stage (the first encoder
    /// stage always has at least two).
    pub block_convs: usize,
}

impl ArchConfig {
    pub fn desk(mechanism: Mechanism) -> Self {
        ArchConfig {
            input_size: 64,
            encoder_widths: vec![16, 32, 64, 128],
            attention_resolutions: vec![16, 8, 4],
            attention: AttentionConfig { mechanism, windows: vec![7, 5, 3], heads: 8, positional_encoding: true },
            decoder_widths: vec![64, 32, 16, 16],
            head_width: 8,
            classes: 2,
            block_convs: 2,
        }
    }

    /// Half-width variant of [`ArchConfig::desk`] for smoke tests.
    pub fn tiny(mechanism: Mechanism) -> Self {
        ArchConfig {
            encoder_widths: vec![8, 16, 32, 64],
            attention: AttentionConfig { heads: 4, ..Self::desk(mechanism).attention },
            decoder_widths: vec![32, 16, 8, 8],
            block_convs: 1,
            ..Self::desk(mechanism)
        }
    }

    pub fn stage_resolution(&self, stage: usize) -> usize {
        self.input_size >> (stage + 1)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::Config(m));
        let stages = self.encoder_widths.len();
        if stages == 0 || self.decoder_widths.len() != stages {
            return bad(format!("{} encoder stages but {} decoder widths", stages, self.decoder_widths.len()));
        }
        if self.block_convs == 0 {
            return bad("block_convs must be >= 1".into());
        }
        if self.classes != 2 {
            return bad(format!("class count must be 2, got {}", self.classes));
        }
        if self.input_size % (1 << stages) != 0 || self.input_size >> stages == 0 {
            return bad(format!("input size {} not divisible by 2^{stages}", self.input_size));
        }
        if self.encoder_widths.iter().chain(&self.decoder_widths).any(|&w| w == 0) || self.head_width == 0 {
            return bad("zero-width layer".into());
        }
        let res: Vec<usize> = (0..stages).map(|s| self.stage_resolution(s)).collect();
        let att = &self.attention;
        if att.mechanism == Mechanism::Lca && att.windows.len() != self.attention_resolutions.len() {
            return bad(format!("{} LCA windows for {} attention resolutions", att.windows.len(), self.attention_resolutions.len()));
        }
        if att.windows.iter().any(|w| w % 2 == 0) {
            return bad(format!("LCA windows must be odd: {:?}", att.windows));
        }
        for &r in &self.attention_resolutions {
            let Some(stage) = res.iter().position(|&x| x == r) else {
                return bad(format!("attention resolution {r} is not an encoder resolution {res:?}"));
            };
            let c = self.encoder_widths[stage];
            if att.mechanism == Mechanism::GcaMsa {
                if att.heads == 0 || c % att.heads != 0 {
                    return bad(format!("{} heads do not divide width {c}", att.heads));
                }
                if att.positional_encoding && c % 4 != 0 {
                    return bad(format!("positional encoding needs width divisible by 4, got {c}"));
                }
            }
        }
        Ok(())
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Msa {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    enc: Vec<Vec<Conv>>,
    msa: Vec<Option<Msa>>,
    dec: Vec<Vec<Conv>>,
    head1: Conv,
    head2: Conv,
}

/// Tape handles of one linear self-attention block's weights.
#[derive(Debug, Clone, Copy)]
pub struct MsaParamsRef {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Linear multi-head self-attention with residual: `x + Wo·attn(φ(Wq x'),
/// φ(Wk x'), Wv x')` where `x'` is `x` plus optional positional encoding.
pub fn linear_msa<T: Scalar>(t: &mut Tape<'_, T>, x: Var, p: &MsaParamsRef, heads: usize, pe: bool) -> Result<Var, NnError> {
    let shape = t.shape(x).to_vec();
    let xin = if pe {
        let enc = attention::positional_encoding::<T>(shape[0], shape[1], shape[2]);
        let e = t.constant(&shape, enc)?;
        t.add(x, e)?
    } else {
        x
    };
    let q = t.conv2d(xin, p.wq, 1)?;
    let q = t.phi(q);
    let k = t.conv2d(xin, p.wk, 1)?;
    let k = t.phi(k);
    let v = t.conv2d(xin, p.wv, 1)?;
    let o = t.linear_attention(q, k, v, heads)?;
    let y = t.conv2d(o, p.wo, 1)?;
    t.add(y, x)
}

/// Tape nodes at one encoder stage, exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct SkipProbe {
    pub resolution: usize,
    pub f1: Var,
    pub f2: Var,
    /// Mechanism output (or `f2` for concat-only); `None` off-attention.
    pub fused: Option<Var>,
    pub skip: Var,
}

/// A built forward graph.
pub struct Graph<'a, T: Scalar> {
    pub tape: Tape<'a, T>,
    pub logits: Var,
    pub params: Vec<Var>,
    pub skips: Vec<SkipProbe>,
}

/// Attention weights of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub resolution: usize,
    /// Query cell in feature coordinates.
    pub cell: (usize, usize),
    /// Raw softmax weights over the `resolution²` sample cells; sum to 1.
    pub weights: Vec<f64>,
    /// Weights upsampled to input size and scaled to `[0, 1]`.
    pub heatmap: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub arch: ArchConfig,
    pub params: Vec<Param<T>>,
    layout: Layout,
}

fn rgb_to_input<T: Scalar>(img: &RgbImage) -> Vec<T> {
    img.to_chw_f32().into_iter().map(|v| T::c(v as f64)).collect()
}

impl<T: Scalar> Model<T> {
    /// Builds the network with seeded He-normal initialization.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self, NnError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<Param<T>> = Vec::new();
        fn normal<T: Scalar>(rng: &mut ChaCha8Rng, params: &mut Vec<Param<T>>, name: String, shape: Vec<usize>, std: f64) -> usize {
            let n: usize = shape.iter().product();
            let dist = Normal::new(0.0, std).unwrap();
            params.push(Param { name, shape, data: (0..n).map(|_| T::c(dist.sample(rng))).collect() });
            params.len() - 1
        }
        fn conv_fn<T: Scalar>(rng: &mut ChaCha8Rng, params: &mut Vec<Param<T>>, name: &str, ci: usize, co: usize, k: usize) -> Conv {
            let w = normal(rng, params, format!("{name}.weight"), vec![co, ci, k, k], (2.0 / (ci * k * k) as f64).sqrt());
            params.push(Param { name: format!("{name}.bias"), shape: vec![co], data: vec![T::zero(); co] });
            Conv { w, b: params.len() - 1 }
        }
        let mut conv = |name: &str, ci: usize, co: usize, k: usize, params: &mut Vec<Param<T>>| conv_fn(&mut rng, params, name, ci, co, k);
        let widths = &arch.encoder_widths;
        let mut enc = Vec::new();
        for (s, &w) in widths.iter().enumerate() {
            let n = if s == 0 { arch.block_convs.max(2) } else { arch.block_convs };
            let ci = if s == 0 { 3 } else { widths[s - 1] };
            enc.push((0..n).map(|i| conv(&format!("enc{s}.conv{i}"), if i == 0 { ci } else { w }, w, 3, &mut params)).collect());
        }
        let mut msa = vec![None; widths.len()];
        let mut msa_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d73_6100);
        if arch.attention.mechanism == Mechanism::GcaMsa {
            for (s, &w) in widths.iter().enumerate() {
                if arch.attention_resolutions.contains(&arch.stage_resolution(s)) {
                    let std = (1.0 / w as f64).sqrt();
                    let mut ids = ["wq", "wk", "wv", "wo"].map(|n| normal(&mut msa_rng, &mut params, format!("msa{s}.{n}"), vec![w, w, 1, 1], std)).into_iter();
                    let mut next = || ids.next().unwrap();
                    msa[s] = Some(Msa { wq: next(), wk: next(), wv: next(), wo: next() });
                }
            }
        }
        let skip_width = |s: usize| {
            if arch.attention_resolutions.contains(&arch.stage_resolution(s)) {
                2 * widths[s]
            } else {
                widths[s]
            }
        };
        let stages = widths.len();
        let mut dec = Vec::new();
        let mut prev = 0;
        for (d, &dw) in arch.decoder_widths.iter().enumerate() {
            let s = stages - 1 - d;
            let block: Vec<Conv> = (0..arch.block_convs)
                .map(|i| {
                    let name = if i == 0 { format!("dec{d}") } else { format!("dec{d}.conv{i}") };
                    conv(&name, if i == 0 { prev + skip_width(s) } else { dw }, dw, 3, &mut params)
                })
                .collect();
            dec.push(block);
            prev = dw;
        }
        let head1 = conv("head.conv0", prev, arch.head_width, 3, &mut params);
        let head2 = conv("head.conv1", arch.head_width, arch.classes, 1, &mut params);
        Ok(Model { arch, params, layout: Layout { enc, msa, dec, head1, head2 } })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_params(arch: ArchConfig, tensors: Vec<Param<T>>) -> Result<Self, NnError> {
        let mut m = Model::new(arch, 0)?;
        if tensors.len() != m.params.len() {
            return Err(NnError::Checkpoint(format!("expected {} tensors, found {}", m.params.len(), tensors.len())));
        }
        for (slot, t) in m.params.iter_mut().zip(tensors) {
            if slot.name != t.name || slot.shape != t.shape {
                return Err(NnError::Checkpoint(format!(
                    "tensor {}{:?} does not match expected {}{:?}",
                    t.name, t.shape, slot.name, slot.shape
                )));
            }
            slot.data = t.data;
        }
        Ok(m)
    }

    fn check_input(&self, v: &[T], what: &str) -> Result<(), NnError> {
        let n = self.arch.input_size;
        if v.len() != 3 * n * n {
            return Err(NnError::Shape(format!("{what}: expected 3x{n}x{n} input, got {} values", v.len())));
        }
        Ok(())
    }

    /// Builds the forward graph for one pair of `[3, S, S]` inputs in `[0, 1]`.
    pub fn graph(&self, anchor: Vec<T>, sample: Vec<T>) -> Result<Graph<'_, T>, NnError> {
        self.check_input(&anchor, "anchor")?;
        self.check_input(&sample, "sample")?;
        let mut t = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| t.param(&p.shape, &p.data)).collect::<Result<_, _>>()?;
        let n = self.arch.input_size;
        // inputs are centred to [-0.5, 0.5]
        let centre = |v: Vec<T>| v.into_iter().map(|x| x - T::c(0.5)).collect::<Vec<T>>();
        let xa = t.constant(&[3, n, n], centre(anchor))?;
        let xs = t.constant(&[3, n, n], centre(sample))?;
        let conv = |t: &mut Tape<'_, T>, x: Var, c: Conv, stride: usize, relu: bool| -> Result<Var, NnError> {
            let y = t.conv2d(x, params[c.w], stride)?;
            let y = t.add_bias(y, params[c.b])?;
            Ok(if relu { t.relu(y) } else { y })
        };
        let encode = |t: &mut Tape<'_, T>, x: Var| -> Result<Vec<Var>, NnError> {
            let mut feats = Vec::new();
            let mut cur = x;
            for (s, convs) in self.layout.enc.iter().enumerate() {
                if s > 0 {
                    cur = t.maxpool2(cur)?;
                }
                for (i, &c) in convs.iter().enumerate() {
                    cur = conv(t, cur, c, if s == 0 && i == 0 { 2 } else { 1 }, true)?;
                }
                feats.push(cur);
            }
            Ok(feats)
        };
        let fa = encode(&mut t, xa)?;
        let fs = encode(&mut t, xs)?;
        let att = &self.arch.attention;
        let mut skips = Vec::new();
        for s in 0..fa.len() {
            let r = self.arch.stage_resolution(s);
            let (f1, f2) = (fa[s], fs[s]);
            let ai = self.arch.attention_resolutions.iter().position(|&x| x == r);
            let (fused, skip) = match ai {
                None => (None, f1),
                Some(ai) => {
                    let m = match att.mechanism {
                        Mechanism::Gca => t.gca(f1, f2)?,
                        Mechanism::Lca => t.lca(f1, f2, att.windows[ai])?,
                        Mechanism::GcaMsa => {
                            let l = self.layout.msa[s].expect("msa layer for attention stage");
                            let p = MsaParamsRef { wq: params[l.wq], wk: params[l.wk], wv: params[l.wv], wo: params[l.wo] };
                            let e1 = linear_msa(&mut t, f1, &p, att.heads, att.positional_encoding)?;
                            let e2 = linear_msa(&mut t, f2, &p, att.heads, att.positional_encoding)?;
                            t.gca(e1, e2)?
                        }
                        Mechanism::ConcatOnly => f2,
                    };
                    (Some(m), t.concat(f1, m)?)
                }
            };
            skips.push(SkipProbe { resolution: r, f1, f2, fused, skip });
        }
        let stages = skips.len();
        let mut x = skips[stages - 1].skip;
        for (d, block) in self.layout.dec.iter().enumerate() {
            if d > 0 {
                let up = t.upsample2(x)?;
                x = t.concat(up, skips[stages - 1 - d].skip)?;
            }
            for &c in block {
                x = conv(&mut t, x, c, 1, true)?;
            }
        }
        let up = t.upsample2(x)?;
        let h = conv(&mut t, up, self.layout.head1, 1, true)?;
        let logits = conv(&mut t, h, self.layout.head2, 1, false)?;
        Ok(Graph { tape: t, logits, params, skips })
    }

    /// Per-pixel logits `[2, S, S]`.
    pub fn forward(&self, anchor: &[T], sample: &[T]) -> Result<Vec<T>, NnError> {
        let g = self.graph(anchor.to_vec(), sample.to_vec())?;
        Ok(g.tape.value(g.logits).to_vec())
    }

    /// Logits for many pairs; each pair is an independent graph.
    pub fn forward_batch(&self, pairs: &[(Vec<T>, Vec<T>)], exec: Execution) -> Result<Vec<Vec<T>>, NnError> {
        par::try_map_indexed(exec, pairs.len(), |i| self.forward(&pairs[i].0, &pairs[i].1))
    }

    /// Mean cross-entropy and its gradient for every parameter.
    pub fn loss_and_grads(&self, anchor: &[T], sample: &[T], mask: &[u8]) -> Result<(T, Vec<Vec<T>>), NnError> {
        let mut g = self.graph(anchor.to_vec(), sample.to_vec())?;
        let loss = g.tape.softmax_ce(g.logits, mask)?;
        let value = g.tape.value(loss)[0];
        let mut grads = g.tape.backward(loss);
        let out = g
            .params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![T::zero(); p.data.len()]))
            .collect();
        Ok((value, out))
    }

    pub fn prepare(&self, record: &PairRecord) -> Result<(Vec<T>, Vec<T>), NnError> {
        let r = &record.rasters;
        Ok((rgb_to_input(&r.anchor_rgb), rgb_to_input(&r.sample_rgb)))
    }

    /// Argmax prediction at full input resolution.
    pub fn predict_mask(&self, anchor: &RgbImage, sample: &RgbImage) -> Result<BinaryMask, NnError> {
        let logits = self.forward(&rgb_to_input(anchor), &rgb_to_input(sample))?;
        Ok(logits_to_mask(&logits, self.arch.input_size))
    }

    /// Softmax weights of one anchor query at attention level `level`
    /// (0 = finest attention resolution). `(qx, qy)` are input pixel
    /// coordinates.
    pub fn extract_attention(
        &self,
        anchor: &RgbImage,
        sample: &RgbImage,
        level: usize,
        qx: usize,
        qy: usize,
    ) -> Result<AttentionMap, NnError> {
        let mech = self.arch.attention.mechanism;
        if mech == Mechanism::ConcatOnly {
            return Err(NnError::Unsupported("concat-only models have no attention weights".into()));
        }
        let mut res = self.arch.attention_resolutions.clone();
        res.sort_unstable_by(|a, b| b.cmp(a));
        let r = *res.get(level).ok_or_else(|| {
            NnError::InvalidArgument(format!("attention level {level} out of range (0..{})", res.len()))
        })?;
        let n = self.arch.input_size;
        if qx >= n || qy >= n {
            return Err(NnError::InvalidArgument(format!("query ({qx}, {qy}) outside {n}x{n}")));
        }
        let g = self.graph(rgb_to_input(anchor), rgb_to_input(sample))?;
        let probe = g.skips.iter().find(|s| s.resolution == r).expect("probe at attention resolution");
        let fused = probe.fused.expect("attention output at attention resolution");
        let p = g.tape.attention_weights(fused).expect("attention node");
        let cell = (qx * r / n, qy * r / n);
        let i = cell.1 * r + cell.0;
        let mut weights = vec![0.0; r * r];
        match mech {
            Mechanism::Lca => {
                let ai = self.arch.attention_resolutions.iter().position(|&x| x == r).unwrap();
                let win = self.arch.attention.windows[ai];
                let half = win / 2;
                for dy in 0..win {
                    for dx in 0..win {
                        let (y, x) = ((cell.1 + dy) as isize - half as isize, (cell.0 + dx) as isize - half as isize);
                        if y >= 0 && x >= 0 && (y as usize) < r && (x as usize) < r {
                            weights[y as usize * r + x as usize] = p[i * win * win + dy * win + dx].to_f64().unwrap();
                        }
                    }
                }
            }
            _ => {
                for (w, &v) in weights.iter_mut().zip(&p[i * r * r..(i + 1) * r * r]) {
                    *w = v.to_f64().unwrap();
                }
            }
        }
        let max = weights.iter().cloned().fold(0.0, f64::max);
        let heatmap = (0..n * n)
            .map(|k| {
                let (x, y) = (k % n, k / n);
                let v = weights[(y * r / n) * r + x * r / n];
                if max > 0.0 {
                    v / max
                } else {
                    0.0
                }
            })
            .collect();
        Ok(AttentionMap { resolution: r, cell, weights, heatmap })
    }
}

/// Class-1-wins argmax over `[2, S, S]` logits.
pub fn logits_to_mask<T: Scalar>(logits: &[T], size: usize) -> BinaryMask {
    let n = size * size;
    BinaryMask { width: size, height: size, data: (0..n).map(|i| (logits[n + i] > logits[i]) as u8).collect() }
}

impl ChangePredictor for Model<f32> {
    fn input_size(&self) -> usize {
        self.arch.input_size
    }

    fn predict(&self, record: &PairRecord) -> BinaryMask {
        let r = &record.rasters;
        self.predict_mask(&r.anchor_rgb, &r.sample_rgb).expect("input size checked by the evaluator")
    }
}
