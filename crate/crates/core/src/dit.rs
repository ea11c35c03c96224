//! A deterministic toy diffusion transformer.
//!
//! Latents are `C x T_f x H x W` tensors read as `N = T_f*H*W` tokens of
//! width `C`. Each block is a single-head pre-norm residual block:
//!
//! ```text
//! h = h + Attn(LN1(h))
//! h = h + MLP(LN2(h))        MLP: C -> 4C -> C with tanh-GELU
//! ```
//!
//! The reverse process is a deterministic implicit sampler (zero covariance).

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cache::CacheEngine;
use crate::error::{Error, Result};
use crate::metrics::FlopModel;
use crate::tensor::{layer_norm, matmul, softmax_rows, Tensor};

pub const LN_EPS: f64 = 1e-5;
/// Scale applied to the random residual-branch output weights.
const BRANCH_STD: f64 = 0.1;
const EMBED_JITTER: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
        }
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn frame_tokens(&self) -> usize {
        self.height * self.width
    }

    /// Token index of `(frame, y, x)`.
    pub fn index(&self, frame: usize, y: usize, x: usize) -> usize {
        (frame * self.height + y) * self.width + x
    }

    pub fn frame_of(&self, token: usize) -> usize {
        token / self.frame_tokens()
    }
}

/// `alphas[t-1]` is the per-step retention `alpha_t`; `alpha_bars[t]` is the
/// running product with `alpha_bars[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::Construction("noise schedule needs at least one step".into()));
        }
        let mut alpha_bars = Vec::with_capacity(alphas.len() + 1);
        alpha_bars.push(1.0);
        for (i, &a) in alphas.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Construction(format!("alpha_{} = {a} outside (0, 1]", i + 1)));
            }
            let prev = alpha_bars[i];
            let next = prev * a;
            if i > 0 && next >= prev {
                return Err(Error::Construction(format!(
                    "cumulative alpha not strictly decreasing at t = {}",
                    i + 1
                )));
            }
            alpha_bars.push(next);
        }
        Ok(Self { alphas, alpha_bars })
    }

    /// Schedule with `ln(alpha_bar_t) = (t/S)^2 ln(final_alpha_bar)`: gentle
    /// near the data end, ending at `final_alpha_bar` after `steps` steps.
    pub fn quadratic(steps: usize, final_alpha_bar: f64) -> Result<Self> {
        if !(final_alpha_bar > 0.0 && final_alpha_bar < 1.0) {
            return Err(Error::Construction(format!(
                "final alpha_bar {final_alpha_bar} outside (0, 1)"
            )));
        }
        if steps == 0 {
            return Err(Error::Construction("noise schedule needs at least one step".into()));
        }
        let log_final = final_alpha_bar.ln();
        let bar = |t: usize| ((t as f64 / steps as f64).powi(2) * log_final).exp();
        let alphas = (1..=steps).map(|t| bar(t) / bar(t - 1)).collect();
        Self::new(alphas)
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t` for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Closed-form forward process `sqrt(ab_t) x0 + sqrt(1 - ab_t) z`.
    pub fn forward_diffuse(&self, x0: &LatentVideo, t: usize, z: &LatentVideo) -> Result<LatentVideo> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                step: t,
                lo: 1,
                hi: self.steps(),
            });
        }
        diffuse_with(x0, z, self.alpha_bar(t))
    }
}

pub fn diffuse_with(x0: &LatentVideo, z: &LatentVideo, alpha_bar: f64) -> Result<LatentVideo> {
    let a = alpha_bar.sqrt();
    let b = (1.0 - alpha_bar).sqrt();
    let t = x0.tensor.scale(a).add(&z.tensor.scale(b))?;
    Ok(LatentVideo { tensor: t })
}

/// A `C x T_f x H x W` latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    tensor: Tensor,
}

impl LatentVideo {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.shape().len() != 4 {
            return Err(Error::Dimension {
                op: "LatentVideo::new",
                left: tensor.shape().to_vec(),
                right: vec![0, 0, 0, 0],
            });
        }
        Ok(Self { tensor })
    }

    pub fn zeros(channels: usize, grid: Grid) -> Self {
        Self {
            tensor: Tensor::zeros(&[channels, grid.frames, grid.height, grid.width]),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn grid(&self) -> Grid {
        let s = self.tensor.shape();
        Grid::new(s[1], s[2], s[3])
    }

    /// The `H x W` plane of channel `c` in frame `f`.
    pub fn plane(&self, c: usize, f: usize) -> &[f64] {
        let g = self.grid();
        let start = (c * g.frames + f) * g.frame_tokens();
        &self.tensor.data()[start..start + g.frame_tokens()]
    }

    /// `N x C` token matrix.
    pub fn to_tokens(&self) -> Tensor {
        let c = self.channels();
        let n = self.grid().tokens();
        let src = self.tensor.data();
        let mut out = Tensor::zeros(&[n, c]);
        let dst = out.data_mut();
        for ch in 0..c {
            for tok in 0..n {
                dst[tok * c + ch] = src[ch * n + tok];
            }
        }
        out
    }

    pub fn from_tokens(tokens: &Tensor, grid: Grid) -> Result<Self> {
        let n = grid.tokens();
        if tokens.shape().len() != 2 || tokens.rows() != n {
            return Err(Error::Dimension {
                op: "LatentVideo::from_tokens",
                left: tokens.shape().to_vec(),
                right: vec![n],
            });
        }
        let c = tokens.cols();
        let mut data = vec![0.0; n * c];
        for tok in 0..n {
            for ch in 0..c {
                data[ch * n + tok] = tokens.get(tok, ch);
            }
        }
        Ok(Self {
            tensor: Tensor::new(vec![c, grid.frames, grid.height, grid.width], data)?,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.tensor.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl Norm {
    pub fn identity(c: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[c], 1.0),
            beta: Tensor::zeros(&[c]),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.gamma, &self.beta, LN_EPS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiTBlock {
    pub index: usize,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub norm1: Norm,
    pub norm2: Norm,
}

#[derive(Debug, Clone, Copy)]
enum Role {
    Query,
    Key,
    Value,
    Output,
    Mlp1,
    Mlp2,
    Embed,
    Unembed,
}

/// Generator seeded by `(seed, block, role)`; each weight matrix gets its own
/// independent stream regardless of construction order.
fn weight_rng(seed: u64, block: usize, role: Role) -> ChaCha8Rng {
    let mut z = seed
        ^ (block as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (role as u64 + 1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

fn gaussian(seed: u64, block: usize, role: Role, shape: &[usize], std: f64) -> Tensor {
    let mut rng = weight_rng(seed, block, role);
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl DiTBlock {
    pub fn random(seed: u64, index: usize, channels: usize) -> Self {
        let c = channels;
        let inv = 1.0 / (c as f64).sqrt();
        let inv4 = 1.0 / ((4 * c) as f64).sqrt();
        Self {
            index,
            w_q: gaussian(seed, index, Role::Query, &[c, c], inv),
            w_k: gaussian(seed, index, Role::Key, &[c, c], inv),
            w_v: gaussian(seed, index, Role::Value, &[c, c], inv),
            w_o: gaussian(seed, index, Role::Output, &[c, c], BRANCH_STD * inv),
            w1: gaussian(seed, index, Role::Mlp1, &[c, 4 * c], inv),
            b1: Tensor::zeros(&[4 * c]),
            w2: gaussian(seed, index, Role::Mlp2, &[4 * c, c], BRANCH_STD * inv4),
            b2: Tensor::zeros(&[c]),
            norm1: Norm::identity(c),
            norm2: Norm::identity(c),
        }
    }

    /// All projection weights and biases zero; norms are identity.
    pub fn zeros(index: usize, channels: usize) -> Self {
        let c = channels;
        Self {
            index,
            w_q: Tensor::zeros(&[c, c]),
            w_k: Tensor::zeros(&[c, c]),
            w_v: Tensor::zeros(&[c, c]),
            w_o: Tensor::zeros(&[c, c]),
            w1: Tensor::zeros(&[c, 4 * c]),
            b1: Tensor::zeros(&[4 * c]),
            w2: Tensor::zeros(&[4 * c, c]),
            b2: Tensor::zeros(&[c]),
            norm1: Norm::identity(c),
            norm2: Norm::identity(c),
        }
    }

    pub fn channels(&self) -> usize {
        self.w_q.rows()
    }

    /// Points this block's attention at tokens aligned with `focus`.
    ///
    /// A query bias along `query_dir` is introduced through the first norm's
    /// shift, the query projection gains `k * query_dir query_dir^T`, and the
    /// key projection gains `k * focus query_dir^T`. Every query then carries a
    /// common component that scores keys by their alignment with `focus`,
    /// adding roughly `strength * cos(token, focus)` to each attention logit.
    fn shape_focus(&mut self, focus: &[f64], query_dir: &[f64], strength: f64) {
        let k = strength.sqrt();
        let c = self.channels();
        for i in 0..c {
            self.norm1.beta.data_mut()[i] += query_dir[i];
            for j in 0..c {
                let q = self.w_q.get(i, j) + k * query_dir[i] * query_dir[j];
                self.w_q.set(i, j, q);
                let kk = self.w_k.get(i, j) + k * focus[i] * query_dir[j];
                self.w_k.set(i, j, kk);
            }
        }
    }

    fn scale_outputs(&mut self, gain: f64) {
        self.w_o = self.w_o.scale(gain);
        self.w2 = self.w2.scale(gain);
    }
}

fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

/// Single-head attention on already-normalized tokens. Returns the attention
/// matrix `A = softmax(Q K^T / sqrt(C))` and `A V W_o`.
pub fn block_attention(block: &DiTBlock, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let q = matmul(x, &block.w_q)?;
    let k = matmul(x, &block.w_k)?;
    let v = matmul(x, &block.w_v)?;
    let scale = 1.0 / (block.channels() as f64).sqrt();
    let logits = matmul(&q, &k.transpose()?)?.scale(scale);
    let a = softmax_rows(&logits)?;
    let out = matmul(&matmul(&a, &v)?, &block.w_o)?;
    Ok((a, out))
}

fn mlp(block: &DiTBlock, x: &Tensor) -> Result<Tensor> {
    let hidden = matmul(x, &block.w1)?.add_row_vector(&block.b1)?.map(gelu);
    matmul(&hidden, &block.w2)?.add_row_vector(&block.b2)
}

/// Full block evaluation, optionally returning the attention matrix.
pub fn block_forward_traced(block: &DiTBlock, h_in: &Tensor) -> Result<(Tensor, Tensor)> {
    let (a, attn) = block_attention(block, &block.norm1.apply(h_in)?)?;
    let h = h_in.add(&attn)?;
    let m = mlp(block, &block.norm2.apply(&h)?)?;
    Ok((h.add(&m)?, a))
}

pub fn block_forward(block: &DiTBlock, h_in: &Tensor) -> Result<Tensor> {
    Ok(block_forward_traced(block, h_in)?.0)
}

/// Fixed unit directions in channel space shared by the model's shaping step
/// and the scene generator: zero-mean cosine patterns 1, 2 and 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signature {
    Foreground,
    Background,
    Query,
}

pub fn signature(channels: usize, which: Signature) -> Vec<f64> {
    let k = match which {
        Signature::Foreground => 1.0,
        Signature::Background => 2.0,
        Signature::Query => 3.0,
    };
    let c = channels as f64;
    let v: Vec<f64> = (0..channels)
        .map(|i| (std::f64::consts::PI * k * (i as f64 + 0.5) / c).cos())
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Which blocks get focus shaping at init.
#[derive(Debug, Clone, PartialEq)]
pub struct Shaping {
    /// Blocks whose attention is pulled toward foreground-signature tokens.
    pub foreground: Vec<usize>,
    /// Blocks whose attention is pulled toward background-signature tokens.
    pub background: Vec<usize>,
    /// Logit boost for perfectly aligned tokens.
    pub focus_strength: f64,
    /// Extra output gain on foreground blocks.
    pub foreground_gain: f64,
}

impl Shaping {
    pub fn none() -> Self {
        Self {
            foreground: Vec::new(),
            background: Vec::new(),
            focus_strength: 0.0,
            foreground_gain: 1.0,
        }
    }

    /// Every third block starting at 1 is foreground-shaped, the rest
    /// background-shaped.
    pub fn default_for(blocks: usize) -> Self {
        let (foreground, background) = (0..blocks).partition(|i| i % 3 == 1);
        Self {
            foreground,
            background,
            focus_strength: 8.0,
            foreground_gain: 2.5,
        }
    }

    fn is_empty(&self) -> bool {
        self.foreground.is_empty() && self.background.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub seed: u64,
    pub blocks: usize,
    pub channels: usize,
    pub grid: Grid,
    pub shaping: Shaping,
}

impl ModelConfig {
    pub fn new(seed: u64, blocks: usize, channels: usize, grid: Grid) -> Self {
        Self {
            seed,
            blocks,
            channels,
            grid,
            shaping: Shaping::default_for(blocks),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiTModel {
    pub config: ModelConfig,
    pub blocks: Vec<DiTBlock>,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
}

/// Model with the default shaping.
pub fn init_model(seed: u64, blocks: usize, channels: usize, grid: Grid) -> Result<DiTModel> {
    DiTModel::new(ModelConfig::new(seed, blocks, channels, grid))
}

impl DiTModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let (l, c) = (config.blocks, config.channels);
        if l < 2 {
            return Err(Error::Construction(format!("need at least 2 blocks, got {l}")));
        }
        if config.grid.tokens() < 4 {
            return Err(Error::Construction(format!(
                "need at least 4 tokens, grid {:?} has {}",
                config.grid,
                config.grid.tokens()
            )));
        }
        if c == 0 {
            return Err(Error::Construction("channel width must be positive".into()));
        }
        let sh = &config.shaping;
        if !sh.is_empty() && c < 4 {
            return Err(Error::Construction("focus shaping needs at least 4 channels".into()));
        }
        for &i in sh.foreground.iter().chain(&sh.background) {
            if i >= l {
                return Err(Error::Construction(format!("shaped block {i} out of range")));
            }
        }
        if sh.foreground.iter().any(|i| sh.background.contains(i)) {
            return Err(Error::Construction("block shaped as both foreground and background".into()));
        }

        let mut blocks: Vec<DiTBlock> = (0..l).map(|i| DiTBlock::random(config.seed, i, c)).collect();
        if !sh.is_empty() {
            let fg = signature(c, Signature::Foreground);
            let bg = signature(c, Signature::Background);
            let q = signature(c, Signature::Query);
            for &i in &sh.foreground {
                blocks[i].shape_focus(&fg, &q, sh.focus_strength);
                blocks[i].scale_outputs(sh.foreground_gain);
            }
            for &i in &sh.background {
                blocks[i].shape_focus(&bg, &q, sh.focus_strength);
            }
        }

        // Both projections stay close to identity so the scene's token
        // structure survives into the residual stream and the noise estimate.
        let jitter = |role| gaussian(config.seed, l, role, &[c, c], EMBED_JITTER / (c as f64).sqrt());
        let w_in = Tensor::identity(c).add(&jitter(Role::Embed))?;
        let w_out = Tensor::identity(c).add(&jitter(Role::Unembed))?;

        Ok(Self {
            blocks,
            w_in,
            b_in: Tensor::zeros(&[c]),
            w_out,
            config,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    pub fn grid(&self) -> Grid {
        self.config.grid
    }

    pub fn embed(&self, x: &LatentVideo) -> Result<Tensor> {
        self.check_latent(x)?;
        matmul(&x.to_tokens(), &self.w_in)?.add_row_vector(&self.b_in)
    }

    pub fn unembed(&self, h: &Tensor) -> Result<LatentVideo> {
        let out = matmul(h, &self.w_out)?;
        LatentVideo::from_tokens(&out, self.grid())
    }

    fn check_latent(&self, x: &LatentVideo) -> Result<()> {
        if x.channels() != self.channels() || x.grid() != self.grid() {
            return Err(Error::Dimension {
                op: "model input",
                left: x.tensor().shape().to_vec(),
                right: vec![self.channels(), self.grid().frames, self.grid().height, self.grid().width],
            });
        }
        Ok(())
    }

    pub fn flop_model(&self) -> FlopModel {
        FlopModel::new(self.grid().tokens() as u64, self.channels() as u64, self.num_blocks() as u64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TraceFlags {
    pub attention: bool,
    pub boundaries: bool,
}

impl TraceFlags {
    pub const OFF: TraceFlags = TraceFlags {
        attention: false,
        boundaries: false,
    };
    pub const ALL: TraceFlags = TraceFlags {
        attention: true,
        boundaries: true,
    };

    pub fn any(&self) -> bool {
        self.attention || self.boundaries
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockTrace {
    pub attention: Option<Tensor>,
    pub h_in: Option<Tensor>,
    pub h_out: Option<Tensor>,
}

/// Per-step trace. `blocks[i]` is `None` when block `i` was not executed (or
/// tracing is off).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceEntry {
    pub blocks: Vec<Option<BlockTrace>>,
}

impl TraceEntry {
    pub fn is_empty(&self) -> bool {
        self.blocks.iter().all(Option::is_none)
    }
}

/// Executes blocks for one step, recording traces and counting evaluations.
pub struct BlockRunner {
    step: usize,
    flags: TraceFlags,
    entry: TraceEntry,
    executed: usize,
}

impl BlockRunner {
    pub fn new(step: usize, num_blocks: usize, flags: TraceFlags) -> Self {
        let blocks = if flags.any() { vec![None; num_blocks] } else { Vec::new() };
        Self {
            step,
            flags,
            entry: TraceEntry { blocks },
            executed: 0,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn executed(&self) -> usize {
        self.executed
    }

    pub fn run(&mut self, block: &DiTBlock, h: &Tensor) -> Result<Tensor> {
        let (out, a) = block_forward_traced(block, h)?;
        if !out.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                block: Some(block.index),
            });
        }
        self.executed += 1;
        if self.flags.any() {
            self.entry.blocks[block.index] = Some(BlockTrace {
                attention: self.flags.attention.then_some(a),
                h_in: self.flags.boundaries.then(|| h.clone()),
                h_out: self.flags.boundaries.then(|| out.clone()),
            });
        }
        Ok(out)
    }

    pub fn finish(self) -> (TraceEntry, usize) {
        (self.entry, self.executed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub noise_pred: LatentVideo,
    pub trace: TraceEntry,
    pub executed: usize,
}

/// One noise prediction. Blocks run in order; with an engine, the engine
/// decides per block whether to execute or reuse a cached delta.
pub fn model_forward(
    model: &DiTModel,
    x: &LatentVideo,
    step: usize,
    engine: Option<&mut CacheEngine>,
    flags: TraceFlags,
) -> Result<ForwardOutput> {
    let mut runner = BlockRunner::new(step, model.num_blocks(), flags);
    let mut h = model.embed(x)?;
    match engine {
        Some(engine) => h = engine.apply_step(&model.blocks, h, step, &mut runner)?,
        None => {
            for block in &model.blocks {
                h = runner.run(block, &h)?;
            }
        }
    }
    let noise_pred = model.unembed(&h)?;
    if !noise_pred.is_finite() {
        return Err(Error::NonFinite { step, block: None });
    }
    let (trace, executed) = runner.finish();
    Ok(ForwardOutput {
        noise_pred,
        trace,
        executed,
    })
}

/// Noise predictions for every step plus optional per-block traces.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepTrace {
    pub noise_preds: Vec<LatentVideo>,
    pub entries: Vec<TraceEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunStats {
    pub blocks_executed: u64,
    pub blocks_skipped: u64,
    pub per_step_executed: Vec<usize>,
    pub flops_executed: u64,
    pub flops_skipped: u64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseOutput {
    pub x0: LatentVideo,
    pub trace: StepTrace,
    pub stats: RunStats,
}

/// What an observer sees after each step.
pub struct StepView<'a> {
    pub step: usize,
    pub latent: &'a LatentVideo,
    pub noise_pred: &'a LatentVideo,
    pub trace: &'a TraceEntry,
}

/// Deterministic implicit-sampler update from diffusion time `t` to `t - 1`.
pub fn implicit_step(
    x: &LatentVideo,
    eps: &LatentVideo,
    alpha_bar_t: f64,
    alpha_bar_prev: f64,
) -> Result<LatentVideo> {
    let x0_hat = x
        .tensor
        .sub(&eps.tensor.scale((1.0 - alpha_bar_t).sqrt()))?
        .scale(1.0 / alpha_bar_t.sqrt());
    let next = x0_hat
        .scale(alpha_bar_prev.sqrt())
        .add(&eps.tensor.scale((1.0 - alpha_bar_prev).sqrt()))?;
    Ok(LatentVideo { tensor: next })
}

/// Generic reverse loop over `s = 0..S` (diffusion time `t = S - s`).
/// `predict` returns the noise estimate for the current latent.
pub fn sample<F>(x_t: &LatentVideo, sched: &NoiseSchedule, mut predict: F) -> Result<(LatentVideo, Vec<LatentVideo>)>
where
    F: FnMut(&LatentVideo, usize) -> Result<LatentVideo>,
{
    let total = sched.steps();
    let mut x = x_t.clone();
    let mut preds = Vec::with_capacity(total);
    for step in 0..total {
        let t = total - step;
        let eps = predict(&x, step)?;
        x = implicit_step(&x, &eps, sched.alpha_bar(t), sched.alpha_bar(t - 1))?;
        if !x.is_finite() {
            return Err(Error::NonFinite { step, block: None });
        }
        preds.push(eps);
    }
    Ok((x, preds))
}

/// Full denoising run, keeping every trace entry.
pub fn denoise_loop(
    model: &DiTModel,
    x_t: &LatentVideo,
    sched: &NoiseSchedule,
    engine: Option<&mut CacheEngine>,
    flags: TraceFlags,
) -> Result<DenoiseOutput> {
    denoise_inner(model, x_t, sched, engine, flags, true, &mut |_| Ok(()))
}

/// Like [`denoise_loop`] but hands each step to `observer` instead of keeping
/// per-block traces (noise predictions are still kept).
pub fn denoise_loop_observed(
    model: &DiTModel,
    x_t: &LatentVideo,
    sched: &NoiseSchedule,
    engine: Option<&mut CacheEngine>,
    flags: TraceFlags,
    observer: &mut dyn FnMut(StepView<'_>) -> Result<()>,
) -> Result<DenoiseOutput> {
    denoise_inner(model, x_t, sched, engine, flags, false, observer)
}

fn denoise_inner(
    model: &DiTModel,
    x_t: &LatentVideo,
    sched: &NoiseSchedule,
    mut engine: Option<&mut CacheEngine>,
    flags: TraceFlags,
    retain: bool,
    observer: &mut dyn FnMut(StepView<'_>) -> Result<()>,
) -> Result<DenoiseOutput> {
    let start = Instant::now();
    let total = sched.steps();
    let flops = model.flop_model();
    let l = model.num_blocks();
    let mut x = x_t.clone();
    let mut trace = StepTrace::default();
    let mut stats = RunStats::default();

    for step in 0..total {
        let t = total - step;
        let out = model_forward(model, &x, step, engine.as_deref_mut(), flags)?;
        x = implicit_step(&x, &out.noise_pred, sched.alpha_bar(t), sched.alpha_bar(t - 1))?;
        if !x.is_finite() {
            return Err(Error::NonFinite { step, block: None });
        }
        let skipped = l - out.executed;
        stats.blocks_executed += out.executed as u64;
        stats.blocks_skipped += skipped as u64;
        stats.per_step_executed.push(out.executed);
        stats.flops_executed += flops.io + flops.block * out.executed as u64;
        stats.flops_skipped += flops.block * skipped as u64;

        observer(StepView {
            step,
            latent: &x,
            noise_pred: &out.noise_pred,
            trace: &out.trace,
        })?;
        trace.noise_preds.push(out.noise_pred);
        if retain && flags.any() {
            trace.entries.push(out.trace);
        }
    }
    stats.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(DenoiseOutput { x0: x, trace, stats })
}
