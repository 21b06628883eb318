//! A small deterministic multimodal diffusion transformer.
//!
//! Text and image tokens share a single joint attention per head. Weights are
//! drawn once from a seeded generator and never change, so a [`Model`] is a
//! pure function `(latent, prompt, t) -> velocity` that can additionally
//! report its joint attention matrices and value tensors, or have its value
//! tensors replaced through a hook.
//!
//! Weight generation: every matrix is filled from its own `ChaCha8Rng`
//! seeded with `splitmix64(seed ^ splitmix64(layer << 8 | role))`, drawing
//! `U(-1/√d, 1/√d)` in row-major order, where `d` is the model width.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Matrix};
use crate::tensorfile::{Archive, Tensor};

/// Width of the sinusoidal timestep embedding.
pub const TIME_EMBED_DIM: usize = 16;

/// Words longer than this are split into two sub-word tokens.
const SUBWORD_SPLIT_LEN: usize = 6;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub text_dim: usize,
    pub visual_dim: usize,
    /// Latent channels per grid cell.
    pub channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 2,
            model_dim: 32,
            text_dim: 32,
            visual_dim: 32,
            channels: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.layers == 0 {
            return bad("model needs at least one layer".into());
        }
        if self.heads == 0 {
            return bad("model needs at least one head".into());
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        for (name, dim) in [
            ("model_dim", self.model_dim),
            ("text_dim", self.text_dim),
            ("visual_dim", self.visual_dim),
        ] {
            if dim < self.heads {
                return bad(format!("{name} {dim} smaller than heads {}", self.heads));
            }
        }
        if self.channels == 0 {
            return bad("latent needs at least one channel".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// A prompt word and the inclusive range of text tokens it produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordSpan {
    pub word: String,
    pub first: usize,
    pub last: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenLayout {
    pub n_text: usize,
    pub n_visual: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub word_spans: Vec<WordSpan>,
}

impl TokenLayout {
    pub fn new(
        n_text: usize,
        grid_h: usize,
        grid_w: usize,
        word_spans: Vec<WordSpan>,
    ) -> Result<Self> {
        let mut prev_last: Option<usize> = None;
        for s in &word_spans {
            if s.first > s.last || s.last >= n_text {
                return Err(Error::InvalidConfig(format!(
                    "word span `{}` [{}, {}] outside {} text tokens",
                    s.word, s.first, s.last, n_text
                )));
            }
            if prev_last.is_some_and(|p| s.first <= p) {
                return Err(Error::InvalidConfig(format!(
                    "word span `{}` overlaps its predecessor",
                    s.word
                )));
            }
            prev_last = Some(s.last);
        }
        Ok(Self {
            n_text,
            n_visual: grid_h * grid_w,
            grid_h,
            grid_w,
            word_spans,
        })
    }

    pub fn total(&self) -> usize {
        self.n_text + self.n_visual
    }
}

/// Text-side conditioning: token embeddings plus the word → token map.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTokens {
    pub tokens: Matrix,
    pub spans: Vec<WordSpan>,
}

impl PromptTokens {
    /// Embeds a whitespace-split prompt. Each word (or sub-word piece) maps to
    /// a pseudo-random vector derived from an FNV-1a hash of its text, so the
    /// same word always yields the same embedding.
    pub fn encode<S: AsRef<str>>(words: &[S], text_dim: usize) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::InvalidConfig("prompt has no words".into()));
        }
        let mut rows = Vec::new();
        let mut spans = Vec::with_capacity(words.len());
        for w in words {
            let w = w.as_ref();
            let first = rows.len();
            for piece in subword_pieces(w) {
                rows.push(embed_piece(piece, text_dim));
            }
            spans.push(WordSpan {
                word: w.to_string(),
                first,
                last: rows.len() - 1,
            });
        }
        Ok(Self {
            tokens: Matrix::from_rows(&rows),
            spans,
        })
    }

    /// The single token used for the unconditional branch.
    pub fn null(text_dim: usize) -> Self {
        Self {
            tokens: Matrix::from_rows(&[embed_piece("", text_dim)]),
            spans: Vec::new(),
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.rows()
    }
}

fn subword_pieces(word: &str) -> Vec<&str> {
    let chars = word.chars().count();
    if chars <= SUBWORD_SPLIT_LEN {
        return vec![word];
    }
    let split = word
        .char_indices()
        .nth(chars.div_ceil(2))
        .map(|(i, _)| i)
        .unwrap_or(word.len());
    vec![&word[..split], &word[split..]]
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn embed_piece(piece: &str, text_dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(piece.as_bytes()));
    (0..text_dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[derive(Clone, Copy, Debug)]
#[repr(u64)]
enum Role {
    QueryText = 0,
    KeyText,
    ValueText,
    QueryVisual,
    KeyVisual,
    ValueVisual,
    OutText,
    OutVisual,
    PatchEmbed,
    Unpatch,
    TimeText,
    TimeVisual,
}

fn seeded_matrix(seed: u64, layer: u64, role: Role, rows: usize, cols: usize, bound: f64) -> Matrix {
    let stream = splitmix64(seed ^ splitmix64((layer << 8) | role as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub q_text: Matrix,
    pub k_text: Matrix,
    pub v_text: Matrix,
    pub q_visual: Matrix,
    pub k_visual: Matrix,
    pub v_visual: Matrix,
    /// d × d_t
    pub out_text: Matrix,
    /// d × d_v
    pub out_visual: Matrix,
}

impl LayerWeights {
    fn generate(cfg: &ModelConfig, layer: usize) -> Self {
        let bound = 1.0 / (cfg.model_dim as f64).sqrt();
        let (d, dt, dv) = (cfg.model_dim, cfg.text_dim, cfg.visual_dim);
        let l = layer as u64 + 1;
        let m = |role, r, c| seeded_matrix(cfg.seed, l, role, r, c, bound);
        Self {
            q_text: m(Role::QueryText, dt, d),
            k_text: m(Role::KeyText, dt, d),
            v_text: m(Role::ValueText, dt, d),
            q_visual: m(Role::QueryVisual, dv, d),
            k_visual: m(Role::KeyVisual, dv, d),
            v_visual: m(Role::ValueVisual, dv, d),
            out_text: m(Role::OutText, d, dt),
            out_visual: m(Role::OutVisual, d, dv),
        }
    }

    /// All-zero weights of the right shapes.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, dt, dv) = (cfg.model_dim, cfg.text_dim, cfg.visual_dim);
        Self {
            q_text: Matrix::zeros(dt, d),
            k_text: Matrix::zeros(dt, d),
            v_text: Matrix::zeros(dt, d),
            q_visual: Matrix::zeros(dv, d),
            k_visual: Matrix::zeros(dv, d),
            v_visual: Matrix::zeros(dv, d),
            out_text: Matrix::zeros(d, dt),
            out_visual: Matrix::zeros(d, dv),
        }
    }

    fn named(&self) -> [(&'static str, &Matrix); 8] {
        [
            ("q_text", &self.q_text),
            ("k_text", &self.k_text),
            ("v_text", &self.v_text),
            ("q_visual", &self.q_visual),
            ("k_visual", &self.k_visual),
            ("v_visual", &self.v_visual),
            ("out_text", &self.out_text),
            ("out_visual", &self.out_visual),
        ]
    }
}

/// Latent grid, `h × w × c`, stored cell-major (`(y * w + x) * c + ch`).
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 || data.len() != h * w * c {
            return Err(Error::shape(
                "Grid::new",
                format!("{h}x{w}x{c} (non-empty)"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn filled(h: usize, w: usize, c: usize, v: f64) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![v; h * w * c],
        }
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cell(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.c..(idx + 1) * self.c]
    }

    pub fn cell_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.data[idx * self.c..(idx + 1) * self.c]
    }

    pub fn same_dims(&self, other: &Grid) -> bool {
        self.dims() == other.dims()
    }

    /// `self + scale · dir`, element-wise.
    pub fn axpy(&self, scale: f64, dir: &Grid) -> Result<Grid> {
        if !self.same_dims(dir) {
            return Err(Error::shape(
                "Grid::axpy",
                format!("{:?}", self.dims()),
                format!("{:?}", dir.dims()),
            ));
        }
        Ok(Grid {
            data: self
                .data
                .iter()
                .zip(&dir.data)
                .map(|(a, b)| a + scale * b)
                .collect(),
            ..*self
        })
    }
}

/// A latent grid tagged with its flow time.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub grid: Grid,
    pub t: f64,
}

impl LatentState {
    pub fn new(grid: Grid, t: f64) -> Self {
        Self { grid, t }
    }
}

#[derive(Clone, Debug)]
pub struct JointAttentionRecord {
    pub layer: usize,
    pub head: usize,
    /// `(N + M) × (N + M)`, text tokens first.
    pub matrix: Matrix,
    pub layout: Arc<TokenLayout>,
}

/// The four blocks of a joint attention matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadrants {
    /// text → text, N × N
    pub tt: Matrix,
    /// text → visual, N × M
    pub tv: Matrix,
    /// visual → text, M × N
    pub vt: Matrix,
    /// visual → visual, M × M
    pub vv: Matrix,
}

pub fn split_quadrants(record: &JointAttentionRecord) -> Result<Quadrants> {
    let (n, m) = (record.layout.n_text, record.layout.n_visual);
    if record.matrix.shape() != (n + m, n + m) {
        return Err(Error::shape(
            "split_quadrants",
            format!("{0}x{0}", n + m),
            format!("{}x{}", record.matrix.rows(), record.matrix.cols()),
        ));
    }
    let a = &record.matrix;
    Ok(Quadrants {
        tt: a.block(0, 0, n, n),
        tv: a.block(0, n, n, m),
        vt: a.block(n, 0, m, n),
        vv: a.block(n, n, m, m),
    })
}

/// Value projections of one layer, all heads concatenated along columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTensor {
    pub layer: usize,
    /// N × d
    pub text: Matrix,
    /// M × d
    pub visual: Matrix,
}

impl ValueTensor {
    pub fn is_finite(&self) -> bool {
        self.text.is_finite() && self.visual.is_finite()
    }
}

/// Hidden state entering / leaving a layer.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTokens {
    /// N × d_t
    pub text: Matrix,
    /// M × d_v
    pub visual: Matrix,
}

/// Replaces the value tensor of a layer; returning `None` keeps it.
pub type ValueHook<'a> = dyn Fn(&ValueTensor) -> Result<Option<ValueTensor>> + 'a;

#[derive(Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub capture_attention: bool,
    /// Report the (pre-hook) value tensors of every layer `>= from`.
    pub capture_values_from: Option<usize>,
    pub value_hook: Option<&'a ValueHook<'a>>,
}

#[derive(Debug)]
pub struct LayerOutput {
    pub tokens: JointTokens,
    pub attention: Vec<JointAttentionRecord>,
    pub values: Option<ValueTensor>,
}

/// `Softmax([Q_T ⊕ Q_V][K_T ⊕ K_V]ᵀ / √d)`, text rows first.
pub fn joint_attention(
    q_text: &Matrix,
    k_text: &Matrix,
    q_visual: &Matrix,
    k_visual: &Matrix,
    d: usize,
) -> Result<Matrix> {
    for (name, m) in [
        ("Q_T", q_text),
        ("K_T", k_text),
        ("Q_V", q_visual),
        ("K_V", k_visual),
    ] {
        if m.cols() != d {
            return Err(Error::shape("joint_attention", format!("{name} with {d} columns"), m.cols()));
        }
    }
    if q_text.rows() != k_text.rows() || q_visual.rows() != k_visual.rows() {
        return Err(Error::shape(
            "joint_attention",
            "matching query/key token counts",
            format!(
                "text {}/{}, visual {}/{}",
                q_text.rows(),
                k_text.rows(),
                q_visual.rows(),
                k_visual.rows()
            ),
        ));
    }
    let q = q_text.vstack(q_visual)?;
    let k = k_text.vstack(k_visual)?;
    let mut logits = q.matmul_transposed(&k)?;
    logits.scale(1.0 / (d as f64).sqrt());
    softmax_rows(&logits)
}

/// One joint-attention block with residual connections and no normalization.
pub fn layer_forward(
    tokens: &JointTokens,
    weights: &LayerWeights,
    layer: usize,
    heads: usize,
    layout: &Arc<TokenLayout>,
    opts: &ForwardOptions<'_>,
) -> Result<LayerOutput> {
    if tokens.text.rows() != layout.n_text || tokens.visual.rows() != layout.n_visual {
        return Err(Error::shape(
            "layer_forward",
            format!("{} text / {} visual tokens", layout.n_text, layout.n_visual),
            format!("{} / {}", tokens.text.rows(), tokens.visual.rows()),
        ));
    }
    if !tokens.text.is_finite() || !tokens.visual.is_finite() {
        return Err(Error::NumericOverflow(layer));
    }
    let q_t = tokens.text.matmul(&weights.q_text)?;
    let k_t = tokens.text.matmul(&weights.k_text)?;
    let q_v = tokens.visual.matmul(&weights.q_visual)?;
    let k_v = tokens.visual.matmul(&weights.k_visual)?;
    let mut values = ValueTensor {
        layer,
        text: tokens.text.matmul(&weights.v_text)?,
        visual: tokens.visual.matmul(&weights.v_visual)?,
    };

    let captured = match opts.capture_values_from {
        Some(from) if layer >= from => Some(values.clone()),
        _ => None,
    };
    if let Some(hook) = opts.value_hook {
        if let Some(replaced) = hook(&values)? {
            if replaced.text.shape() != values.text.shape()
                || replaced.visual.shape() != values.visual.shape()
            {
                return Err(Error::shape(
                    "value hook",
                    format!("{:?}/{:?}", values.text.shape(), values.visual.shape()),
                    format!("{:?}/{:?}", replaced.text.shape(), replaced.visual.shape()),
                ));
            }
            values = replaced;
        }
    }

    let d = q_t.cols();
    let head_dim = d / heads;
    let n = layout.n_text;
    let v_joint = values.text.vstack(&values.visual)?;
    let mut attended = Matrix::zeros(layout.total(), d);
    let mut records = Vec::new();
    for h in 0..heads {
        let c0 = h * head_dim;
        let attn = joint_attention(
            &q_t.column_block(c0, head_dim),
            &k_t.column_block(c0, head_dim),
            &q_v.column_block(c0, head_dim),
            &k_v.column_block(c0, head_dim),
            head_dim,
        )
        .map_err(|e| match e {
            Error::NonFiniteLogits => Error::NumericOverflow(layer),
            other => other,
        })?;
        let out_h = attn.matmul(&v_joint.column_block(c0, head_dim))?;
        for r in 0..layout.total() {
            attended.row_mut(r)[c0..c0 + head_dim].copy_from_slice(out_h.row(r));
        }
        if opts.capture_attention {
            records.push(JointAttentionRecord {
                layer,
                head: h,
                matrix: attn,
                layout: Arc::clone(layout),
            });
        }
    }

    let mut text = tokens.text.clone();
    text.add_assign(&attended.block(0, 0, n, d).matmul(&weights.out_text)?)?;
    let mut visual = tokens.visual.clone();
    visual.add_assign(
        &attended
            .block(n, 0, layout.n_visual, d)
            .matmul(&weights.out_visual)?,
    )?;
    if !text.is_finite() || !visual.is_finite() {
        return Err(Error::NumericOverflow(layer));
    }
    Ok(LayerOutput {
        tokens: JointTokens { text, visual },
        attention: records,
        values: captured,
    })
}

/// Sinusoidal timestep features: `[sin(a_k)…, cos(a_k)…]`, `a_k = t·10000^(-k/8)`.
/// Frequencies stay below one cycle over `t ∈ [0, 1]`, so the velocity varies
/// smoothly in `t` along a trajectory.
pub fn time_embedding(t: f64) -> [f64; TIME_EMBED_DIM] {
    let half = TIME_EMBED_DIM / 2;
    let mut e = [0.0; TIME_EMBED_DIM];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let a = t * freq;
        e[k] = a.sin();
        e[k + half] = a.cos();
    }
    e
}

/// Velocity prediction plus whatever the forward pass was asked to capture.
#[derive(Debug)]
pub struct ForwardOutput {
    pub velocity: Grid,
    pub attention: Vec<JointAttentionRecord>,
    pub values: Vec<ValueTensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<LayerWeights>,
    /// c × d_v
    patch_embed: Matrix,
    /// d_v × c
    unpatch: Matrix,
    /// 16 × d_t
    time_text: Matrix,
    /// 16 × d_v
    time_visual: Matrix,
}

impl Model {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let bound = 1.0 / (config.model_dim as f64).sqrt();
        let g = |role, r, c| seeded_matrix(config.seed, 0, role, r, c, bound);
        let layers = (0..config.layers)
            .map(|l| LayerWeights::generate(&config, l))
            .collect();
        Ok(Self {
            patch_embed: g(Role::PatchEmbed, config.channels, config.visual_dim),
            unpatch: g(Role::Unpatch, config.visual_dim, config.channels),
            time_text: g(Role::TimeText, TIME_EMBED_DIM, config.text_dim),
            time_visual: g(Role::TimeVisual, TIME_EMBED_DIM, config.visual_dim),
            layers,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerWeights] {
        &mut self.layers
    }

    pub fn null_prompt(&self) -> PromptTokens {
        PromptTokens::null(self.config.text_dim)
    }

    pub fn encode_prompt<S: AsRef<str>>(&self, words: &[S]) -> Result<PromptTokens> {
        PromptTokens::encode(words, self.config.text_dim)
    }

    fn named_weights(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("patch_embed".to_string(), &self.patch_embed),
            ("unpatch".to_string(), &self.unpatch),
            ("time_text".to_string(), &self.time_text),
            ("time_visual".to_string(), &self.time_visual),
        ];
        for (l, w) in self.layers.iter().enumerate() {
            for (name, m) in w.named() {
                out.push((format!("layer{l}.{name}"), m));
            }
        }
        out
    }

    /// FNV-1a over the bit patterns of every weight, in a fixed order.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (_, m) in self.named_weights() {
            for v in m.data() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }

    pub fn velocity(
        &self,
        z: &LatentState,
        prompt: &PromptTokens,
        t: f64,
        opts: &ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        let grid = &z.grid;
        let cfg = &self.config;
        if grid.c != cfg.channels {
            return Err(Error::shape("velocity", format!("{} channels", cfg.channels), grid.c));
        }
        if prompt.tokens.cols() != cfg.text_dim {
            return Err(Error::shape("velocity", format!("text dim {}", cfg.text_dim), prompt.tokens.cols()));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidConfig(format!("timestep {t} outside [0, 1]")));
        }
        if !grid.is_finite() {
            return Err(Error::NonFiniteLatent(0));
        }
        let layout = Arc::new(TokenLayout::new(
            prompt.n_tokens(),
            grid.h,
            grid.w,
            prompt.spans.clone(),
        )?);

        let temb = Matrix::from_rows(&[time_embedding(t)]);
        let t_text = temb.matmul(&self.time_text)?;
        let t_vis = temb.matmul(&self.time_visual)?;

        let cells = Matrix::new(grid.cells(), grid.c, grid.data.clone())?;
        let mut visual = cells.matmul(&self.patch_embed)?;
        for r in 0..visual.rows() {
            for (v, b) in visual.row_mut(r).iter_mut().zip(t_vis.row(0)) {
                *v += b;
            }
        }
        let mut text = prompt.tokens.clone();
        for r in 0..text.rows() {
            for (v, b) in text.row_mut(r).iter_mut().zip(t_text.row(0)) {
                *v += b;
            }
        }

        let mut tokens = JointTokens { text, visual };
        let mut attention = Vec::new();
        let mut values = Vec::new();
        for (l, w) in self.layers.iter().enumerate() {
            let out = layer_forward(&tokens, w, l, cfg.heads, &layout, opts)?;
            tokens = out.tokens;
            attention.extend(out.attention);
            values.extend(out.values);
        }
        let v = tokens.visual.matmul(&self.unpatch)?;
        let velocity = Grid::new(grid.h, grid.w, grid.c, v.into_data())?;
        if !velocity.is_finite() {
            return Err(Error::NumericOverflow(cfg.layers - 1));
        }
        Ok(ForwardOutput {
            velocity,
            attention,
            values,
        })
    }

    /// Dumps all weights as an archive of f32 tensors.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut archive = Archive::default();
        let c = &self.config;
        archive.insert(
            "config",
            Tensor::f64(
                vec![7],
                vec![
                    c.layers as f64,
                    c.heads as f64,
                    c.model_dim as f64,
                    c.text_dim as f64,
                    c.visual_dim as f64,
                    c.channels as f64,
                    // seeds beyond 2^53 are not representable; the checksum still pins the weights
                    c.seed as f64,
                ],
            ),
        );
        for (name, m) in self.named_weights() {
            archive.insert(&name, Tensor::f32_from_matrix(m));
        }
        archive.write_atomic(path)
    }

    /// Reads a checkpoint written by [`Model::save_checkpoint`] and overlays
    /// its weights on a freshly initialized model of the same shape.
    pub fn load_checkpoint(config: ModelConfig, path: &Path) -> Result<Self> {
        let archive = Archive::read(path)?;
        let mut model = Model::init(config)?;
        let names: Vec<String> = model.named_weights().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let t = archive.get(&name)?;
            let target = model.weight_mut(&name).expect("known weight name");
            if t.dims() != [target.rows() as u64, target.cols() as u64] {
                return Err(Error::TensorFormat(format!(
                    "checkpoint tensor `{name}` has dims {:?}",
                    t.dims()
                )));
            }
            target.data_mut().copy_from_slice(&t.to_f64());
        }
        Ok(model)
    }

    fn weight_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        match name {
            "patch_embed" => Some(&mut self.patch_embed),
            "unpatch" => Some(&mut self.unpatch),
            "time_text" => Some(&mut self.time_text),
            "time_visual" => Some(&mut self.time_visual),
            _ => {
                let rest = name.strip_prefix("layer")?;
                let (idx, field) = rest.split_once('.')?;
                let w = self.layers.get_mut(idx.parse::<usize>().ok()?)?;
                Some(match field {
                    "q_text" => &mut w.q_text,
                    "k_text" => &mut w.k_text,
                    "v_text" => &mut w.v_text,
                    "q_visual" => &mut w.q_visual,
                    "k_visual" => &mut w.k_visual,
                    "v_visual" => &mut w.v_visual,
                    "out_text" => &mut w.out_text,
                    "out_visual" => &mut w.out_visual,
                    _ => return None,
                })
            }
        }
    }
}

/// Classifier-free guidance: `v_uncond + scale · (v_cond − v_uncond)`.
pub fn cfg_combine(v_cond: &Grid, v_uncond: &Grid, scale: f64) -> Result<Grid> {
    if !v_cond.same_dims(v_uncond) {
        return Err(Error::shape(
            "cfg_combine",
            format!("{:?}", v_cond.dims()),
            format!("{:?}", v_uncond.dims()),
        ));
    }
    Ok(Grid {
        data: v_cond
            .data
            .iter()
            .zip(&v_uncond.data)
            .map(|(c, u)| u + scale * (c - u))
            .collect(),
        ..*v_cond
    })
}
