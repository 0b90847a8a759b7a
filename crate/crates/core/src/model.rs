//! The encoder-decoder translation model: a strided CNN + stacked-LSTM
//! speech encoder, an attentional LSTM decoder with input feeding, and the
//! teacher-forced cross-entropy loss, plus the on-disk checkpoint format.

use std::fs::File;
use std::io::{BufWriter, Read as _, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Batch, Level, SOS_ID};
use crate::nn::{
    affine, conv2d_relu, dropout_mask, lstm_step, lstm_sequence, uniform_tensor, Direction, Graph,
    LstmLayerNodes, LstmLayerParams, Mode, NnError, NodeId, ParameterSet, Scalar, Tensor,
};
use crate::sub_seed;

/// On-disk checkpoint magic bytes.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"S2T1";
/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("batch has no feature frames")]
    EmptyFeatures,
    #[error("batch has no target tokens")]
    EmptyTargets,
    #[error("feature width {got} does not match configured n_mels {expected}")]
    FeatureWidth { expected: usize, got: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("checkpoint io at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint {path}: {reason}")]
    BadCheckpoint { path: String, reason: String },
}

/// Direction of the encoder LSTM stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncDirection {
    Bi,
    Uni,
}

impl std::fmt::Display for EncDirection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncDirection::Bi => "bi",
            EncDirection::Uni => "uni",
        })
    }
}

impl std::str::FromStr for EncDirection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bi" => Ok(EncDirection::Bi),
            "uni" => Ok(EncDirection::Uni),
            other => Err(format!("unknown encoder direction `{other}` (bi|uni)")),
        }
    }
}

/// Every architectural and regularization choice of the model.
///
/// `vocab_size` has no meaningful default; it is filled in from the
/// vocabulary before the model is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_mels: usize,
    pub cnn_layers: usize,
    pub cnn_filters: usize,
    pub cnn_kernel: (usize, usize),
    pub cnn_stride: (usize, usize),
    pub enc_layers: usize,
    pub enc_hidden: usize,
    pub enc_direction: EncDirection,
    pub enc_hidden_uni: usize,
    pub dec_layers: usize,
    pub dec_hidden: usize,
    pub emb_dim: usize,
    pub input_feeding: bool,
    pub decoder_level: Level,
    pub dropout: f64,
    pub l2: f64,
    pub tf_ratio: f64,
    pub beam: usize,
    pub max_batch: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_mels: 80,
            cnn_layers: 2,
            cnn_filters: 64,
            cnn_kernel: (3, 3),
            cnn_stride: (2, 2),
            enc_layers: 3,
            enc_hidden: 256,
            enc_direction: EncDirection::Bi,
            enc_hidden_uni: 300,
            dec_layers: 3,
            dec_hidden: 256,
            emb_dim: 128,
            input_feeding: true,
            decoder_level: Level::Word,
            dropout: 0.5,
            l2: 1e-4,
            tf_ratio: 0.8,
            beam: 8,
            max_batch: 64,
            vocab_size: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let sizes = [
            ("n_mels", self.n_mels),
            ("cnn_layers", self.cnn_layers),
            ("cnn_filters", self.cnn_filters),
            ("cnn_kernel.0", self.cnn_kernel.0),
            ("cnn_kernel.1", self.cnn_kernel.1),
            ("cnn_stride.0", self.cnn_stride.0),
            ("cnn_stride.1", self.cnn_stride.1),
            ("enc_layers", self.enc_layers),
            ("enc_hidden", self.enc_hidden),
            ("enc_hidden_uni", self.enc_hidden_uni),
            ("dec_layers", self.dec_layers),
            ("dec_hidden", self.dec_hidden),
            ("emb_dim", self.emb_dim),
            ("beam", self.beam),
            ("max_batch", self.max_batch),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config("dropout must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.tf_ratio) {
            return Err(ModelError::Config("tf_ratio must be in [0, 1]".into()));
        }
        if !(self.l2 >= 0.0) {
            return Err(ModelError::Config("l2 must be non-negative".into()));
        }
        Ok(())
    }

    /// Hidden size of each encoder LSTM (per direction when bidirectional).
    pub fn enc_lstm_hidden(&self) -> usize {
        match self.enc_direction {
            EncDirection::Bi => self.enc_hidden,
            EncDirection::Uni => self.enc_hidden_uni,
        }
    }

    /// Feature size of the encoder states seen by attention.
    pub fn enc_out_dim(&self) -> usize {
        match self.enc_direction {
            EncDirection::Bi => 2 * self.enc_hidden,
            EncDirection::Uni => self.enc_hidden_uni,
        }
    }

    /// Time axis length after the CNN stack.
    pub fn encoded_length(&self, frames: usize) -> usize {
        (0..self.cnn_layers).fold(frames, |t, _| t.div_ceil(self.cnn_stride.0))
    }

    /// Frequency axis length after the CNN stack.
    pub fn cnn_out_freq(&self) -> usize {
        (0..self.cnn_layers).fold(self.n_mels, |f, _| f.div_ceil(self.cnn_stride.1))
    }

    /// Per-timestep input width of the first encoder LSTM layer.
    pub fn enc_input_dim(&self) -> usize {
        self.cnn_filters * self.cnn_out_freq()
    }

    /// Input width of the first decoder LSTM layer.
    pub fn dec_input_dim(&self) -> usize {
        self.emb_dim + if self.input_feeding { self.dec_hidden } else { 0 }
    }

    fn cnn_in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            1
        } else {
            self.cnn_filters
        }
    }

    fn enc_layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.enc_input_dim()
        } else {
            self.enc_out_dim()
        }
    }

    fn dec_layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.dec_input_dim()
        } else {
            self.dec_hidden
        }
    }
}

fn enc_prefixes(cfg: &ModelConfig, layer: usize) -> Vec<String> {
    match cfg.enc_direction {
        EncDirection::Bi => vec![format!("enc.{layer}.fwd"), format!("enc.{layer}.bwd")],
        EncDirection::Uni => vec![format!("enc.{layer}")],
    }
}

/// Freshly initialized parameters: weights uniform in `[-0.1, 0.1]` from the
/// generator derived from `sub_seed(seed, "init")`, biases zero except LSTM
/// forget gates which start at 1. The insertion order (CNN layers, encoder
/// layers, embedding, decoder layers, attention, output projection) fixes the
/// tensor order in checkpoints.
pub fn init_params<F: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet<F>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "init"));
    let mut params = ParameterSet::new();
    let (kh, kw) = cfg.cnn_kernel;
    for i in 0..cfg.cnn_layers {
        let shape = [kh, kw, cfg.cnn_in_channels(i), cfg.cnn_filters];
        params.insert(&format!("cnn.{i}.w"), uniform_tensor(&shape, 0.1, &mut rng))?;
        params.insert(&format!("cnn.{i}.b"), Tensor::zeros(&[cfg.cnn_filters]))?;
    }
    for l in 0..cfg.enc_layers {
        for prefix in enc_prefixes(cfg, l) {
            LstmLayerParams::named(&prefix).register(
                &mut params,
                cfg.enc_layer_input(l),
                cfg.enc_lstm_hidden(),
                &mut rng,
            )?;
        }
    }
    params.insert(
        "dec.emb",
        uniform_tensor(&[cfg.vocab_size, cfg.emb_dim], 0.1, &mut rng),
    )?;
    for l in 0..cfg.dec_layers {
        LstmLayerParams::named(&format!("dec.{l}")).register(
            &mut params,
            cfg.dec_layer_input(l),
            cfg.dec_hidden,
            &mut rng,
        )?;
    }
    params.insert(
        "attn.w_a",
        uniform_tensor(&[cfg.dec_hidden, cfg.enc_out_dim()], 0.1, &mut rng),
    )?;
    params.insert(
        "attn.w_c",
        uniform_tensor(&[cfg.enc_out_dim() + cfg.dec_hidden, cfg.dec_hidden], 0.1, &mut rng),
    )?;
    params.insert(
        "out.w",
        uniform_tensor(&[cfg.dec_hidden, cfg.vocab_size], 0.1, &mut rng),
    )?;
    params.insert("out.b", Tensor::zeros(&[cfg.vocab_size]))?;
    Ok(params)
}

/// All model weights placed once on a tape as leaf nodes.
pub struct ModelNodes {
    cnn: Vec<(NodeId, NodeId)>,
    enc: Vec<Vec<LstmLayerNodes>>,
    emb: NodeId,
    dec: Vec<LstmLayerNodes>,
    w_a: NodeId,
    w_c: NodeId,
    out_w: NodeId,
    out_b: NodeId,
}

impl ModelNodes {
    pub fn place<F: Scalar>(
        g: &mut Graph<F>,
        params: &ParameterSet<F>,
        cfg: &ModelConfig,
    ) -> Result<Self, ModelError> {
        let mut cnn = Vec::with_capacity(cfg.cnn_layers);
        for i in 0..cfg.cnn_layers {
            let w = g.param(params, &format!("cnn.{i}.w"))?;
            let b = g.param(params, &format!("cnn.{i}.b"))?;
            cnn.push((w, b));
        }
        let mut enc = Vec::with_capacity(cfg.enc_layers);
        for l in 0..cfg.enc_layers {
            let mut dirs = Vec::new();
            for prefix in enc_prefixes(cfg, l) {
                dirs.push(LstmLayerParams::named(&prefix).nodes(g, params)?);
            }
            enc.push(dirs);
        }
        let emb = g.param(params, "dec.emb")?;
        let mut dec = Vec::with_capacity(cfg.dec_layers);
        for l in 0..cfg.dec_layers {
            dec.push(LstmLayerParams::named(&format!("dec.{l}")).nodes(g, params)?);
        }
        Ok(ModelNodes {
            cnn,
            enc,
            emb,
            dec,
            w_a: g.param(params, "attn.w_a")?,
            w_c: g.param(params, "attn.w_c")?,
            out_w: g.param(params, "out.w")?,
            out_b: g.param(params, "out.b")?,
        })
    }
}

/// Encoder output: time-major states `[T', B, enc_out_dim]` plus how many of
/// those steps are real per batch row.
pub struct EncoderStates {
    pub states: NodeId,
    pub valid_lengths: Vec<usize>,
    pub t_prime: usize,
    pub dim: usize,
}

/// Zeroes every feature of batch row `b` at time steps `>= valid[b]`.
///
/// Keeping padded positions exactly zero between CNN layers stops a kernel
/// that straddles the boundary from leaking padding artifacts into real
/// frames of later layers, which is what makes the whole network's output
/// independent of how far a batch is padded.
fn mask_beyond_valid<F: Scalar>(
    g: &mut Graph<F>,
    x: NodeId,
    valid: &[usize],
) -> Result<NodeId, ModelError> {
    let shape = g.shape(x).to_vec();
    let (b, t) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    if valid.iter().all(|&v| v >= t) {
        return Ok(x);
    }
    let mut mask = vec![F::one(); b * t * inner];
    for (bi, &v) in valid.iter().enumerate() {
        for ti in v..t {
            let base = (bi * t + ti) * inner;
            mask[base..base + inner].fill(F::zero());
        }
    }
    let m = g.constant(Tensor::from_vec(&shape, mask));
    Ok(g.mul(x, m)?)
}

/// Multiplies a `[T, B, D]` sequence by one dropout mask per (row, feature),
/// shared across all time steps, scaled by `1/(1-ratio)`.
fn seq_dropout<F: Scalar>(
    g: &mut Graph<F>,
    x: NodeId,
    ratio: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, ModelError> {
    if mode == Mode::Eval || ratio == 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    let (t, b, d) = (shape[0], shape[1], shape[2]);
    let mask2d: Tensor<F> = dropout_mask(&[b, d], ratio, rng);
    let mut tiled = Vec::with_capacity(t * b * d);
    for _ in 0..t {
        tiled.extend_from_slice(mask2d.data());
    }
    let m = g.constant(Tensor::from_vec(&[t, b, d], tiled));
    Ok(g.mul(x, m)?)
}

/// Runs the CNN + LSTM encoder over a padded feature batch.
///
/// Valid lengths shrink by `ceil(len/stride)` per CNN layer; positions past a
/// row's valid length carry no information downstream (attention masks them
/// and the LSTM freezes state there). In `Train` mode, dropout masks are
/// drawn from `sub_seed(seed, "enc-dropout")`, one mask per layer output
/// shared across time steps.
pub fn encode<F: Scalar>(
    g: &mut Graph<F>,
    batch: &Batch,
    nodes: &ModelNodes,
    cfg: &ModelConfig,
    mode: Mode,
    seed: u64,
) -> Result<EncoderStates, ModelError> {
    if batch.t_max == 0 || batch.feature_lengths.iter().all(|&l| l == 0) {
        return Err(ModelError::EmptyFeatures);
    }
    if batch.n_mels != cfg.n_mels {
        return Err(ModelError::FeatureWidth {
            expected: cfg.n_mels,
            got: batch.n_mels,
        });
    }
    let b = batch.size();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "enc-dropout"));
    let feats: Vec<F> = batch.features.iter().map(|&v| F::from_f32(v)).collect();
    let mut x = g.constant(Tensor::from_vec(&[b, batch.t_max, cfg.n_mels, 1], feats));
    let mut valid = batch.feature_lengths.clone();
    for &(w, bias) in &nodes.cnn {
        x = conv2d_relu(g, x, w, bias, cfg.cnn_stride)?;
        for v in &mut valid {
            *v = v.div_ceil(cfg.cnn_stride.0);
        }
        x = mask_beyond_valid(g, x, &valid)?;
    }
    let shape = g.shape(x).to_vec();
    let (t_prime, d) = (shape[1], shape[2] * shape[3]);
    let flat = g.reshape(x, &[b, t_prime, d])?;
    let mut seq = g.batch_to_time_major(flat)?;
    for dirs in &nodes.enc {
        let layer_out = match cfg.enc_direction {
            EncDirection::Bi => {
                let fwd = lstm_sequence(g, seq, &valid, dirs[0], Direction::Forward)?;
                let bwd = lstm_sequence(g, seq, &valid, dirs[1], Direction::Backward)?;
                g.concat(fwd, bwd)?
            }
            EncDirection::Uni => lstm_sequence(g, seq, &valid, dirs[0], Direction::Forward)?,
        };
        seq = seq_dropout(g, layer_out, cfg.dropout, mode, &mut rng)?;
    }
    Ok(EncoderStates {
        states: seq,
        valid_lengths: valid,
        t_prime,
        dim: cfg.enc_out_dim(),
    })
}

/// One attention application: bilinear scores, masked softmax weights, the
/// weighted context, and the attentional vector `h~ = tanh(W_c [ctx; h])`.
pub struct Attention {
    pub context: NodeId,
    pub weights: NodeId,
    pub h_tilde: NodeId,
}

pub fn attend<F: Scalar>(
    g: &mut Graph<F>,
    query: NodeId,
    enc: &EncoderStates,
    nodes: &ModelNodes,
) -> Result<Attention, ModelError> {
    let qa = g.matmul(query, nodes.w_a)?;
    let scores = g.attn_scores(qa, enc.states)?;
    let weights = g.masked_softmax(scores, &enc.valid_lengths)?;
    let context = g.attn_context(weights, enc.states)?;
    let cat = g.concat(context, query)?;
    let pre = g.matmul(cat, nodes.w_c)?;
    let h_tilde = g.tanh(pre);
    Ok(Attention {
        context,
        weights,
        h_tilde,
    })
}

/// Recurrent decoder state: one (hidden, cell) pair per layer plus the
/// previous step's attentional vector for input feeding.
#[derive(Clone)]
pub struct DecoderState {
    pub layers: Vec<(NodeId, NodeId)>,
    pub h_tilde: NodeId,
}

/// All-zero decoder state for a batch of the given size.
pub fn init_decoder_state<F: Scalar>(
    g: &mut Graph<F>,
    cfg: &ModelConfig,
    batch: usize,
) -> DecoderState {
    let layers = (0..cfg.dec_layers)
        .map(|_| {
            let h = g.constant(Tensor::zeros(&[batch, cfg.dec_hidden]));
            let c = g.constant(Tensor::zeros(&[batch, cfg.dec_hidden]));
            (h, c)
        })
        .collect();
    let h_tilde = g.constant(Tensor::zeros(&[batch, cfg.dec_hidden]));
    DecoderState { layers, h_tilde }
}

/// Per-sequence dropout masks for the decoder, reused at every step.
pub struct DecoderDropout {
    emb: Option<NodeId>,
    layers: Vec<Option<NodeId>>,
}

impl DecoderDropout {
    /// Masks drawn in a fixed order (embedding, then each layer) so the
    /// pattern is a pure function of the seed.
    pub fn new<F: Scalar>(
        g: &mut Graph<F>,
        cfg: &ModelConfig,
        batch: usize,
        mode: Mode,
        seed: u64,
    ) -> Self {
        if mode == Mode::Eval || cfg.dropout == 0.0 {
            return DecoderDropout {
                emb: None,
                layers: vec![None; cfg.dec_layers],
            };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb_mask: Tensor<F> = dropout_mask(&[batch, cfg.emb_dim], cfg.dropout, &mut rng);
        let emb = Some(g.constant(emb_mask));
        let layers = (0..cfg.dec_layers)
            .map(|_| {
                let m: Tensor<F> = dropout_mask(&[batch, cfg.dec_hidden], cfg.dropout, &mut rng);
                Some(g.constant(m))
            })
            .collect();
        DecoderDropout { emb, layers }
    }

    fn none(cfg: &ModelConfig) -> Self {
        DecoderDropout {
            emb: None,
            layers: vec![None; cfg.dec_layers],
        }
    }
}

/// Output of one decoder step.
pub struct StepOutput {
    pub logits: NodeId,
    pub state: DecoderState,
    pub attention: Attention,
}

/// Advances the decoder by one token: embed the previous tokens, run the
/// LSTM stack (first layer fed `[embedding; h~_prev]` under input feeding),
/// attend from the top hidden state, and project `h~` to vocabulary logits.
pub fn decode_step<F: Scalar>(
    g: &mut Graph<F>,
    prev_ids: &[usize],
    state: &DecoderState,
    enc: &EncoderStates,
    nodes: &ModelNodes,
    cfg: &ModelConfig,
    drop: Option<&DecoderDropout>,
) -> Result<StepOutput, ModelError> {
    for &id in prev_ids {
        if id >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
    }
    let fallback = DecoderDropout::none(cfg);
    let drop = drop.unwrap_or(&fallback);
    let mut x = g.embed(nodes.emb, prev_ids)?;
    if let Some(m) = drop.emb {
        x = g.mul(x, m)?;
    }
    if cfg.input_feeding {
        x = g.concat(x, state.h_tilde)?;
    }
    let mut layers = Vec::with_capacity(cfg.dec_layers);
    for (l, &(h, c)) in state.layers.iter().enumerate() {
        let (h_new, c_new) = lstm_step(g, x, h, c, nodes.dec[l])?;
        layers.push((h_new, c_new));
        x = h_new;
        if let Some(m) = drop.layers[l] {
            x = g.mul(x, m)?;
        }
    }
    let attention = attend(g, x, enc, nodes)?;
    let logits = affine(g, attention.h_tilde, nodes.out_w, nodes.out_b)?;
    Ok(StepOutput {
        logits,
        state: DecoderState {
            layers,
            h_tilde: attention.h_tilde,
        },
        attention,
    })
}

/// Builds the teacher-forced training loss for one batch and returns the
/// scalar loss node (masked mean cross-entropy over real target positions).
///
/// Step 0 is fed SOS; step `t` is fed the gold token `t-1` when the per-step
/// coin (from `sub_seed(seed, "tf")`) lands below `tf_ratio`, otherwise the
/// model's own argmax from the previous step. Dropout masks come from
/// `sub_seed(seed, "dec-dropout")` and `sub_seed(seed, "enc-dropout")`.
pub fn forward_loss<F: Scalar>(
    g: &mut Graph<F>,
    batch: &Batch,
    params: &ParameterSet<F>,
    cfg: &ModelConfig,
    mode: Mode,
    seed: u64,
) -> Result<NodeId, ModelError> {
    cfg.validate()?;
    let b = batch.size();
    let l_max = batch.l_max;
    if l_max == 0 || batch.target_lengths.iter().all(|&l| l == 0) {
        return Err(ModelError::EmptyTargets);
    }
    let nodes = ModelNodes::place(g, params, cfg)?;
    let enc = encode(g, batch, &nodes, cfg, mode, seed)?;
    let masks = DecoderDropout::new(g, cfg, b, mode, sub_seed(seed, "dec-dropout"));
    let mut tf_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "tf"));
    let use_gold: Vec<bool> = (0..l_max)
        .map(|t| t == 0 || tf_rng.random::<f64>() < cfg.tf_ratio)
        .collect();

    let mut state = init_decoder_state(g, cfg, b);
    let mut prev = vec![SOS_ID; b];
    let mut step_logits = Vec::with_capacity(l_max);
    for t in 0..l_max {
        let out = decode_step(g, &prev, &state, &enc, &nodes, cfg, Some(&masks))?;
        state = out.state;
        if t + 1 < l_max {
            prev = if use_gold[t + 1] {
                (0..b).map(|bi| batch.targets[bi * l_max + t]).collect()
            } else {
                g.value(out.logits).argmax_rows()
            };
        }
        step_logits.push(out.logits);
    }
    let stacked = g.stack_steps(&step_logits)?;
    let flat = g.reshape(stacked, &[l_max * b, cfg.vocab_size])?;
    let mut targets = vec![0usize; l_max * b];
    let mut mask = vec![false; l_max * b];
    for t in 0..l_max {
        for bi in 0..b {
            targets[t * b + bi] = batch.targets[bi * l_max + t];
            mask[t * b + bi] = t < batch.target_lengths[bi];
        }
    }
    Ok(g.softmax_xent(flat, &targets, &mask)?)
}

/// Fraction of real target positions whose argmax prediction equals the gold
/// token under pure teacher forcing (evaluation mode, no dropout).
pub fn teacher_forced_accuracy(
    batch: &Batch,
    params: &ParameterSet<f32>,
    cfg: &ModelConfig,
) -> Result<f64, ModelError> {
    let b = batch.size();
    let l_max = batch.l_max;
    if l_max == 0 || batch.target_lengths.iter().all(|&l| l == 0) {
        return Err(ModelError::EmptyTargets);
    }
    let mut g = Graph::new();
    let nodes = ModelNodes::place(&mut g, params, cfg)?;
    let enc = encode(&mut g, batch, &nodes, cfg, Mode::Eval, 0)?;
    let mut state = init_decoder_state(&mut g, cfg, b);
    let mut prev = vec![SOS_ID; b];
    let (mut correct, mut total) = (0usize, 0usize);
    for t in 0..l_max {
        let out = decode_step(&mut g, &prev, &state, &enc, &nodes, cfg, None)?;
        state = out.state;
        let pred = g.value(out.logits).argmax_rows();
        for bi in 0..b {
            if t < batch.target_lengths[bi] {
                total += 1;
                if pred[bi] == batch.targets[bi * l_max + t] {
                    correct += 1;
                }
            }
        }
        prev = (0..b).map(|bi| batch.targets[bi * l_max + t]).collect();
    }
    Ok(correct as f64 / total as f64)
}

/// A trained model on disk: config, a pointer to the vocabulary it was
/// trained with, the parameters, and any extra state (optimizer moments,
/// training progress) stored as `opt.`-prefixed tensors.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab_file: String,
    pub params: ParameterSet<f32>,
    pub extras: Vec<(String, Tensor<f32>)>,
}

fn io_err(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn bad(path: &Path, reason: impl Into<String>) -> ModelError {
    ModelError::BadCheckpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn write_tensor(w: &mut impl std::io::Write, name: &str, t: &Tensor<f32>) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Serializes a checkpoint: magic, version, config JSON, vocabulary file
/// reference, then every named tensor as
/// `(name_len, name, rank, dims as u32 LE, f32 LE values)`.
/// Parameters keep their insertion order; extras follow and must be
/// namespaced under `opt.`.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), ModelError> {
    for (name, _) in &ck.extras {
        if !name.starts_with("opt.") {
            return Err(ModelError::Config(format!(
                "extra checkpoint tensor `{name}` must be namespaced under opt."
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    let inner = (|| -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let cfg = serde_json::to_vec(&ck.config).expect("config serializes");
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&(ck.vocab_file.len() as u32).to_le_bytes())?;
        w.write_all(ck.vocab_file.as_bytes())?;
        let count = ck.params.len() + ck.extras.len();
        w.write_all(&(count as u32).to_le_bytes())?;
        for entry in ck.params.iter() {
            write_tensor(&mut w, &entry.name, &entry.value)?;
        }
        for (name, t) in &ck.extras {
            write_tensor(&mut w, name, t)?;
        }
        w.flush()
    })();
    inner.map_err(|e| io_err(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let slice = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(slice)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Reads a checkpoint written by [`save_checkpoint`], restoring parameters in
/// their stored order; any malformed or truncated content is rejected whole.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| io_err(path, e))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    let eof = || bad(path, "unexpected end of file");
    let magic = c.take(4).ok_or_else(eof)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad(path, "bad magic (not a checkpoint)"));
    }
    let version = c.u32().ok_or_else(eof)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(
            path,
            format!("unsupported version {version} (expected {CHECKPOINT_VERSION})"),
        ));
    }
    let cfg_len = c.u32().ok_or_else(eof)? as usize;
    let cfg_bytes = c.take(cfg_len).ok_or_else(eof)?;
    let config: ModelConfig = serde_json::from_slice(cfg_bytes)
        .map_err(|e| bad(path, format!("config: {e}")))?;
    let vocab_len = c.u32().ok_or_else(eof)? as usize;
    let vocab_bytes = c.take(vocab_len).ok_or_else(eof)?;
    let vocab_file = std::str::from_utf8(vocab_bytes)
        .map_err(|_| bad(path, "vocabulary reference is not UTF-8"))?
        .to_string();
    let count = c.u32().ok_or_else(eof)? as usize;
    let mut params = ParameterSet::new();
    let mut extras = Vec::new();
    for _ in 0..count {
        let name_len = c.u32().ok_or_else(eof)? as usize;
        let name = std::str::from_utf8(c.take(name_len).ok_or_else(eof)?)
            .map_err(|_| bad(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = c.u32().ok_or_else(eof)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32().ok_or_else(eof)? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = c.take(n * 4).ok_or_else(eof)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let tensor = Tensor::from_vec(&dims, data);
        if name.starts_with("opt.") {
            extras.push((name, tensor));
        } else {
            params
                .insert(&name, tensor)
                .map_err(|_| bad(path, format!("duplicate tensor `{name}`")))?;
        }
    }
    if c.pos != buf.len() {
        return Err(bad(path, "trailing data after last tensor"));
    }
    Ok(Checkpoint {
        config,
        vocab_file,
        params,
        extras,
    })
}
