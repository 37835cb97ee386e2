// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-LN transformer in three families, built on the [`Tape`].
//!
//! Block: `x + Attn(LN₁ x)` (then `+ CrossAttn(LN_c x, memory)` in the
//! encoder-decoder's decoder), then `x + W₂·h + b₂` with
//! `h = GELU(W₁·LN₂ x + b₁)`. Patching, scaling and shifting act on `h`.
//! The head is an optional final layer norm followed by the unembedding.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::tape::{Tape, Var};
use super::tensor::{log_softmax, Mat};
use super::trace::{FfnShift, LayerRecord, LayerTrace, PatchSpec, ScaleSpec};
use super::vocab::Vocabulary;
use crate::arch::Arch;
use crate::error::{Result, XcError};

/// Probabilities below this are reported as underflowed.
pub const PROB_FLOOR: f64 = 1e-300;

/// One forward pass worth of token ids.
///
/// `source` feeds the primary stack. `target` is the decoder input of the
/// encoder-decoder family (empty otherwise). `slots` are the rows of the
/// readout sequence (`target` for encoder-decoder, `source` otherwise)
/// whose logits are returned.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelInput {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    pub slots: Vec<usize>,
}

/// Which layer feeds the output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Readout {
    #[default]
    Final,
    /// LogitLens (encoder, decoder) or DecoderLens (encoder-decoder) at a layer.
    Layer(usize),
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions<'a> {
    pub readout: Readout,
    pub patch: Option<&'a PatchSpec>,
    pub scale: Option<&'a ScaleSpec>,
    pub shift: Option<FfnShift>,
    pub trace: bool,
    /// Also read out every layer of the primary stack.
    pub lens_all: bool,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[slots × V]` logits of the requested readout.
    pub logits: Mat,
    /// Per-layer logits when `lens_all` was set.
    pub lens: Vec<Mat>,
    pub trace: Option<LayerTrace>,
}

impl ForwardOutput {
    pub fn log_probs(&self) -> Mat {
        log_probs(&self.logits)
    }
}

/// Row-wise log-softmax.
pub fn log_probs(logits: &Mat) -> Mat {
    let mut out = Mat::zeros(logits.rows, logits.cols);
    for r in 0..logits.rows {
        out.row_mut(r).copy_from_slice(&log_softmax(logits.row(r)));
    }
    out
}

/// Quantity differentiated by [`Model::grad_wrt_ffn`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    /// Mean softmax probability of the targets.
    #[default]
    Probability,
    /// Mean raw logit of the targets.
    Logit,
}

/// Gradient of an [`Objective`] w.r.t. the (scaled) FFN activations of
/// every primary-stack layer.
#[derive(Debug, Clone)]
pub struct FfnGradients {
    pub value: f64,
    /// Activations as fed to the down-projection, `[seq × d_ff]` per layer.
    pub activations: Vec<Mat>,
    pub grads: Vec<Mat>,
    /// Some target probability fell below [`PROB_FLOOR`].
    pub underflow: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct AttnIds {
    ln_g: usize,
    ln_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct BlockIds {
    attn: AttnIds,
    cross: Option<AttnIds>,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Parameter ids, names and shapes in storage order.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    blocks: Vec<BlockIds>,
    enc_norm: Option<(usize, usize)>,
    dec_blocks: Vec<BlockIds>,
    final_norm: Option<(usize, usize)>,
    unembed: Option<usize>,
    out_bias: usize,
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push((rows, cols));
        self.inits.push(init);
        self.names.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        let std = 1.0 / (d as f64).sqrt();
        AttnIds {
            ln_g: self.add(format!("{prefix}.ln.gamma"), 1, d, Init::Ones),
            ln_b: self.add(format!("{prefix}.ln.beta"), 1, d, Init::Zeros),
            wq: self.add(format!("{prefix}.wq"), d, d, Init::Normal(std)),
            wk: self.add(format!("{prefix}.wk"), d, d, Init::Normal(std)),
            wv: self.add(format!("{prefix}.wv"), d, d, Init::Normal(std)),
            wo: self.add(format!("{prefix}.wo"), d, d, Init::Normal(std)),
        }
    }

    fn block(&mut self, prefix: &str, c: &ModelConfig, cross: bool) -> BlockIds {
        let (d, f) = (c.d_model, c.d_ff);
        let attn = self.attn(&format!("{prefix}.self_attn"), d);
        let cross = cross.then(|| self.attn(&format!("{prefix}.cross_attn"), d));
        BlockIds {
            attn,
            cross,
            ln2_g: self.add(format!("{prefix}.ffn.ln.gamma"), 1, d, Init::Ones),
            ln2_b: self.add(format!("{prefix}.ffn.ln.beta"), 1, d, Init::Zeros),
            w1: self.add(format!("{prefix}.ffn.w1"), d, f, Init::Normal(1.0 / (d as f64).sqrt())),
            b1: self.add(format!("{prefix}.ffn.b1"), 1, f, Init::Normal(0.1)),
            w2: self.add(format!("{prefix}.ffn.w2"), f, d, Init::Normal(1.0 / (f as f64).sqrt())),
            b2: self.add(format!("{prefix}.ffn.b2"), 1, d, Init::Zeros),
        }
    }
}

impl Layout {
    fn new(c: &ModelConfig, vocab: usize) -> (Self, Vec<Init>) {
        let d = c.d_model;
        let mut b = LayoutBuilder {
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
        };
        let tok_emb = b.add("tok_emb".into(), vocab, d, Init::Normal(1.0));
        let pos_emb = b.add("pos_emb".into(), c.max_seq_len, d, Init::Normal(0.5));
        let stack = if c.arch == Arch::EncoderDecoder { "encoder" } else { "layers" };
        let blocks = (0..c.n_layers)
            .map(|l| b.block(&format!("{stack}.{l}"), c, false))
            .collect();
        let (enc_norm, dec_blocks) = if c.arch == Arch::EncoderDecoder {
            let norm = (
                b.add("encoder.norm.gamma".into(), 1, d, Init::Ones),
                b.add("encoder.norm.beta".into(), 1, d, Init::Zeros),
            );
            let dec = (0..c.n_layers)
                .map(|l| b.block(&format!("decoder.{l}"), c, true))
                .collect();
            (Some(norm), dec)
        } else {
            (None, Vec::new())
        };
        let final_norm = c.final_norm.then(|| {
            (
                b.add("final_norm.gamma".into(), 1, d, Init::Ones),
                b.add("final_norm.beta".into(), 1, d, Init::Zeros),
            )
        });
        let unembed = (!c.tie_unembedding)
            .then(|| b.add("unembed".into(), d, vocab, Init::Normal(1.0 / (d as f64).sqrt())));
        let out_bias = b.add("out_bias".into(), 1, vocab, Init::Zeros);
        let layout = Layout {
            tok_emb,
            pos_emb,
            blocks,
            enc_norm,
            dec_blocks,
            final_norm,
            unembed,
            out_bias,
            names: b.names,
            shapes: b.shapes,
        };
        (layout, b.inits)
    }
}

/// Hooks applied to the primary stack's FFN activations.
struct Hooks<'a> {
    patch: Option<(&'a PatchSpec, Vec<(usize, usize)>)>,
    scale: Option<&'a ScaleSpec>,
    shift: Option<FfnShift>,
    watch: bool,
}

struct StackVars {
    hidden: Vec<Var>,
    ffn: Vec<Var>,
}

struct Graph {
    logits: Var,
    lens: Vec<Var>,
    embeddings: Var,
    primary: StackVars,
    decoder: Option<StackVars>,
}

/// Desk-scale multilingual language model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocabulary,
    layout: Layout,
    params: Vec<Mat>,
    /// Input-side embedding aliases: token → token whose row it reads.
    aliases: BTreeMap<u32, u32>,
}

impl Model {
    /// Seeded initialization; identical `(config, vocab)` give identical models.
    pub fn init(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let (layout, inits) = Layout::new(&config, vocab.len());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = layout
            .shapes
            .iter()
            .zip(inits)
            .map(|(&(r, c), init)| match init {
                Init::Ones => Mat::filled(r, c, 1.0),
                Init::Zeros => Mat::zeros(r, c),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    Mat::from_vec(r, c, (0..r * c).map(|_| dist.sample(&mut rng)).collect())
                }
            })
            .collect();
        Ok(Self {
            config,
            vocab,
            layout,
            params,
            aliases: BTreeMap::new(),
        })
    }

    /// Rebuild from stored parameters (see the checkpoint module).
    pub fn from_parts(
        config: ModelConfig,
        vocab: Vocabulary,
        named: Vec<(String, Mat)>,
        aliases: BTreeMap<u32, u32>,
    ) -> Result<Self> {
        config.validate()?;
        let (layout, _) = Layout::new(&config, vocab.len());
        if named.len() != layout.names.len() {
            return Err(XcError::Config(format!(
                "expected {} parameter blocks, found {}",
                layout.names.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, m), (want, &shape)) in named.into_iter().zip(layout.names.iter().zip(&layout.shapes)) {
            if &name != want || m.shape() != shape {
                return Err(XcError::Config(format!(
                    "parameter `{name}` {:?} does not match `{want}` {shape:?}",
                    m.shape()
                )));
            }
            params.push(m);
        }
        let mut model = Self {
            config,
            vocab,
            layout,
            params,
            aliases: BTreeMap::new(),
        };
        model.set_aliases(aliases)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn arch(&self) -> Arch {
        self.config.arch
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn d_ff(&self) -> usize {
        self.config.d_ff
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn params(&self) -> &[Mat] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Mat] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.layout.names
    }

    pub fn param_id(&self, name: &str) -> Option<usize> {
        self.layout.names.iter().position(|n| n == name)
    }

    pub fn param(&self, name: &str) -> Option<&Mat> {
        self.param_id(name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.param_id(name).map(|i| &mut self.params[i])
    }

    pub fn aliases(&self) -> &BTreeMap<u32, u32> {
        &self.aliases
    }

    /// Make each key token read the input embedding of its value token.
    pub fn set_aliases(&mut self, aliases: BTreeMap<u32, u32>) -> Result<()> {
        let v = self.vocab.len() as u32;
        for (&a, &b) in &aliases {
            if a >= v || b >= v {
                return Err(XcError::Argument(format!("alias {a} -> {b} outside vocabulary")));
            }
            if aliases.contains_key(&b) && aliases[&b] != b {
                return Err(XcError::Argument(format!("alias chain through token {b}")));
            }
        }
        self.aliases = aliases;
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32], what: &str) -> Result<()> {
        if tokens.len() > self.config.max_seq_len {
            return Err(XcError::Argument(format!(
                "{what} has {} tokens, model supports {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.vocab.len()) {
            return Err(XcError::Argument(format!("token id {t} outside vocabulary")));
        }
        Ok(())
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        if input.source.is_empty() {
            return Err(XcError::Argument("empty input".into()));
        }
        self.check_tokens(&input.source, "source")?;
        let readout_len = if self.arch() == Arch::EncoderDecoder {
            if input.target.is_empty() {
                return Err(XcError::Argument("encoder-decoder input needs decoder tokens".into()));
            }
            self.check_tokens(&input.target, "target")?;
            input.target.len()
        } else {
            input.source.len()
        };
        if input.slots.is_empty() {
            return Err(XcError::Argument("no readout slots".into()));
        }
        if let Some(s) = input.slots.iter().find(|&&s| s >= readout_len) {
            return Err(XcError::Argument(format!(
                "readout slot {s} outside a {readout_len}-token sequence"
            )));
        }
        Ok(())
    }

    fn readout_layer(&self, readout: Readout) -> Result<usize> {
        match readout {
            Readout::Final => Ok(self.n_layers() - 1),
            Readout::Layer(l) if l < self.n_layers() => Ok(l),
            Readout::Layer(l) => Err(XcError::Argument(format!(
                "layer {l} out of range for a {}-layer model",
                self.n_layers()
            ))),
        }
    }

    fn embed(&self, tape: &mut Tape, tokens: &[u32]) -> Var {
        let ids = tokens
            .iter()
            .map(|t| *self.aliases.get(t).unwrap_or(t) as usize)
            .collect();
        let table = tape.param(self.layout.tok_emb);
        let tok = tape.gather(table, ids);
        let pos_table = tape.param(self.layout.pos_emb);
        let pos = tape.gather(pos_table, (0..tokens.len()).collect());
        tape.add(tok, pos)
    }

    fn attention(&self, tape: &mut Tape, query: Var, memory: Option<Var>, ids: &AttnIds, causal: bool) -> Var {
        let g = tape.param(ids.ln_g);
        let b = tape.param(ids.ln_b);
        let xq = tape.layer_norm(query, g, b);
        let xkv = memory.unwrap_or(xq);
        let (wq, wk, wv, wo) = (tape.param(ids.wq), tape.param(ids.wk), tape.param(ids.wv), tape.param(ids.wo));
        let q = tape.matmul(xq, wq);
        let k = tape.matmul(xkv, wk);
        let v = tape.matmul(xkv, wv);
        let hd = self.config.head_dim();
        let inv = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let (qh, kh, vh) = if self.config.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * hd, hd),
                    tape.slice_cols(k, h * hd, hd),
                    tape.slice_cols(v, h * hd, hd),
                )
            };
            let s = tape.matmul_t(qh, kh);
            let s = tape.scale(s, inv);
            let p = tape.softmax_rows(s, causal);
            heads.push(tape.matmul(p, vh));
        }
        let ctx = if heads.len() == 1 { heads[0] } else { tape.concat_cols(heads) };
        tape.matmul(ctx, wo)
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        tape: &mut Tape,
        x: Var,
        ids: &BlockIds,
        causal: bool,
        memory: Option<Var>,
        layer: usize,
        hooks: Option<&Hooks>,
    ) -> Result<(Var, Var)> {
        let a = self.attention(tape, x, None, &ids.attn, causal);
        let mut x = tape.add(x, a);
        if let Some(cross) = &ids.cross {
            let c = self.attention(tape, x, memory, cross, false);
            x = tape.add(x, c);
        }
        let (g, b) = (tape.param(ids.ln2_g), tape.param(ids.ln2_b));
        let n = tape.layer_norm(x, g, b);
        let (w1, b1) = (tape.param(ids.w1), tape.param(ids.b1));
        let pre = tape.matmul(n, w1);
        let pre = tape.add_row(pre, b1);
        let mut h = tape.gelu(pre);
        if let Some(hooks) = hooks {
            let rows = tape.value(h).rows;
            if let Some((spec, pairs)) = &hooks.patch {
                if spec.layers.contains(&layer) {
                    let (values, replaced) = spec.layer_values(layer, pairs, rows)?;
                    if values.cols != self.config.d_ff {
                        return Err(XcError::Patch(format!(
                            "donor layer {layer} has {} neurons, model has {}",
                            values.cols, self.config.d_ff
                        )));
                    }
                    h = tape.patch(h, &values, replaced);
                }
            }
            if let Some(scale) = hooks.scale {
                if let Some(f) = scale.layer_matrix(layer, rows, self.config.d_ff)? {
                    h = tape.mul_const(h, f);
                }
            }
            if let Some(s) = hooks.shift.filter(|s| s.layer == layer) {
                if s.position >= rows || s.neuron >= self.config.d_ff {
                    return Err(XcError::Argument("shift outside the activation grid".into()));
                }
                let mut delta = Mat::zeros(rows, self.config.d_ff);
                delta.set(s.position, s.neuron, s.delta);
                let d = tape.input(delta);
                h = tape.add(h, d);
            }
            if hooks.watch {
                tape.watch(h);
            }
        }
        let (w2, b2) = (tape.param(ids.w2), tape.param(ids.b2));
        let down = tape.matmul(h, w2);
        let down = tape.add_row(down, b2);
        Ok((tape.add(x, down), h))
    }

    #[allow(clippy::too_many_arguments)]
    fn stack(
        &self,
        tape: &mut Tape,
        mut x: Var,
        blocks: &[BlockIds],
        causal: bool,
        memory: Option<Var>,
        hooks: Option<&Hooks>,
        name: &str,
    ) -> Result<StackVars> {
        let mut out = StackVars {
            hidden: Vec::with_capacity(blocks.len()),
            ffn: Vec::with_capacity(blocks.len()),
        };
        for (l, ids) in blocks.iter().enumerate() {
            let (next, h) = self.block(tape, x, ids, causal, memory, l, hooks)?;
            if !tape.value(next).is_finite() {
                return Err(XcError::numeric(format!("{name} layer {l}")));
            }
            x = next;
            out.hidden.push(x);
            out.ffn.push(h);
        }
        Ok(out)
    }

    fn head(&self, tape: &mut Tape, h: Var, slots: &[usize]) -> Var {
        let mut x = tape.select_rows(h, slots.to_vec());
        if let Some((g, b)) = self.layout.final_norm {
            let (g, b) = (tape.param(g), tape.param(b));
            x = tape.layer_norm(x, g, b);
        }
        let logits = match self.layout.unembed {
            Some(u) => {
                let u = tape.param(u);
                tape.matmul(x, u)
            }
            None => {
                let e = tape.param(self.layout.tok_emb);
                tape.matmul_t(x, e)
            }
        };
        let bias = tape.param(self.layout.out_bias);
        tape.add_row(logits, bias)
    }

    fn decode(&self, tape: &mut Tape, target: &[u32], enc_hidden: Var) -> Result<StackVars> {
        let (g, b) = self.layout.enc_norm.expect("encoder-decoder layout");
        let (g, b) = (tape.param(g), tape.param(b));
        let memory = tape.layer_norm(enc_hidden, g, b);
        let y = self.embed(tape, target);
        self.stack(tape, y, &self.layout.dec_blocks, true, Some(memory), None, "decoder")
    }

    fn build(&self, tape: &mut Tape, input: &ModelInput, opts: &ForwardOptions, watch: bool) -> Result<Graph> {
        self.check_input(input)?;
        let last = self.readout_layer(opts.readout)?;
        let run = if opts.lens_all { self.n_layers() } else { last + 1 };
        let patch = match opts.patch {
            Some(spec) => {
                spec.validate(self.n_layers())?;
                Some((spec, spec.position_pairs(&input.source)?))
            }
            None => None,
        };
        let hooks = Hooks {
            patch,
            scale: opts.scale,
            shift: opts.shift,
            watch,
        };
        let arch = self.arch();
        let x = self.embed(tape, &input.source);
        let primary_name = if arch == Arch::EncoderDecoder { "encoder" } else { "layer stack" };
        let primary = self.stack(
            tape,
            x,
            &self.layout.blocks[..run],
            arch == Arch::Decoder,
            None,
            Some(&hooks),
            primary_name,
        )?;

        let mut lens = Vec::new();
        let mut decoder = None;
        let logits = if arch == Arch::EncoderDecoder {
            let layers: Vec<usize> = if opts.lens_all { (0..run).collect() } else { vec![last] };
            let mut out = None;
            for l in layers {
                let dec = self.decode(tape, &input.target, primary.hidden[l])?;
                let top = *dec.hidden.last().expect("non-empty decoder");
                let logits = self.head(tape, top, &input.slots);
                if opts.lens_all {
                    lens.push(logits);
                }
                if l == last {
                    out = Some(logits);
                    decoder = Some(dec);
                }
            }
            out.expect("readout layer visited")
        } else if opts.lens_all {
            for l in 0..run {
                lens.push(self.head(tape, primary.hidden[l], &input.slots));
            }
            lens[last]
        } else {
            self.head(tape, primary.hidden[last], &input.slots)
        };
        if !tape.value(logits).is_finite() {
            return Err(XcError::numeric("output head"));
        }
        Ok(Graph {
            logits,
            lens,
            embeddings: x,
            primary,
            decoder,
        })
    }

    fn collect_trace(tape: &Tape, input: &ModelInput, g: &Graph) -> LayerTrace {
        let records = |s: &StackVars| {
            s.hidden
                .iter()
                .zip(&s.ffn)
                .map(|(&h, &f)| LayerRecord {
                    hidden: tape.value(h).clone(),
                    ffn: tape.value(f).clone(),
                })
                .collect()
        };
        LayerTrace {
            tokens: input.source.clone(),
            embeddings: Some(tape.value(g.embeddings).clone()),
            layers: records(&g.primary),
            decoder: g.decoder.as_ref().map(records).unwrap_or_default(),
        }
    }

    pub fn forward(&self, input: &ModelInput, opts: &ForwardOptions) -> Result<ForwardOutput> {
        let mut tape = Tape::new(&self.params, false);
        let g = self.build(&mut tape, input, opts, false)?;
        Ok(ForwardOutput {
            logits: tape.value(g.logits).clone(),
            lens: g.lens.iter().map(|&v| tape.value(v).clone()).collect(),
            trace: opts.trace.then(|| Self::collect_trace(&tape, input, &g)),
        })
    }

    /// Plain forward pass returning the final-layer logits and the trace.
    pub fn forward_with_trace(&self, input: &ModelInput, patch: Option<&PatchSpec>) -> Result<(Mat, LayerTrace)> {
        let out = self.forward(
            input,
            &ForwardOptions {
                patch,
                trace: true,
                ..Default::default()
            },
        )?;
        Ok((out.logits, out.trace.expect("trace requested")))
    }

    /// Primary-stack trace of `tokens` without running any head.
    pub fn hidden_states(&self, tokens: &[u32]) -> Result<LayerTrace> {
        if tokens.is_empty() {
            return Err(XcError::Argument("empty input".into()));
        }
        self.check_tokens(tokens, "input")?;
        let mut tape = Tape::new(&self.params, false);
        let x = self.embed(&mut tape, tokens);
        let name = if self.arch() == Arch::EncoderDecoder { "encoder" } else { "layer stack" };
        let s = self.stack(&mut tape, x, &self.layout.blocks, self.arch() == Arch::Decoder, None, None, name)?;
        Ok(LayerTrace {
            tokens: tokens.to_vec(),
            embeddings: Some(tape.value(x).clone()),
            layers: s
                .hidden
                .iter()
                .zip(&s.ffn)
                .map(|(&h, &f)| LayerRecord {
                    hidden: tape.value(h).clone(),
                    ffn: tape.value(f).clone(),
                })
                .collect(),
            decoder: Vec::new(),
        })
    }

    /// Gradient of the mean target probability (or logit) w.r.t. every
    /// primary-stack FFN activation, with `scale` applied in the forward pass.
    ///
    /// `targets` pairs a row of `input.slots` with a token id.
    pub fn grad_wrt_ffn(
        &self,
        input: &ModelInput,
        targets: &[(usize, u32)],
        scale: Option<&ScaleSpec>,
        objective: Objective,
    ) -> Result<FfnGradients> {
        self.grad_wrt_ffn_shifted(input, targets, scale, None, objective)
    }

    pub(crate) fn grad_wrt_ffn_shifted(
        &self,
        input: &ModelInput,
        targets: &[(usize, u32)],
        scale: Option<&ScaleSpec>,
        shift: Option<FfnShift>,
        objective: Objective,
    ) -> Result<FfnGradients> {
        if targets.is_empty() {
            return Err(XcError::Argument("no target tokens".into()));
        }
        if let Some(s) = scale {
            s.check_unit_interval()?;
        }
        for &(row, t) in targets {
            if row >= input.slots.len() || t as usize >= self.vocab.len() {
                return Err(XcError::Argument(format!("target ({row}, {t}) out of range")));
            }
        }
        let mut tape = Tape::new(&self.params, false);
        let opts = ForwardOptions {
            scale,
            shift,
            ..Default::default()
        };
        let g = self.build(&mut tape, input, &opts, true)?;
        let w = 1.0 / targets.len() as f64;
        let entries: Vec<(usize, usize, f64)> = targets.iter().map(|&(r, t)| (r, t as usize, w)).collect();
        let mut underflow = false;
        let out = match objective {
            Objective::Logit => tape.pick_sum(g.logits, entries),
            Objective::Probability => {
                let p = tape.softmax_rows(g.logits, false);
                let pv = tape.value(p);
                for &(r, t, _) in &entries {
                    if pv.get(r, t) < PROB_FLOOR {
                        underflow = true;
                    }
                }
                if underflow {
                    log::warn!("target probability below {PROB_FLOOR:e}; reported value clamped");
                }
                tape.pick_sum(p, entries)
            }
        };
        let mut value = tape.value(out).data[0];
        if underflow {
            value = value.max(PROB_FLOOR);
        }
        let grads = tape.backward(out);
        let activations = g.primary.ffn.iter().map(|&v| tape.value(v).clone()).collect();
        let grads = g
            .primary
            .ffn
            .iter()
            .map(|&v| {
                let a = tape.value(v);
                grads.of(v).cloned().unwrap_or_else(|| Mat::zeros(a.rows, a.cols))
            })
            .collect();
        Ok(FfnGradients {
            value,
            activations,
            grads,
            underflow,
        })
    }

    /// Mean cross-entropy of `targets` and, optionally, its parameter gradients.
    pub fn cross_entropy(
        &self,
        input: &ModelInput,
        targets: &[(usize, u32)],
        with_grads: bool,
    ) -> Result<(f64, Option<Vec<Mat>>)> {
        if targets.is_empty() {
            return Err(XcError::Argument("no target tokens".into()));
        }
        let mut tape = Tape::new(&self.params, with_grads);
        let g = self.build(&mut tape, input, &ForwardOptions::default(), false)?;
        let lp = tape.log_softmax_rows(g.logits);
        let w = -1.0 / targets.len() as f64;
        let loss = tape.pick_sum(lp, targets.iter().map(|&(r, t)| (r, t as usize, w)).collect());
        let value = tape.value(loss).data[0];
        if !with_grads {
            return Ok((value, None));
        }
        let grads = tape
            .backward(loss)
            .into_params()
            .into_iter()
            .zip(&self.params)
            .map(|(g, p)| g.unwrap_or_else(|| Mat::zeros(p.rows, p.cols)))
            .collect();
        Ok((value, Some(grads)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::trace::TokenSelector;

    fn vocab() -> Vocabulary {
        Vocabulary::from_texts(["a b c d e f g h"])
    }

    fn model(arch: Arch, layers: usize) -> Model {
        Model::init(ModelConfig::new(arch, layers, 8, 12, 2, 7), vocab()).unwrap()
    }

    fn input(arch: Arch) -> ModelInput {
        match arch {
            Arch::EncoderDecoder => ModelInput {
                source: vec![5, 6, 3, 7],
                target: vec![1, 3, 8],
                slots: vec![1, 2],
            },
            _ => ModelInput {
                source: vec![5, 6, 2, 7, 2],
                target: vec![],
                slots: vec![2, 4],
            },
        }
    }

    #[test]
    fn seeded_init_is_deterministic() {
        assert_eq!(model(Arch::Encoder, 2), model(Arch::Encoder, 2));
        let other = Model::init(ModelConfig::new(Arch::Encoder, 2, 8, 12, 2, 8), vocab()).unwrap();
        assert_ne!(model(Arch::Encoder, 2).params(), other.params());
    }

    #[test]
    fn final_readout_matches_last_lens() {
        for arch in Arch::ALL {
            let m = model(arch, 3);
            let x = input(arch);
            let plain = m.forward(&x, &ForwardOptions::default()).unwrap();
            let lens = m
                .forward(
                    &x,
                    &ForwardOptions {
                        lens_all: true,
                        ..Default::default()
                    },
                )
                .unwrap();
            let at = m
                .forward(
                    &x,
                    &ForwardOptions {
                        readout: Readout::Layer(2),
                        ..Default::default()
                    },
                )
                .unwrap();
            assert_eq!(lens.lens.len(), 3);
            assert_eq!(plain.logits, lens.lens[2], "{arch}");
            assert_eq!(plain.logits, at.logits, "{arch}");
        }
    }

    #[test]
    fn self_donor_patch_is_identity() {
        for arch in Arch::ALL {
            let m = model(arch, 2);
            let x = input(arch);
            let (logits, trace) = m.forward_with_trace(&x, None).unwrap();
            for tokens in [TokenSelector::All, TokenSelector::MaskTokens] {
                let spec = PatchSpec::new([0, 1], trace.clone()).with_tokens(tokens);
                let (patched, _) = m.forward_with_trace(&x, Some(&spec)).unwrap();
                assert_eq!(patched, logits);
            }
        }
    }

    #[test]
    fn patched_trace_holds_donor_values() {
        let m = model(Arch::Encoder, 2);
        let x = input(Arch::Encoder);
        let mut other = x.clone();
        other.source[0] = 8;
        let (_, donor) = m.forward_with_trace(&other, None).unwrap();
        let spec = PatchSpec::new([1], donor.clone());
        let (_, t) = m.forward_with_trace(&x, Some(&spec)).unwrap();
        assert_eq!(t.layers[1].ffn, donor.layers[1].ffn);
        assert_ne!(t.layers[0].ffn, donor.layers[0].ffn);
    }

    #[test]
    fn patch_shape_mismatch_is_error() {
        let m = model(Arch::Encoder, 2);
        let x = input(Arch::Encoder);
        let (_, mut donor) = m.forward_with_trace(&x, None).unwrap();
        donor.tokens.pop();
        let spec = PatchSpec::new([0], donor);
        assert!(matches!(m.forward_with_trace(&x, Some(&spec)), Err(XcError::Patch(_))));
        let (_, donor) = m.forward_with_trace(&x, None).unwrap();
        let spec = PatchSpec::new([5], donor);
        assert!(matches!(m.forward_with_trace(&x, Some(&spec)), Err(XcError::Patch(_))));
    }

    #[test]
    fn slot_distributions_are_normalised() {
        for arch in Arch::ALL {
            let m = model(arch, 2);
            let lp = m.forward(&input(arch), &ForwardOptions::default()).unwrap().log_probs();
            for r in 0..lp.rows {
                let total: f64 = lp.row(r).iter().map(|v| v.exp()).sum();
                assert!((total - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn aliases_make_inputs_identical() {
        let mut m = model(Arch::Decoder, 2);
        let x = input(Arch::Decoder);
        let mut y = x.clone();
        y.source[0] = 9;
        m.set_aliases(BTreeMap::from([(9, 5)])).unwrap();
        let a = m.forward(&x, &ForwardOptions::default()).unwrap();
        let b = m.forward(&y, &ForwardOptions::default()).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn out_of_range_inputs_are_rejected() {
        let m = model(Arch::Encoder, 2);
        let mut x = input(Arch::Encoder);
        x.slots = vec![9];
        assert!(m.forward(&x, &ForwardOptions::default()).is_err());
        let mut x = input(Arch::Encoder);
        x.source[0] = 99;
        assert!(m.forward(&x, &ForwardOptions::default()).is_err());
        let x = input(Arch::Encoder);
        let opts = ForwardOptions {
            readout: Readout::Layer(2),
            ..Default::default()
        };
        assert!(m.forward(&x, &opts).is_err());
    }

    #[test]
    fn zero_scale_removes_ffn_contribution() {
        let mut m = model(Arch::Encoder, 1);
        let x = input(Arch::Encoder);
        let scale = ScaleSpec::uniform(0, 12, 0.0);
        let g = m.grad_wrt_ffn(&x, &[(0, 5)], Some(&scale), Objective::Probability).unwrap();
        assert!(g.grads[0].is_finite());
        assert!(g.activations[0].data.iter().all(|&v| v == 0.0));
        m.param_mut("layers.0.ffn.w2").unwrap().data.fill(0.0);
        let z = m.forward(&x, &ForwardOptions::default()).unwrap();
        assert!((g.value - log_probs(&z.logits).get(0, 5).exp()).abs() < 1e-15);
    }
}
