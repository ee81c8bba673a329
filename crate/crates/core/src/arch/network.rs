//! Parameter initialization and the full forward paths.

use super::patch::{patchify, unpatchify};
use super::transformer::{decoder_block, encoder_block, DecoderTrace};
use super::{ModelConfig, PriorQueries};
use crate::error::{dim_err, Result};
use crate::params::{Bound, ParameterStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

const EMBED_STD: f64 = 0.02;

struct Init<'a, T, R> {
    store: ParameterStore<T>,
    rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Init<'_, T, R> {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::of(self.rng.random_range(-bound..bound)));
        self.store.insert(name, t);
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) {
        let dist = Normal::new(0.0, std).expect("positive std");
        let t = Tensor::from_fn(shape, |_| T::of(dist.sample(self.rng)));
        self.store.insert(name, t);
    }

    fn fill(&mut self, name: String, shape: &[usize], value: f64) {
        self.store.insert(name, Tensor::full(shape, T::of(value)));
    }

    fn conv(&mut self, prefix: &str, c_out: usize, c_in: usize) {
        self.uniform(format!("{prefix}.weight"), &[c_out, c_in, 3, 3], c_in * 9);
        self.fill(format!("{prefix}.bias"), &[c_out], 0.0);
    }

    fn linear(&mut self, prefix: &str, d_out: usize, d_in: usize) {
        self.uniform(format!("{prefix}.weight"), &[d_out, d_in], d_in);
        self.fill(format!("{prefix}.bias"), &[d_out], 0.0);
    }

    fn layernorm(&mut self, prefix: &str, d: usize) {
        self.fill(format!("{prefix}.gain"), &[d], 1.0);
        self.fill(format!("{prefix}.shift"), &[d], 0.0);
    }

    fn attention(&mut self, prefix: &str, d: usize) {
        for which in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{which}"), d, d);
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) {
        self.linear(&format!("{prefix}.fc1"), hidden, d);
        self.linear(&format!("{prefix}.fc2"), d, hidden);
    }
}

/// Fresh backbone weights: CNN encoder, position encodings, transformer
/// encoder and decoder, CNN decoder.
pub fn init_backbone<T: Scalar, R: Rng>(cfg: &ModelConfig, rng: &mut R) -> ParameterStore<T> {
    let (c, d) = (cfg.channels, cfg.token_dim());
    let hidden = d * cfg.ffn_multiplier;
    let mut init = Init {
        store: ParameterStore::new(),
        rng,
    };
    init.conv("cnn_in.conv1", c, 3);
    init.conv("cnn_in.conv2", c, c);
    init.normal("pos".into(), &[cfg.max_tokens, d], EMBED_STD);
    for i in 0..cfg.encoder_blocks {
        let p = format!("encoder.{i}");
        init.layernorm(&format!("{p}.ln1"), d);
        init.attention(&format!("{p}.attn"), d);
        init.layernorm(&format!("{p}.ln2"), d);
        init.ffn(&format!("{p}.ffn"), d, hidden);
    }
    init.layernorm("decoder.ln1", d);
    init.attention("decoder.attn1", d);
    init.layernorm("decoder.ln2", d);
    init.attention("decoder.attn2", d);
    init.layernorm("decoder.ln3", d);
    init.ffn("decoder.ffn", d, hidden);
    init.conv("cnn_out.conv1", c, c);
    init.conv("cnn_out.conv2", 3, c);
    init.store
}

/// Fresh prior learning module weights: the feature extractor and the
/// per-position learnable embeddings.
pub fn init_plm<T: Scalar, R: Rng>(cfg: &ModelConfig, rng: &mut R) -> ParameterStore<T> {
    let mut init = Init {
        store: ParameterStore::new(),
        rng,
    };
    init.conv("extract.conv1", cfg.extractor_hidden, 3);
    init.conv("extract.conv2", cfg.channels, cfg.extractor_hidden);
    init.conv("extract.conv3", cfg.channels, cfg.channels);
    init.normal("embed".into(), &[cfg.max_tokens, cfg.token_dim()], EMBED_STD);
    init.store
}

fn conv<T: Scalar>(tape: &mut Tape<T>, params: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = params.var(&format!("{prefix}.weight"))?;
    let b = params.var(&format!("{prefix}.bias"))?;
    tape.conv2d(x, w, b, 1)
}

fn check_image<T: Scalar>(tape: &Tape<T>, image: Var) -> Result<(usize, usize)> {
    match *tape.shape(image) {
        [3, h, w] => Ok((h, w)),
        ref s => dim_err(format!("expected an RGB image [3, H, W], got {s:?}")),
    }
}

/// Two 3×3 convolutions with a ReLU between: `[3, H, W] → [C, H, W]`.
pub fn cnn_encode<T: Scalar>(tape: &mut Tape<T>, params: &Bound, image: Var) -> Result<Var> {
    let h = conv(tape, params, "cnn_in.conv1", image)?;
    let h = tape.relu(h);
    conv(tape, params, "cnn_in.conv2", h)
}

/// Two 3×3 convolutions with a ReLU between: `[C, H, W] → [3, H, W]`.
pub fn cnn_decode<T: Scalar>(tape: &mut Tape<T>, params: &Bound, features: Var) -> Result<Var> {
    let h = conv(tape, params, "cnn_out.conv1", features)?;
    let h = tape.relu(h);
    conv(tape, params, "cnn_out.conv2", h)
}

/// Prior queries `Q[i] = e_i + patch_i(G(image))`, where `G` is the
/// three-layer convolutional feature extractor.
pub fn plm_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Bound,
    image: Var,
    cfg: &ModelConfig,
) -> Result<PriorQueries> {
    let (h, w) = check_image(tape, image)?;
    let n = cfg.tokens(h, w)?;
    let f = conv(tape, params, "extract.conv1", image)?;
    let f = tape.relu(f);
    let f = conv(tape, params, "extract.conv2", f)?;
    let f = tape.relu(f);
    let f = conv(tape, params, "extract.conv3", f)?;
    let tokens = patchify(tape, f, cfg.patch_size)?;
    let embed = params.var("embed")?;
    let e = tape.slice_rows(embed, 0, n)?;
    Ok(PriorQueries(tape.add(e, tokens)?))
}

/// Activations along the backbone.
#[derive(Clone, Debug)]
pub struct BackboneTrace {
    pub out: Var,
    /// Token sequence after adding position encodings.
    pub tokens: Var,
    pub encoded: Var,
    pub decoder: DecoderTrace,
}

/// Full restoration pass `[3, H, W] → [3, H, W]` conditioned on `q`.
///
/// With `cfg.global_residual` the decoded features are added to the input.
pub fn backbone_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Bound,
    image: Var,
    q: PriorQueries,
    cfg: &ModelConfig,
) -> Result<BackboneTrace> {
    let (h, w) = check_image(tape, image)?;
    let n = cfg.tokens(h, w)?;
    let f_e = cnn_encode(tape, params, image)?;
    let patches = patchify(tape, f_e, cfg.patch_size)?;
    let pos = params.var("pos")?;
    let pe = tape.slice_rows(pos, 0, n)?;
    let tokens = tape.add(patches, pe)?;
    let mut x = tokens;
    for i in 0..cfg.encoder_blocks {
        x = encoder_block(tape, params, &format!("encoder.{i}"), x, cfg)?;
    }
    let decoder = decoder_block(tape, params, "decoder", x, q, cfg)?;
    let f_d = unpatchify(tape, decoder.out, cfg.channels, h, w, cfg.patch_size)?;
    let mut out = cnn_decode(tape, params, f_d)?;
    if cfg.global_residual {
        out = tape.add(out, image)?;
    }
    Ok(BackboneTrace {
        out,
        tokens,
        encoded: x,
        decoder,
    })
}
