use proptest::prelude::*;
use tape_core::arch::*;
use tape_core::rng::substream;
use tape_core::{Error, ParameterStore, Tape, Tensor};

fn small() -> ModelConfig {
    ModelConfig {
        channels: 4,
        patch_size: 4,
        heads: 2,
        extractor_hidden: 8,
        max_tokens: 16,
        ..ModelConfig::default()
    }
}

fn image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = substream(seed, "img");
    use rand::Rng;
    Tensor::from_fn(&[3, h, w], |_| rng.random_range(0.0..1.0))
}

fn models(cfg: &ModelConfig) -> (ParameterStore, ParameterStore) {
    (
        init_backbone(cfg, &mut substream(3, "theta")),
        init_plm(cfg, &mut substream(3, "plm")),
    )
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

#[test]
fn output_shape_matches_input() {
    for residual in [false, true] {
        let cfg = ModelConfig {
            global_residual: residual,
            ..small()
        };
        let (theta, plm) = models(&cfg);
        // N = 1, 4, 16 and a non-square image
        for (h, w) in [(4, 4), (8, 8), (16, 16), (8, 16)] {
            let mut tape = Tape::new();
            let th = theta.bind_frozen(&mut tape);
            let pl = plm.bind_frozen(&mut tape);
            let x = tape.constant(image(h, w, 1));
            let q = plm_forward(&mut tape, &pl, x, &cfg).unwrap();
            assert_eq!(tape.shape(q.0), &[h * w / 16, cfg.token_dim()]);
            let out = backbone_forward(&mut tape, &th, x, q, &cfg).unwrap().out;
            assert_eq!(tape.shape(out), &[3, h, w]);
            assert!(tape.value(out).all_finite());
        }
    }
}

#[test]
fn indivisible_or_oversized_input_is_a_dimension_error() {
    let cfg = small();
    let (theta, plm) = models(&cfg);
    for (h, w) in [(17, 17), (16, 18), (20, 20)] {
        let mut tape = Tape::new();
        let th = theta.bind_frozen(&mut tape);
        let pl = plm.bind_frozen(&mut tape);
        let x = tape.constant(image(h, w, 1));
        let err = plm_forward(&mut tape, &pl, x, &cfg).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)), "{err}");
        let q = PriorQueries(tape.constant(Tensor::zeros(&[16, cfg.token_dim()])));
        assert!(matches!(backbone_forward(&mut tape, &th, x, q, &cfg), Err(Error::Dimension(_))));
    }
    let mut tape = Tape::new();
    let pl = plm.bind_frozen(&mut tape);
    let x = tape.constant(image(17, 17, 1));
    assert!(plm_forward(&mut tape, &pl, x, &cfg).unwrap_err().to_string().contains("patch_size"));
}

#[test]
fn forward_is_deterministic() {
    let cfg = small();
    let run = || {
        let (theta, plm) = models(&cfg);
        let mut tape = Tape::new();
        let th = theta.bind(&mut tape);
        let pl = plm.bind(&mut tape);
        let x = tape.constant(image(16, 16, 5));
        let q = plm_forward(&mut tape, &pl, x, &cfg).unwrap();
        let out = backbone_forward(&mut tape, &th, x, q, &cfg).unwrap().out;
        bits(tape.value(out))
    };
    assert_eq!(run(), run());
}

#[test]
fn prior_queries_reach_scores_but_never_values() {
    let cfg = small();
    let (theta, _) = models(&cfg);
    let d = cfg.token_dim();
    let mut tape = Tape::new();
    let th = theta.bind_frozen(&mut tape);
    let o_e = tape.constant(image(16, 16, 2).reshape(&[12, d]).unwrap());
    let q1 = PriorQueries(tape.constant(image(16, 16, 3).reshape(&[12, d]).unwrap()));
    let q2 = PriorQueries(tape.constant(image(16, 16, 4).reshape(&[12, d]).unwrap()));
    let a = decoder_block(&mut tape, &th, "decoder", o_e, q1, &cfg).unwrap();
    let b = decoder_block(&mut tape, &th, "decoder", o_e, q2, &cfg).unwrap();
    for (ta, tb) in [(&a.self_attn, &b.self_attn), (&a.cross_attn, &b.cross_attn)] {
        assert_eq!(bits(tape.value(ta.value_input)), bits(tape.value(tb.value_input)));
        assert_eq!(bits(tape.value(ta.values)), bits(tape.value(tb.values)));
        for (la, lb) in ta.logits.iter().zip(&tb.logits) {
            assert_ne!(bits(tape.value(*la)), bits(tape.value(*lb)));
        }
    }
    assert_ne!(bits(tape.value(a.out)), bits(tape.value(b.out)));
}

fn zero(store: &mut ParameterStore, names: &[&str]) {
    for n in names {
        store.get_mut(n).unwrap().data_mut().fill(0.0);
    }
}

#[test]
fn zeroed_output_projections_pass_tokens_through() {
    let cfg = small();
    let (mut theta, _) = models(&cfg);
    zero(
        &mut theta,
        &[
            "decoder.attn1.o.weight",
            "decoder.attn1.o.bias",
            "decoder.attn2.o.weight",
            "decoder.attn2.o.bias",
            "decoder.ffn.fc2.weight",
            "decoder.ffn.fc2.bias",
            "encoder.0.attn.o.weight",
            "encoder.0.attn.o.bias",
            "encoder.0.ffn.fc2.weight",
            "encoder.0.ffn.fc2.bias",
        ],
    );
    let d = cfg.token_dim();
    let mut tape = Tape::new();
    let th = theta.bind_frozen(&mut tape);
    let x = tape.constant(image(8, 8, 7).map(|v| v - 0.5).reshape(&[3, d]).unwrap());
    let q = PriorQueries(tape.constant(image(8, 8, 8).reshape(&[3, d]).unwrap()));
    let enc = encoder_block(&mut tape, &th, "encoder.0", x, &cfg).unwrap();
    assert_eq!(bits(tape.value(enc)), bits(tape.value(x)));
    let dec = decoder_block(&mut tape, &th, "decoder", x, q, &cfg).unwrap();
    assert_eq!(bits(tape.value(dec.out)), bits(tape.value(x)));
}

#[test]
fn prior_module_is_embedding_plus_patched_features() {
    let cfg = small();
    let (_, plm) = models(&cfg);
    let n = 4;
    let img = image(8, 8, 9);

    // e = 0: queries are the patchified extractor features
    let mut no_embed = plm.clone();
    zero(&mut no_embed, &["embed"]);
    let mut tape = Tape::new();
    let pl = no_embed.bind_frozen(&mut tape);
    let x = tape.constant(img.clone());
    let q = plm_forward(&mut tape, &pl, x, &cfg).unwrap();
    let w1 = pl.var("extract.conv1.weight").unwrap();
    let b1 = pl.var("extract.conv1.bias").unwrap();
    let w2 = pl.var("extract.conv2.weight").unwrap();
    let b2 = pl.var("extract.conv2.bias").unwrap();
    let w3 = pl.var("extract.conv3.weight").unwrap();
    let b3 = pl.var("extract.conv3.bias").unwrap();
    let f = tape.conv2d(x, w1, b1, 1).unwrap();
    let f = tape.relu(f);
    let f = tape.conv2d(f, w2, b2, 1).unwrap();
    let f = tape.relu(f);
    let f = tape.conv2d(f, w3, b3, 1).unwrap();
    let expected = patchify(&mut tape, f, cfg.patch_size).unwrap();
    assert_eq!(bits(tape.value(q.0)), bits(tape.value(expected)));

    // zero extractor output: queries are the first N embeddings
    let mut no_features = plm.clone();
    zero(&mut no_features, &["extract.conv3.weight", "extract.conv3.bias"]);
    let mut tape = Tape::new();
    let pl = no_features.bind_frozen(&mut tape);
    let x = tape.constant(img);
    let q = plm_forward(&mut tape, &pl, x, &cfg).unwrap();
    let embed = plm.get("embed").unwrap();
    assert_eq!(tape.value(q.0).data(), &embed.data()[..n * cfg.token_dim()]);
}

#[test]
fn mismatched_prior_queries_are_rejected() {
    let cfg = small();
    let (theta, _) = models(&cfg);
    let mut tape = Tape::new();
    let th = theta.bind_frozen(&mut tape);
    let o_e = tape.constant(Tensor::zeros(&[4, cfg.token_dim()]));
    let q = PriorQueries(tape.constant(Tensor::zeros(&[3, cfg.token_dim()])));
    assert!(matches!(decoder_block(&mut tape, &th, "decoder", o_e, q, &cfg), Err(Error::Dimension(_))));
}

#[test]
fn backbone_and_prior_module_receive_gradients() {
    let cfg = small();
    let (mut theta, mut plm) = models(&cfg);
    let mut tape = Tape::new();
    let th = theta.bind(&mut tape);
    let pl = plm.bind(&mut tape);
    let x = tape.constant(image(8, 8, 1));
    let gt = tape.constant(image(8, 8, 2));
    let q = plm_forward(&mut tape, &pl, gt, &cfg).unwrap();
    let out = backbone_forward(&mut tape, &th, x, q, &cfg).unwrap().out;
    let loss = tape.l1(out, gt).unwrap();
    tape.backward(loss).unwrap();
    theta.absorb_grads(&tape, &th).unwrap();
    plm.absorb_grads(&tape, &pl).unwrap();
    for (store, tag) in [(&theta, "theta"), (&plm, "plm")] {
        for (name, t) in store.iter() {
            // positions beyond N = 4 are never used
            if name == "pos" || name == "embed" {
                let g = t.grad.as_ref().unwrap();
                let used = 4 * cfg.token_dim();
                assert!(g[..used].iter().any(|&v| v != 0.0), "{tag}/{name}");
                assert!(g[used..].iter().all(|&v| v == 0.0), "{tag}/{name}");
                continue;
            }
            // key biases shift every score of a row equally, so softmax ignores them
            if name.ends_with(".k.bias") {
                continue;
            }
            assert!(t.grad.as_ref().unwrap().iter().any(|&v| v != 0.0), "{tag}/{name} has zero grad");
        }
    }
}

proptest! {
    #[test]
    fn patchify_is_a_bijection(c in 1usize..4, p in 1usize..4, nh in 1usize..4, nw in 1usize..4, seed in any::<u64>()) {
        let (h, w) = (nh * p, nw * p);
        let idx = patchify_index(c, h, w, p).unwrap();
        let mut seen = idx.clone();
        seen.sort();
        prop_assert_eq!(seen, (0..c * h * w).collect::<Vec<_>>());

        let mut rng = substream(seed, "x");
        use rand::Rng;
        let x = Tensor::from_fn(&[c, h, w], |_| rng.random::<f64>() - 0.5);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let t = patchify(&mut tape, v, p).unwrap();
        prop_assert_eq!(tape.shape(t), &[nh * nw, c * p * p][..]);
        let back = unpatchify(&mut tape, t, c, h, w, p).unwrap();
        prop_assert_eq!(bits(tape.value(back)), bits(&x));
    }
}
