//! Central finite-difference verification of tape gradients.
//!
//! Each check evaluates a function of several named input tensors, reduces
//! its output with fixed random weights to a scalar, and compares the tape's
//! gradient for every input against `(f(x + h) − f(x − h)) / 2h` on a
//! sample of coordinates. The error for an input group is
//! `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, GRAD_FLOOR·max(1, |f|))`
//! over the sampled coordinates. The floor only matters for gradients that are
//! identically zero (attention key biases), where both sides are rounding
//! noise; it scales with `|f|` because that noise does.
//!
//! A coordinate whose difference quotients at `h` and `h/2` disagree sits on
//! a ReLU kink, where the function has no derivative; it is skipped and
//! counted in [`InstanceResult::kinks`].

use crate::arch::{self, ModelConfig, PriorQueries};
use crate::error::Result;
use crate::losses::{self, ContrastiveConfig};
use crate::params::{Bound, ParameterStore};
use crate::rng::{substream, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::Rng as _;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const GRAD_FLOOR: f64 = 1e-5;
/// Largest disagreement between the two difference quotients of a smooth
/// coordinate (relative to `max(1, |numeric|)`).
pub const KINK_THRESHOLD: f64 = 1e-6;

type Forward<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Outcome of checking one function on one instance.
#[derive(Clone, Debug)]
pub struct InstanceResult {
    /// `(input name, relative error)` per input group.
    pub groups: Vec<(String, f64)>,
    /// Coordinates skipped because they straddle a kink.
    pub kinks: usize,
}

impl InstanceResult {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.1).fold(0.0, f64::max)
    }
}

fn evaluate(
    inputs: &[(String, Tensor<f64>)],
    f: &Forward<'_>,
    weights: &Tensor<f64>,
    trainable: bool,
) -> Result<(Tape<f64>, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(_, t)| {
            if trainable {
                tape.variable(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    let loss = if tape.value(out).len() == 1 {
        out
    } else {
        let w = tape.constant(weights.clone());
        let p = tape.mul(out, w)?;
        tape.sum(p)
    };
    Ok((tape, vars, loss))
}

/// Compares analytic and numeric gradients of `f` for every input.
///
/// At most `max_coords` coordinates per input are probed (all of them when
/// the input is smaller).
pub fn check(
    inputs: &[(String, Tensor<f64>)],
    f: &Forward<'_>,
    max_coords: usize,
    rng: &mut Rng,
) -> Result<InstanceResult> {
    // Output shape is needed for the reduction weights.
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).shape().to_vec()
    };
    let weights = Tensor::from_fn(&probe, |_| rng.random_range(-1.0..1.0));

    let (mut tape, vars, loss) = evaluate(inputs, f, &weights, true)?;
    let floor = GRAD_FLOOR * tape.value(loss).item().abs().max(1.0);
    tape.backward(loss)?;

    let quotient = |k: usize, c: usize, h: f64| -> Result<f64> {
        let mut shifted = inputs.to_vec();
        let x0 = inputs[k].1.data()[c];
        shifted[k].1.data_mut()[c] = x0 + h;
        let (t, _, l) = evaluate(&shifted, f, &weights, false)?;
        let plus = t.value(l).item();
        shifted[k].1.data_mut()[c] = x0 - h;
        let (t, _, l) = evaluate(&shifted, f, &weights, false)?;
        let minus = t.value(l).item();
        Ok((plus - minus) / (2.0 * h))
    };

    let mut groups = Vec::with_capacity(inputs.len());
    let mut kinks = 0;
    for (k, (name, tensor)) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).expect("leaf gradient").to_vec();
        let coords: Vec<usize> = if tensor.len() <= max_coords {
            (0..tensor.len()).collect()
        } else {
            sample(rng, tensor.len(), max_coords).into_vec()
        };
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for &c in &coords {
            let numeric = quotient(k, c, STEP)?;
            let half = quotient(k, c, STEP / 2.0)?;
            if (numeric - half).abs() > KINK_THRESHOLD * numeric.abs().max(1.0) {
                kinks += 1;
                continue;
            }
            let a = analytic[c];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let scale = a2.sqrt().max(n2.sqrt()).max(floor);
        let err = diff2.sqrt() / scale;
        groups.push((name.clone(), err));
    }
    Ok(InstanceResult { groups, kinks })
}

/// Worst error of one differentiable operation across its instances.
#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    /// Input group that produced `max_rel_err`.
    pub worst_group: String,
    /// Coordinates skipped at kinks, over all instances.
    pub kinks: usize,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn named(name: &str, t: Tensor<f64>) -> (String, Tensor<f64>) {
    (name.to_string(), t)
}

/// Random store perturbation: the fresh init has zero biases and unit
/// norm gains, which would hide bugs in their gradients.
fn jitter(store: &ParameterStore<f64>, rng: &mut Rng) -> Vec<(String, Tensor<f64>)> {
    store
        .iter()
        .map(|(name, t)| {
            let noisy = t.map(|x| x + rng.random_range(-0.1..0.1));
            (name.to_string(), noisy)
        })
        .collect()
}

fn bind_tail(names: &[(String, Tensor<f64>)], vars: &[Var], skip: usize) -> Bound {
    Bound::from_pairs(
        names[skip..]
            .iter()
            .zip(&vars[skip..])
            .map(|((n, _), &v)| (n.clone(), v)),
    )
}

fn small_model(channels: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        channels,
        patch_size: 4,
        heads,
        encoder_blocks: 1,
        extractor_hidden: 5,
        ffn_multiplier: 2,
        max_tokens: 6,
        layernorm_eps: 1e-5,
        global_residual: true,
    }
}

/// Transformer-only parameters (layer norms, attention, FFNs) for token width `d`.
fn transformer_params(cfg: &ModelConfig, rng: &mut Rng) -> ParameterStore<f64> {
    arch::init_backbone(cfg, rng)
}

fn run_op(
    op: &'static str,
    instances: usize,
    seed: u64,
    mut make: impl FnMut(&mut Rng) -> Result<InstanceResult>,
) -> Result<OpReport> {
    let mut rng = substream(seed, op);
    let mut worst = (0.0, String::new());
    let mut kinks = 0;
    for _ in 0..instances {
        let r = make(&mut rng)?;
        kinks += r.kinks;
        for (g, e) in r.groups {
            if e > worst.0 || worst.1.is_empty() {
                worst = (e, g);
            }
        }
    }
    Ok(OpReport {
        op,
        instances,
        max_rel_err: worst.0,
        worst_group: worst.1,
        kinks,
    })
}

/// Runs the gradient check for every differentiable operation used by the
/// network and its losses, `instances` random instances each.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<OpReport>> {
    const COORDS: usize = 6;
    let mut reports = Vec::new();

    // Primitives first, then the layers built from them.
    reports.push(run_op("add_sub_mul", instances, seed, |rng| {
        let shape = [rng.random_range(1..=3), rng.random_range(1..=5)];
        let inputs = vec![
            named("a", uniform(&shape, -1.0, 1.0, rng)),
            named("b", uniform(&shape, -1.0, 1.0, rng)),
            named("c", uniform(&shape, -1.0, 1.0, rng)),
        ];
        check(
            &inputs,
            &|t, v| {
                let ab = t.mul(v[0], v[1])?;
                let d = t.sub(ab, v[2])?;
                t.add(d, v[0])
            },
            64,
            rng,
        )
    })?);

    reports.push(run_op("scale_sum_mean", instances, seed, |rng| {
        let n = rng.random_range(1..=10);
        let k = rng.random_range(-2.0..2.0);
        let inputs = vec![named("x", uniform(&[n], -1.0, 1.0, rng)), named("y", uniform(&[n], -1.0, 1.0, rng))];
        check(
            &inputs,
            &|t, v| {
                let sx = t.scale(v[0], k);
                let s = t.sum(sx);
                let yy = t.mul(v[1], v[1])?;
                let m = t.mean(yy);
                t.add(s, m)
            },
            64,
            rng,
        )
    })?);

    reports.push(run_op("relu", instances, seed, |rng| {
        let n = rng.random_range(2..=12);
        // magnitudes in [0.05, 1] keep every coordinate off the kink
        let x = Tensor::from_fn(&[n], |_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        });
        check(&[named("x", x)], &|t, v| Ok(t.relu(v[0])), 64, rng)
    })?);

    reports.push(run_op("reshape", instances, seed, |rng| {
        let (r, c) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let inputs = vec![named("x", uniform(&[r, c], -1.0, 1.0, rng))];
        check(&inputs, &|t, v| t.reshape(v[0], &[c, r]), 64, rng)
    })?);

    reports.push(run_op("matmul", instances, seed, |rng| {
        let (m, k, n) = (rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=4));
        let trans_b = rng.random_bool(0.5);
        let b_shape = if trans_b { [n, k] } else { [k, n] };
        let inputs = vec![named("a", uniform(&[m, k], -1.0, 1.0, rng)), named("b", uniform(&b_shape, -1.0, 1.0, rng))];
        check(&inputs, &|t, v| t.matmul(v[0], v[1], trans_b), 64, rng)
    })?);

    reports.push(run_op("gather", instances, seed, |rng| {
        let n = rng.random_range(2..=8);
        let m = rng.random_range(1..=12);
        // repeats exercise gradient accumulation
        let index: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
        let inputs = vec![named("x", uniform(&[n], -1.0, 1.0, rng))];
        check(&inputs, &|t, v| t.gather(v[0], index.clone(), &[m]), 64, rng)
    })?);

    reports.push(run_op("concat_cols", instances, seed, |rng| {
        let rows = rng.random_range(1..=3);
        let inputs = vec![
            named("left", uniform(&[rows, rng.random_range(1..=3)], -1.0, 1.0, rng)),
            named("right", uniform(&[rows, rng.random_range(1..=3)], -1.0, 1.0, rng)),
        ];
        check(&inputs, &|t, v| t.concat_cols(&[v[0], v[1], v[0]]), 64, rng)
    })?);

    reports.push(run_op("normalize_rows", instances, seed, |rng| {
        let (rows, d) = (rng.random_range(1..=4), rng.random_range(1..=6));
        let inputs = vec![named("x", uniform(&[rows, d], -1.0, 1.0, rng))];
        check(&inputs, &|t, v| t.normalize_rows(v[0]), 64, rng)
    })?);

    reports.push(run_op("sampled_nce", instances, seed, |rng| {
        let n = rng.random_range(2..=6);
        let cfg = ContrastiveConfig {
            samples: rng.random_range(1..=n),
            negatives: rng.random_range(1..n),
            ..ContrastiveConfig::default()
        };
        let rows = losses::sample_nce_rows(n, &cfg, rng)?;
        let inputs = vec![named("logits", uniform(&[n, n], -3.0, 3.0, rng))];
        check(&inputs, &|t, v| t.sampled_nce(v[0], rows.clone()), 64, rng)
    })?);

    reports.push(run_op("conv2d", instances, seed, |rng| {
        let c_in = rng.random_range(1..=3);
        let c_out = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
        let inputs = vec![
            named("input", uniform(&[c_in, h, w], -1.0, 1.0, rng)),
            named("kernel", uniform(&[c_out, c_in, 3, 3], -1.0, 1.0, rng)),
            named("bias", uniform(&[c_out], -1.0, 1.0, rng)),
        ];
        check(&inputs, &|t, v| t.conv2d(v[0], v[1], v[2], 1), 24, rng)
    })?);

    reports.push(run_op("linear", instances, seed, |rng| {
        let (rows, d_in, d_out) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=6));
        let inputs = vec![
            named("x", uniform(&[rows, d_in], -1.0, 1.0, rng)),
            named("weight", uniform(&[d_out, d_in], -1.0, 1.0, rng)),
            named("bias", uniform(&[d_out], -1.0, 1.0, rng)),
        ];
        check(&inputs, &|t, v| t.linear(v[0], v[1], v[2]), 64, rng)
    })?);

    reports.push(run_op("layernorm", instances, seed, |rng| {
        let (rows, d) = (rng.random_range(1..=4), rng.random_range(2..=8));
        let inputs = vec![
            named("x", uniform(&[rows, d], -2.0, 2.0, rng)),
            named("gain", uniform(&[d], 0.5, 1.5, rng)),
            named("shift", uniform(&[d], -0.5, 0.5, rng)),
        ];
        check(&inputs, &|t, v| t.layernorm(v[0], v[1], v[2], 1e-5), 64, rng)
    })?);

    reports.push(run_op("softmax", instances, seed, |rng| {
        let (rows, d) = (rng.random_range(1..=4), rng.random_range(2..=7));
        let inputs = vec![named("x", uniform(&[rows, d], -3.0, 3.0, rng))];
        check(&inputs, &|t, v| Ok(t.softmax(v[0])), 64, rng)
    })?);

    reports.push(run_op("attention", instances, seed, |rng| {
        // N = 3, D = 4, two heads.
        let mut store = ParameterStore::new();
        for which in ["q", "k", "v", "o"] {
            store.insert(format!("attn.{which}.weight"), uniform(&[4, 4], -0.8, 0.8, rng));
            store.insert(format!("attn.{which}.bias"), uniform(&[4], -0.2, 0.2, rng));
        }
        let mut inputs = vec![
            named("q", uniform(&[3, 4], -1.0, 1.0, rng)),
            named("k", uniform(&[3, 4], -1.0, 1.0, rng)),
            named("v", uniform(&[3, 4], -1.0, 1.0, rng)),
        ];
        inputs.extend(store.iter().map(|(n, t)| (n.to_string(), t.detached())));
        let names = inputs.clone();
        check(
            &inputs,
            &|t, v| {
                let p = bind_tail(&names, v, 3);
                Ok(arch::multi_head_attention(t, &p, "attn", v[0], v[1], v[2], 2)?.out)
            },
            COORDS,
            rng,
        )
    })?);

    reports.push(run_op("encoder_block", instances, seed, |rng| {
        // D = C·P² = 16, N = 4.
        let cfg = small_model(1, 2);
        let store = transformer_params(&cfg, rng);
        let mut inputs = vec![named("x", uniform(&[4, 16], -1.0, 1.0, rng))];
        inputs.extend(jitter(&store, rng).into_iter().filter(|(n, _)| n.starts_with("encoder.")));
        let names = inputs.clone();
        check(
            &inputs,
            &|t, v| {
                let p = bind_tail(&names, v, 1);
                arch::encoder_block(t, &p, "encoder.0", v[0], &cfg)
            },
            COORDS,
            rng,
        )
    })?);

    reports.push(run_op("decoder_block", instances, seed, |rng| {
        let cfg = small_model(1, 2);
        let store = transformer_params(&cfg, rng);
        let mut inputs = vec![
            named("o_e", uniform(&[4, 16], -1.0, 1.0, rng)),
            named("queries", uniform(&[4, 16], -1.0, 1.0, rng)),
        ];
        inputs.extend(jitter(&store, rng).into_iter().filter(|(n, _)| n.starts_with("decoder.")));
        let names = inputs.clone();
        check(
            &inputs,
            &|t, v| {
                let p = bind_tail(&names, v, 2);
                Ok(arch::decoder_block(t, &p, "decoder", v[0], PriorQueries(v[1]), &cfg)?.out)
            },
            COORDS,
            rng,
        )
    })?);

    reports.push(run_op("plm", instances, seed, |rng| {
        let cfg = small_model(4, 2);
        let store = arch::init_plm(&cfg, rng);
        let mut inputs = vec![named("image", uniform(&[3, 8, 8], 0.0, 1.0, rng))];
        inputs.extend(jitter(&store, rng));
        let names = inputs.clone();
        check(
            &inputs,
            &|t, v| {
                let p = bind_tail(&names, v, 1);
                Ok(arch::plm_forward(t, &p, v[0], &cfg)?.0)
            },
            COORDS,
            rng,
        )
    })?);

    reports.push(run_op("backbone", instances, seed, |rng| {
        // 3×8×8, P = 4, C = 4, two heads: D = 64, N = 4.
        let cfg = small_model(4, 2);
        let store = arch::init_backbone(&cfg, rng);
        let mut inputs = vec![
            named("image", uniform(&[3, 8, 8], 0.0, 1.0, rng)),
            named("queries", uniform(&[4, 64], -0.5, 0.5, rng)),
        ];
        inputs.extend(jitter(&store, rng));
        let names = inputs.clone();
        check(
            &inputs,
            &|t, v| {
                let p = bind_tail(&names, v, 2);
                Ok(arch::backbone_forward(t, &p, v[0], PriorQueries(v[1]), &cfg)?.out)
            },
            COORDS,
            rng,
        )
    })?);

    reports.push(run_op("l1", instances, seed, |rng| {
        let n = rng.random_range(2..=12);
        let pred = uniform(&[n], -1.0, 1.0, rng);
        // Keep every residual away from the kink at zero.
        let target = Tensor::from_fn(&[n], |i| {
            let off = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                pred.data()[i] + off
            } else {
                pred.data()[i] - off
            }
        });
        let inputs = vec![named("pred", pred), named("target", target)];
        check(&inputs, &|t, v| t.l1(v[0], v[1]), 64, rng)
    })?);

    reports.push(run_op("contrastive", instances, seed, |rng| {
        // N = 4, D = 3, exhaustive sampling.
        let cfg = ContrastiveConfig {
            samples: 4,
            negatives: 3,
            ..ContrastiveConfig::default()
        };
        let inputs = vec![
            named("q_degraded", uniform(&[4, 3], -1.0, 1.0, rng)),
            named("q_clean", uniform(&[4, 3], -1.0, 1.0, rng)),
        ];
        let rows = losses::sample_nce_rows(4, &cfg, rng)?;
        check(
            &inputs,
            &|t, v| losses::contrastive_loss_with_rows(t, v[0], v[1], &cfg, rows.clone()),
            64,
            rng,
        )
    })?);

    Ok(reports)
}
