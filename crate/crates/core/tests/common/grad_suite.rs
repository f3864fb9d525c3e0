//! Finite-difference gradient checks over every tape op, every attention
//! kernel, the GLU, the GAU block, the MHSA+FFN baseline and a two-layer
//! model. Shared with the CLI acceptance suite.

use gau_core::autodiff::{grad_check, weighted_sum, GradCheckConfig, GradCheckReport, Mode, ReduceKind, Tape, Var};
use gau_core::gau::{
    gau_forward, glu_forward, mhsa_ffn_forward, BaselineConfig, BaselineVars, BlockConfig, GauVars, GluVars,
};
use gau_core::kernels::{
    apply_rope, attention_scores, layer_norm, swish, var_norm, AttentionKernelSpec, KernelVariant, NormConfig,
    RopeConfig,
};
use gau_core::rng::{self, Rng};
use gau_core::train::{masked_forward, model_forward, Batch, ModelConfig, ModelVars, MASK, PAD};
use gau_core::{Result, Tensor};

pub const TOLERANCE: f64 = 1e-4;

type Body = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    body: Body,
}

pub struct Outcome {
    pub name: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

fn randn(shape: &[usize], r: &mut Rng) -> Tensor<f64> {
    Tensor::randn(shape, 0.0, 1.0, r)
}

/// Entries bounded away from zero, for ops with a kink there.
fn away(shape: &[usize], r: &mut Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, r).map(|x: f64| x.signum() * (0.1 + x.abs()))
}

fn positive(shape: &[usize], r: &mut Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 0.5, 2.0, r)
}

/// Wraps a non-scalar `body` in a fixed random weighting so every output
/// entry contributes to the checked scalar.
fn case(
    name: impl Into<String>,
    seed: u64,
    inputs: Vec<Tensor<f64>>,
    body: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name: name.into(),
        inputs,
        body: Box::new(move |t, v| {
            let out = body(t, v)?;
            if t.value(out).numel() == 1 {
                Ok(out)
            } else {
                weighted_sum(t, out, seed)
            }
        }),
    }
}

fn op_cases(seed: u64, r: &mut Rng) -> Vec<Case> {
    let mut c = vec![
        case("matmul", seed, vec![randn(&[3, 4], r), randn(&[4, 5], r)], |t, v| t.matmul(v[0], v[1])),
        case("matmul_batched", seed, vec![randn(&[2, 3, 4], r), randn(&[2, 4, 5], r)], |t, v| {
            t.matmul(v[0], v[1])
        }),
        case("matmul_broadcast", seed, vec![randn(&[2, 3, 4], r), randn(&[4, 5], r)], |t, v| {
            t.matmul(v[0], v[1])
        }),
        case("transpose", seed, vec![randn(&[2, 3, 4], r)], |t, v| t.transpose(v[0])),
        case("permute", seed, vec![randn(&[2, 3, 4, 2], r)], |t, v| t.permute(v[0], &[0, 2, 1, 3])),
        case("reshape", seed, vec![randn(&[2, 3, 4], r)], |t, v| {
            let y = t.reshape(v[0], &[6, 4])?;
            t.square(y)
        }),
        case("add", seed, vec![randn(&[3, 4], r), randn(&[3, 4], r)], |t, v| t.add(v[0], v[1])),
        case("add_broadcast", seed, vec![randn(&[2, 3, 4], r), randn(&[4], r)], |t, v| t.add(v[0], v[1])),
        case("add_broadcast_swapped", seed, vec![randn(&[3, 4], r), randn(&[2, 3, 4], r)], |t, v| {
            t.add(v[0], v[1])
        }),
        case("sub_broadcast", seed, vec![randn(&[2, 3, 4], r), randn(&[3, 4], r)], |t, v| t.sub(v[0], v[1])),
        case("hadamard", seed, vec![randn(&[3, 4], r), randn(&[3, 4], r)], |t, v| t.hadamard(v[0], v[1])),
        case("hadamard_broadcast", seed, vec![randn(&[2, 3, 4], r), randn(&[4], r)], |t, v| {
            t.hadamard(v[0], v[1])
        }),
        case("add_per_row", seed, vec![randn(&[2, 3, 4], r), randn(&[2, 3], r)], |t, v| {
            t.add_per_row(v[0], v[1])
        }),
        case("mul_per_row", seed, vec![randn(&[2, 3, 4], r), randn(&[2, 3], r)], |t, v| {
            t.mul_per_row(v[0], v[1])
        }),
        case("scale", seed, vec![randn(&[3, 4], r)], |t, v| t.scale(v[0], -1.7)),
        case("add_scalar", seed, vec![randn(&[3, 4], r)], |t, v| {
            let y = t.add_scalar(v[0], 0.3)?;
            t.square(y)
        }),
        case("pow_inverse", seed, vec![positive(&[3, 4], r)], |t, v| t.pow(v[0], -1.0)),
        case("pow_fractional", seed, vec![positive(&[3, 4], r)], |t, v| t.pow(v[0], 2.5)),
        case("relu", seed, vec![away(&[3, 4], r)], |t, v| t.relu(v[0])),
        case("square", seed, vec![randn(&[3, 4], r)], |t, v| t.square(v[0])),
        case("sigmoid", seed, vec![randn(&[3, 4], r)], |t, v| t.sigmoid(v[0])),
        case("swish", seed, vec![randn(&[3, 4], r)], |t, v| t.swish(v[0])),
        case("gelu", seed, vec![randn(&[3, 4], r)], |t, v| t.gelu(v[0])),
        case("log", seed, vec![positive(&[3, 4], r)], |t, v| t.log(v[0])),
        case("exp", seed, vec![randn(&[3, 4], r)], |t, v| t.exp(v[0])),
        case("sum_last", seed, vec![randn(&[2, 3, 4], r)], |t, v| t.sum_last(v[0])),
        case("sum", seed, vec![randn(&[2, 3, 4], r)], |t, v| {
            let s = t.sum(v[0])?;
            t.square(s)
        }),
        case("row_softmax", seed, vec![randn(&[2, 3, 5], r)], |t, v| t.row_softmax(v[0])),
        case("masked_fill_softmax", seed, vec![randn(&[2, 4], r)], |t, v| {
            let keep = [true, false, true, true, true, true, false, false];
            let y = t.masked_fill(v[0], &keep, f64::NEG_INFINITY)?;
            t.row_softmax(y)
        }),
        case("masked_fill_zero", seed, vec![randn(&[2, 4], r)], |t, v| {
            let keep = [true, false, true, true, false, true, true, false];
            let y = t.masked_fill(v[0], &keep, 0.0)?;
            t.exp(y)
        }),
        case("mul_const", seed, vec![randn(&[3, 4], r)], {
            let c = randn(&[3, 4], r);
            move |t, v| t.mul_const(v[0], &c)
        }),
        case("dropout_train", seed, vec![randn(&[4, 6], r)], move |t, v| {
            let mut dr = rng::seeded(seed ^ 0xd0);
            t.dropout(v[0], 0.3, Mode::Train, &mut dr)
        }),
        case("rope", seed, vec![randn(&[2, 5, 6], r)], |t, v| {
            let pos = [0.0, 1.0, 2.0, 5.0, 9.0];
            t.rope(v[0], &pos, &[1.0, 0.3, 0.01])
        }),
        case("embedding", seed, vec![randn(&[7, 4], r)], |t, v| t.embedding(v[0], &[3, 0, 3, 6, 1, 3], &[2, 3])),
        case("softmax_cross_entropy", seed, vec![randn(&[5, 7], r)], |t, v| {
            t.softmax_cross_entropy(v[0], &[Some(2), None, Some(6), Some(0), None])
        }),
        case("shared_input", seed, vec![randn(&[3, 4], r)], |t, v| {
            let y = t.add(v[0], v[0])?;
            t.hadamard(y, v[0])
        }),
    ];
    for axis in 0..3 {
        for (kind, name) in [(ReduceKind::Sum, "sum"), (ReduceKind::Mean, "mean"), (ReduceKind::Var, "var")] {
            c.push(case(format!("reduce_{name}_axis{axis}"), seed, vec![randn(&[2, 3, 4], r)], move |t, v| {
                t.reduce(v[0], axis, kind)
            }));
        }
    }
    c
}

fn kernel_cases(seed: u64, r: &mut Rng) -> Vec<Case> {
    let mut c = Vec::new();
    for variant in KernelVariant::all() {
        for padded in [false, true] {
            let mut spec = AttentionKernelSpec::new(variant, 4, 8);
            // so the softmax_plus length factor differs from one at n = 5
            spec.base_len = 3;
            let name = format!("kernel_{variant}{}", if padded { "_padded" } else { "" });
            c.push(case(name, seed, vec![randn(&[2, 5, 4], r), randn(&[2, 5, 4], r)], move |t, v| {
                let lens = [5usize, 3];
                attention_scores(t, v[0], v[1], &spec, padded.then_some(&lens[..]))
            }));
        }
    }
    for rms in [false, true] {
        let cfg = NormConfig { eps: 1e-6, rms_mode: rms };
        let name = if rms { "var_norm_rms" } else { "var_norm" };
        c.push(case(name, seed, vec![randn(&[2, 3, 5], r)], move |t, v| var_norm(t, v[0], &cfg)));
    }
    c.push(case(
        "layer_norm",
        seed,
        vec![randn(&[3, 5], r), randn(&[5], r), randn(&[5], r)],
        |t, v| layer_norm(t, v[0], v[1], v[2], 1e-6),
    ));
    c.push(case("apply_rope", seed, vec![randn(&[4, 6], r)], |t, v| {
        apply_rope(t, v[0], &[3.0, 4.0, 5.0, 6.0], &RopeConfig::new(6))
    }));
    c.push(case("swish_kernel", seed, vec![randn(&[3, 4], r)], |t, v| swish(t, v[0])));
    c
}

fn block_cases(seed: u64, r: &mut Rng) -> Vec<Case> {
    let (d, f, s) = (8usize, 12usize, 4usize);
    let mut c = vec![case(
        "glu",
        seed,
        vec![randn(&[2, 4, d], r), randn(&[d, f], r), randn(&[d, f], r), randn(&[f, d], r)],
        |t, v| {
            let p = GluVars {
                w_u: v[1],
                w_v: v[2],
                w_o: v[3],
            };
            glu_forward(t, v[0], &p)
        },
    )];
    let gau_inputs = |r: &mut Rng| {
        let scale = |x: Tensor<f64>, k: f64| x.map(|e| e * k);
        vec![
            randn(&[2, 5, d], r),
            scale(randn(&[d, f], r), 0.4),
            scale(randn(&[d, f], r), 0.4),
            scale(randn(&[f, d], r), 0.3),
            scale(randn(&[d, s], r), 0.4),
            Tensor::uniform(&[s], 0.5, 1.5, r),
            scale(randn(&[s], r), 0.1),
            Tensor::uniform(&[s], 0.5, 1.5, r),
            scale(randn(&[s], r), 0.1),
        ]
    };
    for variant in KernelVariant::all() {
        let mut cfg = BlockConfig::new(d, s);
        cfg.d_ff = f;
        cfg.kernel.variant = variant;
        cfg.kernel.base_len = 3;
        let cfg_padded = cfg.clone();
        c.push(case(format!("gau_{variant}"), seed, gau_inputs(r), move |t, v| {
            let p = GauVars::from_slice(&v[1..]);
            let pos = [0.0, 1.0, 2.0, 3.0, 4.0];
            let mut unused = rng::seeded(0);
            Ok(gau_forward(t, v[0], &p, &cfg, &pos, None, Mode::Eval, &mut unused)?.out)
        }));
        if variant == KernelVariant::SoftmaxPlus || variant == KernelVariant::ScaledRelu2 {
            c.push(case(format!("gau_{variant}_padded"), seed, gau_inputs(r), move |t, v| {
                let p = GauVars::from_slice(&v[1..]);
                let pos = [0.0, 1.0, 2.0, 3.0, 4.0];
                let mut unused = rng::seeded(0);
                Ok(gau_forward(t, v[0], &p, &cfg_padded, &pos, Some(&[5, 2]), Mode::Eval, &mut unused)?.out)
            }));
        }
    }
    let mut train_cfg = BlockConfig::new(d, s);
    train_cfg.d_ff = f;
    train_cfg.hidden_dropout = 0.2;
    train_cfg.attn_dropout = 0.2;
    train_cfg.rope_both = false;
    c.push(case("gau_dropout_train", seed, gau_inputs(r), move |t, v| {
        let p = GauVars::from_slice(&v[1..]);
        let pos = [0.0, 1.0, 2.0, 3.0, 4.0];
        let mut dr = rng::seeded(seed ^ 0xd1);
        Ok(gau_forward(t, v[0], &p, &train_cfg, &pos, None, Mode::Train, &mut dr)?.out)
    }));

    for classic in [false, true] {
        let mut cfg = BaselineConfig::new(d, 2);
        cfg.classic_layer_norm = classic;
        let mut inputs = vec![randn(&[2, 4, d], r)];
        for shape in [[d, d], [d, d], [d, d], [d, d], [d, 4 * d], [4 * d, d]] {
            let fan_in = shape[0] as f64;
            inputs.push(randn(&shape, r).map(|x| x / fan_in.sqrt()));
        }
        if classic {
            for _ in 0..2 {
                inputs.push(Tensor::uniform(&[d], 0.5, 1.5, r));
                inputs.push(randn(&[d], r).map(|x| 0.1 * x));
            }
        }
        let name = if classic { "baseline_layer_norm" } else { "baseline" };
        c.push(case(name, seed, inputs, move |t, v| {
            let p = BaselineVars::from_slice(&v[1..]);
            let mut unused = rng::seeded(0);
            mhsa_ffn_forward(t, v[0], &p, &cfg, Mode::Eval, &mut unused)
        }));
    }
    c
}

fn tiny_model(tied: bool) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        d_h: 6,
        d_ff: 8,
        s: 4,
        base_len: 4,
        hidden_dropout: 0.0,
        attn_dropout: 0.0,
        vocab_size: 11,
        max_len: 8,
        tie_embeddings: tied,
        embedding_init_std: 0.5,
        ..ModelConfig::default()
    }
}

fn tiny_batch() -> Batch {
    Batch {
        batch: 2,
        len: 5,
        input_ids: vec![3, 7, MASK, 9, 5, 3, MASK, 6, PAD, PAD],
        targets: vec![None, None, Some(8), Some(9), None, None, Some(10), None, None, None],
        key_lens: vec![5, 3],
        positions: (0..5).map(|i| i as f64).collect(),
    }
}

fn model_inputs(cfg: &ModelConfig, r: &mut Rng) -> Vec<Tensor<f64>> {
    let params = gau_core::train::ModelParams::<f64>::init(cfg, r).expect("valid tiny model");
    use gau_core::gau::ParamSet;
    params
        .named()
        .into_iter()
        .map(|(name, t)| {
            if name.contains("gamma") {
                Tensor::uniform(t.shape(), 0.5, 1.5, r)
            } else if name.contains("beta") {
                randn(t.shape(), r).map(|x| 0.1 * x)
            } else {
                t.clone()
            }
        })
        .collect()
}

fn model_cases(seed: u64, r: &mut Rng) -> Vec<Case> {
    let tied = tiny_model(true);
    let untied = tiny_model(false);
    let mut c = Vec::new();
    let cfg = tied.clone();
    c.push(case("model_2layer_masked", seed, model_inputs(&tied, r), move |t, v| {
        let vars = ModelVars::from_slice(v, cfg.num_layers, false);
        let mut unused = rng::seeded(0);
        Ok(masked_forward(t, &vars, &cfg, &tiny_batch(), Mode::Eval, &mut unused)?.loss)
    }));
    let cfg = untied.clone();
    c.push(case("model_2layer_untied", seed, model_inputs(&untied, r), move |t, v| {
        let vars = ModelVars::from_slice(v, cfg.num_layers, true);
        let mut unused = rng::seeded(0);
        let out = model_forward(t, &vars, &cfg, &tiny_batch(), Mode::Eval, &mut unused)?;
        Ok(out.loss.expect("batch has masked positions"))
    }));
    c
}

/// Every case for one seed; inputs are drawn from that seed.
pub fn cases(seed: u64) -> Vec<Case> {
    let mut r = rng::keyed(seed, &[0x67c]);
    let mut all = op_cases(seed, &mut r);
    all.extend(kernel_cases(seed, &mut r));
    all.extend(block_cases(seed, &mut r));
    all.extend(model_cases(seed, &mut r));
    all
}

pub fn run(seeds: &[u64]) -> Result<Vec<Outcome>> {
    let cfg = GradCheckConfig::default();
    let mut out = Vec::new();
    for &seed in seeds {
        for c in cases(seed) {
            let report = grad_check(&c.body, &c.inputs, cfg)?;
            out.push(Outcome {
                name: c.name,
                seed,
                report,
            });
        }
    }
    Ok(out)
}
