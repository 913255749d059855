//! Finite-difference suite over every differentiable layer and the full
//! model, run in f64 so central differences resolve the tolerance.

use std::sync::Arc;

use ctl_tensor::{grad_check_many, GradCheckReport, Tape, Tensor, Var};
use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend, transformer_block, AttnProj, BlockParams};
use crate::error::Result;
use crate::gate::{apply_gates, blend_residual, compute_gates, GateNet, GateVector};
use crate::layers::{Conv, Linear, ParamScope};
use crate::model::{init, param_layout, tile_loss, ModelConfig, ModelVars};
use crate::tokenizer::{detokenize, tokenize, Projection, ScaleTag, TokenMap};

pub const STEP: f64 = 1e-3;
pub const OP_TOL: f64 = 1e-3;
pub const MODEL_TOL: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.passed
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `Σ w ⊙ y` with a fixed random `w`, so no gradient is trivially uniform.
fn probe(t: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = t.constant(w.clone());
    let p = t.mul(y, wv)?;
    Ok(t.sum(p))
}

type Op = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    out_shape: Vec<usize>,
    op: Op,
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    out_shape: &[usize],
    op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        inputs,
        out_shape: out_shape.to_vec(),
        op: Box::new(op),
    }
}

fn named(names: &[&str], vars: &[Var]) -> IndexMap<String, Var> {
    names
        .iter()
        .map(|n| n.to_string())
        .zip(vars.iter().copied())
        .collect()
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut u = |s: &[usize]| uniform(rng, s);
    let d = 8;
    let attn_names = [
        "q_proj.weight",
        "q_proj.bias",
        "k_proj.weight",
        "k_proj.bias",
        "v_proj.weight",
        "v_proj.bias",
        "o_proj.weight",
        "o_proj.bias",
    ];
    let attn_inputs = |u: &mut dyn FnMut(&[usize]) -> Tensor<f64>| {
        let mut v = vec![u(&[9, d])];
        for _ in 0..4 {
            v.push(u(&[d, d]));
            v.push(u(&[d]));
        }
        v
    };
    let mask = crate::attention::window_mask(3, 3, 3);
    let mask_c = Arc::clone(&mask);
    let mut block_inputs = vec![u(&[9, d]), u(&[9, 1]).map(|v| 0.5 + 0.4 * v)];
    let block_layout = block_names(d);
    for (_, shape) in &block_layout {
        block_inputs.push(u(shape));
    }

    vec![
        case("matmul", vec![u(&[3, 4]), u(&[4, 2])], &[3, 2], |t, v| {
            Ok(t.matmul(v[0], v[1])?)
        }),
        case(
            "bmm",
            vec![u(&[2, 4, 3]), u(&[2, 2, 4])],
            &[2, 3, 2],
            |t, v| Ok(t.bmm(v[0], v[1], true, true)?),
        ),
        case(
            "conv2d",
            vec![u(&[1, 4, 4]), u(&[2, 1, 3, 3])],
            &[2, 4, 4],
            |t, v| Ok(t.conv2d(v[0], v[1], 1, 1)?),
        ),
        case("unfold", vec![u(&[2, 5, 5])], &[9, 18], |t, v| {
            Ok(t.unfold(v[0], 3, 2, 1)?)
        }),
        case("fold", vec![u(&[9, 18])], &[2, 5, 5], |t, v| {
            let g = ctl_tensor::PatchGeometry::new(2, 5, 5, 3, 2, 1)?;
            Ok(t.fold(v[0], g)?)
        }),
        case("softmax", vec![u(&[3, 5])], &[3, 5], |t, v| {
            Ok(t.softmax(v[0], 1)?)
        }),
        case(
            "masked_softmax",
            vec![u(&[2, 9, 9])],
            &[2, 9, 9],
            move |t, v| Ok(t.masked_softmax(v[0], &mask_c)?),
        ),
        case(
            "layernorm",
            vec![u(&[3, 5]), u(&[5]), u(&[5])],
            &[3, 5],
            |t, v| Ok(t.layernorm(v[0], v[1], v[2], 1e-5)?),
        ),
        case("gelu", vec![u(&[4, 4])], &[4, 4], |t, v| Ok(t.gelu(v[0]))),
        case("tanh", vec![u(&[4, 4])], &[4, 4], |t, v| Ok(t.tanh(v[0]))),
        case("sigmoid", vec![u(&[4, 4])], &[4, 4], |t, v| {
            Ok(t.sigmoid(v[0]))
        }),
        case("ln", vec![u(&[4, 4])], &[4, 4], |t, v| {
            let s = t.add_scalar(v[0], 2.0);
            Ok(t.ln(s)?)
        }),
        case(
            "add_mul_broadcast",
            vec![u(&[3, 4]), u(&[1, 4]), u(&[3, 1])],
            &[3, 4],
            |t, v| {
                let a = t.add(v[0], v[1])?;
                Ok(t.mul(a, v[2])?)
            },
        ),
        case("permute_reshape", vec![u(&[2, 3, 4])], &[4, 6], |t, v| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            Ok(t.reshape(p, &[4, 6])?)
        }),
        case("reduce", vec![u(&[3, 4])], &[1], |t, v| {
            let s = t.reduce_sum(v[0], 0)?;
            let m = t.reduce_mean(v[0], 1)?;
            let a = t.mul(s, s)?;
            let b = t.mul(m, m)?;
            let (a, b) = (t.sum(a), t.sum(b));
            Ok(t.add(a, b)?)
        }),
        case("mse", vec![u(&[3, 4]), u(&[3, 4])], &[1], |t, v| {
            Ok(t.mse(v[0], v[1])?)
        }),
        case(
            "embed_stem",
            vec![u(&[1, 8, 8]), u(&[2, 1, 3, 3]), u(&[2])],
            &[2, 8, 8],
            |t, v| {
                Conv {
                    weight: v[1],
                    bias: v[2],
                }
                .forward(t, v[0])
            },
        ),
        case(
            "t2t_round_trip",
            vec![
                u(&[1, 8, 8]),
                u(&[1, 8, 8]),
                u(&[98, 8]),
                u(&[8]),
                u(&[8, 98]),
                u(&[98]),
            ],
            &[2, 8, 8],
            |t, v| {
                let cfg = crate::tokenizer::TokenizerConfig {
                    stem_channels: 1,
                    embed_dim: 8,
                    token_hidden: 0,
                    ..Default::default()
                };
                let fwd = Projection::Linear(Linear {
                    weight: v[2],
                    bias: v[3],
                });
                let back = Projection::Linear(Linear {
                    weight: v[4],
                    bias: v[5],
                });
                let tm = tokenize(t, v[0], v[1], &fwd, &cfg)?;
                let a = t.gelu(tm.tokens);
                let tm = TokenMap::new(t, a, tm.grid_h, tm.grid_w, ScaleTag::MultiScale)?;
                detokenize(t, &tm, (8, 8), &back, &cfg)
            },
        ),
        case(
            "full_attention",
            attn_inputs(&mut u),
            &[9, d],
            move |t, v| {
                let vars = named(&attn_names, &v[1..]);
                let proj = AttnProj::bind(&ParamScope::new(&vars))?;
                Ok(attend(t, v[0], &proj, 2, None, None)?.output)
            },
        ),
        case(
            "local_attention",
            attn_inputs(&mut u),
            &[9, d],
            move |t, v| {
                let vars = named(&attn_names, &v[1..]);
                let proj = AttnProj::bind(&ParamScope::new(&vars))?;
                Ok(attend(t, v[0], &proj, 2, Some(&mask), None)?.output)
            },
        ),
        case(
            "compute_gates",
            vec![u(&[9, 2]), u(&[2, 4]), u(&[4]), u(&[4, 1]), u(&[1])],
            &[9, 1],
            |t, v| {
                let net = GateNet {
                    fc1: Linear {
                        weight: v[1],
                        bias: v[2],
                    },
                    fc2: Linear {
                        weight: v[3],
                        bias: v[4],
                    },
                };
                Ok(compute_gates(t, v[0], &net)?.g)
            },
        ),
        case(
            "apply_gates",
            vec![u(&[2, 4, 4]), u(&[4, 1]).map(|x| 0.5 + 0.4 * x)],
            &[2, 4, 4],
            |t, v| {
                let g = GateVector { g: v[1], len: 4 };
                let l = apply_gates(t, v[0], &g, 1.0)?;
                Ok(t.softmax(l, 2)?)
            },
        ),
        case(
            "blend_residual",
            vec![u(&[4, 3]), u(&[4, 3]), u(&[4, 1]).map(|x| 0.5 + 0.4 * x)],
            &[4, 3],
            |t, v| blend_residual(t, v[0], v[1], &GateVector { g: v[2], len: 4 }),
        ),
        case("transformer_block", block_inputs, &[9, d], move |t, v| {
            let names: Vec<&str> = block_layout.iter().map(|(n, _)| n.as_str()).collect();
            let vars = named(&names, &v[2..]);
            let bp = BlockParams::bind(&ParamScope::new(&vars))?;
            let tm = TokenMap::new(t, v[0], 3, 3, ScaleTag::MultiScale)?;
            let cfg = crate::attention::AttentionConfig {
                dim: d,
                heads: 2,
                mlp_ratio: 2,
                ..Default::default()
            };
            let gates = GateVector { g: v[1], len: 9 };
            Ok(transformer_block(t, &tm, &bp, &gates, 1.0, &cfg, 1)?
                .0
                .tokens)
        }),
    ]
}

/// Parameter names and shapes of one block with width `d` and FFN ratio 2.
fn block_names(d: usize) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut lin = |n: String, i: usize, o: usize| {
        out.push((format!("{n}.weight"), vec![i, o]));
        out.push((format!("{n}.bias"), vec![o]));
    };
    for b in ["local", "global"] {
        for p in ["q_proj", "k_proj", "v_proj", "o_proj"] {
            lin(format!("{b}.{p}"), d, d);
        }
    }
    lin("ffn.fc1".into(), d, 2 * d);
    lin("ffn.fc2".into(), 2 * d, d);
    for n in ["norm1", "norm2"] {
        out.push((format!("{n}.gain"), vec![d]));
        out.push((format!("{n}.bias"), vec![d]));
    }
    out.push(("alpha_raw".into(), vec![1]));
    out
}

/// Every per-op check at [`OP_TOL`].
pub fn check_ops(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = crate::rng::stream(seed, 0x6C, 0);
    let cases = op_cases(&mut rng);
    cases
        .into_iter()
        .map(|c| {
            let w = uniform(&mut rng, &c.out_shape);
            let op = c.op;
            let report = grad_check_many(
                |t, v| {
                    let y = op(t, v).map_err(to_tensor_err)?;
                    probe(t, y, &w).map_err(to_tensor_err)
                },
                &c.inputs,
                STEP,
                OP_TOL,
            );
            Ok(CheckOutcome {
                name: c.name.to_string(),
                report: report?,
            })
        })
        .collect()
}

fn to_tensor_err(e: crate::Error) -> ctl_tensor::TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => ctl_tensor::TensorError::Contract(other.to_string()),
    }
}

/// Every parameter of the full model against the per-tile MSE, at [`MODEL_TOL`].
pub fn check_model(cfg: &ModelConfig, seed: u64) -> Result<CheckOutcome> {
    let params = init(cfg, seed)?.cast::<f64>();
    let names: Vec<String> = param_layout(cfg).into_iter().map(|(n, _, _)| n).collect();
    let inputs: Vec<Tensor<f64>> = names
        .iter()
        .map(|n| params.get(n).unwrap().clone())
        .collect();
    let mut rng = crate::rng::stream(seed, 0x6D, 0);
    let t = cfg.tile_size;
    let noisy = Tensor::<f64>::from_fn(&[1, t, t], |_| rng.random_range(0.0..255.0));
    let clean = Tensor::<f64>::from_fn(&[1, t, t], |_| rng.random_range(0.0..255.0));
    let report = grad_check_many(
        |tape, vars| {
            let map: IndexMap<String, Var> =
                names.iter().cloned().zip(vars.iter().copied()).collect();
            let mv = ModelVars::bind(&map, cfg).map_err(to_tensor_err)?;
            let x = tape.constant(noisy.clone());
            let y = tape.constant(clean.clone());
            tile_loss(tape, cfg, &mv, x, y).map_err(to_tensor_err)
        },
        &inputs,
        STEP,
        MODEL_TOL,
    )?;
    Ok(CheckOutcome {
        name: format!("model end-to-end ({} parameters)", params.numel()),
        report,
    })
}

/// Per-op checks followed by the end-to-end model check.
pub fn grad_check_suite(cfg: &ModelConfig, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = check_ops(seed)?;
    out.push(check_model(cfg, seed)?);
    Ok(out)
}
