//! Central finite-difference checks for every differentiable op and the
//! end-to-end RevFP + CSN graph.

use anyhow::{ensure, Result};
use rcnet_core::fixtures::synth_backbone;
use rcnet_core::gradcheck::{
    check_gradients, check_gradients_subset, GradCheck, DEFAULT_STEP, DEFAULT_TOLERANCE,
};
use rcnet_core::ops::DEFAULT_EPS;
use rcnet_core::rcnet::{init_params, model_on_tape};
use rcnet_core::{rng, Bound, Error, InitMode, Model, NeckConfig, Pyramid, Tape, Tensor, Var};

use super::{randn, CheckFn, Ctx, Outcome};

pub(super) const CHECKS: &[(&str, CheckFn)] = &[
    ("grad.backward_rules", backward_rules),
    ("grad.conv2d", conv2d),
    ("grad.upsample", upsample),
    ("grad.maxpool", maxpool),
    ("grad.reductions", reductions),
    ("grad.softmax", softmax),
    ("grad.elementwise", elementwise),
    ("grad.activations", activations),
    ("grad.shape_ops", shape_ops),
    ("grad.channel_norm", channel_norm),
    ("grad.composed", composed),
    ("grad.end_to_end", end_to_end),
];

type Build = dyn Fn(&mut Tape, &[Var]) -> rcnet_core::Result<Var>;

/// Worst relative error over a batch of op checks; each loss is the op
/// output projected on a seeded direction.
fn suite(seed: u64, cases: Vec<(Vec<Tensor>, Box<Build>)>) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for (inputs, build) in cases {
        ensure!(
            inputs.iter().all(|t| t.numel() <= 512),
            "grad-check inputs are limited to 512 elements"
        );
        let r = check_gradients(&inputs, DEFAULT_STEP, |t, v| {
            let y = build(t, v)?;
            let dir = randn(seed, "direction", t.shape(y));
            t.project(y, &dir)
        })?;
        worst = worst.max(r.max_error);
    }
    Ok(Outcome::at_most(worst, DEFAULT_TOLERANCE))
}

fn case(
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> rcnet_core::Result<Var> + 'static,
) -> (Vec<Tensor>, Box<Build>) {
    (inputs, Box::new(f))
}

/// Values at least `gap` away from zero, so relu switches sit outside the stencil.
fn away_from_zero(t: Tensor, gap: f64) -> Tensor {
    t.map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

/// A shuffled ladder of values 0.01 apart, so pooling windows have no ties.
fn distinct(seed: u64, name: &str, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let keys = rng::uniform(&mut rng::stream(seed, name), &[n], 0.0, 1.0);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| keys.data()[a].total_cmp(&keys.data()[b]));
    let mut data = vec![0.0; n];
    for (rank, &i) in order.iter().enumerate() {
        data[i] = rank as f64 * 0.01 - n as f64 * 0.005;
    }
    Tensor::new(shape, data).unwrap()
}

/// `d sum(x) = 1`, `d sum(x*x)/2 = x`, and a second backward is refused.
fn backward_rules(ctx: &Ctx) -> Result<Outcome> {
    let x = ctx.randn("backward.x", &[3, 4]);
    let mut tape = Tape::new();
    let v = tape.input(x.clone());
    let s = tape.sum(v)?;
    tape.backward(s)?;
    let mut worst = tape
        .grad(v)
        .unwrap()
        .data()
        .iter()
        .map(|g| (g - 1.0).abs())
        .fold(0.0, f64::max);
    let twice = matches!(tape.backward(s), Err(Error::BackwardTwice));

    let mut tape = Tape::new();
    let v = tape.input(x.clone());
    let sq = tape.mul(v, v)?;
    let s = tape.sum(sq)?;
    let half = tape.scale(s, 0.5)?;
    tape.backward(half)?;
    worst = worst.max(tape.grad(v).unwrap().max_abs_diff(&x));
    let out = Outcome::at_most(worst, 1e-15);
    Ok(Outcome {
        pass: out.pass && twice,
        ..out
    })
}

fn conv2d(ctx: &Ctx) -> Result<Outcome> {
    let s = ctx.cfg.seed;
    let mut cases = Vec::new();
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)] {
        let inputs = vec![
            randn(s, "x", &[2, 3, 6, 5]),
            randn(s, "w", &[4, 3, k, k]),
            randn(s, "b", &[4]),
        ];
        cases.push(case(inputs, move |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), stride, pad)
        }));
    }
    cases.push(case(
        vec![randn(s, "x", &[1, 2, 4, 4]), randn(s, "w", &[3, 2, 3, 3])],
        |t, v| t.conv2d(v[0], v[1], None, 1, 1),
    ));
    suite(s, cases)
}

fn upsample(ctx: &Ctx) -> Result<Outcome> {
    let s = ctx.cfg.seed;
    suite(
        s,
        vec![
            case(vec![randn(s, "x", &[2, 3, 3, 4])], |t, v| {
                t.upsample_bilinear_x2(v[0])
            }),
            case(vec![randn(s, "x", &[1, 2, 1, 1])], |t, v| {
                t.upsample_bilinear_x2(v[0])
            }),
        ],
    )
}

fn maxpool(ctx: &Ctx) -> Result<Outcome> {
    let s = ctx.cfg.seed;
    suite(
        s,
        vec![case(vec![distinct(s, "x", &[2, 3, 6, 4])], |t, v| {
            t.maxpool2d(v[0], 2, 2)
        })],
    )
}

fn reductions(ctx: &Ctx) -> Result<Outcome> {
    let s = ctx.cfg.seed;
    suite(
        s,
        vec![
            case(vec![randn(s, "x", &[2, 4, 7, 5])], |t, v| {
                t.global_avg_pool(v[0])
            }),
            case(vec![randn(s, "x", &[2, 3, 4, 2, 2])], |t, v| {
                t.mean_axes(v[0], &[0, 2])
            }),
            case(vec![randn(s, "x", &[3, 4])], |t, v| t.sum(v[0])),
        ],
    )
}

fn softmax(ctx: &Ctx) -> Result<Outcome> {
    let s = ctx.cfg.seed;
    suite(
        s,
        vec![
            case(vec![randn(s, "x", &[2, 3, 4, 4])], |t, v| {
                t.softmax(v[0], &[2, 3])
            }),
            case(vec![randn(s, "x", &[1, 3, 5, 2, 2])], |t, v| {
                t.softmax(v[0], &[2])
            }),
        ],
    )
}

fn elementwise(ctx: &Ctx) -> Result<Outcome> {
    let s = ctx.cfg.seed;
    let a = randn(s, "a", &[2, 3, 4, 4]);
    let b = randn(s, "b", &[2, 3, 4, 4]);
    let w = randn(s, "w", &[2, 1, 1, 1]);
    suite(
        s,
        vec![
            case(vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1])),
            case(vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])),
            case(vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1])),
            case(vec![a.clone(), w.clone()], |t, v| t.mul(v[0], v[1])),
            case(vec![randn(s, "c", &[3, 1, 1]), a.clone()], |t, v| {
                t.add(v[0], v[1])
            }),
            case(vec![a.clone()], |t, v| t.scale(v[0], -2.5)),
            case(vec![a.clone()], |t, v| t.offset(v[0], 0.7)),
            case(vec![w, a, b], |t, v| {
                let s = t.sigmoid(v[0])?;
                t.blend(s, v[1], v[2])
            }),
        ],
    )
}

fn activations(ctx: &Ctx) -> Result<Outcome> {
    let s = ctx.cfg.seed;
    suite(
        s,
        vec![
            case(vec![randn(s, "a", &[2, 3, 4, 4])], |t, v| t.sigmoid(v[0])),
            case(
                vec![away_from_zero(randn(s, "r", &[2, 3, 4, 4]), 0.05)],
                |t, v| t.relu(v[0]),
            ),
        ],
    )
}

fn shape_ops(ctx: &Ctx) -> Result<Outcome> {
    let s = ctx.cfg.seed;
    let a = randn(s, "a", &[1, 2, 3, 3]);
    suite(
        s,
        vec![
            case(vec![a.clone(), randn(s, "b", &[1, 3, 3, 3])], |t, v| {
                t.concat(&[v[0], v[1]], 1)
            }),
            case(vec![a.clone()], |t, v| t.reshape(v[0], &[2, 9])),
            case(vec![randn(s, "c", &[1, 2, 1, 3])], |t, v| {
                t.broadcast_to(v[0], &[2, 2, 4, 3])
            }),
            case(vec![randn(s, "s", &[2, 3, 5, 2, 2])], |t, v| {
                t.narrow(v[0], 2, 1, 3)
            }),
            case(vec![a], |t, v| {
                t.take(v[0], vec![0, 3, 3, 17, 5, 0], &[6], "take")
            }),
        ],
    )
}

fn channel_norm(ctx: &Ctx) -> Result<Outcome> {
    let s = ctx.cfg.seed;
    suite(
        s,
        vec![
            case(
                vec![
                    randn(s, "x", &[2, 3, 4, 4]),
                    randn(s, "g", &[3]),
                    randn(s, "b", &[3]),
                ],
                |t, v| t.channel_norm(v[0], v[1], v[2], DEFAULT_EPS),
            ),
            case(
                vec![
                    randn(s, "x5", &[1, 2, 3, 2, 2]),
                    randn(s, "g", &[2]),
                    randn(s, "b", &[2]),
                ],
                |t, v| t.channel_norm(v[0], v[1], v[2], DEFAULT_EPS),
            ),
        ],
    )
}

fn composed(ctx: &Ctx) -> Result<Outcome> {
    let s = ctx.cfg.seed;
    suite(
        s,
        vec![case(
            vec![randn(s, "x", &[2, 2, 4, 4]), randn(s, "w", &[2, 2, 3, 3])],
            |t, v| {
                let y = t.conv2d(v[0], v[1], None, 1, 1)?;
                let g = t.sigmoid(y)?;
                let p = t.mul(g, v[0])?;
                let m = t.global_avg_pool(p)?;
                t.add(p, m)
            },
        )],
    )
}

/// Elements checked per input tensor in the end-to-end check.
pub const E2E_SAMPLE: usize = 32;

fn sample(n: usize) -> Vec<usize> {
    if n <= E2E_SAMPLE {
        (0..n).collect()
    } else {
        (0..E2E_SAMPLE)
            .map(|i| i * n / E2E_SAMPLE + (n / E2E_SAMPLE) / 2)
            .collect()
    }
}

/// RevFP then CSN on the tiny geometry, through the stem, every parameter
/// tensor and every backbone level, with random parameters everywhere.
pub fn end_to_end_check(seed: u64) -> Result<GradCheck> {
    let cfg = NeckConfig {
        seed,
        ..NeckConfig::tiny()
    };
    let backbone = synth_backbone(&cfg)?;
    let store = init_params(Model::Rcnet, &cfg, InitMode::Generic);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let n_params = names.len();
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    let levels: Vec<usize> = backbone.levels().collect();
    inputs.extend(backbone.iter().map(|(_, t)| t.clone()));
    let dirs: Vec<Tensor> = cfg
        .levels()
        .map(|l| {
            let (h, w) = cfg.resolution(l);
            randn(
                seed,
                &format!("direction.l{l}"),
                &[cfg.batch, cfg.channels, h, w],
            )
        })
        .collect();

    Ok(check_gradients_subset(
        &inputs,
        DEFAULT_STEP,
        |_, n| sample(n),
        |t, v| {
            let params = Bound::from_vars(names.iter().map(String::as_str), &v[..n_params]);
            let c: Pyramid<Var> = levels
                .iter()
                .copied()
                .zip(v[n_params..].iter().copied())
                .collect();
            let out = model_on_tape(t, Model::Rcnet, &params, &cfg, &c)?;
            let mut loss: Option<Var> = None;
            for ((_, &p), dir) in out.iter().zip(&dirs) {
                let term = t.project(p, dir)?;
                loss = Some(match loss {
                    Some(acc) => t.add(acc, term)?,
                    None => term,
                });
            }
            Ok(loss.expect("at least one level"))
        },
    )?)
}

/// Kinks (relu or max-pool switches inside the stencil) are tolerated up to
/// this fraction of checked elements.
pub const MAX_KINK_FRACTION: f64 = 0.01;

fn end_to_end(ctx: &Ctx) -> Result<Outcome> {
    let r = end_to_end_check(ctx.cfg.seed)?;
    let out = Outcome::at_most(r.max_error, DEFAULT_TOLERANCE);
    let kinks_ok = (r.kinks as f64) <= MAX_KINK_FRACTION * r.elements as f64;
    Ok(Outcome {
        pass: out.pass && kinks_ok,
        ..out
    })
}
