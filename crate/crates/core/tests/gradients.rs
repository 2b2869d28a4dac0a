use rcnet_core::fixtures::synth_backbone;
use rcnet_core::gradcheck::{
    check_gradients, check_gradients_subset, DEFAULT_STEP, DEFAULT_TOLERANCE,
};
use rcnet_core::rcnet::{init_params, model_on_tape};
use rcnet_core::{rng, Bound, InitMode, Model, NeckConfig, Pyramid, Result, Tape, Tensor, Var};

fn randn(name: &str, shape: &[usize]) -> Tensor {
    rng::normal(&mut rng::stream(11, name), shape, 1.0)
}

/// Values kept at least `gap` away from zero, so relu kinks sit far from
/// the finite-difference stencil.
fn away_from_zero(name: &str, shape: &[usize], gap: f64) -> Tensor {
    randn(name, shape).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

/// A permutation of evenly spaced values, so pooling windows have no ties.
fn distinct(name: &str, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let keys = rng::uniform(&mut rng::stream(11, name), &[n], 0.0, 1.0);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| keys.data()[a].total_cmp(&keys.data()[b]));
    let mut data = vec![0.0; n];
    for (rank, &i) in order.iter().enumerate() {
        data[i] = rank as f64 * 0.01 - n as f64 * 0.005;
    }
    Tensor::new(shape, data).unwrap()
}

fn projected(tape: &mut Tape, y: Var) -> Result<Var> {
    let dir = randn("direction", tape.shape(y));
    tape.project(y, &dir)
}

fn assert_grad<F>(label: &str, inputs: &[Tensor], build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    for t in inputs {
        assert!(t.numel() <= 512, "{label}: input too large");
    }
    let r = check_gradients(inputs, DEFAULT_STEP, |t, v| {
        let y = build(t, v)?;
        projected(t, y)
    })
    .unwrap();
    assert!(r.passes(DEFAULT_TOLERANCE), "{label}: {r:?}");
}

#[test]
fn conv2d_gradients() {
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)] {
        let inputs = [
            randn("x", &[2, 3, 6, 5]),
            randn("w", &[4, 3, k, k]),
            randn("b", &[4]),
        ];
        assert_grad(&format!("conv s{stride} p{pad} k{k}"), &inputs, |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), stride, pad)
        });
    }
    assert_grad(
        "conv no bias",
        &[randn("x", &[1, 2, 4, 4]), randn("w", &[3, 2, 3, 3])],
        |t, v| t.conv2d(v[0], v[1], None, 1, 1),
    );
}

#[test]
fn resampling_gradients() {
    assert_grad("upsample", &[randn("x", &[2, 3, 3, 4])], |t, v| {
        t.upsample_bilinear_x2(v[0])
    });
    assert_grad("upsample 1x1", &[randn("x", &[1, 2, 1, 1])], |t, v| {
        t.upsample_bilinear_x2(v[0])
    });
    assert_grad("maxpool", &[distinct("x", &[2, 3, 6, 4])], |t, v| {
        t.maxpool2d(v[0], 2, 2)
    });
}

#[test]
fn reduction_gradients() {
    assert_grad("gap", &[randn("x", &[2, 4, 7, 5])], |t, v| {
        t.global_avg_pool(v[0])
    });
    assert_grad("mean", &[randn("x", &[2, 3, 4, 2, 2])], |t, v| {
        t.mean_axes(v[0], &[0, 2])
    });
    assert_grad("softmax spatial", &[randn("x", &[2, 3, 4, 4])], |t, v| {
        t.softmax(v[0], &[2, 3])
    });
    assert_grad("softmax scale", &[randn("x", &[1, 3, 5, 2, 2])], |t, v| {
        t.softmax(v[0], &[2])
    });
    assert_grad("sum", &[randn("x", &[3, 4])], |t, v| t.sum(v[0]));
}

#[test]
fn elementwise_gradients() {
    let a = randn("a", &[2, 3, 4, 4]);
    let b = randn("b", &[2, 3, 4, 4]);
    let w = randn("w", &[2, 1, 1, 1]);
    assert_grad("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    assert_grad("sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    assert_grad("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    assert_grad("mul broadcast", &[a.clone(), w.clone()], |t, v| {
        t.mul(v[0], v[1])
    });
    assert_grad(
        "add broadcast",
        &[randn("c", &[3, 1, 1]), a.clone()],
        |t, v| t.add(v[0], v[1]),
    );
    assert_grad("scale", std::slice::from_ref(&a), |t, v| {
        t.scale(v[0], -2.5)
    });
    assert_grad("offset", std::slice::from_ref(&a), |t, v| {
        t.offset(v[0], 0.7)
    });
    assert_grad("sigmoid", std::slice::from_ref(&a), |t, v| t.sigmoid(v[0]));
    assert_grad(
        "relu",
        &[away_from_zero("r", &[2, 3, 4, 4], 0.05)],
        |t, v| t.relu(v[0]),
    );
    assert_grad("blend", &[w, a, b], |t, v| {
        let s = t.sigmoid(v[0])?;
        t.blend(s, v[1], v[2])
    });
}

#[test]
fn shape_gradients() {
    let a = randn("a", &[1, 2, 3, 3]);
    let b = randn("b", &[1, 3, 3, 3]);
    assert_grad("concat", &[a.clone(), b], |t, v| t.concat(&[v[0], v[1]], 1));
    assert_grad("reshape", std::slice::from_ref(&a), |t, v| {
        t.reshape(v[0], &[2, 9])
    });
    assert_grad("broadcast", &[randn("c", &[1, 2, 1, 3])], |t, v| {
        t.broadcast_to(v[0], &[2, 2, 4, 3])
    });
    assert_grad("narrow", &[randn("s", &[2, 3, 5, 2, 2])], |t, v| {
        t.narrow(v[0], 2, 1, 3)
    });
    assert_grad("take repeats", &[a], |t, v| {
        t.take(v[0], vec![0, 3, 3, 17, 5, 0], &[6], "take")
    });
}

#[test]
fn channel_norm_gradients() {
    let inputs = [
        randn("x", &[2, 3, 4, 4]),
        randn("g", &[3]),
        randn("b", &[3]),
    ];
    assert_grad("norm", &inputs, |t, v| {
        t.channel_norm(v[0], v[1], v[2], 1e-5)
    });
    assert_grad(
        "norm rank 5",
        &[
            randn("x5", &[1, 2, 3, 2, 2]),
            randn("g", &[2]),
            randn("b", &[2]),
        ],
        |t, v| t.channel_norm(v[0], v[1], v[2], 1e-5),
    );
}

#[test]
fn composed_graph_gradients() {
    let inputs = [randn("x", &[2, 2, 4, 4]), randn("w", &[2, 2, 3, 3])];
    assert_grad("composed", &inputs, |t, v| {
        let y = t.conv2d(v[0], v[1], None, 1, 1)?;
        let s = t.sigmoid(y)?;
        let p = t.mul(s, v[0])?;
        let g = t.global_avg_pool(p)?;
        t.add(p, g)
    });
}

/// Every element of small tensors, 32 evenly spaced elements of larger ones.
fn sample(n: usize) -> Vec<usize> {
    const MAX: usize = 32;
    if n <= MAX {
        (0..n).collect()
    } else {
        (0..MAX).map(|i| i * n / MAX + (n / MAX) / 2).collect()
    }
}

/// End-to-end RevFP followed by CSN on the tiny configuration, through the
/// stem, every parameter tensor and every backbone level.
#[test]
fn revfp_csn_end_to_end_gradients() {
    let cfg = NeckConfig::tiny();
    let backbone = synth_backbone(&cfg).unwrap();
    let store = init_params(Model::Rcnet, &cfg, InitMode::Generic);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    let levels: Vec<usize> = backbone.levels().collect();
    inputs.extend(backbone.iter().map(|(_, t)| t.clone()));
    let n_params = names.len();

    let out_dirs: Vec<Tensor> = cfg
        .levels()
        .map(|l| {
            let (h, w) = cfg.resolution(l);
            randn(&format!("dir{l}"), &[cfg.batch, cfg.channels, h, w])
        })
        .collect();

    let r = check_gradients_subset(
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
            for ((_, &p), dir) in out.iter().zip(&out_dirs) {
                let term = t.project(p, dir)?;
                loss = Some(match loss {
                    Some(acc) => t.add(acc, term)?,
                    None => term,
                });
            }
            Ok(loss.unwrap())
        },
    )
    .unwrap();
    assert!(r.passes(DEFAULT_TOLERANCE), "{r:?}");
    assert!(r.kinks * 100 <= r.elements, "{r:?}");
    assert!(r.elements > 1000, "{}", r.elements);
}
