use mtaffect::gradcheck::{check_architecture, check_model, CheckLoss, PARAM_TOLERANCE};
use mtaffect::nn::{Architecture, LayerSpec, Model, ParamGroup, Tensor, TrunkPreset, DEFAULT_INIT_SCALE};
use mtaffect::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn param<'a>(model: &'a Model, name: &str) -> &'a Tensor {
    &model.params().into_iter().find(|p| p.name == name).unwrap().value
}

/// Straight-line evaluation of one sample, written against nested vectors so
/// it shares no indexing code with the library.
fn oracle_forward(model: &Model, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let arch = model.architecture();
    let shapes = arch.layer_shapes().unwrap();
    let mut act: Vec<f64> = x.to_vec();
    for (i, layer) in arch.trunk.iter().enumerate() {
        act = match *layer {
            LayerSpec::Dense { in_dim, out_dim } => {
                let w = param(model, &format!("trunk.{i}.weight")).data();
                let b = param(model, &format!("trunk.{i}.bias")).data();
                let rows: Vec<&[f64]> = w.chunks(in_dim).collect();
                (0..out_dim)
                    .map(|o| b[o] + rows[o].iter().zip(&act).map(|(a, b)| a * b).sum::<f64>())
                    .collect()
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_size: k,
                stride,
            } => {
                let (h, w_in) = (shapes[i][1], shapes[i][2]);
                let (oh, ow) = (shapes[i + 1][1], shapes[i + 1][2]);
                let img: Vec<Vec<Vec<f64>>> = (0..in_channels)
                    .map(|c| (0..h).map(|r| act[(c * h + r) * w_in..(c * h + r + 1) * w_in].to_vec()).collect())
                    .collect();
                let wt = param(model, &format!("trunk.{i}.weight")).data();
                let b = param(model, &format!("trunk.{i}.bias")).data();
                let kern = |o: usize, c: usize, r: usize, s: usize| wt[o * in_channels * k * k + c * k * k + r * k + s];
                let mut out = Vec::new();
                for o in 0..out_channels {
                    for r in 0..oh {
                        for s in 0..ow {
                            let mut v = b[o];
                            for (c, plane) in img.iter().enumerate() {
                                for dr in 0..k {
                                    for ds in 0..k {
                                        v += kern(o, c, dr, ds) * plane[r * stride + dr][s * stride + ds];
                                    }
                                }
                            }
                            out.push(v);
                        }
                    }
                }
                out
            }
            LayerSpec::Relu => act.iter().map(|v| v.max(0.0)).collect(),
            LayerSpec::Flatten => act,
        };
    }
    let affine = |name: &str, input: &[f64]| -> Vec<f64> {
        let w = param(model, &format!("{name}.weight"));
        let b = param(model, &format!("{name}.bias")).data();
        let cols = w.shape()[1];
        w.data()
            .chunks(cols)
            .zip(b)
            .map(|(row, bias)| bias + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    };
    let feat: Vec<f64> = affine("feature", &act).into_iter().map(|v| v.max(0.0)).collect();
    (affine("expr_head", &feat), affine("au_head", &feat))
}

fn head_grads(model: &Model, group: ParamGroup) -> Vec<f64> {
    model
        .params_with_group()
        .into_iter()
        .filter(|(g, _)| *g == group)
        .flat_map(|(_, p)| p.grad.data().to_vec())
        .collect()
}

fn trunk_and_feature_grads(model: &Model) -> Vec<f64> {
    model
        .params_with_group()
        .into_iter()
        .filter(|(g, _)| matches!(g, ParamGroup::Trunk | ParamGroup::Feature))
        .flat_map(|(_, p)| p.grad.data().to_vec())
        .collect()
}

#[test]
fn dense_trunk_parameter_shapes() {
    let arch = Architecture::new(
        &[48],
        vec![LayerSpec::Dense { in_dim: 48, out_dim: 16 }, LayerSpec::Relu],
    )
    .unwrap();
    let model = Model::build(&arch, 7, DEFAULT_INIT_SCALE).unwrap();
    let expected: Vec<Vec<usize>> = vec![
        vec![16, 48],
        vec![16],
        vec![512, 16],
        vec![512],
        vec![7, 512],
        vec![7],
        vec![12, 512],
        vec![12],
    ];
    assert_eq!(model.param_shapes(), expected);
}

#[test]
fn build_is_deterministic_and_zero_scale_zeroes_logits() {
    let arch = TrunkPreset::SmallCnn.architecture(16).unwrap();
    let a = Model::build(&arch, 3, DEFAULT_INIT_SCALE).unwrap();
    let b = Model::build(&arch, 3, DEFAULT_INIT_SCALE).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, Model::build(&arch, 4, DEFAULT_INIT_SCALE).unwrap());

    let zero = Model::build(&arch, 3, 0.0).unwrap();
    let out = zero.forward(&random_tensor(&[3, 3, 16, 16], 1)).unwrap();
    assert_eq!(out.expr_logits.shape(), &[3, 7]);
    assert_eq!(out.au_logits.shape(), &[3, 12]);
    assert!(out.expr_logits.data().iter().chain(out.au_logits.data()).all(|&v| v == 0.0));
}

#[test]
fn forward_matches_straight_line_oracle() {
    for preset in [TrunkPreset::Mlp, TrunkPreset::SmallCnn] {
        for seed in 0..3 {
            let model = Model::build(&TrunkPreset::architecture(&preset, 9).unwrap(), seed, DEFAULT_INIT_SCALE).unwrap();
            let x = random_tensor(&[2, 3, 9, 9], 100 + seed);
            let out = model.forward(&x).unwrap();
            for s in 0..2 {
                let (e, a) = oracle_forward(&model, x.row(s));
                for (got, want) in out.expr_logits.row(s).iter().zip(&e).chain(out.au_logits.row(s).iter().zip(&a)) {
                    assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{preset:?} seed {seed}: {got} vs {want}");
                }
            }
        }
    }
}

#[test]
fn forward_rejects_wrong_input_shape() {
    let model = Model::build(&TrunkPreset::Mlp.architecture(8).unwrap(), 0, 1.0).unwrap();
    let err = model.forward(&Tensor::zeros(&[2, 3, 8, 7])).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }), "{err}");
}

#[test]
fn single_head_backward_leaves_other_head_zero() {
    let arch = TrunkPreset::SmallCnn.architecture(9).unwrap();
    let mut model = Model::build(&arch, 5, DEFAULT_INIT_SCALE).unwrap();
    let x = random_tensor(&[4, 3, 9, 9], 6);
    let ge = random_tensor(&[4, 7], 7);
    let ga = random_tensor(&[4, 12], 8);

    let out = model.forward(&x).unwrap();
    model.backward(&out.cache, Some(&ge), None).unwrap();
    assert!(head_grads(&model, ParamGroup::AuHead).iter().all(|&g| g == 0.0));
    assert!(head_grads(&model, ParamGroup::ExprHead).iter().any(|&g| g != 0.0));

    model.zero_grad();
    model.backward(&out.cache, None, Some(&ga)).unwrap();
    assert!(head_grads(&model, ParamGroup::ExprHead).iter().all(|&g| g == 0.0));
    assert!(head_grads(&model, ParamGroup::AuHead).iter().any(|&g| g != 0.0));
}

#[test]
fn shared_trunk_gradients_add_across_heads() {
    for preset in [TrunkPreset::Mlp, TrunkPreset::SmallCnn] {
        let arch = preset.architecture(9).unwrap();
        let mut model = Model::build(&arch, 11, DEFAULT_INIT_SCALE).unwrap();
        let x = random_tensor(&[3, 3, 9, 9], 12);
        let ge = random_tensor(&[3, 7], 13);
        let ga = random_tensor(&[3, 12], 14);
        let out = model.forward(&x).unwrap();

        model.backward(&out.cache, Some(&ge), None).unwrap();
        let expr_only = trunk_and_feature_grads(&model);
        model.zero_grad();
        model.backward(&out.cache, None, Some(&ga)).unwrap();
        let au_only = trunk_and_feature_grads(&model);
        model.zero_grad();
        model.backward(&out.cache, Some(&ge), Some(&ga)).unwrap();
        let both = trunk_and_feature_grads(&model);

        for ((e, a), b) in expr_only.iter().zip(&au_only).zip(&both) {
            assert!((e + a - b).abs() <= 1e-12, "{preset:?}: {e} + {a} != {b}");
        }
    }
}

#[test]
fn zero_logit_gradients_give_zero_parameter_gradients() {
    let arch = TrunkPreset::SmallCnn.architecture(9).unwrap();
    let mut model = Model::build(&arch, 2, DEFAULT_INIT_SCALE).unwrap();
    let out = model.forward(&random_tensor(&[2, 3, 9, 9], 3)).unwrap();
    model
        .backward(&out.cache, Some(&Tensor::zeros(&[2, 7])), Some(&Tensor::zeros(&[2, 12])))
        .unwrap();
    assert!(model.params().iter().all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
}

#[test]
fn forward_and_backward_are_repeatable_and_finite() {
    let arch = TrunkPreset::SmallCnn.architecture(9).unwrap();
    let x = random_tensor(&[3, 3, 9, 9], 21);
    let ge = random_tensor(&[3, 7], 22);
    let run = || {
        let mut model = Model::build(&arch, 20, DEFAULT_INIT_SCALE).unwrap();
        let out = model.forward(&x).unwrap();
        model.backward(&out.cache, Some(&ge), None).unwrap();
        (out.expr_logits, model)
    };
    let (la, ma) = run();
    let (lb, mb) = run();
    assert_eq!(la, lb);
    assert_eq!(ma, mb);
    assert!(la.all_finite());
    assert!(ma.params().iter().all(|p| p.grad.all_finite()));
}

#[test]
fn finite_difference_agreement_on_narrow_presets() {
    for preset in [TrunkPreset::Mlp, TrunkPreset::SmallCnn] {
        let arch = check_architecture(preset).unwrap();
        for loss in [CheckLoss::Focal { gamma: 2.0 }, CheckLoss::Bce] {
            let mut model = Model::build(&arch, 40, DEFAULT_INIT_SCALE).unwrap();
            let (n, err, worst) = check_model(&mut model, loss, 40, None).unwrap();
            assert_eq!(n, model.num_parameters());
            assert!(err < PARAM_TOLERANCE, "{preset:?} {loss:?}: {err:e} at {worst}");
        }
    }
}
