use prior_attn_core::autodiff::{grad_check, numeric_gradient, Tape, Tensor, Var};
use prior_attn_core::{Error, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn positive_tensor(shape: &[usize], seed: u64) -> Tensor {
    let t = random_tensor(shape, seed);
    Tensor::new(shape.to_vec(), t.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap()
}

/// Weighted sum with fixed irregular weights so every output coordinate
/// contributes a distinct sensitivity.
fn weighted_sum(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.5 + (i * 37 % 17) as f64 / 17.0).collect();
    let w = tape.constant(&shape, w)?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

const TOL: f64 = 1e-5;
const EPS: f64 = 1e-5;

#[test]
fn matmul_identity_and_hand_product() {
    let mut t = Tape::new();
    let i = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let p = t.matmul(i, m).unwrap();
    assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 4.0]);
    let a = t.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
    let b = t.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
    let p = t.matmul(a, b).unwrap();
    assert_eq!(t.value(p), &[11.0]);
}

#[test]
fn matmul_gradient_with_ones_is_row_sums_of_b() {
    let mut t = Tape::new();
    let a = t.variable(&[2, 3], vec![1.0, 0.0, 2.0, 0.0, 1.0, -1.0]).unwrap();
    let b = t.constant(&[3, 2], vec![1.0; 6]).unwrap();
    let p = t.matmul(a, b).unwrap();
    let s = t.sum(p).unwrap();
    t.backward(s).unwrap();
    // d sum(A·B) / dA = ones · Bᵀ
    assert_eq!(t.grad(a).unwrap(), &[2.0; 6]);
    let err = grad_check(
        |tp, x| {
            let b = tp.constant(&[3, 2], vec![1.0; 6])?;
            let p = tp.matmul(x, b)?;
            tp.sum(p)
        },
        &Tensor::new(vec![2, 3], vec![1.0, 0.0, 2.0, 0.0, 1.0, -1.0]).unwrap(),
        EPS,
    )
    .unwrap();
    assert!(err < TOL);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
    match t.matmul(a, b) {
        Err(Error::Dimension { detail, .. }) => {
            assert!(detail.contains("[2, 3]"), "{detail}");
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn batched_matmul_gradients() {
    for (sa, sb) in [
        (vec![2, 3, 4, 5], vec![2, 3, 5, 2]),
        (vec![2, 3, 4, 5], vec![5, 2]),
        (vec![2, 1, 4, 5], vec![3, 5, 2]),
    ] {
        let bt = random_tensor(&sb, 9);
        let err = grad_check(
            |tp, x| {
                let b = tp.constant(bt.shape(), bt.data().to_vec())?;
                let p = tp.matmul(x, b)?;
                weighted_sum(tp, p)
            },
            &random_tensor(&sa, 3),
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "{sa:?} x {sb:?}: {err}");
        let at = random_tensor(&sa, 4);
        let err = grad_check(
            |tp, x| {
                let a = tp.constant(at.shape(), at.data().to_vec())?;
                let p = tp.matmul(a, x)?;
                weighted_sum(tp, p)
            },
            &random_tensor(&sb, 5),
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "{sa:?} x {sb:?} wrt b: {err}");
    }
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.constant(&[2], vec![0.0, 0.0]).unwrap();
    let y = t.softmax_lastdim(x, None).unwrap();
    assert_eq!(t.value(y), &[0.5, 0.5]);

    let x = t.constant(&[2], vec![1.0, 1.0]).unwrap();
    let b = t.constant(&[2], vec![0.0, f64::NEG_INFINITY]).unwrap();
    let y = t.softmax_lastdim(x, Some(b)).unwrap();
    assert_eq!(t.value(y), &[1.0, 0.0]);

    let x = t.constant(&[2], vec![1f64.ln(), 3f64.ln()]).unwrap();
    let y = t.softmax_lastdim(x, None).unwrap();
    assert!((t.value(y)[0] - 0.25).abs() < 1e-15);
    assert!((t.value(y)[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_all_masked_row_is_zero() {
    let mut t = Tape::new();
    let x = t.variable(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = t
        .constant(&[2, 2], vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, 0.0])
        .unwrap();
    let y = t.softmax_lastdim(x, Some(b)).unwrap();
    assert_eq!(&t.value(y)[..2], &[0.0, 0.0]);
    let s = weighted_sum(&mut t, y).unwrap();
    t.backward(s).unwrap();
    assert!(t.grad(x).unwrap().iter().all(|g| g.is_finite()));
}

#[test]
fn softmax_rejects_nan() {
    let mut t = Tape::new();
    let x = t.constant(&[3], vec![0.0, f64::NAN, 1.0]).unwrap();
    assert!(matches!(
        t.softmax_lastdim(x, None),
        Err(Error::Numeric { index: 1, .. })
    ));
}

#[test]
fn softmax_gradients_wrt_input_and_bias() {
    let bias = random_tensor(&[4, 4], 2);
    let err = grad_check(
        |tp, x| {
            let b = tp.constant(&[4, 4], bias.data().to_vec())?;
            let y = tp.softmax_lastdim(x, Some(b))?;
            weighted_sum(tp, y)
        },
        &random_tensor(&[3, 4, 4], 1),
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
    let xs = random_tensor(&[3, 4, 4], 6);
    let err = grad_check(
        |tp, b| {
            let x = tp.constant(xs.shape(), xs.data().to_vec())?;
            let y = tp.softmax_lastdim(x, Some(b))?;
            weighted_sum(tp, y)
        },
        &bias,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn log_softmax_gradient() {
    let err = grad_check(
        |tp, x| {
            let y = tp.log_softmax_lastdim(x)?;
            weighted_sum(tp, y)
        },
        &random_tensor(&[5, 3], 8),
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn unary_examples() {
    let mut t = Tape::new();
    let x = t.constant(&[1], vec![0.0]).unwrap();
    let y = t.softplus(x).unwrap();
    assert!((t.item(y) - 2f64.ln()).abs() < 1e-15);

    let x = t.variable(&[1], vec![5.0]).unwrap();
    let y = t.clamp(x, 0.0, 1.0).unwrap();
    assert_eq!(t.item(y), 1.0);
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0.0]);

    let mut t = Tape::new();
    let x = t.variable(&[1], vec![-3.0]).unwrap();
    let y = t.square(x).unwrap();
    assert_eq!(t.item(y), 9.0);
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[-6.0]);
}

#[test]
fn unary_domain_errors_report_index() {
    let mut t = Tape::new();
    let x = t.constant(&[3], vec![1.0, 2.0, 0.0]).unwrap();
    assert!(matches!(t.log(x), Err(Error::Numeric { index: 2, .. })));
    let x = t.constant(&[2], vec![-1.0, 2.0]).unwrap();
    assert!(matches!(t.sqrt(x), Err(Error::Numeric { index: 0, .. })));
}

#[test]
fn unary_gradients() {
    type F = fn(&mut Tape, Var) -> Result<Var>;
    let ops: [(&str, F); 9] = [
        ("exp", |t, x| t.exp(x)),
        ("square", |t, x| t.square(x)),
        ("softplus", |t, x| t.softplus(x)),
        ("gelu", |t, x| t.gelu(x)),
        // bounds chosen away from the sampled values
        ("clamp", |t, x| t.clamp(x, -0.55, 0.65)),
        ("negate", |t, x| t.neg(x)),
        ("scale", |t, x| t.scale(x, -2.5)),
        ("offset", |t, x| t.offset(x, 0.75)),
        ("tanh-like", |t, x| {
            let e = t.exp(x)?;
            let d = t.offset(e, 1.0)?;
            t.div(e, d)
        }),
    ];
    for (name, f) in ops {
        let x = random_tensor(&[12], 11);
        let x = Tensor::new(
            vec![12],
            x.data()
                .iter()
                .map(|v| {
                    if (v + 0.55).abs() < 1e-3 || (v - 0.65).abs() < 1e-3 {
                        v + 0.01
                    } else {
                        *v
                    }
                })
                .collect(),
        )
        .unwrap();
        let err = grad_check(
            |tp, v| {
                let y = f(tp, v)?;
                weighted_sum(tp, y)
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "{name}: {err}");
    }
    for (name, f) in [("log", (|t: &mut Tape, x| t.log(x)) as F), ("sqrt", |t, x| t.sqrt(x))] {
        let err = grad_check(
            |tp, v| {
                let y = f(tp, v)?;
                weighted_sum(tp, y)
            },
            &positive_tensor(&[12], 12),
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "{name}: {err}");
    }
}

#[test]
fn binary_examples() {
    let mut t = Tape::new();
    let x = t.constant(&[2], vec![2.0, 3.0]).unwrap();
    let z = t.constant(&[2], vec![0.0, 0.0]).unwrap();
    let y = t.add(x, z).unwrap();
    assert_eq!(t.value(y), &[2.0, 3.0]);
    let w = t.constant(&[2], vec![4.0, 5.0]).unwrap();
    let y = t.mul(x, w).unwrap();
    assert_eq!(t.value(y), &[8.0, 15.0]);
    let zero = t.constant(&[2], vec![1.0, 0.0]).unwrap();
    assert!(matches!(t.div(x, zero), Err(Error::Numeric { index: 1, .. })));
    let bad = t.constant(&[3], vec![1.0; 3]).unwrap();
    assert!(matches!(t.add(x, bad), Err(Error::Dimension { .. })));
}

#[test]
fn binary_broadcast_gradients() {
    type F = fn(&mut Tape, Var, Var) -> Result<Var>;
    let ops: [(&str, F); 4] = [
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
        ("div", |t, a, b| t.div(a, b)),
    ];
    let shapes: [(&[usize], &[usize]); 4] = [
        (&[3, 4], &[3, 4]),
        (&[2, 3, 4], &[4]),
        (&[2, 3, 4], &[2, 1, 1]),
        (&[2, 1, 4], &[3, 1]),
    ];
    for (name, f) in ops {
        for (sa, sb) in shapes {
            let other = positive_tensor(sb, 21);
            let err = grad_check(
                |tp, a| {
                    let b = tp.constant(other.shape(), other.data().to_vec())?;
                    let y = f(tp, a, b)?;
                    weighted_sum(tp, y)
                },
                &random_tensor(sa, 22),
                EPS,
            )
            .unwrap();
            assert!(err < TOL, "{name} wrt a {sa:?},{sb:?}: {err}");
            let first = random_tensor(sa, 23);
            let err = grad_check(
                |tp, b| {
                    let a = tp.constant(first.shape(), first.data().to_vec())?;
                    let y = f(tp, a, b)?;
                    weighted_sum(tp, y)
                },
                &positive_tensor(sb, 24),
                EPS,
            )
            .unwrap();
            assert!(err < TOL, "{name} wrt b {sa:?},{sb:?}: {err}");
        }
    }
}

#[test]
fn reduce_examples() {
    let mut t = Tape::new();
    let x = t.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let s = t.sum(x).unwrap();
    assert_eq!(t.item(s), 6.0);
    let c = t.constant(&[2, 2], vec![1.5; 4]).unwrap();
    let m = t.mean(c).unwrap();
    assert_eq!(t.item(m), 1.5);
    let x = t.variable(&[3], vec![1.0, 3.0, 3.0]).unwrap();
    let m = t.max(x).unwrap();
    assert_eq!(t.item(m), 3.0);
    t.backward(m).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    assert!(matches!(t.sum_axis(x, 1), Err(Error::Dimension { .. })));
}

#[test]
fn reduce_axis_gradients() {
    for axis in 0..3 {
        for kind in 0..3 {
            let err = grad_check(
                |tp, x| {
                    let y = match kind {
                        0 => tp.sum_axis(x, axis)?,
                        1 => tp.mean_axis(x, axis)?,
                        _ => tp.reduce(x, prior_attn_core::autodiff::ReduceOp::Max, Some(axis))?,
                    };
                    weighted_sum(tp, y)
                },
                &random_tensor(&[2, 3, 4], 31 + axis as u64),
                EPS,
            )
            .unwrap();
            assert!(err < TOL, "axis {axis} kind {kind}: {err}");
        }
    }
}

#[test]
fn structural_gradients() {
    let err = grad_check(
        |tp, x| {
            let y = tp.permute(x, &[2, 0, 1])?;
            let y = tp.reshape(y, &[4, 6])?;
            let y = tp.transpose_last2(y)?;
            weighted_sum(tp, y)
        },
        &random_tensor(&[2, 3, 4], 41),
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
    let err = grad_check(
        |tp, x| {
            let y = tp.gather_rows(x, &[2, 0, 2, 1])?;
            weighted_sum(tp, y)
        },
        &random_tensor(&[3, 5], 42),
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn permute_matches_index_formula() {
    let mut t = Tape::new();
    let data: Vec<f64> = (0..24).map(f64::from).collect();
    let x = t.constant(&[2, 3, 4], data).unwrap();
    let y = t.permute(x, &[2, 0, 1]).unwrap();
    assert_eq!(t.shape(y), &[4, 2, 3]);
    for c in 0..4 {
        for a in 0..2 {
            for b in 0..3 {
                assert_eq!(t.value(y)[(c * 2 + a) * 3 + b], ((a * 3 + b) * 4 + c) as f64);
            }
        }
    }
    assert!(t.permute(x, &[0, 0, 1]).is_err());
}

#[test]
fn gather_rejects_out_of_range() {
    let mut t = Tape::new();
    let x = t.constant(&[3, 2], vec![0.0; 6]).unwrap();
    assert!(matches!(t.gather_rows(x, &[3]), Err(Error::Index(_))));
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.variable(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let s = t.sum(x).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0; 3]);

    let mut t = Tape::new();
    let x = t.variable(&[2], vec![1.0, 2.0]).unwrap();
    let sq = t.square(x).unwrap();
    let s = t.sum(sq).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[4.0, 8.0]);
    t.zero_grad();
    assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0]);
    assert!(matches!(t.backward(sq), Err(Error::Contract(_))));
}

#[test]
fn reused_variable_accumulates_all_paths() {
    let mut t = Tape::new();
    let x = t.variable(&[1], vec![3.0]).unwrap();
    let y = t.mul(x, x).unwrap();
    let z = t.add(y, x).unwrap();
    t.backward(z).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[7.0]);
}

#[test]
fn grad_check_examples() {
    let x = random_tensor(&[6], 51);
    let err = grad_check(
        |tp, v| {
            let s = tp.square(v)?;
            tp.sum(s)
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
    let err = grad_check(|tp, _| Ok(tp.scalar_constant(4.0)), &x, EPS).unwrap();
    assert_eq!(err, 0.0);
    assert!(grad_check(|tp, v| tp.sum(v), &x, 0.5).is_err());
}

#[test]
fn numeric_gradient_of_quadratic() {
    let g = numeric_gradient(|x| Ok(x[0] * x[0] + 3.0 * x[1]), &[2.0, 1.0], 1e-4).unwrap();
    assert!((g[0] - 4.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let x = random_tensor(&[3, 4, 4], 61);
        let mut t = Tape::new();
        let v = t.variable(x.shape(), x.data().to_vec()).unwrap();
        let w = t.constant(&[4, 4], random_tensor(&[4, 4], 62).data().to_vec()).unwrap();
        let p = t.matmul(v, w).unwrap();
        let s = t.softmax_lastdim(p, None).unwrap();
        let l = weighted_sum(&mut t, s).unwrap();
        t.backward(l).unwrap();
        t.grad(v).unwrap().iter().map(|g| g.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_normalized(
        xs in prop::collection::vec(-30.0f64..30.0, 12),
        mask in prop::collection::vec(any::<bool>(), 12),
    ) {
        let mut t = Tape::new();
        let x = t.constant(&[3, 4], xs).unwrap();
        let mut bias: Vec<f64> = mask.iter().map(|&m| if m { f64::NEG_INFINITY } else { 0.0 }).collect();
        for r in 0..3 {
            bias[r * 4] = 0.0;
        }
        let b = t.constant(&[3, 4], bias.clone()).unwrap();
        let y = t.softmax_lastdim(x, Some(b)).unwrap();
        for (row, brow) in t.value(y).chunks(4).zip(bias.chunks(4)) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            for (w, b) in row.iter().zip(brow) {
                prop_assert!(*w >= 0.0);
                if b.is_infinite() {
                    prop_assert_eq!(*w, 0.0);
                }
            }
        }
    }

    #[test]
    fn elementwise_chain_grad_checks(seed in 0u64..1000) {
        let x = random_tensor(&[2, 5], seed);
        let err = grad_check(
            |tp, v| {
                let a = tp.softplus(v)?;
                // shifted clear of the stationary point of gelu near -0.75
                let shifted = tp.offset(v, 1.0)?;
                let b = tp.gelu(shifted)?;
                let c = tp.mul(a, b)?;
                let d = tp.log_softmax_lastdim(c)?;
                weighted_sum(tp, d)
            },
            &x,
            EPS,
        ).unwrap();
        prop_assert!(err < TOL, "{}", err);
    }

    #[test]
    fn sum_of_grads_is_linear(xs in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let n = xs.len();
        let mut t = Tape::new();
        let x = t.variable(&[n], xs).unwrap();
        let y = t.scale(x, 3.0).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        prop_assert!(t.grad(x).unwrap().iter().all(|&g| g == 3.0));
    }
}
