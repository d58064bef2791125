//! Finite-difference checks for every primitive.
//!
//! Each case wraps one primitive in `sum(op(inputs) * W)` for a fixed,
//! non-uniform weight tensor `W`, so every output coordinate contributes a
//! distinct amount to the scalar under test.

use crate::error::Result;
use crate::gradcheck::check_gradients;
use crate::ops::Primitive;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub struct PrimitiveCase {
    pub name: &'static str,
    pub primitive: Primitive,
    pub shapes: Vec<Vec<usize>>,
    /// Inputs must be strictly positive (log).
    pub positive: bool,
}

fn case(name: &'static str, primitive: Primitive, shapes: &[&[usize]]) -> PrimitiveCase {
    PrimitiveCase {
        name,
        primitive,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        positive: false,
    }
}

pub fn primitive_cases() -> Vec<PrimitiveCase> {
    vec![
        case("add", Primitive::Add, &[&[2, 3], &[2, 3]]),
        case("add_scalar", Primitive::Add, &[&[], &[2, 3]]),
        case("sub", Primitive::Sub, &[&[3, 2], &[3, 2]]),
        case("mul", Primitive::Mul, &[&[2, 3], &[2, 3]]),
        case("mul_scalar", Primitive::Mul, &[&[2, 2], &[]]),
        case("scale", Primitive::Scale(-1.7), &[&[4]]),
        case("shift", Primitive::Shift(0.3), &[&[4]]),
        case("matmul", Primitive::MatMul, &[&[2, 3], &[3, 4]]),
        case(
            "conv2d",
            Primitive::Conv2d {
                stride: 1,
                padding: 1,
            },
            &[&[2, 2, 4, 5], &[3, 2, 3, 3], &[3]],
        ),
        case(
            "conv2d_strided",
            Primitive::Conv2d {
                stride: 2,
                padding: 1,
            },
            &[&[1, 2, 5, 6], &[2, 2, 3, 3], &[2]],
        ),
        case(
            "conv_pool",
            Primitive::ConvPool {
                stride: 2,
                padding: 1,
                pool: 2,
            },
            &[&[2, 1, 7, 9], &[3, 1, 3, 3], &[3]],
        ),
        case(
            "max_pool2d",
            Primitive::MaxPool2d { size: 2 },
            &[&[1, 2, 4, 5]],
        ),
        case("relu", Primitive::Relu, &[&[3, 4]]),
        case("exp", Primitive::Exp, &[&[3, 2]]),
        PrimitiveCase {
            positive: true,
            ..case("log", Primitive::Log, &[&[3, 2]])
        },
        case("sum", Primitive::Sum, &[&[2, 3]]),
        case("mean", Primitive::Mean { axis: 1 }, &[&[2, 3, 2]]),
        case("max", Primitive::Max { axis: 0 }, &[&[3, 4]]),
        case("softmax", Primitive::Softmax { axis: 1 }, &[&[3, 4]]),
        case("log_softmax", Primitive::LogSoftmax { axis: 0 }, &[&[4, 3]]),
        case(
            "l2_normalize",
            Primitive::L2Normalize { axis: 1 },
            &[&[3, 4]],
        ),
        case("transpose", Primitive::Transpose, &[&[2, 3]]),
        case(
            "reshape",
            Primitive::Reshape { shape: vec![3, 2] },
            &[&[2, 3]],
        ),
        case("concat", Primitive::Concat { axis: 1 }, &[&[2, 1], &[2, 3]]),
        case(
            "gather_rows",
            Primitive::GatherRows {
                indices: vec![2, 0, 2],
            },
            &[&[3, 2]],
        ),
        case(
            "take_along_rows",
            Primitive::TakeAlongRows {
                indices: vec![vec![1, 0], vec![2, 2], vec![0, 1]],
            },
            &[&[3, 3]],
        ),
        case(
            "bias_add",
            Primitive::BiasAdd { axis: 1 },
            &[&[2, 3, 2], &[3]],
        ),
    ]
}

fn weights(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|i| (0.7 * i as f64 + 0.3).cos() + 0.1).collect(),
    )
    .expect("consistent")
}

/// `sum(op(inputs) * W)` on `tape`.
pub fn weighted_output(tape: &mut Tape, primitive: &Primitive, inputs: &[Var]) -> Result<Var> {
    let y = tape.apply(primitive.clone(), inputs)?;
    let w = tape.constant(weights(tape.value(y).shape()));
    let yw = tape.mul(y, w)?;
    tape.sum(yw)
}

/// Worst relative error of each primitive over `points` random input draws
/// from `sample`.
pub fn run_primitive_checks(
    sample: &mut dyn FnMut() -> f64,
    points: usize,
    step: f64,
) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    for c in primitive_cases() {
        let mut worst = 0.0_f64;
        for _ in 0..points {
            let inputs: Vec<Tensor> = c
                .shapes
                .iter()
                .map(|s| {
                    let n: usize = s.iter().product();
                    let data = (0..n)
                        .map(|_| {
                            let v = sample();
                            if c.positive {
                                v.abs() + 0.1
                            } else {
                                v
                            }
                        })
                        .collect();
                    Tensor::new(s.clone(), data)
                })
                .collect::<Result<_>>()?;
            let r = check_gradients(|t, v| weighted_output(t, &c.primitive, v), &inputs, step)?;
            worst = worst.max(r.max_rel_error);
        }
        out.push((c.name, worst));
    }
    Ok(out)
}
