//! Central finite-difference gradient checks and a sweep over every
//! differentiable primitive.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use super::{Graph, Tensor};

pub const FD_STEP: f64 = 1e-5;

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Relative error with a floor so that near-zero gradients are compared
/// on an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Max relative error between backprop and central differences over every
/// element of every input.
pub fn fd_check(
    inputs: &[(Vec<f64>, Vec<usize>)],
    build: impl for<'g> Fn(&[Tensor<'g>]) -> Result<Tensor<'g>>,
) -> f64 {
    let eval = |vals: &[Vec<f64>]| -> f64 {
        let g = Graph::new();
        let ts: Vec<Tensor> = vals.iter().zip(inputs).map(|(v, (_, s))| g.leaf(v.clone(), s, true)).collect();
        build(&ts).expect("forward").item()
    };
    let g = Graph::new();
    let ts: Vec<Tensor> = inputs.iter().map(|(v, s)| g.leaf(v.clone(), s, true)).collect();
    let loss = build(&ts).expect("forward");
    g.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = ts.iter().map(|t| t.grad()).collect();

    let mut vals: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    let mut worst = 0.0f64;
    for i in 0..vals.len() {
        for j in 0..vals[i].len() {
            let orig = vals[i][j];
            vals[i][j] = orig + FD_STEP;
            let up = eval(&vals);
            vals[i][j] = orig - FD_STEP;
            let down = eval(&vals);
            vals[i][j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

pub type BuildFn = for<'g> fn(&[Tensor<'g>]) -> Result<Tensor<'g>>;

pub struct PrimitiveCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: BuildFn,
    /// Inputs drawn away from zero so kinked ops stay differentiable.
    pub avoid_zero: bool,
}

impl PrimitiveCase {
    pub fn run(&self, rng: &mut ChaCha8Rng) -> f64 {
        let inputs: Vec<(Vec<f64>, Vec<usize>)> = self
            .shapes
            .iter()
            .map(|s| {
                let n = s.iter().product();
                let mut v = random_vec(rng, n);
                if self.avoid_zero {
                    v.iter_mut().for_each(|x| *x += 0.05 * x.signum());
                }
                (v, s.clone())
            })
            .collect();
        let f = self.f;
        // random projection to a scalar so every output element matters
        let out_len = {
            let g = Graph::new();
            let ts: Vec<Tensor> = inputs.iter().map(|(v, s)| g.leaf(v.clone(), s, true)).collect();
            f(&ts).expect("forward").numel()
        };
        let proj = random_vec(rng, out_len);
        fd_check(&inputs, |ts| {
            let out = f(ts)?.flatten();
            let w = out.graph().constant(proj.clone(), &[out_len]);
            out.mul(w).map(|t| t.sum())
        })
    }
}

pub fn primitive_cases() -> Vec<PrimitiveCase> {
    fn case(name: &'static str, shapes: &[&[usize]], f: BuildFn) -> PrimitiveCase {
        PrimitiveCase { name, shapes: shapes.iter().map(|s| s.to_vec()).collect(), f, avoid_zero: false }
    }
    let mut cases = vec![
        case("matmul", &[&[3, 4], &[4, 2]], |t| t[0].matmul(t[1])),
        case("transpose", &[&[3, 4]], |t| t[0].transpose()),
        case("add", &[&[2, 3], &[2, 3]], |t| t[0].add(t[1])),
        case("sub", &[&[2, 3], &[2, 3]], |t| t[0].sub(t[1])),
        case("mul", &[&[2, 3], &[2, 3]], |t| t[0].mul(t[1])),
        case("add_row", &[&[3, 4], &[4]], |t| t[0].add_row(t[1])),
        case("mul_row", &[&[3, 4], &[4]], |t| t[0].mul_row(t[1])),
        case("scale", &[&[5]], |t| Ok(t[0].scale(-2.5))),
        case("sigmoid", &[&[6]], |t| Ok(t[0].scale(3.0).sigmoid())),
        case("softmax_rows", &[&[3, 5]], |t| Ok(t[0].scale(2.0).softmax_rows())),
        case("sum", &[&[2, 3]], |t| Ok(t[0].sum())),
        case("mean", &[&[2, 3]], |t| Ok(t[0].mean())),
        case("mean_rows", &[&[4, 3]], |t| t[0].mean_rows()),
        case("reshape_flatten", &[&[2, 3, 2]], |t| t[0].flatten().reshape(&[3, 4])),
        case("concat_cols", &[&[2, 3], &[2, 1]], |t| Tensor::concat_cols(&[t[0], t[1]])),
        case("concat_rows", &[&[2, 3], &[1, 3]], |t| Tensor::concat_rows(&[t[0], t[1]])),
        case("stack", &[&[2, 2], &[2, 2]], |t| Tensor::stack(&[t[0], t[1]])),
        case("index_rows", &[&[4, 3]], |t| t[0].index_rows(&[2, 0, 2])),
        case("repeat_rows", &[&[3]], |t| Ok(t[0].repeat_rows(4))),
        case("conv2d", &[&[2, 4, 5], &[3, 2, 3, 3], &[3]], |t| t[0].conv2d(t[1], Some(t[2]))),
        case("conv2d_1x1", &[&[3, 3, 3], &[2, 3, 1, 1]], |t| t[0].conv2d(t[1], None)),
        case("upsample", &[&[2, 3, 2]], |t| t[0].upsample_bilinear(7, 5)),
        case("bce_with_logits", &[&[2, 4]], |t| {
            let targets = [0.0, 1.0, 1.0, 0.0, 0.5, 1.0, 0.0, 0.25];
            t[0].scale(3.0).bce_with_logits(&targets)
        }),
        case("cross_entropy", &[&[3, 4]], |t| t[0].scale(2.0).cross_entropy(&[3, 0, 1])),
        case("weaken_c0", &[&[4]], |t| t[0].weaken(0.0)?.mul(t[0])),
        case("attention", &[&[2, 3], &[5, 3], &[5, 4]], |t| {
            let scores = t[0].matmul(t[1].transpose()?)?.softmax_rows();
            scores.matmul(t[2])
        }),
    ];
    for (name, f) in [
        ("relu", (|t: &[Tensor]| Ok(t[0].relu())) as BuildFn),
        ("abs", |t: &[Tensor]| Ok(t[0].abs())),
    ] {
        cases.push(PrimitiveCase { name, shapes: vec![vec![7]], f, avoid_zero: true });
    }
    cases
}
