use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BatchNormState, SoftmaxMode, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Largest acceptable relative error.
pub const TOLERANCE: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}

/// Central differences `(f(x+h) - f(x-h)) / 2h` for the listed coordinates of `x`.
pub fn central_differences<F>(mut f: F, x: &Tensor, coords: &[usize], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the largest relative error over all entries of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<(Tape, Var, Var)> {
        let mut tape = Tape::new();
        let input = tape.input(t.clone());
        let out = f(&mut tape, input)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::InvalidArgument("grad_check needs a scalar function".into()));
        }
        Ok((tape, input, out))
    };
    let (tape, input, out) = eval(x)?;
    let f0 = tape.value(out).data()[0];
    if !f0.is_finite() {
        return Err(Error::NonFinite("objective at the check point".into()));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(input)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let coords: Vec<usize> = (0..x.numel()).collect();
    let numeric = central_differences(
        |t| {
            let (tape, _, out) = eval(t)?;
            Ok(tape.value(out).data()[0])
        },
        x,
        &coords,
        h,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Result of checking one operation.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
}

/// Reduces `v` to a scalar with fixed, unequal weights so that every output
/// entry contributes a distinct amount.
fn probe(t: &mut Tape, v: Var) -> Result<Var> {
    let shape = t.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| (1.7 * i as f64 + 0.3).sin()).collect();
    let w = t.constant(Tensor::new(shape, w)?);
    let m = t.mul(v, w)?;
    Ok(t.sum(m))
}

/// Central-difference checks of every differentiable operation on small
/// random operands, with respect to each differentiable argument.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |shape: &[usize]| -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("positive shape")
    };
    let a = random(&[5, 4]);
    let b = random(&[4, 3]);
    let x3 = random(&[2, 3, 4]);
    let w = random(&[4, 3]);
    let bias = random(&[3]);
    let bn_x = random(&[4, 3]);
    let gamma = random(&[3]);
    let beta = random(&[3]);
    let sq = random(&[3, 3]);
    let scores = random(&[5, 3]);
    let s = random(&[1]);
    let rows = random(&[4, 2]);
    let mut state = BatchNormState::new(3);
    state.running_mean = vec![0.2, -0.1, 0.05];
    state.running_var = vec![0.8, 1.3, 0.5];
    let labels = [0, 2, 1, 1, 0];
    let idw = vec![
        vec![(0, 0.5), (2, 0.5)],
        vec![(1, 1.0)],
        vec![(3, 0.2), (0, 0.3), (1, 0.5)],
    ];

    type Check<'a> = (
        &'static str,
        Box<dyn Fn(&mut Tape, Var) -> Result<Var> + 'a>,
        &'a Tensor,
    );
    let checks: Vec<Check> = vec![
        (
            "matmul/lhs",
            Box::new(|t, v| {
                let c = t.constant(b.clone());
                let o = t.matmul(v, c)?;
                probe(t, o)
            }),
            &a,
        ),
        (
            "matmul/rhs",
            Box::new(|t, v| {
                let c = t.constant(a.clone());
                let o = t.matmul(c, v)?;
                probe(t, o)
            }),
            &b,
        ),
        (
            "transpose",
            Box::new(|t, v| {
                let o = t.transpose(v)?;
                probe(t, o)
            }),
            &a,
        ),
        (
            "reshape",
            Box::new(|t, v| {
                let o = t.reshape(v, &[6, 4])?;
                probe(t, o)
            }),
            &x3,
        ),
        (
            "affine/x",
            Box::new(|t, v| {
                let (wv, bv) = (t.constant(w.clone()), t.constant(bias.clone()));
                let o = t.affine(v, wv, Some(bv))?;
                probe(t, o)
            }),
            &x3,
        ),
        (
            "affine/w",
            Box::new(|t, v| {
                let (xv, bv) = (t.constant(x3.clone()), t.constant(bias.clone()));
                let o = t.affine(xv, v, Some(bv))?;
                probe(t, o)
            }),
            &w,
        ),
        (
            "affine/b",
            Box::new(|t, v| {
                let (xv, wv) = (t.constant(x3.clone()), t.constant(w.clone()));
                let o = t.affine(xv, wv, Some(v))?;
                probe(t, o)
            }),
            &bias,
        ),
        (
            "batch_norm/train/x",
            Box::new(|t, v| {
                let (g, be) = (t.constant(gamma.clone()), t.constant(beta.clone()));
                let (o, _) = t.batch_norm(v, g, be, &state, true)?;
                probe(t, o)
            }),
            &bn_x,
        ),
        (
            "batch_norm/train/gamma",
            Box::new(|t, v| {
                let (x, be) = (t.constant(bn_x.clone()), t.constant(beta.clone()));
                let (o, _) = t.batch_norm(x, v, be, &state, true)?;
                probe(t, o)
            }),
            &gamma,
        ),
        (
            "batch_norm/train/beta",
            Box::new(|t, v| {
                let (x, g) = (t.constant(bn_x.clone()), t.constant(gamma.clone()));
                let (o, _) = t.batch_norm(x, g, v, &state, true)?;
                probe(t, o)
            }),
            &beta,
        ),
        (
            "batch_norm/eval/x",
            Box::new(|t, v| {
                let (g, be) = (t.constant(gamma.clone()), t.constant(beta.clone()));
                let (o, _) = t.batch_norm(v, g, be, &state, false)?;
                probe(t, o)
            }),
            &bn_x,
        ),
        (
            "relu",
            Box::new(|t, v| {
                let o = t.relu(v);
                probe(t, o)
            }),
            &x3,
        ),
        (
            "max_reduce",
            Box::new(|t, v| {
                let o = t.max_reduce(v, 1)?;
                probe(t, o)
            }),
            &x3,
        ),
        (
            "add",
            Box::new(|t, v| {
                let c = t.constant(a.clone());
                let o = t.add(v, c)?;
                probe(t, o)
            }),
            &a,
        ),
        (
            "mul",
            Box::new(|t, v| {
                let o = t.mul(v, v)?;
                probe(t, o)
            }),
            &a,
        ),
        (
            "scale/x",
            Box::new(|t, v| {
                let c = t.constant(s.clone());
                let o = t.scale(v, c)?;
                probe(t, o)
            }),
            &a,
        ),
        (
            "scale/s",
            Box::new(|t, v| {
                let c = t.constant(a.clone());
                let o = t.scale(c, v)?;
                probe(t, o)
            }),
            &s,
        ),
        (
            "scale_const",
            Box::new(|t, v| {
                let o = t.scale_const(v, -0.7);
                probe(t, o)
            }),
            &a,
        ),
        (
            "softmax/row",
            Box::new(|t, v| {
                let o = t.softmax(v, SoftmaxMode::Row);
                probe(t, o)
            }),
            &sq,
        ),
        (
            "softmax/global",
            Box::new(|t, v| {
                let o = t.softmax(v, SoftmaxMode::Global);
                probe(t, o)
            }),
            &sq,
        ),
        ("cross_entropy", Box::new(|t, v| t.cross_entropy(v, &labels)), &scores),
        ("sum", Box::new(|t, v| Ok(t.sum(v))), &a),
        (
            "mean",
            Box::new(|t, v| {
                let m = t.mul(v, v)?;
                Ok(t.mean(m))
            }),
            &a,
        ),
        (
            "concat",
            Box::new(|t, v| {
                let c = t.constant(random_like(&rows));
                let o = t.concat(&[v, c, v])?;
                probe(t, o)
            }),
            &rows,
        ),
        (
            "gather",
            Box::new(|t, v| {
                let o = t.gather(v, &[3, 0, 0, 2, 1, 3], &[2, 3])?;
                probe(t, o)
            }),
            &rows,
        ),
        (
            "weighted_rows",
            Box::new(|t, v| {
                let o = t.weighted_rows(v, idw.clone())?;
                probe(t, o)
            }),
            &rows,
        ),
    ];
    checks
        .into_iter()
        .map(|(name, f, x)| {
            Ok(OpCheck {
                name,
                max_rel_error: grad_check(f, x, FD_STEP)?,
            })
        })
        .collect()
}

fn random_like(t: &Tensor) -> Tensor {
    let data = (0..t.numel()).map(|i| (0.37 * i as f64).cos()).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}
