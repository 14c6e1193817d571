//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ConvSpec, Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|analytic - numeric| / max(|numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    /// Entries compared.
    pub entries: usize,
    /// Entries passed over because `x ± h` changes a ReLU sign or a pooling
    /// winner, where the central difference does not estimate the gradient.
    pub kinks: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Builds `f` on a fresh tape with every input as a parameter.
fn evaluate<F>(inputs: &[Tensor], f: &F) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences of step `h`. `entries` selects `(input, flat index)` pairs to
/// check; `None` checks every entry of every input.
pub fn check<F>(name: &str, inputs: &[Tensor], f: F, h: f64, entries: Option<&[(usize, usize)]>) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let all: Vec<(usize, usize)>;
    let entries = match entries {
        Some(e) => e,
        None => {
            all = inputs.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j))).collect();
            &all
        }
    };
    check_sampled(name, inputs, f, h, entries, entries.len())
}

/// Like [`check`], walking `candidates` in order until `want` entries off
/// any kink have been compared.
pub fn check_sampled<F>(name: &str, inputs: &[Tensor], f: F, h: f64, candidates: &[(usize, usize)], want: usize) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, loss) = evaluate(inputs, &f)?;
    let pattern = tape.branch_pattern();
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> =
        vars.iter().zip(inputs).map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)).collect();
    drop(tape);

    let mut work = inputs.to_vec();
    let mut report = CheckReport { name: name.to_string(), entries: 0, kinks: 0, max_rel_err: 0.0 };
    let probe = |work: &mut [Tensor], i: usize, j: usize, x: f64| -> Result<(f64, bool)> {
        work[i].data_mut()[j] = x;
        let (t, _, out) = evaluate(work, &f)?;
        Ok((t.value(out).data()[0], t.branch_pattern() == pattern))
    };
    for &(i, j) in candidates {
        if report.entries == want {
            break;
        }
        let orig = work[i].data()[j];
        let (plus, smooth_plus) = probe(&mut work, i, j, orig + h)?;
        let (minus, smooth_minus) = probe(&mut work, i, j, orig - h)?;
        work[i].data_mut()[j] = orig;
        if !(smooth_plus && smooth_minus) {
            report.kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        report.entries += 1;
        report.max_rel_err = report.max_rel_err.max(relative_error(analytic[i][j], numeric));
    }
    Ok(report)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Reduces `y` to a scalar through fixed random weights so that every
/// element of the output carries a distinct gradient.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let shape = tape.value(y).shape().to_vec();
    let r = tape.constant(random(&mut rng, &shape));
    let p = tape.mul(y, r)?;
    Ok(tape.sum_all(p))
}

/// Finite-difference check of every differentiable tape operation.
pub fn op_suite(seed: u64, h: f64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    let conv_cases: [(&str, ConvSpec, (usize, usize)); 5] = [
        ("conv2d 3x3", ConvSpec::same(2, 3, 3), (6, 5)),
        ("conv2d 3x3 stride 2", ConvSpec::same(2, 3, 3).with_stride(2), (7, 6)),
        ("conv2d 3x3 dilation 2", ConvSpec::same(2, 2, 3).with_dilation(2).with_padding(2), (6, 6)),
        ("conv2d 1x1 stride 2", ConvSpec::same(3, 2, 1).with_stride(2), (6, 6)),
        ("conv2d 7x7", ConvSpec::same(2, 2, 7), (5, 5)),
    ];
    for (name, spec, (h_in, w_in)) in conv_cases {
        let inputs = [
            random(&mut rng, &[spec.channels_in, h_in, w_in]),
            random(&mut rng, &[spec.channels_out, spec.channels_in, spec.kernel_h, spec.kernel_w]),
            random(&mut rng, &[spec.channels_out]),
        ];
        reports.push(check(
            name,
            &inputs,
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), &spec)?;
                project(t, y, seed)
            },
            h,
            None,
        )?);
    }

    let sep = ConvSpec::same(3, 4, 3).separable();
    let inputs = [random(&mut rng, &[3, 5, 5]), random(&mut rng, &[3, 1, 3, 3]), random(&mut rng, &[4, 3, 1, 1]), random(&mut rng, &[4])];
    reports.push(check(
        "separable_conv2d",
        &inputs,
        |t, v| {
            let y = t.separable_conv2d(v[0], v[1], v[2], Some(v[3]), &sep)?;
            project(t, y, seed)
        },
        h,
        None,
    )?);

    let up = ConvSpec::upsample2x(2, 3);
    let inputs = [random(&mut rng, &[2, 3, 4]), random(&mut rng, &[2, 3, 4, 4]), random(&mut rng, &[3])];
    reports.push(check(
        "transposed_conv2d",
        &inputs,
        |t, v| {
            let y = t.transposed_conv2d(v[0], v[1], Some(v[2]), &up)?;
            project(t, y, seed)
        },
        h,
        None,
    )?);

    let x = [random(&mut rng, &[2, 4, 6])];
    reports.push(check(
        "relu",
        &x,
        |t, v| {
            let y = t.relu(v[0]);
            project(t, y, seed)
        },
        h,
        None,
    )?);
    reports.push(check(
        "max_pool2d",
        &x,
        |t, v| {
            let y = t.max_pool2d(v[0], 2, 2)?;
            project(t, y, seed)
        },
        h,
        None,
    )?);
    reports.push(check(
        "crop",
        &x,
        |t, v| {
            let y = t.crop(v[0], 3, 4)?;
            project(t, y, seed)
        },
        h,
        None,
    )?);
    reports.push(check(
        "scale+offset",
        &x,
        |t, v| {
            let y = t.scale(v[0], -1.7);
            let y = t.offset(y, 0.3);
            project(t, y, seed)
        },
        h,
        None,
    )?);
    reports.push(check(
        "square+mean_all",
        &x,
        |t, v| {
            let y = t.square(v[0]);
            Ok(t.mean_all(y))
        },
        h,
        None,
    )?);
    reports.push(check(
        "sum_all",
        &x,
        |t, v| {
            let y = t.sum_all(v[0]);
            Ok(t.square(y))
        },
        h,
        None,
    )?);

    let pair = [random(&mut rng, &[3, 4]), random(&mut rng, &[3, 4])];
    reports.push(check(
        "add",
        &pair,
        |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, seed)
        },
        h,
        None,
    )?);
    reports.push(check(
        "sub",
        &pair,
        |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y, seed)
        },
        h,
        None,
    )?);
    reports.push(check(
        "mul",
        &pair,
        |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, seed)
        },
        h,
        None,
    )?);

    Ok(reports)
}
