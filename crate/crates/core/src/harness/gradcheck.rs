//! Finite-difference verification of every primitive and every loss.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::losses::{
    gan_losses, monce_loss, patch_nce, ptl_loss, sence_loss, tps_loss, NegativeSource, PatchSet,
    WeightMode,
};
use crate::substrate::{
    autodiff_gradient, max_relative_error, numerical_gradient, Graph, NodeId, Tensor, TensorError,
};
use crate::Result;

type Op = Box<dyn Fn(&mut Graph, NodeId) -> std::result::Result<NodeId, TensorError>>;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    /// Inputs are drawn for seeds `first_seed..first_seed + seeds`.
    pub first_seed: u64,
    pub seeds: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Negate the analytic gradient of the named check, as a stand-in for
    /// a sign error in its backward rule.
    pub flip_sign_of: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            first_seed: 0,
            seeds: 20,
            step: 1e-5,
            tolerance: 1e-4,
            flip_sign_of: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed())
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.results.iter().find(|r| r.name == name)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            let _ = writeln!(
                s,
                "{:<5} {:<9} {:<26} max_rel_err={:.3e} tol={:.0e}",
                if r.passed() { "PASS" } else { "FAIL" },
                r.suite,
                r.name,
                r.max_error,
                r.tolerance
            );
        }
        s
    }
}

/// One case: a function of a single tensor and the point to check it at.
struct Case {
    input: Tensor,
    f: Op,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .expect("shape matches")
}

/// Uniform in `[-1, 1]` but at least `margin` from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    let mut t = uniform(rng, shape, margin, 1.0);
    for v in t.data_mut() {
        if rng.gen::<bool>() {
            *v = -*v;
        }
    }
    t
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| v / norm));
    }
    Tensor::new(vec![n, d], data).expect("shape matches")
}

/// `sum(y * w)` with a fixed weight tensor derived from `salt`.
fn weighted_sum(g: &mut Graph, y: NodeId, salt: u64) -> std::result::Result<NodeId, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(salt);
    let w = uniform(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn unary(
    input: Tensor,
    salt: u64,
    op: fn(&mut Graph, NodeId) -> std::result::Result<NodeId, TensorError>,
) -> Case {
    Case {
        input,
        f: Box::new(move |g, x| {
            let y = op(g, x)?;
            weighted_sum(g, y, salt)
        }),
    }
}

/// `op(x, other)` or `op(other, x)` with `other` fixed.
fn binary(
    input: Tensor,
    other: Tensor,
    x_first: bool,
    salt: u64,
    op: fn(&mut Graph, NodeId, NodeId) -> std::result::Result<NodeId, TensorError>,
) -> Case {
    Case {
        input,
        f: Box::new(move |g, x| {
            let o = g.constant(other.clone())?;
            let y = if x_first { op(g, x, o)? } else { op(g, o, x)? };
            weighted_sum(g, y, salt)
        }),
    }
}

fn primitive_cases(seed: u64) -> Vec<(&'static str, Case)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = seed.wrapping_mul(1000);
    let m = 1e-3;
    let mut cases: Vec<(&'static str, Case)> = Vec::new();
    let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let row = uniform(&mut rng, &[1, 4], -1.0, 1.0);
    cases.push((
        "add",
        binary(a.clone(), row.clone(), true, s, |g, x, y| g.add(x, y)),
    ));
    cases.push((
        "add(broadcast)",
        binary(row.clone(), a.clone(), true, s + 1, |g, x, y| g.add(x, y)),
    ));
    cases.push((
        "sub",
        binary(a.clone(), b.clone(), false, s + 2, |g, x, y| g.sub(x, y)),
    ));
    cases.push((
        "mul",
        binary(a.clone(), row.clone(), true, s + 3, |g, x, y| g.mul(x, y)),
    ));
    let denom = away_from_zero(&mut rng, &[3, 4], 0.2);
    cases.push((
        "div",
        binary(a.clone(), denom.clone(), true, s + 4, |g, x, y| g.div(x, y)),
    ));
    cases.push((
        "div(denominator)",
        binary(denom, a.clone(), false, s + 5, |g, x, y| g.div(x, y)),
    ));
    let mut far = b.clone();
    for (v, &w) in far.data_mut().iter_mut().zip(a.data()) {
        if (*v - w).abs() < m {
            *v = w + 2.0 * m;
        }
    }
    cases.push((
        "maximum",
        binary(a.clone(), far.clone(), true, s + 6, |g, x, y| {
            g.maximum(x, y)
        }),
    ));
    cases.push((
        "minimum",
        binary(a.clone(), far, false, s + 7, |g, x, y| g.minimum(x, y)),
    ));
    cases.push(("neg", unary(a.clone(), s + 8, |g, x| g.neg(x))));
    cases.push((
        "abs",
        unary(away_from_zero(&mut rng, &[3, 4], m), s + 9, |g, x| g.abs(x)),
    ));
    cases.push(("exp", unary(a.clone(), s + 10, |g, x| g.exp(x))));
    let pos = uniform(&mut rng, &[3, 4], 0.5, 2.0);
    cases.push(("log", unary(pos.clone(), s + 11, |g, x| g.log(x))));
    cases.push(("pow", unary(pos.clone(), s + 12, |g, x| g.pow(x, 1.7))));
    cases.push((
        "affine",
        unary(a.clone(), s + 13, |g, x| g.affine(x, -0.3, 2.0)),
    ));
    let mut inside = uniform(&mut rng, &[3, 4], -0.9, 0.9);
    for v in inside.data_mut() {
        if (v.abs() - 0.5).abs() < m {
            *v += 4.0 * m;
        }
    }
    cases.push(("clamp", unary(inside, s + 14, |g, x| g.clamp(x, -0.5, 0.5))));
    let rhs = uniform(&mut rng, &[4, 2], -1.0, 1.0);
    cases.push((
        "matmul",
        binary(a.clone(), rhs.clone(), true, s + 15, |g, x, y| {
            g.matmul(x, y)
        }),
    ));
    cases.push((
        "matmul(rhs)",
        binary(rhs, a.clone(), false, s + 16, |g, x, y| g.matmul(x, y)),
    ));
    cases.push(("transpose", unary(a.clone(), s + 17, |g, x| g.transpose(x))));

    let img = uniform(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
    let kernel = uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let bias = uniform(&mut rng, &[3], -1.0, 1.0);
    let (k2, b2) = (kernel.clone(), bias.clone());
    cases.push((
        "conv2d",
        Case {
            input: img.clone(),
            f: Box::new(move |g, x| {
                let w = g.constant(k2.clone())?;
                let b = g.constant(b2.clone())?;
                let y = g.conv2d(x, w, Some(b), 2, 1)?;
                weighted_sum(g, y, s + 18)
            }),
        },
    ));
    let img2 = img.clone();
    cases.push((
        "conv2d(weight)",
        Case {
            input: kernel,
            f: Box::new(move |g, w| {
                let x = g.constant(img2.clone())?;
                let y = g.conv2d(x, w, None, 1, 1)?;
                weighted_sum(g, y, s + 19)
            }),
        },
    ));
    let tkernel = uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    let small = uniform(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
    let (tk, sm) = (tkernel.clone(), small.clone());
    cases.push((
        "conv_transpose2d",
        Case {
            input: small,
            f: Box::new(move |g, x| {
                let w = g.constant(tk.clone())?;
                let b = g.constant(bias.clone())?;
                let y = g.conv_transpose2d(x, w, Some(b), 2, 1)?;
                weighted_sum(g, y, s + 20)
            }),
        },
    ));
    cases.push((
        "conv_transpose2d(weight)",
        Case {
            input: tkernel,
            f: Box::new(move |g, w| {
                let x = g.constant(sm.clone())?;
                let y = g.conv_transpose2d(x, w, None, 2, 1)?;
                weighted_sum(g, y, s + 21)
            }),
        },
    ));
    cases.push((
        "leaky_relu",
        unary(away_from_zero(&mut rng, &[3, 4], m), s + 22, |g, x| {
            g.leaky_relu(x, 0.2)
        }),
    ));
    cases.push((
        "relu",
        unary(away_from_zero(&mut rng, &[3, 4], m), s + 23, |g, x| {
            g.relu(x)
        }),
    ));
    cases.push(("tanh", unary(a.clone(), s + 24, |g, x| g.tanh(x))));
    cases.push(("sigmoid", unary(a.clone(), s + 25, |g, x| g.sigmoid(x))));
    cases.push(("softmax", unary(a.clone(), s + 26, |g, x| g.softmax(x, 1))));
    cases.push(("mean", unary(a.clone(), s + 27, |g, x| g.mean(x, 0))));
    cases.push(("sum", unary(a.clone(), s + 28, |g, x| g.sum(x, 1))));
    cases.push((
        "mean_all",
        unary(a.clone(), s + 29, |g, x| {
            let y = g.mean_all(x)?;
            g.pow(y, 2.0)
        }),
    ));
    cases.push((
        "sum_all",
        unary(a.clone(), s + 30, |g, x| {
            let y = g.sum_all(x)?;
            g.pow(y, 2.0)
        }),
    ));
    cases.push((
        "l2_normalize",
        unary(a.clone(), s + 31, |g, x| g.l2_normalize(x, 1)),
    ));
    cases.push((
        "instance_norm",
        unary(
            uniform(&mut rng, &[1, 2, 3, 3], -1.0, 1.0),
            s + 32,
            |g, x| g.instance_norm(x),
        ),
    ));
    cases.push((
        "reshape",
        unary(a.clone(), s + 33, |g, x| g.reshape(x, &[2, 6])),
    ));
    cases.push((
        "gather",
        unary(a.clone(), s + 34, |g, x| g.gather(x, 1, &[3, 0, 3, 2])),
    ));
    cases.push((
        "concat",
        binary(a, b, true, s + 35, |g, x, y| g.concat(&[y, x, x], 0)),
    ));
    cases
}

fn map_triple(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> [Tensor; 3] {
    loop {
        let t = [0, 1, 2].map(|_| uniform(rng, &[4, n / 4], 0.05, 0.95));
        let ok = (0..n).all(|i| {
            let v = [t[0].data()[i], t[1].data()[i], t[2].data()[i]];
            (v[0] - v[1]).abs() > margin
                && (v[0] - v[2]).abs() > margin
                && (v[1] - v[2]).abs() > margin
        });
        if ok {
            return t;
        }
    }
}

type MapLoss = fn(&mut Graph, NodeId, NodeId, NodeId) -> Result<NodeId>;
type NceLoss = fn(&mut Graph, &PatchSet, f64) -> Result<NodeId>;

fn invalid(e: crate::Error) -> TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    }
}

/// The loss cases for one seed, each varying one input slot.
fn loss_cases(seed: u64) -> Vec<(&'static str, Case)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(&'static str, Case)> = Vec::new();
    let maps = map_triple(&mut rng, 16, 1e-3);
    let gan: MapLoss = |g, a, b, _| {
        let (ld, lg) = gan_losses(g, a, b)?;
        Ok(g.add(ld, lg)?)
    };
    for (name, loss) in [
        ("tps_loss", tps_loss as MapLoss),
        ("ptl_loss", ptl_loss),
        ("gan_loss", gan),
    ] {
        for slot in 0..3 {
            let maps = maps.clone();
            cases.push((
                name,
                Case {
                    input: maps[slot].clone(),
                    f: Box::new(move |g, id| {
                        let mut ids = [id; 3];
                        for (k, t) in maps.iter().enumerate() {
                            if k != slot {
                                ids[k] = g.constant(t.clone())?;
                            }
                        }
                        loss(g, ids[0], ids[1], ids[2]).map_err(invalid)
                    }),
                },
            ));
        }
    }

    let (n, d) = (8, 6);
    let anchors = unit_rows(&mut rng, n, d);
    let positives = unit_rows(&mut rng, n, d);
    let mpa: f64 = rng.gen();
    let nce: [(&'static str, NceLoss); 4] = [
        ("patch_nce", |g, ps, _| {
            patch_nce(g, ps, 0.07, NegativeSource::Clear)
        }),
        ("monce_hard", |g, ps, _| {
            monce_loss(
                g,
                ps,
                0.07,
                1.0,
                1.0,
                WeightMode::Hard,
                NegativeSource::Clear,
            )
        }),
        ("monce_easy", |g, ps, _| {
            monce_loss(
                g,
                ps,
                0.07,
                1.0,
                1.0,
                WeightMode::Easy,
                NegativeSource::Clear,
            )
        }),
        ("sence", |g, ps, mpa| {
            sence_loss(g, ps, mpa, 0.07, 1.0, 1.0, NegativeSource::Clear)
        }),
    ];
    for (name, loss) in nce {
        for vary_anchors in [true, false] {
            let (vary, fixed) = if vary_anchors {
                (anchors.clone(), positives.clone())
            } else {
                (positives.clone(), anchors.clone())
            };
            cases.push((
                name,
                Case {
                    input: vary,
                    f: Box::new(move |g, id| {
                        let other = g.constant(fixed.clone())?;
                        let (a, p) = if vary_anchors {
                            (id, other)
                        } else {
                            (other, id)
                        };
                        let ps = PatchSet::new(g, a, p).map_err(invalid)?;
                        loss(g, &ps, mpa).map_err(invalid)
                    }),
                },
            ));
        }
    }
    cases
}

fn run_suite(
    suite: &'static str,
    build: fn(u64) -> Vec<(&'static str, Case)>,
    opts: &GradcheckOptions,
    results: &mut Vec<CheckResult>,
) -> Result<()> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in opts.first_seed..opts.first_seed + opts.seeds {
        for (name, case) in build(seed) {
            let numeric = numerical_gradient(&case.f, &case.input, opts.step)?;
            let mut analytic = autodiff_gradient(&case.f, &case.input)?;
            if opts.flip_sign_of.as_deref() == Some(name) {
                for v in analytic.data_mut() {
                    *v = -*v;
                }
            }
            let err = max_relative_error(&analytic, &numeric);
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some((_, w)) => *w = w.max(err),
                None => worst.push((name, err)),
            }
        }
    }
    results.extend(worst.into_iter().map(|(name, max_error)| CheckResult {
        suite,
        name: name.to_string(),
        max_error,
        tolerance: opts.tolerance,
    }));
    Ok(())
}

/// Check every differentiable primitive and every loss over
/// `opts.seeds` random inputs.
pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut results = Vec::new();
    run_suite("substrate", primitive_cases, opts, &mut results)?;
    run_suite("losses", loss_cases, opts, &mut results)?;
    Ok(GradcheckReport { results })
}

/// Only the loss suite.
pub fn gradcheck_losses(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut results = Vec::new();
    run_suite("losses", loss_cases, opts, &mut results)?;
    Ok(GradcheckReport { results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_catalog_op_is_covered() {
        let names: Vec<&str> = primitive_cases(0).into_iter().map(|(n, _)| n).collect();
        for op in crate::substrate::op_catalog() {
            assert!(
                names
                    .iter()
                    .any(|n| n == op || n.starts_with(&format!("{op}("))),
                "{op} has no gradcheck case"
            );
        }
    }

    #[test]
    fn fault_injection_is_reported() {
        let opts = GradcheckOptions {
            seeds: 2,
            flip_sign_of: Some("tps_loss".into()),
            ..Default::default()
        };
        let report = gradcheck_losses(&opts).unwrap();
        let failing: Vec<&str> = report.failures().map(|r| r.name.as_str()).collect();
        assert_eq!(failing, vec!["tps_loss"]);
        assert!(report.render().contains("FAIL  losses    tps_loss  "));
    }
}
