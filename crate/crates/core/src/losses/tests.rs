use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::substrate::finite_diff_check;

const NEG: NegativeSource = NegativeSource::Clear;

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| v / norm));
    }
    Tensor::new(vec![n, d], data).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `s[i][j] = anchor_i . positive_j`, written out with plain loops.
fn sim_matrix(anchors: &Tensor, positives: &Tensor) -> Vec<Vec<f64>> {
    let d = anchors.shape()[1];
    let rows = |t: &Tensor| t.data().chunks(d).map(<[f64]>::to_vec).collect::<Vec<_>>();
    let (a, p) = (rows(anchors), rows(positives));
    a.iter()
        .map(|ai| p.iter().map(|pj| dot(ai, pj)).collect())
        .collect()
}

/// Direct evaluation of the reweighted NCE from its defining formula, with
/// the weight rule supplied per (anchor similarity row).
fn brute_force_nce(s: &[Vec<f64>], tau: f64, q: Option<f64>, logit: impl Fn(f64) -> f64) -> f64 {
    let n = s.len();
    let mut total = 0.0;
    for i in 0..n {
        let pos = (s[i][i] / tau).exp();
        let negs: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let push = match q {
            None => negs.iter().map(|&j| (s[i][j] / tau).exp()).sum::<f64>(),
            Some(q) => {
                let z: f64 = negs.iter().map(|&j| logit(s[i][j]).exp()).sum();
                let weighted: f64 = negs
                    .iter()
                    .map(|&j| logit(s[i][j]).exp() / z * (s[i][j] / tau).exp())
                    .sum();
                q * (n - 1) as f64 * weighted
            }
        };
        total += -(pos / (pos + push)).ln();
    }
    total
}

fn eval(build: impl FnOnce(&mut Graph) -> Result<NodeId>) -> f64 {
    let mut g = Graph::new();
    let out = build(&mut g).unwrap();
    g.scalar_value(out).unwrap()
}

fn maps(values: [&[f64]; 3]) -> impl FnOnce(&mut Graph) -> (NodeId, NodeId, NodeId) {
    let v: Vec<Vec<f64>> = values.iter().map(|s| s.to_vec()).collect();
    move |g: &mut Graph| {
        let mk = |g: &mut Graph, d: &Vec<f64>| g.constant(Tensor::from_vec(d.clone())).unwrap();
        (mk(g, &v[0]), mk(g, &v[1]), mk(g, &v[2]))
    }
}

fn tps_of(x: &[f64], y: &[f64], z: &[f64]) -> f64 {
    eval(|g| {
        let (a, b, c) = maps([x, y, z])(g);
        tps_loss(g, a, b, c)
    })
}

fn ptl_of(x: &[f64], y: &[f64], z: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b, c) = maps([x, y, z])(&mut g);
    let out = ptl_loss(&mut g, a, b, c)?;
    Ok(g.scalar_value(out)?)
}

/// Literal per-element triangle slack, as an independent reference.
fn tps_reference(x: &[f64], y: &[f64], z: &[f64]) -> f64 {
    let n = x.len() as f64;
    x.iter()
        .zip(y)
        .zip(z)
        .map(|((a, b), c)| (a - c).abs() + (b - c).abs() - (a - b).abs())
        .sum::<f64>()
        / n
}

#[test]
fn tps_scalar_cases() {
    assert_eq!(tps_of(&[0.2], &[0.8], &[0.5]), 0.0);
    assert!((tps_of(&[0.2], &[0.8], &[0.99]) - 0.38).abs() < 1e-12);
    let x = [0.1, 0.7, 0.3, 0.9];
    assert_eq!(tps_of(&x, &[0.5, 0.2, 0.8, 0.4], &x), 0.0);
}

#[test]
fn tps_matches_literal_slack() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let v: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..16).map(|_| rng.gen()).collect())
            .collect();
        let got = tps_of(&v[0], &v[1], &v[2]);
        assert!((got - tps_reference(&v[0], &v[1], &v[2])).abs() < 1e-14);
    }
}

#[test]
fn tps_rejects_shape_mismatch() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 2])).unwrap();
    let b = g.constant(Tensor::zeros(&[4])).unwrap();
    assert!(tps_loss(&mut g, a, a, b).is_err());
}

#[test]
fn ptl_cases() {
    let d = ptl_of(&[0.0, 0.0], &[1.0, 0.0], &[0.5, 1.0]).unwrap();
    assert!((d - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    assert_eq!(ptl_of(&[0.0, 0.0], &[1.0, 0.0], &[2.0, 0.0]).unwrap(), 0.0);
    assert_eq!(ptl_of(&[0.3, 0.1], &[0.6, 0.9], &[0.3, 0.1]).unwrap(), 0.0);
    assert!(ptl_of(&[0.3, 0.1], &[0.3, 0.1], &[0.5, 0.5]).is_err());
}

#[test]
fn ptl_tolerates_extension_that_tps_penalizes() {
    let (x, y) = ([0.2, 0.3, 0.1, 0.4], [0.4, 0.5, 0.3, 0.5]);
    let z: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + 2.0 * (b - a)).collect();
    assert!(ptl_of(&x, &y, &z).unwrap() < 1e-15);
    assert!(tps_of(&x, &y, &z) > 0.0);
}

#[test]
fn gan_loss_values() {
    let run = |real: f64, fake: f64| {
        let mut g = Graph::new();
        let r = g.constant(Tensor::full(&[4, 4], real)).unwrap();
        let f = g.constant(Tensor::full(&[4, 4], fake)).unwrap();
        let (ld, lg) = gan_losses(&mut g, r, f).unwrap();
        (g.scalar_value(ld).unwrap(), g.scalar_value(lg).unwrap())
    };
    let (ld, lg) = run(0.9, 0.1);
    assert!((ld - (-2.0 * 0.9f64.ln())).abs() < 1e-12);
    assert!((ld - 0.2107).abs() < 1e-4);
    assert!((lg - 2.3026).abs() < 1e-4);
    let (ld, _) = run(0.5, 0.5);
    assert!((ld - 2.0 * 2f64.ln()).abs() < 1e-12);
    assert!(run(0.95, 0.3).0 < run(0.6, 0.3).0);
}

#[test]
fn gan_clamps_saturated_probabilities() {
    let (ld, lg) = {
        let mut g = Graph::new();
        let r = g.constant(Tensor::full(&[2], 1.0)).unwrap();
        let f = g.constant(Tensor::full(&[2], 0.0)).unwrap();
        let (ld, lg) = gan_losses(&mut g, r, f).unwrap();
        (g.scalar_value(ld).unwrap(), g.scalar_value(lg).unwrap())
    };
    assert!(ld.is_finite() && ld < 1e-6);
    assert!((lg + PROB_EPS.ln()).abs() < 1e-9);
}

#[test]
fn patch_nce_closed_forms() {
    let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let v = eval(|g| {
        let ps = patch_set_from(g, eye.clone(), eye.clone(), false)?;
        patch_nce(g, &ps, 1.0, NEG)
    });
    assert!((v - 2.0 * (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
    assert!((v - 0.6265).abs() < 1e-4);

    let n = 5;
    let same = Tensor::new(vec![n, 3], [1.0, 0.0, 0.0].repeat(n)).unwrap();
    let v = eval(|g| {
        let ps = patch_set_from(g, same.clone(), same.clone(), false)?;
        patch_nce(g, &ps, 0.07, NEG)
    });
    assert!((v - n as f64 * (n as f64).ln()).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (a, p) = (unit_rows(n, 8, &mut rng), unit_rows(n, 8, &mut rng));
    let v = eval(|g| {
        let ps = patch_set_from(g, a, p, false)?;
        patch_nce(g, &ps, 1e6, NEG)
    });
    assert!((v - n as f64 * (n as f64).ln()).abs() < 1e-5);
}

#[test]
fn patch_nce_needs_two_patches() {
    let mut g = Graph::new();
    let one = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let ps = patch_set_from(&mut g, one.clone(), one, false).unwrap();
    assert!(patch_nce(&mut g, &ps, 0.07, NEG).is_err());
}

#[test]
fn monce_weight_examples() {
    let weights = |mode, sims: Vec<f64>, n| {
        let mut g = Graph::new();
        let s = g.constant(Tensor::new(vec![n, n], sims).unwrap()).unwrap();
        let w = monce_weights(&mut g, s, mode, 1.0).unwrap();
        g.value(w).clone()
    };
    let sims = vec![0.9, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let e = std::f64::consts::E;
    let hard = weights(WeightMode::Hard, sims.clone(), 3);
    assert_eq!(hard.shape(), &[3, 2]);
    assert!((hard.data()[0] - e / (e + 1.0)).abs() < 1e-12);
    assert!((hard.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    let easy = weights(WeightMode::Easy, sims, 3);
    assert!((easy.data()[0] - 1.0 / (e + 1.0)).abs() < 1e-12);
    assert!((easy.data()[0] - 0.2689).abs() < 1e-4);
    let flat = weights(WeightMode::Hard, vec![0.3; 16], 4);
    for w in flat.data() {
        assert!((w - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn monce_identities_and_oracle() {
    let n = 4;
    let same = Tensor::new(vec![n, 2], [0.6, 0.8].repeat(n)).unwrap();
    let run = |a: &Tensor, p: &Tensor, q: f64, mode| {
        eval(|g| {
            let ps = patch_set_from(g, a.clone(), p.clone(), false)?;
            monce_loss(g, &ps, 0.07, 1.0, q, mode, NEG)
        })
    };
    let pn = eval(|g| {
        let ps = patch_set_from(g, same.clone(), same.clone(), false)?;
        patch_nce(g, &ps, 0.07, NEG)
    });
    assert!((run(&same, &same, 1.0, WeightMode::Hard) - pn).abs() < 1e-12);
    assert!(run(&same, &same, 0.0, WeightMode::Hard).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let (a, p) = (unit_rows(n, 6, &mut rng), unit_rows(n, 6, &mut rng));
        let (tau, beta, q) = (0.2, 0.5, 1.3);
        let s = sim_matrix(&a, &p);
        for (mode, logit) in [
            (
                WeightMode::Hard,
                Box::new(move |x: f64| x / beta) as Box<dyn Fn(f64) -> f64>,
            ),
            (WeightMode::Easy, Box::new(move |x: f64| (1.0 - x) / beta)),
        ] {
            let want = brute_force_nce(&s, tau, Some(q), logit);
            let got = eval(|g| {
                let ps = patch_set_from(g, a.clone(), p.clone(), false)?;
                monce_loss(g, &ps, tau, beta, q, mode, NEG)
            });
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        let want = brute_force_nce(&s, tau, None, |x| x);
        let got = eval(|g| {
            let ps = patch_set_from(g, a.clone(), p.clone(), false)?;
            patch_nce(g, &ps, tau, NEG)
        });
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn sence_force_examples() {
    assert_eq!(sence_force(0.3, 0.0), 0.3);
    assert_eq!(sence_force(0.3, 1.0), 1.0 - 0.3);
    assert!((sence_force(0.8, 0.592) - 0.4448).abs() < 1e-12);
}

#[test]
fn sence_identities_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 4;
    let (tau, beta, q) = (0.07, 1.0, 1.0);
    let loss = |a: &Tensor, p: &Tensor, build: &dyn Fn(&mut Graph, &PatchSet) -> Result<NodeId>| {
        eval(|g| {
            let ps = patch_set_from(g, a.clone(), p.clone(), false)?;
            build(g, &ps)
        })
    };
    for _ in 0..10 {
        let (a, p) = (unit_rows(n, 5, &mut rng), unit_rows(n, 5, &mut rng));
        let half = loss(&a, &p, &|g, ps| sence_loss(g, ps, 0.5, tau, beta, q, NEG));
        let pn = loss(&a, &p, &|g, ps| patch_nce(g, ps, tau, NEG));
        assert!((half - pn).abs() < 1e-12);
        let zero = loss(&a, &p, &|g, ps| sence_loss(g, ps, 0.0, tau, 0.7, 1.4, NEG));
        let hard = loss(&a, &p, &|g, ps| {
            monce_loss(g, ps, tau, 0.7, 1.4, WeightMode::Hard, NEG)
        });
        assert_eq!(zero, hard);
        let one = loss(&a, &p, &|g, ps| sence_loss(g, ps, 1.0, tau, 0.7, 1.4, NEG));
        let easy = loss(&a, &p, &|g, ps| {
            monce_loss(g, ps, tau, 0.7, 1.4, WeightMode::Easy, NEG)
        });
        assert_eq!(one, easy);

        let s = sim_matrix(&a, &p);
        let want = brute_force_nce(&s, 0.1, Some(1.2), |x| sence_force(x, 0.75) / 0.8);
        let got = loss(&a, &p, &|g, ps| sence_loss(g, ps, 0.75, 0.1, 0.8, 1.2, NEG));
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn negative_source_orientation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, p) = (unit_rows(4, 3, &mut rng), unit_rows(4, 3, &mut rng));
    let s = sim_matrix(&p, &a);
    let want = brute_force_nce(&s, 0.3, None, |x| x);
    let got = eval(|g| {
        let ps = patch_set_from(g, a, p, false)?;
        patch_nce(g, &ps, 0.3, NegativeSource::Generated)
    });
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn sence_rejects_out_of_range_score() {
    let mut g = Graph::new();
    let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let ps = patch_set_from(&mut g, eye.clone(), eye, false).unwrap();
    assert!(sence_loss(&mut g, &ps, 1.5, 0.07, 1.0, 1.0, NEG).is_err());
}

#[test]
fn composite_weights_terms() {
    let mut g = Graph::new();
    let gan = g.scalar(1.5).unwrap();
    let nce = g.scalar(4.0).unwrap();
    let geom = g.scalar(2.0).unwrap();
    let parts = LossParts {
        gan: Some(gan),
        nce: Some(nce),
        geom: Some(geom),
    };
    let cfg = LossConfig::default();
    let total = composite_objective(&mut g, &parts, &cfg).unwrap();
    assert!((g.scalar_value(total).unwrap() - (1.5 + 4.0 + 0.2)).abs() < 1e-15);

    let zero = LossConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        ..cfg.clone()
    };
    let total = composite_objective(&mut g, &parts, &zero).unwrap();
    assert_eq!(g.scalar_value(total).unwrap(), 0.0);

    let m1 = LossConfig {
        nce_variant: NceVariant::PatchNce,
        geom_variant: GeomVariant::None,
        ..cfg.clone()
    };
    let no_geom = LossParts {
        geom: None,
        ..parts
    };
    let total = composite_objective(&mut g, &no_geom, &m1).unwrap();
    assert_eq!(g.scalar_value(total).unwrap(), 5.5);
    assert!(composite_objective(&mut g, &no_geom, &cfg).is_err());
}

#[test]
fn config_validation() {
    assert!(LossConfig::default().validate().is_ok());
    assert!(LossConfig {
        tau: 0.0,
        ..Default::default()
    }
    .validate()
    .is_err());
    assert!(LossConfig {
        beta: -1.0,
        ..Default::default()
    }
    .validate()
    .is_err());
    assert!(LossConfig {
        lambda3: -0.1,
        ..Default::default()
    }
    .validate()
    .is_err());
    for v in NceVariant::ALL {
        assert_eq!(NceVariant::parse(v.name()), Some(v));
    }
    for v in GeomVariant::ALL {
        assert_eq!(GeomVariant::parse(v.name()), Some(v));
    }
}

// ---- gradients ----

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn probs(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec((0..n).map(|_| rng.gen_range(0.05..0.95)).collect())
}

/// Triple whose coordinates are separated by at least `margin`, keeping
/// finite differences off the kinks.
fn separated_triple(n: usize, rng: &mut ChaCha8Rng, margin: f64) -> [Tensor; 3] {
    loop {
        let t = [probs(n, rng), probs(n, rng), probs(n, rng)];
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

fn check_map_loss(
    name: &str,
    seed: u64,
    maps: &[Tensor; 3],
    loss: impl Fn(&mut Graph, NodeId, NodeId, NodeId) -> Result<NodeId> + Copy,
) {
    for slot in 0..3 {
        let err = finite_diff_check(
            |g, id| {
                let mut ids = [id; 3];
                for (k, t) in maps.iter().enumerate() {
                    if k != slot {
                        ids[k] = g.constant(t.clone())?;
                    }
                }
                loss(g, ids[0], ids[1], ids[2]).map_err(|e| match e {
                    Error::Tensor(t) => t,
                    other => TensorError::Invalid(other.to_string()),
                })
            },
            &maps[slot],
            STEP,
        )
        .unwrap();
        assert!(err <= TOL, "{name} seed {seed} slot {slot}: {err}");
    }
}

#[test]
fn map_losses_match_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps = separated_triple(16, &mut rng, 1e-3);
        check_map_loss("tps", seed, &maps, tps_loss);
        check_map_loss("ptl", seed, &maps, ptl_loss);
        check_map_loss("gan", seed, &maps, |g, a, b, _| {
            let (ld, lg) = gan_losses(g, a, b)?;
            Ok(g.add(ld, lg)?)
        });
    }
}

#[test]
fn contrastive_losses_match_finite_differences() {
    let n = 8;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let a = unit_rows(n, 6, &mut rng);
        let p = unit_rows(n, 6, &mut rng);
        let mpa: f64 = rng.gen();
        type Build = Box<dyn Fn(&mut Graph, &PatchSet) -> Result<NodeId>>;
        let cases: Vec<(&str, Build)> = vec![
            ("patch_nce", Box::new(|g, ps| patch_nce(g, ps, 0.07, NEG))),
            (
                "monce_hard",
                Box::new(|g, ps| monce_loss(g, ps, 0.07, 1.0, 1.0, WeightMode::Hard, NEG)),
            ),
            (
                "monce_easy",
                Box::new(|g, ps| monce_loss(g, ps, 0.07, 0.5, 2.0, WeightMode::Easy, NEG)),
            ),
            (
                "sence",
                Box::new(move |g, ps| sence_loss(g, ps, mpa, 0.07, 1.0, 1.0, NEG)),
            ),
        ];
        for (name, build) in &cases {
            for anchors_vary in [true, false] {
                let (vary, fixed) = if anchors_vary { (&a, &p) } else { (&p, &a) };
                let err = finite_diff_check(
                    |g, id| {
                        let other = g.constant(fixed.clone())?;
                        let (an, po) = if anchors_vary {
                            (id, other)
                        } else {
                            (other, id)
                        };
                        let ps = PatchSet::new(g, an, po)
                            .map_err(|e| TensorError::Invalid(e.to_string()))?;
                        build(g, &ps).map_err(|e| TensorError::Invalid(e.to_string()))
                    },
                    vary,
                    STEP,
                )
                .unwrap();
                assert!(err <= TOL, "{name} seed {seed}: {err}");
            }
        }
    }
}

// ---- properties ----

fn weights_of(sims: &Tensor, build: impl Fn(&mut Graph, NodeId) -> Result<NodeId>) -> Tensor {
    let mut g = Graph::new();
    let s = g.constant(sims.clone()).unwrap();
    let w = build(&mut g, s).unwrap();
    g.value(w).clone()
}

proptest! {
    #[test]
    fn tps_nonnegative_and_zero_iff_between(
        v in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..12)
    ) {
        let x: Vec<f64> = v.iter().map(|t| t.0).collect();
        let y: Vec<f64> = v.iter().map(|t| t.1).collect();
        let z: Vec<f64> = v.iter().map(|t| t.2).collect();
        let l = tps_of(&x, &y, &z);
        prop_assert!(l >= 0.0);
        let between = v.iter().all(|(a, b, c)| a.min(*b) <= *c && *c <= a.max(*b));
        prop_assert_eq!(l == 0.0, between);
    }

    #[test]
    fn tps_shift_and_scale(
        v in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..8),
        shift in -2.0f64..2.0,
        scale in 0.1f64..5.0,
    ) {
        let split = |f: &dyn Fn(f64) -> f64| -> [Vec<f64>; 3] {[
            v.iter().map(|t| f(t.0)).collect(),
            v.iter().map(|t| f(t.1)).collect(),
            v.iter().map(|t| f(t.2)).collect(),
        ]};
        let base = split(&|a| a);
        let l = tps_of(&base[0], &base[1], &base[2]);
        let s = split(&|a| a + shift);
        prop_assert!((tps_of(&s[0], &s[1], &s[2]) - l).abs() < 1e-12);
        let m = split(&|a| a * scale);
        prop_assert!((tps_of(&m[0], &m[1], &m[2]) - scale * l).abs() < 1e-12);
    }

    #[test]
    fn weight_rows_are_distributions(seed in 0u64..1000, mpa in 0.0f64..=1.0, beta in 0.1f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6;
        let sims = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        for w in [
            weights_of(&sims, |g, s| monce_weights(g, s, WeightMode::Hard, beta)),
            weights_of(&sims, |g, s| monce_weights(g, s, WeightMode::Easy, beta)),
            weights_of(&sims, |g, s| sence_weights(g, s, mpa, beta)),
        ] {
            for row in w.data().chunks(n - 1) {
                prop_assert!(row.iter().all(|&x| x > 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn force_slope_sets_weight_order(seed in 0u64..1000, mpa in 0.0f64..=1.0) {
        prop_assume!((mpa - 0.5).abs() > 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 5;
        let sims = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w = weights_of(&sims, |g, s| sence_weights(g, s, mpa, 1.0));
        for i in 0..n {
            let negs: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sims.data()[i * n + j]).collect();
            let row = &w.data()[i * (n - 1)..(i + 1) * (n - 1)];
            for a in 0..n - 1 {
                for b in 0..n - 1 {
                    if negs[a] > negs[b] {
                        if mpa < 0.5 {
                            prop_assert!(row[a] > row[b]);
                        } else {
                            prop_assert!(row[a] < row[b]);
                        }
                    }
                }
            }
        }
    }
}
