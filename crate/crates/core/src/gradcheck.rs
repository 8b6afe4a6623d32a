//! Gradient verification against central finite differences.
//!
//! The finite-difference side never touches the reverse pass: it rebuilds the
//! graph from scratch at perturbed inputs and reads the forward value only,
//! so the two gradient routes stay independent.

use crate::num::Real;
use crate::tensor::{DiffError, Graph, Mat, TensorId};

/// Builds a scalar-valued graph function from a set of input leaves.
pub trait ScalarFn<F: Real>: Fn(&mut Graph<F>, &[TensorId]) -> Result<TensorId, DiffError> {}
impl<F: Real, T> ScalarFn<F> for T where
    T: Fn(&mut Graph<F>, &[TensorId]) -> Result<TensorId, DiffError>
{
}

#[derive(Debug, Clone)]
pub struct ComponentError {
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct InputReport {
    pub input: usize,
    pub max_rel_err: f64,
    pub worst: Option<ComponentError>,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub step: f64,
    pub tol: f64,
    pub inputs: Vec<InputReport>,
}

impl Report {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs
            .iter()
            .map(|i| i.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|i| i.max_rel_err < self.tol)
    }
}

/// Relative error with the scale floored at 1, so near-zero gradients are
/// compared absolutely instead of amplifying finite-difference noise.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn eval<F>(f: &impl ScalarFn<f64>, inputs: &[Mat<f64>]) -> Result<f64, DiffError>
where
    F: Real,
{
    let mut g: Graph<f64> = Graph::new();
    let ids = inputs
        .iter()
        .map(|m| g.leaf(m.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let root = f(&mut g, &ids)?;
    Ok(g.scalar_value(root))
}

/// Compares the reverse-mode gradient of `f` with central finite differences
/// at `step`, input by input and component by component.
pub fn check(
    f: impl ScalarFn<f64>,
    inputs: &[Mat<f64>],
    step: f64,
    tol: f64,
) -> Result<Report, DiffError> {
    let mut g: Graph<f64> = Graph::new();
    let ids = inputs
        .iter()
        .map(|m| g.leaf(m.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let root = f(&mut g, &ids)?;
    g.backward(root)?;
    let analytic: Vec<Mat<f64>> = ids
        .iter()
        .zip(inputs.iter())
        .map(|(&id, m)| {
            g.grad(id)
                .cloned()
                .unwrap_or_else(|| Mat::zeros(m.rows(), m.cols()))
        })
        .collect();

    let mut reports = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let mut worst: Option<ComponentError> = None;
        for r in 0..input.rows() {
            for c in 0..input.cols() {
                let mut plus = inputs.to_vec();
                plus[k].set(r, c, input.at(r, c) + step);
                let mut minus = inputs.to_vec();
                minus[k].set(r, c, input.at(r, c) - step);
                let fp = eval::<f64>(&f, &plus)?;
                let fm = eval::<f64>(&f, &minus)?;
                let numeric = (fp - fm) / (2.0 * step);
                let a = analytic[k].at(r, c);
                let err = rel_err(a, numeric);
                if worst.as_ref().map_or(true, |w| err > w.rel_err) {
                    worst = Some(ComponentError {
                        row: r,
                        col: c,
                        analytic: a,
                        numeric,
                        rel_err: err,
                    });
                }
            }
        }
        reports.push(InputReport {
            input: k,
            max_rel_err: worst.as_ref().map_or(0.0, |w| w.rel_err),
            worst,
        });
    }
    Ok(Report {
        step,
        tol,
        inputs: reports,
    })
}

/// One named entry of the standard verification suite.
#[derive(Debug, Clone)]
pub struct NamedCheck {
    pub name: String,
    pub passed: bool,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    pub tol: f64,
    pub step: f64,
    pub seed: u64,
    /// Random 4-point batches per end-to-end objective check.
    pub batches: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            tol: 1e-4,
            step: 1e-6,
            seed: 0,
            batches: 20,
        }
    }
}

/// Runs the full verification suite: every op family, the atom view, each
/// loss term, and the end-to-end objective of all four training methods on
/// random 4-point batches (gradients taken with respect to the model
/// parameters). Returns one entry per named check.
pub fn standard_suite(opts: &SuiteOptions) -> Result<Vec<NamedCheck>, DiffError> {
    use crate::atom::build_atom;
    use crate::loss::{
        charge_balance_loss, coulomb_loss, neutron_count_loss, pnorm_regularizer, total_loss,
        Coefficients, Method, PairingPlan,
    };
    use crate::model::{cross_entropy, forward, MlpParams, ParamNodes};
    use crate::tensor::{Axis, Norm};
    use rand::Rng;

    let mut rng = crate::rng::stream_rng(opts.seed, crate::rng::Stream::GradCheck);
    let mut checks = Vec::new();
    let run = |name: &str,
                   f: &dyn ScalarFn<f64>,
                   inputs: &[Mat<f64>],
                   checks: &mut Vec<NamedCheck>|
     -> Result<(), DiffError> {
        let report = check(f, inputs, opts.step, opts.tol)?;
        checks.push(NamedCheck {
            name: name.to_string(),
            passed: report.passed(),
            max_rel_err: report.max_rel_err(),
        });
        Ok(())
    };

    let rand_mat = |rng: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize| {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-2.0..2.0)).collect())
    };
    // margins keep kinked / domain-restricted ops away from trouble
    let away = |m: &Mat<f64>| m.map(|v: f64| if v.abs() < 0.05 { v + 0.1 } else { v });
    let positive = |m: &Mat<f64>| m.map(|v: f64| v.abs() + 0.2);

    let x = rand_mat(&mut rng, 2, 3);
    run(
        "matmul",
        &|g: &mut Graph<f64>, ids: &[TensorId]| {
            let m = g.matmul(ids[0], ids[1])?;
            g.sum(m, Axis::Both)
        },
        &[rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 4, 2)],
        &mut checks,
    )?;
    let unaries: [(&str, fn(&mut Graph<f64>, TensorId) -> Result<TensorId, DiffError>, bool); 8] = [
        ("add", |g, id| g.add(id, id), false),
        ("sub-neg", |g, id| {
            let n = g.neg(id)?;
            g.sub(id, n)
        }, false),
        ("mul", |g, id| g.mul(id, id), false),
        ("sigmoid", |g, id| g.sigmoid(id), false),
        ("square", |g, id| g.square(id), false),
        ("sqrt", |g, id| g.sqrt(id), true),
        ("reciprocal", |g, id| g.recip(id), true),
        ("max-with-scalar", |g, id| g.max_scalar(id, 0.0), false),
    ];
    for (name, op, needs_positive) in unaries {
        let input = if needs_positive {
            positive(&x)
        } else if name == "max-with-scalar" {
            away(&x)
        } else {
            x.clone()
        };
        run(
            name,
            &move |g: &mut Graph<f64>, ids: &[TensorId]| {
                let y = op(g, ids[0])?;
                g.sum(y, Axis::Both)
            },
            &[input],
            &mut checks,
        )?;
    }
    for (name, norm) in [("norm-l1", Norm::L1), ("norm-l2", Norm::L2)] {
        run(
            name,
            &move |g: &mut Graph<f64>, ids: &[TensorId]| {
                let n = g.norm_p(ids[0], norm, Axis::Cols)?;
                g.sum(n, Axis::Both)
            },
            &[away(&x)],
            &mut checks,
        )?;
    }
    for (name, f) in [
        (
            "sum",
            (|g: &mut Graph<f64>, ids: &[TensorId]| g.sum(ids[0], Axis::Both))
                as fn(&mut Graph<f64>, &[TensorId]) -> Result<TensorId, DiffError>,
        ),
        ("mean", |g: &mut Graph<f64>, ids: &[TensorId]| {
            let m = g.mean(ids[0], Axis::Rows)?;
            g.sum(m, Axis::Both)
        }),
    ] {
        run(name, &f, &[x.clone()], &mut checks)?;
    }

    // atom view: nucleus norm plus radius, charges kept off the mass kink
    let pres = Mat::from_vec(
        4,
        1,
        (0..4)
            .map(|_| {
                let v: f64 = rng.gen_range(0.3..1.4);
                if rng.gen::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect(),
    );
    let pos = rand_mat(&mut rng, 4, 2);
    run(
        "atom-view",
        &|g: &mut Graph<f64>, ids: &[TensorId]| {
            let atom = build_atom(g, ids[0], ids[1], Norm::L2)?;
            let n = g.norm_p(atom.nucleus, Norm::L2, Axis::Both)?;
            g.add(n, atom.radius)
        },
        &[pres.clone(), pos.clone()],
        &mut checks,
    )?;
    run(
        "charge-balance-loss",
        &|g: &mut Graph<f64>, ids: &[TensorId]| {
            let atom = build_atom(g, ids[0], ids[1], Norm::L2)?;
            charge_balance_loss(g, &atom)
        },
        &[pres.clone(), pos.clone()],
        &mut checks,
    )?;
    run(
        "neutron-count-loss",
        &|g: &mut Graph<f64>, ids: &[TensorId]| {
            let atom = build_atom(g, ids[0], ids[1], Norm::L2)?;
            neutron_count_loss(g, &atom)
        },
        &[pres.clone(), pos.clone()],
        &mut checks,
    )?;
    {
        let plan = PairingPlan::from_seed(&[4, 4], opts.seed ^ 0x9e37_79b9)?;
        let pres_b = pres.map(|v: f64| -v);
        let pos_b = rand_mat(&mut rng, 4, 2);
        run(
            "coulomb-loss",
            &move |g: &mut Graph<f64>, ids: &[TensorId]| {
                let a = build_atom(g, ids[0], ids[1], Norm::L2)?;
                let b = build_atom(g, ids[2], ids[3], Norm::L2)?;
                coulomb_loss(g, &[a, b], &plan, Norm::L2)
            },
            &[pres.clone(), pos.clone(), pres_b, pos_b],
            &mut checks,
        )?;
    }
    for (name, norm) in [
        ("pnorm-regularizer-l1", Norm::L1),
        ("pnorm-regularizer-l2", Norm::L2),
    ] {
        let plan = PairingPlan::from_seed(&[1, 1], 3)?;
        run(
            name,
            &move |g: &mut Graph<f64>, ids: &[TensorId]| {
                pnorm_regularizer(g, ids, norm, &plan)
            },
            &[away(&rand_mat(&mut rng, 1, 2)), away(&rand_mat(&mut rng, 1, 2))],
            &mut checks,
        )?;
    }

    // end-to-end objective for each method, gradients w.r.t. all parameters
    for method in Method::ALL {
        let mut worst = 0.0_f64;
        for batch_idx in 0..opts.batches {
            let params: MlpParams<f64> = MlpParams::init(opts.seed ^ (batch_idx as u64) << 8);
            let points: Vec<Mat<f64>> = (0..4).map(|_| rand_mat(&mut rng, 5, 2)).collect();
            let labels: Vec<u8> = (0..4).map(|_| rng.gen_range(0..2u8)).collect();
            let plan = PairingPlan::from_seed(&[5, 5, 5, 5], opts.seed ^ 77 ^ batch_idx as u64)?;
            let report = check(
                |g, ids| {
                    let nodes = ParamNodes {
                        w1: ids[0],
                        b1: ids[1],
                        w2: ids[2],
                        b2: ids[3],
                    };
                    let mut ce_sum = None;
                    let mut atoms = Vec::new();
                    let mut zs = Vec::new();
                    for (point, &label) in points.iter().zip(&labels) {
                        let trace = forward(g, &nodes, point, Norm::L2)?;
                        let ce = cross_entropy(g, trace.logits, label)?;
                        ce_sum = Some(match ce_sum {
                            Some(acc) => g.add(acc, ce)?,
                            None => ce,
                        });
                        atoms.push(trace.atom);
                        zs.push(trace.z);
                    }
                    let l_ori = g.scale(ce_sum.expect("4 points"), 0.25)?;
                    let out = total_loss(
                        g,
                        l_ori,
                        Some(&atoms),
                        Some(&zs),
                        Some(&plan),
                        &Coefficients::default(),
                        method,
                        Norm::L2,
                    )?;
                    Ok(out.total)
                },
                &[
                    params.w1.clone(),
                    params.b1.clone(),
                    params.w2.clone(),
                    params.b2.clone(),
                ],
                opts.step,
                opts.tol,
            )?;
            worst = worst.max(report.max_rel_err());
        }
        checks.push(NamedCheck {
            name: format!("objective-{method} ({} batches)", opts.batches),
            passed: worst < opts.tol,
            max_rel_err: worst,
        });
    }
    Ok(checks)
}

/// Negative-control fixture: a check whose reverse-mode gradient is wrong on
/// purpose. Must come back failed; exists so the suite's failure reporting
/// stays honest.
pub fn negative_control_check(opts: &SuiteOptions) -> Result<NamedCheck, DiffError> {
    let report = check(
        |g, ids| {
            let y = g.negative_control(ids[0])?;
            let sq = g.square(y)?;
            g.sum(sq, crate::tensor::Axis::Both)
        },
        &[Mat::row_vec(&[0.8, -0.4, 1.3])],
        opts.step,
        opts.tol,
    )?;
    Ok(NamedCheck {
        name: "negative-control".to_string(),
        passed: report.passed(),
        max_rel_err: report.max_rel_err(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Axis, Norm};
    use rand::Rng;

    #[test]
    fn sum_of_squares_gradient() {
        let x = Mat::row_vec(&[1.0, 2.0, 3.0]);
        let report = check(
            |g, ids| {
                let sq = g.square(ids[0])?;
                g.sum(sq, Axis::Both)
            },
            &[x.clone()],
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());

        // and the analytic gradient itself is 2x
        let mut g: Graph<f64> = Graph::new();
        let id = g.leaf(x).unwrap();
        let sq = g.square(id).unwrap();
        let s = g.sum(sq, Axis::Both).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(id).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn matmul_gradient_matches_fd() {
        let mut rng = crate::rng::stream_rng(11, crate::rng::Stream::GradCheck);
        let a = Mat::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let b = Mat::from_vec(4, 2, (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let report = check(
            |g, ids| {
                let m = g.matmul(ids[0], ids[1])?;
                g.sum(m, Axis::Both)
            },
            &[a, b],
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }

    // The true 2-norm is non-differentiable at the origin; EPS_NORM smooths
    // the implementation there but finite differences taken near the kink
    // region still disagree with the smoothed derivative. That input is a
    // documented skip: we assert only the subgradient convention (zero).
    #[test]
    fn two_norm_at_origin_documented_skip() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Mat::row_vec(&[0.0, 0.0])).unwrap();
        let n = g.norm_p(x, Norm::L2, Axis::Both).unwrap();
        g.backward(n).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn every_op_family_matches_fd_on_random_inputs() {
        let mut rng = crate::rng::stream_rng(17, crate::rng::Stream::GradCheck);
        // 100 random inputs in [-2, 2]; domain-restricted ops shift into
        // their domain, kinked ops keep a margin away from the kink.
        for _ in 0..100 {
            let x = Mat::from_vec(2, 3, (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let away = x.map(|v: f64| if v.abs() < 0.05 { v + 0.1 } else { v });
            let pos = x.map(|v: f64| v.abs() + 0.2);

            let cases: Vec<(&str, Box<dyn ScalarFn<f64>>, Mat<f64>)> = vec![
                ("neg", Box::new(|g: &mut Graph<f64>, ids: &[TensorId]| {
                    let y = g.neg(ids[0])?;
                    g.sum(y, Axis::Both)
                }), x.clone()),
                ("sigmoid", Box::new(|g: &mut Graph<f64>, ids: &[TensorId]| {
                    let y = g.sigmoid(ids[0])?;
                    g.sum(y, Axis::Both)
                }), x.clone()),
                ("square", Box::new(|g: &mut Graph<f64>, ids: &[TensorId]| {
                    let y = g.square(ids[0])?;
                    g.sum(y, Axis::Both)
                }), x.clone()),
                ("sqrt", Box::new(|g: &mut Graph<f64>, ids: &[TensorId]| {
                    let y = g.sqrt(ids[0])?;
                    g.sum(y, Axis::Both)
                }), pos.clone()),
                ("reciprocal", Box::new(|g: &mut Graph<f64>, ids: &[TensorId]| {
                    let y = g.recip(ids[0])?;
                    g.sum(y, Axis::Both)
                }), pos),
                ("max_scalar", Box::new(|g: &mut Graph<f64>, ids: &[TensorId]| {
                    let y = g.max_scalar(ids[0], 0.0)?;
                    g.sum(y, Axis::Both)
                }), away.clone()),
                ("norm_l1", Box::new(|g: &mut Graph<f64>, ids: &[TensorId]| {
                    g.norm_p(ids[0], Norm::L1, Axis::Both)
                }), away.clone()),
                ("norm_l2_cols", Box::new(|g: &mut Graph<f64>, ids: &[TensorId]| {
                    let n = g.norm_p(ids[0], Norm::L2, Axis::Cols)?;
                    g.sum(n, Axis::Both)
                }), away),
                ("mean_rows", Box::new(|g: &mut Graph<f64>, ids: &[TensorId]| {
                    let m = g.mean(ids[0], Axis::Rows)?;
                    g.sum(m, Axis::Both)
                }), x.clone()),
            ];
            for (label, f, input) in cases {
                let report = check(f, &[input], 1e-6, 1e-5).unwrap();
                assert!(
                    report.passed(),
                    "{label}: max rel err {}",
                    report.max_rel_err()
                );
            }
        }
    }

    #[test]
    fn negative_control_is_flagged() {
        let x = Mat::row_vec(&[0.7, -0.3]);
        let report = check(
            |g, ids| {
                let y = g.negative_control(ids[0])?;
                let sq = g.square(y)?;
                g.sum(sq, Axis::Both)
            },
            &[x],
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed(), "wrong adjoint must be flagged");
    }

    #[test]
    fn standard_suite_passes_with_default_options() {
        let checks = standard_suite(&SuiteOptions {
            batches: 4, // the CLI default of 20 runs in the acceptance suite
            ..SuiteOptions::default()
        })
        .unwrap();
        assert!(checks.len() > 15);
        for c in &checks {
            assert!(c.passed, "{}: max rel err {}", c.name, c.max_rel_err);
        }
        assert!(checks.iter().any(|c| c.name.starts_with("objective-atom")));
    }

    #[test]
    fn negative_control_check_fails_and_carries_its_name() {
        let c = negative_control_check(&SuiteOptions::default()).unwrap();
        assert!(!c.passed);
        assert_eq!(c.name, "negative-control");
    }

    #[test]
    fn unachievable_tolerance_fails_honestly() {
        // demanding 1e-12 is beyond central-difference precision in f64
        let checks = standard_suite(&SuiteOptions {
            tol: 1e-12,
            batches: 1,
            ..SuiteOptions::default()
        })
        .unwrap();
        assert!(checks.iter().any(|c| !c.passed));
    }
}
