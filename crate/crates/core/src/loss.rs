//! Training objectives: the three atom-modeling losses, the p-norm distance
//! baselines, batch pairing, and the combined objective.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atom::{pair_distance, AtomNodes};
use crate::num::Real;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Axis, DiffError, Graph, Norm, TensorId};

/// Training method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Cross-entropy only.
    Ce,
    /// Cross-entropy plus the negated mean pairwise 1-norm distance.
    L1,
    /// Cross-entropy plus the negated mean pairwise 2-norm distance.
    L2,
    /// Cross-entropy plus the three atom-modeling losses.
    Atom,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ce, Method::L1, Method::L2, Method::Atom];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ce => "ce",
            Method::L1 => "l1",
            Method::L2 => "l2",
            Method::Atom => "atom",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ce" => Ok(Method::Ce),
            "l1" => Ok(Method::L1),
            "l2" => Ok(Method::L2),
            "atom" => Ok(Method::Atom),
            other => Err(format!("unknown method '{other}'; expected one of ce, l1, l2, atom")),
        }
    }
}

/// Loss coefficients. `c_f`, `c_charge`, `c_neutrons` weight the atom losses;
/// `c_p` weights the p-norm baselines (the negated distance is unbounded, so
/// its default is small).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Coefficients {
    pub c_f: f64,
    pub c_charge: f64,
    pub c_neutrons: f64,
    pub c_p: f64,
}

impl Default for Coefficients {
    fn default() -> Self {
        Coefficients {
            c_f: 1.0,
            c_charge: 1.0,
            c_neutrons: 1.0,
            c_p: 0.01,
        }
    }
}

/// Which atoms get compared in a batch, and which particle pairs get sampled
/// inside each atom pair.
///
/// Atom pairing is a uniformly random perfect matching (no atom paired with
/// itself; an odd leftover atom joins a random partner and that partner
/// appears twice). Each atom pair carries exactly `min(|A1|, |A2|)` particle
/// index pairs sampled uniformly without replacement from the index grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairingPlan {
    pub atom_pairs: Vec<(usize, usize)>,
    /// One list per atom pair, aligned with `atom_pairs`.
    pub particle_pairs: Vec<Vec<(usize, usize)>>,
    pub seed: u64,
}

impl PairingPlan {
    /// Deterministic plan for a batch with the given per-atom particle
    /// counts. Same seed, same plan, bit for bit.
    pub fn from_seed(particle_counts: &[usize], seed: u64) -> Result<Self, DiffError> {
        let n = particle_counts.len();
        if n < 2 {
            return Err(DiffError::BatchTooSmall { got: n });
        }
        let mut rng = stream_rng(seed, Stream::PlanDraw);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut atom_pairs: Vec<(usize, usize)> = order.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        if n % 2 == 1 {
            let leftover = order[n - 1];
            let mut partner = rng.gen_range(0..n - 1);
            if order[partner] == leftover {
                partner = n - 2; // unreachable by construction, kept as a guard
            }
            atom_pairs.push((leftover, order[partner]));
        }
        let particle_pairs = atom_pairs
            .iter()
            .map(|&(a, b)| sample_particle_pairs(particle_counts[a], particle_counts[b], &mut rng))
            .collect();
        Ok(PairingPlan {
            atom_pairs,
            particle_pairs,
            seed,
        })
    }

    fn validate(&self, particle_counts: &[usize]) -> Result<(), DiffError> {
        if self.atom_pairs.len() != self.particle_pairs.len() {
            return Err(DiffError::InvalidPlan("pair list lengths differ".into()));
        }
        for (k, &(a, b)) in self.atom_pairs.iter().enumerate() {
            if a == b {
                return Err(DiffError::InvalidPlan(format!("atom {a} paired with itself")));
            }
            if a >= particle_counts.len() || b >= particle_counts.len() {
                return Err(DiffError::InvalidPlan(format!("pair ({a},{b}) out of range")));
            }
            let expect = particle_counts[a].min(particle_counts[b]);
            let pairs = &self.particle_pairs[k];
            if pairs.len() != expect {
                return Err(DiffError::InvalidPlan(format!(
                    "atom pair ({a},{b}) has {} particle pairs, expected {expect}",
                    pairs.len()
                )));
            }
            if pairs
                .iter()
                .any(|&(i, j)| i >= particle_counts[a] || j >= particle_counts[b])
            {
                return Err(DiffError::InvalidPlan(format!(
                    "particle index out of range in atom pair ({a},{b})"
                )));
            }
        }
        Ok(())
    }
}

/// `min(na, nb)` distinct cells of the `na x nb` index grid, uniformly
/// without replacement.
fn sample_particle_pairs(na: usize, nb: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let want = na.min(nb);
    rand::seq::index::sample(rng, na * nb, want)
        .into_iter()
        .map(|cell| (cell / nb, cell % nb))
        .collect()
}

/// `(sum of charges)^2` for one atom. Zero exactly on neutral atoms.
pub fn charge_balance_loss<F: Real>(
    g: &mut Graph<F>,
    atom: &AtomNodes,
) -> Result<TensorId, DiffError> {
    let total = g.sum(atom.charges, Axis::Both)?;
    g.square(total)
}

/// `(sum of squared charges - (2/3)|A|)^2` for one atom: the charged
/// particles should be about two thirds of the particle count.
pub fn neutron_count_loss<F: Real>(
    g: &mut Graph<F>,
    atom: &AtomNodes,
) -> Result<TensorId, DiffError> {
    let squared = g.square(atom.charges)?;
    let total = g.sum(squared, Axis::Both)?;
    let target = F::of(2.0) / F::of(3.0) * F::of(atom.size as f64);
    let shifted = g.add_scalar(total, -target)?;
    g.square(shifted)
}

/// Coulomb potential: per atom pair, `sum q_i * q_j / d_ij` over its
/// sampled particle pairs, then the mean across the plan's atom pairs.
/// The per-pair normalization keeps `c_f` batch-size independent, matching
/// how the per-atom losses are batch-averaged. Heteroelectric attraction
/// makes the value signed.
pub fn coulomb_loss<F: Real>(
    g: &mut Graph<F>,
    atoms: &[AtomNodes],
    plan: &PairingPlan,
    norm: Norm,
) -> Result<TensorId, DiffError> {
    if atoms.len() < 2 {
        return Err(DiffError::BatchTooSmall { got: atoms.len() });
    }
    let counts: Vec<usize> = atoms.iter().map(|a| a.size).collect();
    plan.validate(&counts)?;
    let mut total: Option<TensorId> = None;
    for (k, &(ai, bi)) in plan.atom_pairs.iter().enumerate() {
        let (a, b) = (atoms[ai], atoms[bi]);
        for &(i, j) in &plan.particle_pairs[k] {
            let q_i = a.charge(g, i)?;
            let q_j = b.charge(g, j)?;
            let product = g.mul(q_i, q_j)?;
            let d = pair_distance(g, &a, &b, i, j, norm)?;
            let inv_d = g.recip(d)?;
            let term = g.mul(product, inv_d)?;
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
    }
    match total {
        Some(t) => g.scale(t, F::one() / F::of(plan.atom_pairs.len() as f64)),
        // a valid plan over >= 2 atoms always yields at least one pair
        None => Err(DiffError::InvalidPlan("plan has no particle pairs".into())),
    }
}

/// Negated mean pairwise p-norm distance between data-point embeddings over
/// the plan's atom pairs; minimizing it pushes embeddings apart.
pub fn pnorm_regularizer<F: Real>(
    g: &mut Graph<F>,
    embeddings: &[TensorId],
    p: Norm,
    plan: &PairingPlan,
) -> Result<TensorId, DiffError> {
    if embeddings.len() < 2 {
        return Err(DiffError::BatchTooSmall {
            got: embeddings.len(),
        });
    }
    let mut total: Option<TensorId> = None;
    for &(a, b) in &plan.atom_pairs {
        if a >= embeddings.len() || b >= embeddings.len() {
            return Err(DiffError::InvalidPlan(format!("pair ({a},{b}) out of range")));
        }
        let diff = g.sub(embeddings[a], embeddings[b])?;
        let dist = g.norm_p(diff, p, Axis::Both)?;
        total = Some(match total {
            Some(t) => g.add(t, dist)?,
            None => dist,
        });
    }
    let total = total.expect("plan has at least one atom pair");
    g.scale(total, -F::one() / F::of(plan.atom_pairs.len() as f64))
}

/// Graph nodes of the combined objective. Terms missing for a method stay
/// `None`; for the p-norm baselines the regularizer is reported through the
/// `l_f` slot (paired with `c_p`) so the breakdown composition is uniform.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub l_ori: TensorId,
    pub l_f: Option<TensorId>,
    pub l_charge: Option<TensorId>,
    pub l_neutrons: Option<TensorId>,
    pub total: TensorId,
}

/// Scalar snapshot of one objective evaluation.
///
/// Invariant: `total` equals `l_ori + c_f*l_f + c_charge*l_charge +
/// c_neutrons*l_neutrons` evaluated left to right, bit for bit, because the
/// graph composes it in exactly that order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ori: f64,
    pub l_f: f64,
    pub l_charge: f64,
    pub l_neutrons: f64,
    pub c_f: f64,
    pub c_charge: f64,
    pub c_neutrons: f64,
    pub total: f64,
}

impl LossNodes {
    pub fn breakdown<F: Real>(&self, g: &Graph<F>, method: Method, coeffs: &Coefficients) -> LossBreakdown {
        let read = |id: Option<TensorId>| {
            id.map_or(0.0, |id| g.scalar_value(id).to_f64_lossy())
        };
        let (c_f, c_charge, c_neutrons) = match method {
            Method::Ce => (0.0, 0.0, 0.0),
            Method::L1 | Method::L2 => (coeffs.c_p, 0.0, 0.0),
            Method::Atom => (coeffs.c_f, coeffs.c_charge, coeffs.c_neutrons),
        };
        LossBreakdown {
            l_ori: g.scalar_value(self.l_ori).to_f64_lossy(),
            l_f: read(self.l_f),
            l_charge: read(self.l_charge),
            l_neutrons: read(self.l_neutrons),
            c_f,
            c_charge,
            c_neutrons,
            total: g.scalar_value(self.total).to_f64_lossy(),
        }
    }
}

/// Combines the task loss with the method's regularizer.
///
/// * `ce`: total = l_ori.
/// * `l1`/`l2`: total = l_ori + c_p * pnorm_regularizer (needs `embeddings`).
/// * `atom`: total = l_ori + c_f*L_f + c_charge*mean(L_charge) +
///   c_neutrons*mean(L_neutrons) (needs `atoms`), with the per-atom losses
///   averaged over the batch so coefficients stay batch-size independent.
pub fn total_loss<F: Real>(
    g: &mut Graph<F>,
    l_ori: TensorId,
    atoms: Option<&[AtomNodes]>,
    embeddings: Option<&[TensorId]>,
    plan: Option<&PairingPlan>,
    coeffs: &Coefficients,
    method: Method,
    norm: Norm,
) -> Result<LossNodes, DiffError> {
    match method {
        Method::Ce => Ok(LossNodes {
            l_ori,
            l_f: None,
            l_charge: None,
            l_neutrons: None,
            total: l_ori,
        }),
        Method::L1 | Method::L2 => {
            let embeddings = embeddings.ok_or(DiffError::MissingInput {
                method: method.name(),
                what: "data-point embeddings",
            })?;
            let plan = plan.ok_or(DiffError::MissingInput {
                method: method.name(),
                what: "a pairing plan",
            })?;
            let p = if method == Method::L1 { Norm::L1 } else { Norm::L2 };
            let reg = pnorm_regularizer(g, embeddings, p, plan)?;
            let weighted = g.scale(reg, F::of(coeffs.c_p))?;
            let total = g.add(l_ori, weighted)?;
            Ok(LossNodes {
                l_ori,
                l_f: Some(reg),
                l_charge: None,
                l_neutrons: None,
                total,
            })
        }
        Method::Atom => {
            let atoms = atoms.ok_or(DiffError::MissingInput {
                method: method.name(),
                what: "atom views",
            })?;
            let plan = plan.ok_or(DiffError::MissingInput {
                method: method.name(),
                what: "a pairing plan",
            })?;
            let l_f = coulomb_loss(g, atoms, plan, norm)?;
            let l_charge = batch_mean(g, atoms, charge_balance_loss)?;
            let l_neutrons = batch_mean(g, atoms, neutron_count_loss)?;

            let f_term = g.scale(l_f, F::of(coeffs.c_f))?;
            let mut total = g.add(l_ori, f_term)?;
            let charge_term = g.scale(l_charge, F::of(coeffs.c_charge))?;
            total = g.add(total, charge_term)?;
            let neutron_term = g.scale(l_neutrons, F::of(coeffs.c_neutrons))?;
            total = g.add(total, neutron_term)?;
            Ok(LossNodes {
                l_ori,
                l_f: Some(l_f),
                l_charge: Some(l_charge),
                l_neutrons: Some(l_neutrons),
                total,
            })
        }
    }
}

fn batch_mean<F: Real>(
    g: &mut Graph<F>,
    atoms: &[AtomNodes],
    per_atom: impl Fn(&mut Graph<F>, &AtomNodes) -> Result<TensorId, DiffError>,
) -> Result<TensorId, DiffError> {
    let mut total: Option<TensorId> = None;
    for atom in atoms {
        let term = per_atom(g, atom)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = total.ok_or(DiffError::BatchTooSmall { got: 0 })?;
    g.scale(total, F::one() / F::of(atoms.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atom::{build_atom, DIST_FLOOR};
    use crate::tensor::Mat;
    use rand::Rng;

    /// Atom whose charges are given directly (other derived nodes are built
    /// from positions with those masses), for exact loss-value tests.
    fn atom_with_charges(g: &mut Graph<f64>, charges: &[f64], rows: &[Vec<f64>]) -> AtomNodes {
        let charge_pre = g.leaf(Mat::col_vec(&vec![0.0; charges.len()])).unwrap();
        let positions = g.leaf(Mat::from_rows(rows)).unwrap();
        let q = g.leaf(Mat::col_vec(charges)).unwrap();
        let masses = g
            .leaf(Mat::col_vec(
                &charges.iter().map(|&c| crate::atom::mass_of(c)).collect::<Vec<_>>(),
            ))
            .unwrap();
        let nucleus = crate::atom::nucleus_position(g, positions, masses).unwrap();
        let radius = crate::atom::nucleus_radius(g, positions, masses, nucleus, Norm::L2).unwrap();
        AtomNodes {
            charge_pre,
            positions,
            charges: q,
            masses,
            nucleus,
            radius,
            size: charges.len(),
        }
    }

    #[test]
    fn charge_balance_zero_cases() {
        let mut g: Graph<f64> = Graph::new();
        let neutral = atom_with_charges(&mut g, &[0.5, -0.5, 0.0], &vec![vec![0.0, 0.0]; 3]);
        let l = charge_balance_loss(&mut g, &neutral).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);

        let charged = atom_with_charges(&mut g, &[1.0, 1.0], &vec![vec![0.0, 0.0]; 2]);
        let l2 = charge_balance_loss(&mut g, &charged).unwrap();
        assert_eq!(g.scalar_value(l2), 4.0);

        let single = atom_with_charges(&mut g, &[-1.0], &[vec![0.0, 0.0]]);
        let l3 = charge_balance_loss(&mut g, &single).unwrap();
        assert_eq!(g.scalar_value(l3), 1.0);
    }

    #[test]
    fn neutron_count_zero_cases() {
        let mut g: Graph<f64> = Graph::new();
        let balanced = atom_with_charges(&mut g, &[1.0, -1.0, 0.0], &vec![vec![0.0, 0.0]; 3]);
        let l = neutron_count_loss(&mut g, &balanced).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);

        let all_neutron = atom_with_charges(&mut g, &[0.0, 0.0, 0.0], &vec![vec![0.0, 0.0]; 3]);
        let l2 = neutron_count_loss(&mut g, &all_neutron).unwrap();
        assert_eq!(g.scalar_value(l2), 4.0);

        let six = atom_with_charges(
            &mut g,
            &[1.0, 1.0, -1.0, -1.0, 0.0, 0.0],
            &vec![vec![0.0, 0.0]; 6],
        );
        let l3 = neutron_count_loss(&mut g, &six).unwrap();
        assert_eq!(g.scalar_value(l3), 0.0);
    }

    #[test]
    fn strictly_positive_off_the_zero_sets() {
        let mut g: Graph<f64> = Graph::new();
        let atom = atom_with_charges(&mut g, &[0.5, -0.4, 0.0], &vec![vec![0.0, 0.0]; 3]);
        let lc = charge_balance_loss(&mut g, &atom).unwrap();
        let ln = neutron_count_loss(&mut g, &atom).unwrap();
        assert!(g.scalar_value(lc) > 0.0);
        assert!(g.scalar_value(ln) > 0.0);
    }

    fn plan_for(pairs: Vec<(usize, usize)>, particle: Vec<Vec<(usize, usize)>>) -> PairingPlan {
        PairingPlan {
            atom_pairs: pairs,
            particle_pairs: particle,
            seed: 0,
        }
    }

    #[test]
    fn coulomb_examples() {
        let mut g: Graph<f64> = Graph::new();
        // single-proton atoms at nucleus distance 2
        let a = atom_with_charges(&mut g, &[1.0], &[vec![0.0, 0.0]]);
        let b = atom_with_charges(&mut g, &[1.0], &[vec![2.0, 0.0]]);
        let plan = plan_for(vec![(0, 1)], vec![vec![(0, 0)]]);
        let l = coulomb_loss(&mut g, &[a, b], &plan, Norm::L2).unwrap();
        assert!((g.scalar_value(l) - 0.5).abs() < 1e-6);

        // neutron pair contributes zero
        let c = atom_with_charges(&mut g, &[0.0], &[vec![0.0, 0.0]]);
        let d = atom_with_charges(&mut g, &[1.0], &[vec![1.0, 0.0]]);
        let l2 = coulomb_loss(&mut g, &[c, d], &plan, Norm::L2).unwrap();
        assert_eq!(g.scalar_value(l2), 0.0);

        // unit charges at unit distance
        let e = atom_with_charges(&mut g, &[1.0], &[vec![0.0, 0.0]]);
        let f = atom_with_charges(&mut g, &[1.0], &[vec![1.0, 0.0]]);
        let l3 = coulomb_loss(&mut g, &[e, f], &plan, Norm::L2).unwrap();
        assert!((g.scalar_value(l3) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn coulomb_rejects_small_batches() {
        let mut g: Graph<f64> = Graph::new();
        let a = atom_with_charges(&mut g, &[1.0], &[vec![0.0, 0.0]]);
        let plan = plan_for(vec![], vec![]);
        assert!(matches!(
            coulomb_loss(&mut g, &[a], &plan, Norm::L2),
            Err(DiffError::BatchTooSmall { got: 1 })
        ));
    }

    #[test]
    fn coulomb_translation_invariant_for_equal_mass_sums() {
        // All atoms share the same all-positive charge multiset: nuclei pick
        // up identical shifts (so their distances are unchanged) and every
        // pair is homoelectric (so the radii, whose literal count-divisor
        // formula is not translation invariant, never enter the distance).
        let charges = [0.7, 0.3, 0.1];
        let mut rng = crate::rng::stream_rng(21, Stream::GradCheck);
        let rows: Vec<Vec<Vec<f64>>> = (0..4)
            .map(|_| {
                (0..3)
                    .map(|_| (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .collect()
            })
            .collect();
        let plan = PairingPlan::from_seed(&[3, 3, 3, 3], 99).unwrap();

        let eval = |shift: [f64; 2]| {
            let mut g: Graph<f64> = Graph::new();
            let atoms: Vec<AtomNodes> = rows
                .iter()
                .map(|r| {
                    let shifted: Vec<Vec<f64>> = r
                        .iter()
                        .map(|p| vec![p[0] + shift[0], p[1] + shift[1]])
                        .collect();
                    atom_with_charges(&mut g, &charges, &shifted)
                })
                .collect();
            let l = coulomb_loss(&mut g, &atoms, &plan, Norm::L2).unwrap();
            g.scalar_value(l)
        };
        let base = eval([0.0, 0.0]);
        let moved = eval([3.7, -1.2]);
        assert!((base - moved).abs() < 1e-9, "{base} vs {moved}");
    }

    #[test]
    fn pnorm_examples() {
        let mut g: Graph<f64> = Graph::new();
        let z0 = g.leaf(Mat::row_vec(&[0.0, 0.0])).unwrap();
        let z1 = g.leaf(Mat::row_vec(&[3.0, 4.0])).unwrap();
        let plan = plan_for(vec![(0, 1)], vec![vec![]]);
        let l2 = pnorm_regularizer(&mut g, &[z0, z1], Norm::L2, &plan).unwrap();
        assert!((g.scalar_value(l2) + 5.0).abs() < 1e-8);
        let l1 = pnorm_regularizer(&mut g, &[z0, z1], Norm::L1, &plan).unwrap();
        assert_eq!(g.scalar_value(l1), -7.0);

        let same = pnorm_regularizer(&mut g, &[z0, z0], Norm::L2, &plan).unwrap();
        assert!(g.scalar_value(same).abs() < 1.5e-6); // EPS_NORM shows up here
    }

    #[test]
    fn plan_is_deterministic_and_well_formed() {
        let counts = vec![5usize; 7];
        let a = PairingPlan::from_seed(&counts, 42).unwrap();
        let b = PairingPlan::from_seed(&counts, 42).unwrap();
        assert_eq!(a, b);
        let c = PairingPlan::from_seed(&counts, 43).unwrap();
        assert_ne!(a, c);

        // every atom appears, nobody is self-paired, counts are exact
        let mut seen = vec![false; counts.len()];
        for &(x, y) in &a.atom_pairs {
            assert_ne!(x, y);
            seen[x] = true;
            seen[y] = true;
        }
        assert!(seen.iter().all(|&s| s));
        for pairs in &a.particle_pairs {
            assert_eq!(pairs.len(), 5);
            let mut uniq = pairs.clone();
            uniq.sort_unstable();
            uniq.dedup();
            assert_eq!(uniq.len(), 5, "sampled without replacement");
        }
    }

    #[test]
    fn plan_rejects_tiny_batches() {
        assert!(matches!(
            PairingPlan::from_seed(&[5], 1),
            Err(DiffError::BatchTooSmall { got: 1 })
        ));
    }

    #[test]
    fn total_loss_ce_is_task_loss_exactly() {
        let mut g: Graph<f64> = Graph::new();
        let l_ori = g.scalar(0.731).unwrap();
        let out = total_loss(
            &mut g,
            l_ori,
            None,
            None,
            None,
            &Coefficients::default(),
            Method::Ce,
            Norm::L2,
        )
        .unwrap();
        assert_eq!(out.total, l_ori);
    }

    #[test]
    fn total_loss_zero_coefficients_degenerate_to_ce() {
        let mut g: Graph<f64> = Graph::new();
        let l_ori = g.scalar(0.9).unwrap();
        let atoms: Vec<AtomNodes> = (0..4)
            .map(|i| {
                atom_with_charges(
                    &mut g,
                    &[0.4, -0.2, 0.1],
                    &[vec![i as f64, 0.0], vec![0.0, 1.0], vec![1.0, i as f64]],
                )
            })
            .collect();
        let plan = PairingPlan::from_seed(&[3, 3, 3, 3], 5).unwrap();
        let coeffs = Coefficients {
            c_f: 0.0,
            c_charge: 0.0,
            c_neutrons: 0.0,
            c_p: 0.01,
        };
        let out = total_loss(
            &mut g,
            l_ori,
            Some(&atoms),
            None,
            Some(&plan),
            &coeffs,
            Method::Atom,
            Norm::L2,
        )
        .unwrap();
        assert_eq!(g.scalar_value(out.total), g.scalar_value(l_ori));
    }

    #[test]
    fn total_loss_missing_inputs_error() {
        let mut g: Graph<f64> = Graph::new();
        let l_ori = g.scalar(0.5).unwrap();
        assert!(matches!(
            total_loss(
                &mut g,
                l_ori,
                None,
                None,
                None,
                &Coefficients::default(),
                Method::Atom,
                Norm::L2
            ),
            Err(DiffError::MissingInput { .. })
        ));
        assert!(matches!(
            total_loss(
                &mut g,
                l_ori,
                None,
                None,
                None,
                &Coefficients::default(),
                Method::L1,
                Norm::L2
            ),
            Err(DiffError::MissingInput { .. })
        ));
    }

    // Straight-line re-implementation of the objective with plain floats —
    // no graph, no shared helpers — used as the oracle for total_loss.
    mod oracle {
        use crate::atom::DIST_FLOOR;
        use crate::tensor::EPS_NORM;

        pub fn norm2(v: &[f64]) -> f64 {
            (v.iter().map(|x| x * x).sum::<f64>() + EPS_NORM).sqrt()
        }

        pub struct PlainAtom {
            pub charges: Vec<f64>,
            pub nucleus: Vec<f64>,
            pub radius: f64,
        }

        pub fn plain_atom(pre: &[f64], positions: &[Vec<f64>]) -> PlainAtom {
            let n = pre.len();
            let charges: Vec<f64> = pre.iter().map(|&e| 2.0 / (1.0 + (-e).exp()) - 1.0).collect();
            let masses: Vec<f64> = charges.iter().map(|&q| 1.0 - (-q).max(0.0)).collect();
            let dim = positions[0].len();
            let mut nucleus = vec![0.0; dim];
            for (m, p) in masses.iter().zip(positions) {
                for (acc, x) in nucleus.iter_mut().zip(p) {
                    *acc += m * x;
                }
            }
            for acc in nucleus.iter_mut() {
                *acc /= n as f64;
            }
            let mut radius = 0.0;
            for (m, p) in masses.iter().zip(positions) {
                let off: Vec<f64> = p
                    .iter()
                    .zip(&nucleus)
                    .map(|(x, mu)| x * (1.0 - m) - mu)
                    .collect();
                radius += norm2(&off);
            }
            radius /= n as f64;
            PlainAtom {
                charges,
                nucleus,
                radius,
            }
        }

        pub fn coulomb(
            atoms: &[PlainAtom],
            atom_pairs: &[(usize, usize)],
            particle_pairs: &[Vec<(usize, usize)>],
        ) -> f64 {
            let mut total = 0.0;
            for (k, &(ai, bi)) in atom_pairs.iter().enumerate() {
                let (a, b) = (&atoms[ai], &atoms[bi]);
                for &(i, j) in &particle_pairs[k] {
                    let qq = a.charges[i] * b.charges[j];
                    let gap: Vec<f64> = a
                        .nucleus
                        .iter()
                        .zip(&b.nucleus)
                        .map(|(x, y)| x - y)
                        .collect();
                    let mut d = norm2(&gap) + DIST_FLOOR;
                    if qq < 0.0 {
                        d += (a.radius + b.radius) / 2.0;
                    }
                    total += qq / d;
                }
            }
            total * (1.0 / atom_pairs.len() as f64)
        }

        pub fn charge_mean(atoms: &[PlainAtom]) -> f64 {
            atoms
                .iter()
                .map(|a| a.charges.iter().sum::<f64>().powi(2))
                .sum::<f64>()
                / atoms.len() as f64
        }

        pub fn neutron_mean(atoms: &[PlainAtom]) -> f64 {
            atoms
                .iter()
                .map(|a| {
                    let s: f64 = a.charges.iter().map(|q| q * q).sum();
                    (s - 2.0 / 3.0 * a.charges.len() as f64).powi(2)
                })
                .sum::<f64>()
                / atoms.len() as f64
        }
    }

    #[test]
    fn total_loss_matches_straight_line_oracle() {
        let mut rng = crate::rng::stream_rng(31, Stream::GradCheck);
        let pres: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..5).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .collect();
        let positions: Vec<Vec<Vec<f64>>> = (0..4)
            .map(|_| {
                (0..5)
                    .map(|_| (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .collect()
            })
            .collect();
        let plan = PairingPlan::from_seed(&[5, 5, 5, 5], 77).unwrap();
        let l_ori_val = 0.6931;
        let coeffs = Coefficients {
            c_f: 1.0,
            c_charge: 1.0,
            c_neutrons: 1.0,
            c_p: 0.01,
        };

        let mut g: Graph<f64> = Graph::new();
        let atoms: Vec<AtomNodes> = pres
            .iter()
            .zip(&positions)
            .map(|(pre, pos)| {
                let q = g.leaf(Mat::col_vec(pre)).unwrap();
                let p = g.leaf(Mat::from_rows(pos)).unwrap();
                build_atom(&mut g, q, p, Norm::L2).unwrap()
            })
            .collect();
        let l_ori = g.scalar(l_ori_val).unwrap();
        let out = total_loss(
            &mut g,
            l_ori,
            Some(&atoms),
            None,
            Some(&plan),
            &coeffs,
            Method::Atom,
            Norm::L2,
        )
        .unwrap();

        let plain: Vec<oracle::PlainAtom> = pres
            .iter()
            .zip(&positions)
            .map(|(pre, pos)| oracle::plain_atom(pre, pos))
            .collect();
        let expect = l_ori_val
            + coeffs.c_f * oracle::coulomb(&plain, &plan.atom_pairs, &plan.particle_pairs)
            + coeffs.c_charge * oracle::charge_mean(&plain)
            + coeffs.c_neutrons * oracle::neutron_mean(&plain);
        let got = g.scalar_value(out.total);
        assert!((got - expect).abs() < 1e-12, "graph {got} vs oracle {expect}");
    }

    #[test]
    fn total_loss_gradients_pass_for_all_methods() {
        use crate::gradcheck;
        let mut rng = crate::rng::stream_rng(41, Stream::GradCheck);
        let plan = PairingPlan::from_seed(&[3, 3, 3, 3], 13).unwrap();
        for method in Method::ALL {
            let pres: Vec<f64> = (0..12)
                .map(|_| {
                    let v: f64 = rng.gen_range(0.3..1.4);
                    if rng.gen::<bool>() {
                        v
                    } else {
                        -v
                    }
                })
                .collect();
            let pos: Vec<f64> = (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let plan = plan.clone();
            let report = gradcheck::check(
                move |g, ids| {
                    let mut atoms = Vec::new();
                    let mut zs = Vec::new();
                    for k in 0..4 {
                        let pre = g.slice(ids[0], (3 * k, 3), (0, 1))?;
                        let p = g.slice(ids[1], (3 * k, 3), (0, 2))?;
                        atoms.push(build_atom(g, pre, p, Norm::L2)?);
                        let zt = g.transpose(pre)?;
                        let z = g.matmul(zt, p)?; // any differentiable embedding
                        zs.push(z);
                    }
                    let l_ori = g.scalar(0.7)?;
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
                    Mat::col_vec(&pres),
                    Mat::from_vec(12, 2, pos),
                ],
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(
                report.passed(),
                "{method}: max rel err {}",
                report.max_rel_err()
            );
        }
    }

    #[test]
    fn pair_distance_floor_shows_up_in_coulomb() {
        let mut g: Graph<f64> = Graph::new();
        let a = atom_with_charges(&mut g, &[1.0], &[vec![0.0, 0.0]]);
        let b = atom_with_charges(&mut g, &[1.0], &[vec![0.0, 0.0]]);
        let plan = plan_for(vec![(0, 1)], vec![vec![(0, 0)]]);
        let l = coulomb_loss(&mut g, &[a, b], &plan, Norm::L2).unwrap();
        // coincident nuclei: 1/(eps_norm-ish + DIST_FLOOR)
        let v = g.scalar_value(l);
        assert!(v > 1.0 / (3.0 * DIST_FLOOR) && v <= 1.0 / DIST_FLOOR);
    }
}
