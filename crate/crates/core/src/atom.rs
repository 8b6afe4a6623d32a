//! The atomic analogy: charges, masses, nucleus, radius, pair distances.
//!
//! A data point is an atom; each of its components is a particle whose
//! embedding splits into a charge pre-activation (one dimension) and a
//! position (the rest). Everything here is a differentiable composition in
//! the graph engine, so gradients flow back into the embeddings. Plain
//! scalar versions of the charge and mass maps are exposed for callers that
//! only need values.

use crate::num::Real;
use crate::tensor::{Axis, DiffError, Graph, Mat, Norm, TensorId};

/// Floor added to every particle-pair distance. The Coulomb potential
/// diverges as the distance goes to zero, which destabilizes early training
/// when nuclei coincide; the floor bounds `1/d` by 1e6.
pub const DIST_FLOOR: f64 = 1e-6;

/// Charge from its pre-activation: `q = 2*sigmoid(e_q) - 1`, an odd,
/// strictly increasing map into (-1, 1).
pub fn charge_of<F: Real>(e_q: F) -> F {
    let two = F::of(2.0);
    two / (F::one() + (-e_q).exp()) - F::one()
}

/// Mass from charge: `m = 1 - max(-q, 0)`. Nonnegative charges weigh 1,
/// a full electron (q = -1) weighs 0.
pub fn mass_of<F: Real>(q: F) -> F {
    F::one() - (-q).max(F::zero())
}

/// Graph nodes for one atom: per-particle quantities plus the derived
/// nucleus and radius.
#[derive(Debug, Clone, Copy)]
pub struct AtomNodes {
    /// Charge pre-activations, |A| x 1.
    pub charge_pre: TensorId,
    /// Particle positions, |A| x (h-1).
    pub positions: TensorId,
    /// Charges in (-1, 1), |A| x 1.
    pub charges: TensorId,
    /// Masses in [0, 1], |A| x 1.
    pub masses: TensorId,
    /// Nucleus position, 1 x (h-1).
    pub nucleus: TensorId,
    /// Nucleus radius, 1 x 1.
    pub radius: TensorId,
    /// Particle count |A|.
    pub size: usize,
}

impl AtomNodes {
    /// Charge of particle `i` as a 1x1 node.
    pub fn charge<F: Real>(&self, g: &mut Graph<F>, i: usize) -> Result<TensorId, DiffError> {
        g.slice(self.charges, (i, 1), (0, 1))
    }
}

/// `q = 2*sigmoid(e_q) - 1` elementwise over a column of pre-activations.
pub fn charges_from_pre<F: Real>(
    g: &mut Graph<F>,
    e_q: TensorId,
) -> Result<TensorId, DiffError> {
    let s = g.sigmoid(e_q)?;
    let doubled = g.scale(s, F::of(2.0))?;
    g.add_scalar(doubled, -F::one())
}

/// `m = 1 - max(-q, 0)` elementwise.
pub fn masses_from_charges<F: Real>(
    g: &mut Graph<F>,
    charges: TensorId,
) -> Result<TensorId, DiffError> {
    let negated = g.neg(charges)?;
    let clamped = g.max_scalar(negated, F::zero())?;
    let neg_clamped = g.neg(clamped)?;
    g.add_scalar(neg_clamped, F::one())
}

/// Nucleus position: mass-weighted sum of positions divided by the particle
/// count |A| (the count, not the mass total).
pub fn nucleus_position<F: Real>(
    g: &mut Graph<F>,
    positions: TensorId,
    masses: TensorId,
) -> Result<TensorId, DiffError> {
    let n = g.value(positions).rows();
    if n == 0 {
        return Err(DiffError::EmptyAtom);
    }
    let masses_row = g.transpose(masses)?;
    let weighted = g.matmul(masses_row, positions)?;
    g.scale(weighted, F::one() / F::of(n as f64))
}

/// Nucleus radius: mean over all particles of `||e_p*(1-m) - mu||_p`.
/// Heavy particles (m = 1) contribute `||-mu||`, full electrons (m = 0)
/// contribute their actual distance to the nucleus.
pub fn nucleus_radius<F: Real>(
    g: &mut Graph<F>,
    positions: TensorId,
    masses: TensorId,
    nucleus: TensorId,
    norm: Norm,
) -> Result<TensorId, DiffError> {
    let (n, dim) = g.value(positions).shape();
    if n == 0 {
        return Err(DiffError::EmptyAtom);
    }
    let neg_m = g.neg(masses)?;
    let one_minus_m = g.add_scalar(neg_m, F::one())?;
    // column -> full width, row -> full height, via matmul with ones
    let ones_row = g.leaf(Mat::filled(1, dim, F::one()))?;
    let discount = g.matmul(one_minus_m, ones_row)?;
    let discounted = g.mul(positions, discount)?;
    let ones_col = g.leaf(Mat::filled(n, 1, F::one()))?;
    let nucleus_rows = g.matmul(ones_col, nucleus)?;
    let offsets = g.sub(discounted, nucleus_rows)?;
    let distances = g.norm_p(offsets, norm, Axis::Cols)?;
    g.mean(distances, Axis::Both)
}

/// Builds the full atom view from a column of charge pre-activations and a
/// matrix of particle positions.
pub fn build_atom<F: Real>(
    g: &mut Graph<F>,
    charge_pre: TensorId,
    positions: TensorId,
    norm: Norm,
) -> Result<AtomNodes, DiffError> {
    let (n, qc) = g.value(charge_pre).shape();
    let (pn, _) = g.value(positions).shape();
    if qc != 1 || pn != n {
        return Err(DiffError::ShapeMismatch {
            op: "build_atom",
            lhs: (n, qc),
            rhs: g.value(positions).shape(),
        });
    }
    if n == 0 {
        return Err(DiffError::EmptyAtom);
    }
    let charges = charges_from_pre(g, charge_pre)?;
    let masses = masses_from_charges(g, charges)?;
    let nucleus = nucleus_position(g, positions, masses)?;
    let radius = nucleus_radius(g, positions, masses, nucleus, norm)?;
    Ok(AtomNodes {
        charge_pre,
        positions,
        charges,
        masses,
        nucleus,
        radius,
        size: n,
    })
}

/// Distance between particle `i` of `a` and particle `j` of `b`.
///
/// Homoelectric pairs (q_i*q_j > 0) use the nucleus distance; heteroelectric
/// pairs add the mean radius. A zero product takes the homoelectric branch
/// (its potential contribution is zero either way; the fixed branch keeps
/// evaluation deterministic). [`DIST_FLOOR`] is added to every distance.
pub fn pair_distance<F: Real>(
    g: &mut Graph<F>,
    a: &AtomNodes,
    b: &AtomNodes,
    i: usize,
    j: usize,
    norm: Norm,
) -> Result<TensorId, DiffError> {
    let q_i = g.value(a.charges).at(i, 0);
    let q_j = g.value(b.charges).at(j, 0);
    let gap = g.sub(a.nucleus, b.nucleus)?;
    let nucleus_distance = g.norm_p(gap, norm, Axis::Both)?;
    let floored = g.add_scalar(nucleus_distance, F::of(DIST_FLOOR))?;
    if q_i * q_j < F::zero() {
        let radius_sum = g.add(a.radius, b.radius)?;
        let mean_radius = g.scale(radius_sum, F::of(0.5))?;
        g.add(floored, mean_radius)
    } else {
        Ok(floored)
    }
}
