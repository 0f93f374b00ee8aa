//! Parallelotope volumes of feature sets around an anchor.
//!
//! For an anchor `a` and members `S = (s_1, …, s_p)` (columns), the
//! parallelotope spanned by the differences `D = S − a` has squared volume
//! `det(DᵀD)`. The reduced form keeps only the `r` largest eigenvalues of the
//! Gram matrix, which is the largest squared volume any projection of the
//! differences onto `r` dimensions can achieve.
//!
//! Gradients use the eigen-adjoint of the eigenvalue product: with
//! `G = DᵀD = Σ λ_k v_k v_kᵀ` and `c_k = Π_{j≠k, j≤r} λ_j`,
//! `∂V²/∂G = W = Σ_{k≤r} c_k v_k v_kᵀ` and `∂V²/∂D = 2 D W`. In the
//! full-determinant case `W` is the adjugate `det(G)·G⁻¹`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues below this are treated as zero volume.
pub const RANK_EPS: f64 = 1e-10;

/// Smallest gap between the `r`-th and `(r+1)`-th eigenvalue for which the
/// top-`r` adjoint is used as is.
pub const DEGENERATE_GAP: f64 = 1e-8;

/// Diagonal jitter applied once when the gap above is violated.
pub const JITTER: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeResult {
    pub squared_volume: f64,
    /// Eigenvalues that entered the product, descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
    pub rank_deficient: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGradient {
    pub squared_volume: f64,
    pub grad_anchor: DVector<f64>,
    /// One column per member.
    pub grad_members: DMatrix<f64>,
    pub rank_deficient: bool,
    /// True when the eigen-gap safeguard perturbed the Gram matrix.
    pub jittered: bool,
}

fn check_inputs(anchor: &DVector<f64>, members: &DMatrix<f64>) -> Result<()> {
    if members.ncols() == 0 {
        return Err(Error::Contract("volume needs at least one member".into()));
    }
    if anchor.len() != members.nrows() {
        return Err(Error::Shape(format!(
            "anchor has dimension {}, members have dimension {}",
            anchor.len(),
            members.nrows()
        )));
    }
    if !anchor.iter().chain(members.iter()).all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite input to volume".into()));
    }
    Ok(())
}

fn check_rank(r: Option<usize>, p: usize, s: usize) -> Result<()> {
    if let Some(r) = r {
        if r == 0 || r > p.min(s) {
            return Err(Error::Contract(format!(
                "reduced dimension {r} must lie in 1..={}",
                p.min(s)
            )));
        }
    }
    Ok(())
}

/// Member order sorted lexicographically by column, so results are bit-exact
/// under any permutation of the members.
fn canonical_order(members: &DMatrix<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..members.ncols()).collect();
    order.sort_by(|&i, &j| {
        members
            .column(i)
            .iter()
            .zip(members.column(j).iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

fn select_columns(m: &DMatrix<f64>, order: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), order.len(), |i, j| m[(i, order[j])])
}

/// Members re-expressed relative to the anchor, `S − a·1ᵀ`.
pub fn differences(anchor: &DVector<f64>, members: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_inputs(anchor, members)?;
    let mut d = members.clone();
    for mut col in d.column_iter_mut() {
        col -= anchor;
    }
    Ok(d)
}

/// `(S − a)ᵀ(S − a)`, a `p × p` positive semidefinite matrix.
pub fn gram(anchor: &DVector<f64>, members: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = differences(anchor, members)?;
    Ok(d.tr_mul(&d))
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues sorted descending
/// with eigenvectors permuted to match.
pub fn sorted_eigen(sym: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = sym.nrows();
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |row, col| eig.eigenvectors[(row, order[col])]);
    (values, vectors)
}

/// Product of the `r` largest values (all of them when `r` is `None`), after
/// clamping negatives to zero.
pub fn product_of_top(descending: &[f64], r: Option<usize>) -> VolumeResult {
    let used = r.unwrap_or(descending.len()).min(descending.len());
    let eigenvalues: Vec<f64> = descending[..used].iter().map(|v| v.max(0.0)).collect();
    VolumeResult {
        squared_volume: eigenvalues.iter().product(),
        rank_deficient: eigenvalues.iter().any(|&v| v < RANK_EPS),
        eigenvalues,
    }
}

/// Squared volume of the parallelotope spanned by `members − anchor`.
///
/// With `r = None` this is `det(G)`; with `r = Some(k)` it is the product of
/// the `k` largest Gram eigenvalues.
pub fn squared_volume(
    anchor: &DVector<f64>,
    members: &DMatrix<f64>,
    r: Option<usize>,
) -> Result<VolumeResult> {
    check_inputs(anchor, members)?;
    check_rank(r, members.ncols(), members.nrows())?;
    let members = select_columns(members, &canonical_order(members));
    let (values, _) = sorted_eigen(gram(anchor, &members)?);
    Ok(product_of_top(&values, r))
}

/// Same value as [`squared_volume`], computed from whichever of `DᵀD`
/// (`p × p`) and `DDᵀ` (`s × s`) is smaller. Both share their nonzero
/// eigenvalues.
pub fn squared_volume_small_side(
    anchor: &DVector<f64>,
    members: &DMatrix<f64>,
    r: usize,
) -> Result<VolumeResult> {
    check_inputs(anchor, members)?;
    check_rank(Some(r), members.ncols(), members.nrows())?;
    let d = differences(anchor, &select_columns(members, &canonical_order(members)))?;
    let small = if d.nrows() < d.ncols() {
        &d * d.transpose()
    } else {
        d.tr_mul(&d)
    };
    let (values, _) = sorted_eigen(small);
    Ok(product_of_top(&values, Some(r)))
}

/// Products of all entries but one: `out[k] = Π_{j≠k} values[j]`.
fn leave_one_out_products(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut out = vec![1.0; n];
    let mut acc = 1.0;
    for k in 0..n {
        out[k] = acc;
        acc *= values[k];
    }
    acc = 1.0;
    for k in (0..n).rev() {
        out[k] *= acc;
        acc *= values[k];
    }
    out
}

/// Analytic gradient of the squared volume with respect to the anchor and
/// every member column.
///
/// A singular Gram matrix in the full-determinant case is a stationary point
/// of the clamped volume and yields zero gradients with `rank_deficient` set.
/// In the reduced case, when the `r`-th and `(r+1)`-th eigenvalues are closer
/// than [`DEGENERATE_GAP`] the Gram matrix is perturbed once by a graded
/// diagonal jitter before the adjoint is formed.
pub fn grad_squared_volume(
    anchor: &DVector<f64>,
    members: &DMatrix<f64>,
    r: Option<usize>,
) -> Result<VolumeGradient> {
    check_inputs(anchor, members)?;
    let (s, p) = members.shape();
    check_rank(r, p, s)?;
    let order = canonical_order(members);
    let d = differences(anchor, &select_columns(members, &order))?;
    let g = d.tr_mul(&d);
    let (mut values, mut vectors) = sorted_eigen(g.clone());
    let result = product_of_top(&values, r);

    if r.is_none() && result.rank_deficient {
        return Ok(VolumeGradient {
            squared_volume: result.squared_volume,
            grad_anchor: DVector::zeros(s),
            grad_members: DMatrix::zeros(s, p),
            rank_deficient: true,
            jittered: false,
        });
    }

    let used = r.unwrap_or(p);
    let mut jittered = false;
    if used < p && values[used - 1] - values[used] < DEGENERATE_GAP {
        let mut perturbed = g;
        for k in 0..p {
            perturbed[(k, k)] += JITTER * (k + 1) as f64;
        }
        (values, vectors) = sorted_eigen(perturbed);
        jittered = true;
    }

    let top: Vec<f64> = values[..used].iter().map(|v| v.max(0.0)).collect();
    let weights = leave_one_out_products(&top);
    let mut w = DMatrix::zeros(p, p);
    for (k, &c) in weights.iter().enumerate() {
        let v = vectors.column(k);
        w += c * v * v.transpose();
    }
    let sorted_grad = 2.0 * &d * w;
    let grad_anchor = -sorted_grad.column_sum();
    let mut grad_members = DMatrix::zeros(s, p);
    for (j, &k) in order.iter().enumerate() {
        grad_members.set_column(k, &sorted_grad.column(j));
    }
    Ok(VolumeGradient {
        squared_volume: result.squared_volume,
        grad_anchor,
        grad_members,
        rank_deficient: result.rank_deficient,
        jittered,
    })
}
