//! Overlap and surface-distance metrics on label maps.

use crate::error::shape_err;
use crate::tensor::Real;
use crate::Result;

/// Dice overlap `2|P ∩ G| / (|P| + |G|)` of class `class` in two label
/// buffers. Two empty masks agree perfectly and score 1.
pub fn dice_metric(pred: &[u8], truth: &[u8], class: u8) -> Result<Real> {
    if pred.len() != truth.len() {
        return Err(shape_err!("prediction has {} voxels, reference {}", pred.len(), truth.len()));
    }
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(truth) {
        let (a, b) = (p == class, g == class);
        np += a as usize;
        ng += b as usize;
        inter += (a && b) as usize;
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as Real / (np + ng) as Real)
}

/// Mask voxels with at least one face neighbour outside the mask. Voxels on
/// the border of the grid count as boundary.
pub fn boundary(mask: &[bool], dims: &[usize]) -> Result<Vec<Vec<usize>>> {
    let total: usize = dims.iter().product();
    if mask.len() != total {
        return Err(shape_err!("mask has {} voxels, dims {:?} hold {}", mask.len(), dims, total));
    }
    let r = dims.len();
    let mut strides = vec![1usize; r];
    for a in (0..r.saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * dims[a + 1];
    }
    let mut out = Vec::new();
    let mut idx = vec![0usize; r];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            let edge = (0..r).any(|a| {
                idx[a] == 0 || idx[a] + 1 == dims[a] || !mask[i - strides[a]] || !mask[i + strides[a]]
            });
            if edge {
                out.push(idx.clone());
            }
        }
        for a in (0..r).rev() {
            idx[a] += 1;
            if idx[a] < dims[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Ok(out)
}

/// Linear-interpolation percentile (`q` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &mut [Real], q: Real) -> Option<Real> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 100.0) / 100.0 * (values.len() - 1) as Real;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let frac = pos - lo as Real;
    Some(values[lo] + frac * (values[hi] - values[lo]))
}

/// 95th percentile of the symmetric boundary-distance multiset: the
/// distance from every boundary voxel of one mask to the nearest boundary
/// voxel of the other, in both directions. `None` when either mask is empty,
/// since the distance is undefined there.
pub fn hd95_metric(pred: &[bool], truth: &[bool], dims: &[usize], spacing: &[Real]) -> Result<Option<Real>> {
    if spacing.len() != dims.len() {
        return Err(shape_err!("{} spacings for {} axes", spacing.len(), dims.len()));
    }
    let bp = boundary(pred, dims)?;
    let bt = boundary(truth, dims)?;
    if bp.is_empty() || bt.is_empty() {
        return Ok(None);
    }
    let nearest = |from: &[Vec<usize>], to: &[Vec<usize>]| -> Vec<Real> {
        from.iter()
            .map(|a| {
                to.iter()
                    .map(|b| {
                        a.iter()
                            .zip(b)
                            .zip(spacing)
                            .map(|((&u, &v), &s)| {
                                let d = (u as Real - v as Real) * s;
                                d * d
                            })
                            .sum::<Real>()
                    })
                    .fold(Real::INFINITY, Real::min)
                    .sqrt()
            })
            .collect()
    };
    let mut all = nearest(&bp, &bt);
    all.extend(nearest(&bt, &bp));
    Ok(percentile(&mut all, 95.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(dims: [usize; 2], x0: usize, y0: usize, side: usize) -> Vec<bool> {
        (0..dims[0] * dims[1])
            .map(|i| {
                let (y, x) = (i / dims[1], i % dims[1]);
                (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x)
            })
            .collect()
    }

    #[test]
    fn dice_cases() {
        let g = [1u8, 1, 1, 1, 0, 0];
        assert_eq!(dice_metric(&g, &g, 1).unwrap(), 1.0);
        assert_eq!(dice_metric(&[0, 0, 0, 0, 1, 1], &g, 1).unwrap(), 0.0);
        // P is half of G.
        let p = [1u8, 1, 0, 0, 0, 0];
        assert!((dice_metric(&p, &g, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice_metric(&[0, 0], &[0, 0], 2).unwrap(), 1.0);
        assert!(dice_metric(&[0], &[0, 0], 1).is_err());
    }

    #[test]
    fn shifted_square() {
        let a = square([9, 9], 2, 2, 5);
        let b = square([9, 9], 3, 2, 5);
        assert_eq!(hd95_metric(&a, &a, &[9, 9], &[1.0, 1.0]).unwrap(), Some(0.0));
        let d = hd95_metric(&a, &b, &[9, 9], &[1.0, 1.0]).unwrap().unwrap();
        assert!((d - 1.0).abs() < 1e-12, "{d}");
        // Anisotropic spacing scales the shift axis.
        let d = hd95_metric(&a, &b, &[9, 9], &[1.0, 2.5]).unwrap().unwrap();
        assert!((d - 2.5).abs() < 1e-12, "{d}");
    }

    #[test]
    fn empty_masks_are_undefined() {
        let a = square([6, 6], 1, 1, 3);
        let e = vec![false; 36];
        assert_eq!(hd95_metric(&e, &a, &[6, 6], &[1.0, 1.0]).unwrap(), None);
        assert_eq!(hd95_metric(&a, &e, &[6, 6], &[1.0, 1.0]).unwrap(), None);
    }

    #[test]
    fn boundary_of_filled_block() {
        let m = vec![true; 27];
        // Only the centre voxel of a 3x3x3 block is interior.
        assert_eq!(boundary(&m, &[3, 3, 3]).unwrap().len(), 26);
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![4.0, 0.0, 2.0];
        assert_eq!(percentile(&mut v, 50.0), Some(2.0));
        assert_eq!(percentile(&mut v, 75.0), Some(3.0));
        assert_eq!(percentile(&mut [], 95.0), None);
    }
}
