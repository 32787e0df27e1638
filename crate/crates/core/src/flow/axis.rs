use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Graph, Var};

/// Order in which the per-axis maps of a Kronecker flow are applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AxisOrder {
    /// Axis 0 first (columns of a matrix), then axis 1 (rows), then axis 2.
    #[default]
    Forward,
    Reversed,
}

impl AxisOrder {
    pub fn axes(self, rank: usize) -> Vec<usize> {
        match self {
            AxisOrder::Forward => (0..rank).collect(),
            AxisOrder::Reversed => (0..rank).rev().collect(),
        }
    }
}

/// Applies `f` to every fibre of `x` along `axis`. `f` receives a
/// `(fibres, len)` matrix whose rows are the fibres and must return the same
/// shape.
pub fn map_along_axis(
    g: &mut Graph,
    x: Var,
    axis: usize,
    f: impl FnOnce(&mut Graph, Var) -> Result<Var>,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let rank = shape.len();
    let len = shape[axis];
    let rest = shape.iter().product::<usize>() / len;
    if axis + 1 == rank {
        let rows = g.reshape(x, &[rest, len])?;
        let y = f(g, rows)?;
        return g.reshape(y, &shape);
    }
    let mut perm: Vec<usize> = (0..rank).filter(|&a| a != axis).collect();
    perm.push(axis);
    let moved = g.permute(x, &perm)?;
    let moved_shape = g.shape(moved).to_vec();
    let rows = g.reshape(moved, &[rest, len])?;
    let y = f(g, rows)?;
    let y = g.reshape(y, &moved_shape)?;
    let mut inv = vec![0; rank];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    g.permute(y, &inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn maps_columns_of_a_matrix() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        // Reverse each column (axis 0 fibres have length 2).
        let swap = g.constant(Tensor::matrix(2, 2, vec![0., 1., 1., 0.]).unwrap());
        let y = map_along_axis(&mut g, x, 0, |g, rows| g.matmul(rows, swap)).unwrap();
        assert_eq!(g.value(y).data(), &[4., 5., 6., 1., 2., 3.]);
    }

    #[test]
    fn middle_axis_of_order_three_tensor() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(f64::from).collect();
        let x = g.constant(Tensor::new(vec![2, 3, 2], data).unwrap());
        let y = map_along_axis(&mut g, x, 1, |g, rows| {
            assert_eq!(g.shape(rows), &[4, 3]);
            g.scale(rows, 2.0)
        })
        .unwrap();
        assert_eq!(g.shape(y), &[2, 3, 2]);
        assert_eq!(g.value(y).data()[5], 10.0);
    }
}
