//! Central-difference gradient checking in `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{no_grad, Result, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per leaf; leaves at or below this size are checked
    /// exhaustively.
    pub coords_per_leaf: usize,
    /// Random directions for the directional-derivative check.
    pub directions: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-4, coords_per_leaf: 12, directions: 2, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over all sampled
    /// coordinates.
    pub coord_rel_err: f64,
    /// Worst directional-derivative error, relative to `‖g‖₂‖v‖₂` (the largest
    /// value the derivative along `v` can take).
    pub direction_rel_err: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn rel_err(&self) -> f64 {
        self.coord_rel_err.max(self.direction_rel_err)
    }
}

/// Compares the tape gradient of `loss(leaves)` with central differences.
///
/// `loss` must be a pure function of the leaf values it is given.
pub fn check<F>(leaves: &[Tensor<f64>], loss: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = leaves.iter().map(|t| t.requires_grad_(true)).collect();
    let l = loss(&leaves)?;
    l.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |vals: &[Tensor<f64>]| -> Result<f64> { no_grad(|| loss(vals).map(|t| t.item())) };
    let with_leaf = |i: usize, data: Vec<f64>| -> Result<Vec<Tensor<f64>>> {
        let mut v: Vec<Tensor<f64>> = leaves.iter().map(|t| t.detach()).collect();
        v[i] = Tensor::from_vec(leaves[i].shape(), data)?;
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = opts.step;
    let (mut num_sq, mut ana_sq, mut diff_sq) = (0.0, 0.0, 0.0);
    let mut coords_checked = 0;
    for (i, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let picks: Vec<usize> = if n <= opts.coords_per_leaf {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.coords_per_leaf).into_vec()
        };
        for j in picks {
            let mut plus = leaf.to_vec();
            plus[j] += h;
            let mut minus = leaf.to_vec();
            minus[j] -= h;
            let numeric = (eval(&with_leaf(i, plus)?)? - eval(&with_leaf(i, minus)?)?) / (2.0 * h);
            let a = analytic[i][j];
            num_sq += numeric * numeric;
            ana_sq += a * a;
            diff_sq += (a - numeric) * (a - numeric);
            coords_checked += 1;
        }
    }
    let denom = num_sq.sqrt().max(ana_sq.sqrt());
    let coord_rel_err = if denom == 0.0 { 0.0 } else { diff_sq.sqrt() / denom };

    let mut direction_rel_err: f64 = 0.0;
    for _ in 0..opts.directions {
        let dirs: Vec<Tensor<f64>> = leaves.iter().map(|t| Tensor::randn(t.shape(), &mut rng)).collect();
        let shifted = |sign: f64| -> Result<Vec<Tensor<f64>>> {
            leaves
                .iter()
                .zip(&dirs)
                .map(|(t, d)| {
                    let v = t.data().iter().zip(d.data()).map(|(a, b)| a + sign * h * b).collect();
                    Tensor::from_vec(t.shape(), v)
                })
                .collect()
        };
        let numeric = (eval(&shifted(1.0)?)? - eval(&shifted(-1.0)?)?) / (2.0 * h);
        let a: f64 = analytic
            .iter()
            .zip(&dirs)
            .map(|(g, d)| g.iter().zip(d.data()).map(|(x, y)| x * y).sum::<f64>())
            .sum();
        let g_norm = analytic.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        let v_norm = dirs.iter().flat_map(|d| d.data()).map(|x| x * x).sum::<f64>().sqrt();
        let scale = (g_norm * v_norm).max(numeric.abs());
        if scale > 0.0 {
            direction_rel_err = direction_rel_err.max((a - numeric).abs() / scale);
        }
    }

    Ok(GradCheckReport { coord_rel_err, direction_rel_err, coords_checked })
}
