//! Central finite-difference verification of analytic gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::ParamStore;

/// Gradients with magnitude below this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn coords_checked(&self) -> usize {
        self.params.iter().map(|p| p.coords).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Coordinates sampled per parameter; smaller parameters are checked fully.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            coords_per_param: 200,
            seed: 0,
        }
    }
}

/// Compare the analytic gradient of `loss_fn` with `(f(θ+ε) − f(θ−ε)) / 2ε`
/// on sampled coordinates of every parameter in `store`.
///
/// `loss_fn` must be deterministic and return a scalar node.
pub fn grad_check<L>(
    store: &mut ParamStore<f64>,
    mut loss_fn: L,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    L: FnMut(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
{
    store.zero_grads();
    let (g, loss) = loss_fn(store)?;
    if !g.scalar(loss).is_finite() {
        return Err(Error::NonFinite {
            what: "loss".into(),
        });
    }
    g.backward_into(loss, store)?;
    drop(g);

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let (g, loss) = loss_fn(store)?;
        let v = g.scalar(loss);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                what: "loss".into(),
            })
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = Vec::with_capacity(store.len());
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).value.len();
        let mut coords: Vec<usize> = if n <= opts.coords_per_param {
            (0..n).collect()
        } else {
            index::sample(&mut rng, n, opts.coords_per_param).into_vec()
        };
        coords.sort_unstable();
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            coords: coords.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &coords {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + opts.epsilon;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - opts.epsilon;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let analytic = store.get(id).grad.data()[i];
            let err = relative_error(analytic, numeric);
            if err > check.max_rel_error || i == coords[0] {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport { params: report })
}
