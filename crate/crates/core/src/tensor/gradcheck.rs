//! Central finite-difference checks of tape gradients.

use super::params::{Gradients, ParamId, ParamStore};
use crate::error::Result;
use crate::rng::SplitRng;

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor so coordinates whose true gradient is ~0 are judged
/// on absolute error.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Picks `count` random (parameter, flat index) coordinates.
pub fn random_coordinates(store: &ParamStore, count: usize, rng: &mut SplitRng) -> Vec<(ParamId, usize)> {
    let sizes: Vec<f64> = store.iter().map(|(_, p)| p.value.numel() as f64).collect();
    (0..count)
        .map(|_| {
            let pid = rng.categorical(&sizes);
            let n = store.get(ParamId(pid)).value.numel();
            (ParamId(pid), rng.below(n))
        })
        .collect()
}

/// Compares `grads` against central differences of `loss` at `coords`.
pub fn check_param_gradients<F>(
    store: &mut ParamStore,
    grads: &Gradients,
    coords: &[(ParamId, usize)],
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut max_rel_err: f64 = 0.0;
    for &(id, i) in coords {
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + FD_STEP;
        let plus = loss(store)?;
        store.value_mut(id).data_mut()[i] = orig - FD_STEP;
        let minus = loss(store)?;
        store.value_mut(id).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let analytic = grads.get(id).map_or(0.0, |g| g[i]);
        max_rel_err = max_rel_err.max(relative_error(analytic, numeric));
    }
    Ok(GradCheckReport {
        checked: coords.len(),
        max_rel_err,
    })
}

type Builder = fn(&mut super::Graph<'_>, &[super::Var], &mut SplitRng) -> Result<super::Var>;

fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Builder)> {
    use crate::masks::{default_tiles, AttentionMaskSpec};
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v, _| g.matmul(v[0], v[1])),
        ("add", vec![vec![3, 2], vec![3, 2]], |g, v, _| g.add(v[0], v[1])),
        ("add_row", vec![vec![3, 2], vec![2]], |g, v, _| g.add_row(v[0], v[1])),
        ("mul", vec![vec![3, 2], vec![3, 2]], |g, v, _| g.mul(v[0], v[1])),
        ("scale", vec![vec![2, 2]], |g, v, _| Ok(g.scale(v[0], -1.7))),
        ("gelu", vec![vec![4, 3]], |g, v, _| Ok(g.gelu(v[0]))),
        ("relu", vec![vec![4, 3]], |g, v, _| Ok(g.relu(v[0]))),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |g, v, _| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        ("embedding", vec![vec![5, 3]], |g, v, _| g.embedding(v[0], &[4, 0, 4, 2])),
        ("softmax", vec![vec![3, 4]], |g, v, _| g.softmax_lastdim(v[0])),
        ("cross_entropy", vec![vec![4, 5]], |g, v, _| {
            g.masked_cross_entropy(v[0], &[1, 0, 4, 2], &[1.0, 0.0, 2.5, 0.3])
        }),
        ("fill_column", vec![vec![3, 4]], |g, v, _| g.fill_column(v[0], 2, -1e3)),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |g, v, _| g.concat_rows(&[v[0], v[1]])),
        ("select_rows", vec![vec![4, 2]], |g, v, _| g.select_rows(v[0], &[3, 1, 1])),
        ("attention", vec![vec![16, 4], vec![16, 4], vec![16, 4]], |g, v, _| {
            let mask = AttentionMaskSpec::full(4, 2)?;
            let tiles = default_tiles(&mask)?;
            g.attention(v[0], v[1], v[2], 2, 2, &mask, tiles)
        }),
    ]
}

/// Finite-difference check of every tape primitive on random inputs. Each
/// output is contracted with a random tensor so upstream gradients are
/// nontrivial. Returns (primitive, max relative error) pairs.
pub fn primitive_suite(rng: &mut SplitRng) -> Result<Vec<(&'static str, f64)>> {
    use super::{Graph, Tensor};
    let mut out = Vec::new();
    for (name, shapes, build) in primitive_cases() {
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n: usize = s.iter().product();
                let data = (0..n).map(|_| rng.normal()).collect();
                store.add(format!("in{i}"), Tensor::new(s.clone(), data).expect("shape"))
            })
            .collect();
        let seed = rng.next_seed();
        let eval = |store: &ParamStore, want_grad: bool| -> Result<(f64, Option<Gradients>)> {
            let mut local = SplitRng::new(seed);
            let mut g = Graph::with_params(store);
            let vars: Vec<_> = ids.iter().map(|&id| g.param(id)).collect();
            let y = build(&mut g, &vars, &mut local)?;
            let n = g.value(y).len();
            let shape = g.shape(y).to_vec();
            let w = g.leaf(Tensor::new(shape, (0..n).map(|_| local.normal()).collect())?);
            let prod = g.mul(y, w)?;
            let loss = g.sum(prod);
            let value = g.value(loss)[0];
            let grads = if want_grad { Some(g.backward(loss)?.params) } else { None };
            Ok((value, grads))
        };
        let (_, grads) = eval(&store, true)?;
        let grads = grads.expect("requested");
        let coords: Vec<(ParamId, usize)> = ids
            .iter()
            .flat_map(|&id| (0..store.value(id).numel()).map(move |i| (id, i)))
            .collect();
        let report = check_param_gradients(&mut store, &grads, &coords, |s| Ok(eval(s, false)?.0))?;
        out.push((name, report.max_rel_err));
    }
    Ok(out)
}
