use super::graph::{Graph, NodeId};
use super::{NnError, ParameterSet};

/// Compares analytic gradients against central finite differences.
///
/// `build` reconstructs the forward pass from the current parameter values
/// and returns the tape plus its scalar loss node; it is re-run twice per
/// parameter coordinate with that coordinate nudged by ±`eps`. Returns the
/// maximum relative error `|a − n| / max(|a|, |n|, 1e-6)` over every
/// coordinate of every parameter.
pub fn grad_check<B>(
    params: &mut ParameterSet<f64>,
    eps: f64,
    mut build: B,
) -> Result<f64, NnError>
where
    B: FnMut(&ParameterSet<f64>) -> Result<(Graph<f64>, NodeId), NnError>,
{
    params.clear_grads();
    let (graph, loss) = build(params)?;
    if graph.shape(loss) != [1] {
        return Err(NnError::NotScalarLoss(graph.shape(loss).to_vec()));
    }
    graph.backward_into(loss, params)?;

    let analytic: Vec<Vec<f64>> = (0..params.len())
        .map(|i| {
            params
                .entry(i)
                .grad
                .as_ref()
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; params.entry(i).value.len()])
        })
        .collect();

    let mut worst = 0.0f64;
    for i in 0..params.len() {
        for j in 0..params.entry(i).value.len() {
            let orig = params.entry(i).value.data()[j];
            params.entry_mut(i).value.data_mut()[j] = orig + eps;
            let plus = eval_loss(params, &mut build)?;
            params.entry_mut(i).value.data_mut()[j] = orig - eps;
            let minus = eval_loss(params, &mut build)?;
            params.entry_mut(i).value.data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
            }
        }
    }
    params.clear_grads();
    Ok(worst)
}

fn eval_loss<B>(params: &ParameterSet<f64>, build: &mut B) -> Result<f64, NnError>
where
    B: FnMut(&ParameterSet<f64>) -> Result<(Graph<f64>, NodeId), NnError>,
{
    let (graph, loss) = build(params)?;
    if graph.shape(loss) != [1] {
        return Err(NnError::NotScalarLoss(graph.shape(loss).to_vec()));
    }
    Ok(graph.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::{affine, dropout};
    use crate::nn::{lstm_sequence, Direction, LstmLayerParams, Mode, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn affine_params(seed: u64) -> ParameterSet<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::new();
        for (name, shape) in [("x", vec![3, 4]), ("w", vec![4, 2]), ("b", vec![2])] {
            let data = (0..shape.iter().product::<usize>())
                .map(|_| r.random_range(-1.0..1.0))
                .collect();
            p.insert(name, Tensor::from_vec(&shape, data)).unwrap();
        }
        p
    }

    fn affine_loss(p: &ParameterSet<f64>) -> Result<(Graph<f64>, NodeId), NnError> {
        let mut g = Graph::new();
        let x = g.param(p, "x")?;
        let w = g.param(p, "w")?;
        let b = g.param(p, "b")?;
        let y = affine(&mut g, x, w, b)?;
        let t = g.tanh(y);
        let loss = g.sum_all(t);
        Ok((g, loss))
    }

    #[test]
    fn affine_layer_checks_out() {
        let mut p = affine_params(31);
        let worst = grad_check(&mut p, 1e-5, affine_loss).unwrap();
        assert!(worst < 1e-6, "rel err {worst}");
    }

    #[test]
    fn eval_mode_dropout_is_transparent_to_the_check() {
        let mut p = affine_params(32);
        let bare = grad_check(&mut p, 1e-5, affine_loss).unwrap();
        let mut p2 = affine_params(32);
        let wrapped = grad_check(&mut p2, 1e-5, |p| {
            let mut g = Graph::new();
            let x = g.param(p, "x")?;
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let xd = dropout(&mut g, x, 0.5, Mode::Eval, &mut r)?;
            let w = g.param(p, "w")?;
            let b = g.param(p, "b")?;
            let y = affine(&mut g, xd, w, b)?;
            let t = g.tanh(y);
            let loss = g.sum_all(t);
            Ok((g, loss))
        })
        .unwrap();
        assert_eq!(bare, wrapped);
    }

    #[test]
    fn tiny_lstm_checks_out() {
        let mut r = ChaCha8Rng::seed_from_u64(33);
        let mut p = ParameterSet::new();
        let layer = LstmLayerParams::named("l");
        layer.register(&mut p, 2, 2, &mut r).unwrap();
        let xdata = (0..12).map(|_| r.random_range(-0.5..0.5)).collect();
        p.insert("x", Tensor::from_vec(&[3, 2, 2], xdata)).unwrap();
        let worst = grad_check(&mut p, 1e-5, |p| {
            let mut g = Graph::new();
            let layer = LstmLayerParams::named("l");
            let nodes = layer.nodes(&mut g, p)?;
            let x = g.param(p, "x")?;
            let out = lstm_sequence(&mut g, x, &[3, 2], nodes, Direction::Forward)?;
            let loss = g.sum_all(out);
            Ok((g, loss))
        })
        .unwrap();
        assert!(worst < 1e-4, "rel err {worst}");
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut p = affine_params(34);
        let err = grad_check(&mut p, 1e-5, |p| {
            let mut g = Graph::new();
            let x = g.param(p, "x")?;
            Ok((g, x))
        });
        assert!(matches!(err, Err(NnError::NotScalarLoss(_))));
    }
}
