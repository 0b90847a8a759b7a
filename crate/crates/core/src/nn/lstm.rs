use super::graph::{Graph, NodeId};
use super::{NnError, ParameterSet, Scalar, Tensor};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Scan direction for [`lstm_sequence`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Names of one LSTM layer's weights inside a [`ParameterSet`].
///
/// Gate layout along the 4H axis is `[input, forget, candidate, output]`.
#[derive(Debug, Clone)]
pub struct LstmLayerParams {
    pub w_ih: String,
    pub w_hh: String,
    pub b: String,
}

impl LstmLayerParams {
    pub fn named(prefix: &str) -> Self {
        LstmLayerParams {
            w_ih: format!("{prefix}.w_ih"),
            w_hh: format!("{prefix}.w_hh"),
            b: format!("{prefix}.b"),
        }
    }

    /// Registers freshly initialized weights: uniform `[-0.1, 0.1]` matrices,
    /// zero biases except the forget-gate slice which starts at 1.
    pub fn register<F: Scalar>(
        &self,
        params: &mut ParameterSet<F>,
        d_in: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), NnError> {
        params.insert(&self.w_ih, uniform_tensor(&[d_in, 4 * hidden], 0.1, rng))?;
        params.insert(&self.w_hh, uniform_tensor(&[hidden, 4 * hidden], 0.1, rng))?;
        let mut bias = Tensor::zeros(&[4 * hidden]);
        for v in &mut bias.data_mut()[hidden..2 * hidden] {
            *v = F::one();
        }
        params.insert(&self.b, bias)?;
        Ok(())
    }

    /// Tape leaves for this layer's weights.
    pub fn nodes<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        params: &ParameterSet<F>,
    ) -> Result<LstmLayerNodes, NnError> {
        Ok(LstmLayerNodes {
            w_ih: g.param(params, &self.w_ih)?,
            w_hh: g.param(params, &self.w_hh)?,
            b: g.param(params, &self.b)?,
        })
    }
}

/// One layer's weights already placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LstmLayerNodes {
    pub w_ih: NodeId,
    pub w_hh: NodeId,
    pub b: NodeId,
}

/// Uniform `[-scale, scale]` tensor from a seeded generator.
pub fn uniform_tensor<F: Scalar>(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| F::from_f64(rng.random_range(-scale..=scale)))
        .collect();
    Tensor::from_vec(shape, data)
}

/// One LSTM cell update: `x [B,D]`, `h`/`c [B,H]` -> new `(h, c)`.
pub fn lstm_step<F: Scalar>(
    g: &mut Graph<F>,
    x: NodeId,
    h: NodeId,
    c: NodeId,
    layer: LstmLayerNodes,
) -> Result<(NodeId, NodeId), NnError> {
    let hidden = g.shape(layer.w_hh)[0];
    let zx = g.matmul(x, layer.w_ih)?;
    let zh = g.matmul(h, layer.w_hh)?;
    let z0 = g.add(zx, zh)?;
    let z = g.add_bias(z0, layer.b)?;
    let i_pre = g.slice_cols(z, 0, hidden)?;
    let f_pre = g.slice_cols(z, hidden, hidden)?;
    let g_pre = g.slice_cols(z, 2 * hidden, hidden)?;
    let o_pre = g.slice_cols(z, 3 * hidden, hidden)?;
    let i = g.sigmoid(i_pre);
    let f = g.sigmoid(f_pre);
    let cand = g.tanh(g_pre);
    let o = g.sigmoid(o_pre);
    let fc = g.mul(f, c)?;
    let ig = g.mul(i, cand)?;
    let c_new = g.add(fc, ig)?;
    let c_act = g.tanh(c_new);
    let h_new = g.mul(o, c_act)?;
    Ok((h_new, c_new))
}

/// Runs one LSTM layer over a time-major sequence `inputs [T,B,D]` with zero
/// initial states, producing the per-step hidden states `[T,B,H]`.
///
/// Steps at or past a sequence's valid length leave its state untouched:
/// in the forward scan the state freezes at its last real value, in the
/// backward scan it stays zero until the scan reaches real frames.
pub fn lstm_sequence<F: Scalar>(
    g: &mut Graph<F>,
    inputs: NodeId,
    lengths: &[usize],
    layer: LstmLayerNodes,
    direction: Direction,
) -> Result<NodeId, NnError> {
    let shape = g.shape(inputs).to_vec();
    if shape.len() != 3 {
        return Err(NnError::ShapeMismatch {
            op: "lstm_sequence",
            expected: "[T,B,D]".into(),
            got: format!("{shape:?}"),
        });
    }
    let (t_len, batch) = (shape[0], shape[1]);
    if lengths.len() != batch {
        return Err(NnError::ShapeMismatch {
            op: "lstm_sequence",
            expected: format!("{batch} lengths"),
            got: format!("{}", lengths.len()),
        });
    }
    for &l in lengths {
        if l > t_len {
            return Err(NnError::LengthExceedsSequence { len: l, t: t_len });
        }
    }
    let hidden = g.shape(layer.w_hh)[0];
    let mut h = g.constant(Tensor::zeros(&[batch, hidden]));
    let mut c = g.constant(Tensor::zeros(&[batch, hidden]));
    let mut outputs = vec![NodeId::MAX; t_len];

    let order: Vec<usize> = match direction {
        Direction::Forward => (0..t_len).collect(),
        Direction::Backward => (0..t_len).rev().collect(),
    };
    for t in order {
        let x_t = g.slice_step(inputs, t)?;
        let (h_new, c_new) = lstm_step(g, x_t, h, c, layer)?;
        if lengths.iter().all(|&l| l > t) {
            h = h_new;
            c = c_new;
        } else {
            let (keep, hold) = step_masks::<F>(lengths, t, batch, hidden);
            let keep = g.constant(keep);
            let hold = g.constant(hold);
            let hk = g.mul(keep, h_new)?;
            let hh = g.mul(hold, h)?;
            h = g.add(hk, hh)?;
            let ck = g.mul(keep, c_new)?;
            let ch = g.mul(hold, c)?;
            c = g.add(ck, ch)?;
        }
        outputs[t] = h;
    }
    g.stack_steps(&outputs)
}

fn step_masks<F: Scalar>(
    lengths: &[usize],
    t: usize,
    batch: usize,
    hidden: usize,
) -> (Tensor<F>, Tensor<F>) {
    let mut keep = Tensor::zeros(&[batch, hidden]);
    let mut hold = Tensor::zeros(&[batch, hidden]);
    for (b, &l) in lengths.iter().enumerate() {
        let (kv, hv) = if t < l {
            (F::one(), F::zero())
        } else {
            (F::zero(), F::one())
        };
        for j in 0..hidden {
            keep.data_mut()[b * hidden + j] = kv;
            hold.data_mut()[b * hidden + j] = hv;
        }
    }
    (keep, hold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn zero_layer(params: &mut ParameterSet<f64>, prefix: &str, d_in: usize, hidden: usize) {
        let layer = LstmLayerParams::named(prefix);
        params
            .insert(&layer.w_ih, Tensor::zeros(&[d_in, 4 * hidden]))
            .unwrap();
        params
            .insert(&layer.w_hh, Tensor::zeros(&[hidden, 4 * hidden]))
            .unwrap();
        params.insert(&layer.b, Tensor::zeros(&[4 * hidden])).unwrap();
    }

    #[test]
    fn zero_weights_and_inputs_give_zero_outputs() {
        let mut params = ParameterSet::<f64>::new();
        zero_layer(&mut params, "l", 3, 4);
        let layer = LstmLayerParams::named("l");
        let mut g = Graph::new();
        let nodes = layer.nodes(&mut g, &params).unwrap();
        let x = g.constant(Tensor::zeros(&[5, 2, 3]));
        let out = lstm_sequence(&mut g, x, &[5, 5], nodes, Direction::Forward).unwrap();
        assert_eq!(g.shape(out), &[5, 2, 4]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    /// Plain scalar-loop LSTM over a single sequence, used as the oracle.
    fn naive_lstm(
        xs: &[Vec<f64>],
        w_ih: &Tensor<f64>,
        w_hh: &Tensor<f64>,
        b: &Tensor<f64>,
        hidden: usize,
    ) -> Vec<Vec<f64>> {
        let d_in = xs[0].len();
        let mut h = vec![0.0; hidden];
        let mut c = vec![0.0; hidden];
        let mut outs = Vec::new();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for x in xs {
            let mut z = vec![0.0; 4 * hidden];
            for (j, zv) in z.iter_mut().enumerate() {
                let mut acc = b.data()[j];
                for k in 0..d_in {
                    acc += x[k] * w_ih.data()[k * 4 * hidden + j];
                }
                for k in 0..hidden {
                    acc += h[k] * w_hh.data()[k * 4 * hidden + j];
                }
                *zv = acc;
            }
            let mut h_new = vec![0.0; hidden];
            for k in 0..hidden {
                let i = sig(z[k]);
                let f = sig(z[hidden + k]);
                let cand = z[2 * hidden + k].tanh();
                let o = sig(z[3 * hidden + k]);
                c[k] = f * c[k] + i * cand;
                h_new[k] = o * c[k].tanh();
            }
            h = h_new;
            outs.push(h.clone());
        }
        outs
    }

    #[test]
    fn sequence_matches_step_by_step_oracle() {
        let mut r = rng(21);
        let mut params = ParameterSet::<f64>::new();
        let layer = LstmLayerParams::named("l");
        layer.register(&mut params, 3, 4, &mut r).unwrap();

        let t_len = 6;
        let xs: Vec<Vec<f64>> = (0..t_len)
            .map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();

        let mut g = Graph::new();
        let nodes = layer.nodes(&mut g, &params).unwrap();
        let flat: Vec<f64> = xs.iter().flatten().copied().collect();
        let x = g.constant(Tensor::from_vec(&[t_len, 1, 3], flat));
        let out = lstm_sequence(&mut g, x, &[t_len], nodes, Direction::Forward).unwrap();

        let w_ih = &params.get("l.w_ih").unwrap();
        let w_hh = &params.get("l.w_hh").unwrap();
        let b = &params.get("l.b").unwrap();
        let oracle = naive_lstm(&xs, w_ih, w_hh, b, 4);
        for t in 0..t_len {
            for k in 0..4 {
                let got = g.value(out).data()[t * 4 + k];
                assert!(
                    (got - oracle[t][k]).abs() < 1e-12,
                    "step {t} unit {k}: {got} vs {}",
                    oracle[t][k]
                );
            }
        }
    }

    #[test]
    fn padded_steps_freeze_the_state() {
        let mut r = rng(22);
        let mut params = ParameterSet::<f64>::new();
        let layer = LstmLayerParams::named("l");
        layer.register(&mut params, 2, 3, &mut r).unwrap();

        let mut g = Graph::new();
        let nodes = layer.nodes(&mut g, &params).unwrap();
        let x = g.constant(uniform_tensor(&[5, 1, 2], 1.0, &mut r));
        let out = lstm_sequence(&mut g, x, &[3], nodes, Direction::Forward).unwrap();
        let d = g.value(out).data();
        // Steps 3 and 4 are past the valid length: state stays at step 2's value.
        assert_eq!(&d[3 * 3..4 * 3], &d[2 * 3..3 * 3]);
        assert_eq!(&d[4 * 3..5 * 3], &d[2 * 3..3 * 3]);
    }

    #[test]
    fn backward_scan_ignores_padded_tail() {
        let mut r = rng(23);
        let mut params = ParameterSet::<f64>::new();
        let layer = LstmLayerParams::named("l");
        layer.register(&mut params, 2, 3, &mut r).unwrap();

        // Same real frames, one padded with garbage beyond the valid length.
        let real: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut padded = real.clone();
        padded.extend_from_slice(&[9.0, -9.0, 9.0, -9.0]);

        let mut g = Graph::new();
        let nodes = layer.nodes(&mut g, &params).unwrap();
        let x_short = g.constant(Tensor::from_vec(&[3, 1, 2], real));
        let out_short = lstm_sequence(&mut g, x_short, &[3], nodes, Direction::Backward).unwrap();
        let x_long = g.constant(Tensor::from_vec(&[5, 1, 2], padded));
        let out_long = lstm_sequence(&mut g, x_long, &[3], nodes, Direction::Backward).unwrap();

        for t in 0..3 {
            for k in 0..3 {
                let a = g.value(out_short).data()[t * 3 + k];
                let b = g.value(out_long).data()[t * 3 + k];
                assert!((a - b).abs() < 1e-12, "step {t} unit {k}");
            }
        }
    }

    #[test]
    fn forward_and_backward_concat_doubles_width() {
        let mut r = rng(24);
        let mut params = ParameterSet::<f64>::new();
        let fwd = LstmLayerParams::named("f");
        let bwd = LstmLayerParams::named("b");
        fwd.register(&mut params, 3, 4, &mut r).unwrap();
        bwd.register(&mut params, 3, 4, &mut r).unwrap();

        let mut g = Graph::new();
        let fn_ = fwd.nodes(&mut g, &params).unwrap();
        let bn = bwd.nodes(&mut g, &params).unwrap();
        let x = g.constant(uniform_tensor(&[4, 2, 3], 1.0, &mut r));
        let of = lstm_sequence(&mut g, x, &[4, 2], fn_, Direction::Forward).unwrap();
        let ob = lstm_sequence(&mut g, x, &[4, 2], bn, Direction::Backward).unwrap();
        let cat = g.concat(of, ob).unwrap();
        assert_eq!(g.shape(cat), &[4, 2, 8]);
    }

    #[test]
    fn lengths_beyond_sequence_are_rejected() {
        let mut r = rng(25);
        let mut params = ParameterSet::<f64>::new();
        let layer = LstmLayerParams::named("l");
        layer.register(&mut params, 2, 2, &mut r).unwrap();
        let mut g = Graph::new();
        let nodes = layer.nodes(&mut g, &params).unwrap();
        let x = g.constant(Tensor::zeros(&[3, 1, 2]));
        assert!(matches!(
            lstm_sequence(&mut g, x, &[4], nodes, Direction::Forward),
            Err(NnError::LengthExceedsSequence { len: 4, t: 3 })
        ));
    }

    #[test]
    fn registered_weights_are_in_range_with_forget_bias_one() {
        let mut r = rng(26);
        let mut params = ParameterSet::<f64>::new();
        let layer = LstmLayerParams::named("l");
        layer.register(&mut params, 5, 3, &mut r).unwrap();
        for name in [&layer.w_ih, &layer.w_hh] {
            for &v in params.get(name).unwrap().data() {
                assert!((-0.1..=0.1).contains(&v));
            }
        }
        let b = params.get(&layer.b).unwrap().data();
        assert_eq!(&b[..3], &[0.0; 3]);
        assert_eq!(&b[3..6], &[1.0; 3]); // forget gate slice
        assert_eq!(&b[6..12], &[0.0; 6]);
    }

    #[test]
    fn sequence_gradients_match_finite_differences() {
        let mut r = rng(27);
        let mut params = ParameterSet::<f64>::new();
        let layer = LstmLayerParams::named("l");
        layer.register(&mut params, 2, 3, &mut r).unwrap();
        params
            .insert("x", uniform_tensor(&[4, 2, 2], 0.5, &mut r))
            .unwrap();

        let worst = grad_check(&mut params, 1e-5, |p| {
            let mut g = Graph::new();
            let layer = LstmLayerParams::named("l");
            let nodes = layer.nodes(&mut g, p)?;
            let x = g.param(p, "x")?;
            let out = lstm_sequence(&mut g, x, &[4, 3], nodes, Direction::Forward)?;
            let t = g.tanh(out);
            let loss = g.sum_all(t);
            Ok((g, loss))
        })
        .unwrap();
        assert!(worst < 1e-6, "rel err {worst}");
    }
}
