//! Gated recurrent cell with input, forget and output gates and a tanh
//! candidate, run over a batch of equal-length sequences.

use crate::error::Result;
use crate::ndiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::rng::RngStream;

/// Parameter handles for one direction. Gate columns are laid out
/// `[input | forget | output | candidate]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: Option<ParamId>,
    pub hidden: usize,
}

impl LstmParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        with_bias: bool,
        init: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let w_x = store.add_uniform(format!("{prefix}.w_x"), vec![input, 4 * hidden], init, rng)?;
        let w_h = store.add_uniform(format!("{prefix}.w_h"), vec![hidden, 4 * hidden], init, rng)?;
        let bias = if with_bias {
            Some(store.add_uniform(format!("{prefix}.b"), vec![1, 4 * hidden], init, rng)?)
        } else {
            None
        };
        Ok(Self { w_x, w_h, bias, hidden })
    }

    pub fn lookup(store: &ParamStore, prefix: &str, with_bias: bool) -> Option<Self> {
        let w_h = store.id(&format!("{prefix}.w_h"))?;
        let hidden = store.get(w_h).value.rows();
        Some(Self {
            w_x: store.id(&format!("{prefix}.w_x"))?,
            w_h,
            bias: if with_bias {
                Some(store.id(&format!("{prefix}.b"))?)
            } else {
                None
            },
            hidden,
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundLstm {
        BoundLstm {
            w_x: g.param(store, self.w_x),
            w_h: g.param(store, self.w_h),
            bias: self.bias.map(|b| g.param(store, b)),
            hidden: self.hidden,
        }
    }
}

/// Parameters placed on a graph.
#[derive(Debug, Clone, Copy)]
pub struct BoundLstm {
    w_x: NodeId,
    w_h: NodeId,
    bias: Option<NodeId>,
    hidden: usize,
}

impl BoundLstm {
    /// Run over `inputs` (one `B x in` node per step) and return the hidden
    /// state after every step, in input order.
    ///
    /// `masks`, when given, holds one `B x 1` 0/1 column per step; a row whose
    /// mask is 0 carries its previous state through that step unchanged.
    pub fn run(
        &self,
        g: &mut Graph,
        inputs: &[NodeId],
        masks: Option<&[Vec<f64>]>,
        reverse: bool,
    ) -> Result<Vec<NodeId>> {
        let h = self.hidden;
        let mut outputs = vec![None; inputs.len()];
        let mut state: Option<(NodeId, NodeId)> = None;
        let order: Vec<usize> = if reverse {
            (0..inputs.len()).rev().collect()
        } else {
            (0..inputs.len()).collect()
        };
        for t in order {
            let mut z = g.matmul(inputs[t], self.w_x)?;
            if let Some((h_prev, _)) = state {
                let r = g.matmul(h_prev, self.w_h)?;
                z = g.add(z, r)?;
            }
            if let Some(b) = self.bias {
                z = g.add_row_bias(z, b)?;
            }
            let gates = g.slice_cols(z, 0, 3 * h)?;
            let gates = g.sigmoid(gates);
            let cand = g.slice_cols(z, 3 * h, 4 * h)?;
            let cand = g.tanh(cand);
            let i = g.slice_cols(gates, 0, h)?;
            let o = g.slice_cols(gates, 2 * h, 3 * h)?;
            let mut c = g.mul(i, cand)?;
            if let Some((_, c_prev)) = state {
                let f = g.slice_cols(gates, h, 2 * h)?;
                let kept = g.mul(f, c_prev)?;
                c = g.add(c, kept)?;
            }
            let tc = g.tanh(c);
            let mut h_new = g.mul(o, tc)?;

            if let Some(m) = masks {
                let rows = m[t].len();
                let keep = g.constant(Tensor::column(m[t].clone()));
                let hold = g.constant(Tensor::column(m[t].iter().map(|x| 1.0 - x).collect()));
                let (h_prev, c_prev) = match state {
                    Some(s) => s,
                    None => {
                        let z = g.constant(Tensor::zeros(vec![rows, h]));
                        (z, z)
                    }
                };
                let a = g.scale_rows(h_new, keep)?;
                let b = g.scale_rows(h_prev, hold)?;
                h_new = g.add(a, b)?;
                let a = g.scale_rows(c, keep)?;
                let b = g.scale_rows(c_prev, hold)?;
                c = g.add(a, b)?;
            }
            outputs[t] = Some(h_new);
            state = Some((h_new, c));
        }
        Ok(outputs.into_iter().map(|o| o.expect("every step visited")).collect())
    }
}
