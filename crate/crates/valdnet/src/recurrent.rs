//! LSTM and GRU cells, sequence runners, and the bidirectional wrapper.
//!
//! Cell math is expressed entirely in tape ops, so unrolled sequences are
//! differentiable through time with no extra machinery. Each gate `g` owns
//! an input matrix `W_g [hidden x input]`, a recurrent matrix
//! `U_g [hidden x hidden]` and a bias `b_g [hidden]`, stored under
//! `<prefix>.<gate>.<W|U|b>`.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::weights::{TapedParams, WeightStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    /// Gate names in declaration order; also the weight-registration and
    /// RNG-draw order.
    pub fn gate_names(self) -> &'static [&'static str] {
        match self {
            CellKind::Lstm => &["f", "i", "o", "c"],
            CellKind::Gru => &["z", "r", "h"],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            other => Err(Error::Config(format!("unknown cell kind {other:?} (lstm|gru)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        }
    }
}

/// One gate's parameters, already registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GateNodes {
    pub w: NodeId,
    pub u: NodeId,
    pub b: NodeId,
}

/// A cell's gates in `gate_names` order, bound to tape nodes.
pub struct CellNodes {
    pub kind: CellKind,
    pub gates: Vec<GateNodes>,
}

impl CellNodes {
    /// Bind a cell's weights from the store, e.g. prefix `rnn.fwd`.
    pub fn bind(
        tape: &mut Tape,
        params: &mut TapedParams,
        prefix: &str,
        kind: CellKind,
    ) -> Result<Self> {
        let mut gates = Vec::new();
        for gate in kind.gate_names() {
            gates.push(GateNodes {
                w: params.get(tape, &format!("{prefix}.{gate}.W"))?,
                u: params.get(tape, &format!("{prefix}.{gate}.U"))?,
                b: params.get(tape, &format!("{prefix}.{gate}.b"))?,
            });
        }
        Ok(CellNodes { kind, gates })
    }

    pub fn hidden(&self, tape: &Tape) -> usize {
        tape.shape(self.gates[0].b)[0]
    }
}

/// Register freshly initialized cell weights under `<prefix>.<gate>.<W|U|b>`.
/// Matrices draw uniform values in ±1/sqrt(hidden); biases start at zero.
pub fn register_cell_weights(
    store: &mut WeightStore,
    prefix: &str,
    kind: CellKind,
    input: usize,
    hidden: usize,
    rng: &mut ChaCha20Rng,
) -> Result<()> {
    let limit = 1.0 / (hidden as f64).sqrt();
    for gate in kind.gate_names() {
        let w: Vec<f64> = (0..hidden * input).map(|_| rng.gen_range(-limit..limit)).collect();
        let u: Vec<f64> = (0..hidden * hidden).map(|_| rng.gen_range(-limit..limit)).collect();
        store.insert(&format!("{prefix}.{gate}.W"), Tensor::new(vec![hidden, input], w)?)?;
        store.insert(&format!("{prefix}.{gate}.U"), Tensor::new(vec![hidden, hidden], u)?)?;
        store.insert(&format!("{prefix}.{gate}.b"), Tensor::zeros(vec![hidden]))?;
    }
    Ok(())
}

/// Hidden (and, for LSTM, cell) state between steps.
#[derive(Debug, Clone, Copy)]
pub struct RnnState {
    pub h: NodeId,
    pub c: Option<NodeId>,
}

impl RnnState {
    /// Zero state of the given width at sequence start.
    pub fn zero(tape: &mut Tape, kind: CellKind, hidden: usize) -> Self {
        let h = tape.leaf(Tensor::zeros(vec![hidden]));
        let c = match kind {
            CellKind::Lstm => Some(tape.leaf(Tensor::zeros(vec![hidden]))),
            CellKind::Gru => None,
        };
        RnnState { h, c }
    }
}

/// `W x + U h + b` for one gate.
fn gate_preactivation(tape: &mut Tape, g: GateNodes, x: NodeId, h: NodeId) -> Result<NodeId> {
    let wx = tape.matvec(g.w, x)?;
    let uh = tape.matvec(g.u, h)?;
    let s = tape.add(wx, uh)?;
    tape.add(s, g.b)
}

/// One step of the bound cell:
///
/// LSTM: f,i,o = σ(Wx + Uh + b); c̃ = tanh(Wx + Uh + b);
///       c_t = f ∘ c_{t−1} + i ∘ c̃; h_t = o ∘ tanh(c_t).
/// GRU:  z,r = σ(Wx + Uh + b);
///       h_t = (1−z) ∘ h_{t−1} + z ∘ tanh(W_h x + U_h (r ∘ h_{t−1}) + b_h).
pub fn cell_step(
    tape: &mut Tape,
    cell: &CellNodes,
    x: NodeId,
    state: &RnnState,
) -> Result<RnnState> {
    match cell.kind {
        CellKind::Lstm => {
            let c_prev = state
                .c
                .ok_or_else(|| Error::Contract("LSTM step without cell state".into()))?;
            let [gf, gi, go, gc] = [cell.gates[0], cell.gates[1], cell.gates[2], cell.gates[3]];
            let f_pre = gate_preactivation(tape, gf, x, state.h)?;
            let f = tape.sigmoid(f_pre)?;
            let i_pre = gate_preactivation(tape, gi, x, state.h)?;
            let i = tape.sigmoid(i_pre)?;
            let o_pre = gate_preactivation(tape, go, x, state.h)?;
            let o = tape.sigmoid(o_pre)?;
            let cand_pre = gate_preactivation(tape, gc, x, state.h)?;
            let cand = tape.tanh(cand_pre)?;

            let keep = tape.mul(f, c_prev)?;
            let write = tape.mul(i, cand)?;
            let c = tape.add(keep, write)?;
            let c_act = tape.tanh(c)?;
            let h = tape.mul(o, c_act)?;
            Ok(RnnState { h, c: Some(c) })
        }
        CellKind::Gru => {
            let [gz, gr, gh] = [cell.gates[0], cell.gates[1], cell.gates[2]];
            let z_pre = gate_preactivation(tape, gz, x, state.h)?;
            let z = tape.sigmoid(z_pre)?;
            let r_pre = gate_preactivation(tape, gr, x, state.h)?;
            let r = tape.sigmoid(r_pre)?;

            let rh = tape.mul(r, state.h)?;
            let wx = tape.matvec(gh.w, x)?;
            let urh = tape.matvec(gh.u, rh)?;
            let sum = tape.add(wx, urh)?;
            let cand_pre = tape.add(sum, gh.b)?;
            let cand = tape.tanh(cand_pre)?;

            let one_minus_z = tape.affine(z, -1.0, 1.0)?;
            let carry = tape.mul(one_minus_z, state.h)?;
            let write = tape.mul(z, cand)?;
            let h = tape.add(carry, write)?;
            Ok(RnnState { h, c: None })
        }
    }
}

/// Run the cell over rows in the given order, from zero state; returns one
/// hidden output per step.
pub fn run_direction(tape: &mut Tape, cell: &CellNodes, rows: &[NodeId]) -> Result<Vec<NodeId>> {
    if rows.is_empty() {
        return Err(Error::Contract("empty sequence".into()));
    }
    let hidden = cell.hidden(tape);
    let mut state = RnnState::zero(tape, cell.kind, hidden);
    let mut outputs = Vec::with_capacity(rows.len());
    for &x in rows {
        state = cell_step(tape, cell, x, &state)?;
        outputs.push(state.h);
    }
    Ok(outputs)
}

/// `[T,input] -> [T,hidden]`, row t holding h_t from zero initial state.
pub fn run_sequence(tape: &mut Tape, cell: &CellNodes, xs: NodeId) -> Result<NodeId> {
    let t_len = tape.shape(xs)[0];
    let rows: Vec<NodeId> = (0..t_len)
        .map(|t| tape.row(xs, t))
        .collect::<Result<_>>()?;
    let outs = run_direction(tape, cell, &rows)?;
    tape.stack_rows(&outs)
}

/// `[T,input] -> [T, 2·hidden]`: row t is the forward pass output at t
/// concatenated with the reversed-pass output for the same frame.
pub fn bidirectional(
    tape: &mut Tape,
    fwd: &CellNodes,
    bwd: &CellNodes,
    xs: NodeId,
) -> Result<NodeId> {
    let t_len = tape.shape(xs)[0];
    let rows: Vec<NodeId> = (0..t_len)
        .map(|t| tape.row(xs, t))
        .collect::<Result<_>>()?;
    let fwd_out = run_direction(tape, fwd, &rows)?;
    let rev_rows: Vec<NodeId> = rows.iter().rev().copied().collect();
    let bwd_out = run_direction(tape, bwd, &rev_rows)?;

    let mut joined = Vec::with_capacity(t_len);
    for t in 0..t_len {
        // bwd_out[j] consumed original row T-1-j, so frame t sits at T-1-t.
        joined.push(tape.concat_vec(fwd_out[t], bwd_out[t_len - 1 - t])?);
    }
    tape.stack_rows(&joined)
}
