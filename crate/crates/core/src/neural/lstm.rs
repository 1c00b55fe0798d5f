//! Single-layer LSTM over a token sequence, forward and reverse-mode.
//!
//! Weights are one `4H × (D + H)` row-major matrix applied to `[x_t; h_{t-1}]`,
//! gate blocks ordered input, forget, candidate, output.

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LstmShape {
    pub input: usize,
    pub hidden: usize,
}

impl LstmShape {
    pub fn weight_len(&self) -> usize {
        4 * self.hidden * (self.input + self.hidden)
    }

    pub fn bias_len(&self) -> usize {
        4 * self.hidden
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct LstmTrace {
    /// `[x_t; h_{t-1}]` per step.
    inputs: Vec<Vec<f64>>,
    /// Post-activation gates `[i, f, g, o]` per step.
    gates: Vec<Vec<f64>>,
    cells: Vec<Vec<f64>>,
    cell_tanh: Vec<Vec<f64>>,
    pub last_hidden: Vec<f64>,
}

pub(crate) fn forward(shape: LstmShape, w: &[f64], b: &[f64], xs: &[&[f64]]) -> LstmTrace {
    let (d, h) = (shape.input, shape.hidden);
    let width = d + h;
    let mut trace = LstmTrace {
        last_hidden: vec![0.0; h],
        ..LstmTrace::default()
    };
    let mut c_prev = vec![0.0; h];
    for x in xs {
        let mut input = Vec::with_capacity(width);
        input.extend_from_slice(x);
        input.extend_from_slice(&trace.last_hidden);
        let mut gates = b.to_vec();
        for (row, g) in w.chunks_exact(width).zip(gates.iter_mut()) {
            *g += row.iter().zip(&input).map(|(a, b)| a * b).sum::<f64>();
        }
        for (k, g) in gates.iter_mut().enumerate() {
            *g = if (2 * h..3 * h).contains(&k) {
                g.tanh()
            } else {
                sigmoid(*g)
            };
        }
        let mut c = vec![0.0; h];
        let mut ct = vec![0.0; h];
        let mut hidden = vec![0.0; h];
        for j in 0..h {
            c[j] = gates[h + j] * c_prev[j] + gates[j] * gates[2 * h + j];
            ct[j] = c[j].tanh();
            hidden[j] = gates[3 * h + j] * ct[j];
        }
        trace.inputs.push(input);
        trace.gates.push(gates);
        trace.cells.push(c.clone());
        trace.cell_tanh.push(ct);
        trace.last_hidden = hidden;
        c_prev = c;
    }
    trace
}

/// Back-propagates `grad_last` (∂L/∂h_T) through time. Accumulates into
/// `grad_w`/`grad_b` and returns ∂L/∂x_t for every step.
pub(crate) fn backward(
    shape: LstmShape,
    w: &[f64],
    trace: &LstmTrace,
    grad_last: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> Vec<Vec<f64>> {
    let (d, h) = (shape.input, shape.hidden);
    let width = d + h;
    let steps = trace.inputs.len();
    let mut dxs = vec![Vec::new(); steps];
    let mut dh = grad_last.to_vec();
    let mut dc_next = vec![0.0; h];
    let zeros = vec![0.0; h];
    let mut dz = vec![0.0; 4 * h];
    for t in (0..steps).rev() {
        let g = &trace.gates[t];
        let ct = &trace.cell_tanh[t];
        let c_prev = if t > 0 { &trace.cells[t - 1] } else { &zeros };
        for j in 0..h {
            let (i, f, cand, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
            let d_o = dh[j] * ct[j];
            let dc = dc_next[j] + dh[j] * o * (1.0 - ct[j] * ct[j]);
            dz[j] = dc * cand * i * (1.0 - i);
            dz[h + j] = dc * c_prev[j] * f * (1.0 - f);
            dz[2 * h + j] = dc * i * (1.0 - cand * cand);
            dz[3 * h + j] = d_o * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        let input = &trace.inputs[t];
        let mut dinput = vec![0.0; width];
        for (k, &dzk) in dz.iter().enumerate() {
            if dzk == 0.0 {
                continue;
            }
            grad_b[k] += dzk;
            let row = &w[k * width..(k + 1) * width];
            let grow = &mut grad_w[k * width..(k + 1) * width];
            for m in 0..width {
                grow[m] += dzk * input[m];
                dinput[m] += dzk * row[m];
            }
        }
        dh = dinput.split_off(d);
        dxs[t] = dinput;
    }
    dxs
}
