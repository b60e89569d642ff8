//! Parameterized building blocks shared by the model stages.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{BoundParams, NumericsError, ParamId, ParamRegistry, Tape, Tensor, Var};

type Result<T> = std::result::Result<T, NumericsError>;

/// `rows x cols` matrix drawn uniformly from `[-bound, bound]`.
pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("sized by construction")
}

/// Glorot-uniform `rows x cols` matrix.
pub fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    uniform(rows, cols, (6.0 / (rows + cols) as f64).sqrt(), rng)
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(reg: &mut ParamRegistry, name: &str, input: usize, output: usize, bias: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = reg.register(format!("{name}.w"), xavier(input, output, rng))?;
        let b = bias
            .then(|| reg.register(format!("{name}.b"), Tensor::zeros(&[1, output])))
            .transpose()?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        match self.b {
            Some(b) => tape.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Two linear layers with a relu between them.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(reg: &mut ParamRegistry, name: &str, input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(reg, &format!("{name}.0"), input, hidden, true, rng)?,
            out: Linear::new(reg, &format!("{name}.1"), hidden, output, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        self.out.forward(tape, p, h)
    }
}

/// One direction of an LSTM with gate blocks ordered `[i, f, g, o]`.
#[derive(Clone, Copy, Debug)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub reverse: bool,
}

impl Lstm {
    pub fn new(reg: &mut ParamRegistry, name: &str, input: usize, hidden: usize, reverse: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let wx = reg.register(format!("{name}.wx"), xavier(input, 4 * hidden, rng))?;
        let wh = reg.register(format!("{name}.wh"), xavier(hidden, 4 * hidden, rng))?;
        let mut b = Tensor::zeros(&[1, 4 * hidden]);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        let b = reg.register(format!("{name}.b"), b)?;
        Ok(Self { wx, wh, b, reverse })
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let pre = tape.matmul(x, p.var(self.wx))?;
        let pre = tape.add_row(pre, p.var(self.b))?;
        tape.lstm_recurrence(pre, p.var(self.wh), self.reverse)
    }
}

/// Forward states in the first half of the output columns, backward states
/// in the second.
#[derive(Clone, Copy, Debug)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new(reg: &mut ParamRegistry, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            fwd: Lstm::new(reg, &format!("{name}.fwd"), input, hidden, false, rng)?,
            bwd: Lstm::new(reg, &format!("{name}.bwd"), input, hidden, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let f = self.fwd.forward(tape, p, x)?;
        let b = self.bwd.forward(tape, p, x)?;
        tape.concat_cols(&[f, b])
    }
}

/// Inverted dropout. Identity when `rng` is `None` or `rate` is zero.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).len();
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
    tape.mul_const(x, Tensor::new(shape, mask)?)
}
