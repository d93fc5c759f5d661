//! Differentiable dense kernels with reverse-mode gradient accumulation.
//!
//! All learnable tensors live in one flat [`ParamVector`]. A [`Tape`] records
//! every kernel application during a forward pass over vector-valued nodes;
//! [`Tape::backward`] then walks the record in reverse and accumulates the
//! gradient of a scalar output into a buffer laid out like the parameters.
//!
//! The kernel set is deliberately small: add, multiply (element-wise, with
//! scalar broadcast), scale by a constant, matrix-vector product against a
//! registered parameter matrix, concatenation, slicing, tanh, sigmoid,
//! softplus, exp, log and sum. Everything the model needs composes from these.
//!
//! [`finite_difference_check`] is the independent oracle: it only ever calls
//! the forward pass and compares central differences against the tape.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("non-finite value produced by kernel `{kernel}`")]
    NonFinite { kernel: &'static str },
    #[error("objective returned a non-finite value at probe coordinate {coordinate}")]
    NonFiniteProbe { coordinate: usize },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
    #[error("objective failed: {0}")]
    Objective(String),
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Handle to a registered parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat storage for every learnable tensor plus the shape registry that maps
/// names onto disjoint, contiguous, row-major slices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    specs: Vec<ParamSpec>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a zero-initialised `rows x cols` tensor.
    pub fn register(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
    ) -> Result<ParamId, NumericsError> {
        if self.specs.iter().any(|s| s.name == name) {
            return Err(NumericsError::DuplicateParam(name.to_string()));
        }
        let offset = self.values.len();
        self.specs.push(ParamSpec {
            name: name.to_string(),
            rows,
            cols,
            offset,
        });
        self.values.resize(offset + rows * cols, 0.0);
        Ok(ParamId(self.specs.len() - 1))
    }

    /// Rebuilds a vector from a serialized registry, checking that slices tile
    /// the value buffer exactly.
    pub fn from_parts(specs: Vec<ParamSpec>, values: Vec<f64>) -> Result<Self, NumericsError> {
        let mut expected = 0;
        for (i, s) in specs.iter().enumerate() {
            if s.offset != expected {
                return Err(NumericsError::Layout(format!(
                    "`{}` starts at {} but previous tensors end at {}",
                    s.name, s.offset, expected
                )));
            }
            if specs[..i].iter().any(|p| p.name == s.name) {
                return Err(NumericsError::DuplicateParam(s.name.clone()));
            }
            expected += s.len();
        }
        if expected != values.len() {
            return Err(NumericsError::Layout(format!(
                "registry covers {} values but buffer holds {}",
                expected,
                values.len()
            )));
        }
        Ok(Self { specs, values })
    }

    pub fn id(&self, name: &str) -> Result<ParamId, NumericsError> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .map(ParamId)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn slice(&self, id: ParamId) -> &[f64] {
        let s = &self.specs[id.0];
        &self.values[s.offset..s.offset + s.len()]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [f64] {
        let s = &self.specs[id.0];
        let (a, b) = (s.offset, s.offset + s.len());
        &mut self.values[a..b]
    }

    /// Row `r` of a matrix parameter.
    pub fn row(&self, id: ParamId, r: usize) -> &[f64] {
        let s = &self.specs[id.0];
        assert!(r < s.rows, "row {r} out of range for `{}`", s.name);
        let a = s.offset + r * s.cols;
        &self.values[a..a + s.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Dense matrix-vector product against a registered matrix.
    pub fn matvec(&self, id: ParamId, x: &[f64]) -> Vec<f64> {
        let s = &self.specs[id.0];
        assert_eq!(s.cols, x.len(), "matvec shape mismatch for `{}`", s.name);
        let m = self.slice(id);
        (0..s.rows)
            .map(|r| dot(&m[r * s.cols..(r + 1) * s.cols], x))
            .collect()
    }
}

/// Loss value and its gradient with respect to every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientRecord {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

/// Node handle on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param {
        offset: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatVec {
        offset: usize,
        stride: usize,
        rows: usize,
        col_start: usize,
        x: Var,
    },
    Concat(Vec<Var>),
    Slice(Var, usize),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Per-evaluation record of kernel applications.
///
/// The first non-finite value produced by any kernel is remembered together
/// with the kernel's name; [`Tape::check`] surfaces it.
pub struct Tape<'p> {
    params: &'p ParamVector,
    nodes: Vec<Node>,
    fault: Option<&'static str>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamVector) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(1024),
            fault: None,
        }
    }

    pub fn params(&self) -> &'p ParamVector {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, kernel: &'static str, value: Vec<f64>, op: Op) -> Var {
        if self.fault.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.fault = Some(kernel);
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a length-1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let x = &self.nodes[v.0].value;
        debug_assert_eq!(x.len(), 1);
        x[0]
    }

    pub fn check(&self) -> Result<(), NumericsError> {
        match self.fault {
            Some(kernel) => Err(NumericsError::NonFinite { kernel }),
            None => Ok(()),
        }
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push("constant", value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let s = self.params.spec(id);
        let offset = s.offset;
        let value = self.params.slice(id).to_vec();
        self.push("param", value, Op::Param { offset })
    }

    pub fn param_row(&mut self, id: ParamId, r: usize) -> Var {
        let s = self.params.spec(id);
        let offset = s.offset + r * s.cols;
        let value = self.params.row(id, r).to_vec();
        self.push("param", value, Op::Param { offset })
    }

    fn broadcast_len(&self, a: Var, b: Var, kernel: &str) -> usize {
        let (la, lb) = (self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
        assert!(
            la == lb || la == 1 || lb == 1,
            "{kernel}: incompatible lengths {la} and {lb}"
        );
        la.max(lb)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let n = self.broadcast_len(a, b, "add");
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = (0..n).map(|i| bget(va, i) + bget(vb, i)).collect();
        self.push("add", value, Op::Add(a, b))
    }

    /// Element-wise product; a length-1 operand broadcasts.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let n = self.broadcast_len(a, b, "mul");
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = (0..n).map(|i| bget(va, i) * bget(vb, i)).collect();
        self.push("mul", value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        self.push("scale", value, Op::Scale(a, c))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// `W x` for a registered `rows x cols` matrix `W`.
    pub fn matvec(&mut self, id: ParamId, x: Var) -> Var {
        assert_eq!(
            self.params.spec(id).cols,
            self.nodes[x.0].value.len(),
            "matvec shape mismatch for `{}`",
            self.params.spec(id).name
        );
        self.matvec_block(id, 0, x)
    }

    /// `W[:, col_start..col_start + len(x)] x`, i.e. the product with a column
    /// block of a registered matrix.
    pub fn matvec_block(&mut self, id: ParamId, col_start: usize, x: Var) -> Var {
        let s = self.params.spec(id);
        let (rows, stride, offset) = (s.rows, s.cols, s.offset);
        let xv = &self.nodes[x.0].value;
        assert!(
            col_start + xv.len() <= stride,
            "matvec on `{}`: block {}..{} exceeds {} columns",
            s.name,
            col_start,
            col_start + xv.len(),
            stride
        );
        let w = self.params.values();
        let value = (0..rows)
            .map(|r| {
                let a = offset + r * stride + col_start;
                dot(&w[a..a + xv.len()], xv)
            })
            .collect();
        self.push(
            "matvec",
            value,
            Op::MatVec {
                offset,
                stride,
                rows,
                col_start,
                x,
            },
        )
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut value = Vec::new();
        for p in parts {
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push("concat", value, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[a.0].value[start..start + len].to_vec();
        self.push("slice", value, Op::Slice(a, start))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.iter().map(|x| x.tanh()).collect();
        self.push("tanh", value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| sigmoid(x)).collect();
        self.push("sigmoid", value, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| softplus(x)).collect();
        self.push("softplus", value, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.iter().map(|x| x.exp()).collect();
        self.push("exp", value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self
            .nodes[a.0]
            .value
            .iter()
            .map(|&x| if x > 0.0 { x.ln() } else { f64::NAN })
            .collect();
        self.push("log", value, Op::Log(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = vec![self.nodes[a.0].value.iter().sum()];
        self.push("sum", value, Op::Sum(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p)
    }

    /// Softmax over the entries of `a`. The max-shift is a constant, which is
    /// exact because softmax is shift invariant.
    pub fn softmax(&mut self, a: Var) -> Var {
        let m = self.nodes[a.0]
            .value
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let shift = self.constant(vec![-m]);
        let shifted = self.add(a, shift);
        let e = self.exp(shifted);
        let total = self.sum(e);
        let log_total = self.log(total);
        let neg = self.scale(log_total, -1.0);
        let inv = self.exp(neg);
        self.mul(e, inv)
    }

    /// Gradient of the length-1 node `out` with respect to every parameter.
    pub fn backward(&self, out: Var) -> Vec<f64> {
        let mut pgrad = vec![0.0; self.params.len()];
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0; self.nodes[out.0].value.len()]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let len_of = |v: Var| self.nodes[v.0].value.len();
            match &node.op {
                Op::Input => {}
                Op::Param { offset } => {
                    for (p, gi) in pgrad[*offset..*offset + g.len()].iter_mut().zip(&g) {
                        *p += gi;
                    }
                }
                Op::Add(a, b) => {
                    for &v in [a, b] {
                        let n = len_of(v);
                        let ga = acc(&mut grads, v, n);
                        if n == g.len() {
                            for (x, y) in ga.iter_mut().zip(&g) {
                                *x += y;
                            }
                        } else {
                            ga[0] += g.iter().sum::<f64>();
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    for (v, other) in [(*a, vb), (*b, va)] {
                        let n = len_of(v);
                        let ga = acc(&mut grads, v, n);
                        if n == g.len() {
                            for i in 0..n {
                                ga[i] += g[i] * bget(other, i);
                            }
                        } else {
                            ga[0] += (0..g.len()).map(|i| g[i] * bget(other, i)).sum::<f64>();
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for (x, y) in ga.iter_mut().zip(&g) {
                        *x += c * y;
                    }
                }
                Op::MatVec {
                    offset,
                    stride,
                    rows,
                    col_start,
                    x,
                } => {
                    let xv = &self.nodes[x.0].value;
                    let w = self.params.values();
                    let gx = acc(&mut grads, *x, xv.len());
                    for r in 0..*rows {
                        let a = offset + r * stride + col_start;
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for c in 0..xv.len() {
                            gx[c] += w[a + c] * gr;
                            pgrad[a + c] += gr * xv[c];
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = len_of(p);
                        let gp = acc(&mut grads, p, n);
                        for (x, y) in gp.iter_mut().zip(&g[start..start + n]) {
                            *x += y;
                        }
                        start += n;
                    }
                }
                Op::Slice(a, start) => {
                    let n = len_of(*a);
                    let ga = acc(&mut grads, *a, n);
                    for (x, y) in ga[*start..*start + g.len()].iter_mut().zip(&g) {
                        *x += y;
                    }
                }
                Op::Tanh(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        let y = node.value[i];
                        ga[i] += g[i] * (1.0 - y * y);
                    }
                }
                Op::Sigmoid(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        let y = node.value[i];
                        ga[i] += g[i] * y * (1.0 - y);
                    }
                }
                Op::Softplus(a) => {
                    let xa = &self.nodes[a.0].value;
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * sigmoid(xa[i]);
                    }
                }
                Op::Exp(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * node.value[i];
                    }
                }
                Op::Log(a) => {
                    let xa = &self.nodes[a.0].value;
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] / xa[i];
                    }
                }
                Op::Sum(a) => {
                    let n = len_of(*a);
                    let ga = acc(&mut grads, *a, n);
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
        }
        pgrad
    }
}

#[inline]
fn bget(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A scalar function of a [`ParamVector`] that can report its value and its
/// gradient.
pub trait ScalarObjective {
    fn value(&self, x: &ParamVector) -> Result<f64, NumericsError>;
    fn value_and_gradient(&self, x: &ParamVector) -> Result<GradientRecord, NumericsError>;
}

/// Adapts a closure that records a scalar onto a tape.
pub struct TapeObjective<F>(pub F);

impl<F> ScalarObjective for TapeObjective<F>
where
    F: for<'p> Fn(&mut Tape<'p>) -> Result<Var, NumericsError>,
{
    fn value(&self, x: &ParamVector) -> Result<f64, NumericsError> {
        let mut tape = Tape::new(x);
        let out = (self.0)(&mut tape)?;
        tape.check()?;
        Ok(tape.scalar(out))
    }

    fn value_and_gradient(&self, x: &ParamVector) -> Result<GradientRecord, NumericsError> {
        evaluate_with_gradients(&self.0, x)
    }
}

/// Runs `f` on a fresh tape and back-propagates its scalar output.
pub fn evaluate_with_gradients<F>(f: F, x: &ParamVector) -> Result<GradientRecord, NumericsError>
where
    F: for<'p> Fn(&mut Tape<'p>) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new(x);
    let out = f(&mut tape)?;
    tape.check()?;
    let gradient = tape.backward(out);
    Ok(GradientRecord {
        loss: tape.scalar(out),
        gradient,
    })
}

/// Worst coordinate-wise relative error between the analytic gradient and
/// central differences `(f(x+h) - f(x-h)) / 2h`. The denominator is
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<O: ScalarObjective + ?Sized>(
    f: &O,
    x: &ParamVector,
    step: f64,
) -> Result<f64, NumericsError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(NumericsError::BadStep(step));
    }
    let analytic = f.value_and_gradient(x)?;
    let mut probe = x.clone();
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + step;
        let plus = f.value(&probe);
        probe.values_mut()[i] = orig - step;
        let minus = f.value(&probe);
        probe.values_mut()[i] = orig;
        let (plus, minus) = match (plus, minus) {
            (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
            _ => return Err(NumericsError::NonFiniteProbe { coordinate: i }),
        };
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.gradient[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
