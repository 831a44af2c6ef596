//! Dense kernels shared by every trainer: a row-major `f64` matrix, a
//! max-shifted softmax, Adagrad and Adam, and a central-difference gradient
//! checker.

use std::cell::Cell;
use std::io::{self, BufRead, Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("ragged rows".to_string()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Entries drawn from `Uniform(-half_width, half_width)`.
    pub fn uniform<R: Rng>(rows: usize, cols: usize, half_width: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-half_width..half_width))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on 0; an empty-column matrix has no data anyway
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Elementwise sum with a matrix of the same shape.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "{:?} + {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Binary layout: `rows: u64`, `cols: u64`, then `rows*cols` `f64`, all
    /// little-endian.
    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        for x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Matrix> {
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let rows = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let cols = u64::from_le_bytes(word) as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::dim("matrix header overflows".to_string()))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut word)?;
            data.push(f64::from_le_bytes(word));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// One row per line, values separated by single spaces.
    pub fn write_text<W: Write>(&self, mut w: W) -> io::Result<()> {
        for row in self.iter_rows() {
            writeln!(w, "{}", join_floats(row))?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Matrix> {
        let mut rows = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            rows.push(parse_floats(&line, n + 1)?);
        }
        Matrix::from_rows(&rows)
    }
}

/// Seventeen significant digits; parses back to the identical `f64`.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub(crate) fn join_floats(xs: &[f64]) -> String {
    let mut s = String::with_capacity(xs.len() * 24);
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&format_float(*x));
    }
    s
}

pub(crate) fn parse_floats(line: &str, line_no: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|e| Error::Parse {
                line: line_no,
                msg: format!("`{t}`: {e}"),
            })
        })
        .collect()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Numerically stable softmax (logits are shifted by their maximum).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out)?;
    Ok(out)
}

/// [`softmax`] into a caller-owned buffer.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) -> Result<()> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax logits"));
    }
    if logits.is_empty() {
        return Err(Error::Empty("softmax logits"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
    Ok(())
}

/// One Adagrad coordinate update, returning `(param, accumulator)`.
#[inline]
pub fn adagrad_update(param: f64, acc: f64, grad: f64, lr: f64) -> (f64, f64) {
    let acc = acc + grad * grad;
    (param - lr * grad / acc.sqrt(), acc)
}

#[derive(Debug, Clone)]
pub struct AdagradState {
    pub accumulator: Vec<f64>,
    pub learning_rate: f64,
    pub initial_accumulator: f64,
}

impl AdagradState {
    pub fn new(len: usize, learning_rate: f64, initial_accumulator: f64) -> Self {
        AdagradState {
            accumulator: vec![initial_accumulator; len],
            learning_rate,
            initial_accumulator,
        }
    }

    /// `acc += g^2; param -= lr * g / sqrt(acc)` elementwise.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.step_at(0, params, grads)
    }

    /// Update the parameters stored at `offset..offset + params.len()` of
    /// the tracked vector.
    pub fn step_at(&mut self, offset: usize, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || offset + params.len() > self.accumulator.len() {
            return Err(Error::dim(format!(
                "adagrad: {} params, {} grads, {} accumulators at offset {offset}",
                params.len(),
                grads.len(),
                self.accumulator.len()
            )));
        }
        let acc = &mut self.accumulator[offset..offset + params.len()];
        for ((p, a), &g) in params.iter_mut().zip(acc).zip(grads) {
            (*p, *a) = adagrad_update(*p, *a, g, self.learning_rate);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Kingma & Ba defaults: beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(len: usize, learning_rate: f64) -> Self {
        AdamState::with_params(len, learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn with_params(
        len: usize,
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            learning_rate,
            beta1,
            beta2,
            epsilon,
        }
    }

    /// Bias-corrected Adam update; increments `t`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::dim(format!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Compare an analytic gradient against central differences.
///
/// Returns the maximum over coordinates of `|a - n| / max(1, |a|, |n|)`.
pub fn check_gradient<F>(mut f: F, analytic: &[f64], point: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != point.len() {
        return Err(Error::dim(format!(
            "gradient has {} entries, point has {}",
            analytic.len(),
            point.len()
        )));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let fp = f(&x);
        x[i] = orig - eps;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("objective during gradient check"));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Interior-mutable parameter storage used by the per-example trainers.
///
/// The sequential path stores parameters as `[Cell<f64>]`; lock-free
/// parallel training stores the same bits in `[AtomicU64]` so concurrent
/// unsynchronised updates stay free of undefined behaviour.
pub(crate) trait Slots {
    fn get(&self, i: usize) -> f64;
    fn set(&self, i: usize, v: f64);

    fn read_into(&self, start: usize, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.get(start + k);
        }
    }

    #[inline]
    fn adagrad(&self, acc: &Self, i: usize, grad: f64, lr: f64) {
        let (p, a) = adagrad_update(self.get(i), acc.get(i), grad, lr);
        acc.set(i, a);
        self.set(i, p);
    }
}

impl Slots for [Cell<f64>] {
    #[inline]
    fn get(&self, i: usize) -> f64 {
        self[i].get()
    }

    #[inline]
    fn set(&self, i: usize, v: f64) {
        self[i].set(v)
    }
}

impl Slots for [AtomicU64] {
    #[inline]
    fn get(&self, i: usize) -> f64 {
        f64::from_bits(self[i].load(Ordering::Relaxed))
    }

    #[inline]
    fn set(&self, i: usize, v: f64) {
        self[i].store(v.to_bits(), Ordering::Relaxed)
    }
}

pub(crate) fn to_atomic(xs: &[f64]) -> Vec<AtomicU64> {
    xs.iter().map(|x| AtomicU64::new(x.to_bits())).collect()
}

pub(crate) fn from_atomic(xs: Vec<AtomicU64>) -> Vec<f64> {
    xs.into_iter()
        .map(|a| f64::from_bits(a.into_inner()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-15);
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
        let p = softmax(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(&[0.0, f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn adagrad_examples() {
        let mut st = AdagradState::new(1, 1.0, 0.1);
        let mut p = [0.0];
        st.step(&mut p, &[1.0]).unwrap();
        assert!((st.accumulator[0] - 1.1).abs() < 1e-15);
        assert!((p[0] + 0.953_462_589_245_592_4).abs() < 1e-12);

        let before = p[0];
        st.step(&mut p, &[1.0]).unwrap();
        assert!((before - p[0] - 1.0 / 2.1f64.sqrt()).abs() < 1e-12);
        assert!((before - p[0] - 0.69007).abs() < 1e-5);

        let mut st = AdagradState::new(1, 1.0, 0.1);
        let mut p = [0.25];
        st.step(&mut p, &[0.0]).unwrap();
        assert_eq!(p[0], 0.25);
        assert_eq!(st.accumulator[0], 0.1);

        assert!(st.step(&mut [0.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn adam_examples() {
        let mut st = AdamState::new(1, 0.0025);
        let mut p = [0.0];
        st.step(&mut p, &[1.0]).unwrap();
        assert_eq!(st.t, 1);
        assert!((p[0] + 0.0025).abs() < 1e-10);

        let mut st = AdamState::new(1, 0.0025);
        let mut p = [0.7];
        st.step(&mut p, &[0.0]).unwrap();
        assert_eq!(p[0], 0.7);
        assert_eq!((st.beta1, st.beta2, st.epsilon), (0.9, 0.999, 1e-8));
        assert!(st.step(&mut [0.0, 0.0], &[0.0]).is_err());
    }

    #[test]
    fn gradient_checker_examples() {
        let err = check_gradient(|x| x[0] * x[0], &[6.0], &[3.0], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
        let err = check_gradient(|_| 4.2, &[0.0], &[1.5], 1e-5).unwrap();
        assert_eq!(err, 0.0);
        assert!(check_gradient(|_| f64::NAN, &[0.0], &[0.0], 1e-5).is_err());
    }

    #[test]
    fn binary_and_text_round_trip() {
        let m =
            Matrix::from_rows(&[vec![1.0, -2.5e-300], vec![std::f64::consts::PI, 1e300]]).unwrap();
        let mut buf = Vec::new();
        m.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 4 * 8);
        assert_eq!(&buf[..8], &2u64.to_le_bytes());
        assert_eq!(Matrix::read_binary(&buf[..]).unwrap(), m);

        let mut txt = Vec::new();
        m.write_text(&mut txt).unwrap();
        assert_eq!(Matrix::read_text(&txt[..]).unwrap(), m);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            logits in prop::collection::vec(-50.0f64..50.0, 1..40),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&logits).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn adagrad_accumulator_never_decreases(grads in prop::collection::vec(-10.0f64..10.0, 1..30)) {
            let mut st = AdagradState::new(1, 1.0, 0.1);
            let mut p = [0.0];
            let mut prev = st.accumulator[0];
            for g in grads {
                st.step(&mut p, &[g]).unwrap();
                prop_assert!(st.accumulator[0] >= prev);
                prop_assert!(st.accumulator[0] >= st.initial_accumulator);
                prev = st.accumulator[0];
            }
        }

        #[test]
        fn adam_first_step_is_bounded_by_learning_rate(g in -1e6f64..1e6) {
            let mut st = AdamState::new(1, 0.0025);
            let mut p = [0.0];
            st.step(&mut p, &[g]).unwrap();
            prop_assert!(p[0].abs() <= 0.0025 * (1.0 + 1e-6));
        }

        #[test]
        fn quadratics_pass_the_gradient_check(
            a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0,
            x in -5.0f64..5.0, y in -5.0f64..5.0,
        ) {
            let f = |v: &[f64]| a * v[0] * v[0] + b * v[0] * v[1] + c * v[1] + 1.0;
            let grad = [2.0 * a * x + b * y, b * x + c];
            let err = check_gradient(f, &grad, &[x, y], 1e-5).unwrap();
            prop_assert!(err < 1e-7, "{}", err);
        }
    }
}
