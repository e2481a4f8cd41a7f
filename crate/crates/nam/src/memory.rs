//! Outer-product memory matrix and its read/write primitives.
//!
//! A memory matrix M of shape d_v x d_k stores key-value associations as a
//! sum of outer products. `rd` returns p_r * M * q; `wr` returns
//! M + p_w * v k^T - p_e * M k k^T as a new matrix (functional update, so a
//! differentiation tape sees distinct states per timestep). Callers are
//! responsible for unit keys: reading back an exact value requires |k| = 1,
//! and this module never re-normalizes.
//!
//! The same primitives exist in two forms: plain functions over
//! [`MemoryMatrix`] values, and tape composites ([`rd_on_tape`],
//! [`wr_on_tape`]) for use inside differentiable models. The value form
//! doubles as the independent oracle for the tape form.

use crate::tensor::{self, Result, Scalar, Tape, Tensor, TensorError, Var};

/// Fixed-size associative memory state. Shape never changes over writes.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryMatrix<S: Scalar> {
    data: Vec<S>,
    d_v: usize,
    d_k: usize,
}

impl<S: Scalar> MemoryMatrix<S> {
    pub fn zeros(d_v: usize, d_k: usize) -> Self {
        Self {
            data: vec![S::zero(); d_v * d_k],
            d_v,
            d_k,
        }
    }

    pub fn from_rows(d_v: usize, d_k: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != d_v * d_k {
            return Err(TensorError::DataLength {
                expected: d_v * d_k,
                got: data.len(),
            });
        }
        Ok(Self { data, d_v, d_k })
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    /// Row-major entries, d_v rows of d_k.
    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Bytes held by the state; constant over any number of writes.
    pub fn state_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<S>()
    }
}

/// Read: p_r * M * q.
pub fn rd<S: Scalar>(m: &MemoryMatrix<S>, q: &[S], p_r: S) -> Result<Vec<S>> {
    if q.len() != m.d_k {
        return Err(TensorError::ShapeMismatch {
            op: "rd",
            lhs: vec![m.d_v, m.d_k],
            rhs: vec![q.len()],
        });
    }
    let mut out = tensor::dot_rows(&m.data, q, m.d_v, m.d_k);
    for x in out.iter_mut() {
        *x = *x * p_r;
    }
    Ok(out)
}

/// Write: M + p_w * v k^T - p_e * (M k) k^T, leaving the input unmodified.
pub fn wr<S: Scalar>(
    m: &MemoryMatrix<S>,
    k: &[S],
    v: &[S],
    p_w: S,
    p_e: S,
) -> Result<MemoryMatrix<S>> {
    if k.len() != m.d_k || v.len() != m.d_v {
        return Err(TensorError::ShapeMismatch {
            op: "wr",
            lhs: vec![m.d_v, m.d_k],
            rhs: vec![v.len(), k.len()],
        });
    }
    let mk = tensor::dot_rows(&m.data, k, m.d_v, m.d_k);
    let mut out = m.data.clone();
    for i in 0..m.d_v {
        let coeff_w = p_w * v[i];
        let coeff_e = p_e * mk[i];
        let row = &mut out[i * m.d_k..(i + 1) * m.d_k];
        for (o, &kj) in row.iter_mut().zip(k) {
            *o = *o + coeff_w * kj - coeff_e * kj;
        }
    }
    Ok(MemoryMatrix {
        data: out,
        d_v: m.d_v,
        d_k: m.d_k,
    })
}

/// Tape composite of `rd`: p_r * M * q with gradients through all three.
pub fn rd_on_tape<S: Scalar>(tape: &mut Tape<S>, m: Var, q: Var, p_r: Var) -> Result<Var> {
    let mq = tape.matvec(m, q)?;
    tape.smul(mq, p_r)
}

/// Tape composite of `wr`: M + p_w v k^T - p_e (M k) k^T.
pub fn wr_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    m: Var,
    k: Var,
    v: Var,
    p_w: Var,
    p_e: Var,
) -> Result<Var> {
    let write = tape.outer(v, k)?;
    let write = tape.smul(write, p_w)?;
    let mk = tape.matvec(m, k)?;
    let erase = tape.outer(mk, k)?;
    let erase = tape.smul(erase, p_e)?;
    let kept = tape.add(m, write)?;
    tape.sub(kept, erase)
}

/// Inserts a memory matrix on a tape as a constant.
pub fn memory_const<S: Scalar>(tape: &mut Tape<S>, m: &MemoryMatrix<S>) -> Var {
    tape.constant(Tensor::matrix(m.d_v, m.d_k, m.data.clone()).expect("consistent dims"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit<S: Scalar>(v: Vec<S>) -> Vec<S> {
        let n = v.iter().map(|&x| x * x).sum::<S>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn read_of_zero_memory_is_zero() {
        let m = MemoryMatrix::<f64>::zeros(3, 2);
        let q = unit(vec![1.0, 1.0]);
        assert_eq!(rd(&m, &q, 1.0).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn read_scales_linearly_in_probability() {
        // M = v k^T with unit k: rd(M, k, 1) = v and rd(M, k, 0.5) = v/2.
        let k = unit(vec![2.0_f64, -1.0, 0.5]);
        let v = vec![3.0, -4.0];
        let m = wr(&MemoryMatrix::zeros(2, 3), &k, &v, 1.0, 1.0).unwrap();
        let full = rd(&m, &k, 1.0).unwrap();
        let half = rd(&m, &k, 0.5).unwrap();
        for i in 0..2 {
            assert!((full[i] - v[i]).abs() < 1e-12);
            assert!((half[i] - 0.5 * v[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn write_with_zero_probabilities_is_identity() {
        let m = MemoryMatrix::from_rows(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = wr(&m, &unit(vec![1.0, 1.0]), &[5.0, 6.0], 0.0, 0.0).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn functional_update_leaves_input_untouched() {
        let m = MemoryMatrix::<f64>::zeros(2, 2);
        let _ = wr(&m, &[1.0, 0.0], &[1.0, 1.0], 1.0, 1.0).unwrap();
        assert_eq!(m.data(), &[0.0; 4]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = MemoryMatrix::<f64>::zeros(2, 3);
        assert!(rd(&m, &[1.0, 0.0], 1.0).is_err());
        assert!(wr(&m, &[1.0, 0.0, 0.0], &[1.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn overwrite_replaces_accumulate_adds() {
        let k = unit(vec![1.0_f64, 2.0]);
        let v1 = vec![1.0, 0.0, -1.0];
        let v2 = vec![0.5, 2.0, 4.0];
        let zero = MemoryMatrix::zeros(3, 2);

        // p_e = 1: second write replaces the first.
        let m = wr(&zero, &k, &v1, 1.0, 1.0).unwrap();
        let m = wr(&m, &k, &v2, 1.0, 1.0).unwrap();
        let read = rd(&m, &k, 1.0).unwrap();
        for i in 0..3 {
            assert!((read[i] - v2[i]).abs() < 1e-12);
        }

        // p_e = 0: values accumulate.
        let m = wr(&zero, &k, &v1, 1.0, 0.0).unwrap();
        let m = wr(&m, &k, &v2, 1.0, 0.0).unwrap();
        let read = rd(&m, &k, 1.0).unwrap();
        for i in 0..3 {
            assert!((read[i] - (v1[i] + v2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_form_matches_value_form() {
        let mut mat = MemoryMatrix::zeros(4, 4);
        let keys: Vec<Vec<f64>> = vec![
            unit(vec![1.0, 0.3, -0.2, 0.05]),
            unit(vec![-0.4, 1.0, 0.6, 0.1]),
        ];
        let vals = [vec![1.0, -2.0, 0.5, 0.25], vec![3.0, 0.0, -1.0, 2.0]];
        for (k, v) in keys.iter().zip(vals.iter()) {
            mat = wr(&mat, k, v, 0.8, 0.6).unwrap();
        }
        let value_read = rd(&mat, &keys[0], 0.7).unwrap();

        let mut tape = Tape::new();
        let mut m = memory_const(&mut tape, &MemoryMatrix::zeros(4, 4));
        let pw = tape.constant(Tensor::scalar(0.8));
        let pe = tape.constant(Tensor::scalar(0.6));
        for (k, v) in keys.iter().zip(vals.iter()) {
            let kv = tape.constant(Tensor::vector(k.clone()));
            let vv = tape.constant(Tensor::vector(v.clone()));
            m = wr_on_tape(&mut tape, m, kv, vv, pw, pe).unwrap();
        }
        let q = tape.constant(Tensor::vector(keys[0].clone()));
        let pr = tape.constant(Tensor::scalar(0.7));
        let r = rd_on_tape(&mut tape, m, q, pr).unwrap();
        for (a, b) in tape.value(r).data().iter().zip(&value_read) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
