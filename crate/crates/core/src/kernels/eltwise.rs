use crate::error::{Error, Result};
use crate::tensor::{QuantParams, TensorI8};

const ADD_SHIFT: u32 = 24;

/// `max(x, Z)`: ReLU in the quantized domain.
pub fn relu_into(input: &[i8], zero_point: i8, out: &mut [i8]) -> Result<()> {
    if input.len() != out.len() {
        return Err(Error::ShapeMismatch(format!("relu of {} values into {}", input.len(), out.len())));
    }
    for (o, &x) in out.iter_mut().zip(input) {
        *o = x.max(zero_point);
    }
    Ok(())
}

fn ratio(s: f32, out: f32) -> i64 {
    (s as f64 / out as f64 * (1u64 << ADD_SHIFT) as f64).round() as i64
}

/// Element-wise sum of two quantized tensors, rescaled into `out_q` and
/// saturated.
pub fn residual_add_into(a: &[i8], a_q: QuantParams, b: &[i8], b_q: QuantParams, out_q: QuantParams, out: &mut [i8]) -> Result<()> {
    if a.len() != b.len() || a.len() != out.len() {
        return Err(Error::ShapeMismatch(format!("residual add of {} and {} values into {}", a.len(), b.len(), out.len())));
    }
    let (ma, mb) = (ratio(a_q.scale, out_q.scale), ratio(b_q.scale, out_q.scale));
    let (za, zb) = (a_q.zero_point as i64, b_q.zero_point as i64);
    let half = 1i64 << (ADD_SHIFT - 1);
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        let s = ma * (x as i64 - za) + mb * (y as i64 - zb);
        let r = if s >= 0 { (s + half) >> ADD_SHIFT } else { -((-s + half) >> ADD_SHIFT) };
        *o = (r + out_q.zero_point as i64).clamp(-128, 127) as i8;
    }
    Ok(())
}

pub fn residual_add(a: &TensorI8, b: &TensorI8, out_q: QuantParams) -> Result<TensorI8> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("residual add of {:?} and {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0i8; a.len()];
    residual_add_into(a.data(), a.qparams(), b.data(), b.qparams(), out_q, &mut out)?;
    TensorI8::new(a.shape().to_vec(), out, out_q)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturates_instead_of_wrapping() {
        let q = QuantParams::unit();
        let a = TensorI8::new(vec![3], vec![100, -100, 5], q).unwrap();
        let b = TensorI8::new(vec![3], vec![100, -100, -3], q).unwrap();
        assert_eq!(residual_add(&a, &b, q).unwrap().data(), &[127, -128, 2]);
    }

    #[test]
    fn rescales_each_operand() {
        let a = TensorI8::new(vec![2], vec![10, 11], QuantParams::new(0.5, 0).unwrap()).unwrap();
        let b = TensorI8::new(vec![2], vec![4, 4], QuantParams::new(0.25, 2).unwrap()).unwrap();
        // 5 + 0.5 = 5.5 -> 6 ; 5.5 + 0.5 = 6 -> 6, at unit scale with Z=1.
        let y = residual_add(&a, &b, QuantParams::new(1.0, 1).unwrap()).unwrap();
        assert_eq!(y.data(), &[7, 7]);
    }

    #[test]
    fn relu_clamps_at_zero_point() {
        let mut out = [0i8; 4];
        relu_into(&[-9, -3, 0, 8], -3, &mut out).unwrap();
        assert_eq!(out, [-3, -3, 0, 8]);
    }
}
