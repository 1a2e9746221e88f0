use rand::Rng;

use crate::error::{invalid, Result};
use crate::grad::{Array, Var};
use crate::rng::gumbel;

/// Gumbel(0, 1) noise of the given shape.
pub fn gumbel_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Array {
    let len = shape.iter().product();
    Array::new(shape.to_vec(), (0..len).map(|_| gumbel(rng)).collect()).expect("noise shape")
}

/// `softmax((log π + G)/τ)` over the last axis with fresh noise from `rng`.
pub fn gumbel_softmax<R: Rng + ?Sized>(pi: &Var, tau: f64, rng: &mut R) -> Result<Var> {
    let noise = gumbel_noise(pi.shape(), rng);
    gumbel_softmax_with(pi, tau, &noise, false)
}

/// [`gumbel_softmax`] with explicit noise. Zero entries of π get a `−∞`
/// logit and are never selected. With `on_probs` the noise is added to π
/// itself instead of `log π`.
pub fn gumbel_softmax_with(pi: &Var, tau: f64, noise: &Array, on_probs: bool) -> Result<Var> {
    if !(tau > 0.0) {
        return invalid(format!("temperature must be positive, got {tau}"));
    }
    if let Some(r) = pi.value().rows().position(|row| row.iter().all(|&v| v <= 0.0)) {
        return invalid(format!("categorical row {r} has no positive mass"));
    }
    let logits = if on_probs { pi.clone() } else { pi.ln_support() };
    Ok(logits.add(&Var::constant(noise.clone()))?.scale(1.0 / tau).softmax())
}

/// One-hot of the row-wise argmax (lowest index on ties).
pub fn hard_argmax(x: &Array) -> Array {
    let width = x.last_dim();
    let mut out = Array::zeros(x.shape());
    for (r, row) in x.rows().enumerate() {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        out.data_mut()[r * width + best] = 1.0;
    }
    out
}

/// Straight-through estimator: the value is the one-hot argmax of `x`, the
/// gradient is that of `x`.
pub fn straight_through(x: &Var) -> Result<Var> {
    x.sub(&x.detach())?.add(&Var::constant(hard_argmax(x.value())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Tape;
    use crate::rng::stream;

    #[test]
    fn output_is_on_the_simplex() {
        let mut rng = stream(1, 0);
        let pi = Var::constant(Array::from_rows(&[vec![0.2, 0.0, 0.8], vec![1.0, 0.0, 0.0]]).unwrap());
        for tau in [0.01, 0.5, 3.0] {
            let y = gumbel_softmax(&pi, tau, &mut rng).unwrap();
            for row in y.value().rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert_eq!(row[1], 0.0);
            }
        }
    }

    #[test]
    fn low_temperature_argmax_follows_pi() {
        let mut rng = stream(2, 0);
        let pi = Var::constant(Array::new(vec![1, 3], vec![0.2, 0.3, 0.5]).unwrap());
        let n = 100_000;
        let mut freq = [0.0; 3];
        for _ in 0..n {
            let y = gumbel_softmax(&pi, 0.1, &mut rng).unwrap();
            let h = hard_argmax(y.value());
            for i in 0..3 {
                freq[i] += h.data()[i] / n as f64;
            }
        }
        let tv: f64 = freq
            .iter()
            .zip([0.2, 0.3, 0.5])
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "{freq:?}");
    }

    #[test]
    fn vanishing_temperature_is_one_hot() {
        let noise = Array::new(vec![1, 3], vec![0.3, -0.1, 0.2]).unwrap();
        let pi = Var::constant(Array::new(vec![1, 3], vec![0.2, 0.3, 0.5]).unwrap());
        let y = gumbel_softmax_with(&pi, 1e-4, &noise, false).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_rows_and_bad_temperatures_fail() {
        let noise = Array::zeros(&[1, 2]);
        let zero = Var::constant(Array::zeros(&[1, 2]));
        assert!(gumbel_softmax_with(&zero, 1.0, &noise, false).is_err());
        let pi = Var::constant(Array::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
        assert!(gumbel_softmax_with(&pi, 0.0, &noise, false).is_err());
    }

    #[test]
    fn probability_space_noise_uses_pi_as_logits() {
        let noise = Array::new(vec![1, 2], vec![0.1, -0.2]).unwrap();
        let pi = Var::constant(Array::new(vec![1, 2], vec![0.4, 0.6]).unwrap());
        let y = gumbel_softmax_with(&pi, 0.5, &noise, true).unwrap();
        let (a, b) = ((0.4f64 + 0.1) / 0.5, (0.6f64 - 0.2) / 0.5);
        let want = a.exp() / (a.exp() + b.exp());
        assert!((y.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn straight_through_value_and_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Array::new(vec![1, 3], vec![0.6, 0.3, 0.1]).unwrap());
        let st = straight_through(&x).unwrap();
        assert_eq!(st.data(), &[1.0, 0.0, 0.0]);
        let c = Var::constant(Array::vector(vec![2.0, -1.0, 5.0]));
        let g = st.mul(&c).unwrap().sum().backward().unwrap().get(&x);
        assert_eq!(g.data(), &[2.0, -1.0, 5.0]);

        let tape = Tape::new();
        let hot = tape.leaf(Array::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let st = straight_through(&hot).unwrap();
        assert_eq!(st.data(), hot.data());
        let g = st.sum().backward().unwrap().get(&hot);
        assert_eq!(g.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn ties_pick_the_lowest_index() {
        let h = hard_argmax(&Array::new(vec![2, 3], vec![0.4, 0.4, 0.2, 0.1, 0.45, 0.45]).unwrap());
        assert_eq!(h.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn gradient_reaches_pi() {
        let tape = Tape::new();
        let pi = tape.leaf(Array::new(vec![1, 3], vec![0.2, 0.3, 0.5]).unwrap());
        let noise = Array::new(vec![1, 3], vec![0.1, 0.4, -0.3]).unwrap();
        let y = gumbel_softmax_with(&pi, 0.7, &noise, false).unwrap();
        let w = Var::constant(Array::vector(vec![1.0, 0.0, -1.0]));
        let loss = y.mul(&w).unwrap().sum();
        let g = loss.backward().unwrap().get(&pi);
        let f = |p: &[f64]| {
            let v = Var::constant(Array::new(vec![1, 3], p.to_vec()).unwrap());
            let y = gumbel_softmax_with(&v, 0.7, &noise, false).unwrap();
            y.data()[0] - y.data()[2]
        };
        for i in 0..3 {
            let mut a = vec![0.2, 0.3, 0.5];
            let mut b = a.clone();
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (f(&a) - f(&b)) / 2e-6;
            assert!((fd - g.data()[i]).abs() < 1e-6);
        }
    }
}
