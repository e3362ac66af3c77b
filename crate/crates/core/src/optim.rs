use alloc::vec::Vec;

use crate::scalar::Real;

/// Adaptive moment estimation with bias correction, no weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(learning_rate: f64, shapes: impl IntoIterator<Item = usize>) -> Self {
        let lens: Vec<usize> = shapes.into_iter().collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: lens.iter().map(|&n| alloc::vec![T::zero(); n]).collect(),
            second_moment: lens.iter().map(|&n| alloc::vec![T::zero(); n]).collect(),
        }
    }

    /// Applies one update to `params` given matching `grads`.
    pub fn update(&mut self, params: Vec<&mut [T]>, grads: Vec<&[T]>) {
        assert_eq!(params.len(), self.first_moment.len());
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let c1 = T::of(1.0 - libm::pow(self.beta1, t as f64));
        let c2 = T::of(1.0 - libm::pow(self.beta2, t as f64));
        let lr = T::of(self.learning_rate);
        let eps = T::of(self.eps);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::<f64>::new(1e-4, [2]);
        let mut p = [1.0, -1.0];
        adam.update(alloc::vec![&mut p[..]], alloc::vec![&[3.0, -0.5][..]]);
        assert!((p[0] - (1.0 - 1e-4)).abs() < 1e-10);
        assert!((p[1] - (-1.0 + 1e-4)).abs() < 1e-10);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut adam = Adam::<f64>::new(0.05, [1]);
        let mut x = [5.0];
        for _ in 0..2000 {
            let g = [2.0 * (x[0] - 2.0)];
            adam.update(alloc::vec![&mut x[..]], alloc::vec![&g[..]]);
        }
        assert!((x[0] - 2.0).abs() < 1e-2);
    }
}
