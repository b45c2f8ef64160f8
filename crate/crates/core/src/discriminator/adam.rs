//! Adam with bias correction.

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update; `params` and `grads` are matched slice by slice.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient group mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// f(θ) = θ², θ₀ = 1, lr = 0.1. Hand trace:
    /// t=1: g=2,      m=0.2,        v=0.004,          m̂=2,       v̂=4         → θ = 1 − 0.1·2/(2+1e-8)
    /// t=2: g=2θ₁,    m=0.9m+0.1g,  v=0.999v+0.001g², m̂=m/0.19,  v̂=v/0.001999
    /// t=3: likewise with 1−0.9³ = 0.271 and 1−0.999³ = 0.002997001.
    #[test]
    fn three_step_quadratic_trace() {
        let mut theta = [1.0f64];
        let mut opt = Adam::new(0.1);
        let mut seen = Vec::new();
        for _ in 0..3 {
            let g = [2.0 * theta[0]];
            opt.step(vec![&mut theta[..]], vec![&g[..]]);
            seen.push(theta[0]);
        }
        // values computed independently with the closed-form recursion above
        let t1: f64 = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        let g2 = 2.0 * t1;
        let (m2, v2) = (0.9 * 0.2 + 0.1 * g2, 0.999 * 0.004 + 0.001 * g2 * g2);
        let t2 = t1 - 0.1 * (m2 / 0.19) / ((v2 / 0.001999).sqrt() + 1e-8);
        let g3 = 2.0 * t2;
        let (m3, v3) = (0.9 * m2 + 0.1 * g3, 0.999 * v2 + 0.001 * g3 * g3);
        let t3 = t2 - 0.1 * (m3 / 0.271) / ((v3 / 0.002997001).sqrt() + 1e-8);
        assert!((seen[0] - t1).abs() < 1e-14);
        assert!((seen[1] - t2).abs() < 1e-13);
        assert!((seen[2] - t3).abs() < 1e-13);
        // and against frozen decimal values
        assert!((seen[0] - 0.900_000_000_5).abs() < 1e-10);
        assert!((seen[1] - 0.800_412_228_691_792_7).abs() < 1e-12, "{}", seen[1]);
        assert!((seen[2] - 0.701_586_272_946_03).abs() < 1e-12, "{}", seen[2]);
    }
}
