//! Dense layers with manual backprop and the Adam optimizer used by the
//! radiance-field training loop. Hidden activations are softplus, which keeps
//! every derivative smooth for finite-difference verification.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn softplus(x: f64) -> f64 {
    softplus_and_sigmoid(x).0
}

pub fn sigmoid(x: f64) -> f64 {
    softplus_and_sigmoid(x).1
}

/// Softplus and its derivative from a single exponential evaluation.
pub fn softplus_and_sigmoid(x: f64) -> (f64, f64) {
    let e = (-x.abs()).exp();
    let sp = x.max(0.0) + e.ln_1p();
    let sig = if x >= 0.0 {
        1.0 / (1.0 + e)
    } else {
        e / (1.0 + e)
    };
    (sp, sig)
}

#[derive(Debug, Clone)]
pub struct Dense {
    /// (in, out) weight matrix.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn new_random(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Dense {
        let scale = 1.0 / (inputs as f64).sqrt();
        Dense {
            w: Array2::from_shape_fn((inputs, outputs), |_| rng.gen_range(-scale..scale)),
            b: Array1::zeros(outputs),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }
}

/// Gradients for one dense layer.
pub type DenseGrad = (Array2<f64>, Array1<f64>);

pub fn linear_backward(layer: &Dense, input: &Array2<f64>, d_out: &Array2<f64>) -> (DenseGrad, Array2<f64>) {
    let dw = input.t().dot(d_out);
    let db = d_out.sum_axis(Axis(0));
    let dx = d_out.dot(&layer.w.t());
    ((dw, db), dx)
}

/// Caches for a stack of softplus-activated dense layers. Activation
/// derivatives are stored at forward time so backward needs no exponentials.
#[derive(Debug, Default)]
pub struct StackCache {
    /// inputs[0] is the stack input; inputs[l+1] the activated output of layer l.
    pub inputs: Vec<Array2<f64>>,
    pub act_derivs: Vec<Array2<f64>>,
}

pub fn stack_forward(layers: &[Dense], x: &Array2<f64>, cache: Option<&mut StackCache>) -> Array2<f64> {
    let mut keep = cache;
    if let Some(c) = keep.as_deref_mut() {
        c.inputs.clear();
        c.act_derivs.clear();
        c.inputs.push(x.clone());
    }
    let mut cur = x.clone();
    for layer in layers {
        let mut z = layer.forward(&cur);
        if let Some(c) = keep.as_deref_mut() {
            let mut deriv = Array2::zeros(z.dim());
            ndarray::Zip::from(&mut z).and(&mut deriv).for_each(|v, d| {
                let (sp, sig) = softplus_and_sigmoid(*v);
                *v = sp;
                *d = sig;
            });
            c.act_derivs.push(deriv);
            c.inputs.push(z.clone());
        } else {
            z.mapv_inplace(softplus);
        }
        cur = z;
    }
    cur
}

/// Backward through the stack; returns per-layer grads (same order as
/// `layers`) and the gradient with respect to the stack input.
pub fn stack_backward(
    layers: &[Dense],
    cache: &StackCache,
    d_out: &Array2<f64>,
) -> (Vec<DenseGrad>, Array2<f64>) {
    let mut grads: Vec<DenseGrad> = Vec::with_capacity(layers.len());
    let mut d_act = d_out.clone();
    for (l, layer) in layers.iter().enumerate().rev() {
        let dz = &d_act * &cache.act_derivs[l];
        let ((dw, db), dx) = linear_backward(layer, &cache.inputs[l], &dz);
        grads.push((dw, db));
        d_act = dx;
    }
    grads.reverse();
    (grads, d_act)
}

/// Adam with multiplicative per-step learning-rate decay.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    current_lr: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(num_params: usize, learning_rate: f64, decay: f64) -> Adam {
        Adam {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
            current_lr: learning_rate,
            decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        self.current_lr *= 1.0 - self.decay;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.current_lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn softplus_is_stable_and_positive() {
        assert!(softplus(-1000.0) >= 0.0);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn stack_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layers = vec![Dense::new_random(3, 5, &mut rng), Dense::new_random(5, 2, &mut rng)];
        let x = array![[0.3, -0.2, 0.8], [1.1, 0.4, -0.6]];
        // Scalar objective: sum of outputs.
        let eval = |layers: &[Dense]| stack_forward(layers, &x, None).sum();
        let mut cache = StackCache::default();
        let out = stack_forward(&layers, &x, Some(&mut cache));
        let d_out = Array2::ones(out.dim());
        let (grads, _) = stack_backward(&layers, &cache, &d_out);

        let h = 1e-6;
        for (l, (dw, db)) in grads.iter().enumerate() {
            for idx in [(0, 0), (1, 1)] {
                let orig = layers[l].w[idx];
                layers[l].w[idx] = orig + h;
                let up = eval(&layers);
                layers[l].w[idx] = orig - h;
                let down = eval(&layers);
                layers[l].w[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!((fd - dw[idx]).abs() < 1e-6, "layer {l} w{idx:?}: {fd} vs {}", dw[idx]);
            }
            let orig = layers[l].b[0];
            layers[l].b[0] = orig + h;
            let up = eval(&layers);
            layers[l].b[0] = orig - h;
            let down = eval(&layers);
            layers[l].b[0] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - db[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_reduces_a_quadratic() {
        let mut p = vec![5.0, -3.0];
        let mut adam = Adam::new(2, 0.05, 0.0);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            adam.step(&mut p, &g);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn adam_lr_decays_multiplicatively() {
        let mut adam = Adam::new(1, 1e-3, 5e-5);
        let mut p = vec![0.0];
        for _ in 0..100 {
            adam.step(&mut p, &[0.0]);
        }
        let expect = 1e-3 * (1.0 - 5e-5f64).powi(100);
        assert!((adam.current_lr - expect).abs() < 1e-12);
    }
}
