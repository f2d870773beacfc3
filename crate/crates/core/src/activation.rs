use crate::math;

/// Smooth bounded nonlinearity of the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Activation {
    #[default]
    Sigmoid,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn value(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(z),
            Activation::Tanh => math::tanh(z),
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = math::tanh(z);
                1.0 - t * t
            }
        }
    }

    /// Value and first derivative from a single transcendental evaluation.
    #[inline]
    pub fn value_and_derivative(self, z: f64) -> (f64, f64) {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(z);
                (s, s * (1.0 - s))
            }
            Activation::Tanh => {
                let t = math::tanh(z);
                (t, 1.0 - t * t)
            }
        }
    }

    #[inline]
    pub fn second_derivative(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            Activation::Tanh => {
                let t = math::tanh(z);
                -2.0 * t * (1.0 - t * t)
            }
        }
    }

    /// Sup-norm bounds `(R1, R2, R3)` of `sigma`, `sigma'` and `sigma''`.
    pub fn bounds(self) -> (f64, f64, f64) {
        match self {
            Activation::Sigmoid => (1.0, 0.25, 1.0 / (6.0 * math::sqrt(3.0))),
            Activation::Tanh => (1.0, 1.0, 4.0 / (3.0 * math::sqrt(3.0))),
        }
    }

    pub fn r1(self) -> f64 {
        self.bounds().0
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "sigmoid" => Some(Activation::Sigmoid),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    let e = math::exp(-z.abs());
    let r = 1.0 / (1.0 + e);
    if z >= 0.0 {
        r
    } else {
        e * r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(Activation::Sigmoid.value(0.0), 0.5);
        assert_eq!(Activation::Sigmoid.derivative(0.0), 0.25);
    }

    #[test]
    fn derivatives_match_central_differences() {
        for act in [Activation::Sigmoid, Activation::Tanh] {
            for &z in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
                let h = 1e-5;
                let d1 = (act.value(z + h) - act.value(z - h)) / (2.0 * h);
                let d2 = (act.derivative(z + h) - act.derivative(z - h)) / (2.0 * h);
                assert!((d1 - act.derivative(z)).abs() < 1e-9);
                assert!((d2 - act.second_derivative(z)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn bounds_dominate_sampled_values() {
        for act in [Activation::Sigmoid, Activation::Tanh] {
            let (r1, r2, r3) = act.bounds();
            for i in -400..=400 {
                let z = i as f64 * 0.025;
                assert!(act.value(z).abs() <= r1 + 1e-15);
                assert!(act.derivative(z).abs() <= r2 + 1e-15);
                assert!(act.second_derivative(z).abs() <= r3 + 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_is_stable_for_large_arguments() {
        assert_eq!(Activation::Sigmoid.value(-800.0), 0.0);
        assert_eq!(Activation::Sigmoid.value(800.0), 1.0);
    }
}
