use serde::{Deserialize, Serialize};

/// Hidden-layer nonlinearity. All three carry analytic first and second
/// derivatives; the second derivative feeds the pass that differentiates
/// through input gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hidden {
    Relu,
    Tanh,
    Swish,
}

/// Output-layer map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Output {
    Identity,
    Tanh,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Hidden {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Hidden::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Hidden::Tanh => x.tanh(),
            Hidden::Swish => x * sigmoid(x),
        }
    }

    #[inline]
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Hidden::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Hidden::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Hidden::Swish => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }

    #[inline]
    pub fn second_deriv(self, x: f64) -> f64 {
        match self {
            Hidden::Relu => 0.0,
            Hidden::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Hidden::Swish => {
                let s = sigmoid(x);
                s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
            }
        }
    }
}

impl Output {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Output::Identity => x,
            Output::Tanh => x.tanh(),
        }
    }

    #[inline]
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Output::Identity => 1.0,
            Output::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    #[inline]
    pub fn second_deriv(self, x: f64) -> f64 {
        match self {
            Output::Identity => 0.0,
            Output::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }
}
