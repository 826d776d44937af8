use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::NnError;

/// A learnable (or buffered) tensor with its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    /// Buffers such as running statistics are serialized but never updated
    /// by the optimizer.
    pub trainable: bool,
    pub(crate) m: Vec<f32>,
    pub(crate) v: Vec<f32>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let n = value.len();
        Self {
            shape,
            value,
            grad: vec![0.0; n],
            trainable: true,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn buffer(shape: Vec<usize>, value: Vec<f32>) -> Self {
        Self {
            trainable: false,
            ..Self::new(shape, value)
        }
    }

    pub fn filled(shape: Vec<usize>, fill: f32) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![fill; n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything owning parameters. Implementations call `f` once per parameter
/// with a stable, dotted path name.
pub trait Parameterized {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));
}

/// Dotted parameter path, `prefix.name` (or `name` for an empty prefix).
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Serializable copy of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub type StateDict = BTreeMap<String, TensorData>;

pub fn state_dict(model: &mut dyn Parameterized) -> StateDict {
    let mut out = StateDict::new();
    model.visit("", &mut |name, p| {
        out.insert(
            name,
            TensorData {
                shape: p.shape.clone(),
                data: p.value.clone(),
            },
        );
    });
    out
}

pub fn load_state_dict(model: &mut dyn Parameterized, dict: &StateDict) -> Result<(), NnError> {
    let mut err = None;
    let mut seen = 0usize;
    model.visit("", &mut |name, p| {
        if err.is_some() {
            return;
        }
        match dict.get(&name) {
            None => err = Some(NnError::MissingKey(name)),
            Some(t) if t.shape != p.shape || t.data.len() != p.value.len() => {
                err = Some(NnError::ShapeMismatch {
                    name,
                    expected: p.shape.clone(),
                    found: t.shape.clone(),
                })
            }
            Some(t) => {
                p.value.copy_from_slice(&t.data);
                seen += 1;
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if seen != dict.len() {
        let mut known = Vec::new();
        model.visit("", &mut |name, _| known.push(name));
        if let Some(extra) = dict.keys().find(|k| !known.contains(k)) {
            return Err(NnError::UnexpectedKey(extra.clone()));
        }
    }
    Ok(())
}

pub fn zero_grad(model: &mut dyn Parameterized) {
    model.visit("", &mut |_, p| p.zero_grad());
}
