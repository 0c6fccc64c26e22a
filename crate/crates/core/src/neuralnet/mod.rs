//! The classifier every node trains and exchanges.
//!
//! Parameters live in a [`ParamSet`]: an ordered list of named tensors plus
//! the architecture that produced them. Two presets exist: the compact MNIST
//! CNN (two 5x5 convolutions, max pooling, ReLU, dropout, two dense layers)
//! and a one-hidden-layer MLP for fast runs.

mod checkpoint;
mod network;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use network::{eval_loss, forward, loss_and_grad, predict};

use rand::Rng;
use thiserror::Error;

use crate::dataset::{NUM_CLASSES, PIXELS};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values produced by layer `{layer}`")]
    Numeric { layer: String },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("cannot aggregate: {0}")]
    Aggregation(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CnnConfig {
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub kernel: usize,
    pub fc1_units: usize,
    /// Channel dropout after the second convolution.
    pub conv_dropout: f64,
    /// Dropout between the two dense layers.
    pub fc_dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpConfig {
    pub hidden_units: usize,
    pub dropout: f64,
}

/// Layer layout of the classifier. Input is always one 28x28 channel and
/// output is always one logit per class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArchitectureConfig {
    Cnn(CnnConfig),
    Mlp(MlpConfig),
}

impl ArchitectureConfig {
    /// conv(10, 5x5) - pool - relu - conv(20, 5x5) - dropout2d - pool - relu
    /// - fc(50) - relu - dropout - fc(10)
    pub fn compact_cnn() -> Self {
        ArchitectureConfig::Cnn(CnnConfig {
            conv1_channels: 10,
            conv2_channels: 20,
            kernel: 5,
            fc1_units: 50,
            conv_dropout: 0.5,
            fc_dropout: 0.5,
        })
    }

    /// fc(64) - relu - fc(10)
    pub fn mlp_small() -> Self {
        ArchitectureConfig::Mlp(MlpConfig {
            hidden_units: 64,
            dropout: 0.0,
        })
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "compact_cnn" | "cnn" => Some(Self::compact_cnn()),
            "mlp_small" | "mlp" => Some(Self::mlp_small()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let rate_ok = |r: f64| (0.0..1.0).contains(&r);
        match *self {
            ArchitectureConfig::Cnn(c) => {
                if c.conv1_channels == 0 || c.conv2_channels == 0 || c.fc1_units == 0 {
                    return Err(NnError::Parameter("layer widths must be positive".into()));
                }
                if c.kernel == 0 || conv_output_side(&c) == 0 {
                    return Err(NnError::Parameter(format!(
                        "kernel {} leaves no spatial output",
                        c.kernel
                    )));
                }
                if (28 - c.kernel + 1) % 2 != 0 {
                    return Err(NnError::Parameter(format!(
                        "kernel {} gives an odd feature map before pooling",
                        c.kernel
                    )));
                }
                if !rate_ok(c.conv_dropout) || !rate_ok(c.fc_dropout) {
                    return Err(NnError::Parameter(
                        "dropout rates must lie in [0, 1)".into(),
                    ));
                }
            }
            ArchitectureConfig::Mlp(m) => {
                if m.hidden_units == 0 {
                    return Err(NnError::Parameter("hidden width must be positive".into()));
                }
                if !rate_ok(m.dropout) {
                    return Err(NnError::Parameter("dropout rate must lie in [0, 1)".into()));
                }
            }
        }
        Ok(())
    }

    /// `(name, shape, fan_in)` of every tensor in order.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let mut push = |name: &str, shape: Vec<usize>, fan_in: usize| {
            out.push((name.to_string(), shape, fan_in))
        };
        match *self {
            ArchitectureConfig::Cnn(c) => {
                let k2 = c.kernel * c.kernel;
                push(
                    "conv1.weight",
                    vec![c.conv1_channels, 1, c.kernel, c.kernel],
                    k2,
                );
                push("conv1.bias", vec![c.conv1_channels], k2);
                push(
                    "conv2.weight",
                    vec![c.conv2_channels, c.conv1_channels, c.kernel, c.kernel],
                    c.conv1_channels * k2,
                );
                push("conv2.bias", vec![c.conv2_channels], c.conv1_channels * k2);
                let flat = c.conv2_channels * conv_output_side(&c).pow(2);
                push("fc1.weight", vec![c.fc1_units, flat], flat);
                push("fc1.bias", vec![c.fc1_units], flat);
                push("fc2.weight", vec![NUM_CLASSES, c.fc1_units], c.fc1_units);
                push("fc2.bias", vec![NUM_CLASSES], c.fc1_units);
            }
            ArchitectureConfig::Mlp(m) => {
                push("fc1.weight", vec![m.hidden_units, PIXELS], PIXELS);
                push("fc1.bias", vec![m.hidden_units], PIXELS);
                push(
                    "fc2.weight",
                    vec![NUM_CLASSES, m.hidden_units],
                    m.hidden_units,
                );
                push("fc2.bias", vec![NUM_CLASSES], m.hidden_units);
            }
        }
        out
    }

    /// Compact text form stored in checkpoints.
    pub fn descriptor(&self) -> String {
        match *self {
            ArchitectureConfig::Cnn(c) => format!(
                "cnn conv1={} conv2={} kernel={} fc1={} conv_dropout={} fc_dropout={}",
                c.conv1_channels,
                c.conv2_channels,
                c.kernel,
                c.fc1_units,
                c.conv_dropout,
                c.fc_dropout
            ),
            ArchitectureConfig::Mlp(m) => {
                format!("mlp hidden={} dropout={}", m.hidden_units, m.dropout)
            }
        }
    }

    pub fn from_descriptor(s: &str) -> Result<Self, NnError> {
        let bad = || NnError::Format(format!("bad architecture descriptor `{s}`"));
        let mut parts = s.split_whitespace();
        let kind = parts.next().ok_or_else(bad)?;
        let mut fields = std::collections::BTreeMap::new();
        for kv in parts {
            let (k, v) = kv.split_once('=').ok_or_else(bad)?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(bad);
        let uint = |k: &str| get(k)?.parse::<usize>().map_err(|_| bad());
        let real = |k: &str| get(k)?.parse::<f64>().map_err(|_| bad());
        let arch = match kind {
            "cnn" => ArchitectureConfig::Cnn(CnnConfig {
                conv1_channels: uint("conv1")?,
                conv2_channels: uint("conv2")?,
                kernel: uint("kernel")?,
                fc1_units: uint("fc1")?,
                conv_dropout: real("conv_dropout")?,
                fc_dropout: real("fc_dropout")?,
            }),
            "mlp" => ArchitectureConfig::Mlp(MlpConfig {
                hidden_units: uint("hidden")?,
                dropout: real("dropout")?,
            }),
            _ => return Err(bad()),
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// Side length of the feature map after both conv+pool stages.
fn conv_output_side(c: &CnnConfig) -> usize {
    let after1 = 28usize.saturating_sub(c.kernel).div_ceil(2);
    after1.saturating_sub(c.kernel - 1) / 2
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A model's complete parameter collection.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    arch: ArchitectureConfig,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn zeros(arch: ArchitectureConfig) -> Self {
        let tensors = arch
            .tensor_layout()
            .into_iter()
            .map(|(name, shape, _)| {
                let n = shape.iter().product();
                Tensor {
                    name,
                    shape,
                    data: vec![0.0; n],
                }
            })
            .collect();
        ParamSet { arch, tensors }
    }

    pub(crate) fn from_parts(
        arch: ArchitectureConfig,
        tensors: Vec<Tensor>,
    ) -> Result<Self, NnError> {
        let layout = arch.tensor_layout();
        if layout.len() != tensors.len() {
            return Err(NnError::Shape(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), t) in layout.iter().zip(&tensors) {
            if *name != t.name
                || *shape != t.shape
                || t.data.len() != shape.iter().product::<usize>()
            {
                return Err(NnError::Shape(format!(
                    "tensor `{}` does not match architecture",
                    t.name
                )));
            }
        }
        Ok(ParamSet { arch, tensors })
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet::zeros(self.arch)
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data.iter().copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.tensors.iter_mut().flat_map(|t| t.data.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    /// Same architecture and identical tensor names and shapes.
    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|t| !t.data.iter().all(|v| v.is_finite()))
            .map(|t| t.name.as_str())
    }
}

/// Fan-in scaled uniform initialisation: weights from `U(-a, a)` with
/// `a = sqrt(6 / fan_in)` (variance `2 / fan_in`), zero biases.
pub fn init_params<R: Rng + ?Sized>(
    arch: &ArchitectureConfig,
    rng: &mut R,
) -> Result<ParamSet, NnError> {
    arch.validate()?;
    let mut p = ParamSet::zeros(*arch);
    for (t, (_, _, fan_in)) in p.tensors.iter_mut().zip(arch.tensor_layout()) {
        if t.name.ends_with(".bias") {
            continue;
        }
        let a = (6.0 / fan_in as f64).sqrt();
        for v in t.data.iter_mut() {
            *v = rng.random_range(-a..a);
        }
    }
    Ok(p)
}

/// Classic momentum: `v <- momentum * v + g; p <- p - lr * v`.
pub fn sgd_momentum_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    velocity: &mut ParamSet,
    lr: f64,
    momentum: f64,
) -> Result<(), NnError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(NnError::Parameter(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(NnError::Parameter(format!(
            "momentum must lie in [0, 1), got {momentum}"
        )));
    }
    if !params.same_shape(grads) || !params.same_shape(velocity) {
        return Err(NnError::Shape(
            "parameters, gradients and velocity differ in shape".into(),
        ));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(NnError::Numeric {
            layer: format!("gradient of {name}"),
        });
    }
    for ((p, g), v) in params
        .tensors
        .iter_mut()
        .zip(&grads.tensors)
        .zip(velocity.tensors.iter_mut())
    {
        for ((pv, &gv), vv) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    if let Some(name) = params.first_non_finite() {
        return Err(NnError::Numeric {
            layer: name.to_string(),
        });
    }
    Ok(())
}

/// Element-wise weighted mean `sum(w_j * theta_j) / sum(w_j)`, layer by layer.
///
/// Each output coordinate is clamped to the range spanned by its inputs so
/// rounding can never leave the convex hull.
pub fn average_params(models: &[(&ParamSet, f64)]) -> Result<ParamSet, NnError> {
    let (first, _) = models
        .first()
        .ok_or_else(|| NnError::Aggregation("no models to average".into()))?;
    for (m, w) in models {
        if !m.same_shape(first) {
            return Err(NnError::Aggregation(
                "models differ in tensor shapes".into(),
            ));
        }
        if !(w.is_finite() && *w >= 0.0) {
            return Err(NnError::Parameter(format!(
                "aggregation weight {w} is not a non-negative number"
            )));
        }
    }
    let total: f64 = models.iter().map(|(_, w)| w).sum();
    if total <= 0.0 {
        return Err(NnError::Parameter(
            "total aggregation weight is zero".into(),
        ));
    }
    if models.len() == 1 {
        return Ok((*first).clone());
    }
    let mut out = first.zeros_like();
    for (ti, t) in out.tensors.iter_mut().enumerate() {
        for (k, slot) in t.data.iter_mut().enumerate() {
            let mut acc = 0.0;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for (m, w) in models {
                let v = m.tensors[ti].data[k];
                acc += w * v;
                lo = lo.min(v);
                hi = hi.max(v);
            }
            *slot = (acc / total).clamp(lo, hi);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};
    use proptest::prelude::*;

    fn scalar_model(v: f64) -> ParamSet {
        let mut p = ParamSet::zeros(ArchitectureConfig::Mlp(MlpConfig {
            hidden_units: 1,
            dropout: 0.0,
        }));
        for x in p.values_mut() {
            *x = v;
        }
        p
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let arch = ArchitectureConfig::compact_cnn();
        let a = init_params(&arch, &mut derive(1, Stream::Init, &[])).unwrap();
        let b = init_params(&arch, &mut derive(1, Stream::Init, &[])).unwrap();
        let c = init_params(&arch, &mut derive(2, Stream::Init, &[])).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a
            .tensor("conv1.bias")
            .unwrap()
            .data
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn init_variance_matches_fan_in() {
        let arch = ArchitectureConfig::compact_cnn();
        let expected = 2.0 / 25.0;
        for seed in 0..10 {
            let p = init_params(&arch, &mut derive(seed, Stream::Init, &[])).unwrap();
            let w = &p.tensor("conv1.weight").unwrap().data;
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
            assert!(
                (var - expected).abs() <= 0.5 * expected,
                "seed {seed}: var {var}"
            );
        }
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = scalar_model(1.0);
        let g = scalar_model(0.25);
        let mut v = p.zeros_like();
        sgd_momentum_step(&mut p, &g, &mut v, 1.0, 0.0).unwrap();
        assert!(p.values().all(|x| x == 0.75));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_model(3.0);
        let before = p.clone();
        let g = p.zeros_like();
        let mut v = p.zeros_like();
        sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.9).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_recurrence() {
        let g_val = 0.5;
        let mut p = scalar_model(0.0);
        let g = scalar_model(g_val);
        let mut v = p.zeros_like();
        sgd_momentum_step(&mut p, &g, &mut v, 1e-3, 0.9).unwrap();
        let after_one = p.clone();
        sgd_momentum_step(&mut p, &g, &mut v, 1e-3, 0.9).unwrap();
        for (a, b) in p.values().zip(after_one.values()) {
            assert!(((b - a) - 1e-3 * 1.9 * g_val).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_rejects_bad_inputs() {
        let mut p = scalar_model(0.0);
        let mut v = p.zeros_like();
        let g = scalar_model(f64::NAN);
        assert!(matches!(
            sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.9),
            Err(NnError::Numeric { .. })
        ));
        let g = scalar_model(1.0);
        assert!(sgd_momentum_step(&mut p, &g, &mut v, 0.0, 0.9).is_err());
        assert!(sgd_momentum_step(&mut p, &g, &mut v, 0.1, 1.0).is_err());
    }

    #[test]
    fn average_examples() {
        let a = scalar_model(2.0);
        let b = scalar_model(6.0);
        assert_eq!(average_params(&[(&a, 7.0)]).unwrap(), a);
        let avg = average_params(&[(&a, 1.0), (&b, 3.0)]).unwrap();
        assert!(avg.values().all(|x| x == 5.0));
        assert!(matches!(average_params(&[]), Err(NnError::Aggregation(_))));
        assert!(average_params(&[(&a, 0.0), (&b, 0.0)]).is_err());
        let other = ParamSet::zeros(ArchitectureConfig::mlp_small());
        assert!(matches!(
            average_params(&[(&a, 1.0), (&other, 1.0)]),
            Err(NnError::Aggregation(_))
        ));
    }

    #[test]
    fn descriptor_roundtrip() {
        for arch in [
            ArchitectureConfig::compact_cnn(),
            ArchitectureConfig::mlp_small(),
        ] {
            assert_eq!(
                ArchitectureConfig::from_descriptor(&arch.descriptor()).unwrap(),
                arch
            );
        }
        assert!(ArchitectureConfig::from_descriptor("rnn size=3").is_err());
    }

    #[test]
    fn cnn_layout_shapes() {
        let layout = ArchitectureConfig::compact_cnn().tensor_layout();
        let fc1 = layout.iter().find(|(n, _, _)| n == "fc1.weight").unwrap();
        assert_eq!(fc1.1, vec![50, 320]);
    }

    fn model_strategy() -> impl Strategy<Value = Vec<(Vec<f64>, f64)>> {
        proptest::collection::vec(
            (proptest::collection::vec(-10.0f64..10.0, 4), 0.01f64..100.0),
            1..6,
        )
    }

    fn build(values: &[f64]) -> ParamSet {
        let mut p = ParamSet::zeros(ArchitectureConfig::Mlp(MlpConfig {
            hidden_units: 1,
            dropout: 0.0,
        }));
        let n = p.len();
        for (k, x) in p.values_mut().enumerate() {
            *x = values[k % values.len()] + (k / values.len()) as f64 / n as f64;
        }
        p
    }

    proptest! {
        #[test]
        fn average_is_convex_and_order_free(models in model_strategy(), seed in any::<u64>()) {
            let sets: Vec<ParamSet> = models.iter().map(|(v, _)| build(v)).collect();
            let pairs: Vec<(&ParamSet, f64)> = sets.iter().zip(&models).map(|(s, (_, w))| (s, *w)).collect();
            let avg = average_params(&pairs).unwrap();
            let mut shuffled = pairs.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut derive(seed, Stream::Training, &[]));
            let avg2 = average_params(&shuffled).unwrap();
            let scale = pairs.iter().flat_map(|(s, _)| s.values()).fold(1.0f64, |m, v| m.max(v.abs()));
            for (k, (a, b)) in avg.values().zip(avg2.values()).enumerate() {
                prop_assert!((a - b).abs() <= 1e-12 * scale);
                let lo = sets.iter().map(|s| s.values().nth(k).unwrap()).fold(f64::INFINITY, f64::min);
                let hi = sets.iter().map(|s| s.values().nth(k).unwrap()).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo <= a && a <= hi);
            }
        }

        #[test]
        fn average_of_identical_models_is_identity(v in proptest::collection::vec(-5.0f64..5.0, 4), k in 1usize..6, w in 0.1f64..10.0) {
            let m = build(&v);
            let pairs: Vec<(&ParamSet, f64)> = (0..k).map(|j| (&m, w * (j + 1) as f64)).collect();
            prop_assert_eq!(average_params(&pairs).unwrap(), m);
        }

        #[test]
        fn single_node_influence_is_bounded(
            models in model_strategy(),
            delta in -50.0f64..50.0,
        ) {
            let sets: Vec<ParamSet> = models.iter().map(|(v, _)| build(v)).collect();
            let pairs: Vec<(&ParamSet, f64)> = sets.iter().zip(&models).map(|(s, (_, w))| (s, *w)).collect();
            let before = average_params(&pairs).unwrap();
            let mut moved = sets[0].clone();
            for x in moved.values_mut() { *x += delta; }
            let mut pairs2 = pairs.clone();
            pairs2[0].0 = &moved;
            let after = average_params(&pairs2).unwrap();
            let total: f64 = models.iter().map(|(_, w)| w).sum();
            let bound = models[0].1 / total * delta.abs();
            for (a, b) in before.values().zip(after.values()) {
                prop_assert!((a - b).abs() <= bound * (1.0 + 1e-9) + 1e-9);
            }
        }
    }
}
