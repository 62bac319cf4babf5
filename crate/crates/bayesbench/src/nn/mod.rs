//! Classifier architectures and the differentiable stochastic-classifier
//! contract: pure forward passes given `(theta, x, mode, seed)`, with raw
//! pre-softmax scores retrievable and gradients available with respect to
//! both inputs and parameters.

mod params;
mod tape;

pub use params::{ParamEntry, ParamLayout, ParameterVector};
pub use tape::{ForwardTrace, Gradients};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::derive_seed;

/// Stochasticity policy for one forward pass; always an explicit argument,
/// never ambient state. `EvalStochastic` keeps dropout sampling active while
/// freezing any statistics; `EvalFrozen` disables all stochasticity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    Train,
    EvalStochastic,
    EvalFrozen,
}

impl ForwardMode {
    pub(crate) fn dropout_active(self) -> bool {
        matches!(self, ForwardMode::Train | ForwardMode::EvalStochastic)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// 3x3 convolution, SAME padding, stride 1, with bias.
    Conv3x3Same { in_ch: usize, out_ch: usize },
    Relu,
    /// 2x2 max pooling, stride 2, VALID padding.
    MaxPool2,
    Flatten,
    Dense { in_dim: usize, out_dim: usize },
    Dropout { rate: f64 },
}

/// A feed-forward classifier: layers, class count, input shape, and the
/// flat-parameter registry. `logit_scale` multiplies the pre-softmax scores
/// and exists for fault-injection studies; it is 1 for real models.
#[derive(Debug, Clone)]
pub struct Network {
    pub arch_id: String,
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub layers: Vec<Layer>,
    pub logit_scale: f64,
    layout: ParamLayout,
}

impl Network {
    pub fn new(
        arch_id: impl Into<String>,
        input_shape: (usize, usize, usize),
        num_classes: usize,
        layers: Vec<Layer>,
    ) -> Result<Self> {
        let layout = build_layout(&layers)?;
        validate_shapes(input_shape, num_classes, &layers)?;
        Ok(Network {
            arch_id: arch_id.into(),
            input_shape,
            num_classes,
            layers,
            logit_scale: 1.0,
            layout,
        })
    }

    pub fn param_len(&self) -> usize {
        self.layout.total_len()
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn has_dropout(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::Dropout { .. }))
    }

    pub fn dropout_rate(&self) -> Option<f64> {
        self.layers.iter().find_map(|l| match l {
            Layer::Dropout { rate } => Some(*rate),
            _ => None,
        })
    }

    /// Same architecture with the dropout layers removed (the deterministic
    /// collapse used by transfer attacks).
    pub fn without_dropout(&self) -> Network {
        let layers: Vec<Layer> =
            self.layers.iter().filter(|l| !matches!(l, Layer::Dropout { .. })).cloned().collect();
        let layout = build_layout(&layers).expect("dropout layers carry no parameters");
        Network {
            arch_id: format!("{}:nodrop", self.arch_id),
            input_shape: self.input_shape,
            num_classes: self.num_classes,
            layers,
            logit_scale: self.logit_scale,
            layout,
        }
    }

    /// Copy of this network with rescaled pre-softmax scores (audit fixture).
    pub fn with_logit_scale(&self, scale: f64) -> Network {
        let mut net = self.clone();
        net.logit_scale = scale;
        net.arch_id = format!("{}:scale={scale}", self.arch_id);
        net
    }

    /// He-style initialization, deterministic under the seed.
    pub fn init_params(&self, seed: u64) -> ParameterVector {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x696e_6974, 0));
        let mut data = vec![0.0; self.param_len()];
        for entry in self.layout.entries() {
            if entry.name.ends_with(".weight") {
                let fan_in = entry.shape[0];
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).unwrap();
                for v in &mut data[entry.offset..entry.offset + entry.len()] {
                    *v = normal.sample(&mut rng);
                }
            }
        }
        ParameterVector::new(data)
    }
}

fn build_layout(layers: &[Layer]) -> Result<ParamLayout> {
    let mut layout = ParamLayout::default();
    let mut conv_n = 0usize;
    let mut dense_n = 0usize;
    for layer in layers {
        match layer {
            Layer::Conv3x3Same { in_ch, out_ch } => {
                conv_n += 1;
                layout.push(format!("conv{conv_n}.weight"), vec![9 * in_ch, *out_ch]);
                layout.push(format!("conv{conv_n}.bias"), vec![*out_ch]);
            }
            Layer::Dense { in_dim, out_dim } => {
                dense_n += 1;
                layout.push(format!("dense{dense_n}.weight"), vec![*in_dim, *out_dim]);
                layout.push(format!("dense{dense_n}.bias"), vec![*out_dim]);
            }
            _ => {}
        }
    }
    Ok(layout)
}

fn validate_shapes(
    input_shape: (usize, usize, usize),
    num_classes: usize,
    layers: &[Layer],
) -> Result<()> {
    let (mut c, mut h, mut w) = input_shape;
    let mut flat: Option<usize> = None;
    for layer in layers {
        match layer {
            Layer::Conv3x3Same { in_ch, out_ch } => {
                if flat.is_some() || *in_ch != c {
                    return Err(Error::Argument(format!(
                        "conv expects {in_ch} channels, pipeline carries {c}"
                    )));
                }
                c = *out_ch;
            }
            Layer::MaxPool2 => {
                if flat.is_some() {
                    return Err(Error::Argument("pool after flatten".into()));
                }
                h /= 2;
                w /= 2;
                if h == 0 || w == 0 {
                    return Err(Error::Argument("pooled spatial size reached zero".into()));
                }
            }
            Layer::Flatten => flat = Some(c * h * w),
            Layer::Dense { in_dim, out_dim } => {
                let carried = flat.ok_or_else(|| Error::Argument("dense before flatten".into()))?;
                if carried != *in_dim {
                    return Err(Error::Argument(format!(
                        "dense expects {in_dim} inputs, pipeline carries {carried}"
                    )));
                }
                flat = Some(*out_dim);
            }
            Layer::Relu | Layer::Dropout { .. } => {}
        }
    }
    match flat {
        Some(k) if k == num_classes => Ok(()),
        other => Err(Error::Argument(format!(
            "network output dimension {other:?} does not equal num_classes {num_classes}"
        ))),
    }
}

/// The four-layer CNN: conv(32) -> relu -> pool -> conv(64) -> relu -> pool
/// -> flatten -> dense(256) -> relu -> dense(K). Convolutions use SAME
/// padding, pooling uses VALID; with `dropout` set, a dropout layer follows
/// every activation.
pub fn build_cnn(
    input_shape: (usize, usize, usize),
    num_classes: usize,
    dropout: Option<f64>,
) -> Result<Network> {
    if num_classes < 2 {
        return Err(Error::Argument("num_classes must be >= 2".into()));
    }
    if let Some(rate) = dropout {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Argument(format!("dropout rate {rate} outside [0, 1)")));
        }
    }
    let (c, h, w) = input_shape;
    let flat_dim = 64 * (h / 2 / 2) * (w / 2 / 2);
    let mut layers = vec![Layer::Conv3x3Same { in_ch: c, out_ch: 32 }, Layer::Relu];
    if let Some(rate) = dropout {
        layers.push(Layer::Dropout { rate });
    }
    layers.push(Layer::MaxPool2);
    layers.extend([Layer::Conv3x3Same { in_ch: 32, out_ch: 64 }, Layer::Relu]);
    if let Some(rate) = dropout {
        layers.push(Layer::Dropout { rate });
    }
    layers.push(Layer::MaxPool2);
    layers.extend([
        Layer::Flatten,
        Layer::Dense { in_dim: flat_dim, out_dim: 256 },
        Layer::Relu,
    ]);
    if let Some(rate) = dropout {
        layers.push(Layer::Dropout { rate });
    }
    layers.push(Layer::Dense { in_dim: 256, out_dim: num_classes });
    let id = match dropout {
        Some(rate) => format!("cnn4:drop={rate}"),
        None => "cnn4".to_string(),
    };
    Network::new(id, input_shape, num_classes, layers)
}

/// Fully-connected classifier: flatten -> (dense -> relu [-> dropout])* ->
/// dense(K).
pub fn build_mlp(
    input_shape: (usize, usize, usize),
    hidden: &[usize],
    num_classes: usize,
    dropout: Option<f64>,
) -> Result<Network> {
    if num_classes < 2 {
        return Err(Error::Argument("num_classes must be >= 2".into()));
    }
    let (c, h, w) = input_shape;
    let mut dim = c * h * w;
    let mut layers = vec![Layer::Flatten];
    for &hdim in hidden {
        layers.push(Layer::Dense { in_dim: dim, out_dim: hdim });
        layers.push(Layer::Relu);
        if let Some(rate) = dropout {
            layers.push(Layer::Dropout { rate });
        }
        dim = hdim;
    }
    layers.push(Layer::Dense { in_dim: dim, out_dim: num_classes });
    let hidden_id = hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",");
    let id = match dropout {
        Some(rate) => format!("mlp:h={hidden_id}:drop={rate}"),
        None => format!("mlp:h={hidden_id}"),
    };
    Network::new(id, input_shape, num_classes, layers)
}

/// Rebuild a network from its architecture id (checkpoint sidecars store the
/// id plus input shape and class count). The registry is extensible by
/// adding arms here.
pub fn arch_from_id(
    id: &str,
    input_shape: (usize, usize, usize),
    num_classes: usize,
) -> Result<Network> {
    let (base, scale) = match id.split_once(":scale=") {
        Some((b, s)) => {
            let scale: f64 = s
                .parse()
                .map_err(|_| Error::Argument(format!("bad logit scale in arch id `{id}`")))?;
            (b, Some(scale))
        }
        None => (id, None),
    };
    let mut net = if base == "cnn4" {
        build_cnn(input_shape, num_classes, None)?
    } else if let Some(rest) = base.strip_prefix("cnn4:drop=") {
        let rate: f64 =
            rest.parse().map_err(|_| Error::Argument(format!("bad arch id `{id}`")))?;
        build_cnn(input_shape, num_classes, Some(rate))?
    } else if let Some(rest) = base.strip_prefix("mlp:h=") {
        let (hidden_part, drop) = match rest.split_once(":drop=") {
            Some((h, d)) => {
                let rate: f64 =
                    d.parse().map_err(|_| Error::Argument(format!("bad arch id `{id}`")))?;
                (h, Some(rate))
            }
            None => (rest, None),
        };
        let hidden: Vec<usize> = hidden_part
            .split(',')
            .map(|t| t.parse().map_err(|_| Error::Argument(format!("bad arch id `{id}`"))))
            .collect::<Result<_>>()?;
        build_mlp(input_shape, &hidden, num_classes, drop)?
    } else {
        return Err(Error::Argument(format!("unknown architecture id `{id}`")));
    };
    if let Some(s) = scale {
        net = net.with_logit_scale(s);
    }
    Ok(net)
}
